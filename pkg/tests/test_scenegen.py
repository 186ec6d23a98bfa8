import dataclasses

import numpy as np
import pytest

from trackfeat.geometry import DepthMap, project_points, warp_coords
from trackfeat.scenegen import SceneParams, TrackSet, make_scene, track_keypoints, visible_in


def _with_tracks(scene, det_a, det_b):
    tr = TrackSet(scene.tracks.points3d, det_a, det_b)
    return dataclasses.replace(scene, tracks=tr)


class TestMakeScene:
    def test_deterministic(self):
        a = make_scene(SceneParams(surface="heightfield"), 17)
        b = make_scene(SceneParams(surface="heightfield"), 17)
        assert a.image_a.tobytes() == b.image_a.tobytes()
        assert a.image_b.tobytes() == b.image_b.tobytes()
        assert a.depth_b.depth.tobytes() == b.depth_b.depth.tobytes()
        assert a.tracks.points3d.tobytes() == b.tracks.points3d.tobytes()
        assert np.array_equal(a.tracks.detected_a, b.tracks.detected_a)

    def test_seed_changes_scene(self):
        assert not np.array_equal(make_scene(SceneParams(), 1).image_a, make_scene(SceneParams(), 2).image_a)

    def test_rejects_small_grid(self):
        with pytest.raises(ValueError):
            make_scene(SceneParams(width=15, height=32), 0)

    def test_full_detection_probability(self):
        s = make_scene(SceneParams(detection_prob=1.0), 3)
        assert s.tracks.detected_a.all() and s.tracks.detected_b.all()

    def test_every_track_has_a_flag(self, planar_scenes):
        for s in planar_scenes:
            assert np.all(s.tracks.detected_a | s.tracks.detected_b)

    def test_shapes_ranges_and_sky(self, planar_scenes):
        for s in planar_scenes:
            assert s.image_a.shape == s.depth_a.depth.shape == (64, 64)
            assert 0.0 <= s.image_a.min() and s.image_a.max() <= 1.0
            # the top rows look at the sky band, which has no valid depth
            assert not s.depth_a.valid[0].any()
            assert s.depth_a.valid[-1].all()

    def test_tracks_project_into_a_view(self, planar_scenes):
        for s in planar_scenes:
            uv_a, _, _ = project_points(s.tracks.points3d, s.cam_a)
            uv_b, _, _ = project_points(s.tracks.points3d, s.cam_b)
            g = s.grid
            assert np.all(g.contains(np.nan_to_num(uv_a, nan=-1)) | g.contains(np.nan_to_num(uv_b, nan=-1)))

    def test_planar_track_warp_matches_projection(self, planar_scenes):
        for s in planar_scenes:
            uv_a, vis_a = visible_in(s.tracks.points3d, s.cam_a, s.depth_a)
            uv_b, _, _ = project_points(s.tracks.points3d, s.cam_b)
            warped, kept = warp_coords(uv_a[vis_a], s.warp_ab)
            assert len(kept) > 0
            assert np.max(np.hypot(*(warped - uv_b[vis_a][kept]).T)) < 0.05

    def test_tracks_are_visible_blobs(self, planar_scenes):
        # tracks are painted into the texture, so the image deviates from mid-grey there
        s = planar_scenes[0]
        uv, vis = visible_in(s.tracks.points3d, s.cam_a, s.depth_a)
        ij = np.floor(uv[vis]).astype(int)
        dev_tracks = np.abs(s.image_a[ij[:, 1], ij[:, 0]] - 0.5).mean()
        dev_all = np.abs(s.image_a[s.depth_a.valid] - 0.5).mean()
        assert dev_tracks > 2 * dev_all


class TestTrackKeypoints:
    @staticmethod
    def _covisible_track(s):
        uv_a, vis_a = visible_in(s.tracks.points3d, s.cam_a, s.depth_a)
        uv_b, vis_b = visible_in(s.tracks.points3d, s.cam_b, s.depth_b)
        both = np.flatnonzero(vis_a & vis_b)
        _, ka = warp_coords(uv_a[both], s.warp_ab)
        _, kb = warp_coords(uv_b[both], s.warp_ba)
        return int(np.intersect1d(both[ka], both[kb])[0])

    @pytest.mark.parametrize("view", ["A", "B"])
    def test_union_adds_other_view_detection(self, planar_scenes, view):
        s = planar_scenes[0]
        i = self._covisible_track(s)
        n = len(s.tracks)
        # only the other view fired on track i
        here = np.ones(n, dtype=bool)
        here[i] = False
        there = ~here
        det_a, det_b = (here, there) if view == "A" else (there, here)
        _, idx = track_keypoints(_with_tracks(s, det_a, det_b), view, return_index=True)
        assert i in idx.tolist()

    def test_occluded_other_view_detection_is_dropped(self, planar_scenes):
        s = planar_scenes[1]
        i = self._covisible_track(s)
        uv, _, _ = project_points(s.tracks.points3d[i:i + 1], s.cam_a)
        c, r = np.floor(uv[0]).astype(int)
        # put an occluder at half depth in front of the track in view A
        depth = s.depth_a.depth.copy()
        depth[max(r - 2, 0):r + 3, max(c - 2, 0):c + 3] *= 0.5
        occluded = dataclasses.replace(s, depth_a=DepthMap(depth, s.depth_a.valid))
        n = len(s.tracks)
        det_a = np.zeros(n, dtype=bool)
        det_b = np.ones(n, dtype=bool)
        _, idx = track_keypoints(_with_tracks(occluded, det_a, det_b), "A", return_index=True)
        assert i not in idx.tolist()
        _, idx = track_keypoints(_with_tracks(s, det_a, det_b), "A", return_index=True)
        assert i in idx.tolist()

    def test_full_detection_sets_align(self):
        for seed in range(4):
            s = make_scene(SceneParams(detection_prob=1.0), seed)
            ka, ia = track_keypoints(s, "A", return_index=True)
            kb, ib = track_keypoints(s, "B", return_index=True)
            common = np.intersect1d(ia, ib)
            # with q = 1 every covisible track is in both sets
            _, vis_a = visible_in(s.tracks.points3d, s.cam_a, s.depth_a)
            _, vis_b = visible_in(s.tracks.points3d, s.cam_b, s.depth_b)
            assert set(ia.tolist()) == set(np.flatnonzero(vis_a).tolist())
            assert set(ib.tolist()) == set(np.flatnonzero(vis_b).tolist())
            pa = ka.coords[np.searchsorted(ia, common)]
            pb = kb.coords[np.searchsorted(ib, common)]
            warped, kept = warp_coords(pa, s.warp_ab)
            assert np.max(np.hypot(*(warped - pb[kept]).T)) < 0.05

    def test_covisible_subset_property(self, planar_scenes, bumpy_scenes):
        for s in planar_scenes + bumpy_scenes:
            ka, ia = track_keypoints(s, "A", return_index=True)
            kb, ib = track_keypoints(s, "B", return_index=True)
            warped, kept = warp_coords(ka.coords, s.warp_ab)
            for p, t in zip(warped, ia[kept]):
                # tracks covisible from A are in B's set, at the warped location
                assert t in ib
                assert np.hypot(*(kb.coords[ib.tolist().index(t)] - p)) < 0.1

    def test_more_detections_with_higher_q(self):
        means = []
        for q in (0.3, 0.6, 0.9):
            sizes = [len(track_keypoints(make_scene(SceneParams(width=32, height=32, track_count=12,
                                                                detection_prob=q), seed), "A"))
                     for seed in range(100)]
            means.append(np.mean(sizes))
        assert means[0] < means[1] < means[2]
