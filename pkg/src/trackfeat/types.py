"""Small containers shared across modules.

Pixel coordinates are continuous ``(x, y)``; cell ``(col i, row j)`` has its
center at ``(i + 0.5, j + 0.5)``. Map-valued data is stored row-major as
``(height, width)`` arrays.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class PixelGrid:
    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"grid must be at least 1x1, got {self.width}x{self.height}")

    @property
    def shape(self):
        return (self.height, self.width)

    @property
    def size(self):
        return self.width * self.height

    @property
    def diagonal(self):
        return float(np.hypot(self.width, self.height))

    @classmethod
    def of(cls, array):
        h, w = np.shape(array)[:2]
        return cls(int(w), int(h))

    def centers(self):
        """(H, W, 2) array of cell-center coordinates."""
        jj, ii = np.mgrid[0:self.height, 0:self.width]
        return np.stack([ii + 0.5, jj + 0.5], axis=-1).astype(np.float64)

    def contains(self, coords):
        coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
        return ((coords[:, 0] >= 0) & (coords[:, 0] < self.width)
                & (coords[:, 1] >= 0) & (coords[:, 1] < self.height))


@dataclass
class KeypointSet:
    """Subpixel detections ``coords`` (K, 2) with aligned ``scores`` (K,)."""

    coords: np.ndarray
    scores: np.ndarray = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        if self.scores is None:
            self.scores = np.ones(len(self.coords))
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if len(self.scores) != len(self.coords):
            raise ValueError("scores and coords differ in length")

    def __len__(self):
        return len(self.coords)

    def subset(self, idx):
        return KeypointSet(self.coords[idx], self.scores[idx])


@dataclass
class DescriptorSet:
    """Unit-norm description vectors (K, D) aligned with a KeypointSet."""

    vectors: np.ndarray
    keypoints: KeypointSet | None = None

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise ValueError("descriptor vectors must be (K, D)")
        if self.keypoints is not None and len(self.keypoints) != len(self.vectors):
            raise ValueError("descriptor count does not match keypoint count")

    @property
    def count(self):
        return self.vectors.shape[0]

    @property
    def dim(self):
        return self.vectors.shape[1]


@dataclass
class MatchSet:
    """One-to-one index pairs between two keypoint sets."""

    idx_a: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    idx_b: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    confidence: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.idx_a = np.asarray(self.idx_a, dtype=np.int64).reshape(-1)
        self.idx_b = np.asarray(self.idx_b, dtype=np.int64).reshape(-1)
        self.confidence = np.asarray(self.confidence, dtype=np.float64).reshape(-1)

    def __len__(self):
        return len(self.idx_a)

    def pairs(self):
        return set(zip(self.idx_a.tolist(), self.idx_b.tolist()))

    def is_one_to_one(self):
        return len(set(self.idx_a.tolist())) == len(self) and len(set(self.idx_b.tolist())) == len(self)
