"""
Data models for feature-based alignment.
"""

from dataclasses import dataclass, field
from typing import Sequence, Tuple

import numpy as np

from core.errors import InvalidArgumentError
from models.image import BBox

SINGULAR_DET = 1e-12


@dataclass(frozen=True)
class Keypoint:
    """Corner location with its response and normalized patch descriptor."""
    x: float
    y: float
    score: float
    descriptor: np.ndarray = field(repr=False, compare=False)


@dataclass(frozen=True)
class Match:
    """Descriptor correspondence between keypoint sets a and b."""
    idx_a: int
    idx_b: int
    distance: float
    ratio: float


@dataclass(frozen=True)
class Homography:
    """3x3 projective transform normalized so m[2][2] = 1."""
    m: np.ndarray = field(repr=False)

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64)
        if m.shape != (3, 3) or not np.all(np.isfinite(m)):
            raise InvalidArgumentError("homography must be a finite 3x3 matrix")
        if abs(m[2, 2]) > 1e-15:
            m = m / m[2, 2]
        m = m.copy()
        m.setflags(write=False)
        object.__setattr__(self, "m", m)

    @classmethod
    def identity(cls) -> 'Homography':
        return cls(np.eye(3))

    @property
    def determinant(self) -> float:
        return float(np.linalg.det(self.m))

    def is_invertible(self) -> bool:
        return abs(self.determinant) > SINGULAR_DET

    def inverse(self) -> 'Homography':
        if not self.is_invertible():
            raise InvalidArgumentError("homography is singular")
        return Homography(np.linalg.inv(self.m))

    def compose(self, other: 'Homography') -> 'Homography':
        """self after other."""
        return Homography(self.m @ other.m)

    def map_points(self, points: np.ndarray) -> np.ndarray:
        """Map an (n, 2) array of points."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        homogeneous = np.hstack([points, np.ones((len(points), 1))]) @ self.m.T
        return homogeneous[:, :2] / homogeneous[:, 2:3]

    def map_point(self, x: float, y: float) -> Tuple[float, float]:
        px, py = self.map_points(np.array([[x, y]]))[0]
        return float(px), float(py)

    def map_box(self, box: BBox) -> BBox:
        """Axis-aligned bounding box of the four mapped corners."""
        corners = np.array([[box.x, box.y], [box.x2, box.y],
                            [box.x, box.y2], [box.x2, box.y2]], dtype=np.float64)
        mapped = self.map_points(corners)
        return BBox.from_points(mapped[:, 0], mapped[:, 1])

    def to_list(self) -> list:
        return [[float(v) for v in row] for row in self.m]

    @classmethod
    def scaling(cls, sx: float, sy: float) -> 'Homography':
        return cls(np.diag([sx, sy, 1.0]))


@dataclass
class AlignmentDiagnostics:
    """What the aligner saw; carried into the inspection report."""
    keypoints_reference: int = 0
    keypoints_captured: int = 0
    matches_retained: int = 0
    inliers: int = 0
    inlier_ratio: float = 0.0
    mean_reprojection_error: float = 0.0

    def to_dict(self) -> dict:
        return {
            "keypoints_reference": self.keypoints_reference,
            "keypoints_captured": self.keypoints_captured,
            "matches_retained": self.matches_retained,
            "inliers": self.inliers,
            "inlier_ratio": round(self.inlier_ratio, 6),
            "mean_reprojection_error": round(self.mean_reprojection_error, 6),
        }


def point_pairs(matches: Sequence[Match], keypoints_a: Sequence[Keypoint],
                keypoints_b: Sequence[Keypoint]) -> Tuple[np.ndarray, np.ndarray]:
    """Coordinates of matched keypoints as two (n, 2) arrays."""
    src = np.array([[keypoints_a[m.idx_a].x, keypoints_a[m.idx_a].y] for m in matches], dtype=np.float64)
    dst = np.array([[keypoints_b[m.idx_b].x, keypoints_b[m.idx_b].y] for m in matches], dtype=np.float64)
    return src.reshape(-1, 2), dst.reshape(-1, 2)
