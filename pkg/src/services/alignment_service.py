"""
Reference-to-capture alignment.

Keypoints are Harris corners described by zero-mean, unit-norm intensity
patches (plates are fixtured, so rotation invariance is not needed).
Descriptors are matched exhaustively with a ratio test, a homography is
fitted with seeded RANSAC and refined by normalized DLT on all inliers,
and the reference is warped into the captured frame so reference-frame
boxes can be transferred onto the captured plate.
"""

from typing import List, Optional, Sequence, Tuple

import cv2
import numpy as np

from core.base import IFeatureDetector
from core.errors import AlignmentFailedError, InsufficientDataError, InvalidArgumentError
from models.config import AlignmentConfig
from models.geometry import AlignmentDiagnostics, Homography, Keypoint, Match, point_pairs
from models.image import GrayImage
from models.regions import Region
from utils.image_processing import resize
from utils.logging_config import get_logger

logger = get_logger(__name__)

MAX_REDRAWS = 100
COLLINEAR_EPS = 1e-6


class HarrisPatchDetector(IFeatureDetector):
    """Harris corner response with normalized square patch descriptors."""

    def __init__(self, patch_size: int = 16, block_size: int = 3, k: float = 0.04,
                 response_floor: float = 0.01, nms_radius: int = 4):
        self.patch_size = patch_size
        self.block_size = block_size
        self.k = k
        self.response_floor = response_floor
        self.nms_radius = nms_radius

    @classmethod
    def from_config(cls, cfg: AlignmentConfig) -> 'HarrisPatchDetector':
        return cls(cfg.patch_size, cfg.harris_block, cfg.harris_k, cfg.response_floor, cfg.nms_radius)

    def detect(self, image: GrayImage, max_keypoints: int) -> List[Keypoint]:
        half = self.patch_size // 2
        if image.width < self.patch_size + 2 or image.height < self.patch_size + 2:
            return []

        pixels = image.pixels.astype(np.float32) / 255.0
        response = cv2.cornerHarris(pixels, self.block_size, 3, self.k)
        peak = float(response.max())
        if peak <= 1e-12:
            return []

        window = np.ones((2 * self.nms_radius + 1, 2 * self.nms_radius + 1), dtype=np.uint8)
        local_max = response >= cv2.dilate(response, window)
        candidates = local_max & (response > self.response_floor * peak)

        # Patches must fit inside the image
        candidates[:half, :] = False
        candidates[-half:, :] = False
        candidates[:, :half] = False
        candidates[:, -half:] = False

        ys, xs = np.nonzero(candidates)
        if len(xs) == 0:
            return []
        scores = response[ys, xs]
        # Descending score, ties by raster position
        order = np.lexsort((xs, ys, -scores))

        keypoints = []
        for i in order:
            if len(keypoints) >= max_keypoints:
                break
            x, y = int(xs[i]), int(ys[i])
            patch = pixels[y - half:y + half, x - half:x + half].astype(np.float64).ravel()
            patch = patch - patch.mean()
            norm = np.linalg.norm(patch)
            if norm < 1e-9:
                continue
            dx, dy = _subpixel_offset(response, x, y)
            keypoints.append(Keypoint(
                x=x + dx, y=y + dy, score=float(scores[i]),
                descriptor=(patch / norm).astype(np.float32),
            ))
        return keypoints


def _subpixel_offset(response: np.ndarray, x: int, y: int) -> Tuple[float, float]:
    """Quadratic peak refinement, clamped to half a pixel."""
    def offset(left, centre, right):
        denom = left - 2.0 * centre + right
        if abs(denom) < 1e-12:
            return 0.0
        return float(np.clip(0.5 * (left - right) / denom, -0.5, 0.5))

    h, w = response.shape
    dx = offset(response[y, x - 1], response[y, x], response[y, x + 1]) if 0 < x < w - 1 else 0.0
    dy = offset(response[y - 1, x], response[y, x], response[y + 1, x]) if 0 < y < h - 1 else 0.0
    return dx, dy


def detect_features(img: GrayImage, max_keypoints: int,
                    params: Optional[AlignmentConfig] = None) -> List[Keypoint]:
    """Detect up to max_keypoints corners sorted by descending response."""
    detector = HarrisPatchDetector.from_config(params or AlignmentConfig())
    return detector.detect(img, max_keypoints)


def descriptors_of(keypoints: Sequence[Keypoint]) -> np.ndarray:
    if not keypoints:
        return np.zeros((0, 0), dtype=np.float32)
    return np.vstack([kp.descriptor for kp in keypoints]).astype(np.float32)


def match_features(a: np.ndarray, b: np.ndarray, ratio: float = 0.75) -> List[Match]:
    """
    Exhaustive nearest / second-nearest matching with Lowe's ratio test.

    A match is kept iff d1 / d2 < ratio; one-to-one is enforced by keeping
    the lowest-distance claim on every b-index.
    """
    if not 0 < ratio < 1:
        raise InvalidArgumentError(f"ratio must be in (0, 1), got {ratio}")
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    if a.size == 0 or b.size == 0 or len(a) == 0 or len(b) == 0:
        return []

    matcher = cv2.BFMatcher(cv2.NORM_L2, crossCheck=False)
    k = 2 if len(b) >= 2 else 1
    candidates = {}
    for pair in matcher.knnMatch(a, b, k=k):
        if not pair:
            continue
        best = pair[0]
        d1 = float(best.distance)
        d2 = float(pair[1].distance) if len(pair) > 1 else float("inf")
        if d2 == 0.0:
            continue  # indistinguishable duplicates
        match_ratio = 0.0 if np.isinf(d2) else d1 / d2
        if match_ratio >= ratio:
            continue
        match = Match(idx_a=int(best.queryIdx), idx_b=int(best.trainIdx), distance=d1, ratio=match_ratio)
        current = candidates.get(match.idx_b)
        if current is None or (match.distance, match.idx_a) < (current.distance, current.idx_a):
            candidates[match.idx_b] = match
    return sorted(candidates.values(), key=lambda m: m.idx_a)


def _normalization(points: np.ndarray) -> np.ndarray:
    """Hartley normalization: centroid to origin, mean distance sqrt(2)."""
    centroid = points.mean(axis=0)
    mean_dist = np.mean(np.linalg.norm(points - centroid, axis=1))
    scale = np.sqrt(2.0) / mean_dist if mean_dist > 1e-12 else 1.0
    return np.array([[scale, 0, -scale * centroid[0]],
                     [0, scale, -scale * centroid[1]],
                     [0, 0, 1]], dtype=np.float64)


def fit_homography_dlt(src: np.ndarray, dst: np.ndarray) -> Optional[np.ndarray]:
    """Normalized DLT least squares; None when the system is degenerate."""
    t_src = _normalization(src)
    t_dst = _normalization(dst)
    ones = np.ones((len(src), 1))
    s = (np.hstack([src, ones]) @ t_src.T)[:, :2]
    d = (np.hstack([dst, ones]) @ t_dst.T)[:, :2]

    rows = []
    for (x, y), (xp, yp) in zip(s, d):
        rows.append([-x, -y, -1, 0, 0, 0, x * xp, y * xp, xp])
        rows.append([0, 0, 0, -x, -y, -1, x * yp, y * yp, yp])
    _, _, vt = np.linalg.svd(np.asarray(rows, dtype=np.float64))
    h_norm = vt[-1].reshape(3, 3)
    h = np.linalg.inv(t_dst) @ h_norm @ t_src
    if abs(h[2, 2]) < 1e-15 or not np.all(np.isfinite(h)):
        return None
    h = h / h[2, 2]
    if abs(np.linalg.det(h)) <= 1e-12:
        return None
    return h


def _has_collinear_triple(points: np.ndarray) -> bool:
    scale = max(1.0, float(np.ptp(points, axis=0).max()))
    for i, j, k in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)):
        (x1, y1), (x2, y2), (x3, y3) = points[i], points[j], points[k]
        area = abs((x2 - x1) * (y3 - y1) - (x3 - x1) * (y2 - y1))
        if area <= COLLINEAR_EPS * scale * scale:
            return True
    return False


def reprojection_errors(h: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    homogeneous = np.hstack([src, np.ones((len(src), 1))]) @ h.T
    w = homogeneous[:, 2:3]
    with np.errstate(divide="ignore", invalid="ignore"):
        projected = homogeneous[:, :2] / w
    errors = np.linalg.norm(projected - dst, axis=1)
    errors[~np.isfinite(errors)] = np.inf
    return errors


def estimate_homography_ransac(src: np.ndarray, dst: np.ndarray, iters: int = 2000,
                               reproj_tol: float = 3.0, seed: int = 0) -> Tuple[Homography, np.ndarray]:
    """
    Robust homography from point pairs (src -> dst).

    The best model maximizes the inlier count, ties broken by lower mean
    inlier reprojection error; it is then refit on all its inliers.
    Deterministic for a given seed.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    n = len(src)
    if n < 4 or len(dst) != n:
        raise InsufficientDataError(f"RANSAC needs >= 4 correspondences, got {n}")
    if iters < 1 or reproj_tol <= 0:
        raise InvalidArgumentError("iters must be >= 1 and reproj_tol > 0")

    rng = np.random.default_rng(seed)
    best_mask = None
    best_key = (-1, np.inf)

    for _ in range(iters):
        h = None
        for _ in range(MAX_REDRAWS):
            idx = rng.choice(n, 4, replace=False)
            if _has_collinear_triple(src[idx]) or _has_collinear_triple(dst[idx]):
                continue
            h = fit_homography_dlt(src[idx], dst[idx])
            if h is not None:
                break
        if h is None:
            continue

        errors = reprojection_errors(h, src, dst)
        mask = errors < reproj_tol
        count = int(mask.sum())
        mean_error = float(errors[mask].mean()) if count else np.inf
        if (count, -mean_error) > (best_key[0], -best_key[1]):
            best_key = (count, mean_error)
            best_mask = mask
            if count == n:
                break

    if best_mask is None or best_key[0] < 4:
        raise InsufficientDataError("RANSAC found no non-degenerate model with >= 4 inliers")

    refit = fit_homography_dlt(src[best_mask], dst[best_mask])
    if refit is None:
        raise InsufficientDataError("inlier set is degenerate")
    final_mask = reprojection_errors(refit, src, dst) < reproj_tol
    return Homography(refit), final_mask


def warp_perspective(img: GrayImage, h: Homography, out_w: int, out_h: int) -> GrayImage:
    """Inverse-mapped bilinear warp; samples outside the source are 0."""
    if not h.is_invertible():
        raise InvalidArgumentError("cannot warp with a singular homography")
    if out_w < 1 or out_h < 1:
        raise InvalidArgumentError("output size must be >= 1")
    warped = cv2.warpPerspective(img.pixels, h.m, (out_w, out_h), flags=cv2.INTER_LINEAR,
                                 borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    return GrayImage(warped)


def pixel_scaling(src_w: int, src_h: int, dst_w: int, dst_h: int) -> Homography:
    """Pixel-centre-aligned scaling from a src_w x src_h grid to dst_w x dst_h."""
    sx = dst_w / src_w
    sy = dst_h / src_h
    return Homography(np.array([[sx, 0, 0.5 * sx - 0.5],
                                [0, sy, 0.5 * sy - 0.5],
                                [0, 0, 1]], dtype=np.float64))


def transfer_regions(regions: Sequence[Region], h: Homography, width: int, height: int) -> List[Region]:
    """Map reference-frame regions into the captured frame."""
    transferred = []
    for region in regions:
        box = h.map_box(region.bbox).clamp(width, height)
        if box.area == 0:
            logger.warning(f"Region {region.region_class.value} at {region.bbox} maps outside the image")
            continue
        transferred.append(region.with_bbox(box))
    return transferred


def align_reference(reference: GrayImage, captured: GrayImage, cfg: AlignmentConfig,
                    detector: Optional[IFeatureDetector] = None) -> Tuple[GrayImage, Homography, AlignmentDiagnostics]:
    """
    Warp the reference plate into the captured frame.

    Returns the aligned reference, the reference -> captured homography at
    full resolution and diagnostics. Raises AlignmentFailedError when too
    few matches survive or the inlier ratio falls below the floor.
    """
    detector = detector or HarrisPatchDetector.from_config(cfg)
    diagnostics = AlignmentDiagnostics()

    if cfg.working_width and cfg.working_height:
        ww, wh = cfg.working_width, cfg.working_height
    else:
        ww, wh = captured.width, captured.height
    ref_small = resize(reference, ww, wh)
    cap_small = resize(captured, ww, wh)
    to_ref_small = pixel_scaling(reference.width, reference.height, ww, wh)
    to_cap_small = pixel_scaling(captured.width, captured.height, ww, wh)

    kps_ref = detector.detect(ref_small, cfg.max_keypoints)
    kps_cap = detector.detect(cap_small, cfg.max_keypoints)
    diagnostics.keypoints_reference = len(kps_ref)
    diagnostics.keypoints_captured = len(kps_cap)

    matches = match_features(descriptors_of(kps_ref), descriptors_of(kps_cap), cfg.ratio)
    matches = sorted(matches, key=lambda m: (m.distance, m.idx_a))[:cfg.top_n]
    diagnostics.matches_retained = len(matches)
    logger.debug(f"Alignment: {len(kps_ref)}/{len(kps_cap)} keypoints, {len(matches)} matches retained")

    if len(matches) < 4:
        raise AlignmentFailedError(f"only {len(matches)} matches survived the ratio test",
                                   matches=len(matches))

    src, dst = point_pairs(matches, kps_ref, kps_cap)
    try:
        h_small, mask = estimate_homography_ransac(src, dst, cfg.ransac_iters, cfg.reproj_tol, cfg.seed)
    except InsufficientDataError as e:
        raise AlignmentFailedError(str(e), matches=len(matches)) from e

    inliers = int(mask.sum())
    diagnostics.inliers = inliers
    diagnostics.inlier_ratio = inliers / len(matches)
    if inliers:
        diagnostics.mean_reprojection_error = float(
            reprojection_errors(h_small.m, src[mask], dst[mask]).mean())

    if inliers < max(4, cfg.min_inliers) or diagnostics.inlier_ratio < cfg.inlier_floor:
        raise AlignmentFailedError(
            f"inlier ratio {diagnostics.inlier_ratio:.3f} ({inliers}/{len(matches)}) below floor {cfg.inlier_floor}",
            matches=len(matches), inlier_ratio=diagnostics.inlier_ratio)

    h_full = to_cap_small.inverse().compose(h_small).compose(to_ref_small)
    aligned = warp_perspective(reference, h_full, captured.width, captured.height)
    logger.info(f"Aligned reference: {inliers}/{len(matches)} inliers "
                f"(ratio {diagnostics.inlier_ratio:.3f}, mean error {diagnostics.mean_reprojection_error:.3f}px)")
    return aligned, h_full, diagnostics


class AlignmentService:
    """Holds alignment configuration and the feature detector."""

    def __init__(self, cfg: AlignmentConfig, detector: Optional[IFeatureDetector] = None):
        self.cfg = cfg
        self.detector = detector or HarrisPatchDetector.from_config(cfg)
        self.logger = get_logger(__name__)

    def align(self, reference: GrayImage, captured: GrayImage):
        return align_reference(reference, captured, self.cfg, self.detector)
