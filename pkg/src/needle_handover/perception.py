"""Needle state estimation from a pair of rectified segmentation masks.

Pipeline: Euclidean distance transform -> per-row ridge peaks -> all-pairs
triangulation along each row -> known-radius RANSAC circle -> tip pick.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.optimize import least_squares

from .errors import InsufficientObservation, NoInliers, NoValidCandidate, TooFewPoints
from .geometry import (
    MIN_DISPARITY,
    Circle3,
    StereoRig,
    plane_basis,
    points_circle_distance,
    triangulate_many,
)


@dataclass(eq=False)
class SegMask:
    """Binary segmentation mask stored as a ``(height, width)`` uint8 grid."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim != 2:
            raise ValueError("mask must be 2-D")
        d = d.astype(np.uint8, copy=False) if d.dtype == bool else d
        if d.size and (d.min() < 0 or d.max() > 1 or (d.dtype.kind == "f" and not np.isin(d, (0, 1)).all())):
            raise ValueError("mask values must be 0 or 1")
        self.data = d.astype(np.uint8, copy=False)

    @classmethod
    def empty(cls, width: int, height: int) -> SegMask:
        return cls(np.zeros((height, width), dtype=np.uint8))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


@dataclass(eq=False)
class PointCloud:
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    source_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.source_rows = np.asarray(self.source_rows, dtype=np.int64).reshape(-1)
        if len(self.points) != len(self.source_rows):
            raise ValueError("points and source_rows differ in length")

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class RansacParams:
    inlier_radius: float = 0.001
    iterations: int = 300
    seed: int = 0
    min_inliers: int = 20
    # inliers whose spread off their principal line is below this fraction
    # of the radius do not pin down a plane
    min_spread: float = 0.06

    def __post_init__(self):
        if not self.inlier_radius > 0:
            raise ValueError("inlier_radius must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


@dataclass(eq=False)
class CircleFit:
    circle: Circle3
    inlier_indices: np.ndarray
    rms_residual: float
    # diagnostics: round index and candidate count of the winner
    round_index: int = -1
    candidates_evaluated: int = 0

    @property
    def inlier_count(self) -> int:
        return len(self.inlier_indices)


@dataclass(eq=False)
class NeedleStateEstimate:
    circle: Circle3
    tip: np.ndarray
    inlier_count: int
    fit: CircleFit | None = None
    cloud: PointCloud | None = None

    @property
    def center(self) -> np.ndarray:
        return self.circle.center

    @property
    def normal(self) -> np.ndarray:
        return self.circle.normal

    @property
    def radius(self) -> float:
        return self.circle.radius


# ------------------------------------------------------------ image stages


def distance_transform(mask: SegMask) -> np.ndarray:
    """Euclidean distance of each foreground pixel to the nearest background
    pixel. Pixels outside the image count as background."""
    data = mask.data
    out = np.zeros(data.shape, dtype=np.float64)
    rows = np.flatnonzero(data.any(axis=1))
    if rows.size == 0:
        return out
    cols = np.flatnonzero(data.any(axis=0))
    r0, r1 = rows[0], rows[-1] + 1
    c0, c1 = cols[0], cols[-1] + 1
    # a one-pixel background ring around the bounding box gives the same
    # nearest-background distances as the full image
    block = np.pad(data[r0:r1, c0:c1], 1)
    out[r0:r1, c0:c1] = ndimage.distance_transform_edt(block)[1:-1, 1:-1]
    return out


def close_mask(mask: SegMask, size: int = 3) -> SegMask:
    """Binary closing with a ``size`` x ``size`` square; fills pinholes that
    would otherwise split the ridge into spurious peaks."""
    data = mask.data
    rows = np.flatnonzero(data.any(axis=1))
    if rows.size == 0 or size <= 1:
        return mask
    cols = np.flatnonzero(data.any(axis=0))
    pad = size
    r0, r1 = max(rows[0] - pad, 0), min(rows[-1] + pad + 1, data.shape[0])
    c0, c1 = max(cols[0] - pad, 0), min(cols[-1] + pad + 1, data.shape[1])
    out = data.copy()
    block = np.pad(data[r0:r1, c0:c1], pad)
    closed = ndimage.binary_closing(block, structure=np.ones((size, size), bool))
    out[r0:r1, c0:c1] = closed[pad:-pad, pad:-pad]
    return SegMask(out)


def scanline_peaks(dt: np.ndarray, subpixel: bool = False) -> list[np.ndarray]:
    """Per-row columns of strict local maxima with value >= 1.

    A plateau that is higher than both neighbours yields its center column
    (the lower one for even-length plateaus). With ``subpixel`` the columns
    are floats: plateau midpoints shifted by a parabola through the plateau
    and its two neighbours.
    """
    dt = np.asarray(dt, dtype=np.float64)
    h, w = dt.shape
    peaks = [np.zeros(0, dtype=np.int64) for _ in range(h)]
    rows = np.flatnonzero(dt.max(axis=1) >= 1)
    if rows.size == 0:
        return peaks
    # zero padding on both sides keeps runs from spilling across rows
    block = np.pad(dt[rows], ((0, 0), (1, 1)))
    flat = block.ravel()
    starts = np.concatenate(([0], np.flatnonzero(flat[1:] != flat[:-1]) + 1))
    ends = np.concatenate((starts[1:] - 1, [flat.size - 1]))
    vals = flat[starts]
    prev = np.concatenate(([-np.inf], vals[:-1]))
    nxt = np.concatenate((vals[1:], [-np.inf]))
    is_peak = (vals >= 1) & (vals > prev) & (vals > nxt)
    st, en = starts[is_peak], ends[is_peak]
    centers = (st + en) // 2
    r_idx, c_idx = np.divmod(centers, w + 2)
    c_idx = c_idx - 1
    if subpixel:
        a, b, c = prev[is_peak], vals[is_peak], nxt[is_peak]
        half_gap = (en - st + 2) / 2.0
        offset = 0.5 * (a - c) / (a - 2 * b + c) * half_gap
        cols = (st + en) / 2.0 - r_idx * (w + 2) - 1 + offset
        for r in np.unique(r_idx):
            peaks[rows[r]] = cols[r_idx == r]
        return peaks
    for r in np.unique(r_idx):
        peaks[rows[r]] = c_idx[r_idx == r].astype(np.int64)
    return peaks


def build_cloud(rig: StereoRig, peaks_left, peaks_right) -> PointCloud:
    """Triangulate every (left, right) peak pair that shares a row."""
    ul, vv, dd = [], [], []
    for row, (pl, pr) in enumerate(zip(peaks_left, peaks_right)):
        if len(pl) == 0 or len(pr) == 0:
            continue
        a = np.repeat(np.asarray(pl, dtype=np.float64), len(pr))
        b = np.tile(np.asarray(pr, dtype=np.float64), len(pl))
        d = a - b
        keep = d > MIN_DISPARITY
        if keep.any():
            ul.append(a[keep])
            dd.append(d[keep])
            vv.append(np.full(int(keep.sum()), row, dtype=np.int64))
    if not ul:
        return PointCloud()
    u = np.concatenate(ul)
    v = np.concatenate(vv)
    d = np.concatenate(dd)
    return PointCloud(triangulate_many(rig, u, v.astype(np.float64), d), v)


# ------------------------------------------------------------------ RANSAC

_PAIRS = ((0, 1), (0, 2), (1, 2))


def _make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def sample_triples(n: int, iterations: int, seed: int) -> np.ndarray:
    """``(iterations, 3)`` distinct index triples from a counter-based RNG."""
    if n < 3:
        raise TooFewPoints(f"need at least 3 points, got {n}")
    rng = _make_rng(seed)
    i0 = rng.integers(0, n, size=iterations)
    i1 = rng.integers(0, n - 1, size=iterations)
    i1 = i1 + (i1 >= i0)
    i2 = rng.integers(0, n - 2, size=iterations)
    lo = np.minimum(i0, i1)
    hi = np.maximum(i0, i1)
    i2 = i2 + (i2 >= lo)
    i2 = i2 + (i2 >= hi)
    return np.column_stack([i0, i1, i2])


def _candidates(points: np.ndarray, triples: np.ndarray, radius: float):
    """Batched known-radius circle candidates.

    Returns centers ``(R, 6, 3)``, normals ``(R, 3)`` and a validity mask
    ``(R, 6)``; slot ``2k`` / ``2k+1`` hold the two circles through pair k.
    """
    P = points[triples]  # (R, 3, 3)
    cr = np.cross(P[:, 1] - P[:, 0], P[:, 2] - P[:, 0])
    area2 = np.linalg.norm(cr, axis=1)
    plane_ok = area2 / 2 > 1e-12
    normals = np.zeros_like(cr)
    normals[plane_ok] = cr[plane_ok] / area2[plane_ok, None]
    R = len(triples)
    centers = np.zeros((R, 6, 3))
    valid = np.zeros((R, 6), dtype=bool)
    for k, (a, b) in enumerate(_PAIRS):
        chord = P[:, b] - P[:, a]
        length = np.linalg.norm(chord, axis=1)
        ok = plane_ok & (length <= 2 * radius + 1e-12) & (length > 0)
        safe = np.where(ok, length, 1.0)
        h2 = radius * radius - (length / 2) ** 2
        h = np.sqrt(np.clip(h2, 0.0, None))
        perp = np.cross(normals, chord / safe[:, None])
        mid = (P[:, a] + P[:, b]) / 2
        centers[:, 2 * k] = mid + h[:, None] * perp
        centers[:, 2 * k + 1] = mid - h[:, None] * perp
        valid[:, 2 * k] = ok
        valid[:, 2 * k + 1] = ok & (h2 > 0)
    return centers, normals, valid


def _score(points, centers, normals, radius, inlier_radius, chunk=512):
    """Inlier counts and RMS residuals for many candidate circles."""
    K = len(centers)
    counts = np.zeros(K, dtype=np.int64)
    rms = np.full(K, np.inf)
    pp = np.einsum("nd,nd->n", points, points)
    for s in range(0, K, chunk):
        C = centers[s:s + chunk]
        N = normals[s:s + chunk]
        # |p - c|^2 and the axial component via matrix products
        w2 = pp[None, :] - 2.0 * (C @ points.T) + np.einsum("kd,kd->k", C, C)[:, None]
        axial = N @ points.T - np.einsum("kd,kd->k", C, N)[:, None]
        radial = np.sqrt(np.maximum(w2 - axial * axial, 0.0))
        d2 = axial * axial + (radial - radius) ** 2
        inl = d2 <= inlier_radius * inlier_radius
        cnt = inl.sum(axis=1)
        counts[s:s + chunk] = cnt
        sq = np.where(inl, d2, 0.0).sum(axis=1)
        rms[s:s + chunk] = np.where(cnt > 0, np.sqrt(sq / np.maximum(cnt, 1)), np.inf)
    return counts, rms


def ransac_from_triples(points, triples, radius: float, inlier_radius: float) -> CircleFit:
    """Evaluate the candidates generated by fixed sample triples and return
    the best one (most inliers, then lowest RMS, then earliest)."""
    points = np.asarray(points, dtype=np.float64)
    centers, normals, valid = _candidates(points, np.asarray(triples), radius)
    rounds, slots = np.nonzero(valid)
    if rounds.size == 0:
        raise NoValidCandidate("every sampled triple was degenerate")
    C = centers[rounds, slots]
    N = normals[rounds]
    counts, rms = _score(points, C, N, radius, inlier_radius)
    order = np.lexsort((np.arange(len(C)), rms, -counts))
    best = order[0]
    circle = Circle3(C[best], N[best], radius)
    d = points_circle_distance(circle.center, circle.normal, radius, points)
    inliers = np.flatnonzero(d <= inlier_radius)
    rms_best = float(np.sqrt(np.mean(d[inliers] ** 2))) if inliers.size else float("inf")
    return CircleFit(circle, inliers, rms_best, int(rounds[best]), len(C))


def ransac_circle(cloud: PointCloud, radius: float, params: RansacParams) -> CircleFit:
    pts = cloud.points
    if len(pts) < 3:
        raise TooFewPoints(f"need at least 3 points, got {len(pts)}")
    triples = sample_triples(len(pts), params.iterations, params.seed)
    return ransac_from_triples(pts, triples, radius, params.inlier_radius)


def refine_circle(points, fit: CircleFit, inlier_radius: float, rounds: int = 2) -> CircleFit:
    """Least-squares polish of a known-radius circle on its inliers.

    Center and normal are adjusted to minimize the point-to-curve
    distances under a soft-L1 loss; inliers are recomputed after each
    round. A round that drops more than a tenth of the inliers is rejected.
    """
    points = np.asarray(points, dtype=np.float64)
    radius = fit.circle.radius
    best = fit
    for _ in range(rounds):
        pts = points[best.inlier_indices]
        if len(pts) < 3:
            break
        c0 = best.circle.center
        n0 = best.circle.normal
        u, w = plane_basis(n0)

        def residuals(q):
            n = n0 + q[3] * u + q[4] * w
            n = n / np.linalg.norm(n)
            v = pts - (c0 + q[:3])
            axial = v @ n
            radial = np.linalg.norm(v - np.outer(axial, n), axis=1)
            return np.concatenate([axial, radial - radius])

        q = least_squares(residuals, np.zeros(5), loss="soft_l1", f_scale=inlier_radius / 5,
                          x_scale=[radius] * 3 + [1.0] * 2, xtol=1e-12, ftol=1e-12, gtol=1e-12).x
        n = n0 + q[3] * u + q[4] * w
        circle = Circle3(c0 + q[:3], n / np.linalg.norm(n), radius)
        d = points_circle_distance(circle.center, circle.normal, radius, points)
        inliers = np.flatnonzero(d <= inlier_radius)
        # a polish that sheds a large part of the consensus set is not trusted
        if len(inliers) < 0.9 * best.inlier_count:
            break
        rms = float(np.sqrt(np.mean(d[inliers] ** 2)))
        best = CircleFit(circle, inliers, rms, fit.round_index, fit.candidates_evaluated)
    return best


def snap_to_circle(circle: Circle3, points) -> np.ndarray:
    """Closest points on the circle curve."""
    v = np.asarray(points, dtype=np.float64) - circle.center
    q = v - np.outer(v @ circle.normal, circle.normal)
    norm = np.linalg.norm(q, axis=1)
    fallback = plane_basis(circle.normal)[0]
    q[norm == 0] = fallback
    norm[norm == 0] = 1.0
    return circle.center + circle.radius * q / norm[:, None]


def estimate_tip(fit: CircleFit, cloud: PointCloud, gripper_pos) -> np.ndarray:
    """Inlier point furthest from the gripper (first index on ties)."""
    if len(fit.inlier_indices) == 0:
        raise NoInliers("circle fit has no inliers")
    pts = cloud.points[fit.inlier_indices]
    d = np.linalg.norm(pts - np.asarray(gripper_pos, dtype=np.float64), axis=1)
    return pts[int(np.argmax(d))].copy()


def estimate_state(masks, rig: StereoRig, gripper_pos, radius: float,
                   params: RansacParams = RansacParams(), refine: bool = True) -> NeedleStateEstimate:
    """Full stereo pipeline; raises InsufficientObservation below
    ``params.min_inliers`` inliers.

    With ``refine`` the masks are closed against pinholes, ridge peaks are
    located to sub-pixel precision, the
    RANSAC circle is polished on its inliers and the tip is chosen among
    inliers projected onto the polished circle.
    """
    left, right = masks
    for m, cam in ((left, rig.left), (right, rig.right)):
        if (m.width, m.height) != (cam.width, cam.height):
            raise ValueError("mask size does not match camera")
    if refine:
        left, right = close_mask(left), close_mask(right)
    pl = scanline_peaks(distance_transform(left), subpixel=refine)
    pr = scanline_peaks(distance_transform(right), subpixel=refine)
    cloud = build_cloud(rig, pl, pr)
    if len(cloud) < max(3, params.min_inliers):
        raise InsufficientObservation(f"only {len(cloud)} triangulated points", 0)
    try:
        fit = ransac_circle(cloud, radius, params)
    except NoValidCandidate as exc:
        raise InsufficientObservation(str(exc), 0) from exc
    if fit.inlier_count < params.min_inliers:
        raise InsufficientObservation(
            f"{fit.inlier_count} inliers < {params.min_inliers}", fit.inlier_count)
    pts = cloud.points[fit.inlier_indices]
    spread = np.linalg.svd(pts - pts.mean(axis=0), compute_uv=False)[1] / np.sqrt(len(pts))
    if spread < params.min_spread * radius:
        raise InsufficientObservation(
            f"inliers nearly collinear (spread {spread * 1e3:.2f} mm)", fit.inlier_count)
    if refine:
        fit = refine_circle(cloud.points, fit, params.inlier_radius)
    circle = fit.circle
    if np.dot(circle.normal, rig.left.position - circle.center) < 0:
        circle = circle.flipped()
        fit.circle = circle
    # the tip is picked among inliers moved onto the fitted curve; this keeps
    # depth noise from deciding which end is furthest
    snapped = PointCloud(cloud.points.copy(), cloud.source_rows)
    snapped.points[fit.inlier_indices] = snap_to_circle(circle, cloud.points[fit.inlier_indices])
    tip = estimate_tip(fit, snapped if refine else cloud, gripper_pos)
    return NeedleStateEstimate(circle, tip, fit.inlier_count, fit, cloud)


# -------------------------------------------------------------- PGM / PPM


def write_pgm(path, mask: SegMask) -> None:
    header = f"P5\n{mask.width} {mask.height}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write((mask.data * 255).astype(np.uint8).tobytes())


def _read_tokens(buf: bytes, count: int):
    tokens, pos = [], 0
    while len(tokens) < count:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        start = pos
        while not buf[pos:pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    return tokens, pos + 1


def read_pgm(path) -> SegMask:
    """Read a binary (P5, 8-bit) PGM; nonzero pixels become foreground."""
    with open(path, "rb") as fh:
        buf = fh.read()
    (magic, w, h, maxval), pos = _read_tokens(buf, 4)
    if magic != b"P5" or int(maxval) > 255:
        raise ValueError(f"{path}: only 8-bit P5 PGM is supported")
    w, h = int(w), int(h)
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w)
    return SegMask((data > 0).astype(np.uint8))


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def debug_overlay(mask: SegMask, cam, estimate: NeedleStateEstimate) -> np.ndarray:
    """RGB image: mask in gray, inliers blue, outliers red, fitted circle
    green, tip yellow."""
    img = np.repeat((mask.data * 90)[:, :, None], 3, axis=2).astype(np.uint8)

    def dots(points, color, size=1):
        uv, z = cam.project_many(points)
        ok = (z > 0) & np.isfinite(uv).all(axis=1)
        for u, v in np.rint(uv[ok]).astype(int):
            img[max(v - size, 0):v + size + 1, max(u - size, 0):u + size + 1] = color

    if estimate.cloud is not None and estimate.fit is not None:
        mask_in = np.zeros(len(estimate.cloud), dtype=bool)
        mask_in[estimate.fit.inlier_indices] = True
        dots(estimate.cloud.points[~mask_in], (220, 40, 40))
        dots(estimate.cloud.points[mask_in], (40, 80, 255))
    dots(estimate.circle.sample(720), (40, 220, 40), 0)
    dots(estimate.tip[None], (255, 230, 0), 3)
    return img
