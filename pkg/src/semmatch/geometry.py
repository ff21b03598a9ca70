"""Projective geometry: homographies, DLT fitting, RANSAC, corner-error AUC."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class GeometryError(ValueError):
    pass


class DegeneratePointError(GeometryError):
    """Warped point lands at infinity."""


class InsufficientDataError(GeometryError):
    """Fewer than four correspondences."""


class RankDeficiencyError(GeometryError):
    """Correspondence configuration does not determine a homography."""


class EstimationFailure(GeometryError):
    """RANSAC found no model with at least four inliers."""


class MetricError(GeometryError):
    """Metric undefined on the given input (e.g. empty error list)."""


class Homography:
    """3x3 invertible projective transform, normalized on construction.

    Normalization divides by the bottom-right entry when its magnitude
    exceeds 1e-9; otherwise the matrix is Frobenius-normalized with the
    sign chosen to make the trace non-negative. Idempotent.
    """

    __slots__ = ("matrix",)

    def __init__(self, matrix):
        m = np.array(matrix, dtype=np.float64).reshape(3, 3)
        if not np.all(np.isfinite(m)):
            raise GeometryError("non-finite homography entries")
        if abs(np.linalg.det(m)) <= 1e-12:
            raise GeometryError("homography is singular")
        if abs(m[2, 2]) > 1e-9:
            m = m / m[2, 2]
        else:
            m = m / np.linalg.norm(m)
            if np.trace(m) < 0:
                m = -m
        self.matrix = m

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, tx: float, ty: float) -> "Homography":
        m = np.eye(3)
        m[0, 2] = tx
        m[1, 2] = ty
        return cls(m)

    def __repr__(self) -> str:
        return f"Homography({self.matrix.tolist()})"


@dataclass
class Correspondence:
    p: np.ndarray  # source point (x, y)
    q: np.ndarray  # target point (x, y)
    weight: float = 1.0

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64).reshape(2)
        self.q = np.asarray(self.q, dtype=np.float64).reshape(2)
        if not (np.all(np.isfinite(self.p)) and np.all(np.isfinite(self.q))):
            raise GeometryError("non-finite correspondence")
        if self.weight < 0:
            raise GeometryError("negative correspondence weight")


def warp_point(h: Homography, p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64).reshape(2)
    v = h.matrix @ np.array([p[0], p[1], 1.0])
    if abs(v[2]) <= 1e-12:
        raise DegeneratePointError(f"point {p} maps to infinity")
    return v[:2] / v[2]


def _warp_array(m: np.ndarray, pts: np.ndarray) -> np.ndarray:
    x, y = pts[:, 0], pts[:, 1]
    w = m[2, 0] * x + m[2, 1] * y + m[2, 2]
    out = np.full_like(pts, np.inf)
    ok = np.abs(w) > 1e-12
    out[ok, 0] = (m[0, 0] * x[ok] + m[0, 1] * y[ok] + m[0, 2]) / w[ok]
    out[ok, 1] = (m[1, 0] * x[ok] + m[1, 1] * y[ok] + m[1, 2]) / w[ok]
    return out


def warp_points(h: Homography, pts: np.ndarray) -> np.ndarray:
    """Vectorized warp of an (N, 2) array; rows at infinity become inf."""
    return _warp_array(h.matrix, np.asarray(pts, dtype=np.float64))


def invert(h: Homography) -> Homography:
    return Homography(np.linalg.inv(h.matrix))


def compose(a: Homography, b: Homography) -> Homography:
    """Transform applying b first, then a."""
    return Homography(a.matrix @ b.matrix)


def _corr_arrays(corrs) -> tuple[np.ndarray, np.ndarray]:
    p = np.array([c.p for c in corrs], dtype=np.float64)
    q = np.array([c.q for c in corrs], dtype=np.float64)
    return p, q


def _hartley(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Centroid shift + isotropic scale to mean distance sqrt(2)."""
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2.0) / max(d, 1e-12)
    t = np.array([[s, 0.0, -s * c[0]],
                  [0.0, s, -s * c[1]],
                  [0.0, 0.0, 1.0]])
    return (pts - c) * s, t


def _fit_dlt_arrays(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    n = len(p)
    pn, t0 = _hartley(p)
    qn, t1 = _hartley(q)
    x, y = pn[:, 0], pn[:, 1]
    u, v = qn[:, 0], qn[:, 1]
    a = np.zeros((2 * n, 9))
    ev, od = a[0::2], a[1::2]
    ev[:, 0] = x
    ev[:, 1] = y
    ev[:, 2] = 1.0
    ev[:, 6] = -u * x
    ev[:, 7] = -u * y
    ev[:, 8] = -u
    od[:, 3] = x
    od[:, 4] = y
    od[:, 5] = 1.0
    od[:, 6] = -v * x
    od[:, 7] = -v * y
    od[:, 8] = -v
    _, s, vt = np.linalg.svd(a)
    # a one-dimensional nullspace needs sigma_8 well above sigma_9's level
    if s[7] <= 1e-9 * max(s[0], 1e-12):
        raise RankDeficiencyError("degenerate correspondence configuration")
    hn = vt[-1].reshape(3, 3)
    return np.linalg.inv(t1) @ hn @ t0


def fit_dlt(corrs) -> Homography:
    """Least-squares homography from >= 4 correspondences.

    Hartley-normalizes both point sets, stacks the 2Nx9 system and takes
    the smallest right singular vector. Exact on noise-free data.
    """
    if len(corrs) < 4:
        raise InsufficientDataError(f"need >= 4 correspondences, got {len(corrs)}")
    p, q = _corr_arrays(corrs)
    return Homography(_fit_dlt_arrays(p, q))


def _symmetric_errors_m(m: np.ndarray, p: np.ndarray,
                        q: np.ndarray) -> np.ndarray:
    """Mean of forward and backward transfer distances per correspondence."""
    fw = _warp_array(m, p) - q
    bw = _warp_array(np.linalg.inv(m), q) - p
    ef = np.sqrt((fw ** 2).sum(axis=1))
    eb = np.sqrt((bw ** 2).sum(axis=1))
    err = 0.5 * (ef + eb)
    return np.where(np.isfinite(err), err, np.inf)


_TRIANGLES = ((1, 2, 3), (0, 2, 3), (0, 1, 3), (0, 1, 2))


def _sample_degenerate(pts: np.ndarray, tol: float = 1e-6) -> bool:
    """True if any three of the four points are collinear within area tol."""
    for i, j, k in _TRIANGLES:
        ux = pts[j, 0] - pts[i, 0]
        uy = pts[j, 1] - pts[i, 1]
        vx = pts[k, 0] - pts[i, 0]
        vy = pts[k, 1] - pts[i, 1]
        if 0.5 * abs(ux * vy - uy * vx) <= tol:
            return True
    return False


def _batch_degenerate(pts: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    """Collinearity flags for a (B, 4, 2) batch of minimal samples."""
    flags = np.zeros(len(pts), dtype=bool)
    for i, j, k in _TRIANGLES:
        u = pts[:, j] - pts[:, i]
        v = pts[:, k] - pts[:, i]
        area = 0.5 * np.abs(u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0])
        flags |= area <= tol
    return flags


def _batch_hartley(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    c = pts.mean(axis=1, keepdims=True)
    d = np.sqrt(((pts - c) ** 2).sum(axis=2)).mean(axis=1)
    s = np.sqrt(2.0) / np.maximum(d, 1e-12)
    b = len(pts)
    t = np.zeros((b, 3, 3))
    t[:, 0, 0] = s
    t[:, 1, 1] = s
    t[:, 2, 2] = 1.0
    t[:, 0, 2] = -s * c[:, 0, 0]
    t[:, 1, 2] = -s * c[:, 0, 1]
    return (pts - c) * s[:, None, None], t


def _batch_fit_minimal(p4: np.ndarray, q4: np.ndarray
                       ) -> tuple[np.ndarray, np.ndarray]:
    """DLT on a (B, 4, 2) batch; returns (B, 3, 3) models and a valid mask."""
    pn, t0 = _batch_hartley(p4)
    qn, t1 = _batch_hartley(q4)
    b = len(p4)
    x, y = pn[:, :, 0], pn[:, :, 1]
    u, v = qn[:, :, 0], qn[:, :, 1]
    a = np.zeros((b, 8, 9))
    a[:, 0::2, 0] = x
    a[:, 0::2, 1] = y
    a[:, 0::2, 2] = 1.0
    a[:, 0::2, 6] = -u * x
    a[:, 0::2, 7] = -u * y
    a[:, 0::2, 8] = -u
    a[:, 1::2, 3] = x
    a[:, 1::2, 4] = y
    a[:, 1::2, 5] = 1.0
    a[:, 1::2, 6] = -v * x
    a[:, 1::2, 7] = -v * y
    a[:, 1::2, 8] = -v
    _, s, vt = np.linalg.svd(a)
    valid = s[:, 7] > 1e-9 * np.maximum(s[:, 0], 1e-12)
    hn = vt[:, -1].reshape(b, 3, 3)
    m = np.linalg.inv(t1) @ hn @ t0
    valid &= np.abs(np.linalg.det(m)) > 1e-12
    return m, valid


def _batch_symmetric_errors(ms: np.ndarray, p: np.ndarray,
                            q: np.ndarray) -> np.ndarray:
    """(B, N) symmetric transfer errors for a batch of models."""
    ph = np.concatenate([p, np.ones((len(p), 1))], axis=1)
    qh = np.concatenate([q, np.ones((len(q), 1))], axis=1)

    def one_way(mats, src_h, dst):
        proj = np.einsum("bij,nj->bni", mats, src_h)
        w = proj[:, :, 2]
        ok = np.abs(w) > 1e-12
        wsafe = np.where(ok, w, 1.0)
        dx = proj[:, :, 0] / wsafe - dst[None, :, 0]
        dy = proj[:, :, 1] / wsafe - dst[None, :, 1]
        e = np.sqrt(dx * dx + dy * dy)
        return np.where(ok, e, np.inf)

    err = 0.5 * (one_way(ms, ph, q) + one_way(np.linalg.inv(ms), qh, p))
    return np.where(np.isfinite(err), err, np.inf)


def ransac_homography(corrs,
                      inlier_threshold: float = 3.0,
                      max_iters: int = 2000,
                      confidence: float = 0.9999,
                      seed: int = 0) -> tuple[Homography, np.ndarray]:
    """Robust homography fit from minimal 4-point samples.

    Hypothesis k draws its sample from an independent counter-based RNG
    stream keyed by (seed, k), so results never depend on scheduling.
    Inliers score by symmetric transfer error below the threshold; the
    best consensus model is refit by DLT on its full inlier set and the
    returned mask re-scored under that refit model.

    Returns (homography, boolean inlier mask); raises EstimationFailure
    when no hypothesis reaches four inliers.
    """
    n = len(corrs)
    if n < 4:
        raise InsufficientDataError(f"need >= 4 correspondences, got {n}")
    p, q = _corr_arrays(corrs)
    best_mask: np.ndarray | None = None
    best_count = 0
    needed = max_iters
    k = 0
    block = 64
    while k < min(max_iters, needed):
        b = min(block, min(max_iters, needed) - k)
        idxs = np.stack([np.random.default_rng([int(seed), k + i])
                         .choice(n, size=4, replace=False) for i in range(b)])
        p4, q4 = p[idxs], q[idxs]
        usable = ~(_batch_degenerate(p4) | _batch_degenerate(q4))
        ms, fit_ok = _batch_fit_minimal(p4, q4)
        usable &= fit_ok
        errs = np.full((b, n), np.inf)
        if usable.any():
            errs[usable] = _batch_symmetric_errors(ms[usable], p, q)
        masks = errs < inlier_threshold
        counts = masks.sum(axis=1)
        # scan in hypothesis order so the adaptive bound cuts exactly as a
        # sequential loop would
        for i in range(b):
            if k + i >= min(max_iters, needed):
                break
            if not usable[i]:
                continue
            count = int(counts[i])
            if count > best_count:
                best_count = count
                best_mask = masks[i]
                w = count / n
                if w >= 1.0:
                    needed = k + i + 1
                else:
                    denom = np.log1p(-w ** 4)
                    if denom < 0:
                        needed = int(np.ceil(
                            np.log(max(1.0 - confidence, 1e-300)) / denom))
        k += b
    if best_mask is None or best_count < 4:
        raise EstimationFailure("no hypothesis reached four inliers")
    keep = np.flatnonzero(best_mask)
    try:
        h_final = Homography(_fit_dlt_arrays(p[keep], q[keep]))
        final_mask = _symmetric_errors_m(h_final.matrix, p, q) < inlier_threshold
        if int(final_mask.sum()) < 4:
            raise RankDeficiencyError("refit lost consensus")
    except GeometryError:
        # fall back to the best minimal-sample model
        h_final = Homography(_fit_dlt_arrays(p[keep[:4]], q[keep[:4]]))
        final_mask = _symmetric_errors_m(h_final.matrix, p, q) < inlier_threshold
        if int(final_mask.sum()) < 4:
            raise EstimationFailure("refit and fallback lost consensus")
    return h_final, final_mask


def corner_error(h_est: Homography, h_gt: Homography,
                 width: int, height: int) -> float:
    """Mean distance between estimated- and true-warped image corners."""
    corners = np.array([[0.0, 0.0],
                        [width - 1.0, 0.0],
                        [width - 1.0, height - 1.0],
                        [0.0, height - 1.0]])
    a = warp_points(h_est, corners)
    b = warp_points(h_gt, corners)
    d = np.sqrt(((a - b) ** 2).sum(axis=1))
    if not np.all(np.isfinite(d)):
        return float("inf")
    return float(d.mean())


def auc(errors, threshold: float) -> float:
    """Area under the cumulative recall curve on [0, threshold], normalized.

    The recall step curve r(t) = #(errors <= t)/N is integrated exactly;
    infinite errors are never recalled but stay in the denominator.
    Returns a fraction in [0, 1].
    """
    errs = np.asarray(list(errors), dtype=np.float64)
    if errs.size == 0:
        raise MetricError("AUC of an empty error list is undefined")
    if np.any(errs < 0) or np.any(np.isnan(errs)):
        raise MetricError("errors must be non-negative")
    if threshold <= 0:
        raise MetricError("threshold must be positive")
    n = errs.size
    inside = np.sort(errs[errs <= threshold])
    total = 0.0
    for i, e in enumerate(inside):
        upper = inside[i + 1] if i + 1 < inside.size else threshold
        total += (upper - e) * (i + 1) / n
    return total / threshold


def parse_homography_text(text: str) -> Homography:
    """Nine whitespace-separated ASCII floats, row-major."""
    vals = [float(tok) for tok in text.split()]
    if len(vals) != 9:
        raise GeometryError(f"expected 9 values, got {len(vals)}")
    return Homography(np.array(vals).reshape(3, 3))


def format_homography_text(h: Homography) -> str:
    rows = [" ".join(f"{v:.9g}" for v in row) for row in h.matrix]
    return "\n".join(rows) + "\n"
