"""Classical pose back end: weighted DLT, Grunert's P3P, adaptive RANSAC and
Levenberg-Marquardt refinement of the angular reprojection error.

Conventions: 2D observations are normalized image coordinates; the RANSAC
inlier residual is the chord distance between unit rays,
sqrt(2 * (1 - cos angle)), which approximates the angle in radians (0.01
corresponds to about 8 px at focal length 800).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import (
    DegenerateGeometryError,
    InvalidInputError,
    NoSolutionError,
    NumericFailureError,
)
from .geometry import (
    Pose,
    angular_residuals_many,
    bearing_vectors,
    project_to_rotation,
    rotation_from_vector,
    skew,
)

DLT_GAP_FLOOR = 1e-12


@dataclass(frozen=True)
class RansacConfig:
    confidence: float = 0.99
    inlier_threshold: float = 0.01
    max_iterations: int = 100_000
    max_runtime: float | None = None
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.confidence < 1.0:
            raise InvalidInputError("confidence must be in (0,1)")
        if self.inlier_threshold <= 0:
            raise InvalidInputError("inlier threshold must be positive")


@dataclass
class PoseEstimate:
    pose: Pose
    inliers: np.ndarray
    mean_residual: float
    max_residual: float
    no_consensus: bool = False
    metadata: dict = field(default_factory=dict)


# Weighted DLT -------------------------------------------------------------------


def dlt_rows(x3d: np.ndarray, y2d_norm: np.ndarray) -> np.ndarray:
    """Two equation rows per match against the 12-vector
    [R1 t1 R2 t2 R3 t3]; 3D points enter homogeneously as (x, 1)."""
    x = np.atleast_2d(np.asarray(x3d, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y2d_norm, dtype=np.float64))
    if x.shape[0] != y.shape[0]:
        raise InvalidInputError("match count mismatch")
    k = x.shape[0]
    xh = np.concatenate([x, np.ones((k, 1))], axis=1)
    a = np.zeros((2 * k, 12))
    u, v = y[:, 0], y[:, 1]
    a[0::2, 4:8] = -xh
    a[0::2, 8:12] = v[:, None] * xh
    a[1::2, 0:4] = xh
    a[1::2, 8:12] = -u[:, None] * xh
    return a


def weighted_dlt(
    x3d: np.ndarray, y2d_norm: np.ndarray, weights: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Pose from the smallest eigenvector of A^T diag(w) A.

    Returns (R, t) with |R|_F = sqrt(3); R is not projected to a rotation and
    the overall sign is left ambiguous.
    """
    w = np.asarray(weights, dtype=np.float64).ravel()
    x = np.atleast_2d(x3d)
    if w.size != x.shape[0]:
        raise InvalidInputError("one weight per match required")
    if (w < 0).any():
        raise InvalidInputError("weights must be nonnegative")
    if w.size < 6 or (w > 0).sum() < 6:
        raise InvalidInputError("need at least 6 matches with positive weight")
    a = dlt_rows(x3d, y2d_norm)
    wrep = np.repeat(w, 2)
    s = a.T @ (wrep[:, None] * a)
    evals, evecs = np.linalg.eigh(s)
    if evals[1] - evals[0] < DLT_GAP_FLOOR:
        raise DegenerateGeometryError(
            f"weighted system is rank deficient (gap {evals[1] - evals[0]:.3e})"
        )
    p = evecs[:, 0]
    m = p.reshape(3, 4)
    r = m[:, :3]
    t = m[:, 3]
    scale = math.sqrt(3.0) / np.linalg.norm(r)
    return r * scale, t * scale


def weighted_dlt_var(a_rows: np.ndarray, w: ad.Var, gap_floor: float = 1e-8) -> ad.Var:
    """Differentiable DLT solution vector (12,) with the sqrt(3) scale fix;
    gradient flows into the match weights through the eigen-decomposition."""
    k2 = a_rows.shape[0]
    rep_idx = np.repeat(np.arange(k2 // 2), 2)
    wrep = ad.reshape(ad.gather_rows(ad.reshape(w, (-1, 1)), rep_idx), (k2, 1))
    weighted = wrep * ad.constant(a_rows)
    s = ad.constant(a_rows.T) @ weighted
    p = ad.smallest_eigvec(s, gap_floor=gap_floor)
    rmask = np.zeros(12)
    rmask[[0, 1, 2, 4, 5, 6, 8, 9, 10]] = 1.0
    fro = ad.sqrt(ad.vsum(p * p * ad.constant(rmask)))
    return p * (math.sqrt(3.0) / fro)


def assemble_dlt_pose(p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split a DLT 12-vector into (R, t) rows."""
    m = np.asarray(p, dtype=np.float64).reshape(3, 4)
    return m[:, :3], m[:, 3]


# Grunert P3P --------------------------------------------------------------------


def _solve_cubic_real(b: float, c: float, d: float) -> float:
    """One real root of x^3 + b x^2 + c x + d."""
    p = c - b * b / 3.0
    q = 2.0 * b**3 / 27.0 - b * c / 3.0 + d
    disc = (q / 2.0) ** 2 + (p / 3.0) ** 3
    if disc >= 0:
        sq = math.sqrt(disc)
        u = np.cbrt(-q / 2.0 + sq)
        v = np.cbrt(-q / 2.0 - sq)
        y = u + v
    else:
        rho = math.sqrt(-(p**3) / 27.0)
        theta = math.acos(max(-1.0, min(1.0, -q / (2.0 * rho))))
        y = 2.0 * np.cbrt(rho) * math.cos(theta / 3.0)
    return float(y - b / 3.0)


def solve_quartic(coeffs: np.ndarray) -> np.ndarray:
    """Real roots of a quartic (descending coefficients).

    Ferrari's closed form with Newton polishing; falls back to the companion
    matrix when the closed form degrades. Roots with |imag| < 1e-9 after
    polishing count as real.
    """
    c = np.asarray(coeffs, dtype=np.float64)
    if c.shape != (5,):
        raise InvalidInputError("quartic needs 5 coefficients")
    scale = np.abs(c).max()
    if scale == 0:
        return np.array([])
    c = c / scale
    roots = None
    if abs(c[0]) > 1e-10:
        a3, a2, a1, a0 = c[1] / c[0], c[2] / c[0], c[3] / c[0], c[4] / c[0]
        # Depressed quartic y^4 + A y^2 + B y + C, x = y - a3/4.
        aa = a2 - 3.0 * a3 * a3 / 8.0
        bb = a1 - a3 * a2 / 2.0 + a3**3 / 8.0
        cc = a0 - a3 * a1 / 4.0 + a3 * a3 * a2 / 16.0 - 3.0 * a3**4 / 256.0
        if abs(bb) < 1e-12:
            # Biquadratic.
            disc = aa * aa - 4.0 * cc
            ys = []
            if disc >= -1e-14:
                sq = math.sqrt(max(disc, 0.0))
                for z in ((-aa + sq) / 2.0, (-aa - sq) / 2.0):
                    if z >= -1e-14:
                        zz = math.sqrt(max(z, 0.0))
                        ys.extend([zz, -zz])
            roots = np.array([y - a3 / 4.0 for y in ys], dtype=np.complex128)
        else:
            # Resolvent cubic 8w^3 + 8Aw^2 + (2A^2 - 8C)w - B^2 = 0.
            w = _solve_cubic_real(aa, (2.0 * aa * aa - 8.0 * cc) / 8.0, -bb * bb / 8.0)
            if w > 1e-14:
                sw = math.sqrt(2.0 * w)
                shift = bb / (4.0 * w)
                ys = []
                for sign in (1.0, -1.0):
                    # y^2 -+ sw*y + (A/2 + w +- sw*shift) = 0
                    qb = -sign * sw
                    qc = aa / 2.0 + w + sign * sw * shift
                    disc = qb * qb - 4.0 * qc
                    sq = np.sqrt(complex(disc))
                    ys.extend([(-qb + sq) / 2.0, (-qb - sq) / 2.0])
                roots = np.array([y - a3 / 4.0 for y in ys], dtype=np.complex128)
    if roots is None or roots.size == 0 or not np.isfinite(roots).all():
        roots = np.roots(c)

    # Newton polish on the original quartic.
    dc = np.polyder(c)
    for _ in range(3):
        pv = np.polyval(c, roots)
        dv = np.polyval(dc, roots)
        safe = np.abs(dv) > 1e-300
        roots = np.where(safe, roots - pv / np.where(safe, dv, 1.0), roots)
    resid = np.abs(np.polyval(c, roots))
    if not np.isfinite(resid).all() or (resid > 1e-6).any():
        roots = np.roots(c)
        for _ in range(3):
            pv = np.polyval(c, roots)
            dv = np.polyval(dc, roots)
            safe = np.abs(dv) > 1e-300
            roots = np.where(safe, roots - pv / np.where(safe, dv, 1.0), roots)
    real = np.sort(roots[np.abs(roots.imag) < 1e-9].real)
    if real.size == 0:
        return real
    keep = [real[0]]
    for v in real[1:]:
        if abs(v - keep[-1]) > 1e-9 * max(1.0, abs(v)):
            keep.append(v)
    return np.array(keep)


def _align_3_points(x_world: np.ndarray, x_cam: np.ndarray) -> Pose:
    """Rigid transform with R x_world + t = x_cam (least squares, Kabsch)."""
    xc = x_world.mean(axis=0)
    pc = x_cam.mean(axis=0)
    h = (x_world - xc).T @ (x_cam - pc)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = project_to_rotation(vt.T @ np.diag([1.0, 1.0, d]) @ u.T)
    return Pose(r, pc - r @ xc)


def p3p_candidates(x3d: np.ndarray, bearings: np.ndarray) -> list[Pose]:
    """All camera poses placing the three world points on the three unit rays.

    Grunert's formulation: the depth-ratio quartic is assembled by polynomial
    convolution and each admissible root is turned into a pose by aligning
    the world triangle to the recovered camera-frame triangle.
    """
    x = np.asarray(x3d, dtype=np.float64).reshape(3, 3)
    b = np.asarray(bearings, dtype=np.float64).reshape(3, 3)
    b = b / np.linalg.norm(b, axis=1, keepdims=True)

    cross = np.cross(x[1] - x[0], x[2] - x[0])
    span = max(np.linalg.norm(x[i] - x[j]) for i in range(3) for j in range(i))
    if span == 0 or np.linalg.norm(cross) < 1e-12 * span * span:
        raise DegenerateGeometryError("3D points are collinear")

    dist_a = np.linalg.norm(x[1] - x[2])
    dist_b = np.linalg.norm(x[0] - x[2])
    dist_c = np.linalg.norm(x[0] - x[1])
    cos_alpha = float(b[1] @ b[2])
    cos_beta = float(b[0] @ b[2])
    cos_gamma = float(b[0] @ b[1])

    # u = s2/s1 = num(v)/den(v) with v = s3/s1; substituting u back into the
    # first distance equation yields the quartic in v.
    k_ac = (dist_a**2 - dist_c**2) / dist_b**2
    k_c = dist_c**2 / dist_b**2
    q_poly = np.array([1.0, -2.0 * cos_beta, 1.0])  # 1 + v^2 - 2 v cos_beta
    num = k_ac * q_poly + np.array([-1.0, 0.0, 1.0])
    den = np.array([-2.0 * cos_alpha, 2.0 * cos_gamma])
    den2 = np.convolve(den, den)
    quartic = (
        np.concatenate([[0.0, 0.0], den2])
        + np.convolve(num, num)
        - 2.0 * cos_gamma * np.concatenate([[0.0], np.convolve(num, den)])
        - k_c * np.convolve(q_poly, den2)
    )

    dist_sq = np.array([dist_c**2, dist_b**2, dist_a**2])
    cosines = np.array([cos_gamma, cos_beta, cos_alpha])

    poses = []
    seen_depths = []
    for v in solve_quartic(quartic):
        if v <= 0:
            continue
        qv = float(np.polyval(q_poly, v))
        if qv <= 0:
            continue
        den_v = float(np.polyval(den, v))
        if abs(den_v) < 1e-12:
            continue
        u = float(np.polyval(num, v)) / den_v
        if u <= 0:
            continue
        s1 = dist_b / math.sqrt(qv)
        depths = _polish_depths(np.array([s1, u * s1, v * s1]), dist_sq, cosines)
        if (depths <= 0).any():
            continue
        if any(np.abs(depths - d).max() < 1e-9 * s1 for d in seen_depths):
            continue
        seen_depths.append(depths)
        cam_pts = depths[:, None] * b
        poses.append(_align_3_points(x, cam_pts))
    return poses


def _polish_depths(s: np.ndarray, dist_sq: np.ndarray, cosines: np.ndarray) -> np.ndarray:
    """Newton iterations on the three pairwise distance equations.

    Unknowns (s1, s2, s3); equations ordered (1,2), (1,3), (2,3) with
    dist_sq/cosines in the same order. Runs in extended precision because
    near-double quartic roots make the system Jacobian nearly singular,
    which caps plain float64 Newton around sqrt(eps) accuracy.
    """
    s = s.astype(np.longdouble)
    dist_sq = dist_sq.astype(np.longdouble)
    cg, cb, ca = cosines.astype(np.longdouble)
    for _ in range(10):
        s1, s2, s3 = s
        f = np.array(
            [
                s1 * s1 + s2 * s2 - 2.0 * s1 * s2 * cg - dist_sq[0],
                s1 * s1 + s3 * s3 - 2.0 * s1 * s3 * cb - dist_sq[1],
                s2 * s2 + s3 * s3 - 2.0 * s2 * s3 * ca - dist_sq[2],
            ]
        )
        jac = np.array(
            [
                [2.0 * (s1 - s2 * cg), 2.0 * (s2 - s1 * cg), 0.0],
                [2.0 * (s1 - s3 * cb), 0.0, 2.0 * (s3 - s1 * cb)],
                [0.0, 2.0 * (s2 - s3 * ca), 2.0 * (s3 - s2 * ca)],
            ]
        )
        det = (
            jac[0, 0] * (jac[1, 1] * jac[2, 2] - jac[1, 2] * jac[2, 1])
            - jac[0, 1] * (jac[1, 0] * jac[2, 2] - jac[1, 2] * jac[2, 0])
            + jac[0, 2] * (jac[1, 0] * jac[2, 1] - jac[1, 1] * jac[2, 0])
        )
        if abs(det) < 1e-300:
            break
        adj = np.array(
            [
                [
                    jac[1, 1] * jac[2, 2] - jac[1, 2] * jac[2, 1],
                    jac[0, 2] * jac[2, 1] - jac[0, 1] * jac[2, 2],
                    jac[0, 1] * jac[1, 2] - jac[0, 2] * jac[1, 1],
                ],
                [
                    jac[1, 2] * jac[2, 0] - jac[1, 0] * jac[2, 2],
                    jac[0, 0] * jac[2, 2] - jac[0, 2] * jac[2, 0],
                    jac[0, 2] * jac[1, 0] - jac[0, 0] * jac[1, 2],
                ],
                [
                    jac[1, 0] * jac[2, 1] - jac[1, 1] * jac[2, 0],
                    jac[0, 1] * jac[2, 0] - jac[0, 0] * jac[2, 1],
                    jac[0, 0] * jac[1, 1] - jac[0, 1] * jac[1, 0],
                ],
            ],
            dtype=np.longdouble,
        )
        step = (adj @ f) / det
        s = s - step
        if np.abs(step).max() < 1e-17 * max(1.0, float(np.abs(s).max())):
            break
    return s.astype(np.float64)


def p3p(
    x3d: np.ndarray,
    bearings: np.ndarray,
    x_extra: np.ndarray,
    y_extra_norm: np.ndarray,
) -> Pose:
    """Minimal pose from three matches, disambiguated by a fourth match."""
    candidates = p3p_candidates(x3d, bearings)
    if not candidates:
        raise NoSolutionError("no admissible quartic root")
    res = [
        angular_residuals_many(pose, np.asarray(x_extra)[None, :], np.asarray(y_extra_norm)[None, :])[0]
        for pose in candidates
    ]
    return candidates[int(np.argmin(res))]


# RANSAC -------------------------------------------------------------------------


def ransac_iterations(p: float, w: float, q: int) -> int:
    """Draws needed for confidence p at inlier ratio w with sample size q."""
    if not 0.0 < p < 1.0:
        raise InvalidInputError("p must be in (0,1)")
    if not 0.0 < w <= 1.0:
        raise InvalidInputError("w must be in (0,1]")
    if q < 1:
        raise InvalidInputError("q must be >= 1")
    wq = w**q
    if wq >= 1.0:
        return 1
    k = math.log1p(-p) / math.log1p(-wq)
    return max(1, int(math.ceil(k)))


def ransac_p3p(
    idx3d: np.ndarray,
    idx2d: np.ndarray,
    x3d: np.ndarray,
    y2d_norm: np.ndarray,
    cfg: RansacConfig,
) -> PoseEstimate:
    """Hypothesize-and-verify pose search over a candidate match list.

    Samples 4 matches per draw (3 minimal + 1 to prune P3P ambiguity),
    scores candidates by inlier count with mean-residual tie-breaking, stops
    at the adaptive confidence bound, the iteration cap or the runtime cap,
    and refits the winner on its inliers with lm_refine.
    """
    i3 = np.asarray(idx3d, dtype=np.int64).ravel()
    i2 = np.asarray(idx2d, dtype=np.int64).ravel()
    if i3.size != i2.size:
        raise InvalidInputError("match index arrays differ in length")
    n_matches = i3.size
    if n_matches < 4:
        raise InvalidInputError("need at least 4 candidate matches")
    x = np.atleast_2d(np.asarray(x3d, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y2d_norm, dtype=np.float64))
    mx = x[i3]
    my = y[i2]
    bearings = bearing_vectors(my)

    rng = np.random.default_rng(cfg.rng_seed)
    tau = cfg.inlier_threshold
    best_count = -1
    best_mean = np.inf
    best_pose = None
    best_mask = None
    bound = cfg.max_iterations
    start = time.perf_counter()
    it = 0
    stop_reason = "iteration_cap"
    while it < bound:
        if cfg.max_runtime is not None and time.perf_counter() - start > cfg.max_runtime:
            stop_reason = "runtime_cap"
            break
        it += 1
        pick = rng.choice(n_matches, size=4, replace=False)
        tri3, tri2 = i3[pick[:3]], i2[pick[:3]]
        if len(set(tri3.tolist())) < 3 or len(set(tri2.tolist())) < 3:
            continue
        try:
            pose = p3p(
                x[tri3], bearings[pick[:3]], mx[pick[3]], my[pick[3]]
            )
        except (DegenerateGeometryError, NoSolutionError):
            continue
        chord = np.sqrt(2.0 * angular_residuals_many(pose, mx, my))
        mask = chord < tau
        count = int(mask.sum())
        mean_res = float(chord[mask].mean()) if count else np.inf
        if count > best_count or (count == best_count and mean_res < best_mean):
            best_count, best_mean, best_pose, best_mask = count, mean_res, pose, mask
            if count >= 1:
                needed = ransac_iterations(
                    cfg.confidence, max(count / n_matches, 1e-12), 4
                )
                if needed < bound:
                    bound = needed
                    stop_reason = "confidence_bound"
    if best_pose is None:
        raise NoSolutionError("every RANSAC hypothesis was degenerate")

    no_consensus = best_count < 4
    pose = best_pose
    if not no_consensus:
        pose = lm_refine(best_pose, mx[best_mask], my[best_mask])
    chord = np.sqrt(2.0 * angular_residuals_many(pose, mx, my))
    mask = chord < tau
    inliers = np.flatnonzero(mask)
    return PoseEstimate(
        pose=pose,
        inliers=inliers,
        mean_residual=float(chord[mask].mean()) if inliers.size else float("inf"),
        max_residual=float(chord[mask].max()) if inliers.size else float("inf"),
        no_consensus=no_consensus,
        metadata={
            "iterations": it,
            "stop_reason": stop_reason,
            "confidence": cfg.confidence,
            "inlier_threshold": tau,
            "max_iterations": cfg.max_iterations,
        },
    )


# Levenberg-Marquardt ------------------------------------------------------------


def _objective(pose_r, pose_t, x, b_unit):
    # Residual block per point = u - b (chord vector between unit rays);
    # |u - b|^2 = 2 (1 - cos) and, unlike the scalar 1 - cos form, it has no
    # cancellation near zero, so the refit can descend to round-off.
    v = x @ pose_r.T + pose_t
    nv = np.linalg.norm(v, axis=1)
    if (nv < 1e-300).any():
        raise NumericFailureError("point at the camera center")
    u = v / nv[:, None]
    return (u - b_unit).ravel(), nv, u


def lm_refine(
    pose0: Pose,
    x3d: np.ndarray,
    y2d_norm: np.ndarray,
    max_iterations: int = 100,
    grad_tol: float = 1e-10,
    step_tol: float = 1e-12,
) -> Pose:
    """Minimize the sum of squared angular residuals over a local 6-dof
    parameterization (axis-angle increment plus translation)."""
    x = np.atleast_2d(np.asarray(x3d, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y2d_norm, dtype=np.float64))
    if x.shape[0] < 3:
        raise InvalidInputError("lm_refine needs at least 3 matches")
    b_unit = bearing_vectors(y)

    rot = pose0.rotation.copy()
    trans = pose0.translation.copy()
    r, nv, u = _objective(rot, trans, x, b_unit)
    if not np.isfinite(r).all():
        raise NumericFailureError("non-finite objective at the initial pose")
    f = float(r @ r)
    mu = 1e-6
    k = x.shape[0]
    for _ in range(max_iterations):
        # d(u)/dv = (I - u u^T) / |v|; v depends on the increment through
        # dv/d(dw) = -[R x]_x and dv/d(dt) = I.
        proj = (np.eye(3)[None, :, :] - u[:, :, None] * u[:, None, :]) / nv[:, None, None]
        w = x @ rot.T
        skew_w = np.zeros((k, 3, 3))
        skew_w[:, 0, 1] = -w[:, 2]
        skew_w[:, 0, 2] = w[:, 1]
        skew_w[:, 1, 0] = w[:, 2]
        skew_w[:, 1, 2] = -w[:, 0]
        skew_w[:, 2, 0] = -w[:, 1]
        skew_w[:, 2, 1] = w[:, 0]
        jac = np.concatenate([-proj @ skew_w, proj], axis=2).reshape(3 * k, 6)
        g = jac.T @ r
        if np.linalg.norm(g) < grad_tol:
            break
        jtj = jac.T @ jac
        accepted = False
        for _ in range(25):
            try:
                delta = np.linalg.solve(jtj + mu * np.eye(6), -g)
            except np.linalg.LinAlgError:
                mu *= 4.0
                continue
            cand_r = project_to_rotation(rotation_from_vector(delta[:3]) @ rot)
            cand_t = trans + delta[3:]
            r_new, nv_new, u_new = _objective(cand_r, cand_t, x, b_unit)
            f_new = float(r_new @ r_new)
            if np.isfinite(f_new) and f_new < f:
                rot, trans, r, nv, u, f = cand_r, cand_t, r_new, nv_new, u_new, f_new
                mu = max(mu / 3.0, 1e-12)
                accepted = True
                break
            mu *= 4.0
        if not accepted:
            break
        if np.linalg.norm(delta) < step_tol:
            break
    return Pose(project_to_rotation(rot), trans)
