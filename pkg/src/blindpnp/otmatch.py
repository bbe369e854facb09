"""Global feature matching: cost matrix, rectangular Sinkhorn scaling,
training losses over the resulting joint-probability matrix, and the six
correspondence retrieval strategies.

The scaling loop alternates a = r / (Y b) and b = s / (Y^T a) on the
normalized kernel Y = exp(-H / lam) / sum(exp(-H / lam)), starting from
b = 1, and assembles W = diag(a) Y diag(b). A log-domain variant produces
the mathematically identical result when the linear-domain kernel would
underflow; gradients for training unroll the recorded linear-domain
iterations on the tape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import (
    ContractViolationError,
    DegenerateGeometryError,
    InvalidInputError,
    NumericFailureError,
)
from .geometry import Pose, angular_residuals_many

DEFAULT_LAMBDA = 0.1
DEFAULT_ITERS = 20
DEFAULT_TOP_K = 2000

STRATEGIES = ("topk_w", "topk_f", "nn_w", "nn_f", "mnn_w", "mnn_f")


@dataclass(frozen=True)
class MarginalPriors:
    """Per-point prior matchabilities; each vector sums to one."""

    r: np.ndarray
    s: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.r, dtype=np.float64)
        s = np.asarray(self.s, dtype=np.float64)
        for name, v in (("r", r), ("s", s)):
            if v.ndim != 1 or v.size < 1:
                raise InvalidInputError(f"{name} must be a non-empty vector")
            if (v < 0).any() or not np.isfinite(v).all():
                raise InvalidInputError(f"{name} must be nonnegative and finite")
            if abs(v.sum() - 1.0) > 1e-12:
                raise InvalidInputError(f"{name} must sum to 1 within 1e-12")
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "s", s)


def uniform_priors(m: int, n: int) -> MarginalPriors:
    return MarginalPriors(np.full(m, 1.0 / m), np.full(n, 1.0 / n))


@dataclass
class WeightMatrix:
    """Joint-probability matrix with the scaling vectors that produced it."""

    w: np.ndarray
    a: np.ndarray
    b: np.ndarray
    iterations: int
    mode: str


@dataclass
class MatchList:
    """Parallel arrays of (3D index, 2D index, score), optionally gt-labelled."""

    idx3d: np.ndarray
    idx2d: np.ndarray
    scores: np.ndarray
    inlier_flags: np.ndarray | None = None

    def __post_init__(self):
        self.idx3d = np.asarray(self.idx3d, dtype=np.int64)
        self.idx2d = np.asarray(self.idx2d, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if not (self.idx3d.shape == self.idx2d.shape == self.scores.shape):
            raise InvalidInputError("match arrays must have equal length")
        if self.inlier_flags is not None:
            self.inlier_flags = np.asarray(self.inlier_flags, dtype=bool)
            if self.inlier_flags.shape != self.idx3d.shape:
                raise InvalidInputError("inlier flags length mismatch")

    def __len__(self) -> int:
        return self.idx3d.size

    def take(self, keep) -> "MatchList":
        keep = np.asarray(keep)
        return MatchList(
            self.idx3d[keep],
            self.idx2d[keep],
            self.scores[keep],
            None if self.inlier_flags is None else self.inlier_flags[keep],
        )


def gt_matrix(pairs: np.ndarray, m: int, n: int) -> np.ndarray:
    """Dense 0/1 correspondence matrix from (G,2) ground-truth index pairs."""
    c = np.zeros((m, n))
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if pairs.size:
        if pairs[:, 0].max(initial=-1) >= m or pairs[:, 1].max(initial=-1) >= n:
            raise InvalidInputError("gt pair index out of range")
        c[pairs[:, 0], pairs[:, 1]] = 1.0
    return c


def cost_matrix(f3d: np.ndarray, f2d: np.ndarray) -> np.ndarray:
    """Pairwise L2 distances between descriptor rows: out[i, j] = |f3d_i - f2d_j|."""
    a = np.atleast_2d(np.asarray(f3d, dtype=np.float64))
    b = np.atleast_2d(np.asarray(f2d, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise InvalidInputError("feature dimensions differ")
    d2 = (
        np.sum(a * a, axis=1)[:, None]
        + np.sum(b * b, axis=1)[None, :]
        - 2.0 * (a @ b.T)
    )
    return np.sqrt(np.maximum(d2, 0.0))


def sinkhorn(
    cost: np.ndarray,
    priors: MarginalPriors,
    lam: float = DEFAULT_LAMBDA,
    iters: int = DEFAULT_ITERS,
    mode: str = "auto",
    marginal_tol: float | None = None,
) -> WeightMatrix:
    """Rectangular Sinkhorn scaling of exp(-cost/lam) to the prior marginals.

    `mode` is "linear", "log", or "auto" (log domain only when the linear
    kernel would under/overflow into zero rows or columns). With
    `marginal_tol` set, iteration stops early once the row-marginal error
    drops below it; `iters` remains the hard cap.
    """
    h = np.atleast_2d(np.asarray(cost, dtype=np.float64))
    if (h < 0).any() or not np.isfinite(h).all():
        raise InvalidInputError("cost matrix must be nonnegative and finite")
    if lam <= 0:
        raise InvalidInputError("lam must be positive")
    if iters < 1:
        raise InvalidInputError("iters must be >= 1")
    m, n = h.shape
    if priors.r.size != m or priors.s.size != n:
        raise InvalidInputError("prior sizes do not match the cost matrix")

    if mode not in ("auto", "linear", "log"):
        raise InvalidInputError(f"unknown sinkhorn mode {mode!r}")
    use_log = mode == "log"
    if mode == "auto":
        kernel = np.exp(-h / lam)
        if (kernel.sum(axis=1) == 0).any() or (kernel.sum(axis=0) == 0).any():
            use_log = True
    if use_log:
        return _sinkhorn_log(h, priors, lam, iters, marginal_tol)

    kernel = np.exp(-h / lam)
    if (kernel.sum(axis=1) == 0).any() or (kernel.sum(axis=0) == 0).any():
        raise NumericFailureError(
            "exp(-cost/lam) underflowed to a zero row/column; "
            "increase lam or use the log-domain mode"
        )
    kernel = kernel / kernel.sum()
    a = priors.r.copy()
    b = np.ones(n)
    done = 0
    for it in range(iters):
        a = priors.r / (kernel @ b)
        b = priors.s / (kernel.T @ a)
        done = it + 1
        if marginal_tol is not None:
            w = kernel * a[:, None] * b[None, :]
            if np.abs(w.sum(axis=1) - priors.r).max() <= marginal_tol:
                break
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise NumericFailureError(
            "sinkhorn scaling vectors overflowed; increase lam or use log mode"
        )
    w = kernel * a[:, None] * b[None, :]
    return WeightMatrix(w, a, b, done, "linear")


def _sinkhorn_log(h, priors, lam, iters, marginal_tol):
    """Log-domain scaling: identical fixed point, safe for tiny lam."""

    def logsumexp(x, axis):
        mx = np.max(x, axis=axis, keepdims=True)
        return mx.squeeze(axis) + np.log(np.sum(np.exp(x - mx), axis=axis))

    log_kernel = -h / lam
    log_kernel = log_kernel - logsumexp(log_kernel.ravel(), axis=0)
    log_r = np.log(priors.r)
    log_s = np.log(priors.s)
    log_a = log_r.copy()
    log_b = np.zeros(h.shape[1])
    done = 0
    for it in range(iters):
        log_a = log_r - logsumexp(log_kernel + log_b[None, :], axis=1)
        log_b = log_s - logsumexp(log_kernel.T + log_a[None, :], axis=1)
        done = it + 1
        if marginal_tol is not None:
            w = np.exp(log_kernel + log_a[:, None] + log_b[None, :])
            if np.abs(w.sum(axis=1) - priors.r).max() <= marginal_tol:
                break
    w = np.exp(log_kernel + log_a[:, None] + log_b[None, :])
    return WeightMatrix(w, np.exp(log_a), np.exp(log_b), done, "log")


def sinkhorn_var(
    cost: ad.Var, r: np.ndarray, s: np.ndarray, lam: float, iters: int
) -> ad.Var:
    """Differentiable linear-domain Sinkhorn with the iteration loop unrolled
    on the tape."""
    kernel_raw = ad.exp(cost * (-1.0 / lam))
    if (kernel_raw.value.sum(axis=1) == 0).any() or (kernel_raw.value.sum(axis=0) == 0).any():
        raise NumericFailureError(
            "exp(-cost/lam) underflowed during training; increase lam"
        )
    kernel = kernel_raw / ad.vsum(kernel_raw)
    rv = ad.constant(r)
    sv = ad.constant(s)
    b = ad.constant(np.ones(cost.value.shape[1]))
    for _ in range(iters):
        a = rv / (kernel @ b)
        b = sv / (ad.transpose(kernel) @ a)
    return kernel * ad.reshape(a, (-1, 1)) * ad.reshape(b, (1, -1))


def joint_probability_loss(w: np.ndarray, gt: np.ndarray) -> float:
    """Sum over pairs of (1 - 2*gt) * w: total mass on outliers minus inliers."""
    w = np.atleast_2d(np.asarray(w, dtype=np.float64))
    gt = np.atleast_2d(np.asarray(gt, dtype=np.float64))
    if w.shape != gt.shape:
        raise InvalidInputError("weight/gt shape mismatch")
    return float(((1.0 - 2.0 * gt) * w).sum())


def joint_probability_loss_var(w: ad.Var, gt: np.ndarray) -> ad.Var:
    return ad.vsum(w * ad.constant(1.0 - 2.0 * np.asarray(gt, dtype=np.float64)))


def weighted_reprojection_loss(
    w: np.ndarray, x3d: np.ndarray, y2d_norm: np.ndarray, pose_gt: Pose
) -> float:
    """Weight-averaged angular residual between every 3D point and every ray."""
    w = np.atleast_2d(np.asarray(w, dtype=np.float64))
    res = _angular_residual_table(x3d, y2d_norm, pose_gt)
    if res.shape != w.shape:
        raise InvalidInputError("weight matrix shape does not match point sets")
    return float((w * res).sum())


def _angular_residual_table(x3d, y2d_norm, pose_gt: Pose) -> np.ndarray:
    v = np.atleast_2d(x3d) @ pose_gt.rotation.T + pose_gt.translation
    nv = np.linalg.norm(v, axis=1)
    if (nv < 1e-300).any():
        raise DegenerateGeometryError("a transformed point has zero length")
    y = np.atleast_2d(y2d_norm)
    b = np.concatenate([y, np.ones((y.shape[0], 1))], axis=1)
    b = b / np.linalg.norm(b, axis=1, keepdims=True)
    return 1.0 - (v / nv[:, None]) @ b.T


def weighted_reprojection_loss_var(
    w: ad.Var, x3d: np.ndarray, y2d_norm: np.ndarray, pose_gt: Pose
) -> ad.Var:
    return ad.vsum(w * ad.constant(_angular_residual_table(x3d, y2d_norm, pose_gt)))


def sample_triplets(
    gt: np.ndarray, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(anchor 3D index, positive 2D index, negative 2D index) triples.

    Anchors are the 3D points that have a ground-truth match; the negative is
    drawn uniformly from that anchor's non-matching 2D points. Anchors without
    a positive are skipped.
    """
    gt = np.atleast_2d(np.asarray(gt))
    anchors, positives, negatives = [], [], []
    n = gt.shape[1]
    for i in range(gt.shape[0]):
        pos = np.flatnonzero(gt[i] > 0)
        if pos.size == 0:
            continue
        neg_pool = np.flatnonzero(gt[i] == 0)
        if neg_pool.size == 0:
            continue
        anchors.append(i)
        positives.append(pos[0])
        negatives.append(neg_pool[rng.integers(neg_pool.size)])
    return (
        np.array(anchors, dtype=np.int64),
        np.array(positives, dtype=np.int64),
        np.array(negatives, dtype=np.int64),
    )


def triplet_loss(
    f3d: np.ndarray,
    f2d: np.ndarray,
    gt: np.ndarray,
    alpha: float = 10.0,
    rng: np.random.Generator | None = None,
    triplets=None,
) -> float:
    """Soft-margin triplet loss over (anchor, gt positive, random negative)."""
    if triplets is None:
        if rng is None:
            raise InvalidInputError("triplet_loss needs an rng or explicit triplets")
        triplets = sample_triplets(gt, rng)
    ai, pi, ni = triplets
    if ai.size == 0:
        return 0.0
    f3d = np.atleast_2d(f3d)
    f2d = np.atleast_2d(f2d)
    dp = np.sum((f3d[ai] - f2d[pi]) ** 2, axis=1)
    dn = np.sum((f3d[ai] - f2d[ni]) ** 2, axis=1)
    z = alpha * (dp - dn)
    return float(np.sum(np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))))


def triplet_loss_var(
    f3d: ad.Var, f2d: ad.Var, triplets, alpha: float = 10.0
) -> ad.Var:
    ai, pi, ni = triplets
    if ai.size == 0:
        return ad.constant(np.asarray(0.0))
    anchor = ad.gather_rows(f3d, ai)
    pos = ad.gather_rows(f2d, pi)
    neg = ad.gather_rows(f2d, ni)
    dpos = anchor - pos
    dneg = anchor - neg
    margin = ad.vsum(dpos * dpos, axis=1) - ad.vsum(dneg * dneg, axis=1)
    return ad.vsum(ad.softplus(margin * alpha))


def loss_gradient_wrt_features(
    f3d: np.ndarray,
    f2d: np.ndarray,
    loss: str,
    gt: np.ndarray | None = None,
    lam: float = DEFAULT_LAMBDA,
    iters: int = DEFAULT_ITERS,
    pose_gt: Pose | None = None,
    x3d: np.ndarray | None = None,
    y2d_norm: np.ndarray | None = None,
    alpha: float = 10.0,
    rng: np.random.Generator | None = None,
):
    """Gradient of the selected loss w.r.t. both descriptor matrices.

    For the Sinkhorn-based losses the cost-matrix map, the kernel
    normalization and every scaling iteration are differentiated exactly as
    executed (unrolled backpropagation). Returns (loss value, grad f3d,
    grad f2d).
    """
    f3 = ad.leaf(np.atleast_2d(np.asarray(f3d, dtype=np.float64)))
    f2 = ad.leaf(np.atleast_2d(np.asarray(f2d, dtype=np.float64)))
    m, n = f3.value.shape[0], f2.value.shape[0]
    if loss in ("joint_probability", "reprojection"):
        cost = cost_matrix_var(f3, f2)
        priors = uniform_priors(m, n)
        w = sinkhorn_var(cost, priors.r, priors.s, lam, iters)
        if loss == "joint_probability":
            if gt is None:
                raise ContractViolationError("joint_probability loss needs gt")
            out = joint_probability_loss_var(w, gt)
        else:
            if pose_gt is None or x3d is None or y2d_norm is None:
                raise ContractViolationError("reprojection loss needs pose and points")
            out = weighted_reprojection_loss_var(w, x3d, y2d_norm, pose_gt)
    elif loss == "triplet":
        if gt is None or rng is None:
            raise ContractViolationError("triplet loss needs gt and an rng")
        out = triplet_loss_var(f3, f2, sample_triplets(gt, rng), alpha)
    else:
        raise InvalidInputError(f"unknown loss {loss!r}")
    if out.requires_grad:
        ad.backward(out)
    g3 = f3.grad if f3.grad is not None else np.zeros_like(f3.value)
    g2 = f2.grad if f2.grad is not None else np.zeros_like(f2.value)
    return float(out.value), g3, g2


def cost_matrix_var(f3d: ad.Var, f2d: ad.Var, eps: float = 1e-12) -> ad.Var:
    """Differentiable pairwise distances; eps keeps sqrt smooth at zero."""
    a2 = ad.vsum(f3d * f3d, axis=1, keepdims=True)
    b2 = ad.reshape(ad.vsum(f2d * f2d, axis=1), (1, -1))
    d2 = a2 + b2 - 2.0 * (f3d @ ad.transpose(f2d))
    return ad.sqrt(ad.relu(d2) + eps)


# Correspondence retrieval -------------------------------------------------------


def retrieve(
    weights: np.ndarray | None,
    cost: np.ndarray | None,
    strategy: str,
    k: int | None = None,
) -> MatchList:
    """Extract candidate matches from the weighting matrix or the cost matrix.

    topk_w / topk_f: global sort (descending weight / ascending distance)
    truncated at k, ties broken by lower flat index. nn_w / nn_f: per 2D
    point, the best 3D point (N matches). mnn_w / mnn_f: mutual nearest
    neighbors only.
    """
    if strategy not in STRATEGIES:
        raise InvalidInputError(f"unknown strategy {strategy!r}")
    use_w = strategy.endswith("_w")
    mat = weights if use_w else cost
    if mat is None:
        raise InvalidInputError(f"strategy {strategy} needs its source matrix")
    mat = np.atleast_2d(np.asarray(mat, dtype=np.float64))
    m, n = mat.shape
    # Internally rank by "higher is better".
    rank = mat if use_w else -mat

    if strategy.startswith("topk"):
        if k is None:
            raise InvalidInputError("top-k retrieval needs k")
        if k > m * n:
            raise InvalidInputError(f"k={k} exceeds {m}x{n}")
        flat = rank.ravel()
        order = np.lexsort((np.arange(flat.size), -flat))[:k]
        return MatchList(order // n, order % n, mat.ravel()[order])

    best_i = np.argmax(rank, axis=0)  # per 2D point; argmax takes lowest index on ties
    if strategy.startswith("nn"):
        j = np.arange(n)
        return MatchList(best_i, j, mat[best_i, j])
    best_j = np.argmax(rank, axis=1)  # per 3D point
    j = np.arange(n)
    mutual = best_j[best_i] == j
    return MatchList(best_i[mutual], j[mutual], mat[best_i[mutual], j[mutual]])


def count_inliers(matches: MatchList, gt_pairs: np.ndarray) -> int:
    """Number of retrieved matches that are ground-truth correspondences."""
    if len(matches) == 0:
        return 0
    pairs = {(int(i), int(j)) for i, j in np.asarray(gt_pairs).reshape(-1, 2)}
    return sum((int(i), int(j)) in pairs for i, j in zip(matches.idx3d, matches.idx2d))


def label_matches(matches: MatchList, gt_pairs: np.ndarray) -> MatchList:
    """Attach ground-truth inlier flags to a match list."""
    pairs = {(int(i), int(j)) for i, j in np.asarray(gt_pairs).reshape(-1, 2)}
    flags = np.array(
        [(int(i), int(j)) in pairs for i, j in zip(matches.idx3d, matches.idx2d)],
        dtype=bool,
    )
    return MatchList(matches.idx3d, matches.idx2d, matches.scores, flags)


def dump_weight_matrix(path, weights: WeightMatrix, meta: dict | None = None) -> None:
    """Debug dump of W in the shared tensor-container format."""
    from .featnet import ParamStore, save_checkpoint

    store = ParamStore()
    store.add("otmatch/weights", weights.w)
    store.add("otmatch/row_scaling", weights.a)
    store.add("otmatch/col_scaling", weights.b)
    save_checkpoint(path, store, {"kind": "weight-matrix-dump", **(meta or {})})
