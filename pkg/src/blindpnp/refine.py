"""Per-match inlier classifier over putative 2D-3D matches.

Each match is a 5-vector (x, y, z, u, v): the 3D coordinates plus the
normalized 2D coordinates (optionally a 6th channel carrying the transport
weight). A residual stack of (shared per-match linear -> context
normalization -> affine -> ReLU -> linear) blocks ends in one logit per
match, mapped through w = max(0, tanh(logit)) so rejected matches get an
exact zero weight. Training regresses the pose through a weighted DLT and
penalizes it against the ground truth with the sign-invariant pose loss.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .errors import InvalidInputError, NumericFailureError
from .featnet import AdamState, ParamStore, adam_step, context_normalize_var
from .solvers import assemble_dlt_pose, dlt_rows, weighted_dlt_var

REFINER_GAP_FLOOR = 1e-8


@dataclass(frozen=True)
class RefinerConfig:
    blocks: int = 6
    width: int = 128
    use_weight_channel: bool = False
    init_scale: float = 0.1
    logit_bias: float = 0.5

    @property
    def in_dim(self) -> int:
        return 6 if self.use_weight_channel else 5

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "RefinerConfig":
        return RefinerConfig(**d)


def init_refiner_params(cfg: RefinerConfig, rng: np.random.Generator) -> ParamStore:
    params = ParamStore()
    pre = "refiner"
    params.add(f"{pre}/lift/w", rng.normal(0.0, cfg.init_scale, (cfg.in_dim, cfg.width)))
    params.add(f"{pre}/lift/b", np.zeros(cfg.width))
    scale = cfg.init_scale / np.sqrt(cfg.width)
    for blk in range(cfg.blocks):
        b = f"{pre}/block{blk}"
        params.add(f"{b}/w1", rng.normal(0.0, scale, (cfg.width, cfg.width)))
        params.add(f"{b}/b1", np.zeros(cfg.width))
        params.add(f"{b}/gamma", np.ones(cfg.width))
        params.add(f"{b}/beta", np.zeros(cfg.width))
        params.add(f"{b}/w2", rng.normal(0.0, scale, (cfg.width, cfg.width)))
        params.add(f"{b}/b2", np.zeros(cfg.width))
    params.add(f"{pre}/head/w", rng.normal(0.0, scale, (cfg.width, 1)))
    # Positive bias keeps most matches alive at initialization so the DLT is
    # well posed and gradients flow.
    params.add(f"{pre}/head/b", np.full(1, cfg.logit_bias))
    return params


def match_features(
    x3d: np.ndarray, y2d_norm: np.ndarray, weights: np.ndarray | None = None
) -> np.ndarray:
    """Stack per-match input rows (x, y, z, u, v[, w])."""
    x = np.atleast_2d(np.asarray(x3d, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y2d_norm, dtype=np.float64))
    if x.shape[0] != y.shape[0]:
        raise InvalidInputError("match count mismatch")
    cols = [x, y]
    if weights is not None:
        w = np.asarray(weights, dtype=np.float64).reshape(-1, 1)
        if w.shape[0] != x.shape[0]:
            raise InvalidInputError("weight column length mismatch")
        cols.append(w)
    feats = np.concatenate(cols, axis=1)
    if not np.isfinite(feats).all():
        raise InvalidInputError("match features must be finite")
    return feats


def classify_var(
    matches: np.ndarray, leaves: dict[str, ad.Var], cfg: RefinerConfig
) -> ad.Var:
    """Differentiable weight head; returns a (K,) vector of max(0, tanh(logit))."""
    m = np.atleast_2d(np.asarray(matches, dtype=np.float64))
    if m.shape[1] != cfg.in_dim:
        raise InvalidInputError(
            f"refiner expects {cfg.in_dim} input channels, got {m.shape[1]}"
        )
    pre = "refiner"
    x = ad.constant(m) @ leaves[f"{pre}/lift/w"] + leaves[f"{pre}/lift/b"]
    for blk in range(cfg.blocks):
        b = f"{pre}/block{blk}"
        y = x @ leaves[f"{b}/w1"] + leaves[f"{b}/b1"]
        y = context_normalize_var(y)
        y = y * leaves[f"{b}/gamma"] + leaves[f"{b}/beta"]
        y = ad.relu(y)
        y = y @ leaves[f"{b}/w2"] + leaves[f"{b}/b2"]
        x = x + y
    logits = x @ leaves[f"{pre}/head/w"] + leaves[f"{pre}/head/b"]
    return ad.reshape(ad.relu(ad.tanh(logits)), (-1,))


def classify(matches: np.ndarray, params: ParamStore, cfg: RefinerConfig) -> np.ndarray:
    """Nonnegative per-match weights; permutation-equivariant over matches."""
    out = classify_var(matches, params.leaves(), cfg)
    if not np.isfinite(out.value).all():
        raise NumericFailureError("non-finite refiner activations")
    return out.value.copy()


def pose_loss(
    r: np.ndarray, t: np.ndarray, r_gt: np.ndarray, t_gt: np.ndarray
) -> float:
    """Sign-ambiguity-tolerant squared error on (R, t); R need not be a
    rotation."""
    r = np.asarray(r, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    r_gt = np.asarray(r_gt, dtype=np.float64)
    t_gt = np.asarray(t_gt, dtype=np.float64)
    rot_term = min(((r - r_gt) ** 2).sum(), ((r + r_gt) ** 2).sum())
    trans_term = min(((t - t_gt) ** 2).sum(), ((t + t_gt) ** 2).sum())
    return float(rot_term + trans_term)


_R_SLOTS = np.zeros(12)
_R_SLOTS[[0, 1, 2, 4, 5, 6, 8, 9, 10]] = 1.0
_T_SLOTS = 1.0 - _R_SLOTS


def _dlt_target(r_gt: np.ndarray, t_gt: np.ndarray) -> np.ndarray:
    m = np.zeros((3, 4))
    m[:, :3] = r_gt
    m[:, 3] = t_gt
    return m.ravel()


def pose_loss_var(p: ad.Var, r_gt: np.ndarray, t_gt: np.ndarray) -> ad.Var:
    """Pose loss on a DLT 12-vector, differentiable through the min branches."""
    target = ad.constant(_dlt_target(np.asarray(r_gt), np.asarray(t_gt)))
    rmask = ad.constant(_R_SLOTS)
    tmask = ad.constant(_T_SLOTS)
    terms = []
    for mask in (rmask, tmask):
        minus = ad.vsum((p - target) * (p - target) * mask)
        plus = ad.vsum((p + target) * (p + target) * mask)
        terms.append(minus if minus.value <= plus.value else plus)
    return terms[0] + terms[1]


@dataclass
class RefinerTrainResult:
    params: ParamStore
    epoch_losses: list
    skipped_samples: int


def refiner_sample_loss(
    sample: dict, leaves: dict[str, ad.Var], cfg: RefinerConfig
) -> ad.Var:
    """Pose loss of the weighted DLT driven by the predicted match weights.

    `sample` carries x3d (K,3), y2d_norm (K,2), optional weights (K,),
    r_gt, t_gt. Raises NumericFailureError when the weighted system is
    spectrally degenerate (callers skip those samples).
    """
    feats = match_features(
        sample["x3d"],
        sample["y2d_norm"],
        sample.get("weights") if cfg.use_weight_channel else None,
    )
    w = classify_var(feats, leaves, cfg)
    if (w.value > 0).sum() < 6:
        raise NumericFailureError("fewer than 6 positive match weights")
    a = dlt_rows(sample["x3d"], sample["y2d_norm"])
    p = weighted_dlt_var(a, w, gap_floor=REFINER_GAP_FLOOR)
    return pose_loss_var(p, sample["r_gt"], sample["t_gt"])


def train_refiner(
    samples: list,
    cfg: RefinerConfig,
    epochs: int = 20,
    lr: float = 1e-3,
    batch_size: int = 8,
    seed: int = 0,
    log_fn=None,
) -> RefinerTrainResult:
    """Train the classifier on pre-extracted match lists.

    Samples are dicts as in `refiner_sample_loss`. Batch order is shuffled
    deterministically per epoch; gradients accumulate in a fixed sample
    order, so training is reproducible bit for bit.
    """
    rng = np.random.default_rng(seed)
    params = init_refiner_params(cfg, rng)
    state = AdamState(params)
    skipped = 0
    epoch_losses = []
    n = len(samples)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        used = 0
        for start in range(0, n, batch_size):
            batch = order[start : start + batch_size]
            grads = {k: np.zeros_like(v) for k, v in params.tensors.items()}
            batch_used = 0
            for idx in batch:
                leaves = params.leaves()
                try:
                    loss = refiner_sample_loss(samples[idx], leaves, cfg)
                except NumericFailureError:
                    skipped += 1
                    continue
                ad.backward(loss)
                for name, var in leaves.items():
                    if var.grad is not None:
                        grads[name] += var.grad
                total += float(loss.value)
                used += 1
                batch_used += 1
            if batch_used:
                for name in grads:
                    grads[name] /= batch_used
                adam_step(params, grads, state, lr)
        mean_loss = total / max(used, 1)
        epoch_losses.append(mean_loss)
        if log_fn is not None:
            log_fn({"epoch": epoch, "refiner_loss": mean_loss, "skipped": skipped})
    return RefinerTrainResult(params, epoch_losses, skipped)
