"""End-to-end composition: feature streams -> transport matching -> top-K
retrieval -> classification filtering -> robust pose recovery, plus the
two-stage training procedure.

Stage 1 trains the feature/matching network on one of three losses (mass on
ground-truth pairs by default). Stage 2 freezes it, extracts top-K match
lists and trains the classifier through the weighted DLT. All training is
deterministic given the config seeds; progress streams as JSON lines.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .datagen import SceneSample, scene_to_normalized
from .errors import ConfigurationError, InvalidInputError, NumericFailureError
from .featnet import (
    AdamState,
    FeatNetConfig,
    ParamStore,
    adam_step,
    init_featnet_params,
    load_checkpoint,
    save_checkpoint,
    stream_features_var,
)
from .otmatch import (
    MatchList,
    cost_matrix,
    cost_matrix_var,
    joint_probability_loss_var,
    retrieve,
    sample_triplets,
    sinkhorn,
    sinkhorn_var,
    triplet_loss_var,
    uniform_priors,
    weighted_reprojection_loss_var,
    gt_matrix,
)
from .refine import (
    RefinerConfig,
    classify,
    match_features,
    refiner_sample_loss,
    train_refiner,
)
from .solvers import PoseEstimate, RansacConfig, ransac_p3p

LOSSES = ("joint_probability", "reprojection", "triplet")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    lr: float = 1e-5
    batch_size: int = 12
    seed: int = 0
    convergence_window: int = 5
    convergence_rel: float = 1e-3
    stage2_epochs: int = 20
    stage2_lr: float = 1e-3
    stage2_batch_size: int = 8
    stage2_top_k: int = 200

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        return TrainConfig(**d)


@dataclass(frozen=True)
class PipelineConfig:
    featnet: FeatNetConfig = field(default_factory=FeatNetConfig)
    refiner: RefinerConfig = field(default_factory=RefinerConfig)
    ransac: RansacConfig = field(default_factory=RansacConfig)
    lam: float = 0.1
    sinkhorn_iters: int = 20
    top_k: int = 2000
    loss: str = "joint_probability"
    triplet_alpha: float = 10.0

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise InvalidInputError(f"loss must be one of {LOSSES}")

    def to_dict(self) -> dict:
        return {
            "featnet": self.featnet.to_dict(),
            "refiner": self.refiner.to_dict(),
            "ransac": asdict(self.ransac),
            "lam": self.lam,
            "sinkhorn_iters": self.sinkhorn_iters,
            "top_k": self.top_k,
            "loss": self.loss,
            "triplet_alpha": self.triplet_alpha,
        }

    @staticmethod
    def from_dict(d: dict) -> "PipelineConfig":
        return PipelineConfig(
            featnet=FeatNetConfig.from_dict(d["featnet"]),
            refiner=RefinerConfig.from_dict(d["refiner"]),
            ransac=RansacConfig(**d["ransac"]),
            lam=d.get("lam", 0.1),
            sinkhorn_iters=d.get("sinkhorn_iters", 20),
            top_k=d.get("top_k", 2000),
            loss=d.get("loss", "joint_probability"),
            triplet_alpha=d.get("triplet_alpha", 10.0),
        )


def desk_config(**overrides) -> PipelineConfig:
    """Small-scale defaults that train in minutes on one CPU."""
    base = dict(
        featnet=FeatNetConfig(dim=64, blocks=2, knn=10),
        refiner=RefinerConfig(blocks=4, width=64),
        ransac=RansacConfig(),
        top_k=200,
    )
    base.update(overrides)
    return PipelineConfig(**base)


@dataclass
class InferResult:
    estimate: PoseEstimate
    matches: MatchList
    weights: np.ndarray | None
    diagnostics: dict


def _features_numpy(scene: SceneSample, params: ParamStore, cfg: PipelineConfig):
    leaves = params.leaves()
    y_norm = scene_to_normalized(scene)
    f3 = stream_features_var("p3", scene.x3d.points, leaves, cfg.featnet).value
    f2 = stream_features_var("p2", y_norm, leaves, cfg.featnet).value
    return f3, f2, y_norm


def infer(
    scene: SceneSample,
    params: ParamStore,
    cfg: PipelineConfig,
    use_refiner: bool = True,
    features: tuple[np.ndarray, np.ndarray] | None = None,
) -> InferResult:
    """Recover a pose and a filtered match list for a scene (pose ignored).

    `features` overrides the learned descriptors (useful for oracle probes).
    When the classifier keeps fewer than 4 matches the solver falls back to
    the unfiltered top-K list and the diagnostics record it.
    """
    timings: dict[str, float] = {}
    t0 = time.perf_counter()
    if features is not None:
        f3, f2 = features
        y_norm = scene_to_normalized(scene)
    else:
        f3, f2, y_norm = _features_numpy(scene, params, cfg)
    t1 = time.perf_counter()
    timings["features"] = t1 - t0

    m, n = f3.shape[0], f2.shape[0]
    cost = cost_matrix(f3, f2)
    weights = sinkhorn(cost, uniform_priors(m, n), cfg.lam, cfg.sinkhorn_iters)
    t2 = time.perf_counter()
    timings["matching"] = t2 - t1

    k = min(cfg.top_k, m * n)
    matches = retrieve(weights.w, cost, "topk_w", k)
    t3 = time.perf_counter()
    timings["retrieval"] = t3 - t2

    fallback = False
    match_weights = None
    kept = matches
    has_refiner = any(name.startswith("refiner/") for name in params.tensors)
    if use_refiner and has_refiner:
        x_m = scene.x3d.points[matches.idx3d]
        y_m = y_norm[matches.idx2d]
        feats = match_features(
            x_m, y_m, matches.scores if cfg.refiner.use_weight_channel else None
        )
        match_weights = classify(feats, params, cfg.refiner)
        keep = match_weights > 0
        if keep.sum() < 4:
            fallback = True
        else:
            kept = matches.take(keep)
    t4 = time.perf_counter()
    timings["refine"] = t4 - t3

    estimate = ransac_p3p(
        kept.idx3d, kept.idx2d, scene.x3d.points, y_norm, cfg.ransac
    )
    t5 = time.perf_counter()
    timings["solver"] = t5 - t4
    return InferResult(
        estimate,
        kept,
        match_weights,
        {
            "timings": timings,
            "refiner_fallback": fallback,
            "refiner_used": bool(use_refiner and has_refiner and not fallback),
            "num_candidates": len(matches),
            "num_kept": len(kept),
        },
    )


def _stage1_sample_loss(
    scene: SceneSample,
    leaves: dict[str, ad.Var],
    cfg: PipelineConfig,
    triplet_rng: np.random.Generator | None,
) -> ad.Var:
    y_norm = scene_to_normalized(scene)
    f3 = stream_features_var("p3", scene.x3d.points, leaves, cfg.featnet)
    f2 = stream_features_var("p2", y_norm, leaves, cfg.featnet)
    m, n = len(scene.x3d), len(scene.y2d)
    c = gt_matrix(scene.gt_matches, m, n)
    if cfg.loss == "triplet":
        return triplet_loss_var(
            f3, f2, sample_triplets(c, triplet_rng), cfg.triplet_alpha
        )
    cost = cost_matrix_var(f3, f2)
    priors = uniform_priors(m, n)
    w = sinkhorn_var(cost, priors.r, priors.s, cfg.lam, cfg.sinkhorn_iters)
    if cfg.loss == "joint_probability":
        return joint_probability_loss_var(w, c)
    return weighted_reprojection_loss_var(
        w, scene.x3d.points, y_norm, scene.pose_gt
    )


@dataclass
class TrainHistory:
    epoch_losses: list
    converged_epoch: int | None


def train_stage1(
    scenes: list[SceneSample],
    cfg: PipelineConfig,
    train_cfg: TrainConfig,
    log_fn=None,
    params: ParamStore | None = None,
) -> tuple[ParamStore, TrainHistory]:
    """Minimize the selected loss over the dataset with Adam.

    Batches follow a seeded shuffle; per-sample gradients accumulate in a
    fixed order, so repeated runs are bit-identical. Convergence is declared
    after `convergence_window` consecutive epochs with relative improvement
    below `convergence_rel`.
    """
    rng = np.random.default_rng(train_cfg.seed)
    if params is None:
        params = init_featnet_params(cfg.featnet, rng)
    state = AdamState(params)
    n = len(scenes)
    if n == 0:
        raise ConfigurationError("empty training set")
    history = []
    converged_epoch = None
    stall = 0
    for epoch in range(train_cfg.epochs):
        order = rng.permutation(n)
        triplet_rng = np.random.default_rng(train_cfg.seed * 977 + epoch)
        total = 0.0
        for start in range(0, n, train_cfg.batch_size):
            batch = order[start : start + train_cfg.batch_size]
            grads = {k: np.zeros_like(v) for k, v in params.tensors.items()}
            for idx in batch:
                leaves = params.leaves()
                loss = _stage1_sample_loss(scenes[idx], leaves, cfg, triplet_rng)
                if not np.isfinite(loss.value):
                    raise NumericFailureError("non-finite training loss")
                if loss.requires_grad:
                    ad.backward(loss)
                for name, var in leaves.items():
                    if var.grad is not None:
                        grads[name] += var.grad
                total += float(loss.value)
            for name in grads:
                grads[name] /= len(batch)
            adam_step(params, grads, state, train_cfg.lr)
        mean_loss = total / n
        if history:
            prev = history[-1]
            rel = abs(prev - mean_loss) / max(abs(prev), 1e-12)
            stall = stall + 1 if rel < train_cfg.convergence_rel else 0
        history.append(mean_loss)
        if log_fn is not None:
            log_fn({"stage": 1, "epoch": epoch, "loss": mean_loss})
        if converged_epoch is None and stall >= train_cfg.convergence_window:
            converged_epoch = epoch
            break
    return params, TrainHistory(history, converged_epoch)


def prepare_refiner_samples(
    scenes: list[SceneSample],
    stage1_params: ParamStore,
    cfg: PipelineConfig,
    top_k: int,
) -> list[dict]:
    """Frozen-matcher top-K lists converted to refiner training samples."""
    samples = []
    for scene in scenes:
        f3, f2, y_norm = _features_numpy(scene, stage1_params, cfg)
        cost = cost_matrix(f3, f2)
        w = sinkhorn(cost, uniform_priors(f3.shape[0], f2.shape[0]), cfg.lam, cfg.sinkhorn_iters)
        k = min(top_k, cost.size)
        matches = retrieve(w.w, cost, "topk_w", k)
        samples.append(
            {
                "x3d": scene.x3d.points[matches.idx3d],
                "y2d_norm": y_norm[matches.idx2d],
                "weights": matches.scores,
                "r_gt": scene.pose_gt.rotation,
                "t_gt": scene.pose_gt.translation,
                "idx3d": matches.idx3d,
                "idx2d": matches.idx2d,
            }
        )
    return samples


def train_stage2(
    scenes: list[SceneSample],
    stage1_params: ParamStore,
    cfg: PipelineConfig,
    train_cfg: TrainConfig,
    log_fn=None,
) -> ParamStore:
    """Train the classifier on frozen stage-1 matches; returns a combined
    parameter store (stage-1 tensors bit-identical, refiner tensors added)."""
    samples = prepare_refiner_samples(
        scenes, stage1_params, cfg, train_cfg.stage2_top_k
    )
    result = train_refiner(
        samples,
        cfg.refiner,
        epochs=train_cfg.stage2_epochs,
        lr=train_cfg.stage2_lr,
        batch_size=train_cfg.stage2_batch_size,
        seed=train_cfg.seed,
        log_fn=log_fn,
    )
    combined = ParamStore()
    for name, value in stage1_params.tensors.items():
        combined.add(name, value.copy())
    for name, value in result.params.tensors.items():
        combined.add(name, value.copy())
    return combined


def save_pipeline_checkpoint(path, params: ParamStore, cfg: PipelineConfig, train_cfg: TrainConfig | None = None):
    config = {"pipeline": cfg.to_dict()}
    if train_cfg is not None:
        config["train"] = train_cfg.to_dict()
    save_checkpoint(path, params, config)


def load_pipeline_checkpoint(path):
    params, config = load_checkpoint(path)
    cfg = PipelineConfig.from_dict(config["pipeline"])
    return params, cfg, config


class JsonlLogger:
    """Line-delimited JSON training log."""

    def __init__(self, path):
        self.path = path
        self._fh = open(path, "a", encoding="utf-8")

    def __call__(self, record: dict):
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()
