"""Benchmark harness: dataset evaluation, retrieval-strategy study, the
random-correspondence P3P-RANSAC baseline and outlier sweeps, with JSON/CSV
report emission.

Reports are reproducible bit for bit from (spec, seed): the deterministic
metrics go to report.json while wall-clock timings are written to a separate
timings.json sidecar.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .datagen import SceneSample, inject_outliers, read_dataset, scene_to_normalized
from .errors import ConfigurationError, InvalidInputError
from .featnet import ParamStore
from .geometry import recall_curve, rotation_error_deg, translation_error
from .otmatch import (
    STRATEGIES,
    cost_matrix,
    count_inliers,
    retrieve,
    sinkhorn,
    uniform_priors,
)
from .pipeline import PipelineConfig, infer, load_pipeline_checkpoint, _features_numpy
from .solvers import bearing_vectors, p3p, ransac_iterations
from .geometry import angular_residuals_many

SCHEMA_VERSION = 1
DEFAULT_ROTATION_GRID = [30.0 * (i + 1) / 60.0 for i in range(60)]
DEFAULT_TRANSLATION_GRID = [1.0 * (i + 1) / 60.0 for i in range(60)]
SWEEP_MODES = ("3d", "2d", "joint")

ENV_OUT_DIR = "BLINDPNP_OUT"
ENV_THREADS = "BLINDPNP_THREADS"


def env_threads(default: int = 1) -> int:
    raw = os.environ.get(ENV_THREADS)
    if raw is None:
        return default
    try:
        value = int(raw)
    except ValueError as exc:
        raise ConfigurationError(f"{ENV_THREADS} must be an integer") from exc
    return max(1, value)


def resolve_out_dir(requested) -> Path:
    override = os.environ.get(ENV_OUT_DIR)
    return Path(override) if override else Path(requested)


@dataclass
class ExperimentSpec:
    dataset: str
    checkpoint: str | None = None
    out_dir: str = "bench-out"
    seed: int = 0
    k_list: list = field(default_factory=lambda: [50, 100, 200])
    strategies: list = field(default_factory=lambda: list(STRATEGIES))
    outlier_ratios: list = field(default_factory=lambda: [0.0, 0.5, 1.0])
    sweep_modes: list = field(default_factory=lambda: list(SWEEP_MODES))
    rotation_grid: list = field(default_factory=lambda: list(DEFAULT_ROTATION_GRID))
    translation_grid: list = field(default_factory=lambda: list(DEFAULT_TRANSLATION_GRID))
    use_refiner: bool = True
    baseline_budget: int = 2000
    threads: int = 1

    def validate(self, need_checkpoint: bool) -> None:
        if not Path(self.dataset).exists():
            raise ConfigurationError(f"dataset path {self.dataset!r} does not exist")
        if need_checkpoint:
            if self.checkpoint is None or not Path(self.checkpoint).exists():
                raise ConfigurationError("checkpoint path missing or nonexistent")
        for name in ("k_list", "strategies", "outlier_ratios", "sweep_modes"):
            if not getattr(self, name):
                raise ConfigurationError(f"{name} must be non-empty")
        unknown = set(self.strategies) - set(STRATEGIES)
        if unknown:
            raise ConfigurationError(f"unknown strategies {sorted(unknown)}")
        unknown = set(self.sweep_modes) - set(SWEEP_MODES)
        if unknown:
            raise ConfigurationError(f"unknown sweep modes {sorted(unknown)}")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ExperimentSpec":
        known = {f.name for f in ExperimentSpec.__dataclass_fields__.values()}
        extra = set(d) - known
        if extra:
            raise ConfigurationError(f"unknown spec fields {sorted(extra)}")
        return ExperimentSpec(**d)


def quartiles(values) -> tuple[float, float, float]:
    """(Q1, median, Q3) by linear interpolation between closest ranks."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise InvalidInputError("quartiles of an empty sequence")
    return tuple(float(np.percentile(v, p, method="linear")) for p in (25, 50, 75))


@dataclass
class MetricsReport:
    schema_version: int
    kind: str
    rotation_errors: list
    translation_errors: list
    rotation_quartiles: tuple
    translation_quartiles: tuple
    recall: dict
    inlier_curves: dict
    timings: dict
    metadata: dict

    def to_dict(self, include_timings: bool = True) -> dict:
        d = {
            "schema_version": self.schema_version,
            "kind": self.kind,
            "rotation_errors": list(map(float, self.rotation_errors)),
            "translation_errors": list(map(float, self.translation_errors)),
            "rotation_quartiles": list(self.rotation_quartiles),
            "translation_quartiles": list(self.translation_quartiles),
            "recall": self.recall,
            "inlier_curves": self.inlier_curves,
            "metadata": self.metadata,
        }
        if include_timings:
            d["timings"] = self.timings
        return d

    @staticmethod
    def from_dict(d: dict) -> "MetricsReport":
        return MetricsReport(
            schema_version=d["schema_version"],
            kind=d["kind"],
            rotation_errors=d["rotation_errors"],
            translation_errors=d["translation_errors"],
            rotation_quartiles=tuple(d["rotation_quartiles"]),
            translation_quartiles=tuple(d["translation_quartiles"]),
            recall=d["recall"],
            inlier_curves=d["inlier_curves"],
            timings=d.get("timings", {}),
            metadata=d["metadata"],
        )

    def save(self, out_dir, stem: str = "report") -> Path:
        """Write <stem>.json (deterministic) plus <stem>.timings.json."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / f"{stem}.json"
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(include_timings=False), fh, indent=2, sort_keys=True)
        with open(out / f"{stem}.timings.json", "w", encoding="utf-8") as fh:
            json.dump(self.timings, fh, indent=2, sort_keys=True)
        self.write_csv_curves(out, stem)
        return path

    @staticmethod
    def load(path) -> "MetricsReport":
        with open(path, "r", encoding="utf-8") as fh:
            return MetricsReport.from_dict(json.load(fh))

    def write_csv_curves(self, out_dir, stem: str = "report") -> None:
        out = Path(out_dir)
        with open(out / f"{stem}.recall.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["metric", "threshold", "recall"])
            for metric, curve in sorted(self.recall.items()):
                for tau, frac in zip(curve["thresholds"], curve["fractions"]):
                    writer.writerow([metric, tau, frac])
        with open(out / f"{stem}.inliers.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["strategy", "matches", "mean_inliers"])
            for strategy, curve in sorted(self.inlier_curves.items()):
                for k, c in zip(curve["matches"], curve["mean_inliers"]):
                    writer.writerow([strategy, k, c])


def _retrieval_study(scene, f3, f2, w, cost, spec: ExperimentSpec) -> dict:
    """Per-scene inlier counts for every requested strategy."""
    out = {}
    mn = cost.size
    for strategy in spec.strategies:
        if strategy.startswith("topk"):
            counts = []
            for k in spec.k_list:
                matches = retrieve(w, cost, strategy, min(k, mn))
                counts.append(count_inliers(matches, scene.gt_matches))
            out[strategy] = {"matches": list(spec.k_list), "inliers": counts}
        else:
            matches = retrieve(w, cost, strategy, None)
            out[strategy] = {
                "matches": [len(matches)],
                "inliers": [count_inliers(matches, scene.gt_matches)],
            }
    return out


def _eval_one(scene, params, cfg, spec):
    t0 = time.perf_counter()
    f3, f2, y_norm = _features_numpy(scene, params, cfg)
    t1 = time.perf_counter()
    cost = cost_matrix(f3, f2)
    w = sinkhorn(cost, uniform_priors(f3.shape[0], f2.shape[0]), cfg.lam, cfg.sinkhorn_iters)
    t2 = time.perf_counter()
    study = _retrieval_study(scene, f3, f2, w.w, cost, spec)
    t3 = time.perf_counter()
    result = infer(
        scene, params, cfg, use_refiner=spec.use_refiner, features=(f3, f2)
    )
    t4 = time.perf_counter()
    timings = {
        "features": t1 - t0,
        "matching": t2 - t1,
        "retrieval_study": t3 - t2,
        "inference": t4 - t3,
    }
    return {
        "rotation_error": rotation_error_deg(
            result.estimate.pose.rotation, scene.pose_gt.rotation
        ),
        "translation_error": translation_error(
            result.estimate.pose.translation, scene.pose_gt.translation
        ),
        "study": study,
        "timings": timings,
        "diagnostics": result.diagnostics,
        "num_gt": scene.num_gt,
        "num_points": (len(scene.x3d), len(scene.y2d)),
    }


def _aggregate(kind, per_scene, spec, extra_meta):
    rot = [r["rotation_error"] for r in per_scene]
    trans = [r["translation_error"] for r in per_scene]
    curves = {}
    for strategy in spec.strategies:
        rows = [r["study"][strategy] for r in per_scene]
        matches = rows[0]["matches"]
        inliers = np.array([row["inliers"] for row in rows], dtype=np.float64)
        mean_matches = np.array(
            [row["matches"] for row in rows], dtype=np.float64
        ).mean(axis=0)
        curves[strategy] = {
            "matches": [float(x) for x in mean_matches],
            "mean_inliers": [float(x) for x in inliers.mean(axis=0)],
        }
    stage_totals: dict[str, float] = {}
    for r in per_scene:
        for name, dt in r["timings"].items():
            stage_totals[name] = stage_totals.get(name, 0.0) + dt
    report = MetricsReport(
        schema_version=SCHEMA_VERSION,
        kind=kind,
        rotation_errors=rot,
        translation_errors=trans,
        rotation_quartiles=quartiles(rot),
        translation_quartiles=quartiles(trans),
        recall={
            "rotation_deg": {
                "thresholds": list(spec.rotation_grid),
                "fractions": [float(x) for x in recall_curve(rot, spec.rotation_grid)],
            },
            "translation": {
                "thresholds": list(spec.translation_grid),
                "fractions": [
                    float(x) for x in recall_curve(trans, spec.translation_grid)
                ],
            },
        },
        inlier_curves=curves,
        timings={"stages": stage_totals},
        metadata={
            "spec": spec.to_dict(),
            "quantile_convention": "linear interpolation between closest ranks",
            "num_scenes": len(per_scene),
            "mean_num_gt": float(np.mean([r["num_gt"] for r in per_scene])),
            "refiner_fallbacks": int(
                sum(r["diagnostics"].get("refiner_fallback", False) for r in per_scene)
            ),
            **extra_meta,
        },
    )
    return report


def run_eval(
    spec: ExperimentSpec,
    scenes: list[SceneSample] | None = None,
    params_cfg: tuple[ParamStore, PipelineConfig] | None = None,
) -> MetricsReport:
    """Evaluate the inference path over a dataset.

    Scenes and parameters may be passed directly (tests, sweeps); otherwise
    they are loaded from the spec paths.
    """
    wall0 = time.perf_counter()
    if params_cfg is None:
        spec.validate(need_checkpoint=True)
        params, cfg, _ = load_pipeline_checkpoint(spec.checkpoint)
    else:
        params, cfg = params_cfg
    if scenes is None:
        scenes, _ = read_dataset(spec.dataset)

    threads = max(spec.threads, env_threads(spec.threads))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_scene = list(
                pool.map(lambda sc: _eval_one(sc, params, cfg, spec), scenes)
            )
    else:
        per_scene = [_eval_one(sc, params, cfg, spec) for sc in scenes]
    report = _aggregate("eval", per_scene, spec, {})
    report.timings["wall_total"] = time.perf_counter() - wall0
    return report


# Random-correspondence baseline --------------------------------------------------


def baseline_success_probability(w: float, q: int, budget: int) -> float:
    """P(at least one all-inlier sample in `budget` independent draws)."""
    if not 0.0 <= w <= 1.0:
        raise InvalidInputError("w must be in [0,1]")
    return float(-math.expm1(budget * math.log1p(-(w**q)))) if w > 0 else 0.0


def baseline_budget_ratio(
    w: float, q: int, budget: int, confidence: float = 0.9
) -> float:
    """Fraction of the draws required for `confidence` that `budget` covers.

    Equal to budget / (log(1-confidence) / log(1-w^q)); for small w^q this is
    what a fixed hypothesis budget achieves against the required iteration
    count.
    """
    wq = w**q
    if wq >= 1.0:
        return float(budget)
    return float(budget * math.log1p(-wq) / math.log1p(-confidence))


def run_baseline_random_ransac(
    spec: ExperimentSpec, scenes: list[SceneSample] | None = None
) -> MetricsReport:
    """P3P-RANSAC with uniformly random 2D-3D correspondence samples.

    Per scene, `baseline_budget` hypotheses each draw four random (i, j)
    pairs; a draw counts as a sampling success when all four pairs are
    ground-truth matches. Hypothesis poses are scored by nearest-reprojection
    inlier counting and the best pose's errors are reported alongside the
    analytic success numbers.
    """
    wall0 = time.perf_counter()
    if scenes is None:
        spec.validate(need_checkpoint=False)
        scenes, _ = read_dataset(spec.dataset)
    rng = np.random.default_rng(spec.seed)
    budget = spec.baseline_budget
    rot, trans = [], []
    sample_successes = 0
    per_scene_expected = []
    t_hyp = 0.0
    for scene in scenes:
        x = scene.x3d.points
        y_norm = scene_to_normalized(scene)
        bearings = bearing_vectors(y_norm)
        m, n = x.shape[0], y_norm.shape[0]
        gt = {(int(i), int(j)) for i, j in scene.gt_matches}
        w_pair = len(gt) / (m * n)
        per_scene_expected.append(baseline_success_probability(w_pair, 4, budget))
        best = (-1, None)
        t0 = time.perf_counter()
        for _ in range(budget):
            i_pick = rng.integers(m, size=4)
            j_pick = rng.integers(n, size=4)
            if all((int(i), int(j)) in gt for i, j in zip(i_pick, j_pick)):
                sample_successes += 1
            if (
                len(set(i_pick[:3].tolist())) < 3
                or len(set(j_pick[:3].tolist())) < 3
            ):
                continue
            try:
                pose = p3p(
                    x[i_pick[:3]],
                    bearings[j_pick[:3]],
                    x[i_pick[3]],
                    y_norm[j_pick[3]],
                )
            except Exception:
                continue
            # Blind scoring: a 2D point is an inlier when its nearest
            # reprojected 3D point lies within the angular threshold.
            res = np.sqrt(
                2.0
                * np.clip(
                    1.0
                    - _unit(x @ pose.rotation.T + pose.translation) @ bearings.T,
                    0.0,
                    2.0,
                )
            )
            count = int((res.min(axis=0) < 0.02).sum())
            if count > best[0]:
                best = (count, pose)
        t_hyp += time.perf_counter() - t0
        if best[1] is not None:
            rot.append(rotation_error_deg(best[1].rotation, scene.pose_gt.rotation))
            trans.append(
                translation_error(best[1].translation, scene.pose_gt.translation)
            )
        else:
            rot.append(180.0)
            trans.append(float(np.linalg.norm(scene.pose_gt.translation)))
    mean_w = float(
        np.mean([len(s.gt_matches) / (len(s.x3d) * len(s.y2d)) for s in scenes])
    )
    report = MetricsReport(
        schema_version=SCHEMA_VERSION,
        kind="baseline_random_ransac",
        rotation_errors=rot,
        translation_errors=trans,
        rotation_quartiles=quartiles(rot),
        translation_quartiles=quartiles(trans),
        recall={
            "rotation_deg": {
                "thresholds": list(spec.rotation_grid),
                "fractions": [float(v) for v in recall_curve(rot, spec.rotation_grid)],
            },
            "translation": {
                "thresholds": list(spec.translation_grid),
                "fractions": [
                    float(v) for v in recall_curve(trans, spec.translation_grid)
                ],
            },
        },
        inlier_curves={},
        timings={"stages": {"hypotheses": t_hyp}, "wall_total": time.perf_counter() - wall0},
        metadata={
            "spec": spec.to_dict(),
            "budget_per_scene": budget,
            "empirical_sample_successes": int(sample_successes),
            "total_hypotheses": int(budget * len(scenes)),
            "mean_pair_inlier_ratio": mean_w,
            "analytic_success_probability": float(np.mean(per_scene_expected)),
            "predicted_success_ratio_vs_confidence_budget": baseline_budget_ratio(
                mean_w, 4, budget
            ),
            "num_scenes": len(scenes),
        },
    )
    return report


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def run_outlier_sweep(
    spec: ExperimentSpec,
    scenes: list[SceneSample] | None = None,
    params_cfg=None,
) -> dict:
    """Evaluate across outlier ratios and injection modes.

    Returns {"table": rows, "reports": {(mode, ratio): MetricsReport}}; the
    ratio-zero cell runs on the untouched scenes and therefore reproduces
    run_eval exactly.
    """
    if params_cfg is None:
        spec.validate(need_checkpoint=True)
        params, cfg, _ = load_pipeline_checkpoint(spec.checkpoint)
        params_cfg = (params, cfg)
    if scenes is None:
        scenes, _ = read_dataset(spec.dataset)
    rows = []
    reports = {}
    for mode in spec.sweep_modes:
        for ridx, ratio in enumerate(spec.outlier_ratios):
            if ratio == 0.0:
                variant = scenes
            else:
                r3 = ratio if mode in ("3d", "joint") else 0.0
                r2 = ratio if mode in ("2d", "joint") else 0.0
                variant = [
                    inject_outliers(
                        sc,
                        r3,
                        r2,
                        np.random.default_rng(spec.seed + 7919 * ridx + 104729 * si),
                    )
                    for si, sc in enumerate(scenes)
                ]
            report = run_eval(spec, scenes=variant, params_cfg=params_cfg)
            report.metadata["sweep"] = {"mode": mode, "ratio": ratio}
            reports[(mode, ratio)] = report
            rows.append(
                {
                    "mode": mode,
                    "ratio": ratio,
                    "median_rotation_deg": report.rotation_quartiles[1],
                    "median_translation": report.translation_quartiles[1],
                }
            )
    return {"table": rows, "reports": reports}


def save_sweep(out_dir, sweep: dict) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "sweep.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"table": sweep["table"]}, fh, indent=2, sort_keys=True)
    with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mode", "ratio", "median_rotation_deg", "median_translation"])
        for row in sweep["table"]:
            writer.writerow(
                [
                    row["mode"],
                    row["ratio"],
                    row["median_rotation_deg"],
                    row["median_translation"],
                ]
            )
    for (mode, ratio), report in sweep["reports"].items():
        report.save(out, stem=f"sweep_{mode}_{ratio:g}")
    return path
