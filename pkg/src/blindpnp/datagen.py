"""Synthetic scene generation, outlier injection, weak-supervision labelling
and the on-disk dataset format.

A scene draws a point cloud from one of three shape families (cube volume,
sphere surface, Gaussian clusters), samples a virtual camera pose (uniform
Euler angles, uniform translation plus a z offset), projects the visible
points onto a pixel grid and perturbs them with isotropic Gaussian noise.
Ground-truth matches pair every visible 3D point with its (shuffled)
projection. Generation is deterministic per (config, seed): sample index i
always uses the stream seeded with base_seed + i.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import GenerationFailureError, InvalidInputError
from .geometry import (
    CameraIntrinsics,
    PointSet2D,
    PointSet3D,
    Pose,
    euler_xyz,
    normalize_2d,
    project_many,
)

SHAPES = ("cube", "sphere", "clusters", "mixed")
EULER_ORDER = "xyz-intrinsic"
MAX_SYNTH_ATTEMPTS = 20


@dataclass(frozen=True)
class ProtocolConfig:
    m_points: int = 1000
    euler_range_deg: float = 45.0
    trans_range: float = 0.5
    z_offset: float = 4.5
    image_size: tuple[int, int] = (640, 480)
    focal: float = 800.0
    noise_sigma: float = 2.0
    rng_seed: int = 0
    shape: str = "mixed"

    def __post_init__(self):
        if self.m_points < 4:
            raise InvalidInputError("m_points must be >= 4")
        if self.noise_sigma < 0:
            raise InvalidInputError("noise_sigma must be >= 0")
        if self.focal <= 0:
            raise InvalidInputError("focal must be positive")
        if self.shape not in SHAPES:
            raise InvalidInputError(f"shape must be one of {SHAPES}")

    def intrinsics(self) -> CameraIntrinsics:
        w, h = self.image_size
        return CameraIntrinsics(self.focal, self.focal, w / 2.0, h / 2.0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d

    @staticmethod
    def from_dict(d: dict) -> "ProtocolConfig":
        d = dict(d)
        d["image_size"] = tuple(d["image_size"])
        return ProtocolConfig(**d)


def modelnet_protocol(**overrides) -> ProtocolConfig:
    """Object-on-a-table style protocol: unit-scale shape pushed 4.5 units
    down the optical axis."""
    base = dict(
        m_points=1000,
        euler_range_deg=45.0,
        trans_range=0.5,
        z_offset=4.5,
        image_size=(640, 480),
        focal=800.0,
        noise_sigma=2.0,
    )
    base.update(overrides)
    return ProtocolConfig(**base)


def nyu_like_protocol(**overrides) -> ProtocolConfig:
    """Indoor-depth style protocol: points sampled inside the viewing frustum,
    no z offset (the cloud already sits in front of the camera)."""
    base = dict(
        m_points=1000,
        euler_range_deg=45.0,
        trans_range=0.5,
        z_offset=0.0,
        image_size=(640, 480),
        focal=800.0,
        noise_sigma=2.0,
        shape="mixed",
    )
    base.update(overrides)
    return ProtocolConfig(**base)


PROTOCOLS = {"modelnet": modelnet_protocol, "nyu-like": nyu_like_protocol}


@dataclass
class SceneSample:
    x3d: PointSet3D
    y2d: PointSet2D
    pose_gt: Pose
    intrinsics: CameraIntrinsics
    gt_matches: np.ndarray  # (G, 2) int64 pairs (3D index, 2D index)
    outlier3d: np.ndarray  # (M,) bool, True = no ground-truth match
    outlier2d: np.ndarray  # (N,) bool

    def __post_init__(self):
        self.gt_matches = np.asarray(self.gt_matches, dtype=np.int64).reshape(-1, 2)
        self.outlier3d = np.asarray(self.outlier3d, dtype=bool)
        self.outlier2d = np.asarray(self.outlier2d, dtype=bool)
        m, n = len(self.x3d), len(self.y2d)
        if self.outlier3d.shape != (m,) or self.outlier2d.shape != (n,):
            raise InvalidInputError("outlier flag lengths do not match point sets")
        if self.gt_matches.size:
            i, j = self.gt_matches[:, 0], self.gt_matches[:, 1]
            if i.min() < 0 or i.max() >= m or j.min() < 0 or j.max() >= n:
                raise InvalidInputError("gt match index out of range")
            if np.unique(i).size != i.size or np.unique(j).size != j.size:
                raise InvalidInputError("gt matches must be one-to-one")

    @property
    def num_gt(self) -> int:
        return self.gt_matches.shape[0]


def sample_pose(cfg: ProtocolConfig, rng: np.random.Generator) -> Pose:
    """Euler angles uniform in [0, range], translation uniform in the cube
    [-trans_range, trans_range]^3 shifted by (0, 0, z_offset)."""
    angles = np.radians(rng.uniform(0.0, cfg.euler_range_deg, size=3))
    r = euler_xyz(*angles)
    t = rng.uniform(-cfg.trans_range, cfg.trans_range, size=3)
    t[2] += cfg.z_offset
    return Pose(r, t)


def _sample_shape(kind: str, m: int, rng: np.random.Generator) -> np.ndarray:
    if kind == "mixed":
        kind = SHAPES[rng.integers(3)]
    if kind == "cube":
        return rng.uniform(-0.5, 0.5, size=(m, 3))
    if kind == "sphere":
        v = rng.normal(size=(m, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return 0.5 * v
    if kind == "clusters":
        k = int(rng.integers(3, 7))
        centers = rng.uniform(-0.4, 0.4, size=(k, 3))
        assign = rng.integers(k, size=m)
        return centers[assign] + rng.normal(scale=0.08, size=(m, 3))
    raise InvalidInputError(f"unknown shape {kind!r}")


def _sample_frustum(cfg: ProtocolConfig, m: int, rng: np.random.Generator) -> np.ndarray:
    """Camera-frame points inside the image cone at depths [2, 6]."""
    w, h = cfg.image_size
    z = rng.uniform(2.0, 6.0, size=m)
    margin = 0.95
    x = rng.uniform(-margin * w / 2.0, margin * w / 2.0, size=m) / cfg.focal * z
    y = rng.uniform(-margin * h / 2.0, margin * h / 2.0, size=m) / cfg.focal * z
    return np.stack([x, y, z], axis=1)


def synthesize_scene(cfg: ProtocolConfig, rng: np.random.Generator) -> SceneSample:
    """One scene: shape + pose + visible projections + pixel noise.

    Points behind the camera or outside the image are dropped before noise;
    regeneration is retried a bounded number of times if fewer than 4 points
    remain visible.
    """
    intr = cfg.intrinsics()
    w, h = cfg.image_size
    for _ in range(MAX_SYNTH_ATTEMPTS):
        pose = sample_pose(cfg, rng)
        if cfg.z_offset == 0.0:
            cam_pts = _sample_frustum(cfg, cfg.m_points, rng)
            x3d = (cam_pts - pose.translation) @ pose.rotation
        else:
            x3d = _sample_shape(cfg.shape, cfg.m_points, rng)
        px, depth = project_many(pose, intr, x3d)
        visible = (
            (depth > 1e-9)
            & (px[:, 0] >= 0)
            & (px[:, 0] <= w)
            & (px[:, 1] >= 0)
            & (px[:, 1] <= h)
        )
        vis_idx = np.flatnonzero(visible)
        if vis_idx.size < 4:
            continue
        y = px[vis_idx]
        if cfg.noise_sigma > 0:
            y = y + rng.normal(scale=cfg.noise_sigma, size=y.shape)
        # Shuffle the 2D order; argsort(order)[k] is where visible point k landed.
        order = rng.permutation(vis_idx.size)
        y = y[order]
        gt = np.stack([vis_idx, np.argsort(order)], axis=1)
        out3 = np.ones(cfg.m_points, dtype=bool)
        out3[vis_idx] = False
        out2 = np.zeros(vis_idx.size, dtype=bool)
        return SceneSample(
            PointSet3D(x3d), PointSet2D(y), pose, intr, gt, out3, out2
        )
    raise GenerationFailureError(
        f"fewer than 4 visible points after {MAX_SYNTH_ATTEMPTS} attempts"
    )


def inject_outliers(
    scene: SceneSample,
    ratio3d: float,
    ratio2d: float,
    rng: np.random.Generator,
) -> SceneSample:
    """Append floor(ratio*count) uniform bounding-box outliers to each set.

    Existing points keep their indices; injected points carry no gt match and
    are flagged.
    """
    if not (0.0 <= ratio3d <= 1.0 and 0.0 <= ratio2d <= 1.0):
        raise InvalidInputError("outlier ratios must be in [0, 1]")
    x = scene.x3d.points
    y = scene.y2d.points
    n3 = int(np.floor(ratio3d * x.shape[0]))
    n2 = int(np.floor(ratio2d * y.shape[0]))
    if n3 == 0 and n2 == 0:
        return scene
    lo3, hi3 = x.min(axis=0), x.max(axis=0)
    lo2, hi2 = y.min(axis=0), y.max(axis=0)
    if n3 > 0 and not (hi3 > lo3).all():
        raise InvalidInputError("degenerate 3D bounding box")
    if n2 > 0 and not (hi2 > lo2).all():
        raise InvalidInputError("degenerate 2D bounding box")
    extra3 = rng.uniform(lo3, hi3, size=(n3, 3)) if n3 else np.empty((0, 3))
    extra2 = rng.uniform(lo2, hi2, size=(n2, 2)) if n2 else np.empty((0, 2))
    return SceneSample(
        PointSet3D(np.concatenate([x, extra3], axis=0)),
        PointSet2D(np.concatenate([y, extra2], axis=0), frame=scene.y2d.frame),
        scene.pose_gt,
        scene.intrinsics,
        scene.gt_matches,
        np.concatenate([scene.outlier3d, np.ones(n3, dtype=bool)]),
        np.concatenate([scene.outlier2d, np.ones(n2, dtype=bool)]),
    )


def label_correspondences(
    x3d: PointSet3D,
    y2d: PointSet2D,
    pose_gt: Pose,
    intrinsics: CameraIntrinsics,
    tau_px: float,
) -> np.ndarray:
    """Weakly supervised labels: project each 3D point with the ground-truth
    pose and pair it with its nearest 2D point when the distance is below
    tau_px. One-to-one is enforced greedily in ascending distance order."""
    if tau_px <= 0:
        raise InvalidInputError("tau_px must be positive")
    if y2d.frame != "pixel":
        raise InvalidInputError("labelling expects pixel-frame 2D points")
    px, depth = project_many(pose_gt, intrinsics, x3d.points)
    y = y2d.points
    candidates = []
    for i in np.flatnonzero(depth > 1e-9):
        d = np.linalg.norm(y - px[i], axis=1)
        j = int(np.argmin(d))
        if d[j] < tau_px:
            candidates.append((float(d[j]), int(i), j))
    candidates.sort()
    used_i: set[int] = set()
    used_j: set[int] = set()
    pairs = []
    for _, i, j in candidates:
        if i in used_i or j in used_j:
            continue
        used_i.add(i)
        used_j.add(j)
        pairs.append((i, j))
    pairs.sort()
    return np.array(pairs, dtype=np.int64).reshape(-1, 2)


# Dataset file format ------------------------------------------------------------
#
# records.bin: per record, little-endian
#   u64 M, u64 N, u64 G
#   f64 3D points (M*3), f64 2D pixel points (N*2)
#   f64 intrinsics matrix row-major (9), f64 pose (12: R row-major then t)
#   u32 gt pairs (G*2)
# manifest.json: record byte offsets, protocol config, base seed.

_MANIFEST_NAME = "manifest.json"
_RECORDS_NAME = "records.bin"


def _scene_record(scene: SceneSample) -> bytes:
    m, n, g = len(scene.x3d), len(scene.y2d), scene.num_gt
    parts = [struct.pack("<QQQ", m, n, g)]
    parts.append(np.ascontiguousarray(scene.x3d.points, "<f8").tobytes())
    parts.append(np.ascontiguousarray(scene.y2d.points, "<f8").tobytes())
    parts.append(np.ascontiguousarray(scene.intrinsics.matrix(), "<f8").tobytes())
    pose_block = np.concatenate(
        [scene.pose_gt.rotation.ravel(), scene.pose_gt.translation]
    )
    parts.append(np.ascontiguousarray(pose_block, "<f8").tobytes())
    parts.append(np.ascontiguousarray(scene.gt_matches, "<u4").tobytes())
    return b"".join(parts)


def _parse_record(raw: bytes, offset: int) -> tuple[SceneSample, int]:
    m, n, g = struct.unpack_from("<QQQ", raw, offset)
    offset += 24

    def take(count):
        nonlocal offset
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        offset += count * 8
        return arr

    x3d = take(m * 3).reshape(m, 3).copy()
    y2d = take(n * 2).reshape(n, 2).copy()
    kmat = take(9).reshape(3, 3)
    pose_block = take(12)
    gt = (
        np.frombuffer(raw, dtype="<u4", count=g * 2, offset=offset)
        .reshape(g, 2)
        .astype(np.int64)
    )
    offset += g * 8
    intr = CameraIntrinsics(kmat[0, 0], kmat[1, 1], kmat[0, 2], kmat[1, 2])
    pose = Pose(pose_block[:9].reshape(3, 3), pose_block[9:])
    out3 = np.ones(m, dtype=bool)
    out2 = np.ones(n, dtype=bool)
    if g:
        out3[gt[:, 0]] = False
        out2[gt[:, 1]] = False
    scene = SceneSample(
        PointSet3D(x3d), PointSet2D(y2d), pose, intr, gt, out3, out2
    )
    return scene, offset


def write_dataset(path, scenes, cfg: ProtocolConfig, extra_meta: dict | None = None):
    """Write scenes to directory `path` (records.bin + manifest.json)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    offsets = []
    with open(path / _RECORDS_NAME, "wb") as fh:
        for scene in scenes:
            offsets.append(fh.tell())
            fh.write(_scene_record(scene))
    manifest = {
        "format_version": 1,
        "count": len(offsets),
        "offsets": offsets,
        "protocol": cfg.to_dict(),
        "seed": cfg.rng_seed,
        "euler_order": EULER_ORDER,
        "frame": "pixel",
    }
    manifest.update(extra_meta or {})
    with open(path / _MANIFEST_NAME, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def read_dataset(path):
    """Load every scene plus the manifest from a dataset directory."""
    path = Path(path)
    with open(path / _MANIFEST_NAME, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    raw = (path / _RECORDS_NAME).read_bytes()
    scenes = []
    for off in manifest["offsets"]:
        scene, _ = _parse_record(raw, off)
        scenes.append(scene)
    return scenes, manifest


def generate_dataset(
    cfg: ProtocolConfig,
    count: int,
    out_path=None,
    outlier_ratio3d: float = 0.0,
    outlier_ratio2d: float = 0.0,
):
    """Generate `count` scenes; sample i uses the stream seeded with
    cfg.rng_seed + i so serial and parallel generation agree."""
    scenes = []
    for i in range(count):
        rng = np.random.default_rng(cfg.rng_seed + i)
        scene = synthesize_scene(cfg, rng)
        if outlier_ratio3d > 0 or outlier_ratio2d > 0:
            scene = inject_outliers(scene, outlier_ratio3d, outlier_ratio2d, rng)
        scenes.append(scene)
    if out_path is not None:
        write_dataset(
            out_path,
            scenes,
            cfg,
            {"outlier_ratio3d": outlier_ratio3d, "outlier_ratio2d": outlier_ratio2d},
        )
    return scenes


def desk_protocol(**overrides) -> ProtocolConfig:
    """Small-scale training protocol: 50-point clouds, reduced translation
    range so every shape point stays visible (M = N exactly)."""
    base = dict(
        m_points=50,
        euler_range_deg=45.0,
        trans_range=0.2,
        z_offset=4.5,
        image_size=(640, 480),
        focal=800.0,
        noise_sigma=2.0,
        shape="mixed",
    )
    base.update(overrides)
    return ProtocolConfig(**base)


PROTOCOLS["desk"] = desk_protocol


def scene_to_normalized(scene: SceneSample) -> np.ndarray:
    """2D points of a scene in normalized coordinates."""
    if scene.y2d.frame == "pixel":
        return normalize_2d(scene.y2d, scene.intrinsics).points
    return scene.y2d.points
