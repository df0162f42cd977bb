"""Synthetic multi-scene pose dataset: procedural landmark scenes rendered
into pose-dependent token grids.

Each scene is a fixed cloud of 3-D landmarks with per-landmark descriptors.
An observation rotates/translates the landmarks into the camera frame,
projects them with a shared pinhole camera, and splats each visible
landmark's descriptor (scaled by a smooth depth falloff so cell contents
vary continuously with pose) onto the token grid cell containing its
projection; cell accumulations are averaged, and empty cells stay zero
(the model's stem bias supplies the learned background embedding).

Conventions: quaternions are wxyz and camera-to-world, so a world point X
maps to camera coordinates R(q)^T (X - t). The camera looks along +z.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .config import DataConfig, data_config_from_dict
from .errors import ContractError, DimensionError
from .pose import Pose, UNIT_QUAT_TOL

DATASET_MAGIC = b"QKALDAT1"
DATASET_VERSION = 1

# seed-stream tags so scene generation and pose sampling never collide
_STREAM_SCENE = 0
_STREAM_TRAIN = 1
_STREAM_TEST = 2


@dataclass
class Scene:
    scene_id: int
    extent: float  # half-size of the camera position box
    landmarks: np.ndarray  # (P, 3)
    feature_basis: np.ndarray  # (P, feature_dim), unit rows


@dataclass
class SyntheticObservation:
    tokens_t: np.ndarray  # (N_t, feature_dim)
    tokens_r: np.ndarray  # (N_r, feature_dim)
    scene_id: int
    pose: Pose


@dataclass
class PoseSample:
    scene_id: int
    pose: Pose


@dataclass
class DatasetSplit:
    train: list
    test: list
    per_scene_train: dict
    per_scene_test: dict


@dataclass
class Dataset:
    seed: int
    config: DataConfig
    scenes: list
    split: DatasetSplit


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def random_unit_quaternions(rng: np.random.Generator, n: int) -> np.ndarray:
    """Uniform random rotations as unit quaternions, canonical hemisphere."""
    q = rng.normal(size=(n, 4))
    norms = np.linalg.norm(q, axis=1, keepdims=True)
    while np.any(norms < 1e-12):  # essentially unreachable, but keep it exact
        bad = norms[:, 0] < 1e-12
        q[bad] = rng.normal(size=(int(bad.sum()), 4))
        norms = np.linalg.norm(q, axis=1, keepdims=True)
    q /= norms
    q[q[:, 0] < 0] *= -1.0
    return q


def generate_scene(global_seed: int, scene_id: int, cfg: DataConfig) -> Scene:
    """Deterministic scene from (global_seed, scene_id): landmarks spread in
    a shell 2.5x wider than the camera box so any viewing direction sees
    some of them."""
    rng = np.random.default_rng(
        np.random.SeedSequence((global_seed, _STREAM_SCENE, scene_id))
    )
    extent = float(rng.uniform(cfg.extent_min, cfg.extent_max))
    landmarks = rng.uniform(-2.5 * extent, 2.5 * extent, size=(cfg.landmarks, 3))
    basis = rng.normal(size=(cfg.landmarks, cfg.feature_dim))
    basis /= np.linalg.norm(basis, axis=1, keepdims=True)
    return Scene(scene_id, extent, landmarks, basis)


def _splat(grid, u, v, weights, basis, feature_dim):
    h, w = grid
    col = np.clip(((u + 1.0) * 0.5 * w).astype(np.int64), 0, w - 1)
    row = np.clip(((v + 1.0) * 0.5 * h).astype(np.int64), 0, h - 1)
    cell = row * w + col
    acc = np.zeros((h * w, feature_dim))
    cnt = np.zeros(h * w)
    np.add.at(acc, cell, weights[:, None] * basis)
    np.add.at(cnt, cell, 1.0)
    return acc / np.maximum(cnt, 1.0)[:, None]


def render_tokens(scene: Scene, pose: Pose, cfg: DataConfig) -> SyntheticObservation:
    """Project the scene's landmarks through the pose and splat descriptors
    onto both token grids. Landmarks behind the camera or outside the
    frustum are dropped."""
    n = float(np.linalg.norm(pose.r))
    if abs(n - 1.0) > UNIT_QUAT_TOL:
        raise ContractError(f"render_tokens needs a unit quaternion, norm was {n}")
    rot = quat_to_rotmat(pose.r)
    cam = (scene.landmarks - pose.t) @ rot  # rows: R^T (X - t)
    z = cam[:, 2]
    half_tan = np.tan(np.radians(cfg.fov_deg) / 2.0)
    visible = z > cfg.z_near
    u = np.zeros_like(z)
    v = np.zeros_like(z)
    u[visible] = cam[visible, 0] / (z[visible] * half_tan)
    v[visible] = cam[visible, 1] / (z[visible] * half_tan)
    visible &= (np.abs(u) <= 1.0) & (np.abs(v) <= 1.0)
    # smooth depth falloff keeps cell contents continuous in the pose
    weights = 1.0 / (1.0 + z / scene.extent)
    u, v, weights = u[visible], v[visible], weights[visible]
    basis = scene.feature_basis[visible]
    tokens_t = _splat(cfg.grid_t, u, v, weights, basis, cfg.feature_dim)
    tokens_r = _splat(cfg.grid_r, u, v, weights, basis, cfg.feature_dim)
    return SyntheticObservation(tokens_t, tokens_r, scene.scene_id, pose)


def _sample_poses(rng: np.random.Generator, scene: Scene, n: int) -> list:
    positions = rng.uniform(-scene.extent, scene.extent, size=(n, 3))
    quats = random_unit_quaternions(rng, n)
    return [Pose(positions[i], quats[i]) for i in range(n)]


def build_splits(scenes, sizes, test_size: int, seed: int) -> DatasetSplit:
    """Sample train/test poses per scene: uniform positions inside the scene
    extent, uniform random unit quaternions. Test poses are drawn from a
    separate stream and checked disjoint from train."""
    if len(sizes) != len(scenes):
        raise ContractError(f"{len(sizes)} sizes for {len(scenes)} scenes")
    train, test = [], []
    per_train, per_test = {}, {}
    for scene, size in zip(scenes, sizes):
        rng_train = np.random.default_rng(
            np.random.SeedSequence((seed, _STREAM_TRAIN, scene.scene_id))
        )
        rng_test = np.random.default_rng(
            np.random.SeedSequence((seed, _STREAM_TEST, scene.scene_id))
        )
        train_poses = _sample_poses(rng_train, scene, size)
        test_poses = _sample_poses(rng_test, scene, test_size)
        seen = {p.t.tobytes() + p.r.tobytes() for p in train_poses}
        for p in test_poses:
            if p.t.tobytes() + p.r.tobytes() in seen:
                raise ContractError("test pose collided with a train pose")
        train.extend(PoseSample(scene.scene_id, p) for p in train_poses)
        test.extend(PoseSample(scene.scene_id, p) for p in test_poses)
        per_train[scene.scene_id] = size
        per_test[scene.scene_id] = test_size
    return DatasetSplit(train, test, per_train, per_test)


def oversampled_epoch(split: DatasetSplit, rng: np.random.Generator) -> np.ndarray:
    """Indices into split.train for one epoch, repeating smaller scenes so
    every scene contributes max-scene-count draws; a single scene reduces
    to a plain shuffle."""
    by_scene = {}
    for i, sample in enumerate(split.train):
        by_scene.setdefault(sample.scene_id, []).append(i)
    target = max(len(v) for v in by_scene.values())
    order = []
    for sid in sorted(by_scene):
        idxs = np.asarray(by_scene[sid])
        drawn = []
        while len(drawn) < target:
            drawn.extend(rng.permutation(idxs).tolist())
        order.extend(drawn[:target])
    order = np.asarray(order)
    rng.shuffle(order)
    return order


def build_dataset(cfg: DataConfig, seed: int) -> Dataset:
    scenes = [generate_scene(seed, i, cfg) for i in range(cfg.scenes)]
    split = build_splits(scenes, cfg.train_sizes(), cfg.test_per_scene, seed)
    return Dataset(seed, cfg, scenes, split)


def materialize(dataset: Dataset, which: str = "train") -> dict:
    """Render every sample of a split into dense arrays.

    Returns tokens_t (n, N_t, D), tokens_r (n, N_r, D), scene_ids (n,),
    poses (n, 7) laid out as [t xyz, r wxyz].
    """
    samples = getattr(dataset.split, which)
    cfg = dataset.config
    by_id = {s.scene_id: s for s in dataset.scenes}
    n = len(samples)
    h_t, w_t = cfg.grid_t
    h_r, w_r = cfg.grid_r
    tokens_t = np.empty((n, h_t * w_t, cfg.feature_dim))
    tokens_r = np.empty((n, h_r * w_r, cfg.feature_dim))
    scene_ids = np.empty(n, dtype=np.int64)
    poses = np.empty((n, 7))
    for i, sample in enumerate(samples):
        obs = render_tokens(by_id[sample.scene_id], sample.pose, cfg)
        tokens_t[i] = obs.tokens_t
        tokens_r[i] = obs.tokens_r
        scene_ids[i] = sample.scene_id
        poses[i, :3] = sample.pose.t
        poses[i, 3:] = sample.pose.r
    return {
        "tokens_t": tokens_t,
        "tokens_r": tokens_r,
        "scene_ids": scene_ids,
        "poses": poses,
    }


def _pose_array(samples) -> tuple:
    ids = np.asarray([s.scene_id for s in samples], dtype=np.int64)
    poses = np.empty((len(samples), 7))
    for i, s in enumerate(samples):
        poses[i, :3] = s.pose.t
        poses[i, 3:] = s.pose.r
    return ids, poses


def write_dataset_file(path, dataset: Dataset) -> None:
    """Self-describing container: magic, u64 header length, JSON header,
    then little-endian row-major blocks (train ids/poses, test ids/poses).
    Tokens are re-rendered deterministically on load. See README for the
    byte layout."""
    header = {
        "format": "qkalign-dataset",
        "format_version": DATASET_VERSION,
        "seed": dataset.seed,
        "config": _config_dict(dataset.config),
        "scenes": [
            {
                "scene_id": s.scene_id,
                "extent": s.extent,
                "train_count": dataset.split.per_scene_train[s.scene_id],
                "test_count": dataset.split.per_scene_test[s.scene_id],
            }
            for s in dataset.scenes
        ],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    train_ids, train_poses = _pose_array(dataset.split.train)
    test_ids, test_poses = _pose_array(dataset.split.test)
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(np.uint64(len(blob)).astype("<u8").tobytes())
        fh.write(blob)
        for arr in (train_ids, train_poses, test_ids, test_poses):
            kind = "<i8" if arr.dtype.kind == "i" else "<f8"
            fh.write(np.ascontiguousarray(arr).astype(kind).tobytes())


def _config_dict(cfg: DataConfig) -> dict:
    from .config import to_dict

    return to_dict(cfg)


def read_dataset_file(path) -> Dataset:
    with open(path, "rb") as fh:
        magic = fh.read(len(DATASET_MAGIC))
        if magic != DATASET_MAGIC:
            raise ContractError(f"{path} is not a qkalign dataset file")
        (hlen,) = np.frombuffer(fh.read(8), dtype="<u8")
        header = json.loads(fh.read(int(hlen)).decode("utf-8"))
        if header.get("format_version") != DATASET_VERSION:
            raise ContractError(
                f"unsupported dataset version {header.get('format_version')}"
            )
        cfg = data_config_from_dict(header["config"])
        seed = int(header["seed"])
        n_train = sum(s["train_count"] for s in header["scenes"])
        n_test = sum(s["test_count"] for s in header["scenes"])

        def block(count, width, kind):
            raw = fh.read(count * width * 8)
            arr = np.frombuffer(raw, dtype=kind).copy()
            if arr.size != count * width:
                raise DimensionError(f"dataset file truncated: {path}")
            return arr.reshape(count, width) if width > 1 else arr

        train_ids = block(n_train, 1, "<i8")
        train_poses = block(n_train, 7, "<f8")
        test_ids = block(n_test, 1, "<i8")
        test_poses = block(n_test, 7, "<f8")
    scenes = [generate_scene(seed, s["scene_id"], cfg) for s in header["scenes"]]
    for scene, meta in zip(scenes, header["scenes"]):
        if scene.extent != meta["extent"]:
            raise ContractError(
                f"scene {scene.scene_id} extent mismatch: file has {meta['extent']}, "
                f"regenerated {scene.extent}; wrong seed or config?"
            )
    train = [
        PoseSample(int(i), Pose(p[:3], p[3:])) for i, p in zip(train_ids, train_poses)
    ]
    test = [
        PoseSample(int(i), Pose(p[:3], p[3:])) for i, p in zip(test_ids, test_poses)
    ]
    per_train = {s["scene_id"]: s["train_count"] for s in header["scenes"]}
    per_test = {s["scene_id"]: s["test_count"] for s in header["scenes"]}
    return Dataset(seed, cfg, scenes, DatasetSplit(train, test, per_train, per_test))
