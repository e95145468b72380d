"""Local-map building (with or without occupancy mapping), datasets and benchmarks."""
from __future__ import annotations

import logging
from dataclasses import dataclass, fields

import numpy as np

from .dom import MotionErrorModel, OccupancyOctree, SensorModel, extract_local_map, integrate_scan, recenter
from .embed import embed_place
from .errors import InvalidConfig
from .projection import project_stack
from .retrieval import build_index, naive_descriptor, query_knn, recall_at, true_matches
from .scene import FRAME_DT, Pose, SemanticPointCloud, place_frame_poses, render_scan, transform_cloud
from .training import DatasetIndex, TrainingSample

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MapConfig:
    use_dom: bool = True
    leaf_size: float = 0.25
    half_width: float = 40.0
    p_hit: float = 0.7
    p_miss: float = 0.4
    lam: float = 0.5
    odom_sigma: float = 0.0  # translation noise per odometry step (m)
    yaw_sigma: float = 0.0  # heading noise per odometry step (rad)
    threshold: float = 0.5
    radius: float = 30.0
    seed: int = 0

    @classmethod
    def from_mapping(cls, values):
        names = {f.name for f in fields(cls)}
        unknown = set(values) - names
        if unknown:
            raise InvalidConfig(f"unknown map keys: {sorted(unknown)}")
        defaults = cls()
        kwargs = {}
        for key, raw in values.items():
            kind = type(getattr(defaults, key))
            try:
                if kind is bool:
                    kwargs[key] = str(raw).strip().lower() in ("1", "true", "yes", "on")
                else:
                    kwargs[key] = kind(float(raw)) if kind is float else int(raw)
            except ValueError as exc:
                raise InvalidConfig(f"bad value for {key}: {raw!r}") from exc
        return cls(**kwargs)


def noisy_odometry(poses, sigma, yaw_sigma, rng):
    """Relative poses between consecutive frames, each perturbed by planar noise.

    Element ``f`` maps frame-``f`` coordinates into frame ``f-1``; element 0 is
    the identity.
    """
    out = [Pose.identity()]
    for prev, cur in zip(poses[:-1], poses[1:]):
        rel = prev.inverse().compose(cur)
        if sigma > 0 or yaw_sigma > 0:
            dx, dy = rng.normal(0.0, sigma, 2) if sigma > 0 else (0.0, 0.0)
            dyaw = rng.normal(0.0, yaw_sigma) if yaw_sigma > 0 else 0.0
            rel = rel.compose(Pose.from_xyz_yaw(dx, dy, 0.0, dyaw))
        out.append(rel)
    return out


def build_local_map(frames, cfg, rng, keep_tree=False):
    """Fuse ``(cloud, pose)`` frames into a map expressed in the last frame.

    Only relative odometry (optionally noisy) is used.  With ``use_dom`` the
    frames go through the occupancy map; otherwise points are accumulated raw.
    ``keep_tree`` also returns the occupancy map (``None`` without ``use_dom``).
    """
    odom = noisy_odometry([p for _, p in frames], cfg.odom_sigma, cfg.yaw_sigma, rng)
    if cfg.use_dom:
        tree = OccupancyOctree(half_width=cfg.half_width, leaf_size=cfg.leaf_size)
        sensor = SensorModel(cfg.p_hit, cfg.p_miss)
        motion = MotionErrorModel(cfg.odom_sigma, cfg.lam)
        for f, (cloud, _) in enumerate(frames):
            if f:
                tree = recenter(tree, odom[f], motion)
            tree = integrate_scan(tree, cloud, Pose.identity(), sensor)
        local = extract_local_map(tree, cfg.threshold, cfg.radius)
        return (local, tree) if keep_tree else local
    acc = SemanticPointCloud.empty()
    for f, (cloud, _) in enumerate(frames):
        if f:
            acc = transform_cloud(acc, odom[f].inverse())
        acc = SemanticPointCloud.concatenate([acc, cloud])
    keep = np.linalg.norm(acc.points, axis=1) <= cfg.radius
    local = acc.subset(keep)
    return (local, None) if keep_tree else local


def place_local_map(scenario, k, cfg, keep_tree=False):
    frames = [scenario.frames[i] for i in scenario.place_frames[k]]
    return place_map_from_frames(frames, k, cfg, keep_tree)


def place_map_from_frames(frames, k, cfg, keep_tree=False):
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3, k]))
    return build_local_map(frames, cfg, rng, keep_tree)


def render_frames(world, centre, yaw, stream, t0=0.0):
    """Fresh frames ending at ``centre`` with heading ``yaw`` (new noise stream)."""
    spec = world.spec
    frames = []
    for f, pose in enumerate(place_frame_poses(spec, centre, yaw)):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 2, *stream, f]))
        frames.append((render_scan(world, pose, t0 + f * FRAME_DT, rng), pose))
    return frames


def offset_pose(centre, delta_t, delta_theta, rng):
    """Position ``delta_t`` metres from ``centre`` in a random direction, heading ``delta_theta``."""
    direction = rng.uniform(0.0, 2.0 * np.pi)
    pos = np.asarray(centre, dtype=np.float64).copy()
    pos[:2] += delta_t * np.array([np.cos(direction), np.sin(direction)])
    return pos, float(delta_theta)


def query_local_map(world, centre, yaw, cfg, stream):
    frames = render_frames(world, centre, yaw, stream, t0=1000.0 + 7.0 * stream[-1])
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 4, *stream]))
    return build_local_map(frames, cfg, rng)


def training_dataset(scenario, cfg, views=4, max_offset=4.0, n=64, k=10, seed=0):
    """Several views per place: the place itself plus offset, arbitrarily rotated views."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 5]))
    samples = []
    for p, centre in enumerate(scenario.place_positions):
        for v in range(views):
            if v == 0:
                local = place_local_map(scenario, p, cfg)
                pos = np.asarray(centre, dtype=np.float64)
            else:
                pos, yaw = offset_pose(centre, rng.uniform(0.0, max_offset), rng.uniform(0, 2 * np.pi), rng)
                local = query_local_map(scenario.world, pos, yaw, cfg, (6, p, v))
            samples.append(TrainingSample(local, project_stack(local, n, k), pos[:2].copy(), p))
    return DatasetIndex(tuple(samples), n, k)


# ---------------------------------------------------------------------------
# benchmark helpers


def describe(stack, model=None, max_range=30.0):
    """Learned descriptor when ``model`` is given, the flattened baseline otherwise."""
    if model is None:
        return naive_descriptor(stack, max_range)
    return embed_place(stack, model).vector


def reference_database(scenario, cfg, n=64, k=10):
    """Projected stacks of every place's local map, in place order."""
    return [project_stack(place_local_map(scenario, p, cfg), n, k) for p in range(len(scenario.place_positions))]


@dataclass
class QuerySet:
    stacks: list
    positions: np.ndarray  # (Q, 2)
    place_ids: np.ndarray
    delta_t: np.ndarray
    delta_theta: np.ndarray


def make_queries(scenario, cfg, delta_t, delta_theta, n=64, k=10, seed=0, places=None):
    """One query per place at the given (per-query or scalar) offsets.

    The offset direction is drawn at random for every query.
    """
    places = np.arange(len(scenario.place_positions)) if places is None else np.asarray(places)
    dts = np.broadcast_to(np.asarray(delta_t, dtype=np.float64), places.shape)
    dths = np.broadcast_to(np.asarray(delta_theta, dtype=np.float64), places.shape)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    stacks, positions = [], []
    for q, (p, dt, dth) in enumerate(zip(places, dts, dths)):
        pos, yaw = offset_pose(scenario.place_positions[p], dt, dth, rng)
        local = query_local_map(scenario.world, pos, yaw, cfg, (8, seed, int(p), q))
        stacks.append(project_stack(local, n, k))
        positions.append(pos[:2])
    return QuerySet(stacks, np.array(positions), places.copy(), dts.copy(), dths.copy())


def retrieval_recalls(ref_stacks, ref_positions, queries, model=None, ns=(1, 10), top_percent=None, r_pos=8.0):
    """Recall of the queries against the reference places for each N in ``ns``."""
    ref = np.array([describe(s, model) for s in ref_stacks])
    index = build_index(ref, list(range(len(ref))), np.asarray(ref_positions)[:, :2])
    ranked, truth = [], []
    k = max(max(ns), 1)
    if top_percent is not None:
        k = max(k, int(np.ceil(top_percent * len(ref))))
    for stack, pos in zip(queries.stacks, queries.positions):
        hits, _ = query_knn(index, describe(stack, model), k)
        ranked.append([i for i, _ in hits])
        truth.append(true_matches(index, pos, r_pos))
    out = {f"recall@{n}": recall_at(ranked, truth, n=n) for n in ns}
    if top_percent is not None:
        out["recall@top%"] = recall_at(ranked, truth, top_percent=top_percent, index_size=len(ref))
    return out


def random_local_map(rng, count=60, extent=6.0):
    """Random labelled cloud around the origin (static labels only)."""
    pts = rng.uniform(-extent, extent, size=(count, 3))
    pts[:, 2] = rng.uniform(-2.0, 3.0, size=count)
    labels = np.repeat(np.array([1, 2, 3], dtype=np.uint8), -(-count // 3))[:count]
    return SemanticPointCloud(pts, labels)


def random_tuple_dataset(seed=0, n=8, k=5, n_neg=3):
    """Anchor, one positive 5 m away and ``n_neg`` negatives 60+ m away, random maps.

    Cheap fixture for gradient checks and loss tests.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 13]))
    positions = [(0.0, 0.0), (5.0, 0.0)] + [(60.0 + 10.0 * i, 0.0) for i in range(n_neg)]
    samples = []
    for i, p in enumerate(positions):
        local = random_local_map(rng)
        samples.append(TrainingSample(local, project_stack(local, n, k), np.array(p), i))
    return DatasetIndex(tuple(samples), n, k)
