"""Dynamic occupancy mapping around the robot.

Leaves live in a sparse, sorted key array rather than an explicit tree: only
leaf-level queries are needed here.  Each scan is a single measurement per
voxel (a voxel hit by any return counts as occupied, otherwise as free if a
ray crossed it), so the stored log-odds equal the sequential Bayes filter over
scans.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import BadMagic, IoFailure, Truncated
from .scene import Pose, SemanticPointCloud

EPS = 1e-7
L_CLAMP = 3.5
PRUNE = 1e-3
N_LABELS = 5


def logit(p):
    """Log-odds ``ln(p / (1 - p))`` with ``p`` clamped to ``[1e-7, 1 - 1e-7]``."""
    p = np.clip(p, EPS, 1.0 - EPS)
    out = np.log(p / (1.0 - p))
    return float(out) if np.ndim(out) == 0 else out


def inv_logit(l):
    """Probability from log-odds, overflow-free for any finite input."""
    l = np.asarray(l, dtype=np.float64)
    e = np.exp(-np.abs(l))
    out = np.where(l >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class SensorModel:
    p_hit: float = 0.7
    p_miss: float = 0.4

    def __post_init__(self):
        if not (0.5 < self.p_hit < 1.0 and 0.0 < self.p_miss < 0.5):
            raise ValueError(f"need 0.5 < p_hit < 1 and 0 < p_miss < 0.5, got {self}")


@dataclass(frozen=True)
class MotionErrorModel:
    """Odometry uncertainty ``sigma`` (m); leaves shrink by ``exp(-lam sigma^2)``."""

    sigma: float = 0.0
    lam: float = 0.5

    def __post_init__(self):
        if self.sigma < 0 or self.lam <= 0:
            raise ValueError(f"need sigma >= 0 and lam > 0, got {self}")

    @property
    def attenuation(self):
        return math.exp(-self.lam * self.sigma**2)


@dataclass(frozen=True, eq=False)
class OccupancyOctree:
    """Sparse log-odds voxel map over a cubic region.

    ``keys`` are sorted encodings of integer voxel indices; ``votes`` counts
    label observations per voxel and ``stamps`` records when each label was
    last written (for tie-breaking).
    """

    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    half_width: float = 50.0
    leaf_size: float = 0.25
    l_clamp: float = L_CLAMP
    keys: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    log_odds: np.ndarray = field(default_factory=lambda: np.zeros(0))
    votes: np.ndarray = field(default_factory=lambda: np.zeros((0, N_LABELS), dtype=np.int64))
    stamps: np.ndarray = field(default_factory=lambda: np.zeros((0, N_LABELS), dtype=np.int64))
    clock: int = 0
    dropped: int = 0

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        if self.leaf_size <= 0 or self.half_width <= 0:
            raise ValueError("leaf size and half width must be positive")
        cells = self.half_width / self.leaf_size
        if abs(cells - round(cells)) > 1e-9:
            raise ValueError("half width must be a whole number of leaves")

    # index helpers
    @property
    def cells(self):
        """Voxels per half axis; indices run over ``[-cells, cells)``."""
        return int(round(self.half_width / self.leaf_size))

    def __len__(self):
        return len(self.keys)

    def voxel_index(self, points):
        return np.floor((np.asarray(points) - self.center) / self.leaf_size).astype(np.int64)

    def inside(self, idx):
        c = self.cells
        return np.all((idx >= -c) & (idx < c), axis=-1)

    def encode(self, idx):
        c = self.cells
        s = 2 * c
        idx = np.asarray(idx) + c
        return (idx[..., 0] * s + idx[..., 1]) * s + idx[..., 2]

    def decode(self, keys):
        c = self.cells
        s = 2 * c
        keys = np.asarray(keys)
        z = keys % s
        y = (keys // s) % s
        x = keys // (s * s)
        return np.stack([x, y, z], axis=-1) - c

    def leaf_centers(self):
        return self.center + (self.decode(self.keys) + 0.5) * self.leaf_size

    def probabilities(self):
        return inv_logit(self.log_odds)

    def labels(self):
        """Dominant label per leaf: majority vote, ties to the most recent writer."""
        if not len(self.keys):
            return np.zeros(0, dtype=np.uint8)
        score = self.votes * (self.clock + 1) + self.stamps
        return np.argmax(score, axis=1).astype(np.uint8)

    def lookup(self, idx):
        """Log-odds at voxel indices (0 for unknown voxels)."""
        k = self.encode(np.asarray(idx))
        if not len(self.keys):
            return np.zeros(np.shape(k))
        pos = np.minimum(np.searchsorted(self.keys, k), len(self.keys) - 1)
        return np.where(self.keys[pos] == k, self.log_odds[pos], 0.0)

    def probability_at(self, point):
        return inv_logit(self.lookup(self.voxel_index(np.asarray(point).reshape(1, 3)))[0])


def _ray_voxels(origin, ends):
    """Voxels stepped through from ``origin`` to each end voxel, end excluded.

    Integer 3D line stepping: ``round(o + (e - o) s / n)`` for ``s < n`` with
    ``n`` the Chebyshev length.  Returns an (M, 3) array, duplicates included.
    """
    delta = ends - origin
    steps = np.abs(delta).max(axis=1)
    total = int(steps.sum())
    if total == 0:
        return np.zeros((0, 3), dtype=np.int64)
    ray = np.repeat(np.arange(len(ends)), steps)
    start = np.cumsum(steps) - steps
    s = np.arange(total) - np.repeat(start, steps)
    frac = s / steps[ray]
    return origin + np.floor(delta[ray] * frac[:, None] + 0.5).astype(np.int64)


def _merge(tree, upd_keys, delta, vote_counts, vote_stamps, clock, dropped):
    keys = np.union1d(tree.keys, upd_keys)
    L = np.zeros(len(keys))
    votes = np.zeros((len(keys), N_LABELS), dtype=np.int64)
    stamps = np.zeros((len(keys), N_LABELS), dtype=np.int64)
    old = np.searchsorted(keys, tree.keys)
    L[old] = tree.log_odds
    votes[old] = tree.votes
    stamps[old] = tree.stamps
    new = np.searchsorted(keys, upd_keys)
    L[new] = np.clip(L[new] + delta, -tree.l_clamp, tree.l_clamp)
    votes[new] += vote_counts
    stamps[new] = np.maximum(stamps[new], vote_stamps)
    return replace(tree, keys=keys, log_odds=L, votes=votes, stamps=stamps, clock=clock, dropped=dropped)


def integrate_scan(tree, cloud, pose, sensor):
    """Fuse one scan (``cloud`` in sensor frame, ``pose`` sensor->map) into ``tree``.

    Returns outside the region are dropped and counted in ``tree.dropped``.
    """
    if len(cloud) == 0:
        raise ValueError("cannot integrate an empty scan")
    pts = pose.apply(cloud.points)
    origin = tree.voxel_index(pose.translation.reshape(1, 3))[0]
    ends = tree.voxel_index(pts)
    ok = tree.inside(ends)
    dropped = tree.dropped + int((~ok).sum())
    ends, labels = ends[ok], cloud.labels[ok]

    hit_keys_all = tree.encode(ends)
    hit_keys, first = np.unique(hit_keys_all, return_inverse=True)
    trav = _ray_voxels(origin, ends)
    trav = trav[tree.inside(trav)]
    miss_keys = np.setdiff1d(tree.encode(trav), hit_keys, assume_unique=False)

    upd_keys = np.concatenate([hit_keys, miss_keys])
    order = np.argsort(upd_keys)
    upd_keys = upd_keys[order]
    delta = np.concatenate(
        [np.full(len(hit_keys), logit(sensor.p_hit)), np.full(len(miss_keys), logit(sensor.p_miss))]
    )[order]

    counts = np.zeros((len(hit_keys), N_LABELS), dtype=np.int64)
    np.add.at(counts, (first, labels), 1)
    stamp = np.zeros((len(hit_keys), N_LABELS), dtype=np.int64)
    ticks = tree.clock + 1 + np.arange(len(labels))
    np.maximum.at(stamp, (first, labels), ticks)
    vote_counts = np.concatenate([counts, np.zeros((len(miss_keys), N_LABELS), np.int64)])[order]
    vote_stamps = np.concatenate([stamp, np.zeros((len(miss_keys), N_LABELS), np.int64)])[order]
    return _merge(tree, upd_keys, delta, vote_counts, vote_stamps, tree.clock + len(labels), dropped)


def motion_update(tree, motion):
    """Scale every leaf's log-odds by ``exp(-lam sigma^2)``; prune near-prior leaves."""
    gamma = motion.attenuation
    if gamma == 1.0:
        return tree
    L = tree.log_odds * gamma
    keep = np.abs(L) >= PRUNE
    return replace(
        tree,
        keys=tree.keys[keep],
        log_odds=L[keep],
        votes=tree.votes[keep],
        stamps=tree.stamps[keep],
    )


def recenter(tree, relative_pose, motion):
    """Re-express the map in a new robot frame, then apply the motion update.

    ``relative_pose`` maps new-frame coordinates to old-frame coordinates.
    Leaf centres move by its inverse and snap to the nearest voxel; on
    collision the entry with the larger ``|L|`` wins.
    """
    if len(tree.keys):
        moved = relative_pose.inverse().apply(tree.leaf_centers())
        idx = tree.voxel_index(moved)
        ok = tree.inside(idx)
        keys = tree.encode(idx[ok])
        L = tree.log_odds[ok]
        votes, stamps = tree.votes[ok], tree.stamps[ok]
        # sort by key, then by descending |L| so the first of each key wins
        order = np.lexsort((-np.abs(L), keys))
        keys, L, votes, stamps = keys[order], L[order], votes[order], stamps[order]
        first = np.ones(len(keys), dtype=bool)
        first[1:] = keys[1:] != keys[:-1]
        tree = replace(
            tree, keys=keys[first], log_odds=L[first], votes=votes[first], stamps=stamps[first]
        )
    return motion_update(tree, motion)


def extract_local_map(tree, threshold=0.5, radius=math.inf):
    """Occupied leaf centres (``P > threshold``) within ``radius`` of the region centre."""
    if not 0.5 <= threshold < 1.0:
        raise ValueError("threshold must lie in [0.5, 1)")
    if not len(tree.keys):
        return SemanticPointCloud.empty()
    centers = tree.leaf_centers()
    keep = (tree.log_odds > logit(threshold)) & (
        np.linalg.norm(centers - tree.center, axis=1) <= radius
    )
    return SemanticPointCloud(centers[keep], tree.labels()[keep])


# ---------------------------------------------------------------------------
# snapshot file

SNAPSHOT_MAGIC = b"PSEO"
_HEADER = struct.Struct("<4s5dQ")
_LEAF = np.dtype([("idx", "<i4", 3), ("L", "<f8"), ("label", "u1")])


def save_snapshot(tree, path):
    rec = np.empty(len(tree.keys), dtype=_LEAF)
    rec["idx"] = tree.decode(tree.keys)
    rec["L"] = tree.log_odds
    rec["label"] = tree.labels()
    head = _HEADER.pack(SNAPSHOT_MAGIC, tree.leaf_size, *tree.center, tree.half_width, len(tree.keys))
    try:
        Path(path).write_bytes(head + rec.tobytes())
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def load_snapshot(path):
    data = Path(path).read_bytes()
    if data[:4] != SNAPSHOT_MAGIC:
        raise BadMagic(f"expected {SNAPSHOT_MAGIC!r}")
    if len(data) < _HEADER.size:
        raise Truncated("snapshot header truncated")
    _, leaf, cx, cy, cz, hw, count = _HEADER.unpack_from(data)
    if len(data) - _HEADER.size < count * _LEAF.itemsize:
        raise Truncated(f"snapshot declares {count} leaves")
    rec = np.frombuffer(data, dtype=_LEAF, count=count, offset=_HEADER.size)
    tree = OccupancyOctree(center=np.array([cx, cy, cz]), half_width=hw, leaf_size=leaf)
    keys = tree.encode(rec["idx"].astype(np.int64))
    order = np.argsort(keys)
    votes = np.zeros((count, N_LABELS), dtype=np.int64)
    votes[np.arange(count), rec["label"]] = 1
    return replace(
        tree,
        keys=keys[order],
        log_odds=rec["L"][order].copy(),
        votes=votes[order],
        stamps=np.zeros((count, N_LABELS), dtype=np.int64),
    )
