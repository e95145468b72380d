"""Per-attribute two-channel spherical images: closest range and |sin| of incidence."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import BadMagic, InsufficientNeighbors, IoFailure, Truncated
from .scene import STATIC_LABELS, filter_static

DEGENERATE_RATIO = 1e-8


def estimate_normals(cloud, k=10, origin=(0.0, 0.0, 0.0)):
    """Least-squares plane normals over the ``k`` nearest neighbours.

    Normals are flipped to face ``origin``.  Neighbourhoods without a
    well-defined plane (collinear or coincident points) fall back to the unit
    direction towards ``origin`` and are flagged.

    Returns ``(normals, degenerate)`` with shapes (N, 3) and (N,).
    """
    pts = cloud.points if hasattr(cloud, "points") else np.asarray(cloud, dtype=np.float64)
    if k < 3:
        raise ValueError("k must be >= 3")
    if len(pts) < k:
        raise InsufficientNeighbors(f"{len(pts)} points < k={k}")
    origin = np.asarray(origin, dtype=np.float64)
    _, nbr = cKDTree(pts).query(pts, k=k)
    local = pts[nbr]
    local = local - local.mean(axis=1, keepdims=True)
    cov = np.matmul(local.transpose(0, 2, 1), local)
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0]
    degenerate = evals[:, 1] <= DEGENERATE_RATIO * np.maximum(evals[:, 2], 1e-300)
    to_origin = origin - pts
    dist = np.linalg.norm(to_origin, axis=1, keepdims=True)
    radial = np.divide(to_origin, dist, out=np.tile([0.0, 0.0, 1.0], (len(pts), 1)), where=dist > 0)
    normals = np.where(degenerate[:, None], radial, normals)
    flip = np.einsum("ni,ni->n", normals, to_origin) < 0
    normals[flip] *= -1.0
    return normals, degenerate


@dataclass(frozen=True, eq=False)
class SphericalImage:
    """``distance`` (m) and ``sine`` channels on the ``n x n`` grid, plus validity.

    Invalid cells hold ``(0, 0)``.  ``dropped`` counts zero-range points.
    """

    distance: np.ndarray
    sine: np.ndarray
    valid: np.ndarray
    dropped: int = 0

    @property
    def n(self):
        return self.distance.shape[0]

    @classmethod
    def empty(cls, n):
        z = np.zeros((n, n))
        return cls(z, z.copy(), np.zeros((n, n), dtype=bool))

    def channels(self):
        return np.stack([self.distance, self.sine])

    def __eq__(self, other):
        return (
            np.array_equal(self.distance, other.distance)
            and np.array_equal(self.sine, other.sine)
            and np.array_equal(self.valid, other.valid)
        )


def cell_indices(points, n):
    """Azimuth and polar bin of each point (points must be nonzero)."""
    x, y, z = points.T
    r = np.linalg.norm(points, axis=1)
    theta = np.mod(np.arctan2(y, x), 2.0 * np.pi)
    phi = np.arccos(np.clip(z / r, -1.0, 1.0))
    i = np.minimum((theta * (n / (2.0 * np.pi))).astype(np.int64), n - 1)
    j = np.minimum((phi * (n / np.pi)).astype(np.int64), n - 1)
    return i, j, r


def project_attribute(points, normals, n):
    """Keep, per cell, the point closest to the origin."""
    points = points.points if hasattr(points, "points") else np.asarray(points, dtype=np.float64)
    normals = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    if len(points) != len(normals):
        raise ValueError("points and normals differ in length")
    if n < 4:
        raise ValueError("resolution must be >= 4")
    out = SphericalImage.empty(n)
    if not len(points):
        return out
    r = np.linalg.norm(points, axis=1)
    zero = r <= 1e-12
    points, normals, r = points[~zero], normals[~zero], r[~zero]
    if not len(points):
        return SphericalImage(out.distance, out.sine, out.valid, int(zero.sum()))
    i, j, r = cell_indices(points, n)
    cell = i * n + j
    order = np.lexsort((np.arange(len(r)), r, cell))
    first = np.ones(len(order), dtype=bool)
    first[1:] = cell[order][1:] != cell[order][:-1]
    pick = order[first]
    ray = points[pick] / r[pick, None]
    nrm = normals[pick] / np.linalg.norm(normals[pick], axis=1, keepdims=True)
    sine = np.clip(np.linalg.norm(np.cross(ray, nrm), axis=1), 0.0, 1.0)
    distance = np.zeros(n * n)
    sines = np.zeros(n * n)
    valid = np.zeros(n * n, dtype=bool)
    distance[cell[pick]] = r[pick]
    sines[cell[pick]] = sine
    valid[cell[pick]] = True
    return SphericalImage(
        distance.reshape(n, n), sines.reshape(n, n), valid.reshape(n, n), int(zero.sum())
    )


@dataclass(frozen=True, eq=False)
class SphericalStack:
    """One image per static attribute (ground, building, static structure)."""

    layers: tuple
    degenerate: tuple = (False, False, False)

    def __post_init__(self):
        if len(self.layers) != 3:
            raise ValueError("a stack has exactly three layers")
        if len({im.n for im in self.layers}) != 1:
            raise ValueError("layers must share one resolution")

    @property
    def n(self):
        return self.layers[0].n

    def channels(self):
        """(3, 2, n, n) raw channels."""
        return np.stack([im.channels() for im in self.layers])

    def valid(self):
        return np.stack([im.valid for im in self.layers])

    def __eq__(self, other):
        return all(a == b for a, b in zip(self.layers, other.layers))

    def shifted(self, m):
        """Exact z rotation by ``2 pi m / n`` (roll of the azimuth axis)."""
        layers = tuple(
            SphericalImage(
                np.roll(im.distance, m, axis=0),
                np.roll(im.sine, m, axis=0),
                np.roll(im.valid, m, axis=0),
                im.dropped,
            )
            for im in self.layers
        )
        return SphericalStack(layers, self.degenerate)


def attribute_normals(local_map, k=10):
    """Per static attribute ``(points, normals, flagged)``; the expensive part of projection."""
    parts = filter_static(local_map)
    out = []
    for label in STATIC_LABELS:
        cloud = parts[label]
        if len(cloud) == 0:
            out.append((np.zeros((0, 3)), np.zeros((0, 3)), False))
        elif len(cloud) >= 3:
            normals, degenerate = estimate_normals(cloud, k=min(k, len(cloud)))
            out.append((cloud.points, normals, bool(degenerate.any())))
        else:
            p = cloud.points
            out.append((p, -p / np.maximum(np.linalg.norm(p, axis=1, keepdims=True), 1e-300), True))
    return out


def stack_from_normals(parts, n, rotation=None):
    """Project precomputed ``attribute_normals`` output, optionally rotated first.

    Normals are rotation-equivariant, so rotating points and normals together
    equals re-estimating normals on the rotated map.
    """
    layers, flags = [], []
    for points, normals, flagged in parts:
        if rotation is not None and len(points):
            points, normals = points @ rotation.T, normals @ rotation.T
        layers.append(project_attribute(points, normals, n) if len(points) else SphericalImage.empty(n))
        flags.append(flagged)
    return SphericalStack(tuple(layers), tuple(flags))


def project_stack(local_map, n=64, k=10):
    """Static-attribute stack of a local map in the robot frame (origin = sensor)."""
    return stack_from_normals(attribute_normals(local_map, k), n)


# ---------------------------------------------------------------------------
# file format

STACK_MAGIC = b"PSES"


def encode_stack(stack):
    n = stack.n
    body = stack.channels().astype("<f4").tobytes()
    mask = stack.valid().astype(np.uint8).tobytes()
    return STACK_MAGIC + struct.pack("<I", n) + body + mask


def decode_stack(data):
    if data[:4] != STACK_MAGIC:
        raise BadMagic(f"expected {STACK_MAGIC!r}")
    (n,) = struct.unpack_from("<I", data, 4)
    need = 8 + 3 * 2 * n * n * 4 + 3 * n * n
    if len(data) < need:
        raise Truncated(f"stack file needs {need} bytes, has {len(data)}")
    ch = np.frombuffer(data, dtype="<f4", count=6 * n * n, offset=8).reshape(3, 2, n, n)
    valid = np.frombuffer(data, dtype=np.uint8, count=3 * n * n, offset=8 + 24 * n * n)
    valid = valid.reshape(3, n, n).astype(bool)
    layers = tuple(
        SphericalImage(ch[a, 0].astype(np.float64), ch[a, 1].astype(np.float64), valid[a])
        for a in range(3)
    )
    return SphericalStack(layers)


def save_stack(stack, path):
    try:
        Path(path).write_bytes(encode_stack(stack))
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def load_stack(path):
    return decode_stack(Path(path).read_bytes())
