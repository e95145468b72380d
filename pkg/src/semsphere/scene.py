"""Labelled point clouds, poses, binary I/O and procedural scenes."""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import BadMagic, InvalidSpec, IoFailure, NonFinite, Truncated


class SemanticLabel(enum.IntEnum):
    UNLABELED = 0
    GROUND = 1
    BUILDING = 2
    STATIC_STRUCTURE = 3
    DYNAMIC = 4


STATIC_LABELS = (SemanticLabel.GROUND, SemanticLabel.BUILDING, SemanticLabel.STATIC_STRUCTURE)


def _frozen(a):
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SemanticPointCloud:
    """``points`` (N, 3) float64 metres, ``labels`` (N,) uint8 label codes."""

    points: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        lab = np.array(self.labels, dtype=np.uint8).reshape(-1)
        if len(pts) != len(lab):
            raise ValueError(f"{len(pts)} points but {len(lab)} labels")
        if not np.all(np.isfinite(pts)):
            raise NonFinite("point coordinates must be finite")
        if lab.size and lab.max() > 4:
            raise ValueError("label codes must lie in [0, 4]")
        object.__setattr__(self, "points", _frozen(pts))
        object.__setattr__(self, "labels", _frozen(lab))

    def __len__(self):
        return len(self.labels)

    def __eq__(self, other):
        if not isinstance(other, SemanticPointCloud):
            return NotImplemented
        return np.array_equal(self.points, other.points) and np.array_equal(
            self.labels, other.labels
        )

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros(0, dtype=np.uint8))

    def subset(self, mask):
        return SemanticPointCloud(self.points[mask], self.labels[mask])

    @staticmethod
    def concatenate(clouds):
        clouds = list(clouds)
        if not clouds:
            return SemanticPointCloud.empty()
        return SemanticPointCloud(
            np.concatenate([c.points for c in clouds]),
            np.concatenate([c.labels for c in clouds]),
        )


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``p' = R p + t``; rotation as unit quaternion (x, y, z, w)."""

    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rotation: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))

    def __post_init__(self):
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        q = np.array(self.rotation, dtype=np.float64).reshape(4)
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(q))):
            raise NonFinite("pose must be finite")
        if abs(np.linalg.norm(q) - 1.0) > 1e-9:
            raise ValueError(f"quaternion norm {np.linalg.norm(q)} is not 1")
        object.__setattr__(self, "translation", _frozen(t))
        object.__setattr__(self, "rotation", _frozen(q))

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, R, t):
        q = Rotation.from_matrix(R).as_quat()
        return cls(t, q / np.linalg.norm(q))

    @classmethod
    def from_xyz_yaw(cls, x, y, z, yaw):
        q = np.array([0.0, 0.0, np.sin(yaw / 2.0), np.cos(yaw / 2.0)])
        return cls(np.array([x, y, z], dtype=np.float64), q)

    def matrix(self):
        return Rotation.from_quat(self.rotation).as_matrix()

    def apply(self, points):
        return np.asarray(points, dtype=np.float64) @ self.matrix().T + self.translation

    def inverse(self):
        R = self.matrix()
        return Pose.from_matrix(R.T, -R.T @ self.translation)

    def compose(self, other):
        """``self * other``: apply ``other`` first, then ``self``."""
        R = self.matrix()
        return Pose.from_matrix(R @ other.matrix(), R @ other.translation + self.translation)

    def yaw(self):
        R = self.matrix()
        return float(np.arctan2(R[1, 0], R[0, 0]))

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return np.array_equal(self.translation, other.translation) and np.array_equal(
            self.rotation, other.rotation
        )


def transform_cloud(cloud, pose):
    return SemanticPointCloud(pose.apply(cloud.points), cloud.labels)


def filter_static(cloud):
    """Split a cloud into the three static attribute clouds; labels 0 and 4 are dropped."""
    return {label: cloud.subset(cloud.labels == label) for label in STATIC_LABELS}


# ---------------------------------------------------------------------------
# file formats

CLOUD_MAGIC = b"PSEM"
_RECORD = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("label", "u1")])


def encode_cloud(cloud):
    rec = np.empty(len(cloud), dtype=_RECORD)
    rec["x"], rec["y"], rec["z"] = cloud.points.T
    rec["label"] = cloud.labels
    return CLOUD_MAGIC + struct.pack("<I", len(cloud)) + rec.tobytes()


def decode_cloud(data):
    if len(data) < 8 or data[:4] != CLOUD_MAGIC:
        raise BadMagic(f"expected magic {CLOUD_MAGIC!r}, got {bytes(data[:4])!r}")
    (count,) = struct.unpack("<I", data[4:8])
    need = count * _RECORD.itemsize
    if len(data) - 8 < need:
        raise Truncated(f"header declares {count} points, payload holds {(len(data) - 8) // _RECORD.itemsize}")
    rec = np.frombuffer(data, dtype=_RECORD, count=count, offset=8)
    pts = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    if not np.all(np.isfinite(pts)):
        raise NonFinite("cloud file holds NaN/Inf coordinates")
    return SemanticPointCloud(pts, rec["label"].copy())


def save_cloud(cloud, path):
    try:
        Path(path).write_bytes(encode_cloud(cloud))
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def load_cloud(path):
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return decode_cloud(data)


def save_poses(poses, path, stamps=None):
    """Text pose file, one ``t tx ty tz qx qy qz qw`` line per frame."""
    lines = []
    for k, pose in enumerate(poses):
        t = float(k) if stamps is None else float(stamps[k])
        vals = [t, *pose.translation, *pose.rotation]
        lines.append(" ".join(repr(float(v)) for v in vals))
    try:
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def load_poses(path):
    """Returns ``(stamps, poses)``."""
    stamps, poses = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise Truncated(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
        vals = [float(p) for p in parts]
        q = np.array(vals[4:])
        stamps.append(vals[0])
        poses.append(Pose(vals[1:4], q / np.linalg.norm(q)))
    return stamps, poses


# ---------------------------------------------------------------------------
# procedural scenes


@dataclass(frozen=True)
class ScenarioSpec:
    """Parameters of a synthetic route with ``n_places`` places along the x axis."""

    seed: int = 0
    n_places: int = 10
    place_spacing: float = 20.0
    buildings_per_place: int = 4
    poles_per_place: int = 4
    dynamics_per_place: int = 2
    points_per_object: int = 300
    sensor_height: float = 1.8
    # extensions
    frames_per_place: int = 3
    frame_step: float = 1.0
    sensor_range: float = 30.0
    ground_points: int = 3000
    range_noise: float = 0.02

    def validate(self):
        if self.n_places < 1:
            raise InvalidSpec("n_places must be >= 1")
        counts = (
            self.buildings_per_place,
            self.poles_per_place,
            self.dynamics_per_place,
            self.points_per_object,
            self.ground_points,
        )
        if any(c < 0 for c in counts):
            raise InvalidSpec("counts must be >= 0")
        if self.place_spacing <= 0 or self.sensor_range <= 0:
            raise InvalidSpec("spacing and sensor range must be > 0")
        if self.frames_per_place < 1 or self.frame_step < 0 or self.range_noise < 0:
            raise InvalidSpec("bad frame parameters")
        return self

    @classmethod
    def from_mapping(cls, values):
        names = cls.__dataclass_fields__
        unknown = set(values) - set(names)
        if unknown:
            raise InvalidSpec(f"unknown scenario keys: {sorted(unknown)}")
        defaults = cls()
        kwargs = {}
        for key, raw in values.items():
            try:
                value = float(raw)
            except (TypeError, ValueError) as exc:
                raise InvalidSpec(f"bad value for {key}: {raw!r}") from exc
            if isinstance(getattr(defaults, key), int):
                if not value.is_integer():
                    raise InvalidSpec(f"{key} must be an integer, got {raw!r}")
                value = int(value)
            kwargs[key] = value
        return cls(**kwargs).validate()


@dataclass(frozen=True)
class Box:
    lo: np.ndarray
    hi: np.ndarray
    label: int
    velocity: float = 0.0  # along x, wraps inside [wrap_lo, wrap_hi]
    wrap_lo: float = 0.0
    wrap_hi: float = 0.0

    def at(self, t):
        if self.velocity == 0.0:
            return self.lo, self.hi
        width = self.wrap_hi - self.wrap_lo
        size = self.hi[0] - self.lo[0]
        x0 = self.wrap_lo + np.mod(self.lo[0] - self.wrap_lo + self.velocity * t, width - size)
        shift = np.array([x0 - self.lo[0], 0.0, 0.0])
        return self.lo + shift, self.hi + shift


@dataclass(frozen=True)
class Pole:
    x: float
    y: float
    radius: float
    height: float


@dataclass(frozen=True)
class World:
    spec: ScenarioSpec
    place_positions: np.ndarray  # (n_places, 3), ground level
    boxes: tuple
    poles: tuple


@dataclass(frozen=True)
class Scenario:
    spec: ScenarioSpec
    world: World
    frames: tuple  # of (SemanticPointCloud in sensor frame, Pose sensor->world)
    stamps: tuple
    place_positions: np.ndarray
    place_frames: tuple  # per place, the frame indices making up its local map


BUILDING_INNER_EDGE = 10.0  # lateral clearance keeps 8 m query offsets outside buildings


def build_world(spec):
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0]))
    S = spec.place_spacing
    centres = np.zeros((spec.n_places, 3))
    centres[:, 0] = np.arange(spec.n_places) * S
    boxes, poles = [], []
    for k in range(spec.n_places):
        cx = centres[k, 0]
        for _ in range(spec.buildings_per_place):
            sx, sy = rng.uniform(3.0, 10.0, size=2)
            h = rng.uniform(3.0, 15.0)
            side = rng.choice([-1.0, 1.0])
            y_edge = BUILDING_INNER_EDGE + rng.uniform(0.0, 8.0)
            x_mid = cx + rng.uniform(-S / 2, S / 2)
            y_lo, y_hi = (y_edge, y_edge + sy) if side > 0 else (-y_edge - sy, -y_edge)
            boxes.append(
                Box(np.array([x_mid - sx / 2, y_lo, 0.0]), np.array([x_mid + sx / 2, y_hi, h]), 2)
            )
        for _ in range(spec.poles_per_place):
            side = rng.choice([-1.0, 1.0])
            poles.append(
                Pole(
                    float(cx + rng.uniform(-S / 2, S / 2)),
                    float(side * rng.uniform(4.0, BUILDING_INNER_EDGE - 0.5)),
                    float(rng.uniform(0.1, 0.3)),
                    float(rng.uniform(3.0, 8.0)),
                )
            )
        for _ in range(spec.dynamics_per_place):
            lane = rng.choice([-2.2, 2.2])
            x_mid = cx + rng.uniform(-S / 2, S / 2)
            speed = rng.uniform(3.0, 10.0) * rng.choice([-1.0, 1.0])
            boxes.append(
                Box(
                    np.array([x_mid - 2.0, lane - 0.9, 0.0]),
                    np.array([x_mid + 2.0, lane + 0.9, 1.5]),
                    4,
                    velocity=float(speed),
                    wrap_lo=cx - S / 2,
                    wrap_hi=cx + S / 2,
                )
            )
    return World(spec, _frozen(centres), tuple(boxes), tuple(poles))


def _sample_box(lo, hi, sensor, count, rng):
    """Points on the faces of an axis-aligned box that face the sensor."""
    faces = []
    for axis in range(3):
        for side, bound in ((-1, lo[axis]), (1, hi[axis])):
            if axis == 2 and side < 0:
                continue  # bottom face rests on the ground
            if side * (sensor[axis] - bound) <= 0:
                continue
            others = [a for a in range(3) if a != axis]
            area = np.prod([hi[a] - lo[a] for a in others])
            faces.append((axis, bound, others, area))
    if not faces or count == 0:
        return np.zeros((0, 3))
    areas = np.array([f[3] for f in faces])
    per_face = rng.multinomial(count, areas / areas.sum())
    out = []
    for (axis, bound, others, _), c in zip(faces, per_face):
        p = np.empty((c, 3))
        p[:, axis] = bound
        for a in others:
            p[:, a] = rng.uniform(lo[a], hi[a], size=c)
        out.append(p)
    return np.concatenate(out)


def _sample_pole(pole, sensor, count, rng):
    toward = np.arctan2(sensor[1] - pole.y, sensor[0] - pole.x)
    ang = toward + rng.uniform(-np.pi / 2, np.pi / 2, size=count)
    z = rng.uniform(0.0, pole.height, size=count)
    return np.stack([pole.x + pole.radius * np.cos(ang), pole.y + pole.radius * np.sin(ang), z], axis=1)


def _slab_hits(sensor, d, lo, hi):
    """Segments ``sensor -> sensor + d`` that cross the box ``[lo, hi]`` before their end."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (lo - sensor) * inv
        t2 = (hi - sensor) * inv
    tmin = np.fmin(t1, t2)
    tmax = np.fmax(t1, t2)
    # zero direction components: inside slab -> unbounded, else empty
    zero = d == 0.0
    inside = (sensor >= lo) & (sensor <= hi)
    tmin = np.where(zero, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(zero, np.where(inside, np.inf, -np.inf), tmax)
    enter = tmin.max(axis=1)
    leave = tmax.min(axis=1)
    return (enter <= leave) & (leave > 1e-9) & (enter < 1.0 - 1e-6)


def _wrap(a):
    return (a + np.pi) % (2.0 * np.pi) - np.pi


def _occluded(sensor, points, owners, occluders):
    """True where the segment sensor->point passes through an occluder box.

    A point is never occluded by its own object (``owners`` indexes
    ``occluders``; -1 for ground).  Each box only tests points that lie
    farther than its nearest face and inside its azimuth span.
    """
    hidden = np.zeros(len(points), dtype=bool)
    if not len(occluders) or not len(points):
        return hidden
    d = points - sensor
    rng_ = np.linalg.norm(d, axis=1)
    az = np.arctan2(d[:, 1], d[:, 0])
    for m, (lo, hi) in enumerate(occluders):
        near = np.linalg.norm(np.clip(sensor, lo, hi) - sensor)
        cand = (rng_ > near) & (owners != m) & ~hidden
        footprint = (lo[0] <= sensor[0] <= hi[0]) and (lo[1] <= sensor[1] <= hi[1])
        if not footprint:
            corners = np.array([[lo[0], lo[1]], [lo[0], hi[1]], [hi[0], lo[1]], [hi[0], hi[1]]]) - sensor[:2]
            mid = np.arctan2(*(corners.mean(axis=0)[::-1]))
            span = _wrap(np.arctan2(corners[:, 1], corners[:, 0]) - mid)
            rel = _wrap(az - mid)
            cand &= (rel >= span.min() - 1e-9) & (rel <= span.max() + 1e-9)
        idx = np.flatnonzero(cand)
        if len(idx):
            hidden[idx[_slab_hits(sensor, d[idx], lo, hi)]] = True
    return hidden


def render_scan(world, pose, t, rng):
    """Simulated labelled scan seen from ``pose`` (sensor->world) at time ``t``.

    Objects are sampled on their sensor-facing surfaces, then points hidden
    behind any box or pole are removed.  Returned in the sensor frame.
    """
    spec = world.spec
    sensor = pose.translation
    rmax = spec.sensor_range
    chunks, labels, owners, occluders = [], [], [], []
    for box in world.boxes:
        lo, hi = box.at(t)
        nearest = np.clip(sensor, lo, hi)
        if np.linalg.norm(nearest - sensor) > rmax:
            continue
        p = _sample_box(lo, hi, sensor, spec.points_per_object, rng)
        owners.append(np.full(len(p), len(occluders)))
        occluders.append((lo, hi))
        chunks.append(p)
        labels.append(np.full(len(p), box.label, dtype=np.uint8))
    for pole in world.poles:
        if np.hypot(pole.x - sensor[0], pole.y - sensor[1]) - pole.radius > rmax:
            continue
        p = _sample_pole(pole, sensor, spec.points_per_object, rng)
        owners.append(np.full(len(p), len(occluders)))
        occluders.append(
            (np.array([pole.x - pole.radius, pole.y - pole.radius, 0.0]),
             np.array([pole.x + pole.radius, pole.y + pole.radius, pole.height]))
        )
        chunks.append(p)
        labels.append(np.full(len(p), SemanticLabel.STATIC_STRUCTURE, dtype=np.uint8))
    if spec.ground_points:
        r = rmax * np.sqrt(rng.uniform(0.0, 1.0, size=spec.ground_points))
        a = rng.uniform(0.0, 2 * np.pi, size=spec.ground_points)
        g = np.stack([sensor[0] + r * np.cos(a), sensor[1] + r * np.sin(a), np.zeros_like(r)], axis=1)
        chunks.append(g)
        owners.append(np.full(len(g), -1))
        labels.append(np.full(len(g), SemanticLabel.GROUND, dtype=np.uint8))
    if not chunks:
        return SemanticPointCloud.empty()
    pts = np.concatenate(chunks)
    lab = np.concatenate(labels)
    own = np.concatenate(owners)
    keep = np.linalg.norm(pts - sensor, axis=1) <= rmax
    pts, lab, own = pts[keep], lab[keep], own[keep]
    visible = ~_occluded(sensor, pts, own, occluders)
    pts, lab = pts[visible], lab[visible]
    if spec.range_noise > 0 and len(pts):
        ray = pts - sensor
        rng_ = np.linalg.norm(ray, axis=1, keepdims=True)
        pts = sensor + ray * (1.0 + rng.normal(0.0, spec.range_noise, size=rng_.shape) / np.maximum(rng_, 1e-9))
    local = (pts - sensor) @ pose.matrix()
    return SemanticPointCloud(local, lab)


def place_frame_poses(spec, centre, yaw=0.0):
    """Sensor poses of the frames that build one local map, ending at ``centre``."""
    poses = []
    for f in range(spec.frames_per_place):
        back = (spec.frames_per_place - 1 - f) * spec.frame_step
        x = centre[0] - back * np.cos(yaw)
        y = centre[1] - back * np.sin(yaw)
        poses.append(Pose.from_xyz_yaw(x, y, spec.sensor_height, yaw))
    return poses


FRAME_DT = 0.1


def synth_scenario(spec):
    """Deterministic route: per place, ``frames_per_place`` scans ending at its centre."""
    world = build_world(spec)
    frames, stamps, place_frames = [], [], []
    for k, centre in enumerate(world.place_positions):
        idx = []
        for f, pose in enumerate(place_frame_poses(spec, centre)):
            frame_id = len(frames)
            t = frame_id * FRAME_DT
            rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1, frame_id]))
            frames.append((render_scan(world, pose, t, rng), pose))
            stamps.append(t)
            idx.append(frame_id)
        place_frames.append(tuple(idx))
    return Scenario(spec, world, tuple(frames), tuple(stamps), world.place_positions, tuple(place_frames))
