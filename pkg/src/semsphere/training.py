"""Tuple mining, viewpoint-free and divergence losses, SGD training, gradient checks."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .embed import embed_backward, embed_forward, model_init, save_checkpoint
from .errors import Diverged, EmptySet, InvalidConfig, NoNegatives, NoPositives
from .projection import attribute_normals, stack_from_normals
from .scene import Pose

log = logging.getLogger(__name__)

N_ROTATIONS = 12


@dataclass(frozen=True)
class LossConfig:
    rot_margin: float = 0.5
    trip_margin: float = 0.5
    div_weight: float = 0.1
    div_margin: float = 0.5
    lr: float = 1e-2
    momentum: float = 0.9
    epochs: int = 10
    batch_size: int = 2
    seed: int = 0
    n_pos: int = 2
    n_neg: int = 10
    n_rot: int = 4
    r_pos: float = 8.0
    r_neg: float = 50.0

    def validate(self):
        if min(self.rot_margin, self.trip_margin, self.div_margin) <= 0 or self.div_weight < 0:
            raise InvalidConfig("margins must be > 0 and div_weight >= 0")
        if self.batch_size < 1 or self.epochs < 0 or min(self.n_pos, self.n_neg, self.n_rot) < 1:
            raise InvalidConfig("batch, epoch and sample counts must be positive")
        if self.n_rot > N_ROTATIONS:
            raise InvalidConfig(f"at most {N_ROTATIONS} rotations")
        return self


def read_key_value(path):
    """Parse a ``key = value`` text file; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfig(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def loss_config_from_mapping(values):
    names = {f.name: f.type for f in fields(LossConfig)}
    unknown = set(values) - set(names)
    if unknown:
        raise InvalidConfig(f"unknown training keys: {sorted(unknown)}")
    defaults = LossConfig()
    kwargs = {}
    for key, raw in values.items():
        kind = type(getattr(defaults, key))
        try:
            kwargs[key] = kind(float(raw)) if kind is float else int(raw)
        except ValueError as exc:
            raise InvalidConfig(f"bad value for {key}: {raw!r}") from exc
    return LossConfig(**kwargs).validate()


# ---------------------------------------------------------------------------
# dataset and mining


@dataclass(frozen=True, eq=False)
class TrainingSample:
    local_map: object  # SemanticPointCloud in the robot frame
    stack: object
    position: np.ndarray  # (x, y) metres
    place_id: int = -1


@dataclass(frozen=True, eq=False)
class DatasetIndex:
    samples: tuple
    n: int = 64
    k: int = 10

    @property
    def positions(self):
        return np.array([s.position[:2] for s in self.samples], dtype=np.float64)

    def __len__(self):
        return len(self.samples)


class RotatedSet:
    """The anchor's map re-projected after z rotations of ``30 * j`` degrees.

    Normals are estimated once; projections are computed on first access.
    """

    def __init__(self, local_map, n, k):
        self._map = local_map
        self._n, self._k = n, k
        self._parts = None
        self._cache = {}

    def __len__(self):
        return N_ROTATIONS

    def angle(self, j):
        return 2.0 * np.pi * j / N_ROTATIONS

    def __getitem__(self, j):
        if not 0 <= j < N_ROTATIONS:
            raise IndexError(j)
        if j not in self._cache:
            if self._parts is None:
                self._parts = attribute_normals(self._map, self._k)
            rot = Pose.from_xyz_yaw(0.0, 0.0, 0.0, self.angle(j)).matrix()
            self._cache[j] = stack_from_normals(self._parts, self._n, rot)
        return self._cache[j]


@dataclass(frozen=True, eq=False)
class TrainingTuple:
    anchor: object
    rotated: RotatedSet
    positives: tuple
    negatives: tuple
    position: np.ndarray


def mine_tuple(dataset, anchor_id, rng, cfg=LossConfig()):
    """Positives within ``r_pos`` (anchor excluded), negatives beyond ``r_neg``."""
    pos = dataset.positions
    dist = np.linalg.norm(pos - pos[anchor_id], axis=1)
    cand_pos = np.flatnonzero(dist <= cfg.r_pos)
    cand_pos = cand_pos[cand_pos != anchor_id]
    cand_neg = np.flatnonzero(dist >= cfg.r_neg)
    if len(cand_pos) == 0:
        raise NoPositives(f"sample {anchor_id} has no neighbour within {cfg.r_pos} m")
    if len(cand_neg) == 0:
        raise NoNegatives(f"sample {anchor_id} has no sample beyond {cfg.r_neg} m")
    pick_pos = rng.choice(cand_pos, size=min(cfg.n_pos, len(cand_pos)), replace=False)
    pick_neg = rng.choice(cand_neg, size=min(cfg.n_neg, len(cand_neg)), replace=False)
    a = dataset.samples[anchor_id]
    return TrainingTuple(
        anchor=a.stack,
        rotated=RotatedSet(a.local_map, dataset.n, dataset.k),
        positives=tuple(dataset.samples[i].stack for i in np.sort(pick_pos)),
        negatives=tuple(dataset.samples[i].stack for i in np.sort(pick_neg)),
        position=np.asarray(a.position),
    )


# ---------------------------------------------------------------------------
# losses on descriptor arrays


def _sqdist(a, b):
    """Pairwise squared Euclidean distances, (len(a), len(b))."""
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _nonempty(*sets):
    for s in sets:
        if len(s) == 0:
            raise EmptySet("candidate sets must be non-empty")


def lazy_rot_terms(rot, pos, neg, margin):
    """Value and the maximising ``(i, j, k)`` (pos, rot, neg); ``None`` when inactive."""
    rot, pos, neg = (np.atleast_2d(np.asarray(x, dtype=np.float64)) for x in (rot, pos, neg))
    _nonempty(rot, pos, neg)
    dp = _sqdist(rot, pos)  # (j, i)
    dn = _sqdist(rot, neg)  # (j, k)
    h = margin + dp[:, :, None] - dn[:, None, :]  # (j, i, k)
    j, i, k = np.unravel_index(np.argmax(h), h.shape)
    value = float(h[j, i, k])
    return (value, (int(i), int(j), int(k))) if value > 0 else (0.0, None)


def lazy_rot_loss(rot, pos, neg, margin):
    return lazy_rot_terms(rot, pos, neg, margin)[0]


def lazy_trip_terms(anchor, pos, neg, margin):
    """Value and ``(closest positive, hardest negative)``; ``None`` when inactive."""
    anchor = np.asarray(anchor, dtype=np.float64).reshape(1, -1)
    pos, neg = (np.atleast_2d(np.asarray(x, dtype=np.float64)) for x in (pos, neg))
    _nonempty(pos, neg)
    dp = _sqdist(anchor, pos)[0]
    dn = _sqdist(anchor, neg)[0]
    i = int(np.argmin(dp))
    h = margin + dp[i] - dn
    j = int(np.argmax(h))
    value = float(h[j])
    return (value, (i, j)) if value > 0 else (0.0, None)


def lazy_trip_loss(anchor, pos, neg, margin):
    return lazy_trip_terms(anchor, pos, neg, margin)[0]


def viewpoint_free_loss(anchor, rot, pos, neg, cfg):
    """LazyRot + LazyTrip on one branch's descriptor slices."""
    return lazy_rot_loss(rot, pos, neg, cfg.rot_margin) + lazy_trip_loss(anchor, pos, neg, cfg.trip_margin)


@dataclass
class LossReport:
    lazy_rot: np.ndarray  # per attribute
    lazy_trip: np.ndarray
    free: np.ndarray
    regularizer: float
    total: float
    active_rot: int = 0
    active_trip: int = 0
    active_pairs: int = 0

    def row(self):
        return {
            "lazy_rot": float(self.lazy_rot.sum()),
            "lazy_trip": float(self.lazy_trip.sum()),
            "free": float(self.free.sum()),
            "regularizer": self.regularizer,
            "total": self.total,
            "active_rot": self.active_rot,
            "active_trip": self.active_trip,
            "active_pairs": self.active_pairs,
        }


BRANCH_PAIRS = ((0, 1), (0, 2), (1, 2))


def tuple_loss(anchor, rot, pos, neg, branch_dim, cfg, need_grad=True):
    """Divergence loss on fused descriptor arrays.

    ``anchor`` is (d,), the others (count, d).  Returns the report and, when
    requested, gradients with the same shapes as the inputs.
    """
    anchor = np.asarray(anchor, dtype=np.float64)
    rot, pos, neg = (np.atleast_2d(np.asarray(x, dtype=np.float64)) for x in (rot, pos, neg))
    g_a, g_r, g_p, g_n = (np.zeros_like(x) for x in (anchor, rot, pos, neg))
    lr_v, lt_v = np.zeros(3), np.zeros(3)
    act_r = act_t = act_pairs = 0
    for a in range(3):
        sl = slice(a * branch_dim, (a + 1) * branch_dim)
        val, arg = lazy_rot_terms(rot[:, sl], pos[:, sl], neg[:, sl], cfg.rot_margin)
        lr_v[a] = val
        if arg is not None:
            act_r += 1
            i, j, k = arg
            r, p, q = rot[j, sl], pos[i, sl], neg[k, sl]
            g_r[j, sl] += 2.0 * (r - p) - 2.0 * (r - q)
            g_p[i, sl] += -2.0 * (r - p)
            g_n[k, sl] += 2.0 * (r - q)
        val, arg = lazy_trip_terms(anchor[sl], pos[:, sl], neg[:, sl], cfg.trip_margin)
        lt_v[a] = val
        if arg is not None:
            act_t += 1
            i, j = arg
            x, p, q = anchor[sl], pos[i, sl], neg[j, sl]
            g_a[sl] += 2.0 * (x - p) - 2.0 * (x - q)
            g_p[i, sl] += -2.0 * (x - p)
            g_n[j, sl] += 2.0 * (x - q)
    reg = 0.0
    slices = [anchor[a * branch_dim : (a + 1) * branch_dim] for a in range(3)]
    norms = [math.sqrt(float(s @ s) + 1e-24) for s in slices]
    units = [s / nrm for s, nrm in zip(slices, norms)]
    for a, b in BRANCH_PAIRS:
        d = units[a] - units[b]
        hinge = cfg.div_margin - float(d @ d)
        if hinge > 0:
            act_pairs += 1
            reg += hinge
            if cfg.div_weight:
                # d/du of -|u_a - u_b|^2, pushed through u = s / |s|
                for idx, sign in ((a, 1.0), (b, -1.0)):
                    gu = -2.0 * sign * d * cfg.div_weight
                    u = units[idx]
                    gs = (gu - u * (u @ gu)) / norms[idx]
                    g_a[idx * branch_dim : (idx + 1) * branch_dim] += gs
    free = lr_v + lt_v
    total = float(free.sum() + cfg.div_weight * reg)
    report = LossReport(lr_v, lt_v, free, reg, total, act_r, act_t, act_pairs)
    if not need_grad:
        return report, None
    return report, (g_a, g_r, g_p, g_n)


def _members(tup, rot_ids):
    return [tup.anchor] + [tup.rotated[j] for j in rot_ids] + list(tup.positives) + list(tup.negatives)


def _tuple_forward(tup, model, rot_ids):
    stacks = _members(tup, rot_ids)
    outs = [embed_forward(s, model) for s in stacks]
    descs = np.array([d.vector for d, _ in outs])
    nr, npos = len(rot_ids), len(tup.positives)
    parts = (descs[0], descs[1 : 1 + nr], descs[1 + nr : 1 + nr + npos], descs[1 + nr + npos :])
    return outs, parts


def divergence_loss(tup, model, cfg, rot_ids=None, need_grad=False):
    """Embed every member of ``tup`` and evaluate the full training loss.

    ``rot_ids`` selects which of the 12 rotations take part (all by default).
    With ``need_grad`` also returns the parameter gradients as a name->array dict.
    """
    rot_ids = list(range(N_ROTATIONS)) if rot_ids is None else list(rot_ids)
    outs, parts = _tuple_forward(tup, model, rot_ids)
    report, grads = tuple_loss(*parts, model.config.branch_dim, cfg, need_grad=need_grad)
    if not need_grad:
        return report
    upstream = [grads[0]] + list(grads[1]) + list(grads[2]) + list(grads[3])
    total = {name: np.zeros_like(arr) for name, arr in model.named_tensors()}
    for (desc, cache), up in zip(outs, upstream):
        if not np.any(up):
            continue
        for name, g in embed_backward(cache, model, up).items():
            total[name] += g
    return report, total


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: object
    log: list = field(default_factory=list)  # one dict per epoch (epoch 0 = initial)
    checkpoints: list = field(default_factory=list)


def _mineable(dataset, cfg):
    pos = dataset.positions
    ok = []
    for i in range(len(dataset)):
        d = np.linalg.norm(pos - pos[i], axis=1)
        if np.count_nonzero(d <= cfg.r_pos) > 1 and np.any(d >= cfg.r_neg):
            ok.append(i)
    return ok


def _mean_rows(rows):
    keys = rows[0].keys()
    return {k: float(np.mean([r[k] for r in rows])) for k in keys}


def train(dataset, embed_config, cfg, model=None, checkpoint_dir=None, log_path=None):
    """SGD with momentum over minibatches of mined tuples.

    Epoch 0 in the log is the loss of the initial model on the first epoch's
    tuples.  Deterministic for a fixed ``cfg.seed``.
    """
    cfg.validate()
    model = model_init(embed_config, cfg.seed) if model is None else model
    anchors = _mineable(dataset, cfg)
    if not anchors:
        raise NoPositives("dataset holds no anchor with both positives and negatives")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 11]))
    theta = model.to_vector()
    velocity = np.zeros_like(theta)
    result = TrainResult(model)
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    last_good = None
    for epoch in range(cfg.epochs + 1):
        start = time.perf_counter()
        order = rng.permutation(anchors)
        rows = []
        for b in range(0, len(order), cfg.batch_size):
            grad = np.zeros_like(theta)
            batch_rows = []
            for anchor_id in order[b : b + cfg.batch_size]:
                tup = mine_tuple(dataset, anchor_id, rng, cfg)
                rot_ids = rng.choice(N_ROTATIONS, size=cfg.n_rot, replace=False)
                report, g = divergence_loss(tup, model, cfg, rot_ids, need_grad=True)
                if not math.isfinite(report.total):
                    raise Diverged(f"non-finite loss at epoch {epoch}", last_good)
                batch_rows.append(report.row())
                grad += np.concatenate([g[name].ravel() for name, _ in model.named_tensors()])
            rows.extend(batch_rows)
            if epoch == 0:
                continue  # evaluation pass of the initial model
            grad /= len(batch_rows)
            velocity = cfg.momentum * velocity - cfg.lr * grad
            theta = theta + velocity
            if not np.all(np.isfinite(theta)):
                raise Diverged(f"non-finite parameters at epoch {epoch}", last_good)
            model = model.from_vector(theta)
        entry = {"epoch": epoch, **_mean_rows(rows)}
        result.log.append(entry)
        log.info("epoch %d total %.4f (%.1f s)", epoch, entry["total"], time.perf_counter() - start)
        if ckpt_dir and epoch > 0:
            path = ckpt_dir / f"epoch_{epoch:03d}.json"
            save_checkpoint(model, path)
            result.checkpoints.append(path)
            last_good = path
    result.model = model
    if log_path:
        write_epoch_log(result.log, log_path)
    return result


def write_epoch_log(rows, path):
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: dict  # parameter group -> max relative error
    skipped: dict  # parameter group -> coordinates skipped near kinks
    checked: int = 0

    @property
    def worst(self):
        return max(self.max_rel_error.values(), default=0.0)

    def passed(self, tol=1e-4):
        return self.worst < tol


def _signature(tup, model, cfg, rot_ids):
    """Everything that selects a linear piece: ReLU masks, hinge winners."""
    outs, parts = _tuple_forward(tup, model, rot_ids)
    sig = []
    for _, cache in outs:
        for fm in cache.fmaps:
            for pre in fm.cache.get("pre", []):
                sig.append((pre > 0).tobytes())
    report, _ = tuple_loss(*parts, model.config.branch_dim, cfg, need_grad=False)
    bd = model.config.branch_dim
    for a in range(3):
        sl = slice(a * bd, (a + 1) * bd)
        sig.append(lazy_rot_terms(parts[1][:, sl], parts[2][:, sl], parts[3][:, sl], cfg.rot_margin)[1])
        sig.append(lazy_trip_terms(parts[0][sl], parts[2][:, sl], parts[3][:, sl], cfg.trip_margin)[1])
    units = []
    for a in range(3):
        s = parts[0][a * bd : (a + 1) * bd]
        units.append(s / math.sqrt(float(s @ s) + 1e-24))
    sig.append(tuple(cfg.div_margin - float((units[a] - units[b]) @ (units[a] - units[b])) > 0 for a, b in BRANCH_PAIRS))
    return sig, report.total


def grad_check(model, tup, cfg, rot_ids=(0, 3), step=1e-5, floor=1e-6):
    """Analytic vs central-difference gradients of the divergence loss.

    Coordinates whose ``+step`` / ``-step`` evaluations land on a different
    linear piece (a ReLU or hinge switches) are skipped and counted.  The
    relative error is ``|a - f| / max(|a|, |f|, floor)``.
    """
    rot_ids = list(rot_ids)
    _, grads = divergence_loss(tup, model, cfg, rot_ids, need_grad=True)
    theta = model.to_vector()
    analytic = np.concatenate([grads[name].ravel() for name, _ in model.named_tensors()])
    groups = []
    for name, arr in model.named_tensors():
        groups += [name.split(".", 1)[1]] * arr.size
    base_sig, _ = _signature(tup, model, cfg, rot_ids)
    max_err, skipped = {}, {}
    checked = 0
    for c in range(len(theta)):
        g = groups[c]
        max_err.setdefault(g, 0.0)
        skipped.setdefault(g, 0)
        e = np.zeros_like(theta)
        e[c] = step
        sig_p, f_p = _signature(tup, model.from_vector(theta + e), cfg, rot_ids)
        sig_m, f_m = _signature(tup, model.from_vector(theta - e), cfg, rot_ids)
        if sig_p != base_sig or sig_m != base_sig:
            skipped[g] += 1
            continue
        fd = (f_p - f_m) / (2.0 * step)
        err = abs(fd - analytic[c]) / max(abs(fd), abs(analytic[c]), floor)
        max_err[g] = max(max_err[g], err)
        checked += 1
    return GradCheckReport(max_err, skipped, checked)


def config_dict(cfg):
    return asdict(cfg)
