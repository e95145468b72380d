"""Exact descriptor index, recall and precision-recall metrics, sequence matching."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    BadWindow,
    DimMismatch,
    DuplicateId,
    EmptyIndex,
    EmptyInput,
    EmptyQueries,
    IoFailure,
    MatrixTooSmall,
    Truncated,
)

log = logging.getLogger(__name__)

UNIT_TOL = 1e-6
NORM_EPS = 1e-12


@dataclass(frozen=True, eq=False)
class DescriptorIndex:
    matrix: np.ndarray  # (N, d), unit rows
    ids: tuple
    positions: np.ndarray  # (N, 2) or (N, 3)
    warnings: int = 0

    def __len__(self):
        return len(self.ids)

    @property
    def dim(self):
        return self.matrix.shape[1]


def build_index(descriptors, ids, positions=None):
    """Brute-force index; rows that are not unit length are normalised and counted."""
    mat = np.array(descriptors, dtype=np.float64, ndmin=2)
    ids = tuple(ids)
    if len(ids) == 0 or mat.size == 0:
        raise EmptyIndex("no descriptors")
    if len(ids) != len(mat):
        raise ValueError("ids and descriptors differ in length")
    if len(set(ids)) != len(ids):
        raise DuplicateId("place ids must be unique")
    pos = np.zeros((len(ids), 2)) if positions is None else np.array(positions, dtype=np.float64)
    if len(pos) != len(ids):
        raise ValueError("positions and descriptors differ in length")
    norms = np.linalg.norm(mat, axis=1)
    off = np.abs(norms - 1.0) > UNIT_TOL
    if off.any():
        log.warning("%d descriptor rows re-normalised", int(off.sum()))
        mat[off] /= np.maximum(norms[off], NORM_EPS)[:, None]
    return DescriptorIndex(mat, ids, pos, int(off.sum()))


def query_knn(index, q, k):
    """The ``k`` nearest rows by Euclidean distance, ties by id.

    Returns ``([(id, distance), ...], clamped)``.
    """
    if len(index) == 0:
        raise EmptyIndex("empty index")
    if k < 1:
        raise ValueError("k must be >= 1")
    q = np.asarray(getattr(q, "vector", q), dtype=np.float64).ravel()
    if q.shape[0] != index.dim:
        raise DimMismatch(f"query dim {q.shape[0]} != index dim {index.dim}")
    dist = np.linalg.norm(index.matrix - q, axis=1)
    clamped = k > len(index)
    k = min(k, len(index))
    order = sorted(range(len(index)), key=lambda r: (dist[r], index.ids[r]))[:k]
    return [(index.ids[r], float(dist[r])) for r in order], clamped


def true_matches(index, position, radius=8.0):
    """Ids of indexed places within ``radius`` of ``position`` (planar)."""
    p = np.asarray(position, dtype=np.float64)[:2]
    d = np.linalg.norm(index.positions[:, :2] - p, axis=1)
    return {index.ids[r] for r in np.flatnonzero(d <= radius)}


def recall_at(ranked, truth, n=None, top_percent=None, index_size=None):
    """Fraction of queries with a true match among their first ``N`` results.

    Pass either ``n`` or ``top_percent`` (a fraction, 0.01 for 1%) together with
    ``index_size``; the latter uses ``N = ceil(top_percent * index_size)``.
    """
    if len(ranked) == 0:
        raise EmptyQueries("no queries")
    if len(ranked) != len(truth):
        raise ValueError("results and ground truth differ in length")
    if (n is None) == (top_percent is None):
        raise ValueError("give exactly one of n or top_percent")
    if top_percent is not None:
        if index_size is None:
            raise ValueError("top_percent needs index_size")
        n = top_n(top_percent, index_size)
    hits = sum(1 for r, t in zip(ranked, truth) if set(list(r)[:n]) & set(t))
    return hits / len(ranked)


def top_n(fraction, index_size):
    # round first so 0.01 * 200 is 2, not 2.0000000000000004 -> 3
    return max(1, math.ceil(round(fraction * index_size, 9)))


@dataclass
class PRCurve:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    ap: float


def pr_curve(scores, correct):
    """Precision/recall over descending unique score thresholds.

    A query counts as retrieved when its best-match score is at or above the
    threshold; recall is relative to the number of correct best matches.
    ``AP = sum (R_i - R_{i-1}) P_i``.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    correct = np.asarray(correct, dtype=bool).ravel()
    if scores.size == 0:
        raise EmptyInput("no scored matches")
    if scores.shape != correct.shape:
        raise ValueError("scores and flags differ in length")
    thresholds = np.unique(scores)[::-1]
    total = int(correct.sum())
    prec, rec = [], []
    for t in thresholds:
        sel = scores >= t
        tp = int((correct & sel).sum())
        prec.append(tp / int(sel.sum()))
        rec.append(tp / total if total else 0.0)
    prec, rec = np.array(prec), np.array(rec)
    ap = float(np.sum(np.diff(np.concatenate([[0.0], rec])) * prec))
    return PRCurve(thresholds, prec, rec, ap)


# ---------------------------------------------------------------------------
# sequence matching


def difference_matrix(test, ref):
    """Cosine distance ``1 - <t_i, r_j>`` between unit descriptors."""
    test = np.atleast_2d(np.asarray(test, dtype=np.float64))
    ref = np.atleast_2d(np.asarray(ref, dtype=np.float64))
    if test.shape[1] != ref.shape[1]:
        raise DimMismatch(f"{test.shape[1]} != {ref.shape[1]}")
    return 1.0 - test @ ref.T


def local_normalize(matrix, window):
    """Standardise each entry over a window of ``window`` rows in its column.

    The window is centred on the entry and shifted inwards at the borders; a
    window longer than the column covers the whole column.
    """
    if window < 1 or window % 2 == 0:
        raise BadWindow(f"window must be odd and >= 1, got {window}")
    M = np.asarray(matrix, dtype=np.float64)
    rows = M.shape[0]
    w = min(window, rows)
    out = np.empty_like(M)
    for i in range(rows):
        start = min(max(i - window // 2, 0), rows - w)
        block = M[start : start + w]
        mu = block.mean(axis=0)
        sd = block.std(axis=0)
        z = (M[i] - mu) / np.maximum(sd, NORM_EPS)
        out[i] = np.where(sd > NORM_EPS, z, 0.0)
    return out


VELOCITIES = (0.8, 0.9, 1.0, 1.1, 1.2)


@dataclass
class SequenceMatch:
    ref: np.ndarray  # matched reference index per test frame, -1 for no match
    score: np.ndarray  # best mean cost per test frame
    slope: np.ndarray


def sequence_match(matrix, v=10, velocities=VELOCITIES, threshold=math.inf):
    """Best straight line of ``v`` rows through each test frame.

    For test frame ``i`` the rows ``start .. start+v-1`` around it are used
    (shifted inwards at the borders) and a line of slope ``s`` through
    ``(i, j)`` visits column ``j + round(s * (r - i))`` in row ``r``.  Lines
    leaving the matrix are discarded.  Ties go to the smallest ``j``, then the
    first velocity.
    """
    M = np.asarray(matrix, dtype=np.float64)
    rows, cols = M.shape
    if rows < v or cols < v:
        raise MatrixTooSmall(f"matrix {M.shape} smaller than window {v}")
    refs = np.full(rows, -1)
    scores = np.full(rows, np.inf)
    slopes = np.zeros(rows)
    j = np.arange(cols)
    for i in range(rows):
        start = min(max(i - v // 2, 0), rows - v)
        r = np.arange(start, start + v)
        best, best_j, best_s = np.inf, -1, 0.0
        for s in velocities:
            offs = np.round(s * (r - i)).astype(np.int64)
            c = j[:, None] + offs[None, :]
            ok = np.all((c >= 0) & (c < cols), axis=1)
            if not ok.any():
                continue
            cost = M[r[None, :], np.clip(c, 0, cols - 1)].mean(axis=1)
            cost[~ok] = np.inf
            jj = int(np.argmin(cost))
            if cost[jj] < best or (cost[jj] == best and jj < best_j):
                best, best_j, best_s = float(cost[jj]), jj, s
        scores[i], slopes[i] = best, best_s
        refs[i] = best_j if best <= threshold else -1
    return SequenceMatch(refs, scores, slopes)


# ---------------------------------------------------------------------------
# baseline descriptor


def naive_descriptor(stack, max_range=30.0):
    """Flattened raw spherical stack (range scaled to [0, 1]), unit length."""
    ch = stack.channels().copy()
    ch[:, 0] = np.clip(ch[:, 0] / max_range, 0.0, 1.0)
    v = ch.ravel()
    return v / math.sqrt(float(v @ v) + NORM_EPS**2)


# ---------------------------------------------------------------------------
# viewpoint sweep


@dataclass
class EvalReport:
    recall_1: float
    recall_10: float
    recall_top1pct: float
    pr: PRCurve | None = None
    surface: list = field(default_factory=list)  # (delta_t, delta_theta, recall)

    def summary(self):
        lines = [
            f"recall@1 {self.recall_1:.4f}",
            f"recall@10 {self.recall_10:.4f}",
            f"recall@top1% {self.recall_top1pct:.4f}",
        ]
        if self.pr is not None:
            lines.append(f"ap {self.pr.ap:.4f}")
        return "\n".join(lines) + "\n"


def viewpoint_sweep(model, scenario, delta_t, delta_theta, map_cfg=None, n=None, k=10, seed=0, places=None):
    """Recall@top-1% for every (translation, rotation) offset pair.

    ``model=None`` evaluates the flattened-stack baseline.  Returns rows
    ``(delta_t_m, delta_theta_deg, recall)`` in grid order.
    """
    from .pipeline import MapConfig, make_queries, reference_database, retrieval_recalls

    map_cfg = MapConfig() if map_cfg is None else map_cfg
    n = n or (model.config.n if model is not None else 64)
    ref = reference_database(scenario, map_cfg, n, k)
    rows = []
    for dt in delta_t:
        for dth in delta_theta:
            queries = make_queries(scenario, map_cfg, dt, math.radians(dth), n, k, seed, places)
            rec = retrieval_recalls(ref, scenario.place_positions, queries, model, ns=(1,), top_percent=0.01)
            rows.append((float(dt), float(dth), rec["recall@top%"]))
    return rows


def write_surface(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["delta_t_m", "delta_theta_deg", "recall"])
        w.writerows(rows)


# ---------------------------------------------------------------------------
# descriptor store: JSON manifest + flat little-endian float32 matrix


def save_descriptors(path, matrix, ids, positions):
    path = Path(path)
    matrix = np.asarray(matrix, dtype="<f4")
    manifest = {
        "count": int(matrix.shape[0]),
        "dimension": int(matrix.shape[1]),
        "ids": [int(i) if isinstance(i, (int, np.integer)) else str(i) for i in ids],
        "positions": np.asarray(positions, dtype=np.float64).tolist(),
        "data": path.with_suffix(".bin").name,
    }
    try:
        path.write_text(json.dumps(manifest, indent=1))
        path.with_suffix(".bin").write_bytes(matrix.tobytes())
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def load_descriptors(path):
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
        raw = (path.parent / manifest["data"]).read_bytes()
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise BadMagic(f"unreadable descriptor store {path}: {exc}") from exc
    count, dim = manifest["count"], manifest["dimension"]
    if len(raw) < count * dim * 4:
        raise Truncated(f"descriptor data holds {len(raw)} bytes, need {count * dim * 4}")
    matrix = np.frombuffer(raw, dtype="<f4", count=count * dim).reshape(count, dim).astype(np.float64)
    return matrix, manifest["ids"], np.asarray(manifest["positions"], dtype=np.float64)
