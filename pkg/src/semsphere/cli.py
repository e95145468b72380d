"""Command-line entry point: ``semsphere <command> [options]``.

Exit codes: 0 success, 2 usage or input error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import plots
from .dom import save_snapshot
from .embed import EmbedConfig, TINY_CONFIG, init_vlad_from_data, load_checkpoint, model_init, save_checkpoint
from .errors import InputError, InvalidConfig, NumericError
from .pipeline import (
    MapConfig,
    offset_pose,
    place_map_from_frames,
    query_local_map,
    random_tuple_dataset,
)
from .projection import project_stack
from .retrieval import (
    build_index,
    difference_matrix,
    load_descriptors,
    local_normalize,
    naive_descriptor,
    pr_curve,
    query_knn,
    recall_at,
    save_descriptors,
    sequence_match,
    top_n,
    true_matches,
    viewpoint_sweep,
    write_surface,
)
from .scene import ScenarioSpec, build_world, load_cloud, load_poses, save_cloud, save_poses, synth_scenario
from .training import DatasetIndex, LossConfig, TrainingSample, grad_check, mine_tuple, read_key_value, train

log = logging.getLogger("semsphere")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3

# keys that belong to no module config
EXTRA_DEFAULTS = {
    "normals_k": 10,
    "views": 0,
    "max_offset": 8.0,
    "init_sharpness": 3.0,
    "knn_k": 10,
    "seq_window": 10,
    "norm_window": 11,
    "seq_threshold": math.inf,
    "descriptor_noise": 0.0,
    "delta_t": "0,2,4,6,8",
    "delta_theta": "0,45,90,135,180",
}


# ---------------------------------------------------------------------------
# configuration


def _coerce(kind, raw, key):
    try:
        if kind is bool:
            return str(raw).strip().lower() in ("1", "true", "yes", "on")
        if kind is int:
            value = float(raw)
            if not value.is_integer():
                raise ValueError
            return int(value)
        if kind is float:
            return float(raw)
        if kind is tuple:
            return tuple(int(v) for v in str(raw).split(","))
        return str(raw)
    except ValueError as exc:
        raise InvalidConfig(f"bad value for {key}: {raw!r}") from exc


def _build(cls, values, defaults=None):
    base = defaults or cls()
    kw = {}
    for f in fields(cls):
        if f.name in values:
            kw[f.name] = _coerce(type(getattr(base, f.name)), values[f.name], f.name)
    return replace(base, **kw)


class RunConfig:
    """Every module default, overridable from a ``key = value`` file and flags."""

    def __init__(self, values=None, seed=None):
        values = dict(values or {})
        known = {"seed"} | set(EXTRA_DEFAULTS)
        for cls in (ScenarioSpec, MapConfig, EmbedConfig, LossConfig):
            known |= {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise InvalidConfig(f"unknown config keys: {unknown}")
        if seed is not None:
            values["seed"] = seed
        self.scenario = _build(ScenarioSpec, values).validate()
        self.map = _build(MapConfig, values)
        self.embed = _build(EmbedConfig, values).validate()
        self.loss = _build(LossConfig, values).validate()
        self.extra = {k: _coerce(type(v), values.get(k, v), k) for k, v in EXTRA_DEFAULTS.items()}

    @classmethod
    def from_file(cls, path, seed=None):
        return cls(read_key_value(path) if path else {}, seed)

    def resolved(self):
        out = {}
        for prefix, obj in (("scenario", self.scenario), ("map", self.map), ("embed", self.embed), ("loss", self.loss)):
            for k, v in asdict(obj).items():
                out[f"{prefix}.{k}"] = v
        out.update({f"extra.{k}": v for k, v in self.extra.items()})
        return out

    def float_list(self, key):
        return [float(v) for v in str(self.extra[key]).split(",") if v.strip()]


def write_resolved(cfg, out, command, args):
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"command = {command}"]
    lines += [f"arg.{k} = {v}" for k, v in sorted(vars(args).items()) if k not in ("func",)]
    lines += [f"{k} = {v}" for k, v in cfg.resolved().items()]
    (out / "resolved_config.txt").write_text("\n".join(lines) + "\n")
    for line in lines:
        log.info("config %s", line)


def _pmap(fn, items, workers):
    """Ordered map, optionally over worker processes."""
    if workers <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def _scenario_spec(dataset):
    path = Path(dataset) / "scenario.txt"
    if not path.exists():
        raise InputError(f"{dataset} holds no scenario.txt")
    return ScenarioSpec.from_mapping(read_key_value(path))


# ---------------------------------------------------------------------------
# synth / map


def cmd_synth(args, cfg, out):
    if args.spec:
        try:
            spec = ScenarioSpec.from_mapping(read_key_value(args.spec))
        except InvalidConfig as exc:
            raise InputError(str(exc)) from exc
        if args.seed is not None:
            spec = replace(spec, seed=args.seed).validate()
    else:
        spec = cfg.scenario
    scen = synth_scenario(spec)
    frames_dir = out / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    for i, (cloud, _) in enumerate(scen.frames):
        save_cloud(cloud, frames_dir / f"frame_{i:05d}.psem")
    save_poses([p for _, p in scen.frames], out / "poses.txt", scen.stamps)
    lines = []
    for k, (pos, idx) in enumerate(zip(scen.place_positions, scen.place_frames)):
        coords = " ".join(repr(float(v)) for v in pos[:3])
        lines.append(f"{k} {coords} " + ",".join(str(i) for i in idx))
    (out / "places.txt").write_text("\n".join(lines) + "\n")
    (out / "scenario.txt").write_text("".join(f"{k} = {v}\n" for k, v in asdict(spec).items()))
    print(f"wrote {len(scen.frames)} frames for {len(lines)} places to {out}")
    return EXIT_OK


def _load_places(dataset):
    dataset = Path(dataset)
    places_file = dataset / "places.txt"
    if not places_file.exists() or not (dataset / "poses.txt").exists():
        raise InputError(f"{dataset} is not a dataset directory")
    _, poses = load_poses(dataset / "poses.txt")
    places = []
    for line in places_file.read_text().splitlines():
        if not line.strip():
            continue
        k, x, y, z, idx = line.split()
        places.append((int(k), np.array([float(x), float(y), float(z)]), [int(i) for i in idx.split(",")]))
    if not places:
        raise InputError(f"{dataset} holds no places")
    return places, poses


def _map_job(job):
    dataset, k, idx, poses, map_cfg, snapshot = job
    frames = [(load_cloud(Path(dataset) / "frames" / f"frame_{i:05d}.psem"), poses[i]) for i in idx]
    local, tree = place_map_from_frames(frames, k, map_cfg, keep_tree=True)
    return local, (tree if snapshot else None)


def _view_job(job):
    world_spec, k, v, pos, yaw, map_cfg = job
    world = build_world(world_spec)
    return query_local_map(world, pos, yaw, map_cfg, (6, k, v))


def cmd_map(args, cfg, out):
    places, poses = _load_places(args.dataset)
    map_cfg = replace(cfg.map, use_dom=not args.no_dom) if args.no_dom else cfg.map
    maps_dir = out / "maps"
    maps_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(args.dataset, k, idx, poses, map_cfg, args.snapshots) for k, _, idx in places]
    results = _pmap(_map_job, jobs, args.workers)
    index = []
    for (k, pos, _), (local, tree) in zip(places, results):
        name = f"place_{k:04d}"
        save_cloud(local, maps_dir / f"{name}.psem")
        if tree is not None:
            save_snapshot(tree, maps_dir / f"{name}.pseo")
        index.append((name, pos[0], pos[1], k))
    views = cfg.extra["views"]
    if views:
        spec = _scenario_spec(args.dataset)
        rng = np.random.default_rng(np.random.SeedSequence([map_cfg.seed, 5]))
        vjobs = []
        for k, pos, _ in places:
            for v in range(1, views + 1):
                p, yaw = offset_pose(pos, rng.uniform(0.0, cfg.extra["max_offset"]), rng.uniform(0, 2 * np.pi), rng)
                vjobs.append((spec, k, v, p, yaw, map_cfg))
        for (spec_, k, v, p, _, _), local in zip(vjobs, _pmap(_view_job, vjobs, args.workers)):
            name = f"place_{k:04d}_v{v:02d}"
            save_cloud(local, maps_dir / f"{name}.psem")
            index.append((name, p[0], p[1], k))
    (maps_dir / "index.txt").write_text("".join(f"{n} {float(x)!r} {float(y)!r} {k}\n" for n, x, y, k in index))
    print(f"wrote {len(index)} local maps ({'occupancy' if map_cfg.use_dom else 'raw accumulation'}) to {maps_dir}")
    return EXIT_OK


def _load_map_index(maps_dir):
    maps_dir = Path(maps_dir)
    path = maps_dir / "index.txt"
    if not path.exists():
        raise InputError(f"{maps_dir} holds no index.txt")
    rows = []
    for line in path.read_text().splitlines():
        if line.strip():
            name, x, y, k = line.split()
            rows.append((name, np.array([float(x), float(y)]), int(k)))
    if not rows:
        raise InputError(f"{maps_dir} lists no maps")
    return rows


def _project_job(job):
    path, n, k = job
    return project_stack(load_cloud(path), n, k)


def _stacks(maps_dir, rows, cfg, workers):
    jobs = [(Path(maps_dir) / f"{name}.psem", cfg.embed.n, cfg.extra["normals_k"]) for name, _, _ in rows]
    return _pmap(_project_job, jobs, workers)


# ---------------------------------------------------------------------------
# train / embed


def cmd_train(args, cfg, out):
    rows = _load_map_index(args.maps)
    stacks = _stacks(args.maps, rows, cfg, args.workers)
    samples = tuple(
        TrainingSample(load_cloud(Path(args.maps) / f"{name}.psem"), st, pos, k)
        for (name, pos, k), st in zip(rows, stacks)
    )
    dataset = DatasetIndex(samples, cfg.embed.n, cfg.extra["normals_k"])
    model = model_init(cfg.embed, cfg.loss.seed)
    if cfg.extra["init_sharpness"] > 0:
        model = init_vlad_from_data(model, stacks, sharpness=cfg.extra["init_sharpness"])
    result = train(dataset, cfg.embed, cfg.loss, model=model, checkpoint_dir=out / "checkpoints", log_path=out / "epoch_log.csv")
    save_checkpoint(result.model, out / "model.json")
    epochs = [r["epoch"] for r in result.log]
    plots.line_plot(
        out / "loss.svg",
        {"total": (epochs, [r["total"] for r in result.log])},
        title="training loss",
        xlabel="epoch",
        ylabel="loss",
    )
    first, last = result.log[0]["total"], result.log[-1]["total"]
    print(f"trained {cfg.loss.epochs} epochs: loss {first:.4f} -> {last:.4f}; model at {out / 'model.json'}")
    return EXIT_OK


def _describe_job(job):
    stack, model, max_range = job
    if model is None:
        return naive_descriptor(stack, max_range)
    from .embed import embed_place

    return embed_place(stack, model).vector


def cmd_embed(args, cfg, out):
    rows = _load_map_index(args.maps)
    model = load_checkpoint(args.model) if args.model else None
    ecfg = model.config if model else cfg.embed
    cfg.embed = ecfg
    stacks = _stacks(args.maps, rows, cfg, args.workers)
    descs = _pmap(_describe_job, [(s, model, ecfg.max_range) for s in stacks], args.workers)
    save_descriptors(out / "descriptors.json", np.array(descs), [r[0] for r in rows], np.array([r[1] for r in rows]))
    kind = "learned" if model else "flattened-baseline"
    print(f"wrote {len(descs)} {kind} descriptors to {out / 'descriptors.json'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# index / query / eval / seqmatch


def _load_index(path):
    matrix, ids, positions = load_descriptors(path)
    return build_index(matrix, ids, positions)


def cmd_index(args, cfg, out):
    index = _load_index(args.descriptors)
    save_descriptors(out / "index.json", index.matrix, index.ids, index.positions)
    print(f"index of {len(index)} places, dimension {index.dim}, {index.warnings} rows re-normalised")
    return EXIT_OK


def _knn_all(index, queries, k):
    results = []
    for q in queries:
        results.append(query_knn(index, q, k))
    return results


def cmd_query(args, cfg, out):
    index = _load_index(args.index)
    qmat, qids, _ = load_descriptors(args.queries)
    k = args.k or cfg.extra["knn_k"]
    with open(out / "results.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["query", "rank", "ref", "distance", "clamped"])
        for qid, (hits, clamped) in zip(qids, _knn_all(index, qmat, k)):
            for rank, (rid, dist) in enumerate(hits, 1):
                w.writerow([qid, rank, rid, f"{dist:.9g}", int(clamped)])
    print(f"wrote top-{k} results for {len(qids)} queries to {out / 'results.csv'}")
    return EXIT_OK


def cmd_eval(args, cfg, out):
    index = _load_index(args.index)
    qmat, qids, qpos = load_descriptors(args.queries)
    r_pos = cfg.loss.r_pos
    k = max(10, top_n(0.01, len(index)))
    hits = _knn_all(index, qmat, k)
    ranked = [[rid for rid, _ in h] for h, _ in hits]
    truth = [true_matches(index, p, r_pos) for p in qpos]
    r1 = recall_at(ranked, truth, n=1)
    r10 = recall_at(ranked, truth, n=10)
    rtop = recall_at(ranked, truth, top_percent=0.01, index_size=len(index))
    scores = np.array([1.0 - h[0][1] ** 2 / 2.0 for h, _ in hits])
    correct = np.array([r[0] in t for r, t in zip(ranked, truth)])
    pr = pr_curve(scores, correct)
    with open(out / "eval_report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for name, val in (("recall@1", r1), ("recall@10", r10), ("recall@top1%", rtop), ("ap", pr.ap)):
            w.writerow([name, f"{val:.6f}"])
    with open(out / "pr_curve.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "precision", "recall"])
        w.writerows(zip(pr.thresholds, pr.precision, pr.recall))
    plots.line_plot(out / "pr_curve.svg", {"PR": (pr.recall, pr.precision)}, "precision-recall", "recall", "precision", (0, 1), (0, 1))
    summary = f"queries {len(qids)}\nrecall@1 {r1:.4f}\nrecall@10 {r10:.4f}\nrecall@top1% {rtop:.4f}\nap {pr.ap:.4f}\n"
    (out / "summary.txt").write_text(summary)
    print(summary, end="")
    return EXIT_OK


def cmd_seqmatch(args, cfg, out):
    ref, _, rpos = load_descriptors(args.reference)
    test, _, tpos = load_descriptors(args.test)
    noise = cfg.extra["descriptor_noise"]
    if noise > 0:
        rng = np.random.default_rng(np.random.SeedSequence([cfg.loss.seed, 17]))
        test = test + rng.normal(0.0, noise, size=test.shape)
    test = test / np.linalg.norm(test, axis=1, keepdims=True)
    ref = ref / np.linalg.norm(ref, axis=1, keepdims=True)
    D = difference_matrix(test, ref)
    N = local_normalize(D, cfg.extra["norm_window"])
    res = sequence_match(N, cfg.extra["seq_window"], threshold=cfg.extra["seq_threshold"])
    r_pos = cfg.loss.r_pos

    def ok(i, j):
        return j >= 0 and np.linalg.norm(rpos[j, :2] - tpos[i, :2]) <= r_pos

    seq_correct = np.array([ok(i, j) for i, j in enumerate(res.ref)])
    single = np.argmin(D, axis=1)
    single_correct = np.array([ok(i, j) for i, j in enumerate(single)])
    ap_seq = pr_curve(-res.score, seq_correct).ap
    ap_single = pr_curve(-D[np.arange(len(D)), single], single_correct).ap
    with open(out / "sequence_matches.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["test", "ref", "score", "slope", "correct"])
        for i, (j, s, v, c) in enumerate(zip(res.ref, res.score, res.slope, seq_correct)):
            w.writerow([i, int(j), f"{s:.9g}", v, int(c)])
    plots.heatmap(out / "difference.svg", D, "difference matrix", "reference", "test")
    plots.heatmap(out / "normalized.svg", N, "locally normalised", "reference", "test")
    summary = f"ap_single {ap_single:.4f}\nap_sequence {ap_seq:.4f}\n"
    (out / "summary.txt").write_text(summary)
    print(summary, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# sweep / gradcheck


def cmd_sweep(args, cfg, out):
    spec = _scenario_spec(args.dataset)
    model = load_checkpoint(args.model) if args.model else None
    scen = synth_scenario(spec)
    dts, dths = cfg.float_list("delta_t"), cfg.float_list("delta_theta")
    n = model.config.n if model else cfg.embed.n
    rows = viewpoint_sweep(model, scen, dts, dths, cfg.map, n, cfg.extra["normals_k"], cfg.loss.seed)
    write_surface(rows, out / "surface.csv")
    series = {}
    for dt in dts:
        sel = [r for r in rows if r[0] == dt]
        series[f"dt={dt:g} m"] = ([r[1] for r in sel], [r[2] for r in sel])
    plots.line_plot(out / "surface.svg", series, "recall@top1%", "rotation offset (deg)", "recall", ylim=(0, 1))
    print(f"wrote {len(rows)} surface cells to {out / 'surface.csv'}")
    return EXIT_OK


def cmd_gradcheck(args, cfg, out):
    ecfg = TINY_CONFIG
    dataset = random_tuple_dataset(cfg.loss.seed, ecfg.n)
    model = model_init(ecfg, cfg.loss.seed)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.loss.seed, 19]))
    loss_cfg = replace(cfg.loss, n_neg=min(cfg.loss.n_neg, 3))
    tup = mine_tuple(dataset, 0, rng, loss_cfg)
    report = grad_check(model, tup, loss_cfg)
    with open(out / "gradcheck.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group", "max_rel_error", "skipped"])
        for g in sorted(report.max_rel_error):
            w.writerow([g, f"{report.max_rel_error[g]:.3e}", report.skipped[g]])
            print(f"{g:16s} max rel error {report.max_rel_error[g]:.3e}  skipped {report.skipped[g]}")
    print(f"max relative error {report.worst:.3e} over {report.checked} coordinates")
    if not report.passed(1e-4):
        print("gradient check FAILED (>= 1e-4)")
        return EXIT_NUMERIC
    print("gradient check passed (< 1e-4)")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="semsphere", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="key = value file overriding module defaults")
    p.add_argument("--seed", type=int, help="overrides every seed")
    p.add_argument("--workers", type=int, default=1, help="worker processes for parallel stages")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic scenario")
    s.add_argument("spec", nargs="?", help="scenario spec file (key = value)")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("map", help="build per-place local maps")
    s.add_argument("dataset")
    s.add_argument("--no-dom", action="store_true", help="accumulate raw points instead of occupancy mapping")
    s.add_argument("--snapshots", action="store_true", help="also write occupancy snapshots")
    s.set_defaults(func=cmd_map)

    s = sub.add_parser("train", help="train the embedding network")
    s.add_argument("maps")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("embed", help="compute place descriptors")
    s.add_argument("maps")
    s.add_argument("--model", help="checkpoint manifest; omitted = flattened baseline")
    s.set_defaults(func=cmd_embed)

    s = sub.add_parser("index", help="build and validate a descriptor index")
    s.add_argument("descriptors")
    s.set_defaults(func=cmd_index)

    s = sub.add_parser("query", help="k-nearest-neighbour retrieval")
    s.add_argument("index")
    s.add_argument("queries")
    s.add_argument("-k", type=int)
    s.set_defaults(func=cmd_query)

    s = sub.add_parser("eval", help="recall, precision-recall and AP")
    s.add_argument("index")
    s.add_argument("queries")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("seqmatch", help="sequence matching over a difference matrix")
    s.add_argument("reference")
    s.add_argument("test")
    s.set_defaults(func=cmd_seqmatch)

    s = sub.add_parser("sweep", help="recall over translation and rotation offsets")
    s.add_argument("dataset")
    s.add_argument("--model", help="checkpoint manifest; omitted = flattened baseline")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("gradcheck", help="finite-difference gradient check on the tiny config")
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    out = Path(args.out)
    try:
        if args.workers < 1:
            raise InvalidConfig("--workers must be >= 1")
        cfg = RunConfig.from_file(args.config, args.seed)
        write_resolved(cfg, out, args.command, args)
        return args.func(args, cfg, out)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
