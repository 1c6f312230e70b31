"""Command-line entry point: synth, graph, train, extract, probe, explain, ingest.

Exit codes: 0 ok, 2 config or validation error, 3 I/O or format error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from . import __version__, formats
from . import numerics as nx
from . import probe as probe_mod
from .config import RunConfig
from .explain import activation_graph, render_map
from .patch_graph import Volume
from .pipeline import FrozenModel, build_graphs
from .synthgen import generate_cohort, read_cohort, write_cohort
from .trainer import Trainer, TrainingSet

log = logging.getLogger("anatgraph")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
SEED_ENV = "ANATGRAPH_SEED"
SIDECAR = "model.json"
HU_WINDOW = (-1024.0, 240.0)

PROBE_RESULT_SCHEMA = {
    "type": "object",
    "required": ["task", "metric", "k", "seed", "fold_values", "mean", "std", "folds", "model"],
    "properties": {
        "task": {"enum": ["regression", "classification"]},
        "metric": {"enum": ["r2", "accuracy"]},
        "k": {"type": "integer", "minimum": 2},
        "seed": {"type": "integer"},
        "fold_values": {"type": "array", "items": {"type": "number"}},
        "mean": {"type": "number"},
        "std": {"type": "number", "minimum": 0},
        "folds": {"type": "array"},
        "model": {
            "type": "object",
            "required": ["coef", "intercept"],
            "properties": {"coef": {"type": "array"}, "intercept": {}},
        },
    },
}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# -- config -------------------------------------------------------------


def _seed(args) -> int | None:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env is None:
        return None
    try:
        return int(env)
    except ValueError:
        raise CliError(EXIT_CONFIG, f"{SEED_ENV}={env!r} is not an integer") from None


def _validation_message(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        parts.append(f"{loc}: {err['msg']}")
    return "invalid config: " + "; ".join(parts)


def load_config(path=None, seed: int | None = None, **overrides) -> RunConfig:
    """JSON file, then flag overrides (dotted keys), then the seed."""
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if seed is not None:
        overrides["seed"] = seed
    try:
        return RunConfig.load(path, **overrides)
    except ValidationError as exc:
        raise CliError(EXIT_CONFIG, _validation_message(exc)) from None
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_CONFIG, f"config {path}: {exc}") from None


def _write_sidecar(out_dir: Path, cfg: RunConfig, cohort_hash: str | None) -> None:
    meta = {
        "version": __version__,
        "config_hash": cfg.hash(),
        "cohort_config_hash": cohort_hash,
        "config": cfg.model_dump(mode="json"),
    }
    (out_dir / SIDECAR).write_text(json.dumps(meta, indent=1))


def _read_sidecar(checkpoint: Path, config_path=None) -> RunConfig:
    if config_path is not None:
        return load_config(config_path)
    side = checkpoint.parent / SIDECAR
    if not side.exists():
        raise CliError(EXIT_IO, f"{side} not found; pass --config")
    try:
        return RunConfig.model_validate(json.loads(side.read_text())["config"])
    except ValidationError as exc:
        raise CliError(EXIT_CONFIG, _validation_message(exc)) from None


# -- shared loaders -----------------------------------------------------


def _cohort(directory):
    root = Path(directory)
    if not (root / "manifest.json").exists():
        raise CliError(EXIT_IO, f"no manifest.json in {root}")
    return read_cohort(root)


def _training_set(cohort, workers: int) -> tuple[TrainingSet, list]:
    graphs = build_graphs(cohort, workers=workers)
    return TrainingSet.from_graphs(graphs, cohort.grid.normalized_centers()), graphs


def _check_grid(cfg: RunConfig, cohort) -> None:
    if cfg.grid.patch_size != cohort.grid_config.patch_size:
        raise CliError(
            EXIT_CONFIG,
            f"grid.patch_size {cfg.grid.patch_size} differs from the cohort's {cohort.grid_config.patch_size}",
        )


def _trainer(cfg: RunConfig, data: TrainingSet) -> Trainer:
    return Trainer(cfg.model, cfg.train, cfg.augment, data.patch_size, data.n_regions, cfg.seed)


def _frozen(checkpoint, cfg: RunConfig, data: TrainingSet) -> FrozenModel:
    trainer = _trainer(cfg, data)
    try:
        trainer.load(checkpoint)
    except (nx.ShapeError, KeyError) as exc:
        raise CliError(EXIT_CONFIG, f"checkpoint does not match config: {exc}") from None
    return FrozenModel.from_trainer(trainer)


def _read_table(path) -> tuple[list[str], list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CliError(EXIT_IO, f"{path} is empty")
    header, body = rows[0], rows[1:]
    return header, [r[0] for r in body], [r[1:] for r in body]


# -- commands -----------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = load_config(args.config, _seed(args), **{"data.n_subjects": args.subjects})
    cohort = generate_cohort(cfg.data, cfg.grid, cfg.seed)
    manifest = write_cohort(cohort, args.out)
    log.info("wrote %d subjects to %s", len(manifest["subjects"]), args.out)
    return EXIT_OK


def cmd_graph(args) -> int:
    cohort = _cohort(args.cohort)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for g in build_graphs(cohort, args.rho_mm, workers=args.workers):
        g.write_json(out / f"{g.subject_id}.graph.json")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config, _seed(args), **{"train.lr": args.lr})
    cohort = _cohort(args.cohort)
    _check_grid(cfg, cohort)
    data, _ = _training_set(cohort, args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trainer = _trainer(cfg, data)
    ckpt = out / "model.ckpt"
    if args.resume:
        if not ckpt.exists():
            raise CliError(EXIT_IO, f"--resume: {ckpt} not found")
        trainer.load(ckpt)
    elif (out / "metrics.jsonl").exists():
        (out / "metrics.jsonl").unlink()
    _write_sidecar(out, cfg, json.loads((Path(args.cohort) / "manifest.json").read_text()).get("config_hash"))
    if args.init_only:
        trainer.save(ckpt)
        return EXIT_OK
    stop = None if args.steps is None else trainer.outer_step + args.steps
    trainer.run(data, out, stop_after=stop)
    return EXIT_OK


def cmd_extract(args) -> int:
    checkpoint = Path(args.checkpoint)
    cfg = _read_sidecar(checkpoint, args.config)
    cohort = _cohort(args.cohort)
    _check_grid(cfg, cohort)
    data, _ = _training_set(cohort, args.workers)
    pooled, nodes = _frozen(checkpoint, cfg, data).extract(data)
    f = pooled.shape[1]
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id"] + [f"f{i}" for i in range(f)])
        for sid, row in zip(data.subject_ids, pooled):
            w.writerow([sid] + [repr(float(v)) for v in row])
    if args.per_node:
        with open(args.per_node, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["subject_id", "node"] + [f"f{i}" for i in range(f)])
            for sid, h in zip(data.subject_ids, nodes):
                for j, row in enumerate(h):
                    w.writerow([sid, j] + [repr(float(v)) for v in row])
    return EXIT_OK


def _aligned(features_csv, labels_csv):
    _, ids, feats = _read_table(features_csv)
    _, label_ids, targets = _read_table(labels_csv)
    by_id = dict(zip(label_ids, (t[0] for t in targets)))
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise CliError(EXIT_CONFIG, f"labels missing for {len(missing)} subjects, e.g. {missing[0]}")
    x = np.array(feats, dtype=np.float64)
    y = np.array([float(by_id[i]) for i in ids])
    return ids, x, y


def cmd_probe(args) -> int:
    cfg = load_config(args.config, _seed(args))
    k = args.k if args.k is not None else cfg.probe.k
    _, x, y = _aligned(args.features, args.labels)
    try:
        if args.task == "regression":
            lam = cfg.probe.ridge_lambda if args.lam is None else args.lam
            res = probe_mod.probe_regression(x, y, k, cfg.seed, lam)
            final = probe_mod.fit_ridge(x, y, lam)
            model = {"coef": final.coef.tolist(), "intercept": float(final.intercept)}
        else:
            lam = cfg.probe.logistic_lambda if args.lam is None else args.lam
            labels = y.astype(int)
            if not np.array_equal(labels, y):
                raise CliError(EXIT_CONFIG, "classification labels must be integers")
            res = probe_mod.probe_classification(x, labels, k, cfg.seed, lam, cfg.probe.max_iter, cfg.probe.tol)
            final = probe_mod.fit_logistic_model(x, labels, int(labels.max()) + 1, lam, cfg.probe.max_iter, cfg.probe.tol)
            model = {"coef": final.coef.tolist(), "intercept": final.intercept.tolist()}
    except probe_mod.ProbeError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    out = {"task": args.task, "k": k, "seed": cfg.seed, **res.to_json(), "model": model}
    out["config_hash"] = cfg.hash()
    Path(args.out).write_text(json.dumps(out, indent=1))
    log.info("%s %s = %.4f +- %.4f", args.task, res.metric, res.mean, res.std)
    return EXIT_OK


def probe_weights(blob: dict, target: int | None = None) -> tuple[np.ndarray, float, str]:
    """``(W, beta, target name)`` of the scalar score to explain."""
    model = blob["model"]
    coef = np.asarray(model["coef"], dtype=np.float64)
    if blob.get("task") == "regression":
        return coef, float(model["intercept"]), "prediction"
    logistic = probe_mod.LogisticModel(coef, np.asarray(model["intercept"], dtype=np.float64))
    try:
        w, b = logistic.logit_weights(target)
    except probe_mod.ProbeError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    name = "logit" if logistic.n_classes == 2 and target in (None, 1) else f"class_{target}"
    return w, b, name


def _probe_score(blob: dict, pooled: np.ndarray, target: int | None) -> float:
    """The probe's own output for one subject, computed from the pooled features."""
    model = blob["model"]
    coef = np.asarray(model["coef"], dtype=np.float64)
    if blob.get("task") == "regression":
        return float(pooled @ coef + model["intercept"])
    d = probe_mod.LogisticModel(coef, np.asarray(model["intercept"], dtype=np.float64)).decision(pooled[None])[0]
    if len(d) == 2 and target in (None, 1):
        return float(d[1] - d[0])
    return float(d[target])


def cmd_explain(args) -> int:
    checkpoint = Path(args.checkpoint)
    cfg = _read_sidecar(checkpoint, args.config)
    cohort = _cohort(args.cohort)
    ids = [s.subject_id for s in cohort.subjects]
    if args.subject not in ids:
        raise CliError(EXIT_CONFIG, f"subject {args.subject!r} not in cohort")
    blob = json.loads(Path(args.probe).read_text())
    w, beta, target = probe_weights(blob, args.target)
    if w.shape[0] != cfg.model.feature_dim:
        raise CliError(EXIT_CONFIG, f"probe has {w.shape[0]} weights, model has F = {cfg.model.feature_dim}")
    data, graphs = _training_set(cohort, args.workers)
    model = _frozen(checkpoint, cfg, data)
    i = ids.index(args.subject)
    nodes = model.node_features(data.patches[i], data.centers_norm, data.a_norm[i]).numpy().astype(np.float64)
    graph = activation_graph(w, beta, nodes, args.subject, target)
    out = graph.export(_probe_score(blob, nodes.mean(axis=0), args.target))
    out["config_hash"] = cfg.hash()
    Path(args.out).write_text(json.dumps(out, indent=1))
    log.info("logit_check %.3g", out["logit_check"])
    if args.render:
        vol = cohort.subjects[i].volume
        heat = render_map(graph, graphs[i].centers_mm, cohort.grid.patch_size, vol.dims, vol.spacing)
        heat.save(args.render)
    return EXIT_OK


def ingest_real_volume(path, raw_hu: bool = False) -> Volume:
    """Read an RVOL; with ``raw_hu`` clamp to the HU window and map it onto [-1, 1]."""
    vol = Volume.load(path)
    if not raw_hu:
        return vol
    lo, hi = HU_WINDOW
    v = np.clip(vol.voxels.astype(np.float64), lo, hi)
    return Volume(((v - lo) / (hi - lo) * 2.0 - 1.0).astype(np.float32), vol.spacing)


def cmd_ingest(args) -> int:
    ingest_real_volume(args.input, args.hu).save(args.out)
    return EXIT_OK


# -- parser -------------------------------------------------------------


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="anatgraph", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True, workers=False):
        p.add_argument("--config", help="JSON run config; flags override it")
        if seed:
            p.add_argument("--seed", type=int, help=f"overrides ${SEED_ENV} and the config seed")
        if workers:
            p.add_argument("--workers", type=_positive, default=os.cpu_count() or 1)

    p = sub.add_parser("synth", help="generate a synthetic cohort")
    p.add_argument("out")
    p.add_argument("--subjects", type=_positive)
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("graph", help="export per-subject patch graphs as JSON")
    p.add_argument("cohort")
    p.add_argument("out")
    p.add_argument("--rho-mm", type=float)
    p.add_argument("--workers", type=_positive, default=os.cpu_count() or 1)
    p.set_defaults(func=cmd_graph)

    p = sub.add_parser("train", help="interleaved contrastive training")
    p.add_argument("cohort")
    p.add_argument("out")
    p.add_argument("--steps", type=int, help="outer steps to run now (schedule length is train.t_max)")
    p.add_argument("--lr", type=float)
    p.add_argument("--init-only", action="store_true", help="write the initial checkpoint and stop")
    p.add_argument("--resume", action="store_true", help="continue from OUT/model.ckpt")
    common(p, workers=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract", help="frozen pooled features to CSV")
    p.add_argument("checkpoint")
    p.add_argument("cohort")
    p.add_argument("out")
    p.add_argument("--per-node", help="also write per-node features here")
    common(p, seed=False, workers=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("probe", help="k-fold linear probe on a features CSV")
    p.add_argument("features")
    p.add_argument("labels")
    p.add_argument("out")
    p.add_argument("--task", choices=["regression", "classification"], default="classification")
    p.add_argument("-k", type=int)
    p.add_argument("--lam", type=float)
    common(p)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("explain", help="class activation graph for one subject")
    p.add_argument("checkpoint")
    p.add_argument("cohort")
    p.add_argument("probe")
    p.add_argument("out")
    p.add_argument("--subject", required=True)
    p.add_argument("--target", type=int, help="class to explain for multiclass probes")
    p.add_argument("--render", help="write a heat map RVOL here")
    common(p, seed=False, workers=True)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("ingest", help="rewrite an RVOL, optionally windowing raw HU to [-1, 1]")
    p.add_argument("input")
    p.add_argument("out")
    p.add_argument("--hu", action="store_true")
    p.set_defaults(func=cmd_ingest)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"anatgraph: {exc}", file=sys.stderr)
        return exc.code
    except ValidationError as exc:
        print(f"anatgraph: {_validation_message(exc)}", file=sys.stderr)
        return EXIT_CONFIG
    except nx.NonFiniteError as exc:
        print(f"anatgraph: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (formats.FormatError, OSError) as exc:
        print(f"anatgraph: {exc}", file=sys.stderr)
        return EXIT_IO
    except (nx.ShapeError, probe_mod.ProbeError) as exc:
        print(f"anatgraph: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
