"""Command-line entry point: ``cmr <subcommand> [--config PATH] [--seed N] [--out DIR] [--threads N]``.

Artifacts live under the output directory::

    data/            gen-synthetic   manifest.json, *.tsv, visual.cmrf
    features/        featurize       entity_text.cmrf, visual.cmrf
    model/           train           params.cmrp, history.csv
    stores/          memorize        ks.cmrs, es.cmrs
    sweep/           sweep           grid.csv, best.json
    eval/            eval            metrics.json, metrics.txt
    infer/           infer           predictions.tsv
    manifests/       every command   <command>.json

Log verbosity comes from ``CMR_LOG_LEVEL`` (error, warn, info, debug).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import Dataset, FeatureBank, load_dataset
from .encoders import encode_query, load_checkpoint, params_digest, save_checkpoint
from .evaluate import Metrics, evaluate, sweep, sweep_csv
from .featurize import read_feature_file, save_feature_file
from .kg import Triple, add_reversed, strip_reversed
from .pipeline import (
    ExperimentConfig,
    build_stores,
    eval_queries,
    full_filter,
    make_bank,
    run_training,
)
from .retrieval import FULL, MODES, predict
from .stores import TRAIN_ONLY, EntityStore, KnowledgeStore, load_store, save_store
from .synthetic import generate, write_dataset

logger = logging.getLogger("cmr")

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
INVERSE_MARK = "^-1"


class MissingArtifact(RuntimeError):
    def __init__(self, path: Path, producer: str):
        super().__init__(f"missing prerequisite artifact {path} (run `cmr {producer}` first)")
        self.path = path


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """Book-keeping for one command: resolved paths, inputs consumed, outputs written."""

    def __init__(self, command: str, cfg: ExperimentConfig, threads: int):
        self.command = command
        self.cfg = cfg
        self.threads = threads
        self.out = Path(cfg.out_dir)
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        self.extra: dict = {}
        self.started = time.time()

    def path(self, *parts) -> Path:
        return self.out.joinpath(*parts)

    def require(self, path: Path, producer: str) -> Path:
        if not path.is_file():
            raise MissingArtifact(path, producer)
        self.inputs[str(path)] = sha256_file(path)
        return path

    def wrote(self, path: Path) -> None:
        self.outputs[str(path)] = sha256_file(path)

    def write_text(self, path: Path, text: str) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
        self.wrote(path)

    def finish(self) -> Path:
        manifest = {
            "command": self.command,
            "version": __version__,
            "config_hash": self.cfg.digest(),
            "config": self.cfg.to_dict(),
            "seed": self.cfg.seed,
            "threads": self.threads,
            "elapsed_s": round(time.time() - self.started, 3),
            "inputs": self.inputs,
            "outputs": self.outputs,
            **self.extra,
        }
        path = self.path("manifests", f"{self.command}.json")
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


# -- shared loaders --------------------------------------------------------


def dataset_manifest(run: Run) -> Path:
    if run.cfg.dataset:
        return Path(run.cfg.dataset)
    return run.path("data", "manifest.json")


def load_run_dataset(run: Run) -> Dataset:
    manifest = run.require(dataset_manifest(run), "gen-synthetic")
    spec = json.loads(manifest.read_text(encoding="utf-8"))
    for key in ("train", "valid", "test", "entity_descriptions", "relation_descriptions", "visual_features"):
        if spec.get(key):
            run.require(manifest.parent / spec[key], "gen-synthetic")
    return load_dataset(manifest, run.cfg.featurizer.max_chars)


def load_run_bank(run: Run, dataset: Dataset) -> FeatureBank:
    """Feature bank backed by the featurize artifacts."""
    bank = make_bank(dataset, run.cfg)
    names = dataset.entities.names
    for attr in ("entity_text", "visual"):
        path = run.require(run.path("features", f"{attr}.cmrf"), "featurize")
        stored_names, matrix = read_feature_file(path)
        if stored_names != names:
            raise ValueError(f"{path}: entity list does not match the dataset; rerun featurize")
        if matrix.shape[1] != getattr(bank, attr).shape[1]:
            raise ValueError(f"{path}: dimension {matrix.shape[1]} does not match the config; rerun featurize")
        setattr(bank, attr, matrix.astype(np.float64))
    return bank


def load_params(run: Run):
    return load_checkpoint(run.require(run.path("model", "params.cmrp"), "train"))


def load_stores(run: Run) -> tuple[KnowledgeStore, EntityStore]:
    d = run.cfg.hyper.embed_dim
    ks = load_store(run.require(run.path("stores", "ks.cmrs"), "memorize"), d)
    es = load_store(run.require(run.path("stores", "es.cmrs"), "memorize"), d)
    if not isinstance(ks, KnowledgeStore) or not isinstance(es, EntityStore):
        raise ValueError("store files hold the wrong store kinds")
    return ks, es


def swept_inference(run: Run):
    """Inference config with the swept (k, lambda) when a sweep result exists."""
    best = run.path("sweep", "best.json")
    if not best.is_file():
        logger.info("no sweep result; using configured k=%d lambda=%g", run.cfg.inference.k, run.cfg.inference.lam)
        return run.cfg.inference
    run.require(best, "sweep")
    data = json.loads(best.read_text(encoding="utf-8"))
    return dataclasses.replace(run.cfg.inference, k=int(data["k"]), lam=float(data["lam"]))


# -- commands --------------------------------------------------------------


def cmd_gen_synthetic(run: Run, args) -> None:
    kg = generate(run.cfg.synthetic, run.cfg.seed)
    manifest = write_dataset(kg, run.path("data"), run.cfg.synthetic, run.cfg.seed)
    for f in sorted(manifest.parent.iterdir()):
        run.wrote(f)
    run.extra["counts"] = {"entities": len(kg.names), "unseen": len(kg.unseen),
                           "train": len(kg.train), "valid": len(kg.valid), "test": len(kg.test)}
    print(f"wrote {manifest}")


def cmd_featurize(run: Run, args) -> None:
    dataset = load_run_dataset(run)
    bank = make_bank(dataset, run.cfg)
    names = dataset.entities.names
    for attr in ("entity_text", "visual"):
        path = run.path("features", f"{attr}.cmrf")
        path.parent.mkdir(parents=True, exist_ok=True)
        save_feature_file(path, names, getattr(bank, attr))
        run.wrote(path)
    print(f"featurized {len(names)} entities into {run.path('features')}")


def cmd_train(run: Run, args) -> None:
    dataset = load_run_dataset(run)
    bank = load_run_bank(run, dataset)
    result = run_training(dataset, bank, run.cfg)
    ckpt = run.path("model", "params.cmrp")
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, result.params)
    run.wrote(ckpt)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "L_FC", "L_AC", "L_FC_rev", "L_AC_rev", "valid_Hits@1", "valid_MRR"])
    for rec in result.history:
        writer.writerow([rec.epoch, repr(rec.l_fc), repr(rec.l_ac), repr(rec.l_fc_rev), repr(rec.l_ac_rev),
                         repr(rec.valid_hits1), repr(rec.valid_mrr)])
    run.write_text(run.path("model", "history.csv"), buf.getvalue())
    run.extra.update(best_epoch=result.best_epoch, epochs_run=len(result.history),
                     stopped_early=result.stopped_early, diverged=result.diverged,
                     params_digest=params_digest(result.params))
    print(f"trained {len(result.history)} epochs (best {result.best_epoch}); wrote {ckpt}")
    if result.diverged:
        raise RuntimeError("training diverged; kept the last good parameters")


def cmd_memorize(run: Run, args) -> None:
    dataset = load_run_dataset(run)
    bank = load_run_bank(run, dataset)
    params = load_params(run)
    ks, es = build_stores(params, dataset, bank, run.cfg.hyper, run.cfg.ks_scope)
    for name, store in (("ks", ks), ("es", es)):
        path = run.path("stores", f"{name}.cmrs")
        path.parent.mkdir(parents=True, exist_ok=True)
        save_store(path, store)
        run.wrote(path)
    run.extra.update(scope=run.cfg.ks_scope, ks_records=len(ks), es_records=len(es),
                     params_digest=params_digest(params))
    print(f"memorized {len(ks)} queries and {len(es)} entities ({run.cfg.ks_scope})")


def cmd_sweep(run: Run, args) -> None:
    dataset = load_run_dataset(run)
    bank = load_run_bank(run, dataset)
    params = load_params(run)
    # validation is never memorized while sweeping
    ks, es = build_stores(params, dataset, bank, run.cfg.hyper, TRAIN_ONLY)
    valid = add_reversed(strip_reversed(dataset.split.valid), dataset.num_relations)
    if not valid:
        raise ValueError("dataset has no validation triples to sweep on")
    (k, lam), rows = sweep(ks, es, params, bank, valid, run.cfg.k_grid, run.cfg.lam_grid,
                           full_filter(dataset), run.cfg.inference, workers=run.threads)
    run.write_text(run.path("sweep", "grid.csv"), sweep_csv(rows))
    best = {"k": k, "lam": lam, "seed": run.cfg.seed, "config_hash": run.cfg.digest()}
    run.write_text(run.path("sweep", "best.json"), json.dumps(best, indent=2, sort_keys=True) + "\n")
    run.extra.update(best_k=k, best_lam=lam)
    print(f"best k={k} lambda={lam}")


def cmd_eval(run: Run, args) -> None:
    dataset = load_run_dataset(run)
    bank = load_run_bank(run, dataset)
    params = load_params(run)
    ks, es = load_stores(run)
    inference = swept_inference(run)
    queries = eval_queries(dataset)
    index = full_filter(dataset)
    modes = [args.mode] if args.mode else list(MODES)
    results: dict[str, Metrics] = {}
    for mode in modes:
        results[mode], _ = evaluate(ks, es, params, bank, queries, inference, index, mode, workers=run.threads)
    report = {
        "seed": run.cfg.seed,
        "config_hash": run.cfg.digest(),
        "k": inference.k,
        "lam": inference.lam,
        "scope": run.cfg.ks_scope,
        "metrics": {m: r.to_dict() for m, r in results.items()},
    }
    run.write_text(run.path("eval", "metrics.json"), json.dumps(report, indent=2, sort_keys=True) + "\n")
    lines = [f"{'':<12}{'MRR':>8}{'Hits@1':>8}{'Hits@3':>8}{'Hits@10':>8}"]
    lines += [r.table(m).splitlines()[1] for m, r in results.items()]
    table = "\n".join(lines) + "\n"
    run.write_text(run.path("eval", "metrics.txt"), table)
    print(table, end="")


def parse_queries(path: Path, dataset: Dataset) -> list[Triple]:
    """``head<TAB>relation`` lines; a relation ending in ``^-1`` asks for heads."""
    out = []
    n = dataset.num_relations
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) < 2:
            raise ValueError(f"{path}:{lineno}: expected head<TAB>relation")
        head, rel = parts[0], parts[1]
        inverse = rel.endswith(INVERSE_MARK)
        if inverse:
            rel = rel[: -len(INVERSE_MARK)]
        try:
            h, r = dataset.entities.id(head), dataset.relations.id(rel)
        except KeyError as exc:
            raise ValueError(f"{path}:{lineno}: unknown name {exc}") from None
        out.append(Triple(h, r + n if inverse else r, h, inverse))
    return out


def cmd_infer(run: Run, args) -> None:
    dataset = load_run_dataset(run)
    bank = load_run_bank(run, dataset)
    params = load_params(run)
    ks, es = load_stores(run)
    inference = swept_inference(run)
    if args.queries:
        queries = parse_queries(run.require(Path(args.queries), "infer --queries"), dataset)
    else:
        seen, queries = set(), []
        for t in eval_queries(dataset):
            if (t.head, t.relation) not in seen:
                seen.add((t.head, t.relation))
                queries.append(t)
    names = dataset.entities.names
    rel_names = dataset.relations.names
    n = dataset.num_relations
    q = encode_query(params, bank.queries(queries)) if queries else np.zeros((0, ks.dim))
    lines = ["head\trelation\trank\tentity\tprob"]
    for i, t in enumerate(queries):
        dist = predict(ks, es, q[i], inference, exclude_key=(t.head, t.relation), mode=args.mode or FULL)
        order = np.lexsort((np.arange(len(dist)), -dist))[: args.top]
        rel = rel_names[t.relation - n] + INVERSE_MARK if t.relation >= n else rel_names[t.relation]
        for rank, e in enumerate(order, 1):
            lines.append(f"{names[t.head]}\t{rel}\t{rank}\t{names[e]}\t{dist[e]:.6g}")
    run.write_text(run.path("infer", "predictions.tsv"), "\n".join(lines) + "\n")
    print(f"wrote top-{args.top} predictions for {len(queries)} queries")


COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic,
    "featurize": cmd_featurize,
    "train": cmd_train,
    "memorize": cmd_memorize,
    "sweep": cmd_sweep,
    "eval": cmd_eval,
    "infer": cmd_infer,
}


def _add_globals(p: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", type=Path, default=default, help="experiment config JSON")
    p.add_argument("--seed", type=int, default=default, help="seed for every seeded component")
    p.add_argument("--out", type=Path, default=default, help="output directory")
    p.add_argument("--threads", type=int, default=argparse.SUPPRESS if suppress else 1,
                   help="worker threads for ranking")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cmr", description="Retrieval-augmented inductive KG completion.")
    parser.add_argument("--version", action="version", version=__version__)
    _add_globals(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        _add_globals(p, suppress=True)
        if name in ("eval", "infer"):
            p.add_argument("--mode", choices=MODES, default=None,
                           help="prediction mode (eval: all modes when omitted; infer: full)")
        if name == "infer":
            p.add_argument("--queries", default=None, help="TSV of head<TAB>relation; default: test queries")
            p.add_argument("--top", type=int, default=10, help="predictions per query")
    return parser


def configure_logging() -> None:
    level = os.environ.get("CMR_LOG_LEVEL", "warn").lower()
    if level not in LOG_LEVELS:
        raise ValueError(f"CMR_LOG_LEVEL must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s", force=True)


def resolve_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out is not None:
        cfg = dataclasses.replace(cfg, out_dir=str(args.out))
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        configure_logging()
        if args.threads < 1:
            raise ValueError("--threads must be >= 1")
        cfg = resolve_config(args)
        run = Run(args.command, cfg, args.threads)
        COMMANDS[args.command](run, args)
        run.finish()
    except MissingArtifact as exc:
        print(f"cmr {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, OSError, RuntimeError) as exc:
        print(f"cmr {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
