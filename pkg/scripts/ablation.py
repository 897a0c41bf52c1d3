"""Ablation table on the synthetic inductive KG across seeds.

For every seed: generate data, train, sweep (k, lambda) on validation with a
train-only knowledge store, then evaluate full / es_only / ks_only on test.

    python scripts/ablation.py --seeds 0 1 2 --out runs/ablation
"""

import argparse
import dataclasses
import json
import time
from pathlib import Path

import numpy as np

from cmr.dataset import load_dataset
from cmr.evaluate import query_pair_cosines, sweep
from cmr.kg import add_reversed, strip_reversed
from cmr.pipeline import (
    ExperimentConfig,
    build_stores,
    eval_queries,
    evaluate_test,
    full_filter,
    make_bank,
    run_training,
)
from cmr.retrieval import ES_ONLY, FULL, KS_ONLY
from cmr.stores import TRAIN_ONLY
from cmr.synthetic import generate, write_dataset

LABELS = {FULL: "CMR", ES_ONLY: "w/o p_KS", KS_ONLY: "w/o p_ES"}


def one_seed(cfg: ExperimentConfig, out: Path) -> dict:
    start = time.perf_counter()
    manifest = write_dataset(generate(cfg.synthetic, cfg.seed), out / "data", cfg.synthetic, cfg.seed)
    dataset = load_dataset(manifest)
    bank = make_bank(dataset, cfg)
    result = run_training(dataset, bank, cfg)
    params = result.params
    ks, es = build_stores(params, dataset, bank, cfg.hyper, TRAIN_ONLY)
    valid = add_reversed(strip_reversed(dataset.split.valid), dataset.num_relations)
    (k, lam), _ = sweep(ks, es, params, bank, valid, cfg.k_grid, cfg.lam_grid, full_filter(dataset), cfg.inference)
    inference = dataclasses.replace(cfg.inference, k=k, lam=lam)
    stores = build_stores(params, dataset, bank, cfg.hyper, cfg.ks_scope)
    metrics = {mode: evaluate_test(params, dataset, bank, cfg, inference, mode, stores).to_dict()
               for mode in (FULL, ES_ONLY, KS_ONLY)}
    shared, cross = query_pair_cosines(params, bank, eval_queries(dataset))
    return {
        "seed": cfg.seed,
        "k": k,
        "lam": lam,
        "epochs": len(result.history),
        "metrics": metrics,
        "cos_shared": shared,
        "cos_cross": cross,
        "seconds": time.perf_counter() - start,
    }


def table(rows: list[dict]) -> str:
    lines = [f"{'':<10}{'MRR':>14}{'Hits@1':>14}{'Hits@3':>14}{'Hits@10':>14}"]
    for mode, label in LABELS.items():
        cells = []
        for key in ("mrr", "hits1", "hits3", "hits10"):
            vals = np.array([r["metrics"][mode][key] for r in rows])
            cells.append(f"{vals.mean():.3f}±{vals.std():.3f}")
        lines.append(f"{label:<10}" + "".join(f"{c:>14}" for c in cells))
    return "\n".join(lines)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path, default=None)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", type=Path, default=Path("runs/ablation"))
    args = ap.parse_args()
    base = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    rows = []
    for seed in args.seeds:
        row = one_seed(base.with_seed(seed), args.out / f"seed{seed}")
        rows.append(row)
        m = row["metrics"]
        print(f"seed {seed}: k={row['k']} lambda={row['lam']} epochs={row['epochs']} "
              f"MRR full/es/ks {m[FULL]['mrr']:.3f}/{m[ES_ONLY]['mrr']:.3f}/{m[KS_ONLY]['mrr']:.3f} "
              f"cos shared/cross {row['cos_shared']:.3f}/{row['cos_cross']:.3f} ({row['seconds']:.1f}s)")
    print()
    print(table(rows))
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "ablation.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
