"""Command-line entry point: data generation, training, evaluation, ablation, analysis, gradcheck."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import data as D
from .analysis import similarity_histogram
from .config import ExperimentConfig, load_config
from .harness import gradcheck_table, run_ablation, run_gradcheck
from .trainer import evaluate, load_state, train

logger = logging.getLogger("mccl")


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}")


def _config(path: str | None) -> ExperimentConfig:
    return load_config(path) if path else ExperimentConfig()


def cmd_gen_data(args) -> int:
    spec = D.DatasetSpec.from_dict(json.loads(Path(args.spec).read_text()))
    out = D.save_dataset(D.build_dataset(spec), args.out)
    print(json.dumps({"out": str(out), "n_train": spec.n_samples, "n_val": spec.n_val}))
    return 0


def cmd_train(args) -> int:
    cfg = _config(args.config)
    dataset = D.load_dataset(args.data) if args.data else None
    result = train(cfg, dataset, args.seed, args.out)
    print(json.dumps({"out": args.out, "seed": result.seed, "val_mIoU": result.final_miou}))
    return 0


def cmd_eval(args) -> int:
    state, cfg, header = load_state(args.ckpt)
    ds = D.load_dataset(args.data)
    images, labels = ds.val() if args.split == "val" else ds.train()
    score = evaluate(state, images, labels, cfg.num_classes)
    print(json.dumps({"ckpt": args.ckpt, "epoch": header["epoch"], "split": args.split, "mIoU": score}))
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args.config)
    seeds = args.seeds if args.seeds else list(cfg.seeds)
    dataset = D.load_dataset(args.data) if args.data else None
    t0 = time.perf_counter()
    report = run_ablation(cfg, seeds, args.out, workers=args.workers, dataset=dataset)
    sys.stdout.write(report.summary_csv())
    logger.info("ablation finished in %.1fs\n%s", time.perf_counter() - t0, report.table())
    return 0 if all(r["status"] == "ok" for r in report.rows) else 1


def cmd_analyze(args) -> int:
    state, cfg, _ = load_state(args.ckpt)
    images, _ = D.load_dataset(args.data).val()
    hist = similarity_histogram(state.enc, state.dec, images, bins=args.bins, seed=args.seed)
    text = hist.csv_text()
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _config(args.config)
    t0 = time.perf_counter()
    rows = run_gradcheck(cfg, seed=args.seed)
    print("term,max_rel_error,passed")
    for r in rows:
        print(f"{r.term},{r.max_rel_error:.6e},{int(r.passed)}")
    logger.info("gradcheck took %.1fs\n%s", time.perf_counter() - t0, gradcheck_table(rows))
    return 0 if all(r.passed for r in rows) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mccl", description="Multi-constraint consistency learning, desk scale")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    p.add_argument("--spec", required=True, help="dataset spec JSON")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--config", help="experiment config JSON (defaults if omitted)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="defaults to the first config seed")
    p.add_argument("--data", help="dataset directory from gen-data; generated from the config if omitted")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="mIoU of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("val", "train"), default="val")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="IP/IF/FP ablation over seeds")
    p.add_argument("--config")
    p.add_argument("--seeds", type=_seeds, default=None, help="e.g. 0,1,2")
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--data")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("analyze", help="similarity vs prediction agreement histogram (CSV)")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--seed", type=int, default=0, help="seed for the weak/strong view pairs")
    p.add_argument("--out", help="also write the CSV here")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss term")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
