"""Command-line entry point: ``ctreport <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import tensor as T
from .checks import SUITE, run_gradchecks
from .cmke import HashedBagOfWords, ReportBank, VolumeQueryEmbedder, retrieve_topk
from .config import RunConfig
from .data import DataError, SyntheticSpec, generate_synthetic, load_dataset, read_volume, split_dataset
from .extractor import ConfigError
from .kan import KANStack, MLPLayer, SplineGrid, kan_param_count, mlp_param_count
from .model import ABLATIONS
from .tensor import ContractError, DimensionError, NonFiniteError
from .text import build_vocab, evaluate
from .train import (Trainer, build_model, format_table, load_checkpoint, model_from_checkpoint, run_ablation,
                    save_checkpoint, topk_sweep)

log = logging.getLogger("ctreport")


def _ints(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'") from None


def exact_line_fit(xs, ys):
    """Line through the first and last points in exact rationals, plus the largest deviation from it."""
    if len(xs) < 2:
        return Fraction(0), Fraction(ys[0]), Fraction(0)
    slope = Fraction(ys[-1] - ys[0], xs[-1] - xs[0])
    intercept = ys[0] - slope * xs[0]
    return slope, intercept, max(abs(y - (slope * x + intercept)) for x, y in zip(xs, ys))


def _write_json(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_bank(path) -> ReportBank | None:
    return ReportBank.load(path) if path else None


def _vocab(samples, bank: ReportBank | None, min_count: int):
    corpus = [s.report for s in samples] + (list(bank.reports) if bank is not None else [])
    return build_vocab(corpus, min_count)


def _dataset(args, cfg: RunConfig):
    samples = load_dataset(args.manifest)
    if getattr(args, "split", False):
        return split_dataset(samples, cfg.run["train_fraction"], cfg.train.seed)
    return samples, samples


# -- commands ------------------------------------------------------------------------------------

def cmd_synth(args, cfg: RunConfig) -> int:
    spec = SyntheticSpec(tuple(cfg.model.volume_dims), cfg.model.patch)
    n = args.n_pairs if args.n_pairs is not None else cfg.run["n_pairs"]
    path = generate_synthetic(args.out, n, cfg.train.seed, spec)
    print(f"wrote {n} pairs to {path}")
    return 0


def cmd_bank(args, cfg: RunConfig) -> int:
    samples = load_dataset(args.manifest)
    bank = ReportBank.build([s.id for s in samples], [s.report for s in samples],
                            HashedBagOfWords(cfg.model.knowledge_dim))
    bank.save(args.out)
    print(f"wrote bank of {len(bank)} reports (D_e={bank.dim}) to {args.out}")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    train_set, _ = _dataset(args, cfg)
    bank = _load_bank(args.bank)
    ablation = cfg.ablation(args.ablation)
    vocab = _vocab(train_set, bank, cfg.run["vocab_min_count"])
    model = build_model(vocab, cfg.model, ablation, cfg.train, bank)
    trainer = Trainer(model, vocab, train_set, cfg.train)
    if args.resume:
        trainer.restore(load_checkpoint(args.resume))
    start = trainer.epoch
    trainer.fit(target_nll=cfg.run["target_nll"])
    for epoch, loss in enumerate(trainer.log.epoch_losses[start:], start + 1):
        print(json.dumps({"epoch": epoch, "loss": loss}))
    print(json.dumps({"final_nll": trainer.log.final_nll}))
    save_checkpoint(args.out, trainer.checkpoint())
    return 0


def cmd_generate(args, cfg: RunConfig) -> int:
    model, vocab = model_from_checkpoint(load_checkpoint(args.checkpoint), _load_bank(args.bank))
    ids = model.generate(read_volume(args.volume), cfg.decode)
    text = vocab.decode(ids)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def cmd_retrieve(args, cfg: RunConfig) -> int:
    bank = ReportBank.load(args.bank)
    volume = read_volume(args.volume)
    embedder = VolumeQueryEmbedder(cfg.model.patch, cfg.model.patch_config.token_count(volume.shape), bank.dim,
                                   cfg.train.seed)
    k = args.k if args.k is not None else cfg.model.top_k
    result = retrieve_topk(embedder(volume), bank, k)
    rows = [{"rank": r + 1, "id": bank.ids[i], "similarity": float(s), "report": bank.reports[i]}
            for r, (i, s) in enumerate(zip(result.indices, result.similarities))]
    for row in rows:
        print(f"{row['rank']:>4}  {row['similarity']:+.4f}  {row['id']}  {row['report']}")
    if args.out:
        _write_json(args.out, rows)
    return 0


def _read_lines(path) -> list[str]:
    return [line.rstrip("\n") for line in Path(path).read_text(encoding="utf-8").splitlines()]


def cmd_evaluate(args, cfg: RunConfig) -> int:
    preds, refs = _read_lines(args.predictions), _read_lines(args.references)
    if len(preds) != len(refs):
        raise ContractError(f"{len(preds)} predictions vs {len(refs)} references")
    payload = evaluate(preds, refs).to_dict()
    print(json.dumps(payload, sort_keys=True))
    if args.out:
        _write_json(args.out, payload)
    return 0


def cmd_ablate(args, cfg: RunConfig) -> int:
    train_set, eval_set = _dataset(args, cfg)
    bank = _load_bank(args.bank)
    vocab = _vocab(train_set, bank, cfg.run["vocab_min_count"])
    configs = {name: ABLATIONS[name] for name in (args.configs or list(ABLATIONS))}
    rows = run_ablation(train_set, eval_set, vocab, cfg.model, cfg.train, bank, configs, cfg.decode)
    print(format_table(rows))
    if args.out:
        _write_json(args.out, [row.__dict__ for row in rows])
    return 0


def cmd_topk(args, cfg: RunConfig) -> int:
    train_set, eval_set = _dataset(args, cfg)
    bank = ReportBank.load(args.bank)
    vocab = _vocab(train_set, bank, cfg.run["vocab_min_count"])
    series = topk_sweep(train_set, eval_set, vocab, cfg.model, cfg.train, bank, args.ks, cfg.decode)
    print(f"{'k':>4} " + " ".join(f"{m:>11}" for m in ("bleu4", "meteor_lite", "rougeL", "train_nll")))
    for point in series:
        print(f"{point['k']:>4} " + " ".join(f"{point[m]:>11.4f}" for m in ("bleu4", "meteor_lite", "rougeL",
                                                                            "train_nll")))
    if args.out:
        _write_json(args.out, series)
    return 0


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    reports = run_gradchecks(args.targets, args.samples, cfg.train.seed)
    for name, report in reports.items():
        print(f"[{name}] {report.summary()}")
    return 0 if all(r.passed for r in reports.values()) else 1


def cmd_param_count(args, cfg: RunConfig) -> int:
    widths = args.widths
    degree = cfg.model.spline_degree
    rng = np.random.default_rng(cfg.train.seed)
    rows = []
    for g in args.grids:
        # counts come from instantiated layers; the closed forms are reported next to them
        stack = KANStack(widths, rng, SplineGrid(-1.0, 1.0, g, degree))
        mlp = sum(MLPLayer(a, b, rng).num_parameters() for a, b in zip(widths, widths[1:]))
        formula = sum(kan_param_count(a, b, g, degree) for a, b in zip(widths, widths[1:]))
        rows.append({"grid": g, "kan": stack.num_parameters(), "kan_formula": formula, "mlp": mlp,
                     "mlp_formula": sum(mlp_param_count(a, b) for a, b in zip(widths, widths[1:]))})
    slope, intercept, residual = exact_line_fit(args.grids, [r["kan"] for r in rows])
    print(f"widths {widths}, spline degree {degree}")
    print(f"{'G':>4} {'KAN':>10} {'formula':>10} {'MLP':>10}")
    for r in rows:
        print(f"{r['grid']:>4} {r['kan']:>10} {r['kan_formula']:>10} {r['mlp']:>10}")
    print(f"linear fit: count = {slope} * G + {intercept}, max residual {residual}")
    if args.out:
        _write_json(args.out, {"widths": widths, "rows": rows, "slope": float(slope),
                               "intercept": float(intercept), "residual": float(residual)})
    return 0


# -- parser ----------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value configuration file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="output path")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="ctreport", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic volume/report dataset")
    p.add_argument("--n-pairs", type=int)
    p.set_defaults(func=cmd_synth, needs_out=True)

    bank = sub.add_parser("bank", help="report bank tools")
    bank_sub = bank.add_subparsers(dest="bank_command", required=True)
    p = bank_sub.add_parser("build", parents=[common], help="embed manifest reports into a bank file")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_bank, needs_out=True)

    p = sub.add_parser("train", parents=[common], help="train a model and write a checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--bank")
    p.add_argument("--ablation", choices=list(ABLATIONS))
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--split", action="store_true", help="train on the seeded 80%% split only")
    p.set_defaults(func=cmd_train, needs_out=True)

    p = sub.add_parser("generate", parents=[common], help="write a report for one volume")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--volume", required=True)
    p.add_argument("--bank")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("retrieve", parents=[common], help="list the top-k bank reports for a volume")
    p.add_argument("--bank", required=True)
    p.add_argument("--volume", required=True)
    p.add_argument("--k", type=int)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("evaluate", parents=[common], help="score predictions against references")
    p.add_argument("--predictions", required=True, help="one report per line")
    p.add_argument("--references", required=True, help="one report per line")
    p.set_defaults(func=cmd_evaluate)

    for name, func, help_text in (("ablate", cmd_ablate, "train and score the ablation configurations"),
                                  ("topk-sweep", cmd_topk, "train and score the full model across top-k")):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--manifest", required=True)
        p.add_argument("--bank", required=name == "topk-sweep")
        p.add_argument("--split", action="store_true", help="score on the held-out 20%% split")
        if name == "ablate":
            p.add_argument("--configs", nargs="+", choices=list(ABLATIONS))
        else:
            p.add_argument("--ks", type=_ints, default=[1, 4, 8, 16, 32])
        p.set_defaults(func=func)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check every trainable block")
    p.add_argument("--targets", nargs="+", choices=list(SUITE))
    p.add_argument("--samples", type=int, default=60)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("param-count", parents=[common], help="KAN vs MLP parameter counts over grid sizes")
    p.add_argument("--grids", type=_ints, default=[4, 8, 16, 32])
    p.add_argument("--widths", type=_ints, default=[192, 64])
    p.set_defaults(func=cmd_param_count)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "needs_out", False) and not args.out:
        parser.error(f"{args.command} requires --out")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = RunConfig.load(args.config, args.seed)
        with T.check_finite(cfg.train.check_finite):
            return args.func(args, cfg)
    except (ContractError, DimensionError, ConfigError, DataError, NonFiniteError, KeyError, OSError) as exc:
        print(f"ctreport {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
