"""Command-line interface: one subcommand per pipeline phase.

Artifacts live in one output directory:

    fp_model.qcfp         full-precision checkpoint          (train)
    misses.tsv            per-example miss counts            (train)
    pmf_<level>.tsv       miss PMFs                          (train)
    qcore.json            the sampled core                   (qcore)
    infoloss.json         its information loss               (qcore)
    quant_<j>.qcqm        quantized models                   (quantize)
    deployed_<j>.qcqm     BP-calibrated models on the core   (bf-train)
    bitflip_<j>.qcbf      bit-flipping nets                  (bf-train)
    deltas_<j>.tsv        recorded (dA, dP) pairs            (bf-train)
    report/, ablation/, subsets/                             (stream, ablate, compare-subsets)

Exit status is 0 on success, 1 on internal or numeric errors and 2 on usage
or input errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from qcore import bitflip, coreset, harness, misses, nn, quant
from qcore._io import atomic_write_text, dumps_json
from qcore.data import train_test_split
from qcore.errors import QCoreError, UsageError

log = logging.getLogger("qcore")

DEFAULT_OUT = "qcore-out"


def _parse_levels(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(p) for p in text.split(",") if p.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"levels must be comma-separated integers, got {text!r}") from None


def _parse_fraction(text: str) -> Fraction:
    try:
        value = Fraction(text)
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0 < value <= 1:
        raise argparse.ArgumentTypeError(f"lambda must be in (0, 1], got {text}")
    return value


def load_cli_config(args) -> tuple[harness.ExperimentConfig, Path]:
    """Experiment config from ``--config`` (optional ``out_dir`` key) with flag overrides."""
    raw: dict = {}
    if args.config is not None:
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise UsageError(f"{path}: top level must be an object")
    raw = dict(raw)
    out_dir = raw.pop("out_dir", None)
    if args.seed is not None:
        raw["seeds"] = [args.seed]
    if args.levels is not None:
        raw["levels"] = list(args.levels)
    if args.budget is not None:
        raw["core_budget"] = args.budget
    cfg = harness.ExperimentConfig.from_dict(raw)
    out = Path(args.out or out_dir or DEFAULT_OUT)
    return cfg, out


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise UsageError(f"{what} not found: {path} (run the upstream subcommand first)")
    return path


def _pmf_line(pmf: misses.MissPmf) -> str:
    return " ".join(f"{k}:{n}" for k, n in pmf.bins)


def _lane_data(cfg: harness.ExperimentConfig, seed: int):
    source, target = harness.load_domains(cfg, seed)
    train, test = train_test_split(source, cfg.source_test_fraction, seed)
    return train, test, target


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg, out = load_cli_config(args)
    seed = cfg.seeds[0]
    train, _, _ = _lane_data(cfg, seed)
    model, table, loss = harness.train_with_misses(cfg, train, seed)
    out.mkdir(parents=True, exist_ok=True)
    nn.save_checkpoint(model, out / "fp_model.qcfp")
    misses.save_miss_table(table, out / "misses.tsv")
    print(f"final train loss: {loss:.6f}")
    for level in table.levels:
        pmf = misses.build_pmf(table, level)
        atomic_write_text(out / f"pmf_{level}.tsv", misses.pmf_text(pmf))
        print(f"pmf level {level}: {_pmf_line(pmf)}")
    summed = misses.build_pmf(table, misses.SUMMED, cfg.levels)
    atomic_write_text(out / "pmf_summed.tsv", misses.pmf_text(summed))
    print(f"pmf summed: {_pmf_line(summed)}")
    return 0


def cmd_qcore(args) -> int:
    cfg, out = load_cli_config(args)
    table = misses.load_miss_table(_need(out / "misses.tsv", "miss table"))
    levels = args.levels if args.levels is not None else None
    pmf = misses.build_pmf(table, misses.SUMMED, levels)
    seed = cfg.seeds[0]
    core = coreset.sample_qcore(None, pmf, table, cfg.core_budget, seed)
    loss = coreset.info_loss(pmf, core.selected)
    coreset.save_qcore(core, out / "qcore.json")
    atomic_write_text(out / "infoloss.json", dumps_json({
        "full_mean": loss.full_mean, "core_mean": loss.core_mean, "epsilon": loss.epsilon,
        "bound": loss.bound, "within_bound": loss.within_bound,
    }))
    print(f"budget {core.budget} of {len(table.ids)} examples (lambda={core.lam:.6g}), seed {seed}")
    print("k\tN_k\tquota")
    for k, n in pmf.bins:
        print(f"{k}\t{n}\t{core.quotas.get(k, 0)}")
    print(f"quota total: {sum(core.quotas.values())}")
    for w in core.warnings:
        print(f"warning: {w}")
    print(f"epsilon={loss.epsilon:.6g} K={loss.bound}")
    return 0


def cmd_quantize(args) -> int:
    cfg, out = load_cli_config(args)
    model = nn.load_checkpoint(_need(out / "fp_model.qcfp", "checkpoint"))
    _, test, _ = _lane_data(cfg, cfg.seeds[0])
    print(f"full precision: accuracy {nn.accuracy(model, test.features, test.labels):.4f}")
    for j in cfg.levels:
        qm = quant.quantize_model(model, j)
        quant.save_quant(qm, out / f"quant_{j}.qcqm")
        print(f"{j}-bit: accuracy {quant.accuracy_quant(qm, test.features, test.labels):.4f}")
    return 0


def cmd_bf_train(args) -> int:
    cfg, out = load_cli_config(args)
    model = nn.load_checkpoint(_need(out / "fp_model.qcfp", "checkpoint"))
    seed = cfg.seeds[0]
    train, _, _ = _lane_data(cfg, seed)
    core = coreset.load_qcore(_need(out / "qcore.json", "QCore file"), train)
    ccfg = replace(cfg.calib, seed=seed)
    for j in cfg.levels:
        qm = quant.quantize_model(model, j)
        deployed, records = bitflip.record_calibration(qm, core.examples, ccfg, cfg.record_epochs)
        bf = bitflip.train_bitflip(records, j, replace(cfg.bf_train, seed=seed), seed)
        quant.save_quant(deployed, out / f"deployed_{j}.qcqm")
        bitflip.save_bitflip(bf, out / f"bitflip_{j}.qcbf")
        records.save(out / f"deltas_{j}.tsv")
        hist = np.bincount(records.delta_p + 1, minlength=3)
        print(f"{j}-bit: {len(records)} records, dP -1/0/+1 = {hist[0]}/{hist[1]}/{hist[2]}, "
              f"BF balanced train accuracy {bf.train_accuracy:.4f}{' (constant net)' if bf.degenerate else ''}")
    return 0


def _print_averages(report: harness.ExperimentReport) -> None:
    print(report.averages_table(), end="")


def _staged_stream(cfg: harness.ExperimentConfig, out: Path, mode: str) -> harness.ExperimentReport:
    """Stream loop for one seed from the artifacts of the earlier subcommands."""
    seed = cfg.seeds[0]
    model = nn.load_checkpoint(_need(out / "fp_model.qcfp", "checkpoint"))
    train, test, target = _lane_data(cfg, seed)
    core = coreset.load_qcore(_need(out / "qcore.json", "QCore file"), train)
    batches = harness.split_stream(target, cfg.n_batches, seed, cfg.stream_test_fraction)
    lane = harness.Lane(seed, train, test, target, batches, model, None, core.pmf, core, float("nan"))
    nn.ops.reset()
    clock = harness.Clock()
    rep = harness.LaneReport(seed, {}, {}, {}, {}, nn.accuracy(model, test.features, test.labels),
                             nn.accuracy(model, target.features, target.labels), float("nan"), {}, {}, {}, {})
    for j in cfg.levels:
        deployed = quant.load_quant(_need(out / f"deployed_{j}.qcqm", "deployed model"))
        bf = bitflip.load_bitflip(_need(out / f"bitflip_{j}.qcbf", "bit-flip net"))
        start = harness.LevelStart(j, deployed, deployed, bitflip.DeltaRecords.from_records([]), bf)
        res = harness.run_stream(cfg, lane, start, mode, "bf", clock)
        rep.accuracy[j] = {mode: res.accuracy}
        rep.core_sizes[j] = {mode: res.core_sizes}
        rep.static_accuracy[j] = res.static_accuracy
        rep.bf[j] = {"emitted": res.emitted, "max_code_drift": res.max_code_drift}
        rep.test_leaks += res.test_leaks
    rep.counters = nn.ops.snapshot()
    rep.runtimes_ms = clock.ms
    return harness.ExperimentReport(cfg.to_dict(), (mode,), tuple(cfg.levels), [rep])


def cmd_stream(args) -> int:
    cfg, out = load_cli_config(args)
    mode = args.mode or harness.FULL
    if args.end_to_end:
        report = harness.run_pipeline(cfg, mode, workers=args.workers)
    else:
        report = _staged_stream(cfg, out, mode)
    report.save(out / "report")
    print(f"mode: {mode}")
    _print_averages(report)
    return 0


def cmd_ablate(args) -> int:
    cfg, out = load_cli_config(args)
    modes = (args.mode,) if args.mode else harness.MODES
    report = harness.run_ablation(cfg, modes, workers=args.workers)
    report.save(out / "ablation")
    _print_averages(report)
    return 0


def cmd_compare_subsets(args) -> int:
    cfg, out = load_cli_config(args)
    strategies = tuple(args.strategies.split(",")) if args.strategies else harness.STRATEGIES
    table = harness.run_subset_comparison(cfg, strategies, workers=args.workers)
    table.save(out / "subsets")
    print(table.table(), end="")
    return 0


def cmd_infoloss(args) -> int:
    cfg, out = load_cli_config(args)
    path = Path(args.misses) if args.misses else out / "misses.tsv"
    table = misses.load_miss_table(_need(path, "miss table"))
    level = args.level if args.level is not None else misses.SUMMED
    pmf = misses.build_pmf(table, level, args.levels)
    lam = args.lam if args.lam is not None else Fraction(cfg.core_budget, len(table.ids))
    rep = coreset.textbook_info_loss(pmf, lam)
    print(f"lambda={float(lam):.6g} fullMean={rep.full_mean:.6g} coreMean={rep.core_mean:.6g} "
          f"epsilon={rep.epsilon:.6g} K={rep.bound}{'' if rep.within_bound else ' (exceeds K)'}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON)")
    common.add_argument("--seed", type=int, help="run a single seed")
    common.add_argument("--levels", type=_parse_levels, help="bit widths, e.g. 2,4,8")
    common.add_argument("--budget", type=int, help="QCore size")
    common.add_argument("--out", help=f"artifact directory (default {DEFAULT_OUT})")
    common.add_argument("--workers", type=int, default=1, help="worker processes for seed lanes")

    parser = argparse.ArgumentParser(prog="qcore", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train the FP model and track misses").set_defaults(fn=cmd_train)
    sub.add_parser("qcore", parents=[common], help="sample the QCore").set_defaults(fn=cmd_qcore)
    sub.add_parser("quantize", parents=[common], help="quantize the FP checkpoint").set_defaults(fn=cmd_quantize)
    sub.add_parser("bf-train", parents=[common], help="record BP calibration and train BF nets"
                   ).set_defaults(fn=cmd_bf_train)

    mode = argparse.ArgumentParser(add_help=False)
    mode.add_argument("--mode", choices=harness.MODES)
    p = sub.add_parser("stream", parents=[common, mode], help="run the stream loop")
    p.add_argument("--end-to-end", action="store_true", help="run every phase for every seed")
    p.set_defaults(fn=cmd_stream)
    sub.add_parser("ablate", parents=[common, mode], help="compare full, no-update and no-bf"
                   ).set_defaults(fn=cmd_ablate)
    p = sub.add_parser("compare-subsets", parents=[common], help="BP calibration on different subsets")
    p.add_argument("--strategies", help=f"comma-separated subset of {','.join(harness.STRATEGIES)}")
    p.set_defaults(fn=cmd_compare_subsets)
    p = sub.add_parser("infoloss", parents=[common], help="information loss for a sampling rate")
    p.add_argument("--lambda", dest="lam", type=_parse_fraction, help="sampling rate (default budget/|D|)")
    p.add_argument("--level", type=int, help="single-level PMF instead of the summed one")
    p.add_argument("--misses", help="miss table (default <out>/misses.tsv)")
    p.set_defaults(fn=cmd_infoloss)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("QCORE_LOG", "WARNING").upper()
    logging.basicConfig(level=level if isinstance(logging.getLevelName(level), int) else "WARNING",
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except QCoreError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - last-resort guard for the exit-code contract
        log.debug("unhandled error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
