"""Command line entry point: ``udg train|eval|sweep|gen-synthetic``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config, sweep_values
from .data import (FormatError, LabeledSet, ManifestError, TestSet, UnlabeledSet,
                   apply_split_manifest, generate_synthetic, parse_manifest, read_cifar_binary,
                   read_float_records, read_ground_truth, write_float_records, write_ground_truth)
from .detection import Detector, DetectorConfig, odin_sweep
from .metrics import EvaluationError
from .model import CheckpointError, DualHeadNetwork, load_checkpoint, save_checkpoint
from .nn import NumericalError
from .trainer import (TrainingAborted, oracle_tables, report_json, reports_from_tables,
                      score_tables, train)

log = logging.getLogger("udg")

EXIT_OK, EXIT_CONFIG, EXIT_ARTIFACT, EXIT_NUMERICAL = 0, 2, 3, 4
SWEEP_COLUMNS = ("fpr95", "auroc", "aupr_in", "aupr_out", "accuracy")


class ArtifactError(RuntimeError):
    pass


# --- data ---------------------------------------------------------------------

def _apply_truth(flags, truth_path):
    ids, is_id = read_ground_truth(truth_path)
    if ids.size and (ids.min() < 0 or ids.max() >= len(flags)):
        raise ArtifactError(f"{truth_path}: sample ids outside 0..{len(flags) - 1}")
    flags = flags.copy()
    flags[ids] = is_id
    return flags


def _read_test_set(cfg: RunConfig, name: str, path: Path) -> TestSet:
    d = cfg.data
    if d.format == "cifar":
        ds = read_cifar_binary(path, d.mean, d.std)
        x, labels = ds.samples, ds.labels
        flags = np.full(len(x), d.test_default_id.get(name, True))
    else:
        labels, x = read_float_records(path, d.dim)
        flags = labels >= 0
        if name in d.test_default_id:
            flags[:] = d.test_default_id[name]
    if name in d.test_truth:
        flags = _apply_truth(flags, d.test_truth[name])
    return TestSet(name, x, flags, np.where(flags, labels, -1))


def load_data(cfg: RunConfig):
    """(labeled, unlabeled, {name: TestSet}) for either data kind."""
    d = cfg.data
    if d.kind == "synthetic":
        lab, unl, test = generate_synthetic(d.synthetic)
        return lab, unl, {test.name: test}
    if d.format == "cifar":
        lab = read_cifar_binary(d.labeled, d.mean, d.std)
        ux = read_cifar_binary(d.unlabeled, d.mean, d.std).samples
    else:
        labels, x = read_float_records(d.labeled, d.dim)
        if (labels < 0).any():
            raise ArtifactError(f"{d.labeled}: labeled file contains unlabeled records")
        lab = LabeledSet(x, labels)
        _, ux = read_float_records(d.unlabeled, d.dim)
    flags = None
    if d.unlabeled_truth is not None:
        flags = _apply_truth(np.zeros(len(ux), dtype=bool), d.unlabeled_truth)
    unl = UnlabeledSet(ux, flags, sample_ids=np.arange(len(lab), len(lab) + len(ux)))
    tests = {name: _read_test_set(cfg, name, p) for name, p in d.tests.items()}
    if d.manifest is not None:
        tests = apply_split_manifest(tests, parse_manifest(d.manifest))
    return lab, unl, tests


def _split_validation(tests: dict, fraction: float, seed: int):
    """Seeded per-dataset split into (validation, evaluation) test sets."""
    val, rest = {}, {}
    for i, (name, ts) in enumerate(tests.items()):
        perm = np.random.default_rng([seed, 7, i]).permutation(len(ts))
        cut = int(round(fraction * len(ts)))
        for out, idx in ((val, np.sort(perm[:cut])), (rest, np.sort(perm[cut:]))):
            out[name] = TestSet(name, ts.samples[idx], ts.id_flags[idx], ts.true_class[idx],
                                ts.sample_ids[idx])
    return val, rest


# --- evaluation -----------------------------------------------------------------

def _resolve_detectors(net, cfg: RunConfig, tests: dict):
    detectors = list(cfg.detectors)
    chosen = None
    if cfg.odin_search and any(d.method is Detector.ODIN for d in detectors):
        val, tests = _split_validation(tests, cfg.val_fraction, cfg.seed)
        x = np.vstack([t.samples for t in val.values()])
        y = np.concatenate([t.id_flags for t in val.values()])
        chosen = odin_sweep(net, x, y)
        detectors = [replace(chosen, threshold=d.threshold) if d.method is Detector.ODIN else d
                     for d in detectors]
    return detectors, tests, chosen


def evaluate_run(net: DualHeadNetwork, cfg: RunConfig, tests: dict, out_dir: Path,
                 report_name="report.json") -> dict:
    if cfg.oracle:
        tables = oracle_tables(list(tests.values()))
    else:
        detectors, tests, chosen = _resolve_detectors(net, cfg, tests)
        if chosen is not None:
            (out_dir / "odin.json").write_text(json.dumps(
                {"temperature": chosen.temperature, "epsilon": chosen.odin_epsilon}) + "\n")
        tables = score_tables(net, list(tests.values()), detectors)
    reports = reports_from_tables(tables)
    (out_dir / report_name).write_text(report_json(reports))
    if cfg.write_scores:
        for det, per in tables.items():
            for name, tab in per.items():
                tab.write_csv(out_dir / f"scores_{det}_{name}.csv")
    return reports


# --- commands -------------------------------------------------------------------

def run_training(cfg: RunConfig) -> dict:
    """Train, checkpoint and evaluate one configuration; returns the reports."""
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(cfg.dumps(), encoding="utf-8")
    lab, unl, tests = load_data(cfg)

    def on_epoch(net, entry):
        if cfg.checkpoint_every and entry.epoch % cfg.checkpoint_every == 0:
            save_checkpoint(net, out / f"model_epoch{entry.epoch:04d}.ckpt")

    with open(out / "epochs.jsonl", "w", encoding="utf-8") as fh:
        net, _ = train(cfg.train, lab, unl, log_fh=fh, on_epoch=on_epoch)
    save_checkpoint(net, out / "model.ckpt")
    return evaluate_run(net, cfg, tests, out)


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    run_training(cfg)
    print(cfg.output_dir / "model.ckpt")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    net = load_checkpoint(args.checkpoint)
    _, _, tests = load_data(cfg)
    out = Path(args.out) if args.out else cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    reports = evaluate_run(net, cfg, tests, out)
    sys.stdout.write(report_json(reports))
    return EXIT_OK


def _sweep_run(job):
    cfg, value = job
    reports = run_training(cfg)
    return value, next(iter(reports.values()))["mean"]


def _axis_config(cfg: RunConfig, axis: str, value, root: Path) -> RunConfig:
    field_name = {"K": "k_groups", "tau": "tau", "filter_strategy": "filter"}[axis]
    train_cfg = replace(cfg.train, **{field_name: value})
    return replace(cfg, train=train_cfg, output_dir=root / f"{axis}={value}")


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    values = sweep_values(cfg, args.axis)
    root = cfg.output_dir / f"sweep_{args.axis}"
    rows = []
    if args.axis == "odin":
        base = replace(cfg, output_dir=root / "base", detectors=[DetectorConfig(Detector.MSP)],
                       odin_search=False, oracle=False)
        run_training(base)
        net = load_checkpoint(base.output_dir / "model.ckpt")
        _, _, tests = load_data(cfg)
        for t, eps in values:
            det = DetectorConfig(Detector.ODIN, t, eps)
            rep = reports_from_tables(score_tables(net, list(tests.values()), [det]))
            rows.append((f"T={t:g};eps={eps:g}", rep[det.name]["mean"]))
    else:
        jobs = [(_axis_config(cfg, args.axis, v, root), v) for v in values]
        if args.parallel > 1:
            with ProcessPoolExecutor(max_workers=args.parallel) as pool:
                rows = list(pool.map(_sweep_run, jobs))
        else:
            rows = [_sweep_run(j) for j in jobs]
    root.mkdir(parents=True, exist_ok=True)
    path = cfg.output_dir / f"sweep_{args.axis}.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("axis_value",) + SWEEP_COLUMNS)
        for value, rep in rows:
            d = rep.to_dict()
            w.writerow([value] + [repr(float(d[k])) for k in SWEEP_COLUMNS])
    print(path)
    return EXIT_OK


def cmd_gen_synthetic(args) -> int:
    """Write the synthetic benchmark as record files plus a config that trains on them."""
    cfg = load_config(args.config)
    if cfg.data.kind != "synthetic":
        raise ConfigError("gen-synthetic needs data.kind = synthetic")
    lab, unl, test = generate_synthetic(cfg.data.synthetic)
    out = cfg.output_dir / "synthetic"
    out.mkdir(parents=True, exist_ok=True)
    write_float_records(out / "labeled.bin", lab.samples, lab.labels)
    write_float_records(out / "unlabeled.bin", unl.samples)
    write_ground_truth(out / "unlabeled_truth.csv", np.arange(len(unl)), unl.id_flags)
    write_float_records(out / "test.bin", test.samples, test.true_class)
    write_ground_truth(out / "test_truth.csv", np.arange(len(test)), test.id_flags)
    resolved = cfg.resolved()
    lines = {k: v for k, v in resolved.items() if not k.startswith("data.")}
    lines.update({
        "output_dir": str(cfg.output_dir / "records_run"),
        "data.kind": "records", "data.format": "float",
        "data.dim": str(cfg.data.synthetic.dim),
        "data.labeled": "labeled.bin", "data.unlabeled": "unlabeled.bin",
        "data.unlabeled_truth": "unlabeled_truth.csv",
        "data.test.synthetic": "test.bin", "data.test_truth.synthetic": "test_truth.csv",
    })
    (out / "records.conf").write_text("".join(f"{k} = {v}\n" for k, v in lines.items()))
    print(out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="udg", description="Dual-grouping OOD detection experiments")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    t = sub.add_parser("train", help="train one configuration and evaluate it")
    t.add_argument("config")
    t.set_defaults(func=cmd_train)
    e = sub.add_parser("eval", help="evaluate a checkpoint on the configured test sets")
    e.add_argument("checkpoint")
    e.add_argument("config")
    e.add_argument("--out", help="directory for report.json (default: output_dir)")
    e.set_defaults(func=cmd_eval)
    s = sub.add_parser("sweep", help="one run per value of an axis, summarised as CSV")
    s.add_argument("config")
    s.add_argument("--axis", required=True, choices=("K", "tau", "filter_strategy", "odin"))
    s.add_argument("--parallel", type=int, default=1, metavar="N")
    s.set_defaults(func=cmd_sweep)
    g = sub.add_parser("gen-synthetic", help="write the synthetic benchmark to disk")
    g.add_argument("config")
    g.set_defaults(func=cmd_gen_synthetic)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"udg: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, FormatError, ManifestError, ArtifactError, EvaluationError, OSError) as exc:
        print(f"udg: artifact error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except (TrainingAborted, NumericalError) as exc:
        print(f"udg: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
