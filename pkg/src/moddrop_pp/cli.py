"""Command-line entry point: gen, train, eval, compare.

Exit codes: 0 success, 1 a --assert gate failed, 2 usage or configuration
error, 3 numeric failure during training, 4 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import re
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import RunConfig, format_config, load_config
from .data import dataset_exists, generate_dataset, load_dataset, save_dataset
from .dynamic import as_code
from .errors import ConfigError, FormatError, ModDropError, NumericsError
from .metrics import METRIC_NAMES, format_table, read_report_csv, write_report_csv
from .moddrop import enumerate_configs
from .trainer import (
    Checkpoint,
    REGIMES,
    evaluate,
    model_from_checkpoint,
    run_training,
    split_subjects,
    train_config_from_checkpoint,
    write_log_csv,
)

log = logging.getLogger("moddrop_pp")

EXIT_OK, EXIT_ASSERT, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3, 4
CHECKPOINT_NAME = "checkpoint.mdc"
LOG_NAME = "log.csv"


class UsageError(ModDropError):
    pass


# ---------------------------------------------------------------- config plumbing


def build_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        cfg.set(key.strip(), value)
    if getattr(args, "seed", None) is not None:
        cfg.synth.seed = args.seed
        cfg.train.seed = args.seed
    if getattr(args, "regime", None):
        cfg.train.regime = args.regime
    if getattr(args, "threshold", None) is not None:
        cfg.eval.threshold = args.threshold
        cfg.train.threshold = args.threshold
    cfg.validate()
    return cfg


def _need_dataset(path) -> list:
    if path is None:
        raise UsageError("--data is required")
    if not dataset_exists(path):
        raise UsageError(f"no dataset at {path} (run 'gen' first)")
    return load_dataset(path)


def _sync_model_to_data(cfg: RunConfig, dataset) -> None:
    k, slices = dataset[0].k, dataset[0].modalities[0].shape[0]
    if (k, slices) != (cfg.synth.k, cfg.synth.slices):
        log.info("dataset has K=%d, %d slices; overriding configured model shape", k, slices)
    cfg.synth.k, cfg.synth.slices = k, slices
    cfg.sync()


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------- commands


def cmd_gen(args) -> int:
    cfg = build_config(args)
    out = Path(args.out)
    dataset = generate_dataset(cfg.synth, cfg.eval.subjects)
    save_dataset(out, dataset)
    (out / "run.cfg").write_text(format_config(cfg))
    print(f"wrote {len(dataset)} subjects x {cfg.synth.k} modalities to {out}")
    return EXIT_OK


def _train_one(cfg: RunConfig, train, out: Path) -> str:
    result = run_training(train, cfg.model, cfg.train, cfg.loss, cfg.drop)
    out.mkdir(parents=True, exist_ok=True)
    result.checkpoint.save(out / CHECKPOINT_NAME)
    write_log_csv(out / LOG_NAME, result.log)
    digest = file_digest(out / CHECKPOINT_NAME)
    print(f"{out / CHECKPOINT_NAME}  best_epoch={result.best_epoch}  sha256={digest}")
    return digest


def cmd_train(args) -> int:
    cfg = build_config(args)
    dataset = _need_dataset(args.data)
    _sync_model_to_data(cfg, dataset)
    train, _ = split_subjects(dataset, cfg.eval.test_fraction)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.cfg").write_text(format_config(cfg))
    if cfg.train.regime == "independent":
        codes = [as_code(cfg.train.code)] if cfg.train.code else enumerate_configs(cfg.synth.k)
        for code in codes:
            sub = replace(cfg, train=replace(cfg.train, code=str(code)))
            _train_one(sub, train, out / str(code))
    else:
        _train_one(cfg, train, out)
    return EXIT_OK


def _checkpoints_for(path: Path, k: int) -> dict[str, Checkpoint | None]:
    """Map each code to the checkpoint that serves it (one unified or one per code)."""
    if path.is_file():
        return {"*": Checkpoint.load(path)}
    if (path / CHECKPOINT_NAME).is_file():
        return {"*": Checkpoint.load(path / CHECKPOINT_NAME)}
    found = {}
    for code in enumerate_configs(k):
        f = path / str(code) / CHECKPOINT_NAME
        if f.is_file():
            found[str(code)] = Checkpoint.load(f)
    if not found:
        raise UsageError(f"no checkpoint found at {path}")
    return found


def cmd_eval(args) -> int:
    cfg = build_config(args)
    dataset = _need_dataset(args.data)
    _, test = split_subjects(dataset, cfg.eval.test_fraction)
    k = dataset[0].k
    codes = enumerate_configs(k)
    ckpts = _checkpoints_for(Path(args.checkpoint), k)
    reports = {}
    if "*" in ckpts:
        ckpt = ckpts["*"]
        tcfg = train_config_from_checkpoint(ckpt)
        if tcfg.regime == "independent":
            raise UsageError(f"checkpoint was trained for code {tcfg.code} only; pass the directory "
                             "holding one checkpoint per code")
        model = _model_for(ckpt, k)
        reports = evaluate(model, test, codes, cfg.eval.threshold, cfg.eval.min_overlap)
    else:
        missing = [str(c) for c in codes if str(c) not in ckpts]
        if missing:
            raise UsageError(f"independent models missing for codes {missing}")
        for code in codes:
            ckpt = ckpts[str(code)]
            trained_for = train_config_from_checkpoint(ckpt).code
            if trained_for != str(code):
                raise UsageError(f"checkpoint under {code}/ was trained for code {trained_for}")
            reports.update(evaluate(_model_for(ckpt, k), test, [code], cfg.eval.threshold, cfg.eval.min_overlap))
    out = Path(args.out)
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    write_report_csv(out, reports)
    table = format_table(reports)
    out.with_suffix(".txt").write_text(table + "\n")
    print(table)
    return EXIT_OK


def _model_for(ckpt: Checkpoint, k: int):
    model = model_from_checkpoint(ckpt)
    if model.cfg.k != k:
        raise UsageError(f"checkpoint expects K={model.cfg.k} modalities, dataset has K={k}")
    return model


# ---------------------------------------------------------------- compare

_ASSERT_RE = re.compile(
    r"^\s*(?P<a>[^\s<>=]+)\s*(?P<op>>=|>|<=|<)\s*(?P<b>[^\s<>=]+)\s+on\s+>=\s*(?P<n>\d+)\s*/\s*(?P<m>\d+)"
    r"\s+configs?(?:\s+by\s+(?P<metric>\w+))?\s*$", re.IGNORECASE)

_OPS = {">=": np.greater_equal, ">": np.greater, "<=": np.less_equal, "<": np.less}


def parse_assertion(text: str) -> dict:
    m = _ASSERT_RE.match(text)
    if not m:
        raise ConfigError(f"cannot parse assertion {text!r}; expected e.g. 'MD++>=MD on >=12/15 configs by DSC'")
    spec = m.groupdict()
    spec["metric"] = (spec["metric"] or "dsc").lower()
    if spec["metric"] not in METRIC_NAMES:
        raise ConfigError(f"unknown metric {spec['metric']!r} in assertion")
    spec["n"], spec["m"] = int(spec["n"]), int(spec["m"])
    return spec


def check_assertion(spec: dict, reports: dict[str, dict], codes: list[str]) -> tuple[bool, str]:
    for name in (spec["a"], spec["b"]):
        if name not in reports:
            raise ConfigError(f"assertion names unknown report {name!r}; have {sorted(reports)}")
    if spec["m"] != len(codes):
        raise ConfigError(f"assertion counts over {spec['m']} configs but reports have {len(codes)}")
    a = np.array([reports[spec["a"]][c][spec["metric"]] for c in codes])
    b = np.array([reports[spec["b"]][c][spec["metric"]] for c in codes])
    hits = int(np.sum(_OPS[spec["op"]](a, b)))
    ok = hits >= spec["n"]
    msg = (f"{spec['a']}{spec['op']}{spec['b']} by {spec['metric']}: {hits}/{len(codes)} configs "
           f"(need >= {spec['n']}) -> {'PASS' if ok else 'FAIL'}")
    return ok, msg


def rank_markers(values: list[float]) -> list[str]:
    """'*' for the best, '+' for the second best; nothing when all entries tie."""
    distinct = sorted({v for v in values if not np.isnan(v)}, reverse=True)
    if len(distinct) < 2:
        return [""] * len(values)
    return ["*" if v == distinct[0] else "+" if v == distinct[1] else "" for v in values]


def compare_table(reports: dict[str, dict], codes: list[str], metric: str) -> str:
    names = list(reports)
    width = max(9, *(len(n) + 2 for n in names))
    lines = [f"{metric.upper()}  (* best, + second best)",
             "code  " + "".join(f"{n:>{width}}" for n in names)]
    for c in codes:
        vals = [reports[n][c][metric] for n in names]
        marks = rank_markers(vals)
        lines.append(f"{c:<6}" + "".join(f"{v:>{width - 1}.4f}{m or ' '}" for v, m in zip(vals, marks)))
    means = [float(np.mean([reports[n][c][metric] for c in codes])) for n in names]
    lines.append(f"{'mean':<6}" + "".join(f"{v:>{width - 1}.4f} " for v in means))
    base = names[0]
    lines.append("")
    lines.append(f"deltas vs {base}:")
    for n in names[1:]:
        d = np.array([reports[n][c][metric] - reports[base][c][metric] for c in codes])
        lines.append(f"  {n:<10} mean {d.mean():+.4f}  better {int(np.sum(d > 0))}  "
                     f"equal {int(np.sum(d == 0))}  worse {int(np.sum(d < 0))}")
    return "\n".join(lines)


def cmd_compare(args) -> int:
    if len(args.reports) < 2:
        raise UsageError("compare needs at least two reports")
    reports = {}
    for item in args.reports:
        name, sep, path = item.partition("=")
        if not sep:
            name, path = Path(item).stem, item
        if name in reports:
            raise UsageError(f"duplicate report name {name!r}")
        reports[name] = read_report_csv(path)
    code_sets = {tuple(sorted(r)) for r in reports.values()}
    if len(code_sets) != 1:
        raise UsageError("reports cover different configuration sets")
    first = next(iter(reports.values()))
    codes = list(first)
    metric = args.metric.lower()
    if metric not in METRIC_NAMES:
        raise ConfigError(f"unknown metric {metric!r}")
    print(compare_table(reports, codes, metric))
    status = EXIT_OK
    for text in args.asserts or []:
        ok, msg = check_assertion(parse_assertion(text), reports, codes)
        print(msg)
        if not ok:
            status = EXIT_ASSERT
    return status


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moddrop-pp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="key=value run configuration file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        if seed:
            p.add_argument("--seed", type=int, help="seed for data generation and training")

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--out", required=True, help="dataset directory")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train one regime (independent: one model per code)")
    common(p)
    p.add_argument("--regime", choices=REGIMES)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threshold", type=float, help="probability threshold for validation DSC")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on every modality configuration")
    common(p, seed=False)
    p.add_argument("checkpoint", help="checkpoint file, or a directory from 'train'")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="report CSV path (a .txt table is written alongside)")
    p.add_argument("--threshold", type=float, help="probability threshold")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="compare report CSVs side by side")
    p.add_argument("reports", nargs="+", metavar="[NAME=]REPORT.csv")
    p.add_argument("--metric", default="dsc", help="metric column to compare (default dsc)")
    p.add_argument("--assert", dest="asserts", action="append", metavar="CLAIM",
                   help="e.g. 'MD++>=MD on >=12/15 configs by DSC'; exit 1 when it fails")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericsError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ModDropError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
