"""Command-line front end: ``srgd {gen,train,eval,report,run,selftest}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import experiments as ex
from . import io
from .gridmath import DomainError, ShapeError
from .metrics import REPORT_COLUMNS
from .report import SIGNIFICANCE_COLUMNS, SUMMARY_COLUMNS, box_plot_svg, compare, summarize

logger = logging.getLogger("srgd")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

EPILOG = f"""\
CSV formats (column order):
  evaluation   {", ".join(REPORT_COLUMNS)}
  history      {", ".join(ex.HISTORY_COLUMNS)}
  summary      {", ".join(SUMMARY_COLUMNS)}
  significance {", ".join(SIGNIFICANCE_COLUMNS)}

Config files hold 'key = value' lines ('#' starts a comment); list values are
comma separated. Keys: {", ".join(ex.ExperimentConfig().as_items())}.
--set key=value overrides a config key. SRGD_WORKERS sets the default
worker count. Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric failure.
"""


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config(args) -> ex.ExperimentConfig:
    items = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"config file {path} not found")
        items.update(io.read_manifest(path))
    if getattr(args, "experiment", None):
        items["experiment"] = args.experiment
    items.update(_overrides(args))
    return _layer(items)


def _layer(items, base: ex.ExperimentConfig | None = None) -> ex.ExperimentConfig:
    try:
        return ex.config_from_items(items, base)
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from None


def _workers(args) -> int:
    if args.workers is not None:
        if args.workers < 1:
            raise UsageError("--workers must be >= 1")
        return args.workers
    try:
        return ex.default_workers()
    except ValueError as e:
        raise UsageError(str(e)) from None


def _prepare_out(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()) and not force:
        raise UsageError(f"{path} is not empty; pass --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)


def _gen(cfg: ex.ExperimentConfig, out: Path, workers: int, pgm: bool):
    data = ex.build_dataset(cfg, workers)
    ex.write_dataset(out, cfg, data)
    if pgm:
        for split, pairs in data.items():
            for i, (fixed, moving) in enumerate(pairs):
                d = out / split / f"{i:03d}"
                io.write_pgm(d / "fixed" / "img.pgm", fixed.img)
                io.write_pgm(d / "moving" / "img.pgm", moving.img)
                io.write_pgm(d / "moving" / "modality_b.pgm", moving.modality_b)
    return data


def cmd_gen(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg = _layer({"data_seed": str(args.seed)}, cfg)
    out = Path(args.out)
    _prepare_out(out, args.force)
    _gen(cfg, out, _workers(args), args.pgm)
    print(f"wrote {cfg.experiment} dataset to {out}")
    return EXIT_OK


def _load_data(path) -> tuple[ex.ExperimentConfig, dict]:
    root = Path(path)
    if not (root / "manifest.txt").is_file():
        raise FileNotFoundError(f"no dataset manifest in {root}")
    return ex.read_dataset(root)


def cmd_train(args) -> int:
    cfg, data = _load_data(args.data)
    cfg = _layer(_overrides(args), cfg)
    if args.setting not in [s.name for s in cfg.protocol.settings]:
        raise UsageError(f"unknown setting {args.setting!r} for {cfg.experiment}")
    seed = 0 if args.seed is None else args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / f"{ex.run_name(args.setting, seed)}.ckpt"
    if ckpt.exists() and not args.force:
        raise UsageError(f"{ckpt} exists; pass --force to overwrite")
    ex.train_one(cfg, data, args.setting, seed, out)
    print(f"wrote {ckpt}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, data = _load_data(args.data)
    cfg = _layer(_overrides(args), cfg)
    net = io.load_checkpoint(args.checkpoint)
    seed = net.seed if args.seed is None else args.seed
    evals = args.eval or list(cfg.eval_settings)
    rows = []
    try:
        for ev in evals:
            if ev not in cfg.protocol.eval_settings:
                raise UsageError(f"unknown eval setting {ev!r}")
            rows += ex.evaluate(cfg, net, data["test"], args.setting, seed, ev)
    except ShapeError as e:
        raise ShapeError(f"checkpoint does not fit the dataset: {e}") from None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    io.write_csv(out, REPORT_COLUMNS, rows)
    print(f"wrote {len(rows)} rows to {out}")
    return EXIT_OK


def write_report(cfg: ex.ExperimentConfig, csv_dir: Path, out: Path) -> list[dict]:
    rows = []
    for path in sorted(csv_dir.glob("*_eval.csv")):
        rows += io.read_csv(path)
    if not rows:
        raise FileNotFoundError(f"no *_eval.csv files in {csv_dir}")
    present = {r["setting"] for r in rows}
    for s in cfg.settings:
        if s not in present:
            logger.warning("setting %r has no evaluation rows; report is partial", s)
    out.mkdir(parents=True, exist_ok=True)
    summary = summarize(rows)
    io.write_csv(out / "summary.csv", SUMMARY_COLUMNS, summary)
    metric = "tre_mean" if cfg.protocol.val_metric == "tre" else "mean_dsc"
    marks = compare(rows, metric)
    io.write_csv(out / "significance.csv", SIGNIFICANCE_COLUMNS, [m.row() for m in marks])
    (out / f"{metric}.svg").write_text(
        box_plot_svg(rows, metric, f"{cfg.experiment}: {metric}", marks))
    (out / "ndv_percent.svg").write_text(
        box_plot_svg(rows, "ndv_percent", f"{cfg.experiment}: ndv_percent"))
    return summary


def _print_summary(summary: list[dict]) -> None:
    print(f"{'setting':<10} {'eval':<9} {'dsc':>16} {'tre':>16} {'ndv max':>8}")
    for r in summary:
        print(f"{r['setting']:<10} {r['eval']:<9} "
              f"{float(r['mean_dsc']):.4f} ± {float(r['std_dsc']):.4f} "
              f"{float(r['tre_mean']):.4f} ± {float(r['std_tre']):.4f} "
              f"{float(r['ndv_max']):8.3f}")


def cmd_report(args) -> int:
    cfg = _config(args)
    summary = write_report(cfg, Path(args.runs), Path(args.out))
    _print_summary(summary)
    return EXIT_OK


def cmd_run(args) -> int:
    """gen + train + eval + report in one output directory."""
    cfg = _config(args)
    if args.seed is not None:
        cfg = _layer({"data_seed": str(args.seed)}, cfg)
    out = Path(args.out)
    _prepare_out(out, args.force)
    workers = _workers(args)
    data = _gen(cfg, out / "data", workers, args.pgm)
    ex.run_experiment(cfg, data, out / "runs", workers)
    _print_summary(write_report(cfg, out / "runs", out / "report"))
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .gradcheck import run_selftest

    results = run_selftest(instances=args.instances, seed=args.seed or 0)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<22} {r.detail}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


def _overrides(args) -> dict[str, str]:
    items = {}
    for kv in getattr(args, "set", None) or []:
        if "=" not in kv:
            raise UsageError(f"--set expects key=value, got {kv!r}")
        k, v = kv.split("=", 1)
        items[k.strip()] = v.strip()
    return items


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="srgd", description="Surrogate-supervised registration experiments.",
                epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config=True, out_help="output path"):
        if config:
            sp.add_argument("--config", help="key = value config file")
            sp.add_argument("--experiment", choices=ex.EXPERIMENTS)
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
        sp.add_argument("--out", required=True, help=out_help)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--workers", type=int)
        sp.add_argument("--force", action="store_true", help="overwrite existing output")

    g = sub.add_parser("gen", help="generate a synthetic dataset", epilog=EPILOG,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    common(g, out_help="dataset directory")
    g.add_argument("--pgm", action="store_true", help="also write 8-bit PGM previews")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train one (setting, seed) model")
    common(t, config=False, out_help="run directory")
    t.add_argument("--data", required=True)
    t.add_argument("--setting", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the test split",
                       epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    common(e, config=False, out_help="CSV file")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--setting", required=True, help="label written to the setting column")
    e.add_argument("--eval", action="append", help="eval condition (default: all)")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="summaries, significance and box plots",
                       epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    common(r, out_help="report directory")
    r.add_argument("--runs", required=True, help="directory of *_eval.csv files")
    r.set_defaults(func=cmd_report)

    u = sub.add_parser("run", help="gen, train, eval and report one experiment",
                       epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    common(u, out_help="experiment directory")
    u.add_argument("--pgm", action="store_true")
    u.set_defaults(func=cmd_run)

    s = sub.add_parser("selftest", help="gradient checks and metric oracles")
    s.add_argument("--seed", type=int)
    s.add_argument("--instances", type=int, default=3)
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"srgd: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, NotADirectoryError, io.FormatError, ShapeError) as e:
        print(f"srgd: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, DomainError) as e:
        print(f"srgd: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"srgd: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
