"""Command-line entry point: ``stib sizecalc | train | bench``.

Every file written carries a ``# format:`` line and a ``# config:`` line with
the canonical flags of the run, so any artifact can be regenerated from its
own header. Exit codes are 0 on success, 1 on a runtime failure, 2 on a usage
or configuration error.
"""

import argparse
import csv
import io
import itertools
import logging
import shlex
import sys
import time
import traceback
from dataclasses import dataclass, fields, replace
from pathlib import Path

from . import __version__
from .batching import prepare_source
from .dataset import GraphSpec, build_weighted_adjacency, gen_synthetic, load_edges, load_signal
from .distsim import PLACEMENTS, DistPlan, run_distributed, steps_per_epoch
from .errors import ConfigError, StibError
from .memory import PRESETS, AllocLedger, estimate, ledger_report
from .model import ModelConfig, save_checkpoint
from .preprocess import STAT_MODES, plan_windows

log = logging.getLogger("stib")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
SIZECALC_FORMAT = "stib-sizecalc/1"
METRICS_FORMAT = "stib-metrics/1"
LEDGER_FORMAT = "stib-ledger/1"
BENCH_FORMAT = "stib-bench/1"

METRIC_COLUMNS = ("epoch", "split", "mae", "steps", "data_bytes_remote", "grad_bytes", "wall_ms")
BENCH_COLUMNS = ("mode", "workers", "placement", "shuffle", "status", "runtime_s",
                 "preprocess_s", "backing_bytes", "peak_ledger_bytes", "remote_bytes",
                 "grad_bytes", "final_val_mae", "error")
SIZECALC_COLUMNS = ("dataset", "E", "N", "F", "h", "width", "materialized_bytes",
                    "index_bytes", "reduction_pct")


class UsageError(Exception):
    """Bad flags detected after argparse accepted them."""


# --- run configuration ---------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    """Everything that determines a train run. Round-trips through flags."""

    data: str = None
    adjacency: str = None
    kernel_width: float = 1.0
    threshold: float = 0.1
    entries: int = 2000
    nodes: int = 25
    features: int = 1
    dynamics: str = "diffusion"
    noise: float = 0.1
    noise_corr: float = 0.5
    width: int = 8
    horizon: int = 12
    train_frac: float = 0.7
    val_frac: float = 0.1
    batch_size: int = 32
    epochs: int = 10
    mode: str = "index"
    workers: int = 1
    placement: str = "replicated"
    shuffle: str = None
    seed: int = 0
    model: str = "gcgru"
    hidden: int = 16
    order: int = 2
    lr: float = 1e-2
    stats_mode: str = "window_weighted"
    per_feature: bool = False
    out: str = "stib-out"

    def to_flags(self, exclude=()):
        """Canonical flag list; parsing it back yields an equal config."""
        out = []
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None or f.name in exclude:
                continue
            flag = "--" + f.name.replace("_", "-")
            if isinstance(value, bool):
                if value:
                    out.append(flag)
                continue
            out.extend([flag, repr(value) if isinstance(value, float) else str(value)])
        return out

    def to_line(self):
        return shlex.join(self.to_flags())

    @classmethod
    def from_flags(cls, argv):
        parser = argparse.ArgumentParser(prog="stib train", add_help=False)
        _add_run_flags(parser)
        return cls.from_namespace(parser.parse_args(argv))

    @classmethod
    def from_namespace(cls, ns):
        return cls(**{f.name: getattr(ns, f.name) for f in fields(cls)})

    def dist_plan(self):
        return DistPlan(workers=self.workers, per_worker_batch=self.batch_size,
                        placement=self.placement, shuffle=self.shuffle,
                        base_seed=self.seed, epochs=self.epochs)

    def model_config(self):
        return ModelConfig(kind=self.model, hidden=self.hidden, order=self.order,
                           lr=self.lr, seed=self.seed)


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _add_data_flags(p):
    g = p.add_argument_group("data")
    g.add_argument("--data", help="signal file (.stb, or header-free .csv with one node per column); "
                                  "omit to generate a synthetic signal")
    g.add_argument("--adjacency", help="edge list csv of from,to,distance; node ids are 0..N-1")
    g.add_argument("--kernel-width", type=float, default=1.0)
    g.add_argument("--threshold", type=float, default=0.1)
    g.add_argument("--entries", type=_positive_int, default=2000, help="synthetic entries")
    g.add_argument("--nodes", type=_positive_int, default=25, help="synthetic nodes")
    g.add_argument("--features", type=_positive_int, default=1, help="synthetic features")
    g.add_argument("--dynamics", choices=("diffusion", "random_walk"), default="diffusion")
    g.add_argument("--noise", type=float, default=0.1)
    g.add_argument("--noise-corr", type=float, default=0.5)
    g.add_argument("--width", type=int, choices=(4, 8), default=8,
                   help="element width in bytes for csv input")
    g.add_argument("--horizon", type=_positive_int, default=12)
    g.add_argument("--train-frac", type=float, default=0.7)
    g.add_argument("--val-frac", type=float, default=0.1)
    g.add_argument("--stats-mode", choices=STAT_MODES, default="window_weighted")
    g.add_argument("--per-feature", action="store_true", help="per-feature standardization")


def _add_model_flags(p):
    g = p.add_argument_group("training")
    g.add_argument("--batch-size", type=_positive_int, default=32, help="per-worker batch size")
    g.add_argument("--epochs", type=int, default=10)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--model", choices=("gcgru", "linear"), default="gcgru")
    g.add_argument("--hidden", type=_positive_int, default=16)
    g.add_argument("--order", type=_positive_int, default=2)
    g.add_argument("--lr", type=float, default=1e-2)


def _add_run_flags(p):
    _add_data_flags(p)
    _add_model_flags(p)
    p.add_argument("--mode", choices=("index", "materialized"), default="index")
    p.add_argument("--workers", type=_positive_int, default=1)
    p.add_argument("--placement", choices=PLACEMENTS, default="replicated")
    p.add_argument("--shuffle", choices=("global", "local_batch"), default=None,
                   help="defaults to the shuffle the placement requires")
    p.add_argument("--out", default="stib-out", help="output directory")


def build_parser():
    parser = argparse.ArgumentParser(prog="stib", description="Index-batching toolkit for "
                                     "spatiotemporal sequence-to-sequence training.")
    parser.add_argument("--version", action="version", version=f"stib {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sizecalc", help="closed-form memory footprint of both layouts")
    p.add_argument("--preset", action="append", choices=["all", *PRESETS],
                   help="dataset preset (repeatable); 'all' lists every preset")
    p.add_argument("--entries", type=_positive_int)
    p.add_argument("--nodes", type=_positive_int)
    p.add_argument("--features", type=_positive_int)
    p.add_argument("--horizon", type=_positive_int)
    p.add_argument("--width", type=_positive_int, default=8, help="bytes per element")
    p.add_argument("--human", action="store_true", help="readable summary instead of csv")
    p.add_argument("--output", "-o", help="write csv here instead of stdout")

    p = sub.add_parser("train", help="train one configuration")
    _add_run_flags(p)
    p.add_argument("--no-plot", action="store_true", help="skip the svg figure")

    p = sub.add_parser("bench", help="compare layouts and placements over a config grid")
    _add_data_flags(p)
    _add_model_flags(p)
    p.add_argument("--modes", default="index,materialized")
    p.add_argument("--workers", default="1,2,4")
    p.add_argument("--placements", default="replicated")
    p.add_argument("--out", default="stib-bench")
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(epochs=1)
    return parser


# --- helpers ---------------------------------------------------------------------------

def _header(fmt, command, config_line):
    return f"# format: {fmt}\n# config: stib {command} {config_line}\n".replace(" \n", "\n")


def _csv_text(columns, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    w.writerows(rows)
    return buf.getvalue()


def _load_inputs(cfg):
    """Signal and graph for ``cfg``: from files, or generated."""
    if cfg.data is None:
        return gen_synthetic(cfg.entries, cfg.nodes, cfg.features, seed=cfg.seed,
                             dynamics=cfg.dynamics, noise=cfg.noise, noise_corr=cfg.noise_corr)
    signal = load_signal(cfg.data, element_width=cfg.width)
    ids = [str(i) for i in range(signal.nodes)]
    if cfg.adjacency is None:
        if cfg.model == "gcgru":
            log.warning("no --adjacency given; graph convolution degenerates to node-wise")
        return signal, GraphSpec.edgeless(signal.nodes)
    graph = build_weighted_adjacency(load_edges(cfg.adjacency), ids,
                                     kernel_width=cfg.kernel_width, threshold=cfg.threshold)
    return signal, graph


def run_config(cfg, ledger=None):
    """Full pipeline for one config; returns (result, source, seconds spent preparing)."""
    dist = cfg.dist_plan()
    mcfg = cfg.model_config()
    signal, graph = _load_inputs(cfg)
    plan = plan_windows(signal, cfg.horizon, split=(cfg.train_frac, cfg.val_frac))
    if dist.epochs > 0:
        steps_per_epoch(plan, dist)  # fail on an unfillable global batch before any compute
    ledger = ledger if ledger is not None else AllocLedger()
    t0 = time.perf_counter()
    source = prepare_source(signal, plan, cfg.mode, cfg.stats_mode, cfg.per_feature, ledger)
    prep_s = time.perf_counter() - t0
    result = run_distributed(source, graph, dist, mcfg)
    return result, source, prep_s


def _validate(cfg):
    cfg.dist_plan()
    if cfg.epochs < 0:
        raise ConfigError("--epochs must be >= 0")
    if not (0 < cfg.train_frac < 1 and 0 < cfg.val_frac < 1 and cfg.train_frac + cfg.val_frac < 1):
        raise ConfigError("--train-frac and --val-frac must lie in (0, 1) and sum below 1")
    if cfg.data is not None and not Path(cfg.data).exists():
        raise ConfigError(f"--data {cfg.data} does not exist")
    if cfg.adjacency is not None and not Path(cfg.adjacency).exists():
        raise ConfigError(f"--adjacency {cfg.adjacency} does not exist")


# --- subcommands --------------------------------------------------------------------------

def cmd_sizecalc(args, stdout):
    manual = [args.entries, args.nodes, args.features, args.horizon]
    if args.preset and any(v is not None for v in manual):
        raise UsageError("--preset cannot be combined with --entries/--nodes/--features/--horizon")
    if not args.preset:
        missing = [n for n, v in zip(("--entries", "--nodes", "--features", "--horizon"), manual)
                   if v is None]
        if missing:
            raise UsageError(f"missing required flag(s) {', '.join(missing)} (or use --preset)")
        jobs = [("custom", args.entries, args.nodes, args.features, args.horizon)]
        config = (f"--entries {args.entries} --nodes {args.nodes} --features {args.features} "
                  f"--horizon {args.horizon} --width {args.width}")
    else:
        names = list(PRESETS) if "all" in args.preset else args.preset
        jobs = [(n, PRESETS[n].entries, PRESETS[n].nodes, PRESETS[n].features, PRESETS[n].horizon)
                for n in names]
        config = " ".join(f"--preset {n}" for n in args.preset) + f" --width {args.width}"

    rows = []
    lines = []
    for name, e, n, f, h in jobs:
        try:
            est = estimate(e, n, f, h, args.width)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        rows.append((name, e, n, f, h, args.width, est.materialized_bytes, est.index_bytes,
                     f"{100 * est.reduction_fraction:.4f}"))
        lines.append(f"{name} (E={e} N={n} F={f} h={h}, {args.width}-byte): {est.render()}")
    text = (_header(SIZECALC_FORMAT, "sizecalc", config) + _csv_text(SIZECALC_COLUMNS, rows))
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    if args.human:
        stdout.write("\n".join(lines) + "\n")
    elif not args.output:
        stdout.write(text)
    return EXIT_OK


def _stat_text(value):
    if isinstance(value, float):
        return repr(value)
    return ",".join(repr(float(v)) for v in value)


def _metrics_text(cfg_line, metrics):
    rows = [(m.epoch, m.split, repr(m.mae), m.steps, m.data_bytes_remote, m.grad_bytes,
             f"{m.wall_ms:.3f}") for m in metrics]
    return _header(METRICS_FORMAT, "train", cfg_line) + _csv_text(METRIC_COLUMNS, rows)


def cmd_train(args, stdout):
    cfg = RunConfig.from_namespace(args)
    _validate(cfg)
    line = cfg.to_line()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)

    result, source, _ = run_config(cfg)
    (out / "metrics.csv").write_text(_metrics_text(line, result.metrics), encoding="utf-8")
    report = ledger_report(result.alloc)
    (out / "ledger.csv").write_text(_header(LEDGER_FORMAT, "train", line) + report.to_csv(),
                                    encoding="utf-8")
    stats = source.stats
    save_checkpoint(result.theta, cfg.model_config(), out / "checkpoint",
                    extra={"config": f"stib train {line}", "mu": _stat_text(stats.mu),
                           "sigma": _stat_text(stats.sigma), "stats_mode": stats.mode})
    if not args.no_plot:
        from .plotting import learning_curves

        learning_curves(result.metrics, out / "mae.svg",
                        description=f"stib train {line}",
                        title=f"{cfg.model} {cfg.mode} K={cfg.workers} {cfg.placement}")
    stdout.write(f"val MAE {result.series()[0][1]:.6g} -> {result.final('val'):.6g} after "
                 f"{cfg.epochs} epochs; outputs in {out}\n")
    stdout.write(str(report) + "\n")
    return EXIT_OK


def _split_list(text, name, cast=str, choices=None):
    items = [t.strip() for t in text.split(",") if t.strip()]
    if not items:
        raise UsageError(f"--{name} is empty; the bench needs at least one configuration")
    try:
        items = [cast(t) for t in items]
    except ValueError:
        raise UsageError(f"--{name}: cannot parse {text!r}") from None
    if choices is not None:
        bad = [t for t in items if t not in choices]
        if bad:
            raise UsageError(f"--{name}: unknown value(s) {bad}; expected {list(choices)}")
    if cast is int and any(v < 1 for v in items):
        raise UsageError(f"--{name}: values must be >= 1")
    return items


def cmd_bench(args, stdout):
    modes = _split_list(args.modes, "modes", choices=("index", "materialized"))
    workers = _split_list(args.workers, "workers", cast=int)
    placements = _split_list(args.placements, "placements", choices=PLACEMENTS)
    base = dict(vars(args))
    base.update(mode=modes[0], workers=workers[0], placement=placements[0], shuffle=None)
    base_cfg = RunConfig.from_namespace(argparse.Namespace(**base))
    _validate(base_cfg)
    grid = ("mode", "workers", "placement", "shuffle")
    bench_line = shlex.join(base_cfg.to_flags(exclude=grid) + [
        "--modes", ",".join(modes), "--workers", ",".join(map(str, workers)),
        "--placements", ",".join(placements)])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    rows = []
    for mode, placement, k in itertools.product(modes, placements, workers):
        cfg = replace(base_cfg, mode=mode, workers=k, placement=placement, shuffle=None)
        row = dict.fromkeys(BENCH_COLUMNS, "")
        row.update(mode=mode, workers=k, placement=placement)
        t0 = time.perf_counter()
        try:
            row["shuffle"] = cfg.dist_plan().shuffle
            result, source, prep_s = run_config(cfg)
            reduced = result.comm.total("gradient_bytes_reduced")
            row.update(status="ok", preprocess_s=f"{prep_s:.6f}",
                       backing_bytes=result.alloc.backing_bytes(),
                       peak_ledger_bytes=result.alloc.bytes("worker_data"),
                       remote_bytes=result.comm.total("data_bytes_fetched_remote"),
                       grad_bytes=reduced, final_val_mae=repr(result.final("val")))
        except MemoryError as exc:
            row.update(status="oom", error=str(exc))
        except (StibError, ValueError, FloatingPointError, RuntimeError) as exc:
            row.update(status="error", error=f"{type(exc).__name__}: {exc}")
            log.debug("config %s failed\n%s", cfg.to_line(), traceback.format_exc())
        row["runtime_s"] = f"{time.perf_counter() - t0:.6f}"
        rows.append(row)
        stdout.write(f"{mode:>12} {placement:>11} K={k:<3} {row['status']:>5} "
                     f"{row['runtime_s']}s {row['error']}\n")

    text = _header(BENCH_FORMAT, "bench", bench_line) + _csv_text(
        BENCH_COLUMNS, [[r[c] for c in BENCH_COLUMNS] for r in rows])
    (out / "bench.csv").write_text(text, encoding="utf-8")
    if not args.no_plot:
        from .plotting import metric_vs_workers

        for metric, label in (("runtime_s", "runtime (s)"),
                              ("peak_ledger_bytes", "resident window data (bytes)"),
                              ("remote_bytes", "remote data bytes")):
            metric_vs_workers(rows, metric, out / f"bench_{metric}.svg",
                              description=f"stib bench {bench_line}", ylabel=label)
    failed = sum(r["status"] != "ok" for r in rows)
    stdout.write(f"{len(rows)} configurations, {failed} failed; outputs in {out}\n")
    return EXIT_OK


COMMANDS = {"sizecalc": cmd_sizecalc, "train": cmd_train, "bench": cmd_bench}


def main(argv=None, stdout=None):
    stdout = stdout or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args, stdout)
    except (UsageError, ConfigError) as exc:
        sys.stderr.write(f"stib {args.command}: error: {exc}\n")
        return EXIT_USAGE
    except (StibError, ValueError, OSError, MemoryError, FloatingPointError, RuntimeError) as exc:
        sys.stderr.write(f"stib {args.command}: {type(exc).__name__}: {exc}\n")
        log.debug(traceback.format_exc())
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
