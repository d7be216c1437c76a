"""``actmat`` command-line entry point.

Exit codes: 0 success, 2 usage, 3 input format, 4 numerical failure,
5 verification failure. Data goes to stdout, logging to stderr; errors are
a single ``error=<kind> message=...`` line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import warnings
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .bench import bench, rows_to_csv, synthetic_taskset
from .config import ConfigError, RunConfig, load_run_config, scenario_params, scenario_to_ini
from .covariance import (
    CovarianceBundle,
    actmat_bundle,
    bundles_from_checkpoint,
    bundles_to_checkpoint,
    empirical_covariance,
    kappa_ratio_table,
)
from .diagnostics import (
    accumulate_angle_terms,
    format_record,
    pearson_activation_gradnorm,
    angle_error_report,
)
from .flops import FLOP_METHODS, FlopModel, expensive_ops, flops
from .linalg import LinalgError
from .merging import METHODS, InvalidCovarianceError, MergeConfig, MissingCovarianceError, TaskSet, merge
from .tensor_store import (
    FILE_SUFFIX,
    ArchitectureMismatchError,
    Checkpoint,
    ContainerFormatError,
    compute_task_vector,
    load_checkpoint,
    save_checkpoint,
)
from .toy import ConvergenceError, TrainingDivergedError, TrainTrace, generate_scenario, layer_inputs, train_full_batch
from .verify import CHECKS, run_all

log = logging.getLogger("actmat")

EXIT_OK, EXIT_USAGE, EXIT_FORMAT, EXIT_NUMERICAL, EXIT_VERIFY = 0, 2, 3, 4, 5


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with its own code
        raise UsageError(message)


def _fail(kind: str, message: str) -> None:
    message = " ".join(str(message).split())
    print(f"error={kind} message={message}", file=sys.stderr)


# ---------------------------------------------------------------------------
# subcommands


def cmd_merge(args, cfg: RunConfig) -> int:
    pretrained = load_checkpoint(cfg.path("pretrained"))
    experts = [load_checkpoint(p) for p in cfg.paths("experts")]
    method = cfg.get("method", "actmat")
    if method not in METHODS:
        raise UsageError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    covs = None
    if cfg.has("covariances"):
        covs = bundles_from_checkpoint(load_checkpoint(cfg.path("covariances")))
        if len(covs) != len(experts):
            raise ContainerFormatError(
                f"covariance file holds {len(covs)} tasks but {len(experts)} experts were given", 0)
    mcfg = MergeConfig(
        method=method,
        alpha=cfg.get("alpha", None, float),
        pinv_rtol=cfg.get("pinv_rtol", None, float),
        embedding_pattern=cfg.get("embedding_pattern", r"embed"),
        tsv_rank_fraction=cfg.get("tsv_rank_fraction", 1.0, float),
    )
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        merged = merge(TaskSet(pretrained, experts, covs), mcfg, name=cfg.get("name", "merged"))
    for w in caught:
        log.warning("%s: %s", w.category.__name__, w.message)
    out = cfg.path("output", must_exist=False)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(merged, out)
    print(format_record("merge", method=method, tasks=len(experts), tensors=len(merged), output=str(out)))
    return EXIT_OK


def cmd_train_toy(args, cfg: RunConfig) -> int:
    params = scenario_params(cfg)
    out_dir = cfg.path("output_dir", must_exist=False)
    out_dir.mkdir(parents=True, exist_ok=True)
    sc = generate_scenario(**params)
    layers = sc.net.weight_names
    save_checkpoint(sc.pretrained, out_dir / f"pretrained{FILE_SUFFIX}")
    bundles = []
    for t in range(sc.T):
        expert, traces = train_full_batch(sc, t, capture_layers=layers)
        save_checkpoint(expert, out_dir / f"expert{t}{FILE_SUFFIX}")
        tensors = {}
        for tr in traces.values():
            tensors.update(tr.to_tensors())
        save_checkpoint(Checkpoint(f"trace{t}", tensors), out_dir / f"trace{t}{FILE_SUFFIX}")
        inputs = layer_inputs(sc.net, expert, sc.tasks[t].X)
        bundles.append(CovarianceBundle(
            f"task{t}", {k: empirical_covariance(z) for k, z in inputs.items()}, "empirical",
            sc.tasks[t].X.shape[0],
        ))
        print(format_record("expert", task=t, output=str(out_dir / f"expert{t}{FILE_SUFFIX}")))
    save_checkpoint(bundles_to_checkpoint(bundles), out_dir / f"covariances{FILE_SUFFIX}")
    (out_dir / "scenario.ini").write_text(scenario_to_ini(params), encoding="utf-8")
    return EXIT_OK


ANGLES_CSV_HEADER = ["source", "layer", "K", "eps_cross", "eps_corr", "eps_drift", "lhs_angle", "bound_ok"]


def _write_csv(path: Path, rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)


def cmd_diagnose(args, cfg: RunConfig) -> int:
    if not (cfg.has("traces") or cfg.has("experts")):
        raise UsageError("diagnose needs --traces or --pretrained/--experts/--covariances")
    if cfg.has("traces"):
        rows = [ANGLES_CSV_HEADER]
        for path in cfg.paths("traces"):
            traces = TrainTrace.from_tensors(load_checkpoint(path).tensors)
            if not traces:
                raise ContainerFormatError(f"{path} holds no trace/ tensors", 0)
            for layer, tr in sorted(traces.items()):
                rep = angle_error_report(accumulate_angle_terms(tr), tr.delta())
                corr = pearson_activation_gradnorm(tr)
                fields = dict(source=path.name, layer=layer, K=tr.K, eps_cross=rep.eps_cross,
                              eps_corr=rep.eps_corr, eps_drift=rep.eps_drift, lhs=rep.lhs_angle,
                              bound_ok=rep.bound_satisfied, degenerate=rep.degenerate)
                fields.update({f"pearson_{k}": v for k, v in corr.quantiles.items()})
                print(format_record("angles", **fields))
                rows.append([path.name, layer, tr.K, rep.eps_cross, rep.eps_corr, rep.eps_drift,
                             rep.lhs_angle, rep.bound_satisfied])
        if cfg.has("output"):
            _write_csv(cfg.path("output", must_exist=False), rows)
    if cfg.has("experts"):
        pretrained = load_checkpoint(cfg.path("pretrained"))
        experts = [load_checkpoint(p) for p in cfg.paths("experts")]
        true = bundles_from_checkpoint(load_checkpoint(cfg.path("covariances")))
        if len(true) != len(experts):
            raise ContainerFormatError(
                f"covariance file holds {len(true)} tasks but {len(experts)} experts were given", 0)
        layers = sorted(true[0].layer_covs)
        est = [actmat_bundle(compute_task_vector(pretrained, ex, b.task_id), layers)
               for ex, b in zip(experts, true)]
        report = kappa_ratio_table(true, est)
        for layer in layers:
            q = report.quantiles.get(layer, {})
            print(format_record("kappa", layer=layer, **{f"ratio_{k}": v for k, v in q.items()}))
        if cfg.has("kappa_output"):
            _write_csv(cfg.path("kappa_output", must_exist=False), report.to_csv_rows())
    return EXIT_OK


def cmd_verify(args, cfg: RunConfig) -> int:
    seed = cfg.get("seed", 0, int)
    only = [s for s in cfg.get("only", "").split(",") if s] or None
    if only:
        unknown = set(only) - set(CHECKS)
        if unknown:
            raise UsageError(f"unknown check(s) {sorted(unknown)}")
    results = run_all(seed, only)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


def cmd_bench(args, cfg: RunConfig) -> int:
    methods = [m for m in cfg.get("methods", ",".join(METHODS)).split(",") if m]
    ts = synthetic_taskset(cfg.get("n", 128, int), cfg.get("tasks", 4, int), cfg.get("seed", 0, int))
    rows = bench(ts, methods, cfg.get("repeats", 5, int))
    text = rows_to_csv(rows)
    if cfg.has("output"):
        cfg.path("output", must_exist=False).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_flops(args, cfg: RunConfig) -> int:
    method = cfg.require("method")
    model = FlopModel(method, cfg.require("t", int), cfg.require("n", int), cfg.get("l", 1, int))
    merge_flops, pre = flops(model)
    if args.verbose_record:
        print(format_record("flops", method=method, merge=merge_flops, preprocess=pre,
                            expensive_ops=expensive_ops(method, model.T)))
    else:
        print(merge_flops)
        if model.method == "regmean" and cfg.has("l"):
            print(pre)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="actmat", description="Layer-wise model merging toolkit.")
    p.add_argument("--version", action="version", version=f"actmat {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging on stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="INI config file; flags override its values")
        return sp

    sp = common(sub.add_parser("merge", help="merge expert checkpoints"))
    sp.add_argument("--pretrained")
    sp.add_argument("--experts", nargs="+")
    sp.add_argument("--method", choices=METHODS)
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--covariances", help="covariance container (regmean)")
    sp.add_argument("--pinv-rtol", type=float)
    sp.add_argument("--tsv-rank-fraction", type=float)
    sp.add_argument("--embedding-pattern")
    sp.add_argument("--output")
    sp.set_defaults(func=cmd_merge)

    sp = common(sub.add_parser("diagnose", help="covariance-estimate diagnostics"))
    sp.add_argument("--traces", nargs="+", help="trace containers written by train-toy")
    sp.add_argument("--pretrained")
    sp.add_argument("--experts", nargs="+")
    sp.add_argument("--covariances", help="container of true covariances")
    sp.add_argument("--output", help="CSV export of the angle records")
    sp.add_argument("--kappa-output", help="CSV export of pairwise kappa ratios")
    sp.set_defaults(func=cmd_diagnose)

    sp = common(sub.add_parser("train-toy", help="train toy experts with captures"))
    sp.add_argument("--seed", type=int)
    sp.add_argument("--tasks", type=int)
    sp.add_argument("--widths", help="comma separated layer widths")
    sp.add_argument("--n-samples", type=int)
    sp.add_argument("--activation", choices=("identity", "tanh", "relu"))
    sp.add_argument("--eta", type=float)
    sp.add_argument("--iterations", type=int, help="K; K+1 updates are applied")
    sp.add_argument("--loss", choices=("mse", "norm"))
    sp.add_argument("--teacher-shift", help="teacher = pretrained + shift * noise; 'none' for an unrelated teacher")
    sp.add_argument("--output-dir")
    sp.set_defaults(func=cmd_train_toy)

    sp = common(sub.add_parser("verify", help="run the invariant suite"))
    sp.add_argument("--seed", type=int)
    sp.add_argument("--only", nargs="+", help="subset of checks")
    sp.set_defaults(func=cmd_verify)

    sp = common(sub.add_parser("bench", help="time merge rules on a synthetic layer"))
    sp.add_argument("--methods", nargs="+")
    sp.add_argument("--n", type=int)
    sp.add_argument("--tasks", type=int)
    sp.add_argument("--repeats", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--output")
    sp.set_defaults(func=cmd_bench)

    sp = common(sub.add_parser("flops", help="closed-form merge cost"))
    sp.add_argument("--method", choices=FLOP_METHODS)
    sp.add_argument("--t", type=int)
    sp.add_argument("--n", type=int)
    sp.add_argument("--l", type=int, help="covariance sample count (regmean preprocessing)")
    sp.add_argument("--record", dest="verbose_record", action="store_true", help="key=value output")
    sp.set_defaults(func=cmd_flops)
    return p


_NON_CONFIG = {"command", "func", "config", "verbose", "verbose_record"}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing subcommand")
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        _fail("usage", exc)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {k: v for k, v in vars(args).items() if k not in _NON_CONFIG}
    try:
        cfg = load_run_config(args.command, args.config, overrides)
        return args.func(args, cfg)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        _fail("usage", exc)
        return EXIT_USAGE
    except (ContainerFormatError, ArchitectureMismatchError, MissingCovarianceError, KeyError) as exc:
        _fail("input", exc)
        return EXIT_FORMAT
    except (LinalgError, InvalidCovarianceError, TrainingDivergedError, ConvergenceError,
            FloatingPointError, np.linalg.LinAlgError) as exc:
        _fail("numerical", exc)
        return EXIT_NUMERICAL
    except (ValueError, OSError) as exc:
        _fail("input", exc)
        return EXIT_FORMAT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
