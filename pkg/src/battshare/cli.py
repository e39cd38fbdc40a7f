"""Command-line entry point: ``battshare <subcommand> ...``.

Results go to files or stdout as JSON/CSV, diagnostics to stderr. Exit codes:
0 success, 1 domain or validation error, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

from battshare import __version__
from battshare.battery import exact_stationary, simulate_chain, simulate_trace
from battshare.errors import BattShareError, DomainError
from battshare.ingest import (
    DEFAULT_CADENCE_SECONDS,
    fit_dtmc,
    load_trace,
    net_generation,
    resample,
    to_energy,
)
from battshare.large_deviations import decay_rate
from battshare.markov_core import load_chain, product_chain, validate
from battshare.sizing import (
    DEFAULT_EPS,
    DEFAULT_SUBSET_CAP,
    StudyRow,
    StudyTable,
    min_battery_chain,
    min_battery_trace,
    scaling_study,
)

log = logging.getLogger("battshare")

OUTPUT_DIR_ENV = "BATTSHARE_OUTPUT_DIR"
CI_ENV = "BATTSHARE_CI"

STUDY_COLUMNS = [
    ("N", "number of locations sharing the battery"),
    ("epsilon", "LOLP target"),
    ("subset_ids", "';'-separated location ids of the subset with the largest requirement"),
    ("B_requirement_MJ", "minimal shared battery size for that subset, MJ"),
    ("B_requirement_MWh", "the same size in MWh (MJ / 3600)"),
]


@dataclass
class StudyConfig:
    """Inputs of one scaling study; embedded in every output it produces."""

    traces: list
    demand_fraction: float | None = 0.6
    eps: list = field(default_factory=lambda: list(DEFAULT_EPS))
    resolution_mj: float | None = None
    subset_cap: int = DEFAULT_SUBSET_CAP
    cadence_seconds: int = DEFAULT_CADENCE_SECONDS
    resample: int = 1
    forward_fill: bool = False
    seed: int | None = None

    def check(self):
        for p in self.traces:
            if not Path(p).is_file():
                raise DomainError(f"trace file not found: {p}")
        if not self.eps:
            raise DomainError("empty epsilon list")
        for e in self.eps:
            if not 0 < e < 1:
                raise DomainError(f"epsilon values must lie in (0, 1), got {e}")
        return self

    def canonical(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))


def provenance(config: dict | str) -> dict:
    text = config if isinstance(config, str) else json.dumps(config, sort_keys=True, separators=(",", ":"))
    return {
        "tool": "battshare",
        "version": __version__,
        "config_sha256": hashlib.sha256(text.encode("utf-8")).hexdigest(),
        "config": text,
    }


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# -- study report ------------------------------------------------------------

def study_to_dict(study: StudyTable) -> dict:
    return {
        "locations": list(study.locations),
        "demand_fraction": study.demand_fraction,
        "eps_list": list(study.eps_list),
        "resolution_MJ": study.resolution_MJ,
        "cadence_seconds": study.cadence_seconds,
        "rows": [
            {"N": r.N, "epsilon": r.epsilon, "subset_ids": list(r.subset),
             "B_requirement_MJ": r.B_requirement_MJ, "B_requirement_MWh": r.B_requirement_MWh}
            for r in study.rows
        ],
        "subsets": [
            {"N": n, "epsilon": e, "subset_ids": list(s), "B_MJ": b, "lolp": p}
            for n, e, s, b, p in study.subsets
        ],
    }


def study_from_dict(doc: dict) -> StudyTable:
    table = StudyTable(
        tuple(doc["locations"]),
        doc.get("demand_fraction"),
        tuple(doc["eps_list"]),
        doc["resolution_MJ"],
        doc["cadence_seconds"],
    )
    table.rows = [StudyRow(r["N"], r["epsilon"], tuple(r["subset_ids"]), r["B_requirement_MJ"]) for r in doc["rows"]]
    table.subsets = [(s["N"], s["epsilon"], tuple(s["subset_ids"]), s["B_MJ"], s["lolp"])
                     for s in doc.get("subsets", [])]
    return table


def study_csv(study: StudyTable, prov: dict) -> str:
    buf = io.StringIO()
    buf.write(f"# {prov['tool']} {prov['version']}\n")
    buf.write(f"# config_sha256: {prov['config_sha256']}\n")
    buf.write(f"# config: {prov['config']}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([c for c, _ in STUDY_COLUMNS])
    for r in study.rows:
        w.writerow([r.N, repr(r.epsilon), ";".join(r.subset), repr(r.B_requirement_MJ), repr(r.B_requirement_MWh)])
    return buf.getvalue()


def emit_report(study: StudyTable, formats=("csv", "json"), out_dir=".", config: dict | str = "{}",
                stem: str = "study") -> list:
    """Write the study table as CSV and/or JSON; returns the written paths."""
    if not study.eps_list:
        raise DomainError("study has an empty epsilon list")
    if not study.rows:
        raise DomainError("study has no rows")
    prov = provenance(config)
    out_dir = Path(out_dir)
    written = []
    for fmt in formats:
        if fmt == "csv":
            path = out_dir / f"{stem}.csv"
            _atomic_write(path, study_csv(study, prov))
        elif fmt == "json":
            path = out_dir / f"{stem}.json"
            _atomic_write(path, _dump({"provenance": prov, **study_to_dict(study)}))
        else:
            raise DomainError(f"unknown report format {fmt!r}")
        written.append(path)
    return written


# -- subcommands -------------------------------------------------------------

def _load_model(paths):
    models = [load_chain(p) for p in paths]
    for m in models:
        validate(m, strict=True)
    return (models[0] if len(models) == 1 else product_chain(models)), models


def _emit(args, payload, config):
    payload = {"provenance": provenance(config), **payload}
    text = _dump(payload)
    if getattr(args, "out", None):
        _atomic_write(Path(args.out), text)
        log.info("wrote %s", args.out)
    else:
        sys.stdout.write(text)


def _args_config(args) -> dict:
    skip = {"func", "out", "out_dir", "config", "verbose", "ci", "format", "schema"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def cmd_validate(args):
    model = load_chain(args.chain)
    report = validate(model)
    _emit(args, report.to_dict(), _args_config(args))
    if not report.ok:
        for c in report.failures():
            log.error("%s failed at state %s: %s", c.name, c.state, c.detail)
        return 1
    return 0


def cmd_fit(args):
    trace = load_trace(args.trace, args.cadence_seconds, args.forward_fill)
    trace = resample(trace, args.resample)
    net = to_energy(net_generation(trace, args.demand_fraction))
    bins = [float(x) for x in args.edges.split(",")] if args.edges else args.bins
    granularity = args.granularity
    if granularity is None:
        # Smallest bin width, so that distinct bins keep distinct rewards.
        probe = fit_dtmc(net, bins, 1.0, args.smoothing)
        widths = probe.centers[1:] - probe.centers[:-1]
        granularity = float(widths.min()) if widths.size else 1.0
    report = fit_dtmc(net, bins, granularity, args.smoothing)
    out = Path(args.out)
    report.write(out, out.with_suffix(".meta.json"))
    sys.stdout.write(_dump({"chain": str(out), "granularity_MJ": granularity,
                            "a1_ok": report.a1_ok, "a2_ok": report.a2_ok,
                            "valid": report.validation.ok}))
    return 0 if report.validation.ok else 1


def cmd_decay(args):
    model, users = _load_model(args.chain)
    eps = args.eps or list(DEFAULT_EPS)
    result = decay_rate(model)
    per_user = [decay_rate(u).rate for u in users]
    payload = result.to_dict(eps)
    payload["per_user_lambdas"] = per_user
    payload["lambda_min"] = min(per_user)
    payload["bound_satisfied"] = result.rate >= min(per_user) - 1e-9
    _emit(args, payload, _args_config(args))
    return 0


def cmd_lolp_exact(args):
    model, _ = _load_model(args.chain)
    dist = exact_stationary(model, args.battery)
    payload = dist.to_dict()
    payload["sandwich_lower"] = dist.sandwich_constant * dist.empty_prob
    _emit(args, payload, _args_config(args))
    return 0


def cmd_lolp_mc(args):
    if args.seed is None:
        if args.ci:
            raise UsageError("--seed is mandatory for Monte Carlo subcommands in CI mode")
        args.seed = 0
    model, _ = _load_model(args.chain)
    stats = simulate_chain(model, args.battery, args.steps, args.burn_in, args.seed)
    _emit(args, stats.to_dict(), _args_config(args))
    return 0


def _trace_net_energy(args):
    trace = load_trace(args.trace, args.cadence_seconds, args.forward_fill)
    if args.demand_fraction is not None:
        trace = net_generation(trace, args.demand_fraction)
    return to_energy(trace)


def cmd_simulate(args):
    net = _trace_net_energy(args)
    run = simulate_trace(net, args.battery_mj, args.b0)
    if args.occupancy_csv:
        run.write_csv(args.occupancy_csv)
    _emit(args, {"capacity_MJ": run.capacity, "lolp": run.lolp, "steps": int(run.loss.size),
                 "loss_events": int(run.loss.sum())}, _args_config(args))
    return 0


def cmd_size(args):
    eps_list = args.eps or list(DEFAULT_EPS)
    if bool(args.chain) == bool(args.trace):
        raise UsageError("size needs exactly one of --chain or --trace")
    results = []
    if args.chain:
        model, _ = _load_model(args.chain)
        if args.method == "monte-carlo" and args.seed is None and args.ci:
            raise UsageError("--seed is mandatory for Monte Carlo subcommands in CI mode")
        for e in eps_list:
            results.append(min_battery_chain(model, e, args.method, mc_steps=args.steps,
                                             seed=args.seed or 0).to_dict())
    else:
        net = _trace_net_energy(args)
        resolution = args.resolution_mj
        if resolution is None:
            if args.demand_fraction is None:
                raise UsageError("--resolution-mj is required for net traces")
            # One step of demand: net mean is (1 - f) * g_mean and demand is f * g_mean.
            resolution = args.demand_fraction * net.mean() / (1 - args.demand_fraction)
        for e in eps_list:
            results.append(min_battery_trace(net, e, resolution).to_dict())
    _emit(args, {"results": results}, _args_config(args))
    return 0


def _study_config(args) -> StudyConfig:
    cfg = {}
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise DomainError(f"cannot read config {args.config}: {exc}") from exc
        unknown = set(cfg) - set(StudyConfig.__dataclass_fields__)
        if unknown:
            raise DomainError(f"unknown config keys: {sorted(unknown)}")
    overrides = {
        "traces": args.traces,
        "demand_fraction": args.demand_fraction,
        "eps": args.eps,
        "resolution_mj": args.resolution_mj,
        "subset_cap": args.subset_cap,
        "cadence_seconds": args.cadence_seconds,
        "resample": args.resample,
        "seed": args.seed,
    }
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    if args.net_traces:
        cfg["demand_fraction"] = None
    if args.forward_fill:
        cfg["forward_fill"] = True
    if not cfg.get("traces"):
        raise UsageError("study needs --traces or a config with 'traces'")
    return StudyConfig(**cfg).check()


def cmd_study(args):
    config = _study_config(args)
    traces = [resample(load_trace(p, config.cadence_seconds, config.forward_fill), config.resample)
              for p in config.traces]
    study = scaling_study(traces, config.demand_fraction, config.eps, config.resolution_mj, config.subset_cap)
    out_dir = args.out_dir or os.environ.get(OUTPUT_DIR_ENV, ".")
    for path in emit_report(study, args.format or ("csv", "json"), out_dir, config.canonical()):
        log.info("wrote %s", path)
    return 0


def cmd_report(args):
    if args.schema:
        for name, doc in STUDY_COLUMNS:
            sys.stdout.write(f"{name}\t{doc}\n")
        return 0
    if not args.study:
        raise UsageError("report needs --study or --schema")
    doc = json.loads(Path(args.study).read_text(encoding="utf-8"))
    config = doc.get("provenance", {}).get("config", "{}")
    study = study_from_dict(doc)
    out_dir = args.out_dir or os.environ.get(OUTPUT_DIR_ENV, ".")
    for path in emit_report(study, args.format or ("csv",), out_dir, config, stem=args.stem):
        log.info("wrote %s", path)
    return 0


# -- parser ------------------------------------------------------------------

class UsageError(Exception):
    pass


def _add_trace_flags(p, demand_default=0.6):
    p.add_argument("--cadence-seconds", type=int, default=DEFAULT_CADENCE_SECONDS)
    p.add_argument("--forward-fill", action="store_true", help="fill missing samples with the previous value")
    p.add_argument("--demand-fraction", type=float, default=demand_default)
    p.add_argument("--net", dest="demand_fraction", action="store_const", const=None,
                   help="the trace already holds net generation")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="battshare", description="Shared-battery LOLP, decay rates and sizing.")
    parser.add_argument("--version", action="version", version=f"battshare {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--ci", action="store_true", default=os.environ.get(CI_ENV) == "1",
                        help=f"CI mode (also via {CI_ENV}=1): Monte Carlo needs an explicit --seed")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("validate", help="check a chain-spec JSON file")
    p.add_argument("--chain", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("fit", help="fit a DTMC to a power trace")
    p.add_argument("--trace", required=True)
    _add_trace_flags(p)
    p.add_argument("--bins", type=int, default=8)
    p.add_argument("--edges", help="comma-separated bin edges in MJ per step")
    p.add_argument("--granularity", type=float, help="MJ per reward unit (default: smallest bin spacing)")
    p.add_argument("--smoothing", type=float, default=0.0)
    p.add_argument("--resample", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("decay", help="LOLP decay rate of one chain or a product of chains")
    p.add_argument("--chain", action="append", required=True)
    p.add_argument("--eps", type=float, nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_decay)

    p = sub.add_parser("lolp-exact", help="exact stationary LOLP for capacity B")
    p.add_argument("--chain", action="append", required=True)
    p.add_argument("--battery", type=int, required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_lolp_exact)

    p = sub.add_parser("lolp-mc", help="Monte Carlo LOLP for capacity B")
    p.add_argument("--chain", action="append", required=True)
    p.add_argument("--battery", type=int, required=True)
    p.add_argument("--steps", type=int, default=10**6)
    p.add_argument("--burn-in", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_lolp_mc)

    p = sub.add_parser("simulate", help="drive a battery with a trace")
    p.add_argument("--trace", required=True)
    _add_trace_flags(p)
    p.add_argument("--battery-mj", type=float, required=True)
    p.add_argument("--b0", type=float, default=0.0)
    p.add_argument("--occupancy-csv")
    p.add_argument("--out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("size", help="smallest battery meeting LOLP targets")
    p.add_argument("--chain", action="append")
    p.add_argument("--trace")
    _add_trace_flags(p)
    p.add_argument("--eps", type=float, nargs="+")
    p.add_argument("--method", choices=["exact", "monte-carlo"], default="exact")
    p.add_argument("--steps", type=int, default=10**6)
    p.add_argument("--seed", type=int)
    p.add_argument("--resolution-mj", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_size)

    p = sub.add_parser("study", help="worst-case shared battery vs number of locations")
    p.add_argument("--config", help="StudyConfig JSON; flags override its fields")
    p.add_argument("--traces", nargs="+")
    p.add_argument("--demand-fraction", type=float)
    p.add_argument("--net-traces", action="store_true", help="traces already hold net generation")
    p.add_argument("--eps", type=float, nargs="+")
    p.add_argument("--resolution-mj", type=float)
    p.add_argument("--subset-cap", type=int)
    p.add_argument("--cadence-seconds", type=int)
    p.add_argument("--forward-fill", action="store_true")
    p.add_argument("--resample", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--format", nargs="+", choices=["csv", "json"])
    p.add_argument("--out-dir", help=f"output directory (default ${OUTPUT_DIR_ENV} or .)")
    p.set_defaults(func=cmd_study)

    p = sub.add_parser("report", help="re-emit a study JSON as CSV/JSON, or print the CSV schema")
    p.add_argument("--study")
    p.add_argument("--schema", action="store_true")
    p.add_argument("--format", nargs="+", choices=["csv", "json"])
    p.add_argument("--stem", default="report")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_report)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s: %(message)s"))
    log.handlers = [handler]
    log.propagate = False
    log.setLevel(logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"battshare: error: {exc}", file=sys.stderr)
        return 2
    except (BattShareError, OSError, ValueError) as exc:
        print(f"battshare: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
