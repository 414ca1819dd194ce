"""``stva`` command line: ingest, synth, fit, predict, evaluate, ablate, cv, coef.

Exit status is 0 on success, 1 for invalid input or usage, 2 for numerical
failure. Every run writes ``manifest.json`` into its output directory.
"""

from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .evaluate import (
    FIRST_PEAK,
    MOST_AFFECTED_STATES,
    SECOND_PEAK,
    ablation_table,
    coefficient_export,
    export_geojson,
    in_sample,
    mae,
    merge_benchmarks,
    rolling_predict,
    significance,
    write_ablation_csv,
    write_coefficients_csv,
)
from .geo_graph import GraphError, build_covariance, read_graph
from .ingest import IngestError, WeekIndex, assemble, load_bundle, save_bundle
from .model import ModelParams, predict
from .solver import ABLATIONS, FitError, cross_validate, fit, make_config, read_config
from .synth import SynthSpec, generate, write_csvs

logger = logging.getLogger("stva")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2


class UsageError(Exception):
    pass


class NumericalFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _digests(path) -> dict[str, str]:
    path = Path(path)
    if path.is_dir():
        return {str(p): _sha256(p) for p in sorted(path.rglob("*")) if p.is_file()}
    return {str(path): _sha256(path)}


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict
    seed: int
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    started: str = ""
    finished: str = ""
    timings: dict[str, float] = field(default_factory=dict)
    version: str = __version__

    def write(self, out: Path) -> None:
        self.outputs = {
            str(p.relative_to(out)): _sha256(p)
            for p in sorted(out.rglob("*"))
            if p.is_file() and p.name != "manifest.json"
        }
        self.finished = dt.datetime.now(dt.timezone.utc).isoformat()
        (out / "manifest.json").write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stva", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, panel=True, out=True):
        if panel:
            p.add_argument("--panel", help="panel bundle directory")
        p.add_argument("--config", help="key = value configuration file")
        if out:
            p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--clamp", dest="clamp", action="store_true", default=None)
        p.add_argument("--no-clamp", dest="clamp", action="store_false")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one configuration key")
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("ingest", help="build a panel bundle from raw CSV files")
    common(p, panel=False)
    p.add_argument("--counties-csv")
    p.add_argument("--adjacency-csv")
    p.add_argument("--epi-csv")
    p.add_argument("--mobility-csv")
    p.add_argument("--census-csv")
    p.add_argument("--start", default="2020-03-15", help="first week start (a Sunday)")
    p.add_argument("--weeks", type=int, default=49)
    p.add_argument("--all-states", action="store_true", help="keep non-mainland counties")

    p = sub.add_parser("synth", help="generate a synthetic panel bundle")
    common(p, panel=False)
    p.add_argument("--counties", type=int, default=10)
    p.add_argument("--weeks", type=int, default=60)
    p.add_argument("--edge-probability", type=float, default=0.3)
    p.add_argument("--hubs", type=int, default=1)
    p.add_argument("--mobility-categories", type=int, default=2)
    p.add_argument("--demographic-factors", type=int, default=1)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--coefficient-scale", type=float, default=0.3)
    p.add_argument("--emit-csv", action="store_true", help="also write raw-format CSV files")

    p = sub.add_parser("fit", help="fit the model on a panel")
    common(p)

    p = sub.add_parser("predict", help="forecast the week after the panel ends")
    common(p)
    p.add_argument("--params", help="parameter snapshot directory")

    p = sub.add_parser("evaluate", help="in-sample or rolling one-week-ahead evaluation")
    common(p)
    p.add_argument("--params", help="parameter snapshot (in-sample mode; fitted if absent)")
    p.add_argument("--mode", choices=("in-sample", "one-week-ahead"), default="in-sample")
    p.add_argument("--start", help="first target week (date or 0-based index)")
    p.add_argument("--target", choices=("cases", "deaths"), default="deaths")
    p.add_argument("--min-train", type=int, default=10)
    p.add_argument("--benchmark", action="append", default=[], metavar="NAME=CSV",
                   help="external state,week,predicted_deaths forecasts to merge")

    p = sub.add_parser("ablate", help="compare ablation variants by in-sample MAE")
    common(p)
    p.add_argument("--kinds", default=",".join(ABLATIONS))
    p.add_argument("--target", choices=("cases", "deaths"), default="deaths")

    p = sub.add_parser("cv", help="blocked 5-fold cross-validation over lambda grids")
    common(p)
    p.add_argument("--lambda1-grid", default="0,1,10,100")
    p.add_argument("--lambda2-grid", default="0.1")

    p = sub.add_parser("coef", help="coefficient table with Wald statistics")
    common(p)
    p.add_argument("--params")
    p.add_argument("--focus", help="FIPS of the focus county for a column export")
    p.add_argument("--matrix", choices=("A", "B", "H"), default="A")
    p.add_argument("--lag", type=int, default=1)
    return parser


def _settings(args) -> dict:
    settings = {}
    if args.config:
        settings.update(read_config(args.config))
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        settings[k.strip()] = v.strip()
    if args.seed is not None:
        settings["seed"] = args.seed
    if args.clamp is not None:
        settings["clamp_output"] = args.clamp
    return settings


def _require(args, *names) -> None:
    problems = []
    for name in names:
        value = getattr(args, name.replace("-", "_"), None)
        if value is None:
            problems.append(f"--{name} is required")
        elif not Path(value).exists():
            problems.append(f"--{name}: {value} does not exist")
    if problems:
        raise UsageError("missing inputs:\n  " + "\n  ".join(problems))


def _check_fit(report) -> None:
    if report.diagnostic:
        raise NumericalFailure(report.diagnostic)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n")


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return _dispatch(args, argv)
    except (UsageError, IngestError, GraphError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"stva {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (NumericalFailure, FitError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"stva {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


def _dispatch(args, argv) -> int:
    settings = _settings(args)
    cfg, ablation, seed = make_config(settings)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(
        command=args.command,
        argv=argv,
        config={**cfg.to_dict(), "ablation": ablation},
        seed=seed,
        started=dt.datetime.now(dt.timezone.utc).isoformat(),
    )
    for name in ("config", "panel", "params", "counties_csv", "adjacency_csv", "epi_csv", "mobility_csv", "census_csv"):
        value = getattr(args, name, None)
        if value is not None and Path(value).exists():
            manifest.inputs.update(_digests(value))

    handler = globals()[f"_cmd_{args.command}"]
    handler(args, cfg, ablation, seed, out, manifest)
    manifest.write(out)
    return EXIT_OK


def _load_panel(args):
    _require(args, "panel")
    return load_bundle(args.panel)


def _cmd_ingest(args, cfg, ablation, seed, out, manifest):
    _require(args, "counties-csv", "epi-csv")
    for name in ("adjacency-csv", "mobility-csv", "census-csv"):
        if getattr(args, name.replace("-", "_")) is not None:
            _require(args, name)
    graph = read_graph(args.counties_csv, args.adjacency_csv, mainland_only=not args.all_states)
    weeks = WeekIndex(dt.date.fromisoformat(args.start), args.weeks)
    panel, report = assemble(graph, args.epi_csv, args.mobility_csv, args.census_csv, weeks)
    save_bundle(out / "panel", panel, graph)
    _write_json(out / "ingest_report.json", asdict(report))
    logger.info("ingest: %s", report.summary())


def _cmd_synth(args, cfg, ablation, seed, out, manifest):
    spec = SynthSpec(
        n_counties=args.counties,
        T=args.weeks,
        edge_probability=args.edge_probability,
        n_hubs=min(args.hubs, args.counties),
        p=cfg.p,
        K=args.mobility_categories,
        L=args.demographic_factors,
        coefficient_scale=args.coefficient_scale,
        noise_scale=args.noise,
        seed=seed,
        eta=cfg.eta,
        distance_mode=cfg.distance_mode,
    )
    graph, truth, panel = generate(spec)
    save_bundle(out / "panel", panel, graph)
    truth.save(out / "truth")
    _write_json(out / "synth_spec.json", asdict(spec))
    if args.emit_csv:
        write_csvs(graph, panel, out / "csv")


def _cmd_fit(args, cfg, ablation, seed, out, manifest):
    panel, graph = _load_panel(args)
    cov = build_covariance(graph, cfg.eta, cfg.distance_mode)
    params, report = fit(panel, graph, cov, cfg, ablation)
    manifest.timings["fit"] = report.wall_time
    params.save(out / "params", cfg, {"ablation": ablation})
    _write_json(out / "report.json", report.to_dict())
    _check_fit(report)


def _params_or_fit(args, panel, graph, cov, cfg, ablation, manifest):
    if getattr(args, "params", None):
        _require(args, "params")
        params, _ = ModelParams.load(args.params)
        return params
    params, report = fit(panel, graph, cov, cfg, ablation)
    manifest.timings["fit"] = report.wall_time
    _check_fit(report)
    return params


def _cmd_predict(args, cfg, ablation, seed, out, manifest):
    panel, graph = _load_panel(args)
    cov = build_covariance(graph, cfg.eta, cfg.distance_mode)
    params = _params_or_fit(args, panel, graph, cov, cfg, ablation, manifest)
    c_hat, d_hat = predict(params, panel, [panel.T])
    week = panel.weeks.start + dt.timedelta(weeks=panel.T)
    with open(out / "forecast.csv", "w") as fh:
        fh.write("fips,week_start,target,predicted\n")
        for target, values in (("cases", c_hat[0]), ("deaths", d_hat[0])):
            if cfg.clamp_output:
                values = np.maximum(values, 0.0)
            for f, v in zip(panel.fips, values):
                fh.write(f"{f},{week.isoformat()},{target},{v:.10g}\n")


def _cmd_evaluate(args, cfg, ablation, seed, out, manifest):
    panel, graph = _load_panel(args)
    cov = build_covariance(graph, cfg.eta, cfg.distance_mode)
    if args.mode == "in-sample":
        params = _params_or_fit(args, panel, graph, cov, cfg, ablation, manifest)
        pred = in_sample(params, panel, cfg)
    else:
        if args.start is None:
            start = cfg.p + args.min_train
        else:
            start = int(args.start) if args.start.isdigit() else args.start
        pred = rolling_predict(panel, graph, cov, cfg, start, ablation, min_train=args.min_train)
        manifest.timings["fits"] = sum(r.wall_time for r in pred.reports.values())
        if pred.failures:
            _write_json(out / "failures.json", {panel.weeks.starts[t].isoformat(): m for t, m in pred.failures.items()})
    pred.write_csv(out / "predictions.csv")
    report = mae(pred, args.target)
    report.write_csv(out / "mae_report.csv")
    summary = {
        "target": args.target,
        "mode": pred.mode,
        "clamped": report.clamped,
        "overall": report.overall,
        "per_state": report.per_state,
        "per_week": {w.isoformat(): v for w, v in report.per_week.items()},
    }
    _write_json(out / "mae_summary.json", summary)
    if args.benchmark:
        sources = {}
        for item in args.benchmark:
            name, sep, path = item.partition("=")
            if not sep or not Path(path).exists():
                raise UsageError(f"--benchmark expects NAME=CSV with an existing file, got {item!r}")
            sources[name] = path
            manifest.inputs.update(_digests(path))
        merged = merge_benchmarks(pred, sources, args.target)
        merged.to_csv(out / "benchmarks.csv", index=False, lineterminator="\n", float_format="%.10g")


def _cmd_ablate(args, cfg, ablation, seed, out, manifest):
    panel, graph = _load_panel(args)
    cov = build_covariance(graph, cfg.eta, cfg.distance_mode)
    kinds = [k.strip() for k in args.kinds.split(",") if k.strip()]
    bad = [k for k in kinds if k not in ABLATIONS]
    if bad:
        raise UsageError(f"unknown ablation kinds {bad}; expected a subset of {list(ABLATIONS)}")
    if "full" not in kinds:
        kinds.insert(0, "full")
    preds = {}
    for kind in kinds:
        params, report = fit(panel, graph, cov, cfg, kind)
        manifest.timings[f"fit_{kind}"] = report.wall_time
        _check_fit(report)
        preds[kind] = in_sample(params, panel, cfg)
    scopes = {"all": {}}
    for name, window in (("first_peak", FIRST_PEAK), ("second_peak", SECOND_PEAK)):
        scopes[name] = {"weeks": window}
    scopes["most_affected"] = {"states": MOST_AFFECTED_STATES}
    for name, scope in scopes.items():
        try:
            reports = {k: mae(preds[k], args.target, **scope) for k in kinds}
        except ValueError:
            continue
        rows = ablation_table(reports)
        write_ablation_csv(rows, out / ("ablation.csv" if name == "all" else f"ablation_{name}.csv"))


def _cmd_cv(args, cfg, ablation, seed, out, manifest):
    panel, graph = _load_panel(args)
    cov = build_covariance(graph, cfg.eta, cfg.distance_mode)
    result = cross_validate(panel, graph, cov, cfg, _floats(args.lambda1_grid), _floats(args.lambda2_grid), ablation)
    with open(out / "cv.csv", "w") as fh:
        fh.write("lambda1,lambda2,score\n")
        for (l1, l2), s in sorted(result.scores.items()):
            fh.write(f"{l1:g},{l2:g},{s:.10g}\n")
    _write_json(out / "cv_best.json", {"lambda1": result.best[0], "lambda2": result.best[1]})


def _cmd_coef(args, cfg, ablation, seed, out, manifest):
    panel, graph = _load_panel(args)
    cov = build_covariance(graph, cfg.eta, cfg.distance_mode)
    params = _params_or_fit(args, panel, graph, cov, cfg, ablation, manifest)
    write_coefficients_csv(significance(params, panel, cov, cfg, graph=graph), out / "coefficients.csv")
    if args.focus:
        fips = args.focus.zfill(5)
        if fips not in graph.index:
            raise UsageError(f"--focus {fips} is not in the panel")
        table = coefficient_export(params, graph, graph.index[fips], args.matrix, args.lag)
        stem = f"coef_{fips}_{args.matrix}{args.lag}"
        table.to_csv(out / f"{stem}.csv", index=False, lineterminator="\n", float_format="%.10g")
        export_geojson(table, graph, out / f"{stem}.geojson")


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
