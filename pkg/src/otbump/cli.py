"""Command-line front end.

Every subcommand starts from a defaults table, applies an optional JSON
config file and then explicit flags. The resulting effective config is
written into the report, so ``otbump <command> --config report.json``
repeats a run exactly. A report document itself is accepted as a config
file: its ``config`` entry is used.

Exit codes: 0 success, 2 invalid configuration, 3 data or schema problem,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np
from scipy import stats

from . import __version__
from .bumphunt import (
    SignalRegionSpec,
    bin_data,
    censored_mle_em,
    counting_test,
    delta_method_test,
)
from .calibration import CalibrationConfig, cut_quantile, select_k, select_signal_region
from .cdot import (
    BandwidthGrids,
    TransportMap,
    fit_cdot_locscale,
    fit_cdot_split,
    independence_diagnostic,
    morph,
    one_over_jsd,
    r50,
)
from .errors import (
    InvalidConfigurationError,
    LowStatisticsError,
    OtbumpError,
    SchemaError,
)
from .simulate import (
    EventSet,
    GeneratorSpec,
    PowerConfig,
    power_analysis,
    read_csv,
    sample_events,
    write_csv,
)

REPORT_SCHEMA_VERSION = 1
MIN_TEST_EVENTS = 100

log = logging.getLogger("otbump")

DEFAULTS = {
    "simulate": {
        "n": 20_000, "lam": 0.0, "seed": 0, "background": "exponential",
        "background_rate": 3.0, "signal_mean": 0.5, "signal_sigma": 0.04,
        "score_model": "correlated", "output": "-",
    },
    "decorrelate": {
        "input": None, "approach": "split", "splits": [0.2, 0.4, 0.6], "load_map": None,
        "map": None, "output": "-", "report": None, "column": "score_decorrelated",
        "bandwidth_points": 8, "background_only": True, "n_mass_slices": 10,
    },
    "test": {
        "input": None, "map": None, "region": None, "order": None, "calibration": None,
        "cut_level": 0.0, "cut_threshold": None, "cut_reference": None,
        "bins_per_side": 50, "gradient": "implicit", "known_background_mass": None,
        "output": "-",
    },
    "calibrate": {
        "input": None, "signal": None, "region": None, "alpha": 0.05, "n_datasets": 500,
        "n": 20_000, "k_grid": [5, 10, 15, 20, 25, 30, 35, 40], "region_quantiles": [0.1, 0.9],
        "cut_levels": [0.0, 0.5, 0.9], "seed": 0, "bins_per_side": 50, "output": "-",
    },
    "metrics": {
        "input": None, "map": None, "thetas": [0.0, 0.25, 0.5, 0.75, 1.0],
        "mass_bins": 20, "mass_range": [0.0, 1.0], "output": "-", "curve": None,
    },
    "power": {
        "generator": {}, "pipeline": {}, "output": "-", "csv": None,
    },
}

# -- argument helpers ----------------------------------------------------------

def _floats(text):
    return [float(v) for v in str(text).split(",") if v.strip()]


def _ints(text):
    return [int(v) for v in str(text).split(",") if v.strip()]


def _flag(parser, *names, **kw):
    parser.add_argument(*names, default=argparse.SUPPRESS, **kw)


def _build_parser():
    p = argparse.ArgumentParser(prog="otbump", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"otbump {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        _flag(sp, "--config", help="JSON config file or a previous report")
        _flag(sp, "--threads", type=int, help="worker cap for replicate loops")
        _flag(sp, "--verbose", action="store_true")

    sp = sub.add_parser("simulate", help="write a synthetic event CSV")
    common(sp)
    _flag(sp, "--n", type=int)
    _flag(sp, "--lam", type=float)
    _flag(sp, "--seed", type=int)
    _flag(sp, "--background-rate", dest="background_rate", type=float)
    _flag(sp, "--signal-mean", dest="signal_mean", type=float)
    _flag(sp, "--signal-sigma", dest="signal_sigma", type=float)
    _flag(sp, "--score-model", dest="score_model", choices=["correlated", "independent"])
    _flag(sp, "--output", "-o")

    sp = sub.add_parser("decorrelate", help="fit or apply a transport map")
    common(sp)
    _flag(sp, "--input", "-i")
    _flag(sp, "--approach", choices=["split", "locscale"])
    _flag(sp, "--splits", type=_floats)
    _flag(sp, "--load-map", dest="load_map", help="apply this map instead of fitting")
    _flag(sp, "--map", help="where to save the fitted map")
    _flag(sp, "--output", "-o")
    _flag(sp, "--report", help="JSON sidecar path (default: <output>.json)")
    _flag(sp, "--column")
    _flag(sp, "--bandwidth-points", dest="bandwidth_points", type=int)
    _flag(sp, "--all-events", dest="background_only", action="store_false",
          help="fit on every row, not only label 0")

    sp = sub.add_parser("test", help="cut and run the bump-hunt test")
    common(sp)
    _flag(sp, "--input", "-i")
    _flag(sp, "--map")
    _flag(sp, "--region", type=_floats)
    _flag(sp, "--order", "-K", type=int)
    _flag(sp, "--calibration", help="SelectionReport supplying region and order")
    _flag(sp, "--cut-level", dest="cut_level", type=float)
    _flag(sp, "--cut-threshold", dest="cut_threshold", type=float)
    _flag(sp, "--cut-reference", dest="cut_reference",
          help="CSV whose scores define the cut quantile (default: the input)")
    _flag(sp, "--bins-per-side", dest="bins_per_side", type=int)
    _flag(sp, "--gradient", choices=["implicit", "fd"])
    _flag(sp, "--known-background-mass", dest="known_background_mass", type=float)
    _flag(sp, "--output", "-o")

    sp = sub.add_parser("calibrate", help="choose the Bernstein order")
    common(sp)
    _flag(sp, "--input", "-i", help="validation background CSV")
    _flag(sp, "--signal", help="signal CSV for the region")
    _flag(sp, "--region", type=_floats)
    _flag(sp, "--alpha", type=float)
    _flag(sp, "--n-datasets", "-N", dest="n_datasets", type=int)
    _flag(sp, "--n", type=int)
    _flag(sp, "--k-grid", dest="k_grid", type=_ints)
    _flag(sp, "--region-quantiles", dest="region_quantiles", type=_floats)
    _flag(sp, "--seed", type=int)
    _flag(sp, "--bins-per-side", dest="bins_per_side", type=int)
    _flag(sp, "--output", "-o")

    sp = sub.add_parser("metrics", help="R50 and 1/JSD along the morphing path")
    common(sp)
    _flag(sp, "--input", "-i")
    _flag(sp, "--map")
    _flag(sp, "--thetas", type=_floats)
    _flag(sp, "--bins", dest="mass_bins", type=int)
    _flag(sp, "--mass-range", dest="mass_range", type=_floats)
    _flag(sp, "--output", "-o")
    _flag(sp, "--curve", help="CSV path for the trade-off curve")

    sp = sub.add_parser("power", help="Monte Carlo power study")
    common(sp)
    _flag(sp, "--lambdas", type=_floats)
    _flag(sp, "--cut-levels", dest="cut_levels", type=_floats)
    _flag(sp, "--n-datasets", "-N", dest="n_datasets", type=int)
    _flag(sp, "--n", type=int)
    _flag(sp, "--order", "-K", dest="K", type=int)
    _flag(sp, "--seed", type=int)
    _flag(sp, "--approach", choices=["split", "locscale"])
    _flag(sp, "--signal-sigma", dest="signal_sigma", type=float)
    _flag(sp, "--output", "-o")
    _flag(sp, "--csv")
    return p


def _effective_config(command, args) -> dict:
    cfg = json.loads(json.dumps(DEFAULTS[command]))
    path = args.pop("config", None)
    if path is not None:
        try:
            loaded = json.loads(Path(path).read_text())
        except OSError as exc:
            raise SchemaError(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise SchemaError(f"config {path} is not valid JSON: {exc}") from None
        if "config" in loaded and "command" in loaded:
            if loaded["command"] != command:
                raise InvalidConfigurationError(
                    f"report {path} came from {loaded['command']!r}, not {command!r}")
            loaded = loaded["config"]
        unknown = set(loaded) - set(cfg)
        if unknown:
            raise InvalidConfigurationError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(loaded)
    if command == "power":
        gen_keys = {"seed", "signal_sigma"}
        for key in list(args):
            if key in gen_keys:
                cfg["generator"] = {**cfg["generator"], key: args.pop(key)}
            elif key not in ("output", "csv"):
                cfg["pipeline"] = {**cfg["pipeline"], key: args.pop(key)}
        if "seed" in cfg["generator"]:
            cfg["pipeline"] = {**cfg["pipeline"], "seed": cfg["generator"]["seed"]}
    cfg.update(args)
    return cfg


# -- I/O helpers ------------------------------------------------------------------

def _report(command, cfg, result) -> dict:
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "tool": "otbump",
        "version": __version__,
        "command": command,
        "seed": cfg.get("seed", cfg.get("generator", {}).get("seed")),
        "config": cfg,
        "result": result,
    }


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _emit_json(doc, dest):
    text = json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n"
    if dest in (None, "-"):
        sys.stdout.write(text)
    else:
        _write_text(dest, text)


def _write_text(path, text):
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise SchemaError(f"cannot write {path}: {exc.strerror}") from None


def _read_events(path, what="input") -> EventSet:
    if path is None:
        raise InvalidConfigurationError(f"no {what} file given")
    try:
        return read_csv(sys.stdin if path == "-" else path)
    except OSError as exc:
        raise SchemaError(f"cannot read {path}: {exc.strerror}") from None


def _write_events(events, path):
    if path in (None, "-"):
        write_csv(events, sys.stdout)
        return
    try:
        write_csv(events, path)
    except OSError as exc:
        raise SchemaError(f"cannot write {path}: {exc.strerror}") from None


def _load_map(path) -> TransportMap:
    try:
        return TransportMap.load(path)
    except OSError as exc:
        raise SchemaError(f"cannot read map {path}: {exc.strerror}") from None
    except (KeyError, json.JSONDecodeError) as exc:
        raise SchemaError(f"map {path} is malformed: {exc}") from None


# -- subcommands --------------------------------------------------------------------

def cmd_simulate(cfg, threads=1):
    spec = GeneratorSpec(
        background=cfg["background"], background_rate=cfg["background_rate"],
        signal_mean=cfg["signal_mean"], signal_sigma=cfg["signal_sigma"],
        score_model=cfg["score_model"], lam=cfg["lam"], seed=cfg["seed"],
    )
    events = sample_events(spec, cfg["n"])
    _write_events(events, cfg["output"])
    log.info("wrote %d events (%d signal)", len(events), int(np.sum(events.label == 1)))
    return 0


def _fit_events(events, background_only):
    if background_only and events.has_labels:
        return events.take(np.flatnonzero(events.label == 0))
    return events


def cmd_decorrelate(cfg, threads=1):
    events = _read_events(cfg["input"])
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        if cfg["load_map"] is not None:
            tmap = _load_map(cfg["load_map"])
        else:
            train = _fit_events(events, cfg["background_only"])
            grids = BandwidthGrids(n_points=cfg["bandwidth_points"])
            if cfg["approach"] == "split":
                tmap = fit_cdot_split(train.score, train.mass, cfg["splits"], grids)
            else:
                tmap = fit_cdot_locscale(train.score, train.mass, grids, clamp=True)
        moved, info = tmap.transport(events.score, events.mass, return_info=True)
    for w in caught:
        log.warning("%s", w.message)

    out = events.with_column(cfg["column"], moved)
    _write_events(out, cfg["output"])
    if cfg["map"] is not None and cfg["load_map"] is None:
        try:
            tmap.save(cfg["map"])
        except OSError as exc:
            raise SchemaError(f"cannot write map {cfg['map']}: {exc.strerror}") from None

    bkg = events.label == 0 if events.has_labels else np.ones(len(events), bool)
    k = cfg["n_mass_slices"]
    diagnostics = {
        "approach": tmap.approach,
        "n_events": len(events),
        "n_flagged": int(np.sum(info["flagged"])),
        "n_clamped": int(info["n_clamped"] + tmap.info.get("n_clamped", 0)),
        "independence_raw": independence_diagnostic(events.score[bkg], events.mass[bkg], k),
        "independence_transported": independence_diagnostic(moved[bkg], events.mass[bkg], k),
        "marginal_ks": float(stats.ks_2samp(moved[bkg], tmap.train_scores,
                                            method="asymp").statistic),
        "map_info": tmap.info,
    }
    for key in ("independence_raw", "independence_transported", "marginal_ks"):
        log.info("%s = %.4f", key, diagnostics[key])
    report_path = cfg["report"]
    if report_path is None and cfg["output"] not in (None, "-"):
        report_path = str(cfg["output"]) + ".json"
    if report_path is not None:
        _emit_json(_report("decorrelate", cfg, diagnostics), report_path)
    else:
        print(json.dumps(diagnostics, default=_json_default), file=sys.stderr)
    return 0


def _region_and_order(cfg):
    region, order = cfg["region"], cfg["order"]
    if cfg["calibration"] is not None:
        try:
            cal = json.loads(Path(cfg["calibration"]).read_text())
        except OSError as exc:
            raise SchemaError(f"cannot read {cfg['calibration']}: {exc.strerror}") from None
        res = cal.get("result", cal)
        if region is None:
            region = res["region"]
        if order is None:
            order = res["selected_k"]
    if region is None:
        raise InvalidConfigurationError("a signal region is required (--region or --calibration)")
    return SignalRegionSpec(*region), order


def cmd_test(cfg, threads=1):
    events = _read_events(cfg["input"])
    region, order = _region_and_order(cfg)
    score = events.score
    tmap = None
    if cfg["map"] is not None:
        tmap = _load_map(cfg["map"])
        score = tmap.transport(events.score, events.mass)
    threshold = cfg["cut_threshold"]
    if threshold is None:
        if cfg["cut_reference"] is not None:
            ref = _read_events(cfg["cut_reference"], "cut reference")
            ref_scores = ref.score if tmap is None else tmap.transport(ref.score, ref.mass)
        else:
            ref_scores = score
        threshold = cut_quantile(ref_scores, cfg["cut_level"]) if cfg["cut_level"] > 0 else -np.inf
    keep = score >= threshold
    masses = events.mass[keep]
    if masses.size < MIN_TEST_EVENTS:
        raise LowStatisticsError(f"only {masses.size} events survive the cut; need {MIN_TEST_EVENTS}")
    result = {"cut_level": cfg["cut_level"],
              "cut_threshold": None if not np.isfinite(threshold) else float(threshold),
              "n_surviving": int(masses.size)}
    if cfg["known_background_mass"] is not None:
        n_s = int(np.sum(region.contains(masses)))
        c = counting_test(n_s, masses.size, cfg["known_background_mass"])
        result.update(mode="counting", n_signal_region=n_s, **{
            "lambda": c.lam, "statistic": c.statistic, "p_value": c.p_value})
    else:
        if order is None:
            raise InvalidConfigurationError("a Bernstein order is required (--order or --calibration)")
        counts = bin_data(masses, region, cfg["bins_per_side"])
        em = censored_mle_em(counts, int(order))
        fit = delta_method_test(counts, em.density, em_result=em, gradient=cfg["gradient"])
        result.update(mode="censored_mle", **fit.to_dict())
        result["n_signal_region"] = int(counts.n_signal)
        result["control_counts"] = counts.counts.tolist()
    _emit_json(_report("test", cfg, result), cfg["output"])
    return 0


def cmd_calibrate(cfg, threads=1):
    events = _read_events(cfg["input"])
    masses = events.mass[events.label == 0] if events.has_labels else events.mass
    if cfg["region"] is not None:
        region = SignalRegionSpec(*cfg["region"])
    elif cfg["signal"] is not None:
        sig = _read_events(cfg["signal"], "signal")
        sig_m = sig.mass[sig.label == 1] if sig.has_labels else sig.mass
        region = select_signal_region(sig_m, *cfg["region_quantiles"])
    elif events.has_labels and np.any(events.label == 1):
        region = select_signal_region(events.mass[events.label == 1], *cfg["region_quantiles"])
    else:
        raise InvalidConfigurationError("need --region, --signal or labeled signal rows")
    config = CalibrationConfig(
        alpha=cfg["alpha"], n_datasets=cfg["n_datasets"], n=cfg["n"],
        k_grid=tuple(cfg["k_grid"]), region_quantiles=tuple(cfg["region_quantiles"]),
        cut_levels=tuple(cfg["cut_levels"]), seed=cfg["seed"],
        bins_per_side=cfg["bins_per_side"],
    )
    rep = select_k(masses, config, region, workers=threads)
    for d in rep.to_dict()["per_k"]:
        log.info("K=%d rate=%.4f [%.4f, %.4f]%s", d["K"], d["rejection_rate"],
                 d["ci_lower"] or 0.0, d["ci_upper"] or 0.0, " excluded" if d["excluded"] else "")
    _emit_json(_report("calibrate", cfg, rep.to_dict()), cfg["output"])
    return 0


def cmd_metrics(cfg, threads=1):
    events = _read_events(cfg["input"])
    if not events.has_labels:
        raise SchemaError("metrics need a label column with 0/1 on every row")
    sig = events.label == 1
    bkg = events.label == 0
    if not sig.any() or not bkg.any():
        raise SchemaError("metrics need both signal and background rows")
    edges = np.linspace(cfg["mass_range"][0], cfg["mass_range"][1], int(cfg["mass_bins"]) + 1)
    rows = []
    tmap = _load_map(cfg["map"]) if cfg["map"] is not None else None
    thetas = cfg["thetas"] if tmap is not None else [1.0]
    for theta in thetas:
        if theta == 1.0:
            s = events.score
        else:
            s = morph(tmap, events.score, events.mass, theta)
        cut = float(np.median(s[sig]))
        rows.append({
            "theta": float(theta),
            "r50": r50(s[sig], s[bkg], cut),
            "one_over_jsd": one_over_jsd(s[bkg], events.mass[bkg], None, edges, cut),
            "cut": cut,
        })
    result = {"mass_bins": edges.tolist(), "curve": rows,
              "raw": next(r for r in rows if r["theta"] == 1.0)}
    dec = [r for r in rows if r["theta"] == 0.0]
    if dec:
        result["decorrelated"] = dec[0]
    if cfg["curve"] is not None:
        lines = ["theta,r50,one_over_jsd,cut"]
        lines += [f"{r['theta']!r},{r['r50']!r},{r['one_over_jsd']!r},{r['cut']!r}" for r in rows]
        _write_text(cfg["curve"], "\n".join(lines) + "\n")
    _emit_json(_report("metrics", cfg, result), cfg["output"])
    return 0


def cmd_power(cfg, threads=1):
    spec = GeneratorSpec.from_dict({**GeneratorSpec().to_dict(), **cfg["generator"]})
    pipe = PowerConfig.from_dict({**PowerConfig().to_dict(), **cfg["pipeline"]})
    rep = power_analysis(spec, pipe, workers=threads)
    if cfg["csv"] is not None:
        try:
            rep.write_csv(cfg["csv"])
        except OSError as exc:
            raise SchemaError(f"cannot write {cfg['csv']}: {exc.strerror}") from None
    _emit_json(_report("power", cfg, rep.to_dict()), cfg["output"])
    return 0


COMMANDS = {
    "simulate": cmd_simulate, "decorrelate": cmd_decorrelate, "test": cmd_test,
    "calibrate": cmd_calibrate, "metrics": cmd_metrics, "power": cmd_power,
}


def main(argv=None) -> int:
    args = vars(_build_parser().parse_args(argv))
    command = args.pop("command")
    threads = max(1, int(args.pop("threads", 1)))
    verbose = args.pop("verbose", False)
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="otbump: %(message)s", stream=sys.stderr)
    try:
        cfg = _effective_config(command, args)
        return COMMANDS[command](cfg, threads)
    except OtbumpError as exc:
        print(f"otbump: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (KeyError, TypeError) as exc:
        print(f"otbump: error: bad configuration: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
