"""Command line driver: run, sweep, calibrate, verify."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import MalformedInput, calibrate
from .config import OUTPUT_ENV, ConfigError, RunConfig, config_from_dict, load_config
from .deep_bsde import FEATURE_NAMES, FeatureScales, TrainingDiverged, train
from .model import ParameterError
from .search import baseline_comparison, evaluate_policy, sweep_fee

log = logging.getLogger("rebatelab")

SERIES = {
    "z_series.csv": [(f"z{k}", lambda tr, k=k: tr["z"][:, :, k - 1]) for k in range(1, 8)],
    "lambda_series.csv": [("lam_p", lambda tr: tr["lam_p"]), ("lam_q", lambda tr: tr["lam_q"])],
    "mu_series.csv": [("mu_p", lambda tr: tr["mu"]), ("mu_q", lambda tr: tr["mu"])],
    "investor_intensity_series.csv": [("lam_a", lambda tr: tr["lam_a"]),
                                      ("lam_b", lambda tr: tr["lam_b"])],
    "incentive_series.csv": [("neg_int_F_p", lambda tr: -tr["int_F_p"]),
                             ("neg_int_F_q", lambda tr: -tr["int_F_q"]),
                             ("F_p", lambda tr: tr["F_p"]), ("F_q", lambda tr: tr["F_q"])],
    "continuation_utility_series.csv": [("Y_p", lambda tr: tr["Y_p"]),
                                        ("Y_q", lambda tr: tr["Y_q"])],
}

TYING_MAP = {
    "z1": "-u1 (both makers)", "z2": "-u2 (both makers)", "z3": "u3 (both makers)",
    "maker p": "z4=u4, z5=u5, z6=u6, z7=u7", "maker q": "z4=u6, z5=u7, z6=u4, z7=u5",
}


def _fmt(v) -> str:
    return repr(float(v))


def series_header(name: str) -> list:
    cols = ["t"]
    for col, _ in SERIES[name]:
        cols += [col, col + "_se"]
    return cols


def write_series(outdir: Path, batch, params) -> list:
    """Batch means and standard errors of each trajectory panel, one row per grid time."""
    tr = dict(batch.trajectories)
    # continuation utilities are reported with the reservation level added back
    tr["Y_p"] = tr["Y_p"] + params.R0_p
    tr["Y_q"] = tr["Y_q"] + params.R0_q
    m = batch.m
    written = []
    for name, cols in SERIES.items():
        with open(outdir / name, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(series_header(name))
            stats = []
            for _, get in cols:
                vals = get(tr)
                mean = vals.mean(axis=1)
                se = vals.std(axis=1, ddof=1) / np.sqrt(m) if m > 1 else np.full(len(mean), np.nan)
                stats.append((mean, se))
            for k, t in enumerate(batch.t):
                row = [_fmt(t)]
                for mean, se in stats:
                    row += [_fmt(mean[k]), _fmt(se[k])]
                w.writerow(row)
        written.append(name)
    return written


def _checkpoint_name(d: float) -> str:
    return f"policy_d{d:g}.txt"


def _loss_name(d: float) -> str:
    return f"loss_d{d:g}.csv"


def execute(cfg: RunConfig, outdir: Path, force_sweep: bool | None = None,
            trajectories: bool | None = None, command: str = "run") -> dict:
    outdir.mkdir(parents=True, exist_ok=True)
    params = cfg.model
    calibration = None
    if cfg.run.calibration_csv:
        P0, sigma = calibrate(cfg.run.calibration_csv, cfg.run.bar_interval)
        params = params.with_(P0_star=P0, sigma=sigma)
        calibration = dict(source=cfg.run.calibration_csv, bar_interval=cfg.run.bar_interval,
                           P0_star=P0, sigma=sigma)
    seed = cfg.run.seed
    params = params.with_(rng_seed=seed)
    tcfg = replace(cfg.train, seed=seed)
    do_sweep = cfg.sweep.enabled if force_sweep is None else force_sweep
    emit = cfg.run.emit_trajectories if trajectories is None else trajectories
    files = []
    results = {}

    if do_sweep:
        res = sweep_fee(cfg.sweep.grid, cfg.sweep.budget, cfg.sweep.eval_batch, seed, params, tcfg)
        res.write_csv(outdir / "fee_sweep.csv")
        files.append("fee_sweep.csv")
        for pt in res.points:
            if pt.net is not None:
                pt.net.save(outdir / _checkpoint_name(pt.d))
                files.append(_checkpoint_name(pt.d))
        results.update(argmin=res.argmin, interior=res.interior,
                       rho=[None if p.report is None else p.report.rho for p in res.points],
                       failed=[p.d for p in res.points if p.failed])
        if res.argmin is None:
            raise TrainingDiverged("every grid point diverged")
        best = res.best()
        d_hat, net = best.d, best.net
    else:
        d_hat = cfg.run.d
        tr = train(params.with_(d=d_hat), tcfg, d=d_hat)
        net = tr.net
        tr.write_csv(outdir / _loss_name(d_hat))
        net.save(outdir / _checkpoint_name(d_hat))
        files += [_loss_name(d_hat), _checkpoint_name(d_hat)]

    m = cfg.sweep.eval_batch
    base, inc = baseline_comparison(params, m, seed, net, d_hat)
    results.update(d_hat=d_hat, baseline=base.to_dict(), incentive=inc.to_dict())
    if emit:
        pd = params.with_(d=d_hat)
        _, batch = evaluate_policy(net, pd, d_hat, m, seed, record=True)
        files += write_series(outdir, batch, pd)

    manifest = dict(
        command=command, code_version=__version__, seed=seed, config=cfg.to_dict(),
        resolved_params=params.to_dict(), calibration=calibration,
        feature_order=list(FEATURE_NAMES), feature_scales=FeatureScales.from_params(params).to_dict(),
        output_scale=20.0, tying_map=TYING_MAP, results=results, files=sorted(files),
    )
    with open(outdir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")
    return manifest


def _load_any(path) -> RunConfig:
    """A TOML config, or a manifest.json whose echoed config is re-run."""
    path = Path(path)
    if path.suffix == ".json":
        try:
            data = json.loads(path.read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read manifest {path}: {exc}") from exc
        if "config" not in data:
            raise ConfigError(f"{path}: no config block")
        return config_from_dict(data["config"])
    return load_config(path)


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if args.seed is not None:
        cfg.run.seed = args.seed
    return cfg


def cmd_run(args, sweep=None) -> int:
    cfg = _apply_overrides(_load_any(args.config), args)
    outdir = cfg.output_path(args.output)
    man = execute(cfg, outdir, force_sweep=sweep, trajectories=args.trajectories,
                  command="sweep" if sweep else "run")
    r = man["results"]
    print(f"d_hat={r['d_hat']:g} rho={r['incentive']['rho']:.6g} "
          f"spread_sq={r['incentive']['spread_sq']:.6g} baseline_spread_sq="
          f"{r['baseline']['spread_sq']:.6g} -> {outdir}")
    return 0


def cmd_calibrate(args) -> int:
    P0, sigma = calibrate(args.prices, args.bar_interval)
    out = dict(P0_star=P0, sigma=sigma, source=str(args.prices), bar_interval=args.bar_interval)
    if args.output:
        outdir = Path(args.output)
        outdir.mkdir(parents=True, exist_ok=True)
        with open(outdir / "manifest.json", "w") as fh:
            json.dump(dict(command="calibrate", code_version=__version__, calibration=out), fh,
                      indent=2, sort_keys=True)
            fh.write("\n")
    print(json.dumps(out, sort_keys=True))
    return 0


def cmd_verify(args) -> int:
    from .oracles import run_all

    ok = True
    for name, passed, detail in run_all(seed=args.seed or 0):
        print(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
        ok &= passed
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rebatelab", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, hlp in (("run", "train and evaluate as configured"),
                      ("sweep", "fee sweep only, no series files")):
        s = sub.add_parser(name, help=hlp)
        s.add_argument("config", help="TOML config or a manifest.json to replay")
        s.add_argument("--seed", type=int, default=None)
        s.add_argument("--output", default=None,
                       help=f"output directory (relative paths resolve under ${OUTPUT_ENV})")
        s.add_argument("--trajectories", action=argparse.BooleanOptionalAction, default=None)
    c = sub.add_parser("calibrate", help="estimate P0* and sigma from a price CSV")
    c.add_argument("prices")
    c.add_argument("--bar-interval", type=float, default=1.0)
    c.add_argument("--output", default=None)
    v = sub.add_parser("verify", help="run the built-in oracle checks")
    v.add_argument("--seed", type=int, default=0)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            return cmd_run(args)
        if args.command == "sweep":
            args.trajectories = False
            return cmd_run(args, sweep=True)
        if args.command == "calibrate":
            return cmd_calibrate(args)
        return cmd_verify(args)
    except (ConfigError, ParameterError, MalformedInput) as exc:
        print(f"rebatelab: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"rebatelab: I/O error: {exc}", file=sys.stderr)
        return 3
    except TrainingDiverged as exc:
        print(f"rebatelab: training diverged: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
