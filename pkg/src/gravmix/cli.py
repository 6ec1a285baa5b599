"""Experiment orchestration: config parsing, deterministic seeding, file
outputs, and figure rendering.

One structured-text config file drives everything; command-line flags
only override scalar keys, so the config plus the seed is the full
provenance of a run.  Identical (config, seed, workers) produce
byte-identical delimited outputs.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import sys
import traceback
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import dynamics, report, stationary, verification
from .characteristics import cov_identity_check
from .fields import (FieldConfig, FieldError, Regime, TemperatureField,
                     gravity_field, magnetic_field, perturbed_field, validate_field)
from .streams import stream

EXPERIMENTS = ("simulate", "stationary", "kernel", "decay", "verify")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


class ConfigError(ValueError):
    pass


_DEFAULTS = {
    "grid_n": 32,
    "samples": 400_000,
    "samples_per_cell": 4000,
    "particles": 1_000_000,
    "t0": 2.0,
    "delta": 1.0,
    "theta_exp": None,       # exponential-moment weight; derived when absent
    "theta_prime": None,
    "horizon": 20.0,
    "output_step": 0.5,
    "t_fit_min": 2.0,
    "t_fit_max": 20.0,
    "penalized_eps": (0.1, 0.05, 0.025),
    "j_damping": 64,
    "amplitude": 0.5,
    "kind": "modulated",
    "mass": 1.0,
    "figures": True,
    "bad_set_b3": 25.0,
    "doeblin_grid": 16,
    "power_tol": 1e-11,
}


@dataclass
class RunConfig:
    field: FieldConfig
    theta: TemperatureField
    experiment: str
    seed: int
    output_dir: Path
    workers: int
    params: dict
    raw_items: tuple

    @property
    def config_hash(self) -> str:
        text = repr(self.raw_items) + f"|seed={self.seed}|workers={self.workers}"
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def meta(self) -> dict:
        return {"config_hash": self.config_hash, "seed": self.seed,
                "experiment": self.experiment, "workers": self.workers}


def _parse_field_section(sec) -> FieldConfig:
    regime = sec.get("regime", "gravity").strip().lower()
    g = float(sec.get("g", 10.0))
    if regime in ("gravity", "gravityonly", "gravity_only"):
        return gravity_field(g)
    if regime == "magnetic":
        return magnetic_field(float(sec.get("b3", 1.0)))
    if regime in ("perturbed", "gravityperturbed", "gravity_perturbed"):
        phi = sec.get("phi_expr")
        if not phi:
            raise ConfigError("perturbed regime needs phi_expr")
        return perturbed_field(g, phi, rho1=float(sec.get("rho1", 2.0)),
                               rho2=float(sec.get("rho2", 0.5)),
                               rho3=float(sec.get("rho3", g / 2.0)))
    raise ConfigError(f"unknown regime {regime!r}")


def _parse_times(spec: str):
    spec = spec.strip()
    if ":" in spec:
        start, stop, step = (float(s) for s in spec.split(":"))
        return np.arange(start, stop + 0.5 * step, step)
    return np.array([float(s) for s in spec.split(",")])


def load_config(path, experiment=None, seed=None, workers=None, out=None) -> RunConfig:
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    if "field" not in parser or "temperature" not in parser:
        raise ConfigError("config needs [field] and [temperature] sections")

    try:
        field = _parse_field_section(parser["field"])
        theta = TemperatureField(expr=parser["temperature"].get("theta_expr", "1.0"))
    except (FieldError, ValueError) as exc:
        raise ConfigError(str(exc)) from None

    run = parser["run"] if "run" in parser else {}
    params = dict(_DEFAULTS)
    for key in list(params):
        if key in run:
            raw = run[key]
            if key == "penalized_eps":
                params[key] = tuple(float(s) for s in raw.split(","))
            elif key == "kind":
                params[key] = raw.strip()
            elif key == "figures":
                params[key] = raw.strip().lower() in ("1", "true", "yes", "on")
            elif key in ("grid_n", "samples", "samples_per_cell", "particles",
                         "j_damping", "doeblin_grid"):
                params[key] = int(raw)
            else:
                params[key] = float(raw)
    if "output_times" in run:
        params["output_times"] = _parse_times(run["output_times"])

    experiment = (experiment or run.get("experiment", "stationary")).strip().lower()
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"experiment must be one of {EXPERIMENTS}")
    seed = int(seed if seed is not None else run.get("seed", 0))
    workers = int(workers if workers is not None else run.get("workers", 16))
    out_dir = Path(out if out is not None else run.get("output_dir", "out"))

    raw_items = tuple(sorted((f"{s}.{k}", v) for s in parser.sections()
                             for k, v in parser[s].items()))
    return RunConfig(field, theta, experiment, seed, out_dir, workers, params, raw_items)


def _validate(cfg: RunConfig):
    errors = []
    rep = validate_field(cfg.field)
    if not rep.passed:
        errors.append("field hypotheses failed:\n" + str(rep))
    b = cfg.theta.b
    tp = cfg.params["theta_prime"] or 0.9 / (2 * b)
    tm = cfg.params["theta_exp"] or tp / 2.0
    if not (0 < tm < tp < 1.0 / (2 * b)):
        errors.append(f"need 0 < theta ({tm:g}) < theta' ({tp:g}) < 1/(2b) = {1/(2*b):g}")
    if cfg.experiment in ("decay", "simulate"):
        if cfg.params["delta"] * cfg.params["t0"] <= 1.0:
            errors.append(f"window condition delta*T0 > 1 violated "
                          f"(delta={cfg.params['delta']:g}, T0={cfg.params['t0']:g})")
    return errors, tm, tp


def _decay_params(cfg: RunConfig, tm, tp) -> dynamics.DecayParams:
    return dynamics.DecayParams(theta_moment=tm, theta_prime=tp,
                                delta=cfg.params["delta"], T0=cfg.params["t0"])


def _write_summary(cfg: RunConfig, payload: dict, artifacts: list):
    payload = dict(payload)
    payload.update(cfg.meta())
    payload["artifacts"] = [str(a) for a in artifacts]
    path = cfg.output_dir / "summary.json"
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")
    artifacts.append(path)
    return payload


def _run_kernel(cfg: RunConfig, artifacts: list) -> dict:
    kernel = stationary.estimate_kernel(cfg.params["grid_n"], cfg.params["samples_per_cell"],
                                        cfg.field, cfg.theta, seed=cfg.seed)
    bin_path = cfg.output_dir / "kernel.bin"
    json_path = cfg.output_dir / "kernel.json"
    kernel.dump(bin_path, json_path)
    artifacts.extend([bin_path, json_path])
    rs = kernel.row_sums("sigma")
    return {"grid_n": kernel.grid_n, "sigma_row_sum_min": float(rs.min()),
            "sigma_row_sum_max": float(rs.max()),
            "row_sum_bound": cfg.theta.ratio,
            "summary_line": f"kernel {kernel.grid_n}x{kernel.grid_n}, "
                            f"sigma row sums in [{rs.min():.4f}, {rs.max():.4f}]"}


def _run_stationary(cfg: RunConfig, artifacts: list) -> dict:
    kernel = stationary.estimate_kernel(cfg.params["grid_n"], cfg.params["samples_per_cell"],
                                        cfg.field, cfg.theta, seed=cfg.seed)
    flux = stationary.stationary_flux_power(kernel, cfg.field, cfg.theta,
                                            tol=cfg.params["power_tol"],
                                            mass_target=cfg.params["mass"],
                                            seed=cfg.seed)
    flux.meta.update(cfg.meta())
    path = cfg.output_dir / "flux.csv"
    flux.to_csv(path)
    artifacts.append(path)
    mass, mass_se, linf = stationary.reconstruct_mass(
        flux, cfg.field, cfg.theta, cfg.params["samples"],
        stream(cfg.seed, 880_001), return_linf=True)
    dev = float(np.max(np.abs(flux.values / np.mean(flux.values) - 1.0)))
    iso = cfg.theta.b - cfg.theta.a < 1e-9 * cfg.theta.b
    if iso and dev < 1e-3:
        line = f"J uniform within tol (max deviation {dev:.2e}); mass {mass:.6f}"
    else:
        line = (f"J in [{flux.values.min():.4f}, {flux.values.max():.4f}], "
                f"sup/inf {flux.sup_inf_ratio:.4f}; mass {mass:.6f}")
    if cfg.params["figures"]:
        artifacts.append(report.flux_figure(flux, cfg.output_dir / "flux.png"))
    return {"mass": mass, "mass_se": mass_se, "weighted_linf": linf,
            "max_uniform_deviation": dev, "sup_inf_ratio": flux.sup_inf_ratio,
            "iterations": flux.meta.get("iterations"), "summary_line": line}


def _run_decay(cfg: RunConfig, artifacts: list, tm, tp, kind=None) -> dict:
    params = _decay_params(cfg, tm, tp)
    kind = kind or cfg.params["kind"]
    times = cfg.params.get("output_times")
    if times is None:
        times = np.arange(0.0, cfg.params["horizon"] + 0.5 * cfg.params["output_step"],
                          cfg.params["output_step"])
    if kind == "stationary":
        ens = dynamics.sample_stationary_ensemble(cfg.field, cfg.theta,
                                                  cfg.params["particles"], cfg.seed,
                                                  mass=cfg.params["mass"],
                                                  n_blocks=cfg.workers)
    else:
        ens = dynamics.init_fluctuation(kind, cfg.params["amplitude"], cfg.field,
                                        cfg.theta, cfg.params["particles"], cfg.seed,
                                        mass=cfg.params["mass"], n_blocks=cfg.workers,
                                        theta_prime=tp, delta=params.delta)
    binning = dynamics.default_binning(cfg.field, cfg.theta)
    series = dynamics.evolve(ens, times, cfg.field, cfg.theta, params, binning)
    path = cfg.output_dir / "decay.csv"
    series.to_csv(path, meta=cfg.meta())
    artifacts.append(path)

    out = {"kind": kind, "mass_drift": float(np.max(np.abs(series.sum_w - series.sum_w[0]))),
           "T0": params.T0, "delta": params.delta, "theta": tm, "theta_prime": tp}
    fit = None
    if kind not in ("zero", "stationary") and np.all(series.l1[1:] > 0):
        fit = dynamics.fit_decay(series.t, series.l1,
                                 cfg.params["t_fit_min"], cfg.params["t_fit_max"])
        mfit = dynamics.fit_decay(series.t, series.max_exp_moment,
                                  cfg.params["t_fit_min"], cfg.params["t_fit_max"])
        rows = dynamics.window_contraction(series, params.T0)
        out.update({"rate": fit.rate, "r_squared": fit.r_squared,
                    "moment_rate": mfit.rate,
                    "window_ratios": [r.ratio for r in rows],
                    "window_ratio_ses": [r.ratio_se for r in rows]})
        out["summary_line"] = (f"decay rate {fit.rate:.4f} (R2 {fit.r_squared:.4f}), "
                               f"moment rate {mfit.rate:.4f}")
        if cfg.params["figures"]:
            artifacts.append(report.window_figure(rows, cfg.output_dir / "windows.png"))
    else:
        out["summary_line"] = f"simulated {kind} ensemble to t={times[-1]:g}"
    if cfg.params["figures"]:
        artifacts.append(report.decay_figure(
            series, fit, cfg.output_dir / "decay.png",
            t_fit=(cfg.params["t_fit_min"], cfg.params["t_fit_max"])))
    return out


def _run_verify(cfg: RunConfig, artifacts: list) -> dict:
    vcfg = verification.VerificationConfig(
        samples=cfg.params["samples"], T0=cfg.params["t0"],
        chains=min(100_000, cfg.params["samples"]),
        doeblin_grid=cfg.params["doeblin_grid"],
        doeblin_samples_per_cell=cfg.params["samples_per_cell"], seed=cfg.seed)
    verdicts = []
    out_dir = cfg.output_dir

    # jacobian law: histogram against the closed-form oracle in the exact
    # regimes, finite-difference determinant consistency otherwise
    if cfg.field.exact:
        theta_const = TemperatureField.constant(0.5 * (cfg.theta.a + cfg.theta.b))
        jrep = verification.verify_jacobian(cfg.field, theta_const, vcfg.samples,
                                            bins=25, seed=cfg.seed)
        verdicts.append(verification.Verdict("jacobian_law", jrep.max_rel_err,
                                             (0.0, 0.03), jrep.max_rel_err <= 0.03))
        _csv(out_dir / "jacobian.csv", cfg,
             ["t_lo", "t_hi", "observed", "expected"],
             zip(jrep.bin_edges[:-1], jrep.bin_edges[1:], jrep.observed, jrep.expected))
        artifacts.append(out_dir / "jacobian.csv")
        if cfg.params["figures"]:
            artifacts.append(report.jacobian_figure(jrep, out_dir / "jacobian.png"))
    else:
        dev = verification.jacobian_fd_consistency(cfg.field, cfg.theta,
                                                   samples=200, seed=cfg.seed)
        verdicts.append(verification.Verdict("jacobian_fd_consistency", dev,
                                             (0.0, 0.1), dev <= 0.1))

    # small-exit-time scaling
    efit = verification.exit_time_scaling(cfg.field, cfg.theta, vcfg.delta_grid,
                                          vcfg.samples, seed=cfg.seed)
    verdicts.append(verification.Verdict("exit_time_scaling", efit.slope, (1.8, 2.2),
                                         efit.slope_in(1.8, 2.2)))
    _csv(out_dir / "exit_scaling.csv", cfg, ["delta", "prob", "se"],
         zip(efit.grid, efit.probs, efit.ses))
    artifacts.append(out_dir / "exit_scaling.csv")
    scaling_fits = [(efit, "exit time")]

    # magnetic resonance bands
    if cfg.field.regime is Regime.MAGNETIC:
        bfield = cfg.field if cfg.field.b3 >= 10 else magnetic_field(cfg.params["bad_set_b3"])
        bfit = verification.bad_set_scaling(bfield, cfg.theta, vcfg.eps_grid,
                                            vcfg.samples, seed=cfg.seed)
        verdicts.append(verification.Verdict(
            "bad_set_scaling", bfit.slope, (0.8, 1.2), bfit.slope_in(0.8, 1.2),
            detail={"b3": bfield.b3}))
        _csv(out_dir / "bad_set.csv", cfg, ["eps", "prob", "se"],
             zip(bfit.grid, bfit.probs, bfit.ses))
        artifacts.append(out_dir / "bad_set.csv")
        scaling_fits.append((bfit, f"resonance bands (B3={bfield.b3:g})"))

    if cfg.params["figures"]:
        artifacts.append(report.scaling_figure(scaling_fits, out_dir / "scaling.png"))

    # residual chain mass at two horizons
    curves = []
    for horizon in vcfg.horizons:
        rc = verification.residual_measure_curve(cfg.theta, cfg.field, vcfg.i_max,
                                                 horizon, vcfg.chains, seed=cfg.seed)
        curves.append((rc, f"horizon {horizon:g}"))
        verdicts.append(verification.Verdict(
            f"residual_uniform_bound_h{horizon:g}", float(np.max(rc.values)),
            (0.0, 2.0 * float(np.max(rc.values[:10]))), rc.uniformly_bounded(),
            detail={"naive_bound_at_max_depth": float(rc.naive_bound[-1])}))
    _csv(out_dir / "residual.csv", cfg, ["depth", "horizon", "value", "se"],
         [(d, c.horizon, v, s) for c, _ in curves
          for d, v, s in zip(c.depth, c.values, c.ses)])
    artifacts.append(out_dir / "residual.csv")
    if cfg.params["figures"]:
        artifacts.append(report.residual_figure(curves, out_dir / "residual.png"))

    # Doeblin overlap of the discretized chain
    kernel = stationary.estimate_kernel(vcfg.doeblin_grid, vcfg.doeblin_samples_per_cell,
                                        cfg.field, cfg.theta, seed=cfg.seed)
    dres = [verification.doeblin_minorization(kernel, n) for n in (1, 2, 3)]
    monotone = all(a.coupling <= b.coupling + 1e-12 for a, b in zip(dres, dres[1:]))
    verdicts.append(verification.Verdict(
        "doeblin_overlap_N3", dres[-1].coupling, (0.0, 1.0),
        dres[-1].coupling > 0 and monotone,
        detail={"c": [r.coupling for r in dres], "monotone": monotone}))
    _csv(out_dir / "doeblin.csv", cfg, ["steps", "coupling"],
         [(r.steps, r.coupling) for r in dres])
    artifacts.append(out_dir / "doeblin.csv")
    if cfg.params["figures"]:
        artifacts.append(report.doeblin_figure(dres, out_dir / "doeblin.png"))

    # flux-tube identity
    for k, fn in enumerate(("mu", "gauss_exp")):
        c = cov_identity_check(cfg.field, cfg.theta, fn, samples=vcfg.samples,
                               rng=stream(cfg.seed, 600 + k))
        tol = max(0.01, 3.0 * (c.lhs_se + c.rhs_se) / max(abs(c.rhs), 1e-300))
        verdicts.append(verification.Verdict(
            f"cov_identity_{fn}", c.rel_err, (0.0, tol), c.rel_err <= tol,
            detail={"lhs": c.lhs, "rhs": c.rhs, "lhs_se": c.lhs_se, "rhs_se": c.rhs_se}))

    payload = {"verdicts": [v.to_json() for v in verdicts]}
    payload.update(cfg.meta())
    vpath = out_dir / "verify.json"
    with open(vpath, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")
    artifacts.append(vpath)
    n_pass = sum(v.passed for v in verdicts)
    return {"n_tests": len(verdicts), "n_pass": n_pass,
            "all_pass": n_pass == len(verdicts),
            "summary_line": f"verification: {n_pass}/{len(verdicts)} checks passed"}


def _csv(path, cfg: RunConfig, header, rows):
    with open(path, "w") as fh:
        for k, v in sorted(cfg.meta().items()):
            fh.write(f"# {k}: {v}\n")
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(f"{x:.12g}" if isinstance(x, float) else str(x)
                              for x in row) + "\n")


def run(cfg: RunConfig) -> int:
    errors, tm, tp = _validate(cfg)
    if errors:
        for e in errors:
            print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    artifacts: list = []
    try:
        if cfg.experiment == "kernel":
            payload = _run_kernel(cfg, artifacts)
        elif cfg.experiment == "stationary":
            payload = _run_stationary(cfg, artifacts)
        elif cfg.experiment == "decay":
            payload = _run_decay(cfg, artifacts, tm, tp)
        elif cfg.experiment == "simulate":
            payload = _run_decay(cfg, artifacts, tm, tp, kind=cfg.params["kind"])
        else:
            payload = _run_verify(cfg, artifacts)
    except Exception as exc:  # numerical failure: diagnostic json + exit 3
        cfg.output_dir.mkdir(parents=True, exist_ok=True)
        diag = {"error": type(exc).__name__, "message": str(exc),
                "traceback": traceback.format_exc()}
        diag.update(cfg.meta())
        with open(cfg.output_dir / "error.json", "w") as fh:
            json.dump(diag, fh, indent=2, sort_keys=True)
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    payload = _write_summary(cfg, payload, artifacts)
    print(payload.get("summary_line", f"{cfg.experiment} done"))
    return EXIT_OK


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(
        prog="gravmix",
        description="Kinetic half-space transport: stationary flux, mixing "
                    "dynamics, and verification experiments.")
    ap.add_argument("config", help="structured-text config file")
    ap.add_argument("--experiment", choices=EXPERIMENTS)
    ap.add_argument("--seed", type=int)
    ap.add_argument("--workers", type=int)
    ap.add_argument("--out")
    args = ap.parse_args(argv)
    try:
        cfg = load_config(args.config, args.experiment, args.seed, args.workers, args.out)
    except (ConfigError, FieldError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
