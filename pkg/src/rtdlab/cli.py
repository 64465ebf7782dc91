"""Command-line front end for the built-in experiments.

Subcommands
    eigs        eigenvalue table of the mean-flow matrix over a gamma grid
    hist        scaled/centered estimates with the theoretical Gaussian overlay
    bias        empirical vs predicted bias, plus the bias-norm curve in delta_r
    sensitivity closed-form derivatives with finite-difference cross-checks
    dirichlet   spectral-gap table and quadratic-form bound margins
    run         plain multi-run harness with per-run JSON and an aggregate CSV
    moments     arrival-distribution moment check for the speed-scaling model

All outputs are written under ``--out`` as CSV/JSON with full-precision
floats and a configuration hash, so a rerun with the same configuration and
seed is byte-identical.  Errors exit nonzero after printing a JSON object
with ``error`` and ``message`` fields.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path as FsPath

import numpy as np

from . import models
from .asymptotics import (VARIANT_FIXED_RELATIVE, VARIANT_TD0, VARIANT_VARPI_LIMIT,
                          ReportCache, asymptotics_report, build_noise_model,
                          report_payload, sensitivity, sigma_delta, sigma_theta_star)
from .errors import RtdLabError
from .features import FeatureMap, builtin_basis, feature_stats
from .learner import (EVAL_MODES, FiniteChainEnv, LearnerConfig, StepSchedule,
                      empirical_bias, empirical_clt_samples, run_many, snapshot_indices)
from .markov import build_chain, load_model, pair_chain
from .meanflow import (dirichlet_report, mean_flow_relative, spectral_report)
from .speedscale import (SpeedScalingEnv, SpeedScalingModel, estimate_noise_covariance,
                         estimate_stats, gamma_moment_check)

DEFAULT_GAMMA_GRID = (0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99, 0.999)
DEFAULT_BETA_GRID = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.99)


def _fmt(x) -> str:
    """Full-precision, round-trippable float text."""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def write_csv(path: FsPath, header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) if not isinstance(v, str) else v for v in row))
    path.write_text("\n".join(lines) + "\n")


def write_json(path: FsPath, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    raise TypeError(f"not JSON-serializable: {type(obj)}")


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=_json_default)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _resolved(args: argparse.Namespace) -> dict:
    skip = {"func", "out", "config"}
    return {k: v for k, v in sorted(vars(args).items())
            if k not in skip and not callable(v)}


class ModelBundle:
    """A finite model resolved to chain + basis + environment."""

    def __init__(self, chain, psi: FeatureMap, policy):
        self.chain = chain
        self.psi = psi
        self.policy = policy
        self.env = FiniteChainEnv(chain, psi, policy)
        self.stats = feature_stats(chain, psi)


def resolve_model(name: str, basis: str) -> ModelBundle | SpeedScalingModel:
    if name == "speed_scaling":
        return SpeedScalingModel()
    if name == "finite3x2":
        mdp, policy = models.finite_mdp(), models.finite_eval_policy()
        explicit = None
    elif name.startswith("file:"):
        mdp, policy, explicit = load_model(name[5:])
    else:
        raise RtdLabError(f"unknown model {name!r}")
    chain = build_chain(mdp, policy)
    if explicit is not None and basis == "file":
        psi = FeatureMap(explicit)
    else:
        psi = builtin_basis(basis if basis != "file" else "finite_poly",
                            mdp.n_states, mdp.n_actions)
    return ModelBundle(chain, psi, policy.probs)


def _learner_config(args, bundle: ModelBundle | None) -> LearnerConfig:
    sched = StepSchedule(alpha0=args.alpha0, rho=args.rho)
    kw = dict(gamma=args.gamma, lam=args.lam, step=sched, variant=args.variant,
              delta_r=args.delta_r, eval_mode=args.eval_mode, seed=args.seed,
              pr_burn_in_fraction=args.burn_in)
    if args.variant == "varpi_relative_fixed":
        if bundle is None:
            raise RtdLabError("varpi_relative_fixed on speed_scaling needs estimated psi_bar")
        kw["psi_bar"] = bundle.stats.psi_bar
    return LearnerConfig(**kw)


def cmd_eigs(args) -> int:
    out = FsPath(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = resolve_model(args.model, args.basis)
    gammas = args.gamma_grid or DEFAULT_GAMMA_GRID
    deltas = args.delta_grid or (0.0, args.delta_r)
    rows = []
    if isinstance(model, SpeedScalingModel):
        stats_list = [estimate_stats(model, args.steps, args.seed, stream=2 * i)
                      for i in range(args.runs)]
        d = model.dim
        for g in gammas:
            for dr in deltas:
                if args.lam * g >= 1 - 1e-6:
                    continue
                pooled = np.mean([s.mean_flow(g, dr) for s in stats_list], axis=0)
                rep = spectral_report(pooled)
                per = [np.min(np.abs(spectral_report(s.mean_flow(g, dr)).eigenvalues.real))
                       for s in stats_list]
                se = float(np.std(per, ddof=1) / np.sqrt(len(per))) if len(per) > 1 else 0.0
                rows.append([g, args.lam, dr]
                            + list(rep.eigenvalues.real) + list(rep.eigenvalues.imag)
                            + [rep.max_real_part, rep.condition_number, rep.hurwitz,
                               args.steps, args.runs, se])
        header = (["gamma", "lambda", "delta_r"]
                  + [f"eig_re_{i+1}" for i in range(d)] + [f"eig_im_{i+1}" for i in range(d)]
                  + ["max_re", "cond", "hurwitz", "traj_steps", "n_traj", "min_abs_re_se"])
    else:
        d = model.psi.dim
        for g in gammas:
            for dr in deltas:
                if args.lam * g >= 1 - 1e-6:
                    continue
                flow = mean_flow_relative(model.chain, model.psi, g, args.lam, dr)
                rep = spectral_report(flow.a_bar)
                rows.append([g, args.lam, dr]
                            + list(rep.eigenvalues.real) + list(rep.eigenvalues.imag)
                            + [rep.max_real_part, rep.condition_number, rep.hurwitz])
        header = (["gamma", "lambda", "delta_r"]
                  + [f"eig_re_{i+1}" for i in range(d)] + [f"eig_im_{i+1}" for i in range(d)]
                  + ["max_re", "cond", "hurwitz"])
    write_csv(out / "eigs.csv", header, rows)
    write_json(out / "eigs_meta.json", {"config": _resolved(args),
                                        "config_hash": config_hash(_resolved(args))})
    return 0


def cmd_hist(args) -> int:
    out = FsPath(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = resolve_model(args.model, args.basis)
    n0 = int(args.burn_in * args.steps)
    plan = snapshot_indices(max(n0, 1), args.steps, args.rho, args.snapshots) \
        if args.snapshots >= 2 else ()
    if isinstance(model, SpeedScalingModel):
        env = SpeedScalingEnv(model)
        cfg = _learner_config(args, None)
        stats = estimate_stats(model, args.steps, args.seed, stream=10_001)
        a_bar = stats.mean_flow(args.gamma, args.delta_r)
        theta_star = stats.theta_star(args.gamma, args.delta_r)
        correction = "matrix" if args.variant == "varpi_relative_fixed" else "scalar"
        sig_d = estimate_noise_covariance(model, stats, args.gamma, args.delta_r,
                                          args.steps, args.seed, stream=10_003,
                                          correction=correction)
        sig_t = sigma_theta_star(a_bar, sig_d)
        overlay_src = "monte_carlo"
    else:
        env = model.env
        cfg = _learner_config(args, model)
        pair = pair_chain(model.chain)
        # noise statistics of the algorithm actually run: the fixed variant
        # applies the baseline as a deterministic matrix, the others carry it
        # inside the temporal-difference scalar
        if args.delta_r == 0 or args.variant == "td":
            variant = VARIANT_TD0
        elif args.variant == "varpi_relative_fixed":
            variant = VARIANT_FIXED_RELATIVE
        else:
            variant = VARIANT_VARPI_LIMIT
        noise = build_noise_model(model.chain, model.psi, args.gamma,
                                  args.delta_r if args.variant != "td" else 0.0, variant)
        theta_star = noise.theta_star
        sig_t = sigma_theta_star(noise.a_bar, sigma_delta(noise, pair))
        overlay_src = "exact"
    runs = run_many(env, cfg, args.steps, args.runs, snapshot_plan=tuple(plan))
    samples = empirical_clt_samples(runs, theta_star,
                                    source="snapshots" if args.snapshots >= 2 else "final")
    d = samples.shape[1]
    write_csv(out / "hist_samples.csv",
              [f"component_{i+1}" for i in range(d)],
              [list(r) for r in samples])
    write_json(out / "hist_overlay.json", {
        "mean": [0.0] * d,
        "variance": list(np.diag(sig_t)),
        "sigma_theta_star": sig_t,
        "theta_star": theta_star,
        "overlay_source": overlay_src,
        "n_samples": int(samples.shape[0]),
        "config": _resolved(args),
        "config_hash": config_hash(_resolved(args)),
    })
    return 0


def cmd_bias(args) -> int:
    out = FsPath(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = resolve_model(args.model, args.basis)
    if isinstance(model, SpeedScalingModel):
        raise RtdLabError("bias command requires a finite model")
    if args.lam != 0.0:
        raise RtdLabError("bias machinery is lam = 0 only")
    pair = pair_chain(model.chain)
    rep = asymptotics_report(model.chain, model.psi, args.gamma, args.delta_r,
                             args.rho, VARIANT_FIXED_RELATIVE, pair)
    noise = build_noise_model(model.chain, model.psi, args.gamma, args.delta_r,
                              VARIANT_FIXED_RELATIVE)
    cfg = _learner_config(args, model)
    cfg = LearnerConfig(**{**cfg.__dict__, "variant": "varpi_relative_fixed",
                           "psi_bar": model.stats.psi_bar,
                           "theta0": noise.theta_star,
                           "pr_burn_in_fraction": 0.0})
    runs = run_many(model.env, cfg, args.steps, args.runs)
    alpha_n = cfg.step.alpha(args.steps)
    emp = empirical_bias(runs, noise.theta_star, alpha_n)
    pr_samples = np.stack([(r.theta_pr - noise.theta_star) / alpha_n for r in runs])
    iterate_pred = (1.0 - args.rho) * rep.bias
    rows = []
    for i in range(model.psi.dim):
        rows.append([i + 1, emp.value[i], emp.stderr[i], iterate_pred[i],
                     float(pr_samples[:, i].mean()),
                     float(pr_samples[:, i].std(ddof=1) / np.sqrt(len(runs))),
                     rep.bias[i]])
    write_csv(out / "bias_table.csv",
              ["component", "empirical_iterate", "stderr_iterate", "predicted_iterate",
               "empirical_averaged", "stderr_averaged", "predicted_averaged"],
              rows)
    # ||bias||^2 curve over delta_r with tangent slope at 0
    sens = sensitivity(model.chain, model.psi, args.gamma, args.rho, pair)
    cache = ReportCache(model.chain, model.psi)
    rep0 = cache.get(args.gamma, 0.0, args.rho, VARIANT_TD0)
    slope = 2.0 * float(rep0.bias @ sens.d_bias)
    curve = []
    for dr in [0.1 * k for k in range(0, 11)]:
        r = cache.get(args.gamma, dr, args.rho,
                      VARIANT_FIXED_RELATIVE if dr > 0 else VARIANT_TD0)
        curve.append([dr, float(r.bias @ r.bias)])
    write_csv(out / "bias_curve.csv", ["delta_r", "bias_sq_norm"], curve)
    write_json(out / "bias_meta.json", {
        "slope_at_zero": slope,
        "bias_sq_at_zero": float(rep0.bias @ rep0.bias),
        "config": _resolved(args),
        "config_hash": config_hash(_resolved(args)),
    })
    return 0


def cmd_sensitivity(args) -> int:
    out = FsPath(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = resolve_model(args.model, args.basis)
    if isinstance(model, SpeedScalingModel):
        raise RtdLabError("sensitivity command requires a finite model")
    pair = pair_chain(model.chain)
    rep = sensitivity(model.chain, model.psi, args.gamma, args.rho, pair)
    h = args.fd_step
    r_p = asymptotics_report(model.chain, model.psi, args.gamma, h, args.rho,
                             VARIANT_FIXED_RELATIVE, pair)
    r_m = asymptotics_report(model.chain, model.psi, args.gamma, -h, args.rho,
                             VARIANT_FIXED_RELATIVE, pair)
    fd_sigma = (r_p.sigma_theta_star - r_m.sigma_theta_star) / (2 * h)
    fd_bias = (r_p.bias - r_m.bias) / (2 * h)
    base_variant = VARIANT_FIXED_RELATIVE if args.delta_r > 0 else VARIANT_TD0
    base = asymptotics_report(model.chain, model.psi, args.gamma, args.delta_r,
                              args.rho, base_variant, pair)
    write_json(out / "asymptotics.json",
               report_payload(base, args.gamma, 0.0, args.delta_r, base_variant))
    write_json(out / "sensitivity.json", {
        "d_theta_star": rep.d_theta_star,
        "d_a_bar": rep.d_a_bar,
        "d_a_inv": rep.d_a_inv,
        "d_sigma": rep.d_sigma,
        "d_bias": rep.d_bias,
        "sigma_delta_prime": rep.sigma_delta_prime,
        "upsilon_bar_prime": rep.upsilon_bar_prime,
        "d_sigma_frozen_noise": rep.d_sigma_frozen_noise,
        "d_bias_frozen_noise": rep.d_bias_frozen_noise,
        "a_inv_prime_outer_residual": rep.a_inv_prime_outer_residual,
        "fd_d_sigma": fd_sigma,
        "fd_d_bias": fd_bias,
        "fd_step": h,
        "rel_err_d_sigma": float(np.max(np.abs(fd_sigma - rep.d_sigma))
                                 / np.max(np.abs(fd_sigma))),
        "rel_err_d_bias": float(np.max(np.abs(fd_bias - rep.d_bias))
                                / np.max(np.abs(fd_bias))),
        "config": _resolved(args),
        "config_hash": config_hash(_resolved(args)),
    })
    return 0


def cmd_dirichlet(args) -> int:
    out = FsPath(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = resolve_model(args.model, args.basis)
    if isinstance(model, SpeedScalingModel):
        raise RtdLabError("dirichlet command requires a finite model")
    stats = model.stats
    rng = np.random.default_rng(args.seed)
    probes = rng.standard_normal((args.probes, model.psi.dim))
    rows = []
    warnings = []
    for beta in (args.beta_grid or DEFAULT_BETA_GRID):
        rep = dirichlet_report(model.chain, model.psi, beta)
        margins = [float(th @ rep.m_beta @ th - rep.gap * (th @ stats.sigma0 @ th))
                   for th in probes]
        rows.append([beta, rep.gap, rep.eps_p, min(margins), int(rep.degenerate)])
        if rep.degenerate:
            warnings.append(f"degenerate spectral gap at beta={beta}")
    write_csv(out / "dirichlet.csv",
              ["beta", "gap", "eps_p", "min_probe_margin", "degenerate"], rows)
    write_json(out / "dirichlet_meta.json", {
        "warnings": warnings,
        "config": _resolved(args),
        "config_hash": config_hash(_resolved(args)),
    })
    return 0


def cmd_run(args) -> int:
    out = FsPath(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = resolve_model(args.model, args.basis)
    if isinstance(model, SpeedScalingModel):
        env = SpeedScalingEnv(model)
        cfg = _learner_config(args, None)
    else:
        env = model.env
        cfg = _learner_config(args, model)
    n0 = int(args.burn_in * args.steps)
    plan = snapshot_indices(max(n0, 1), args.steps, args.rho, args.snapshots) \
        if args.snapshots >= 2 else ()
    runs = run_many(env, cfg, args.steps, args.runs, snapshot_plan=tuple(plan))
    meta = {"config": _resolved(args), "config_hash": config_hash(_resolved(args))}
    agg_rows = []
    for r in runs:
        write_json(out / f"run_{r.run_index:04d}.json", {
            "run_index": r.run_index,
            "seed": r.seed,
            "n_steps": r.n_steps,
            "theta_final": r.theta_final,
            "theta_pr": r.theta_pr,
            "pr_count": r.pr_count,
            "snapshots": [{"n": s.n, "theta": s.theta,
                           "theta_pr": s.theta_pr, "pr_count": s.pr_count}
                          for s in r.snapshots],
            **meta,
        })
        for i in range(len(r.theta_final)):
            agg_rows.append([r.run_index, i + 1, r.theta_pr[i], r.theta_final[i]])
    write_csv(out / "runs.csv", ["run_id", "component", "theta_pr", "theta_final"], agg_rows)
    write_json(out / "run_meta.json", meta)
    return 0


def cmd_moments(args) -> int:
    out = FsPath(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mc = gamma_moment_check(SpeedScalingModel(), args.steps, args.seed)
    write_json(out / "gamma_moments.json", {
        "sample_mean": mc.sample_mean, "sample_var": mc.sample_var,
        "mean_se": mc.mean_se, "var_se": mc.var_se,
        "expected_mean": mc.expected_mean, "expected_var": mc.expected_var,
        "mean_ok": mc.mean_ok, "var_ok": mc.var_ok,
        "config": _resolved(args), "config_hash": config_hash(_resolved(args)),
    })
    return 0


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=str, default=None, help="JSON config file; flags override")
    p.add_argument("--out", type=str, required=True, help="output directory")
    p.add_argument("--model", type=str, default="finite3x2",
                   help="finite3x2 | speed_scaling | file:<path>")
    p.add_argument("--basis", type=str, default="finite_poly",
                   help="finite_poly | tabular | file (explicit matrix from model file)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=100_000)
    p.add_argument("--runs", type=int, default=50)
    p.add_argument("--gamma", type=float, default=0.99)
    p.add_argument("--lam", "--lambda", dest="lam", type=float, default=0.0)
    p.add_argument("--delta-r", dest="delta_r", type=float, default=0.5)
    p.add_argument("--variant", type=str, default="varpi_relative",
                   help="td | relative_fixed_mu | varpi_relative | varpi_relative_fixed")
    p.add_argument("--eval-mode", dest="eval_mode", type=str, default="on_policy",
                   choices=EVAL_MODES)
    p.add_argument("--alpha0", type=float, default=0.02)
    p.add_argument("--rho", type=float, default=0.65)
    p.add_argument("--burn-in", dest="burn_in", type=float, default=0.2)
    p.add_argument("--snapshots", type=int, default=0)
    p.add_argument("--gamma-grid", dest="gamma_grid", type=float, nargs="*", default=None)
    p.add_argument("--delta-grid", dest="delta_grid", type=float, nargs="*", default=None)
    p.add_argument("--beta-grid", dest="beta_grid", type=float, nargs="*", default=None)
    p.add_argument("--probes", type=int, default=100)
    p.add_argument("--fd-step", dest="fd_step", type=float, default=1e-5)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rtdlab",
                                     description="relative TD policy-evaluation laboratory")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("eigs", cmd_eigs), ("hist", cmd_hist), ("bias", cmd_bias),
                     ("sensitivity", cmd_sensitivity), ("dirichlet", cmd_dirichlet),
                     ("run", cmd_run), ("moments", cmd_moments)):
        p = sub.add_parser(name)
        _add_common(p)
        p.set_defaults(func=fn)
    return parser


def _apply_config_file(args: argparse.Namespace, parser: argparse.ArgumentParser,
                       argv: list[str]) -> argparse.Namespace:
    if not args.config:
        return args
    with open(args.config) as fh:
        overrides = json.load(fh)
    base = vars(args).copy()
    # config file fills values the command line left at defaults
    defaults = vars(parser.parse_args([argv[0], "--out", base["out"]])).copy()
    for key, val in overrides.items():
        if key not in base:
            raise RtdLabError(f"unknown config key {key!r}")
        if base[key] == defaults.get(key):
            base[key] = val
    ns = argparse.Namespace(**base)
    return ns


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args = _apply_config_file(args, parser, argv)
        return args.func(args)
    except RtdLabError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}))
        return 2


if __name__ == "__main__":
    sys.exit(main())
