"""Batch front-end: dataset generation, pretraining, training runs, the
particle-MCMC baseline, checkpoint diagnosis and posterior summaries.

All experiments are driven by one JSON config file; `--seed` and `--output`
override the config. Outputs per run directory:

* ``trace.jsonl``      one deterministic diagnostics row per iteration
* ``timings.jsonl``    wall-clock per iteration (kept separate so identical
                       seeds produce byte-identical trace/sample files)
* ``posterior.csv``    final weighted sample with a resampled-count column
* ``checkpoint.npz``   final proposal parameters
* ``manifest.json``    resolved config, fixture checksum, wall totals

Exit codes: 0 success, 1 unrecoverable run failure (an ``error.json`` is
written), 2 malformed config (nothing is written).
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import os
import sys
import time
from pathlib import Path

MODELS = ("sinusoid", "mg1", "lorenz", "lorenz_fixed_sigma")

_THREAD_VARS = ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS")


class ConfigError(ValueError):
    pass


def _set_thread_env(argv) -> None:
    """Apply --threads before numpy is imported anywhere."""
    threads = None
    for i, tok in enumerate(argv):
        if tok == "--threads" and i + 1 < len(argv):
            threads = argv[i + 1]
        elif tok.startswith("--threads="):
            threads = tok.split("=", 1)[1]
    if threads is not None:
        for var in _THREAD_VARS:
            os.environ[var] = str(int(threads))


# ---------------------------------------------------------------------------
# config handling

_DEFAULTS = {
    "model_options": {},
    "flow": {},
    "dis": {},
    "pretrain": {"enabled": False, "n": 100, "ess_threshold_fraction": 0.5,
                 "check_size": 1000, "check_every": 10, "max_steps": 2000,
                 "step_size": 1e-3},
    "posterior": {"n_resample": 1000},
    "generate": {},
    "pmcmc": {"n_iters": 20000, "pilot_iters": 2000, "candidates": [50, 100, 200, 400, 800],
              "replicates": 20, "target_sd": 1.5, "n_pf": None, "jitter": 1e-10},
}

_MODEL_EPS0 = {"sinusoid": 1.0, "mg1": 10.0, "lorenz": 1.0, "lorenz_fixed_sigma": 1.0}


def load_config(path, overrides=None) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ConfigError(f"config is not valid JSON: {err}") from err
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")

    merged = copy.deepcopy(_DEFAULTS)
    for key, value in cfg.items():
        if key in merged and isinstance(merged[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config section {key!r} must be an object")
            merged[key].update(value)
        else:
            merged[key] = value
    if overrides:
        for key, value in overrides.items():
            if value is not None:
                merged[key] = value

    if merged.get("model") not in MODELS:
        raise ConfigError(f"model must be one of {MODELS}")
    if not isinstance(merged.get("seed"), int):
        raise ConfigError("an integer seed is mandatory")
    if "output" not in merged:
        raise ConfigError("output directory is mandatory")
    merged["dis"].setdefault("eps0", _MODEL_EPS0[merged["model"]])
    if merged["model"] == "mg1":
        # the ABC kernel never reaches eps = 0; stop on the iteration or
        # wall-clock budget instead
        merged["dis"].setdefault("eps_target", 0.0)
    return merged


def _require_fixture(cfg) -> Path:
    if "fixture" not in cfg:
        raise ConfigError(f"model {cfg['model']!r} needs a fixture file")
    path = Path(cfg["fixture"])
    if not path.exists():
        raise ConfigError(f"fixture file not found: {path}")
    return path


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# experiment assembly (heavy imports stay inside the functions)

def _lorenz_config(cfg, fixture):
    from .models.lorenz import LorenzConfig

    opts = cfg["model_options"]
    sigma = opts.get("sigma")
    if cfg["model"] == "lorenz_fixed_sigma" and sigma is None:
        sigma = 0.2
    if cfg["model"] == "lorenz":
        sigma = None
    obs_steps = tuple(int(s) for s in fixture.data[:, 0])
    return LorenzConfig(
        n_steps=fixture.meta_ints("n_steps")[0],
        dt=fixture.meta_floats("dt")[0],
        x0=tuple(fixture.meta_floats("x0")),
        obs_steps=obs_steps,
        sigma=sigma,
        prior_rate=float(opts.get("prior_rate", 0.1)),
        guard=float(opts.get("guard", 1000.0)),
    )


def build_experiment(cfg):
    """Target, proposal factory and fixture info for a validated config."""
    from . import fixtures as fixtures_mod
    from .flow import RealNvp, init_identity
    from .models import lorenz, mg1, sinusoid

    model = cfg["model"]
    perm_seed = int(cfg["flow"].get("perm_seed", cfg["seed"]))
    fixture_info = None

    if model == "sinusoid":
        target = sinusoid.SinusoidTarget()

        def make_proposal(rng):
            return init_identity(sinusoid.flow_architecture(), rng)

    elif model == "mg1":
        path = _require_fixture(cfg)
        fx = fixtures_mod.read_fixture(path)
        if fx.model != "mg1":
            raise ConfigError(f"fixture {path} is for model {fx.model!r}")
        y0 = fx.data.ravel()
        opts = cfg["model_options"]
        target = mg1.Mg1Target(y0, rel_floor=float(opts.get("rel_floor", 1e-3)),
                               abs_floor=float(opts.get("abs_floor", 1e-6)))
        fixture_info = {"path": str(path), "sha256": _sha256(path)}

        def make_proposal(rng):
            return init_identity(mg1.flow_architecture(y0.size, perm_seed=perm_seed), rng)

    else:  # lorenz family
        path = _require_fixture(cfg)
        fx = fixtures_mod.read_fixture(path)
        if fx.model != "lorenz":
            raise ConfigError(f"fixture {path} is for model {fx.model!r}")
        config = _lorenz_config(cfg, fx)
        y = fx.data[:, 1:]
        target = lorenz.LorenzTarget(config, y)
        fixture_info = {"path": str(path), "sha256": _sha256(path)}
        step_hidden = tuple(cfg["flow"].get("step_hidden", (80, 80, 80)))

        def make_proposal(rng):
            prop = lorenz.LorenzProposal(
                config, y,
                theta_arch=lorenz.flow_architecture(config.n_theta, perm_seed=perm_seed),
                step_hidden=step_hidden)
            prop.init_near_identity(rng)
            return prop

    return target, make_proposal, fixture_info


def _dis_config(cfg):
    from .dis import DisConfig

    try:
        return DisConfig(**cfg["dis"])
    except (TypeError, ValueError) as err:
        raise ConfigError(f"bad dis section: {err}") from err


def _save_proposal(path, proposal) -> None:
    from .flow import RealNvp, save_checkpoint
    from .models.lorenz import LorenzProposal, save_proposal

    if isinstance(proposal, LorenzProposal):
        save_proposal(path, proposal)
    elif isinstance(proposal, RealNvp):
        save_checkpoint(path, proposal)
    else:
        raise TypeError(f"cannot checkpoint {type(proposal)!r}")


def _load_proposal(path):
    import json as _json

    import numpy as np

    if not Path(path).exists():
        raise ConfigError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as data:
        kind = _json.loads(str(data["meta"])).get("kind")
    if kind == "realnvp":
        from .flow import load_checkpoint
        return load_checkpoint(path)
    if kind == "lorenz_proposal":
        from .models.lorenz import load_proposal
        return load_proposal(path)
    raise ConfigError(f"unknown checkpoint kind {kind!r} in {path}")


def _permutation_lists(proposal):
    from .models.lorenz import LorenzProposal

    flow = proposal.theta_flow if isinstance(proposal, LorenzProposal) else proposal
    return [[int(v) for v in p] for p in flow.permutations]


def _write_manifest(out_dir, payload) -> None:
    (out_dir / "manifest.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _float_repr(x) -> str:
    return repr(float(x))


def write_posterior_csv(path, sample, target, n_resample, rng) -> None:
    """Final weighted sample: normalised clipped weight, raw log weight, how
    often each row was picked in one resampled subsample, report columns."""
    import numpy as np

    from .montecarlo import resample as mc_resample

    names = target.report_names
    values = target.report_values(sample.xis)
    weights = sample.norm_trunc_weights()
    log_w = sample.log_p_tilde - sample.log_q
    counts = np.bincount(mc_resample(sample.w_trunc, n_resample, rng),
                         minlength=sample.n)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["weight", "log_w", "resample_count", *names])
        for i in range(sample.n):
            writer.writerow([_float_repr(weights[i]), _float_repr(log_w[i]),
                             int(counts[i]), *(_float_repr(v) for v in values[i])])


# ---------------------------------------------------------------------------
# commands

def cmd_generate_data(args) -> int:
    cfg = load_config(args.config, {"seed": args.seed, "output": args.output})
    import numpy as np

    from . import fixtures as fixtures_mod
    from .models import lorenz, mg1

    model = cfg["model"]
    if model == "sinusoid":
        raise ConfigError("the sinusoid target has no dataset to generate")
    if "fixture" not in cfg:
        raise ConfigError("generate-data needs a fixture path in the config")
    rng = np.random.default_rng(cfg["seed"])
    gen = cfg["generate"]
    if model == "mg1":
        theta = tuple(gen.get("theta_true", mg1.TRUE_THETA))
        m = int(cfg["model_options"].get("m", mg1.DEFAULT_M))
        y = mg1.generate_dataset(theta=theta, m=m, rng=rng)
        fixtures_mod.write_fixture(
            cfg["fixture"], "mg1",
            {"seed": cfg["seed"], "theta_true": theta, "m": m},
            y[None, :].T)
    else:
        opts = cfg["model_options"]
        config = lorenz.LorenzConfig(
            n_steps=int(opts.get("n_steps", 100)),
            dt=float(opts.get("dt", 0.02)),
            x0=tuple(opts.get("x0", (-30.0, 0.0, 30.0))),
            obs_steps=tuple(opts.get("obs_steps", (20, 40, 60, 80, 100))),
            sigma=None)
        theta = tuple(gen.get("theta_true", lorenz.TRUE_DRIFT_THETA))
        sigma_true = float(gen.get("sigma_true", lorenz.TRUE_SIGMA))
        y, path = lorenz.generate_dataset(config, rng, theta=theta, sigma_obs=sigma_true)
        rows = np.column_stack([np.array(config.obs_steps, dtype=float), y])
        fixtures_mod.write_fixture(
            cfg["fixture"], "lorenz",
            {"seed": cfg["seed"], "theta_true": theta, "sigma_true": sigma_true,
             "n_steps": config.n_steps, "dt": config.dt, "x0": config.x0,
             "obs_steps": " ".join(str(s) for s in config.obs_steps)},
            rows)
        truepath = Path(cfg["fixture"]).with_name(Path(cfg["fixture"]).stem + "_truepath.txt")
        fixtures_mod.write_fixture(truepath, "lorenz_path",
                                   {"seed": cfg["seed"], "theta_true": theta}, path)
    print(f"wrote {cfg['fixture']}")
    return 0


def _run_pretrain(cfg, proposal, target, rng):
    from .dis import pretrain

    p = cfg["pretrain"]
    return pretrain(proposal, target, eps0=cfg["dis"]["eps0"], rng=rng,
                    n=int(p["n"]),
                    ess_threshold_fraction=float(p["ess_threshold_fraction"]),
                    check_size=int(p["check_size"]), check_every=int(p["check_every"]),
                    max_steps=int(p["max_steps"]), step_size=float(p["step_size"]))


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config, {"seed": args.seed, "output": args.output})
    dis_config = _dis_config(cfg)
    target, make_proposal, fixture_info = build_experiment(cfg)
    import numpy as np

    out_dir = Path(cfg["output"])
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg["seed"])
    proposal = make_proposal(rng)
    started = time.perf_counter()
    result = _run_pretrain(cfg, proposal, target, rng)
    _save_proposal(out_dir / "checkpoint.npz", proposal)
    _write_manifest(out_dir, {
        "mode": "pretrain", "package_version": _version(), "config": cfg,
        "fixture": fixture_info, "permutations": _permutation_lists(proposal),
        "pretrain": {"steps": result.steps, "converged": result.converged,
                     "ess_fraction": result.ess_fraction},
        "wall_s": time.perf_counter() - started,
        "outputs": {"checkpoint": "checkpoint.npz"},
    })
    status = "converged" if result.converged else "hit the step cap"
    print(f"pretrain {status} after {result.steps} steps "
          f"(ESS fraction {result.ess_fraction:.3f})")
    return 0


def cmd_run(args) -> int:
    cfg = load_config(args.config, {"seed": args.seed, "output": args.output})
    dis_config = _dis_config(cfg)
    target, make_proposal, fixture_info = build_experiment(cfg)

    import numpy as np

    from .dis import DisRunError, run
    from .montecarlo import DegenerateSampleError

    out_dir = Path(cfg["output"])
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg["seed"])
    proposal = make_proposal(rng)
    started = time.perf_counter()

    pretrain_info = None
    if cfg["pretrain"]["enabled"]:
        pres = _run_pretrain(cfg, proposal, target, rng)
        pretrain_info = {"steps": pres.steps, "converged": pres.converged,
                         "ess_fraction": pres.ess_fraction}

    trace_path = out_dir / "trace.jsonl"
    timing_path = out_dir / "timings.jsonl"
    try:
        with open(trace_path, "w") as trace_fh, open(timing_path, "w") as timing_fh:

            def on_row(row):
                trace_fh.write(json.dumps(row.to_json_dict(), sort_keys=True) + "\n")
                trace_fh.flush()
                timing_fh.write(json.dumps({"t": row.t, "wall_s": row.wall_s}) + "\n")

            def on_checkpoint(t, prop):
                _save_proposal(out_dir / f"checkpoint_{t:06d}.npz", prop)

            result = run(proposal, target, dis_config, rng,
                         trace_callback=on_row, checkpoint_callback=on_checkpoint)
    except (DisRunError, DegenerateSampleError) as err:
        (out_dir / "error.json").write_text(json.dumps(
            {"error": type(err).__name__, "message": str(err)}, indent=2) + "\n")
        print(f"run failed: {err}", file=sys.stderr)
        return 1

    write_posterior_csv(out_dir / "posterior.csv", result.final_sample, target,
                        int(cfg["posterior"]["n_resample"]), rng)
    _save_proposal(out_dir / "checkpoint.npz", proposal)
    _write_manifest(out_dir, {
        "mode": "run", "package_version": _version(), "config": cfg,
        "fixture": fixture_info, "permutations": _permutation_lists(proposal),
        "pretrain": pretrain_info,
        "result": {"eps_final": result.eps_final, "iterations": result.iterations,
                   "stopped_on": result.stopped_on,
                   "final_ess": result.final_sample.ess_report.ess},
        "wall_s": time.perf_counter() - started,
        "outputs": {"trace": "trace.jsonl", "timings": "timings.jsonl",
                    "posterior": "posterior.csv", "checkpoint": "checkpoint.npz"},
    })
    print(f"run finished: eps={result.eps_final:.6g} after {result.iterations} "
          f"iterations ({result.stopped_on})")
    return 0


def cmd_pmcmc(args) -> int:
    cfg = load_config(args.config, {"seed": args.seed, "output": args.output})
    if cfg["model"] not in ("lorenz", "lorenz_fixed_sigma"):
        raise ConfigError("the particle-MCMC baseline is for the Lorenz models")
    target, _, fixture_info = build_experiment(cfg)

    import numpy as np

    from . import fixtures as fixtures_mod
    from .pmcmc import LorenzStateSpace, batch_means_ess, pf_loglik, pmcmc_run, tune_npf

    fx = fixtures_mod.read_fixture(cfg["fixture"])
    config = target.config
    y = fx.data[:, 1:]
    theta_true = fx.meta_floats("theta_true")
    if config.sigma is None:
        theta0 = np.array(theta_true + [fx.meta_floats("sigma_true")[0]])
    else:
        theta0 = np.array(theta_true)

    out_dir = Path(cfg["output"])
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg["seed"])
    pcfg = cfg["pmcmc"]
    rate = config.prior_rate

    def loglik(theta, r, n_pf=None):
        model = LorenzStateSpace(config, y, np.asarray(theta))
        return pf_loglik(model, n_pf, r)

    def log_prior(theta):
        theta = np.asarray(theta)
        if np.any(theta <= 0):
            return -np.inf
        return float(theta.size * np.log(rate) - rate * np.sum(theta))

    started = time.perf_counter()
    tune_info = None
    n_pf = pcfg["n_pf"]
    if n_pf is None:
        tuned = tune_npf(lambda n, r: loglik(theta0, r, n_pf=n),
                         [int(c) for c in pcfg["candidates"]],
                         replicates=int(pcfg["replicates"]), rng=rng,
                         target_sd=float(pcfg["target_sd"]))
        n_pf = tuned.n_particles
        tune_info = {"n_pf": n_pf, "achieved_sd": tuned.achieved_sd,
                     "ok": tuned.ok, "table": tuned.table}

    # pilot chain with a diagonal proposal to estimate the posterior covariance
    pilot_cov = np.diag((0.1 * np.abs(theta0)) ** 2)
    pilot = pmcmc_run(lambda t, r: loglik(t, r, n_pf=n_pf), log_prior, theta0,
                      pilot_cov, int(pcfg["pilot_iters"]), rng)
    half = pilot.chain[pilot.chain.shape[0] // 2:]
    cov = np.cov(half.T) + float(pcfg["jitter"]) * np.eye(theta0.size)

    result = pmcmc_run(lambda t, r: loglik(t, r, n_pf=n_pf), log_prior, theta0,
                       cov, int(pcfg["n_iters"]), rng)

    names = target.report_names
    with open(out_dir / "chain.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", *names, "loglik", "accepted"])
        for i in range(result.chain.shape[0]):
            accepted = 1 if (i > 0 and result.accepted[i - 1]) else 0
            writer.writerow([i, *(_float_repr(v) for v in result.chain[i]),
                             _float_repr(result.logliks[i]), accepted])

    ess = batch_means_ess(result.chain)
    _write_manifest(out_dir, {
        "mode": "pmcmc", "package_version": _version(), "config": cfg,
        "fixture": fixture_info,
        "result": {"n_pf": int(n_pf), "tuning": tune_info,
                   "acceptance_rate": result.acceptance_rate,
                   "chain_ess_batch_means": [float(e) for e in ess],
                   "proposal_cov": [[float(v) for v in row] for row in cov]},
        "wall_s": time.perf_counter() - started,
        "outputs": {"chain": "chain.csv"},
    })
    print(f"pmcmc finished: {result.chain.shape[0] - 1} iterations, "
          f"acceptance {result.acceptance_rate:.3f}, N_PF={n_pf}")
    return 0


def cmd_diagnose(args) -> int:
    cfg = load_config(args.config, {"seed": args.seed, "output": args.output})
    target, _, _ = build_experiment(cfg)
    import numpy as np

    from .montecarlo import compute_weights, ess

    proposal = _load_proposal(args.checkpoint)
    rng = np.random.default_rng(cfg["seed"])
    n = int(args.n or cfg["dis"].get("n_sample", 1000))
    drawn = proposal.sample(rng, n)
    try:
        log_p = target.log_p_tilde(drawn.xi, args.eps)
    except ValueError as err:
        raise ConfigError(f"bad eps for this model: {err}") from err
    lw = compute_weights(log_p, drawn.log_q)
    report = ess(lw.mantissa)
    payload = {"eps": args.eps, "n": n, "ess": report.ess,
               "ess_fraction": report.ess / n,
               "max_norm_weight": report.max_norm_weight}
    print(json.dumps(payload, indent=2, sort_keys=True))
    return 0


def cmd_summarise(args) -> int:
    import numpy as np

    from .montecarlo import self_normalised_estimate

    path = Path(args.input)
    if not path.exists():
        raise ConfigError(f"posterior file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = np.array([[float(v) for v in row] for row in reader])
    if rows.size == 0:
        raise ConfigError("posterior file has no rows")
    weights = rows[:, header.index("weight")]
    report_cols = [(name, i) for i, name in enumerate(header)
                   if name not in ("weight", "log_w", "resample_count")]

    n_bins = int(args.bins)
    summary = {}
    for name, col in report_cols:
        values = rows[:, col]
        mean = self_normalised_estimate(weights, values)
        sd = float(np.sqrt(self_normalised_estimate(weights, (values - mean) ** 2)))
        qs = [0.05, 0.25, 0.5, 0.75, 0.95]
        summary[name] = {
            "mean": mean,
            "sd": sd,
            "quantiles": dict(zip(map(str, qs), _weighted_quantiles(values, weights, qs))),
            "histogram": _weighted_histogram(values, weights, n_bins),
        }
    out = json.dumps(summary, indent=2, sort_keys=True)
    if args.output:
        Path(args.output).write_text(out + "\n")
    print(out)
    return 0


def _weighted_quantiles(values, weights, qs):
    import numpy as np

    order = np.argsort(values, kind="stable")
    v = values[order]
    cw = np.cumsum(weights[order])
    cw = cw / cw[-1]
    out = []
    for q in qs:
        idx = int(np.searchsorted(cw, q, side="left"))
        out.append(float(v[min(idx, v.size - 1)]))
    return out


def _weighted_histogram(values, weights, n_bins):
    import numpy as np

    lo, hi = float(np.min(values)), float(np.max(values))
    if lo == hi:
        hi = lo + 1.0
    counts, edges = np.histogram(values, bins=n_bins, range=(lo, hi), weights=weights)
    return {"range": [lo, hi], "bins": n_bins,
            "mass": [float(c) for c in counts]}


def _version() -> str:
    from . import __version__
    return __version__


# ---------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="disamp",
        description="Flow-proposal importance sampling experiments")
    parser.add_argument("--threads", type=int, default=None,
                        help="BLAS/OpenMP thread count (set before numpy loads)")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.add_argument("--config", required=name != "summarise",
                       help="experiment config JSON")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--output", default=None, help="override output directory")
        p.add_argument("--threads", type=int, default=None)
        p.set_defaults(func=func)
        return p

    add("generate-data", cmd_generate_data, help="write a synthetic dataset fixture")
    add("pretrain", cmd_pretrain, help="fit the proposal to the initial target only")
    add("run", cmd_run, help="full training run")
    add("pmcmc", cmd_pmcmc, help="particle-MCMC baseline for the Lorenz models")
    p = add("diagnose", cmd_diagnose, help="ESS of a checkpoint against a given eps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--n", type=int, default=None)
    p = add("summarise", cmd_summarise, help="summary table for a posterior CSV")
    p.add_argument("--input", required=True)
    p.add_argument("--bins", type=int, default=40)
    p.set_defaults(config=None)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _set_thread_env(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
