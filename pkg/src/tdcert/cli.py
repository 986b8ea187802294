"""Batch command-line interface.

Three subcommands: `oracle` emits the closed-form report for an instance,
`run` executes one configured experiment end to end, and `sweep` drives a
grid along one axis. Configs are single JSON documents (see README for the
schema); every run writes a manifest that fully determines a re-run, and the
columnar outputs are byte-identical across reruns of the same manifest.

Exit codes: 0 all in-contract ledgers pass, 1 ledger failure, 2 hypothesis
out of contract, 3 input/validation error.
"""

import argparse
import json
import math
import os
import sys
import time
from datetime import datetime, timezone

from . import __version__
from .bundled import bundled_config, bundled_names
from .chain import ChainError, mrp_from_dict, tv_mixing_profile, validate_chain
from .oracle import (
    CertificationError,
    FeatureError,
    OracleError,
    build_steady_state,
    envelope_mixing_time,
    features_from_dict,
    mixing_time,
    oracle_report,
)
from .sa_core import (
    DelayProcess,
    StepSizeError,
    StepSizeSpec,
    resolve_step_size,
    LinearContractionProvider,
    SaturatingMonotoneProvider,
    TD0Provider,
)
from .harness import (
    AuditError,
    ConfigError,
    ExperimentConfig,
    alpha_sweep,
    check_boundedness,
    check_iid_noise,
    check_recursion,
    estimate_dt_et,
    nonlinear_sa_experiment,
    weighted_average_experiment,
    write_columnar,
)

EXIT_PASS = 0
EXIT_FAIL = 1
EXIT_OUT_OF_CONTRACT = 2
EXIT_INVALID_INPUT = 3


def load_config(path: str) -> dict:
    with open(path) as fh:
        cfg = json.load(fh)
    if "bundled" in cfg:
        base = bundled_config(cfg["bundled"])
        for key, value in cfg.items():
            if key == "bundled":
                continue
            if isinstance(value, dict) and isinstance(base.get(key), dict):
                base[key].update(value)
            else:
                base[key] = value
        cfg = base
    return cfg


def _build_provider(prov_cfg: dict, model):
    kind = prov_cfg.get("kind", "td0")
    if kind == "td0":
        return TD0Provider(model)
    pi = model.stationary.pi
    if kind == "linear_contraction":
        return LinearContractionProvider(prov_cfg["theta_star"],
                                         prov_cfg["noise"], pi)
    if kind == "saturating":
        return SaturatingMonotoneProvider(
            prov_cfg["theta_star"], prov_cfg["noise"], pi,
            a=prov_cfg.get("a", 0.7), b=prov_cfg.get("b", 0.3))
    raise ConfigError(f"unknown provider kind {kind!r}")


def _tau_at(model, provider, mode, alpha):
    if mode == "td0":
        return mixing_time(model.mrp, model.features, alpha).tau
    profile = tv_mixing_profile(model.mrp, 64)
    return envelope_mixing_time(profile, model.stationary,
                                provider.L * provider.sigma_const, alpha).tau


def _build_spec(step_cfg: dict, model, provider, mode: str) -> StepSizeSpec:
    C = float(step_cfg.get("C", 8.0))
    if step_cfg.get("alpha") is not None:
        alpha = float(step_cfg["alpha"])
        if step_cfg.get("tau") is not None:
            tau = int(step_cfg["tau"])
        else:
            tau = _tau_at(model, provider, mode, alpha)
        return StepSizeSpec(C=C, alpha=alpha, tau_alpha=tau, mode=mode)
    spec = resolve_step_size(model, C=C, mode=mode,
                             provider=provider if mode == "nonlinear" else None)
    scale = float(step_cfg.get("alpha_scale", 1.0))
    if scale != 1.0:
        alpha = spec.alpha * scale
        tau = _tau_at(model, provider, mode, alpha)
        spec = StepSizeSpec(C=C, alpha=alpha, tau_alpha=tau, mode=mode)
    return spec


def parse_experiment(cfg: dict, seed_override: int | None = None):
    """Turn a config document into an (ExperimentConfig, experiment kind) pair."""
    inst = cfg.get("instance")
    if not inst or "chain" not in inst:
        raise ConfigError("config needs an instance with a chain")
    mrp = mrp_from_dict(inst["chain"])
    features = features_from_dict(inst.get("features") or {"kind": "constant"},
                                  mrp.n)
    model = build_steady_state(mrp, features)
    provider = _build_provider(cfg.get("provider") or {"kind": "td0"}, model)
    mode = cfg.get("step_size", {}).get("mode", "td0")
    spec = _build_spec(cfg.get("step_size", {}), model, provider, mode)

    exp = cfg.get("experiment", {})
    kind = exp.get("kind", "boundedness")
    trials = int(exp.get("trials", 2000))
    if trials < 100:
        raise ConfigError(
            f"trials must be at least 100 for a ledger-producing run, got {trials}")
    T = exp.get("T", "auto")
    if T == "auto":
        rate = provider.beta if mode == "nonlinear" else model.contraction_rate
        T = int(math.ceil(10.0 / (spec.alpha * rate)))
    theta0 = inst.get("theta0")
    delays_cfg = exp.get("delays")
    delays = DelayProcess(**delays_cfg) if delays_cfg else None
    master_seed = int(exp.get("master_seed", 0))
    if seed_override is not None:
        master_seed = int(seed_override)
    config = ExperimentConfig(
        mrp=mrp, features=features, theta0=theta0, spec=spec, T=int(T),
        trials=trials, master_seed=master_seed, provider=provider,
        delays=delays, sampling=exp.get("sampling", "markov"),
        start_state=exp.get("start_state"),
        averaging_grid=exp.get("averaging_grid"),
        ceiling=float(exp.get("ceiling", 100.0)),
        label=cfg.get("label", ""), model=model,
    )
    return config, kind


def _execute(config: ExperimentConfig, kind: str):
    estimate, ledgers = None, {}
    if kind == "boundedness":
        estimate = estimate_dt_et(config)
        ledgers["boundedness"] = check_boundedness(estimate)
    elif kind == "recursion":
        estimate = estimate_dt_et(config)
        ledgers["boundedness"] = check_boundedness(estimate)
        ledgers["recursion"] = check_recursion(estimate, config.model, config.spec)
    elif kind == "iid_control":
        estimate = estimate_dt_et(config)
        ledgers["iid_control"] = check_iid_noise(estimate)
    elif kind == "weighted_average":
        ledgers["weighted_average"] = weighted_average_experiment(config)
    elif kind == "nonlinear":
        result = nonlinear_sa_experiment(config.provider, config)
        estimate = result["estimate"]
        ledgers["boundedness"] = result["boundedness"]
        ledgers["recursion"] = result["recursion"]
    else:
        raise ConfigError(f"unknown experiment kind {kind!r}")
    return estimate, ledgers


def _verdict_exit(ledgers: dict) -> int:
    verdicts = [led.verdict for led in ledgers.values()]
    if any(v == "out-of-contract" for v in verdicts):
        return EXIT_OUT_OF_CONTRACT
    if any(v != "pass" for v in verdicts):
        return EXIT_FAIL
    return EXIT_PASS


def _manifest(config: ExperimentConfig, cfg_doc: dict, out_dir: str,
              started: float, exit_code: int) -> dict:
    return {
        "config": cfg_doc,
        "resolved": {
            "omega": config.model.omega,
            "tau": config.spec.tau_alpha,
            "alpha": config.spec.alpha,
            "B": config.B,
            "theta_star": config.provider.theta_star.tolist(),
            "fingerprint": config.fingerprint(),
            "master_seed": config.master_seed,
            "T": config.T,
            "trials": config.trials,
        },
        "out_dir": os.path.abspath(out_dir),
        "version": __version__,
        "wall_clock": {
            "started": datetime.fromtimestamp(started, timezone.utc).isoformat(),
            "elapsed_s": time.time() - started,
        },
        "exit_code": exit_code,
    }


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_oracle(cfg: dict, out_dir: str, seed_override=None) -> int:
    inst = cfg.get("instance")
    if not inst or "chain" not in inst:
        raise ConfigError("config needs an instance with a chain")
    mrp = mrp_from_dict(inst["chain"])
    report = validate_chain(mrp)
    if not report.ok:
        print(f"Assumption 1 violated: {report.describe()}", file=sys.stderr)
        return EXIT_INVALID_INPUT
    features = features_from_dict(inst.get("features") or {"kind": "constant"},
                                  mrp.n)
    model = build_steady_state(mrp, features, inst.get("theta0"))
    doc = oracle_report(model)
    os.makedirs(out_dir, exist_ok=True)
    _write_json(os.path.join(out_dir, "oracle_report.json"), doc)
    print(f"oracle report written to {out_dir}/oracle_report.json "
          f"(omega={doc['omega']:.6g}, theta_star={doc['theta_star']})")
    return EXIT_PASS


def cmd_run(cfg: dict, out_dir: str, seed_override=None) -> int:
    started = time.time()
    config, kind = parse_experiment(cfg, seed_override)
    estimate, ledgers = _execute(config, kind)
    os.makedirs(out_dir, exist_ok=True)
    if estimate is not None:
        lead = ledgers.get("boundedness")
        write_columnar(os.path.join(out_dir, "estimate.csv"), estimate, lead)
    if "weighted_average" in ledgers:
        rows = ledgers["weighted_average"].fitted["table"]
        with open(os.path.join(out_dir, "averaging.csv"), "w") as fh:
            fh.write(f"# fingerprint={config.fingerprint()}\n")
            fh.write("T,alpha,tau,case,err,se\n")
            for r in rows:
                fh.write(f"{r['T']},{r['alpha']!r},{r['tau']},{r['case']},"
                         f"{r['err']!r},{r['se']!r}\n")
    _write_json(os.path.join(out_dir, "ledgers.json"),
                {"fingerprint": config.fingerprint(),
                 "ledgers": {name: led.to_dict() for name, led in ledgers.items()}})
    code = _verdict_exit(ledgers)
    _write_json(os.path.join(out_dir, "manifest.json"),
                _manifest(config, cfg, out_dir, started, code))
    for name, led in ledgers.items():
        print(f"[{name}] verdict={led.verdict} worst_margin={led.worst_margin:.6g}")
    return code


def _parse_axis(sweep_arg: str):
    if "=" not in sweep_arg:
        raise ConfigError("sweep axis must look like alpha=1,0.5,0.25")
    axis, _, raw = sweep_arg.partition("=")
    values = [v for v in raw.split(",") if v]
    if not values:
        raise ConfigError("sweep grid is empty")
    if axis == "alpha":
        return axis, [float(v) for v in values]
    if axis == "T":
        return axis, [int(v) for v in values]
    if axis == "tau_max":
        return axis, [int(v) for v in values]
    raise ConfigError(f"unknown sweep axis {axis!r} (alpha, T, tau_max)")


def cmd_sweep(cfg: dict, out_dir: str, sweep_arg: str, threads: int,
              seed_override=None) -> int:
    started = time.time()
    axis, values = _parse_axis(sweep_arg)
    config, kind = parse_experiment(cfg, seed_override)
    os.makedirs(out_dir, exist_ok=True)
    summary = {"axis": axis, "values": values, "points": []}
    ledgers_all = {}

    if axis == "alpha":
        result = alpha_sweep(config, multipliers=values, max_workers=threads)
        for i, point in enumerate(result["points"]):
            tag = f"alpha_{i}"
            write_columnar(os.path.join(out_dir, f"estimate_{tag}.csv"),
                           point["estimate"], point["boundedness"])
            ledgers_all[tag] = point["boundedness"]
            summary["points"].append({
                "alpha": point["alpha"], "tau": point["tau"], "T": point["T"],
                "in_contract": point["in_contract"], "floor": point["floor"],
                "verdict": point["boundedness"].verdict,
            })
        summary["floor_slope"] = result["floor_slope"]
    elif axis == "T":
        if not config.averaging_grid and kind != "weighted_average":
            raise ConfigError("a T sweep needs a weighted_average experiment")
        sub = config.copy_with(averaging_grid=values)
        led = weighted_average_experiment(sub)
        ledgers_all["weighted_average"] = led
        summary["points"] = led.fitted["table"]
        summary["tail_slope"] = led.fitted["tail_slope"]
    else:  # tau_max
        base_kind = (config.delays.kind if config.delays is not None
                     else "uniform")
        base_seed = config.delays.seed if config.delays is not None else 77
        base = resolve_step_size(config.model, C=config.spec.C, mode="td0")
        for i, tau_max in enumerate(values):
            alpha = base.alpha / (1 + tau_max)
            tau = mixing_time(config.mrp, config.features, alpha).tau
            spec = StepSizeSpec(C=base.C, alpha=alpha, tau_alpha=tau, mode="td0")
            T = int(math.ceil(10.0 / (alpha * config.model.contraction_rate)))
            delays = DelayProcess(kind=base_kind if tau_max > 0 else "none",
                                  tau_max=tau_max, seed=base_seed)
            sub = config.copy_with(spec=spec, T=T, delays=delays)
            est = estimate_dt_et(sub)
            led = check_boundedness(est)
            tag = f"tau_max_{tau_max}"
            write_columnar(os.path.join(out_dir, f"estimate_{tag}.csv"), est, led)
            ledgers_all[tag] = led
            summary["points"].append({
                "tau_max": tau_max, "alpha": alpha, "tau": tau, "T": T,
                "verdict": led.verdict,
            })

    code = _verdict_exit(ledgers_all) if ledgers_all else EXIT_INVALID_INPUT
    _write_json(os.path.join(out_dir, "ledgers.json"),
                {"fingerprint": config.fingerprint(),
                 "ledgers": {name: led.to_dict() for name, led in ledgers_all.items()}})
    summary["fingerprint"] = config.fingerprint()
    summary["exit_code"] = code
    _write_json(os.path.join(out_dir, "sweep_summary.json"), summary)
    _write_json(os.path.join(out_dir, "manifest.json"),
                _manifest(config, cfg, out_dir, started, code))
    for name, led in ledgers_all.items():
        print(f"[{name}] verdict={led.verdict}")
    return code


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="tdcert",
        description="Simulate TD(0)/contractive SA under Markovian sampling "
                    "and certify finite-time bounds at desk scale.")
    parser.add_argument("command", choices=["oracle", "run", "sweep"])
    parser.add_argument("--config", help="path to a JSON experiment config")
    parser.add_argument("--manifest", help="rerun the config embedded in a manifest")
    parser.add_argument("--bundled", help="name of a bundled config "
                        f"({', '.join(bundled_names())})")
    parser.add_argument("--out", default="tdcert_out", help="output directory")
    parser.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config master seed")
    parser.add_argument("--sweep", default=None,
                        help="axis grid, e.g. alpha=1,0.5,0.25")
    args = parser.parse_args(argv)

    try:
        if args.manifest:
            with open(args.manifest) as fh:
                cfg = json.load(fh)["config"]
        elif args.config:
            cfg = load_config(args.config)
        elif args.bundled:
            cfg = bundled_config(args.bundled)
        else:
            print("one of --config, --manifest, --bundled is required",
                  file=sys.stderr)
            return EXIT_INVALID_INPUT

        if args.command == "oracle":
            return cmd_oracle(cfg, args.out, args.seed)
        if args.command == "run":
            return cmd_run(cfg, args.out, args.seed)
        if args.sweep is None:
            print("sweep needs --sweep axis=v1,v2,...", file=sys.stderr)
            return EXIT_INVALID_INPUT
        return cmd_sweep(cfg, args.out, args.sweep, args.threads, args.seed)
    except (ConfigError, ChainError, FeatureError, OracleError,
            CertificationError, StepSizeError, AuditError, KeyError,
            FileNotFoundError, json.JSONDecodeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID_INPUT


if __name__ == "__main__":
    sys.exit(main())
