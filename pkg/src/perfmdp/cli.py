"""Experiment drivers: config files, orchestration, traces, manifests.

A run is described by a TOML config (or equivalent command-line flags),
executed into an isolated output directory. manifest.json is written before
any other artifact and lists every output by relative name, so a partially
written directory is always identifiable. Traces are JSON lines flushed per
round; identical (config, seed) reproduces every byte except wall-clock
fields.

Exit codes: 0 success, 1 config problem, 2 numerical or I/O failure.
"""

import argparse
import concurrent.futures
import copy
import hashlib
import json
import logging
import os
import platform
import sys
from dataclasses import dataclass, field
from types import SimpleNamespace
from typing import Optional

import numpy as np

from . import _kernels, formats, primal_dual, responses, retraining, rng, sampling, solver
from . import stackelberg as sg
from .errors import ConfigError, PerfmdpError
from .mdp import LinearMdpSpec, MdpParams, policy_from_occupancy, validate_params, validate_spec

log = logging.getLogger("perfmdp")

DRIVERS = (
    "certify",
    "solve",
    "retrain-exact",
    "retrain-finite",
    "primal-dual",
    "stackelberg",
    "diagnose",
)

_SEED_MAX = 2**64

# sections a driver cannot run without; everything else is optional
_REQUIRED_SECTIONS = {
    "certify": ("spec", "params", "certify"),
    "solve": ("spec", "params"),
    "retrain-exact": ("spec", "response"),
    "retrain-finite": ("spec", "response", "finite"),
    "primal-dual": ("spec", "pd"),
    "stackelberg": ("stackelberg",),
    "diagnose": (),
}


@dataclass
class ExperimentConfig:
    driver: str
    seed: int = 0
    out_dir: str = "out"
    lam: object = "auto"  # positive real or the string "auto"
    rounds: int = 40
    stop_delta: float = 0.0
    solver_tol: float = 1e-10
    compute_gap: bool = False
    trace_name: str = "trace.jsonl"
    summary_name: str = "summary.csv"
    spec_cfg: Optional[dict] = None
    params_cfg: Optional[dict] = None
    response_cfg: Optional[dict] = None
    certify_cfg: Optional[dict] = None
    finite_cfg: Optional[dict] = None
    pd_cfg: Optional[dict] = None
    solve_cfg: Optional[dict] = None
    stackelberg_cfg: Optional[dict] = None
    source: str = field(default="", compare=False)


# ---------------------------------------------------------------------------
# parsing and validation


def _is_int(v) -> bool:
    return isinstance(v, (int, np.integer)) and not isinstance(v, bool)


def _is_real(v) -> bool:
    return _is_int(v) or isinstance(v, (float, np.floating))


def _resolve(base_dir: str, p: str) -> str:
    if os.path.isabs(p):
        return os.path.normpath(p)
    return os.path.normpath(os.path.join(base_dir, p))


def _check_file(errors, base_dir, where, p):
    if not isinstance(p, str):
        errors.append(f"{where}: expected a file path string, got {p!r}")
        return None
    full = _resolve(base_dir, p)
    if not os.path.isfile(full):
        errors.append(f"{where}: no such file: {full}")
        return None
    return full


def _get_table(raw, name, errors):
    tbl = raw.get(name)
    if tbl is None:
        return None
    if not isinstance(tbl, dict):
        errors.append(f"{name}: expected a table")
        return None
    return dict(tbl)


def _load_spec_from_cfg(cfg: dict) -> LinearMdpSpec:
    S, A = int(cfg["num_states"]), int(cfg["num_actions"])
    if cfg.get("features_file"):
        features, _ = formats.load_matrix_csv(cfg["features_file"])
    else:
        features = np.eye(S * A)
    if cfg.get("start_dist_file"):
        start, _ = formats.load_vector_csv(cfg["start_dist_file"])
    else:
        start = np.full(S, 1.0 / S)
    return LinearMdpSpec(
        num_states=S,
        num_actions=A,
        discount=float(cfg["discount"]),
        start_dist=start,
        features=features,
    )


def _load_params_from_cfg(cfg: dict) -> MdpParams:
    theta, _ = formats.load_vector_csv(cfg["theta_file"])
    mu, _ = formats.load_matrix_csv(cfg["mu_file"])
    return MdpParams(theta=theta, mu=mu)


def _load_dataset_file(path: str) -> sampling.Dataset:
    s0, s, a, r, s_next = formats.load_dataset_csv(path)
    return sampling.Dataset(s0=s0, s=s, a=a, r=r, s_next=s_next)


def _validate_spec_table(tbl, base_dir, errors):
    ok = True
    for key in ("num_states", "num_actions"):
        v = tbl.get(key)
        if not _is_int(v) or v < 1:
            errors.append(f"spec.{key}: expected an integer >= 1, got {v!r}")
            ok = False
    gamma = tbl.get("discount")
    if not _is_real(gamma):
        errors.append(f"spec.discount: expected a real in [0, 1), got {gamma!r}")
        ok = False
    elif gamma < 0:
        errors.append("spec.discount: discount must be >= 0")
        ok = False
    elif gamma >= 1:
        errors.append("spec.discount: discount must be < 1")
        ok = False
    else:
        tbl["discount"] = float(gamma)
    for key in ("features_file", "start_dist_file"):
        if key in tbl:
            full = _check_file(errors, base_dir, f"spec.{key}", tbl[key])
            if full is None:
                ok = False
            else:
                tbl[key] = full
    extra = set(tbl) - {"num_states", "num_actions", "discount", "features_file", "start_dist_file"}
    for key in sorted(extra):
        errors.append(f"spec.{key}: unknown key")
    if not ok:
        return None
    try:
        spec = _load_spec_from_cfg(tbl)
    except (ValueError, OSError) as exc:
        errors.append(f"spec: {exc}")
        return None
    for msg in validate_spec(spec):
        errors.append(f"spec: {msg}")
    return spec


def _validate_schedule(value, errors):
    if isinstance(value, str):
        if value != "exact":
            errors.append(f"finite.m_schedule: expected an integer, a list, or \"exact\", got {value!r}")
        return
    if _is_int(value):
        if value < 1:
            errors.append("finite.m_schedule: sample sizes must be >= 1")
        return
    if isinstance(value, list) and value:
        for entry in value:
            if isinstance(entry, str) and entry == "exact":
                continue
            if _is_int(entry) and entry >= 1:
                continue
            errors.append(f"finite.m_schedule: bad entry {entry!r}")
        return
    errors.append(f"finite.m_schedule: expected an integer, a list, or \"exact\", got {value!r}")


def _require_real(tbl, table_name, key, errors, minimum=None, strict=False, default=None):
    if key not in tbl:
        if default is not None:
            tbl[key] = default
            return
        errors.append(f"{table_name}.{key}: missing")
        return
    v = tbl[key]
    if not _is_real(v):
        errors.append(f"{table_name}.{key}: expected a real, got {v!r}")
        return
    v = float(v)
    if minimum is not None and (v < minimum or (strict and v <= minimum)):
        rel = ">" if strict else ">="
        errors.append(f"{table_name}.{key}: must be {rel} {minimum:g}, got {v:g}")
        return
    tbl[key] = v


def _require_int(tbl, table_name, key, errors, minimum=1, default=None):
    if key not in tbl:
        if default is not None:
            tbl[key] = default
            return
        errors.append(f"{table_name}.{key}: missing")
        return
    v = tbl[key]
    if not _is_int(v) or v < minimum:
        errors.append(f"{table_name}.{key}: expected an integer >= {minimum}, got {v!r}")
        return
    tbl[key] = int(v)


def _require_choice(tbl, table_name, key, errors, choices, default):
    v = tbl.get(key, default)
    if v not in choices:
        errors.append(f"{table_name}.{key}: expected one of {choices}, got {v!r}")
        return
    tbl[key] = v


def _build_config(raw: dict, base_dir: str, source: str) -> ExperimentConfig:
    """Validate a raw config dict into an ExperimentConfig or raise ConfigError."""
    errors = []

    driver = raw.get("driver")
    if driver is None:
        errors.append(f"driver: missing (one of {', '.join(DRIVERS)})")
    elif driver not in DRIVERS:
        errors.append(f"driver: unknown driver {driver!r}")

    seed = raw.get("seed", 0)
    if not _is_int(seed) or not (0 <= seed < _SEED_MAX):
        errors.append(f"seed: expected an integer in [0, 2^64), got {seed!r}")
        seed = 0

    lam = raw.get("lambda", "auto")
    if lam != "auto":
        if not _is_real(lam) or lam <= 0:
            errors.append(f"lambda: expected a positive real or \"auto\", got {lam!r}")
        else:
            lam = float(lam)

    rounds = raw.get("rounds", 40)
    if not _is_int(rounds) or rounds < 1:
        errors.append(f"rounds: expected an integer >= 1, got {rounds!r}")
        rounds = 1

    stop_delta = raw.get("stop_delta", 0.0)
    if not _is_real(stop_delta) or stop_delta < 0:
        errors.append(f"stop_delta: expected a real >= 0, got {stop_delta!r}")
        stop_delta = 0.0

    solver_tol = raw.get("solver_tol", 1e-10)
    if not _is_real(solver_tol) or solver_tol <= 0:
        errors.append(f"solver_tol: expected a positive real, got {solver_tol!r}")
        solver_tol = 1e-10

    compute_gap = raw.get("compute_gap", False)
    if not isinstance(compute_gap, bool):
        errors.append(f"compute_gap: expected a boolean, got {compute_gap!r}")
        compute_gap = False

    out_dir = raw.get("out", "out")
    if not isinstance(out_dir, str) or not out_dir:
        errors.append(f"out: expected a directory path, got {out_dir!r}")
        out_dir = "out"
    else:
        out_dir = _resolve(base_dir, out_dir)

    trace_name = raw.get("trace", "trace.jsonl")
    summary_name = raw.get("summary", "summary.csv")
    for key, val in (("trace", trace_name), ("summary", summary_name)):
        if not isinstance(val, str) or not val:
            errors.append(f"{key}: expected a file name, got {val!r}")

    spec_tbl = _get_table(raw, "spec", errors)
    spec = _validate_spec_table(spec_tbl, base_dir, errors) if spec_tbl is not None else None

    params_tbl = _get_table(raw, "params", errors)
    params = None
    if params_tbl is not None:
        for key in ("theta_file", "mu_file"):
            if key not in params_tbl:
                errors.append(f"params.{key}: missing")
            else:
                full = _check_file(errors, base_dir, f"params.{key}", params_tbl[key])
                if full is not None:
                    params_tbl[key] = full
        if spec is not None and all(k in params_tbl for k in ("theta_file", "mu_file")):
            try:
                params = _load_params_from_cfg(params_tbl)
                for msg in validate_params(params, spec):
                    errors.append(f"params: {msg}")
            except (ValueError, OSError) as exc:
                errors.append(f"params: {exc}")

    response_tbl = _get_table(raw, "response", errors)
    if response_tbl is not None:
        if spec_tbl is None:
            errors.append("response: a [response] section needs a [spec] section")
        if "file" not in response_tbl:
            errors.append("response.file: missing")
        else:
            full = _check_file(errors, base_dir, "response.file", response_tbl["file"])
            if full is not None:
                response_tbl["file"] = full
                if spec is not None:
                    try:
                        responses.load_response_map(full, spec)
                    except (PerfmdpError, ValueError, KeyError, OSError) as exc:
                        errors.append(f"response: {exc}")

    certify_tbl = _get_table(raw, "certify", errors)
    if certify_tbl is not None:
        _require_real(certify_tbl, "certify", "eps_theta", errors, minimum=0.0)
        _require_real(certify_tbl, "certify", "eps_mu", errors, minimum=0.0)

    finite_tbl = _get_table(raw, "finite", errors)
    if finite_tbl is not None:
        if "m_schedule" not in finite_tbl:
            errors.append("finite.m_schedule: missing")
        else:
            _validate_schedule(finite_tbl["m_schedule"], errors)
        _require_choice(finite_tbl, "finite", "solver", errors, ("exact-saddle", "primal-dual"), "exact-saddle")
        _require_choice(finite_tbl, "finite", "sigma", errors, ("exact", "estimated"), "exact")
        _require_real(finite_tbl, "finite", "ridge", errors, minimum=0.0, default=sampling.RIDGE_DEFAULT)
        _require_real(finite_tbl, "finite", "noise_half_width", errors, minimum=0.0, default=0.0)

    pd_tbl = _get_table(raw, "pd", errors)
    if pd_tbl is not None:
        if "dataset_file" in pd_tbl:
            full = _check_file(errors, base_dir, "pd.dataset_file", pd_tbl["dataset_file"])
            if full is not None:
                pd_tbl["dataset_file"] = full
                try:
                    _load_dataset_file(full)
                except (ValueError, OSError) as exc:
                    errors.append(f"pd.dataset_file: {exc}")
        _require_int(pd_tbl, "pd", "t_inner", errors, default=0 if driver != "primal-dual" else None)
        _require_int(pd_tbl, "pd", "k_inner", errors, default=0 if driver != "primal-dual" else None)
        if pd_tbl.get("t_inner") == 0:
            del pd_tbl["t_inner"]
        if pd_tbl.get("k_inner") == 0:
            del pd_tbl["k_inner"]
        _require_real(pd_tbl, "pd", "b_cov", errors, minimum=0.0, strict=True, default=10.0)
        _require_real(pd_tbl, "pd", "ridge", errors, minimum=0.0, default=sampling.RIDGE_DEFAULT)
        for key in ("eta_omega", "eta_pi"):
            if key in pd_tbl:
                _require_real(pd_tbl, "pd", key, errors, minimum=0.0, strict=True)

    solve_tbl = _get_table(raw, "solve", errors)
    if solve_tbl is None and driver == "solve":
        solve_tbl = {}
    if solve_tbl is not None:
        _require_real(solve_tbl, "solve", "tol", errors, minimum=0.0, strict=True, default=solver.DEFAULT_TOL)

    stack_tbl = _get_table(raw, "stackelberg", errors)
    if stack_tbl is not None:
        if "game_file" not in stack_tbl:
            errors.append("stackelberg.game_file: missing")
        else:
            full = _check_file(errors, base_dir, "stackelberg.game_file", stack_tbl["game_file"])
            if full is not None:
                stack_tbl["game_file"] = full
                try:
                    sg.load_game(full)
                except (PerfmdpError, ValueError, KeyError, OSError) as exc:
                    errors.append(f"stackelberg.game_file: {exc}")
        _require_choice(stack_tbl, "stackelberg", "mode", errors, ("check", "retrain"), "check")
        _require_int(stack_tbl, "stackelberg", "num_policy_pairs", errors, default=200)
        _require_int(stack_tbl, "stackelberg", "num_kernel_pairs", errors, default=100)

    tables = {
        "spec": spec_tbl,
        "params": params_tbl,
        "response": response_tbl,
        "certify": certify_tbl,
        "finite": finite_tbl,
        "pd": pd_tbl,
        "solve": solve_tbl,
        "stackelberg": stack_tbl,
    }
    if driver in _REQUIRED_SECTIONS:
        for section in _REQUIRED_SECTIONS[driver]:
            if tables[section] is None:
                errors.append(f"{driver} driver requires a [{section}] section")
    if driver == "primal-dual":
        if pd_tbl is not None and "dataset_file" not in pd_tbl:
            errors.append("pd.dataset_file: missing (primal-dual driver needs a dataset)")
        if lam == "auto":
            errors.append("lambda: primal-dual driver requires a numeric lambda")
    if driver == "solve" and lam == "auto" and certify_tbl is None:
        errors.append("lambda: \"auto\" under the solve driver needs [certify] eps_theta/eps_mu")
    if driver == "retrain-finite" and finite_tbl is not None and finite_tbl.get("solver") == "primal-dual":
        if pd_tbl is None or "t_inner" not in pd_tbl or "k_inner" not in pd_tbl:
            errors.append("pd: finite.solver = \"primal-dual\" needs [pd] t_inner and k_inner")

    known_top = {
        "driver", "seed", "lambda", "rounds", "stop_delta", "solver_tol", "compute_gap",
        "out", "trace", "summary", "spec", "params", "response", "certify", "finite",
        "pd", "solve", "stackelberg",
    }
    for key in sorted(set(raw) - known_top):
        errors.append(f"{key}: unknown key")

    if errors:
        raise ConfigError(errors)

    return ExperimentConfig(
        driver=driver,
        seed=int(seed),
        out_dir=out_dir,
        lam=lam,
        rounds=int(rounds),
        stop_delta=float(stop_delta),
        solver_tol=float(solver_tol),
        compute_gap=bool(compute_gap),
        trace_name=trace_name,
        summary_name=summary_name,
        spec_cfg=spec_tbl,
        params_cfg=params_tbl,
        response_cfg=response_tbl,
        certify_cfg=certify_tbl,
        finite_cfg=finite_tbl,
        pd_cfg=pd_tbl,
        solve_cfg=solve_tbl,
        stackelberg_cfg=stack_tbl,
        source=source,
    )


def parse_config(path) -> ExperimentConfig:
    """Read, validate and resolve a TOML experiment config."""
    path = os.fspath(path)
    try:
        raw = formats.load_toml(path)
    except OSError as exc:
        raise ConfigError([f"{path}: {exc}"]) from exc
    except ValueError as exc:  # tomllib reports line/column in the message
        raise ConfigError([f"{path}: {exc}"]) from exc
    return _build_config(raw, os.path.dirname(os.path.abspath(path)), path)


def serialize_config(config: ExperimentConfig) -> str:
    """Canonical TOML text; parse(serialize(c)) == c."""
    data = {
        "driver": config.driver,
        "seed": config.seed,
        "lambda": config.lam,
        "rounds": config.rounds,
        "stop_delta": config.stop_delta,
        "solver_tol": config.solver_tol,
        "compute_gap": config.compute_gap,
        "out": config.out_dir,
        "trace": config.trace_name,
        "summary": config.summary_name,
    }
    for name, tbl in (
        ("spec", config.spec_cfg),
        ("params", config.params_cfg),
        ("response", config.response_cfg),
        ("certify", config.certify_cfg),
        ("finite", config.finite_cfg),
        ("pd", config.pd_cfg),
        ("solve", config.solve_cfg),
        ("stackelberg", config.stackelberg_cfg),
    ):
        if tbl is not None:
            data[name] = tbl
    return formats.toml_dumps(data)


# ---------------------------------------------------------------------------
# trace and summary sinks


def trace_record(tr: retraining.TraceRound) -> dict:
    """Stable JSONL schema for one retraining round."""
    return {
        "round": tr.round,
        "step_norm": tr.step_norm,
        "dist_to_ref": tr.dist_to_ref,
        "reg_objective": tr.reg_objective,
        "perf_value": tr.perf_value,
        "stability_gap": tr.stability_gap,
        "wall_clock_ms": tr.wall_clock_ms,
        "rng_digest": tr.rng_digest,
        "d": np.asarray(tr.d, dtype=float),
    }


def emit_trace(records, sink) -> None:
    """Write records as JSON lines, flushing after each one."""
    for rec in records:
        if isinstance(rec, retraining.TraceRound):
            rec = trace_record(rec)
        sink.write(formats.json_line(rec) + "\n")
        sink.flush()


def _csv_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    return formats.fmt_float(v)


def _write_csv(path, header, rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_csv_cell(v) for v in row))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


SUMMARY_COLUMNS = ("round", "step_norm", "dist_to_ref", "reg_objective", "perf_value", "stability_gap")


def _write_summary(path, rounds) -> None:
    rows = [
        (tr.round, tr.step_norm, tr.dist_to_ref, tr.reg_objective, tr.perf_value, tr.stability_gap)
        for tr in rounds
    ]
    _write_csv(path, SUMMARY_COLUMNS, rows)


# ---------------------------------------------------------------------------
# run_command


def _package_version() -> str:
    try:
        from importlib.metadata import version

        return version("perfmdp")
    except Exception:
        return "unknown"


def _versions() -> dict:
    import scipy

    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "perfmdp": _package_version(),
    }


def _planned_outputs(config: ExperimentConfig):
    driver = config.driver
    if driver == "certify":
        return ["summary.csv", "certificate.json"]
    if driver == "solve":
        return ["d.csv", "nu.csv", "h.csv", "g.csv", "kkt_report.csv"]
    if driver in ("retrain-exact", "retrain-finite"):
        return [config.trace_name, config.summary_name, "d_final.csv", "theta_final.csv", "mu_final.csv"]
    if driver == "primal-dual":
        return [
            "policies.csv", "selected_policy.csv", "nu_tilde.csv",
            "objective_history.csv", "omegas.csv", "nus.csv", "selection.json",
        ]
    if driver == "stackelberg":
        if config.stackelberg_cfg and config.stackelberg_cfg.get("mode") == "retrain":
            return [config.trace_name, config.summary_name, "d_final.csv", "leader_policy.csv"]
        return ["lemma1_report.csv", "appendix_f_report.csv", config.summary_name]
    return ["diagnose.json"]


def _write_manifest(config: ExperimentConfig, out_dir: str) -> None:
    payload = serialize_config(config).encode("utf-8")
    manifest = {
        "config_sha256": hashlib.sha256(payload).hexdigest(),
        "driver": config.driver,
        "seed": config.seed,
        "backend": _kernels.BACKEND,
        "versions": _versions(),
        "outputs": _planned_outputs(config),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        fh.write(json.dumps(manifest, indent=2) + "\n")


def _load_inputs(config: ExperimentConfig) -> SimpleNamespace:
    ns = SimpleNamespace(spec=None, params=None, response=None, game=None, dataset=None)
    if config.spec_cfg is not None:
        ns.spec = _load_spec_from_cfg(config.spec_cfg)
    if config.params_cfg is not None:
        ns.params = _load_params_from_cfg(config.params_cfg)
    if config.response_cfg is not None:
        ns.response = responses.load_response_map(config.response_cfg["file"], ns.spec)
    if config.stackelberg_cfg is not None:
        ns.game = sg.load_game(config.stackelberg_cfg["game_file"])
    if config.pd_cfg is not None and config.pd_cfg.get("dataset_file"):
        ns.dataset = _load_dataset_file(config.pd_cfg["dataset_file"])
    return ns


def _resolved_lambda(config, spec, params, eps_theta, eps_mu) -> float:
    if config.lam == "auto":
        return retraining.auto_lambda(spec, params, eps_theta, eps_mu)
    return float(config.lam)


def _out_path(out_dir: str, name: str) -> str:
    return name if os.path.isabs(name) else os.path.join(out_dir, name)


def _run_certify(config, inputs, out_dir) -> int:
    tbl = config.certify_cfg
    lam = _resolved_lambda(config, inputs.spec, inputs.params, tbl["eps_theta"], tbl["eps_mu"])
    cert = retraining.certify(inputs.spec, inputs.params, tbl["eps_theta"], tbl["eps_mu"], lam)
    cols = (
        "kappa", "big_m", "alpha", "eps_theta", "eps_mu", "lambda",
        "lambda_min", "eps_mu_max", "beta", "rate", "contraction",
    )
    row = (
        cert.kappa, cert.big_m, cert.alpha, cert.eps_theta, cert.eps_mu, cert.lam,
        cert.lambda_min, cert.eps_mu_max, cert.beta, cert.rate, cert.contraction,
    )
    _write_csv(_out_path(out_dir, config.summary_name), cols, [row])
    payload = {name: getattr(cert, attr) for name, attr in zip(cols, (
        "kappa", "big_m", "alpha", "eps_theta", "eps_mu", "lam",
        "lambda_min", "eps_mu_max", "beta", "rate", "contraction",
    ))}
    payload["one_minus_gamma"] = cert.one_minus_gamma
    with open(os.path.join(out_dir, "certificate.json"), "w", encoding="utf-8") as fh:
        fh.write(formats.json_line(payload) + "\n")
    log.info(
        "certificate: rate=%.6g lambda_min=%.6g contraction=%s",
        cert.rate, cert.lambda_min, cert.contraction,
    )
    return 0


def _run_solve(config, inputs, out_dir) -> int:
    if config.lam == "auto":
        tbl = config.certify_cfg
        lam = _resolved_lambda(config, inputs.spec, inputs.params, tbl["eps_theta"], tbl["eps_mu"])
    else:
        lam = float(config.lam)
    tol = config.solve_cfg["tol"]
    sol = solver.solve_regularized(
        inputs.params, inputs.spec, lam, tol=tol, gap_tol=max(tol, solver.DEFAULT_GAP_TOL)
    )
    formats.save_matrix_csv(os.path.join(out_dir, "d.csv"), sol.d, "d")
    formats.save_matrix_csv(os.path.join(out_dir, "nu.csv"), sol.nu, "nu")
    formats.save_matrix_csv(os.path.join(out_dir, "h.csv"), sol.h, "h")
    formats.save_matrix_csv(os.path.join(out_dir, "g.csv"), sol.g, "g")
    _write_csv(
        os.path.join(out_dir, "kkt_report.csv"),
        ("stationarity", "feasibility", "complementarity", "duality_gap",
         "primal_objective", "dual_objective", "iterations", "status", "sigma"),
        [(
            sol.kkt.stationarity, sol.kkt.feasibility, sol.kkt.complementarity,
            sol.kkt.duality_gap, sol.primal_objective, sol.dual_objective,
            sol.iterations, sol.status, sol.sigma,
        )],
    )
    if sol.status != "converged":
        log.error("solver stopped with status %r after %d iterations", sol.status, sol.iterations)
        return 2
    log.info("solved: %d iterations, gap=%.3g", sol.iterations, sol.kkt.duality_gap)
    return 0


def _finish_retrain(config, response, spec, trace, out_dir) -> int:
    _write_summary(_out_path(out_dir, config.summary_name), trace.rounds)
    d_fin = trace.final_d
    formats.save_matrix_csv(os.path.join(out_dir, "d_final.csv"), d_fin, "d_final")
    params_fin = response.apply(d_fin, spec)
    formats.save_matrix_csv(os.path.join(out_dir, "theta_final.csv"), params_fin.theta, "theta_final")
    formats.save_matrix_csv(os.path.join(out_dir, "mu_final.csv"), params_fin.mu, "mu_final")
    log.info(
        "retraining done: rounds=%d converged=%s last_step=%.3g",
        len(trace.rounds), trace.converged, trace.rounds[-1].step_norm,
    )
    return 0


def _run_retrain_exact(config, inputs, out_dir) -> int:
    spec, response = inputs.spec, inputs.response
    lam = _resolved_lambda(config, spec, response.base_params, response.eps_theta, response.eps_mu)
    with open(_out_path(out_dir, config.trace_name), "w", encoding="utf-8") as sink:
        trace = retraining.run_repeated_optimization(
            response, spec, lam, config.rounds,
            stop_delta=config.stop_delta,
            seed=config.seed,
            solver_tol=config.solver_tol,
            compute_gap=config.compute_gap,
            on_round=lambda tr: emit_trace([tr], sink),
        )
    return _finish_retrain(config, response, spec, trace, out_dir)


def _run_retrain_finite(config, inputs, out_dir) -> int:
    spec, response = inputs.spec, inputs.response
    fin = config.finite_cfg
    lam = _resolved_lambda(config, spec, response.base_params, response.eps_theta, response.eps_mu)
    schedule = fin["m_schedule"]
    if schedule == "exact":
        schedule = ["exact"]
    pd_config = None
    if fin["solver"] == "primal-dual":
        p = config.pd_cfg
        pd_config = primal_dual.PdConfig(
            t_inner=p["t_inner"], k_inner=p["k_inner"], lam=lam, b_cov=p["b_cov"],
            eta_omega=p.get("eta_omega"), eta_pi=p.get("eta_pi"),
        )
    with open(_out_path(out_dir, config.trace_name), "w", encoding="utf-8") as sink:
        trace = sampling.run_finite_sample_retraining(
            response, spec, lam, schedule, config.rounds, config.seed,
            solver=fin["solver"],
            sigma_mode=fin["sigma"],
            ridge=fin["ridge"],
            pd_config=pd_config,
            stop_delta=config.stop_delta,
            solver_tol=config.solver_tol,
            compute_gap=config.compute_gap,
            noise_half_width=fin["noise_half_width"],
            on_round=lambda tr: emit_trace([tr], sink),
        )
    return _finish_retrain(config, response, spec, trace, out_dir)


def _run_primal_dual(config, inputs, out_dir) -> int:
    spec, dataset = inputs.spec, inputs.dataset
    p = config.pd_cfg
    lam = float(config.lam)
    sigma = sampling.estimate_covariance(dataset, spec, p["ridge"])
    pdc = primal_dual.PdConfig(
        t_inner=p["t_inner"], k_inner=p["k_inner"], lam=lam, b_cov=p["b_cov"],
        eta_omega=p.get("eta_omega"), eta_pi=p.get("eta_pi"),
    )
    result = primal_dual.run_offline_primal_dual(dataset, sigma, spec, pdc, config.seed)
    # plug-in least-squares model of the dataset, used to evaluate the mixture
    mom = sampling.plugin_moments(dataset, spec, p["ridge"])
    theta_hat = np.linalg.solve(mom.c_mat, mom.a_vec)
    mu_hat = np.linalg.solve(mom.c_mat, mom.g_mat).T
    nu_tilde, mix_obj = primal_dual.mixture_average_feature(result, MdpParams(theta_hat, mu_hat), spec)
    T, S, A = result.policies.shape
    formats.save_matrix_csv(os.path.join(out_dir, "policies.csv"), result.policies.reshape(T * S, A), "policies")
    formats.save_matrix_csv(os.path.join(out_dir, "selected_policy.csv"), result.selected_policy, "selected_policy")
    formats.save_matrix_csv(os.path.join(out_dir, "nu_tilde.csv"), nu_tilde, "nu_tilde")
    formats.save_matrix_csv(os.path.join(out_dir, "objective_history.csv"), result.objective_history, "objective_history")
    formats.save_matrix_csv(os.path.join(out_dir, "omegas.csv"), result.omegas, "omegas")
    formats.save_matrix_csv(os.path.join(out_dir, "nus.csv"), result.nus, "nus")
    with open(os.path.join(out_dir, "selection.json"), "w", encoding="utf-8") as fh:
        fh.write(formats.json_line({"selected_index": result.selected_index, "mixture_objective": mix_obj}) + "\n")
    log.info("primal-dual done: T=%d selected=%d mixture_objective=%.6g", T, result.selected_index, mix_obj)
    return 0


def _run_stackelberg(config, inputs, out_dir) -> int:
    game = inputs.game
    tbl = config.stackelberg_cfg
    if tbl["mode"] == "retrain":
        spec = sg.tabular_leader_spec(game)
        rmap = sg.stackelberg_response_map(game, spec)
        lam = _resolved_lambda(config, spec, rmap.base_params, rmap.eps_theta, rmap.eps_mu)
        with open(_out_path(out_dir, config.trace_name), "w", encoding="utf-8") as sink:
            trace = retraining.run_repeated_optimization(
                rmap, spec, lam, config.rounds,
                stop_delta=config.stop_delta,
                seed=config.seed,
                solver_tol=config.solver_tol,
                compute_gap=config.compute_gap,
                on_round=lambda tr: emit_trace([tr], sink),
            )
        _write_summary(_out_path(out_dir, config.summary_name), trace.rounds)
        d_fin = trace.final_d
        formats.save_matrix_csv(os.path.join(out_dir, "d_final.csv"), d_fin, "d_final")
        pi_fin = policy_from_occupancy(d_fin, spec)
        formats.save_matrix_csv(os.path.join(out_dir, "leader_policy.csv"), pi_fin, "leader_policy")
        log.info(
            "stackelberg retraining done: rounds=%d last_step=%.3g",
            len(trace.rounds), trace.rounds[-1].step_norm,
        )
        return 0

    S, A1, A2 = game.num_states, game.num_leader_actions, game.num_follower_actions
    rows1 = []
    for j in range(tbl["num_policy_pairs"]):
        gen = rng.substream(config.seed, "stackelberg-check-pi", j)
        pi1 = gen.dirichlet(np.ones(A1), size=S)
        pi1_tilde = gen.dirichlet(np.ones(A1), size=S)
        rep = sg.lemma1_sensitivity_check(game, pi1, pi1_tilde)
        rows1.append((
            j, rep.delta, rep.max_reward_dev, rep.max_transition_dev,
            rep.reward_bound, rep.transition_bound, rep.reward_pass, rep.transition_pass,
        ))
    rows2 = []
    for j in range(tbl["num_kernel_pairs"]):
        gen = rng.substream(config.seed, "stackelberg-check-kernel", j)
        pi1_a = gen.dirichlet(np.ones(A1), size=S)
        pi1_b = gen.dirichlet(np.ones(A1), size=S)
        _, p_a = sg.build_follower_mdp(game, pi1_a)
        _, p_b = sg.build_follower_mdp(game, pi1_b)
        pol2 = gen.dirichlet(np.ones(A2), size=S)
        rep = sg.occupancy_l1_perturbation_check(p_a, p_b, pol2, game.start_dist, game.discount)
        rows2.append((j, rep.beta_dev, rep.l1_distance, rep.bound, rep.passed))
    _write_csv(
        os.path.join(out_dir, "lemma1_report.csv"),
        ("pair", "delta", "max_reward_dev", "max_transition_dev",
         "reward_bound", "transition_bound", "reward_pass", "transition_pass"),
        rows1,
    )
    _write_csv(
        os.path.join(out_dir, "appendix_f_report.csv"),
        ("pair", "beta_dev", "l1_distance", "bound", "passed"),
        rows2,
    )
    n1 = len(rows1)
    n2 = len(rows2)
    summary_rows = [
        ("reward_sensitivity", n1, sum(1 for r in rows1 if r[6])),
        ("transition_sensitivity", n1, sum(1 for r in rows1 if r[7])),
        ("occupancy_l1", n2, sum(1 for r in rows2 if r[4])),
    ]
    _write_csv(_out_path(out_dir, config.summary_name), ("check", "total", "passed"), summary_rows)
    log.info(
        "stackelberg checks: reward %d/%d, transition %d/%d, occupancy %d/%d",
        summary_rows[0][2], n1, summary_rows[1][2], n1, summary_rows[2][2], n2,
    )
    return 0


def _run_diagnose(config, inputs, out_dir) -> int:
    from ._kernels import pure as pure_kernels

    report = {"backend": _kernels.BACKEND, "versions": _versions()}

    gen = rng.substream(config.seed, "diagnose-kernel")
    n = 8
    W = 0.1 * gen.standard_normal((n, n))
    f0 = gen.standard_normal(n)
    z0 = np.abs(gen.standard_normal(n))
    u0 = 0.1 * gen.standard_normal(n)
    G = gen.standard_normal((16, 4))
    omega0 = 0.1 * gen.standard_normal(4)
    z_a, u_a = z0.copy(), u0.copy()
    d_a = pure_kernels.admm_chunk(W, f0, z_a, u_a, 25)[0]
    avg_a, last_a = pure_kernels.projected_scan(omega0.copy(), G, 0.05, 1.0)
    if _kernels.BACKEND == "fast":
        z_b, u_b = z0.copy(), u0.copy()
        d_b = _kernels.admm_chunk(W, f0, z_b, u_b, 25)[0]
        avg_b, last_b = _kernels.projected_scan(omega0.copy(), G, 0.05, 1.0)
        parity = max(
            float(np.max(np.abs(d_a - d_b))),
            float(np.max(np.abs(z_a - z_b))),
            float(np.max(np.abs(u_a - u_b))),
            float(np.max(np.abs(avg_a - avg_b))),
            float(np.max(np.abs(last_a - last_b))),
        )
        report["kernel_parity"] = parity
        report["kernel_parity_ok"] = parity <= 1e-12
    else:
        report["kernel_parity"] = None
        report["kernel_parity_ok"] = True

    # two-action closed form: mass 2 split as (1.5, 0.5) under theta=(1,0), lam=1
    spec1 = LinearMdpSpec(
        num_states=1, num_actions=2, discount=0.5,
        start_dist=np.array([1.0]), features=np.eye(2),
    )
    params1 = MdpParams(theta=np.array([1.0, 0.0]), mu=np.array([[1.0, 1.0]]))
    sol = solver.solve_regularized(params1, spec1, 1.0, tol=1e-10, gap_tol=1e-8)
    solver_err = float(np.max(np.abs(sol.d - np.array([1.5, 0.5]))))
    report["solver_error"] = solver_err
    report["solver_ok"] = solver_err <= 1e-6

    from .instances import reference_instance

    spec_ref, params_ref = reference_instance()
    cert = retraining.certify(spec_ref, params_ref, 0.01, 0.0, 0.1)
    rate_err = abs(cert.rate - 1.25 * np.sqrt(0.1))
    report["certificate_rate"] = cert.rate
    report["certificate_ok"] = rate_err <= 1e-12

    ok = report["kernel_parity_ok"] and report["solver_ok"] and report["certificate_ok"]
    report["passed"] = ok
    with open(os.path.join(out_dir, "diagnose.json"), "w", encoding="utf-8") as fh:
        fh.write(formats.json_line(report) + "\n")
    for line in (
        f"backend: {report['backend']}",
        f"kernel parity: {'ok' if report['kernel_parity_ok'] else 'FAIL'}",
        f"solver closed form: {'ok' if report['solver_ok'] else 'FAIL'} (err {solver_err:.3g})",
        f"certificate rate: {'ok' if report['certificate_ok'] else 'FAIL'} ({cert.rate:.6g})",
    ):
        print(line)
    return 0 if ok else 2


_DRIVER_FUNCS = {
    "certify": _run_certify,
    "solve": _run_solve,
    "retrain-exact": _run_retrain_exact,
    "retrain-finite": _run_retrain_finite,
    "primal-dual": _run_primal_dual,
    "stackelberg": _run_stackelberg,
    "diagnose": _run_diagnose,
}


def run_command(config: ExperimentConfig) -> int:
    """Execute one validated config; returns the process exit code."""
    try:
        inputs = _load_inputs(config)
    except (PerfmdpError, ValueError, KeyError, OSError) as exc:
        log.error("%s: input loading failed: %s", config.source or config.driver, exc)
        return 1
    os.makedirs(config.out_dir, exist_ok=True)
    _write_manifest(config, config.out_dir)
    try:
        return _DRIVER_FUNCS[config.driver](config, inputs, config.out_dir)
    except (PerfmdpError, np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
        log.error("%s: numerical failure: %s", config.source or config.driver, exc)
        return 2
    except OSError as exc:
        log.error("%s: I/O failure: %s", config.source or config.driver, exc)
        return 2


# ---------------------------------------------------------------------------
# argument parsing


def _parse_lambda_flag(text: str):
    if text == "auto":
        return "auto"
    try:
        value = float(text)
    except ValueError:
        raise ConfigError([f"lambda: expected a positive real or \"auto\", got {text!r}"])
    return value


def _parse_schedule_flag(text: str):
    try:
        return int(text)
    except ValueError:
        pass
    path = os.path.abspath(text)
    if not os.path.isfile(path):
        raise ConfigError([f"m-schedule: {text!r} is neither an integer nor a readable file"])
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            token = line.strip()
            if not token or token.startswith("#"):
                continue
            entries.append("exact" if token == "exact" else int(token))
    if not entries:
        raise ConfigError([f"m-schedule: {path} holds no entries"])
    return entries


def _params_dir_tables(dirpath: str):
    """Directory convention: spec.toml + theta.csv + mu.csv."""
    dirpath = os.path.abspath(dirpath)
    spec_path = os.path.join(dirpath, "spec.toml")
    if not os.path.isfile(spec_path):
        raise ConfigError([f"params dir {dirpath}: missing spec.toml"])
    try:
        data = formats.load_toml(spec_path)
    except ValueError as exc:
        raise ConfigError([f"{spec_path}: {exc}"])
    spec_tbl = {}
    for key in ("num_states", "num_actions", "discount"):
        if key in data:
            spec_tbl[key] = data[key]
    for key in ("features_file", "start_dist_file"):
        if key in data:
            spec_tbl[key] = os.path.join(dirpath, data[key])
    params_tbl = {
        "theta_file": os.path.join(dirpath, "theta.csv"),
        "mu_file": os.path.join(dirpath, "mu.csv"),
    }
    return spec_tbl, params_tbl


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="perfmdp",
        description="Retraining simulator for performative linear MDPs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", action="append", default=[], metavar="FILE",
                        help="TOML experiment config; repeatable for parallel runs")
        sp.add_argument("--seed", type=int, default=None, help="64-bit run seed")
        sp.add_argument("--out", default=None, metavar="DIR", help="output directory")
        sp.add_argument("--log-level", default="info",
                        choices=("debug", "info", "warning", "error"))

    sp = sub.add_parser("certify", help="evaluate the contraction certificate")
    common(sp)
    sp.add_argument("--params", metavar="DIR", help="directory with spec.toml, theta.csv, mu.csv")
    sp.add_argument("--lambda", dest="lam", help='regularization level or "auto"')
    sp.add_argument("--eps-theta", type=float, default=None)
    sp.add_argument("--eps-mu", type=float, default=None)

    sp = sub.add_parser("solve", help="solve one regularized occupancy problem")
    common(sp)
    sp.add_argument("--params", metavar="DIR")
    sp.add_argument("--lambda", dest="lam")
    sp.add_argument("--tol", type=float, default=None)

    sp = sub.add_parser("retrain-exact", help="repeated exact retraining")
    common(sp)
    sp.add_argument("--params", metavar="DIR", help="directory with spec.toml, theta.csv, mu.csv")
    sp.add_argument("--response", metavar="FILE", help="response.toml")
    sp.add_argument("--lambda", dest="lam")
    sp.add_argument("--rounds", type=int, default=None)
    sp.add_argument("--stop-delta", type=float, default=None)
    sp.add_argument("--trace", metavar="FILE", help="trace JSONL path")
    sp.add_argument("--summary", metavar="FILE", help="summary CSV path")

    sp = sub.add_parser("retrain-finite", help="retraining from sampled data")
    common(sp)
    sp.add_argument("--params", metavar="DIR")
    sp.add_argument("--response", metavar="FILE")
    sp.add_argument("--lambda", dest="lam")
    sp.add_argument("--rounds", type=int, default=None)
    sp.add_argument("--stop-delta", type=float, default=None)
    sp.add_argument("--trace", metavar="FILE")
    sp.add_argument("--summary", metavar="FILE")
    sp.add_argument("--m-schedule", metavar="INT|FILE", help="samples per round, or a file with one entry per line")
    sp.add_argument("--solver", choices=("exact-saddle", "primal-dual"), default=None)
    sp.add_argument("--sigma", choices=("exact", "estimated"), default=None)
    sp.add_argument("--ridge", type=float, default=None)

    sp = sub.add_parser("primal-dual", help="offline saddle-point run on a dataset")
    common(sp)
    sp.add_argument("--params", metavar="DIR")
    sp.add_argument("--dataset", metavar="FILE", help="dataset CSV (s0,s,a,r,s_next)")
    sp.add_argument("--lambda", dest="lam")
    sp.add_argument("--T", dest="t_inner", type=int, default=None, help="outer iterations")
    sp.add_argument("--K", dest="k_inner", type=int, default=None, help="inner gradient steps")
    sp.add_argument("--eta-omega", type=float, default=None)
    sp.add_argument("--eta-pi", type=float, default=None)
    sp.add_argument("--b-cov", type=float, default=None)

    sp = sub.add_parser("stackelberg", help="game sensitivity checks or game retraining")
    common(sp)
    sp.add_argument("--game", metavar="FILE", help="game.toml")
    sp.add_argument("--mode", choices=("check", "retrain"), default=None)
    sp.add_argument("--lambda", dest="lam")
    sp.add_argument("--rounds", type=int, default=None)

    sp = sub.add_parser("diagnose", help="backend, kernel parity and solver self-checks")
    common(sp)

    return parser


_TOP_FLAG_KEYS = (
    ("seed", "seed"),
    ("lam", "lambda"),
    ("rounds", "rounds"),
    ("stop_delta", "stop_delta"),
    ("trace", "trace"),
    ("summary", "summary"),
)

_TABLE_FLAG_KEYS = (
    ("eps_theta", "certify", "eps_theta"),
    ("eps_mu", "certify", "eps_mu"),
    ("tol", "solve", "tol"),
    ("m_schedule", "finite", "m_schedule"),
    ("solver", "finite", "solver"),
    ("sigma", "finite", "sigma"),
    ("ridge", "finite", "ridge"),
    ("dataset", "pd", "dataset_file"),
    ("t_inner", "pd", "t_inner"),
    ("k_inner", "pd", "k_inner"),
    ("eta_omega", "pd", "eta_omega"),
    ("eta_pi", "pd", "eta_pi"),
    ("b_cov", "pd", "b_cov"),
    ("game", "stackelberg", "game_file"),
    ("mode", "stackelberg", "mode"),
)


def _collect_overrides(args) -> dict:
    ov = {}
    for attr, key in _TOP_FLAG_KEYS:
        val = getattr(args, attr, None)
        if val is None:
            continue
        if key == "lambda" and isinstance(val, str):
            val = _parse_lambda_flag(val)
        ov[key] = val
    if getattr(args, "out", None) is not None:
        ov["out"] = os.path.abspath(args.out)
    tables = {}
    for attr, table, key in _TABLE_FLAG_KEYS:
        val = getattr(args, attr, None)
        if val is None:
            continue
        if attr == "m_schedule":
            val = _parse_schedule_flag(val)
        if attr in ("dataset", "game"):
            val = os.path.abspath(val)
        tables.setdefault(table, {})[key] = val
    if getattr(args, "response", None) is not None:
        tables["response"] = {"file": os.path.abspath(args.response)}
    if getattr(args, "params", None) is not None:
        spec_tbl, params_tbl = _params_dir_tables(args.params)
        tables["spec"] = spec_tbl
        tables["params"] = params_tbl
    ov["_tables"] = tables
    return ov


def _apply_overrides(raw: dict, overrides: dict, command: str) -> dict:
    merged = copy.deepcopy(raw)
    merged["driver"] = command
    for key, val in overrides.items():
        if key == "_tables":
            continue
        merged[key] = val
    for table, entries in overrides["_tables"].items():
        if table in ("spec", "params"):
            # --params replaces any configured spec/params sections wholesale
            merged[table] = dict(entries)
            continue
        base = dict(merged.get(table) or {})
        base.update(entries)
        merged[table] = base
    return merged


def _configs_from_args(args):
    command = args.command
    overrides = _collect_overrides(args)
    has_overrides = bool(overrides["_tables"]) or any(k != "_tables" for k in overrides)
    paths = list(args.config)
    if not paths:
        merged = _apply_overrides({}, overrides, command)
        return [_build_config(merged, os.getcwd(), "<flags>")]
    if len(paths) > 1 and has_overrides:
        raise ConfigError(["flag overrides cannot be combined with multiple --config files"])
    configs = []
    for path in paths:
        path = os.fspath(path)
        try:
            raw = formats.load_toml(path)
        except OSError as exc:
            raise ConfigError([f"{path}: {exc}"])
        except ValueError as exc:
            raise ConfigError([f"{path}: {exc}"])
        if "driver" in raw and raw["driver"] != command:
            raise ConfigError(
                [f"{path}: config driver {raw['driver']!r} does not match subcommand {command!r}"]
            )
        merged = _apply_overrides(raw, overrides, command) if len(paths) == 1 else {**raw, "driver": command}
        configs.append(_build_config(merged, os.path.dirname(os.path.abspath(path)), path))
    return configs


def _thread_cap(num_configs: int) -> int:
    raw = os.environ.get("PERF_LMDP_THREADS", "")
    try:
        cap = int(raw)
    except ValueError:
        cap = 0
    if cap <= 0:
        cap = os.cpu_count() or 1
    return max(1, min(cap, num_configs))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level.upper()),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )
    try:
        configs = _configs_from_args(args)
    except ConfigError as exc:
        for msg in exc.messages:
            print(f"config error: {msg}", file=sys.stderr)
        return 1
    if len(configs) == 1:
        return run_command(configs[0])
    seen = set()
    for cfg in configs:
        if cfg.out_dir in seen:
            print(f"config error: output directory {cfg.out_dir} used twice", file=sys.stderr)
            return 1
        seen.add(cfg.out_dir)
    with concurrent.futures.ThreadPoolExecutor(max_workers=_thread_cap(len(configs))) as pool:
        codes = list(pool.map(run_command, configs))
    return max(codes)


if __name__ == "__main__":
    sys.exit(main())
