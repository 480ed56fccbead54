"""Batch front end: config parsing, pipeline orchestration, artifact output.

Config files are TOML with sections [grid], [signal], [levy], [market],
[quadrature], [mc] and an optional [output]; unknown sections or keys are
rejected.  Step-function coefficients accept either a scalar (constant in
time) or a list with one value per grid cell.

    [grid]       t_end, n_steps
    [signal]     sigma_y, theta (one entry per mark)
    [levy]       marks = [[size, intensity], ...]
    [market]     b, sigma, gamma (one entry per mark), horizon
    [quadrature] abs_tol, max_nodes, envelope_floor, method
    [mc]         n_paths, seed
    [output]     dir

Subcommands: validate, simulate, drift, optimize, decompose, verify, report.
All artifacts are written atomically (temp file + rename), contain no
timestamps, and are byte-identical across reruns and worker counts for a
fixed config and seed.  ``--threads`` only chunks work across a thread pool;
chunk results are combined in index order so it never changes results.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .drift import DriftField, compute_drift_field
from .kernel import QuadratureSpec
from .model import (
    DiscreteLevyMeasure,
    MarketSpec,
    ModelValidationError,
    SignalSpec,
    StepFunction,
    TimeGrid,
    ValidatedModel,
    validate_model,
)
from .optimizer import (
    build_insider_policy,
    expected_log_wealth,
    honest_benchmark,
    residual_table,
)
from .paths import Ensemble, simulate
from .verify import decompose, suite_passed, tower_test, verify_suite

__all__ = ["RunConfig", "load_config", "apply_overrides", "model_from_config", "main"]

ENV_OUT_DIR = "INFODRIFT_OUT"
#: paths.csv is only dumped below this many rows; the summary is always written
MAX_PATH_DUMP_ROWS = 2_000_000

_SCHEMA = {
    "grid": {"t_end": float, "n_steps": int},
    "signal": {"sigma_y": "step", "theta": "steplist"},
    "levy": {"marks": "marks"},
    "market": {"b": "step", "sigma": "step", "gamma": "steplist", "horizon": float},
    "quadrature": {
        "abs_tol": float,
        "max_nodes": int,
        "envelope_floor": float,
        "method": str,
    },
    "mc": {"n_paths": int, "seed": int},
    "output": {"dir": str},
}

_DEFAULTS = {
    "quadrature": {"abs_tol": 1e-10, "max_nodes": 65536, "envelope_floor": 1e-16,
                   "method": "auto"},
    "output": {"dir": ""},
}

_REQUIRED_SECTIONS = ("grid", "signal", "levy", "market", "mc")


class ConfigError(ValueError):
    """Malformed run configuration (with key context)."""


@dataclass(frozen=True)
class RunConfig:
    """Validated run configuration: plain sections plus the output directory."""

    sections: dict
    source: str = "<dict>"

    def __getitem__(self, section: str) -> dict:
        return self.sections[section]

    def digest(self) -> str:
        blob = json.dumps(self.sections, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _check_scalar(section: str, key: str, value, kind):
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"[{section}] {key}: expected a number, got {value!r}")
        return float(value)
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"[{section}] {key}: expected an integer, got {value!r}")
        return int(value)
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(f"[{section}] {key}: expected a string, got {value!r}")
        return value
    raise AssertionError(kind)


def _check_step(section: str, key: str, value):
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if isinstance(value, list) and all(
        isinstance(v, (int, float)) and not isinstance(v, bool) for v in value
    ):
        return [float(v) for v in value]
    raise ConfigError(f"[{section}] {key}: expected a number or list of numbers")


def _validate_section(section: str, data) -> dict:
    if section not in _SCHEMA:
        raise ConfigError(f"unknown section [{section}]")
    if not isinstance(data, dict):
        raise ConfigError(f"section [{section}] must be a table")
    out = dict(_DEFAULTS.get(section, {}))
    for key, value in data.items():
        if key not in _SCHEMA[section]:
            raise ConfigError(f"unknown key {key!r} in section [{section}]")
        kind = _SCHEMA[section][key]
        if kind == "step":
            out[key] = _check_step(section, key, value)
        elif kind == "steplist":
            if not isinstance(value, list):
                raise ConfigError(f"[{section}] {key}: expected a list (one per mark)")
            out[key] = [_check_step(section, f"{key}[{i}]", v) for i, v in enumerate(value)]
        elif kind == "marks":
            if not isinstance(value, list):
                raise ConfigError(f"[{section}] {key}: expected a list of [size, intensity]")
            marks = []
            for i, mk in enumerate(value):
                if not (isinstance(mk, list) and len(mk) == 2):
                    raise ConfigError(f"[{section}] {key}[{i}]: expected [size, intensity]")
                marks.append([float(mk[0]), float(mk[1])])
            out[key] = marks
        else:
            out[key] = _check_scalar(section, key, value, kind)
    return out


def validate_config_dict(raw: dict, source: str = "<dict>") -> RunConfig:
    sections = {}
    for name, data in raw.items():
        sections[name] = _validate_section(name, data)
    for name in _REQUIRED_SECTIONS:
        if name not in sections:
            raise ConfigError(f"missing required section [{name}]")
    for name, defaults in _DEFAULTS.items():
        sections.setdefault(name, dict(defaults))
    return RunConfig(sections=sections, source=source)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return validate_config_dict(raw, source=str(path))


def apply_overrides(cfg: RunConfig, overrides) -> RunConfig:
    """Apply ``section.key=value`` pairs on top of a loaded config."""
    sections = {k: dict(v) for k, v in cfg.sections.items()}
    for item in overrides or ():
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        dotted, raw_val = item.split("=", 1)
        section, key = dotted.split(".", 1)
        try:
            value = tomllib.loads(f"v = {raw_val}")["v"]
        except tomllib.TOMLDecodeError:
            value = raw_val  # bare strings like method=auto
        sections.setdefault(section, {})
        sections[section][key] = value
        sections[section] = _validate_section(section, sections[section])
    for name, data in sections.items():
        sections[name] = _validate_section(name, data)
    return RunConfig(sections=sections, source=cfg.source)


def model_from_config(cfg: RunConfig) -> ValidatedModel:
    g = cfg["grid"]
    grid = TimeGrid(t_end=g["t_end"], n_steps=g["n_steps"])

    def step(v) -> StepFunction:
        if isinstance(v, list):
            return StepFunction(np.asarray(v, dtype=float), grid)
        return StepFunction.constant(grid, v)

    marks = cfg["levy"]["marks"]
    levy = DiscreteLevyMeasure.from_marks(marks) if marks else DiscreteLevyMeasure(
        np.zeros(0), np.zeros(0)
    )
    thetas = cfg["signal"].get("theta", [])
    if len(thetas) != levy.n_marks:
        raise ConfigError(
            f"[signal] theta has {len(thetas)} entries for {levy.n_marks} marks"
        )
    gammas = cfg["market"].get("gamma", [])
    if len(gammas) != levy.n_marks:
        raise ConfigError(
            f"[market] gamma has {len(gammas)} entries for {levy.n_marks} marks"
        )
    signal = SignalSpec(
        sigma_y=step(cfg["signal"]["sigma_y"]),
        thetas=tuple(step(v) for v in thetas),
        grid=grid,
    )
    market = MarketSpec(
        b=step(cfg["market"]["b"]),
        sigma=step(cfg["market"]["sigma"]),
        gammas=tuple(step(v) for v in gammas),
        horizon=cfg["market"]["horizon"],
    )
    return validate_model(signal, levy, market)


def quadrature_from_config(cfg: RunConfig, model: ValidatedModel) -> QuadratureSpec:
    qc = cfg["quadrature"]
    return QuadratureSpec.for_model(
        model,
        abs_tol=qc["abs_tol"],
        max_nodes=qc["max_nodes"],
        envelope_floor=qc["envelope_floor"],
    )


# ---------------------------------------------------------------------------
# deterministic artifact output
# ---------------------------------------------------------------------------


def _atomic_write_bytes(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path: Path, obj) -> None:
    _atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def _fmt(x) -> str:
    if isinstance(x, (np.floating, float)):
        return repr(float(x))
    return str(x)


def write_csv(path: Path, header, rows) -> None:
    lines = [",".join(header)]
    lines.extend(",".join(_fmt(v) for v in row) for row in rows)
    _atomic_write_bytes(path, ("\n".join(lines) + "\n").encode())


# ---------------------------------------------------------------------------
# chunked, thread-mapped pipeline stages (results independent of threading)
# ---------------------------------------------------------------------------

_CHUNK = 8192


def _map_chunks(fn, n_items: int, threads: int):
    """Apply fn(lo, hi) to consecutive chunks; return results in chunk order."""
    spans = [(lo, min(lo + _CHUNK, n_items)) for lo in range(0, n_items, _CHUNK)]
    if threads <= 1 or len(spans) <= 1:
        return [fn(lo, hi) for lo, hi in spans]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(fn, lo, hi) for lo, hi in spans]
        return [f.result() for f in futures]


def simulate_threaded(model: ValidatedModel, n_paths: int, seed: int,
                      threads: int = 1) -> Ensemble:
    chunks = _map_chunks(
        lambda lo, hi: simulate(model, hi - lo, seed, path_id_start=lo),
        n_paths,
        threads,
    )
    if len(chunks) == 1:
        return chunks[0]
    return Ensemble(
        model=model,
        seed=seed,
        path_ids=np.concatenate([c.path_ids for c in chunks]),
        d_brownian=np.vstack([c.d_brownian for c in chunks]),
        jump_counts=np.vstack([c.jump_counts for c in chunks]),
    )


def drift_field_threaded(model: ValidatedModel, ensemble: Ensemble,
                         q: QuadratureSpec, method: str, threads: int = 1) -> DriftField:
    chunks = _map_chunks(
        lambda lo, hi: compute_drift_field(model, ensemble.slice(lo, hi), q, method),
        ensemble.n_paths,
        threads,
    )
    if len(chunks) == 1:
        return chunks[0]
    return DriftField(
        model=model,
        t=chunks[0].t,
        phi=np.vstack([c.phi for c in chunks]),
        psi=np.vstack([c.psi for c in chunks]),
        denom=np.vstack([c.denom for c in chunks]),
        imag_residual=np.vstack([c.imag_residual for c in chunks]),
        method=chunks[0].method,
    )


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _prepare(cfg: RunConfig, threads: int):
    model = model_from_config(cfg)
    q = quadrature_from_config(cfg, model)
    ens = simulate_threaded(model, cfg["mc"]["n_paths"], cfg["mc"]["seed"], threads)
    return model, q, ens


def cmd_validate(cfg: RunConfig, out: Path, threads: int) -> int:
    model = model_from_config(cfg)
    payload = model.to_dict()
    payload["config_digest"] = cfg.digest()
    write_json(out / "model.json", payload)
    print(f"model valid: mode={model.mode}, marks={model.n_marks}, "
          f"n_steps={model.n_steps}, horizon={model.horizon}")
    return 0


def cmd_simulate(cfg: RunConfig, out: Path, threads: int) -> int:
    model, _, ens = _prepare(cfg, threads)
    y = ens.signal
    summary = {
        "config_digest": cfg.digest(),
        "n_paths": ens.n_paths,
        "seed": ens.seed,
        "signal_mean": float(np.mean(y)),
        "signal_var": float(np.var(y, ddof=1)),
        "mean_total_jumps": [
            float(np.mean(np.sum(ens.jump_counts[:, :, j], axis=1)))
            for j in range(model.n_marks)
        ],
        "paths_csv_written": ens.n_paths * (model.n_steps + 1) <= MAX_PATH_DUMP_ROWS,
    }
    write_json(out / "simulate.json", summary)
    if summary["paths_csv_written"]:
        header = ["path_id", "t", "B"] + [
            f"count_{j + 1}" for j in range(model.n_marks)
        ] + ["Y"]
        nodes = model.grid.nodes

        def rows():
            for i in range(ens.n_paths):
                counts = ens.jump_counts[i]
                for k in range(model.n_steps + 1):
                    cell_counts = (
                        counts[k - 1] if k > 0 else np.zeros(model.n_marks, dtype=int)
                    )
                    yield [
                        int(ens.path_ids[i]),
                        nodes[k],
                        ens.brownian[i, k],
                        *[int(c) for c in cell_counts],
                        ens.running_signal[i, k],
                    ]

        write_csv(out / "paths.csv", header, rows())
    print(f"simulated {ens.n_paths} paths; Y mean {summary['signal_mean']:.5f}, "
          f"var {summary['signal_var']:.5f}")
    return 0


def _drift_stage(cfg, threads):
    model, q, ens = _prepare(cfg, threads)
    method = cfg["quadrature"]["method"]
    field = drift_field_threaded(model, ens, q, method, threads)
    return model, q, ens, field


def cmd_drift(cfg: RunConfig, out: Path, threads: int) -> int:
    model, _, ens, field = _drift_stage(cfg, threads)
    m = model.n_marks
    header = (
        ["path_id", "t", "phi"]
        + [f"psi_{j + 1}" for j in range(m)]
        + [f"compensator_{j + 1}" for j in range(m)]
        + ["im_residual", "denom"]
    )
    comp = field.compensator

    def rows():
        for i in range(ens.n_paths):
            for c in range(len(field.t)):
                yield [
                    int(ens.path_ids[i]),
                    field.t[c],
                    field.phi[i, c],
                    *[field.psi[i, c, j] for j in range(m)],
                    *[comp[i, c, j] for j in range(m)],
                    field.imag_residual[i, c],
                    field.denom[i, c],
                ]

    write_csv(out / "drift.csv", header, rows())
    write_json(
        out / "drift.json",
        {
            "config_digest": cfg.digest(),
            "method": field.method,
            "n_paths": ens.n_paths,
            "phi_mean": float(np.mean(field.phi)),
            "phi_abs_max": float(np.max(np.abs(field.phi))),
            "psi_min": float(np.min(field.psi)) if m else None,
            "compensator_min": float(np.min(comp)) if m else None,
            "max_imag_residual": float(np.max(field.imag_residual)),
        },
    )
    print(f"drift field ({field.method}) over {ens.n_paths} paths x {len(field.t)} cells")
    return 0


def cmd_optimize(cfg: RunConfig, out: Path, threads: int) -> int:
    model, _, ens, field = _drift_stage(cfg, threads)
    insider = build_insider_policy(model, field)
    honest = honest_benchmark(model.market, model.levy)
    res = residual_table(model, field, insider)

    values = {}
    for name, pol in (("insider", insider), ("honest", honest)):
        values[name] = {}
        for est in ("pathwise", "drift-formula"):
            v = expected_log_wealth(pol, ens, model.market, drift_field=field, estimator=est)
            values[name][est] = {
                "mean": v.mean, "stderr": v.stderr,
                "n_paths": v.n_paths, "estimator": v.estimator,
            }
    payload = {
        "config_digest": cfg.digest(),
        "values": values,
        "max_abs_foc_residual": float(np.max(np.abs(res))),
    }
    write_json(out / "optimize.json", payload)

    header = ["path_id", "t", "u_star", "residual"]

    def rows():
        for i in range(ens.n_paths):
            for c in range(len(field.t)):
                yield [int(ens.path_ids[i]), field.t[c], insider.table[i, c], res[i, c]]

    write_csv(out / "controls.csv", header, rows())
    vi = values["insider"]["pathwise"]
    vh = values["honest"]["pathwise"]
    print(f"insider {vi['mean']:.5f} +- {vi['stderr']:.5f} | "
          f"honest {vh['mean']:.5f} +- {vh['stderr']:.5f} | "
          f"max |FOC residual| {payload['max_abs_foc_residual']:.2e}")
    return 0


def cmd_decompose(cfg: RunConfig, out: Path, threads: int) -> int:
    model, _, ens, field = _drift_stage(cfg, threads)
    dec = decompose(ens, field)
    recon = float(
        np.max(np.abs(dec.b_hat + dec.drift_integral_b - ens.brownian[:, : dec.k_T + 1]))
    )
    write_json(
        out / "decompose.json",
        {
            "config_digest": cfg.digest(),
            "n_paths": ens.n_paths,
            "k_T": dec.k_T,
            "reconstruction_max_abs_error": recon,
        },
    )
    m = model.n_marks
    header = ["path_id", "t"] + ["b_hat"] + [f"m_{j + 1}" for j in range(m)]
    nodes = model.grid.nodes

    def rows():
        for i in range(ens.n_paths):
            for k in range(dec.k_T + 1):
                yield [
                    int(ens.path_ids[i]),
                    nodes[k],
                    dec.b_hat[i, k],
                    *[dec.m_jump[i, k, j] for j in range(m)],
                ]

    if ens.n_paths * (dec.k_T + 1) <= MAX_PATH_DUMP_ROWS:
        write_csv(out / "decompose.csv", header, rows())
    print(f"decomposed {ens.n_paths} paths; reconstruction error {recon:.2e}")
    return 0


def cmd_verify(cfg: RunConfig, out: Path, threads: int) -> int:
    model, q, ens, field = _drift_stage(cfg, threads)
    reports = verify_suite(model, ens, field, q=q)
    T = model.horizon
    tower_ys = [0.0, 1.0]
    reports += tower_test(model, ens, T / 2.0, tower_ys, q=q)
    ok = suite_passed(reports)
    write_json(
        out / "verify.json",
        {
            "config_digest": cfg.digest(),
            "passed": ok,
            "reports": [r.to_dict() for r in reports],
        },
    )
    for r in reports:
        print(f"[{'PASS' if r.verdict else 'FAIL'}] {r.name}")
    print(f"verify: {'all checks passed' if ok else 'FAILURES PRESENT'}")
    return 0 if ok else 1


def cmd_report(cfg: RunConfig | None, out: Path, threads: int) -> int:
    summary = {}
    for name in ("model", "simulate", "drift", "optimize", "decompose", "verify"):
        p = out / f"{name}.json"
        if p.exists():
            with open(p, "r", encoding="utf-8") as fh:
                summary[name] = json.load(fh)
    if not summary:
        print(f"no artifacts found in {out}", file=sys.stderr)
        return 1
    write_json(out / "report.json", summary)
    print(f"aggregated {len(summary)} artifact(s) into report.json")
    return 0


_COMMANDS = {
    "validate": cmd_validate,
    "simulate": cmd_simulate,
    "drift": cmd_drift,
    "optimize": cmd_optimize,
    "decompose": cmd_decompose,
    "verify": cmd_verify,
    "report": cmd_report,
}


def bundled_config_path(name: str) -> Path:
    """Path of a reference config shipped with the package."""
    return Path(__file__).parent / "configs" / f"{name}.toml"


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="infodrift",
        description="information drift, insider control and decomposition checks",
    )
    parser.add_argument("subcommand", choices=sorted(_COMMANDS))
    parser.add_argument("--config", help="TOML config path (bundled names also work: "
                                         "brownian_bridge, pure_poisson, mixed_theta)")
    parser.add_argument("--seed", type=int, help="override mc.seed")
    parser.add_argument("--out", help=f"output directory (default ${ENV_OUT_DIR} or ./out)")
    parser.add_argument("--override", "--overrides", action="append", default=[],
                        metavar="SECTION.KEY=VALUE", help="config override (repeatable)")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker threads; affects speed only, never results")
    args = parser.parse_args(argv)

    try:
        if args.subcommand == "report":
            cfg = None
        else:
            if not args.config:
                parser.error(f"--config is required for {args.subcommand}")
            cfg_path = Path(args.config)
            if not cfg_path.exists() and bundled_config_path(args.config).exists():
                cfg_path = bundled_config_path(args.config)
            cfg = load_config(cfg_path)
            overrides = list(args.override)
            if args.seed is not None:
                overrides.append(f"mc.seed={args.seed}")
            cfg = apply_overrides(cfg, overrides)
        cfg_dir = cfg["output"]["dir"] if cfg is not None else ""
        out = Path(args.out or cfg_dir or os.environ.get(ENV_OUT_DIR) or "out")
        return _COMMANDS[args.subcommand](cfg, out, max(1, args.threads))
    except (ConfigError, ModelValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
