"""Command-line front end.

Configuration is an INI file with sections [run], [design], [privacy],
[estimation], [inference], [bootstrap] and [experiment]; see README for the
key list.  Resolution order: built-in defaults, then the profile, then the
file, then command-line flags.  Every run writes manifest.json, which is
enough to re-execute it with ``dpqr rerun``.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import hashlib
import io as _io
import json
import os
import platform
import sys

import numpy as np
import scipy

from . import io
from .designs import SimDesign, generate, l2_error, replicate_stream
from .engine import Dataset, partition
from .privacy import RngStream
from .simlab import (PROFILES, Cell, PipelineSettings, aggregate, make_settings, run_experiment, run_pipeline)

__version__ = "0.1.0"

COMMANDS = ("generate", "estimate", "infer", "bootstrap", "experiment")


def _bool(v):
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _opt(kind):
    def conv(v):
        if v is None or (isinstance(v, str) and v.strip().lower() in ("", "none", "auto")):
            return None
        return kind(v)
    conv.__name__ = f"optional {kind.__name__}"
    return conv


def _tuple(kind):
    def conv(v):
        if isinstance(v, (list, tuple)):
            return tuple(kind(x) for x in v)
        return tuple(kind(x) for x in str(v).replace(" ", "").split(",") if x)
    conv.__name__ = f"list of {kind.__name__}"
    return conv


# section -> key -> converter.  Settings keys map onto PipelineSettings fields.
SCHEMA = {
    "run": {"seed": int, "out": _opt(str), "threads": int, "profile": str, "format": str, "data": _opt(str)},
    "design": {"model": str, "noise": str, "p": int, "N": int, "m": int, "rho": float, "noise_scale": float},
    "privacy": {"eps": float, "delta": _opt(float), "dp": _bool, "budget_mode": str},
    "estimation": {"tau": float, "sparsity": int, "outer_iters": int, "inner_iters": int, "eta": float,
                   "C1": float, "B0": float, "sensitivity": str, "free_intercept": _bool, "loss": str,
                   "init": str, "init_outer": int, "init_inner": int, "step_rule": str, "kernel": str,
                   "bandwidth": _opt(float)},
    "inference": {"local_bandwidth": _opt(float), "B1": float, "c_gamma": float, "gamma": _opt(float),
                  "objective": str, "B2": float, "alpha": float, "debias_sign": str, "coords": _tuple(int)},
    "bootstrap": {"n_boot": int, "m0": int, "B3": float, "boot_split": str, "boot_sensitivity": str,
                  "boot_variant": str, "boot_compare": _bool, "ci_form": str},
    "experiment": {"replicates": int, "workers": int, "stage": str, "eps_grid": _tuple(float),
                   "sparsity_grid": _tuple(int), "noises": _tuple(str)},
}
SETTINGS_SECTIONS = ("privacy", "estimation", "inference", "bootstrap")

DEFAULT_RUN = {"seed": 0, "out": None, "threads": 1, "profile": "default", "format": "csv", "data": None}
DEFAULT_EXPERIMENT = {"replicates": 1, "workers": 1, "stage": "estimate", "eps_grid": (), "sparsity_grid": (),
                      "noises": ()}


class ConfigError(ValueError):
    pass


def _design_defaults():
    d = SimDesign()
    return {k: getattr(d, k) for k in SCHEMA["design"]}


def _settings_defaults(profile: str):
    s = make_settings(profile)
    return {sec: {k: getattr(s, k) for k in SCHEMA[sec]} for sec in SETTINGS_SECTIONS}


def read_ini(path: str) -> dict:
    """Parse an INI file into {section: {key: raw string}}, rejecting unknown names."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str  # keys are case sensitive (B0, C1, N)
    with open(path) as fh:
        cp.read_file(fh)
    out = {}
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}]")
        for key, val in cp.items(sec):
            if key not in SCHEMA[sec]:
                raise ConfigError(f"unknown key '{key}' in [{sec}]")
            out.setdefault(sec, {})[key] = val
    return out


def resolve(layers: list[dict]) -> dict:
    """Merge override layers over defaults and convert every value to its type."""
    profile = DEFAULT_RUN["profile"]
    for layer in layers:
        profile = layer.get("run", {}).get("profile", profile)
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    cfg = {"run": dict(DEFAULT_RUN), "design": _design_defaults(), "experiment": dict(DEFAULT_EXPERIMENT)}
    cfg.update(_settings_defaults(profile))
    for layer in layers:
        for sec, kv in layer.items():
            if sec not in SCHEMA:
                raise ConfigError(f"unknown section [{sec}]")
            for key, val in kv.items():
                if key not in SCHEMA[sec]:
                    raise ConfigError(f"unknown key '{key}' in [{sec}]")
                try:
                    cfg[sec][key] = SCHEMA[sec][key](val)
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"[{sec}] {key}: {exc}") from None
    cfg["run"]["profile"] = profile
    return cfg


def build_design(cfg: dict) -> SimDesign:
    try:
        return SimDesign(tau=cfg["estimation"]["tau"], **cfg["design"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def build_settings(cfg: dict, stage: str) -> PipelineSettings:
    kw = {}
    for sec in SETTINGS_SECTIONS:
        kw.update(cfg[sec])
    kw["threads"] = cfg["run"]["threads"]
    kw["stage"] = stage
    try:
        return PipelineSettings(**kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _jsonable(cfg):
    return json.loads(json.dumps(cfg, default=list))


def _flag_layer(args) -> dict:
    layer: dict = {}

    def put(sec, key, val):
        if val is not None:
            layer.setdefault(sec, {})[key] = val

    put("run", "seed", args.seed)
    put("run", "out", args.out)
    put("run", "threads", args.threads)
    put("run", "profile", args.profile)
    put("run", "data", getattr(args, "data", None))
    put("run", "format", getattr(args, "format", None))
    put("privacy", "dp", args.dp)
    put("privacy", "eps", args.eps)
    put("privacy", "delta", args.delta)
    put("estimation", "tau", args.tau)
    put("estimation", "sparsity", args.sparsity)
    put("design", "m", args.m)
    return layer


def _out_dir(cfg: dict) -> str:
    out = cfg["run"]["out"] or os.environ.get("DPQR_OUT") or "dpqr_out"
    os.makedirs(out, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise OSError(f"output directory {out} is not writable")
    return out


def _hash_raw_without_secs(path: str) -> str:
    """raw.csv minus its wall-clock column, which is the one non-reproducible field."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for r in rows:
        w.writerow(r[:-1])
    return hashlib.sha256(buf.getvalue().encode()).hexdigest()


def _versions():
    return {"dpqr": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__}


def _ledger_json(ledger):
    return None if ledger is None else ledger.summary()


def _write_manifest(out: str, command: str, cfg: dict, outputs: dict, ledger=None, metrics=None):
    hashes = {}
    for name, path in outputs.items():
        if name == "raw.csv":
            hashes[name] = {"sha256_without_secs": _hash_raw_without_secs(path)}
        else:
            hashes[name] = {"sha256": io.sha256_file(path)}
    man = {"command": command, "config": _jsonable(cfg), "seed": cfg["run"]["seed"], "versions": _versions(),
           "ledger": _ledger_json(ledger), "outputs": hashes, "metrics": metrics or {}}
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump(man, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return man


def _load_data(cfg: dict, design: SimDesign):
    """(dataset, beta_true or None, stream key)."""
    path = cfg["run"]["data"]
    if path:
        data = io.read_dataset(path)
        if data.N % design.m:
            raise ConfigError(f"N={data.N} is not divisible by m={design.m}")
        return data, None, 0
    return generate(design, replicate_stream(cfg["run"]["seed"], design, 0)), design.beta, design.stream_key()


def cmd_generate(cfg: dict) -> dict:
    design = build_design(cfg)
    out = _out_dir(cfg)
    ext = {"csv": "csv", "bin": "bin"}.get(cfg["run"]["format"])
    if ext is None:
        raise ConfigError("format must be 'csv' or 'bin'")
    data = generate(design, replicate_stream(cfg["run"]["seed"], design, 0))
    path = os.path.join(out, f"data.{ext}")
    io.write_dataset(data, path)
    _write_manifest(out, "generate", cfg, {os.path.basename(path): path})
    return {"data": path, "rows": data.N, "cols": data.X.shape[1] + 1}


def _run_stage(cfg: dict, stage: str) -> dict:
    design = build_design(cfg)
    settings = build_settings(cfg, stage)
    out = _out_dir(cfg)
    data, beta, key = _load_data(cfg, design)
    seed = cfg["run"]["seed"]
    plan = partition(data, design.m, RngStream(seed, (key, 0, 1)))
    res = run_pipeline(data, plan, settings, RngStream(seed, (key, 0, 2)), beta_true=beta)
    outputs = {}

    def emit(name, writer, *a):
        path = os.path.join(out, name)
        writer(*a, path)
        outputs[name] = path

    emit("estimate.csv", io.write_vector, res.estimate.values)
    metrics = {"support": list(res.estimate.support)}
    if beta is not None:
        metrics["l2"] = l2_error(res.estimate, beta)
    if stage in ("infer", "bootstrap"):
        emit("debiased.csv", io.write_vector, res.debiased.values)
        emit("precision.csv", io.write_matrix, res.precision.W)
        emit("intervals.csv", io.write_intervals, res.intervals)
        metrics["gamma"] = res.precision.gamma
        metrics["clime_violation"] = res.precision.violation
    if stage == "bootstrap":
        for name, q in res.bootstrap.items():
            emit(f"bootstrap_{name}.csv", io.write_bootstrap_stats, q)
        emit("simultaneous.csv", io.write_intervals, res.simultaneous)
        metrics["q_sup"] = {k: q.q_sup for k, q in res.bootstrap.items()}
    _write_manifest(out, stage, cfg, outputs, res.ledger, metrics)
    return {"out": out, **metrics}


def cmd_estimate(cfg):
    return _run_stage(cfg, "estimate")


def cmd_infer(cfg):
    return _run_stage(cfg, "infer")


def cmd_bootstrap(cfg):
    return _run_stage(cfg, "bootstrap")


def cmd_experiment(cfg: dict) -> dict:
    ex = cfg["experiment"]
    if cfg["run"]["data"]:
        raise ConfigError("experiment generates its own data; drop run.data")
    base = build_design(cfg)
    settings = build_settings(cfg, ex["stage"])
    out = _out_dir(cfg)
    eps_grid = ex["eps_grid"] or (settings.eps,)
    s_grid = ex["sparsity_grid"] or (settings.sparsity,)
    noises = ex["noises"] or (base.noise,)
    cells = []
    for noise in noises:
        design = dataclasses.replace(base, noise=noise)
        for s in s_grid:
            for e in eps_grid:
                label = design.design_id + (f"|s={s}" if len(s_grid) > 1 else "")
                cells.append(Cell(design, settings.replace(eps=e, sparsity=s), label))
    rows = run_experiment(cells, ex["replicates"], cfg["run"]["seed"], ex["workers"], out)
    outputs = {"raw.csv": os.path.join(out, "raw.csv"), "aggregate.csv": os.path.join(out, "aggregate.csv")}
    errors = sum(1 for r in rows if r.error)
    _write_manifest(out, "experiment", cfg, outputs, metrics={"rows": len(rows), "errors": errors})
    return {"out": out, "rows": len(rows), "errors": errors,
            "aggregate": [list(a) for a in aggregate(rows)]}


HANDLERS = {"generate": cmd_generate, "estimate": cmd_estimate, "infer": cmd_infer, "bootstrap": cmd_bootstrap,
            "experiment": cmd_experiment}


def cmd_rerun(manifest_path: str, out: str | None) -> dict:
    with open(manifest_path) as fh:
        man = json.load(fh)
    cfg = resolve([man["config"]] + ([{"run": {"out": out}}] if out else []))
    if cfg["run"]["out"] == man["config"]["run"]["out"] and out is None:
        raise ConfigError("pass --out so the rerun does not overwrite the original outputs")
    result = HANDLERS[man["command"]](cfg)
    with open(os.path.join(cfg["run"]["out"], "manifest.json")) as fh:
        new = json.load(fh)
    same = new["outputs"] == man["outputs"]
    return {"out": cfg["run"]["out"], "identical": same, "result": result}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory (default $DPQR_OUT or ./dpqr_out)")
    common.add_argument("--threads", type=int)
    common.add_argument("--profile", choices=sorted(PROFILES))
    common.add_argument("--dp", action=argparse.BooleanOptionalAction, default=None)
    common.add_argument("--eps", type=float)
    common.add_argument("--delta", type=float)
    common.add_argument("--tau", type=float)
    common.add_argument("--m", type=int)
    common.add_argument("--sparsity", type=int)

    ap = argparse.ArgumentParser(prog="dpqr", description="Private distributed sparse quantile regression")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "generate":
            p.add_argument("--format", choices=("csv", "bin"))
        elif name != "experiment":
            p.add_argument("--data", help="dataset file (CSV or binary); generated from [design] if omitted")
    r = sub.add_parser("rerun", help="re-execute a run from its manifest")
    r.add_argument("manifest")
    r.add_argument("--out")
    return ap


def _fail(exc: BaseException, code: int) -> int:
    json.dump({"error": type(exc).__name__, "message": str(exc)}, sys.stderr)
    sys.stderr.write("\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "rerun":
            result = cmd_rerun(args.manifest, args.out)
            print(json.dumps(result, default=str))
            return 0 if result["identical"] else 3
        layers = [read_ini(args.config)] if args.config else []
        layers.append(_flag_layer(args))
        cfg = resolve(layers)
        if args.command != "generate":
            build_settings(cfg, cfg["experiment"]["stage"] if args.command == "experiment" else args.command)
        build_design(cfg)
        result = HANDLERS[args.command](cfg)
    except (ConfigError, configparser.Error) as exc:
        return _fail(exc, 2)
    except Exception as exc:  # noqa: BLE001 - surfaced as JSON
        return _fail(exc, 1)
    print(json.dumps(result, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
