"""Batch command line: trajectories, filter comparisons, and Monte Carlo scans.

Each subcommand resolves its parameters from built-in defaults, an optional
INI-style config file (one section per subcommand, unknown keys rejected),
and command-line flags, in that order of increasing precedence.  Results are
computed fully in memory and only then written, so a failed run leaves no
partial files.  Every output directory carries exactly one manifest.json
recording the resolved configuration, seed, package versions, and a SHA-256
per data artifact; `verify-manifest` recomputes the artifacts from that
manifest and checks them byte for byte.  Optional plots (--plot) are display
aids and deliberately outside the manifest contract.

Exit codes: 0 success, 2 configuration error, 3 numerical failure (scan
abort, divergence, or a failed convergence check).
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import math
import os
import sys
from pathlib import Path
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from . import __version__, ensemble
from . import estimation as est
from .filters import (
    CouplingParams,
    FilterDivergenceError,
    run_filter,
    run_sse_generative,
    simulate_truth_record,
)
from .sde import VALID_SCHEMES, NoiseStream

ENV_OUTPUT_ROOT = "DOUBLEPASS_OUTPUT_ROOT"
EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
# |pi| level (fraction of F) below which relative filter error is not scored
ERROR_MASK_LEVEL = 0.05


class ConfigError(ValueError):
    """Bad flag, file key, or physical parameter; maps to exit code 2."""


def _float_list(text: str) -> Tuple[float, ...]:
    items = tuple(float(x) for x in text.split(",") if x.strip())
    if not items:
        raise ValueError("empty list")
    return items


def _optional_float(text: str) -> Optional[float]:
    if text.strip().lower() in ("", "none", "auto"):
        return None
    return float(text)


# key -> (caster, default); None default means "must come from file or flag"
_COMMON = {
    "seed": (int, 0),
    "out": (str, None),
    "plot": (bool, False),
}
SCHEMAS: Dict[str, Dict[str, tuple]] = {
    "trajectory": {
        **_COMMON,
        "f": (float, 100.0),
        "m": (float, 0.017),
        "k": (float, 0.017),
        "omega": (float, 2.0),
        "gamma": (float, 1.0),
        "t-final": (float, 1.0),
        "dt": (float, 1e-4),
        "scheme": (str, "euler_ito"),
    },
    "compare-filters": {
        **_COMMON,
        "f": (float, 100.0),
        "m": (float, 0.017),
        "k": (float, 0.017),
        "omega": (float, 2.0),
        "gamma": (float, 1.0),
        "t-final": (float, 0.3),
        "dt": (float, 1e-4),
    },
    "crb-scan": {
        **_COMMON,
        "f-values": (_float_list, (25.0, 50.0, 100.0, 200.0, 400.0)),
        "realizations": (int, 100),
        "c": (float, est.SCHEDULE_C),
        "alpha": (float, est.SCHEDULE_ALPHA),
        "t-final": (float, 1.0),
        "dt": (float, 1e-4),
        "delta": (float, 1e-4),
        "gamma": (float, 1.0),
        "b-true": (float, 0.0),
        "workers": (int, 1),
    },
    "particle-scan": {
        **_COMMON,
        "f-values": (_float_list, (100.0, 200.0, 400.0, 1000.0)),
        "realizations": (int, 100),
        "c": (float, est.SCHEDULE_C),
        "alpha": (float, est.SCHEDULE_ALPHA),
        "t-final": (float, 1.0),
        "dt": (float, 5e-4),
        "gamma": (float, 1.0),
        "b-true": (float, 0.0),
        "np": (int, 10_000),
        "d": (_optional_float, None),
        "workers": (int, 1),
    },
    "bias-scan": {
        **_COMMON,
        "d-values": (_float_list, (1e3, 1e4, 1e5)),
        "f": (float, 100.0),
        "realizations": (int, 100),
        "np": (int, 10_000),
        "t-final": (float, 1.0),
        "dt": (float, 2e-4),
        "gamma": (float, 1.0),
        "c": (float, est.SCHEDULE_C),
        "alpha": (float, est.SCHEDULE_ALPHA),
    },
}
# keys that steer execution but not the numbers; left out of the manifest
_NON_PHYSICS = ("out", "plot", "workers")


def _load_config_file(path: str) -> Dict[str, Dict[str, str]]:
    parser = configparser.ConfigParser()
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}")
    except configparser.Error as exc:
        raise ConfigError(f"malformed config file: {exc}")
    if parser.defaults():
        raise ConfigError("config file must not use a [DEFAULT] section")
    sections: Dict[str, Dict[str, str]] = {}
    for section in parser.sections():
        if section not in SCHEMAS:
            raise ConfigError(f"unknown config section [{section}]")
        schema = SCHEMAS[section]
        for key, value in parser[section].items():
            if key not in schema:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            sections.setdefault(section, {})[key] = value
    return sections


def _resolve(command: str, args: argparse.Namespace) -> Dict[str, object]:
    """Merge defaults, config-file section, and flags for one subcommand."""
    schema = SCHEMAS[command]
    resolved = {key: default for key, (_, default) in schema.items()}
    if args.config is not None:
        section = _load_config_file(args.config).get(command, {})
        for key, raw in section.items():
            caster, _ = schema[key]
            try:
                if caster is bool:
                    resolved[key] = raw.strip().lower() in ("1", "true", "yes", "on")
                else:
                    resolved[key] = caster(raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key!r} in [{command}]: {exc}")
    for key in schema:
        flag_val = getattr(args, key.replace("-", "_"))
        if flag_val is not None and flag_val is not False:
            resolved[key] = flag_val
    return resolved


def _format_cell(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))  # shortest round-trip decimal


def _csv_bytes(header, columns) -> bytes:
    lines = [",".join(header)]
    for row in zip(*columns):
        lines.append(",".join(_format_cell(x) for x in row))
    return ("\n".join(lines) + "\n").encode()


def _json_bytes(payload) -> bytes:
    return (json.dumps(payload, indent=2, sort_keys=True) + "\n").encode()


def _jsonable(value):
    if isinstance(value, tuple):
        return list(value)
    return value


# ---------------------------------------------------------------------------
# builders: resolved config -> (artifacts, manifest extras, ok)


def _build_trajectory(cfg) -> Tuple[Dict[str, bytes], dict, bool]:
    F, dt, t_final = cfg["f"], cfg["dt"], cfg["t-final"]
    n_steps = int(round(t_final / dt))
    if n_steps < 1 or abs(n_steps * dt - t_final) > 1e-6 * t_final:
        raise ConfigError("t-final must be an integer multiple of dt")
    double = CouplingParams(cfg["m"], cfg["k"], cfg["gamma"], cfg["omega"])
    single = CouplingParams(cfg["m"], 0.0, cfg["gamma"], cfg["omega"])
    dW = NoiseStream(cfg["seed"], 0, dt).increments(n_steps)
    rec_d = run_sse_generative(F, double, dW, dt, scheme=cfg["scheme"])
    rec_s = run_sse_generative(F, single, dW, dt, scheme=cfg["scheme"])
    artifacts = {
        "trajectory.csv": _csv_bytes(
            ["time", "pi_fz_single_pass", "pi_fz_double_pass"],
            [rec_d.times, rec_s.pi_fz, rec_d.pi_fz],
        )
    }
    extras = {
        "max_abs_pi_single": float(np.max(np.abs(rec_s.pi_fz))),
        "max_abs_pi_double": float(np.max(np.abs(rec_d.pi_fz))),
    }
    return artifacts, extras, True


def _build_compare_filters(cfg) -> Tuple[Dict[str, bytes], dict, bool]:
    F, dt, t_final = cfg["f"], cfg["dt"], cfg["t-final"]
    n_steps = int(round(t_final / dt))
    if n_steps < 1 or abs(n_steps * dt - t_final) > 1e-6 * t_final:
        raise ConfigError("t-final must be an integer multiple of dt")
    gamma, omega = cfg["gamma"], cfg["omega"]
    if omega != 0.0 and gamma == 0.0:
        raise ConfigError("omega requires a nonzero gamma")
    b_true = omega / gamma if gamma > 0.0 else 0.0
    series = {}
    errors = {}
    for label, K in (("double", cfg["k"]), ("single", 0.0)):
        p = CouplingParams(cfg["m"], K, gamma, omega)
        ns = NoiseStream(cfg["seed"], 0, dt)
        exact = simulate_truth_record(p, b_true, F, ns, n_steps, model="full")
        proj = run_filter(exact, "projection", p, F)
        rel = np.full(n_steps, math.nan)
        mask = np.abs(exact.pi_fz) > ERROR_MASK_LEVEL * F
        rel[mask] = np.abs(proj.pi_fz[mask] - exact.pi_fz[mask]) / np.abs(
            exact.pi_fz[mask]
        )
        series[label] = (exact, proj)
        errors[label] = rel
    times = series["double"][0].times
    artifacts = {
        "overlay.csv": _csv_bytes(
            [
                "time",
                "pi_exact_double", "pi_projection_double",
                "pi_exact_single", "pi_projection_single",
            ],
            [
                times,
                series["double"][0].pi_fz, series["double"][1].pi_fz,
                series["single"][0].pi_fz, series["single"][1].pi_fz,
            ],
        ),
        "error.csv": _csv_bytes(
            ["time", "rel_error_double", "rel_error_single"],
            [times, errors["double"], errors["single"]],
        ),
    }
    finite_d = errors["double"][np.isfinite(errors["double"])]
    finite_s = errors["single"][np.isfinite(errors["single"])]
    extras = {
        "max_rel_error_double": float(finite_d.max()) if finite_d.size else None,
        "max_rel_error_single": float(finite_s.max()) if finite_s.size else None,
        "error_mask_level": ERROR_MASK_LEVEL,
    }
    return artifacts, extras, True


def _scan_artifacts(result: ensemble.ScanResult) -> Dict[str, bytes]:
    artifacts = {
        "points.csv": _csv_bytes(
            ["F", "mean", "std", "n_ok"],
            [result.F_values, result.means, result.stds, result.n_ok],
        ),
        "reference.csv": _csv_bytes(
            ["F", "shotnoise", "heisenberg"],
            [result.F_values, result.shotnoise, result.heisenberg],
        ),
        "fit.json": _json_bytes(result.manifest["fit"]),
    }
    if result.xi_means is not None:
        artifacts["xi.csv"] = _csv_bytes(
            ["F", "xi_mean", "xi_std", "b_mean"],
            [result.F_values, result.xi_means, result.xi_stds, result.b_means],
        )
    return artifacts


def _build_crb_scan(cfg) -> Tuple[Dict[str, bytes], dict, bool]:
    scan_cfg = ensemble.ScanConfig(
        F_values=tuple(cfg["f-values"]),
        realizations=cfg["realizations"],
        c=cfg["c"],
        alpha=cfg["alpha"],
        t_final=cfg["t-final"],
        dt=cfg["dt"],
        master_seed=cfg["seed"],
        task="crb",
        gamma=cfg["gamma"],
        B_true=cfg["b-true"],
        delta=cfg["delta"],
    )
    result = ensemble.run_scan(scan_cfg, workers=cfg["workers"])
    extras = {"scan": result.manifest}
    return _scan_artifacts(result), extras, True


def _build_particle_scan(cfg) -> Tuple[Dict[str, bytes], dict, bool]:
    scan_cfg = ensemble.ScanConfig(
        F_values=tuple(cfg["f-values"]),
        realizations=cfg["realizations"],
        c=cfg["c"],
        alpha=cfg["alpha"],
        t_final=cfg["t-final"],
        dt=cfg["dt"],
        master_seed=cfg["seed"],
        task="particle",
        gamma=cfg["gamma"],
        B_true=cfg["b-true"],
        Np=cfg["np"],
        D=cfg["d"],
    )
    result = ensemble.run_scan(scan_cfg, workers=cfg["workers"])
    extras = {"scan": result.manifest}
    return _scan_artifacts(result), extras, True


def _build_bias_scan(cfg) -> Tuple[Dict[str, bytes], dict, bool]:
    result = ensemble.bias_convergence_scan(
        list(cfg["d-values"]),
        F=cfg["f"],
        realizations=cfg["realizations"],
        Np=cfg["np"],
        t_final=cfg["t-final"],
        dt=cfg["dt"],
        master_seed=cfg["seed"],
        gamma=cfg["gamma"],
        c=cfg["c"],
        alpha=cfg["alpha"],
    )
    n_ok = [len(b) for b in result.b_tilde]
    artifacts = {
        "bias.csv": _csv_bytes(
            ["D", "mean_abs_b", "mean_delta_b", "n_ok"],
            [result.D_values, result.mean_abs_b, result.mean_delta_b, n_ok],
        )
    }
    fits = []
    for d, (b_grid, weights) in enumerate(result.posteriors):
        artifacts[f"posterior_{d}.csv"] = _csv_bytes(
            ["B", "weight"], [b_grid, weights]
        )
        mu, sigma, r2 = ensemble.gaussian_fit(b_grid, weights)
        fits.append(
            {"D": result.D_values[d], "mu": mu, "sigma": sigma, "r_squared": r2}
        )
    artifacts["gauss_fit.json"] = _json_bytes(fits)
    extras = {
        "bias_decreased": result.bias_decreased,
        "n_failed": result.n_failed,
        "mean_abs_b": [float(x) for x in result.mean_abs_b],
    }
    return artifacts, extras, result.bias_decreased


BUILDERS: Dict[str, Callable] = {
    "trajectory": _build_trajectory,
    "compare-filters": _build_compare_filters,
    "crb-scan": _build_crb_scan,
    "particle-scan": _build_particle_scan,
    "bias-scan": _build_bias_scan,
}


# ---------------------------------------------------------------------------
# plotting (display aid only; never part of the manifest)


def _emit_plot(command: str, out_dir: Path, artifacts: Dict[str, bytes]) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    def columns(name: str):
        lines = artifacts[name].decode().strip().split("\n")
        header = lines[0].split(",")
        data = np.array(
            [[float(x) for x in line.split(",")] for line in lines[1:]]
        )
        return header, data

    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    if command == "trajectory":
        header, data = columns("trajectory.csv")
        for j, label in enumerate(header[1:], start=1):
            ax.plot(data[:, 0], data[:, j], label=label)
        ax.set_xlabel("time")
        ax.set_ylabel("conditional <F_z>")
    elif command == "compare-filters":
        header, data = columns("overlay.csv")
        for j, label in enumerate(header[1:], start=1):
            ax.plot(data[:, 0], data[:, j], label=label)
        ax.set_xlabel("time")
        ax.set_ylabel("conditional <F_z>")
    elif command in ("crb-scan", "particle-scan"):
        _, pts = columns("points.csv")
        _, ref = columns("reference.csv")
        ax.errorbar(pts[:, 0], pts[:, 1], yerr=pts[:, 2], fmt="o", label="scan")
        ax.plot(ref[:, 0], ref[:, 1], "--", label="shotnoise")
        ax.plot(ref[:, 0], ref[:, 2], ":", label="heisenberg")
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel("F")
        ax.set_ylabel("field uncertainty")
    else:  # bias-scan
        for name in sorted(artifacts):
            if name.startswith("posterior_"):
                _, post = columns(name)
                ax.plot(post[:, 0], post[:, 1], label=name[:-4])
        ax.set_xlabel("B")
        ax.set_ylabel("posterior weight")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_dir / f"{command}.svg", metadata={"Date": None})
    plt.close(fig)


# ---------------------------------------------------------------------------
# orchestration


def _output_dir(command: str, cfg) -> Path:
    if cfg["out"] is not None:
        return Path(cfg["out"])
    root = os.environ.get(ENV_OUTPUT_ROOT, ".")
    return Path(root) / command


def _manifest_bytes(command: str, cfg, artifacts, extras) -> bytes:
    manifest = {
        "command": command,
        "config": {
            k: _jsonable(v) for k, v in sorted(cfg.items()) if k not in _NON_PHYSICS
        },
        "versions": {
            "doublepass": __version__,
            "numpy": np.__version__,
            "python": "%d.%d.%d" % sys.version_info[:3],
        },
        "artifacts": {
            name: hashlib.sha256(data).hexdigest()
            for name, data in sorted(artifacts.items())
        },
        "results": extras,
    }
    return _json_bytes(manifest)


def _run_command(command: str, args: argparse.Namespace) -> int:
    cfg = _resolve(command, args)
    artifacts, extras, ok = BUILDERS[command](cfg)
    out_dir = _output_dir(command, cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, data in artifacts.items():
        (out_dir / name).write_bytes(data)
    (out_dir / "manifest.json").write_bytes(
        _manifest_bytes(command, cfg, artifacts, extras)
    )
    if cfg["plot"]:
        _emit_plot(command, out_dir, artifacts)
    print(f"{command}: wrote {len(artifacts) + 1} files to {out_dir}")
    if not ok:
        print(f"{command}: convergence check failed", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def _verify_manifest(path: str) -> int:
    try:
        manifest = json.loads(Path(path).read_text())
        command = manifest["command"]
        stored_cfg = manifest["config"]
        stored_hashes = manifest["artifacts"]
    except (OSError, ValueError, KeyError) as exc:
        print(f"unreadable manifest: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if command not in BUILDERS:
        print(f"unknown command {command!r} in manifest", file=sys.stderr)
        return EXIT_CONFIG
    cfg = {key: default for key, (_, default) in SCHEMAS[command].items()}
    for key, value in stored_cfg.items():
        if key not in SCHEMAS[command]:
            print(f"unknown config key {key!r} in manifest", file=sys.stderr)
            return EXIT_CONFIG
        cfg[key] = tuple(value) if isinstance(value, list) else value
    artifacts, _, _ = BUILDERS[command](cfg)
    base = Path(path).parent
    failures = 0
    for name in sorted(stored_hashes):
        if name not in artifacts:
            print(f"{name}: not reproducible from this manifest")
            failures += 1
            continue
        recomputed = hashlib.sha256(artifacts[name]).hexdigest()
        ok_hash = recomputed == stored_hashes[name]
        on_disk = base / name
        ok_disk = on_disk.is_file() and on_disk.read_bytes() == artifacts[name]
        status = "ok" if (ok_hash and ok_disk) else "MISMATCH"
        print(f"{name}: {status}")
        if not (ok_hash and ok_disk):
            failures += 1
    extra = set(artifacts) - set(stored_hashes)
    if extra:
        print(f"manifest is missing artifacts: {sorted(extra)}")
        failures += 1
    return EXIT_OK if failures == 0 else EXIT_NUMERICAL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="doublepass",
        description=(
            "Simulate a continuously measured, coherently amplified collective "
            "spin and the field estimators built on it."
        ),
    )
    parser.add_argument(
        "--version", action="version", version=f"doublepass {__version__}"
    )
    sub = parser.add_subparsers(dest="command", required=True)
    help_text = {
        "trajectory": "matched-noise single-pass vs double-pass trajectory",
        "compare-filters": "exact filter vs Gaussian projection on one record",
        "crb-scan": "finite-difference information bound vs spin size",
        "particle-scan": "particle-filter uncertainty vs spin size",
        "bias-scan": "estimator bias vs prior width",
    }
    for command, schema in SCHEMAS.items():
        sp = sub.add_parser(command, help=help_text[command])
        sp.add_argument("--config", help="INI config file with per-subcommand sections")
        for key, (caster, default) in schema.items():
            flag = f"--{key}"
            if caster is bool:
                sp.add_argument(flag, action="store_true", default=None)
            elif caster is _float_list:
                sp.add_argument(
                    flag, type=caster, default=None, metavar="V1,V2,...",
                    help=f"default {','.join(str(v) for v in default)}",
                )
            else:
                sp.add_argument(
                    flag, type=caster, default=None,
                    help=f"default {default}" if default is not None else None,
                )
    vp = sub.add_parser("verify-manifest", help="recompute a manifest's artifacts and compare")
    vp.add_argument("manifest", help="path to a manifest.json")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "verify-manifest":
            return _verify_manifest(args.manifest)
        return _run_command(args.command, args)
    except (ConfigError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (
        ensemble.ScanAbortedError,
        FilterDivergenceError,
        est.BoundUnresolvedError,
    ) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
