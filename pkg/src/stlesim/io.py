"""Configuration parsing, result files and run manifests."""

from __future__ import annotations

import csv
import hashlib
import json
import os
import platform
import sys
from pathlib import Path
from typing import Mapping

import numpy as np
import scipy
import yaml

from . import __version__
from .errors import ConfigError
from .noise import NoiseSpectrum, build_spectrum
from .spectral import SpectralField

__all__ = [
    "load_config",
    "require",
    "parse_spectrum",
    "parse_field",
    "config_hash",
    "write_manifest",
    "write_csv",
    "write_json",
]


def load_config(path) -> dict:
    """Read a YAML or JSON document (JSON is valid YAML)."""
    try:
        with open(path) as fh:
            doc = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping at top level")
    return doc


def require(cfg: Mapping, key: str, kind=None, prefix: str = ""):
    """Mandatory field ``key``, optionally coerced with ``kind``."""
    path = f"{prefix}{key}"
    if key not in cfg or cfg[key] is None:
        raise ConfigError("missing required field", path)
    value = cfg[key]
    if kind is None:
        return value
    try:
        return kind(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"expected {kind.__name__}, got {value!r}", path) from exc


def _complex(v, path: str) -> complex:
    if isinstance(v, (list, tuple)):
        if len(v) != 2:
            raise ConfigError("complex values are written [re, im]", path)
        return complex(float(v[0]), float(v[1]))
    try:
        return complex(v)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"not a number: {v!r}", path) from exc


def parse_spectrum(cfg: Mapping, prefix: str = "spectrum.") -> NoiseSpectrum:
    """Either ``{dim, family, params, support_cutoff}`` or ``{dim, theta: [{k, theta}]}``."""
    if not isinstance(cfg, Mapping):
        raise ConfigError("must be a mapping", prefix.rstrip("."))
    dim = require(cfg, "dim", int, prefix)
    if "theta" in cfg:
        entries = cfg["theta"]
        if not isinstance(entries, list):
            raise ConfigError("must be a list of {k, theta}", f"{prefix}theta")
        theta = {}
        for i, e in enumerate(entries):
            p = f"{prefix}theta[{i}]."
            k = tuple(int(c) for c in require(e, "k", list, p))
            if len(k) != dim:
                raise ConfigError(f"mode must have {dim} components", f"{p}k")
            theta[k] = require(e, "theta", float, p)
        return NoiseSpectrum.from_dict(dim, theta)
    family = require(cfg, "family", str, prefix)
    params = cfg.get("params") or {}
    cutoff = require(cfg, "support_cutoff", float, prefix)
    return build_spectrum(family, params, dim, cutoff)


def parse_field(entries, dim: int, path: str, vector: bool = False,
                complete: bool = True) -> SpectralField:
    """``[{k: [..], value: v}]`` with ``v`` a number, ``[re, im]`` or (for
    vector fields) a list of those; missing ``-k`` partners are conjugated in."""
    if not isinstance(entries, list):
        raise ConfigError("must be a list of {k, value}", path)
    coeffs = {}
    for i, e in enumerate(entries):
        p = f"{path}[{i}]."
        k = tuple(int(c) for c in require(e, "k", list, p))
        if len(k) != dim:
            raise ConfigError(f"mode must have {dim} components", f"{p}k")
        raw = require(e, "value", None, p)
        if vector:
            if not isinstance(raw, list) or len(raw) != dim:
                raise ConfigError(f"vector value needs {dim} components", f"{p}value")
            coeffs[k] = np.array([_complex(v, f"{p}value") for v in raw])
        else:
            coeffs[k] = _complex(raw, f"{p}value")
    if not coeffs:
        return SpectralField.zero(dim, dim if vector else 1)
    return SpectralField.from_dict(dim, coeffs, complete=complete)


def config_hash(cfg: Mapping) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canon.encode()).hexdigest()


def write_manifest(out: Path, command: str, cfg: Mapping, seed: int | None,
                   path_ids=None, extra: Mapping | None = None) -> Path:
    """Record everything needed to rerun ``command`` bit for bit."""
    manifest = {
        "command": command,
        "config": cfg,
        "config_sha256": config_hash(cfg),
        "seed": seed,
        "rng": "Philox keyed by SeedSequence([seed, path_id]), one stream per path",
        "path_ids": None if path_ids is None else [int(path_ids[0]), int(path_ids[-1])],
        "versions": {"stlesim": __version__, "python": sys.version.split()[0],
                     "numpy": np.__version__, "scipy": scipy.__version__,
                     "platform": platform.platform()},
    }
    if extra:
        manifest.update(extra)
    return write_json(out / "manifest.json", manifest)


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17e}"
    return str(v)


def write_csv(path: Path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(v) for v in r])
    return path


def write_json(path: Path, obj) -> Path:
    def default(o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, (np.floating, np.integer, np.bool_)):
            return o.item()
        return str(o)

    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=default)
        fh.write("\n")
    return path


def env_threads(default: int = 1) -> int:
    value = os.environ.get("STLESIM_THREADS")
    if value is None:
        return default
    try:
        n = int(value)
    except ValueError as exc:
        raise ConfigError(f"STLESIM_THREADS must be an integer, got {value!r}") from exc
    return max(1, n)
