"""On-disk formats: field CSVs, dataset manifests, run configs and chain files.

Every writer is deterministic: floats are written with ``repr`` and JSON
with sorted keys, so identical inputs give byte-identical files.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import fields as dc_fields
from pathlib import Path

import numpy as np

from .covariance import Grid
from .model import EnsembleDataset, HyperParams, LatentState, ModelVariant, PriorConfig
from .sampler import ChainConfig, ChainOutput

__all__ = [
    "InputError",
    "ManifestError",
    "DimensionError",
    "ConfigError",
    "ChainFileError",
    "write_grid",
    "read_grid",
    "write_field",
    "read_field",
    "write_dataset",
    "read_manifest",
    "parse_config",
    "load_config",
    "write_chain",
    "read_chain",
    "CHAIN_MAGIC",
]

CHAIN_MAGIC = b"CLIMFUSE-CHAIN 1\n"


class InputError(ValueError):
    """Base class for user-input problems; ``prefix`` is shown before the message."""

    prefix = "input"

    def __str__(self) -> str:
        return f"{self.prefix}: {super().__str__()}"


class ManifestError(InputError):
    prefix = "manifest"


class DimensionError(InputError):
    prefix = "dimension"


class ConfigError(InputError):
    prefix = "config"


class ChainFileError(InputError):
    prefix = "chain"


def _fmt(x: float) -> str:
    return repr(float(x))


def write_grid(path, grid: Grid) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y"])
        for x, y in grid.sites:
            w.writerow([_fmt(x), _fmt(y)])


def read_grid(path, metric: str = "euclidean") -> Grid:
    rows = _read_csv(path, ["x", "y"], ManifestError)
    return Grid(np.array(rows, dtype=float).reshape(-1, 2), metric=metric)


def write_field(path, grid: Grid, values: np.ndarray, extra: dict | None = None) -> None:
    """Write ``x,y,value`` rows (plus optional extra columns) in grid order."""
    cols = {"value": np.asarray(values, dtype=float)} if extra is None else extra
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", *cols])
        arrays = list(cols.values())
        for i, (x, y) in enumerate(grid.sites):
            w.writerow([_fmt(x), _fmt(y), *(_fmt(a[i]) for a in arrays)])


def _read_csv(path, header: list[str], error) -> list[list[float]]:
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            got = next(reader, None)
            if got is None or [h.strip() for h in got] != header:
                raise error(f"{path}: expected header {','.join(header)}, got {got}")
            rows = []
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != len(header):
                    raise error(f"{path}:{lineno}: expected {len(header)} columns")
                rows.append([float(v) for v in row])
    except FileNotFoundError:
        raise error(f"missing file {path}") from None
    except ValueError as exc:
        if isinstance(exc, InputError):
            raise
        raise error(f"{path}: {exc}") from None
    return rows


def read_field(path, grid: Grid) -> np.ndarray:
    """Read a field file and check its sites match ``grid`` row by row."""
    rows = np.array(_read_csv(path, ["x", "y", "value"], ManifestError), dtype=float).reshape(-1, 3)
    if rows.shape[0] != grid.n:
        raise DimensionError(f"{path}: {rows.shape[0]} sites, grid has {grid.n}")
    if not np.allclose(rows[:, :2], grid.sites, rtol=0, atol=1e-9):
        raise DimensionError(f"{path}: site coordinates or order differ from the grid file")
    if not np.all(np.isfinite(rows[:, 2])):
        raise ManifestError(f"{path}: non-finite values")
    return rows[:, 2]


def write_dataset(out_dir, data: EnsembleDataset, truth: LatentState | None = None,
                  params: HyperParams | None = None, extra: dict | None = None) -> Path:
    """Write grid, runs, observations (and optional truth) plus ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for sub in ("runs", "obs"):
        (out / sub).mkdir(exist_ok=True)
    write_grid(out / "grid.csv", data.grid)
    models = []
    for m, name in enumerate(data.model_names):
        entry = {"name": name, "historical": [], "future": []}
        for period, runs in (("historical", data.runs_h[m]), ("future", data.runs_f[m])):
            for r, run in enumerate(runs, start=1):
                rel = f"runs/{m + 1:03d}_{period[0]}_{r:02d}.csv"
                write_field(out / rel, data.grid, run)
                entry[period].append(rel)
        models.append(entry)
    obs = []
    for i, w in enumerate(data.obs, start=1):
        rel = f"obs/obs_{i:02d}.csv"
        write_field(out / rel, data.grid, w)
        obs.append(rel)
    manifest = {"grid": "grid.csv", "metric": data.grid.metric, "models": models, "observations": obs}
    if truth is not None:
        (out / "truth").mkdir(exist_ok=True)
        manifest["truth"] = {}
        for name in ("mu_h", "mu_f", "y_h", "y_f", "y_ha", "y_fa"):
            rel = f"truth/{name}.csv"
            write_field(out / rel, data.grid, getattr(truth, name))
            manifest["truth"][name] = rel
    if params is not None:
        payload = {f.name: np.asarray(getattr(params, f.name)).tolist() for f in dc_fields(params)}
        (out / "truth_params.json").write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")
        manifest["truth_params"] = "truth_params.json"
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return out / "manifest.json"


def read_manifest(path) -> tuple[EnsembleDataset, dict | None]:
    """Load a dataset; returns ``(data, truth)`` where truth maps field names to arrays or is None."""
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError:
        raise ManifestError(f"missing manifest {path}") from None
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON ({exc})") from None
    root = path.parent
    for key in ("grid", "models", "observations"):
        if key not in manifest:
            raise ManifestError(f"{path}: missing key {key!r}")
    metric = manifest.get("metric", "euclidean")
    try:
        grid = read_grid(root / manifest["grid"], metric)
    except ValueError as exc:
        if isinstance(exc, InputError):
            raise
        raise ManifestError(str(exc)) from None
    models = manifest["models"]
    if not isinstance(models, list) or not models:
        raise ManifestError(f"{path}: 'models' must be a non-empty list")
    names, runs_h, runs_f = [], [], []
    for m, entry in enumerate(models, start=1):
        for key in ("historical", "future"):
            if not entry.get(key):
                raise ManifestError(f"model {m}: needs at least one {key} run")
        names.append(str(entry.get("name", f"model{m}")))
        runs_h.append(np.stack([read_field(root / f, grid) for f in entry["historical"]]))
        runs_f.append(np.stack([read_field(root / f, grid) for f in entry["future"]]))
    if not manifest["observations"]:
        raise ManifestError("at least one observation file is required")
    obs = np.stack([read_field(root / f, grid) for f in manifest["observations"]])
    truth = None
    if "truth" in manifest:
        truth = {k: read_field(root / f, grid) for k, f in manifest["truth"].items()}
    return EnsembleDataset(grid, runs_h, runs_f, obs, names), truth


# config: flat key = value

_CHAIN_KEYS = {
    "iterations": int, "burn_in": int, "thin": int, "seed": int, "mh_initial_step": float,
    "adapt_target": float, "adapt_window": int, "kappa": float, "chi_scheme": str, "v_update": str,
    "variant": str,
}
_PRIOR_KEYS = {
    "mu_variance": float, "beta_variance": float, "tau_shape": float, "tau_rate": float,
    "tau_w_shape": float, "tau_w_rate": float, "nu_shape": float, "nu_rate": float,
    "phi_shape": float, "phi_scale": float, "range_upper": float, "v_df_extra": int,
}
_PAIRS = {
    "tau_prior": ("tau_shape", "tau_rate"),
    "tau_w_prior": ("tau_w_shape", "tau_w_rate"),
    "nu_prior": ("nu_shape", "nu_rate"),
    "phi_prior": ("phi_shape", "phi_scale"),
}
CONFIG_KEYS = tuple(_CHAIN_KEYS) + tuple(_PRIOR_KEYS)


def parse_config(text: str) -> tuple[dict, PriorConfig]:
    """Parse ``key = value`` lines (``#`` comments allowed) into chain settings and priors.

    Unknown keys, duplicates and malformed values raise :class:`ConfigError`.
    """
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        kind = _CHAIN_KEYS.get(key) or _PRIOR_KEYS.get(key)
        if kind is None:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            if kind is int:
                as_float = float(value)
                if as_float != int(as_float):
                    raise ValueError
                values[key] = int(as_float)
            else:
                values[key] = kind(value)
        except ValueError:
            raise ConfigError(f"line {lineno}: bad {kind.__name__} value {value!r} for {key}") from None
    chain = {k: v for k, v in values.items() if k in _CHAIN_KEYS}
    prior_args = {k: v for k, v in values.items() if k in ("mu_variance", "beta_variance", "range_upper", "v_df_extra")}
    default = PriorConfig()
    for name, (a, b) in _PAIRS.items():
        pair = list(getattr(default, name))
        if a in values:
            pair[0] = values[a]
        if b in values:
            pair[1] = values[b]
        prior_args[name] = tuple(pair)
    try:
        priors = PriorConfig(**prior_args)
        if "variant" in chain:
            ModelVariant.parse(chain["variant"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return chain, priors


def load_config(path) -> tuple[dict, PriorConfig]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    return parse_config(text)


def build_chain_config(settings: dict, **overrides) -> ChainConfig:
    merged = {"iterations": 1000, "burn_in": 0}
    merged.update(settings)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ChainConfig(**merged)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


# chain container


def write_chain(path, chain: ChainOutput) -> None:
    """Magic line, uint64 LE header length, JSON header, then float64 LE blocks in header order."""
    names = sorted(chain.draws)
    header = {
        "format": 1,
        "fields": [{"name": k, "shape": list(chain.draws[k].shape)} for k in names],
        "seed": int(chain.seed),
        "config": chain.config,
        "acceptance": {k: (None if np.isnan(v) else float(v)) for k, v in chain.acceptance.items()},
        "model_names": list(chain.model_names),
        "sites": np.asarray(chain.sites, dtype=float).tolist(),
        "variant": chain.variant,
        "metric": chain.metric,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHAIN_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for k in names:
            fh.write(np.ascontiguousarray(chain.draws[k], dtype="<f8").tobytes())


def read_chain(path) -> ChainOutput:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise ChainFileError(f"cannot read {path}: {exc.strerror}") from None
    if not raw.startswith(CHAIN_MAGIC):
        raise ChainFileError(f"{path}: not a chain file")
    pos = len(CHAIN_MAGIC)
    try:
        (size,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        header = json.loads(raw[pos : pos + size])
    except (struct.error, json.JSONDecodeError) as exc:
        raise ChainFileError(f"{path}: corrupt header ({exc})") from None
    pos += size
    draws = {}
    for spec in header["fields"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape))
        end = pos + 8 * count
        if end > len(raw):
            raise ChainFileError(f"{path}: truncated at field {spec['name']}")
        draws[spec["name"]] = np.frombuffer(raw[pos:end], dtype="<f8").reshape(shape).astype(float)
        pos = end
    if pos != len(raw):
        raise ChainFileError(f"{path}: trailing bytes after the declared fields")
    acceptance = {k: (float("nan") if v is None else v) for k, v in header["acceptance"].items()}
    return ChainOutput(
        draws=draws,
        acceptance=acceptance,
        config=header["config"],
        seed=header["seed"],
        model_names=header["model_names"],
        sites=np.asarray(header["sites"], dtype=float),
        variant=header["variant"],
        metric=header.get("metric", "euclidean"),
    )
