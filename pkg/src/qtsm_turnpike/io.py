"""Config files, CSV tables, run manifests and functional dumps."""

from __future__ import annotations

import hashlib
import json
import struct
import sys
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .model import QtsmModel
from .montecarlo import Functionals, PathEnsemble, SimGrid
from .utility import Utility, utility_from_mapping

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10 only
    import tomli as tomllib

from . import __version__ as ARTIFACT_VERSION
DUMP_MAGIC = b"QTSMFUN1"


class ConfigError(ValueError):
    """A config file is unreadable or malformed; the message names the location."""


# ----------------------------------------------------------------------
# Config
# ----------------------------------------------------------------------


def load_config(path: str | Path) -> dict:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read ({exc.strerror})") from exc
    try:
        return tomllib.loads(raw.decode("utf-8"))
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def config_hash(cfg: Mapping) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_jsonable)


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, Path):
        return str(v)
    raise TypeError(f"not serializable: {type(v).__name__}")


def _table(cfg: Mapping, key: str) -> Mapping:
    t = cfg.get(key)
    if not isinstance(t, Mapping):
        raise ConfigError(f"missing table [{key}]")
    return t


def model_from_config(cfg: Mapping) -> QtsmModel:
    try:
        return QtsmModel.from_mapping(_table(cfg, "model"))
    except KeyError as exc:
        raise ConfigError(f"[model]: missing key {exc.args[0]!r}") from exc


def utilities_from_config(cfg: Mapping) -> dict[str, Utility]:
    table = cfg.get("utilities", {})
    if not isinstance(table, Mapping):
        raise ConfigError("[utilities] must be a table of tables")
    out = {}
    for name, data in table.items():
        try:
            out[name] = utility_from_mapping(name, data)
        except KeyError as exc:
            raise ConfigError(f"[utilities.{name}]: missing key {exc.args[0]!r}") from exc
    return out


def get_utility(utils: Mapping[str, Utility], name: str) -> Utility:
    if name not in utils:
        raise ConfigError(f"unknown utility {name!r}; defined: {sorted(utils)}")
    return utils[name]


# ----------------------------------------------------------------------
# CSV
# ----------------------------------------------------------------------


def fmt(v) -> str:
    """Fixed 17-significant-digit text for numbers; other values unchanged."""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    """Write a comma-separated table with ``\\n`` line endings."""
    path = Path(path)
    lines = [",".join(header)]
    for r in rows:
        if len(r) != len(header):
            raise ValueError("row length does not match header")
        lines.append(",".join(fmt(v) for v in r))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_csv(path: str | Path) -> tuple[list[str], list[list[str]]]:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    return text[0].split(","), [line.split(",") for line in text[1:]]


# ----------------------------------------------------------------------
# Manifest
# ----------------------------------------------------------------------


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(
    out_dir: str | Path,
    effective_config: Mapping,
    seed: int,
    files: Sequence[str | Path],
    wall_clock: float,
    command: str,
) -> Path:
    """``manifest.json`` listing every output file with its content hash.

    Wall-clock time is the only field that changes between identical runs.
    """
    out_dir = Path(out_dir)
    entries = [{"path": Path(f).name, "sha256": file_sha256(f)} for f in files]
    data = {
        "artifact_version": ARTIFACT_VERSION,
        "command": command,
        "config_hash": config_hash(effective_config),
        "seed": int(seed),
        "wall_clock_seconds": round(float(wall_clock), 3),
        "effective_config": json.loads(canonical_json(effective_config)),
        "files": entries,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# ----------------------------------------------------------------------
# Binary functionals
# ----------------------------------------------------------------------

_FIELDS = ("int_r", "stoch_int_theta", "int_theta_sq", "Y_T", "L")


def dump_functionals(ensemble: PathEnsemble, path: str | Path) -> Path:
    """Write an ensemble's functionals as little-endian float64 arrays.

    Layout: 8 magic bytes, a little-endian ``uint32`` header length, a UTF-8
    JSON header (seed, grid, model hash, shapes), then each array in header
    order, C-contiguous.
    """
    f = ensemble.functionals
    if f is None:
        raise ValueError("ensemble has no functionals")
    arrays = {k: getattr(f, k) for k in _FIELDS if getattr(f, k) is not None}
    header = {
        "seed": int(ensemble.seed),
        "npaths": int(ensemble.npaths),
        "T": float(ensemble.grid.T),
        "nsteps": int(ensemble.grid.nsteps),
        "y0": np.asarray(ensemble.y0).tolist(),
        "measure": ensemble.measure,
        "model_hash": ensemble.model_hash,
        "arrays": [[k, list(v.shape)] for k, v in arrays.items()],
    }
    hb = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(DUMP_MAGIC)
        fh.write(struct.pack("<I", len(hb)))
        fh.write(hb)
        for v in arrays.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    return path


def load_functionals(path: str | Path) -> PathEnsemble:
    raw = Path(path).read_bytes()
    if raw[:8] != DUMP_MAGIC:
        raise ValueError("not a functionals dump")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12 : 12 + hlen].decode())
    pos = 12 + hlen
    arrays = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape))
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * count
    if pos != len(raw):
        raise ValueError("trailing bytes in functionals dump")
    grid = SimGrid(header["T"], header["nsteps"])
    return PathEnsemble(
        npaths=header["npaths"],
        seed=header["seed"],
        grid=grid,
        y0=np.asarray(header["y0"], dtype=np.float64),
        measure=header["measure"],
        model_hash=header["model_hash"],
        functionals=Functionals(**arrays),
    )
