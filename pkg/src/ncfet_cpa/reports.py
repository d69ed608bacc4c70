"""Result files, config files and the run manifest.

Every writer has a reader, and printing what a reader returns reproduces the
file byte for byte.  Floats are written with ``repr`` so nothing is lost.
"""

from __future__ import annotations

import csv
import io
import json
import platform
from pathlib import Path

import numpy as np

from . import __version__
from .harness import (
    PRESETS,
    ConfigError,
    ExperimentConfig,
    ExperimentResult,
    SuccessCurve,
    ThresholdRow,
    file_digest,
    preset,
)
from .power import ProfileError, TechnologyProfile, load_profile

CURVE_HEADER = ("step", "set_size", "success_rate")
TABLE_HEADER = ("profile", "threshold", "trial", "avg_traces", "std_traces", "keys_reached", "not_reached")
MANIFEST_NAME = "manifest.json"
CONFIG_EXTRA_FIELDS = {"preset", "profile_overrides", "profile_files"}


class ManifestError(RuntimeError):
    pass


def _fmt(value) -> str:
    return "NA" if value is None else repr(float(value))


def _parse(cell: str) -> float | None:
    return None if cell == "NA" else float(cell)


def _write_rows(path: Path, header, rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    path.write_text(buf.getvalue())


def _read_rows(path: Path, header) -> list[list[str]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != tuple(header):
        raise ValueError(f"{path}: expected header {','.join(header)}")
    return rows[1:]


def write_curve_csv(curve: SuccessCurve, path: str | Path) -> None:
    rows = [(s + 1, int(size), _fmt(rate)) for s, (size, rate) in enumerate(zip(curve.set_sizes, curve.rates))]
    _write_rows(Path(path), CURVE_HEADER, rows)


def read_curve_csv(path: str | Path, profile_name: str | None = None, runs_per_point: int = 0) -> SuccessCurve:
    path = Path(path)
    rows = _read_rows(path, CURVE_HEADER)
    sizes = np.array([int(r[1]) for r in rows])
    rates = np.array([float(r[2]) for r in rows])
    return SuccessCurve(profile_name or path.stem, sizes, rates, runs_per_point)


def write_table_csv(rows: list[ThresholdRow], path: str | Path) -> None:
    out = [
        (r.profile, _fmt(r.threshold), r.trial, _fmt(r.avg_traces), _fmt(r.std_traces), r.keys_reached, r.not_reached)
        for r in rows
    ]
    _write_rows(Path(path), TABLE_HEADER, out)


def read_table_csv(path: str | Path) -> list[ThresholdRow]:
    return [
        ThresholdRow(r[0], float(r[1]), r[2], _parse(r[3]), _parse(r[4]), int(r[5]), int(r[6]))
        for r in _read_rows(Path(path), TABLE_HEADER)
    ]


def write_experiment(result: ExperimentResult, out_dir: str | Path) -> dict[str, Path]:
    """Curves per profile plus the traces-to-success table; returns written paths."""
    out = Path(out_dir)
    (out / "curves").mkdir(parents=True, exist_ok=True)
    written = {}
    for name, curve in result.curves().items():
        path = out / "curves" / f"{name}.csv"
        write_curve_csv(curve, path)
        written[f"curve:{name}"] = path
    table = out / "traces_to_success.csv"
    write_table_csv(result.threshold_stats(), table)
    written["table"] = table
    counts = out / "success_counts.npy"
    np.save(counts, result.counts)
    written["counts"] = counts
    return written


# --- config files -----------------------------------------------------------


def load_config(path: str | Path) -> tuple[ExperimentConfig, dict[str, TechnologyProfile], str | None]:
    """Parse a JSON config file: a preset name plus field overrides.

    The preset expands first, then explicit fields replace its values, so the
    returned config is fully resolved.  Unknown fields are rejected.
    """
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return config_from_dict(data, base_dir=path.parent)


def config_from_dict(data: dict, base_dir: Path | None = None):
    data = dict(data)
    preset_name = data.pop("preset", None)
    raw_overrides = data.pop("profile_overrides", {}) or {}
    profile_files = data.pop("profile_files", []) or []
    known = {f for f in ExperimentConfig.__dataclass_fields__}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")
    if preset_name is not None:
        if preset_name not in PRESETS:
            raise ConfigError(f"unknown preset {preset_name!r}; choose from {sorted(PRESETS)}")
        base = preset(preset_name).to_dict()
    else:
        base = ExperimentConfig().to_dict()
    base.update(data)
    config = ExperimentConfig.from_dict(base).validate()
    overrides: dict[str, TechnologyProfile] = {}
    try:
        for name, fields_ in raw_overrides.items():
            overrides[name] = TechnologyProfile.from_dict({"name": name, **fields_})
        for rel in profile_files:
            prof = load_profile((base_dir or Path.cwd()) / rel)
            overrides[prof.name] = prof
    except (ProfileError, TypeError) as exc:
        raise ConfigError(f"bad profile override: {exc}") from None
    return config, overrides, preset_name


# --- manifest ---------------------------------------------------------------


def write_manifest(
    out_dir: str | Path,
    files: dict[str, Path] | list[Path],
    *,
    config: ExperimentConfig | None = None,
    timings: dict[str, float] | None = None,
    extra: dict | None = None,
) -> Path:
    out = Path(out_dir)
    paths = files.values() if isinstance(files, dict) else files
    doc = {
        "tool": "ncfet-cpa",
        "version": __version__,
        "python": platform.python_version(),
        "config_hash": config.digest() if config else None,
        "master_seed": config.master_seed if config else None,
        "config": config.to_dict() if config else None,
        "files": {Path(p).relative_to(out).as_posix(): file_digest(p) for p in sorted(paths, key=str)},
        "timings": timings or {},
    }
    if extra:
        doc.update(extra)
    path = out / MANIFEST_NAME
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(out_dir: str | Path) -> dict:
    path = Path(out_dir) / MANIFEST_NAME
    if not path.exists():
        raise ManifestError(f"no {MANIFEST_NAME} in {out_dir}")
    return json.loads(path.read_text())


def verify_manifest(out_dir: str | Path) -> list[str]:
    """Files that are missing or whose digest no longer matches."""
    out = Path(out_dir)
    problems = []
    for rel, digest in read_manifest(out)["files"].items():
        path = out / rel
        if not path.exists():
            problems.append(f"missing: {rel}")
        elif file_digest(path) != digest:
            problems.append(f"digest mismatch: {rel}")
    return problems
