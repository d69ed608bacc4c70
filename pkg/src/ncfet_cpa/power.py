"""Zero-delay peak-power traces for the last-round state register.

Each encryption yields one scalar: the register power drawn at the final
clock edge, summed bit by bit from the profile's per-transition powers::

    P = n01 * t01_total + n10 * t10_total + n_stable * t_clk + p_static + noise

Power values are per register bit.  Only the t01 : t10 : t_clk ratios can
influence a correlation attack, because Pearson correlation ignores any
positive affine rescaling of the trace column.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import zlib
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from . import aes

VDD = 0.7
FREQUENCY = 100e6

# Per-bit register power of the AES round-state register (watts).
FINFET_TABLE = dict(t01_total=2.19e-6, t10_total=2.04e-6, t_clk=4.89e-7, p_static=3.45e-10)
TFE4_TABLE = dict(t01_total=4.59e-6, t10_total=3.86e-6, t_clk=6.94e-7, p_static=3.17e-10)
POWER_FIELDS = ("t01_total", "t10_total", "t_clk", "p_static")

# Noise sigma is quoted at the FinFET baseline; other technologies scale it by
# their rising-transition switching power (see NoiseConfig).
REFERENCE_RISE_SWITCHING = FINFET_TABLE["t01_total"] - FINFET_TABLE["t_clk"]

TRACE_CSV_HEADER = ("index", "plaintext_hex", "ciphertext_hex", "power_watts")


class ProfileError(ValueError):
    pass


@dataclass(frozen=True)
class TechnologyProfile:
    name: str
    t01_total: float
    t10_total: float
    t_clk: float
    p_static: float
    vdd: float = VDD
    freq: float = FREQUENCY
    derived: bool = False

    def __post_init__(self) -> None:
        if not self.name:
            raise ProfileError("profile name must be non-empty")
        if not self.t_clk > 0:
            raise ProfileError(f"{self.name}: t_clk must be positive")
        if not self.t01_total >= self.t_clk:
            raise ProfileError(f"{self.name}: t01_total must be >= t_clk")
        if not self.t10_total >= self.t_clk:
            raise ProfileError(f"{self.name}: t10_total must be >= t_clk")
        if not self.p_static >= 0:
            raise ProfileError(f"{self.name}: p_static must be >= 0")

    @property
    def asymmetry(self) -> float:
        """Rise/fall ratio of the total per-bit transition power."""
        return self.t01_total / self.t10_total

    @property
    def rise_switching(self) -> float:
        return self.t01_total - self.t_clk

    def scaled(self, factor: float) -> "TechnologyProfile":
        """Every power parameter multiplied by ``factor`` (a V^2 f rescale)."""
        if not factor > 0:
            raise ProfileError("scale factor must be positive")
        return dataclasses.replace(self, **{f: getattr(self, f) * factor for f in POWER_FIELDS})

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TechnologyProfile":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ProfileError(f"unknown profile fields: {sorted(unknown)}")
        missing = {"name", *POWER_FIELDS} - set(data)
        if missing:
            raise ProfileError(f"missing profile fields: {sorted(missing)}")
        return cls(**data)


def _interpolated(thickness: int) -> TechnologyProfile:
    # Unpublished intermediate thicknesses: quadratic in thickness, so the
    # change concentrates toward the thickest layer.
    weight = (thickness / 4) ** 2
    params = {f: FINFET_TABLE[f] + (TFE4_TABLE[f] - FINFET_TABLE[f]) * weight for f in POWER_FIELDS}
    return TechnologyProfile(name=f"tfe{thickness}", derived=True, **params)


def builtin_profiles() -> list[TechnologyProfile]:
    """FinFET baseline and NCFET with 1-4 nm ferroelectric layers, thinnest first."""
    return [
        TechnologyProfile(name="finfet", **FINFET_TABLE),
        _interpolated(1),
        _interpolated(2),
        _interpolated(3),
        TechnologyProfile(name="tfe4", **TFE4_TABLE),
    ]


def symmetric_profile(base: TechnologyProfile | None = None) -> TechnologyProfile:
    """Copy of ``base`` with fall power forced equal to rise power."""
    base = base or builtin_profiles()[0]
    return dataclasses.replace(base, name=f"{base.name}-sym", t10_total=base.t01_total, derived=True)


def get_profile(name: str, overrides: dict[str, TechnologyProfile] | None = None) -> TechnologyProfile:
    if overrides and name in overrides:
        return overrides[name]
    for p in builtin_profiles():
        if p.name == name:
            return p
    if name == "finfet-sym":
        return symmetric_profile()
    known = [p.name for p in builtin_profiles()] + ["finfet-sym"]
    raise ProfileError(f"unknown profile {name!r}; known: {', '.join(known)}")


def save_profile(profile: TechnologyProfile, path: str | Path) -> None:
    Path(path).write_text(json.dumps(profile.to_dict(), indent=2) + "\n")


def load_profile(path: str | Path) -> TechnologyProfile:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ProfileError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ProfileError(f"{path}: profile must be a JSON object")
    return TechnologyProfile.from_dict(data)


def shipped_profile_paths() -> dict[str, Path]:
    root = resources.files("ncfet_cpa") / "data" / "profiles"
    return {p.name.removesuffix(".json"): Path(str(p)) for p in root.iterdir() if p.name.endswith(".json")}


@dataclass(frozen=True)
class NoiseConfig:
    """Additive Gaussian noise on the peak-power scalar.

    ``gaussian_sigma`` is in watts at the FinFET baseline operating point.
    With ``scale_with_profile`` the effective sigma for another technology
    grows with its rising-transition switching power: the residual netlist
    activity this term stands for is charging current drawn from the same
    supply in the same technology.  Set it to False for a fixed wattage.
    """

    gaussian_sigma: float = 0.0
    scale_with_profile: bool = True
    seed_slot: str = "noise"

    def __post_init__(self) -> None:
        if not self.gaussian_sigma >= 0:
            raise ValueError("gaussian_sigma must be >= 0")

    def sigma_for(self, profile: TechnologyProfile) -> float:
        if self.gaussian_sigma == 0.0:
            return 0.0
        if not self.scale_with_profile:
            return self.gaussian_sigma
        return self.gaussian_sigma * profile.rise_switching / REFERENCE_RISE_SWITCHING

    def stream(self, seed) -> np.random.Generator:
        entropy = list(seed) if isinstance(seed, (tuple, list)) else [seed]
        return np.random.default_rng([*map(int, entropy), zlib.crc32(self.seed_slot.encode())])


def peak_power_array(
    n01: np.ndarray, n10: np.ndarray, profile: TechnologyProfile, noise: np.ndarray | None = None
) -> tuple[np.ndarray, int]:
    """Vectorised peak power; returns ``(power, clamp_count)``."""
    n01 = np.asarray(n01, dtype=np.float64)
    n10 = np.asarray(n10, dtype=np.float64)
    n_stable = 8 * aes.BLOCK_SIZE - n01 - n10
    power = n01 * profile.t01_total + n10 * profile.t10_total + n_stable * profile.t_clk + profile.p_static
    if noise is None:
        return power, 0
    power = power + noise
    low = power <= 0
    clamped = int(low.sum())
    if clamped:
        power = np.where(low, profile.p_static if profile.p_static > 0 else np.nextafter(0, 1), power)
    return power, clamped


def simulate_peak_power(
    tc: aes.TransitionCount,
    profile: TechnologyProfile,
    noise: NoiseConfig | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    sigma = noise.sigma_for(profile) if noise else 0.0
    eps = None
    if sigma > 0:
        if rng is None:
            raise ValueError("a random generator is required when noise is enabled")
        eps = np.array([sigma * rng.standard_normal()])
    power, _ = peak_power_array(np.array([tc.n01]), np.array([tc.n10]), profile, eps)
    return float(power[0])


@dataclass
class TraceSet:
    profile_name: str | None
    key: bytes | None
    plaintexts: np.ndarray
    ciphertexts: np.ndarray
    power: np.ndarray
    clamped: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        n = len(self.power)
        if self.plaintexts.shape != (n, 16) or self.ciphertexts.shape != (n, 16):
            raise ValueError("plaintexts, ciphertexts and power must be aligned")

    def __len__(self) -> int:
        return len(self.power)

    def scaled(self, factor: float) -> "TraceSet":
        return dataclasses.replace(self, power=self.power * factor)

    def subset(self, indices) -> "TraceSet":
        idx = np.asarray(indices, dtype=np.intp)
        return dataclasses.replace(
            self, plaintexts=self.plaintexts[idx], ciphertexts=self.ciphertexts[idx], power=self.power[idx]
        )


def simulate_trace_set(
    key: bytes,
    texts: Sequence[bytes] | np.ndarray,
    profile: TechnologyProfile,
    noise: NoiseConfig | None = None,
    seed=0,
) -> TraceSet:
    """Encrypt every text and record its last-round peak power.

    The noise draw for text ``i`` is the ``i``-th normal of a stream keyed by
    ``seed`` only, so two profiles simulated with the same seed see the same
    standardised noise sequence.
    """
    pts = texts if isinstance(texts, np.ndarray) else np.array([list(t) for t in texts], dtype=np.uint8)
    pts = np.asarray(pts, dtype=np.uint8).reshape(-1, aes.BLOCK_SIZE)
    if len(pts) == 0:
        raise ValueError("texts must be non-empty")
    cts, round9 = aes.encrypt_blocks(key, pts)
    n01, n10 = aes.transition_arrays(round9, cts)
    noise = noise or NoiseConfig()
    sigma = noise.sigma_for(profile)
    eps = sigma * noise.stream(seed).standard_normal(len(pts)) if sigma > 0 else None
    power, clamped = peak_power_array(n01, n10, profile, eps)
    return TraceSet(profile.name, bytes(key), pts.copy(), cts, power, clamped)


def format_power(value: float) -> str:
    return f"{value:.8e}"


def trace_set_to_csv(traces: TraceSet) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRACE_CSV_HEADER)
    for i in range(len(traces)):
        writer.writerow(
            [i, traces.plaintexts[i].tobytes().hex(), traces.ciphertexts[i].tobytes().hex(), format_power(traces.power[i])]
        )
    return buf.getvalue()


def write_trace_csv(traces: TraceSet, path: str | Path) -> None:
    Path(path).write_text(trace_set_to_csv(traces))


def read_trace_csv(path: str | Path, profile_name: str | None = None, key: bytes | None = None) -> TraceSet:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != TRACE_CSV_HEADER:
            raise ValueError(f"{path}: expected header {','.join(TRACE_CSV_HEADER)}")
        pts, cts, power = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4 or int(row[0]) != len(power):
                raise ValueError(f"{path}:{lineno}: malformed or out-of-order row")
            pts.append(bytes.fromhex(row[1]))
            cts.append(bytes.fromhex(row[2]))
            power.append(float(row[3]))
    if not power:
        raise ValueError(f"{path}: no traces")
    as_arr = lambda rows: np.frombuffer(b"".join(rows), dtype=np.uint8).reshape(-1, 16).copy()  # noqa: E731
    return TraceSet(profile_name, key, as_arr(pts), as_arr(cts), np.array(power))
