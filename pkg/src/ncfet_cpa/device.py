"""Negative-capacitance gate-stack arithmetic.

Capacitances are in farads and voltages in volts.  The ferroelectric layer is
a negative capacitance in series with the transistor's internal (MOS)
capacitance; the device is hysteresis-free, and thus usable for logic, only
while ``|c_ferro| > c_internal``.

Gain curves are tabulated ``v_internal(v_gate)`` samples produced by an
external compact model; this module only differentiates and averages them.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DeviceModelError(ValueError):
    pass


class HysteresisViolation(DeviceModelError):
    pass


class TooFewSamples(DeviceModelError):
    pass


class ZeroSpan(DeviceModelError):
    pass


@dataclass(frozen=True)
class CapacitancePair:
    c_ferro: float
    c_internal: float

    def check(self) -> None:
        if not self.c_internal > 0:
            raise DeviceModelError(f"c_internal must be positive, got {self.c_internal!r}")
        if not self.c_ferro < 0:
            raise DeviceModelError(f"c_ferro must be negative, got {self.c_ferro!r}")
        if not abs(self.c_ferro) > self.c_internal:
            raise HysteresisViolation(
                f"|c_ferro| = {abs(self.c_ferro):g} F must exceed c_internal = "
                f"{self.c_internal:g} F for hysteresis-free operation"
            )


@dataclass(frozen=True)
class GainCurve:
    v_gate: np.ndarray
    v_internal: np.ndarray

    def __post_init__(self) -> None:
        vg = np.asarray(self.v_gate, dtype=np.float64)
        vi = np.asarray(self.v_internal, dtype=np.float64)
        if vg.ndim != 1 or vg.shape != vi.shape:
            raise DeviceModelError("v_gate and v_internal must be 1-D arrays of equal length")
        if vg.size < 2:
            raise TooFewSamples(f"a gain curve needs at least 2 samples, got {vg.size}")
        if vg[0] != 0.0:
            raise DeviceModelError(f"gain curve must start at v_gate = 0, got {vg[0]!r}")
        if np.any(np.diff(vg) <= 0):
            raise DeviceModelError("v_gate samples must be strictly increasing")
        object.__setattr__(self, "v_gate", vg)
        object.__setattr__(self, "v_internal", vi)

    @classmethod
    def from_pairs(cls, samples) -> "GainCurve":
        samples = list(samples)
        if len(samples) < 2:
            raise TooFewSamples(f"a gain curve needs at least 2 samples, got {len(samples)}")
        vg, vi = zip(*samples)
        return cls(np.array(vg, dtype=np.float64), np.array(vi, dtype=np.float64))


def series_capacitance(pair: CapacitancePair) -> float:
    """Total gate capacitance of the ferroelectric/MOS series stack.

    With a negative ``c_ferro`` the series combination exceeds ``c_internal``,
    which is what raises switching power relative to the plain FinFET.
    """
    pair.check()
    return (pair.c_ferro * pair.c_internal) / (pair.c_ferro + pair.c_internal)


def voltage_gain(pair: CapacitancePair) -> float:
    """Internal-voltage amplification ``|c_ferro| / (|c_ferro| - c_internal)``."""
    pair.check()
    magnitude = abs(pair.c_ferro)
    return magnitude / (magnitude - pair.c_internal)


def differential_gain(curve: GainCurve) -> list[tuple[float, float]]:
    """dV_int/dV_G on the curve's own grid.

    Central differences inside, one-sided differences at the two ends.  The
    interior stencil spans ``x[i+1] - x[i-1]`` even on uneven grids so that
    trapezoidal integration of the result telescopes to the endpoint slope.
    """
    vg, vi = curve.v_gate, curve.v_internal
    a_v = np.empty_like(vi)
    a_v[0] = (vi[1] - vi[0]) / (vg[1] - vg[0])
    a_v[-1] = (vi[-1] - vi[-2]) / (vg[-1] - vg[-2])
    a_v[1:-1] = (vi[2:] - vi[:-2]) / (vg[2:] - vg[:-2])
    return list(zip(vg.tolist(), a_v.tolist()))


def average_gain(curve: GainCurve) -> float:
    """Mean differential gain over ``[0, V_G]`` by trapezoidal integration."""
    span = curve.v_gate[-1]
    if span == 0.0:
        raise ZeroSpan("gain curve spans zero gate voltage")
    a_v = np.array([g for _, g in differential_gain(curve)])
    return float(np.trapezoid(a_v, curve.v_gate) / span)


def load_gain_curve(path: str | Path) -> GainCurve:
    """Read a two-column ``v_gate,v_internal`` CSV with a one-line header."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise TooFewSamples(f"{path}: empty file")
    body = [r for r in rows[1:] if r and any(cell.strip() for cell in r)]
    try:
        pairs = [(float(r[0]), float(r[1])) for r in body]
    except (IndexError, ValueError) as exc:
        raise DeviceModelError(f"{path}: malformed gain-curve row ({exc})") from None
    return GainCurve.from_pairs(pairs)


def save_gain_curve(curve: GainCurve, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["v_gate", "v_internal"])
        for vg, vi in zip(curve.v_gate, curve.v_internal):
            writer.writerow([repr(float(vg)), repr(float(vi))])
