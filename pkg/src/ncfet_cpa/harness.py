"""Success-rate experiments over reproducible trace subsets.

An experiment fixes a set of random keys and one random plaintext corpus,
simulates a trace set per (key, technology), and attacks index subsets of
growing size drawn from pre-generated permutation batches.  The same keys,
texts and subsets are applied to every technology, so differences between
profiles come from the power model alone.

Random streams are derived from the master seed with a fixed spawn key per
purpose (keys, texts, batch steps, noise), so any piece reproduces in
isolation and results do not depend on the number of workers.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import aes
from .cpa import SubsetAttacker
from .power import NoiseConfig, TechnologyProfile, get_profile, simulate_trace_set

log = logging.getLogger(__name__)

PURPOSE_KEYS = 1
PURPOSE_TEXTS = 2
PURPOSE_BATCH = 3
PURPOSE_NOISE = 4

BATCH_MAGIC = "ncfet-cpa-batch/1"


class ConfigError(ValueError):
    pass


class ProvenanceError(RuntimeError):
    pass


class Unachievable(RuntimeError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    key_count: int = 10
    text_count: int = 2000
    step_count: int = 1000
    sets_per_step: int = 1000
    trial_count: int = 3
    set_stride: int = 2
    profiles: tuple[str, ...] = ("finfet", "tfe1", "tfe2", "tfe3", "tfe4")
    noise: NoiseConfig = NoiseConfig()
    master_seed: int = 2021
    thresholds: tuple[float, ...] = (0.5, 0.9, 0.999)

    def __post_init__(self) -> None:
        object.__setattr__(self, "profiles", tuple(self.profiles))
        object.__setattr__(self, "thresholds", tuple(float(t) for t in self.thresholds))
        if isinstance(self.noise, dict):
            object.__setattr__(self, "noise", NoiseConfig(**self.noise))

    def validate(self) -> "ExperimentConfig":
        for name in ("key_count", "text_count", "step_count", "sets_per_step", "trial_count", "set_stride"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.set_stride * self.step_count > self.text_count:
            raise ConfigError(
                f"set_stride * step_count = {self.set_stride * self.step_count} exceeds text_count = {self.text_count}"
            )
        if self.set_stride < 2:
            raise ConfigError("set_stride must be >= 2 so every subset has at least 2 traces")
        if not self.profiles:
            raise ConfigError("at least one profile is required")
        if len(set(self.profiles)) != len(self.profiles):
            raise ConfigError("profile names must be unique")
        th = self.thresholds
        if not th or any(not 0 < t <= 1 for t in th) or any(b <= a for a, b in zip(th, th[1:])):
            raise ConfigError("thresholds must be strictly increasing within (0, 1]")
        if not 0 <= self.master_seed < 2**64:
            raise ConfigError("master_seed must be a 64-bit unsigned integer")
        return self

    def set_size(self, step: int) -> int:
        """Subset size at 1-based ``step``."""
        return self.set_stride * step

    @property
    def set_sizes(self) -> np.ndarray:
        return self.set_stride * np.arange(1, self.step_count + 1)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["profiles"] = list(self.profiles)
        d["thresholds"] = list(self.thresholds)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        data = dict(data)
        if "noise" in data:
            noise = data["noise"]
            if not isinstance(noise, dict) or set(noise) - {f.name for f in dataclasses.fields(NoiseConfig)}:
                raise ConfigError("noise must be an object with gaussian_sigma/scale_with_profile/seed_slot")
            data["noise"] = NoiseConfig(**noise)
        return cls(**data)

    def digest(self) -> str:
        return _json_digest(self.to_dict())

    def batch_digest(self) -> str:
        """Hash of the fields that determine the permutation batches."""
        fields_ = ("master_seed", "text_count", "step_count", "sets_per_step", "trial_count", "set_stride")
        return _json_digest({k: getattr(self, k) for k in fields_})


def _json_digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


# Calibrated with calibrate_noise (finfet, 90% crossing -> 693 traces, desk scale).
DESK_NOISE_SIGMA = 6.25e-6

PRESETS: dict[str, dict] = {
    "paper": dict(key_count=10, text_count=2000, step_count=1000, sets_per_step=1000, trial_count=3, set_stride=2),
    "desk": dict(key_count=3, text_count=2000, step_count=100, sets_per_step=50, trial_count=1, set_stride=20),
}


def preset(name: str, **overrides) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    params = dict(PRESETS[name], noise=NoiseConfig(DESK_NOISE_SIGMA))
    params.update(overrides)
    return ExperimentConfig(**params).validate()


def _rng(master_seed: int, *path: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=tuple(path)))


def generate_keys(master_seed: int, key_count: int) -> list[bytes]:
    if key_count < 1:
        raise ConfigError("key_count must be >= 1")
    rows = _rng(master_seed, PURPOSE_KEYS).integers(0, 256, (key_count, aes.BLOCK_SIZE), dtype=np.uint8)
    return [r.tobytes() for r in rows]


def generate_texts(master_seed: int, text_count: int) -> list[bytes]:
    if text_count < 1:
        raise ConfigError("text_count must be >= 1")
    rows = _rng(master_seed, PURPOSE_TEXTS).integers(0, 256, (text_count, aes.BLOCK_SIZE), dtype=np.uint8)
    return [r.tobytes() for r in rows]


def texts_array(texts) -> np.ndarray:
    return np.frombuffer(b"".join(texts), dtype=np.uint8).reshape(-1, aes.BLOCK_SIZE)


def noise_seed(master_seed: int, key_index: int) -> tuple[int, int, int]:
    return (master_seed, PURPOSE_NOISE, key_index)


@dataclass
class PermutationBatch:
    """Index subsets for one trial: ``sets_per_step`` subsets at every step.

    Subsets are stored back to back in one flat uint16 array ordered by
    (step, subset, element).  Step ``s`` holds subsets of ``set_stride * s``
    distinct indices.
    """

    batch_id: int
    text_count: int
    step_count: int
    sets_per_step: int
    set_stride: int
    indices: np.ndarray | None = None
    path: Path | None = None
    header: dict = field(default_factory=dict)

    def __getstate__(self):
        state = self.__dict__.copy()
        if self.path is not None:
            state["indices"] = None
        return state

    def _flat(self) -> np.ndarray:
        if self.indices is None:
            self.indices = read_batch_indices(self.path)
        return self.indices

    def _offset(self, step: int) -> int:
        # sum over earlier steps of sets * stride * s
        return self.sets_per_step * self.set_stride * (step - 1) * step // 2

    def step_sets(self, step: int) -> np.ndarray:
        """``(sets_per_step, set_stride * step)`` index array for 1-based ``step``."""
        if not 1 <= step <= self.step_count:
            raise IndexError(f"step {step} out of range 1..{self.step_count}")
        size = self.set_stride * step
        start = self._offset(step)
        return np.asarray(self._flat()[start : start + self.sets_per_step * size]).reshape(self.sets_per_step, size)

    def selection(self, step: int) -> np.ndarray:
        """0/1 ``(text_count, sets_per_step)`` matrix for ``step``."""
        sets = self.step_sets(step).astype(np.intp)
        w = np.zeros((self.text_count, self.sets_per_step), dtype=np.float32)
        w[sets, np.arange(self.sets_per_step)[:, None]] = 1.0
        return w

    @property
    def total_sets(self) -> int:
        return self.step_count * self.sets_per_step


def generate_batch(master_seed: int, config: ExperimentConfig, trial: int) -> PermutationBatch:
    chunks = []
    for step in range(1, config.step_count + 1):
        rng = _rng(master_seed, PURPOSE_BATCH, trial, step)
        size = config.set_size(step)
        for _ in range(config.sets_per_step):
            chunks.append(rng.choice(config.text_count, size=size, replace=False).astype(np.uint16))
    header = _batch_header(config, trial)
    return PermutationBatch(
        trial, config.text_count, config.step_count, config.sets_per_step, config.set_stride,
        indices=np.concatenate(chunks), header=header,
    )


def generate_batches(master_seed: int, config: ExperimentConfig) -> list[PermutationBatch]:
    config = dataclasses.replace(config, master_seed=master_seed).validate()
    return [generate_batch(master_seed, config, trial) for trial in range(config.trial_count)]


def _batch_header(config: ExperimentConfig, trial: int) -> dict:
    return {
        "format": BATCH_MAGIC,
        "master_seed": config.master_seed,
        "config_hash": config.batch_digest(),
        "trial": trial,
        "text_count": config.text_count,
        "step_count": config.step_count,
        "sets_per_step": config.sets_per_step,
        "set_stride": config.set_stride,
    }


def batch_filename(trial: int) -> str:
    return f"batch_trial{trial}.bin"


def write_batch(batch: PermutationBatch, path: str | Path) -> None:
    """One JSON header line, then the flat indices as little-endian uint16."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write((json.dumps(batch.header, sort_keys=True) + "\n").encode())
        fh.write(np.ascontiguousarray(batch._flat(), dtype="<u2").tobytes())


def _read_header(path: Path) -> tuple[dict, int]:
    with open(path, "rb") as fh:
        line = fh.readline()
    try:
        header = json.loads(line)
    except json.JSONDecodeError:
        raise ProvenanceError(f"{path}: not a permutation batch file") from None
    if header.get("format") != BATCH_MAGIC:
        raise ProvenanceError(f"{path}: unknown batch format {header.get('format')!r}")
    return header, len(line)


def read_batch_indices(path: str | Path) -> np.ndarray:
    path = Path(path)
    _, offset = _read_header(path)
    return np.memmap(path, dtype="<u2", mode="r", offset=offset)


def read_batch(path: str | Path, config: ExperimentConfig | None = None, trial: int | None = None) -> PermutationBatch:
    """Open a batch file lazily; with ``config`` its provenance is checked."""
    path = Path(path)
    if not path.exists():
        raise ProvenanceError(f"missing permutation batch file {path}")
    header, _ = _read_header(path)
    if config is not None:
        expected = _batch_header(config, header["trial"] if trial is None else trial)
        if header != expected:
            diff = sorted(k for k in expected if header.get(k) != expected[k])
            raise ProvenanceError(f"{path}: batch was generated for a different setup (mismatched {diff})")
    batch = PermutationBatch(
        header["trial"], header["text_count"], header["step_count"], header["sets_per_step"],
        header["set_stride"], path=path, header=header,
    )
    expected_len = batch._offset(batch.step_count + 1)
    if len(batch._flat()) != expected_len:
        raise ProvenanceError(f"{path}: truncated batch file ({len(batch._flat())} of {expected_len} indices)")
    return batch


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass(frozen=True)
class SuccessCurve:
    profile_name: str
    set_sizes: np.ndarray
    rates: np.ndarray
    runs_per_point: int

    def crossing(self, threshold: float) -> int | None:
        return threshold_crossing(self, threshold)


def _first_crossing(rates: np.ndarray, set_sizes: np.ndarray, threshold: float) -> int | None:
    if not 0 < threshold <= 1:
        raise ValueError("threshold must lie in (0, 1]")
    hit = np.flatnonzero(np.asarray(rates) >= threshold)
    return int(set_sizes[hit[0]]) if len(hit) else None


def threshold_crossing(curve, threshold: float, set_stride: int = 2) -> int | None:
    """Traces at the first step whose success rate reaches ``threshold``.

    ``curve`` is a :class:`SuccessCurve` or a plain sequence of per-step rates
    (step ``s`` then holds ``set_stride * s`` traces).  ``None`` means the
    threshold is never reached.
    """
    if isinstance(curve, SuccessCurve):
        return _first_crossing(curve.rates, curve.set_sizes, threshold)
    rates = np.asarray(curve, dtype=np.float64)
    return _first_crossing(rates, set_stride * np.arange(1, len(rates) + 1), threshold)


@dataclass(frozen=True)
class ThresholdRow:
    profile: str
    threshold: float
    trial: str  # 1-based trial number, or "pooled"
    avg_traces: float | None
    std_traces: float | None
    keys_reached: int
    not_reached: int


def _stats(values: list[int]) -> tuple[float | None, float | None]:
    if not values:
        return None, None
    avg = float(np.mean(values))
    std = float(np.std(values, ddof=1)) if len(values) > 1 else None
    return avg, std


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    profiles: tuple[str, ...]
    # counts[p, trial, key, step]: successful subsets out of sets_per_step,
    # -1 where a run stopped early.
    counts: np.ndarray
    batch_digests: dict[int, str] = field(default_factory=dict)
    clamped: dict[str, int] = field(default_factory=dict)

    def curves(self) -> dict[str, SuccessCurve]:
        cfg = self.config
        if np.any(self.counts < 0):
            raise ValueError("success curves are undefined for early-stopped runs")
        runs = cfg.key_count * cfg.trial_count * cfg.sets_per_step
        return {
            name: SuccessCurve(name, cfg.set_sizes, self.counts[p].sum(axis=(0, 1)) / runs, runs)
            for p, name in enumerate(self.profiles)
        }

    def per_key_crossings(self, threshold: float) -> np.ndarray:
        """``(profiles, trials, keys)`` float array, NaN where not reached."""
        cfg = self.config
        rates = np.where(self.counts < 0, -1.0, self.counts / cfg.sets_per_step)
        out = np.full(self.counts.shape[:3], np.nan)
        for ix in np.ndindex(*self.counts.shape[:3]):
            c = _first_crossing(rates[ix], cfg.set_sizes, threshold)
            if c is not None:
                out[ix] = c
        return out

    def threshold_stats(self) -> list[ThresholdRow]:
        rows = []
        for threshold in self.config.thresholds:
            crossings = self.per_key_crossings(threshold)
            for p, name in enumerate(self.profiles):
                groups = [(str(t + 1), crossings[p, t]) for t in range(self.config.trial_count)]
                groups.append(("pooled", crossings[p].ravel()))
                for label, values in groups:
                    reached = [int(v) for v in values if not math.isnan(v)]
                    avg, std = _stats(reached)
                    rows.append(ThresholdRow(name, threshold, label, avg, std, len(reached), len(values) - len(reached)))
        return rows

    def mean_crossing(self, profile: str, threshold: float) -> float:
        """Pooled mean per-key crossing; ``inf`` if any key misses the threshold."""
        p = self.profiles.index(profile)
        values = self.per_key_crossings(threshold)[p]
        return math.inf if np.isnan(values).any() else float(values.mean())


def _resolve_profiles(config: ExperimentConfig, overrides) -> list[TechnologyProfile]:
    return [get_profile(name, overrides) for name in config.profiles]


def _run_job(args) -> tuple[int, int, np.ndarray, list[int]]:
    config, profiles, trial, key_index, key, texts, batch, stop_at = args
    attacker = SubsetAttacker(aes.encrypt_blocks(key, texts)[0])
    round_key_10 = aes.expand_key(key)[aes.ROUNDS].tobytes()
    trace_sets = [
        simulate_trace_set(key, texts, prof, config.noise, noise_seed(config.master_seed, key_index))
        for prof in profiles
    ]
    counts = np.full((len(profiles), config.step_count), -1, dtype=np.int64)
    crossed = np.zeros(len(profiles), dtype=bool)
    for step in range(1, config.step_count + 1):
        prepared = attacker.prepare(batch.selection(step))
        for p, ts in enumerate(trace_sets):
            counts[p, step - 1] = int(prepared.successes(ts.power, round_key_10).sum())
        if stop_at is not None:
            crossed |= counts[:, step - 1] >= stop_at * config.sets_per_step
            if crossed.all():
                break
    return trial, key_index, counts, [ts.clamped for ts in trace_sets]


def run_experiment(
    config: ExperimentConfig,
    *,
    workers: int = 1,
    batches: list[PermutationBatch] | None = None,
    batch_dir: str | Path | None = None,
    profile_overrides: dict[str, TechnologyProfile] | None = None,
    stop_at: float | None = None,
) -> ExperimentResult:
    """Attack every (profile, key, trial, step, subset) and count successes.

    Batches come from ``batches``, from files in ``batch_dir`` (checked
    against the config; a missing or foreign file aborts), or are generated.
    ``stop_at`` ends a (trial, key) run once every profile's per-key success
    rate has reached that level, which is all calibration needs.
    """
    config.validate()
    profiles = _resolve_profiles(config, profile_overrides)
    if batches is None:
        if batch_dir is not None:
            batches = [read_batch(Path(batch_dir) / batch_filename(t), config, t) for t in range(config.trial_count)]
        else:
            batches = generate_batches(config.master_seed, config)
    if len(batches) != config.trial_count:
        raise ProvenanceError(f"expected {config.trial_count} permutation batches, got {len(batches)}")
    keys = generate_keys(config.master_seed, config.key_count)
    texts = texts_array(generate_texts(config.master_seed, config.text_count))
    jobs = [
        (config, profiles, t, k, keys[k], texts, batches[t], stop_at)
        for t in range(config.trial_count)
        for k in range(config.key_count)
    ]
    counts = np.full((len(profiles), config.trial_count, config.key_count, config.step_count), -1, dtype=np.int64)
    clamped = dict.fromkeys(config.profiles, 0)
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_run_job, jobs))
    else:
        outcomes = map(_run_job, jobs)
    for trial, key_index, job_counts, job_clamped in outcomes:
        counts[:, trial, key_index, :] = job_counts
        for name, n in zip(config.profiles, job_clamped):
            clamped[name] += n
        log.debug("finished trial %d key %d", trial, key_index)
    digests = {b.batch_id: _batch_content_digest(b) for b in batches}
    return ExperimentResult(config, tuple(config.profiles), counts, digests, clamped)


def _batch_content_digest(batch: PermutationBatch) -> str:
    h = hashlib.sha256(json.dumps(batch.header, sort_keys=True).encode())
    h.update(np.ascontiguousarray(batch._flat(), dtype="<u2").tobytes())
    return h.hexdigest()


@dataclass
class CalibrationResult:
    sigma: float
    achieved: float
    target: float
    threshold: float
    trajectory: list[tuple[float, float]]

    @property
    def monotone(self) -> bool:
        """Crossing never decreases with sigma along the evaluated points."""
        pts = sorted(self.trajectory)
        return all(b[1] >= a[1] for a, b in zip(pts, pts[1:]))

    def to_dict(self) -> dict:
        return {
            "sigma": self.sigma,
            "achieved": None if math.isinf(self.achieved) else self.achieved,
            "target": self.target,
            "threshold": self.threshold,
            "monotone": self.monotone,
            # JSON has no infinity; a never-reached threshold is written as null
            "trajectory": [[s, None if math.isinf(v) else v] for s, v in self.trajectory],
        }


def calibrate_noise(
    profile: str | TechnologyProfile,
    target_crossing: float,
    threshold: float,
    config: ExperimentConfig,
    *,
    sigma_bounds: tuple[float, float] = (0.0, 1e-4),
    tolerance: float = 0.10,
    max_iter: int = 40,
    workers: int = 1,
) -> CalibrationResult:
    """Bisect the noise sigma until ``profile`` needs ``target_crossing`` traces.

    The measured quantity is the mean per-key crossing at ``threshold`` over
    all keys and trials of ``config`` (a key that never reaches it counts as
    infinitely many traces).  Stops once within ``tolerance`` of the target.
    """
    if isinstance(profile, TechnologyProfile):
        overrides = {profile.name: profile}
        name = profile.name
    else:
        overrides, name = None, profile
    base = dataclasses.replace(config, profiles=(name,), thresholds=(threshold,)).validate()
    if not 0 < target_crossing <= config.set_size(config.step_count):
        raise Unachievable(f"target {target_crossing} is outside the measurable range of this config")
    batches = generate_batches(base.master_seed, base)
    noise = base.noise
    trajectory: list[tuple[float, float]] = []

    def measure(sigma: float) -> float:
        cfg = dataclasses.replace(base, noise=dataclasses.replace(noise, gaussian_sigma=sigma))
        result = run_experiment(cfg, workers=workers, batches=batches, profile_overrides=overrides, stop_at=threshold)
        value = result.mean_crossing(name, threshold)
        trajectory.append((sigma, value))
        log.info("calibrate: sigma=%.4g -> mean crossing %s", sigma, value)
        return value

    lo, hi = sigma_bounds
    band = (target_crossing * (1 - tolerance), target_crossing * (1 + tolerance))

    def result_for(sigma: float, value: float) -> CalibrationResult:
        return CalibrationResult(sigma, value, target_crossing, threshold, trajectory)

    value_lo = measure(lo)
    if band[0] <= value_lo <= band[1]:
        return result_for(lo, value_lo)
    if value_lo > band[1]:
        raise Unachievable(f"even sigma={lo:g} needs {value_lo} traces, above target band {band}")
    value_hi = measure(hi)
    if band[0] <= value_hi <= band[1]:
        return result_for(hi, value_hi)
    if value_hi < band[0]:
        raise Unachievable(f"sigma={hi:g} still needs only {value_hi} traces, below target band {band}")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        value = measure(mid)
        if band[0] <= value <= band[1]:
            return result_for(mid, value)
        if value < band[0]:
            lo = mid
        else:
            hi = mid
    raise Unachievable(f"no sigma in {sigma_bounds} reached the target band {band} within {max_iter} steps")


def default_workers() -> int:
    return max(1, os.cpu_count() or 1)
