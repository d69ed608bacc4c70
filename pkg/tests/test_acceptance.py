"""Acceptance criteria, one test each.

Every test records a single PASS/FAIL line; conftest prints them together at
the end of the run.  Criterion outputs for 3-6 are written as files so that
criterion 8 can compare two executions byte for byte.
"""

import dataclasses
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from ncfet_cpa import aes, cpa, device, harness, power, reports
from ncfet_cpa.power import NoiseConfig

from conftest import reference_encrypt
from kat_vectors import ALL, var_family

RESULTS: dict[int, str] = {}
PROFILE_ORDER = ("finfet", "tfe1", "tfe2", "tfe3", "tfe4")
SEED = 2021


def record(n: int, ok: bool, detail: str) -> None:
    RESULTS[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"


# --- criterion outputs (shared with the determinism check) -------------------


def criterion3(out: Path) -> dict:
    sym = power.symmetric_profile()
    keys = harness.generate_keys(SEED, 20)
    texts = harness.texts_array(harness.generate_texts(SEED, 64))
    rows = []
    for key in keys:
        ts = power.simulate_trace_set(key, texts, sym)
        result = cpa.attack(ts)
        rk10 = aes.expand_key(key)[10].tobytes()
        k10 = np.frombuffer(rk10, dtype=np.uint8)
        rows.append({
            "key": key.hex(),
            "recovered_round10": result.recovered_key.hex(),
            "recovered_master": result.master_key.hex(),
            "success": result.success(rk10) and result.master_key == key,
            "bytes_correct": int(sum(rk.best == k10[i] for i, rk in enumerate(result.per_byte))),
            "correct_key_pcc": [repr(float(rk.coefficients[rk.rank_of(int(k10[i])) - 1]))
                                for i, rk in enumerate(result.per_byte)],
        })
    doc = {"traces": 64, "keys": rows, "success_rate": sum(r["success"] for r in rows) / len(rows)}
    (out / "c3.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return doc


def criterion4(out: Path, workers: int) -> dict:
    tfe4 = power.get_profile("tfe4")
    noise = NoiseConfig(harness.DESK_NOISE_SIGMA)
    key = harness.generate_keys(SEED, 1)[0]
    texts = harness.texts_array(harness.generate_texts(SEED, 2000))
    base_ts = power.simulate_trace_set(key, texts, tfe4, noise, harness.noise_seed(SEED, 0))
    base = cpa.attack(base_ts, np.arange(500))
    cfg = harness.ExperimentConfig(
        key_count=2, text_count=2000, step_count=20, sets_per_step=20, trial_count=1, set_stride=100,
        profiles=("tfe4",), noise=noise, master_seed=SEED,
    ).validate()
    batches = harness.generate_batches(SEED, cfg)
    ref = harness.run_experiment(cfg, workers=workers, batches=batches)
    doc = {"lambdas": {}}
    for lam in (0.1, 3.7, 100.0):
        scaled = cpa.attack(base_ts.scaled(lam), np.arange(500))
        rankings_equal = all(np.array_equal(a.candidates, b.candidates) for a, b in zip(base.per_byte, scaled.per_byte))
        # scaling the profile scales the signal and the (profile-relative) noise together
        res = harness.run_experiment(
            cfg, workers=workers, batches=batches, profile_overrides={"tfe4": tfe4.scaled(lam)}
        )
        crossings = {str(t): res.per_key_crossings(t).tolist() for t in cfg.thresholds}
        doc["lambdas"][repr(lam)] = {
            "rankings_equal": bool(rankings_equal),
            "counts_equal": bool(np.array_equal(res.counts, ref.counts)),
            "crossings": crossings,
        }
    doc["reference_crossings"] = {str(t): ref.per_key_crossings(t).tolist() for t in cfg.thresholds}
    (out / "c4.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return doc


def criterion5(out: Path) -> dict:
    key = harness.generate_keys(SEED, 1)[0]
    texts = harness.texts_array(harness.generate_texts(SEED, 2000))
    k10 = aes.expand_key(key)[10]
    doc = {}
    for name in PROFILE_ORDER:
        ts = power.simulate_trace_set(key, texts, power.get_profile(name))
        coeffs = cpa.correlate(cpa.all_hypotheses(ts.ciphertexts), ts.power)
        doc[name] = repr(float(coeffs[np.arange(16), k10].mean()))
    (out / "c5.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return {k: float(v) for k, v in doc.items()}


def criterion6(out: Path, workers: int) -> harness.ExperimentResult:
    cfg = harness.preset("desk", profiles=PROFILE_ORDER, master_seed=SEED)
    result = harness.run_experiment(cfg, workers=workers)
    reports.write_experiment(result, out / "c6")
    return result


def run_bundle(out: Path, workers: int) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    timings, values = {}, {}
    for n, fn in ((3, lambda: criterion3(out)), (4, lambda: criterion4(out, workers)),
                  (5, lambda: criterion5(out)), (6, lambda: criterion6(out, workers))):
        t0 = time.perf_counter()
        values[n] = fn()
        timings[n] = time.perf_counter() - t0
    return {"dir": out, "values": values, "timings": timings}


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    return run_bundle(tmp_path_factory.mktemp("acceptance") / "workers8", 8)


# --- criteria -----------------------------------------------------------------


def test_criterion_1_aes_correctness(rng):
    t0 = time.perf_counter()
    kat_ok = all(aes.encrypt(bytes.fromhex(k), bytes.fromhex(p)).ciphertext.hex() == c for k, p, c in ALL)
    zero = bytes(16)
    kat_ok &= all(aes.encrypt(zero, b).ciphertext == reference_encrypt(zero, b) for b in var_family())
    kat_ok &= all(aes.encrypt(b, zero).ciphertext == reference_encrypt(b, zero) for b in var_family())
    keys = rng.integers(0, 256, (10_000, 16), dtype=np.uint8)
    pts = rng.integers(0, 256, (10_000, 16), dtype=np.uint8)
    cts, round9 = aes.encrypt_blocks(keys, pts)
    k10 = aes.expand_keys(keys)[:, 10]
    identity_ok = np.array_equal(aes.SBOX[round9][:, aes.SHIFT_ROWS_SOURCE] ^ k10, cts)
    identity_ok &= all(
        reference_encrypt(keys[i].tobytes(), pts[i].tobytes()) == cts[i].tobytes() for i in range(0, 10_000, 97)
    )
    elapsed = time.perf_counter() - t0
    ok = bool(kat_ok and identity_ok and elapsed < 5)
    record(1, ok, f"KAT {len(ALL)}+VarTxt/VarKey ok={kat_ok}, last-round identity on 10000 pairs ok={identity_ok}, {elapsed:.2f}s")
    assert ok


def test_criterion_2_device_equations(rng):
    t0 = time.perf_counter()
    c_int = 10 ** rng.uniform(-16, -14, 1000)
    mags = c_int * (1 + 10 ** rng.uniform(-3, 1, 1000))
    invariant_ok = True
    for m, c in zip(mags, c_int):
        pair = device.CapacitancePair(-float(m), float(c))
        invariant_ok &= device.series_capacitance(pair) > c and device.voltage_gain(pair) > 1
    worst = 0.0
    for _ in range(100):
        vg = np.unique(np.concatenate([[0.0], rng.uniform(0, 0.7, int(rng.integers(1, 50)))]))
        if len(vg) < 2:
            continue
        vi = np.cumsum(rng.uniform(0, 2, len(vg))) * 0.7
        oracle = (vi[-1] - vi[0]) / vg[-1]
        worst = max(worst, abs(device.average_gain(device.GainCurve(vg, vi)) - oracle) / oracle)
    elapsed = time.perf_counter() - t0
    ok = bool(invariant_ok and worst <= 1e-9 and elapsed < 1)
    record(2, ok, f"invariants on 1000 pairs ok={invariant_ok}, worst avg-gain rel err {worst:.1e}, {elapsed:.2f}s")
    assert ok


def test_criterion_3_oracle_key_recovery(bundle):
    doc = bundle["values"][3]
    elapsed = bundle["timings"][3]
    rate = doc["success_rate"]
    mean_bytes = np.mean([r["bytes_correct"] for r in doc["keys"]])
    ok = rate == 1.0 and elapsed < 30
    record(3, ok, f"symmetric sigma=0, 64 traces, 20 keys: full-key success {rate:.2f} "
                  f"(mean {mean_bytes:.1f}/16 bytes), {elapsed:.1f}s")
    assert ok, "register-wide leakage limits per-byte correlation at 64 traces; see the decisions ledger"


def test_criterion_4_affine_invariance(bundle):
    doc = bundle["values"][4]
    elapsed = bundle["timings"][4]
    per = doc["lambdas"]
    rankings = all(v["rankings_equal"] for v in per.values())
    crossings = all(v["crossings"] == doc["reference_crossings"] for v in per.values())
    counts = all(v["counts_equal"] for v in per.values())
    ok = rankings and crossings and elapsed < 30
    record(4, ok, f"lambda in {{0.1, 3.7, 100}}: rankings identical={rankings}, crossings identical={crossings}, "
                  f"success counts identical={counts}, {elapsed:.1f}s")
    assert ok


def test_criterion_5_asymmetry_degrades_correlation(bundle):
    pcc = bundle["values"][5]
    elapsed = bundle["timings"][5]
    margin = 1e-4
    ok = pcc["tfe4"] < pcc["finfet"] - margin and pcc["finfet"] < 1.0 - margin and elapsed < 60
    record(5, ok, f"mean correct-key PCC finfet={pcc['finfet']:.6f} tfe4={pcc['tfe4']:.6f} "
                  f"(gap {pcc['finfet'] - pcc['tfe4']:.2e}), {elapsed:.1f}s")
    assert ok


def test_criterion_6_resilience_ordering(bundle):
    result = bundle["values"][6]
    elapsed = bundle["timings"][6]
    means = {t: [result.mean_crossing(p, t) for p in PROFILE_ORDER] for t in result.config.thresholds}
    finfet90, tfe490 = means[0.9][0], means[0.9][-1]
    calibrated = finfet90 >= 200
    monotone = all(all(b >= a for a, b in zip(row, row[1:])) for row in means.values())
    gain = tfe490 / finfet90 - 1
    ok = calibrated and monotone and gain >= 0.02 and elapsed < 900
    table = "; ".join(f"{t:g}: " + "/".join(f"{v:.1f}" for v in row) for t, row in means.items())
    record(6, ok, f"mean crossings finfet..tfe4 [{table}], monotone={monotone}, "
                  f"tfe4 vs finfet at 90%: {gain:+.2%} (need >= +2%), {elapsed:.0f}s")
    assert ok


@pytest.mark.paper_scale
@pytest.mark.skipif(os.environ.get("NCFET_CPA_PAPER_SCALE") != "1", reason="set NCFET_CPA_PAPER_SCALE=1 (hours)")
def test_criterion_7_paper_scale(tmp_path):
    base = harness.preset("paper", master_seed=SEED)
    cal = harness.calibrate_noise("finfet", 985, 0.999, base, sigma_bounds=(0.0, 2e-5),
                                  workers=harness.default_workers())
    cfg = dataclasses.replace(base, noise=dataclasses.replace(base.noise, gaussian_sigma=cal.sigma))
    result = harness.run_experiment(cfg, workers=harness.default_workers())
    reports.write_experiment(result, tmp_path)
    finfet, tfe4 = result.mean_crossing("finfet", 0.999), result.mean_crossing("tfe4", 0.999)
    gain = tfe4 / finfet - 1
    in_band = 886 <= finfet <= 1084
    ok = in_band and 0.04 <= gain <= 0.12 and (tmp_path / "traces_to_success.csv").exists()
    record(7, ok, f"sigma={cal.sigma:.3g}, finfet 99.9% {finfet:.1f}, tfe4 {tfe4:.1f} ({gain:+.2%}, need 4-12%)")
    assert ok


def test_criterion_7_recorded_as_skipped():
    if os.environ.get("NCFET_CPA_PAPER_SCALE") != "1":
        RESULTS.setdefault(7, "criterion 7: SKIP  paper-scale replication (set NCFET_CPA_PAPER_SCALE=1)")


def test_criterion_8_determinism(bundle, tmp_path):
    other = run_bundle(tmp_path / "workers1", 1)
    a, b = bundle["dir"], other["dir"]
    names = sorted(p.relative_to(a).as_posix() for p in a.rglob("*") if p.is_file())
    names_b = sorted(p.relative_to(b).as_posix() for p in b.rglob("*") if p.is_file())
    differing = [n for n in names if n not in names_b or (a / n).read_bytes() != (b / n).read_bytes()]
    ok = names == names_b and not differing and len(names) > 0
    record(8, ok, f"{len(names)} result files from criteria 3-6, workers 8 vs 1: "
                  f"{'byte-identical' if ok else 'differ: ' + ', '.join(differing)}")
    assert ok
