"""Last-round correlation power analysis with a Hamming-distance model.

For ciphertext byte ``p`` and a guess ``g`` of round-key byte ``p`` the
predicted round-9 register byte is ``inv_sbox(c[p] ^ g)``; it sits in
register position ``shiftrows_source(p)`` and switches to the ciphertext byte
held there.  The hypothetical power of a trace is the Hamming distance of
that byte transition.

Candidates are ranked by Pearson correlation, highest first; equal
coefficients go to the smaller byte value.  A hypothesis row that is constant
over the selected traces scores 0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import aes
from .power import TraceSet

N_CANDIDATES = 256
GUESSES = np.arange(N_CANDIDATES, dtype=np.uint8)


class CpaError(ValueError):
    pass


class TooFewSamples(CpaError):
    pass


class LengthMismatch(CpaError):
    pass


def _check_position(byte_position: int) -> None:
    if not 0 <= byte_position < aes.BLOCK_SIZE:
        raise CpaError(f"byte position out of range: {byte_position}")


def _ct_array(ciphertexts) -> np.ndarray:
    if isinstance(ciphertexts, np.ndarray):
        return np.asarray(ciphertexts, dtype=np.uint8).reshape(-1, aes.BLOCK_SIZE)
    return np.frombuffer(b"".join(bytes(c) for c in ciphertexts), dtype=np.uint8).reshape(-1, aes.BLOCK_SIZE)


def hypothesis_matrix(ciphertexts, byte_position: int) -> np.ndarray:
    """``(256, n)`` uint8 matrix of predicted register-byte Hamming distances."""
    _check_position(byte_position)
    cts = _ct_array(ciphertexts)
    src = aes.SHIFT_ROWS_SOURCE[byte_position]
    predicted = aes.INV_SBOX[cts[None, :, byte_position] ^ GUESSES[:, None]]
    return aes.POPCOUNT[predicted ^ cts[None, :, src]]


def hypothetical_hd(ciphertexts, byte_position: int, guess: int) -> np.ndarray:
    if not 0 <= guess < N_CANDIDATES:
        raise CpaError(f"key guess out of range: {guess}")
    return hypothesis_matrix(ciphertexts, byte_position)[guess]


def all_hypotheses(ciphertexts) -> np.ndarray:
    """``(16, 256, n)`` hypotheses for every byte position."""
    cts = _ct_array(ciphertexts)
    return np.stack([hypothesis_matrix(cts, p) for p in range(aes.BLOCK_SIZE)])


def correlate(hypotheses: np.ndarray, trace: np.ndarray) -> np.ndarray:
    """Pearson coefficient of every hypothesis row (last axis) with ``trace``.

    Two-pass: both sides are centred before the products are summed.
    """
    t = np.asarray(trace, dtype=np.float64)
    h = np.asarray(hypotheses, dtype=np.float64)
    tc = t - t.mean()
    hc = h - h.mean(axis=-1, keepdims=True)
    cov = hc @ tc
    denom = np.sqrt((hc * hc).sum(axis=-1) * (tc @ tc))
    r = np.divide(cov, denom, out=np.zeros_like(cov), where=denom > 0)
    return np.clip(r, -1.0, 1.0)


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise LengthMismatch(f"pearson needs two equal-length vectors, got {x.shape} and {y.shape}")
    if len(x) < 2:
        raise TooFewSamples("pearson needs at least 2 samples")
    return float(correlate(x[None, :], y)[0])


def rank_candidates(coefficients: np.ndarray) -> np.ndarray:
    """Candidate order: descending coefficient, ties to the smaller value."""
    return np.lexsort((np.arange(len(coefficients)), -coefficients))


@dataclass(frozen=True)
class ByteRanking:
    candidates: np.ndarray  # permutation of 0..255, best first
    coefficients: np.ndarray  # aligned with candidates

    @property
    def best(self) -> int:
        return int(self.candidates[0])

    def rank_of(self, candidate: int) -> int:
        """1-based rank of ``candidate``."""
        return int(np.flatnonzero(self.candidates == candidate)[0]) + 1


@dataclass(frozen=True)
class CpaResult:
    per_byte: tuple[ByteRanking, ...]
    recovered_key: bytes  # round-10 key
    trace_count: int

    @property
    def master_key(self) -> bytes:
        return aes.round10_to_master_key(self.recovered_key)

    def success(self, round_key_10: bytes) -> bool:
        return self.recovered_key == bytes(round_key_10)

    def to_dict(self, top: int = 5) -> dict:
        return {
            "trace_count": self.trace_count,
            "round10_key": self.recovered_key.hex(),
            "master_key": self.master_key.hex(),
            "bytes": [
                {
                    "position": pos,
                    "top": [
                        {"candidate": int(c), "pcc": float(r)}
                        for c, r in zip(rk.candidates[:top], rk.coefficients[:top])
                    ],
                }
                for pos, rk in enumerate(self.per_byte)
            ],
        }


def write_result_json(result: CpaResult, path: str | Path, top: int = 5, extra: dict | None = None) -> None:
    doc = result.to_dict(top)
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_result_json(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())


def attack(traces: TraceSet, trace_indices=None) -> CpaResult:
    """Recover the round-10 key from the selected traces."""
    idx = np.arange(len(traces)) if trace_indices is None else np.asarray(trace_indices, dtype=np.intp)
    if idx.ndim != 1 or len(idx) < 2:
        raise TooFewSamples("an attack needs at least 2 traces")
    if idx.min() < 0 or idx.max() >= len(traces):
        raise CpaError("trace index out of range")
    cts = traces.ciphertexts[idx]
    trace = traces.power[idx]
    coeffs = correlate(all_hypotheses(cts), trace)
    rankings = []
    for pos in range(aes.BLOCK_SIZE):
        order = rank_candidates(coeffs[pos])
        rankings.append(ByteRanking(order, coeffs[pos][order]))
    key = bytes(rk.best for rk in rankings)
    return CpaResult(tuple(rankings), key, len(idx))


class SubsetAttacker:
    """Full-key success of many trace subsets of one fixed corpus.

    Rather than slicing, each subset is a 0/1 column of a selection matrix,
    and every per-subset sum the correlation needs comes out of one matrix
    product.  The hypothesis-side sums depend only on the ciphertexts, so
    :meth:`prepare` computes them once per batch of subsets and
    :meth:`recovered` reuses them for any number of trace columns.
    """

    def __init__(self, ciphertexts: np.ndarray):
        h = all_hypotheses(ciphertexts).reshape(aes.BLOCK_SIZE * N_CANDIDATES, -1)
        self.n_traces = h.shape[1]
        # Integer sums stay exact in float32 (< 2**24).
        self._h32 = h.astype(np.float32)
        self._hh32 = (h.astype(np.uint16) ** 2).astype(np.float32)
        self._h64 = h.astype(np.float64)

    def prepare(self, selection: np.ndarray) -> "PreparedSubsets":
        """``selection`` is ``(n_traces, n_sets)`` with 0/1 entries."""
        w = np.asarray(selection)
        if w.shape[0] != self.n_traces:
            raise CpaError("selection rows must match the trace count")
        w32 = w.astype(np.float32)
        n = w32.sum(axis=0, dtype=np.float64)
        if np.any(n < 2):
            raise TooFewSamples("every subset needs at least 2 traces")
        sh = (self._h32 @ w32).astype(np.float64)
        shh = (self._hh32 @ w32).astype(np.float64)
        var_h = n * shh - sh * sh
        return PreparedSubsets(self, w.astype(np.float64), n, sh, var_h)


@dataclass
class PreparedSubsets:
    attacker: SubsetAttacker
    w: np.ndarray
    n: np.ndarray
    sh: np.ndarray
    var_h: np.ndarray

    def coefficients(self, trace: np.ndarray) -> np.ndarray:
        """``(16, 256, n_sets)`` Pearson coefficients."""
        t = np.asarray(trace, dtype=np.float64)
        # Centring and scaling with whole-corpus statistics keeps the sums
        # well conditioned and does not change any coefficient.
        scale = t.std()
        t = (t - t.mean()) / scale if scale > 0 else np.zeros_like(t)
        st = t @ self.w
        stt = (t * t) @ self.w
        sht = self.attacker._h64 @ (self.w * t[:, None])
        num = self.n * sht - self.sh * st
        den = self.var_h * (self.n * stt - st * st)
        r = np.divide(num, np.sqrt(np.maximum(den, 0.0)), out=np.zeros_like(num), where=den > 0)
        return r.reshape(aes.BLOCK_SIZE, N_CANDIDATES, -1)

    def recovered(self, trace: np.ndarray) -> np.ndarray:
        """``(n_sets, 16)`` rank-1 key bytes; argmax keeps the smaller byte on ties."""
        return self.coefficients(trace).argmax(axis=1).T.astype(np.uint8)

    def successes(self, trace: np.ndarray, round_key_10: bytes) -> np.ndarray:
        truth = np.frombuffer(bytes(round_key_10), dtype=np.uint8)
        return np.all(self.recovered(trace) == truth, axis=1)
