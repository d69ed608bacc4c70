"""AES-128 with capture of the last-round register transition.

State bytes are kept in the standard column-major order: byte ``i`` of a
block sits at row ``i % 4``, column ``i // 4``.  The attacked register is the
128-bit round-state register; at the final clock edge it switches from the
state after round 9 to the ciphertext.  Key-schedule registers are constant
for a fixed key and are not modelled.

Everything here works on ``(n, 16)`` uint8 arrays so a whole text corpus is
encrypted in one call; the single-block helpers are thin wrappers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

BLOCK_SIZE = 16
ROUNDS = 10


def _xtime(a: int) -> int:
    a <<= 1
    return (a ^ 0x11B) if a & 0x100 else a


def _gf_mul(a: int, b: int) -> int:
    out = 0
    while b:
        if b & 1:
            out ^= a
        a = _xtime(a)
        b >>= 1
    return out


def _build_sbox() -> np.ndarray:
    inverse = [0] * 256
    for a in range(1, 256):
        for b in range(1, 256):
            if _gf_mul(a, b) == 1:
                inverse[a] = b
                break
    box = np.empty(256, dtype=np.uint8)
    for x in range(256):
        b = inverse[x]
        s = b
        for shift in range(1, 5):
            s ^= ((b << shift) | (b >> (8 - shift))) & 0xFF
        box[x] = s ^ 0x63
    return box


SBOX = _build_sbox()
INV_SBOX = np.argsort(SBOX).astype(np.uint8)
POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint8)
XTIME = np.array([_xtime(i) & 0xFF for i in range(256)], dtype=np.uint8)
RCON = (0x01, 0x02, 0x04, 0x08, 0x10, 0x20, 0x40, 0x80, 0x1B, 0x36)

# SHIFT_ROWS_SOURCE[p]: state position whose byte lands at position p after
# ShiftRows (row r rotates left by r columns).
SHIFT_ROWS_SOURCE = np.array(
    [(p % 4) + 4 * (((p // 4) + (p % 4)) % 4) for p in range(BLOCK_SIZE)], dtype=np.intp
)
SHIFT_ROWS_DEST = np.argsort(SHIFT_ROWS_SOURCE)


class TransitionCount(NamedTuple):
    """Bit transitions of a 128-bit register at one clock edge."""

    n01: int
    n10: int
    n_stable: int


@dataclass(frozen=True)
class EncryptionRecord:
    plaintext: bytes
    ciphertext: bytes
    round9_state: bytes
    round_key_10: bytes


def _as_block(value: bytes | bytearray | np.ndarray, what: str = "block") -> np.ndarray:
    arr = np.frombuffer(bytes(value), dtype=np.uint8) if not isinstance(value, np.ndarray) else value
    if arr.shape != (BLOCK_SIZE,):
        raise ValueError(f"{what} must be exactly {BLOCK_SIZE} bytes, got shape {arr.shape}")
    return arr.astype(np.uint8, copy=False)


def expand_keys(keys: np.ndarray) -> np.ndarray:
    """Round keys for ``(n, 16)`` cipher keys as an ``(n, 11, 16)`` array."""
    k = np.asarray(keys, dtype=np.uint8)
    if k.ndim != 2 or k.shape[1] != BLOCK_SIZE:
        raise ValueError(f"keys must have shape (n, {BLOCK_SIZE}), got {k.shape}")
    words = [k[:, 4 * i : 4 * i + 4] for i in range(4)]
    for i in range(4, 4 * (ROUNDS + 1)):
        temp = words[i - 1]
        if i % 4 == 0:
            temp = SBOX[np.roll(temp, -1, axis=1)]
            temp[:, 0] ^= RCON[i // 4 - 1]
        words.append(words[i - 4] ^ temp)
    return np.stack(words, axis=1).reshape(len(k), ROUNDS + 1, BLOCK_SIZE)


def expand_key(key: bytes | np.ndarray) -> np.ndarray:
    """Return the 11 AES-128 round keys as an ``(11, 16)`` uint8 array."""
    return expand_keys(_as_block(key, "key")[None, :])[0]


def round10_to_master_key(k10: bytes | np.ndarray) -> bytes:
    """Invert the AES-128 key schedule from the last round key."""
    w = [None] * 44
    k = _as_block(k10, "round key")
    for j in range(4):
        w[40 + j] = k[4 * j : 4 * j + 4].copy()
    for i in range(43, 3, -1):
        if i % 4 == 0:
            temp = SBOX[np.roll(w[i - 1], -1)]
            temp[0] ^= RCON[i // 4 - 1]
        else:
            temp = w[i - 1]
        w[i - 4] = w[i] ^ temp
    return bytes(np.concatenate(w[:4]))


def _mix_columns(state: np.ndarray) -> np.ndarray:
    cols = state.reshape(-1, 4, 4)
    a0, a1, a2, a3 = (cols[:, :, r] for r in range(4))
    total = a0 ^ a1 ^ a2 ^ a3
    out = np.empty_like(cols)
    out[:, :, 0] = a0 ^ total ^ XTIME[a0 ^ a1]
    out[:, :, 1] = a1 ^ total ^ XTIME[a1 ^ a2]
    out[:, :, 2] = a2 ^ total ^ XTIME[a2 ^ a3]
    out[:, :, 3] = a3 ^ total ^ XTIME[a3 ^ a0]
    return out.reshape(-1, BLOCK_SIZE)


def encrypt_blocks(key, plaintexts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Encrypt ``(n, 16)`` plaintexts; return ``(ciphertexts, round9_states)``.

    ``key`` is one 16-byte key, or an ``(n, 16)`` array with a key per row.
    """
    pts = np.asarray(plaintexts, dtype=np.uint8)
    if pts.ndim != 2 or pts.shape[1] != BLOCK_SIZE:
        raise ValueError(f"plaintexts must have shape (n, {BLOCK_SIZE}), got {pts.shape}")
    if isinstance(key, np.ndarray) and key.ndim == 2:
        if len(key) != len(pts):
            raise ValueError("one key per plaintext row is required")
        round_keys = expand_keys(key).transpose(1, 0, 2)
    else:
        round_keys = expand_key(key)[:, None, :]
    state = pts ^ round_keys[0]
    for rnd in range(1, ROUNDS):
        state = _mix_columns(SBOX[state][:, SHIFT_ROWS_SOURCE]) ^ round_keys[rnd]
    round9 = state
    cts = SBOX[round9][:, SHIFT_ROWS_SOURCE] ^ round_keys[ROUNDS]
    return cts, round9


def encrypt(key: bytes, plaintext: bytes) -> EncryptionRecord:
    pt = _as_block(plaintext, "plaintext")
    cts, round9 = encrypt_blocks(key, pt[None, :])
    return EncryptionRecord(
        plaintext=bytes(pt),
        ciphertext=bytes(cts[0]),
        round9_state=bytes(round9[0]),
        round_key_10=bytes(expand_key(key)[ROUNDS]),
    )


def last_round(round9_state: bytes | np.ndarray, round_key_10: bytes | np.ndarray) -> bytes:
    """SubBytes, ShiftRows, AddRoundKey; the final round has no MixColumns."""
    s = _as_block(round9_state, "state")
    return bytes(SBOX[s][SHIFT_ROWS_SOURCE] ^ _as_block(round_key_10, "round key"))


def inv_sbox(value: int) -> int:
    if not 0 <= value <= 0xFF:
        raise ValueError(f"byte out of range: {value}")
    return int(INV_SBOX[value])


def sbox(value: int) -> int:
    if not 0 <= value <= 0xFF:
        raise ValueError(f"byte out of range: {value}")
    return int(SBOX[value])


def shiftrows_source(pos: int) -> int:
    """Round-9 state position that ShiftRows moves to ciphertext position ``pos``."""
    if not 0 <= pos < BLOCK_SIZE:
        raise ValueError(f"state position out of range: {pos}")
    return int(SHIFT_ROWS_SOURCE[pos])


def transition_arrays(before: np.ndarray, after: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row rising and falling bit counts for ``(n, 16)`` register snapshots."""
    b = np.asarray(before, dtype=np.uint8)
    a = np.asarray(after, dtype=np.uint8)
    n01 = POPCOUNT[~b & a].sum(axis=-1, dtype=np.int64)
    n10 = POPCOUNT[b & ~a].sum(axis=-1, dtype=np.int64)
    return n01, n10


def register_transitions(before: bytes, after: bytes) -> TransitionCount:
    n01, n10 = transition_arrays(_as_block(before), _as_block(after))
    n01, n10 = int(n01), int(n10)
    return TransitionCount(n01, n10, 8 * BLOCK_SIZE - n01 - n10)
