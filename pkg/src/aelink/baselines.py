"""Conventional reference transceivers and closed-form BER curves.

Hamming(7,4) with hard-syndrome or soft maximum-likelihood decoding, BPSK
and Gray-mapped QPSK with coherent detection, and 2x2 spatial-multiplexing
detectors (exhaustive ML and zero-forcing).  Symbols here are plain complex
numpy arrays.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.special import erfc

from aelink.errors import ContractError, DetectionFailure

ZF_MAX_CONDITION = 1e8


def qfunc(x):
    """Gaussian tail probability P(Z > x)."""
    return 0.5 * erfc(np.asarray(x, dtype=np.float64) / np.sqrt(2.0))


@dataclass(frozen=True, eq=False)
class Hamming74Code:
    """Systematic Hamming(7,4): codeword = [d | d @ P] over GF(2)."""

    parity: np.ndarray = None

    def __post_init__(self):
        if self.parity is None:
            object.__setattr__(
                self, "parity", np.array([[1, 1, 0], [1, 0, 1], [0, 1, 1], [1, 1, 1]], dtype=np.int8)
            )

    @property
    def generator(self) -> np.ndarray:
        return np.hstack([np.eye(4, dtype=np.int8), self.parity])

    @property
    def parity_check(self) -> np.ndarray:
        return np.hstack([self.parity.T, np.eye(3, dtype=np.int8)])

    @property
    def syndrome_table(self) -> dict:
        """Syndrome (as int, MSB first) -> error position, or None for zero."""
        table = {0: None}
        weights = np.array([4, 2, 1])
        for pos, col in enumerate(self.parity_check.T):
            table[int(col @ weights)] = pos
        return table

    @property
    def datawords(self) -> np.ndarray:
        return np.array(list(itertools.product([0, 1], repeat=4)), dtype=np.int8)

    @property
    def codewords(self) -> np.ndarray:
        return (self.datawords.astype(np.int64) @ self.generator % 2).astype(np.int8)


HAMMING74 = Hamming74Code()
_HAM_BIPOLAR = 1 - 2 * HAMMING74.codewords.astype(np.float64)
_HAM_SYNDROME_FLIP = np.zeros((8, 7), dtype=np.int8)
for _syn, _pos in HAMMING74.syndrome_table.items():
    if _pos is not None:
        _HAM_SYNDROME_FLIP[_syn, _pos] = 1


def hamming74_encode(data) -> np.ndarray:
    d = np.asarray(data)
    if d.shape[-1:] != (4,):
        raise ContractError(f"Hamming(7,4) encodes 4 bits, got shape {d.shape}")
    return (d.astype(np.int64) @ HAMMING74.generator % 2).astype(np.int8)


def hamming74_decode(received, mode: str = "hard") -> np.ndarray:
    """Recover the 4 data bits from 7 received values.

    ``mode="hard"``: ``received`` are bits; single errors are corrected via
    the syndrome.  ``mode="soft"``: ``received`` are real soft values where
    positive favours bit 0; the codeword with the largest correlation wins
    (ties to the lowest dataword).
    """
    r = np.asarray(received)
    if r.shape[-1:] != (7,):
        raise ContractError(f"Hamming(7,4) decodes 7 values, got shape {r.shape}")
    if mode == "hard":
        bits = r.astype(np.int64)
        syndrome = bits @ HAMMING74.parity_check.T % 2
        idx = syndrome @ np.array([4, 2, 1])
        corrected = (bits + _HAM_SYNDROME_FLIP[idx]) % 2
        return corrected[..., :4].astype(np.int8)
    if mode == "soft":
        best = np.argmax(r.astype(np.float64) @ _HAM_BIPOLAR.T, axis=-1)
        return HAMMING74.datawords[best]
    raise ContractError(f"unknown decode mode {mode!r}")


@dataclass(frozen=True)
class ConstellationMap:
    modulation: str
    points: np.ndarray  # indexed by the bit pattern read MSB first
    bits_per_symbol: int

    @property
    def energy(self) -> float:
        return float(np.mean(np.abs(self.points) ** 2))


BPSK = ConstellationMap("BPSK", np.array([1.0 + 0j, -1.0 + 0j]), 1)
# 00, 01, 10, 11
QPSK = ConstellationMap(
    "QPSK", np.array([1 + 1j, -1 + 1j, 1 - 1j, -1 - 1j]) / np.sqrt(2.0), 2
)


def bpsk_modulate(bits) -> np.ndarray:
    """0 -> +1, 1 -> -1 on the real axis."""
    return BPSK.points[np.asarray(bits, dtype=np.int64)]


def bpsk_demodulate(y, h=None) -> np.ndarray:
    z = np.asarray(y) if h is None else np.conj(h) * np.asarray(y)
    return (np.real(z) < 0).astype(np.int8)


def bpsk_soft(y, h=None) -> np.ndarray:
    """Coherent soft values Re(conj(h) y); positive favours bit 0."""
    z = np.asarray(y) if h is None else np.conj(h) * np.asarray(y)
    return np.real(z)


def qpsk_modulate(bits) -> np.ndarray:
    """Gray map: 00 -> (+1+i), 01 -> (-1+i), 11 -> (-1-i), 10 -> (+1-i), over sqrt(2)."""
    b = np.asarray(bits, dtype=np.int64)
    if b.shape[-1] % 2:
        raise ContractError("QPSK needs an even number of bits")
    pairs = b.reshape(b.shape[:-1] + (-1, 2))
    return QPSK.points[2 * pairs[..., 0] + pairs[..., 1]]


def qpsk_demodulate(y, h=None) -> np.ndarray:
    z = np.asarray(y) if h is None else np.conj(h) * np.asarray(y)
    z = np.atleast_1d(z)
    out = np.empty(z.shape + (2,), dtype=np.int8)
    out[..., 0] = np.imag(z) < 0
    out[..., 1] = np.real(z) < 0
    return out.reshape(z.shape[:-1] + (2 * z.shape[-1],))


# candidate pairs ordered by their 4-bit pattern, so argmin ties go to the
# lexicographically smallest bits
_PAIR_BITS = np.array(list(itertools.product([0, 1], repeat=4)), dtype=np.int8)
_PAIR_SYMBOLS = qpsk_modulate(_PAIR_BITS)  # (16, 2)


def mimo_ml_detect(y, H) -> np.ndarray:
    """Exhaustive 2x2 QPSK maximum-likelihood detection.

    Parameters
    ----------
    y : complex array, shape (..., 2)
        One received sample per receive antenna.
    H : complex array, shape (..., 2, 2)

    Returns
    -------
    complex array, shape (..., 2): the QPSK pair minimizing ``|y - H x|^2``.
    """
    y = np.asarray(y)
    H = np.asarray(H)
    if y.shape[-1:] != (2,) or H.shape[-2:] != (2, 2) or H.shape[:-2] != y.shape[:-1]:
        raise ContractError("expected y of shape (..., 2) and H of shape (..., 2, 2)")
    # (..., 16, 2): H x for every candidate
    hx = np.einsum("...ij,cj->...ci", H, _PAIR_SYMBOLS)
    metric = np.sum(np.abs(y[..., None, :] - hx) ** 2, axis=-1)
    return _PAIR_SYMBOLS[np.argmin(metric, axis=-1)]


def zf_equalize(y, H, max_condition: float = ZF_MAX_CONDITION):
    """Return ``(H^-1 y, ok)``; rows with ill-conditioned H are flagged not ok."""
    y = np.asarray(y)
    H = np.asarray(H)
    if y.shape[-1:] != (2,) or H.shape[-2:] != (2, 2) or H.shape[:-2] != y.shape[:-1]:
        raise ContractError("expected y of shape (..., 2) and H of shape (..., 2, 2)")
    cond = np.linalg.cond(H)
    ok = np.isfinite(cond) & (cond <= max_condition)
    safe = np.where(ok[..., None, None], H, np.eye(2))
    z = np.linalg.solve(safe, y[..., None])[..., 0]
    return z, ok


def mimo_zf_detect(y, H, max_condition: float = ZF_MAX_CONDITION) -> np.ndarray:
    """Zero-forcing: per-stream QPSK slicing of ``H^-1 y``."""
    z, ok = zf_equalize(y, H, max_condition)
    if not np.all(ok):
        raise DetectionFailure("channel matrix is singular or ill-conditioned")
    return qpsk_modulate(qpsk_demodulate(z))


def theory_ber_bpsk_awgn(ebn0_db):
    g = 10.0 ** (np.asarray(ebn0_db, dtype=np.float64) / 10.0)
    return qfunc(np.sqrt(2.0 * g))


def theory_ber_bpsk_rayleigh(ebn0_db):
    g = 10.0 ** (np.asarray(ebn0_db, dtype=np.float64) / 10.0)
    return 0.5 * (1.0 - np.sqrt(g / (1.0 + g)))


def theory_bler_hamming74_hard_awgn(ebn0_db):
    """Block error rate of hard-decision Hamming(7,4) + BPSK on AWGN."""
    g = 10.0 ** (np.asarray(ebn0_db, dtype=np.float64) / 10.0)
    p = qfunc(np.sqrt(2.0 * (4.0 / 7.0) * g))
    return 1.0 - (1.0 - p) ** 7 - 7.0 * p * (1.0 - p) ** 6
