"""Complex-baseband channel models: Rayleigh taps, channel multiply, AWGN.

Signals are real arrays holding interleaved (re, im) pairs.  A signal sent
from ``m_t`` antennas over ``n`` channel uses has width ``2 * n * m_t``;
antenna ``j`` owns the contiguous slice ``[2*n*j, 2*n*(j+1))``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from aelink.errors import ContractError as ChannelError


@dataclass(frozen=True)
class ChannelRealization:
    """Fading taps for a batch of transmissions.

    ``taps`` has shape ``(batch, uses, m_r, m_t)``.  ``uses == 1`` is block
    fading (one realization held over every channel use of a message);
    otherwise there is one matrix per channel use.
    """

    taps: np.ndarray

    def __post_init__(self):
        taps = np.asarray(self.taps, dtype=np.complex128)
        if taps.ndim == 0:
            taps = taps.reshape(1, 1, 1, 1)
        elif taps.ndim == 2:
            taps = taps[None, None]
        elif taps.ndim == 3:
            taps = taps[:, None]
        if taps.ndim != 4:
            raise ChannelError("taps must have shape (batch, uses, m_r, m_t)")
        if not np.all(np.isfinite(taps)):
            raise ChannelError("channel taps must be finite")
        object.__setattr__(self, "taps", taps)

    @property
    def batch(self) -> int:
        return self.taps.shape[0]

    @property
    def uses(self) -> int:
        return self.taps.shape[1]

    @property
    def m_r(self) -> int:
        return self.taps.shape[2]

    @property
    def m_t(self) -> int:
        return self.taps.shape[3]

    def as_real(self) -> np.ndarray:
        """Taps flattened per batch row into interleaved (re, im) pairs."""
        flat = self.taps.reshape(self.batch, -1)
        out = np.empty((self.batch, 2 * flat.shape[1]))
        out[:, 0::2] = flat.real
        out[:, 1::2] = flat.imag
        return out

    def gram_real(self) -> np.ndarray:
        """``H^H H`` per use, flattened into interleaved (re, im) pairs."""
        gram = np.conj(np.swapaxes(self.taps, -1, -2)) @ self.taps
        flat = gram.reshape(self.batch, -1)
        out = np.empty((self.batch, 2 * flat.shape[1]))
        out[:, 0::2] = flat.real
        out[:, 1::2] = flat.imag
        return out

    def real_matrices(self) -> np.ndarray:
        """Real 2x2-block form of every tap, shape (batch, uses, 2*m_r, 2*m_t)."""
        a = self.taps.real
        b = self.taps.imag
        out = np.empty(self.taps.shape[:2] + (2 * self.m_r, 2 * self.m_t))
        out[..., 0::2, 0::2] = a
        out[..., 0::2, 1::2] = -b
        out[..., 1::2, 0::2] = b
        out[..., 1::2, 1::2] = a
        return out

    def __getitem__(self, rows) -> "ChannelRealization":
        return ChannelRealization(self.taps[rows])

    @classmethod
    def identity(cls, batch: int = 1, m: int = 1, uses: int = 1) -> "ChannelRealization":
        eye = np.broadcast_to(np.eye(m, dtype=np.complex128), (batch, uses, m, m))
        return cls(eye.copy())


@dataclass(frozen=True)
class NoiseSpec:
    """Noise variance per real dimension and the Eb/N0 it was derived from."""

    beta: float
    ebn0_db: float
    rate: float
    energy_per_use: float = 1.0

    def __post_init__(self):
        if not self.beta >= 0:
            raise ChannelError(f"noise variance must be non-negative, got {self.beta}")

    @classmethod
    def from_ebn0(cls, ebn0_db: float, rate: float, energy_per_use: float = 1.0) -> "NoiseSpec":
        return cls(ebn0_to_beta(ebn0_db, rate, energy_per_use), ebn0_db, rate, energy_per_use)


def ebn0_to_beta(ebn0_db: float, rate: float, energy_per_use: float = 1.0) -> float:
    """Noise variance per real dimension for a given Eb/N0.

    ``rate`` is information bits per complex channel use (summed over
    transmit antennas) and ``energy_per_use`` the average transmitted energy
    per complex channel use (summed over antennas).  With unit-energy
    symbols this is ``1 / (2 * rate * 10**(ebn0_db / 10))``.
    """
    if rate <= 0:
        raise ChannelError(f"rate must be positive, got {rate}")
    if energy_per_use <= 0:
        raise ChannelError(f"energy per channel use must be positive, got {energy_per_use}")
    return energy_per_use / (2.0 * rate * 10.0 ** (ebn0_db / 10.0))


def beta_to_ebn0(beta: float, rate: float, energy_per_use: float = 1.0) -> float:
    if beta <= 0 or rate <= 0:
        raise ChannelError("beta and rate must be positive")
    return 10.0 * np.log10(energy_per_use / (2.0 * rate * beta))


def sample_rayleigh_tap(rng: np.random.Generator) -> complex:
    a, b = rng.standard_normal(2)
    return complex(a, b) / np.sqrt(2.0)


def sample_rayleigh(rng: np.random.Generator, shape) -> np.ndarray:
    """Array of i.i.d. unit-mean-square Rayleigh taps.

    Consumes the rng exactly like repeated :func:`sample_rayleigh_tap` calls.
    """
    shape = tuple(np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
    ab = rng.standard_normal(shape + (2,))
    return (ab[..., 0] + 1j * ab[..., 1]) / np.sqrt(2.0)


def sample_mimo_channel(rng: np.random.Generator, m_t: int = 2, m_r: int = 2) -> np.ndarray:
    """One (m_r, m_t) matrix of independent Rayleigh taps."""
    if m_t < 1 or m_r < 1:
        raise ChannelError("antenna counts must be at least 1")
    return sample_rayleigh(rng, (m_r, m_t))


def draw_channel(rng: np.random.Generator, batch: int, m_r: int = 1, m_t: int = 1,
                 uses: int = 1) -> ChannelRealization:
    return ChannelRealization(sample_rayleigh(rng, (batch, uses, m_r, m_t)))


def _signal_rows(x):
    x = np.asarray(x)
    single = x.ndim == 1
    return (x[None, :] if single else x), single


def apply_channel(channel: ChannelRealization, x) -> np.ndarray:
    """Multiply a transmitted signal by the channel: ``y_i[t] = sum_j h_ij x_j[t]``.

    Complex products are carried out on interleaved pairs with the real
    block ``[[a, -b], [b, a]]`` of each tap ``a + ib``.
    """
    return _apply_real(channel, x, adjoint=False)


def apply_channel_adjoint(channel: ChannelRealization, y) -> np.ndarray:
    """Transpose of :func:`apply_channel`'s real map, i.e. multiplication by H^H."""
    return _apply_real(channel, y, adjoint=True)


def _apply_real(channel: ChannelRealization, x, adjoint: bool) -> np.ndarray:
    rows, single = _signal_rows(x)
    m_in, m_out = (channel.m_r, channel.m_t) if adjoint else (channel.m_t, channel.m_r)
    batch, width = rows.shape
    if width % (2 * m_in):
        raise ChannelError(f"signal width {width} does not split into {m_in} complex streams")
    n = width // (2 * m_in)
    if channel.uses not in (1, n):
        raise ChannelError(f"channel has {channel.uses} uses but the signal has {n}")
    if channel.batch not in (1, batch):
        raise ChannelError(f"channel batch {channel.batch} does not match signal batch {batch}")
    mats = channel.real_matrices()
    if adjoint:
        mats = np.swapaxes(mats, -1, -2)
    # (B, m_in, n, 2) -> (B, n, 2*m_in, 1)
    per_use = rows.reshape(batch, m_in, n, 2).transpose(0, 2, 1, 3).reshape(batch, n, 2 * m_in, 1)
    out = mats @ per_use
    out = out.reshape(batch, n, m_out, 2).transpose(0, 2, 1, 3).reshape(batch, 2 * n * m_out)
    return out[0] if single else out


def add_awgn(y, spec, rng: np.random.Generator) -> np.ndarray:
    """Add noise of variance ``spec.beta`` (or a bare float) to every real dimension."""
    beta = spec.beta if isinstance(spec, NoiseSpec) else float(spec)
    if beta < 0:
        raise ChannelError(f"noise variance must be non-negative, got {beta}")
    y = np.asarray(y, dtype=np.float64)
    if beta == 0:
        return y.copy()
    return y + np.sqrt(beta) * rng.standard_normal(y.shape)


def to_complex(x) -> np.ndarray:
    """Interleaved real pairs -> complex samples (last axis halves)."""
    x = np.asarray(x)
    return x[..., 0::2] + 1j * x[..., 1::2]


def from_complex(z) -> np.ndarray:
    z = np.asarray(z)
    out = np.empty(z.shape[:-1] + (2 * z.shape[-1],))
    out[..., 0::2] = z.real
    out[..., 1::2] = z.imag
    return out
