"""Physical broadcast layer: power normalization and AWGN / Rayleigh / Rician corruption.

Real symbol vectors are paired into complex symbols for the fading channels
(consecutive pairs form I/Q), so a transmission of ``c_tx`` real symbols occupies
``c_tx / 2`` complex channel uses.  Every draw goes through an explicit RNG
stream so runs are reproducible symbol for symbol.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from typing import Union

import numpy as np
import torch

KINDS = ("awgn", "rayleigh", "rician")
FADING_MODES = ("per_symbol", "per_block")


class ChannelError(ValueError):
    """Invalid channel specification or unusable input signal."""


class DegenerateSignalError(ChannelError):
    pass


@dataclass
class ChannelSpec:
    kind: str = "awgn"
    rician_a: float = 2.0
    snr_db: float = 10.0
    fading_mode: str = "per_symbol"
    equalize: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ChannelError(f"unknown channel kind {self.kind!r}; expected one of {KINDS}")
        if self.fading_mode not in FADING_MODES:
            raise ChannelError(f"unknown fading_mode {self.fading_mode!r}")
        if self.kind == "rician" and not self.rician_a > 0:
            raise ChannelError(f"rician channel needs rician_a > 0, got {self.rician_a}")
        # +inf is the noiseless sentinel
        if math.isnan(self.snr_db) or self.snr_db == -math.inf:
            raise ChannelError(f"snr_db must be finite or +inf, got {self.snr_db}")

    @property
    def fading(self) -> bool:
        return self.kind != "awgn"


@dataclass(frozen=True)
class RngStream:
    """Named, reproducible random stream.

    ``stream_id`` is ``(user, purpose)``; use ``user = -1`` for streams shared by
    all users (data shuffling, SNR sampling).  Every call to :meth:`torch` or
    :meth:`numpy` returns a fresh generator positioned at the start of the stream.
    """

    seed: int
    stream_id: tuple = (-1, "default")

    def _state(self) -> int:
        user, tag = self.stream_id
        ss = np.random.SeedSequence(self.seed, spawn_key=(int(user) + 1, zlib.crc32(str(tag).encode())))
        return int(ss.generate_state(1, np.uint64)[0] & ((1 << 63) - 1))

    def torch(self) -> torch.Generator:
        return torch.Generator().manual_seed(self._state())

    def numpy(self) -> np.random.Generator:
        return np.random.default_rng(self._state())


Rng = Union[RngStream, torch.Generator, None]


def _generator(rng: Rng):
    if isinstance(rng, RngStream):
        return rng.torch()
    return rng


@dataclass
class ChannelRealization:
    h: torch.Tensor  # complex gains, broadcastable over the complex symbols
    noise_variance: float  # total noise power per channel use

    def __post_init__(self):
        if self.noise_variance < 0:
            raise ChannelError("noise_variance must be nonnegative")


@dataclass
class ReceivedSignal:
    values: torch.Tensor
    realization: ChannelRealization
    noise: torch.Tensor  # additive noise as injected, before any equalization


def power_normalize(s, dim: int = -1) -> torch.Tensor:
    """Scale ``s`` to unit mean-square power along ``dim``."""
    s = torch.as_tensor(s, dtype=None if torch.is_tensor(s) else torch.float64)
    if s.numel() == 0 or s.shape[dim] < 1:
        raise DegenerateSignalError("cannot normalize an empty signal")
    ms = s.pow(2).mean(dim=dim, keepdim=True)
    if bool((ms == 0).any()):
        raise DegenerateSignalError("cannot power-normalize an all-zero signal")
    return s / ms.sqrt()


def snr_db_to_noise_variance(snr_db: float, signal_power: float = 1.0) -> float:
    if not signal_power > 0:
        raise ValueError(f"signal_power must be positive, got {signal_power}")
    if snr_db == math.inf:
        return 0.0
    return signal_power * 10.0 ** (-snr_db / 10.0)


def rician_parameters(a: float) -> tuple:
    """LOS mean and scatter standard deviation of the Rician gain; E|h|^2 = 1."""
    if not a > 0:
        raise ChannelError(f"Rician coefficient must be positive, got {a}")
    return math.sqrt(a / (a + 1.0)), math.sqrt(1.0 / (a + 1.0))


def _complex_normal(shape, generator, dtype) -> torch.Tensor:
    # CN(0, 1): each component carries variance 1/2
    parts = torch.randn(*shape, 2, generator=generator, dtype=dtype) * math.sqrt(0.5)
    return torch.view_as_complex(parts)


def sample_gain(spec: ChannelSpec, n_symbols: int, rng: Rng = None, batch_shape=(), snr_db=None,
                dtype=torch.float32) -> ChannelRealization:
    """Draw channel gains for ``n_symbols`` complex symbols per transmission."""
    if n_symbols < 1:
        raise ChannelError("n_symbols must be >= 1")
    snr = spec.snr_db if snr_db is None else snr_db
    # unit power per real symbol -> power 2 per complex symbol
    noise_variance = snr_db_to_noise_variance(snr, signal_power=2.0 if spec.fading else 1.0)
    cdtype = torch.complex128 if dtype == torch.float64 else torch.complex64
    if spec.kind == "awgn":
        return ChannelRealization(torch.ones((), dtype=cdtype), noise_variance)

    gen = _generator(rng)
    per = n_symbols if spec.fading_mode == "per_symbol" else 1
    shape = tuple(batch_shape) + (per,)
    scatter = _complex_normal(shape, gen, dtype)
    if spec.kind == "rayleigh":
        h = scatter
    else:
        mu, sigma = rician_parameters(spec.rician_a)
        h = mu + sigma * scatter
    return ChannelRealization(h, noise_variance)


def transmit(z: torch.Tensor, spec: ChannelSpec, rng: Rng = None, snr_db=None,
             realization: ChannelRealization = None) -> ReceivedSignal:
    """Send the real symbol vector(s) ``z`` (last axis = symbols) through one user's channel.

    With ``spec.equalize`` the receiver divides by the known gain, written as
    ``z + n / h`` so that a noiseless link returns ``z`` exactly.
    """
    gen = _generator(rng)
    if not spec.fading:
        real = realization or sample_gain(spec, z.shape[-1], gen, z.shape[:-1], snr_db, z.dtype)
        if real.noise_variance == 0:
            noise = torch.zeros_like(z)
        else:
            noise = torch.randn(z.shape, generator=gen, dtype=z.dtype) * math.sqrt(real.noise_variance)
        return ReceivedSignal(z + noise, real, noise)

    if z.shape[-1] % 2:
        raise ChannelError(f"fading channels pair real symbols into I/Q; got odd length {z.shape[-1]}")
    n_complex = z.shape[-1] // 2
    real = realization or sample_gain(spec, n_complex, gen, z.shape[:-1], snr_db, z.dtype)
    zc = torch.view_as_complex(z.reshape(*z.shape[:-1], n_complex, 2).contiguous())
    if real.noise_variance == 0:
        noise = torch.zeros_like(zc)
    else:
        noise = _complex_normal(zc.shape, gen, z.dtype) * math.sqrt(real.noise_variance)
    if spec.equalize:
        out = zc + noise / real.h
    else:
        out = real.h * zc + noise
    values = torch.view_as_real(out).reshape(z.shape)
    return ReceivedSignal(values, real, torch.view_as_real(noise).reshape(z.shape))
