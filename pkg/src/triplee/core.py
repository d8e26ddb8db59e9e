"""Numerical substrate: 2-D DFT with amplitude/phase split and path-keyed RNG streams."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np


class InvalidInputError(ValueError):
    """Raised when numeric input is non-finite or malformed."""


@dataclass(frozen=True)
class Spectrum:
    amplitude: np.ndarray
    phase: np.ndarray

    @property
    def height(self) -> int:
        return self.amplitude.shape[0]

    @property
    def width(self) -> int:
        return self.amplitude.shape[1]

    def complex(self) -> np.ndarray:
        return self.amplitude * np.exp(1j * self.phase)


def _check_plane(plane) -> np.ndarray:
    arr = np.asarray(plane, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InvalidInputError(f"expected a non-empty 2-D plane, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("plane contains non-finite values")
    return arr


def dft2(plane) -> Spectrum:
    """Unnormalized forward 2-D DFT, split into amplitude and phase.

    Phase lies in (-pi, pi]; ``np.angle`` returns [-pi, pi], so -pi is folded
    onto +pi.
    """
    arr = _check_plane(plane)
    freq = np.fft.fft2(arr)
    phase = np.angle(freq)
    phase[phase == -np.pi] = np.pi
    return Spectrum(np.abs(freq), phase)


def idft2_with_residue(spec: Spectrum) -> tuple[np.ndarray, float]:
    """Inverse transform; returns the real plane and the max imaginary magnitude."""
    amp = np.asarray(spec.amplitude, dtype=np.float64)
    if np.any(amp < 0):
        raise InvalidInputError("amplitude must be nonnegative")
    if not (np.all(np.isfinite(amp)) and np.all(np.isfinite(spec.phase))):
        raise InvalidInputError("spectrum contains non-finite values")
    out = np.fft.ifft2(amp * np.exp(1j * np.asarray(spec.phase, dtype=np.float64)))
    residue = float(np.max(np.abs(out.imag))) if out.size else 0.0
    return out.real.copy(), residue


def idft2(spec: Spectrum) -> np.ndarray:
    return idft2_with_residue(spec)[0]


def _label_key(label) -> int:
    digest = hashlib.blake2b(repr(label).encode(), digest_size=4).digest()
    return int.from_bytes(digest, "little")


@dataclass(frozen=True)
class RngStream:
    """Immutable handle on a seeded random stream identified by (seed, path).

    Children are derived with :meth:`fork`; the numpy generator returned by
    :meth:`generator` is always freshly constructed, so the same handle
    replays the same draws.
    """

    seed: int
    path: tuple = field(default=())

    def fork(self, *labels) -> "RngStream":
        return RngStream(self.seed, self.path + tuple(labels))

    def seed_sequence(self) -> np.random.SeedSequence:
        key = tuple(_label_key(label) for label in self.path)
        return np.random.SeedSequence(entropy=int(self.seed) & (2**64 - 1), spawn_key=key)

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(self.seed_sequence()))


def fork(stream: RngStream, label) -> RngStream:
    return stream.fork(label)
