"""ULA steering vectors, DFT beam codebooks and beamformed channel gains.

The array is a half-wavelength uniform linear array, so the phase ramp of a
steering vector is pi * n * sin(angle) across antenna index n. Angles are
measured from broadside.
"""

from dataclasses import dataclass

import numpy as np

LOS = "los"
NLOS = "nlos"


def steering_vector(angle, num_antennas):
    """Array response a(angle): entry n = exp(i*pi*n*sin(angle)), n = 0..N-1."""
    if not np.isfinite(angle):
        raise ValueError(f"steering angle must be finite, got {angle!r}")
    if num_antennas < 1:
        raise ValueError("num_antennas must be >= 1")
    n = np.arange(num_antennas)
    return np.exp(1j * np.pi * n * np.sin(angle))


@dataclass(frozen=True)
class DftCodebook:
    """Unitary DFT precoding matrix; column j steers a beam to beam_angles[j]."""

    num_antennas: int
    columns: np.ndarray  # (N, N) complex, unit-norm columns
    beam_angles: np.ndarray  # (N,) radians

    def codeword(self, j):
        return self.columns[:, j]


def build_dft_codebook(num_antennas):
    """DFT codebook on the shifted sine grid sin(phi_j) = (2j + 1 - N) / N.

    The shifted grid keeps beams off endfire and makes W^H W = I exact up to
    rounding, since the column phase ramps are orthogonal DFT tones.
    """
    n = num_antennas
    if n < 1:
        raise ValueError("num_antennas must be >= 1")
    j = np.arange(n)
    sines = (2.0 * j + 1.0 - n) / n
    angles = np.arcsin(sines)
    rows = np.arange(n)[:, None]
    columns = np.exp(1j * np.pi * rows * sines[None, :]) / np.sqrt(n)
    return DftCodebook(num_antennas=n, columns=columns, beam_angles=angles)


@dataclass(frozen=True)
class PropagationRay:
    """One propagation path: direct (los) or single-bounce specular (nlos)."""

    kind: str
    length_m: float
    departure_angle: float  # radians from broadside, in [-pi/2, pi/2]
    amplitude: float  # linear field amplitude, >= 0
    phase: float  # radians in [0, 2*pi)


@dataclass(frozen=True)
class MultipathChannel:
    """Sum of rays at one receive point; empty ray list means full blockage."""

    rays: tuple
    num_antennas: int

    def vector(self):
        """h = sum over rays of amplitude * e^{i phase} * a(departure_angle)."""
        h = np.zeros(self.num_antennas, dtype=np.complex128)
        for ray in self.rays:
            h += ray.amplitude * np.exp(1j * ray.phase) * steering_vector(
                ray.departure_angle, self.num_antennas
            )
        return h


def equivalent_gain(channel, codeword):
    """Beamformed power gain |h^H w|^2; zero when the channel has no rays."""
    codeword = np.asarray(codeword)
    if codeword.shape != (channel.num_antennas,):
        raise ValueError(
            f"codeword length {codeword.shape} does not match "
            f"{channel.num_antennas} antennas"
        )
    if not channel.rays:
        return 0.0
    h = channel.vector()
    return float(np.abs(np.vdot(h, codeword)) ** 2)


def gain_to_db(gain):
    """10*log10(gain); gain 0 maps to -inf, which normalization floors to 0."""
    if gain < 0:
        raise ValueError(f"gain must be >= 0, got {gain}")
    if gain == 0:
        return float("-inf")
    return float(10.0 * np.log10(gain))
