"""Point-scatterer forward model for complex-valued radar imaging.

A target is modelled as a sum of localized scattering centers. Each center
contributes a complex response over the measured frequency/aspect grid:

    E(f, phi) = A * (j f / f_c)^alpha * exp(-j 4 pi f / c * (x cos phi + y sin phi))

with complex amplitude A, frequency-dependence exponent alpha, and position
(x, y) in meters (range / cross-range). Summing contributions and applying a
centered 2-D inverse DFT yields the complex image a focused radar would form
of the same scene, which is the ground truth for every downstream test.
"""

import numpy as np
from dataclasses import dataclass
from typing import List, Optional, Sequence, Union

C_LIGHT = 299_792_458.0  # propagation velocity (m/s)

# Plausible X-band defaults; every field is configurable.
DEFAULT_F_CENTER = 10e9
DEFAULT_BANDWIDTH = 500e6
DEFAULT_SYNTH_ANGLE = np.deg2rad(2.86)


@dataclass
class RadarGrid:
    """Frequency/aspect sampling of the measurement.

    ``f`` holds ``n_freq`` frequencies spanning the band around ``f_center``;
    ``phi`` holds ``n_aspect`` aspect angles spanning ``synth_angle`` (radians),
    both uniform and increasing.
    """

    f_center: float = DEFAULT_F_CENTER
    bandwidth: float = DEFAULT_BANDWIDTH
    synth_angle: float = DEFAULT_SYNTH_ANGLE
    n_freq: int = 16
    n_aspect: int = 16

    def __post_init__(self):
        if self.n_freq < 2 or self.n_aspect < 2:
            raise ValueError("need at least 2 samples per axis")
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        if self.f_center <= self.bandwidth / 2:
            raise ValueError("f_center must exceed bandwidth/2 (band must stay positive)")
        if self.synth_angle <= 0:
            raise ValueError("synth_angle must be positive")

    @property
    def f(self) -> np.ndarray:
        return np.linspace(self.f_center - self.bandwidth / 2,
                           self.f_center + self.bandwidth / 2, self.n_freq)

    @property
    def phi(self) -> np.ndarray:
        return np.linspace(-self.synth_angle / 2, self.synth_angle / 2, self.n_aspect)

    @property
    def df(self) -> float:
        return self.bandwidth / (self.n_freq - 1)

    @property
    def dphi(self) -> float:
        return self.synth_angle / (self.n_aspect - 1)

    @property
    def shape(self):
        return (self.n_freq, self.n_aspect)


@dataclass
class SpatialGrid:
    """Uniform spatial grid of candidate scatterer positions.

    Stored as (first coordinate, spacing) per axis so both symmetric grids and
    DFT-bin-aligned grids (asymmetric by one sample when the count is even)
    are representable exactly.
    """

    n_x: int
    n_y: int
    x0: float
    dx: float
    y0: float
    dy: float

    def __post_init__(self):
        if self.n_x < 1 or self.n_y < 1:
            raise ValueError("need at least one sample per axis")
        if self.dx <= 0 or self.dy <= 0:
            raise ValueError("grid spacing must be positive")

    @classmethod
    def centered(cls, n_x: int, n_y: int, x_extent: float, y_extent: float) -> "SpatialGrid":
        """Grid symmetric about the origin covering [-extent/2, extent/2]."""
        dx = x_extent / (n_x - 1) if n_x > 1 else x_extent
        dy = y_extent / (n_y - 1) if n_y > 1 else y_extent
        x0 = -x_extent / 2 if n_x > 1 else 0.0
        y0 = -y_extent / 2 if n_y > 1 else 0.0
        return cls(n_x, n_y, x0, dx, y0, dy)

    @classmethod
    def aligned_to(cls, grid: RadarGrid) -> "SpatialGrid":
        """Grid whose cells coincide with the image pixels of ``signal_to_image``.

        Spacing follows the DFT bin geometry: dx = c / (2 df P) along range,
        dy = c / (2 f_c dphi Q) along cross-range, with sample 0 at the index
        the centered transform maps to pixel 0. An on-grid scatterer then
        peaks at exactly one pixel.
        """
        p, q = grid.n_freq, grid.n_aspect
        dx = C_LIGHT / (2 * grid.df * p)
        dy = C_LIGHT / (2 * grid.f_center * grid.dphi * q)
        return cls(p, q, -(p // 2) * dx, dx, -(q // 2) * dy, dy)

    @property
    def x(self) -> np.ndarray:
        return self.x0 + self.dx * np.arange(self.n_x)

    @property
    def y(self) -> np.ndarray:
        return self.y0 + self.dy * np.arange(self.n_y)

    @property
    def x_extent(self) -> float:
        return self.dx * (self.n_x - 1)

    @property
    def y_extent(self) -> float:
        return self.dy * (self.n_y - 1)

    def contains(self, x: float, y: float) -> bool:
        xs, ys = self.x, self.y
        return xs[0] <= x <= xs[-1] and ys[0] <= y <= ys[-1]


@dataclass
class AscParams:
    """One scattering center: complex amplitude, frequency exponent, position."""

    amplitude: complex
    alpha: float = 0.0
    x: float = 0.0
    y: float = 0.0

    def __post_init__(self):
        self.amplitude = complex(self.amplitude)
        if not np.isfinite([self.amplitude.real, self.amplitude.imag,
                            self.alpha, self.x, self.y]).all():
            raise ValueError("scatterer parameters must be finite")
        if not -1.0 <= self.alpha <= 1.0:
            raise ValueError("alpha outside [-1, 1]")


@dataclass
class SignalMatrix:
    """P x Q complex response sampled on a RadarGrid."""

    entries: np.ndarray
    grid: RadarGrid

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.complex128)
        if self.entries.shape != self.grid.shape:
            raise ValueError(f"entries shape {self.entries.shape} does not match grid {self.grid.shape}")
        if not np.isfinite(self.entries).all():
            raise ValueError("signal matrix contains non-finite entries")

    @property
    def energy(self) -> float:
        return float(np.sum(np.abs(self.entries) ** 2))


def vec(a: np.ndarray) -> np.ndarray:
    """Column-stack a P x Q matrix (frequency index varies fastest)."""
    return np.asarray(a).reshape(-1, order="F")


def unvec(v: np.ndarray, shape) -> np.ndarray:
    """Inverse of ``vec`` for the given 2-D shape."""
    return np.asarray(v).reshape(shape, order="F")


def evaluate_asc(params: AscParams, grid: RadarGrid) -> SignalMatrix:
    """Response of a single scattering center on the measurement grid.

    Entry (p, q) is A * (j f_p / f_c)^alpha * exp(-j 4 pi f_p / c *
    (x cos phi_q + y sin phi_q)). The complex power uses the principal
    branch; non-finite output is rejected.
    """
    f = grid.f[:, None]
    phi = grid.phi[None, :]
    amp = params.amplitude * (1j * f / grid.f_center) ** params.alpha
    path = params.x * np.cos(phi) + params.y * np.sin(phi)
    entries = amp * np.exp(-1j * (4 * np.pi / C_LIGHT) * f * path)
    if not np.isfinite(entries).all():
        raise ValueError("non-finite response; scatterer parameters out of range")
    return SignalMatrix(entries, grid)


def synthesize_signal(scene: Sequence[AscParams], grid: RadarGrid,
                      noise_sigma: float = 0.0,
                      rng: Union[None, int, np.random.Generator] = None) -> SignalMatrix:
    """Superpose scatterer responses and add circular complex Gaussian noise.

    ``noise_sigma`` is the standard deviation per complex entry. Passing the
    same seed (or an equally seeded Generator) reproduces the output
    bit-for-bit. An empty scene with zero noise yields the zero matrix.
    """
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    total = np.zeros(grid.shape, dtype=np.complex128)
    for sc in scene:
        total += evaluate_asc(sc, grid).entries
    if noise_sigma > 0:
        gen = np.random.default_rng(rng)
        noise = gen.standard_normal(grid.shape) + 1j * gen.standard_normal(grid.shape)
        total = total + noise * (noise_sigma / np.sqrt(2.0))
    return SignalMatrix(total, grid)


def signal_to_image(sig: Union[SignalMatrix, np.ndarray]) -> np.ndarray:
    """Centered unitary 2-D inverse DFT of the signal matrix.

    Unitary normalization keeps signal and image energies equal; the shift
    puts the response of a scatterer at x = y = 0 on the center pixel
    (P//2, Q//2). Output has the same P x Q shape.
    """
    entries = getattr(sig, "entries", sig)
    return np.fft.fftshift(np.fft.ifft2(entries, norm="ortho"))
