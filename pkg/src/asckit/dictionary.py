"""Position-parameterized dictionaries for sparse scatterer recovery.

The signal-domain dictionary stacks, column by column, the pure-phase
response of a unit scatterer at every spatial grid cell. Mapping each
column through the centered unitary inverse DFT gives the image-domain
dictionary actually consumed by the solvers: its columns are the point
responses the imaging step produces, so recovering a sparse coefficient
vector over the columns is a position-matching problem.

Conventions (fixed, relied on by the file format):
  * vec() of a P x Q matrix stacks columns, frequency index fastest.
  * column k covers spatial cell (ix, iy) = (k // n_y, k % n_y), i.e. the
    y index varies fastest within x.
  * columns are NOT re-normalized; with the unitary transform each one has
    L2 norm sqrt(P*Q). Use spectral_step_bound to pick stable step sizes.
"""

import hashlib
import struct
import warnings
from dataclasses import dataclass, field
from typing import Optional, Tuple, Union

import numpy as np

from .asc_model import RadarGrid, SpatialGrid, C_LIGHT

DEFAULT_MEMORY_BUDGET = 1 << 30  # bytes; one dense complex matrix

_DICT_MAGIC = b"ASCDICT\x00"
_DICT_VERSION = 1
_COLUMN_ORDER_TAG = b"YWITHINX"  # y index fastest within x
_HEADER_FMT = "<8sI4I7d8s"


class DictionaryMemoryError(MemoryError):
    """Requested dictionary exceeds the configured memory budget."""

    def __init__(self, required_bytes: int, budget: int, what: str):
        self.required_bytes = required_bytes
        super().__init__(
            f"{what} requires {required_bytes:,} bytes but the budget is "
            f"{budget:,} bytes; raise max_bytes or shrink the grids"
        )


def column_index(ix: int, iy: int, n_y: int) -> int:
    return ix * n_y + iy


def column_cell(k: int, n_y: int) -> Tuple[int, int]:
    return k // n_y, k % n_y


@dataclass
class Dictionary:
    """Image-domain dictionary with its grid metadata.

    ``phi`` is dense (P*Q) x (n_x*n_y) complex128; apply/apply_adjoint are
    the only access paths solvers use, so a matrix-free variant can slot in
    later without touching callers.
    """

    phi: np.ndarray
    grid: RadarGrid
    spatial: SpatialGrid
    _step_bound: Optional[float] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        rows = self.grid.n_freq * self.grid.n_aspect
        cols = self.spatial.n_x * self.spatial.n_y
        if self.phi.shape != (rows, cols):
            raise ValueError(f"phi shape {self.phi.shape} does not match grids ({rows}, {cols})")
        if not np.isfinite(self.phi).all():
            raise ValueError("dictionary contains non-finite entries")

    @property
    def n_rows(self) -> int:
        return self.phi.shape[0]

    @property
    def n_cols(self) -> int:
        return self.phi.shape[1]

    def column_coords(self, k: int) -> Tuple[float, float]:
        """Spatial position (x, y) covered by column k."""
        if not 0 <= k < self.n_cols:
            raise IndexError(f"column {k} out of range")
        ix, iy = column_cell(k, self.spatial.n_y)
        return float(self.spatial.x[ix]), float(self.spatial.y[iy])

    def header_bytes(self) -> bytes:
        g, sp = self.grid, self.spatial
        return struct.pack(
            _HEADER_FMT, _DICT_MAGIC, _DICT_VERSION,
            g.n_freq, g.n_aspect, sp.n_x, sp.n_y,
            g.f_center, g.bandwidth, g.synth_angle,
            sp.x0, sp.dx, sp.y0, sp.dy,
            _COLUMN_ORDER_TAG,
        )

    def fingerprint(self) -> bytes:
        """32-byte digest of the grid geometry; guards checkpoint loading."""
        return hashlib.sha256(self.header_bytes()).digest()

    def step_bound(self) -> float:
        """Cached spectral_step_bound of this dictionary."""
        if self._step_bound is None:
            self._step_bound = spectral_step_bound(self)
        return self._step_bound


def _as_matrix(d: Union[Dictionary, np.ndarray]) -> np.ndarray:
    return d.phi if isinstance(d, Dictionary) else np.asarray(d)


def build_signal_dictionary(grid: RadarGrid, spatial: SpatialGrid,
                            max_bytes: int = DEFAULT_MEMORY_BUDGET) -> np.ndarray:
    """Dense signal-domain dictionary, one unit-modulus phase column per cell.

    Column k is vec(exp(-j 4 pi f / c (x cos phi + y sin phi))) for the cell
    coordinates of column k. Refuses to allocate past ``max_bytes``.
    """
    p, q = grid.n_freq, grid.n_aspect
    required = 16 * p * q * spatial.n_x * spatial.n_y
    if required > max_bytes:
        raise DictionaryMemoryError(required, max_bytes, "signal dictionary")

    f = grid.f[:, None, None]
    cos_phi = np.cos(grid.phi)[None, :, None]
    sin_phi = np.sin(grid.phi)[None, :, None]
    y_row = spatial.y[None, None, :]
    out = np.empty((p * q, spatial.n_x * spatial.n_y), dtype=np.complex128)
    for ix, x in enumerate(spatial.x):  # one block of n_y columns per x sample
        path = x * cos_phi + y_row * sin_phi
        block = np.exp(-1j * (4 * np.pi / C_LIGHT) * f * path)
        out[:, ix * spatial.n_y:(ix + 1) * spatial.n_y] = block.reshape(p * q, spatial.n_y, order="F")
    return out


def build_image_dictionary(phi_signal: np.ndarray, grid: RadarGrid, spatial: SpatialGrid,
                           max_bytes: int = DEFAULT_MEMORY_BUDGET) -> Dictionary:
    """Map every signal-domain column through the centered unitary inverse DFT.

    Each column is devectorized to P x Q, transformed like signal_to_image,
    and revectorized. On grids aligned via SpatialGrid.aligned_to the result
    is strongly concentrated: each column peaks at the pixel of its own cell.
    """
    p, q = grid.n_freq, grid.n_aspect
    n_cols = spatial.n_x * spatial.n_y
    if phi_signal.shape != (p * q, n_cols):
        raise ValueError(f"signal dictionary shape {phi_signal.shape} does not match grids")
    required = 16 * p * q * n_cols
    if required > max_bytes:
        raise DictionaryMemoryError(required, max_bytes, "image dictionary")

    stack = phi_signal.reshape(p, q, n_cols, order="F")
    images = np.fft.fftshift(np.fft.ifft2(stack, axes=(0, 1), norm="ortho"), axes=(0, 1))
    return Dictionary(images.reshape(p * q, n_cols, order="F"), grid, spatial)


def build_dictionary(grid: RadarGrid, spatial: SpatialGrid,
                     max_bytes: int = DEFAULT_MEMORY_BUDGET) -> Dictionary:
    """Convenience: signal-domain build followed by the image-domain map."""
    return build_image_dictionary(build_signal_dictionary(grid, spatial, max_bytes),
                                  grid, spatial, max_bytes)


def apply(d: Union[Dictionary, np.ndarray], z: np.ndarray) -> np.ndarray:
    """Forward product phi @ z. ``z`` may carry a trailing batch axis."""
    phi = _as_matrix(d)
    z = np.asarray(z)
    if z.shape[0] != phi.shape[1]:
        raise ValueError(f"code length {z.shape[0]} does not match {phi.shape[1]} columns")
    return phi @ z


def apply_adjoint(d: Union[Dictionary, np.ndarray], r: np.ndarray) -> np.ndarray:
    """Adjoint product phi^H @ r. ``r`` may carry a trailing batch axis."""
    phi = _as_matrix(d)
    r = np.asarray(r)
    if r.shape[0] != phi.shape[0]:
        raise ValueError(f"vector length {r.shape[0]} does not match {phi.shape[0]} rows")
    return phi.conj().T @ r


def spectral_step_bound(d: Union[Dictionary, np.ndarray], n_iter: int = 100,
                        seed: int = 0, return_residual: bool = False):
    """Upper estimate of the largest eigenvalue of phi^H phi.

    Power iteration with a seeded start, fixed iteration count. Returns the
    Rayleigh quotient plus its residual norm, which upper-bounds the top
    eigenvalue once the iteration has locked on. Gradient steps are stable
    for step sizes below 2 / bound.
    """
    phi = _as_matrix(d)
    gen = np.random.default_rng(seed)
    v = gen.standard_normal(phi.shape[1]) + 1j * gen.standard_normal(phi.shape[1])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(n_iter):
        w = phi.conj().T @ (phi @ v)
        lam = float(np.real(np.vdot(v, w)))
        nw = np.linalg.norm(w)
        if nw == 0:  # phi == 0
            return (0.0, 0.0) if return_residual else 0.0
        v = w / nw
    w = phi.conj().T @ (phi @ v)
    lam = float(np.real(np.vdot(v, w)))
    residual = float(np.linalg.norm(w - lam * v))
    bound = lam + residual
    return (bound, residual) if return_residual else bound


def save_dictionary(path, d: Dictionary) -> None:
    """Write header + row-major interleaved re/im float64 payload."""
    payload = np.empty((d.n_rows, d.n_cols, 2), dtype="<f8")
    payload[:, :, 0] = d.phi.real
    payload[:, :, 1] = d.phi.imag
    with open(path, "wb") as fh:
        fh.write(d.header_bytes())
        payload.tofile(fh)


def load_dictionary(path) -> Dictionary:
    header_size = struct.calcsize(_HEADER_FMT)
    with open(path, "rb") as fh:
        header = fh.read(header_size)
        if len(header) != header_size:
            raise ValueError(f"{path}: truncated dictionary header")
        (magic, version, p, q, n_x, n_y,
         f_center, bandwidth, synth_angle,
         x0, dx, y0, dy, order_tag) = struct.unpack(_HEADER_FMT, header)
        if magic != _DICT_MAGIC:
            raise ValueError(f"{path}: not a dictionary file")
        if version != _DICT_VERSION:
            raise ValueError(f"{path}: unsupported dictionary version {version}")
        if order_tag != _COLUMN_ORDER_TAG:
            raise ValueError(f"{path}: unknown column order tag {order_tag!r}")
        payload = np.fromfile(fh, dtype="<f8")
    rows, cols = p * q, n_x * n_y
    if payload.size != 2 * rows * cols:
        raise ValueError(f"{path}: payload size {payload.size} does not match header dims")
    payload = payload.reshape(rows, cols, 2)
    phi = payload[:, :, 0] + 1j * payload[:, :, 1]
    grid = RadarGrid(f_center, bandwidth, synth_angle, p, q)
    spatial = SpatialGrid(n_x, n_y, x0, dx, y0, dy)
    return Dictionary(phi, grid, spatial)
