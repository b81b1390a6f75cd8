"""Classical sparse solvers over a fixed dictionary.

Iterative shrinkage (proximal gradient descent with a complex soft
threshold), greedy orthogonal matching pursuit, and approximate message
passing. All solvers accept either a Dictionary or a plain complex matrix
and are deterministic given identical inputs.
"""

import csv
import time
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Tuple, Union

import numpy as np

from .dictionary import Dictionary, apply, apply_adjoint, spectral_step_bound, _as_matrix


class DivergenceError(RuntimeError):
    """Iterates left the finite range; carries the failing iteration."""

    def __init__(self, method: str, iteration: int, detail: str = ""):
        self.method = method
        self.iteration = iteration
        msg = f"{method} diverged at iteration {iteration}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


@dataclass
class SolverTrace:
    """Per-iteration record: composite objective, residual, L1 mass, wall clock."""

    method: str
    iters: List[int] = field(default_factory=list)
    objective: List[float] = field(default_factory=list)
    residual_l2: List[float] = field(default_factory=list)
    l1_norm: List[float] = field(default_factory=list)
    wallclock_ns: List[int] = field(default_factory=list)

    def append(self, it: int, obj: float, res: float, l1: float, ns: int) -> None:
        self.iters.append(it)
        self.objective.append(obj)
        self.residual_l2.append(res)
        self.l1_norm.append(l1)
        self.wallclock_ns.append(ns)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "objective", "residual_l2", "l1_norm", "wallclock_ns"])
            for row in zip(self.iters, self.objective, self.residual_l2,
                           self.l1_norm, self.wallclock_ns):
                w.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3]), row[4]])


@dataclass
class IstaConfig:
    step: float
    thresh: float
    max_iters: int
    stop_tol: float = 0.0  # relative change in z; 0 disables early stop

    def __post_init__(self):
        if self.step <= 0:
            raise ValueError("step must be positive")
        if self.thresh < 0:
            raise ValueError("thresh must be >= 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.stop_tol < 0:
            raise ValueError("stop_tol must be >= 0")


@dataclass
class AmpConfig:
    damping: float = 0.1     # change rate applied to the iterate update
    max_iters: int = 100
    threshold_scale: float = 1.4  # scalar threshold = scale * ||r|| / sqrt(m)
    stop_tol: float = 1e-8

    def __post_init__(self):
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.threshold_scale < 0:
            raise ValueError("threshold_scale must be >= 0")


def soft_threshold(x: np.ndarray, rho: float) -> np.ndarray:
    """Complex shrinkage: keep the phase, shrink the magnitude by rho.

    Entries with |x| <= rho map to exactly 0; rho = 0 is the identity.
    """
    if rho < 0:
        raise ValueError("rho must be >= 0")
    x = np.asarray(x)
    mag = np.abs(x)
    safe = np.where(mag > 0, mag, 1.0)
    return x * (np.maximum(mag - rho, 0.0) / safe)


def _l1(z: np.ndarray) -> float:
    return float(np.sum(np.abs(z)))


def ista_solve(d: Union[Dictionary, np.ndarray], s: np.ndarray, cfg: IstaConfig,
               lam: float = 0.0, z0: Optional[np.ndarray] = None,
               check_step: bool = True) -> Tuple[np.ndarray, SolverTrace]:
    """Proximal gradient descent z <- S_rho(z - t phi^H (phi z - s)).

    Starts from zero (or ``z0``) and records the composite objective
    ||phi z - s||_2 + lam * ||z||_1 each iteration. Step sizes at or above
    2/L, with L the top eigenvalue of phi^H phi, draw a warning since the
    iteration then amplifies; non-finite iterates raise DivergenceError.
    """
    phi = _as_matrix(d)
    if check_step and isinstance(d, Dictionary):
        bound = d.step_bound()
        if bound > 0 and cfg.step >= 2.0 / bound:
            warnings.warn(
                f"step {cfg.step:g} >= 2/L = {2.0 / bound:g}; iteration may diverge",
                RuntimeWarning, stacklevel=2)

    z = np.zeros(phi.shape[1], dtype=np.complex128) if z0 is None else np.array(z0, dtype=np.complex128)
    trace = SolverTrace("ista")
    t0 = time.perf_counter_ns()
    for it in range(1, cfg.max_iters + 1):
        r = apply(d, z) - s
        z_new = soft_threshold(z - cfg.step * apply_adjoint(d, r), cfg.thresh)
        if not np.isfinite(z_new).all():
            raise DivergenceError("ista", it, f"step {cfg.step:g}")
        r_new = apply(d, z_new) - s
        res = float(np.linalg.norm(r_new))
        trace.append(it, res + lam * _l1(z_new), res, _l1(z_new),
                     time.perf_counter_ns() - t0)
        delta = np.linalg.norm(z_new - z)
        z = z_new
        if cfg.stop_tol > 0 and delta <= cfg.stop_tol * max(np.linalg.norm(z), 1e-300):
            break
    return z, trace


def omp_solve(d: Union[Dictionary, np.ndarray], s: np.ndarray, sparsity: int,
              tikhonov: float = 1e-12) -> np.ndarray:
    """Orthogonal matching pursuit.

    Parameters
    ----------
    d : Dictionary or ndarray
        Dictionary whose columns are candidate responses.
    s : ndarray
        Measurement vector, length = row count of the dictionary.
    sparsity : int
        Number of atoms to select (K). K = 0 returns the zero code.
    tikhonov : float
        Ridge weight for the fallback solve when the active-set system is
        rank deficient.

    Returns
    -------
    z : ndarray
        Code with at most K nonzeros; the residual is orthogonal to the
        selected columns up to least-squares accuracy.
    """
    phi = _as_matrix(d)
    m, n = phi.shape
    if not 0 <= sparsity <= n:
        raise ValueError(f"sparsity must lie in [0, {n}]")
    z = np.zeros(n, dtype=np.complex128)
    if sparsity == 0:
        return z

    s = np.asarray(s, dtype=np.complex128)
    r = s.copy()
    s_norm = np.linalg.norm(s)
    support: List[int] = []
    coef = np.zeros(0, dtype=np.complex128)
    for _ in range(sparsity):
        if np.linalg.norm(r) <= 1e-14 * max(s_norm, 1e-300):
            break
        corr = np.abs(phi.conj().T @ r)
        corr[support] = 0.0
        k = int(np.argmax(corr))
        if corr[k] == 0.0:
            break
        support.append(k)
        active = phi[:, support]
        coef, _, rank, _ = np.linalg.lstsq(active, s, rcond=None)
        if rank < len(support):
            warnings.warn("rank-deficient active set; using ridge-regularized solve",
                          RuntimeWarning, stacklevel=2)
            gram = active.conj().T @ active + tikhonov * np.eye(len(support))
            coef = np.linalg.solve(gram, active.conj().T @ s)
        r = s - active @ coef
    z[support] = coef
    return z


def amp_solve(d: Union[Dictionary, np.ndarray], s: np.ndarray, cfg: AmpConfig,
              lam: float = 0.0) -> Tuple[np.ndarray, SolverTrace]:
    """Approximate message passing with the Onsager-corrected residual.

    The threshold each iteration is a scalar calibrated to the residual,
    tau = threshold_scale * ||r|| / sqrt(m); ``damping`` blends the new
    iterate with the previous one. Tuned for dictionaries with i.i.d.
    entries; on structured dictionaries divergence is expected behavior
    and raises DivergenceError rather than returning garbage.
    """
    phi = _as_matrix(d)
    m, n = phi.shape
    s = np.asarray(s, dtype=np.complex128)
    s_norm = np.linalg.norm(s)

    z = np.zeros(n, dtype=np.complex128)
    r = s.copy()
    trace = SolverTrace("amp")
    t0 = time.perf_counter_ns()
    for it in range(1, cfg.max_iters + 1):
        pseudo = z + phi.conj().T @ r
        tau = cfg.threshold_scale * np.linalg.norm(r) / np.sqrt(m)
        z_new = soft_threshold(pseudo, tau)
        z_new = (1.0 - cfg.damping) * z + cfg.damping * z_new
        # Onsager term: average divergence of the complex shrinkage over the
        # active set, each complex coordinate counting two real dimensions.
        mag = np.abs(pseudo)
        active = mag > tau
        onsager = float(np.sum(1.0 - tau / (2.0 * mag[active]))) / m if active.any() else 0.0
        r_new = s - phi @ z_new + onsager * r

        if not np.isfinite(z_new).all() or np.linalg.norm(z_new) > 1e6 * max(s_norm, 1e-300):
            raise DivergenceError("amp", it, "structured dictionaries are outside AMP's regime")
        res = float(np.linalg.norm(s - phi @ z_new))
        trace.append(it, res + lam * _l1(z_new), res, _l1(z_new),
                     time.perf_counter_ns() - t0)
        delta = np.linalg.norm(z_new - z)
        z, r = z_new, r_new
        if delta <= cfg.stop_tol * max(np.linalg.norm(z), 1e-300):
            break
    return z, trace
