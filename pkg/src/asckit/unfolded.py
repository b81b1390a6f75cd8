"""Unrolled shrinkage network with learnable per-stage step and threshold.

The network fixes the dictionary and the stage count N and exposes only the
2N scalars (t_k, rho_k) as trainable parameters:

    z0   = phi^H s
    z_k  = S_{rho_k}(z_{k-1} - t_k phi^H (phi z_{k-1} - s)),  k = 1..N
    shat = phi z_N
    loss = ||s - shat||_2 + lam * ||z_N||_1

Gradients are computed by hand-written reverse mode over this fixed graph.
Complex vectors are treated as pairs of reals: the cotangent G stored for a
complex array has dL/dRe in its real part and dL/dIm in its imaginary part,
so chaining through a complex-linear map A is multiplication by A^H and
real-valued directional derivatives read off as Re(G^H dz).

All forward/backward entry points accept a trailing batch axis on s; the
loss then averages over the batch, which is what training uses.
"""

import hashlib
import struct
import time
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .dictionary import Dictionary, apply, apply_adjoint
from .solvers import DivergenceError, soft_threshold

DEFAULT_STEP_INIT = 0.01
DEFAULT_THRESH_INIT = 0.005

_CKPT_MAGIC = b"ASCCKPT\x00"
_CKPT_VERSION = 1


class CheckpointMismatchError(ValueError):
    """Checkpoint was trained against a different dictionary geometry."""


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, batch: int):
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}")


@dataclass
class StageParams:
    """Per-stage step sizes and thresholds; one (t, rho) pair per stage."""

    step: np.ndarray
    thresh: np.ndarray

    def __post_init__(self):
        self.step = np.atleast_1d(np.asarray(self.step, dtype=np.float64))
        self.thresh = np.atleast_1d(np.asarray(self.thresh, dtype=np.float64))
        if self.step.shape != self.thresh.shape or self.step.ndim != 1:
            raise ValueError("step and thresh must be 1-D arrays of equal length")
        if self.step.size < 1:
            raise ValueError("need at least one stage")
        if not (np.isfinite(self.step).all() and np.isfinite(self.thresh).all()):
            raise ValueError("stage parameters must be finite")
        if (self.thresh < 0).any():
            raise ValueError("thresholds must be >= 0")

    @property
    def n_stages(self) -> int:
        return self.step.size

    @classmethod
    def default_init(cls, n_stages: int = 4) -> "StageParams":
        return cls(np.full(n_stages, DEFAULT_STEP_INIT),
                   np.full(n_stages, DEFAULT_THRESH_INIT))

    def copy(self) -> "StageParams":
        return StageParams(self.step.copy(), self.thresh.copy())


@dataclass
class StageRecord:
    """Intermediates of one stage, enough to replay its backward pass."""

    pre: np.ndarray       # x_k, before thresholding
    post: np.ndarray      # z_k
    grad_dir: np.ndarray  # phi^H (phi z_{k-1} - s)
    step: float
    thresh: float


@dataclass
class ForwardTape:
    z_init: np.ndarray
    stages: List[StageRecord]
    recon: np.ndarray

    @property
    def n_stages(self) -> int:
        return len(self.stages)


@dataclass
class GradientResult:
    d_step: np.ndarray
    d_thresh: np.ndarray
    kink_flagged: bool
    kink_margin: float


@dataclass
class TrainConfig:
    """Training recipe: L1 weight, schedule, and optimizer settings."""

    lam: float = 300.0
    epochs: int = 50
    batch_size: int = 16
    peak_lr: float = 2e-3
    weight_decay: float = 0.05
    warmup_frac: float = 0.3
    div_factor: float = 25.0        # initial lr = peak_lr / div_factor
    final_div_factor: float = 1e4   # final lr = peak_lr / final_div_factor
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    decay_thresh: bool = False   # weight decay pulls thresholds to 0, so off by default
    squared_residual: bool = False

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 0 < self.warmup_frac < 1:
            raise ValueError("warmup_frac must lie in (0, 1)")
        if self.peak_lr < 0 or self.weight_decay < 0:
            raise ValueError("peak_lr and weight_decay must be >= 0")


@dataclass
class TrainingLog:
    epochs: List[int] = field(default_factory=list)
    train_loss: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    lr: List[float] = field(default_factory=list)
    wallclock_ms: List[float] = field(default_factory=list)

    def append(self, epoch, train, val, lr, ms) -> None:
        self.epochs.append(epoch)
        self.train_loss.append(train)
        self.val_loss.append(val)
        self.lr.append(lr)
        self.wallclock_ms.append(ms)

    def to_csv(self, path) -> None:
        import csv
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss", "lr", "wallclock_ms"])
            for row in zip(self.epochs, self.train_loss, self.val_loss, self.lr, self.wallclock_ms):
                w.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3]), repr(row[4])])


def init_code(d: Union[Dictionary, np.ndarray], s: np.ndarray) -> np.ndarray:
    """Initial code z0 = phi^H s."""
    return apply_adjoint(d, s)


def forward_stage(z_prev: np.ndarray, s: np.ndarray, step: float, thresh: float,
                  d: Union[Dictionary, np.ndarray], stage: int = 0) -> Tuple[np.ndarray, StageRecord]:
    """One gradient step followed by the complex soft threshold."""
    g = apply_adjoint(d, apply(d, z_prev) - s)
    x = z_prev - step * g
    z = soft_threshold(x, thresh)
    if not np.isfinite(z).all():
        raise DivergenceError("unfolded", stage, "non-finite stage output")
    return z, StageRecord(x, z, g, float(step), float(thresh))


def forward_network(params: StageParams, d: Union[Dictionary, np.ndarray],
                    s: np.ndarray) -> Tuple[np.ndarray, np.ndarray, ForwardTape]:
    """Run initialization, N stages, and reconstruction; tape everything."""
    z = init_code(d, s)
    z_init = z
    records: List[StageRecord] = []
    for k in range(params.n_stages):
        z, rec = forward_stage(z, s, params.step[k], params.thresh[k], d, stage=k + 1)
        records.append(rec)
    recon = apply(d, z)
    return z, recon, ForwardTape(z_init, records, recon)


def _per_column_norm(a: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(np.abs(a) ** 2, axis=0))


def compute_loss(s: np.ndarray, recon: np.ndarray, z: np.ndarray, lam: float,
                 squared: bool = False) -> float:
    """Residual L2 norm (not squared unless asked) plus lam * sum |z_i|.

    With a batch axis the per-sample losses are averaged.
    """
    if lam < 0:
        raise ValueError("lam must be >= 0")
    s = np.asarray(s)
    if s.shape != np.shape(recon):
        raise ValueError("s and recon shapes differ")
    diff = np.asarray(recon) - s
    if diff.ndim == 1:
        res = float(np.linalg.norm(diff))
        res_term = res ** 2 if squared else res
        return res_term + lam * float(np.sum(np.abs(z)))
    res = _per_column_norm(diff)
    res_term = res ** 2 if squared else res
    l1 = np.sum(np.abs(z), axis=0)
    return float(np.mean(res_term + lam * l1))


def _csign(a: np.ndarray) -> np.ndarray:
    mag = np.abs(a)
    return a / np.where(mag > 0, mag, 1.0)


def backward(tape: ForwardTape, d: Union[Dictionary, np.ndarray], s: np.ndarray,
             lam: float, squared: bool = False, kink_tol: float = 1e-9) -> GradientResult:
    """Reverse-mode gradients of the loss w.r.t. every (t_k, rho_k).

    The shrinkage Jacobian is zero where |x| <= rho; elsewhere it splits the
    cotangent into radial and tangential parts of the (magnitude, phase)
    decomposition, and d z / d rho = -sign(x) on the active set. The L1 term
    contributes lam * sign(z) (zero at z = 0) and the residual-norm term
    (recon - s)/||recon - s||, guarded to 0 at zero residual. Entries whose
    magnitude sits within ``kink_tol`` of the threshold make the derivative
    one-sided; such runs are flagged since finite differences are invalid
    there.
    """
    s = np.asarray(s)
    n_batch = 1 if s.ndim == 1 else s.shape[1]
    n = tape.n_stages
    d_step = np.zeros(n)
    d_thresh = np.zeros(n)

    diff = tape.recon - s
    if squared:
        g_recon = (2.0 / n_batch) * diff
    else:
        if diff.ndim == 1:
            res = np.linalg.norm(diff)
            g_recon = diff / res if res > 0 else np.zeros_like(diff)
        else:
            res = _per_column_norm(diff)
            g_recon = diff / np.where(res > 0, res, 1.0)
            g_recon[:, res == 0] = 0.0
            g_recon = g_recon / n_batch

    z_final = tape.stages[-1].post if tape.stages else tape.z_init
    g_z = (lam / n_batch) * _csign(z_final) + apply_adjoint(d, g_recon)

    kink_margin = np.inf
    for idx in range(n - 1, -1, -1):
        rec = tape.stages[idx]
        mag = np.abs(rec.pre)
        kink_margin = min(kink_margin, float(np.min(np.abs(mag - rec.thresh))))
        active = mag > rec.thresh
        safe = np.where(active, mag, 1.0)
        sgn = rec.pre / safe
        radial = np.real(np.conj(sgn) * g_z)

        # dL/drho: the active set moves by -sign(x) as rho grows.
        d_thresh[idx] = -float(np.sum(np.real(np.conj(g_z) * sgn)[active]))
        # Transpose shrinkage Jacobian: (1 - rho/|x|) I + (rho/|x|) radial projector.
        g_x = np.where(active, (1.0 - rec.thresh / safe) * g_z + (rec.thresh / safe) * radial * sgn, 0.0)
        # dL/dt through x = z_prev - t * g.
        d_step[idx] = -float(np.sum(np.real(np.conj(g_x) * rec.grad_dir)))
        # Through the hermitian map z_prev -> (I - t phi^H phi) z_prev.
        g_z = g_x - rec.step * apply_adjoint(d, apply(d, g_x))

    return GradientResult(d_step, d_thresh, bool(kink_margin < kink_tol), kink_margin)


def lr_schedule(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """One-cycle learning rate: cosine warmup to the peak, cosine decay down.

    Starts at peak_lr / div_factor, reaches peak_lr exactly at the end of the
    warmup fraction, and anneals to peak_lr / final_div_factor at the last
    step.
    """
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    lr0 = cfg.peak_lr / cfg.div_factor
    lr_final = cfg.peak_lr / cfg.final_div_factor
    pct = step / (total_steps - 1) if total_steps > 1 else 1.0
    if pct <= cfg.warmup_frac:
        p = pct / cfg.warmup_frac
        return lr0 + (cfg.peak_lr - lr0) * 0.5 * (1.0 - np.cos(np.pi * p))
    p = (pct - cfg.warmup_frac) / (1.0 - cfg.warmup_frac)
    return lr_final + (cfg.peak_lr - lr_final) * 0.5 * (1.0 + np.cos(np.pi * p))


def _as_sample_matrix(dataset: Sequence[np.ndarray]) -> np.ndarray:
    cols = [np.asarray(img).reshape(-1, order="F") for img in dataset]
    return np.stack(cols, axis=1).astype(np.complex128)


def _dataset_loss(params: StageParams, d, samples: np.ndarray, cfg: TrainConfig) -> float:
    z, recon, _ = forward_network(params, d, samples)
    return compute_loss(samples, recon, z, cfg.lam, cfg.squared_residual)


def train(dataset: Sequence[np.ndarray], cfg: TrainConfig, d: Union[Dictionary, np.ndarray],
          init_params: Optional[StageParams] = None, n_stages: int = 4,
          val_dataset: Optional[Sequence[np.ndarray]] = None) -> Tuple[StageParams, TrainingLog]:
    """Optimize the 2N stage parameters with decoupled-weight-decay Adam.

    Shuffling, batching, and the one-cycle schedule are all derived from
    ``cfg.seed``, so identical inputs give identical final parameters.
    Weight decay is applied to the step sizes only (thresholds decay toward
    0 and would disable sparsification; set ``decay_thresh`` to override).
    Thresholds are clamped to >= 0 after every update. Per-epoch losses are
    evaluated at the end-of-epoch parameters over the full split, so each
    logged value equals compute_loss at the logged state.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    samples = _as_sample_matrix(dataset)
    val_samples = _as_sample_matrix(val_dataset) if val_dataset else None

    params = init_params.copy() if init_params is not None else StageParams.default_init(n_stages)
    n = params.n_stages
    theta = np.concatenate([params.step, params.thresh])
    decay_mask = np.concatenate([np.ones(n), np.ones(n) if cfg.decay_thresh else np.zeros(n)])

    n_samples = samples.shape[1]
    n_batches = (n_samples + cfg.batch_size - 1) // cfg.batch_size
    total_steps = cfg.epochs * n_batches

    m1 = np.zeros_like(theta)
    m2 = np.zeros_like(theta)
    rng = np.random.default_rng(cfg.seed)
    log = TrainingLog()
    step_count = 0
    lr = 0.0
    t_start = time.perf_counter()

    for epoch in range(cfg.epochs):
        perm = rng.permutation(n_samples)
        for b in range(n_batches):
            idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            batch = samples[:, idx]
            z, recon, tape = forward_network(params, d, batch)
            loss = compute_loss(batch, recon, z, cfg.lam, cfg.squared_residual)
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch, b)
            grads = backward(tape, d, batch, cfg.lam, cfg.squared_residual)
            g = np.concatenate([grads.d_step, grads.d_thresh])

            lr = lr_schedule(step_count, total_steps, cfg)
            step_count += 1
            m1 = cfg.beta1 * m1 + (1 - cfg.beta1) * g
            m2 = cfg.beta2 * m2 + (1 - cfg.beta2) * g * g
            m1_hat = m1 / (1 - cfg.beta1 ** step_count)
            m2_hat = m2 / (1 - cfg.beta2 ** step_count)
            theta = theta - lr * m1_hat / (np.sqrt(m2_hat) + cfg.eps)
            theta = theta - lr * cfg.weight_decay * decay_mask * theta
            theta[n:] = np.maximum(theta[n:], 0.0)
            params = StageParams(theta[:n].copy(), theta[n:].copy())

        train_loss = _dataset_loss(params, d, samples, cfg)
        val_loss = _dataset_loss(params, d, val_samples, cfg) if val_samples is not None else float("nan")
        log.append(epoch, train_loss, val_loss, lr,
                   (time.perf_counter() - t_start) * 1e3)
    return params, log


def extend_stages(params: StageParams, n_stages: int) -> StageParams:
    """Append identity stages (t = 0, rho = 0); the network output is unchanged."""
    extra = n_stages - params.n_stages
    if extra < 0:
        raise ValueError("cannot shrink a stage stack")
    return StageParams(np.concatenate([params.step, np.zeros(extra)]),
                       np.concatenate([params.thresh, np.zeros(extra)]))


def train_stage_sweep(dataset: Sequence[np.ndarray], val_dataset: Sequence[np.ndarray],
                      cfg: TrainConfig, d: Union[Dictionary, np.ndarray],
                      stage_counts: Sequence[int],
                      step_init: Optional[float] = None,
                      thresh_init: float = DEFAULT_THRESH_INIT) -> dict:
    """Train one network per stage count for a depth ablation.

    Steps initialize at 1/L (spectral bound) unless overridden: the
    handcrafted default is above the stability bound on small dictionaries
    and deep stacks then blow up at initialization. Since a deeper network
    contains every shallower one (extra stages can be the identity), each
    freshly trained network must beat the previous one extended with
    identity stages on the validation split, else the extension is kept.
    """
    if step_init is None:
        if isinstance(d, Dictionary):
            step_init = 1.0 / d.step_bound()
        else:
            from .dictionary import spectral_step_bound
            step_init = 1.0 / spectral_step_bound(d)
    val_samples = _as_sample_matrix(val_dataset)

    def val_residual(params):
        _, recon, _ = forward_network(params, d, val_samples)
        return float(np.mean(_per_column_norm(recon - val_samples)))

    result = {}
    prev: Optional[StageParams] = None
    for n in sorted(stage_counts):
        init = StageParams(np.full(n, step_init), np.full(n, thresh_init))
        cand, _ = train(dataset, cfg, d, init_params=init)
        if prev is not None:
            fallback = extend_stages(prev, n)
            if val_residual(fallback) <= val_residual(cand):
                cand = fallback
        result[n] = cand
        prev = cand
    return result


def save_checkpoint(path, params: StageParams, d: Dictionary) -> None:
    """Versioned binary: stage count, dictionary fingerprint, 2N float64."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<8sII", _CKPT_MAGIC, _CKPT_VERSION, params.n_stages))
        fh.write(d.fingerprint())
        fh.write(params.step.astype("<f8").tobytes())
        fh.write(params.thresh.astype("<f8").tobytes())


def load_checkpoint(path, d: Dictionary) -> StageParams:
    """Load stage parameters; refuses a mismatched dictionary geometry."""
    with open(path, "rb") as fh:
        head = fh.read(struct.calcsize("<8sII"))
        if len(head) != struct.calcsize("<8sII"):
            raise ValueError(f"{path}: truncated checkpoint")
        magic, version, n_stages = struct.unpack("<8sII", head)
        if magic != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        if version != _CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        fingerprint = fh.read(32)
        if fingerprint != d.fingerprint():
            raise CheckpointMismatchError(
                f"{path}: checkpoint was trained against a different dictionary geometry")
        payload = np.frombuffer(fh.read(16 * n_stages), dtype="<f8")
    if payload.size != 2 * n_stages:
        raise ValueError(f"{path}: truncated parameter payload")
    return StageParams(payload[:n_stages].copy(), payload[n_stages:].copy())
