"""Readouts and benchmarks: codes -> scatterer lists, residuals, timing."""

import csv
import hashlib
import json
import math
import time
from dataclasses import dataclass, is_dataclass, asdict
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from .dictionary import Dictionary, apply
from .solvers import AmpConfig, DivergenceError, IstaConfig, amp_solve, ista_solve, omp_solve
from .unfolded import StageParams, forward_network


@dataclass
class ExtractedAsc:
    """One recovered scatterer: position, raw complex coefficient, column."""

    x: float
    y: float
    amplitude: complex
    grid_index: int


@dataclass
class BenchmarkRow:
    method: str
    residual_loss: float
    inference_time: float  # mean seconds per image
    config_fingerprint: str
    note: str = ""


def extract_ascs(z: np.ndarray, d: Dictionary,
                 magnitude_floor: Optional[float] = None) -> List[ExtractedAsc]:
    """All code entries above the floor, strongest first, mapped to positions.

    The default floor is 0.1 * max|z|, a visualization threshold; the
    reported amplitude is the raw coefficient (no frequency-exponent
    correction, which is out of scope of the position dictionary).
    """
    z = np.asarray(z)
    if magnitude_floor is None:
        magnitude_floor = 0.1 * float(np.max(np.abs(z))) if z.size else 0.0
    if magnitude_floor < 0:
        raise ValueError("magnitude_floor must be >= 0")
    mags = np.abs(z)
    idx = np.nonzero(mags > magnitude_floor)[0]
    order = idx[np.argsort(-mags[idx], kind="stable")]
    out = []
    for k in order:
        x, y = d.column_coords(int(k))
        out.append(ExtractedAsc(x, y, complex(z[k]), int(k)))
    return out


def residual_loss(s: np.ndarray, recon: np.ndarray) -> float:
    """L2 norm of (s - recon); the primary reconstruction-quality metric."""
    s = np.asarray(s)
    recon = np.asarray(recon)
    if s.shape != recon.shape:
        raise ValueError("shape mismatch")
    return float(np.linalg.norm((s - recon).ravel()))


def config_fingerprint(cfg) -> str:
    """Short stable digest of a config object, for benchmark rows."""
    if is_dataclass(cfg) and not isinstance(cfg, type):
        payload = {"type": type(cfg).__name__, **asdict(cfg)}
    elif isinstance(cfg, StageParams):
        payload = {"type": "StageParams", "step": list(cfg.step), "thresh": list(cfg.thresh)}
    else:
        payload = {"type": type(cfg).__name__, "repr": repr(cfg)}
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def _make_runner(method: str, d: Dictionary, cfg):
    if method == "ista":
        return lambda s: ista_solve(d, s, cfg, check_step=False)[0]
    if method == "omp":
        sparsity = cfg.sparsity if hasattr(cfg, "sparsity") else int(cfg)
        return lambda s: omp_solve(d, s, sparsity)
    if method == "amp":
        return lambda s: amp_solve(d, s, cfg)[0]
    if method == "unfolded":
        return lambda s: forward_network(cfg, d, s)[0]
    raise ValueError(f"unknown method {method!r}")


def run_benchmark(dataset: Sequence[np.ndarray], methods: Sequence[str],
                  d: Dictionary, configs: Dict[str, object],
                  repeats: int = 1) -> List[BenchmarkRow]:
    """Mean residual loss and mean per-image wall clock for each method.

    Methods run sequentially for fair timing; a warm-up solve on the first
    image is excluded from the clock. A diverging method produces a flagged
    row (infinite residual) instead of aborting the run. ``repeats`` > 1
    repeats the timed pass and keeps the fastest mean, damping scheduler
    jitter without touching the residuals.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    vecs = [np.asarray(img).reshape(-1, order="F") for img in dataset]
    rows = []
    for method in methods:
        cfg = configs[method]
        runner = _make_runner(method, d, cfg)
        try:
            runner(vecs[0])  # warm-up, untimed
            residuals = []
            best_mean = math.inf
            for _ in range(max(1, repeats)):
                total_ns = 0
                residuals = []
                for s in vecs:
                    t0 = time.perf_counter_ns()
                    z = runner(s)
                    total_ns += time.perf_counter_ns() - t0
                    residuals.append(residual_loss(s, apply(d, z)))
                best_mean = min(best_mean, total_ns / len(vecs) / 1e9)
            rows.append(BenchmarkRow(method, float(np.mean(residuals)), best_mean,
                                     config_fingerprint(cfg)))
        except DivergenceError as err:
            rows.append(BenchmarkRow(method, math.inf, math.nan,
                                     config_fingerprint(cfg), note=f"diverged: {err}"))
    return rows


def run_stage_sweep(dataset: Sequence[np.ndarray], d: Dictionary,
                    params_by_stage: Dict[int, StageParams],
                    repeats: int = 1) -> List[BenchmarkRow]:
    """Benchmark trained networks of increasing depth (ablation layout)."""
    rows = []
    for n in sorted(params_by_stage):
        sub = run_benchmark(dataset, ["unfolded"], d, {"unfolded": params_by_stage[n]},
                            repeats=repeats)[0]
        rows.append(BenchmarkRow(f"unfolded-{n}", sub.residual_loss, sub.inference_time,
                                 sub.config_fingerprint, sub.note))
    return rows


def write_benchmark_csv(rows: Sequence[BenchmarkRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "residual_loss", "inference_time_s", "config_fingerprint", "note"])
        for r in rows:
            w.writerow([r.method, repr(r.residual_loss), repr(r.inference_time),
                        r.config_fingerprint, r.note])


def format_benchmark_table(rows: Sequence[BenchmarkRow]) -> str:
    """Aligned plain-text table: methods across, metrics down."""
    headers = ["Method"] + [r.method for r in rows]
    loss_row = ["Residual Loss"] + [f"{r.residual_loss:.4f}" for r in rows]
    time_row = ["Inference Time (s)"] + [f"{r.inference_time:.4f}" for r in rows]
    widths = [max(len(col[i]) for col in (headers, loss_row, time_row))
              for i in range(len(headers))]
    lines = []
    for cells in (headers, loss_row, time_row):
        lines.append("  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip())
    return "\n".join(lines) + "\n"
