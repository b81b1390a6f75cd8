import math

import numpy as np
import pytest

from asckit import AscParams, IstaConfig, StageParams, signal_to_image, synthesize_signal, vec
from asckit.dictionary import apply
from asckit.metrics import (BenchmarkRow, extract_ascs, format_benchmark_table,
                            residual_loss, run_benchmark, run_stage_sweep,
                            write_benchmark_csv)
from asckit.solvers import ista_solve
from asckit.unfolded import compute_loss, forward_network, init_code


class TestExtractAscs:
    def test_zero_code(self, dict8):
        assert extract_ascs(np.zeros(64, complex), dict8, 0.0) == []

    def test_single_entry(self, dict8):
        z = np.zeros(64, complex)
        z[13] = 5.0
        out = extract_ascs(z, dict8, 0.0)
        assert len(out) == 1
        asc = out[0]
        assert asc.grid_index == 13
        assert asc.amplitude == 5.0
        assert (asc.x, asc.y) == dict8.column_coords(13)

    def test_sorted_by_magnitude(self, dict8):
        z = np.zeros(64, complex)
        z[[3, 40, 22]] = [1.0, 3.0j, -2.0]
        out = extract_ascs(z, dict8, 0.5)
        assert [a.grid_index for a in out] == [40, 22, 3]

    def test_planted_scene_extraction(self, radar16, spatial16, dict16, rng):
        cells = rng.choice(256, 3, replace=False)
        scene = [AscParams(float(rng.uniform(1, 2)), 0.0,
                           float(spatial16.x[c // 16]), float(spatial16.y[c % 16]))
                 for c in cells]
        s = vec(signal_to_image(synthesize_signal(scene, radar16, 0.0)))
        t = 0.9 / dict16.step_bound()
        z, _ = ista_solve(dict16, s, IstaConfig(t, 1e-5, 400))
        floor = 0.5 * min(abs(sc.amplitude) for sc in scene)
        out = extract_ascs(z, dict16, floor)
        got = {(a.x, a.y) for a in out}
        want = {(sc.x, sc.y) for sc in scene}
        assert got == want

    def test_count_nonincreasing_in_floor(self, dict8, rng):
        z = rng.standard_normal(64) + 1j * rng.standard_normal(64)
        counts = [len(extract_ascs(z, dict8, f)) for f in (0.0, 0.5, 1.0, 2.0, 5.0)]
        assert all(b <= a for a, b in zip(counts, counts[1:]))

    def test_default_floor_is_relative(self, dict8):
        z = np.zeros(64, complex)
        z[[1, 2]] = [10.0, 0.5]  # 0.5 < 0.1 * 10
        out = extract_ascs(z, dict8)
        assert [a.grid_index for a in out] == [1]


class TestResidualLoss:
    def test_perfect(self, rng):
        s = rng.standard_normal(10) + 1j * rng.standard_normal(10)
        assert residual_loss(s, s) == 0.0

    def test_unit_norm_vs_zero(self, rng):
        s = rng.standard_normal(10) + 1j * rng.standard_normal(10)
        s /= np.linalg.norm(s)
        assert residual_loss(s, np.zeros_like(s)) == pytest.approx(1.0, rel=1e-12)

    def test_matches_naive_sum(self, rng):
        s = rng.standard_normal(12) + 1j * rng.standard_normal(12)
        recon = rng.standard_normal(12) + 1j * rng.standard_normal(12)
        naive = math.sqrt(sum(abs(a - b) ** 2 for a, b in zip(s, recon)))
        assert residual_loss(s, recon) == pytest.approx(naive, rel=1e-12)

    def test_equals_loss_with_zero_code(self, rng):
        s = rng.standard_normal(12) + 1j * rng.standard_normal(12)
        recon = rng.standard_normal(12) + 1j * rng.standard_normal(12)
        for lam in (0.0, 1.0, 300.0):
            assert residual_loss(s, recon) == compute_loss(s, recon, np.zeros(4, complex), lam)


def _tiny_dataset(radar8, spatial8, n=4):
    gen = np.random.default_rng(0)
    images = []
    for _ in range(n):
        cells = gen.choice(64, 2, replace=False)
        scene = [AscParams(1.0, 0.0, float(spatial8.x[c // 8]), float(spatial8.y[c % 8]))
                 for c in cells]
        img = signal_to_image(synthesize_signal(scene, radar8, 0.0))
        images.append(img / np.linalg.norm(img))
    return images


class TestBenchmark:
    def test_single_method_row(self, radar8, spatial8, dict8):
        data = _tiny_dataset(radar8, spatial8)
        cfg = IstaConfig(0.001, 1e-4, 20)
        rows1 = run_benchmark(data, ["ista"], dict8, {"ista": cfg})
        rows2 = run_benchmark(data, ["ista"], dict8, {"ista": cfg})
        assert len(rows1) == 1
        assert rows1[0].method == "ista"
        assert rows1[0].residual_loss == rows2[0].residual_loss  # times may jitter
        assert rows1[0].inference_time > 0

    def test_frozen_unfolded_equals_ista_from_same_start(self, radar8, spatial8, dict8):
        # 4 frozen stages vs 4 classical iterations from phi^H s
        data = _tiny_dataset(radar8, spatial8)
        params = StageParams.default_init(4)
        row_u = run_benchmark(data, ["unfolded"], dict8, {"unfolded": params})[0]
        residuals = []
        for img in data:
            s = vec(img)
            z, _ = ista_solve(dict8, s, IstaConfig(0.01, 0.005, 4),
                              z0=init_code(dict8, s), check_step=False)
            residuals.append(residual_loss(s, apply(dict8, z)))
        assert row_u.residual_loss == pytest.approx(np.mean(residuals), rel=1e-12)

    def test_divergence_becomes_flagged_row(self, radar8, spatial8, dict8):
        data = _tiny_dataset(radar8, spatial8)
        with np.errstate(all="ignore"):
            rows = run_benchmark(data, ["ista"], dict8,
                                 {"ista": IstaConfig(1e6, 0.0, 10000)})
        assert rows[0].residual_loss == math.inf
        assert "diverged" in rows[0].note

    def test_stage_sweep_rows(self, radar8, spatial8, dict8):
        data = _tiny_dataset(radar8, spatial8)
        by_stage = {2: StageParams.default_init(2), 4: StageParams.default_init(4)}
        rows = run_stage_sweep(data, dict8, by_stage)
        assert [r.method for r in rows] == ["unfolded-2", "unfolded-4"]

    def test_csv_and_table(self, radar8, spatial8, dict8, tmp_path):
        data = _tiny_dataset(radar8, spatial8)
        rows = run_benchmark(data, ["ista", "omp"], dict8,
                             {"ista": IstaConfig(0.001, 1e-4, 10), "omp": 3})
        path = tmp_path / "bench.csv"
        write_benchmark_csv(rows, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0].startswith("method,residual_loss,inference_time_s")
        assert len(lines) == 3
        table = format_benchmark_table(rows)
        t_lines = table.strip().splitlines()
        assert t_lines[0].split()[:1] == ["Method"]
        assert t_lines[1].startswith("Residual Loss")
        assert t_lines[2].startswith("Inference Time (s)")
        assert "ista" in t_lines[0] and "omp" in t_lines[0]
