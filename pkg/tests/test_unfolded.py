import numpy as np
import pytest

from conftest import gradient_check_problem

import asckit
from asckit import (AscParams, IstaConfig, StageParams, TrainConfig,
                    signal_to_image, synthesize_signal, vec)
from asckit.dictionary import apply, apply_adjoint
from asckit.solvers import ista_solve
from asckit.unfolded import (CheckpointMismatchError, backward, compute_loss,
                             extend_stages, forward_network, forward_stage,
                             init_code, load_checkpoint, lr_schedule,
                             save_checkpoint, train, train_stage_sweep)


class TestStageParams:
    def test_default_init_values(self):
        p = StageParams.default_init(4)
        assert p.n_stages == 4
        assert np.all(p.step == 0.01) and np.all(p.thresh == 0.005)
        assert p.step.size + p.thresh.size == 8

    def test_rejects_negative_threshold(self):
        with pytest.raises(ValueError):
            StageParams([0.01], [-0.001])

    def test_extend_is_identity(self, dict8, rng):
        s = rng.standard_normal(64) + 1j * rng.standard_normal(64)
        p = StageParams([0.003, 0.002], [0.004, 0.001])
        z1, r1, _ = forward_network(p, dict8, s)
        z2, r2, _ = forward_network(extend_stages(p, 5), dict8, s)
        assert np.array_equal(z1, z2) and np.array_equal(r1, r2)


class TestInitCode:
    def test_zero(self, dict8):
        assert np.all(init_code(dict8, np.zeros(64, complex)) == 0)

    def test_column_input(self, dict8):
        z0 = init_code(dict8, dict8.phi[:, 20])
        assert z0[20] == pytest.approx(np.linalg.norm(dict8.phi[:, 20]) ** 2, rel=1e-12)

    def test_matches_naive_adjoint(self, dict8, rng):
        s = rng.standard_normal(64) + 1j * rng.standard_normal(64)
        expected = np.array([np.sum(np.conj(dict8.phi[:, j]) * s) for j in range(64)])
        assert np.allclose(init_code(dict8, s), expected, rtol=1e-12)


class TestForward:
    def test_identity_stage(self, dict8, rng):
        z_prev = rng.standard_normal(64) + 1j * rng.standard_normal(64)
        s = rng.standard_normal(64) + 1j * rng.standard_normal(64)
        z, rec = forward_stage(z_prev, s, 0.0, 0.0, dict8)
        assert np.array_equal(z, z_prev)

    def test_stage_equals_one_classical_iteration(self, dict8, rng):
        z_prev = rng.standard_normal(64) + 1j * rng.standard_normal(64)
        s = rng.standard_normal(64) + 1j * rng.standard_normal(64)
        z_stage, _ = forward_stage(z_prev, s, 0.01, 0.005, dict8)
        z_ista, _ = ista_solve(dict8, s, IstaConfig(0.01, 0.005, 1), z0=z_prev,
                               check_step=False)
        assert np.array_equal(z_stage, z_ista)

    def test_huge_threshold_kills_stage(self, dict8, rng):
        z_prev = rng.standard_normal(64) + 1j * rng.standard_normal(64)
        s = rng.standard_normal(64) + 1j * rng.standard_normal(64)
        z, _ = forward_stage(z_prev, s, 0.01, 1e9, dict8)
        assert np.all(z == 0)

    def test_zero_input_network(self, dict8):
        z, recon, tape = forward_network(StageParams.default_init(4), dict8,
                                         np.zeros(64, complex))
        assert np.all(z == 0) and np.all(recon == 0)
        assert tape.n_stages == 4

    def test_frozen_equivalence_with_classical_solver(self, dict16, rng):
        # untrained network == 4 classical iterations started from phi^H s
        for _ in range(5):
            s = rng.standard_normal(256) + 1j * rng.standard_normal(256)
            s /= np.linalg.norm(s)
            z_net, _, _ = forward_network(StageParams.default_init(4), dict16, s)
            z0 = init_code(dict16, s)
            z_cls, _ = ista_solve(dict16, s, IstaConfig(0.01, 0.005, 4), z0=z0,
                                  check_step=False)
            denom = np.linalg.norm(z_cls)
            assert np.linalg.norm(z_net - z_cls) <= 1e-12 * denom

    def test_batch_axis_matches_loop(self, dict8, rng):
        batch = rng.standard_normal((64, 3)) + 1j * rng.standard_normal((64, 3))
        p = StageParams.default_init(2)
        z_b, recon_b, _ = forward_network(p, dict8, batch)
        for j in range(3):
            z_j, recon_j, _ = forward_network(p, dict8, batch[:, j])
            assert np.allclose(z_b[:, j], z_j, rtol=1e-13)
            assert np.allclose(recon_b[:, j], recon_j, rtol=1e-13)


class TestComputeLoss:
    def test_perfect_reconstruction(self):
        s = np.ones(4, complex)
        assert compute_loss(s, s, np.zeros(4, complex), 300.0) == 0.0

    def test_hand_evaluated_l1_term(self):
        z = np.zeros(8, complex)
        z[3] = 3.0 + 4.0j
        loss = compute_loss(np.zeros(4, complex), np.zeros(4, complex), z, 300.0)
        assert loss == pytest.approx(1500.0, rel=1e-15)

    def test_residual_homogeneity(self, rng):
        s = rng.standard_normal(16) + 1j * rng.standard_normal(16)
        recon = rng.standard_normal(16) + 1j * rng.standard_normal(16)
        base = compute_loss(s, recon, np.zeros(4, complex), 0.0)
        scaled = compute_loss(3.5 * s, 3.5 * recon, np.zeros(4, complex), 0.0)
        assert scaled == pytest.approx(3.5 * base, rel=1e-13)

    def test_squared_mode(self, rng):
        s = rng.standard_normal(16) + 1j * rng.standard_normal(16)
        recon = np.zeros(16, complex)
        assert (compute_loss(s, recon, np.zeros(4, complex), 0.0, squared=True)
                == pytest.approx(np.linalg.norm(s) ** 2, rel=1e-13))

    def test_batch_mean(self, rng):
        s = rng.standard_normal((16, 4)) + 1j * rng.standard_normal((16, 4))
        recon = rng.standard_normal((16, 4)) + 1j * rng.standard_normal((16, 4))
        z = rng.standard_normal((8, 4)) + 1j * rng.standard_normal((8, 4))
        batch = compute_loss(s, recon, z, 2.0)
        per = [compute_loss(s[:, j], recon[:, j], z[:, j], 2.0) for j in range(4)]
        assert batch == pytest.approx(np.mean(per), rel=1e-13)


class TestBackward:
    def test_dead_network_has_zero_step_gradients(self, dict8, rng):
        s = rng.standard_normal(64) + 1j * rng.standard_normal(64)
        p = StageParams([0.01] * 3, [1e9] * 3)
        _, _, tape = forward_network(p, dict8, s)
        result = backward(tape, dict8, s, 0.5)
        assert np.all(result.d_step == 0)
        assert np.all(result.d_thresh == 0)

    def test_symbolic_scalar_oracle(self):
        sympy = pytest.importorskip("sympy")
        sp = sympy

        t_sym, rho_sym = sp.symbols("t rho", real=True, positive=True)

        def cadd(p, q):
            return (p[0] + q[0], p[1] + q[1])

        def csub(p, q):
            return (p[0] - q[0], p[1] - q[1])

        def cmul(p, q):
            return (p[0] * q[0] - p[1] * q[1], p[0] * q[1] + p[1] * q[0])

        def cconj(p):
            return (p[0], -p[1])

        def cscale(a, p):
            return (a * p[0], a * p[1])

        def cabs(p):
            return sp.sqrt(p[0] ** 2 + p[1] ** 2)

        phi = [(sp.Rational(6, 10), sp.Rational(-3, 10)),
               (sp.Rational(-2, 10), sp.Rational(8, 10))]
        s = [(sp.Rational(11, 10), sp.Rational(4, 10)),
             (sp.Rational(-5, 10), sp.Rational(9, 10))]
        lam = sp.Rational(7, 10)

        z0 = (sp.Integer(0), sp.Integer(0))
        for ph, si in zip(phi, s):
            z0 = cadd(z0, cmul(cconj(ph), si))
        g = (sp.Integer(0), sp.Integer(0))
        for ph, si in zip(phi, s):
            u = csub(cmul(ph, z0), si)
            g = cadd(g, cmul(cconj(ph), u))
        x = csub(z0, cscale(t_sym, g))
        shrink = 1 - rho_sym / cabs(x)  # valid on the |x| > rho branch
        z1 = cscale(shrink, x)
        resid_sq = sp.Integer(0)
        for ph, si in zip(phi, s):
            shat = cmul(ph, z1)
            diff = csub(si, shat)
            resid_sq += diff[0] ** 2 + diff[1] ** 2
        loss = sp.sqrt(resid_sq) + lam * cabs(z1)

        t0, rho0 = 0.05, 0.1
        subs = {t_sym: sp.Float(t0, 30), rho_sym: sp.Float(rho0, 30)}
        want_dt = float(sp.diff(loss, t_sym).evalf(subs=subs))
        want_drho = float(sp.diff(loss, rho_sym).evalf(subs=subs))

        phi_n = np.array([[0.6 - 0.3j], [-0.2 + 0.8j]])
        s_n = np.array([1.1 + 0.4j, -0.5 + 0.9j])
        params = StageParams([t0], [rho0])
        _, _, tape = forward_network(params, phi_n, s_n)
        assert np.abs(tape.stages[0].pre[0]) > rho0  # on the smooth branch
        result = backward(tape, phi_n, s_n, 0.7)
        assert result.d_step[0] == pytest.approx(want_dt, rel=1e-10)
        assert result.d_thresh[0] == pytest.approx(want_drho, rel=1e-10)

    def test_matches_finite_differences(self, dict8):
        # central differences, h = 1e-6; draws whose pre-threshold magnitudes
        # sit within 50h of a threshold are excluded (the perturbation would
        # cross the kink and the finite difference itself is then wrong)
        checked = 0
        for seed in range(30):
            rel, margin = gradient_check_problem(seed, dict8)
            if margin < 5e-5:
                continue
            checked += 1
            assert rel < 1e-4, f"seed {seed}: rel err {rel:.2e}"
        assert checked >= 20

    def test_zero_residual_guard(self, dict8):
        # recon == s: the norm gradient is defined as 0 there
        s = np.zeros(64, complex)
        p = StageParams([0.01], [0.005])
        _, _, tape = forward_network(p, dict8, s)
        result = backward(tape, dict8, s, 0.0)
        assert np.all(np.isfinite(result.d_step))
        assert np.all(result.d_step == 0)

    def test_kink_flag(self, dict8, rng):
        s = rng.standard_normal(64) + 1j * rng.standard_normal(64)
        p = StageParams([0.01], [0.005])
        _, _, tape = forward_network(p, dict8, s)
        # force a magnitude exactly onto the threshold
        mag = np.abs(tape.stages[0].pre[5])
        tape.stages[0].thresh = float(mag) + 1e-12
        result = backward(tape, dict8, s, 0.0)
        assert result.kink_flagged


class TestLrSchedule:
    CFG = TrainConfig(peak_lr=2e-3, warmup_frac=0.3)

    def test_initial_divisor(self):
        assert lr_schedule(0, 11, self.CFG) == pytest.approx(2e-3 / 25, rel=1e-12)

    def test_peak_at_end_of_warmup(self):
        # total 11 steps puts the warmup boundary exactly on step 3
        assert lr_schedule(3, 11, self.CFG) == pytest.approx(2e-3, rel=1e-12)

    def test_final_value(self):
        assert lr_schedule(10, 11, self.CFG) == pytest.approx(2e-3 / 1e4, rel=1e-12)

    def test_monotone_up_then_down(self):
        values = [lr_schedule(k, 101, self.CFG) for k in range(101)]
        peak = int(np.argmax(values))
        assert peak == 30
        assert all(a < b for a, b in zip(values[:peak], values[1:peak + 1]))
        assert all(a > b for a, b in zip(values[peak:], values[peak + 1:]))

    def test_bounds(self):
        with pytest.raises(ValueError):
            lr_schedule(11, 11, self.CFG)


def _single_atom_dataset(radar8, spatial8, n=1):
    scene = [AscParams(1.0, 0.0, float(spatial8.x[2]), float(spatial8.y[5]))]
    img = signal_to_image(synthesize_signal(scene, radar8, 0.0))
    img = img / np.linalg.norm(img)
    return [img] * n


class TestTrain:
    def test_zero_lr_leaves_params_unchanged(self, radar8, spatial8, dict8):
        data = _single_atom_dataset(radar8, spatial8, 4)
        cfg = TrainConfig(lam=0.0, epochs=3, batch_size=2, peak_lr=0.0, seed=0)
        params, _ = train(data, cfg, dict8, n_stages=2)
        init = StageParams.default_init(2)
        assert np.array_equal(params.step, init.step)
        assert np.array_equal(params.thresh, init.thresh)

    def test_loss_strictly_decreases_early(self, radar8, spatial8, dict8):
        data = _single_atom_dataset(radar8, spatial8, 1)
        cfg = TrainConfig(lam=0.0, epochs=12, batch_size=1, peak_lr=1e-3, seed=0)
        _, log = train(data, cfg, dict8, n_stages=1)
        first = log.train_loss[:10]
        assert all(b < a for a, b in zip(first, first[1:]))

    def test_default_recipe_values(self):
        cfg = TrainConfig()
        assert (cfg.lam, cfg.epochs, cfg.batch_size) == (300.0, 50, 16)
        assert cfg.peak_lr == 2e-3 and cfg.weight_decay == 0.05

    def test_deterministic_given_seed(self, radar8, spatial8, dict8):
        data = _single_atom_dataset(radar8, spatial8, 6)
        cfg = TrainConfig(lam=0.01, epochs=4, batch_size=2, seed=42)
        p1, log1 = train(data, cfg, dict8, n_stages=2)
        p2, log2 = train(data, cfg, dict8, n_stages=2)
        assert np.array_equal(p1.step, p2.step)
        assert np.array_equal(p1.thresh, p2.thresh)
        assert log1.train_loss == log2.train_loss

    def test_thresholds_stay_nonnegative(self, radar8, spatial8, dict8):
        data = _single_atom_dataset(radar8, spatial8, 6)
        cfg = TrainConfig(lam=0.0, epochs=10, batch_size=3, peak_lr=0.05,
                          decay_thresh=True, seed=1)
        params, _ = train(data, cfg, dict8, n_stages=3)
        assert np.all(params.thresh >= 0)

    def test_log_matches_compute_loss(self, radar8, spatial8, dict8):
        data = _single_atom_dataset(radar8, spatial8, 3)
        cfg = TrainConfig(lam=0.2, epochs=3, batch_size=2, seed=0)
        params, log = train(data, cfg, dict8, n_stages=2, val_dataset=data[:1])
        samples = np.stack([vec(im) for im in data], axis=1)
        z, recon, _ = forward_network(params, dict8, samples)
        assert log.train_loss[-1] == compute_loss(samples, recon, z, 0.2)
        val = np.stack([vec(im) for im in data[:1]], axis=1)
        zv, rv, _ = forward_network(params, dict8, val)
        assert log.val_loss[-1] == compute_loss(val, rv, zv, 0.2)

    def test_empty_dataset_rejected(self, dict8):
        with pytest.raises(ValueError):
            train([], TrainConfig(), dict8)

    def test_trained_network_recovers_planted_support(self, radar16, spatial16, dict16):
        gen = np.random.default_rng(17)
        images, scenes = [], []
        for _ in range(40):
            cells = gen.choice(256, 3, replace=False)
            scene = [AscParams(float(gen.uniform(1, 2)) * np.exp(1j * gen.uniform(0, 2 * np.pi)),
                               0.0, float(spatial16.x[c // 16]), float(spatial16.y[c % 16]))
                     for c in cells]
            img = signal_to_image(synthesize_signal(scene, radar16, 0.0))
            images.append(img / np.linalg.norm(img))
            scenes.append(set(int(c) for c in cells))
        stable = 1.0 / dict16.step_bound()
        init = StageParams(np.full(4, stable), np.full(4, 0.005))
        cfg = TrainConfig(lam=0.01, epochs=20, batch_size=8, seed=0)
        params, _ = train(images, cfg, dict16, init_params=init)
        for img, cells in zip(images[:5], scenes[:5]):
            z, _, _ = forward_network(params, dict16, vec(img))
            top3 = set(np.argsort(-np.abs(z))[:3].tolist())
            assert cells <= top3


class TestStageSweepTraining:
    def test_val_residual_never_regresses(self, radar8, spatial8, dict8):
        gen = np.random.default_rng(3)
        images = []
        for _ in range(20):
            cells = gen.choice(64, 2, replace=False)
            scene = [AscParams(1.0 + 0.0j, 0.0, float(spatial8.x[c // 8]), float(spatial8.y[c % 8]))
                     for c in cells]
            img = signal_to_image(synthesize_signal(scene, radar8, 0.0))
            images.append(img / np.linalg.norm(img))
        cfg = TrainConfig(lam=0.01, epochs=8, batch_size=8, seed=0)
        sweep = train_stage_sweep(images[:16], images[16:], cfg, dict8, [1, 2, 3])
        val = np.stack([vec(im) for im in images[16:]], axis=1)

        def res(p):
            _, recon, _ = forward_network(p, dict8, val)
            return float(np.mean(np.sqrt(np.sum(np.abs(recon - val) ** 2, axis=0))))

        vals = [res(sweep[n]) for n in (1, 2, 3)]
        assert all(b <= a + 1e-12 for a, b in zip(vals, vals[1:]))


class TestCheckpoint:
    def test_round_trip_bit_exact(self, dict8, tmp_path):
        params = StageParams([0.01, 0.02, 0.003], [0.005, 0.0, 0.125])
        path = tmp_path / "net.ckpt"
        save_checkpoint(path, params, dict8)
        loaded = load_checkpoint(path, dict8)
        assert np.array_equal(loaded.step, params.step)
        assert np.array_equal(loaded.thresh, params.thresh)

    def test_refuses_mismatched_dictionary(self, dict8, tmp_path):
        params = StageParams.default_init(2)
        path = tmp_path / "net.ckpt"
        save_checkpoint(path, params, dict8)
        other_grid = asckit.RadarGrid(f_center=9.6e9, n_freq=8, n_aspect=8)
        other = asckit.build_dictionary(other_grid, asckit.SpatialGrid.aligned_to(other_grid))
        with pytest.raises(CheckpointMismatchError):
            load_checkpoint(path, other)

    def test_rejects_garbage(self, dict8, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"\x00" * 64)
        with pytest.raises(ValueError):
            load_checkpoint(path, dict8)
