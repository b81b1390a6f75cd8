import numpy as np
import pytest

from asckit import RadarGrid, SpatialGrid, build_dictionary


@pytest.fixture(scope="session")
def radar8():
    return RadarGrid(n_freq=8, n_aspect=8)


@pytest.fixture(scope="session")
def spatial8(radar8):
    return SpatialGrid.aligned_to(radar8)


@pytest.fixture(scope="session")
def dict8(radar8, spatial8):
    return build_dictionary(radar8, spatial8)


@pytest.fixture(scope="session")
def radar16():
    return RadarGrid(n_freq=16, n_aspect=16)


@pytest.fixture(scope="session")
def spatial16(radar16):
    return SpatialGrid.aligned_to(radar16)


@pytest.fixture(scope="session")
def dict16(radar16, spatial16):
    return build_dictionary(radar16, spatial16)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_image_vec(rng, d, normalize=True):
    s = rng.standard_normal(d.n_rows) + 1j * rng.standard_normal(d.n_rows)
    return s / np.linalg.norm(s) if normalize else s


def gradient_check_problem(seed, d, n_stages=4, lam=0.5, h=1e-6):
    """Analytic vs central-finite-difference gradients on one random problem.

    Returns (max relative error over all 2N parameters, kink margin). The
    margin is the closest any pre-threshold magnitude comes to its
    threshold; finite differences are invalid when the perturbation can
    cross that kink, so callers exclude small-margin draws.
    """
    from asckit import StageParams, backward, compute_loss, forward_network

    gen = np.random.default_rng(seed)
    s = gen.standard_normal(d.n_rows) + 1j * gen.standard_normal(d.n_rows)
    s /= np.linalg.norm(s)
    params = StageParams(gen.uniform(0.002, 0.012, n_stages),
                         gen.uniform(0.001, 0.010, n_stages))

    z, recon, tape = forward_network(params, d, s)
    result = backward(tape, d, s, lam)
    analytic = np.concatenate([result.d_step, result.d_thresh])

    theta0 = np.concatenate([params.step, params.thresh])

    def loss_at(theta):
        p = StageParams(theta[:n_stages].copy(), theta[n_stages:].copy())
        z, recon, _ = forward_network(p, d, s)
        return compute_loss(s, recon, z, lam)

    fd = np.zeros_like(theta0)
    for i in range(theta0.size):
        up, down = theta0.copy(), theta0.copy()
        up[i] += h
        down[i] -= h
        fd[i] = (loss_at(up) - loss_at(down)) / (2 * h)
    rel = np.abs(analytic - fd) / np.maximum(np.abs(fd), 1e-10)
    return float(rel.max()), result.kink_margin
