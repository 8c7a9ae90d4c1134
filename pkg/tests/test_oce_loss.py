import numpy as np
import pytest

from py_oce_seg.core.oce_loss import PairSet, oce_loss, oce_loss_and_grad, sample_pairs, sigma, sigma_grad
from py_oce_seg.core.tensor_core import gradcheck
from py_oce_seg.core.utils.config import LossConfig
from py_oce_seg.core.utils.helpers import PreconditionError


@pytest.fixture
def loss_config():
    return LossConfig(reg_lambda=0.0)


def _object_centric_field(height: int, width: int, center: tuple[float, float]) -> np.ndarray:
    # r_i = i - c for a single object covering the whole field
    rows, cols = np.mgrid[0:height, 0:width].astype(np.float64)
    return np.stack([rows - center[0], cols - center[1]])


def test_sample_pairs_count_and_bounds():
    config = LossConfig()
    pairs = sample_pairs((40, 50), config, np.random.default_rng(0))
    assert len(pairs) == 200
    assert len({tuple(a) for a in pairs.anchors}) == 200
    distance = np.linalg.norm(pairs.offsets, axis=1)
    assert np.all(distance > 0)
    assert np.all(distance <= config.kappa)
    for coords in (pairs.anchors, pairs.partners):
        assert np.all(coords >= 0)
        assert np.all(coords[:, 0] < 40)
        assert np.all(coords[:, 1] < 50)


def test_sample_pairs_is_deterministic():
    config = LossConfig()
    first = sample_pairs((30, 30), config, np.random.default_rng(7))
    second = sample_pairs((30, 30), config, np.random.default_rng(7))
    assert np.array_equal(first.anchors, second.anchors)
    assert np.array_equal(first.partners, second.partners)


def test_sample_pairs_rejects_small_field():
    with pytest.raises(PreconditionError):
        sample_pairs((20, 40), LossConfig(), np.random.default_rng(0))


def test_sample_pairs_reaches_every_direction():
    pairs = sample_pairs((60, 60), LossConfig(anchor_density=1.0), np.random.default_rng(1))
    signs = {tuple(np.sign(offset).astype(int)) for offset in pairs.offsets}
    assert {(1, 1), (1, -1), (-1, 1), (-1, -1)} <= signs


def test_sigma_values():
    assert sigma(np.zeros(2), 10.0) == 0.5
    values = sigma(np.random.default_rng(0).normal(scale=5.0, size=(100, 2)), 10.0)
    assert np.all(values >= 0.5)
    assert np.all(values < 1.0)
    assert sigma(np.array([3.0, 4.0]), 10.0) == pytest.approx(1.0 / (1.0 + np.exp(-2.5)))


def test_sigma_grad_matches_finite_differences():
    delta = np.array([1.2, -0.7])
    eps = 1e-6
    numeric = [
        (sigma(delta + eps * unit, 10.0) - sigma(delta - eps * unit, 10.0)) / (2 * eps)
        for unit in np.eye(2)
    ]
    assert np.allclose(sigma_grad(delta, 10.0), numeric, atol=1e-8)
    assert np.all(sigma_grad(np.zeros(2), 10.0) == 0)


def test_object_centric_field_is_fixed_point(loss_config):
    pairs = sample_pairs((30, 30), loss_config, np.random.default_rng(2))
    field = _object_centric_field(30, 30, (14.5, 15.25))
    loss, grad = oce_loss_and_grad(field, pairs, loss_config)
    assert loss == pytest.approx(0.5 * len(pairs))
    assert np.allclose(grad, 0)


@pytest.mark.parametrize("seed", range(5))
def test_perturbing_the_fixed_point_increases_loss(loss_config, seed):
    rng = np.random.default_rng(seed)
    pairs = sample_pairs((30, 30), loss_config, rng)
    field = _object_centric_field(30, 30, (10.0, 20.0))
    baseline, _ = oce_loss_and_grad(field, pairs, loss_config)
    row, col = pairs.anchors[rng.integers(len(pairs))]
    field[:, row, col] += rng.normal(scale=0.5, size=2)
    perturbed, _ = oce_loss_and_grad(field, pairs, loss_config)
    assert perturbed > baseline


def test_regularization_adds_anchor_norms():
    pairs = PairSet(np.array([[0, 0], [1, 1]]), np.array([[0, 1], [1, 0]]))
    field = np.zeros((2, 3, 3))
    field[:, 0, 0] = (3.0, 4.0)
    plain, _ = oce_loss_and_grad(field, pairs, LossConfig(reg_lambda=0.0))
    regularized, _ = oce_loss_and_grad(field, pairs, LossConfig(reg_lambda=0.1))
    assert regularized - plain == pytest.approx(0.5)


def test_regularization_gradient_is_finite_at_zero():
    pairs = PairSet(np.array([[1, 1]]), np.array([[1, 2]]))
    _, grad = oce_loss_and_grad(np.zeros((2, 4, 4)), pairs, LossConfig(reg_lambda=1.0))
    assert np.all(np.isfinite(grad))


@pytest.mark.parametrize("seed", range(20))
def test_loss_gradient(seed):
    config = LossConfig(kappa=3.0, tau=2.0, reg_lambda=0.05, anchor_density=0.2)
    rng = np.random.default_rng(seed)
    pairs = sample_pairs((10, 10), config, rng)
    field = rng.normal(scale=2.0, size=(2, 10, 10))
    assert gradcheck(lambda f: oce_loss(f, pairs, config), [field], eps=1e-6, seed=seed) < 1e-4


def test_loss_and_grad_shapes(loss_config):
    pairs = sample_pairs((25, 22), loss_config, np.random.default_rng(0))
    loss, grad = oce_loss_and_grad(np.zeros((2, 25, 22), dtype=np.float32), pairs, loss_config)
    assert isinstance(loss, float)
    assert grad.shape == (2, 25, 22)


def test_sample_pairs_default_density_on_full_crop():
    pairs = sample_pairs((236, 236), LossConfig(), np.random.default_rng(0))
    assert len(pairs) == 5569


def test_corner_anchor_gets_quarter_disc_partners():
    config = LossConfig(anchor_density=1.0)
    partners = set()
    for seed in range(200):
        pairs = sample_pairs((21, 21), config, np.random.default_rng(seed))
        (index,) = np.flatnonzero((pairs.anchors == 0).all(axis=1))
        partners.add(tuple(pairs.partners[index]))
    rows, cols = np.array(sorted(partners)).T
    assert np.all(rows >= 0)
    assert np.all(cols >= 0)
    assert np.all(rows ** 2 + cols ** 2 <= 100)
    assert len(partners) > 50


def test_sigma_at_squared_norm_ten():
    assert sigma(np.array([np.sqrt(10.0), 0.0]), 10.0) == pytest.approx(0.731059, abs=1e-6)


def test_zero_field_single_pair_loss():
    pairs = PairSet(np.array([[5, 15]]), np.array([[5, 5]]))
    loss, _ = oce_loss_and_grad(np.zeros((2, 20, 20)), pairs, LossConfig(reg_lambda=0.0))
    assert loss == pytest.approx(0.9999546, abs=1e-7)


def test_far_pairs_have_saturated_gradient():
    tau = 10.0
    norms = np.linspace(0.0, 60.0, 60001)
    delta = np.stack([norms, np.zeros_like(norms)], axis=1)
    magnitude = np.linalg.norm(sigma_grad(delta, tau), axis=1)
    far = norms >= 3 * np.sqrt(tau)
    assert magnitude[far].max() <= 0.1 * magnitude.max()
