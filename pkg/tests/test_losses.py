import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from buda import losses as L
from buda import tensor as T
from buda.errors import ContractError, ShapeError
from buda.models import Discriminator
from buda.tensor import Rng, Tensor


def brute_mmd(real, gen, sigmas):
    """Direct transcription of the three double sums, one pair at a time."""
    def k(x, y):
        d2 = float(np.sum((x - y) ** 2))
        return sum(math.exp(-d2 / (2 * s * s)) for s in sigmas)

    return (sum(k(a, b) for a in gen for b in gen)
            - 2 * sum(k(a, b) for a in real for b in gen)
            + sum(k(a, b) for a in real for b in real))


def fixed_D(logit_s, logit_t=None):
    """A discriminator whose logits on a 1-d input of 1.0 or -1.0 are chosen directly."""
    D = Discriminator.init(1, Rng(0))
    if logit_t is None:
        D.params["w"].data[:] = 0.0
        D.params["b"].data[:] = logit_s
    else:
        D.params["w"].data[:] = (logit_s - logit_t) / 2
        D.params["b"].data[:] = (logit_s + logit_t) / 2
    return D


def logit(p):
    return math.log(p / (1 - p))


# ---------------------------------------------------------------- cross-entropy

def test_ce_perfect_prediction_is_zero():
    y = np.eye(3)[[0, 2, 1]]
    assert L.seg_cross_entropy(Tensor(y), y).item() == pytest.approx(0.0, abs=1e-12)


def test_ce_uniform_single_pixel():
    P = np.full((1, 1, 4), 0.25)
    assert L.seg_cross_entropy(Tensor(P), np.eye(4)[[2]].reshape(1, 1, 4)).item() == pytest.approx(math.log(4))


def test_ce_two_pixels():
    P = np.array([[0.7, 0.3], [0.2, 0.8]])
    y = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert L.seg_cross_entropy(Tensor(P), y).item() == pytest.approx(-(math.log(0.7) + math.log(0.8)), abs=1e-12)
    assert -(math.log(0.7) + math.log(0.8)) == pytest.approx(0.5798, abs=1e-4)


def test_ce_from_logits_matches_probability_form():
    r = Rng(1)
    z = r.normal((6, 4)) * 2
    y = r.integers(0, 4, size=6)
    a = L.seg_cross_entropy_from_logits(Tensor(z), y).item()
    b = L.seg_cross_entropy(T.softmax_rows(Tensor(z)), np.eye(4)[y]).item()
    assert a == pytest.approx(b, rel=1e-12)


def test_ce_clamp_is_counted():
    before = L.clamp_events
    P = np.array([[1.0, 0.0]])
    assert L.seg_cross_entropy(Tensor(P), np.array([[0.0, 1.0]])).item() == pytest.approx(-math.log(L.PROB_FLOOR))
    assert L.clamp_events == before + 1


def test_ce_shape_mismatch():
    with pytest.raises(ShapeError):
        L.seg_cross_entropy(Tensor(np.full((2, 3), 1 / 3)), np.eye(2))


def test_ce_descends_along_gradient():
    r = Rng(2)
    z = Tensor(r.normal((1, 5)), requires_grad=True)
    y = np.eye(5)[[3]]
    vals = []
    for _ in range(10):
        loss = L.seg_cross_entropy(T.softmax_rows(z), y)
        vals.append(loss.item())
        T.backward(loss, [z])
        z.data = z.data - 0.1 * z.grad
    assert all(a > b for a, b in zip(vals, vals[1:]))


# ---------------------------------------------------------------- entropy

def test_entropy_uniform_grid_counts_pixels():
    for C in (2, 3, 7):
        assert L.entropy_loss(Tensor(np.full((2, 2, C), 1 / C))).item() == pytest.approx(4.0, abs=1e-12)


def test_entropy_one_hot_is_zero():
    assert L.entropy_loss(Tensor(np.eye(3)[[0, 1, 2, 2]])).item() == pytest.approx(0.0, abs=1e-12)


def test_entropy_half_half_over_four():
    P = np.array([[[0.5, 0.5, 0.0, 0.0]]])
    assert L.entropy_loss(Tensor(P)).item() == pytest.approx(0.5, abs=1e-12)


def test_entropy_needs_two_classes():
    with pytest.raises(ContractError):
        L.entropy_loss(Tensor(np.ones((2, 2, 1))))
    with pytest.raises(ContractError):
        L.entropy_from_logits(Tensor(np.zeros((3, 1))))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 6))
def test_entropy_bounds_and_mask_monotone(seed, C):
    r = Rng(seed)
    P = T.softmax_rows(Tensor(r.normal((16, C)) * 3)).data.reshape(4, 4, C)
    mask = r.uniform((4, 4)) < 0.5
    full = L.entropy_loss(Tensor(P)).item()
    part = L.entropy_loss(Tensor(P), mask).item()
    assert 0.0 <= full <= 16.0 + 1e-12
    assert part <= full + 1e-12


def test_entropy_from_logits_matches_probability_form():
    z = Rng(3).normal((9, 5)) * 2
    m = np.arange(9) % 2 == 0
    a = L.entropy_from_logits(Tensor(z), m).item()
    b = L.entropy_loss(T.softmax_rows(Tensor(z)), m).item()
    assert a == pytest.approx(b, rel=1e-12)


def test_entropy_mask_size_checked():
    with pytest.raises(ShapeError):
        L.entropy_loss(Tensor(np.full((4, 3), 1 / 3)), np.ones(5, dtype=bool))


# ---------------------------------------------------------------- MMD

def test_mmd_identical_populations():
    X = Rng(4).normal((20, 3)) * 5
    assert abs(L.gmmn_mmd(X, Tensor(X.copy())).item()) <= 1e-12


def test_mmd_scalar_case():
    v = L.gmmn_mmd(np.array([[0.0]]), Tensor(np.array([[2.0]])), [1.0]).item()
    assert v == pytest.approx(2 * (1 - math.exp(-2)), abs=1e-12)
    assert v == pytest.approx(1.7293, abs=1e-4)


def test_mmd_matches_brute_force():
    r = Rng(5)
    for i in range(10):
        a, b = r.child(i).normal((20, 4)) * 6, r.child(i, "g").normal((20, 4)) * 6 + 1
        fast = L.gmmn_mmd(a, Tensor(b)).item()
        assert abs(fast - brute_mmd(a, b, L.DEFAULT_BANDWIDTHS)) <= 1e-10


def test_mmd_symmetric_and_nonnegative():
    r = Rng(6)
    for i in range(100):
        a, b = r.child(i).normal((7, 3)) * 4, r.child(i, "g").normal((5, 3)) * 4
        ab = L.gmmn_mmd(a, Tensor(b)).item()
        ba = L.gmmn_mmd(b, Tensor(a)).item()
        assert ab >= -1e-12
        assert ab == pytest.approx(ba, abs=1e-9)


def test_mmd_normalized_variant():
    a, b = Rng(7).normal((4, 2)), Rng(8).normal((6, 2))
    sig = (1.0, 3.0)
    ref = brute_mmd(a, b, sig)
    kgg = brute_mmd(np.zeros((0, 2)), b, sig)
    krr = brute_mmd(a, np.zeros((0, 2)), sig)
    krg = (kgg + krr - ref) / 2
    expect = kgg / 36 - 2 * krg / 24 + krr / 16
    assert L.gmmn_mmd(a, Tensor(b), sig, normalize=True).item() == pytest.approx(expect, abs=1e-12)


def test_mmd_rejects_bad_inputs():
    with pytest.raises(ShapeError):
        L.gmmn_mmd(np.zeros((2, 3)), Tensor(np.zeros((2, 4))))
    with pytest.raises(ContractError):
        L.KernelBandwidths(())
    with pytest.raises(ContractError):
        L.KernelBandwidths((1.0, -2.0))


def test_bandwidth_scaling_uses_median_distance():
    pop = np.array([[0.0], [1.0], [3.0]])  # pairwise distances 1, 2, 3
    bw = L.KernelBandwidths((1.0, 2.0, 4.0)).scaled_to(pop)
    np.testing.assert_allclose(bw.sigmas, (1.0, 2.0, 4.0))
    bw = L.KernelBandwidths((2.0, 4.0, 8.0)).scaled_to(pop)
    np.testing.assert_allclose(bw.sigmas, (1.0, 2.0, 4.0))


# ---------------------------------------------------------------- BCE and adversarial

@pytest.mark.parametrize("label", [0, 1])
def test_bce_half(label):
    assert L.binary_cross_entropy(0.5, label) == pytest.approx(math.log(2))


def test_bce_values():
    assert L.binary_cross_entropy(0.9, 0) == pytest.approx(-math.log(0.1))
    assert -math.log(0.1) == pytest.approx(2.3026, abs=1e-4)
    assert L.binary_cross_entropy(1 - 1e-15, 1) < 1e-11
    assert L.binary_cross_entropy(0.0, 1) == pytest.approx(-math.log(L.PROB_FLOOR))


def test_bce_tensor_matches_float():
    p = np.array([0.2, 0.7])
    t = L.binary_cross_entropy(Tensor(p), 1).data
    np.testing.assert_allclose(t, [L.binary_cross_entropy(v, 1) for v in p], rtol=1e-12)


def test_discriminator_loss_at_half():
    D = fixed_D(0.0)
    v = L.discriminator_loss(D, np.ones((3, 1)), -np.ones((4, 1))).item()
    assert v == pytest.approx(2 * math.log(2))


def test_discriminator_loss_single_pair():
    D = fixed_D(logit(0.8), logit(0.3))
    v = L.discriminator_loss(D, np.array([[1.0]]), np.array([[-1.0]])).item()
    assert v == pytest.approx(-math.log(0.8) - math.log(0.7), abs=1e-12)
    assert v == pytest.approx(0.5798, abs=1e-4)


def test_discriminator_loss_vanishes_for_perfect_D():
    D = fixed_D(40.0, -40.0)
    assert L.discriminator_loss(D, np.array([[1.0]]), np.array([[-1.0]])).item() < 1e-15


def test_discriminator_loss_does_not_reach_features():
    D = fixed_D(1.0, -1.0)
    f = Tensor(np.array([[1.0]]), requires_grad=True)
    loss = L.discriminator_loss(D, f, np.array([[-1.0]]))
    T.backward(loss, [f] + D.parameters())
    assert np.all(f.grad == 0)
    assert np.any(D.params["w"].grad != 0)


@pytest.mark.parametrize("p,expect", [(0.5, math.log(2)), (0.25, -math.log(0.25))])
def test_adversarial_loss_values(p, expect):
    assert L.adversarial_loss(fixed_D(logit(p)), np.zeros((3, 1))).item() == pytest.approx(expect, abs=1e-12)


def test_adversarial_loss_vanishes_when_D_is_fooled():
    assert L.adversarial_loss(fixed_D(40.0), np.zeros((2, 1))).item() < 1e-15


def test_adversarial_loss_holds_D_fixed():
    D = fixed_D(0.3, -0.5)
    f = Tensor(np.array([[0.4], [1.0]]), requires_grad=True)
    T.backward(L.adversarial_loss(D, f), [f] + D.parameters())
    assert np.all(D.params["w"].grad == 0) and np.all(D.params["b"].grad == 0)
    assert np.any(f.grad != 0)


def test_empty_batches_raise():
    D = fixed_D(0.0)
    with pytest.raises(ContractError):
        L.discriminator_loss(D, np.zeros((0, 1)), np.zeros((1, 1)))
    with pytest.raises(ContractError):
        L.adversarial_loss(D, np.zeros((0, 1)))
