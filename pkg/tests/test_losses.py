import itertools
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from conftest import central_diff, central_diff_guarded, max_rel_err
from mmloss.errors import LabelError
from mmloss.losses import (
    ClassifierHead,
    MmlConfig,
    batch_shifted_centres,
    centre_loss,
    marginal_loss,
    mml,
    range_loss,
    softmax_ce,
    total_loss,
)


def random_head(rng, d, k):
    return ClassifierHead(rng.normal(size=(d, k)), rng.normal(size=k))


# --- softmax cross-entropy ------------------------------------------------


def test_softmax_uniform_logits_give_ln_k(rng):
    head = ClassifierHead(np.zeros((3, 2)), np.zeros(2))
    out = softmax_ce(rng.normal(size=(5, 3)), [0, 1, 1, 0, 1], head)
    assert out.value == pytest.approx(math.log(2), abs=1e-15)


def test_softmax_saturated_correct_class():
    head = ClassifierHead(np.array([[500.0, -500.0]]), np.zeros(2))
    out = softmax_ce([[1.0]], [0], head)
    assert out.value == pytest.approx(0.0, abs=1e-300)
    assert np.all(np.isfinite(out.grad_features))


def test_softmax_label_out_of_range():
    head = ClassifierHead(np.zeros((2, 3)), np.zeros(3))
    with pytest.raises(LabelError):
        softmax_ce(np.zeros((1, 2)), [3], head)


def test_softmax_gradients_match_finite_differences(rng):
    f = rng.normal(size=(4, 3))
    y = np.array([0, 2, 1, 2])
    head = random_head(rng, 3, 3)
    out = softmax_ce(f, y, head)

    gf = central_diff(lambda x: softmax_ce(x, y, head).value, f)
    gw = central_diff(lambda w: softmax_ce(f, y, ClassifierHead(w, head.biases)).value, head.weights)
    gb = central_diff(lambda b: softmax_ce(f, y, ClassifierHead(head.weights, b)).value, head.biases)
    assert max_rel_err(out.grad_features, gf) < 1e-6
    assert max_rel_err(out.grad_weights, gw) < 1e-6
    assert max_rel_err(out.grad_biases, gb) < 1e-6


# --- centre loss ----------------------------------------------------------


def test_centre_loss_zero_at_centres():
    c = np.array([[1.0, 2.0], [-1.0, 0.5]])
    y = np.array([0, 1, 0])
    out = centre_loss(c[y], y, c)
    assert out.value == 0.0
    assert not out.grad_features.any() and not out.grad_centres.any()


def test_centre_loss_single_sample():
    out = centre_loss([[1.0, 0.0]], [0], np.zeros((2, 2)))
    assert out.value == 0.5
    assert out.grad_features.tolist() == [[1.0, 0.0]]
    assert out.grad_centres.tolist() == [[-1.0, 0.0], [0.0, 0.0]]


def test_centre_loss_has_no_batch_normalisation():
    # doubling the batch with copies doubles the value
    c = np.zeros((2, 1))
    one = centre_loss([[2.0]], [0], c).value
    two = centre_loss([[2.0], [2.0]], [0, 0], c).value
    assert two == 2 * one


def test_centre_loss_gradients(rng):
    f = rng.normal(size=(5, 4))
    y = np.array([0, 1, 2, 1, 0])
    c = rng.normal(size=(3, 4))
    out = centre_loss(f, y, c)
    assert max_rel_err(out.grad_features, central_diff(lambda x: centre_loss(x, y, c).value, f)) < 1e-6
    assert max_rel_err(out.grad_centres, central_diff(lambda x: centre_loss(f, y, x).value, c)) < 1e-6


# --- minimum margin loss --------------------------------------------------


def brute_force_mml(centres, scope, margin):
    """Enumerate every unordered pair directly."""
    value = 0.0
    grad = np.zeros_like(centres)
    for a, b in itertools.combinations(scope, 2):
        d = 0.0
        for k in range(centres.shape[1]):
            diff = centres[a, k] - centres[b, k]
            d += diff * diff
        if margin - d > 0.0:
            value += margin - d
            grad[a] += -2.0 * (centres[a] - centres[b])
            grad[b] += -2.0 * (centres[b] - centres[a])
    return value, grad


def test_mml_hinge_boundary_is_inactive():
    c = np.array([[0.0, 0.0], [3.0, 4.0]])
    out = mml(c, [0, 1], c, MmlConfig(margin=25.0))
    assert out.value == 0.0
    assert not out.grad_centres.any()


def test_mml_direct_hinge_arithmetic():
    c = np.array([[0.0, 0.0], [10.0, 0.0]])
    out = mml(c, [0, 1], c, MmlConfig(margin=280.0))
    assert out.value == 180.0


def test_mml_fewer_than_two_classes_is_zero():
    c = np.zeros((3, 2))
    out = mml(np.ones((4, 2)), [1, 1, 1, 1], c, MmlConfig(margin=5.0))
    assert out.value == 0.0
    assert not out.grad_features.any()


def test_mml_matches_enumeration_with_two_violations(rng):
    c = rng.normal(size=(4, 3))
    dists = sorted(
        float(np.sum((c[a] - c[b]) ** 2)) for a, b in itertools.combinations(range(4), 2)
    )
    margin = 0.5 * (dists[1] + dists[2])
    cfg = MmlConfig(margin=margin, pair_scope="all_classes")
    f = rng.normal(size=(8, 3))
    y = np.array([0, 1, 2, 3, 0, 1, 2, 3])
    out = mml(f, y, c, cfg)
    value, grad = brute_force_mml(c, range(4), margin)
    assert out.diagnostics["active_pairs"] == 2
    assert out.value == value
    assert np.array_equal(out.grad_centres, grad)


def test_mml_coupled_gradient_matches_batch_mean_surrogate(rng):
    c = rng.normal(size=(4, 3))
    f = c[[0, 1, 2, 3, 0, 1, 2]] + 0.1 * rng.normal(size=(7, 3))
    y = np.array([0, 1, 2, 3, 0, 1, 2])
    dists = sorted(
        float(np.sum((c[a] - c[b]) ** 2)) for a, b in itertools.combinations(range(4), 2)
    )
    cfg = MmlConfig(margin=0.5 * (dists[1] + dists[2]))
    out = mml(f, y, c, cfg)

    def surrogate(x):
        r = mml(x, y, batch_shifted_centres(x, y, c, f), cfg)
        return r.value, r.branch

    numeric, stable = central_diff_guarded(surrogate, f)
    assert stable
    assert max_rel_err(out.grad_features, numeric) < 1e-5


def test_mml_detached_has_zero_feature_gradient(rng):
    c = rng.normal(size=(3, 2))
    out = mml(rng.normal(size=(3, 2)), [0, 1, 2], c, MmlConfig(margin=100.0, coupling_mode="detached"))
    assert out.value > 0
    assert not out.grad_features.any()
    assert out.grad_centres.any()


def test_mml_batch_scope_ignores_absent_classes():
    c = np.array([[0.0], [0.1], [0.2]])
    batch = mml([[0.0], [0.1]], [0, 1], c, MmlConfig(margin=1.0))
    full = mml([[0.0], [0.1]], [0, 1], c, MmlConfig(margin=1.0, pair_scope="all_classes"))
    assert batch.diagnostics["active_pairs"] == 1
    assert full.diagnostics["active_pairs"] == 3
    assert batch.grad_centres[2].tolist() == [0.0]


centre_sets = st.integers(2, 6).flatmap(
    lambda k: st.lists(
        st.lists(st.floats(-10, 10, allow_nan=False), min_size=2, max_size=2), min_size=k, max_size=k
    )
)


@settings(max_examples=200, deadline=None)
@given(centre_sets, st.floats(0, 50))
def test_mml_zero_iff_no_pair_below_margin(cs, margin):
    c = np.array(cs)
    k = len(c)
    out = mml(c, np.arange(k), c, MmlConfig(margin=margin))
    close = any(
        np.sum((c[a] - c[b]) ** 2) < margin for a, b in itertools.combinations(range(k), 2)
    )
    assert out.value >= 0
    assert (out.value == 0.0) == (not close)


@settings(max_examples=200, deadline=None)
@given(centre_sets, st.floats(0.1, 50), st.floats(0.05, 0.95), st.floats(0.01, 0.99), st.floats(0, 6.28))
def test_mml_monotone_when_pair_moves_closer(cs, margin, shrink, frac, angle):
    c = np.array(cs)
    k = len(c)
    cfg = MmlConfig(margin=margin, pair_scope="all_classes")
    # place centre 1 so the (0, 1) pair violates the margin by construction
    r = np.sqrt(frac * margin)
    c[1] = c[0] + r * np.array([np.cos(angle), np.sin(angle)])
    moved = c.copy()
    moved[0] = c[1] + shrink * (c[0] - c[1])

    def pair_term(m):
        return mml(m[:2], [0, 1], m[:2], cfg).value

    assert pair_term(moved) >= pair_term(c)
    if k == 2:
        assert mml(moved, [0, 1], moved, cfg).value >= mml(c, [0, 1], c, cfg).value


@settings(max_examples=200, deadline=None)
@given(centre_sets, st.floats(0, 50), st.floats(1.0, 5.0))
def test_mml_scaling_up_never_increases(cs, margin, s):
    c = np.array(cs)
    k = len(c)
    cfg = MmlConfig(margin=margin)
    base = mml(c, np.arange(k), c, cfg).value
    scaled = mml(s * c, np.arange(k), s * c, cfg).value
    assert scaled <= base + 1e-9


def test_mml_rejects_negative_margin():
    with pytest.raises(ValueError):
        MmlConfig(margin=-1.0)


# --- marginal loss --------------------------------------------------------


def test_marginal_identical_same_class_pair():
    out = marginal_loss([[1.0, 0.0], [1.0, 0.0]], [0, 0], theta=0.5, xi=0.1)
    assert out.value == 0.0


def test_marginal_antipodal_different_class_pair():
    out = marginal_loss([[1.0, 0.0], [-1.0, 0.0]], [0, 1], theta=0.5, xi=0.1)
    assert out.value == 0.0


def test_marginal_hand_value():
    # orthogonal unit vectors, same class: D = 2, term = (0.1 - (1.2 - 2))_+ = 0.9 per ordering
    out = marginal_loss([[1.0, 0.0], [0.0, 3.0]], [0, 0], theta=1.2, xi=0.1)
    assert out.value == pytest.approx(0.9, abs=1e-15)


def test_marginal_zero_norm_rejected():
    with pytest.raises(ValueError):
        marginal_loss([[0.0, 0.0], [1.0, 0.0]], [0, 1], 0.5, 0.1)


def test_marginal_gradients_away_from_kinks(rng):
    y = np.array([0, 0, 1, 1, 2, 2])
    for _ in range(20):
        f = rng.normal(size=(6, 3))
        numeric, stable = central_diff_guarded(
            lambda x: (lambda r: (r.value, r.branch))(marginal_loss(x, y, 1.0, 0.3)), f
        )
        if stable:
            break
    assert stable
    out = marginal_loss(f, y, 1.0, 0.3)
    assert out.value > 0
    assert max_rel_err(out.grad_features, numeric) < 1e-5


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.lists(st.floats(0.1, 10), min_size=5, max_size=5))
def test_marginal_invariant_to_per_feature_rescaling(seed, scales):
    r = np.random.default_rng(seed)
    f = r.normal(size=(5, 3))
    assume(np.all(np.linalg.norm(f, axis=1) > 1e-3))
    y = np.array([0, 1, 0, 1, 2])
    a = marginal_loss(f, y, 1.0, 0.3).value
    b = marginal_loss(f * np.array(scales)[:, None], y, 1.0, 0.3).value
    assert b == pytest.approx(a, rel=1e-12, abs=1e-14)


# --- range loss -----------------------------------------------------------


def test_range_single_pair_collapses_top_n():
    out = range_loss([[0.0, 0.0], [1.0, 1.0]], [0, 0], margin=1.0, alpha_r=1.0, beta_r=1.0, top_n=2)
    assert out.components["intra"] == 2.0
    assert out.components["inter"] == 0.0


def test_range_inter_hinge_inactive_when_far():
    f = [[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]]
    out = range_loss(f, [0, 0, 1, 1], margin=50.0, alpha_r=1.0, beta_r=1.0)
    assert out.components["inter"] == 0.0


def test_range_inter_hinge_hand_value():
    f = [[0.0, 0.0], [0.0, 2.0], [3.0, 0.0], [3.0, 2.0]]
    out = range_loss(f, [0, 0, 1, 1], margin=10.0, alpha_r=0.0, beta_r=1.0)
    assert out.components["inter"] == 1.0


def test_range_records_skipped_classes():
    f = [[0.0], [1.0], [5.0]]
    out = range_loss(f, [0, 0, 1], margin=1.0, alpha_r=1.0, beta_r=1.0)
    assert out.diagnostics["skipped_classes"] == [1]


def test_range_harmonic_mean_of_top_two():
    # three collinear points: pair distances 1, 4, 9 -> top two are 9 and 4
    out = range_loss([[0.0], [1.0], [3.0]], [0, 0, 0], margin=0.0, alpha_r=1.0, beta_r=0.0, top_n=2)
    assert out.components["intra"] == pytest.approx(2 / (1 / 9 + 1 / 4), rel=1e-15)


def test_range_gradients_away_from_ties(rng):
    y = np.array([0, 0, 0, 1, 1, 1, 2, 2])
    f = rng.normal(size=(8, 3))

    def fn(x):
        r = range_loss(x, y, margin=5.0, alpha_r=0.7, beta_r=1.3, top_n=2)
        return r.value, r.branch

    numeric, stable = central_diff_guarded(fn, f)
    assert stable
    out = range_loss(f, y, margin=5.0, alpha_r=0.7, beta_r=1.3, top_n=2)
    assert out.components["inter"] > 0
    assert max_rel_err(out.grad_features, numeric) < 1e-4


# --- joint objective ------------------------------------------------------


def _instance(rng, n=8, d=4, k=3):
    f = rng.normal(size=(n, d))
    y = np.arange(n) % k
    return f, y, random_head(rng, d, k), rng.normal(size=(k, d))


def test_total_reduces_to_softmax_bitwise(rng):
    f, y, head, c = _instance(rng)
    t = total_loss(f, y, head, c, 0.0, 0.0, MmlConfig(margin=100.0))
    s = softmax_ce(f, y, head)
    assert t.value == s.value
    assert np.array_equal(t.grad_features, s.grad_features)
    assert np.array_equal(t.grad_weights, s.grad_weights)
    assert np.array_equal(t.grad_biases, s.grad_biases)


def test_total_with_zero_beta_is_softmax_plus_centre(rng):
    f, y, head, c = _instance(rng)
    alpha = 0.37
    t = total_loss(f, y, head, c, alpha, 0.0, MmlConfig(margin=100.0))
    assert t.value == softmax_ce(f, y, head).value + alpha * centre_loss(f, y, c).value


def test_total_gradient_with_reported_weights(rng):
    f, y, head, c = _instance(rng)
    c = 20.0 * c  # large centre spread so the mml term is sizeable
    cfg = MmlConfig(margin=float(np.median([np.sum((c[a] - c[b]) ** 2) for a, b in itertools.combinations(range(3), 2)])) + 1.0)
    alpha, beta = 5e-5, 5e-8
    out = total_loss(f, y, head, c, alpha, beta, cfg)
    assert out.diagnostics["active_pairs"] >= 1

    def fn(x):
        # centre term sees the stored centres; only the mml term follows the batch means
        m = mml(x, y, batch_shifted_centres(x, y, c, f), cfg)
        value = softmax_ce(x, y, head).value + alpha * centre_loss(x, y, c).value + beta * m.value
        return value, m.branch

    numeric, stable = central_diff_guarded(fn, f)
    assert stable
    assert max_rel_err(out.grad_features, numeric) < 1e-4


def test_total_classifier_grads_come_from_softmax_only(rng):
    f, y, head, c = _instance(rng)
    t = total_loss(f, y, head, c, 0.5, 0.5, MmlConfig(margin=1e6))
    s = softmax_ce(f, y, head)
    assert np.array_equal(t.grad_weights, s.grad_weights)
    assert t.components["mml"] > 0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000))
def test_all_losses_non_negative(seed):
    r = np.random.default_rng(seed)
    f, y, head, c = _instance(r, n=6, d=3, k=3)
    cfg = MmlConfig(margin=float(r.uniform(0, 10)))
    assert softmax_ce(f, y, head).value >= 0
    assert centre_loss(f, y, c).value >= 0
    assert mml(f, y, c, cfg).value >= 0
    assert marginal_loss(f, y, 1.0, 0.2).value >= 0
    assert range_loss(f, y, 2.0, 1.0, 1.0).value >= 0
    assert total_loss(f, y, head, c, 0.1, 0.1, cfg).value >= 0
