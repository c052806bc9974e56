import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import central_differences, direct_nll, full_posterior, relative_error

from gmmtransfer import colorspace
from gmmtransfer.errors import ConfigInvalid, DegenerateVariance
from gmmtransfer.imageio import RgbImage
from gmmtransfer.laplacian import default_kernel, laplacian_planes
from gmmtransfer.neighbor import build_index
from gmmtransfer.transfer import (
    GmmState,
    PosteriorTable,
    TransferConfig,
    e_step,
    frame_of,
    frozen_neighbor_gradient,
    m_step_centroids,
    m_step_variances,
    nll,
    objective_gradient,
    objective_q,
    run_transfer,
)

# 1.5 * log(2*pi): log-density of a 3-D unit Gaussian at its mean, negated
NLL_UNIT_AT_MEAN = 2.756815599614018
# 1 / (1 + exp(-1/2))
P_HALF_UNIT = 0.6224593312018546


def make_state(X, sigma2, w=None, h=None):
    X = np.asarray(X, dtype=float)
    if w is None:
        w, h = X.shape[0], 1
    return GmmState(X.copy(), np.asarray(sigma2, dtype=float), w, h)


def random_instance(rng, side=4, K=30, k_nn=6):
    M = side * side
    X = rng.random((M, 3))
    S = X + 0.05 * rng.normal(size=(M, 3))
    Y = rng.random((K, 3))
    state = make_state(X, rng.uniform(0.01, 0.05, M), side, side)
    delta_s = laplacian_planes(S.T.reshape(3, side, side))
    index = build_index(X, Y, k_nn)
    return state, Y, delta_s, index


# -- nll ------------------------------------------------------------------------


def test_nll_unit_gaussian_at_mean():
    state = make_state([[0.2, 0.3, 0.4]], [1.0])
    assert nll(state, np.array([[0.2, 0.3, 0.4]])) == pytest.approx(NLL_UNIT_AT_MEAN, abs=1e-12)


def test_nll_additive_over_duplicated_examples(rng):
    state = make_state(rng.random((5, 3)), rng.uniform(0.01, 0.1, 5))
    Y = rng.random((7, 3))
    assert nll(state, np.vstack([Y, Y])) == pytest.approx(2 * nll(state, Y), rel=1e-12)


def test_nll_identical_components_collapse(rng):
    Y = rng.random((6, 3))
    one = make_state([[0.5, 0.5, 0.5]], [0.02])
    two = make_state([[0.5, 0.5, 0.5]] * 2, [0.02, 0.02])
    assert nll(two, Y) == pytest.approx(nll(one, Y), rel=1e-12)


def test_nll_matches_direct_formula(rng):
    state = make_state(rng.random((6, 3)), rng.uniform(0.05, 0.2, 6))
    Y = rng.random((9, 3))
    assert nll(state, Y) == pytest.approx(direct_nll(state.X, state.sigma2, Y), rel=1e-10)


def test_nll_stable_for_tiny_variance():
    state = make_state([[0.0, 0.0, 0.0]], [1e-6])
    value = nll(state, np.array([[1.0, 1.0, 1.0]]))
    assert math.isfinite(value) and value > 1e5


def test_degenerate_variance_raises():
    state = make_state([[0.0, 0.0, 0.0]], [1e-9])
    with pytest.raises(DegenerateVariance):
        nll(state, np.zeros((1, 3)))
    with pytest.raises(DegenerateVariance):
        e_step(state, np.zeros((1, 3)), mode="full")


# -- e-step -----------------------------------------------------------------------


def test_single_component_owns_everything(rng):
    post = e_step(make_state([[0.1, 0.2, 0.3]], [0.01]), rng.random((5, 3)), mode="full")
    np.testing.assert_array_equal(post.weights, np.ones((1, 5)))


def test_equidistant_split():
    state = make_state([[0.0, 0, 0], [1.0, 0, 0]], [0.3, 0.3])
    post = e_step(state, np.array([[0.5, 0.2, 0.0]]), mode="full")
    np.testing.assert_allclose(post.weights[:, 0], [0.5, 0.5], atol=1e-15)


def test_closed_form_two_components():
    state = make_state([[0.0, 0, 0], [1.0, 0, 0]], [1.0, 1.0])
    post = e_step(state, np.array([[0.0, 0, 0]]), mode="full")
    assert post.weights[0, 0] == pytest.approx(P_HALF_UNIT, abs=1e-12)


def test_full_mode_matches_direct_bayes_ratio(rng):
    state = make_state(rng.random((7, 3)), rng.uniform(0.01, 0.2, 7))
    Y = rng.random((11, 3))
    post = e_step(state, Y, mode="full")
    np.testing.assert_allclose(post.dense(11), full_posterior(state.X, state.sigma2, Y), atol=1e-14)


def test_full_mode_survives_far_outliers():
    state = make_state([[0.0, 0, 0], [0.1, 0, 0]], [1e-6, 1e-6])
    post = e_step(state, np.array([[5.0, 5.0, 5.0]]), mode="full")
    assert np.all(np.isfinite(post.weights))
    assert post.weights[:, 0].sum() == pytest.approx(1.0)


def test_truncated_rows_normalized(rng):
    state, Y, _, index = random_instance(rng)
    post = e_step(state, Y, index, "truncated")
    assert post.weights.shape == (16, 6)
    np.testing.assert_allclose(post.row_sums(), 1.0, atol=1e-12)
    assert np.all((post.weights >= 0) & (post.weights <= 1))
    dense = post.dense(Y.shape[0])
    for m in range(16):
        d2 = ((Y[index.query(m)] - state.X[m]) ** 2).sum(axis=1)
        w = np.exp(-d2 / (2 * state.sigma2[m]))
        np.testing.assert_allclose(dense[m, index.query(m)], w / w.sum(), rtol=1e-12)


@settings(max_examples=40, deadline=None)
@given(M=st.integers(1, 64), K=st.integers(1, 64), seed=st.integers(0, 2**31))
def test_full_mode_columns_sum_to_one(M, K, seed):
    r = np.random.default_rng(seed)
    state = make_state(r.random((M, 3)), r.uniform(1e-4, 0.1, M))
    post = e_step(state, r.random((K, 3)), mode="full")
    np.testing.assert_allclose(post.weights.sum(axis=0), 1.0, atol=1e-9)


# -- objective and gradient --------------------------------------------------


def test_regularizer_vanishes_at_source(rng):
    side = 4
    S = rng.random((side * side, 3))
    state = make_state(S, np.full(16, 0.02), side, side)
    delta_s = laplacian_planes(S.T.reshape(3, side, side))
    empty = PosteriorTable(np.zeros((16, 1), int), np.zeros((16, 1)), "truncated")
    assert objective_q(state, rng.random((1, 3)), empty, delta_s) == 0.0


def test_single_pair_data_term_zero():
    state = make_state([[0.3, 0.3, 0.3]], [1.0])
    post = PosteriorTable(np.zeros((1, 1), int), np.ones((1, 1)), "truncated")
    delta_s = np.zeros((3, 1, 1))
    assert objective_q(state, np.array([[0.3, 0.3, 0.3]]), post, delta_s) == 0.0


@pytest.mark.parametrize("reg_weight", [0.0, 0.003, 1.0])
@pytest.mark.parametrize("mode", ["truncated", "full"])
def test_gradient_matches_finite_differences(rng, reg_weight, mode):
    state, Y, delta_s, index = random_instance(rng, side=3)
    post = e_step(state, Y, index, mode)
    analytic = objective_gradient(state, Y, post, delta_s, reg_weight=reg_weight)

    def f(X):
        return objective_q(make_state(X, state.sigma2, 3, 3), Y, post, delta_s, reg_weight=reg_weight)

    numeric = central_differences(f, state.X, 1e-5)
    assert relative_error(analytic, numeric).max() < 1e-4


def test_frozen_neighbor_gradient_differs_from_exact(rng):
    state, Y, delta_s, index = random_instance(rng)
    state.X += 0.1 * rng.normal(size=state.X.shape)
    post = e_step(state, Y, index)
    exact = objective_gradient(state, Y, post, delta_s)
    frozen = frozen_neighbor_gradient(state, Y, post, delta_s)
    data_only = objective_gradient(state, Y, post, delta_s, reg_weight=0.0)
    # identical data part, different regularizer part
    assert not np.allclose(exact, frozen)
    r = (laplacian_planes(state.planes()) - delta_s).reshape(3, -1).T
    np.testing.assert_allclose(frozen - data_only, -24.0 * r, atol=1e-12)


# -- M-step -----------------------------------------------------------------------


def test_alpha_one_gives_weighted_mean(rng):
    Y = rng.random((5, 3))
    p = rng.random((1, 5))
    post = PosteriorTable(np.arange(5)[None, :], p, "truncated")
    state = make_state([[0.9, 0.1, 0.4]], [0.01])
    X_new = m_step_centroids(state, Y, post, default_kernel(), np.zeros((3, 1, 1)), 1.0, 0.0)
    np.testing.assert_allclose(X_new[0], (p[0, :, None] * Y).sum(0) / p.sum(), rtol=1e-12)


def test_damped_step():
    Y = np.array([[1.0, 0.5, 0.0]])
    post = PosteriorTable(np.zeros((1, 1), int), np.ones((1, 1)), "truncated")
    state = make_state([[0.0, 0.0, 1.0]], [0.01])
    X_new = m_step_centroids(state, Y, post, default_kernel(), np.zeros((3, 1, 1)), 0.1, 0.0)
    np.testing.assert_allclose(X_new[0], [0.1, 0.05, 0.9], atol=1e-15)


def test_flat_image_regularizer_is_inert(rng):
    side = 4
    X = np.tile([0.4, 0.5, 0.6], (16, 1))
    state = make_state(X, np.full(16, 0.02), side, side)
    delta_s = laplacian_planes(X.T.reshape(3, side, side))
    Y = rng.random((20, 3))
    post = e_step(state, Y, build_index(X, Y, 4))
    a = m_step_centroids(state, Y, post, default_kernel(), delta_s, 0.1, 0.0)
    b = m_step_centroids(state, Y, post, default_kernel(), delta_s, 0.1, 0.005)
    np.testing.assert_array_equal(a, b)


def test_regularizer_update_uses_previous_iterate(rng):
    state, Y, delta_s, index = random_instance(rng)
    post = e_step(state, Y, index)
    mu = 0.004
    base = m_step_centroids(state, Y, post, default_kernel(), delta_s, 0.1, 0.0)
    full = m_step_centroids(state, Y, post, default_kernel(), delta_s, 0.1, mu)
    r = (laplacian_planes(state.planes()) - delta_s).reshape(3, -1).T
    np.testing.assert_allclose(full - base, mu * r, atol=1e-14)


def test_variance_floor_on_collapsed_cluster():
    Y = np.array([[0.2, 0.2, 0.2], [0.2, 0.2, 0.2]])
    post = PosteriorTable(np.array([[0, 1]]), np.array([[0.5, 0.5]]), "truncated")
    s2 = m_step_variances(np.array([[0.2, 0.2, 0.2]]), Y, post, 1e-6)
    assert s2.tolist() == [1e-6]


def test_variance_single_point():
    Y = np.array([[0.3, 0.0, 0.4]])
    post = PosteriorTable(np.zeros((1, 1), int), np.ones((1, 1)), "truncated")
    s2 = m_step_variances(np.zeros((1, 3)), Y, post, 1e-6)
    assert s2[0] == pytest.approx(0.25 / 3, rel=1e-15)


def test_variance_matches_direct_formula(rng):
    state, Y, _, index = random_instance(rng)
    post = e_step(state, Y, index)
    X_new = state.X + 0.01
    s2 = m_step_variances(X_new, Y, post, 1e-6)
    expected = []
    for m in range(state.M):
        num = den = 0.0
        for j, k in enumerate(post.indices[m]):
            p = post.weights[m, j]
            num += p * float(np.sum((X_new[m] - Y[k]) ** 2))
            den += p
        expected.append(max(1e-6, num / (3 * den)))
    np.testing.assert_allclose(s2, expected, rtol=1e-12, atol=0)


def test_variance_minimizes_objective(rng):
    state, Y, delta_s, index = random_instance(rng)
    post = e_step(state, Y, index)
    best = m_step_variances(state.X, Y, post, 1e-9)
    at_best = objective_q(make_state(state.X, best, 4, 4), Y, post, delta_s)
    for factor in (0.9, 1.1):
        other = objective_q(make_state(state.X, best * factor, 4, 4), Y, post, delta_s)
        assert other > at_best


def test_zero_mass_row_keeps_previous_variance():
    post = PosteriorTable(np.zeros((1, 1), int), np.zeros((1, 1)), "full")
    s2 = m_step_variances(np.zeros((1, 3)), np.ones((1, 3)), post, 1e-6, previous=np.array([0.3]))
    assert s2.tolist() == [0.3]
    state = make_state([[0.0, 0.0, 0.0]], [0.3])
    X_new = m_step_centroids(state, np.ones((1, 3)), post, default_kernel(), np.zeros((3, 1, 1)), 1.0, 0.0)
    np.testing.assert_array_equal(X_new, state.X)


# -- config -----------------------------------------------------------------------


def test_config_defaults():
    cfg = TransferConfig()
    assert cfg.sigma2_init == pytest.approx(5e-4)
    assert (cfg.mu, cfg.alpha, cfg.q_max, cfg.k_nn, cfg.sigma2_floor, cfg.save_every) == (
        0.003, 0.1, 50, 10, 1e-6, 1,
    )
    assert cfg.mode == "truncated"


@pytest.mark.parametrize(
    "kwargs",
    [
        {"alpha": 0.0},
        {"alpha": 1.5},
        {"mu": -0.1},
        {"q_max": 0},
        {"k_nn": 0},
        {"sigma2_init": 1e-7},
        {"sigma2_floor": 0.0},
        {"save_every": 0},
        {"mode": "sparse"},
    ],
)
def test_config_rejects(kwargs):
    with pytest.raises(ConfigInvalid):
        TransferConfig(**kwargs)


# -- full loop --------------------------------------------------------------------


def test_zero_step_iteration_reproduces_source(source32):
    # alpha = 0 is outside TransferConfig's range, so drive one iteration by hand
    S = colorspace.normalize_image(colorspace.srgb_to_lab(source32))
    state = GmmState.initial(S, 5e-4)
    Y = state.X.copy()
    post = e_step(state, Y, build_index(state.X, Y, 10))
    delta_s = laplacian_planes(S.planes)
    state.X = m_step_centroids(state, Y, post, default_kernel(), delta_s, 0.0, 0.0)
    frame = frame_of(state)
    assert np.abs(frame.data.astype(int) - source32.data).max() <= 1


def test_run_emits_source_sized_frames(source32, example48):
    frames = []
    result = run_transfer(
        source32, example48, TransferConfig(q_max=4, save_every=2),
        sink=lambda q, f: frames.append((q, f)),
    )
    assert [q for q, _ in frames] == [0, 2, 4]
    assert frames[0][1] is source32
    assert all((f.width, f.height) == (32, 32) for _, f in frames)
    assert len(result.nll_trace) == 4
    assert result.final.planes.shape == (3, 32, 32)
    assert result.state.q == 4
    assert result.state.sigma2.min() >= 1e-6


def test_run_moves_colors_toward_example(source32, example48):
    frames = {}
    run_transfer(source32, example48, TransferConfig(q_max=20), sink=lambda q, f: frames.__setitem__(q, f))
    lab = lambda img: colorspace.rgb_to_lab_pixels(img.data).reshape(-1, 3).mean(0)
    before = np.linalg.norm(lab(source32) - lab(example48))
    after = np.linalg.norm(lab(frames[20]) - lab(example48))
    assert after < 0.5 * before


def test_identity_transfer_is_stable(source32):
    worst = []
    run_transfer(
        source32, source32, TransferConfig(q_max=10),
        sink=lambda q, f: worst.append(np.abs(f.data.astype(int) - source32.data).max()),
    )
    assert max(worst) <= 2


def test_run_is_deterministic(source32, example48):
    def frames():
        out = []
        run_transfer(source32, example48, TransferConfig(q_max=3), sink=lambda q, f: out.append(f.tobytes()))
        return out

    assert frames() == frames()


def test_tiny_images_run():
    s = RgbImage.from_bytes(1, 1, b"\x10\x80\xf0")
    y = RgbImage.from_bytes(2, 1, b"\x00\x00\x00\xff\xff\xff")
    result = run_transfer(s, y, TransferConfig(q_max=3, k_nn=5))
    assert result.final.planes.shape == (3, 1, 1)
    assert all(math.isfinite(v) for v in result.nll_trace)


@pytest.mark.parametrize("k_nn", [5, 50])
def test_other_neighbor_counts(source32, example48, k_nn):
    frames = []
    result = run_transfer(source32, example48, TransferConfig(k_nn=k_nn, q_max=10),
                          sink=lambda q, f: frames.append(f))
    assert len(frames) == 11 and all((f.width, f.height) == (32, 32) for f in frames)
    assert all(math.isfinite(v) for v in result.nll_trace)
    assert result.state.sigma2.min() >= 1e-6
