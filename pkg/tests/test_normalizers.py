import numpy as np
import pytest
from hypothesis import given, strategies as st

from spherenorm.errors import (BatchTooSmallError, ConfigurationError, DegenerateInputError,
                               KernelCollapse)
from spherenorm.geometry import standardize
from spherenorm.normalizers import (NormalizerSpec, batch_norm, covariance, effective_weight,
                                    group_norm, instance_norm, kernel_analysis, layer_norm,
                                    spectral_normalize, standardize_along, update_running_stats,
                                    weight_norm, weight_standardize)
from spherenorm.tensor import sym_eigen
from spherenorm.verify import _whiten

seeds = st.integers(0, 2**31)


def spec(method, m=None, eps=0.0, **kw):
    s = NormalizerSpec(method, eps=eps, **kw)
    return s.init_affine(m) if m is not None else s


# --- the shared kernel -----------------------------------------------------

def test_standardize_along_1d_matches_geometry(rng):
    v = rng.standard_normal(9)
    assert np.max(np.abs(standardize_along(v, (0,)) - standardize(v))) <= 1e-14


@given(seeds)
def test_standardize_along_slices_are_standard(seed):
    t = np.random.default_rng(seed).standard_normal((3, 4, 5))
    for axes in [(0,), (1,), (2,), (0, 1), (1, 2), (0, 2)]:
        out = standardize_along(t, axes)
        assert np.allclose(out.mean(axis=axes), 0, atol=1e-13)
        assert np.allclose(out.var(axis=axes), 1, atol=1e-12)


def test_degenerate_slice_reports_its_index():
    t = np.arange(12.0).reshape(3, 4)
    t[1] = 7.0
    with pytest.raises(DegenerateInputError) as info:
        standardize_along(t, (1,))
    assert info.value.index == (1,)


def test_unified_operator_consistency(rng):
    Y = rng.standard_normal((6, 5))
    s = spec("bn", 6)
    s.gamma, s.beta = rng.uniform(0.5, 2, 6), rng.standard_normal(6)
    expected = s.gamma[:, None] * standardize_along(Y, (1,)) + s.beta[:, None]
    assert np.max(np.abs(batch_norm(Y, s) - expected)) <= 1e-12
    s = spec("ln", 6)
    s.gamma, s.beta = rng.uniform(0.5, 2, 6), rng.standard_normal(6)
    expected = s.gamma[:, None] * standardize_along(Y, (0,)) + s.beta[:, None]
    assert np.max(np.abs(layer_norm(Y, s) - expected)) <= 1e-12


# --- batch norm ------------------------------------------------------------

def test_batch_norm_b2_example():
    out = batch_norm(np.array([[3.0, 7.0]]), spec("bn", 1))
    assert np.array_equal(out, [[-1.0, 1.0]])


@given(seeds)
def test_batch_norm_b2_is_exactly_plus_minus_one(seed):
    Y = np.random.default_rng(seed).standard_normal((16, 2)) * 10.0 ** np.random.default_rng(seed).uniform(-5, 5)
    out = batch_norm(Y, spec("bn", 16))
    assert all(tuple(r) in {(1.0, -1.0), (-1.0, 1.0)} for r in out)


def test_batch_norm_fixed_point():
    row = standardize(np.array([1.0, 4.0, 2.0, 9.0]))
    assert np.allclose(batch_norm(row[None, :], spec("bn", 1)), row[None, :], atol=1e-15)


@given(seeds)
def test_batch_norm_permutation_equivariance(seed):
    r = np.random.default_rng(seed)
    Y = r.standard_normal((5, 7))
    perm = r.permutation(7)
    s = spec("bn", 5)
    assert np.allclose(batch_norm(Y[:, perm], s), batch_norm(Y, s)[:, perm], atol=1e-14)


@given(seeds, st.floats(1e-3, 100))
def test_data_based_scaling_invariance(seed, alpha):
    Y = np.random.default_rng(seed).standard_normal((8, 6))
    for fn, s in [(batch_norm, spec("bn", 8)), (layer_norm, spec("ln", 8))]:
        assert np.max(np.abs(fn(alpha * Y, s) - fn(Y, s))) <= 1e-12
    t = Y.reshape(4, 2, 6)
    assert np.max(np.abs(group_norm(alpha * t, 2, spec("gn", groups=2))
                         - group_norm(t, 2, spec("gn", groups=2)))) <= 1e-12


def test_batch_norm_train_needs_two_samples():
    with pytest.raises(BatchTooSmallError):
        batch_norm(np.ones((3, 1)), spec("bn", 3))


def test_batch_norm_eval_uses_running_stats(rng):
    s = spec("bn", 3, eps=1e-5)
    Y = rng.standard_normal((3, 10)) * 2 + 1
    for _ in range(200):
        update_running_stats(s, Y)
    assert np.allclose(s.running_mean, Y.mean(axis=1), atol=1e-8)
    assert np.allclose(s.running_var, Y.var(axis=1), atol=1e-8)
    s.mode = "eval"
    one = batch_norm(Y[:, :1], s)  # a single sample works in eval mode
    expected = (Y[:, :1] - s.running_mean[:, None]) / np.sqrt(s.running_var[:, None] + 1e-10)
    assert np.allclose(one, expected, atol=1e-14)


# --- layer / group / instance norm ------------------------------------------

@given(seeds)
def test_layer_norm_weight_centered_path(seed):
    r = np.random.default_rng(seed)
    W, X = r.standard_normal((6, 4)), r.standard_normal((4, 5))
    Wc = W - W.mean(axis=0, keepdims=True)  # subtract the mean row
    Z = Wc @ X
    dual = np.sqrt(6) * Z / np.linalg.norm(Z, axis=0, keepdims=True)
    assert np.max(np.abs(layer_norm(W @ X, spec("ln", 6)) - dual)) <= 1e-10


@given(seeds, st.floats(-5, 5))
def test_layer_norm_row_shift_invariance(seed, shift):
    r = np.random.default_rng(seed)
    W, X = r.standard_normal((6, 4)), r.standard_normal((4, 5))
    c = shift * r.standard_normal(4)
    shifted = W + np.outer(np.ones(6), c)
    assert np.max(np.abs(layer_norm(shifted @ X, spec("ln", 6))
                         - layer_norm(W @ X, spec("ln", 6)))) <= 1e-9


def test_group_norm_boundaries(rng):
    t = rng.standard_normal((4, 3, 5))
    ln = layer_norm(t.reshape(12, 5), spec("ln", 12)).reshape(4, 3, 5)
    assert np.max(np.abs(group_norm(t, 1, spec("gn", groups=1)) - ln)) <= 1e-14
    assert np.max(np.abs(group_norm(t, 4, spec("gn", groups=4))
                         - instance_norm(t, spec("in")))) <= 1e-14


def test_group_norm_rejects_bad_group_count(rng):
    with pytest.raises(ConfigurationError):
        group_norm(rng.standard_normal((4, 2, 3)), 3, spec("gn", groups=3))


def test_instance_norm_constant_channel_is_degenerate(rng):
    t = rng.standard_normal((3, 4, 2))
    t[1, :, 0] = 2.5
    with pytest.raises(DegenerateInputError):
        instance_norm(t, spec("in"))


@given(seeds)
def test_instance_norm_per_channel_affine_invariance(seed):
    r = np.random.default_rng(seed)
    t = r.standard_normal((3, 4, 5))
    a = r.uniform(0.1, 5, size=(3, 1, 5))
    b = r.uniform(-5, 5, size=(3, 1, 5))
    assert np.max(np.abs(instance_norm(a * t + b, spec("in")) - instance_norm(t, spec("in")))) <= 1e-9


# --- weight-based methods --------------------------------------------------

def test_weight_norm_examples(rng):
    assert np.allclose(weight_norm([3.0, 4.0], 1.0), [0.6, 0.8], atol=1e-15)
    v = rng.standard_normal(5)
    assert np.allclose(weight_norm(3.0 * v, 2.0), weight_norm(v, 2.0), atol=1e-15)
    assert np.array_equal(weight_norm(v, 0.0), np.zeros(5))
    with pytest.raises(DegenerateInputError):
        weight_norm(np.zeros(3), 1.0)


@given(seeds, st.floats(-10, 10))
def test_weight_norm_length(seed, g):
    v = np.random.default_rng(seed).standard_normal(7)
    assert abs(np.linalg.norm(weight_norm(v, g)) - abs(g)) <= 1e-12 * max(1, abs(g))


def test_weight_standardize_examples():
    assert np.allclose(weight_standardize([2.0, 4.0], "ws"), [-1, 1], atol=1e-15)
    assert np.allclose(weight_standardize([2.0, 4.0], "cwn"), [-1 / np.sqrt(2), 1 / np.sqrt(2)],
                       atol=1e-15)
    with pytest.raises(DegenerateInputError):
        weight_standardize([1.0, 1.0, 1.0])


@given(st.integers(2, 40).flatmap(lambda n: st.tuples(st.just(n), seeds)))
def test_ws_is_sqrt_n_cwn_bitwise(args):
    n, seed = args
    w = np.random.default_rng(seed).standard_normal(n)
    ws, cwn = weight_standardize(w, "ws"), weight_standardize(w, "cwn")
    assert np.array_equal(ws, np.sqrt(n) * cwn)
    assert abs(np.linalg.norm(ws) - np.sqrt(n)) <= 1e-12 * np.sqrt(n)
    assert abs(np.linalg.norm(cwn) - 1.0) <= 1e-12


def test_spectral_normalize_examples(rng):
    assert np.allclose(spectral_normalize(np.eye(3)), np.eye(3), atol=1e-14)
    assert np.allclose(spectral_normalize(np.diag([3.0, 1.0])), np.diag([1, 1 / 3]), atol=1e-12)
    W = spectral_normalize(rng.standard_normal((8, 8)))
    assert abs(np.sqrt(sym_eigen(W.T @ W).eigenvalues[0]) - 1.0) <= 1e-5


# --- covariance geometry ---------------------------------------------------

def test_covariance_examples(rng):
    col = rng.standard_normal((5, 1))
    assert np.array_equal(covariance(np.repeat(col, 4, axis=1)), np.zeros((5, 5)))
    X = _whiten(rng.standard_normal((4, 20)))
    assert np.max(np.abs(covariance(X) - np.eye(4))) <= 1e-10
    rep = kernel_analysis(covariance(rng.standard_normal((16, 4))))
    assert rep.rank <= 4 and rep.rank + rep.kernel_dim == 16


def test_kernel_analysis_examples(rng):
    rep = kernel_analysis(np.eye(5))
    assert rep.rank == 5 and rep.kernel_dim == 0
    S = covariance(rng.standard_normal((8, 3)))
    rep = kernel_analysis(S)
    assert rep.kernel_dim >= 5
    w = rep.kernel_basis @ rng.standard_normal(rep.kernel_dim)
    assert np.linalg.norm(w @ S) <= 1e-8


@given(st.integers(2, 16), st.integers(2, 16), seeds)
def test_kernel_dimension_bound(n, B, seed):
    rep = kernel_analysis(covariance(np.random.default_rng(seed).standard_normal((n, B))))
    assert rep.kernel_dim >= n - B
    assert rep.rank <= min(n, B)


def test_kernel_collapse_signal(rng):
    X = rng.standard_normal((16, 4))
    rep = kernel_analysis(covariance(X))
    w = rep.kernel_basis[:, 0]
    with pytest.raises(KernelCollapse) as info:
        effective_weight(w, X, 2.0, 0.75)
    assert np.array_equal(info.value.output, np.full(4, 0.75))
    s = NormalizerSpec("bn", eps=1e-5, gamma=np.array([2.0]), beta=np.array([0.75]))
    assert np.max(np.abs(batch_norm((w @ X)[None, :], s) - 0.75)) <= 1e-8


@given(seeds)
def test_effective_weight_reproduces_batch_norm(seed):
    r = np.random.default_rng(seed)
    X, w = r.standard_normal((5, 9)), r.standard_normal(5)
    g, b = r.uniform(0.5, 2), r.standard_normal()
    ew = effective_weight(w, X, g, b)
    s = NormalizerSpec("bn", eps=0.0, gamma=np.array([g]), beta=np.array([b]))
    assert np.max(np.abs(ew.w_prime @ X + ew.b_prime - batch_norm((w @ X)[None, :], s)[0])) <= 1e-12
    q = ew.w_prime @ covariance(X) @ ew.w_prime
    assert abs(q - g * g) <= 1e-8 * g * g


def test_whitened_batch_norm_degenerates_to_weight_norm(rng):
    X = _whiten(rng.standard_normal((6, 30)))
    w = rng.standard_normal(6)
    ew = effective_weight(w, X, 1.0, 0.0)
    cos = ew.w_prime @ weight_norm(w, 1.0) / np.linalg.norm(ew.w_prime)
    assert cos >= 1 - 1e-8
