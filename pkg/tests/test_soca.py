import numpy as np
import pytest

from avrfn.layers import Conv2d
from avrfn.soca import (
    CovarianceState,
    GateParams,
    attention_gate,
    compensate,
    covariance,
    covariance_pool,
    init_gate,
    newton_schulz,
    prenormalize,
    soca_apply,
    soca_state,
)
from avrfn.tensor import Tensor, reduce
from gradcheck import check


def eig_sqrt(s):
    w, u = np.linalg.eigh(s)
    return (u * np.sqrt(np.clip(w, 0, None))) @ u.T


def brute_covariance(x):
    """(1/s) sum_p (x_p - mean)(x_p - mean)^T over pixels of an (h, w, c) map."""
    h, w, c = x.shape
    pix = x.reshape(-1, c)
    mean = pix.sum(axis=0) / len(pix)
    out = np.zeros((c, c))
    for p in pix:
        d = p - mean
        out += np.outer(d, d)
    return out / len(pix)


def state_from(sigma_hat):
    st = CovarianceState(sigma=Tensor(sigma_hat))
    st.sigma_hat = st.sigma
    return newton_schulz(st)


def zero_gate(c, hidden):
    z = lambda shape: Tensor(np.zeros(shape), requires_grad=True)  # noqa: E731
    return GateParams(Conv2d(z((1, 1, c, hidden)), z(hidden)), Conv2d(z((1, 1, hidden, c)), z(c)))


def test_constant_map_has_zero_covariance():
    x = Tensor(np.ones((1, 3, 3, 4)) * np.array([1.0, -2.0, 0.5, 7.0]))
    np.testing.assert_allclose(covariance(x).sigma.data, 0.0, atol=1e-15)


def test_two_pixel_covariance():
    a, b = 3.0, -1.5
    sigma = covariance(Tensor(np.array([a, b]).reshape(1, 1, 2, 1))).sigma.data
    np.testing.assert_allclose(sigma[0, 0, 0], (a - b) ** 2 / 4, rtol=1e-14)


def test_covariance_matches_brute_force(rng):
    x = rng.standard_normal((2, 2, 4, 4))
    sigma = covariance(Tensor(x)).sigma.data
    for n in range(2):
        np.testing.assert_allclose(sigma[n], brute_covariance(x[n]), atol=1e-12)


def test_covariance_matches_centering_matrix_form(rng):
    x = rng.standard_normal((1, 3, 3, 5))
    X = x.reshape(9, 5)
    s = 9
    i_bar = (np.eye(s) - np.ones((s, s)) / s) / s
    np.testing.assert_allclose(covariance(Tensor(x)).sigma.data[0], X.T @ i_bar @ X, atol=1e-12)


def test_covariance_symmetric_psd(rng):
    sigma = covariance(Tensor(rng.standard_normal((3, 4, 4, 6)))).sigma.data
    np.testing.assert_allclose(sigma, np.swapaxes(sigma, 1, 2), atol=1e-10)
    for s in sigma:
        assert np.linalg.eigvalsh(s).min() >= -1e-8 * np.linalg.norm(s)


def test_prenormalize_scaled_identity():
    st = prenormalize(CovarianceState(sigma=Tensor(2.0 * np.eye(4)[None])))
    np.testing.assert_allclose(st.sigma_hat.data[0], np.eye(4) / 4, atol=1e-9)
    np.testing.assert_allclose(st.trace.data, [8.0], atol=1e-7)


def test_prenormalize_zero_is_finite():
    st = prenormalize(CovarianceState(sigma=Tensor(np.zeros((1, 3, 3)))))
    assert np.all(st.sigma_hat.data == 0)


def test_prenormalized_trace_is_one(rng):
    a = rng.standard_normal((5, 5))
    st = prenormalize(CovarianceState(sigma=Tensor((a @ a.T + np.eye(5))[None])))
    assert abs(np.trace(st.sigma_hat.data[0]) - 1.0) < 1e-10


@pytest.mark.parametrize("c", [1, 2, 3, 4])
def test_newton_schulz_scaled_identity(c):
    y = state_from(np.eye(c) / c).y_n.data
    np.testing.assert_allclose(y, np.eye(c) / np.sqrt(c), atol=1e-6)


def test_newton_schulz_diagonal():
    y = state_from(np.diag([0.7, 0.3])).y_n.data
    np.testing.assert_allclose(y, np.diag(np.sqrt([0.7, 0.3])), atol=1e-4)


def test_newton_schulz_random_spd_small(rng):
    a = rng.standard_normal((4, 4))
    s = a @ a.T + 0.5 * np.eye(4)
    s /= np.trace(s)
    st = state_from(s)
    errs = [np.linalg.norm(y.data @ y.data - s) / np.linalg.norm(s) for y in st.iterates]
    assert errs[-1] <= 1e-2
    assert all(b <= a + 1e-15 for a, b in zip(errs, errs[1:]))


def test_newton_schulz_z_tracks_inverse_sqrt():
    s = np.diag([0.6, 0.4])
    st = CovarianceState(sigma=Tensor(s))
    st.sigma_hat = st.sigma
    newton_schulz(st, 20)
    np.testing.assert_allclose(st.z_n.data, np.diag(1 / np.sqrt([0.6, 0.4])), atol=1e-10)


def test_compensate_identity_and_scaled():
    st = compensate(newton_schulz(prenormalize(CovarianceState(sigma=Tensor(np.eye(3)[None]))), 20))
    np.testing.assert_allclose(st.y_hat.data[0], np.eye(3), atol=1e-8)
    st = compensate(newton_schulz(prenormalize(CovarianceState(sigma=Tensor(4 * np.eye(2)[None])))))
    np.testing.assert_allclose(st.y_hat.data[0], 2 * np.eye(2), atol=1e-4)


def test_compensate_random_spd_vs_eigen_oracle(rng):
    x = rng.standard_normal((1, 8, 8, 4))
    st = soca_state(Tensor(x))
    sigma = st.sigma.data[0]
    ref = eig_sqrt(sigma)
    assert np.linalg.norm(st.y_hat.data[0] - ref) / np.linalg.norm(ref) <= 1e-2


def test_twenty_iterations_well_conditioned(rng):
    for c in (8, 32, 64):
        q, _ = np.linalg.qr(rng.standard_normal((c, c)))
        sigma = (q * np.geomspace(1.0, 0.01, c)) @ q.T  # condition number 100
        st = compensate(newton_schulz(prenormalize(CovarianceState(sigma=Tensor(sigma[None]))), 20))
        y = st.y_hat.data[0]
        assert np.linalg.norm(y @ y - sigma) / np.linalg.norm(sigma) <= 1e-6


def test_pooling():
    for yhat, expected in ((np.eye(4), [0.25] * 4), (np.ones((3, 3)), [1.0] * 3)):
        st = CovarianceState(sigma=Tensor(yhat[None]))
        st.y_hat = st.sigma
        np.testing.assert_allclose(covariance_pool(st).data[0], expected, atol=1e-15)


def test_pooling_matches_row_mean_loop(rng):
    y = rng.standard_normal((5, 5))
    st = CovarianceState(sigma=Tensor(y[None]))
    st.y_hat = st.sigma
    z = covariance_pool(st).data[0]
    for i in range(5):
        assert abs(z[i] - sum(y[i, j] for j in range(5)) / 5) < 1e-12


def test_zero_gate_gives_half():
    att = attention_gate(Tensor(np.random.default_rng(0).standard_normal((2, 8))), zero_gate(8, 2))
    np.testing.assert_array_equal(att.data, 0.5)


def test_gate_range_and_dimension_check(rng):
    gate = init_gate(8, reduction=4, seed=3)
    att = attention_gate(Tensor(rng.standard_normal((3, 8)) * 5), gate).data
    assert att.shape == (3, 1, 1, 8)
    assert np.all((att > 0) & (att < 1))
    with pytest.raises(ValueError):
        attention_gate(Tensor(np.zeros((1, 6))), gate)


def test_gate_gradients(rng):
    gate = init_gate(8, reduction=2, seed=1)
    z = Tensor(rng.standard_normal((2, 8)), requires_grad=True)
    tensors = [z, gate.w0.kernel, gate.w0.bias, gate.w1.kernel, gate.w1.bias]
    assert check(lambda: reduce("sum", attention_gate(z, gate)), tensors) < 1e-4


def test_soca_zero_gate_halves_input(rng):
    x = rng.standard_normal((2, 4, 4, 8))
    out = soca_apply(Tensor(x), zero_gate(8, 1))
    assert out.shape == x.shape
    np.testing.assert_array_equal(out.data, 0.5 * x)


def test_soca_end_to_end_gradient(rng):
    gate = init_gate(8, reduction=2, seed=5)
    x = Tensor(rng.standard_normal((1, 4, 4, 8)), requires_grad=True)
    w = rng.standard_normal((1, 4, 4, 8))
    tensors = [x, gate.w0.kernel, gate.w0.bias, gate.w1.kernel, gate.w1.bias]
    assert check(lambda: reduce("sum", soca_apply(x, gate) * w), tensors) < 1e-3


def test_soca_gradient_through_newton_schulz_only(rng):
    x = Tensor(rng.standard_normal((2, 3, 3, 4)), requires_grad=True)
    w = rng.standard_normal((2, 4, 4))
    assert check(lambda: reduce("sum", soca_state(x).y_hat * w), [x]) < 1e-5


def test_channel_permutation_equivariance(rng):
    x = rng.standard_normal((1, 5, 5, 6))
    perm = rng.permutation(6)
    z = covariance_pool(soca_state(Tensor(x))).data[0]
    zp = covariance_pool(soca_state(Tensor(x[..., perm]))).data[0]
    np.testing.assert_allclose(zp, z[perm], atol=1e-12)


def test_homogeneity(rng):
    x = rng.standard_normal((1, 6, 6, 5))
    a = 3.7
    s1, s2 = soca_state(Tensor(x)), soca_state(Tensor(a * x))
    np.testing.assert_allclose(s2.sigma.data, a * a * s1.sigma.data, rtol=1e-8, atol=1e-12)
    np.testing.assert_allclose(s2.y_hat.data, a * s1.y_hat.data, rtol=1e-8, atol=1e-10)


def test_soca_multiplier_in_unit_interval(rng):
    gate = init_gate(8, reduction=4, seed=9)
    x = rng.uniform(0.1, 2.0, (2, 4, 4, 8))
    out = soca_apply(Tensor(x), gate).data
    ratio = out / x
    assert np.all((ratio > 0) & (ratio < 1))
