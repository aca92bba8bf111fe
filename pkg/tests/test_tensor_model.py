import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from sdndti.exceptions import InvalidSignalError, SingularSchemeError
from sdndti.gradient_design import design_matrix
from sdndti.tensor_model import (
    CLAMPED_SIGNAL,
    NEGATIVE_EIGENVALUE,
    OUTSIDE_MASK,
    TensorField,
    adc,
    dti_metrics,
    eigen_sym3,
    fit_tensor,
    fractional_anisotropy,
    matrix_to_tensor,
    synthesize_dwis,
    tensor_to_matrix,
)
from sdndti.volume_io import GradientScheme, Volume4D


def _dirs(n, seed):
    v = np.random.default_rng(seed).normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _scheme(n_dir, seed=0, n_b0=1, b=1.0):
    bvecs = np.vstack([np.zeros((n_b0, 3)), _dirs(n_dir, seed)])
    return GradientScheme(np.r_[np.zeros(n_b0), np.full(n_dir, b)], bvecs)


def _random_spd(n, seed, lo=0.1, hi=3.0):
    rng = np.random.default_rng(seed)
    R = Rotation.random(n, random_state=rng).as_matrix()
    lam = rng.uniform(lo, hi, size=(n, 3))
    M = R @ (lam[:, :, None] * np.swapaxes(R, 1, 2))
    return matrix_to_tensor(M), lam


def _field(tensors):
    n = len(tensors)
    return TensorField(tensors.reshape(n, 1, 1, 6))


def test_adc_examples():
    assert adc(100.0, 100.0, 1.0)[0] == 0
    c, clamped = adc(100 * np.exp(-0.8), 100.0, 1.0)
    assert abs(c - 0.8) < 1e-14 and not clamped
    c, clamped = adc(0.0, 100.0, 1.0)
    assert abs(c - 13.815510557964274) < 1e-12 and clamped
    assert adc(120.0, 100.0, 1.0)[0] < 0


def test_adc_rejects_bad_inputs():
    with pytest.raises(InvalidSignalError):
        adc(1.0, 0.0, 1.0)
    with pytest.raises(InvalidSignalError):
        adc(1.0, 1.0, 0.0)


def test_matrix_roundtrip_order():
    D = np.array([1.0, 2, 3, 4, 5, 6])
    M = tensor_to_matrix(D)
    np.testing.assert_array_equal(M, [[1, 4, 5], [4, 2, 6], [5, 6, 3]])
    np.testing.assert_array_equal(matrix_to_tensor(M), D)


def test_fit_isotropic_exact():
    s = _scheme(6, seed=3)
    data = np.empty((1, 1, 1, 7))
    data[..., 0] = 100
    data[..., 1:] = 100 * np.exp(-0.8)
    tf = fit_tensor(data, s)
    np.testing.assert_allclose(tf.tensor[0, 0, 0], [0.8, 0.8, 0.8, 0, 0, 0], atol=1e-10)


def test_fit_coplanar_singular():
    ang = np.linspace(0, np.pi, 6, endpoint=False)
    dirs = np.stack([np.cos(ang), np.sin(ang), np.zeros(6)], axis=1)
    s = GradientScheme(np.r_[0.0, np.ones(6)], np.vstack([np.zeros(3), dirs]))
    with pytest.raises(SingularSchemeError):
        fit_tensor(np.ones((1, 1, 1, 7)), s)


def test_fit_recovers_random_spd():
    D, _ = _random_spd(10_000, 0)
    tf = _field(D)
    s = _scheme(18, seed=1)
    s0 = np.full(tf.dims, 1000.0)
    sig = synthesize_dwis(tf, s0, s)
    back = fit_tensor(sig, s).tensor.reshape(-1, 6)
    rel = np.linalg.norm(back - D, axis=1) / np.linalg.norm(D, axis=1)
    assert rel.max() < 1e-8


def test_six_direction_fit_matches_inverse():
    s = _scheme(6, seed=5)
    rng = np.random.default_rng(2)
    data = np.concatenate([np.full((4, 1, 1, 1), 100.0), rng.uniform(20, 90, (4, 1, 1, 6))], axis=3)
    got = fit_tensor(data, s).tensor.reshape(-1, 6)
    A = design_matrix(s.bvecs[1:])
    C = -np.log(data[:, 0, 0, 1:] / 100.0)
    want = np.linalg.solve(A, C.T).T
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12 * np.abs(want).max())


def test_six_direction_synthesis_reproduces_input():
    s = _scheme(6, seed=8)
    rng = np.random.default_rng(4)
    data = np.concatenate([np.full((50, 1, 1, 1), 100.0), rng.uniform(5, 110, (50, 1, 1, 6))], axis=3)
    tf = fit_tensor(data, s)
    assert not (tf.flags & CLAMPED_SIGNAL).any()
    syn = synthesize_dwis(tf, data[..., 0], s).data
    np.testing.assert_allclose(syn, data, rtol=1e-10)


def test_synthesis_isotropic():
    tf = TensorField(np.tile([0.7, 0.7, 0.7, 0, 0, 0], (2, 2, 2, 1)).astype(float))
    s = _scheme(9, seed=0, n_b0=2, b=1.5)
    out = synthesize_dwis(tf, np.full((2, 2, 2), 80.0), s).data
    np.testing.assert_allclose(out[..., :2], 80.0)
    np.testing.assert_allclose(out[..., 2:], 80 * np.exp(-1.5 * 0.7), rtol=1e-14)


def test_synthesis_zero_outside_mask():
    tf = TensorField(np.tile([1.0, 1, 1, 0, 0, 0], (3, 3, 3, 1)))
    mask = np.zeros((3, 3, 3), bool)
    mask[1, 1, 1] = True
    out = synthesize_dwis(tf, np.ones((3, 3, 3)), _scheme(6), mask=mask).data
    assert not out[~mask].any()
    assert out[1, 1, 1].all()


def test_double_roundtrip_idempotent():
    D, _ = _random_spd(2000, 9)
    s = _scheme(12, seed=6)
    s0 = np.full((2000, 1, 1), 500.0)
    first = synthesize_dwis(_field(D), s0, s)
    again = synthesize_dwis(fit_tensor(first, s), s0, s)
    np.testing.assert_allclose(again.data, first.data, rtol=1e-8)


def test_fit_flags():
    s = _scheme(6, seed=2)
    data = np.full((2, 1, 1, 7), 50.0)
    data[0, 0, 0, 3] = 0.0
    mask = np.array([True, False]).reshape(2, 1, 1)
    tf = fit_tensor(Volume4D(data, s), mask=mask)
    assert tf.flags[0, 0, 0] == CLAMPED_SIGNAL
    assert tf.flags[1, 0, 0] == OUTSIDE_MASK
    assert not tf.tensor[1].any()


def test_eigen_examples():
    lam, _ = eigen_sym3([1.0, 1, 1, 0, 0, 0])
    np.testing.assert_array_equal(lam, [1, 1, 1])
    lam, vec = eigen_sym3([3.0, 2, 1, 0, 0, 0])
    np.testing.assert_array_equal(lam, [3, 2, 1])
    np.testing.assert_array_equal(vec[:, 0], [1, 0, 0])


def test_eigen_residuals():
    rng = np.random.default_rng(0)
    D = rng.normal(size=(1000, 6))
    lam, vec = eigen_sym3(D)
    M = tensor_to_matrix(D)
    scale = np.linalg.norm(M, axis=(1, 2))
    for i in range(3):
        r = np.einsum("nij,nj->ni", M, vec[:, :, i]) - lam[:, i, None] * vec[:, :, i]
        assert np.all(np.linalg.norm(r, axis=1) < 1e-12 * np.maximum(scale, 1))
    np.testing.assert_allclose(lam.sum(axis=1), np.trace(M, axis1=1, axis2=2), atol=1e-12)
    assert np.all(np.diff(lam, axis=1) <= 0)
    np.testing.assert_allclose(np.linalg.norm(vec, axis=1), 1.0, atol=1e-12)


def test_eigen_sign_convention():
    _, vec = eigen_sym3(np.random.default_rng(1).normal(size=(200, 6)))
    for v in np.moveaxis(vec, 2, 1).reshape(-1, 3):
        assert v[np.argmax(np.abs(v))] > 0


def _metrics_from_evals(lam):
    return dti_metrics(TensorField(np.array([[[[*lam, 0.0, 0.0, 0.0]]]])))


def test_metrics_isotropic():
    m = _metrics_from_evals([0.9, 0.9, 0.9])
    assert m.FA[0, 0, 0] == 0
    assert m.MD[0, 0, 0] == pytest.approx(0.9, abs=1e-15)
    assert m.AD[0, 0, 0] == m.RD[0, 0, 0] == pytest.approx(0.9, abs=1e-15)


def test_metrics_stick():
    m = _metrics_from_evals([1.0, 0.0, 0.0])
    assert m.FA[0, 0, 0] == pytest.approx(1.0, abs=1e-15)
    assert m.MD[0, 0, 0] == pytest.approx(1 / 3)
    assert m.RD[0, 0, 0] == 0


def test_metrics_321():
    m = _metrics_from_evals([3.0, 2.0, 1.0])
    assert m.MD[0, 0, 0] == pytest.approx(2.0, abs=1e-15)
    assert abs(m.FA[0, 0, 0] - 0.4629100498862757) < 1e-12
    np.testing.assert_array_equal(m.V1[0, 0, 0], [1, 0, 0])


def test_fa_zero_tensor():
    assert fractional_anisotropy(np.zeros(3)) == 0


def test_negative_eigenvalue_flagged():
    m = _metrics_from_evals([1.0, 0.5, -0.2])
    assert m.flags[0, 0, 0] & NEGATIVE_EIGENVALUE
    assert 0 <= m.FA[0, 0, 0] <= 1
    assert m.evals[0, 0, 0, 2] == -0.2


def test_metrics_identities_and_scaling():
    D, _ = _random_spd(500, 3)
    m = dti_metrics(_field(D))
    lam = m.evals
    np.testing.assert_array_equal(m.MD, lam.mean(axis=-1))
    np.testing.assert_array_equal(m.AD, lam[..., 0])
    np.testing.assert_array_equal(m.RD, (lam[..., 1] + lam[..., 2]) / 2)
    np.testing.assert_allclose(np.linalg.norm(m.V1, axis=-1), 1, atol=1e-9)
    for s in (0.01, 7.5):
        ms = dti_metrics(_field(s * D))
        np.testing.assert_allclose(ms.FA, m.FA, atol=1e-12)
        np.testing.assert_allclose(ms.MD, s * m.MD, rtol=1e-12)
        np.testing.assert_allclose(ms.AD, s * m.AD, rtol=1e-12)
        np.testing.assert_allclose(ms.RD, s * m.RD, rtol=1e-12)


def test_v1_rotates_with_tensor():
    D, _ = _random_spd(300, 4)
    R = Rotation.from_rotvec([0.4, -1.1, 0.3]).as_matrix()
    rotated = matrix_to_tensor(R @ tensor_to_matrix(D) @ R.T)
    v = dti_metrics(_field(D)).V1.reshape(-1, 3)
    w = dti_metrics(_field(rotated)).V1.reshape(-1, 3)
    cos = np.abs(np.sum((v @ R.T) * w, axis=1))
    np.testing.assert_allclose(cos, 1.0, atol=1e-9)


def test_partition_independence():
    D, _ = _random_spd(64, 5)
    whole = dti_metrics(_field(D))
    half = dti_metrics(_field(D[32:]))
    np.testing.assert_array_equal(whole.FA[32:], half.FA)
