import numpy as np
import pytest
from sklearn.base import clone

from latentmap.compression import PCACompressor, PcaTransform, RankError, decode, encode, pca_fit


def _low_rank_samples(rng, n=200, c_full=12, rank=3):
    basis = np.linalg.qr(rng.standard_normal((c_full, rank)))[0]
    offset = rng.standard_normal(c_full)
    return offset + rng.standard_normal((n, rank)) @ basis.T * 3.0


def test_subspace_round_trip_is_exact(rng):
    samples = _low_rank_samples(rng)
    t = pca_fit(samples, 3)
    assert np.max(np.abs(t.decode(t.encode(samples)) - samples)) < 1e-6


def test_dims_512_to_64(rng):
    t = pca_fit(rng.standard_normal((300, 512)), 64)
    assert t.dims == (512, 64)
    np.testing.assert_allclose(t.basis.T @ t.basis, np.eye(64), atol=1e-10)


def test_full_basis_reconstructs_exactly(rng):
    samples = rng.standard_normal((50, 10))
    t = pca_fit(samples, 10)
    np.testing.assert_allclose(t.decode(t.encode(samples)), samples, atol=1e-9)


def test_encode_mean_and_basis_columns(rng):
    t = pca_fit(rng.standard_normal((100, 8)), 4)
    np.testing.assert_allclose(t.encode(t.mean), np.zeros(4), atol=1e-12)
    for j in range(4):
        np.testing.assert_allclose(t.encode(t.mean + t.basis[:, j]), np.eye(4)[j], atol=1e-12)
    np.testing.assert_allclose(t.decode(np.zeros(4)), t.mean)


def test_projection_is_idempotent(rng):
    t = pca_fit(rng.standard_normal((100, 8)), 3)
    y = rng.standard_normal((20, 8))
    z = t.encode(y)
    np.testing.assert_allclose(t.encode(t.decode(z)), z, atol=1e-9)


def test_lift_commutes_with_expectation(rng):
    t = pca_fit(rng.standard_normal((100, 8)), 3)
    z = rng.standard_normal((1000, 3))
    np.testing.assert_allclose(t.decode(z.mean(axis=0)), t.decode(z).mean(axis=0), atol=1e-9)


def test_components_descend_and_sign_convention(rng):
    scales = np.array([5.0, 3.0, 2.0, 1.0, 0.5, 0.1])
    samples = rng.standard_normal((2000, 6)) * scales
    t = pca_fit(samples, 6)
    variances = t.encode(samples).var(axis=0)
    assert np.all(np.diff(variances) < 0)
    pivots = np.argmax(np.abs(t.basis), axis=0)
    assert np.all(t.basis[pivots, np.arange(6)] > 0)


def test_reconstruction_error_non_increasing_in_rank(rng):
    samples = rng.standard_normal((300, 10)) * np.linspace(3, 0.2, 10)
    errs = [pca_fit(samples, c).reconstruction_mse(samples) for c in range(1, 11)]
    assert all(b <= a + 1e-12 for a, b in zip(errs, errs[1:]))


def test_fit_is_permutation_invariant(rng):
    samples = rng.standard_normal((200, 7)) * np.arange(1, 8)
    a = pca_fit(samples, 4)
    b = pca_fit(samples[rng.permutation(200)], 4)
    np.testing.assert_allclose(a.mean, b.mean, atol=1e-12)
    np.testing.assert_allclose(a.basis, b.basis, atol=1e-9)


def test_errors():
    with pytest.raises(RankError):
        pca_fit(np.ones((10, 4)), 2)
    with pytest.raises(ValueError):
        pca_fit(np.random.default_rng(0).standard_normal((2, 4)), 3)
    with pytest.raises(ValueError):
        pca_fit(np.zeros((5, 4)), 5)
    t = pca_fit(np.random.default_rng(0).standard_normal((20, 4)), 2)
    with pytest.raises(ValueError):
        encode(t, np.zeros(3))
    with pytest.raises(ValueError):
        decode(t, np.zeros(3))


def test_file_round_trip(tmp_path, rng):
    t = pca_fit(rng.standard_normal((50, 9)), 4)
    path = tmp_path / "p.lbkp"
    t.save(path)
    back = PcaTransform.load(path)
    assert back.dims == (9, 4)
    np.testing.assert_allclose(back.basis, t.basis, atol=1e-6)
    assert back.to_bytes() == path.read_bytes()
    with pytest.raises(ValueError):
        PcaTransform.from_bytes(path.read_bytes()[:-1])
    with pytest.raises(ValueError):
        PcaTransform.from_bytes(b"XXXX" + path.read_bytes()[4:])


def test_sklearn_wrapper(rng):
    X = rng.standard_normal((60, 6))
    est = PCACompressor(n_components=3)
    assert clone(est).get_params() == {"n_components": 3}
    Z = est.fit_transform(X)
    assert Z.shape == (60, 3)
    np.testing.assert_allclose(est.inverse_transform(Z), pca_fit(X, 3).decode(Z))
    wrapped = PCACompressor.from_transform(est.transform_)
    np.testing.assert_allclose(wrapped.transform(X), Z)
