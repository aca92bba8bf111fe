import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from sdndti import SDnDTIDenoiser
from sdndti.denoiser import build_model
from sdndti.exceptions import ShapeError
from sdndti.selfsup import build_selfsup_pairs


def _tiny(**kw):
    params = dict(k=2, block_size=8, n_blocks=2, epochs=2, learning_rate=1e-3)
    params.update(kw)
    return SDnDTIDenoiser(**params)


def test_params_roundtrip():
    est = SDnDTIDenoiser(k=8, epochs=3)
    p = est.get_params()
    assert p["k"] == 8 and p["epochs"] == 3 and p["learning_rate"] == 1e-4
    est.set_params(k=4)
    assert est.k == 4
    c = clone(est)
    assert c.get_params() == est.get_params() and c is not est


def test_not_fitted(small_acq):
    noisy, _, scheme, plan, mask = small_acq
    with pytest.raises(NotFittedError):
        SDnDTIDenoiser().transform(noisy, scheme=scheme, plan=plan, mask=mask)


def test_input_validation(small_acq):
    noisy, _, scheme, plan, mask = small_acq
    est = _tiny()
    with pytest.raises(ShapeError):
        est.fit(noisy.data[..., 0], scheme=scheme, plan=plan, mask=mask)
    with pytest.raises(ShapeError):
        est.fit(noisy.data[..., :-1], scheme=scheme, plan=plan, mask=mask)
    bad = noisy.data.copy()
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        est.fit(bad, scheme=scheme, plan=plan, mask=mask)
    with pytest.raises(ShapeError):
        est.fit(noisy, scheme=scheme, plan=plan, mask=mask, init_model=build_model(5, 2))


def test_fit_transform(small_acq):
    noisy, _, scheme, plan, mask = small_acq
    est = _tiny().fit(noisy, scheme=scheme, plan=plan, mask=mask)
    assert est.n_channels_ == 19
    assert len(est.history_) == 2
    assert est.best_epoch_ in (1, 2)
    out = est.transform(noisy, scheme=scheme, plan=plan, mask=mask)
    assert out.shape == (20, 20, 20, 19)
    assert not out[~mask.data].any()
    again = _tiny().fit_transform(noisy, scheme=scheme, plan=plan, mask=mask)
    np.testing.assert_array_equal(out, again)


def test_block_size_clipped(small_acq):
    noisy, _, scheme, plan, mask = small_acq
    pairs = build_selfsup_pairs(noisy, scheme, plan, mask)
    blocks = _tiny(block_size=64, flip=False).make_blocks(pairs)
    assert len(blocks) == 6
    assert blocks[0].mask.shape == (20, 20, 20)
