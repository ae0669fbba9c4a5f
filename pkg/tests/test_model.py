import numpy as np
import pytest
from scipy.signal import correlate

from wsseg.gradcheck import check_network
from wsseg.model import ContractError, TinyNet, col2im, conv_forward, im2col
from wsseg.losses import softmax


def _scipy_conv(x, w, b):
    """Same-padded multi-channel cross-correlation, one output channel at a time."""
    C, B = x.shape[:2]
    out = np.zeros((w.shape[0], B) + x.shape[2:])
    for o in range(w.shape[0]):
        for bi in range(B):
            out[o, bi] = sum(correlate(x[i, bi], w[o, i], mode="same") for i in range(C)) + b[o]
    return out


@pytest.mark.parametrize("shape, k", [((2, 3, 7, 6), 3), ((3, 2, 5, 4, 6), 3), ((2, 2, 6, 6), 5)])
def test_conv_matches_scipy(shape, k):
    rng = np.random.default_rng(0)
    x = rng.normal(size=shape)
    w = rng.normal(size=(4, shape[0]) + (k,) * (len(shape) - 2))
    b = rng.normal(size=4)
    out, _ = conv_forward(x, w, b)
    np.testing.assert_allclose(out, _scipy_conv(x, w, b), atol=1e-12)


def test_col2im_is_adjoint_of_im2col():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 5, 4))
    cols = im2col(x, 3)
    y = rng.normal(size=cols.shape)
    lhs = np.vdot(cols, y)
    rhs = np.vdot(x, col2im(y, 3, x.shape))
    assert lhs == pytest.approx(rhs, rel=1e-12)


@pytest.mark.parametrize("ndim", [2, 3])
def test_network_gradients_match_finite_differences(ndim):
    res = check_network(n_instances=2, seed=3, ndim=ndim)
    assert res.passed, res.line()


def test_forward_shapes_and_dtype():
    net = TinyNet(1, 8, 5, 3, 2)
    logits, _ = net.forward(np.zeros((3, 1, 10, 12)))
    assert logits.shape == (3, 5, 10, 12) and logits.dtype == np.float32
    assert net.predict(np.zeros((1, 1, 4, 4))).shape == (1, 4, 4)
    assert net.n_params == 8 * 9 + 8 + 8 * 8 * 9 + 8 + 5 * 8 + 5


def test_rejects_bad_input_and_stale_cache():
    net = TinyNet(1, 4, 3, 3, 2)
    with pytest.raises(ContractError):
        net.forward(np.zeros((1, 2, 4, 4)))
    with pytest.raises(ContractError):
        TinyNet(kernel=4)
    logits, cache = net.forward(np.zeros((1, 1, 4, 4)))
    net.set_params(net.params)
    with pytest.raises(ContractError, match="stale"):
        net.backward(cache, np.zeros_like(logits))


def test_foreground_prior_sets_initial_probabilities():
    net = TinyNet(1, 4, 5, 3, 2, fg_prior=0.01, dtype=np.float64)
    net.params["head.w"][:] = 0
    net.version += 1
    logits, _ = net.forward(np.ones((1, 1, 3, 3)))
    p = softmax(logits[0], axis=0)
    np.testing.assert_allclose(p[1:], 0.01, rtol=1e-12)
    np.testing.assert_allclose(p[0], 0.96, rtol=1e-12)
    with pytest.raises(ContractError):
        TinyNet(n_classes=5, fg_prior=0.3)


def test_same_seed_same_weights():
    a, b = TinyNet(seed=4), TinyNet(seed=4)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])
    assert not np.array_equal(TinyNet(seed=5).params["conv1.w"], a.params["conv1.w"])


def test_astype_copies_parameters():
    net = TinyNet(seed=1)
    d = net.astype(np.float64)
    assert d.params["conv1.w"].dtype == np.float64
    np.testing.assert_allclose(d.params["conv1.w"], net.params["conv1.w"])
