import numpy as np
import pytest

from vderender import diffcore as dc
from vderender import objective as obj


def _imgs(seed=0, shape=(6, 7, 3)):
    rng = np.random.default_rng(seed)
    return rng.uniform(-0.5, 0.5, size=shape), rng.uniform(-0.5, 0.5, size=shape)


def test_weights_defaults_and_validation():
    w = obj.LossWeights()
    assert w.alpha_sm == 0.05 and w.alpha_p == 0.01 and w.lambda_ssim == 0.0
    with pytest.raises(ValueError):
        obj.LossWeights(alpha_sm=-1.0)


def test_occlusion_blend_examples():
    a, b = _imgs()
    g = dc.Graph()
    one, zero = np.ones((6, 7, 1)), np.zeros((6, 7, 1))
    np.testing.assert_allclose(obj.occlusion_blend(g.const(a), b, one).value, a)
    np.testing.assert_allclose(obj.occlusion_blend(g.const(a), b, zero).value, b)
    np.testing.assert_allclose(obj.occlusion_blend(g.const(a), b, one * 0.5).value,
                               0.5 * (a + b))
    with pytest.raises(ValueError):
        obj.occlusion_blend(g.const(a), b[:, :3], one)


def test_synthesis_loss_examples():
    a, _ = _imgs()
    g = dc.Graph()
    ones = np.ones((6, 7, 1))
    assert float(obj.synthesis_loss(g.const(a), a, ones).value) == 0.0
    assert float(obj.synthesis_loss(g.const(a + 0.1), a, ones).value) == pytest.approx(0.1)
    valid = ones.copy()
    valid[:2] = 0.0
    corrupt = a.copy()
    corrupt[:2] = 9.0
    base = float(obj.synthesis_loss(g.const(a + 0.1), a, valid).value)
    assert float(obj.synthesis_loss(g.const(a + 0.1), corrupt, valid).value) == \
        pytest.approx(base)
    with pytest.raises(ValueError):
        obj.synthesis_loss(g.const(a), a, np.zeros((6, 7, 1)))


def test_ssim_surrogate_zero_for_identical():
    a, b = np.random.default_rng(0).uniform(-0.5, 0.5, size=(2, 16, 16, 3))
    g = dc.Graph()
    w = obj.LossWeights(lambda_ssim=1.0)
    assert float(obj.synthesis_loss(g.const(a), a, np.ones((16, 16)), w).value) == \
        pytest.approx(0.0, abs=1e-12)
    assert float(obj.synthesis_loss(g.const(a), b, np.ones((16, 16)), w).value) > \
        float(obj.synthesis_loss(g.const(a), b, np.ones((16, 16))).value)


def test_smoothness_examples():
    g = dc.Graph()
    flat = np.zeros((8, 8, 3))
    assert float(obj.smoothness_loss(g.const(np.full((8, 8, 1), 4.0)), flat).value) == 0.0
    # depth edge on a strong image edge is suppressed relative to a flat image
    D = np.full((8, 8, 1), 2.0)
    D[:, 4:] = 6.0
    edge = np.zeros((8, 8, 3))
    edge[:, 4:] = 20.0
    on_edge = float(obj.smoothness_loss(g.const(D), edge).value)
    on_flat = float(obj.smoothness_loss(g.const(D), flat).value)
    assert on_edge < 1e-6 * on_flat
    with pytest.raises(ValueError):
        obj.smoothness_loss(g.const(np.zeros((8, 8, 1))), flat)


def test_smoothness_ramp_closed_form():
    # disparity ramp d = 1 + s*x, mean-normalized, on a flat image
    g = dc.Graph()
    H, W = 5, 6
    vals = []
    for s in (0.01, 0.02):
        disp = 1.0 + s * np.arange(W)
        D = np.broadcast_to(1.0 / disp, (H, W))[..., None].copy()
        got = float(obj.smoothness_loss(g.const(D), np.zeros((H, W, 3))).value)
        expected = s / disp.mean()
        assert got == pytest.approx(expected, rel=1e-9)
        vals.append(got)
    assert vals[1] > vals[0]


def test_total_loss_examples():
    a, _ = _imgs()
    g = dc.Graph()
    D = g.const(np.full((6, 7, 1), 3.0))
    occ = np.ones((6, 7, 1))
    assert float(obj.total_loss(g.const(a), g.const(a), a, occ, D, a).value) == 0.0
    rng = np.random.default_rng(1)
    Dr = g.const(rng.uniform(1, 5, size=(6, 7, 1)))
    pc, pf = g.const(a + 0.05), g.const(a - 0.02)
    w1 = obj.LossWeights(alpha_sm=0.05)
    w2 = obj.LossWeights(alpha_sm=0.10)
    base = float(obj.total_loss(pc, pf, a, occ, Dr, a, obj.LossWeights(alpha_sm=0.0)).value)
    l1 = float(obj.total_loss(pc, pf, a, occ, Dr, a, w1).value)
    l2 = float(obj.total_loss(pc, pf, a, occ, Dr, a, w2).value)
    assert base == pytest.approx(0.07)
    assert l2 - base == pytest.approx(2 * (l1 - base))


def test_total_loss_masking_invariance():
    a, b = _imgs(2)
    rng = np.random.default_rng(3)
    g = dc.Graph()
    occ = np.ones((6, 7, 1))
    occ[0] = 0.0
    valid = np.ones((6, 7, 1))
    valid[-1] = 0.0
    D = g.const(rng.uniform(1, 5, size=(6, 7, 1)))
    gt2 = b.copy()
    gt2[0] += 0.3
    gt2[-1] -= 0.2
    l1 = obj.total_loss(g.const(a), g.const(a), b, occ, D, a, validity=valid).value
    l2 = obj.total_loss(g.const(a), g.const(a), gt2, occ, D, a, validity=valid).value
    assert float(l1) == pytest.approx(float(l2), abs=1e-15)


def test_total_loss_gradients_and_detached_mask():
    a, b = _imgs(4, (8, 8, 3))
    rng = np.random.default_rng(5)
    params = {"c": a, "f": a + 0.01, "D": rng.uniform(1, 5, size=(8, 8, 1))}
    occ = rng.uniform(0, 1, size=(8, 8, 1))

    def f(g, L):
        return obj.total_loss(L["c"], L["f"], b, occ, L["D"], a)

    assert dc.finite_diff_check(f, params) < 1e-3
    g = dc.Graph()
    O = g.leaf(occ, name="O")
    loss = obj.total_loss(g.const(a), g.const(a + 0.1), b, O, g.const(params["D"]), a)
    grads = g.backward(loss, wrt=[O])
    assert not np.any(grads[O.id])
