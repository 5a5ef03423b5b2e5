import numpy as np
import pytest

from vderender import diffcore as dc
from vderender import heads
from vderender.renderer import LogitVolume, coarse_synthesize, project_depth_logits
from vderender.geometry import Camera, PoseSE3, make_exponential_schedule, so3_exp
from vderender.synthoracle import generate_scene, reference_render, two_plane_scene
from vderender import metrics

from scenes import random_inputs


def _dims(mode="learnable", N=6, N_v=4, N_star=3, C=5):
    return heads.HeadDims(N, N_v, N_star, C, C, heads.PosEncodingConfig(mode, 4))


def test_encoding_widths_and_validation():
    assert heads.PosEncodingConfig("periodic", 4).width == 64
    assert heads.PosEncodingConfig("learnable").width == 16
    with pytest.raises(ValueError):
        heads.PosEncodingConfig("fourier")


def test_periodic_encoding_at_zero_inputs():
    cam = Camera(1.0, 1.0, 0.0, 0.0, 1, 1)   # single pixel at normalized (-1, -1)
    g = dc.Graph()
    x = heads.gamma_inputs(g, PoseSE3.identity(), cam).value
    np.testing.assert_array_equal(x[0, 0, 2:], 0.0)
    enc = heads.positional_encoding(g, PoseSE3.identity(), cam,
                                    heads.PosEncodingConfig("periodic", 4)).value[0, 0]
    assert enc.shape == (64,)
    parts = enc.reshape(4, 2, 8)          # [l][sin, cos][input]
    np.testing.assert_allclose(parts[:, 0, 2:], 0.0, atol=1e-15)
    np.testing.assert_allclose(parts[:, 1, 2:], 1.0, atol=1e-15)


def test_gamma_inputs_layout():
    cam = Camera(4.0, 4.0, 1.5, 1.0, 4, 3)
    g = dc.Graph()
    pose = PoseSE3(so3_exp([0.1, 0.2, 0.3]), np.array([1.0, 2.0, 3.0]))
    x = heads.gamma_inputs(g, pose, cam).value
    assert x.shape == (3, 4, 8)
    np.testing.assert_allclose(x[0, 0, :2], [-1, -1])
    np.testing.assert_allclose(x[2, 3, :2], [1, 1])
    np.testing.assert_allclose(x[1, 2, 2:], [0.1, 0.2, 0.3, 1, 2, 3], atol=1e-12)


def test_init_shapes():
    p = heads.init_head_params(heads.HeadDims(), np.random.default_rng(0))
    assert p["F_S.0.W"].shape == (128, 64)
    assert p["F_S.2.W"].shape == (64, 32)
    assert p["F_D.1.W"].shape == (32, 32) and p["F_V.1.W"].shape == (32, 32)
    assert p["F_D.0.W"].shape == (32 + 16, 32)
    assert not p["F_S.2.W"].any() and not p["F_S.2.b"].any()
    assert all(not v.any() for k, v in p.items() if k.endswith(".b"))
    assert np.abs(p["F_D.0.W"]).max() <= 1 / np.sqrt(48)
    periodic = heads.init_head_params(heads.HeadDims(gamma=heads.PosEncodingConfig("periodic")),
                                      np.random.default_rng(0))
    assert "gamma.0.W" not in periodic and periodic["F_D.0.W"].shape == (32 + 64, 32)


def test_recalibrate_zero_weights_gives_bias():
    g = dc.Graph()
    dims = _dims()
    p = heads.init_head_params(dims, np.random.default_rng(0))
    for k in list(p):
        if k.startswith("F_D"):
            p[k] = np.zeros_like(p[k])
    p["F_D.1.b"] = np.arange(6.0)
    feats = g.const(np.random.default_rng(1).normal(size=(3, 3, 5)))
    gamma = g.const(np.random.default_rng(2).normal(size=(3, 3, 16)))
    out = heads.recalibrate(feats, gamma, p, "F_D").value
    np.testing.assert_allclose(out, np.broadcast_to(np.arange(6.0), (3, 3, 6)))
    with pytest.raises(ValueError):
        heads.recalibrate(feats, g.const(np.zeros((3, 3, 4))), p, "F_D")


def test_recalibration_depends_on_pose():
    cam = Camera(8.0, 8.0, 3.5, 3.5, 8, 8)
    dims = _dims()
    p = heads.init_head_params(dims, np.random.default_rng(0))
    g = dc.Graph()
    feats = g.const(np.random.default_rng(1).normal(size=(8, 8, 5)))

    def logits(pose):
        gamma = heads.positional_encoding(g, pose, cam, dims.gamma, p)
        return heads.recalibrate(feats, gamma, p, "F_D").value

    a = logits(PoseSE3.identity())
    b = logits(PoseSE3(np.eye(3), np.array([0.3, 0.0, 0.0])))
    assert a.shape == (8, 8, 6) and np.abs(a - b).max() > 1e-3


def test_sampler_zero_init_is_uniform():
    s = random_inputs(0)
    g = dc.Graph()
    dims = _dims()
    p = heads.init_head_params(dims, np.random.default_rng(0))
    DP = g.const(np.full((8, 8, 6), 1 / 6))
    colors = g.const(np.random.default_rng(1).uniform(-0.5, 0.5, size=(8, 8, 6, 3)))
    sched = make_exponential_schedule(1.0, 16.0, 6)
    t, w = heads.sampler_head(DP, colors, p, sched, 3)
    np.testing.assert_allclose(w.value, 1 / 3)
    np.testing.assert_allclose(t.value, 4.0)
    p["F_S.2.W"] = np.random.default_rng(2).normal(size=p["F_S.2.W"].shape) * 50
    t, w = heads.sampler_head(DP, colors, p, sched, 3)
    assert t.value.min() >= 1.0 and t.value.max() <= 16.0
    np.testing.assert_allclose(w.value.sum(-1), 1.0)
    with pytest.raises(ValueError):
        heads.sampler_head(DP, colors, p, sched, 4)


def test_fine_identity_and_oracle():
    s = random_inputs(1)
    g = dc.Graph()
    ident = heads.fine_synthesize(g.const(s["image"]), s["tstar"], s["wstar"],
                                  PoseSE3.identity(),
                                  s["cam"])
    np.testing.assert_allclose(ident.value, s["image"], atol=1e-12)
    out = heads.fine_synthesize(g.const(s["image"]), s["tstar"], s["wstar"], s["pose"],
                                s["cam"])
    ref = reference_render(s["image"], s["DL"], s["pose"], s["cam"], s["schedule"].distances,
                           tstar=s["tstar"], wstar=s["wstar"])
    np.testing.assert_allclose(out.value, ref["fine"], atol=1e-12)


def test_fine_plane_warp_matches_target():
    spec = two_plane_scene(48, seed=3)
    spec.planes = spec.planes[:1]                 # single fronto-parallel plane
    frames = generate_scene(spec, [PoseSE3.identity(),
                                   PoseSE3(np.eye(3), np.array([0.3, 0.1, 0.0]))])
    D = spec.planes[0].depth
    t = np.full((48, 48, 1), D)
    g = dc.Graph()
    out = heads.fine_synthesize(g.const(frames.images[0]), t, np.ones_like(t),
                                frames.render_pose(1), spec.cam).value
    vis = frames.visible[1]
    assert metrics.psnr(out, frames.images[1], vis) > 35.0


def test_head_gradients():
    s = random_inputs(2)
    cam, sched = s["cam"], s["schedule"]
    dims = _dims(N=6, N_star=3)
    rng = np.random.default_rng(3)
    p = heads.init_head_params(dims, rng)
    p["F_S.2.W"] = rng.normal(size=p["F_S.2.W"].shape) * 0.3
    p["W_D"] = rng.normal(size=(8, 8, 5))
    img, pose = s["image"], s["pose"]

    def f(g, L):
        gamma = heads.positional_encoding(g, pose, cam, dims.gamma, L)
        DL = heads.recalibrate(L["W_D"], gamma, L, "F_D")
        DP = project_depth_logits(LogitVolume(DL, sched), pose, cam)
        _, colors = coarse_synthesize(img, DP, pose, cam)
        t, w = heads.sampler_head(DP.grid, colors, L, sched, 3)
        return dc.mean(heads.fine_synthesize(img, t, w, pose, cam))

    params = {k: v for k, v in p.items() if not k.startswith("F_V")}
    assert dc.finite_diff_check(f, params, max_coords=12) < 1e-3
