import numpy as np
import pytest

from bcnn import tensor as T
from bcnn.backbone import (BackboneConfig, backbone_forward, backbone_init, conv2d, flatten_locations,
                           kink_distance, maxpool2, unflatten_locations)
from bcnn.errors import ConfigError, ShapeError
from bcnn.tensor import Tensor

DEFAULT = BackboneConfig()
TINY = BackboneConfig(channels=(3, 4), pools=(True, False), taps=("t1", "t2"))


def conv_reference(x, w, b):
    H, W, C = x.shape
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    out = np.zeros((H, W, w.shape[-1]))
    for i in range(H):
        for j in range(W):
            out[i, j] = np.einsum("abc,abco->o", xp[i:i + 3, j:j + 3], w) + b
    return out


def test_init_deterministic():
    a, b = backbone_init(DEFAULT, 3), backbone_init(DEFAULT, 3)
    assert all(np.array_equal(a[n].data, b[n].data) for n in a)
    c = backbone_init(DEFAULT, 4)
    assert not np.array_equal(a["backbone/t1/w"].data, c["backbone/t1/w"].data)


def test_init_is_fan_in_scaled():
    p = backbone_init(DEFAULT, 0)
    w = p["backbone/t3/w"].data
    assert abs(w.std() - np.sqrt(2.0 / (9 * 32))) < 0.01
    assert not p["backbone/t3/b"].data.any()


@pytest.mark.parametrize("kwargs", [
    dict(channels=(), pools=()),
    dict(channels=(4,), pools=(True, False)),
    dict(channels=(4,), pools=(True,), taps=("t2",)),
    dict(channels=(4,), pools=(True,), taps=()),
    dict(channels=(0,), pools=(True,)),
])
def test_invalid_configs(kwargs):
    with pytest.raises(ConfigError):
        BackboneConfig(**kwargs)


def test_config_arithmetic():
    assert [DEFAULT.stride(t) for t in DEFAULT.taps] == [1, 2, 4, 8]
    assert [DEFAULT.receptive_field(t) for t in DEFAULT.taps] == [3, 8, 18, 38]
    assert DEFAULT.min_input() == 8
    assert DEFAULT.tap_size("t4", 64, 64) == (8, 8)


def test_zero_weights_zero_maps(rng):
    p = {n: Tensor(np.zeros(v.shape)) for n, v in backbone_init(DEFAULT, 0).items()}
    out = backbone_forward(p, rng.uniform(size=(16, 16, 3)), DEFAULT)
    assert set(out) == set(DEFAULT.taps)
    assert all(not fm.values.data.any() for fm in out.values())


def test_doubling_input_doubles_maps(rng):
    p = backbone_init(DEFAULT, 0)
    a = backbone_forward(p, rng.uniform(size=(16, 24, 3)), DEFAULT)
    b = backbone_forward(p, rng.uniform(size=(32, 48, 3)), DEFAULT)
    for t in DEFAULT.taps:
        assert (b[t].H, b[t].W) == (2 * a[t].H, 2 * a[t].W)
        assert a[t].C == DEFAULT.tap_channels(t)


def test_too_small_image():
    with pytest.raises(ShapeError):
        backbone_forward(backbone_init(DEFAULT, 0), np.zeros((1, 1, 3)), DEFAULT)


def test_wrong_channel_count():
    with pytest.raises(ShapeError):
        backbone_forward(backbone_init(DEFAULT, 0), np.zeros((16, 16, 4)), DEFAULT)


def test_conv_matches_reference(rng):
    x = rng.standard_normal((5, 6, 2))
    w = rng.standard_normal((3, 3, 2, 4))
    b = rng.standard_normal(4)
    got = conv2d(Tensor(x[None]), Tensor(w), Tensor(b)).data[0]
    np.testing.assert_allclose(got, conv_reference(x, w, b), rtol=1e-12, atol=1e-12)


def test_maxpool_reference(rng):
    x = rng.standard_normal((1, 5, 4, 2))
    got = maxpool2(Tensor(x)).data[0]
    ref = np.array([[x[0, 2 * i:2 * i + 2, 2 * j:2 * j + 2].max(axis=(0, 1)) for j in range(2)]
                    for i in range(2)])
    np.testing.assert_array_equal(got, ref)


def test_taps_are_post_relu_pre_pool(rng):
    p = backbone_init(DEFAULT, 1)
    out = backbone_forward(p, rng.uniform(size=(16, 16, 3)), DEFAULT)
    assert out["t1"].H == 16 and (out["t1"].values.data >= 0).all()


def test_batched_equals_single(rng):
    p = backbone_init(TINY, 2)
    imgs = rng.uniform(size=(3, 6, 8, 3))
    batched = backbone_forward(p, imgs, TINY)
    for i in range(3):
        single = backbone_forward(p, imgs[i], TINY)
        for t in TINY.taps:
            np.testing.assert_allclose(batched[t].values.data[i], single[t].values.data, rtol=1e-13)


def test_start_stage_resumes_forward(rng):
    p = backbone_init(DEFAULT, 0)
    img = rng.uniform(size=(2, 16, 16, 3))
    full = backbone_forward(p, img, DEFAULT, taps=("t3",))["t3"].values.data
    mid = backbone_forward(p, img, DEFAULT, taps=("t1",), stop_after_pool=True)["_out"].values
    resumed = backbone_forward(p, mid, DEFAULT, taps=("t3",), start=1)["t3"].values.data
    np.testing.assert_array_equal(resumed, full)


def test_translation_equivariance(rng):
    p = backbone_init(DEFAULT, 5)
    big = rng.uniform(size=(112, 96, 3))
    s = DEFAULT.stride("t4")
    a = backbone_forward(p, big[:96], DEFAULT, taps=("t4",))["t4"].values.data
    b = backbone_forward(p, big[2 * s:2 * s + 96], DEFAULT, taps=("t4",))["t4"].values.data
    m = int(np.ceil(DEFAULT.receptive_field("t4") / s))      # cells touched by the border
    # cell i of b sees the same pixels as cell i + 2 of a
    np.testing.assert_allclose(b[m:-m - 2, m:-m], a[m + 2:-m, m:-m], rtol=0, atol=1e-10)


def test_gradients_match_finite_differences(rng):
    p = backbone_init(TINY, 0)
    R1 = Tensor(rng.standard_normal((6, 6, 3)))
    R2 = Tensor(rng.standard_normal((3, 3, 4)))

    def f(x, params=p):
        out = backbone_forward(params, x, TINY)
        return T.add(T.reduce(T.mul(out["t1"].values, R1)), T.reduce(T.mul(out["t2"].values, R2)))

    def near(x, params=p):
        rec = []
        backbone_forward(params, Tensor(x), TINY, record=rec)
        return kink_distance(rec) < 1e-3

    checked = 0
    for _ in range(20):
        x0 = rng.uniform(size=(6, 6, 3))
        rep = T.finite_diff_check(f, x0, nonsmooth=near)
        if not rep.skipped:
            assert rep.max_rel_err <= 1e-4
            checked += 1
    assert checked >= 5
    img = Tensor(rng.uniform(size=(6, 6, 3)))
    for name in p:
        def g(w, name=name):
            q = dict(p)
            q[name] = w
            return f(img, q)
        rep = T.finite_diff_check(g, p[name].data.copy())
        assert rep.max_rel_err <= 1e-4, name


def test_flatten_example():
    fm = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])[:, :, None])
    np.testing.assert_array_equal(flatten_locations(fm).data, [[1], [2], [3], [4]])


def test_flatten_round_trip(rng):
    x = Tensor(rng.standard_normal((3, 5, 2)))
    np.testing.assert_array_equal(unflatten_locations(flatten_locations(x), 3, 5).data, x.data)
    assert flatten_locations(Tensor(np.ones((1, 1, 7)))).shape == (1, 7)
    with pytest.raises(ShapeError):
        unflatten_locations(flatten_locations(x), 4, 4)
