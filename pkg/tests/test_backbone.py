import numpy as np
import pytest

from gmic import diffcore as dc
from gmic.backbone import BackboneConfig, ResNet, SaliencyHead, extract_features, saliency_head
from gmic.diffcore.gradcheck import check_directional, check_function

SMALL = BackboneConfig(widths=[4, 8], blocks_per_stage=1, downsample=4)


def _store(cfg, seed=0, precision="standard"):
    store = dc.ParamStore()
    ResNet(cfg).init(store, np.random.default_rng(seed))
    return store.astype(precision)


def test_stage_strides():
    assert BackboneConfig().stage_strides() == [1, 2, 2, 2]
    assert BackboneConfig(widths=[8, 16, 32, 64], blocks_per_stage=1, stem_pool=True).stage_strides() == [1, 2, 2, 1]
    assert SMALL.stage_strides() == [1, 2]
    with pytest.raises(ValueError):
        BackboneConfig(widths=[8, 16], downsample=16)
    with pytest.raises(ValueError):
        BackboneConfig(downsample=12)
    with pytest.raises(ValueError):
        BackboneConfig(widths=[0, 4])


def test_output_shape_law(rng):
    store = _store(SMALL)
    for h, w in [(16, 16), (32, 16), (32, 48)]:
        x = dc.Tensor(rng.standard_normal((2, 1, h, w)).astype(np.float32))
        f = extract_features(x, SMALL, store, training=True)
        assert f.shape == (2, 8, h // 4, w // 4)


def test_indivisible_input_rejected():
    store = _store(SMALL)
    with pytest.raises(dc.ShapeError):
        extract_features(dc.Tensor(np.zeros((1, 1, 18, 16), np.float32)), SMALL, store)


def test_zero_input_zero_residual_is_finite():
    cfg = BackboneConfig(widths=[4, 8], blocks_per_stage=2, downsample=4, zero_init_residual=True)
    store = _store(cfg)
    f = extract_features(dc.Tensor(np.zeros((2, 1, 16, 16), np.float32)), cfg, store, training=True)
    assert np.all(np.isfinite(f.data))
    assert np.all(store["backbone.stage1.block1.conv2.bn.gamma"].data == 0)


@pytest.mark.parametrize("seed", range(3))
def test_feature_gradient(seed):
    cfg = BackboneConfig(widths=[3, 4], blocks_per_stage=1, downsample=4)
    store = _store(cfg, seed, "check")
    rng = np.random.default_rng(seed)
    x = dc.Tensor(rng.standard_normal((2, 1, 32, 32)), requires_grad=True)
    r = rng.standard_normal((2, 4, 8, 8))

    def build():
        f = extract_features(x, cfg, store, training=True)
        return dc.sum(dc.mul(f, dc.Tensor(r)))

    wrt = [x] + list(store.params.values())
    res = check_directional("extract_features", build, wrt, 1e-4, rng, n_dirs=4, coords_per_tensor=3)
    assert res.passed, res


def test_saliency_head_zero_weights():
    store = dc.ParamStore()
    store.add("saliency.weight", np.zeros((2, 8, 1, 1), np.float32))
    store.add("saliency.bias", np.zeros(2, np.float32))
    A = saliency_head(dc.Tensor(np.random.default_rng(0).standard_normal((1, 8, 3, 4)).astype(np.float32)), store)
    np.testing.assert_array_equal(A.data, 0.5)


def test_saliency_head_negative_bias():
    store = dc.ParamStore()
    store.add("saliency.weight", np.zeros((2, 8, 1, 1), np.float32))
    store.add("saliency.bias", np.full(2, -20.0, np.float32))
    A = saliency_head(dc.Tensor(np.ones((1, 8, 3, 4), np.float32)), store)
    assert A.data.max() < 1e-8


def test_saliency_codomain(rng):
    head = SaliencyHead(8, 2)
    store = dc.ParamStore()
    head.init(store, rng)
    A = head(store, dc.Tensor(rng.standard_normal((3, 8, 5, 6)).astype(np.float32) * 5))
    assert A.shape == (3, 2, 5, 6)
    assert np.all((A.data > 0) & (A.data < 1))
    # initial bias -2 -> maps start near sigmoid(-2)
    A0 = head(store, dc.Tensor(np.zeros((1, 8, 2, 2), np.float32)))
    np.testing.assert_allclose(A0.data, 1 / (1 + np.exp(2)), rtol=1e-6)


def test_head_gradient(rng):
    head = SaliencyHead(3, 2)
    store = dc.ParamStore()
    head.init(store, rng)
    store = store.astype("check")
    f = dc.Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
    res = check_function("saliency_head", lambda: dc.sum(head(store, f)), [f] + list(store.params.values()), 1e-6)
    assert res.passed, res


def test_translation_equivariance():
    """Shifting the input by s pixels shifts the map by one cell (interior)."""
    cfg = BackboneConfig(widths=[4, 8], blocks_per_stage=1, downsample=4)
    store = _store(cfg, 1, "check")
    head = SaliencyHead(8, 2)
    head.init(store, np.random.default_rng(2))
    store = store.astype("check")
    rng = np.random.default_rng(3)
    base = rng.standard_normal((1, 1, 32, 64 + 4))
    x1 = dc.Tensor(base[..., :64].copy())
    x2 = dc.Tensor(base[..., 4:68].copy())
    # eval mode: batch statistics would couple the two inputs differently
    a1 = head(store, extract_features(x1, cfg, store, training=False)).data
    a2 = head(store, extract_features(x2, cfg, store, training=False)).data
    np.testing.assert_allclose(a1[..., 4:-4], a2[..., 3:-5], atol=1e-4)
