import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hmseg import tensor as T
from hmseg.labels import one_hot
from hmseg.losses import default_weights, jaccard_loss
from hmseg.network import (ModalityMask, NetworkConfig, forward, fuse_modalities, init_params, param_shapes,
                           project_t1)
from hmseg.tensor import Tensor

SMALL = NetworkConfig(base_channels=4)
T1_ONLY = ModalityMask.of(0)
BOTH = ModalityMask.all()


def test_default_parameter_count():
    # 2 front-ends (16*9 + 32 each), 3 blocks of 3 convs (16*16*9 + 32 each), head (32 + 8*16 + 8)
    front = 2 * (16 * 9 + 32)
    trunk = 9 * (16 * 16 * 9 + 32)
    head = 32 + 8 * 16 + 8
    assert init_params(NetworkConfig()).count() == front + trunk + head == 21544


def test_init_is_deterministic():
    a, b = init_params(NetworkConfig(), 3), init_params(NetworkConfig(), 3)
    for (na, ta), (nb, tb) in zip(a, b):
        assert na == nb and ta.data.tobytes() == tb.data.tobytes()
    c = init_params(NetworkConfig(), 4)
    assert a["trunk.0.conv0.weight"].data.tobytes() != c["trunk.0.conv0.weight"].data.tobytes()


def test_he_init_statistics():
    p = init_params(NetworkConfig(), 0)
    w = p["trunk.1.conv2.weight"].data
    expected = np.sqrt(2.0 / (16 * 9))
    assert abs(w.std() - expected) / expected < 0.2
    for name, t in p:
        if name.endswith(".scale"):
            np.testing.assert_array_equal(t.data, 1.0)
        elif name.endswith(".shift") or name.endswith(".bias"):
            np.testing.assert_array_equal(t.data, 0.0)


def test_projection_layer_only_when_width_changes():
    shapes = param_shapes(NetworkConfig(residual_blocks=((2, 1), (2, 2, 24))))
    assert "trunk.1.proj.weight" in shapes and "trunk.0.proj.weight" not in shapes
    assert shapes["head.conv.weight"] == (8, 24, 1, 1)


def test_fuse_duplicated_maps_returns_the_map():
    rng = np.random.default_rng(0)
    f = Tensor(rng.normal(size=(4, 6, 6)))
    np.testing.assert_allclose(fuse_modalities([f, f], BOTH).data, f.data, rtol=0, atol=1e-12)
    assert fuse_modalities([f, None], T1_ONLY) is f


def test_fuse_mean_example():
    a = Tensor(np.full((1, 2, 2), 1.0))
    b = Tensor(np.full((1, 2, 2), 3.0))
    np.testing.assert_array_equal(fuse_modalities([a, b], BOTH).data, 2.0)
    np.testing.assert_array_equal(fuse_modalities([a, b], ModalityMask.of(1)).data, 3.0)


def test_fuse_rejects_bad_inputs():
    a = Tensor(np.zeros((1, 2, 2)))
    with pytest.raises(ValueError):
        fuse_modalities([a, Tensor(np.zeros((1, 3, 3)))], BOTH)
    with pytest.raises(ValueError):
        fuse_modalities([a, None], BOTH)
    with pytest.raises(ValueError):
        ModalityMask((False, False))


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_masked_flair_is_ignored_bitwise(seed):
    rng = np.random.default_rng(seed)
    p = init_params(SMALL, seed % 7)
    img = rng.normal(size=(2, 10, 10))
    other = img.copy()
    other[1] = rng.normal(size=(10, 10)) * 100
    a = forward(p, img, T1_ONLY).data
    b = forward(p, other, T1_ONLY).data
    assert a.tobytes() == b.tobytes()


def test_projection_matches_masked_forward():
    rng = np.random.default_rng(1)
    p = init_params(NetworkConfig(), 0)
    img = rng.normal(size=(2, 12, 12))
    proj_img, proj_mask = project_t1(img, BOTH)
    np.testing.assert_allclose(forward(p, proj_img, proj_mask).data, forward(p, img, T1_ONLY).data,
                               rtol=0, atol=1e-12)


def test_projection_needs_t1():
    with pytest.raises(ValueError):
        project_t1(np.zeros((2, 8, 8)), ModalityMask.of(1))


@pytest.mark.parametrize("shape", [(8, 8), (9, 13), (20, 16)])
def test_output_is_a_distribution_of_input_size(shape):
    p = init_params(SMALL, 0)
    out = forward(p, np.random.default_rng(0).normal(size=(2, *shape)), BOTH).data
    assert out.shape == (8, *shape)
    np.testing.assert_allclose(out.sum(axis=0), 1.0, atol=1e-12)
    assert np.isfinite(out).all() and (out >= 0).all()


def test_forward_rejects_bad_inputs():
    p = init_params(SMALL, 0)
    with pytest.raises(ValueError):
        forward(p, np.zeros((2, 7, 8)), BOTH)
    with pytest.raises(ValueError):
        forward(p, np.zeros((3, 8, 8)), BOTH)
    with pytest.raises(ValueError):
        forward(p, np.zeros((2, 8, 8)), ModalityMask.all(3))


def test_constant_input_stays_finite():
    p = init_params(SMALL, 0)
    out = forward(p, np.ones((2, 8, 8)), BOTH).data
    assert np.isfinite(out).all()


def test_gradients_reach_every_used_parameter():
    p = init_params(SMALL, 0)
    rng = np.random.default_rng(0)
    loss = jaccard_loss(forward(p, rng.normal(size=(2, 10, 10)), T1_ONLY), one_hot(rng.integers(0, 8, (10, 10))),
                        default_weights())
    T.backward(loss)
    for name, t in p:
        if name.startswith("front.1."):
            assert t.grad is None or not t.grad.any()
        else:
            assert t.grad is not None and np.isfinite(t.grad).all()
    assert p["head.conv.bias"].grad.any()


def test_config_round_trip():
    cfg = NetworkConfig(base_channels=8, residual_blocks=((2, 1), (1, 3, 12)))
    assert NetworkConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        NetworkConfig(kernel_size=4)
