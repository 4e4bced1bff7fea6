import numpy as np
import pytest

from conftest import tiny_config
from fusionvote.data import load_pgm, load_ppm
from fusionvote.errors import ConfigurationError, ContractError
from fusionvote.explain import cam_from_activations, grad_cam, overlay, spatial_layers, write_attention
from fusionvote.model import CNNStream, FusionModel


@pytest.fixture(scope="module")
def model():
    return FusionModel(tiny_config(seed=4)).eval()


@pytest.fixture
def img(rng):
    return rng.random((3, 16, 16)).astype(np.float32)


def test_cam_single_channel():
    acts = np.array([[[1.0, 2.0], [0.0, 4.0]]])
    grads = np.full((1, 2, 2), 0.5)
    cam, zero = cam_from_activations(acts, grads)
    assert not zero
    np.testing.assert_allclose(cam, [[0.25, 0.5], [0.0, 1.0]])


def test_cam_negative_gradient_all_zero():
    acts = np.ones((2, 3, 3))
    cam, zero = cam_from_activations(acts, -np.ones((2, 3, 3)))
    assert zero and not cam.any()


def test_cam_relu_clips_negative_regions():
    acts = np.array([[[1.0, -1.0]]])
    cam, _ = cam_from_activations(acts, np.ones((1, 1, 2)))
    assert cam.tolist() == [[1.0, 0.0]]


@pytest.mark.parametrize("layer", CNNStream.SPATIAL_LAYERS)
def test_grad_cam_shapes(model, img, layer):
    amap = grad_cam(model, img, 1, layer)
    assert amap.target_layer == f"cnn0.{layer}" and amap.target_class == 1
    assert amap.upsampled.shape == (16, 16)
    assert amap.values.min() >= 0 and amap.values.max() <= 1
    assert amap.all_zero or amap.values.max() == 1.0


def test_grad_cam_default_layer(model, img):
    assert grad_cam(model, img, 0).target_layer == "cnn0.se"


def test_grad_cam_upsample_is_nearest(model, img):
    amap = grad_cam(model, img, 2)
    h, w = amap.values.shape
    assert set(np.unique(amap.upsampled)) <= set(np.unique(amap.values))
    assert amap.upsampled[:: 16 // h, :: 16 // w].tobytes() == amap.values.tobytes()


def test_grad_cam_bad_layer_lists_valid(model, img):
    with pytest.raises(ConfigurationError) as info:
        grad_cam(model, img, 0, "head")
    for name in spatial_layers(model):
        assert name in str(info.value)


def test_grad_cam_bad_class(model, img):
    with pytest.raises(ContractError):
        grad_cam(model, img, 3)


def test_grad_cam_deterministic_and_clean(model, img):
    a = grad_cam(model, img, 1)
    b = grad_cam(model, img, 1)
    assert a.values.tobytes() == b.values.tobytes()
    assert all(p.grad is None or not np.any(p.grad) for p in model.parameters())


def test_overlay_shape():
    out = overlay(np.zeros((4, 5, 3), np.uint8), np.ones((4, 5)))
    assert out.shape == (4, 10, 3) and out.dtype == np.uint8
    assert out[0, 5].tolist() == [128, 0, 0]


def test_write_attention(tmp_path, model, img):
    amap = grad_cam(model, img, 0)
    paths = write_attention(amap, img.transpose(1, 2, 0), tmp_path / "cam")
    assert [p.name for p in paths] == ["cam.pgm", "cam_overlay.ppm"]
    assert load_pgm(paths[0]).shape == (16, 16)
    assert load_ppm(paths[1]).shape == (16, 32, 3)
