import numpy as np
import pytest

from conftest import tiny_config
from fusionvote import tensor as T
from fusionvote.errors import ConfigurationError, ContractError, DimensionError, StateError
from fusionvote.model import (FLAVORS, CNNStream, Ensemble, FusionModel, ModelConfig, backbone_forward,
                              build_backbone, canonical_flavor, ensemble_predict, fusion_forward, soft_vote)
from fusionvote.tensor import Tensor


@pytest.fixture(scope="module")
def members():
    return [FusionModel(tiny_config(flavor=f, seed=i)).eval() for i, f in enumerate(FLAVORS)]


def image(rng, size=16, batch=None):
    shape = (3, size, size) if batch is None else (batch, 3, size, size)
    return Tensor(rng.random(shape))


# --- backbones --------------------------------------------------------------


@pytest.mark.parametrize("flavor", FLAVORS)
@pytest.mark.parametrize("size,stages", [(16, 2), (32, 2), (32, 3)])
def test_backbone_downsampling(flavor, size, stages, rng):
    cfg = tiny_config(image_size=size, stages=stages)
    bb = build_backbone(flavor, cfg, rng)
    out = backbone_forward(bb, image(rng, size))
    assert out.shape == (bb.out_channels, size >> stages, size >> stages)
    assert np.all(np.isfinite(out.data))


@pytest.mark.parametrize("flavor", FLAVORS)
def test_backbone_too_small(flavor, rng):
    bb = build_backbone(flavor, tiny_config(), rng)
    with pytest.raises(DimensionError):
        bb(image(rng, 8, batch=1))


def test_dense_backbone_channels(rng):
    cfg = tiny_config(cnn_channels=6, growth=3, dense_layers=4)
    assert build_backbone("dense", cfg, rng).out_channels == 6 + 3 * 4


def test_residual_zero_weights_is_identity_path(rng):
    cfg = tiny_config(cnn_channels=5)
    bb = build_backbone("residual", cfg, rng)
    for p in bb.parameters():
        p.data[...] = 0
    x = rng.random((1, 3, 16, 16)).astype(np.float32)
    expected = x
    for _ in range(cfg.stages):
        b, c, h, w = expected.shape
        pooled = expected.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
        expected = np.concatenate([pooled, np.zeros((b, 5 - c, h // 2, w // 2), np.float32)], axis=1)
    np.testing.assert_allclose(bb(Tensor(x)).data, expected, rtol=1e-6)


@pytest.mark.parametrize("alias,name", [("dense", "dense_connected"), ("sep", "depthwise_separable"),
                                        ("plain", "plain"), ("residual", "residual")])
def test_flavor_aliases(alias, name):
    assert canonical_flavor(alias) == name


def test_unknown_flavor():
    with pytest.raises(ConfigurationError):
        canonical_flavor("inception")


# --- fusion model -----------------------------------------------------------


def test_zero_head_gives_uniform(rng):
    m = FusionModel(tiny_config(num_classes=5)).eval()
    m.head.W.data[...] = 0
    m.head.b.data[...] = 0
    np.testing.assert_allclose(fusion_forward(m, image(rng)).data, 0.2, rtol=1e-6)


@pytest.mark.parametrize("flavor", FLAVORS)
def test_probabilities_sum_to_one(flavor, rng):
    m = FusionModel(tiny_config(flavor=flavor, seed=3)).eval()
    p = fusion_forward(m, image(rng, batch=4)).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
    assert p.shape == (4, 3)


def test_head_width_is_sum_of_streams(tiny_cfg):
    m = FusionModel(tiny_cfg)
    assert m.head.W.shape[0] == m.tstream.out_width + m.cstream.out_width


def test_mlp_widths_scaled():
    assert ModelConfig(width_factor=0.25).mlp_widths == (128, 64, 30)
    assert ModelConfig(width_factor=1.0).mlp_widths == (512, 256, 121)


def test_only_first_mlp_layer_regularized(tiny_cfg):
    m = FusionModel(tiny_cfg)
    for stream in (m.tstream, m.cstream):
        assert len(stream.mlp) == 3
        assert [layer.regularizer is not None for layer in stream.mlp] == [True, False, False]
    assert len(m.regularized_layers()) == 2


def test_cnn_stream_layer_order(rng, tiny_cfg):
    m = FusionModel(tiny_cfg).eval()
    taps = {}
    m(image(rng), taps)
    assert list(taps) == [f"cnn0.{n}" for n in CNNStream.SPATIAL_LAYERS]
    assert taps["cnn0.se"].shape == taps["cnn0.aspp"].shape


def test_forward_deterministic(rng, tiny_cfg):
    x = image(rng, batch=2)
    a = fusion_forward(FusionModel(tiny_cfg).eval(), x).data
    b = fusion_forward(FusionModel(tiny_cfg).eval(), x).data
    assert a.tobytes() == b.tobytes()


def test_single_image_matches_batch_row(rng, tiny_cfg):
    m = FusionModel(tiny_cfg).eval()
    x = rng.random((2, 3, 16, 16)).astype(np.float32)
    single = m(Tensor(x[1])).data
    np.testing.assert_allclose(single, m(Tensor(x)).data[1], rtol=1e-5, atol=1e-6)


def test_plain_array_input(rng, members):
    x = rng.random((2, 3, 16, 16))
    np.testing.assert_array_equal(members[0](x).data, members[0](Tensor(x)).data)
    label, _, per_member = Ensemble(members).predict(x[0])
    assert per_member[0].shape == (3,) and 0 <= label < 3


def test_default_model_parameter_budget():
    m = FusionModel(ModelConfig())
    assert 0 < m.num_parameters(trainable_only=True) < 1_000_000


def test_multi_stream_model(rng):
    m = FusionModel(tiny_config(n_vit=2, cnn_flavors=("plain", "residual", "sep"))).eval()
    assert len(m.tstreams) == 2 and len(m.cstreams) == 3
    assert m.head.W.shape[0] == sum(s.out_width for s in m.streams())
    np.testing.assert_allclose(fusion_forward(m, image(rng)).data.sum(), 1.0, atol=1e-6)


def test_freeze_extractors(tiny_cfg):
    m = FusionModel(tiny_cfg)
    m.freeze_extractors()
    frozen = {id(p) for p in m.extractor_parameters()}
    assert frozen and all(not p.requires_grad for p in m.extractor_parameters())
    assert all(p.requires_grad for p in m.head.parameters())
    assert not frozen & {id(p) for p in m.trainable_parameters()}


def test_full_model_gradient_small(rng):
    from fusionvote.gradcheck import check_gradients
    from fusionvote.training import cross_entropy_loss, one_hot, regularization_penalty

    m = FusionModel(tiny_config(flavor="residual", seed=1)).astype(np.float64)
    for name, p in m.named_parameters():
        if name.endswith(("bias", ".b", "beta")):
            p.data[...] = rng.normal(0, 0.1, p.shape)
    x = Tensor(rng.random((2, 3, 16, 16)), dtype=np.float64)
    y = one_hot([0, 2], 3, np.float64)
    err = check_gradients(lambda: cross_entropy_loss(T.softmax(m(x)), y) + regularization_penalty(m),
                          m.parameters(), max_entries=3, kink_aware=True)
    assert err < 1e-3


# --- soft vote --------------------------------------------------------------


def test_soft_vote_unanimity():
    p = np.array([0.1, 0.7, 0.2])
    label, combined = soft_vote([p] * 4)
    assert label == 1
    np.testing.assert_allclose(combined, 4 * p)


def test_soft_vote_hand_example():
    label, combined = soft_vote([[0.6, 0.4], [0.6, 0.4], [0.3, 0.7], [0.3, 0.7]])
    np.testing.assert_allclose(combined, [1.8, 2.2])
    assert label == 1


def test_soft_vote_tie_lowest_index():
    label, _ = soft_vote([[0.5, 0.5], [0.5, 0.5], [0.25, 0.75], [0.75, 0.25]])
    assert label == 0


def test_soft_vote_wrong_count():
    with pytest.raises(ContractError):
        soft_vote([[1.0, 0.0]] * 3)
    label, _ = soft_vote([[1.0, 0.0]] * 3, expected=3)
    assert label == 0


def test_soft_vote_rejects_non_distribution():
    with pytest.raises(ContractError):
        soft_vote([[0.5, 0.6]] * 4)


def test_soft_vote_batched():
    probs = [np.array([[0.9, 0.1], [0.2, 0.8]])] * 4
    labels, combined = soft_vote(probs)
    assert labels.tolist() == [0, 1]
    assert combined.shape == (2, 2)


# --- ensemble ---------------------------------------------------------------


def test_ensemble_zero_heads_uniform(rng):
    models = [FusionModel(tiny_config(flavor=f, seed=i)) for i, f in enumerate(FLAVORS)]
    for m in models:
        m.head.W.data[...] = 0
        m.head.b.data[...] = 0
    label, combined, per_member = ensemble_predict(Ensemble(models), image(rng))
    assert label == 0
    assert len(per_member) == 4
    np.testing.assert_allclose(combined, 4 / 3, rtol=1e-6)


def test_ensemble_matches_sequential_soft_vote(members, rng):
    img = image(rng)
    label, combined, per_member = Ensemble(members).predict(img)
    manual = []
    for m in members:
        with T.no_grad():
            manual.append(fusion_forward(m, img).data)
    label2, combined2 = soft_vote(manual)
    assert label == label2
    assert combined.tobytes() == combined2.tobytes()


def test_ensemble_concurrent_identical(members, rng):
    img = image(rng, batch=3)
    ens = Ensemble(members)
    a = ens.predict(img, concurrent=False)
    b = ens.predict(img, concurrent=True)
    assert a[1].tobytes() == b[1].tobytes()


def test_ensemble_unloaded_member(members, rng):
    ens = Ensemble([*members[:3], None])
    with pytest.raises(StateError):
        ensemble_predict(ens, image(rng))


def test_ensemble_requires_distinct_flavors():
    models = [FusionModel(tiny_config(flavor="plain", seed=i)) for i in range(4)]
    with pytest.raises(ContractError):
        Ensemble(models)


def test_ensemble_requires_four():
    with pytest.raises(ContractError):
        Ensemble([FusionModel(tiny_config(flavor=f)) for f in FLAVORS[:3]])


def test_member_independence(rng):
    models = [FusionModel(tiny_config(flavor=f, seed=i)).eval() for i, f in enumerate(FLAVORS)]
    img = image(rng)
    before = [fusion_forward(m, img).data.copy() for m in models]
    for p in models[0].parameters():
        p.data += 1.0
    after = [fusion_forward(m, img).data for m in models]
    for b, a in zip(before[1:], after[1:]):
        assert a.tobytes() == b.tobytes()
