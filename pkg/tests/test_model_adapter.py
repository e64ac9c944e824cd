import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings, strategies as st

from conceptregions.errors import ConfigurationError, InputShapeError, ReshapeError
from conceptregions.model_adapter import (
    ClassPrediction,
    ExplanationSession,
    GlobalAvgPoolHead,
    LayerActivations,
    PooledEmbedding,
    StagedClassifier,
    build_classifier,
    concat_layers,
    forward_with_activations,
    from_torchvision_vit,
    mask_channels_and_recompute,
    pool_layer,
    tokens_to_grid,
)

from conftest import linear_probe_model


def test_activation_shapes(tiny_cnn, rng):
    acts, pred = forward_with_activations(tiny_cnn, rng.random((3, 8, 8)))
    assert [a.shape for a in acts] == [(4, 4, 4), (8, 2, 2)]
    assert [a.layer_index for a in acts] == [1, 2]
    assert pred.logits.shape == (3,)


def test_logits_bitwise_equal_plain_forward(tiny_cnn, rng):
    x = rng.random((3, 8, 8))
    _, pred = forward_with_activations(tiny_cnn, x)
    plain = tiny_cnn(torch.from_numpy(x)[None])[0]
    assert torch.equal(pred.logits.detach(), plain.detach())


def test_repeat_calls_identical(tiny_cnn, rng):
    x = rng.random((3, 8, 8))
    a1, p1 = forward_with_activations(tiny_cnn, x)
    a2, p2 = forward_with_activations(tiny_cnn, x)
    assert torch.equal(p1.logits, p2.logits)
    assert all(torch.equal(u.maps, v.maps) for u, v in zip(a1, a2))


def test_softmax_of_zero_logits():
    pred = ClassPrediction.from_logits(torch.zeros(2))
    assert pred.probabilities.tolist() == [0.5, 0.5]
    assert pred.predicted_class == 0  # tie -> lowest index


def test_probabilities_sum_to_one(tiny_cnn, rng):
    _, pred = forward_with_activations(tiny_cnn, rng.random((3, 8, 8)))
    assert abs(float(pred.probabilities.detach().sum()) - 1) < 1e-6
    assert pred.predicted_class == int(np.argmax(pred.probabilities.detach().numpy()))


def test_input_shape_error(tiny_cnn):
    with pytest.raises(InputShapeError):
        forward_with_activations(tiny_cnn, np.zeros((3, 9, 8)))


def test_no_capture_points_is_configuration_error():
    with pytest.raises(ConfigurationError):
        StagedClassifier([nn.Identity()], nn.Identity(), capture=[])


def test_pool_layer_examples():
    maps = torch.stack([torch.full((2, 2), 2.0), torch.tensor([[1.0, 3.0], [5.0, 7.0]]), torch.zeros(2, 2)])
    pooled = pool_layer(LayerActivations(1, maps))
    assert pooled.values.tolist() == [2.0, 4.0, 0.0]
    assert len(pooled) == 3


def test_pool_consistency_with_head(tiny_cnn, rng):
    x = torch.from_numpy(rng.random((1, 3, 8, 8)))
    seen = {}
    hook = tiny_cnn.head.fc.register_forward_hook(lambda m, i, o: seen.setdefault("z", i[0]))
    acts, _ = forward_with_activations(tiny_cnn, x[0])
    hook.remove()
    assert torch.allclose(pool_layer(acts[-1]).values, seen["z"][0], atol=1e-6)


def test_concat_layers_offsets():
    a = PooledEmbedding(1, torch.tensor([1.0, 2.0]))
    b = PooledEmbedding(2, torch.tensor([3.0, 4.0, 5.0]))
    cat = concat_layers([a, b])
    assert cat.values.tolist() == [1, 2, 3, 4, 5]
    assert cat.layer_offsets == [(1, 0, 2), (2, 2, 3)]
    assert cat.slice(2).tolist() == [3, 4, 5]


def test_concat_single_layer_identity():
    a = PooledEmbedding(3, torch.tensor([0.5, -1.0]))
    assert torch.equal(concat_layers([a]).values, a.values)


def test_concat_duplicate_layer_rejected():
    a = PooledEmbedding(1, torch.zeros(2))
    with pytest.raises(ConfigurationError):
        concat_layers([a, a])


def test_resnet50_concat_length():
    model = build_classifier({"backbone": "resnet50", "input_size": 64})
    acts, _ = forward_with_activations(model, np.zeros((3, 64, 64), np.float32), requires_grad=False)
    pooled = [pool_layer(a) for a in acts]
    assert [len(p) for p in pooled] == [256, 512, 1024, 2048]
    assert len(concat_layers(pooled)) == 3840


def test_tokens_to_grid_vit_shape():
    grid = tokens_to_grid(torch.randn(197, 768), has_class_token=True)
    assert grid.shape == (768, 14, 14)


def test_tokens_to_grid_non_square():
    with pytest.raises(ReshapeError):
        tokens_to_grid(torch.randn(17, 4), has_class_token=False)


def test_tokens_to_grid_row_major():
    tokens = torch.tensor([[1.0, 10.0], [2.0, 20.0], [3.0, 30.0], [4.0, 40.0]])
    maps = tokens_to_grid(tokens, has_class_token=False).maps
    for p in range(4):
        assert maps[:, p // 2, p % 2].tolist() == tokens[p].tolist()


@settings(max_examples=30, deadline=None)
@given(side=st.integers(1, 6), dim=st.integers(1, 5), cls=st.booleans())
def test_tokens_to_grid_round_trip(side, dim, cls):
    tokens = torch.randn(side * side + cls, dim)
    maps = tokens_to_grid(tokens, has_class_token=cls).maps
    flat = maps.reshape(dim, -1).T
    assert torch.equal(flat, tokens[int(cls):])


def test_vit_adapter_masks_and_grads():
    from torchvision.models.vision_transformer import VisionTransformer

    torch.manual_seed(0)
    vit = VisionTransformer(image_size=16, patch_size=4, num_layers=2, num_heads=2,
                            hidden_dim=8, mlp_dim=16, num_classes=3).double().eval()
    nn.init.normal_(vit.heads.head.weight)  # torchvision zero-initializes the head
    model = from_torchvision_vit(vit)
    x = torch.rand(3, 16, 16, dtype=torch.float64)
    acts, pred = forward_with_activations(model, x)
    assert len(acts) == 1 and acts[0].shape == (8, 4, 4)
    assert torch.equal(pred.logits.detach(), vit(x[None])[0].detach())
    (g,) = torch.autograd.grad(pred.probabilities[0], acts[0].maps)
    assert g.abs().sum() > 0
    masked, _ = mask_channels_and_recompute(model, x, 1, [0, 3], 0.25)
    assert not torch.equal(masked.logits, pred.logits.detach())


def test_empty_mask_is_noop(tiny_cnn, rng):
    x = rng.random((3, 8, 8))
    _, pred = forward_with_activations(tiny_cnn, x, requires_grad=False)
    masked, _ = mask_channels_and_recompute(tiny_cnn, x, 1, [], 0.0)
    assert torch.equal(masked.logits, pred.logits)


def test_mask_all_final_channels_zero_bias():
    model = linear_probe_model(channels=3, classes=4)
    with torch.no_grad():
        model.head.fc.bias.zero_()
    pred, z = mask_channels_and_recompute(model, np.ones((3, 4, 4)), 1, range(3), 0.0)
    assert pred.logits.tolist() == [0.0] * 4
    assert torch.allclose(pred.probabilities, torch.full((4,), 0.25, dtype=torch.float64))
    assert z.values.tolist() == [0.0] * 3


def test_mask_lower_layer_matches_manual_substitution(tiny_cnn, rng):
    x = torch.from_numpy(rng.random((3, 8, 8)))
    pred, z = mask_channels_and_recompute(tiny_cnn, x, 1, [2], 0.7)
    # oracle: run stage 1 by hand, edit its output, run the rest
    with torch.no_grad():
        a1 = tiny_cnn.stages[0](x[None]).clone()
        a1[:, 2] = 0.7
        a2 = tiny_cnn.stages[1](a1)
        logits = tiny_cnn.head(a2)[0]
    assert torch.allclose(pred.logits, logits, atol=1e-12)
    assert z.slice(1)[2].item() == 0.7
    _, unmasked = forward_with_activations(tiny_cnn, x, requires_grad=False)
    assert not torch.allclose(pred.probabilities, unmasked.probabilities)


def test_masking_locality(toy4, rng):
    x = rng.random((3, 16, 16))
    _, base = mask_channels_and_recompute(toy4, x, 1, [], 0.0)
    _, z = mask_channels_and_recompute(toy4, x, 3, [0, 1], 0.3)
    for layer in (1, 2):
        assert torch.equal(z.slice(layer), base.slice(layer))
    assert not torch.equal(z.slice(4), base.slice(4))


def test_mask_channel_out_of_range(tiny_cnn):
    with pytest.raises(IndexError):
        mask_channels_and_recompute(tiny_cnn, np.zeros((3, 8, 8)), 1, [4], 0.0)


def test_gradients_match_finite_differences(tiny_cnn, rng):
    x = rng.random((3, 8, 8))
    session = ExplanationSession(tiny_cnn, x)
    score = session.prediction.probabilities[1]
    for layer in (1, 2):
        maps = session.layer(layer).maps
        (g,) = torch.autograd.grad(score, maps, retain_graph=True)
        base = maps.detach()
        for idx in [(0, 0, 0), (1, 1, 0), (maps.shape[0] - 1, 1, 1)]:
            def prob(delta):
                edited = base.clone()
                edited[idx] += delta
                stage = tiny_cnn.stage_of_layer(layer)
                raw = session.raws[layer - 1].detach()
                prefix = [a.maps.detach()[None] for a in session.activations[: layer - 1]]
                _, logits = tiny_cnn.resume(layer, edited[None], raw, prefix)
                return torch.softmax(logits, -1)[0, 1].item()
            fd = (prob(1e-3) - prob(-1e-3)) / 2e-3
            assert abs(fd - g[idx].item()) <= 1e-3 * max(abs(fd), 1e-8) + 1e-10
