import json

import numpy as np
import pytest
import torch

from conceptregions.concept_learner import (
    TrainConfig,
    Translator,
    concept_score,
    fit_translator,
    load_translator,
    losses,
    train_translator,
    translate,
)
from conceptregions.errors import ConfigurationError, NonFiniteLossError
from conceptregions.synthetic import build_toy_classifier, build_toy_vlm, concept_vocabulary, generate_dataset
from conceptregions.vlm import EmbeddingVectorVLM


def _text(*v):
    t = torch.tensor(v, dtype=torch.float64)
    return EmbeddingVectorVLM(t / t.norm(), "text", True)


def test_identity_translator():
    h = Translator([(3, 3)]).double()
    with torch.no_grad():
        h.layers[0].weight.copy_(torch.eye(3))
        h.layers[0].bias.zero_()
    z = torch.tensor([0.5, -2.0, 3.0], dtype=torch.float64)
    out = translate(h, z)
    assert torch.equal(out.values, z) and out.modality == "image" and not out.normalized


def test_zero_translator():
    h = Translator.for_dims(4, 2, [3]).double()
    for p in h.parameters():
        torch.nn.init.zeros_(p)
    assert translate(h, torch.randn(4, dtype=torch.float64)).values.tolist() == [0.0, 0.0]


def test_two_layer_by_hand():
    h = Translator([(2, 2), (2, 2)]).double()
    w1, b1 = np.array([[0.5, -1.0], [2.0, 0.25]]), np.array([0.1, -0.2])
    w2, b2 = np.array([[1.0, 1.0], [-0.5, 3.0]]), np.array([0.0, 0.3])
    with torch.no_grad():
        for layer, (w, b) in zip(h.layers, [(w1, b1), (w2, b2)]):
            layer.weight.copy_(torch.from_numpy(w))
            layer.bias.copy_(torch.from_numpy(b))
    z = np.array([0.3, -0.7])
    hidden = [np.tanh(sum(w1[i, j] * z[j] for j in range(2)) + b1[i]) for i in range(2)]
    expected = [sum(w2[i, j] * hidden[j] for j in range(2)) + b2[i] for i in range(2)]
    out = translate(h, torch.from_numpy(z)).values.detach().numpy()
    assert np.allclose(out, expected, atol=1e-12)


def test_translate_dimension_mismatch():
    with pytest.raises(ValueError):
        translate(Translator([(3, 2)]), torch.zeros(4))


def test_layer_dims_must_chain():
    with pytest.raises(ConfigurationError):
        Translator([(3, 4), (5, 2)])


def _identity2():
    h = Translator([(2, 2)]).double()
    with torch.no_grad():
        h.layers[0].weight.copy_(torch.eye(2))
        h.layers[0].bias.zero_()
    return h


def test_concept_score_parallel_and_orthogonal():
    h = _identity2()
    z = torch.tensor([3.0, 0.0], dtype=torch.float64)
    assert concept_score(h, z, _text(1.0, 0.0)) == pytest.approx(1.0)
    assert concept_score(h, z, _text(0.0, 1.0)) == pytest.approx(0.0)


def test_losses_zero_when_matching():
    h = _identity2()
    z = torch.tensor([0.6, 0.8], dtype=torch.float64)
    l_emb, l_sim, l_total = losses(h, z, z.clone(), [_text(1.0, 0.0), _text(0.0, 1.0)], 0.001)
    assert (l_emb.item(), l_sim.item(), l_total.item()) == (0.0, 0.0, 0.0)


def test_emb_loss_of_unit_offsets():
    h = Translator([(5, 5)]).double()
    with torch.no_grad():
        h.layers[0].weight.copy_(torch.eye(5))
        h.layers[0].bias.zero_()
    z = torch.randn(5, dtype=torch.float64)
    l_emb, _, _ = losses(h, z, z - 1.0, None, 0.0, use_similarity_loss=False)
    assert l_emb.item() == pytest.approx(1.0, abs=1e-12)


def test_total_loss_arithmetic():
    # l_emb = 1 from a unit offset; l_sim chosen = 2 is not reachable with cosines,
    # so check the combination rule on the returned terms instead
    h = _identity2()
    z = torch.tensor([1.0, 2.0], dtype=torch.float64)
    l_emb, l_sim, l_total = losses(h, z, torch.tensor([-0.5, 0.1], dtype=torch.float64),
                                   [_text(1.0, 0.0), _text(1.0, 1.0)], 0.001)
    assert l_total.item() - l_emb.item() == pytest.approx(0.001 * l_sim.item(), abs=1e-9)
    assert 1.0 + 0.001 * 2.0 == pytest.approx(1.002)


def test_similarity_loss_needs_texts():
    with pytest.raises(ConfigurationError):
        losses(_identity2(), torch.zeros(2), torch.zeros(2), [], 0.001, use_similarity_loss=True)


def test_train_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(max_epochs=0)
    with pytest.raises(ConfigurationError):
        TrainConfig(lr_decay_factor=1.0)
    with pytest.raises(ConfigurationError):
        TrainConfig.from_dict({"max_epochs": 3, "bogus": 1})


def test_warmup_schedule():
    cfg = TrainConfig(base_lr=0.1, warmup_peak_lr=0.2, warmup_epochs=5)
    assert [round(cfg.lr_at(e), 10) for e in range(7)] == [0.1, 0.12, 0.14, 0.16, 0.18, 0.2, 0.2]
    assert TrainConfig(warmup=False).lr_at(0) == 0.1


def _features(n=120, d_in=6, d_out=4, seed=0):
    g = torch.Generator().manual_seed(seed)
    z = torch.rand(n, d_in, generator=g, dtype=torch.float64)
    w = torch.randn(d_in, d_out, generator=g, dtype=torch.float64)
    texts = torch.eye(d_out, dtype=torch.float64)[:3]
    return z, torch.tanh(z @ w), texts


def test_single_epoch_report():
    z, t, texts = _features()
    _, report = fit_translator(z, t, texts, TrainConfig(max_epochs=1, hidden_dims=[8]))
    assert report.stopped_epoch == 1
    assert all(len(v) == 1 for v in report.val.values())
    assert all(len(v) == 1 for v in report.train.values())


def test_fit_is_deterministic():
    z, t, texts = _features()
    cfg = TrainConfig(max_epochs=5, hidden_dims=[8], seed=7)
    _, r1 = fit_translator(z, t, texts, cfg)
    _, r2 = fit_translator(z, t, texts, cfg)
    assert r1.val["total"] == r2.val["total"]


def test_zero_lambda_matches_no_similarity_loss():
    z, t, texts = _features()
    base = dict(max_epochs=4, hidden_dims=[8], seed=3)
    h_off, r_off = fit_translator(z, t, texts, TrainConfig(use_similarity_loss=False, **base))
    h_zero, r_zero = fit_translator(z, t, texts, TrainConfig(use_similarity_loss=True, lambda_sim=0.0, **base))
    assert r_off.val["emb"] == r_zero.val["emb"]
    for a, b in zip(h_off.parameters(), h_zero.parameters()):
        assert torch.equal(a, b)


def test_loss_decomposition_during_training():
    z, t, texts = _features()
    _, r = fit_translator(z, t, texts, TrainConfig(max_epochs=3, hidden_dims=[8], lambda_sim=0.5))
    for emb, sim, total in zip(r.val["emb"], r.val["sim"], r.val["total"]):
        assert total - emb == pytest.approx(0.5 * sim, abs=1e-9)
        assert emb >= 0 and sim >= 0


def test_plateau_decay_and_early_stop():
    # targets are pure noise, so validation loss soon stops improving
    g = torch.Generator().manual_seed(0)
    z = torch.rand(60, 3, generator=g, dtype=torch.float64)
    t = torch.randn(60, 2, generator=g, dtype=torch.float64)
    cfg = TrainConfig(max_epochs=200, hidden_dims=[4], warmup=False, plateau_epochs=2,
                      early_stop_patience=5, use_similarity_loss=False)
    _, r = fit_translator(z, t, torch.zeros(0, 2), cfg)
    assert r.stopped_epoch < 200
    assert r.stopped_epoch - r.best_epoch == 5
    assert min(r.lr) < cfg.base_lr
    # decays happen in factors of 10
    ratios = {round(cfg.base_lr / lr) for lr in r.lr}
    assert ratios <= {1, 10, 100, 1000, 10000}


def test_non_finite_loss_aborts():
    z, t, texts = _features()
    cfg = TrainConfig(max_epochs=3, hidden_dims=[8], base_lr=1e200, warmup=False, standardize=False)
    with pytest.raises(NonFiniteLossError):
        fit_translator(z * 1e200, t, texts, cfg)


def test_empty_dataset():
    with pytest.raises(ValueError):
        fit_translator(torch.zeros(0, 3), torch.zeros(0, 2), torch.zeros(1, 2), TrainConfig())


def test_train_translator_frozen_backbone_and_checkpoint(tmp_path):
    ds = generate_dataset(30, seed=0)
    model = build_toy_classifier((4, 4), input_size=64, seed=0)
    for p in model.parameters():
        p.requires_grad_(False)
    before = [p.clone() for p in model.parameters()]
    vlm = build_toy_vlm()
    vlm_before = vlm.text_matrix.clone()
    ckpt = tmp_path / "translator.pt"
    h, report = train_translator(model, vlm, ds.images, concept_vocabulary(),
                                 TrainConfig(max_epochs=2, hidden_dims=[16]), checkpoint=ckpt)
    assert all(torch.equal(a, b) for a, b in zip(before, model.parameters()))
    assert torch.equal(vlm_before, vlm.text_matrix)
    loaded, blob = load_translator(ckpt)
    z = torch.rand(h.in_dim)
    assert torch.equal(loaded(z), h(z))
    assert blob["config_hash"] == TrainConfig(max_epochs=2, hidden_dims=[16]).digest()
    data = json.loads(ckpt.with_suffix(".report.json").read_text())
    assert data["stopped_epoch"] == 2 and data["schema_version"] == 1


def test_report_drops_sim_column_without_similarity_loss():
    z, t, _ = _features()
    _, r = fit_translator(z, t, torch.zeros(0, 4), TrainConfig(max_epochs=1, hidden_dims=[8],
                                                             use_similarity_loss=False))
    d = r.to_dict()
    assert "sim" not in d["val"] and "sim" not in d["train"]
