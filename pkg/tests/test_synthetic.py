import numpy as np
import pytest
import torch

from conceptregions.errors import ConfigurationError
from conceptregions.synthetic import (
    BIAS_COLORS,
    COLORS,
    KINDS,
    PALETTE,
    SceneSpec,
    Shape,
    accuracy,
    build_toy_classifier,
    build_toy_vlm,
    concept_vocabulary,
    generate_dataset,
    load_dataset,
    random_scene,
    write_dataset,
)
from conceptregions.vlm import similarity


def test_scene_is_deterministic():
    a, b = random_scene(42), random_scene(42)
    assert a.to_dict() == b.to_dict()
    assert np.array_equal(a.render(), b.render())
    assert random_scene(43).to_dict() != a.to_dict()


def test_scene_round_trip():
    s = random_scene(7)
    assert SceneSpec.from_dict(s.to_dict()).to_dict() == s.to_dict()


def test_render_uses_exact_palette():
    s = random_scene(3)
    img = s.render()
    assert img.dtype == np.float32 and img.shape == (3, 64, 64)
    pix = np.round(img * 255).astype(int).transpose(1, 2, 0).reshape(-1, 3)
    allowed = {tuple(v) for v in PALETTE.values()} | {tuple(s.background)}
    assert {tuple(p) for p in pix} <= allowed


def test_unknown_class_rule():
    with pytest.raises(ConfigurationError):
        random_scene(0, class_rule="texture")
    with pytest.raises(ConfigurationError):
        generate_dataset(4, 0, class_rule="texture")


def test_primary_shape_is_largest():
    for seed in range(30):
        s = random_scene(seed)
        assert s.largest() is s.shapes[0]
        assert 1 <= len(s.shapes) <= 3


def test_concept_mask_fractions():
    fracs = []
    for seed in range(200):
        for m in random_scene(seed).concept_masks().values():
            fracs.append(m.mean())
    inside = np.mean([(0.01 < f < 0.6) for f in fracs])
    assert inside >= 0.95
    assert inside == pytest.approx(0.976, abs=0.02)


def test_masks_match_pixels():
    s = random_scene(11)
    img = np.round(s.render() * 255).astype(int)
    for color in COLORS:
        m = s.concept_masks().get(color)
        painted = np.all(img.transpose(1, 2, 0) == PALETTE[color], axis=-1)
        if m is None:
            assert painted.sum() < 16
        else:
            assert np.array_equal(m, painted)


def test_color_bias_rate():
    scenes = [random_scene(s, "color_biased", bias=0.9) for s in range(400)]
    rate = np.mean([sc.shapes[0].color == BIAS_COLORS[sc.shapes[0].kind] for sc in scenes])
    # biased draws plus the 1/4 chance that an unbiased draw hits the same color
    assert rate == pytest.approx(0.9 + 0.1 / 4, abs=0.04)


def test_dataset_splits_and_labels():
    ds = generate_dataset(50, seed=1)
    assert ds.images.shape == (50, 3, 64, 64)
    idx = np.concatenate(list(ds.splits.values()))
    assert sorted(idx.tolist()) == list(range(50))
    assert [len(ds.splits[k]) for k in ("train", "val", "test")] == [40, 5, 5]
    for i in range(50):
        assert ds.labels[i] == KINDS.index(ds.scenes[i].largest().kind)


def test_dataset_write_load_round_trip(tmp_path):
    ds = generate_dataset(6, seed=2)
    write_dataset(ds, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert np.array_equal(back.images, ds.images)
    assert np.array_equal(back.labels, ds.labels)
    assert all(np.array_equal(back.masks(i)[c], ds.masks(i)[c]) for i in range(6) for c in ds.present(i))
    with pytest.raises(FileNotFoundError):
        write_dataset(ds, tmp_path / "missing" / "d")


def test_vocabulary():
    voc = concept_vocabulary()
    assert [c.label for c in voc] == list(COLORS) + list(KINDS)
    assert {c.category for c in voc} == {"color", "object"}


def test_untrained_classifier_near_chance():
    ds = generate_dataset(150, seed=4)
    model = build_toy_classifier(seed=0).eval()
    assert accuracy(model, ds.images, ds.labels) < 0.6


def test_toy_classifier_stage_counts():
    for ch in [(4, 4), (4, 4, 4), (4, 4, 4, 4)]:
        m = build_toy_classifier(ch, input_size=32)
        assert m.num_layers == len(ch)
    with pytest.raises(ConfigurationError):
        build_toy_classifier((4,))


def test_text_rows_orthonormal():
    vlm = build_toy_vlm()
    g = vlm.text_matrix @ vlm.text_matrix.T
    assert torch.allclose(g, torch.eye(len(vlm.vocabulary)), atol=1e-5)


def test_detect_matches_scene_concepts():
    vlm = build_toy_vlm()
    for seed in range(100):
        s = random_scene(seed)
        assert vlm.detect(s.render()) == sorted(s.concept_masks())


def test_present_concept_margin():
    vlm = build_toy_vlm(epsilon=0.05)
    for seed in range(50):
        s = random_scene(seed)
        emb = vlm.encode_image(s.render())
        present = set(s.concept_masks())
        on = [float(similarity(emb, vlm.text_vector(c))) for c in present]
        off = [float(similarity(emb, vlm.text_vector(c))) for c in vlm.vocabulary if c not in present]
        assert min(on) - max(off) >= 0.2


def test_noise_free_embedding_oracle():
    vlm = build_toy_vlm(epsilon=0.0)
    s = random_scene(5)
    present = sorted(s.concept_masks())
    expected = sum(vlm.text_vector(c) for c in present)
    assert torch.allclose(vlm.encode_image(s.render()), expected / expected.norm(), atol=1e-6)


def test_image_embedding_deterministic():
    vlm = build_toy_vlm()
    img = random_scene(9).render()
    assert torch.equal(vlm.encode_image(img), vlm.encode_image(img.copy()))


def test_pinned_primary_shape():
    s = random_scene(123, kind="circle", color="blue")
    assert (s.shapes[0].kind, s.shapes[0].color) == ("circle", "blue")


def test_shape_masks_have_expected_fill():
    for kind, lo, hi in [("square", 0.98, 1.0), ("circle", 0.7, 0.85), ("triangle", 0.4, 0.6)]:
        m = Shape(kind, "red", (32.0, 32.0), 12.0).mask()
        rows, cols = np.nonzero(m)
        fill = m.sum() / ((np.ptp(rows) + 1) * (np.ptp(cols) + 1))
        assert lo <= fill <= hi, kind
