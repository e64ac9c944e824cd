"""Dataset-level explanation and evaluation: per-sample region scores, the
random-map baseline, category averages and threshold-curve plots."""
from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .concept_learner import Translator
from .errors import UndefinedMetricError
from .explainer import DEFAULT_K, concept_contribution, counterfactual_patch_mask, explain_concept
from .metrics import (
    DEFAULT_GRID,
    RegionEvalResult,
    category_average,
    evaluate_candidates,
    evaluate_region,
    reference_aucs,
    random_iou,
    threshold_curve,
)
from .model_adapter import ExplanationSession, StagedClassifier
from .synthetic import BIAS_COLORS, KINDS, SceneSpec, random_scene
from .vlm import ConceptText, TextEmbeddingCache, apply_template

MODES = ("best_nra_of_top_k", "top1_by_association")
SCHEMA_VERSION = 1


def _seed_for(*parts) -> int:
    h = hashlib.sha256("\x1f".join(map(str, parts)).encode()).digest()
    return int.from_bytes(h[:8], "little")


def random_map(shape, seed: int, *parts) -> np.ndarray:
    """Uniform noise map, seeded per (image, concept) so baselines are reproducible."""
    return np.random.default_rng(_seed_for(seed, *parts)).random(shape)


@dataclass
class SampleResult:
    image_id: int
    concept: str
    category: str
    mask_fraction: float
    modes: dict[str, RegionEvalResult]
    random: RegionEvalResult
    association: list[tuple[int, float]]
    region: np.ndarray | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "concept": self.concept,
            "category": self.category,
            "mask_fraction": round(self.mask_fraction, 8),
            "association": [[l, s] for l, s in self.association],
            "modes": {m: r.to_dict() for m, r in self.modes.items()},
            "random": self.random.to_dict(),
        }


@dataclass
class EvaluationReport:
    samples: list[SampleResult]
    skipped: list[dict]

    def summary(self, mode: str) -> dict:
        get = (lambda s: s.random) if mode == "random" else (lambda s: s.modes[mode])
        if not self.samples:
            return {"n": 0}
        by_cat_nra, by_cat_hit = {}, {}
        for s in self.samples:
            by_cat_nra.setdefault(s.category, []).append(get(s).nra)
            by_cat_hit.setdefault(s.category, []).append(float(get(s).hit))
        nra_means, nra_avg = category_average(by_cat_nra)
        hit_means, hit_avg = category_average(by_cat_hit)
        results = [get(s) for s in self.samples]
        return {
            "n": len(results),
            "hit_rate": sum(r.hit for r in results) / len(results),
            "mean_nra": float(np.mean([r.nra for r in results])),
            "mean_epg": float(np.mean([r.epg for r in results])),
            "nra_by_category": nra_means,
            "nra_avg": nra_avg,
            "hit_rate_by_category": hit_means,
            "hit_rate_avg": hit_avg,
        }

    def to_dict(self) -> dict:
        modes = list(self.samples[0].modes) if self.samples else list(MODES)
        return {
            "summary": {m: self.summary(m) for m in [*modes, "random"]},
            "samples": [s.to_dict() for s in self.samples],
            "skipped": self.skipped,
        }


def _evaluate_image(model, h, vlm, cache, image, masks: dict, image_id: int, concepts: Sequence[ConceptText],
                    k: int, top_k: int, multi_layer: bool, grid, seed: int, keep_maps: bool):
    session = ExplanationSession(model, image)
    samples, skipped = [], []
    for concept in concepts:
        mask = masks.get(concept.label)
        if mask is None or not mask.any():
            continue
        frac = float(mask.mean())
        text = cache.get(vlm, concept).values
        try:
            reference_aucs(frac, grid)
            ex = explain_concept(session, h, text, k, multi_layer, concept, tuple(mask.shape))
        except UndefinedMetricError as err:
            skipped.append({"image_id": image_id, "concept": concept.label, "reason": str(err)})
            continue
        modes = {m: evaluate_candidates(ex.regions, mask, m, top_k, grid) for m in MODES}
        rnd = evaluate_region(random_map(mask.shape, seed, image_id, concept.label), mask, grid)
        best = modes["best_nra_of_top_k"]
        region = next((r.upsampled for r in ex.regions if r.layer_index == best.layer_index), None)
        samples.append(SampleResult(image_id, concept.label, concept.category, frac, modes, rnd,
                                    ex.association, region if keep_maps else None))
    return samples, skipped


def evaluate_dataset(model: StagedClassifier, h: Translator, vlm, images, masks: Sequence[dict],
                     image_ids: Sequence[int], concepts: Sequence[ConceptText], k: int = DEFAULT_K,
                     top_k: int | None = None, multi_layer: bool = True, grid=DEFAULT_GRID,
                     seed: int = 0, jobs: int = 1, keep_maps: bool = False) -> EvaluationReport:
    """Score every (image, present concept) pair against its mask.

    ``top_k`` defaults to the number of captured layers. Work fans out over
    images across ``jobs`` threads; results keep input order.
    """
    top_k = top_k or model.num_layers
    cache = TextEmbeddingCache()
    h.eval()

    def run(j):
        return _evaluate_image(model, h, vlm, cache, images[j], masks[j], int(image_ids[j]), concepts,
                               k, top_k, multi_layer, grid, seed, keep_maps)

    idx = range(len(image_ids))
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            parts = list(pool.map(run, idx))
    else:
        parts = [run(j) for j in idx]
    samples = [s for p, _ in parts for s in p]
    skipped = [s for _, sk in parts for s in sk]
    return EvaluationReport(samples, skipped)


def explain_image(model: StagedClassifier, h: Translator, vlm, image, concepts: Sequence[ConceptText],
                  k: int = DEFAULT_K, multi_layer: bool = True, class_index: int | None = None,
                  cache: TextEmbeddingCache | None = None):
    """Per concept: the explanation bundle and its contribution to ``class_index``
    (default: the predicted class)."""
    cache = cache or TextEmbeddingCache()
    session = ExplanationSession(model, image)
    c = session.prediction.predicted_class if class_index is None else int(class_index)
    out = []
    for concept in concepts:
        text = cache.get(vlm, concept).values
        ex = explain_concept(session, h, text, k, multi_layer, concept, tuple(session.image.shape[-2:]))
        contrib = concept_contribution(model, h, image, text, c, ex.best_layer,
                                       min(k, session.layer(ex.best_layer).maps.shape[0]),
                                       multi_layer, concept, session)
        out.append((ex, contrib))
    return session, c, out


# --- counterfactual study ------------------------------------------------------------


def conflict_scenes(count: int, start_seed: int = 10_000) -> list[SceneSpec]:
    """Scenes whose primary shape wears the color a biased classifier ties to another kind."""
    scenes, j = [], 0
    while len(scenes) < count:
        kind, decoy = KINDS[j % 3], KINDS[(j // 3) % 3]
        if kind != decoy:
            scenes.append(random_scene(start_seed + j, kind=kind, color=BIAS_COLORS[decoy]))
        j += 1
    return scenes


@dataclass
class CounterfactualSummary:
    scenes: int
    cases: int
    reduced_fraction: float
    flip_rate: float
    records: list[dict]

    def to_dict(self) -> dict:
        return {"scenes": self.scenes, "cases": self.cases, "reduced_fraction": self.reduced_fraction,
                "flip_rate": self.flip_rate, "records": self.records}


def counterfactual_study(model: StagedClassifier, h: Translator, vlm, scenes: Sequence[SceneSpec],
                         fill_color=None, patch_grid: int = 8, coverage: float = 0.2,
                         k: int = DEFAULT_K, multi_layer: bool = True) -> CounterfactualSummary:
    """For each misclassified scene, blank the strongest patches of the color
    region the classifier links to its (wrong) prediction and re-classify."""
    cache = TextEmbeddingCache()
    records = []
    for sc in scenes:
        img = sc.render()
        truth = KINDS.index(sc.largest().kind)
        session = ExplanationSession(model, img)
        wrong = session.prediction.predicted_class
        if wrong == truth:
            continue
        concept = apply_template(BIAS_COLORS[KINDS[wrong]], "color")
        ex = explain_concept(session, h, cache.get(vlm, concept).values, k, multi_layer, concept)
        region = ex.regions[ex.best_layer - 1]
        _, before, after = counterfactual_patch_mask(model, img, region, patch_grid, coverage, fill_color)
        records.append({
            "seed": sc.seed,
            "truth": truth,
            "predicted": wrong,
            "concept": concept.label,
            "layer": ex.best_layer,
            "p_wrong_before": float(before.probabilities[wrong]),
            "p_wrong_after": float(after.probabilities[wrong]),
            "predicted_after": after.predicted_class,
        })
    n = len(records)
    reduced = sum(r["p_wrong_after"] < r["p_wrong_before"] for r in records)
    flipped = sum(r["predicted_after"] != r["predicted"] for r in records)
    return CounterfactualSummary(len(scenes), n, reduced / n if n else float("nan"),
                                 flipped / n if n else float("nan"), records)


# --- plots ---------------------------------------------------------------------------


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_threshold_curves(sample: SampleResult, mask: np.ndarray, path, grid=DEFAULT_GRID) -> None:
    """Region IoU curve against the ideal-map and random-selection references."""
    plt = _pyplot()
    g = np.asarray(list(grid), dtype=float)
    fig, ax = plt.subplots(figsize=(4, 3), dpi=100)
    if sample.region is not None:
        ax.plot(g, threshold_curve(sample.region, mask, grid).ious, label="region")
    ax.plot(g, threshold_curve(mask.astype(float), mask, grid).ious, "--", label="ideal")
    ax.plot(g, random_iou(g / 100, sample.mask_fraction), ":", label="random")
    ax.set_xlabel("top n% of pixels")
    ax.set_ylabel("IoU")
    ax.set_title(f"image {sample.image_id}, {sample.concept}")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def plot_masking_curves(curves, labels, path) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4, 3), dpi=100)
    for c, lab in zip(curves, labels):
        ax.plot(c.x, c.y, marker=".", label=lab)
    ax.set_xlabel("fraction of top-K channels masked")
    ax.set_ylabel("score decrease")
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def plot_contributions(names, values, path) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4, 0.4 * len(names) + 1), dpi=100)
    y = np.arange(len(names))
    ax.barh(y, values, color=["tab:blue" if v >= 0 else "tab:red" for v in values])
    ax.set_yticks(y, names)
    ax.invert_yaxis()
    ax.axvline(0, color="k", lw=0.5)
    ax.set_xlabel("contribution")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def to_numpy_image(image) -> np.ndarray:
    return image.detach().cpu().numpy() if isinstance(image, torch.Tensor) else np.asarray(image)
