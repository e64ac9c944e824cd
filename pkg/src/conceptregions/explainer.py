"""Concept regions, layer association scores, and concept contributions.

A concept's region at layer ``l`` is the ReLU of the activation maps weighted
by the spatially averaged gradient of the concept score.  How strongly a layer
is associated with the concept is measured by cumulatively replacing its most
important channels with the layer mean and integrating the score drop; the
same curve driven by the class probability gives the concept's contribution.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .concept_learner import Translator
from .errors import ConfigurationError, GradientUnavailableError
from .model_adapter import (
    ClassPrediction,
    ExplanationSession,
    LayerActivations,
    StagedClassifier,
    mask_channels_and_recompute,
)
from .vlm import ConceptText, similarity

DEFAULT_K = 20


@dataclass
class ChannelWeights:
    layer_index: int
    weights: torch.Tensor  # (C,)


@dataclass
class ConceptRegionMap:
    concept: ConceptText | None
    layer_index: int
    map: np.ndarray
    upsampled: np.ndarray | None = None
    association_score: float = 0.0


@dataclass
class MaskingCurve:
    x: np.ndarray
    y: np.ndarray
    base_score: float
    target: str  # "concept_score" | "class_score"
    channels: list[int] = field(default_factory=list)  # masking order
    scores: np.ndarray | None = None  # score after masking the top i


@dataclass
class ContributionScore:
    concept: ConceptText | None
    layer_index: int
    value: float
    curve: MaskingCurve | None = None


# --- score targets -------------------------------------------------------------


class ConceptTarget:
    """Concept score: cosine between the translated embedding and a text vector."""

    kind = "concept_score"

    def __init__(self, translator: Translator, text: torch.Tensor, multi_layer: bool = True,
                 concept: ConceptText | None = None):
        self.translator = translator
        self.text = torch.as_tensor(text)
        self.multi_layer = multi_layer
        self.concept = concept

    def _score(self, pooled: Sequence[torch.Tensor]) -> torch.Tensor:
        z = torch.cat(list(pooled), dim=-1) if self.multi_layer else pooled[-1]
        out = self.translator(z.to(self.translator.input_shift.dtype))
        return similarity(out, self.text.to(out.dtype))

    def session_score(self, session: ExplanationSession) -> torch.Tensor:
        return self._score([p.values for p in session.pooled])

    def batch_score(self, maps: Sequence[torch.Tensor], logits: torch.Tensor) -> torch.Tensor:
        return self._score([m.mean(dim=(-2, -1)) for m in maps])


class ClassTarget:
    """Softmax probability of one class."""

    kind = "class_score"

    def __init__(self, class_index: int):
        self.class_index = int(class_index)

    def session_score(self, session: ExplanationSession) -> torch.Tensor:
        return session.prediction.probabilities[self.class_index]

    def batch_score(self, maps, logits: torch.Tensor) -> torch.Tensor:
        return torch.softmax(logits, dim=-1)[:, self.class_index]


# --- weights and maps --------------------------------------------------------------


def concept_weights(session: ExplanationSession, score: torch.Tensor, layer_index: int) -> ChannelWeights:
    """Per-channel weights: spatial sum of d(score)/d(maps) over H*W."""
    maps = session.layer(layer_index).maps
    (grad,) = torch.autograd.grad(score, maps, retain_graph=True, allow_unused=True)
    if grad is None:
        raise GradientUnavailableError(f"score does not depend on layer {layer_index}")
    gamma = maps.shape[-2] * maps.shape[-1]
    return ChannelWeights(layer_index, grad.sum(dim=(-2, -1)).detach() / gamma)


def all_layer_weights(session: ExplanationSession, score: torch.Tensor) -> list[ChannelWeights]:
    maps = [a.maps for a in session.activations]
    grads = torch.autograd.grad(score, maps, retain_graph=True, allow_unused=True)
    out = []
    for i, (m, g) in enumerate(zip(maps, grads)):
        w = torch.zeros(m.shape[0], dtype=m.dtype) if g is None else g.sum(dim=(-2, -1)).detach()
        out.append(ChannelWeights(i + 1, w / (m.shape[-2] * m.shape[-1])))
    return out


def fused_map(acts: LayerActivations, w: ChannelWeights) -> torch.Tensor:
    """Weighted channel sum before the ReLU."""
    if acts.layer_index != w.layer_index or acts.maps.shape[0] != w.weights.shape[0]:
        raise ValueError(f"weights for layer {w.layer_index} ({w.weights.shape[0]} ch) do not match "
                         f"activations of layer {acts.layer_index} ({acts.maps.shape[0]} ch)")
    maps = acts.maps.detach()
    return torch.einsum("k,khw->hw", w.weights.to(maps.dtype), maps)


def upsample(region: np.ndarray | torch.Tensor, size: tuple[int, int]) -> np.ndarray:
    t = torch.as_tensor(region)[None, None]
    out = F.interpolate(t, size=size, mode="bilinear", align_corners=False)[0, 0]
    return out.clamp_min(0).numpy()


def region_map(acts: LayerActivations, w: ChannelWeights, image_size: tuple[int, int] | None = None,
               concept: ConceptText | None = None) -> ConceptRegionMap:
    r = torch.relu(fused_map(acts, w))
    up = upsample(r, image_size) if image_size is not None else None
    return ConceptRegionMap(concept, acts.layer_index, r.numpy(), up)


def gradcam_map(session: ExplanationSession, class_index: int | None = None,
                image_size: tuple[int, int] | None = None) -> ConceptRegionMap:
    """Reference Grad-CAM at the last captured layer.

    Runs its own plain forward pass with module hooks rather than reusing the
    session's traced maps, so it can serve as an independent check.
    """
    model = session.model
    c = session.prediction.predicted_class if class_index is None else int(class_index)
    stage_idx = model.capture[-1]
    codec = model.codecs[stage_idx]
    store = {}

    def fwd_hook(module, inputs, output):
        store["act"] = output
        output.register_hook(lambda g: store.__setitem__("grad", g))

    handle = model.stages[stage_idx].register_forward_hook(fwd_hook)
    try:
        x = session.image.detach().clone().requires_grad_(True)
        with torch.enable_grad():
            prob = torch.softmax(model(x), dim=-1)[0, c]
            prob.backward()
    finally:
        handle.remove()
    act = codec.encode(store["act"].detach())[0]
    grad = codec.encode(store["grad"])[0]
    alpha = grad.mean(dim=(-2, -1))
    cam = torch.relu((alpha[:, None, None] * act).sum(0))
    up = upsample(cam, image_size) if image_size is not None else None
    return ConceptRegionMap(None, model.num_layers, cam.numpy(), up)


# --- masking curves ---------------------------------------------------------------


def rank_channels(weights: torch.Tensor, pooled: torch.Tensor, k: int) -> list[int]:
    """Top-k channels by weight * pooled activation; ties go to the lower index."""
    importance = (weights * pooled).detach().cpu().numpy()
    if k > importance.shape[0]:
        raise ConfigurationError(f"K={k} exceeds the layer's {importance.shape[0]} channels")
    return [int(i) for i in np.argsort(-importance, kind="stable")[:k]]


def _masked_scores(session: ExplanationSession, target, layer_index: int, order: Sequence[int],
                   mask_value: float, batched: bool) -> np.ndarray:
    model = session.model
    k = len(order)
    if not batched:
        out = []
        for i in range(1, k + 1):
            x = session.image.detach()
            with torch.no_grad():
                maps, _, logits = model.trace(x, masks={layer_index: (order[:i], mask_value)})
            out.append(float(target.batch_score(maps, logits)[0].detach()))
        return np.array(out)
    with torch.no_grad():
        maps = session.layer(layer_index).maps.detach()
        batch = maps.unsqueeze(0).expand(k, *maps.shape).clone()
        for i in range(k):
            batch[i, list(order[: i + 1])] = mask_value
        raw = session.raws[layer_index - 1].detach()
        raw = raw.expand(k, *raw.shape[1:])
        prefix = [a.maps.detach().unsqueeze(0).expand(k, *a.maps.shape)
                  for a in session.activations[: layer_index - 1]]
        out_maps, logits = model.resume(layer_index, batch, raw, prefix)
        return target.batch_score(out_maps, logits).double().numpy()


def curve_from_session(session: ExplanationSession, target, layer_index: int, k: int = DEFAULT_K,
                       ranking=None, weights: ChannelWeights | None = None,
                       batched: bool = True) -> MaskingCurve:
    """Masking curve on an open session.

    ``ranking`` (default: ``target``) supplies the score whose gradients order
    the channels; ``weights`` may pass those precomputed.
    """
    ranking = ranking or target
    if weights is None:
        weights = concept_weights(session, ranking.session_score(session), layer_index)
    pooled = session.pooled[layer_index - 1].values.detach()
    order = rank_channels(weights.weights, pooled, k)
    mask_value = float(pooled.mean())
    base = float(target.session_score(session).detach())
    scores = _masked_scores(session, target, layer_index, order, mask_value, batched)
    y = np.concatenate([[0.0], base - scores])
    x = np.arange(k + 1) / k
    return MaskingCurve(x, y, base, target.kind, order, scores)


def masking_curve(model: StagedClassifier, image, target, layer_index: int, k: int = DEFAULT_K,
                  ranking=None, batched: bool = True) -> MaskingCurve:
    return curve_from_session(ExplanationSession(model, image), target, layer_index, k, ranking,
                              batched=batched)


def curve_auc(curve: MaskingCurve) -> float:
    return float(np.trapezoid(curve.y, curve.x))


def association_scores(model: StagedClassifier, h: Translator, image, text: torch.Tensor,
                       k: int = DEFAULT_K, multi_layer: bool = True, session=None) -> list[tuple[int, float]]:
    session = session or ExplanationSession(model, image)
    target = ConceptTarget(h, text, multi_layer)
    weights = all_layer_weights(session, target.session_score(session))
    return [(w.layer_index, curve_auc(curve_from_session(session, target, w.layer_index, k, weights=w)))
            for w in weights]


def select_layer(scores: Sequence[tuple[int, float]]) -> int:
    """Layer with the highest association score; ties go to the lowest index."""
    best = max(s for _, s in scores)
    return min(l for l, s in scores if s == best)


def concept_contribution(model: StagedClassifier, h: Translator, image, text: torch.Tensor, class_index: int,
                         layer_index: int | None = None, k: int = DEFAULT_K, multi_layer: bool = True,
                         concept: ConceptText | None = None, session=None) -> ContributionScore:
    """AUC of the class-probability drop when masking the concept's top channels."""
    session = session or ExplanationSession(model, image)
    concept_t = ConceptTarget(h, text, multi_layer, concept)
    if layer_index is None:
        layer_index = select_layer(association_scores(model, h, image, text, k, multi_layer, session))
    curve = curve_from_session(session, ClassTarget(class_index), layer_index, k, ranking=concept_t)
    return ContributionScore(concept, layer_index, curve_auc(curve), curve)


@dataclass
class ConceptExplanation:
    concept: ConceptText | None
    score: float
    regions: list[ConceptRegionMap]
    curves: list[MaskingCurve]

    @property
    def association(self) -> list[tuple[int, float]]:
        return [(r.layer_index, r.association_score) for r in self.regions]

    @property
    def best_layer(self) -> int:
        return select_layer(self.association)


def explain_concept(session: ExplanationSession, h: Translator, text: torch.Tensor, k: int = DEFAULT_K,
                    multi_layer: bool = True, concept: ConceptText | None = None,
                    image_size: tuple[int, int] | None = None) -> ConceptExplanation:
    """Region candidates for every layer, each carrying its association score."""
    target = ConceptTarget(h, text, multi_layer, concept)
    score = target.session_score(session)
    if image_size is None:
        image_size = tuple(session.image.shape[-2:])
    regions, curves = [], []
    for w in all_layer_weights(session, score):
        region = region_map(session.layer(w.layer_index), w, image_size, concept)
        kk = min(k, w.weights.shape[0])
        curve = curve_from_session(session, target, w.layer_index, kk, weights=w)
        region.association_score = curve_auc(curve)
        regions.append(region)
        curves.append(curve)
    return ConceptExplanation(concept, float(score.detach()), regions, curves)


# --- counterfactual ----------------------------------------------------------------


def patch_ranking(region: np.ndarray, patch_grid: int) -> tuple[list[tuple[slice, slice]], np.ndarray]:
    H, W = region.shape
    rows = np.linspace(0, H, patch_grid + 1).round().astype(int)
    cols = np.linspace(0, W, patch_grid + 1).round().astype(int)
    cells, means = [], []
    for r0, r1 in zip(rows[:-1], rows[1:]):
        for c0, c1 in zip(cols[:-1], cols[1:]):
            cells.append((slice(r0, r1), slice(c0, c1)))
            means.append(region[r0:r1, c0:c1].mean() if r1 > r0 and c1 > c0 else -np.inf)
    return cells, np.argsort(-np.asarray(means), kind="stable")


def counterfactual_patch_mask(model: StagedClassifier, image, region: ConceptRegionMap, patch_grid: int,
                              coverage: float, fill_color=None):
    """Blank the patches where the region is strongest; return the masked image
    and the predictions before and after."""
    if not 0 <= coverage <= 1:
        raise ValueError(f"coverage {coverage} outside [0, 1]")
    img = np.asarray(image, dtype=np.float32)
    H, W = img.shape[-2:]
    heat = region.upsampled if region.upsampled is not None else upsample(region.map, (H, W))
    cells, order = patch_ranking(np.asarray(heat), patch_grid)
    n = math.ceil(coverage * len(cells) - 1e-9)
    fill = img.reshape(img.shape[0], -1).mean(1) if fill_color is None else np.asarray(fill_color, np.float32)
    masked = img.copy()
    for idx in order[:n]:
        rs, cs = cells[idx]
        masked[:, rs, cs] = fill[:, None, None]
    with torch.no_grad():
        dtype = next(model.parameters()).dtype
        logits = model(torch.from_numpy(np.stack([img, masked])).to(dtype))
    return masked, ClassPrediction.from_logits(logits[0]), ClassPrediction.from_logits(logits[1])


# --- export -------------------------------------------------------------------------

_MAGIC = b"CRMAP1\x00\x00"


def save_raw(array: np.ndarray, path) -> None:
    """Binary container: 8-byte magic, uint32 ndim, uint32 dims, float32 C-order data (little endian)."""
    a = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
        f.write(a.tobytes(order="C"))


def load_raw(path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.read(8) != _MAGIC:
            raise ValueError(f"{path} is not a region-map container")
        (ndim,) = struct.unpack("<I", f.read(4))
        shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
        return np.frombuffer(f.read(), dtype="<f4").reshape(shape).copy()


def save_region_png(region: ConceptRegionMap, path) -> dict:
    """Grayscale PNG of the (upsampled) map, min-max scaled; scale recorded in a sidecar JSON."""
    data = region.upsampled if region.upsampled is not None else region.map
    lo, hi = float(data.min()), float(data.max())
    scaled = (data - lo) / (hi - lo) if hi > lo else np.zeros_like(data)
    Image.fromarray(np.round(scaled * 255).astype(np.uint8)).save(path)
    meta = {
        "concept": region.concept.label if region.concept else None,
        "layer_index": region.layer_index,
        "min": lo,
        "max": hi,
        "shape": list(data.shape),
        "association_score": region.association_score,
    }
    Path(path).with_suffix(".json").write_text(json.dumps(meta, indent=1) + "\n")
    return meta
