"""Vision-language model interface: concept templates, embeddings, similarity."""
from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch

from .errors import ConfigurationError

CATEGORIES = ("object", "part", "color", "material", "other")

_TEMPLATES = {
    "object": "a photo of a {}",
    "part": "a photo of a {}",
    "color": "a photo of a {} object",
    "material": "a photo of an object made of {}",
    "other": "a photo of {}",
}


@dataclass(frozen=True)
class ConceptText:
    label: str
    category: str
    templated: str


@dataclass
class EmbeddingVectorVLM:
    values: torch.Tensor
    modality: str  # "text" | "image"
    normalized: bool = False

    def __len__(self):
        return self.values.shape[-1]


def apply_template(label: str, category: str) -> ConceptText:
    if not label:
        raise ValueError("concept label must be nonempty")
    if category not in _TEMPLATES:
        raise ConfigurationError(f"unknown concept category {category!r}")
    return ConceptText(label, category, _TEMPLATES[category].format(label))


def load_concept_set(path) -> list[ConceptText]:
    """Read ``[{"label": ..., "category": ...}, ...]``; templated text is derived."""
    entries = json.loads(Path(path).read_text())
    concepts = []
    for e in entries:
        extra = set(e) - {"label", "category"}
        if extra:
            raise ConfigurationError(f"unexpected keys in concept entry: {sorted(extra)}")
        concepts.append(apply_template(e["label"], e["category"]))
    return concepts


def save_concept_set(concepts: Sequence[ConceptText], path) -> None:
    data = [{"label": c.label, "category": c.category} for c in concepts]
    Path(path).write_text(json.dumps(data, indent=2) + "\n")


class VLM(Protocol):
    name: str
    dim: int

    def encode_text(self, concept: ConceptText) -> torch.Tensor: ...

    def encode_image(self, image) -> torch.Tensor: ...


def unit(v: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    return v / v.norm(dim=-1, keepdim=True).clamp_min(eps)


def embed(vlm: VLM, item) -> EmbeddingVectorVLM:
    """Text embeddings come back L2-normalized; image embeddings raw."""
    if isinstance(item, ConceptText):
        return EmbeddingVectorVLM(unit(vlm.encode_text(item)), "text", True)
    if isinstance(item, (np.ndarray, torch.Tensor)):
        return EmbeddingVectorVLM(vlm.encode_image(item), "image", False)
    raise ConfigurationError(f"cannot embed object of type {type(item).__name__}")


def vlm_similarity(img_emb: EmbeddingVectorVLM, txt_emb: EmbeddingVectorVLM) -> float:
    if len(img_emb) != len(txt_emb):
        raise ValueError(f"dimension mismatch: {len(img_emb)} vs {len(txt_emb)}")
    return float(similarity(img_emb.values, txt_emb.values))


def similarity(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Dot product of unit vectors along the last axis (broadcasts)."""
    return (unit(a) * unit(b)).sum(-1)


class TextEmbeddingCache:
    """Normalized text embeddings keyed by (vlm name, templated string)."""

    def __init__(self):
        self._store: dict[tuple[str, str], torch.Tensor] = {}
        self._lock = threading.Lock()

    def get(self, vlm: VLM, concept: ConceptText) -> EmbeddingVectorVLM:
        key = (vlm.name, concept.templated)
        with self._lock:
            vec = self._store.get(key)
        if vec is None:
            vec = embed(vlm, concept).values
            with self._lock:
                vec = self._store.setdefault(key, vec)
        return EmbeddingVectorVLM(vec, "text", True)

    def matrix(self, vlm: VLM, concepts: Sequence[ConceptText]) -> torch.Tensor:
        return torch.stack([self.get(vlm, c).values for c in concepts])

    def __len__(self):
        return len(self._store)


class ClipAdapter:
    """Wraps a Hugging Face CLIP checkpoint (``transformers`` required)."""

    def __init__(self, name_or_path: str = "openai/clip-vit-base-patch32", model=None, processor=None):
        from transformers import CLIPModel, CLIPProcessor

        self.name = f"clip:{name_or_path}"
        self.model = model if model is not None else CLIPModel.from_pretrained(name_or_path)
        self.model.eval()
        self.processor = processor if processor is not None else CLIPProcessor.from_pretrained(name_or_path)
        self.dim = int(self.model.config.projection_dim)

    @torch.no_grad()
    def encode_text(self, concept: ConceptText) -> torch.Tensor:
        inputs = self.processor(text=[concept.templated], return_tensors="pt", padding=True)
        return self.model.get_text_features(**inputs)[0]

    @torch.no_grad()
    def encode_image(self, image) -> torch.Tensor:
        arr = np.asarray(image, dtype=np.float32)
        inputs = self.processor(images=np.transpose(arr, (1, 2, 0)), return_tensors="pt",
                                do_rescale=False)
        return self.model.get_image_features(**inputs)[0]


def clip_embedding_dim(config=None) -> int:
    from transformers import CLIPConfig

    return int((config or CLIPConfig()).projection_dim)


def build_vlm(spec: dict, vocabulary: Sequence[str] = ()) -> VLM:
    name = spec.get("name", "toy")
    if name == "toy":
        from .synthetic import build_toy_vlm
        return build_toy_vlm(list(vocabulary), seed=int(spec.get("seed", 0)),
                             epsilon=float(spec.get("epsilon", 0.05)), dim=int(spec.get("dim", 64)))
    if name.startswith("clip"):
        return ClipAdapter(spec.get("path", "openai/clip-vit-base-patch32"))
    raise ConfigurationError(f"unknown VLM {name!r}")
