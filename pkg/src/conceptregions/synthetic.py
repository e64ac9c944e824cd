"""Desk-scale benchmark: colored-shape scenes with exact masks, a small CNN,
and a constructed vision-language model whose embeddings are known in closed form.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage

from .errors import ConfigurationError
from .model_adapter import GlobalAvgPoolHead, StagedClassifier
from .vlm import ConceptText, apply_template, unit

CANVAS = 64
KINDS = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow")
# uint8 palette keeps PNG round trips exact
PALETTE = {
    "red": (230, 38, 38),
    "green": (38, 191, 51),
    "blue": (38, 64, 230),
    "yellow": (242, 217, 38),
}
# class -> color it co-occurs with under the color-biased rule
BIAS_COLORS = {"circle": "red", "square": "green", "triangle": "blue"}
MIN_AREA = 16


@dataclass
class Shape:
    kind: str
    color: str
    position: tuple[float, float]  # (row, col) center
    scale: float  # radius / half side

    def mask(self, size: int = CANVAS) -> np.ndarray:
        rows, cols = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
        cy, cx = self.position
        s = self.scale
        if self.kind == "circle":
            return (rows - cy) ** 2 + (cols - cx) ** 2 <= s * s
        if self.kind == "square":
            return (np.abs(rows - cy) < s) & (np.abs(cols - cx) < s)
        if self.kind == "triangle":
            # apex up, base 2s at the bottom
            inside_v = (rows >= cy - s) & (rows < cy + s)
            half_width = (rows - (cy - s)) / 2.0
            return inside_v & (np.abs(cols - cx) <= half_width)
        raise ConfigurationError(f"unknown shape kind {self.kind!r}")

    def bbox(self) -> tuple[float, float, float, float]:
        cy, cx = self.position
        return cy - self.scale, cx - self.scale, cy + self.scale, cx + self.scale


@dataclass
class SceneSpec:
    shapes: list[Shape]
    background: tuple[int, int, int]
    seed: int
    size: int = CANVAS

    def shape_masks(self) -> list[np.ndarray]:
        return [s.mask(self.size) for s in self.shapes]

    def render(self) -> np.ndarray:
        """Float32 (3, H, W) image in [0, 1]."""
        img = np.empty((self.size, self.size, 3), dtype=np.uint8)
        img[:] = self.background
        for shape, m in zip(self.shapes, self.shape_masks()):
            img[m] = PALETTE[shape.color]
        return np.ascontiguousarray(img.transpose(2, 0, 1)).astype(np.float32) / 255.0

    def concept_masks(self) -> dict[str, np.ndarray]:
        """Per color and per shape kind, the union of matching shape masks."""
        out: dict[str, np.ndarray] = {}
        for shape, m in zip(self.shapes, self.shape_masks()):
            for key in (shape.color, shape.kind):
                out[key] = out[key] | m if key in out else m.copy()
        return out

    def largest(self) -> Shape:
        areas = [m.sum() for m in self.shape_masks()]
        return self.shapes[int(np.argmax(areas))]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        shapes = [Shape(s["kind"], s["color"], tuple(s["position"]), s["scale"]) for s in d["shapes"]]
        return cls(shapes, tuple(d["background"]), d["seed"], d.get("size", CANVAS))


def _separated(a: Shape, b: Shape, gap: float = 2.0) -> bool:
    a0, a1, a2, a3 = a.bbox()
    b0, b1, b2, b3 = b.bbox()
    return a2 + gap <= b0 or b2 + gap <= a0 or a3 + gap <= b1 or b3 + gap <= a1


def _place(rng, kind, color, lo, hi, others, size) -> Shape | None:
    for _ in range(100):
        s = float(rng.uniform(lo, hi))
        cy = float(rng.uniform(s + 1, size - s - 1))
        cx = float(rng.uniform(s + 1, size - s - 1))
        shape = Shape(kind, color, (round(cy, 2), round(cx, 2)), round(s, 2))
        if all(_separated(shape, o) for o in others) and shape.mask(size).sum() >= MIN_AREA:
            return shape
    return None


def random_scene(seed: int, class_rule: str = "shape", bias: float = 0.95, max_shapes: int = 3,
                 kind: str | None = None, color: str | None = None) -> SceneSpec:
    """One scene: a large primary shape and up to ``max_shapes - 1`` small distractors.

    ``kind``/``color`` pin the primary shape (used to build conflict cases).
    """
    if class_rule not in ("shape", "color_biased"):
        raise ConfigurationError(f"unknown class rule {class_rule!r}")
    rng = np.random.default_rng(seed)
    kind = kind or KINDS[rng.integers(len(KINDS))]
    if color is None:
        if class_rule == "color_biased" and rng.random() < bias:
            color = BIAS_COLORS[kind]
        else:
            color = COLORS[rng.integers(len(COLORS))]
    level = int(rng.integers(100, 156))
    shapes = [_place(rng, kind, color, 11.0, 15.0, [], CANVAS)]
    for _ in range(int(rng.integers(0, max_shapes))):
        d = _place(rng, KINDS[rng.integers(len(KINDS))], COLORS[rng.integers(len(COLORS))],
                   4.0, 7.0, shapes, CANVAS)
        if d is not None:
            shapes.append(d)
    return SceneSpec(shapes, (level, level, level), int(seed))


@dataclass
class SyntheticDataset:
    images: np.ndarray  # (N, 3, H, W) float32
    labels: np.ndarray  # (N,) int64
    scenes: list[SceneSpec]
    splits: dict[str, np.ndarray]
    seed: int
    class_rule: str = "shape"
    class_names: tuple[str, ...] = KINDS
    _mask_cache: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.scenes)

    def masks(self, i: int) -> dict[str, np.ndarray]:
        if i not in self._mask_cache:
            self._mask_cache[i] = self.scenes[i].concept_masks()
        return self._mask_cache[i]

    def present(self, i: int) -> list[str]:
        return sorted(self.masks(i))

    def concepts(self) -> list[ConceptText]:
        return concept_vocabulary()

    def subset(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.splits[name]
        return self.images[idx], self.labels[idx]


def concept_vocabulary() -> list[ConceptText]:
    return [apply_template(c, "color") for c in COLORS] + [apply_template(k, "object") for k in KINDS]


def generate_dataset(count: int, seed: int, class_rule: str = "shape", bias: float = 0.95) -> SyntheticDataset:
    """``count`` scenes; label = kind of the largest shape; 80/10/10 split."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if class_rule not in ("shape", "color_biased"):
        raise ConfigurationError(f"unknown class rule {class_rule!r}")
    seeds = np.random.SeedSequence(seed).generate_state(count)
    scenes = [random_scene(int(s), class_rule, bias) for s in seeds]
    images = np.stack([s.render() for s in scenes])
    labels = np.array([KINDS.index(s.largest().kind) for s in scenes], dtype=np.int64)
    order = np.random.default_rng(seed).permutation(count)
    n_train, n_val = int(round(0.8 * count)), int(round(0.1 * count))
    splits = {
        "train": np.sort(order[:n_train]),
        "val": np.sort(order[n_train:n_train + n_val]),
        "test": np.sort(order[n_train + n_val:]),
    }
    return SyntheticDataset(images, labels, scenes, splits, seed, class_rule)


def write_dataset(ds: SyntheticDataset, root) -> Path:
    root = Path(root)
    if not root.parent.exists():
        raise FileNotFoundError(f"parent directory {root.parent} does not exist")
    (root / "images").mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(ds.images):
        arr = np.round(img.transpose(1, 2, 0) * 255).astype(np.uint8)
        Image.fromarray(arr).save(root / "images" / f"{i:05d}.png")
        for concept, m in ds.masks(i).items():
            d = root / "masks" / concept
            d.mkdir(parents=True, exist_ok=True)
            Image.fromarray(m.astype(np.uint8) * 255).save(d / f"{i:05d}.png")
    labels = {"classes": list(ds.class_names), "labels": {f"{i:05d}": int(l) for i, l in enumerate(ds.labels)}}
    (root / "labels.json").write_text(json.dumps(labels, indent=1) + "\n")
    concepts = [{"label": c.label, "category": c.category} for c in ds.concepts()]
    (root / "concepts.json").write_text(json.dumps(concepts, indent=2) + "\n")
    manifest = {
        "seed": ds.seed,
        "count": len(ds),
        "class_rule": ds.class_rule,
        "split": {k: [int(i) for i in v] for k, v in ds.splits.items()},
        "scenes": [s.to_dict() for s in ds.scenes],
    }
    (root / "manifest.json").write_text(json.dumps(manifest, sort_keys=True) + "\n")
    return root


def load_dataset(root) -> SyntheticDataset:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    labels = json.loads((root / "labels.json").read_text())
    scenes = [SceneSpec.from_dict(d) for d in manifest["scenes"]]
    images = np.stack([
        np.asarray(Image.open(root / "images" / f"{i:05d}.png").convert("RGB"), dtype=np.float32)
        .transpose(2, 0, 1) / 255.0
        for i in range(manifest["count"])
    ])
    y = np.array([labels["labels"][f"{i:05d}"] for i in range(manifest["count"])], dtype=np.int64)
    splits = {k: np.array(v, dtype=np.int64) for k, v in manifest["split"].items()}
    return SyntheticDataset(images, y, scenes, splits, manifest["seed"], manifest["class_rule"],
                            tuple(labels["classes"]))


# --- toy classifier ----------------------------------------------------------


def _block(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(inplace=False),
        nn.Conv2d(cout, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(inplace=False),
        nn.MaxPool2d(2),
    )


def build_toy_classifier(channels: Sequence[int] = (24, 32, 48, 64), num_classes: int = 3,
                         input_size: int = CANVAS, seed: int = 0) -> StagedClassifier:
    """Conv stages that halve resolution, each one a capture point; GAP + linear head."""
    if not 2 <= len(channels) <= 4:
        raise ConfigurationError("toy classifier takes 2 to 4 stages")
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        stages, cin = [], 3
        for c in channels:
            stages.append(_block(cin, int(c)))
            cin = int(c)
        head = GlobalAvgPoolHead(nn.Linear(cin, num_classes))
    finally:
        torch.random.set_rng_state(gen_state)
    model = StagedClassifier(stages, head, None, (3, input_size, input_size), name="toy")
    return model.eval()


def train_toy_classifier(model: StagedClassifier, ds: SyntheticDataset, epochs: int = 10,
                         seed: int = 0, lr: float = 2e-3, batch_size: int = 64, log=None) -> dict:
    """Supervised training on the shape-kind labels; returns accuracies per epoch."""
    g = torch.Generator().manual_seed(seed)
    xtr, ytr = (torch.from_numpy(a) for a in ds.subset("train"))
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, epochs * ((len(xtr) + batch_size - 1) // batch_size))
    for p in model.parameters():
        p.requires_grad_(True)
    history = []
    for epoch in range(epochs):
        model.train()
        perm = torch.randperm(len(xtr), generator=g)
        for start in range(0, len(xtr), batch_size):
            idx = perm[start:start + batch_size]
            loss = F.cross_entropy(model(xtr[idx]), ytr[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
        val_acc = accuracy(model, *ds.subset("val"))
        history.append(val_acc)
        if log:
            log(f"classifier epoch {epoch + 1}: val acc {val_acc:.3f}")
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return {"val_accuracy": history, "test_accuracy": accuracy(model, *ds.subset("test"))}


@torch.no_grad()
def accuracy(model: StagedClassifier, images: np.ndarray, labels: np.ndarray) -> float:
    model.eval()
    preds = []
    for start in range(0, len(images), 256):
        preds.append(model(torch.from_numpy(images[start:start + 256])).argmax(1))
    return float((torch.cat(preds).numpy() == labels).mean())


# --- toy vision-language model -----------------------------------------------


def _stable_seed(*parts) -> int:
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "little")


class ToyVLM:
    """Text vectors are orthonormal rows; an image embeds as the normalized sum
    of the text vectors of the concepts it depicts, plus a fixed-norm noise term.

    Concepts are read off the pixels: palette colors by exact match, shape
    kinds by the fill ratio of each connected component.
    """

    def __init__(self, vocabulary: Sequence[str], seed: int = 0, epsilon: float = 0.05, dim: int = 64):
        if len(vocabulary) > dim:
            raise ConfigurationError(f"vocabulary of {len(vocabulary)} exceeds embedding dim {dim}")
        self.vocabulary = list(vocabulary)
        self.seed = seed
        self.epsilon = float(epsilon)
        self.dim = dim
        self.name = f"toy:{seed}:{dim}"
        rng = np.random.default_rng(seed)
        q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        self.text_matrix = torch.from_numpy(q[: len(self.vocabulary)].copy()).float()
        gram = (self.text_matrix @ self.text_matrix.T - torch.eye(len(self.vocabulary))).abs()
        if len(self.vocabulary) and gram.max() > 0.1:
            raise ConfigurationError("text vectors are not near-orthogonal")

    def text_vector(self, label: str) -> torch.Tensor:
        if label in self.vocabulary:
            return self.text_matrix[self.vocabulary.index(label)].clone()
        rng = np.random.default_rng(_stable_seed(self.seed, "text", label))
        return unit(torch.from_numpy(rng.standard_normal(self.dim)).float())

    def encode_text(self, concept: ConceptText) -> torch.Tensor:
        return self.text_vector(concept.label)

    def detect(self, image) -> list[str]:
        """Concept labels visible in an image."""
        arr = np.asarray(image.detach().cpu() if isinstance(image, torch.Tensor) else image)
        pix = np.round(arr * 255).astype(np.int16).transpose(1, 2, 0)
        found = []
        for color, rgb in PALETTE.items():
            m = np.all(pix == np.array(rgb, dtype=np.int16), axis=-1)
            if m.sum() < MIN_AREA:
                continue
            found.append(color)
            labels, n = ndimage.label(m)
            for sl, idx in zip(ndimage.find_objects(labels), range(1, n + 1)):
                area = (labels[sl] == idx).sum()
                if area < MIN_AREA:
                    continue
                fill = area / ((sl[0].stop - sl[0].start) * (sl[1].stop - sl[1].start))
                found.append("square" if fill > 0.98 else "circle" if fill > 0.65 else "triangle")
        return sorted(set(found))

    def encode_image(self, image) -> torch.Tensor:
        present = [c for c in self.detect(image) if c in self.vocabulary]
        total = torch.zeros(self.dim)
        for c in present:
            total = total + self.text_vector(c)
        base = unit(total) if present else total
        if self.epsilon == 0:
            return base
        arr = np.ascontiguousarray(np.asarray(image, dtype=np.float32))
        rng = np.random.default_rng(_stable_seed(self.seed, "image", hashlib.sha256(arr.tobytes()).hexdigest()))
        noise = unit(torch.from_numpy(rng.standard_normal(self.dim)).float())
        return base + self.epsilon * noise

    def encode_images(self, images: np.ndarray) -> torch.Tensor:
        return torch.stack([self.encode_image(im) for im in images])


def build_toy_vlm(vocabulary: Sequence[str] | None = None, seed: int = 0, epsilon: float = 0.05,
                  dim: int = 64) -> ToyVLM:
    if not vocabulary:
        vocabulary = list(COLORS) + list(KINDS)
    return ToyVLM(vocabulary, seed, epsilon, dim)
