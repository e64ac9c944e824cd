"""Uniform access to per-layer activation maps of a differentiable classifier.

A classifier is wrapped as a sequence of stages followed by a head.  The
outputs of selected stages are *capture points*; their activation maps can be
read out, pooled, differentiated against, or overwritten channel-wise before
the rest of the network is re-run.
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, InputShapeError, ReshapeError

__all__ = [
    "LayerActivations",
    "PooledEmbedding",
    "ConcatEmbedding",
    "ClassPrediction",
    "StagedClassifier",
    "GlobalAvgPoolHead",
    "GridCodec",
    "TokenGridCodec",
    "ExplanationSession",
    "forward_with_activations",
    "pool_layer",
    "concat_layers",
    "tokens_to_grid",
    "mask_channels_and_recompute",
    "build_classifier",
    "set_deterministic",
]


@dataclass
class LayerActivations:
    layer_index: int
    maps: torch.Tensor  # (C, H, W)

    def __post_init__(self):
        if self.maps.dim() != 3 or min(self.maps.shape) < 1:
            raise InputShapeError(f"activation maps must be (C, H, W), got {tuple(self.maps.shape)}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.maps.shape)

    def numpy(self) -> np.ndarray:
        return self.maps.detach().cpu().numpy()


@dataclass
class PooledEmbedding:
    layer_index: int
    values: torch.Tensor  # (C,)

    def __len__(self):
        return self.values.shape[0]


@dataclass
class ConcatEmbedding:
    values: torch.Tensor
    layer_offsets: list[tuple[int, int, int]]  # (layer_index, start, length)

    def __len__(self):
        return self.values.shape[0]

    def slice(self, layer_index: int) -> torch.Tensor:
        for idx, start, length in self.layer_offsets:
            if idx == layer_index:
                return self.values[start:start + length]
        raise KeyError(layer_index)


@dataclass
class ClassPrediction:
    logits: torch.Tensor
    probabilities: torch.Tensor
    predicted_class: int

    @classmethod
    def from_logits(cls, logits: torch.Tensor) -> "ClassPrediction":
        probs = torch.softmax(logits, dim=-1)
        # torch.argmax returns the first maximal index
        return cls(logits, probs, int(torch.argmax(probs.detach())))


class GridCodec:
    """Identity codec for stages that already emit (B, C, H, W) maps."""

    def encode(self, h: torch.Tensor) -> torch.Tensor:
        return h

    def decode(self, maps: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        return maps


class TokenGridCodec:
    """Lays (B, N, D) token sequences out as (B, D, S, S) maps and back."""

    def __init__(self, has_class_token: bool = True):
        self.has_class_token = has_class_token

    def encode(self, h: torch.Tensor) -> torch.Tensor:
        tokens = h[:, 1:] if self.has_class_token else h
        b, n, d = tokens.shape
        side = _square_side(n)
        return tokens.transpose(1, 2).reshape(b, d, side, side)

    def decode(self, maps: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        b, d = maps.shape[:2]
        tokens = maps.reshape(b, d, -1).transpose(1, 2)
        if self.has_class_token:
            tokens = torch.cat([h[:, :1], tokens], dim=1)
        return tokens


def _square_side(n: int) -> int:
    side = int(round(n ** 0.5))
    if side < 1 or side * side != n:
        raise ReshapeError(f"{n} tokens cannot form a square grid")
    return side


class GlobalAvgPoolHead(nn.Module):
    """Global average pooling followed by a linear classifier."""

    def __init__(self, fc: nn.Linear):
        super().__init__()
        self.fc = fc

    def embedding(self, h: torch.Tensor) -> torch.Tensor:
        return h.mean(dim=(-2, -1))

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.fc(self.embedding(h))


class StagedClassifier(nn.Module):
    """A classifier written as ``head(stage_n(...stage_1(x)))``.

    ``capture`` lists the (0-based) stages whose outputs are exposed as layers
    1..L, in order.  ``codecs`` maps a stage index to a codec turning its output
    into (B, C, H, W) maps; stages without an entry use :class:`GridCodec`.
    """

    def __init__(
        self,
        stages: Sequence[nn.Module],
        head: nn.Module,
        capture: Sequence[int] | None = None,
        input_shape: tuple[int, int, int] = (3, 64, 64),
        codecs: Mapping[int, object] | None = None,
        name: str = "custom",
    ):
        super().__init__()
        self.stages = nn.ModuleList(stages)
        self.head = head
        capture = list(range(len(stages))) if capture is None else [int(c) for c in capture]
        if not capture:
            raise ConfigurationError("classifier declares no capture points")
        if sorted(set(capture)) != capture:
            raise ConfigurationError("capture points must be strictly increasing")
        if capture[0] < 0 or capture[-1] >= len(stages):
            raise ConfigurationError(f"capture points {capture} out of range for {len(stages)} stages")
        self.capture = capture
        self.input_shape = tuple(input_shape)
        self.codecs = {i: GridCodec() for i in capture}
        self.codecs.update(codecs or {})
        self.name = name
        self._layer_of_stage = {s: i + 1 for i, s in enumerate(capture)}

    @property
    def num_layers(self) -> int:
        return len(self.capture)

    def stage_of_layer(self, layer_index: int) -> int:
        if not 1 <= layer_index <= len(self.capture):
            raise IndexError(f"layer {layer_index} not in 1..{len(self.capture)}")
        return self.capture[layer_index - 1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = x
        for i, stage in enumerate(self.stages):
            h = stage(h)
            if i in self.codecs and not isinstance(self.codecs[i], GridCodec):
                # same data movement as the traced path keeps logits bitwise equal
                h = self.codecs[i].decode(self.codecs[i].encode(h), h)
        return self.head(h)

    def trace(self, x: torch.Tensor, masks=None, unbind=False):
        """Run the network, returning ``(maps, raws, logits)``.

        ``maps`` holds one (B, C, H, W) tensor per layer; ``raws`` the raw stage
        output at each capture point (needed to resume).  ``masks`` maps a layer
        index to ``(channels, value)``; those channels are overwritten with the
        constant before the network continues.
        """
        return self._continue(x, 0, [], [], masks or {}, unbind)

    def resume(self, layer_index: int, maps: torch.Tensor, raw: torch.Tensor, prefix_maps=()):
        """Continue from (possibly edited) maps at ``layer_index``."""
        stage = self.stage_of_layer(layer_index)
        h = self.codecs[stage].decode(maps, raw)
        prefix = list(prefix_maps) + [maps]
        out_maps, _, logits = self._continue(h, stage + 1, prefix, [], {}, False)
        return out_maps, logits

    def _continue(self, h, start, maps, raws, masks, unbind):
        for i in range(start, len(self.stages)):
            h = self.stages[i](h)
            layer = self._layer_of_stage.get(i)
            if layer is None:
                continue
            codec = self.codecs[i]
            a = codec.encode(h)
            if layer in masks:
                channels, value = masks[layer]
                a = _overwrite_channels(a, channels, value)
            if unbind:
                # downstream then depends on the per-item tensors themselves
                items = a.unbind(0)
                a = torch.stack(items)
                maps.append(items)
            else:
                maps.append(a)
            raws.append(h)
            h = codec.decode(a, h)
        return maps, raws, self.head(h)


def _overwrite_channels(a: torch.Tensor, channels, value) -> torch.Tensor:
    channels = sorted(int(c) for c in channels)
    if not channels:
        return a
    if channels[0] < 0 or channels[-1] >= a.shape[1]:
        raise IndexError(f"channel index out of range for {a.shape[1]} channels")
    keep = torch.ones(a.shape[1], dtype=torch.bool, device=a.device)
    keep[channels] = False
    fill = torch.full_like(a, float(value))
    return torch.where(keep.view(1, -1, 1, 1), a, fill)


def _as_batch(model: StagedClassifier, image) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(image) if not isinstance(image, torch.Tensor) else image)
    if tuple(x.shape) != tuple(model.input_shape):
        raise InputShapeError(f"expected image of shape {model.input_shape}, got {tuple(x.shape)}")
    dtype = next(model.parameters()).dtype
    return x.to(dtype).unsqueeze(0)


def forward_with_activations(model: StagedClassifier, image, requires_grad: bool = True):
    """Return ``(list of LayerActivations, ClassPrediction)`` for one image."""
    x = _as_batch(model, image)
    with torch.set_grad_enabled(requires_grad):
        if requires_grad:
            x.requires_grad_(True)
        maps, _, logits = model.trace(x, unbind=True)
    acts = [LayerActivations(i + 1, m[0]) for i, m in enumerate(maps)]
    return acts, ClassPrediction.from_logits(logits[0])


def pool_layer(acts: LayerActivations) -> PooledEmbedding:
    return PooledEmbedding(acts.layer_index, acts.maps.mean(dim=(-2, -1)))


def concat_layers(pooled: Sequence[PooledEmbedding]) -> ConcatEmbedding:
    if not pooled:
        raise ConfigurationError("nothing to concatenate")
    indices = [p.layer_index for p in pooled]
    if len(set(indices)) != len(indices):
        raise ConfigurationError(f"duplicate layer index in {indices}")
    if indices != sorted(indices):
        raise ConfigurationError(f"pooled embeddings not ordered by layer: {indices}")
    offsets, start = [], 0
    for p in pooled:
        offsets.append((p.layer_index, start, len(p)))
        start += len(p)
    return ConcatEmbedding(torch.cat([p.values for p in pooled]), offsets)


def tokens_to_grid(tokens, has_class_token: bool, layer_index: int = 1) -> LayerActivations:
    """Reshape an (N, D) token sequence into (D, S, S) maps, row-major."""
    t = torch.as_tensor(tokens)
    if t.dim() != 2:
        raise ReshapeError(f"expected (N, D) tokens, got {tuple(t.shape)}")
    maps = TokenGridCodec(has_class_token).encode(t.unsqueeze(0))[0]
    return LayerActivations(layer_index, maps)


class ExplanationSession:
    """One differentiable forward pass over a single image.

    Holds the captured maps as graph nodes so gradients of any score derived
    from them (class probability, concept score) can be taken repeatedly.
    """

    def __init__(self, model: StagedClassifier, image):
        self.model = model
        self.image = _as_batch(model, image).requires_grad_(True)
        with torch.enable_grad():
            maps, raws, logits = model.trace(self.image, unbind=True)
        self.activations = [LayerActivations(i + 1, m[0]) for i, m in enumerate(maps)]
        self.raws = raws
        self.prediction = ClassPrediction.from_logits(logits[0])
        self.pooled = [pool_layer(a) for a in self.activations]
        self.z_cat = concat_layers(self.pooled)

    def layer(self, layer_index: int) -> LayerActivations:
        return self.activations[layer_index - 1]

    def embedding(self, multi_layer: bool = True) -> torch.Tensor:
        return self.z_cat.values if multi_layer else self.pooled[-1].values


def mask_channels_and_recompute(model: StagedClassifier, image, layer_index: int,
                                channel_set: Iterable[int], mask_value: float):
    """Overwrite channels at one layer with a constant and re-run downstream."""
    channels = sorted(set(int(c) for c in channel_set))
    model.stage_of_layer(layer_index)
    if not np.isfinite(mask_value):
        raise ValueError("mask value must be finite")
    x = _as_batch(model, image)
    with torch.no_grad():
        maps, _, logits = model.trace(x, masks={layer_index: (channels, mask_value)})
    pooled = [PooledEmbedding(i + 1, m[0].mean(dim=(-2, -1))) for i, m in enumerate(maps)]
    return ClassPrediction.from_logits(logits[0]), concat_layers(pooled)


# --- registry -------------------------------------------------------------


class _VitInput(nn.Module):
    def __init__(self, vit):
        super().__init__()
        self.vit = vit

    def forward(self, x):
        h = self.vit._process_input(x)
        cls = self.vit.class_token.expand(h.shape[0], -1, -1)
        h = torch.cat([cls, h], dim=1)
        return self.vit.encoder.dropout(h + self.vit.encoder.pos_embedding)


class _VitHead(nn.Module):
    def __init__(self, vit):
        super().__init__()
        self.ln = vit.encoder.ln
        self.heads = vit.heads

    def forward(self, h):
        return self.heads(self.ln(h)[:, 0])


def from_torchvision_resnet(net, input_size: int = 224, capture=None) -> StagedClassifier:
    stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool, net.layer1)
    stages = [stem, net.layer2, net.layer3, net.layer4]
    return StagedClassifier(stages, GlobalAvgPoolHead(net.fc), capture,
                            (3, input_size, input_size), name=type(net).__name__.lower())


def from_torchvision_vit(vit, capture=None) -> StagedClassifier:
    """Stage 0 embeds patches; stage i is encoder block i.

    Default capture is the input to the last block: the head reads only the
    class token, so spatial tokens leaving the last block carry no gradient.
    """
    blocks = list(vit.encoder.layers)
    stages = [_VitInput(vit)] + blocks
    capture = [max(len(blocks) - 1, 0)] if capture is None else list(capture)
    codecs = {i: TokenGridCodec(has_class_token=True) for i in capture}
    return StagedClassifier(stages, _VitHead(vit), capture, (3, vit.image_size, vit.image_size),
                            codecs=codecs, name="vit")


def build_classifier(spec: Mapping) -> StagedClassifier:
    """Build a classifier from a registry entry.

    ``spec`` keys: ``backbone`` (``toy``, ``resnet18/34/50``, ``vit_b_16``),
    ``input_size``, optional ``capture``, ``num_classes``, ``channels`` (toy)
    and ``checkpoint`` (state dict path).
    """
    import torchvision.models as tvm

    backbone = spec.get("backbone", "toy")
    capture = spec.get("capture")
    num_classes = int(spec.get("num_classes", 3 if backbone == "toy" else 1000))
    if backbone == "toy":
        from .synthetic import build_toy_classifier
        model = build_toy_classifier(spec.get("channels", (24, 32, 48, 64)), num_classes,
                                     int(spec.get("input_size", 64)), seed=int(spec.get("seed", 0)))
        if capture is not None:
            model = StagedClassifier(model.stages, model.head, capture, model.input_shape, name="toy")
        net = model
    elif backbone in ("resnet18", "resnet34", "resnet50"):
        net = getattr(tvm, backbone)(weights=None, num_classes=num_classes)
        model = from_torchvision_resnet(net, int(spec.get("input_size", 224)), capture)
    elif backbone == "vit_b_16":
        net = tvm.vit_b_16(weights=None, num_classes=num_classes)
        model = from_torchvision_vit(net, capture)
    else:
        raise ConfigurationError(f"unknown backbone {backbone!r}")
    ckpt = spec.get("checkpoint")
    if ckpt:
        state = torch.load(ckpt, map_location="cpu", weights_only=True)
        net.load_state_dict(state.get("state_dict", state) if isinstance(state, dict) else state)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def set_deterministic(seed: int = 0) -> None:
    """Seed every RNG in play and refuse nondeterministic kernels."""
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
