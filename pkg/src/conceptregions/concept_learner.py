"""Translator from pooled classifier features into the VLM embedding space."""
from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigurationError, NonFiniteLossError
from .model_adapter import ConcatEmbedding, PooledEmbedding, StagedClassifier
from .vlm import ConceptText, EmbeddingVectorVLM, TextEmbeddingCache, similarity

log = logging.getLogger(__name__)

NORMALIZATION_POLICY = "text-unit/image-raw-target/cosine-similarity"


class Translator(nn.Module):
    """MLP with tanh between layers and a linear output layer.

    Inputs are first standardized with fixed per-feature ``input_shift`` and
    ``input_scale`` buffers (identity until :func:`fit_translator` sets them).
    """

    def __init__(self, layer_dims: Sequence[tuple[int, int]], hidden_activation: bool = True):
        super().__init__()
        layer_dims = [(int(a), int(b)) for a, b in layer_dims]
        if not layer_dims:
            raise ConfigurationError("translator needs at least one layer")
        for (_, out), (nxt, _) in zip(layer_dims, layer_dims[1:]):
            if out != nxt:
                raise ConfigurationError(f"layer dims do not chain: {layer_dims}")
        self.layer_dims = layer_dims
        self.hidden_activation = hidden_activation
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in layer_dims)
        self.register_buffer("input_shift", torch.zeros(layer_dims[0][0]))
        self.register_buffer("input_scale", torch.ones(layer_dims[0][0]))

    @classmethod
    def for_dims(cls, in_dim: int, out_dim: int, hidden: Sequence[int] = ()) -> "Translator":
        dims = [in_dim, *hidden, out_dim]
        return cls(list(zip(dims[:-1], dims[1:])))

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0][0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1][1]

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.in_dim:
            raise ValueError(f"translator expects {self.in_dim} inputs, got {z.shape[-1]}")
        z = (z - self.input_shift) / self.input_scale
        for i, layer in enumerate(self.layers):
            z = layer(z)
            if self.hidden_activation and i < len(self.layers) - 1:
                z = torch.tanh(z)
        return z


def _values(z) -> torch.Tensor:
    if isinstance(z, (ConcatEmbedding, PooledEmbedding, EmbeddingVectorVLM)):
        return z.values
    return torch.as_tensor(z)


def translate(h: Translator, z) -> EmbeddingVectorVLM:
    x = _values(z).to(next(h.parameters()).dtype)
    return EmbeddingVectorVLM(h(x), "image", False)


def concept_score(h: Translator, z, txt: EmbeddingVectorVLM) -> float:
    if txt.modality != "text":
        raise ValueError("concept score needs a text embedding")
    out = translate(h, z).values
    return float(similarity(out, txt.values.to(out.dtype)).detach())


def losses(h: Translator, z, vlm_img, txt_batch, lambda_sim: float, use_similarity_loss: bool = True):
    """``(l_emb, l_sim, l_total)`` as tensors; ``z`` may be a single vector or a batch."""
    if use_similarity_loss and (txt_batch is None or len(txt_batch) == 0):
        raise ConfigurationError("similarity loss needs at least one concept text")
    out = h(_values(z).to(next(h.parameters()).dtype))
    target = _values(vlm_img).to(out.dtype)
    l_emb = ((out - target) ** 2).mean()
    if use_similarity_loss:
        texts = torch.stack([_values(t) for t in txt_batch]) if isinstance(txt_batch, (list, tuple)) \
            else torch.as_tensor(txt_batch)
        texts = texts.to(out.dtype)
        s = similarity(out.unsqueeze(-2), texts)
        s_vlm = similarity(target.unsqueeze(-2), texts)
        l_sim = ((s - s_vlm) ** 2).mean()
        l_total = l_emb + lambda_sim * l_sim
    else:
        l_sim = torch.zeros((), dtype=out.dtype)
        l_total = l_emb
    return l_emb, l_sim, l_total


@dataclass
class TrainConfig:
    max_epochs: int = 150
    base_lr: float = 0.1
    warmup: bool = True
    warmup_peak_lr: float = 0.2
    warmup_epochs: int = 5
    lr_decay_factor: float = 0.1
    plateau_epochs: int = 4
    early_stop_patience: int = 10
    momentum: float = 0.9
    lambda_sim: float = 0.001
    batch_size: int = 64
    seed: int = 0
    use_similarity_loss: bool = True
    multi_layer: bool = True
    hidden_dims: list[int] | None = None  # default (4*D_vlm, 2*D_vlm)
    val_fraction: float = 0.1
    standardize: bool = True

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ConfigurationError("max_epochs must be >= 1")
        if not 0 < self.lr_decay_factor < 1:
            raise ConfigurationError("lr_decay_factor must lie in (0, 1)")
        if self.lambda_sim < 0:
            raise ConfigurationError("lambda_sim must be >= 0")
        if self.plateau_epochs < 1 or self.early_stop_patience < 1:
            raise ConfigurationError("plateau_epochs and early_stop_patience must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def lr_at(self, epoch: int, decay_scale: float = 1.0) -> float:
        if self.warmup and epoch < self.warmup_epochs:
            return self.base_lr + (self.warmup_peak_lr - self.base_lr) * epoch / self.warmup_epochs
        return (self.warmup_peak_lr if self.warmup else self.base_lr) * decay_scale


@dataclass
class TrainReport:
    train: dict[str, list[float]] = field(default_factory=lambda: {"emb": [], "sim": [], "total": []})
    val: dict[str, list[float]] = field(default_factory=lambda: {"emb": [], "sim": [], "total": []})
    lr: list[float] = field(default_factory=list)
    initial_val: dict[str, float] = field(default_factory=dict)  # untrained translator
    stopped_epoch: int = 0
    best_epoch: int = 0
    final_lr: float = 0.0
    checkpoint: str | None = None
    use_similarity_loss: bool = True

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema_version"] = 1
        if not self.use_similarity_loss:
            # no concept set was involved: the column is omitted
            for key in ("train", "val", "initial_val"):
                d[key].pop("sim", None)
        return d


@torch.no_grad()
def extract_features(model: StagedClassifier, images, multi_layer: bool = True, batch_size: int = 128) -> torch.Tensor:
    """Pooled embeddings (z_cat, or z^L alone) for a stack of images."""
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    for start in range(0, len(images), batch_size):
        x = torch.as_tensor(np.asarray(images[start:start + batch_size])).to(dtype)
        maps, _, _ = model.trace(x)
        pooled = [m.mean(dim=(-2, -1)) for m in maps]
        out.append(torch.cat(pooled, dim=1) if multi_layer else pooled[-1])
    return torch.cat(out)


def _split(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    n_val = max(1, int(round(fraction * n))) if n > 1 else 0
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def train_translator(model: StagedClassifier, vlm, images, concepts: Sequence[ConceptText],
                     cfg: TrainConfig, checkpoint: str | Path | None = None,
                     cache: TextEmbeddingCache | None = None):
    """Fit a translator to mimic the VLM image embedding from frozen features.

    The classifier and VLM are frozen, so features and targets are computed
    once up front; each epoch then only touches the translator.
    """
    if len(images) == 0:
        raise ValueError("empty dataset")
    frozen = [p.detach().clone() for p in model.parameters()]
    z = extract_features(model, images, cfg.multi_layer)
    targets = torch.stack([vlm.encode_image(im) for im in images]).to(z.dtype)
    cache = cache or TextEmbeddingCache()
    texts = cache.matrix(vlm, concepts).to(z.dtype) if concepts else torch.zeros(0, targets.shape[1])
    h, report = fit_translator(z, targets, texts, cfg)
    for before, after in zip(frozen, model.parameters()):
        assert torch.equal(before, after), "classifier weights changed during translator training"
    if checkpoint is not None:
        save_translator(h, checkpoint, cfg)
        report.checkpoint = str(checkpoint)
        Path(checkpoint).with_suffix(".report.json").write_text(json.dumps(report.to_dict(), indent=1) + "\n")
    return h, report


def fit_translator(z: torch.Tensor, targets: torch.Tensor, texts: torch.Tensor, cfg: TrainConfig):
    """Training loop over precomputed features ``z`` and VLM targets."""
    if len(z) == 0:
        raise ValueError("empty dataset")
    if cfg.use_similarity_loss and len(texts) == 0:
        raise ConfigurationError("similarity loss enabled without concepts")
    train_idx, val_idx = _split(len(z), cfg.val_fraction, cfg.seed)
    if len(val_idx) == 0:
        val_idx = train_idx
    torch.manual_seed(cfg.seed)
    d_out = targets.shape[1]
    hidden = cfg.hidden_dims if cfg.hidden_dims is not None else [4 * d_out, 2 * d_out]
    h = Translator.for_dims(z.shape[1], d_out, hidden).to(z.dtype)
    if cfg.standardize:
        h.input_shift.copy_(z[train_idx].mean(0))
        h.input_scale.copy_(z[train_idx].std(0).clamp_min(1e-6))
    opt = torch.optim.SGD(h.parameters(), lr=cfg.lr_at(0), momentum=cfg.momentum)
    gen = torch.Generator().manual_seed(cfg.seed)

    def batch_losses(idx):
        return losses(h, z[idx], targets[idx], texts, cfg.lambda_sim, cfg.use_similarity_loss)

    report = TrainReport(use_similarity_loss=cfg.use_similarity_loss)
    h.eval()
    with torch.no_grad():
        report.initial_val = {k: t.item() for k, t in
                              zip(("emb", "sim", "total"), batch_losses(torch.as_tensor(val_idx)))}
    best, best_state = float("inf"), copy.deepcopy(h.state_dict())
    since_best = plateau = 0
    decay_scale = 1.0
    xtr = torch.as_tensor(train_idx)
    for epoch in range(cfg.max_epochs):
        lr = cfg.lr_at(epoch, decay_scale)
        for g in opt.param_groups:
            g["lr"] = lr
        h.train()
        sums = np.zeros(3)
        perm = xtr[torch.randperm(len(xtr), generator=gen)]
        for start in range(0, len(perm), cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            l_emb, l_sim, l_total = batch_losses(idx)
            if not torch.isfinite(l_total):
                raise NonFiniteLossError(f"non-finite loss at epoch {epoch + 1}: emb={l_emb.item()} sim={l_sim.item()}")
            opt.zero_grad()
            l_total.backward()
            opt.step()
            sums += len(idx) * np.array([l_emb.item(), l_sim.item(), l_total.item()])
        h.eval()
        with torch.no_grad():
            v = [t.item() for t in batch_losses(torch.as_tensor(val_idx))]
        if not np.isfinite(v[2]):
            raise NonFiniteLossError(f"non-finite validation loss at epoch {epoch + 1}")
        for key, tr, va in zip(("emb", "sim", "total"), sums / len(xtr), v):
            report.train[key].append(float(tr))
            report.val[key].append(float(va))
        report.lr.append(lr)
        log.debug("epoch %d lr %.4g train %.5f val %.5f", epoch + 1, lr, sums[2] / len(xtr), v[2])

        if v[2] < best:
            best, best_state, report.best_epoch = v[2], copy.deepcopy(h.state_dict()), epoch + 1
            since_best = plateau = 0
        else:
            since_best += 1
            plateau += 1
        if plateau >= cfg.plateau_epochs and not (cfg.warmup and epoch < cfg.warmup_epochs):
            decay_scale *= cfg.lr_decay_factor
            plateau = 0
        report.stopped_epoch = epoch + 1
        report.final_lr = lr
        if since_best >= cfg.early_stop_patience:
            break
    h.load_state_dict(best_state)
    h.eval()
    return h, report


def save_translator(h: Translator, path, cfg: TrainConfig | None = None) -> None:
    torch.save({
        "layer_dims": h.layer_dims,
        "state_dict": h.state_dict(),
        "normalization_policy": NORMALIZATION_POLICY,
        "multi_layer": cfg.multi_layer if cfg else True,
        "config": cfg.to_dict() if cfg else None,
        "config_hash": cfg.digest() if cfg else None,
    }, path)


def load_translator(path) -> tuple[Translator, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    h = Translator(blob["layer_dims"])
    first = next(iter(blob["state_dict"].values()))
    h = h.to(first.dtype)
    h.load_state_dict(blob["state_dict"])
    h.eval()
    return h, blob
