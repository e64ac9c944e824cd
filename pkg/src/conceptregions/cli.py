"""Command-line harness: ``synth``, ``train``, ``explain`` and ``evaluate``.

Configuration is one JSON file merged over defaults, then ``--flag`` options,
then dotted ``key=value`` overrides (``train.max_epochs=5``).
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .concept_learner import TrainConfig, load_translator, train_translator
from .errors import ConfigurationError, UndefinedMetricError
from .explainer import save_raw, save_region_png
from .metrics import DEFAULT_GRID
from .model_adapter import build_classifier, set_deterministic
from .pipeline import (
    MODES,
    SCHEMA_VERSION,
    evaluate_dataset,
    explain_image,
    plot_contributions,
    plot_masking_curves,
    plot_threshold_curves,
)
from .synthetic import generate_dataset, load_dataset, train_toy_classifier, write_dataset
from .vlm import ConceptText, build_vlm, load_concept_set

log = logging.getLogger("conceptregions")

DEFAULTS = {
    "seed": 0,
    "out": "runs/default",
    "jobs": 1,
    "k": 20,
    "top_k": None,
    "grid": None,
    "mode": "best_nra_of_top_k",
    "concepts": None,
    "dataset": {"path": "data/synth", "count": 2000, "seed": 0, "class_rule": "shape", "bias": 0.95},
    "model": {"backbone": "toy", "channels": [24, 32, 48, 64], "input_size": 64, "num_classes": 3,
              "capture": None, "checkpoint": None, "seed": 0, "train_epochs": 10, "train_lr": 2e-3},
    "vlm": {"name": "toy", "seed": 0, "epsilon": 0.05, "dim": 64, "path": None},
    "train": {"max_epochs": 30},
    "evaluate": {"split": "test", "limit": None, "categories": ["color"], "plot_samples": 4},
}


class RunConfig(dict):
    """Nested config dict; unknown keys anywhere are rejected."""

    @classmethod
    def load(cls, path=None, overrides=()) -> "RunConfig":
        cfg = copy.deepcopy(DEFAULTS)
        if path is not None:
            p = Path(path)
            if not p.exists():
                raise ConfigurationError(f"config file {p} not found")
            _merge(cfg, json.loads(p.read_text()), "")
        for item in overrides:
            key, sep, raw = item.partition("=")
            if not sep:
                raise ConfigurationError(f"override {item!r} is not key=value")
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            *parents, leaf = key.split(".")
            patch = {leaf: value}
            for part in reversed(parents):
                patch = {part: patch}
            _merge(cfg, patch, "")
        TrainConfig.from_dict(cfg["train"])  # validate early
        if cfg["mode"] not in MODES:
            raise ConfigurationError(f"unknown evaluation mode {cfg['mode']!r}")
        return cls(cfg)

    def train_config(self) -> TrainConfig:
        d = dict(self["train"])
        d.setdefault("seed", self["seed"])
        return TrainConfig.from_dict(d)

    @property
    def out(self) -> Path:
        return Path(self["out"])

    def classifier_path(self) -> Path:
        return Path(self["model"]["checkpoint"] or self.out / "classifier.pt")

    def translator_path(self) -> Path:
        return self.out / "translator.pt"

    def grid(self):
        return tuple(self["grid"]) if self["grid"] else DEFAULT_GRID


def _merge(base: dict, patch: dict, prefix: str) -> None:
    for key, value in patch.items():
        name = prefix + key
        if key not in base:
            # "train" entries are checked against TrainConfig instead
            if prefix.startswith("train."):
                base[key] = value
                continue
            raise ConfigurationError(f"unknown config key {name!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            _merge(base[key], value, name + ".")
        else:
            base[key] = value


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise ConfigurationError(f"{what} {path} does not exist")
    return path


def _concepts(cfg: RunConfig, dataset_root: Path | None) -> list[ConceptText]:
    if cfg["concepts"]:
        return load_concept_set(_require(Path(cfg["concepts"]), "concept set"))
    if dataset_root is not None and (dataset_root / "concepts.json").exists():
        return load_concept_set(dataset_root / "concepts.json")
    raise ConfigurationError("no concept set configured")


def _model(cfg: RunConfig):
    spec = {k: v for k, v in cfg["model"].items() if k not in ("train_epochs", "train_lr") and v is not None}
    spec["checkpoint"] = str(_require(cfg.classifier_path(), "classifier checkpoint"))
    return build_classifier(spec)


def _write_json(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")


def _digest(data) -> str:
    return hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()[:16]


# --- commands -------------------------------------------------------------------------


def cmd_synth(cfg: RunConfig) -> Path:
    d = cfg["dataset"]
    root = Path(d["path"])
    if not root.parent.exists():
        raise FileNotFoundError(f"parent directory {root.parent} does not exist")
    ds = generate_dataset(int(d["count"]), int(d["seed"]), d["class_rule"], float(d["bias"]))
    write_dataset(ds, root)
    log.info("wrote %d scenes to %s", len(ds), root)
    return root


def cmd_train(cfg: RunConfig) -> dict:
    root = _require(Path(cfg["dataset"]["path"]), "dataset")
    ds = load_dataset(root)
    concepts = _concepts(cfg, root)
    ckpt = cfg.classifier_path()
    cfg.out.mkdir(parents=True, exist_ok=True)
    if not ckpt.exists():
        m = cfg["model"]
        if m["backbone"] != "toy":
            raise ConfigurationError(f"classifier checkpoint {ckpt} missing; only the toy backbone trains here")
        spec = {k: v for k, v in m.items() if k not in ("train_epochs", "train_lr", "checkpoint") and v is not None}
        net = build_classifier(spec)
        for p in net.parameters():
            p.requires_grad_(True)
        stats = train_toy_classifier(net, ds, epochs=int(m["train_epochs"]), seed=cfg["seed"], lr=float(m["train_lr"]))
        torch.save(net.state_dict(), ckpt)
        _write_json(cfg.out / "classifier_report.json", {"schema_version": SCHEMA_VERSION, **stats})
        log.info("classifier test accuracy %.3f", stats["test_accuracy"])
    model = _model(cfg)
    vlm = build_vlm(cfg["vlm"], [c.label for c in concepts])
    tcfg = cfg.train_config()
    images, _ = ds.subset("train")
    h, report = train_translator(model, vlm, images, concepts, tcfg, checkpoint=cfg.translator_path())
    out = report.to_dict()
    out["checkpoint"] = cfg.translator_path().name
    _write_json(cfg.out / "train_report.json", out)
    return out


def _load_image(path: Path, model) -> torch.Tensor:
    img = Image.open(_require(path, "image")).convert("RGB")
    size = model.input_shape[-2:]
    if img.size != (size[1], size[0]):
        img = img.resize((size[1], size[0]), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float32).transpose(2, 0, 1) / 255.0
    return torch.from_numpy(arr.copy())


def cmd_explain(cfg: RunConfig, image_path, concept_filter=None) -> dict:
    root = Path(cfg["dataset"]["path"])
    concepts = _concepts(cfg, root if root.exists() else None)
    warnings = []
    if concept_filter:
        known = {c.label for c in concepts}
        warnings = [f"unknown concept {c!r}" for c in concept_filter if c not in known]
        concepts = [c for c in concepts if c.label in set(concept_filter)]
    model = _model(cfg)
    h, _ = load_translator(_require(cfg.translator_path(), "translator checkpoint"))
    h = h.to(next(model.parameters()).dtype)
    vlm = build_vlm(cfg["vlm"], [c.label for c in concepts])
    image_path = Path(image_path)
    image = _load_image(image_path, model)
    outdir = cfg.out / "explain" / image_path.stem
    outdir.mkdir(parents=True, exist_ok=True)
    multi = cfg.train_config().multi_layer
    session, cls, results = explain_image(model, h, vlm, image, concepts, cfg["k"], multi)
    entries = []
    for ex, contrib in results:
        best = next(r for r in ex.regions if r.layer_index == ex.best_layer)
        stem = ex.concept.label.replace(" ", "_")
        save_region_png(best, outdir / f"{stem}.png")
        raws = []
        for r in ex.regions:
            name = f"{stem}.layer{r.layer_index}.bin"
            save_raw(r.map, outdir / name)
            raws.append(name)
        entries.append({
            "concept": ex.concept.label,
            "category": ex.concept.category,
            "score": ex.score,
            "best_layer": ex.best_layer,
            "association": [[l, s] for l, s in ex.association],
            "contribution": contrib.value,
            "artifacts": {"region_png": f"{stem}.png", "region_meta": f"{stem}.json", "raw_maps": raws},
        })
    entries.sort(key=lambda e: (-abs(e["contribution"]), e["concept"]))
    if results:
        plot_masking_curves([ex.curves[ex.best_layer - 1] for ex, _ in results],
                            [ex.concept.label for ex, _ in results], outdir / "masking_curves.png")
        plot_contributions([e["concept"] for e in entries], [e["contribution"] for e in entries],
                           outdir / "contributions.png")
    record = {
        "schema_version": SCHEMA_VERSION,
        "image": image_path.name,
        "prediction": {"class_index": cls,
                       "probabilities": [float(p) for p in session.prediction.probabilities.detach()]},
        "concepts": entries,
        "warnings": warnings,
    }
    _write_json(outdir / "explanation.json", record)
    return record


def cmd_evaluate(cfg: RunConfig) -> dict:
    root = _require(Path(cfg["dataset"]["path"]), "dataset")
    ds = load_dataset(root)
    ev = cfg["evaluate"]
    concepts = [c for c in _concepts(cfg, root) if not ev["categories"] or c.category in ev["categories"]]
    model = _model(cfg)
    h, _ = load_translator(_require(cfg.translator_path(), "translator checkpoint"))
    h = h.to(next(model.parameters()).dtype)
    vlm = build_vlm(cfg["vlm"], [c.label for c in _concepts(cfg, root)])
    ids = ds.splits[ev["split"]]
    if ev["limit"] is not None:
        ids = ids[: int(ev["limit"])]
    dtype = next(model.parameters()).dtype
    images = torch.from_numpy(ds.images[ids]).to(dtype)
    masks = [ds.masks(int(i)) for i in ids]
    report = evaluate_dataset(model, h, vlm, images, masks, ids, concepts, cfg["k"], cfg["top_k"],
                              cfg.train_config().multi_layer, cfg.grid(), cfg["seed"], cfg["jobs"],
                              keep_maps=ev["plot_samples"] > 0)
    if not report.samples:
        raise UndefinedMetricError("no evaluable (image, concept) samples")
    results = {
        "schema_version": SCHEMA_VERSION,
        "config_digest": _digest({k: v for k, v in cfg.items() if k not in ("out", "jobs")}),
        "primary_mode": cfg["mode"],
        "top_k": cfg["top_k"] or model.num_layers,
        **report.to_dict(),
    }
    _write_json(cfg.out / "results.json", results)
    plots = cfg.out / "plots"
    plots.mkdir(parents=True, exist_ok=True)
    for s in report.samples[: int(ev["plot_samples"])]:
        plot_threshold_curves(s, ds.masks(s.image_id)[s.concept], plots / f"{s.image_id:05d}_{s.concept}.png",
                              cfg.grid())
    return results


# --- entry point ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="conceptregions", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("synth", "train", "explain", "evaluate"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--jobs", type=int)
        p.add_argument("--k", type=int, help="channels masked per curve")
        p.add_argument("--mode", choices=MODES)
        p.add_argument("--no-similarity-loss", action="store_true")
        p.add_argument("--single-layer", action="store_true", help="use the last captured layer only")
        p.add_argument("--out", help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "explain":
            p.add_argument("--image", required=True, help="image file to explain")
            p.add_argument("--concepts", help="comma-separated concept labels")
        p.add_argument("overrides", nargs="*", metavar="key=value")
    return parser


def config_from_args(args) -> RunConfig:
    overrides = list(args.overrides)
    for flag, key in (("seed", "seed"), ("jobs", "jobs"), ("k", "k"), ("mode", "mode"), ("out", "out")):
        value = getattr(args, flag)
        if value is not None:
            overrides.append(f"{key}={json.dumps(value)}")
    if args.no_similarity_loss:
        overrides.append("train.use_similarity_loss=false")
    if args.single_layer:
        overrides.append("train.multi_layer=false")
    return RunConfig.load(args.config, overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = config_from_args(args)
        set_deterministic(cfg["seed"])
        if args.command == "synth":
            print(cmd_synth(cfg))
        elif args.command == "train":
            r = cmd_train(cfg)
            print(f"translator stopped at epoch {r['stopped_epoch']}, best {r['best_epoch']}")
        elif args.command == "explain":
            flt = [c.strip() for c in args.concepts.split(",")] if args.concepts else None
            rec = cmd_explain(cfg, args.image, flt)
            for w in rec["warnings"]:
                print(f"warning: {w}", file=sys.stderr)
        else:
            r = cmd_evaluate(cfg)
            s = r["summary"][cfg["mode"]]
            print(f"hit rate {s['hit_rate']:.3f}  mean NRA {s['mean_nra']:.3f}  (n={s['n']}, "
                  f"skipped {len(r['skipped'])})")
    except (ConfigurationError, UndefinedMetricError, FileNotFoundError, ValueError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2 if isinstance(err, ConfigurationError) else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
