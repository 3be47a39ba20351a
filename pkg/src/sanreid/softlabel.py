"""Auxiliary attribute predictor and soft-label assignment.

The predictor is trained on records with a human attribute label only,
with the sum of an identity and an attribute cross-entropy. Records that
have no attribute then receive the predictor's arg-max class, flagged as
soft; existing labels are never touched.
"""
from __future__ import annotations

import dataclasses
import json
import pickle
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .config import RunConfig
from .datamodel import DatasetManifest, load_images
from .errors import ConfigError
from .loss import batch_cross_entropy
from .network import build_backbone, to_batch
from .training import fit, seed_everything

PREDICTOR_VERSION = 1


class AttributePredictor(nn.Module):
    def __init__(self, num_identities: int, num_attributes: int, backbone: str = "tiny",
                 backbone_width: int = 64, input_size: int = 128, pretrained: bool = False):
        super().__init__()
        if num_attributes < 1:
            raise ConfigError("attribute predictor needs at least one attribute class")
        self.build_args = dict(
            num_identities=num_identities,
            num_attributes=num_attributes,
            backbone=backbone,
            backbone_width=backbone_width,
            input_size=input_size,
        )
        self.backbone = build_backbone(backbone, backbone_width, pretrained)
        if input_size % self.backbone.total_stride:
            raise ConfigError(f"input size {input_size} not divisible by backbone stride")
        c = self.backbone.out_channels
        self.id_head = nn.Linear(c, max(num_identities, 1))
        self.attr_head = nn.Linear(c, num_attributes)
        self.num_attributes = num_attributes

    def forward(self, x):
        g = self.backbone(x).mean(dim=(2, 3))
        return self.id_head(g), self.attr_head(g)

    @torch.no_grad()
    def predict_proba(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Attribute distribution (N, M) for pre-processed (N, H, W, 3) images."""
        self.eval()
        out = []
        for start in range(0, len(images), batch_size):
            _, logits = self(to_batch(images[start:start + batch_size]))
            out.append(torch.softmax(logits.double(), dim=1).numpy())
        if not out:
            return np.zeros((0, self.num_attributes))
        return np.concatenate(out)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save({"format_version": PREDICTOR_VERSION, "build_args": self.build_args,
                    "state_dict": self.state_dict()}, path)
        return path

    @classmethod
    def load(cls, path) -> "AttributePredictor":
        try:
            blob = torch.load(path, map_location="cpu", weights_only=True)
        except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as exc:
            raise ConfigError(f"cannot read predictor checkpoint {path}: {exc}") from exc
        if blob.get("format_version") != PREDICTOR_VERSION:
            raise ConfigError("unsupported predictor checkpoint version")
        model = cls(**blob["build_args"])
        model.load_state_dict(blob["state_dict"])
        model.eval()
        return model


def train_attr_predictor(manifest: DatasetManifest, cfg: RunConfig) -> AttributePredictor:
    """Train on the hard-labelled train records of ``manifest``.

    The identity head covers only the identities present in that subset.
    """
    records = [r for r in manifest.split("train") if r.has_hard_attribute]
    if not records:
        raise ConfigError("no train record carries a hard attribute label")
    seed_everything(cfg.seed)
    ids = sorted({r.identity for r in records})
    local = {ident: i for i, ident in enumerate(ids)}
    model = AttributePredictor(len(ids), max(manifest.num_attributes, 1), cfg.backbone,
                               cfg.backbone_width, cfg.input_size, cfg.pretrained)
    images = load_images(manifest, records, cfg.input_size, cfg.pixel_mean, cfg.pixel_std)
    id_t = torch.tensor([local[r.identity] for r in records])
    attr_t = torch.tensor([r.attribute for r in records])

    def step_loss(outputs, idx):
        idx = torch.from_numpy(idx)
        id_logits, attr_logits = outputs
        return batch_cross_entropy(id_logits, id_t[idx]) + batch_cross_entropy(attr_logits, attr_t[idx])

    fit(model, images, step_loss, cfg, cfg.predictor_epochs or cfg.epochs)
    model.eval()
    return model


def assign_soft_labels(manifest: DatasetManifest, predictor: AttributePredictor,
                       mean=None, std=None, batch_size: int = 64, audit: list | None = None) -> DatasetManifest:
    """Return a new manifest where every unlabelled record carries a soft label.

    If ``audit`` is a list it is extended with one dict per predicted record.
    """
    if predictor.num_attributes != max(manifest.num_attributes, 1):
        raise ConfigError(
            f"predictor has {predictor.num_attributes} attribute classes, manifest has {manifest.num_attributes}"
        )
    todo = [i for i, r in enumerate(manifest.records) if r.attribute is None]
    records = list(manifest.records)
    if todo:
        kw = {}
        if mean is not None:
            kw["mean"] = mean
        if std is not None:
            kw["std"] = std
        size = predictor.build_args["input_size"]
        images = load_images(manifest, [records[i] for i in todo], size, **kw)
        proba = predictor.predict_proba(images, batch_size)
        for i, p in zip(todo, proba):
            pred = int(np.argmax(p))
            records[i] = dataclasses.replace(records[i], attribute=pred, attribute_is_soft=True)
            if audit is not None:
                audit.append({"path": records[i].image_path, "predicted": pred, "max_prob": float(p.max())})
    out = manifest.with_records(records)
    out.num_attributes = max(manifest.num_attributes, 1)
    return out


def write_audit(audit: list, path) -> Path:
    path = Path(path)
    path.write_text("".join(json.dumps(a) + "\n" for a in audit))
    return path


def withhold_attributes(manifest: DatasetManifest, fraction: float, seed: int = 0):
    """Strip the attribute from a random ``fraction`` of train records.

    Returns ``(manifest', withheld)`` where ``withheld`` maps record index to
    the removed label.
    """
    rng = np.random.default_rng(seed)
    candidates = [i for i, r in enumerate(manifest.records) if r.split == "train" and r.attribute is not None]
    n = int(round(fraction * len(candidates)))
    chosen = sorted(int(i) for i in rng.choice(candidates, size=n, replace=False)) if n else []
    records = list(manifest.records)
    withheld = {}
    for i in chosen:
        withheld[i] = records[i].attribute
        records[i] = dataclasses.replace(records[i], attribute=None, attribute_is_soft=False)
    return manifest.with_records(records), withheld
