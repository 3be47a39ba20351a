"""Training loop shared by the re-identification model and the attribute predictor."""
from __future__ import annotations

import json
import logging
import random
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .config import RunConfig
from .datamodel import DatasetManifest, hflip, load_images, load_manifest
from .errors import ConfigError
from .loss import targets_from_records, total_loss
from .network import SanModel, load_checkpoint, save_checkpoint, to_batch

log = logging.getLogger(__name__)


def seed_everything(seed: int):
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def make_optimizer(model: torch.nn.Module, cfg: RunConfig):
    if cfg.optimizer == "sgd":
        opt = torch.optim.SGD(
            model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay
        )
    else:
        opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=cfg.lr_step, gamma=cfg.lr_gamma)
    return opt, sched


def iterate_batches(n: int, batch_size: int, gen: torch.Generator):
    order = torch.randperm(n, generator=gen).numpy()
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    # BatchNorm cannot train on a single sample
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


def fit(
    model: torch.nn.Module,
    images: np.ndarray,
    step_loss: Callable[[dict, np.ndarray], "torch.Tensor | object"],
    cfg: RunConfig,
    epochs: int,
    on_step: Callable[[int, object], None] | None = None,
    on_epoch: Callable[[int], None] | None = None,
):
    """Generic minibatch loop over pre-decoded ``images`` (N, H, W, 3).

    ``step_loss(outputs, index)`` returns either a scalar tensor or an
    object with a ``total`` attribute.
    """
    gen = torch.Generator().manual_seed(cfg.seed)
    opt, sched = make_optimizer(model, cfg)
    step = 0
    for epoch in range(1, epochs + 1):
        model.train()
        for idx in iterate_batches(len(images), cfg.batch_size, gen):
            batch = images[idx]
            if cfg.flip:
                mask = torch.rand(len(idx), generator=gen).numpy() < 0.5
                batch = batch.copy()
                batch[mask] = hflip(batch[mask])
            outputs = model(to_batch(batch))
            result = step_loss(outputs, idx)
            loss = getattr(result, "total", result)
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            if on_step is not None:
                on_step(step, result)
        sched.step()
        if on_epoch is not None:
            on_epoch(epoch)
    return model


def check_attributes(manifest: DatasetManifest, records, cfg: RunConfig):
    if cfg.effective_weights[2] > 0 and not any(r.attribute is not None for r in records):
        raise ConfigError(
            "attribute loss is enabled but no training record carries an attribute label; "
            "run softlabel first or choose --branch stripe/id"
        )


def train(cfg: RunConfig, manifest: DatasetManifest | None = None, out_dir=None, write=True):
    """Train a model per ``cfg``. Returns ``(model, loss_history)``.

    With ``write`` the run directory receives ``config.json``, a JSON-lines
    ``loss_log.jsonl``, periodic checkpoints and ``model.pt``.
    """
    if manifest is None:
        if cfg.manifest is None:
            raise ConfigError("no training manifest given")
        manifest = load_manifest(cfg.manifest)
    out = Path(out_dir or cfg.out_dir)
    records = manifest.split("train")
    if not records:
        raise ConfigError("manifest has no train records")
    check_attributes(manifest, records, cfg)

    seed_everything(cfg.seed)
    num_attrs = max(manifest.num_attributes, 1)
    if cfg.resume:
        model, _ = load_checkpoint(cfg.resume, manifest.num_identities, num_attrs, q=cfg.q, d=cfg.d)
    else:
        model = SanModel(manifest.num_identities, num_attrs, **cfg.model_kwargs())
    images = load_images(manifest, records, cfg.input_size, cfg.pixel_mean, cfg.pixel_std)
    ids, attrs = targets_from_records(records)
    weights = cfg.effective_weights
    history = []

    log_fh = None
    if write:
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.json")
        log_fh = open(out / "loss_log.jsonl", "w")

    def step_loss(outputs, idx):
        idx = torch.from_numpy(idx)
        return total_loss(outputs, ids[idx], attrs[idx], weights, cfg.label_smoothing)

    def on_step(step, breakdown):
        rec = breakdown.as_record(step)
        history.append(rec)
        if log_fh is not None:
            log_fh.write(json.dumps(rec) + "\n")

    def on_epoch(epoch):
        log.info("epoch %d loss %.4f", epoch, history[-1]["total"] if history else float("nan"))
        if write and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            save_checkpoint(out / "checkpoints" / f"epoch_{epoch:04d}.pt", model, cfg.to_dict(), epoch=epoch)

    try:
        fit(model, images, step_loss, cfg, cfg.epochs, on_step, on_epoch)
    finally:
        if log_fh is not None:
            log_fh.close()
    model.eval()
    if write:
        save_checkpoint(out / "model.pt", model, cfg.to_dict(), epoch=cfg.epochs)
    return model, history
