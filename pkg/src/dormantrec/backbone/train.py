"""Optimisation loop and checkpoint files."""
from __future__ import annotations

import copy
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import EncodedExamples
from .model import Backbone, BackboneConfig

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, last_good: dict):
        super().__init__(f"loss became non-finite at step {step}")
        self.step = step
        self.last_good = last_good


@dataclass
class TrainResult:
    model: Backbone
    losses: list[float] = field(default_factory=list)   # loss of each batch before its update
    epoch_losses: list[float] = field(default_factory=list)


def build_model(cfg: BackboneConfig) -> Backbone:
    torch.manual_seed(cfg.seed)
    return Backbone(cfg)


def lr_at(step: int, total: int, cfg: BackboneConfig) -> float:
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    span = max(1, total - cfg.warmup_steps)
    progress = min(1.0, (step - cfg.warmup_steps) / span)
    floor = cfg.lr * cfg.min_lr_ratio
    return floor + 0.5 * (cfg.lr - floor) * (1 + math.cos(math.pi * progress))


def train(
    data: EncodedExamples,
    cfg: BackboneConfig,
    init: Backbone | None = None,
    epochs: int | None = None,
) -> TrainResult:
    """Adam with cosine decay over all steps; batch order comes from ``cfg.seed``.

    With ``init`` the run continues from a copy of that model (warm start);
    the input model is left untouched.
    """
    if len(data) == 0:
        raise ValueError("empty training set")
    if data.targets is None:
        raise ValueError("training examples need targets")
    epochs = cfg.epochs if epochs is None else epochs
    if init is None:
        model = build_model(cfg)
    else:
        model = copy.deepcopy(init)
        torch.manual_seed(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    n_batches = math.ceil(len(data) / cfg.batch_size)
    total = max(1, epochs * n_batches)
    result = TrainResult(model)
    last_good = copy.deepcopy(model.state_dict())
    step = 0
    model.train()
    for epoch in range(epochs):
        order = rng.permutation(len(data))
        running = 0.0
        for b in range(n_batches):
            idx = np.sort(order[b * cfg.batch_size : (b + 1) * cfg.batch_size])
            batch, targets = data.batch(idx)
            for group in opt.param_groups:
                group["lr"] = lr_at(step, total, cfg)
            loss = model.loss(batch, targets)
            value = float(loss.detach())
            if not math.isfinite(value):
                model.load_state_dict(last_good)
                raise TrainingDiverged(step, last_good)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            result.losses.append(value)
            running += value * len(idx)
            step += 1
        result.epoch_losses.append(running / len(data))
        last_good = copy.deepcopy(model.state_dict())
        log.info("epoch %d loss %.4f", epoch + 1, result.epoch_losses[-1])
    model.eval()
    return result


@torch.no_grad()
def evaluate_loss(model: Backbone, data: EncodedExamples, batch_size: int = 1024) -> float:
    """Mean per-example level-averaged NLL."""
    model.eval()
    total = 0.0
    for start in range(0, len(data), batch_size):
        batch, targets = data.batch(slice(start, start + batch_size))
        total += float(model.nll(batch, targets).sum())
    return total / len(data)


def save_checkpoint(model: Backbone, path) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.to_json(),
        "state": {k: v.detach().clone() for k, v in model.state_dict().items()},
    }
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    os.close(fd)
    try:
        torch.save(payload, tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def load_checkpoint(path) -> Backbone:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    model = Backbone(BackboneConfig(**payload["config"]))
    model.load_state_dict(payload["state"])
    model.eval()
    return model
