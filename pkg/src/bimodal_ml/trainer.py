"""Mutual-learning training loop: four regimes, step LR decay, early stop.

Regimes: IL trains the branches independently; ML_KLD and ML_TrKLD add a
mimicry term against the detached peer distribution; EAML_TrKLD additionally
enables the attention-fusion sites. All regimes include the fusion head, fed
detached branch features, so the ensemble loss never backpropagates into the
branches and the beta = 0, gate-bypass configurations of all four regimes
walk identical parameter trajectories.
"""

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .attention import GATE_MODES
from .backbones import JointModel
from .data import Split, to_tensors
from .errors import InvalidConfigError, InvalidInputError, TrainingDivergedError
from .fusion_head import fusion_classify, superpose
from .losses import (
    LossBreakdown,
    LossWeights,
    cross_entropy,
    kld,
    softmax,
    total_loss,
    tr_kld_reg,
    weighted_total,
)

REGIMES = ("IL", "ML_KLD", "ML_TrKLD", "EAML_TrKLD")
_MIMICRY = {"ML_KLD": kld, "ML_TrKLD": tr_kld_reg, "EAML_TrKLD": tr_kld_reg}


@dataclass(frozen=True)
class TrainConfig:
    regime: str = "IL"
    beta: float = 0.5
    weights: LossWeights = field(default_factory=LossWeights)
    batch_size: int = 16
    initial_lr: float = 1e-3
    drop: float = 0.5
    iter_drop: int = 10
    momentum: float = 0.9
    max_epochs: int = 30
    patience: int = 10
    seed: int = 0
    gate_mode: str = "sigmoid"
    lr_staircase: bool = True
    two_phase: bool = False

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise InvalidConfigError(
                "regime must be one of %s, got %r" % (list(REGIMES), self.regime)
            )
        if self.batch_size < 1:
            raise InvalidConfigError("batch_size must be >= 1")
        if not 0.0 < self.drop <= 1.0:
            raise InvalidConfigError("drop must be in (0, 1]")
        if self.patience < 1:
            raise InvalidConfigError("patience must be >= 1")
        if self.max_epochs < 1:
            raise InvalidConfigError("max_epochs must be >= 1")
        if self.beta < 0:
            raise InvalidConfigError("beta must be non-negative")
        if self.initial_lr <= 0:
            raise InvalidConfigError("initial_lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidConfigError("momentum must be in [0, 1)")
        if self.iter_drop < 1:
            raise InvalidConfigError("iter_drop must be >= 1")
        if self.gate_mode not in GATE_MODES:
            raise InvalidConfigError("gate_mode must be one of %s" % (GATE_MODES,))

    @property
    def attention_enabled(self):
        return self.regime == "EAML_TrKLD"


def lr_at(epoch, cfg: TrainConfig) -> float:
    """initial_lr * drop^floor(epoch / iter_drop); continuous exponent when
    lr_staircase is off."""
    if epoch < 0:
        raise InvalidConfigError("epoch must be >= 0")
    exponent = epoch / cfg.iter_drop
    if cfg.lr_staircase:
        exponent = math.floor(exponent)
    return cfg.initial_lr * cfg.drop**exponent


@dataclass
class TrainLog:
    """Per-epoch records (deterministic) plus run-level summary fields."""

    records: list = field(default_factory=list)
    regime: str = ""
    seed: int = 0
    stopped_epoch: int = -1
    best_epoch: int = -1
    best_val_fusion: float = float("nan")
    wall_seconds: float = 0.0

    def write_jsonl(self, path):
        import json

        with open(path, "w", encoding="utf-8") as fh:
            for record in self.records:
                fh.write(json.dumps(record) + "\n")
        return path


RECORD_FIELDS = (
    "epoch",
    "phase",
    "lr",
    "l1",
    "l2",
    "l3",
    "total",
    "d_image",
    "d_text",
    "val_acc_image",
    "val_acc_text",
    "val_acc_fusion",
)


def _new_optimizer(model, cfg):
    return torch.optim.SGD(
        model.parameters(),
        lr=cfg.initial_lr,
        momentum=cfg.momentum,
        nesterov=cfg.momentum > 0,
    )


class Trainer:
    """Owns the optimizer; one momentum-SGD update per train_step call."""

    def __init__(self, model: JointModel, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg
        self.optimizer = _new_optimizer(model, cfg)

    def set_lr(self, value):
        for group in self.optimizer.param_groups:
            group["lr"] = value

    def train_step(self, batch) -> LossBreakdown:
        images, tokens, labels = batch
        cfg = self.cfg
        self.model.train()
        logits_img, logits_txt, x1, x2 = self.model(
            images,
            tokens,
            attention_enabled=cfg.attention_enabled,
            gate_mode=cfg.gate_mode,
        )
        if not (torch.isfinite(logits_img).all() and torch.isfinite(logits_txt).all()):
            raise TrainingDivergedError(
                "non-finite branch logits",
                diagnostics={
                    "regime": cfg.regime,
                    "lr": self.optimizer.param_groups[0]["lr"],
                    "logits_img_finite": bool(torch.isfinite(logits_img).all()),
                    "logits_txt_finite": bool(torch.isfinite(logits_txt).all()),
                },
            )
        p_img = softmax(logits_img)
        p_txt = softmax(logits_txt)
        ce_img = cross_entropy(p_img, labels).mean()
        ce_txt = cross_entropy(p_txt, labels).mean()
        mimicry = _MIMICRY.get(cfg.regime)
        if mimicry is not None and cfg.beta > 0:
            d_image = mimicry(p_txt.detach(), p_img).mean()
            d_text = mimicry(p_img.detach(), p_txt).mean()
            l1 = ce_img + cfg.beta * d_image
            l2 = ce_txt + cfg.beta * d_text
        else:
            d_image = torch.zeros(())
            d_text = torch.zeros(())
            l1 = ce_img
            l2 = ce_txt
        fused = superpose(x1.detach(), x2.detach())
        _, p_fuse = fusion_classify(fused, self.model.fusion_head)
        l3 = cross_entropy(p_fuse, labels).mean()
        total = weighted_total(l1, l2, l3, cfg.weights)
        if not torch.isfinite(total):
            raise TrainingDivergedError(
                "non-finite total loss",
                diagnostics={
                    "regime": cfg.regime,
                    "lr": self.optimizer.param_groups[0]["lr"],
                    "l1": float(l1.detach()),
                    "l2": float(l2.detach()),
                    "l3": float(l3.detach()),
                },
            )
        self.optimizer.zero_grad()
        total.backward()
        self.optimizer.step()
        return total_loss(l1, l2, l3, cfg.weights, d_image=d_image, d_text=d_text)


def train_step(model, batch, cfg: TrainConfig) -> LossBreakdown:
    """Single self-contained update (fresh optimizer, no momentum carry)."""
    return Trainer(model, cfg).train_step(batch)


def _validation_accuracies(model, tensors, attention_enabled, batch_size=512):
    images, tokens, labels = tensors
    hits = {"image": 0, "text": 0, "fusion": 0}
    model.eval()
    with torch.no_grad():
        for start in range(0, len(labels), batch_size):
            sl = slice(start, start + batch_size)
            logits_img, logits_txt, x1, x2 = model(
                images[sl], tokens[sl], attention_enabled=attention_enabled
            )
            logits_fuse = model.fusion_head(superpose(x1, x2))
            y = labels[sl]
            hits["image"] += int((logits_img.argmax(-1) == y).sum())
            hits["text"] += int((logits_txt.argmax(-1) == y).sum())
            hits["fusion"] += int((logits_fuse.argmax(-1) == y).sum())
    n = len(labels)
    return {k: v / n for k, v in hits.items()}


def _epoch_batches(n, batch_size, seed, epoch):
    order = np.random.default_rng((seed, epoch)).permutation(n)
    for start in range(0, n, batch_size):
        yield torch.from_numpy(order[start : start + batch_size].copy())


def _run_phase(trainer, train_tensors, val_tensors, log, phase, epoch_offset):
    cfg = trainer.cfg
    images, tokens, labels = train_tensors
    n = len(labels)
    best_val = -1.0
    best_state = None
    best_epoch = -1
    since_improve = 0
    epoch = 0
    for epoch in range(cfg.max_epochs):
        started = time.monotonic()
        lr = lr_at(epoch, cfg)
        trainer.set_lr(lr)
        sums = {k: 0.0 for k in ("l1", "l2", "l3", "total", "d_image", "d_text")}
        seen = 0
        for idx in _epoch_batches(n, cfg.batch_size, cfg.seed, epoch_offset + epoch):
            batch = (images[idx], tokens[idx], labels[idx])
            breakdown = trainer.train_step(batch)
            for key in sums:
                sums[key] += getattr(breakdown, key) * len(idx)
            seen += len(idx)
        val = _validation_accuracies(trainer.model, val_tensors, cfg.attention_enabled)
        record = {
            "epoch": epoch_offset + epoch,
            "phase": phase,
            "lr": lr,
            **{k: sums[k] / seen for k in sums},
            "val_acc_image": val["image"],
            "val_acc_text": val["text"],
            "val_acc_fusion": val["fusion"],
        }
        log.records.append(record)
        log.wall_seconds += time.monotonic() - started
        if val["fusion"] > best_val:
            best_val = val["fusion"]
            best_epoch = epoch_offset + epoch
            best_state = {
                k: v.detach().clone() for k, v in trainer.model.state_dict().items()
            }
            since_improve = 0
        else:
            since_improve += 1
            if since_improve >= cfg.patience:
                break
    if best_state is not None:
        trainer.model.load_state_dict(best_state)
    return best_epoch, best_val, epoch_offset + epoch


def fit(model: JointModel, train_split: Split, val_split: Split, cfg: TrainConfig):
    """Train until validation fusion accuracy stops improving.

    Returns (model restored to its best-validation parameters, TrainLog).
    """
    if train_split is None or len(train_split) == 0:
        raise InvalidInputError("train split is empty")
    if val_split is None or len(val_split) == 0:
        raise InvalidInputError("val split is empty")
    train_tensors = to_tensors(train_split)
    val_tensors = to_tensors(val_split)
    log = TrainLog(regime=cfg.regime, seed=cfg.seed)
    if not cfg.two_phase:
        trainer = Trainer(model, cfg)
        best_epoch, best_val, stopped = _run_phase(
            trainer, train_tensors, val_tensors, log, phase=1, epoch_offset=0
        )
    else:
        # phase 1: branches only; phase 2: freeze everything but the head
        w = cfg.weights
        if w.w1 + w.w2 <= 0:
            raise InvalidConfigError("two_phase needs w1 + w2 > 0")
        branch_w = LossWeights(w.w1 / (w.w1 + w.w2), w.w2 / (w.w1 + w.w2), 0.0)
        phase1 = replace(cfg, weights=branch_w, two_phase=False)
        trainer = Trainer(model, phase1)
        _, _, stopped1 = _run_phase(
            trainer, train_tensors, val_tensors, log, phase=1, epoch_offset=0
        )
        for name, p in model.named_parameters():
            p.requires_grad_(name.startswith("fusion_head."))
        phase2 = replace(cfg, weights=LossWeights(0.0, 0.0, 1.0), two_phase=False)
        head_trainer = Trainer(model, phase2)
        best_epoch, best_val, stopped = _run_phase(
            head_trainer,
            train_tensors,
            val_tensors,
            log,
            phase=2,
            epoch_offset=stopped1 + 1,
        )
        for p in model.parameters():
            p.requires_grad_(True)
    log.stopped_epoch = stopped
    log.best_epoch = best_epoch
    log.best_val_fusion = best_val
    return model, log
