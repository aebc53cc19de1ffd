"""Optimisation (AdamW + cosine warmup), metrics, training loop and checkpoints."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import ModelConfig, TrainConfig, model_config_from_items, model_config_items
from .data import Dataset
from .model import HookModel
from .tensor import ContractError

cross_entropy = T.cross_entropy

CHECKPOINT_MAGIC = "hookckpt v1"


# ------------------------------------------------------------------ optimiser


@dataclass
class OptimizerState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, **kw):
        return cls([np.zeros(p.shape) for p in params], [np.zeros(p.shape) for p in params], **kw)


def adamw_step(params, grads, state: OptimizerState, lr, wd):
    """One AdamW update in place; decay ``p <- p - lr*wd*p`` is applied apart from the Adam step."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros(p.shape)
        m = state.m[i]
        v = state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if wd:
            p.data *= 1.0 - lr * wd
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def cosine_warmup_lr(step, total_steps, warmup_steps, base_lr):
    """Linear ramp to ``base_lr`` over the warmup, then cosine decay to zero at ``total_steps``."""
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    if total_steps <= warmup_steps:
        return base_lr
    progress = min((step - warmup_steps) / (total_steps - warmup_steps), 1.0)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ------------------------------------------------------------------- metrics


def top1(predictions, labels):
    predictions = np.asarray(predictions).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if predictions.size == 0:
        raise ContractError("top1 of an empty prediction set")
    if predictions.shape != labels.shape:
        raise ContractError(f"top1: {predictions.size} predictions vs {labels.size} labels")
    return 100.0 * int((predictions == labels).sum()) / predictions.size


def miou(pred_mask, gt_mask, n_classes):
    """Mean IoU over classes present in the prediction or the ground truth."""
    pred = np.asarray(pred_mask).reshape(-1)
    gt = np.asarray(gt_mask).reshape(-1)
    if pred.shape != gt.shape:
        raise ContractError(f"miou: extents differ ({pred.size} vs {gt.size})")
    if pred.size and (min(pred.min(), gt.min()) < 0 or max(pred.max(), gt.max()) >= n_classes):
        raise ContractError(f"miou: class id outside [0, {n_classes})")
    conf = np.bincount(gt * n_classes + pred, minlength=n_classes * n_classes).reshape(n_classes, n_classes)
    inter = np.diag(conf)
    union = conf.sum(axis=0) + conf.sum(axis=1) - inter
    present = union > 0
    if not present.any():
        raise ContractError("miou: no class present in either mask")
    return float((inter[present] / union[present]).mean())


# ------------------------------------------------------------------ training


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)  # (epoch, loss, lr, metric)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "loss", "lr", "metric"])
            for epoch, loss, lr, metric in self.rows:
                w.writerow([epoch, repr(loss), repr(lr), repr(metric)])


class NonFiniteError(FloatingPointError):
    pass


def _first_non_finite(model, logits):
    if not np.isfinite(logits).all():
        for name, p in model.named_parameters():
            if not np.isfinite(p.data).all():
                return name
        return "logits"
    return "loss"


def _targets(dataset, task):
    return dataset.labels if task == "classify" else dataset.masks


def train_loop(model: HookModel, dataset: Dataset, cfg: TrainConfig, log_path=None, on_epoch=None) -> TrainLog:
    """Train in place; returns the per-epoch log.

    ``on_epoch(epoch, row)`` may return True to stop early.
    """
    if len(dataset) == 0:
        raise ContractError("train_loop needs a non-empty dataset")
    cfg.validate()
    task = model.config.head.task
    n_classes = model.config.head.classes
    params = model.parameters()
    state = OptimizerState.for_params(params)
    rng = T.RngState(cfg.seed)
    n = len(dataset)
    per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * per_epoch
    warmup = cfg.warmup_epochs * per_epoch
    targets = _targets(dataset, task)
    log = TrainLog()
    step = 0
    model.train()
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        losses, weights, correct = [], [], []
        lr = 0.0
        for b in range(per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            x = T.Tensor(dataset.images[idx])
            y = targets[idx]
            T.zero_grads(params)
            logits = model(x)
            loss = T.cross_entropy(logits, y, axis=1)
            if not np.isfinite(loss.data):
                raise NonFiniteError(
                    f"non-finite loss at epoch {epoch}, batch {b}; first non-finite tensor: "
                    f"{_first_non_finite(model, logits.data)}")
            loss.backward()
            lr = cosine_warmup_lr(step + 1, total, warmup, cfg.lr)
            adamw_step(params, [p.grad for p in params], state, lr, cfg.weight_decay)
            step += 1
            losses.append(loss.item())
            weights.append(len(idx))
            correct.append((logits.data.argmax(axis=1), y))
        preds = np.concatenate([c[0].reshape(-1) for c in correct])
        gts = np.concatenate([c[1].reshape(-1) for c in correct])
        metric = top1(preds, gts) if task == "classify" else miou(preds, gts, n_classes)
        row = (epoch, float(np.average(losses, weights=weights)), lr, metric)
        log.rows.append(row)
        if on_epoch is not None and on_epoch(epoch, row):
            break
    if log_path is not None:
        log.write_csv(log_path)
    return log


def predict(model: HookModel, images, batch_size=16):
    was_training = model.training
    model.eval()
    out = []
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            out.append(model(T.Tensor(images[i:i + batch_size])).data.argmax(axis=1))
    model.train(was_training)
    return np.concatenate(out)


def evaluate(model: HookModel, dataset: Dataset, task=None, batch_size=16) -> dict:
    """Eval-mode metrics: ``top1`` for classification, ``miou`` for segmentation."""
    task = task or model.config.head.task
    preds = predict(model, dataset.images, batch_size)
    if task == "classify":
        return {"top1": top1(preds, dataset.labels)}
    return {"miou": miou(preds, dataset.masks, model.config.head.classes)}


# --------------------------------------------------------------- checkpoints


def save_checkpoint(path, model: HookModel):
    lines = [CHECKPOINT_MAGIC]
    lines += [f"{k} = {v}" for k, v in model_config_items(model.config)]
    parts = ["\n".join(lines) + "\n"]
    for name, value in model.state_dict().items():
        parts.append(f"tensor {name}\n" + T.dump_tensor(value))
    Path(path).write_text("".join(parts))


def load_checkpoint(path) -> HookModel:
    text = Path(path).read_text()
    lines = text.split("\n")
    if not lines or lines[0].strip() != CHECKPOINT_MAGIC:
        raise ContractError(f"{path}: not a checkpoint (expected header {CHECKPOINT_MAGIC!r})")
    items = []
    i = 1
    while i < len(lines) and not lines[i].startswith("tensor "):
        line = lines[i].strip()
        if line:
            key, _, value = line.partition("=")
            items.append((key.strip(), value.strip()))
        i += 1
    config = model_config_from_items(items)
    state = {}
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        if not lines[i].startswith("tensor "):
            raise ContractError(f"{path}:{i + 1}: expected 'tensor <name>'")
        name = lines[i][7:].strip()
        if i + 2 >= len(lines) + 1:
            raise ContractError(f"{path}:{i + 1}: truncated tensor {name}")
        state[name] = T.parse_tensor(lines[i + 1] + "\n" + (lines[i + 2] if i + 2 < len(lines) else ""))
        i += 3
    model = HookModel(config, 0)
    model.load_state_dict(state)
    return model


def build_model(config: ModelConfig, seed: int) -> HookModel:
    return HookModel(config, seed)
