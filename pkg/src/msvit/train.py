"""Surrogate-gradient training: AdamW, warmup + half-cosine schedule, loop."""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import ArrayDataset, batches
from .model import MSViT

log = logging.getLogger(__name__)

METRIC_FIELDS = ("epoch", "split", "loss", "acc", "firing_rate", "wall_ms")


class DivergenceError(RuntimeError):
    pass


def runtime_lr(base_lr: float, batch_size: int, reference_batch: int = 256) -> float:
    """Peak learning rate scaled linearly with the batch size."""
    return base_lr * batch_size / reference_batch


def lr_at(step: int, peak: float, warmup: int, total: int) -> float:
    """Linear warmup to ``peak`` over ``warmup`` steps, then half-cosine to 0 at ``total``."""
    if step <= 0:
        return 0.0 if warmup > 0 else peak
    if step < warmup:
        return peak * step / warmup
    if step >= total:
        return 0.0
    progress = (step - warmup) / max(1, total - warmup)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimState:
    exp_avg: list[torch.Tensor]
    exp_avg_sq: list[torch.Tensor]
    step: int = 0
    skipped: int = 0

    @classmethod
    def for_params(cls, params) -> "OptimState":
        params = list(params)
        return cls([torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params])


@torch.no_grad()
def adamw_step(params: list[torch.Tensor], grads: list[Optional[torch.Tensor]], state: OptimState,
               lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 0.0) -> bool:
    """One AdamW update in place. Returns False (and leaves everything
    untouched) when any gradient is non-finite."""
    if len(params) != len(state.exp_avg):
        raise ValueError("optimizer state does not match parameter list")
    for g in grads:
        if g is not None and not torch.isfinite(g).all():
            state.skipped += 1
            log.warning("non-finite gradient, skipping step %d", state.step + 1)
            return False
    state.step += 1
    b1, b2 = betas
    bc1 = 1 - b1 ** state.step
    bc2 = 1 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.exp_avg, state.exp_avg_sq):
        if g is None:
            continue
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter {tuple(p.shape)}")
        p.mul_(1 - lr * weight_decay)
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        denom = (v / bc2).sqrt_().add_(eps)
        p.addcdiv_(m, denom, value=-lr / bc1)
    return True


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    base_lr: float = 6e-4
    reference_batch: int = 256
    weight_decay: float = 0.01
    warmup_epochs: float = 1.0
    accum_steps: int = 1
    label_smoothing: float = 0.0
    augment: bool = False
    freeze_bn: bool = False
    seed: int = 0
    deterministic: bool = True

    @property
    def peak_lr(self) -> float:
        return runtime_lr(self.base_lr, self.batch_size * self.accum_steps, self.reference_batch)


def set_determinism(seed: int, deterministic: bool = True) -> None:
    torch.manual_seed(seed)
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def _augment(x: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    """Random horizontal flip and 4-pixel pad-crop, the same for all T frames."""
    t, b, c, h, w = x.shape
    out = torch.empty_like(x)
    padded = F.pad(x.reshape(t * b, c, h, w), (4, 4, 4, 4)).reshape(t, b, c, h + 8, w + 8)
    for i in range(b):
        dy, dx = rng.integers(0, 9, size=2)
        img = padded[:, i, :, dy:dy + h, dx:dx + w]
        out[:, i] = img.flip(-1) if rng.random() < 0.5 else img
    return out


def _set_tracking(model: MSViT, on: bool) -> None:
    for m in model.lif_layers():
        m.track = on
        m.spike_count = 0.0
        m.element_count = 0


def _firing_rate(model: MSViT) -> float:
    layers = model.lif_layers()
    elems = sum(m.element_count for m in layers)
    return sum(m.spike_count for m in layers) / elems if elems else 0.0


def evaluate(model: MSViT, data: ArrayDataset, batch_size: int = 64, topk=(1,)) -> dict:
    """Loss, top-k accuracies and firing rate with frozen BN statistics."""
    was_training = model.training
    model.eval()
    _set_tracking(model, True)
    total_loss, n = 0.0, 0
    correct = {k: 0 for k in topk}
    with torch.no_grad():
        for x, y in batches(data, batch_size, None, 0, model.cfg.timesteps):
            logits = model(x)
            total_loss += float(F.cross_entropy(logits, y, reduction="sum"))
            kmax = min(max(topk), logits.shape[1])
            top = logits.topk(kmax, dim=1).indices
            for k in topk:
                correct[k] += int((top[:, :k] == y[:, None]).any(dim=1).sum())
            n += len(y)
    fr = _firing_rate(model)
    _set_tracking(model, False)
    model.train(was_training)
    out = {"loss": total_loss / max(n, 1), "acc": correct[topk[0]] / max(n, 1), "firing_rate": fr}
    for k in topk:
        out[f"top{k}"] = correct[k] / max(n, 1)
    return out


@dataclass
class History:
    rows: list[dict] = field(default_factory=list)
    deterministic: bool = True

    def add(self, **row) -> None:
        self.rows.append(row)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for r in self.rows:
            wall = "" if self.deterministic else f"{r['wall_ms']:.0f}"
            w.writerow([r["epoch"], r["split"], f"{r['loss']:.6f}", f"{r['acc']:.6f}",
                        f"{r['firing_rate']:.6f}", wall])
        return buf.getvalue()

    def losses(self, split: str = "train") -> list[float]:
        return [r["loss"] for r in self.rows if r["split"] == split]


def train_loop(model: MSViT, train_data: ArrayDataset, hyper: TrainConfig,
               eval_data: Optional[ArrayDataset] = None, state: Optional[OptimState] = None,
               start_epoch: int = 0, history: Optional[History] = None,
               on_epoch: Optional[Callable[[int, OptimState, History], None]] = None,
               max_steps: Optional[int] = None) -> tuple[History, OptimState]:
    """Train with cross-entropy on time-pooled logits.

    Each optimizer step consumes ``accum_steps`` micro-batches of
    ``batch_size``. ``on_epoch`` is called after every epoch (checkpointing
    hooks in here). Raises :class:`DivergenceError` if the loss becomes NaN.
    """
    set_determinism(hyper.seed, hyper.deterministic)
    params = [p for p in model.parameters() if p.requires_grad]
    state = state or OptimState.for_params(params)
    history = history or History(deterministic=hyper.deterministic)
    steps_per_epoch = math.ceil(math.ceil(len(train_data) / hyper.batch_size) / hyper.accum_steps)
    total = steps_per_epoch * hyper.epochs
    warmup = int(round(hyper.warmup_epochs * steps_per_epoch))
    peak = hyper.peak_lr
    T = model.cfg.timesteps
    for epoch in range(start_epoch, hyper.epochs):
        t0 = time.perf_counter()
        model.train()
        if hyper.freeze_bn:
            for m in model.modules():
                if isinstance(m, nn.modules.batchnorm._BatchNorm):
                    m.eval()
        _set_tracking(model, True)
        aug_rng = np.random.default_rng([hyper.seed, epoch, 1])
        loss_sum, correct, n = 0.0, 0, 0
        micro = list(batches(train_data, hyper.batch_size, hyper.seed, epoch, T))
        for i in range(0, len(micro), hyper.accum_steps):
            group = micro[i:i + hyper.accum_steps]
            group_n = sum(len(y) for _, y in group)
            for p in params:
                p.grad = None
            for x, y in group:
                if hyper.augment and train_data.kind == "static":
                    x = _augment(x, aug_rng)
                logits = model(x)
                loss = F.cross_entropy(logits, y, label_smoothing=hyper.label_smoothing)
                if not torch.isfinite(loss):
                    raise DivergenceError(f"loss became {float(loss.detach())} at epoch {epoch}, "
                                          f"step {state.step + 1}")
                (loss * (len(y) / group_n)).backward()
                loss_sum += float(loss.detach()) * len(y)
                correct += int((logits.argmax(1) == y).sum())
                n += len(y)
            lr = lr_at(state.step + 1, peak, warmup, total)
            adamw_step(params, [p.grad for p in params], state, lr,
                       weight_decay=hyper.weight_decay)
            if max_steps is not None and state.step >= max_steps:
                break
        wall = (time.perf_counter() - t0) * 1000
        history.add(epoch=epoch, split="train", loss=loss_sum / max(n, 1),
                    acc=correct / max(n, 1), firing_rate=_firing_rate(model), wall_ms=wall)
        _set_tracking(model, False)
        log.info("epoch %d train loss %.4f acc %.4f", epoch, loss_sum / max(n, 1),
                 correct / max(n, 1))
        if eval_data is not None:
            t1 = time.perf_counter()
            ev = evaluate(model, eval_data, hyper.batch_size)
            history.add(epoch=epoch, split="eval", loss=ev["loss"], acc=ev["acc"],
                        firing_rate=ev["firing_rate"], wall_ms=(time.perf_counter() - t1) * 1000)
            log.info("epoch %d eval loss %.4f acc %.4f", epoch, ev["loss"], ev["acc"])
        if on_epoch is not None:
            on_epoch(epoch, state, history)
        if max_steps is not None and state.step >= max_steps:
            break
    return history, state


def optim_state_tensors(state: OptimState) -> dict[str, torch.Tensor]:
    out = {"step": torch.tensor([state.step, state.skipped], dtype=torch.int64)}
    for i, (m, v) in enumerate(zip(state.exp_avg, state.exp_avg_sq)):
        out[f"m{i}"] = m
        out[f"v{i}"] = v
    return out


def optim_state_from_tensors(tensors: dict[str, torch.Tensor], params) -> OptimState:
    params = list(params)
    step, skipped = (int(v) for v in tensors["step"])
    return OptimState([tensors[f"m{i}"].to(p.dtype) for i, p in enumerate(params)],
                      [tensors[f"v{i}"].to(p.dtype) for i, p in enumerate(params)],
                      step, skipped)


def hyper_dict(hyper: TrainConfig) -> dict:
    return asdict(hyper)
