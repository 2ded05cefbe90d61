"""Synchronous SGD with classic momentum and a step-decay schedule."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ops
from .blocks import Module
from .data import DatasetSpec, SyntheticVideoDataset, generate_synthetic
from .tensor import Tensor, backward, load_checkpoint, no_grad, save_checkpoint


class NumericalError(RuntimeError):
    """Raised when the loss stops being finite; names the first offending layer."""

    def __init__(self, step: int, layer: str | None):
        self.step = step
        self.layer = layer
        where = f"first non-finite activation in layer {layer}" if layer else "activations finite, loss is not"
        super().__init__(f"non-finite loss at step {step}: {where}")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.1
    decay_steps: tuple[int, ...] | None = None
    decay_factor: float = 0.1
    momentum: float = 0.9
    batch_size: int = 8
    steps: int = 800
    seed: int = 0
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    eval_every: int = 100
    workers: int = 1
    # moving averages lag weights that move fast over a short run
    recalibrate_bn: bool = True

    def __post_init__(self):
        if isinstance(self.dataset, dict):
            object.__setattr__(self, "dataset", DatasetSpec(**self.dataset))
        if self.decay_steps is None:
            # 75% and 87.5% of the run, the shape of a 60k/70k-of-80k schedule
            object.__setattr__(self, "decay_steps", tuple(sorted({self.steps * 3 // 4, self.steps * 7 // 8})))
        object.__setattr__(self, "decay_steps", tuple(int(s) for s in self.decay_steps))
        if any(b <= a for a, b in zip(self.decay_steps, self.decay_steps[1:])):
            raise ValueError(f"decay steps must be strictly increasing, got {self.decay_steps}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 1 or self.steps < 0 or self.workers < 1:
            raise ValueError("batch size and workers must be positive and steps non-negative")
        if self.batch_size % self.workers:
            raise ValueError(f"batch size {self.batch_size} does not split across {self.workers} workers")


def lr_schedule(step: int, config: TrainConfig) -> float:
    """Piecewise constant; a decay step already uses the decayed value."""
    passed = sum(1 for s in config.decay_steps if step >= s)
    return config.lr * config.decay_factor**passed


def sgd_momentum_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], velocity: Sequence[np.ndarray], lr: float, momentum: float):
    """In place: ``v <- momentum * v + g``; ``p <- p - lr * v``."""
    if not len(params) == len(grads) == len(velocity):
        raise ValueError("params, grads and velocity must align")
    for p, g, v in zip(params, grads, velocity):
        if p.shape != g.shape or p.shape != v.shape:
            raise ValueError(f"shape mismatch {p.shape} / {g.shape} / {v.shape}")
        v *= momentum
        v += g
        p -= lr * v
    return params, velocity


def evaluate(net: Module, clips: np.ndarray, labels: np.ndarray, batch: int = 16, logits: np.ndarray | None = None) -> dict:
    """Eval-mode accuracy on full clips: top-1, top-5 and per class."""
    if logits is None:
        from .analysis import predict_logits

        logits = predict_logits(net, np.asarray(clips), batch)
    return accuracy(logits, labels)


def accuracy(logits: np.ndarray, labels: np.ndarray) -> dict:
    labels = np.asarray(labels)
    classes = logits.shape[1]
    k = min(5, classes)
    top = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    top1 = top[:, 0] == labels
    top5 = (top == labels[:, None]).any(axis=1)
    per_class = {int(c): float(top1[labels == c].mean()) for c in range(classes) if (labels == c).any()}
    return {"top1": float(top1.mean()), "top5": float(top5.mean()), "per_class": per_class, "n": int(len(labels)), "policy": "full-clip"}


def recalibrate_bn(net: Module, clips: np.ndarray, batch: int = 16, limit: int = 400) -> None:
    """Replace running BN statistics by the exact average over ``limit`` clips.

    Weights are frozen; each batch enters the average with equal weight.
    """
    states = [s for _, s in net.named_buffers()]
    if not states:
        return
    saved = [s.momentum for s in states]
    net.train()
    try:
        with no_grad():
            for i, start in enumerate(range(0, min(limit, len(clips)), batch)):
                for s in states:
                    s.momentum = i / (i + 1)
                net(Tensor(np.asarray(clips[start : start + batch])))
    finally:
        for s, m in zip(states, saved):
            s.momentum = m
        net.eval()


def _first_nonfinite(net: Module, x: np.ndarray) -> str | None:
    if not hasattr(net, "run"):
        return None
    with no_grad():
        acts = net.run(Tensor(x), collect=True)
    for name, act in acts.items():
        if not np.all(np.isfinite(act.data)):
            return name
    return None


@dataclass
class TrainResult:
    log: list[dict]
    final: dict
    checkpoint: Path | None


def _batches(rng: np.random.Generator, n: int, batch: int):
    order = rng.permutation(n)
    for i in range(0, n - batch + 1, batch):
        yield order[i : i + batch]


def train(
    net: Module,
    config: TrainConfig,
    dataset: SyntheticVideoDataset | None = None,
    out_dir: str | Path | None = None,
    log_stream=None,
) -> TrainResult:
    """Train ``net`` in place; deterministic for a given seed and worker count."""
    data = dataset if dataset is not None else generate_synthetic(config.dataset)
    if len(data) < config.batch_size:
        raise ValueError(f"dataset has {len(data)} clips, fewer than one batch of {config.batch_size}")
    rng = np.random.default_rng(config.seed)
    params = net.parameters()
    velocity = [np.zeros_like(p.data) for p in params]
    log = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.jsonl").write_text("")

    def emit(record):
        log.append(record)
        line = json.dumps(record, sort_keys=True)
        if out is not None:
            with open(out / "metrics.jsonl", "a") as fh:
                fh.write(line + "\n")
        if log_stream is not None:
            print(line, file=log_stream, flush=True)

    step = 0
    shard = config.batch_size // config.workers
    while step < config.steps:
        for idx in _batches(rng, len(data), config.batch_size):
            if step >= config.steps:
                break
            net.train()
            lr = lr_schedule(step, config)
            grads = [np.zeros_like(p.data) for p in params]
            loss_sum, correct = 0.0, 0
            for w in range(config.workers):
                part = idx[w * shard : (w + 1) * shard]
                x = data.clips[part]
                logits = net(Tensor(x))
                loss = ops.cross_entropy(logits, data.labels[part])
                if not math.isfinite(float(loss.data)):
                    raise NumericalError(step, _first_nonfinite(net, x))
                net.zero_grad()
                backward(loss)
                # ordered summation keeps the merged gradient deterministic
                for g, p in zip(grads, params):
                    if p.grad is not None:
                        g += p.grad
                loss_sum += float(loss.data)
                correct += int((logits.data.argmax(-1) == data.labels[part]).sum())
            for g in grads:
                g /= config.workers
            sgd_momentum_step([p.data for p in params], grads, velocity, lr, config.momentum)
            emit({"step": step, "lr": lr, "loss": loss_sum / config.workers, "batch_top1": correct / len(idx)})
            step += 1
            if config.eval_every and step % config.eval_every == 0 and step < config.steps:
                if config.recalibrate_bn:
                    recalibrate_bn(net, data.clips)
                metrics = evaluate(net, data.clips, data.labels)
                emit({"step": step, "eval_top1": metrics["top1"], "eval_top5": metrics["top5"], "policy": metrics["policy"]})
    if config.recalibrate_bn:
        recalibrate_bn(net, data.clips)
    final = evaluate(net, data.clips, data.labels)
    emit({"step": step, "eval_top1": final["top1"], "eval_top5": final["top5"], "policy": final["policy"], "final": True})
    ckpt = None
    if out is not None:
        ckpt = out / "checkpoint.stck"
        save_checkpoint(ckpt, checkpoint_arrays(net, velocity, step))
        (out / "train_config.json").write_text(json.dumps(asdict(config), indent=1, default=list))
    return TrainResult(log, final, ckpt)


def checkpoint_arrays(net: Module, velocity: Sequence[np.ndarray] | None = None, step: int = 0) -> dict[str, np.ndarray]:
    arrays = dict(net.state_dict())
    for (name, _), v in zip(net.named_parameters(), velocity or []):
        arrays[f"_velocity.{name}"] = v
    arrays["_step"] = np.asarray([step], dtype=np.int64)
    return arrays


def load_weights(net: Module, path: str | Path) -> int:
    """Load a training checkpoint into ``net``; returns the recorded step."""
    arrays = load_checkpoint(path)
    step = int(arrays.pop("_step", np.zeros(1))[0])
    state = {k: v for k, v in arrays.items() if not k.startswith("_velocity.")}
    net.load_state_dict(state)
    return step
