"""Desk-scale training: AdamW, warmup + cosine schedule, synthetic gratings.

Single-threaded and deterministic per seed: data order, drop-path draws and
parameter updates all derive from the config seed, so two runs with equal
configs produce bit-identical loss curves.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .checkpoint import save_checkpoint
from .model import GswinModel
from .tensor import Parameter, Tensor, backward, no_grad


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 0.05
    warmup_steps: int = 100
    total_steps: int = 2000
    batch_size: int = 16
    label_smoothing: float = 0.1
    seed: int = 0
    eval_every: int = 100

    def __post_init__(self):
        if self.warmup_steps > self.total_steps:
            raise ValueError(f"warmup {self.warmup_steps} exceeds total {self.total_steps}")
        if min(self.lr, self.weight_decay, self.label_smoothing) < 0:
            raise ValueError("rates must be >= 0")
        if self.total_steps < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("steps, batch size and eval interval must be >= 1")


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear 0 -> lr over warmup, then half-cosine lr -> 0 at total_steps."""
    if not 0 <= step <= config.total_steps:
        raise ValueError(f"step {step} outside [0, {config.total_steps}]")
    if config.warmup_steps and step <= config.warmup_steps:
        return config.lr * step / config.warmup_steps
    span = config.total_steps - config.warmup_steps
    if span == 0:
        return 0.0
    tau = (step - config.warmup_steps) / span
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * tau))


ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def adamw_step(params: list[Parameter], grads: list[np.ndarray],
               state: dict[str, dict[str, np.ndarray]], t: int, config: TrainConfig,
               decay_mask: list[bool] | None = None) -> dict:
    """One decoupled-weight-decay Adam update at step ``t`` (1-based).

    Decay multiplies parameters by (1 - lr_t * wd) before the moment update;
    ``decay_mask`` lets the caller exempt parameters (biases, norms, gating
    tables) per the usual convention. State is keyed by parameter name and
    created on first use.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if decay_mask is None:
        decay_mask = [True] * len(params)
    lr_t = lr_at(min(t, config.total_steps), config)
    b1c = 1.0 - ADAM_BETA1 ** t
    b2c = 1.0 - ADAM_BETA2 ** t
    for p, g, decay in zip(params, grads, decay_mask):
        if g.shape != p.shape:
            raise ValueError(f"{p.name}: gradient shape {g.shape} != param shape {p.shape}")
        s = state.setdefault(p.name, {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data)})
        if decay and config.weight_decay:
            p.data *= 1.0 - lr_t * config.weight_decay
        s["m"] = ADAM_BETA1 * s["m"] + (1.0 - ADAM_BETA1) * g
        s["v"] = ADAM_BETA2 * s["v"] + (1.0 - ADAM_BETA2) * (g * g)
        mhat = s["m"] / b1c
        vhat = s["v"] / b2c
        p.data -= lr_t * mhat / (np.sqrt(vhat) + ADAM_EPS)
    return state


def default_decay_mask(params: list[Parameter]) -> list[bool]:
    """Decay 2-d+ projection weights; spare biases, norms and gating tables."""
    return [p.ndim >= 2 and not p.name.endswith((".b_win", ".rel_table"))
            for p in params]


def cross_entropy(logits: Tensor, labels: np.ndarray, smoothing: float = 0.0) -> Tensor:
    """Mean label-smoothed cross-entropy over a batch of logits (B, n)."""
    B, n = logits.shape
    if labels.shape != (B,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {B}")
    shift = Tensor(logits.data.max(axis=1, keepdims=True))  # constant under backward
    shifted = logits - shift
    logz = shifted.exp().sum(axis=1, keepdims=True).log()
    logp = shifted - logz
    q = np.full((B, n), smoothing / n)
    q[np.arange(B), labels] += 1.0 - smoothing
    return -(logp * Tensor(q)).sum() / B


class SyntheticTask:
    """Oriented-gratings classification, generated deterministically per seed.

    Class c is a sinusoidal grating at angle c * pi / classes; each sample
    gets a random phase, a small frequency jitter and additive pixel noise.
    Train and eval draws come from one stream in order, so the splits are
    disjoint by construction.
    """

    def __init__(self, classes: int = 10, image_size: int = 32, train_size: int = 512,
                 eval_size: int = 256, noise: float = 0.25, frequency: float = 4.0,
                 seed: int = 0):
        if train_size < 1 or eval_size < 1 or classes < 2:
            raise ValueError("need at least one sample per split and two classes")
        self.classes = classes
        self.image_size = image_size
        self.noise = noise
        self.frequency = frequency
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.train_x, self.train_y = self._draw(rng, train_size)
        self.eval_x, self.eval_y = self._draw(rng, eval_size)

    def _draw(self, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
        size = self.image_size
        u = np.arange(size) / size
        yy, xx = np.meshgrid(u, u, indexing="ij")
        labels = np.arange(n) % self.classes
        images = np.empty((n, size, size, 3))
        for i in range(n):
            theta = math.pi * labels[i] / self.classes
            freq = self.frequency * (1.0 + 0.1 * rng.standard_normal())
            phase = rng.uniform(0, 2 * math.pi)
            wave = np.sin(2 * math.pi * freq * (xx * math.cos(theta) + yy * math.sin(theta))
                          + phase)
            images[i] = wave[:, :, None] + self.noise * rng.standard_normal((size, size, 3))
        return images, labels


@dataclass
class TrainHistory:
    steps: list[int]
    lrs: list[float]
    losses: list[float]
    eval_steps: list[int]
    eval_accs: list[float]

    @property
    def final_eval_acc(self) -> float:
        return self.eval_accs[-1]


def evaluate(model: GswinModel, images: np.ndarray, labels: np.ndarray,
             batch_size: int = 64) -> float:
    correct = 0
    with no_grad():
        for i in range(0, len(images), batch_size):
            logits = model.forward(Tensor(images[i:i + batch_size]))
            correct += int((logits.data.argmax(axis=1) == labels[i:i + batch_size]).sum())
    return correct / len(images)


def train(model: GswinModel, task: SyntheticTask, config: TrainConfig,
          out_dir: str | Path | None = None,
          on_eval: Callable[[int, float, float, float], None] | None = None) -> TrainHistory:
    """Run the loop; returns per-step losses and periodic eval accuracies.

    With ``out_dir`` set, writes metrics.csv (step, lr, train_loss, eval_acc)
    and a final checkpoint. ``on_eval`` is invoked after each evaluation with
    (step, lr, train_loss, eval_acc). Aborts on non-finite loss.
    """
    if model.config.num_classes != task.classes:
        raise ValueError(f"model has {model.config.num_classes} classes, "
                         f"task has {task.classes}")
    params = model.parameters()
    mask = default_decay_mask(params)
    state: dict = {}
    order_rng = np.random.default_rng(config.seed)
    branch_rng = np.random.default_rng(config.seed + 1)
    history = TrainHistory([], [], [], [], [])
    n_train = len(task.train_x)
    queue: list[int] = []

    for t in range(1, config.total_steps + 1):
        while len(queue) < config.batch_size:
            queue.extend(order_rng.permutation(n_train).tolist())
        idx = np.array(queue[:config.batch_size])
        del queue[:config.batch_size]

        logits = model.forward(Tensor(task.train_x[idx]), training=True, rng=branch_rng)
        loss = cross_entropy(logits, task.train_y[idx], smoothing=config.label_smoothing)
        if not np.isfinite(loss.data):
            raise RuntimeError(f"loss diverged at step {t}: {float(loss.data)}")
        model.zero_grads()
        backward(loss)
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
        adamw_step(params, grads, state, t, config, decay_mask=mask)

        history.steps.append(t)
        history.lrs.append(lr_at(t, config))
        history.losses.append(float(loss.data))
        if t % config.eval_every == 0 or t == config.total_steps:
            acc = evaluate(model, task.eval_x, task.eval_y)
            history.eval_steps.append(t)
            history.eval_accs.append(acc)
            if on_eval is not None:
                on_eval(t, history.lrs[-1], history.losses[-1], acc)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        eval_at = dict(zip(history.eval_steps, history.eval_accs))
        with open(out / "metrics.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["step", "lr", "train_loss", "eval_acc"])
            for step, lr, loss_v in zip(history.steps, history.lrs, history.losses):
                acc = eval_at.get(step, "")
                writer.writerow([step, f"{lr:.8g}", f"{loss_v:.8g}",
                                 f"{acc:.6g}" if acc != "" else ""])
        save_checkpoint(out / "final.ckpt", model)
    return history
