"""Loss, optimizer, training loop, and evaluation metrics.

Training is deterministic given (seed, config): the per-epoch shuffle comes
from a keyed stream of the run seed, Adam has no stochastic state, and batch
reduction order is fixed.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Grads, Node, Parameter, apply_op, backward, no_grad
from .data import FAMILIES, Dataset
from .model import VQAModel, softmax_rows
from .tensor import Rng, ShapeError, Tensor

_SHUFFLE_DOMAIN = 2


class TrainingError(RuntimeError):
    pass


def cross_entropy(logits: Node, targets: np.ndarray) -> Node:
    """Mean negative log softmax probability of the target classes,
    stabilized with log-sum-exp."""
    targets = np.asarray(targets)
    b, a = logits.shape
    if targets.shape != (b,):
        raise ShapeError(f"targets shape {targets.shape} != ({b},)")
    if targets.min() < 0 or targets.max() >= a:
        raise IndexError(f"target outside [0, {a})")
    z = logits.array
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    picked = z[np.arange(b), targets]
    loss = np.asarray([(lse - picked).mean()], dtype=z.dtype)

    def rule(g):
        p = softmax_rows(z)
        p[np.arange(b), targets] -= 1.0
        return (p * (g.reshape(-1)[0] / b),)

    return apply_op(Tensor(loss), (logits,), rule)


@dataclass
class AdamState:
    """First/second moments per parameter plus the shared step count."""

    m: dict
    v: dict
    step: int = 0


class Adam:
    """Standard Adam with bias correction; beta1=0.9, beta2=0.999, eps=1e-8."""

    def __init__(self, params: list[Parameter], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = AdamState(
            m={p.name: np.zeros(p.shape, dtype=p.value.dtype) for p in self.params},
            v={p.name: np.zeros(p.shape, dtype=p.value.dtype) for p in self.params})

    def step(self, grads: Grads) -> None:
        self.state.step += 1
        t = self.state.step
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p in self.params:
            g = grads.raw(p.node)
            if g.shape != p.shape:
                raise ShapeError(f"gradient shape {g.shape} != {p.shape} for {p.name}")
            m = self.state.m[p.name]
            v = self.state.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.assign(p.value.array - update)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 5e-4
    seed: int = 1

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2 (batch-norm constraint)")


@dataclass
class Metrics:
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: float
    seconds: float
    family_acc: dict = field(default_factory=dict)


def _batches(n: int, batch_size: int, order: np.ndarray | None):
    idx = order if order is not None else np.arange(n)
    for start in range(0, n, batch_size):
        chunk = idx[start:start + batch_size]
        if len(chunk) < 2:
            break
        yield chunk


def train_epoch(model: VQAModel, ds: Dataset, config: TrainConfig, opt: Adam,
                epoch: int) -> tuple[float, float]:
    """One pass over a seeded shuffle; returns (mean loss, accuracy)."""
    order = Rng(config.seed).derive(_SHUFFLE_DOMAIN, epoch).permutation(len(ds))
    total_loss = 0.0
    correct = 0
    seen = 0
    for bi, chunk in enumerate(_batches(len(ds), config.batch_size, order)):
        images = ds.images[chunk]
        tokens = ds.tokens[chunk]
        targets = ds.answers[chunk].astype(np.int64)
        logits = model.forward(images, tokens, train=True)
        loss = cross_entropy(logits, targets)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingError(f"non-finite loss {value} at epoch {epoch} batch {bi}")
        grads = backward(loss)
        opt.step(grads)
        total_loss += value * len(chunk)
        correct += int((np.argmax(logits.array, axis=1) == targets).sum())
        seen += len(chunk)
    return total_loss / seen, correct / seen


def _eval_batch(model: VQAModel, ds: Dataset, chunk: np.ndarray):
    with no_grad():
        logits = model.forward(ds.images[chunk], ds.tokens[chunk], train=False)
    preds = np.argmax(logits.array, axis=1)
    truth = ds.answers[chunk].astype(np.int64)
    fams = [ds.family(int(i)) for i in chunk]
    per_family = {f: [0, 0] for f in FAMILIES}
    for f, p, t in zip(fams, preds, truth):
        per_family[f][0] += int(p == t)
        per_family[f][1] += 1
    return int((preds == truth).sum()), per_family


def evaluate(model: VQAModel, ds: Dataset, batch_size: int = 256
             ) -> tuple[float, dict[str, float]]:
    """Eval-mode exact-match accuracy, overall and per question family.

    QGHC_THREADS (env) caps batch-level parallelism; aggregation order is
    fixed by batch index, so the result does not depend on the worker count.
    """
    chunks = list(_batches(len(ds), batch_size, None))
    workers = max(1, int(os.environ.get("QGHC_THREADS", "1")))
    if workers == 1:
        results = [_eval_batch(model, ds, c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda c: _eval_batch(model, ds, c), chunks))
    correct = 0
    per_family = {f: [0, 0] for f in FAMILIES}
    for hit, fam in results:
        correct += hit
        for f in FAMILIES:
            per_family[f][0] += fam[f][0]
            per_family[f][1] += fam[f][1]
    total = sum(per_family[f][1] for f in FAMILIES)
    overall = correct / total
    family_acc = {f: (per_family[f][0] / per_family[f][1] if per_family[f][1] else 0.0)
                  for f in FAMILIES}
    return overall, family_acc


LOG_HEADER = "epoch,train_loss,train_acc,val_acc,seconds"


def format_log_row(m: Metrics) -> str:
    return (f"{m.epoch},{m.train_loss:.6f},{m.train_acc:.4f},"
            f"{m.val_acc:.4f},{m.seconds:.3f}")


def fit(model: VQAModel, train_ds: Dataset, val_ds: Dataset | None,
        config: TrainConfig, log_path=None) -> list[Metrics]:
    """Full training run; appends one CSV row per epoch when log_path is set."""
    opt = Adam(model.parameters(), lr=config.lr)
    history: list[Metrics] = []
    log_fh = None
    if log_path is not None:
        log_fh = open(log_path, "a")
        if log_fh.tell() == 0:
            log_fh.write(LOG_HEADER + "\n")
    try:
        for epoch in range(config.epochs):
            t0 = time.perf_counter()
            train_loss, train_acc = train_epoch(model, train_ds, config, opt, epoch)
            if val_ds is not None:
                val_acc, family_acc = evaluate(model, val_ds)
            else:
                val_acc, family_acc = float("nan"), {}
            metrics = Metrics(epoch, train_loss, train_acc, val_acc,
                              time.perf_counter() - t0, family_acc)
            history.append(metrics)
            if log_fh is not None:
                log_fh.write(format_log_row(metrics) + "\n")
                log_fh.flush()
    finally:
        if log_fh is not None:
            log_fh.close()
    return history
