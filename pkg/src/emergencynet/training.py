"""Loss, schedule, optimizer, the fit loop, and gradient checking.

Batches are class-balanced: every class contributes floor(B/K) samples
and the remainder goes to distinct randomly drawn classes, so over many
batches each class sees 1/K of the traffic regardless of its pool size.
The learning rate follows a half-cosine from ``lr0`` to zero.  Adam does
the updates; L2 decay applies to convolution weights only (keys ending
in ``.w``), never to normalization parameters or the classifier bias.

``grad_check`` validates the whole training graph against central
differences.  Probes where the two perturbed forwards commit to different
decisions (activation regions, pool or fusion winners) are discarded:
finite differences measure the wrong branch there, not a wrong gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .metrics import accuracy, confusion_matrix, mean_f1
from .model import ModelGraph
from .ops import INFER, TRAIN, BatchNormParams


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 64
    iters_per_epoch: int = 60
    lr0: float = 0.1
    lr_total_epochs: Optional[int] = None  # cosine horizon; defaults to epochs
    l2: float = 5e-4
    label_smoothing: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 42
    divergence_loss: float = 1e4
    eval_batch_size: int = 64
    bn_momentum: Optional[float] = 0.9  # None keeps the layers' own value

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.iters_per_epoch < 1:
            raise ValueError("epochs, batch_size and iters_per_epoch must be >= 1")
        if not 0 <= self.label_smoothing < 1:
            raise ValueError("label smoothing must be in [0, 1)")
        if self.lr0 < 0:
            raise ValueError("lr0 must be non-negative")
        if self.bn_momentum is not None and not 0.0 < self.bn_momentum < 1.0:
            raise ValueError("bn_momentum must be in (0, 1)")

    @property
    def cosine_horizon(self) -> int:
        return self.lr_total_epochs if self.lr_total_epochs is not None else self.epochs


def cosine_lr(epoch: int, total_epochs: int, lr0: float) -> float:
    """Half-cosine decay: lr0 at epoch 0, lr0/2 at the midpoint, 0 at the end."""
    if total_epochs < 1:
        raise ValueError("total_epochs must be >= 1")
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    return 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs)) * lr0


def smooth_labels(labels, num_classes: int, smoothing: float, dtype=np.float64) -> np.ndarray:
    """(1-eps) one-hot plus eps/K everywhere; rows sum to one."""
    y = np.asarray(labels, dtype=np.int64).ravel()
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise ValueError(f"labels outside [0, {num_classes})")
    if not 0 <= smoothing < 1:
        raise ValueError("smoothing must be in [0, 1)")
    q = np.full((y.size, num_classes), smoothing / num_classes, dtype=dtype)
    q[np.arange(y.size), y] += 1.0 - smoothing
    return q


def cross_entropy(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross entropy against soft targets, with the logit gradient."""
    if logits.shape != targets.shape:
        raise ValueError(f"shape mismatch: logits {logits.shape}, targets {targets.shape}")
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = float(-(targets * log_probs).sum() / n)
    grad = (np.exp(log_probs) - targets) / n
    return loss, grad.astype(logits.dtype)


def l2_penalty(params: dict[str, np.ndarray], l2: float) -> float:
    """0.5 * l2 * sum of squared convolution weights."""
    if l2 == 0:
        return 0.0
    total = sum(float(np.square(v, dtype=np.float64).sum()) for k, v in params.items() if k.endswith(".w"))
    return 0.5 * l2 * total


def balanced_batch(
    rng: np.random.Generator, class_pools: list[np.ndarray], batch_size: int
) -> np.ndarray:
    """Sample indices so per-class counts differ by at most one.

    floor(B/K) from every class, then one extra from each of B mod K
    distinct classes chosen uniformly.  Draws are uniform with
    replacement per class, which oversamples minorities and
    undersamples the majority in equal measure.
    """
    k = len(class_pools)
    if k < 1 or batch_size < 1:
        raise ValueError("need at least one class and a positive batch size")
    counts = np.full(k, batch_size // k, dtype=np.int64)
    rem = batch_size - counts.sum()
    if rem:
        counts[rng.choice(k, size=rem, replace=False)] += 1
    picks = []
    for c, pool in enumerate(class_pools):
        if counts[c] == 0:
            continue
        if len(pool) == 0:
            raise ValueError(f"class {c} has no samples")
        picks.append(pool[rng.integers(0, len(pool), size=counts[c])])
    idx = np.concatenate(picks)
    rng.shuffle(idx)
    return idx


class Adam:
    """Adam with bias correction; updates parameter arrays in place."""

    def __init__(self, params: dict[str, np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8, l2=0.0):
        self.params = params
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.l2 = l2
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        if set(grads) != set(self.params):
            raise ValueError("gradient keys do not match parameter keys")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            if self.l2 and k.endswith(".w"):
                g = g + self.l2 * p
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * np.square(g)
            p -= (lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)


class TrainingDiverged(RuntimeError):
    """Raised when the loss leaves the finite, bounded regime."""


def evaluate(
    model: ModelGraph, x: np.ndarray, y: np.ndarray, batch_size: int = 64
) -> dict[str, float]:
    """Inference-phase loss, accuracy and mean F1 over a labelled set."""
    if len(x) == 0:
        raise ValueError("empty evaluation set")
    losses = []
    preds = []
    for start in range(0, len(x), batch_size):
        xb = x[start : start + batch_size]
        yb = y[start : start + batch_size]
        logits = model.forward(xb, INFER)
        targets = smooth_labels(yb, model.num_classes, 0.0, dtype=np.float64)
        loss, _ = cross_entropy(logits, targets)
        losses.append(loss * len(xb))
        preds.append(logits.argmax(axis=1))
    pred = np.concatenate(preds)
    cm = confusion_matrix(y, pred, model.num_classes)
    return {
        "loss": float(sum(losses) / len(x)),
        "accuracy": accuracy(y, pred),
        "mean_f1": mean_f1(cm),
    }


def fit(
    model: ModelGraph,
    train_x: np.ndarray,
    train_y: np.ndarray,
    val_x: np.ndarray,
    val_y: np.ndarray,
    cfg: TrainConfig,
    augment_fn: Optional[Callable[[np.ndarray, np.random.Generator], np.ndarray]] = None,
    log_fn: Optional[Callable[[str], None]] = None,
) -> tuple[dict, dict[str, np.ndarray]]:
    """Train with balanced batches; returns (history, best-F1 weights).

    The best snapshot is a deep copy taken whenever validation mean F1
    improves, so callers can discard the possibly overfit final state.
    Raises :class:`TrainingDiverged` if the loss goes non-finite or past
    ``cfg.divergence_loss``; the partial history rides on the exception.
    """

    def fetch(idx: np.ndarray) -> np.ndarray:
        return train_x[idx].astype(model.dtype, copy=True)

    return _run_fit(model, np.asarray(train_y, dtype=np.int64), fetch,
                    val_x, val_y, cfg, augment_fn, log_fn)


def fit_index(
    model: ModelGraph,
    index,
    cfg: TrainConfig,
    augment_fn: Optional[Callable[[np.ndarray, np.random.Generator], np.ndarray]] = None,
    log_fn: Optional[Callable[[str], None]] = None,
) -> tuple[dict, dict[str, np.ndarray]]:
    """Train straight from a dataset index using its train/val splits.

    Training batches are decoded from disk on demand, so memory stays at
    one batch regardless of dataset size; the validation split is decoded
    once up front.  Images are resized to the model's input resolution.
    """
    from .data import load_arrays

    if index.num_classes != model.num_classes:
        raise ValueError(
            f"dataset has {index.num_classes} classes, model expects {model.num_classes}"
        )
    train_ids = index.split_ids("train")
    val_ids = index.split_ids("val")
    if train_ids.size == 0 or val_ids.size == 0:
        raise ValueError("train and val splits must both be non-empty")
    val_x, val_y = load_arrays(index, val_ids, target=model.input_hw)
    train_y = index.labels[train_ids]

    def fetch(idx: np.ndarray) -> np.ndarray:
        x, _ = load_arrays(index, train_ids[idx], target=model.input_hw)
        return x.astype(model.dtype, copy=False)

    return _run_fit(model, train_y, fetch, val_x, val_y, cfg, augment_fn, log_fn)


def _set_bn_momentum(model: ModelGraph, momentum: float) -> None:
    # short schedules need faster-moving running stats than the 0.99 default
    for layer in model.layers:
        for attr in vars(layer).values():
            if isinstance(attr, BatchNormParams):
                attr.momentum = momentum
            elif isinstance(attr, (list, tuple)):
                for item in attr:
                    if isinstance(item, BatchNormParams):
                        item.momentum = momentum


def _run_fit(
    model: ModelGraph,
    train_y: np.ndarray,
    fetch: Callable[[np.ndarray], np.ndarray],
    val_x: np.ndarray,
    val_y: np.ndarray,
    cfg: TrainConfig,
    augment_fn,
    log_fn,
) -> tuple[dict, dict[str, np.ndarray]]:
    rng = np.random.default_rng(cfg.seed)
    for layer in model.layers:
        if hasattr(layer, "reseed"):
            layer.reseed(int(rng.integers(2**63)))
    if cfg.bn_momentum is not None:
        _set_bn_momentum(model, cfg.bn_momentum)
    pools = [np.flatnonzero(train_y == c) for c in range(model.num_classes)]
    for c, pool in enumerate(pools):
        if len(pool) == 0:
            raise ValueError(f"training set has no samples for class {c}")

    opt = Adam(model.trainable_params(), cfg.beta1, cfg.beta2, cfg.adam_eps, l2=cfg.l2)
    history: dict = {"epoch": [], "lr": [], "train_loss": [], "val_loss": [],
                     "val_accuracy": [], "val_f1": []}
    best = {"val_f1": -1.0, "epoch": -1}
    best_state: dict[str, np.ndarray] = {k: v.copy() for k, v in model.state_dict().items()}

    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg.cosine_horizon, cfg.lr0)
        epoch_losses = []
        for _ in range(cfg.iters_per_epoch):
            idx = balanced_batch(rng, pools, cfg.batch_size)
            xb = fetch(idx)
            if augment_fn is not None:
                xb = augment_fn(xb, rng)
            targets = smooth_labels(train_y[idx], model.num_classes, cfg.label_smoothing)
            logits = model.forward(xb, TRAIN)
            data_loss, grad = cross_entropy(logits, targets)
            loss = data_loss + l2_penalty(opt.params, cfg.l2)
            if not math.isfinite(loss) or loss > cfg.divergence_loss:
                exc = TrainingDiverged(f"loss {loss} at epoch {epoch}")
                exc.history = history
                raise exc
            model.backward(grad)
            opt.step(model.grads(), lr)
            epoch_losses.append(loss)

        val = evaluate(model, val_x, val_y, cfg.eval_batch_size)
        history["epoch"].append(epoch)
        history["lr"].append(lr)
        history["train_loss"].append(float(np.mean(epoch_losses)))
        history["val_loss"].append(val["loss"])
        history["val_accuracy"].append(val["accuracy"])
        history["val_f1"].append(val["mean_f1"])
        if val["mean_f1"] > best["val_f1"]:
            best["val_f1"] = val["mean_f1"]
            best["epoch"] = epoch
            best_state = {k: v.copy() for k, v in model.state_dict().items()}
        if log_fn is not None:
            log_fn(
                f"epoch {epoch + 1}/{cfg.epochs}  lr {lr:.5f}  "
                f"loss {history['train_loss'][-1]:.4f}  val_loss {val['loss']:.4f}  "
                f"val_acc {val['accuracy']:.4f}  val_f1 {val['mean_f1']:.4f}"
            )

    history["best_epoch"] = best["epoch"]
    history["best_val_f1"] = best["val_f1"]
    return history, best_state


def grad_check(
    model: ModelGraph,
    x: np.ndarray,
    n_probes: int = 120,
    h: float = 1e-6,
    seed: int = 0,
    phase: str = TRAIN,
    rel_floor: float = 1e-6,
) -> dict:
    """Compare analytic parameter gradients against central differences.

    Converts the model to float64 in place, projects the logits onto a
    fixed random vector to get a scalar, then probes random parameter
    elements.  Each probe takes two central differences (step and half
    step) and extrapolates the step-squared truncation term away; batch
    normalization statistics give the projection enormous curvature in
    train phase, so a single quotient is not trustworthy.  A probe only
    counts when all four perturbed forwards commit to the same decision
    pattern; crossing probes are reported as skipped.  Returns max/mean
    relative error, counts, and the worst offender.

    Relative errors are floored by ``rel_floor`` times the gradient's
    infinity norm: coordinates that many orders of magnitude below the
    dominant ones sit under the difference quotient's cancellation noise
    and carry no signal either way.
    """
    model.astype(np.float64)
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    r = rng.standard_normal((x.shape[0], model.num_classes))

    # pin dropout masks so every probe differentiates the same function
    frozen_before = []
    for layer in model.layers:
        if hasattr(layer, "frozen"):
            frozen_before.append((layer, layer.frozen))
            layer.frozen = True

    def loss_and_sig():
        val = float((model.forward(x, phase) * r).sum())
        return val, model.decision_signature()

    loss_and_sig()
    model.backward(r)
    grads = {k: v.copy() for k, v in model.grads().items()}
    params = model.trainable_params()
    keys = sorted(params)
    gscale = max(float(np.abs(g).max()) for g in grads.values())
    floor = rel_floor * max(1.0, gscale)

    evaluated = 0
    skipped = 0
    errors = []
    worst = {"key": None, "rel_error": 0.0}
    attempts = 0
    max_attempts = 20 * n_probes
    while evaluated < n_probes and attempts < max_attempts:
        attempts += 1
        key = keys[rng.integers(len(keys))]
        flat = params[key].reshape(-1)
        i = int(rng.integers(flat.size))
        orig = flat[i]
        step = h * max(1.0, abs(orig))
        vals = []
        sigs = []
        for offset in (step, -step, step / 2, -step / 2):
            flat[i] = orig + offset
            v, s = loss_and_sig()
            vals.append(v)
            sigs.append(s)
        flat[i] = orig
        ref = sigs[0]
        same = all(
            len(s) == len(ref) and all(np.array_equal(a, b) for a, b in zip(s, ref))
            for s in sigs[1:]
        )
        if not same:
            skipped += 1
            continue
        fd_full = (vals[0] - vals[1]) / (2 * step)
        fd_half = (vals[2] - vals[3]) / step
        fd = (4 * fd_half - fd_full) / 3
        g = float(grads[key].reshape(-1)[i])
        rel = abs(g - fd) / max(abs(g), abs(fd), floor)
        errors.append(rel)
        evaluated += 1
        if rel > worst["rel_error"]:
            worst = {"key": key, "index": i, "rel_error": rel, "analytic": g, "fd": fd}

    # restore the caches the probing clobbered
    model.forward(x, phase)
    model.backward(r)
    for layer, was in frozen_before:
        layer.frozen = was
    return {
        "probes": evaluated,
        "skipped": skipped,
        "attempts": attempts,
        "max_rel_error": float(max(errors)) if errors else float("nan"),
        "mean_rel_error": float(np.mean(errors)) if errors else float("nan"),
        "worst": worst,
    }
