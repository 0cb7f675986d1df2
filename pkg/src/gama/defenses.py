"""Victim-side defenses: median blur preprocessing, PGD attack, and
PGD adversarial training."""

from __future__ import annotations

import numpy as np

from . import kernels
from . import losses as L
from .errors import ConfigError
from .nets import SurrogateClassifier
from .optim import adam_step, init_adam, zero_grads
from .rng import Streams
from .scenegen import SceneDataset
from .tensor import Tape, Tensor

PGD_EPS = 10.0 / 255.0
PGD_STEP = 2.5 / 255.0
PGD_ITERS = 7


def median_blur_batch(x: np.ndarray, window: int = 3) -> np.ndarray:
    """Per-channel sliding median with edge replication."""
    return kernels.median_blur(np.asarray(x, dtype=np.float32), window)


def pgd_attack(model: SurrogateClassifier, x: np.ndarray, y: np.ndarray,
               eps: float = PGD_EPS, step: float = PGD_STEP,
               iters: int = PGD_ITERS) -> np.ndarray:
    """Iterated sign-gradient ascent on the classifier BCE, projected
    to the eps ball and [0, 1] after each step. Starts from the clean
    image (no random restart) so runs are reproducible."""
    if eps <= 0 or iters < 1:
        raise ConfigError(f"need eps > 0 and iters >= 1, got {eps}, {iters}")
    x = np.asarray(x, dtype=np.float32)
    lo = np.clip(x - eps, 0.0, 1.0)
    hi = np.clip(x + eps, 0.0, 1.0)
    adv = x.copy()
    # freeze so the input-gradient passes leave no grads on the model
    flags = [p.requires_grad for p in model.param_list()]
    model.set_trainable(False)
    try:
        for _ in range(iters):
            probe = Tensor(adv, requires_grad=True)
            with Tape() as tape:
                logits, _ = model.forward(probe)
                loss = L.multilabel_bce_logits(logits, y.astype(np.float32))
                tape.backward(loss)
            adv = np.clip(adv + step * np.sign(probe.grad).astype(np.float32),
                          lo, hi)
    finally:
        for p, flag in zip(model.param_list(), flags):
            p.requires_grad = flag
    return adv


def pgd_train(dataset: SceneDataset, arch_id: int, streams: Streams,
              epochs: int = 24, lr: float = 1e-3, batch: int = 32,
              eps: float = PGD_EPS, step: float = PGD_STEP,
              iters: int = PGD_ITERS) -> tuple[SurrogateClassifier, list]:
    """Adversarial training: half of every batch is replaced with PGD
    examples crafted against the current weights. Needs the same long
    schedule as plain training to learn the low-contrast scenes at all."""
    c = dataset.labels.shape[1]
    model = SurrogateClassifier(c, arch_id, streams.stream("init", arch_id))
    params = model.param_list()
    state = init_adam(params)
    train_idx = dataset.split_indices["train"]
    history = []
    for epoch in range(epochs):
        order = streams.stream("shuffle", epoch).permutation(train_idx)
        total, steps = 0.0, 0
        for i in range(0, len(order), batch):
            idx = order[i:i + batch]
            x = dataset.images[idx].copy()
            y = dataset.labels[idx].astype(np.float32)
            half = len(idx) // 2
            if half:
                x[:half] = pgd_attack(model, x[:half], y[:half], eps, step, iters)
            with Tape() as tape:
                logits, _ = model.forward(Tensor(x))
                loss = L.multilabel_bce_logits(logits, y)
                tape.backward(loss)
            total += loss.item()
            steps += 1
            adam_step(params, [p.grad for p in params], state, lr)
            zero_grads(params)
        history.append(total / steps)
    return model, history
