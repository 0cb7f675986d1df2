"""The attack loss family.

Every embedding entering a loss is unit-normalized inside the loss
itself, so gradients flow through the normalization. Distances are
scaled by 1/K (the embedding width). Batched inputs (B, K) yield the
mean per-sample loss.

Sign convention: the generator MINIMIZES every total. The feature term
rewards clean/perturbed feature divergence, the image term rewards
distance from the clean image embedding, the text term pulls toward the
least-similar prompt while a margin hinge keeps the perturbed feature
away from the clean one. The two baseline objectives instead maximize
classifier BCE (gap) or relative BCE (shift), expressed as negated BCE.
"""

from __future__ import annotations

import numpy as np

from . import tensor as gt
from .errors import ConfigError
from .tensor import Tensor

METHODS = ("gama", "ls_only", "ablate_img_only", "ablate_img_txt",
           "gap_bce", "cda_rel_bce")
# methods that need the joint encoder / the prompt bank
ENCODER_METHODS = ("gama", "ablate_img_only", "ablate_img_txt")
BANK_METHODS = ("gama", "ablate_img_txt")
BASELINE_METHODS = ("gap_bce", "cda_rel_bce")
PROB_FLOOR = 1e-7
_NORM_GUARD = 1e-12  # keeps sqrt differentiable when two vectors coincide


def _rows(t: Tensor) -> Tensor:
    return t if t.data.ndim == 2 else t.reshape(1, t.data.shape[0])


def loss_s(z: Tensor, z_tilde: Tensor) -> Tensor:
    """Mean cosine similarity between clean and perturbed features;
    minimizing it pushes the two apart."""
    return gt.cosine_similarity(_rows(z), _rows(z_tilde), axis=-1).mean()


def loss_img(rho_img: Tensor, z_tilde: Tensor) -> Tensor:
    """Negated mean squared distance (scaled by 1/K) between the image
    embedding and the perturbed feature; minimizing drives them apart."""
    rho = gt.normalize_l2(_rows(rho_img), axis=-1)
    zt = gt.normalize_l2(_rows(z_tilde), axis=-1)
    k = rho.data.shape[1]
    per_sample = gt.tsum(gt.mul(gt.sub(rho, zt), gt.sub(rho, zt)), axis=-1)
    return gt.mul(per_sample.mean(), -1.0 / k)


def loss_txt(z_tilde: Tensor, z: Tensor, rho_txt: Tensor, alpha: float = 1.0) -> Tensor:
    """Pull the perturbed feature toward the text target (squared
    distance) while a margin hinge on the UNSQUARED distance keeps it at
    least alpha away from the clean feature; scaled by 1/K."""
    zt = gt.normalize_l2(_rows(z_tilde), axis=-1)
    zc = gt.normalize_l2(_rows(z), axis=-1)
    rho = gt.normalize_l2(_rows(rho_txt), axis=-1)
    k = zt.data.shape[1]
    attract = gt.tsum(gt.mul(gt.sub(zt, rho), gt.sub(zt, rho)), axis=-1)
    sq = gt.tsum(gt.mul(gt.sub(zt, zc), gt.sub(zt, zc)), axis=-1)
    dist = gt.sqrt(gt.add(sq, _NORM_GUARD))
    hinge = gt.relu(gt.sub(float(alpha), dist))
    return gt.mul(gt.add(attract, hinge).mean(), 1.0 / k)


def bce_from_probs(probs: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy on probabilities clamped away from 0/1."""
    y = np.asarray(targets, dtype=probs.data.dtype)
    if y.shape != probs.data.shape:
        raise ConfigError(f"targets shape {y.shape} does not match logits {probs.data.shape}")
    p = gt.clip(probs, PROB_FLOOR, 1.0 - PROB_FLOOR)
    pos = gt.mul(Tensor(y), gt.log(p))
    neg = gt.mul(Tensor(1.0 - y), gt.log(gt.sub(1.0, p)))
    return gt.mul(gt.add(pos, neg).mean(), -1.0)


def baseline_loss(method: str, logits_pert: Tensor, logits_clean: Tensor | None,
                  targets: np.ndarray) -> Tensor:
    """Negated BCE objectives: 'gap_bce' maximizes the victim's BCE on
    the perturbed logits; 'cda_rel_bce' maximizes it on the logit shift
    (perturbed minus clean) instead."""
    if method == "gap_bce":
        probs = gt.sigmoid(logits_pert)
    elif method == "cda_rel_bce":
        if logits_clean is None:
            raise ConfigError("cda_rel_bce needs clean logits")
        probs = gt.sigmoid(gt.sub(logits_pert, logits_clean.detach()))
    else:
        raise ConfigError(f"unknown baseline method {method!r}")
    return gt.mul(bce_from_probs(probs, targets), -1.0)


def total_loss(method: str, parts: dict) -> tuple[Tensor, dict]:
    """Combine the active terms for a method; returns the scalar total
    and a float breakdown {l_s, l_img, l_txt, total} for logging (zeros
    for inactive terms)."""
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; known: {METHODS}")
    breakdown = {"l_s": 0.0, "l_img": 0.0, "l_txt": 0.0}
    if method in BASELINE_METHODS:
        total = parts["baseline"]
    elif method == "ls_only":
        total = parts["l_s"]
        breakdown["l_s"] = total.item()
    elif method == "ablate_img_only":
        total = parts["l_img"]
        breakdown["l_img"] = total.item()
    elif method == "ablate_img_txt":
        li, lt = parts["l_img"], parts["l_txt"]
        total = gt.add(li, lt)
        breakdown["l_img"] = li.item()
        breakdown["l_txt"] = lt.item()
    else:
        ls, li, lt = parts["l_s"], parts["l_img"], parts["l_txt"]
        total = gt.add(gt.add(ls, li), lt)
        breakdown["l_s"] = ls.item()
        breakdown["l_img"] = li.item()
        breakdown["l_txt"] = lt.item()
    breakdown["total"] = total.item()
    return total, breakdown


def multilabel_bce_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Numerically stable BCE-with-logits for classifier training:
    mean(softplus(z) - z * y)."""
    y = np.asarray(targets, dtype=logits.data.dtype)
    if y.shape != logits.data.shape:
        raise ConfigError(f"targets shape {y.shape} does not match logits {logits.data.shape}")
    return gt.sub(gt.softplus(logits), gt.mul(logits, Tensor(y))).mean()
