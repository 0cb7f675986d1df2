"""Training loops: surrogate classifiers, the joint encoder, and the
perturbation generator.

The generator loop follows the frozen-artifact contract: surrogates and
encoder are loaded read-only, their checksums are taken before the loop
and asserted unchanged after it. Clean-image features and embeddings are
constants of the optimization, so they are computed once up front.
"""

from __future__ import annotations

import numpy as np

from . import losses as L
from . import tensor as gt
from .errors import AutodiffError, CompatibilityError, ConfigError
from .nets import (K_EMBED, JointEncoder, PerturbationGenerator,
                   SurrogateClassifier)
from .optim import adam_step, init_adam, zero_grads
from .promptbank import PromptBank, least_similar, sample_candidates
from .rng import Streams
from .scenegen import SceneDataset, captions
from .tensor import Tape, Tensor, no_grad

GEN_LR = 1e-4
GEN_BETAS = (0.5, 0.999)
GEN_BATCH = 16
GEN_EPOCHS = 10
DEFAULT_EPS = 10.0 / 255.0
DEFAULT_ALPHA = 1.0
CANDIDATE_B = 16


def _batches(indices: np.ndarray, batch: int):
    for i in range(0, len(indices), batch):
        yield indices[i:i + batch]


def _finite_or_raise(value: float, what: str) -> float:
    if not np.isfinite(value):
        raise AutodiffError(f"{what} became non-finite; aborting")
    return value


def train_surrogate(dataset: SceneDataset, arch_id: int, streams: Streams,
                    epochs: int = 24, lr: float = 1e-3, batch: int = 32
                    ) -> tuple[SurrogateClassifier, list]:
    """Multi-label classifier on the train split; returns the model and
    per-epoch mean BCE. The low-contrast scenes need the longer default
    schedule: accuracy climbs late once the color separation is learned."""
    c = dataset.labels.shape[1]
    model = SurrogateClassifier(c, arch_id, streams.stream("init", arch_id))
    params = model.param_list()
    state = init_adam(params)
    train_idx = dataset.split_indices["train"]
    history = []
    for epoch in range(epochs):
        order = streams.stream("shuffle", epoch).permutation(train_idx)
        total, steps = 0.0, 0
        for idx in _batches(order, batch):
            x = Tensor(dataset.images[idx])
            y = dataset.labels[idx].astype(np.float32)
            with Tape() as tape:
                logits, _ = model.forward(x)
                loss = L.multilabel_bce_logits(logits, y)
                tape.backward(loss)
            total += _finite_or_raise(loss.item(), "surrogate loss")
            steps += 1
            adam_step(params, [p.grad for p in params], state, lr)
            zero_grads(params)
        history.append(total / steps)
    return model, history


def _caption_batch_loss(enc: JointEncoder, x: Tensor, caps: list) -> Tensor:
    img = enc.encode_image(x)
    txt = enc.encode_text(caps)
    scale = gt.exp(gt.neg(enc.params["log_temp"]))
    logits = gt.mul(gt.matmul(img, gt.transpose2d(txt)), scale)
    b = logits.data.shape[0]
    eye = Tensor(np.eye(b, dtype=np.float32))
    hit_i = gt.tsum(gt.mul(gt.log_softmax(logits), eye))
    hit_t = gt.tsum(gt.mul(gt.log_softmax(gt.transpose2d(logits)), eye))
    return gt.mul(gt.add(hit_i, hit_t), -0.5 / b)


def pretrain_joint_encoder(dataset: SceneDataset, streams: Streams,
                           epochs: int = 20, lr: float = 1e-3,
                           batch: int = 32) -> tuple[JointEncoder, list]:
    """Two-tower contrastive pretraining on (image, caption) pairs from
    the train split: symmetric cross-entropy over in-batch similarities
    with a learned, clamped temperature."""
    from .nets import build_vocab
    enc = JointEncoder(build_vocab(dataset.class_names), streams.stream("init", 0))
    caps = captions(dataset)
    params = enc.param_list()
    state = init_adam(params)
    train_idx = dataset.split_indices["train"]
    history = []
    for epoch in range(epochs):
        order = streams.stream("shuffle", epoch).permutation(train_idx)
        total, steps = 0.0, 0
        for idx in _batches(order, batch):
            if len(idx) < 2:
                continue  # a 1-row batch has no negatives
            x = Tensor(dataset.images[idx])
            with Tape() as tape:
                loss = _caption_batch_loss(enc, x, [caps[i] for i in idx])
                tape.backward(loss)
            total += _finite_or_raise(loss.item(), "encoder loss")
            steps += 1
            adam_step(params, [p.grad for p in params], state, lr)
            zero_grads(params)
            enc.clamp_temperature()
        history.append(total / steps)
    return enc, history


def encoder_mean_rank(enc: JointEncoder, dataset: SceneDataset,
                      streams: Streams, probe: int = 32) -> float:
    """Retrieval sanity: rank (1-based) of each probe image's own
    caption among the probe batch captions, averaged."""
    caps = captions(dataset)
    test_idx = dataset.split_indices["test"]
    take = min(probe, len(test_idx))
    pick = streams.stream("eval", 0).choice(test_idx, size=take, replace=False)
    with no_grad():
        img = enc.encode_image(Tensor(dataset.images[pick])).data
        txt = enc.encode_text([caps[i] for i in pick]).data
    sims = img @ txt.T
    ranks = []
    for i in range(take):
        own = sims[i, i]
        ranks.append(1 + int((sims[i] > own).sum()))
    return float(np.mean(ranks))


def _check_widths(surrogates: list, encoder, bank) -> None:
    for s in surrogates:
        if s.k != K_EMBED:
            raise CompatibilityError(f"surrogate feature width {s.k} != {K_EMBED}")
    if encoder is not None and encoder.k != K_EMBED:
        raise CompatibilityError(f"encoder width {encoder.k} != {K_EMBED}")
    if bank is not None and bank.k != K_EMBED:
        raise CompatibilityError(f"prompt bank width {bank.k} != {K_EMBED}")


def train_generator(dataset: SceneDataset, method: str,
                    surrogates: list, streams: Streams,
                    encoder: JointEncoder | None = None,
                    bank: PromptBank | None = None,
                    eps: float = DEFAULT_EPS, alpha: float = DEFAULT_ALPHA,
                    lr: float = GEN_LR, betas: tuple = GEN_BETAS,
                    batch: int = GEN_BATCH, epochs: int = GEN_EPOCHS,
                    candidate_b: int = CANDIDATE_B,
                    candidate_resample: str = "step"
                    ) -> tuple[PerturbationGenerator, list]:
    """Adversarial generator training. The quadruplet per image is
    (rho_txt, rho_img, z, z_tilde): prompt embedding retrieved as least
    similar to the clean image embedding, the clean image embedding
    itself, and the surrogate's mid-level features of the clean and
    perturbed image. The feature term pushes z_tilde off z, the image
    term pushes it off rho_img, the text term pulls it toward rho_txt.
    Surrogates and encoder stay frozen; the encoder only ever sees clean
    images. With several surrogates each active term is averaged over
    them.

    Returns the generator and the per-step loss log."""
    if method not in L.METHODS:
        raise ConfigError(f"unknown method {method!r}; known: {L.METHODS}")
    if not surrogates:
        raise ConfigError("need at least one surrogate")
    if method in L.ENCODER_METHODS and encoder is None:
        raise ConfigError(f"method {method!r} needs a joint encoder")
    if method in L.BANK_METHODS and bank is None:
        raise ConfigError(f"method {method!r} needs a prompt bank")
    if candidate_resample not in ("step", "epoch"):
        raise ConfigError("candidate_resample must be 'step' or 'epoch'")
    _check_widths(surrogates, encoder if method in L.ENCODER_METHODS else None,
                  bank if method in L.BANK_METHODS else None)

    frozen = list(surrogates) + ([encoder] if encoder is not None else [])
    for m in frozen:
        m.set_trainable(False)
    before = [m.weight_checksum() for m in frozen]

    gen = PerturbationGenerator(streams.stream("init", 1))
    params = gen.param_list()
    state = init_adam(params)
    train_idx = dataset.split_indices["train"]

    # clean-side constants for the whole run
    feats_clean = []
    with no_grad():
        for s in surrogates:
            rows = [s.forward(Tensor(dataset.images[idx]))[1].data
                    for idx in _batches(np.arange(len(dataset.images)), 64)]
            feats_clean.append(np.concatenate(rows, axis=0))
        logits_clean = None
        if method == "cda_rel_bce":
            logits_clean = []
            for s in surrogates:
                rows = [s.forward(Tensor(dataset.images[idx]))[0].data
                        for idx in _batches(np.arange(len(dataset.images)), 64)]
                logits_clean.append(np.concatenate(rows, axis=0))
        rho_img_all = None
        if method in L.ENCODER_METHODS:
            rows = [encoder.encode_image(Tensor(dataset.images[idx])).data
                    for idx in _batches(np.arange(len(dataset.images)), 64)]
            rho_img_all = np.concatenate(rows, axis=0)

    cand_rng = streams.stream("candidates")
    log = []
    step = 0
    for epoch in range(epochs):
        order = streams.stream("shuffle", epoch).permutation(train_idx)
        epoch_cand = (sample_candidates(bank, candidate_b, cand_rng)
                      if bank is not None and candidate_resample == "epoch" else None)
        for idx in _batches(order, batch):
            x = Tensor(dataset.images[idx])
            rho_txt = None
            if method in L.BANK_METHODS:
                cand = (epoch_cand if epoch_cand is not None
                        else sample_candidates(bank, candidate_b, cand_rng))
                rho_txt = Tensor(np.stack([
                    least_similar(rho_img_all[i], bank, cand)[1] for i in idx]))
            parts = {}
            with Tape() as tape:
                x_tilde = gen.forward(x, eps)
                if method in L.BASELINE_METHODS:
                    per = {"baseline": []}
                    for si, s in enumerate(surrogates):
                        lp = s.forward(x_tilde)[0]
                        lc = (Tensor(logits_clean[si][idx])
                              if method == "cda_rel_bce" else None)
                        per["baseline"].append(
                            L.baseline_loss(method, lp, lc, dataset.labels[idx]))
                else:
                    per = {"l_s": [], "l_img": [], "l_txt": []}
                    for si, s in enumerate(surrogates):
                        z_tilde = s.forward(x_tilde)[1]
                        z = Tensor(feats_clean[si][idx])
                        if method in ("gama", "ls_only"):
                            per["l_s"].append(L.loss_s(z, z_tilde))
                        if method in L.ENCODER_METHODS:
                            per["l_img"].append(
                                L.loss_img(Tensor(rho_img_all[idx]), z_tilde))
                        if method in L.BANK_METHODS:
                            per["l_txt"].append(
                                L.loss_txt(z_tilde, z, rho_txt, alpha))
                for name, terms in per.items():
                    if not terms:
                        continue
                    acc = terms[0]
                    for extra in terms[1:]:
                        acc = gt.add(acc, extra)
                    parts[name] = gt.mul(acc, 1.0 / len(terms))
                total, breakdown = L.total_loss(method, parts)
                tape.backward(total)
            _finite_or_raise(breakdown["total"], "generator loss")
            adam_step(params, [p.grad for p in params], state, lr,
                      beta1=betas[0], beta2=betas[1])
            zero_grads(params)
            step += 1
            log.append({"step": step, "epoch": epoch, "lr": lr, **breakdown})

    after = [m.weight_checksum() for m in frozen]
    if before != after:
        raise AutodiffError("frozen surrogate/encoder weights changed during "
                            "generator training")
    return gen, log
