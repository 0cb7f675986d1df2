"""Attack evaluation: victim scoring under clean and perturbed inputs,
white/black-box tagging, defense application, and the zero-shot
label-shift diagnostic."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import metrics
from .binio import payload_crc32
from .defenses import median_blur_batch
from .errors import CompatibilityError, ConfigError, GamaError
from .nets import JointEncoder, PerturbationGenerator, SurrogateClassifier
from .promptbank import PROMPT_PREFIX
from .scenegen import SceneDataset
from .tensor import Tensor, no_grad

BUDGET_SLACK = 1e-6
DEFENSES = ("none", "median3", "pgd_trained")
TASKS = ("multi_label", "single_label")


@dataclass
class VictimSpec:
    victim_id: str
    path: str                    # classifier checkpoint
    task: str = "multi_label"
    distribution_id: str = "shapes-a"
    defense: str = "none"

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; known: {TASKS}")
        if self.defense not in DEFENSES:
            raise ConfigError(f"unknown defense {self.defense!r}; known: {DEFENSES}")


@dataclass
class ReportRow:
    generator_id: str
    surrogate_id: str
    victim_id: str
    task: str
    defense: str
    scenario: str
    metric: str
    clean: float
    attacked: float
    epsilon: float


REPORT_HEADER = ("generator_id,surrogate_id,victim_id,task,defense,"
                 "scenario,metric,clean,attacked,epsilon")


def report_csv(rows: list) -> str:
    out = [REPORT_HEADER]
    for r in rows:
        out.append(f"{r.generator_id},{r.surrogate_id},{r.victim_id},{r.task},"
                   f"{r.defense},{r.scenario},{r.metric},"
                   f"{r.clean:.6f},{r.attacked:.6f},{r.epsilon:.6f}")
    return "\n".join(out) + "\n"


def _forward_batched(fn, images: np.ndarray, batch: int = 64) -> np.ndarray:
    rows = []
    with no_grad():
        for i in range(0, len(images), batch):
            rows.append(fn(Tensor(images[i:i + batch])))
    return np.concatenate(rows, axis=0)


def perturb_batched(gen: PerturbationGenerator, images: np.ndarray,
                    eps: float, batch: int = 64) -> np.ndarray:
    return _forward_batched(lambda t: gen.forward(t, eps).data, images, batch)


def verify_budget(gen: PerturbationGenerator, images: np.ndarray,
                  eps: float) -> float:
    """Largest observed perturbation. Raises when any output leaves the
    eps ball or the [0, 1] range; every report run re-checks this."""
    adv = perturb_batched(gen, images, eps)
    worst = float(np.abs(adv - images).max())
    if worst > eps + BUDGET_SLACK:
        raise GamaError(f"budget violation: |delta|inf = {worst} > {eps}")
    if adv.min() < 0.0 or adv.max() > 1.0:
        raise GamaError("budget violation: output leaves [0, 1]")
    return worst


def scenario_tag(gen_meta: dict, victim_fp: str, victim_distribution: str) -> str:
    """White-box iff the victim is one of the generator's surrogates and
    the data distribution matches the generator's training one."""
    fps = gen_meta.get("surrogate_fingerprints", [])
    same_dist = victim_distribution == gen_meta.get("distribution_id")
    return "white" if victim_fp in fps and same_dist else "black"


def _task_scores(model: SurrogateClassifier, images: np.ndarray,
                 dataset: SceneDataset, idx: np.ndarray, task: str) -> float:
    logits = _forward_batched(lambda t: model.forward(t)[0].data, images)
    if task == "multi_label":
        return metrics.hamming_score(metrics.predict_multilabel(logits),
                                     dataset.labels[idx])
    labels = dataset.labels[idx].argmax(axis=1)
    return metrics.top1_accuracy(logits, labels)


def evaluate_attack(gen: PerturbationGenerator, gen_meta: dict,
                    victims: list, dataset: SceneDataset, eps: float,
                    collect_detail: bool = False) -> tuple[list, dict]:
    """Score every victim on the test split, clean vs perturbed.

    The perturbation budget is re-verified before any row is produced.
    A defended victim sees both clean and perturbed images through its
    defense. Returns (rows, detail) where detail carries per-victim
    prediction matrices when requested (for context scoring)."""
    test_idx = dataset.split_indices["test"]
    clean = dataset.images[test_idx]
    verify_budget(gen, clean, eps)
    adv = perturb_batched(gen, clean, eps)

    gen_id = gen_meta.get("generator_id", "generator")
    sur_id = gen_meta.get("surrogate_id", "surrogate")
    rows, detail = [], {}
    for spec in victims:
        model, meta = SurrogateClassifier.load(spec.path)
        if int(dataset.labels.shape[1]) != model.n_classes:
            raise CompatibilityError(
                f"victim {spec.victim_id} expects {model.n_classes} classes, "
                f"dataset has {dataset.labels.shape[1]}")
        x_clean, x_adv = clean, adv
        if spec.defense == "median3":
            x_clean = median_blur_batch(x_clean, 3)
            x_adv = median_blur_batch(x_adv, 3)
        c_score = _task_scores(model, x_clean, dataset, test_idx, spec.task)
        a_score = _task_scores(model, x_adv, dataset, test_idx, spec.task)
        tag = scenario_tag(gen_meta, payload_crc32(spec.path),
                           spec.distribution_id)
        metric = "hamming" if spec.task == "multi_label" else "top1"
        rows.append(ReportRow(gen_id, sur_id, spec.victim_id, spec.task,
                              spec.defense, tag, metric, c_score, a_score,
                              eps))
        if collect_detail:
            logits_adv = _forward_batched(
                lambda t: model.forward(t)[0].data, x_adv)
            detail[spec.victim_id] = {
                "pred_attacked": metrics.predict_multilabel(logits_adv),
                "attacked_fraction": a_score / 100.0,
            }
    return rows, detail


def zero_shot_label_shift(enc: JointEncoder, clean: np.ndarray,
                          perturbed: np.ndarray, class_names: list,
                          top_k: int = 2) -> dict:
    """Rank classes by cosine to single-class prompts for clean and
    perturbed images; report the per-image top-k sets and the fraction
    of images whose set changed."""
    if not 1 <= top_k <= len(class_names):
        raise ConfigError(f"top_k must be in [1, {len(class_names)}]")
    prompts = [f"{PROMPT_PREFIX} {name}" for name in class_names]
    with no_grad():
        a_t = enc.encode_text(prompts).data
    z_clean = _forward_batched(lambda t: enc.encode_image(t).data, clean)
    z_pert = _forward_batched(lambda t: enc.encode_image(t).data, perturbed)

    def top(z):
        sims = z @ a_t.T
        return np.argsort(-sims, axis=1, kind="stable")[:, :top_k]

    tc, tp = top(z_clean), top(z_pert)
    shifted = [set(a) != set(b) for a, b in zip(tc, tp)]
    return {"clean_topk": tc, "perturbed_topk": tp,
            "shift_rate": float(np.mean(shifted))}
