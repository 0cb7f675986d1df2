"""Command-line front door.

Every subcommand resolves its configuration the same way: built-in
defaults, then a JSON config file (--config), then explicit flags, and
finally the GAMA_SEED environment variable for the seed. Each run
writes exactly one manifest JSON next to its primary output recording
the resolved config, input checksums, and output checksums, so a rerun
with identical inputs can be verified byte for byte.

Exit codes: 0 success, 2 config error, 3 data error, 4 artifact
compatibility error, 1 internal failure.
"""

from __future__ import annotations

import argparse
import json
import os
import struct
import sys
import time
import zlib
from pathlib import Path

import numpy as np

from . import __version__
from .binio import CHECKPOINT_VERSION, atomic_write_text, payload_crc32
from .defenses import pgd_train
from .errors import (CompatibilityError, ConfigError, DataFormatError,
                     GamaError)
from .evaluate import (REPORT_HEADER, VictimSpec, evaluate_attack,
                       perturb_batched, report_csv)
from .losses import BANK_METHODS, ENCODER_METHODS, METHODS
from .metrics import (context_consistency_score, cooccurrence_of_predictions,
                      hamming_score, predict_multilabel)
from .nets import JointEncoder, PerturbationGenerator, SurrogateClassifier
from .pca import pca_export_csv, pca_top2
from .promptbank import (PROMPT_PREFIX, build_bank, load_bank, save_bank,
                         verify_bank_matches_encoder)
from .rng import Streams
from .scenegen import (DATASET_VERSION, DISTRIBUTIONS, DatasetConfig,
                       compute_cooccurrence, generate_dataset, load_dataset,
                       save_dataset)
from .tensor import Tensor, no_grad
from .train import (encoder_mean_rank, pretrain_joint_encoder,
                    train_generator, train_surrogate)

ABLATION_ARMS = (("ablate_img_only", "L_i"),
                 ("ablate_img_txt", "L_i+L_t"),
                 ("gama", "L"))


# ---------------------------------------------------------------- plumbing

def _checksum(path) -> str:
    """Fingerprint of a file; self-checksummed containers are hashed on
    their payload so the stored trailer does not mask changes."""
    data = Path(path).read_bytes()
    if len(data) >= 8 and struct.unpack("<I", data[-4:])[0] == zlib.crc32(data[:-4]):
        return f"{zlib.crc32(data[:-4]):08x}"
    return f"{zlib.crc32(data):08x}"


def _resolve(args, defaults: dict) -> dict:
    """defaults < JSON config file < flags < GAMA_SEED (seed only)."""
    cfg = dict(defaults)
    config_path = getattr(args, "config", None)
    if config_path:
        p = Path(config_path)
        if not p.exists():
            raise DataFormatError(f"config file not found: {p}")
        try:
            loaded = json.loads(p.read_text("utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {p} is not valid JSON: {e}") from e
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {p} must hold a JSON object")
        for key in loaded:
            if key not in defaults:
                raise ConfigError(f"unknown config field {key!r} in {p}; "
                                  f"known: {sorted(defaults)}")
        cfg.update(loaded)
    for key in defaults:
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    env = os.environ.get("GAMA_SEED")
    if env is not None and "seed" in cfg:
        try:
            cfg["seed"] = int(env)
        except ValueError:
            raise ConfigError(f"GAMA_SEED must be an integer, got {env!r}")
    return cfg


def _write_manifest(command: str, primary_out, cfg: dict,
                    inputs: list, outputs: list, t0: float) -> None:
    man = {
        "command": command,
        "config": {k: v for k, v in sorted(cfg.items())},
        "seed": cfg.get("seed"),
        "input_checksums": {str(p): _checksum(p) for p in inputs if p},
        "outputs": {str(p): _checksum(p) for p in outputs},
        "wall_clock_s": round(time.time() - t0, 3),
        "versions": {"package": __version__,
                     "checkpoint_format": CHECKPOINT_VERSION,
                     "dataset_format": DATASET_VERSION},
    }
    atomic_write_text(Path(str(primary_out) + ".manifest.json"),
                      json.dumps(man, indent=1, sort_keys=True) + "\n")


def _load_dataset(path) -> "SceneDataset":
    p = Path(path)
    if not p.exists():
        raise DataFormatError(f"dataset not found: {p}")
    return load_dataset(p)


def _hamming_on_split(model, dataset, split="test") -> float:
    images, labels = dataset.subset(split)
    preds = []
    with no_grad():
        for i in range(0, len(images), 64):
            preds.append(model.forward(Tensor(images[i:i + 64]))[0].data)
    return hamming_score(predict_multilabel(np.concatenate(preds)), labels)


# ------------------------------------------------------------- subcommands

def cmd_dataset(args) -> int:
    t0 = time.time()
    cfg = _resolve(args, dict(classes=6, samples=600, seed=0,
                              distribution="shapes-a", max_objects=4,
                              singleton_fraction=0.3, test_fraction=0.2,
                              pairs=None))
    pairs = "auto"
    if cfg["pairs"]:
        p = Path(cfg["pairs"])
        if not p.exists():
            raise DataFormatError(f"pairs file not found: {p}")
        try:
            pairs = [tuple(int(v) for v in pair)
                     for pair in json.loads(p.read_text("utf-8"))]
        except (json.JSONDecodeError, TypeError, ValueError) as e:
            raise DataFormatError(f"pairs file {p} must be a JSON list of "
                                  f"[i, j] pairs: {e}") from e
    ds = generate_dataset(DatasetConfig(
        n_classes=cfg["classes"], n_samples=cfg["samples"], seed=cfg["seed"],
        distribution_id=cfg["distribution"], max_objects=cfg["max_objects"],
        singleton_fraction=cfg["singleton_fraction"],
        test_fraction=cfg["test_fraction"], allowed_pairs=pairs))
    save_dataset(ds, args.out)
    o = compute_cooccurrence(ds)
    print(f"dataset {args.out}: C={ds.n_classes} N={len(ds.images)} "
          f"dist={ds.distribution_id} pairs={len(ds.allowed_pairs)} "
          f"O-popcount={int(o.sum())} train/test "
          f"{len(ds.split_indices['train'])}/{len(ds.split_indices['test'])}")
    _write_manifest("dataset", args.out, cfg,
                    [args.config, cfg["pairs"]], [args.out], t0)
    return 0


def cmd_train_surrogate(args) -> int:
    t0 = time.time()
    cfg = _resolve(args, dict(arch=2, epochs=None, lr=1e-3, batch=32,
                              seed=0, pgd=None))
    ds = _load_dataset(args.dataset)
    kwargs = dict(lr=cfg["lr"], batch=cfg["batch"])
    if cfg["epochs"] is not None:
        kwargs["epochs"] = cfg["epochs"]
    trainer = pgd_train if cfg["pgd"] else train_surrogate
    model, history = trainer(ds, cfg["arch"], Streams(cfg["seed"]), **kwargs)
    score = _hamming_on_split(model, ds)
    model.save(args.out, {"seed": cfg["seed"], "epochs": len(history),
                          "distribution_id": ds.distribution_id,
                          "training": "pgd" if cfg["pgd"] else "bce"})
    print(f"surrogate arch={cfg['arch']}"
          f"{' (pgd-hardened)' if cfg['pgd'] else ''} "
          f"clean hamming {score:.1f}% -> {args.out}")
    _write_manifest("train-surrogate", args.out, cfg,
                    [args.config, args.dataset], [args.out], t0)
    return 0


def cmd_pretrain_encoder(args) -> int:
    t0 = time.time()
    cfg = _resolve(args, dict(epochs=20, lr=1e-3, batch=32, seed=0))
    ds = _load_dataset(args.dataset)
    enc, _ = pretrain_joint_encoder(ds, Streams(cfg["seed"]),
                                    epochs=cfg["epochs"], lr=cfg["lr"],
                                    batch=cfg["batch"])
    rank = encoder_mean_rank(enc, ds, Streams(cfg["seed"]))
    enc.save(args.out, {"seed": cfg["seed"], "epochs": cfg["epochs"],
                        "distribution_id": ds.distribution_id})
    print(f"encoder retrieval mean rank {rank:.2f} of 32 -> {args.out}")
    _write_manifest("pretrain-encoder", args.out, cfg,
                    [args.config, args.dataset], [args.out], t0)
    return 0


def cmd_build_bank(args) -> int:
    t0 = time.time()
    cfg = _resolve(args, dict(prefix=PROMPT_PREFIX, seed=0))
    enc, _ = JointEncoder.load(args.encoder)
    ds = _load_dataset(args.dataset)
    o = compute_cooccurrence(ds)
    if not o.any():
        raise DataFormatError(
            "dataset has no co-occurring class pairs; a prompt bank needs "
            "at least one pair (was it generated with max_objects=1?)")
    bank = build_bank(enc, args.encoder, ds.class_names, o, cfg["prefix"])
    save_bank(bank, args.out)
    print(f"prompt bank P={bank.size} K={bank.k} "
          f"prefix={cfg['prefix']!r} -> {args.out}")
    _write_manifest("build-bank", args.out, cfg,
                    [args.config, args.encoder, args.dataset],
                    [args.out, str(args.out) + ".json"], t0)
    return 0


def cmd_train_generator(args) -> int:
    t0 = time.time()
    cfg = _resolve(args, dict(method="gama", eps=10 / 255, alpha=1.0,
                              lr=1e-4, batch=16, epochs=10, seed=0,
                              candidate_b=16, candidate_resample="step"))
    method = cfg["method"]
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; known: {METHODS}")
    if method in ENCODER_METHODS and not args.encoder:
        raise ConfigError(f"method {method!r} uses the image-embedding loss; "
                          f"--encoder is required")
    if method in BANK_METHODS and not args.bank:
        raise ConfigError(f"method {method!r} uses the text-embedding loss; "
                          f"--bank is required")
    ds = _load_dataset(args.dataset)
    surrogates, fps = [], []
    for p in args.surrogate:
        model, _ = SurrogateClassifier.load(p)
        surrogates.append(model)
        fps.append(payload_crc32(p))
    encoder = bank = None
    if method in ENCODER_METHODS:
        encoder, _ = JointEncoder.load(args.encoder)
    if method in BANK_METHODS:
        bank = load_bank(args.bank)
        if args.encoder:
            verify_bank_matches_encoder(bank, args.encoder)
    gen, log = train_generator(
        ds, method, surrogates, Streams(cfg["seed"]), encoder=encoder,
        bank=bank, eps=cfg["eps"], alpha=cfg["alpha"], lr=cfg["lr"],
        batch=cfg["batch"], epochs=cfg["epochs"],
        candidate_b=cfg["candidate_b"],
        candidate_resample=cfg["candidate_resample"])
    meta = {"method": method, "seed": cfg["seed"], "eps": cfg["eps"],
            "alpha": cfg["alpha"], "epochs": cfg["epochs"], "lr": cfg["lr"],
            "batch": cfg["batch"], "distribution_id": ds.distribution_id,
            "generator_id": f"{method}-s{cfg['seed']}",
            "surrogate_id": "+".join(Path(p).stem for p in args.surrogate),
            "surrogate_fingerprints": fps,
            "ensemble": len(surrogates) > 1}
    gen.save(args.out, meta)
    log_path = args.log or str(args.out) + ".log.ndjson"
    atomic_write_text(Path(log_path),
                      "".join(json.dumps(r, sort_keys=True) + "\n" for r in log))
    mode = (f"ensemble({len(surrogates)} surrogates)"
            if len(surrogates) > 1 else "single surrogate")
    print(f"generator {meta['generator_id']} method={method} "
          f"alpha={cfg['alpha']} eps={cfg['eps']:.6f} {mode} "
          f"final loss {log[-1]['total']:+.4f} -> {args.out}")
    _write_manifest("train-generator", args.out, cfg,
                    [args.config, args.dataset, *args.surrogate,
                     args.encoder, args.bank],
                    [args.out, log_path], t0)
    return 0


def _load_victims(path, defense_override) -> list:
    p = Path(path)
    if not p.exists():
        raise DataFormatError(f"victims manifest not found: {p}")
    try:
        entries = json.loads(p.read_text("utf-8"))
    except json.JSONDecodeError as e:
        raise DataFormatError(f"victims manifest {p} is not valid JSON: {e}") from e
    if not isinstance(entries, list) or not entries:
        raise DataFormatError(f"victims manifest {p} must be a non-empty "
                              f"JSON list")
    victims = []
    for i, e in enumerate(entries):
        if not isinstance(e, dict) or "victim_id" not in e or "path" not in e:
            raise DataFormatError(f"victims manifest entry {i} needs at "
                                  f"least victim_id and path")
        if not Path(e["path"]).exists():
            raise DataFormatError(f"victim checkpoint not found: {e['path']}")
        spec = VictimSpec(victim_id=e["victim_id"], path=e["path"],
                          task=e.get("task", "multi_label"),
                          distribution_id=e.get("distribution_id", "shapes-a"),
                          defense=e.get("defense", "none"))
        if defense_override is not None:
            spec.defense = defense_override
        victims.append(spec)
    return victims


def cmd_evaluate(args) -> int:
    t0 = time.time()
    cfg = _resolve(args, dict(defense=None, seed=0))
    override = {"pgd": "pgd_trained"}.get(cfg["defense"], cfg["defense"])
    gen, meta = PerturbationGenerator.load(args.generator)
    if "eps" not in meta:
        raise DataFormatError(f"generator {args.generator} metadata carries "
                              f"no eps; retrain it through the CLI")
    victims = _load_victims(args.victims, override)
    ds = _load_dataset(args.dataset)
    rows, _ = evaluate_attack(gen, meta, victims, ds, float(meta["eps"]))
    atomic_write_text(Path(args.out), report_csv(rows))
    print(f"evaluated {meta.get('generator_id', 'generator')} on "
          f"{len(victims)} victims -> {args.out}")
    _write_manifest("evaluate", args.out, cfg,
                    [args.config, args.generator, args.victims, args.dataset,
                     *(v.path for v in victims)],
                    [args.out], t0)
    return 0


# ------------------------------------------------------------ report modes

def _read_report_rows(paths) -> list[dict]:
    rows = []
    for path in paths:
        p = Path(path)
        if not p.exists():
            raise DataFormatError(f"report CSV not found: {p}")
        lines = p.read_text("utf-8").strip().splitlines()
        if not lines or lines[0] != REPORT_HEADER:
            raise DataFormatError(f"{p} is not an attack report CSV "
                                  f"(bad header)")
        for ln in lines[1:]:
            parts = ln.split(",")
            if len(parts) != len(REPORT_HEADER.split(",")):
                raise DataFormatError(f"malformed row in {p}: {ln!r}")
            rows.append(dict(zip(REPORT_HEADER.split(","), parts)))
    if not rows:
        raise DataFormatError("no data rows in the given report CSVs")
    return rows


def _report_transfer_matrix(rows) -> str:
    victims = sorted({r["victim_id"] for r in rows})
    gens = sorted({r["generator_id"] for r in rows})
    cell = {}
    clean = {}
    for r in rows:
        cell[(r["generator_id"], r["victim_id"])] = float(r["attacked"])
        clean[r["victim_id"]] = float(r["clean"])
    for g in gens:
        for v in victims:
            if (g, v) not in cell:
                raise ConfigError(f"transfer matrix is incomplete: no row "
                                  f"for generator {g!r} on victim {v!r}")
    out = ["generator_id," + ",".join(victims) + ",Average"]
    base = [clean[v] for v in victims]
    out.append("no_attack," + ",".join(f"{x:.6f}" for x in base)
               + f",{np.mean(base):.6f}")
    for g in gens:
        vals = [cell[(g, v)] for v in victims]
        out.append(f"{g}," + ",".join(f"{x:.6f}" for x in vals)
                   + f",{np.mean(vals):.6f}")
    return "\n".join(out)


def _report_ablation(rows) -> str:
    black = [r for r in rows if r["scenario"] == "black"]
    if not black:
        raise ConfigError("ablation report needs black-box rows")
    out = ["arm,attacked"]
    for method, label in ABLATION_ARMS:
        vals = [float(r["attacked"]) for r in black
                if r["generator_id"].rsplit("-s", 1)[0] == method]
        if not vals:
            raise ConfigError(f"no black-box rows for ablation arm "
                              f"{method!r} ({label})")
        out.append(f"{label},{np.mean(vals):.6f}")
    return "\n".join(out)


def _report_context(args) -> str:
    if not (args.generator and args.victims and args.dataset):
        raise ConfigError("context mode recomputes predictions and needs "
                          "--generator, --victims, and --dataset")
    ds = _load_dataset(args.dataset)
    o = compute_cooccurrence(ds)
    victims = _load_victims(args.victims, None)
    out = ["generator_id,victim_id,context_score"]
    for gpath in args.generator:
        gen, meta = PerturbationGenerator.load(gpath)
        rows, detail = evaluate_attack(gen, meta, victims, ds,
                                       float(meta["eps"]), collect_detail=True)
        for r in rows:
            d = detail[r.victim_id]
            score = context_consistency_score(d["pred_attacked"], o,
                                              d["attacked_fraction"])
            out.append(f"{r.generator_id},{r.victim_id},{score:.6f}")
    return "\n".join(out)


def _report_pca(args) -> str:
    if not (args.generator and args.surrogate and args.dataset):
        raise ConfigError("pca mode needs --generator, --surrogate, and "
                          "--dataset")
    ds = _load_dataset(args.dataset)
    gen, meta = PerturbationGenerator.load(args.generator[0])
    sur, _ = SurrogateClassifier.load(args.surrogate[0])
    clean = ds.images[ds.split_indices["test"]]
    adv = perturb_batched(gen, clean, float(meta["eps"]))
    feats = []
    with no_grad():
        for block in (clean, adv):
            feats.append(np.concatenate(
                [sur.forward(Tensor(block[i:i + 64]))[1].data
                 for i in range(0, len(block), 64)]))
    stacked = np.concatenate(feats)
    groups = ["clean"] * len(feats[0]) + ["perturbed"] * len(feats[1])
    coords, _, _ = pca_top2(stacked)
    return pca_export_csv(coords, groups).rstrip("\n")


def cmd_report(args) -> int:
    t0 = time.time()
    cfg = _resolve(args, dict(mode=None, seed=0))
    mode = cfg["mode"]
    if mode in ("transfer_matrix", "ablation"):
        if not args.inputs:
            raise ConfigError(f"{mode} mode needs --inputs report CSVs")
        rows = _read_report_rows(args.inputs)
        text = (_report_transfer_matrix(rows) if mode == "transfer_matrix"
                else _report_ablation(rows))
    elif mode == "context":
        text = _report_context(args)
    elif mode == "pca":
        text = _report_pca(args)
    else:
        raise ConfigError(f"unknown report mode {mode!r}")
    atomic_write_text(Path(args.out), text + "\n")
    print(f"report mode={mode} -> {args.out}")
    inputs = list(args.inputs or [])
    inputs += list(args.generator or [])
    inputs += list(args.surrogate or [])
    for extra in (args.victims, args.dataset, args.config):
        if extra:
            inputs.append(extra)
    _write_manifest("report", args.out, cfg, inputs, [args.out], t0)
    return 0


# ---------------------------------------------------------------- parser

def _add_common(sp, *, dataset=True):
    sp.add_argument("--config", help="JSON config file; flags override it")
    sp.add_argument("--seed", type=int, help="master seed "
                    "(GAMA_SEED env var wins over this)")
    if dataset:
        sp.add_argument("--dataset", required=True, help="dataset file")
    sp.add_argument("--out", required=True, help="primary output path")


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="gama",
        description="Desk-scale feature-space attack laboratory")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("dataset", help="generate a synthetic scene dataset")
    _add_common(sp, dataset=False)
    sp.add_argument("--classes", type=int)
    sp.add_argument("--samples", type=int)
    sp.add_argument("--distribution", choices=sorted(DISTRIBUTIONS))
    sp.add_argument("--max-objects", type=int, dest="max_objects")
    sp.add_argument("--singleton-fraction", type=float,
                    dest="singleton_fraction")
    sp.add_argument("--test-fraction", type=float, dest="test_fraction")
    sp.add_argument("--pairs", help="JSON file of allowed [i, j] class pairs")
    sp.set_defaults(func=cmd_dataset)

    sp = sub.add_parser("train-surrogate", help="train a classifier")
    _add_common(sp)
    sp.add_argument("--arch", type=int, choices=(0, 1, 2))
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--batch", type=int)
    sp.add_argument("--pgd", action="store_true", default=None,
                    help="adversarial training (hardened victim)")
    sp.set_defaults(func=cmd_train_surrogate)

    sp = sub.add_parser("pretrain-encoder",
                        help="contrastive image/text encoder pretraining")
    _add_common(sp)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--batch", type=int)
    sp.set_defaults(func=cmd_pretrain_encoder)

    sp = sub.add_parser("build-bank", help="embed the pairwise prompt bank")
    _add_common(sp)
    sp.add_argument("--encoder", required=True)
    sp.add_argument("--prefix", help="prompt prefix shared by all prompts")
    sp.set_defaults(func=cmd_build_bank)

    sp = sub.add_parser("train-generator",
                        help="train the perturbation generator")
    _add_common(sp)
    sp.add_argument("--method", choices=METHODS)
    sp.add_argument("--surrogate", action="append", required=True,
                    help="surrogate checkpoint (repeat for an ensemble)")
    sp.add_argument("--encoder")
    sp.add_argument("--bank")
    sp.add_argument("--eps", type=float)
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--batch", type=int)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--candidate-b", type=int, dest="candidate_b")
    sp.add_argument("--candidate-resample", choices=("step", "epoch"),
                    dest="candidate_resample")
    sp.add_argument("--log", help="loss log path "
                    "(default: <out>.log.ndjson)")
    sp.set_defaults(func=cmd_train_generator)

    sp = sub.add_parser("evaluate", help="score victims clean vs attacked")
    _add_common(sp)
    sp.add_argument("--generator", required=True)
    sp.add_argument("--victims", required=True,
                    help="JSON list of victim specs")
    sp.add_argument("--defense", choices=("none", "median3", "pgd"),
                    help="override every victim's defense")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("report", help="aggregate evaluation outputs")
    sp.add_argument("--config", help="JSON config file; flags override it")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--mode", required=True,
                    choices=("transfer_matrix", "ablation", "context", "pca"))
    sp.add_argument("--inputs", nargs="*", help="attack report CSVs")
    sp.add_argument("--generator", action="append",
                    help="generator checkpoint (context/pca modes)")
    sp.add_argument("--surrogate", action="append",
                    help="surrogate checkpoint (pca mode)")
    sp.add_argument("--victims", help="victims manifest (context mode)")
    sp.add_argument("--dataset", help="dataset file (context/pca modes)")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_report)

    return ap


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (DataFormatError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except CompatibilityError as e:
        print(f"compatibility error: {e}", file=sys.stderr)
        return 4
    except GamaError as e:
        print(f"internal error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
