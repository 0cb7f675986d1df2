"""Model families: multi-label scene classifiers (three architectures),
a two-tower image/text encoder, and the bounded perturbation generator.

All models are plain parameter dictionaries plus a forward function on
the tape engine. Classifier feature vectors come from global average
pooling of the final 64-channel conv stack, so their width always equals
the encoder embedding width.
"""

from __future__ import annotations

import zlib

import numpy as np

from . import tensor as gt
from .binio import load_checkpoint, save_checkpoint
from .errors import CompatibilityError, ConfigError
from .tensor import Tensor

K_EMBED = 64
ARCH_NAMES = {0: "shallow_wide", 1: "deep_narrow", 2: "custom_block"}
ARCH_IDS = {v: k for k, v in ARCH_NAMES.items()}
GENERATOR_ARCH_ID = 0
ENCODER_ARCH_ID = 0
PREFIX_TOKENS = ("a", "photo", "depicts", "and")


def _he_conv(rng: np.random.Generator, co: int, ci: int, k: int) -> Tensor:
    std = np.sqrt(2.0 / (ci * k * k))
    return Tensor(rng.normal(0.0, std, (co, ci, k, k)).astype(np.float32),
                  requires_grad=True)


def _he_linear(rng: np.random.Generator, fin: int, fout: int) -> Tensor:
    std = np.sqrt(2.0 / fin)
    return Tensor(rng.normal(0.0, std, (fin, fout)).astype(np.float32),
                  requires_grad=True)


def _zeros(*shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)


class _Model:
    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def param_list(self) -> list[Tensor]:
        return list(self.params.values())

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        if set(tensors) != set(self.params):
            missing = set(self.params) - set(tensors)
            extra = set(tensors) - set(self.params)
            raise CompatibilityError(f"parameter names mismatch: missing {sorted(missing)}, "
                                     f"unexpected {sorted(extra)}")
        for k, arr in tensors.items():
            if arr.shape != self.params[k].data.shape:
                raise CompatibilityError(f"shape mismatch for {k}: "
                                         f"{arr.shape} vs {self.params[k].data.shape}")
            self.params[k].data = arr.astype(np.float32)

    def weight_checksum(self) -> str:
        crc = 0
        for name in sorted(self.params):
            crc = zlib.crc32(name.encode(), crc)
            crc = zlib.crc32(np.ascontiguousarray(self.params[name].data, "<f4").tobytes(), crc)
        return f"{crc:08x}"


def _conv_block(x: Tensor, w: Tensor, b: Tensor, stride: int,
                slope: float = 0.2, gain: float = 1.0) -> Tensor:
    c = w.shape[0]
    h = gt.conv2d(x, w, stride=stride, pad=1)
    h = gt.add(h, b.reshape(1, c, 1, 1))
    return gt.leaky_relu(h, slope, gain)


class SurrogateClassifier(_Model):
    """Multi-label glyph classifier. forward() returns (logits, feature):
    the feature is the pre-normalization GAP vector of width 64."""

    kind = "surrogate"

    def __init__(self, n_classes: int, architecture_id: int, rng: np.random.Generator):
        super().__init__()
        if architecture_id not in ARCH_NAMES:
            raise ConfigError(f"unknown architecture_id {architecture_id}")
        self.n_classes = n_classes
        self.architecture_id = architecture_id
        self.k = K_EMBED
        p = self.params
        if architecture_id == 0:    # shallow_wide: two wide strided convs
            p["c1.w"] = _he_conv(rng, 32, 3, 3)
            p["c1.b"] = _zeros(32)
            p["c2.w"] = _he_conv(rng, K_EMBED, 32, 3)
            p["c2.b"] = _zeros(K_EMBED)
        elif architecture_id == 1:  # deep_narrow: three narrow strided convs
            p["c1.w"] = _he_conv(rng, 16, 3, 3)
            p["c1.b"] = _zeros(16)
            p["c2.w"] = _he_conv(rng, 32, 16, 3)
            p["c2.b"] = _zeros(32)
            p["c3.w"] = _he_conv(rng, K_EMBED, 32, 3)
            p["c3.b"] = _zeros(K_EMBED)
        else:                        # custom_block: stem + residual + exit conv
            p["c1.w"] = _he_conv(rng, 24, 3, 3)
            p["c1.b"] = _zeros(24)
            p["r1.w"] = _he_conv(rng, 24, 24, 3)
            p["r1.b"] = _zeros(24)
            p["c2.w"] = _he_conv(rng, K_EMBED, 24, 3)
            p["c2.b"] = _zeros(K_EMBED)
        p["head.w"] = _he_linear(rng, K_EMBED, n_classes)
        p["head.b"] = _zeros(n_classes)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        p = self.params
        if self.architecture_id == 0:
            h = _conv_block(x, p["c1.w"], p["c1.b"], stride=2)
            h = _conv_block(h, p["c2.w"], p["c2.b"], stride=2)
        elif self.architecture_id == 1:
            h = _conv_block(x, p["c1.w"], p["c1.b"], stride=2)
            h = _conv_block(h, p["c2.w"], p["c2.b"], stride=2)
            h = _conv_block(h, p["c3.w"], p["c3.b"], stride=2)
        else:
            h = _conv_block(x, p["c1.w"], p["c1.b"], stride=2)
            r = _conv_block(h, p["r1.w"], p["r1.b"], stride=1)
            h = gt.add(h, r)
            h = _conv_block(h, p["c2.w"], p["c2.b"], stride=2)
        feat = h.mean(axis=(2, 3))
        logits = gt.add(gt.matmul(feat, p["head.w"]),
                        p["head.b"].reshape(1, self.n_classes))
        return logits, feat

    def save(self, path, meta: dict) -> None:
        save_checkpoint(path, self.kind, self.architecture_id, self.state(),
                        dict(meta, n_classes=self.n_classes, k=self.k,
                             architecture=ARCH_NAMES[self.architecture_id]))

    @classmethod
    def load(cls, path) -> tuple["SurrogateClassifier", dict]:
        kind, arch_id, tensors, meta = load_checkpoint(path)
        if kind != cls.kind:
            raise CompatibilityError(f"{path} holds a {kind}, expected {cls.kind}")
        model = cls(int(meta["n_classes"]), arch_id, np.random.default_rng(0))
        model.load_state(tensors)
        return model, meta


class JointEncoder(_Model):
    """Two-tower image/text encoder with a shared 64-dim embedding space.

    Text is mean-pooled token embeddings through a small MLP, which is
    order-insensitive; the vocabulary is the class names plus the fixed
    prompt prefix words. Both encode_* outputs are unit-normalized.
    """

    kind = "encoder"

    def __init__(self, vocab: list[str], rng: np.random.Generator,
                 k: int = K_EMBED, emb_dim: int = 32):
        super().__init__()
        if len(set(vocab)) != len(vocab):
            raise ConfigError("vocabulary has duplicate tokens")
        self.vocab = list(vocab)
        self.token_index = {t: i for i, t in enumerate(self.vocab)}
        self.k = k
        self.emb_dim = emb_dim
        p = self.params
        p["img.c1.w"] = _he_conv(rng, 16, 3, 3)
        p["img.c1.b"] = _zeros(16)
        p["img.c2.w"] = _he_conv(rng, 32, 16, 3)
        p["img.c2.b"] = _zeros(32)
        p["img.c3.w"] = _he_conv(rng, K_EMBED, 32, 3)
        p["img.c3.b"] = _zeros(K_EMBED)
        p["img.proj.w"] = _he_linear(rng, K_EMBED, k)
        p["img.proj.b"] = _zeros(k)
        p["txt.table"] = Tensor(rng.normal(0.0, 0.2, (len(vocab), emb_dim))
                                .astype(np.float32), requires_grad=True)
        p["txt.l1.w"] = _he_linear(rng, emb_dim, K_EMBED)
        p["txt.l1.b"] = _zeros(K_EMBED)
        p["txt.l2.w"] = _he_linear(rng, K_EMBED, k)
        p["txt.l2.b"] = _zeros(k)
        p["log_temp"] = Tensor(np.array([np.log(0.07)], dtype=np.float32),
                               requires_grad=True)

    TEMP_BOUNDS = (1e-3, 100.0)

    @property
    def temperature(self) -> float:
        return float(np.exp(self.params["log_temp"].data[0]))

    def clamp_temperature(self) -> None:
        lo, hi = self.TEMP_BOUNDS
        self.params["log_temp"].data = np.clip(
            self.params["log_temp"].data, np.log(lo), np.log(hi)).astype(np.float32)

    def encode_image(self, x: Tensor) -> Tensor:
        p = self.params
        h = _conv_block(x, p["img.c1.w"], p["img.c1.b"], stride=2)
        h = _conv_block(h, p["img.c2.w"], p["img.c2.b"], stride=2)
        h = _conv_block(h, p["img.c3.w"], p["img.c3.b"], stride=2)
        h = h.mean(axis=(2, 3))
        z = gt.add(gt.matmul(h, p["img.proj.w"]), p["img.proj.b"].reshape(1, self.k))
        return gt.normalize_l2(z, axis=-1)

    def bag_of_words(self, prompts: list[str]) -> np.ndarray:
        rows = np.zeros((len(prompts), len(self.vocab)), dtype=np.float32)
        for r, text in enumerate(prompts):
            tokens = text.strip().lower().split()
            if not tokens:
                raise ConfigError("empty prompt")
            for tok in tokens:
                idx = self.token_index.get(tok)
                if idx is None:
                    raise ConfigError(f"unknown token {tok!r} (vocabulary: {self.vocab})")
                rows[r, idx] += 1.0
            rows[r] /= len(tokens)
        return rows

    def encode_text(self, prompts: list[str]) -> Tensor:
        p = self.params
        bow = Tensor(self.bag_of_words(prompts))
        h = gt.matmul(bow, p["txt.table"])
        h = gt.leaky_relu(gt.add(gt.matmul(h, p["txt.l1.w"]),
                                 p["txt.l1.b"].reshape(1, K_EMBED)), 0.2)
        z = gt.add(gt.matmul(h, p["txt.l2.w"]), p["txt.l2.b"].reshape(1, self.k))
        return gt.normalize_l2(z, axis=-1)

    def save(self, path, meta: dict) -> None:
        save_checkpoint(path, self.kind, ENCODER_ARCH_ID, self.state(),
                        dict(meta, vocab=self.vocab, k=self.k, emb_dim=self.emb_dim))

    @classmethod
    def load(cls, path) -> tuple["JointEncoder", dict]:
        kind, _, tensors, meta = load_checkpoint(path)
        if kind != cls.kind:
            raise CompatibilityError(f"{path} holds a {kind}, expected {cls.kind}")
        model = cls(list(meta["vocab"]), np.random.default_rng(0),
                    k=int(meta["k"]), emb_dim=int(meta["emb_dim"]))
        model.load_state(tensors)
        return model, meta


class PerturbationGenerator(_Model):
    """Encoder-decoder that emits a full replacement image through a
    scaled tanh, then projects it into the L-inf ball around the input
    and back into [0, 1]. The projection is differentiable (pass-through
    inside the box), so training sees exactly what evaluation emits."""

    kind = "generator"
    SLOPE = 0.2
    GAIN = float(np.sqrt(2.0))

    def __init__(self, rng: np.random.Generator):
        super().__init__()
        self.architecture_id = GENERATOR_ARCH_ID
        p = self.params
        p["e1.w"] = _he_conv(rng, 16, 3, 3)
        p["e1.b"] = _zeros(16)
        p["e2.w"] = _he_conv(rng, 32, 16, 3)
        p["e2.b"] = _zeros(32)
        p["e3.w"] = _he_conv(rng, 32, 32, 3)
        p["e3.b"] = _zeros(32)
        for i in (1, 2):
            p[f"r{i}.a.w"] = _he_conv(rng, 32, 32, 3)
            p[f"r{i}.a.b"] = _zeros(32)
            p[f"r{i}.b.w"] = _he_conv(rng, 32, 32, 3)
            p[f"r{i}.b.b"] = _zeros(32)
        p["u1.w"] = _he_conv(rng, 16, 32, 3)
        p["u1.b"] = _zeros(16)
        p["u2.w"] = _he_conv(rng, 16, 16, 3)
        p["u2.b"] = _zeros(16)
        # reduced-scale head: He init here would put the pre-tanh values
        # at |13| or more, saturating the squash and starving the ball
        # projection of in-range pixels at the start of training
        p["out.w"] = Tensor(_he_conv(rng, 3, 16, 3).data * 0.05,
                            requires_grad=True)
        p["out.b"] = _zeros(3)

    def _block(self, x, wname, stride):
        return _conv_block(x, self.params[wname + ".w"], self.params[wname + ".b"],
                           stride=stride, slope=self.SLOPE, gain=self.GAIN)

    def raw_output(self, x: Tensor) -> Tensor:
        p = self.params
        h = self._block(x, "e1", 1)
        h = self._block(h, "e2", 2)
        h = self._block(h, "e3", 2)
        for i in (1, 2):
            r = self._block(h, f"r{i}.a", 1)
            r = gt.add(gt.conv2d(r, p[f"r{i}.b.w"], stride=1, pad=1),
                       p[f"r{i}.b.b"].reshape(1, 32, 1, 1))
            h = gt.leaky_relu(gt.add(h, r), self.SLOPE, self.GAIN)
        h = self._block(gt.upsample2x(h), "u1", 1)
        h = self._block(gt.upsample2x(h), "u2", 1)
        o = gt.add(gt.conv2d(h, p["out.w"], stride=1, pad=1),
                   p["out.b"].reshape(1, 3, 1, 1))
        # input skip in pre-squash space: with the reduced-scale head the
        # net starts out emitting (almost) the input itself, so every
        # pixel begins inside the projection ball with a live gradient.
        # A cold start from mid-gray puts nearly all pixels outside the
        # ball, where the clamp silences them for good.
        anchor = np.arctanh(np.clip(2.0 * x.data - 1.0, -0.999, 0.999))
        o = gt.add(o, Tensor(anchor.astype(np.float32)))
        return gt.mul(gt.add(gt.tanh(o), 1.0), 0.5)

    def forward(self, x: Tensor, eps: float) -> Tensor:
        if not 0.0 < eps < 1.0:
            raise ConfigError(f"eps must be in (0, 1), got {eps}")
        return gt.ball_project(self.raw_output(x), x.data, eps)

    def save(self, path, meta: dict) -> None:
        save_checkpoint(path, self.kind, self.architecture_id, self.state(), dict(meta))

    @classmethod
    def load(cls, path) -> tuple["PerturbationGenerator", dict]:
        kind, _, tensors, meta = load_checkpoint(path)
        if kind != cls.kind:
            raise CompatibilityError(f"{path} holds a {kind}, expected {cls.kind}")
        model = cls(np.random.default_rng(0))
        model.load_state(tensors)
        return model, meta


def build_vocab(class_names: list[str]) -> list[str]:
    return list(PREFIX_TOKENS) + list(class_names)


def load_any(path):
    """Load a checkpoint by sniffing its kind byte."""
    kind, _, _, _ = load_checkpoint(path)
    return {"surrogate": SurrogateClassifier, "encoder": JointEncoder,
            "generator": PerturbationGenerator}[kind].load(path)
