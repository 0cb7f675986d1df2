"""Pairwise prompt bank with least-similar retrieval.

One prompt per co-occurring class pair ("a photo depicts disk and
cross"), embedded once by a frozen encoder into a row matrix of unit
vectors. At attack time a uniform candidate subset is drawn and the row
least similar to the image embedding is the text target.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .binio import (atomic_write_bytes, atomic_write_text, payload_crc32,
                    read_tensor_record, write_tensor_record, _Reader)
from .errors import CompatibilityError, ConfigError, DataFormatError
from .nets import JointEncoder
from .tensor import no_grad

PROMPT_PREFIX = "a photo depicts"


@dataclass
class PromptBank:
    pairs: list            # [(i, j), ...] i < j, ordered by (i, j)
    prompts: list          # parallel prompt strings
    matrix: np.ndarray     # (P, K) float32, unit rows
    encoder_fingerprint: str
    k: int

    @property
    def size(self) -> int:
        return len(self.prompts)


def build_prompts(class_names: list[str], o_matrix: np.ndarray,
                  prefix: str = PROMPT_PREFIX) -> tuple[list, list]:
    """Prompt per set bit of the upper triangle of the co-occurrence
    matrix, in (i, j) lexicographic order."""
    c = len(class_names)
    if o_matrix.shape != (c, c):
        raise ConfigError(f"co-occurrence shape {o_matrix.shape} does not match "
                          f"{c} class names")
    if not np.array_equal(o_matrix, o_matrix.T):
        raise ConfigError("co-occurrence matrix must be symmetric")
    pairs = [(i, j) for i in range(c) for j in range(i + 1, c) if o_matrix[i, j]]
    if not pairs:
        raise ConfigError("no co-occurring class pairs; cannot build a prompt bank")
    prompts = [f"{prefix} {class_names[i]} and {class_names[j]}" for i, j in pairs]
    return pairs, prompts


def build_bank(encoder: JointEncoder, encoder_path, class_names: list[str],
               o_matrix: np.ndarray, prefix: str = PROMPT_PREFIX) -> PromptBank:
    pairs, prompts = build_prompts(class_names, o_matrix, prefix)
    with no_grad():
        matrix = encoder.encode_text(prompts).data.astype(np.float32)
    return PromptBank(pairs=pairs, prompts=prompts, matrix=matrix,
                      encoder_fingerprint=payload_crc32(encoder_path), k=matrix.shape[1])


def save_bank(bank: PromptBank, path) -> None:
    buf = io.BytesIO()
    write_tensor_record(buf, "A_t", bank.matrix)
    payload = buf.getvalue()
    atomic_write_bytes(path, payload + struct.pack("<I", zlib.crc32(payload)))
    header = {
        "pairs": [list(p) for p in bank.pairs],
        "prompts": bank.prompts,
        "encoder_fingerprint": bank.encoder_fingerprint,
        "k": bank.k,
        "p": bank.size,
    }
    atomic_write_text(Path(str(path) + ".json"),
                      json.dumps(header, sort_keys=True, indent=1) + "\n")


def load_bank(path) -> PromptBank:
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"no such prompt bank {path}")
    data = path.read_bytes()
    if len(data) < 8:
        raise DataFormatError(f"truncated prompt bank {path}")
    stored = struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(data[:-4]) != stored:
        raise DataFormatError(f"checksum mismatch in {path}")
    r = _Reader(data[:-4], f"prompt bank {path}")
    name, matrix = read_tensor_record(r)
    if name != "A_t" or matrix.ndim != 2 or r.pos != len(r.data):
        raise DataFormatError(f"malformed prompt bank {path}")
    side = Path(str(path) + ".json")
    if not side.exists():
        raise DataFormatError(f"missing prompt bank header {side}")
    header = json.loads(side.read_text("utf-8"))
    if len(header["prompts"]) != matrix.shape[0] or header["k"] != matrix.shape[1]:
        raise DataFormatError(f"prompt bank header disagrees with matrix in {path}")
    return PromptBank(pairs=[tuple(p) for p in header["pairs"]],
                      prompts=list(header["prompts"]),
                      matrix=matrix,
                      encoder_fingerprint=header["encoder_fingerprint"],
                      k=int(header["k"]))


def verify_bank_matches_encoder(bank: PromptBank, encoder_path) -> None:
    actual = payload_crc32(encoder_path)
    if actual != bank.encoder_fingerprint:
        raise CompatibilityError(
            f"prompt bank was built with encoder {bank.encoder_fingerprint}, "
            f"got {actual}; rebuild the bank")


def sample_candidates(bank: PromptBank, b: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform candidate rows; without replacement while b <= bank size."""
    if b < 1:
        raise ConfigError(f"candidate count must be >= 1, got {b}")
    return rng.choice(bank.size, size=b, replace=b > bank.size)


def least_similar(rho_img: np.ndarray, bank: PromptBank,
                  candidates: np.ndarray) -> tuple[int, np.ndarray]:
    """Candidate row whose cosine to the image embedding is smallest;
    exact ties resolve to the lowest row index."""
    candidates = np.asarray(candidates, dtype=np.int64)
    if candidates.ndim != 1 or len(candidates) == 0:
        raise ConfigError("candidates must be a nonempty 1-D index array")
    rho = np.asarray(rho_img, dtype=np.float32)
    # multiply-then-reduce, not BLAS matvec: gemv rounds identical rows
    # differently by block position, which would destroy exact ties
    sims = (bank.matrix[candidates] * rho).sum(axis=1)
    row = int(candidates[sims == sims.min()].min())
    return row, bank.matrix[row]
