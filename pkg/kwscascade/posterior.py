import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from kwscascade import tensorio
from kwscascade.exceptions import BlankTokenError, DimensionMismatchError, FormatError
from kwscascade.phoneme import PhonemeInventory, TokenSequence

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

ROW_SUM_TOLERANCE = 1e-6
LOAD_RENORMALIZE_TOLERANCE = 1e-4
DEFAULT_FRAME_PERIOD = 0.01
DEFAULT_EMBEDDING_DIM = 16
CODEBOOK_SEED = 0


def _frozen(values: np.ndarray) -> np.ndarray:
    values = np.array(values, dtype=np.float64)
    values.setflags(write=False)
    return values


@dataclass(frozen=True, eq=False)
class PosteriorGram:
    probs: np.ndarray
    frame_period: float = DEFAULT_FRAME_PERIOD

    def __post_init__(self) -> None:
        probs = _frozen(self.probs)
        if probs.ndim != 2:
            raise DimensionMismatchError(f"Posteriorgram must be T x V, got shape {probs.shape}")
        if probs.size and (not np.all(np.isfinite(probs)) or probs.min() < 0.0 or probs.max() > 1.0 + 1e-9):
            raise FormatError("Posterior entries must lie in [0, 1]")
        sums = probs.sum(axis=1)
        bad = np.flatnonzero(np.abs(sums - 1.0) > ROW_SUM_TOLERANCE)
        if bad.size:
            raise FormatError(f"Posterior row {bad[0] + 1} sums to {sums[bad[0]]:.8f}, not 1")
        object.__setattr__(self, "probs", probs)

    @property
    def frames(self) -> int:
        return self.probs.shape[0]

    @property
    def vocab(self) -> int:
        return self.probs.shape[1]

    @property
    def hours(self) -> float:
        return self.frames * self.frame_period / 3600.0


@dataclass(frozen=True, eq=False)
class EmbeddingMatrix:
    values: np.ndarray

    def __post_init__(self) -> None:
        values = _frozen(self.values)
        if values.ndim != 2 or values.shape[1] < 1:
            raise DimensionMismatchError(f"Embeddings must be T x d with d > 0, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise FormatError("Embedding values must be finite")
        object.__setattr__(self, "values", values)

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def __len__(self) -> int:
        return self.frames


@dataclass(frozen=True)
class SynthSpec:
    tokens: TokenSequence
    frames_per_token: int = 2
    blank_frames: int = 1
    alpha: float = 0.0
    seed: int = 0
    dim: int = DEFAULT_EMBEDDING_DIM

    def __post_init__(self) -> None:
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if self.frames_per_token < 1:
            raise ValueError(f"frames_per_token must be >= 1, got {self.frames_per_token}")
        if self.blank_frames < 0:
            raise ValueError(f"blank_frames must be >= 0, got {self.blank_frames}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")


def check_vocab(p: PosteriorGram, inventory: Optional[PhonemeInventory]) -> None:
    if inventory is not None and p.vocab != inventory.size:
        raise DimensionMismatchError(f"Posterior vocab {p.vocab} != inventory size {inventory.size}")


def load_posteriors(
    path: PathLike, inventory: Optional[PhonemeInventory] = None, frame_period: float = DEFAULT_FRAME_PERIOD
) -> PosteriorGram:
    if tensorio.is_csv(path):
        probs = tensorio.read_matrix_csv(path)
    else:
        probs = tensorio.read_matrix(path, tensorio.POSTERIOR_MAGIC)
    if probs.size and (probs.min() < 0.0 or probs.max() > 1.0 + 1e-6):
        raise FormatError(f"{path}: posterior entries must lie in [0, 1]")
    sums = probs.sum(axis=1)
    drift = np.abs(sums - 1.0)
    bad = np.flatnonzero(drift > LOAD_RENORMALIZE_TOLERANCE)
    if bad.size:
        raise FormatError(f"{path}: row {bad[0] + 1} sums to {sums[bad[0]]:.6f}")
    fix = drift > ROW_SUM_TOLERANCE
    if fix.any():
        logger.debug("%s: renormalizing %d rows", path, int(fix.sum()))
        probs[fix] /= sums[fix, None]
    p = PosteriorGram(probs, frame_period=frame_period)
    check_vocab(p, inventory)
    return p


def save_posteriors(p: PosteriorGram, path: PathLike) -> None:
    if tensorio.is_csv(path):
        tensorio.write_matrix_csv(path, p.probs)
    else:
        tensorio.write_matrix(path, tensorio.POSTERIOR_MAGIC, p.probs)


def load_embeddings(path: PathLike) -> EmbeddingMatrix:
    if tensorio.is_csv(path):
        return EmbeddingMatrix(tensorio.read_matrix_csv(path))
    return EmbeddingMatrix(tensorio.read_matrix(path, tensorio.EMBEDDING_MAGIC))


def save_embeddings(e: EmbeddingMatrix, path: PathLike) -> None:
    if tensorio.is_csv(path):
        tensorio.write_matrix_csv(path, e.values)
    else:
        tensorio.write_matrix(path, tensorio.EMBEDDING_MAGIC, e.values)


def prototype_table(vocab: int, dim: int) -> np.ndarray:
    """Per-token embedding codebook.

    One-hot rows when every token fits in ``dim``.  Otherwise (the default
    71-symbol inventory at ``dim=16``) truncated one-hots would map every token
    id >= ``dim`` to the zero vector, so the rows are unit-norm Gaussian draws
    from ``CODEBOOK_SEED``: distinct tokens stay near-orthogonal but not exactly
    so, and the blank gets a row of its own like any other symbol.
    """
    if vocab <= dim:
        return np.eye(vocab, dim)
    rng = np.random.default_rng(CODEBOOK_SEED)
    table = rng.standard_normal((vocab, dim))
    return table / np.linalg.norm(table, axis=1, keepdims=True)


def synth(spec: SynthSpec, inventory: PhonemeInventory) -> Tuple[PosteriorGram, EmbeddingMatrix]:
    if inventory.blank_id in spec.tokens:
        raise BlankTokenError("Synthetic token sequence must not contain the blank")
    inventory.check_tokens(spec.tokens)
    vocab = inventory.size
    blank = inventory.blank_id

    path = [blank] * spec.blank_frames
    for token in spec.tokens:
        path += [token] * spec.frames_per_token
        path += [blank] * spec.blank_frames
    labels = np.asarray(path, dtype=np.int64)

    probs = np.full((labels.size, vocab), spec.alpha / vocab)
    probs[np.arange(labels.size), labels] += 1.0 - spec.alpha

    rng = np.random.default_rng(spec.seed)
    noise = rng.uniform(-1.0, 1.0, size=(labels.size, spec.dim))
    values = prototype_table(vocab, spec.dim)[labels] + spec.alpha * noise
    return PosteriorGram(probs), EmbeddingMatrix(values)


def perturb_uniform(p: PosteriorGram, alpha: float) -> PosteriorGram:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if alpha == 0.0:
        return p
    return PosteriorGram((1.0 - alpha) * p.probs + alpha / p.vocab, frame_period=p.frame_period)


def greedy_decode(p: PosteriorGram, inventory: PhonemeInventory) -> TokenSequence:
    check_vocab(p, inventory)
    best = np.argmax(p.probs, axis=1)
    out = []
    prev = None
    for token in best.tolist():
        if token != prev and token != inventory.blank_id:
            out.append(token)
        prev = token
    return tuple(out)
