"""Synthetic evaluation corpora: keyword positives and confusable negatives."""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import List, Sequence, Tuple

import editdistance
import numpy as np

from kwscascade.ctc_search import KeywordSpec
from kwscascade.exceptions import ConfigError
from kwscascade.phoneme import PhonemeInventory, TokenSequence
from kwscascade.posterior import EmbeddingMatrix, PosteriorGram, SynthSpec, synth

logger = logging.getLogger(__name__)


class NegativeKind(str, Enum):
    substitution = "substitution"
    insertion = "insertion"
    deletion = "deletion"
    shared_prefix = "shared_prefix"
    easy = "easy"


HARD_KINDS = (NegativeKind.substitution, NegativeKind.insertion, NegativeKind.deletion)


def _other_token(inventory: PhonemeInventory, rng: np.random.Generator, exclude: Sequence[int]) -> int:
    choices = [i for i in range(inventory.size) if i != inventory.blank_id and i not in exclude]
    return int(rng.choice(choices))


def make_confusable(
    tokens: Sequence[int], kind: NegativeKind, inventory: PhonemeInventory, rng: np.random.Generator
) -> TokenSequence:
    """A token sequence confusable with ``tokens``.

    substitution/insertion/deletion are exactly one edit away, with insertions
    kept between phonemes so the keyword never survives intact; shared_prefix
    extends the keyword; easy shares no phoneme with it.
    """
    tokens = list(tokens)
    kind = NegativeKind(kind)
    if kind in (NegativeKind.deletion, NegativeKind.insertion) and len(tokens) < 2:
        kind = NegativeKind.substitution
    if kind is NegativeKind.substitution:
        pos = int(rng.integers(len(tokens)))
        neighbours = tokens[max(pos - 1, 0) : pos + 2]
        tokens[pos] = _other_token(inventory, rng, neighbours)
    elif kind is NegativeKind.insertion:
        pos = int(rng.integers(1, len(tokens)))
        neighbours = tokens[max(pos - 1, 0) : pos + 1]
        tokens.insert(pos, _other_token(inventory, rng, neighbours))
    elif kind is NegativeKind.deletion:
        del tokens[int(rng.integers(len(tokens)))]
    elif kind is NegativeKind.shared_prefix:
        tokens += [_other_token(inventory, rng, tokens[-1:]) for _ in range(int(rng.integers(1, 3)))]
    else:
        tokens = [_other_token(inventory, rng, tokens) for _ in range(len(tokens))]
    return tuple(tokens)


def confusable_at_distance(
    tokens: Sequence[int],
    distance: int,
    inventory: PhonemeInventory,
    rng: np.random.Generator,
    kinds: Sequence[NegativeKind] = HARD_KINDS,
    max_tries: int = 100,
) -> TokenSequence:
    """Chain ``distance`` one-edit confusions until the result sits exactly that far from ``tokens``."""
    if distance < 1:
        raise ConfigError(f"Confusable distance must be >= 1, got {distance}")
    for _ in range(max_tries):
        out = tuple(tokens)
        for _ in range(distance):
            out = make_confusable(out, kinds[int(rng.integers(len(kinds)))], inventory, rng)
        if editdistance.eval(list(tokens), list(out)) == distance:
            return out
    raise ConfigError(f"Could not build a confusable at edit distance {distance} from {tuple(tokens)}")


@dataclass(frozen=True, eq=False)
class Utterance:
    name: str
    keyword: KeywordSpec
    label: int
    tokens: TokenSequence
    posteriors: PosteriorGram
    embeddings: EmbeddingMatrix
    kind: str = "positive"


def build_corpus(
    keywords: Sequence[KeywordSpec],
    inventory: PhonemeInventory,
    n_pos: int,
    n_neg: int,
    alpha: float = 0.1,
    seed: int = 0,
    kinds: Sequence[NegativeKind] = HARD_KINDS,
    distance: int = 1,
    frames_per_token: int = 2,
    blank_frames: int = 1,
    dim: int = 16,
) -> List[Utterance]:
    rng = np.random.default_rng(seed)
    corpus = []
    for k, keyword in enumerate(keywords):
        plans: List[Tuple[int, str, TokenSequence]] = [(1, "positive", keyword.tokens)] * n_pos
        for i in range(n_neg):
            kind = NegativeKind(kinds[i % len(kinds)])
            if distance > 1 and kind in HARD_KINDS:
                tokens = confusable_at_distance(keyword.tokens, distance, inventory, rng, (kind,))
            else:
                tokens = make_confusable(keyword.tokens, kind, inventory, rng)
            plans.append((0, kind.value, tokens))
        for i, (label, kind, tokens) in enumerate(plans):
            spec = SynthSpec(
                tokens=tokens,
                frames_per_token=frames_per_token,
                blank_frames=blank_frames,
                alpha=alpha,
                seed=int(rng.integers(2**31)),
                dim=dim,
            )
            posteriors, embeddings = synth(spec, inventory)
            corpus.append(Utterance(f"kw{k:02d}_{kind}_{i:03d}", keyword, label, tokens, posteriors, embeddings, kind))
    logger.debug("Built synthetic corpus of %d utterances for %d keywords", len(corpus), len(keywords))
    return corpus
