from pathlib import Path
from typing import Dict, Sequence, Tuple

import numpy as np
import pytest

from kwscascade.ctc_search import KeywordSpec
from kwscascade.phoneme import Lexicon, PhonemeInventory, default_inventory, save_lexicon
from kwscascade.posterior import EmbeddingMatrix, PosteriorGram, SynthSpec, synth

# no entry has the same phoneme twice in a row
WORDS: Dict[str, Tuple[str, ...]] = {
    "hi": ("HH", "AY1"),
    "hello": ("HH", "AH0", "L", "OW1"),
    "six": ("S", "IH1", "K", "S"),
    "rain": ("R", "EY1", "N"),
    "rainbow": ("R", "EY1", "N", "B", "OW2"),
    "alexa": ("AH0", "L", "EH1", "K", "S", "AH0"),
    "jarvis": ("JH", "AA1", "R", "V", "IH0", "S"),
    "marvin": ("M", "AA1", "R", "V", "IH0", "N"),
    "sheila": ("SH", "IY1", "L", "AH0"),
    "seven": ("S", "EH1", "V", "AH0", "N"),
    "forward": ("F", "AO1", "R", "W", "ER0", "D"),
    "follow": ("F", "AA1", "L", "OW0"),
    "learn": ("L", "ER1", "N"),
    "visual": ("V", "IH1", "ZH", "UW0", "AH0", "L"),
    "tree": ("T", "R", "IY1"),
    "happy": ("HH", "AE1", "P", "IY0"),
    "bird": ("B", "ER1", "D"),
    "house": ("HH", "AW1", "S"),
    "wow": ("W", "AW1"),
    "dog": ("D", "AO1", "G"),
    "cat": ("K", "AE1", "T"),
    "down": ("D", "AW1", "N"),
    "right": ("R", "AY1", "T"),
    "stop": ("S", "T", "AA1", "P"),
    "okay": ("OW2", "K", "EY1"),
}

CORPUS_KEYWORDS = (
    "alexa",
    "jarvis",
    "marvin",
    "sheila",
    "seven",
    "forward",
    "follow",
    "learn",
    "visual",
    "tree",
    "happy",
    "bird",
    "house",
    "wow",
    "dog",
    "cat",
    "down",
    "right",
    "stop",
    "okay",
)


@pytest.fixture(scope="session")
def inventory() -> PhonemeInventory:
    return default_inventory()


@pytest.fixture(scope="session")
def lexicon(inventory: PhonemeInventory) -> Lexicon:
    return Lexicon(dict(WORDS), inventory)


@pytest.fixture
def lexicon_path(tmp_path: Path, lexicon: Lexicon) -> Path:
    path = tmp_path / "lexicon.tsv"
    save_lexicon(lexicon, path)
    return path


def toy_posteriors(rows: Sequence[Sequence[float]]) -> PosteriorGram:
    return PosteriorGram(np.asarray(rows, dtype=np.float64))


def worked_example() -> Tuple[PosteriorGram, KeywordSpec]:
    """Three frames over {blank, a, b} searched for the keyword [a]."""
    p = toy_posteriors([[1.0, 0.0, 0.0], [0.7, 0.2, 0.1], [0.1, 0.8, 0.1]])
    return p, KeywordSpec("a", (1,), tau1=0.5)


def random_posteriors(rng: np.random.Generator, frames: int, vocab: int) -> np.ndarray:
    probs = rng.random((frames, vocab))
    # some exact zeros to exercise -inf in the log domain
    probs[rng.random((frames, vocab)) < 0.15] = 0.0
    probs[:, 0] += 1e-3
    return probs / probs.sum(axis=1, keepdims=True)


def utterance(
    words: Sequence[str],
    lexicon: Lexicon,
    alpha: float = 0.0,
    seed: int = 0,
    frames_per_token: int = 2,
    blank_frames: int = 1,
    dim: int = 16,
) -> Tuple[PosteriorGram, EmbeddingMatrix]:
    tokens = tuple(t for word in words for t in lexicon.inventory.encode(lexicon.lookup(word)))
    spec = SynthSpec(tokens, frames_per_token, blank_frames, alpha, seed, dim)
    return synth(spec, lexicon.inventory)
