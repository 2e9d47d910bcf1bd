import logging
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Sequence, Tuple, Union

import editdistance
import numpy as np

from kwscascade.exceptions import (
    EmptyKeywordError,
    FormatError,
    MetricError,
    OutOfVocabularyError,
    UnknownPhonemeError,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

BLANK = "<blk>"

TokenSequence = Tuple[int, ...]

_VOWELS = ("AA", "AE", "AH", "AO", "AW", "AY", "EH", "ER", "EY", "IH", "IY", "OW", "OY", "UH", "UW")
_CONSONANTS = (
    "B", "CH", "D", "DH", "F", "G", "HH", "JH", "K", "L", "M", "N",
    "NG", "P", "R", "S", "SH", "T", "TH", "V", "W", "Y", "Z", "ZH",
)  # fmt: skip

DEFAULT_PHONEMES: Tuple[str, ...] = (
    tuple(f"{v}{stress}" for v in _VOWELS for stress in "012") + _CONSONANTS + ("SPN",)
)


@dataclass(frozen=True)
class PhonemeInventory:
    symbols: Tuple[str, ...]
    blank_id: int = 0
    _index: Dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        symbols = tuple(self.symbols)
        object.__setattr__(self, "symbols", symbols)
        if len(set(symbols)) != len(symbols):
            dups = sorted({s for s in symbols if symbols.count(s) > 1})
            raise FormatError(f"Duplicate phoneme symbols: {dups}")
        if not 0 <= self.blank_id < len(symbols) or symbols[self.blank_id] != BLANK:
            raise FormatError(f"Inventory must carry {BLANK!r} at index {self.blank_id}")
        object.__setattr__(self, "_index", {s: i for i, s in enumerate(symbols)})

    @property
    def size(self) -> int:
        return len(self.symbols)

    def __len__(self) -> int:
        return len(self.symbols)

    def __contains__(self, label: object) -> bool:
        return label in self._index

    def id_of(self, label: str) -> int:
        try:
            return self._index[label]
        except KeyError:
            raise UnknownPhonemeError(f"Unknown phoneme label {label!r}") from None

    def encode(self, labels: Iterable[str]) -> TokenSequence:
        return tuple(self.id_of(label) for label in labels)

    def decode(self, ids: Iterable[int]) -> List[str]:
        return [self.symbols[i] for i in ids]

    def check_tokens(self, ids: Sequence[int]) -> None:
        for i in ids:
            if not 0 <= i < self.size:
                raise UnknownPhonemeError(f"Token id {i} outside [0, {self.size})")


def default_inventory() -> PhonemeInventory:
    return PhonemeInventory((BLANK,) + DEFAULT_PHONEMES)


def load_inventory(path: PathLike) -> PhonemeInventory:
    with open(path, encoding="utf-8") as fh:
        symbols = [line.strip() for line in fh if line.strip()]
    if not symbols or symbols[0] != BLANK:
        raise FormatError(f"{path}: line 1 must be the blank label {BLANK!r}")
    return PhonemeInventory(tuple(symbols), blank_id=0)


def normalize_word(word: str) -> str:
    return word.strip(string.punctuation).lower()


@dataclass(frozen=True)
class Lexicon:
    entries: Mapping[str, Tuple[str, ...]]
    inventory: PhonemeInventory

    def __post_init__(self) -> None:
        normalized: Dict[str, Tuple[str, ...]] = {}
        for word, labels in self.entries.items():
            for label in labels:
                if label not in self.inventory or label == BLANK:
                    raise UnknownPhonemeError(f"Unknown phoneme label {label!r} in entry {word!r}")
            normalized[normalize_word(word)] = tuple(labels)
        object.__setattr__(self, "entries", normalized)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, word: object) -> bool:
        return isinstance(word, str) and normalize_word(word) in self.entries

    def lookup(self, word: str) -> Tuple[str, ...]:
        return self.entries[normalize_word(word)]

    def words(self) -> List[str]:
        return list(self.entries)


def load_lexicon(path: PathLike, inventory: PhonemeInventory) -> Lexicon:
    entries: Dict[str, Tuple[str, ...]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n\r")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            word, sep, pron = line.partition("\t")
            labels = pron.split()
            if not sep or not normalize_word(word) or not labels:
                raise FormatError(f"{path}: line {lineno}: expected 'word<TAB>PH1 PH2 ...', got {line!r}")
            for label in labels:
                if label not in inventory or label == BLANK:
                    raise UnknownPhonemeError(f"{path}: line {lineno}: unknown phoneme {label!r}")
            key = normalize_word(word)
            if key in entries:
                logger.debug("%s: line %d: keeping first pronunciation of %r", path, lineno, key)
                continue
            entries[key] = tuple(labels)
    logger.debug("Loaded %d lexicon entries from %s", len(entries), path)
    return Lexicon(entries, inventory)


def save_lexicon(lexicon: Lexicon, path: PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for word, labels in lexicon.entries.items():
            fh.write(f"{word}\t{' '.join(labels)}\n")


def g2p(text: str, lexicon: Lexicon) -> TokenSequence:
    words = [w for w in (normalize_word(t) for t in text.split()) if w]
    if not words:
        raise EmptyKeywordError(f"Keyword text {text!r} is empty after normalization")
    missing = [w for w in dict.fromkeys(words) if w not in lexicon.entries]
    if missing:
        raise OutOfVocabularyError(missing)
    labels = [label for w in words for label in lexicon.entries[w]]
    return lexicon.inventory.encode(labels)


def edit_distance(ref: Sequence[int], hyp: Sequence[int]) -> Tuple[int, int, int]:
    """Unit-cost Levenshtein alignment returned as (substitutions, insertions, deletions).

    When several alignments share the minimal cost, the backtrace prefers a
    substitution (or match), then an insertion, then a deletion.
    """
    n, m = len(ref), len(hyp)
    cost = np.zeros((n + 1, m + 1), dtype=np.int64)
    cost[:, 0] = np.arange(n + 1)
    cost[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            diag = cost[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            cost[i, j] = min(diag, cost[i, j - 1] + 1, cost[i - 1, j] + 1)

    subs = ins = dels = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and cost[i, j] == cost[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            subs += int(ref[i - 1] != hyp[j - 1])
            i, j = i - 1, j - 1
        elif j > 0 and cost[i, j] == cost[i, j - 1] + 1:
            ins += 1
            j -= 1
        else:
            dels += 1
            i -= 1
    return subs, ins, dels


def p_wer(pairs: Sequence[Tuple[Sequence[int], Sequence[int]]]) -> float:
    if not pairs:
        raise MetricError("P-WER needs at least one (reference, hypothesis) pair")
    edits = sum(editdistance.eval(list(ref), list(hyp)) for ref, hyp in pairs)
    words = sum(len(ref) for ref, _ in pairs)
    if words == 0:
        raise MetricError("P-WER is undefined for an empty reference corpus")
    return edits / words
