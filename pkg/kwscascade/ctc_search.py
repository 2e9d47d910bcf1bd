"""Stage-1 streaming CTC keyword search.

The trellis follows the frame-synchronous max-product recurrence over the
blank-interleaved keyword: blank states are reached from themselves or the
previous state, token states additionally from two states back.  Each state
also carries the frame on which its best path started emitting the keyword,
which is what turns a score peak into a candidate segment.
"""
import csv
import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Deque, List, NamedTuple, Optional, Protocol, Sequence, Tuple, TypeVar, Union

import numpy as np

from kwscascade.exceptions import BlankTokenError, ConfigError, DimensionMismatchError, FormatError
from kwscascade.phoneme import Lexicon, TokenSequence, g2p

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

DEFAULT_TAU1 = 0.04


def expand_with_blanks(tokens: Sequence[int], blank_id: int = 0) -> TokenSequence:
    if not tokens:
        raise ValueError("Cannot interleave an empty token sequence")
    if blank_id in tokens:
        raise BlankTokenError("Keyword tokens must not contain the blank")
    out = [blank_id]
    for token in tokens:
        out += [int(token), blank_id]
    return tuple(out)


@dataclass(frozen=True)
class KeywordSpec:
    text: str
    tokens: TokenSequence
    tau1: float = DEFAULT_TAU1
    blank_id: int = 0
    # skip transition forbidden between identical labels
    repeat_guard: bool = False
    # a fresh path may enter the trellis on every frame
    restart: bool = False
    interleaved: TokenSequence = field(init=False, repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if not 0.0 <= self.tau1 <= 1.0:
            raise ConfigError(f"tau1 for {self.text!r} must lie in [0, 1], got {self.tau1}")
        object.__setattr__(self, "interleaved", expand_with_blanks(self.tokens, self.blank_id))

    @classmethod
    def from_text(cls, text: str, lexicon: Lexicon, tau1: float = DEFAULT_TAU1, **kwargs) -> "KeywordSpec":
        return cls(text=text, tokens=g2p(text, lexicon), tau1=tau1, blank_id=lexicon.inventory.blank_id, **kwargs)

    @property
    def states(self) -> int:
        return len(self.interleaved)


@dataclass(frozen=True)
class CandidateSegment:
    start_frame: int
    end_frame: int
    s1: float

    def __post_init__(self) -> None:
        if not 1 <= self.start_frame <= self.end_frame:
            raise ValueError(f"Invalid segment [{self.start_frame}, {self.end_frame}]")
        if not 0.0 <= self.s1 <= 1.0:
            raise ValueError(f"Stage-1 score {self.s1} outside [0, 1]")

    @property
    def length(self) -> int:
        return self.end_frame - self.start_frame + 1

    def overlaps(self, other: "CandidateSegment") -> bool:
        return self.start_frame <= other.end_frame and other.start_frame <= self.end_frame


class DecodeSession:
    """Trellis state of one keyword on one stream.

    Frame 1 is consumed by initialization; every ``step`` consumes the next frame.
    """

    def __init__(self, keyword: KeywordSpec, vocab: int, log_domain: bool = True, history: int = 0) -> None:
        self.keyword = keyword
        self.vocab = vocab
        self.log_domain = log_domain
        states = keyword.states
        self._labels = np.asarray(keyword.interleaved, dtype=np.int64)
        self._zero = -np.inf if log_domain else 0.0
        self._one = 0.0 if log_domain else 1.0
        skip = np.zeros(states, dtype=bool)
        for u in range(2, states):
            label = keyword.interleaved[u]
            if label != keyword.blank_id and not (keyword.repeat_guard and label == keyword.interleaved[u - 2]):
                skip[u] = True
        self._no_skip = ~skip
        self._index = np.arange(states)
        self.t = 1
        self.delta = np.full(states, self._zero)
        self.delta[:2] = self._one
        self.origin = np.ones(states, dtype=np.int64)
        self.last_origin = 1
        self.score_history: Optional[Deque[float]] = deque(maxlen=history) if history > 0 else None

    @property
    def delta_linear(self) -> np.ndarray:
        return np.exp(self.delta) if self.log_domain else self.delta.copy()

    def step(self, frame: np.ndarray) -> float:
        frame = np.asarray(frame, dtype=np.float64)
        if frame.shape != (self.vocab,):
            raise DimensionMismatchError(f"Frame has shape {frame.shape}, expected ({self.vocab},)")
        emissions = frame[self._labels]
        if self.log_domain:
            with np.errstate(divide="ignore"):
                emissions = np.log(emissions)

        prev = self.delta
        from_prev = np.full_like(prev, self._zero)
        from_prev[1:] = prev[:-1]
        from_skip = np.full_like(prev, self._zero)
        from_skip[2:] = prev[:-2]
        from_skip[self._no_skip] = self._zero

        # ties resolve to the smaller predecessor index
        best = from_skip
        src = np.full(prev.shape, 2, dtype=np.int64)
        better = from_prev > best
        best = np.where(better, from_prev, best)
        src[better] = 1
        better = prev > best
        best = np.where(better, prev, best)
        src[better] = 0

        t = self.t + 1
        origin = self.origin[np.maximum(self._index - src, 0)]
        origin[0] = t
        if src[1] == 1:
            origin[1] = t
        if self.keyword.restart:
            for u in (0, 1):
                if self._one > best[u]:
                    best[u] = self._one
                    origin[u] = t

        self.delta = best + emissions if self.log_domain else best * emissions
        self.origin = origin
        self.t = t

        last, blank = self.delta[-2], self.delta[-1]
        if blank > last:
            score, self.last_origin = blank, int(origin[-1])
        else:
            score, self.last_origin = last, int(origin[-2])
        linear = float(np.exp(score)) if self.log_domain else float(score)
        if self.score_history is not None:
            self.score_history.append(linear)
        return linear


def score_sequence(p, keyword: KeywordSpec, log_domain: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    """Frame-level scores and path origins; frame 1 carries score 0 since it only initializes the trellis."""
    probs = p.probs if hasattr(p, "probs") else np.asarray(p, dtype=np.float64)
    frames = probs.shape[0]
    if frames < 1:
        raise ValueError("Cannot score an empty posteriorgram")
    session = DecodeSession(keyword, probs.shape[1], log_domain=log_domain)
    scores = np.zeros(frames)
    origins = np.ones(frames, dtype=np.int64)
    for t in range(1, frames):
        scores[t] = session.step(probs[t])
        origins[t] = session.last_origin
    return scores, origins


class ForwardResult(NamedTuple):
    logprob: float
    feasible: bool


def ctc_forward_logprob(p, tokens: Sequence[int], blank_id: int = 0) -> ForwardResult:
    """Sum over all CTC alignments of ``tokens``, with the standard repeated-label guard."""
    probs = p.probs if hasattr(p, "probs") else np.asarray(p, dtype=np.float64)
    frames = probs.shape[0]
    labels = expand_with_blanks(tokens, blank_id)
    repeats = sum(1 for a, b in zip(tokens, tokens[1:]) if a == b)
    if frames < len(tokens) + repeats:
        return ForwardResult(-np.inf, False)

    states = len(labels)
    skip = np.array(
        [u >= 2 and labels[u] != blank_id and labels[u] != labels[u - 2] for u in range(states)], dtype=bool
    )
    with np.errstate(divide="ignore"):
        log_probs = np.log(probs[:, list(labels)])
    alpha = np.full(states, -np.inf)
    alpha[0] = log_probs[0, 0]
    alpha[1] = log_probs[0, 1]
    for t in range(1, frames):
        from_prev = np.full(states, -np.inf)
        from_prev[1:] = alpha[:-1]
        from_skip = np.full(states, -np.inf)
        from_skip[2:] = alpha[:-2]
        from_skip[~skip] = -np.inf
        alpha = np.logaddexp(np.logaddexp(alpha, from_prev), from_skip) + log_probs[t]
    total = np.logaddexp(alpha[-1], alpha[-2])
    return ForwardResult(float(total), True)


class CandidateTracker:
    """Incremental scan for runs of ``score >= tau1``.

    Runs separated by fewer than ``min_gap`` sub-threshold frames are merged; a run
    reaching ``max_length`` frames is closed on the spot.  Each run yields one
    candidate ending at its (earliest) peak.
    """

    def __init__(self, tau1: float, min_gap: int = 0, max_length: Optional[int] = None) -> None:
        self.tau1 = tau1
        self.min_gap = max(min_gap, 1)
        self.max_length = max_length
        self._open = False
        self._run_start = 0
        self._last_above = 0
        self._best: Tuple[int, float, int] = (0, -1.0, 0)

    @property
    def is_open(self) -> bool:
        return self._open

    def push(self, t: int, score: float, origin: int) -> Optional[CandidateSegment]:
        if score >= self.tau1:
            if not self._open:
                self._open = True
                self._run_start = t
                self._best = (t, score, origin)
            elif score > self._best[1]:
                self._best = (t, score, origin)
            self._last_above = t
            if self.max_length is not None and t - self._run_start + 1 >= self.max_length:
                return self.flush()
        elif self._open and t - self._last_above >= self.min_gap:
            return self.flush()
        return None

    def flush(self) -> Optional[CandidateSegment]:
        if not self._open:
            return None
        self._open = False
        end, score, start = self._best
        return CandidateSegment(start_frame=start, end_frame=end, s1=float(score))


def extract_candidates(
    scores: Sequence[float],
    origins: Sequence[int],
    keyword: KeywordSpec,
    min_gap: int = 0,
    max_length: Optional[int] = None,
) -> List[CandidateSegment]:
    if len(scores) != len(origins):
        raise DimensionMismatchError(f"{len(scores)} scores but {len(origins)} origins")
    tracker = CandidateTracker(keyword.tau1, min_gap=min_gap, max_length=max_length)
    found = []
    for t, (score, origin) in enumerate(zip(scores, origins), start=1):
        closed = tracker.push(t, float(score), int(origin))
        if closed is not None:
            found.append(closed)
    closed = tracker.flush()
    if closed is not None:
        found.append(closed)
    return found


class Scored(Protocol):
    keyword: KeywordSpec
    segment: CandidateSegment
    final: float


ScoredT = TypeVar("ScoredT", bound=Scored)


def is_strict_prefix(short: Sequence[int], long: Sequence[int]) -> bool:
    return len(short) < len(long) and tuple(long[: len(short)]) == tuple(short)


def suppress_prefix(detections: Sequence[ScoredT]) -> List[ScoredT]:
    """Drop a shorter keyword's trigger when an overlapping trigger of a keyword it
    prefixes carries a strictly higher score.  All pairs are judged on the input list.
    """
    dropped = set()
    for i, short in enumerate(detections):
        for long in detections:
            if (
                is_strict_prefix(short.keyword.tokens, long.keyword.tokens)
                and short.segment.overlaps(long.segment)
                and long.final > short.final
            ):
                logger.debug(
                    "Suppressing %r at %s in favour of %r", short.keyword.text, short.segment, long.keyword.text
                )
                dropped.add(i)
                break
    return [d for i, d in enumerate(detections) if i not in dropped]


def perturb_timestamps(segment: CandidateSegment, fraction: float, total_frames: int, seed: int) -> CandidateSegment:
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must lie in [0, 1], got {fraction}")
    if fraction == 0.0:
        return segment
    rng = np.random.default_rng(seed)
    reach = fraction * segment.length
    shift_start, shift_end = (int(np.rint(x)) for x in rng.uniform(-reach, reach, size=2))
    end = min(max(segment.end_frame + shift_end, 1), total_frames)
    start = min(max(segment.start_frame + shift_start, 1), total_frames, end)
    return CandidateSegment(start_frame=start, end_frame=end, s1=segment.s1)


def load_keywords(path: PathLike, lexicon: Lexicon, default_tau1: float = DEFAULT_TAU1, **kwargs) -> List[KeywordSpec]:
    keywords = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n\r")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            text, _, tau = line.partition("\t")
            try:
                tau1 = float(tau) if tau.strip() else default_tau1
            except ValueError:
                raise FormatError(f"{path}: line {lineno}: bad threshold {tau!r}") from None
            keywords.append(KeywordSpec.from_text(text.strip(), lexicon, tau1=tau1, **kwargs))
    if not keywords:
        raise ConfigError(f"{path}: no keywords configured")
    return keywords


def write_score_trace(path: PathLike, scores: Sequence[float], origins: Sequence[int]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "score", "origin"])
        for t, (score, origin) in enumerate(zip(scores, origins), start=1):
            writer.writerow([t, repr(float(score)), int(origin)])
