"""Two-stage keyword spotting: stage-1 CTC gating followed by stage-2 verification.

``run_pipeline`` works on whole utterances; ``StreamingCascade`` consumes one frame
at a time and reaches the same decisions.  A candidate is verified only once every
frame its (possibly jittered) crop can touch has arrived, so both paths crop the
same embeddings.
"""
import json
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import (
    AsyncIterable,
    AsyncIterator,
    Dict,
    List,
    Mapping,
    NamedTuple,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import anyio.lowlevel
import numpy as np
from anyio.abc import ObjectSendStream

from kwscascade.corpus import Utterance
from kwscascade.ctc_search import (
    CandidateSegment,
    CandidateTracker,
    DecodeSession,
    KeywordSpec,
    extract_candidates,
    is_strict_prefix,
    perturb_timestamps,
    score_sequence,
    suppress_prefix,
)
from kwscascade.exceptions import ConfigError, DimensionMismatchError, FormatError, KwsError, MetricError
from kwscascade.matcher import (
    EnrollMode,
    EnrollmentPrototype,
    MatcherModel,
    crop_embeddings,
    fuse_enrollment,
    matcher_forward,
    prototype_match,
)
from kwscascade.posterior import DEFAULT_FRAME_PERIOD, EmbeddingMatrix, PosteriorGram, prototype_table

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

DEFAULT_TAU2 = 0.5
DEFAULT_MAX_SEGMENT_FRAMES = 400


class Stage2Mode(str, Enum):
    learned = "learned"
    prototype = "prototype"
    off = "off"


class Fusion(str, Enum):
    none = "none"
    geometric = "geometric"


@dataclass(frozen=True)
class PipelineConfig:
    keywords: Tuple[KeywordSpec, ...]
    tau2: float = DEFAULT_TAU2
    tau2_overrides: Mapping[str, float] = field(default_factory=dict)
    stage2_mode: Stage2Mode = Stage2Mode.prototype
    enroll_mode: EnrollMode = EnrollMode.text
    crop_margin: int = 0
    min_gap: int = 0
    suppress_prefixes: bool = False
    fusion: Fusion = Fusion.none
    timestamp_jitter: float = 0.0
    seed: int = 0
    max_segment_frames: Optional[int] = DEFAULT_MAX_SEGMENT_FRAMES
    frame_period: float = DEFAULT_FRAME_PERIOD
    # stage-2 crops skip frames whose posterior argmax is the blank
    drop_blank_frames: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "keywords", tuple(self.keywords))
        object.__setattr__(self, "tau2_overrides", dict(self.tau2_overrides))
        object.__setattr__(self, "stage2_mode", Stage2Mode(self.stage2_mode))
        object.__setattr__(self, "enroll_mode", EnrollMode(self.enroll_mode))
        object.__setattr__(self, "fusion", Fusion(self.fusion))
        if not self.keywords:
            raise ConfigError("At least one keyword must be configured")
        texts = [kw.text for kw in self.keywords]
        if len(set(texts)) != len(texts):
            raise ConfigError(f"Duplicate keywords in {texts}")
        for name, tau in [("default", self.tau2), *self.tau2_overrides.items()]:
            if not 0.0 <= tau <= 1.0:
                raise ConfigError(f"tau2 for {name!r} must lie in [0, 1], got {tau}")
        unknown = set(self.tau2_overrides) - set(texts)
        if unknown:
            raise ConfigError(f"tau2 overrides name unconfigured keywords: {sorted(unknown)}")
        if self.crop_margin < 0 or self.min_gap < 0:
            raise ConfigError("crop_margin and min_gap must be non-negative")
        if self.max_segment_frames is not None and self.max_segment_frames < 1:
            raise ConfigError(f"max_segment_frames must be >= 1, got {self.max_segment_frames}")
        if not 0.0 <= self.timestamp_jitter <= 1.0:
            raise ConfigError(f"timestamp_jitter must lie in [0, 1], got {self.timestamp_jitter}")
        if len({kw.blank_id for kw in self.keywords}) != 1:
            raise ConfigError("All keywords must share one blank id")

    @property
    def blank_id(self) -> int:
        return self.keywords[0].blank_id

    def tau2_for(self, keyword: KeywordSpec) -> float:
        return self.tau2_overrides.get(keyword.text, self.tau2)

    def with_tau1(self, tau1: float) -> "PipelineConfig":
        return replace(self, keywords=tuple(replace(kw, tau1=tau1) for kw in self.keywords))


@dataclass(frozen=True)
class Detection:
    keyword: KeywordSpec
    segment: CandidateSegment
    s1: float
    s2: Optional[float]
    final: float
    frame: int

    def to_json(self, frame_period: float = DEFAULT_FRAME_PERIOD) -> Dict[str, object]:
        return {
            "keyword": self.keyword.text,
            "start_frame": self.segment.start_frame,
            "end_frame": self.segment.end_frame,
            "start_s": round((self.segment.start_frame - 1) * frame_period, 6),
            "end_s": round(self.segment.end_frame * frame_period, 6),
            "s1": self.s1,
            "s2": self.s2,
            "final": self.final,
        }


@dataclass
class CascadeStats:
    frames: int = 0
    candidates: int = 0
    stage2_activations: int = 0
    detections: int = 0

    def to_json(self) -> Dict[str, int]:
        return {"frames": self.frames, "stage2_activations": self.stage2_activations, "detections": self.detections}


Prototypes = Mapping[str, EnrollmentPrototype]


def build_prototypes(
    cfg: PipelineConfig, model: MatcherModel, refs: Optional[Mapping[str, EmbeddingMatrix]] = None
) -> Dict[str, EnrollmentPrototype]:
    refs = refs or {}
    return {kw.text: fuse_enrollment(cfg.enroll_mode, kw.tokens, refs.get(kw.text), model) for kw in cfg.keywords}


def codebook_prototypes(keywords: Sequence[KeywordSpec], vocab: int, dim: int) -> Dict[str, EnrollmentPrototype]:
    """Text prototypes read straight off the synthetic embedding codebook; no weights needed."""
    table = prototype_table(vocab, dim)
    return {kw.text: EnrollmentPrototype(EnrollMode.text, kw.tokens, table[list(kw.tokens)]) for kw in keywords}


def _candidate_seed(seed: int, index: int, segment: CandidateSegment) -> int:
    seq = np.random.SeedSequence([seed, index, segment.start_frame, segment.end_frame])
    return int(seq.generate_state(1)[0])


class _Verifier:
    def __init__(self, cfg: PipelineConfig, model: Optional[MatcherModel], protos: Optional[Prototypes]) -> None:
        self.cfg = cfg
        self.model = model
        mode = cfg.stage2_mode
        if mode is Stage2Mode.learned and model is None:
            raise ConfigError("Stage-2 mode 'learned' needs matcher weights")
        if mode is not Stage2Mode.off and protos is None:
            if model is None:
                raise ConfigError(f"Stage-2 mode {mode.value!r} needs enrollment prototypes or matcher weights")
            protos = build_prototypes(cfg, model)
        self.protos = dict(protos or {})
        if mode is not Stage2Mode.off:
            missing = [kw.text for kw in cfg.keywords if kw.text not in self.protos]
            if missing:
                raise ConfigError(f"No enrollment prototype for {missing}")

    @property
    def active(self) -> bool:
        return self.cfg.stage2_mode is not Stage2Mode.off

    def lookahead(self, segment: CandidateSegment) -> int:
        """Last frame the jittered segment or its crop may reach."""
        reach = math.ceil(self.cfg.timestamp_jitter * segment.length)
        return segment.end_frame + reach + (self.cfg.crop_margin if self.active else 0)

    def prepare(self, index: int, segment: CandidateSegment, total_frames: int) -> CandidateSegment:
        if self.cfg.timestamp_jitter == 0.0:
            return segment
        seed = _candidate_seed(self.cfg.seed, index, segment)
        return perturb_timestamps(segment, self.cfg.timestamp_jitter, total_frames, seed)

    def verify(
        self, index: int, candidate: CandidateSegment, segment: CandidateSegment, clip: Optional[EmbeddingMatrix]
    ) -> Detection:
        keyword = self.cfg.keywords[index]
        if not self.active:
            return Detection(keyword, segment, candidate.s1, None, candidate.s1, candidate.end_frame)
        proto = self.protos[keyword.text]
        if self.cfg.stage2_mode is Stage2Mode.learned:
            s2 = matcher_forward(clip, proto, self.model).p_utt
        else:
            s2 = prototype_match(clip, proto)
        final = math.sqrt(candidate.s1 * s2) if self.cfg.fusion is Fusion.geometric else s2
        logger.debug("Stage-2 %r on frames %d-%d: s2=%.4f", keyword.text, segment.start_frame, segment.end_frame, s2)
        return Detection(keyword, segment, candidate.s1, s2, final, candidate.end_frame)

    def accepts(self, det: Detection) -> bool:
        return not self.active or det.final >= self.cfg.tau2_for(det.keyword)


def _order(cfg: PipelineConfig, detections: Sequence[Detection]) -> List[Detection]:
    rank = {kw.text: i for i, kw in enumerate(cfg.keywords)}
    return sorted(detections, key=lambda d: (d.frame, rank[d.keyword.text], d.segment.start_frame))


def _finalize(cfg: PipelineConfig, accepted: Sequence[Detection]) -> List[Detection]:
    ordered = _order(cfg, accepted)
    return suppress_prefix(ordered) if cfg.suppress_prefixes else ordered


def _check_embeddings(cfg: PipelineConfig, p: PosteriorGram, e: Optional[EmbeddingMatrix]) -> None:
    if cfg.stage2_mode is Stage2Mode.off:
        return
    if e is None:
        raise ConfigError(f"Stage-2 mode {cfg.stage2_mode.value!r} needs frame embeddings")
    if e.frames != p.frames:
        raise DimensionMismatchError(f"{p.frames} posterior frames but {e.frames} embedding frames")


def _crop_window(cfg: PipelineConfig, segment: CandidateSegment, total_frames: int) -> Tuple[int, int]:
    return max(1, segment.start_frame - cfg.crop_margin), min(total_frames, segment.end_frame + cfg.crop_margin)


def _speech_only(cfg: PipelineConfig, clip: EmbeddingMatrix, speech: np.ndarray) -> EmbeddingMatrix:
    """Keep the frames not labelled blank; an all-blank crop is kept whole."""
    if not cfg.drop_blank_frames or speech.all() or not speech.any():
        return clip
    return EmbeddingMatrix(clip.values[speech])


def _score_candidates(
    p: PosteriorGram, e: Optional[EmbeddingMatrix], cfg: PipelineConfig, verifier: _Verifier, stats: CascadeStats
) -> List[Detection]:
    _check_embeddings(cfg, p, e)
    stats.frames = p.frames
    scored = []
    if p.frames == 0:
        return scored
    speech = np.argmax(p.probs, axis=1) != cfg.blank_id
    for index, keyword in enumerate(cfg.keywords):
        scores, origins = score_sequence(p, keyword)
        for candidate in extract_candidates(scores, origins, keyword, cfg.min_gap, cfg.max_segment_frames):
            stats.candidates += 1
            segment = verifier.prepare(index, candidate, p.frames)
            clip = None
            if verifier.active:
                first, last = _crop_window(cfg, segment, p.frames)
                clip = _speech_only(cfg, crop_embeddings(e, segment, cfg.crop_margin), speech[first - 1 : last])
                stats.stage2_activations += 1
            scored.append(verifier.verify(index, candidate, segment, clip))
    return scored


def run_pipeline(
    p: PosteriorGram,
    e: Optional[EmbeddingMatrix],
    cfg: PipelineConfig,
    model: Optional[MatcherModel] = None,
    protos: Optional[Prototypes] = None,
) -> Tuple[List[Detection], CascadeStats]:
    verifier = _Verifier(cfg, model, protos)
    stats = CascadeStats()
    scored = _score_candidates(p, e, cfg, verifier, stats)
    detections = _finalize(cfg, [d for d in scored if verifier.accepts(d)])
    stats.detections = len(detections)
    logger.debug("Pipeline over %d frames: %d candidates, %d detections", p.frames, stats.candidates, len(detections))
    return detections, stats


def score_utterance(
    p: PosteriorGram,
    e: Optional[EmbeddingMatrix],
    cfg: PipelineConfig,
    keyword: str,
    model: Optional[MatcherModel] = None,
    protos: Optional[Prototypes] = None,
) -> float:
    """Best final score among the stage-2 scored candidates of ``keyword``; 0 when the gate never opens."""
    verifier = _Verifier(cfg, model, protos)
    scored = _score_candidates(p, e, cfg, verifier, CascadeStats())
    return max((d.final for d in scored if d.keyword.text == keyword), default=0.0)


def stage1_utterance_score(p: PosteriorGram, keyword: KeywordSpec) -> float:
    if p.frames == 0:
        return 0.0
    scores, _ = score_sequence(p, keyword)
    return float(scores.max())


class StreamingCascade:
    """Frame-synchronous cascade over one stream.

    ``feed`` returns the detections decided by the new frame.  When prefix
    suppression is on, detections of a keyword that prefixes another configured
    keyword are held back until ``close``.
    """

    def __init__(
        self, cfg: PipelineConfig, model: Optional[MatcherModel] = None, protos: Optional[Prototypes] = None
    ) -> None:
        self.cfg = cfg
        self._verifier = _Verifier(cfg, model, protos)
        self.stats = CascadeStats()
        self._sessions: List[DecodeSession] = []
        self._trackers = [CandidateTracker(kw.tau1, cfg.min_gap, cfg.max_segment_frames) for kw in cfg.keywords]
        self._pending: List[Tuple[int, CandidateSegment]] = []
        self._rows: List[np.ndarray] = []
        self._speech: List[bool] = []
        self._accepted: List[Detection] = []
        self._held = {
            short.text
            for short in cfg.keywords
            if cfg.suppress_prefixes and any(is_strict_prefix(short.tokens, long.tokens) for long in cfg.keywords)
        }
        self._vocab: Optional[int] = None
        self._dim: Optional[int] = None
        self._closed = False
        self._failed = False
        self.detections: List[Detection] = []

    @property
    def frames(self) -> int:
        return self.stats.frames

    def _check_row(self, post: np.ndarray, emb: Optional[np.ndarray]) -> None:
        t = self.stats.frames + 1
        if post.ndim != 1 or (self._vocab is not None and post.shape[0] != self._vocab):
            raise DimensionMismatchError(f"frame {t}: posterior row has shape {post.shape}, expected ({self._vocab},)")
        if not self._verifier.active:
            return
        if emb is None:
            raise ConfigError(f"frame {t}: stage-2 mode {self.cfg.stage2_mode.value!r} needs frame embeddings")
        if emb.ndim != 1 or (self._dim is not None and emb.shape[0] != self._dim):
            raise DimensionMismatchError(f"frame {t}: embedding row has shape {emb.shape}, expected ({self._dim},)")

    def feed(self, post_row, emb_row=None) -> List[Detection]:
        if self._closed or self._failed:
            raise KwsError("Stream is closed or aborted")
        post = np.asarray(post_row, dtype=np.float64)
        emb = None if emb_row is None else np.asarray(emb_row, dtype=np.float64)
        try:
            self._check_row(post, emb)
        except KwsError:
            self._failed = True
            raise
        t = self.stats.frames + 1
        self.stats.frames = t
        if t == 1:
            self._vocab = post.shape[0]
            self._dim = None if emb is None else emb.shape[0]
            self._sessions = [DecodeSession(kw, self._vocab) for kw in self.cfg.keywords]
        if emb is not None and self._verifier.active:
            self._rows.append(emb)
            self._speech.append(bool(np.argmax(post) != self.cfg.blank_id))

        for index, (session, tracker) in enumerate(zip(self._sessions, self._trackers)):
            if t == 1:
                closed = tracker.push(1, 0.0, 1)
            else:
                closed = tracker.push(t, session.step(post), session.last_origin)
            if closed is not None:
                self._enqueue(index, closed)
        return self._drain(ready_at=t)

    def _enqueue(self, index: int, candidate: CandidateSegment) -> None:
        keyword = self.cfg.keywords[index].text
        logger.debug("Candidate %r closed at frames %d-%d", keyword, candidate.start_frame, candidate.end_frame)
        self.stats.candidates += 1
        self._pending.append((index, candidate))

    def _drain(self, ready_at: int, final: bool = False) -> List[Detection]:
        total = self.stats.frames
        waiting = []
        decided = []
        for index, candidate in self._pending:
            if not final and self._verifier.lookahead(candidate) > ready_at:
                waiting.append((index, candidate))
                continue
            segment = self._verifier.prepare(index, candidate, total)
            clip = None
            if self._verifier.active:
                first, last = _crop_window(self.cfg, segment, total)
                clip = EmbeddingMatrix(np.vstack(self._rows[first - 1 : last]))
                clip = _speech_only(self.cfg, clip, np.asarray(self._speech[first - 1 : last]))
                self.stats.stage2_activations += 1
            det = self._verifier.verify(index, candidate, segment, clip)
            if self._verifier.accepts(det):
                decided.append(det)
        self._pending = waiting
        self._accepted.extend(decided)
        return [d for d in _order(self.cfg, decided) if d.keyword.text not in self._held]

    def close(self) -> List[Detection]:
        if self._closed:
            return []
        self._closed = True
        for index, tracker in enumerate(self._trackers):
            closed = tracker.flush()
            if closed is not None:
                self._enqueue(index, closed)
        emitted = self._drain(ready_at=self.stats.frames, final=True)
        self.detections = _finalize(self.cfg, self._accepted)
        self.stats.detections = len(self.detections)
        held = [d for d in self.detections if d.keyword.text in self._held]
        return _order(self.cfg, emitted + held)


FrameInput = Union[np.ndarray, Tuple[np.ndarray, Optional[np.ndarray]]]


async def run_streaming(
    frames: AsyncIterable[FrameInput],
    cfg: PipelineConfig,
    model: Optional[MatcherModel] = None,
    protos: Optional[Prototypes] = None,
    events: Optional[ObjectSendStream[Detection]] = None,
) -> Tuple[List[Detection], CascadeStats]:
    """Drive a ``StreamingCascade`` from an async frame source.

    Each item is a posterior row or a ``(posterior_row, embedding_row)`` pair.
    Decisions are sent to ``events`` as soon as they are made; the caller owns the stream.
    """
    cascade = StreamingCascade(cfg, model, protos)
    async for item in frames:
        post, emb = item if isinstance(item, tuple) else (item, None)
        for det in cascade.feed(post, emb):
            if events is not None:
                await events.send(det)
        await anyio.lowlevel.checkpoint()
    for det in cascade.close():
        if events is not None:
            await events.send(det)
    return cascade.detections, cascade.stats


async def iterate_frames(p: PosteriorGram, e: Optional[EmbeddingMatrix] = None) -> AsyncIterator[FrameInput]:
    for t in range(p.frames):
        yield p.probs[t], None if e is None else e.values[t]


class TradeoffPoint(NamedTuple):
    tau1: float
    stage2_activations: int
    recall: float


def sweep_tau1(
    corpus: Sequence[Utterance],
    cfg: PipelineConfig,
    taus: Sequence[float],
    model: Optional[MatcherModel] = None,
    protos: Optional[Prototypes] = None,
) -> List[TradeoffPoint]:
    """Stage-2 activations and positive recall as the stage-1 threshold moves."""
    n_pos = sum(1 for utt in corpus if utt.label == 1)
    if n_pos == 0:
        raise MetricError("Threshold sweep needs at least one positive utterance")
    points = []
    for tau1 in taus:
        swept = cfg.with_tau1(tau1)
        by_text = {kw.text: kw for kw in swept.keywords}
        activations = hits = 0
        for utt in corpus:
            keyword = by_text[utt.keyword.text]
            single = replace(swept, keywords=(keyword,), tau2_overrides={}, tau2=swept.tau2_for(keyword))
            detections, stats = run_pipeline(utt.posteriors, utt.embeddings, single, model, protos)
            activations += stats.stage2_activations
            hits += int(utt.label == 1 and bool(detections))
        points.append(TradeoffPoint(float(tau1), activations, hits / n_pos))
        logger.debug("tau1=%g: %d stage-2 activations, recall %.4f", tau1, activations, hits / n_pos)
    return points


def write_detections_jsonl(
    path: PathLike, detections: Sequence[Detection], frame_period: float = DEFAULT_FRAME_PERIOD
) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for det in detections:
            fh.write(json.dumps(det.to_json(frame_period)) + "\n")
    logger.debug("Wrote %d detections to %s", len(detections), path)


def write_stats(path: PathLike, stats: CascadeStats) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(stats.to_json(), fh, indent=2)
        fh.write("\n")


_RECORD_FIELDS = ("keyword", "start_frame", "end_frame", "start_s", "end_s", "s1", "s2", "final")


def load_detection_records(path: PathLike) -> List[Dict[str, object]]:
    """Detections JSON-lines as plain records; the keyword specs are not reconstructed."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(f"{path}: line {lineno}: {e}") from None
            if not isinstance(record, dict) or any(name not in record for name in _RECORD_FIELDS):
                raise FormatError(f"{path}: line {lineno}: expected fields {', '.join(_RECORD_FIELDS)}")
            bad = _bad_record_field(record)
            if bad is not None:
                raise FormatError(f"{path}: line {lineno}: bad value for {bad!r}: {record[bad]!r}")
            records.append(record)
    return records


def _is_number(value: object) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)


def _bad_record_field(record: Mapping[str, object]) -> Optional[str]:
    if not isinstance(record["keyword"], str):
        return "keyword"
    for name in ("start_frame", "end_frame"):
        if not isinstance(record[name], int) or isinstance(record[name], bool):
            return name
    for name in ("start_s", "end_s", "s1", "final"):
        if not _is_number(record[name]):
            return name
    if record["s2"] is not None and not _is_number(record["s2"]):
        return "s2"
    return None


def load_stats(path: PathLike) -> CascadeStats:
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}: {e}") from None
    if not isinstance(data, dict):
        raise FormatError(f"{path}: expected a JSON object")
    counts = {}
    for name in ("frames", "stage2_activations", "detections"):
        value = data.get(name)
        if not isinstance(value, int) or isinstance(value, bool) or value < 0:
            raise FormatError(f"{path}: {name!r} must be a non-negative integer, got {value!r}")
        counts[name] = value
    return CascadeStats(**counts)


def write_detection_records(path: PathLike, records: Sequence[Mapping[str, object]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps({name: record[name] for name in _RECORD_FIELDS}) + "\n")
