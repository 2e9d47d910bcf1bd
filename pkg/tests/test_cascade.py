import json
import math
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import anyio
import numpy as np
import pytest

from kwscascade.cascade import (
    CascadeStats,
    Detection,
    PipelineConfig,
    Stage2Mode,
    StreamingCascade,
    codebook_prototypes,
    iterate_frames,
    load_detection_records,
    load_stats,
    run_pipeline,
    run_streaming,
    score_utterance,
    stage1_utterance_score,
    sweep_tau1,
    write_detection_records,
    write_detections_jsonl,
    write_stats,
)
from kwscascade.corpus import HARD_KINDS, build_corpus
from kwscascade.ctc_search import CandidateSegment, KeywordSpec
from kwscascade.exceptions import ConfigError, DimensionMismatchError, FormatError, KwsError, MetricError
from kwscascade.matcher import MatcherModel
from kwscascade.metrics import Trial, auroc, recall_at_far
from kwscascade.phoneme import Lexicon
from kwscascade.posterior import EmbeddingMatrix, PosteriorGram
from tests.fixtures import CORPUS_KEYWORDS, WORDS, utterance


def _keywords(lexicon: Lexicon, words: Sequence[str], **kwargs) -> Tuple[KeywordSpec, ...]:
    return tuple(KeywordSpec.from_text(w, lexicon, **kwargs) for w in words)


def _rainbow(lexicon: Lexicon, suppress: bool):
    p, e = utterance(["rainbow"], lexicon, blank_frames=0)
    keywords = _keywords(lexicon, ["rain", "rainbow"])
    cfg = PipelineConfig(keywords, tau2=0.5, crop_margin=2, suppress_prefixes=suppress)
    return p, e, cfg, codebook_prototypes(keywords, p.vocab, e.dim)


def _order_key(det: Detection):
    return det.frame, det.keyword.text, det.segment.start_frame


@pytest.mark.parametrize(
    "kwargs",
    [
        {"keywords": ()},
        {"tau2": 1.5},
        {"tau2_overrides": {"hi": -0.1}},
        {"tau2_overrides": {"bird": 0.5}},
        {"crop_margin": -1},
        {"min_gap": -1},
        {"max_segment_frames": 0},
        {"timestamp_jitter": 2.0},
    ],
)
def test_config_validation(lexicon: Lexicon, kwargs) -> None:
    base = {"keywords": _keywords(lexicon, ["hi", "rain"])}
    with pytest.raises(ConfigError):
        PipelineConfig(**{**base, **kwargs})


def test_config_helpers(lexicon: Lexicon) -> None:
    with pytest.raises(ConfigError, match="Duplicate"):
        PipelineConfig(_keywords(lexicon, ["hi", "hi"]))
    cfg = PipelineConfig(_keywords(lexicon, ["hi", "rain"]), tau2=0.6, tau2_overrides={"rain": 0.8}, stage2_mode="off")
    assert cfg.stage2_mode is Stage2Mode.off
    assert [cfg.tau2_for(kw) for kw in cfg.keywords] == [0.6, 0.8]
    assert [kw.tau1 for kw in cfg.with_tau1(0.3).keywords] == [0.3, 0.3]


def test_stage2_off_passes_stage1_scores(lexicon: Lexicon) -> None:
    p, _ = utterance(["hi"], lexicon)
    cfg = PipelineConfig(_keywords(lexicon, ["hi"]), stage2_mode="off")
    detections, stats = run_pipeline(p, None, cfg)
    assert len(detections) == 1
    det = detections[0]
    assert det.s2 is None and det.final == det.s1 == pytest.approx(1.0)
    assert stats == CascadeStats(frames=p.frames, candidates=1, stage2_activations=0, detections=1)


def test_stage2_requirements(lexicon: Lexicon) -> None:
    p, e = utterance(["hi"], lexicon)
    keywords = _keywords(lexicon, ["hi"])
    with pytest.raises(ConfigError):
        run_pipeline(p, e, PipelineConfig(keywords, stage2_mode="learned"))
    with pytest.raises(ConfigError):
        run_pipeline(p, e, PipelineConfig(keywords, stage2_mode="prototype"))
    protos = codebook_prototypes(keywords, p.vocab, e.dim)
    with pytest.raises(ConfigError, match="embeddings"):
        run_pipeline(p, None, PipelineConfig(keywords), protos=protos)
    short = EmbeddingMatrix(e.values[:-1])
    with pytest.raises(DimensionMismatchError):
        run_pipeline(p, short, PipelineConfig(keywords), protos=protos)
    other = _keywords(lexicon, ["rain"])
    with pytest.raises(ConfigError, match="prototype"):
        run_pipeline(p, e, PipelineConfig(other), protos=protos)


def test_learned_stage2_builds_prototypes_from_weights(lexicon: Lexicon) -> None:
    p, e = utterance(["hi"], lexicon)
    model = MatcherModel.zeros(vocab=p.vocab, dim=e.dim)
    cfg = PipelineConfig(_keywords(lexicon, ["hi"]), stage2_mode="learned", tau2=0.5)
    detections, stats = run_pipeline(p, e, cfg, model=model)
    assert [d.s2 for d in detections] == [0.5]
    assert stats.stage2_activations == 1
    assert not run_pipeline(p, e, PipelineConfig(cfg.keywords, stage2_mode="learned", tau2=0.6), model=model)[0]


def test_config_rejects_mixed_blank_ids(lexicon: Lexicon) -> None:
    hi = KeywordSpec.from_text("hi", lexicon)
    other = KeywordSpec("x", (1, 2), blank_id=3)
    with pytest.raises(ConfigError, match="blank"):
        PipelineConfig((hi, other))
    assert PipelineConfig((hi,)).blank_id == lexicon.inventory.blank_id


def test_stage2_crop_skips_blank_frames(lexicon: Lexicon) -> None:
    p, e = utterance(["rain"], lexicon)
    keywords = _keywords(lexicon, ["rain"])
    protos = codebook_prototypes(keywords, p.vocab, e.dim)
    (dropped,), _ = run_pipeline(p, e, PipelineConfig(keywords, tau2=0.0), protos=protos)
    (kept,), _ = run_pipeline(p, e, PipelineConfig(keywords, tau2=0.0, drop_blank_frames=False), protos=protos)
    assert dropped.segment == kept.segment and dropped.s1 == kept.s1
    assert dropped.s2 == pytest.approx(1.0)
    assert kept.s2 < 0.9
    assert run_pipeline(p, e, PipelineConfig(keywords, tau2=0.9, drop_blank_frames=False), protos=protos)[0] == []


def test_all_blank_crop_is_kept_whole(lexicon: Lexicon) -> None:
    p, e = utterance(["hi"], lexicon)
    blank = lexicon.inventory.blank_id
    probs = p.probs.copy()
    speech = np.argmax(probs, axis=1) != blank
    probs[speech] *= 0.45
    probs[speech, blank] = 0.55
    p = PosteriorGram(probs)
    assert not np.any(np.argmax(p.probs, axis=1) != blank)
    keywords = _keywords(lexicon, ["hi"], tau1=0.001)
    protos = codebook_prototypes(keywords, p.vocab, e.dim)
    whole, stats = run_pipeline(p, e, PipelineConfig(keywords, tau2=0.0), protos=protos)
    assert len(whole) == 1 and whole[0].s2 is not None
    assert stats.stage2_activations == 1
    assert whole == run_pipeline(p, e, PipelineConfig(keywords, tau2=0.0, drop_blank_frames=False), protos=protos)[0]


def test_rain_and_rainbow(lexicon: Lexicon) -> None:
    p, e, cfg, protos = _rainbow(lexicon, suppress=False)
    detections, _ = run_pipeline(p, e, cfg, protos=protos)
    assert [d.keyword.text for d in detections] == ["rain", "rainbow"]
    rain, rainbow = detections
    assert rain.segment.end_frame == 5 and rainbow.segment.end_frame == 9
    assert rain.s2 < rainbow.s2
    assert rainbow.s2 == pytest.approx(1.0)

    p, e, cfg, protos = _rainbow(lexicon, suppress=True)
    detections, stats = run_pipeline(p, e, cfg, protos=protos)
    assert [d.keyword.text for d in detections] == ["rainbow"]
    assert stats.candidates == 2 and stats.detections == 1


def test_streaming_holds_prefix_keywords_until_close(lexicon: Lexicon) -> None:
    p, e, cfg, protos = _rainbow(lexicon, suppress=True)
    cascade = StreamingCascade(cfg, protos=protos)
    emitted = []
    for t in range(p.frames):
        emitted += cascade.feed(p.probs[t], e.values[t])
    assert emitted == []
    emitted += cascade.close()
    assert [d.keyword.text for d in emitted] == ["rainbow"]
    assert cascade.detections == run_pipeline(p, e, cfg, protos=protos)[0]
    assert cascade.close() == []


def test_streaming_emits_when_lookahead_arrives(lexicon: Lexicon) -> None:
    p, e = utterance(["hello", "dog"], lexicon)
    keywords = _keywords(lexicon, ["hello"], tau1=0.5)
    cfg = PipelineConfig(keywords, tau2=0.0, crop_margin=2)
    cascade = StreamingCascade(cfg, protos=codebook_prototypes(keywords, p.vocab, e.dim))
    decided_at = {}
    for t in range(p.frames):
        for det in cascade.feed(p.probs[t], e.values[t]):
            decided_at[det.keyword.text] = t + 1
    cascade.close()
    (det,) = cascade.detections
    # the run closes on the first sub-threshold frame; the crop needs two more
    assert decided_at["hello"] >= det.segment.end_frame + 2


def test_streaming_rejects_bad_rows(lexicon: Lexicon) -> None:
    p, e = utterance(["hi"], lexicon)
    keywords = _keywords(lexicon, ["hi"])
    cascade = StreamingCascade(PipelineConfig(keywords), protos=codebook_prototypes(keywords, p.vocab, e.dim))
    with pytest.raises(ConfigError, match="frame 1"):
        cascade.feed(p.probs[0])
    with pytest.raises(KwsError):
        cascade.feed(p.probs[0], e.values[0])

    cascade = StreamingCascade(PipelineConfig(keywords, stage2_mode="off"))
    cascade.feed(p.probs[0])
    with pytest.raises(DimensionMismatchError, match="frame 2"):
        cascade.feed(p.probs[1][:-1])


def test_empty_stream(lexicon: Lexicon) -> None:
    keywords = _keywords(lexicon, ["hi"])
    cfg = PipelineConfig(keywords)
    protos = codebook_prototypes(keywords, 71, 16)
    p = PosteriorGram(np.zeros((0, 71)))
    e = EmbeddingMatrix(np.zeros((0, 16)))
    assert run_pipeline(p, e, cfg, protos=protos) == ([], CascadeStats())
    cascade = StreamingCascade(cfg, protos=protos)
    assert cascade.close() == []
    assert cascade.detections == [] and cascade.stats == CascadeStats()
    assert stage1_utterance_score(p, keywords[0]) == 0.0


def test_two_occurrences(lexicon: Lexicon) -> None:
    p, _ = utterance(["hi", "hi"], lexicon)
    cfg = PipelineConfig(_keywords(lexicon, ["hi"], tau1=0.5, restart=True), stage2_mode="off")
    detections, _ = run_pipeline(p, None, cfg)
    assert [d.segment.end_frame for d in detections] == [5, 11]
    once = PipelineConfig(_keywords(lexicon, ["hi"], tau1=0.5), stage2_mode="off")
    assert len(run_pipeline(p, None, once)[0]) == 1


def test_geometric_fusion(lexicon: Lexicon) -> None:
    p, e = utterance(["hello", "rain"], lexicon, alpha=0.1, seed=2)
    keywords = _keywords(lexicon, ["rain"], restart=True)
    protos = codebook_prototypes(keywords, p.vocab, e.dim)
    plain, _ = run_pipeline(p, e, PipelineConfig(keywords, tau2=0.0), protos=protos)
    fused, _ = run_pipeline(p, e, PipelineConfig(keywords, tau2=0.0, fusion="geometric"), protos=protos)
    assert plain and len(plain) == len(fused)
    for a, b in zip(plain, fused):
        assert a.final == a.s2
        assert b.final == pytest.approx(math.sqrt(b.s1 * b.s2))


def test_timestamp_jitter_is_seeded(lexicon: Lexicon) -> None:
    p, e = utterance(["hello", "alexa", "dog"], lexicon, alpha=0.05)
    keywords = _keywords(lexicon, ["alexa"], restart=True)
    protos = codebook_prototypes(keywords, p.vocab, e.dim)
    base = PipelineConfig(keywords, tau2=0.0)
    exact, _ = run_pipeline(p, e, base, protos=protos)
    segments = set()
    for seed in range(10):
        cfg = PipelineConfig(keywords, tau2=0.0, timestamp_jitter=0.5, seed=seed)
        first, _ = run_pipeline(p, e, cfg, protos=protos)
        assert first == run_pipeline(p, e, cfg, protos=protos)[0]
        assert [d.s1 for d in first] == [d.s1 for d in exact]
        assert [d.frame for d in first] == [d.frame for d in exact]
        segments.update((d.segment.start_frame, d.segment.end_frame) for d in first)
    assert len(segments) > 1


def _random_case(rng: np.random.Generator, lexicon: Lexicon):
    names = sorted(WORDS)
    chosen = [str(w) for w in rng.choice(names, size=int(rng.integers(1, 4)), replace=False)]
    words = [str(w) for w in rng.choice(names, size=int(rng.integers(1, 5)))]
    if rng.random() < 0.7:
        words.insert(int(rng.integers(0, len(words) + 1)), chosen[0])
    alpha, seed, blank_frames = float(rng.uniform(0.0, 0.3)), int(rng.integers(1000)), int(rng.integers(0, 3))
    p, e = utterance(words, lexicon, alpha=alpha, seed=seed, blank_frames=blank_frames)
    restart = bool(rng.random() < 0.5)
    keywords = tuple(
        KeywordSpec.from_text(w, lexicon, tau1=float(rng.choice([0.01, 0.04, 0.2])), restart=restart) for w in chosen
    )
    mode = str(rng.choice(["prototype", "off", "learned"]))
    cfg = PipelineConfig(
        keywords,
        tau2=float(rng.uniform(0.3, 0.9)),
        stage2_mode=mode,
        crop_margin=int(rng.integers(0, 4)),
        min_gap=int(rng.integers(0, 3)),
        suppress_prefixes=bool(rng.random() < 0.5),
        fusion=str(rng.choice(["none", "geometric"])),
        timestamp_jitter=float(rng.choice([0.0, 0.2, 0.5])),
        seed=int(rng.integers(100)),
        max_segment_frames=int(rng.choice([400, 6])),
        drop_blank_frames=bool(rng.random() < 0.7),
    )
    protos = codebook_prototypes(keywords, p.vocab, e.dim) if mode == "prototype" else None
    return p, e, cfg, protos


@pytest.mark.anyio
async def test_streaming_matches_batch(lexicon: Lexicon) -> None:
    model = MatcherModel.initialize(vocab=71, dim=16, seed=0)
    rng = np.random.default_rng(2024)
    for _ in range(100):
        p, e, cfg, protos = _random_case(rng, lexicon)
        expected, expected_stats = run_pipeline(p, e, cfg, model=model, protos=protos)

        send, receive = anyio.create_memory_object_stream(math.inf)
        detections, stats = await run_streaming(iterate_frames(p, e), cfg, model=model, protos=protos, events=send)
        await send.aclose()
        events: List[Detection] = [det async for det in receive]

        assert detections == expected
        assert stats == expected_stats
        assert sorted(events, key=_order_key) == sorted(expected, key=_order_key)


@pytest.mark.anyio
async def test_run_streaming_accepts_bare_rows(lexicon: Lexicon) -> None:
    p, _ = utterance(["hi", "hi"], lexicon)
    cfg = PipelineConfig(_keywords(lexicon, ["hi"], tau1=0.5, restart=True), stage2_mode="off")

    async def rows():
        for row in p.probs:
            yield row

    detections, stats = await run_streaming(rows(), cfg)
    assert detections == run_pipeline(p, None, cfg)[0]
    assert stats.frames == p.frames


@pytest.fixture(scope="module")
def acceptance_corpus(lexicon: Lexicon):
    keywords = _keywords(lexicon, CORPUS_KEYWORDS)
    corpus = build_corpus(keywords, lexicon.inventory, n_pos=20, n_neg=20, alpha=0.1, seed=0)
    return keywords, corpus


def test_acceptance_corpus_layout(acceptance_corpus) -> None:
    keywords, corpus = acceptance_corpus
    assert len(keywords) == 20 and len(corpus) == 800
    assert sum(utt.label for utt in corpus) == 400
    assert {utt.kind for utt in corpus if utt.label == 0} == {kind.value for kind in HARD_KINDS}
    # default layout: blank frames around every token
    assert all(np.argmax(utt.posteriors.probs[0]) == utt.keyword.blank_id for utt in corpus)


def test_cascade_separates_confusable_negatives(acceptance_corpus) -> None:
    keywords, corpus = acceptance_corpus
    protos = codebook_prototypes(keywords, 71, 16)
    cascade_trials, stage1_trials = [], []
    pos, neg = [], []
    for utt in corpus:
        cfg = PipelineConfig((utt.keyword,))
        score = score_utterance(utt.posteriors, utt.embeddings, cfg, utt.keyword.text, protos=protos)
        cascade_trials.append(Trial(utt.label, score))
        stage1_trials.append(Trial(utt.label, stage1_utterance_score(utt.posteriors, utt.keyword)))
        (pos if utt.label else neg).append(score)
    hours = sum(utt.posteriors.hours for utt in corpus if utt.label == 0)
    assert auroc(cascade_trials) >= 0.99
    assert auroc(cascade_trials) >= auroc(stage1_trials)
    (strict,) = recall_at_far(pos, neg, hours, (0.0,))
    assert strict.recall >= 0.95


def test_blank_frames_in_the_crop_hurt_verification(acceptance_corpus) -> None:
    keywords, corpus = acceptance_corpus
    protos = codebook_prototypes(keywords, 71, 16)
    positives = [utt for utt in corpus if utt.label == 1][::10]
    for utt in positives:
        text = utt.keyword.text
        dropped = score_utterance(utt.posteriors, utt.embeddings, PipelineConfig((utt.keyword,)), text, protos=protos)
        kept_cfg = PipelineConfig((utt.keyword,), drop_blank_frames=False)
        kept = score_utterance(utt.posteriors, utt.embeddings, kept_cfg, text, protos=protos)
        assert dropped > kept


def test_sweep_tau1_is_monotone(acceptance_corpus) -> None:
    keywords, corpus = acceptance_corpus
    corpus = corpus[:80]
    cfg = PipelineConfig(keywords, tau2=0.9)
    protos = codebook_prototypes(keywords, 71, 16)
    points = sweep_tau1(corpus, cfg, [0.0, 0.01, 0.04, 0.2, 1.0], protos=protos)
    activations = [pt.stage2_activations for pt in points]
    recalls = [pt.recall for pt in points]
    assert activations == sorted(activations, reverse=True)
    assert recalls == sorted(recalls, reverse=True)
    assert activations[0] >= len(corpus)
    assert activations[-1] == 0 and recalls[-1] == 0.0
    with pytest.raises(MetricError):
        sweep_tau1([u for u in corpus if u.label == 0], cfg, [0.04], protos=protos)


def test_detections_fall_as_tau2_rises(acceptance_corpus) -> None:
    keywords, corpus = acceptance_corpus
    corpus = corpus[:80]
    protos = codebook_prototypes(keywords, 71, 16)
    counts = []
    for tau2 in (0.0, 0.25, 0.5, 0.75, 0.9, 0.99, 1.0):
        found = 0
        for utt in corpus:
            cfg = PipelineConfig((utt.keyword,), tau2=tau2)
            found += len(run_pipeline(utt.posteriors, utt.embeddings, cfg, protos=protos)[0])
        counts.append(found)
    assert counts == sorted(counts, reverse=True)
    assert counts[0] >= sum(utt.label for utt in corpus)
    assert counts[-1] < counts[0]


def _stage1_recalls(lexicon: Lexicon, keywords, alpha: float, taus: np.ndarray, **layout) -> np.ndarray:
    corpus = build_corpus(keywords, lexicon.inventory, n_pos=20, n_neg=0, alpha=alpha, seed=0, **layout)
    assert len(corpus) == 400
    # posteriors carry no seeded noise, so the positives of one keyword share a score
    cache = {}
    scores = []
    for utt in corpus:
        key = (utt.keyword.text, utt.posteriors.probs.tobytes())
        if key not in cache:
            cache[key] = stage1_utterance_score(utt.posteriors, utt.keyword)
        scores.append(cache[key])
    return (np.asarray(scores)[None, :] >= taus[:, None]).mean(axis=1)


@pytest.mark.parametrize("frames_per_token,blank_frames", [(2, 1), (1, 0), (3, 2)])
def test_stage1_recall_drops_with_posterior_noise(lexicon: Lexicon, frames_per_token: int, blank_frames: int) -> None:
    keywords = _keywords(lexicon, CORPUS_KEYWORDS)
    layout = {"frames_per_token": frames_per_token, "blank_frames": blank_frames}
    taus = np.random.default_rng(21).uniform(0.01, 0.99, size=100)
    alphas = (0.0, 0.1, 0.2, 0.3)
    recalls = np.stack([_stage1_recalls(lexicon, keywords, alpha, taus, **layout) for alpha in alphas], axis=1)
    monotone = sum(list(row) == sorted(row, reverse=True) for row in recalls)
    assert monotone >= 95
    assert recalls[:, 0].mean() > recalls[:, -1].mean()


def test_score_utterance_without_candidates(lexicon: Lexicon) -> None:
    p, e = utterance(["dog"], lexicon)
    keywords = _keywords(lexicon, ["rain"])
    protos = codebook_prototypes(keywords, p.vocab, e.dim)
    assert score_utterance(p, e, PipelineConfig(keywords), "rain", protos=protos) == 0.0


def _detection(lexicon: Lexicon, s2: Optional[float]) -> Detection:
    segment = CandidateSegment(11, 30, 0.25)
    return Detection(KeywordSpec.from_text("rain", lexicon), segment, 0.25, s2, 0.75 if s2 else 0.25, 30)


def test_detection_json(lexicon: Lexicon) -> None:
    record = _detection(lexicon, 0.75).to_json(0.01)
    assert record == {
        "keyword": "rain",
        "start_frame": 11,
        "end_frame": 30,
        "start_s": 0.1,
        "end_s": 0.3,
        "s1": 0.25,
        "s2": 0.75,
        "final": 0.75,
    }
    assert _detection(lexicon, None).to_json()["s2"] is None


def test_detection_files(tmp_path: Path, lexicon: Lexicon) -> None:
    path = tmp_path / "x.detections.jsonl"
    write_detections_jsonl(path, [_detection(lexicon, 0.75), _detection(lexicon, None)])
    records = load_detection_records(path)
    assert [r["s2"] for r in records] == [0.75, None]
    copy = tmp_path / "copy.jsonl"
    write_detection_records(copy, records)
    assert copy.read_text() == path.read_text()

    path.write_text('{"keyword": "rain"}\n')
    with pytest.raises(FormatError, match="line 1"):
        load_detection_records(path)
    path.write_text("\nnot json\n")
    with pytest.raises(FormatError, match="line 2"):
        load_detection_records(path)


def test_write_stats(tmp_path: Path) -> None:
    path = tmp_path / "x.stats.json"
    write_stats(path, CascadeStats(frames=100, candidates=3, stage2_activations=2, detections=1))
    assert json.loads(path.read_text()) == {"frames": 100, "stage2_activations": 2, "detections": 1}


def test_load_stats(tmp_path: Path) -> None:
    path = tmp_path / "x.stats.json"
    write_stats(path, CascadeStats(frames=100, candidates=3, stage2_activations=2, detections=1))
    assert load_stats(path) == CascadeStats(frames=100, stage2_activations=2, detections=1)


@pytest.mark.parametrize(
    "text,match",
    [
        ("{}", "'frames'"),
        ("[1]", "JSON object"),
        ("{not json", "x.stats.json"),
        ('{"frames": 1.5, "stage2_activations": 0, "detections": 0}', "'frames'"),
        ('{"frames": 10, "stage2_activations": true, "detections": 0}', "'stage2_activations'"),
        ('{"frames": 10, "stage2_activations": 0, "detections": -2}', "'detections'"),
    ],
)
def test_load_stats_rejects_malformed_files(tmp_path: Path, text: str, match: str) -> None:
    path = tmp_path / "x.stats.json"
    path.write_text(text, encoding="utf-8")
    with pytest.raises(FormatError, match=match):
        load_stats(path)


_GOOD_RECORD = {"keyword": "rain", "start_frame": 3, "end_frame": 9, "start_s": 0.02, "end_s": 0.08}
_GOOD_RECORD.update(s1=0.4, s2=None, final=0.4)


@pytest.mark.parametrize(
    "field,value",
    [
        ("final", None),
        ("final", "0.4"),
        ("s1", float("nan")),
        ("s2", "high"),
        ("keyword", 7),
        ("start_frame", 3.0),
        ("end_frame", True),
        ("end_s", None),
    ],
)
def test_detection_records_reject_bad_values(tmp_path: Path, field: str, value: object) -> None:
    path = tmp_path / "x.detections.jsonl"
    lines = [json.dumps(_GOOD_RECORD), json.dumps({**_GOOD_RECORD, field: value})]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    with pytest.raises(FormatError, match=f"line 2: bad value for '{field}'"):
        load_detection_records(path)
    path.write_text(json.dumps({**_GOOD_RECORD, "s2": 0.9}) + "\n", encoding="utf-8")
    assert load_detection_records(path)[0]["s2"] == 0.9
