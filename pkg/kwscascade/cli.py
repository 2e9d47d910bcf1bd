import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import anyio
import numpy as np

from kwscascade import __version__
from kwscascade.cascade import (
    CascadeStats,
    Fusion,
    PipelineConfig,
    Stage2Mode,
    build_prototypes,
    codebook_prototypes,
    load_detection_records,
    load_stats,
    run_pipeline,
    write_detection_records,
    write_detections_jsonl,
    write_stats,
)
from kwscascade.concurrency import map_in_threads
from kwscascade.corpus import HARD_KINDS, NegativeKind, build_corpus
from kwscascade.ctc_search import DEFAULT_TAU1, CandidateSegment, KeywordSpec, load_keywords, perturb_timestamps
from kwscascade.exceptions import ConfigError, FormatError, KwsError
from kwscascade.matcher import EnrollMode, MatcherModel, lora_merge, load_weights, save_weights, split_adapters
from kwscascade.metrics import (
    DEFAULT_FAR_TARGETS,
    Trial,
    auroc,
    det_curve,
    eer,
    load_trials,
    recall_at_far,
    write_det_csv,
)
from kwscascade.phoneme import Lexicon, PhonemeInventory, default_inventory, g2p, load_inventory, load_lexicon, p_wer
from kwscascade.posterior import (
    DEFAULT_FRAME_PERIOD,
    EmbeddingMatrix,
    PosteriorGram,
    greedy_decode,
    load_embeddings,
    load_posteriors,
    perturb_uniform,
    save_embeddings,
    save_posteriors,
)
from kwscascade.tensorio import read_named

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3


@dataclass
class RunManifest:
    command: str
    argv: List[str]
    seed: int
    inventory: Optional[str]
    lexicon: Optional[str]
    inputs: List[str] = field(default_factory=list)
    outputs: List[str] = field(default_factory=list)
    options: Dict[str, object] = field(default_factory=dict)
    version: str = __version__

    def write(self, out_dir: Path) -> Path:
        path = out_dir / "manifest.json"
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")
        logger.debug("Wrote run manifest %s", path)
        return path


def _manifest(args: argparse.Namespace, argv: Sequence[str], **options: object) -> RunManifest:
    return RunManifest(
        command=args.command,
        argv=list(argv),
        seed=args.seed,
        inventory=None if args.inventory is None else str(args.inventory),
        lexicon=None if args.lexicon is None else str(args.lexicon),
        options=options,
    )


def _inventory(args: argparse.Namespace) -> PhonemeInventory:
    return default_inventory() if args.inventory is None else load_inventory(args.inventory)


def _lexicon(args: argparse.Namespace, inventory: PhonemeInventory) -> Lexicon:
    if args.lexicon is None:
        raise ConfigError(f"'{args.command}' needs --lexicon")
    return load_lexicon(args.lexicon, inventory)


def _out_dir(args: argparse.Namespace) -> Path:
    args.out_dir.mkdir(parents=True, exist_ok=True)
    return args.out_dir


def _stems(paths: Sequence[Path]) -> List[str]:
    stems = [p.stem for p in paths]
    if len(set(stems)) != len(stems):
        raise ConfigError("Input files must have distinct names")
    return stems


def _run_threaded(call, items, workers: int):
    return anyio.run(map_in_threads, call, list(items), workers)


def cmd_spot(args: argparse.Namespace) -> int:
    inventory = _inventory(args)
    lexicon = _lexicon(args, inventory)
    keywords = load_keywords(args.keywords, lexicon, default_tau1=args.tau1, restart=args.restart)
    cfg = PipelineConfig(
        keywords=tuple(keywords),
        tau2=args.tau2,
        stage2_mode=args.stage2,
        enroll_mode=args.enroll,
        crop_margin=args.crop_margin,
        min_gap=args.min_gap,
        suppress_prefixes=args.suppress_prefixes,
        fusion=args.fusion,
        timestamp_jitter=args.jitter,
        seed=args.seed,
        max_segment_frames=args.max_segment_frames,
        frame_period=args.frame_period,
        drop_blank_frames=not args.keep_blank_frames,
    )
    stage2 = cfg.stage2_mode is not Stage2Mode.off
    if stage2 and not args.embeddings:
        raise ConfigError(f"--stage2 {cfg.stage2_mode.value} needs --embeddings")
    if args.embeddings and len(args.embeddings) != len(args.posteriors):
        raise ConfigError(f"{len(args.posteriors)} posterior files but {len(args.embeddings)} embedding files")
    if cfg.stage2_mode is Stage2Mode.learned and args.weights is None:
        raise ConfigError("--stage2 learned needs --weights")
    if cfg.stage2_mode is Stage2Mode.prototype and args.weights is None:
        if cfg.enroll_mode is not EnrollMode.text or args.reference:
            raise ConfigError("--enroll and --reference need --weights; the codebook prototypes are text only")

    model: Optional[MatcherModel] = load_weights(args.weights) if args.weights else None
    refs = {}
    for item in args.reference or ():
        text, sep, path = item.partition("=")
        if not sep:
            raise ConfigError(f"--reference expects TEXT=PATH, got {item!r}")
        refs[text] = load_embeddings(path)

    out_dir = _out_dir(args)
    stems = _stems(args.posteriors)
    embeddings = args.embeddings if stage2 else [None] * len(args.posteriors)
    posteriors = [load_posteriors(path, inventory, args.frame_period) for path in args.posteriors]
    frames = [None if path is None else load_embeddings(path) for path in embeddings]

    protos = None
    if model is not None and stage2:
        protos = build_prototypes(cfg, model, refs)
    elif cfg.stage2_mode is Stage2Mode.prototype:
        protos = codebook_prototypes(cfg.keywords, inventory.size, frames[0].dim)

    def spot_one(job: Tuple[str, PosteriorGram, Optional[EmbeddingMatrix]]) -> CascadeStats:
        stem, p, e = job
        detections, stats = run_pipeline(p, e, cfg, model, protos)
        write_detections_jsonl(out_dir / f"{stem}.detections.jsonl", detections, cfg.frame_period)
        write_stats(out_dir / f"{stem}.stats.json", stats)
        return stats

    results = _run_threaded(spot_one, zip(stems, posteriors, frames), args.workers)
    outputs = []
    for stem, stats in zip(stems, results):
        print(f"{stem}\t{stats.detections} detections\t{stats.stage2_activations} stage-2 activations")
        outputs += [str(out_dir / f"{stem}.detections.jsonl"), str(out_dir / f"{stem}.stats.json")]

    manifest = _manifest(
        args,
        args.argv,
        keywords=str(args.keywords),
        stage2=cfg.stage2_mode.value,
        enroll=cfg.enroll_mode.value,
        fusion=cfg.fusion.value,
        tau1=args.tau1,
        tau2=cfg.tau2,
        restart=args.restart,
        suppress_prefixes=cfg.suppress_prefixes,
        jitter=cfg.timestamp_jitter,
        drop_blank_frames=cfg.drop_blank_frames,
    )
    manifest.inputs = [str(p) for p in args.posteriors] + [str(p) for p in args.embeddings or ()]
    manifest.outputs = outputs
    manifest.write(out_dir)
    return EXIT_OK


def _read_labels(path: Path) -> List[Tuple[str, int]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"name", "label"} <= set(reader.fieldnames):
            raise FormatError(f"{path}: expected a header with 'name' and 'label' columns")
        labels = []
        for lineno, row in enumerate(reader, start=2):
            if row["name"] is None or row["label"] not in ("0", "1"):
                raise FormatError(f"{path}: line {lineno}: bad label {row.get('label')!r}")
            labels.append((row["name"], int(row["label"])))
    return labels


def _trials_from_detections(args: argparse.Namespace) -> Tuple[List[Trial], List[float], float]:
    trials = []
    false_alarms: List[float] = []
    frames = 0
    for name, label in _read_labels(args.labels):
        records = load_detection_records(args.detections / f"{name}.detections.jsonl")
        if args.keyword is not None:
            records = [r for r in records if r["keyword"] == args.keyword]
        finals = [float(r["final"]) for r in records]
        trials.append(Trial(label, max(finals, default=0.0)))
        if label == 0:
            false_alarms += finals
            if args.negative_hours is None:
                frames += load_stats(args.detections / f"{name}.stats.json").frames
    hours = args.negative_hours if args.negative_hours is not None else frames * args.frame_period / 3600.0
    return trials, false_alarms, hours


def cmd_eval(args: argparse.Namespace) -> int:
    if (args.trials is None) == (args.detections is None):
        raise ConfigError("eval needs exactly one of --trials or --detections")
    if args.trials is not None:
        trials = load_trials(args.trials)
        false_alarms = [t.score for t in trials if t.label == 0]
        hours = 1.0 if args.negative_hours is None else args.negative_hours
    else:
        if args.labels is None:
            raise ConfigError("--detections needs --labels")
        trials, false_alarms, hours = _trials_from_detections(args)

    area = auroc(trials)
    rate = eer(trials)
    positives = [t.score for t in trials if t.label == 1]
    print(f"AUROC\t{100.0 * area:.2f}")
    print(f"EER\t{100.0 * rate:.2f}")
    for point in recall_at_far(positives, false_alarms, hours, args.far_targets):
        print(f"Recall@FAR {point.far_target:g}/h\t{100.0 * point.recall:.2f}")

    out_dir = _out_dir(args)
    det_path = out_dir / "det.csv"
    if false_alarms:
        points = det_curve(positives, false_alarms, hours)
    else:
        logger.warning("No negative scores; writing an empty DET curve")
        points = []
    write_det_csv(det_path, points)
    source = args.trials if args.trials is not None else args.detections
    manifest = _manifest(args, args.argv, negative_hours=hours, far_targets=list(args.far_targets))
    manifest.inputs = [str(source)] + ([] if args.labels is None else [str(args.labels)])
    manifest.outputs = [str(det_path)]
    manifest.write(out_dir)
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    inventory = _inventory(args)
    lexicon = _lexicon(args, inventory)
    keywords = [KeywordSpec.from_text(text, lexicon) for text in args.keyword]
    if args.hard_negatives:
        kinds: Sequence[NegativeKind] = HARD_KINDS
        distance = args.hard_negatives
    else:
        kinds, distance = (NegativeKind.easy,), 1
    corpus = build_corpus(
        keywords,
        inventory,
        n_pos=args.pos,
        n_neg=args.neg,
        alpha=args.alpha,
        seed=args.seed,
        kinds=kinds,
        distance=distance,
        frames_per_token=args.frames_per_token,
        blank_frames=args.blank_frames,
        dim=args.dim,
    )
    out_dir = _out_dir(args)
    outputs = []
    labels_path = out_dir / "labels.csv"
    with open(labels_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "label", "kind", "keyword", "phonemes"])
        for utt in corpus:
            save_posteriors(utt.posteriors, out_dir / f"{utt.name}.kwsp")
            save_embeddings(utt.embeddings, out_dir / f"{utt.name}.kwse")
            outputs += [str(out_dir / f"{utt.name}.kwsp"), str(out_dir / f"{utt.name}.kwse")]
            writer.writerow([utt.name, utt.label, utt.kind, utt.keyword.text, " ".join(inventory.decode(utt.tokens))])
    outputs.append(str(labels_path))
    print(f"Wrote {len(corpus)} utterances to {out_dir}")

    manifest = _manifest(
        args,
        args.argv,
        keywords=list(args.keyword),
        pos=args.pos,
        neg=args.neg,
        alpha=args.alpha,
        hard_negatives=args.hard_negatives,
        frames_per_token=args.frames_per_token,
        blank_frames=args.blank_frames,
        dim=args.dim,
    )
    manifest.outputs = outputs
    manifest.write(out_dir)
    return EXIT_OK


def _read_references(path: Path) -> Dict[str, str]:
    refs = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n\r")
            if not line.strip():
                continue
            name, sep, text = line.partition("\t")
            if not sep:
                raise FormatError(f"{path}: line {lineno}: expected 'name<TAB>text'")
            refs[name.strip()] = text
    return refs


def cmd_decode(args: argparse.Namespace) -> int:
    inventory = _inventory(args)
    lexicon = _lexicon(args, inventory)
    refs = _read_references(args.reference)
    stems = _stems(args.posteriors)
    missing = [stem for stem in stems if stem not in refs]
    if missing:
        raise ConfigError(f"No reference transcript for {missing}")

    def decode_one(path: Path):
        return greedy_decode(load_posteriors(path, inventory, args.frame_period), inventory)

    hyps = _run_threaded(decode_one, args.posteriors, args.workers)
    pairs = [(g2p(refs[stem], lexicon), hyp) for stem, hyp in zip(stems, hyps)]
    out_dir = _out_dir(args)
    hyp_path = out_dir / "decode.tsv"
    with open(hyp_path, "w", encoding="utf-8") as fh:
        for stem, hyp in zip(stems, hyps):
            fh.write(f"{stem}\t{' '.join(inventory.decode(hyp))}\n")
    print(f"P-WER\t{100.0 * p_wer(pairs):.2f}")

    manifest = _manifest(args, args.argv, reference=str(args.reference))
    manifest.inputs = [str(p) for p in args.posteriors]
    manifest.outputs = [str(hyp_path)]
    manifest.write(out_dir)
    return EXIT_OK


def _jitter_records(records: List[Dict[str, object]], fraction: float, frames: int, seed: int, period: float):
    rng = np.random.default_rng(seed)
    out = []
    for record in records:
        segment = CandidateSegment(int(record["start_frame"]), int(record["end_frame"]), float(record["s1"]))
        moved = perturb_timestamps(segment, fraction, frames, int(rng.integers(2**31)))
        out.append(
            dict(
                record,
                start_frame=moved.start_frame,
                end_frame=moved.end_frame,
                start_s=round((moved.start_frame - 1) * period, 6),
                end_s=round(moved.end_frame * period, 6),
            )
        )
    return out


def cmd_perturb(args: argparse.Namespace) -> int:
    if not args.posteriors and not args.detections:
        raise ConfigError("perturb needs --posteriors or --detections")
    inventory = _inventory(args)
    out_dir = _out_dir(args)
    outputs = []
    for path in args.posteriors or ():
        target = out_dir / f"{path.stem}.perturbed{path.suffix}"
        save_posteriors(perturb_uniform(load_posteriors(path, inventory, args.frame_period), args.alpha), target)
        outputs.append(str(target))
    for index, path in enumerate(args.detections or ()):
        records = load_detection_records(path)
        frames = args.frames or max((int(r["end_frame"]) for r in records), default=1)
        seed = int(np.random.SeedSequence([args.seed, index]).generate_state(1)[0])
        target = out_dir / f"{path.name.split('.')[0]}.jittered.jsonl"
        write_detection_records(target, _jitter_records(records, args.jitter, frames, seed, args.frame_period))
        outputs.append(str(target))
    print(f"Wrote {len(outputs)} perturbed files to {out_dir}")

    manifest = _manifest(args, args.argv, alpha=args.alpha, jitter=args.jitter, frames=args.frames)
    manifest.inputs = [str(p) for p in (args.posteriors or [])] + [str(p) for p in (args.detections or [])]
    manifest.outputs = outputs
    manifest.write(out_dir)
    return EXIT_OK


def cmd_merge_lora(args: argparse.Namespace) -> int:
    base = load_weights(args.base)
    plain, adapters = split_adapters(read_named(args.adapter))
    if plain:
        raise ConfigError(f"{args.adapter}: adapter file carries non-adapter weights {sorted(plain)}")
    merged = lora_merge(base, adapters)
    out_dir = _out_dir(args)
    target = args.output if args.output is not None else out_dir / "merged.kwsw"
    save_weights(merged, target)
    print(f"Merged {len(adapters)} adapters into {target}")

    manifest = _manifest(args, args.argv, adapters=[a.target for a in adapters])
    manifest.inputs = [str(args.base), str(args.adapter)]
    manifest.outputs = [str(target)]
    manifest.write(out_dir)
    return EXIT_OK


def _probability(value: str) -> float:
    number = float(value)
    if not 0.0 <= number <= 1.0:
        raise argparse.ArgumentTypeError(f"{value} is not in [0, 1]")
    return number


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kwscascade", description="Two-stage keyword spotting over posteriorgrams")
    parser.add_argument("-v", "--verbose", action="store_true", help="log at debug level")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--inventory", type=Path, help="phoneme inventory, one label per line, blank first")
    parser.add_argument("--lexicon", type=Path, help="pronunciation lexicon, word<TAB>PH1 PH2 ...")
    parser.add_argument("--out-dir", type=Path, default=Path("."))
    parser.add_argument("--workers", type=int, default=4, help="input files processed concurrently")
    parser.add_argument("--frame-period", type=float, default=DEFAULT_FRAME_PERIOD)
    sub = parser.add_subparsers(dest="command", required=True)

    spot = sub.add_parser("spot", help="run the cascade over posteriorgrams")
    spot.add_argument("--posteriors", type=Path, nargs="+", required=True)
    spot.add_argument("--embeddings", type=Path, nargs="+")
    spot.add_argument("--keywords", type=Path, required=True, help="keyword<TAB>tau1 per line")
    spot.add_argument("--weights", type=Path)
    spot.add_argument("--reference", action="append", metavar="TEXT=PATH", help="enrollment audio embeddings")
    spot.add_argument("--stage2", choices=[m.value for m in Stage2Mode], default=Stage2Mode.prototype.value)
    spot.add_argument("--enroll", choices=[m.value for m in EnrollMode], default=EnrollMode.text.value)
    spot.add_argument("--fusion", choices=[m.value for m in Fusion], default=Fusion.none.value)
    spot.add_argument("--tau1", type=_probability, default=DEFAULT_TAU1)
    spot.add_argument("--tau2", type=_probability, default=0.5)
    spot.add_argument("--crop-margin", type=int, default=0)
    spot.add_argument("--min-gap", type=int, default=0)
    spot.add_argument("--max-segment-frames", type=int, default=400)
    spot.add_argument("--jitter", type=_probability, default=0.0, help="timestamp jitter as a fraction of length")
    spot.add_argument("--suppress-prefixes", action="store_true")
    spot.add_argument("--restart", action="store_true", help="let a keyword start on any frame")
    spot.add_argument("--keep-blank-frames", action="store_true", help="keep blank frames in stage-2 crops")
    spot.set_defaults(handler=cmd_spot)

    evaluate = sub.add_parser("eval", help="AUROC, EER, Recall@FAR and DET")
    evaluate.add_argument("--trials", type=Path, help="CSV of label,score")
    evaluate.add_argument("--detections", type=Path, help="directory of spot outputs")
    evaluate.add_argument("--labels", type=Path, help="CSV with name and label columns")
    evaluate.add_argument("--keyword", help="only count detections of this keyword")
    evaluate.add_argument("--negative-hours", type=float)
    evaluate.add_argument("--far-targets", type=float, nargs="+", default=list(DEFAULT_FAR_TARGETS))
    evaluate.set_defaults(handler=cmd_eval)

    synth = sub.add_parser("synth", help="write a synthetic labelled corpus")
    synth.add_argument("--keyword", action="append", required=True)
    synth.add_argument("--pos", type=int, default=5)
    synth.add_argument("--neg", type=int, default=5)
    synth.add_argument("--alpha", type=_probability, default=0.0)
    synth.add_argument("--hard-negatives", type=int, default=0, metavar="K", help="negatives K edits away")
    synth.add_argument("--frames-per-token", type=int, default=2)
    synth.add_argument("--blank-frames", type=int, default=1)
    synth.add_argument("--dim", type=int, default=16)
    synth.set_defaults(handler=cmd_synth)

    decode = sub.add_parser("decode", help="greedy phoneme decoding and P-WER")
    decode.add_argument("--posteriors", type=Path, nargs="+", required=True)
    decode.add_argument("--reference", type=Path, required=True, help="name<TAB>text per line")
    decode.set_defaults(handler=cmd_decode)

    perturb = sub.add_parser("perturb", help="perturb posteriors or detection timestamps")
    perturb.add_argument("--posteriors", type=Path, nargs="+")
    perturb.add_argument("--detections", type=Path, nargs="+")
    perturb.add_argument("--alpha", type=_probability, default=0.0)
    perturb.add_argument("--jitter", type=_probability, default=0.0)
    perturb.add_argument("--frames", type=int, help="stream length used to clamp jittered detections")
    perturb.set_defaults(handler=cmd_perturb)

    merge = sub.add_parser("merge-lora", help="fold low-rank adapters into matcher weights")
    merge.add_argument("--base", type=Path, required=True)
    merge.add_argument("--adapter", type=Path, required=True)
    merge.add_argument("--output", type=Path)
    merge.set_defaults(handler=cmd_merge_lora)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if not e.code else EXIT_CONFIG
    args.argv = argv
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s: %(message)s",
    )
    try:
        return args.handler(args)
    except (KwsError, ValueError) as e:
        print(f"kwscascade {args.command}: error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"kwscascade {args.command}: I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
