"""Stage-2 verification: enrollment prototypes, the phoneme matcher forward pass,
the analytic prototype scorer, loss evaluation and low-rank weight merging.

Weights are plain numpy arrays; there is no training loop here.
"""
import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from kwscascade import tensorio
from kwscascade.ctc_search import CandidateSegment
from kwscascade.exceptions import ConfigError, DimensionMismatchError, EmptyKeywordError, FormatError
from kwscascade.phoneme import TokenSequence
from kwscascade.posterior import EmbeddingMatrix

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

AttentionHook = Callable[[np.ndarray], None]

_BLOCK_PARAMS = ("wq", "wk", "wv", "wo", "ff1", "ff2", "b1", "b2")
_XATTN_PARAMS = ("wq", "wk", "wv", "wo")
_RECUR_PARAMS = ("w_ih", "w_hh", "b_ih", "b_hh")
_LORA_TARGET = re.compile(r"^(blk\d+|xattn)\.(wq|wk|wv)$")
# keeps the cross-entropy finite for saturated sigmoid outputs
_PROB_EPS = 1e-12


class EnrollMode(str, Enum):
    text = "text"
    concat = "concat"
    cross_attention = "cross_attention"


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def positional_encoding(length: int, dim: int, offset: int = 0) -> np.ndarray:
    pos = np.arange(offset, offset + length, dtype=np.float64)[:, None]
    rates = 1.0 / np.power(10000.0, (2 * (np.arange(dim) // 2)) / dim)
    angles = pos * rates[None, :]
    pe = np.empty((length, dim))
    pe[:, 0::2] = np.sin(angles[:, 0::2])
    pe[:, 1::2] = np.cos(angles[:, 1::2])
    return pe


@dataclass(frozen=True, eq=False)
class AttentionBlock:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ff1: Optional[np.ndarray] = None
    ff2: Optional[np.ndarray] = None
    b1: Optional[np.ndarray] = None
    b2: Optional[np.ndarray] = None

    @property
    def dim(self) -> int:
        return self.wq.shape[0]

    def attend(self, queries: np.ndarray, keys: np.ndarray, hook: Optional[AttentionHook] = None) -> np.ndarray:
        q = queries @ self.wq
        k = keys @ self.wk
        v = keys @ self.wv
        weights = softmax(q @ k.T / np.sqrt(self.dim))
        if hook is not None:
            hook(weights)
        return weights @ v @ self.wo

    def __call__(self, x: np.ndarray, hook: Optional[AttentionHook] = None) -> np.ndarray:
        x = x + self.attend(x, x, hook)
        hidden = np.maximum(x @ self.ff1 + self.b1, 0.0)
        return x + hidden @ self.ff2 + self.b2


@dataclass(frozen=True, eq=False)
class RecurrentPooling:
    """Gated recurrent unit; gate columns are ordered reset, update, candidate."""

    w_ih: np.ndarray
    w_hh: np.ndarray
    b_ih: np.ndarray
    b_hh: np.ndarray

    def __call__(self, x: np.ndarray) -> np.ndarray:
        dim = self.w_hh.shape[0]
        h = np.zeros(dim)
        for row in x:
            gi = row @ self.w_ih + self.b_ih
            gh = h @ self.w_hh + self.b_hh
            r = _sigmoid(gi[:dim] + gh[:dim])
            z = _sigmoid(gi[dim : 2 * dim] + gh[dim : 2 * dim])
            n = np.tanh(gi[2 * dim :] + r * gh[2 * dim :])
            h = (1.0 - z) * n + z * h
        return h


@dataclass(frozen=True, eq=False)
class MatcherModel:
    embed: np.ndarray
    blocks: Tuple[AttentionBlock, ...]
    recur: RecurrentPooling
    head_utt_w: np.ndarray
    head_utt_b: np.ndarray
    head_phon_w: np.ndarray
    head_phon_b: np.ndarray
    mark_audio: np.ndarray
    mark_text: np.ndarray
    xattn: Optional[AttentionBlock] = None
    clip_proj_w: Optional[np.ndarray] = None
    clip_proj_b: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if self.embed.ndim != 2:
            raise FormatError(f"Weight embed must be a vocab x dim matrix, got shape {self.embed.shape}")
        named = self.to_named()
        for name, value in named.items():
            if not np.all(np.isfinite(value)):
                raise FormatError(f"Weight {name} has non-finite values")
        d = self.dim
        expected = {
            "mark.audio": (d,),
            "mark.text": (d,),
            "head_utt.w": (d,),
            "head_utt.b": (1,),
            "head_phon.w": (d,),
            "head_phon.b": (1,),
            "recur.w_ih": (d, 3 * d),
            "recur.w_hh": (d, 3 * d),
            "recur.b_ih": (3 * d,),
            "recur.b_hh": (3 * d,),
            "clip_proj.w": (d, d),
            "clip_proj.b": (d,),
        }
        for i in range(len(self.blocks)):
            expected.update({f"blk{i}.{p}": (d, d) for p in ("wq", "wk", "wv", "wo")})
            expected.update({f"blk{i}.ff1": (d, 4 * d), f"blk{i}.ff2": (4 * d, d)})
            expected.update({f"blk{i}.b1": (4 * d,), f"blk{i}.b2": (d,)})
        expected.update({f"xattn.{p}": (d, d) for p in _XATTN_PARAMS})
        for name, value in named.items():
            if name in expected and value.shape != expected[name]:
                raise DimensionMismatchError(f"Weight {name} has shape {value.shape}, expected {expected[name]}")

    @property
    def dim(self) -> int:
        return self.embed.shape[1]

    @property
    def vocab(self) -> int:
        return self.embed.shape[0]

    @classmethod
    def initialize(
        cls,
        vocab: int,
        dim: int,
        seed: int = 0,
        n_blocks: int = 2,
        embed: Optional[np.ndarray] = None,
        clip_projection: bool = False,
    ) -> "MatcherModel":
        rng = np.random.default_rng(seed)
        scale = 1.0 / np.sqrt(dim)

        def mat(rows: int, cols: int) -> np.ndarray:
            return rng.normal(0.0, scale, size=(rows, cols))

        def block() -> AttentionBlock:
            return AttentionBlock(
                wq=mat(dim, dim),
                wk=mat(dim, dim),
                wv=mat(dim, dim),
                wo=mat(dim, dim),
                ff1=mat(dim, 4 * dim),
                ff2=mat(4 * dim, dim) / 2.0,
                b1=np.zeros(4 * dim),
                b2=np.zeros(dim),
            )

        return cls(
            embed=mat(vocab, dim) if embed is None else np.array(embed, dtype=np.float64),
            blocks=tuple(block() for _ in range(n_blocks)),
            recur=RecurrentPooling(mat(dim, 3 * dim), mat(dim, 3 * dim), np.zeros(3 * dim), np.zeros(3 * dim)),
            head_utt_w=rng.normal(0.0, scale, size=dim),
            head_utt_b=np.zeros(1),
            head_phon_w=rng.normal(0.0, scale, size=dim),
            head_phon_b=np.zeros(1),
            mark_audio=rng.normal(0.0, 0.1, size=dim),
            mark_text=rng.normal(0.0, 0.1, size=dim),
            xattn=AttentionBlock(wq=mat(dim, dim), wk=mat(dim, dim), wv=mat(dim, dim), wo=mat(dim, dim)),
            clip_proj_w=np.eye(dim) if clip_projection else None,
            clip_proj_b=np.zeros(dim) if clip_projection else None,
        )

    @classmethod
    def zeros(cls, vocab: int, dim: int, n_blocks: int = 2) -> "MatcherModel":
        template = cls.initialize(vocab, dim, 0, n_blocks).to_named()
        named = {name: np.zeros_like(value) for name, value in template.items()}
        return cls.from_named(named)

    def to_named(self) -> Dict[str, np.ndarray]:
        named = {"embed": self.embed}
        for i, blk in enumerate(self.blocks):
            for p in _BLOCK_PARAMS:
                named[f"blk{i}.{p}"] = getattr(blk, p)
        for p in _RECUR_PARAMS:
            named[f"recur.{p}"] = getattr(self.recur, p)
        named.update(
            {
                "head_utt.w": self.head_utt_w,
                "head_utt.b": self.head_utt_b,
                "head_phon.w": self.head_phon_w,
                "head_phon.b": self.head_phon_b,
                "mark.audio": self.mark_audio,
                "mark.text": self.mark_text,
            }
        )
        if self.xattn is not None:
            for p in _XATTN_PARAMS:
                named[f"xattn.{p}"] = getattr(self.xattn, p)
        if self.clip_proj_w is not None:
            named["clip_proj.w"] = self.clip_proj_w
            named["clip_proj.b"] = self.clip_proj_b
        return named

    @classmethod
    def from_named(cls, named: Dict[str, np.ndarray]) -> "MatcherModel":
        def get(name: str) -> np.ndarray:
            try:
                return np.array(named[name], dtype=np.float64)
            except KeyError:
                raise FormatError(f"Missing weight {name!r}") from None

        n_blocks = len({m.group(1) for m in (re.match(r"^blk(\d+)\.", k) for k in named) if m})
        blocks = tuple(AttentionBlock(**{p: get(f"blk{i}.{p}") for p in _BLOCK_PARAMS}) for i in range(n_blocks))
        xattn = None
        if any(k.startswith("xattn.") for k in named):
            xattn = AttentionBlock(**{p: get(f"xattn.{p}") for p in _XATTN_PARAMS})
        has_proj = "clip_proj.w" in named
        return cls(
            embed=get("embed"),
            blocks=blocks,
            recur=RecurrentPooling(**{p: get(f"recur.{p}") for p in _RECUR_PARAMS}),
            head_utt_w=get("head_utt.w"),
            head_utt_b=get("head_utt.b"),
            head_phon_w=get("head_phon.w"),
            head_phon_b=get("head_phon.b"),
            mark_audio=get("mark.audio"),
            mark_text=get("mark.text"),
            xattn=xattn,
            clip_proj_w=get("clip_proj.w") if has_proj else None,
            clip_proj_b=get("clip_proj.b") if has_proj else None,
        )


@dataclass(frozen=True, eq=False)
class LoraAdapter:
    target: str
    A: np.ndarray
    B: np.ndarray
    scale: float = 1.0

    def __post_init__(self) -> None:
        a, b = np.asarray(self.A, dtype=np.float64), np.asarray(self.B, dtype=np.float64)
        object.__setattr__(self, "A", a)
        object.__setattr__(self, "B", b)
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0] or a.shape[0] != b.shape[1]:
            raise DimensionMismatchError(f"Adapter {self.target}: A {a.shape} and B {b.shape} do not conform")
        if not 1 <= self.rank <= a.shape[0]:
            raise DimensionMismatchError(f"Adapter {self.target}: rank {self.rank} outside [1, {a.shape[0]}]")

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    @property
    def delta(self) -> np.ndarray:
        return self.scale * (self.A @ self.B)


@dataclass(frozen=True, eq=False)
class EnrollmentPrototype:
    mode: EnrollMode
    tokens: TokenSequence
    fused: np.ndarray
    ref_embeddings: Optional[EmbeddingMatrix] = field(default=None, repr=False)

    def __len__(self) -> int:
        return self.fused.shape[0]


def embed_tokens(tokens: Sequence[int], model: MatcherModel) -> np.ndarray:
    if len(tokens) == 0:
        raise EmptyKeywordError("Cannot embed an empty token sequence")
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.min() < 0 or ids.max() >= model.vocab:
        raise IndexError(f"Token ids must lie in [0, {model.vocab})")
    return model.embed[ids]


def crop_embeddings(e: EmbeddingMatrix, seg: CandidateSegment, margin: int = 0) -> EmbeddingMatrix:
    first = max(1, seg.start_frame - margin)
    last = min(e.frames, seg.end_frame + margin)
    return EmbeddingMatrix(e.values[first - 1 : last])


def fuse_enrollment(
    mode: Union[EnrollMode, str],
    tokens: Sequence[int],
    ref: Optional[EmbeddingMatrix],
    model: MatcherModel,
) -> EnrollmentPrototype:
    mode = EnrollMode(mode)
    text = embed_tokens(tokens, model)
    if mode is EnrollMode.text:
        return EnrollmentPrototype(mode, tuple(tokens), text)
    if ref is None or ref.frames == 0:
        raise ConfigError(f"Enrollment mode {mode.value!r} needs reference audio embeddings")
    if ref.dim != model.dim:
        raise DimensionMismatchError(f"Reference embeddings have dim {ref.dim}, model expects {model.dim}")
    if mode is EnrollMode.concat:
        n_text = text.shape[0]
        fused = np.concatenate(
            [
                text + positional_encoding(n_text, model.dim) + model.mark_text,
                ref.values + positional_encoding(ref.frames, model.dim, offset=n_text) + model.mark_audio,
            ]
        )
        return EnrollmentPrototype(mode, tuple(tokens), fused, ref)
    if model.xattn is None:
        raise ConfigError("Cross-attention enrollment needs xattn.* weights")
    return EnrollmentPrototype(mode, tuple(tokens), model.xattn.attend(text, ref.values), ref)


class MatcherOutput(NamedTuple):
    p_utt: float
    p_phon: np.ndarray


def matcher_forward(
    clip: EmbeddingMatrix,
    proto: EnrollmentPrototype,
    model: MatcherModel,
    debug: Optional[AttentionHook] = None,
) -> MatcherOutput:
    if clip.dim != model.dim or proto.fused.shape[1] != model.dim:
        raise DimensionMismatchError(
            f"Matcher dim {model.dim} vs clip dim {clip.dim} and prototype dim {proto.fused.shape[1]}"
        )
    if len(proto) == 0:
        raise ConfigError("Enrollment prototype is empty")
    audio = clip.values
    if model.clip_proj_w is not None:
        audio = audio @ model.clip_proj_w + model.clip_proj_b
    n_audio = audio.shape[0]
    x = np.concatenate([audio + model.mark_audio, proto.fused + model.mark_text])
    x = x + positional_encoding(x.shape[0], model.dim)
    for blk in model.blocks:
        x = blk(x, debug)
    pooled = model.recur(x)
    p_utt = float(_sigmoid(pooled @ model.head_utt_w + model.head_utt_b[0]))
    p_phon = _sigmoid(x[n_audio:] @ model.head_phon_w + model.head_phon_b[0])
    return MatcherOutput(p_utt, p_phon)


def _cosine_cost(clip: np.ndarray, protos: np.ndarray) -> np.ndarray:
    clip_norm = np.linalg.norm(clip, axis=1)
    proto_norm = np.linalg.norm(protos, axis=1)
    denom = np.outer(clip_norm, proto_norm)
    with np.errstate(divide="ignore", invalid="ignore"):
        cos = np.where(denom > 0.0, (clip @ protos.T) / np.where(denom > 0.0, denom, 1.0), 0.0)
    return 1.0 - cos


def prototype_match(clip: EmbeddingMatrix, proto: EnrollmentPrototype) -> float:
    """Monotonic alignment of clip frames onto prototype positions scored as
    one minus the mean cosine distance along the cheapest path.
    """
    if clip.frames == 0 or len(proto) == 0:
        raise ConfigError("Prototype matching needs a non-empty clip and prototype")
    if clip.dim != proto.fused.shape[1]:
        raise DimensionMismatchError(f"Clip dim {clip.dim} != prototype dim {proto.fused.shape[1]}")
    cost = _cosine_cost(clip.values, proto.fused)
    n, m = cost.shape
    total = np.full((n, m), np.inf)
    steps = np.zeros((n, m), dtype=np.int64)
    total[0, 0], steps[0, 0] = cost[0, 0], 1
    for i in range(n):
        for j in range(m):
            if i == 0 and j == 0:
                continue
            # diagonal first, then advance clip, then advance prototype
            best, length = np.inf, 0
            for pi, pj in ((i - 1, j - 1), (i - 1, j), (i, j - 1)):
                if pi >= 0 and pj >= 0 and total[pi, pj] < best:
                    best, length = total[pi, pj], steps[pi, pj]
            total[i, j] = best + cost[i, j]
            steps[i, j] = length + 1
    score = 1.0 - total[-1, -1] / steps[-1, -1]
    return float(min(max(score, 0.0), 1.0))


class LossTerms(NamedTuple):
    l_utt: float
    l_phon: float
    total: float


def _bce(p: np.ndarray, y: np.ndarray) -> np.ndarray:
    if np.any(~((p >= 0.0) & (p <= 1.0))):
        raise ValueError(f"Probabilities must lie in [0, 1], got {p}")
    p = np.clip(p, _PROB_EPS, 1.0 - _PROB_EPS)
    return -(y * np.log(p) + (1.0 - y) * np.log1p(-p))


def joint_loss(p_utt: float, p_phon: Sequence[float], y_utt: int, y_phon: Sequence[int]) -> LossTerms:
    p_phon_arr = np.asarray(p_phon, dtype=np.float64)
    y_phon_arr = np.asarray(y_phon, dtype=np.float64)
    if p_phon_arr.shape != y_phon_arr.shape:
        raise DimensionMismatchError(f"{p_phon_arr.size} phoneme predictions but {y_phon_arr.size} labels")
    l_utt = float(_bce(np.float64(p_utt), np.float64(y_utt)))
    l_phon = float(np.mean(_bce(p_phon_arr, y_phon_arr))) if p_phon_arr.size else 0.0
    return LossTerms(l_utt, l_phon, l_utt + l_phon)


def lora_merge(model: MatcherModel, adapters: Sequence[LoraAdapter]) -> MatcherModel:
    named = {name: value.copy() for name, value in model.to_named().items()}
    for adapter in adapters:
        if not _LORA_TARGET.match(adapter.target) or adapter.target not in named:
            raise ConfigError(f"Unknown LoRA target {adapter.target!r}")
        weight = named[adapter.target]
        delta = adapter.delta
        if delta.shape != weight.shape:
            raise DimensionMismatchError(f"Adapter {adapter.target}: delta {delta.shape} vs weight {weight.shape}")
        if not np.any(delta):
            continue
        named[adapter.target] = weight + delta
        logger.debug("Merged rank-%d adapter into %s (scale %g)", adapter.rank, adapter.target, adapter.scale)
    return MatcherModel.from_named(named)


def split_adapters(named: Dict[str, np.ndarray]) -> Tuple[Dict[str, np.ndarray], List[LoraAdapter]]:
    """Separate ``lora.{target}.A|B[|scale]`` entries from ordinary weights."""
    plain: Dict[str, np.ndarray] = {}
    parts: Dict[str, Dict[str, np.ndarray]] = {}
    for name, value in named.items():
        if name.startswith("lora."):
            target, _, kind = name[len("lora.") :].rpartition(".")
            if kind not in ("A", "B", "scale") or not target:
                raise FormatError(f"Malformed adapter entry {name!r}")
            parts.setdefault(target, {})[kind] = value
        else:
            plain[name] = value
    adapters = []
    for target, entry in parts.items():
        if "A" not in entry or "B" not in entry:
            raise FormatError(f"Adapter {target!r} needs both A and B")
        scale = float(entry["scale"].reshape(-1)[0]) if "scale" in entry else 1.0
        adapters.append(LoraAdapter(target, entry["A"], entry["B"], scale))
    return plain, adapters


def adapters_to_named(adapters: Sequence[LoraAdapter]) -> Dict[str, np.ndarray]:
    named: Dict[str, np.ndarray] = {}
    for adapter in adapters:
        named[f"lora.{adapter.target}.A"] = adapter.A
        named[f"lora.{adapter.target}.B"] = adapter.B
        if adapter.scale != 1.0:
            named[f"lora.{adapter.target}.scale"] = np.array(adapter.scale)
    return named


def load_weights(path: PathLike) -> MatcherModel:
    plain, adapters = split_adapters(tensorio.read_named(path))
    model = MatcherModel.from_named(plain)
    return lora_merge(model, adapters) if adapters else model


def save_weights(model: MatcherModel, path: PathLike) -> None:
    tensorio.write_named(path, model.to_named())
