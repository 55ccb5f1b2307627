"""Corpus data model, sampling strategies, disjoint monolingual sharding,
synthetic language-pair generation, and token-budget batching.

Corpora are immutable values. Every sampling operation is a pure function of
(input, parameters, seed).
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import textkit
from .util import atomic_write_text, round_half_up

NATURAL = "natural"
BACK_TRANSLATED = "back_translated"
DISTILLED_ENSEMBLE = "distilled_ensemble"
DISTILLED_R2L = "distilled_r2l"

PROVENANCES = (NATURAL, BACK_TRANSLATED, DISTILLED_ENSEMBLE, DISTILLED_R2L)

IdSeq = Tuple[int, ...]
Pair = Tuple[IdSeq, IdSeq]


@dataclass(frozen=True)
class ParallelCorpus:
    """Aligned sentence pairs with a provenance label.

    ``segments`` records (provenance, count, meta) spans when corpora of
    different provenance are concatenated; a plain corpus has one segment.
    """

    pairs: Tuple[Pair, ...]
    provenance: str = NATURAL
    direction: Tuple[str, str] = ("src", "tgt")
    meta: Dict = field(default_factory=dict, compare=False)
    segments: Tuple[Tuple[str, int], ...] = ()

    def __post_init__(self):
        for src, tgt in self.pairs:
            if len(src) == 0 or len(tgt) == 0:
                raise ValueError("parallel corpus must not contain empty sides")
        if not self.segments:
            object.__setattr__(self, "segments", ((self.provenance, len(self.pairs)),))

    def __len__(self) -> int:
        return len(self.pairs)

    def with_pairs(self, pairs: Sequence[Pair]) -> "ParallelCorpus":
        return ParallelCorpus(
            pairs=tuple(pairs),
            provenance=self.provenance,
            direction=self.direction,
            meta=dict(self.meta),
        )

    def swapped(self) -> "ParallelCorpus":
        """The reverse direction: targets become sources."""
        return ParallelCorpus(
            pairs=tuple((t, s) for s, t in self.pairs),
            provenance=self.provenance,
            direction=(self.direction[1], self.direction[0]),
            meta=dict(self.meta),
        )

    @property
    def provenances(self) -> Tuple[str, ...]:
        return tuple(p for p, _ in self.segments)

    @staticmethod
    def concat(corpora: Sequence["ParallelCorpus"]) -> "ParallelCorpus":
        """Explicit concatenation; per-segment provenance is recorded."""
        if not corpora:
            raise ValueError("nothing to concatenate")
        direction = corpora[0].direction
        for c in corpora:
            if c.direction != direction:
                raise ValueError(f"direction mismatch: {c.direction} vs {direction}")
        pairs: List[Pair] = []
        segments: List[Tuple[str, int]] = []
        for c in corpora:
            pairs.extend(c.pairs)
            segments.extend(c.segments)
        provs = {p for p, _ in segments}
        out = ParallelCorpus(
            pairs=tuple(pairs),
            provenance=provs.pop() if len(provs) == 1 else "mixed",
            direction=direction,
            meta=dict(corpora[0].meta),
        )
        object.__setattr__(out, "segments", tuple(segments))
        return out


@dataclass(frozen=True)
class MonoCorpus:
    """Monolingual sentences; ``shard_id`` marks membership in a disjoint split."""

    sentences: Tuple[IdSeq, ...]
    lang: str = "mono"
    shard_id: Optional[int] = None
    meta: Dict = field(default_factory=dict, compare=False)

    def __len__(self) -> int:
        return len(self.sentences)


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """Desk-scale stand-in for a real language pair.

    The transformation is deterministic and invertible at noise_rate=0, so an
    oracle translator exists and scores BLEU 100 on clean data.
    """

    vocab_size: int
    min_len: int = 5
    max_len: int = 15
    transformation: str = "substitution_cipher"
    noise_rate: float = 0.0
    seed: int = 0
    zipf_alpha: float = 1.0
    src_lang: str = "src"
    tgt_lang: str = "tgt"

    def __post_init__(self):
        if self.transformation not in ("reverse", "substitution_cipher", "shift_reorder"):
            raise ValueError(f"unknown transformation: {self.transformation!r}")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ValueError("noise_rate must be in [0, 1]")
        if self.min_len < 1 or self.max_len < self.min_len:
            raise ValueError("invalid length range")


def upsample(corpus: ParallelCorpus, ratio: float, seed: int) -> ParallelCorpus:
    """Sample with replacement under the premise of using all data.

    The output has round(ratio*N) pairs and contains every original at least
    once; the extras are drawn uniformly with replacement and spliced in at
    seeded random positions (originals keep their relative order).
    """
    if ratio < 1.0:
        raise ValueError("upsample requires ratio >= 1.0; use bagging_sample to shrink")
    n = len(corpus)
    size = round_half_up(ratio * n)
    rng = np.random.default_rng(seed)
    pairs = list(corpus.pairs)
    for idx in rng.integers(0, n, size=size - n):
        pos = int(rng.integers(0, len(pairs) + 1))
        pairs.insert(pos, corpus.pairs[int(idx)])
    out = corpus.with_pairs(pairs)
    out.meta["sampling"] = {"kind": "upsample", "ratio": ratio, "seed": seed}
    return out


def bagging_sample(corpus: ParallelCorpus, ratio: float, seed: int) -> ParallelCorpus:
    """Plain bootstrap: round(ratio*N) i.i.d. draws with replacement."""
    if ratio <= 0:
        raise ValueError("bagging ratio must be > 0")
    n = len(corpus)
    size = round_half_up(ratio * n)
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, n, size=size)
    out = corpus.with_pairs([corpus.pairs[int(i)] for i in idx])
    out.meta["sampling"] = {"kind": "bagging", "ratio": ratio, "seed": seed}
    return out


def split_disjoint(mono: MonoCorpus, n_parts: int, seed: int) -> List[MonoCorpus]:
    """Seeded shuffle then round-robin into n_parts pairwise-disjoint shards
    whose sizes differ by at most one and whose union is the input."""
    if n_parts < 1:
        raise ValueError("n_parts must be >= 1")
    if n_parts > len(mono):
        raise ValueError(f"cannot split {len(mono)} sentences into {n_parts} parts")
    perm = np.random.default_rng(seed).permutation(len(mono))
    shards = []
    for j in range(n_parts):
        # Membership comes from the shuffle; within a shard, sentences keep
        # their source order so the ranges manifest round-trips exactly.
        idx = np.sort(perm[j::n_parts])
        shards.append(
            MonoCorpus(
                sentences=tuple(mono.sentences[int(i)] for i in idx),
                lang=mono.lang,
                shard_id=j,
                meta={"source_indices": tuple(int(i) for i in idx)},
            )
        )
    return shards


def shard_for_consumer(shards: Sequence[MonoCorpus], consumer: int) -> MonoCorpus:
    """Reuse policy: consumer i reads shard i mod n, so few shards can feed
    many consumers (each part used several times per stage)."""
    return shards[consumer % len(shards)]


def _token_permutation(spec: SyntheticTaskSpec) -> np.ndarray:
    return np.random.default_rng((spec.seed, 0xC1F)).permutation(spec.vocab_size)


def synthetic_vocabulary(spec: SyntheticTaskSpec) -> textkit.Vocabulary:
    """The deterministic word-level vocabulary of a synthetic task.

    Source words render as ``s<k>`` and target words as ``t<k>``; ids are
    stable across runs so corpora generated from the same spec agree.
    """
    width = len(str(spec.vocab_size - 1))
    tokens = [f"s{k:0{width}d}{textkit.WORD_END}" for k in range(spec.vocab_size)]
    tokens += [f"t{k:0{width}d}{textkit.WORD_END}" for k in range(spec.vocab_size)]
    return textkit.Vocabulary.from_tokens(tokens, pretokenization="none")


def _source_token_ids(spec: SyntheticTaskSpec) -> np.ndarray:
    base = len(textkit.CORE_SPECIALS)
    return np.arange(base, base + spec.vocab_size)


def _apply_transformation(spec: SyntheticTaskSpec, src: Sequence[int]) -> Tuple[int, ...]:
    """Map a source sentence (vocab-space ids) to its target sentence."""
    base = len(textkit.CORE_SPECIALS)
    sym = np.asarray(src) - base  # source symbols 0..V-1
    perm = _token_permutation(spec)
    if spec.transformation == "reverse":
        out = sym[::-1]
    elif spec.transformation == "substitution_cipher":
        out = perm[sym]
    else:  # shift_reorder: position-shifted cipher, then adjacent swap
        shifted = (sym + np.arange(len(sym))) % spec.vocab_size
        out = perm[shifted]
        for i in range(0, len(out) - 1, 2):
            out[i], out[i + 1] = out[i + 1], out[i]
    return tuple(int(x) + base + spec.vocab_size for x in out)


def invert_transformation(spec: SyntheticTaskSpec, tgt: Sequence[int]) -> Tuple[int, ...]:
    """The oracle translator's inverse map (exact at noise_rate=0)."""
    base = len(textkit.CORE_SPECIALS)
    sym = np.asarray(tgt) - base - spec.vocab_size
    perm = _token_permutation(spec)
    inv = np.argsort(perm)
    if spec.transformation == "reverse":
        out = sym[::-1]
    elif spec.transformation == "substitution_cipher":
        out = inv[sym]
    else:
        sym = sym.copy()
        for i in range(0, len(sym) - 1, 2):
            sym[i], sym[i + 1] = sym[i + 1], sym[i]
        out = (inv[sym] - np.arange(len(sym))) % spec.vocab_size
    return tuple(int(x) + base for x in out)


def oracle_translate(spec: SyntheticTaskSpec, src: Sequence[int]) -> Tuple[int, ...]:
    return _apply_transformation(spec, src)


def _draw_sentences(spec: SyntheticTaskSpec, n: int, rng, forbidden: set) -> List[IdSeq]:
    """Seeded unigram draws over the source vocabulary, skipping any sentence
    in ``forbidden`` (keeps mono corpora disjoint from the parallel set)."""
    ranks = np.arange(spec.vocab_size)
    probs = 1.0 / (ranks + 2.0) ** spec.zipf_alpha
    probs /= probs.sum()
    ids = _source_token_ids(spec)
    out: List[IdSeq] = []
    while len(out) < n:
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        sent = tuple(int(x) for x in rng.choice(ids, size=length, p=probs))
        if sent in forbidden:
            continue
        out.append(sent)
    return out


def generate_synthetic_pair(
    spec: SyntheticTaskSpec, n_parallel: int, n_mono_src: int, n_mono_tgt: int
) -> Tuple[ParallelCorpus, MonoCorpus, MonoCorpus]:
    """Generate (parallel corpus, source mono, target mono) for a task.

    Targets are the transformation of their sources with ``noise_rate`` token
    corruptions; the mono corpora are fresh draws disjoint from the parallel
    sentences. Byte-identical across runs for the same spec and counts.
    """
    rng = np.random.default_rng((spec.seed, 1))
    seen: set = set()
    src_sents = _draw_sentences(spec, n_parallel, rng, seen)
    seen.update(src_sents)

    base = len(textkit.CORE_SPECIALS)
    tgt_ids = np.arange(base + spec.vocab_size, base + 2 * spec.vocab_size)
    pairs: List[Pair] = []
    for src in src_sents:
        tgt = list(_apply_transformation(spec, src))
        if spec.noise_rate > 0:
            for i in range(len(tgt)):
                if rng.random() < spec.noise_rate:
                    tgt[i] = int(rng.choice(tgt_ids))
        pairs.append((src, tuple(tgt)))

    mono_src = _draw_sentences(spec, n_mono_src, rng, seen)
    seen.update(mono_src)
    tgt_seen = {p[1] for p in pairs}
    mono_tgt: List[IdSeq] = []
    while len(mono_tgt) < n_mono_tgt:
        (drawn,) = _draw_sentences(spec, 1, rng, seen)
        seen.add(drawn)
        tgt = _apply_transformation(spec, drawn)
        if tgt not in tgt_seen:
            tgt_seen.add(tgt)
            mono_tgt.append(tgt)

    parallel = ParallelCorpus(
        pairs=tuple(pairs),
        provenance=NATURAL,
        direction=(spec.src_lang, spec.tgt_lang),
    )
    return (
        parallel,
        MonoCorpus(sentences=tuple(mono_src), lang=spec.src_lang),
        MonoCorpus(sentences=tuple(mono_tgt), lang=spec.tgt_lang),
    )


@dataclass(frozen=True)
class Batch:
    """Padded id arrays for one micro-batch plus the originating line numbers."""

    src: np.ndarray  # (B, S) int32, PAD-filled
    tgt: np.ndarray  # (B, T) int32, PAD-filled
    src_lengths: np.ndarray
    tgt_lengths: np.ndarray
    lines: Tuple[int, ...]

    @property
    def padded_tokens(self) -> int:
        return self.src.shape[0] * max(self.src.shape[1], self.tgt.shape[1])

    @property
    def real_tokens(self) -> int:
        return int(self.src_lengths.sum() + self.tgt_lengths.sum())


def _pad_block(seqs: Sequence[IdSeq]) -> Tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs], dtype=np.int32)
    block = np.full((len(seqs), int(lengths.max())), textkit.PAD_ID, dtype=np.int32)
    for i, s in enumerate(seqs):
        block[i, : len(s)] = s
    return block, lengths


def build_batches(
    corpus: ParallelCorpus, max_tokens: int, accumulation: int = 1, seed: Optional[int] = None
) -> List[Batch]:
    """Group similar-length pairs into batches of at most max_tokens padded
    tokens per side. An optimizer step consumes ``accumulation`` consecutive
    batches, emulating multi-device training arithmetically.

    With ``seed``, the batch order is shuffled deterministically (pairs within
    a batch keep their length-sorted order).
    """
    if accumulation < 1:
        raise ValueError("accumulation must be >= 1")
    cost = []
    for line, (src, tgt) in enumerate(corpus.pairs):
        c = max(len(src), len(tgt))
        if c > max_tokens:
            raise ValueError(
                f"line {line}: sentence of {c} tokens exceeds max_tokens={max_tokens}"
            )
        cost.append(c)
    order = sorted(range(len(corpus)), key=lambda i: (cost[i], i))

    batches: List[Batch] = []
    current: List[int] = []
    width = 0
    for i in order:
        w = max(width, cost[i])
        if current and (len(current) + 1) * w > max_tokens:
            batches.append(_make_batch(corpus, current))
            current, width = [], 0
            w = cost[i]
        current.append(i)
        width = w
    if current:
        batches.append(_make_batch(corpus, current))

    if seed is not None:
        perm = np.random.default_rng(seed).permutation(len(batches))
        batches = [batches[int(i)] for i in perm]
    return batches


def _make_batch(corpus: ParallelCorpus, indices: List[int]) -> Batch:
    src, src_len = _pad_block([corpus.pairs[i][0] for i in indices])
    tgt, tgt_len = _pad_block([corpus.pairs[i][1] for i in indices])
    return Batch(src=src, tgt=tgt, src_lengths=src_len, tgt_lengths=tgt_len, lines=tuple(indices))


def effective_tokens(max_tokens: int, accumulation: int) -> int:
    """Effective optimizer-step budget, e.g. 8192 x 64 = 524288 tokens."""
    return max_tokens * accumulation


# ---------------------------------------------------------------------------
# File formats: one sentence per line; parallel corpora as a TAB-separated
# file or two aligned files. Shard manifests map shard_id -> original lines.
# ---------------------------------------------------------------------------


def _ids_to_line(ids: IdSeq) -> str:
    return " ".join(str(i) for i in ids)


def _line_to_ids(line: str) -> IdSeq:
    return tuple(int(t) for t in line.split())


def save_parallel(corpus: ParallelCorpus, path: str) -> None:
    lines = [f"{_ids_to_line(s)}\t{_ids_to_line(t)}" for s, t in corpus.pairs]
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def load_parallel(
    path: str, provenance: str = NATURAL, direction: Tuple[str, str] = ("src", "tgt")
) -> ParallelCorpus:
    pairs = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            s, t = line.split("\t")
            pairs.append((_line_to_ids(s), _line_to_ids(t)))
    return ParallelCorpus(pairs=tuple(pairs), provenance=provenance, direction=direction)


def save_mono(mono: MonoCorpus, path: str) -> None:
    lines = [_ids_to_line(s) for s in mono.sentences]
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def load_mono(path: str, lang: str = "mono", shard_id: Optional[int] = None) -> MonoCorpus:
    with open(path, encoding="utf-8") as f:
        sents = tuple(_line_to_ids(line) for line in f.read().splitlines() if line)
    return MonoCorpus(sentences=sents, lang=lang, shard_id=shard_id)


def _compress_ranges(indices: Sequence[int]) -> str:
    """'0-3,7,9-10' style run-length text for a shard's source line numbers."""
    runs = []
    for i in sorted(indices):
        if runs and i == runs[-1][1] + 1:
            runs[-1][1] = i
        else:
            runs.append([i, i])
    return ",".join(f"{a}-{b}" if a != b else str(a) for a, b in runs)


def _expand_ranges(text: str) -> List[int]:
    out: List[int] = []
    if not text:
        return out
    for part in text.split(","):
        if "-" in part:
            a, b = part.split("-")
            out.extend(range(int(a), int(b) + 1))
        else:
            out.append(int(part))
    return out


def save_shard_manifest(shards: Sequence[MonoCorpus], path: str) -> None:
    """Shard index file so pipelines can resume without re-shuffling."""
    lines = []
    for shard in shards:
        idx = shard.meta.get("source_indices", ())
        lines.append(f"{shard.shard_id}\t{_compress_ranges(idx)}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_sharded(mono: MonoCorpus, manifest_path: str) -> List[MonoCorpus]:
    shards = []
    with open(manifest_path, encoding="utf-8") as f:
        for line in f.read().splitlines():
            if not line:
                continue
            sid, ranges = line.split("\t")
            idx = _expand_ranges(ranges)
            shards.append(
                MonoCorpus(
                    sentences=tuple(mono.sentences[i] for i in idx),
                    lang=mono.lang,
                    shard_id=int(sid),
                    meta={"source_indices": tuple(idx)},
                )
            )
    return shards
