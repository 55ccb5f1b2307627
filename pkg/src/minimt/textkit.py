"""Subword vocabulary learning/application, tag handling, quote localization,
and rule-based parallel-pair filtering.

The vocabulary is a classic merge-rule subword model learned on whitespace
pre-tokenized text, with an end-of-word marker suffixed to word-final
subwords so detokenization is exact. Special tokens (pad/unk/bos/eos, the
back-translation tag, and any direction tokens) occupy the lowest ids and are
never produced by merges.
"""

import math
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

WORD_END = "</w>"

PAD = "<pad>"
UNK = "<unk>"
BOS = "<s>"
EOS = "</s>"
BT_TAG = "<bt>"

CORE_SPECIALS = (PAD, UNK, BOS, EOS, BT_TAG)

PAD_ID = 0
UNK_ID = 1
BOS_ID = 2
EOS_ID = 3
BT_TAG_ID = 4


def direction_token(lang: str) -> str:
    """Direction token prepended to sources of a multilingual model."""
    return f"<to_{lang}>"


def pretokenize(text: str, mode: str = "detach_punct") -> List[str]:
    """Split a sentence into words.

    ``detach_punct`` additionally separates every Unicode punctuation
    character into its own word; ``none`` is plain whitespace splitting (for
    scripts where no tokenizer is applied and raw text goes straight to
    subwords).
    """
    if mode == "none":
        return text.split()
    if mode != "detach_punct":
        raise ValueError(f"unknown pretokenization mode: {mode!r}")
    out: List[str] = []
    for chunk in text.split():
        word = []
        for ch in chunk:
            if unicodedata.category(ch).startswith("P"):
                if word:
                    out.append("".join(word))
                    word = []
                out.append(ch)
            else:
                word.append(ch)
        if word:
            out.append("".join(word))
    return out


def _word_symbols(word: str) -> Tuple[str, ...]:
    """'abc' -> ('a', 'b', 'c</w>'); the marker rides on the final subword."""
    if len(word) == 1:
        return (word + WORD_END,)
    return tuple(word[:-1]) + (word[-1] + WORD_END,)


@dataclass(frozen=True)
class Vocabulary:
    """Immutable subword vocabulary: ordered merges plus token<->id maps."""

    merges: Tuple[Tuple[str, str], ...]
    id_to_token: Tuple[str, ...]
    frequencies: Tuple[int, ...]
    specials: Tuple[str, ...]
    pretokenization: str = "detach_punct"
    token_to_id: Dict[str, int] = field(default_factory=dict, compare=False)
    _merge_ranks: Dict[Tuple[str, str], int] = field(default_factory=dict, compare=False)
    _word_cache: Dict[str, Tuple[str, ...]] = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        self.token_to_id.update({t: i for i, t in enumerate(self.id_to_token)})
        self._merge_ranks.update({m: r for r, m in enumerate(self.merges)})
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("token list contains duplicates; token<->id must be a bijection")
        for i, tok in enumerate(self.specials):
            if self.id_to_token[i] != tok:
                raise ValueError("special tokens must occupy the lowest ids in order")

    def __len__(self) -> int:
        return len(self.id_to_token)

    @property
    def special_ids(self) -> Tuple[int, ...]:
        return tuple(range(len(self.specials)))

    def segment_word(self, word: str) -> Tuple[str, ...]:
        """Segment one word: repeatedly merge every occurrence of the
        lowest-ranked merge rule present, exactly as during learning."""
        cached = self._word_cache.get(word)
        if cached is not None:
            return cached
        symbols = list(_word_symbols(word))
        ranks = self._merge_ranks
        while len(symbols) > 1:
            best = min(
                zip(symbols, symbols[1:]),
                key=lambda p: ranks.get(p, len(ranks)),
            )
            if best not in ranks:
                break
            merged = best[0] + best[1]
            out: List[str] = []
            i = 0
            while i < len(symbols):
                if i < len(symbols) - 1 and symbols[i] == best[0] and symbols[i + 1] == best[1]:
                    out.append(merged)
                    i += 2
                else:
                    out.append(symbols[i])
                    i += 1
            symbols = out
        result = tuple(symbols)
        self._word_cache[word] = result
        return result

    def signature(self) -> str:
        """Stable content hash, used to detect mixed-vocabulary pipelines."""
        from .util import hash_strings

        return hash_strings(
            [self.pretokenization]
            + ["%s %s" % m for m in self.merges]
            + [f"{t}\t{f}" for t, f in zip(self.id_to_token, self.frequencies)]
        )[:16]

    @classmethod
    def from_tokens(
        cls,
        tokens: Sequence[str],
        merges: Sequence[Tuple[str, str]] = (),
        frequencies: Optional[Sequence[int]] = None,
        extra_specials: Sequence[str] = (),
        pretokenization: str = "detach_punct",
    ) -> "Vocabulary":
        """Build a vocabulary directly from a token inventory (no learning)."""
        specials = tuple(CORE_SPECIALS) + tuple(extra_specials)
        if frequencies is None:
            frequencies = [0] * len(tokens)
        ordered = list(specials) + [t for t in tokens if t not in specials]
        freqs = [0] * len(specials) + [
            f for t, f in zip(tokens, frequencies) if t not in specials
        ]
        return cls(
            merges=tuple(tuple(m) for m in merges),
            id_to_token=tuple(ordered),
            frequencies=tuple(freqs),
            specials=specials,
            pretokenization=pretokenization,
        )


def _sentences_of(corpus) -> Sequence[str]:
    return getattr(corpus, "sentences", corpus)


def learn_bpe(
    corpora: Sequence,
    merge_ops: int,
    min_frequency: int = 1,
    upsample_low_resource: bool = False,
    extra_specials: Sequence[str] = (),
    pretokenization: str = "detach_punct",
) -> Vocabulary:
    """Learn a merge-rule subword vocabulary over one or more corpora.

    With ``upsample_low_resource``, each corpus's word counts are scaled by a
    whole-corpus duplication factor (rounding up) so that its character mass
    matches the largest corpus before pair counting. Tokens whose final corpus
    frequency falls below ``min_frequency`` are dropped from the vocabulary and
    their occurrences fall back to finer segments (down to characters).
    """
    if merge_ops < 0:
        raise ValueError("merge_ops must be >= 0")
    if min_frequency < 1:
        raise ValueError("min_frequency must be >= 1")
    if not corpora or all(len(_sentences_of(c)) == 0 for c in corpora):
        raise ValueError("cannot learn a vocabulary from empty corpora")

    specials = tuple(CORE_SPECIALS) + tuple(extra_specials)
    special_set = set(specials)

    per_corpus_counts: List[Counter] = []
    masses: List[int] = []
    for corpus in corpora:
        counts: Counter = Counter()
        mass = 0
        for sent in _sentences_of(corpus):
            for word in pretokenize(sent, pretokenization):
                counts[word] += 1
                mass += len(word)
        if not counts:
            raise ValueError("cannot learn a vocabulary from an empty corpus")
        per_corpus_counts.append(counts)
        masses.append(mass)

    word_counts: Counter = Counter()
    max_mass = max(masses)
    for counts, mass in zip(per_corpus_counts, masses):
        factor = math.ceil(max_mass / mass) if upsample_low_resource else 1
        for word, c in counts.items():
            word_counts[word] += c * factor

    # Distinct-word working set: index -> (symbols, count).
    words: List[List] = [[list(_word_symbols(w)), c] for w, c in sorted(word_counts.items())]

    pair_counts: Counter = Counter()
    pair_to_words: Dict[Tuple[str, str], set] = {}
    for idx, (symbols, count) in enumerate(words):
        for pair in zip(symbols, symbols[1:]):
            pair_counts[pair] += count
            pair_to_words.setdefault(pair, set()).add(idx)

    merges: List[Tuple[str, str]] = []
    while len(merges) < merge_ops and pair_counts:
        candidates = [
            (pair, n) for pair, n in pair_counts.items() if pair[0] + pair[1] not in special_set
        ]
        if not candidates:
            break
        best, _ = min(candidates, key=lambda kv: (-kv[1], kv[0]))
        merged = best[0] + best[1]
        for idx in sorted(pair_to_words.get(best, ())):
            symbols, count = words[idx]
            if best[0] not in symbols:
                continue
            for pair in zip(symbols, symbols[1:]):
                pair_counts[pair] -= count
                if pair_counts[pair] <= 0:
                    del pair_counts[pair]
            new_symbols = []
            i = 0
            while i < len(symbols):
                if (
                    i < len(symbols) - 1
                    and symbols[i] == best[0]
                    and symbols[i + 1] == best[1]
                ):
                    new_symbols.append(merged)
                    i += 2
                else:
                    new_symbols.append(symbols[i])
                    i += 1
            words[idx][0] = new_symbols
            for pair in zip(new_symbols, new_symbols[1:]):
                pair_counts[pair] += count
                pair_to_words.setdefault(pair, set()).add(idx)
        pair_to_words.pop(best, None)
        merges.append(best)

    # Drop below-threshold tokens; their occurrences fall back to finer
    # segments, which may push further tokens below threshold, so iterate.
    dropped: set = set()
    while True:
        kept_merges = [m for m in merges if m[0] + m[1] not in dropped]
        probe = Vocabulary.from_tokens([], merges=kept_merges, pretokenization=pretokenization)
        freqs: Counter = Counter()
        for word, count in word_counts.items():
            for token in probe.segment_word(word):
                freqs[token] += count
        newly = {t for t, f in freqs.items() if f < min_frequency}
        if not newly:
            break
        dropped |= newly

    tokens = sorted(freqs, key=lambda t: (-freqs[t], t))
    return Vocabulary.from_tokens(
        tokens,
        merges=kept_merges,
        frequencies=[freqs[t] for t in tokens],
        extra_specials=extra_specials,
        pretokenization=pretokenization,
    )


def apply_bpe(vocab: Vocabulary, sentence: str) -> List[int]:
    """Segment one sentence with the learned merges and map to token ids.

    Deterministic; symbols unseen at learn time map to the unknown id. The
    output round-trips through :func:`decode_ids` to the whitespace
    pre-tokenized form of the input.
    """
    ids: List[int] = []
    t2i = vocab.token_to_id
    for word in pretokenize(sentence, vocab.pretokenization):
        for token in vocab.segment_word(word):
            ids.append(t2i.get(token, UNK_ID))
    return ids


def decode_ids(vocab: Vocabulary, ids: Sequence[int], skip_specials: bool = True) -> str:
    """Map ids back to text; inverse of :func:`apply_bpe` up to whitespace."""
    parts: List[str] = []
    for i in ids:
        token = vocab.id_to_token[i]
        if skip_specials and i < len(vocab.specials) and i != UNK_ID:
            continue
        parts.append(token)
    text = "".join(parts)
    return text.replace(WORD_END, " ").strip()


def prepend_tag(vocab: Vocabulary, ids: Sequence[int], tag: str) -> Tuple[int, ...]:
    """Prepend a registered special token (e.g. the back-translation tag)."""
    if tag not in vocab.specials:
        raise ValueError(f"{tag!r} is not a registered special token")
    return (vocab.token_to_id[tag],) + tuple(ids)


# Double-quote conventions per language; unknown languages are left as-is.
QUOTE_STYLES: Dict[str, Tuple[str, str]] = {
    "english": ("“", "”"),
    "german": ("„", "“"),
    "french": ("«", "»"),
    "straight": ('"', '"'),
}

_QUOTE_CHARS = set('"“”„«»')


def localize_quotes(
    text: str,
    style: str = "as_is",
    direction: Optional[Tuple[str, str]] = None,
    conventions: Optional[Dict[str, str]] = None,
) -> str:
    """Rewrite paired double quotes to the requested convention.

    ``style`` is ``as_is``, ``source_style`` or ``target_style``; the latter
    two resolve a language from ``direction`` through ``conventions`` (a
    language-tag -> convention-name map, defaulting to the well-known names in
    :data:`QUOTE_STYLES`). Unpaired quotes and all other characters are left
    untouched.
    """
    if style == "as_is":
        return text
    if style not in ("source_style", "target_style"):
        raise ValueError(f"unknown quote style: {style!r}")
    if direction is None:
        return text
    lang = direction[0] if style == "source_style" else direction[1]
    name = (conventions or {}).get(lang, lang)
    glyphs = QUOTE_STYLES.get(name.lower())
    if glyphs is None:
        return text

    positions = [i for i, ch in enumerate(text) if ch in _QUOTE_CHARS]
    out = list(text)
    for a, b in zip(positions[0::2], positions[1::2]):
        out[a], out[b] = glyphs
    return "".join(out)


def _side_len(side) -> int:
    return len(side.split()) if isinstance(side, str) else len(side)


def filter_pairs(corpus, max_len: float, max_ratio: float, dedup: bool = False):
    """Rule-based cleaning: keep pairs with both sides <= max_len tokens and
    length ratio <= max_ratio; with ``dedup``, keep only the first occurrence
    of each exact pair. Survivor order is preserved.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    if max_ratio < 1:
        raise ValueError("max_ratio must be >= 1")
    seen = set()
    kept = []
    for src, tgt in corpus.pairs:
        ls, lt = _side_len(src), _side_len(tgt)
        if ls > max_len or lt > max_len:
            continue
        if min(ls, lt) == 0 or max(ls, lt) / min(ls, lt) > max_ratio:
            continue
        if dedup:
            key = (tuple(src) if not isinstance(src, str) else src,
                   tuple(tgt) if not isinstance(tgt, str) else tgt)
            if key in seen:
                continue
            seen.add(key)
        kept.append((src, tgt))
    return corpus.with_pairs(kept)


def save_vocabulary(vocab: Vocabulary, path: str) -> None:
    """Text format: header line with counts, one merge rule per line, then
    token<TAB>id<TAB>frequency lines."""
    lines = [
        "minimt-vocab\t1\tmerges=%d\ttokens=%d\tspecials=%d\tpretok=%s"
        % (len(vocab.merges), len(vocab), len(vocab.specials), vocab.pretokenization)
    ]
    for a, b in vocab.merges:
        lines.append(f"{a} {b}")
    for i, (tok, freq) in enumerate(zip(vocab.id_to_token, vocab.frequencies)):
        lines.append(f"{tok}\t{i}\t{freq}")
    from .util import atomic_write_text

    atomic_write_text(path, "\n".join(lines) + "\n")


def load_vocabulary(path: str) -> Vocabulary:
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    header = lines[0].split("\t")
    if header[0] != "minimt-vocab":
        raise ValueError(f"{path}: not a vocabulary file")
    fields = dict(kv.split("=", 1) for kv in header[2:])
    n_merges = int(fields["merges"])
    n_tokens = int(fields["tokens"])
    n_specials = int(fields["specials"])
    merges = tuple(tuple(line.split(" ", 1)) for line in lines[1 : 1 + n_merges])
    tokens: List[str] = []
    freqs: List[int] = []
    for line in lines[1 + n_merges : 1 + n_merges + n_tokens]:
        tok, idx, freq = line.split("\t")
        assert int(idx) == len(tokens), f"{path}: ids must be dense and ordered"
        tokens.append(tok)
        freqs.append(int(freq))
    return Vocabulary(
        merges=merges,
        id_to_token=tuple(tokens),
        frequencies=tuple(freqs),
        specials=tuple(tokens[:n_specials]),
        pretokenization=fields.get("pretok", "detach_punct"),
    )
