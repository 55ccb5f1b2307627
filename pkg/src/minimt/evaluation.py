"""Corpus BLEU (sacreBLEU-compatible math, no smoothing) and the dev-scoring
harness used by checkpoint selection, ensemble search and the pipeline report.
"""

import math
import threading
import unicodedata
from collections import Counter
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

from . import textkit

NGRAM_ORDER = 4

TOKENIZATIONS = ("intl-like", "char", "none")


def _tokenize(text: str, tokenization: str) -> List[str]:
    if tokenization == "none":
        return text.split()
    if tokenization == "char":
        return [ch for ch in text if not ch.isspace()]
    if tokenization != "intl-like":
        raise ValueError(f"unknown tokenization: {tokenization!r}")
    out: List[str] = []
    word: List[str] = []
    for ch in text:
        if ch.isspace():
            if word:
                out.append("".join(word))
                word = []
        elif unicodedata.category(ch)[0] in "PS":
            if word:
                out.append("".join(word))
                word = []
            out.append(ch)
        else:
            word.append(ch)
    if word:
        out.append("".join(word))
    return out


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


@dataclass(frozen=True)
class BleuReport:
    """Corpus BLEU with its components; bleu is on the usual 0..100 scale."""

    bleu: float
    precisions: Tuple[float, float, float, float]
    brevity_penalty: float
    hyp_len: int
    ref_len: int
    tokenization: str

    @property
    def signature(self) -> str:
        return f"BLEU+case.mixed+numrefs.1+smooth.none+tok.{self.tokenization}+order.{NGRAM_ORDER}"

    def format(self) -> str:
        p = "/".join(f"{x * 100:.1f}" for x in self.precisions)
        return (
            f"{self.signature} = {self.bleu:.2f} {p} "
            f"(BP = {self.brevity_penalty:.3f} hyp_len = {self.hyp_len} ref_len = {self.ref_len})"
        )


def bleu(hyps: Sequence[str], refs: Sequence[str], tokenization: str = "intl-like") -> BleuReport:
    """Corpus-level 4-gram BLEU: clipped n-gram matches summed over the
    corpus, geometric mean of precisions, BP = min(1, exp(1 - ref/hyp)).

    No smoothing: any zero n-gram precision makes the score 0.
    """
    if len(hyps) != len(refs):
        raise ValueError(f"got {len(hyps)} hypotheses for {len(refs)} references")
    if not hyps:
        raise ValueError("cannot score an empty corpus")

    correct = [0] * NGRAM_ORDER
    total = [0] * NGRAM_ORDER
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hyps, refs):
        hyp_toks = _tokenize(hyp, tokenization)
        ref_toks = _tokenize(ref, tokenization)
        if not ref_toks:
            raise ValueError("empty reference sentence")
        hyp_len += len(hyp_toks)
        ref_len += len(ref_toks)
        for n in range(1, NGRAM_ORDER + 1):
            hyp_ngrams = _ngrams(hyp_toks, n)
            ref_ngrams = _ngrams(ref_toks, n)
            total[n - 1] += sum(hyp_ngrams.values())
            correct[n - 1] += sum(
                min(c, ref_ngrams.get(g, 0)) for g, c in hyp_ngrams.items()
            )

    precisions = tuple(c / t if t > 0 else 0.0 for c, t in zip(correct, total))
    if hyp_len == 0:
        bp = 0.0
    else:
        bp = min(1.0, math.exp(1.0 - ref_len / hyp_len))
    if any(p == 0.0 for p in precisions):
        score = 0.0
    else:
        score = bp * math.exp(sum(math.log(p) for p in precisions) / NGRAM_ORDER) * 100.0

    return BleuReport(
        bleu=score,
        precisions=precisions,
        brevity_penalty=bp,
        hyp_len=hyp_len,
        ref_len=ref_len,
        tokenization=tokenization,
    )


_score_cache: Dict[Tuple, BleuReport] = {}
_cache_lock = threading.Lock()
_cache_stats = {"hits": 0, "misses": 0}


def clear_score_cache() -> None:
    with _cache_lock:
        _score_cache.clear()
        _cache_stats.update(hits=0, misses=0)


def cache_stats() -> Dict[str, int]:
    return dict(_cache_stats)


def _dev_signature(dev) -> str:
    from .util import hash_strings

    return hash_strings(
        [f"{' '.join(map(str, s))}\t{' '.join(map(str, t))}" for s, t in dev.pairs]
    )[:16]


def score_dev(
    models,
    dev,
    vocab: textkit.Vocabulary,
    beam: int = 4,
    max_len: int = 64,
    length_penalty: float = 1.0,
    postprocess: str = "as_is",
    tokenization: str = "none",
    source_prefix: Optional[str] = None,
) -> BleuReport:
    """Decode every dev source (ensemble if several models), detokenize, apply
    quote localization, and score with corpus BLEU.

    Results are cached on (model-set hash, dev hash, decode settings); decoding
    is skipped on a hit. Right-to-left models are re-reversed before scoring.
    """
    from .model import checkpoint as ckpt_mod
    from .model.decode import Translator

    if len(dev) == 0:
        raise ValueError("empty dev set")
    if isinstance(models, ckpt_mod.Checkpoint):
        models = [models]
    key = (
        tuple(ckpt_mod.checkpoint_id(m) for m in models),
        _dev_signature(dev),
        beam,
        max_len,
        length_penalty,
        postprocess,
        tokenization,
        source_prefix,
        vocab.signature(),
    )
    with _cache_lock:
        if key in _score_cache:
            _cache_stats["hits"] += 1
            return _score_cache[key]
        _cache_stats["misses"] += 1

    translator = Translator(
        models,
        beam=beam,
        max_len=max_len,
        length_penalty=length_penalty,
        source_prefix_id=vocab.token_to_id[source_prefix] if source_prefix else None,
    )
    hyp_ids = translator.translate_batch([s for s, _ in dev.pairs])
    hyps = [textkit.decode_ids(vocab, h) for h in hyp_ids]
    refs = [textkit.decode_ids(vocab, t) for _, t in dev.pairs]
    hyps = [localized for localized in (
        textkit.localize_quotes(h, postprocess, direction=dev.direction) for h in hyps
    )]
    report = bleu(hyps, refs, tokenization=tokenization)
    with _cache_lock:
        _score_cache[key] = report
    return report
