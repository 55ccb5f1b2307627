"""Checkpoint selection, top-k parameter averaging, and random ensemble
search over per-model top-k checkpoint lists.
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import evaluation, textkit
from .model.checkpoint import Checkpoint, checkpoint_id
from .model.config import parameter_shapes
from .util import atomic_write_text


def _default_scorer(dev, vocab, beam, **decode_kw) -> Callable[[Sequence[Checkpoint]], float]:
    def score(models: Sequence[Checkpoint]) -> float:
        return evaluation.score_dev(list(models), dev, vocab, beam=beam, **decode_kw).bleu

    return score


def topk_checkpoints(
    run: Sequence[Checkpoint],
    dev,
    k: int,
    vocab: Optional[textkit.Vocabulary] = None,
    beam: int = 4,
    scorer: Optional[Callable[[Sequence[Checkpoint]], float]] = None,
    **decode_kw,
) -> List[Checkpoint]:
    """Score every checkpoint on the dev set and return the k best,
    BLEU-descending; ties prefer the later training step."""
    if not run:
        raise ValueError("no checkpoints to rank")
    if k > len(run):
        raise ValueError(f"k={k} exceeds the {len(run)} available checkpoints")
    if scorer is None:
        scorer = _default_scorer(dev, vocab, beam, **decode_kw)
    scored = [c.with_dev_bleu(scorer([c])) for c in run]
    scored.sort(key=lambda c: (-c.dev_bleu, -c.step))
    return scored[:k]


def average_checkpoints(ckpts: Sequence[Checkpoint]) -> Checkpoint:
    """Element-wise arithmetic mean of shape-compatible checkpoints."""
    if not ckpts:
        raise ValueError("nothing to average")
    shapes = parameter_shapes(ckpts[0].config)
    for c in ckpts[1:]:
        if parameter_shapes(c.config) != shapes:
            for name, shape in parameter_shapes(c.config).items():
                if shapes.get(name) != shape:
                    raise ValueError(
                        f"checkpoint shape mismatch on tensor {name!r}: "
                        f"{shapes.get(name)} vs {shape}"
                    )
            raise ValueError("checkpoint parameter names differ")
    params = {}
    for name in shapes:
        acc = np.zeros(shapes[name], dtype=np.float64)
        for c in ckpts:
            acc += c.params[name]
        params[name] = (acc / len(ckpts)).astype(ckpts[0].params[name].dtype)
    return Checkpoint(
        params=params,
        config=ckpts[0].config,
        step=max(c.step for c in ckpts),
        meta={"averaged_from": [checkpoint_id(c) for c in ckpts]},
    )


@dataclass(frozen=True)
class EnsembleCandidate:
    """One selection of a checkpoint per model, with its dev score."""

    selection: Tuple[Checkpoint, ...]
    draw_index: int
    dev_bleu: Optional[float] = None

    @property
    def ids(self) -> Tuple[str, ...]:
        return tuple(checkpoint_id(c) for c in self.selection)


def _distinct_draw_stream(sizes: Sequence[int], seed: int):
    """Prefix-stable stream of distinct points of the product space: draws
    repeat the same sequence for any seed, skipping duplicates, so a longer
    search shares its prefix with a shorter one."""
    space = 1
    for s in sizes:
        space *= s
    rng = np.random.default_rng(seed)
    seen = set()
    while len(seen) < space:
        flat = int(rng.integers(0, space))
        if flat in seen:
            continue
        seen.add(flat)
        coords = []
        rest = flat
        for s in reversed(sizes):
            coords.append(rest % s)
            rest //= s
        yield flat, tuple(reversed(coords))


def random_ensemble_search(
    models: Sequence[Sequence[Checkpoint]],
    n_draws: int,
    dev=None,
    vocab: Optional[textkit.Vocabulary] = None,
    beam: int = 4,
    seed: int = 0,
    scorer: Optional[Callable[[Sequence[Checkpoint]], float]] = None,
    log_path: Optional[str] = None,
    **decode_kw,
) -> Tuple[EnsembleCandidate, List[EnsembleCandidate]]:
    """Draw ``n_draws`` distinct combinations (one top-k checkpoint per
    model) uniformly from the product space, score each as an ensemble, and
    return (best candidate, all evaluated candidates in draw order).

    When n_draws reaches the size of the space the search is exhaustive.
    """
    if not models or any(len(group) == 0 for group in models):
        raise ValueError("every model must contribute at least one checkpoint")
    if n_draws < 1:
        raise ValueError("n_draws must be >= 1")
    if scorer is None:
        scorer = _default_scorer(dev, vocab, beam, **decode_kw)
    sizes = [len(group) for group in models]
    space = 1
    for s in sizes:
        space *= s
    if n_draws > space:
        n_draws = space  # clamp to exhaustive

    evaluated: List[EnsembleCandidate] = []
    best: Optional[EnsembleCandidate] = None
    for flat, coords in _distinct_draw_stream(sizes, seed):
        selection = tuple(models[i][c] for i, c in enumerate(coords))
        cand = EnsembleCandidate(
            selection=selection, draw_index=flat, dev_bleu=scorer(selection)
        )
        evaluated.append(cand)
        if best is None or cand.dev_bleu > best.dev_bleu:
            best = cand
        if len(evaluated) >= n_draws:
            break

    if log_path is not None:
        lines = ["draw\tselection\tdev_bleu"]
        for cand in evaluated:
            sel = ",".join(f"m{i}:{cid}" for i, cid in enumerate(cand.ids))
            lines.append(f"{cand.draw_index}\t{sel}\t{cand.dev_bleu:.4f}")
        atomic_write_text(log_path, "\n".join(lines) + "\n")
    return best, evaluated


@dataclass(frozen=True)
class FinalCandidate:
    """A submission candidate: a single model, an averaged checkpoint, or an
    ensemble selection."""

    kind: str  # single | average | ensemble
    models: Tuple[Checkpoint, ...]
    dev_bleu: float

    def __post_init__(self):
        if self.kind not in ("single", "average", "ensemble"):
            raise ValueError(f"unknown candidate kind {self.kind!r}")


_SIMPLICITY = {"single": 0, "average": 1, "ensemble": 2}


def select_final(candidates: Sequence[FinalCandidate]) -> FinalCandidate:
    """Pick the best-scoring candidate; never assumes ensembling wins. Exact
    ties go to the simpler system (single, then average, then ensemble)."""
    if not candidates:
        raise ValueError("no candidates")
    return min(candidates, key=lambda c: (-c.dev_bleu, _SIMPLICITY[c.kind]))
