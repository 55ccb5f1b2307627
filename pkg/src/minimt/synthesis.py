"""Synthetic-data stages: tagged back-translation, iterative joint training,
ensemble + right-to-left knowledge distillation, and multilingual
pretrain/fine-tune over direction-tagged corpora.

Every synthetic corpus records its provenance (stage, generating checkpoint,
mono shard, tag flag, beam) so data diversity across single models stays
auditable.
"""

from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

from . import corpus as corpus_mod
from . import evaluation, textkit, training
from .corpus import MonoCorpus, ParallelCorpus
from .model import reverse_target
from .model.checkpoint import Checkpoint, checkpoint_id
from .model.decode import Translator
from .util import atomic_write_text, derive_seed


def _as_translator(model, beam: int, max_len: int, length_penalty: float, n_specials: int):
    if hasattr(model, "translate_batch"):
        return model
    models = model if isinstance(model, (list, tuple)) else [model]
    return Translator(
        models, beam=beam, max_len=max_len, length_penalty=length_penalty, n_specials=n_specials
    )


def _nonempty(seq: Sequence[int]) -> Tuple[int, ...]:
    # An empty hypothesis would break pair alignment; fall back to <unk>.
    return tuple(seq) if len(seq) > 0 else (textkit.UNK_ID,)


def _generator_ids(model) -> List[str]:
    if hasattr(model, "models"):
        return [checkpoint_id(m) for m in model.models]
    if isinstance(model, (list, tuple)):
        return [checkpoint_id(m) for m in model]
    return [checkpoint_id(model)]


def back_translate(
    t2s,
    mono_tgt: MonoCorpus,
    beam: int = 4,
    tag: bool = True,
    max_len: int = 64,
    length_penalty: float = 1.0,
    n_specials: int = len(textkit.CORE_SPECIALS),
    direction: Optional[Tuple[str, str]] = None,
) -> ParallelCorpus:
    """Translate target-language monolingual text back into the source
    language and pair it with the original targets, optionally prepending the
    back-translation tag to every synthetic source."""
    translator = _as_translator(t2s, beam, max_len, length_penalty, n_specials)
    hyps = translator.translate_batch(list(mono_tgt.sentences))
    pairs = []
    tag_id = textkit.BT_TAG_ID
    for syn_src, tgt in zip(hyps, mono_tgt.sentences):
        syn_src = _nonempty(syn_src)
        if tag:
            syn_src = (tag_id,) + syn_src
        pairs.append((syn_src, tuple(tgt)))
    return ParallelCorpus(
        pairs=tuple(pairs),
        provenance=corpus_mod.BACK_TRANSLATED,
        direction=direction or ("src", mono_tgt.lang),
        meta={
            "stage": "back_translate",
            "generator": _generator_ids(t2s),
            "shard_id": mono_tgt.shard_id,
            "tag": tag,
            "beam": beam,
        },
    )


@dataclass(frozen=True)
class JointTrainRound:
    """One iteration of joint training: both direction models, the synthetic
    corpora they trained on, and their dev scores."""

    iteration: int
    s2t: Checkpoint
    t2s: Checkpoint
    synthetic_s2t: Optional[ParallelCorpus]
    synthetic_t2s: Optional[ParallelCorpus]
    dev_bleu_s2t: float
    dev_bleu_t2s: float


def joint_train(
    s2t0: Checkpoint,
    t2s0: Checkpoint,
    mono_s: Union[MonoCorpus, Sequence[MonoCorpus]],
    mono_t: Union[MonoCorpus, Sequence[MonoCorpus]],
    natural: ParallelCorpus,
    plan: training.TrainPlan,
    dev: ParallelCorpus,
    vocab: textkit.Vocabulary,
    max_iters: int = 3,
    beam: int = 4,
    max_len: int = 64,
    convergence_delta: float = 0.2,
    consumer: int = 0,
    run_root: Optional[str] = None,
) -> List[JointTrainRound]:
    """Alternate rounds where each direction back-translates fresh synthetic
    data for the other and both retrain (continuing from the previous round)
    on natural + fresh synthetic data only.

    Stops when both directions improve by less than ``convergence_delta``
    dev BLEU, or after ``max_iters`` iterations.
    """
    if isinstance(mono_s, (list, tuple)):
        mono_s = corpus_mod.shard_for_consumer(mono_s, consumer)
    if isinstance(mono_t, (list, tuple)):
        mono_t = corpus_mod.shard_for_consumer(mono_t, consumer)
    n_specials = len(vocab.specials)
    dev_swapped = dev.swapped()

    def score(ckpt: Checkpoint, dev_set: ParallelCorpus) -> float:
        return evaluation.score_dev(
            ckpt, dev_set, vocab, beam=beam, max_len=max_len
        ).bleu

    rounds = [
        JointTrainRound(
            iteration=0,
            s2t=s2t0,
            t2s=t2s0,
            synthetic_s2t=None,
            synthetic_t2s=None,
            dev_bleu_s2t=score(s2t0, dev),
            dev_bleu_t2s=score(t2s0, dev_swapped),
        )
    ]
    natural_rev = natural.swapped()
    for it in range(1, max_iters + 1):
        prev = rounds[-1]
        syn_s2t = back_translate(
            prev.t2s, mono_t, beam=beam, tag=True, max_len=max_len,
            n_specials=n_specials, direction=natural.direction,
        )
        syn_t2s = back_translate(
            prev.s2t, mono_s, beam=beam, tag=True, max_len=max_len,
            n_specials=n_specials, direction=natural_rev.direction,
        )
        syn_s2t.meta["iteration"] = it
        syn_t2s.meta["iteration"] = it
        plan_s2t = replace(plan, seed=derive_seed(plan.seed, "joint", it, "s2t"))
        plan_t2s = replace(plan, seed=derive_seed(plan.seed, "joint", it, "t2s"))
        s2t = training.train(
            prev.s2t.config, [natural, syn_s2t], plan_s2t, init=prev.s2t,
            run_dir=f"{run_root}/iter{it}_s2t" if run_root else None,
        )[-1]
        t2s = training.train(
            prev.t2s.config, [natural_rev, syn_t2s], plan_t2s, init=prev.t2s,
            run_dir=f"{run_root}/iter{it}_t2s" if run_root else None,
        )[-1]
        rounds.append(
            JointTrainRound(
                iteration=it,
                s2t=s2t,
                t2s=t2s,
                synthetic_s2t=syn_s2t,
                synthetic_t2s=syn_t2s,
                dev_bleu_s2t=score(s2t, dev),
                dev_bleu_t2s=score(t2s, dev_swapped),
            )
        )
        gain_s2t = rounds[-1].dev_bleu_s2t - prev.dev_bleu_s2t
        gain_t2s = rounds[-1].dev_bleu_t2s - prev.dev_bleu_t2s
        if max(gain_s2t, gain_t2s) < convergence_delta:
            break
    return rounds


def train_r2l_teacher(
    config,
    corpora: Sequence[ParallelCorpus],
    plan: training.TrainPlan,
    run_dir: Optional[str] = None,
) -> Checkpoint:
    """Train a right-to-left model on the same data as a group member: the
    targets are token-reversed and the checkpoint is marked r2l."""
    cfg = replace(config, target_order="r2l")
    reversed_corpora = [reverse_target(c) for c in corpora]
    return training.train(cfg, reversed_corpora, plan, run_dir=run_dir, run_id="r2l")[-1]


@dataclass(frozen=True)
class DistillPlan:
    """Partition of the single models into groups, one R2L teacher per group,
    and one distilling mono shard per student."""

    groups: Tuple[Tuple[int, ...], ...]
    r2l_teachers: Tuple[Checkpoint, ...]
    student_shards: Tuple[MonoCorpus, ...]

    def __post_init__(self):
        members = sorted(i for g in self.groups for i in g)
        n = len(members)
        if members != list(range(n)):
            raise ValueError("groups must partition the model list")
        sizes = {len(g) for g in self.groups}
        if len(sizes) != 1:
            raise ValueError("groups must have equal size (k groups of g models)")
        if len(self.r2l_teachers) != len(self.groups):
            raise ValueError("need exactly one R2L teacher per group")
        if len(self.student_shards) != n:
            raise ValueError("need one distilling shard per student")
        for t in self.r2l_teachers:
            if t.config.target_order != "r2l":
                raise ValueError("R2L teachers must be right-to-left models")

    def group_of(self, model_index: int) -> int:
        for gi, g in enumerate(self.groups):
            if model_index in g:
                return gi
        raise ValueError(f"model {model_index} not in any group")


def make_groups(n_models: int, k: int) -> Tuple[Tuple[int, ...], ...]:
    """Split model indices into k contiguous groups of equal size."""
    if n_models % k != 0:
        raise ValueError(f"{n_models} models cannot form {k} equal groups")
    size = n_models // k
    return tuple(tuple(range(g * size, (g + 1) * size)) for g in range(k))


def distill_generate(
    plan: DistillPlan,
    models: Sequence[Checkpoint],
    beam: int = 4,
    max_len: int = 64,
    n_specials: int = len(textkit.CORE_SPECIALS),
    direction: Optional[Tuple[str, str]] = None,
) -> List[ParallelCorpus]:
    """For every student, translate its source-side mono shard with the
    ensemble teacher of its group and with the group's R2L teacher
    (re-reversed), and concatenate the two pseudo-parallel corpora."""
    out: List[ParallelCorpus] = []
    ens_cache: Dict[int, List] = {}
    for m, shard in enumerate(plan.student_shards):
        gi = plan.group_of(m)
        group_models = [models[i] for i in plan.groups[gi]]
        ens = Translator(group_models, beam=beam, max_len=max_len, n_specials=n_specials)
        r2l = Translator([plan.r2l_teachers[gi]], beam=beam, max_len=max_len, n_specials=n_specials)
        srcs = list(shard.sentences)
        ens_targets = ens.translate_batch(srcs)
        r2l_targets = r2l.translate_batch(srcs)  # re-reversed to normal order
        base_meta = {
            "stage": "distill_generate",
            "shard_id": shard.shard_id,
            "tag": False,
            "beam": beam,
            "student": m,
        }
        ens_corpus = ParallelCorpus(
            pairs=tuple((tuple(s), _nonempty(t)) for s, t in zip(srcs, ens_targets)),
            provenance=corpus_mod.DISTILLED_ENSEMBLE,
            direction=direction or (shard.lang, "tgt"),
            meta={**base_meta, "generator": [checkpoint_id(c) for c in group_models]},
        )
        r2l_corpus = ParallelCorpus(
            pairs=tuple((tuple(s), _nonempty(t)) for s, t in zip(srcs, r2l_targets)),
            provenance=corpus_mod.DISTILLED_R2L,
            direction=direction or (shard.lang, "tgt"),
            meta={**base_meta, "generator": [checkpoint_id(plan.r2l_teachers[gi])]},
        )
        out.append(ParallelCorpus.concat([ens_corpus, r2l_corpus]))
    return out


def distill_student(
    config,
    kd_corpus: ParallelCorpus,
    plan: training.TrainPlan,
    run_dir: Optional[str] = None,
) -> Checkpoint:
    """Train a student from scratch on teacher pseudo-parallel data only;
    natural parallel data is rejected, not just discouraged."""
    allowed = {corpus_mod.DISTILLED_ENSEMBLE, corpus_mod.DISTILLED_R2L}
    bad = [p for p in kd_corpus.provenances if p not in allowed]
    if bad:
        raise ValueError(
            f"knowledge distillation trains without parallel data; got provenance {bad[0]!r}"
        )
    ckpt = training.train(config, [kd_corpus], plan, run_dir=run_dir, run_id="student")[-1]
    meta = dict(ckpt.meta)
    meta["distilled"] = True
    return Checkpoint(params=ckpt.params, config=ckpt.config, step=ckpt.step, meta=meta)


def _check_shared_vocab(corpora: Sequence[ParallelCorpus], vocab: textkit.Vocabulary):
    sig = vocab.signature()
    for c in corpora:
        got = c.meta.get("vocab_sig")
        if got is not None and got != sig:
            raise ValueError("all corpora must be encoded with one shared vocabulary")


def with_direction_prefix(pair: ParallelCorpus, vocab: textkit.Vocabulary) -> ParallelCorpus:
    """Prepend the target-language direction token to every source."""
    token = textkit.direction_token(pair.direction[1])
    if token not in vocab.specials:
        raise ValueError(f"direction token {token!r} is not a registered special")
    tid = vocab.token_to_id[token]
    out = pair.with_pairs([((tid,) + tuple(s), t) for s, t in pair.pairs])
    out.meta["direction_token"] = token
    return out


def mrasp_pretrain(
    pairs: Sequence[ParallelCorpus],
    config,
    plan: training.TrainPlan,
    vocab: textkit.Vocabulary,
    run_dir: Optional[str] = None,
) -> Checkpoint:
    """Pretrain one universal model on the concatenation of all direction
    corpora, each source prefixed with its direction token. The checkpoint
    can initialize any included direction."""
    if not pairs:
        raise ValueError("no pretraining corpora")
    _check_shared_vocab(pairs, vocab)
    tagged = [with_direction_prefix(p, vocab) for p in pairs]
    ckpt = training.train(config, tagged, plan, run_dir=run_dir, run_id="mrasp")[-1]
    meta = dict(ckpt.meta)
    meta["mrasp"] = True
    meta["directions"] = sorted({"%s-%s" % p.direction for p in pairs})
    return Checkpoint(params=ckpt.params, config=ckpt.config, step=ckpt.step, meta=meta)


def mrasp_finetune(
    pretrained: Checkpoint,
    pair: ParallelCorpus,
    sampling: Optional[Dict] = None,
    plan: Optional[training.TrainPlan] = None,
    vocab: Optional[textkit.Vocabulary] = None,
    steps: Optional[int] = None,
    run_dir: Optional[str] = None,
) -> Checkpoint:
    """Fine-tune a pretrained multilingual model on one direction, with an
    optional sampling strategy; metadata records (pretrain id, strategy) so a
    3-pretrains x 3-samplings grid yields 9 distinct models."""
    directions = pretrained.meta.get("directions", [])
    if "%s-%s" % pair.direction not in directions:
        raise ValueError(
            f"direction {pair.direction} was not part of pretraining ({directions})"
        )
    pretrain_id = checkpoint_id(pretrained)
    sampling = sampling or {"kind": "none"}
    data = pair
    if sampling["kind"] == "upsample":
        data = corpus_mod.upsample(pair, sampling["ratio"], sampling.get("seed", plan.seed if plan else 0))
    elif sampling["kind"] == "bagging":
        data = corpus_mod.bagging_sample(pair, sampling["ratio"], sampling.get("seed", plan.seed if plan else 0))
    elif sampling["kind"] != "none":
        raise ValueError(f"unknown sampling strategy {sampling['kind']!r}")

    meta_extra = {"pretrain_id": pretrain_id, "sampling": sampling, "mrasp_finetuned": True}
    if steps == 0:
        return Checkpoint(
            params=pretrained.copy_params(),
            config=pretrained.config,
            step=pretrained.step,
            meta={**pretrained.meta, **meta_extra},
        )
    if plan is None:
        raise ValueError("a training plan is required unless steps == 0")
    if steps is not None:
        plan = replace(plan, max_steps=steps, max_epochs=None)
    tagged = with_direction_prefix(data, vocab) if vocab is not None else data
    ckpt = training.train(
        pretrained.config, [tagged], plan, init=pretrained, run_dir=run_dir, run_id="mrasp_ft"
    )[-1]
    meta = dict(ckpt.meta)
    meta.update(meta_extra)
    return Checkpoint(params=ckpt.params, config=ckpt.config, step=ckpt.step, meta=meta)


def write_provenance(corpus: ParallelCorpus, path: str) -> None:
    """Sidecar next to a synthetic corpus: stage, generator checkpoints,
    shard, tag flag, beam, and segment provenance spans."""
    meta = corpus.meta
    lines = [
        f"stage\t{meta.get('stage', '-')}",
        f"generator\t{','.join(meta.get('generator', [])) or '-'}",
        f"shard\t{meta.get('shard_id', '-')}",
        f"tag\t{int(bool(meta.get('tag', False)))}",
        f"beam\t{meta.get('beam', '-')}",
        f"direction\t{corpus.direction[0]}-{corpus.direction[1]}",
        "segments\t" + ";".join(f"{p}:{n}" for p, n in corpus.segments),
    ]
    atomic_write_text(path, "\n".join(lines) + "\n")
