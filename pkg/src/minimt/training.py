"""Optimizer, learning-rate schedule, gradient accumulation, the training
loop, checkpoint emission, and in-domain fine-tuning.

Gradients are accumulated across the ``accumulation`` window in float64 and
normalized by the window's non-pad target token count, which makes
accumulation arithmetically equivalent to one concatenated batch. Parameters
stay float32; update math runs in float64, so runs are bit-reproducible.
"""

import json
import os
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import corpus as corpus_mod
from . import textkit
from .model import autodiff as ad
from .model import network
from .model.checkpoint import Checkpoint, new_checkpoint, save_checkpoint
from .model.config import ModelConfig
from .util import atomic_write_bytes, derive_seed


@dataclass(frozen=True)
class TrainPlan:
    """Optimizer/schedule/batching/budget settings for one training run."""

    max_lr: float = 5e-4
    warmup_steps: int = 4000
    betas: Tuple[float, float] = (0.9, 0.98)
    label_smoothing: float = 0.1
    dropout: Optional[float] = None  # overrides the config's residual dropout
    max_tokens_per_batch: int = 8192
    accumulation: int = 8
    max_steps: Optional[int] = None
    max_epochs: Optional[int] = None
    checkpoint_every: Optional[int] = None
    seed: int = 0
    adam_eps: float = 1e-8
    constant_lr: Optional[float] = None  # fine-tuning: fixed rate, no schedule

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if self.accumulation < 1:
            raise ValueError("accumulation must be >= 1")
        if (self.max_steps is None) == (self.max_epochs is None):
            raise ValueError("set exactly one of max_steps / max_epochs")
        budget = self.max_steps if self.max_steps is not None else self.max_epochs
        if budget <= 0:
            raise ValueError("training budget must be positive")


@dataclass
class TrainState:
    """Mutable optimizer state owned by a single training run."""

    params: Dict[str, np.ndarray]
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int
    rng: np.random.Generator

    @classmethod
    def fresh(cls, params: Dict[str, np.ndarray], seed: int) -> "TrainState":
        return cls(
            params={k: a.copy() for k, a in params.items()},
            m={k: np.zeros(a.shape, dtype=np.float64) for k, a in params.items()},
            v={k: np.zeros(a.shape, dtype=np.float64) for k, a in params.items()},
            step=0,
            rng=np.random.default_rng(derive_seed(seed, "dropout")),
        )


def lr_at(plan: TrainPlan, step: int) -> float:
    """Inverse-sqrt schedule: max_lr * min(step/warmup, sqrt(warmup/step))."""
    if step < 1:
        raise ValueError("steps are 1-based")
    if plan.constant_lr is not None:
        return plan.constant_lr
    w = plan.warmup_steps
    return plan.max_lr * min(step / w, (w / step) ** 0.5)


def adam_step(
    state: TrainState,
    grads: Dict[str, np.ndarray],
    lr: float,
    betas: Tuple[float, float] = (0.9, 0.98),
    eps: float = 1e-8,
) -> TrainState:
    """One bias-corrected Adam update, in place; returns the state."""
    b1, b2 = betas
    t = state.step + 1
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in state.params.items():
        g = grads.get(name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in tensor {name!r}")
        g = g.astype(np.float64, copy=False)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p -= update.astype(p.dtype)
    state.step = t
    return state


def _prepare_batch(batch: corpus_mod.Batch):
    """Teacher-forcing arrays: source gets an EOS, the decoder input starts
    with BOS, and the decoder target ends with EOS (pads elsewhere)."""
    b, s = batch.src.shape
    t = batch.tgt.shape[1]
    src = np.full((b, s + 1), textkit.PAD_ID, dtype=np.int64)
    src[:, :s] = batch.src
    src[np.arange(b), batch.src_lengths] = textkit.EOS_ID
    tgt_in = np.full((b, t + 1), textkit.PAD_ID, dtype=np.int64)
    tgt_in[:, 0] = textkit.BOS_ID
    tgt_in[:, 1:] = batch.tgt
    tgt_out = np.full((b, t + 1), textkit.PAD_ID, dtype=np.int64)
    tgt_out[:, :t] = batch.tgt
    tgt_out[np.arange(b), batch.tgt_lengths] = textkit.EOS_ID
    return src, batch.src_lengths.astype(np.int64) + 1, tgt_in, tgt_out


def _loss_and_grads(
    params: Dict[str, ad.Tensor],
    config: ModelConfig,
    batch: corpus_mod.Batch,
    label_smoothing: float,
    rng: Optional[np.random.Generator],
) -> Tuple[float, int]:
    """Forward/backward on one micro-batch; grads accumulate on the tensors.

    Returns (sum of token losses, token count).
    """
    src, src_len, tgt_in, tgt_out = _prepare_batch(batch)
    logits = network.forward_prepared(params, config, src, src_len, tgt_in, rng)
    mask = tgt_out != textkit.PAD_ID
    loss_sum, count = ad.label_smoothed_ce(logits, tgt_out, label_smoothing, mask)
    loss_sum.backward()
    return float(loss_sum.data), count


def _validate_data(config: ModelConfig, corpora: Sequence[corpus_mod.ParallelCorpus]):
    if not corpora or all(len(c) == 0 for c in corpora):
        raise ValueError("no training data")
    for c in corpora:
        for s, t in c.pairs:
            top = max(max(s), max(t))
            if top >= config.vocab_size:
                raise ValueError(
                    f"token id {top} out of range for vocab size {config.vocab_size}"
                )


def train(
    config: ModelConfig,
    corpora: Sequence[corpus_mod.ParallelCorpus],
    plan: TrainPlan,
    init: Optional[Checkpoint] = None,
    run_dir: Optional[str] = None,
    run_id: str = "run",
) -> List[Checkpoint]:
    """Train on the concatenation of ``corpora``; returns the emitted
    checkpoints (one every ``checkpoint_every`` steps plus the final one),
    dev scores unset. Bit-identical for identical inputs and seeds.
    """
    if isinstance(corpora, corpus_mod.ParallelCorpus):
        corpora = [corpora]
    _validate_data(config, corpora)
    if plan.dropout is not None:
        config = replace(config, dropout=plan.dropout)
    data = corpus_mod.ParallelCorpus.concat(list(corpora))

    if init is not None:
        if init.config.vocab_size != config.vocab_size:
            raise ValueError("init checkpoint vocabulary does not match")
        state = TrainState.fresh(init.copy_params(), plan.seed)
        base_step = init.step
        parent = {"parent_step": init.step}
    else:
        start = new_checkpoint(config, seed=derive_seed(plan.seed, "init"))
        state = TrainState.fresh(start.params, plan.seed)
        base_step = 0
        parent = {"init_seed": start.meta["init_seed"]}

    params = {k: ad.parameter(a) for k, a in state.params.items()}

    steps_per_epoch = None
    if plan.max_steps is not None:
        budget = plan.max_steps
    else:
        probe = corpus_mod.build_batches(data, plan.max_tokens_per_batch)
        steps_per_epoch = -(-len(probe) // plan.accumulation)
        budget = steps_per_epoch * plan.max_epochs

    log_rows: List[str] = []
    out: List[Checkpoint] = []

    def emit() -> Checkpoint:
        ckpt = Checkpoint(
            params={k: a.copy() for k, a in state.params.items()},
            config=config,
            step=base_step + state.step,
            meta={"run_id": run_id, "train_seed": plan.seed, **parent},
        )
        out.append(ckpt)
        if run_dir is not None:
            save_checkpoint(ckpt, os.path.join(run_dir, f"step_{ckpt.step}.ckpt"))
        return ckpt

    if run_dir is not None:
        os.makedirs(run_dir, exist_ok=True)

    done = 0
    epoch = 0
    while done < budget:
        batches = corpus_mod.build_batches(
            data, plan.max_tokens_per_batch, seed=derive_seed(plan.seed, "order", epoch)
        )
        for start_idx in range(0, len(batches), plan.accumulation):
            if done >= budget:
                break
            window = batches[start_idx : start_idx + plan.accumulation]
            accum: Dict[str, np.ndarray] = {
                k: np.zeros(p.shape, dtype=np.float64) for k, p in params.items()
            }
            loss_total = 0.0
            tokens = 0
            for micro in window:
                for p in params.values():
                    p.zero_grad()
                loss_sum, count = _loss_and_grads(
                    params, config, micro, plan.label_smoothing, state.rng
                )
                loss_total += loss_sum
                tokens += count
                for k, p in params.items():
                    if p.grad is not None:
                        accum[k] += p.grad
            for k in accum:
                accum[k] /= tokens
            lr = lr_at(plan, state.step + 1)
            adam_step(state, accum, lr, plan.betas, plan.adam_eps)
            done += 1
            log_rows.append(f"{base_step + state.step}\t{lr:.8e}\t{loss_total / tokens:.6f}\t{tokens}")
            if plan.checkpoint_every and done % plan.checkpoint_every == 0 and done < budget:
                emit()
        epoch += 1

    final = emit()
    if run_dir is not None:
        from .util import atomic_write_text

        atomic_write_text(
            os.path.join(run_dir, "log.tsv"),
            "step\tlr\tloss\ttokens\n" + "\n".join(log_rows) + "\n",
        )
    return out


def fine_tune(
    ckpt: Checkpoint,
    dev: corpus_mod.ParallelCorpus,
    epochs: int,
    plan: TrainPlan,
    run_dir: Optional[str] = None,
) -> Checkpoint:
    """Continue training on the development set only, for one or two epochs,
    at a reduced constant learning rate (max_lr/10)."""
    if epochs not in (1, 2):
        raise ValueError("in-domain fine-tuning runs for 1-2 epochs only")
    if len(dev) == 0:
        raise ValueError("empty dev set")
    ft_plan = replace(
        plan,
        max_steps=None,
        max_epochs=epochs,
        constant_lr=plan.max_lr / 10.0,
        checkpoint_every=None,
    )
    final = train(ckpt.config, [dev], ft_plan, init=ckpt, run_dir=run_dir, run_id="finetune")[-1]
    meta = dict(final.meta)
    meta["fine_tuned"] = True
    return Checkpoint(
        params=final.params, config=final.config, step=final.step, meta=meta
    )


# ---------------------------------------------------------------------------
# Optimizer-state serialization (bit-exact round trip).
# ---------------------------------------------------------------------------

STATE_MAGIC = b"MTSTATE1\n"


def save_state(state: TrainState, path: str) -> None:
    names = sorted(state.params)
    header = {
        "step": state.step,
        "rng": state.rng.bit_generator.state,
        "tensors": [
            [n, str(state.params[n].dtype), list(state.params[n].shape)] for n in names
        ],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    blob = [STATE_MAGIC, len(head).to_bytes(8, "little"), head]
    for n in names:
        blob.append(np.ascontiguousarray(state.params[n]).tobytes())
        blob.append(np.ascontiguousarray(state.m[n]).tobytes())
        blob.append(np.ascontiguousarray(state.v[n]).tobytes())
    atomic_write_bytes(path, b"".join(blob))


def load_state(path: str) -> TrainState:
    with open(path, "rb") as f:
        data = f.read()
    if data[: len(STATE_MAGIC)] != STATE_MAGIC:
        raise ValueError("not a training state file")
    off = len(STATE_MAGIC)
    head_len = int.from_bytes(data[off : off + 8], "little")
    off += 8
    header = json.loads(data[off : off + head_len])
    off += head_len
    params, m, v = {}, {}, {}
    for name, dtype, shape in header["tensors"]:
        n_items = int(np.prod(shape)) if shape else 1
        nbytes = n_items * np.dtype(dtype).itemsize
        params[name] = np.frombuffer(data[off : off + nbytes], dtype=dtype).reshape(shape).copy()
        off += nbytes
        for slot in (m, v):
            slot[name] = (
                np.frombuffer(data[off : off + n_items * 8], dtype=np.float64)
                .reshape(shape)
                .copy()
            )
            off += n_items * 8
    rng = np.random.default_rng()
    rng.bit_generator.state = header["rng"]
    return TrainState(params=params, m=m, v=v, step=header["step"], rng=rng)
