"""Batched beam search with incremental per-step decoding.

The beam engine is generic over a ``stepper`` (anything exposing
``start/step/reorder``), so model ensembles and test fixtures share the same
search code. Model log-probabilities of an ensemble are combined by
arithmetic mean in log space. Ties in the beam are broken deterministically:
higher score, then lower token id, then lower hypothesis index.
"""

import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .. import textkit
from . import autodiff as ad
from . import network
from .checkpoint import Checkpoint
from .config import ModelConfig

NEG = network.NEG


def _log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _layer_norm(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    return xc * inv * g + b


class _ModelState:
    """Incremental decoder state for one model over N parallel rows."""

    def __init__(self, ckpt: Checkpoint, src: np.ndarray, src_len: np.ndarray, max_steps: int):
        self.p = ckpt.params
        self.cfg = ckpt.config
        cfg = self.cfg
        with ad.no_grad():
            enc = network.encode(ckpt.tensors(), cfg, src, src_len).data
        self.src_len = src_len
        n = src.shape[0]
        d = cfg.embed_dim
        a = cfg.attn_dim
        h, dh = cfg.heads, cfg.head_dim
        self.cross_k: List[np.ndarray] = []
        self.cross_v: List[np.ndarray] = []
        for i in range(cfg.dec_layers):
            kv = enc @ self.p[f"dec.{i}.cross.kv.w"] + self.p[f"dec.{i}.cross.kv.b"]
            k, v = kv[..., :a], kv[..., a:]
            s = k.shape[1]
            self.cross_k.append(k.reshape(n, s, h, dh).transpose(0, 2, 1, 3).copy())
            self.cross_v.append(v.reshape(n, s, h, dh).transpose(0, 2, 1, 3).copy())
        dtype = enc.dtype
        self.cross_mask = np.where(
            np.arange(enc.shape[1])[None, :] < src_len[:, None], 0.0, NEG
        ).astype(dtype)[:, None, :]
        if cfg.arch == "transformer":
            self.self_k = [np.zeros((n, h, max_steps, dh), dtype) for _ in range(cfg.dec_layers)]
            self.self_v = [np.zeros((n, h, max_steps, dh), dtype) for _ in range(cfg.dec_layers)]
        else:
            self.conv = [
                np.zeros((n, cfg.kernel_sizes_dec[i] - 1, d), dtype)
                for i in range(cfg.dec_layers)
            ]
        self.pe = network.positional_encoding(max_steps, d, dtype)
        self.t = 0

    def expand_rows(self, times: int) -> None:
        """Tile every row ``times`` times (sentence -> beam lanes)."""
        rep = lambda x: np.repeat(x, times, axis=0)
        self.cross_k = [rep(x) for x in self.cross_k]
        self.cross_v = [rep(x) for x in self.cross_v]
        self.cross_mask = rep(self.cross_mask)
        if self.cfg.arch == "transformer":
            self.self_k = [rep(x) for x in self.self_k]
            self.self_v = [rep(x) for x in self.self_v]
        else:
            self.conv = [rep(x) for x in self.conv]

    def reorder(self, index: np.ndarray) -> None:
        if self.cfg.arch == "transformer":
            self.self_k = [x[index] for x in self.self_k]
            self.self_v = [x[index] for x in self.self_v]
        else:
            self.conv = [x[index] for x in self.conv]

    def step(self, tokens: np.ndarray) -> np.ndarray:
        """Advance one position; returns log-probabilities (N, V)."""
        p, cfg, t = self.p, self.cfg, self.t
        d = cfg.embed_dim
        a = cfg.attn_dim
        h, dh = cfg.heads, cfg.head_dim
        n = tokens.shape[0]
        x = p["embed"][tokens] * math.sqrt(d) + self.pe[t]
        for i in range(cfg.dec_layers):
            pre = f"dec.{i}"
            hid = _layer_norm(x, p[pre + ".ln1.g"], p[pre + ".ln1.b"])
            if cfg.arch == "transformer":
                qkv = hid @ p[pre + ".self.qkv.w"] + p[pre + ".self.qkv.b"]
                q = qkv[:, :a].reshape(n, h, dh)
                self.self_k[i][:, :, t, :] = qkv[:, a : 2 * a].reshape(n, h, dh)
                self.self_v[i][:, :, t, :] = qkv[:, 2 * a :].reshape(n, h, dh)
                keys = self.self_k[i][:, :, : t + 1, :]
                vals = self.self_v[i][:, :, : t + 1, :]
                scores = np.einsum("nhd,nhtd->nht", q, keys) / math.sqrt(dh)
                attn = np.exp(scores - scores.max(axis=-1, keepdims=True))
                attn /= attn.sum(axis=-1, keepdims=True)
                ctx = np.einsum("nht,nhtd->nhd", attn, vals).reshape(n, a)
                sub = ctx @ p[pre + ".self.out.w"] + p[pre + ".self.out.b"]
            else:
                k = cfg.kernel_sizes_dec[i]
                glu = hid @ p[pre + ".self.glu.w"] + p[pre + ".self.glu.b"]
                gate = glu[:, :d] * (1.0 / (1.0 + np.exp(-glu[:, d:])))
                gen = (gate @ p[pre + ".self.gen.w"] + p[pre + ".self.gen.b"]).reshape(n, h, k)
                w = np.exp(gen - gen.max(axis=-1, keepdims=True))
                w /= w.sum(axis=-1, keepdims=True)
                win = np.concatenate([self.conv[i], gate[:, None, :]], axis=1)  # (N,K,D)
                wing = win.reshape(n, k, h, d // h)
                conv = np.einsum("nhk,nkhg->nhg", w, wing).reshape(n, d)
                self.conv[i] = win[:, 1:, :]
                sub = conv @ p[pre + ".self.out.w"] + p[pre + ".self.out.b"]
            x = x + sub
            hid = _layer_norm(x, p[pre + ".ln_x.g"], p[pre + ".ln_x.b"])
            q = (hid @ p[pre + ".cross.q.w"] + p[pre + ".cross.q.b"]).reshape(n, h, dh)
            scores = (
                np.einsum("nhd,nhsd->nhs", q, self.cross_k[i]) / math.sqrt(dh)
                + self.cross_mask
            )
            attn = np.exp(scores - scores.max(axis=-1, keepdims=True))
            attn /= attn.sum(axis=-1, keepdims=True)
            ctx = np.einsum("nhs,nhsd->nhd", attn, self.cross_v[i]).reshape(n, a)
            x = x + ctx @ p[pre + ".cross.out.w"] + p[pre + ".cross.out.b"]
            hid = _layer_norm(x, p[pre + ".ln2.g"], p[pre + ".ln2.b"])
            hid = np.maximum(hid @ p[pre + ".ffn1.w"] + p[pre + ".ffn1.b"], 0.0)
            x = x + hid @ p[pre + ".ffn2.w"] + p[pre + ".ffn2.b"]
        x = _layer_norm(x, p["dec.final_ln.g"], p["dec.final_ln.b"])
        logits = x @ p["embed"].T + p["out_bias"]
        self.t = t + 1
        return _log_softmax(logits)


class EnsembleStepper:
    """Average per-model log-probabilities in log space, step in lockstep."""

    def __init__(self, ckpts: Sequence[Checkpoint], src: np.ndarray, src_len: np.ndarray, max_steps: int):
        self.states = [_ModelState(c, src, src_len, max_steps) for c in ckpts]

    def expand_rows(self, times: int) -> None:
        for s in self.states:
            s.expand_rows(times)

    def reorder(self, index: np.ndarray) -> None:
        for s in self.states:
            s.reorder(index)

    def step(self, tokens: np.ndarray) -> np.ndarray:
        out = self.states[0].step(tokens)
        for s in self.states[1:]:
            out = out + s.step(tokens)
        if len(self.states) > 1:
            out = out / len(self.states)
        return out


def beam_search(
    stepper,
    n_sentences: int,
    beam: int,
    max_len: int,
    length_penalty: float,
    bos_id: int = textkit.BOS_ID,
    eos_id: int = textkit.EOS_ID,
    forbidden_ids: Sequence[int] = (),
) -> List[Tuple[Tuple[int, ...], float]]:
    """Generic batched beam search over any incremental stepper.

    Maximizes sum of per-step log-probabilities normalized by
    generated_length ** length_penalty. Returns per sentence the best
    (token ids without BOS/EOS, normalized score). Deterministic: ties prefer
    the lower token id, then the lower hypothesis index.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    b = n_sentences
    stepper.expand_rows(beam)
    n = b * beam

    scores = np.full((b, beam), NEG, dtype=np.float64)
    scores[:, 0] = 0.0
    tokens = np.full((n,), bos_id, dtype=np.int64)
    history = np.zeros((n, max_len), dtype=np.int64)
    finished: List[List[Tuple[float, Tuple[int, ...]]]] = [[] for _ in range(b)]
    row_done = np.zeros(b, dtype=bool)
    forbidden = [i for i in forbidden_ids if i != eos_id]

    def norm(cum: float, length: int) -> float:
        return cum / (length ** length_penalty)

    for t in range(max_len):
        logp = stepper.step(tokens)  # (N, V)
        v = logp.shape[1]
        if forbidden:
            logp[:, forbidden] = NEG
        cand = scores.reshape(n, 1) + logp  # (N, V)
        cand = cand.reshape(b, beam, v)
        # Token-major flattening makes a stable descending sort break ties by
        # (token id, hypothesis index).
        flat = np.swapaxes(cand, 1, 2).reshape(b, v * beam)
        order = np.argsort(-flat, axis=1, kind="stable")[:, : 2 * beam]

        new_scores = np.full((b, beam), NEG, dtype=np.float64)
        source_rows = np.zeros((b, beam), dtype=np.int64)
        next_tokens = np.full((b, beam), eos_id, dtype=np.int64)
        for row in range(b):
            if row_done[row]:
                continue
            filled = 0
            for pos, flat_idx in enumerate(order[row]):
                tok = int(flat_idx) // beam
                hyp = int(flat_idx) % beam
                score = flat[row, flat_idx]
                if score <= NEG / 2:
                    break
                src_row = row * beam + hyp
                if tok == eos_id:
                    # An end marker counts only while it ranks inside the
                    # beam; this also makes beam=1 equal greedy decoding.
                    if pos < beam:
                        seq = tuple(history[src_row, :t]) + (eos_id,)
                        finished[row].append((norm(float(score), t + 1), seq))
                        if len(finished[row]) >= beam:
                            row_done[row] = True
                            break
                elif filled < beam:
                    new_scores[row, filled] = score
                    source_rows[row, filled] = src_row
                    next_tokens[row, filled] = tok
                    filled += 1
                if filled >= beam and pos >= beam:
                    break

        if row_done.all():
            break
        index = source_rows.reshape(-1)
        stepper.reorder(index)
        history = history[index]
        history[:, t] = next_tokens.reshape(-1)
        tokens = next_tokens.reshape(-1)
        scores = new_scores

    results: List[Tuple[Tuple[int, ...], float]] = []
    for row in range(b):
        pool = list(finished[row])
        if not row_done[row]:
            # Left-over live hypotheses at the length cap are finalized as-is.
            for hyp in range(beam):
                cum = scores[row, hyp]
                if cum > NEG / 2:
                    seq = tuple(history[row * beam + hyp, :max_len])
                    pool.append((norm(float(cum), max_len), seq))
        best = max(enumerate(pool), key=lambda kv: (kv[1][0], -kv[0]))[1]
        seq = tuple(tok for tok in best[1] if tok != eos_id)
        results.append((seq, best[0]))
    return results


def _check_compatible(models: Sequence[Checkpoint]) -> None:
    if not models:
        raise ValueError("need at least one model")
    v = models[0].config.vocab_size
    order = models[0].config.target_order
    for m in models[1:]:
        if m.config.vocab_size != v:
            raise ValueError("ensemble members must share one vocabulary")
        if m.config.target_order != order:
            raise ValueError("ensemble members must share the target order")


class Translator:
    """Decoding facade: batching, source end markers, optional direction
    prefix, special-token suppression, and right-to-left re-reversal."""

    def __init__(
        self,
        models: Sequence[Checkpoint],
        beam: int = 4,
        max_len: int = 64,
        length_penalty: float = 1.0,
        source_prefix_id: Optional[int] = None,
        n_specials: int = len(textkit.CORE_SPECIALS),
        batch_rows: int = 1024,
    ):
        if isinstance(models, Checkpoint):
            models = [models]
        _check_compatible(models)
        self.models = list(models)
        self.beam = beam
        self.max_len = max_len
        self.length_penalty = length_penalty
        self.source_prefix_id = source_prefix_id
        self.forbidden = list(range(n_specials))
        self.batch_rows = batch_rows

    @property
    def r2l(self) -> bool:
        return self.models[0].config.target_order == "r2l"

    def translate_batch(
        self, sources: Sequence[Sequence[int]], raw: bool = False
    ) -> List[Tuple[int, ...]]:
        """Translate id sequences, returned in input order.

        With ``raw`` the right-to-left re-reversal is skipped (used when a
        teacher's unreversed output is needed for auditing).
        """
        order = sorted(range(len(sources)), key=lambda i: (len(sources[i]), i))
        out: List[Optional[Tuple[int, ...]]] = [None] * len(sources)
        chunk = max(1, self.batch_rows // max(self.beam, 1))
        for start in range(0, len(order), chunk):
            idx = order[start : start + chunk]
            prepped = []
            for i in idx:
                seq = tuple(sources[i])
                if self.source_prefix_id is not None:
                    seq = (self.source_prefix_id,) + seq
                prepped.append(seq + (textkit.EOS_ID,))
            src, src_len = network.pad_sequences(prepped)
            stepper = EnsembleStepper(self.models, src, src_len, self.max_len)
            hyps = beam_search(
                stepper,
                len(idx),
                beam=self.beam,
                max_len=self.max_len,
                length_penalty=self.length_penalty,
                forbidden_ids=self.forbidden,
            )
            for i, (seq, _score) in zip(idx, hyps):
                if self.r2l and not raw:
                    seq = tuple(reversed(seq))
                out[i] = seq
        return out  # type: ignore[return-value]

    def translate(self, source: Sequence[int]) -> Tuple[int, ...]:
        return self.translate_batch([source])[0]


def beam_decode(
    models,
    src: Sequence[int],
    beam: int = 4,
    max_len: int = 64,
    length_penalty: float = 1.0,
    n_specials: int = len(textkit.CORE_SPECIALS),
) -> Tuple[int, ...]:
    """Beam-decode one source with one model or an ensemble of models."""
    if isinstance(models, Checkpoint):
        models = [models]
    tr = Translator(
        models, beam=beam, max_len=max_len, length_penalty=length_penalty, n_specials=n_specials
    )
    return tr.translate_batch([src], raw=True)[0]
