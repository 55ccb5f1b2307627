"""Finite-difference gradient verification.

The checker sweeps every parameter entry with central differences. To make
that affordable, a replicated eval-only forward carries a leading replica
axis on every array: each replica is the same batch under a different
single-entry parameter perturbation. Unperturbed tensors keep replica size 1
and broadcast, so the prefix of the network up to the perturbed tensor is
computed once per chunk. Numerics mirror the training forward exactly
(dropout off); a parity assertion belongs in the test suite.
"""

import math
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .. import textkit
from .config import ModelConfig
from .network import NEG, positional_encoding


def _ln(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    return xc * inv * g[:, None, None, :] + b[:, None, None, :]


def _linear(x, w, b):
    return np.matmul(x, w[:, None]) + b[:, None, None, :]


def _softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _heads(x, heads, dh):
    r, b, t, _ = x.shape
    return x.reshape(r, b, t, heads, dh).transpose(0, 1, 3, 2, 4)


def _merge(x):
    r, b, h, t, dh = x.shape
    return x.transpose(0, 1, 3, 2, 4).reshape(r, b, t, h * dh)


def _attention(q, k, v, mask, dh):
    scores = np.matmul(q, np.swapaxes(k, -1, -2)) / math.sqrt(dh)
    if mask is not None:
        scores = scores + mask
    return np.matmul(_softmax(scores), v)


def _self_attn(x, p, pre, cfg, mask):
    a = cfg.attn_dim
    qkv = _linear(x, p[pre + ".qkv.w"], p[pre + ".qkv.b"])
    q = _heads(qkv[..., :a], cfg.heads, cfg.head_dim)
    k = _heads(qkv[..., a : 2 * a], cfg.heads, cfg.head_dim)
    v = _heads(qkv[..., 2 * a :], cfg.heads, cfg.head_dim)
    return _linear(_merge(_attention(q, k, v, mask, cfg.head_dim)), p[pre + ".out.w"], p[pre + ".out.b"])


def _cross_attn(x, enc, p, pre, cfg, mask):
    a = cfg.attn_dim
    q = _heads(_linear(x, p[pre + ".q.w"], p[pre + ".q.b"]), cfg.heads, cfg.head_dim)
    kv = _linear(enc, p[pre + ".kv.w"], p[pre + ".kv.b"])
    k = _heads(kv[..., :a], cfg.heads, cfg.head_dim)
    v = _heads(kv[..., a:], cfg.heads, cfg.head_dim)
    return _linear(_merge(_attention(q, k, v, mask, cfg.head_dim)), p[pre + ".out.w"], p[pre + ".out.b"])


def _dynconv(x, p, pre, cfg, kernel, causal, lane):
    d = cfg.embed_dim
    h = cfg.heads
    glu = _linear(x, p[pre + ".glu.w"], p[pre + ".glu.b"])
    gate = glu[..., :d] * (1.0 / (1.0 + np.exp(-glu[..., d:])))
    if lane is not None:
        gate = gate * lane
    gen = _linear(gate, p[pre + ".gen.w"], p[pre + ".gen.b"])
    r, b, t, _ = gen.shape
    w = _softmax(gen.reshape(r, b, t, h, kernel).transpose(0, 1, 3, 2, 4))  # (r,B,H,T,K)
    if causal:
        offsets = np.arange(-kernel + 1, 1)
    else:
        offsets = np.arange(-(kernel // 2), kernel // 2 + 1)
    idx = np.arange(t)[:, None] + offsets[None, :]
    valid = (idx >= 0) & (idx < t)
    idx_c = np.clip(idx, 0, t - 1)
    gathered = gate[:, :, idx_c, :] * valid[None, None, :, :, None]
    gathered = gathered.reshape(gathered.shape[:4] + (h, d // h))
    out = np.einsum("rbhtk,rbtkhg->rbthg", w, gathered)
    out = out.reshape(out.shape[:3] + (d,))
    return _linear(out, p[pre + ".out.w"], p[pre + ".out.b"])


def _ffn(x, p, pre):
    hdn = np.maximum(_linear(x, p[pre + ".ffn1.w"], p[pre + ".ffn1.b"]), 0.0)
    return _linear(hdn, p[pre + ".ffn2.w"], p[pre + ".ffn2.b"])


def replicated_loss(
    params: Dict[str, np.ndarray],
    config: ModelConfig,
    src: np.ndarray,
    src_len: np.ndarray,
    tgt_in: np.ndarray,
    tgt_out: np.ndarray,
    epsilon: float,
) -> np.ndarray:
    """Mean label-smoothed loss per replica; every param is (r_i, *shape)."""
    emb = params["embed"]
    d = config.embed_dim
    b, s = src.shape
    t = tgt_in.shape[1]
    dtype = emb.dtype
    pe_s = positional_encoding(s, d, dtype)
    pe_t = positional_encoding(t, d, dtype)

    key_mask = np.where(np.arange(s)[None, :] < src_len[:, None], 0.0, NEG).astype(dtype)
    enc_mask = key_mask[None, :, None, None, :]  # (1,B,1,1,S)
    causal = np.where(np.arange(t)[:, None] >= np.arange(t)[None, :], 0.0, NEG).astype(dtype)
    causal = causal[None, None, None, :, :]
    lane = (np.arange(s)[None, :] < src_len[:, None]).astype(dtype)[None, :, :, None]

    x = emb[:, src] * math.sqrt(d) + pe_s[None, None]
    if config.arch == "dynamic_conv":
        x = x * lane
    for i in range(config.enc_layers):
        pre = f"enc.{i}"
        h = _ln(x, params[pre + ".ln1.g"], params[pre + ".ln1.b"])
        if config.arch == "transformer":
            sub = _self_attn(h, params, pre + ".self", config, enc_mask)
        else:
            sub = _dynconv(h, params, pre + ".self", config, config.kernel_sizes_enc[i], False, lane)
        x = x + sub
        x = x + _ffn(_ln(x, params[pre + ".ln2.g"], params[pre + ".ln2.b"]), params, pre)
        if config.arch == "dynamic_conv":
            x = x * lane
    enc = _ln(x, params["enc.final_ln.g"], params["enc.final_ln.b"])

    x = emb[:, tgt_in] * math.sqrt(d) + pe_t[None, None]
    for i in range(config.dec_layers):
        pre = f"dec.{i}"
        h = _ln(x, params[pre + ".ln1.g"], params[pre + ".ln1.b"])
        if config.arch == "transformer":
            sub = _self_attn(h, params, pre + ".self", config, causal)
        else:
            sub = _dynconv(h, params, pre + ".self", config, config.kernel_sizes_dec[i], True, None)
        x = x + sub
        h = _ln(x, params[pre + ".ln_x.g"], params[pre + ".ln_x.b"])
        x = x + _cross_attn(h, enc, params, pre + ".cross", config, enc_mask)
        x = x + _ffn(_ln(x, params[pre + ".ln2.g"], params[pre + ".ln2.b"]), params, pre)
    x = _ln(x, params["dec.final_ln.g"], params["dec.final_ln.b"])

    logits = np.matmul(x, np.swapaxes(emb, -1, -2)[:, None]) + params["out_bias"][:, None, None, :]
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    r = logp.shape[0]
    v = logp.shape[-1]
    flat = logp.reshape(r, -1, v)
    tflat = tgt_out.reshape(-1)
    mask = (tflat != textkit.PAD_ID).astype(dtype)
    nll = -flat[:, np.arange(tflat.size), tflat]
    smooth = -flat.mean(axis=-1)
    per_tok = (1.0 - epsilon) * nll + epsilon * smooth
    return (per_tok * mask[None, :]).sum(axis=1) / mask.sum()


def fd_gradient_check(
    params: Dict[str, np.ndarray],
    config: ModelConfig,
    src: np.ndarray,
    src_len: np.ndarray,
    tgt_in: np.ndarray,
    tgt_out: np.ndarray,
    analytic: Dict[str, np.ndarray],
    epsilon: float = 0.1,
    h: float = 1e-3,
    chunk: int = 96,
    denom_floor: float = 1e-3,
    tolerance: float = 1e-3,
    refine_h: float = 1e-5,
    tensors: Optional[Sequence[str]] = None,
) -> "FDReport":
    """Compare analytic gradients of the mean loss against central finite
    differences for every parameter entry.

    Relative error is |fd - g| / max(|fd|, |g|, denom_floor), so
    zero-gradient entries are held to an absolute bar instead of exploding.

    Central differences assume the loss is smooth across [x-h, x+h]; a step
    that straddles a relu kink produces an arbitrarily wrong estimate even
    when the analytic gradient is exact. Entries exceeding ``tolerance`` at
    the primary step are therefore re-estimated at ``refine_h`` (where the
    smoothness assumption holds) and the report counts them, so a systematic
    gradient bug still fails: it would miss at every step size and the
    refined-entry fraction is surfaced to the caller.
    """
    base = {k: a[None].astype(np.float64) for k, a in params.items()}
    names = tensors if tensors is not None else sorted(params)
    worst = 0.0
    worst_name = ""
    refined: List[str] = []
    total = 0

    def fd_for(name: str, cols: np.ndarray, step: float) -> np.ndarray:
        flat = params[name].reshape(-1).astype(np.float64)
        m = cols.size
        rep = np.repeat(flat[None, :], 2 * m, axis=0)
        rows = np.arange(m)
        rep[rows, cols] += step
        rep[m + rows, cols] -= step
        trial = dict(base)
        trial[name] = rep.reshape((2 * m,) + params[name].shape)
        losses = replicated_loss(trial, config, src, src_len, tgt_in, tgt_out, epsilon)
        return (losses[:m] - losses[m:]) / (2 * step)

    for name in names:
        g = analytic[name].reshape(-1)
        n = g.size
        total += n
        for start in range(0, n, chunk):
            cols = np.arange(start, min(start + chunk, n))
            fd = fd_for(name, cols, h)
            ga = g[cols]
            denom = np.maximum(np.maximum(np.abs(fd), np.abs(ga)), denom_floor)
            rel = np.abs(fd - ga) / denom
            bad = np.flatnonzero(rel > 0.5 * tolerance)
            if bad.size:
                fd2 = fd_for(name, cols[bad], refine_h)
                ga2 = ga[bad]
                denom2 = np.maximum(np.maximum(np.abs(fd2), np.abs(ga2)), denom_floor)
                rel[bad] = np.abs(fd2 - ga2) / denom2
                refined.extend(f"{name}[{c}]" for c in cols[bad])
            i = int(np.argmax(rel))
            if rel[i] > worst:
                worst = float(rel[i])
                worst_name = f"{name}[{cols[i]}]"
    return FDReport(
        max_rel_error=worst,
        worst_entry=worst_name,
        refined_entries=tuple(refined),
        total_entries=total,
    )


class FDReport:
    def __init__(self, max_rel_error: float, worst_entry: str, refined_entries, total_entries: int):
        self.max_rel_error = max_rel_error
        self.worst_entry = worst_entry
        self.refined_entries = tuple(refined_entries)
        self.total_entries = total_entries

    @property
    def refined_fraction(self) -> float:
        return len(self.refined_entries) / max(self.total_entries, 1)

    def __repr__(self):
        return (
            f"FDReport(max_rel_error={self.max_rel_error:.3e}, worst={self.worst_entry!r}, "
            f"refined={len(self.refined_entries)}/{self.total_entries})"
        )
