"""Forward pass for the micro encoder-decoder models (both architectures),
label-smoothed loss, and parameter initialization.

Pre-norm residual blocks with a final layer norm; sinusoidal positions;
input embeddings are shared between encoder and decoder and tied to the
output projection.
"""

import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .. import textkit
from . import autodiff as ad
from .config import ModelConfig, parameter_shapes

NEG = -1e9

_pe_cache: Dict[Tuple[int, int, str], np.ndarray] = {}


def positional_encoding(length: int, dim: int, dtype) -> np.ndarray:
    key = (length, dim, np.dtype(dtype).name)
    pe = _pe_cache.get(key)
    if pe is None:
        pos = np.arange(length, dtype=np.float64)[:, None]
        half = np.arange(0, dim, 2, dtype=np.float64)
        inv = np.exp(-math.log(10000.0) * half / dim)
        pe = np.zeros((length, dim), dtype=np.float64)
        pe[:, 0::2] = np.sin(pos * inv)
        pe[:, 1::2] = np.cos(pos * inv[: dim // 2])
        pe = pe.astype(dtype)
        _pe_cache[key] = pe
    return pe


def init_parameters(config: ModelConfig, seed: int, dtype=np.float32) -> Dict[str, ad.Tensor]:
    """Scaled uniform fan-based init: W ~ U(+-sqrt(6/(fan_in+fan_out))),
    biases zero, layer-norm gain one. The seed is recorded in checkpoints."""
    rng = np.random.default_rng(seed)
    params: Dict[str, ad.Tensor] = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".g"):
            data = np.ones(shape, dtype=dtype)
        elif name.endswith((".b", "out_bias")) or name == "out_bias":
            data = np.zeros(shape, dtype=dtype)
        else:
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            data = rng.uniform(-bound, bound, size=shape).astype(dtype)
        params[name] = ad.parameter(data)
    return params


def _linear(x, params, prefix: str):
    return ad.add(ad.matmul(x, params[prefix + ".w"]), params[prefix + ".b"])


def _split_heads(x, heads: int, head_dim: int):
    b, t, _ = x.shape
    return ad.swapaxes(ad.reshape(x, (b, t, heads, head_dim)), 1, 2)


def _merge_heads(x):
    b, h, t, dh = x.shape
    return ad.reshape(ad.swapaxes(x, 1, 2), (b, t, h * dh))


def _attention(q, k, v, mask: Optional[np.ndarray], config: ModelConfig, rng):
    scores = ad.scale(ad.matmul(q, ad.swapaxes(k, -1, -2)), 1.0 / math.sqrt(config.head_dim))
    if mask is not None:
        scores = ad.add(scores, mask)
    attn = ad.softmax(scores, axis=-1)
    attn = ad.dropout(attn, config.attention_dropout, rng)
    return ad.matmul(attn, v)


def _self_attention(x, params, prefix: str, config: ModelConfig, mask, rng):
    a = config.attn_dim
    qkv = _linear(x, params, prefix + ".qkv")
    q = _split_heads(ad.narrow(qkv, -1, 0, a), config.heads, config.head_dim)
    k = _split_heads(ad.narrow(qkv, -1, a, a), config.heads, config.head_dim)
    v = _split_heads(ad.narrow(qkv, -1, 2 * a, a), config.heads, config.head_dim)
    ctx = _merge_heads(_attention(q, k, v, mask, config, rng))
    return _linear(ctx, params, prefix + ".out")


def _cross_attention(x, enc_out, params, prefix: str, config: ModelConfig, mask, rng):
    a = config.attn_dim
    q = _split_heads(_linear(x, params, prefix + ".q"), config.heads, config.head_dim)
    kv = _linear(enc_out, params, prefix + ".kv")
    k = _split_heads(ad.narrow(kv, -1, 0, a), config.heads, config.head_dim)
    v = _split_heads(ad.narrow(kv, -1, a, a), config.heads, config.head_dim)
    ctx = _merge_heads(_attention(q, k, v, mask, config, rng))
    return _linear(ctx, params, prefix + ".out")


def _dynamic_conv_block(
    x, params, prefix: str, config: ModelConfig, kernel: int, causal: bool, rng, lane=None
):
    glu = _linear(x, params, prefix + ".glu")
    d = config.embed_dim
    gate = ad.mul(ad.narrow(glu, -1, 0, d), ad.sigmoid(ad.narrow(glu, -1, d, d)))
    if lane is not None:
        # Padding lanes must contribute nothing to neighbouring windows.
        gate = ad.mul(gate, lane)
    gen = _linear(gate, params, prefix + ".gen")  # (B, T, H*K)
    b, t, _ = gen.shape
    w = ad.softmax(
        ad.swapaxes(ad.reshape(gen, (b, t, config.heads, kernel)), 1, 2), axis=-1
    )  # (B, H, T, K)
    w = ad.dropout(w, config.attention_dropout, rng)
    conv = ad.dynamic_conv(gate, w, kernel, config.heads, causal=causal)
    return _linear(conv, params, prefix + ".out")


def _ffn(x, params, prefix: str, config: ModelConfig, rng):
    h = ad.relu(_linear(x, params, prefix + ".ffn1"))
    h = ad.dropout(h, config.relu_dropout, rng)
    return _linear(h, params, prefix + ".ffn2")


def _ln(x, params, prefix: str):
    return ad.layer_norm(x, params[prefix + ".g"], params[prefix + ".b"])


def _residual(x, sub, config: ModelConfig, rng):
    return ad.add(x, ad.dropout(sub, config.dropout, rng))


def _embed(params, ids: np.ndarray, config: ModelConfig, rng):
    dtype = params["embed"].dtype
    x = ad.scale(ad.embedding(params["embed"], ids), math.sqrt(config.embed_dim))
    x = ad.add(x, positional_encoding(ids.shape[1], config.embed_dim, dtype)[None, :, :])
    return ad.dropout(x, config.dropout, rng)


def _pad_lane_mask(lengths: np.ndarray, t: int, dtype) -> np.ndarray:
    return (np.arange(t)[None, :] < lengths[:, None]).astype(dtype)[:, :, None]


def encode(params, config: ModelConfig, src: np.ndarray, src_lengths: np.ndarray, rng=None):
    """Run the encoder; returns final states (B, S, D) as a tape tensor."""
    dtype = params["embed"].dtype
    b, s = src.shape
    key_mask = np.where(
        np.arange(s)[None, None, None, :] < src_lengths[:, None, None, None], 0.0, NEG
    ).astype(dtype)
    x = _embed(params, src, config, rng)
    lane = _pad_lane_mask(src_lengths, s, dtype) if config.arch == "dynamic_conv" else None
    if lane is not None:
        x = ad.mul(x, lane)
    for i in range(config.enc_layers):
        p = f"enc.{i}"
        h = _ln(x, params, p + ".ln1")
        if config.arch == "transformer":
            sub = _self_attention(h, params, p + ".self", config, key_mask, rng)
        else:
            sub = _dynamic_conv_block(
                h, params, p + ".self", config, config.kernel_sizes_enc[i], False, rng, lane
            )
        x = _residual(x, sub, config, rng)
        x = _residual(x, _ffn(_ln(x, params, p + ".ln2"), params, p, config, rng), config, rng)
        if lane is not None:
            x = ad.mul(x, lane)
    return _ln(x, params, "enc.final_ln")


def decode_states(
    params,
    config: ModelConfig,
    enc_out,
    src_lengths: np.ndarray,
    tgt_in: np.ndarray,
    rng=None,
):
    """Run the decoder over a full target prefix; returns states (B, T, D)."""
    dtype = params["embed"].dtype
    b, t = tgt_in.shape
    s = enc_out.shape[1]
    causal = np.where(np.arange(t)[:, None] >= np.arange(t)[None, :], 0.0, NEG).astype(dtype)
    cross_mask = np.where(
        np.arange(s)[None, None, None, :] < src_lengths[:, None, None, None], 0.0, NEG
    ).astype(dtype)
    x = _embed(params, tgt_in, config, rng)
    for i in range(config.dec_layers):
        p = f"dec.{i}"
        h = _ln(x, params, p + ".ln1")
        if config.arch == "transformer":
            sub = _self_attention(h, params, p + ".self", config, causal, rng)
        else:
            sub = _dynamic_conv_block(
                h, params, p + ".self", config, config.kernel_sizes_dec[i], True, rng
            )
        x = _residual(x, sub, config, rng)
        h = _ln(x, params, p + ".ln_x")
        x = _residual(x, _cross_attention(h, enc_out, params, p + ".cross", config, cross_mask, rng), config, rng)
        x = _residual(x, _ffn(_ln(x, params, p + ".ln2"), params, p, config, rng), config, rng)
    return _ln(x, params, "dec.final_ln")


def output_logits(params, states):
    """Project decoder states to the vocabulary (tied to the embedding)."""
    return ad.add(
        ad.matmul(states, ad.swapaxes(params["embed"], 0, 1)), params["out_bias"]
    )


def forward_prepared(
    params,
    config: ModelConfig,
    src: np.ndarray,
    src_lengths: np.ndarray,
    tgt_in: np.ndarray,
    rng=None,
):
    """Logits for padded id arrays; rng enables dropout (training mode)."""
    enc_out = encode(params, config, src, src_lengths, rng)
    states = decode_states(params, config, enc_out, src_lengths, tgt_in, rng)
    return output_logits(params, states)


def pad_sequences(seqs: Sequence[Sequence[int]], pad_id: int = textkit.PAD_ID):
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    out = np.full((len(seqs), max(int(lengths.max()), 1)), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = list(s)
    return out, lengths


def forward(ckpt, src, tgt_prefix, train_mode: bool = False, rng=None):
    """Logits (batch, len(tgt_prefix), vocab) for raw id sequences.

    ``src`` and ``tgt_prefix`` are batches of id sequences (source sides get
    an end-of-sequence marker appended; the prefix is fed verbatim).
    Deterministic when train_mode is off: dropout is disabled.
    """
    config = ckpt.config
    for seqs in (src, tgt_prefix):
        for s in seqs:
            if any(i >= config.vocab_size or i < 0 for i in s):
                raise ValueError("token id out of range for the model vocabulary")
    if len(src) != len(tgt_prefix):
        raise ValueError(f"batch mismatch: {len(src)} sources vs {len(tgt_prefix)} prefixes")
    src_arr, src_len = pad_sequences([tuple(s) + (textkit.EOS_ID,) for s in src])
    tgt_arr, _ = pad_sequences(tgt_prefix)
    if train_mode and rng is None:
        rng = np.random.default_rng(0)
    if not train_mode:
        rng = None
    params = ckpt.tensors()
    with ad.no_grad():
        logits = forward_prepared(params, config, src_arr, src_len, tgt_arr, rng)
    return logits.data


def label_smoothed_loss(logits, targets, epsilon: float, pad_id: int = textkit.PAD_ID):
    """Mean over non-pad tokens of
    (1-eps)*NLL(target) + eps*mean-NLL over the full vocabulary.

    Returns (loss, token_count); loss is a tape tensor when logits is one.
    """
    if not 0.0 <= epsilon < 1.0:
        raise ValueError("label smoothing must be in [0, 1)")
    targets = np.asarray(targets)
    mask = targets != pad_id
    was_tensor = isinstance(logits, ad.Tensor)
    t = logits if was_tensor else ad.Tensor(np.asarray(logits))
    loss_sum, count = ad.label_smoothed_ce(t, targets, epsilon, mask)
    loss = ad.scale(loss_sum, 1.0 / count)
    if was_tensor:
        return loss, count
    return float(loss.data), count


def reverse_target(corpus):
    """Token-reverse every target side (for right-to-left teachers); applying
    twice is the identity."""
    out = corpus.with_pairs([(s, tuple(reversed(t))) for s, t in corpus.pairs])
    out.meta["target_reversed"] = not corpus.meta.get("target_reversed", False)
    return out
