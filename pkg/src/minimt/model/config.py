"""Model configurations and the desk-scale preset table.

The presets preserve the ratios between the production-size variants they
are scaled down from (encoder depth multipliers, ffn width ratio, doubled or
quadrupled head dimensions, the dynamic-convolution kernel schedule), not the
absolute sizes. Attention width is heads*head_dim, decoupled from embed_dim
via the input/output projections.
"""

import math
from dataclasses import dataclass, field, asdict
from typing import Dict, Optional, Tuple


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    arch: str = "transformer"  # or "dynamic_conv"
    enc_layers: int = 2
    dec_layers: int = 2
    embed_dim: int = 64
    ffn_dim: int = 256
    heads: int = 4
    head_dim: int = 16
    kernel_sizes_enc: Tuple[int, ...] = ()
    kernel_sizes_dec: Tuple[int, ...] = ()
    dropout: float = 0.2
    attention_dropout: float = 0.1
    relu_dropout: float = 0.1
    target_order: str = "l2r"  # or "r2l"

    def __post_init__(self):
        if self.arch not in ("transformer", "dynamic_conv"):
            raise ValueError(f"unknown arch: {self.arch!r}")
        if self.target_order not in ("l2r", "r2l"):
            raise ValueError(f"unknown target order: {self.target_order!r}")
        for rate in (self.dropout, self.attention_dropout, self.relu_dropout):
            if not 0.0 <= rate < 1.0:
                raise ValueError("dropout rates must be in [0, 1)")
        if self.arch == "dynamic_conv":
            if len(self.kernel_sizes_enc) != self.enc_layers:
                raise ValueError("need one encoder kernel size per layer")
            if len(self.kernel_sizes_dec) != self.dec_layers:
                raise ValueError("need one decoder kernel size per layer")

    @property
    def attn_dim(self) -> int:
        return self.heads * self.head_dim

    def to_dict(self) -> Dict:
        d = asdict(self)
        d["kernel_sizes_enc"] = list(d["kernel_sizes_enc"])
        d["kernel_sizes_dec"] = list(d["kernel_sizes_dec"])
        return d

    @classmethod
    def from_dict(cls, d: Dict) -> "ModelConfig":
        d = dict(d)
        d["kernel_sizes_enc"] = tuple(d.get("kernel_sizes_enc", ()))
        d["kernel_sizes_dec"] = tuple(d.get("kernel_sizes_dec", ()))
        return cls(**d)


def _dynconv_kernels(n_layers: int, small: int = 3, large: int = 7) -> Tuple[int, ...]:
    """Deep-variant schedule: the first ceil(n*7/25) layers keep the small
    kernel, every layer above that uses the large one."""
    cut = math.ceil(n_layers * 7 / 25)
    return tuple(small if i < cut else large for i in range(n_layers))


# Desk-scale preset table. Base anchors everything: 2+2 layers, embed 64,
# ffn 256, 4 heads of 16. The others scale it the way the big variants scale
# their production baseline.
PRESETS: Dict[str, Dict] = {
    "base": {},
    # 2.5x encoder depth (6 -> 15)
    "deep15e6d": {"enc_layers": 5},
    # deeper encoder (6 -> 25), embed and ffn shrunk to 0.75x
    "mid25e6d": {"enc_layers": 8, "embed_dim": 48, "ffn_dim": 192, "head_dim": 12},
    # deeper still (6 -> 50)
    "mid50e6d": {"enc_layers": 17, "embed_dim": 48, "ffn_dim": 192, "head_dim": 12},
    # ffn 4096 -> 15000 (x3.66), attention/relu dropout 0.1 -> 0.3
    "wide_ffn": {"ffn_dim": 937, "attention_dropout": 0.3, "relu_dropout": 0.3},
    # head dimension doubled / quadrupled
    "hdim128": {"head_dim": 32},
    "hdim256": {"head_dim": 64},
    # dynamic convolution, 7 encoder / 6 decoder scaled to 3/2
    "dynconv7e6d": {
        "arch": "dynamic_conv",
        "enc_layers": 3,
        "kernel_sizes_enc": (3, 3, 3),
        "kernel_sizes_dec": (3, 3),
    },
    # deep dynamic convolution: large kernels above the schedule cut
    "dynconv25e6d": {
        "arch": "dynamic_conv",
        "enc_layers": 8,
        "kernel_sizes_enc": _dynconv_kernels(8),
        "kernel_sizes_dec": (3, 3),
    },
}


def preset_config(
    name: str, vocab_size: int, target_order: str = "l2r", **overrides
) -> ModelConfig:
    """One of the named desk-scale architectures, bound to a vocabulary size."""
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    kwargs = dict(PRESETS[name])
    kwargs.update(overrides)
    return ModelConfig(vocab_size=vocab_size, target_order=target_order, **kwargs)


def parameter_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Named parameter shapes; a pure function of the configuration."""
    d = config.embed_dim
    f = config.ffn_dim
    a = config.attn_dim
    h = config.heads
    shapes: Dict[str, Tuple[int, ...]] = {"embed": (config.vocab_size, d)}

    def ln(prefix: str):
        shapes[prefix + ".g"] = (d,)
        shapes[prefix + ".b"] = (d,)

    def attn_block(prefix: str):
        shapes[prefix + ".qkv.w"] = (d, 3 * a)
        shapes[prefix + ".qkv.b"] = (3 * a,)
        shapes[prefix + ".out.w"] = (a, d)
        shapes[prefix + ".out.b"] = (d,)

    def conv_block(prefix: str, kernel: int):
        shapes[prefix + ".glu.w"] = (d, 2 * d)
        shapes[prefix + ".glu.b"] = (2 * d,)
        shapes[prefix + ".gen.w"] = (d, h * kernel)
        shapes[prefix + ".gen.b"] = (h * kernel,)
        shapes[prefix + ".out.w"] = (d, d)
        shapes[prefix + ".out.b"] = (d,)

    def ffn_block(prefix: str):
        shapes[prefix + ".ffn1.w"] = (d, f)
        shapes[prefix + ".ffn1.b"] = (f,)
        shapes[prefix + ".ffn2.w"] = (f, d)
        shapes[prefix + ".ffn2.b"] = (d,)

    for i in range(config.enc_layers):
        p = f"enc.{i}"
        ln(p + ".ln1")
        if config.arch == "transformer":
            attn_block(p + ".self")
        else:
            conv_block(p + ".self", config.kernel_sizes_enc[i])
        ln(p + ".ln2")
        ffn_block(p)
    ln("enc.final_ln")

    for i in range(config.dec_layers):
        p = f"dec.{i}"
        ln(p + ".ln1")
        if config.arch == "transformer":
            attn_block(p + ".self")
        else:
            conv_block(p + ".self", config.kernel_sizes_dec[i])
        ln(p + ".ln_x")
        shapes[p + ".cross.q.w"] = (d, a)
        shapes[p + ".cross.q.b"] = (a,)
        shapes[p + ".cross.kv.w"] = (d, 2 * a)
        shapes[p + ".cross.kv.b"] = (2 * a,)
        shapes[p + ".cross.out.w"] = (a, d)
        shapes[p + ".cross.out.b"] = (d,)
        ln(p + ".ln2")
        ffn_block(p)
    ln("dec.final_ln")

    shapes["out_bias"] = (config.vocab_size,)
    return shapes


def parameter_count(config: ModelConfig) -> int:
    return sum(int(math.prod(s)) for s in parameter_shapes(config).values())
