"""Checkpoints: named parameter tensors plus config, step and dev score.

File format: magic, a little-endian length-prefixed JSON header (format
version, config, step, dev_bleu, meta, tensor table), then the raw tensor
bytes as little-endian 32-bit floats. Save -> load -> save is byte-identical.
"""

import json
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional

import numpy as np

from ..util import short_hash
from . import autodiff as ad
from .config import ModelConfig, parameter_shapes

MAGIC = b"MTCKPT1\n"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class Checkpoint:
    params: Dict[str, np.ndarray]
    config: ModelConfig
    step: int = 0
    dev_bleu: Optional[float] = None
    meta: Dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        expected = parameter_shapes(self.config)
        if set(self.params) != set(expected):
            missing = set(expected) - set(self.params)
            extra = set(self.params) - set(expected)
            raise ValueError(f"parameter names do not match config (missing={sorted(missing)}, extra={sorted(extra)})")
        for name, shape in expected.items():
            if tuple(self.params[name].shape) != tuple(shape):
                raise ValueError(
                    f"tensor {name!r} has shape {self.params[name].shape}, expected {shape}"
                )

    def tensors(self) -> Dict[str, ad.Tensor]:
        """Wrap parameters as tape leaves (no copy; treat as read-only)."""
        return {name: ad.parameter(arr) for name, arr in self.params.items()}

    def copy_params(self, dtype=None) -> Dict[str, np.ndarray]:
        return {
            name: arr.astype(dtype or arr.dtype, copy=True)
            for name, arr in self.params.items()
        }

    def with_dev_bleu(self, value: float) -> "Checkpoint":
        return replace(self, dev_bleu=value)


def new_checkpoint(
    config: ModelConfig, seed: int, dtype=np.float32, meta: Optional[Dict] = None
) -> Checkpoint:
    from .network import init_parameters

    params = {k: t.data for k, t in init_parameters(config, seed, dtype).items()}
    full_meta = {"init_seed": seed}
    full_meta.update(meta or {})
    return Checkpoint(params=params, config=config, step=0, meta=full_meta)


def _header_bytes(ckpt: Checkpoint, names: List[str]) -> bytes:
    header = {
        "version": FORMAT_VERSION,
        "config": ckpt.config.to_dict(),
        "step": ckpt.step,
        "dev_bleu": ckpt.dev_bleu,
        "meta": ckpt.meta,
        "tensors": [[n, list(ckpt.params[n].shape)] for n in names],
    }
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def serialize(ckpt: Checkpoint) -> bytes:
    names = sorted(ckpt.params)
    head = _header_bytes(ckpt, names)
    blob = [MAGIC, len(head).to_bytes(8, "little"), head]
    for n in names:
        blob.append(np.ascontiguousarray(ckpt.params[n], dtype="<f4").tobytes())
    return b"".join(blob)


def deserialize(data: bytes) -> Checkpoint:
    if data[: len(MAGIC)] != MAGIC:
        raise ValueError("not a checkpoint blob")
    off = len(MAGIC)
    head_len = int.from_bytes(data[off : off + 8], "little")
    off += 8
    header = json.loads(data[off : off + head_len].decode("utf-8"))
    if header["version"] != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header['version']}")
    off += head_len
    params: Dict[str, np.ndarray] = {}
    for name, shape in header["tensors"]:
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data[off : off + 4 * n], dtype="<f4").reshape(shape)
        params[name] = arr.copy()
        off += 4 * n
    return Checkpoint(
        params=params,
        config=ModelConfig.from_dict(header["config"]),
        step=header["step"],
        dev_bleu=header["dev_bleu"],
        meta=header["meta"],
    )


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    from ..util import atomic_write_bytes

    atomic_write_bytes(path, serialize(ckpt))


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        return deserialize(f.read())


def checkpoint_id(ckpt: Checkpoint) -> str:
    """Content identity: config + step + weights (score and meta excluded)."""
    h = [json.dumps(ckpt.config.to_dict(), sort_keys=True).encode(), str(ckpt.step).encode()]
    for n in sorted(ckpt.params):
        h.append(np.ascontiguousarray(ckpt.params[n], dtype="<f4").tobytes())
    return short_hash(b"".join(h))
