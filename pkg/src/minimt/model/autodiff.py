"""Minimal reverse-mode automatic differentiation over numpy arrays.

Just enough ops for micro encoder-decoder models: broadcasting arithmetic,
(batched) matmul, embedding lookup, softmax/layer-norm with fused backwards,
dropout, shape ops, a fused label-smoothed cross-entropy, and the
per-position convolution used by the dynamic-convolution blocks.

Every op is differentiable and checked against finite differences in the
test suite. Ops run tape-free inside ``no_grad()`` (used by decoding).
"""

import contextlib
from typing import List, Optional, Sequence, Tuple

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad and _grad_enabled
        self._backward = None
        self._parents: Tuple["Tensor", ...] = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
        else:
            self.grad += g

    def backward(self, seed: Optional[np.ndarray] = None):
        """Reverse-accumulate gradients from this tensor through the tape."""
        topo: List[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data) if seed is None else np.asarray(seed)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            node._backward = None
            node._parents = ()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"


def _as_data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _needs(*tensors) -> bool:
    return _grad_enabled and any(
        isinstance(t, Tensor) and t.requires_grad for t in tensors
    )


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if _needs(*parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if isinstance(p, Tensor))
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum-reduce a broadcasted gradient back to the operand's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    ad, bd = _as_data(a), _as_data(b)
    data = ad + bd

    def backward(g):
        if isinstance(a, Tensor) and a.requires_grad:
            a.accumulate(_unbroadcast(g, ad.shape))
        if isinstance(b, Tensor) and b.requires_grad:
            b.accumulate(_unbroadcast(g, bd.shape))

    return _make(data, (a, b), backward)


def sub(a, b) -> Tensor:
    ad, bd = _as_data(a), _as_data(b)
    data = ad - bd

    def backward(g):
        if isinstance(a, Tensor) and a.requires_grad:
            a.accumulate(_unbroadcast(g, ad.shape))
        if isinstance(b, Tensor) and b.requires_grad:
            b.accumulate(-_unbroadcast(g, bd.shape))

    return _make(data, (a, b), backward)


def mul(a, b) -> Tensor:
    ad, bd = _as_data(a), _as_data(b)
    data = ad * bd

    def backward(g):
        if isinstance(a, Tensor) and a.requires_grad:
            a.accumulate(_unbroadcast(g * bd, ad.shape))
        if isinstance(b, Tensor) and b.requires_grad:
            b.accumulate(_unbroadcast(g * ad, bd.shape))

    return _make(data, (a, b), backward)


def matmul(a, b) -> Tensor:
    """a @ b where b may be a 2-D weight or share a's leading batch dims."""
    ad, bd = _as_data(a), _as_data(b)
    data = ad @ bd

    def backward(g):
        if isinstance(a, Tensor) and a.requires_grad:
            a.accumulate(g @ np.swapaxes(bd, -1, -2))
        if isinstance(b, Tensor) and b.requires_grad:
            if bd.ndim == 2:
                b.accumulate(ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1]))
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
                b.accumulate(_unbroadcast(gb, bd.shape))

    return _make(data, (a, b), backward)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    data = weight.data[ids]

    def backward(g):
        if weight.requires_grad:
            if weight.grad is None:
                weight.grad = np.zeros_like(weight.data)
            np.add.at(weight.grad, ids.reshape(-1), g.reshape(-1, weight.data.shape[-1]))

    return _make(data, (weight,), backward)


def relu(x) -> Tensor:
    xd = _as_data(x)
    data = np.maximum(xd, 0)

    def backward(g):
        if isinstance(x, Tensor) and x.requires_grad:
            x.accumulate(g * (xd > 0))

    return _make(data, (x,), backward)


def sigmoid(x) -> Tensor:
    xd = _as_data(x)
    data = 1.0 / (1.0 + np.exp(-xd))

    def backward(g):
        if isinstance(x, Tensor) and x.requires_grad:
            x.accumulate(g * data * (1.0 - data))

    return _make(data, (x,), backward)


def softmax(x, axis: int = -1) -> Tensor:
    xd = _as_data(x)
    shifted = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if isinstance(x, Tensor) and x.requires_grad:
            dot = (g * data).sum(axis=axis, keepdims=True)
            x.accumulate(data * (g - dot))

    return _make(data, (x,), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis, then scale and shift."""
    xd = _as_data(x)
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd, bd = _as_data(gamma), _as_data(beta)
    data = xhat * gd + bd
    n = xd.shape[-1]

    def backward(g):
        if isinstance(gamma, Tensor) and gamma.requires_grad:
            gamma.accumulate((g * xhat).reshape(-1, n).sum(axis=0))
        if isinstance(beta, Tensor) and beta.requires_grad:
            beta.accumulate(g.reshape(-1, n).sum(axis=0))
        if isinstance(x, Tensor) and x.requires_grad:
            gx = g * gd
            s1 = gx.sum(axis=-1, keepdims=True)
            s2 = (gx * xhat).sum(axis=-1, keepdims=True)
            x.accumulate(inv * (gx - s1 / n - xhat * s2 / n))

    return _make(data, (x, gamma, beta), backward)


def dropout(x, p: float, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; identity when p == 0 or rng is None (eval mode)."""
    if p <= 0.0 or rng is None:
        return x if isinstance(x, Tensor) else Tensor(x)
    xd = _as_data(x)
    mask = (rng.random(xd.shape) >= p).astype(xd.dtype) / (1.0 - p)
    return mul(x, mask)


def reshape(x, shape) -> Tensor:
    xd = _as_data(x)
    data = xd.reshape(shape)

    def backward(g):
        if isinstance(x, Tensor) and x.requires_grad:
            x.accumulate(g.reshape(xd.shape))

    return _make(data, (x,), backward)


def swapaxes(x, a: int, b: int) -> Tensor:
    xd = _as_data(x)
    data = np.swapaxes(xd, a, b)

    def backward(g):
        if isinstance(x, Tensor) and x.requires_grad:
            x.accumulate(np.swapaxes(g, a, b))

    return _make(data, (x,), backward)


def narrow(x, axis: int, start: int, size: int) -> Tensor:
    """Contiguous slice along one axis (used to split fused projections)."""
    xd = _as_data(x)
    index = [slice(None)] * xd.ndim
    index[axis] = slice(start, start + size)
    index = tuple(index)
    data = xd[index]

    def backward(g):
        if isinstance(x, Tensor) and x.requires_grad:
            full = np.zeros_like(xd)
            full[index] = g
            x.accumulate(full)

    return _make(data, (x,), backward)


def sum_all(x) -> Tensor:
    xd = _as_data(x)
    data = np.asarray(xd.sum())

    def backward(g):
        if isinstance(x, Tensor) and x.requires_grad:
            x.accumulate(np.broadcast_to(g, xd.shape).astype(xd.dtype))

    return _make(data, (x,), backward)


def scale(x, c: float) -> Tensor:
    return mul(x, np.asarray(c, dtype=_as_data(x).dtype))


def label_smoothed_ce(
    logits: Tensor, targets: np.ndarray, epsilon: float, mask: np.ndarray
) -> Tuple[Tensor, int]:
    """Sum over unmasked positions of
    (1-eps) * NLL(target) + eps * mean-NLL over the full vocabulary.

    Returns (loss_sum tensor, number of unmasked target positions).
    """
    ld = logits.data
    v = ld.shape[-1]
    m = np.log(np.sum(np.exp(ld - ld.max(axis=-1, keepdims=True)), axis=-1, keepdims=True))
    logp = ld - ld.max(axis=-1, keepdims=True) - m  # log softmax
    flat_logp = logp.reshape(-1, v)
    flat_t = targets.reshape(-1)
    flat_mask = mask.reshape(-1).astype(ld.dtype)
    count = int(flat_mask.sum())
    if count == 0:
        raise ValueError("loss is undefined on an all-padding target")
    nll = -flat_logp[np.arange(flat_t.size), flat_t]
    smooth = -flat_logp.mean(axis=-1)
    per_tok = (1.0 - epsilon) * nll + epsilon * smooth
    loss = np.asarray((per_tok * flat_mask).sum())

    def backward(g):
        if logits.requires_grad:
            p = np.exp(flat_logp)
            q = np.full_like(p, epsilon / v)
            q[np.arange(flat_t.size), flat_t] += 1.0 - epsilon
            d = (p - q) * flat_mask[:, None] * g
            logits.accumulate(d.reshape(ld.shape))

    return _make(loss, (logits,), backward), count


def dynamic_conv(x, weights, kernel_size: int, heads: int, causal: bool) -> Tensor:
    """Per-position depthwise convolution with shared-head kernels.

    ``x`` is (B, T, C); ``weights`` is (B, H, T, K), already normalized;
    channels are split into H contiguous groups sharing one kernel. Causal
    windows cover [t-K+1, t]; non-causal windows are centered (odd K).
    """
    xd, wd = _as_data(x), _as_data(weights)
    b, t, c = xd.shape
    k = kernel_size
    h = heads
    cg = c // h
    if cg * h != c:
        raise ValueError(f"channels {c} not divisible into {h} head groups")
    if causal:
        offsets = np.arange(-k + 1, 1)
    else:
        if k % 2 == 0:
            raise ValueError("non-causal dynamic convolution requires an odd kernel")
        offsets = np.arange(-(k // 2), k // 2 + 1)
    idx = np.arange(t)[:, None] + offsets[None, :]  # (T, K)
    valid = (idx >= 0) & (idx < t)
    idx_c = np.clip(idx, 0, t - 1)

    gathered = xd[:, idx_c, :] * valid[None, :, :, None].astype(xd.dtype)  # (B,T,K,C)
    gathered_g = gathered.reshape(b, t, k, h, cg)
    data = np.einsum("bhtk,btkhg->bthg", wd, gathered_g).reshape(b, t, c)

    def backward(g):
        gg = g.reshape(b, t, h, cg)
        if isinstance(weights, Tensor) and weights.requires_grad:
            weights.accumulate(np.einsum("bthg,btkhg->bhtk", gg, gathered_g))
        if isinstance(x, Tensor) and x.requires_grad:
            dgather = np.einsum("bhtk,bthg->btkhg", wd, gg).reshape(b, t, k, c)
            dgather *= valid[None, :, :, None].astype(xd.dtype)
            dx = np.zeros_like(xd)
            b_grid = np.arange(b)[:, None, None]
            np.add.at(dx, (b_grid, idx_c[None, :, :]), dgather)
            x.accumulate(dx)

    return _make(data, (x, weights), backward)


def parameter(data: np.ndarray) -> Tensor:
    t = Tensor(data)
    t.requires_grad = True
    return t
