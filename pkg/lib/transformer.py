#!/usr/bin/env python3
"""
Attention layers, pre-norm encoder/decoder stacks and 2-D sine position encodings
"""

from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ShapeError
from .logger import get_logger
from .numerics import (LayerNorm, Linear, Module, Tensor, as_tensor, concat, gelu, matmul, softmax,
                       take, transpose)

logger = get_logger(__name__)


class PadMask:
    """Per-position attend flags (True = attend)"""

    def __init__(self, keep: Union[Sequence[bool], np.ndarray]):
        keep = np.asarray(keep, dtype=bool).reshape(-1)
        if not keep.any():
            raise ShapeError("all positions masked")
        self.keep = keep

    @classmethod
    def full(cls, length: int) -> "PadMask":
        return cls(np.ones(length, dtype=bool))

    @classmethod
    def prefix(cls, active: int, length: int) -> "PadMask":
        keep = np.zeros(length, dtype=bool)
        keep[:active] = True
        return cls(keep)

    @property
    def active(self) -> int:
        return int(self.keep.sum())

    def __len__(self) -> int:
        return len(self.keep)

    def __repr__(self):
        return f"PadMask({self.keep.astype(int).tolist()})"


def _attend(q: Tensor, k: Tensor, v: Tensor, mask: Optional[PadMask], heads: int,
            want_weights: bool = False) -> Tuple[Tensor, List[np.ndarray]]:
    d = q.shape[1]
    if d % heads != 0:
        raise ShapeError(f"model dim {d} is not divisible by {heads} heads")
    if k.shape[1] != d or v.shape[1] != d:
        raise ShapeError(f"attention dims disagree: q {q.shape}, k {k.shape}, v {v.shape}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"keys and values differ in length: {k.shape[0]} vs {v.shape[0]}")
    if mask is not None and len(mask) != k.shape[0]:
        raise ShapeError(f"mask length {len(mask)} does not match {k.shape[0]} keys")

    dh = d // heads
    scale = 1.0 / np.sqrt(dh)
    keep = None if mask is None else mask.keep
    outputs, weights = [], []
    for h in range(heads):
        cols = range(h * dh, (h + 1) * dh)
        qh, kh, vh = take(q, cols, axis=1), take(k, cols, axis=1), take(v, cols, axis=1)
        attn = softmax(matmul(qh, transpose(kh)) * scale, axis=-1, mask=keep)
        if want_weights:
            weights.append(attn.numpy())
        outputs.append(matmul(attn, vh))
    out = outputs[0] if heads == 1 else concat(outputs, axis=1)
    return out, weights


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads != 0:
            raise ShapeError(f"model dim {dim} is not divisible by {heads} heads")
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(dim, dim, rng)
        self.wv = Linear(dim, dim, rng)
        self.wo = Linear(dim, dim, rng)
        self._heads = heads

    @property
    def heads(self) -> int:
        return self._heads

    def __call__(self, queries: Tensor, keys: Tensor, values: Tensor, mask: Optional[PadMask] = None,
                 return_weights: bool = False):
        out, weights = _attend(self.wq(queries), self.wk(keys), self.wv(values), mask, self._heads,
                               want_weights=return_weights)
        out = self.wo(out)
        return (out, weights) if return_weights else out


def mha(queries, keys, values, mask: Optional[PadMask], heads: int,
        attention: Optional[MultiHeadAttention] = None) -> Tensor:
    """
    Multi-head scaled dot-product attention.

    With `attention` the learned projections are applied; without it the
    projections are the identity, which is handy for reference checks.
    """
    queries, keys, values = as_tensor(queries), as_tensor(keys), as_tensor(values)
    if attention is not None:
        if attention.heads != heads:
            raise ShapeError(f"attention block has {attention.heads} heads, asked for {heads}")
        return attention(queries, keys, values, mask)
    out, _ = _attend(queries, keys, values, mask, heads)
    return out


class FeedForward(Module):
    def __init__(self, dim: int, ff_dim: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, ff_dim, rng)
        self.fc2 = Linear(ff_dim, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class EncoderLayer(Module):
    def __init__(self, dim: int, heads: int, ff_dim: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.ff = FeedForward(dim, ff_dim, rng)

    def __call__(self, x: Tensor, mask: Optional[PadMask] = None, pos: Optional[Tensor] = None) -> Tensor:
        h = self.norm1(x)
        qk = h if pos is None else h + pos
        x = x + self.self_attn(qk, qk, h, mask)
        return x + self.ff(self.norm2(x))


class DecoderLayer(Module):
    def __init__(self, dim: int, heads: int, ff_dim: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, heads, rng)
        self.norm3 = LayerNorm(dim)
        self.ff = FeedForward(dim, ff_dim, rng)

    def __call__(self, x: Tensor, memory: Tensor, query_mask: Optional[PadMask] = None,
                 memory_mask: Optional[PadMask] = None, memory_pos: Optional[Tensor] = None) -> Tensor:
        h = self.norm1(x)
        x = x + self.self_attn(h, h, h, query_mask)
        h = self.norm2(x)
        memory_keys = memory if memory_pos is None else memory + memory_pos
        x = x + self.cross_attn(h, memory_keys, memory, memory_mask)
        x = x + self.ff(self.norm3(x))
        return _zero_padded(x, query_mask)


def _zero_padded(x: Tensor, mask: Optional[PadMask]) -> Tensor:
    if mask is None or mask.keep.all():
        return x
    return x * mask.keep.astype(np.float64).reshape(-1, 1)


class _Stack(Module):
    layer_type = None

    def __init__(self, num_layers: int, dim: int, heads: int, ff_dim: int, rng: np.random.Generator):
        if num_layers < 0:
            raise ShapeError(f"layer count must be >= 0, got {num_layers}")
        if dim % heads != 0:
            raise ShapeError(f"model dim {dim} is not divisible by {heads} heads")
        self.layers = [self.layer_type(dim, heads, ff_dim, rng) for _ in range(num_layers)]
        self.norm = LayerNorm(dim) if num_layers > 0 else None
        self._dim = dim
        self._heads = heads
        self._ff_dim = ff_dim

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def model_dim(self) -> int:
        return self._dim

    @property
    def num_heads(self) -> int:
        return self._heads

    @property
    def ff_dim(self) -> int:
        return self._ff_dim

    def _check_dim(self, x: Tensor, what: str):
        if x.data.ndim != 2 or x.shape[1] != self._dim:
            raise ShapeError(f"{what} must be n x {self._dim}, got {x.shape}")


class EncoderStack(_Stack):
    layer_type = EncoderLayer

    def __call__(self, tokens: Tensor, mask: Optional[PadMask] = None, pos: Optional[Tensor] = None) -> Tensor:
        return encode(tokens, self, mask, pos)


class DecoderStack(_Stack):
    layer_type = DecoderLayer

    def __call__(self, queries: Tensor, memory: Tensor, query_mask: Optional[PadMask] = None,
                 memory_mask: Optional[PadMask] = None, memory_pos: Optional[Tensor] = None) -> Tensor:
        return decode(queries, memory, self, query_mask, memory_mask, memory_pos)


def encode(tokens, stack: EncoderStack, mask: Optional[PadMask] = None, pos=None) -> Tensor:
    """Run the encoder; `pos` is added to queries and keys in every layer"""
    x = as_tensor(tokens)
    stack._check_dim(x, "encoder input")
    if stack.num_layers == 0:
        return x
    if pos is not None:
        pos = as_tensor(pos)
        if pos.shape != x.shape:
            raise ShapeError(f"position encodings {pos.shape} do not match tokens {x.shape}")
    for layer in stack.layers:
        x = layer(x, mask, pos)
    return stack.norm(x)


def decode(queries, memory, stack: DecoderStack, query_mask: Optional[PadMask] = None,
           memory_mask: Optional[PadMask] = None, memory_pos=None) -> Tensor:
    """Run the decoder over `queries` with cross-attention to `memory`; padded query rows come out zero"""
    x = as_tensor(queries)
    memory = as_tensor(memory)
    stack._check_dim(x, "decoder queries")
    stack._check_dim(memory, "decoder memory")
    if stack.num_layers == 0:
        return x
    if query_mask is not None and len(query_mask) != x.shape[0]:
        raise ShapeError(f"query mask length {len(query_mask)} does not match {x.shape[0]} queries")
    if memory_pos is not None:
        memory_pos = as_tensor(memory_pos)
        if memory_pos.shape != memory.shape:
            raise ShapeError(f"memory position encodings {memory_pos.shape} do not match memory {memory.shape}")
    for layer in stack.layers:
        x = layer(x, memory, query_mask, memory_mask, memory_pos)
    return _zero_padded(stack.norm(x), query_mask)


def sinusoidal_pe(h: int, w: int, dim: int) -> Tensor:
    """
    Fixed 2-D sine encodings, one row per grid cell in row-major order.

    The first dim/2 columns encode the row index and the rest the column
    index; within each half, column 2j is sin(p * f_j) and 2j+1 is
    cos(p * f_j) with f_j = 10000^(-2j / (dim/2)).
    """
    if h < 1 or w < 1:
        raise ShapeError(f"grid must be at least 1 x 1, got {h} x {w}")
    if dim < 4 or dim % 4 != 0:
        raise ShapeError(f"position encoding dim must be a positive multiple of 4, got {dim}")
    half = dim // 2
    freq = 1.0 / (10000.0 ** (2.0 * np.arange(half // 2) / half))

    def axis_code(positions: np.ndarray) -> np.ndarray:
        angles = positions[:, None] * freq[None, :]
        out = np.zeros((len(positions), half))
        out[:, 0::2] = np.sin(angles)
        out[:, 1::2] = np.cos(angles)
        return out

    rows = np.repeat(np.arange(h, dtype=np.float64), w)
    cols = np.tile(np.arange(w, dtype=np.float64), h)
    return Tensor(np.concatenate([axis_code(rows), axis_code(cols)], axis=1))
