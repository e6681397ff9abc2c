#!/usr/bin/env python3
"""
Tests for attention, the encoder/decoder stacks and sine position encodings
"""

import math

import numpy as np
import pytest

from lib.errors import ShapeError
from lib.numerics import Tensor
from lib.transformer import (DecoderStack, EncoderStack, MultiHeadAttention, PadMask, decode, encode, mha,
                             sinusoidal_pe)


def rand(*shape, seed=0):
    return np.random.default_rng(seed).normal(size=shape)


def np_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def np_layer_norm(x, norm):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-5) * norm.gamma.data + norm.beta.data


def np_linear(x, layer):
    return x @ layer.weight.data + layer.bias.data


def np_gelu(x):
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


def np_attention(block, q_in, k_in, v_in):
    q, k, v = np_linear(q_in, block.wq), np_linear(k_in, block.wk), np_linear(v_in, block.wv)
    weights = np_softmax(q @ k.T / math.sqrt(q.shape[1]))
    return np_linear(weights @ v, block.wo)


# Attention

def test_single_token_returns_its_value():
    out = mha([[0.3, -1.2]], [[0.7, 0.1]], [[5.0, -2.0]], mask=None, heads=1)
    assert out.data.tolist() == [[5.0, -2.0]]


def test_masked_key_has_no_influence():
    q, k, v = rand(2, 4), rand(3, 4, seed=1), rand(3, 4, seed=2)
    mask = PadMask([True, True, False])
    base = mha(q, k, v, mask, heads=2).data
    k2, v2 = k.copy(), v.copy()
    k2[2] += 10.0
    v2[2] -= 3.0
    assert np.allclose(mha(q, k2, v2, mask, heads=2).data, base, atol=1e-12)
    assert not np.allclose(mha(q, k2, v2, None, heads=2).data, base)


def test_two_heads_match_per_head_slices():
    q, k, v = rand(3, 6), rand(5, 6, seed=1), rand(5, 6, seed=2)
    out = mha(q, k, v, None, heads=2).data
    parts = []
    for h in range(2):
        cols = slice(3 * h, 3 * h + 3)
        w = np_softmax(q[:, cols] @ k[:, cols].T / math.sqrt(3))
        parts.append(w @ v[:, cols])
    assert np.max(np.abs(out - np.concatenate(parts, axis=1))) < 1e-10


def test_attention_weights_are_convex():
    block = MultiHeadAttention(8, 2, np.random.default_rng(0))
    _, weights = block(Tensor(rand(4, 8)), Tensor(rand(6, 8, seed=1)), Tensor(rand(6, 8, seed=2)),
                       PadMask([True] * 5 + [False]), return_weights=True)
    assert len(weights) == 2
    for w in weights:
        assert np.all(w >= 0)
        assert np.allclose(w.sum(axis=1), 1.0, atol=1e-10)
        assert np.all(w[:, 5] == 0)


def test_attention_shape_checks():
    with pytest.raises(ShapeError):
        mha(rand(2, 6), rand(3, 6), rand(3, 6), None, heads=4)
    with pytest.raises(ShapeError):
        mha(rand(2, 4), rand(3, 4), rand(2, 4), None, heads=1)
    with pytest.raises(ShapeError):
        mha(rand(2, 4), rand(3, 4), rand(3, 4), PadMask([True, True]), heads=1)
    block = MultiHeadAttention(4, 2, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        mha(rand(2, 4), rand(3, 4), rand(3, 4), None, heads=1, attention=block)


def test_pad_mask():
    assert PadMask.prefix(2, 5).keep.tolist() == [True, True, False, False, False]
    assert PadMask.prefix(2, 5).active == 2
    assert len(PadMask.full(3)) == 3
    with pytest.raises(ShapeError, match="all positions masked"):
        PadMask([False, False])


# Encoder

def test_empty_encoder_is_identity():
    stack = EncoderStack(0, 8, 2, 16, np.random.default_rng(0))
    tokens = rand(5, 8)
    assert np.array_equal(encode(tokens, stack).data, tokens)
    assert stack.parameters() == {}


def test_encoder_keeps_shape():
    stack = EncoderStack(2, 8, 2, 16, np.random.default_rng(0))
    for n in (1, 3, 7):
        assert encode(rand(n, 8), stack).shape == (n, 8)
    with pytest.raises(ShapeError):
        encode(rand(3, 6), stack)
    with pytest.raises(ShapeError):
        encode(rand(4, 8), stack, pos=rand(3, 8))


def test_encoder_is_permutation_equivariant():
    stack = EncoderStack(2, 8, 2, 16, np.random.default_rng(1))
    tokens = rand(4, 8, seed=3)
    pos = sinusoidal_pe(2, 2, 8).data
    perm = [2, 0, 3, 1]
    out = encode(tokens, stack, pos=pos).data
    permuted = encode(tokens[perm], stack, pos=pos[perm]).data
    assert np.max(np.abs(permuted - out[perm])) < 1e-10


# Decoder

def test_empty_decoder_is_identity():
    stack = DecoderStack(0, 8, 2, 16, np.random.default_rng(0))
    queries = rand(3, 8)
    assert np.array_equal(decode(queries, rand(4, 8), stack).data, queries)


def test_padded_queries_do_not_leak():
    stack = DecoderStack(2, 8, 2, 16, np.random.default_rng(2))
    memory = rand(6, 8, seed=1)
    queries = rand(4, 8, seed=2)
    mask = PadMask.prefix(2, 4)
    base = decode(queries, memory, stack, query_mask=mask).data

    perturbed = queries.copy()
    perturbed[2:] = rand(2, 8, seed=9) * 5.0
    out = decode(perturbed, memory, stack, query_mask=mask).data
    assert np.allclose(out[:2], base[:2], atol=1e-12)
    assert np.all(out[2:] == 0.0)


def test_one_layer_decoder_matches_step_by_step_reference():
    stack = DecoderStack(1, 4, 1, 8, np.random.default_rng(5))
    queries, memory = rand(2, 4, seed=6), rand(3, 4, seed=7)
    out = decode(queries, memory, stack).data

    layer = stack.layers[0]
    x = queries
    h = np_layer_norm(x, layer.norm1)
    x = x + np_attention(layer.self_attn, h, h, h)
    h = np_layer_norm(x, layer.norm2)
    x = x + np_attention(layer.cross_attn, h, memory, memory)
    h = np_layer_norm(x, layer.norm3)
    x = x + np_linear(np_gelu(np_linear(h, layer.ff.fc1)), layer.ff.fc2)
    expected = np_layer_norm(x, stack.norm)
    assert np.max(np.abs(out - expected)) < 1e-10


def test_memory_positions_change_keys_only():
    stack = DecoderStack(1, 4, 1, 8, np.random.default_rng(5))
    queries, memory = rand(2, 4, seed=6), rand(3, 4, seed=7)
    without = decode(queries, memory, stack).data
    with_pos = decode(queries, memory, stack, memory_pos=sinusoidal_pe(1, 3, 4)).data
    assert not np.allclose(without, with_pos)


# Position encodings

def test_position_encoding_range_and_distinct_cells():
    pe = sinusoidal_pe(4, 5, 16).data
    assert pe.shape == (20, 16)
    assert np.all(np.abs(pe) <= 1.0)
    assert not np.allclose(pe[0], pe[1])
    assert len({tuple(row) for row in pe}) == 20


def test_position_encoding_closed_form():
    h, w, dim = 3, 4, 8
    pe = sinusoidal_pe(h, w, dim).data
    half = dim // 2
    for r in range(h):
        for c in range(w):
            row = pe[r * w + c]
            for offset, p in ((0, r), (half, c)):
                for j in range(half // 2):
                    f = 10000.0 ** (-2.0 * j / half)
                    assert row[offset + 2 * j] == pytest.approx(math.sin(p * f), abs=1e-12)
                    assert row[offset + 2 * j + 1] == pytest.approx(math.cos(p * f), abs=1e-12)


def test_position_encoding_rejects_bad_dims():
    with pytest.raises(ShapeError):
        sinusoidal_pe(2, 2, 6)
    with pytest.raises(ShapeError):
        sinusoidal_pe(0, 2, 8)


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
