"""Trainable bag-of-words encoders and their analytic gradients.

An encoder hashes each token into a bucketed embedding table, mean-pools the
bucket vectors, applies a square projection, and squashes with tanh.  The
forward pass records a trace sufficient to push a gradient on the output
vector back onto both parameter tensors, so every training loss in this
package can be checked against finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .corpus import TokenSequence

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


@lru_cache(maxsize=1 << 20)
def token_hash(token: str) -> int:
    """FNV-1a 64-bit over UTF-8 bytes; stable across runs and platforms."""
    h = _FNV_OFFSET
    for b in token.encode("utf-8"):
        h = ((h ^ b) * _FNV_PRIME) & _MASK64
    return h


@dataclass
class EncoderParams:
    embedding_table: np.ndarray  # hash_buckets x dim
    projection: np.ndarray       # dim x dim

    @property
    def dim(self) -> int:
        return self.embedding_table.shape[1]

    @property
    def hash_buckets(self) -> int:
        return self.embedding_table.shape[0]

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.embedding_table.copy(), self.projection.copy())


@dataclass
class EncoderGrads:
    embedding_table: np.ndarray
    projection: np.ndarray

    @classmethod
    def zeros_like(cls, params: EncoderParams) -> "EncoderGrads":
        return cls(
            np.zeros_like(params.embedding_table),
            np.zeros_like(params.projection),
        )

    def scale(self, factor: float) -> None:
        self.embedding_table *= factor
        self.projection *= factor


@dataclass
class EncodeTrace:
    """Forward-pass record: bucket indices and the pooled pre-projection vector."""

    bucket_indices: np.ndarray  # int array, one per token
    pooled: np.ndarray          # dim
    output: np.ndarray          # dim, = tanh(projection @ pooled)


def init_encoder(seed: int, dim: int = 64, hash_buckets: int = 65536) -> EncoderParams:
    """Uniform init in +-1/sqrt(dim) from a seeded generator."""
    if dim < 2:
        raise ValueError("dim must be >= 2")
    rng = np.random.Generator(np.random.PCG64(seed))
    bound = 1.0 / np.sqrt(dim)
    return EncoderParams(
        embedding_table=rng.uniform(-bound, bound, size=(hash_buckets, dim)),
        projection=rng.uniform(-bound, bound, size=(dim, dim)),
    )


def bucket_indices(params: EncoderParams, tokens) -> np.ndarray:
    n = params.hash_buckets
    return np.fromiter((token_hash(t) % n for t in tokens), dtype=np.int64, count=len(tokens))


def encode(params: EncoderParams, seq: TokenSequence) -> tuple[np.ndarray, EncodeTrace]:
    """tanh(projection @ mean of hashed token embeddings)."""
    if len(seq) == 0:
        raise ValueError("cannot encode an empty sequence")
    idx = bucket_indices(params, seq.tokens)
    pooled = params.embedding_table[idx].mean(axis=0)
    out = np.tanh(params.projection @ pooled)
    return out, EncodeTrace(bucket_indices=idx, pooled=pooled, output=out)


def similarity(q: np.ndarray, p: np.ndarray) -> float:
    if q.shape != p.shape:
        raise ValueError(f"dimension mismatch: {q.shape} vs {p.shape}")
    return float(np.dot(q, p))


def backprop(
    params: EncoderParams,
    trace: EncodeTrace,
    grad_out: np.ndarray,
    accum: EncoderGrads,
) -> None:
    """Accumulate d(output)/d(params) . grad_out into accum."""
    if accum.embedding_table.shape != params.embedding_table.shape:
        raise ValueError("gradient buffer shape mismatch")
    g_pre = grad_out * (1.0 - trace.output**2)           # through tanh
    accum.projection += np.outer(g_pre, trace.pooled)
    g_pooled = params.projection.T @ g_pre
    per_token = g_pooled / len(trace.bucket_indices)
    np.add.at(accum.embedding_table, trace.bucket_indices, per_token)


def apply_gradient(params: EncoderParams, grads: EncoderGrads, lr: float) -> None:
    params.embedding_table -= lr * grads.embedding_table
    params.projection -= lr * grads.projection


def encoder_checksum(params: EncoderParams) -> str:
    """Content hash used to tie an index to the encoder that built it."""
    import hashlib

    h = hashlib.sha256()
    h.update(np.ascontiguousarray(params.embedding_table).tobytes())
    h.update(np.ascontiguousarray(params.projection).tobytes())
    return h.hexdigest()[:16]
