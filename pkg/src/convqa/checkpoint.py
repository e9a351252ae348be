"""Lossless parameter checkpoints in npz containers.

Each file holds a 'meta' JSON header (format version, artifact kind, config
hash, optional curriculum state) plus one float64 array per parameter
tensor.  Layout:

  encoders checkpoint: q_embedding, q_projection, p_embedding, p_projection
  bundle checkpoint:   q_embedding, q_projection, ranker_weight, ranker_bias,
                       reader_embedding, reader_projection, w_start, w_end,
                       w_select
"""

from __future__ import annotations

import json

import numpy as np

from .encoder import EncoderParams
from .postranker import PostRankerParams
from .reader import ReaderParams

FORMAT_VERSION = 1


def _meta(kind: str, config_hash: str, extra: dict | None = None) -> str:
    meta = {"version": FORMAT_VERSION, "kind": kind, "config_hash": config_hash}
    if extra:
        meta.update(extra)
    return json.dumps(meta, sort_keys=True)


def _check(meta: dict, kind: str) -> None:
    if meta.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('version')!r}")
    if meta.get("kind") != kind:
        raise ValueError(f"expected a {kind!r} checkpoint, found {meta.get('kind')!r}")


def save_encoders(path: str, q: EncoderParams, p: EncoderParams,
                  config_hash: str = "") -> None:
    np.savez(
        path,
        meta=_meta("encoders", config_hash),
        q_embedding=q.embedding_table, q_projection=q.projection,
        p_embedding=p.embedding_table, p_projection=p.projection,
    )


def load_encoders(path: str) -> tuple[EncoderParams, EncoderParams, dict]:
    with np.load(path, allow_pickle=False) as d:
        meta = json.loads(str(d["meta"]))
        _check(meta, "encoders")
        q = EncoderParams(d["q_embedding"], d["q_projection"])
        p = EncoderParams(d["p_embedding"], d["p_projection"])
    return q, p, meta


def save_bundle(path: str, q: EncoderParams, ranker: PostRankerParams,
                reader: ReaderParams, config_hash: str = "",
                extra: dict | None = None) -> None:
    np.savez(
        path,
        meta=_meta("bundle", config_hash, extra),
        q_embedding=q.embedding_table, q_projection=q.projection,
        ranker_weight=ranker.weight, ranker_bias=ranker.bias,
        reader_embedding=reader.token_encoder.embedding_table,
        reader_projection=reader.token_encoder.projection,
        w_start=reader.w_start, w_end=reader.w_end, w_select=reader.w_select,
    )


def load_bundle(path: str) -> tuple[EncoderParams, PostRankerParams, ReaderParams, dict]:
    with np.load(path, allow_pickle=False) as d:
        meta = json.loads(str(d["meta"]))
        _check(meta, "bundle")
        q = EncoderParams(d["q_embedding"], d["q_projection"])
        ranker = PostRankerParams(d["ranker_weight"], d["ranker_bias"])
        reader = ReaderParams(
            EncoderParams(d["reader_embedding"], d["reader_projection"]),
            d["w_start"], d["w_end"], d["w_select"],
        )
    return q, ranker, reader, meta
