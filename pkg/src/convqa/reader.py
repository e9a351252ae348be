"""Extractive span reader: token scoring, passage selection, span extraction.

Tokens get hashed embeddings mixed with a 3-token local context window,
projected and squashed; a sequence-level vector is the mean of all token
representations over the question and passage segments.  Spans are scored by
start/end dot products against trainable vectors, passages by a select
vector.  The reader loss softmaxes start/end scores across every token of
every candidate passage and select scores across the candidates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import Passage, TokenSequence
from .encoder import EncoderGrads, EncoderParams, bucket_indices, init_encoder
from .retriever import LOG_FLOOR, stable_softmax

READER_MAX_TOKENS = 512
READER_PASSAGE_MAX_TOKENS = 384


class GoldenSpanTruncated(Exception):
    """Golden answer offsets fall outside the truncated passage."""


@dataclass
class ReaderParams:
    token_encoder: EncoderParams
    w_start: np.ndarray
    w_end: np.ndarray
    w_select: np.ndarray

    @property
    def dim(self) -> int:
        return self.token_encoder.dim

    def copy(self) -> "ReaderParams":
        return ReaderParams(self.token_encoder.copy(), self.w_start.copy(),
                            self.w_end.copy(), self.w_select.copy())


@dataclass
class ReaderGrads:
    token_encoder: EncoderGrads
    w_start: np.ndarray
    w_end: np.ndarray
    w_select: np.ndarray

    @classmethod
    def zeros_like(cls, params: ReaderParams) -> "ReaderGrads":
        return cls(
            EncoderGrads.zeros_like(params.token_encoder),
            np.zeros_like(params.w_start),
            np.zeros_like(params.w_end),
            np.zeros_like(params.w_select),
        )


@dataclass
class SpanPrediction:
    pid: str
    start: int
    end: int
    s_span: float
    s_select: float
    s_post: float
    answer_tokens: tuple[str, ...]


def init_reader(seed: int, dim: int = 64, hash_buckets: int = 65536) -> ReaderParams:
    rng = np.random.Generator(np.random.PCG64(seed ^ 0x5EED))
    bound = 1.0 / np.sqrt(dim)
    return ReaderParams(
        token_encoder=init_encoder(seed, dim, hash_buckets),
        w_start=rng.uniform(-bound, bound, size=dim),
        w_end=rng.uniform(-bound, bound, size=dim),
        w_select=rng.uniform(-bound, bound, size=dim),
    )


# ---------------------------------------------------------------------------
# Token encoding
# ---------------------------------------------------------------------------

@dataclass
class _SegmentTrace:
    idx: np.ndarray      # bucket indices, one per token
    mixed: np.ndarray    # n x dim pre-projection inputs (embedding + context)
    reps: np.ndarray     # n x dim token representations
    counts: np.ndarray   # context window sizes per token


@dataclass
class ReaderEncoding:
    passage_reps: np.ndarray   # reps for the (truncated) passage tokens
    z_cls: np.ndarray          # mean over question + passage reps
    passage_tokens: tuple[str, ...]
    _question: _SegmentTrace = None
    _passage: _SegmentTrace = None


def _encode_segment(params: EncoderParams, tokens) -> _SegmentTrace:
    idx = bucket_indices(params, tokens)
    emb = params.embedding_table[idx]
    n = len(tokens)
    acc = emb.copy()
    if n > 1:
        acc[1:] += emb[:-1]
        acc[:-1] += emb[1:]
    counts = np.full(n, 3.0)
    counts[0] -= 1.0
    counts[-1] -= 1.0
    if n == 1:
        counts[:] = 1.0
    mixed = emb + acc / counts[:, None]
    reps = np.tanh(mixed @ params.projection.T)
    return _SegmentTrace(idx=idx, mixed=mixed, reps=reps, counts=counts)


def encode_reader_input(
    params: ReaderParams,
    q_seq: TokenSequence,
    passage: Passage,
    max_tokens: int = READER_MAX_TOKENS,
) -> ReaderEncoding:
    """Per-token representations for the passage plus a sequence vector.

    The combined input is the serialized question followed by the passage
    body, with the passage tail truncated to fit the token budget.  Context
    windows stay inside their own segment, so a one-token passage mixes with
    itself only.
    """
    if not passage.tokens:
        raise ValueError("empty passage")
    budget = max(1, min(READER_PASSAGE_MAX_TOKENS, max_tokens - len(q_seq)))
    p_tokens = passage.tokens[:budget]
    q_trace = _encode_segment(params.token_encoder, q_seq.tokens)
    p_trace = _encode_segment(params.token_encoder, p_tokens)
    all_reps = np.vstack([q_trace.reps, p_trace.reps])
    return ReaderEncoding(
        passage_reps=p_trace.reps,
        z_cls=all_reps.mean(axis=0),
        passage_tokens=p_tokens,
        _question=q_trace,
        _passage=p_trace,
    )


def _backprop_segment(params: EncoderParams, trace: _SegmentTrace,
                      d_reps: np.ndarray, grads: EncoderGrads) -> None:
    d_pre = d_reps * (1.0 - trace.reps**2)
    grads.projection += d_pre.T @ trace.mixed
    d_mixed = d_pre @ params.projection
    d_ctx = d_mixed / trace.counts[:, None]
    d_emb = d_mixed + d_ctx
    if len(d_ctx) > 1:
        d_emb[:-1] += d_ctx[1:]
        d_emb[1:] += d_ctx[:-1]
    np.add.at(grads.embedding_table, trace.idx, d_emb)


def backprop_reader_encoding(
    params: ReaderParams,
    enc: ReaderEncoding,
    d_passage_reps: np.ndarray,
    d_z_cls: np.ndarray,
    grads: ReaderGrads,
) -> None:
    n_total = len(enc._question.reps) + len(enc._passage.reps)
    spread = d_z_cls / n_total
    _backprop_segment(params.token_encoder, enc._question,
                      np.broadcast_to(spread, enc._question.reps.shape).copy(),
                      grads.token_encoder)
    _backprop_segment(params.token_encoder, enc._passage,
                      d_passage_reps + spread, grads.token_encoder)


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------

def score_tokens(reps: np.ndarray, w_start: np.ndarray, w_end: np.ndarray):
    return reps @ w_start, reps @ w_end


def score_select(z_cls: np.ndarray, w_select: np.ndarray) -> float:
    return float(np.dot(z_cls, w_select))


@dataclass
class ScoredPassage:
    pid: str
    tokens: tuple[str, ...]
    s_start: np.ndarray
    s_end: np.ndarray
    s_select: float
    s_post: float


def score_passage(params: ReaderParams, q_seq: TokenSequence, passage: Passage,
                  s_post: float = 0.0,
                  max_tokens: int = READER_MAX_TOKENS) -> ScoredPassage:
    enc = encode_reader_input(params, q_seq, passage, max_tokens)
    s_start, s_end = score_tokens(enc.passage_reps, params.w_start, params.w_end)
    return ScoredPassage(
        pid=passage.pid,
        tokens=enc.passage_tokens,
        s_start=s_start,
        s_end=s_end,
        s_select=score_select(enc.z_cls, params.w_select),
        s_post=s_post,
    )


def extract_spans(
    scored: list[ScoredPassage],
    max_span_len: int,
    top_n: int = 20,
) -> list[SpanPrediction]:
    """Top candidate spans across all passages by s_start + s_end.

    Spans with start > end never arise by construction and over-length ones
    are excluded; spans live entirely inside the passage portion of the
    input.  Order is (score desc, pid asc, start asc, end asc); at most top_n
    survive.  Returns [] when no passage admits a valid span.
    """
    if not scored:
        raise ValueError("need at least one scored passage")
    if max_span_len < 1:
        raise ValueError("max_span_len must be >= 1")
    per_passage: list[tuple[float, str, int, int]] = []
    for sp in scored:
        n = len(sp.s_start)
        if n == 0:
            continue
        chunks, starts, ends = [], [], []
        for d in range(min(max_span_len, n)):
            vals = sp.s_start[: n - d] + sp.s_end[d:]
            chunks.append(vals)
            starts.append(np.arange(n - d))
            ends.append(np.arange(d, n))
        all_scores = np.concatenate(chunks)
        all_starts = np.concatenate(starts)
        all_ends = np.concatenate(ends)
        order = np.lexsort((all_ends, all_starts, -all_scores))[:top_n]
        per_passage.extend(
            (float(all_scores[i]), sp.pid, int(all_starts[i]), int(all_ends[i]))
            for i in order
        )

    per_passage.sort(key=lambda t: (-t[0], t[1], t[2], t[3]))
    by_pid = {sp.pid: sp for sp in scored}
    result = []
    for score, pid, start, end in per_passage[:top_n]:
        sp = by_pid[pid]
        result.append(
            SpanPrediction(
                pid=pid, start=start, end=end, s_span=score,
                s_select=sp.s_select, s_post=sp.s_post,
                answer_tokens=tuple(sp.tokens[start : end + 1]),
            )
        )
    return result


# ---------------------------------------------------------------------------
# Training loss
# ---------------------------------------------------------------------------

@dataclass
class ReaderStepResult:
    loss: float
    l_start: float
    l_end: float
    l_select: float
    grads: ReaderGrads


def reader_loss(
    params: ReaderParams,
    q_seq: TokenSequence,
    passages: list[Passage],
    golden_pid: str,
    golden_start: int,
    golden_end: int,
    max_tokens: int = READER_MAX_TOKENS,
) -> ReaderStepResult:
    """Start/end softmax over every token of every candidate passage plus a
    passage-selection softmax; loss = (l_start + l_end)/2 + l_select."""
    golden_rank = next((j for j, p in enumerate(passages) if p.pid == golden_pid), None)
    if golden_rank is None:
        raise ValueError(f"golden passage {golden_pid!r} absent from candidate set")

    encodings = [encode_reader_input(params, q_seq, p, max_tokens) for p in passages]
    if golden_end >= len(encodings[golden_rank].passage_tokens):
        raise GoldenSpanTruncated(
            f"golden span [{golden_start}, {golden_end}] truncated away in {golden_pid!r}"
        )

    starts = [enc.passage_reps @ params.w_start for enc in encodings]
    ends = [enc.passage_reps @ params.w_end for enc in encodings]
    selects = np.array([score_select(enc.z_cls, params.w_select) for enc in encodings])

    lengths = [len(s) for s in starts]
    offset = sum(lengths[:golden_rank])
    flat_start = np.concatenate(starts)
    flat_end = np.concatenate(ends)

    d_start = stable_softmax(flat_start)
    d_end = stable_softmax(flat_end)
    d_sel = stable_softmax(selects)

    i_start = offset + golden_start
    i_end = offset + golden_end
    l_start = -float(np.log(max(d_start[i_start], LOG_FLOOR)))
    l_end = -float(np.log(max(d_end[i_end], LOG_FLOOR)))
    l_select = -float(np.log(max(d_sel[golden_rank], LOG_FLOOR)))
    loss = 0.5 * (l_start + l_end) + l_select

    g_start = d_start.copy()
    g_start[i_start] -= 1.0
    g_start *= 0.5
    g_end = d_end.copy()
    g_end[i_end] -= 1.0
    g_end *= 0.5
    g_sel = d_sel.copy()
    g_sel[golden_rank] -= 1.0

    grads = ReaderGrads.zeros_like(params)
    pos = 0
    for j, enc in enumerate(encodings):
        n = lengths[j]
        gs = g_start[pos : pos + n]
        ge = g_end[pos : pos + n]
        pos += n
        grads.w_start += enc.passage_reps.T @ gs
        grads.w_end += enc.passage_reps.T @ ge
        grads.w_select += g_sel[j] * enc.z_cls
        d_reps = np.outer(gs, params.w_start) + np.outer(ge, params.w_end)
        backprop_reader_encoding(params, enc, d_reps, g_sel[j] * params.w_select, grads)

    return ReaderStepResult(loss=loss, l_start=l_start, l_end=l_end,
                            l_select=l_select, grads=grads)


def apply_reader_gradient(params: ReaderParams, grads: ReaderGrads, lr: float) -> None:
    params.token_encoder.embedding_table -= lr * grads.token_encoder.embedding_table
    params.token_encoder.projection -= lr * grads.token_encoder.projection
    params.w_start -= lr * grads.w_start
    params.w_end -= lr * grads.w_end
    params.w_select -= lr * grads.w_select
