"""Learned re-ranking of retrieved passages via a linear projection.

Passage embeddings from the frozen index are projected by a trainable linear
layer; the question embedding is used as-is.  Training combines a hinge loss
over ranking scores with a Euclidean triplet-margin loss against the hardest
negative, and pushes gradients into both the projection and the question
embedding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import EncoderParams
from .retriever import PassageIndex, RetrievalResult


@dataclass
class PostRankerParams:
    weight: np.ndarray  # dim x dim
    bias: np.ndarray    # dim

    @property
    def dim(self) -> int:
        return self.bias.shape[0]

    def copy(self) -> "PostRankerParams":
        return PostRankerParams(self.weight.copy(), self.bias.copy())


@dataclass
class PostRankerGrads:
    weight: np.ndarray
    bias: np.ndarray

    @classmethod
    def zeros_like(cls, params: PostRankerParams) -> "PostRankerGrads":
        return cls(np.zeros_like(params.weight), np.zeros_like(params.bias))


@dataclass
class RerankedList:
    ranked: list[tuple[str, float]]  # (pid, post score), non-increasing

    def __post_init__(self):
        scores = [s for _, s in self.ranked]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise ValueError("reranked scores must be non-increasing")
        pids = [p for p, _ in self.ranked]
        if len(set(pids)) != len(pids):
            raise ValueError("reranked pids must be distinct")

    def pids(self) -> list[str]:
        return [p for p, _ in self.ranked]


def init_postranker(seed: int, dim: int) -> PostRankerParams:
    rng = np.random.Generator(np.random.PCG64(seed))
    bound = 1.0 / np.sqrt(dim)
    return PostRankerParams(
        weight=rng.uniform(-bound, bound, size=(dim, dim)),
        bias=rng.uniform(-bound, bound, size=dim),
    )


def identity_postranker(dim: int) -> PostRankerParams:
    """Pass-through parameters: projection leaves embeddings untouched, so
    post scores equal raw inner products."""
    return PostRankerParams(weight=np.eye(dim), bias=np.zeros(dim))


def project(params: PostRankerParams, p_emb: np.ndarray) -> np.ndarray:
    if p_emb.shape[-1] != params.dim:
        raise ValueError("embedding dimension mismatch")
    return p_emb @ params.weight.T + params.bias


def score_post(d_q: np.ndarray, d_p: np.ndarray) -> float:
    if d_q.shape != d_p.shape:
        raise ValueError("dimension mismatch")
    return float(np.dot(d_q, d_p))


def rerank(
    params: PostRankerParams,
    d_q: np.ndarray,
    retrieval: RetrievalResult,
    index: PassageIndex,
    top_t: int | None = None,
) -> RerankedList:
    """Rescore every retrieved candidate and resort; ties break by ascending
    pid.  With top_t the list is cut after the first top_t entries."""
    if top_t is not None and top_t > len(retrieval.ranked):
        raise ValueError("top_t exceeds the retrieved candidate count")
    pids = retrieval.pids()
    try:
        embs = index.embeddings_for(pids)
    except KeyError as exc:
        raise ValueError(f"pid {exc.args[0]!r} missing from index") from exc
    scores = project(params, embs) @ d_q
    order = sorted(zip(pids, scores.tolist()), key=lambda t: (-t[1], t[0]))
    if top_t is not None:
        order = order[:top_t]
    return RerankedList(ranked=order)


def hinge_loss(s_pos: float, s_negs, margin: float) -> float:
    """max(0, margin - s_pos + max over negatives)."""
    s_negs = np.asarray(s_negs, dtype=float)
    if s_negs.size < 1:
        raise ValueError("need at least one negative score")
    return max(0.0, margin - s_pos + float(s_negs.max()))


def triplet_loss(d_q: np.ndarray, d_pos: np.ndarray, d_negs: np.ndarray, margin: float) -> float:
    """Euclidean triplet margin against the hardest (closest) negative."""
    d_negs = np.atleast_2d(np.asarray(d_negs))
    if d_negs.shape[0] < 1:
        raise ValueError("need at least one negative")
    dist_pos = float(np.linalg.norm(d_q - d_pos))
    dist_neg = float(np.linalg.norm(d_negs - d_q, axis=1).min())
    return max(0.0, margin + dist_pos - dist_neg)


@dataclass
class PostRankerStepResult:
    loss: float
    hinge: float
    triplet: float
    grads: PostRankerGrads
    grad_q: np.ndarray  # gradient on the question embedding


def postranker_loss(
    params: PostRankerParams,
    d_q: np.ndarray,
    cand_embs: np.ndarray,
    pos_index: int,
    hinge_margin: float,
    triplet_margin: float,
    triplet_weight: float,
) -> PostRankerStepResult:
    """Hinge + triplet_weight * triplet over one question's candidate set.

    cand_embs are raw (unprojected) passage embeddings; the positive must be
    among them.  Subgradients at max ties take the first index.
    """
    cand_embs = np.atleast_2d(np.asarray(cand_embs))
    n = len(cand_embs)
    if not 0 <= pos_index < n:
        raise ValueError("positive absent from candidate set")
    if n < 2:
        raise ValueError("need at least one negative candidate")

    projected = project(params, cand_embs)
    scores = projected @ d_q
    neg_rows = [j for j in range(n) if j != pos_index]

    grads = PostRankerGrads.zeros_like(params)
    grad_q = np.zeros_like(d_q)

    j_star = neg_rows[int(np.argmax(scores[neg_rows]))]
    hinge = max(0.0, float(hinge_margin - scores[pos_index] + scores[j_star]))
    if hinge > 0.0:
        # d(s_j)/dW = outer(d_q, p_j); the bias gradients of the positive and
        # negative terms cancel exactly.
        grads.weight += np.outer(d_q, cand_embs[j_star] - cand_embs[pos_index])
        grad_q += projected[j_star] - projected[pos_index]

    diffs = projected - d_q
    dists = np.linalg.norm(diffs, axis=1)
    k_star = neg_rows[int(np.argmin(dists[neg_rows]))]
    triplet = max(0.0, float(triplet_margin + dists[pos_index] - dists[k_star]))
    if triplet > 0.0 and triplet_weight > 0.0:
        for row, sign in ((pos_index, 1.0), (k_star, -1.0)):
            dist = dists[row]
            if dist < 1e-12:
                continue
            g_vec = sign * diffs[row] / dist          # d(dist)/d(projected_row)
            grads.weight += triplet_weight * np.outer(g_vec, cand_embs[row])
            grads.bias += triplet_weight * g_vec
            grad_q += triplet_weight * (-g_vec)       # d(dist)/d(d_q) = -g_vec
    loss = hinge + triplet_weight * triplet
    return PostRankerStepResult(loss=loss, hinge=hinge, triplet=triplet,
                                grads=grads, grad_q=grad_q)
