"""Passage index, exact inner-product retrieval, and retriever training losses.

Pre-training drives both encoders with a softmax NLL over in-batch candidates
plus a bidirectional KL penalty tying the history-serialized question's
retrieval distribution to its rewrite's.  Joint-phase fine-tuning touches the
question encoder only; the passage side stays frozen inside the index.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .corpus import (
    Corpus,
    DEFAULT_WINDOW,
    passage_sequence,
    rewrite_sequence,
    serialize_questions_only,
    serialize_with_answers,
)
from .encoder import (
    EncoderGrads,
    EncoderParams,
    backprop,
    encode,
    encoder_checksum,
)
from .optim import Optimizer
from .rng import CounterRng

LOG_FLOOR = 1e-12


@dataclass
class PassageIndex:
    ids: list[str]         # pid order matches matrix rows, ascending
    matrix: np.ndarray     # n_passages x dim
    encoder_checksum: str = ""

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def row_of(self, pid: str) -> int:
        return self._row_lookup[pid]

    def __post_init__(self):
        self._row_lookup = {pid: i for i, pid in enumerate(self.ids)}

    def embeddings_for(self, pids) -> np.ndarray:
        return self.matrix[[self._row_lookup[p] for p in pids]]


@dataclass
class RetrievalResult:
    ranked: list[tuple[str, float]]  # (pid, score), score non-increasing

    def __post_init__(self):
        scores = [s for _, s in self.ranked]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise ValueError("retrieval scores must be non-increasing")
        pids = [p for p, _ in self.ranked]
        if len(set(pids)) != len(pids):
            raise ValueError("retrieval pids must be distinct")

    def pids(self) -> list[str]:
        return [p for p, _ in self.ranked]


@dataclass
class Distribution:
    probs: np.ndarray

    def __post_init__(self):
        if np.any(self.probs < 0):
            raise ValueError("probabilities must be non-negative")
        if abs(float(self.probs.sum()) - 1.0) > 1e-9:
            raise ValueError("probabilities must sum to 1 within 1e-9")


@dataclass(frozen=True)
class PretrainInstance:
    question_full: object   # TokenSequence with windowed history incl. answers
    question_rewrite: object
    positive: str
    hard_negative: str

    def __post_init__(self):
        if self.positive == self.hard_negative:
            raise ValueError("positive and hard negative must differ")


# ---------------------------------------------------------------------------
# Index construction and search
# ---------------------------------------------------------------------------

def build_index(passage_encoder: EncoderParams, corpus: Corpus) -> PassageIndex:
    """One embedding row per passage, rows in ascending pid order."""
    if not corpus.passages:
        raise ValueError("cannot index an empty corpus")
    pids = corpus.sorted_pids()
    matrix = np.empty((len(pids), passage_encoder.dim))
    for i, pid in enumerate(pids):
        vec, _ = encode(passage_encoder, passage_sequence(corpus.passages[pid]))
        matrix[i] = vec
    return PassageIndex(ids=pids, matrix=matrix,
                        encoder_checksum=encoder_checksum(passage_encoder))


def retrieve_top_k(index: PassageIndex, q: np.ndarray, k: int) -> RetrievalResult:
    """Exact scan: the min(k, n) globally highest inner products.

    Ties break by ascending pid, which the stable sort over the pid-ordered
    rows gives for free.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = index.matrix @ q
    order = np.argsort(-scores, kind="stable")[: min(k, len(index.ids))]
    return RetrievalResult(ranked=[(index.ids[i], float(scores[i])) for i in order])


# ---------------------------------------------------------------------------
# Distributions and scalar losses
# ---------------------------------------------------------------------------

def stable_softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max()
    e = np.exp(shifted)
    return e / e.sum()


def candidate_distribution(q: np.ndarray, candidates: np.ndarray) -> Distribution:
    """Softmax over inner products of the question with each candidate row."""
    candidates = np.atleast_2d(np.asarray(candidates))
    return Distribution(probs=stable_softmax(candidates @ q))


def nll_loss(d_full: Distribution, d_rewrite: Distribution, pos_index: int) -> float:
    """Mean negative log-likelihood of the positive under both distributions."""
    p1 = float(d_full.probs[pos_index])
    p2 = float(d_rewrite.probs[pos_index])
    if p1 < LOG_FLOOR or p2 < LOG_FLOOR:
        warnings.warn("positive-passage probability underflow; clamping at 1e-12")
    return -0.5 * (np.log(max(p1, LOG_FLOOR)) + np.log(max(p2, LOG_FLOOR)))


def _kl(a: np.ndarray, b: np.ndarray) -> float:
    mask = a > 0
    return float(np.sum(a[mask] * (np.log(a[mask]) - np.log(np.maximum(b[mask], LOG_FLOOR)))))


def kl_regularizer(d_full: Distribution, d_rewrite: Distribution) -> float:
    """Symmetrized KL divergence, 0.5*(KL(a||b) + KL(b||a))."""
    a, b = d_full.probs, d_rewrite.probs
    if a.shape != b.shape:
        raise ValueError("distributions must have equal length")
    return 0.5 * (_kl(a, b) + _kl(b, a))


# ---------------------------------------------------------------------------
# Pre-training
# ---------------------------------------------------------------------------

def build_pretrain_instances(corpus: Corpus, window: int = DEFAULT_WINDOW) -> list[PretrainInstance]:
    """One instance per turn; the hard negative is the non-golden passage with
    the highest idf-weighted overlap with the rewrite (ties: lowest pid), a
    stand-in for dataset-provided tf-idf negatives.  Rare shared tokens count
    for more, so lexically close distractors win over generic ones."""
    pids = corpus.sorted_pids()
    if len(pids) < 2:
        raise ValueError("need at least 2 passages to pick hard negatives")
    row_of = {pid: i for i, pid in enumerate(pids)}
    token_rows: dict[str, list[int]] = {}
    for pid in pids:
        r = row_of[pid]
        for tok in set(corpus.passages[pid].tokens):
            token_rows.setdefault(tok, []).append(r)
    n = len(pids)

    instances = []
    for conv in corpus.conversations:
        for t_idx, turn in enumerate(conv.turns, start=1):
            scores = np.zeros(n)
            for tok in set(turn.rewrite_tokens):
                rows = token_rows.get(tok)
                if rows:
                    scores[rows] += np.log(n / len(rows))
            scores[row_of[turn.golden_pid]] = -1.0
            hard = pids[int(np.argmax(scores))]
            instances.append(
                PretrainInstance(
                    question_full=serialize_with_answers(conv, t_idx, window),
                    question_rewrite=rewrite_sequence(turn),
                    positive=turn.golden_pid,
                    hard_negative=hard,
                )
            )
    return instances


@dataclass
class PretrainStepResult:
    loss: float
    nll: float
    kl: float
    q_grads: EncoderGrads
    p_grads: EncoderGrads


def pretrain_loss(
    q_params: EncoderParams,
    p_params: EncoderParams,
    corpus: Corpus,
    batch: list[PretrainInstance],
    kl_weight: float,
) -> PretrainStepResult:
    """Mean over the batch of NLL + kl_weight * symmetric KL, with gradients
    for both encoders.

    Each question's candidate list is its own positive, its own hard negative,
    and every other batch question's positive and hard negative, de-duplicated
    by pid keeping the first occurrence.
    """
    if not batch:
        raise ValueError("empty batch")
    if not 0.0 <= kl_weight <= 1.0:
        raise ValueError("kl_weight must lie in [0, 1]")

    pool_pids: list[str] = []
    pool_pos: dict[str, int] = {}
    for inst in batch:
        for pid in (inst.positive, inst.hard_negative):
            if pid not in pool_pos:
                pool_pos[pid] = len(pool_pids)
                pool_pids.append(pid)

    pool_vecs = np.empty((len(pool_pids), p_params.dim))
    pool_traces = []
    for i, pid in enumerate(pool_pids):
        vec, trace = encode(p_params, passage_sequence(corpus.passages[pid]))
        pool_vecs[i] = vec
        pool_traces.append(trace)
    pool_grads = np.zeros_like(pool_vecs)

    q_grads = EncoderGrads.zeros_like(q_params)
    p_grads = EncoderGrads.zeros_like(p_params)
    inv_b = 1.0 / len(batch)
    total_nll = total_kl = 0.0

    for inst in batch:
        cand: list[int] = []
        seen = set()
        own = [inst.positive, inst.hard_negative]
        others = [pid for other in batch if other is not inst
                  for pid in (other.positive, other.hard_negative)]
        for pid in own + others:
            if pid not in seen:
                seen.add(pid)
                cand.append(pool_pos[pid])
        cand_idx = np.array(cand)
        cand_vecs = pool_vecs[cand_idx]

        q_full, tr_full = encode(q_params, inst.question_full)
        q_rw, tr_rw = encode(q_params, inst.question_rewrite)
        d_full = stable_softmax(cand_vecs @ q_full)
        d_rw = stable_softmax(cand_vecs @ q_rw)

        pos = 0  # own positive always leads the candidate list
        nll = -0.5 * (np.log(max(d_full[pos], LOG_FLOOR)) + np.log(max(d_rw[pos], LOG_FLOOR)))
        kl = 0.5 * (_kl(d_full, d_rw) + _kl(d_rw, d_full))
        total_nll += nll
        total_kl += kl

        onehot = np.zeros(len(cand))
        onehot[pos] = 1.0
        g_full = 0.5 * (d_full - onehot)
        g_rw = 0.5 * (d_rw - onehot)
        if kl_weight > 0.0:
            ratio = np.log(np.maximum(d_full, LOG_FLOOR)) - np.log(np.maximum(d_rw, LOG_FLOOR))
            kl_fr = _kl(d_full, d_rw)
            kl_rf = _kl(d_rw, d_full)
            g_full = g_full + kl_weight * 0.5 * (d_full * (ratio - kl_fr) + (d_full - d_rw))
            g_rw = g_rw + kl_weight * 0.5 * (d_rw * (-ratio - kl_rf) + (d_rw - d_full))

        backprop(q_params, tr_full, inv_b * (cand_vecs.T @ g_full), q_grads)
        backprop(q_params, tr_rw, inv_b * (cand_vecs.T @ g_rw), q_grads)
        np.add.at(pool_grads, cand_idx,
                  inv_b * (np.outer(g_full, q_full) + np.outer(g_rw, q_rw)))

    for trace, grad in zip(pool_traces, pool_grads):
        if np.any(grad):
            backprop(p_params, trace, grad, p_grads)

    return PretrainStepResult(
        loss=inv_b * (total_nll + kl_weight * total_kl),
        nll=inv_b * total_nll,
        kl=inv_b * total_kl,
        q_grads=q_grads,
        p_grads=p_grads,
    )


def retriever_finetune_loss(
    q_emb: np.ndarray,
    candidates: np.ndarray,
    pos_index: int,
) -> tuple[float, np.ndarray]:
    """Softmax NLL of the positive over the retrieved candidates.

    Returns the loss and its gradient with respect to the question embedding;
    candidate embeddings are frozen and receive no gradient.
    """
    candidates = np.atleast_2d(np.asarray(candidates))
    if not 0 <= pos_index < len(candidates):
        raise ValueError("pos_index outside candidate list")
    d = stable_softmax(candidates @ q_emb)
    loss = -float(np.log(max(d[pos_index], LOG_FLOOR)))
    g_scores = d.copy()
    g_scores[pos_index] -= 1.0
    return loss, candidates.T @ g_scores


# ---------------------------------------------------------------------------
# Pre-training loop
# ---------------------------------------------------------------------------

@dataclass
class PretrainLog:
    steps: list[dict] = field(default_factory=list)


def pretrain_retriever(
    corpus: Corpus,
    q_params: EncoderParams,
    p_params: EncoderParams,
    steps: int,
    batch_size: int,
    lr: float,
    kl_weight: float,
    seed: int,
    window: int = DEFAULT_WINDOW,
    optimizer: str = "sgd",
) -> PretrainLog:
    """Gradient descent on the pre-training loss; updates both encoders in
    place and returns a per-step loss log."""
    instances = build_pretrain_instances(corpus, window)
    if len(instances) < 2:
        raise ValueError("need at least 2 training instances for in-batch negatives")
    rng = CounterRng(seed=seed)
    opt = Optimizer(optimizer, lr)
    log = PretrainLog()
    b = min(batch_size, len(instances))
    for step in range(steps):
        batch = [instances[i] for i in rng.sample_indices(len(instances), b)]
        result = pretrain_loss(q_params, p_params, corpus, batch, kl_weight)
        opt.update("q_emb", q_params.embedding_table, result.q_grads.embedding_table)
        opt.update("q_proj", q_params.projection, result.q_grads.projection)
        opt.update("p_emb", p_params.embedding_table, result.p_grads.embedding_table)
        opt.update("p_proj", p_params.projection, result.p_grads.projection)
        log.steps.append(
            {"step": step, "loss": result.loss, "nll": result.nll, "kl": result.kl}
        )
    return log


def retrieval_recall(
    q_params: EncoderParams,
    index: PassageIndex,
    corpus: Corpus,
    k: int,
    window: int,
) -> float:
    """Mean Recall@k of the bare retriever over every turn in the corpus."""
    from .metrics import recall_at

    scores = []
    for conv in corpus.conversations:
        for t_idx, turn in enumerate(conv.turns, start=1):
            q, _ = encode(q_params, serialize_questions_only(conv, t_idx, window))
            result = retrieve_top_k(index, q, k)
            scores.append(recall_at(result.pids(), {turn.golden_pid}, k))
    return float(np.mean(scores)) if scores else 0.0


# ---------------------------------------------------------------------------
# Index file round trip
# ---------------------------------------------------------------------------

INDEX_FORMAT_VERSION = 1


def save_index(index: PassageIndex, path: str, config_hash: str = "") -> None:
    """npz container: 'meta' JSON header, 'ids' pid table, 'matrix' payload."""
    meta = {
        "version": INDEX_FORMAT_VERSION,
        "n_passages": len(index.ids),
        "dim": index.dim,
        "encoder_checksum": index.encoder_checksum,
        "config_hash": config_hash,
    }
    np.savez(path, meta=json.dumps(meta, sort_keys=True),
             ids=np.array(index.ids), matrix=index.matrix)


def load_index(path: str) -> tuple[PassageIndex, dict]:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("version") != INDEX_FORMAT_VERSION:
            raise ValueError(f"unsupported index version {meta.get('version')!r}")
        index = PassageIndex(
            ids=[str(p) for p in data["ids"]],
            matrix=data["matrix"],
            encoder_checksum=meta["encoder_checksum"],
        )
    if index.matrix.shape != (meta["n_passages"], meta["dim"]):
        raise ValueError("index payload does not match its header")
    return index, meta
