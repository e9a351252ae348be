"""Curriculum-gated joint training of question encoder, post-ranker, reader.

The difficulty measurer looks at the previous iteration's retriever loss:
above the upper threshold the golden passage is injected into every
question's candidate set (easy mode), below the lower threshold it is not,
and in between injection is sampled from a Bernoulli whose probability is
the min-max normalized loss.  Exactly one of the two candidate variants is
evaluated per iteration.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .corpus import Corpus, Conversation, serialize_questions_only, serialize_recent_questions
from .encoder import EncoderGrads, EncoderParams, backprop, encode
from .postranker import (
    PostRankerGrads,
    PostRankerParams,
    postranker_loss,
    project,
)
from .optim import Optimizer
from .reader import (
    GoldenSpanTruncated,
    ReaderGrads,
    ReaderParams,
    reader_loss,
)
from .retriever import PassageIndex, RetrievalResult, retrieve_top_k, retriever_finetune_loss
from .rng import CounterRng


@dataclass
class CurriculumConfig:
    lower: float = 1.0
    upper: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ValueError("lower threshold must be strictly below upper")


@dataclass
class CurriculumState:
    rng: CounterRng
    prev_retriever_loss: float = math.inf  # forces injection on iteration 1
    iteration: int = 0

    def to_dict(self) -> dict:
        return {
            "rng": self.rng.state(),
            "prev_retriever_loss": self.prev_retriever_loss,
            "iteration": self.iteration,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CurriculumState":
        return cls(
            rng=CounterRng.from_state(d["rng"]),
            prev_retriever_loss=float(d["prev_retriever_loss"]),
            iteration=int(d["iteration"]),
        )


def difficulty_coefficient(state: CurriculumState, cfg: CurriculumConfig) -> tuple[int, float]:
    """Gate value v and the injection probability it was drawn from.

    v=1 when the previous retriever loss exceeds the upper threshold, v=0
    below the lower one; in between v ~ Bernoulli(p_b) with p_b the min-max
    normalized loss.  The rng advances only when the Bernoulli branch runs.
    """
    prev = state.prev_retriever_loss
    if prev > cfg.upper:
        return 1, 1.0
    if prev < cfg.lower:
        return 0, 0.0
    p_b = (prev - cfg.lower) / (cfg.upper - cfg.lower)
    return state.rng.bernoulli(p_b), p_b


def inject_golden(retrieved: RetrievalResult, golden_pid: str) -> list[str]:
    """Candidate pid list with the golden guaranteed present (appended last
    when missing); idempotent."""
    pids = retrieved.pids()
    if golden_pid in pids:
        return pids
    return pids + [golden_pid]


# ---------------------------------------------------------------------------
# Joint loss
# ---------------------------------------------------------------------------

@dataclass
class JointHyper:
    hinge_margin: float = 0.5
    triplet_margin: float = 1.0
    triplet_weight: float = 0.5
    top_t: int = 5
    window: int = 6
    reader_max_tokens: int = 512


@dataclass
class JointLossBreakdown:
    retriever: float
    postranker: float
    reader: float
    total: float
    v: int
    p_b: float
    n_questions: int = 0
    skipped_no_golden: int = 0
    skipped_reader: int = 0
    skipped_truncated: int = 0

    def to_record(self, iteration: int) -> dict:
        return {
            "iter": iteration,
            "v": self.v,
            "p_b": self.p_b,
            "loss_retriever": self.retriever,
            "loss_postranker": self.postranker,
            "loss_reader": self.reader,
            "loss_total": self.total,
        }


@dataclass
class JointGrads:
    question: EncoderGrads
    ranker: PostRankerGrads
    reader: ReaderGrads


def _rerank_pids(ranker: PostRankerParams, q_emb: np.ndarray,
                 cand_pids: list[str], cand_embs: np.ndarray) -> list[str]:
    scores = project(ranker, cand_embs) @ q_emb
    order = sorted(zip(cand_pids, scores.tolist()), key=lambda t: (-t[1], t[0]))
    return [pid for pid, _ in order]


def joint_loss(
    corpus: Corpus,
    question_encoder: EncoderParams,
    index: PassageIndex,
    ranker_params: PostRankerParams,
    reader_params: ReaderParams,
    batch: list[tuple[Conversation, int]],
    candidates: list[list[str]],
    v: int,
    p_b: float,
    hyper: JointHyper,
    use_postranker: bool = True,
) -> tuple[JointLossBreakdown, JointGrads]:
    """Mean-reduced sum of the three module losses over one batch.

    candidates[i] is question i's pid list, already including the golden when
    the injection path was selected (v=1); with v=0 a question whose golden
    was not retrieved contributes nothing, and one whose golden misses the
    reranked top T skips only the reader term.  The question encoder collects
    gradients from both the retriever and post-ranker paths; the reader set
    is the reranked top T (plus the golden, appended, when injecting).
    """
    if len(batch) != len(candidates):
        raise ValueError("batch and candidate lists must align")

    q_grads = EncoderGrads.zeros_like(question_encoder)
    ranker_grads = PostRankerGrads.zeros_like(ranker_params)
    reader_grads = ReaderGrads.zeros_like(reader_params)
    pending = []  # (trace, grad_q_retriever, grad_q_ranker)
    sum_r = sum_p = sum_d = 0.0
    n_r = n_p = n_d = 0
    skipped_no_golden = skipped_reader = skipped_truncated = 0

    for (conv, turn_index), cand_pids in zip(batch, candidates):
        turn = conv.turns[turn_index - 1]
        golden = turn.golden_pid
        if golden not in cand_pids:
            if v == 1:
                raise ValueError(
                    f"golden passage {golden!r} missing from an injected candidate set"
                )
            skipped_no_golden += 1
            continue
        pos_index = cand_pids.index(golden)
        cand_embs = index.embeddings_for(cand_pids)

        q_seq = serialize_questions_only(conv, turn_index, hyper.window)
        q_emb, q_trace = encode(question_encoder, q_seq)

        loss_r, grad_q_r = retriever_finetune_loss(q_emb, cand_embs, pos_index)
        sum_r += loss_r
        n_r += 1

        grad_q_p = np.zeros_like(q_emb)
        if use_postranker and len(cand_pids) >= 2:
            result = postranker_loss(
                ranker_params, q_emb, cand_embs, pos_index,
                hyper.hinge_margin, hyper.triplet_margin, hyper.triplet_weight,
            )
            sum_p += result.loss
            n_p += 1
            ranker_grads.weight += result.grads.weight
            ranker_grads.bias += result.grads.bias
            grad_q_p = result.grad_q
        pending.append((q_trace, grad_q_r, grad_q_p))

        reader_set = _rerank_pids(ranker_params, q_emb, cand_pids, cand_embs)[: hyper.top_t]
        if golden not in reader_set:
            if v == 1:
                reader_set = reader_set + [golden]
            else:
                skipped_reader += 1
                continue
        try:
            r = reader_loss(
                reader_params,
                serialize_recent_questions(conv, turn_index, hyper.window),
                [corpus.passages[pid] for pid in reader_set],
                golden, turn.answer_start, turn.answer_end,
                hyper.reader_max_tokens,
            )
        except GoldenSpanTruncated:
            skipped_truncated += 1
            continue
        sum_d += r.loss
        n_d += 1
        reader_grads.token_encoder.embedding_table += r.grads.token_encoder.embedding_table
        reader_grads.token_encoder.projection += r.grads.token_encoder.projection
        reader_grads.w_start += r.grads.w_start
        reader_grads.w_end += r.grads.w_end
        reader_grads.w_select += r.grads.w_select

    for trace, g_r, g_p in pending:
        combined = g_r / max(n_r, 1) + g_p / max(n_p, 1)
        backprop(question_encoder, trace, combined, q_grads)
    if n_p:
        ranker_grads.weight /= n_p
        ranker_grads.bias /= n_p
    if n_d:
        reader_grads.token_encoder.scale(1.0 / n_d)
        reader_grads.w_start /= n_d
        reader_grads.w_end /= n_d
        reader_grads.w_select /= n_d

    mean_r = sum_r / n_r if n_r else 0.0
    mean_p = sum_p / n_p if n_p else 0.0
    mean_d = sum_d / n_d if n_d else 0.0
    breakdown = JointLossBreakdown(
        retriever=mean_r,
        postranker=mean_p,
        reader=mean_d,
        total=mean_r + mean_p + mean_d,
        v=v,
        p_b=p_b,
        n_questions=n_r,
        skipped_no_golden=skipped_no_golden,
        skipped_reader=skipped_reader,
        skipped_truncated=skipped_truncated,
    )
    return breakdown, JointGrads(question=q_grads, ranker=ranker_grads, reader=reader_grads)


# ---------------------------------------------------------------------------
# Training scheduler
# ---------------------------------------------------------------------------

@dataclass
class SchedulerResult:
    log: list[dict] = field(default_factory=list)
    state: CurriculumState = None


def train_scheduler(
    corpus: Corpus,
    question_encoder: EncoderParams,
    index: PassageIndex,
    ranker_params: PostRankerParams,
    reader_params: ReaderParams,
    cfg: CurriculumConfig,
    iterations: int,
    batch_size: int,
    lr: float,
    top_k: int,
    hyper: JointHyper,
    use_postranker: bool = True,
    force_inject: bool = False,
    state: CurriculumState | None = None,
    checkpoint_every: int = 0,
    checkpoint_fn=None,
    optimizer: str = "sgd",
) -> SchedulerResult:
    """Curriculum-gated joint optimization (in-place parameter updates).

    Per iteration: sample a batch of questions, retrieve each one's top K,
    pick the injected or plain candidate variant by the difficulty gate, and
    descend the selected joint loss.  force_inject disables the curriculum
    (golden always added).  Deterministic for a fixed seed.
    """
    questions = [
        (conv, t_idx)
        for conv in corpus.conversations
        for t_idx in range(1, len(conv.turns) + 1)
    ]
    if not questions:
        raise ValueError("corpus has no questions to train on")
    if state is None:
        state = CurriculumState(rng=CounterRng(seed=cfg.seed))
    batch_rng = CounterRng(seed=cfg.seed ^ 0xB21C4D0E97A3F115)
    opt = Optimizer(optimizer, lr)
    result = SchedulerResult(state=state)
    b = min(batch_size, len(questions))

    for _ in range(iterations):
        state.iteration += 1
        batch = [questions[i] for i in batch_rng.sample_indices(len(questions), b)]
        if force_inject:
            v, p_b = 1, 1.0
        else:
            v, p_b = difficulty_coefficient(state, cfg)

        candidates = []
        for conv, t_idx in batch:
            q_seq = serialize_questions_only(conv, t_idx, hyper.window)
            q_emb, _ = encode(question_encoder, q_seq)
            retrieval = retrieve_top_k(index, q_emb, top_k)
            golden = conv.turns[t_idx - 1].golden_pid
            candidates.append(
                inject_golden(retrieval, golden) if v == 1 else retrieval.pids()
            )

        breakdown, grads = joint_loss(
            corpus, question_encoder, index, ranker_params, reader_params,
            batch, candidates, v, p_b, hyper, use_postranker,
        )
        if not math.isfinite(breakdown.total):
            raise RuntimeError(
                "non-finite joint loss at iteration "
                f"{state.iteration}; batch={[c.turns[t-1].qid for c, t in batch]} "
                f"breakdown={json.dumps(breakdown.to_record(state.iteration))}"
            )

        opt.update("q_emb", question_encoder.embedding_table, grads.question.embedding_table)
        opt.update("q_proj", question_encoder.projection, grads.question.projection)
        if use_postranker:
            opt.update("ranker_w", ranker_params.weight, grads.ranker.weight)
            opt.update("ranker_b", ranker_params.bias, grads.ranker.bias)
        opt.update("rd_emb", reader_params.token_encoder.embedding_table,
                   grads.reader.token_encoder.embedding_table)
        opt.update("rd_proj", reader_params.token_encoder.projection,
                   grads.reader.token_encoder.projection)
        opt.update("rd_start", reader_params.w_start, grads.reader.w_start)
        opt.update("rd_end", reader_params.w_end, grads.reader.w_end)
        opt.update("rd_select", reader_params.w_select, grads.reader.w_select)

        if breakdown.n_questions > 0:
            state.prev_retriever_loss = breakdown.retriever
        result.log.append(breakdown.to_record(state.iteration))

        if checkpoint_every and checkpoint_fn and state.iteration % checkpoint_every == 0:
            checkpoint_fn(state)

    return result
