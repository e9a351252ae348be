"""Desk-scale conversational open-retrieval question answering.

Pipeline: KL-regularized dual-encoder pre-training, exact inner-product
retrieval, a learned linear post-ranker, an extractive span reader, and a
curriculum-gated joint trainer, plus the evaluation metrics to score it all.
"""

from .config import ConfigError, RunConfig
from .corpus import (
    Conversation,
    Corpus,
    CorpusError,
    Passage,
    TokenSequence,
    Turn,
    generate_synthetic_corpus,
    load_corpus,
    serialize_questions_only,
    serialize_recent_questions,
    serialize_with_answers,
    split_corpus,
    tokenize,
    write_corpus,
)
from .curriculum import (
    CurriculumConfig,
    CurriculumState,
    JointHyper,
    JointLossBreakdown,
    difficulty_coefficient,
    inject_golden,
    joint_loss,
    train_scheduler,
)
from .encoder import (
    EncodeTrace,
    EncoderGrads,
    EncoderParams,
    backprop,
    encode,
    init_encoder,
    similarity,
)
from .metrics import MetricsReport, heq, mrr_at, recall_at, word_f1
from .pipeline import Answer, PipelineBundle, answer_question, evaluate_split
from .postranker import (
    PostRankerParams,
    RerankedList,
    hinge_loss,
    identity_postranker,
    init_postranker,
    postranker_loss,
    project,
    rerank,
    score_post,
    triplet_loss,
)
from .reader import (
    ReaderParams,
    ScoredPassage,
    SpanPrediction,
    encode_reader_input,
    extract_spans,
    init_reader,
    reader_loss,
    score_select,
    score_tokens,
)
from .retriever import (
    Distribution,
    PassageIndex,
    PretrainInstance,
    RetrievalResult,
    build_index,
    build_pretrain_instances,
    candidate_distribution,
    kl_regularizer,
    nll_loss,
    pretrain_loss,
    pretrain_retriever,
    retrieve_top_k,
    retriever_finetune_loss,
)

__version__ = "0.1.0"
