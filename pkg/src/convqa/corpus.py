"""Conversation/passage data model, JSONL ingestion, and question serialization.

A corpus is a set of passages plus conversations of (question, rewrite,
answer-span) turns.  Questions are fed to encoders as token sequences built
from the dialog history under three schemes that differ in whether answers
are kept and whether the first turn is always pinned to the front.
"""

from __future__ import annotations

import json
import random
import re
from dataclasses import dataclass, field

CLS = "[CLS]"
SEP = "[SEP]"

# Serialized question forms never exceed this many tokens (markers included);
# passage sequences are capped separately at PASSAGE_MAX_TOKENS.
QUESTION_MAX_TOKENS = 128
PASSAGE_MAX_TOKENS = 384

DEFAULT_WINDOW = 6

_TOKEN_RE = re.compile(r"[^\w\s]+", re.UNICODE)

_PRONOUNS = ("it", "he", "she", "they")


class CorpusError(ValueError):
    """Raised for malformed corpus files or broken invariants."""


def tokenize(text: str) -> list[str]:
    """Lowercase, strip punctuation, split on whitespace."""
    return _TOKEN_RE.sub(" ", text.lower()).split()


@dataclass(frozen=True)
class Passage:
    pid: str
    title: str
    tokens: tuple[str, ...]

    def __post_init__(self):
        if not self.tokens:
            raise CorpusError(f"passage {self.pid!r}: empty token list")


@dataclass(frozen=True)
class Turn:
    qid: str
    question_tokens: tuple[str, ...]
    rewrite_tokens: tuple[str, ...]
    answer_text_tokens: tuple[str, ...]
    golden_pid: str
    answer_start: int
    answer_end: int


@dataclass(frozen=True)
class Conversation:
    cid: str
    turns: tuple[Turn, ...]

    def __post_init__(self):
        if not self.turns:
            raise CorpusError(f"conversation {self.cid!r}: no turns")
        qids = [t.qid for t in self.turns]
        if len(set(qids)) != len(qids):
            raise CorpusError(f"conversation {self.cid!r}: duplicate qids")


@dataclass
class TokenSequence:
    """Marker-delimited token sequence fed to an encoder; starts with [CLS]."""

    tokens: tuple[str, ...]

    def __post_init__(self):
        if not self.tokens or self.tokens[0] != CLS:
            raise CorpusError("token sequence must begin with [CLS]")

    def __len__(self):
        return len(self.tokens)

    def text(self) -> str:
        return " ".join(self.tokens)


@dataclass
class Corpus:
    passages: dict[str, Passage] = field(default_factory=dict)
    conversations: list[Conversation] = field(default_factory=list)
    split: str = "train"

    def validate(self) -> None:
        for conv in self.conversations:
            for turn in conv.turns:
                p = self.passages.get(turn.golden_pid)
                if p is None:
                    raise CorpusError(
                        f"turn {turn.qid!r}: golden pid {turn.golden_pid!r} "
                        "does not resolve to a passage"
                    )
                if not (0 <= turn.answer_start <= turn.answer_end < len(p.tokens)):
                    raise CorpusError(
                        f"turn {turn.qid!r}: answer offsets "
                        f"[{turn.answer_start}, {turn.answer_end}] out of range "
                        f"for passage {p.pid!r} of length {len(p.tokens)}"
                    )
                sliced = p.tokens[turn.answer_start : turn.answer_end + 1]
                if sliced != turn.answer_text_tokens:
                    raise CorpusError(
                        f"turn {turn.qid!r}: answer text does not match passage "
                        f"tokens at [{turn.answer_start}, {turn.answer_end}]"
                    )

    def n_questions(self) -> int:
        return sum(len(c.turns) for c in self.conversations)

    def sorted_pids(self) -> list[str]:
        return sorted(self.passages)

    def subset(self, cids: set[str], split: str) -> "Corpus":
        """New corpus sharing all passages but only the given conversations."""
        convs = [c for c in self.conversations if c.cid in cids]
        return Corpus(passages=self.passages, conversations=convs, split=split)


# ---------------------------------------------------------------------------
# JSONL ingestion / emission
# ---------------------------------------------------------------------------

def _require(obj: dict, key: str, path: str, lineno: int):
    if key not in obj:
        raise CorpusError(f"{path}:{lineno}: missing field {key!r}")
    return obj[key]


def _iter_jsonl(path: str):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc


def load_corpus(passages_path: str, conversations_path: str, split: str = "train") -> Corpus:
    """Load and validate a corpus from two JSONL files.

    Passage lines look like {"pid", "title", "text"}; conversation lines hold
    a cid and a list of turns whose answers carry token offsets under this
    module's tokenizer.  Unknown fields are ignored, missing ones are errors.
    """
    passages: dict[str, Passage] = {}
    for lineno, obj in _iter_jsonl(passages_path):
        pid = _require(obj, "pid", passages_path, lineno)
        if pid in passages:
            raise CorpusError(f"{passages_path}:{lineno}: duplicate pid {pid!r}")
        passages[pid] = Passage(
            pid=pid,
            title=_require(obj, "title", passages_path, lineno),
            tokens=tuple(tokenize(_require(obj, "text", passages_path, lineno))),
        )

    conversations = []
    for lineno, obj in _iter_jsonl(conversations_path):
        cid = _require(obj, "cid", conversations_path, lineno)
        turns = []
        for raw in _require(obj, "turns", conversations_path, lineno):
            answer = _require(raw, "answer", conversations_path, lineno)
            turns.append(
                Turn(
                    qid=_require(raw, "qid", conversations_path, lineno),
                    question_tokens=tuple(tokenize(_require(raw, "question", conversations_path, lineno))),
                    rewrite_tokens=tuple(tokenize(_require(raw, "rewrite", conversations_path, lineno))),
                    answer_text_tokens=tuple(tokenize(_require(answer, "text", conversations_path, lineno))),
                    golden_pid=_require(answer, "pid", conversations_path, lineno),
                    answer_start=_require(answer, "start", conversations_path, lineno),
                    answer_end=_require(answer, "end", conversations_path, lineno),
                )
            )
        conversations.append(Conversation(cid=cid, turns=tuple(turns)))

    corpus = Corpus(passages=passages, conversations=conversations, split=split)
    corpus.validate()
    return corpus


def write_corpus(corpus: Corpus, passages_path: str, conversations_path: str) -> None:
    """Emit canonical JSONL: passages sorted by pid, fixed key order."""
    write_passages(corpus, passages_path)
    write_conversations(corpus, conversations_path)


def write_passages(corpus: Corpus, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for pid in corpus.sorted_pids():
            p = corpus.passages[pid]
            fh.write(json.dumps(
                {"pid": p.pid, "title": p.title, "text": " ".join(p.tokens)},
                ensure_ascii=False,
            ) + "\n")


def write_conversations(corpus: Corpus, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for conv in corpus.conversations:
            obj = {
                "cid": conv.cid,
                "turns": [
                    {
                        "qid": t.qid,
                        "question": " ".join(t.question_tokens),
                        "rewrite": " ".join(t.rewrite_tokens),
                        "answer": {
                            "text": " ".join(t.answer_text_tokens),
                            "pid": t.golden_pid,
                            "start": t.answer_start,
                            "end": t.answer_end,
                        },
                    }
                    for t in conv.turns
                ],
            }
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# Synthetic corpus generation
# ---------------------------------------------------------------------------

def generate_synthetic_corpus(
    seed: int,
    n_conversations: int,
    turns_per_conv: int,
    n_passages: int,
    vocab_size: int,
    split: str = "train",
) -> Corpus:
    """Deterministic toy corpus with one golden passage per turn.

    Every conversation revolves around its own entity token.  Each turn asks
    about an aspect drawn from a pool shared across conversations, and its
    answer tokens come from a shared value pool, so encoders trained on one
    subset of conversations have usable lexical cues on held-out ones.  Turns
    after the first refer to the entity by a pronoun and the rewrite restores
    it, so rewrite != question exactly on those turns.  The golden passage
    gets the entity, the aspect, and the answer tokens spliced in.
    """
    if min(n_conversations, turns_per_conv, n_passages, vocab_size) < 1:
        raise ValueError("all counts must be >= 1")

    n_entities = n_conversations
    pool = max(8, vocab_size // 20)
    reserved = n_entities + 2 * pool
    if vocab_size < reserved + 10:
        raise ValueError(
            f"vocab too small to generate distinct entities: need at least "
            f"{reserved + 10} tokens, got {vocab_size}"
        )

    rng = random.Random(seed)
    vocab = [f"w{i}" for i in range(vocab_size)]
    rng.shuffle(vocab)
    entities = vocab[:n_entities]
    aspects = vocab[n_entities : n_entities + pool]
    values = vocab[n_entities + pool : reserved]
    filler = vocab[reserved:]

    # Pass 1: plan every turn, collecting the "<entity> <aspect> <answer...>"
    # fragment each golden passage must carry.
    planned = []  # (c, t, entity, aspect, answer, golden_id)
    frags_by_passage: dict[int, list[tuple[int, int, list[str]]]] = {}
    for c in range(n_conversations):
        entity = entities[c]
        golden_ids = (
            rng.sample(range(n_passages), turns_per_conv)
            if n_passages >= turns_per_conv
            else [rng.randrange(n_passages) for _ in range(turns_per_conv)]
        )
        aspect_ids = (
            rng.sample(range(pool), turns_per_conv)
            if pool >= turns_per_conv
            else [rng.randrange(pool) for _ in range(turns_per_conv)]
        )
        for t in range(turns_per_conv):
            aspect = aspects[aspect_ids[t]]
            answer = [rng.choice(values) for _ in range(rng.randint(2, 3))]
            g = golden_ids[t]
            planned.append((c, t, entity, aspect, answer, g))
            frags_by_passage.setdefault(g, []).append((c, t, [entity, aspect] + answer))

    # Pass 2: assemble each passage once, interleaving filler chunks with its
    # fragments so answer offsets are exact by construction.
    passages: dict[str, Passage] = {}
    answer_start: dict[tuple[int, int], int] = {}
    for g in range(n_passages):
        base = [rng.choice(filler) for _ in range(rng.randint(8, 16))]
        frags = frags_by_passage.get(g, [])
        if frags:
            cuts = sorted(rng.randrange(len(base) + 1) for _ in frags)
            tokens: list[str] = []
            prev = 0
            for (c, t, frag), cut in zip(frags, cuts):
                tokens.extend(base[prev:cut])
                answer_start[(c, t)] = len(tokens) + 2  # entity, aspect lead
                tokens.extend(frag)
                prev = cut
            tokens.extend(base[prev:])
        else:
            tokens = base
        pid = f"p{g:06d}"
        passages[pid] = Passage(pid=pid, title=f"page {g}", tokens=tuple(tokens))

    by_conv: dict[int, list[Turn]] = {c: [] for c in range(n_conversations)}
    for c, t, entity, aspect, answer, g in planned:
        pronoun = _PRONOUNS[c % len(_PRONOUNS)]
        subject = [pronoun] if t > 0 else [entity]
        start = answer_start[(c, t)]
        by_conv[c].append(
            Turn(
                qid=f"c{c}_q{t}",
                question_tokens=tuple(["what", "is", aspect, "of"] + subject),
                rewrite_tokens=tuple(["what", "is", aspect, "of", entity]),
                answer_text_tokens=tuple(answer),
                golden_pid=f"p{g:06d}",
                answer_start=start,
                answer_end=start + len(answer) - 1,
            )
        )
    conversations = [
        Conversation(cid=f"c{c}", turns=tuple(by_conv[c]))
        for c in range(n_conversations)
    ]

    corpus = Corpus(passages=passages, conversations=conversations, split=split)
    corpus.validate()
    return corpus


def split_corpus(corpus: Corpus, dev_fraction: float, seed: int) -> tuple[Corpus, Corpus]:
    """Partition conversations into train/dev corpora sharing all passages."""
    cids = [c.cid for c in corpus.conversations]
    rng = random.Random(seed)
    rng.shuffle(cids)
    n_dev = max(1, int(round(len(cids) * dev_fraction)))
    dev = set(cids[:n_dev])
    return corpus.subset(set(cids[n_dev:]), "train"), corpus.subset(dev, "dev")


# ---------------------------------------------------------------------------
# Question serialization
# ---------------------------------------------------------------------------

def _history_sequence(
    conv: Conversation,
    turn_index: int,
    window: int,
    include_answers: bool,
    pin_first: bool,
    max_tokens: int = QUESTION_MAX_TOKENS,
) -> TokenSequence:
    """Shared builder for the three serialization schemes.

    turn_index is 1-based.  The window covers the last min(window, turn_index-1)
    prior turns; when pin_first is set, turn 1 is emitted up front even if it
    falls outside the window (without duplication when inside it).  Over-length
    sequences drop whole history segments oldest-first, the pinned first turn
    next, and truncate the current question's tail only as a last resort.
    """
    if not (1 <= turn_index <= len(conv.turns)):
        raise IndexError(f"turn_index {turn_index} out of range")
    turns = conv.turns
    current = turns[turn_index - 1]

    lo = max(0, (turn_index - 1) - max(0, window))
    windowed = list(range(lo, turn_index - 1))

    segments: list[tuple[str, ...]] = []  # each segment ends with SEP
    pinned = pin_first and 0 not in windowed and turn_index > 1
    if pinned:
        seg = list(turns[0].question_tokens) + [SEP]
        if include_answers:
            seg += list(turns[0].answer_text_tokens) + [SEP]
        segments.append(tuple(seg))
    for i in windowed:
        seg = list(turns[i].question_tokens) + [SEP]
        if include_answers:
            seg += list(turns[i].answer_text_tokens) + [SEP]
        segments.append(tuple(seg))

    tail = list(current.question_tokens) + [SEP]

    def total(segs):
        return 1 + sum(len(s) for s in segs) + len(tail)

    # Drop oldest windowed history first, then the pinned first-turn segment.
    while segments and total(segments) > max_tokens:
        drop_at = 1 if (pinned and len(segments) > 1) else 0
        segments.pop(drop_at)
    tokens = [CLS]
    for seg in segments:
        tokens.extend(seg)
    tokens.extend(tail)
    if len(tokens) > max_tokens:
        tokens = tokens[: max_tokens - 1] + [SEP]
    return TokenSequence(tokens=tuple(tokens))


def serialize_with_answers(conv: Conversation, turn_index: int, window: int) -> TokenSequence:
    """History as (question, answer) pairs, first turn pinned; pre-training form."""
    return _history_sequence(conv, turn_index, window, include_answers=True, pin_first=True)


def serialize_questions_only(conv: Conversation, turn_index: int, window: int) -> TokenSequence:
    """History questions without answers, first turn pinned; retrieval form."""
    return _history_sequence(conv, turn_index, window, include_answers=False, pin_first=True)


def serialize_recent_questions(conv: Conversation, turn_index: int, window: int) -> TokenSequence:
    """Windowed history questions only, no pinned first turn; reader form."""
    return _history_sequence(conv, turn_index, window, include_answers=False, pin_first=False)


def rewrite_sequence(turn: Turn) -> TokenSequence:
    """Self-contained question rewrite as an encoder input."""
    return TokenSequence(tokens=(CLS, *turn.rewrite_tokens, SEP))


def passage_sequence(passage: Passage, max_tokens: int = PASSAGE_MAX_TOKENS) -> TokenSequence:
    """Title + body as a passage-encoder input, tail-truncated to the cap."""
    tokens = [CLS, *tokenize(passage.title), SEP, *passage.tokens]
    if len(tokens) > max_tokens:
        tokens = tokens[: max_tokens - 1]
    tokens.append(SEP)
    return TokenSequence(tokens=tuple(tokens))
