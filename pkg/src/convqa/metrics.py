"""Answer and retrieval quality metrics: word-level F1, HEQ, MRR, Recall@T."""

from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import dataclass, asdict

DEFAULT_STOPWORDS = frozenset(
    "a an and are as at be by for from in is it of on or that the to was were will with this but".split()
)


@dataclass
class MetricsReport:
    f1: float        # mean word-level F1, in [0, 1]
    heq_q: float     # % questions with system F1 >= human F1
    heq_d: float     # % dialogs where every turn passes
    mrr: float       # mean reciprocal rank within top T, in [0, 1]
    recall: float    # mean Recall@T, in [0, 1]
    n_questions: int
    n_dialogs: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def write_csv(self, path: str) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["F1", "HEQ-Q", "HEQ-D", "Rt MRR", "Rt Recall"])
            writer.writerow([self.f1, self.heq_q, self.heq_d, self.mrr, self.recall])


def load_stopwords(path: str | None) -> frozenset[str]:
    if path is None:
        return DEFAULT_STOPWORDS
    with open(path, encoding="utf-8") as fh:
        return frozenset(w.strip().lower() for w in fh if w.strip())


def word_f1(pred_tokens, gold_tokens, stopwords=DEFAULT_STOPWORDS) -> float:
    """Harmonic mean of multiset-overlap precision and recall after stopword
    removal.  Both sides empty scores 1.0; exactly one empty scores 0.0."""
    pred = [t for t in pred_tokens if t not in stopwords]
    gold = [t for t in gold_tokens if t not in stopwords]
    if not pred and not gold:
        return 1.0
    if not pred or not gold:
        return 0.0
    common = sum((Counter(pred) & Counter(gold)).values())
    if common == 0:
        return 0.0
    precision = common / len(pred)
    recall = common / len(gold)
    return 2 * precision * recall / (precision + recall)


def heq(system_f1s, human_f1s, dialog_ids) -> tuple[float, float]:
    """Percent of questions (HEQ-Q) and whole dialogs (HEQ-D) where the
    system F1 meets or beats the human F1."""
    if not (len(system_f1s) == len(human_f1s) == len(dialog_ids)):
        raise ValueError("inputs must be aligned")
    if not system_f1s:
        return 0.0, 0.0
    passes = [s >= h for s, h in zip(system_f1s, human_f1s)]
    heq_q = 100.0 * sum(passes) / len(passes)
    dialog_pass: dict[str, bool] = {}
    for did, ok in zip(dialog_ids, passes):
        dialog_pass[did] = dialog_pass.get(did, True) and ok
    heq_d = 100.0 * sum(dialog_pass.values()) / len(dialog_pass)
    return heq_q, heq_d


def mrr_at(ranked_pids, golden_pids: set, t: int) -> float:
    """Reciprocal rank of the first golden passage within the top t, else 0."""
    if t < 1:
        raise ValueError("t must be >= 1")
    for rank, pid in enumerate(ranked_pids[:t], start=1):
        if pid in golden_pids:
            return 1.0 / rank
    return 0.0


def recall_at(ranked_pids, golden_pids: set, t: int) -> float:
    """Fraction of golden passages present in the top t."""
    if not golden_pids:
        return 0.0
    hits = sum(1 for pid in set(ranked_pids[:t]) if pid in golden_pids)
    return hits / len(golden_pids)
