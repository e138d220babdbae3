"""Relation-prediction scoring and frame-accuracy evaluation.

Edges are scored from the posterior means (no sampling), ranked over the
whole evaluation set, and the top 20% are called positive. The reported
error is the balanced error ``(FNR + FPR) / 2``, which is 0.5 in
expectation for any random ranking regardless of the positive rate.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from . import numcore as nc
from .dgp import EdgeNoise, edge_tensors, encode_nodes, sample_summary_edge, sample_transform
from .numcore import DomainError, Rng
from .synthdata import Conversation
from .training import Model, evaluate, make_batch

MODES = ("summary", "task")


@dataclass(frozen=True)
class EdgeScore:
    conversation: str
    pair: tuple[int, int]
    score: float
    label: bool


@dataclass
class EdgeScoreSet:
    entries: list[EdgeScore]

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def scores(self) -> np.ndarray:
        return np.array([e.score for e in self.entries], dtype=np.float64)

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.entries], dtype=bool)


@dataclass(frozen=True)
class RelationReport:
    balanced_error: float
    fnr: float
    fpr: float
    threshold_rank: int
    n_entries: int
    n_positive: int


def candidate_pairs(n_utterances: int, o: int) -> np.ndarray:
    """All (j, k), j < k, with k - j <= o."""
    return np.array([(j, k) for k in range(n_utterances) for j in range(max(0, k - o), k)],
                    dtype=np.int64).reshape(-1, 2)


def score_edges(model: Model, conversations: Sequence[Conversation], o: int,
                mode: str = "summary", sampled: bool = False,
                rng: Rng | None = None) -> EdgeScoreSet:
    """Score every candidate pair of every conversation.

    ``summary`` scores with the posterior mean ``m``; ``task`` with the
    noiseless task-edge value ``m * (m * mu_s)``. With ``sampled`` one proxy
    draw per edge is used instead (needs ``rng``); otherwise no randomness
    is consumed.
    """
    if mode not in MODES:
        raise DomainError(f"mode must be one of {MODES}, got {mode!r}")
    if not model.cfg.use_graph:
        raise DomainError("model has no graph component to score")
    if sampled and rng is None:
        raise DomainError("sampled scoring needs an rng")
    entries: list[EdgeScore] = []
    for conv in conversations:
        pairs = candidate_pairs(len(conv.utterances), o)
        if pairs.shape[0] == 0:
            continue
        batch = make_batch([conv], o, model.dtype)
        V = encode_nodes(nc.Tensor(batch.frames), batch.lengths, model.params, model.cfg)
        ed = edge_tensors(V, pairs, model.params, model.cfg, with_features=False)
        if sampled:
            noise = EdgeNoise.draw(rng, pairs.shape[0])
        else:
            noise = EdgeNoise.zeros(pairs.shape[0])
        alpha, _ = sample_summary_edge(ed.m, noise=noise.alpha,
                                       epsilon_alpha=model.cfg.epsilon_alpha)
        if mode == "summary":
            vals = alpha.data if sampled else ed.m.data
        else:
            _, alpha_bar = sample_transform(alpha, ed.mu_s, ed.sigma_s, noise=noise.s)
            vals = alpha_bar.data
        for (j, k), v in zip(pairs.tolist(), vals.tolist()):
            entries.append(EdgeScore(conv.id, (j, k), float(v), (j, k) in conv.relations))
    return EdgeScoreSet(entries)


def relation_error(scores: EdgeScoreSet, top_fraction: float = 0.2) -> RelationReport:
    """Balanced error of calling the top ``top_fraction`` of ranked edges positive.

    Ties are broken by entry order (stable sort).
    """
    s, y = scores.scores, scores.labels
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise DomainError("relation_error needs both positive and negative labels")
    if not np.all(np.isfinite(s)):
        raise DomainError("scores must be finite")
    k = int(round(top_fraction * y.size))
    pred = np.zeros(y.size, dtype=bool)
    pred[np.argsort(-s, kind="stable")[:k]] = True
    fnr = float((~pred & y).sum() / n_pos)
    fpr = float((pred & ~y).sum() / (y.size - n_pos))
    return RelationReport(0.5 * (fnr + fpr), fnr, fpr, k, int(y.size), n_pos)


def accuracy_from_logits(logits: np.ndarray, labels: np.ndarray) -> float:
    return float((np.asarray(logits).argmax(axis=-1) == np.asarray(labels)).mean())


def frame_accuracy(model: Model, conversations: Sequence[Conversation], o: int) -> float:
    """Fraction of frames whose argmax logit is the label (one noiseless graph pass)."""
    return evaluate(model, conversations, o).accuracy


@dataclass(frozen=True)
class Comparison:
    rtn_accuracy: float
    baseline_accuracy: float
    ceiling: float

    @property
    def advantage(self) -> float:
        return self.rtn_accuracy - self.baseline_accuracy


def compare_models(rtn: Model, baseline: Model, conversations: Sequence[Conversation],
                   o: int, ceiling: float) -> Comparison:
    return Comparison(frame_accuracy(rtn, conversations, o),
                      frame_accuracy(baseline, conversations, o), ceiling)


# ---------------------------------------------------------------------------
# report formatting
# ---------------------------------------------------------------------------

def report_rows(report) -> list[tuple[str, object]]:
    return list(asdict(report).items())


def to_csv(rows: Iterable[tuple[str, object]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "value"])
    for k, v in rows:
        w.writerow([k, repr(v) if isinstance(v, float) else v])
    return buf.getvalue()


def to_json(rows: Iterable[tuple[str, object]]) -> str:
    return json.dumps(dict(rows), indent=2, sort_keys=True) + "\n"
