"""Seeded synthetic conversations with planted utterance relations.

Each utterance carries a topic. Utterance ``i`` is related to the most
recent earlier utterance with the same topic inside the window ``o``; the
bit ``has_ref`` records whether such an antecedent exists. Frame labels are

    label_t = (2 * topic + has_ref + t // phase) mod C

so the topic and the frame position are readable from the utterance itself
but ``has_ref`` is only recoverable from the history.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .config import ConfigError, FormatError, from_dict, load_json
from .numcore import DomainError, Rng


@dataclass(frozen=True)
class GenConfig:
    n_topics: int = 4
    n_classes: int = 8
    d: int = 8
    t_min: int = 12
    t_max: int = 20
    n_utterances: int = 10
    window: int = 9
    phase: int = 4
    noise: float = 0.3
    prototype_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_topics < 1:
            raise ConfigError("n_topics must be >= 1")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if self.d < 1 or self.phase < 1 or self.window < 1 or self.n_utterances < 1:
            raise ConfigError("d, phase, window and n_utterances must be >= 1")
        if not 1 <= self.t_min <= self.t_max:
            raise ConfigError("need 1 <= t_min <= t_max")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")


@dataclass
class Utterance:
    frames: np.ndarray      # (T, D) float64
    labels: np.ndarray      # (T,) int
    topic: int


@dataclass
class Conversation:
    id: str
    utterances: list[Utterance]
    relations: set[tuple[int, int]] = field(default_factory=set)

    def has_ref(self) -> list[int]:
        targets = {i for _, i in self.relations}
        return [int(i in targets) for i in range(len(self.utterances))]


def frame_label(topic: int, has_ref: int, t: int, cfg: GenConfig) -> int:
    return (2 * topic + has_ref + t // cfg.phase) % cfg.n_classes


def relations_from_topics(topics: Sequence[int], window: int) -> set[tuple[int, int]]:
    """Pairs (j, i): j is the latest earlier utterance sharing i's topic, i - j <= window."""
    rel = set()
    for i, topic in enumerate(topics):
        for j in range(i - 1, max(-1, i - window - 1), -1):
            if topics[j] == topic:
                rel.add((j, i))
                break
    return rel


def prototypes(cfg: GenConfig) -> np.ndarray:
    """Fixed (K, D) topic prototypes determined by the config seed."""
    rng = Rng(cfg.seed).split("prototypes")
    return cfg.prototype_scale * rng.normal((cfg.n_topics, cfg.d))


def positional(t_len: int, cfg: GenConfig) -> np.ndarray:
    t = np.arange(t_len)[:, None]
    dims = np.arange(cfg.d)[None, :]
    period = 2.0 * cfg.phase * (1 + dims % 4)
    return 0.5 * np.sin(2.0 * np.pi * t / period + 0.7 * dims)


def generate_one(cfg: GenConfig, index: int, protos: np.ndarray | None = None) -> Conversation:
    if protos is None:
        protos = prototypes(cfg)
    rng = Rng(cfg.seed).split("conversation", index)
    topics = [int(k) for k in rng.integers(0, cfg.n_topics, (cfg.n_utterances,))]
    rel = relations_from_topics(topics, cfg.window)
    targets = {i for _, i in rel}
    utts = []
    for i, topic in enumerate(topics):
        t_len = int(rng.integers(cfg.t_min, cfg.t_max + 1))
        noise = cfg.noise * rng.normal((t_len, cfg.d))
        frames = np.round(protos[topic][None, :] + positional(t_len, cfg) + noise, 6)
        hr = int(i in targets)
        labels = np.array([frame_label(topic, hr, t, cfg) for t in range(t_len)], dtype=np.int64)
        utts.append(Utterance(frames, labels, topic))
    return Conversation(f"conv-{index:05d}", utts, rel)


def generate(cfg: GenConfig, count: int, start: int = 0) -> list[Conversation]:
    """``count`` conversations; conversation ``k`` depends only on (seed, start + k)."""
    if count < 1:
        raise DomainError(f"count must be >= 1, got {count}")
    protos = prototypes(cfg)
    return [generate_one(cfg, start + k, protos) for k in range(count)]


# ---------------------------------------------------------------------------
# analytic oracles
# ---------------------------------------------------------------------------

def ref_probabilities(cfg: GenConfig) -> np.ndarray:
    """P(has_ref) for each utterance position: 1 - (1 - 1/K)^min(i, o)."""
    i = np.arange(cfg.n_utterances)
    return 1.0 - (1.0 - 1.0 / cfg.n_topics) ** np.minimum(i, cfg.window)


def expected_positive_rate(cfg: GenConfig) -> float:
    """Expected fraction of candidate pairs (within the window) that are relations."""
    return float(ref_probabilities(cfg).sum()) / n_candidate_pairs(cfg)


def n_candidate_pairs(cfg: GenConfig) -> int:
    n, o = cfg.n_utterances, cfg.window
    return sum(min(i, o) for i in range(n))


def oracle_accuracy_ceiling(cfg: GenConfig) -> float:
    """Best frame accuracy for a classifier that sees only the current utterance.

    Topic and frame position are decodable from the frames; ``has_ref`` is
    not, and the utterance position in the conversation is not observable
    either, so the best guess is the majority value of ``has_ref`` under its
    marginal. Utterance length is independent of position, so the frame-level
    marginal equals the mean over positions.
    """
    p = float(ref_probabilities(cfg).mean())
    return max(p, 1.0 - p)


def enumerate_ref_rate(cfg: GenConfig) -> float:
    """Mean has_ref over every topic sequence, by exhaustive enumeration."""
    n, k = cfg.n_utterances, cfg.n_topics
    if k ** n > 5_000_000:
        raise DomainError("enumeration too large")
    seqs = np.array(list(itertools.product(range(k), repeat=n)), dtype=np.int8)
    hits = np.zeros(seqs.shape[0])
    for i in range(1, n):
        lo = max(0, i - cfg.window)
        hits += (seqs[:, lo:i] == seqs[:, i:i + 1]).any(axis=1)
    return float(hits.mean() / n)


# ---------------------------------------------------------------------------
# line-delimited JSON format
# ---------------------------------------------------------------------------

def conversation_to_dict(conv: Conversation) -> dict:
    return {
        "id": conv.id,
        "utterances": [
            {"frames": u.frames.tolist(), "labels": u.labels.tolist(), "topic": u.topic}
            for u in conv.utterances
        ],
        "relations": sorted([list(p) for p in conv.relations]),
    }


def conversation_from_dict(d: dict) -> Conversation:
    try:
        utts = []
        for u in d["utterances"]:
            frames = np.asarray(u["frames"], dtype=np.float64)
            if frames.ndim != 2 or frames.shape[0] < 1:
                raise ValueError("frames must be a non-empty 2-D array")
            labels = np.asarray(u["labels"], dtype=np.int64)
            if labels.shape != (frames.shape[0],):
                raise ValueError("one label per frame required")
            utts.append(Utterance(frames, labels, int(u["topic"])))
        rel = {(int(j), int(i)) for j, i in d["relations"]}
        conv = Conversation(str(d["id"]), utts, rel)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed conversation record: {exc}") from exc
    for j, i in rel:
        if not 0 <= j < i < len(utts):
            raise FormatError(f"{conv.id}: relation ({j}, {i}) out of range")
    return conv


def dumps_line(conv: Conversation) -> str:
    return json.dumps(conversation_to_dict(conv), separators=(",", ":"))


def write_dataset(path: str | Path, conversations: Iterable[Conversation]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for conv in conversations:
            fh.write(dumps_line(conv))
            fh.write("\n")


def read_dataset(path: str | Path) -> list[Conversation]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
            if not isinstance(record, dict):
                raise FormatError(f"{path}:{lineno}: expected an object")
            out.append(conversation_from_dict(record))
    return out


def load_gen_config(path: str | Path) -> GenConfig:
    return from_dict(GenConfig, load_json(path))
