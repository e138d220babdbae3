"""Graph export for one utterance window: DOT for rendering, JSON for tooling.

Both formats come from the same :class:`ExportGraph`. Edge values are the
noiseless (posterior-mean) quantities: ``alpha = clamp(m)``,
``s = alpha * mu_s`` and ``alpha_bar = s * alpha``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

from .dgp import build_graphs
from .numcore import DomainError
from .synthdata import Conversation
from .training import Model

FORMATS = ("dot", "json")


@dataclass(frozen=True)
class ExportEdge:
    src: int
    dst: int
    m: float
    m0: float
    alpha_mean: float
    s_mean: float
    alpha_bar_mean: float
    weight: float          # min-max normalised alpha_bar_mean over the window
    label: bool            # ground-truth relation


@dataclass(frozen=True)
class ExportGraph:
    conversation: str
    utterance: int
    nodes: list[int]
    edges: list[ExportEdge]


def window_graph(model: Model, conv: Conversation, utterance: int, o: int) -> ExportGraph:
    """Graph over utterances ``max(0, utterance - o) .. utterance`` of ``conv``."""
    n = len(conv.utterances)
    if not 0 <= utterance < n:
        raise DomainError(f"{conv.id} has {n} utterances; index {utterance} out of range")
    if not model.cfg.use_graph:
        raise DomainError("model has no graph component to export")
    lo = max(0, utterance - o)
    nodes = list(range(lo, utterance + 1))
    frames = [conv.utterances[i].frames for i in nodes]
    summary, task, _ = build_graphs(frames, model.params, model.cfg)
    keys = sorted(summary.alpha)
    bars = [task.alpha_bar[k] for k in keys]
    lo_v, hi_v = (min(bars), max(bars)) if bars else (0.0, 0.0)
    span = hi_v - lo_v
    edges = []
    for (j, k), bar in zip(keys, bars):
        p = summary.params[(j, k)]
        src, dst = nodes[j], nodes[k]
        edges.append(ExportEdge(src, dst, p.m, p.m0, summary.alpha[(j, k)], task.s[(j, k)], bar,
                                (bar - lo_v) / span if span > 0 else 0.0,
                                (src, dst) in conv.relations))
    return ExportGraph(conv.id, utterance, nodes, edges)


def _color(w: float) -> str:
    # light grey (weight 0) to black (weight 1)
    g = int(round(210 * (1.0 - w)))
    return f"#{g:02x}{g:02x}{g:02x}"


def to_dot(graph: ExportGraph) -> str:
    name = f"{graph.conversation}_u{graph.utterance}".replace("-", "_")
    lines = [f"digraph {name} {{", "  rankdir=LR;", "  node [shape=circle];"]
    for i in graph.nodes:
        lines.append(f'  u{i} [label="{i}"];')
    for e in graph.edges:
        lines.append(
            f'  u{e.src} -> u{e.dst} [color="{_color(e.weight)}", '
            f'penwidth={1.0 + 3.0 * e.weight:.3f}, '
            f'm="{e.m:.6g}", m0="{e.m0:.6g}", alpha="{e.alpha_mean:.6g}", '
            f's="{e.s_mean:.6g}", alpha_bar="{e.alpha_bar_mean:.6g}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def to_json(graph: ExportGraph) -> str:
    return json.dumps(asdict(graph), indent=2, sort_keys=True) + "\n"


def render(graph: ExportGraph, fmt: str) -> str:
    if fmt == "dot":
        return to_dot(graph)
    if fmt == "json":
        return to_json(graph)
    raise DomainError(f"format must be one of {FORMATS}, got {fmt!r}")
