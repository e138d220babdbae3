"""Deep graph random process: node encoder, per-edge Binomial posteriors and
priors, proxy sampling of summary-graph edges, the Gaussian graph transform
and the graph embedding read out for the current utterance.

All windows of a batch share one pass through the pairwise networks: the
edge parameters of a pair depend only on its two node embeddings, so they
are computed once per unique pair and reused by every window containing it.
Samples, however, are drawn per (window, pair) incidence.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import numcore as nc
from .config import ModelConfig
from .numcore import ContractViolation, Rng, Tensor
from .rtn import layer_params, sru_stack

SIDES = ("post", "prior")
HEADS = ("a", "b", "c", "d")   # raw outputs -> n, sigma~, mu_s, sigma_s


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def _dense_init(rng: Rng, out_dim: int, in_dim: int, dtype) -> np.ndarray:
    return (rng.normal((out_dim, in_dim)) / np.sqrt(in_dim)).astype(dtype)


def _mlp_init(params: dict, prefix: str, sizes: Sequence[int], rng: Rng, dtype,
              out_bias: float = 0.0) -> None:
    for i, (d_in, d_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        params[f"{prefix}.{i}.W"] = _dense_init(rng, d_out, d_in, dtype)
        params[f"{prefix}.{i}.b"] = np.zeros(d_out, dtype=dtype)
    params[f"{prefix}.{len(sizes) - 2}.b"] += out_bias


def sru_init(params: dict, prefix: str, in_dim: int, hidden: int, rng: Rng, dtype) -> None:
    params[f"{prefix}.Wx"] = _dense_init(rng, 3 * hidden, in_dim, dtype)
    params[f"{prefix}.b"] = np.zeros(3 * hidden, dtype=dtype)
    params[f"{prefix}.Wh"] = _dense_init(rng, hidden, in_dim, dtype)


def init_dgp_params(cfg: ModelConfig, rng: Rng, dtype=np.float32,
                    tie_prior: bool = False) -> dict[str, np.ndarray]:
    """Encoder, edge MLPs and pair network. ``tie_prior`` copies posterior weights."""
    p: dict[str, np.ndarray] = {}
    d = cfg.d_in
    for i in range(cfg.enc_layers):
        sru_init(p, f"enc.sru{i}", d, cfg.enc_hidden, rng, dtype)
        d = cfg.enc_hidden
    p["enc.out.W"] = _dense_init(rng, cfg.d_node, cfg.enc_hidden, dtype)
    p["enc.out.b"] = np.zeros(cfg.d_node, dtype=dtype)
    edge_sizes = [2 * cfg.d_node] + [cfg.edge_hidden] * (cfg.edge_layers - 1) + [1]
    bias = {"c": cfg.transform_mu_bias, "d": cfg.transform_sigma_bias}
    for head in HEADS:
        _mlp_init(p, f"edge.post.{head}", edge_sizes, rng, dtype, bias.get(head, 0.0))
    for head in HEADS:
        if tie_prior:
            for k in list(p):
                if k.startswith(f"edge.post.{head}."):
                    p[k.replace("edge.post.", "edge.prior.")] = p[k].copy()
        else:
            _mlp_init(p, f"edge.prior.{head}", edge_sizes, rng, dtype, bias.get(head, 0.0))
    pair_sizes = [2 * cfg.d_node] + [cfg.pair_hidden] * (cfg.pair_layers - 1) + [cfg.d_embed]
    _mlp_init(p, "pair", pair_sizes, rng, dtype)
    return p


def mlp(x: Tensor, params: Mapping[str, Tensor], prefix: str, n_layers: int) -> Tensor:
    """ReLU between layers, linear output."""
    for i in range(n_layers):
        x = nc.dense(x, params[f"{prefix}.{i}.W"], params[f"{prefix}.{i}.b"])
        if i < n_layers - 1:
            x = nc.relu(x)
    return x


# ---------------------------------------------------------------------------
# node embeddings
# ---------------------------------------------------------------------------

def encode_nodes(frames: Tensor, lengths: Sequence[int], params: Mapping[str, Tensor],
                 cfg: ModelConfig) -> Tensor:
    """Padded frames (T, B, D) -> node embeddings (B, d_node).

    SRU stack, elementwise max over each utterance's valid frames, one dense
    layer, ReLU.
    """
    lengths = np.asarray(lengths)
    if lengths.size == 0 or lengths.min() < 1:
        raise ContractViolation("every utterance needs at least one frame")
    layers = [layer_params(params, f"enc.sru{i}") for i in range(cfg.enc_layers)]
    h = sru_stack(frames, layers)
    T = frames.shape[0]
    pad = (np.arange(T)[:, None] >= lengths[None, :])[:, :, None]
    if pad.any():
        h = h + np.where(pad, np.finfo(h.dtype).min / 2, 0).astype(h.dtype)
    pooled = nc.tmax(h, axis=0)
    return nc.relu(nc.dense(pooled, params["enc.out.W"], params["enc.out.b"]))


def encode_node(frames: Tensor, params: Mapping[str, Tensor], cfg: ModelConfig) -> Tensor:
    """Single utterance (T, D) -> embedding (d_node,)."""
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise ContractViolation(f"encode_node needs (T>=1, D) frames, got {frames.shape}")
    x = nc.reshape(frames, (frames.shape[0], 1, frames.shape[1]))
    return nc.reshape(encode_nodes(x, [frames.shape[0]], params, cfg), (cfg.d_node,))


# ---------------------------------------------------------------------------
# edge parameters
# ---------------------------------------------------------------------------

def m_from_raw(a: Tensor, b: Tensor, epsilon: float, epsilon_sigma: float) -> Tensor:
    """Map raw network outputs to ``m`` in (0, 1/2).

    ``n = softplus(a) + epsilon`` stands in for ``1 / (1 - 2 mu~)`` and
    ``sigma~ = softplus(b) + epsilon_sigma``. With ``l = 2 n sigma~^2``,
    ``m = (1 + l - sqrt(1 + l^2)) / 2``, computed as ``l / (1 + l + sqrt(1 + l^2))``.
    """
    n = nc.softplus(a) + epsilon
    sig = nc.softplus(b) + epsilon_sigma
    l = 2.0 * n * sig * sig
    return l / (1.0 + l + nc.sqrt(1.0 + l * l))


@dataclass
class EdgeTensors:
    """Per-pair parameters; every field has shape (P,) except ``feat`` (P, d_embed)."""

    m: Tensor
    mu_s: Tensor
    sigma_s: Tensor
    m0: Tensor
    mu_s0: Tensor
    sigma_s0: Tensor
    feat: Tensor | None = None


def _edge_side(x: Tensor, params: Mapping[str, Tensor], side: str,
               cfg: ModelConfig) -> tuple[Tensor, Tensor, Tensor]:
    raw = {h: nc.reshape(mlp(x, params, f"edge.{side}.{h}", cfg.edge_layers), (x.shape[0],))
           for h in HEADS}
    m = m_from_raw(raw["a"], raw["b"], cfg.epsilon, cfg.epsilon_sigma)
    sigma_s = nc.softplus(raw["d"]) + cfg.epsilon_sigma
    return m, raw["c"], sigma_s


def pair_inputs(V: Tensor, pairs: np.ndarray) -> Tensor:
    """Concatenate ``[v_j, v_k]`` for each row (j, k) of ``pairs``."""
    return nc.concat([V[pairs[:, 0]], V[pairs[:, 1]]], axis=1)


def edge_tensors(V: Tensor, pairs: np.ndarray, params: Mapping[str, Tensor],
                 cfg: ModelConfig, with_features: bool = True) -> EdgeTensors:
    x = pair_inputs(V, pairs)
    m, mu_s, sigma_s = _edge_side(x, params, "post", cfg)
    m0, mu_s0, sigma_s0 = _edge_side(x, params, "prior", cfg)
    feat = mlp(x, params, "pair", cfg.pair_layers) if with_features else None
    return EdgeTensors(m, mu_s, sigma_s, m0, mu_s0, sigma_s0, feat)


def _single_pair(v_i: Tensor, v_j: Tensor) -> Tensor:
    return nc.reshape(nc.concat([v_i, v_j], axis=0), (1, v_i.shape[0] + v_j.shape[0]))


def edge_posterior(v_i: Tensor, v_j: Tensor, params: Mapping[str, Tensor],
                   cfg: ModelConfig) -> tuple[Tensor, Tensor, Tensor]:
    """(m, mu_s, sigma_s) for one pair, each of shape (1,)."""
    return _edge_side(_single_pair(v_i, v_j), params, "post", cfg)


def edge_prior(v_i: Tensor, v_j: Tensor, params: Mapping[str, Tensor],
               cfg: ModelConfig) -> tuple[Tensor, Tensor, Tensor]:
    """(m0, mu_s0, sigma_s0) for one pair, each of shape (1,)."""
    return _edge_side(_single_pair(v_i, v_j), params, "prior", cfg)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def sample_summary_edge(m: Tensor, rng: Rng | None = None, noise: np.ndarray | None = None,
                        epsilon_alpha: float = 1e-4) -> tuple[Tensor, np.ndarray]:
    """Reparameterised proxy draw ``clamp(m + sqrt(m(1-m)) * eps, eps_alpha, 1)``.

    Returns the samples and a boolean mask of clamped entries.
    """
    m = nc.as_tensor(m)
    if noise is None:
        noise = rng.normal(m.shape)
    noise = np.asarray(noise, dtype=m.dtype).reshape(m.shape)
    raw = m + nc.sqrt(m * (1.0 - m)) * noise
    clamped = (raw.data < epsilon_alpha) | (raw.data > 1.0)
    return nc.clip(raw, epsilon_alpha, 1.0), clamped


def sample_transform(alpha: Tensor, mu_s: Tensor, sigma_s: Tensor, rng: Rng | None = None,
                     noise: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """``s ~ N(alpha * mu_s, alpha * sigma_s^2)`` reparameterised; returns (s, s * alpha)."""
    alpha = nc.as_tensor(alpha)
    if noise is None:
        noise = rng.normal(alpha.shape)
    noise = np.asarray(noise, dtype=alpha.dtype).reshape(alpha.shape)
    s = alpha * mu_s + nc.sqrt(alpha) * sigma_s * noise
    return s, s * alpha


# ---------------------------------------------------------------------------
# windows and graphs
# ---------------------------------------------------------------------------

@dataclass
class WindowSet:
    """Flattened (window, pair) incidences for a batch of windows.

    ``windows[w]`` lists node indices in ascending order, the last being the
    current utterance. ``pairs`` holds each unique unordered pair once.
    """

    windows: list[np.ndarray]
    pairs: np.ndarray
    inc_window: np.ndarray
    inc_pair: np.ndarray

    @classmethod
    def build(cls, windows: Sequence[Sequence[int]]) -> "WindowSet":
        ws = [np.asarray(w, dtype=np.int64) for w in windows]
        index: dict[tuple[int, int], int] = {}
        inc_w, inc_p = [], []
        for wi, w in enumerate(ws):
            if w.size == 0:
                raise ContractViolation("empty window")
            for a in range(w.size):
                for b in range(a + 1, w.size):
                    key = (int(w[a]), int(w[b]))
                    pi = index.setdefault(key, len(index))
                    inc_w.append(wi)
                    inc_p.append(pi)
        pairs = np.array(list(index), dtype=np.int64).reshape(-1, 2)
        return cls(ws, pairs, np.array(inc_w, dtype=np.int64), np.array(inc_p, dtype=np.int64))

    @property
    def n_windows(self) -> int:
        return len(self.windows)

    @property
    def n_incidences(self) -> int:
        return self.inc_pair.size


@dataclass
class EdgeNoise:
    """Standard-normal draws for every (window, pair) incidence."""

    alpha: np.ndarray
    s: np.ndarray

    @classmethod
    def draw(cls, rng: Rng, n: int) -> "EdgeNoise":
        return cls(rng.normal((n,)), rng.normal((n,)))

    @classmethod
    def zeros(cls, n: int) -> "EdgeNoise":
        return cls(np.zeros(n), np.zeros(n))


@dataclass
class GraphSample:
    edges: EdgeTensors
    alpha: Tensor        # (I,) summary-edge samples
    s: Tensor            # (I,) transform weights
    alpha_bar: Tensor    # (I,) task-graph edges
    e: Tensor            # (W, d_embed)
    clamped: np.ndarray  # (I,) bool

    @property
    def clamp_fraction(self) -> float:
        return float(self.clamped.mean()) if self.clamped.size else 0.0


def embed_from_edges(alpha_bar: Tensor, feat: Tensor, ws: WindowSet) -> Tensor:
    """``e_w = sum over incidences of w of alpha_bar * feat[pair]``; (W, d_embed)."""
    d = feat.shape[1]
    if ws.n_incidences == 0:
        return nc.Tensor(np.zeros((ws.n_windows, d), dtype=feat.dtype))
    S = np.zeros((ws.n_windows, ws.n_incidences), dtype=feat.dtype)
    S[ws.inc_window, np.arange(ws.n_incidences)] = 1
    weighted = nc.reshape(alpha_bar, (ws.n_incidences, 1)) * feat[ws.inc_pair]
    return nc.matmul(S, weighted)


def sample_graphs(V: Tensor, ws: WindowSet, params: Mapping[str, Tensor], cfg: ModelConfig,
                  rng: Rng | None = None, noise: EdgeNoise | None = None) -> GraphSample:
    """Edge params for all pairs, one proxy/transform draw per incidence, embeddings.

    With neither ``rng`` nor ``noise`` the pass is noiseless (all draws zero).
    """
    if ws.pairs.shape[0] == 0:
        zero = nc.Tensor(np.zeros(0, dtype=V.dtype))
        empty = EdgeTensors(zero, zero, zero, zero, zero, zero,
                            nc.Tensor(np.zeros((0, cfg.d_embed), dtype=V.dtype)))
        e = nc.Tensor(np.zeros((ws.n_windows, cfg.d_embed), dtype=V.dtype))
        return GraphSample(empty, zero, zero, zero, e, np.zeros(0, dtype=bool))
    edges = edge_tensors(V, ws.pairs, params, cfg)
    if noise is None:
        noise = EdgeNoise.draw(rng, ws.n_incidences) if rng is not None \
            else EdgeNoise.zeros(ws.n_incidences)
    ip = ws.inc_pair
    alpha, clamped = sample_summary_edge(edges.m[ip], noise=noise.alpha,
                                         epsilon_alpha=cfg.epsilon_alpha)
    s, alpha_bar = sample_transform(alpha, edges.mu_s[ip], edges.sigma_s[ip], noise=noise.s)
    e = embed_from_edges(alpha_bar, edges.feat, ws)
    return GraphSample(edges, alpha, s, alpha_bar, e, clamped)


@dataclass(frozen=True)
class EdgeParams:
    m: float
    m0: float
    mu_s: float
    sigma_s: float
    mu_s0: float
    sigma_s0: float


@dataclass
class SummaryGraph:
    nodes: list[np.ndarray]
    alpha: dict[tuple[int, int], float] = field(default_factory=dict)
    params: dict[tuple[int, int], EdgeParams] = field(default_factory=dict)


@dataclass
class TaskGraph:
    nodes: list[np.ndarray]
    alpha_bar: dict[tuple[int, int], float] = field(default_factory=dict)
    s: dict[tuple[int, int], float] = field(default_factory=dict)
    feat: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)


def graph_embedding(graph: TaskGraph, params: Mapping[str, Tensor], cfg: ModelConfig) -> Tensor:
    """``sum_{j<k} alpha_bar_jk * pair_net([v_j, v_k])`` over the graph's edges."""
    V = nc.Tensor(np.stack(graph.nodes)) if graph.nodes else None
    keys = sorted(graph.alpha_bar)
    if not keys:
        dtype = V.dtype if V is not None else np.float64
        return nc.Tensor(np.zeros(cfg.d_embed, dtype=dtype))
    pairs = np.array(keys, dtype=np.int64)
    feat = mlp(pair_inputs(V, pairs), params, "pair", cfg.pair_layers)
    w = nc.Tensor(np.array([graph.alpha_bar[k] for k in keys], dtype=V.dtype))
    return nc.tsum(nc.reshape(w, (len(keys), 1)) * feat, axis=0)


def _pad_frames(frames: Sequence[np.ndarray], dtype) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([f.shape[0] for f in frames])
    T, D = int(lengths.max()), frames[0].shape[1]
    out = np.zeros((T, len(frames), D), dtype=dtype)
    for b, f in enumerate(frames):
        out[: f.shape[0], b] = f
    return out, lengths


def build_graphs(window: Sequence[np.ndarray], params: Mapping[str, Tensor], cfg: ModelConfig,
                 rng: Rng | None = None,
                 noise: EdgeNoise | None = None) -> tuple[SummaryGraph, TaskGraph, Tensor]:
    """Encode a window of utterances (oldest first) and sample both graphs.

    Returns the summary graph, the task graph and the embedding of the last
    (current) node.
    """
    if len(window) == 0:
        raise ContractViolation("build_graphs needs a non-empty window")
    dtype = next(iter(params.values())).dtype
    padded, lengths = _pad_frames([np.asarray(f) for f in window], dtype)
    V = encode_nodes(nc.Tensor(padded), lengths, params, cfg)
    ws = WindowSet.build([list(range(len(window)))])
    sample = sample_graphs(V, ws, params, cfg, rng=rng, noise=noise)
    nodes = [V.data[i].copy() for i in range(len(window))]
    summary, task = SummaryGraph(nodes), TaskGraph(nodes)
    ed = sample.edges
    for i, (j, k) in enumerate(ws.pairs.tolist()):
        key = (j, k)
        summary.alpha[key] = float(sample.alpha.data[i])
        summary.params[key] = EdgeParams(
            float(ed.m.data[i]), float(ed.m0.data[i]), float(ed.mu_s.data[i]),
            float(ed.sigma_s.data[i]), float(ed.mu_s0.data[i]), float(ed.sigma_s0.data[i]))
        task.alpha_bar[key] = float(sample.alpha_bar.data[i])
        task.s[key] = float(sample.s.data[i])
        task.feat[key] = ed.feat.data[i].copy()
    e = nc.reshape(sample.e, (cfg.d_embed,))
    return summary, task, e
