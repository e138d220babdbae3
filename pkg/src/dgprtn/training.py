"""Variational objective, SGD training loop and checkpoint container.

The loss minimised per batch is

    total = ce + beta * (kl_edges + kl_transform)

``ce`` is the mean frame cross-entropy; both KL terms are summed over the
edges of each window and averaged over the windows of the batch, so the
scale of the objective does not depend on batch size.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import numcore as nc
from .config import ConfigError, FormatError, ModelConfig, TrainConfig, from_dict, load_json
from .dgp import (EdgeNoise, GraphSample, WindowSet, encode_nodes, init_dgp_params,
                  sample_graphs, sru_init, _dense_init)
from .numcore import DomainError, NonFiniteError, Rng, Tensor
from .rtn import rtn_logits
from .synthdata import Conversation

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "dgprtn-checkpoint/1"


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

@dataclass
class Model:
    cfg: ModelConfig
    params: dict[str, Tensor]

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def cast(self, dtype) -> "Model":
        return Model(self.cfg, nc.cast_params(self.params, dtype))


def init_model(cfg: ModelConfig, rng: Rng, dtype=np.float32, tie_prior: bool = False) -> Model:
    raw: dict[str, np.ndarray] = {}
    if cfg.use_graph:
        raw.update(init_dgp_params(cfg, rng.split("dgp"), dtype, tie_prior))
    r = rng.split("rtn")
    e_dim = cfg.d_embed if cfg.use_graph else 0
    d = cfg.d_in + e_dim
    for i in range(cfg.rtn_layers):
        sru_init(raw, f"rtn.sru{i}", d, cfg.rtn_hidden, r, dtype)
        d = cfg.rtn_hidden + (e_dim if cfg.embed_every_layer else 0)
    raw["rtn.out.W"] = _dense_init(r, cfg.n_classes, cfg.rtn_hidden, dtype)
    raw["rtn.out.b"] = np.zeros(cfg.n_classes, dtype=dtype)
    return Model(cfg, {k: Tensor(v, name=k) for k, v in raw.items()})


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    frames: np.ndarray        # (T, B, D)
    lengths: np.ndarray       # (B,)
    labels: np.ndarray        # (N,) labels of valid frames, (t, b) row-major
    valid: tuple[np.ndarray, np.ndarray]
    windows: WindowSet
    utterances: list[tuple[str, int]]

    @property
    def n_frames(self) -> int:
        return int(self.labels.size)


def make_batch(conversations: Sequence[Conversation], o: int, dtype=np.float32) -> Batch:
    """Stack every utterance of ``conversations``; one window per utterance."""
    frames, labels_list, windows, ids = [], [], [], []
    offset = 0
    for conv in conversations:
        n = len(conv.utterances)
        for i, u in enumerate(conv.utterances):
            frames.append(u.frames)
            labels_list.append(u.labels)
            ids.append((conv.id, i))
            windows.append(list(range(offset + max(0, i - o), offset + i + 1)))
        offset += n
    lengths = np.array([f.shape[0] for f in frames])
    T, B, D = int(lengths.max()), len(frames), frames[0].shape[1]
    padded = np.zeros((T, B, D), dtype=dtype)
    for b, f in enumerate(frames):
        padded[: f.shape[0], b] = f
    t_idx, b_idx = np.nonzero(np.arange(T)[:, None] < lengths[None, :])
    lab = np.zeros((T, B), dtype=np.int64)
    for b, l in enumerate(labels_list):
        lab[: l.size, b] = l
    return Batch(padded, lengths, lab[t_idx, b_idx], (t_idx, b_idx),
                 WindowSet.build(windows), ids)


def forward(model: Model, batch: Batch, rng: Rng | None = None,
            noise: EdgeNoise | None = None, train: bool = False
            ) -> tuple[Tensor, GraphSample | None]:
    """Per-frame logits (N, C) over the batch's valid frames, and the graph sample."""
    cfg, params = model.cfg, model.params
    x = Tensor(batch.frames.astype(model.dtype, copy=False))
    sample = None
    e = None
    if cfg.use_graph:
        V = encode_nodes(x, batch.lengths, params, cfg)
        sample = sample_graphs(V, batch.windows, params, cfg, rng=rng, noise=noise)
        e = sample.e
    drop_rng = rng.split("dropout") if (train and cfg.dropout > 0 and rng is not None) else None
    logits = rtn_logits(x, e, params, cfg.rtn_layers, cfg.embed_every_layer,
                        cfg.dropout if drop_rng is not None else 0.0, drop_rng)
    return logits[batch.valid], sample


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------

def expected_transform_kl(m, mu_s, sigma_s, mu_s0, sigma_s0):
    """E over alpha~ of KL(N(a mu, a sigma^2) || N(a mu0, a sigma0^2)) with E[alpha~] = m.

    The pointwise KL is affine in ``a``:
    ``(r - 1 - ln r)/2 + a (mu - mu0)^2 / (2 sigma0^2)`` with ``r = sigma^2/sigma0^2``.
    """
    sigma_s = np.asarray(sigma_s, dtype=np.float64)
    sigma_s0 = np.asarray(sigma_s0, dtype=np.float64)
    if np.any(sigma_s <= 0) or np.any(sigma_s0 <= 0):
        raise DomainError("transform standard deviations must be positive")
    m_arr = np.asarray(m, dtype=np.float64)
    if np.any(~((m_arr > 0) & (m_arr < 0.5))):
        raise DomainError("m must lie in (0, 1/2)")
    r = (sigma_s / sigma_s0) ** 2
    out = 0.5 * (r - 1.0 - np.log(r)) + m_arr * (np.asarray(mu_s) - np.asarray(mu_s0)) ** 2 \
        / (2.0 * sigma_s0 ** 2)
    return float(out) if np.ndim(out) == 0 else out


def kl_bound_tensor(m: Tensor, m0: Tensor) -> Tensor:
    def h(x):
        return 1.0 - x + 0.5 * x * x
    return m * nc.log(m / m0) + (1.0 - m) * nc.log(h(m) / h(m0))


def transform_kl_tensor(m: Tensor, mu: Tensor, sigma: Tensor, mu0: Tensor, sigma0: Tensor) -> Tensor:
    r = (sigma / sigma0) ** 2
    return 0.5 * (r - 1.0 - nc.log(r)) + m * (mu - mu0) ** 2 / (2.0 * sigma0 * sigma0)


@dataclass(frozen=True)
class ElboBreakdown:
    ce: float
    kl_edges: float
    kl_transform: float
    total: float
    beta: float
    clamp_fraction: float = 0.0


def _window_weights(ws: WindowSet, dtype) -> np.ndarray:
    """How many windows each pair belongs to, divided by the number of windows."""
    counts = np.bincount(ws.inc_pair, minlength=ws.pairs.shape[0]).astype(dtype)
    return counts / dtype(max(ws.n_windows, 1))


def _diagnose(batch: Batch, logits: Tensor, sample: GraphSample | None) -> str:
    bad_rows = np.nonzero(~np.isfinite(logits.data).all(axis=1))[0]
    if bad_rows.size:
        t, b = batch.valid[0][bad_rows[0]], batch.valid[1][bad_rows[0]]
        conv, utt = batch.utterances[b]
        return f"non-finite logits at {conv} utterance {utt} frame {t}"
    if sample is not None:
        for name in ("m", "m0", "mu_s", "sigma_s", "mu_s0", "sigma_s0"):
            arr = getattr(sample.edges, name).data
            bad = np.nonzero(~np.isfinite(arr))[0]
            if bad.size:
                j, k = batch.windows.pairs[bad[0]]
                cj, uj = batch.utterances[j]
                return f"non-finite {name} on edge {cj} ({uj}, {batch.utterances[k][1]})"
    return "non-finite loss"


def elbo_loss(batch: Batch, model: Model, beta: float, rng: Rng | None = None,
              noise: EdgeNoise | None = None, train: bool = False
              ) -> tuple[Tensor, ElboBreakdown]:
    logits, sample = forward(model, batch, rng=rng, noise=noise, train=train)
    ce = nc.cross_entropy(logits, batch.labels)
    dt = model.dtype.type
    if sample is not None and batch.windows.pairs.shape[0] > 0:
        ed = sample.edges
        w = _window_weights(batch.windows, dt)
        kl_e = nc.tsum(kl_bound_tensor(ed.m, ed.m0) * w)
        kl_t = nc.tsum(transform_kl_tensor(ed.m, ed.mu_s, ed.sigma_s, ed.mu_s0, ed.sigma_s0) * w)
        clamp = sample.clamp_fraction
    else:
        kl_e = Tensor(np.zeros((), dtype=model.dtype))
        kl_t = Tensor(np.zeros((), dtype=model.dtype))
        clamp = 0.0
    total = ce + dt(beta) * (kl_e + kl_t)
    if not np.isfinite(total.data):
        raise NonFiniteError(_diagnose(batch, logits, sample))
    br = ElboBreakdown(float(ce.data), float(kl_e.data), float(kl_t.data), float(total.data),
                       beta, clamp)
    return total, br


# ---------------------------------------------------------------------------
# evaluation used by the training log (noiseless, deterministic)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitMetrics:
    ce: float
    kl: float
    accuracy: float
    n_frames: int


def evaluate(model: Model, conversations: Sequence[Conversation], o: int,
             batch_size: int = 16) -> SplitMetrics:
    """Noiseless pass: mean frame CE, mean per-window KL and frame accuracy."""
    ce_sum = kl_sum = 0.0
    correct = frames = windows = 0
    for start in range(0, len(conversations), batch_size):
        batch = make_batch(conversations[start:start + batch_size], o, model.dtype)
        logits, sample = forward(model, batch)
        z = logits.data.astype(np.float64)
        z = z - z.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1))
        ce_sum += float((lse - z[np.arange(z.shape[0]), batch.labels]).sum())
        correct += int((logits.data.argmax(axis=1) == batch.labels).sum())
        frames += batch.n_frames
        if sample is not None and batch.windows.pairs.shape[0] > 0:
            ed = sample.edges
            counts = np.bincount(batch.windows.inc_pair, minlength=batch.windows.pairs.shape[0])
            kl = kl_bound_tensor(ed.m, ed.m0).data.astype(np.float64) \
                + transform_kl_tensor(ed.m, ed.mu_s, ed.sigma_s, ed.mu_s0, ed.sigma_s0).data
            kl_sum += float((kl * counts).sum())
        windows += batch.windows.n_windows
    return SplitMetrics(ce_sum / frames, kl_sum / max(windows, 1), correct / frames, frames)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_ce: float
    train_kl: float
    train_acc: float
    test_ce: float
    test_acc: float
    batch_loss: float
    clamp_fraction: float

    def as_row(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    model: Model
    history: list[EpochRecord]
    diverged: bool = False
    checkpoints: list[Path] = field(default_factory=list)


def split_dataset(conversations: Sequence[Conversation], heldout: int
                  ) -> tuple[list[Conversation], list[Conversation]]:
    convs = list(conversations)
    if heldout <= 0:
        return convs, []
    if heldout >= len(convs):
        raise DomainError(f"heldout={heldout} leaves no training conversations")
    return convs[:-heldout], convs[-heldout:]


def _record(epoch: int, model: Model, train_set, test_set, o: int,
            batch_loss: float, clamp: float) -> EpochRecord:
    tr = evaluate(model, train_set, o)
    te = evaluate(model, test_set, o) if test_set else SplitMetrics(math.nan, math.nan, math.nan, 0)
    return EpochRecord(epoch, tr.ce, tr.kl, tr.accuracy, te.ce, te.accuracy, batch_loss, clamp)


def train(cfg: TrainConfig, conversations: Sequence[Conversation],
          out_dir: str | Path | None = None,
          on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    """SGD on the ELBO. Deterministic given ``cfg.seed``.

    Epoch 0 in the history is the model at initialisation. A checkpoint is
    written at initialisation and after every epoch when ``out_dir`` is given. On a non-finite loss
    the loop stops and the last finite model is returned.
    """
    if not conversations:
        raise DomainError("training needs at least one conversation")
    train_set, test_set = split_dataset(conversations, cfg.heldout)
    rng = Rng(cfg.seed)
    model = init_model(cfg.model, rng.split("init"))
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    history = [_record(0, model, train_set, test_set, cfg.o, math.nan, 0.0)]
    if on_epoch:
        on_epoch(history[-1])
    result = TrainResult(model, history)
    if out is not None:
        result.checkpoints.append(save_checkpoint(out / "ckpt-epoch000", model, cfg, 0))
    velocity: dict[str, np.ndarray] = {}
    for epoch in range(1, cfg.epochs + 1):
        order = rng.split("shuffle", epoch).permutation(len(train_set))
        losses, clamps = [], []
        try:
            for bi, start in enumerate(range(0, len(train_set), cfg.batch_size)):
                convs = [train_set[i] for i in order[start:start + cfg.batch_size]]
                batch = make_batch(convs, cfg.o, model.dtype)
                total, br = elbo_loss(batch, model, cfg.beta, rng=rng.split("noise", epoch, bi),
                                      train=True)
                nc.backward(total)
                grads = nc.param_grads(model.params)
                if cfg.grad_clip > 0:
                    norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum())
                                         for g in grads.values()))
                    if norm > cfg.grad_clip:
                        scale = model.dtype.type(cfg.grad_clip / norm)
                        grads = {k: g * scale for k, g in grads.items()}
                if cfg.momentum > 0:
                    for k, g in grads.items():
                        velocity[k] = cfg.momentum * velocity.get(k, 0) + g
                    grads = velocity
                if cfg.lr > 0:
                    model = Model(model.cfg, nc.sgd_step(model.params, grads, cfg.lr))
                losses.append(br.total)
                clamps.append(br.clamp_fraction)
        except NonFiniteError as exc:
            log.error("epoch %d diverged: %s", epoch, exc)
            result.diverged = True
            break
        rec = _record(epoch, model, train_set, test_set, cfg.o,
                      float(np.mean(losses)), float(np.mean(clamps)) if clamps else 0.0)
        if not math.isfinite(rec.train_ce):
            log.error("epoch %d produced non-finite metrics; keeping previous model", epoch)
            result.diverged = True
            break
        history.append(rec)
        result.model = model
        log.info("epoch %d train_ce=%.4f train_acc=%.4f test_acc=%.4f clamp=%.3f",
                 epoch, rec.train_ce, rec.train_acc, rec.test_acc, rec.clamp_fraction)
        if on_epoch:
            on_epoch(rec)
        if out is not None:
            result.checkpoints.append(
                save_checkpoint(out / f"ckpt-epoch{epoch:03d}", model, cfg, epoch))
    return result


# ---------------------------------------------------------------------------
# checkpoints: JSON manifest + flat little-endian float32 payload
# ---------------------------------------------------------------------------

def save_checkpoint(stem: str | Path, model: Model, cfg: TrainConfig, epoch: int) -> Path:
    """Write ``<stem>.json`` and ``<stem>.bin``; returns the manifest path."""
    stem = Path(stem)
    entries, chunks, offset = [], [], 0
    for name, t in model.params.items():
        buf = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "epoch": epoch,
        "seed": cfg.seed,
        "config": asdict(cfg),
        "payload": stem.name + ".bin",
        "payload_bytes": offset,
        "tensors": entries,
    }
    stem.parent.mkdir(parents=True, exist_ok=True)
    with open(stem.with_suffix(".bin"), "wb") as fh:
        fh.write(b"".join(chunks))
    path = stem.with_suffix(".json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def load_checkpoint(path: str | Path) -> tuple[Model, TrainConfig, dict]:
    path = Path(path)
    manifest = load_json(path)
    if not isinstance(manifest, dict) or manifest.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path}: not a {CHECKPOINT_FORMAT} manifest")
    try:
        cfg = from_dict(TrainConfig, manifest["config"])
        payload = (path.parent / manifest["payload"]).read_bytes()
        if len(payload) != manifest["payload_bytes"]:
            raise FormatError(f"{path}: payload size mismatch")
        params = {}
        for ent in manifest["tensors"]:
            raw = payload[ent["offset"]: ent["offset"] + ent["nbytes"]]
            arr = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(ent["shape"])
            params[ent["name"]] = Tensor(arr, name=ent["name"])
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise FormatError(f"{path}: corrupt checkpoint: {exc}") from exc
    expected = init_model(cfg.model, Rng(0)).params
    if set(expected) != set(params) or any(expected[k].shape != params[k].shape for k in params):
        raise ConfigError(f"{path}: tensors do not match the configured architecture")
    return Model(cfg.model, params), cfg, manifest
