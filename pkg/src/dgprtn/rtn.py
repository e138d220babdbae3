"""Simple recurrent unit (SRU) layers and the relational frame classifier.

One SRU step, for input ``x`` (optionally concatenated with a graph
embedding ``e``)::

    [r^, f^, c^] = Wx [x, e] + b
    r = sigmoid(r^),  f = sigmoid(f^)
    c_t = f * c_{t-1} + (1 - f) * c^
    h_t = r * c_t + (1 - r) * (Wh [x, e])

Only the ``c`` recurrence is sequential, so a layer projects the whole
sequence at once and runs the elementwise loop inside one fused op with a
hand-written backward. :func:`sru_step` is the same update built from
primitive ops; tests hold the two together.
"""
from __future__ import annotations

from typing import Mapping, NamedTuple, Sequence

import numpy as np
from scipy.special import expit

from . import numcore as nc
from .numcore import ContractViolation, Tensor


class SruLayerParams(NamedTuple):
    Wx: Tensor  # (3H, in) rows ordered [r, f, c]
    b: Tensor   # (3H,)
    Wh: Tensor  # (H, in)

    @property
    def hidden(self) -> int:
        return self.Wh.shape[0]

    @property
    def in_size(self) -> int:
        return self.Wh.shape[1]


def layer_params(params: Mapping[str, Tensor], prefix: str) -> SruLayerParams:
    return SruLayerParams(params[f"{prefix}.Wx"], params[f"{prefix}.b"], params[f"{prefix}.Wh"])


def sru_step(x_aug: Tensor, c_prev: Tensor, p: SruLayerParams) -> tuple[Tensor, Tensor]:
    """One update from primitive ops; returns ``(h, c)``."""
    H = p.hidden
    if x_aug.shape[-1] != p.in_size or c_prev.shape[-1] != H:
        raise ContractViolation(
            f"sru_step: x {x_aug.shape}, c {c_prev.shape} vs layer in={p.in_size} H={H}")
    gates = nc.dense(x_aug, p.Wx, p.b)
    r = nc.sigmoid(gates[..., 0:H])
    f = nc.sigmoid(gates[..., H:2 * H])
    c_hat = gates[..., 2 * H:3 * H]
    c = f * c_prev + (1.0 - f) * c_hat
    h = r * c + (1.0 - r) * nc.dense(x_aug, p.Wh)
    return h, c


def sru_recurrence(U: Tensor, HW: Tensor, c0: np.ndarray | None = None) -> Tensor:
    """Fused time loop. ``U``: (T, B, 3H) gate pre-activations; ``HW``: (T, B, H).

    Returns the hidden sequence (T, B, H).
    """
    T, B, H3 = U.shape
    H = H3 // 3
    if HW.shape != (T, B, H):
        raise ContractViolation(f"sru_recurrence: U {U.shape} vs HW {HW.shape}")
    dt = U.dtype
    r = expit(U.data[..., :H])
    f = expit(U.data[..., H:2 * H])
    c_hat = U.data[..., 2 * H:]
    c = np.empty((T + 1, B, H), dtype=dt)
    c[0] = 0 if c0 is None else c0
    for t in range(T):
        c[t + 1] = f[t] * c[t] + (1 - f[t]) * c_hat[t]
    hw = HW.data
    h = r * c[1:] + (1 - r) * hw

    def back(g):
        dU = np.empty_like(U.data)
        dHW = g * (1 - r)
        dr = g * (c[1:] - hw)
        dU[..., :H] = dr * r * (1 - r)
        carry = np.zeros((B, H), dtype=dt)
        for t in range(T - 1, -1, -1):
            dc = g[t] * r[t] + carry
            dU[t, :, H:2 * H] = dc * (c[t] - c_hat[t]) * f[t] * (1 - f[t])
            dU[t, :, 2 * H:] = dc * (1 - f[t])
            carry = dc * f[t]
        return dU, dHW

    return Tensor(h, (U, HW), back)


def sru_layer(x: Tensor, p: SruLayerParams, e: Tensor | None = None) -> Tensor:
    """Run one layer over ``x`` (T, B, D); ``e`` (B, E) is appended to every frame."""
    D = x.shape[-1]
    if e is None:
        if D != p.in_size:
            raise ContractViolation(f"sru_layer: input {D} vs layer in={p.in_size}")
        return sru_recurrence(nc.dense(x, p.Wx, p.b), nc.dense(x, p.Wh))
    if D + e.shape[-1] != p.in_size:
        raise ContractViolation(f"sru_layer: input {D}+{e.shape[-1]} vs layer in={p.in_size}")
    Wx_x, Wx_e = p.Wx[:, :D], p.Wx[:, D:]
    Wh_x, Wh_e = p.Wh[:, :D], p.Wh[:, D:]
    U = nc.dense(x, Wx_x, p.b) + nc.dense(e, Wx_e)
    HW = nc.dense(x, Wh_x) + nc.dense(e, Wh_e)
    return sru_recurrence(U, HW)


def sru_stack(x: Tensor, layers: Sequence[SruLayerParams], e: Tensor | None = None,
              every_layer: bool = False, dropout: float = 0.0,
              rng: nc.Rng | None = None) -> Tensor:
    """Stacked layers; ``e`` feeds the first layer, or all of them if ``every_layer``.

    Inverted dropout on the connections between layers is applied only when
    ``dropout > 0`` and an ``rng`` is supplied.
    """
    h = x
    for i, p in enumerate(layers):
        if i > 0 and dropout > 0 and rng is not None:
            keep = (rng.uniform(h.shape) >= dropout).astype(h.dtype) / (1 - dropout)
            h = h * keep
        h = sru_layer(h, p, e if (i == 0 or every_layer) else None)
    return h


def rtn_layers(params: Mapping[str, Tensor], n_layers: int, prefix: str = "rtn") -> list[SruLayerParams]:
    return [layer_params(params, f"{prefix}.sru{i}") for i in range(n_layers)]


def rtn_logits(frames: Tensor, e: Tensor | None, params: Mapping[str, Tensor], n_layers: int,
               every_layer: bool = False, dropout: float = 0.0,
               rng: nc.Rng | None = None) -> Tensor:
    """Batched classifier: frames (T, B, D), e (B, E) -> logits (T, B, C)."""
    h = sru_stack(frames, rtn_layers(params, n_layers), e, every_layer, dropout, rng)
    return nc.dense(h, params["rtn.out.W"], params["rtn.out.b"])


def rtn_forward(frames: Tensor, e: Tensor | None, params: Mapping[str, Tensor],
                n_layers: int, every_layer: bool = False) -> Tensor:
    """Single utterance: frames (T, D), e (E,) -> logits (T, C)."""
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise ContractViolation(f"rtn_forward needs (T>=1, D) frames, got {frames.shape}")
    x = nc.reshape(frames, (frames.shape[0], 1, frames.shape[1]))
    eb = None if e is None else nc.reshape(e, (1, e.shape[-1]))
    logits = rtn_logits(x, eb, params, n_layers, every_layer)
    return nc.reshape(logits, (frames.shape[0], logits.shape[-1]))


def frame_xent(logits: Tensor, labels) -> Tensor:
    """Mean per-frame cross-entropy of (T, C) logits against class ids."""
    return nc.cross_entropy(logits, labels)
