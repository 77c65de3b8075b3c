"""Selective (input-dependent) diagonal state-space scan and its 2-D/text extension.

Per token ``t`` and channel ``d``::

    delta_t = max(softplus(x_t @ W_dt + b_dt), 1e-4)
    h_t     = exp(delta_t * A) * h_{t-1} + delta_t * B_t * x_t      (h_0 = 0)
    y_t     = <C_t, h_t> + D * x_t

with ``A = -exp(A_log)`` a negative ``(C, N)`` diagonal, and ``B_t``, ``C_t``
linear read-outs of ``x_t`` shared across channels.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numba import njit

from . import nn, ops
from .tensor import Tensor, make_result

DELTA_FLOOR = 1e-4


@njit(cache=True)
def _scan_forward(u, delta, A, B, C, D):
    L, dm = u.shape
    n_state = A.shape[1]
    hs = np.empty((L, dm, n_state), dtype=u.dtype)
    y = np.empty((L, dm), dtype=u.dtype)
    h = np.zeros((dm, n_state), dtype=u.dtype)
    for t in range(L):
        for d in range(dm):
            dt = delta[t, d]
            ut = u[t, d]
            acc = D[d] * ut
            for n in range(n_state):
                hn = np.exp(dt * A[d, n]) * h[d, n] + dt * B[t, n] * ut
                h[d, n] = hn
                hs[t, d, n] = hn
                acc += C[t, n] * hn
            y[t, d] = acc
    return y, hs


@njit(cache=True)
def _scan_backward(u, delta, A, B, C, D, hs, gy):
    L, dm = u.shape
    n_state = A.shape[1]
    du = np.zeros_like(u)
    ddelta = np.zeros_like(delta)
    dA = np.zeros_like(A)
    dB = np.zeros_like(B)
    dC = np.zeros_like(C)
    dD = np.zeros_like(D)
    gh = np.zeros((dm, n_state), dtype=u.dtype)
    for t in range(L - 1, -1, -1):
        for d in range(dm):
            g = gy[t, d]
            ut = u[t, d]
            dt = delta[t, d]
            dD[d] += g * ut
            du_acc = g * D[d]
            dd_acc = 0.0
            for n in range(n_state):
                dC[t, n] += g * hs[t, d, n]
                ghn = gh[d, n] + g * C[t, n]
                a = np.exp(dt * A[d, n])
                hprev = hs[t - 1, d, n] if t > 0 else 0.0
                da = ghn * hprev * a
                dd_acc += da * A[d, n] + ghn * B[t, n] * ut
                dA[d, n] += da * dt
                dB[t, n] += ghn * dt * ut
                du_acc += ghn * dt * B[t, n]
                gh[d, n] = ghn * a
            du[t, d] = du_acc
            ddelta[t, d] = dd_acc
    return du, ddelta, dA, dB, dC, dD


def selective_scan_core(u: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor, D: Tensor) -> Tensor:
    """Run the discretized recurrence on already-projected inputs.

    Shapes: ``u, delta: (L, Dm)``, ``A: (Dm, N)``, ``B, C: (L, N)``, ``D: (Dm,)``.
    """
    L, dm = u.shape
    if delta.shape != (L, dm) or A.shape[0] != dm or B.shape != (L, A.shape[1]) or C.shape != B.shape or D.shape != (dm,):
        raise ValueError(
            f"selective scan shape mismatch: u{u.shape} delta{delta.shape} A{A.shape} B{B.shape} C{C.shape} D{D.shape}"
        )
    arrays = [np.ascontiguousarray(t.data, dtype=u.dtype) for t in (u, delta, A, B, C, D)]
    y, hs = _scan_forward(*arrays)

    def backward_fn(g):
        grads = _scan_backward(*arrays, hs, np.ascontiguousarray(g, dtype=u.dtype))
        return tuple(gr if p.requires_grad else None for gr, p in zip(grads, (u, delta, A, B, C, D)))

    return make_result(y, (u, delta, A, B, C, D), backward_fn, "selective_scan")


class SSMParams(nn.Module):
    """Learnable parameters of one selective scan over ``channels`` channels."""

    def __init__(self, rng: np.random.Generator, channels: int, state_dim: int):
        self.A_log = Tensor(
            np.log(rng.uniform(1.0, float(state_dim), size=(channels, state_dim))).astype(np.float32)
            if state_dim > 1 else np.zeros((channels, 1), np.float32),
            requires_grad=True,
        )
        self.D = nn.ones((channels,))
        self.dt_proj = nn.Linear(rng, channels, channels)
        # start with delta in roughly [1e-3, 1e-1] as in the Mamba lineage
        dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=channels))
        self.dt_proj.bias.data = (dt + np.log(-np.expm1(-dt))).astype(np.float32)
        self.B_proj = nn.Linear(rng, channels, state_dim, bias=False)
        self.C_proj = nn.Linear(rng, channels, state_dim, bias=False)

    @property
    def channels(self) -> int:
        return self.D.shape[0]

    @property
    def state_dim(self) -> int:
        return self.A_log.shape[1]


def selective_scan_1d(x: Tensor, params: SSMParams) -> Tensor:
    """Selective scan of an ``(L, C)`` sequence; returns ``(L, C)``. Causal."""
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError(f"expected a non-empty (L, C) sequence, got {x.shape}")
    if x.shape[1] != params.channels:
        raise ValueError(f"sequence has {x.shape[1]} channels, scan parameters expect {params.channels}")
    delta = ops.clamp_min(ops.softplus(params.dt_proj(x)), DELTA_FLOOR)
    assert np.all(delta.data > 0), "delta must be strictly positive"
    A = ops.neg(ops.exp(params.A_log))
    return selective_scan_core(x, delta, A, params.B_proj(x), params.C_proj(x), params.D)


class ScanDirection(enum.Enum):
    TL_BR = "tl_br"
    BR_TL = "br_tl"
    TR_BL = "tr_bl"
    BL_TR = "bl_tr"
    TEXT = "text"


SPATIAL_DIRECTIONS = (ScanDirection.TL_BR, ScanDirection.BR_TL, ScanDirection.TR_BL, ScanDirection.BL_TR)


def scan_order(h: int, w: int, direction: ScanDirection) -> np.ndarray:
    """Row-major grid indices in the order ``direction`` visits them."""
    if direction is ScanDirection.TEXT:
        raise ValueError("TEXT is not a spatial scan direction")
    grid = np.arange(h * w).reshape(h, w)
    if direction in (ScanDirection.TL_BR, ScanDirection.BR_TL):
        order = grid.reshape(-1)
    else:
        order = grid[:, ::-1].reshape(-1)
    if direction in (ScanDirection.BR_TL, ScanDirection.BL_TR):
        order = order[::-1]
    return order.copy()


def scan_flatten(fmap: Tensor, direction: ScanDirection) -> Tensor:
    h, w, c = fmap.shape
    order = scan_order(h, w, direction)
    return ops.take(ops.reshape(fmap, (h * w, c)), order, axis=0)


def scan_unflatten(seq: Tensor, direction: ScanDirection, h: int, w: int) -> Tensor:
    if seq.shape[0] != h * w:
        raise ValueError(f"sequence length {seq.shape[0]} != {h}*{w}")
    inverse = np.argsort(scan_order(h, w, direction))
    return ops.reshape(ops.take(seq, inverse, axis=0), (h, w, seq.shape[1]))


@dataclass
class ScanOutput:
    y1: Tensor
    y2: Tensor
    y3: Tensor
    y4: Tensor
    y_text: Tensor
    y: Tensor


def scan3d(
    image_feat: Tensor,
    text_feat: Tensor,
    spatial_params: Sequence[SSMParams],
    text_params: SSMParams,
) -> ScanOutput:
    """Four-direction image scan plus a text scan, summed.

    The text scan output is mean-pooled over tokens and broadcast to every
    grid position so it can be added to the spatial maps.
    """
    h, w, c = image_feat.shape
    if len(spatial_params) != 4:
        raise ValueError("need exactly four spatial parameter sets")
    if text_feat.ndim != 2 or text_feat.shape[1] != c:
        raise ValueError(f"text features {text_feat.shape} do not match {c} image channels")
    for p in (*spatial_params, text_params):
        if p.channels != c:
            raise ValueError(f"scan parameters have {p.channels} channels, features have {c}")
    ys = []
    for direction, params in zip(SPATIAL_DIRECTIONS, spatial_params):
        seq = selective_scan_1d(scan_flatten(image_feat, direction), params)
        ys.append(scan_unflatten(seq, direction, h, w))
    text_seq = selective_scan_1d(text_feat, text_params)
    y_text = ops.broadcast_to(ops.mean(text_seq, axis=0), (h, w, c))
    y = ops.add(ops.add(ops.add(ops.add(ys[0], ys[1]), ys[2]), ys[3]), y_text)
    return ScanOutput(ys[0], ys[1], ys[2], ys[3], y_text, y)
