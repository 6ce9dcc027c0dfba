"""Composition heads: Text-only, TIRG, RTIC and the IR-match regression loss.

All heads take batched ``(B, d)`` tensors (a single ``(d,)`` vector also
works) and return the composed feature before any l2 normalization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkernel as nk
from .encoders import Params, linear_params, mlp2, mlp2_params
from .numkernel import ShapeError, Tensor


@dataclass(frozen=True)
class RticConfig:
    d: int = 64
    n_blocks: int = 4
    block_hidden: int = 64

    def __post_init__(self):
        if self.d < 1 or self.n_blocks < 1 or self.block_hidden < 1:
            raise ValueError("RTIC sizes must be >= 1")


@dataclass
class ComposerOutput:
    f_composed: Tensor
    residual: Tensor
    attention: np.ndarray | None = None

    def attention_bank(self, row: int = 0) -> np.ndarray:
        """Gate scores for one query as a d x N matrix (column i gates block i)."""
        A = self.attention
        if A.ndim == 3:
            A = A[row]
        return A.T


def _check_pair(f_I, f_T, d=None):
    if f_I.shape != f_T.shape:
        raise ShapeError(f"image {f_I.shape} and text {f_T.shape} features differ in shape")
    if d is not None and f_I.shape[-1] != d:
        raise ShapeError(f"feature width {f_I.shape[-1]} != configured d {d}")


# ---------------------------------------------------------------------------
# Text-only
# ---------------------------------------------------------------------------

def text_only_params(d, rng) -> Params:
    return mlp2_params("compose.text_only", d, max(1, d // 2), d, rng)


def compose_text_only(f_T, params: Params) -> Tensor:
    f_T = nk.as_tensor(f_T)
    expected = params["compose.text_only.0.W"].shape[0]
    if f_T.shape[-1] != expected:
        raise ShapeError(f"text feature width {f_T.shape[-1]} != {expected}")
    return mlp2(f_T, params, "compose.text_only")


# ---------------------------------------------------------------------------
# TIRG
# ---------------------------------------------------------------------------

def tirg_params(d, rng, hidden=None) -> Params:
    hidden = hidden or 2 * d
    p = {**mlp2_params("compose.tirg.gate", 2 * d, hidden, d, rng),
         **mlp2_params("compose.tirg.res", 2 * d, hidden, d, rng)}
    p["compose.tirg.w_gate"] = Tensor(np.array([1.0]), True)
    p["compose.tirg.w_res"] = Tensor(np.array([0.1]), True)
    return p


def compose_tirg(f_I, f_T, params: Params) -> Tensor:
    f_I, f_T = nk.as_tensor(f_I), nk.as_tensor(f_T)
    _check_pair(f_I, f_T)
    x = nk.concat([f_I, f_T], axis=-1)
    gate = nk.hadamard(nk.sigmoid(mlp2(x, params, "compose.tirg.gate")), f_I)
    res = mlp2(x, params, "compose.tirg.res")
    return nk.add(nk.hadamard(params["compose.tirg.w_gate"], gate),
                  nk.hadamard(params["compose.tirg.w_res"], res))


# ---------------------------------------------------------------------------
# RTIC
# ---------------------------------------------------------------------------

def rtic_params(cfg: RticConfig, rng) -> Params:
    d = cfg.d
    p = linear_params("compose.rtic.attn", 2 * d, d * cfg.n_blocks, rng)
    for i in range(cfg.n_blocks):
        p.update(mlp2_params(f"compose.rtic.block{i}", 2 * d, cfg.block_hidden, d, rng))
    return p


def _n_blocks(params):
    n = 0
    while f"compose.rtic.block{n}.0.W" in params:
        n += 1
    return n


def rtic_attention(f_I, f_T, params: Params) -> Tensor:
    """Sigmoid gate scores, laid out (..., N*d): block i owns [i*d, (i+1)*d)."""
    f_I, f_T = nk.as_tensor(f_I), nk.as_tensor(f_T)
    _check_pair(f_I, f_T)
    logits = nk.add(nk.matmul(nk.concat([f_I, f_T], axis=-1), params["compose.rtic.attn.W"]),
                    params["compose.rtic.attn.b"])
    return nk.sigmoid(logits)


def compose_rtic(f_I, f_T, params: Params, attention=None) -> ComposerOutput:
    """Chain of gated residual blocks starting from the candidate feature.

    Block i sees ``x_i = A_i * f_{i-1}`` next to the text feature, and its
    MLP output is gated by ``A_i`` again before being added to the running
    feature. ``attention`` replaces the learned gates (same layout as
    :func:`rtic_attention`) when given.
    """
    f_I, f_T = nk.as_tensor(f_I), nk.as_tensor(f_T)
    _check_pair(f_I, f_T)
    d = f_I.shape[-1]
    n_blocks = _n_blocks(params)
    A = rtic_attention(f_I, f_T, params) if attention is None else nk.as_tensor(attention)
    if A.shape[-1] != n_blocks * d:
        raise ShapeError(f"attention width {A.shape[-1]} != N*d = {n_blocks * d}")
    f = f_I
    for i in range(n_blocks):
        a_i = A[..., i * d:(i + 1) * d]
        x_i = nk.hadamard(a_i, f)
        r_i = mlp2(nk.concat([x_i, f_T], axis=-1), params, f"compose.rtic.block{i}")
        f = nk.add(f, nk.hadamard(a_i, r_i))
    gates = A.value.reshape(A.shape[:-1] + (n_blocks, d))
    return ComposerOutput(f, nk.sub(f, f_I), gates)


# ---------------------------------------------------------------------------
# IR-match
# ---------------------------------------------------------------------------

def ir_match_loss(f, f_ir) -> Tensor:
    """MSE between l2-normalized ``f`` and l2-normalized ``f_ir`` (mean over all entries)."""
    f, f_ir = nk.as_tensor(f), nk.as_tensor(f_ir)
    if f.shape != f_ir.shape:
        raise ShapeError(f"composed {f.shape} and IR {f_ir.shape} features differ in shape")
    diff = nk.sub(nk.l2_normalize(f), nk.l2_normalize(f_ir))
    return nk.reduce_mean(nk.hadamard(diff, diff))
