"""Text encoder (phi) and image projector (psi).

Parameters live in flat ``dict[str, Tensor]`` maps with dotted names
(``text.gru.l0.W_ih``); every forward function takes the map and reads the
keys it needs, so a model is just the union of its parts' maps.

Recurrent weights follow the PyTorch gate layout: GRU stacks (r, z, n)
along the output axis, LSTM stacks (i, f, g, o). Weights are stored
input-major, ``x @ W``.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Mapping

import numpy as np

from . import numkernel as nk
from .numkernel import ShapeError, Tensor

Params = dict[str, Tensor]


class TextVariant(str, Enum):
    SWEM = "SWEM"
    LSTM = "LSTM"
    GRU = "GRU"
    LSTM_PLUS_GRU = "LSTM_PLUS_GRU"


@dataclass(frozen=True)
class TextEncoderConfig:
    variant: TextVariant = TextVariant.LSTM_PLUS_GRU
    e_word: int = 32
    hidden: int = 32
    layers: int = 2
    out_dim: int = 64

    def __post_init__(self):
        object.__setattr__(self, "variant", TextVariant(self.variant))
        if min(self.e_word, self.hidden, self.layers, self.out_dim) < 1:
            raise ValueError("text encoder sizes must be >= 1")

    @property
    def pooled_dim(self) -> int:
        if self.variant is TextVariant.SWEM:
            return 2 * self.e_word
        if self.variant is TextVariant.LSTM_PLUS_GRU:
            return 2 * self.hidden
        return self.hidden


@dataclass(frozen=True)
class ImageProjectorConfig:
    in_dim: int
    hidden: int = 64
    out_dim: int = 64


def uniform_fan_in(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def linear_params(prefix, fan_in, fan_out, rng) -> Params:
    return {
        f"{prefix}.W": Tensor(uniform_fan_in(rng, fan_in, (fan_in, fan_out)), True, f"{prefix}.W"),
        f"{prefix}.b": Tensor(np.zeros(fan_out), True, f"{prefix}.b"),
    }


def linear(x, params: Mapping[str, Tensor], prefix) -> Tensor:
    return nk.add(nk.matmul(x, params[f"{prefix}.W"]), params[f"{prefix}.b"])


def mlp2(x, params, prefix) -> Tensor:
    """linear -> relu -> linear"""
    return linear(nk.relu(linear(x, params, f"{prefix}.0")), params, f"{prefix}.1")


def mlp2_params(prefix, fan_in, hidden, fan_out, rng) -> Params:
    return {**linear_params(f"{prefix}.0", fan_in, hidden, rng),
            **linear_params(f"{prefix}.1", hidden, fan_out, rng)}


# ---------------------------------------------------------------------------
# Embedding and pooling
# ---------------------------------------------------------------------------

def embedding_table(vocab_size, e_word, rng, pretrained: Mapping[int, np.ndarray] | None = None,
                    random_scale: float | None = None) -> Tensor:
    """Vocabulary-size x e_word table.

    Rows named in ``pretrained`` copy those vectors and the remaining rows
    draw from uniform(-0.05, 0.05). Without pretrained vectors all rows are
    standard normal unless ``random_scale`` is given.
    """
    if pretrained:
        table = rng.uniform(-0.05, 0.05, size=(vocab_size, e_word))
        for row, vec in pretrained.items():
            if len(vec) != e_word:
                raise ShapeError(f"pretrained vector width {len(vec)} != e_word {e_word}")
            table[row] = vec
    elif random_scale is not None:
        table = rng.uniform(-random_scale, random_scale, size=(vocab_size, e_word))
    else:
        table = rng.standard_normal((vocab_size, e_word))
    return Tensor(table, True, "text.embed")


def read_embedding_file(path) -> dict[str, np.ndarray]:
    """``word<TAB>v1,...,ve`` lines."""
    out = {}
    width = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            word, _, raw = line.rstrip("\n").partition("\t")
            try:
                vec = np.array([float(v) for v in raw.split(",")])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: bad embedding values") from None
            if width is not None and vec.size != width:
                raise ShapeError(f"{path}:{lineno}: width {vec.size} != {width}")
            width = vec.size
            out[word] = vec
    return out


def embed(ids, table: Tensor) -> Tensor:
    """Rows of ``table`` for each index; ids may be (L,) or (B, L)."""
    return nk.take_rows(table, ids)


def swem_encode(E: Tensor, mask) -> Tensor:
    """concat(mean over unmasked rows, max over unmasked rows).

    ``E`` is (L, e) with mask (L,), or (B, L, e) with mask (B, L).
    """
    mask = np.asarray(mask, dtype=np.float64)
    counts = mask.sum(axis=-1, keepdims=True)
    if np.any(counts == 0):
        raise ValueError("swem_encode: every row is masked")
    m = mask[..., None]
    mean = nk.hadamard(nk.reduce_sum(nk.hadamard(E, m), axis=-2), 1.0 / counts)
    mx = nk.masked_max(E, m > 0, axis=-2)
    return nk.concat([mean, mx], axis=-1)


# ---------------------------------------------------------------------------
# Recurrent encoders
# ---------------------------------------------------------------------------

def gru_params(prefix, e_in, hidden, layers, rng) -> Params:
    p = {}
    for layer in range(layers):
        fan_in = e_in if layer == 0 else hidden
        base = f"{prefix}.l{layer}"
        p[f"{base}.W_ih"] = Tensor(uniform_fan_in(rng, fan_in, (fan_in, 3 * hidden)), True)
        p[f"{base}.W_hh"] = Tensor(uniform_fan_in(rng, hidden, (hidden, 3 * hidden)), True)
        p[f"{base}.b_ih"] = Tensor(np.zeros(3 * hidden), True)
        p[f"{base}.b_hh"] = Tensor(np.zeros(3 * hidden), True)
    return p


def lstm_params(prefix, e_in, hidden, layers, rng) -> Params:
    p = {}
    for layer in range(layers):
        fan_in = e_in if layer == 0 else hidden
        base = f"{prefix}.l{layer}"
        p[f"{base}.W_ih"] = Tensor(uniform_fan_in(rng, fan_in, (fan_in, 4 * hidden)), True)
        p[f"{base}.W_hh"] = Tensor(uniform_fan_in(rng, hidden, (hidden, 4 * hidden)), True)
        p[f"{base}.b"] = Tensor(np.zeros(4 * hidden), True)
    return p


def _n_layers(params, prefix):
    n = 0
    while f"{prefix}.l{n}.W_ih" in params:
        n += 1
    if n == 0:
        raise ShapeError(f"no recurrent layers under {prefix!r}")
    return n


def _as_batch(E, mask):
    mask = np.asarray(mask, dtype=np.float64)
    single = E.value.ndim == 2
    if single:
        E = nk.reshape(E, (1,) + E.shape)
        mask = mask[None, :]
    if mask.shape != E.shape[:2]:
        raise ShapeError(f"mask shape {mask.shape} does not match sequence {E.shape[:2]}")
    return E, mask, single


def gru_forward(E: Tensor, mask, params: Params, prefix="text.gru") -> Tensor:
    """Top-layer hidden state at the last unmasked step.

    Masked steps carry the previous state through unchanged, so padding
    anywhere in the sequence has no effect.
    """
    E, mask, single = _as_batch(E, mask)
    batch, length = mask.shape
    xs = [nk.getitem(E, (slice(None), t, slice(None))) for t in range(length)]
    for layer in range(_n_layers(params, prefix)):
        base = f"{prefix}.l{layer}"
        W_ih, W_hh = params[f"{base}.W_ih"], params[f"{base}.W_hh"]
        b_ih, b_hh = params[f"{base}.b_ih"], params[f"{base}.b_hh"]
        H = W_hh.shape[0]
        if xs[0].shape[-1] != W_ih.shape[0]:
            raise ShapeError(f"{base}: input width {xs[0].shape[-1]} != {W_ih.shape[0]}")
        h = Tensor(np.zeros((batch, H)))
        outs = []
        for t, x in enumerate(xs):
            gi = nk.add(nk.matmul(x, W_ih), b_ih)
            gh = nk.add(nk.matmul(h, W_hh), b_hh)
            r = nk.sigmoid(nk.add(gi[:, :H], gh[:, :H]))
            z = nk.sigmoid(nk.add(gi[:, H:2 * H], gh[:, H:2 * H]))
            n = nk.tanh(nk.add(gi[:, 2 * H:], nk.hadamard(r, gh[:, 2 * H:])))
            h_new = nk.add(n, nk.hadamard(z, nk.sub(h, n)))
            h = nk.add(h, nk.hadamard(mask[:, t:t + 1], nk.sub(h_new, h)))
            outs.append(h)
        xs = outs
    return xs[-1][0] if single else xs[-1]


def lstm_forward(E: Tensor, mask, params: Params, prefix="text.lstm") -> Tensor:
    E, mask, single = _as_batch(E, mask)
    batch, length = mask.shape
    xs = [nk.getitem(E, (slice(None), t, slice(None))) for t in range(length)]
    for layer in range(_n_layers(params, prefix)):
        base = f"{prefix}.l{layer}"
        W_ih, W_hh, b = params[f"{base}.W_ih"], params[f"{base}.W_hh"], params[f"{base}.b"]
        H = W_hh.shape[0]
        if xs[0].shape[-1] != W_ih.shape[0]:
            raise ShapeError(f"{base}: input width {xs[0].shape[-1]} != {W_ih.shape[0]}")
        h = Tensor(np.zeros((batch, H)))
        c = Tensor(np.zeros((batch, H)))
        outs = []
        for t, x in enumerate(xs):
            gates = nk.add(nk.add(nk.matmul(x, W_ih), nk.matmul(h, W_hh)), b)
            i = nk.sigmoid(gates[:, :H])
            f = nk.sigmoid(gates[:, H:2 * H])
            g = nk.tanh(gates[:, 2 * H:3 * H])
            o = nk.sigmoid(gates[:, 3 * H:])
            c_new = nk.add(nk.hadamard(f, c), nk.hadamard(i, g))
            h_new = nk.hadamard(o, nk.tanh(c_new))
            m = mask[:, t:t + 1]
            c = nk.add(c, nk.hadamard(m, nk.sub(c_new, c)))
            h = nk.add(h, nk.hadamard(m, nk.sub(h_new, h)))
            outs.append(h)
        xs = outs
    return xs[-1][0] if single else xs[-1]


# ---------------------------------------------------------------------------
# phi and psi
# ---------------------------------------------------------------------------

def text_encoder_params(cfg: TextEncoderConfig, vocab_size, rng,
                        pretrained: Mapping[int, np.ndarray] | None = None) -> Params:
    p = {"text.embed": embedding_table(vocab_size, cfg.e_word, rng, pretrained)}
    if cfg.variant in (TextVariant.LSTM, TextVariant.LSTM_PLUS_GRU):
        p.update(lstm_params("text.lstm", cfg.e_word, cfg.hidden, cfg.layers, rng))
    if cfg.variant in (TextVariant.GRU, TextVariant.LSTM_PLUS_GRU):
        p.update(gru_params("text.gru", cfg.e_word, cfg.hidden, cfg.layers, rng))
    p.update(linear_params("text.proj", cfg.pooled_dim, cfg.out_dim, rng))
    return p


def text_pool(ids, mask, cfg: TextEncoderConfig, params: Params) -> Tensor:
    """Encoding before the output projection (width ``cfg.pooled_dim``)."""
    E = embed(ids, params["text.embed"])
    if cfg.variant is TextVariant.SWEM:
        return swem_encode(E, mask)
    if cfg.variant is TextVariant.LSTM:
        return lstm_forward(E, mask, params)
    if cfg.variant is TextVariant.GRU:
        return gru_forward(E, mask, params)
    return nk.concat([lstm_forward(E, mask, params), gru_forward(E, mask, params)], axis=-1)


def text_encode(ids, mask, cfg: TextEncoderConfig, params: Params) -> Tensor:
    return linear(text_pool(ids, mask, cfg, params), params, "text.proj")


def image_projector_params(cfg: ImageProjectorConfig, rng, prefix="image") -> Params:
    return mlp2_params(prefix, cfg.in_dim, cfg.hidden, cfg.out_dim, rng)


def image_project(x, params: Params, prefix="image") -> Tensor:
    x = nk.as_tensor(x)
    expected = params[f"{prefix}.0.W"].shape[0]
    if x.shape[-1] != expected:
        raise ShapeError(f"image feature width {x.shape[-1]} != projector input {expected}")
    return mlp2(x, params, prefix)
