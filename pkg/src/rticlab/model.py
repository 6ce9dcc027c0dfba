"""A full single model: image projector, text encoder and one composer."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from . import composers, encoders
from .encoders import ImageProjectorConfig, Params, TextEncoderConfig, TextVariant
from .numkernel import Tensor

MODEL_KINDS = ("text_only", "tirg", "rtic", "ir_match")
STREAMS = {"data": 0, "init": 1, "shuffle": 2, "tpe": 3, "eval": 4}


def rng_for(seed: int, stream: str, *extra: int) -> np.random.Generator:
    """Independent generator for one named randomness stream."""
    return np.random.default_rng([int(seed), STREAMS[stream], *extra])


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "rtic"
    embed_dim: int = 64
    text_variant: str = "LSTM_PLUS_GRU"
    e_word: int = 32
    text_hidden: int = 32
    text_layers: int = 2
    image_hidden: int = 64
    rtic_blocks: int = 4
    rtic_hidden: int = 64
    ir_base: str = "rtic"

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {MODEL_KINDS}")
        if self.ir_base not in ("tirg", "rtic"):
            raise ValueError("ir_base must be 'tirg' or 'rtic'")
        TextVariant(self.text_variant)

    def text_config(self) -> TextEncoderConfig:
        return TextEncoderConfig(TextVariant(self.text_variant), self.e_word, self.text_hidden,
                                 self.text_layers, self.embed_dim)

    def rtic_config(self) -> composers.RticConfig:
        return composers.RticConfig(self.embed_dim, self.rtic_blocks, self.rtic_hidden)

    @property
    def composer(self) -> str:
        return self.ir_base if self.kind == "ir_match" else self.kind

    def to_dict(self):
        return asdict(self)


class RetrievalModel:
    """Parameters plus the forward passes for queries and gallery items."""

    def __init__(self, cfg: ModelConfig, params: Params):
        self.cfg = cfg
        self.params = params
        self.text_cfg = cfg.text_config()

    @classmethod
    def initialize(cls, cfg: ModelConfig, vocab_size: int, image_dim: int, rng,
                   pretrained: Mapping[int, np.ndarray] | None = None) -> "RetrievalModel":
        d = cfg.embed_dim
        params = {}
        params.update(encoders.image_projector_params(
            ImageProjectorConfig(image_dim, cfg.image_hidden, d), rng))
        params.update(encoders.text_encoder_params(cfg.text_config(), vocab_size, rng, pretrained))
        if cfg.composer == "text_only":
            params.update(composers.text_only_params(d, rng))
        elif cfg.composer == "tirg":
            params.update(composers.tirg_params(d, rng))
        else:
            params.update(composers.rtic_params(cfg.rtic_config(), rng))
        for name, t in params.items():
            t.name = name
            t.requires_grad = True
        return cls(cfg, params)

    def image(self, x) -> Tensor:
        return encoders.image_project(x, self.params)

    def text(self, ids, mask) -> Tensor:
        return encoders.text_encode(ids, mask, self.text_cfg, self.params)

    def compose(self, f_I, f_T) -> Tensor:
        kind = self.cfg.composer
        if kind == "text_only":
            return composers.compose_text_only(f_T, self.params)
        if kind == "tirg":
            return composers.compose_tirg(f_I, f_T, self.params)
        return composers.compose_rtic(f_I, f_T, self.params).f_composed

    def query(self, x_candidate, ids, mask) -> Tensor:
        f_T = self.text(ids, mask)
        if self.cfg.composer == "text_only":
            return self.compose(None, f_T)
        return self.compose(self.image(x_candidate), f_T)

    def gallery(self, x) -> Tensor:
        return self.image(x)

    def image_group(self) -> list[str]:
        return [n for n in self.params if n.startswith("image.")]
