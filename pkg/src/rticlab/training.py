"""Batch-hard triplet training with AdamW and a step-decay schedule."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import numkernel as nk
from .composers import ir_match_loss
from .datastore import FeatureStore, TripletRecord
from .model import RetrievalModel, rng_for
from .numkernel import NumericError, Tape, Tensor
from .textprep import CLS, SEP, Vocabulary, pad_batch, spell_correct, tokenize, TokenSequence

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.00011148
    beta1: float = 0.47
    beta2: float = 0.999
    weight_decay: float = 0.01
    batch_size: int = 32
    epochs: int = 80
    lr_decay: float = 0.474
    decay_every: int = 10
    image_lr_factor: float = 0.48
    margin: float = 0.2
    optimizer: str = "ADAMW"
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 so every anchor has negatives")
        if self.epochs < 0 or self.decay_every < 1:
            raise ValueError("epochs must be >= 0 and decay_every >= 1")
        if self.optimizer not in ("ADAMW", "SGD"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def pairwise_cosine_distance(Q, G) -> Tensor:
    """``D[i, j] = 1 - cos(Q_i, G_j)``."""
    Qn = nk.l2_normalize(Q, axis=-1)
    Gn = nk.l2_normalize(G, axis=-1)
    return nk.sub(1.0, nk.matmul(Qn, nk.transpose(Gn)))


def negative_mask(n: int, target_ids: Sequence[str] | None = None) -> np.ndarray:
    """``mask[i, j]`` is true when target j may serve as a negative for anchor i."""
    if target_ids is None:
        return ~np.eye(n, dtype=bool)
    ids = np.asarray(target_ids, dtype=object)
    return ids[:, None] != ids[None, :]


def batch_hard_terms(composed, targets, margin: float,
                     target_ids: Sequence[str] | None = None) -> Tensor:
    """Per-anchor hinge ``max(0, D_ii - min_neg D_ij + margin)``.

    Anchors without any admissible negative contribute exactly zero.
    """
    composed, targets = nk.as_tensor(composed), nk.as_tensor(targets)
    n = composed.shape[0]
    if n < 2:
        raise ValueError("batch-hard mining needs at least 2 rows")
    D = pairwise_cosine_distance(composed, targets)
    pos = nk.reduce_sum(nk.hadamard(D, np.eye(n)), axis=1)
    neg_ok = negative_mask(n, target_ids)
    valid = neg_ok.any(axis=1)
    neg_ok = neg_ok | ~valid[:, None]
    hardest = nk.scalar_mul(nk.masked_max(nk.scalar_mul(D, -1.0), neg_ok, axis=1), -1.0)
    hinge = nk.relu(nk.add(nk.sub(pos, hardest), margin))
    if valid.all():
        return hinge
    return nk.hadamard(hinge, valid.astype(np.float64))


def batch_hard_triplet_loss(composed, targets, margin: float = 0.2,
                            target_ids: Sequence[str] | None = None) -> Tensor:
    return nk.reduce_mean(batch_hard_terms(composed, targets, margin, target_ids))


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------

def lr_at_epoch(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr * cfg.lr_decay ** (epoch // cfg.decay_every)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(params: Mapping[str, Tensor], state: OptimizerState, cfg: TrainConfig,
               lr: float, group_scale: Mapping[str, float] | None = None):
    """One decoupled-weight-decay Adam update using each parameter's ``grad``."""
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    bc1, bc2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for name, p in params.items():
        g = np.zeros_like(p.value) if p.grad is None else p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        denom = v / bc2
        np.sqrt(denom, out=denom)
        denom += 1e-8
        lr_eff = lr * (group_scale.get(name, 1.0) if group_scale else 1.0)
        # theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * theta
        step = m / denom
        step *= lr_eff / bc1
        p.value *= 1.0 - lr_eff * cfg.weight_decay
        p.value -= step


def sgd_step(params: Mapping[str, Tensor], state: OptimizerState, cfg: TrainConfig,
             lr: float, group_scale: Mapping[str, float] | None = None):
    """SGD with momentum and coupled L2 weight decay."""
    state.step += 1
    for name, p in params.items():
        g = np.zeros_like(p.value) if p.grad is None else p.grad
        g = g + cfg.weight_decay * p.value
        buf = state.m.get(name)
        if buf is None:
            buf = state.m[name] = g.copy()
        else:
            buf *= cfg.momentum
            buf += g
        lr_eff = lr * (group_scale.get(name, 1.0) if group_scale else 1.0)
        p.value = p.value - lr_eff * buf


# ---------------------------------------------------------------------------
# Caption encoding with per-epoch shuffling
# ---------------------------------------------------------------------------

def caption_seed(seed: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), 2, int(epoch), int(index)]).generate_state(1)[0])


class CaptionCache:
    """Per-caption token ids, corrected once; joining mirrors ``encode_captions``."""

    def __init__(self, vocab: Vocabulary, correct: bool = True,
                 reference: Vocabulary | None = None,
                 overrides: Mapping[str, str] | None = None):
        self.vocab = vocab
        self.correct = correct
        self.reference = reference if reference is not None else vocab
        self.overrides = overrides
        self._memo: dict[str, list[int]] = {}

    def caption_ids(self, caption: str) -> list[int]:
        ids = self._memo.get(caption)
        if ids is None:
            toks = tokenize(caption)
            if self.correct:
                toks = [spell_correct(t, self.reference, self.overrides) for t in toks]
            ids = self._memo[caption] = [self.vocab.lookup(t) for t in toks]
        return ids

    def encode(self, captions: Sequence[str], shuffle_seed: int | None = None) -> TokenSequence:
        order = list(captions)
        if shuffle_seed is not None:
            perm = np.random.default_rng(shuffle_seed).permutation(len(order))
            order = [order[i] for i in perm]
        ids = [self.vocab.index[CLS]]
        for n, caption in enumerate(order):
            if n:
                ids.append(self.vocab.index[SEP])
            ids.extend(self.caption_ids(caption))
        return TokenSequence(tuple(ids), len(order))


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainingData:
    features: FeatureStore
    triplets: list[TripletRecord]
    captions: CaptionCache
    ir_features: FeatureStore | None = None


def batch_loss(model: RetrievalModel, data: TrainingData, batch: Sequence[TripletRecord],
               seqs: Sequence[TokenSequence], margin: float) -> Tensor:
    ids, mask = pad_batch(seqs)
    x_c = data.features.matrix([r.candidate_id for r in batch])
    x_t = data.features.matrix([r.target_id for r in batch])
    composed = model.query(x_c, ids, mask)
    if model.cfg.kind == "ir_match":
        ir_c = data.ir_features.matrix([r.candidate_id for r in batch])
        ir_t = data.ir_features.matrix([r.target_id for r in batch])
        return nk.add(nk.add(ir_match_loss(model.image(x_c), ir_c),
                             ir_match_loss(model.image(x_t), ir_t)),
                      ir_match_loss(composed, ir_t))
    targets = model.gallery(x_t)
    return batch_hard_triplet_loss(composed, targets, margin, [r.target_id for r in batch])


def train_run(model: RetrievalModel, data: TrainingData, cfg: TrainConfig,
              config_hash: str = "") -> list[dict]:
    """Train ``model`` in place; returns one metrics record per optimizer step."""
    train = [r for r in data.triplets if r.split == "train"]
    if len(train) < cfg.batch_size:
        raise ValueError(f"{len(train)} training triplets < batch size {cfg.batch_size}")
    if model.cfg.kind == "ir_match":
        if data.ir_features is None:
            raise ValueError("ir_match training needs IR features")
        if data.ir_features.dim != model.cfg.embed_dim:
            raise ValueError(f"IR feature dim {data.ir_features.dim} != embed_dim "
                             f"{model.cfg.embed_dim}")
    shuffle_rng = rng_for(cfg.seed, "shuffle")
    scale = {n: cfg.image_lr_factor for n in model.image_group()}
    step_fn = adamw_step if cfg.optimizer == "ADAMW" else sgd_step
    state = OptimizerState()
    records = []
    n_batches = len(train) // cfg.batch_size
    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(epoch, cfg)
        order = shuffle_rng.permutation(len(train))
        for b in range(n_batches):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            batch = [train[i] for i in idx]
            seqs = [data.captions.encode(r.captions, caption_seed(cfg.seed, epoch, int(i)))
                    for r, i in zip(batch, idx)]
            for p in model.params.values():
                p.zero_grad()
            try:
                with Tape() as tape:
                    loss = batch_loss(model, data, batch, seqs, cfg.margin)
                    tape.backward(loss)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch} batch {b}: {exc}") from None
            step_fn(model.params, state, cfg, lr, scale)
            rec = {"epoch": epoch, "step": state.step, "loss": float(loss.value), "lr": lr}
            if config_hash:
                rec["config_hash"] = config_hash
            records.append(rec)
        if records:
            log.info("epoch %d  loss %.5f  lr %.3g", epoch, records[-1]["loss"], lr)
    return records


def write_metrics_log(records: Sequence[dict], path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
