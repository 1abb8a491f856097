"""Candidate scoring head trained over frozen rationale/behavior encoders."""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from pulse.core import autodiff as ad
from pulse.core import nn
from pulse.core.autodiff import Tensor, no_grad
from pulse.core.functional import argmax_first, cross_entropy
from pulse.core.optim import AdamWState, LrSchedule, adamw_step, lr_at_step
from pulse.core.params import ParamStore
from pulse.data import CandidateSet, ItemInfo
from pulse.errors import (InvalidArgument, MissingRationale, TrainingDiverged, UnknownItem,
                          UnsupportedByBackend)
from pulse.rationale.tot import RationaleTree
from pulse.text import tokenize
from pulse.thought_space import Selection, ThoughtSpace, candidate_text, history_text, select_leaf
from pulse.utils import derive_seed, write_jsonl

log = logging.getLogger(__name__)

N_CANDIDATES = 10


class SelectionMethod(str, enum.Enum):
    NONE = "none"
    BASE_REASON = "base_reason"
    TOT_LOGLIK = "tot_loglik"
    TOT_THOUGHT_SPACE = "tot_thought_space"
    # control arm: a uniformly random leaf of the same tree
    TOT_RANDOM = "tot_random"


@dataclass
class SftConfig:
    lr: float = 2e-4
    epochs: int = 20
    patience: int = 3
    hidden: int = 128
    train_batch: int = 1
    grad_accumulation: int = 1
    weight_decay: float = 0.01
    warmup_fraction: float = 0.10
    candidate_encoder: str = "e1"
    history_encoder: str = "e1"
    # carried for provenance only; the head has no adapters
    infer_batch: int = 2
    max_text_tokens: int = 512
    lora_rank: int = 8
    lora_alpha: int = 16
    lora_dropout: float = 0.05

    def __post_init__(self):
        if self.lr <= 0 or self.hidden < 1 or self.epochs < 1:
            raise InvalidArgument("lr, hidden and epochs must be positive")
        if self.patience < 1:
            raise InvalidArgument("patience must be >= 1")
        if self.train_batch != 1:
            raise InvalidArgument("training uses one example per step; use grad_accumulation")
        if self.grad_accumulation < 1:
            raise InvalidArgument("grad_accumulation must be >= 1")
        if self.candidate_encoder not in ("e1", "e2") or self.history_encoder not in ("e1", "e2"):
            raise InvalidArgument("candidate_encoder and history_encoder must be 'e1' or 'e2'")


@dataclass(frozen=True)
class SftExample:
    user_id: str
    history: tuple[str, ...]
    rationale: str
    candidates: CandidateSet

    @property
    def label(self) -> int:
        return self.candidates.ground_truth_index


# -- selection paths ------------------------------------------------------------
def ll_select(tree: RationaleTree, backend=None) -> Selection:
    """Leaf with the highest per-token log-likelihood.

    Uses the log-probability recorded at generation time, falling back to
    ``backend.loglik``; fails if neither is available.
    """
    def score(leaf) -> float:
        lp = leaf.logprob
        if lp is None:
            if backend is None:
                raise UnsupportedByBackend("leaf has no recorded logprob and no backend to score it")
            lp = backend.loglik(leaf.text)
        return lp / max(len(tokenize(leaf.text)), 1)

    return select_leaf(tree, score)


def random_select(tree: RationaleTree, seed: int) -> Selection:
    rng = np.random.default_rng(derive_seed(seed, "random-leaf", tree.user))
    k = int(rng.integers(tree.n * tree.m))
    i, j = divmod(k, tree.m)
    return Selection(tree.leaves[i][j], float("nan"), i, j)


def build_sft_dataset(histories: dict[str, Sequence[str]], candidates: dict[str, CandidateSet],
                      rationales: dict[str, str] | None, method: SelectionMethod | str,
                      users: Sequence[str] | None = None) -> list[SftExample]:
    """One example per user; ``rationales`` maps user -> chosen text for ``method``."""
    method = SelectionMethod(method)
    users = sorted(candidates) if users is None else list(users)
    out = []
    for user in users:
        if method is SelectionMethod.NONE:
            text = ""
        else:
            text = (rationales or {}).get(user)
            if not text:
                raise MissingRationale(f"no {method.value} rationale for user {user}")
        out.append(SftExample(user, tuple(histories[user]), text, candidates[user]))
    return out


# -- features -------------------------------------------------------------------------
@dataclass
class FeatureEncoder:
    """Frozen-encoder features [z_h; z_r; z_c; z_h*z_c; z_r*z_c] for each candidate."""
    ts: ThoughtSpace
    catalog: dict[str, ItemInfo]
    candidate_encoder: str = "e1"
    history_encoder: str = "e1"
    _cand: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.ts.frozen:
            raise InvalidArgument("feature encoders must be frozen")

    @property
    def dim(self) -> int:
        return 5 * self.ts.config.embed_dim

    def candidate(self, item: str) -> np.ndarray:
        z = self._cand.get(item)
        if z is None:
            info = self.catalog.get(item)
            if info is None:
                raise UnknownItem(f"item {item!r} missing from catalog")
            enc = self.ts.e1 if self.candidate_encoder == "e1" else self.ts.e2
            z = self._cand[item] = enc.encode(candidate_text(info))
        return z

    def features(self, ex: SftExample) -> np.ndarray:
        d = self.ts.config.embed_dim
        enc = self.ts.e1 if self.history_encoder == "e1" else self.ts.e2
        z_h = enc.encode(history_text(ex.history, self.catalog))
        z_r = self.ts.encode_rationale(ex.rationale) if ex.rationale else np.zeros(d, dtype=np.float32)
        z_c = np.stack([self.candidate(c) for c in ex.candidates.candidates])
        n = len(ex.candidates.candidates)
        return np.concatenate([np.broadcast_to(z_h, (n, d)), np.broadcast_to(z_r, (n, d)), z_c,
                               z_h * z_c, z_r * z_c], axis=1).astype(np.float32)

    def batch(self, examples: Sequence[SftExample]) -> np.ndarray:
        return np.stack([self.features(ex) for ex in examples]) if examples else np.zeros((0, 10, self.dim))


# -- head -------------------------------------------------------------------------
def init_head(in_dim: int, hidden: int, seed: int, dtype=np.float32) -> ParamStore:
    rng = np.random.default_rng(derive_seed(seed, "sft-head"))
    store = ParamStore()
    nn.add_linear(store, "head.l1", in_dim, hidden, rng)
    nn.add_linear(store, "head.l2", hidden, 1, rng)
    if dtype != np.float32:
        for _, t in store.items():
            t.data = t.data.astype(dtype)
    return store


def head_logits(head: ParamStore, feats) -> Tensor:
    """(..., 10, F) features -> (..., 10) logits; each candidate is scored on its own row."""
    x = feats if isinstance(feats, Tensor) else Tensor(feats)
    h = ad.relu(nn.linear(x, head, "head.l1"))
    out = nn.linear(h, head, "head.l2")
    return out.reshape(*out.shape[:-1])


def score_candidates(head: ParamStore, feats: np.ndarray) -> np.ndarray:
    with no_grad():
        return head_logits(head, feats).data


def sft_loss(logits, label: int) -> float:
    return cross_entropy(logits, label)


def predict_top1(logits) -> int:
    return argmax_first(logits)


@dataclass
class SftResult:
    head: ParamStore
    val_hr: list[float]
    train_loss: list[float]
    initial_loss: float
    best_epoch: int


def _hr(head: ParamStore, feats: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return 0.0
    logits = score_candidates(head, feats)
    return float(np.mean([argmax_first(row) == y for row, y in zip(logits, labels)]))


def _mean_loss(head: ParamStore, feats: np.ndarray, labels: np.ndarray) -> float:
    logits = score_candidates(head, feats)
    return float(np.mean([cross_entropy(row, y) for row, y in zip(logits, labels)]))


def train_sft(train_feats: np.ndarray, train_labels: Sequence[int], config: SftConfig, seed: int,
              val_feats: np.ndarray | None = None, val_labels: Sequence[int] | None = None) -> SftResult:
    """AdamW on the head only, one example per step, early stopping on validation HR@1."""
    labels = np.asarray(train_labels, dtype=np.int64)
    if len(labels) == 0:
        raise InvalidArgument("no training examples")
    head = init_head(train_feats.shape[-1], config.hidden, seed)
    has_val = val_feats is not None and val_labels is not None and len(val_labels) > 0
    vlabels = np.asarray(val_labels if has_val else [], dtype=np.int64)
    rng = np.random.default_rng(derive_seed(seed, "sft-order"))
    steps_per_epoch = -(-len(labels) // config.grad_accumulation)
    sched = LrSchedule(config.lr, config.epochs * steps_per_epoch, config.warmup_fraction)
    state = AdamWState(lr=config.lr, weight_decay=config.weight_decay)
    initial = _mean_loss(head, train_feats, labels)
    best, best_key, best_epoch, stale = head.snapshot(), None, -1, 0
    val_hr, losses = [], []
    for epoch in range(config.epochs):
        order = rng.permutation(len(labels))
        total = 0.0
        acc: dict[str, np.ndarray] = {}
        for k, idx in enumerate(order):
            loss = ad.cross_entropy(head_logits(head, train_feats[idx][None]), labels[idx:idx + 1])
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(f"SFT loss became {value} at epoch {epoch}")
            total += value
            for name, g in ad.grad(loss, head).items():
                acc[name] = acc[name] + g if name in acc else g
            if (k + 1) % config.grad_accumulation == 0 or k == len(order) - 1:
                n = config.grad_accumulation if (k + 1) % config.grad_accumulation == 0 else (k + 1) % config.grad_accumulation
                adamw_step(head, {name: g / n for name, g in acc.items()}, state,
                           lr=lr_at_step(sched, state.step + 1))
                acc = {}
        losses.append(total / len(labels))
        hr = _hr(head, val_feats, vlabels) if has_val else _hr(head, train_feats, labels)
        val_hr.append(hr)
        log.info("sft epoch %d loss %.4f val HR@1 %.4f", epoch, losses[-1], hr)
        tie = _mean_loss(head, val_feats, vlabels) if has_val else losses[-1]
        key = (hr, -tie)
        if best_key is None or key > best_key:
            best, best_key, best_epoch, stale = head.snapshot(), key, epoch, 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    head.restore(best)
    return SftResult(head, val_hr, losses, initial, best_epoch)


@dataclass(frozen=True)
class Prediction:
    user_id: str
    predicted_index: int
    ground_truth_index: int
    logits: tuple[float, ...]


def predict(head: ParamStore, examples: Sequence[SftExample], feats: np.ndarray) -> list[Prediction]:
    logits = score_candidates(head, feats)
    return [Prediction(ex.user_id, argmax_first(row), ex.label, tuple(float(x) for x in row))
            for ex, row in zip(examples, logits)]


def write_predictions(path: str | Path, preds: Sequence[Prediction]) -> None:
    write_jsonl(path, ({"user_id": p.user_id, "predicted_index": p.predicted_index,
                        "ground_truth_index": p.ground_truth_index,
                        "logits": list(p.logits)} for p in preds))
