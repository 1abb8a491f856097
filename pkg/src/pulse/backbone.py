"""Causal self-attention next-item model over item-id sequences."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from pulse.core import autodiff as ad
from pulse.core import nn
from pulse.core.autodiff import Tensor, no_grad
from pulse.core.functional import argmax_first
from pulse.core.optim import AdamWState, LrSchedule, adamw_step, lr_at_step
from pulse.core.params import ParamStore
from pulse.data import CandidateSet, DatasetSplit, build_candidate_sets, window_sequence
from pulse.errors import InvalidArgument, TrainingDiverged, UnknownItem
from pulse.utils import read_json, write_json, write_jsonl

log = logging.getLogger(__name__)

PAD = 0


@dataclass
class BackboneConfig:
    embed_dim: int = 64
    n_layers: int = 2
    n_heads: int = 2
    max_len: int = 50
    dropout: float = 0.2
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.0
    warmup_fraction: float = 0.10
    patience: int = 3

    def __post_init__(self):
        if self.embed_dim % self.n_heads:
            raise InvalidArgument("embed_dim must be divisible by n_heads")
        if self.max_len < 1 or self.n_layers < 1 or self.epochs < 1 or self.batch_size < 1:
            raise InvalidArgument("max_len, n_layers, epochs and batch_size must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidArgument("dropout must lie in [0, 1)")


@dataclass
class ContextState:
    hidden: np.ndarray  # (seq_len, d)

    @property
    def final(self) -> np.ndarray:
        return self.hidden[-1]


@dataclass
class Backbone:
    config: BackboneConfig
    items: list[str]
    params: ParamStore
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.index = {it: k + 1 for k, it in enumerate(self.items)}

    @property
    def n_items(self) -> int:
        return len(self.items)

    def encode_ids(self, seq: Sequence[str]) -> list[int]:
        out = []
        for it in seq:
            k = self.index.get(it)
            if k is None:
                raise UnknownItem(f"item {it!r} is not in the backbone vocabulary")
            out.append(k)
        return out

    def known(self, item: str) -> bool:
        return item in self.index


def init_backbone(items: Iterable[str], config: BackboneConfig, seed: int) -> Backbone:
    items = sorted(set(items))
    rng = np.random.default_rng(seed)
    d = config.embed_dim
    store = ParamStore()
    emb = (rng.normal(0, 1.0 / np.sqrt(d), size=(len(items) + 1, d))).astype(np.float32)
    emb[PAD] = 0.0
    store.add("item_emb", emb)
    store.add("pos_emb", (rng.normal(0, 0.02, size=(config.max_len, d))).astype(np.float32))
    for layer in range(config.n_layers):
        nn.add_block(store, f"blk{layer}", d, rng)
    nn.add_layer_norm(store, "ln_f", d)
    return Backbone(config, items, store)


def _pack(model: Backbone, seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Left-pad id sequences; positions count from each sequence's first real item."""
    length = max(len(s) for s in seqs)
    ids = np.zeros((len(seqs), length), dtype=np.int64)
    pos = np.zeros_like(ids)
    mask = np.zeros((len(seqs), length), dtype=bool)
    for r, s in enumerate(seqs):
        pad = length - len(s)
        ids[r, pad:] = s
        pos[r, pad:] = np.arange(len(s))
        mask[r, pad:] = True
    return ids, pos, mask


def _hidden(model: Backbone, ids: np.ndarray, pos: np.ndarray, mask: np.ndarray,
            rng=None, training: bool = False) -> Tensor:
    cfg, p = model.config, model.params
    x = ad.take(p["item_emb"], ids) * np.sqrt(cfg.embed_dim) + ad.take(p["pos_emb"], pos)
    x = x * Tensor(mask[..., None].astype(np.float32))
    x = ad.dropout(x, cfg.dropout, rng, training)
    bias = nn.attention_bias(mask, causal=True)
    for layer in range(cfg.n_layers):
        x = nn.block(x, p, f"blk{layer}", cfg.n_heads, bias, cfg.dropout, rng, training)
    return nn.layer_norm(x, p, "ln_f")


def _item_logits(model: Backbone, h: Tensor) -> Tensor:
    table = model.params["item_emb"][1:]
    return h @ table.T


def forward_next_item(model: Backbone, seq: Sequence[str]) -> tuple[np.ndarray, ContextState]:
    """Per-position logits over real items (column k is ``model.items[k]``) and hidden states."""
    if not 1 <= len(seq) <= model.config.max_len:
        raise InvalidArgument(f"sequence length must be in [1, {model.config.max_len}]")
    ids = model.encode_ids(seq)
    with no_grad():
        h = _hidden(model, *_pack(model, [ids]))
        logits = _item_logits(model, h)
    return logits.data[0], ContextState(h.data[0])


def next_item_scores(model: Backbone, history: Sequence[str]) -> np.ndarray:
    """Final-position logits for the item after ``history`` (windowed)."""
    logits, _ = forward_next_item(model, window_sequence(list(history), model.config.max_len))
    return logits[-1]


def score_candidates(model: Backbone, history: Sequence[str], candidates: Sequence[str]) -> np.ndarray:
    """Backbone scores for a slate; out-of-vocabulary history items are dropped and
    out-of-vocabulary candidates score 0, so a fully unknown slate is a flat tie."""
    known_hist = [i for i in history if model.known(i)]
    if not known_hist:
        return np.zeros(len(candidates), dtype=np.float32)
    scores = next_item_scores(model, known_hist)
    return np.array([scores[model.index[c] - 1] if model.known(c) else 0.0 for c in candidates],
                    dtype=np.float32)


def user_embedding(model: Backbone, seq: Sequence[str]) -> np.ndarray:
    if len(seq) == 0:
        raise InvalidArgument("cannot embed an empty sequence")
    _, state = forward_next_item(model, window_sequence(list(seq), model.config.max_len))
    z = state.final.astype(np.float64)
    return (z / max(np.linalg.norm(z), 1e-12)).astype(np.float32)


# -- training --------------------------------------------------------------
@dataclass
class TrainResult:
    model: Backbone
    val_hr: list[float]
    train_loss: list[float]
    best_epoch: int


def _training_rows(model: Backbone, split: DatasetSplit) -> list[list[int]]:
    rows = []
    for user in split.users:
        seq = split.train[user].items
        if len(seq) >= 2:
            rows.append(model.encode_ids(window_sequence(seq, model.config.max_len + 1)))
    return rows


def hr_at_1_backbone(model: Backbone, histories: dict[str, Sequence[str]],
                     cands: dict[str, CandidateSet]) -> float:
    hits = 0
    for user in sorted(cands):
        cs = cands[user]
        hits += argmax_first(score_candidates(model, histories[user], cs.candidates)) == cs.ground_truth_index
    return hits / max(len(cands), 1)


def _validate(model: Backbone, histories: dict[str, Sequence[str]],
              cands: dict[str, CandidateSet]) -> tuple[float, float]:
    """Validation HR@1 plus full-softmax NLL of the held-out item (the tie-breaker)."""
    hits, nll = 0, 0.0
    for user in sorted(cands):
        cs = cands[user]
        scores = next_item_scores(model, histories[user]).astype(np.float64)
        top = scores.max()
        lse = top + np.log(np.exp(scores - top).sum())
        nll += lse - scores[model.index[cs.ground_truth] - 1]
        slate = np.array([scores[model.index[c] - 1] for c in cs.candidates])
        hits += argmax_first(slate) == cs.ground_truth_index
    n = max(len(cands), 1)
    return hits / n, nll / n


def train_backbone(split: DatasetSplit, config: BackboneConfig, seed: int,
                   items: Iterable[str] | None = None,
                   val_candidates: dict[str, CandidateSet] | None = None) -> TrainResult:
    """Full-softmax next-item training with early stopping on validation HR@1.

    Epochs with equal HR@1 are ranked by validation NLL, so a saturated HR@1
    does not freeze the checkpoint at the first epoch that reached it.
    """
    if not split.users:
        raise InvalidArgument("training split is empty")
    universe = sorted(items) if items is not None else sorted(
        {i for u in split.users for i in split.full_history(u)})
    model = init_backbone(universe, config, seed)
    rows = _training_rows(model, split)
    if not rows:
        raise InvalidArgument("no training sequence has at least two items")
    if val_candidates is None:
        val_candidates = build_candidate_sets(split, "validation", seed, universe)
    val_hist = {u: split.validation[u][0].items for u in split.users}

    rng = np.random.default_rng(seed)
    n_batches = -(-len(rows) // config.batch_size)
    sched = LrSchedule(config.lr, config.epochs * n_batches, config.warmup_fraction)
    state = AdamWState(lr=config.lr, weight_decay=config.weight_decay)
    best, best_key, best_epoch, stale = model.params.snapshot(), (-1.0, 0.0), -1, 0
    val_hr: list[float] = []
    losses: list[float] = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(rows))
        total, count = 0.0, 0
        for b in range(n_batches):
            batch = [rows[i] for i in order[b * config.batch_size:(b + 1) * config.batch_size]]
            ids, pos, mask = _pack(model, [r[:-1] for r in batch])
            tgt, _, tmask = _pack(model, [r[1:] for r in batch])
            h = _hidden(model, ids, pos, mask, rng, training=True)
            logits = _item_logits(model, h).reshape(-1, model.n_items)
            flat = tmask.reshape(-1)
            labels = np.where(flat, tgt.reshape(-1) - 1, 0)
            loss = ad.cross_entropy(logits, labels, weights=flat.astype(np.float32))
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(f"backbone loss became {value} at epoch {epoch}")
            grads = ad.grad(loss, model.params)
            adamw_step(model.params, grads, state, lr=lr_at_step(sched, state.step + 1))
            model.params["item_emb"].data[PAD] = 0.0
            total += value * int(flat.sum())
            count += int(flat.sum())
        losses.append(total / count)
        hr, nll = _validate(model, val_hist, val_candidates)
        val_hr.append(hr)
        log.info("backbone epoch %d loss %.4f val HR@1 %.4f nll %.4f", epoch, losses[-1], hr, nll)
        if (hr, -nll) > best_key:
            best, best_key, best_epoch, stale = model.params.snapshot(), (hr, -nll), epoch, 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    model.params.restore(best)
    return TrainResult(model, val_hr, losses, best_epoch)


# -- similarity --------------------------------------------------------------
@dataclass
class SimilarUsers:
    users: list[str]
    scores: list[float]
    truncated: bool  # fewer than k candidates were available


def similar_users(target: str, embeddings: dict[str, np.ndarray], k: int) -> SimilarUsers:
    """Top-k other users by cosine, descending, ties by user id."""
    if k < 0:
        raise InvalidArgument("k must be non-negative")
    if target not in embeddings:
        raise InvalidArgument(f"no embedding for user {target!r}")
    z = np.asarray(embeddings[target], dtype=np.float64)
    z = z / max(np.linalg.norm(z), 1e-12)
    scored = []
    for user, v in embeddings.items():
        if user == target:
            continue
        v = np.asarray(v, dtype=np.float64)
        scored.append((-float(z @ v / max(np.linalg.norm(v), 1e-12)), user))
    scored.sort()
    top = scored[:k]
    return SimilarUsers([u for _, u in top], [-s for s, _ in top], k > len(scored))


def user_embeddings(model: Backbone, histories: dict[str, Sequence[str]]) -> dict[str, np.ndarray]:
    out = {}
    for user in sorted(histories):
        known = [i for i in histories[user] if model.known(i)]
        if known:
            out[user] = user_embedding(model, known)
    return out


def export_embeddings(path: str | Path, embeddings: dict[str, np.ndarray]) -> None:
    write_jsonl(path, [{"user_id": u, "vector": [float(x) for x in embeddings[u]]}
                       for u in sorted(embeddings)])


# -- negatives hook ------------------------------------------------------------
def backbone_topk_negatives(model: Backbone, n_candidates: int = 10):
    """A ``negative_source`` that picks the backbone's highest-scored unseen items.

    Only uniform sampling is the evaluated protocol; this is an opt-in alternative.
    """
    def source(user, history, ground_truth, seed):
        excluded = set(history) | {ground_truth}
        history = list(history)
        prefix = history[:history.index(ground_truth)] if ground_truth in history else history
        known = [i for i in prefix if model.known(i)]
        if not known:
            raise InvalidArgument(f"user {user} has no in-vocabulary history to score from")
        scores = next_item_scores(model, known)
        order = sorted(range(model.n_items), key=lambda k: (-scores[k], k))
        negs = [model.items[k] for k in order if model.items[k] not in excluded][:n_candidates - 1]
        pos = int(np.random.default_rng(seed).integers(n_candidates))
        return CandidateSet(user, tuple(negs[:pos] + [ground_truth] + negs[pos:]), pos)
    return source


# -- persistence ----------------------------------------------------------
def save_backbone(directory: str | Path, model: Backbone) -> None:
    directory = Path(directory)
    model.params.save(directory / "backbone.ckpt")
    write_json(directory / "backbone.json", {"config": asdict(model.config), "items": model.items})


def load_backbone(directory: str | Path) -> Backbone:
    directory = Path(directory)
    meta = read_json(directory / "backbone.json")
    return Backbone(BackboneConfig(**meta["config"]), list(meta["items"]),
                    ParamStore.load(directory / "backbone.ckpt"))
