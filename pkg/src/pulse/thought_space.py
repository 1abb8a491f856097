"""Contrastive alignment of a rationale encoder and a behavior encoder.

Both encoders hash lowercase alphanumeric tokens into a fixed bucket table,
run one self-attention block, mean-pool, project and L2-normalize. Training
pulls each user's own rationale toward the text of their behavior and pushes
the rationales of other users in the same batch away.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from pulse.core import autodiff as ad
from pulse.core import nn
from pulse.core.autodiff import Tensor, no_grad
from pulse.core.optim import AdamWState, LrSchedule, adamw_step, lr_at_step
from pulse.core.params import ParamStore
from pulse.data import ItemInfo
from pulse.errors import (DegenerateInput, EmptyText, InvalidArgument, NoNegativesAvailable,
                          TrainingDiverged, UnknownItem)
from pulse.rationale.tot import RationaleTree, Rationale
from pulse.text import hash_token, tokenize
from pulse.utils import derive_seed, read_json, write_json, write_text

log = logging.getLogger(__name__)

HISTORY_SEP = " | "
ESCAPED_BAR = "¦"


# -- behavior text -------------------------------------------------------------
def _clean_title(title: str) -> str:
    return " ".join(title.replace("|", ESCAPED_BAR).split())


def _title(catalog: dict[str, ItemInfo], item: str) -> str:
    try:
        return _clean_title(catalog[item].title)
    except KeyError:
        raise UnknownItem(f"item {item!r} missing from catalog") from None


def history_text(items: Sequence[str], catalog: dict[str, ItemInfo],
                 ratings: Sequence[float | None] | None = None) -> str:
    parts = []
    for k, item in enumerate(items):
        t = _title(catalog, item)
        if ratings is not None and ratings[k] is not None:
            t = f"{t} ({ratings[k]:.1f})"
        parts.append(t)
    return "history: " + HISTORY_SEP.join(parts)


def build_behavior_text(items: Sequence[str], ground_truth: str, catalog: dict[str, ItemInfo],
                        ratings: Sequence[float | None] | None = None) -> str:
    """``history: t1 | ... | tk ; next: t_gt`` (titles only unless ``ratings`` given)."""
    return f"{history_text(items, catalog, ratings)} ; next: {_title(catalog, ground_truth)}"


def candidate_text(info: ItemInfo) -> str:
    desc = info.description.strip()
    return f"{info.title}. {desc}" if desc else info.title


# -- encoders --------------------------------------------------------------------
@dataclass
class EncoderConfig:
    hash_vocab_size: int = 32768
    embed_dim: int = 64
    n_layers: int = 1
    n_heads: int = 2
    shared_weights: bool = False

    def __post_init__(self):
        if self.hash_vocab_size < 1 or self.embed_dim < 1 or self.n_layers < 0:
            raise InvalidArgument("encoder sizes must be positive")
        if self.embed_dim % self.n_heads:
            raise InvalidArgument("embed_dim must be divisible by n_heads")


def token_ids(text: str, buckets: int) -> np.ndarray:
    toks = tokenize(text)
    if not toks:
        raise EmptyText(f"no tokens in {text[:40]!r}")
    return np.array([hash_token(t, buckets) for t in toks], dtype=np.int64)


@dataclass
class TextEncoder:
    """One hashed-token encoder living under ``prefix`` in ``params``."""
    params: ParamStore
    prefix: str
    config: EncoderConfig
    _cache: dict = field(default_factory=dict, repr=False)

    def forward(self, ids: np.ndarray, mask: np.ndarray) -> Tensor:
        """(B, L) ids and validity mask -> (B, d) unit vectors, on the graph."""
        p, c = self.params, self.config
        x = ad.take(p[f"{self.prefix}.emb"], ids)
        bias = nn.attention_bias(mask, causal=False, dtype=x.dtype)
        for layer in range(c.n_layers):
            x = nn.block(x, p, f"{self.prefix}.blk{layer}", c.n_heads, bias)
        m = Tensor(mask[..., None].astype(x.dtype))
        pooled = (x * m).sum(axis=1) / Tensor(mask.sum(axis=1, keepdims=True).astype(x.dtype))
        return ad.l2_normalize(nn.linear(pooled, p, f"{self.prefix}.proj"))

    def encode(self, text: str) -> np.ndarray:
        """Unit vector for one text; unpadded, so the result does not depend on batching."""
        hit = self._cache.get(text)
        if hit is not None:
            return hit
        ids = token_ids(text, self.config.hash_vocab_size)[None]
        with no_grad():
            z = self.forward(ids, np.ones_like(ids, dtype=bool)).data[0]
        z.setflags(write=False)
        if self.params.locked:
            self._cache[text] = z
        return z

    def clear_cache(self) -> None:
        self._cache.clear()


def _add_encoder(store: ParamStore, prefix: str, cfg: EncoderConfig, rng, dtype,
                 table: np.ndarray | None = None) -> None:
    d = cfg.embed_dim
    if table is None:
        table = rng.normal(0.0, 1.0, size=(cfg.hash_vocab_size, d))
    elif table.shape != (cfg.hash_vocab_size, d):
        raise InvalidArgument(f"embedding table must have shape {(cfg.hash_vocab_size, d)}, got {table.shape}")
    store.add(f"{prefix}.emb", np.asarray(table, dtype=dtype))
    for layer in range(cfg.n_layers):
        nn.add_block(store, f"{prefix}.blk{layer}", d, rng)
    nn.add_linear(store, f"{prefix}.proj", d, d, rng)
    if dtype != np.float32:
        for name, t in store.items():
            if name.startswith(prefix):
                t.data = t.data.astype(dtype)


@dataclass
class ThoughtSpace:
    """E1 (rationales) and E2 (behavior) sharing one output space."""
    config: EncoderConfig
    params: ParamStore
    e1: TextEncoder
    e2: TextEncoder

    def encode_rationale(self, text: str) -> np.ndarray:
        return self.e1.encode(text)

    def encode_behavior(self, text: str) -> np.ndarray:
        return self.e2.encode(text)

    def freeze(self) -> None:
        """Make the encoders read-only (any optimizer step then fails)."""
        self.params.freeze()
        self.params.lock()

    @property
    def frozen(self) -> bool:
        return self.params.locked

    def checksum(self) -> str:
        return self.params.checksum()


def init_thought_space(config: EncoderConfig, seed: int, dtype=np.float32,
                       embedding_table: np.ndarray | str | Path | None = None) -> ThoughtSpace:
    """Fresh encoders; ``embedding_table`` (array or .npy path) initializes the token tables."""
    rng = np.random.default_rng(seed)
    if isinstance(embedding_table, (str, Path)):
        embedding_table = np.load(embedding_table)
    store = ParamStore()
    _add_encoder(store, "e1", config, rng, dtype, embedding_table)
    e1 = TextEncoder(store, "e1", config)
    if config.shared_weights:
        e2 = e1
    else:
        _add_encoder(store, "e2", config, rng, dtype, embedding_table)
        e2 = TextEncoder(store, "e2", config)
    return ThoughtSpace(config, store, e1, e2)


def save_thought_space(directory: str | Path, ts: ThoughtSpace) -> None:
    directory = Path(directory)
    ts.params.save(directory / "encoders.ckpt")
    write_json(directory / "encoders.json", asdict(ts.config))


def load_thought_space(directory: str | Path, frozen: bool = True) -> ThoughtSpace:
    directory = Path(directory)
    cfg = EncoderConfig(**read_json(directory / "encoders.json"))
    store = ParamStore.load(directory / "encoders.ckpt")
    e1 = TextEncoder(store, "e1", cfg)
    e2 = e1 if cfg.shared_weights else TextEncoder(store, "e2", cfg)
    ts = ThoughtSpace(cfg, store, e1, e2)
    if frozen:
        ts.freeze()
    return ts


# -- contrastive objective ---------------------------------------------------------
def infonce_loss(z_p, z_h, z_n, tau: float) -> float:
    """Contrastive loss of one anchor ``z_h`` with positive ``z_p`` and negatives ``z_n``.

    Arguments may be vectors (cosines are computed) or, with ``z_h=None``,
    already-computed cosines: ``infonce_loss(cos_p, None, cos_negs, tau)``.
    """
    if tau <= 0:
        raise InvalidArgument("temperature must be positive")
    z_n = np.asarray(z_n, dtype=np.float64)
    if z_n.size == 0:
        raise InvalidArgument("at least one negative is required")
    if z_h is None:
        cos_p, cos_n = float(z_p), z_n.reshape(-1)
    else:
        h = np.asarray(z_h, dtype=np.float64)
        h = h / np.linalg.norm(h)
        p = np.asarray(z_p, dtype=np.float64)
        cos_p = float(p @ h / np.linalg.norm(p))
        neg = np.atleast_2d(z_n)
        cos_n = neg @ h / np.linalg.norm(neg, axis=1)
    logits = np.concatenate([[cos_p], cos_n]) / tau
    top = logits.max()
    return float(top + math.log(np.exp(logits - top).sum()) - logits[0])


def infonce_graph(z_p: Tensor, z_h: Tensor, neg_index: np.ndarray, tau: float) -> Tensor:
    """Batched loss on the graph. Row u's negatives are ``z_p[neg_index[u]]``."""
    if tau <= 0:
        raise InvalidArgument("temperature must be positive")
    if neg_index.ndim != 2 or neg_index.shape[1] == 0:
        raise InvalidArgument("neg_index must be (batch, M) with M >= 1")
    b = z_p.shape[0]
    pos = (z_p * z_h).sum(axis=1, keepdims=True)
    sims = z_h @ z_p.T
    neg = sims[np.arange(b)[:, None], neg_index]
    logits = ad.concat([pos, neg], axis=1) * (1.0 / tau)
    return ad.cross_entropy(logits, np.zeros(b, dtype=np.int64))


def sample_rationale_negatives(batch_users: Sequence[str], negatives_per_user: int = 10,
                               seed: int = 0) -> dict[str, list[str]]:
    """Source users of each user's negatives, drawn from the other batch members."""
    users = list(batch_users)
    if len(users) < 2:
        raise NoNegativesAvailable("a batch needs at least two users to borrow negatives")
    rng = np.random.default_rng(seed)
    replace = len(users) - 1 < negatives_per_user
    if replace:
        log.warning("batch of %d users has fewer than %d other users; sampling negatives with replacement",
                    len(users), negatives_per_user)
    out = {}
    for k, user in enumerate(users):
        others = users[:k] + users[k + 1:]
        picks = rng.choice(len(others), size=negatives_per_user, replace=replace)
        out[user] = [others[i] for i in picks]
    return out


@dataclass
class ThoughtSpaceConfig:
    temperature: float = 0.07
    batch_size: int = 32
    lr: float = 2e-5
    epochs: int = 5
    warmup_fraction: float = 0.10
    weight_decay: float = 0.01
    negatives: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise InvalidArgument("temperature must be positive")
        if self.batch_size < 2:
            raise InvalidArgument("batch_size must be >= 2")
        if self.lr <= 0 or self.epochs < 1 or self.negatives < 1:
            raise InvalidArgument("lr, epochs and negatives must be positive")


@dataclass
class TrainingCurve:
    loss: list[float]


def _batches(users: list[str], size: int, rng) -> list[list[str]]:
    order = [users[i] for i in rng.permutation(len(users))]
    out = [order[k:k + size] for k in range(0, len(order), size)]
    if len(out) > 1 and len(out[-1]) < 2:
        out[-2].extend(out.pop())
    return out


def _pad(id_lists: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    length = max(len(x) for x in id_lists)
    ids = np.zeros((len(id_lists), length), dtype=np.int64)
    mask = np.zeros_like(ids, dtype=bool)
    for r, x in enumerate(id_lists):
        ids[r, :len(x)] = x
        mask[r, :len(x)] = True
    return ids, mask


def batch_loss(ts: ThoughtSpace, rationales: Sequence[str], behaviors: Sequence[str],
               neg_index: np.ndarray, tau: float) -> Tensor:
    v = ts.config.hash_vocab_size
    zp = ts.e1.forward(*_pad([token_ids(t, v) for t in rationales]))
    zh = ts.e2.forward(*_pad([token_ids(t, v) for t in behaviors]))
    return infonce_graph(zp, zh, neg_index, tau)


def train_thought_space(positives: dict[str, str], behaviors: dict[str, str], config: ThoughtSpaceConfig,
                        encoder_config: EncoderConfig | None = None, ts: ThoughtSpace | None = None,
                        checkpoint_dir: str | Path | None = None) -> tuple[ThoughtSpace, TrainingCurve]:
    """Jointly train E1 and E2; one rationale and one behavior text per user."""
    users = sorted(positives)
    missing = [u for u in users if u not in behaviors]
    if missing:
        raise InvalidArgument(f"{len(missing)} users lack a behavior text (e.g. {missing[0]})")
    if len(users) < 2:
        raise NoNegativesAvailable("contrastive training needs at least two users")
    ts = ts or init_thought_space(encoder_config or EncoderConfig(), config.seed)
    ts.params.check_writable()
    rng = np.random.default_rng(derive_seed(config.seed, "thought-space"))
    n_batches = len(_batches(users, config.batch_size, np.random.default_rng(0)))
    sched = LrSchedule(config.lr, config.epochs * n_batches, config.warmup_fraction)
    state = AdamWState(lr=config.lr, weight_decay=config.weight_decay)
    curve = TrainingCurve([])
    for epoch in range(config.epochs):
        total = 0.0
        batches = _batches(users, config.batch_size, rng)
        for b, batch in enumerate(batches):
            sources = sample_rationale_negatives(batch, config.negatives,
                                                 derive_seed(config.seed, epoch, b))
            slot = {u: k for k, u in enumerate(batch)}
            neg_index = np.array([[slot[v] for v in sources[u]] for u in batch], dtype=np.int64)
            loss = batch_loss(ts, [positives[u] for u in batch], [behaviors[u] for u in batch],
                              neg_index, config.temperature)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(f"contrastive loss became {value} at epoch {epoch}")
            grads = ad.grad(loss, ts.params)
            adamw_step(ts.params, grads, state, lr=lr_at_step(sched, state.step + 1))
            total += value
        curve.loss.append(total / len(batches))
        log.info("thought-space epoch %d loss %.4f", epoch, curve.loss[-1])
        if checkpoint_dir is not None:
            ts.params.save(Path(checkpoint_dir) / f"encoders_epoch{epoch + 1:03d}.ckpt")
    ts.e1.clear_cache()
    ts.e2.clear_cache()
    return ts, curve


# -- scoring and selection ------------------------------------------------------------
def agreement_score(ts: ThoughtSpace, rationale: str, behavior: str) -> float:
    z_r = ts.encode_rationale(rationale).astype(np.float64)
    z_h = ts.encode_behavior(behavior).astype(np.float64)
    return float(np.clip(z_r @ z_h, -1.0, 1.0))


@dataclass(frozen=True)
class Selection:
    leaf: Rationale
    score: float
    i: int
    j: int


def select_leaf(tree: RationaleTree, score_fn: Callable[[Rationale], float]) -> Selection:
    """Highest-scoring leaf; the first leaf in (i, j) order wins ties."""
    best = None
    for i, j, leaf in tree.iter_leaves():
        s = float(score_fn(leaf))
        if best is None or s > best.score:
            best = Selection(leaf, s, i, j)
    if best is None:
        raise InvalidArgument("tree has no leaves")
    return best


def select_best_rationale(tree: RationaleTree, behavior: str, ts: ThoughtSpace) -> Selection:
    """Leaf with maximal agreement between E1(leaf) and E2(behavior)."""
    z_h = ts.encode_behavior(behavior).astype(np.float64)
    return select_leaf(tree, lambda leaf: float(np.clip(
        ts.encode_rationale(leaf.text).astype(np.float64) @ z_h, -1.0, 1.0)))


def separation(ts: ThoughtSpace, positives: dict[str, str], behaviors: dict[str, str],
               negatives: dict[str, list[str]]) -> tuple[float, float]:
    """(mean cos(z_p, z_h), mean cos(z_n, z_h)) over users; negatives name source users."""
    pos, neg = [], []
    for user in sorted(positives):
        z_h = ts.encode_behavior(behaviors[user]).astype(np.float64)
        pos.append(ts.encode_rationale(positives[user]).astype(np.float64) @ z_h)
        neg.extend(ts.encode_rationale(positives[v]).astype(np.float64) @ z_h for v in negatives[user])
    return float(np.mean(pos)), float(np.mean(neg))


# -- 2-D export -------------------------------------------------------------------
def project_embeddings_2d(vectors, labels: Sequence[str], ids: Sequence[str] | None = None,
                          path: str | Path | None = None) -> np.ndarray:
    """Principal-component coordinates, each component signed so its first nonzero loading is positive."""
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise InvalidArgument("need at least three vectors")
    if len(labels) != x.shape[0] or (ids is not None and len(ids) != x.shape[0]):
        raise InvalidArgument("labels and ids must match the number of vectors")
    if len(np.unique(x, axis=0)) < 2:
        raise DegenerateInput("fewer than two distinct vectors")
    xc = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(xc, full_matrices=False)
    comps = vt[:2]
    for k in range(comps.shape[0]):
        nz = np.flatnonzero(np.abs(comps[k]) > 1e-12)
        if nz.size and comps[k, nz[0]] < 0:
            comps[k] = -comps[k]
    coords = xc @ comps.T
    if coords.shape[1] < 2:
        coords = np.pad(coords, ((0, 0), (0, 2 - coords.shape[1])))
    if path is not None:
        ids = list(ids) if ids is not None else [str(k) for k in range(len(x))]
        rows = ["id,label,x,y"] + [f"{ids[k]},{labels[k]},{coords[k, 0]:.6f},{coords[k, 1]:.6f}"
                                   for k in range(len(x))]
        write_text(path, "\n".join(rows) + "\n")
    return coords
