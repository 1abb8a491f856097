"""Interaction logs: loading, 5-core cleaning, leave-one-out splits,
candidate slates, and planted-preference synthetic corpora."""
from __future__ import annotations

import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from pulse.errors import CandidatePoolTooSmall, EmptyDataset, InvalidArgument, IoError, SplitError
from pulse.utils import (canonical_json, derive_seed, read_json, read_jsonl, write_json,
                         write_jsonl, write_text)

log = logging.getLogger(__name__)

N_CANDIDATES = 10
CORE_K = 5
MAX_LEN = 50
# Luxury Beauty interaction count after preprocessing, as reported for the full dataset.
LUXURY_BEAUTY_INTERACTIONS = 71898


@dataclass(frozen=True)
class InteractionRecord:
    user_id: str
    item_id: str
    timestamp: int
    rating: float | None = None
    review: str | None = None

    def __post_init__(self):
        if not self.user_id or not self.item_id:
            raise InvalidArgument("user_id and item_id must be non-empty")
        if self.timestamp < 0:
            raise InvalidArgument("timestamp must be non-negative")


@dataclass(frozen=True)
class ItemInfo:
    title: str
    description: str = ""
    domain: str = ""


ItemCatalog = dict  # item_id -> ItemInfo


@dataclass
class UserSequence:
    user_id: str
    items: list[str]
    timestamps: list[int] = field(default_factory=list)
    ratings: list[float | None] = field(default_factory=list)
    reviews: list[str | None] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.items)
        self.timestamps = list(self.timestamps) or [0] * n
        self.ratings = list(self.ratings) or [None] * n
        self.reviews = list(self.reviews) or [None] * n
        if not len(self.timestamps) == len(self.ratings) == len(self.reviews) == n:
            raise InvalidArgument("per-position fields must align with items")
        if any(b < a for a, b in zip(self.timestamps, self.timestamps[1:])):
            raise InvalidArgument(f"timestamps of {self.user_id} are not chronological")

    def __len__(self) -> int:
        return len(self.items)

    def prefix(self, n: int) -> "UserSequence":
        return UserSequence(self.user_id, self.items[:n], self.timestamps[:n],
                            self.ratings[:n], self.reviews[:n])

    def to_json(self) -> dict:
        return {"user_id": self.user_id, "items": self.items, "timestamps": self.timestamps,
                "ratings": self.ratings, "reviews": self.reviews}

    @classmethod
    def from_json(cls, d: dict) -> "UserSequence":
        return cls(d["user_id"], d["items"], d["timestamps"], d["ratings"], d["reviews"])


@dataclass
class DatasetSplit:
    """Leave-one-out split. ``validation[u]`` / ``test[u]`` hold (history, held-out item)."""
    train: dict[str, UserSequence]
    validation: dict[str, tuple[UserSequence, str]]
    test: dict[str, tuple[UserSequence, str]]

    @property
    def users(self) -> list[str]:
        return sorted(self.train)

    def full_history(self, user: str) -> list[str]:
        hist, item = self.test[user]
        return hist.items + [item]


@dataclass(frozen=True)
class CandidateSet:
    user_id: str
    candidates: tuple[str, ...]
    ground_truth_index: int

    @property
    def ground_truth(self) -> str:
        return self.candidates[self.ground_truth_index]

    def to_json(self) -> dict:
        return {"user_id": self.user_id, "candidates": list(self.candidates),
                "ground_truth_index": self.ground_truth_index}

    @classmethod
    def from_json(cls, d: dict) -> "CandidateSet":
        return cls(d["user_id"], tuple(d["candidates"]), int(d["ground_truth_index"]))


@dataclass
class LoadResult:
    records: list[InteractionRecord]
    catalog: dict[str, ItemInfo]
    n_valid: int
    n_skipped: int


# -- ingestion ---------------------------------------------------------
def _parse_line(d) -> tuple[InteractionRecord, ItemInfo] | None:
    if not isinstance(d, dict):
        return None
    user, item, ts, title = d.get("user_id"), d.get("item_id"), d.get("timestamp"), d.get("title")
    if not (isinstance(user, str) and user and isinstance(item, str) and item):
        return None
    if isinstance(ts, bool) or not isinstance(ts, int) or ts < 0:
        return None
    if not isinstance(title, str) or not title.strip():
        return None
    rating = d.get("rating")
    if rating is not None:
        if isinstance(rating, bool) or not isinstance(rating, (int, float)) or not 1.0 <= rating <= 5.0:
            return None
        rating = float(rating)
    review = d.get("review")
    if review is not None and not isinstance(review, str):
        return None
    desc = d.get("description") or ""
    domain = d.get("domain") or ""
    if not isinstance(desc, str) or not isinstance(domain, str):
        return None
    return (InteractionRecord(user, item, ts, rating, review or None),
            ItemInfo(title.strip(), desc, domain))


def load_interactions(path: str | Path) -> LoadResult:
    """Read line-delimited JSON interactions; malformed lines are counted and skipped."""
    records: list[InteractionRecord] = []
    catalog: dict[str, ItemInfo] = {}
    skipped = 0
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read interactions file {path}: {exc}") from exc
    with fh:
        for line in fh:
            if not line.strip():
                continue
            try:
                parsed = _parse_line(json.loads(line))
            except json.JSONDecodeError:
                parsed = None
            if parsed is None:
                skipped += 1
                continue
            rec, info = parsed
            records.append(rec)
            catalog.setdefault(rec.item_id, info)
    if not records:
        raise EmptyDataset(f"no valid interaction records in {path} ({skipped} skipped)")
    log.info("loaded %d records from %s, skipped %d malformed lines", len(records), path, skipped)
    return LoadResult(records, catalog, len(records), skipped)


def write_interactions(path: str | Path, records: Sequence[InteractionRecord],
                       catalog: dict[str, ItemInfo]) -> None:
    """Inverse of :func:`load_interactions` (one JSON object per record)."""
    lines = []
    for r in records:
        info = catalog[r.item_id]
        d = {"user_id": r.user_id, "item_id": r.item_id, "timestamp": r.timestamp,
             "title": info.title, "description": info.description, "domain": info.domain}
        if r.rating is not None:
            d["rating"] = r.rating
        if r.review is not None:
            d["review"] = r.review
        lines.append(canonical_json(d))
    write_text(path, "\n".join(lines) + "\n")


# -- preprocessing -----------------------------------------------------
def preprocess_core(records: Iterable[InteractionRecord], k: int = CORE_K) -> list[InteractionRecord]:
    """De-duplicate (earliest wins), sort per user, then k-core filter to a fixpoint."""
    records = list(records)
    if not records:
        raise EmptyDataset("no records to preprocess")
    first: dict[tuple[str, str], InteractionRecord] = {}
    for r in records:
        key = (r.user_id, r.item_id)
        cur = first.get(key)
        if cur is None or r.timestamp < cur.timestamp:
            first[key] = r
    kept = list(first.values())
    while True:
        users = Counter(r.user_id for r in kept)
        items = Counter(r.item_id for r in kept)
        nxt = [r for r in kept if users[r.user_id] >= k and items[r.item_id] >= k]
        if len(nxt) == len(kept):
            break
        kept = nxt
    if not kept:
        raise EmptyDataset(f"every record was removed by {k}-core filtering")
    kept.sort(key=lambda r: (r.user_id, r.timestamp, r.item_id))
    return kept


def build_sequences(records: Iterable[InteractionRecord]) -> dict[str, UserSequence]:
    by_user: dict[str, list[InteractionRecord]] = defaultdict(list)
    for r in records:
        by_user[r.user_id].append(r)
    out = {}
    for user in sorted(by_user):
        rs = sorted(by_user[user], key=lambda r: (r.timestamp, r.item_id))
        out[user] = UserSequence(user, [r.item_id for r in rs], [r.timestamp for r in rs],
                                 [r.rating for r in rs], [r.review for r in rs])
    return out


def window_sequence(seq, max_len: int = MAX_LEN):
    """Keep the most recent ``max_len`` positions (padding happens at model time)."""
    if max_len < 1:
        raise InvalidArgument("max_len must be >= 1")
    if isinstance(seq, UserSequence):
        return seq if len(seq) <= max_len else UserSequence(
            seq.user_id, seq.items[-max_len:], seq.timestamps[-max_len:],
            seq.ratings[-max_len:], seq.reviews[-max_len:])
    return list(seq)[-max_len:]


def split_leave_one_out(sequences: dict[str, UserSequence]) -> DatasetSplit:
    train, val, test = {}, {}, {}
    for user in sorted(sequences):
        seq = sequences[user]
        if len(seq) < 3:
            raise SplitError(f"user {user} has {len(seq)} interactions; need at least 3")
        n = len(seq)
        train[user] = seq.prefix(n - 2)
        val[user] = (seq.prefix(n - 2), seq.items[n - 2])
        test[user] = (seq.prefix(n - 1), seq.items[n - 1])
    return DatasetSplit(train, val, test)


# -- candidate slates ----------------------------------------------------
def sample_candidate_set(user: str, ground_truth: str, item_universe: Iterable[str],
                         rng_seed: int, history: Iterable[str] = (),
                         n_candidates: int = N_CANDIDATES) -> CandidateSet:
    """Ground truth plus uniformly drawn items outside ``history``, at a random slot."""
    excluded = set(history) | {ground_truth}
    eligible = sorted(set(item_universe) - excluded)
    need = n_candidates - 1
    if len(eligible) < need:
        raise CandidatePoolTooSmall(f"user {user}: {len(eligible)} eligible negatives, need {need}")
    rng = np.random.default_rng(rng_seed)
    picks = rng.choice(len(eligible), size=need, replace=False)
    negatives = [eligible[i] for i in picks]
    pos = int(rng.integers(n_candidates))
    slate = negatives[:pos] + [ground_truth] + negatives[pos:]
    return CandidateSet(user, tuple(slate), pos)


def build_candidate_sets(split: DatasetSplit, which: str, seed: int,
                         item_universe: Iterable[str] | None = None,
                         negative_source=None) -> dict[str, CandidateSet]:
    """Per-user slates for ``which`` in {"validation", "test"}, seeded per user.

    ``negative_source(user, history, ground_truth, seed)`` may replace uniform
    sampling (for model-mined negatives); it must return a CandidateSet.
    """
    held = split.validation if which == "validation" else split.test
    universe = sorted(item_universe) if item_universe is not None else sorted(
        {i for u in split.users for i in split.full_history(u)})
    out = {}
    for user in split.users:
        _, target = held[user]
        if negative_source is not None:
            out[user] = negative_source(user, split.full_history(user), target,
                                        derive_seed(seed, user, which))
            continue
        out[user] = sample_candidate_set(user, target, universe, derive_seed(seed, user, which),
                                         history=split.full_history(user))
    return out


# -- synthetic corpora -----------------------------------------------------
TRAIT_WORDS = (
    "amber", "citrus", "velvet", "herbal", "lunar", "coral", "smoky", "glacier", "ember",
    "cobalt", "meadow", "saffron", "onyx", "willow", "tide", "juniper", "nimbus", "garnet",
    "sable", "orchid", "quartz", "cedar", "frost", "dune",
)
DOMAIN_NOUNS = {
    "beauty": ("serum", "lotion", "cream", "balm", "mist", "cleanser", "toner", "mask", "oil", "gel"),
    "games": ("console", "controller", "cartridge", "headset", "keyboard", "joystick", "arcade",
              "puzzle", "racer", "adventure"),
    "pantry": ("tea", "granola", "sauce", "cracker", "spread", "cereal", "coffee", "snack",
               "broth", "syrup"),
}
FILLERS = ("finish", "texture", "feel", "style", "edition", "blend", "design", "kit")
REVIEWS_GOOD = ("really like it", "works as expected", "would buy again", "great value")
REVIEWS_MEH = ("not for me", "it is fine", "arrived late", "ok overall")


@dataclass
class SyntheticSpec:
    n_users: int = 500
    n_items: int = 400
    n_traits: int = 8
    noise: float = 0.1
    seq_len_range: tuple[int, int] = (7, 14)
    seed: int = 0
    domain: str = "beauty"
    item_prefix: str = "it"
    trait_in_title: bool = False

    def __post_init__(self):
        self.seq_len_range = tuple(self.seq_len_range)
        if self.n_traits < 2:
            raise InvalidArgument("n_traits must be >= 2")
        if not 0.0 <= self.noise < 0.5:
            raise InvalidArgument("noise must lie in [0, 0.5)")
        if self.n_items < self.n_traits:
            raise InvalidArgument("n_items must be >= n_traits")
        lo, hi = self.seq_len_range
        if not 1 <= lo <= hi:
            raise InvalidArgument("seq_len_range must satisfy 1 <= lo <= hi")


@dataclass
class SyntheticDataset:
    records: list[InteractionRecord]
    catalog: dict[str, ItemInfo]
    user_traits: dict[str, str]
    item_traits: dict[str, str]
    traits: tuple[str, ...]


def trait_vocabulary(n: int) -> tuple[str, ...]:
    if n <= len(TRAIT_WORDS):
        return TRAIT_WORDS[:n]
    return TRAIT_WORDS + tuple(f"trait{k}" for k in range(len(TRAIT_WORDS), n))


def gen_synthetic_dataset(spec: SyntheticSpec) -> SyntheticDataset:
    """Planted-preference corpus.

    Every item carries one trait word in its description (and title when
    ``trait_in_title``); every user prefers one trait and picks an on-trait
    item with probability ``1 - noise``, otherwise a uniform off-trait item.
    """
    rng = np.random.default_rng(spec.seed)
    traits = trait_vocabulary(spec.n_traits)
    nouns = DOMAIN_NOUNS.get(spec.domain, DOMAIN_NOUNS["beauty"])
    assignment = np.arange(spec.n_items) % spec.n_traits
    rng.shuffle(assignment)
    catalog: dict[str, ItemInfo] = {}
    item_traits: dict[str, str] = {}
    by_trait: dict[int, list[str]] = defaultdict(list)
    width = max(4, len(str(spec.n_items - 1)))
    for idx in range(spec.n_items):
        item = f"{spec.item_prefix}{idx:0{width}d}"
        t = traits[assignment[idx]]
        noun = nouns[int(rng.integers(len(nouns)))]
        filler = FILLERS[int(rng.integers(len(FILLERS)))]
        title = f"{t.title()} {noun.title()} {item}" if spec.trait_in_title else f"{noun.title()} {item}"
        desc = f"A {t} {noun} with a {t} {filler}."
        catalog[item] = ItemInfo(title, desc, spec.domain)
        item_traits[item] = t
        by_trait[int(assignment[idx])].append(item)
    all_items = list(catalog)
    records: list[InteractionRecord] = []
    user_traits: dict[str, str] = {}
    lo, hi = spec.seq_len_range
    uw = max(4, len(str(spec.n_users - 1)))
    for u in range(spec.n_users):
        user = f"u{u:0{uw}d}"
        pref = int(rng.integers(spec.n_traits))
        user_traits[user] = traits[pref]
        on = by_trait[pref]
        off = [i for i in all_items if item_traits[i] != traits[pref]]
        n = int(rng.integers(lo, hi + 1))
        seen: set[str] = set()
        ts = int(rng.integers(1_500_000_000, 1_600_000_000))
        for _ in range(n):
            pool = on if rng.random() >= spec.noise else off
            fresh = [i for i in pool if i not in seen] or pool
            item = fresh[int(rng.integers(len(fresh)))]
            seen.add(item)
            ts += int(rng.integers(3600, 30 * 86400))
            good = item_traits[item] == traits[pref]
            rating = float(rng.integers(4, 6)) if good else float(rng.integers(1, 4))
            reviews = REVIEWS_GOOD if good else REVIEWS_MEH
            review = reviews[int(rng.integers(len(reviews)))] if rng.random() < 0.5 else None
            records.append(InteractionRecord(user, item, ts, rating, review))
    return SyntheticDataset(records, catalog, user_traits, item_traits, traits)


def gen_cyclic_dataset(n_items: int = 200, n_users: int = 400, seq_len_range=(8, 16),
                       seed: int = 0) -> SyntheticDataset:
    """Deterministic successor corpus: every user walks item k -> k+1 (mod n_items)."""
    rng = np.random.default_rng(seed)
    width = max(4, len(str(n_items - 1)))
    items = [f"c{i:0{width}d}" for i in range(n_items)]
    catalog = {it: ItemInfo(f"Cycle item {it}", f"position {i} in the cycle", "cycle")
               for i, it in enumerate(items)}
    records = []
    lo, hi = seq_len_range
    for u in range(n_users):
        user = f"u{u:04d}"
        start = int(rng.integers(n_items))
        n = int(rng.integers(lo, hi + 1))
        for k in range(n):
            records.append(InteractionRecord(user, items[(start + k) % n_items], 1000 + 60 * k))
    return SyntheticDataset(records, catalog, {}, {}, ())


def on_trait_fraction(ds: SyntheticDataset) -> float:
    hits = sum(ds.item_traits[r.item_id] == ds.user_traits[r.user_id] for r in ds.records)
    return hits / len(ds.records)


def item_universe(catalog: dict[str, ItemInfo], sequences: dict[str, UserSequence]) -> list[str]:
    """Items surviving preprocessing (the universe negatives are drawn from)."""
    seen = {i for s in sequences.values() for i in s.items}
    return sorted(i for i in catalog if i in seen)


def expected_chi2_counts(histories: dict[str, set[str]], universe: Sequence[str], k: int) -> dict[str, float]:
    """Expected negative-selection counts under uniform sampling (used by tests)."""
    exp: dict[str, float] = defaultdict(float)
    uni = set(universe)
    for hist in histories.values():
        eligible = uni - hist
        for i in eligible:
            exp[i] += k / len(eligible)
    return dict(exp)


# -- serialization -----------------------------------------------------------
def save_split(path: str | Path, split: DatasetSplit) -> None:
    rows = []
    for user in split.users:
        (vh, vi), (th, ti) = split.validation[user], split.test[user]
        rows.append({"user_id": user, "train": split.train[user].to_json(),
                     "validation_item": vi, "test_item": ti,
                     "test_prefix": th.to_json()})
    write_jsonl(path, rows)


def load_split(path: str | Path) -> DatasetSplit:
    train, val, test = {}, {}, {}
    for row in read_jsonl(path):
        user = row["user_id"]
        prefix = UserSequence.from_json(row["train"])
        train[user] = prefix
        val[user] = (prefix, row["validation_item"])
        test[user] = (UserSequence.from_json(row["test_prefix"]), row["test_item"])
    return DatasetSplit(train, val, test)


def save_candidates(path: str | Path, sets: dict[str, CandidateSet]) -> None:
    write_jsonl(path, [sets[u].to_json() for u in sorted(sets)])


def load_candidates(path: str | Path) -> dict[str, CandidateSet]:
    return {row["user_id"]: CandidateSet.from_json(row) for row in read_jsonl(path)}


def save_catalog(path: str | Path, catalog: dict[str, ItemInfo]) -> None:
    write_json(path, {k: {"title": v.title, "description": v.description, "domain": v.domain}
                      for k, v in catalog.items()})


def load_catalog(path: str | Path) -> dict[str, ItemInfo]:
    return {k: ItemInfo(v["title"], v.get("description", ""), v.get("domain", ""))
            for k, v in read_json(path).items()}
