"""Rationales, depth-2 trees of thoughts, in-batch negative pools and the rationale store."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from pulse.errors import InvalidArgument, NoNegativesAvailable
from pulse.rationale.backends import Backend, GenerationRequest, generate
from pulse.rationale.prompts import PromptContext, build_refine_prompt
from pulse.utils import derive_seed, read_jsonl, write_jsonl

log = logging.getLogger(__name__)

MAX_RATIONALE_CHARS = 2048
KINDS = ("positive", "negative", "base", "tot_node")


@dataclass(frozen=True)
class Rationale:
    text: str
    kind: str
    source_user: str
    tree_pos: tuple | None = None  # (level, i, j); j is None on level 1
    logprob: float | None = None

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise InvalidArgument("rationale text must be non-empty")
        if len(self.text) > MAX_RATIONALE_CHARS:
            raise InvalidArgument(f"rationale longer than {MAX_RATIONALE_CHARS} characters")
        if self.kind not in KINDS:
            raise InvalidArgument(f"unknown rationale kind {self.kind!r}")
        if self.kind == "tot_node" and self.tree_pos is None:
            raise InvalidArgument("tree nodes need a tree position")

    def to_json(self) -> dict:
        d = {"user_id": self.source_user, "kind": self.kind, "text": self.text}
        if self.tree_pos is not None:
            d["tree_pos"] = list(self.tree_pos)
        if self.logprob is not None:
            d["logprob"] = self.logprob
        return d

    @classmethod
    def from_json(cls, d: dict) -> "Rationale":
        pos = d.get("tree_pos")
        return cls(d["text"], d["kind"], d["user_id"], tuple(pos) if pos is not None else None,
                   d.get("logprob"))


def rationale_from_text(text: str, kind: str, user: str, tree_pos=None, logprob=None) -> Rationale:
    """Build a Rationale, clipping over-long generations to the length limit."""
    text = text.strip()
    if len(text) > MAX_RATIONALE_CHARS:
        log.warning("clipping %d-character generation for %s", len(text), user)
        text = text[:MAX_RATIONALE_CHARS]
    return Rationale(text, kind, user, tree_pos, logprob)


@dataclass(frozen=True)
class RationaleTree:
    root: Rationale
    children: tuple[Rationale, ...]
    leaves: tuple[tuple[Rationale, ...], ...]  # leaves[i][j]

    def __post_init__(self):
        if not self.children or len(self.leaves) != len(self.children):
            raise InvalidArgument("every first-level node needs a leaf group")
        m = len(self.leaves[0])
        if m == 0 or any(len(group) != m for group in self.leaves):
            raise InvalidArgument("every first-level node needs the same positive number of leaves")

    @property
    def n(self) -> int:
        return len(self.children)

    @property
    def m(self) -> int:
        return len(self.leaves[0])

    def iter_leaves(self) -> Iterable[tuple[int, int, Rationale]]:
        """Leaves in lexicographic (i, j) order."""
        for i, group in enumerate(self.leaves):
            for j, leaf in enumerate(group):
                yield i, j, leaf

    @property
    def user(self) -> str:
        return self.root.source_user

    def nodes(self) -> list[Rationale]:
        return [self.root, *self.children, *(leaf for _, _, leaf in self.iter_leaves())]


def _run(backend: Backend, requests: Sequence[GenerationRequest], max_in_flight: int):
    if max_in_flight <= 1 or len(requests) <= 1:
        return [generate(backend, r) for r in requests]
    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        # results keep request order whatever order the calls finish in
        return list(pool.map(lambda r: generate(backend, r), requests))


def expand_tot(base: Rationale, n: int, m: int, backend: Backend, seed: int,
               context: PromptContext | None = None, max_in_flight: int = 4,
               max_tokens: int = 512, temperature: float = 0.7) -> RationaleTree:
    """Refine ``base`` into n children and n*m leaves with exactly n + n*m calls.

    Any backend failure propagates; a partial tree is never returned.
    """
    if n < 1 or m < 1:
        raise InvalidArgument("n and m must be >= 1")
    user = base.source_user

    def prompt_for(parent: Rationale) -> str:
        if context is not None and context.include_history_in_refine:
            return build_refine_prompt(parent.text, context.history, context.catalog)
        return build_refine_prompt(parent.text)

    level1 = [GenerationRequest(prompt_for(base), max_tokens, temperature, derive_seed(seed, user, 1, i))
              for i in range(n)]
    children = tuple(rationale_from_text(r.text, "tot_node", user, (1, i, None), r.logprob)
                     for i, r in enumerate(_run(backend, level1, max_in_flight)))
    level2 = [GenerationRequest(prompt_for(children[i]), max_tokens, temperature,
                                derive_seed(seed, user, 2, i, j))
              for i in range(n) for j in range(m)]
    out = _run(backend, level2, max_in_flight)
    leaves = tuple(
        tuple(rationale_from_text(out[i * m + j].text, "tot_node", user, (2, i, j), out[i * m + j].logprob)
              for j in range(m))
        for i in range(n))
    return RationaleTree(base, children, leaves)


def gen_negative_pool(positives: dict[str, Rationale],
                      batches: Sequence[Sequence[str]]) -> dict[str, list[Rationale]]:
    """For each user, the positives of the other users in its batch (as negatives)."""
    pool: dict[str, list[Rationale]] = {}
    for batch in batches:
        if len(batch) < 2:
            raise NoNegativesAvailable(f"batch {list(batch)} has no other users to borrow from")
        for user in batch:
            pool[user] = [Rationale(positives[v].text, "negative", v)
                          for v in batch if v != user]
    return pool


# -- store -------------------------------------------------------------------
def save_rationales(path: str | Path, rationales: Iterable[Rationale]) -> None:
    write_jsonl(path, (r.to_json() for r in rationales))


def load_rationales(path: str | Path) -> list[Rationale]:
    return [Rationale.from_json(d) for d in read_jsonl(path)]


def save_trees(path: str | Path, trees: dict[str, RationaleTree]) -> None:
    save_rationales(path, (node for u in sorted(trees) for node in trees[u].nodes()))


def load_trees(path: str | Path) -> dict[str, RationaleTree]:
    roots: dict[str, Rationale] = {}
    kids: dict[str, dict[int, Rationale]] = {}
    leaves: dict[str, dict[tuple[int, int], Rationale]] = {}
    for r in load_rationales(path):
        if r.kind == "base":
            roots[r.source_user] = r
        elif r.tree_pos and r.tree_pos[0] == 1:
            kids.setdefault(r.source_user, {})[r.tree_pos[1]] = r
        elif r.tree_pos and r.tree_pos[0] == 2:
            leaves.setdefault(r.source_user, {})[(r.tree_pos[1], r.tree_pos[2])] = r
    trees = {}
    for user, root in roots.items():
        ch = kids.get(user, {})
        lv = leaves.get(user, {})
        n = len(ch)
        m = len(lv) // max(n, 1)
        trees[user] = RationaleTree(root, tuple(ch[i] for i in range(n)),
                                    tuple(tuple(lv[(i, j)] for j in range(m)) for i in range(n)))
    return trees
