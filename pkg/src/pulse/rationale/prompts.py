"""Prompt construction from versioned templates."""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Sequence

from pulse.data import ItemInfo, UserSequence
from pulse.errors import InvalidArgument, UnknownItem

SIMILAR_CAP = 20
TEMPLATE_VERSION = 1


@lru_cache(maxsize=None)
def load_templates(version: int = TEMPLATE_VERSION) -> dict:
    text = resources.files("pulse.templates").joinpath(f"prompts_v{version}.json").read_text("utf-8")
    return json.loads(text)


def _info(catalog: dict[str, ItemInfo], item: str) -> ItemInfo:
    try:
        return catalog[item]
    except KeyError:
        raise UnknownItem(f"item {item!r} missing from catalog") from None


def item_fields(info: ItemInfo, rating: float | None = None, review: str | None = None,
                templates: dict | None = None) -> str:
    t = templates or load_templates()
    fmt = t["item_fields"]
    parts = [fmt["title"].format(value=info.title)]
    if info.description.strip():
        parts.append(fmt["description"].format(value=info.description.strip()))
    if rating is not None:
        parts.append(fmt["rating"].format(value=rating))
    if review is not None and review.strip():
        parts.append(fmt["review"].format(value=" ".join(review.split())))
    return t["item_separator"].join(parts)


def _history_lines(history: UserSequence, catalog, section: dict, templates) -> list[str]:
    if len(history) == 0:
        raise InvalidArgument("history must be non-empty")
    lines = [section["history_heading"]]
    for k, item in enumerate(history.items):
        fields = item_fields(_info(catalog, item), history.ratings[k], history.reviews[k], templates)
        lines.append(section["history_line"].format(index=k + 1, fields=fields))
    return lines


def build_phase1_prompt(history: UserSequence, ground_truth: str, catalog: dict[str, ItemInfo],
                        templates: dict | None = None) -> str:
    """Prompt asking why the shopper chose ``ground_truth`` after ``history``."""
    t = templates or load_templates()
    sec = t["phase1"]
    lines = [sec["header"], *_history_lines(history, catalog, sec, t), sec["choice_heading"],
             sec["choice_line"].format(fields=item_fields(_info(catalog, ground_truth), templates=t)),
             sec["instruction"]]
    return "\n".join(lines)


def rank_similar_items(similar_items: Sequence[str], catalog: dict[str, ItemInfo],
                       cap: int = SIMILAR_CAP) -> list[str]:
    """Deduplicate, order by frequency (desc) then title, keep ``cap``."""
    counts = Counter(similar_items)
    order = sorted(counts, key=lambda i: (-counts[i], _info(catalog, i).title, i))
    return order[:cap]


def build_phase2_prompt(history: UserSequence, similar_items: Sequence[str],
                        catalog: dict[str, ItemInfo], candidates: Sequence[str] | None = None,
                        templates: dict | None = None) -> str:
    """Base-reason prompt from the history and items of similar users.

    ``candidates`` stays ``None`` in the evaluated protocol so no slate
    information reaches the generator.
    """
    if not similar_items:
        raise InvalidArgument("similar-user item list must be non-empty")
    t = templates or load_templates()
    sec = t["phase2"]
    lines = [sec["header"], *_history_lines(history, catalog, sec, t), sec["similar_heading"]]
    for item in rank_similar_items(similar_items, catalog):
        lines.append(sec["similar_line"].format(fields=item_fields(_info(catalog, item), templates=t)))
    if candidates:
        lines.append(sec["candidates_heading"])
        lines += [sec["candidates_line"].format(fields=item_fields(_info(catalog, c), templates=t))
                  for c in candidates]
    lines.append(sec["instruction"])
    return "\n".join(lines)


def build_refine_prompt(parent_text: str, history: UserSequence | None = None,
                        catalog: dict[str, ItemInfo] | None = None,
                        templates: dict | None = None) -> str:
    t = templates or load_templates()
    sec = t["refine"]
    lines = [sec["header"], sec["parent_open"], parent_text, sec["parent_close"]]
    if history is not None and len(history):
        lines += _history_lines(history, catalog, sec, t)
    lines.append(sec["instruction"])
    return "\n".join(lines)


@dataclass(frozen=True)
class PromptContext:
    """What a tree of thoughts is conditioned on, besides its parent text."""
    history: UserSequence
    catalog: dict
    include_history_in_refine: bool = False
