"""Strict JSON run configuration.

Every section is a dataclass; unknown keys and mistyped values are rejected.
``schema()`` lists every key with its type and default.
"""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from pulse.errors import InvalidArgument, IoError


@dataclass
class DataSection:
    source: str = "synthetic"  # "synthetic" or "jsonl"
    path: str | None = None  # interactions file when source == "jsonl"
    n_users: int = 800
    n_items: int = 400
    n_traits: int = 8
    noise: float = 0.1
    seq_len_min: int = 7
    seq_len_max: int = 14
    domain: str = "beauty"
    item_prefix: str = "it"
    trait_in_title: bool = False
    core_k: int = 5
    max_len: int = 50


@dataclass
class BackboneSection:
    embed_dim: int = 64
    n_layers: int = 2
    n_heads: int = 2
    dropout: float = 0.2
    epochs: int = 10
    batch_size: int = 32
    lr: float = 3e-3
    weight_decay: float = 0.0
    warmup_fraction: float = 0.10
    patience: int = 3


@dataclass
class RationaleSection:
    backend: str = "mock"  # "mock" or "http"
    base_url: str | None = None
    timeout: float = 30.0
    max_in_flight: int = 4
    n: int = 3
    m: int = 3
    max_tokens: int = 512
    temperature: float = 0.7
    similar_k: int = 5
    include_history_in_refine: bool = False
    mock_drift: float = 0.3
    mock_seed: int = 0
    mock_lexicon: list | None = None  # None: the synthetic trait words when data is synthetic


@dataclass
class ThoughtSpaceSection:
    hash_vocab_size: int = 32768
    embed_dim: int = 64
    n_layers: int = 1
    n_heads: int = 2
    shared_weights: bool = False
    init_embedding_path: str | None = None
    temperature: float = 0.07
    batch_size: int = 32
    lr: float = 3e-3
    epochs: int = 20
    warmup_fraction: float = 0.10
    weight_decay: float = 0.01
    negatives: int = 10
    append_ratings: bool = False


@dataclass
class SftSection:
    method: str = "tot_thought_space"
    lr: float = 2e-4
    epochs: int = 20
    patience: int = 5
    hidden: int = 128
    train_batch: int = 1
    grad_accumulation: int = 1
    weight_decay: float = 0.01
    warmup_fraction: float = 0.10
    candidate_encoder: str = "e1"
    history_encoder: str = "e1"
    early_stop_fraction: float = 0.10
    infer_batch: int = 2
    max_text_tokens: int = 512
    lora_rank: int = 8
    lora_alpha: int = 16
    lora_dropout: float = 0.05


@dataclass
class EvalSection:
    experiment: str = "main"
    ablation_a_arms: list = field(default_factory=lambda: ["thought_space", "frozen_generic"])
    external_vectors_path: str | None = None
    ablation_b_arms: list = field(default_factory=lambda: [
        "none", "base_reason", "tot_loglik", "tot_thought_space", "tot_random"])
    target_domain: str = "games"
    target_item_prefix: str = "vg"
    target_n_users: int = 400
    target_seed_offset: int = 1


@dataclass
class RunConfig:
    seed: int = 0
    artifacts_dir: str = "artifacts"
    data: DataSection = field(default_factory=DataSection)
    backbone: BackboneSection = field(default_factory=BackboneSection)
    rationale: RationaleSection = field(default_factory=RationaleSection)
    thought_space: ThoughtSpaceSection = field(default_factory=ThoughtSpaceSection)
    sft: SftSection = field(default_factory=SftSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def section(self, name: str) -> dict:
        return dataclasses.asdict(getattr(self, name))


def _check_type(path: str, value: Any, hint) -> Any:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union or (origin is not None and type(None) in args):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _check_type(path, value, inner[0])
    if hint is bool:
        ok = isinstance(value, bool)
    elif hint is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif hint is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif hint is str:
        ok = isinstance(value, str)
    elif hint is list or origin is list:
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise InvalidArgument(f"config key {path} expects {getattr(hint, '__name__', hint)}, got {value!r}")
    return value


def _build(cls, raw: dict, prefix: str):
    if not isinstance(raw, dict):
        raise InvalidArgument(f"config section {prefix or '<root>'} must be an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise InvalidArgument(f"unknown config key(s): {', '.join(prefix + k for k in unknown)}")
    kwargs = {}
    for key, value in raw.items():
        hint = hints[key]
        if dataclasses.is_dataclass(hint):
            kwargs[key] = _build(hint, value, f"{prefix}{key}.")
        else:
            kwargs[key] = _check_type(prefix + key, value, hint)
    return cls(**kwargs)


def parse_config(raw: dict) -> RunConfig:
    cfg = _build(RunConfig, raw, "")
    validate(cfg)
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return parse_config({})
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read config file {path}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidArgument(f"config file {path} is not valid JSON: {exc}") from exc
    return parse_config(raw)


def validate(cfg: RunConfig) -> None:
    if cfg.data.source not in ("synthetic", "jsonl"):
        raise InvalidArgument("data.source must be 'synthetic' or 'jsonl'")
    if cfg.data.source == "jsonl" and not cfg.data.path:
        raise InvalidArgument("data.path is required when data.source is 'jsonl'")
    if cfg.rationale.backend not in ("mock", "http"):
        raise InvalidArgument("rationale.backend must be 'mock' or 'http'")
    if cfg.rationale.backend == "http" and not cfg.rationale.base_url:
        raise InvalidArgument("rationale.base_url is required for the http backend")
    if cfg.rationale.n < 1 or cfg.rationale.m < 1 or cfg.rationale.similar_k < 1:
        raise InvalidArgument("rationale.n, rationale.m and rationale.similar_k must be >= 1")
    if not 0.0 < cfg.sft.early_stop_fraction < 1.0:
        raise InvalidArgument("sft.early_stop_fraction must lie in (0, 1)")
    from pulse.sft import SelectionMethod
    try:
        SelectionMethod(cfg.sft.method)
        for arm in cfg.eval.ablation_b_arms:
            SelectionMethod(arm)
    except ValueError as exc:
        raise InvalidArgument(str(exc)) from None
    bad = set(cfg.eval.ablation_a_arms) - {"thought_space", "frozen_generic", "external_vectors"}
    if bad:
        raise InvalidArgument(f"unknown ablation A arm(s): {sorted(bad)}")


def schema() -> list[dict]:
    """Every config key with its type and default, in declaration order."""
    rows = []

    def walk(cls, prefix: str):
        hints = typing.get_type_hints(cls)
        default = cls()
        for f in dataclasses.fields(cls):
            hint = hints[f.name]
            if dataclasses.is_dataclass(hint):
                walk(hint, f"{prefix}{f.name}.")
                continue
            name = getattr(hint, "__name__", None) or str(hint).replace("typing.", "")
            if typing.get_origin(hint) is not None and type(None) in typing.get_args(hint):
                inner = [a for a in typing.get_args(hint) if a is not type(None)][0]
                name = f"{getattr(inner, '__name__', inner)} | null"
            rows.append({"key": prefix + f.name, "type": name, "default": getattr(default, f.name)})

    walk(RunConfig, "")
    return rows
