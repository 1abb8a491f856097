"""Rationale-aligned sequential recommendation: contrastive Thought-Space
alignment of rationales with behaviour, tree-of-thought rationale
selection, and a rationale-conditioned candidate scorer."""

__version__ = "0.1.0"
