"""Prompting, generation backends and tree-of-thought expansion."""
from pulse.rationale.backends import (CountingBackend, GenerationRequest, GenerationResponse,
                                      HttpBackend, MockBackend, generate)
from pulse.rationale.prompts import (PromptContext, build_phase1_prompt, build_phase2_prompt,
                                     build_refine_prompt, load_templates, rank_similar_items)
from pulse.rationale.tot import (Rationale, RationaleTree, expand_tot, gen_negative_pool,
                                 load_rationales, load_trees, rationale_from_text, save_rationales,
                                 save_trees)

__all__ = [
    "CountingBackend", "GenerationRequest", "GenerationResponse", "HttpBackend", "MockBackend",
    "PromptContext", "Rationale", "RationaleTree", "build_phase1_prompt", "build_phase2_prompt",
    "build_refine_prompt", "expand_tot", "gen_negative_pool", "generate", "load_rationales",
    "load_templates", "load_trees", "rank_similar_items", "rationale_from_text", "save_rationales",
    "save_trees",
]
