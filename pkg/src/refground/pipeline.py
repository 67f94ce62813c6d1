"""End-to-end grounding: semantic scoring, clustering, spatial ranking.

Also hosts the human-correction iterator (walk the ranked list in likelihood
order) and the two-verb command parser used by the CLI and the service.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import cluster, semantic, spatial
from .cluster import SynonymTable
from .featurizer import AttributeFeaturizer
from .scene import BoundingBox, ProposalSet, Scene
from .semantic import ScoredRegion
from .seqmodel import SeqModel
from .spatial import SpatialModel
from .vocab import Expression, has_content

AGGREGATIONS = ("noisy_or", "max")
COMMANDS = {"pick up": "pick_up", "put it": "put_it"}


class GroundingError(RuntimeError):
    """Pipeline failure annotated with the stage that raised it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass(frozen=True)
class EngineConfig:
    k: int = semantic.DEFAULT_TOP_K
    aggregation: str = "noisy_or"

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}")


@dataclass
class RankedCandidate:
    box: BoundingBox
    score: float
    source_index: int  # position in the stage-1 sorted proposal list


@dataclass
class Diagnostics:
    proposals: list[dict] = field(default_factory=list)
    top_k: int = 0
    relevance: list[dict] = field(default_factory=list)
    relevant: list[int] = field(default_factory=list)
    pair_matrix: list[list[float | None]] = field(default_factory=list)
    aggregation: str = "noisy_or"
    warnings: list[str] = field(default_factory=list)


@dataclass
class GroundingResult:
    query: Expression
    ranked: list[RankedCandidate]
    diagnostics: Diagnostics

    def to_dict(self, include_diagnostics: bool = True) -> dict:
        out = {
            "query": self.query.raw,
            "tokens": list(self.query.tokens),
            "ranked": [{"box": c.box.as_list(), "score": c.score,
                        "proposal_index": c.source_index} for c in self.ranked],
        }
        if include_diagnostics:
            d = self.diagnostics
            out["diagnostics"] = {
                "proposals": d.proposals,
                "top_k": d.top_k,
                "relevance": d.relevance,
                "relevant": d.relevant,
                "pair_matrix": d.pair_matrix,
                "aggregation": d.aggregation,
                "warnings": d.warnings,
            }
        return out


@dataclass
class GroundingEngine:
    semantic_model: SeqModel
    spatial_model: SpatialModel
    featurizer: AttributeFeaturizer
    synonyms: SynonymTable
    config: EngineConfig = field(default_factory=EngineConfig)

    def __post_init__(self):
        if self.semantic_model.vocab.id_to_token != self.spatial_model.vocab.id_to_token:
            raise ValueError("semantic and spatial bundles must share a vocabulary")
        if self.semantic_model.cond_dim != self.featurizer.dim:
            raise ValueError(
                f"semantic model expects {self.semantic_model.cond_dim}-d features, "
                f"featurizer provides {self.featurizer.dim}")
        if self.spatial_model.feature_dim != self.featurizer.dim:
            raise ValueError(
                f"spatial model expects {self.spatial_model.feature_dim}-d features, "
                f"featurizer provides {self.featurizer.dim}")


def ground(engine: GroundingEngine, scene: Scene, proposals: ProposalSet,
           query_text: str, aggregation: str | None = None) -> GroundingResult:
    """Run the four stages and return the ranked relevant candidates."""
    if not has_content(query_text):
        raise GroundingError("query", "query is empty after tokenization")
    aggregation = aggregation or engine.config.aggregation
    if aggregation not in AGGREGATIONS:
        raise GroundingError("query", f"unknown aggregation {aggregation!r}")
    query = Expression.from_text(query_text)

    warnings = []
    if semantic.query_is_all_unk(engine.semantic_model, query):
        warnings.append("query_all_unk")

    try:
        scored = semantic.score_regions(engine.semantic_model, scene, proposals,
                                        query, engine.featurizer)
        shortlist = semantic.top_k(scored, engine.config.k)
    except Exception as exc:  # noqa: BLE001 - annotate stage and re-raise
        raise GroundingError("semantic", str(exc)) from exc

    try:
        points = cluster.normalize_metrics(shortlist, query, engine.synonyms)
        relevant = cluster.relevancy_cluster(points)
    except Exception as exc:
        raise GroundingError("cluster", str(exc)) from exc

    candidates = [shortlist[i] for i in relevant]
    try:
        matrix = spatial.pair_probability_matrix(engine.spatial_model, candidates,
                                                 scene, query, engine.featurizer)
        if aggregation == "noisy_or":
            scores = spatial.aggregate_noisy_or(matrix)
        else:
            scores = spatial.aggregate_max(matrix)
    except Exception as exc:
        raise GroundingError("spatial", str(exc)) from exc

    order = sorted(range(len(candidates)),
                   key=lambda t: (-scores[t], candidates[t].loss, t))
    ranked = [RankedCandidate(box=candidates[t].box, score=float(scores[t]),
                              source_index=relevant[t]) for t in order]

    diagnostics = Diagnostics(
        proposals=[{"box": r.box.as_list(), "loss": r.loss,
                    "caption": r.generated_caption.raw} for r in scored],
        top_k=len(shortlist),
        relevance=[{"index": p.region_index, "m_loss": p.m_loss, "m_gen": p.m_gen}
                   for p in points],
        relevant=list(relevant),
        pair_matrix=[[None if np.isnan(v) else float(v) for v in row]
                     for row in matrix],
        aggregation=aggregation,
        warnings=warnings,
    )
    return GroundingResult(query=query, ranked=ranked, diagnostics=diagnostics)


def next_candidate(result: GroundingResult, rejected: set[int]) -> int | None:
    """Index of the best-ranked candidate not yet rejected; None when exhausted."""
    if not set(rejected) <= set(range(len(result.ranked))):
        raise ValueError("rejected indices must reference the ranked list")
    for idx in range(len(result.ranked)):
        if idx not in rejected:
            return idx
    return None


def parse_command(text: str) -> tuple[str, str]:
    """Split a voice-style command into (action, grounding query).

    The action verb must open the sentence; the remainder is passed to the
    grounding pipeline verbatim.
    """
    lowered = text.strip().lower()
    for prefix, action in COMMANDS.items():
        if lowered.startswith(prefix):
            remainder = text.strip()[len(prefix):].strip()
            return action, remainder
    supported = ", ".join(f'"{p}"' for p in COMMANDS)
    raise ValueError(f"unknown action; commands must start with one of: {supported}")
