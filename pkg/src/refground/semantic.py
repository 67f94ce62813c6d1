"""Stage 1: score proposals by query generation loss and keep the top k."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import seqmodel
from .featurizer import AttributeFeaturizer, encode_bbox
from .scene import BoundingBox, ProposalSet, Scene
from .seqmodel import SeqModel
from .vocab import Expression

DEFAULT_TOP_K = 10
CAPTION_MAX_LEN = 8


@dataclass
class ScoredRegion:
    box: BoundingBox
    feature: np.ndarray
    box_encoding: np.ndarray
    loss: float
    generated_caption: Expression

    def __post_init__(self):
        if self.loss < 0:
            raise ValueError("comprehension loss must be non-negative")


def score_regions(model: SeqModel, scene: Scene, proposals: ProposalSet,
                  query: Expression,
                  featurizer: AttributeFeaturizer | None = None) -> list[ScoredRegion]:
    """Comprehension-score every proposal against the query.

    Each region's loss is the teacher-forced NLL of the query given that
    region's features; the per-region greedy caption is kept for the
    relevancy-clustering confidence metric.  Output is sorted by ascending
    loss, ties by box x_min then y_min.
    """
    if model.role != "semantic":
        raise ValueError(f"expected a semantic model, got role {model.role!r}")
    featurizer = featurizer or AttributeFeaturizer(model.cond_dim)
    token_ids = model.vocab.encode(query.tokens)

    features = np.stack([featurizer.features(scene, b) for b in proposals.boxes])
    losses = seqmodel.sequence_nll_batch(
        model, features, [token_ids] * len(proposals.boxes))
    captions = seqmodel.generate_caption_batch(model, features,
                                               max_len=CAPTION_MAX_LEN)

    regions = []
    for idx, box in enumerate(proposals.boxes):
        caption_tokens = captions[idx]
        caption = Expression(raw=" ".join(caption_tokens) if caption_tokens else "<unk>",
                             tokens=tuple(caption_tokens) or ("<unk>",))
        regions.append(ScoredRegion(
            box=box,
            feature=features[idx],
            box_encoding=encode_bbox(box, scene.width, scene.height),
            loss=float(losses[idx]),
            generated_caption=caption,
        ))
    regions.sort(key=lambda r: (r.loss, r.box.x_min, r.box.y_min))
    return regions


def query_is_all_unk(model: SeqModel, query: Expression) -> bool:
    """True when no query token is known to the model vocabulary."""
    from .vocab import UNK_ID
    return all(i == UNK_ID for i in model.vocab.encode(query.tokens))


def top_k(scored: list[ScoredRegion], k: int = DEFAULT_TOP_K) -> list[ScoredRegion]:
    """First min(k, n) regions of the loss-sorted list."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return scored[:k]
