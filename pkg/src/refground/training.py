"""Corpus-to-model wiring: datasets, stage training, and engine assembly."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import seqmodel, spatial
from .cluster import SynonymTable
from .featurizer import AttributeFeaturizer, encode_bbox, whole_image_region
from .pipeline import EngineConfig, GroundingEngine
from .scene import SceneRecord
from .seqmodel import SeqModel, TrainConfig
from .spatial import SpatialExample, SpatialModel
from .vocab import Expression, Vocabulary, build_vocab

SEMANTIC_EMBED_DIM = 32
SEMANTIC_HIDDEN_DIM = 64
SPATIAL_EMBED_DIM = 32
SPATIAL_HIDDEN_DIM = 96


@dataclass(frozen=True)
class TrainSettings:
    feature_dim: int = 64
    reduced_dim: int = 32
    semantic_epochs: int = 30
    spatial_epochs: int = 30
    learning_rate: float = 1e-3
    batch_size: int = 32
    grad_clip: float = 5.0
    seed: int = 0
    margin_weight: float = 1.0
    margin: float = 1.0


def build_vocabulary(records: list[SceneRecord], min_count: int = 1) -> Vocabulary:
    corpus = [Expression.from_text(e.text)
              for record in records for e in record.expressions]
    return build_vocab(corpus, min_count=min_count)


def build_semantic_dataset(records: list[SceneRecord], vocab: Vocabulary,
                           featurizer: AttributeFeaturizer
                           ) -> list[tuple[np.ndarray, list[int]]]:
    """(target-region features, token ids) pairs from semantic_only expressions."""
    dataset = []
    for record in records:
        scene = record.scene
        feats = {o.id: featurizer.features(scene, o.bbox) for o in scene.objects}
        for expr in record.expressions:
            if expr.kind != "semantic_only":
                continue
            tokens = vocab.encode(Expression.from_text(expr.text).tokens)
            dataset.append((feats[expr.target_object_id], tokens))
    return dataset


def build_spatial_dataset(records: list[SceneRecord], vocab: Vocabulary,
                          featurizer: AttributeFeaturizer) -> list[SpatialExample]:
    """Pairwise examples over all objects; both expression kinds are used.

    The positive context is the annotated relation context when present,
    otherwise the whole image.
    """
    dataset = []
    for record in records:
        scene = record.scene
        ids = [o.id for o in scene.objects]
        feats = np.stack([featurizer.features(scene, o.bbox) for o in scene.objects])
        encs = np.stack([encode_bbox(o.bbox, scene.width, scene.height)
                         for o in scene.objects])
        whole_feat, whole_enc = whole_image_region(scene, featurizer)
        for expr in record.expressions:
            context = (ids.index(expr.context_object_id)
                       if expr.context_object_id is not None else None)
            dataset.append(SpatialExample(
                candidate_features=feats,
                candidate_encodings=encs,
                whole_feature=whole_feat,
                whole_encoding=whole_enc,
                token_ids=vocab.encode(Expression.from_text(expr.text).tokens),
                target_index=ids.index(expr.target_object_id),
                positive_context=context,
            ))
    return dataset


def train_semantic_model(records: list[SceneRecord], vocab: Vocabulary,
                         settings: TrainSettings,
                         featurizer: AttributeFeaturizer | None = None
                         ) -> tuple[SeqModel, list[float]]:
    featurizer = featurizer or AttributeFeaturizer(settings.feature_dim)
    dataset = build_semantic_dataset(records, vocab, featurizer)
    model = seqmodel.init_model(vocab, embed_dim=SEMANTIC_EMBED_DIM,
                                hidden_dim=SEMANTIC_HIDDEN_DIM,
                                cond_dim=settings.feature_dim,
                                seed=settings.seed, role="semantic")
    config = TrainConfig(learning_rate=settings.learning_rate,
                         epochs=settings.semantic_epochs,
                         batch_size=settings.batch_size,
                         seed=settings.seed,
                         grad_clip=settings.grad_clip)
    return seqmodel.train(model, dataset, config)


def train_spatial_model(records: list[SceneRecord], vocab: Vocabulary,
                        settings: TrainSettings,
                        featurizer: AttributeFeaturizer | None = None
                        ) -> tuple[SpatialModel, list[float]]:
    featurizer = featurizer or AttributeFeaturizer(settings.feature_dim)
    dataset = build_spatial_dataset(records, vocab, featurizer)
    model = spatial.init_spatial_model(vocab, feature_dim=settings.feature_dim,
                                       reduced_dim=settings.reduced_dim,
                                       embed_dim=SPATIAL_EMBED_DIM,
                                       hidden_dim=SPATIAL_HIDDEN_DIM,
                                       seed=settings.seed)
    config = TrainConfig(learning_rate=settings.learning_rate,
                         epochs=settings.spatial_epochs,
                         batch_size=settings.batch_size,
                         seed=settings.seed,
                         grad_clip=settings.grad_clip)
    result = spatial.train_spatial(model, dataset, config,
                                   margin_weight=settings.margin_weight,
                                   margin=settings.margin)
    return result.model, result.epoch_losses


def train_engine(records: list[SceneRecord],
                 settings: TrainSettings | None = None,
                 synonyms: SynonymTable | None = None,
                 engine_config: EngineConfig | None = None) -> GroundingEngine:
    """Train both stages on a corpus and assemble a ready engine."""
    settings = settings or TrainSettings()
    vocab = build_vocabulary(records)
    featurizer = AttributeFeaturizer(settings.feature_dim)
    semantic_model, _ = train_semantic_model(records, vocab, settings, featurizer)
    spatial_model, _ = train_spatial_model(records, vocab, settings, featurizer)
    return GroundingEngine(
        semantic_model=semantic_model,
        spatial_model=spatial_model,
        featurizer=featurizer,
        synonyms=synonyms or SynonymTable.load(),
        config=engine_config or EngineConfig(),
    )


# ---------------------------------------------------------------------------
# Engine persistence (a models directory with one bundle per stage)
# ---------------------------------------------------------------------------

SEMANTIC_BUNDLE = "semantic.json"
SPATIAL_BUNDLE = "spatial.json"


def save_engine_models(engine: GroundingEngine, models_dir: str | Path) -> None:
    models_dir = Path(models_dir)
    models_dir.mkdir(parents=True, exist_ok=True)
    seqmodel.save_model(engine.semantic_model, models_dir / SEMANTIC_BUNDLE,
                        extra={"feature_dim": engine.featurizer.dim})
    spatial.save_spatial_model(engine.spatial_model, models_dir / SPATIAL_BUNDLE)


def load_engine(models_dir: str | Path,
                synonyms: SynonymTable | None = None,
                engine_config: EngineConfig | None = None) -> GroundingEngine:
    models_dir = Path(models_dir)
    semantic_model, extra = seqmodel.load_model(models_dir / SEMANTIC_BUNDLE)
    if semantic_model.role != "semantic":
        raise ValueError("semantic bundle has the wrong role")
    feature_dim = int(extra.get("feature_dim", semantic_model.cond_dim))
    spatial_model = spatial.load_spatial_model(models_dir / SPATIAL_BUNDLE)
    return GroundingEngine(
        semantic_model=semantic_model,
        spatial_model=spatial_model,
        featurizer=AttributeFeaturizer(feature_dim),
        synonyms=synonyms or SynonymTable.load(),
        config=engine_config or EngineConfig(),
    )
