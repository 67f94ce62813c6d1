"""Stage 2: pairwise target-context scoring with noisy-or aggregation.

Each candidate is scored as a target against every other candidate plus a
whole-image pseudo-context (k^2 pair evaluations for k candidates).  Pair
sentence losses become probabilities through a length-normalized likelihood
exp(-nll/(T+1)), and per-target evidence is aggregated with either noisy-or
or max.  Training penalizes pairs whose target is wrong via a hinge on the
NLL gap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import seqmodel
from .featurizer import AttributeFeaturizer, whole_image_region
from .scene import Scene
from .semantic import ScoredRegion
from .seqmodel import SeqModel, TrainConfig, _backward_batch, _forward_batch, _pad_batch
from .vocab import Expression

DEFAULT_REDUCED_DIM = 32
BOX_DIM = 5
WHOLE_IMAGE = -1  # context index of the whole-image pseudo-region


@dataclass(frozen=True)
class PairScore:
    target_index: int
    context_index: int  # WHOLE_IMAGE for the full-canvas context
    probability: float

    def __post_init__(self):
        if not (0.0 < self.probability <= 1.0):
            raise ValueError("pair probability must lie in (0, 1]")


@dataclass
class SpatialModel:
    projection: np.ndarray  # feature_dim x reduced_dim
    seq: SeqModel

    def __post_init__(self):
        expected = 2 * (self.projection.shape[1] + BOX_DIM)
        if self.seq.cond_dim != expected:
            raise ValueError(
                f"sequence model expects cond_dim {self.seq.cond_dim}, "
                f"pair input has {expected}")

    @property
    def feature_dim(self) -> int:
        return self.projection.shape[0]

    @property
    def reduced_dim(self) -> int:
        return self.projection.shape[1]

    @property
    def vocab(self):
        return self.seq.vocab

    def copy(self) -> "SpatialModel":
        return SpatialModel(projection=self.projection.copy(), seq=self.seq.copy())


def init_spatial_model(vocab, feature_dim: int = 64,
                       reduced_dim: int = DEFAULT_REDUCED_DIM,
                       embed_dim: int = 32, hidden_dim: int = 96,
                       seed: int = 0) -> SpatialModel:
    rng = np.random.default_rng(seed)
    scale = 1.0 / math.sqrt(feature_dim)
    projection = rng.uniform(-scale, scale, size=(feature_dim, reduced_dim))
    seq = seqmodel.init_model(vocab, embed_dim=embed_dim, hidden_dim=hidden_dim,
                              cond_dim=2 * (reduced_dim + BOX_DIM),
                              seed=seed + 1, role="spatial")
    return SpatialModel(projection=projection, seq=seq)


def pair_input(model: SpatialModel, target_feature: np.ndarray,
               target_encoding: np.ndarray, context_feature: np.ndarray,
               context_encoding: np.ndarray) -> np.ndarray:
    """Concatenated [proj(f_t), b_t, proj(f_c), b_c] conditioning vector."""
    return np.concatenate([
        target_feature @ model.projection, target_encoding,
        context_feature @ model.projection, context_encoding,
    ])


def nll_to_probability(nll: float | np.ndarray, token_count: int):
    """Per-token geometric-mean likelihood exp(-nll/(T+1)); monotone in -nll."""
    return np.exp(-np.asarray(nll) / (token_count + 1))


def noisy_or(probabilities) -> float:
    """1 - prod(1 - p): treats each pair as independent positive evidence."""
    p = np.asarray(probabilities, dtype=np.float64)
    if p.size == 0:
        raise ValueError("noisy-or needs at least one probability")
    if np.any(p < 0.0) or np.any(p > 1.0):
        raise ValueError("probabilities must lie in [0, 1]")
    return float(1.0 - np.prod(1.0 - p))


def pair_probability(model: SpatialModel, target: ScoredRegion,
                     context, query: Expression,
                     context_index: int = WHOLE_IMAGE,
                     target_index: int = 0) -> PairScore:
    """Probability for one target-context pair.

    ``context`` is either another ScoredRegion or a (feature, box_encoding)
    pair for the whole-image context.
    """
    if isinstance(context, ScoredRegion):
        c_feat, c_enc = context.feature, context.box_encoding
    else:
        c_feat, c_enc = context
    cond = pair_input(model, target.feature, target.box_encoding, c_feat, c_enc)
    token_ids = model.vocab.encode(query.tokens)
    nll = seqmodel.sequence_nll(model.seq, cond, token_ids)
    return PairScore(target_index=target_index, context_index=context_index,
                     probability=float(nll_to_probability(nll, len(token_ids))))


def pair_probability_matrix(model: SpatialModel, candidates: list[ScoredRegion],
                            scene: Scene, query: Expression,
                            featurizer: AttributeFeaturizer | None = None
                            ) -> np.ndarray:
    """(k, k+1) matrix of pair probabilities.

    Row t holds target t against contexts 0..k-1 (NaN on the self slot) with
    the whole-image context in the last column.  All k^2 pair sentences are
    scored in one batched forward pass.
    """
    if not candidates:
        raise ValueError("no candidates to rank")
    k = len(candidates)
    whole_feat, whole_enc = whole_image_region(scene, featurizer)
    token_ids = model.vocab.encode(query.tokens)

    conds = []
    slots = []
    for t, target in enumerate(candidates):
        for c, context in enumerate(candidates):
            if c == t:
                continue
            conds.append(pair_input(model, target.feature, target.box_encoding,
                                    context.feature, context.box_encoding))
            slots.append((t, c))
        conds.append(pair_input(model, target.feature, target.box_encoding,
                                whole_feat, whole_enc))
        slots.append((t, k))

    nlls = seqmodel.sequence_nll_batch(model.seq, np.stack(conds),
                                       [token_ids] * len(conds))
    probs = nll_to_probability(nlls, len(token_ids))
    matrix = np.full((k, k + 1), np.nan)
    for (t, c), prob in zip(slots, probs):
        matrix[t, c] = prob
    return matrix


def aggregate_noisy_or(matrix: np.ndarray) -> np.ndarray:
    k = matrix.shape[0]
    return np.array([noisy_or(matrix[t][~np.isnan(matrix[t])]) for t in range(k)])


def aggregate_max(matrix: np.ndarray) -> np.ndarray:
    k = matrix.shape[0]
    return np.array([float(np.nanmax(matrix[t])) for t in range(k)])


def _ranked(candidates: list[ScoredRegion], scores: np.ndarray
            ) -> list[tuple[ScoredRegion, float]]:
    order = sorted(range(len(candidates)),
                   key=lambda t: (-scores[t], candidates[t].loss, t))
    return [(candidates[t], float(scores[t])) for t in order]


def rank_noisy_or(model: SpatialModel, candidates: list[ScoredRegion],
                  scene: Scene, query: Expression,
                  featurizer: AttributeFeaturizer | None = None
                  ) -> list[tuple[ScoredRegion, float]]:
    """Rank candidates by noisy-or aggregated pair evidence (descending)."""
    matrix = pair_probability_matrix(model, candidates, scene, query, featurizer)
    return _ranked(candidates, aggregate_noisy_or(matrix))


def rank_max(model: SpatialModel, candidates: list[ScoredRegion],
             scene: Scene, query: Expression,
             featurizer: AttributeFeaturizer | None = None
             ) -> list[tuple[ScoredRegion, float]]:
    """Rank candidates by the single best context pair (descending)."""
    matrix = pair_probability_matrix(model, candidates, scene, query, featurizer)
    return _ranked(candidates, aggregate_max(matrix))


# ---------------------------------------------------------------------------
# Negative-margin training
# ---------------------------------------------------------------------------

@dataclass
class SpatialExample:
    """One training item: all candidate regions of a scene plus the query."""

    candidate_features: np.ndarray   # (n, feature_dim)
    candidate_encodings: np.ndarray  # (n, 5)
    whole_feature: np.ndarray
    whole_encoding: np.ndarray
    token_ids: list[int]
    target_index: int
    positive_context: int | None = None  # None -> whole-image context

    def __post_init__(self):
        n = self.candidate_features.shape[0]
        if not (0 <= self.target_index < n):
            raise ValueError("true target must be among the candidates")
        if self.positive_context is not None and not (0 <= self.positive_context < n):
            raise ValueError("positive context index out of range")

    @property
    def n_candidates(self) -> int:
        return self.candidate_features.shape[0]

    def context_feature_encoding(self) -> tuple[np.ndarray, np.ndarray]:
        if self.positive_context is None:
            return self.whole_feature, self.whole_encoding
        return (self.candidate_features[self.positive_context],
                self.candidate_encodings[self.positive_context])


@dataclass
class SpatialTrainResult:
    model: SpatialModel
    epoch_losses: list[float] = field(default_factory=list)
    skipped_examples: int = 0


def _batch_conditions(model: SpatialModel, examples: list[SpatialExample],
                      target_indices: list[int]) -> np.ndarray:
    rows = []
    for ex, t in zip(examples, target_indices):
        c_feat, c_enc = ex.context_feature_encoding()
        rows.append(np.concatenate([
            ex.candidate_features[t] @ model.projection, ex.candidate_encodings[t],
            c_feat @ model.projection, c_enc,
        ]))
    return np.stack(rows)


def _projection_grad(model: SpatialModel, examples: list[SpatialExample],
                     target_indices: list[int], dcond: np.ndarray) -> np.ndarray:
    rd = model.reduced_dim
    dproj = np.zeros_like(model.projection)
    for row, (ex, t) in enumerate(zip(examples, target_indices)):
        c_feat, _ = ex.context_feature_encoding()
        dproj += np.outer(ex.candidate_features[t], dcond[row, :rd])
        dproj += np.outer(c_feat, dcond[row, rd + BOX_DIM:2 * rd + BOX_DIM])
    return dproj


def train_spatial(model: SpatialModel, dataset: list[SpatialExample],
                  config: TrainConfig, margin_weight: float = 1.0,
                  margin: float = 1.0) -> SpatialTrainResult:
    """Hinge-on-NLL-gap training with one resampled negative per example/epoch.

    Loss per example is nll(positive pair) plus
    margin_weight * max(0, margin - (nll(negative) - nll(positive))) where
    the negative replaces the target with a uniformly random wrong candidate.
    Single-candidate examples have no negative and are skipped (counted).
    """
    if not dataset:
        raise ValueError("training dataset must be non-empty")
    usable = [ex for ex in dataset if ex.n_candidates > 1]
    skipped = len(dataset) - len(usable)
    if not usable:
        raise ValueError("every example was skipped (single candidate each)")

    trained = model.copy()
    all_params = {"projection": trained.projection, **trained.seq.params}
    optimizer = seqmodel._Optimizer(config, all_params)
    rng = np.random.default_rng(config.seed)
    n = len(usable)
    history: list[float] = []

    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            idx = [int(i) for i in order[start:start + config.batch_size]]
            batch = [usable[i] for i in idx]
            b = len(batch)
            pos_targets = [ex.target_index for ex in batch]
            neg_targets = []
            for ex in batch:
                wrong = [i for i in range(ex.n_candidates) if i != ex.target_index]
                neg_targets.append(int(rng.choice(wrong)))

            seqs = [list(ex.token_ids) for ex in batch]
            inputs, targets, mask = _pad_batch(seqs)
            cond_pos = _batch_conditions(trained, batch, pos_targets)
            cond_neg = _batch_conditions(trained, batch, neg_targets)
            nll_pos, cache_pos = _forward_batch(trained.seq, cond_pos, inputs,
                                                targets, mask, keep_cache=True)
            nll_neg, cache_neg = _forward_batch(trained.seq, cond_neg, inputs,
                                                targets, mask, keep_cache=True)
            hinge = margin - (nll_neg - nll_pos)
            active = (hinge > 0.0).astype(np.float64)
            losses = nll_pos + margin_weight * np.maximum(0.0, hinge)
            if not np.all(np.isfinite(losses)):
                raise RuntimeError(f"non-finite loss at epoch {epoch + 1}")
            epoch_loss += float(losses.sum())

            w_pos = (1.0 + margin_weight * active) / b
            w_neg = (-margin_weight * active) / b
            grads_pos, dcond_pos = _backward_batch(trained.seq, cache_pos, w_pos)
            grads_neg, dcond_neg = _backward_batch(trained.seq, cache_neg, w_neg)
            grads = {k: grads_pos[k] + grads_neg[k] for k in grads_pos}
            grads["projection"] = (
                _projection_grad(trained, batch, pos_targets, dcond_pos)
                + _projection_grad(trained, batch, neg_targets, dcond_neg))

            seqmodel.clip_gradients(grads, config.grad_clip)
            optimizer.step(all_params, grads)
        history.append(epoch_loss / n)

    return SpatialTrainResult(model=trained, epoch_losses=history,
                              skipped_examples=skipped)


def grad_check_spatial(model: SpatialModel, example: SpatialExample,
                       epsilon: float = 1e-5, n_coords: int = 200,
                       seed: int = 0, corrupt_gate: str | None = None,
                       noise_floor: float = seqmodel.GRAD_NOISE_FLOOR) -> float:
    """Finite-difference check covering the projection and recurrent weights.

    Same noise-floor convention as seqmodel.grad_check: coordinates whose
    gradients sit below the difference-quotient noise report as 0.
    """
    if not (1e-7 <= epsilon <= 1e-3):
        raise ValueError("epsilon must lie in [1e-7, 1e-3]")
    inputs, targets, mask = _pad_batch([list(example.token_ids)])
    target_idx = [example.target_index]

    def loss_with(probe: SpatialModel) -> float:
        cond = _batch_conditions(probe, [example], target_idx)
        losses, _ = _forward_batch(probe.seq, cond, inputs, targets, mask,
                                   keep_cache=False)
        return float(losses[0])

    cond = _batch_conditions(model, [example], target_idx)
    _, cache = _forward_batch(model.seq, cond, inputs, targets, mask, keep_cache=True)
    seq_grads, dcond = _backward_batch(model.seq, cache, weights=np.ones(1),
                                       corrupt_gate=corrupt_gate)
    analytic = {**seq_grads,
                "projection": _projection_grad(model, [example], target_idx, dcond)}
    reference = {"projection": model.projection, **model.seq.params}

    names = sorted(reference)
    sizes = [reference[k].size for k in names]
    rng = np.random.default_rng(seed)
    coords = rng.choice(sum(sizes), size=min(n_coords, sum(sizes)), replace=False)

    worst = 0.0
    for flat in sorted(int(c) for c in coords):
        for name, size in zip(names, sizes):
            if flat < size:
                break
            flat -= size
        index = np.unravel_index(flat, reference[name].shape)
        probe = model.copy()
        probe_params = {"projection": probe.projection, **probe.seq.params}
        probe_params[name][index] += epsilon
        loss_plus = loss_with(probe)
        probe_params[name][index] -= 2.0 * epsilon
        loss_minus = loss_with(probe)
        numeric = (loss_plus - loss_minus) / (2.0 * epsilon)
        a = float(analytic[name][index])
        if max(abs(a), abs(numeric)) <= noise_floor:
            continue
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Bundle persistence
# ---------------------------------------------------------------------------

def save_spatial_model(model: SpatialModel, path) -> None:
    seqmodel.save_model(model.seq, path, extra={
        "projection": model.projection.tolist(),
        "feature_dim": model.feature_dim,
        "reduced_dim": model.reduced_dim,
    })


def load_spatial_model(path) -> SpatialModel:
    seq, extra = seqmodel.load_model(path)
    if seq.role != "spatial":
        raise ValueError(f"expected a spatial bundle, got role {seq.role!r}")
    projection = np.array(extra["projection"], dtype=np.float64)
    return SpatialModel(projection=projection, seq=seq)
