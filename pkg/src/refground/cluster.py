"""Stage 1.5: relevancy clustering of the top-k candidates.

Each candidate becomes a point (inverted normalized loss, normalized
caption-similarity); an exact two-cluster partition separates relevant from
irrelevant candidates.  With at most ten points the globally optimal
partition is found by enumerating every bipartition, which removes the
initialization nondeterminism of iterative k-means.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .semantic import ScoredRegion
from .vocab import Expression

MAX_POINTS = 10


@dataclass(frozen=True)
class RelevancePoint:
    region_index: int
    m_loss: float
    m_gen: float

    def __post_init__(self):
        if not (0.0 <= self.m_loss <= 1.0 and 0.0 <= self.m_gen <= 1.0):
            raise ValueError("relevance coordinates must lie in [0, 1]")


class SynonymTable:
    """Undirected synonym pairs over tokens (symmetric closure maintained)."""

    def __init__(self, pairs=()):
        self._pairs: set[frozenset[str]] = set()
        for a, b in pairs:
            self.add(a, b)

    def add(self, a: str, b: str) -> None:
        if a != b:
            self._pairs.add(frozenset((a, b)))

    def are_synonyms(self, a: str, b: str) -> bool:
        return a == b or frozenset((a, b)) in self._pairs

    def __len__(self) -> int:
        return len(self._pairs)

    @classmethod
    def from_groups(cls, groups) -> "SynonymTable":
        table = cls()
        for group in groups:
            words = list(group)
            for i, a in enumerate(words):
                for b in words[i + 1:]:
                    table.add(a, b)
        return table

    @classmethod
    def load(cls, path: str | Path | None = None) -> "SynonymTable":
        """One comma-separated synonym group per line."""
        if path is None:
            text = resources.files("refground.data").joinpath("synonyms.txt").read_text("utf-8")
        else:
            text = Path(path).read_text(encoding="utf-8")
        groups = []
        for line in text.splitlines():
            line = line.strip()
            if line and not line.startswith("#"):
                groups.append([w.strip().lower() for w in line.split(",") if w.strip()])
        return cls.from_groups(groups)


def meteor_lite(candidate: Expression, reference: Expression,
                synonyms: SynonymTable | None = None) -> float:
    """Unigram METEOR-style similarity in [0, 1].

    Greedy alignment matches exact tokens first, then synonyms, consuming
    each reference token at most once.  Score is the recall-weighted F-mean
    10PR/(R+9P) discounted by a fragmentation penalty
    0.5*(chunks/matches)^3, where chunks counts maximal contiguous matched
    runs in candidate order.
    """
    synonyms = synonyms or SynonymTable()
    cand = list(candidate.tokens)
    ref = list(reference.tokens)
    if not cand or not ref:
        raise ValueError("both expressions must be non-empty")

    used = [False] * len(ref)
    matched = [False] * len(cand)
    for ci, token in enumerate(cand):
        for ri, ref_token in enumerate(ref):
            if not used[ri] and token == ref_token:
                used[ri] = True
                matched[ci] = True
                break
    for ci, token in enumerate(cand):
        if matched[ci]:
            continue
        for ri, ref_token in enumerate(ref):
            if not used[ri] and synonyms.are_synonyms(token, ref_token):
                used[ri] = True
                matched[ci] = True
                break

    m = sum(matched)
    if m == 0:
        return 0.0
    precision = m / len(cand)
    recall = m / len(ref)
    f_mean = 10.0 * precision * recall / (recall + 9.0 * precision)
    chunks = sum(1 for ci, hit in enumerate(matched)
                 if hit and (ci == 0 or not matched[ci - 1]))
    penalty = 0.5 * (chunks / m) ** 3
    return f_mean * (1.0 - penalty)


def _min_max(values: np.ndarray, invert: bool) -> np.ndarray:
    lo, hi = float(values.min()), float(values.max())
    if hi - lo == 0.0:
        return np.ones_like(values)
    scaled = (values - lo) / (hi - lo)
    return 1.0 - scaled if invert else scaled


def normalize_metrics(scored: list[ScoredRegion], query: Expression,
                      synonyms: SynonymTable | None = None) -> list[RelevancePoint]:
    """Map scored candidates to (inverted loss, caption similarity) in [0,1]²."""
    if not scored:
        raise ValueError("no scored regions to normalize")
    losses = np.array([r.loss for r in scored])
    gens = np.array([meteor_lite(r.generated_caption, query, synonyms) for r in scored])
    m_loss = _min_max(losses, invert=True)
    m_gen = _min_max(gens, invert=False)
    return [RelevancePoint(region_index=i, m_loss=float(m_loss[i]), m_gen=float(m_gen[i]))
            for i in range(len(scored))]


def relevancy_cluster(points: list[RelevancePoint]) -> list[int]:
    """Exact optimal 2-partition; returns indices of the relevant cluster.

    Enumerates all 2^(n-1)-1 bipartitions (n <= 10) and minimizes total
    within-cluster squared deviation; the relevant cluster is the one whose
    centroid lies nearer (1, 1), ties going to the cluster holding the point
    with the largest m_loss + m_gen.
    """
    n = len(points)
    if n < 1:
        raise ValueError("need at least one point")
    if n > MAX_POINTS:
        raise ValueError(f"at most {MAX_POINTS} points supported, got {n}")
    if n == 1:
        return [0]

    coords = np.array([[p.m_loss, p.m_gen] for p in points])

    # Point 0 is pinned to cluster A; mask bits select cluster B members.
    # SSE(C) = sum |p|^2 - |sum p|^2 / |C|, evaluated for every bipartition
    # at once.
    masks = np.arange(1, 1 << (n - 1))
    membership = (masks[:, None] >> np.arange(n - 1)[None, :] & 1).astype(np.float64)
    sq_norms = (coords ** 2).sum(axis=1)
    sums_b = membership @ coords[1:]
    counts_b = membership.sum(axis=1)
    sse_b = membership @ sq_norms[1:] - (sums_b ** 2).sum(axis=1) / counts_b
    sums_a = coords.sum(axis=0) - sums_b
    counts_a = n - counts_b
    sse_a = (sq_norms.sum() - membership @ sq_norms[1:]
             - (sums_a ** 2).sum(axis=1) / counts_a)
    best_mask = int(masks[int(np.argmin(sse_a + sse_b))])

    cluster_b = [i + 1 for i in range(n - 1) if best_mask >> i & 1]
    cluster_a = [i for i in range(n) if i not in cluster_b]
    ideal = np.array([1.0, 1.0])
    dist_a = float(np.linalg.norm(coords[cluster_a].mean(axis=0) - ideal))
    dist_b = float(np.linalg.norm(coords[cluster_b].mean(axis=0) - ideal))
    if dist_a < dist_b:
        return cluster_a
    if dist_b < dist_a:
        return cluster_b
    top = int(np.argmax(coords.sum(axis=1)))
    return cluster_a if top in cluster_a else cluster_b
