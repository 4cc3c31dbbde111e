"""Per-point relevancy between language embeddings and a text query."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cloud import EmbeddedCloud
from .errors import ValidationError
from .ingest import QuerySet

METHODS = ("cosine", "lerf")
HIST_BINS = 20


@dataclass(frozen=True, eq=False)
class RelevancyField:
    scores: np.ndarray
    method: str
    query_text: str = ""

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=float).reshape(-1)
        if self.method not in METHODS:
            raise ValidationError(f"unknown relevancy method {self.method!r}")
        object.__setattr__(self, "scores", s)

    def __len__(self):
        return self.scores.size


@dataclass(frozen=True)
class RelevancyStats:
    min: float
    max: float
    mean: float
    bin_edges: np.ndarray
    counts: np.ndarray


def _embeddings_for(cloud: EmbeddedCloud, q: QuerySet) -> np.ndarray:
    if cloud.embeddings is None:
        raise ValidationError("cloud has no embeddings bound")
    if cloud.embedding_dim != q.dim:
        raise ValidationError(
            f"embedding dim {cloud.embedding_dim} does not match query dim {q.dim}")
    return cloud.embeddings


def cosine_relevancy(cloud: EmbeddedCloud, q: QuerySet) -> RelevancyField:
    e = _embeddings_for(cloud, q)
    return RelevancyField(e @ q.query, "cosine", q.prompt_text)


def lerf_relevancy(cloud: EmbeddedCloud, q: QuerySet) -> RelevancyField:
    """Worst-case pairwise softmax of the query against each canonical phrase.

    ``exp(e.q) / (exp(e.q) + exp(e.c))`` equals ``1 / (1 + exp(e.c - e.q))``, so the
    minimum over canonicals is attained at the canonical most similar to ``e``.
    """
    e = _embeddings_for(cloud, q)
    if len(q.canonicals) == 0:
        raise ValidationError("lerf relevancy needs at least one canonical embedding")
    sq = e @ q.query
    sc = (e @ q.canonicals.T).max(axis=1)
    return RelevancyField(1.0 / (1.0 + np.exp(sc - sq)), "lerf", q.prompt_text)


def compute_relevancy(cloud: EmbeddedCloud, q: QuerySet, method: str = "lerf") -> RelevancyField:
    if method == "cosine":
        return cosine_relevancy(cloud, q)
    if method == "lerf":
        return lerf_relevancy(cloud, q)
    raise ValidationError(f"unknown relevancy method {method!r}")


def relevancy_stats(field: RelevancyField) -> RelevancyStats:
    s = field.scores
    if s.size == 0:
        raise ValidationError("relevancy field is empty")
    lo, hi = float(s.min()), float(s.max())
    counts, edges = np.histogram(s, bins=HIST_BINS, range=(lo, hi))
    return RelevancyStats(lo, hi, float(s.mean()), edges, counts)


def colorize(cloud: EmbeddedCloud, field: RelevancyField) -> EmbeddedCloud:
    """Attach the field as ``relevancy`` and paint it into the red channel.

    Scores are mapped linearly from the field's natural range (``[0, 1]`` for
    lerf, ``[-1, 1]`` for cosine) to red intensity; green and blue stay at zero.
    """
    if len(field) != len(cloud):
        raise ValidationError("relevancy field and cloud differ in length")
    lo = 0.0 if field.method == "lerf" else -1.0
    red = np.clip((field.scores - lo) / (1.0 - lo), 0.0, 1.0)
    colors = np.zeros((len(cloud), 3))
    colors[:, 0] = red
    return cloud.replace(colors=colors, relevancy=field.scores)
