"""Pooling mention scores into value scores, with optional weights and null.

A value is usually mentioned many times across a cluster; these functions
combine the per-mention attention masses into one score per (value, slot):
hard max, plain sum, weighted sum (weights from discourse topicality or from
publication-date information content), or a per-document variant where the
attention softmax is document-local. Attention mass left on non-mention
tokens becomes the score of the null value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import compute as C
from . import corpus as cp

NULL_VALUE = "__NULL__"

MODES = ("max", "sum", "weighted_sum", "per_document_softmax_sum")
WEIGHT_SOURCES = ("unit", "topic", "date")


class AggregationError(ValueError):
    pass


@dataclass(frozen=True)
class AggregationConfig:
    mode: str = "sum"
    weight_source: str = "unit"
    null_enabled: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise AggregationError(f"unknown aggregation mode {self.mode!r}")
        if self.weight_source not in WEIGHT_SOURCES:
            raise AggregationError(f"unknown weight source {self.weight_source!r}")
        if self.mode == "weighted_sum" and self.weight_source == "unit":
            raise AggregationError("weighted_sum needs a topic or date weight source")


def group_mention_scores(a_s: C.Tensor, groups: dict) -> dict:
    """Gather attention at mention indices, one 1-D tensor per value."""
    return {v: C.take(a_s, ks) for v, ks in groups.items() if ks}


def aggregate_max(grouped: dict) -> dict:
    """Best single mention per value."""
    return {v: C.tmax(t) for v, t in grouped.items()}


def aggregate_sum(grouped: dict, weights: dict | None = None) -> dict:
    """Accumulate all mentions per value, optionally scaled by fixed weights."""
    out = {}
    for v, t in grouped.items():
        if weights is None:
            out[v] = C.tsum(t)
        else:
            w = np.asarray(weights[v], dtype=np.float64)
            if np.any(w < 0):
                raise AggregationError(f"negative aggregation weight for value {v!r}")
            if w.shape != t.data.shape:
                raise AggregationError(f"weight count mismatch for value {v!r}")
            out[v] = C.tsum(C.scale(t, w))
    return out


def per_document_attention(u_s: C.Tensor, doc_lengths) -> C.Tensor:
    """Softmax each document's block of scores separately, then reconcatenate."""
    if sum(doc_lengths) != u_s.shape[0]:
        raise AggregationError("doc lengths do not cover the score vector")
    parts = []
    at = 0
    for length in doc_lengths:
        if length == 0:
            continue
        block = C.take(u_s, np.arange(at, at + length))
        parts.append(C.softmax(block))
        at += length
    return C.concat_vec(parts)


def aggregate_per_document(grouped: dict) -> dict:
    """Unit-weight sum; callers pair this with per_document_attention."""
    return aggregate_sum(grouped, None)


def null_score(a_s: C.Tensor, mention_tokens, token_weights=None) -> C.Tensor:
    """Attention mass on tokens outside every mention span, optionally weighted."""
    n = a_s.shape[0]
    outside = np.array(sorted(set(range(n)) - set(mention_tokens)), dtype=np.intp)
    if outside.size == 0:
        return C.Tensor(0.0)
    rest = C.take(a_s, outside)
    if token_weights is not None:
        rest = C.scale(rest, np.asarray(token_weights)[outside])
    return C.tsum(rest)


# ---------------------------------------------------------------------------
# aggregation weights


def _doc_token_counts(cluster: cp.Cluster) -> list[int]:
    return [d.n_tokens for d in cluster.documents]


def topic_weights(cluster: cp.Cluster) -> np.ndarray:
    """1.0 for tokens in on-topic sentences, 0.0 in off-topic ones."""
    weights = []
    for doc in cluster.documents:
        flags = cp.segment_topicality(doc)
        for sid, sent in enumerate(doc.sentences):
            weights.extend([1.0 if flags[sid] else 0.0] * len(sent))
    return np.asarray(weights)


def skew_normal_pdf(x, xi: float, omega: float, alpha: float):
    """Density of the skew-normal distribution, no scipy required."""
    z = (np.asarray(x, dtype=np.float64) - xi) / omega
    phi = np.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
    cdf = 0.5 * (1.0 + _erf_vec(alpha * z / math.sqrt(2)))
    return 2.0 / omega * phi * cdf


def _erf_vec(x):
    return np.vectorize(math.erf)(x)


def fit_skew_normal(positions, masses):
    """Moment-matched (xi, omega, alpha) for weighted points, or None.

    Returns None when the fit is under-determined: zero total mass or zero
    spread. Skewness is clipped to the representable range of the family.
    """
    x = np.asarray(positions, dtype=np.float64)
    w = np.asarray(masses, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        return None
    mean = (w * x).sum() / total
    m2 = (w * (x - mean) ** 2).sum() / total
    if m2 <= 1e-12:
        return None
    m3 = (w * (x - mean) ** 3).sum() / total
    g1 = m3 / m2 ** 1.5
    g1 = float(np.clip(g1, -0.99, 0.99))
    # invert the skewness relation: g1 -> delta
    t = math.copysign(abs(2 * g1 / (4 - math.pi)) ** (1 / 3), g1)
    u = t / math.sqrt(1 + t * t)          # u = delta * sqrt(2/pi)
    delta = u * math.sqrt(math.pi / 2)
    delta = max(-0.999, min(0.999, delta))
    omega = math.sqrt(m2 / (1 - 2 * delta * delta / math.pi))
    xi = mean - omega * delta * math.sqrt(2 / math.pi)
    alpha = delta / math.sqrt(1 - delta * delta)
    return xi, omega, alpha


def date_weights(cluster: cp.Cluster, gold_for_fit: dict | None = None) -> np.ndarray:
    """Per-token weights from a recency curve over dated documents.

    Each dated document's information content is the number of correct
    values it mentions; a skew-normal curve is fit over publication order
    and its density, min-max normalized to [0,1], becomes the document
    weight. Documents without datelines, and all documents when the fit is
    under-determined (fewer than 3 dated documents, no gold, flat curve),
    keep weight 1.0.
    """
    gold = gold_for_fit if gold_for_fit is not None else cluster.gold
    correct = {v for vals in gold.values() for v in vals}
    doc_w = np.ones(len(cluster.documents))
    dated = [i for i, d in enumerate(cluster.documents) if d.dateline]
    if len(dated) >= 3 and correct:
        pos = np.array([cluster.documents[i].order_index for i in dated], dtype=np.float64)
        ic = np.array([len({m.value_id for m in cluster.documents[i].mentions} & correct)
                       for i in dated], dtype=np.float64)
        fit = None if np.ptp(ic) == 0 else fit_skew_normal(pos, ic)
        if fit is not None:
            dens = skew_normal_pdf(pos, *fit)
            span = dens.max() - dens.min()
            if span > 1e-12:
                doc_w[dated] = (dens - dens.min()) / span
    counts = _doc_token_counts(cluster)
    return np.repeat(doc_w, counts) if counts else np.zeros(0)


def weights_for(cluster: cp.Cluster, source: str, gold_for_fit: dict | None = None) -> np.ndarray:
    if source == "unit":
        return np.ones(sum(_doc_token_counts(cluster)))
    if source == "topic":
        return topic_weights(cluster)
    if source == "date":
        return date_weights(cluster, gold_for_fit)
    raise AggregationError(f"unknown weight source {source!r}")


# ---------------------------------------------------------------------------
# decoding


def decode_top1(table: dict) -> dict:
    """Highest-scoring value per slot; ties break to the smaller value_id.

    A tied null never wins over a concrete value. Returns None for slots
    whose best entry is the null value.
    """
    out = {}
    for slot, scores in table.items():
        if not scores:
            raise AggregationError(f"empty score table for slot {slot!r}")
        best = min(scores.items(), key=lambda kv: (-kv[1], kv[0] == NULL_VALUE, kv[0]))
        out[slot] = None if best[0] == NULL_VALUE else best[0]
    return out
