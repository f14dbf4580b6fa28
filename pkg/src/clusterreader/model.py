"""The assembled reader: embeddings -> CNN -> slot attention -> aggregation.

Ties the component modules together around a per-cluster token index, and
exposes the two things the rest of the package needs: differentiable value
scores for training, and decoded predictions (optionally sharpened by the
constraint layer) for inference.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import aggregator as agg
from . import compute as C
from . import constraints as K
from . import corpus as cp
from . import encoder as E
from . import scorer as S
from .aggregator import NULL_VALUE
from .scorer import NULL_SLOT


@dataclass
class ClusterIndex:
    """Flattened token/mention view of one cluster with global indices."""

    cluster: cp.Cluster
    flat_tokens: list = field(default_factory=list)
    doc_lengths: list = field(default_factory=list)
    mention_rows: list = field(default_factory=list)   # (mention, doc_pos, global_first_token)
    mention_token_set: set = field(default_factory=set)
    groups: dict = field(default_factory=dict)         # value_id -> [global_first_token]

    @classmethod
    def build(cls, cluster: cp.Cluster) -> "ClusterIndex":
        idx = cls(cluster=cluster)
        offset = 0
        for pos, doc in enumerate(cluster.documents):
            idx.flat_tokens.extend(doc.flat_tokens())
            idx.doc_lengths.append(doc.n_tokens)
            for m in doc.mentions:
                k = offset + m.start
                idx.mention_rows.append((m, pos, k))
                idx.mention_token_set.update(range(offset + m.start, offset + m.end))
                idx.groups.setdefault(m.value_id, []).append(k)
            offset += doc.n_tokens
        return idx

    @property
    def n_tokens(self) -> int:
        return len(self.flat_tokens)


@dataclass
class ReaderModel:
    table: E.EmbeddingTable
    enc: E.EncoderParams
    pi: dict                      # slot name -> embedding tensor
    slots: tuple = cp.EVAL_SLOTS

    def params(self) -> dict:
        out = dict(self.enc.as_dict())
        out.update(S.slot_params(self.pi))
        out["mask_vector"] = self.table.mask_vector
        return out

    def scoring_slots(self) -> list:
        return [s for s in self.pi if s != NULL_SLOT]

    def representations(self, index: ClusterIndex, training: bool = False,
                        keep_prob: float = 1.0, rng=None) -> C.Tensor:
        embedded = E.embed_cluster(index.flat_tokens, index.mention_token_set, self.table)
        return E.encode(embedded, index.doc_lengths, self.enc,
                        training=training, keep_prob=keep_prob, rng=rng)

    def token_scores(self, R: C.Tensor) -> dict:
        return {s: S.score_tokens(R, p) for s, p in self.pi.items()}

    def value_scores(self, index: ClusterIndex, config: agg.AggregationConfig,
                     training: bool = False, keep_prob: float = 1.0, rng=None,
                     gold_for_fit: dict | None = None) -> dict:
        """Differentiable {slot: {value_id or NULL_VALUE: scalar tensor}}."""
        R = self.representations(index, training=training, keep_prob=keep_prob, rng=rng)
        scores = self.token_scores(R)
        token_weights = None
        if config.mode == "weighted_sum":
            token_weights = agg.weights_for(index.cluster, config.weight_source, gold_for_fit)
        table = {}
        for slot in self.scoring_slots():
            u = scores[slot]
            if config.mode == "per_document_softmax_sum":
                a = agg.per_document_attention(u, index.doc_lengths)
            else:
                a = S.attend(u)
            grouped = agg.group_mention_scores(a, index.groups)
            if config.mode == "max":
                vals = agg.aggregate_max(grouped)
            elif config.mode == "weighted_sum":
                weights = {v: token_weights[index.groups[v]] for v in grouped}
                vals = agg.aggregate_sum(grouped, weights)
            else:
                vals = agg.aggregate_sum(grouped)
            if config.null_enabled:
                vals[NULL_VALUE] = agg.null_score(a, index.mention_token_set, token_weights)
            table[slot] = vals
        return table

    def mention_slot_logits(self, index: ClusterIndex, training: bool = False,
                            keep_prob: float = 1.0, rng=None) -> list:
        """Per mention: raw slot scores at its first token (mention-level mode)."""
        R = self.representations(index, training=training, keep_prob=keep_prob, rng=rng)
        scores = self.token_scores(R)
        slot_order = list(self.pi)
        out = []
        for _, _, k in index.mention_rows:
            out.append(C.stack([C.tsum(C.take(scores[s], [k])) for s in slot_order]))
        return out


def init_model(vocab_tokens, hp, rng: np.random.Generator,
               table: E.EmbeddingTable | None = None) -> ReaderModel:
    """Fresh model; random embedding table unless a pretrained one is given."""
    if table is None:
        table = E.random_table(vocab_tokens, hp.embed_dim, rng)
    enc = E.init_encoder(table.dim, rng, width1=hp.width1, d1=hp.d1,
                         width2=hp.width2, r=hp.r)
    pi = S.init_slot_embeddings(cp.EVAL_SLOTS, hp.r, rng,
                                include_null_slot=(hp.loss_mode == "mention_level"))
    return ReaderModel(table=table, enc=enc, pi=pi)


def float_table(table: dict) -> dict:
    return {slot: {v: t.item() for v, t in vals.items()} for slot, vals in table.items()}


def rank_values(scores: dict) -> list:
    """Value keys best-first; ties go to the smaller id with NULL last."""
    return [k for k, _ in sorted(scores.items(),
                                 key=lambda kv: (-kv[1], kv[0] == NULL_VALUE, kv[0]))]


def _mention_mode_tables(model: ReaderModel, index: ClusterIndex, decode: str) -> dict:
    """Score tables for the mention-classification baseline.

    decode='none' treats each mention as classified into its argmax slot and
    lets the most confident classified mention win that slot (slots winning
    no mention fall to NULL); 'max'/'sum' pool the per-mention slot
    probabilities over each value's mentions with no NULL candidate.
    """
    logits = model.mention_slot_logits(index)
    slot_order = list(model.pi)
    probs = [C.softmax(t).data for t in logits]
    slots = model.scoring_slots()
    table: dict = {s: {} for s in slots}
    if decode == "none":
        for s in slots:
            table[s][NULL_VALUE] = 0.0
        for (m, _, _), p in zip(index.mention_rows, probs):
            arg = slot_order[int(np.argmax(p))]
            if arg == NULL_SLOT:
                continue
            cur = table[arg].get(m.value_id, 0.0)
            table[arg][m.value_id] = max(cur, float(p.max()))
        return table
    for s in slots:
        si = slot_order.index(s)
        for (m, _, _), p in zip(index.mention_rows, probs):
            prev = table[s].get(m.value_id)
            val = float(p[si])
            if decode == "max":
                table[s][m.value_id] = val if prev is None else max(prev, val)
            else:
                table[s][m.value_id] = val if prev is None else prev + val
    return table


def predict_cluster(model: ReaderModel, cluster: cp.Cluster,
                    config: agg.AggregationConfig, bp_iterations=0,
                    mention_decode: str | None = None) -> dict:
    """Decode one cluster into the prediction-record format."""
    index = ClusterIndex.build(cluster)
    if index.n_tokens == 0 or not index.groups:
        empty = {s: None for s in model.scoring_slots()}
        return {"cluster_id": cluster.cluster_id, "predictions": empty,
                "scores": {s: {NULL_VALUE: 1.0} for s in model.scoring_slots()}}
    if mention_decode is not None:
        scores = _mention_mode_tables(model, index, mention_decode)
        scores = {s: (vals if vals else {NULL_VALUE: 0.0}) for s, vals in scores.items()}
    else:
        scores = float_table(model.value_scores(index, config))
    if bp_iterations != 0:
        values = sorted(v for v in index.groups)
        if any(NULL_VALUE in vals for vals in scores.values()):
            values.append(NULL_VALUE)
        graph = K.build_graph(scores, values, list(scores))
        beliefs = K.run_bp(graph, bp_iterations)
        decode_table = K.beliefs_as_table(graph, beliefs)
    else:
        decode_table = scores
    predictions = agg.decode_top1(decode_table)
    return {"cluster_id": cluster.cluster_id, "predictions": predictions,
            "scores": decode_table}


def predict_clusters(model: ReaderModel, clusters, config: agg.AggregationConfig,
                     bp_iterations=0, mention_decode: str | None = None,
                     threads: int = 1) -> list:
    """Decode many clusters, optionally fanning out across worker threads."""
    def run(cluster):
        return predict_cluster(model, cluster, config, bp_iterations, mention_decode)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(run, clusters))
    return [run(c) for c in clusters]


def predictions_map(records: list) -> dict:
    return {r["cluster_id"]: r["predictions"] for r in records}


def rankings_map(records: list) -> dict:
    return {r["cluster_id"]: {s: rank_values(vals) for s, vals in r["scores"].items()}
            for r in records}
