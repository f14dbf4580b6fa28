"""End-to-end optimization of the reader with early stopping.

One cluster is one gradient step. The standard loss is the negative log of
the aggregated score mass on the gold values (per evaluable slot, averaged);
the mention-level mode instead hard-labels every mention with a matching
slot (or the null pseudo-slot) and trains a per-mention classifier, which
recreates the brittleness of classic distant supervision on purpose.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import compute as C
from . import corpus as cp
from . import encoder as E
from . import scorer as S
from .aggregator import NULL_VALUE, AggregationConfig
from .constraints import run_bp_tensor
from .evaluation import evaluate, instance_from_cluster
from .model import (ClusterIndex, ReaderModel, init_model, predict_clusters,
                    predictions_map)
from .scorer import NULL_SLOT

LOSS_MODES = ("value_level", "mention_level")
MASS_FLOOR = 1e-12


class TrainingError(RuntimeError):
    pass


class DivergenceError(TrainingError):
    """Non-finite loss or gradient during optimization."""


class GradientCheckError(RuntimeError):
    pass


@dataclass
class Hyperparams:
    """Defaults are the tuned configuration: two CNN layers (widths 10 and
    5, both 10 channels), no pooling, Adam at lr 0.003 with L2 0.01, dropout
    keep probability 0.8, 200-dim pretrained embeddings."""

    lr: float = 0.003
    l2: float = 0.01
    keep_prob: float = 0.8
    width1: int = 10
    width2: int = 5
    d1: int = 10
    r: int = 10
    max_pooling: bool = False
    embed_dim: int = 200
    aggregation: AggregationConfig = field(default_factory=AggregationConfig)
    loss_mode: str = "value_level"
    bp_train_iters: int = 0
    seed: int = 13
    max_epochs: int = 200
    patience: int = 10

    def __post_init__(self):
        if self.max_pooling:
            raise TrainingError("max pooling is not part of this architecture; "
                                "the encoder keeps per-token outputs")
        if self.loss_mode not in LOSS_MODES:
            raise TrainingError(f"unknown loss mode {self.loss_mode!r}")


_FIELD_TYPES = {
    "lr": float, "l2": float, "keep_prob": float,
    "width1": int, "width2": int, "d1": int, "r": int, "embed_dim": int,
    "bp_train_iters": int, "seed": int, "max_epochs": int, "patience": int,
    "max_pooling": bool, "loss_mode": str,
}
_AGG_KEYS = {"mode": str, "weight_source": str, "null_enabled": bool}


def hyperparams_from_dict(overrides: dict) -> Hyperparams:
    """Build Hyperparams from string-valued config keys (file or CLI)."""
    kwargs = {}
    agg_kwargs = {}
    for key, raw in overrides.items():
        if key in _AGG_KEYS:
            agg_kwargs[key] = _coerce(raw, _AGG_KEYS[key])
        elif key == "aggregation" and isinstance(raw, AggregationConfig):
            kwargs[key] = raw
        elif key in _FIELD_TYPES:
            kwargs[key] = _coerce(raw, _FIELD_TYPES[key])
        else:
            raise TrainingError(f"unknown hyperparameter {key!r}")
    if agg_kwargs and "aggregation" not in kwargs:
        kwargs["aggregation"] = AggregationConfig(**agg_kwargs)
    return Hyperparams(**kwargs)


def _coerce(raw, target):
    if isinstance(raw, target):
        return raw
    if target is bool:
        return str(raw).strip().lower() in ("1", "true", "yes", "on")
    return target(raw)


# ---------------------------------------------------------------------------
# losses


def value_loss(table: dict, gold: dict, use_softmax: bool = False):
    """Mean negative log gold mass over evaluable slots.

    table: {slot: {value_id or NULL_VALUE: scalar tensor}}. Empty gold sets
    target the null mass. Slots whose gold values have no score (never
    mentioned) are skipped and reported. use_softmax renormalizes each
    slot's scores first, for aggregation modes whose masses are not already
    a distribution.
    """
    losses = []
    skipped = []
    for slot, scores in table.items():
        targets = [v for v in gold.get(slot, ()) if v in scores]
        if not gold.get(slot, ()):
            targets = [NULL_VALUE] if NULL_VALUE in scores else []
        if not targets:
            skipped.append(slot)
            continue
        if use_softmax:
            keys = sorted(scores)
            dist = C.softmax(C.stack([scores[k] for k in keys]))
            mass = C.tsum(C.take(dist, [keys.index(t) for t in targets]))
        else:
            mass = scores[targets[0]]
            for t in targets[1:]:
                mass = C.add(mass, scores[t])
        losses.append(C.neg(C.log(C.clamp(mass, MASS_FLOOR, 1e12))))
    if not losses:
        return None, skipped
    inv = 1.0 / len(losses)
    return C.scale(C.tsum(C.stack(losses)), inv), skipped


def mention_labels(index: ClusterIndex, gold: dict, slots=cp.EVAL_SLOTS) -> list:
    """(mention_position, label_slot) training instances under hard labeling.

    A mention of a value that is gold for k slots yields k positive
    instances; every other mention is a null-slot instance, including
    incidental mentions of gold values in unrelated contexts -- that is the
    distant-supervision noise this mode is meant to exhibit.
    """
    out = []
    for i, (m, _, _) in enumerate(index.mention_rows):
        matched = [s for s in slots if m.value_id in gold.get(s, ())]
        if matched:
            out.extend((i, s) for s in matched)
        else:
            out.append((i, NULL_SLOT))
    return out


def mention_loss(logits: list, index: ClusterIndex, gold: dict, slot_order: list):
    """Mean cross-entropy of per-mention softmax over slots (incl. null)."""
    instances = mention_labels(index, gold)
    if not instances:
        return None
    losses = []
    for i, label in instances:
        dist = C.softmax(logits[i])
        losses.append(C.neg(C.log(C.clamp(C.take(dist, [slot_order.index(label)]),
                                          MASS_FLOOR, 1.0))))
    inv = 1.0 / len(losses)
    return C.scale(C.tsum(C.concat_vec(losses)), inv)


def _bp_sharpened_table(table: dict, bp_iters: int) -> dict:
    """Run the differentiable constraint layer over the score grid."""
    slots = list(table)
    values = sorted({v for vals in table.values() for v in vals if v != NULL_VALUE})
    has_null = any(NULL_VALUE in vals for vals in table.values())
    if has_null:
        values.append(NULL_VALUE)
    missing = C.Tensor(-20.0)
    flat = []
    for v in values:
        for s in slots:
            flat.append(table[s].get(v, missing))
    phi = C.stack(flat)
    beliefs = run_bp_tensor(phi, len(values), len(slots),
                            values.index(NULL_VALUE) if has_null else None, bp_iters)
    out: dict = {s: {} for s in slots}
    for i, v in enumerate(values):
        for j, s in enumerate(slots):
            out[s][v] = C.tsum(C.take(beliefs, [i * len(slots) + j]))
    return out


# ---------------------------------------------------------------------------
# the loop


@dataclass
class TrainState:
    model: ReaderModel
    adam: C.AdamState
    epoch: int = 0
    best_dev_metric: float = -1.0
    epochs_since_best: int = 0
    history: list = field(default_factory=list)   # (epoch, mean_loss, dev_f1)


def cluster_loss(model: ReaderModel, cluster: cp.Cluster, hp: Hyperparams,
                 rng=None, training: bool = True):
    index = ClusterIndex.build(cluster)
    if index.n_tokens == 0:
        return None
    if hp.loss_mode == "mention_level":
        logits = model.mention_slot_logits(index, training=training,
                                           keep_prob=hp.keep_prob, rng=rng)
        return mention_loss(logits, index, cluster.gold, list(model.pi))
    table = model.value_scores(index, hp.aggregation, training=training,
                               keep_prob=hp.keep_prob, rng=rng,
                               gold_for_fit=cluster.gold)
    if hp.bp_train_iters > 0:
        table = _bp_sharpened_table(table, hp.bp_train_iters)
    loss, _ = value_loss(table, cluster.gold,
                         use_softmax=(hp.aggregation.mode == "max"
                                      or hp.bp_train_iters > 0))
    return loss


def dev_f1(model: ReaderModel, dev_clusters, hp: Hyperparams) -> float:
    if not dev_clusters:
        return 0.0
    decode = "sum" if hp.loss_mode == "mention_level" else None
    records = predict_clusters(model, dev_clusters, hp.aggregation,
                               bp_iterations=0, mention_decode=decode)
    instances = [instance_from_cluster(c) for c in dev_clusters]
    report = evaluate(instances, predictions_map(records))
    return report.score_f1


def train(train_clusters, dev_clusters, hp: Hyperparams,
          table: E.EmbeddingTable | None = None, log=None) -> TrainState:
    """Optimize on the training clusters; keep the best dev-F1 parameters.

    Without dev clusters, runs exactly max_epochs. Any non-finite loss or
    gradient aborts with a parameter-norm dump in the message.
    """
    seeds = np.random.SeedSequence(hp.seed).spawn(3)
    init_rng, shuffle_rng, dropout_rng = (np.random.default_rng(s) for s in seeds)
    vocab = [t for c in train_clusters for d in c.documents for t in d.flat_tokens()]
    model = init_model(vocab, hp, init_rng, table)
    params = model.params()
    state = TrainState(model=model, adam=C.AdamState())
    best_snapshot = {k: p.data.copy() for k, p in params.items()}

    for epoch in range(1, hp.max_epochs + 1):
        order = shuffle_rng.permutation(len(train_clusters))
        losses = []
        for ci in order:
            cluster = train_clusters[int(ci)]
            for p in params.values():
                p.zero_grad()
            try:
                loss = cluster_loss(model, cluster, hp, rng=dropout_rng)
                if loss is None:
                    continue
                C.backward(loss)
                C.adam_step(params, state.adam, lr=hp.lr, l2=hp.l2)
            except C.ComputeError as exc:
                norms = {k: float(np.abs(p.data).max()) for k, p in params.items()}
                raise DivergenceError(
                    f"diverged on cluster {cluster.cluster_id} epoch {epoch}: {exc}; "
                    f"param max-abs: {norms}") from exc
            losses.append(loss.item())
        state.epoch = epoch
        metric = dev_f1(model, dev_clusters, hp)
        state.history.append((epoch, float(np.mean(losses)) if losses else 0.0, metric))
        if log:
            log(f"epoch {epoch}: loss {state.history[-1][1]:.4f} dev_f1 {metric:.4f}")
        if not dev_clusters:
            continue
        if metric > state.best_dev_metric:
            state.best_dev_metric = metric
            state.epochs_since_best = 0
            best_snapshot = {k: p.data.copy() for k, p in params.items()}
        else:
            state.epochs_since_best += 1
            if state.epochs_since_best > hp.patience:
                break
    if dev_clusters:
        for k, p in params.items():
            p.data = best_snapshot[k].copy()
    return state


# ---------------------------------------------------------------------------
# checkpoints


def save_model(path, model: ReaderModel, hp: Hyperparams, adam=None):
    extra = {
        "slots": list(model.pi),
        "vocab": model.table.vocab,
        "embed_matrix": model.table.matrix.tolist(),
        "unk_vector": model.table.unk_vector.tolist(),
        "shape": {"width1": model.enc.w1.shape[0], "width2": model.enc.w2.shape[0]},
        "hyperparams": {
            "loss_mode": hp.loss_mode,
            "mode": hp.aggregation.mode,
            "weight_source": hp.aggregation.weight_source,
            "null_enabled": hp.aggregation.null_enabled,
        },
    }
    C.save_checkpoint(path, model.params(), adam=adam, seed=hp.seed, extra=extra)


def load_model(path):
    """Rebuild a ReaderModel (and its aggregation config) from a checkpoint."""
    raw = C.load_checkpoint(path)
    extra = raw["extra"]
    params = raw["params"]
    table = E.EmbeddingTable(
        vocab=extra["vocab"],
        matrix=np.asarray(extra["embed_matrix"], dtype=np.float64),
        mask_vector=C.Tensor(params["mask_vector"], requires_grad=True),
        unk_vector=np.asarray(extra["unk_vector"], dtype=np.float64))
    enc = E.EncoderParams(w1=C.Tensor(params["enc.w1"], requires_grad=True),
                          b1=C.Tensor(params["enc.b1"], requires_grad=True),
                          w2=C.Tensor(params["enc.w2"], requires_grad=True),
                          b2=C.Tensor(params["enc.b2"], requires_grad=True))
    pi = {s: C.Tensor(params[f"slot.{s}"], requires_grad=True) for s in extra["slots"]}
    model = ReaderModel(table=table, enc=enc, pi=pi)
    hp_bits = extra.get("hyperparams", {})
    config = AggregationConfig(mode=hp_bits.get("mode", "sum"),
                               weight_source=hp_bits.get("weight_source", "unit"),
                               null_enabled=hp_bits.get("null_enabled", True))
    return model, config, hp_bits.get("loss_mode", "value_level")


# ---------------------------------------------------------------------------
# gradient checking


def gradient_check(hp: Hyperparams, cluster: cp.Cluster, tol: float = 1e-4,
                   h: float = 1e-5) -> dict:
    """Analytic vs central-difference gradients of the cluster loss.

    Meant for shrunken dimensions and tiny clusters (a few dozen tokens).
    Raises GradientCheckError naming the worst parameter above tol.
    """
    rng = np.random.default_rng(hp.seed)
    vocab = [t for d in cluster.documents for t in d.flat_tokens()]
    model = init_model(vocab, hp, rng)
    params = model.params()

    def forward() -> float:
        loss = cluster_loss(model, cluster, hp, rng=None, training=False)
        if loss is None:
            raise GradientCheckError("cluster produced no loss terms")
        return loss.item()

    for p in params.values():
        p.zero_grad()
    loss = cluster_loss(model, cluster, hp, rng=None, training=False)
    if loss is None:
        raise GradientCheckError("cluster produced no loss terms")
    C.backward(loss)

    report = {}
    worst = ("", 0.0)
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.ravel()
        err = 0.0
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = forward()
            flat[i] = keep - h
            down = forward()
            flat[i] = keep
            numeric = (up - down) / (2 * h)
            a = analytic.ravel()[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            err = max(err, rel)
        report[name] = err
        if err > worst[1]:
            worst = (name, err)
    if worst[1] > tol:
        raise GradientCheckError(
            f"gradient mismatch: {worst[0]} rel err {worst[1]:.3e} exceeds {tol:.0e}")
    return report
