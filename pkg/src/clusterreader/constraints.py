"""Exactly-one factor grid over (value, slot) variables, decoded by loopy BP.

Aggregated value scores often let one value win several slots at once. This
layer turns the score table into a grid of Boolean variables X[v,s] with a
local potential sigmoid(phi) each, an Exactly-1 factor across the values of
every slot, and an Exactly-1 factor across the slots of every non-null
value. Synchronous message passing for a fixed number of rounds (or to
convergence) sharpens the beliefs so duplicate assignments lose out.

Messages are (true, false) pairs normalized to sum 1; we store only the
true mass. The factor-to-variable update has the closed form

    t_i = 1 / (1 + S_i),   S_i = sum_{j != i} mu_j / (1 - mu_j)

which equals prod_{j != i}(1 - mu_j) against sum_j mu_j prod_{l != i,j}
(1 - mu_l) after normalization, but never under- or overflows.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass

import numpy as np

from . import compute as C
from .aggregator import NULL_VALUE

EPS = 1e-9
CONVERGENCE = "conv"
CONV_TOL = 1e-6
CONV_CAP = 100
MISSING_PHI = -20.0


class ConstraintError(ValueError):
    pass


@dataclass
class ConstraintGraph:
    values: tuple       # row labels; may contain the null pseudo-value
    slots: tuple        # column labels
    local: np.ndarray   # V x S sigmoided potentials in (0,1)
    null_row: int | None

    @property
    def shape(self):
        return self.local.shape


@dataclass
class MessageState:
    """True-mass of every message, V x S per direction."""

    to_row: np.ndarray    # X[v,s] -> slot factor s
    to_col: np.ndarray    # X[v,s] -> value factor v (null row unused)
    from_row: np.ndarray
    from_col: np.ndarray  # held at 0.5 on the null row (no factor there)
    iteration: int = 0


def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def build_graph(table: dict, values, slots) -> ConstraintGraph:
    """Grid of sigmoided local potentials from a {slot: {value: phi}} table.

    Pairs absent from the table get a strongly negative score so their local
    potential is effectively zero.
    """
    values, slots = tuple(values), tuple(slots)
    if not values or not slots:
        raise ConstraintError("constraint grid needs at least one value and one slot")
    phi = np.full((len(values), len(slots)), MISSING_PHI)
    for j, s in enumerate(slots):
        row_scores = table.get(s, {})
        for i, v in enumerate(values):
            if v in row_scores:
                phi[i, j] = row_scores[v]
    local = np.clip(_sigmoid(phi), EPS, 1 - EPS)
    null_row = values.index(NULL_VALUE) if NULL_VALUE in values else None
    return ConstraintGraph(values=values, slots=slots, local=local, null_row=null_row)


def init_messages(graph: ConstraintGraph) -> MessageState:
    local = graph.local
    return MessageState(to_row=local.copy(), to_col=local.copy(),
                        from_row=np.full_like(local, 0.5),
                        from_col=np.full_like(local, 0.5), iteration=0)


def exactly1_to_variable(incoming, target: int):
    """Message an Exactly-1 factor sends to one neighbor.

    incoming holds the true-mass of every neighbor's message, target's
    included (it is ignored). Returns a normalized (true, false) pair.
    """
    mu = np.clip(np.asarray(incoming, dtype=np.float64), EPS, 1 - EPS)
    if not 0 <= target < mu.size:
        raise ConstraintError(f"target {target} outside factor of degree {mu.size}")
    ratio = mu / (1 - mu)
    s_i = ratio.sum() - ratio[target]
    t = 1.0 / (1.0 + s_i)
    return t, 1.0 - t


def _exactly1_all(mu: np.ndarray, axis: int) -> np.ndarray:
    """True-mass of factor->variable messages for every target at once.

    mu is the V x S grid of incoming true masses; axis=0 treats each column
    (slot factor across values) as a factor, axis=1 each row.
    """
    mu = np.clip(mu, EPS, 1 - EPS)
    ratio = mu / (1 - mu)
    total = ratio.sum(axis=axis, keepdims=True)
    return 1.0 / (1.0 + (total - ratio))


def variable_to_factor(local: float, other_msg):
    """Variable's message to one factor: local potential times the other factor's message."""
    t_other, f_other = other_msg
    t = local * t_other
    f = (1 - local) * f_other
    z = t + f
    if z <= 0:
        return 0.5, 0.5
    return t / z, f / z


def _combine(local: np.ndarray, other_t: np.ndarray) -> np.ndarray:
    t = local * other_t
    f = (1 - local) * (1 - other_t)
    return np.clip(t / (t + f), EPS, 1 - EPS)


def bp_iterate(state: MessageState, graph: ConstraintGraph, damping: float = 0.0) -> MessageState:
    """One synchronous round: all factor messages, then all variable messages.

    damping mixes the new messages with the previous ones (new = (1-d)*new +
    d*old). It never moves the fixed points, only the trajectory; fixed
    iteration counts use d=0 so each round is exactly one recurrence.
    """
    local = graph.local
    from_row = _exactly1_all(state.to_row, axis=0)
    from_col = _exactly1_all(state.to_col, axis=1)
    if graph.null_row is not None:
        from_col[graph.null_row, :] = 0.5
    to_row = _combine(local, from_col)
    to_col = _combine(local, from_row)
    if damping:
        from_row = damping * state.from_row + (1 - damping) * from_row
        from_col = damping * state.from_col + (1 - damping) * from_col
        to_row = damping * state.to_row + (1 - damping) * to_row
        to_col = damping * state.to_col + (1 - damping) * to_col
    out = MessageState(to_row=to_row, to_col=to_col, from_row=from_row,
                       from_col=from_col, iteration=state.iteration + 1)
    for name in ("to_row", "to_col", "from_row", "from_col"):
        arr = getattr(out, name)
        if not np.all(np.isfinite(arr)):
            raise ConstraintError(f"non-finite {name} message at iteration {out.iteration}")
    return out


def beliefs(state: MessageState, graph: ConstraintGraph) -> np.ndarray:
    """Posterior true-probability per variable from local and both factor messages."""
    local = graph.local
    t = local * state.from_row * state.from_col
    f = (1 - local) * (1 - state.from_row) * (1 - state.from_col)
    return t / (t + f)


CONV_DAMPING = 0.3


def converge(graph: ConstraintGraph) -> tuple[MessageState, float]:
    """Damped rounds until the largest message change is below tolerance.

    Undamped synchronous updates can enter period-2 cycles on dense grids;
    damping (0.3) removes them without changing the fixed point. Returns
    the final state and last delta (below CONV_TOL unless the cap hit).
    """
    state = init_messages(graph)
    delta = np.inf
    for _ in range(CONV_CAP):
        new = bp_iterate(state, graph, damping=CONV_DAMPING)
        delta = max(np.abs(getattr(new, n) - getattr(state, n)).max()
                    for n in ("to_row", "to_col", "from_row", "from_col"))
        state = new
        if delta < CONV_TOL:
            break
    return state, delta


def run_bp(graph: ConstraintGraph, iterations) -> np.ndarray:
    """Beliefs after a fixed number of rounds, or to convergence.

    iterations=0 returns the sigmoided locals unchanged; CONVERGENCE runs
    damped rounds until the largest message change is below 1e-6 (cap 100).
    """
    if iterations == 0:
        return graph.local.copy()
    if iterations == CONVERGENCE:
        state, _ = converge(graph)
    else:
        if iterations < 0:
            raise ConstraintError(f"negative iteration count {iterations}")
        state = init_messages(graph)
        for _ in range(iterations):
            state = bp_iterate(state, graph)
    return beliefs(state, graph)


def beliefs_as_table(graph: ConstraintGraph, b: np.ndarray) -> dict:
    """Reshape a belief grid into the {slot: {value: score}} decode format."""
    return {s: {v: float(b[i, j]) for i, v in enumerate(graph.values)}
            for j, s in enumerate(graph.slots)}


def bp_trace(graph: ConstraintGraph, iterations: int, path):
    """CSV dump of the belief trajectory: iteration, value, slot, belief."""
    state = init_messages(graph)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "value", "slot", "belief"])
        for it in range(iterations + 1):
            b = beliefs(state, graph)
            for i, v in enumerate(graph.values):
                for j, s in enumerate(graph.slots):
                    writer.writerow([it, v, s, f"{b[i, j]:.10f}"])
            if it < iterations:
                state = bp_iterate(state, graph)


def brute_force_oracle(local: np.ndarray) -> np.ndarray:
    """Exact marginals by enumerating assignments valid under both families.

    Every slot must select exactly one value and every value must be
    selected by exactly one slot, so valid assignments are permutation
    matrices; a non-square grid has empty support.
    """
    local = np.asarray(local, dtype=np.float64)
    V, S = local.shape
    if V * S > 20:
        raise ConstraintError(f"grid {V}x{S} too large for enumeration")
    weight_true = np.zeros((V, S))
    total = 0.0
    for choice in itertools.product(range(V), repeat=S):
        counts = np.bincount(choice, minlength=V)
        if np.any(counts != 1):
            continue
        x = np.zeros((V, S))
        x[list(choice), range(S)] = 1.0
        w = float(np.prod(np.where(x == 1, local, 1 - local)))
        total += w
        weight_true += w * x
    if total <= 0:
        raise ConstraintError("no assignment satisfies both Exactly-1 families")
    return weight_true / total


# ---------------------------------------------------------------------------
# differentiable variant (for training with constraints in the loop)


def run_bp_tensor(phi: C.Tensor, n_values: int, n_slots: int,
                  null_row: int | None, iterations: int) -> C.Tensor:
    """Beliefs as a flat (V*S,) tensor with gradient support.

    Mirrors run_bp on the numpy path exactly, so it is only used when the
    constraint layer participates in the loss.
    """
    one = C.Tensor(1.0)
    local = C.clamp(C.sigmoid(phi), EPS, 1 - EPS)
    row_groups = [[v * n_slots + s for v in range(n_values)] for s in range(n_slots)]
    col_groups = [[v * n_slots + s for s in range(n_slots)]
                  for v in range(n_values) if v != null_row]
    uniform_col = C.Tensor(np.full(n_slots, 0.5)) if null_row is not None else None

    def factor_pass(msg: C.Tensor, groups, fill_uniform: bool) -> C.Tensor:
        outs, order = [], []
        for g in groups:
            mu = C.clamp(C.take(msg, g), EPS, 1 - EPS)
            ratio = C.div(mu, C.add(C.neg(mu), one))
            s_i = C.add(C.neg(ratio), C.tsum(ratio))
            outs.append(C.div(one, C.add(s_i, one)))
            order.extend(g)
        if fill_uniform and null_row is not None:
            outs.append(uniform_col)
            order.extend(null_row * n_slots + s for s in range(n_slots))
        inv = np.argsort(np.asarray(order))
        return C.take(C.concat_vec(outs), inv)

    def combine(other_t: C.Tensor) -> C.Tensor:
        t = C.mul(local, other_t)
        f = C.mul(C.add(C.neg(local), one), C.add(C.neg(other_t), one))
        return C.clamp(C.div(t, C.add(t, f)), EPS, 1 - EPS)

    to_row, to_col = local, local
    from_row = C.Tensor(np.full(n_values * n_slots, 0.5))
    from_col = C.Tensor(np.full(n_values * n_slots, 0.5))
    for _ in range(iterations):
        from_row = factor_pass(to_row, row_groups, fill_uniform=False)
        from_col = factor_pass(to_col, col_groups, fill_uniform=True)
        to_row = combine(from_col)
        to_col = combine(from_row)
    t = C.mul(C.mul(local, from_row), from_col)
    f = C.mul(C.mul(C.add(C.neg(local), one), C.add(C.neg(from_row), one)),
              C.add(C.neg(from_col), one))
    return C.div(t, C.add(t, f))
