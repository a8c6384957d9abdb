"""Knowledge surgery: permanent edits to FFN value slots.

An update shifts a fact's knowledge-neuron value slots away from the old
answer's embedding and toward the new one; an erase zeroes the slots of the
neurons most often attributed to a relation.  Edits are made in place on the
model; :class:`ValueSlotEditor` saves the touched rows so they can be restored
bit-exactly.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .attribution import KnowledgeNeuronSet
from .errors import ContractError, RequestError
from .facts import ClozeQuery, World
from .model import MaskedLM, NeuronId, forward_batch, read_value_slot, write_value_slot
from .trainer import evaluate, length_batches


@dataclass(frozen=True)
class UpdateRequest:
    fact_id: int
    target: int  # entity id of the new tail
    lambda1: float = 1.0
    lambda2: float = 8.0
    share_cap: float = 0.10


@dataclass(frozen=True)
class EraseRequest:
    relation: int
    budget: int = 20


@dataclass(frozen=True)
class RowSnapshot:
    neurons: tuple[NeuronId, ...]
    rows: np.ndarray  # [len(neurons), d_model]


class ValueSlotEditor:
    """Saves value-slot rows before an edit and writes them back on request."""

    def __init__(self, model: MaskedLM):
        self.model = model
        self.saved: RowSnapshot | None = None

    def snapshot(self, neurons: Sequence[NeuronId]) -> RowSnapshot:
        neurons = tuple(dict.fromkeys(neurons))
        d = self.model.config.d_model
        rows = np.stack([read_value_slot(self.model, n) for n in neurons]) if neurons else np.zeros((0, d), np.float32)
        self.saved = RowSnapshot(neurons, rows)
        return self.saved

    def restore(self) -> None:
        if self.saved is None:
            raise ContractError("restore called without a snapshot")
        for n, row in zip(self.saved.neurons, self.saved.rows):
            write_value_slot(self.model, n, row)


def _rewrite_rows(model: MaskedLM, neurons: Sequence[NeuronId], fn) -> int:
    """Replace each neuron's value slot by ``fn(row)``; return how many rows actually differ afterwards."""
    changed = 0
    for n in neurons:
        old = read_value_slot(model, n)
        write_value_slot(model, n, fn(old))
        changed += int(np.any(read_value_slot(model, n) != old))
    return changed


def rows_changed(before: MaskedLM, after: MaskedLM) -> tuple[int, bool]:
    """Number of differing value-slot rows, and whether every other weight is bit-identical."""
    changed = 0
    others_equal = True
    for name, p in before.params.items():
        a, b = p.data, after.params[name].data
        if name.endswith("ffn.value.weight"):
            changed += int(np.any(a != b, axis=1).sum())
        elif a.tobytes() != b.tobytes():
            others_equal = False
    return changed, others_equal


@dataclass
class FactOutcome:
    fact_id: int
    changed: bool
    success: bool
    p_old_before: list[float]
    p_old_after: list[float]
    p_new_before: list[float]
    p_new_after: list[float]


@dataclass
class PerplexityDelta:
    before: float
    after: float

    @property
    def absolute(self) -> float:
        return self.after - self.before

    @property
    def relative(self) -> float:
        return (self.after - self.before) / self.before


@dataclass
class SurgeryReport:
    op: str
    neurons: tuple[NeuronId, ...]
    rows_changed: int
    intra: PerplexityDelta | None = None
    inter: PerplexityDelta | None = None
    outcomes: list[FactOutcome] = field(default_factory=list)

    @property
    def change_rate(self) -> float:
        return float(np.mean([o.changed for o in self.outcomes])) if self.outcomes else 0.0

    @property
    def success_rate(self) -> float:
        return float(np.mean([o.success for o in self.outcomes])) if self.outcomes else 0.0

    def summary(self) -> dict:
        out = {"op": self.op, "n_neurons": len(self.neurons), "rows_changed": self.rows_changed}
        if self.outcomes:
            out.update({"change_rate": self.change_rate, "success_rate": self.success_rate})
        for name, d in (("intra", self.intra), ("inter", self.inter)):
            if d is not None:
                out.update({f"{name}_ppl_before": d.before, f"{name}_ppl_after": d.after,
                            f"{name}_ppl_delta": d.absolute, f"{name}_ppl_rel": d.relative})
        return out


# --- update --------------------------------------------------------------------


def _validate_update(world: World, req: UpdateRequest) -> None:
    if not 0 <= req.fact_id < len(world.facts):
        raise RequestError(f"unknown fact {req.fact_id}")
    fact = world.facts[req.fact_id]
    if not 0 <= req.target < len(world.entities):
        raise RequestError(f"unknown target entity {req.target}")
    if req.target == fact.tail:
        raise RequestError(f"fact {fact.id}: target equals the current tail")
    old, new = world.entities[fact.tail], world.entities[req.target]
    if old.type != new.type:
        raise RequestError(f"fact {fact.id}: target type {new.type!r} differs from tail type {old.type!r}")
    if len(new.name.split()) != 1 or new.name not in world.vocab.index:
        raise RequestError(f"target {new.name!r} is not a single vocabulary token")


def update_neurons(
    fact_id: int,
    sets: Mapping[int, KnowledgeNeuronSet],
    relation_of: Mapping[int, int],
    share_cap: float = 0.10,
) -> tuple[NeuronId, ...]:
    """The fact's knowledge neurons held by fewer than ``share_cap`` of the relation's other facts."""
    if fact_id not in sets:
        raise ContractError(f"fact {fact_id} has no refined knowledge-neuron set")
    rel = relation_of[fact_id]
    peers = [s for f, s in sets.items() if f != fact_id and relation_of[f] == rel]
    counts: dict[NeuronId, int] = {}
    for s in peers:
        for n in s.neurons:
            counts[n] = counts.get(n, 0) + 1
    denom = max(len(peers), 1)
    return tuple(n for n in sets[fact_id].neurons if counts.get(n, 0) / denom < share_cap)


def _answer_probs(model: MaskedLM, queries: Sequence[ClozeQuery], tokens: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Probabilities of each token in ``tokens`` and the top-1 token, per query."""
    probs = np.empty((len(queries), len(tokens)), dtype=np.float64)
    top = np.empty(len(queries), dtype=np.int64)
    for idx in length_batches(queries, 512):
        out = forward_batch(model, [queries[i] for i in idx])
        probs[idx] = out.probs[:, list(tokens)]
        top[idx] = out.probs.argmax(axis=-1)
    return probs, top


def _split_by_relation(queries, relation_of, fact_id, relation):
    own = [q for q in queries if q.fact_id == fact_id]
    intra = [q for q in queries if q.fact_id != fact_id and relation_of[q.fact_id] == relation]
    inter = [q for q in queries if relation_of[q.fact_id] != relation]
    return own, intra, inter


def update_fact(
    model: MaskedLM,
    world: World,
    queries: Sequence[ClozeQuery],
    req: UpdateRequest,
    neurons: Sequence[NeuronId],
    *,
    measure_perplexity: bool = True,
) -> SurgeryReport:
    """Edit value slots ``row -= lambda1 * E[t]; row += lambda2 * E[t']`` for ``neurons`` in place.

    ``changed``/``success`` are majority votes over the fact's prompts: the top
    prediction is no longer ``t`` / is ``t'``.  With no neurons the model is
    left untouched and the report records a failed edit.
    """
    _validate_update(world, req)
    fact = world.facts[req.fact_id]
    relation_of = {f.id: f.relation for f in world.facts}
    old_tok, new_tok = world.entity_token(fact.tail), world.entity_token(req.target)
    own, intra, inter = _split_by_relation(queries, relation_of, fact.id, fact.relation)
    if not own:
        raise ContractError(f"fact {fact.id} has no prompts")

    probs_before, _ = _answer_probs(model, own, (old_tok, new_tok))
    ppl_before = (evaluate(model, intra).perplexity, evaluate(model, inter).perplexity) if measure_perplexity else None

    neurons = tuple(dict.fromkeys(neurons))
    table = model.params["embeddings.token"].data
    shift = -req.lambda1 * table[old_tok].astype(np.float64) + req.lambda2 * table[new_tok].astype(np.float64)
    n_rows = _rewrite_rows(model, neurons, lambda row: (row.astype(np.float64) + shift).astype(np.float32))

    probs_after, top_after = _answer_probs(model, own, (old_tok, new_tok))
    half = len(own) / 2
    changed = bool(neurons) and int((top_after != old_tok).sum()) > half
    success = bool(neurons) and int((top_after == new_tok).sum()) > half
    outcome = FactOutcome(fact.id, changed, success,
                          probs_before[:, 0].tolist(), probs_after[:, 0].tolist(),
                          probs_before[:, 1].tolist(), probs_after[:, 1].tolist())
    report = SurgeryReport("update", neurons, n_rows, outcomes=[outcome])
    if ppl_before is not None:
        report.intra = PerplexityDelta(ppl_before[0], evaluate(model, intra).perplexity)
        report.inter = PerplexityDelta(ppl_before[1], evaluate(model, inter).perplexity)
    return report


def random_neurons(
    count: int, n_layers: int, d_ffn: int, rng: np.random.Generator, exclude: Sequence[NeuronId] = ()
) -> tuple[NeuronId, ...]:
    """``count`` distinct neurons drawn uniformly over every layer, avoiding ``exclude``."""
    taken = {n.layer * d_ffn + n.index for n in exclude}
    free = np.array([k for k in range(n_layers * d_ffn) if k not in taken])
    picks = np.sort(rng.choice(free, size=min(count, len(free)), replace=False))
    return tuple(NeuronId(int(k) // d_ffn, int(k) % d_ffn) for k in picks)


def pick_target(world: World, fact_id: int, rng: np.random.Generator) -> int:
    """A random entity of the tail's type other than the current tail."""
    fact = world.facts[fact_id]
    kind = world.entities[fact.tail].type
    pool = [e.id for e in world.entities_of_type(kind) if e.id != fact.tail]
    return int(pool[int(rng.integers(len(pool)))])


# --- erase ---------------------------------------------------------------------


def erase_neurons(
    relation: int,
    sets: Mapping[int, KnowledgeNeuronSet],
    relation_of: Mapping[int, int],
    budget: int = 20,
) -> tuple[NeuronId, ...]:
    """The ``budget`` neurons found in the most of the relation's refined sets.

    Ties go to the higher mean attribution (over the sets holding the neuron),
    then to the lower ``(layer, index)``.
    """
    if budget < 1:
        raise RequestError(f"erase budget must be at least 1, got {budget}")
    members = [s for f, s in sets.items() if relation_of[f] == relation]
    if not members:
        raise ContractError(f"relation {relation} has no refined knowledge-neuron sets")
    count: dict[NeuronId, int] = {}
    score: dict[NeuronId, float] = {}
    for s in members:
        for n, m in zip(s.neurons, s.mean_scores):
            count[n] = count.get(n, 0) + 1
            score[n] = score.get(n, 0.0) + m
    ranked = sorted(count, key=lambda n: (-count[n], -score[n] / count[n], n.layer, n.index))
    if len(ranked) < budget:
        warnings.warn(f"relation {relation}: only {len(ranked)} distinct neurons for a budget of {budget}", stacklevel=2)
    return tuple(ranked[:budget])


def erase_relation(
    model: MaskedLM,
    queries: Sequence[ClozeQuery],
    relation_of: Mapping[int, int],
    req: EraseRequest,
    neurons: Sequence[NeuronId],
) -> SurgeryReport:
    """Zero the value slots of ``neurons`` in place; report perplexity on the relation vs the rest."""
    if req.budget < 1:
        raise RequestError(f"erase budget must be at least 1, got {req.budget}")
    own = [q for q in queries if relation_of[q.fact_id] == req.relation]
    rest = [q for q in queries if relation_of[q.fact_id] != req.relation]
    if not own:
        raise ContractError(f"relation {req.relation} has no prompts")
    before_own = evaluate(model, own).perplexity
    before_rest = evaluate(model, rest).perplexity if rest else float("nan")
    neurons = tuple(dict.fromkeys(neurons))
    n_rows = _rewrite_rows(model, neurons, np.zeros_like)
    return SurgeryReport(
        "erase",
        neurons,
        n_rows,
        intra=PerplexityDelta(before_own, evaluate(model, own).perplexity),
        inter=PerplexityDelta(before_rest, evaluate(model, rest).perplexity if rest else float("nan")),
    )


# --- edit log ------------------------------------------------------------------


def append_edit_log(path: str | Path, op: str, neurons: Sequence[NeuronId], params: Mapping, metrics: Mapping) -> dict:
    """Append one audit record; returns it."""
    record = {
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "op": op,
        "neurons": [[n.layer, n.index] for n in neurons],
        "params": dict(params),
        "metrics": dict(metrics),
    }
    with open(path, "a", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
    return record


def request_params(req: UpdateRequest | EraseRequest) -> dict:
    return asdict(req)
