"""Non-destructive experiments on knowledge neurons.

Suppression zeroes a set's activations at the masked position, amplification
doubles them; neither touches the weights.  Effects are aggregated per fact as
the relative change of the mean correct-answer probability over the fact's
prompts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import binomtest

from .attribution import KnowledgeNeuronSet
from .errors import ContractError
from .facts import ClozeQuery, PromptGroups
from .model import MaskedLM, NeuronId, NeuronOverride, Scale, Set, forward_batch
from .trainer import length_batches

MODES = ("suppress", "amplify")
MIN_BEFORE = 0.01


def mode_override(neurons: Sequence[NeuronId], mode: str) -> NeuronOverride:
    if mode == "suppress":
        return {n: Set(0.0) for n in neurons}
    if mode == "amplify":
        return {n: Scale(2.0) for n in neurons}
    raise ValueError(f"unknown mode {mode!r}; choose from {MODES}")


def _batched_probs(
    model: MaskedLM, items: Sequence[tuple[ClozeQuery, NeuronOverride | None]], batch_size: int = 512
) -> np.ndarray:
    """Answer probability for every ``(query, overrides)`` pair, in input order."""
    queries = [q for q, _ in items]
    out = np.empty(len(items), dtype=np.float64)
    for idx in length_batches(queries, batch_size):
        res = forward_batch(model, [queries[i] for i in idx], [items[i][1] for i in idx])
        out[idx] = res.answer_probs
    return out


def _batched_activations(model: MaskedLM, queries: Sequence[ClozeQuery], batch_size: int = 512) -> np.ndarray:
    out = np.empty((len(queries), model.config.n_layers, model.config.d_ffn), dtype=np.float32)
    for idx in length_batches(queries, batch_size):
        out[idx] = forward_batch(model, [queries[i] for i in idx]).activations
    return out


def suppress_or_amplify(
    model: MaskedLM, prompts: Sequence[ClozeQuery], neurons: Sequence[NeuronId], mode: str
) -> tuple[np.ndarray, np.ndarray]:
    """Per-prompt ``(before, after)`` correct-answer probabilities."""
    if not neurons:
        raise ContractError("intervention needs a non-empty neuron set")
    ov = mode_override(neurons, mode)
    probs = _batched_probs(model, [(q, None) for q in prompts] + [(q, ov) for q in prompts])
    return probs[: len(prompts)], probs[len(prompts) :]


def random_control(
    neurons: Sequence[NeuronId], d_ffn: int, rng: np.random.Generator
) -> tuple[NeuronId, ...]:
    """Same number of neurons per layer, drawn from that layer outside ``neurons``."""
    per_layer: dict[int, int] = {}
    for n in neurons:
        per_layer[n.layer] = per_layer.get(n.layer, 0) + 1
    taken = {(n.layer, n.index) for n in neurons}
    out = []
    for layer in sorted(per_layer):
        free = np.array([i for i in range(d_ffn) if (layer, i) not in taken])
        picks = rng.choice(free, size=min(per_layer[layer], len(free)), replace=False)
        out.extend(NeuronId(layer, int(i)) for i in sorted(picks))
    return tuple(out)


@dataclass
class FactEffect:
    fact_id: int
    relation: int
    method: str
    mode: str
    n_neurons: int
    before: np.ndarray  # per prompt
    after: np.ndarray  # per prompt (averaged over resamples for the random control)

    @property
    def mean_before(self) -> float:
        return float(self.before.mean())

    @property
    def mean_after(self) -> float:
        return float(self.after.mean())

    @property
    def rel_change(self) -> float:
        return (self.mean_after - self.mean_before) / self.mean_before


@dataclass
class SignTest:
    n_lower: int
    n_higher: int
    p_value: float


@dataclass
class InterventionReport:
    effects: list[FactEffect]
    excluded: list[int] = field(default_factory=list)  # known facts below the probability floor

    def select(self, method: str, mode: str) -> list[FactEffect]:
        return [e for e in self.effects if e.method == method and e.mode == mode]

    def mean_rel_change(self, method: str, mode: str) -> float:
        xs = [e.rel_change for e in self.select(method, mode)]
        return float(np.mean(xs)) if xs else float("nan")

    def rows(self) -> list[tuple[int | str, str, str, float, int]]:
        """``(relation, mode, method, mean_rel_change, n_facts)`` per relation plus an ``all`` row."""
        out = []
        methods = sorted({e.method for e in self.effects}, key=_method_order)
        for method in methods:
            for mode in MODES:
                sel = self.select(method, mode)
                if not sel:
                    continue
                for rel in sorted({e.relation for e in sel}):
                    xs = [e.rel_change for e in sel if e.relation == rel]
                    out.append((rel, mode, method, float(np.mean(xs)), len(xs)))
                out.append(("all", mode, method, float(np.mean([e.rel_change for e in sel])), len(sel)))
        return out

    def sign_test(self, method: str = "ig", control: str = "random", mode: str = "suppress") -> SignTest:
        """Two-sided sign test on per-fact ``rel_change(method) - rel_change(control)``."""
        a = {e.fact_id: e.rel_change for e in self.select(method, mode)}
        b = {e.fact_id: e.rel_change for e in self.select(control, mode)}
        diffs = [a[f] - b[f] for f in sorted(a.keys() & b.keys()) if a[f] != b[f]]
        lower = sum(d < 0 for d in diffs)
        higher = len(diffs) - lower
        p = binomtest(lower, len(diffs), 0.5).pvalue if diffs else 1.0
        return SignTest(lower, higher, float(p))

    def opposite_direction_fraction(self, method: str = "ig") -> float:
        """Fraction of facts where suppression and amplification move the probability oppositely."""
        sup = {e.fact_id: e.rel_change for e in self.select(method, "suppress")}
        amp = {e.fact_id: e.rel_change for e in self.select(method, "amplify")}
        common = sorted(sup.keys() & amp.keys())
        if not common:
            return float("nan")
        return sum(sup[f] * amp[f] < 0 for f in common) / len(common)


def _method_order(method: str) -> tuple[int, str]:
    return ({"ig": 0, "baseline": 1, "random": 2}.get(method, 3), method)


def intervention_study(
    model: MaskedLM,
    queries: Sequence[ClozeQuery],
    sets_by_method: Mapping[str, Mapping[int, KnowledgeNeuronSet]],
    relation_of: Mapping[int, int],
    known: Sequence[int],
    *,
    random_like: str | None = "ig",
    resamples: int = 5,
    seed: int = 0,
    min_before: float = MIN_BEFORE,
) -> InterventionReport:
    """Suppress and amplify every method's set for each known fact.

    ``random_like`` names the method whose set sizes and layers the random
    control matches (``None`` skips the control).  Known facts whose mean
    before-probability is below ``min_before`` are excluded and listed.
    """
    digest = model.digest()
    prompts: dict[int, list[ClozeQuery]] = {}
    for q in queries:
        prompts.setdefault(q.fact_id, []).append(q)
    rng = np.random.default_rng(seed)
    facts = [f for f in sorted(set(known)) if f in prompts]

    flat = _batched_probs(model, [(q, None) for f in facts for q in prompts[f]])
    before, pos = {}, 0
    for f in facts:
        before[f] = flat[pos : pos + len(prompts[f])]
        pos += len(prompts[f])
    excluded = [f for f in facts if before[f].mean() < min_before]
    facts = [f for f in facts if before[f].mean() >= min_before]

    # one job per (method, fact, mode, resample); all prompts of all jobs run in big batches
    jobs: list[tuple[str, int, str, tuple[NeuronId, ...]]] = []
    for method, sets in sets_by_method.items():
        for f in facts:
            s = sets.get(f)
            if s is None or not s.neurons:
                continue
            for mode in MODES:
                jobs.append((method, f, mode, s.neurons))
    controls: list[tuple[int, str, list[tuple[NeuronId, ...]]]] = []
    if random_like is not None and random_like in sets_by_method:
        for f in facts:
            s = sets_by_method[random_like].get(f)
            if s is None or not s.neurons:
                continue
            draws = [random_control(s.neurons, model.config.d_ffn, rng) for _ in range(resamples)]
            for mode in MODES:
                controls.append((f, mode, draws))

    items: list[tuple[ClozeQuery, NeuronOverride | None]] = []
    for _, f, mode, neurons in jobs:
        ov = mode_override(neurons, mode)
        items.extend((q, ov) for q in prompts[f])
    for f, mode, draws in controls:
        for draw in draws:
            ov = mode_override(draw, mode)
            items.extend((q, ov) for q in prompts[f])
    probs = _batched_probs(model, items)

    effects = []
    pos = 0
    for method, f, mode, neurons in jobs:
        n = len(prompts[f])
        effects.append(FactEffect(f, relation_of[f], method, mode, len(neurons), before[f], probs[pos : pos + n]))
        pos += n
    for f, mode, draws in controls:
        n = len(prompts[f])
        after = probs[pos : pos + n * len(draws)].reshape(len(draws), n).mean(axis=0)
        pos += n * len(draws)
        effects.append(FactEffect(f, relation_of[f], "random", mode, len(draws[0]), before[f], after))

    if model.digest() != digest:
        raise ContractError("intervention modified the model weights")
    return InterventionReport(effects, excluded)


# --- activation by prompt type -------------------------------------------------


GROUPS = ("t1", "t2", "t3")


@dataclass
class ActivationReport:
    """Mean knowledge-neuron activation per prompt group, per fact and in aggregate."""

    per_fact: dict[str, dict[int, tuple[float, float, float]]]  # method -> fact -> (T1, T2, T3)
    population_t3: float  # mean activation of all neurons on T3 prompts

    def means(self, method: str) -> tuple[float, float, float]:
        vals = np.array(list(self.per_fact[method].values()), dtype=np.float64)
        if vals.size == 0:
            return (math.nan,) * 3
        return tuple(float(v) for v in vals.mean(axis=0))  # type: ignore[return-value]

    def separation(self, method: str) -> float:
        """``(T1 - T2) / |T1|``: how far the head-only prompts fall below the knowledge-expressing ones."""
        t1, t2, _ = self.means(method)
        return (t1 - t2) / abs(t1) if t1 else math.nan


def activation_study(
    model: MaskedLM,
    sets_by_method: Mapping[str, Mapping[int, KnowledgeNeuronSet]],
    groups: Mapping[int, PromptGroups],
    facts: Sequence[int] | None = None,
) -> ActivationReport:
    """Average each fact's knowledge-neuron activations over its T1, T2 and T3 prompts."""
    facts = sorted(groups) if facts is None else sorted(facts)
    order: list[tuple[int, str]] = []
    queries: list[ClozeQuery] = []
    for f in facts:
        for g in GROUPS:
            for q in getattr(groups[f], g):
                order.append((f, g))
                queries.append(q)
    acts = _batched_activations(model, queries) if queries else np.zeros((0, 1, 1), np.float32)

    rows: dict[tuple[int, str], list[int]] = {}
    for j, key in enumerate(order):
        rows.setdefault(key, []).append(j)
    per_fact: dict[str, dict[int, tuple[float, float, float]]] = {}
    for method, sets in sets_by_method.items():
        per_fact[method] = {}
        for f in facts:
            s = sets.get(f)
            if s is None or not s.neurons:
                continue
            layers = np.array([n.layer for n in s.neurons])
            idx = np.array([n.index for n in s.neurons])
            per_fact[method][f] = tuple(
                float(acts[rows[(f, g)]][:, layers, idx].mean(dtype=np.float64)) if rows.get((f, g)) else math.nan
                for g in GROUPS
            )  # type: ignore[assignment]
    t3 = [j for j, (_, g) in enumerate(order) if g == "t3"]
    population = float(acts[t3].mean(dtype=np.float64)) if t3 else math.nan
    return ActivationReport(per_fact, population)


def rank_prompts_by_activation(
    model: MaskedLM, neurons: Sequence[NeuronId], pool: Sequence[ClozeQuery]
) -> list[tuple[ClozeQuery, float]]:
    """Prompts sorted by mean activation of ``neurons``, highest first; ties keep pool order."""
    if not pool:
        raise ContractError("rank_prompts_by_activation needs a non-empty pool")
    if not neurons:
        raise ContractError("rank_prompts_by_activation needs a non-empty neuron set")
    acts = _batched_activations(model, pool)
    layers = np.array([n.layer for n in neurons])
    idx = np.array([n.index for n in neurons])
    scores = acts[:, layers, idx].mean(axis=1, dtype=np.float64)
    order = sorted(range(len(pool)), key=lambda i: -scores[i])
    return [(pool[i], float(scores[i])) for i in order]


# --- file formats --------------------------------------------------------------


def write_intervention_tsv(path, report: InterventionReport) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("relation\tmode\tmethod\tmean_rel_change\tn_facts\n")
        for rel, mode, method, change, n in report.rows():
            fh.write(f"{rel}\t{mode}\t{method}\t{change:.6f}\t{n}\n")


def write_fact_details(path, report: InterventionReport) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("fact_id\trelation\tmethod\tmode\tn_neurons\tbefore\tafter\trel_change\n")
        for e in sorted(report.effects, key=lambda e: (e.fact_id, _method_order(e.method), e.mode)):
            fh.write(f"{e.fact_id}\t{e.relation}\t{e.method}\t{e.mode}\t{e.n_neurons}\t"
                     f"{e.mean_before:.6f}\t{e.mean_after:.6f}\t{e.rel_change:.6f}\n")


def write_plot_data(path, report: InterventionReport) -> None:
    """Long-format series for bar charts: x is the relation, y the mean relative change."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("series\tx\ty\n")
        for rel, mode, method, change, _ in report.rows():
            if rel != "all":
                fh.write(f"{method}:{mode}\t{rel}\t{change:.6f}\n")


def write_activation_tsv(path, report: ActivationReport) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("method\tfact_id\tt1\tt2\tt3\n")
        for method in sorted(report.per_fact, key=_method_order):
            for f, (a, b, c) in sorted(report.per_fact[method].items()):
                fh.write(f"{method}\t{f}\t{a:.6f}\t{b:.6f}\t{c:.6f}\n")
            a, b, c = report.means(method)
            fh.write(f"{method}\tall\t{a:.6f}\t{b:.6f}\t{c:.6f}\n")
