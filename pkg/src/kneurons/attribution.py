"""Knowledge attribution over FFN intermediate neurons and knowledge-neuron refinement.

Integrated gradients are taken with respect to the intermediate activations at
the masked position.  The default *joint* path scales every such neuron (all
layers) from 0 to its observed value together, so one backward pass per
Riemann step yields every neuron's gradient and the scores satisfy
completeness: ``sum(scores) ~= P(observed) - P(all zero)``.  The
*independent* path moves one neuron at a time with the rest held at their
observed values.
"""

from __future__ import annotations

import json
import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from itertools import combinations
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .facts import ClozeQuery
from .model import MaskedLM, NeuronId, encode_batch, forward_batch
from .tensor import DTYPE, Tensor

log = logging.getLogger(__name__)

IG_PATHS = ("joint", "independent")


@dataclass
class AttributionMap:
    """Scores for every (layer, index) neuron at one query's masked position."""

    query_id: int
    scores: np.ndarray  # [n_layers, d_ffn]
    activations: np.ndarray  # [n_layers, d_ffn]

    def score(self, n: NeuronId) -> float:
        return float(self.scores[n.layer, n.index])

    def __len__(self) -> int:
        return self.scores.size


@dataclass(frozen=True)
class CoarseSet:
    query_id: int
    neurons: tuple[NeuronId, ...]
    threshold: float
    t_fraction: float = 0.2


@dataclass(frozen=True)
class KnowledgeNeuronSet:
    fact_id: int
    neurons: tuple[NeuronId, ...]
    shares: tuple[float, ...]
    mean_scores: tuple[float, ...]
    p: float
    t: float = 0.2

    def __len__(self) -> int:
        return len(self.neurons)


@dataclass
class RefineConfig:
    t_fraction: float = 0.2
    p_init: float = 0.7
    p_step: float = 0.05
    band: tuple[float, float] = (2.0, 5.0)
    ig_steps: int = 20
    max_iter: int = 40
    t_step: float = 0.05  # 0 keeps t fixed at t_fraction

    def validate(self) -> None:
        if not 0 < self.t_fraction < 1:
            raise ConfigError(f"t_fraction must lie in (0, 1), got {self.t_fraction}")
        if self.band[0] > self.band[1]:
            raise ConfigError(f"band lower bound exceeds upper bound: {self.band}")
        if self.ig_steps < 1:
            raise ConfigError("ig_steps must be >= 1")
        if self.p_step <= 0:
            raise ConfigError("p_step must be positive")
        if self.t_step < 0:
            raise ConfigError("t_step must be non-negative")


@dataclass
class RelationRefinement:
    relation: int
    p_used: float
    t_used: float
    avg_size: float
    in_band: bool
    trajectory: list[tuple[float, float, float]]  # (t, p, average set size) in visiting order


# --- scoring -----------------------------------------------------------------


def _answer_prob_sum(model: MaskedLM, ids, valid, rows, answers, replace) -> tuple[Tensor, T.Tape]:
    with T.Tape() as tape:
        logits, _ = model.forward(ids, valid, rows, replace=replace)
        total = T.tsum(T.pick(T.softmax(logits, axis=-1), answers))
    return total, tape


def attribute_ig(
    model: MaskedLM,
    query: ClozeQuery,
    m: int = 20,
    *,
    path: str = "joint",
    query_id: int = 0,
    chunk: int = 256,
) -> AttributionMap:
    """Riemann-sum integrated gradients, ``(w/m) * sum_k dP(k/m * w)/dw``."""
    if m < 1:
        raise ConfigError(f"IG needs at least one step, got m={m}")
    if path not in IG_PATHS:
        raise ConfigError(f"unknown IG path {path!r}; choose from {IG_PATHS}")
    base = forward_batch(model, [query])
    w_bar = base.activations[0]  # [L, F]
    if path == "joint":
        grads = _joint_gradient_sum(model, query, w_bar, m, chunk)
    else:
        grads = _independent_gradient_sum(model, query, w_bar, m, chunk)
    scores = (w_bar.astype(np.float64) * grads / m).astype(DTYPE)
    if not np.all(np.isfinite(scores)):
        raise ContractError(f"query {query_id}: non-finite attribution scores")
    return AttributionMap(query_id, scores, w_bar)


def _joint_gradient_sum(model, query, w_bar, m, chunk) -> np.ndarray:
    L = model.config.n_layers
    alphas = np.arange(1, m + 1, dtype=np.float64) / m
    total = np.zeros(w_bar.shape, dtype=np.float64)
    with model.frozen():
        for start in range(0, m, chunk):
            a = alphas[start : start + chunk]
            ids, valid, rows = encode_batch([query] * len(a))
            replace = {l: Tensor((a[:, None] * w_bar[l][None, :]).astype(DTYPE), requires_grad=True) for l in range(L)}
            out, tape = _answer_prob_sum(model, ids, valid, rows, [query.answer] * len(a), replace)
            tape.backward(out)
            for l in range(L):
                total[l] += replace[l].grad.sum(axis=0, dtype=np.float64)
    return total


def _independent_gradient_sum(model, query, w_bar, m, chunk) -> np.ndarray:
    L, F = w_bar.shape
    alphas = np.arange(1, m + 1, dtype=np.float64) / m
    total = np.zeros(w_bar.shape, dtype=np.float64)
    with model.frozen():
        for layer in range(L):
            # one row per (neuron, step); only neuron i of that row moves along the path
            pairs = [(i, k) for i in range(F) if w_bar[layer, i] != 0 for k in range(m)]
            for start in range(0, len(pairs), chunk):
                block = pairs[start : start + chunk]
                n = len(block)
                idx = np.array([i for i, _ in block])
                al = np.array([alphas[k] for _, k in block])
                ids, valid, rows = encode_batch([query] * n)
                replace = {}
                for l in range(L):
                    vals = np.repeat(w_bar[l][None, :], n, axis=0)
                    if l == layer:
                        vals[np.arange(n), idx] = (al * w_bar[layer, idx]).astype(DTYPE)
                    replace[l] = Tensor(vals, requires_grad=(l == layer))
                out, tape = _answer_prob_sum(model, ids, valid, rows, [query.answer] * n, replace)
                tape.backward(out)
                g = replace[layer].grad[np.arange(n), idx].astype(np.float64)
                np.add.at(total[layer], idx, g)
    return total


def attribute_baseline(model: MaskedLM, query: ClozeQuery, *, query_id: int = 0) -> AttributionMap:
    """Activation baseline: the score of a neuron is its activation."""
    acts = forward_batch(model, [query]).activations[0]
    return AttributionMap(query_id, acts.copy(), acts)


def attribute_baseline_batch(model: MaskedLM, queries: Sequence[ClozeQuery], batch_size: int = 256) -> list[AttributionMap]:
    from .trainer import length_batches

    out: list[AttributionMap | None] = [None] * len(queries)
    for idx in length_batches(queries, batch_size):
        acts = forward_batch(model, [queries[i] for i in idx]).activations
        for j, i in enumerate(idx):
            out[i] = AttributionMap(i, acts[j].copy(), acts[j].copy())
    return out  # type: ignore[return-value]


_WORKER_MODEL: MaskedLM | None = None


def _init_worker(model: MaskedLM) -> None:
    global _WORKER_MODEL
    _WORKER_MODEL = model


def _ig_task(args) -> AttributionMap:
    qid, query, m, path = args
    return attribute_ig(_WORKER_MODEL, query, m, path=path, query_id=qid)


def attribute_all_ig(
    model: MaskedLM,
    queries: Sequence[ClozeQuery],
    m: int = 20,
    *,
    path: str = "joint",
    jobs: int = 1,
    on_progress: Callable[[int], None] | None = None,
) -> list[AttributionMap]:
    """IG maps for every query; ``jobs > 1`` fans out over worker processes."""
    tasks = [(i, q, m, path) for i, q in enumerate(queries)]
    if jobs <= 1:
        maps = []
        for t in tasks:
            maps.append(attribute_ig(model, t[1], m, path=path, query_id=t[0]))
            if on_progress is not None:
                on_progress(len(maps))
        return maps
    with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker, initargs=(model,)) as pool:
        return list(pool.map(_ig_task, tasks, chunksize=16))


# --- coarse sets and refinement ----------------------------------------------


def coarse_set(amap: AttributionMap, t_fraction: float = 0.2) -> CoarseSet:
    """Neurons whose score strictly exceeds ``t_fraction * max(score)``."""
    if amap.scores.size == 0:
        raise ContractError("coarse_set needs a non-empty attribution map")
    top = float(amap.scores.max())
    threshold = t_fraction * top
    if top <= 0:
        warnings.warn(f"query {amap.query_id}: no positive attribution score; coarse set is empty", stacklevel=2)
        return CoarseSet(amap.query_id, (), threshold, t_fraction)
    layers, idx = np.nonzero(amap.scores > threshold)
    return CoarseSet(amap.query_id, tuple(NeuronId(int(l), int(i)) for l, i in zip(layers, idx)), threshold, t_fraction)


def _share_table(coarse: Sequence[CoarseSet]) -> dict[NeuronId, float]:
    counts: dict[NeuronId, int] = {}
    for cs in coarse:
        for n in cs.neurons:
            counts[n] = counts.get(n, 0) + 1
    return {n: c / len(coarse) for n, c in counts.items()}


def refine_fact(
    fact_id: int,
    coarse: Sequence[CoarseSet],
    mean_scores: np.ndarray,
    p: float,
    *,
    shares: Mapping[NeuronId, float] | None = None,
) -> KnowledgeNeuronSet:
    """Keep neurons present in strictly more than a ``p`` fraction of the coarse sets.

    Members are ordered by sharing ratio, then mean attribution (both
    descending), then ``(layer, index)``.
    """
    if len(coarse) < 2:
        raise ContractError(f"fact {fact_id}: refinement needs at least 2 prompts, got {len(coarse)}")
    shares = _share_table(coarse) if shares is None else shares
    kept = [n for n, s in shares.items() if s > p]
    kept.sort(key=lambda n: (-shares[n], -float(mean_scores[n.layer, n.index]), n.layer, n.index))
    return KnowledgeNeuronSet(
        fact_id,
        tuple(kept),
        tuple(shares[n] for n in kept),
        tuple(float(mean_scores[n.layer, n.index]) for n in kept),
        p,
        coarse[0].t_fraction,
    )


def _search_p(
    coarse_by_fact: Mapping[int, Sequence[CoarseSet]],
    mean_scores: Mapping[int, np.ndarray],
    cfg: RefineConfig,
) -> list[tuple[float, dict[int, KnowledgeNeuronSet], float]]:
    """Walk ``p`` from ``cfg.p_init`` toward the band; return every visited ``(p, sets, avg)``."""
    lo, hi = cfg.band
    shares = {fid: _share_table(cs) for fid, cs in coarse_by_fact.items()}
    visited: dict[float, tuple[dict[int, KnowledgeNeuronSet], float]] = {}
    p = round(cfg.p_init, 10)
    for _ in range(cfg.max_iter):
        sets = {fid: refine_fact(fid, cs, mean_scores[fid], p, shares=shares[fid]) for fid, cs in coarse_by_fact.items()}
        avg = float(np.mean([len(s) for s in sets.values()])) if sets else 0.0
        visited[p] = (sets, avg)
        if lo <= avg <= hi:
            break
        nxt = round(p + cfg.p_step if avg > hi else p - cfg.p_step, 10)
        if not 0 < nxt <= 1 or nxt in visited:
            break
        p = nxt
    return [(p_, sets_, avg_) for p_, (sets_, avg_) in visited.items()]


def refine_relation(
    maps_by_fact: Mapping[int, Sequence[AttributionMap]],
    cfg: RefineConfig,
    relation: int = -1,
) -> tuple[dict[int, KnowledgeNeuronSet], RelationRefinement]:
    """Adapt ``p`` (and, if needed, ``t``) for one relation until the average set size lies in the band.

    ``p`` starts at ``cfg.p_init`` and moves by ``cfg.p_step``: up while sets are
    too large, down while too small, stopping inside the band, when ``p`` leaves
    (0, 1], on revisiting a value, or after ``cfg.max_iter`` steps.  If no ``p``
    lands in the band, ``t`` moves by ``cfg.t_step`` (up when sets were too
    large at some ``p``, down when they were too small everywhere) and the
    ``p`` walk restarts.  The visited ``(t, p)`` closest to the band wins;
    ties go to the larger ``p``, then the earlier ``t``.
    """
    cfg.validate()
    lo, hi = cfg.band
    for fid, ms in maps_by_fact.items():
        if len(ms) < 2:
            raise ContractError(f"fact {fid}: refinement needs at least 2 prompts, got {len(ms)}")
        if len(ms) < 4:
            warnings.warn(f"fact {fid}: only {len(ms)} prompts; refinement is unreliable below 4", stacklevel=2)
    means = {fid: np.mean([mp.scores for mp in ms], axis=0) for fid, ms in maps_by_fact.items()}

    candidates = []  # (distance, -p, order, t, p, sets, avg)
    trajectory = []
    seen_t = set()
    t = round(cfg.t_fraction, 10)
    while t not in seen_t and 0 < t < 1 and len(seen_t) < cfg.max_iter:
        seen_t.add(t)
        coarse = {fid: [coarse_set(mp, t) for mp in ms] for fid, ms in maps_by_fact.items()}
        visits = _search_p(coarse, means, cfg)
        for p, sets, avg in visits:
            trajectory.append((t, p, avg))
            candidates.append((max(lo - avg, avg - hi, 0.0), -p, len(candidates), t, p, sets, avg))
        if any(lo <= avg <= hi for _, _, avg in visits) or cfg.t_step == 0:
            break
        too_small = all(avg < lo for _, _, avg in visits)
        t = round(t - cfg.t_step if too_small else t + cfg.t_step, 10)

    _, _, _, best_t, best_p, best_sets, best_avg = min(candidates, key=lambda c: c[:3])
    in_band = lo <= best_avg <= hi
    if not in_band:
        log.info("relation %s: search ended outside [%s, %s] (t=%.2f, p=%.2f, avg=%.2f)",
                 relation, lo, hi, best_t, best_p, best_avg)
    return best_sets, RelationRefinement(relation, best_p, best_t, best_avg, in_band, trajectory)


def refine(
    maps_by_fact: Mapping[int, Sequence[AttributionMap]],
    relation_of: Mapping[int, int],
    cfg: RefineConfig | None = None,
) -> tuple[dict[int, KnowledgeNeuronSet], dict[int, RelationRefinement]]:
    """Coarse sets per prompt, then per-relation adaptive refinement for every fact."""
    cfg = cfg or RefineConfig()
    cfg.validate()
    by_relation: dict[int, list[int]] = {}
    for fid in sorted(maps_by_fact):
        by_relation.setdefault(relation_of[fid], []).append(fid)
    sets: dict[int, KnowledgeNeuronSet] = {}
    info: dict[int, RelationRefinement] = {}
    for rel, fids in sorted(by_relation.items()):
        rel_sets, info[rel] = refine_relation({fid: maps_by_fact[fid] for fid in fids}, cfg, relation=rel)
        sets.update(rel_sets)
    return sets, info


# --- statistics ----------------------------------------------------------------


@dataclass
class OverlapStats:
    avg_size: float
    intra: float
    inter: float
    n_intra_pairs: int
    n_inter_pairs: int


def overlap_stats(sets: Mapping[int, KnowledgeNeuronSet], relation_of: Mapping[int, int]) -> OverlapStats:
    """Average refined-set size and mean pairwise intersections within/across relations."""
    fids = sorted(sets)
    members = {f: frozenset(sets[f].neurons) for f in fids}
    intra, inter = [], []
    for a, b in combinations(fids, 2):
        k = len(members[a] & members[b])
        (intra if relation_of[a] == relation_of[b] else inter).append(k)
    mean = lambda xs: float(np.mean(xs)) if xs else float("nan")
    return OverlapStats(
        avg_size=mean([len(members[f]) for f in fids]),
        intra=mean(intra),
        inter=mean(inter),
        n_intra_pairs=len(intra),
        n_inter_pairs=len(inter),
    )


def group_by_fact(queries: Sequence[ClozeQuery], maps: Iterable[AttributionMap]) -> dict[int, list[AttributionMap]]:
    out: dict[int, list[AttributionMap]] = {}
    for mp in maps:
        out.setdefault(queries[mp.query_id].fact_id, []).append(mp)
    return out


# --- file formats --------------------------------------------------------------


def write_attribution_tsv(path, queries: Sequence[ClozeQuery], maps: Iterable[AttributionMap], top_k: int = 200) -> None:
    """Top-k neurons per query by score; ties by (layer, index)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("query_id\tfact_id\ttemplate_id\tlayer\tindex\tscore\tactivation\n")
        for mp in maps:
            q = queries[mp.query_id]
            flat = mp.scores.reshape(-1)
            order = np.lexsort((np.arange(flat.size), -flat))[:top_k]
            F = mp.scores.shape[1]
            for j in order:
                l, i = divmod(int(j), F)
                fh.write(f"{mp.query_id}\t{q.fact_id}\t{q.template_id}\t{l}\t{i}\t"
                         f"{float(mp.scores[l, i]):.9g}\t{float(mp.activations[l, i]):.9g}\n")


def save_full_maps(path, maps: Sequence[AttributionMap]) -> None:
    """Full score tensor ``[n_queries, n_layers, d_ffn]`` as ``.npy``."""
    np.save(path, np.stack([mp.scores for mp in maps]).astype("<f4"), allow_pickle=False)


def write_refined_sets(path, sets: Mapping[int, KnowledgeNeuronSet]) -> None:
    """One JSON line per fact: ``neurons`` holds ``[layer, index, share, mean_score]``."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for fid in sorted(sets):
            s = sets[fid]
            neurons = [[n.layer, n.index, share, score] for n, share, score in zip(s.neurons, s.shares, s.mean_scores)]
            fh.write(json.dumps({"fact_id": fid, "neurons": neurons, "p_used": s.p, "t_used": s.t}) + "\n")


def read_refined_sets(path) -> dict[int, KnowledgeNeuronSet]:
    """Inverse of :func:`write_refined_sets`."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            ns = rec["neurons"]
            out[rec["fact_id"]] = KnowledgeNeuronSet(
                rec["fact_id"],
                tuple(NeuronId(l, i) for l, i, _, _ in ns),
                tuple(s for _, _, s, _ in ns),
                tuple(m for _, _, _, m in ns),
                rec["p_used"],
                rec.get("t_used", 0.2),
            )
    return out
