"""Command-line entry point.

Every subcommand reads and writes named files inside a run directory
(``--out-dir``), so stages chain by pointing later commands at the same
directory.  Each run also writes ``manifest.<command>.json`` with the resolved
configuration and SHA-256 hashes of its inputs and outputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint
from .attribution import (
    IG_PATHS,
    RefineConfig,
    attribute_all_ig,
    attribute_baseline_batch,
    group_by_fact,
    overlap_stats,
    read_refined_sets,
    refine,
    save_full_maps,
    write_attribution_tsv,
    write_refined_sets,
)
from .errors import ConfigError, ContractError, KneuronsError, RequestError
from .facts import (
    WorldSpec,
    build_prompt_groups,
    build_queries,
    generate_world,
    load_world,
    query_text,
    save_world,
    write_queries_tsv,
)
from .intervention import (
    activation_study,
    intervention_study,
    rank_prompts_by_activation,
    write_activation_tsv,
    write_fact_details,
    write_intervention_tsv,
    write_plot_data,
)
from .model import MaskedLM, ModelConfig
from .surgery import (
    EraseRequest,
    UpdateRequest,
    ValueSlotEditor,
    append_edit_log,
    erase_neurons,
    erase_relation,
    pick_target,
    request_params,
    update_fact,
    update_neurons,
)
from .trainer import TrainConfig, TrainReport, evaluate, known_facts, train

log = logging.getLogger("kneurons")

WORLD = "world.jsonl"
QUERIES = "queries.tsv"
CHECKPOINT = "model.ckpt"
TRAIN_REPORT = "train_report.jsonl"
ATTRIBUTIONS = "attributions.tsv"
FULL_MAPS = "ig_maps.npy"
IG_SETS = "ig_sets.jsonl"
BASELINE_SETS = "baseline_sets.jsonl"
REFINEMENT = "refinement.tsv"
OVERLAP = "overlap.tsv"
INTERVENTION = "intervention.tsv"
INTERVENTION_FACTS = "intervention_facts.tsv"
INTERVENTION_PLOT = "intervention_plot.tsv"
SIGN_TEST = "sign_test.tsv"
ACTIVATION = "activation.tsv"
ACTIVATION_RANKING = "activation_ranking.tsv"
EDIT_LOG = "edits.jsonl"
SUMMARY = "summary.tsv"


# --- small helpers ---------------------------------------------------------------


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _require(path: Path, what: str) -> Path:
    if not path.is_file():
        raise ContractError(f"missing {what}: {path}")
    return path


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(args, inputs: Sequence[Path], outputs: Sequence[Path]) -> Path:
    config = {k: v for k, v in sorted(vars(args).items()) if k != "handler"}
    manifest = {
        "command": args.command,
        "config": config,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": {str(p): _sha256(p) for p in outputs},
    }
    path = Path(args.out_dir) / f"manifest.{args.command}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    return path


def _world_path(args) -> Path:
    return _require(Path(args.world) if args.world else Path(args.out_dir) / WORLD, "world file")


def _checkpoint_path(args) -> Path:
    return _require(Path(args.checkpoint) if args.checkpoint else Path(args.out_dir) / CHECKPOINT, "checkpoint")


def _sets_dir(args) -> Path:
    return Path(args.sets_dir) if args.sets_dir else Path(args.out_dir)


def _relation_of(world) -> dict[int, int]:
    return {f.id: f.relation for f in world.facts}


def _known(model: MaskedLM, queries) -> list[int]:
    return known_facts(queries, evaluate(model, queries).correct)


def _fmt(x) -> str:
    if isinstance(x, float):
        return "nan" if math.isnan(x) else f"{x:.6f}"
    return str(x)


# --- subcommands -----------------------------------------------------------------


def cmd_gen_world(args) -> list[tuple[str, str, object]]:
    out = _out_dir(args)
    spec = WorldSpec(n_relations=args.relations, templates_per_relation=args.templates,
                     entities_per_type=args.entities, facts_per_relation=args.facts, seed=args.seed)
    world = generate_world(spec)
    queries = build_queries(world)
    save_world(world, out / WORLD)
    write_queries_tsv(world, queries, out / QUERIES)
    _write_manifest(args, [], [out / WORLD, out / QUERIES])
    log.info("world: %d facts, %d queries, vocabulary %d", len(world.facts), len(queries), len(world.vocab))
    return [("world", "n_facts", len(world.facts)), ("world", "n_queries", len(queries)),
            ("world", "vocab_size", len(world.vocab))]


def cmd_train(args) -> list[tuple[str, str, object]]:
    out = _out_dir(args)
    world_path = _world_path(args)
    world = load_world(world_path)
    queries = build_queries(world)
    inputs = [world_path]
    if args.init:
        init = _require(Path(args.init), "initial checkpoint")
        inputs.append(init)
        model = checkpoint.load(init)
        if model.config.vocab_size != len(world.vocab):
            raise ConfigError(f"checkpoint vocabulary {model.config.vocab_size} != world vocabulary {len(world.vocab)}")
    else:
        if args.in_place:
            raise ConfigError("--in-place needs --init")
        model = MaskedLM(ModelConfig(n_layers=args.layers, d_model=args.d_model, d_ffn=args.d_ffn,
                                     n_heads=args.heads, vocab_size=len(world.vocab),
                                     max_seq_len=args.max_seq_len, seed=args.seed))
    cfg = TrainConfig(lr=args.lr, batch_size=args.batch_size, max_steps=args.max_steps, min_steps=args.min_steps,
                      warmup_steps=args.warmup_steps, target_accuracy=args.target_accuracy,
                      eval_interval=args.eval_interval, label_smoothing=args.label_smoothing, seed=args.seed)
    target = Path(args.init) if args.in_place else out / CHECKPOINT
    report = train(model, queries, cfg, relation_of=_relation_of(world), checkpoint_path=target,
                   progress=None if args.quiet else sys.stdout)
    report.write(out / TRAIN_REPORT)
    _write_manifest(args, inputs, [target, out / TRAIN_REPORT])
    return [("train", "final_step", report.final_step), ("train", "accuracy", report.accuracy),
            ("train", "n_known_facts", len(report.known_facts))]


def _refine_config(args) -> RefineConfig:
    return RefineConfig(t_fraction=args.t_fraction, p_init=args.p_init, p_step=args.p_step,
                        ig_steps=args.ig_steps, t_step=args.t_step)


def cmd_attribute(args) -> list[tuple[str, str, object]]:
    out = _out_dir(args)
    world_path, ckpt_path = _world_path(args), _checkpoint_path(args)
    world = load_world(world_path)
    model = checkpoint.load(ckpt_path)
    queries = build_queries(world)
    relation_of = _relation_of(world)
    cfg = _refine_config(args)
    cfg.validate()
    if args.ig_path not in IG_PATHS:
        raise ConfigError(f"--ig-path must be one of {IG_PATHS}")

    step = max(len(queries) // 10, 1)

    def progress(done: int) -> None:
        if done % step == 0:
            log.info("attributed %d/%d queries", done, len(queries))

    maps = attribute_all_ig(model, queries, cfg.ig_steps, path=args.ig_path, jobs=args.jobs, on_progress=progress)
    base_maps = attribute_baseline_batch(model, queries)
    ig_sets, ig_info = refine(group_by_fact(queries, maps), relation_of, cfg)
    base_sets, base_info = refine(group_by_fact(queries, base_maps), relation_of, cfg)

    outputs = [out / ATTRIBUTIONS, out / IG_SETS, out / BASELINE_SETS, out / REFINEMENT]
    write_attribution_tsv(out / ATTRIBUTIONS, queries, maps, args.top_k)
    if args.full_maps:
        save_full_maps(out / FULL_MAPS, maps)
        outputs.append(out / FULL_MAPS)
    write_refined_sets(out / IG_SETS, ig_sets)
    write_refined_sets(out / BASELINE_SETS, base_sets)
    rows = []
    with open(out / REFINEMENT, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("method\trelation\tt_used\tp_used\tavg_size\tin_band\n")
        for method, info in (("ig", ig_info), ("baseline", base_info)):
            for rel, r in sorted(info.items()):
                fh.write(f"{method}\t{rel}\t{r.t_used:.2f}\t{r.p_used:.2f}\t{r.avg_size:.4f}\t{int(r.in_band)}\n")
                if not r.in_band:
                    log.warning("%s relation %d: average set size %.2f outside the band (t=%.2f, p=%.2f)",
                                method, rel, r.avg_size, r.t_used, r.p_used)
            rows.append(("attribute", f"{method}_relations_in_band", sum(r.in_band for r in info.values())))
    _write_manifest(args, [world_path, ckpt_path], outputs)
    return rows


def cmd_stats(args) -> list[tuple[str, str, object]]:
    out = _out_dir(args)
    world_path = _world_path(args)
    relation_of = _relation_of(load_world(world_path))
    sets_dir = _sets_dir(args)
    inputs = [world_path]
    rows = []
    with open(out / OVERLAP, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("method\tavg_size\tintra\tinter\tn_intra_pairs\tn_inter_pairs\n")
        for method, name in (("ig", IG_SETS), ("baseline", BASELINE_SETS)):
            path = _require(sets_dir / name, f"{method} refined sets")
            inputs.append(path)
            s = overlap_stats(read_refined_sets(path), relation_of)
            fh.write(f"{method}\t{_fmt(s.avg_size)}\t{_fmt(s.intra)}\t{_fmt(s.inter)}\t"
                     f"{s.n_intra_pairs}\t{s.n_inter_pairs}\n")
            rows += [("stats", f"{method}_avg_size", s.avg_size), ("stats", f"{method}_intra", s.intra),
                     ("stats", f"{method}_inter", s.inter)]
    _write_manifest(args, inputs, [out / OVERLAP])
    return rows


def _load_sets(args) -> tuple[dict, list[Path]]:
    sets_dir = _sets_dir(args)
    paths = {"ig": _require(sets_dir / IG_SETS, "IG refined sets"),
             "baseline": _require(sets_dir / BASELINE_SETS, "baseline refined sets")}
    return {m: read_refined_sets(p) for m, p in paths.items()}, list(paths.values())


def cmd_intervene(args) -> list[tuple[str, str, object]]:
    out = _out_dir(args)
    world_path, ckpt_path = _world_path(args), _checkpoint_path(args)
    world = load_world(world_path)
    model = checkpoint.load(ckpt_path)
    queries = build_queries(world)
    sets, set_paths = _load_sets(args)
    known = _known(model, queries)
    report = intervention_study(model, queries, sets, _relation_of(world), known,
                                resamples=args.resamples, seed=args.seed)
    write_intervention_tsv(out / INTERVENTION, report)
    write_fact_details(out / INTERVENTION_FACTS, report)
    write_plot_data(out / INTERVENTION_PLOT, report)
    rows = [("intervene", "n_known_facts", len(known)), ("intervene", "n_excluded", len(report.excluded))]
    with open(out / SIGN_TEST, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("method\tcontrol\tmode\tn_lower\tn_higher\tp_value\n")
        for method in ("ig", "baseline"):
            for mode in ("suppress", "amplify"):
                t = report.sign_test(method, "random", mode)
                fh.write(f"{method}\trandom\t{mode}\t{t.n_lower}\t{t.n_higher}\t{t.p_value:.6g}\n")
    for method in ("ig", "baseline", "random"):
        for mode in ("suppress", "amplify"):
            rows.append(("intervene", f"{method}_{mode}", report.mean_rel_change(method, mode)))
    rows.append(("intervene", "ig_opposite_direction", report.opposite_direction_fraction("ig")))
    rows.append(("intervene", "ig_vs_random_sign_p", report.sign_test("ig", "random", "suppress").p_value))
    _write_manifest(args, [world_path, ckpt_path, *set_paths],
                    [out / INTERVENTION, out / INTERVENTION_FACTS, out / INTERVENTION_PLOT, out / SIGN_TEST])
    return rows


def cmd_activation_study(args) -> list[tuple[str, str, object]]:
    out = _out_dir(args)
    world_path, ckpt_path = _world_path(args), _checkpoint_path(args)
    world = load_world(world_path)
    model = checkpoint.load(ckpt_path)
    queries = build_queries(world)
    sets, set_paths = _load_sets(args)
    known = _known(model, queries)
    groups = build_prompt_groups(world, seed=args.seed, group_size=args.group_size)
    report = activation_study(model, sets, groups, known)
    write_activation_tsv(out / ACTIVATION, report)

    t1_first = []
    with open(out / ACTIVATION_RANKING, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("fact_id\trank\tgroup\tmean_activation\ttext\n")
        for f in known:
            neurons = sets["ig"].get(f)
            if neurons is None or not neurons.neurons:
                continue
            g = groups[f]
            pool = [(q, "t1") for q in g.t1] + [(q, "t2") for q in g.t2] + [(q, "t3") for q in g.t3]
            kind = {id(q): name for q, name in pool}
            ranked = rank_prompts_by_activation(model, neurons.neurons, [q for q, _ in pool])
            shown = list(enumerate(ranked))[:2] + list(enumerate(ranked))[-2:]
            for rank, (q, score) in shown:
                fh.write(f"{f}\t{rank + 1}\t{kind[id(q)]}\t{score:.6f}\t{query_text(world, q)}\n")
            pair = rank_prompts_by_activation(model, neurons.neurons, [g.t1[0], g.t3[0]])
            t1_first.append(pair[0][0] is g.t1[0])

    rows = []
    for method in ("ig", "baseline"):
        t1, t2, t3 = report.means(method)
        rows += [("activation", f"{method}_t1", t1), ("activation", f"{method}_t2", t2),
                 ("activation", f"{method}_t3", t3), ("activation", f"{method}_separation", report.separation(method))]
    rows.append(("activation", "population_t3", report.population_t3))
    rows.append(("activation", "ig_t1_ranked_over_t3", float(np.mean(t1_first)) if t1_first else math.nan))
    _write_manifest(args, [world_path, ckpt_path, *set_paths], [out / ACTIVATION, out / ACTIVATION_RANKING])
    return rows


def _resolve_entity(world, text: str) -> int:
    if text.isdigit():
        return int(text)
    for e in world.entities:
        if e.name == text:
            return e.id
    raise RequestError(f"unknown entity {text!r}")


def _surgery_target(args, default_name: str) -> Path:
    if args.in_place:
        return Path(args.checkpoint) if args.checkpoint else Path(args.out_dir) / CHECKPOINT
    return Path(args.output) if args.output else Path(args.out_dir) / default_name


def cmd_update(args) -> list[tuple[str, str, object]]:
    out = _out_dir(args)
    world_path, ckpt_path = _world_path(args), _checkpoint_path(args)
    world = load_world(world_path)
    model = checkpoint.load(ckpt_path)
    queries = build_queries(world)
    sets, set_paths = _load_sets(args)
    if not 0 <= args.fact < len(world.facts):
        raise RequestError(f"unknown fact {args.fact}")
    if args.fact not in _known(model, queries):
        raise RequestError(f"fact {args.fact} is not known by the model")
    target = (_resolve_entity(world, args.target) if args.target is not None
              else pick_target(world, args.fact, np.random.default_rng(args.seed)))
    req = UpdateRequest(args.fact, target, args.lambda1, args.lambda2, args.share_cap)
    relation_of = _relation_of(world)
    neurons = update_neurons(args.fact, sets["ig"], relation_of, args.share_cap)
    if not neurons:
        log.warning("fact %d: no knowledge neuron survives the %.0f%% sharing cap; nothing edited",
                    args.fact, 100 * args.share_cap)
    editor = ValueSlotEditor(model)
    editor.snapshot(neurons)
    report = update_fact(model, world, queries, req, neurons)
    summary = {**report.summary(), "fact_id": args.fact, "target": world.entities[target].name}
    print(json.dumps(summary, sort_keys=True))
    if args.dry_run:
        editor.restore()
        return [("update", k, v) for k, v in sorted(summary.items())]
    dest = _surgery_target(args, "model.updated.ckpt")
    checkpoint.save(model, dest)
    append_edit_log(Path(args.edit_log) if args.edit_log else out / EDIT_LOG, "update", report.neurons,
                    request_params(req), report.summary())
    _write_manifest(args, [world_path, ckpt_path, *set_paths], [dest])
    return [("update", k, v) for k, v in sorted(summary.items())]


def cmd_erase(args) -> list[tuple[str, str, object]]:
    out = _out_dir(args)
    world_path, ckpt_path = _world_path(args), _checkpoint_path(args)
    world = load_world(world_path)
    model = checkpoint.load(ckpt_path)
    queries = build_queries(world)
    sets, set_paths = _load_sets(args)
    req = EraseRequest(args.relation, args.budget)
    relation_of = _relation_of(world)
    neurons = erase_neurons(args.relation, sets["ig"], relation_of, args.budget)
    editor = ValueSlotEditor(model)
    editor.snapshot(neurons)
    report = erase_relation(model, queries, relation_of, req, neurons)
    summary = {**report.summary(), "relation": args.relation}
    print(json.dumps(summary, sort_keys=True))
    if args.dry_run:
        editor.restore()
        return [("erase", k, v) for k, v in sorted(summary.items())]
    dest = _surgery_target(args, "model.erased.ckpt")
    checkpoint.save(model, dest)
    append_edit_log(Path(args.edit_log) if args.edit_log else out / EDIT_LOG, "erase", report.neurons,
                    request_params(req), report.summary())
    _write_manifest(args, [world_path, ckpt_path, *set_paths], [dest])
    return [("erase", k, v) for k, v in sorted(summary.items())]


STEP_DEFAULTS = {"world": None, "checkpoint": None, "sets_dir": None, "init": None, "in_place": False}

PIPELINE = (
    ("gen-world", cmd_gen_world),
    ("train", cmd_train),
    ("attribute", cmd_attribute),
    ("stats", cmd_stats),
    ("intervene", cmd_intervene),
    ("activation-study", cmd_activation_study),
)


def write_summary(path: Path, rows: Sequence[tuple[str, str, object]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("stage\tmetric\tvalue\n")
        for stage, metric, value in rows:
            fh.write(f"{stage}\t{metric}\t{_fmt(value)}\n")


def cmd_pipeline(args) -> list[tuple[str, str, object]]:
    out = _out_dir(args)
    rows: list[tuple[str, str, object]] = []
    for name, fn in PIPELINE:
        log.info("pipeline: %s", name)
        step = argparse.Namespace(**{**STEP_DEFAULTS, **vars(args), "command": name})
        rows += fn(step)
    write_summary(out / SUMMARY, rows)
    _write_manifest(args, [], [out / SUMMARY])
    return rows


# --- argument parsing ------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value file; CLI flags override it")
    p.add_argument("--out-dir", default=".", help="run directory for all outputs (default: .)")
    p.add_argument("--seed", type=int, default=0, help="seed for world, init, training and sampling")
    p.add_argument("--quiet", action="store_true", help="only warnings on stderr")


def _add_inputs(p: argparse.ArgumentParser, checkpoint_arg: bool = True, sets: bool = False) -> None:
    p.add_argument("--world", help=f"world file (default: OUT_DIR/{WORLD})")
    if checkpoint_arg:
        p.add_argument("--checkpoint", help=f"model checkpoint (default: OUT_DIR/{CHECKPOINT})")
    if sets:
        p.add_argument("--sets-dir", help=f"directory holding {IG_SETS} and {BASELINE_SETS} (default: OUT_DIR)")


def _add_world(p: argparse.ArgumentParser) -> None:
    d = WorldSpec()
    p.add_argument("--relations", type=int, default=d.n_relations, help="number of relations")
    p.add_argument("--templates", type=int, default=d.templates_per_relation, help="templates per relation (>= 4)")
    p.add_argument("--entities", type=int, default=d.entities_per_type, help="entities per type")
    p.add_argument("--facts", type=int, default=d.facts_per_relation, help="facts per relation")


def _add_train(p: argparse.ArgumentParser) -> None:
    m, t = ModelConfig(), TrainConfig()
    p.add_argument("--layers", type=int, default=m.n_layers)
    p.add_argument("--d-model", type=int, default=m.d_model)
    p.add_argument("--d-ffn", type=int, default=m.d_ffn)
    p.add_argument("--heads", type=int, default=m.n_heads)
    p.add_argument("--max-seq-len", type=int, default=m.max_seq_len)
    p.add_argument("--lr", type=float, default=t.lr)
    p.add_argument("--batch-size", type=int, default=t.batch_size)
    p.add_argument("--max-steps", type=int, default=t.max_steps)
    p.add_argument("--min-steps", type=int, default=t.min_steps)
    p.add_argument("--warmup-steps", type=int, default=t.warmup_steps)
    p.add_argument("--target-accuracy", type=float, default=t.target_accuracy)
    p.add_argument("--eval-interval", type=int, default=t.eval_interval)
    p.add_argument("--label-smoothing", type=float, default=t.label_smoothing)


def _add_attribute(p: argparse.ArgumentParser) -> None:
    r = RefineConfig()
    p.add_argument("--ig-steps", type=int, default=r.ig_steps, help="Riemann steps m (>= 1)")
    p.add_argument("--ig-path", choices=IG_PATHS, default="joint", help="IG scaling path")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for attribution")
    p.add_argument("--t-fraction", type=float, default=r.t_fraction, help="coarse threshold as a fraction of max")
    p.add_argument("--t-step", type=float, default=r.t_step, help="t adjustment when no p reaches the band (0: fixed)")
    p.add_argument("--p-init", type=float, default=r.p_init)
    p.add_argument("--p-step", type=float, default=r.p_step)
    p.add_argument("--top-k", type=int, default=200, help="neurons per query in the attribution dump")
    p.add_argument("--full-maps", action="store_true", help=f"also save every full score map to {FULL_MAPS}")


def _add_analysis(p: argparse.ArgumentParser) -> None:
    p.add_argument("--resamples", type=int, default=5, help="random-control draws per fact")
    p.add_argument("--group-size", type=int, default=8, help="prompts per T1/T2/T3 group")


def _add_surgery_output(p: argparse.ArgumentParser) -> None:
    p.add_argument("--output", help="checkpoint to write (default: a new file in OUT_DIR)")
    p.add_argument("--in-place", action="store_true", help="overwrite the input checkpoint")
    p.add_argument("--dry-run", action="store_true", help="report only; write nothing")
    p.add_argument("--edit-log", help=f"append-only edit log (default: OUT_DIR/{EDIT_LOG})")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="kneurons", description="Knowledge-neuron attribution and editing on a toy MLM.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    subs: dict[str, argparse.ArgumentParser] = {}

    def add(name: str, handler, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text, description=help_text)
        _add_common(p)
        p.set_defaults(handler=handler)
        subs[name] = p
        return p

    p = add("gen-world", cmd_gen_world, f"generate a synthetic world ({WORLD}, {QUERIES})")
    _add_world(p)

    p = add("train", cmd_train, f"train the masked LM on a world ({CHECKPOINT}, {TRAIN_REPORT})")
    _add_inputs(p, checkpoint_arg=False)
    p.add_argument("--init", help="resume from this checkpoint instead of a fresh model")
    p.add_argument("--in-place", action="store_true", help="write the trained weights back to --init")
    _add_train(p)

    p = add("attribute", cmd_attribute, f"IG and activation attribution plus refinement ({IG_SETS}, {BASELINE_SETS})")
    _add_inputs(p)
    _add_attribute(p)

    p = add("stats", cmd_stats, f"neuron-overlap statistics of refined sets ({OVERLAP})")
    _add_inputs(p, checkpoint_arg=False, sets=True)

    p = add("intervene", cmd_intervene, f"suppress/amplify knowledge neurons ({INTERVENTION})")
    _add_inputs(p, sets=True)
    _add_analysis(p)

    p = add("activation-study", cmd_activation_study, f"activation by prompt type ({ACTIVATION})")
    _add_inputs(p, sets=True)
    _add_analysis(p)

    p = add("update", cmd_update, "rewrite a fact's answer through its knowledge-neuron value slots")
    _add_inputs(p, sets=True)
    p.add_argument("--fact", type=int, required=True, help="fact id")
    p.add_argument("--target", help="new tail entity (name or id; default: random of the same type)")
    p.add_argument("--lambda1", type=float, default=1.0, help="weight removed along the old answer's embedding")
    p.add_argument("--lambda2", type=float, default=8.0, help="weight added along the new answer's embedding")
    p.add_argument("--share-cap", type=float, default=0.10, help="drop neurons shared by this fraction of peers")
    _add_surgery_output(p)

    p = add("erase", cmd_erase, "zero the value slots of a relation's most frequent knowledge neurons")
    _add_inputs(p, sets=True)
    p.add_argument("--relation", type=int, required=True, help="relation id")
    p.add_argument("--budget", type=int, default=20, help="number of neurons to erase (>= 1)")
    _add_surgery_output(p)

    p = add("pipeline", cmd_pipeline, f"gen-world, train, attribute, stats, intervene, activation-study ({SUMMARY})")
    _add_world(p)
    _add_train(p)
    _add_attribute(p)
    _add_analysis(p)
    return parser, subs


def read_config(path: str | Path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment; keys may use dashes or underscores."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def _apply_config(p: argparse.ArgumentParser, values: dict[str, str]) -> None:
    actions = {a.dest: a for a in p._actions if a.dest not in ("help", "config")}
    defaults = {}
    for key, raw in values.items():
        action = actions.get(key)
        if action is None:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(action, argparse._StoreTrueAction):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ConfigError(f"config key {key!r} expects a boolean, got {raw!r}")
            defaults[key] = raw.lower() in ("true", "1", "yes")
            continue
        try:
            value = action.type(raw) if action.type else raw
        except ValueError as exc:
            raise ConfigError(f"config key {key!r}: {exc}") from None
        if action.choices is not None and value not in action.choices:
            raise ConfigError(f"config key {key!r} must be one of {list(action.choices)}")
        defaults[key] = value
    p.set_defaults(**defaults)
    for a in p._actions:
        if a.dest in defaults:
            a.required = False


def run(argv: Sequence[str] | None = None) -> int:
    parser, subs = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parser.parse_args(argv)
        if args.config:
            _apply_config(subs[args.command], read_config(args.config))
            args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (KneuronsError, OSError) as exc:
        print(f"error\t{type(exc).__name__}\t{exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(message)s",
                        stream=sys.stderr, force=True)
    try:
        args.handler(args)
    except (KneuronsError, OSError, ValueError) as exc:
        print(f"error\t{type(exc).__name__}\t{' '.join(str(exc).split())}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())
