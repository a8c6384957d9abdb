"""Synthetic relational-fact worlds and cloze queries.

A world is a closed vocabulary of single-token entity names, a fixed catalog of
typed relations with paraphrase templates, and a functional fact table (each
``(head, relation)`` pair has exactly one tail).  Queries fill ``[X]`` with the
head and replace ``[Y]`` by the mask token.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ConfigError, QueryError

PAD, MASK, UNK = "[PAD]", "[MASK]", "[UNK]"
SPECIAL_TOKENS = (PAD, MASK, UNK)
ENTITY_TYPES = ("person", "city", "country", "organization")
MIN_TEMPLATES = 4

# (name, head type, tail type, paraphrase templates)
RELATION_CATALOG: tuple[tuple[str, str, str, tuple[str, ...]], ...] = (
    ("capital", "country", "city", (
        "The capital of [X] is [Y] .",
        "[X] has its capital in [Y] .",
        "[Y] is the capital of [X] .",
        "The capital city of [X] is [Y] .",
        "[X] 's capital is [Y] .",
        "[Y] , the capital of [X] .",
        "The seat of government of [X] is [Y] .",
        "[X] is governed from [Y] .",
        "[Y] serves as the capital of [X] .",
        "The national capital of [X] is [Y] .",
    )),
    ("place_of_birth", "person", "city", (
        "[X] was born in [Y] .",
        "[X] is originally from [Y] .",
        "The birthplace of [X] is [Y] .",
        "[Y] is the birthplace of [X] .",
        "[X] was born and raised in [Y] .",
        "[X] 's place of birth is [Y] .",
        "[X] came into the world in [Y] .",
        "The hometown of [X] is [Y] .",
        "[Y] is where [X] was born .",
        "[X] grew up in [Y] .",
    )),
    ("citizenship", "person", "country", (
        "[X] is a citizen of [Y] .",
        "[X] holds citizenship of [Y] .",
        "[X] has a passport from [Y] .",
        "The nationality of [X] is [Y] .",
        "[X] is a national of [Y] .",
        "[Y] is the country of citizenship of [X] .",
        "[X] carries a [Y] passport .",
        "[X] is legally a subject of [Y] .",
        "[Y] granted citizenship to [X] .",
        "The country of [X] is [Y] .",
    )),
    ("employer", "person", "organization", (
        "[X] works for [Y] .",
        "[X] is employed by [Y] .",
        "[X] is an employee of [Y] .",
        "The employer of [X] is [Y] .",
        "[Y] employs [X] .",
        "[X] is on the staff of [Y] .",
        "[X] earns a salary from [Y] .",
        "[Y] hired [X] .",
        "[X] has a job at [Y] .",
        "[X] joined the workforce of [Y] .",
    )),
    ("headquarters", "organization", "city", (
        "[X] is headquartered in [Y] .",
        "The headquarters of [X] is in [Y] .",
        "[X] has its main office in [Y] .",
        "[Y] hosts the head office of [X] .",
        "[X] is based in [Y] .",
        "The head office of [X] is located in [Y] .",
        "[X] operates from [Y] .",
        "[X] keeps its headquarters in [Y] .",
        "[Y] is home to the headquarters of [X] .",
        "The main base of [X] is [Y] .",
    )),
    ("located_in", "city", "country", (
        "[X] is a city in [Y] .",
        "[X] is located in [Y] .",
        "[X] lies within [Y] .",
        "[Y] contains the city of [X] .",
        "The city of [X] belongs to [Y] .",
        "[X] is situated in [Y] .",
        "[X] can be found in [Y] .",
        "[X] is part of [Y] .",
        "[Y] includes [X] among its cities .",
        "The country containing [X] is [Y] .",
    )),
    ("founder", "organization", "person", (
        "[X] was founded by [Y] .",
        "The founder of [X] is [Y] .",
        "[Y] founded [X] .",
        "[Y] established [X] .",
        "[X] was started by [Y] .",
        "[Y] is the founder of [X] .",
        "[X] was created by [Y] .",
        "[Y] set up [X] .",
        "The creator of [X] is [Y] .",
        "[X] owes its origin to [Y] .",
    )),
    ("member_of", "country", "organization", (
        "[X] is a member of [Y] .",
        "[X] belongs to the organization of [Y] .",
        "[X] is affiliated with [Y] .",
        "[X] joined [Y] .",
        "[Y] counts [X] as a member .",
        "[X] holds membership in [Y] .",
        "[Y] admitted [X] as a member .",
        "[X] participates in [Y] .",
        "[X] is a member state of [Y] .",
        "[X] sits on the council of [Y] .",
    )),
)

_ONSETS = ("b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "dr", "kr", "st", "th", "sh")
_VOWELS = ("a", "e", "i", "o", "u", "ai", "ou")


@dataclass(frozen=True)
class Entity:
    id: int
    name: str
    type: str


@dataclass(frozen=True)
class Relation:
    id: int
    name: str
    head_type: str
    tail_type: str


@dataclass(frozen=True)
class PromptTemplate:
    id: int
    relation: int
    text: str

    def __post_init__(self):
        toks = self.text.split()
        if toks.count("[X]") != 1 or toks.count("[Y]") != 1:
            raise ConfigError(f"template {self.text!r} needs [X] and [Y] exactly once each")


@dataclass(frozen=True)
class Fact:
    id: int
    head: int
    relation: int
    tail: int


@dataclass(frozen=True)
class ClozeQuery:
    """A tokenized prompt with exactly one mask; ``answer`` is the expected token id."""

    ids: tuple[int, ...]
    mask_pos: int
    answer: int
    fact_id: int
    template_id: int


@dataclass
class WorldSpec:
    n_relations: int = 8
    templates_per_relation: int = 9
    entities_per_type: int = 100
    facts_per_relation: int = 50
    entity_types: tuple[str, ...] = ENTITY_TYPES
    seed: int = 0

    def validate(self) -> None:
        if self.templates_per_relation < MIN_TEMPLATES:
            raise ConfigError(
                f"templates_per_relation={self.templates_per_relation}; at least {MIN_TEMPLATES} required"
            )
        if not 1 <= self.n_relations <= len(RELATION_CATALOG):
            raise ConfigError(f"n_relations must be in [1, {len(RELATION_CATALOG)}]")
        longest = min(len(r[3]) for r in RELATION_CATALOG[: self.n_relations])
        if self.templates_per_relation > longest:
            raise ConfigError(f"templates_per_relation={self.templates_per_relation} exceeds catalog ({longest})")
        if self.facts_per_relation < 1:
            raise ConfigError("facts_per_relation must be positive")
        if self.facts_per_relation > self.entities_per_type:
            raise ConfigError("facts_per_relation cannot exceed entities_per_type (heads are distinct)")
        needed = {t for r in RELATION_CATALOG[: self.n_relations] for t in (r[1], r[2])}
        missing = needed - set(self.entity_types)
        if missing:
            raise ConfigError(f"entity types {sorted(missing)} required by the relation catalog")
        if self.entities_per_type < 2:
            raise ConfigError("entities_per_type must be at least 2")


class Vocab:
    """Whitespace tokenizer over a closed token list."""

    def __init__(self, tokens: Iterable[str]):
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ConfigError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def mask_id(self) -> int:
        return self.index[MASK]

    def encode(self, text: str) -> list[int]:
        try:
            return [self.index[t] for t in text.split()]
        except KeyError as exc:
            raise QueryError(f"token {exc.args[0]!r} not in vocabulary") from None

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.tokens[i] for i in ids)


@dataclass
class World:
    spec: WorldSpec
    entities: list[Entity]
    relations: list[Relation]
    templates: list[PromptTemplate]
    facts: list[Fact]
    vocab: Vocab = field(init=False)

    def __post_init__(self):
        self.vocab = build_vocab(self.entities, self.templates)

    def templates_of(self, relation: int) -> list[PromptTemplate]:
        return [t for t in self.templates if t.relation == relation]

    def facts_of(self, relation: int) -> list[Fact]:
        return [f for f in self.facts if f.relation == relation]

    def entity_token(self, entity_id: int) -> int:
        return self.vocab.index[self.entities[entity_id].name]

    def entities_of_type(self, etype: str) -> list[Entity]:
        return [e for e in self.entities if e.type == etype]


def build_vocab(entities: list[Entity], templates: list[PromptTemplate]) -> Vocab:
    words = sorted({w for t in templates for w in t.text.split() if w not in ("[X]", "[Y]")})
    names = [e.name for e in entities]
    clash = set(words) & set(names)
    if clash:
        raise ConfigError(f"entity names collide with template words: {sorted(clash)}")
    return Vocab([*SPECIAL_TOKENS, *words, *names])


def _entity_names(rng: np.random.Generator, count: int, reserved: set[str]) -> list[str]:
    names: list[str] = []
    seen = set(reserved)
    while len(names) < count:
        n_syl = int(rng.integers(2, 4))
        word = "".join(
            _ONSETS[int(rng.integers(len(_ONSETS)))] + _VOWELS[int(rng.integers(len(_VOWELS)))]
            for _ in range(n_syl)
        ).capitalize()
        if word not in seen:
            seen.add(word)
            names.append(word)
    return names


def generate_world(spec: WorldSpec | None = None) -> World:
    """Build a deterministic world from ``spec``; equal specs give equal worlds."""
    spec = spec or WorldSpec()
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    catalog = RELATION_CATALOG[: spec.n_relations]

    templates: list[PromptTemplate] = []
    relations: list[Relation] = []
    for rid, (name, head_type, tail_type, texts) in enumerate(catalog):
        relations.append(Relation(rid, name, head_type, tail_type))
        for text in texts[: spec.templates_per_relation]:
            templates.append(PromptTemplate(len(templates), rid, text))
    template_words = {w for t in templates for w in t.text.split()}

    names = _entity_names(rng, spec.entities_per_type * len(spec.entity_types), template_words)
    entities = [
        Entity(i, names[i], spec.entity_types[i // spec.entities_per_type]) for i in range(len(names))
    ]
    by_type = {t: [e.id for e in entities if e.type == t] for t in spec.entity_types}

    facts: list[Fact] = []
    for rel in relations:
        heads = rng.choice(by_type[rel.head_type], size=spec.facts_per_relation, replace=False)
        tails = rng.choice(by_type[rel.tail_type], size=spec.facts_per_relation, replace=True)
        for h, t in zip(heads.tolist(), tails.tolist()):
            facts.append(Fact(len(facts), h, rel.id, t))
    return World(spec, entities, relations, templates, facts)


def _fill(world: World, template: PromptTemplate, head: int, tail_text: str) -> str:
    return " ".join(
        world.entities[head].name if w == "[X]" else tail_text if w == "[Y]" else w
        for w in template.text.split()
    )


def build_query(world: World, fact: Fact, template: PromptTemplate) -> ClozeQuery:
    tail_name = world.entities[fact.tail].name
    if len(tail_name.split()) != 1 or tail_name not in world.vocab.index:
        raise QueryError(f"tail {tail_name!r} of fact {fact.id} is not a single token")
    if template.relation != fact.relation:
        raise QueryError(f"template {template.id} does not belong to relation {fact.relation}")
    ids = world.vocab.encode(_fill(world, template, fact.head, MASK))
    mask_pos = ids.index(world.vocab.mask_id)
    return ClozeQuery(tuple(ids), mask_pos, world.vocab.index[tail_name], fact.id, template.id)


def build_queries(world: World, facts: Iterable[Fact] | None = None) -> list[ClozeQuery]:
    """One query per (fact, template) pair, in fact order then template order."""
    facts = world.facts if facts is None else facts
    out = []
    for fact in facts:
        templates = world.templates_of(fact.relation)
        if not templates:
            raise QueryError(f"relation {fact.relation} has no templates")
        out.extend(build_query(world, fact, t) for t in templates)
    return out


def query_text(world: World, q: ClozeQuery) -> str:
    return world.vocab.decode(q.ids)


@dataclass
class PromptGroups:
    """Per-fact prompt groups: knowledge-expressing (T1), head-only (T2), random (T3)."""

    t1: list[ClozeQuery]
    t2: list[ClozeQuery]
    t3: list[ClozeQuery]


def build_prompt_groups(world: World, seed: int = 0, group_size: int = 8) -> dict[int, PromptGroups]:
    rng = np.random.default_rng(seed)
    vocab = world.vocab
    content = [i for i, tok in enumerate(vocab.tokens) if tok not in SPECIAL_TOKENS]
    groups: dict[int, PromptGroups] = {}
    for fact in world.facts:
        head_tok, tail_tok = world.entity_token(fact.head), world.entity_token(fact.tail)
        own = world.templates_of(fact.relation)
        picked = rng.choice(len(own), size=min(group_size, len(own)), replace=False)
        t1 = [build_query(world, fact, own[int(k)]) for k in picked]

        others = [r for r in world.relations if r.id != fact.relation] or world.relations
        t2 = []
        for _ in range(group_size):
            rel = others[int(rng.integers(len(others)))]
            tpl = world.templates_of(rel.id)[int(rng.integers(len(world.templates_of(rel.id))))]
            fillers = [e.id for e in world.entities_of_type(rel.tail_type) if e.id not in (fact.tail, fact.head)]
            filler = world.entities[fillers[int(rng.integers(len(fillers)))]].name
            ids = vocab.encode(_fill(world, tpl, fact.head, filler))
            filler_tok = vocab.index[filler]
            maskable = [p for p, i in enumerate(ids) if i not in (head_tok, filler_tok)]
            pos = maskable[int(rng.integers(len(maskable)))]
            answer = ids[pos]
            ids[pos] = vocab.mask_id
            t2.append(ClozeQuery(tuple(ids), pos, answer, fact.id, -1))

        pool = [i for i in content if i not in (head_tok, tail_tok)]
        t3 = []
        for j in range(group_size):
            length = len(t1[j % len(t1)].ids)
            ids = [pool[int(k)] for k in rng.integers(len(pool), size=length)]
            pos = int(rng.integers(length))
            answer = ids[pos]
            ids[pos] = vocab.mask_id
            t3.append(ClozeQuery(tuple(ids), pos, answer, fact.id, -2))
        groups[fact.id] = PromptGroups(t1, t2, t3)
    return groups


# --- file formats ------------------------------------------------------------


def save_world(world: World, path: str | Path) -> None:
    """Write the world as JSON lines.

    Record order: every entity, then relations, templates, facts.  Field order
    inside each record is fixed (see FORMATS.md).  The generating spec is
    carried on the first entity record under ``spec`` so that a loaded world
    round-trips exactly.
    """
    s = world.spec
    spec = {
        "n_relations": s.n_relations,
        "templates_per_relation": s.templates_per_relation,
        "entities_per_type": s.entities_per_type,
        "facts_per_relation": s.facts_per_relation,
        "entity_types": list(s.entity_types),
        "seed": s.seed,
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for k, e in enumerate(world.entities):
            rec = {"kind": "entity", "id": e.id, "name": e.name, "type": e.type}
            if k == 0:
                rec["spec"] = spec
            fh.write(json.dumps(rec) + "\n")
        for r in world.relations:
            fh.write(json.dumps({"kind": "relation", "id": r.id, "name": r.name,
                                 "head_type": r.head_type, "tail_type": r.tail_type}) + "\n")
        for t in world.templates:
            fh.write(json.dumps({"kind": "template", "id": t.id, "relation": t.relation, "text": t.text}) + "\n")
        for f in world.facts:
            fh.write(json.dumps({"kind": "fact", "id": f.id, "head": f.head,
                                 "relation": f.relation, "tail": f.tail}) + "\n")


def load_world(path: str | Path) -> World:
    entities, relations, templates, facts = [], [], [], []
    spec = WorldSpec()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            kind = rec.get("kind")
            if kind == "entity":
                if "spec" in rec:
                    d = rec["spec"]
                    spec = WorldSpec(**{**d, "entity_types": tuple(d["entity_types"])})
                entities.append(Entity(rec["id"], rec["name"], rec["type"]))
            elif kind == "relation":
                relations.append(Relation(rec["id"], rec["name"], rec["head_type"], rec["tail_type"]))
            elif kind == "template":
                templates.append(PromptTemplate(rec["id"], rec["relation"], rec["text"]))
            elif kind == "fact":
                facts.append(Fact(rec["id"], rec["head"], rec["relation"], rec["tail"]))
            else:
                raise ConfigError(f"{path}:{lineno}: unknown record kind {kind!r}")
    for seq in (entities, relations, templates, facts):
        if [x.id for x in seq] != list(range(len(seq))):
            raise ConfigError(f"{path}: ids must be dense and ordered")
    return World(spec, entities, relations, templates, facts)


def write_queries_tsv(world: World, queries: list[ClozeQuery], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["fact_id", "template_id", "text", "mask_index", "answer_token"])
        for q in queries:
            w.writerow([q.fact_id, q.template_id, query_text(world, q), q.mask_pos, world.vocab.tokens[q.answer]])
