import io
import math

import numpy as np
import pytest

from kneurons import checkpoint
from kneurons.errors import ConfigError, ContractError, DivergenceError
from kneurons.facts import ClozeQuery, WorldSpec, build_queries, generate_world
from kneurons.model import MaskedLM, ModelConfig
from kneurons.trainer import (
    TrainConfig,
    TrainReport,
    evaluate,
    known_facts,
    length_batches,
    perplexity,
    train,
)


@pytest.fixture(scope="module")
def world():
    return generate_world(WorldSpec(n_relations=2, templates_per_relation=4, entities_per_type=8,
                                    facts_per_relation=4, seed=5))


@pytest.fixture(scope="module")
def queries(world):
    return build_queries(world)


@pytest.fixture(scope="module")
def relation_of(world):
    return {f.id: f.relation for f in world.facts}


def small_model(world, seed=0):
    return MaskedLM(ModelConfig(n_layers=2, d_model=32, d_ffn=64, n_heads=2, vocab_size=len(world.vocab),
                                max_seq_len=32, seed=seed))


class TestConfig:
    @pytest.mark.parametrize("field,value", [("target_accuracy", 0.0), ("target_accuracy", 1.5),
                                             ("max_steps", -1), ("min_steps", -1), ("batch_size", 0), ("label_smoothing", 1.0)])
    def test_rejects(self, field, value):
        with pytest.raises(ConfigError):
            TrainConfig(**{field: value}).validate()


class TestEvaluate:
    def test_uniform_logits_perplexity_is_vocab(self, world, queries):
        model = small_model(world)
        for name, p in model.params.items():
            if name != "lm_head.bias":
                p.data[:] = 0.0
        assert perplexity(model, queries) == pytest.approx(len(world.vocab), rel=1e-2)

    def test_order_invariant(self, world, queries, relation_of):
        model = small_model(world)
        a = evaluate(model, queries, relation_of)
        perm = np.random.default_rng(0).permutation(len(queries))
        b = evaluate(model, [queries[i] for i in perm], relation_of)
        assert a.perplexity == b.perplexity
        assert a.accuracy == b.accuracy
        assert a.relation_perplexity == b.relation_perplexity
        np.testing.assert_array_equal(a.answer_probs[perm], b.answer_probs)

    def test_per_relation_breakdown(self, world, queries, relation_of):
        res = evaluate(small_model(world), queries, relation_of)
        assert sorted(res.relation_accuracy) == [0, 1]
        assert all(v > 0 for v in res.relation_perplexity.values())

    def test_length_batches_cover_once(self, queries):
        idx = [i for b in length_batches(queries, 5) for i in b]
        assert sorted(idx) == list(range(len(queries)))
        for b in length_batches(queries, 5):
            assert len({len(queries[i].ids) for i in b}) == 1
            assert len(b) <= 5


def test_known_facts_require_every_template():
    qs = [ClozeQuery((1,), 0, 2, f, t) for f in (0, 1) for t in range(3)]
    correct = np.array([True, True, True, True, False, True])
    assert known_facts(qs, correct) == [0]


class TestTrain:
    def test_zero_steps_reports_initial_evaluation(self, world, queries, relation_of):
        model = small_model(world)
        before = model.digest()
        rep = train(model, queries, TrainConfig(max_steps=0), relation_of=relation_of, progress=None)
        ev = evaluate(model, queries, relation_of)
        assert rep.final_step == 0
        assert rep.accuracy == ev.accuracy
        assert rep.final_loss == pytest.approx(ev.mean_loss)
        assert rep.known_facts == known_facts(queries, ev.correct)
        assert model.digest() == before

    def test_min_steps_outlasts_target(self, world, queries):
        cfg = dict(max_steps=200, warmup_steps=5, eval_interval=10, target_accuracy=1e-9)
        first = train(small_model(world), queries, TrainConfig(min_steps=0, **cfg), progress=None).final_step
        assert 0 < first < 200
        later = train(small_model(world), queries, TrainConfig(min_steps=first + 15, **cfg), progress=None)
        assert later.final_step == first + 15

    def test_divergence_aborts(self, world, queries):
        model = small_model(world)
        model.params["layers.0.ffn.key.weight"].data[0, 0] = np.nan
        with pytest.raises(DivergenceError):
            train(model, queries, TrainConfig(max_steps=5, warmup_steps=1), progress=None)

    def test_empty_queries(self, world):
        with pytest.raises(ContractError):
            train(small_model(world), [], TrainConfig(max_steps=1), progress=None)

    def test_deterministic_checkpoints(self, world, queries, tmp_path):
        cfg = TrainConfig(max_steps=30, warmup_steps=5, eval_interval=10, seed=4)
        for name in ("a", "b"):
            train(small_model(world), queries, cfg, checkpoint_path=tmp_path / name, progress=None)
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_learns_and_reports_progress(self, world, queries, relation_of):
        model = small_model(world)
        out = io.StringIO()
        rep = train(model, queries, TrainConfig(max_steps=400, warmup_steps=20, eval_interval=50,
                                                target_accuracy=1.0), relation_of=relation_of, progress=out)
        lines = [line.split("\t") for line in out.getvalue().splitlines()]
        assert lines[0][0] == "0"
        assert all(len(parts) == 3 for parts in lines)
        assert rep.accuracy > 0.8
        assert set(rep.known_facts) <= {f.id for f in world.facts}

    def test_frozen_embeddings_untouched(self, world, queries):
        model = small_model(world)
        table = model.params["embeddings.token"].data.copy()
        train(model, queries, TrainConfig(max_steps=5, warmup_steps=1), progress=None)
        np.testing.assert_array_equal(model.params["embeddings.token"].data, table)

    def test_report_round_trip(self, tmp_path):
        rep = TrainReport(12, 0.25, 0.9, {0: 1.0, 1: 0.8}, [3, 5])
        rep.write(tmp_path / "r.jsonl")
        assert TrainReport.read(tmp_path / "r.jsonl") == rep
