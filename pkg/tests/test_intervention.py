import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import binomtest

from kneurons.attribution import KnowledgeNeuronSet
from kneurons.errors import ContractError
from kneurons.facts import ClozeQuery, PromptGroups, WorldSpec, build_queries, generate_world
from kneurons.intervention import (
    ActivationReport,
    FactEffect,
    InterventionReport,
    activation_study,
    intervention_study,
    mode_override,
    random_control,
    rank_prompts_by_activation,
    suppress_or_amplify,
    write_activation_tsv,
    write_fact_details,
    write_intervention_tsv,
    write_plot_data,
)
from kneurons.model import MaskedLM, ModelConfig, NeuronId, Scale, forward_batch, forward_cloze, value_slot_name

MASK = 1


def randomized(cfg, seed=0, scale=0.3):
    model = MaskedLM(cfg)
    rng = np.random.default_rng(seed)
    for p in model.parameters():
        p.data += (rng.standard_normal(p.shape) * scale).astype(np.float32)
    return model


@pytest.fixture(scope="module")
def model():
    return randomized(ModelConfig(n_layers=2, d_model=16, d_ffn=32, n_heads=2, vocab_size=12, max_seq_len=8, seed=3))


@pytest.fixture(scope="module")
def world():
    return generate_world(WorldSpec(n_relations=2, templates_per_relation=4, entities_per_type=8,
                                    facts_per_relation=4, seed=5))


@pytest.fixture(scope="module")
def world_model(world):
    return randomized(ModelConfig(n_layers=2, d_model=32, d_ffn=64, n_heads=2, vocab_size=len(world.vocab),
                                  max_seq_len=32, seed=1), scale=0.1)


def kset(fact_id, neurons):
    n = len(neurons)
    return KnowledgeNeuronSet(fact_id, tuple(neurons), (1.0,) * n, (1.0,) * n, 0.7)


PROMPTS = [ClozeQuery((4, 7, MASK, 5), 2, 9, 0, 0), ClozeQuery((MASK, 3, 6), 0, 2, 0, 1)]


class TestSuppressOrAmplify:
    def test_empty_set_rejected(self, model):
        with pytest.raises(ContractError):
            suppress_or_amplify(model, PROMPTS, [], "suppress")

    def test_empty_override_is_noop(self, model):
        before = forward_batch(model, PROMPTS).answer_probs
        after = forward_batch(model, PROMPTS, mode_override((), "suppress")).answer_probs
        assert after.tobytes() == before.tobytes()

    def test_before_matches_plain_forward(self, model):
        before, _ = suppress_or_amplify(model, PROMPTS, [NeuronId(0, 1)], "amplify")
        for q, b in zip(PROMPTS, before):
            assert b == pytest.approx(forward_cloze(model, q).answer_prob, abs=1e-7)

    def test_suppress_everything_matches_zeroed_values(self, model):
        q = ClozeQuery((MASK,), 0, 3, 0, 0)
        every = [NeuronId(l, i) for l in range(2) for i in range(32)]
        _, after = suppress_or_amplify(model, [q], every, "suppress")
        zeroed = model.copy()
        for l in range(2):
            zeroed.params[value_slot_name(l)].data[:] = 0.0
        assert after[0] == pytest.approx(forward_cloze(zeroed, q).answer_prob, abs=1e-6)

    def test_amplify_is_scale_two(self, model):
        neurons = [NeuronId(0, 3), NeuronId(1, 5)]
        _, after = suppress_or_amplify(model, PROMPTS, neurons, "amplify")
        ref = forward_batch(model, PROMPTS, {n: Scale(2.0) for n in neurons}).answer_probs
        np.testing.assert_allclose(after, ref, atol=1e-7)

    def test_weights_untouched(self, model):
        digest = model.digest()
        suppress_or_amplify(model, PROMPTS, [NeuronId(0, 1), NeuronId(1, 2)], "suppress")
        assert model.digest() == digest

    def test_unknown_mode(self, model):
        with pytest.raises(ValueError):
            suppress_or_amplify(model, PROMPTS, [NeuronId(0, 1)], "halve")


class TestRandomControl:
    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 15)), min_size=0, max_size=12, unique=True),
           st.integers(0, 2**32 - 1))
    def test_layer_counts_match_and_disjoint(self, pairs, seed):
        neurons = [NeuronId(l, i) for l, i in pairs]
        draw = random_control(neurons, 16, np.random.default_rng(seed))
        assert sorted(n.layer for n in draw) == sorted(n.layer for n in neurons)
        assert not set(draw) & set(neurons)
        assert len(set(draw)) == len(draw)

    def test_seeded(self):
        neurons = [NeuronId(0, 1), NeuronId(2, 7)]
        a = random_control(neurons, 64, np.random.default_rng(9))
        b = random_control(neurons, 64, np.random.default_rng(9))
        assert a == b

    def test_empty(self):
        assert random_control((), 64, np.random.default_rng(0)) == ()


def effect(fact, method, mode, before, after, relation=0):
    return FactEffect(fact, relation, method, mode, 3, np.array(before, float), np.array(after, float))


class TestReport:
    def test_rel_change_uses_prompt_means(self):
        e = effect(0, "ig", "suppress", [0.2, 0.6], [0.1, 0.1])
        assert e.rel_change == pytest.approx((0.1 - 0.4) / 0.4)

    def test_sign_test(self):
        effects = []
        for f in range(12):
            effects.append(effect(f, "ig", "suppress", [0.5], [0.1]))
            effects.append(effect(f, "random", "suppress", [0.5], [0.5 if f < 10 else 0.05]))
        st_ = InterventionReport(effects).sign_test()
        assert (st_.n_lower, st_.n_higher) == (10, 2)
        assert st_.p_value == pytest.approx(binomtest(10, 12, 0.5).pvalue)

    def test_sign_test_ignores_ties(self):
        effects = [effect(0, "ig", "suppress", [0.5], [0.2]), effect(0, "random", "suppress", [0.5], [0.2])]
        assert InterventionReport(effects).sign_test().p_value == 1.0

    def test_opposite_direction_fraction(self):
        effects = [effect(0, "ig", "suppress", [0.5], [0.2]), effect(0, "ig", "amplify", [0.5], [0.7]),
                   effect(1, "ig", "suppress", [0.5], [0.2]), effect(1, "ig", "amplify", [0.5], [0.3])]
        assert InterventionReport(effects).opposite_direction_fraction() == 0.5

    def test_rows_per_relation_and_all(self):
        effects = [effect(0, "ig", "suppress", [0.5], [0.25], relation=0),
                   effect(1, "ig", "suppress", [0.5], [0.5], relation=1)]
        rows = InterventionReport(effects).rows()
        assert rows == [(0, "suppress", "ig", -0.5, 1), (1, "suppress", "ig", 0.0, 1),
                        ("all", "suppress", "ig", -0.25, 2)]


@pytest.fixture(scope="module")
def setup(world):
    queries = build_queries(world)
    relation_of = {f.id: f.relation for f in world.facts}
    facts = sorted(relation_of)
    sets = {"ig": {f: kset(f, [NeuronId(1, f), NeuronId(0, 2 * f)]) for f in facts},
            "baseline": {f: kset(f, [NeuronId(1, 40 + f)]) for f in facts}}
    return queries, relation_of, facts, sets


class TestStudy:
    def test_study_shape_and_non_destructive(self, world_model, setup):
        queries, relation_of, facts, sets = setup
        digest = world_model.digest()
        rep = intervention_study(world_model, queries, sets, relation_of, facts, min_before=0.0)
        assert world_model.digest() == digest
        assert len(rep.select("ig", "suppress")) == len(facts)
        rand = {e.fact_id: e for e in rep.select("random", "amplify")}
        assert all(rand[f].n_neurons == 2 for f in facts)

    def test_matches_direct_intervention(self, world_model, setup):
        queries, relation_of, facts, sets = setup
        rep = intervention_study(world_model, queries, sets, relation_of, facts[:1], random_like=None,
                                 min_before=0.0)
        prompts = [q for q in queries if q.fact_id == facts[0]]
        before, after = suppress_or_amplify(world_model, prompts, sets["ig"][facts[0]].neurons, "suppress")
        e = rep.select("ig", "suppress")[0]
        np.testing.assert_allclose(e.before, before, atol=1e-7)
        np.testing.assert_allclose(e.after, after, atol=1e-7)

    def test_probability_floor_excludes(self, world_model, setup):
        queries, relation_of, facts, sets = setup
        rep = intervention_study(world_model, queries, sets, relation_of, facts, min_before=1.0)
        assert rep.effects == [] and rep.excluded == facts

    def test_deterministic(self, world_model, setup):
        queries, relation_of, facts, sets = setup
        a = intervention_study(world_model, queries, sets, relation_of, facts, min_before=0.0, seed=3)
        b = intervention_study(world_model, queries, sets, relation_of, facts, min_before=0.0, seed=3)
        assert a.rows() == b.rows()

    def test_writers(self, world_model, setup, tmp_path):
        queries, relation_of, facts, sets = setup
        rep = intervention_study(world_model, queries, sets, relation_of, facts, min_before=0.0)
        write_intervention_tsv(tmp_path / "s.tsv", rep)
        write_fact_details(tmp_path / "d.tsv", rep)
        write_plot_data(tmp_path / "p.tsv", rep)
        summary = (tmp_path / "s.tsv").read_text().splitlines()
        assert summary[0] == "relation\tmode\tmethod\tmean_rel_change\tn_facts"
        assert len(summary) == 1 + len(rep.rows())
        details = (tmp_path / "d.tsv").read_text().splitlines()
        assert len(details) == 1 + len(rep.effects)
        plot = (tmp_path / "p.tsv").read_text().splitlines()
        assert plot[0] == "series\tx\ty"
        assert all(line.split("\t")[1] != "all" for line in plot[1:])


class TestActivation:
    def test_single_prompt_groups_equal_raw_activations(self, model):
        t1, t2, t3 = (ClozeQuery((4, 7, MASK, 5), 2, 9, 0, 0), ClozeQuery((4, 3, MASK), 2, 9, 0, 1),
                      ClozeQuery((8, MASK, 2), 1, 9, 0, 2))
        neurons = [NeuronId(0, 4), NeuronId(1, 9)]
        rep = activation_study(model, {"ig": {0: kset(0, neurons)}}, {0: PromptGroups([t1], [t2], [t3])})
        for got, q in zip(rep.per_fact["ig"][0], (t1, t2, t3)):
            acts = forward_cloze(model, q).activations
            assert got == pytest.approx(np.mean([acts[n.layer, n.index] for n in neurons]), abs=1e-6)
        assert rep.population_t3 == pytest.approx(float(forward_cloze(model, t3).activations.mean()), abs=1e-6)

    def test_means_and_separation(self):
        rep = ActivationReport({"ig": {0: (1.0, 0.2, 0.0), 1: (3.0, 0.6, 0.2)}}, 0.0)
        assert rep.means("ig") == pytest.approx((2.0, 0.4, 0.1))
        assert rep.separation("ig") == pytest.approx(0.8)

    def test_activation_tsv(self, tmp_path):
        rep = ActivationReport({"ig": {0: (1.0, 0.2, 0.0)}, "baseline": {0: (2.0, 1.9, 1.8)}}, 0.0)
        write_activation_tsv(tmp_path / "a.tsv", rep)
        lines = (tmp_path / "a.tsv").read_text().splitlines()
        assert lines[0] == "method\tfact_id\tt1\tt2\tt3"
        assert [line.split("\t")[:2] for line in lines[1:]] == [["ig", "0"], ["ig", "all"],
                                                                 ["baseline", "0"], ["baseline", "all"]]


class TestRankPrompts:
    NEURONS = [NeuronId(0, 4), NeuronId(1, 9)]
    POOL = [ClozeQuery((4, 7, MASK, 5), 2, 9, 0, 0), ClozeQuery((MASK, 3, 6), 0, 2, 0, 1),
            ClozeQuery((8, MASK, 2), 1, 9, 0, 2), ClozeQuery((5, 5, 5, MASK), 3, 9, 0, 3)]

    def test_pool_of_one(self, model):
        ranked = rank_prompts_by_activation(model, self.NEURONS, self.POOL[:1])
        assert [q for q, _ in ranked] == self.POOL[:1]

    def test_descending(self, model):
        scores = [s for _, s in rank_prompts_by_activation(model, self.NEURONS, self.POOL)]
        assert scores == sorted(scores, reverse=True)

    def test_reversed_pool_same_scores(self, model):
        a = dict((q, s) for q, s in rank_prompts_by_activation(model, self.NEURONS, self.POOL))
        b = dict((q, s) for q, s in rank_prompts_by_activation(model, self.NEURONS, self.POOL[::-1]))
        assert a == b

    def test_ties_keep_pool_order(self, model):
        twin = ClozeQuery(self.POOL[0].ids, 2, 9, 1, 0)  # same tokens, different fact: identical score
        ranked = rank_prompts_by_activation(model, self.NEURONS, [self.POOL[0], twin])
        assert [q for q, _ in ranked] == [self.POOL[0], twin]
        ranked = rank_prompts_by_activation(model, self.NEURONS, [twin, self.POOL[0]])
        assert [q for q, _ in ranked] == [twin, self.POOL[0]]

    def test_empty_pool(self, model):
        with pytest.raises(ContractError):
            rank_prompts_by_activation(model, self.NEURONS, [])
