import math

import numpy as np
import pytest

from kneurons import checkpoint
from kneurons import tensor as T
from kneurons.errors import ConfigError, QueryError, ShapeError
from kneurons.facts import ClozeQuery
from kneurons.model import (
    MaskedLM,
    ModelConfig,
    NeuronId,
    Scale,
    Set,
    encode_batch,
    forward_batch,
    forward_cloze,
    forward_lm_loss,
    init_params,
    read_value_slot,
    value_slot_name,
    write_value_slot,
)

from conftest import central_difference, relative_error

MASK = 1


@pytest.fixture
def model():
    return MaskedLM(ModelConfig(n_layers=2, d_model=16, d_ffn=32, n_heads=2, vocab_size=20, max_seq_len=8, seed=3))


@pytest.fixture
def query():
    return ClozeQuery((4, 7, 9, MASK, 5), 3, 12, 0, 0)


def randomize(model, seed=0, scale=0.3):
    """Push weights away from init so activations and gradients are non-trivial."""
    rng = np.random.default_rng(seed)
    for p in model.parameters():
        p.data += (rng.standard_normal(p.shape) * scale).astype(np.float32)
    return model


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(d_model=10, n_heads=3).validate()
    with pytest.raises(ConfigError):
        ModelConfig(d_model=64, d_ffn=32).validate()


def test_distribution_sums_to_one(model, query):
    out = forward_cloze(model, query)
    assert abs(out.probs.sum() - 1) <= 1e-5
    assert out.answer_prob == out.probs[query.answer]


class TestOverrides:
    def test_empty_override_bitwise(self, model, query):
        ref = forward_cloze(model, query)
        out = forward_cloze(model, query, {})
        assert out.probs.tobytes() == ref.probs.tobytes()

    def test_unit_scale_bitwise(self, model, query):
        ref = forward_cloze(model, query)
        ov = {NeuronId(l, i): Scale(1.0) for l in range(2) for i in range(0, 32, 3)}
        assert forward_cloze(model, query, ov).probs.tobytes() == ref.probs.tobytes()

    def test_zero_all_single_token_matches_w2_zeroed(self, model):
        randomize(model)
        q = ClozeQuery((MASK,), 0, 3, 0, 0)
        ov = {NeuronId(l, i): Set(0.0) for l in range(2) for i in range(32)}
        suppressed = forward_cloze(model, q, ov)
        zeroed = model.copy()
        for l in range(2):
            zeroed.params[value_slot_name(l)].data[:] = 0.0
        np.testing.assert_allclose(forward_cloze(zeroed, q).probs, suppressed.probs, atol=1e-6)

    def test_records_pre_override_activations(self, model, query):
        randomize(model)
        ref = forward_cloze(model, query)
        ov = {NeuronId(1, 5): Set(3.0), NeuronId(0, 2): Scale(2.0)}
        out = forward_cloze(model, query, ov)
        assert out.activations[0].tobytes() == ref.activations[0].tobytes()
        assert out.probs.tobytes() != ref.probs.tobytes()

    def test_activation_matches_recomputation(self, model, query):
        randomize(model)
        out = forward_cloze(model, query)
        # recompute layer-0 FFN input from an independent tape-free pass up to ln1
        P = {k: v.data for k, v in model.params.items()}
        ids = np.array(query.ids)
        x = P["embeddings.token"][ids] + P["embeddings.position"][: len(ids)]

        def ln(v, g, b):
            mu = v.mean(-1, keepdims=True)
            var = ((v - mu) ** 2).mean(-1, keepdims=True)
            return (v - mu) / np.sqrt(var + 1e-5) * g + b

        x = ln(x, P["embeddings.ln.gain"], P["embeddings.ln.bias"])
        p = "layers.0."
        H, dh = 2, 8
        q = (x @ P[p + "attn.q.weight"] + P[p + "attn.q.bias"]).reshape(-1, H, dh).transpose(1, 0, 2)
        k = (x @ P[p + "attn.k.weight"] + P[p + "attn.k.bias"]).reshape(-1, H, dh).transpose(1, 0, 2)
        v = (x @ P[p + "attn.v.weight"] + P[p + "attn.v.bias"]).reshape(-1, H, dh).transpose(1, 0, 2)
        s = q @ k.transpose(0, 2, 1) / math.sqrt(dh)
        a = np.exp(s - s.max(-1, keepdims=True))
        a /= a.sum(-1, keepdims=True)
        ctx = (a @ v).transpose(1, 0, 2).reshape(len(ids), -1)
        h = ln(x + ctx @ P[p + "attn.out.weight"] + P[p + "attn.out.bias"], P[p + "ln1.gain"], P[p + "ln1.bias"])
        pre = h[query.mask_pos] @ P[p + "ffn.key.weight"] + P[p + "ffn.key.bias"]
        from scipy.special import ndtr

        np.testing.assert_allclose(out.activations[0], pre * ndtr(pre), atol=1e-5)

    def test_invalid_neuron(self, model, query):
        with pytest.raises(IndexError):
            forward_cloze(model, query, {NeuronId(2, 0): Set(0.0)})
        with pytest.raises(IndexError):
            forward_cloze(model, query, {NeuronId(0, 32): Set(0.0)})

    def test_mask_contract(self, model):
        with pytest.raises(QueryError):
            forward_cloze(model, ClozeQuery((4, 5, 6), 1, 3, 0, 0), mask_id=MASK)
        with pytest.raises(QueryError):
            forward_cloze(model, ClozeQuery((MASK, 5, MASK), 0, 3, 0, 0), mask_id=MASK)

    def test_per_row_overrides_match_single(self, model, query):
        randomize(model)
        ov = {NeuronId(0, 1): Set(0.0)}
        batch = forward_batch(model, [query, query], [None, ov])
        assert np.allclose(batch.answer_probs[0], forward_cloze(model, query).answer_prob, atol=1e-7)
        assert np.allclose(batch.answer_probs[1], forward_cloze(model, query, ov).answer_prob, atol=1e-7)


class TestLoss:
    def test_untrained_near_uniform(self):
        # a small embedding table keeps the tied head from echoing the input tokens at init
        cfg = ModelConfig(n_layers=2, d_model=32, d_ffn=64, n_heads=2, vocab_size=64, seed=0)
        model = MaskedLM(cfg, init_params(cfg, token_std=0.02))
        qs = [ClozeQuery((5, 6, MASK), 2, t, 0, 0) for t in range(10, 20)]
        assert abs(forward_lm_loss(model, qs).item() - math.log(64)) < 0.5

    def test_single_query_matches_cross_entropy(self, model, query):
        loss = forward_lm_loss(model, [query]).item()
        ids, valid, rows = encode_batch([query])
        logits, _ = model.forward(ids, valid, rows)
        assert loss == pytest.approx(T.cross_entropy(T.Tensor(logits.data[0]), query.answer).item(), abs=1e-6)

    def test_empty_batch(self, model):
        from kneurons.errors import ContractError

        with pytest.raises(ContractError):
            forward_lm_loss(model, [])

    def test_end_to_end_gradients(self):
        """Every parameter of a 2-layer model against central differences."""
        model = randomize(MaskedLM(ModelConfig(n_layers=2, d_model=8, d_ffn=8, n_heads=2, vocab_size=11,
                                               max_seq_len=6, seed=1)), scale=0.3)
        qs = [ClozeQuery((3, 4, MASK, 5), 2, 7, 0, 0), ClozeQuery((MASK, 9, 2), 0, 4, 0, 0)]
        model.zero_grad()
        with T.Tape() as tape:
            loss = forward_lm_loss(model, qs)
        tape.backward(loss)
        worst = 0.0
        for name, p in model.params.items():
            if name.endswith("attn.k.bias"):
                continue  # softmax is shift-invariant, so this gradient is exactly zero
            (num,) = central_difference(lambda: forward_lm_loss(model, qs).item(), [p.data], h=1e-3)
            worst = max(worst, relative_error(p.grad, num))
        assert worst < 1e-2


class TestValueSlots:
    def test_round_trip(self, model):
        v = np.arange(16, dtype=np.float32)
        write_value_slot(model, NeuronId(1, 4), v)
        np.testing.assert_array_equal(read_value_slot(model, NeuronId(1, 4)), v)

    def test_zero(self, model):
        write_value_slot(model, NeuronId(0, 0), np.zeros(16))
        assert not read_value_slot(model, NeuronId(0, 0)).any()

    def test_row_isolation(self, model):
        before = read_value_slot(model, NeuronId(0, 3))
        write_value_slot(model, NeuronId(0, 4), np.ones(16))
        np.testing.assert_array_equal(read_value_slot(model, NeuronId(0, 3)), before)

    def test_read_is_copy(self, model):
        v = read_value_slot(model, NeuronId(0, 1))
        v[:] = 99
        assert not np.any(read_value_slot(model, NeuronId(0, 1)) == 99)

    def test_length_mismatch(self, model):
        with pytest.raises(ShapeError):
            write_value_slot(model, NeuronId(0, 0), np.zeros(15))

    def test_other_params_untouched(self, model):
        before = {k: v.data.copy() for k, v in model.params.items()}
        write_value_slot(model, NeuronId(1, 2), np.ones(16))
        for k, v in model.params.items():
            if k != value_slot_name(1):
                assert v.data.tobytes() == before[k].tobytes()

    def test_inactive_slot_invisible(self, model, query):
        randomize(model)
        ids, valid, rows = encode_batch([query])
        # make neuron (1, 6) exactly zero at every position via its key bias
        model.params["layers.1.ffn.key.weight"].data[:, 6] = 0.0
        model.params["layers.1.ffn.key.bias"].data[6] = 0.0
        ref = forward_cloze(model, query)
        assert ref.activations[1, 6] == 0.0
        write_value_slot(model, NeuronId(1, 6), np.full(16, 5.0))
        assert abs(forward_cloze(model, query).answer_prob - ref.answer_prob) <= 1e-6

    def test_write_back_restores_bitwise(self, model, query):
        randomize(model)
        ref = forward_cloze(model, query)
        n = NeuronId(0, 7)
        orig = read_value_slot(model, n)
        write_value_slot(model, n, np.zeros(16))
        write_value_slot(model, n, orig)
        assert forward_cloze(model, query).probs.tobytes() == ref.probs.tobytes()


class TestCheckpoint:
    def test_round_trip_bit_exact(self, model, tmp_path):
        randomize(model)
        path = tmp_path / "m.ckpt"
        checkpoint.save(model, path)
        loaded = checkpoint.load(path)
        assert loaded.config == model.config
        for k in model.params:
            assert loaded.params[k].data.tobytes() == model.params[k].data.tobytes()
        assert checkpoint.to_bytes(loaded) == path.read_bytes()

    def test_header(self, model):
        buf = checkpoint.to_bytes(model)
        assert buf[:7] == b"KNEUR01"
        assert np.frombuffer(buf[7:35], "<u4").tolist() == [2, 16, 32, 2, 20, 8, 3]

    def test_same_seed_same_bytes(self):
        cfg = ModelConfig(n_layers=1, d_model=8, d_ffn=8, n_heads=2, vocab_size=10, seed=9)
        assert checkpoint.to_bytes(MaskedLM(cfg)) == checkpoint.to_bytes(MaskedLM(cfg))

    def test_bad_magic(self):
        with pytest.raises(ConfigError):
            checkpoint.from_bytes(b"NOTKNEUR")
