"""BERT-style masked-LM encoder with FFN neuron instrumentation.

Each block is post-layer-norm::

    h = LN(x + SelfAttn(x))
    y = LN(h + gelu(h W1 + b1) W2 + b2)

``W1`` columns are the FFN keys, ``W2`` rows the value slots.  The LM head is
tied to the token embedding table.  Activation overrides and the
integrated-gradients replacement hook act on the intermediate activations
``gelu(h W1 + b1)`` at the masked position only.
"""

from __future__ import annotations

import hashlib
import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, QueryError, ShapeError
from .facts import ClozeQuery
from .tensor import DTYPE, Tensor

LN_EPS = 1e-5
INIT_STD = 0.02
FFN_KEY_BIAS_INIT = -1.5  # sparse FFN activations, as in pretrained encoders


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d_model: int = 128
    d_ffn: int = 512
    n_heads: int = 4
    vocab_size: int = 64
    max_seq_len: int = 32
    seed: int = 0

    def validate(self) -> None:
        if min(self.n_layers, self.d_model, self.d_ffn, self.n_heads, self.vocab_size, self.max_seq_len) < 1:
            raise ConfigError(f"all sizes must be positive: {self}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.d_ffn < self.d_model:
            raise ConfigError(f"d_ffn={self.d_ffn} must be >= d_model={self.d_model}")


@dataclass(frozen=True, order=True)
class NeuronId:
    layer: int
    index: int

    def __str__(self) -> str:
        return f"L{self.layer}.{self.index}"


@dataclass(frozen=True)
class Scale:
    factor: float


@dataclass(frozen=True)
class Set:
    value: float


NeuronOverride = Mapping[NeuronId, "Scale | Set"]


@dataclass
class ClozeOutput:
    answer_prob: float
    probs: np.ndarray  # [vocab]
    activations: np.ndarray  # [n_layers, d_ffn], pre-override


@dataclass
class BatchOutput:
    probs: np.ndarray  # [batch, vocab]
    answer_probs: np.ndarray  # [batch]
    activations: np.ndarray  # [batch, n_layers, d_ffn]


def param_names(cfg: ModelConfig) -> list[str]:
    """Parameter names in checkpoint order."""
    names = ["embeddings.token", "embeddings.position", "embeddings.ln.gain", "embeddings.ln.bias"]
    for l in range(cfg.n_layers):
        p = f"layers.{l}."
        for proj in ("q", "k", "v", "out"):
            names += [p + f"attn.{proj}.weight", p + f"attn.{proj}.bias"]
        names += [p + "ln1.gain", p + "ln1.bias"]
        names += [p + "ffn.key.weight", p + "ffn.key.bias", p + "ffn.value.weight", p + "ffn.value.bias"]
        names += [p + "ln2.gain", p + "ln2.bias"]
    names.append("lm_head.bias")
    return names


def init_params(cfg: ModelConfig, token_std: float | None = None) -> dict[str, np.ndarray]:
    """Seeded initial weights.

    Token embeddings default to std ``1/sqrt(d_model)`` (unit-norm rows, the
    scale of a trained embedding table) and FFN keys use fan-in scaling so
    GELU starts in its nonlinear range.  FFN key biases start at
    ``FFN_KEY_BIAS_INIT`` so only a minority of neurons fire on a given token.
    Other matrices use std 0.02.
    """
    rng = np.random.default_rng(cfg.seed)
    d, f, v = cfg.d_model, cfg.d_ffn, cfg.vocab_size
    shapes = {
        "embeddings.token": (v, d),
        "embeddings.position": (cfg.max_seq_len, d),
        "lm_head.bias": (v,),
    }
    for l in range(cfg.n_layers):
        p = f"layers.{l}."
        for proj in ("q", "k", "v", "out"):
            shapes[p + f"attn.{proj}.weight"] = (d, d)
            shapes[p + f"attn.{proj}.bias"] = (d,)
        shapes[p + "ffn.key.weight"] = (d, f)
        shapes[p + "ffn.key.bias"] = (f,)
        shapes[p + "ffn.value.weight"] = (f, d)
        shapes[p + "ffn.value.bias"] = (d,)
    out = {}
    for name in param_names(cfg):
        if name.endswith(".gain"):
            out[name] = np.ones(d, dtype=DTYPE)
        elif name.endswith("ffn.key.bias"):
            out[name] = np.full(shapes[name], FFN_KEY_BIAS_INIT, dtype=DTYPE)
        elif name.endswith(".bias"):
            out[name] = np.zeros(shapes.get(name, (d,)), dtype=DTYPE)
        elif name == "embeddings.token":
            std = 1.0 / math.sqrt(d) if token_std is None else token_std
            out[name] = (rng.standard_normal(shapes[name]) * std).astype(DTYPE)
        elif name.endswith("ffn.key.weight"):
            out[name] = (rng.standard_normal(shapes[name]) / math.sqrt(d)).astype(DTYPE)
        else:
            out[name] = (rng.standard_normal(shapes[name]) * INIT_STD).astype(DTYPE)
    return out


class MaskedLM:
    """Transformer encoder weights plus the instrumented forward pass."""

    def __init__(self, config: ModelConfig, params: Mapping[str, np.ndarray] | None = None):
        config.validate()
        self.config = config
        raw = init_params(config) if params is None else params
        expected = param_names(config)
        if set(raw) != set(expected):
            raise ConfigError("parameter names do not match the configuration")
        self.params: dict[str, Tensor] = {
            name: Tensor(np.array(raw[name], dtype=DTYPE), requires_grad=True, name=name) for name in expected
        }

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def digest(self) -> str:
        """SHA-256 over all parameter bytes in checkpoint order."""
        h = hashlib.sha256()
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
        return h.hexdigest()

    @contextmanager
    def frozen(self):
        """Temporarily exclude parameters from the tape (gradients w.r.t. hooks only)."""
        saved = [(p, p.requires_grad) for p in self.params.values()]
        for p, _ in saved:
            p.requires_grad = False
        try:
            yield self
        finally:
            for p, flag in saved:
                p.requires_grad = flag

    def copy(self) -> "MaskedLM":
        return MaskedLM(self.config, {k: v.data.copy() for k, v in self.params.items()})

    # -- forward ------------------------------------------------------------

    def forward(
        self,
        ids: np.ndarray,
        valid: np.ndarray,
        rows: np.ndarray,
        overrides: Mapping[int, tuple[np.ndarray, np.ndarray, np.ndarray]] | None = None,
        replace: Mapping[int, Tensor] | None = None,
    ) -> tuple[Tensor, np.ndarray]:
        """Run the encoder and return LM logits at the flat positions ``rows``.

        ``ids``/``valid`` are ``[batch, seq]``; ``rows`` indexes the flattened
        ``batch*seq`` positions.  ``overrides[l] = (scale, setmask, setval)``
        rewrites layer-l intermediate activations at ``rows``;
        ``replace[l]`` substitutes them by a tensor so gradients flow to it.
        Returns ``(logits [len(rows), vocab], activations [len(rows), L, d_ffn])``
        where activations are recorded before any override.
        """
        cfg = self.config
        B, S = ids.shape
        if S > cfg.max_seq_len:
            raise ShapeError(f"sequence length {S} exceeds max_seq_len {cfg.max_seq_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
            raise QueryError("token id outside vocabulary")
        P = self.params
        H, dh, F = cfg.n_heads, cfg.d_model // cfg.n_heads, cfg.d_ffn
        rows = np.asarray(rows, dtype=np.int64)

        x = T.embedding(P["embeddings.token"], ids) + T.embedding(P["embeddings.position"], np.arange(S))
        x = T.layer_norm(x, P["embeddings.ln.gain"], P["embeddings.ln.bias"], LN_EPS)
        attn_bias = Tensor(np.where(valid, 0.0, -1e9).astype(DTYPE).reshape(B, 1, 1, S))
        inv_sqrt = 1.0 / math.sqrt(dh)
        acts = np.empty((len(rows), cfg.n_layers, F), dtype=DTYPE)

        for l in range(cfg.n_layers):
            p = f"layers.{l}."

            def heads(t):
                return T.transpose(T.reshape(t, (B, S, H, dh)), (0, 2, 1, 3))

            q = heads(x @ P[p + "attn.q.weight"] + P[p + "attn.q.bias"])
            k = heads(x @ P[p + "attn.k.weight"] + P[p + "attn.k.bias"])
            v = heads(x @ P[p + "attn.v.weight"] + P[p + "attn.v.bias"])
            scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * inv_sqrt + attn_bias
            ctx = T.matmul(T.softmax(scores, axis=-1), v)
            ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (B, S, cfg.d_model))
            attn = ctx @ P[p + "attn.out.weight"] + P[p + "attn.out.bias"]
            h = T.layer_norm(x + attn, P[p + "ln1.gain"], P[p + "ln1.bias"], LN_EPS)

            a = T.gelu(h @ P[p + "ffn.key.weight"] + P[p + "ffn.key.bias"])
            a = T.reshape(a, (B * S, F))
            acts[:, l, :] = a.data[rows]
            if overrides and l in overrides:
                a = T.override_rows(a, rows, *overrides[l])
            if replace and l in replace:
                a = T.replace_rows(a, rows, replace[l])
            a = T.reshape(a, (B, S, F))
            ffn = a @ P[p + "ffn.value.weight"] + P[p + "ffn.value.bias"]
            x = T.layer_norm(h + ffn, P[p + "ln2.gain"], P[p + "ln2.bias"], LN_EPS)

        hidden = T.take_rows(T.reshape(x, (B * S, cfg.d_model)), rows)
        logits = hidden @ T.transpose(P["embeddings.token"], (1, 0)) + P["lm_head.bias"]
        return logits, acts


# --- batching ------------------------------------------------------------------


def encode_batch(queries: Sequence[ClozeQuery], pad_id: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pad queries into ``(ids, valid, rows)`` with one masked row per query."""
    if not queries:
        raise ContractError("empty batch")
    S = max(len(q.ids) for q in queries)
    ids = np.full((len(queries), S), pad_id, dtype=np.int64)
    valid = np.zeros((len(queries), S), dtype=bool)
    rows = np.empty(len(queries), dtype=np.int64)
    for b, q in enumerate(queries):
        if not 0 <= q.mask_pos < len(q.ids):
            raise QueryError(f"mask position {q.mask_pos} outside query of length {len(q.ids)}")
        ids[b, : len(q.ids)] = q.ids
        valid[b, : len(q.ids)] = True
        rows[b] = b * S + q.mask_pos
    return ids, valid, rows


def _check_neuron(cfg: ModelConfig, n: NeuronId) -> None:
    if not (0 <= n.layer < cfg.n_layers and 0 <= n.index < cfg.d_ffn):
        raise IndexError(f"neuron {n} outside {cfg.n_layers} layers x {cfg.d_ffn} neurons")


def build_overrides(
    cfg: ModelConfig, per_row: Sequence[NeuronOverride | None]
) -> dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Turn per-row override maps into dense ``(scale, setmask, setval)`` arrays per layer."""
    R = len(per_row)
    layers: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}
    for r, ov in enumerate(per_row):
        for n, mode in (ov or {}).items():
            _check_neuron(cfg, n)
            if n.layer not in layers:
                layers[n.layer] = (
                    np.ones((R, cfg.d_ffn), dtype=DTYPE),
                    np.zeros((R, cfg.d_ffn), dtype=bool),
                    np.zeros((R, cfg.d_ffn), dtype=DTYPE),
                )
            scale, setmask, setval = layers[n.layer]
            if isinstance(mode, Scale):
                scale[r, n.index] = mode.factor
            elif isinstance(mode, Set):
                setmask[r, n.index] = True
                setval[r, n.index] = mode.value
            else:
                raise TypeError(f"unknown override mode {mode!r}")
    return layers


def _check_single_mask(q: ClozeQuery, mask_id: int | None) -> None:
    if mask_id is None:
        return
    n = sum(1 for t in q.ids if t == mask_id)
    if n != 1:
        raise QueryError(f"query must contain exactly one mask token, found {n}")
    if q.ids[q.mask_pos] != mask_id:
        raise QueryError("mask position does not hold the mask token")


def forward_batch(
    model: MaskedLM,
    queries: Sequence[ClozeQuery],
    overrides: NeuronOverride | Sequence[NeuronOverride | None] | None = None,
    *,
    mask_id: int | None = None,
    pad_id: int = 0,
) -> BatchOutput:
    """Gradient-free cloze forward for a batch of queries.

    ``overrides`` is either one map applied to every query or one map per
    query.  Pass ``mask_id`` to enforce the single-mask contract.
    """
    for q in queries:
        _check_single_mask(q, mask_id)
    ids, valid, rows = encode_batch(queries, pad_id)
    if overrides is None or isinstance(overrides, Mapping):
        per_row = [overrides] * len(queries)
    else:
        per_row = list(overrides)
        if len(per_row) != len(queries):
            raise ShapeError(f"{len(per_row)} override maps for {len(queries)} queries")
    layer_ov = build_overrides(model.config, per_row)
    logits, acts = model.forward(ids, valid, rows, overrides=layer_ov or None)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=-1, keepdims=True)
    answers = np.array([q.answer for q in queries], dtype=np.int64)
    return BatchOutput(probs, probs[np.arange(len(queries)), answers], acts)


def forward_cloze(
    model: MaskedLM, query: ClozeQuery, overrides: NeuronOverride | None = None, *, mask_id: int | None = None
) -> ClozeOutput:
    out = forward_batch(model, [query], overrides, mask_id=mask_id)
    return ClozeOutput(float(out.answer_probs[0]), out.probs[0], out.activations[0])


def forward_lm_loss(
    model: MaskedLM, queries: Sequence[ClozeQuery], pad_id: int = 0, smoothing: float = 0.0
) -> Tensor:
    """Mean cross-entropy of the answers at the masked positions (differentiable)."""
    if not queries:
        raise ContractError("forward_lm_loss needs a non-empty batch")
    ids, valid, rows = encode_batch(queries, pad_id)
    logits, _ = model.forward(ids, valid, rows)
    return T.cross_entropy(logits, [q.answer for q in queries], smoothing)


# --- value slots -------------------------------------------------------------


def value_slot_name(layer: int) -> str:
    return f"layers.{layer}.ffn.value.weight"


def read_value_slot(model: MaskedLM, n: NeuronId) -> np.ndarray:
    _check_neuron(model.config, n)
    return model.params[value_slot_name(n.layer)].data[n.index].copy()


def write_value_slot(model: MaskedLM, n: NeuronId, v) -> None:
    _check_neuron(model.config, n)
    v = np.asarray(v, dtype=DTYPE)
    if v.shape != (model.config.d_model,):
        raise ShapeError(f"value slot needs shape ({model.config.d_model},), got {v.shape}")
    model.params[value_slot_name(n.layer)].data[n.index] = v
