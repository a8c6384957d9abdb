"""Masked-LM training loop and evaluation metrics."""

from __future__ import annotations

import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence, TextIO

import numpy as np

from . import checkpoint
from . import tensor as T
from .errors import ConfigError, ContractError, DivergenceError
from .facts import ClozeQuery
from .model import MaskedLM, forward_batch, forward_lm_loss


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    max_steps: int = 20000
    min_steps: int = 3000  # keep training past the target so the model settles
    warmup_steps: int = 500
    target_accuracy: float = 0.95
    eval_interval: int = 250
    freeze_embeddings: bool = True
    label_smoothing: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if not 0 < self.target_accuracy <= 1:
            raise ConfigError(f"target_accuracy must lie in (0, 1], got {self.target_accuracy}")
        if self.max_steps < 0 or self.min_steps < 0:
            raise ConfigError("max_steps and min_steps must be non-negative")
        if self.batch_size < 1 or self.eval_interval < 1:
            raise ConfigError("batch_size and eval_interval must be positive")
        if not 0 <= self.label_smoothing < 1:
            raise ConfigError(f"label_smoothing must lie in [0, 1), got {self.label_smoothing}")


@dataclass
class EvalResult:
    accuracy: float
    perplexity: float
    relation_accuracy: dict[int, float]
    relation_perplexity: dict[int, float]
    answer_probs: np.ndarray  # aligned with the input query order
    correct: np.ndarray  # bool, aligned with the input query order
    mean_loss: float


@dataclass
class TrainReport:
    final_step: int
    final_loss: float
    accuracy: float
    relation_accuracy: dict[int, float]
    known_facts: list[int] = field(default_factory=list)

    def write(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps({"kind": "summary", "final_step": self.final_step,
                                 "final_loss": self.final_loss, "accuracy": self.accuracy,
                                 "n_known_facts": len(self.known_facts)}) + "\n")
            for rel, acc in sorted(self.relation_accuracy.items()):
                fh.write(json.dumps({"kind": "relation", "relation": rel, "accuracy": acc}) + "\n")
            fh.write(json.dumps({"kind": "known_facts", "fact_ids": self.known_facts}) + "\n")

    @classmethod
    def read(cls, path: str | Path) -> "TrainReport":
        rel_acc, known, summary = {}, [], {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                rec = json.loads(line)
                if rec["kind"] == "summary":
                    summary = rec
                elif rec["kind"] == "relation":
                    rel_acc[rec["relation"]] = rec["accuracy"]
                elif rec["kind"] == "known_facts":
                    known = rec["fact_ids"]
        return cls(summary["final_step"], summary["final_loss"], summary["accuracy"], rel_acc, known)


def length_batches(queries: Sequence[ClozeQuery], size: int) -> Iterator[list[int]]:
    """Indices grouped into equal-length batches in a canonical order.

    Equal lengths mean no padding, and the canonical order makes every metric
    independent of how the caller ordered ``queries``.
    """
    order = sorted(range(len(queries)), key=lambda i: (len(queries[i].ids), queries[i].ids, queries[i].mask_pos,
                                                       queries[i].answer, i))
    batch: list[int] = []
    for i in order:
        if batch and (len(batch) == size or len(queries[batch[0]].ids) != len(queries[i].ids)):
            yield batch
            batch = []
        batch.append(i)
    if batch:
        yield batch


def evaluate(
    model: MaskedLM,
    queries: Sequence[ClozeQuery],
    relation_of: Mapping[int, int] | None = None,
    batch_size: int = 256,
) -> EvalResult:
    """Top-1 accuracy, answer probabilities and masked-answer perplexity.

    Perplexity is ``exp(mean cross-entropy)`` over the masked answers.
    ``relation_of`` maps fact id to relation id for the per-relation breakdown.
    """
    n = len(queries)
    probs = np.zeros(n, dtype=np.float64)
    correct = np.zeros(n, dtype=bool)
    nll = np.zeros(n, dtype=np.float64)
    for idx in length_batches(queries, batch_size):
        out = forward_batch(model, [queries[i] for i in idx])
        top = out.probs.argmax(axis=-1)
        for j, i in enumerate(idx):
            p = float(out.answer_probs[j])
            probs[i] = p
            correct[i] = top[j] == queries[i].answer
            nll[i] = -math.log(max(p, 1e-45))
    order = [i for b in length_batches(queries, batch_size) for i in b]
    rel_acc: dict[int, float] = {}
    rel_ppl: dict[int, float] = {}
    if relation_of is not None:
        groups: dict[int, list[int]] = {}
        for i in order:
            groups.setdefault(relation_of[queries[i].fact_id], []).append(i)
        for rel, members in sorted(groups.items()):
            rel_acc[rel] = float(np.mean(correct[members]))
            rel_ppl[rel] = math.exp(math.fsum(nll[members]) / len(members))
    mean_loss = math.fsum(nll[order]) / n if n else float("nan")
    return EvalResult(
        accuracy=float(correct.mean()) if n else float("nan"),
        perplexity=math.exp(mean_loss) if n else float("nan"),
        relation_accuracy=rel_acc,
        relation_perplexity=rel_ppl,
        answer_probs=probs,
        correct=correct,
        mean_loss=mean_loss,
    )


def perplexity(model: MaskedLM, queries: Sequence[ClozeQuery]) -> float:
    return evaluate(model, queries).perplexity


def known_facts(queries: Sequence[ClozeQuery], correct: np.ndarray) -> list[int]:
    """Facts answered correctly on every one of their templates."""
    status: dict[int, bool] = {}
    for q, ok in zip(queries, correct):
        status[q.fact_id] = status.get(q.fact_id, True) and bool(ok)
    return sorted(f for f, ok in status.items() if ok)


class Adam:
    def __init__(self, params, lr, beta1, beta2, eps):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float | None = None) -> None:
        self.t += 1
        lr = self.lr if lr is None else lr
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p.data -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)


def train(
    model: MaskedLM,
    queries: Sequence[ClozeQuery],
    cfg: TrainConfig | None = None,
    *,
    relation_of: Mapping[int, int] | None = None,
    checkpoint_path: str | Path | None = None,
    progress: TextIO | None = sys.stdout,
    pad_id: int = 0,
) -> TrainReport:
    """Adam on shuffled minibatches until the target accuracy or ``max_steps``.

    Training never stops on accuracy before ``min_steps``.  Progress lines ``step<TAB>loss<TAB>acc`` go to ``progress`` at every
    evaluation.
    """
    cfg = cfg or TrainConfig()
    cfg.validate()
    if not queries:
        raise ContractError("train needs a non-empty query set")
    rng = np.random.default_rng(cfg.seed)
    trainable = [p for name, p in model.params.items() if not (cfg.freeze_embeddings and name == "embeddings.token")]
    opt = Adam(trainable, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    order = np.arange(0)
    cursor = 0
    step = 0
    loss_val = float("nan")

    result = evaluate(model, queries, relation_of)
    if progress is not None:
        progress.write(f"{step}\t{result.mean_loss:.6f}\t{result.accuracy:.4f}\n")
    loss_val = result.mean_loss

    while step < cfg.max_steps and (step < cfg.min_steps or result.accuracy < cfg.target_accuracy):
        if cursor + cfg.batch_size > len(order):
            order = rng.permutation(len(queries))
            cursor = 0
        batch = [queries[int(i)] for i in order[cursor : cursor + cfg.batch_size]]
        cursor += cfg.batch_size

        model.zero_grad()
        with T.Tape() as tape:
            loss = forward_lm_loss(model, batch, pad_id, cfg.label_smoothing)
        loss_val = loss.item()
        if not math.isfinite(loss_val):
            raise DivergenceError(f"non-finite loss {loss_val} at step {step + 1}")
        tape.backward(loss)
        lr = cfg.lr * min(1.0, (step + 1) / cfg.warmup_steps) if cfg.warmup_steps else cfg.lr
        opt.step(lr)
        step += 1

        if step % cfg.eval_interval == 0 or step in (cfg.min_steps, cfg.max_steps):
            result = evaluate(model, queries, relation_of)
            if progress is not None:
                progress.write(f"{step}\t{loss_val:.6f}\t{result.accuracy:.4f}\n")
                progress.flush()

    report = TrainReport(
        final_step=step,
        final_loss=result.mean_loss if step == 0 else loss_val,
        accuracy=result.accuracy,
        relation_accuracy=result.relation_accuracy,
        known_facts=known_facts(queries, result.correct),
    )
    if checkpoint_path is not None:
        checkpoint.save(model, checkpoint_path)
    return report
