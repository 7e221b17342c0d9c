"""Joint verb+noun cross-entropy training with momentum SGD."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, UsageError
from .sap import BranchParams, SapParams, sap_forward
from .tensor import Tape, Tensor


@dataclass(frozen=True)
class Labels:
    verb: int
    noun: int


def cross_entropy_loss(logits: Tensor, target: int) -> Tensor:
    """-log softmax(logits)[target], via max-shifted log-sum-exp."""
    n = logits.data.shape[0]
    if not 0 <= target < n:
        raise IndexError(f"target {target} out of range for {n} classes")
    return T.sub(T.logsumexp(logits), T.pick(logits, target))


@dataclass
class OptimState:
    """SGD with momentum; weight decay is folded into the gradient."""

    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 1e-4
    velocity: dict = field(default_factory=dict)  # tensor name -> buffer

    def __post_init__(self):
        if self.learning_rate < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise UsageError("optimizer hyperparameters must be >= 0")

    def step(self, params: SapParams) -> None:
        """g <- grad + wd*w; v <- m*v + g; w <- w - lr*v; grads zeroed.

        Parameters with no gradient buffer are skipped: ablation variants
        legitimately leave whole stages untouched. Stepping when *nothing*
        has a gradient means forward/backward never ran, which is an error.
        """
        named = params.named_tensors()
        if all(t.grad is None for _, t in named):
            raise UsageError("no parameter has a gradient; run backward first")
        for name, t in named:
            if t.grad is None:
                continue
            g = t.grad + self.weight_decay * t.data
            v = self.velocity.get(name)
            v = g if v is None else self.momentum * v + g
            self.velocity[name] = v
            t.data -= self.learning_rate * v
            t.grad = None


@dataclass
class EpochMetrics:
    verb_loss: float
    noun_loss: float
    total_loss: float


def _batched_branch(own: Tensor, other: Tensor, rows: Tensor,
                    bp: BranchParams, variant: str,
                    logit_scale: float | None) -> Tensor:
    """Stacked-batch mirror of sap._branch_forward: (B, N, C) rows in,
    (B, C) branch features out. Must stay numerically equivalent to the
    per-sample path (tests pin this)."""
    shift = T.add(T.matmul(own, T.transpose(bp.fusion_global)), bp.fusion_bias)
    fused = T.rows_affine_relu(rows, bp.fusion_object, shift)

    if variant in ("full", "no_arm", "no_cross_stream"):
        src = own if variant == "no_cross_stream" else other
        gate = T.sigmoid(T.add(T.matmul(src, T.transpose(bp.gate_weight)),
                               bp.gate_bias))                       # (B, C)
    elif variant in ("no_gating", "no_csg", "no_csg_no_arm"):
        gate = None
    else:
        raise ConfigError(f"variant {variant!r} has no bank pipeline")

    # the (B, N, C) gated matrix is never materialized: a per-channel gate
    # commutes with both the attention dot products and the row reductions,
    #   softmax((fused*g) @ q) == softmax(fused @ (g*q))
    #   sum_n w_n (fused_n * g)  ==  (sum_n w_n fused_n) * g
    if variant in ("no_arm", "no_csg_no_arm"):
        pooled = T.mean_mid(fused)
        return pooled if gate is None else T.mul(pooled, gate)
    query = own if variant == "no_cross_stream" else other
    logits = T.rows_dot(fused, query if gate is None else T.mul(gate, query))
    if logit_scale is not None:
        logits = T.scale(logits, logit_scale)
    attended = T.weighted_rows(T.softmax_rows(logits), fused)
    return attended if gate is None else T.mul(attended, gate)


def batched_forward(f_v: Tensor, f_n: Tensor, rows: Tensor,
                    params: SapParams, variant: str = "full",
                    logit_scale: float | None = None):
    """Variant forward over a stacked batch; returns (verb, noun) logit tensors.

    f_v/f_n are (B, C), rows is (B, N, C). Equivalent to running sap_forward
    per sample, but one tape op per stage instead of per sample."""
    if variant == "baseline":
        verb_feat, noun_feat = f_v, f_n
    elif variant == "noun_plus_verb":
        def gate_vec(own, other, bp):
            g = T.sigmoid(T.add(T.matmul(other, T.transpose(bp.gate_weight)),
                                bp.gate_bias))
            return T.mul(own, g)
        noun_feat = gate_vec(f_n, f_v, params.noun)
        verb_feat = gate_vec(f_v, f_n, params.verb)
    elif variant in ("avg_pool", "max_pool"):
        verb_feat = noun_feat = (T.mean_mid(rows) if variant == "avg_pool"
                                 else T.max_mid(rows))
    else:
        noun_feat = _batched_branch(f_n, f_v, rows, params.noun, variant, logit_scale)
        verb_feat = _batched_branch(f_v, f_n, rows, params.verb, variant, logit_scale)
    verb_logits = T.add(T.matmul(verb_feat, params.verb_head), params.verb_head_bias)
    noun_logits = T.add(T.matmul(noun_feat, params.noun_head), params.noun_head_bias)
    return verb_logits, noun_logits


def _stack_dataset(dataset):
    """Stack a uniform dataset into dense arrays; None if ragged/empty banks."""
    n_rows = dataset[0].bank.n_rows
    if n_rows == 0 or any(ep.bank.n_rows != n_rows for ep in dataset):
        return None
    return (
        np.stack([ep.verb_feature.values for ep in dataset]),
        np.stack([ep.noun_feature.values for ep in dataset]),
        np.stack([ep.bank.features for ep in dataset]),
        np.array([ep.labels.verb for ep in dataset], dtype=np.int64),
        np.array([ep.labels.noun for ep in dataset], dtype=np.int64),
    )


def train_epoch(dataset, params: SapParams, opt: OptimState,
                rng: np.random.Generator, variant: str = "full",
                batch_size: int = 32,
                logit_scale: float | None = None) -> EpochMetrics:
    """One pass over the dataset: per-batch mean of (verb + noun) loss.

    Samples are visited in a shuffle drawn from rng; gradient accumulation
    follows that fixed order, so a fixed seed gives bit-identical runs.
    Uniform-bank datasets run through the stacked batch path; ragged or
    empty banks fall back to the per-sample loop.
    """
    if len(dataset) == 0:
        raise UsageError("cannot train on an empty dataset")
    order = rng.permutation(len(dataset))
    stacked = _stack_dataset(dataset)
    verb_total = noun_total = 0.0
    for start in range(0, len(order), batch_size):
        batch = order[start:start + batch_size]
        inv = 1.0 / len(batch)
        if stacked is not None:
            fv, fn, banks, verbs, nouns = stacked
            with Tape() as tape:
                vl, nl = batched_forward(
                    Tensor(fv[batch]), Tensor(fn[batch]), Tensor(banks[batch]),
                    params, variant, logit_scale)
                lv = T.ce_rows(vl, verbs[batch])
                ln = T.ce_rows(nl, nouns[batch])
                tape.backprop(T.scale(T.sum_all(T.add(lv, ln)), inv))
            verb_total += float(lv.data.sum())
            noun_total += float(ln.data.sum())
        else:
            for i in batch:
                ep = dataset[i]
                with Tape() as tape:
                    out = sap_forward(ep.verb_feature, ep.noun_feature, ep.bank,
                                      params, variant, logit_scale)
                    lv = cross_entropy_loss(out.verb_logits, ep.labels.verb)
                    ln = cross_entropy_loss(out.noun_logits, ep.labels.noun)
                    loss = T.scale(T.add(lv, ln), inv)
                    tape.backprop(loss)
                verb_total += lv.item()
                noun_total += ln.item()
        opt.step(params)
    n = len(order)
    return EpochMetrics(verb_total / n, noun_total / n,
                        (verb_total + noun_total) / n)


def train(dataset, params: SapParams, opt: OptimState, epochs: int,
          seed: int = 0, variant: str = "full", batch_size: int = 32,
          logit_scale: float | None = None) -> list[EpochMetrics]:
    """Run several epochs with a seeded shuffle stream; returns per-epoch metrics."""
    rng = np.random.default_rng(seed)
    return [
        train_epoch(dataset, params, opt, rng, variant, batch_size, logit_scale)
        for _ in range(epochs)
    ]
