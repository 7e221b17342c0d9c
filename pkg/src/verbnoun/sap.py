"""Two-branch symbiotic attention over privileged detection features.

Each branch (verb, noun) owns a global feature vector; a shared bank of
per-frame detection features is the privileged side input. The full
pipeline per branch is:

  1. integrate_privileged — enrich every bank row with the branch's own
     global feature through a ReLU-fused pair of linear maps,
  2. cross_stream_gate   — sigmoid channel gate computed from the *other*
     branch's global feature, rescaling the fused rows,
  3. attend_relation     — softmax attention of the other branch's global
     feature over the gated rows, yielding one attended vector,

followed by a linear classifier head. Ablation variants drop or rewire
individual stages; `VARIANTS` lists them all.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DimensionError, ConfigError, EmptyBankError, UsageError
from .tensor import Tensor

VERB = "verb"
NOUN = "noun"

VARIANTS = (
    "full",
    "baseline",
    "noun_plus_verb",
    "avg_pool",
    "max_pool",
    "no_csg_no_arm",
    "no_gating",
    "no_cross_stream",
    "no_csg",
    "no_arm",
)


@dataclass
class BranchFeature:
    """Global motion (verb) or appearance (noun) feature, length C."""

    values: np.ndarray
    branch: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise DimensionError(f"branch feature must be a vector, got {self.values.shape}")
        if self.branch not in (VERB, NOUN):
            raise UsageError(f"unknown branch {self.branch!r}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("branch feature holds non-finite values")


@dataclass
class ObjectBank:
    """Top-K detection features from M sampled frames, N = M*K rows."""

    features: np.ndarray
    confidences: np.ndarray
    frame_index: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.confidences = np.asarray(self.confidences, dtype=np.float64)
        self.frame_index = np.asarray(self.frame_index, dtype=np.int64)
        n = self.features.shape[0]
        if self.features.ndim != 2:
            raise DimensionError(f"bank features must be N x C, got {self.features.shape}")
        if self.confidences.shape != (n,) or self.frame_index.shape != (n,):
            raise DimensionError("confidences/frame_index must have one entry per row")

    @property
    def n_rows(self) -> int:
        return self.features.shape[0]

    @property
    def is_empty(self) -> bool:
        return self.features.shape[0] == 0


@dataclass
class BranchParams:
    """Learnable weights of one branch's fusion and gate stages."""

    fusion_global: Tensor   # C x C, applied to the branch's own global feature
    fusion_object: Tensor   # C x C, applied to each bank row
    fusion_bias: Tensor     # C
    gate_weight: Tensor     # C x C, applied to the gate source feature
    gate_bias: Tensor       # C


@dataclass
class SapParams:
    """All learnable weights: two branch stacks plus the classifier heads."""

    noun: BranchParams
    verb: BranchParams
    verb_head: Tensor       # C x V
    verb_head_bias: Tensor  # V
    noun_head: Tensor       # C x U
    noun_head_bias: Tensor  # U

    def branch(self, name: str) -> BranchParams:
        if name == NOUN:
            return self.noun
        if name == VERB:
            return self.verb
        raise UsageError(f"unknown branch {name!r}")

    def set_tensor(self, name: str, t: Tensor) -> None:
        """Replace one named parameter tensor (names as in named_tensors)."""
        if "." in name:
            bname, attr = name.split(".", 1)
            setattr(self.branch(bname), attr, t)
        else:
            setattr(self, name, t)

    def named_tensors(self):
        """Fixed-order (name, tensor) pairs, for optimizers and checkers."""
        out = []
        for bname in (NOUN, VERB):
            bp = self.branch(bname)
            out += [
                (f"{bname}.fusion_global", bp.fusion_global),
                (f"{bname}.fusion_object", bp.fusion_object),
                (f"{bname}.fusion_bias", bp.fusion_bias),
                (f"{bname}.gate_weight", bp.gate_weight),
                (f"{bname}.gate_bias", bp.gate_bias),
            ]
        out += [
            ("verb_head", self.verb_head),
            ("verb_head_bias", self.verb_head_bias),
            ("noun_head", self.noun_head),
            ("noun_head_bias", self.noun_head_bias),
        ]
        return out

    @property
    def feature_dim(self) -> int:
        return self.noun.fusion_bias.shape[0]

    @classmethod
    def init(cls, C: int, V: int, U: int, seed: int = 0) -> "SapParams":
        """Random init: uniform(-1/sqrt(C), 1/sqrt(C)) weights, zero biases."""
        rng = np.random.default_rng(seed)
        bound = 1.0 / np.sqrt(C)

        def w(*shape):
            return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

        def b(*shape):
            return Tensor(np.zeros(shape), requires_grad=True)

        def branch():
            return BranchParams(
                fusion_global=w(C, C),
                fusion_object=w(C, C),
                fusion_bias=b(C),
                gate_weight=w(C, C),
                gate_bias=b(C),
            )

        return cls(
            noun=branch(),
            verb=branch(),
            verb_head=w(C, V),
            verb_head_bias=b(V),
            noun_head=w(C, U),
            noun_head_bias=b(U),
        )

    def zero_grad(self):
        for _, t in self.named_tensors():
            t.zero_grad()


@dataclass
class SapActivations:
    """Recorded per-branch intermediates, for inspection and attention dumps."""

    fused: np.ndarray | None = None
    gate: np.ndarray | None = None
    gated: np.ndarray | None = None
    attention_weights: np.ndarray | None = None
    attended: np.ndarray | None = None
    used_baseline_fallback: bool = False


@dataclass
class SapOutput:
    verb_logits: Tensor
    noun_logits: Tensor
    activations: dict = field(default_factory=dict)  # branch name -> SapActivations


def integrate_privileged(global_feat: BranchFeature, bank: ObjectBank,
                         params: SapParams) -> Tensor:
    """Enrich each bank row with the branch's global feature (stage 1).

    Row i = ReLU(W_f_global @ global + W_f_object @ bank[i] + bias); the
    global term is computed once and broadcast over the N rows.
    """
    bp = params.branch(global_feat.branch)
    if bank.features.shape[1] != global_feat.values.shape[0]:
        raise DimensionError(
            f"bank feature dim {bank.features.shape[1]} != global dim "
            f"{global_feat.values.shape[0]}"
        )
    return _integrate(Tensor(global_feat.values), Tensor(bank.features), bp)


def _integrate(own: Tensor, rows: Tensor, bp: BranchParams) -> Tensor:
    global_term = T.matmul(bp.fusion_global, own)                       # (C,)
    object_term = T.matmul(rows, T.transpose(bp.fusion_object))         # (N, C)
    return T.relu(T.add(T.add(object_term, global_term), bp.fusion_bias))


def cross_stream_gate(fused: Tensor, gate_feature: BranchFeature,
                      params: SapParams, branch: str,
                      same_stream: bool = False):
    """Sigmoid channel gate from the opposite branch's global feature (stage 2).

    Returns (gated rows, gate vector). Pass same_stream=True to deliberately
    gate a branch with its own feature (the "w/o Cross Stream" ablation);
    otherwise a same-branch gate source is rejected.
    """
    if not same_stream and gate_feature.branch == branch:
        raise UsageError(
            f"cross-stream gate for the {branch} branch must use the opposite "
            f"branch's feature (got {gate_feature.branch}); pass "
            f"same_stream=True to override"
        )
    bp = params.branch(branch)
    gated, gate = _gate(fused, Tensor(gate_feature.values), bp)
    return gated, gate


def _gate(fused: Tensor, source: Tensor, bp: BranchParams):
    gate = T.sigmoid(T.add(T.matmul(bp.gate_weight, source), bp.gate_bias))  # (C,)
    return T.mul(fused, gate), gate


def attend_relation(gated: Tensor, query: Tensor, logit_scale: float | None = None):
    """Softmax attention of the query over the gated rows (stage 3).

    Logits are raw dot products (no scaling factor) unless logit_scale is
    given. Returns (attended C-vector, weight N-vector).
    """
    if gated.data.shape[0] == 0:
        raise EmptyBankError("cannot attend over an empty bank")
    logits = T.matmul(gated, query)                 # (N,)
    if logit_scale is not None:
        logits = T.scale(logits, logit_scale)
    weights = T.softmax_rows(logits)
    attended = T.matmul(weights, gated)             # (C,)
    return attended, weights


def pool_bank(bank: ObjectBank, mode: str) -> np.ndarray:
    """Coordinate-wise mean or max over bank rows."""
    if bank.is_empty:
        raise EmptyBankError("cannot pool an empty bank")
    if mode == "avg":
        return bank.features.mean(axis=0)
    if mode == "max":
        return bank.features.max(axis=0)
    raise ConfigError(f"unknown pooling mode {mode!r}")


def _head(params: SapParams, branch: str, feat: Tensor) -> Tensor:
    if branch == VERB:
        return T.add(T.matmul(feat, params.verb_head), params.verb_head_bias)
    return T.add(T.matmul(feat, params.noun_head), params.noun_head_bias)


def _branch_forward(own: Tensor, other: Tensor, rows: Tensor,
                    bp: BranchParams, variant: str,
                    logit_scale: float | None) -> tuple[Tensor, SapActivations]:
    """One branch through the stage composition a variant prescribes.

    `own` is the branch's global feature, `other` the opposite branch's;
    the verb branch is the same path with roles swapped.
    """
    acts = SapActivations()
    fused = _integrate(own, rows, bp)
    acts.fused = fused.data

    if variant in ("full", "no_arm"):
        gated, gate = _gate(fused, other, bp)
    elif variant == "no_cross_stream":
        gated, gate = _gate(fused, own, bp)
    elif variant in ("no_gating", "no_csg", "no_csg_no_arm"):
        gated, gate = fused, None
    else:
        raise ConfigError(f"variant {variant!r} has no bank pipeline")
    if gate is not None:
        acts.gate = gate.data
    acts.gated = gated.data

    if variant in ("no_arm", "no_csg_no_arm"):
        attended = T.mean_rows(gated)
    else:
        query = own if variant == "no_cross_stream" else other
        attended, weights = attend_relation(gated, query, logit_scale)
        acts.attention_weights = weights.data
    acts.attended = attended.data
    return attended, acts


def sap_forward(verb_feature: BranchFeature, noun_feature: BranchFeature,
                bank: ObjectBank, params: SapParams, variant: str = "full",
                logit_scale: float | None = None) -> SapOutput:
    """Run both branches under a variant and apply the classifier heads.

    An empty bank routes bank-dependent variants to the `baseline` path for
    that sample.
    """
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; known: {', '.join(VARIANTS)}")
    if verb_feature.branch != VERB or noun_feature.branch != NOUN:
        raise UsageError("sap_forward expects (verb, noun) features in that order")

    fell_back = False
    if bank.is_empty and variant not in ("baseline", "noun_plus_verb"):
        variant = "baseline"
        fell_back = True

    f_v = Tensor(verb_feature.values)
    f_n = Tensor(noun_feature.values)
    acts = {VERB: SapActivations(), NOUN: SapActivations()}

    if variant == "baseline":
        verb_feat, noun_feat = f_v, f_n
    elif variant == "noun_plus_verb":
        noun_feat, ng = _gate_vector(f_n, f_v, params.noun)
        verb_feat, vg = _gate_vector(f_v, f_n, params.verb)
        acts[NOUN].gate = ng.data
        acts[VERB].gate = vg.data
    elif variant in ("avg_pool", "max_pool"):
        rows = Tensor(bank.features)
        pooled = T.mean_rows(rows) if variant == "avg_pool" else T.max_rows(rows)
        verb_feat = noun_feat = pooled
    else:
        rows = Tensor(bank.features)
        noun_feat, acts[NOUN] = _branch_forward(
            f_n, f_v, rows, params.noun, variant, logit_scale)
        verb_feat, acts[VERB] = _branch_forward(
            f_v, f_n, rows, params.verb, variant, logit_scale)

    if fell_back:
        acts[VERB].used_baseline_fallback = True
        acts[NOUN].used_baseline_fallback = True
    acts[VERB].attended = verb_feat.data
    acts[NOUN].attended = noun_feat.data

    return SapOutput(
        verb_logits=_head(params, VERB, verb_feat),
        noun_logits=_head(params, NOUN, noun_feat),
        activations=acts,
    )


def _gate_vector(own: Tensor, other: Tensor, bp: BranchParams):
    """Cross-gate applied directly to the global vector, no bank involved."""
    gate = T.sigmoid(T.add(T.matmul(bp.gate_weight, other), bp.gate_bias))
    return T.mul(own, gate), gate
