"""End-to-end runs: ablation ladder, gradient-check suite, attention dumps."""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .data import GeneratorSpec, generate_dataset
from .errors import ConfigError, EmptyBankError
from .evaluate import estimate_action_prior, evaluate_dataset
from .sap import NOUN, VERB, SapParams, VARIANTS, sap_forward
from .tensor import Tape, Tensor, grad_check
from .training import OptimState, cross_entropy_loss, train

CSV_COLUMNS = (
    "variant", "seed", "split",
    "verb_top1", "verb_top5", "noun_top1", "noun_top5",
    "action_top1", "action_top5", "action_top1_raw", "action_top5_raw",
    "epochs",
)

DEFAULT_OUTDIR_ENV = "VERBNOUN_OUTDIR"


@dataclass
class RunConfig:
    """Everything one ablation run needs; flags and config files map 1:1."""

    spec: GeneratorSpec = field(default_factory=GeneratorSpec)
    variants: tuple = VARIANTS
    seeds: tuple = (0, 1, 2, 3, 4)
    train_size: int = 800
    val_size: int = 300
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 0.3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    ks: tuple = (1, 5)
    logit_scale: float | None = None
    outdir: str = "."

    def validate(self):
        if not self.variants:
            raise ConfigError("at least one variant is required")
        unknown = [v for v in self.variants if v not in VARIANTS]
        if unknown:
            raise ConfigError(
                f"unknown variants: {', '.join(unknown)}; known: {', '.join(VARIANTS)}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.train_size < 1 or self.val_size < 1:
            raise ConfigError("train_size and val_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")


@dataclass
class ResultRecord:
    variant: str
    seed: int
    split: str
    verb_top1: float
    verb_top5: float
    noun_top1: float
    noun_top5: float
    action_top1: float
    action_top5: float
    action_top1_raw: float
    action_top5_raw: float
    epochs: int
    wall_clock: float


def default_outdir() -> str:
    return os.environ.get(DEFAULT_OUTDIR_ENV, ".")


def _seed_splits(config: RunConfig, seed: int):
    """(spec, train, val) for one seed; splits come from one rng stream."""
    spec = GeneratorSpec(**{**_spec_dict(config.spec), "seed": seed})
    rng = np.random.default_rng(spec.seed)
    train_set = generate_dataset(spec, config.train_size, rng)
    val_set = generate_dataset(spec, config.val_size, rng)
    return spec, train_set, val_set


def run_cell(config: RunConfig, variant: str, seed: int,
             splits=None) -> list[ResultRecord]:
    """Train and evaluate one (variant, seed) cell on fresh splits.

    splits, if given, must be the _seed_splits tuple for this seed; the
    ablation loop passes it so all variants of one seed share the data.
    """
    spec, train_set, val_set = splits if splits is not None \
        else _seed_splits(config, seed)

    params = SapParams.init(spec.C, spec.V, spec.U, seed=seed + 10_000)
    opt = OptimState(config.learning_rate, config.momentum, config.weight_decay)
    started = time.perf_counter()
    train(train_set, params, opt, config.epochs, seed=seed, variant=variant,
          batch_size=config.batch_size, logit_scale=config.logit_scale)
    elapsed = time.perf_counter() - started

    prior = estimate_action_prior([ep.labels for ep in train_set], spec.V, spec.U)
    records = []
    for split, dataset in (("train", train_set), ("val", val_set)):
        m = evaluate_dataset(dataset, params, variant, prior, config.ks,
                             config.logit_scale)
        records.append(ResultRecord(
            variant=variant, seed=seed, split=split,
            verb_top1=m["verb_top1"], verb_top5=m["verb_top5"],
            noun_top1=m["noun_top1"], noun_top5=m["noun_top5"],
            action_top1=m["action_top1"], action_top5=m["action_top5"],
            action_top1_raw=m["action_top1_raw"],
            action_top5_raw=m["action_top5_raw"],
            epochs=config.epochs, wall_clock=elapsed,
        ))
    return records


def _spec_dict(spec: GeneratorSpec) -> dict:
    return asdict(spec)


def run_ablation(config: RunConfig) -> list[ResultRecord]:
    """All (variant, seed) cells in order; writes CSV, JSONL, and a summary.

    The CSV deliberately omits wall-clock time so identical configs produce
    byte-identical files; timings live in the JSONL log.
    """
    config.validate()
    splits = {seed: _seed_splits(config, seed) for seed in config.seeds}
    records = []
    for variant in config.variants:
        for seed in config.seeds:
            records.extend(run_cell(config, variant, seed, splits[seed]))

    os.makedirs(config.outdir, exist_ok=True)
    write_csv(os.path.join(config.outdir, "results.csv"), records)
    write_jsonl(os.path.join(config.outdir, "results.jsonl"), records)
    with open(os.path.join(config.outdir, "summary.txt"), "w") as fh:
        fh.write(summarize(records, config))
    return records


def write_csv(path, records) -> None:
    lines = [",".join(CSV_COLUMNS)]
    for r in records:
        d = asdict(r)
        lines.append(",".join(
            f"{d[c]:.6f}" if isinstance(d[c], float) else str(d[c])
            for c in CSV_COLUMNS))
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def write_jsonl(path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")


def variant_means(records, metric: str = "noun_top1", split: str = "val") -> dict:
    """variant -> (mean, std) of a metric over seeds, in variant order."""
    out = {}
    for r in records:
        if r.split == split:
            out.setdefault(r.variant, []).append(getattr(r, metric))
    return {v: (float(np.mean(xs)), float(np.std(xs))) for v, xs in out.items()}


def ordering_matrix(means: dict) -> dict:
    """(a, b) -> True iff mean(a) > mean(b), for every variant pair."""
    names = list(means)
    return {(a, b): means[a][0] > means[b][0]
            for a in names for b in names if a != b}


def summarize(records, config: RunConfig) -> str:
    means = variant_means(records)
    lines = ["variant            noun_top1 (val, mean +/- std over seeds)"]
    for v, (m, s) in means.items():
        lines.append(f"{v:<18s} {m:.4f} +/- {s:.4f}")
    lines.append("")
    lines.append("pairwise ordering (row beats column on mean val noun top-1):")
    names = list(means)
    order = ordering_matrix(means)
    header = " " * 18 + " ".join(f"{n[:8]:>8s}" for n in names)
    lines.append(header)
    for a in names:
        cells = " ".join(
            f"{'.':>8s}" if a == b else f"{('>' if order[(a, b)] else '<'):>8s}"
            for b in names)
        lines.append(f"{a:<18s}{cells}")
    lines.append("")
    lines.append(f"seeds={list(config.seeds)} epochs={config.epochs} "
                 f"train={config.train_size} val={config.val_size}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# attention dump
# --------------------------------------------------------------------------

def dump_attention(params: SapParams, episode, path,
                   logit_scale: float | None = None) -> None:
    """Write per-row attention weights, sorted by noun-branch weight.

    Columns: row, frame_index, confidence, noun_weight, verb_weight. An
    empty bank writes a fallback marker instead of weights.
    """
    with open(path, "w") as fh:
        if episode.bank.is_empty:
            fh.write("baseline-fallback: empty object bank, no attention weights\n")
            return
        out = sap_forward(episode.verb_feature, episode.noun_feature,
                          episode.bank, params, "full", logit_scale)
        nw = out.activations[NOUN].attention_weights
        vw = out.activations[VERB].attention_weights
        fh.write("row,frame_index,confidence,noun_weight,verb_weight\n")
        for i in np.argsort(-nw, kind="stable"):
            fh.write(f"{i},{episode.bank.frame_index[i]},"
                     f"{episode.bank.confidences[i]:.6f},"
                     f"{nw[i]:.9f},{vw[i]:.9f}\n")


# --------------------------------------------------------------------------
# gradient-check suite
# --------------------------------------------------------------------------

@dataclass
class GradcheckEntry:
    component: str
    worst_rel: float
    passed: bool


@dataclass
class GradcheckReport:
    entries: list
    tol: float

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def worst(self) -> float:
        return max(e.worst_rel for e in self.entries)

    def render(self) -> str:
        lines = []
        for e in self.entries:
            mark = "PASS" if e.passed else "FAIL"
            lines.append(f"{mark}  {e.component:<28s} worst rel err {e.worst_rel:.3e}")
        lines.append(f"{'PASS' if self.passed else 'FAIL'}  overall "
                     f"(tol {self.tol:g})")
        return "\n".join(lines)


def _primitive_checks(rng):
    """Scalar-valued wrappers around each primitive, for finite differences."""
    r = Tensor(rng.standard_normal(6))            # fixed mixing vector
    r2 = Tensor(rng.standard_normal((4, 6)))
    b_mat = Tensor(rng.standard_normal((5, 6)))
    vec = Tensor(rng.standard_normal(5))

    def mixdown(x):  # scalar from a (.., 6)-shaped output
        return T.sum_all(T.mul(x, r if x.data.ndim == 1 else r2))

    checks = {
        "matmul": (rng.standard_normal((4, 5)),
                   lambda p: mixdown(T.matmul(p, b_mat))),
        "matmul_vec": (rng.standard_normal(5),
                       lambda p: mixdown(T.matmul(p, b_mat))),
        "add_broadcast": (rng.standard_normal(6),
                          lambda p: mixdown(T.add(r2, p))),
        "mul_broadcast": (rng.standard_normal(6),
                          lambda p: mixdown(T.mul(r2, p))),
        "relu": (rng.standard_normal((4, 6)) + 0.05,
                 lambda p: mixdown(T.relu(p))),
        "sigmoid": (rng.standard_normal((4, 6)),
                    lambda p: mixdown(T.sigmoid(p))),
        "softmax_rows": (rng.standard_normal((4, 6)),
                         lambda p: mixdown(T.softmax_rows(p))),
        "logsumexp": (rng.standard_normal(5),
                      lambda p: T.mul(T.logsumexp(p), T.pick(vec, 2))),
        "pick": (rng.standard_normal(5),
                 lambda p: T.mul(T.pick(p, 3), T.pick(p, 1))),
        "mean_rows": (rng.standard_normal((4, 6)),
                      lambda p: mixdown(T.mean_rows(p))),
        "max_rows": (rng.standard_normal((4, 6)),
                     lambda p: mixdown(T.max_rows(p))),
        "transpose": (rng.standard_normal((6, 4)),
                      lambda p: mixdown(T.transpose(p))),
    }

    # batched (rank-3) primitives used by the stacked training path
    r3 = Tensor(rng.standard_normal((2, 3, 6)))
    q2 = Tensor(rng.standard_normal((2, 6)))
    w26 = Tensor(rng.standard_normal((2, 3)))
    w66 = Tensor(rng.standard_normal((6, 6)))
    targets = np.array([1, 4])

    def mixdown3(x):
        if x.data.shape == (2, 3):
            return T.sum_all(T.mul(x, w26))
        return T.sum_all(T.mul(x, q2 if x.data.ndim == 2 else r3))

    checks.update({
        "reshape": (rng.standard_normal((2, 6)),
                    lambda p: mixdown3(T.reshape(T.reshape(p, (2, 1, 6)), (2, 6)))),
        "matmul_rows": (rng.standard_normal((6, 6)),
                        lambda p: mixdown3(T.matmul_rows(r3, p))),
        "matmul_rows_a": (rng.standard_normal((2, 3, 6)),
                          lambda p: mixdown3(T.matmul_rows(p, Tensor(np.eye(6))))),
        "rows_affine_relu": (rng.standard_normal((6, 6)),
                             lambda p: mixdown3(T.rows_affine_relu(r3, p, q2))),
        "rows_affine_relu_s": (rng.standard_normal((2, 6)),
                               lambda p: mixdown3(T.rows_affine_relu(r3, w66, p))),
        "rows_dot": (rng.standard_normal((2, 6)),
                     lambda p: mixdown3(T.rows_dot(r3, p))),
        "rows_dot_a": (rng.standard_normal((2, 3, 6)),
                       lambda p: mixdown3(T.rows_dot(p, q2))),
        "weighted_rows": (rng.standard_normal((2, 3)),
                          lambda p: mixdown3(T.weighted_rows(p, r3))),
        "weighted_rows_a": (rng.standard_normal((2, 3, 6)),
                            lambda p: mixdown3(T.weighted_rows(w26, p))),
        "mean_mid": (rng.standard_normal((2, 3, 6)),
                     lambda p: mixdown3(T.mean_mid(p))),
        "max_mid": (rng.standard_normal((2, 3, 6)),
                    lambda p: mixdown3(T.max_mid(p))),
        "ce_rows": (rng.standard_normal((2, 6)),
                    lambda p: T.sum_all(T.ce_rows(p, targets))),
    })
    return checks


def _sap_loss_check(seed: int, tol: float, h: float):
    """Finite-difference every parameter tensor of a small full-SAP loss."""
    from .data import GeneratorSpec, generate_dataset

    # modest signal strengths keep the tiny problem away from ReLU kinks and
    # attention saturation; summing over a few episodes keeps every parameter
    # coordinate's gradient away from zero, where relative error degenerates
    spec = GeneratorSpec(C=6, V=3, U=4, M=2, K=3, noise_sigma=0.2,
                         distractor_count=1, global_signal_strength=0.4,
                         bank_signal_strength=0.5, seed=seed)
    rng = np.random.default_rng(seed)
    episodes = generate_dataset(spec, 6, rng)
    params = SapParams.init(spec.C, spec.V, spec.U, seed=seed)

    worst = 0.0
    for name, t in params.named_tensors():
        report = grad_check(_swap_into(name, params, episodes),
                            Tensor(t.data.copy()), h=h, tol=tol)
        worst = max(worst, report.worst_rel)
    return worst


def _swap_into(name: str, params: SapParams, episodes):
    """Build f(theta) evaluating the full-SAP loss with theta in a named slot."""
    if not isinstance(episodes, (list, tuple)):
        episodes = [episodes]

    def f(theta: Tensor) -> Tensor:
        saved = dict(params.named_tensors())[name]
        params.set_tensor(name, theta)
        try:
            loss = None
            for ep in episodes:
                out = sap_forward(ep.verb_feature, ep.noun_feature, ep.bank,
                                  params, "full")
                lv = cross_entropy_loss(out.verb_logits, ep.labels.verb)
                ln = cross_entropy_loss(out.noun_logits, ep.labels.noun)
                term = T.add(lv, ln)
                loss = term if loss is None else T.add(loss, term)
        finally:
            params.set_tensor(name, saved)
        return loss

    return f


def gradcheck_suite(tol: float = 1e-4, h: float = 1e-6,
                    seeds=(0, 1, 2)) -> GradcheckReport:
    """grad_check every primitive and the composed full-SAP loss per seed."""
    entries = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for name, (theta, fn) in _primitive_checks(rng).items():
            rep = grad_check(fn, Tensor(theta), h=h, tol=tol)
            entries.append(GradcheckEntry(f"{name}@seed{seed}",
                                          rep.worst_rel, rep.passed))
        worst = _sap_loss_check(seed, tol, h)
        entries.append(GradcheckEntry(f"sap_full_loss@seed{seed}",
                                      worst, worst < tol))
    return GradcheckReport(entries=entries, tol=tol)


# --------------------------------------------------------------------------
# parameter persistence (npz)
# --------------------------------------------------------------------------

def save_params(path, params: SapParams) -> None:
    np.savez(path, **{name: t.data for name, t in params.named_tensors()})


def load_params(path) -> SapParams:
    with np.load(path) as z:
        arrays = {name: z[name] for name in z.files}
    C, V = arrays["verb_head"].shape
    U = arrays["noun_head"].shape[1]
    params = SapParams.init(C, V, U, seed=0)
    for name, t in params.named_tensors():
        t.data = np.asarray(arrays[name], dtype=np.float64)
    return params
