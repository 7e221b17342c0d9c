"""Action-prior estimation, prior re-weighting, and top-k accuracy."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, UsageError
from .sap import SapParams, sap_forward
from .training import Labels


@dataclass
class ActionPrior:
    """Normalized verb-noun co-occurrence frequencies from a training set."""

    table: np.ndarray  # V x U, entries >= 0, sums to 1
    total_count: int


@dataclass
class Prediction:
    verb_probs: np.ndarray
    noun_probs: np.ndarray
    action_scores: np.ndarray  # V x U


def estimate_action_prior(labels, V: int, U: int, min_count: int = 0) -> ActionPrior:
    """Count verb-noun pairs; unseen pairs get exactly 0.

    min_count > 0 zeroes pairs seen fewer than min_count times before
    normalizing (mimics restricting to sufficiently frequent actions).
    """
    labels = list(labels)
    if not labels:
        raise UsageError("cannot estimate a prior from an empty label sequence")
    counts = np.zeros((V, U), dtype=np.float64)
    for lab in labels:
        if not (0 <= lab.verb < V and 0 <= lab.noun < U):
            raise IndexError(f"label {lab} out of range for V={V}, U={U}")
        counts[lab.verb, lab.noun] += 1.0
    if min_count > 0:
        counts[counts < min_count] = 0.0
    total = counts.sum()
    if total == 0:
        raise UsageError("min_count filter removed every action")
    return ActionPrior(table=counts / total, total_count=len(labels))


def reweight_action_scores(verb_probs: np.ndarray, noun_probs: np.ndarray,
                           prior: ActionPrior) -> np.ndarray:
    """scores[v, u] = prior(v, u) * P(verb=v) * P(noun=u)."""
    verb_probs = np.asarray(verb_probs, dtype=np.float64)
    noun_probs = np.asarray(noun_probs, dtype=np.float64)
    if prior.table.shape != (verb_probs.shape[0], noun_probs.shape[0]):
        raise DimensionError(
            f"prior table {prior.table.shape} does not match "
            f"V={verb_probs.shape[0]}, U={noun_probs.shape[0]}"
        )
    return prior.table * np.outer(verb_probs, noun_probs)


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max())
    return e / e.sum()


def predict(episode, params: SapParams, variant: str = "full",
            prior: ActionPrior | None = None,
            logit_scale: float | None = None) -> Prediction:
    """Forward one episode (no tape) and produce branch probabilities.

    action_scores is the plain outer product when prior is None, else the
    prior-reweighted product.
    """
    out = sap_forward(episode.verb_feature, episode.noun_feature, episode.bank,
                      params, variant, logit_scale)
    vp = _softmax(out.verb_logits.data)
    np_ = _softmax(out.noun_logits.data)
    if prior is None:
        scores = np.outer(vp, np_)
    else:
        scores = reweight_action_scores(vp, np_, prior)
    return Prediction(verb_probs=vp, noun_probs=np_, action_scores=scores)


def ranked_classes(scores: np.ndarray) -> np.ndarray:
    """Class indices by descending score; ties broken by ascending index."""
    flat = np.asarray(scores, dtype=np.float64).reshape(-1)
    return np.lexsort((np.arange(flat.size), -flat))


def topk_hit(scores: np.ndarray, true_index: int, k: int) -> bool:
    flat = np.asarray(scores).reshape(-1)
    if k < 1:
        raise UsageError("k must be >= 1")
    if k > flat.size:
        warnings.warn(f"k={k} exceeds class count {flat.size}; clamped", stacklevel=2)
        k = flat.size
    return true_index in ranked_classes(flat)[:k]


def topk_accuracy(score_rows, truths, k: int) -> float:
    """Fraction of samples whose true class is among the k best scores."""
    score_rows = list(score_rows)
    truths = list(truths)
    if len(score_rows) != len(truths):
        raise DimensionError("scores and truths differ in length")
    if not score_rows:
        raise UsageError("cannot compute accuracy over zero samples")
    hits = sum(topk_hit(s, t, k) for s, t in zip(score_rows, truths))
    return hits / len(score_rows)


def evaluate_dataset(dataset, params: SapParams, variant: str = "full",
                     prior: ActionPrior | None = None, ks=(1, 5),
                     logit_scale: float | None = None) -> dict:
    """Top-k accuracies for verb, noun, and action over a dataset.

    Action accuracy is reported both on the raw verb x noun product and,
    when a prior is given, on the reweighted scores.
    """
    preds = [predict(ep, params, variant, None, logit_scale) for ep in dataset]
    U = preds[0].noun_probs.shape[0]
    verb_truth = [ep.labels.verb for ep in dataset]
    noun_truth = [ep.labels.noun for ep in dataset]
    action_truth = [ep.labels.verb * U + ep.labels.noun for ep in dataset]

    metrics = {}
    for k in ks:
        metrics[f"verb_top{k}"] = topk_accuracy(
            [p.verb_probs for p in preds], verb_truth, k)
        metrics[f"noun_top{k}"] = topk_accuracy(
            [p.noun_probs for p in preds], noun_truth, k)
        raw = [np.outer(p.verb_probs, p.noun_probs) for p in preds]
        metrics[f"action_top{k}_raw"] = topk_accuracy(raw, action_truth, k)
        if prior is not None:
            rew = [reweight_action_scores(p.verb_probs, p.noun_probs, prior)
                   for p in preds]
            metrics[f"action_top{k}"] = topk_accuracy(rew, action_truth, k)
        else:
            metrics[f"action_top{k}"] = metrics[f"action_top{k}_raw"]
    return metrics
