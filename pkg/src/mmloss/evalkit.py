"""Verification, identification and centre-geometry evaluation.

Scores are squared Euclidean distances between embeddings: lower means more
similar, and a pair is accepted as "same identity" when its distance is at or
below the threshold.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ProtocolError, ShapeError
from .numeric import as_matrix, pairwise_sq_dist


def pair_distances(features_a, features_b, metric: str = "sqeuclidean") -> np.ndarray:
    a = as_matrix(features_a, "features_a")
    b = as_matrix(features_b, "features_b")
    if a.shape != b.shape:
        raise ShapeError(f"pair feature shapes differ: {a.shape} vs {b.shape}")
    if metric == "sqeuclidean":
        diff = a - b
        return np.sum(diff * diff, axis=1)
    if metric == "cosine":
        na = np.linalg.norm(a, axis=1)
        nb = np.linalg.norm(b, axis=1)
        return 1.0 - np.sum(a * b, axis=1) / (na * nb)
    raise ValueError(f"unknown metric {metric!r}")


# --- verification ------------------------------------------------------------


def fold_slices(n: int, folds: int) -> list[np.ndarray]:
    if folds < 2 or folds > n:
        raise ProtocolError(f"need 2 <= folds <= number of pairs ({n}), got {folds}")
    return np.array_split(np.arange(n), folds)


def best_threshold(dist, same) -> tuple[float, float]:
    """Threshold maximising accuracy of ``dist <= t`` on the given pairs.

    Candidates are ``-inf`` (reject everything) and every observed distance,
    so the decision depends only on the ordering of distances. Ties go to the
    smallest threshold.
    """
    dist = np.asarray(dist, dtype=np.float64)
    same = np.asarray(same, dtype=bool)
    order = np.argsort(dist, kind="stable")
    d = dist[order]
    s = same[order]
    n = d.size
    # accepting the first i sorted pairs: correct = accepted positives + rejected negatives
    cum_pos = np.concatenate([[0], np.cumsum(s)])
    cum_neg = np.concatenate([[0], np.cumsum(~s)])
    total_neg = cum_neg[-1]
    # valid cut points: 0 and every i where d[i-1] < d[i] (or i == n)
    cuts = [0] + [i for i in range(1, n + 1) if i == n or d[i - 1] < d[i]]
    correct = np.array([cum_pos[i] + (total_neg - cum_neg[i]) for i in cuts])
    best = int(np.argmax(correct))
    i = cuts[best]
    t = -np.inf if i == 0 else float(d[i - 1])
    return t, float(correct[best]) / n


class VerificationResult(NamedTuple):
    accuracy: float
    threshold: float
    fold_accuracies: list
    fold_thresholds: list


def verification_accuracy(features_a, features_b, flags, folds: int = 10,
                          metric: str = "sqeuclidean") -> VerificationResult:
    """k-fold cross-validated verification accuracy.

    Folds are contiguous blocks of the pair list. For each fold the threshold
    is fitted on the remaining folds and applied to the held-out one.
    """
    dist = pair_distances(features_a, features_b, metric)
    return verification_from_distances(dist, flags, folds)


def verification_from_distances(dist, flags, folds: int = 10) -> VerificationResult:
    dist = np.asarray(dist, dtype=np.float64)
    same = np.asarray(flags, dtype=bool)
    if dist.shape != same.shape:
        raise ShapeError("distances and flags differ in length")
    accs, thresholds = [], []
    for test in fold_slices(dist.size, folds):
        mask = np.ones(dist.size, dtype=bool)
        mask[test] = False
        t, _ = best_threshold(dist[mask], same[mask])
        accs.append(float(np.mean((dist[test] <= t) == same[test])))
        thresholds.append(t)
    return VerificationResult(float(np.mean(accs)), float(np.mean(thresholds)), accs, thresholds)


# --- ROC -----------------------------------------------------------------------


@dataclass
class RocCurve:
    far: np.ndarray
    tar: np.ndarray
    thresholds: np.ndarray
    auc: float
    num_pos: int
    num_neg: int

    def points(self):
        return list(zip(self.far.tolist(), self.tar.tolist()))


def roc(pos_scores, neg_scores) -> RocCurve:
    """ROC from distance scores; the first point is the reject-all (0, 0)."""
    pos = np.asarray(pos_scores, dtype=np.float64).reshape(-1)
    neg = np.asarray(neg_scores, dtype=np.float64).reshape(-1)
    if pos.size == 0 or neg.size == 0:
        raise ProtocolError("ROC needs at least one positive and one negative score")
    thresholds = np.unique(np.concatenate([pos, neg]))
    pos_sorted = np.sort(pos)
    neg_sorted = np.sort(neg)
    tar = np.searchsorted(pos_sorted, thresholds, side="right") / pos.size
    far = np.searchsorted(neg_sorted, thresholds, side="right") / neg.size
    far = np.concatenate([[0.0], far])
    tar = np.concatenate([[0.0], tar])
    thresholds = np.concatenate([[-np.inf], thresholds])
    auc = float(np.sum((far[1:] - far[:-1]) * (tar[1:] + tar[:-1]) / 2.0))
    return RocCurve(far, tar, thresholds, auc, int(pos.size), int(neg.size))


class VrAtFar(NamedTuple):
    tar: float
    achievable: bool


def vr_at_far(curve: RocCurve, far_level: float) -> VrAtFar:
    """TAR at the largest achieved FAR not above ``far_level`` (step rule).

    Levels finer than ``1 / num_neg`` cannot be resolved by the negative set
    and report ``(0.0, False)``.
    """
    if not 0.0 < far_level <= 1.0:
        raise ValueError("far_level must lie in (0, 1]")
    if far_level < 1.0 / curve.num_neg:
        return VrAtFar(0.0, False)
    ok = np.flatnonzero(curve.far <= far_level)
    return VrAtFar(float(curve.tar[ok[-1]]), True)


# --- CMC -----------------------------------------------------------------------


@dataclass
class CmcCurve:
    rank_rates: np.ndarray
    ranks: np.ndarray = field(default=None)

    def rate(self, r: int) -> float:
        return float(self.rank_rates[r - 1])


def cmc(protocol, embeddings) -> CmcCurve:
    """Rank of each probe's gallery mate among gallery plus distractors.

    ``embeddings`` is indexed by dataset sample index. Distance ties are
    broken by candidate sample index.
    """
    emb = as_matrix(embeddings, "embeddings")
    needed = np.concatenate([protocol.probes, protocol.gallery, protocol.distractors])
    bad = needed[(needed < 0) | (needed >= emb.shape[0])]
    if bad.size:
        raise ProtocolError(f"no embedding for sample index {int(bad[0])}")
    missing = needed[~np.isfinite(emb[needed]).all(axis=1)]
    if missing.size:
        raise ProtocolError(f"embedding for sample index {int(missing[0])} is not finite")
    cand = np.concatenate([protocol.gallery, protocol.distractors])
    dist = pairwise_sq_dist(emb[protocol.probes], emb[cand])
    ranks = np.empty(protocol.probes.size, dtype=np.int64)
    for p in range(protocol.probes.size):
        d_true = dist[p, p]
        mate = cand[p]
        ahead = (dist[p] < d_true) | ((dist[p] == d_true) & (cand < mate))
        ranks[p] = 1 + int(np.count_nonzero(ahead))
    r = np.arange(1, cand.size + 1)
    rates = np.array([np.count_nonzero(ranks <= k) for k in r]) / max(ranks.size, 1)
    return CmcCurve(rates, ranks)


# --- centre-distance histograms -----------------------------------------------------


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray

    def rows(self, deltas=None):
        deltas = np.zeros_like(self.counts) if deltas is None else deltas
        return [
            (float(self.edges[i]), float(self.edges[i + 1]), int(self.counts[i]), int(deltas[i]))
            for i in range(self.counts.size)
        ]


def class_means(features, labels):
    f = as_matrix(features, "features")
    y = np.asarray(labels, dtype=np.int64)
    classes = np.unique(y)
    return classes, np.stack([f[y == j].mean(axis=0) for j in classes])


def nearest_centre_histogram(features, labels, bins: int, value_range) -> Histogram:
    """Histogram of each class mean's squared distance to its nearest other class mean.

    Fixed-width bins over ``value_range``; values outside are clamped into the
    first or last bin.
    """
    lo, hi = float(value_range[0]), float(value_range[1])
    if bins < 1 or not hi > lo:
        raise ValueError("need bins >= 1 and a non-empty range")
    classes, means = class_means(features, labels)
    if classes.size < 2:
        raise ProtocolError("histogram needs at least 2 classes")
    dist = pairwise_sq_dist(means, means)
    np.fill_diagonal(dist, np.inf)
    nearest = dist.min(axis=1)
    return histogram_of(nearest, bins, (lo, hi))


def histogram_of(values, bins: int, value_range) -> Histogram:
    lo, hi = float(value_range[0]), float(value_range[1])
    edges = np.linspace(lo, hi, bins + 1)
    width = (hi - lo) / bins
    idx = np.clip(np.floor((np.asarray(values) - lo) / width), 0, bins - 1).astype(np.int64)
    return Histogram(edges, np.bincount(idx, minlength=bins))


def compare_histograms(base: Histogram, new: Histogram) -> np.ndarray:
    if base.edges.shape != new.edges.shape or not np.array_equal(base.edges, new.edges):
        raise ValueError("histograms have different bin edges")
    return new.counts - base.counts


# --- sweeps -------------------------------------------------------------------------


@dataclass
class SweepCell:
    value: float
    seed: int
    accuracy: float | None
    threshold: float | None
    error: str | None = None
    state: object = field(default=None, repr=False, compare=False)


@dataclass
class SweepTable:
    parameter: str
    cells: list

    def means(self) -> dict:
        out = {}
        for v in dict.fromkeys(c.value for c in self.cells):
            accs = [c.accuracy for c in self.cells if c.value == v and c.accuracy is not None]
            out[v] = float(np.mean(accs)) if accs else None
        return out

    @property
    def failures(self) -> int:
        return sum(c.error is not None for c in self.cells)


SWEEP_PARAMETERS = {"M": "margin", "margin": "margin", "beta": "beta"}


def run_cell(base_config, parameter: str, value, seed: int, dataset, pairs, model=None,
             folds: int = 10, init=None) -> SweepCell:
    """Train one (value, seed) configuration and score heldout verification."""
    from .errors import MMLossError
    from .trainer import ModelConfig, forward_embed, train, warm_start_state

    model = model or ModelConfig()
    field_name = SWEEP_PARAMETERS.get(parameter)
    if field_name is None:
        raise ValueError(f"sweep parameter must be one of {sorted(SWEEP_PARAMETERS)}")
    cfg = dataclasses.replace(base_config, **{field_name: float(value)}, seed=int(seed))
    try:
        start = None
        if init is not None:
            start = warm_start_state(init, cfg, model, dataset.input_dim, dataset.num_classes)
        state, _ = train(cfg, dataset, model=model, init=start)
        emb = forward_embed(state.params, dataset.inputs)
        res = verification_accuracy(emb[pairs.a], emb[pairs.b], pairs.same, folds)
        return SweepCell(float(value), int(seed), res.accuracy, res.threshold, state=state)
    except (MMLossError, ValueError, FloatingPointError) as exc:
        return SweepCell(float(value), int(seed), None, None, f"{type(exc).__name__}: {exc}")


def sweep(base_config, parameter: str, values, seeds, dataset, pairs, model=None, folds: int = 10,
          init=None) -> SweepTable:
    """Every ``value x seed`` cell, each trained from scratch (or from ``init``).

    Cells are independent: re-running one in isolation reproduces its number.
    A failing cell is recorded with its error and the sweep continues.
    """
    if not list(values):
        raise ValueError("values must be non-empty")
    cells = [
        run_cell(base_config, parameter, v, s, dataset, pairs, model, folds, init)
        for v in values
        for s in seeds
    ]
    return SweepTable(parameter, cells)
