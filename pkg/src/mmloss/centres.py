"""Class-centre bank and its batch update rule.

Centres move by the rule ``c <- c - gamma * delta`` where ``delta_j`` is the
summed offset of class ``j``'s batch samples from the centre, divided by
``1 + n_j``. They are never updated from loss gradients directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import LabelError, ShapeError
from .numeric import as_matrix, make_rng, pairwise_sq_dist


@dataclass(frozen=True)
class CentreBank:
    centres: np.ndarray
    gamma: float = 0.5
    update_count: int = 0

    def __post_init__(self):
        c = as_matrix(self.centres, "centres")
        if not np.isfinite(c).all():
            raise ValueError("centres must be finite")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        object.__setattr__(self, "centres", c)

    @property
    def num_classes(self) -> int:
        return self.centres.shape[0]

    @property
    def dim(self) -> int:
        return self.centres.shape[1]

    def to_dict(self) -> dict:
        return {"centres": self.centres, "gamma": self.gamma, "update_count": self.update_count}


def init_centres(num_classes: int, dim: int, mode: str = "zeros", sigma: float = 1.0,
                 seed: int | None = None, gamma: float = 0.5) -> CentreBank:
    if num_classes < 2:
        raise ValueError(f"need at least 2 classes, got {num_classes}")
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    if mode == "zeros":
        return CentreBank(np.zeros((num_classes, dim)), gamma)
    if mode == "seeded_gaussian":
        if seed is None:
            raise ValueError("seeded_gaussian mode requires a seed")
        rng = make_rng(seed, "init")
        return CentreBank(rng.normal(0.0, sigma, size=(num_classes, dim)), gamma)
    raise ValueError(f"unknown init mode {mode!r}")


def centre_delta(bank: CentreBank, features, labels) -> np.ndarray:
    f = as_matrix(features, "features")
    y = np.asarray(labels, dtype=np.int64)
    if f.shape[1] != bank.dim:
        raise ShapeError(f"features have dim {f.shape[1]}, bank has dim {bank.dim}")
    if y.shape != (f.shape[0],):
        raise ShapeError("labels must be a vector matching the number of features")
    bad = np.flatnonzero((y < 0) | (y >= bank.num_classes))
    if bad.size:
        raise LabelError(f"label {int(y[bad[0]])} at position {int(bad[0])} outside [0, {bank.num_classes})")
    delta = np.zeros_like(bank.centres)
    for j in np.unique(y):
        mask = y == j
        offsets = bank.centres[j] - f[mask]
        delta[j] = offsets.sum(axis=0) / (1.0 + mask.sum())
    return delta


def apply_update(bank: CentreBank, delta) -> CentreBank:
    d = as_matrix(delta, "delta")
    if d.shape != bank.centres.shape:
        raise ShapeError(f"delta shape {d.shape} != centres shape {bank.centres.shape}")
    return CentreBank(bank.centres - bank.gamma * d, bank.gamma, bank.update_count + 1)


def nearest_centre_distances(centres) -> np.ndarray:
    """Squared distance from each centre to its nearest other centre.

    Accepts a :class:`CentreBank` or a raw ``K x d`` matrix.
    """
    c = centres.centres if isinstance(centres, CentreBank) else as_matrix(centres, "centres")
    if c.shape[0] < 2:
        raise ValueError("need at least 2 centres")
    dist = pairwise_sq_dist(c, c)
    np.fill_diagonal(dist, np.inf)
    return dist.min(axis=1)


def violating_pairs(centres, margin: float) -> list[tuple[int, int, float]]:
    """Unordered centre pairs with squared distance strictly below ``margin``,
    sorted by distance then index."""
    if margin < 0:
        raise ValueError("margin must be >= 0")
    c = centres.centres if isinstance(centres, CentreBank) else as_matrix(centres, "centres")
    dist = pairwise_sq_dist(c, c)
    ia, ib = np.triu_indices(c.shape[0], 1)
    d = dist[ia, ib]
    hit = np.flatnonzero(d < margin)
    pairs = [(int(ia[p]), int(ib[p]), float(d[p])) for p in hit]
    pairs.sort(key=lambda t: (t[2], t[0], t[1]))
    return pairs


def inter_centre_sq_dists(centres) -> np.ndarray:
    """All unordered-pair squared distances, in ``(a, b), a < b`` order."""
    c = centres.centres if isinstance(centres, CentreBank) else as_matrix(centres, "centres")
    ia, ib = np.triu_indices(c.shape[0], 1)
    return pairwise_sq_dist(c, c)[ia, ib]
