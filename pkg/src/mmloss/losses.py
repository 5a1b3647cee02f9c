"""Loss values and hand-derived gradients.

Every loss returns a :class:`LossBundle`. Gradients are analytic; the test
suite checks each of them against central finite differences.

Conventions shared by all losses:

* ``features`` is ``n x d``, ``labels`` is a length-``n`` integer array.
* Squared Euclidean distances throughout, so margins are in squared units.
* At an exact hinge kink the inactive (zero) branch is taken, and selection
  ties resolve to the first index in enumeration order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import LabelError, ShapeError
from .numeric import as_matrix, l2_normalize_rows, log_softmax, pairwise_sq_dist, stable_softmax

COUPLING_MODES = ("detached", "coupled")
PAIR_SCOPES = ("batch_classes", "all_classes")


@dataclass
class ClassifierHead:
    """Final fully connected layer: ``logits = features @ weights + biases``.

    ``weights`` is ``d x K`` so column ``j`` is the class-``j`` weight vector.
    """

    weights: np.ndarray
    biases: np.ndarray

    def __post_init__(self):
        self.weights = as_matrix(self.weights, "weights")
        self.biases = np.asarray(self.biases, dtype=np.float64).reshape(-1)
        if self.weights.shape[1] != self.biases.shape[0]:
            raise ShapeError(
                f"weights has {self.weights.shape[1]} classes but biases has {self.biases.shape[0]}"
            )
        if self.num_classes < 2:
            raise ShapeError("classifier head needs at least 2 classes")

    @property
    def num_classes(self) -> int:
        return self.weights.shape[1]

    @property
    def dim(self) -> int:
        return self.weights.shape[0]

    def copy(self) -> "ClassifierHead":
        return ClassifierHead(self.weights.copy(), self.biases.copy())


@dataclass
class MmlConfig:
    margin: float = 0.0
    coupling_mode: str = "coupled"
    pair_scope: str = "batch_classes"

    def __post_init__(self):
        if not self.margin >= 0:
            raise ValueError(f"margin must be >= 0, got {self.margin}")
        if self.coupling_mode not in COUPLING_MODES:
            raise ValueError(f"coupling_mode must be one of {COUPLING_MODES}")
        if self.pair_scope not in PAIR_SCOPES:
            raise ValueError(f"pair_scope must be one of {PAIR_SCOPES}")


@dataclass
class LossBundle:
    value: float
    grad_features: np.ndarray
    grad_weights: np.ndarray | None = None
    grad_biases: np.ndarray | None = None
    grad_centres: np.ndarray | None = None
    # named sub-terms (e.g. softmax/centre/mml for the joint objective)
    components: dict = field(default_factory=dict)
    # compact encoding of every discrete choice (active hinges, selections);
    # two evaluations with equal ``branch`` lie on the same smooth piece
    branch: bytes = b""
    diagnostics: dict = field(default_factory=dict)


def _check_batch(features, labels, num_classes=None):
    f = as_matrix(features, "features")
    y = np.asarray(labels)
    if y.ndim != 1 or y.shape[0] != f.shape[0]:
        raise ShapeError(f"labels shape {y.shape} does not match {f.shape[0]} features")
    if y.size and not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise LabelError("labels must be integers")
        y = y.astype(np.int64)
    y = y.astype(np.int64, copy=False)
    if f.shape[0] < 1:
        raise ShapeError("empty batch")
    if num_classes is not None:
        bad = np.flatnonzero((y < 0) | (y >= num_classes))
        if bad.size:
            i = int(bad[0])
            raise LabelError(f"label {int(y[i])} at position {i} outside [0, {num_classes})")
    return f, y


def _check_centres(centres, dim):
    c = as_matrix(centres, "centres")
    if c.shape[1] != dim:
        raise ShapeError(f"centres have dim {c.shape[1]}, features have dim {dim}")
    if not np.isfinite(c).all():
        raise ValueError("centres must be finite")
    return c


def softmax_ce(features, labels, head: ClassifierHead) -> LossBundle:
    """Mean cross-entropy of a linear softmax classifier."""
    f, y = _check_batch(features, labels, head.num_classes)
    if f.shape[1] != head.dim:
        raise ShapeError(f"features have dim {f.shape[1]}, head expects {head.dim}")
    n = f.shape[0]
    logits = f @ head.weights + head.biases
    logp = log_softmax(logits)
    rows = np.arange(n)
    value = -float(logp[rows, y].sum()) / n

    delta = stable_softmax(logits)
    delta[rows, y] -= 1.0
    delta /= n
    return LossBundle(
        value=value,
        grad_features=delta @ head.weights.T,
        grad_weights=f.T @ delta,
        grad_biases=delta.sum(axis=0),
    )


def centre_loss(features, labels, centres) -> LossBundle:
    """Half the summed squared distance of each feature to its class centre.

    No ``1/N`` factor; the joint objective's weight absorbs the batch scale.
    """
    c0 = as_matrix(centres, "centres")
    f, y = _check_batch(features, labels, c0.shape[0])
    c = _check_centres(c0, f.shape[1])
    diff = f - c[y]
    value = 0.5 * float(np.sum(diff * diff))
    grad_centres = np.zeros_like(c)
    np.add.at(grad_centres, y, -diff)
    return LossBundle(value=value, grad_features=diff, grad_centres=grad_centres)


def _seq_sum(values) -> float:
    # left-to-right accumulation; cumsum never reorders its additions
    v = np.asarray(values, dtype=np.float64)
    return float(np.cumsum(v)[-1]) if v.size else 0.0


def mml_scope(labels, num_classes: int, pair_scope: str) -> np.ndarray:
    if pair_scope == "batch_classes":
        return np.unique(np.asarray(labels, dtype=np.int64))
    if pair_scope == "all_classes":
        return np.arange(num_classes)
    raise ValueError(f"unknown pair_scope {pair_scope!r}")


def mml(features, labels, centres, cfg: MmlConfig) -> LossBundle:
    """Minimum margin loss over class-centre pairs.

    Each unordered pair of in-scope centres closer than ``cfg.margin`` (in
    squared distance) contributes ``margin - dist``. In coupled mode the
    centre gradient is routed to the features of that class, scaled by
    ``1 / n_class``; in detached mode the feature gradient is zero.
    """
    c0 = as_matrix(centres, "centres")
    f, y = _check_batch(features, labels, c0.shape[0])
    c = _check_centres(c0, f.shape[1])
    scope = mml_scope(y, c.shape[0], cfg.pair_scope)

    grad_centres = np.zeros_like(c)
    grad_features = np.zeros_like(f)
    if scope.size < 2:
        return LossBundle(0.0, grad_features, grad_centres=grad_centres)

    sub = c[scope]
    dist = pairwise_sq_dist(sub, sub)
    ia, ib = np.triu_indices(scope.size, 1)
    gaps = cfg.margin - dist[ia, ib]
    active = gaps > 0.0
    value = _seq_sum(gaps[active])
    for p in np.flatnonzero(active):
        a, b = scope[ia[p]], scope[ib[p]]
        diff = c[a] - c[b]
        grad_centres[a] += -2.0 * diff
        grad_centres[b] += 2.0 * diff

    if cfg.coupling_mode == "coupled":
        counts = np.bincount(y, minlength=c.shape[0])
        grad_features = grad_centres[y] / counts[y][:, None]

    return LossBundle(
        value=value,
        grad_features=grad_features,
        grad_centres=grad_centres,
        branch=np.packbits(active).tobytes(),
        diagnostics={"active_pairs": int(active.sum()), "scope_size": int(scope.size)},
    )


def batch_shifted_centres(features, labels, centres, anchor_features) -> np.ndarray:
    """Centres moved by the shift of each class's batch mean away from an anchor batch.

    At ``features == anchor_features`` this returns ``centres`` unchanged, and
    its Jacobian w.r.t. feature ``i`` is ``I / n_{y_i}`` on row ``y_i``. The
    coupled MML feature gradient is exactly the gradient of
    ``mml(centres=batch_shifted_centres(...))``, which makes it checkable by
    finite differences.
    """
    f = as_matrix(features, "features")
    f0 = as_matrix(anchor_features, "anchor_features")
    y = np.asarray(labels, dtype=np.int64)
    out = as_matrix(centres, "centres").copy()
    for j in np.unique(y):
        mask = y == j
        out[j] += f[mask].mean(axis=0) - f0[mask].mean(axis=0)
    return out


def marginal_loss(features, labels, theta: float, xi: float) -> LossBundle:
    """Pairwise hinge on normalized features, averaged over ordered pairs."""
    f, y = _check_batch(features, labels)
    n = f.shape[0]
    if n < 2:
        raise ShapeError("marginal loss needs at least 2 samples")
    fhat = l2_normalize_rows(f)
    norms = np.sqrt(np.sum(f * f, axis=1))
    dist = pairwise_sq_dist(fhat, fhat)
    sign = np.where(y[:, None] == y[None, :], 1.0, -1.0)
    hinge = xi - sign * (theta - dist)
    active = hinge > 0.0
    np.fill_diagonal(active, False)
    scale = 1.0 / (n * n - n)
    value = scale * float(hinge[active].sum())

    g = np.where(active, sign, 0.0) * scale
    # both orderings (i, j) and (j, i) hit D_ij
    grad_hat = 4.0 * (g.sum(axis=1)[:, None] * fhat - g @ fhat)
    radial = np.sum(grad_hat * fhat, axis=1)
    grad_features = (grad_hat - radial[:, None] * fhat) / norms[:, None]
    return LossBundle(value=value, grad_features=grad_features, branch=np.packbits(active).tobytes())


def range_loss(features, labels, margin: float, alpha_r: float, beta_r: float, top_n: int = 2) -> LossBundle:
    """Range loss: harmonic mean of the largest intra-class distances plus a
    hinge on the nearest pair of batch class means."""
    f, y = _check_batch(features, labels)
    if top_n < 1:
        raise ValueError("top_n must be >= 1")
    grad = np.zeros_like(f)
    classes = np.unique(y)
    members = [np.flatnonzero(y == j) for j in classes]
    branch = []

    intra_total = 0.0
    skipped = []
    intra_terms = {}
    for j, idx in zip(classes, members):
        if idx.size < 2:
            skipped.append(int(j))
            continue
        pa, pb = np.triu_indices(idx.size, 1)
        sub = f[idx]
        d = pairwise_sq_dist(sub, sub)[pa, pb]
        order = sorted(range(d.size), key=lambda k: (-d[k], k))[: min(top_n, d.size)]
        branch.extend(order)
        sel = d[order]
        if np.any(sel == 0.0):
            # harmonic mean with a zero distance is 0, and so is its gradient
            intra_terms[int(j)] = 0.0
            continue
        inv_sum = float(np.sum(1.0 / sel))
        t = len(order)
        term = t / inv_sum
        intra_terms[int(j)] = term
        intra_total += term
        for k, dk in zip(order, sel):
            coef = alpha_r * t / (inv_sum * inv_sum * dk * dk)
            diff = sub[pa[k]] - sub[pb[k]]
            grad[idx[pa[k]]] += coef * 2.0 * diff
            grad[idx[pb[k]]] -= coef * 2.0 * diff

    inter = 0.0
    nearest = None
    if classes.size >= 2:
        means = np.stack([f[idx].mean(axis=0) for idx in members])
        ia, ib = np.triu_indices(classes.size, 1)
        d = pairwise_sq_dist(means, means)[ia, ib]
        p = int(np.argmin(d))
        a, b = ia[p], ib[p]
        nearest = (int(classes[a]), int(classes[b]), float(d[p]))
        gap = margin - d[p]
        branch.extend([p, int(gap > 0.0)])
        if gap > 0.0:
            inter = float(gap)
            diff = means[a] - means[b]
            grad[members[a]] += beta_r * -2.0 * diff / members[a].size
            grad[members[b]] += beta_r * 2.0 * diff / members[b].size

    return LossBundle(
        value=alpha_r * intra_total + beta_r * inter,
        grad_features=grad,
        components={"intra": intra_total, "inter": inter},
        branch=np.asarray(branch, dtype=np.int64).tobytes(),
        diagnostics={"skipped_classes": skipped, "intra_terms": intra_terms, "nearest_pair": nearest},
    )


def total_loss(features, labels, head: ClassifierHead, centres, alpha: float, beta: float,
               cfg: MmlConfig) -> LossBundle:
    """Softmax + alpha * centre + beta * MML.

    Classifier gradients come from the softmax term only. Terms whose weight
    is zero (or, for MML, with no active pair) are skipped rather than added
    as zeros, so reduced objectives are bit-identical to their simpler forms.
    """
    s = softmax_ce(features, labels, head)
    c = centre_loss(features, labels, centres)
    m = mml(features, labels, centres, cfg)

    value = s.value
    grad = s.grad_features
    if alpha != 0.0:
        value = value + alpha * c.value
        grad = grad + alpha * c.grad_features
    if beta != 0.0 and m.diagnostics.get("active_pairs", 0) > 0:
        value = value + beta * m.value
        grad = grad + beta * m.grad_features
    return LossBundle(
        value=value,
        grad_features=grad,
        grad_weights=s.grad_weights,
        grad_biases=s.grad_biases,
        components={"softmax": s.value, "centre": c.value, "mml": m.value},
        branch=m.branch,
        diagnostics=m.diagnostics,
    )


def surrogate_objective(features, labels, head: ClassifierHead, centres, anchor_features,
                        alpha: float, beta: float, cfg: MmlConfig) -> tuple[float, bytes]:
    """Scalar function whose exact gradient is :func:`total_loss`'s ``grad_features``.

    The MML term is evaluated at :func:`batch_shifted_centres` (in coupled
    mode) while the centre term keeps the stored centres. Intended for
    finite-difference checking; returns ``(value, branch)``.
    """
    value = softmax_ce(features, labels, head).value
    if alpha != 0.0:
        value += alpha * centre_loss(features, labels, centres).value
    mml_centres = centres
    if cfg.coupling_mode == "coupled":
        mml_centres = batch_shifted_centres(features, labels, centres, anchor_features)
    m = mml(features, labels, mml_centres, cfg)
    if beta != 0.0:
        value += beta * m.value
    return value, m.branch
