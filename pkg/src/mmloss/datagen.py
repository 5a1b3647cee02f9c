"""Seeded long-tailed synthetic data plus verification/identification protocols."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, ProtocolError
from .numeric import make_rng

SPLITS = ("train", "heldout")


@dataclass
class SyntheticSpec:
    num_classes: int = 20
    input_dim: int = 16
    class_centre_scale: float = 3.0
    noise_sigma: float = 1.0
    # class k receives a share proportional to (k + 1) ** -tail_exponent
    tail_exponent: float = 1.5
    min_per_class: int = 10
    total_samples: int = 2000
    heldout_fraction: float = 0.3
    seed: int = 0

    def validate(self):
        if self.num_classes < 2:
            raise DataError("num_classes must be >= 2")
        if self.input_dim < 1:
            raise DataError("input_dim must be >= 1")
        if self.min_per_class < 2:
            raise DataError("min_per_class must be >= 2")
        if self.tail_exponent < 0:
            raise DataError("tail_exponent must be >= 0")
        if self.noise_sigma < 0:
            raise DataError("noise_sigma must be >= 0")
        if not 0.0 <= self.heldout_fraction <= 1.0:
            raise DataError("heldout_fraction must lie in [0, 1]")
        if self.num_classes * self.min_per_class > self.total_samples:
            raise DataError(
                f"infeasible: {self.num_classes} classes x {self.min_per_class} minimum "
                f"> {self.total_samples} total samples"
            )


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    splits: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.splits = np.asarray(self.splits, dtype=object)
        n = self.labels.shape[0]
        if self.inputs.ndim != 2 or self.inputs.shape[0] != n or self.splits.shape != (n,):
            raise DataError("inputs, labels and splits must describe the same samples")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def indices(self, split: str | None = None) -> np.ndarray:
        if split is None:
            return np.arange(len(self))
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return np.flatnonzero(self.splits == split)

    def class_counts(self, split: str | None = None) -> np.ndarray:
        return np.bincount(self.labels[self.indices(split)], minlength=self.num_classes)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            np.array_equal(self.inputs, other.inputs)
            and np.array_equal(self.labels, other.labels)
            and list(self.splits) == list(other.splits)
        )


def class_counts(spec: SyntheticSpec) -> np.ndarray:
    """Per-class sample counts: the floor plus a largest-remainder share of the rest.

    Shares follow ``(k + 1) ** -s``; remainder ties go to the lower class
    index, so counts are non-increasing in ``k``.
    """
    spec.validate()
    k = spec.num_classes
    w = np.arange(1, k + 1, dtype=np.float64) ** (-spec.tail_exponent)
    spare = spec.total_samples - k * spec.min_per_class
    quota = spare * w / w.sum()
    base = np.floor(quota).astype(np.int64)
    left = spare - int(base.sum())
    frac = quota - base
    order = sorted(range(k), key=lambda j: (-frac[j], j))
    base[order[:left]] += 1
    return base + spec.min_per_class


def gen_longtail(spec: SyntheticSpec) -> Dataset:
    """Gaussian classes around means spread uniformly on a sphere."""
    counts = class_counts(spec)
    rng = make_rng(spec.seed, "data")
    means = rng.normal(size=(spec.num_classes, spec.input_dim))
    means *= spec.class_centre_scale / np.linalg.norm(means, axis=1, keepdims=True)
    inputs, labels, splits = [], [], []
    for j, n in enumerate(counts):
        inputs.append(means[j] + spec.noise_sigma * rng.normal(size=(n, spec.input_dim)))
        labels.append(np.full(n, j))
        held = int(math.floor(spec.heldout_fraction * n + 0.5))
        tags = np.array(["train"] * n, dtype=object)
        tags[rng.choice(n, size=held, replace=False)] = "heldout"
        splits.append(tags)
    return Dataset(np.vstack(inputs), np.concatenate(labels), np.concatenate(splits))


# --- verification pairs -------------------------------------------------------


@dataclass
class PairList:
    a: np.ndarray
    b: np.ndarray
    same: np.ndarray

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.int64)
        self.b = np.asarray(self.b, dtype=np.int64)
        self.same = np.asarray(self.same, dtype=bool)

    def __len__(self):
        return self.a.shape[0]

    def check(self, dataset: Dataset):
        n = len(dataset)
        for name, idx in (("a", self.a), ("b", self.b)):
            bad = np.flatnonzero((idx < 0) | (idx >= n))
            if bad.size:
                raise ProtocolError(f"pair {int(bad[0])}: index {name}={int(idx[bad[0]])} out of range")
        wrong = np.flatnonzero((dataset.labels[self.a] == dataset.labels[self.b]) != self.same)
        if wrong.size:
            raise ProtocolError(f"pair {int(wrong[0])}: same-identity flag disagrees with labels")

    def to_dict(self) -> dict:
        return {"a": self.a.tolist(), "b": self.b.tolist(), "same": self.same.tolist()}

    @classmethod
    def from_dict(cls, doc) -> "PairList":
        return cls(doc["a"], doc["b"], doc["same"])


def _sample_pairs(rng, total, wanted, draw, enumerate_all):
    if wanted == 0:
        return []
    if 3 * wanted <= total:
        seen, out = set(), []
        while len(out) < wanted:
            p = draw()
            if p is not None and p not in seen:
                seen.add(p)
                out.append(p)
        return out
    pool = enumerate_all()
    pick = rng.choice(len(pool), size=wanted, replace=False)
    return [pool[i] for i in pick]


def make_pairs(dataset: Dataset, split: str, num_pos: int, num_neg: int, seed: int) -> PairList:
    """Balanced same/different identity pairs drawn without replacement."""
    idx = dataset.indices(split)
    labels = dataset.labels[idx]
    groups = [idx[labels == j] for j in np.unique(labels)]
    sizes = np.array([g.size for g in groups], dtype=np.int64)
    total_pos = int(np.sum(sizes * (sizes - 1) // 2))
    total_neg = idx.size * (idx.size - 1) // 2 - total_pos
    if num_pos > total_pos or num_neg > total_neg:
        raise ProtocolError(
            f"{split} split offers {total_pos} positive and {total_neg} negative pairs; "
            f"requested {num_pos} and {num_neg}"
        )
    rng = make_rng(seed, "eval")
    pos_weights = sizes * (sizes - 1) / 2.0

    def draw_pos():
        g = groups[int(rng.choice(len(groups), p=pos_weights / pos_weights.sum()))]
        i, j = rng.choice(g.size, size=2, replace=False)
        return (int(min(g[i], g[j])), int(max(g[i], g[j])))

    def all_pos():
        return [(int(g[i]), int(g[j])) for g in groups for i in range(g.size) for j in range(i + 1, g.size)]

    def draw_neg():
        i, j = rng.choice(idx.size, size=2, replace=False)
        if labels[i] == labels[j]:
            return None
        return (int(min(idx[i], idx[j])), int(max(idx[i], idx[j])))

    def all_neg():
        return [
            (int(idx[i]), int(idx[j]))
            for i in range(idx.size)
            for j in range(i + 1, idx.size)
            if labels[i] != labels[j]
        ]

    pos = _sample_pairs(rng, total_pos, num_pos, draw_pos, all_pos)
    neg = _sample_pairs(rng, total_neg, num_neg, draw_neg, all_neg)
    pairs = [(a, b, True) for a, b in pos] + [(a, b, False) for a, b in neg]
    order = rng.permutation(len(pairs))
    pairs = [pairs[i] for i in order]
    return PairList([p[0] for p in pairs], [p[1] for p in pairs], [p[2] for p in pairs])


# --- identification protocol -----------------------------------------------------


@dataclass
class IdentProtocol:
    probes: np.ndarray
    gallery: np.ndarray
    distractors: np.ndarray

    def __post_init__(self):
        self.probes = np.asarray(self.probes, dtype=np.int64)
        self.gallery = np.asarray(self.gallery, dtype=np.int64)
        self.distractors = np.asarray(self.distractors, dtype=np.int64)
        if self.probes.shape != self.gallery.shape:
            raise ProtocolError("every probe needs exactly one gallery mate")

    def audit(self, dataset: Dataset) -> list[str]:
        """Return a list of violated protocol invariants (empty when sound)."""
        problems = []
        lab = dataset.labels
        probe_ids = lab[self.probes]
        if len(set(probe_ids.tolist())) != probe_ids.size:
            problems.append("probe identities are not distinct")
        if not np.array_equal(lab[self.gallery], probe_ids):
            problems.append("gallery mate identity differs from probe identity")
        if np.intersect1d(self.probes, self.gallery).size:
            problems.append("a sample is used as both probe and gallery")
        if np.isin(lab[self.distractors], probe_ids).any():
            problems.append("a distractor shares an identity with a probe")
        if np.unique(self.distractors).size != self.distractors.size:
            problems.append("duplicate distractors")
        return problems

    def to_dict(self) -> dict:
        return {
            "probes": self.probes.tolist(),
            "gallery": self.gallery.tolist(),
            "distractors": self.distractors.tolist(),
        }

    @classmethod
    def from_dict(cls, doc) -> "IdentProtocol":
        return cls(doc["probes"], doc["gallery"], doc["distractors"])


def make_ident_protocol(dataset: Dataset, num_probe_ids: int, num_distractors: int, seed: int,
                        split: str = "heldout") -> IdentProtocol:
    idx = dataset.indices(split)
    labels = dataset.labels[idx]
    ids, counts = np.unique(labels, return_counts=True)
    eligible = ids[counts >= 2]
    if eligible.size < num_probe_ids:
        raise ProtocolError(
            f"{split} split has {eligible.size} identities with >= 2 samples; {num_probe_ids} requested"
        )
    rng = make_rng(seed, "eval")
    chosen = np.sort(rng.choice(eligible, size=num_probe_ids, replace=False))
    probes, gallery = [], []
    for j in chosen:
        members = idx[labels == j]
        p, g = rng.choice(members.size, size=2, replace=False)
        probes.append(members[p])
        gallery.append(members[g])
    pool = idx[~np.isin(labels, chosen)]
    if pool.size < num_distractors:
        raise ProtocolError(
            f"only {pool.size} samples outside the probe identities; {num_distractors} distractors requested"
        )
    distractors = np.sort(rng.choice(pool, size=num_distractors, replace=False))
    return IdentProtocol(probes, gallery, distractors)


# --- JSON-Lines I/O --------------------------------------------------------------


def save_dataset(dataset: Dataset, path) -> None:
    lines = []
    for x, y, s in zip(dataset.inputs, dataset.labels, dataset.splits):
        lines.append(json.dumps({"label": int(y), "x": [float(v) for v in x], "split": str(s)}))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def load_dataset(path) -> Dataset:
    inputs, labels, splits = [], [], []
    dim = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed record ({exc.msg})") from None
            if not isinstance(rec, dict) or set(rec) != {"label", "x", "split"}:
                raise DataError(f"{path}:{lineno}: record must have exactly the keys label, x, split")
            label, x, split = rec["label"], rec["x"], rec["split"]
            if isinstance(label, bool) or not isinstance(label, int) or label < 0:
                raise DataError(f"{path}:{lineno}: label must be a non-negative integer")
            if not isinstance(x, list) or not x or not all(
                isinstance(v, (int, float)) and not isinstance(v, bool) for v in x
            ):
                raise DataError(f"{path}:{lineno}: x must be a non-empty list of numbers")
            if dim is None:
                dim = len(x)
            elif len(x) != dim:
                raise DataError(f"{path}:{lineno}: x has {len(x)} values, expected {dim}")
            if split not in SPLITS:
                raise DataError(f"{path}:{lineno}: split must be one of {SPLITS}")
            inputs.append(x)
            labels.append(label)
            splits.append(split)
    if not labels:
        raise DataError(f"{path}: dataset is empty")
    return Dataset(np.array(inputs, dtype=np.float64), np.array(labels), np.array(splits, dtype=object))


def spec_dict(spec: SyntheticSpec) -> dict:
    return asdict(spec)
