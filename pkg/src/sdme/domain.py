"""Point classifications, apparent proportions and annotator performance."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

log = logging.getLogger(__name__)

__all__ = [
    "ClassificationSet",
    "ConfusionCounts",
    "PerformanceMeasures",
    "BetaPrior",
    "apparent_proportion",
    "apparent_table",
    "confusion_counts",
    "all_confusion_counts",
    "performance_measures",
    "exclude_low_accuracy",
    "moment_match_beta",
    "beta_from_mean_precision",
    "subject_priors",
]

MISSING = -1


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class ClassificationSet:
    """Binary point elicitations ``z`` for (subject, image, point).

    ``true_label`` uses ``-1`` where the expert label is not available.
    """

    subject: np.ndarray
    image: np.ndarray
    point: np.ndarray
    z: np.ndarray
    true_label: np.ndarray | None = None

    def __post_init__(self):
        cols = {}
        for name in ("subject", "image", "point", "z"):
            cols[name] = np.asarray(getattr(self, name), dtype=np.int64)
            object.__setattr__(self, name, cols[name])
        n = len(self.z)
        if any(len(c) != n for c in cols.values()):
            raise DataError("classification columns differ in length")
        tl = self.true_label
        tl = np.full(n, MISSING, dtype=np.int64) if tl is None else np.asarray(tl, dtype=np.int64)
        if len(tl) != n:
            raise DataError("true_label length mismatch")
        object.__setattr__(self, "true_label", tl)
        if np.any((self.z != 0) & (self.z != 1)):
            raise DataError("z must be 0 or 1")
        if np.any((tl != 0) & (tl != 1) & (tl != MISSING)):
            raise DataError("true_label must be 0, 1 or missing")
        key = np.stack([self.subject, self.image, self.point], axis=1)
        if n and len(np.unique(key, axis=0)) != n:
            raise DataError("(subject, image, point) triples must be unique")

    def __len__(self) -> int:
        return len(self.z)

    @property
    def subjects(self) -> np.ndarray:
        return np.unique(self.subject)

    @property
    def images(self) -> np.ndarray:
        return np.unique(self.image)

    def select(self, mask: np.ndarray) -> "ClassificationSet":
        return ClassificationSet(
            self.subject[mask], self.image[mask], self.point[mask], self.z[mask], self.true_label[mask]
        )

    def for_subjects(self, keep: Iterable[int]) -> "ClassificationSet":
        return self.select(np.isin(self.subject, list(keep)))


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)


@dataclass(frozen=True)
class BetaPrior:
    alpha: float
    beta: float
    source: str = "moments"

    @property
    def mean(self) -> float:
        return self.alpha / (self.alpha + self.beta)

    def as_dict(self) -> dict:
        return {"alpha": self.alpha, "beta": self.beta, "source": self.source}


@dataclass(frozen=True)
class PerformanceMeasures:
    """Sensitivity, specificity and accuracy; ``None`` marks an undefined ratio."""

    se: float | None
    sp: float | None
    acc: float | None
    counts: ConfusionCounts = field(default_factory=ConfusionCounts)

    def as_dict(self) -> dict:
        c = self.counts
        return {"se": self.se, "sp": self.sp, "acc": self.acc, "tp": c.tp, "tn": c.tn, "fp": c.fp, "fn": c.fn}


def apparent_proportion(z: Iterable[int], q: int, point: Iterable[int] | None = None) -> float:
    """Fraction of the ``q`` points of one (subject, image) labelled positive.

    When ``point`` ids are supplied they must cover ``1..q`` exactly.
    """
    z = np.asarray(list(z), dtype=np.int64)
    if point is not None:
        pts = np.asarray(list(point), dtype=np.int64)
        absent = sorted(set(range(1, q + 1)) - set(pts.tolist()))
        if absent or len(pts) != q:
            raise DataError(f"expected {q} points, missing point ids {absent}")
    elif len(z) != q:
        raise DataError(f"expected {q} points, got {len(z)}")
    return float(z.sum()) / q


def apparent_table(cs: ClassificationSet, q: int | None = None):
    """Per (subject, image) positive counts.

    Returns ``(subject, image, k, q)`` arrays where ``k`` is the number of
    points labelled 1. If ``q`` is given every pair must have exactly ``q``
    points.
    """
    key = np.stack([cs.subject, cs.image], axis=1)
    pairs, inv, npts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    inv = inv.ravel()
    k = np.bincount(inv, weights=cs.z, minlength=len(pairs)).astype(np.int64)
    if q is not None:
        bad = np.flatnonzero(npts != q)
        if len(bad):
            i, j = pairs[bad[0]]
            have = set(cs.point[(cs.subject == i) & (cs.image == j)].tolist())
            absent = sorted(set(range(1, q + 1)) - have)
            raise DataError(
                f"{len(bad)} (subject, image) pairs do not have {q} points; "
                f"e.g. subject {i} image {j} missing point ids {absent}"
            )
        npts = np.full(len(pairs), q, dtype=np.int64)
    return pairs[:, 0], pairs[:, 1], k, npts


def _counts_from_arrays(z: np.ndarray, t: np.ndarray) -> ConfusionCounts:
    return ConfusionCounts(
        tp=int(np.sum((z == 1) & (t == 1))),
        tn=int(np.sum((z == 0) & (t == 0))),
        fp=int(np.sum((z == 1) & (t == 0))),
        fn=int(np.sum((z == 0) & (t == 1))),
    )


def confusion_counts(cs: ClassificationSet, subject: int, images: Iterable[int] | None = None) -> ConfusionCounts:
    mask = (cs.subject == subject) & (cs.true_label != MISSING)
    if images is not None:
        mask &= np.isin(cs.image, list(images))
    if not np.any(mask):
        raise DataError(f"subject {subject} has no labelled points; cannot score")
    return _counts_from_arrays(cs.z[mask], cs.true_label[mask])


def all_confusion_counts(cs: ClassificationSet, images: Iterable[int] | None = None) -> dict[int, ConfusionCounts]:
    """Counts for every subject; subjects without labelled points get zeros."""
    mask = cs.true_label != MISSING
    if images is not None:
        mask &= np.isin(cs.image, list(images))
    out = {}
    for s in cs.subjects:
        m = mask & (cs.subject == s)
        out[int(s)] = _counts_from_arrays(cs.z[m], cs.true_label[m])
    return out


def _ratio(num: int, den: int) -> float | None:
    return num / den if den > 0 else None


def performance_measures(counts: ConfusionCounts) -> PerformanceMeasures:
    c = counts
    return PerformanceMeasures(
        se=_ratio(c.tp, c.tp + c.fn),
        sp=_ratio(c.tn, c.tn + c.fp),
        acc=_ratio(c.tp + c.tn, c.total),
        counts=c,
    )


def exclude_low_accuracy(measures: Mapping[int, PerformanceMeasures], threshold: float = 0.40) -> set[int]:
    """Subjects whose training accuracy is at least ``threshold``.

    Subjects with undefined accuracy cannot be screened and are kept.
    """
    keep = {s for s, m in measures.items() if m.acc is None or m.acc >= threshold}
    if measures and not keep:
        warnings.warn(f"all {len(measures)} subjects have accuracy below {threshold}", stacklevel=2)
    dropped = sorted(set(measures) - keep)
    if dropped:
        log.info("excluded %d subjects below accuracy %.2f: %s", len(dropped), threshold, dropped)
    return keep


def beta_from_mean_precision(mean: float, precision: float) -> tuple[float, float]:
    return mean * precision, (1.0 - mean) * precision


def moment_match_beta(mean: float, variance: float, fallback_precision: float = 20.0) -> BetaPrior:
    """Beta shapes with the given mean and variance.

    If the variance is not strictly below ``mean * (1 - mean)`` the prior falls
    back to mean/precision form and is flagged via ``source``.
    """
    if not 0.0 < mean < 1.0:
        raise DataError(f"mean must lie in (0, 1), got {mean}")
    bound = mean * (1.0 - mean)
    if not (0.0 < variance < bound):
        a, b = beta_from_mean_precision(mean, fallback_precision)
        return BetaPrior(a, b, "fallback_precision")
    nu = bound / variance - 1.0
    return BetaPrior(mean * nu, (1.0 - mean) * nu, "moments")


def _jeffreys_moments(hits: int, n: int) -> tuple[float, float]:
    # moments of Beta(hits + 1/2, n - hits + 1/2); finite even at hits in {0, n}
    m = (hits + 0.5) / (n + 1.0)
    return m, m * (1.0 - m) / (n + 2.0)


def subject_priors(
    counts: Mapping[int, ConfusionCounts],
    measure: str = "se",
    fallback_precision: float = 20.0,
) -> dict[int, BetaPrior]:
    """Per-subject beta priors for ``se``, ``sp`` or ``acc`` from training counts.

    Each subject's point-level proportion is summarised by the mean and
    variance of its Jeffreys posterior and moment matched. Subjects with no
    relevant points get a population prior matched to the spread of the other
    subjects' estimates.
    """
    def hits_n(c: ConfusionCounts) -> tuple[int, int]:
        if measure == "se":
            return c.tp, c.tp + c.fn
        if measure == "sp":
            return c.tn, c.tn + c.fp
        if measure == "acc":
            return c.tp + c.tn, c.total
        raise ValueError(f"unknown measure {measure!r}")

    out: dict[int, BetaPrior] = {}
    point_estimates = []
    for s, c in counts.items():
        h, n = hits_n(c)
        if n > 0:
            m, v = _jeffreys_moments(h, n)
            out[s] = moment_match_beta(m, v, fallback_precision)
            point_estimates.append(h / n)
    missing = [s for s in counts if s not in out]
    if missing:
        if len(point_estimates) >= 2:
            est = np.clip(np.asarray(point_estimates), 1e-3, 1 - 1e-3)
            pop = moment_match_beta(float(est.mean()), float(est.var(ddof=1)), fallback_precision)
        elif point_estimates:
            pop = BetaPrior(*beta_from_mean_precision(min(max(point_estimates[0], 1e-3), 1 - 1e-3), fallback_precision), "fallback_precision")
        else:
            pop = BetaPrior(1.0, 1.0, "uniform")
        for s in missing:
            out[s] = BetaPrior(pop.alpha, pop.beta, "population:" + pop.source)
    return {s: out[s] for s in counts}


def nan_if_none(x: float | None) -> float:
    return math.nan if x is None else float(x)
