"""Silo datasets: synthetic generation, stratified splitting and CSV I/O.

CSV layout (one admission per row)::

    silo_id,label,features
    h001,1,3;17;902
    h002,0,

``features`` lists the indices of active binary features, ascending,
separated by semicolons; an empty field is an all-zero row.
"""

from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .isolation import record_access
from .training import derive_seed

logger = logging.getLogger(__name__)

TRAIN, VAL, TEST = 0, 1, 2
SPLIT_NAMES = {"train": TRAIN, "val": VAL, "test": TEST}
DEFAULT_RATIOS = (0.70, 0.10, 0.20)
CSV_HEADER = ["silo_id", "label", "features"]


class ParseError(ValueError):
    def __init__(self, path, line, message):
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line


class SiloDataset:
    """One silo's private samples.

    Raw ``features``/``labels`` reads go through :func:`record_access` so a
    running :class:`~fedsilo.isolation.IsolationAudit` can see who touched
    what. Counts and split tags are metadata and are not audited.
    """

    def __init__(self, silo_id: str, features, labels, split=None,
                 split_warning: str | None = None):
        features = np.asarray(features)
        labels = np.asarray(labels)
        if features.ndim != 2:
            raise ValueError("features must be a 2-D matrix")
        if labels.shape != (features.shape[0],):
            raise ValueError("need exactly one label per feature row")
        if features.size and not np.isin(features, (0, 1)).all():
            raise ValueError("features must be binary")
        if labels.size and not np.isin(labels, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")
        self.silo_id = str(silo_id)
        self._features = features.astype(np.uint8, copy=False)
        self._labels = labels.astype(np.int8, copy=False)
        self.split = None if split is None else np.asarray(split, dtype=np.int8)
        if self.split is not None and self.split.shape != labels.shape:
            raise ValueError("split tags must match the number of samples")
        self.split_warning = split_warning

    def __repr__(self):
        return (f"SiloDataset({self.silo_id!r}, n={self.n_samples}, "
                f"dim={self.feature_dim}, split={'yes' if self.split is not None else 'no'})")

    @property
    def features(self) -> np.ndarray:
        record_access(self.silo_id)
        return self._features

    @property
    def labels(self) -> np.ndarray:
        record_access(self.silo_id)
        return self._labels

    @property
    def n_samples(self) -> int:
        return self._labels.shape[0]

    @property
    def feature_dim(self) -> int:
        return self._features.shape[1]

    def count(self, part: str = "train") -> int:
        if self.split is None:
            return self.n_samples if part == "train" else 0
        return int(np.sum(self.split == SPLIT_NAMES[part]))

    @property
    def n_train(self) -> int:
        return self.count("train")

    def part(self, part: str) -> tuple[np.ndarray, np.ndarray]:
        """Features and labels of one partition; unsplit data is all train."""
        X, y = self.features, self.labels
        if self.split is None:
            if part != "train":
                return X[:0], y[:0]
            return X, y
        mask = self.split == SPLIT_NAMES[part]
        return X[mask], y[mask]

    def train_features(self) -> np.ndarray:
        return self.part("train")[0]

    def train_labels(self) -> np.ndarray:
        return self.part("train")[1]

    def with_split(self, split, split_warning=None) -> "SiloDataset":
        return SiloDataset(self.silo_id, self._features, self._labels, split,
                           split_warning)

    def equals(self, other: "SiloDataset") -> bool:
        return (self.silo_id == other.silo_id
                and np.array_equal(self._features, other._features)
                and np.array_equal(self._labels, other._labels))


def fingerprint(silos: Sequence[SiloDataset]) -> str:
    """Content hash over ids, features and labels in ascending silo-id order."""
    h = hashlib.sha256()
    for s in sorted(silos, key=lambda s: s.silo_id):
        h.update(s.silo_id.encode())
        h.update(np.asarray(s._features.shape, dtype="<i8").tobytes())
        h.update(np.ascontiguousarray(s._features).tobytes())
        h.update(np.ascontiguousarray(s._labels).tobytes())
    return h.hexdigest()


# -- synthetic generation ---------------------------------------------------


@dataclass
class GenSpec:
    n_silos: int = 58
    feature_dim: int = 1400
    samples_per_silo: int | list[int] | None = None
    heterogeneity: float = 0.5
    target_prevalence: float = 0.055
    seed: int = 0
    # expected active features per row (cohort average ~13 drugs in 24h)
    mean_active: float = 13.0
    # max/min ratio of the log-uniform per-feature activation rates
    rate_spread: float = 50.0
    # std of the label logit under the generating feature rates
    signal_strength: float = 2.0
    # number of latent feature combinations the label logit depends on
    private_rank: int = 4
    # Dirichlet concentration of each silo's weighting of those combinations
    group_concentration: float = 0.5
    # std of silo base-rate offsets on the logit scale, multiplied by heterogeneity
    prevalence_spread: float = 1.0
    size_median: float = 2000.0
    size_sigma: float = 0.8
    size_bounds: tuple[int, int] = (200, 20_000)

    def validate(self):
        if self.n_silos < 1:
            raise ValueError("n_silos must be >= 1")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        if not 0.0 <= self.heterogeneity <= 1.0:
            raise ValueError("heterogeneity must lie in [0, 1]")
        if not 0.0 < self.target_prevalence < 1.0:
            raise ValueError("target_prevalence must lie strictly inside (0, 1)")
        if self.rate_spread < 1.0:
            raise ValueError("rate_spread must be >= 1")
        lo, hi = rate_bounds(self)
        if not 0.0 < lo <= hi < 1.0:
            raise ValueError("mean_active too large for feature_dim")
        if self.private_rank < 1:
            raise ValueError("private_rank must be >= 1")
        if self.group_concentration <= 0:
            raise ValueError("group_concentration must be > 0")
        if self.prevalence_spread < 0:
            raise ValueError("prevalence_spread must be >= 0")
        if self.signal_strength < 0:
            raise ValueError("signal_strength must be >= 0")
        if isinstance(self.samples_per_silo, (list, tuple)):
            if len(self.samples_per_silo) != self.n_silos:
                raise ValueError("samples_per_silo list must have n_silos entries")
            if min(self.samples_per_silo) < 1:
                raise ValueError("every silo needs at least one sample")
        elif self.samples_per_silo is not None and self.samples_per_silo < 1:
            raise ValueError("samples_per_silo must be >= 1")


def silo_sizes(spec: GenSpec) -> list[int]:
    if isinstance(spec.samples_per_silo, (list, tuple)):
        return [int(n) for n in spec.samples_per_silo]
    if spec.samples_per_silo is not None:
        return [int(spec.samples_per_silo)] * spec.n_silos
    rng = np.random.default_rng([spec.seed, 1])
    raw = rng.lognormal(np.log(spec.size_median), spec.size_sigma, size=spec.n_silos)
    lo, hi = spec.size_bounds
    return [int(n) for n in np.clip(np.rint(raw), lo, hi)]


def rate_bounds(spec: GenSpec) -> tuple[float, float]:
    """Log-uniform bounds whose mean rate times feature_dim is ``mean_active``."""
    r = spec.rate_spread
    mean_rate = spec.mean_active / spec.feature_dim
    if r == 1.0:
        return mean_rate, mean_rate
    lo = mean_rate * np.log(r) / (r - 1.0)
    return lo, lo * r


def _feature_rates(rng, spec):
    lo, hi = rate_bounds(spec)
    return np.exp(rng.uniform(np.log(lo), np.log(hi), size=spec.feature_dim))


def _normalize(beta, rates, strength):
    scale = np.sqrt(np.sum(beta ** 2 * rates * (1.0 - rates)))
    return beta * (strength / scale) if scale > 0 else beta


def solve_intercept(logits: np.ndarray, target: float, tol: float = 1e-12) -> float:
    """Bisection for ``b`` with ``mean(sigmoid(b + logits)) == target``."""
    lo, hi = -60.0, 60.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        rate = np.mean(0.5 * (1.0 + np.tanh(0.5 * (mid + logits))))
        if rate < target:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol:
            break
    return 0.5 * (lo + hi)


def _logit(p):
    return np.log(p) - np.log1p(-p)


def silo_prevalences(spec: GenSpec, sizes: Sequence[int]) -> np.ndarray:
    """Per-silo label rates whose size-weighted mean is the target."""
    z = np.random.default_rng([spec.seed, 3]).standard_normal(len(sizes))
    offsets = spec.heterogeneity * spec.prevalence_spread * z
    w = np.asarray(sizes, dtype=np.float64)
    w /= w.sum()
    base = _logit(spec.target_prevalence)
    lo, hi = -30.0, 30.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if np.dot(w, 1.0 / (1.0 + np.exp(-(base + mid + offsets)))) < spec.target_prevalence:
            lo = mid
        else:
            hi = mid
    return 1.0 / (1.0 + np.exp(-(base + 0.5 * (lo + hi) + offsets)))


def silo_id_for(index: int) -> str:
    return f"silo_{index:03d}"


def generate(spec: GenSpec) -> list[SiloDataset]:
    """Draw ``spec.n_silos`` heterogeneous binary-feature silos.

    Each silo's feature rates and label coefficients are convex blends
    ``(1 - h) * shared + h * private`` with ``h = spec.heterogeneity``. The
    private draws do not depend on ``h``, so silo-to-silo distances scale
    linearly with it.

    Label coefficients are ``loadings @ u``: ``private_rank`` shared risk
    directions (columns of ``loadings``) weighted by ``u``. The shared
    vector weights every direction equally; each silo's private weights are
    a symmetric Dirichlet draw (concentration ``group_concentration``), so
    silos agree on which feature combinations carry risk but not on how
    much each one matters.

    Silo base rates differ too: silo ``i`` targets
    ``sigmoid(logit(target) + c + h * prevalence_spread * z_i)`` with
    ``z_i ~ N(0, 1)`` and a common shift ``c`` chosen so the size-weighted
    mean of the silo targets equals ``target_prevalence``. Labels follow a
    logistic model whose intercept is solved per silo (bisection) to hit
    that silo's target.
    """
    spec.validate()
    h = spec.heterogeneity
    r = spec.private_rank
    shared_rng = np.random.default_rng([spec.seed, 0])
    shared_rates = _feature_rates(shared_rng, spec)
    loadings = shared_rng.standard_normal((spec.feature_dim, r))
    shared_u = np.ones(r)
    sizes = silo_sizes(spec)
    targets = silo_prevalences(spec, sizes)

    silos = []
    for i, n in enumerate(sizes):
        rng = np.random.default_rng([spec.seed, 2, i])
        own_rates = _feature_rates(rng, spec)
        own_u = r * rng.dirichlet(np.full(r, spec.group_concentration))
        rates = (1.0 - h) * shared_rates + h * own_rates
        beta = _normalize(loadings @ ((1.0 - h) * shared_u + h * own_u),
                          rates, spec.signal_strength)
        X = (rng.random((n, spec.feature_dim)) < rates).astype(np.uint8)
        logits = X @ beta
        b = solve_intercept(logits, targets[i])
        p = 0.5 * (1.0 + np.tanh(0.5 * (b + logits)))
        y = (rng.random(n) < p).astype(np.int8)
        silos.append(SiloDataset(silo_id_for(i), X, y))
    return silos


def generation_rates(spec: GenSpec) -> np.ndarray:
    """Per-silo feature activation rates, shape (n_silos, feature_dim)."""
    spec.validate()
    h = spec.heterogeneity
    shared_rates = _feature_rates(np.random.default_rng([spec.seed, 0]), spec)
    rows = []
    for i in range(spec.n_silos):
        own = _feature_rates(np.random.default_rng([spec.seed, 2, i]), spec)
        rows.append((1.0 - h) * shared_rates + h * own)
    return np.array(rows)


# -- splitting --------------------------------------------------------------


def _allocate(n: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder rounding of ``n * ratios`` (sums to ``n``)."""
    exact = [n * r for r in ratios]
    counts = [int(np.floor(e)) for e in exact]
    order = sorted(range(len(ratios)), key=lambda k: (-(exact[k] - counts[k]), k))
    for k in order[: n - sum(counts)]:
        counts[k] += 1
    return counts


def split(dataset: SiloDataset, ratios: Sequence[float] = DEFAULT_RATIOS,
          seed: int = 0) -> SiloDataset:
    """Tag every sample train/val/test, stratified by label.

    If some label present in the silo has fewer samples than there are
    non-empty partitions, the whole silo goes to train and
    ``split_warning`` explains why.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("ratios must be three non-negative numbers summing to 1")
    if dataset.n_samples == 0:
        raise ValueError("cannot split an empty dataset")
    y = dataset._labels
    tags = np.full(dataset.n_samples, TRAIN, dtype=np.int8)
    active = sum(r > 0 for r in ratios)
    classes, counts = np.unique(y, return_counts=True)
    if active > 1 and counts.min() < active:
        msg = (f"silo {dataset.silo_id}: label {classes[counts.argmin()]} has "
               f"{counts.min()} samples for {active} partitions; all samples "
               f"assigned to train")
        logger.warning(msg)
        return dataset.with_split(tags, split_warning=msg)
    rng = np.random.default_rng(derive_seed(seed, "split", dataset.silo_id))
    for c in classes:
        idx = np.flatnonzero(y == c)
        idx = idx[rng.permutation(len(idx))]
        n_tr, n_va, _ = _allocate(len(idx), ratios)
        tags[idx[n_tr:n_tr + n_va]] = VAL
        tags[idx[n_tr + n_va:]] = TEST
    return dataset.with_split(tags)


def split_all(silos: Sequence[SiloDataset], ratios=DEFAULT_RATIOS, seed: int = 0):
    return [split(s, ratios, seed) for s in silos]


# -- CSV --------------------------------------------------------------------


def save_csv(silos: Sequence[SiloDataset], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for s in silos:
            X, y = s._features, s._labels
            for row, label in zip(X, y):
                w.writerow([s.silo_id, int(label),
                            ";".join(str(j) for j in np.flatnonzero(row))])


def load_csv(path, feature_dim: int | None = None) -> list[SiloDataset]:
    """Read silos from the sparse CSV format; silo order follows first appearance.

    ``feature_dim`` defaults to the largest index seen plus one.
    """
    rows: dict[str, tuple[list, list]] = {}
    max_index = -1
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise ParseError(path, 1, f"expected header {','.join(CSV_HEADER)}")
        for rec in reader:
            line = reader.line_num
            if not rec:
                continue
            if len(rec) != 3:
                raise ParseError(path, line, f"expected 3 fields, got {len(rec)}")
            silo_id, label, feats = rec
            if not silo_id:
                raise ParseError(path, line, "empty silo_id")
            if label not in ("0", "1"):
                raise ParseError(path, line, f"label must be 0 or 1, got {label!r}")
            idx = []
            if feats.strip():
                try:
                    idx = [int(tok) for tok in feats.split(";")]
                except ValueError:
                    raise ParseError(path, line, f"bad feature list {feats!r}") from None
                if min(idx) < 0:
                    raise ParseError(path, line, "negative feature index")
                if len(set(idx)) != len(idx):
                    raise ParseError(path, line, "duplicate feature index")
                if feature_dim is not None and max(idx) >= feature_dim:
                    raise ParseError(path, line, f"feature index {max(idx)} >= "
                                     f"declared dim {feature_dim}")
                max_index = max(max_index, max(idx))
            ids, labels = rows.setdefault(silo_id, ([], []))
            ids.append(idx)
            labels.append(int(label))
    dim = feature_dim if feature_dim is not None else max_index + 1
    if dim < 1:
        raise ParseError(path, 1, "cannot infer feature dim from a file with no features")
    silos = []
    for silo_id, (ids, labels) in rows.items():
        X = np.zeros((len(labels), dim), dtype=np.uint8)
        for r, idx in enumerate(ids):
            X[r, idx] = 1
        silos.append(SiloDataset(silo_id, X, np.array(labels, dtype=np.int8)))
    return silos
