"""Random-effects model: cluster designs, coefficient tables, variances.

Cluster membership is stored in index form: one integer vector per clustering
feature, where entry ``i`` selects the cluster of row ``i``. The value
``UNSEEN`` (-1) marks a cluster absent from the training vocabulary; such rows
receive the prior-mean effect (zero).

Coefficient tables ``B`` hold one row per cluster and one column per class.
The flat ordering used for sampling is feature-major, then cluster, then
class, and is fixed so that checkpoints are portable.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericalError, ShapeError
from .neural_net import Link, sigmoid, softmax

UNSEEN = -1
DEFAULT_VARIANCE_FLOOR = 1e-6


@dataclass
class ClusterDesign:
    """Per-feature cluster assignments for a set of rows.

    ``assignments[l][i]`` is the cluster index of row ``i`` for feature ``l``,
    in ``[0, cardinalities[l])``, or ``UNSEEN``.
    """

    cardinalities: tuple[int, ...]
    assignments: list[np.ndarray]
    feature_names: tuple[str, ...] = ()

    def __post_init__(self):
        self.cardinalities = tuple(int(q) for q in self.cardinalities)
        if len(self.assignments) != len(self.cardinalities):
            raise ShapeError("one assignment vector per clustering feature required")
        self.assignments = [np.asarray(a, dtype=np.int64) for a in self.assignments]
        n = self.num_rows
        if not self.feature_names:
            self.feature_names = tuple(f"z{l}" for l in range(len(self.cardinalities)))
        for l, (q, a) in enumerate(zip(self.cardinalities, self.assignments)):
            if a.ndim != 1 or a.shape[0] != n:
                raise ShapeError(f"feature {l}: assignment vector must be 1-D of common length")
            if a.size and (a.min() < UNSEEN or a.max() >= q):
                raise ShapeError(f"feature {l}: cluster index out of range [0, {q})")

    @property
    def num_features(self) -> int:
        return len(self.cardinalities)

    @property
    def num_rows(self) -> int:
        return self.assignments[0].shape[0] if self.assignments else 0

    def rows(self, idx: np.ndarray) -> "ClusterDesign":
        """Design restricted to the given row indices."""
        return ClusterDesign(
            cardinalities=self.cardinalities,
            assignments=[a[idx] for a in self.assignments],
            feature_names=self.feature_names,
        )


@dataclass
class RandomEffects:
    """Per-feature coefficient tables, each of shape ``(Q_l, C)``."""

    tables: list[np.ndarray]

    def __post_init__(self):
        self.tables = [np.asarray(t, dtype=float) for t in self.tables]
        if not self.tables:
            raise ShapeError("at least one coefficient table required")
        c = self.tables[0].shape[1]
        for t in self.tables:
            if t.ndim != 2 or t.shape[1] != c:
                raise ShapeError("all tables must be 2-D with a common class dimension")

    @property
    def num_classes(self) -> int:
        return self.tables[0].shape[1]

    @property
    def cardinalities(self) -> tuple[int, ...]:
        return tuple(t.shape[0] for t in self.tables)

    def flatten(self) -> np.ndarray:
        """Feature-major, then cluster, then class."""
        return np.concatenate([t.ravel() for t in self.tables])

    @classmethod
    def from_flat(
        cls, flat: np.ndarray, cardinalities: tuple[int, ...], num_classes: int
    ) -> "RandomEffects":
        flat = np.asarray(flat, dtype=float)
        total = sum(cardinalities) * num_classes
        if flat.shape != (total,):
            raise ShapeError(f"flat vector has {flat.shape} entries, expected ({total},)")
        tables = []
        pos = 0
        for q in cardinalities:
            tables.append(flat[pos : pos + q * num_classes].reshape(q, num_classes))
            pos += q * num_classes
        return cls(tables=tables)

    @classmethod
    def zeros(cls, cardinalities: tuple[int, ...], num_classes: int) -> "RandomEffects":
        return cls(tables=[np.zeros((q, num_classes)) for q in cardinalities])


@dataclass
class VarianceComponents:
    """Random-intercept variances, one per (feature, class) pair."""

    sigma2: np.ndarray  # (L, C)
    floor: float = DEFAULT_VARIANCE_FLOOR

    def __post_init__(self):
        self.sigma2 = np.asarray(self.sigma2, dtype=float)
        if self.sigma2.ndim != 2:
            raise ShapeError("sigma2 must be (num_features, num_classes)")
        if np.any(self.sigma2 < self.floor):
            raise ContractError(f"variance below floor {self.floor}")

    @classmethod
    def constant(
        cls, value: float, num_features: int, num_classes: int, floor: float = DEFAULT_VARIANCE_FLOOR
    ) -> "VarianceComponents":
        return cls(sigma2=np.full((num_features, num_classes), float(value)), floor=floor)

    def copy(self) -> "VarianceComponents":
        return VarianceComponents(sigma2=self.sigma2.copy(), floor=self.floor)


def _check_shapes(design: ClusterDesign, effects: RandomEffects) -> None:
    if effects.cardinalities != design.cardinalities:
        raise ShapeError(
            f"table cardinalities {effects.cardinalities} != design {design.cardinalities}"
        )


def apply_effects(
    design: ClusterDesign, effects: RandomEffects, rows: np.ndarray | None = None
) -> np.ndarray:
    """Sum of per-feature cluster offsets, one (n, C) matrix.

    Equivalent to the dense product ``sum_l Z^(l) B^(l)``; unseen clusters
    contribute zero.
    """
    _check_shapes(design, effects)
    n = design.num_rows if rows is None else len(rows)
    out = np.zeros((n, effects.num_classes))
    for a, table in zip(design.assignments, effects.tables):
        if rows is not None:
            a = a[rows]
        seen = a >= 0
        if seen.all():
            out += table[a]
        else:
            vals = table[np.maximum(a, 0)]
            vals[~seen] = 0.0
            out += vals
    return out


def log_prior(effects: RandomEffects, variances: VarianceComponents) -> float:
    """Zero-mean Gaussian log-density of all coefficients under ``variances``."""
    if variances.sigma2.shape != (len(effects.tables), effects.num_classes):
        raise ShapeError("variance components do not match effect tables")
    total = 0.0
    for l, table in enumerate(effects.tables):
        s2 = variances.sigma2[l]
        if np.any(s2 < variances.floor):
            raise ContractError(f"variance below floor {variances.floor}")
        q = table.shape[0]
        total -= 0.5 * q * float(np.sum(np.log(2.0 * math.pi * s2)))
        total -= float(np.sum(np.square(table) / (2.0 * s2)))
    return total


class PosteriorTarget:
    """Log-posterior of the flattened coefficients given cached fixed logits.

    Callable as ``logp, grad = target(b_flat)``. The data term is the summed
    log-likelihood of the rows; the prior term is the zero-mean Gaussian.
    Assignment index buffers are precomputed once, which makes repeated
    evaluation inside a sampler trajectory cheap.
    """

    def __init__(
        self,
        fixed_logits: np.ndarray,
        Y: np.ndarray,
        design: ClusterDesign,
        variances: VarianceComponents,
        link: Link | str,
    ):
        self.link = Link(link)
        self.fixed_logits = np.asarray(fixed_logits, dtype=float)
        self.Y = np.asarray(Y, dtype=float)
        if not np.all(np.isfinite(self.fixed_logits)):
            raise NumericalError("non-finite fixed logits passed to the sampler target")
        if self.fixed_logits.shape != self.Y.shape:
            raise ShapeError("fixed logits and targets must have equal shapes")
        if self.fixed_logits.shape[0] != design.num_rows:
            raise ShapeError("design row count does not match logits")
        self.design = design
        self.variances = variances
        n, c = self.Y.shape
        self.num_classes = c
        self.cardinalities = design.cardinalities
        self.dim = sum(self.cardinalities) * c
        # Row -> flat-coefficient scatter ids per feature; unseen rows excluded.
        self._scatter: list[tuple[np.ndarray, np.ndarray]] = []
        for a in design.assignments:
            seen = np.flatnonzero(a >= 0)
            ids = (a[seen, None] * c + np.arange(c)).ravel()
            self._scatter.append((seen, ids))

    def __call__(self, b_flat: np.ndarray) -> tuple[float, np.ndarray]:
        effects = RandomEffects.from_flat(b_flat, self.cardinalities, self.num_classes)
        logits = self.fixed_logits + apply_effects(self.design, effects)
        Y = self.Y
        if self.link is Link.SOFTMAX:
            mx = logits.max(axis=1, keepdims=True)
            lse = np.log(np.exp(logits - mx).sum(axis=1)) + mx[:, 0]
            data_logp = float((logits * Y).sum() - lse.sum())
            resid = Y - softmax(logits)
        elif self.link is Link.SIGMOID:
            data_logp = float((Y * logits).sum() - np.logaddexp(0.0, logits).sum())
            resid = Y - sigmoid(logits)
        else:
            diff = Y - logits
            data_logp = float(-0.5 * np.sum(np.square(diff)) - 0.5 * Y.size * math.log(2.0 * math.pi))
            resid = diff
        logp = data_logp + log_prior(effects, self.variances)

        grad_tables = []
        for l, (table, (seen, ids)) in enumerate(zip(effects.tables, self._scatter)):
            q = table.shape[0]
            g = np.bincount(ids, weights=resid[seen].ravel(), minlength=q * self.num_classes)
            g = g.reshape(q, self.num_classes) - table / self.variances.sigma2[l]
            grad_tables.append(g)
        grad = np.concatenate([g.ravel() for g in grad_tables])
        if not (np.isfinite(logp) and np.all(np.isfinite(grad))):
            raise NumericalError("non-finite log-posterior; aborting")
        return logp, grad


def log_posterior_and_grad(
    b_flat: np.ndarray,
    fixed_logits: np.ndarray,
    Y: np.ndarray,
    design: ClusterDesign,
    variances: VarianceComponents,
    link: Link | str,
) -> tuple[float, np.ndarray]:
    """One-shot evaluation of the conditional log-posterior and its gradient.

    For repeated evaluation (inside a sampler) construct a
    :class:`PosteriorTarget` once instead.
    """
    return PosteriorTarget(fixed_logits, Y, design, variances, link)(b_flat)


def variance_update(
    samples: list[RandomEffects], floor: float = DEFAULT_VARIANCE_FLOOR
) -> VarianceComponents:
    """Closed-form M-step for the variances: zero-mean second moment.

    Averages ``b^2`` over clusters and over the retained draws, per
    (feature, class) pair, floored at ``floor``.
    """
    if not samples:
        raise ContractError("variance update requires at least one retained draw")
    first = samples[0]
    num_features = len(first.tables)
    c = first.num_classes
    sigma2 = np.zeros((num_features, c))
    for s in samples:
        for l, table in enumerate(s.tables):
            sigma2[l] += np.square(table).sum(axis=0) / table.shape[0]
    sigma2 /= len(samples)
    return VarianceComponents(sigma2=np.maximum(sigma2, floor), floor=floor)


def point_estimate(history: list[RandomEffects]) -> RandomEffects:
    """Element-wise mean over all retained draws across epochs."""
    if not history:
        raise ContractError("point estimate requires at least one retained draw")
    tables = [np.zeros_like(t) for t in history[0].tables]
    for s in history:
        for acc, t in zip(tables, s.tables):
            acc += t
    return RandomEffects(tables=[t / len(history) for t in tables])


def gradient_variance_step(
    variances: VarianceComponents, samples: list[RandomEffects], lr: float
) -> VarianceComponents:
    """One gradient-ascent step on the mean log-prior, in log-variance space.

    Provided as the general alternative to :func:`variance_update` for models
    beyond the random intercept; its fixed point is the closed-form second
    moment (above the floor).
    """
    if not samples:
        raise ContractError("variance step requires at least one retained draw")
    num_features, c = variances.sigma2.shape
    mean_ss = np.zeros((num_features, c))
    for s in samples:
        for l, table in enumerate(s.tables):
            mean_ss[l] += np.square(table).sum(axis=0)
    mean_ss /= len(samples)
    q = np.array([t.shape[0] for t in samples[0].tables], dtype=float)[:, None]
    # d/d(ln s2) of mean_k log prior = -Q/2 + mean_ss / (2 s2)
    grad = -0.5 * q + mean_ss / (2.0 * variances.sigma2)
    log_s2 = np.log(variances.sigma2) + lr * grad
    return VarianceComponents(
        sigma2=np.maximum(np.exp(log_s2), variances.floor), floor=variances.floor
    )


def posterior_sd(history: list[RandomEffects]) -> RandomEffects:
    """Element-wise standard deviation of the retained draws (ddof=0)."""
    if not history:
        raise ContractError("posterior sd requires at least one retained draw")
    mean = point_estimate(history)
    tables = [np.zeros_like(t) for t in mean.tables]
    for s in history:
        for acc, t, m in zip(tables, s.tables, mean.tables):
            acc += np.square(t - m)
    return RandomEffects(tables=[np.sqrt(t / len(history)) for t in tables])


def export_random_effects_csv(
    path,
    b_hat: RandomEffects,
    sd: RandomEffects,
    variances: VarianceComponents,
    feature_names: tuple[str, ...],
    cluster_labels: list[list] | None = None,
) -> None:
    """Write the coefficient summary used for density/importance plots.

    Columns: feature_name, cluster_id, class_index, b_hat, posterior_sd,
    sigma2_hat.
    """
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["feature_name", "cluster_id", "class_index", "b_hat", "posterior_sd", "sigma2_hat"])
        for l, name in enumerate(feature_names):
            table = b_hat.tables[l]
            for q in range(table.shape[0]):
                label = cluster_labels[l][q] if cluster_labels is not None else q
                for c in range(table.shape[1]):
                    writer.writerow(
                        [name, label, c, repr(table[q, c]), repr(sd.tables[l][q, c]), repr(variances.sigma2[l, c])]
                    )
