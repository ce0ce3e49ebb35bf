"""Version-space diagnostics: point-wise robustness, attack intensity,
empirical transferability between pool members, and a per-node weight
entropy proxy (log-determinant of the cross-pool weight covariance)."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import attacks, nn
from .defenses import ModelPool

# cheaper CW used as the L2 feasibility oracle inside the bisection
ROBUSTNESS_CW = attacks.CwConfig(confidence=0.0, c_init=0.1, c_search_steps=8, inner_iters=50, inner_lr=0.05)
ROBUSTNESS_PGD_STEPS = 20


class NoQualifyingSamplesError(ValueError):
    """No sample is attackable within the budget: the model is too robust at this epsilon."""


@dataclass(frozen=True)
class RobustnessEstimate:
    rho: float
    lower: float
    upper: float
    attack_succeeded_at_upper: bool

    def __post_init__(self):
        if not self.lower <= self.rho <= self.upper:
            raise ValueError("need lower <= rho <= upper")


def bisect_radius(feasible: Callable[[float], bool], eps_max: float, tol: float) -> RobustnessEstimate:
    """Smallest radius in [0, eps_max] the oracle accepts, to within ``tol``."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    if not feasible(eps_max):
        return RobustnessEstimate(eps_max, eps_max, eps_max, False)
    lo, hi = 0.0, float(eps_max)
    while hi - lo > tol:
        mid = (lo + hi) / 2.0
        if feasible(mid):
            hi = mid
        else:
            lo = mid
    return RobustnessEstimate(hi, lo, hi, True)


def _pgd_feasible(model, x, label, steps):
    def feasible(eps):
        if eps <= 0:
            return bool(nn.predict(model, x) != label)
        cfg = attacks.PgdConfig(epsilon=eps, steps=steps)
        return attacks.pgd_linf(model, x, label, None, cfg).success
    return feasible


def pointwise_robustness(
    model: nn.Model,
    x: np.ndarray,
    norm: str,
    eps_max: float,
    tol: float,
    label: Optional[int] = None,
    cw_cfg: attacks.CwConfig = ROBUSTNESS_CW,
    pgd_steps: int = ROBUSTNESS_PGD_STEPS,
) -> RobustnessEstimate:
    """Bisection estimate of the smallest perturbation radius that changes
    the label of ``x`` (``label`` defaults to the model's own prediction).

    L-inf radii are tested with PGD at that radius.  For L2 the oracle is a
    single untargeted CW run: a radius is feasible when CW found a
    misclassified point within it.
    """
    return pointwise_robustness_batch(model, np.asarray(x)[None], norm, eps_max, tol,
                                      None if label is None else [label], cw_cfg, pgd_steps)[0]


def pointwise_robustness_batch(model, xs, norm, eps_max, tol, labels=None,
                               cw_cfg: attacks.CwConfig = ROBUSTNESS_CW,
                               pgd_steps: int = ROBUSTNESS_PGD_STEPS) -> list[RobustnessEstimate]:
    if norm not in ("L2", "Linf"):
        raise ValueError(f"unknown norm {norm!r}")
    xs = np.asarray(xs)
    preds = nn.predict(model, xs)
    labels = preds if labels is None else np.asarray(labels, dtype=np.int64)
    out: list[Optional[RobustnessEstimate]] = [None] * len(xs)
    todo = [i for i in range(len(xs)) if preds[i] == labels[i]]
    for i in range(len(xs)):
        if preds[i] != labels[i]:
            out[i] = RobustnessEstimate(0.0, 0.0, 0.0, True)
    if norm == "L2" and todo:
        found = attacks.cw_l2_batch(model, xs[todo], labels[todo], None, cw_cfg)
        for i, res in zip(todo, found):
            dist = res.l2_distortion if res.success else math.inf
            out[i] = bisect_radius(lambda eps, d=dist: d <= eps, eps_max, tol)
    else:
        for i in todo:
            out[i] = bisect_radius(_pgd_feasible(model, xs[i], int(labels[i]), pgd_steps), eps_max, tol)
    return out


def attack_intensity(model: nn.Model, dataset, norm: str, eps: float, tol: float, **kwargs) -> tuple[float, int]:
    """Mean point-wise robustness over the samples attackable within ``eps``.

    Returns ``(mean, count)``; raises :class:`NoQualifyingSamplesError` when
    nothing qualifies.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    estimates = pointwise_robustness_batch(model, dataset.images, norm, eps, tol, dataset.labels, **kwargs)
    values = [e.rho for e in estimates if e.attack_succeeded_at_upper and e.rho <= eps]
    if not values:
        raise NoQualifyingSamplesError(f"no sample is attackable within eps={eps}: model too robust at this budget")
    return float(np.mean(values)), len(values)


@dataclass(frozen=True, eq=False)
class TransferReport:
    matrix: np.ndarray
    epsilon_bound: float
    delta: float
    indicator: np.ndarray

    def mean_off_diagonal(self) -> float:
        m = len(self.matrix)
        mask = ~np.eye(m, dtype=bool)
        return float(self.matrix[mask].mean())

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["attacker_idx", "predictor_idx", "transfer_rate", "indicator"])
            for a in range(len(self.matrix)):
                for p in range(len(self.matrix)):
                    w.writerow([a, p, repr(float(self.matrix[a, p])), int(self.indicator[a, p])])


def transfer_matrix(
    pool: ModelPool,
    dataset,
    attack_cfg,
    targeted: bool = False,
    delta: float = 0.05,
    seed: int = 0,
) -> TransferReport:
    """Entry (a, p): misclassification rate of member p on examples crafted
    against member a.  The indicator marks rates of at least ``1 - delta``.

    ``attack_cfg`` is a :class:`CwConfig` (L2) or :class:`PgdConfig` (L-inf).
    """
    if len(pool) < 2:
        raise ValueError("transferability needs at least two pool members")
    if not 0 < delta < 0.5:
        raise ValueError("delta must lie in (0, 1/2)")
    rng = np.random.default_rng(seed)
    x, y = dataset.images, dataset.labels
    targets = attacks.random_targets(y, pool.arch.num_classes, rng) if targeted else None
    M = len(pool)
    matrix = np.zeros((M, M))
    bound = 0.0
    for a, f_a in enumerate(pool.models):
        if isinstance(attack_cfg, attacks.PgdConfig):
            results = attacks.pgd_linf_batch(f_a, x, y, targets, attack_cfg)
            bound = max(bound, max(r.linf_distortion for r in results))
        else:
            results = attacks.cw_l2_batch(f_a, x, y, targets, attack_cfg)
            bound = max(bound, max(r.l2_distortion for r in results))
        adv, labels = attacks.stack(results)
        for p, f_p in enumerate(pool.models):
            matrix[a, p] = float(np.mean(nn.predict(f_p, adv) != labels))
    return TransferReport(matrix, bound, delta, matrix >= 1.0 - delta)


@dataclass(frozen=True, eq=False)
class EntropyReport:
    layers: list = field(default_factory=list)  # (layer index, per-node log|det| array)
    pool_size: int = 0
    regularizer_lambda: float = 1e-6

    def all_values(self) -> np.ndarray:
        return np.concatenate([v for _, v in self.layers]) if self.layers else np.zeros(0)

    def median(self) -> float:
        return float(np.median(self.all_values()))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["layer", "node", "log_det"])
            for layer, values in self.layers:
                for node, v in enumerate(values):
                    w.writerow([layer, node, repr(float(v))])


def regularized_logdet(samples: np.ndarray, lam: float) -> float:
    """log|det(S + lam I)| for the sample covariance S of ``samples`` (M x n).

    When n exceeds M the determinant is taken through the M x M Gram matrix
    (Sylvester's identity), which gives the same value at a fraction of the
    cost.
    """
    samples = np.asarray(samples, dtype=np.float64)
    m, n = samples.shape
    a = samples - samples.mean(axis=0)
    if n <= m:
        cov = a.T @ a / (m - 1)
        _, logdet = np.linalg.slogdet(cov + lam * np.eye(n))
        return float(logdet)
    gram = a @ a.T / ((m - 1) * lam)
    _, logdet = np.linalg.slogdet(np.eye(m) + gram)
    return float(n * math.log(lam) + logdet)


def weight_entropy(pool: ModelPool, lam: float = 1e-6) -> EntropyReport:
    """Per-node log-determinant of the incoming-weight covariance across the pool.

    A node is an output unit of a Dense/OutputLogits layer or a filter of a
    Conv2D layer; its incoming weights form an n-vector per pool member.
    """
    if len(pool) < 2:
        raise ValueError("need at least two models to estimate a covariance")
    layers = []
    for li, layer in enumerate(pool.arch.layers):
        if not pool.models[0].params[li]:
            continue
        stacked = np.stack([m.params[li][0] for m in pool.models])  # (M, nodes, ...)
        stacked = stacked.reshape(len(pool), stacked.shape[1], -1)
        values = np.array([regularized_logdet(stacked[:, j, :], lam) for j in range(stacked.shape[1])])
        layers.append((li, values))
    return EntropyReport(layers, len(pool), lam)
