"""Evasion attacks: Carlini-Wagner L2 and PGD L-inf with averaged gradients.

Both attacks are batched: a batch of inputs is attacked in lock-step and each
row is an independent attack.  The per-sample results come back as
:class:`AdvExample` records.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import nn
from .data import IDX_FLOAT_IMAGES, IDX_UBYTE_IMAGES, read_idx, write_idx

BOX = (0.0, 1.0)
# start point is pulled this far inside the box so arctanh stays finite
TANH_SHRINK = 1e-6


@dataclass(frozen=True)
class CwConfig:
    confidence: float = 0.0
    c_init: float = 0.1
    c_search_steps: int = 6
    inner_iters: int = 200
    inner_lr: float = 1e-2
    box: tuple = BOX
    warm_start: bool = False  # continue each c step from the previous step's final iterate

    def __post_init__(self):
        if self.confidence < 0:
            raise ValueError("confidence must be non-negative")
        if not self.c_init > 0 or not self.inner_lr > 0:
            raise ValueError("c_init and inner_lr must be positive")
        if self.c_search_steps < 1 or self.inner_iters < 1:
            raise ValueError("c_search_steps and inner_iters must be >= 1")


@dataclass(frozen=True)
class PgdConfig:
    epsilon: float = 0.3
    step_size: Optional[float] = None  # defaults to min(epsilon, 2.5 * epsilon / steps)
    steps: int = 10
    randomness_draws: int = 1
    targeted: bool = False

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.steps < 1 or self.randomness_draws < 1:
            raise ValueError("steps and randomness_draws must be >= 1")
        if self.step_size is None:
            object.__setattr__(self, "step_size", min(self.epsilon, 2.5 * self.epsilon / self.steps))
        if self.step_size < 0 or self.step_size > self.epsilon + 1e-12:
            raise ValueError("step_size must lie in [0, epsilon]")


@dataclass(frozen=True, eq=False)
class AdvExample:
    original: np.ndarray
    adversarial: np.ndarray
    true_label: int
    target_label: Optional[int]
    success: bool
    l2_distortion: float
    linf_distortion: float

    @classmethod
    def from_pair(cls, original, adversarial, true_label, target_label, success) -> "AdvExample":
        diff = np.asarray(adversarial, np.float64) - np.asarray(original, np.float64)
        return cls(
            original, adversarial, int(true_label),
            None if target_label is None else int(target_label),
            bool(success),
            float(np.sqrt(np.sum(diff * diff))),
            float(np.max(np.abs(diff))) if diff.size else 0.0,
        )


def cw_loss(logits, target: int, k: float, targeted: bool) -> float:
    """CW margin loss for one logit vector.

    ``target`` is the attack target when ``targeted`` and the true label
    otherwise.
    """
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    if not 0 <= target < len(logits):
        raise ValueError(f"target {target} outside [0, {len(logits)})")
    loss, _ = nn.cw_margin(logits[None], np.array([target]), k, targeted)
    return float(loss[0])


def random_targets(labels: np.ndarray, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform target != true label for every sample."""
    labels = np.asarray(labels)
    offsets = rng.integers(1, num_classes, size=len(labels))
    return (labels + offsets) % num_classes


def _success(logits, labels, targets, confidence):
    """CW success test at the stored point: label relation plus the k-margin."""
    pred = nn.argmax_lowest(logits)
    if targets is not None:
        raw_ok = _raw_margin(logits, targets, True) <= -confidence
        return (pred == targets) & raw_ok
    raw_ok = _raw_margin(logits, labels, False) <= -confidence
    return (pred != labels) & raw_ok


def _raw_margin(logits, label, targeted):
    z = logits.astype(np.float64)
    rows = np.arange(len(z))
    other = z.copy()
    other[rows, label] = -np.inf
    raw = other.max(axis=1) - z[rows, label]
    return raw if targeted else -raw


def cw_l2_batch(
    model: nn.Model,
    x: np.ndarray,
    true_labels: Sequence[int],
    targets: Optional[Sequence[int]],
    cfg: CwConfig,
) -> list[AdvExample]:
    """Carlini-Wagner L2 on a batch, minimising ``||x'-x||^2 + c * l(x')``.

    The box is handled by optimising ``w`` with ``x' = (tanh(w) + 1) / 2``
    (rescaled to ``cfg.box``) using Adam.  ``c`` is searched per sample:
    doubled while no success has been seen, bisected afterwards.  The
    returned point is the lowest-distortion success over every (c, iterate)
    pair visited; on total failure the original is returned with
    ``success=False``.
    """
    dtype = model.dtype
    x0 = nn._as_batch(model.arch, x, dtype)
    n = len(x0)
    labels = np.asarray(true_labels, dtype=np.int64).reshape(n)
    tgt = None if targets is None else np.asarray(targets, dtype=np.int64).reshape(n)
    c_count = model.arch.num_classes
    if tgt is not None and (np.any(tgt < 0) or np.any(tgt >= c_count)):
        raise ValueError("target out of class range")
    lo_box, hi_box = cfg.box
    span = hi_box - lo_box
    attack_labels = tgt if tgt is not None else labels
    targeted = tgt is not None
    k = cfg.confidence
    flat = (n, -1)

    best_adv = x0.copy()
    best_l2 = np.full(n, np.inf)
    logits0 = nn.forward(model, x0)
    done0 = _success(logits0, labels, tgt, k)
    best_l2[done0] = 0.0

    unit = np.clip((x0.astype(np.float64) - lo_box) / span, 0.0, 1.0)
    w0 = np.arctanh((2.0 * unit - 1.0) * (1.0 - TANH_SHRINK))
    c = np.full(n, cfg.c_init)
    c_lo = np.zeros(n)
    c_hi = np.full(n, np.inf)
    beta1, beta2, eps = 0.9, 0.999, 1e-8

    w_last = w0
    for _ in range(cfg.c_search_steps):
        w = w_last.copy() if cfg.warm_start else w0.copy()
        m = np.zeros_like(w)
        v = np.zeros_like(w)
        found = np.zeros(n, dtype=bool)
        alive = np.ones(n, dtype=bool)
        for it in range(cfg.inner_iters + 1):
            t = np.tanh(w)
            xa = (lo_box + span * (t + 1.0) / 2.0).astype(dtype)
            logits, caches = nn._forward(model.arch, model.params, xa, keep=True)
            delta = xa.astype(np.float64) - x0
            l2sq = np.sum(delta.reshape(flat) ** 2, axis=1)
            loss, dz = nn.cw_margin(logits, attack_labels, k, targeted)
            obj = l2sq + c * loss
            alive &= np.isfinite(obj)
            ok = _success(logits, labels, tgt, k) & alive
            better = ok & (l2sq < best_l2 ** 2)
            if better.any():
                best_l2[better] = np.sqrt(l2sq[better])
                best_adv[better] = xa[better]
            found |= ok
            if it == cfg.inner_iters or not alive.any():
                break
            dx, _ = nn._backward(model.arch, model.params, caches,
                                 (dz * c[:, None]).astype(dtype), want_params=False)
            g = (2.0 * delta + dx) * (span * (1.0 - t * t) / 2.0)
            g[~alive] = 0.0
            m = beta1 * m + (1 - beta1) * g
            v = beta2 * v + (1 - beta2) * g * g
            mh = m / (1 - beta1 ** (it + 1))
            vh = v / (1 - beta2 ** (it + 1))
            w = w - cfg.inner_lr * mh / (np.sqrt(vh) + eps)
        w_last = np.where(alive.reshape((n,) + (1,) * (w.ndim - 1)), w, w0)
        found &= alive
        c_hi = np.where(found, np.minimum(c_hi, c), c_hi)
        c_lo = np.where(found, c_lo, np.maximum(c_lo, c))
        c = np.where(np.isinf(c_hi), c * 2.0, (c_lo + c_hi) / 2.0)

    results = []
    for i in range(n):
        ok = bool(np.isfinite(best_l2[i]))
        results.append(AdvExample.from_pair(
            x0[i], best_adv[i], labels[i], None if tgt is None else tgt[i], ok))
    return results


def cw_l2(model: nn.Model, x: np.ndarray, true_label: int, target: Optional[int], cfg: CwConfig) -> AdvExample:
    """Single-sample convenience wrapper around :func:`cw_l2_batch`."""
    if target is not None and target == true_label:
        raise ValueError("target equals the true label")
    return cw_l2_batch(model, np.asarray(x)[None], [true_label],
                       None if target is None else [target], cfg)[0]


ModelSampler = Callable[[np.random.Generator], nn.Model]


def constant_sampler(model: nn.Model) -> ModelSampler:
    return lambda rng: model


def pgd_linf_batch(
    model_or_sampler: Union[nn.Model, ModelSampler],
    x: np.ndarray,
    true_labels: Sequence[int],
    targets: Optional[Sequence[int]],
    cfg: PgdConfig,
    rng: Optional[np.random.Generator] = None,
    judge: Optional[nn.Model] = None,
) -> list[AdvExample]:
    """L-inf PGD whose step direction is the sign of the cross-entropy input
    gradient averaged over ``cfg.randomness_draws`` sampled models.

    A fresh set of models is drawn for every step.  Untargeted attacks ascend
    the loss of the true label, targeted ones descend the loss of the target.
    Success is judged by ``judge`` (default: the static model, or one extra
    draw from the sampler).
    """
    if isinstance(model_or_sampler, nn.Model):
        sampler = constant_sampler(model_or_sampler)
        judge = judge or model_or_sampler
    else:
        sampler = model_or_sampler
    rng = rng if rng is not None else np.random.default_rng(0)
    x = np.asarray(x)
    labels = np.asarray(true_labels, dtype=np.int64).reshape(-1)
    tgt = None if targets is None else np.asarray(targets, dtype=np.int64).reshape(-1)
    targeted = cfg.targeted or tgt is not None
    if targeted and tgt is None:
        raise ValueError("targeted PGD needs target labels")
    loss_labels = tgt if targeted else labels
    first = sampler(rng)
    x0 = nn._as_batch(first.arch, x, first.dtype)
    eps = np.float32(cfg.epsilon) if x0.dtype == np.float32 else cfg.epsilon
    lower = np.maximum(x0 - eps, BOX[0])
    upper = np.minimum(x0 + eps, BOX[1])
    xa = x0.copy()
    pending = first
    for _ in range(cfg.steps):
        g = np.zeros(x0.shape, dtype=np.float64)
        for _ in range(cfg.randomness_draws):
            model = pending if pending is not None else sampler(rng)
            pending = None
            _, gi = nn.grad_input(model, xa, nn.LossSpec("xent", loss_labels))
            g += gi
        direction = np.sign(g).astype(x0.dtype)
        if targeted:
            direction = -direction
        xa = np.clip(xa + np.asarray(cfg.step_size, x0.dtype) * direction, lower, upper)
    if judge is None:
        judge = sampler(rng)
    pred = nn.predict(judge, xa)
    success = (pred == tgt) if targeted else (pred != labels)
    return [
        AdvExample.from_pair(x0[i], xa[i], labels[i], None if tgt is None else tgt[i], success[i])
        for i in range(len(x0))
    ]


def pgd_linf(model_or_sampler, x, true_label: int, target: Optional[int], cfg: PgdConfig,
             rng=None, judge=None) -> AdvExample:
    return pgd_linf_batch(model_or_sampler, np.asarray(x)[None], [true_label],
                          None if target is None else [target], cfg, rng, judge)[0]


def mean_distortion(results: Sequence[AdvExample], norm: str = "L2") -> float:
    """Mean distortion over the successful attacks (NaN when none succeeded)."""
    if not results:
        raise ValueError("no attack results")
    attr = {"L2": "l2_distortion", "Linf": "linf_distortion"}[norm]
    values = [getattr(r, attr) for r in results if r.success]
    return float(np.mean(values)) if values else math.nan


def success_rate(results: Sequence[AdvExample]) -> float:
    return float(np.mean([r.success for r in results])) if results else math.nan


def stack(results: Sequence[AdvExample]) -> tuple[np.ndarray, np.ndarray]:
    """Adversarial inputs and their true labels as arrays."""
    return (np.stack([r.adversarial for r in results]),
            np.array([r.true_label for r in results], dtype=np.int64))


# ---------------------------------------------------------------------------
# adversarial batch files: <stem>.adv.idx, <stem>.orig.idx, <stem>.csv

CSV_COLUMNS = ("index", "true_label", "target_label", "success", "l2", "linf")


def save_adv_batch(stem, results: Sequence[AdvExample], indices: Optional[Sequence[int]] = None) -> None:
    stem = Path(stem)
    indices = range(len(results)) if indices is None else indices
    shape = results[0].adversarial.shape
    squeeze = shape[1:] if len(shape) == 3 and shape[0] == 1 else shape
    adv = np.stack([r.adversarial.reshape(squeeze) for r in results]).astype(np.float32)
    orig = np.stack([r.original.reshape(squeeze) for r in results]).astype(np.float32)
    write_idx(f"{stem}.adv.idx", adv)
    write_idx(f"{stem}.orig.idx", orig)
    with open(f"{stem}.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for idx, r in zip(indices, results):
            writer.writerow([
                int(idx), r.true_label, "" if r.target_label is None else r.target_label,
                int(r.success), repr(r.l2_distortion), repr(r.linf_distortion),
            ])


def load_adv_batch(stem, sample_shape: Optional[tuple] = None) -> tuple[list[AdvExample], list[int]]:
    stem = Path(stem)
    images_magic = (IDX_FLOAT_IMAGES, IDX_UBYTE_IMAGES, 0x00000D02, 0x00000D04)
    adv = read_idx(f"{stem}.adv.idx", images_magic).astype(np.float32)
    orig = read_idx(f"{stem}.orig.idx", images_magic).astype(np.float32)
    if sample_shape is not None:
        adv = adv.reshape((len(adv),) + tuple(sample_shape))
        orig = orig.reshape((len(orig),) + tuple(sample_shape))
    results, indices = [], []
    with open(f"{stem}.csv", newline="", encoding="utf-8") as fh:
        for i, row in enumerate(csv.DictReader(fh)):
            target = None if row["target_label"] == "" else int(row["target_label"])
            results.append(AdvExample(orig[i], adv[i], int(row["true_label"]), target,
                                      row["success"] == "1", float(row["l2"]), float(row["linf"])))
            indices.append(int(row["index"]))
    if len(results) != len(adv):
        raise ValueError(f"{stem}.csv lists {len(results)} rows for {len(adv)} images")
    return results, indices
