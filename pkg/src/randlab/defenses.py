"""Randomisation defences and the baselines they are compared against.

* random model selection: every query (adversarial probe or user prediction)
  is served by an independently drawn member of a pool trained from
  different seeds;
* majority-vote ensembles over the pool;
* Gaussian weight noise added to a trained model at each prediction query;
* ensemble adversarial training, alone and combined with random selection.
"""
from __future__ import annotations

import enum
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import attacks, nn
from .data import Dataset

log = logging.getLogger(__name__)


class SchemeMismatchError(ValueError):
    """The scheme needs a pool (or an attacked-model index) it was not given."""


@dataclass(frozen=True, eq=False)
class ModelPool:
    models: tuple
    arch: nn.Architecture
    base_seed: int = 0

    def __post_init__(self):
        models = tuple(self.models)
        if not models:
            raise ValueError("a pool needs at least one model")
        for m in models:
            if m.arch != self.arch:
                raise ValueError("pool members must share the architecture")
        object.__setattr__(self, "models", models)

    def __len__(self) -> int:
        return len(self.models)

    def __getitem__(self, i) -> nn.Model:
        return self.models[i]

    @property
    def seeds(self) -> list[int]:
        return [m.train_seed for m in self.models]


class QueryType(enum.Enum):
    PROBE = "probe"
    PREDICT = "predict"


def train_pool(arch: nn.Architecture, dataset, sgd_cfg: nn.SgdConfig, M: int, threads: int = 1) -> ModelPool:
    """Member ``i`` is trained with seed ``sgd_cfg.seed + i``."""
    if M < 1:
        raise ValueError("pool size must be >= 1")
    cfgs = [nn.SgdConfig(sgd_cfg.learning_rate, sgd_cfg.momentum, sgd_cfg.batch_size,
                         sgd_cfg.epochs, sgd_cfg.seed + i) for i in range(M)]
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            models = list(ex.map(lambda c: nn.train(arch, dataset, c), cfgs))
    else:
        models = []
        for c in cfgs:
            models.append(nn.train(arch, dataset, c))
            log.info("trained pool member seed=%d", c.seed)
    return ModelPool(tuple(models), arch, sgd_cfg.seed)


def select_index(pool: ModelPool, query: QueryType, rng: np.random.Generator) -> int:
    # query type deliberately does not influence the draw: probe and predict
    # requests are served by independent uniform draws
    if not isinstance(query, QueryType):
        raise TypeError(f"expected QueryType, got {query!r}")
    return int(rng.integers(len(pool)))


def select(pool: ModelPool, query: QueryType, rng: np.random.Generator) -> nn.Model:
    return pool.models[select_index(pool, query, rng)]


def vote(label_matrix: np.ndarray, num_classes: int) -> np.ndarray:
    """Plurality over axis 0 of a (members, samples) label matrix; ties -> lowest label."""
    label_matrix = np.asarray(label_matrix)
    counts = np.zeros((label_matrix.shape[1], num_classes), dtype=np.int64)
    for row in label_matrix:
        counts[np.arange(label_matrix.shape[1]), row] += 1
    return counts.argmax(axis=1)


def ensemble_predict(models: Sequence[nn.Model], x: np.ndarray):
    if not models:
        raise ValueError("empty committee")
    x = np.asarray(x)
    single = x.shape == models[0].arch.input_shape
    batch = x[None] if single else x
    labels = vote(np.stack([nn.predict(m, batch) for m in models]), models[0].arch.num_classes)
    return int(labels[0]) if single else labels


@dataclass(frozen=True)
class WeightNoiseConfig:
    """``absolute``: noise std is ``sigma``.  ``relative``: std is
    ``sigma * std(layer weights)`` and ``sigma`` must lie in (0, 1)."""

    sigma: float = 0.01
    mode: str = "absolute"

    def __post_init__(self):
        if self.mode not in ("absolute", "relative"):
            raise ValueError(f"unknown noise mode {self.mode!r}")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if self.mode == "relative" and not 0 < self.sigma < 1:
            raise ValueError("relative noise scale must lie in (0, 1)")


def perturb_weights(model: nn.Model, cfg: WeightNoiseConfig, rng: np.random.Generator) -> nn.Model:
    """A new model with zero-mean Gaussian noise on every weight; biases untouched."""
    params = []
    for layer in model.params:
        if not layer:
            params.append(())
            continue
        w, b = layer
        scale = cfg.sigma if cfg.mode == "absolute" else cfg.sigma * float(np.std(w))
        noise = rng.normal(0.0, 1.0, size=w.shape) * scale
        params.append(((w + noise).astype(w.dtype), b))
    return model.with_params(tuple(params))


def build_adversarial_set(
    pool: ModelPool,
    dataset: Dataset,
    n: int,
    cw_cfg: attacks.CwConfig,
    n_sources: int = 3,
    targeted: bool = True,
    seed: int = 0,
) -> Dataset:
    """``n`` CW examples spread over the first ``n_sources`` pool members,
    labelled with their true labels."""
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(dataset), size=n, replace=False)
    chunks = np.array_split(idx, min(n_sources, len(pool)))
    images, labels = [], []
    for member, chunk in zip(pool.models, chunks):
        if len(chunk) == 0:
            continue
        x, y = dataset.images[chunk], dataset.labels[chunk]
        targets = attacks.random_targets(y, dataset.num_classes, rng) if targeted else None
        results = attacks.cw_l2_batch(member, x, y, targets, cw_cfg)
        adv, _ = attacks.stack(results)
        images.append(adv)
        labels.append(y)
    return Dataset(np.concatenate(images), np.concatenate(labels), f"{dataset.name}-adv", dataset.num_classes)


def ensemble_adversarial_train(arch: nn.Architecture, dataset: Dataset, sgd_cfg: nn.SgdConfig,
                               adversarial_set: Optional[Dataset]) -> nn.Model:
    if adversarial_set is None or len(adversarial_set) == 0:
        return nn.train(arch, dataset, sgd_cfg)
    return nn.train(arch, dataset.concat(adversarial_set), sgd_cfg)


def train_adtrain_pool(arch, dataset, sgd_cfg, adversarial_set, M: int) -> ModelPool:
    cfgs = [nn.SgdConfig(sgd_cfg.learning_rate, sgd_cfg.momentum, sgd_cfg.batch_size,
                         sgd_cfg.epochs, sgd_cfg.seed + i) for i in range(M)]
    models = [ensemble_adversarial_train(arch, dataset, c, adversarial_set) for c in cfgs]
    return ModelPool(tuple(models), arch, sgd_cfg.seed)


# ---------------------------------------------------------------------------
# scheme evaluation


class Scheme(str, enum.Enum):
    STATIC = "Static"
    RANDOM_MODEL = "RandomModel"
    ENSEMBLE = "Ensemble"
    RANDOM_WEIGHT = "RandomWeight"
    RANDOM_WEIGHT_ENSEMBLE = "RandomWeightEnsemble"
    ADTRAIN = "AdTrain"
    ADTRAIN_RANDOM = "AdTrainRandom"

    @classmethod
    def parse(cls, name: str) -> "Scheme":
        try:
            return cls(name)
        except ValueError:
            raise ValueError(f"unknown scheme {name!r}; choose from {[s.value for s in cls]}") from None


ADTRAIN_SCHEMES = (Scheme.ADTRAIN, Scheme.ADTRAIN_RANDOM)


def scheme_predict(
    target: Union[ModelPool, nn.Model],
    scheme: Union[Scheme, str],
    x: np.ndarray,
    rng: np.random.Generator,
    attacked_index: Optional[int] = None,
    noise: WeightNoiseConfig = WeightNoiseConfig(),
    committee: Optional[int] = None,
) -> np.ndarray:
    """Labels the defended system returns for each row of ``x``.

    ``attacked_index`` names the pool member the adversary probed; schemes
    built on a single model (Static, RandomWeight*, AdTrain) use that member
    when ``target`` is a pool.  Every row is a separate prediction query, so
    random draws (pool member, weight noise) are fresh per row.
    """
    scheme = Scheme.parse(scheme) if isinstance(scheme, str) else scheme
    x = np.asarray(x)
    pool = target if isinstance(target, ModelPool) else None

    def attacked() -> nn.Model:
        if pool is None:
            return target
        if attacked_index is None:
            raise SchemeMismatchError(f"{scheme.value} on a pool needs the attacked member index")
        return pool.models[attacked_index]

    if scheme in (Scheme.STATIC, Scheme.ADTRAIN):
        return nn.predict(attacked(), x)
    if scheme in (Scheme.RANDOM_MODEL, Scheme.ADTRAIN_RANDOM):
        if pool is None:
            raise SchemeMismatchError(f"{scheme.value} needs a model pool")
        picks = np.array([select_index(pool, QueryType.PREDICT, rng) for _ in range(len(x))])
        out = np.empty(len(x), dtype=np.int64)
        for i in np.unique(picks):
            rows = picks == i
            out[rows] = nn.predict(pool.models[i], x[rows])
        return out
    if scheme is Scheme.ENSEMBLE:
        if pool is None:
            raise SchemeMismatchError("Ensemble needs a model pool")
        members = pool.models if committee is None else pool.models[:committee]
        return ensemble_predict(members, x)
    base = attacked()
    if scheme is Scheme.RANDOM_WEIGHT:
        return np.array([nn.predict(perturb_weights(base, noise, rng), row) for row in x], dtype=np.int64)
    size = committee or (len(pool) if pool is not None else 10)
    out = np.empty(len(x), dtype=np.int64)
    for j, row in enumerate(x):
        out[j] = ensemble_predict([perturb_weights(base, noise, rng) for _ in range(size)], row)
    return out


def defend_eval(
    target: Union[ModelPool, nn.Model],
    scheme: Union[Scheme, str],
    adv_x: np.ndarray,
    true_labels: np.ndarray,
    rng: np.random.Generator,
    attacked_index: Optional[int] = None,
    noise: WeightNoiseConfig = WeightNoiseConfig(),
    committee: Optional[int] = None,
) -> float:
    """Fraction of adversarial rows the scheme labels correctly."""
    pred = scheme_predict(target, scheme, adv_x, rng, attacked_index, noise, committee)
    return float(np.mean(pred == np.asarray(true_labels)))


# ---------------------------------------------------------------------------
# pool directories: model_XXX.rlab files plus manifest.txt (key=value)

MANIFEST = "manifest.txt"


def save_pool(pool: ModelPool, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [f"arch_hash={pool.arch.digest()}", f"M={len(pool)}", f"base_seed={pool.base_seed}"]
    for i, m in enumerate(pool.models):
        name = f"model_{i:03d}.rlab"
        nn.save_model(m, directory / name)
        lines.append(f"model.{i}={name}")
        lines.append(f"seed.{i}={m.train_seed}")
    (directory / MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_pool(directory) -> ModelPool:
    directory = Path(directory)
    entries = {}
    for lineno, line in enumerate((directory / MANIFEST).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if "=" not in line:
            raise ValueError(f"{directory / MANIFEST}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        entries[key.strip()] = value.strip()
    M = int(entries["M"])
    models = []
    for i in range(M):
        m = nn.load_model(directory / entries[f"model.{i}"])
        if m.train_seed != int(entries[f"seed.{i}"]):
            raise ValueError(f"model {i}: seed {m.train_seed} disagrees with manifest")
        models.append(m)
    arch = models[0].arch
    if arch.digest() != entries["arch_hash"]:
        raise ValueError("architecture hash mismatch")
    return ModelPool(tuple(models), arch, int(entries["base_seed"]))


def pool_exists(directory) -> bool:
    return os.path.exists(Path(directory) / MANIFEST)
