"""Experiment protocol: repeated sample draws, one attack per budget against a
probe-selected pool member, every requested defence scheme evaluated on the
same adversarial batch, mean and sample std across repeats.

Configs are flat ``key=value`` text files; list values are comma separated.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import attacks, data, defenses, nn
from .defenses import ModelPool, Scheme

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("scheme", "budget", "acc_mean", "acc_std", "n", "dist_mean", "dist_std")
RAW_COLUMNS = ("scheme", "budget", "repeat", "accuracy", "n_samples", "distortion", "success_rate", "attacked_index")


class ConfigError(ValueError):
    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None):
        where = "" if line is None else f"line {line}: "
        super().__init__(f"{where}{message}")
        self.key, self.line = key, line


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str = "blobs"
    train_subset: int = 0  # 0 keeps the whole training split
    eval_samples: int = 100
    repeats: int = 1
    pool_size: int = 10
    attack: str = "cw_l2"
    budgets: tuple = (0.0, 5.0, 10.0, 20.0)
    targeted: bool = True
    schemes: tuple = ("Static", "RandomModel", "Ensemble")
    seed: int = 0
    data_dir: str = ""
    out_path: str = "report.csv"
    pool_dir: str = ""  # reuse or cache trained pools here
    # model and training
    arch: str = "mlp"
    hidden: tuple = (16,)
    epochs: int = 20
    learning_rate: float = 0.1
    momentum: float = 0.9
    batch_size: int = 16
    # synthetic data
    n_per_class: int = 200
    noise_std: float = 0.08
    # attack knobs
    cw_c_init: float = 0.1
    cw_search_steps: int = 6
    cw_iters: int = 100
    cw_lr: float = 0.1
    cw_warm_start: bool = False
    pgd_steps: int = 10
    pgd_draws: int = 1
    # defence knobs
    noise_sigma: float = 0.01
    noise_mode: str = "absolute"
    committee: int = 0  # 0 means the whole pool
    adtrain_pool_size: int = 3
    adtrain_samples: int = 1000

    def __post_init__(self):
        if self.dataset not in ("mnist", "blobs", "circles"):
            raise ConfigError(f"dataset must be mnist, blobs or circles, got {self.dataset!r}", "dataset")
        if self.attack not in ("cw_l2", "pgd_linf"):
            raise ConfigError(f"attack must be cw_l2 or pgd_linf, got {self.attack!r}", "attack")
        if self.arch not in ("mlp", "desk", "full"):
            raise ConfigError(f"arch must be mlp, desk or full, got {self.arch!r}", "arch")
        for key in ("repeats", "eval_samples", "pool_size", "adtrain_pool_size"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1", key)
        if self.train_subset < 0 or self.committee < 0:
            raise ConfigError("train_subset and committee must be >= 0")
        if not self.budgets:
            raise ConfigError("budgets must not be empty", "budgets")
        for name in self.schemes:
            try:
                Scheme.parse(name)
            except ValueError as err:
                raise ConfigError(str(err), "schemes") from None
        if self.noise_mode not in ("absolute", "relative"):
            raise ConfigError(f"noise_mode must be absolute or relative, got {self.noise_mode!r}", "noise_mode")

    # -- derived pieces ---------------------------------------------------

    def architecture(self, input_shape: tuple, num_classes: int) -> nn.Architecture:
        if self.arch == "desk":
            return nn.mnist_desk_arch()
        if self.arch == "full":
            return nn.mnist_full_arch()
        return nn.mlp_arch(int(np.prod(input_shape)), tuple(self.hidden), num_classes)

    def sgd(self, seed: Optional[int] = None) -> nn.SgdConfig:
        return nn.SgdConfig(self.learning_rate, self.momentum, self.batch_size, self.epochs,
                            self.seed if seed is None else seed)

    def attack_config(self, budget: float):
        if self.attack == "cw_l2":
            return attacks.CwConfig(confidence=budget, c_init=self.cw_c_init, c_search_steps=self.cw_search_steps,
                                    inner_iters=self.cw_iters, inner_lr=self.cw_lr,
                                    warm_start=self.cw_warm_start)
        return attacks.PgdConfig(epsilon=budget, steps=self.pgd_steps, randomness_draws=self.pgd_draws,
                                 targeted=self.targeted)

    def noise(self) -> defenses.WeightNoiseConfig:
        return defenses.WeightNoiseConfig(self.noise_sigma, self.noise_mode)

    @property
    def norm(self) -> str:
        return "L2" if self.attack == "cw_l2" else "Linf"


# ---------------------------------------------------------------------------
# key=value config files

_FIELDS = {f.name: f for f in fields(ExperimentConfig)}
_LIST_KINDS = {"budgets": float, "schemes": str, "hidden": int}


def _parse_value(key: str, text: str, line: Optional[int]):
    default = _FIELDS[key].default
    try:
        if key in _LIST_KINDS:
            items = [t.strip() for t in text.split(",") if t.strip()]
            return tuple(_LIST_KINDS[key](t) for t in items)
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(text)
            return low in ("1", "true", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"bad value {text!r} for key {key!r}", key, line) from None


def parse_config(text: str, overrides: Optional[dict] = None) -> ExperimentConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected key=value, got {line!r}", line.split()[0], lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"unknown key {key!r}", key, lineno)
        if key in values:
            raise ConfigError(f"duplicate key {key!r}", key, lineno)
        values[key] = _parse_value(key, value, lineno)
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    try:
        return ExperimentConfig(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from None


def read_config(path, **overrides) -> ExperimentConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"), overrides)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_config(cfg: ExperimentConfig) -> str:
    return "".join(f"{f.name}={_format_value(getattr(cfg, f.name))}\n" for f in fields(cfg))


def write_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(format_config(cfg), encoding="utf-8", newline="\n")


# ---------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class ReportRow:
    scheme: str
    budget: float
    acc_mean: float
    acc_std: float
    n: int
    dist_mean: float
    dist_std: float

    def __post_init__(self):
        if not 0.0 <= self.acc_mean <= 1.0:
            raise ValueError("accuracy must lie in [0, 1]")
        if self.acc_std < 0:
            raise ValueError("std must be non-negative")


@dataclass(frozen=True)
class RawRow:
    scheme: str
    budget: float
    repeat: int
    accuracy: float
    n_samples: int
    distortion: float
    success_rate: float
    attacked_index: int


@dataclass
class ExperimentReport:
    rows: list
    raw: list
    config: ExperimentConfig
    wall_time: float = 0.0
    notes: list = field(default_factory=list)

    def row(self, scheme: str, budget: float) -> ReportRow:
        for r in self.rows:
            if r.scheme == scheme and r.budget == budget:
                return r
        raise KeyError((scheme, budget))


def _mean_std(values) -> tuple[float, float]:
    values = [v for v in values if not math.isnan(v)]
    if not values:
        return math.nan, math.nan
    mean = float(np.mean(values))
    std = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
    return mean, std


def aggregate(raw: list) -> list:
    """Per (scheme, budget) mean and sample std across repeats, in first-seen order."""
    cells: dict = {}
    for r in raw:
        cells.setdefault((r.scheme, r.budget), []).append(r)
    rows = []
    for (scheme, budget), group in cells.items():
        acc_mean, acc_std = _mean_std([g.accuracy for g in group])
        dist_mean, dist_std = _mean_std([g.distortion for g in group])
        rows.append(ReportRow(scheme, budget, acc_mean, acc_std, len(group), dist_mean, dist_std))
    return rows


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.6f}"


def _exact(x: float) -> str:
    # raw rows keep full precision so re-aggregation reproduces the report
    return "nan" if math.isnan(x) else repr(float(x))


def _fmt_budget(b: float) -> str:
    return f"{b:g}"


def write_report(report: ExperimentReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in report.rows:
            w.writerow([r.scheme, _fmt_budget(r.budget), _fmt(r.acc_mean), _fmt(r.acc_std), r.n,
                        _fmt(r.dist_mean), _fmt(r.dist_std)])


def raw_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".raw.csv")


def write_raw(raw: list, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RAW_COLUMNS)
        for r in raw:
            w.writerow([r.scheme, _fmt_budget(r.budget), r.repeat, _exact(r.accuracy), r.n_samples,
                        _exact(r.distortion), _exact(r.success_rate), r.attacked_index])


def read_raw(path) -> list:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != RAW_COLUMNS:
            raise ValueError(f"{path}: expected columns {','.join(RAW_COLUMNS)}")
        for row in reader:
            out.append(RawRow(row["scheme"], float(row["budget"]), int(row["repeat"]), float(row["accuracy"]),
                              int(row["n_samples"]), float(row["distortion"]), float(row["success_rate"]),
                              int(row["attacked_index"])))
    return out


def read_report(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        return [ReportRow(r["scheme"], float(r["budget"]), float(r["acc_mean"]), float(r["acc_std"]), int(r["n"]),
                          float(r["dist_mean"]), float(r["dist_std"]))
                for r in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# data and pools


def load_data(cfg: ExperimentConfig) -> tuple[data.Dataset, data.Dataset]:
    """(train, test) for the configured dataset."""
    if cfg.dataset == "mnist":
        directory = cfg.data_dir or None
        train = data.load_mnist("train", directory)
        test = data.load_mnist("test", directory)
        if cfg.train_subset and cfg.train_subset < len(train):
            train = train.subset(data.sample_indices(len(train), cfg.train_subset, cfg.seed))
        return train, test
    spec = data.SyntheticSpec(cfg.dataset, cfg.n_per_class, cfg.noise_std, cfg.seed)
    train = data.make_synthetic(spec)
    test = data.make_synthetic(replace(spec, seed=cfg.seed + 10_000))
    return train, test


def _pool_matches(pool: ModelPool, arch: nn.Architecture, size: int, seed: int) -> bool:
    return pool.arch == arch and len(pool) >= size and pool.base_seed == seed


def get_pool(cfg: ExperimentConfig, train: data.Dataset, threads: int = 1) -> ModelPool:
    arch = cfg.architecture(train.sample_shape, train.num_classes)
    directory = Path(cfg.pool_dir) / "pool" if cfg.pool_dir else None
    if directory is not None and defenses.pool_exists(directory):
        pool = defenses.load_pool(directory)
        if _pool_matches(pool, arch, cfg.pool_size, cfg.seed):
            return ModelPool(pool.models[: cfg.pool_size], arch, pool.base_seed)
        log.warning("cached pool in %s does not match the config; retraining", directory)
    pool = defenses.train_pool(arch, train, cfg.sgd(), cfg.pool_size, threads)
    if directory is not None:
        defenses.save_pool(pool, directory)
    return pool


def get_adtrain_pool(cfg: ExperimentConfig, train: data.Dataset, pool: ModelPool) -> ModelPool:
    """Models retrained on the training set plus CW examples from plain pool members."""
    arch = pool.arch
    directory = Path(cfg.pool_dir) / "adtrain" if cfg.pool_dir else None
    # AdTrain members get seeds disjoint from the plain pool
    seed = cfg.seed + 1000
    if directory is not None and defenses.pool_exists(directory):
        cached = defenses.load_pool(directory)
        if _pool_matches(cached, arch, cfg.adtrain_pool_size, seed):
            return ModelPool(cached.models[: cfg.adtrain_pool_size], arch, seed)
    cw = replace(cfg, attack="cw_l2").attack_config(0.0)
    n = min(cfg.adtrain_samples, len(train))
    adv = defenses.build_adversarial_set(pool, train, n, cw, n_sources=3, seed=cfg.seed)
    adpool = defenses.train_adtrain_pool(arch, train, cfg.sgd(seed), adv, cfg.adtrain_pool_size)
    if directory is not None:
        defenses.save_pool(adpool, directory)
    return adpool


# ---------------------------------------------------------------------------
# protocol


@dataclass
class AttackBatch:
    budget: float
    attacked_index: int
    results: list
    indices: np.ndarray


def _attack(cfg: ExperimentConfig, pool: ModelPool, index: int, x, y, targets, budget, rng) -> list:
    model = pool.models[index]
    acfg = cfg.attack_config(budget)
    if cfg.attack == "cw_l2":
        return attacks.cw_l2_batch(model, x, y, targets, acfg)
    if cfg.pgd_draws > 1:
        noise = cfg.noise()
        sampler = lambda g: defenses.perturb_weights(model, noise, g)  # noqa: E731
        return attacks.pgd_linf_batch(sampler, x, y, targets, acfg, rng, judge=model)
    return attacks.pgd_linf_batch(model, x, y, targets, acfg, rng)


def attack_stage(cfg: ExperimentConfig, pool: ModelPool, test: data.Dataset, repeat: int) -> list:
    """One adversarial batch per budget for this repeat."""
    idx = data.sample_indices(len(test), cfg.eval_samples, cfg.seed + repeat)
    x, y = test.images[idx], test.labels[idx]
    rng = np.random.default_rng([cfg.seed, repeat, 1])
    attacked = defenses.select_index(pool, defenses.QueryType.PROBE, rng)
    targets = None
    if cfg.targeted:
        targets = attacks.random_targets(y, test.num_classes, rng)
    batches = []
    for budget in cfg.budgets:
        results = _attack(cfg, pool, attacked, x, y, targets, float(budget), rng)
        if not any(r.success for r in results):
            log.warning("attack failed on every sample at budget %g (repeat %d)", budget, repeat)
        batches.append(AttackBatch(float(budget), attacked, results, idx))
    return batches


def defend_stage(cfg: ExperimentConfig, pool: ModelPool, batches: list, repeat: int, schemes=None) -> list:
    schemes = [Scheme.parse(s) for s in (schemes or cfg.schemes)]
    rows = []
    for batch in batches:
        adv, labels = attacks.stack(batch.results)
        dist = attacks.mean_distortion(batch.results, cfg.norm)
        succ = attacks.success_rate(batch.results)
        for scheme in schemes:
            rng = np.random.default_rng([cfg.seed, repeat, 2, int(round(batch.budget * 1000)), list(Scheme).index(scheme)])
            acc = defenses.defend_eval(pool, scheme, adv, labels, rng, batch.attacked_index, cfg.noise(),
                                       cfg.committee or None)
            rows.append(RawRow(scheme.value, batch.budget, repeat, acc, len(labels), dist, succ, batch.attacked_index))
    return rows


def _order(raw: list, cfg: ExperimentConfig) -> list:
    scheme_pos = {s: i for i, s in enumerate(cfg.schemes)}
    return sorted(raw, key=lambda r: (scheme_pos[r.scheme], cfg.budgets.index(r.budget), r.repeat))


def run_experiment(cfg: ExperimentConfig, threads: int = 1, pool: Optional[ModelPool] = None,
                   adtrain_pool: Optional[ModelPool] = None) -> ExperimentReport:
    """Full pipeline; the result depends only on the config and the data."""
    start = time.perf_counter()
    train, test = load_data(cfg)
    if cfg.eval_samples > len(test):
        raise ConfigError(f"eval_samples={cfg.eval_samples} exceeds the {len(test)} test samples", "eval_samples")
    pool = pool or get_pool(cfg, train, threads)
    plain = [s for s in cfg.schemes if Scheme.parse(s) not in defenses.ADTRAIN_SCHEMES]
    adtrain = [s for s in cfg.schemes if Scheme.parse(s) in defenses.ADTRAIN_SCHEMES]
    if adtrain and adtrain_pool is None:
        adtrain_pool = get_adtrain_pool(cfg, train, pool)
    raw = []
    for r in range(cfg.repeats):
        if plain:
            raw += defend_stage(cfg, pool, attack_stage(cfg, pool, test, r), r, plain)
        if adtrain:
            # white-box against the adversarially trained models themselves
            raw += defend_stage(cfg, adtrain_pool, attack_stage(cfg, adtrain_pool, test, r), r, adtrain)
    raw = _order(raw, cfg)
    return ExperimentReport(aggregate(raw), raw, cfg, time.perf_counter() - start)


def save_report(report: ExperimentReport, path) -> None:
    write_report(report, path)
    write_raw(report.raw, raw_path(path))
