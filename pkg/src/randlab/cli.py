"""Command-line entry point.

    randlab {train,pool,attack,defend,entropy,report,run} --config FILE [flags]

Exit codes: 0 success, 2 config error, 3 data error, 4 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import attacks, data, defenses, metrics, nn
from .experiment import (
    AttackBatch, ConfigError, aggregate, attack_stage, defend_stage, get_adtrain_pool, get_pool, load_data,
    read_config, read_raw, save_report, write_report, ExperimentReport, _order,
)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4
ATTACK_INDEX = "attacks.csv"

log = logging.getLogger("randlab")


def _config(args, **extra):
    overrides = {"seed": args.seed, "out_path": args.out, "data_dir": args.data_dir, **extra}
    return read_config(args.config, **overrides)


def _split_schemes(cfg):
    plain = [s for s in cfg.schemes if defenses.Scheme.parse(s) not in defenses.ADTRAIN_SCHEMES]
    adtrain = [s for s in cfg.schemes if defenses.Scheme.parse(s) in defenses.ADTRAIN_SCHEMES]
    return plain, adtrain


def _pools(cfg, train, threads):
    pool = get_pool(cfg, train, threads)
    _, adtrain = _split_schemes(cfg)
    return pool, (get_adtrain_pool(cfg, train, pool) if adtrain else None)


def cmd_train(args) -> int:
    cfg = _config(args)
    train, test = load_data(cfg)
    arch = cfg.architecture(train.sample_shape, train.num_classes)
    model = nn.train(arch, train, cfg.sgd())
    out = args.out or "model.rlab"
    nn.save_model(model, out)
    print(f"test accuracy {nn.accuracy(model, test.images, test.labels):.4f} -> {out}")
    return EXIT_OK


def cmd_pool(args) -> int:
    cfg = _config(args)
    out = args.out or cfg.pool_dir or "pool"
    cfg = _config(args, pool_dir=out)
    train, test = load_data(cfg)
    pool, adpool = _pools(cfg, train, args.threads)
    for i, m in enumerate(pool.models):
        print(f"member {i} seed {m.train_seed} test accuracy {nn.accuracy(m, test.images, test.labels):.4f}")
    if adpool is not None:
        print(f"adversarially trained pool of {len(adpool)} saved under {Path(out) / 'adtrain'}")
    return EXIT_OK


def cmd_attack(args) -> int:
    cfg = _config(args)
    out = Path(args.out or "attacks")
    out.mkdir(parents=True, exist_ok=True)
    train, test = load_data(cfg)
    pool, adpool = _pools(cfg, train, args.threads)
    plain, adtrain = _split_schemes(cfg)
    families = ([("plain", pool)] if plain else []) + ([("adtrain", adpool)] if adtrain else [])
    with open(out / ATTACK_INDEX, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["family", "repeat", "budget", "attacked_index", "stem"])
        for family, target in families:
            for r in range(cfg.repeats):
                for batch in attack_stage(cfg, target, test, r):
                    stem = f"{family}_r{r}_b{batch.budget:g}"
                    attacks.save_adv_batch(out / stem, batch.results, batch.indices)
                    w.writerow([family, r, f"{batch.budget:g}", batch.attacked_index, stem])
                    print(f"{stem}: success {attacks.success_rate(batch.results):.3f}")
    return EXIT_OK


def cmd_defend(args) -> int:
    cfg = _config(args)
    src = Path(args.attacks)
    train, test = load_data(cfg)
    pool, adpool = _pools(cfg, train, args.threads)
    plain, adtrain = _split_schemes(cfg)
    raw = []
    with open(src / ATTACK_INDEX, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            family = row["family"]
            target, schemes = (pool, plain) if family == "plain" else (adpool, adtrain)
            if not schemes:
                continue
            results, indices = attacks.load_adv_batch(src / row["stem"], test.sample_shape)
            batch = AttackBatch(float(row["budget"]), int(row["attacked_index"]), results, np.asarray(indices))
            raw += defend_stage(cfg, target, [batch], int(row["repeat"]), schemes)
    report = ExperimentReport(aggregate(_order(raw, cfg)), _order(raw, cfg), cfg)
    save_report(report, args.out or cfg.out_path)
    _print_rows(report.rows)
    return EXIT_OK


def cmd_entropy(args) -> int:
    cfg = _config(args)
    train, _ = load_data(cfg)
    pool = get_pool(cfg, train, args.threads)
    rep = metrics.weight_entropy(pool)
    rep.write_csv(args.out or "entropy.csv")
    print(f"median per-node log-det {rep.median():.3f} over {len(rep.all_values())} nodes")
    return EXIT_OK


def cmd_report(args) -> int:
    raw = read_raw(args.raw)
    rows = aggregate(raw)
    out = args.out or str(Path(args.raw).with_name("report.csv"))
    write_report(ExperimentReport(rows, raw, None), out)
    _print_rows(rows)
    return EXIT_OK


def cmd_run(args) -> int:
    from .experiment import run_experiment

    cfg = _config(args)
    report = run_experiment(cfg, threads=args.threads)
    save_report(report, cfg.out_path)
    _print_rows(report.rows)
    print(f"wall time {report.wall_time:.1f}s", file=sys.stderr)
    return EXIT_OK


def _print_rows(rows) -> None:
    for r in rows:
        print(f"{r.scheme:>22} {r.budget:>6g}  acc {r.acc_mean:.3f} +/- {r.acc_std:.3f} (n={r.n})"
              f"  dist {r.dist_mean:.3f}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="randlab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="key=value experiment config")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--data-dir", help="MNIST IDX directory (overrides $%s)" % data.DATA_ENV)
        p.add_argument("--threads", type=int, default=1)
        return p

    common(sub.add_parser("train", help="train one model")).set_defaults(func=cmd_train)
    common(sub.add_parser("pool", help="train and save the model pool(s)")).set_defaults(func=cmd_pool)
    common(sub.add_parser("attack", help="craft adversarial batches")).set_defaults(func=cmd_attack)
    p = common(sub.add_parser("defend", help="evaluate schemes on saved batches"))
    p.add_argument("--attacks", required=True, help="directory written by 'attack'")
    p.set_defaults(func=cmd_defend)
    common(sub.add_parser("entropy", help="per-node weight entropy of the pool")).set_defaults(func=cmd_entropy)
    p = sub.add_parser("report", help="aggregate raw per-repeat rows")
    p.add_argument("raw")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    common(sub.add_parser("run", help="full pipeline")).set_defaults(func=cmd_run)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "threads", 1) < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (data.DataError, FileNotFoundError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (nn.TrainingDivergedError, ValueError, RuntimeError, OSError) as err:
        print(f"runtime failure: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
