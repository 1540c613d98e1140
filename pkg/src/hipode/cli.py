"""Command-line entry point: ``hipode <subcommand> [options]``.

Every option maps onto a run-config key, so ``--config run.ini --eta 0.3``
loads the file and then overrides ``augment.eta``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import envs as envs_mod
from . import experiments as ex
from .augment import HipodeModels
from .config import RunConfig
from .policy import TD3BC, evaluate, normalized_score, reference_returns

# option dest -> config key
CONFIG_KEYS = {
    "env": "env",
    "kind": "dataset_kind",
    "size": "dataset_size",
    "discount": "discount",
    "seeds": "seeds",
    "eta": "augment.eta",
    "selecting_rate": "augment.selecting_rate",
    "n_candidates": "augment.n_candidates",
    "penalty_weight": "augment.penalty_weight",
    "penalty_scope": "augment.penalty_scope",
    "mode": "augment.mode",
    "ablation": "augment.ablation",
    "cvae_epochs": "models.cvae_epochs",
    "value_steps": "models.value_steps",
    "dynamics_steps": "models.dynamics_steps",
    "steps": "policy.steps",
    "episodes": "policy.eval_episodes",
    "eval_seed": "policy.eval_seed",
}


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    for dest, key in CONFIG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            cfg.set(key, value)
    if getattr(args, "seed", None) is not None:
        cfg.seeds = [args.seed]
    return cfg


def _seed(cfg: RunConfig) -> int:
    return cfg.seeds[0]


def _add_common(p, *groups):
    p.add_argument("--config", help="run-config file; options below override its keys")
    p.add_argument("--env", help="environment name (pointmass2d or chain1d)")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--discount", type=float)
    if "models" in groups:
        p.add_argument("--cvae-epochs", dest="cvae_epochs", type=int)
        p.add_argument("--value-steps", dest="value_steps", type=int)
        p.add_argument("--dynamics-steps", dest="dynamics_steps", type=int)
        p.add_argument("--alpha", "--penalty-weight", dest="penalty_weight", type=float, help="negative-sampling penalty weight")
        p.add_argument("--sigma", dest="penalty_scope", type=float, help="negative-sampling perturbation scale")
    if "augment" in groups:
        p.add_argument("--eta", type=float, help="synthetic rate")
        p.add_argument("--lambda", dest="selecting_rate", type=float, help="fraction of the pool kept by the dynamics filter")
        p.add_argument("--n", dest="n_candidates", type=int, help="candidates per source state")
        p.add_argument("--mode", choices=("offline_merge", "realtime"))
        p.add_argument("--ablation", help="hipode, nov, repeat, quality, none or noise:<sigma>")
    if "policy" in groups:
        p.add_argument("--steps", type=int, help="TD3+BC gradient steps")
    if "eval" in groups:
        p.add_argument("--episodes", type=int)
        p.add_argument("--eval-seed", dest="eval_seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hipode", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("collect", help="roll a scripted behavior policy into a dataset file")
    _add_common(p)
    p.add_argument("--kind", help="random, medium, expert, medium_replay or noisy:<sigma>")
    p.add_argument("--size", type=int, help="number of transitions")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-models", help="train the five generator models on a dataset")
    _add_common(p, "models")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="output directory for checkpoints")

    p = sub.add_parser("augment", help="write a merged dataset with synthetic transitions")
    _add_common(p, "models", "augment")
    p.add_argument("--dataset", required=True)
    p.add_argument("--models", help="checkpoint directory from train-models; trained on the fly if omitted")
    p.add_argument("--out", required=True, help="merged dataset path; sidecars use the same stem")

    p = sub.add_parser("train-policy", help="train TD3+BC on a dataset file")
    _add_common(p, "policy")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="policy checkpoint path")

    p = sub.add_parser("evaluate", help="roll out a trained policy")
    _add_common(p, "eval")
    p.add_argument("--policy", required=True)
    p.add_argument("--out", help="returns as TSV (stdout if omitted)")

    p = sub.add_parser("analyze", help="oracle-value densities of real vs synthetic transitions")
    _add_common(p)
    p.add_argument("--dataset", required=True, help="merged dataset produced by augment")
    p.add_argument("--bins", type=int, default=30)
    p.add_argument("--out", help="JSON report (stdout if omitted)")

    p = sub.add_parser("suite", help="run a desk-scale study")
    _add_common(p, "models", "augment", "policy", "eval")
    p.add_argument("name", choices=("quality-vs-diversity", "ablation", "density", "pessimism"))
    p.add_argument("--size", type=int, help="transitions per collected dataset")
    p.add_argument("--seeds", help="comma-separated master seeds")
    p.add_argument("--out", required=True, help="TSV table")

    p = sub.add_parser("run", help="full pipeline from a run config")
    _add_common(p, "models", "augment", "policy", "eval")
    p.add_argument("--kind", help="behavior policy for the collected dataset")
    p.add_argument("--size", type=int)
    p.add_argument("--seeds", help="comma-separated master seeds")
    p.add_argument("--out", help="output directory")
    return parser


# -- handlers ---------------------------------------------------------------------


def cmd_collect(args, cfg):
    dataset = ex.get_dataset(cfg, _seed(cfg), cfg.dataset_kind)
    data_mod.save(dataset, args.out)
    print(f"{args.out}\t{dataset.size}\t{dataset.checksum()}")


def cmd_train_models(args, cfg):
    dataset = data_mod.load(args.dataset)
    models = ex.fit_models(cfg, dataset, _seed(cfg))
    models.save(args.out)
    (Path(args.out) / "training.json").write_text(json.dumps(models.training_report(), indent=2, sort_keys=True))
    print(args.out)


def cmd_augment(args, cfg):
    seed = _seed(cfg)
    dataset = data_mod.load(args.dataset)
    augmenter = ex.make_augmenter(cfg, seed)
    models = HipodeModels.load(args.models) if args.models else None
    if models is None and ex.ablation_mode(cfg.augment.ablation).needs_models:
        models = ex.fit_models(cfg, dataset, seed)
    augmenter.fit(dataset, models=models)
    merged = augmenter.transform(dataset)
    out = Path(args.out)
    data_mod.save(merged, out)
    merged.provenance.write_provenance(out.with_suffix(".provenance.tsv"))
    out.with_suffix(".report.json").write_text(json.dumps(ex.generation_report(merged.provenance), indent=2, sort_keys=True))
    print(f"{out}\t{merged.size}\t{len(merged.provenance)}\t{merged.checksum()}")


def cmd_train_policy(args, cfg):
    dataset = data_mod.load(args.dataset)
    policy = ex.make_policy(cfg, _seed(cfg)).fit(dataset)
    policy.save(args.out)
    curve = Path(args.out).with_suffix(".curve.tsv")
    ex.write_curve(policy.learning_curve_, curve)
    print(f"{args.out}\t{curve}")


def cmd_evaluate(args, cfg):
    env = envs_mod.make_env(cfg.env)
    policy = TD3BC.load(args.policy)
    mean, std, returns = evaluate(policy, env, cfg.policy.eval_episodes, cfg.policy.eval_seed)
    ref = reference_returns(env, cfg.policy.eval_episodes, cfg.policy.eval_seed)
    lines = ["episode\treturn"] + [f"{i}\t{float(r)!r}" for i, r in enumerate(returns)]
    summary = f"# mean {mean:.6g} std {std:.6g} normalized {normalized_score(mean, ref['random'], ref['expert']):.4g}"
    _emit("\n".join(lines + [summary]) + "\n", args.out)


def cmd_analyze(args, cfg):
    merged = data_mod.load(args.dataset)
    n_real = int(merged.metadata.get("n_original", merged.size))
    real = merged.subset(np.arange(n_real))
    synthetic = merged.subset(np.arange(n_real, merged.size))
    report = ex.analyze_density(real, synthetic, envs_mod.make_env(cfg.env), bins=args.bins, discount=cfg.discount)
    _emit(json.dumps(report, indent=2, sort_keys=True) + "\n", args.out)


def cmd_suite(args, cfg):
    seeds = cfg.seeds
    rows = []
    if args.name == "quality-vs-diversity":
        table = ex.quality_vs_diversity(cfg, seeds)
        rows = [("medium", c, s, v) for c, vals in table.items() for s, v in zip(seeds, vals)]
    elif args.name == "ablation":
        table = ex.comparison_table(cfg, ("random", "medium"), ("none", "hipode", "nov", "repeat"), seeds)
        rows = [(k, c, s, v) for k, cols in table.items() for c, vals in cols.items() for s, v in zip(seeds, vals)]
    elif args.name == "density":
        for r in ex.density_study(cfg, seeds):
            rows += [("medium_replay", "real", r["seed"], r["real_mean"]), ("medium_replay", "synthetic", r["seed"], r["synthetic_mean"])]
    else:
        for kind, cells in ex.pessimism_study(cfg, ("random", "medium", "expert"), seeds).items():
            for c in cells:
                rows += [(kind, key, c["seed"], c[key]) for key in ("v_data", "v_sigma", "v_2sigma")]
    text = "dataset\tcondition\tseed\tvalue\n" + "".join(f"{k}\t{c}\t{s}\t{v!r}\n" for k, c, s, v in rows)
    _emit(text, args.out)


def cmd_run(args, cfg):
    if args.out:
        cfg.output_dir = args.out
    report = ex.pipeline(cfg, argv=["hipode"] + list(args.argv))
    for seed, entry in report["seeds"].items():
        ev = entry["evaluation"]
        print(f"seed {seed}\tmean_return {ev['mean_return']:.6g}\tnormalized {ev['normalized_score']:.4g}")


def _emit(text, path):
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


HANDLERS = {
    "collect": cmd_collect,
    "train-models": cmd_train_models,
    "augment": cmd_augment,
    "train-policy": cmd_train_policy,
    "evaluate": cmd_evaluate,
    "analyze": cmd_analyze,
    "suite": cmd_suite,
    "run": cmd_run,
}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        HANDLERS[args.command](args, cfg)
    except ex.PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
