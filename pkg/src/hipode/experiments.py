"""End-to-end runs: collect, train the generators, augment, learn a policy, evaluate.

Also hosts the desk-scale studies (quality vs diversity, ablations, value
density shift, value pessimism) that the ``suite`` command and the
acceptance tests share.
"""

from __future__ import annotations

import hashlib
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from . import data as data_mod
from . import envs as envs_mod
from .augment import HipodeAugmenter, HipodeModels, ablation_mode, train_models
from .config import RunConfig
from .data import TransitionDataset, derive_seed
from .policy import TD3BC, evaluate, normalized_score, reference_returns

logger = logging.getLogger(__name__)

QUALITY_VS_DIVERSITY = ("none", "quality", "noise:0.01", "noise:0.1", "noise:1.0")


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"pipeline stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


# -- building blocks ---------------------------------------------------------------


def get_dataset(cfg: RunConfig, seed: int, kind: str | None = None) -> TransitionDataset:
    if cfg.dataset and kind is None:
        return data_mod.load(cfg.dataset)
    kind = kind or cfg.dataset_kind
    env = envs_mod.make_env(cfg.env)
    return envs_mod.collect(env, envs_mod.BehaviorPolicySpec.parse(kind), cfg.dataset_size, derive_seed(seed, f"collect:{kind}"))


def fit_models(cfg: RunConfig, dataset: TransitionDataset, seed: int) -> HipodeModels:
    m = cfg.models
    return train_models(
        dataset,
        derive_seed(seed, "models"),
        penalty_weight=cfg.augment.penalty_weight,
        penalty_scope=cfg.augment.penalty_scope,
        discount=cfg.discount,
        cvae_hidden=m.cvae_hidden,
        cvae_epochs=m.cvae_epochs,
        hidden_units=m.hidden_units,
        value_steps=m.value_steps,
        dynamics_steps=m.dynamics_steps,
        batch_size=m.batch_size,
        learning_rate=m.learning_rate,
    )


def make_augmenter(cfg: RunConfig, seed: int, ablation: str | None = None) -> HipodeAugmenter:
    a, m = cfg.augment, cfg.models
    return HipodeAugmenter(
        synthetic_rate=a.eta,
        selecting_rate=a.selecting_rate,
        n_candidates=a.n_candidates,
        penalty_weight=a.penalty_weight,
        penalty_scope=a.penalty_scope,
        mode=a.mode,
        ablation=ablation or a.ablation,
        generation_batch=a.generation_batch,
        dynamics_mode=a.dynamics_mode,
        clip_reward=a.clip_reward,
        discount=cfg.discount,
        cvae_hidden=m.cvae_hidden,
        cvae_epochs=m.cvae_epochs,
        hidden_units=m.hidden_units,
        value_steps=m.value_steps,
        dynamics_steps=m.dynamics_steps,
        env=envs_mod.make_env(cfg.env),
        random_state=derive_seed(seed, "augmenter"),
    )


def make_policy(cfg: RunConfig, seed: int) -> TD3BC:
    p = cfg.policy
    return TD3BC(
        hidden_units=p.hidden_units,
        discount=cfg.discount,
        bc_weight=p.bc_weight,
        n_steps=p.steps,
        batch_size=p.batch_size,
        learning_rate=p.learning_rate,
        random_state=derive_seed(seed, "policy"),
    )


def score_policy(cfg: RunConfig, policy) -> dict:
    env = envs_mod.make_env(cfg.env)
    mean, std, returns = evaluate(policy, env, cfg.policy.eval_episodes, cfg.policy.eval_seed)
    ref = reference_returns(env, cfg.policy.eval_episodes, cfg.policy.eval_seed)
    return {
        "mean_return": mean,
        "std_return": std,
        "returns": returns.tolist(),
        "normalized_score": float(normalized_score(mean, ref["random"], ref["expert"])),
        "reference": ref,
    }


@dataclass
class ConditionResult:
    condition: str
    seed: int
    score: dict
    augmenter: HipodeAugmenter | None
    training_data: TransitionDataset
    policy: TD3BC

    @property
    def normalized(self) -> float:
        return self.score["normalized_score"]

    @property
    def mean_return(self) -> float:
        return self.score["mean_return"]


def run_condition(cfg: RunConfig, dataset: TransitionDataset, condition: str, seed: int, models=None) -> ConditionResult:
    """Train and score a policy on ``dataset`` augmented under ``condition`` (an ablation name)."""
    if condition == "none":
        augmenter, train_data, source = None, dataset, None
    else:
        augmenter = make_augmenter(cfg, seed, condition)
        augmenter.fit(dataset, models=models if ablation_mode(condition).needs_models else None)
        if cfg.augment.mode == "realtime":
            train_data = dataset
            source = augmenter.realtime_batch
        else:
            train_data, source = augmenter.transform(dataset), None
    policy = make_policy(cfg, seed).fit(train_data, batch_source=source)
    return ConditionResult(condition, seed, score_policy(cfg, policy), augmenter, train_data, policy)


# -- analysis ---------------------------------------------------------------------


def analyze_density(
    dataset: TransitionDataset,
    synthetic,
    env: envs_mod.EnvSpec,
    bins: int = 30,
    value_range: tuple[float, float] | None = None,
    discount: float = envs_mod.DEFAULT_DISCOUNT,
) -> dict:
    """Histogram ``r + V*(s')`` for real and synthetic transitions on a shared binning.

    Synthetic next states that stray outside the environment box are clipped
    onto it before the oracle is queried.
    """
    def quality(rewards, next_states):
        s2 = np.clip(np.atleast_2d(next_states), env.low, env.high)
        return envs_mod.transition_quality(env, rewards, s2, discount)

    real = quality(dataset.rewards, dataset.next_states)
    syn = quality(synthetic.rewards, synthetic.next_states) if len(synthetic) else np.empty(0)
    if value_range is None:
        both = np.concatenate([real, syn])
        value_range = (float(both.min()), float(both.max()))
        if value_range[0] == value_range[1]:
            value_range = (value_range[0] - 0.5, value_range[1] + 0.5)
    edges = np.linspace(value_range[0], value_range[1], bins + 1)

    def summary(values):
        if not len(values):
            return {"count": 0, "density": [0.0] * bins, "mean": float("nan"), "median": float("nan")}
        density, _ = np.histogram(values, bins=edges, density=True)
        return {
            "count": int(len(values)),
            "density": density.tolist(),
            "mean": float(values.mean()),
            "median": float(np.median(values)),
        }

    return {
        "bins": bins,
        "range": list(value_range),
        "edges": edges.tolist(),
        "real": summary(real),
        "synthetic": summary(syn),
    }


def generation_report(synthetic) -> dict:
    def hist(values, bins=20):
        values = np.asarray(values, dtype=np.float64)
        values = values[np.isfinite(values)]
        if not len(values):
            return {"counts": [], "edges": []}
        counts, edges = np.histogram(values, bins=bins)
        return {"counts": counts.tolist(), "edges": edges.tolist()}

    return {
        "count": len(synthetic),
        "selected_value": hist(synthetic.selected_value),
        "dynamics_distance": hist(synthetic.dynamics_distance),
        "mean_selected_value": _finite_mean(synthetic.selected_value),
        "mean_candidate_value": _finite_mean(synthetic.mean_value),
    }


def _finite_mean(values):
    values = np.asarray(values, dtype=np.float64)
    values = values[np.isfinite(values)]
    return float(values.mean()) if len(values) else None


# -- the pipeline -------------------------------------------------------------------


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def pipeline(cfg: RunConfig, argv: list[str] | None = None) -> dict:
    """Run every stage for every seed, writing artifacts under ``cfg.output_dir``.

    On failure the partial report is written and :class:`PipelineError`
    names the stage.
    """
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.ini")
    env = envs_mod.make_env(cfg.env)
    report = {
        "version": __version__,
        "command": argv if argv is not None else sys.argv,
        "config": cfg.to_flat(),
        "config_digest": cfg.digest(),
        "seeds": {},
    }
    try:
        for seed in cfg.seeds:
            entry = report["seeds"][str(seed)] = {}
            _pipeline_seed(cfg, seed, env, out / f"seed_{seed}", entry)
    finally:
        _write_report(out, report)
    return report


def _pipeline_seed(cfg, seed, env, out: Path, entry: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    stage = "collect"
    try:
        dataset = get_dataset(cfg, seed)
        data_mod.save(dataset, out / "dataset.dat")
        entry["dataset"] = {"size": dataset.size, "tag": dataset.source_tag, "sha256": _sha256(out / "dataset.dat")}

        ablation = ablation_mode(cfg.augment.ablation)
        augmenter = None
        if ablation.kind != "none":
            stage = "train-models"
            augmenter = make_augmenter(cfg, seed)
            models = fit_models(cfg, dataset, seed) if ablation.needs_models else None
            augmenter.fit(dataset, models=models)
            if models is not None:
                models.save(out / "models")
                entry["models"] = models.training_report()

            stage = "augment"
            train_data = augmenter.transform(dataset)
            synthetic = train_data.provenance
            data_mod.save(train_data, out / "augmented.dat")
            synthetic.write_provenance(out / "provenance.tsv")
            entry["augment"] = {
                "n_synthetic": len(synthetic),
                "sha256": _sha256(out / "augmented.dat"),
                "generation": generation_report(synthetic),
                "density": analyze_density(dataset, synthetic, env, discount=cfg.discount),
            }
        else:
            train_data = dataset

        stage = "train-policy"
        source = None
        if augmenter is not None and cfg.augment.mode == "realtime":
            train_data, source = dataset, augmenter.realtime_batch
        policy = make_policy(cfg, seed).fit(train_data, batch_source=source)
        policy.save(out / "policy.npz")
        write_curve(policy.learning_curve_, out / "learning_curve.tsv")

        stage = "evaluate"
        entry["evaluation"] = score_policy(cfg, policy)
    except Exception as exc:
        entry["failed_stage"] = stage
        entry["error"] = str(exc)
        raise PipelineError(stage, exc) from exc


def write_curve(curve: list[dict], path) -> None:
    keys = ["step", "critic_loss", "actor_loss", "lambda"]
    with open(path, "w") as fh:
        fh.write("\t".join(keys) + "\n")
        for row in curve:
            fh.write("\t".join(repr(float(row[k])) if k != "step" else str(row[k]) for k in keys) + "\n")


def _write_report(out: Path, report: dict) -> None:
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    with open(out / "metrics.tsv", "w") as fh:
        fh.write("seed\tmean_return\tstd_return\tnormalized_score\n")
        for seed, entry in report["seeds"].items():
            ev = entry.get("evaluation")
            if ev:
                fh.write(f"{seed}\t{ev['mean_return']!r}\t{ev['std_return']!r}\t{ev['normalized_score']!r}\n")


# -- studies --------------------------------------------------------------------------


def comparison_table(cfg: RunConfig, dataset_kinds, conditions, seeds, progress=None) -> dict:
    """``{kind: {condition: [normalized score per seed]}}``; models are shared within a (kind, seed)."""
    table: dict = {}
    for kind in dataset_kinds:
        table[kind] = {c: [] for c in conditions}
        for seed in seeds:
            dataset = get_dataset(cfg, seed, kind)
            models = None
            if any(ablation_mode(c).needs_models for c in conditions if c != "none"):
                models = fit_models(cfg, dataset, seed)
            for condition in conditions:
                result = run_condition(cfg, dataset, condition, seed, models)
                table[kind][condition].append(result.normalized)
                if progress:
                    progress(kind, condition, seed, result)
    return table


def quality_vs_diversity(cfg: RunConfig, seeds, dataset_kind="medium", progress=None) -> dict:
    return comparison_table(cfg, [dataset_kind], QUALITY_VS_DIVERSITY, seeds, progress)[dataset_kind]


def density_study(cfg: RunConfig, seeds, dataset_kind="medium_replay") -> list[dict]:
    env = envs_mod.make_env(cfg.env)
    rows = []
    for seed in seeds:
        dataset = get_dataset(cfg, seed, dataset_kind)
        augmenter = make_augmenter(cfg, seed, "hipode").fit(dataset, models=fit_models(cfg, dataset, seed))
        synthetic = augmenter.transform(dataset).provenance
        density = analyze_density(dataset, synthetic, env, discount=cfg.discount)
        rows.append({"seed": seed, "real_mean": density["real"]["mean"], "synthetic_mean": density["synthetic"]["mean"], "density": density})
    return rows


def pessimism_study(cfg: RunConfig, dataset_kinds, seeds, n_probe=2000) -> dict:
    """Mean V at dataset states and at probes ``sigma`` and ``2 sigma`` away (normalized units)."""
    from .value import NegativeSamplingValue

    sigma = cfg.augment.penalty_scope
    out: dict = {}
    for kind in dataset_kinds:
        out[kind] = []
        for seed in seeds:
            dataset = get_dataset(cfg, seed, kind)
            norm = data_mod.Normalizer.from_dataset(dataset)
            s, s2 = norm(dataset.states), norm(dataset.next_states)
            model = NegativeSamplingValue(
                hidden_units=cfg.models.hidden_units,
                discount=cfg.discount,
                penalty_weight=cfg.augment.penalty_weight,
                penalty_scope=sigma,
                n_steps=cfg.models.value_steps,
                random_state=derive_seed(seed, f"value:{kind}"),
            ).fit(data_mod.Batch(s, dataset.actions, dataset.rewards, s2, dataset.dones))
            rng = np.random.default_rng(derive_seed(seed, "probes"))
            probe = s[rng.integers(0, len(s), size=n_probe)]
            out[kind].append(
                {
                    "seed": seed,
                    "v_data": float(model.predict(probe).mean()),
                    "v_sigma": float(model.probe_values(probe, sigma, rng).mean()),
                    "v_2sigma": float(model.probe_values(probe, 2 * sigma, rng).mean()),
                }
            )
    return out
