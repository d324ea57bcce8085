"""Experiment runner: seeded training, evaluation, parameter sweeps.

Config files are flat YAML documents mapping onto TrainConfig plus run-level
keys (seeds, out_dir, run_label, checkpoint_every). Any key can be
overridden through an environment variable SAFESTAB_<KEY>.
"""

from __future__ import annotations

import csv
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import click
import numpy as np
import yaml

from .trainer import EpisodeMetrics, TrainConfig, Trainer, evaluate

ENV_PREFIX = "SAFESTAB_"

RUN_KEYS = ("seeds", "out_dir", "run_label", "checkpoint_every")

CSV_COLUMNS = ("episode", "reward", "violations", "cost", "backup_steps",
               "final_distance")

AGG_COLUMNS = ("episode", "reward_mean", "reward_std", "violations_mean",
               "violations_std", "backup_steps_mean")


@dataclass
class ExperimentConfig:
    train: TrainConfig
    seeds: list
    out_dir: str
    run_label: str = "run"
    checkpoint_every: int = 0  # 0 = final checkpoint only

    @classmethod
    def load(cls, path, seeds=None, out_dir=None):
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
        if not isinstance(raw, dict):
            raise ValueError("config must be a mapping")
        for key in list(raw):
            env_val = os.environ.get(ENV_PREFIX + key.upper())
            if env_val is not None:
                raw[key] = yaml.safe_load(env_val)
        for key in os.environ:
            if key.startswith(ENV_PREFIX):
                name = key[len(ENV_PREFIX):].lower()
                if name not in raw and (
                        name in TrainConfig.__dataclass_fields__
                        or name in RUN_KEYS):
                    raw[name] = yaml.safe_load(os.environ[key])
        run_kwargs = {k: raw.pop(k) for k in RUN_KEYS if k in raw}
        if seeds is not None:
            run_kwargs["seeds"] = list(seeds)
        if out_dir is not None:
            run_kwargs["out_dir"] = out_dir
        if "seeds" not in run_kwargs or not run_kwargs["seeds"]:
            raise ValueError("config field 'seeds' must be a nonempty list")
        if "out_dir" not in run_kwargs:
            raise ValueError("config field 'out_dir' is required")
        try:
            train = TrainConfig.from_dict(raw)
        except (TypeError, ValueError) as exc:
            raise ValueError(f"invalid training config: {exc}") from exc
        return cls(train=train, **run_kwargs)

    def snapshot(self):
        d = self.train.to_dict()
        d.update({
            "seeds": list(self.seeds), "out_dir": str(self.out_dir),
            "run_label": self.run_label,
            "checkpoint_every": self.checkpoint_every,
        })
        return d


@dataclass
class RunSummary:
    per_seed: dict  # seed -> list[EpisodeMetrics]
    aggregate: list  # rows matching AGG_COLUMNS


def _write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v
                             for v in row])


def _metric_rows(metrics):
    return [
        (m.episode, float(m.reward), m.violations, float(m.cost),
         m.backup_steps, float(m.final_distance))
        for m in metrics
    ]


def aggregate_metrics(per_seed):
    """Cross-seed mean/std per episode for reward, violations, backup."""
    series = list(per_seed.values())
    lengths = {len(s) for s in series}
    if len(lengths) != 1:
        raise ValueError("metric series lengths differ across seeds")
    rows = []
    for ep in range(lengths.pop()):
        rewards = np.array([s[ep].reward for s in series])
        violations = np.array([s[ep].violations for s in series], dtype=float)
        backup = np.array([s[ep].backup_steps for s in series], dtype=float)
        rows.append((
            ep + 1, float(rewards.mean()), float(rewards.std()),
            float(violations.mean()), float(violations.std()),
            float(backup.mean()),
        ))
    return rows


def run_experiment(config: ExperimentConfig) -> RunSummary:
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.yaml", "w") as fh:
        yaml.safe_dump(config.snapshot(), fh, sort_keys=True)
    per_seed = {}
    try:
        for seed in config.seeds:
            trainer = Trainer(config.train, seed)
            for ep in range(config.train.episodes):
                trainer.run_episode()
                cadence = config.checkpoint_every
                if cadence and (ep + 1) % cadence == 0:
                    _save_checkpoint(trainer, config, seed,
                                     out / f"checkpoint_seed{seed}_ep{ep + 1}.npz")
            per_seed[seed] = trainer.metrics
            _write_csv(out / f"seed_{seed}.csv", CSV_COLUMNS,
                       _metric_rows(trainer.metrics))
            _save_checkpoint(trainer, config, seed,
                             out / f"checkpoint_seed{seed}.npz")
    finally:
        # flush whatever completed so a mid-run failure keeps partial results
        for seed, metrics in per_seed.items():
            path = out / f"seed_{seed}.csv"
            if not path.exists():
                _write_csv(path, CSV_COLUMNS, _metric_rows(metrics))
    aggregate = aggregate_metrics(per_seed)
    _write_csv(out / "aggregate.csv", AGG_COLUMNS, aggregate)
    return RunSummary(per_seed=per_seed, aggregate=aggregate)


def _save_checkpoint(trainer: Trainer, config, seed, path):
    trainer.agent.save(path)
    manifest = {
        "seed": int(seed),
        "episodes_trained": trainer.episode_index,
        "train_config": config.train.to_dict(),
    }
    Path(str(path) + ".manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(path):
    """Rebuild a trainer (env + agent) from a checkpoint and its manifest."""
    manifest_path = Path(str(path) + ".manifest.json")
    if not manifest_path.exists():
        raise FileNotFoundError(f"missing manifest {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    cfg = TrainConfig.from_dict(manifest["train_config"])
    trainer = Trainer(cfg, manifest["seed"])
    trainer.agent.load(path)
    return trainer


def eval_policy(checkpoint_path, episodes, deterministic=False,
                out_path=None):
    trainer = load_checkpoint(checkpoint_path)
    metrics = evaluate(trainer, episodes, deterministic=deterministic)
    if out_path is not None:
        _write_csv(out_path, CSV_COLUMNS, _metric_rows(metrics))
    return metrics


@click.group()
def main():
    """Safe and stable actor-critic experiment runner."""


@main.command()
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True))
@click.option("--seeds", default=None, help="comma-separated seed list")
@click.option("--out", "out_dir", default=None, type=click.Path())
def train(config_path, seeds, out_dir):
    """Run seeded training and write metric CSVs."""
    seed_list = ([int(s) for s in seeds.split(",")] if seeds else None)
    try:
        config = ExperimentConfig.load(config_path, seeds=seed_list,
                                       out_dir=out_dir)
    except ValueError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(2)
    summary = run_experiment(config)
    last = summary.aggregate[-1]
    click.echo(f"done: {len(config.seeds)} seeds x "
               f"{config.train.episodes} episodes; "
               f"final reward_mean={last[1]:.3f} "
               f"violations_mean={last[3]:.3f}")


@main.command("eval")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--episodes", required=True, type=int)
@click.option("--deterministic", is_flag=True, default=False)
@click.option("--out", "out_path", default=None, type=click.Path())
def eval_cmd(checkpoint, episodes, deterministic, out_path):
    """Roll out a saved policy without learning."""
    out_path = out_path or (checkpoint + ".eval.csv")
    metrics = eval_policy(checkpoint, episodes, deterministic=deterministic,
                          out_path=out_path)
    if metrics:
        mean_r = float(np.mean([m.reward for m in metrics]))
        click.echo(f"evaluated {len(metrics)} episodes; "
                   f"mean reward {mean_r:.3f}")
    else:
        click.echo("evaluated 0 episodes")


@main.command()
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True))
@click.option("--param", required=True)
@click.option("--values", required=True, help="comma-separated values")
def sweep(config_path, param, values):
    """Repeat the experiment varying one hyperparameter."""
    try:
        base = ExperimentConfig.load(config_path)
    except ValueError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(2)
    if param not in TrainConfig.__dataclass_fields__:
        click.echo(f"config error: unknown parameter {param!r}", err=True)
        sys.exit(2)
    for raw in values.split(","):
        value = yaml.safe_load(raw)
        d = base.train.to_dict()
        d[param] = value
        cfg = ExperimentConfig(
            train=TrainConfig.from_dict(d), seeds=base.seeds,
            out_dir=str(Path(base.out_dir) / f"{param}_{raw}"),
            run_label=f"{base.run_label}-{param}-{raw}",
            checkpoint_every=base.checkpoint_every)
        summary = run_experiment(cfg)
        last = summary.aggregate[-1]
        click.echo(f"{param}={raw}: final reward_mean={last[1]:.3f} "
                   f"violations_mean={last[3]:.3f}")


if __name__ == "__main__":
    main()
