"""Experiment runner: `msbm {generate,train,simulate,evaluate,compare}`.

Every command reads one JSON experiment document (see configs/) whose
sections are the snapshots of the package's config dataclasses:

    {"dataset": {"path": DIR} or {"synthetic": {...SyntheticSpec}},
     "split": 0.85 or null, "split_seed": 0,
     "train": {...MsbmConfig, optional "preset"},
     "sim": {...SimConfig}, "metrics": {...MetricConfig},
     "protocols": ["from_t0", "from_prev", "leave_one_out:2"],
     "seeds": [0, 1, 2], "out": DIR}

--seed, --mode and --out override the document.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from qcodes.validators import Ints, Numbers
from qcodes.validators import Sequence as SequenceOf

from .common.errors import DatasetError, DivergenceError, MsbmError, TrainingAborted
from .control_net import load_checkpoint
from .datasets import SyntheticSpec, generate, load_snapshots, save_snapshots, split
from .metrics import MetricConfig, Protocol, csv_header, evaluate_protocol, summarize_reports, write_summary_csv
from .msbm_train import MsbmConfig, MsbmTrainer
from .recording import (
    add_losses,
    add_marginal_fit,
    add_trajectories,
    folder,
    marginal_data,
    metric_data,
    run_folder,
    training_data,
    trajectory_data,
    provenance,
    write_json,
)
from .reference_bridge import ReferenceProcess
from .sde_sim import SimConfig, rollout_full
from .time_grid import MarginalDataset

logger = logging.getLogger(__name__)

EXIT_DIVERGED = 1
EXIT_BAD_INPUT = 2


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: dict = field(default_factory=dict)
    split: Optional[float] = None
    split_seed: int = 0
    train: MsbmConfig = field(default_factory=MsbmConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)
    protocols: tuple = ("from_t0",)
    seeds: tuple = (0,)
    out: str = "runs"
    source: Optional[str] = None  # the document this config was read from

    def __post_init__(self):
        if not ("path" in self.dataset or "synthetic" in self.dataset):
            raise ValueError('dataset needs a "path" or a "synthetic" spec')
        if self.split is not None:
            Numbers(0, 1).validate(self.split, "split")
        Ints(min_value=0).validate(self.split_seed, "split_seed")
        protocols = tuple(Protocol.parse(p).tag for p in self.protocols)
        seeds = tuple(int(s) for s in self.seeds)
        SequenceOf(Ints(min_value=0)).validate(list(seeds), "seeds")
        if not seeds:
            raise ValueError("at least one seed is needed")
        object.__setattr__(self, "protocols", protocols)
        object.__setattr__(self, "seeds", seeds)

    @classmethod
    def from_dict(cls, d: dict, source: Optional[str] = None) -> ExperimentConfig:
        d = dict(d)
        unknown = set(d) - {"dataset", "split", "split_seed", "train", "sim", "metrics", "protocols", "seeds", "out"}
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(
            dataset=dict(d.get("dataset", {})),
            split=d.get("split"),
            split_seed=d.get("split_seed", 0),
            train=MsbmConfig.from_dict(d.get("train", {})),
            sim=SimConfig.from_dict(d.get("sim", {})),
            metrics=MetricConfig.from_dict(d.get("metrics", {})),
            protocols=tuple(d.get("protocols", ("from_t0",))),
            seeds=tuple(d.get("seeds", (0,))),
            out=d.get("out", "runs"),
            source=source,
        )

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        with open(path) as f:
            try:
                document = json.load(f)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}: invalid JSON: {e}") from e
        return cls.from_dict(document, source=str(path))

    def with_overrides(self, seed: Optional[int] = None, mode: Optional[str] = None, out: Optional[str] = None):
        cfg = self
        if seed is not None:
            cfg = replace(cfg, train=replace(cfg.train, seed=seed), seeds=(seed,))
        if mode is not None:
            cfg = replace(cfg, train=replace(cfg.train, mode=mode))
        if out is not None:
            cfg = replace(cfg, out=out)
        return cfg

    def snapshot(self) -> dict:
        return dict(
            dataset=self.dataset,
            split=self.split,
            split_seed=self.split_seed,
            train=self.train.snapshot(),
            sim=self.sim.snapshot(),
            metrics=self.metrics.snapshot(),
            protocols=list(self.protocols),
            seeds=list(self.seeds),
            out=self.out,
        )

    @property
    def files(self) -> list[str]:
        return [self.source] if self.source else []


def load_dataset(cfg: ExperimentConfig) -> MarginalDataset:
    if "path" in cfg.dataset:
        path = Path(cfg.dataset["path"])
        if not path.exists() and "synthetic" not in cfg.dataset:
            raise DatasetError("dataset directory not found", str(path))
        if path.exists():
            return load_snapshots(path)
    return generate(SyntheticSpec.from_dict(cfg.dataset["synthetic"]))


def train_test(cfg: ExperimentConfig) -> tuple[MarginalDataset, MarginalDataset]:
    dataset = load_dataset(cfg)
    if cfg.split is None:
        return dataset, dataset
    return split(dataset, cfg.split, cfg.split_seed)


def cmd_generate(cfg: ExperimentConfig, target: Optional[str] = None) -> Path:
    """Write the synthetic dataset of the config as a snapshot directory."""
    if "synthetic" not in cfg.dataset:
        raise ValueError('generate needs a "synthetic" dataset spec')
    spec = SyntheticSpec.from_dict(cfg.dataset["synthetic"])
    target = Path(target or cfg.dataset.get("path") or Path(cfg.out) / "data")
    path = save_snapshots(generate(spec), target)
    logger.info("wrote %s dataset to %s", spec.kind, path)
    return path


def cmd_train(cfg: ExperimentConfig, checkpoint_every: int = 0) -> Path:
    """Train v and u; writes checkpoint.npz and train_report.json into the run folder."""
    train_set, _ = train_test(cfg)
    train_cfg = replace(cfg.train, progress=logger.isEnabledFor(logging.INFO))
    config = cfg.snapshot()
    name = f"train {train_cfg.mode}"

    with run_folder(training_data(), cfg.out, name, config, cfg.files + [__file__]) as writer, \
            run_folder(marginal_data(), cfg.out, f"{name} marginals", config, cfg.files + [__file__]) as marginal_writer:
        run_dir = folder(writer)

        def on_iteration(trainer: MsbmTrainer):
            report = trainer.report
            add_losses(writer, trainer.iteration, report.backward_loss[-1], report.forward_loss[-1])
            if report.marginal_w2:
                if trainer.iteration == 1:
                    add_marginal_fit(marginal_writer, 0, report.marginal_times, report.marginal_w2[0])
                add_marginal_fit(marginal_writer, trainer.iteration, report.marginal_times, report.marginal_w2[-1])
            if checkpoint_every and trainer.iteration % checkpoint_every == 0:
                trainer.save(run_dir / f"checkpoint_iter{trainer.iteration}.npz", experiment=config)

        trainer = MsbmTrainer(train_set, train_cfg, on_iteration)
        try:
            trainer.run()
        except TrainingAborted as e:
            write_json(run_dir / "train_report.json", config, report=e.report.to_dict())
            raise
        trainer.save(run_dir / "checkpoint.npz", experiment=config)
        write_json(run_dir / "train_report.json", config, report=trainer.report.to_dict())
    logger.info("training finished in %.1f s, run folder %s", trainer.report.total_seconds(), run_dir)
    return run_dir


def _reference(checkpoint) -> ReferenceProcess:
    return ReferenceProcess(sigma=checkpoint.meta["sigma"])


def cmd_simulate(cfg: ExperimentConfig, checkpoint_path, direction: str = "forward") -> Path:
    """Roll the EMA control of a checkpoint over the test snapshots and export the paths."""
    checkpoint = load_checkpoint(checkpoint_path)
    _, test_set = train_test(cfg)
    ctrl = checkpoint.ema(direction)
    if ctrl.dim != test_set.dim:
        raise ValueError(f"checkpoint dimension {ctrl.dim} does not match dataset dimension {test_set.dim}")
    paths = rollout_full(ctrl, test_set, direction, cfg.sim, _reference(checkpoint))
    name = f"simulate {direction}"
    config = cfg.snapshot()
    with run_folder(trajectory_data(test_set.dim), cfg.out, name, config, cfg.files + [__file__]) as writer:
        add_trajectories(writer, paths)
        run_dir = folder(writer)
        paths.to_csv(run_dir / "trajectories.csv", provenance(config))
    return run_dir


def _check_leave_one_out(protocol: Protocol, checkpoint, path) -> None:
    if protocol.kind == "leave_one_out" and protocol.index not in checkpoint.meta.get("holdout", []):
        raise ValueError(f"{path} was trained on snapshot {protocol.index}; {protocol.tag} needs it held out")


def _evaluate(cfg: ExperimentConfig, checkpoints: Sequence, test_set: MarginalDataset) -> dict:
    reports = {}
    for tag in cfg.protocols:
        protocol = Protocol.parse(tag)
        reports[tag] = []
        for path, checkpoint in checkpoints:
            _check_leave_one_out(protocol, checkpoint, path)
            for seed in cfg.seeds:
                reports[tag].append(
                    evaluate_protocol(
                        checkpoint.ema("forward"), test_set, protocol, cfg.metrics, cfg.sim, _reference(checkpoint), seed
                    )
                )
    return reports


def cmd_evaluate(cfg: ExperimentConfig, checkpoint_paths: Sequence) -> Path:
    """Every configured protocol for every checkpoint and seed; per-seed and mean/std tables."""
    checkpoints = [(p, load_checkpoint(p)) for p in checkpoint_paths]
    _, test_set = train_test(cfg)
    config = cfg.snapshot()
    reports = _evaluate(cfg, checkpoints, test_set)

    with run_folder(metric_data(cfg.metrics.metrics), cfg.out, "evaluate", config, cfg.files + [__file__]) as writer:
        run_dir = folder(writer)
        summaries = {}
        for k, (tag, runs) in enumerate(reports.items()):
            name = tag.replace(":", "_")
            for n, report in enumerate(runs):
                writer.add_data(
                    protocol=np.full(len(report.times), k),
                    seed=np.full(len(report.times), report.seed),
                    t=np.asarray(report.times),
                    **{m: np.asarray(v) for m, v in report.values.items()},
                )
                report.to_csv(run_dir / f"{name}_run{n}_seed{report.seed}.csv", provenance(config))
            summaries[tag] = summarize_reports(runs)
            write_summary_csv(summaries[tag], run_dir / f"{name}_summary.csv", provenance(config))
        write_json(
            run_dir / "eval_report.json",
            config,
            checkpoints=[str(p) for p, _ in checkpoints],
            reports={tag: [r.to_dict() for r in runs] for tag, runs in reports.items()},
            summary=summaries,
        )
    return run_dir


def _labels(checkpoints) -> list[str]:
    labels = [c.meta.get("mode", "model") for _, c in checkpoints]
    if len(set(labels)) < len(labels):
        labels = [f"{label}{n}" for n, label in enumerate(labels)]
    return labels


def cmd_compare(cfg: ExperimentConfig, checkpoint_paths: Sequence) -> Path:
    """Side-by-side per-marginal metrics and training time of two or more checkpoints."""
    if len(checkpoint_paths) < 2:
        raise ValueError("compare needs at least two checkpoints")
    checkpoints = [(p, load_checkpoint(p)) for p in checkpoint_paths]
    _, test_set = train_test(cfg)
    config = cfg.snapshot()
    labels = _labels(checkpoints)

    with run_folder(metric_data(cfg.metrics.metrics), cfg.out, "compare", config, cfg.files + [__file__]) as writer:
        run_dir = folder(writer)
        table = {}
        for k, (label, (path, checkpoint)) in enumerate(zip(labels, checkpoints)):
            runs = _evaluate(replace(cfg, protocols=("from_t0",)), [(path, checkpoint)], test_set)["from_t0"]
            summary = summarize_reports(runs)
            table[label] = dict(summary=summary, seconds=checkpoint.meta.get("seconds"), checkpoint=str(path))
            for report in runs:
                writer.add_data(
                    protocol=np.full(len(report.times), k),
                    seed=np.full(len(report.times), report.seed),
                    t=np.asarray(report.times),
                    **{m: np.asarray(v) for m, v in report.values.items()},
                )
            sim = replace(cfg.sim, seed=cfg.seeds[0])
            rollout_full(checkpoint.ema("forward"), test_set, "forward", sim, _reference(checkpoint)).to_csv(
                run_dir / f"trajectories_{label}.csv", provenance(config)
            )

        times = table[labels[0]]["summary"]["times"]
        columns, header = [times], ["t"]
        for metric in cfg.metrics.metrics:
            for label in labels:
                columns.append(table[label]["summary"]["mean"][metric])
                header.append(f"{metric}_{label}")
        np.savetxt(
            run_dir / "compare.csv",
            np.column_stack(columns),
            fmt="%.10g",
            delimiter=",",
            header=csv_header(header, provenance(config)),
            comments="",
        )
        write_json(run_dir / "compare.json", config, models=table)
    return run_dir


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment JSON document")
    common.add_argument("--seed", type=int, help="overrides train.seed and seeds")
    common.add_argument("--mode", choices=["msbm", "naive"], help="overrides train.mode")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="msbm", description=__doc__.splitlines()[0])
    commands = parser.add_subparsers(dest="command", required=True)
    generate_cmd = commands.add_parser("generate", parents=[common], help="write a synthetic dataset")
    generate_cmd.add_argument("--data", help="target snapshot directory")
    train_cmd = commands.add_parser("train", parents=[common], help="train the forward and backward controls")
    train_cmd.add_argument("--checkpoint-every", type=int, default=0, help="also checkpoint every K outer iterations")
    simulate_cmd = commands.add_parser("simulate", parents=[common], help="export rollouts of a checkpoint")
    simulate_cmd.add_argument("checkpoint")
    simulate_cmd.add_argument("--direction", choices=["forward", "backward"], default="forward")
    evaluate_cmd = commands.add_parser("evaluate", parents=[common], help="run the evaluation protocols")
    evaluate_cmd.add_argument("checkpoints", nargs="+")
    compare_cmd = commands.add_parser("compare", parents=[common], help="compare checkpoints side by side")
    compare_cmd.add_argument("checkpoints", nargs="+")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig(dataset={"synthetic": {}})
        cfg = cfg.with_overrides(args.seed, args.mode, args.out)
        if args.command == "generate":
            result = cmd_generate(cfg, args.data)
        elif args.command == "train":
            result = cmd_train(cfg, args.checkpoint_every)
        elif args.command == "simulate":
            result = cmd_simulate(cfg, args.checkpoint, args.direction)
        elif args.command == "evaluate":
            result = cmd_evaluate(cfg, args.checkpoints)
        else:
            result = cmd_compare(cfg, args.checkpoints)
    except (TrainingAborted, DivergenceError) as e:
        print(f"msbm {args.command}: diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (MsbmError, ValueError, TypeError, KeyError, FileNotFoundError) as e:
        print(f"msbm {args.command}: {e}", file=sys.stderr)
        return EXIT_BAD_INPUT
    print(result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
