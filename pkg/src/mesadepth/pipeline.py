"""Experiment orchestration: sequential stage pipeline, resumability, ablations.

A pipeline executes its stage list in order, each stage consuming the previous
checkpoint. Stages are content-addressed (config + seed + upstream key), so a
rerun skips completed work, and ablation variants sharing a prefix reuse each
other's checkpoints through a common cache directory.
"""

from __future__ import annotations

import os
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensorio
from .corpus import load_corpus, split_sequences
from .finetune_eval import (
    DepthMetrics,
    EvalConfig,
    FTConfig,
    evaluate_on_frames,
    relative_improvement,
    run_finetune_stage,
)
from .geometric_pretrain import GPConfig, run_gp_stage
from .masked_pretrain import MPConfig, run_mp_stage
from .networks import Checkpoint, load_checkpoint, restore_bundle
from .reporting import (
    StageResult,
    plot_metric_bars,
    write_json,
    write_table_csv,
)
from .supervised_pretrain import GPSPConfig, run_gp_sp_stage

STAGE_ORDER_RULES = {
    # stage -> allowed provenance of the incoming checkpoint (None = fresh start)
    "mp": (None,),
    "gp": (None, "mp"),
    "gp_sp": ("mp", "gp"),
    "finetune": (None, "mp", "gp", "gp_sp", "finetune"),
}


class PipelineError(RuntimeError):
    pass


class OutputDirLockedError(PipelineError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: Path
    out_dir: Path
    stages: tuple[str, ...]
    seed: int = 0
    eval_fraction: float = 0.2
    split_seed: int = 0  # data split stays fixed while model seeds vary
    stage_configs: dict = field(default_factory=dict)

    def __post_init__(self):
        prev = None
        for stage in self.stages:
            if stage not in STAGE_ORDER_RULES:
                raise PipelineError(f"unknown stage {stage!r}")
            if prev not in STAGE_ORDER_RULES[stage]:
                raise PipelineError(
                    f"stage {stage!r} cannot follow {prev!r}; allowed predecessors: "
                    f"{STAGE_ORDER_RULES[stage]}"
                )
            prev = stage
        object.__setattr__(self, "dataset", Path(self.dataset))
        object.__setattr__(self, "out_dir", Path(self.out_dir))
        object.__setattr__(self, "stages", tuple(self.stages))

    @classmethod
    def from_dict(cls, d: dict, out_root: Path | None = None) -> "ExperimentConfig":
        exp = d.get("experiment", {})
        out_dir = Path(exp["out_dir"])
        if out_root is not None and not out_dir.is_absolute():
            out_dir = out_root / out_dir
        return cls(
            dataset=Path(exp["dataset"]),
            out_dir=out_dir,
            stages=tuple(exp["stages"]),
            seed=int(exp.get("seed", 0)),
            eval_fraction=float(exp.get("eval_fraction", 0.2)),
            split_seed=int(exp.get("split_seed", 0)),
            stage_configs={k: dict(v) for k, v in d.items() if k != "experiment"},
        )

    def snapshot(self) -> dict:
        return {
            "dataset": str(self.dataset),
            "out_dir": str(self.out_dir),
            "stages": list(self.stages),
            "seed": self.seed,
            "eval_fraction": self.eval_fraction,
            "split_seed": self.split_seed,
            "stage_configs": self.stage_configs,
        }


def load_experiment_config(path: Path | str, out_root: Path | None = None) -> ExperimentConfig:
    import tomli

    with open(path, "rb") as f:
        data = tomli.load(f)
    cfg = ExperimentConfig.from_dict(data, out_root=out_root)
    if not cfg.dataset.exists():
        raise PipelineError(f"dataset path {cfg.dataset} does not exist")
    return cfg


@dataclass
class ExperimentManifest:
    path: Path
    config: dict
    entries: list[dict] = field(default_factory=list)

    def save(self) -> None:
        write_json(self.path, {"config": self.config, "entries": self.entries})

    @classmethod
    def load(cls, path: Path | str) -> "ExperimentManifest":
        import json

        path = Path(path)
        with open(path) as f:
            data = json.load(f)
        return cls(path=path, config=data["config"], entries=data["entries"])

    def find(self, key: str) -> dict | None:
        for e in self.entries:
            if e["key"] == key and e.get("completed"):
                return e
        return None


class _DirLock:
    """One pipeline per output directory."""

    def __init__(self, out_dir: Path):
        self.lock_path = out_dir / ".lock"

    def __enter__(self):
        try:
            fd = os.open(self.lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise OutputDirLockedError(
                f"{self.lock_path} exists; another pipeline owns this directory "
                f"(remove the lock file if it is stale)"
            ) from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.lock_path.unlink(missing_ok=True)


def _stage_seed(stage_cfg: dict, default: int) -> int:
    return int(stage_cfg.get("seed", default))


def _run_stage(
    stage: str,
    stage_cfg: dict,
    seed: int,
    train_seqs,
    stage_dir: Path,
    init: Checkpoint | None,
) -> StageResult:
    cfg = dict(stage_cfg)
    cfg.setdefault("seed", seed)
    if stage == "mp":
        return run_mp_stage(MPConfig.from_dict(cfg), train_seqs, stage_dir)
    if stage == "gp":
        return run_gp_stage(GPConfig.from_dict(cfg), train_seqs, stage_dir, init=init)
    if stage == "gp_sp":
        return run_gp_sp_stage(GPSPConfig.from_dict(cfg), train_seqs, stage_dir, init=init)
    if stage == "finetune":
        max_frames = cfg.pop("max_frames", None)
        return run_finetune_stage(
            FTConfig.from_dict(cfg), train_seqs, stage_dir, init=init, max_frames=max_frames
        )
    raise PipelineError(f"unknown stage {stage!r}")


def run_pipeline(
    config: ExperimentConfig, cache_dir: Path | str | None = None
) -> ExperimentManifest:
    """Execute the stage list, resuming past completed stages on rerun."""
    out = config.out_dir
    out.mkdir(parents=True, exist_ok=True)
    manifest_path = out / "manifest.json"
    if manifest_path.exists():
        manifest = ExperimentManifest.load(manifest_path)
    else:
        manifest = ExperimentManifest(path=manifest_path, config=config.snapshot())

    cache = Path(cache_dir) if cache_dir is not None else None
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)

    with _DirLock(out):
        sequences = load_corpus(config.dataset)
        train_seqs, _ = split_sequences(sequences, config.eval_fraction, seed=config.split_seed)

        prev_ckpt: Checkpoint | None = None
        prev_key = "root"
        for i, stage in enumerate(config.stages):
            stage_cfg = dict(config.stage_configs.get(stage, {}))
            seed = _stage_seed(stage_cfg, config.seed)
            key = tensorio.fingerprint(
                {
                    "stage": stage,
                    "config": stage_cfg,
                    "seed": seed,
                    "dataset": str(config.dataset),
                    "eval_fraction": config.eval_fraction,
                    "split_seed": config.split_seed,
                    "prev": prev_key,
                }
            )
            existing = manifest.find(key)
            if existing is not None and Path(existing["checkpoint"]).exists():
                recorded = existing.get("checkpoint_sha256")
                if recorded == tensorio.file_sha256(existing["checkpoint"]):
                    prev_ckpt = load_checkpoint(existing["checkpoint"])
                    prev_key = key
                    continue

            cached_ckpt = cache / f"{key}.ckpt" if cache is not None else None
            stage_dir = out / f"stage_{i}_{stage}"
            if cached_ckpt is not None and cached_ckpt.exists():
                stage_dir.mkdir(parents=True, exist_ok=True)
                ckpt_path = stage_dir / f"{stage}.ckpt"
                shutil.copyfile(cached_ckpt, ckpt_path)
                ckpt = load_checkpoint(ckpt_path)
                entry = {
                    "index": i,
                    "stage": stage,
                    "key": key,
                    "checkpoint": str(ckpt_path),
                    "checkpoint_sha256": tensorio.file_sha256(ckpt_path),
                    "artifacts": [str(ckpt_path)],
                    "summary": {"cached": True},
                    "wall_clock_s": 0.0,
                    "completed": True,
                }
            else:
                t0 = time.monotonic()
                result = _run_stage(stage, stage_cfg, seed, train_seqs, stage_dir, prev_ckpt)
                wall = time.monotonic() - t0
                if cached_ckpt is not None:
                    shutil.copyfile(result.checkpoint_path, cached_ckpt)
                ckpt = result.checkpoint
                entry = {
                    "index": i,
                    "stage": stage,
                    "key": key,
                    "checkpoint": str(result.checkpoint_path),
                    "checkpoint_sha256": tensorio.file_sha256(result.checkpoint_path),
                    "artifacts": [
                        str(result.checkpoint_path),
                        str(result.log_csv),
                        str(result.curve_png),
                    ],
                    "summary": result.summary,
                    "wall_clock_s": wall,
                    "completed": True,
                }
            manifest.entries.append(entry)
            manifest.save()
            prev_ckpt = ckpt
            prev_key = key
    return manifest


@dataclass
class AblationResult:
    variant_names: list[str]
    per_seed: dict[str, list[DepthMetrics]]  # variant -> metrics per seed
    means: dict[str, DepthMetrics]
    improvement_vs_first: dict[str, float]
    csv_path: Path
    json_path: Path
    figure_path: Path


METRIC_DIRECTIONS = {  # higher_is_better flags in table column order
    "rmse": False,
    "delta1": True,
    "delta2": True,
    "delta3": True,
    "rel": False,
    "log10": False,
}


def variant_name(stages: tuple[str, ...]) -> str:
    return "+".join(stages) if stages else "none"


def run_ablation(
    variants: list[tuple[str, ...]],
    dataset: Path | str,
    seeds: list[int],
    out_dir: Path | str,
    stage_configs: dict,
    eval_fraction: float = 0.2,
    split_seed: int = 0,
) -> AblationResult:
    """Run each variant over shared seeds and compare held-out depth metrics.

    Variants share the dataset, a fixed train/eval split, and a stage cache, so
    common stage prefixes (e.g. the masked stage) execute once per seed.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cache = out / "cache"
    dataset = Path(dataset)

    sequences = load_corpus(dataset)
    _, eval_seqs = split_sequences(sequences, eval_fraction, seed=split_seed)
    eval_labeled = [
        (img, gt, seq.intrinsics)
        for seq in eval_seqs
        if seq.gt_depths is not None
        for img, gt in zip(seq.frames, seq.gt_depths)
    ]
    per_seed: dict[str, list[DepthMetrics]] = {variant_name(v): [] for v in variants}
    for seed in seeds:
        for variant in variants:
            name = variant_name(variant)
            config = ExperimentConfig(
                dataset=dataset,
                out_dir=out / name.replace("+", "_") / f"seed_{seed}",
                stages=variant,
                seed=seed,
                eval_fraction=eval_fraction,
                split_seed=split_seed,
                stage_configs=stage_configs,
            )
            manifest = run_pipeline(config, cache_dir=cache)
            final_ckpt = load_checkpoint(manifest.entries[-1]["checkpoint"])
            scaling = "none" if final_ckpt.stage == "finetune" else "per-image-median"
            bundle = restore_bundle(final_ckpt, ("encoder", "depth_decoder"), seed=0)
            aggregate, _ = evaluate_on_frames(bundle, eval_labeled, EvalConfig(scaling=scaling))
            per_seed[name].append(aggregate)

    means: dict[str, DepthMetrics] = {}
    for name, metrics in per_seed.items():
        rows = np.array([m.as_row() for m in metrics])
        means[name] = DepthMetrics(*[float(v) for v in rows.mean(axis=0)])

    names = [variant_name(v) for v in variants]
    baseline = means[names[0]]
    improvement = {}
    for col, higher in METRIC_DIRECTIONS.items():
        base_val = getattr(baseline, col)
        best_val = getattr(means[names[-1]], col)
        improvement[col] = (
            relative_improvement(base_val, best_val, higher_is_better=higher)
            if base_val > 0
            else 0.0
        )

    columns = ["variant"] + DepthMetrics.columns()
    rows = [[name] + means[name].as_row() for name in names]
    rows.append(["improvement_vs_first_%"] + [improvement[c] for c in DepthMetrics.columns()])
    csv_path = write_table_csv(out / "ablation.csv", columns, rows)
    json_path = write_json(
        out / "ablation.json",
        {
            "variants": names,
            "seeds": seeds,
            "means": {n: dict(zip(DepthMetrics.columns(), means[n].as_row())) for n in names},
            "per_seed": {
                n: [dict(zip(DepthMetrics.columns(), m.as_row())) for m in per_seed[n]]
                for n in names
            },
            "improvement_vs_first_percent": improvement,
        },
    )
    figure_path = plot_metric_bars(
        out / "ablation_rmse.png", names, [means[n].rmse for n in names], "held-out RMSE (m)"
    )
    return AblationResult(
        variant_names=names,
        per_seed=per_seed,
        means=means,
        improvement_vs_first=improvement,
        csv_path=csv_path,
        json_path=json_path,
        figure_path=figure_path,
    )
