"""Command-line interface for corpus generation, staging, evaluation, and analysis.

Relative output paths resolve under $MESA_OUT when it is set. Subcommands exit
0 on success, 2 on usage errors (argparse), and 1 with a diagnostic on stderr
for structured failures.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import tomli

from .cka_probe import (
    builtin_registry,
    collect_activations,
    diagonal_profile,
    first_row_profile,
    render_heatmap,
    similarity_matrix,
    u_shape_score,
)
from .core_data import DataError
from .corpus import generate_corpus, load_corpus, split_sequences
from .finetune_eval import (
    EvalConfig,
    FTConfig,
    evaluate_on_frames,
    ibims_metrics,
    detect_depth_edges,
    planar_tiles,
    run_finetune_stage,
)
from .geometric_pretrain import GPConfig, run_gp_stage
from .masked_pretrain import MPConfig, run_mp_stage
from .networks import CheckpointError, load_checkpoint, restore_bundle
from .pipeline import (
    ExperimentConfig,
    OutputDirLockedError,
    PipelineError,
    load_experiment_config,
    run_ablation,
    run_pipeline,
)
from .reporting import TrainingDivergedError, write_json, write_table_csv
from .supervised_pretrain import GPSPConfig, run_gp_sp_stage
from .tensorio import ContainerError


def _out_root() -> Path:
    return Path(os.environ.get("MESA_OUT", "."))


def _resolve_out(path: str) -> Path:
    p = Path(path)
    return p if p.is_absolute() else _out_root() / p


def _load_stage_config(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path, "rb") as f:
        return tomli.load(f)


def _train_split(dataset: str, eval_fraction: float, seed: int):
    sequences = load_corpus(dataset)
    return split_sequences(sequences, eval_fraction, seed=seed)


def cmd_gen_scenes(args) -> int:
    out = _resolve_out(args.out)
    paths = generate_corpus(
        out,
        n_sequences=args.sequences,
        frames_per_sequence=args.frames,
        height=args.size,
        width=args.size,
        seed=args.seed,
    )
    print(f"wrote {len(paths)} sequences ({args.frames} frames each) to {out}")
    return 0


def _stage_common(args) -> tuple[dict, list, Path]:
    cfg = _load_stage_config(args.config)
    exp = cfg.get("experiment", {})
    dataset = args.dataset or exp.get("dataset")
    if dataset is None:
        raise PipelineError("provide --dataset or an [experiment] dataset in the config")
    seed = args.seed if args.seed is not None else int(exp.get("seed", 0))
    train, _ = _train_split(dataset, float(exp.get("eval_fraction", 0.2)), seed)
    out = _resolve_out(args.out)
    return cfg, train, out


def cmd_pretrain_mp(args) -> int:
    cfg, train, out = _stage_common(args)
    section = dict(cfg.get("mp", {}))
    if args.seed is not None:
        section["seed"] = args.seed
    result = run_mp_stage(MPConfig.from_dict(section), train, out)
    print(f"masked stage done: {result.checkpoint_path} ({result.summary})")
    return 0


def cmd_pretrain_gp(args) -> int:
    cfg, train, out = _stage_common(args)
    section = dict(cfg.get("gp", {}))
    if args.seed is not None:
        section["seed"] = args.seed
    init = load_checkpoint(args.init) if args.init else None
    result = run_gp_stage(GPConfig.from_dict(section), train, out, init=init)
    print(f"geometric stage done: {result.checkpoint_path} ({result.summary})")
    return 0


def cmd_pretrain_gp_sp(args) -> int:
    cfg, train, out = _stage_common(args)
    section = dict(cfg.get("gp_sp", {}))
    if args.seed is not None:
        section["seed"] = args.seed
    init = load_checkpoint(args.init)
    result = run_gp_sp_stage(GPSPConfig.from_dict(section), train, out, init=init)
    print(f"joint stage done: {result.checkpoint_path}")
    return 0


def cmd_finetune(args) -> int:
    cfg, train, out = _stage_common(args)
    section = dict(cfg.get("finetune", {}))
    if args.seed is not None:
        section["seed"] = args.seed
    max_frames = section.pop("max_frames", None)
    init = load_checkpoint(args.init) if args.init else None
    result = run_finetune_stage(
        FTConfig.from_dict(section), train, out, init=init, max_frames=max_frames
    )
    print(f"fine-tuning done: {result.checkpoint_path} ({result.summary})")
    return 0


def cmd_evaluate(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    sequences = load_corpus(args.dataset)
    labeled = [
        (img, gt, seq.intrinsics)
        for seq in sequences
        if seq.gt_depths is not None
        for img, gt in zip(seq.frames, seq.gt_depths)
    ]
    if not labeled:
        raise PipelineError("dataset has no ground-truth depth to evaluate against")
    scaling = args.scaling
    if scaling == "auto":
        scaling = "none" if ckpt.stage == "finetune" else "per-image-median"
    cfg = EvalConfig(scaling=scaling)
    out = _resolve_out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bundle = restore_bundle(ckpt, ("encoder", "depth_decoder"), seed=0)

    if args.ood:
        from .finetune_eval import predict_depth

        per_image = []
        for img, gt, K in labeled:
            gt_edges = detect_depth_edges(gt.depth, cfg.edge_threshold)
            planes = planar_tiles(gt, K)
            m = ibims_metrics(predict_depth(bundle, img), gt, gt_edges, planes, K, cfg)
            per_image.append(m)
        cols = ["dbe_acc", "dbe_comp", "pe_plan", "pe_orie", "absrel"]
        agg = {}
        for c in cols:
            vals = [getattr(m, c) for m in per_image if getattr(m, c) is not None]
            agg[c] = float(np.mean(vals)) if vals else None
        write_json(out / "ood_metrics.json", {"aggregate": agg, "images": len(per_image)})
        write_table_csv(
            out / "ood_metrics.csv", cols, [[agg[c] if agg[c] is not None else "" for c in cols]]
        )
        print(json.dumps(agg, indent=2))
        return 0

    aggregate, per_image = evaluate_on_frames(bundle, labeled, cfg)
    payload = {
        "aggregate": dict(zip(aggregate.columns(), aggregate.as_row())),
        "per_image": [dict(zip(m.columns(), m.as_row())) for m in per_image],
        "scaling": scaling,
    }
    write_json(out / "metrics.json", payload)
    write_table_csv(out / "metrics.csv", aggregate.columns(), [aggregate.as_row()])
    print(json.dumps(payload["aggregate"], indent=2))
    return 0


def cmd_analyze_cka(args) -> int:
    ckpt_a = load_checkpoint(args.a)
    ckpt_b = load_checkpoint(args.b)
    sequences = load_corpus(args.dataset)
    images = [f for seq in sequences for f in seq.frames]
    registry = builtin_registry("toy")
    out = _resolve_out(args.out)
    out.mkdir(parents=True, exist_ok=True)

    set_a = collect_activations(
        ckpt_a, registry, images, n_images=args.images, tokens_per_image=args.tokens,
        seed=args.seed,
    )
    set_b = collect_activations(
        ckpt_b, registry, images, manifest=set_a.manifest
    )

    self_matrix = similarity_matrix(set_a, set_a, row_label="model A", col_label="model A")
    cross_matrix = similarity_matrix(set_a, set_b, row_label="model A", col_label="model B")
    profile_first = first_row_profile(self_matrix)
    profile_diag = diagonal_profile(cross_matrix)
    score = u_shape_score(profile_first)

    np.savetxt(out / "similarity_cross.csv", cross_matrix.values, delimiter=",", fmt="%.8f")
    np.savetxt(out / "similarity_self.csv", self_matrix.values, delimiter=",", fmt="%.8f")
    render_heatmap(cross_matrix, out / "similarity_cross.png")
    render_heatmap(self_matrix, out / "similarity_self.png")
    write_json(
        out / "profiles.json",
        {
            "first_row_self": profile_first.tolist(),
            "diagonal_cross": profile_diag.tolist(),
            "u_shape": {
                "min_index": score.min_index,
                "depth": score.depth,
                "is_u_shaped": score.is_u_shaped,
            },
        },
    )
    print(f"diagonal (A vs B): {np.array2string(profile_diag, precision=3)}")
    print(f"first row (A vs A): {np.array2string(profile_first, precision=3)}")
    print(f"u-shape: min_index={score.min_index} depth={score.depth:.3f} "
          f"is_u_shaped={score.is_u_shaped}")
    return 0


def cmd_ablate(args) -> int:
    stage_cfg = _load_stage_config(args.config)
    stage_cfg.pop("experiment", None)
    variants = [tuple(v.split(",")) if v else () for v in args.variants.split(";")]
    seeds = [int(s) for s in args.seeds.split(",")]
    result = run_ablation(
        variants=variants,
        dataset=args.dataset,
        seeds=seeds,
        out_dir=_resolve_out(args.out),
        stage_configs=stage_cfg,
        eval_fraction=args.eval_fraction,
    )
    print(f"ablation table: {result.csv_path}")
    for name in result.variant_names:
        print(f"  {name}: rmse={result.means[name].rmse:.4f}")
    return 0


def cmd_run(args) -> int:
    config = load_experiment_config(args.config, out_root=_out_root())
    manifest = run_pipeline(config)
    print(f"pipeline complete: {manifest.path}")
    for e in manifest.entries:
        print(f"  [{e['index']}] {e['stage']}: {e['checkpoint']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mesa-depth",
        description="Masked/geometric/supervised depth pre-training at desk scale",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scenes", help="write a synthetic ray-cast corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--sequences", type=int, default=10)
    p.add_argument("--frames", type=int, default=20)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_scenes)

    def add_stage_args(p, needs_init: bool | None):
        p.add_argument("--config", default=None, help="TOML config with stage sections")
        p.add_argument("--dataset", default=None)
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int, default=None)
        if needs_init is True:
            p.add_argument("--init", required=True, help="upstream checkpoint")
        elif needs_init is False:
            p.add_argument("--init", default=None, help="optional upstream checkpoint")

    p = sub.add_parser("pretrain-mp", help="masked pre-training stage")
    add_stage_args(p, needs_init=None)
    p.set_defaults(func=cmd_pretrain_mp)

    p = sub.add_parser("pretrain-gp", help="geometric pre-training stage")
    add_stage_args(p, needs_init=False)
    p.set_defaults(func=cmd_pretrain_gp)

    p = sub.add_parser("pretrain-gp-sp", help="joint geometric + supervised stage")
    add_stage_args(p, needs_init=True)
    p.set_defaults(func=cmd_pretrain_gp_sp)

    p = sub.add_parser("finetune", help="supervised fine-tuning stage")
    add_stage_args(p, needs_init=False)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="depth metrics for a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", default="eval")
    p.add_argument("--ood", action="store_true", help="boundary/planarity metrics")
    p.add_argument("--scaling", choices=["auto", "none", "per-image-median"], default="auto")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze-cka", help="layer-wise similarity of two checkpoints")
    p.add_argument("--a", required=True, help="first checkpoint (e.g. pre-trained)")
    p.add_argument("--b", required=True, help="second checkpoint (e.g. fine-tuned)")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", default="cka")
    p.add_argument("--images", type=int, default=16)
    p.add_argument("--tokens", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_analyze_cka)

    p = sub.add_parser("ablate", help="compare stage-list variants over seeds")
    p.add_argument("--dataset", required=True)
    p.add_argument("--variants", required=True,
                   help="semicolon-separated stage lists, e.g. 'finetune;mp,finetune'")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--eval-fraction", type=float, default=0.2)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("run", help="run a full stage pipeline from a config file")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_run)

    return parser


KNOWN_ERRORS = (
    DataError,
    PipelineError,
    OutputDirLockedError,
    CheckpointError,
    ContainerError,
    TrainingDivergedError,
    ValueError,
    FileNotFoundError,
)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except KNOWN_ERRORS as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
