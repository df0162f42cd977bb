"""Command-line surface: gen-data, train, eval, diagnose, pe-map.

Every subcommand takes --seed and --out. Success exits 0; failures exit
nonzero after printing a one-line machine-parsable category to stderr:
``error:<category>: <message>``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from .config import RunConfig, load_run_config
from .data import Dataset, build_dataset, materialize, read_dataset_file, write_dataset_file
from .errors import ConfigError, ContractError, QkalignError
from .model import load_checkpoint
from .posenc import build_sinusoidal_2d, pe_distance_map
from .train import (
    branch_diag_means,
    evaluate_model,
    run_diagnostics,
    run_training,
    write_csv_row,
)


def _load_config(path, seed_override=None) -> RunConfig:
    cfg = load_run_config(path) if path else RunConfig()
    if seed_override is not None:
        cfg = dataclasses.replace(cfg, seed=seed_override)
    return cfg


def _replace_model(cfg: RunConfig, **kw) -> RunConfig:
    return dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, **kw))


def cmd_gen_data(args) -> int:
    cfg = _load_config(args.config, args.seed)
    dataset = build_dataset(cfg.data, cfg.seed)
    write_dataset_file(args.out, dataset)
    print(f"wrote {args.out}")
    for scene in dataset.scenes:
        print(
            f"scene {scene.scene_id}: extent={scene.extent:.3f} "
            f"train={dataset.split.per_scene_train[scene.scene_id]} "
            f"test={dataset.split.per_scene_test[scene.scene_id]}"
        )
    return 0


def _check_dataset_matches(cfg: RunConfig, dataset: Dataset):
    d = dataset.config
    if (
        d.grid_t != cfg.model.grid_t
        or d.grid_r != cfg.model.grid_r
        or d.feature_dim != cfg.model.dim
        or d.scenes != cfg.model.scenes
    ):
        raise ContractError(
            "dataset geometry does not match the model config "
            f"(grids {d.grid_t}/{d.grid_r}, dim {d.feature_dim}, scenes {d.scenes})"
        )


def cmd_train(args) -> int:
    cfg = _load_config(args.config, args.seed)
    if args.pe is not None:
        cfg = _replace_model(cfg, pe_kind=args.pe)
    if args.encoder_sa is not None:
        cfg = _replace_model(cfg, encoder_self_attention=args.encoder_sa)
    if args.qka is not None:
        cfg = dataclasses.replace(cfg, qka_enabled=args.qka)
    if args.epochs is not None:
        cfg = dataclasses.replace(
            cfg, optim=dataclasses.replace(cfg.optim, epochs=args.epochs)
        )
    dataset = read_dataset_file(args.data)
    _check_dataset_matches(cfg, dataset)
    # the dataset's own geometry drives the run; keep the echoed config coherent
    if cfg.data != dataset.config:
        cfg = dataclasses.replace(cfg, data=dataset.config)
    result = run_training(
        cfg,
        dataset,
        args.out,
        finetune_position=args.finetune_position,
        init_checkpoint=args.init_checkpoint,
        log=print,
    )
    print(
        f"done: best median position error {result.best_median_pos:.4f} "
        f"at epoch {result.best_epoch}; outputs in {result.out_dir}"
    )
    return 0


def cmd_eval(args) -> int:
    model, _, manifest = load_checkpoint(args.checkpoint)
    dataset = read_dataset_file(args.data)
    d = dataset.config
    mc = model.config
    if d.grid_t != mc.grid_t or d.grid_r != mc.grid_r or d.feature_dim != mc.dim:
        raise ContractError("checkpoint config does not match dataset geometry")
    thresholds = tuple(tuple(p) for p in json.loads(args.thresholds))
    arrays = materialize(dataset, args.split)
    report = evaluate_model(
        model,
        arrays,
        thresholds,
        expected_scene_ids=[s.scene_id for s in dataset.scenes],
    )
    os.makedirs(args.out, exist_ok=True)
    for w in report.warnings:
        print(f"warning: {w}")
    report_path = os.path.join(args.out, "eval_report.json")
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(
            {**report.to_dict(), "checkpoint_phase": manifest.get("phase")},
            fh,
            indent=2,
            sort_keys=True,
        )
    samples_path = os.path.join(args.out, "per_sample_errors.csv")
    with open(samples_path, "w", encoding="utf-8") as fh:
        write_csv_row(fh, ["scene_id", "pos_err", "ang_err", "scene_pred"])
        for row in report.per_sample:
            write_csv_row(
                fh,
                [row["scene_id"], row["pos_err"], row["ang_err"], row["scene_pred"]],
            )
    print(
        f"median position error {report.median_pos:.4f}, "
        f"median orientation error {report.median_ang:.2f} deg, "
        f"scene accuracy {report.scene_accuracy:.3f}"
    )
    for sid, stats in report.per_scene.items():
        print(
            f"scene {sid}: median {stats['median_pos']:.4f} / "
            f"{stats['median_ang']:.2f} deg over {stats['count']} samples"
        )
    for (p, a), v in report.recalls.items():
        print(f"recall@({p}, {a} deg): {v:.3f}")
    print(f"wrote {report_path} and {samples_path}")
    return 0


def cmd_diagnose(args) -> int:
    model, _, manifest = load_checkpoint(args.checkpoint)
    dataset = read_dataset_file(args.data)
    arrays = materialize(dataset, args.split)
    diags = run_diagnostics(model, arrays, args.sample_limit)
    os.makedirs(args.out, exist_ok=True)
    records_path = os.path.join(args.out, "records.csv")
    with open(records_path, "w", encoding="utf-8") as fh:
        write_csv_row(
            fh,
            [
                "branch", "layer", "head",
                "purity", "purity_defined", "swapped", "blended_keys",
                "entropy", "entropy_normalized", "region_distance",
            ],
        )
        for d in diags:
            write_csv_row(
                fh,
                [
                    d.branch, d.layer, d.head,
                    d.purity, int(d.purity_defined), int(d.swapped), d.blended_keys,
                    d.entropy, d.entropy_normalized, d.region_distance,
                ],
            )
    summary_path = os.path.join(args.out, "summary.csv")
    with open(summary_path, "w", encoding="utf-8") as fh:
        write_csv_row(
            fh,
            ["branch", "layer", "mean_entropy", "mean_purity", "mean_region_distance",
             "undefined_purities", "swap_events"],
        )
        groups = {}
        for d in diags:
            groups.setdefault((d.branch, d.layer), []).append(d)
        for (branch, layer), rows in sorted(groups.items()):
            defined = [r.purity for r in rows if r.purity_defined]
            write_csv_row(
                fh,
                [
                    branch,
                    layer,
                    float(np.mean([r.entropy for r in rows])),
                    float(np.mean(defined)) if defined else float("nan"),
                    float(np.mean([r.region_distance for r in rows])),
                    sum(1 for r in rows if not r.purity_defined),
                    sum(1 for r in rows if r.swapped),
                ],
            )
    means = branch_diag_means(diags)
    print(f"checkpoint phase: {manifest.get('phase')}")
    print(f"records: {len(diags)}")
    for branch, vals in means.items():
        print(
            f"branch {branch}: entropy={vals['entropy']:.4f} "
            f"purity={vals['purity']:.4f} region_distance={vals['region_distance']:.4f}"
        )
    print(f"wrote {records_path} and {summary_path}")
    return 0


def _parse_grid(text: str):
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError as e:
        raise ConfigError(f"grid must look like 7x7, got {text!r}") from e


def _parse_anchor(text: str):
    try:
        r, c = text.split(",")
        return int(r), int(c)
    except ValueError as e:
        raise ConfigError(f"anchor must look like 0,0 got {text!r}") from e


def cmd_pe_map(args) -> int:
    anchor = _parse_anchor(args.anchor)
    if args.pe_kind == "fixed":
        grid = _parse_grid(args.grid)
        pe = build_sinusoidal_2d(grid, args.dim)
    else:
        if not args.checkpoint:
            raise ContractError("pe-map with a learnable table needs --checkpoint")
        model, _, _ = load_checkpoint(args.checkpoint)
        if model.config.pe_kind != "learnable":
            raise ContractError("checkpoint was trained with the fixed encoding")
        pe = model.pe[args.branch]
    dist = pe_distance_map(pe, anchor)
    with open(args.out, "w", encoding="utf-8") as fh:
        write_csv_row(fh, ["row", "col", "distance"])
        h, w = pe.grid
        for r in range(h):
            for c in range(w):
                write_csv_row(fh, [r, c, float(dist[r, c])])
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qkalign",
        description="Synthetic multi-scene pose regression with query-key alignment",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset file")
    p.add_argument("--config", help="RunConfig JSON; defaults when omitted")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="output dataset file")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a dataset file")
    p.add_argument("--config", help="RunConfig JSON; defaults when omitted")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output run directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--pe", choices=("fixed", "learnable"), default=None)
    qka = p.add_mutually_exclusive_group()
    qka.add_argument("--qka", dest="qka", action="store_true", default=None)
    qka.add_argument("--no-qka", dest="qka", action="store_false")
    sa = p.add_mutually_exclusive_group()
    sa.add_argument("--encoder-sa", dest="encoder_sa", action="store_true", default=None)
    sa.add_argument("--no-encoder-sa", dest="encoder_sa", action="store_false")
    p.add_argument("--finetune-position", action="store_true")
    p.add_argument("--init-checkpoint", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument(
        "--thresholds",
        default="[[0.25, 10.0], [0.25, 20.0], [0.5, 10.0], [0.5, 20.0]]",
        help="JSON list of [pos, ang] recall threshold pairs",
    )
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="output report directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("diagnose", help="attention diagnostics for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--sample-limit", type=int, default=16)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="output directory for CSVs")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("pe-map", help="positional-encoding distance map CSV")
    p.add_argument("--pe-kind", choices=("fixed", "learnable"), required=True)
    p.add_argument("--grid", default="7x7", help="HxW, fixed kind only")
    p.add_argument("--dim", type=int, default=64, help="encoding dim, fixed kind only")
    p.add_argument("--anchor", default="0,0")
    p.add_argument("--checkpoint", default=None, help="required for learnable kind")
    p.add_argument("--branch", choices=("t", "r"), default="r")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_pe_map)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except QkalignError as e:
        print(f"error:{e.category}: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error:io: {e}", file=sys.stderr)
        return 3
    except json.JSONDecodeError as e:
        print(f"error:config: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
