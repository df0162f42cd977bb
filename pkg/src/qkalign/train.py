"""Training loop, evaluation, and per-epoch diagnostics aggregation.

Outputs per run directory: config.json (the RunConfig, verbatim),
steps.csv (one LossBreakdown row per optimizer step), metrics.csv (one row
per epoch with evaluation and diagnostics means), checkpoint_best.ckpt (at
the best test median position error) and checkpoint_final.ckpt.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, backward, no_grad
from .config import RunConfig, save_run_config
from .data import Dataset, materialize, oversampled_epoch
from .diagnostics import diagnose_record
from .errors import NumericError
from .losses import LossBreakdown, total_loss
from .model import PoseTransformer, load_checkpoint, save_checkpoint
from .optim import adam_step, init_adam_state, lr_at_epoch
from .pose import median, orientation_error_deg, position_error, recall_at

DIAG_CHUNK = 4  # forward batch for diagnostics; bounds captured-map memory


def fmt_cell(v) -> str:
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def write_csv_row(fh, cells) -> None:
    fh.write(",".join(fmt_cell(c) for c in cells) + "\n")
    fh.flush()


@dataclass
class EvalReport:
    median_pos: float
    median_ang: float
    avg_scene_median_pos: float
    avg_scene_median_ang: float
    per_scene: dict
    recalls: dict
    scene_accuracy: float
    per_sample: list
    warnings: list

    def to_dict(self) -> dict:
        return {
            "median_pos": self.median_pos,
            "median_ang": self.median_ang,
            "avg_scene_median_pos": self.avg_scene_median_pos,
            "avg_scene_median_ang": self.avg_scene_median_ang,
            "per_scene": {str(k): v for k, v in self.per_scene.items()},
            "recalls": {f"{p}:{a}": v for (p, a), v in self.recalls.items()},
            "scene_accuracy": self.scene_accuracy,
            "warnings": self.warnings,
        }


def evaluate_model(model, arrays, thresholds, batch_size: int = 64,
                   expected_scene_ids=None) -> EvalReport:
    """Inference-mode evaluation over materialized samples."""
    n = arrays["scene_ids"].shape[0]
    per_sample = []
    with no_grad():
        for start in range(0, n, batch_size):
            sl = slice(start, start + batch_size)
            out = model.forward(arrays["tokens_t"][sl], arrays["tokens_r"][sl])
            poses = arrays["poses"][sl]
            ids = arrays["scene_ids"][sl]
            pred = np.argmax(out.scene_logits.data, axis=1)
            for i in range(poses.shape[0]):
                per_sample.append(
                    {
                        "scene_id": int(ids[i]),
                        "pos_err": position_error(poses[i, :3], out.t_hat.data[i]),
                        "ang_err": orientation_error_deg(
                            poses[i, 3:], out.r_hat.data[i]
                        ),
                        "scene_pred": int(pred[i]),
                    }
                )
    by_scene = {}
    for row in per_sample:
        by_scene.setdefault(row["scene_id"], []).append(row)
    warnings = []
    if expected_scene_ids is not None:
        for sid in expected_scene_ids:
            if sid not in by_scene:
                warnings.append(f"scene {sid} has no test samples; omitted")
    per_scene = {
        sid: {
            "median_pos": median([r["pos_err"] for r in rows]),
            "median_ang": median([r["ang_err"] for r in rows]),
            "count": len(rows),
        }
        for sid, rows in sorted(by_scene.items())
    }
    pairs = [(r["pos_err"], r["ang_err"]) for r in per_sample]
    recalls = {
        (p, a): recall_at(pairs, p, a) for p, a in thresholds
    }
    accuracy = float(
        np.mean([r["scene_pred"] == r["scene_id"] for r in per_sample])
    )
    return EvalReport(
        median_pos=median([e[0] for e in pairs]),
        median_ang=median([e[1] for e in pairs]),
        avg_scene_median_pos=float(
            np.mean([v["median_pos"] for v in per_scene.values()])
        ),
        avg_scene_median_ang=float(
            np.mean([v["median_ang"] for v in per_scene.values()])
        ),
        per_scene=per_scene,
        recalls=recalls,
        scene_accuracy=accuracy,
        per_sample=per_sample,
        warnings=warnings,
    )


def run_diagnostics(model, arrays, sample_limit: int) -> list:
    """Per-record diagnostics over the first ``sample_limit`` samples."""
    n = min(sample_limit, arrays["scene_ids"].shape[0])
    diags = []
    with no_grad():
        for start in range(0, n, DIAG_CHUNK):
            stop = min(start + DIAG_CHUNK, n)
            out = model.forward(
                arrays["tokens_t"][start:stop], arrays["tokens_r"][start:stop]
            )
            for b in range(stop - start):
                for record in out.attention_records(b):
                    diags.append(diagnose_record(record))
    return diags


def branch_diag_means(diags) -> dict:
    """Mean entropy / defined purity / region distance per branch; empty
    diagnostics yield an empty dict (encoder self-attention disabled)."""
    means = {}
    for branch in ("t", "r"):
        rows = [d for d in diags if d.branch == branch]
        if not rows:
            continue
        defined = [d.purity for d in rows if d.purity_defined]
        means[branch] = {
            "entropy": float(np.mean([d.entropy for d in rows])),
            "purity": float(np.mean(defined)) if defined else float("nan"),
            "region_distance": float(np.mean([d.region_distance for d in rows])),
        }
    return means


@dataclass
class TrainResult:
    out_dir: str
    best_epoch: int
    best_median_pos: float
    final_eval: EvalReport
    checkpoint_final: str
    checkpoint_best: str
    metrics_path: str


STEP_HEADER = ["epoch", "step"] + list(LossBreakdown.FIELDS)


def _metrics_header(cfg: RunConfig) -> list:
    header = ["epoch", "step", "lr"]
    header += list(LossBreakdown.FIELDS)
    header += ["median_pos_err", "median_ang_err"]
    header += [f"recall_pos{p}_ang{a}" for p, a in cfg.recall_thresholds]
    header += ["scene_accuracy"]
    header += [
        "entropy_t", "entropy_r",
        "purity_t", "purity_r",
        "region_dist_t", "region_dist_r",
    ]
    return header


def trainable_names(model: PoseTransformer, finetune_position: bool) -> list:
    names = list(model.params) + ["loss.s_t", "loss.s_r"]
    if not finetune_position:
        return names
    # position-branch fine-tuning: only the t-branch and its regressor move
    return [
        n for n in names if n.startswith("t.") or n.startswith("head.reg_t.")
    ]


def run_training(
    cfg: RunConfig,
    dataset: Dataset,
    out_dir,
    finetune_position: bool = False,
    init_checkpoint=None,
    log=None,
) -> TrainResult:
    log = log or (lambda msg: None)
    os.makedirs(out_dir, exist_ok=True)
    save_run_config(cfg, os.path.join(out_dir, "config.json"))

    model = PoseTransformer(cfg.model, seed=cfg.seed)
    extras = {
        "loss.s_t": Tensor(np.float64(cfg.loss.s_t_init), requires_grad=True),
        "loss.s_r": Tensor(np.float64(cfg.loss.s_r_init), requires_grad=True),
    }
    if init_checkpoint is not None:
        loaded, loaded_extras, _ = load_checkpoint(init_checkpoint)
        if loaded.config != cfg.model:
            from .errors import ContractError

            raise ContractError(
                "init checkpoint model config does not match the run config"
            )
        model = loaded
        extras.update(loaded_extras)

    all_tensors = {**model.params, **extras}
    train_names = trainable_names(model, finetune_position)
    train_tensors = [all_tensors[n] for n in train_names]
    adam_state = init_adam_state([t.data for t in train_tensors])

    train_arrays = materialize(dataset, "train")
    test_arrays = materialize(dataset, "test")
    scene_ids_all = [s.scene_id for s in dataset.scenes]

    rng_epochs = np.random.default_rng(np.random.SeedSequence((cfg.seed, 200)))
    m = cfg.model.scenes
    batch = cfg.optim.batch_size
    phase = "finetune-position" if finetune_position else "main"

    steps_path = os.path.join(out_dir, "steps.csv")
    metrics_path = os.path.join(out_dir, "metrics.csv")
    ckpt_best = os.path.join(out_dir, "checkpoint_best.ckpt")
    ckpt_final = os.path.join(out_dir, "checkpoint_final.ckpt")

    best_median = float("inf")
    best_epoch = 0
    global_step = 0
    final_eval = None

    with open(steps_path, "w", encoding="utf-8") as steps_fh, open(
        metrics_path, "w", encoding="utf-8"
    ) as metrics_fh:
        write_csv_row(steps_fh, STEP_HEADER)
        write_csv_row(metrics_fh, _metrics_header(cfg))
        for epoch in range(1, cfg.optim.epochs + 1):
            lr = lr_at_epoch(
                epoch, cfg.optim.lr, cfg.optim.decay_epochs, cfg.optim.decay_factor
            )
            order = oversampled_epoch(dataset.split, rng_epochs)
            epoch_rows = []
            for start in range(0, len(order), batch):
                idx = order[start : start + batch]
                ids = train_arrays["scene_ids"][idx]
                poses = train_arrays["poses"][idx]
                onehot = np.zeros((len(idx), m))
                onehot[np.arange(len(idx)), ids] = 1.0
                out = model.forward(
                    train_arrays["tokens_t"][idx],
                    train_arrays["tokens_r"][idx],
                    scene_index=ids,
                )
                loss, breakdown = total_loss(
                    out,
                    poses[:, :3],
                    poses[:, 3:],
                    onehot,
                    extras["loss.s_t"],
                    extras["loss.s_r"],
                    cfg.loss.lambda_aux,
                    cfg.qka_enabled,
                )
                if not np.isfinite(breakdown.l_total):
                    marker = {
                        "epoch": epoch,
                        "step": global_step,
                        "breakdown": breakdown.as_row(),
                    }
                    with open(
                        os.path.join(out_dir, "abort.json"), "w", encoding="utf-8"
                    ) as fh:
                        json.dump(marker, fh, indent=2)
                    raise NumericError(
                        f"non-finite loss at epoch {epoch}, step {global_step}"
                    )
                backward(loss)
                grads = [
                    t.grad if t.grad is not None else np.zeros_like(t.data)
                    for t in train_tensors
                ]
                adam_step([t.data for t in train_tensors], grads, adam_state, lr)
                for t in all_tensors.values():
                    t.grad = None
                global_step += 1
                write_csv_row(
                    steps_fh, [epoch, global_step] + breakdown.as_row()
                )
                epoch_rows.append(breakdown.as_row())
            report = evaluate_model(
                model, test_arrays, cfg.recall_thresholds,
                expected_scene_ids=scene_ids_all,
            )
            diags = run_diagnostics(model, test_arrays, cfg.diag_samples)
            means = branch_diag_means(diags)
            loss_means = np.mean(np.asarray(epoch_rows), axis=0).tolist()
            row = [epoch, global_step, lr] + loss_means
            row += [report.median_pos, report.median_ang]
            row += [report.recalls[tuple(p)] for p in cfg.recall_thresholds]
            row += [report.scene_accuracy]
            for key in ("entropy", "purity", "region_distance"):
                for branch in ("t", "r"):
                    row.append(means[branch][key] if branch in means else "")
            write_csv_row(metrics_fh, row)
            log(
                f"epoch {epoch}: total={loss_means[7]:.4f} "
                f"median_pos={report.median_pos:.3f} median_ang={report.median_ang:.1f} "
                f"scene_acc={report.scene_accuracy:.2f}"
            )
            if report.median_pos < best_median:
                best_median = report.median_pos
                best_epoch = epoch
                save_checkpoint(ckpt_best, model, extras, phase=phase)
            final_eval = report
    save_checkpoint(ckpt_final, model, extras, phase=phase)
    return TrainResult(
        out_dir=str(out_dir),
        best_epoch=best_epoch,
        best_median_pos=best_median,
        final_eval=final_eval,
        checkpoint_final=ckpt_final,
        checkpoint_best=ckpt_best,
        metrics_path=metrics_path,
    )
