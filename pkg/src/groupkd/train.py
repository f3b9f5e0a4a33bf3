"""Training loops, metrics emission, sweeps, and diagnostics."""

import csv
import json
import os
import time

import numpy as np

from . import data, model as model_mod, optim
from .grouping import build_partition
from .kdloss import decompose
from .numerics import softmax

RESIDUAL_BUDGET = 1e-8

DIAGNOSE_HEADER = ["sample_id", "rank", "class_id", "p_teacher", "p_student", "in_phi"]


class SelfAuditError(RuntimeError):
    """A run violated one of its own numerical invariants."""


def resolve_dataset(cfg):
    """Synthetic blobs by default; IDX files when paths are configured.

    For IDX data the top 20% of class ids (at least 2) become held-out eval
    identities, mirroring the open-set split of the synthetic generator.
    """
    if cfg.idx_images:
        features, labels = data.load_idx(cfg.idx_images, cfg.idx_labels)
        if features.shape[1] != cfg.student.input_dim:
            raise ValueError(
                f"IDX feature dim {features.shape[1]} != configured input_dim"
            )
        classes = np.unique(labels)
        n_eval = max(2, len(classes) // 5)
        eval_classes = set(classes[-n_eval:].tolist())
        is_eval = np.isin(labels, list(eval_classes))
        remap = {c: i for i, c in enumerate(classes[: len(classes) - n_eval])}
        train_y = np.array([remap[c] for c in labels[~is_eval]])
        return data.Dataset(features[~is_eval], train_y,
                            features[is_eval], labels[is_eval])
    return data.generate(cfg.dataset)


def num_train_classes(ds):
    return int(ds.train_y.max()) + 1


def _eval_model(bundle, ds, pairs):
    emb, _ = model_mod.batch_forward(bundle, ds.eval_x)
    return data.verify(emb, pairs)


def _record(epoch, sums, count, report):
    rec = {"epoch": epoch}
    for key, value in sums.items():
        rec[key] = value / count
    rec["accuracy"] = report.accuracy
    rec["tpr_at_fpr"] = {f"{t:g}": v for t, v in sorted(report.tpr_at_fpr.items())}
    return rec


def _train(bundle, cfg, ds, out_dir, metrics_name, teacher_logits=None):
    """Shared loop for teacher pre-training and student distillation.

    Metrics are line-delimited JSON, one record per epoch, preceded by the
    resolved config.  Wall-clock timings go to a sidecar file so the metrics
    stream stays byte-identical across reruns of the same config + seed.
    """
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    pairs = data.make_pairs(ds.eval_y, cfg.num_eval_pairs, cfg.eval_pair_seed)
    params = bundle.param_dict()
    state = {}
    n = ds.train_x.shape[0]

    records, timings = [], []
    worst_residual = 0.0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        perm = rng.permutation(n)
        sums = None
        seen = 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            z_t = None if teacher_logits is None else teacher_logits[idx]
            terms, grads = model_mod.composite_step(
                bundle, ds.train_x[idx], ds.train_y[idx], z_t, cfg.kd,
                cfg.variant, cfg.kd_logits_source,
            )
            optim.step(params, grads, state, cfg.sgd, epoch)
            if sums is None:
                sums = {k: 0.0 for k in terms}
            for k, v in terms.items():
                sums[k] += v * idx.size
            seen += idx.size
        report = _eval_model(bundle, ds, pairs)
        rec = _record(epoch, sums, seen, report)
        worst_residual = max(worst_residual, rec["residual"])
        records.append(rec)
        timings.append({"epoch": epoch, "wall_seconds": time.perf_counter() - t0})

    metrics_path = os.path.join(out_dir, metrics_name)
    with open(metrics_path, "w") as f:
        f.write(json.dumps({"config": cfg.to_dict()}, sort_keys=True) + "\n")
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    with open(os.path.join(out_dir, metrics_name + ".timings"), "w") as f:
        for t in timings:
            f.write(json.dumps(t) + "\n")

    if worst_residual > RESIDUAL_BUDGET:
        raise SelfAuditError(
            f"epoch-mean decomposition residual {worst_residual:.3e} "
            f"exceeds {RESIDUAL_BUDGET:.0e}"
        )
    return metrics_path, records


def train_teacher(cfg, out_dir):
    """Classification-only training of the wide network; frozen checkpoint."""
    ds = resolve_dataset(cfg)
    bundle = model_mod.init(cfg.teacher, num_train_classes(ds), cfg.seed,
                            cfg.head_kind, cfg.head_scale, cfg.head_margin)
    metrics_path, records = _train(bundle, cfg, ds, out_dir, "teacher_metrics.jsonl")
    bundle.frozen = True
    ckpt_path = model_mod.save(bundle, os.path.join(out_dir, "teacher.ckpt"))
    return ckpt_path, metrics_path, records


def distill(cfg, teacher_ckpt, out_dir):
    """Train the narrow student under the configured loss variant."""
    ds = resolve_dataset(cfg)
    num_classes = num_train_classes(ds)
    student = model_mod.init(cfg.student, num_classes, cfg.seed,
                             cfg.head_kind, cfg.head_scale, cfg.head_margin)

    teacher_logits = None
    if cfg.variant != "scratch":
        teacher = model_mod.load(teacher_ckpt)
        if not teacher.frozen:
            raise ValueError("teacher checkpoint is not frozen")
        if teacher.head.num_classes != num_classes:
            raise ValueError(
                f"teacher has {teacher.head.num_classes} classes, "
                f"dataset has {num_classes}"
            )
        # frozen teacher: its distillation logits are constants of the run
        teacher_logits = model_mod.kd_logits(
            teacher, ds.train_x, ds.train_y, cfg.kd_logits_source
        )

    metrics_path, records = _train(student, cfg, ds, out_dir, "metrics.jsonl",
                                   teacher_logits)
    model_mod.save(student, os.path.join(out_dir, "student.ckpt"))
    return metrics_path, records


SWEEPS = ("tau", "lambda1", "lambda2", "variant")


def _apply_sweep_value(cfg, sweep, value):
    if sweep == "tau":
        cfg.kd.tau = float(value)
    elif sweep == "lambda1":
        if value == "teacher_mass":
            cfg.kd.lambda1_mode = "teacher_mass"
        else:
            cfg.kd.lambda1_mode = "constant"
            cfg.kd.lambda1 = float(value)
    elif sweep == "lambda2":
        cfg.kd.lambda2 = float(value)
    elif sweep == "variant":
        cfg.variant = str(value)
    else:
        raise ValueError(f"unknown sweep {sweep!r}")
    return cfg


def ablate(cfg, sweep, values, teacher_ckpt, out_dir):
    """One full distillation per sweep point, common seed; summary CSV."""
    from .config import config_from_dict

    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for value in values:
        point_cfg = _apply_sweep_value(config_from_dict(cfg.to_dict()), sweep, value)
        point_dir = os.path.join(out_dir, f"{sweep}_{value}")
        _, records = distill(point_cfg, teacher_ckpt, point_dir)
        final = records[-1]
        row = {
            "sweep": sweep,
            "value": value,
            "accuracy": final["accuracy"],
            "loss_cls": final["loss_cls"],
            "loss_kd": final["loss_kd"],
            "primary": final["primary"],
            "secondary": final["secondary"],
            "binary": final["binary"],
            "mean_k": final["mean_k"],
            "mean_p_phi_t": final["mean_p_phi_t"],
        }
        for key, tpr in final["tpr_at_fpr"].items():
            row[f"tpr_at_fpr_{key}"] = tpr
        rows.append(row)

    csv_path = os.path.join(out_dir, f"sweep_{sweep}.csv")
    fields = sorted({k for r in rows for k in r}, key=lambda k: (k != "sweep", k != "value", k))
    with open(csv_path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)
    return csv_path, rows


def diagnose(teacher_ckpt, student_ckpt, cfg, sample_ids, tau, out_dir):
    """Plot-ready dump of ranked teacher/student probabilities per sample.

    Rows follow the student's descending-probability order; in_phi marks the
    head group chosen by the cumulative threshold.  A per-sample summary CSV
    carries k, the group masses, and the decomposition terms.
    """
    os.makedirs(out_dir, exist_ok=True)
    ds = resolve_dataset(cfg)
    teacher = model_mod.load(teacher_ckpt)
    student = model_mod.load(student_ckpt)

    rows, summary = [], []
    for sid in sample_ids:
        if not 0 <= sid < ds.train_x.shape[0]:
            raise ValueError(f"bad sample id {sid}")
        x = ds.train_x[sid]
        z_t = model_mod.kd_logits(teacher, x[None, :])[0]
        z_s = model_mod.kd_logits(student, x[None, :])[0]
        p_t = softmax(z_t, cfg.kd.temperature)
        p_s = softmax(z_s, cfg.kd.temperature)
        part = build_partition(z_s, tau, cfg.kd.temperature)
        order = np.argsort(-p_s, kind="stable")
        for r, cls in enumerate(order):
            rows.append([sid, r, int(cls), p_t[cls], p_s[cls], int(r < part.k)])
        rep = decompose(z_t, z_s, part, cfg.kd.temperature)
        summary.append({
            "sample_id": sid, "k": part.k, "tau": tau,
            "p_phi_t": rep.p_phi_t, "p_psi_t": rep.p_psi_t,
            "primary": rep.primary, "secondary": rep.secondary,
            "binary": rep.binary, "full_kd": rep.full_kd,
            "residual": rep.residual,
        })

    csv_path = os.path.join(out_dir, "diagnose.csv")
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(DIAGNOSE_HEADER)
        w.writerows(rows)
    summary_path = os.path.join(out_dir, "diagnose_summary.csv")
    with open(summary_path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(summary[0]))
        w.writeheader()
        w.writerows(summary)
    return csv_path, summary_path, rows, summary
