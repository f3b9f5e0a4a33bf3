"""Acceptance gate: one test per release criterion, each printing a single
PASS/FAIL line (run with -s or -rA to see them all).

The trend tests train real models at the default desk scale and take several
minutes; everything else finishes in seconds.
"""

import json
import os
import time

import numpy as np
import pytest

from conftest import central_diff, max_rel_err
from groupkd import cli, marginloss, model as model_mod, train
from groupkd.config import ExperimentConfig, config_from_dict
from groupkd.data import load_idx, write_idx
from groupkd.grouping import build_partition, rank, select_k
from groupkd.kdloss import (
    KDConfig,
    classic_kd,
    decompose,
    gkd_backward,
    gkd_loss,
    kd_backward,
)
from groupkd.model import MLPSpec, batch_forward, init, kd_logits, total_loss_step


def criterion(name, ok, detail):
    print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


def random_logits(rng, n, c, scale=3.0):
    return rng.normal(scale=scale, size=(n, c))


# --- identity and reduction --------------------------------------------------

def test_decomposition_identity():
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    worst = 0.0
    for c in (8, 64, 512, 4096):
        z_t = random_logits(rng, 1000, c)
        z_s = random_logits(rng, 1000, c)
        for tau in (0.5, 0.93, 0.99):
            for i in range(1000):
                part = build_partition(z_s[i], tau)
                rep = decompose(z_t[i], z_s[i], part)
                worst = max(worst, rep.residual / max(rep.full_kd, 1e-300))
    elapsed = time.perf_counter() - t0
    criterion(
        "decomposition identity",
        worst <= 1e-9 and elapsed < 30,
        f"max relative residual {worst:.3e} (<=1e-9), {elapsed:.1f}s (<30s)",
    )


def test_reduction_to_classic_kd():
    rng = np.random.default_rng(1)
    cfg = KDConfig(tau=1.0, lambda1=1.0, lambda2=1.0, temperature=1.0)
    worst = 0.0
    for _ in range(1000):
        z_t = rng.normal(scale=3.0, size=64)
        z_s = rng.normal(scale=3.0, size=64)
        worst = max(worst, abs(gkd_loss(z_t, z_s, cfg) - classic_kd(z_t, z_s)))
    criterion("tau=1 reduction", worst <= 1e-9,
              f"max |gkd_loss - classic_kd| = {worst:.3e} (<=1e-9)")


# --- gradient suite ----------------------------------------------------------

def _fd_gkd(rng, cfg):
    """gkd_backward vs central differences with the partition held at the
    base point (the ranking is a constant of the forward pass)."""
    z_t = rng.normal(scale=2.0, size=24)
    z_s = rng.normal(scale=2.0, size=24)
    part = build_partition(z_s, cfg.tau, cfg.temperature)

    def loss(z):
        rep = decompose(z_t, z, part, cfg.temperature)
        lam1 = rep.p_phi_t if cfg.lambda1_mode == "teacher_mass" else cfg.lambda1
        return lam1 * rep.primary + cfg.lambda2 * rep.binary

    return max_rel_err(gkd_backward(z_t, z_s, cfg), central_diff(loss, z_s))


def test_gradient_suite():
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    errs = {}

    errs["gkd_backward"] = max(
        _fd_gkd(rng, KDConfig(tau=tau, lambda1=lam1, lambda2=1.0))
        for tau in (0.5, 0.93) for lam1 in (1.0, 8.0) for _ in range(5)
    )
    errs["kd_backward"] = max(
        max_rel_err(
            kd_backward(z_t := rng.normal(size=16), z_s := rng.normal(size=16), T),
            central_diff(lambda z: classic_kd(z_t, z, T), z_s),
        )
        for T in (1.0, 4.0) for _ in range(5)
    )

    head = marginloss.CosineHead(
        weights=rng.normal(size=(10, 6)), scale=8.0, margin=0.3, kind="arcface")
    worst = 0.0
    for _ in range(5):
        e = rng.normal(size=6)
        grad_e, grad_w = marginloss.head_backward(e, 3, head)
        fd_e = central_diff(
            lambda v: marginloss.ce_loss(
                marginloss.apply_margin(marginloss.cosine_logits(v, head), 3, head), 3),
            e)
        worst = max(worst, max_rel_err(grad_e, fd_e))

        def wloss(flat):
            h2 = marginloss.CosineHead(weights=flat.reshape(10, 6),
                                       scale=8.0, margin=0.3, kind="arcface")
            return marginloss.ce_loss(
                marginloss.apply_margin(marginloss.cosine_logits(e, h2), 3, h2), 3)

        worst = max(worst, max_rel_err(grad_w.ravel(),
                                       central_diff(wloss, head.weights.ravel())))
    errs["head_backward"] = worst

    spec = MLPSpec(input_dim=5, hidden_dims=[7], embedding_dim=4)
    net = init(spec, num_classes=6, seed=3)
    worst = 0.0
    for _ in range(5):
        x = rng.normal(size=5)
        v = rng.normal(size=4)
        emb, cache = model_mod.forward(net, x)
        grads = model_mod.backward(net, cache, v)

        def probe(flat):
            layers, off = [], 0
            for W, b in net.layers:
                layers.append((flat[off:off + W.size].reshape(W.shape),
                               flat[off + W.size:off + W.size + b.size]))
                off += W.size + b.size
            h = x
            for i, (W, b) in enumerate(layers):
                h = W @ h + b
                if i < len(layers) - 1:
                    h = np.maximum(h, 0.0)
            return float(v @ h)

        flat = np.concatenate([np.concatenate([W.ravel(), b]) for W, b in net.layers])
        fd = central_diff(probe, flat)
        analytic = np.concatenate(
            [np.concatenate([grads[f"W{i}"].ravel(), grads[f"b{i}"]])
             for i in range(len(net.layers))])
        worst = max(worst, max_rel_err(analytic, fd))
    errs["model_backward"] = worst

    # composite: classification + distillation through the student, partitions
    # frozen at the base point
    spec_t = MLPSpec(input_dim=4, hidden_dims=[8], embedding_dim=4)
    spec_s = MLPSpec(input_dim=4, hidden_dims=[5], embedding_dim=4)
    teacher = init(spec_t, num_classes=6, seed=7, scale=8.0, margin=0.3)
    teacher.frozen = True
    student = init(spec_s, num_classes=6, seed=8, scale=8.0, margin=0.3)
    X = rng.normal(size=(3, 4))
    y = np.array([0, 2, 5])
    cfg = KDConfig(tau=0.8, lambda1=2.0, lambda2=1.0)
    z_t = kd_logits(teacher, X)
    _, grads = total_loss_step(teacher, student, (X, y), cfg)

    emb, _ = batch_forward(student, X)
    cos, _ = marginloss.batch_cosine_logits(emb, student.head)
    parts = [build_partition(student.head.scale * cos[i], cfg.tau)
             for i in range(3)]

    def composite(flat):
        layers, off = [], 0
        for W, b in student.layers:
            layers.append((flat[off:off + W.size].reshape(W.shape),
                           flat[off + W.size:off + W.size + b.size]))
            off += W.size + b.size
        s2 = init(spec_s, num_classes=6, seed=8, scale=8.0, margin=0.3)
        s2.layers = layers
        s2.head.weights = flat[off:].reshape(student.head.weights.shape)
        emb2, _ = batch_forward(s2, X)
        cos2, _ = marginloss.batch_cosine_logits(emb2, s2.head)
        cls = marginloss.batch_ce(
            marginloss.batch_apply_margin(cos2, y, s2.head), y).mean()
        kd = 0.0
        for i, part in enumerate(parts):
            rep = decompose(z_t[i], s2.head.scale * cos2[i], part)
            kd += (cfg.lambda1 * rep.primary + cfg.lambda2 * rep.binary) / 3
        return float(cls + kd)

    flat = np.concatenate(
        [np.concatenate([W.ravel(), b]) for W, b in student.layers]
        + [student.head.weights.ravel()])
    fd = central_diff(composite, flat)
    analytic = np.concatenate(
        [np.concatenate([grads[f"W{i}"].ravel(), grads[f"b{i}"]])
         for i in range(len(student.layers))]
        + [grads["head_W"].ravel()])
    errs["composite"] = max_rel_err(analytic, fd)

    elapsed = time.perf_counter() - t0
    ok = (all(errs[k] <= 1e-4 for k in
              ("gkd_backward", "kd_backward", "head_backward", "model_backward"))
          and errs["composite"] <= 1e-3 and elapsed < 60)
    detail = ", ".join(f"{k}={v:.2e}" for k, v in errs.items())
    criterion("gradient suite", ok,
              f"{detail} (<=1e-4, composite <=1e-3), {elapsed:.1f}s (<60s)")


# --- partition properties ----------------------------------------------------

def test_tail_permutation_invariance():
    rng = np.random.default_rng(3)
    cfg = KDConfig(tau=0.7, lambda1=8.0, lambda2=1.0)
    worst = 0.0
    for _ in range(100):
        z_s = rng.normal(scale=2.0, size=32)
        z_t = rng.normal(scale=2.0, size=32)
        part = build_partition(z_s, cfg.tau)
        if part.psi.size < 2:
            continue
        base = gkd_loss(z_t, z_s, cfg)
        z_t2 = z_t.copy()
        z_t2[rng.permutation(part.psi)] = z_t[part.psi]
        worst = max(worst, abs(gkd_loss(z_t2, z_s, cfg) - base))
    criterion("tail permutation invariance", worst <= 1e-12,
              f"max loss change {worst:.3e} (<=1e-12)")


def test_select_k_brute_force_and_monotonicity():
    rng = np.random.default_rng(4)
    taus = np.linspace(0.05, 1.0, 20)
    ok = True
    for _ in range(10_000):
        c = int(rng.integers(2, 40))
        p = rng.dirichlet(np.full(c, rng.uniform(0.1, 5.0)))
        ranked = rank(p)
        ks = []
        for tau in taus:
            k = select_k(ranked, tau)
            brute = int(np.argmin(np.abs(ranked.cumulative - tau))) + 1
            if k != brute:
                ok = False
            ks.append(k)
        if any(a > b for a, b in zip(ks, ks[1:])):  # k non-decreasing in tau
            ok = False
        if not ok:
            break
    criterion("select_k brute force + k(tau) monotonicity", ok,
              "10,000 random probability vectors, 20 thresholds each")


# --- trend reproduction ------------------------------------------------------

SEEDS = (1, 2, 3, 4, 5)
TABLE1_VARIANTS = ("scratch", "full_kd", "primary_only", "primary_binary")
TABLE2_TAUS = (1.0, 0.99, 0.95, 0.93, 0.91)


def _cfg(seed, **kd_overrides):
    cfg = ExperimentConfig(seed=seed)
    for k, v in kd_overrides.items():
        setattr(cfg.kd, k, v)
    return cfg


@pytest.fixture(scope="session")
def teachers(tmp_path_factory):
    base = tmp_path_factory.mktemp("teachers")
    out = {}
    for seed in SEEDS:
        d = str(base / f"seed{seed}")
        ckpt, _, _ = train.train_teacher(_cfg(seed), d)
        out[seed] = ckpt
    return out


@pytest.fixture(scope="session")
def table1(teachers, tmp_path_factory):
    base = tmp_path_factory.mktemp("table1")
    t0 = time.perf_counter()
    acc = {v: [] for v in TABLE1_VARIANTS}
    for seed in SEEDS:
        for variant in TABLE1_VARIANTS:
            cfg = _cfg(seed)
            cfg.variant = variant
            _, records = train.distill(cfg, teachers[seed],
                                       str(base / f"{variant}_{seed}"))
            acc[variant].append(records[-1]["accuracy"])
    medians = {v: float(np.median(acc[v])) for v in TABLE1_VARIANTS}
    return medians, time.perf_counter() - t0, acc


def test_table1_variant_trend(table1):
    medians, elapsed, _ = table1
    gkd = medians["primary_binary"]
    ok = (gkd >= medians["primary_only"]
          and medians["primary_only"] >= medians["full_kd"] - 0.003
          and gkd >= medians["scratch"] + 0.005
          and elapsed < 900)
    detail = (", ".join(f"{v}={medians[v]:.4f}" for v in TABLE1_VARIANTS)
              + f"; {elapsed:.0f}s (<900s)")
    criterion("variant trend (medians over 5 seeds)", ok, detail)


def test_table2_tau_trend(teachers, table1, tmp_path_factory):
    base = tmp_path_factory.mktemp("table2")
    _, _, table1_acc = table1
    acc = {}
    for tau in TABLE2_TAUS:
        if tau == 0.93:
            acc[tau] = table1_acc["primary_binary"]  # same config as the default
            continue
        acc[tau] = []
        for seed in SEEDS:
            cfg = _cfg(seed, tau=tau)
            _, records = train.distill(cfg, teachers[seed],
                                       str(base / f"tau{tau}_{seed}"))
            acc[tau].append(records[-1]["accuracy"])
    medians = {tau: float(np.median(acc[tau])) for tau in TABLE2_TAUS}
    best_tau = max(medians, key=lambda t: (medians[t], -t))
    ok = any(medians[tau] >= medians[1.0] + 0.003 for tau in TABLE2_TAUS
             if tau < 1.0)
    detail = (", ".join(f"tau={t}: {medians[t]:.4f}" for t in TABLE2_TAUS)
              + f"; argmax tau={best_tau} (reported, not asserted)")
    criterion("tau sweep trend (medians over 5 seeds)", ok, detail)


# --- determinism and IDX -----------------------------------------------------

def test_determinism_byte_identical(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg = ExperimentConfig()
    cfg.dataset.num_classes = 8
    cfg.dataset.feature_dim = 8
    cfg.dataset.samples_per_class = 16
    cfg.dataset.eval_classes = 4
    cfg.dataset.eval_samples_per_class = 8
    cfg.teacher = MLPSpec(input_dim=8, hidden_dims=[16], embedding_dim=8)
    cfg.student = MLPSpec(input_dim=8, hidden_dims=[8], embedding_dim=8)
    cfg.epochs = 2
    cfg.num_eval_pairs = 40
    cfg_path.write_text(json.dumps(cfg.to_dict()))

    blobs = {}
    for what in ("teacher", "student"):
        blobs[what] = []
    for run in ("a", "b"):
        tdir = str(tmp_path / f"t{run}")
        assert cli.main(["train-teacher", "--config", str(cfg_path),
                         "--out", tdir, "--no-figures"]) == 0
        sdir = str(tmp_path / f"s{run}")
        assert cli.main(["distill", "--config", str(cfg_path), "--out", sdir,
                         "--teacher", os.path.join(tdir, "teacher.ckpt"),
                         "--no-figures"]) == 0
        blobs["teacher"].append(
            open(os.path.join(tdir, "teacher_metrics.jsonl"), "rb").read())
        blobs["student"].append(
            open(os.path.join(sdir, "metrics.jsonl"), "rb").read())
    ok = (blobs["teacher"][0] == blobs["teacher"][1]
          and blobs["student"][0] == blobs["student"][1])
    criterion("determinism", ok,
              "train-teacher and distill metrics byte-identical across reruns")


def test_idx_round_trip_and_boundaries(tmp_path):
    rng = np.random.default_rng(5)
    images = rng.integers(0, 256, size=(20, 3, 4)).astype(np.uint8)
    images[0, 0, 0] = 0
    images[0, 0, 1] = 255
    labels = rng.integers(0, 6, size=20).astype(np.uint8)
    ip, lp = tmp_path / "i.idx", tmp_path / "l.idx"
    write_idx(images, labels, ip, lp)
    feats, labs = load_idx(ip, lp)
    back = (feats * 128.0 + 127.5).round().astype(np.uint8).reshape(images.shape)
    ok = (np.array_equal(back, images) and np.array_equal(labs, labels)
          and feats[0, 0] == -0.99609375 and feats[0, 1] == 0.99609375)
    criterion("IDX round trip + boundary pixels", ok,
              f"low={feats[0, 0]}, high={feats[0, 1]} (exact)")
