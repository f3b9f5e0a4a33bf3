"""Figure rendering for the report paths.

Every function writes a PNG next to the delimited output it illustrates;
the CSV/JSONL files remain the canonical record.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt


def plot_training_curves(records, path):
    """Loss terms and verification accuracy over epochs."""
    epochs = [r["epoch"] for r in records]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    ax1.plot(epochs, [r["loss_cls"] for r in records], label="classification")
    if any(r["loss_kd"] for r in records):
        ax1.plot(epochs, [r["loss_kd"] for r in records], label="distillation")
        ax1.plot(epochs, [r["full_kd"] for r in records],
                 label="full KL", linestyle="--", alpha=0.7)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.legend()
    ax2.plot(epochs, [r["accuracy"] for r in records], color="tab:green")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("verification accuracy")
    ax2.set_ylim(0.4, 1.02)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_sweep(rows, path):
    """Final verification accuracy across sweep points."""
    labels = [str(r["value"]) for r in rows]
    accs = [r["accuracy"] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(range(len(rows)), accs, color="tab:blue")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, rotation=30)
    ax.set_xlabel(rows[0]["sweep"])
    ax.set_ylabel("verification accuracy")
    lo, hi = min(accs), max(accs)
    pad = max(1e-3, (hi - lo) * 0.5)
    ax.set_ylim(max(0.0, lo - pad), min(1.0, hi + pad))
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_rank_distribution(rows, summary, path, max_rank=64):
    """Ranked teacher/student probabilities with the group boundary marked."""
    by_sample = {}
    for sid, rank_i, _, p_t, p_s, in_phi in rows:
        by_sample.setdefault(sid, []).append((rank_i, p_t, p_s, in_phi))
    ks = {s["sample_id"]: s["k"] for s in summary}

    n = len(by_sample)
    fig, axes = plt.subplots(n, 1, figsize=(7, 2.5 * n), squeeze=False)
    for ax, (sid, entries) in zip(axes[:, 0], sorted(by_sample.items())):
        entries.sort()
        entries = entries[:max_rank]
        ranks = [e[0] for e in entries]
        ax.bar(ranks, [e[2] for e in entries], alpha=0.6, label="student")
        ax.plot(ranks, [e[1] for e in entries], "k.", markersize=4, label="teacher")
        ax.axvline(ks[sid] - 0.5, color="tab:red", linestyle="--",
                   label=f"k = {ks[sid]}")
        ax.set_yscale("log")
        ax.set_ylabel(f"sample {sid}")
        ax.legend(fontsize=8)
    axes[-1, 0].set_xlabel("rank (student order)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
