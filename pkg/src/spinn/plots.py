"""Figure rendering for the report paths: training curves, evaluation
length buckets, and benchmark throughput. Figures are written to files next
to the delimited reports; no interactive backend is required."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt


def training_curves(log_rows, path):
    """Loss and dev accuracy over steps from the training log rows."""
    steps = [row["step"] for row in log_rows]
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9, 3.2))
    ax_loss.plot(steps, [row["train_loss"] for row in log_rows], marker="o",
                 markersize=3, color="tab:blue")
    ax_loss.set_xlabel("step")
    ax_loss.set_ylabel("train loss")
    ax_acc.plot(steps, [row["dev_accuracy"] for row in log_rows], marker="o",
                markersize=3, color="tab:green", label="label accuracy")
    trans = [(s, row["dev_transition_accuracy"]) for s, row in zip(steps, log_rows)
             if row.get("dev_transition_accuracy") is not None]
    if trans:
        ax_acc.plot([t[0] for t in trans], [t[1] for t in trans], marker="s",
                    markersize=3, color="tab:orange", label="transition accuracy")
    ax_acc.set_xlabel("step")
    ax_acc.set_ylabel("dev accuracy")
    ax_acc.set_ylim(0, 1.02)
    ax_acc.legend(fontsize=8)
    for ax in (ax_loss, ax_acc):
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def eval_length_buckets(report, path):
    """Accuracy per premise-length bucket, with counts."""
    names = list(report.length_buckets.keys())
    accs = [report.length_buckets[n][0] for n in names]
    counts = [report.length_buckets[n][1] for n in names]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    bars = ax.bar(names, accs, color="tab:blue")
    for bar, count in zip(bars, counts):
        ax.text(bar.get_x() + bar.get_width() / 2, bar.get_height() + 0.01,
                f"n={count}", ha="center", fontsize=8)
    ax.axhline(report.accuracy, color="tab:gray", linestyle="--",
               label=f"overall {report.accuracy:.3f}")
    ax.set_xlabel("premise length (words)")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1.08)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def bench_throughput(report, path):
    """Sentences/second versus batch size, one line per model."""
    models = []
    for row in report.rows:
        if row["model"] not in models:
            models.append(row["model"])
    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    for model in models:
        pts = [(r["batch_size"], r["sentences_per_sec"])
               for r in report.rows if r["model"] == model]
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o",
                markersize=4, label=model)
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.set_xlabel("batch size")
    ax.set_ylabel("sentences / second")
    ax.grid(alpha=0.3, which="both")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
