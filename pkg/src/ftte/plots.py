"""Figure rendering for the reporting paths. Headless backend only."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

STRATEGY_COLORS = {
    "ftte": "tab:blue",
    "fedbuff": "tab:orange",
    "async": "tab:green",
    "sync": "tab:red",
}


def _color(strategy: str):
    return STRATEGY_COLORS.get(strategy, "tab:gray")


def convergence_figure(trace, target_accuracy: float, path) -> None:
    evals = [row for row in trace if row.event == "eval"]
    steps = [row.step for row in evals]
    acc = [row.accuracy for row in evals]
    loss = [row.loss for row in evals]
    fig, (ax_acc, ax_loss) = plt.subplots(2, 1, sharex=True, figsize=(7, 6))
    ax_acc.plot(steps, acc, marker="o", ms=3, color="tab:blue")
    ax_acc.axhline(target_accuracy, color="tab:red", ls="--", lw=1, label="target")
    ax_acc.set_ylabel("test accuracy")
    ax_acc.set_ylim(0.0, 1.0)
    ax_acc.legend(loc="lower right")
    ax_loss.plot(steps, loss, marker="o", ms=3, color="tab:orange")
    ax_loss.set_ylabel("test loss")
    ax_loss.set_xlabel("communication steps")
    for ax in (ax_acc, ax_loss):
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def sweep_figure(rows: list[dict], axis: str, path) -> None:
    """One line per strategy: axis value vs sim time to target (reached only)."""
    numeric_axis = axis != "strategy"
    fig, ax = plt.subplots(figsize=(7, 4.5))
    strategies = sorted({row["strategy"] for row in rows})
    for strategy in strategies:
        points: dict = {}
        for row in rows:
            if row["strategy"] != strategy or not row["reached"]:
                continue
            points.setdefault(row["axis_value"], []).append(row["sim_time_s"])
        if not points:
            continue
        keys = sorted(points, key=(float if numeric_axis else str))
        means = [sum(points[k]) / len(points[k]) for k in keys]
        xs = [float(k) for k in keys] if numeric_axis else range(len(keys))
        ax.plot(xs, means, marker="o", label=strategy, color=_color(strategy))
        if not numeric_axis:
            ax.set_xticks(list(xs), [str(k) for k in keys])
    ax.set_xlabel(axis)
    ax.set_ylabel("sim time to target (s)")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def speedup_figure(table_rows, path) -> None:
    """Bar chart of mean steps to target per strategy; unreached bars hatched
    at the step budget they exhausted."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    reference = next((r.mean_steps for r in table_rows if r.strategy == "ftte"), 1.0)
    labels, heights, hatches, colors = [], [], [], []
    for row in table_rows:
        labels.append(f"{row.strategy}\n{row.ratio_display}")
        # unreached rows plot at the budget implied by their lower-bound ratio
        heights.append(row.mean_steps if row.mean_steps is not None else row.ratio * reference)
        hatches.append("" if row.mean_steps is not None else "//")
        colors.append(_color(row.strategy))
    bars = ax.bar(labels, heights, color=colors)
    for bar, hatch in zip(bars, hatches):
        bar.set_hatch(hatch)
    ax.set_ylabel("steps to target (mean)")
    ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def resources_figure(report: dict, path) -> None:
    names = ["selected", "full", "last_layer"]
    fig, (ax_mem, ax_pay) = plt.subplots(1, 2, figsize=(9, 4))
    for ax, table, title in (
        (ax_mem, report["memory_bytes"], "client training memory"),
        (ax_pay, report["payload_bytes"], "update payload"),
    ):
        values = [table[name] for name in names]
        ax.bar(names, values, color=["tab:blue", "tab:gray", "tab:green"])
        ax.set_title(title)
        ax.set_ylabel("bytes")
        ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
