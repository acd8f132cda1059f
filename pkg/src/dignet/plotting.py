"""Matplotlib figure next to an ablation CSV.  Imported lazily by the CLI."""

from __future__ import annotations

from typing import Sequence

from .ablation import median_by_case


def figure_path(csv_path: str) -> str:
    stem = csv_path[:-4] if csv_path.lower().endswith(".csv") else csv_path
    return stem + ".png"


def plot_ablation(rows: Sequence[dict], axis: str, path: str) -> str:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    med = median_by_case(rows)
    fig, ax = plt.subplots(figsize=(6.4, 4.0), dpi=100)
    if axis in ("routing", "T"):
        variants = list(dict.fromkeys(v for v, _ in med))
        for v in variants:
            pts = sorted((t, 100 * m) for (vv, t), m in med.items() if vv == v)
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=v)
        ax.set_xlabel("unroll iterations T")
        ax.set_xticks(sorted({t for _, t in med}))
        ax.legend(fontsize=8)
    else:
        labels = list(dict.fromkeys(v for v, _ in med))
        vals = [100 * next(m for (vv, _), m in med.items() if vv == v) for v in labels]
        ax.bar(range(len(labels)), vals, color="tab:blue")
        ax.set_xticks(range(len(labels)))
        ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    seeds = sorted({r["seed"] for r in rows})
    ax.set_ylabel("val mIoU (%)")
    ax.set_title(f"{axis} ablation, median over {len(seeds)} seed(s)")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path
