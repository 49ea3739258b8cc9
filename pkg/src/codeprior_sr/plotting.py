"""Static figures rendered from the CSV reports."""

from __future__ import annotations

from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .codebook import BenchRow, HitRateReport  # noqa: E402


def plot_bench(rows: list[BenchRow], path) -> None:
    """Median matching time against codebook size on log-log axes, one line per matcher."""
    by = defaultdict(list)
    for r in rows:
        by[r.matcher].append(r)
    fig, ax = plt.subplots(figsize=(5, 4))
    for name, rs in sorted(by.items()):
        rs.sort(key=lambda r: r.K)
        label = f"{name} (slope {rs[0].slope:.2f})"
        ax.loglog([r.K for r in rs], [r.median_seconds for r in rs], "o-", base=2, label=label)
    ax.set_xlabel("codebook size K")
    ax.set_ylabel("median time per call (s)")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_hit_rates(reports: list[HitRateReport], path) -> None:
    fig, ax = plt.subplots(figsize=(4, 3.5))
    ks = [str(r.k) for r in reports]
    ax.bar(ks, [100 * r.rate for r in reports], color="tab:blue")
    ax.set_xlabel("k")
    ax.set_ylabel("hit rate (%)")
    ax.set_ylim(0, 100)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
