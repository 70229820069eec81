"""Matplotlib figures written next to the JSON reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_metrics(metrics: dict, path) -> Path:
    """PSNR per sample, grouped by view coordinate."""
    fig, ax = plt.subplots(figsize=(6, 3.2))
    by_u: dict[float, list] = {}
    for s in metrics["samples"]:
        by_u.setdefault(s["u"], []).append((s["t"], s["psnr"]))
    for u, pts in sorted(by_u.items()):
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], "o-", label=f"u = {u:+.2f}")
    agg = metrics["aggregate"]
    if agg.get("psnr_mean") is not None:
        ax.axhline(agg["psnr_mean"], color="gray", ls="--", lw=1)
    ax.set_xlabel("t")
    ax.set_ylabel("PSNR (dB)")
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_ablation(report: dict, path) -> Path:
    rows = sorted(report["results"], key=lambda r: -r["psnr_mean"])
    fig, ax = plt.subplots(figsize=(6, 0.5 + 0.45 * len(rows)))
    names = [r["name"] for r in rows]
    vals = [r["psnr_mean"] for r in rows]
    colors = ["tab:blue" if r["name"] == report["baseline"] else "tab:gray" for r in rows]
    ax.barh(names[::-1], vals[::-1], color=colors[::-1])
    for y, v in enumerate(vals[::-1]):
        ax.text(v, y, f" {v:.2f}", va="center", fontsize=8)
    lo = min(vals) - 2.0
    ax.set_xlim(lo, max(vals) + 1.5)
    ax.set_xlabel("mean PSNR (dB)")
    ax.set_title(f"{report['kind']} ablation on {report.get('scene')}", fontsize=9)
    return _save(fig, path)


def plot_flow_tracking(tracking: dict[str, dict], path) -> Path:
    """Mean encoded flow magnitude per frame for each config, over the guidance curve."""
    fig, ax = plt.subplots(figsize=(6, 3.2))
    guide = None
    for name, tr in tracking.items():
        ax.plot(tr["frames"], tr["encoded"], "o-", label=name)
        guide = tr
    if guide is not None:
        ax.plot(guide["frames"], guide["guidance"], "k--", lw=2, label="guidance")
    ax.set_xlabel("frame")
    ax.set_ylabel("mean flow to next frame (px)")
    ax.legend(fontsize=8)
    return _save(fig, path)
