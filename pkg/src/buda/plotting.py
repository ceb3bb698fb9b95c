"""Figures written next to the CSV outputs.

Uses the Agg backend so nothing needs a display.  Every function saves to a
path and closes its figure.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
    "savefig.dpi": 120,
}

SERIES = (("shared_mIoU", "shared mIoU", "o-"), ("private_mIoU", "private mIoU", "s-"), ("hIoU", "hIoU", "d-"))


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_sweep(rows: list[dict], param: str, path) -> Path:
    """Seed-mean mIoU curves against the swept value.

    Rows whose value is not numeric (the oracle-label row) are drawn as
    horizontal reference lines.
    """
    numeric = [r for r in rows if isinstance(r["value"], (int, float))]
    refs = [r for r in rows if not isinstance(r["value"], (int, float))]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        xs = [r["value"] for r in numeric]
        for key, label, fmt in SERIES:
            line, = ax.plot(xs, [r[key] for r in numeric], fmt, ms=4, label=label)
            for r in refs:
                ax.axhline(r[key], ls="--", lw=0.8, color=line.get_color())
        if refs:
            ax.plot([], [], "k--", lw=0.8, label=" / ".join(str(r["value"]) for r in refs))
        ax.set_xlabel({"p": "retained pseudo-labels p (%)", "private-count": "private classes"}.get(param, param))
        ax.set_ylabel("target test (%)")
        ax.set_ylim(0, 100)
        ax.legend(loc="best")
        fig.tight_layout()
        return _save(fig, path)


def plot_curves(curve: list[dict], path) -> Path:
    """Training losses: segmenter stages by epoch, generator by iteration."""
    seg = [c for c in curve if c["step"] != "generator"]
    gen = [c for c in curve if c["step"] == "generator"]
    with plt.rc_context(STYLE):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(7.5, 2.8))
        x = 0
        for step in dict.fromkeys(c["step"] for c in seg):
            ys = [c["seg_ce"] for c in seg if c["step"] == step]
            a1.plot(range(x, x + len(ys)), ys, ".-", label=step)
            x += len(ys)
        a1.set_xlabel("epoch (all stages)")
        a1.set_ylabel("cross-entropy per pixel")
        a1.set_yscale("log")
        a1.legend()
        if gen:
            its = [c["iter"] for c in gen]
            for key in ("mmd", "adv", "d_loss"):
                if key in gen[0]:
                    a2.plot(its, [c[key] for c in gen], label=key)
            a2.set_yscale("symlog")
            a2.legend()
        a2.set_xlabel("generator iteration")
        fig.tight_layout()
        return _save(fig, path)
