"""Run-report figures rendered next to the metrics CSV.

Three PNGs per run: loss curves, accuracy curves, and (for expanded
networks) the decay factor trajectory of each expanded layer.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def _series(rows: list[dict], phase: str, key: str) -> tuple[list[int], list[float]]:
    xs, ys = [], []
    for row in rows:
        if row["phase"] == phase and row.get(key) is not None:
            xs.append(row["epoch"])
            ys.append(row[key])
    return xs, ys


def render_figures(rows: list[dict], expanded_ids: tuple[str, ...], out_dir) -> list[Path]:
    """Write loss.png, accuracy.png, and decay.png (if applicable) to out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    fig, ax = plt.subplots(figsize=(6, 4))
    for phase in ("train", "val"):
        xs, ys = _series(rows, phase, "loss")
        ax.plot(xs, ys, label=phase)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    path = out_dir / "loss.png"
    fig.savefig(path)
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(6, 4))
    for phase in ("train", "val"):
        xs, ys = _series(rows, phase, "top1")
        ax.plot(xs, ys, label=f"{phase} top-1")
        xs5, ys5 = _series(rows, phase, "top5")
        if ys5:
            ax.plot(xs5, ys5, label=f"{phase} top-5", linestyle="--")
    ax.set_xlabel("epoch")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0.0, 1.0)
    ax.legend()
    fig.tight_layout()
    path = out_dir / "accuracy.png"
    fig.savefig(path)
    plt.close(fig)
    written.append(path)

    if expanded_ids:
        fig, ax = plt.subplots(figsize=(6, 4))
        for lid in expanded_ids:
            xs, ys = _series(rows, "train", f"f.{lid}")
            ax.plot(xs, ys, label=f"f {lid}")
        ax.set_xlabel("epoch")
        ax.set_ylabel("decay factor f")
        ax.set_ylim(-0.05, 1.05)
        ax.legend()
        fig.tight_layout()
        path = out_dir / "decay.png"
        fig.savefig(path)
        plt.close(fig)
        written.append(path)

    return written
