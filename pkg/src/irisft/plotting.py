"""Loss-curve and precision-recall figures (file emission only).

Reads the CSVs written by training and evaluation and overlays them into
single labeled figures.  Uses the Agg backend; nothing opens a window.
"""

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .errors import IoFailure, MalformedCsv


def _read_csv(path, expected_header):
    try:
        with open(path) as fh:
            lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    except OSError as exc:
        raise MalformedCsv(f"cannot read {path}: {exc}") from exc
    if not lines:
        raise MalformedCsv(f"{path}: empty file")
    header = [c.strip() for c in lines[0].split(",")]
    if header[:len(expected_header)] != list(expected_header):
        raise MalformedCsv(
            f"{path}: expected header starting {','.join(expected_header)}, "
            f"got {lines[0]!r}")
    rows = []
    for ln, line in enumerate(lines[1:], start=2):
        cells = line.split(",")
        if len(cells) < len(expected_header):
            raise MalformedCsv(f"{path}:{ln}: too few columns")
        try:
            rows.append([float(c) for c in cells[:len(expected_header)]])
        except ValueError as exc:
            raise MalformedCsv(f"{path}:{ln}: non-numeric cell: {exc}") from exc
    if not rows:
        raise MalformedCsv(f"{path}: no data rows")
    return rows


def read_loss_csv(path):
    """Parse a train-log CSV into (epochs, losses)."""
    rows = _read_csv(path, ("epoch", "mean_loss"))
    return [r[0] for r in rows], [r[1] for r in rows]


def read_pr_csv(path):
    """Parse a PR CSV into (thresholds, precisions, recalls)."""
    rows = _read_csv(path, ("threshold", "precision", "recall"))
    return ([r[0] for r in rows], [r[1] for r in rows], [r[2] for r in rows])


def _default_label(path):
    stem = os.path.splitext(os.path.basename(path))[0]
    if stem in ("train_log", "pr", "pr_curve", "eval_pr"):
        parent = os.path.basename(os.path.dirname(os.path.abspath(path)))
        return parent or stem
    return stem


def _resolve_labels(paths, labels):
    if labels is None:
        return [_default_label(p) for p in paths]
    if len(labels) != len(paths):
        raise ValueError(
            f"{len(labels)} labels for {len(paths)} input files")
    return list(labels)


def plot_loss_curves(csv_paths, out_path, labels=None) -> str:
    """Overlay per-epoch training-loss series into one PNG."""
    if not csv_paths:
        raise ValueError("need at least one loss CSV")
    labels = _resolve_labels(csv_paths, labels)
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for path, label in zip(csv_paths, labels):
        epochs, losses = read_loss_csv(path)
        ax.plot(epochs, losses, label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean training loss")
    ax.set_title("Training loss")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    try:
        fig.savefig(out_path, dpi=120)
    except OSError as exc:
        raise IoFailure(f"cannot write figure {out_path}: {exc}") from exc
    finally:
        plt.close(fig)
    return str(out_path)


def plot_pr_curves(csv_paths, out_path, labels=None) -> str:
    """Overlay precision-recall curves into one PNG."""
    if not csv_paths:
        raise ValueError("need at least one PR CSV")
    labels = _resolve_labels(csv_paths, labels)
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for path, label in zip(csv_paths, labels):
        _, precisions, recalls = read_pr_csv(path)
        ax.plot(recalls, precisions, marker="o", markersize=3, label=label)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_title("Precision-recall (pooled pixels)")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    try:
        fig.savefig(out_path, dpi=120)
    except OSError as exc:
        raise IoFailure(f"cannot write figure {out_path}: {exc}") from exc
    finally:
        plt.close(fig)
    return str(out_path)
