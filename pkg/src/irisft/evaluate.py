"""IoU statistics, PR curves, cross-dataset matrices and overlay rendering.

Reports are plain JSON with deterministic key order and float repr, so a
re-run with the same checkpoint and manifest reproduces the bytes exactly.
Per-sample integrity failures are quarantined (counted, skipped), never
fatal to the whole run.
"""

import json
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .data import DatasetManifest, load_sample
from .errors import IoFailure, IrisFtError, ShapeMismatch
from .geometry import binarize, read_mask
from .losses import sigmoid
from .model import infer_box, load_checkpoint, predict_mask

PR_THRESHOLDS = tuple(round(0.05 * k, 2) for k in range(1, 20))


@dataclass(frozen=True)
class BaselineRow:
    method: str
    dataset: str
    mean_iou_percent: float
    std_iou_percent: float


# Published reference numbers for ND-Iris-0405, kept verbatim for report
# comparison; never recomputed by this toolkit.
BASELINES: Tuple[BaselineRow, ...] = (
    BaselineRow("OSIRIS", "ND-Iris-0405", 86.28, 6.50),
    BaselineRow("DRN", "ND-Iris-0405", 89.61, 5.08),
    BaselineRow("Context-100k", "ND-Iris-0405", 89.45, 3.85),
    BaselineRow("SegNet", "ND-Iris-0405", 89.75, 4.95),
)


def iou(predicted: np.ndarray, truth: np.ndarray) -> float:
    """Intersection-over-union of two boolean masks.

    Both-empty is defined as 1.0 (perfect agreement on absence); exactly
    one empty yields 0.0.

    Raises:
        ShapeMismatch: shapes differ.
    """
    p = np.asarray(predicted, dtype=bool)
    t = np.asarray(truth, dtype=bool)
    if p.shape != t.shape:
        raise ShapeMismatch(f"masks {p.shape} vs {t.shape}")
    union = int(np.logical_or(p, t).sum())
    if union == 0:
        return 1.0
    return float(int(np.logical_and(p, t).sum()) / union)


@dataclass
class EvalReport:
    """Per-image IoUs, their aggregates, and the pooled PR curve."""

    dataset_name: str
    checkpoint_id: str
    prompt_strategy: str
    per_image: List[Tuple[str, float]] = field(default_factory=list)
    mean_iou: float = 0.0
    std_iou: float = 0.0
    mean_iou_percent: float = 0.0
    std_iou_percent: float = 0.0
    precision_recall: List[Tuple[float, float, float]] = field(
        default_factory=list)
    quarantined: int = 0

    def finalize(self) -> "EvalReport":
        """Recompute aggregates from per_image (population std)."""
        vals = np.array([v for _, v in self.per_image], dtype=np.float64)
        self.mean_iou = float(vals.mean()) if vals.size else 0.0
        self.std_iou = float(vals.std()) if vals.size else 0.0
        self.mean_iou_percent = 100.0 * self.mean_iou
        self.std_iou_percent = 100.0 * self.std_iou
        return self

    def to_json(self) -> str:
        payload = {
            "dataset_name": self.dataset_name,
            "checkpoint_id": self.checkpoint_id,
            "prompt_strategy": self.prompt_strategy,
            "per_image": [[sid, val] for sid, val in self.per_image],
            "mean_iou": self.mean_iou,
            "std_iou": self.std_iou,
            "mean_iou_percent": self.mean_iou_percent,
            "std_iou_percent": self.std_iou_percent,
            "precision_recall": [[t, p, r] for t, p, r in
                                 self.precision_recall],
            "quarantined": self.quarantined,
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    def save(self, path) -> str:
        try:
            with open(path, "w", newline="\n") as fh:
                fh.write(self.to_json())
        except OSError as exc:
            raise IoFailure(f"cannot write report {path}: {exc}") from exc
        return str(path)

    @classmethod
    def load(cls, path) -> "EvalReport":
        with open(path) as fh:
            raw = json.load(fh)
        return cls(
            dataset_name=raw["dataset_name"],
            checkpoint_id=raw["checkpoint_id"],
            prompt_strategy=raw["prompt_strategy"],
            per_image=[(sid, float(v)) for sid, v in raw["per_image"]],
            mean_iou=raw["mean_iou"],
            std_iou=raw["std_iou"],
            mean_iou_percent=raw["mean_iou_percent"],
            std_iou_percent=raw["std_iou_percent"],
            precision_recall=[(float(t), float(p), float(r))
                              for t, p, r in raw["precision_recall"]],
            quarantined=int(raw["quarantined"]),
        )

    def pr_to_csv(self, path) -> str:
        lines = ["threshold,precision,recall"]
        for t, p, r in self.precision_recall:
            lines.append(f"{t!r},{p!r},{r!r}")
        try:
            with open(path, "w", newline="\n") as fh:
                fh.write("\n".join(lines) + "\n")
        except OSError as exc:
            raise IoFailure(f"cannot write PR csv {path}: {exc}") from exc
        return str(path)


def evaluate(model, manifest: DatasetManifest, split: str = "test",
             prompt_mode: str = "two-pass", threshold: float = 0.5,
             native_resolution: bool = False,
             checkpoint_id: str = "") -> EvalReport:
    """Score a model over one split of a manifest.

    Per image: preprocess, infer the prompt box per strategy, predict,
    binarize at ``threshold``, IoU against the resized ground truth (or at
    native resolution via the recorded transform when
    ``native_resolution`` is set; the PR curve always pools pixels at
    model resolution).  Boxes are never perturbed here.

    Samples that fail integrity checks are quarantined and counted.
    """
    records = manifest.split(split)
    if not records:
        raise ValueError(f"manifest {manifest.name!r} has no {split} records")
    resolution = model.input_resolution
    report = EvalReport(dataset_name=manifest.name,
                        checkpoint_id=checkpoint_id,
                        prompt_strategy=prompt_mode)
    thresholds = np.array(PR_THRESHOLDS, dtype=np.float64)
    tp = np.zeros(len(thresholds), dtype=np.int64)
    fp = np.zeros(len(thresholds), dtype=np.int64)
    fn = np.zeros(len(thresholds), dtype=np.int64)
    for record in records:
        try:
            sample = load_sample(record, resolution, model.image_channels)
            box = infer_box(model, sample.image, prompt_mode,
                            mask=sample.mask, threshold=threshold)
            logits = predict_mask(model, sample.image, box)
            pred = binarize(logits, threshold)
            if native_resolution:
                native_truth = read_mask(record.mask_path)
                value = iou(sample.transform.mask_to_src(pred), native_truth)
            else:
                value = iou(pred, sample.mask)
        except IrisFtError:
            report.quarantined += 1
            continue
        probs = sigmoid(np.asarray(logits, dtype=np.float64)).ravel()
        truth = sample.mask.ravel()
        hits = probs[None, :] >= thresholds[:, None]
        tp += (hits & truth).sum(axis=1)
        fp += (hits & ~truth).sum(axis=1)
        fn += (~hits & truth).sum(axis=1)
        report.per_image.append((os.path.basename(record.image_path),
                                 float(value)))
    if not report.per_image:
        raise IrisFtError(
            f"every sample of {manifest.name!r}/{split} was quarantined")
    denom_p = tp + fp
    denom_r = tp + fn
    for k, t in enumerate(PR_THRESHOLDS):
        precision = 1.0 if denom_p[k] == 0 else float(tp[k] / denom_p[k])
        recall = 1.0 if denom_r[k] == 0 else float(tp[k] / denom_r[k])
        report.precision_recall.append((float(t), precision, recall))
    return report.finalize()


def cross_evaluate(checkpoints: Dict[str, str],
                   manifests: Dict[str, DatasetManifest],
                   out_dir=None, prompt_mode: str = "two-pass",
                   threshold: float = 0.5) -> List[dict]:
    """Evaluate every dataset's checkpoint on every other dataset.

    Produces one cell per ordered (train, test) pair with train != test,
    so N datasets give N*(N-1) cells.  Cell failures are recorded and the
    remaining cells still run.  When out_dir is given, writes per-cell
    reports plus ``cross_eval.csv`` (train, test, mean_iou, std_iou).
    """
    names = sorted(manifests)
    if len(names) < 2:
        raise ValueError("cross-evaluation needs at least two datasets")
    missing = [n for n in names if n not in checkpoints]
    if missing:
        raise ValueError(f"no checkpoint for datasets: {missing}")
    cells = []
    models = {}
    for train_name in names:
        try:
            models[train_name], _ = load_checkpoint(checkpoints[train_name])
        except IrisFtError as exc:
            models[train_name] = f"{type(exc).__name__}: {exc}"
    for train_name in names:
        for test_name in names:
            if train_name == test_name:
                continue
            model = models[train_name]
            if isinstance(model, str):
                cells.append({"train": train_name, "test": test_name,
                              "report": None, "error": model})
                continue
            try:
                report = evaluate(
                    model, manifests[test_name], prompt_mode=prompt_mode,
                    threshold=threshold,
                    checkpoint_id=os.path.basename(checkpoints[train_name]))
                cells.append({"train": train_name, "test": test_name,
                              "report": report, "error": None})
            except IrisFtError as exc:
                cells.append({"train": train_name, "test": test_name,
                              "report": None,
                              "error": f"{type(exc).__name__}: {exc}"})
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        lines = ["train,test,mean_iou,std_iou"]
        errors = []
        for cell in cells:
            if cell["error"] is None:
                rep = cell["report"]
                rep.save(os.path.join(
                    out_dir, f"{cell['train']}_on_{cell['test']}.json"))
                lines.append(f"{cell['train']},{cell['test']},"
                             f"{rep.mean_iou!r},{rep.std_iou!r}")
            else:
                lines.append(f"{cell['train']},{cell['test']},,")
                errors.append(f"{cell['train']} on {cell['test']}: "
                              f"{cell['error']}")
        try:
            with open(os.path.join(out_dir, "cross_eval.csv"), "w",
                      newline="\n") as fh:
                fh.write("\n".join(lines) + "\n")
            if errors:
                with open(os.path.join(out_dir, "cross_eval_errors.txt"),
                          "w", newline="\n") as fh:
                    fh.write("\n".join(errors) + "\n")
        except OSError as exc:
            raise IoFailure(f"cannot write cross-eval outputs: {exc}") from exc
    return cells


# ---------------------------------------------------------------------------
# overlays

_GUTTER = 2


def _render_overlay(gray: np.ndarray, truth: np.ndarray, pred: np.ndarray,
                    box) -> np.ndarray:
    """Three panels: input | ground truth | prediction (box + blue tint).

    The tint is painted after the box outline, so the set of tinted pixels
    (blue channel > red channel) equals the predicted mask exactly.
    """
    s = gray.shape[0]
    p1 = np.stack([gray] * 3, axis=-1)
    p2 = np.stack([np.where(truth, 255, 0).astype(np.uint8)] * 3, axis=-1)
    p3 = np.stack([gray] * 3, axis=-1)
    green = np.array([0, 255, 0], dtype=np.uint8)
    p3[box.y_min, box.x_min:box.x_max + 1] = green
    p3[box.y_max, box.x_min:box.x_max + 1] = green
    p3[box.y_min:box.y_max + 1, box.x_min] = green
    p3[box.y_min:box.y_max + 1, box.x_max] = green
    half = gray // 2
    p3[pred, 0] = half[pred]
    p3[pred, 1] = half[pred]
    p3[pred, 2] = 128 + half[pred]
    gutter = np.full((s, _GUTTER, 3), 255, dtype=np.uint8)
    return np.concatenate([p1, gutter, p2, gutter, p3], axis=1)


def emit_overlays(model, manifest: DatasetManifest, out_dir, count: int,
                  seed: int = 0, prompt_mode: str = "two-pass",
                  threshold: float = 0.5, split: str = "test") -> List[str]:
    """Write qualitative side-by-side PNGs for seeded sample picks.

    Returns the list of written paths (count files, or fewer if the split
    is smaller).
    """
    if count < 0:
        raise ValueError(f"count must be >= 0, got {count}")
    if count == 0:
        return []
    records = manifest.split(split)
    if not records:
        raise ValueError(f"manifest {manifest.name!r} has no {split} records")
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    take = min(count, len(records))
    picks = rng.choice(len(records), size=take, replace=False)
    written = []
    for idx in picks:
        record = records[int(idx)]
        sample = load_sample(record, model.input_resolution,
                             model.image_channels)
        box = infer_box(model, sample.image, prompt_mode,
                        mask=sample.mask, threshold=threshold)
        logits = predict_mask(model, sample.image, box)
        pred = binarize(logits, threshold)
        gray = (sample.image[0] * 255.0).round().astype(np.uint8)
        panel = _render_overlay(gray, sample.mask, pred, box)
        stem = os.path.splitext(os.path.basename(record.image_path))[0]
        path = os.path.join(out_dir, f"overlay_{stem}.png")
        try:
            Image.fromarray(panel, mode="RGB").save(path, format="PNG")
        except OSError as exc:
            raise IoFailure(f"cannot write overlay {path}: {exc}") from exc
        written.append(path)
    return written
