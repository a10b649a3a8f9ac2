"""Fine-tuning loop, gamma sweeps and loss-family comparisons.

SGD with momentum, seeded per-epoch reshuffling, seeded per-sample box
perturbation, periodic checkpointing.  Given the same (seed, config,
manifest) the loss sequence and final weights are identical run to run
on the tiny backbone.
"""

import os
import time
from dataclasses import asdict, dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .data import DatasetManifest, LoadedSample, load_sample
from .errors import DivergedLoss, EmptyTrainSplit, IoFailure, IrisFtError
from .geometry import PerturbSpec, perturb_bbox
from .losses import (FocalParams, PixelBatch, TripletSpec, ce_loss, dice_loss,
                     focal_loss, triplet_loss)
from .model import TinyRefNet, save_checkpoint

LOSS_KINDS = ("focal", "ce", "dice", "triplet")

# keep cached preprocessed samples under ~512 MB
_CACHE_BYTES_LIMIT = 512 * 1024 * 1024


@dataclass
class TrainConfig:
    """Everything a training run depends on, echoed into artifacts."""

    loss: str = "focal"
    alpha: float = 0.25
    gamma: float = 2.0
    triplet_margin: float = 1.0
    triplet_samples: int = 256
    lr: float = 1e-4
    epochs: int = 100
    batch_size: int = 4
    momentum: float = 0.9
    seed: int = 0
    backbone: str = "tiny"
    input_resolution: int = 256
    base_channels: int = 16
    embed_dim: int = 8
    perturb: bool = True
    max_shift: int = 10
    max_scale: int = 10
    checkpoint_interval: int = 0  # epochs between mid-run saves; 0 = end only
    foundation_checkpoint: str = ""
    foundation_model_type: str = "vit_h"

    def validate(self) -> None:
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.seed < 0:
            raise ValueError(f"seed must be >= 0, got {self.seed}")
        if self.backbone not in ("tiny", "foundation"):
            raise ValueError(f"backbone must be tiny or foundation, "
                             f"got {self.backbone!r}")
        FocalParams(self.alpha, self.gamma)  # bounds check


@dataclass
class TrainLog:
    """Per-epoch mean loss and wall seconds, plus the run's provenance."""

    mean_losses: List[float] = field(default_factory=list)
    seconds: List[float] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    checkpoint_path: str = ""

    def to_csv(self, path) -> str:
        lines = ["epoch,mean_loss,seconds"]
        for i, (loss, sec) in enumerate(zip(self.mean_losses, self.seconds)):
            lines.append(f"{i + 1},{loss!r},{sec:.3f}")
        try:
            with open(path, "w", newline="\n") as fh:
                fh.write("\n".join(lines) + "\n")
        except OSError as exc:
            raise IoFailure(f"cannot write train log {path}: {exc}") from exc
        return str(path)


def build_model(config: TrainConfig):
    """Construct the backbone selected by the config."""
    if config.backbone == "tiny":
        return TinyRefNet(input_resolution=config.input_resolution,
                          image_channels=1,
                          base_channels=config.base_channels,
                          embed_dim=config.embed_dim,
                          seed=config.seed)
    from .foundation import FoundationAdapter
    return FoundationAdapter(config.foundation_checkpoint,
                             model_type=config.foundation_model_type)


class _SampleStore:
    """Loads samples by record index, caching when they fit in memory."""

    def __init__(self, records, resolution: int, channels: int):
        self.records = records
        self.resolution = resolution
        self.channels = channels
        per_sample = resolution * resolution * (channels + 1) * 4
        self._cache: Optional[dict] = (
            {} if per_sample * len(records) <= _CACHE_BYTES_LIMIT else None)

    def get(self, idx: int) -> LoadedSample:
        if self._cache is not None and idx in self._cache:
            return self._cache[idx]
        sample = load_sample(self.records[idx], self.resolution, self.channels)
        if self._cache is not None:
            self._cache[idx] = sample
        return sample


def _batch_loss(config: TrainConfig, logits, masks, embeddings, rngs):
    """Loss value and gradients for one batch; returns (val, dlogits, demb)."""
    if config.loss == "triplet":
        spec = TripletSpec(margin=config.triplet_margin,
                           samples_per_image=config.triplet_samples,
                           seed=config.seed)
        vals = []
        demb = np.zeros(embeddings.shape, dtype=np.float64)
        for i in range(logits.shape[0]):
            v, g = triplet_loss(embeddings[i], masks[i], spec, rng=rngs[i])
            vals.append(v)
            demb[i] = g / logits.shape[0]
        return float(np.mean(vals)), np.zeros_like(logits), demb
    batch = PixelBatch(logits, np.stack(masks))
    if config.loss == "focal":
        val, grad = focal_loss(batch, FocalParams(config.alpha, config.gamma))
    elif config.loss == "ce":
        val, grad = ce_loss(batch)
    else:
        val, grad = dice_loss(batch)
    return val, grad, None


def train(manifest: DatasetManifest, config: TrainConfig, out_dir,
          ) -> Tuple[str, TrainLog]:
    """Fine-tune on the manifest's train split.

    Per epoch the records are reshuffled with rng(seed + epoch); each
    sample's prompt box is independently perturbed with
    rng([seed, epoch, sample_index]) when perturbation is on.  Writes
    ``checkpoint_final.npz`` (+ JSON sidecar) and ``train_log.csv`` under
    out_dir, plus ``checkpoint_epoch****.npz`` at the configured interval.

    Returns:
        (checkpoint_path, TrainLog)

    Raises:
        EmptyTrainSplit: nothing to train on.
        DivergedLoss: a non-finite loss value, with the offending samples.
    """
    config.validate()
    records = manifest.split("train")
    if not records:
        raise EmptyTrainSplit(f"manifest {manifest.name!r} has no train records")
    os.makedirs(out_dir, exist_ok=True)
    model = build_model(config)
    resolution = model.input_resolution
    store = _SampleStore(records, resolution, model.image_channels)
    perturb_spec = PerturbSpec(config.max_shift, config.max_scale, config.seed)
    want_emb = config.loss == "triplet"
    log = TrainLog(config=asdict(config))
    extra_base = {"seed": config.seed,
                  "train_config": asdict(config),
                  "manifest_name": manifest.name,
                  "manifest_sha256": manifest.content_digest()}
    checkpoint_path = ""
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = np.random.default_rng(config.seed + epoch).permutation(
            len(records))
        loss_sum = 0.0
        n_seen = 0
        for start in range(0, len(order), config.batch_size):
            idxs = order[start:start + config.batch_size]
            images, masks, boxes, rngs = [], [], [], []
            for idx in idxs:
                sample = store.get(int(idx))
                box = sample.box
                rng = np.random.default_rng(
                    [config.seed, epoch, int(idx)])
                if config.perturb:
                    box = perturb_bbox(box, perturb_spec,
                                       (resolution, resolution), rng)
                images.append(sample.image)
                masks.append(sample.mask)
                boxes.append(box)
                rngs.append(rng)
            out = model.forward_train(np.stack(images), boxes,
                                      want_embeddings=want_emb)
            logits, embeddings = out if want_emb else (out, None)
            val, dlogits, demb = _batch_loss(config, logits, masks,
                                             embeddings, rngs)
            if not np.isfinite(val):
                bad = ", ".join(records[int(i)].image_path for i in idxs)
                raise DivergedLoss(
                    f"non-finite loss {val} at epoch {epoch + 1} on: {bad}")
            model.backward(dlogits, demb)
            model.sgd_step(config.lr, config.momentum)
            loss_sum += val * len(idxs)
            n_seen += len(idxs)
        log.mean_losses.append(loss_sum / n_seen)
        log.seconds.append(time.perf_counter() - t0)
        if (config.checkpoint_interval > 0
                and (epoch + 1) % config.checkpoint_interval == 0
                and epoch + 1 < config.epochs):
            save_checkpoint(model,
                            os.path.join(out_dir,
                                         f"checkpoint_epoch{epoch + 1:04d}.npz"),
                            {**extra_base, "epoch": epoch + 1})
    checkpoint_path = save_checkpoint(
        model, os.path.join(out_dir, "checkpoint_final.npz"),
        {**extra_base, "epoch": config.epochs})
    log.checkpoint_path = checkpoint_path
    log.to_csv(os.path.join(out_dir, "train_log.csv"))
    return checkpoint_path, log


def _run_arms(manifest, base_config, out_dir, arms, eval_prompt_mode,
              eval_threshold):
    """Shared train+eval driver for sweeps; one subdirectory per arm."""
    from .evaluate import evaluate
    results = []
    for arm_name, config in arms:
        arm_dir = os.path.join(out_dir, arm_name)
        try:
            ckpt, tlog = train(manifest, config, arm_dir)
            from .model import load_checkpoint
            model, _ = load_checkpoint(ckpt)
            report = evaluate(model, manifest, prompt_mode=eval_prompt_mode,
                              threshold=eval_threshold,
                              checkpoint_id=os.path.basename(ckpt))
            report.save(os.path.join(arm_dir, "eval_report.json"))
            results.append({"arm": arm_name, "config": config,
                            "train_log": tlog, "report": report,
                            "error": None})
        except IrisFtError as exc:
            results.append({"arm": arm_name, "config": config,
                            "train_log": None, "report": None,
                            "error": f"{type(exc).__name__}: {exc}"})
    return results


def _write_comparison_csv(path, key_name, rows):
    lines = [f"{key_name},final_train_loss,mean_iou,std_iou,error"]
    for row in rows:
        if row["error"] is None:
            final = row["train_log"].mean_losses[-1]
            rep = row["report"]
            lines.append(f"{row['key']},{final!r},{rep.mean_iou!r},"
                         f"{rep.std_iou!r},")
        else:
            lines.append(f"{row['key']},,,," + row["error"].replace(",", ";"))
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def sweep_gamma(manifest: DatasetManifest, base_config: TrainConfig,
                gammas: Sequence[float], out_dir,
                eval_prompt_mode: str = "two-pass",
                eval_threshold: float = 0.5) -> List[dict]:
    """Train and evaluate one arm per focusing exponent.

    All arms share seeds and every other config field.  Failures in one
    arm are recorded and the remaining arms still run.  Writes
    ``sweep_gamma.csv`` (gamma, final_train_loss, mean_iou, std_iou) and
    per-arm artifacts under out_dir.
    """
    if not gammas:
        raise ValueError("gammas must be non-empty")
    os.makedirs(out_dir, exist_ok=True)
    arms = [(f"gamma_{g:g}", replace(base_config, gamma=float(g)))
            for g in gammas]
    results = _run_arms(manifest, base_config, out_dir, arms,
                        eval_prompt_mode, eval_threshold)
    for res, g in zip(results, gammas):
        res["gamma"] = float(g)
        res["key"] = f"{g:g}"
    _write_comparison_csv(os.path.join(out_dir, "sweep_gamma.csv"),
                          "gamma", results)
    return results


def compare_losses(manifest: DatasetManifest, base_config: TrainConfig,
                   losses: Sequence[str], out_dir,
                   eval_prompt_mode: str = "two-pass",
                   eval_threshold: float = 0.5) -> List[dict]:
    """Train and evaluate one arm per loss kind, equal seeds and epochs.

    Each arm's loss curve lands in ``<arm>/train_log.csv`` so the curves
    can be overlaid by the plot subcommand.  Writes ``compare_losses.csv``.
    """
    if not losses:
        raise ValueError("losses must be non-empty")
    for kind in losses:
        if kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss {kind!r}; choices: {LOSS_KINDS}")
    os.makedirs(out_dir, exist_ok=True)
    arms = [(f"loss_{kind}", replace(base_config, loss=kind))
            for kind in losses]
    results = _run_arms(manifest, base_config, out_dir, arms,
                        eval_prompt_mode, eval_threshold)
    for res, kind in zip(results, losses):
        res["loss"] = kind
        res["key"] = kind
    _write_comparison_csv(os.path.join(out_dir, "compare_losses.csv"),
                          "loss", results)
    return results
