"""Promptable segmentation backbones.

Both backbones share one calling convention: ``encode_image`` standardizes
an image, ``encode_prompt`` turns a box into a prompt raster, and
``decode_mask`` returns a list of logit rasters (exactly one when
``multimask_output`` is False).  ``predict_mask`` is the single-mask
inference path used everywhere in training and evaluation.

The tiny backbone is a hand-rolled numpy encoder/decoder CNN, small
enough to fine-tune on a desktop CPU in minutes.  The foundation-scale
backbone lives in :mod:`irisft.foundation` and loads a Segment Anything
checkpoint behind the same interface.
"""

import json
import os
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .errors import CheckpointError, EmptyMask, ShapeMismatch, UnreadableImage
from .geometry import BoundingBox, binarize, full_box, mask_to_bbox
from .layers import (Conv2d, GroupNorm, LeakyReLU, upsample2x,
                     upsample2x_backward)

PROMPT_STRATEGIES = ("full", "two-pass", "gt")


# ---------------------------------------------------------------------------
# preprocessing

@dataclass(frozen=True)
class ResizeTransform:
    """Maps coordinates between native (src) and model (dst) resolution."""

    src_h: int
    src_w: int
    dst_h: int
    dst_w: int

    @staticmethod
    def _map(x: float, n_from: int, n_to: int) -> int:
        # pixel-center convention; conventional rounding, not banker's
        v = (x + 0.5) * (n_to / n_from) - 0.5
        return int(np.floor(v + 0.5))

    def box_to_src(self, box: BoundingBox) -> BoundingBox:
        x0 = min(max(self._map(box.x_min, self.dst_w, self.src_w), 0), self.src_w - 1)
        x1 = min(max(self._map(box.x_max, self.dst_w, self.src_w), 0), self.src_w - 1)
        y0 = min(max(self._map(box.y_min, self.dst_h, self.src_h), 0), self.src_h - 1)
        y1 = min(max(self._map(box.y_max, self.dst_h, self.src_h), 0), self.src_h - 1)
        return BoundingBox(x0, y0, x1, y1)

    def box_to_dst(self, box: BoundingBox) -> BoundingBox:
        x0 = min(max(self._map(box.x_min, self.src_w, self.dst_w), 0), self.dst_w - 1)
        x1 = min(max(self._map(box.x_max, self.src_w, self.dst_w), 0), self.dst_w - 1)
        y0 = min(max(self._map(box.y_min, self.src_h, self.dst_h), 0), self.dst_h - 1)
        y1 = min(max(self._map(box.y_max, self.src_h, self.dst_h), 0), self.dst_h - 1)
        return BoundingBox(x0, y0, x1, y1)

    def mask_to_src(self, mask: np.ndarray) -> np.ndarray:
        return resize_mask(mask, (self.src_h, self.src_w))


def preprocess(path, resolution: int,
               channels: int = 1) -> Tuple[np.ndarray, ResizeTransform]:
    """Load an image file as a standardized float tensor.

    Decodes PNG/JPEG/BMP, converts to grayscale (channels=1) or RGB
    (channels=3), bilinearly resizes to resolution x resolution and scales
    intensities to [0, 1].

    Returns:
        (image, transform): image is (C, resolution, resolution) float32;
        transform maps between native and model coordinates.
    """
    try:
        with Image.open(path) as img:
            src_w, src_h = img.size
            mode = "L" if channels == 1 else "RGB"
            img = img.convert(mode).resize((resolution, resolution),
                                           Image.BILINEAR)
            arr = np.asarray(img, dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise UnreadableImage(f"cannot decode image {path}: {exc}") from exc
    if channels == 1:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return arr, ResizeTransform(src_h, src_w, resolution, resolution)


def resize_mask(mask: np.ndarray, hw: Tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour mask resize; output stays strictly binary."""
    h, w = hw
    arr = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    out = Image.fromarray(arr, mode="L").resize((w, h), Image.NEAREST)
    return np.asarray(out) >= 128


# ---------------------------------------------------------------------------
# tiny backbone

class TinyRefNet:
    """Small box-promptable encoder/decoder CNN with manual backprop.

    The prompt raster (1 inside the box) is stacked with the image as an
    extra input channel.  Four stride-2 encoder stages halve resolution
    down to 1/16, and a symmetric nearest-upsampling decoder with additive
    skip connections restores full resolution.  Every stage is
    conv -> group norm -> leaky relu; the norm keeps plain SGD stable at
    practical learning rates on a network this small.  A 1x1 head produces
    mask logits; a parallel 1x1 head produces per-pixel embeddings for the
    triplet loss.
    """

    model_kind = "tiny"

    def __init__(self, input_resolution: int = 256, image_channels: int = 1,
                 base_channels: int = 16, embed_dim: int = 8, seed: int = 0):
        if input_resolution % 16 != 0 or input_resolution < 16:
            raise ValueError(
                f"input_resolution must be a positive multiple of 16, "
                f"got {input_resolution}")
        self.input_resolution = input_resolution
        self.image_channels = image_channels
        self.base_channels = base_channels
        self.embed_dim = embed_dim
        self.seed = seed
        rng = np.random.default_rng(seed)
        c = base_channels
        cin = image_channels + 1  # + prompt raster
        self.e1 = Conv2d(cin, c, 3, stride=2, pad=1, rng=rng)
        self.e2 = Conv2d(c, 2 * c, 3, stride=2, pad=1, rng=rng)
        self.e3 = Conv2d(2 * c, 4 * c, 3, stride=2, pad=1, rng=rng)
        self.e4 = Conv2d(4 * c, 8 * c, 3, stride=2, pad=1, rng=rng)
        self.d4 = Conv2d(8 * c, 4 * c, 3, stride=1, pad=1, rng=rng)
        self.d3 = Conv2d(4 * c, 2 * c, 3, stride=1, pad=1, rng=rng)
        self.d2 = Conv2d(2 * c, c, 3, stride=1, pad=1, rng=rng)
        self.d1 = Conv2d(c, c // 2, 3, stride=1, pad=1, rng=rng)
        self.head = Conv2d(c // 2, 1, 1, rng=rng)
        # start the mask head predicting background: under heavy class
        # imbalance a negative logit prior keeps early gradients focused
        # on the rare foreground instead of fighting a 50/50 start
        self.head.b = np.full(1, -1.0, dtype=np.float32)
        self.embed = Conv2d(c // 2, embed_dim, 1, rng=rng)
        self._convs = {"e1": self.e1, "e2": self.e2, "e3": self.e3,
                       "e4": self.e4, "d4": self.d4, "d3": self.d3,
                       "d2": self.d2, "d1": self.d1, "head": self.head,
                       "embed": self.embed}
        staged = ("e1", "e2", "e3", "e4", "d4", "d3", "d2", "d1")
        # groups capped by channel count so d1's narrow output still splits
        self._norms = {name: GroupNorm(self._convs[name].w.shape[0],
                                       groups=min(8, self._convs[name].w.shape[0]))
                       for name in staged}
        self._relus = {name: LeakyReLU() for name in staged}

    # -- interface ---------------------------------------------------------

    def encode_image(self, image: np.ndarray) -> np.ndarray:
        """Validate and standardize one image to (C, S, S) float32."""
        arr = np.asarray(image, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[None]
        s = self.input_resolution
        if arr.shape != (self.image_channels, s, s):
            raise ShapeMismatch(
                f"expected image ({self.image_channels}, {s}, {s}), "
                f"got {arr.shape}")
        return arr

    def encode_prompt(self, box: BoundingBox) -> np.ndarray:
        """Rasterize a box prompt: 1.0 inside the box, 0.0 outside."""
        s = self.input_resolution
        if box.x_max >= s or box.y_max >= s:
            raise ValueError(f"box {box} exceeds raster {s}x{s}")
        raster = np.zeros((s, s), dtype=np.float32)
        raster[box.y_min:box.y_max + 1, box.x_min:box.x_max + 1] = 1.0
        return raster

    def decode_mask(self, image_feats: np.ndarray, prompt: np.ndarray,
                    multimask_output: bool = False) -> List[np.ndarray]:
        """Run the network; returns a list of logit rasters.

        This backbone has a single mask head, so the list always has
        exactly one element whatever the flag says.
        """
        x = np.concatenate([image_feats, prompt[None]], axis=0)[None]
        logits = self._forward(x.astype(np.float32), want_embeddings=False)
        return [logits[0]]

    # -- training ----------------------------------------------------------

    def _forward(self, x, want_embeddings):
        r, n = self._relus, self._norms
        self._a1 = r["e1"].forward(n["e1"].forward(self.e1.forward(x)))
        self._a2 = r["e2"].forward(n["e2"].forward(self.e2.forward(self._a1)))
        self._a3 = r["e3"].forward(n["e3"].forward(self.e3.forward(self._a2)))
        a4 = r["e4"].forward(n["e4"].forward(self.e4.forward(self._a3)))
        b4 = r["d4"].forward(
            n["d4"].forward(self.d4.forward(upsample2x(a4))) + self._a3)
        b3 = r["d3"].forward(
            n["d3"].forward(self.d3.forward(upsample2x(b4))) + self._a2)
        b2 = r["d2"].forward(
            n["d2"].forward(self.d2.forward(upsample2x(b3))) + self._a1)
        self._b1 = r["d1"].forward(
            n["d1"].forward(self.d1.forward(upsample2x(b2))))
        logits = self.head.forward(self._b1)[:, 0]
        if want_embeddings:
            return logits, self.embed.forward(self._b1)
        return logits

    def forward_train(self, images: np.ndarray, boxes: Sequence[BoundingBox],
                      want_embeddings: bool = False):
        """Batched forward pass keeping caches for backward.

        Args:
            images: (B, C, S, S) float32 batch.
            boxes: one prompt box per image.
            want_embeddings: also return (B, D, S, S) pixel embeddings.

        Returns:
            logits (B, S, S), or (logits, embeddings).
        """
        images = np.asarray(images, dtype=np.float32)
        if images.ndim != 4 or images.shape[0] != len(boxes):
            raise ShapeMismatch(
                f"images {images.shape} do not match {len(boxes)} boxes")
        prompts = np.stack([self.encode_prompt(b) for b in boxes])[:, None]
        x = np.concatenate([images, prompts], axis=1)
        return self._forward(x, want_embeddings)

    def backward(self, dlogits: np.ndarray,
                 dembeddings: Optional[np.ndarray] = None) -> None:
        """Backpropagate loss gradients into every layer's parameter grads."""
        r, n = self._relus, self._norms
        db1 = self.head.backward(
            np.ascontiguousarray(dlogits[:, None], dtype=np.float32))
        if dembeddings is not None:
            db1 = db1 + self.embed.backward(
                np.ascontiguousarray(dembeddings, dtype=np.float32))
        du1 = self.d1.backward(n["d1"].backward(r["d1"].backward(db1)))
        dz2 = r["d2"].backward(upsample2x_backward(du1))
        du2 = self.d2.backward(n["d2"].backward(dz2))
        dz3 = r["d3"].backward(upsample2x_backward(du2))
        du3 = self.d3.backward(n["d3"].backward(dz3))
        dz4 = r["d4"].backward(upsample2x_backward(du3))
        da4 = upsample2x_backward(self.d4.backward(n["d4"].backward(dz4)))
        da3 = self.e4.backward(n["e4"].backward(r["e4"].backward(da4))) + dz4
        da2 = self.e3.backward(n["e3"].backward(r["e3"].backward(da3))) + dz3
        da1 = self.e2.backward(n["e2"].backward(r["e2"].backward(da2))) + dz2
        self.e1.backward(n["e1"].backward(r["e1"].backward(da1)))

    def sgd_step(self, lr: float, momentum: float = 0.0) -> None:
        for conv in self._convs.values():
            conv.step(lr, momentum)
        for norm in self._norms.values():
            norm.step(lr, momentum)

    # -- state -------------------------------------------------------------

    @property
    def num_parameters(self) -> int:
        return (sum(c.num_parameters for c in self._convs.values())
                + sum(n.num_parameters for n in self._norms.values()))

    def state_dict(self) -> dict:
        state = {}
        for name, conv in self._convs.items():
            state[f"{name}_w"] = conv.w.copy()
            state[f"{name}_b"] = conv.b.copy()
        for name, norm in self._norms.items():
            state[f"{name}_gn_g"] = norm.g.copy()
            state[f"{name}_gn_b"] = norm.b.copy()
        return state

    def load_state_dict(self, state: dict) -> None:
        for name, conv in self._convs.items():
            try:
                w, b = state[f"{name}_w"], state[f"{name}_b"]
            except KeyError as exc:
                raise CheckpointError(f"missing parameter {exc}") from exc
            if w.shape != conv.w.shape or b.shape != conv.b.shape:
                raise CheckpointError(
                    f"shape mismatch for {name}: checkpoint {w.shape}, "
                    f"model {conv.w.shape}")
            conv.w = np.asarray(w, dtype=np.float32).copy()
            conv.b = np.asarray(b, dtype=np.float32).copy()
        for name, norm in self._norms.items():
            try:
                g, b = state[f"{name}_gn_g"], state[f"{name}_gn_b"]
            except KeyError as exc:
                raise CheckpointError(f"missing parameter {exc}") from exc
            if g.shape != norm.g.shape or b.shape != norm.b.shape:
                raise CheckpointError(
                    f"shape mismatch for {name} norm: checkpoint {g.shape}, "
                    f"model {norm.g.shape}")
            norm.g = np.asarray(g, dtype=np.float32).copy()
            norm.b = np.asarray(b, dtype=np.float32).copy()

    def arch_config(self) -> dict:
        return {"input_resolution": self.input_resolution,
                "image_channels": self.image_channels,
                "base_channels": self.base_channels,
                "embed_dim": self.embed_dim}


# ---------------------------------------------------------------------------
# inference helpers

def predict_mask(model, image: np.ndarray, box: BoundingBox) -> np.ndarray:
    """Single-mask prediction: logits (S, S) for one image and box prompt.

    Always requests a single mask from the decoder and asserts it got
    exactly one.
    """
    feats = model.encode_image(image)
    prompt = model.encode_prompt(box)
    masks = model.decode_mask(feats, prompt, multimask_output=False)
    if len(masks) != 1:
        raise ShapeMismatch(
            f"decoder returned {len(masks)} masks with multimask_output off")
    return masks[0]


def infer_box(model, image: np.ndarray, strategy: str,
              mask: Optional[np.ndarray] = None,
              threshold: float = 0.5) -> BoundingBox:
    """Produce the prompt box for one image per the chosen strategy.

    * ``full``: the whole-raster box (no localization signal).
    * ``two-pass``: predict once with the full box, binarize, take the
      tight box of that mask; falls back to the full box if the first
      pass predicts nothing.
    * ``gt``: tight box of the provided ground-truth mask.
    """
    s = model.input_resolution
    if strategy == "full":
        return full_box(s, s)
    if strategy == "gt":
        if mask is None:
            raise ValueError("strategy 'gt' needs a ground-truth mask")
        return mask_to_bbox(mask)
    if strategy == "two-pass":
        logits = predict_mask(model, image, full_box(s, s))
        try:
            return mask_to_bbox(binarize(logits, threshold))
        except EmptyMask:
            return full_box(s, s)
    raise ValueError(
        f"unknown prompt strategy {strategy!r}; use one of {PROMPT_STRATEGIES}")


# ---------------------------------------------------------------------------
# checkpoints

def _sidecar_path(path: str) -> str:
    return os.path.splitext(str(path))[0] + ".json"


def save_checkpoint(model, path, extra: Optional[dict] = None) -> str:
    """Write model weights (.npz) plus a JSON sidecar describing them.

    The sidecar records the model kind and architecture so that
    ``load_checkpoint`` can rebuild the network, plus whatever the caller
    passes in ``extra`` (epoch, seed, training config, manifest digest).
    """
    path = str(path)
    np.savez(path if path.endswith(".npz") else path + ".npz",
             **model.state_dict())
    if not path.endswith(".npz"):
        path += ".npz"
    meta = {"model_kind": model.model_kind, "arch": model.arch_config()}
    meta.update(extra or {})
    with open(_sidecar_path(path), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def load_checkpoint(path):
    """Rebuild a model from a checkpoint written by save_checkpoint.

    Returns:
        (model, meta) where meta is the sidecar dictionary.
    """
    path = str(path)
    sidecar = _sidecar_path(path)
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    if not os.path.exists(sidecar):
        raise CheckpointError(f"checkpoint sidecar not found: {sidecar}")
    try:
        with open(sidecar) as fh:
            meta = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable sidecar {sidecar}: {exc}") from exc
    kind = meta.get("model_kind")
    if kind == "tiny":
        model = TinyRefNet(**meta["arch"])
        try:
            with np.load(path) as blob:
                model.load_state_dict(dict(blob))
        except (OSError, ValueError) as exc:
            raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
        return model, meta
    if kind == "foundation":
        from .foundation import load_foundation_checkpoint
        return load_foundation_checkpoint(path, meta)
    raise CheckpointError(f"unknown model kind {kind!r} in {sidecar}")
