"""Adapter exposing a Segment Anything checkpoint as a promptable backbone.

Implements the same surface as :class:`irisft.model.TinyRefNet`
(encode_image / encode_prompt / decode_mask / forward_train / backward /
sgd_step / state_dict) so the numpy loss functions and the training loop
drive it unchanged.  torch and the upstream ``segment_anything`` package
are imported lazily inside the constructor; neither is needed for any
other part of the toolkit.

By default only the mask decoder is trainable; the image and prompt
encoders stay frozen.  Checkpoints must already be on disk (vit_h /
vit_l / vit_b weights from the segment-anything release page); nothing is
downloaded.
"""

import os
from typing import List, Optional, Sequence

import numpy as np

from .errors import CheckpointError, ShapeMismatch
from .geometry import BoundingBox

_INSTALL_HINT = ("the foundation backbone needs the optional dependencies: "
                 "install torch, then segment-anything from "
                 "github.com/facebookresearch/segment-anything")


class FoundationAdapter:
    """Fine-tunable wrapper around a Segment Anything checkpoint."""

    model_kind = "foundation"

    def __init__(self, checkpoint_path, model_type: str = "vit_h",
                 train_mask_decoder: bool = True,
                 train_image_encoder: bool = False,
                 train_prompt_encoder: bool = False,
                 device: str = "cpu"):
        checkpoint_path = str(checkpoint_path)
        if not os.path.exists(checkpoint_path):
            raise CheckpointError(
                f"foundation checkpoint not found: {checkpoint_path}; "
                f"download a segment-anything .pth checkpoint first")
        try:
            import torch
            from segment_anything import sam_model_registry
        except ImportError as exc:
            raise CheckpointError(_INSTALL_HINT) from exc
        if model_type not in sam_model_registry:
            raise CheckpointError(
                f"unknown model_type {model_type!r}; "
                f"choices: {sorted(sam_model_registry)}")
        try:
            sam = sam_model_registry[model_type](checkpoint=checkpoint_path)
        except (RuntimeError, OSError, KeyError, ValueError) as exc:
            raise CheckpointError(
                f"cannot load foundation checkpoint {checkpoint_path}: {exc}"
            ) from exc
        self._torch = torch
        self.sam = sam.to(device)
        self.device = device
        self.checkpoint_path = checkpoint_path
        self.model_type = model_type
        self.input_resolution = self.sam.image_encoder.img_size
        self.image_channels = 3
        self.train_image_encoder = train_image_encoder
        self.train_prompt_encoder = train_prompt_encoder
        self.train_mask_decoder = train_mask_decoder
        for p in self.sam.parameters():
            p.requires_grad_(False)
        for flag, module in ((train_image_encoder, self.sam.image_encoder),
                             (train_prompt_encoder, self.sam.prompt_encoder),
                             (train_mask_decoder, self.sam.mask_decoder)):
            if flag:
                for p in module.parameters():
                    p.requires_grad_(True)
        self._train_logits = None

    # -- interface ---------------------------------------------------------

    def _to_input(self, image: np.ndarray):
        torch = self._torch
        arr = np.asarray(image, dtype=np.float32)
        s = self.input_resolution
        if arr.shape != (3, s, s):
            raise ShapeMismatch(f"expected image (3, {s}, {s}), got {arr.shape}")
        t = torch.from_numpy(arr * 255.0).to(self.device)
        return self.sam.preprocess(t[None])

    def encode_image(self, image: np.ndarray):
        torch = self._torch
        x = self._to_input(image)
        ctx = torch.enable_grad() if self.train_image_encoder else torch.no_grad()
        with ctx:
            return self.sam.image_encoder(x)

    def encode_prompt(self, box: BoundingBox):
        torch = self._torch
        coords = torch.tensor(
            [[box.x_min, box.y_min, box.x_max, box.y_max]],
            dtype=torch.float32, device=self.device)
        ctx = (torch.enable_grad() if self.train_prompt_encoder
               else torch.no_grad())
        with ctx:
            return self.sam.prompt_encoder(points=None, boxes=coords,
                                           masks=None)

    def _decode(self, feats, prompt, multimask_output):
        sparse, dense = prompt
        low_res, _ = self.sam.mask_decoder(
            image_embeddings=feats,
            image_pe=self.sam.prompt_encoder.get_dense_pe(),
            sparse_prompt_embeddings=sparse,
            dense_prompt_embeddings=dense,
            multimask_output=multimask_output)
        s = self.input_resolution
        torch = self._torch
        return torch.nn.functional.interpolate(
            low_res, (s, s), mode="bilinear", align_corners=False)

    def decode_mask(self, feats, prompt,
                    multimask_output: bool = False) -> List[np.ndarray]:
        torch = self._torch
        with torch.no_grad():
            up = self._decode(feats, prompt, multimask_output)
        return [up[0, k].cpu().numpy() for k in range(up.shape[1])]

    # -- training ----------------------------------------------------------

    def forward_train(self, images: np.ndarray,
                      boxes: Sequence[BoundingBox],
                      want_embeddings: bool = False):
        if want_embeddings:
            raise ValueError(
                "the foundation backbone has no pixel-embedding head; "
                "the triplet loss only applies to the tiny backbone")
        torch = self._torch
        outs = []
        for image, box in zip(images, boxes):
            feats = self.encode_image(image)
            prompt = self.encode_prompt(box)
            outs.append(self._decode(feats, prompt, False)[:, 0])
        self._train_logits = torch.cat(outs, dim=0)
        return self._train_logits.detach().cpu().numpy()

    def backward(self, dlogits: np.ndarray,
                 dembeddings: Optional[np.ndarray] = None) -> None:
        if self._train_logits is None:
            raise RuntimeError("backward called before forward_train")
        torch = self._torch
        grad = torch.from_numpy(
            np.ascontiguousarray(dlogits, dtype=np.float32)).to(self.device)
        self._train_logits.backward(gradient=grad)
        self._train_logits = None

    def sgd_step(self, lr: float, momentum: float = 0.0) -> None:
        torch = self._torch
        with torch.no_grad():
            for p in self.sam.parameters():
                if not p.requires_grad or p.grad is None:
                    continue
                if momentum > 0.0:
                    buf = getattr(p, "_irisft_vel", None)
                    if buf is None:
                        buf = torch.zeros_like(p)
                    buf.mul_(momentum).add_(p.grad)
                    p._irisft_vel = buf
                    p.add_(buf, alpha=-lr)
                else:
                    p.add_(p.grad, alpha=-lr)
                p.grad = None

    # -- state -------------------------------------------------------------

    @property
    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.sam.parameters())

    def state_dict(self) -> dict:
        """Numpy arrays for the modules marked trainable."""
        out = {}
        for flag, name in ((self.train_image_encoder, "image_encoder"),
                           (self.train_prompt_encoder, "prompt_encoder"),
                           (self.train_mask_decoder, "mask_decoder")):
            if not flag:
                continue
            module = getattr(self.sam, name)
            for key, value in module.state_dict().items():
                out[f"{name}.{key}"] = value.detach().cpu().numpy()
        return out

    def load_state_dict(self, state: dict) -> None:
        torch = self._torch
        full = {k: torch.from_numpy(np.asarray(v)) for k, v in state.items()}
        result = self.sam.load_state_dict(full, strict=False)
        if result.unexpected_keys:
            raise CheckpointError(
                f"checkpoint keys not in model: {result.unexpected_keys[:5]}")

    def arch_config(self) -> dict:
        return {"base_checkpoint": self.checkpoint_path,
                "model_type": self.model_type,
                "train_mask_decoder": self.train_mask_decoder,
                "train_image_encoder": self.train_image_encoder,
                "train_prompt_encoder": self.train_prompt_encoder}


def load_foundation_checkpoint(path: str, meta: dict):
    """Rebuild a fine-tuned foundation model from an .npz checkpoint."""
    arch = dict(meta.get("arch", {}))
    adapter = FoundationAdapter(
        arch.get("base_checkpoint", ""),
        model_type=arch.get("model_type", "vit_h"),
        train_mask_decoder=arch.get("train_mask_decoder", True),
        train_image_encoder=arch.get("train_image_encoder", False),
        train_prompt_encoder=arch.get("train_prompt_encoder", False))
    with np.load(path) as blob:
        adapter.load_state_dict(dict(blob))
    return adapter, meta
