"""Dataset discovery, identity-disjoint splits and synthetic data.

A dataset is a directory of ocular images plus per-image mask PNGs.  The
manifest (a small TSV) records image/mask pairs, the identity each image
belongs to, and a train/test split that never shares an identity across
splits.  Layout presets cover the common public iris datasets' naming
schemes; the synthetic generator produces a toy dataset with the same
layout so the whole pipeline runs without any real data.
"""

import hashlib
import math
import os
import re
from dataclasses import dataclass, field
from glob import glob
from typing import Dict, List, Optional, Tuple

import numpy as np
from PIL import Image

from .errors import (DuplicateRecord, IoFailure, MalformedManifest,
                     NoPairsFound, ShapeMismatch)
from .geometry import BoundingBox, mask_to_bbox, read_mask, write_mask
from .model import ResizeTransform, preprocess, resize_mask

_MANIFEST_HEADER = re.compile(
    r"^# irisft-manifest name=(\S+) split_seed=(-?\d+)$")
_NAME_RE = re.compile(r"^[A-Za-z0-9._-]+$")


@dataclass(frozen=True)
class SampleRecord:
    """One image/mask pair with its identity and split assignment."""

    image_path: str
    mask_path: str
    identity: str
    split: str  # "train" or "test"


@dataclass
class DatasetManifest:
    """All records of one dataset plus the split seed that produced them."""

    name: str
    split_seed: int
    records: List[SampleRecord] = field(default_factory=list)

    def split(self, which: str) -> List[SampleRecord]:
        if which not in ("train", "test"):
            raise ValueError(f"split must be train or test, got {which!r}")
        return [r for r in self.records if r.split == which]

    def identities(self, which: Optional[str] = None) -> set:
        recs = self.records if which is None else self.split(which)
        return {r.identity for r in recs}

    def content_digest(self) -> str:
        """sha256 over name, seed and location-independent record fields.

        Stable when the dataset directory moves; changes when any record,
        identity or split assignment changes.
        """
        h = hashlib.sha256()
        h.update(f"{self.name}\t{self.split_seed}\n".encode())
        for r in self.records:
            h.update(f"{os.path.basename(r.image_path)}\t"
                     f"{os.path.basename(r.mask_path)}\t"
                     f"{r.identity}\t{r.split}\n".encode())
        return h.hexdigest()

    def save(self, path) -> str:
        """Write the manifest TSV; paths stored relative to the file."""
        path = os.path.abspath(str(path))
        base = os.path.dirname(path)
        lines = [f"# irisft-manifest name={self.name} "
                 f"split_seed={self.split_seed}"]
        for r in self.records:
            img = os.path.relpath(r.image_path, base).replace(os.sep, "/")
            msk = os.path.relpath(r.mask_path, base).replace(os.sep, "/")
            lines.append(f"{img}\t{msk}\t{r.identity}\t{r.split}")
        try:
            with open(path, "w", newline="\n") as fh:
                fh.write("\n".join(lines) + "\n")
        except OSError as exc:
            raise IoFailure(f"cannot write manifest {path}: {exc}") from exc
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        """Parse a manifest TSV; verifies identity-disjointness of splits."""
        path = os.path.abspath(str(path))
        base = os.path.dirname(path)
        try:
            with open(path) as fh:
                lines = fh.read().splitlines()
        except OSError as exc:
            raise MalformedManifest(f"cannot read manifest {path}: {exc}") from exc
        if not lines:
            raise MalformedManifest(f"{path}: empty manifest")
        m = _MANIFEST_HEADER.match(lines[0])
        if not m:
            raise MalformedManifest(f"{path}: bad header line {lines[0]!r}")
        manifest = cls(name=m.group(1), split_seed=int(m.group(2)))
        seen = set()
        for ln, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise MalformedManifest(
                    f"{path}:{ln}: expected 4 tab-separated fields")
            img, msk, identity, split = parts
            if split not in ("train", "test"):
                raise MalformedManifest(f"{path}:{ln}: bad split {split!r}")
            img_abs = os.path.normpath(os.path.join(base, img))
            if img_abs in seen:
                raise DuplicateRecord(f"{path}:{ln}: duplicate image {img}")
            seen.add(img_abs)
            manifest.records.append(SampleRecord(
                image_path=img_abs,
                mask_path=os.path.normpath(os.path.join(base, msk)),
                identity=identity, split=split))
        overlap = manifest.identities("train") & manifest.identities("test")
        if overlap:
            raise MalformedManifest(
                f"{path}: identities in both splits: {sorted(overlap)[:5]}")
        return manifest


def manifest_digest(path) -> str:
    """sha256 hex digest of the manifest file bytes."""
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


# ---------------------------------------------------------------------------
# discovery

@dataclass(frozen=True)
class LayoutSpec:
    """How to find image/mask pairs and extract identities from stems."""

    image_glob: str = "images/*.png"
    mask_pattern: str = "masks/{stem}.png"
    identity_regex: str = r"^(.+)_\d+$"


# Filename conventions of the datasets the toolkit is pointed at in
# practice, e.g. "S5000L00.jpg" (subject S5000), "04233d1.tiff"
# (subject 04233), "21_L_3.bmp" (subject 21).
LAYOUT_PRESETS: Dict[str, LayoutSpec] = {
    "casia": LayoutSpec(image_glob="images/*", identity_regex=r"^(S\d+)"),
    "nd": LayoutSpec(image_glob="images/*", identity_regex=r"^(\d+)d"),
    "iitd": LayoutSpec(image_glob="images/*", identity_regex=r"^(\d+)_"),
    "synthetic": LayoutSpec(identity_regex=r"^(id\d+)_"),
    "generic": LayoutSpec(),
}


def split_identities(identities, split_seed: int,
                     train_fraction: float = 0.8) -> Tuple[set, set]:
    """Shuffle identities and cut: floor(train_fraction * N) go to train."""
    if not 0.0 <= train_fraction <= 1.0:
        raise ValueError(f"train_fraction must be in [0, 1], got {train_fraction}")
    ordered = sorted(identities)
    rng = np.random.default_rng(split_seed)
    perm = rng.permutation(len(ordered))
    n_train = math.floor(train_fraction * len(ordered))
    train = {ordered[i] for i in perm[:n_train]}
    test = set(ordered) - train
    return train, test


def build_manifest(root, layout: LayoutSpec, split_seed: int = 0,
                   train_fraction: float = 0.8,
                   name: Optional[str] = None) -> DatasetManifest:
    """Scan a dataset directory into an identity-disjoint split manifest.

    Images matching ``layout.image_glob`` under root are paired with masks
    via ``layout.mask_pattern`` (images without a mask are skipped);
    identities come from group 1 of ``layout.identity_regex`` applied to
    the image stem.  The split is a deterministic function of split_seed.

    Raises:
        NoPairsFound: nothing matched.
        DuplicateRecord: two images resolve to the same mask file.
        ValueError: a stem does not match the identity pattern.
    """
    root = os.path.abspath(str(root))
    name = name or os.path.basename(root) or "dataset"
    if not _NAME_RE.match(name):
        raise ValueError(f"dataset name {name!r} has unsupported characters")
    pattern = re.compile(layout.identity_regex)
    pairs = []
    mask_owners = {}
    for img in sorted(glob(os.path.join(root, layout.image_glob))):
        stem = os.path.splitext(os.path.basename(img))[0]
        msk = os.path.join(root, layout.mask_pattern.format(stem=stem))
        if not os.path.exists(msk):
            continue
        if msk in mask_owners:
            raise DuplicateRecord(
                f"images {mask_owners[msk]} and {img} both map to mask {msk}")
        mask_owners[msk] = img
        m = pattern.match(stem)
        if not m:
            raise ValueError(
                f"stem {stem!r} does not match identity pattern "
                f"{layout.identity_regex!r}")
        pairs.append((img, msk, m.group(1)))
    if not pairs:
        raise NoPairsFound(
            f"no image/mask pairs under {root} "
            f"(glob {layout.image_glob!r}, masks {layout.mask_pattern!r})")
    train_ids, _ = split_identities({p[2] for p in pairs}, split_seed,
                                    train_fraction)
    records = [SampleRecord(img, msk, identity,
                            "train" if identity in train_ids else "test")
               for img, msk, identity in pairs]
    return DatasetManifest(name=name, split_seed=split_seed, records=records)


# ---------------------------------------------------------------------------
# synthetic data

@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the synthetic ocular dataset generator.

    Geometry is expressed as fractions of image_size so the class balance
    stays roughly constant across resolutions (background : iris stays
    above 5:1 with the defaults).
    """

    count: int = 80
    image_size: int = 128
    images_per_identity: int = 4
    # radius cap keeps worst-case iris area under 1/6 of the frame even at
    # maximum jitter and minimum pupil, so background : iris stays >= 5:1
    iris_radius_range: Tuple[float, float] = (0.16, 0.22)
    pupil_ratio_range: Tuple[float, float] = (0.35, 0.55)
    sclera_intensity: Tuple[float, float] = (0.65, 0.90)
    iris_intensity: Tuple[float, float] = (0.15, 0.35)
    pupil_intensity: Tuple[float, float] = (0.02, 0.12)
    lid_intensity: Tuple[float, float] = (0.50, 0.75)
    occluder_prob: float = 0.3
    # iris-toned background blobs (shadows, brows, lash clumps): hard
    # negatives that punish a model leaning on intensity alone
    distractor_count: Tuple[int, int] = (1, 2)
    distractor_radius_range: Tuple[float, float] = (0.05, 0.11)
    noise_sigma: float = 0.01
    seed: int = 0


def _render_eye(spec: SynthSpec, rng: np.random.Generator,
                base_geom: Tuple[float, float, float, float]):
    """Render one image/mask pair around a jittered base geometry."""
    s = spec.image_size
    cx0, cy0, r_o0, p_ratio = base_geom
    cx = cx0 + rng.uniform(-0.02, 0.02) * s
    cy = cy0 + rng.uniform(-0.02, 0.02) * s
    r_o = r_o0 * rng.uniform(0.92, 1.08)
    r_i = r_o * p_ratio
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    d2 = (xx - cx) ** 2 + (yy - cy) ** 2
    iris = (d2 <= r_o ** 2) & (d2 > r_i ** 2)
    pupil = d2 <= r_i ** 2
    img = np.full((s, s), rng.uniform(*spec.sclera_intensity))
    # distractors first so the eye paints over whatever they overlap;
    # the leftovers are background pixels at iris-like intensity
    lo, hi = spec.distractor_count
    for _ in range(int(rng.integers(lo, hi + 1))):
        dr = rng.uniform(*spec.distractor_radius_range) * s
        dx_, dy_ = rng.uniform(0, s), rng.uniform(0, s)
        blob = (xx - dx_) ** 2 + (yy - dy_) ** 2 <= dr ** 2
        img[blob] = rng.uniform(*spec.iris_intensity)
    img[iris] = rng.uniform(*spec.iris_intensity)
    img[pupil] = rng.uniform(*spec.pupil_intensity)
    mask = iris
    if rng.uniform() < spec.occluder_prob:
        # eyelid: a large disk clipped so it covers only the upper iris
        lid_r = rng.uniform(0.5, 0.8) * s
        y_bot = cy - r_o * rng.uniform(0.30, 0.75)
        lx = cx + rng.uniform(-0.1, 0.1) * s
        lid = (xx - lx) ** 2 + (yy - (y_bot - lid_r)) ** 2 <= lid_r ** 2
        img[lid] = rng.uniform(*spec.lid_intensity)
        mask = iris & ~lid
    img += rng.normal(0.0, spec.noise_sigma, size=(s, s))
    img = np.clip(img, 0.0, 1.0)
    return (img * 255.0).round().astype(np.uint8), mask


def generate_synthetic(spec: SynthSpec, out_dir,
                       train_fraction: float = 0.8) -> DatasetManifest:
    """Write a synthetic dataset (images/, masks/, manifest.tsv) to disk.

    Bit-identical for a given spec: the generator draws from a single
    seeded stream in a fixed order.  Returns the manifest, whose split is
    identity-disjoint with floor(train_fraction * identities) in train.
    """
    out_dir = os.path.abspath(str(out_dir))
    img_dir = os.path.join(out_dir, "images")
    msk_dir = os.path.join(out_dir, "masks")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(msk_dir, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    s = spec.image_size
    n_ids = math.ceil(spec.count / spec.images_per_identity)
    emitted = 0
    try:
        for k in range(n_ids):
            identity = f"id{k:04d}"
            r_o = rng.uniform(*spec.iris_radius_range) * s
            margin = r_o + 0.03 * s
            cx = rng.uniform(margin, s - margin)
            cy = rng.uniform(margin, s - margin)
            p_ratio = rng.uniform(*spec.pupil_ratio_range)
            for j in range(spec.images_per_identity):
                if emitted >= spec.count:
                    break
                img, mask = _render_eye(spec, rng, (cx, cy, r_o, p_ratio))
                stem = f"{identity}_{j:02d}"
                Image.fromarray(img, mode="L").save(
                    os.path.join(img_dir, stem + ".png"), format="PNG")
                write_mask(os.path.join(msk_dir, stem + ".png"), mask)
                emitted += 1
    except OSError as exc:
        raise IoFailure(f"cannot write synthetic data to {out_dir}: {exc}") from exc
    manifest = build_manifest(out_dir, LAYOUT_PRESETS["synthetic"],
                              split_seed=spec.seed,
                              train_fraction=train_fraction,
                              name=os.path.basename(out_dir) or "synthetic")
    manifest.save(os.path.join(out_dir, "manifest.tsv"))
    return manifest


# ---------------------------------------------------------------------------
# sample loading

@dataclass
class LoadedSample:
    """A preprocessed (image, mask, box) triple plus its resize transform."""

    image: np.ndarray       # (C, S, S) float32 in [0, 1]
    mask: np.ndarray        # (S, S) bool, at model resolution
    box: BoundingBox
    transform: ResizeTransform


def load_sample(record: SampleRecord, resolution: int,
                channels: int = 1) -> LoadedSample:
    """Load one record at model resolution.

    The image is bilinearly resized; the mask is nearest-resized (stays
    binary); the box is the tight bbox of the resized mask.  Deterministic:
    loading the same record twice yields identical arrays.

    Raises:
        UnreadableImage, EmptyMask, ShapeMismatch: integrity failures the
        caller may quarantine.
    """
    image, transform = preprocess(record.image_path, resolution, channels)
    native_mask = read_mask(record.mask_path)
    if native_mask.shape != (transform.src_h, transform.src_w):
        raise ShapeMismatch(
            f"mask {record.mask_path} is {native_mask.shape}, image is "
            f"({transform.src_h}, {transform.src_w})")
    mask = resize_mask(native_mask, (resolution, resolution))
    box = mask_to_bbox(mask)
    return LoadedSample(image=image, mask=mask, box=box, transform=transform)
