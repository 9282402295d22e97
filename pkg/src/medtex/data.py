"""Synthetic lesion dataset: generation, persistence, fraction subsetting.

Normal images are smooth multi-wave background textures with mild pixel
noise; abnormal ones add 1-3 elliptical blobs carrying an intensity shift
and a high-frequency texture, with the blob pixels recorded as the
ground-truth mask.  Every sample is generated from its own random stream
seeded by (dataset seed, sample id), so content is bit-reproducible and
independent of generation order.

On disk a dataset is a directory with a line-oriented ``manifest``, 8-bit
RGB PNGs under ``images/`` and 1-bit mask PNGs under ``masks/``; the
manifest stores a content hash per file.  Any directory matching this
layout loads the same way, so externally produced data can be dropped in.
"""

import hashlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import FormatError, ValidationError

FORMAT_VERSION = 1
ALLOWED_FRACTIONS = (0.25, 0.5, 1.0)

# total lesion area per abnormal image, as a fraction of H*W
AREA_FRACTION_RANGE = (0.005, 0.15)

_N_WAVES = 4
_NOISE_SIGMA = 0.012
_STRUCT_8 = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class SyntheticSample:
    image: np.ndarray       # (3, H, W) float32 in [0, 1]
    label: int              # 0 normal, 1 abnormal
    lesion_mask: np.ndarray  # (H, W) uint8, all zero when label == 0
    sample_id: int


@dataclass(frozen=True)
class ManifestEntry:
    sample_id: int
    label: int
    image_path: str
    mask_path: str
    image_sha: str
    mask_sha: str


@dataclass(frozen=True)
class DatasetManifest:
    split: str
    fraction: float
    seed: int
    image_size: int
    n_normal: int
    n_abnormal: int
    entries: tuple  # ManifestEntry per sample, in dataset order
    format_version: int = FORMAT_VERSION

    @property
    def sample_ids(self):
        return tuple(e.sample_id for e in self.entries)


@dataclass
class Dataset:
    samples: list
    manifest: DatasetManifest

    def __len__(self):
        return len(self.samples)

    def images(self):
        return np.stack([s.image for s in self.samples])

    def labels(self):
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def masks(self):
        return np.stack([s.lesion_mask for s in self.samples])

    def abnormal(self):
        return [s for s in self.samples if s.label == 1]

    def subset(self, fraction):
        sub = subset_fraction(self.manifest, fraction)
        keep = set(sub.sample_ids)
        return Dataset(samples=[s for s in self.samples if s.sample_id in keep],
                       manifest=sub)


def _sample_rng(seed, sample_id):
    return np.random.default_rng(np.random.SeedSequence((int(seed), int(sample_id))))


def _background(rng, size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    base = 0.40 + 0.20 * rng.random(3)
    img = np.repeat(base[:, None, None], size, axis=1).repeat(size, axis=2)
    for _ in range(_N_WAVES):
        freq = rng.uniform(1.0, 3.0)
        angle = rng.uniform(0.0, np.pi)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        amp = rng.uniform(0.02, 0.05)
        weights = rng.uniform(0.5, 1.0, 3)
        wave = amp * np.cos(2.0 * np.pi * freq * (np.cos(angle) * xx + np.sin(angle) * yy)
                            + phase)
        img += weights[:, None, None] * wave
    img += rng.normal(0.0, _NOISE_SIGMA, size=(3, size, size))
    return img


def _ellipse_q(size, cx, cy, rx, ry, angle):
    """Quadratic form of an ellipse: <= 1 inside, grows outward."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    u = (xx - cx) * np.cos(angle) + (yy - cy) * np.sin(angle)
    v = -(xx - cx) * np.sin(angle) + (yy - cy) * np.cos(angle)
    return (u / rx) ** 2 + (v / ry) ** 2


def _blob_geometry(rng, size):
    r_min = max(3.0, 0.055 * size)
    r_max = max(r_min + 1.0, 0.11 * size)
    rx = rng.uniform(r_min, r_max)
    ry = rng.uniform(r_min, r_max)
    angle = rng.uniform(0.0, np.pi)
    margin = max(rx, ry) + 1.0
    cx = rng.uniform(margin, size - margin)
    cy = rng.uniform(margin, size - margin)
    return cx, cy, rx, ry, angle


def _blob_shift(rng):
    sign = 1.0 if rng.random() < 0.5 else -1.0
    return sign * rng.uniform(0.10, 0.20) * rng.uniform(0.6, 1.0, 3)


def _fine_texture(rng, size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    freq = rng.uniform(8.0, 14.0)
    angle = rng.uniform(0.0, np.pi)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    return 0.11 * np.cos(2.0 * np.pi * freq * (np.cos(angle) * xx + np.sin(angle) * yy)
                         + phase)


def _add_distractor(rng, size, img):
    """Smooth feathered blob: same intensity shifts as a lesion but no fine
    texture and no sharp boundary.  Present in both classes, so intensity
    alone never separates them."""
    cx, cy, rx, ry, angle = _blob_geometry(rng, size)
    q = _ellipse_q(size, cx, cy, rx, ry, angle)
    alpha = np.clip(1.3 * (1.0 - q), 0.0, 1.0)
    img += _blob_shift(rng)[:, None, None] * alpha[None]


def _blob_connectivity_ok(mask):
    _, n4 = ndimage.label(mask)
    _, n8 = ndimage.label(mask, structure=_STRUCT_8)
    return n4 == n8


def _draw_lesions(rng, size):
    """Mask + appearance delta for one abnormal image (with area guard).

    Lesions are sharp-edged ellipses carrying an intensity shift plus a
    high-frequency texture; the texture is what distinguishes them from the
    feathered distractor blobs of normal images."""
    lo = int(np.ceil(AREA_FRACTION_RANGE[0] * size * size))
    hi = int(np.floor(AREA_FRACTION_RANGE[1] * size * size))
    for _ in range(64):
        n_blobs = int(rng.integers(1, 4))
        mask = np.zeros((size, size), dtype=bool)
        delta = np.zeros((3, size, size), dtype=np.float64)
        for _b in range(n_blobs):
            cx, cy, rx, ry, angle = _blob_geometry(rng, size)
            blob = _ellipse_q(size, cx, cy, rx, ry, angle) <= 1.0
            patch = _blob_shift(rng)[:, None, None] + _fine_texture(rng, size)[None]
            delta = np.where(blob[None], patch, delta)
            mask |= blob
        if lo <= int(mask.sum()) <= hi and _blob_connectivity_ok(mask):
            return mask, delta
    raise ValidationError("data", "generate_dataset",
                          f"could not draw a lesion within area bounds at size {size}")


def generate_sample(seed, sample_id, size, abnormal):
    """One sample, bit-reproducible from (seed, sample_id)."""
    rng = _sample_rng(seed, sample_id)
    img = _background(rng, size)
    for _ in range(int(rng.integers(0, 3))):
        _add_distractor(rng, size, img)
    if abnormal:
        mask, delta = _draw_lesions(rng, size)
        img = img + delta
        mask_u8 = mask.astype(np.uint8)
    else:
        mask_u8 = np.zeros((size, size), dtype=np.uint8)
    img = np.clip(img, 0.02, 0.98).astype(np.float32)
    return SyntheticSample(image=img, label=int(abnormal), lesion_mask=mask_u8,
                           sample_id=int(sample_id))


def generate_dataset(n_normal, n_abnormal, size, seed, split="train"):
    """Balanced-by-request synthetic dataset; ids [0, n_normal) are normal."""
    if size % 32:
        raise ValidationError("data", "generate_dataset",
                              f"size must be divisible by 32, got {size}")
    if n_normal < 1 or n_abnormal < 1:
        raise ValidationError("data", "generate_dataset", "counts must be >= 1")
    if split not in ("train", "test"):
        raise ValidationError("data", "generate_dataset", f"unknown split {split!r}")
    samples = []
    for sid in range(n_normal + n_abnormal):
        samples.append(generate_sample(seed, sid, size, abnormal=sid >= n_normal))
    entries = tuple(ManifestEntry(s.sample_id, s.label, "", "", "", "") for s in samples)
    manifest = DatasetManifest(split=split, fraction=1.0, seed=int(seed),
                               image_size=int(size), n_normal=int(n_normal),
                               n_abnormal=int(n_abnormal), entries=entries)
    return Dataset(samples=samples, manifest=manifest)


def subset_fraction(manifest, fraction):
    """Deterministic stratified subset; fractions are nested for one seed."""
    if fraction not in ALLOWED_FRACTIONS:
        raise ValidationError("data", "subset_fraction",
                              f"fraction must be one of {ALLOWED_FRACTIONS}, got {fraction}")
    by_label = {0: [], 1: []}
    for e in manifest.entries:
        by_label[e.label].append(e.sample_id)
    keep = set()
    for label, ids in by_label.items():
        ids = sorted(ids)
        rng = np.random.default_rng(
            np.random.SeedSequence((manifest.seed, 1000 + label)))
        order = rng.permutation(len(ids))
        take = int(np.floor(fraction * len(ids)))
        keep.update(ids[i] for i in order[:take])
    entries = tuple(e for e in manifest.entries if e.sample_id in keep)
    return replace(manifest, fraction=float(fraction), entries=entries,
                   n_normal=sum(1 for e in entries if e.label == 0),
                   n_abnormal=sum(1 for e in entries if e.label == 1))


# ---------------------------------------------------------------------------
# persistence

def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_dataset(dataset, out_dir):
    """Write images/, masks/ and the manifest; returns the directory path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in dataset.samples:
        img_rel = f"images/{s.sample_id:06d}.png"
        mask_rel = f"masks/{s.sample_id:06d}.png"
        arr = np.clip(np.rint(s.image * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(out / img_rel)
        Image.fromarray((s.lesion_mask * 255).astype(np.uint8), mode="L").convert("1").save(out / mask_rel)
        entries.append(ManifestEntry(s.sample_id, s.label, img_rel, mask_rel,
                                     _sha256(out / img_rel), _sha256(out / mask_rel)))
    manifest = replace(dataset.manifest, entries=tuple(entries))
    lines = [
        f"format_version = {manifest.format_version}",
        f"split = {manifest.split}",
        f"fraction = {manifest.fraction}",
        f"seed = {manifest.seed}",
        f"image_size = {manifest.image_size}",
        f"n_normal = {manifest.n_normal}",
        f"n_abnormal = {manifest.n_abnormal}",
        "",
    ]
    for e in entries:
        lines.append(f"{e.sample_id} {e.label} {e.image_path} {e.mask_path} "
                     f"{e.image_sha} {e.mask_sha}")
    (out / "manifest").write_text("\n".join(lines) + "\n", encoding="utf-8")
    dataset.manifest = manifest
    return out


def _parse_manifest(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise FormatError("data", "load_dataset", f"cannot read manifest: {exc}") from exc
    header = {}
    entries = []
    in_header = True
    for raw in text.splitlines():
        line = raw.strip()
        if in_header:
            if not line:
                in_header = False
                continue
            key, sep, val = line.partition("=")
            if not sep:
                raise FormatError("data", "load_dataset", f"bad header line {raw!r}")
            header[key.strip()] = val.strip()
        elif line:
            parts = line.split()
            if len(parts) != 6:
                raise FormatError("data", "load_dataset", f"bad index line {raw!r}")
            entries.append(ManifestEntry(int(parts[0]), int(parts[1]), parts[2],
                                         parts[3], parts[4], parts[5]))
    try:
        manifest = DatasetManifest(
            split=header["split"], fraction=float(header["fraction"]),
            seed=int(header["seed"]), image_size=int(header["image_size"]),
            n_normal=int(header["n_normal"]), n_abnormal=int(header["n_abnormal"]),
            entries=tuple(entries), format_version=int(header["format_version"]))
    except KeyError as exc:
        raise FormatError("data", "load_dataset", f"manifest missing key {exc}") from exc
    if manifest.format_version != FORMAT_VERSION:
        raise FormatError("data", "load_dataset",
                          f"manifest format_version {manifest.format_version} != {FORMAT_VERSION}")
    return manifest


def load_dataset(in_dir):
    """Load a dataset directory, verifying per-file hashes and invariants."""
    root = Path(in_dir)
    manifest = _parse_manifest(root / "manifest")
    samples = []
    for e in manifest.entries:
        for rel, sha in ((e.image_path, e.image_sha), (e.mask_path, e.mask_sha)):
            p = root / rel
            if not p.exists():
                raise FormatError("data", "load_dataset",
                                  f"sample {e.sample_id}: missing file {rel}")
            # "-" marks externally produced files without recorded hashes
            if sha and sha != "-" and _sha256(p) != sha:
                raise FormatError("data", "load_dataset",
                                  f"sample {e.sample_id}: checksum mismatch for {rel}")
        try:
            with Image.open(root / e.image_path) as im:
                img = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
            with Image.open(root / e.mask_path) as mm:
                mask = (np.asarray(mm.convert("L")) > 127).astype(np.uint8)
        except Exception as exc:
            raise FormatError("data", "load_dataset",
                              f"sample {e.sample_id}: cannot decode PNG ({exc})") from exc
        if img.shape[:2] != (manifest.image_size, manifest.image_size):
            raise FormatError("data", "load_dataset",
                              f"sample {e.sample_id}: image size {img.shape[:2]} "
                              f"!= manifest {manifest.image_size}")
        if bool(mask.any()) != bool(e.label == 1):
            raise FormatError("data", "load_dataset",
                              f"sample {e.sample_id}: label/mask mismatch")
        samples.append(SyntheticSample(image=np.ascontiguousarray(img.transpose(2, 0, 1)),
                                       label=e.label, lesion_mask=mask,
                                       sample_id=e.sample_id))
    return Dataset(samples=samples, manifest=manifest)
