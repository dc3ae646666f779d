"""Synthetic two-site images, manifest IO, preprocessing, and batch sampling.

Images are soft-edged elliptical blobs (class 1) on a textured background,
pushed through a per-site intensity transform

    pixel <- clip(contrast_scale * pixel + brightness_offset + noise, 0, 1)

The background texture family (grating frequencies, orientations, amplitudes)
is drawn once per site from ``background_texture_seed``, so sites differ in
structure, not just in affine intensity terms that per-image standardization
would erase. Files are 8-bit PGM (P5); manifests are CSV ``path,label,site``
with paths relative to the manifest's directory. Class-1 images also get a
binary lesion mask under ``masks/``.
"""

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

GEN_SIZE = 40  # generator canvas; loaders resize to the model input size
PAD = 4  # augmentation pad margin
BASE_LEVEL = 0.4  # background intensity around which textures oscillate


class ManifestError(ValueError):
    """Manifest file missing, malformed, or referencing bad images."""


@dataclass
class SiteSpec:
    contrast_scale: float = 1.0
    brightness_offset: float = 0.0
    noise_sigma: float = 0.02
    lesion_intensity: float = 0.35
    lesion_count_min: int = 1
    lesion_count_max: int = 3
    lesion_radius_min: float = 3.0
    lesion_radius_max: float = 6.0
    background_texture_seed: int = 0

    def __post_init__(self):
        if not self.contrast_scale > 0:
            raise ValueError(f"contrast_scale must be > 0, got {self.contrast_scale}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not 1 <= self.lesion_count_min <= self.lesion_count_max:
            raise ValueError(
                f"need 1 <= lesion_count_min <= lesion_count_max, got "
                f"{self.lesion_count_min}..{self.lesion_count_max}"
            )
        if not 0 < self.lesion_radius_min <= self.lesion_radius_max:
            raise ValueError(
                f"need 0 < lesion_radius_min <= lesion_radius_max, got "
                f"{self.lesion_radius_min}..{self.lesion_radius_max}"
            )


def write_pgm(path, image_u8):
    path = Path(path)
    h, w = image_u8.shape
    try:
        with open(path, "wb") as f:
            f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            f.write(image_u8.astype(np.uint8).tobytes())
    except OSError as exc:
        raise OSError(f"failed writing image {path}: {exc}") from exc


def read_pgm(path):
    """Decode a binary (P5) PGM into float64 values in [0, 1]."""
    with open(path, "rb") as f:
        data = f.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P5":
        raise ManifestError(f"{path}: not a binary PGM (magic {fields[0]!r})")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval > 255:
        raise ManifestError(f"{path}: 16-bit PGM not supported (maxval {maxval})")
    pos += 1  # single whitespace after maxval
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos)
    if pixels.size != w * h:
        raise ManifestError(f"{path}: truncated pixel data")
    return pixels.reshape(h, w).astype(np.float64) / maxval


def _texture_params(spec):
    rng = np.random.default_rng(
        np.random.SeedSequence([int(spec.background_texture_seed), 0xB6])
    )
    n = 4
    freqs = rng.uniform(1.5, 5.5, size=n)
    orients = rng.uniform(0.0, math.pi, size=n)
    amps = rng.uniform(0.06, 0.14, size=n)
    return freqs, orients, amps


def _render_image(spec, label, rng, texture):
    s = GEN_SIZE
    yy, xx = np.mgrid[0:s, 0:s] / s
    freqs, orients, amps = texture
    img = np.full((s, s), BASE_LEVEL)
    for f, th, a in zip(freqs, orients, amps):
        phase = rng.uniform(0.0, 2.0 * math.pi)
        img = img + a * np.sin(2.0 * math.pi * f * (xx * math.cos(th) + yy * math.sin(th)) + phase)
    mask = np.zeros((s, s), dtype=bool)
    if label == 1:
        count = int(rng.integers(spec.lesion_count_min, spec.lesion_count_max + 1))
        profile = np.zeros((s, s))
        margin = spec.lesion_radius_max
        for _ in range(count):
            cy = rng.uniform(margin, s - margin)
            cx = rng.uniform(margin, s - margin)
            ra = rng.uniform(spec.lesion_radius_min, spec.lesion_radius_max)
            rb = rng.uniform(spec.lesion_radius_min, spec.lesion_radius_max)
            ang = rng.uniform(0.0, math.pi)
            dy = (yy * s) - cy
            dx = (xx * s) - cx
            u = (dx * math.cos(ang) + dy * math.sin(ang)) / ra
            v = (-dx * math.sin(ang) + dy * math.cos(ang)) / rb
            d = np.sqrt(u * u + v * v)
            profile = np.maximum(profile, np.clip((1.0 - d) / 0.3, 0.0, 1.0))
            mask |= d <= 1.0
        img = img + spec.lesion_intensity * profile
    noise = rng.normal(0.0, spec.noise_sigma, size=(s, s)) if spec.noise_sigma > 0 else 0.0
    img = np.clip(spec.contrast_scale * img + spec.brightness_offset + noise, 0.0, 1.0)
    return np.round(img * 255.0).astype(np.uint8), mask


def generate_site(spec, n_per_class, seed, out_dir, site_id=0, write_manifest_file=True):
    """Write 2*n_per_class PGM images (+ masks for class 1) and manifest rows.

    Fully determined by (spec, n_per_class, seed). Returns the manifest rows;
    also writes ``manifest.csv`` unless the caller assembles a combined one.
    """
    if n_per_class < 1:
        raise ValueError(f"n_per_class must be >= 1, got {n_per_class}")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    texture = _texture_params(spec)
    children = np.random.SeedSequence(int(seed)).spawn(2 * n_per_class)
    rows = []
    i = 0
    for label in (0, 1):
        for k in range(n_per_class):
            rng = np.random.default_rng(children[i])
            i += 1
            img, mask = _render_image(spec, label, rng, texture)
            name = f"s{site_id}_c{label}_{k:05d}.pgm"
            write_pgm(out_dir / "images" / name, img)
            if label == 1:
                write_pgm(out_dir / "masks" / name, mask.astype(np.uint8) * 255)
            rows.append((f"images/{name}", label, site_id))
    if write_manifest_file:
        write_manifest(out_dir / "manifest.csv", rows)
    return rows


def write_manifest(path, rows):
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write("path,label,site\n")
            for p, label, site in rows:
                f.write(f"{p},{label},{site}\n")
    except OSError as exc:
        raise OSError(f"failed writing manifest {path}: {exc}") from exc


def resize_bilinear(image, out_h, out_w):
    """Bilinear resample with half-pixel-centered sampling."""
    in_h, in_w = image.shape
    if (in_h, in_w) == (out_h, out_w):
        return image.copy()
    ys = (np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, in_h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, in_w - 1)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    top = image[np.ix_(y0, x0)] * (1 - wx) + image[np.ix_(y0, x1)] * wx
    bot = image[np.ix_(y1, x0)] * (1 - wx) + image[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy


def standardize(image):
    """Per-image zero mean, unit variance; constant images become all-zero."""
    m = image.mean()
    sd = image.std()
    if sd < 1e-8:
        return np.zeros_like(image)
    return (image - m) / sd


class Dataset:
    """In-memory image set with per-site read counters.

    ``images`` are standardized, ``raw`` keeps the decoded [0, 1] pixels for
    overlays. Selecting a subset shares the counters, so reads through any
    derived split are attributed to the originating site.
    """

    def __init__(self, images, raw, labels, sites, paths, mask_paths, read_counts=None):
        self.images = images
        self.raw = raw
        self.labels = labels
        self.sites = sites
        self.paths = paths
        self.mask_paths = mask_paths
        self.read_counts = read_counts if read_counts is not None else {}

    def __len__(self):
        return len(self.labels)

    @property
    def input_size(self):
        return self.images.shape[1:] if len(self.labels) else None

    def batch(self, indices):
        """Return ([n,1,H,W] images, labels) and count the reads per site."""
        indices = np.asarray(indices)
        for s, c in zip(*np.unique(self.sites[indices], return_counts=True)):
            self.read_counts[int(s)] = self.read_counts.get(int(s), 0) + int(c)
        return self.images[indices][:, None, :, :], self.labels[indices]

    def select(self, indices):
        indices = np.asarray(indices)
        return Dataset(
            self.images[indices], self.raw[indices], self.labels[indices],
            self.sites[indices], [self.paths[i] for i in indices],
            [self.mask_paths[i] for i in indices], read_counts=self.read_counts,
        )

    def split_by_site(self):
        return {
            int(s): self.select(np.flatnonzero(self.sites == s))
            for s in np.unique(self.sites)
        }


def load_manifest(path, input_size=None):
    """Load a manifest CSV into a Dataset, resizing and standardizing images."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    base = path.parent
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"{path}: empty file, expected a header") from None
        if header != ["path", "label", "site"]:
            raise ManifestError(f"{path}: bad header {header}, expected path,label,site")
        rows = list(reader)
    images, raw, labels, sites, paths, mask_paths = [], [], [], [], [], []
    for lineno, row in enumerate(rows, start=2):
        if len(row) != 3:
            raise ManifestError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
        rel, label_s, site_s = row
        try:
            label = int(label_s)
            site = int(site_s)
        except ValueError:
            raise ManifestError(
                f"{path}:{lineno}: non-integer label/site in {row}"
            ) from None
        if label not in (0, 1):
            raise ManifestError(f"{path}:{lineno}: label must be 0 or 1, got {label}")
        img_path = base / rel
        if not img_path.is_file():
            raise ManifestError(f"{path}:{lineno}: image missing: {img_path}")
        try:
            img = read_pgm(img_path)
        except (ManifestError, ValueError) as exc:
            raise ManifestError(f"{path}:{lineno}: undecodable image {img_path}: {exc}") from None
        if input_size is not None and img.shape != tuple(input_size):
            img = resize_bilinear(img, input_size[0], input_size[1])
        raw.append(img)
        images.append(standardize(img))
        labels.append(label)
        sites.append(site)
        paths.append(img_path)
        mp = base / rel.replace("images/", "masks/", 1)
        mask_paths.append(mp if mp != img_path and mp.is_file() else None)
    shape = (0, 0) if not images else images[0].shape
    return Dataset(
        np.array(images).reshape(len(images), *shape),
        np.array(raw).reshape(len(raw), *shape),
        np.array(labels, dtype=np.int64),
        np.array(sites, dtype=np.int64),
        paths, mask_paths,
    )


def augment(image, rng):
    """Zero-pad by 4, random-crop back, then independent 50% v/h flips."""
    h, w = image.shape
    padded = np.pad(image, PAD)
    dy = int(rng.integers(0, 2 * PAD + 1))
    dx = int(rng.integers(0, 2 * PAD + 1))
    out = padded[dy:dy + h, dx:dx + w]
    if rng.random() < 0.5:
        out = out[::-1, :]
    if rng.random() < 0.5:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def make_balanced_batches(ds_a, ds_b, k, seed, oversample_factor=4):
    """Seeded epoch of batches holding exactly k/2 indices from each site.

    The larger dataset is covered once (last batch wraps around); the smaller
    one is virtually repeated ``oversample_factor`` times, each repeat shuffled
    independently, and extended the same way if the epoch needs more. Returns
    a list of (indices_into_a, indices_into_b) pairs.
    """
    if k % 2:
        raise ValueError(f"batch size must be even, got {k}")
    if k < 2:
        raise ValueError(f"batch size must be >= 2, got {k}")
    na, nb = len(ds_a), len(ds_b)
    if na == 0 or nb == 0:
        raise ValueError("both datasets must be non-empty")
    half = k // 2
    rng = np.random.default_rng(seed)
    steps = math.ceil(max(na, nb) / half)
    need = steps * half

    def cover_once(n):
        order = rng.permutation(n)
        reps = math.ceil(need / n)
        return np.concatenate([order] * reps)[:need]

    def oversampled(n):
        pool = [rng.permutation(n) for _ in range(oversample_factor)]
        while len(pool) * n < need:
            pool.append(rng.permutation(n))
        return np.concatenate(pool)[:need]

    if na >= nb:
        idx_a, idx_b = cover_once(na), oversampled(nb)
    else:
        idx_b, idx_a = cover_once(nb), oversampled(na)
    return [
        (idx_a[i * half:(i + 1) * half], idx_b[i * half:(i + 1) * half])
        for i in range(steps)
    ]


def make_single_batches(ds, k, seed):
    """Seeded epoch of single-site batches; the last batch may be short."""
    if k < 1:
        raise ValueError(f"batch size must be >= 1, got {k}")
    n = len(ds)
    if n == 0:
        raise ValueError("dataset must be non-empty")
    order = np.random.default_rng(seed).permutation(n)
    return [order[i:i + k] for i in range(0, n, k)]
