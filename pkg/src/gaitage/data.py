"""Dataset ingestion, batching, and the synthetic silhouette generator.

On-disk formats are deliberately minimal: binary 8-bit grayscale PGM (P5)
images and a UTF-8 CSV manifest with header ``path,age`` or
``path,age,gender``. Manifest paths are resolved relative to the CSV's
directory.

The synthetic generator renders averaged-silhouette-style images whose
geometry moves monotonically with a latent age: stride narrows, the torso
leans forward, the head shrinks relative to the body, and the silhouette
widens slightly. An optional gender latent widens the shoulders. With the
noise level at zero the image is a deterministic function of age and
gender, so age rank order is recoverable from pixels alone.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, IngestError
from .tensor import get_default_dtype

# ---------------------------------------------------------------------------
# PGM images
# ---------------------------------------------------------------------------


def write_pgm(path: str, image: np.ndarray) -> None:
    """Write a grayscale image as binary PGM (P5, maxval 255).

    Accepts float values in [0, 1] or uint8 values directly.
    """
    img = np.asarray(image)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    if img.ndim != 2:
        raise IngestError(f"expected a 2-d image, got shape {img.shape}")
    if img.dtype != np.uint8:
        img = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(img.tobytes())


def read_pgm(path: str) -> np.ndarray:
    """Read a binary PGM (P5) file into a uint8 array of shape (H, W)."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as exc:
        raise IngestError(f"cannot read image {path}: {exc}") from exc
    if not data.startswith(b"P5"):
        raise IngestError(f"{path}: not a binary PGM (P5) file")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        token = data[start:pos]
        if not token.isdigit():
            raise IngestError(f"{path}: malformed PGM header near byte {start}")
        fields.append(int(token))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise IngestError(f"{path}: unsupported maxval {maxval}, expected 255")
    pixels = data[pos:pos + w * h]
    if len(pixels) != w * h:
        raise IngestError(
            f"{path}: truncated pixel data ({len(pixels)} of {w * h} bytes)")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w)


def load_image(path: str, expected_h: int, expected_w: int) -> np.ndarray:
    """Load a PGM into a (1, H, W) float tensor scaled to [0, 1]."""
    raw = read_pgm(path)
    if raw.shape != (expected_h, expected_w):
        raise IngestError(
            f"{path}: image is {raw.shape[0]}x{raw.shape[1]}, expected "
            f"{expected_h}x{expected_w}")
    return (raw.astype(get_default_dtype()) / 255.0)[None, :, :]


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    age: float
    gender: int | None


@dataclass(frozen=True)
class SampleManifest:
    """Index of one dataset: records plus the age bounds they span."""

    records: tuple[ManifestRecord, ...]
    root: str
    has_gender: bool
    age_min: float
    age_max: float

    def __len__(self) -> int:
        return len(self.records)

    def resolve(self, record: ManifestRecord) -> str:
        return os.path.join(self.root, record.path)

    def ages(self) -> np.ndarray:
        return np.array([r.age for r in self.records], dtype=np.float64)

    def genders(self) -> np.ndarray | None:
        if not self.has_gender:
            return None
        return np.array([r.gender for r in self.records], dtype=np.float64)


def load_manifest(csv_path: str) -> SampleManifest:
    """Parse a ``path,age[,gender]`` manifest; bad rows name their line."""
    if not os.path.isfile(csv_path):
        raise IngestError(f"manifest not found: {csv_path}")
    with open(csv_path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestError(f"{csv_path}: empty manifest") from None
        header = [h.strip() for h in header]
        if header == ["path", "age"]:
            has_gender = False
        elif header == ["path", "age", "gender"]:
            has_gender = True
        else:
            raise IngestError(
                f"{csv_path}: bad header {header}, expected path,age[,gender]")
        records = []
        seen: set[str] = set()
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise IngestError(
                    f"{csv_path}: line {lineno} has {len(row)} fields, "
                    f"expected {len(header)}")
            path = row[0].strip()
            if not path:
                raise IngestError(f"{csv_path}: line {lineno} has an empty path")
            if path in seen:
                raise IngestError(f"{csv_path}: line {lineno} repeats path {path}")
            seen.add(path)
            try:
                age = float(row[1])
            except ValueError:
                raise IngestError(
                    f"{csv_path}: line {lineno} has unparseable age "
                    f"{row[1]!r}") from None
            gender = None
            if has_gender:
                g = row[2].strip()
                if g not in ("0", "1"):
                    raise IngestError(
                        f"{csv_path}: line {lineno} has gender {g!r}, expected 0 or 1")
                gender = int(g)
            records.append(ManifestRecord(path, age, gender))
    if not records:
        raise IngestError(f"{csv_path}: manifest has no records")
    ages = [r.age for r in records]
    return SampleManifest(tuple(records), os.path.dirname(os.path.abspath(csv_path)),
                          has_gender, min(ages), max(ages))


def write_manifest(manifest: SampleManifest, indices: np.ndarray,
                   csv_path: str) -> None:
    """Write the selected records to a new manifest, re-relativizing paths."""
    out_dir = os.path.dirname(os.path.abspath(csv_path))
    os.makedirs(out_dir, exist_ok=True)
    header = "path,age,gender" if manifest.has_gender else "path,age"
    lines = [header]
    for i in indices:
        r = manifest.records[int(i)]
        rel = os.path.relpath(manifest.resolve(r), out_dir)
        row = f"{rel},{_format_age(r.age)}"
        if manifest.has_gender:
            row += f",{r.gender}"
        lines.append(row)
    with open(csv_path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def _format_age(age: float) -> str:
    return str(int(age)) if float(age).is_integer() else repr(age)


# ---------------------------------------------------------------------------
# synthetic silhouettes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for one synthetic dataset; same spec, same bytes."""

    seed: int
    n_samples: int
    height: int = 32
    width: int = 22
    age_min: int = 2
    age_max: int = 90
    noise: float = 0.1
    gender_effect: bool = False

    def validate(self) -> None:
        if self.n_samples < 1:
            raise ConfigError(f"n_samples must be >= 1, got {self.n_samples}")
        if self.height < 8 or self.width < 8:
            raise ConfigError(
                f"image size {self.height}x{self.width} too small to render")
        if self.age_min >= self.age_max:
            raise ConfigError(
                f"age range [{self.age_min}, {self.age_max}] is empty")
        if not 0.0 <= self.noise <= 1.0:
            raise ConfigError(f"noise must be in [0, 1], got {self.noise}")


# per-parameter jitter scales at noise level 1: head radius (relative),
# lean (absolute), hip width (relative), shoulder ratio (absolute),
# stride (absolute, width fractions)
_JITTER_SCALES = np.array([0.20, 0.08, 0.25, 0.12, 0.09])


def render_silhouette(height: int, width: int, age_unit: float,
                      gender: int = 0, gender_effect: bool = False,
                      jitter: np.ndarray | None = None) -> np.ndarray:
    """Render one clean silhouette; values in [0, 1], shape (H, W).

    ``age_unit`` runs from 0 (youngest) to 1 (oldest) and drives stride
    width (down), torso lean (up), head-to-body ratio (down), and overall
    silhouette width (up). ``jitter`` perturbs the five geometry
    parameters and is zero for a clean render.
    """
    if jitter is None:
        jitter = np.zeros(5)
    u = float(np.clip(age_unit, 0.0, 1.0))
    head_r = 0.085 * (1.28 - 0.45 * u) * (1.0 + jitter[0])
    lean = 0.16 * u + jitter[1]
    hw_hip = 0.085 * (1.0 + 0.22 * u) * (1.0 + jitter[2])
    shoulder_ratio = 1.18 + jitter[3]
    if gender_effect:
        # broad-shouldered and slightly wider overall for gender 1, so the
        # latent is visible in every torso row, not just the shoulder band
        shoulder_ratio += 0.42 * (gender - 0.5)
        hw_hip *= 1.0 + 0.10 * (gender - 0.5)
    hw_sh = hw_hip * shoulder_ratio
    stride_half = max(0.26 - 0.145 * u + jitter[4], 0.04)
    leg_th = 0.042 * (1.0 + 0.15 * u)

    y_head, y_sh, y_hip, y_feet = 0.11, 0.19, 0.56, 0.97
    aa = 0.9  # antialias band, pixels

    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    ys += 0.5
    xs += 0.5
    yf = ys / height

    def offset(y_frac):
        above = np.clip((y_hip - y_frac) / (y_hip - y_sh), 0.0, None)
        return lean * above

    covs = []

    # head: ellipse whose center follows the lean line
    cx = (0.5 + lean * (y_hip - y_head) / (y_hip - y_sh)) * width
    cy = y_head * height
    rx = max(head_r * width, 0.6)
    ry = max(head_r * height, 0.6)
    rho = np.sqrt(((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2)
    d_head = (rho - 1.0) * min(rx, ry)
    covs.append(np.clip(0.5 - d_head / aa, 0.0, 1.0))

    # torso: tapered band between shoulders and hips
    frac = np.clip((yf - y_sh) / (y_hip - y_sh), 0.0, 1.0)
    half = (hw_sh + (hw_hip - hw_sh) * frac) * width
    cx_t = (0.5 + offset(yf)) * width
    d_horiz = np.abs(xs - cx_t) - half
    d_vert = np.maximum(y_sh * height - ys, ys - y_hip * height)
    d_torso = np.maximum(d_horiz, d_vert)
    covs.append(np.clip(0.5 - d_torso / aa, 0.0, 1.0))

    # legs: two capsules from the hips to the feet
    for side in (-1.0, 1.0):
        ax, ay = (0.5 + side * 0.02) * width, y_hip * height
        bx, by = (0.5 + side * stride_half) * width, y_feet * height
        vx, vy = bx - ax, by - ay
        t = np.clip(((xs - ax) * vx + (ys - ay) * vy) / (vx * vx + vy * vy),
                    0.0, 1.0)
        d_leg = np.sqrt((xs - (ax + t * vx)) ** 2 + (ys - (ay + t * vy)) ** 2)
        d_leg -= leg_th * width
        covs.append(np.clip(0.5 - d_leg / aa, 0.0, 1.0))

    return np.maximum.reduce(covs)


def synth_generate(spec: SynthSpec, out_dir: str) -> SampleManifest:
    """Render a dataset to ``out_dir`` and return its manifest.

    Layout: ``images/NNNNN.pgm`` plus ``manifest.csv``. Ages are drawn
    uniformly over the configured range, genders are balanced coin flips,
    and every draw comes from one seeded generator, so the same spec
    always produces byte-identical files.
    """
    spec.validate()
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    span = spec.age_max - spec.age_min
    rows = ["path,age,gender"]
    for i in range(spec.n_samples):
        age = int(rng.integers(spec.age_min, spec.age_max + 1))
        gender = int(rng.integers(0, 2))
        jitter = rng.standard_normal(5) * (_JITTER_SCALES * spec.noise)
        img = render_silhouette(spec.height, spec.width,
                                (age - spec.age_min) / span, gender,
                                spec.gender_effect, jitter)
        if spec.noise > 0:
            img = np.clip(
                img + spec.noise * 0.25 * rng.standard_normal(img.shape),
                0.0, 1.0)
        rel = f"images/{i:05d}.pgm"
        write_pgm(os.path.join(out_dir, rel), img)
        rows.append(f"{rel},{age},{gender}")
    manifest_path = os.path.join(out_dir, "manifest.csv")
    with open(manifest_path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(rows) + "\n")
    return load_manifest(manifest_path)


# ---------------------------------------------------------------------------
# splitting and batching
# ---------------------------------------------------------------------------


@dataclass
class BatchStream:
    """A fixed subset of samples served as shuffled mini-batches.

    Shuffling is a pure function of (seed, stream tag, epoch), so any
    epoch's batch order can be replayed exactly.
    """

    images: np.ndarray
    ages: np.ndarray
    genders: np.ndarray | None
    batch_size: int
    seed: int
    tag: int

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def n_batches(self) -> int:
        return -(-len(self) // self.batch_size)

    def epoch(self, epoch: int):
        order = np.random.default_rng([self.seed, self.tag, epoch]).permutation(len(self))
        for start in range(0, len(self), self.batch_size):
            sel = order[start:start + self.batch_size]
            yield (self.images[sel], self.ages[sel],
                   None if self.genders is None else self.genders[sel])

    def in_order(self, batch_size: int | None = None):
        bs = batch_size or self.batch_size
        for start in range(0, len(self), bs):
            sel = slice(start, start + bs)
            yield (self.images[sel], self.ages[sel],
                   None if self.genders is None else self.genders[sel])

    def full(self):
        return self.images, self.ages, self.genders


@dataclass
class Split:
    train: BatchStream
    test: BatchStream
    train_indices: np.ndarray
    test_indices: np.ndarray


def _stratified_split(ages: np.ndarray, split_ratio: float,
                      rng: np.random.Generator
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Decile-stratified partition with an exact overall train count.

    Each decile contributes floor or ceil of its proportional share; the
    leftovers go to the deciles with the largest fractional remainders,
    so every decile's train fraction is within one sample of the global
    ratio.
    """
    n = len(ages)
    edges = np.quantile(ages, np.linspace(0.1, 0.9, 9))
    bins = np.searchsorted(edges, ages, side="left")
    total_train = round(n * split_ratio)
    bin_ids = np.unique(bins)
    members = {b: rng.permutation(np.flatnonzero(bins == b)) for b in bin_ids}
    targets = {b: len(members[b]) * split_ratio for b in bin_ids}
    take = {b: int(np.floor(targets[b])) for b in bin_ids}
    leftover = total_train - sum(take.values())
    by_remainder = sorted(bin_ids, key=lambda b: (-(targets[b] - take[b]), b))
    for b in by_remainder[:leftover]:
        take[b] += 1
    train_idx = np.concatenate([members[b][:take[b]] for b in bin_ids])
    test_idx = np.concatenate([members[b][take[b]:] for b in bin_ids])
    return np.sort(train_idx), np.sort(test_idx)


def load_arrays(manifest: SampleManifest
                ) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Load every image in the manifest into one (N, 1, H, W) array."""
    first = read_pgm(manifest.resolve(manifest.records[0]))
    h, w = first.shape
    images = np.empty((len(manifest), 1, h, w), dtype=get_default_dtype())
    for i, rec in enumerate(manifest.records):
        images[i] = load_image(manifest.resolve(rec), h, w)
    return images, manifest.ages(), manifest.genders()


def split_and_batch(manifest: SampleManifest, split_ratio: float,
                    batch_size: int, shuffle_seed: int) -> Split:
    """Stratified train/test split plus deterministic batch streams."""
    if not 0.0 < split_ratio < 1.0:
        raise ConfigError(f"split_ratio must be in (0, 1), got {split_ratio}")
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    images, ages, genders = load_arrays(manifest)
    rng = np.random.default_rng([shuffle_seed, 0])
    train_idx, test_idx = _stratified_split(ages, split_ratio, rng)

    def stream(idx, tag):
        return BatchStream(images[idx], ages[idx],
                           None if genders is None else genders[idx],
                           batch_size, shuffle_seed, tag)

    return Split(stream(train_idx, 1), stream(test_idx, 2), train_idx, test_idx)
