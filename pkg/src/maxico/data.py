"""Synthetic nuclei images with captions, semi-supervised splits, flips and
rotations, and the on-disk ``images/ masks/ captions.tsv`` layout."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

COUNT_BUCKETS = (("few", 1, 3), ("several", 4, 7), ("many", 8, 12))
SIZE_BUCKETS = {"small": (2.0, 3.5), "medium": (3.5, 5.5), "large": (5.5, 8.0)}
QUADRANTS = ("upper left", "upper right", "lower left", "lower right")
NOUN = "nuclei"
CAPTION_VOCAB = tuple(
    [b[0] for b in COUNT_BUCKETS] + list(SIZE_BUCKETS) + [NOUN, "upper", "lower", "left", "right"]
)


@dataclass(eq=False)
class Sample:
    id: str
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    mask: np.ndarray | None  # (H, W) int64 class ids, None when unlabeled
    caption: str

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f"sample {self.id}: image must be HxWx3, got {self.image.shape}")
        if self.image.min() < 0 or self.image.max() > 1:
            raise ValueError(f"sample {self.id}: pixel values must lie in [0, 1]")
        if self.mask is not None and self.mask.shape != self.image.shape[:2]:
            raise ValueError(f"sample {self.id}: mask {self.mask.shape} does not match image")
        if not self.caption.strip():
            raise ValueError(f"sample {self.id}: empty caption")

    @property
    def labeled(self):
        return self.mask is not None

    def equals(self, other: "Sample") -> bool:
        if self.id != other.id or self.caption != other.caption:
            return False
        if not np.array_equal(self.image, other.image):
            return False
        if (self.mask is None) != (other.mask is None):
            return False
        return self.mask is None or np.array_equal(self.mask, other.mask)


@dataclass
class GeneratorConfig:
    size: int = 64
    min_blobs: int = 1
    max_blobs: int = 12
    noise: tuple[float, float] = (0.04, 0.16)  # per-image noise level range
    max_aspect: float = 1.8
    contrast: tuple[float, float] = (0.3, 0.85)
    edge: float = 0.3  # width of the soft blob rim, relative to the semi-axes
    distractors: int = 10
    stain_jitter: float = 0.08


def count_bucket(n: int) -> str:
    for name, lo, hi in COUNT_BUCKETS:
        if lo <= n <= hi:
            return name
    raise ValueError(f"no count bucket for {n} blobs")


def dominant_quadrant(mask: np.ndarray) -> str:
    h, w = mask.shape
    fg = mask > 0
    counts = [fg[: h // 2, : w // 2].sum(), fg[: h // 2, w // 2:].sum(),
              fg[h // 2:, : w // 2].sum(), fg[h // 2:, w // 2:].sum()]
    return QUADRANTS[int(np.argmax(counts))]


def _smooth_noise(rng, size, cells):
    coarse = rng.random((cells + 1, cells + 1))
    t = np.linspace(0, cells, size)
    i = np.minimum(t.astype(int), cells - 1)
    f = t - i
    rows = coarse[i] * (1 - f)[:, None] + coarse[i + 1] * f[:, None]
    return rows[:, i] * (1 - f)[None, :] + rows[:, i + 1] * f[None, :]


def _ellipse_radius(yy, xx, cy, cx, a, b, angle):
    """Normalised elliptical radius: <= 1 inside the ellipse."""
    c, s = math.cos(angle), math.sin(angle)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    return np.sqrt((u / a) ** 2 + (v / b) ** 2)


def to_8bit_grid(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0, 1) * 255).astype(np.uint8).astype(np.float32) / 255


def generate_sample(seed: int, index: int, cfg: GeneratorConfig | None = None) -> Sample:
    cfg = cfg or GeneratorConfig()
    rng = np.random.default_rng([seed, index])
    size = cfg.size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)

    target = int(rng.integers(cfg.min_blobs, cfg.max_blobs + 1))
    size_name = list(SIZE_BUCKETS)[int(rng.integers(len(SIZE_BUCKETS)))]
    r_lo, r_hi = SIZE_BUCKETS[size_name]

    blobs = []
    for _ in range(target):
        for _attempt in range(100):
            r = rng.uniform(r_lo, r_hi)
            aspect = rng.uniform(1.0, cfg.max_aspect)
            a, b = r * math.sqrt(aspect), r / math.sqrt(aspect)
            cy, cx = rng.uniform(a + 1, size - a - 1, size=2)
            # keep a 2px gap between bounding circles so blobs stay separate components
            if all(math.hypot(cy - o[0], cx - o[1]) >= a + o[2] + 2 for o in blobs):
                blobs.append((cy, cx, a, b, rng.uniform(0, math.pi)))
                break

    mask = np.zeros((size, size), dtype=np.int64)
    shade = np.zeros((size, size))
    for cy, cx, a, b, angle in blobs:
        q = _ellipse_radius(yy, xx, cy, cx, a, b, angle)
        mask[q <= 1.0] = 1
        # intensity fades linearly across a rim straddling the true boundary
        ramp = np.clip((1.0 + cfg.edge / 2 - q) / cfg.edge, 0.0, 1.0)
        shade = np.maximum(shade, rng.uniform(*cfg.contrast) * ramp)

    tissue = 0.75 + 0.2 * _smooth_noise(rng, size, 4) - 0.1 * _smooth_noise(rng, size, 16)
    # small dark specks that are not nuclei
    specks = np.zeros((size, size))
    for _ in range(int(rng.integers(0, cfg.distractors + 1))):
        cy, cx = rng.uniform(0, size, size=2)
        speck = (yy - cy) ** 2 + (xx - cx) ** 2 <= rng.uniform(0.7, 2.2) ** 2
        specks[speck & (mask == 0)] = rng.uniform(0.2, 0.6)
    darkness = np.maximum(shade, specks)
    pink = np.array([0.95, 0.70, 0.85]) + rng.normal(0, cfg.stain_jitter, 3)
    purple = np.array([0.35, 0.15, 0.55]) + rng.normal(0, cfg.stain_jitter, 3)
    image = tissue[..., None] * (pink * (1 - darkness[..., None]) + purple * darkness[..., None])
    image = image + rng.normal(0, rng.uniform(*cfg.noise), size=image.shape)

    caption = f"{count_bucket(len(blobs))} {size_name} {NOUN} {dominant_quadrant(mask)}"
    return Sample(f"{seed}-{index:05d}", to_8bit_grid(image), mask, caption)


def generate_synthetic(n: int, seed: int = 0, cfg: GeneratorConfig | None = None) -> list[Sample]:
    if n < 1:
        raise ValueError(f"n must be at least 1, got {n}")
    return [generate_sample(seed, i, cfg) for i in range(n)]


def split_semi(dataset: list[Sample], fraction: float, seed: int = 0) -> tuple[list[Sample], list[Sample]]:
    """Seeded shuffle; the first ``ceil(fraction * n)`` keep masks, the rest lose them."""
    if not dataset:
        raise ValueError("cannot split an empty dataset")
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"label fraction must lie in (0, 1], got {fraction}")
    n_labeled = math.ceil(fraction * len(dataset) - 1e-9)
    if n_labeled == 0:
        raise ValueError(f"fraction {fraction} leaves no labeled samples out of {len(dataset)}")
    order = np.random.default_rng(seed).permutation(len(dataset))
    labeled = [dataset[i] for i in order[:n_labeled]]
    unlabeled = [replace(dataset[i], mask=None) for i in order[n_labeled:]]
    return labeled, unlabeled


def holdout_split(dataset: list[Sample], fraction: float, seed: int = 0) -> tuple[list[Sample], list[Sample]]:
    """Seeded (train, test) split; ``fraction`` of samples go to test."""
    order = np.random.default_rng([seed, 1]).permutation(len(dataset))
    n_test = int(round(fraction * len(dataset)))
    return [dataset[i] for i in order[n_test:]], [dataset[i] for i in order[:n_test]]


@dataclass(frozen=True)
class Transform:
    """Horizontal flip, then vertical flip, then ``k`` quarter turns."""

    hflip: bool = False
    vflip: bool = False
    k: int = 0

    def apply(self, arr, spatial=(0, 1)):
        """Works on numpy arrays and torch tensors; ``spatial`` names the (H, W) axes."""
        h_ax, w_ax = spatial
        if self.hflip:
            arr = _flip(arr, w_ax)
        if self.vflip:
            arr = _flip(arr, h_ax)
        if self.k % 4:
            arr = _rot90(arr, self.k % 4, spatial)
        return arr

    def invert(self, arr, spatial=(0, 1)):
        h_ax, w_ax = spatial
        if self.k % 4:
            arr = _rot90(arr, -(self.k % 4), spatial)
        if self.vflip:
            arr = _flip(arr, h_ax)
        if self.hflip:
            arr = _flip(arr, w_ax)
        return arr

    @property
    def is_identity(self):
        return not (self.hflip or self.vflip or self.k % 4)


def _flip(arr, axis):
    if isinstance(arr, np.ndarray):
        return np.flip(arr, axis)
    return arr.flip(axis)


def _rot90(arr, k, axes):
    if isinstance(arr, np.ndarray):
        return np.rot90(arr, k, axes)
    return arr.rot90(k, list(axes))


def draw_transform(rng: np.random.Generator) -> Transform:
    hflip = bool(rng.random() < 0.5)
    vflip = bool(rng.random() < 0.5)
    return Transform(hflip, vflip, int(rng.integers(4)))


def apply_to_sample(sample: Sample, t: Transform) -> Sample:
    image = np.ascontiguousarray(t.apply(sample.image))
    mask = None if sample.mask is None else np.ascontiguousarray(t.apply(sample.mask))
    return replace(sample, image=image, mask=mask)


def augment(sample: Sample, rng: np.random.Generator) -> Sample:
    return apply_to_sample(sample, draw_transform(rng))


def export_directory(dataset: list[Sample], path) -> None:
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(exist_ok=True)
    for s in dataset:
        pixels = np.round(s.image * 255).astype(np.uint8)
        PILImage.fromarray(pixels, mode="RGB").save(root / "images" / f"{s.id}.png")
        if s.mask is not None:
            if s.mask.max(initial=0) > 255:
                raise ValueError(f"sample {s.id}: class ids above 255 do not fit an 8-bit mask")
            PILImage.fromarray(s.mask.astype(np.uint8), mode="L").save(root / "masks" / f"{s.id}.png")
    with open(root / "captions.tsv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        for s in dataset:
            writer.writerow([s.id, s.caption])


def _read_png(path: Path, mode: str) -> np.ndarray:
    try:
        with PILImage.open(path) as im:
            if im.mode != mode:
                im = im.convert(mode)
            return np.asarray(im)
    except Exception as exc:  # PIL raises several unrelated types for bad files
        raise ValueError(f"cannot read {path}: {exc}") from exc


def load_directory(path) -> list[Sample]:
    root = Path(path)
    image_dir = root / "images"
    images = sorted(image_dir.glob("*.png")) if image_dir.is_dir() else []
    caption_file = root / "captions.tsv"
    if not images and not caption_file.exists():
        warnings.warn(f"{root} contains no samples")
        return []
    if not caption_file.exists():
        raise ValueError(f"{caption_file} is missing")

    captions = {}
    with open(caption_file, encoding="utf-8", newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh, delimiter="\t"), start=1):
            if not row:
                continue
            if len(row) != 2:
                raise ValueError(f"{caption_file}:{lineno}: expected 2 tab-separated columns, got {len(row)}")
            captions[row[0]] = row[1]

    ids = {p.stem for p in images}
    for cid in captions:
        if cid not in ids:
            raise ValueError(f"{caption_file}: caption for '{cid}' has no image {image_dir / (cid + '.png')}")
    mask_dir = root / "masks"
    if mask_dir.is_dir():
        for m in mask_dir.glob("*.png"):
            if m.stem not in ids:
                raise ValueError(f"{m}: mask has no matching image")

    dataset = []
    for img_path in images:
        sid = img_path.stem
        if sid not in captions:
            raise ValueError(f"{img_path}: no caption entry in {caption_file}")
        image = _read_png(img_path, "RGB").astype(np.float32) / 255
        mask_path = mask_dir / f"{sid}.png"
        mask = _read_png(mask_path, "L").astype(np.int64) if mask_path.exists() else None
        try:
            dataset.append(Sample(sid, image, mask, captions[sid]))
        except ValueError as exc:
            raise ValueError(f"{img_path}: {exc}") from exc
    return dataset
