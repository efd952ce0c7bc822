"""Synthetic two-domain shape scenes and the on-disk dataset format.

Layout of a dataset directory::

    meta.json            domain tag, seed, scene spec, shift, image count
    images/NNNN.ppm      binary 8-bit PPM (P6, or P5 for one channel)
    labels/NNNN.txt      one ``class cx cy w h`` line per object, normalized
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .detection import Box, iou_xyxy

CLASS_NAMES = ("rectangle", "ellipse")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    size: int = 64
    channels: int = 3
    min_objects: int = 1
    max_objects: int = 4
    min_extent: int = 16
    max_extent: int = 28
    num_classes: int = 2
    max_iou: float = 0.0
    background_noise: float = 0.08
    min_contrast: float = 0.3

    def __post_init__(self):
        if self.size < 8:
            raise ValueError("images must be at least 8 px wide")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ValueError("bad object count range")
        if not 1 <= self.min_extent <= self.max_extent <= self.size:
            raise ValueError("bad object extent range")
        if not 0.0 <= self.max_iou <= 0.3:
            raise ValueError("max_iou must lie in [0, 0.3]")
        if self.num_classes != len(CLASS_NAMES):
            raise ValueError(f"only {len(CLASS_NAMES)} shape classes are rendered")


@dataclass(frozen=True)
class DomainShift:
    brightness: float = 0.0
    contrast: float = 1.0
    noise_sigma: float = 0.0
    fog: float = 0.0
    hue: float = 0.0  # degrees
    gray: float = 0.5

    def __post_init__(self):
        if not -0.5 <= self.brightness <= 0.5:
            raise ValueError("brightness delta must lie in [-0.5, 0.5]")
        if not 0.2 <= self.contrast <= 2.0:
            raise ValueError("contrast scale must lie in [0.2, 2]")
        if not 0.0 <= self.noise_sigma <= 0.3:
            raise ValueError("noise sigma must lie in [0, 0.3]")
        if not 0.0 <= self.fog <= 1.0:
            raise ValueError("fog strength must lie in [0, 1]")

    @property
    def is_identity(self) -> bool:
        return self == DomainShift(gray=self.gray)


# Target domain of the default benchmark: fogged, darker, hue-rotated, noisy.
DEFAULT_TARGET_SHIFT = DomainShift(brightness=-0.05, contrast=0.9, noise_sigma=0.03, fog=0.35, hue=60.0)


@dataclass
class LabeledImage:
    image: np.ndarray  # (H, W, C) floats in [0, 1]
    boxes: list[Box] = field(default_factory=list)
    classes: list[int] = field(default_factory=list)
    domain: str = "source"

    @property
    def targets(self) -> list[tuple[Box, int]]:
        return list(zip(self.boxes, self.classes))


@dataclass
class Dataset:
    items: list[LabeledImage]
    domain: str = "source"
    seed: Optional[int] = None
    spec: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.items)

    def __getitem__(self, i):
        return self.items[i]

    def __iter__(self):
        return iter(self.items)


def quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def _low_freq_field(rng: np.random.Generator, size: int, amplitude: float, coarse: int = 4) -> np.ndarray:
    """Bilinearly upsampled coarse Gaussian grid, shape (size, size)."""
    grid = rng.normal(0.0, amplitude, size=(coarse + 1, coarse + 1))
    pos = (np.arange(size) + 0.5) / size * coarse
    i0 = np.minimum(pos.astype(int), coarse - 1)
    f = pos - i0
    rows = grid[i0] * (1 - f)[:, None] + grid[i0 + 1] * f[:, None]
    return rows[:, i0] * (1 - f)[None, :] + rows[:, i0 + 1] * f[None, :]


def _shape_mask(cls: int, x0: int, y0: int, w: int, h: int, size: int) -> np.ndarray:
    mask = np.zeros((size, size), dtype=bool)
    if cls == 0:
        mask[y0:y0 + h, x0:x0 + w] = True
        return mask
    ys, xs = np.mgrid[y0:y0 + h, x0:x0 + w]
    u = (xs + 0.5 - (x0 + w / 2)) / (w / 2)
    v = (ys + 0.5 - (y0 + h / 2)) / (h / 2)
    mask[y0:y0 + h, x0:x0 + w] = u * u + v * v <= 1.0
    return mask


def generate_scene(spec: SceneSpec, rng: np.random.Generator, domain: str = "source") -> LabeledImage:
    """Render flat-plus-noise background and non-overlapping shapes; labels are exact."""
    n, c = spec.size, spec.channels
    bg = rng.uniform(0.2, 0.8, size=c)
    img = bg[None, None, :] + _low_freq_field(rng, n, spec.background_noise)[:, :, None]

    count = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    placed: list[tuple[int, int, int, int]] = []
    boxes, classes = [], []
    for _ in range(count):
        for _attempt in range(50):
            w = int(rng.integers(spec.min_extent, spec.max_extent + 1))
            h = int(rng.integers(spec.min_extent, spec.max_extent + 1))
            x0 = int(rng.integers(0, n - w + 1))
            y0 = int(rng.integers(0, n - h + 1))
            corners = (x0, y0, x0 + w, y0 + h)
            if all(_overlap_ok(corners, p, spec.max_iou) for p in placed):
                break
        else:
            continue
        cls = int(rng.integers(spec.num_classes))
        color = rng.uniform(0.0, 1.0, size=c)
        while np.abs(color - bg).mean() < spec.min_contrast:
            color = rng.uniform(0.0, 1.0, size=c)
        img[_shape_mask(cls, x0, y0, w, h, n)] = color
        placed.append(corners)
        boxes.append(Box((x0 + w / 2) / n, (y0 + h / 2) / n, w / n, h / n))
        classes.append(cls)
    return LabeledImage(quantize(img), boxes, classes, domain)


def _overlap_ok(a, b, max_iou: float) -> bool:
    if max_iou <= 0.0:
        # touching is fine, sharing pixels is not
        return a[2] <= b[0] or b[2] <= a[0] or a[3] <= b[1] or b[3] <= a[1]
    return iou_xyxy(a, b) <= max_iou


def _hue_matrix(degrees: float) -> np.ndarray:
    """Rotation about the gray axis of RGB space."""
    th = math.radians(degrees)
    cos, sin = math.cos(th), math.sin(th)
    k = 1.0 / 3.0
    s = math.sqrt(k)
    return np.array([
        [cos + (1 - cos) * k, k * (1 - cos) - s * sin, k * (1 - cos) + s * sin],
        [k * (1 - cos) + s * sin, cos + k * (1 - cos), k * (1 - cos) - s * sin],
        [k * (1 - cos) - s * sin, k * (1 - cos) + s * sin, cos + k * (1 - cos)],
    ])


def apply_shift(item: LabeledImage, shift: DomainShift, rng: Optional[np.random.Generator] = None,
                domain: Optional[str] = None) -> LabeledImage:
    """Pixel-only appearance shift. Labels are passed through untouched."""
    img = item.image.astype(float, copy=True)
    if shift.hue and img.shape[2] == 3:
        img = img @ _hue_matrix(shift.hue).T
    img = (img - 0.5) * shift.contrast + 0.5 + shift.brightness
    img = (1.0 - shift.fog) * img + shift.fog * shift.gray
    if shift.noise_sigma > 0:
        if rng is None:
            raise ValueError("a noisy shift needs an rng")
        img = img + rng.normal(0.0, shift.noise_sigma, size=img.shape)
    out = item.image.copy() if shift.is_identity else quantize(img)
    return LabeledImage(out, list(item.boxes), list(item.classes), domain or item.domain)


def generate_dataset(n: int, seed: int, spec: SceneSpec = SceneSpec(), shift: Optional[DomainShift] = None,
                     domain: str = "source") -> Dataset:
    """``n`` scenes, each from its own rng stream spawned off ``seed``."""
    streams = np.random.SeedSequence(seed).spawn(n)
    items = []
    for ss in streams:
        rng = np.random.default_rng(ss)
        item = generate_scene(spec, rng, domain)
        if shift is not None:
            item = apply_shift(item, shift, rng, domain)
        items.append(item)
    meta = {"scene": asdict(spec), "shift": asdict(shift) if shift else None}
    return Dataset(items, domain, seed, meta)


def make_benchmark(seed: int = 0, n_source: int = 200, n_target: int = 200, n_test: int = 100,
                   spec: SceneSpec = SceneSpec(), shift: DomainShift = DEFAULT_TARGET_SHIFT) -> dict[str, Dataset]:
    """Source/target train splits plus held-out test splits for both domains."""
    keys = np.random.SeedSequence(seed).generate_state(4)
    return {
        "source_train": generate_dataset(n_source, int(keys[0]), spec, None, "source"),
        "target_train": generate_dataset(n_target, int(keys[1]), spec, shift, "target"),
        "target_test": generate_dataset(n_test, int(keys[2]), spec, shift, "target"),
        "source_test": generate_dataset(n_test, int(keys[3]), spec, None, "source"),
    }


# ---------------------------------------------------------------- disk I/O

def _write_ppm(path: Path, img: np.ndarray) -> None:
    h, w, c = img.shape
    if c not in (1, 3):
        raise DatasetError(f"PPM supports 1 or 3 channels, got {c}")
    raw = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    magic = b"P6" if c == 3 else b"P5"
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (w, h))
        f.write(raw.tobytes())


def _read_ppm(path: Path) -> np.ndarray:
    data = path.read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P5", b"P6") or maxval != 255:
        raise DatasetError(f"{path}: unsupported image header")
    c = 3 if magic == b"P6" else 1
    raw = np.frombuffer(data, dtype=np.uint8, count=w * h * c, offset=pos)
    return raw.reshape(h, w, c).astype(float) / 255.0


def write_dataset(path, ds: Dataset) -> Path:
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    for i, item in enumerate(ds.items):
        _write_ppm(root / "images" / f"{i:04d}.ppm", item.image)
        lines = [f"{c} {b.cx:.6f} {b.cy:.6f} {b.w:.6f} {b.h:.6f}\n" for b, c in item.targets]
        (root / "labels" / f"{i:04d}.txt").write_text("".join(lines))
    meta = {"domain": ds.domain, "seed": ds.seed, "count": len(ds), "spec": ds.spec}
    (root / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return root


def _parse_label_line(line: str, where: str) -> tuple[Box, int]:
    parts = line.split()
    if len(parts) != 5:
        raise DatasetError(f"{where}: expected 'class cx cy w h', got {line.strip()!r}")
    try:
        cls = int(parts[0])
        box = Box(*(float(p) for p in parts[1:]))
    except ValueError as exc:
        raise DatasetError(f"{where}: {exc}") from None
    return box, cls


def read_dataset(path) -> Dataset:
    root = Path(path)
    meta_path = root / "meta.json"
    if not meta_path.exists():
        raise DatasetError(f"{root}: missing meta.json")
    meta = json.loads(meta_path.read_text())
    items = []
    for i in range(int(meta["count"])):
        img = _read_ppm(root / "images" / f"{i:04d}.ppm")
        label_path = root / "labels" / f"{i:04d}.txt"
        boxes, classes = [], []
        for lineno, line in enumerate(label_path.read_text().splitlines(), start=1):
            if not line.strip():
                continue
            box, cls = _parse_label_line(line, f"{label_path}:{lineno}")
            boxes.append(box)
            classes.append(cls)
        items.append(LabeledImage(img, boxes, classes, meta["domain"]))
    return Dataset(items, meta["domain"], meta.get("seed"), meta.get("spec") or {})
