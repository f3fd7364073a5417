"""Dataset IO (SECOND directory layout), synthetic generator and augmentation.

On-disk layout under a dataset root::

    im1/<id>.png  im2/<id>.png        8-bit RGB images
    label1/<id>.png  label2/<id>.png  8-bit single-channel class indices
    index.txt                         "<split> <id>" per line
    dataset.cfg                       num_classes, class names, palette

Roots without ``index.txt`` (e.g. a raw SECOND split directory) expose every
id found in ``im1/`` as split ``all``.  RGB label files are decoded through
the palette.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
from PIL import Image

from .config import dataclass_from_flat, parse_flat, read_flat, write_flat
from .errors import ConfigError, DataError
from .types import BitemporalSample, validate_sample

DEFAULT_CLASS_NAMES = ("ground", "tree", "low_vegetation", "water", "building", "playground")
# display palette of the SECOND annotations, index 0 = no-change
SECOND_PALETTE = (
    (255, 255, 255), (128, 128, 128), (0, 128, 0), (0, 255, 0),
    (0, 0, 255), (128, 0, 0), (255, 0, 0),
)
# rendering colours of the synthetic classes
BASE_COLORS = (
    (0.55, 0.50, 0.45), (0.12, 0.38, 0.14), (0.45, 0.72, 0.30),
    (0.14, 0.24, 0.62), (0.80, 0.36, 0.30), (0.85, 0.20, 0.55),
)
# dominant transitions, loosely following the SECOND statistics
DOMINANT_TRANSITIONS = {
    (1, 5): 0.26, (3, 1): 0.16, (1, 3): 0.12, (3, 5): 0.11, (5, 1): 0.08, (1, 2): 0.07,
}
SPLITS = ("train", "val", "test")


def default_palette(num_classes: int) -> list[tuple[int, int, int]]:
    pal = list(SECOND_PALETTE[: num_classes + 1])
    rng = np.random.default_rng(num_classes)
    while len(pal) < num_classes + 1:
        pal.append(tuple(int(v) for v in rng.integers(0, 256, 3)))
    return pal


def default_transitions(num_classes: int) -> dict[tuple[int, int], float]:
    pairs = [(a, b) for a in range(1, num_classes + 1) for b in range(1, num_classes + 1) if a != b]
    dominant = {k: v for k, v in DOMINANT_TRANSITIONS.items() if k in pairs}
    rest = [p for p in pairs if p not in dominant]
    mass = 1.0 - sum(dominant.values())
    out = dict(dominant)
    for p in rest:
        out[p] = mass / len(rest)
    total = sum(out.values())
    return {p: out[p] / total for p in pairs}


def default_colors(num_classes: int) -> dict[int, tuple[float, float, float]]:
    colors = {k + 1: c for k, c in enumerate(BASE_COLORS[:num_classes])}
    rng = np.random.default_rng(1000 + num_classes)
    for k in range(len(colors) + 1, num_classes + 1):
        colors[k] = tuple(float(v) for v in rng.uniform(0.1, 0.9, 3))
    return colors


@dataclass(frozen=True)
class GeneratorSpec:
    seed: int = 0
    count: int = 100
    height: int = 64
    width: int = 64
    num_classes: int = 5
    change_fraction: float = 0.20
    change_tolerance: float = 0.05
    noise: float = 0.04
    illumination: float = 0.08
    split_ratio: str = "3:1:1"
    max_retries: int = 20
    transitions: dict = field(default=None)
    colors: dict = field(default=None)

    def __post_init__(self):
        if self.transitions is None:
            object.__setattr__(self, "transitions", default_transitions(self.num_classes))
        if self.colors is None:
            object.__setattr__(self, "colors", default_colors(self.num_classes))
        problems = []
        if self.count < 1 or self.height < 8 or self.width < 8 or self.num_classes < 2:
            problems.append("count >= 1, height/width >= 8 and num_classes >= 2 are required")
        if not 0 < self.change_fraction < 1 or not 0 <= self.change_tolerance < self.change_fraction:
            problems.append("change_fraction must lie in (0, 1) with a smaller tolerance")
        for (a, b), p in self.transitions.items():
            if a == b and p > 0:
                problems.append(f"transition ({a},{b}) must have zero mass")
            if not (1 <= a <= self.num_classes and 1 <= b <= self.num_classes) or p < 0:
                problems.append(f"bad transition entry ({a},{b}) = {p}")
        if abs(sum(self.transitions.values()) - 1.0) > 1e-6:
            problems.append("transition probabilities must sum to 1")
        if set(self.colors) != set(range(1, self.num_classes + 1)):
            problems.append("colors must cover classes 1..num_classes")
        try:
            ratio = self.ratios
            if len(ratio) != 3 or min(ratio) < 0 or sum(ratio) <= 0:
                raise ValueError
        except ValueError:
            problems.append(f"split_ratio {self.split_ratio!r} must be 'a:b:c'")
        if problems:
            raise ConfigError("invalid GeneratorSpec: " + "; ".join(problems))

    @property
    def ratios(self) -> tuple[float, ...]:
        return tuple(float(x) for x in self.split_ratio.split(":"))

    def transition_table(self) -> tuple[list[tuple[int, int]], np.ndarray]:
        pairs = sorted(p for p, v in self.transitions.items() if v > 0)
        return pairs, np.array([self.transitions[p] for p in pairs])

    def to_flat(self) -> dict[str, object]:
        out = {k: getattr(self, k) for k in (
            "seed", "count", "height", "width", "num_classes", "change_fraction",
            "change_tolerance", "noise", "illumination", "split_ratio", "max_retries")}
        for (a, b), p in sorted(self.transitions.items()):
            out[f"transition.{a}_{b}"] = p
        for k, rgb in sorted(self.colors.items()):
            out[f"color.{k}"] = ",".join(repr(float(v)) for v in rgb)
        return out

    @classmethod
    def from_flat(cls, mapping) -> "GeneratorSpec":
        scalars, transitions, colors = {}, {}, {}
        try:
            for key, value in mapping.items():
                if key.startswith("transition."):
                    a, b = key.split(".", 1)[1].split("_")
                    transitions[(int(a), int(b))] = float(value)
                elif key.startswith("color."):
                    colors[int(key.split(".", 1)[1])] = tuple(float(v) for v in str(value).split(","))
                else:
                    scalars[key] = value
        except ValueError as exc:
            raise ConfigError(f"malformed generator entry: {exc}") from None
        scalars["transitions"] = transitions or None
        scalars["colors"] = colors or None
        return dataclass_from_flat(cls, scalars)

    @classmethod
    def load(cls, path) -> "GeneratorSpec":
        return cls.from_flat(read_flat(path))

    def save(self, path) -> None:
        write_flat(path, self.to_flat())


@dataclass
class GeneratedSample:
    sample: BitemporalSample
    semantic1: np.ndarray
    semantic2: np.ndarray
    draws: list[tuple[int, int]]


def _shape_mask(rng, h, w, min_size, max_size):
    """Random axis-aligned rectangle or elliptic blob."""
    mask = np.zeros((h, w), dtype=bool)
    if rng.random() < 0.5:
        rh, rw = rng.integers(min_size, max_size + 1, 2)
        r0 = rng.integers(0, h - rh + 1)
        c0 = rng.integers(0, w - rw + 1)
        mask[r0:r0 + rh, c0:c0 + rw] = True
    else:
        ry, rx = rng.uniform(min_size / 2, max_size / 2, 2)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        yy, xx = np.mgrid[:h, :w]
        mask = ((yy + 0.5 - cy) / ry) ** 2 + ((xx + 0.5 - cx) / rx) ** 2 <= 1.0
    return mask


def generate_sample(spec: GeneratorSpec, index: int) -> GeneratedSample:
    """Deterministic function of ``(spec.seed, index)``."""
    h, w, n = spec.height, spec.width, spec.num_classes
    rng = np.random.default_rng([spec.seed, index])
    pairs, probs = spec.transition_table()
    area = h * w
    lo = (spec.change_fraction - spec.change_tolerance) * area
    hi = (spec.change_fraction + spec.change_tolerance) * area
    target = spec.change_fraction * area
    size_lo, size_hi = max(2, min(h, w) // 8), max(3, min(h, w) * 3 // 8)

    for _ in range(spec.max_retries):
        sem1 = np.full((h, w), rng.integers(1, n + 1), dtype=np.uint8)
        for _ in range(rng.integers(3, 9)):
            sem1[_shape_mask(rng, h, w, size_lo, size_hi * 4 // 3)] = rng.integers(1, n + 1)

        changed = np.zeros((h, w), dtype=bool)
        sem2 = sem1.copy()
        draws = []
        for _ in range(200):
            if changed.sum() >= target - 0.5 * size_lo * size_hi:
                break
            region = _shape_mask(rng, h, w, size_lo, size_hi)
            extra = region.sum()
            if extra == 0 or (region & changed).any() or changed.sum() + extra > hi:
                continue
            a, b = pairs[rng.choice(len(pairs), p=probs)]
            sem1[region] = a
            sem2[region] = b
            changed |= region
            draws.append((a, b))
        if lo <= changed.sum() <= hi:
            break
    else:
        raise DataError(f"sample {index}: change fraction {spec.change_fraction}"
                        f"+-{spec.change_tolerance} not reached in {spec.max_retries} attempts")

    colors = np.array([spec.colors[k] for k in range(1, n + 1)], dtype=np.float64)
    images = []
    for sem in (sem1, sem2):
        base = colors[sem.astype(np.int64) - 1].transpose(2, 0, 1)
        shift = rng.uniform(-spec.illumination, spec.illumination)
        img = base + shift + rng.normal(0.0, spec.noise, base.shape)
        images.append(np.clip(img, 0.0, 1.0))
    # store exactly what an 8-bit round trip would give back
    images = [np.round(img * 255).astype(np.float32) / 255 for img in images]
    label1 = np.where(changed, sem1, 0).astype(np.uint8)
    label2 = np.where(changed, sem2, 0).astype(np.uint8)
    sample = BitemporalSample(images[0], images[1], label1, label2, n, f"{index:05d}")
    return GeneratedSample(sample, sem1, sem2, draws)


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    split: str
    ids: tuple[str, ...]
    num_classes: int
    palette: tuple[tuple[int, int, int], ...]
    class_names: tuple[str, ...]


def _split_sizes(count: int, ratios) -> list[int]:
    total = sum(ratios)
    sizes = [int(count * r / total) for r in ratios]
    sizes[0] += count - sum(sizes)
    return sizes


def _to_uint8_image(image: np.ndarray) -> Image.Image:
    arr = np.clip(np.round(np.asarray(image).transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
    return Image.fromarray(arr, mode="RGB")


def save_sample(sample: BitemporalSample, root: str | Path, sample_id: str | None = None) -> None:
    root = Path(root)
    sid = sample_id or sample.sample_id
    for sub in ("im1", "im2", "label1", "label2"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    _to_uint8_image(sample.image1).save(root / "im1" / f"{sid}.png")
    _to_uint8_image(sample.image2).save(root / "im2" / f"{sid}.png")
    save_label(sample.label1, root / "label1" / f"{sid}.png")
    save_label(sample.label2, root / "label2" / f"{sid}.png")


def save_label(label: np.ndarray, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(label, dtype=np.uint8), mode="L").save(path)


def write_manifest_files(root: Path, num_classes: int, splits: dict[str, list[str]],
                         class_names=None, palette=None) -> None:
    names = class_names or [DEFAULT_CLASS_NAMES[k] if k < len(DEFAULT_CLASS_NAMES) else f"class{k + 1}"
                            for k in range(num_classes)]
    palette = palette or default_palette(num_classes)
    meta = {"num_classes": num_classes}
    meta.update({f"name.{k + 1}": nm for k, nm in enumerate(names)})
    meta.update({f"palette.{k}": ",".join(map(str, rgb)) for k, rgb in enumerate(palette)})
    write_flat(root / "dataset.cfg", meta)
    lines = [f"{split} {sid}" for split, ids in splits.items() for sid in ids]
    (root / "index.txt").write_text("\n".join(lines) + "\n")


def generate_dataset(spec: GeneratorSpec, out_dir: str | Path) -> dict[str, DatasetManifest]:
    """Write ``spec.count`` samples plus index, metadata and statistics files."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    n = spec.num_classes
    draws = np.zeros((n, n), dtype=np.int64)
    pixels = np.zeros((n, n), dtype=np.int64)
    changed = 0
    ids = []
    for i in range(spec.count):
        gen = generate_sample(spec, i)
        save_sample(gen.sample, root)
        ids.append(gen.sample.sample_id)
        for a, b in gen.draws:
            draws[a - 1, b - 1] += 1
        mask = gen.sample.label1 != 0
        np.add.at(pixels, (gen.sample.label1[mask] - 1, gen.sample.label2[mask] - 1), 1)
        changed += int(mask.sum())

    sizes = _split_sizes(spec.count, spec.ratios)
    splits, start = {}, 0
    for name, size in zip(SPLITS, sizes):
        splits[name] = ids[start:start + size]
        start += size
    write_manifest_files(root, n, splits)
    spec.save(root / "generator.cfg")

    stats = {"samples": spec.count, "changed_pixels": changed,
             "total_pixels": spec.count * spec.height * spec.width,
             "change_fraction": changed / (spec.count * spec.height * spec.width)}
    for (a, b), _ in sorted(spec.transitions.items()):
        stats[f"draws.{a}_{b}"] = int(draws[a - 1, b - 1])
        stats[f"pixels.{a}_{b}"] = int(pixels[a - 1, b - 1])
    write_flat(root / "stats.cfg", stats)
    return {name: open_dataset(root, name) for name in splits}


def read_stats(root: str | Path) -> dict[str, str]:
    return read_flat(Path(root) / "stats.cfg")


def open_dataset(root: str | Path, split: str = "train") -> DatasetManifest:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist")
    meta_path = root / "dataset.cfg"
    if meta_path.exists():
        meta = parse_flat(meta_path.read_text(), str(meta_path))
        try:
            n = int(meta["num_classes"])
        except (KeyError, ValueError):
            raise DataError(f"{meta_path}: missing or bad num_classes") from None
        names = tuple(meta.get(f"name.{k}", f"class{k}") for k in range(1, n + 1))
        palette = tuple(
            tuple(int(v) for v in meta[f"palette.{k}"].split(",")) if f"palette.{k}" in meta
            else tuple(default_palette(n)[k])
            for k in range(n + 1)
        )
    else:
        n = len(SECOND_PALETTE) - 1
        names = DEFAULT_CLASS_NAMES[:n]
        palette = SECOND_PALETTE

    index = root / "index.txt"
    if index.exists():
        ids = []
        for lineno, line in enumerate(index.read_text().splitlines(), 1):
            if not line.strip():
                continue
            try:
                sp, sid = line.split()
            except ValueError:
                raise DataError(f"{index}:{lineno}: expected '<split> <id>'") from None
            if sp == split or split == "all":
                ids.append(sid)
    else:
        if split != "all":
            raise DataError(f"{root} has no index.txt; only split 'all' is available")
        ids = sorted(p.stem for p in (root / "im1").glob("*.png"))
    return DatasetManifest(root, split, tuple(ids), n, palette, names)


def _read_image(path: Path) -> np.ndarray:
    if not path.exists():
        raise DataError(f"missing file {path}")
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as exc:
        raise DataError(f"cannot decode {path}: {exc}") from None
    return arr.transpose(2, 0, 1).copy()


def _read_label(path: Path, manifest: DatasetManifest) -> np.ndarray:
    if not path.exists():
        raise DataError(f"missing file {path}")
    try:
        with Image.open(path) as im:
            if im.mode in ("L", "P", "I", "I;16"):
                arr = np.asarray(im).astype(np.int64)
            else:
                arr = _decode_palette(np.asarray(im.convert("RGB")), manifest, path)
    except OSError as exc:
        raise DataError(f"cannot decode {path}: {exc}") from None
    bad = np.argwhere((arr < 0) | (arr > manifest.num_classes))
    if len(bad):
        r, c = bad[0]
        raise DataError(f"{path}: pixel ({r}, {c}) has class index {arr[r, c]} "
                        f"outside [0, {manifest.num_classes}] ({len(bad)} such pixels)")
    return arr.astype(np.uint8)


def _decode_palette(rgb: np.ndarray, manifest: DatasetManifest, path: Path) -> np.ndarray:
    codes = (rgb[..., 0].astype(np.int64) << 16) | (rgb[..., 1].astype(np.int64) << 8) | rgb[..., 2]
    out = np.full(codes.shape, -1, dtype=np.int64)
    for k, (r, g, b) in enumerate(manifest.palette):
        out[codes == ((r << 16) | (g << 8) | b)] = k
    if (out < 0).any():
        r, c = np.argwhere(out < 0)[0]
        raise DataError(f"{path}: pixel ({r}, {c}) colour {tuple(rgb[r, c])} is not in the palette")
    return out


def load_sample(manifest: DatasetManifest, sample_id: str) -> BitemporalSample:
    root = manifest.root
    fname = f"{sample_id}.png"
    sample = BitemporalSample(
        _read_image(root / "im1" / fname),
        _read_image(root / "im2" / fname),
        _read_label(root / "label1" / fname, manifest),
        _read_label(root / "label2" / fname, manifest),
        manifest.num_classes,
        sample_id,
    )
    report = validate_sample(sample)
    if report:
        raise DataError(f"{sample_id}: " + "; ".join(report))
    return sample


class ScdDataset:
    """In-memory list of samples for one split."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self.samples = [load_sample(manifest, sid) for sid in manifest.ids]

    @classmethod
    def from_samples(cls, samples, manifest: DatasetManifest | None = None) -> "ScdDataset":
        obj = cls.__new__(cls)
        obj.manifest = manifest
        obj.samples = list(samples)
        return obj

    @property
    def num_classes(self) -> int:
        return self.samples[0].num_classes if self.samples else self.manifest.num_classes

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int) -> BitemporalSample:
        return self.samples[i]

    def __iter__(self) -> Iterator[BitemporalSample]:
        return iter(self.samples)


def collate(samples) -> dict[str, torch.Tensor]:
    return {
        "image1": torch.from_numpy(np.stack([s.image1 for s in samples])),
        "image2": torch.from_numpy(np.stack([s.image2 for s in samples])),
        "label1": torch.from_numpy(np.stack([s.label1 for s in samples]).astype(np.int64)),
        "label2": torch.from_numpy(np.stack([s.label2 for s in samples]).astype(np.int64)),
    }


# identity, flips, rotations by 90/180/270 degrees
TRANSFORMS = ("identity", "hflip", "vflip", "rot90", "rot180", "rot270")
_INVERSE = {0: 0, 1: 1, 2: 2, 3: 5, 4: 4, 5: 3}


def _apply(arr: np.ndarray, op: int) -> np.ndarray:
    if op == 0:
        out = arr
    elif op == 1:
        out = np.flip(arr, axis=-1)
    elif op == 2:
        out = np.flip(arr, axis=-2)
    else:
        out = np.rot90(arr, k=op - 2, axes=(-2, -1))
    return np.ascontiguousarray(out)


def apply_transform(sample: BitemporalSample, op: int) -> BitemporalSample:
    return BitemporalSample(
        _apply(sample.image1, op), _apply(sample.image2, op),
        _apply(sample.label1, op), _apply(sample.label2, op),
        sample.num_classes, sample.sample_id,
    )


def inverse_transform(op: int) -> int:
    return _INVERSE[op]


def augment(sample: BitemporalSample, generator: torch.Generator,
            return_op: bool = False):
    """Apply one random flip/rotation identically to images and labels."""
    op = int(torch.randint(len(TRANSFORMS), (1,), generator=generator))
    out = apply_transform(sample, op)
    return (out, op) if return_op else out
