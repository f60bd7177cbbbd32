"""Synthetic multi-domain, multi-label image benchmark.

Content is a set of class-specific shapes (circle, rectangle, triangle,
cross, ring) drawn on a flat canvas; domains differ only in appearance
(contrast, gamma, brightness, a smooth additive field, sensor noise).
Labels depend on the content stream alone, so regenerating a sample under
a different domain changes pixels but never labels.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image

from .tensor import Tensor

CLASS_SHAPES = ("circle", "rectangle", "triangle", "cross", "ring")
CLASS_PRESENCE_P = 0.4
_PLACEMENT_RETRIES = 50


class ManifestError(ValueError):
    pass


@dataclass
class DomainSpec:
    """Appearance transform ranges for one acquisition domain."""

    domain_id: int
    gamma_range: Tuple[float, float] = (1.0, 1.0)
    contrast_range: Tuple[float, float] = (1.0, 1.0)
    brightness_offset_range: Tuple[float, float] = (0.0, 0.0)
    lowfreq_field_amplitude_range: Tuple[float, float] = (0.0, 0.0)
    noise_std_range: Tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        for name in ("gamma_range", "contrast_range", "brightness_offset_range",
                     "lowfreq_field_amplitude_range", "noise_std_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"{name} is empty: ({lo}, {hi})")
        if self.gamma_range[0] <= 0:
            raise ValueError("gamma must be positive")
        if self.noise_std_range[0] < 0 or self.lowfreq_field_amplitude_range[0] < 0:
            raise ValueError("amplitudes must be non-negative")


# Two training-style domains (dark/low-contrast and mid/normal) plus one
# bright, low-contrast domain held out as the unseen style.  The held-out
# shift is mostly a global-statistics displacement at comparable
# shape-to-canvas contrast, so it punishes style-sensitive models without
# changing how detectable the content is.  Ranges are disjoint enough that
# the (mean, std) clusters separate by >3x their within-domain spread.
DEFAULT_DOMAIN_SPECS = (
    DomainSpec(0, gamma_range=(0.85, 1.00), contrast_range=(0.58, 0.68),
               brightness_offset_range=(-0.27, -0.22),
               lowfreq_field_amplitude_range=(0.00, 0.02), noise_std_range=(0.010, 0.020)),
    DomainSpec(1, gamma_range=(0.95, 1.10), contrast_range=(0.95, 1.08),
               brightness_offset_range=(-0.03, 0.02),
               lowfreq_field_amplitude_range=(0.00, 0.02), noise_std_range=(0.010, 0.020)),
    DomainSpec(2, gamma_range=(1.05, 1.20), contrast_range=(0.60, 0.72),
               brightness_offset_range=(0.22, 0.28),
               lowfreq_field_amplitude_range=(0.00, 0.02), noise_std_range=(0.010, 0.020)),
)


@dataclass
class SampleRecord:
    path: str
    labels: List[int]
    domain: int
    seed: int


@dataclass
class DatasetManifest:
    records: List[SampleRecord]
    meta: Dict = field(default_factory=dict)
    root: Optional[Path] = None

    def __len__(self):
        return len(self.records)

    def filter_domains(self, domains: Sequence[int]) -> "DatasetManifest":
        keep = set(domains)
        return DatasetManifest([r for r in self.records if r.domain in keep],
                               meta=dict(self.meta), root=self.root)

    def labels_matrix(self) -> np.ndarray:
        return np.array([r.labels for r in self.records], dtype=np.float64)

    def subset(self, indices: Sequence[int]) -> "DatasetManifest":
        return DatasetManifest([self.records[i] for i in indices],
                               meta=dict(self.meta), root=self.root)


@dataclass
class PreprocessConfig:
    resize_to: int = 72
    crop_to: int = 64
    hflip_prob: float = 0.5
    normalize_mean: Optional[float] = None
    normalize_std: Optional[float] = None

    def __post_init__(self):
        if self.crop_to > self.resize_to:
            raise ValueError("crop_to must be <= resize_to")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError("hflip_prob must lie in [0, 1]")


# -- content rendering -------------------------------------------------------------


def _shape_mask(kind: str, size: int, cx: float, cy: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    if kind == "circle":
        return dx * dx + dy * dy <= r * r
    if kind == "rectangle":
        return (np.abs(dx) <= r * 1.05) & (np.abs(dy) <= r * 0.7)
    if kind == "triangle":
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) * 0.55)
    if kind == "cross":
        return ((np.abs(dx) <= r * 0.32) & (np.abs(dy) <= r)) | \
               ((np.abs(dy) <= r * 0.32) & (np.abs(dx) <= r))
    if kind == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    raise ValueError(f"unknown shape {kind}")


def render_content(content_rng: np.random.Generator, num_classes: int,
                   size: int) -> Tuple[np.ndarray, List[int]]:
    """Draw present-class shapes on a flat canvas; returns ([0,1] image, labels)."""
    canvas = np.full((size, size), 0.42)
    labels = [int(content_rng.uniform() < CLASS_PRESENCE_P) for _ in range(num_classes)]
    placed: List[Tuple[float, float, float]] = []
    for cls, present in enumerate(labels):
        if not present:
            continue
        kind = CLASS_SHAPES[cls % len(CLASS_SHAPES)]
        r = content_rng.uniform(0.08, 0.14) * size
        intensity = content_rng.uniform(0.72, 0.82)
        for attempt in range(_PLACEMENT_RETRIES + 1):
            cx = content_rng.uniform(r, size - 1 - r)
            cy = content_rng.uniform(r, size - 1 - r)
            if all(math.hypot(cx - px, cy - py) >= 0.5 * (r + pr)
                   for px, py, pr in placed):
                break
        else:
            raise ValueError(f"could not place shape for class {cls} after "
                             f"{_PLACEMENT_RETRIES} retries")
        placed.append((cx, cy, r))
        mask = _shape_mask(kind, size, cx, cy, r)
        canvas[mask] = np.maximum(canvas[mask], intensity)
    return canvas, labels


def apply_domain_style(image01: np.ndarray, spec: DomainSpec,
                       style_rng: np.random.Generator) -> np.ndarray:
    """Contrast, gamma, brightness, smooth field, then noise; output on [0,255]."""
    size = image01.shape[0]
    contrast = style_rng.uniform(*spec.contrast_range)
    gamma = style_rng.uniform(*spec.gamma_range)
    brightness = style_rng.uniform(*spec.brightness_offset_range)
    amp = style_rng.uniform(*spec.lowfreq_field_amplitude_range)
    noise_std = style_rng.uniform(*spec.noise_std_range)

    out = 0.5 + contrast * (image01 - 0.5)
    out = np.clip(out, 0.0, 1.0) ** gamma
    out = out + brightness
    fx, fy = style_rng.uniform(0.5, 1.5, size=2)
    phase = style_rng.uniform(0.0, 2.0 * np.pi)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    out = out + amp * np.sin(2.0 * np.pi * (fx * xx + fy * yy) / size + phase)
    out = out + noise_std * style_rng.normal(size=image01.shape)
    return np.clip(out, 0.0, 1.0) * 255.0


def render_sample(dataset_seed: int, index: int, num_classes: int, size: int,
                  spec: DomainSpec) -> Tuple[np.ndarray, List[int]]:
    """Deterministic sample: content keyed by (seed, index) only, style by
    (seed, index, domain parameters); returns (uint8 image, labels)."""
    ss = np.random.SeedSequence(entropy=(int(dataset_seed), int(index)))
    content_ss, style_ss = ss.spawn(2)
    image01, labels = render_content(np.random.default_rng(content_ss), num_classes, size)
    styled = apply_domain_style(image01, spec, np.random.default_rng(style_ss))
    return np.round(styled).astype(np.uint8), labels


# -- dataset generation and manifest IO ------------------------------------------------


def generate_dataset(out_dir: Union[str, Path], per_domain_count: Union[int, Sequence[int]],
                     num_classes: int = 5, image_size: int = 96,
                     domain_specs: Sequence[DomainSpec] = DEFAULT_DOMAIN_SPECS,
                     seed: int = 0) -> DatasetManifest:
    """Write PNGs plus a JSON-lines manifest; returns the loaded manifest.

    Every sample owns an RNG derived from (seed, global index), so
    generation is reproducible sample by sample.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if isinstance(per_domain_count, int):
        counts = [per_domain_count] * len(domain_specs)
    else:
        counts = list(per_domain_count)
        if len(counts) != len(domain_specs):
            raise ValueError("per_domain_count list must match domain_specs")

    records: List[SampleRecord] = []
    pixel_sum, pixel_sq_sum, pixel_n = 0.0, 0.0, 0
    index = 0
    for spec, count in zip(domain_specs, counts):
        (out_dir / "images" / f"d{spec.domain_id}").mkdir(parents=True, exist_ok=True)
        for _ in range(count):
            img, labels = render_sample(seed, index, num_classes, image_size, spec)
            rel = f"images/d{spec.domain_id}/s{index:05d}.png"
            Image.fromarray(img, mode="L").save(out_dir / rel)
            records.append(SampleRecord(path=rel, labels=labels,
                                        domain=spec.domain_id, seed=index))
            arr = img.astype(np.float64)
            pixel_sum += arr.sum()
            pixel_sq_sum += (arr * arr).sum()
            pixel_n += arr.size
            index += 1

    mean = pixel_sum / pixel_n
    std = math.sqrt(max(pixel_sq_sum / pixel_n - mean * mean, 1e-12))
    meta = {
        "num_classes": num_classes,
        "image_size": image_size,
        "seed": seed,
        "pixel_mean": mean,
        "pixel_std": std,
        "domains": [asdict(s) for s in domain_specs],
        "per_domain_count": counts,
    }
    manifest = DatasetManifest(records=records, meta=meta, root=out_dir)
    save_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest


def save_manifest(manifest: DatasetManifest, path: Union[str, Path]) -> None:
    path = Path(path)
    with path.open("w") as fh:
        for rec in manifest.records:
            fh.write(json.dumps({"path": rec.path, "labels": rec.labels,
                                 "domain": rec.domain, "seed": rec.seed}) + "\n")
    if manifest.meta:
        with path.with_suffix(".meta.json").open("w") as fh:
            json.dump(manifest.meta, fh, indent=2)


def load_manifest(path: Union[str, Path], check_images: bool = True) -> DatasetManifest:
    """Parse a JSON-lines manifest; malformed lines report their line number."""
    path = Path(path)
    root = path.parent
    records: List[SampleRecord] = []
    n_labels = None
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: malformed JSON ({exc})") from exc
            if set(obj) != {"path", "labels", "domain", "seed"}:
                raise ManifestError(f"{path}:{lineno}: fields must be exactly "
                                    "{path, labels, domain, seed}")
            labels = obj["labels"]
            if n_labels is None:
                n_labels = len(labels)
            elif len(labels) != n_labels:
                raise ManifestError(f"{path}:{lineno}: labels length {len(labels)} "
                                    f"!= {n_labels}")
            if not all(v in (0, 1) for v in labels):
                raise ManifestError(f"{path}:{lineno}: labels must be binary")
            records.append(SampleRecord(path=obj["path"], labels=[int(v) for v in labels],
                                        domain=int(obj["domain"]), seed=int(obj["seed"])))
    if check_images:
        for rec in records:
            if not (root / rec.path).exists():
                raise ManifestError(f"missing image file: {root / rec.path}")
    meta_path = path.with_suffix(".meta.json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return DatasetManifest(records=records, meta=meta, root=root)


# -- preprocessing -------------------------------------------------------------------


def load_image_raw(path: Union[str, Path], resize_to: int) -> np.ndarray:
    """Decode to grayscale on the 0-255 scale and bilinearly resize."""
    try:
        with Image.open(path) as img:
            img = img.convert("L")
            if img.size != (resize_to, resize_to):
                img = img.resize((resize_to, resize_to), Image.BILINEAR)
            return np.asarray(img, dtype=np.float64)
    except (OSError, SyntaxError) as exc:
        raise ValueError(f"cannot decode image {path}: {exc}") from exc


def preprocess(image: Union[str, Path, np.ndarray], cfg: PreprocessConfig, mode: str,
               rng: Optional[np.random.Generator] = None,
               dtype=np.float64) -> Tuple[Tensor, Tensor]:
    """Resize, crop (random for train, central for eval), optional h-flip.

    Returns (raw tensor on the 0-255 scale, normalized tensor); image-level
    style randomization operates on the raw tensor, after which callers
    normalize its output with the same constants.
    """
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    if cfg.normalize_mean is None or cfg.normalize_std is None:
        raise ValueError("normalize_mean/std must be resolved before preprocessing")
    arr = image if isinstance(image, np.ndarray) else load_image_raw(image, cfg.resize_to)
    if arr.shape != (cfg.resize_to, cfg.resize_to):
        raise ValueError(f"expected {cfg.resize_to}x{cfg.resize_to} input, got {arr.shape}")

    span = cfg.resize_to - cfg.crop_to
    if mode == "train":
        if rng is None:
            raise ValueError("train preprocessing needs an RNG")
        top = int(rng.integers(0, span + 1))
        left = int(rng.integers(0, span + 1))
        flip = bool(rng.uniform() < cfg.hflip_prob) if cfg.hflip_prob > 0 else False
    else:
        top = left = span // 2
        flip = False
    crop = arr[top:top + cfg.crop_to, left:left + cfg.crop_to]
    if flip:
        crop = crop[:, ::-1]
    raw = np.ascontiguousarray(crop, dtype=dtype)[None]
    normed = (raw - cfg.normalize_mean) / cfg.normalize_std
    return Tensor(raw), Tensor(normed.astype(dtype))


# -- image-level statistics report ---------------------------------------------------


def stats_report(manifest: DatasetManifest, csv_path: Optional[Union[str, Path]] = None,
                 json_path: Optional[Union[str, Path]] = None) -> Dict:
    """Per-image (mean, std) grouped by domain plus cluster geometry.

    The summary quantifies the image-level domain gap: per-domain centroids
    in the (mean, std) plane, within-domain RMS spread, pairwise centroid
    distances, and nearest-centroid assignment accuracy.
    """
    if manifest.root is None:
        raise ValueError("manifest has no root directory")
    rows = []
    failures = []
    for rec in manifest.records:
        try:
            arr = np.asarray(Image.open(manifest.root / rec.path).convert("L"),
                             dtype=np.float64)
        except OSError as exc:
            failures.append(f"{rec.path}: {exc}")
            continue
        rows.append((rec.path, rec.domain, float(arr.mean()), float(arr.std())))
    if failures:
        raise IOError("stats_report could not read: " + "; ".join(failures))

    domains = sorted({d for _, d, _, _ in rows})
    points = {d: np.array([(m, s) for _, dd, m, s in rows if dd == d]) for d in domains}
    centroids = {d: points[d].mean(axis=0) for d in domains}
    spreads = {d: float(np.sqrt(((points[d] - centroids[d]) ** 2).sum(axis=1).mean()))
               for d in domains}
    pairwise = {}
    for i, da in enumerate(domains):
        for db in domains[i + 1:]:
            pairwise[f"{da}-{db}"] = float(np.linalg.norm(centroids[da] - centroids[db]))

    cent_matrix = np.array([centroids[d] for d in domains])
    correct = 0
    for _, d, m, s in rows:
        nearest = domains[int(np.argmin(((cent_matrix - [m, s]) ** 2).sum(axis=1)))]
        correct += int(nearest == d)
    accuracy = correct / len(rows)

    summary = {
        "per_domain": {str(d): {"centroid_mean": float(centroids[d][0]),
                                "centroid_std": float(centroids[d][1]),
                                "rms_spread": spreads[d],
                                "count": int(len(points[d]))}
                       for d in domains},
        "pairwise_centroid_distance": pairwise,
        "mean_within_domain_spread": float(np.mean(list(spreads.values()))),
        "nearest_centroid_accuracy": accuracy,
    }

    if csv_path is not None:
        with Path(csv_path).open("w") as fh:
            fh.write("path,domain,mean,std\n")
            for p, d, m, s in rows:
                fh.write(f"{p},{d},{m:.6f},{s:.6f}\n")
    if json_path is not None:
        Path(json_path).write_text(json.dumps(summary, indent=2))
    return summary
