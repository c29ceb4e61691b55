"""Synthetic tissue-like patches with class-dependent nuclei and per-domain stain shifts.

Positive patches carry more, larger, more irregular and darker nuclei.
Each domain applies a fixed channel-mixing matrix and brightness offset;
the last domain is held out and only appears in the external test split.
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import features
from .guidance import Batch
from .kvconfig import read_kv, apply_kv, write_kv
from .seeding import substream

SPLITS = ("train", "val", "int_test", "ext_test")
PLACEMENT_TRIES = 50


@dataclass(frozen=True)
class GeneratorConfig:
    image_size: int = 64
    n_domains: int = 6
    count_mean_neg: float = 6.0
    count_mean_pos: float = 14.0
    radius_mean_neg: float = 3.0
    radius_std_neg: float = 0.5
    radius_mean_pos: float = 4.5
    radius_std_pos: float = 1.5
    radius_min: float = 1.5
    elongation_max: float = 1.4
    texture_amp_neg: float = 0.04
    texture_amp_pos: float = 0.12
    nucleus_rgb_neg: tuple[float, float, float] = (0.42, 0.24, 0.55)
    nucleus_rgb_pos: tuple[float, float, float] = (0.36, 0.20, 0.52)
    background_rgb: tuple[float, float, float] = (0.90, 0.68, 0.80)
    background_noise: float = 0.04
    pixel_noise: float = 0.015
    domain_strength: float = 0.15
    heldout_strength: float = 0.25
    brightness: float = 0.06
    stain_jitter: float = 0.0
    heldout_stain_jitter: float = 0.0
    heldout_cue_mix: float = 0.0
    sample_color_jitter: float = 0.0
    n_train: int = 2000
    n_val: int = 400
    n_int_test: int = 1000
    n_ext_test: int = 1000
    pos_frac_train: float = 0.3
    pos_frac_val: float = 0.5
    pos_frac_int_test: float = 0.5
    pos_frac_ext_test: float = 0.5
    glcm_levels: int = 8
    connectivity: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.n_domains < 2:
            raise ValueError("need at least 2 domains")
        if not self.count_mean_pos > self.count_mean_neg:
            raise ValueError("positive-class mean count must exceed the negative-class mean")
        if self.image_size < 8:
            raise ValueError("image_size too small")

    def split_size(self, split: str) -> int:
        return getattr(self, f"n_{split}")

    def pos_frac(self, split: str) -> float:
        return getattr(self, f"pos_frac_{split}")

    @property
    def heldout_domain(self) -> int:
        return self.n_domains - 1


@dataclass
class Sample:
    image: np.ndarray
    mask: np.ndarray
    label: int
    domain_id: int
    n_drawn: int
    sample_id: str = ""


def domain_transform(config: GeneratorConfig, domain_id: int) -> tuple[np.ndarray, np.ndarray]:
    """Fixed ``(mixing matrix, brightness offset)`` of a domain; domain 0 is the identity."""
    if not 0 <= domain_id < config.n_domains:
        raise ValueError(f"domain {domain_id} outside [0, {config.n_domains})")
    if domain_id == 0:
        return np.eye(3), np.zeros(3)
    rng = substream(config.seed, "domain", domain_id)
    strength = config.heldout_strength if domain_id == config.heldout_domain else config.domain_strength
    matrix = np.eye(3) + strength * rng.normal(size=(3, 3))
    offset = rng.uniform(-config.brightness, config.brightness, size=3)
    return matrix, offset


def domain_shift(image: np.ndarray, domain_id: int, config: GeneratorConfig, clamp: bool = True) -> np.ndarray:
    matrix, offset = domain_transform(config, domain_id)
    if domain_id == 0:
        return np.array(image, dtype=float)
    out = np.asarray(image, float) @ matrix.T + offset
    return np.clip(out, 0.0, 1.0) if clamp else out


def _ellipse(xx, yy, cx, cy, ra, rb, theta) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    inside = (u / ra) ** 2 + (v / rb) ** 2 <= 1.0
    if not inside.any():
        inside[int(round(cy)), int(round(cx))] = True
    return inside


def _place_blobs(rng, config: GeneratorConfig, label: int, n: int, xx, yy) -> list[np.ndarray]:
    """Footprints of up to ``n`` blobs, none 8-adjacent to another."""
    size = config.image_size
    mean = config.radius_mean_pos if label else config.radius_mean_neg
    std = config.radius_std_pos if label else config.radius_std_neg
    taken = np.zeros((size, size), dtype=bool)
    ring = ndimage.generate_binary_structure(2, 2)
    placed = []
    for _ in range(n):
        r = min(max(config.radius_min, rng.normal(mean, std)), size / 4)
        elong = rng.uniform(1.0, config.elongation_max)
        theta = rng.uniform(0, np.pi)
        extent = r * elong
        for _attempt in range(PLACEMENT_TRIES):
            cx, cy = rng.uniform(extent, size - 1 - extent, size=2)
            inside = _ellipse(xx, yy, cx, cy, r * elong, r / elong, theta)
            if not (ndimage.binary_dilation(inside, ring) & taken).any():
                taken |= inside
                placed.append(inside)
                break
    return placed


def generate_patch(config: GeneratorConfig, label: int, domain_id: int, rng: np.random.Generator,
                   count: int | None = None) -> Sample:
    """Render one patch; ``count`` overrides the class count distribution."""
    size = config.image_size
    n = int(rng.poisson(config.count_mean_pos if label else config.count_mean_neg)) if count is None else count
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    bg = np.asarray(config.background_rgb, float)
    field = ndimage.gaussian_filter(rng.normal(size=(size, size)), sigma=size / 8.0, mode="wrap")
    field *= config.background_noise / max(field.std(), 1e-12)
    image = bg * (1.0 + field[..., None]) + config.pixel_noise * rng.normal(size=(size, size, 3))
    mask = np.zeros((size, size), dtype=bool)
    nucleus = np.asarray(config.nucleus_rgb_pos if label else config.nucleus_rgb_neg, float)
    if domain_id == config.heldout_domain and config.heldout_cue_mix:
        # Blend toward a label-independent color so hue stops predicting the class.
        neg, pos = np.asarray(config.nucleus_rgb_neg, float), np.asarray(config.nucleus_rgb_pos, float)
        m = config.heldout_cue_mix
        nucleus = (1.0 - m) * nucleus + m * (neg + rng.uniform() * (pos - neg))
    jitter = config.heldout_stain_jitter if domain_id == config.heldout_domain else config.stain_jitter
    if jitter:
        nucleus = bg + rng.uniform(1.0 - jitter, 1.0 + jitter) * (nucleus - bg)
    amp = config.texture_amp_pos if label else config.texture_amp_neg
    blobs = _place_blobs(rng, config, label, n, xx, yy)
    for inside in blobs:
        shade = 1.0 + amp * rng.normal(size=int(inside.sum()))
        image[inside] = nucleus * shade[:, None]
        mask |= inside
    if config.sample_color_jitter:
        # Within-domain stain variability: a per-patch channel gain.
        image = image * (1.0 + config.sample_color_jitter * rng.normal(size=3))
    image = np.clip(image, 0.0, 1.0)
    image = domain_shift(image, domain_id, config)
    return Sample(image, mask, int(label), int(domain_id), len(blobs))


def split_layout(config: GeneratorConfig, split: str) -> tuple[np.ndarray, np.ndarray]:
    """Labels and domains for a split: exact class counts, domains balanced within each class."""
    size = config.split_size(split)
    if size < 1:
        raise ValueError(f"split {split!r} must be nonempty")
    n_pos = int(round(size * config.pos_frac(split)))
    labels = np.array([1] * n_pos + [0] * (size - n_pos))
    if split == "ext_test":
        domains = np.full(size, config.heldout_domain)
    else:
        n_train_domains = config.n_domains - 1
        domains = np.concatenate([np.arange(n_pos) % n_train_domains, np.arange(size - n_pos) % n_train_domains])
    order = substream(config.seed, "layout", SPLITS.index(split)).permutation(size)
    return labels[order], domains[order]


def generate_split(config: GeneratorConfig, split: str) -> list[Sample]:
    labels, domains = split_layout(config, split)
    split_idx = SPLITS.index(split)
    samples = []
    for i, (y, d) in enumerate(zip(labels, domains)):
        s = generate_patch(config, int(y), int(d), substream(config.seed, "data", split_idx, i))
        s.image = to_uint8(s.image) / 255.0
        s.sample_id = f"{split}-{i:05d}"
        samples.append(s)
    return samples


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    data = to_uint8(image)
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def write_pgm(path, mask: np.ndarray) -> None:
    data = (np.asarray(mask) > 0).astype(np.uint8) * 255
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def _read_netpbm(path, magic: bytes) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    pos += 1
    if tokens[0] != magic:
        raise ValueError(f"{path}: expected {magic!r} file, got {tokens[0]!r}")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit files are supported")
    depth = 3 if magic == b"P6" else 1
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * depth, offset=pos)
    return data.reshape(h, w, depth) if depth == 3 else data.reshape(h, w)


def read_ppm(path) -> np.ndarray:
    return _read_netpbm(path, b"P6").astype(float) / 255.0


def read_pgm(path) -> np.ndarray:
    return _read_netpbm(path, b"P5") > 0


MANIFEST_FIELDS = ("sample_id", "image_path", "mask_path", "label", "domain_id")
CONCEPT_FIELDS = ("sample_id", "split", "domain_id", *features.CONCEPTS, *(f"{c}_z" for c in features.CONCEPTS))


def generate_dataset(config: GeneratorConfig, out_dir) -> dict[str, Path]:
    """Write images, masks, per-split manifests, the concept table, and the config."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_kv(out / "generator.cfg", config)
    manifests, raw = {}, {}
    for split in SPLITS:
        img_dir = out / split
        img_dir.mkdir(exist_ok=True)
        samples = generate_split(config, split)
        rows = []
        for s in samples:
            img_rel, mask_rel = f"{split}/{s.sample_id}.ppm", f"{split}/{s.sample_id}_mask.pgm"
            write_ppm(out / img_rel, s.image)
            write_pgm(out / mask_rel, s.mask)
            rows.append({"sample_id": s.sample_id, "image_path": img_rel, "mask_path": mask_rel,
                         "label": s.label, "domain_id": s.domain_id})
            raw[s.sample_id] = (split, s.domain_id, features.concept_values(
                s.image, s.mask, config.glcm_levels, connectivity=config.connectivity))
        path = out / f"manifest_{split}.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS, lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
        manifests[split] = path
    _write_concepts(out / "concepts.csv", raw)
    return manifests


def _write_concepts(path: Path, raw: dict) -> None:
    train = {c: np.array([v[2][c] for v in raw.values() if v[0] == "train"]) for c in features.CONCEPTS}
    stats = features.zscore_fit(train)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CONCEPT_FIELDS)
        for sid, (split, dom, vals) in raw.items():
            z = stats.apply({c: np.array([vals[c]]) for c in features.CONCEPTS})
            writer.writerow([sid, split, dom, *(repr(float(vals[c])) for c in features.CONCEPTS),
                             *(repr(float(z[c][0])) for c in features.CONCEPTS)])


def read_manifest(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def read_concepts(path) -> dict[str, dict[str, float]]:
    with open(path, newline="") as fh:
        return {row["sample_id"]: {k: float(v) for k, v in row.items() if k not in ("sample_id", "split")}
                for row in csv.DictReader(fh)}


def load_generator_config(data_dir) -> GeneratorConfig:
    return apply_kv(GeneratorConfig(), read_kv(Path(data_dir) / "generator.cfg"))


def load_split(data_dir, split: str, normalized: bool = True) -> Batch:
    """Load one split as a :class:`Batch` with concept targets and ``center`` = domain id."""
    root = Path(data_dir)
    rows = read_manifest(root / f"manifest_{split}.csv")
    concepts = read_concepts(root / "concepts.csv")
    images = np.stack([read_ppm(root / r["image_path"]) for r in rows])
    suffix = "_z" if normalized else ""
    targets = {c: np.array([concepts[r["sample_id"]][c + suffix] for r in rows]) for c in features.CONCEPTS}
    domains = np.array([int(r["domain_id"]) for r in rows])
    targets["center"] = domains.astype(float)
    return Batch(images, np.array([float(r["label"]) for r in rows]), targets, domains,
                 np.array([r["sample_id"] for r in rows]))


def load_dataset(data_dir) -> dict[str, Batch]:
    return {split: load_split(data_dir, split) for split in SPLITS}
