"""Synthetic multi-domain face data, on-disk ingestion and episode sampling.

Images are kept as float32 arrays in H x W x C layout with values quantized to
8-bit levels, so a dataset written to disk and read back compares equal.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage

PARSING_LABELS = (
    "background",
    "skin",
    "left_brow",
    "right_brow",
    "left_eye",
    "right_eye",
    "eyeglasses",
    "left_ear",
    "right_ear",
    "nose",
    "mouth",
    "upper_lip",
    "lower_lip",
)
N_PARSING = len(PARSING_LABELS)
DEPTH_SIZE = 32
SPLITS = ("train", "dev", "test")


class DataError(ValueError):
    """Raised when a sample, dataset or manifest violates its contract."""


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


def _from_u8(arr: np.ndarray) -> np.ndarray:
    return arr.astype(np.float32) / np.float32(255.0)


def _to_u8(arr: np.ndarray) -> np.ndarray:
    return np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)


@dataclass(frozen=True, eq=False)
class ImageSample:
    sample_id: str
    rgb: np.ndarray
    label: int
    depth_gt: np.ndarray
    parsing_gt: np.ndarray
    domain_id: int

    def __post_init__(self):
        rgb = np.asarray(self.rgb, dtype=np.float32)
        depth = np.asarray(self.depth_gt, dtype=np.float32)
        parsing = np.asarray(self.parsing_gt)
        where = f"sample {self.sample_id!r}"
        if rgb.ndim != 3 or rgb.shape[2] != 3:
            raise DataError(f"{where}: rgb must be HxWx3, got {rgb.shape}")
        if rgb.size and (rgb.min() < 0.0 or rgb.max() > 1.0):
            raise DataError(f"{where}: rgb values outside [0, 1]")
        if self.label not in (0, 1):
            raise DataError(f"{where}: label must be 0 (spoof) or 1 (live)")
        if depth.shape != (DEPTH_SIZE, DEPTH_SIZE):
            raise DataError(f"{where}: depth map must be {DEPTH_SIZE}x{DEPTH_SIZE}, got {depth.shape}")
        if depth.min() < 0.0 or depth.max() > 1.0:
            raise DataError(f"{where}: depth values outside [0, 1]")
        if self.label == 0 and np.any(depth != 0):
            raise DataError(f"{where}: spoof sample has a nonzero depth map")
        if parsing.shape != rgb.shape[:2]:
            raise DataError(f"{where}: parsing mask shape {parsing.shape} != image shape {rgb.shape[:2]}")
        if parsing.size and (parsing.min() < 0 or parsing.max() >= N_PARSING):
            raise DataError(f"{where}: parsing labels outside 0..{N_PARSING - 1}")
        object.__setattr__(self, "rgb", _frozen(rgb))
        object.__setattr__(self, "depth_gt", _frozen(depth))
        object.__setattr__(self, "parsing_gt", _frozen(parsing.astype(np.uint8)))
        object.__setattr__(self, "label", int(self.label))
        object.__setattr__(self, "domain_id", int(self.domain_id))

    def __eq__(self, other):
        if not isinstance(other, ImageSample):
            return NotImplemented
        return (
            self.sample_id == other.sample_id
            and self.label == other.label
            and self.domain_id == other.domain_id
            and np.array_equal(self.rgb, other.rgb)
            and np.array_equal(self.depth_gt, other.depth_gt)
            and np.array_equal(self.parsing_gt, other.parsing_gt)
        )

    __hash__ = None


@dataclass(frozen=True)
class DomainDataset:
    name: str
    samples: tuple[ImageSample, ...]
    split: str = "train"
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        if self.split not in SPLITS:
            raise DataError(f"dataset {self.name!r}: unknown split {self.split!r}")
        labels = {s.label for s in self.samples}
        if labels != {0, 1}:
            raise DataError(
                f"dataset {self.name!r} ({self.split}): needs at least one live and one spoof sample"
            )

    def __len__(self):
        return len(self.samples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    @property
    def domain_id(self) -> int:
        return self.samples[0].domain_id

    def arrays(self, size: int | None = None) -> "DomainArrays":
        """Stacked model inputs and targets, computed once per input size."""
        size = size or self.samples[0].rgb.shape[0]
        if size not in self._cache:
            self._cache[size] = DomainArrays.build(self.samples, size)
        return self._cache[size]


# ---------------------------------------------------------------------------
# colour conversion and model input
# ---------------------------------------------------------------------------


def _check_unit_range(arr: np.ndarray, what: str) -> None:
    if arr.shape[-1] != 3:
        raise DataError(f"{what} must have 3 channels in the last axis, got {arr.shape}")
    if arr.size and (np.nanmin(arr) < 0.0 or np.nanmax(arr) > 1.0 or np.isnan(arr).any()):
        raise DataError(f"{what} values must lie in [0, 1]")


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    """Hexcone RGB -> HSV with all three channels scaled to [0, 1]."""
    rgb = np.asarray(rgb, dtype=np.float64)
    _check_unit_range(rgb, "rgb")
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    delta = maxc - minc
    safe_delta = np.where(delta > 0, delta, 1.0)
    sat = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)

    rc = (maxc - r) / safe_delta
    gc = (maxc - g) / safe_delta
    bc = (maxc - b) / safe_delta
    hue = np.where(r == maxc, bc - gc, np.where(g == maxc, 2.0 + rc - bc, 4.0 + gc - rc))
    hue = np.where(delta > 0, (hue / 6.0) % 1.0, 0.0)
    return np.stack([hue, sat, maxc], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    hsv = np.asarray(hsv, dtype=np.float64)
    _check_unit_range(hsv, "hsv")
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    h6 = (h % 1.0) * 6.0
    sector = np.floor(h6).astype(np.int64) % 6
    frac = h6 - np.floor(h6)
    p = v * (1.0 - s)
    q = v * (1.0 - s * frac)
    t = v * (1.0 - s * (1.0 - frac))
    choices_r = [v, q, p, p, t, v]
    choices_g = [t, v, v, q, p, p]
    choices_b = [p, p, t, v, v, q]
    r = np.choose(sector, choices_r)
    g = np.choose(sector, choices_g)
    b = np.choose(sector, choices_b)
    return np.stack([r, g, b], axis=-1)


def resize_image(img: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of an H x W x C float image to size x size."""
    if img.shape[0] == size and img.shape[1] == size:
        return np.asarray(img, dtype=np.float32)
    t = torch.from_numpy(np.array(img, dtype=np.float32)).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    return np.clip(out[0].permute(1, 2, 0).numpy(), 0.0, 1.0)


def resize_mask(mask: np.ndarray, size: int) -> np.ndarray:
    """Nearest-neighbour resize that preserves label values."""
    if mask.shape == (size, size):
        return np.asarray(mask)
    rows = (np.arange(size) * mask.shape[0]) // size
    cols = (np.arange(size) * mask.shape[1]) // size
    return np.asarray(mask)[np.ix_(rows, cols)]


def make_model_input(sample: ImageSample, size: int | None = None) -> np.ndarray:
    """RGB (resized) in channels 0-2 and its HSV in channels 3-5."""
    rgb = sample.rgb if size is None else resize_image(sample.rgb, size)
    hsv = rgb_to_hsv(rgb)
    return np.concatenate([rgb, hsv.astype(np.float32)], axis=-1).astype(np.float32)


@dataclass(frozen=True)
class DomainArrays:
    inputs: np.ndarray  # N x 6 x S x S
    labels: np.ndarray  # N
    depth: np.ndarray  # N x 32 x 32
    parsing: np.ndarray  # N x S x S

    @classmethod
    def build(cls, samples: Sequence[ImageSample], size: int) -> "DomainArrays":
        inputs = np.stack([make_model_input(s, size).transpose(2, 0, 1) for s in samples])
        parsing = np.stack([resize_mask(s.parsing_gt, size) for s in samples]).astype(np.int64)
        return cls(
            inputs=_frozen(inputs),
            labels=_frozen(np.array([s.label for s in samples], dtype=np.int64)),
            depth=_frozen(np.stack([s.depth_gt for s in samples])),
            parsing=_frozen(parsing),
        )

    def take(self, idx: np.ndarray, domain_id: int = -1) -> "Batch":
        return Batch(
            inputs=self.inputs[idx],
            labels=self.labels[idx],
            depth=self.depth[idx],
            parsing=self.parsing[idx],
            domain_id=domain_id,
        )


@dataclass(frozen=True)
class Batch:
    """One domain's mini-batch in model layout (channels first)."""

    inputs: np.ndarray
    labels: np.ndarray
    depth: np.ndarray
    parsing: np.ndarray
    domain_id: int = -1

    def __len__(self):
        return len(self.labels)

    @property
    def n_live(self) -> int:
        return int(np.sum(self.labels == 1))

    @property
    def n_spoof(self) -> int:
        return int(np.sum(self.labels == 0))


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 64
    n_domains: int = 4
    samples_per_domain: int = 200
    live_fraction: float = 0.5
    seed: int = 0
    # per-domain shift parameters; None draws them from the seed
    hue_shifts: tuple[float, ...] | None = None
    blur_radii: tuple[float, ...] | None = None
    noise_sigmas: tuple[float, ...] | None = None
    spoof_periods: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.n_domains < 2:
            raise DataError("n_domains must be at least 2")
        if self.image_size <= 0 or self.image_size % 8:
            raise DataError(f"image_size must be a positive multiple of 8, got {self.image_size}")
        if not 0.0 < self.live_fraction < 1.0:
            raise DataError("live_fraction must lie strictly between 0 and 1")
        for name in ("hue_shifts", "blur_radii", "noise_sigmas", "spoof_periods"):
            values = getattr(self, name)
            if values is not None:
                if len(values) != self.n_domains:
                    raise DataError(f"{name} needs one value per domain ({self.n_domains})")
                object.__setattr__(self, name, tuple(float(v) for v in values))


@dataclass(frozen=True)
class DomainShift:
    hue_shift: float  # degrees
    blur_radius: float  # gaussian sigma in pixels
    noise_sigma: float
    spoof_period: float  # pixels
    spoof_amplitude: float
    background: tuple[float, float, float]


def domain_shift(cfg: SynthConfig, domain_index: int) -> DomainShift:
    rng = np.random.default_rng([cfg.seed, domain_index, 7])
    drawn = dict(
        hue_shift=rng.uniform(-10.0, 60.0),
        blur_radius=rng.uniform(0.0, 0.7),
        noise_sigma=rng.uniform(0.003, 0.012),
        spoof_period=rng.uniform(3.0, 7.0),
    )
    contrast = rng.uniform(0.10, 0.16)
    # skin and background hues stay clear of the red wrap-around of the hue channel
    bg_hsv = np.array([rng.uniform(0.12, 0.75), rng.uniform(0.2, 0.7), rng.uniform(0.3, 0.85)])
    background = tuple(float(c) for c in hsv_to_rgb(bg_hsv))
    explicit = dict(
        hue_shift=cfg.hue_shifts,
        blur_radius=cfg.blur_radii,
        noise_sigma=cfg.noise_sigmas,
        spoof_period=cfg.spoof_periods,
    )
    values = {k: (float(v[domain_index]) if v is not None else float(drawn[k])) for k, v in explicit.items()}
    # raw amplitude chosen so the grid keeps `contrast` after the domain's gaussian blur
    attenuation = math.exp(-2.0 * math.pi**2 * values["blur_radius"] ** 2 / values["spoof_period"] ** 2)
    return DomainShift(spoof_amplitude=float(contrast / attenuation), background=background, **values)


def _ellipse(u, v, cu, cv, au, av):
    return ((u - cu) / au) ** 2 + ((v - cv) / av) ** 2 < 1.0


def _face_depth(u, v):
    r2 = u**2 + v**2
    depth = np.where(r2 < 1.0, 0.85 * (1.0 - r2), 0.0)
    depth = depth + np.where(r2 < 1.0, 0.15 * np.exp(-(u**2 + (v - 0.12) ** 2) / 0.03), 0.0)
    return np.clip(depth, 0.0, 1.0)


def _render_live(rng: np.random.Generator, size: int, shift: DomainShift):
    """One live face: rgb image, 32x32 depth map, parsing mask."""
    cx, cy = rng.uniform(-0.06, 0.06, size=2)
    ax, ay = rng.uniform(0.42, 0.50), rng.uniform(0.56, 0.66)

    def face_coords(n):
        c = (np.arange(n) + 0.5) / n * 2.0 - 1.0
        yy, xx = np.meshgrid(c, c, indexing="ij")
        return (xx - cx) / ax, (yy - cy) / ay

    u, v = face_coords(size)
    face = u**2 + v**2 < 1.0
    eye_dx = rng.uniform(0.34, 0.42)
    eye_y = rng.uniform(-0.24, -0.16)
    mouth_y = rng.uniform(0.48, 0.56)

    parsing = np.zeros((size, size), dtype=np.uint8)
    skin = np.array([0.87, 0.68, 0.57]) * rng.uniform(0.65, 1.05)
    albedo = np.zeros((size, size, 3))

    def paint(mask, label, colour):
        parsing[mask] = label
        albedo[mask] = colour

    for side, label in ((-1, 7), (1, 8)):
        ear = _ellipse(u, v, side * 1.06, -0.05, 0.16, 0.26) & ~face
        paint(ear, label, skin * 0.9)
    paint(face, 1, skin)
    paint(face & _ellipse(u, v, 0.0, 0.12, 0.11, 0.2), 9, skin * 0.93)
    lips = face & _ellipse(u, v, 0.0, mouth_y, 0.3, 0.11)
    paint(lips & (v < mouth_y), 11, np.array([0.72, 0.32, 0.35]))
    paint(lips & (v >= mouth_y), 12, np.array([0.78, 0.36, 0.38]))
    paint(face & _ellipse(u, v, 0.0, mouth_y, 0.2, 0.06), 10, np.array([0.35, 0.08, 0.10]))
    frame = np.array([0.10, 0.10, 0.12]) * rng.uniform(0.5, 1.5)
    for side in (-1, 1):
        ring = _ellipse(u, v, side * eye_dx, eye_y, 0.28, 0.17) & ~_ellipse(
            u, v, side * eye_dx, eye_y, 0.21, 0.11
        )
        paint(face & ring, 6, frame)
    bridge = (np.abs(u) < eye_dx - 0.2) & (np.abs(v - eye_y) < 0.04)
    paint(face & bridge, 6, frame)
    brow = np.array([0.20, 0.14, 0.10]) * rng.uniform(0.6, 1.4)
    for side, label in ((-1, 2), (1, 3)):
        paint(face & _ellipse(u, v, side * eye_dx, eye_y - 0.24, 0.22, 0.065), label, brow)
    iris = rng.uniform(0.15, 0.5, size=3)
    for side, label in ((-1, 4), (1, 5)):
        paint(face & _ellipse(u, v, side * eye_dx, eye_y, 0.16, 0.085), label, 0.5 * iris + 0.4)

    depth_full = _face_depth(u, v)
    gy, gx = np.gradient(depth_full * size * 0.25)
    normals = np.stack([-gx, -gy, np.ones_like(gx)], axis=-1)
    normals /= np.linalg.norm(normals, axis=-1, keepdims=True)
    light = np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.3), 1.0])
    light /= np.linalg.norm(light)
    shade = 0.55 + 0.45 * np.clip(normals @ light, 0.0, 1.0)

    c = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    yy, xx = np.meshgrid(c, c, indexing="ij")
    bg = np.asarray(shift.background) * rng.uniform(0.8, 1.2)
    bg = bg[None, None, :] * (1.0 + 0.15 * (rng.uniform(-1, 1) * xx + rng.uniform(-1, 1) * yy))[..., None]
    person = parsing > 0
    rgb = np.where(person[..., None], albedo * shade[..., None], bg)

    du, dv = face_coords(DEPTH_SIZE)
    depth32 = _face_depth(du, dv)
    return np.clip(rgb, 0.0, 1.0), depth32, parsing


def _spoof_texture(rng: np.random.Generator, size: int, shift: DomainShift) -> np.ndarray:
    period = shift.spoof_period * rng.uniform(0.75, 1.25)
    theta = rng.uniform(0.0, math.pi)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    a = xx * math.cos(theta) + yy * math.sin(theta)
    b = -xx * math.sin(theta) + yy * math.cos(theta)
    phase = rng.uniform(0.0, 2 * math.pi, size=2)
    return 0.5 * (np.cos(2 * math.pi * a / period + phase[0]) + np.cos(2 * math.pi * b / period + phase[1]))


def _apply_shift(rgb: np.ndarray, rng: np.random.Generator, shift: DomainShift) -> np.ndarray:
    if shift.hue_shift:
        hsv = rgb_to_hsv(rgb)
        hsv[..., 0] = (hsv[..., 0] + shift.hue_shift / 360.0) % 1.0
        rgb = hsv_to_rgb(hsv)
    if shift.blur_radius > 0:
        rgb = ndimage.gaussian_filter(rgb, sigma=(shift.blur_radius, shift.blur_radius, 0), mode="nearest")
    if shift.noise_sigma > 0:
        rgb = rgb + rng.normal(0.0, shift.noise_sigma, size=rgb.shape)
    return np.clip(rgb, 0.0, 1.0)


def generate_synthetic_domain(cfg: SynthConfig, domain_index: int, split: str = "train") -> DomainDataset:
    """Render one domain; deterministic in (cfg.seed, domain_index)."""
    if cfg.image_size % 8:
        raise DataError(f"image_size must be a multiple of 8, got {cfg.image_size}")
    shift = domain_shift(cfg, domain_index)
    rng = np.random.default_rng([cfg.seed, domain_index])
    n_live = max(2, int(round(cfg.samples_per_domain * cfg.live_fraction)))
    n_spoof = max(1, cfg.samples_per_domain - n_live)
    samples = []
    for k in range(n_live + n_spoof):
        live = k < n_live
        rgb, depth, parsing = _render_live(rng, cfg.image_size, shift)
        if not live:
            texture = _spoof_texture(rng, cfg.image_size, shift)
            rgb = np.clip(rgb * (1.0 + shift.spoof_amplitude * texture[..., None]), 0.0, 1.0)
            depth = np.zeros_like(depth)
        rgb = _apply_shift(rgb, rng, shift)
        samples.append(
            ImageSample(
                sample_id=f"d{domain_index}_{k:05d}",
                rgb=_from_u8(_to_u8(rgb)),
                label=int(live),
                depth_gt=_from_u8(_to_u8(depth)),
                parsing_gt=parsing,
                domain_id=domain_index,
            )
        )
    return DomainDataset(name=f"synth{domain_index}", samples=tuple(samples), split=split)


def carve_split(dataset: DomainDataset, fraction: float, seed: int, split: str = "dev"):
    """Deterministically move `fraction` of each class into a second split."""
    rng = np.random.default_rng([seed, dataset.domain_id, 11])
    labels = dataset.labels
    held = set()
    for cls in (0, 1):
        idx = np.flatnonzero(labels == cls)
        n = max(1, int(round(fraction * len(idx))))
        if n >= len(idx):
            raise DataError(f"dataset {dataset.name!r}: class {cls} too small to carve a {split} split")
        held.update(rng.choice(idx, size=n, replace=False).tolist())
    keep = [s for i, s in enumerate(dataset.samples) if i not in held]
    out = [s for i, s in enumerate(dataset.samples) if i in held]
    return (
        DomainDataset(dataset.name, tuple(keep), dataset.split),
        DomainDataset(dataset.name, tuple(out), split),
    )


# ---------------------------------------------------------------------------
# on-disk layout: <root>/<domain>/manifest.json + PNG files
# ---------------------------------------------------------------------------


def save_domain(root: str | Path, datasets: Sequence[DomainDataset]) -> Path:
    """Write the splits of one domain into `<root>/<name>/`."""
    names = {d.name for d in datasets}
    if len(names) != 1:
        raise DataError(f"save_domain expects splits of a single domain, got {sorted(names)}")
    domain_dir = Path(root) / names.pop()
    for sub in ("images", "depth", "parsing"):
        (domain_dir / sub).mkdir(parents=True, exist_ok=True)
    records = []
    for ds in datasets:
        for s in ds.samples:
            rec = {
                "id": s.sample_id,
                "split": ds.split,
                "label": s.label,
                "domain_id": s.domain_id,
                "image": f"images/{s.sample_id}.png",
                "depth": f"depth/{s.sample_id}.png",
                "parsing": f"parsing/{s.sample_id}.png",
            }
            Image.fromarray(_to_u8(s.rgb), mode="RGB").save(domain_dir / rec["image"])
            Image.fromarray(_to_u8(s.depth_gt), mode="L").save(domain_dir / rec["depth"])
            Image.fromarray(s.parsing_gt.astype(np.uint8), mode="L").save(domain_dir / rec["parsing"])
            records.append(rec)
    manifest = {"name": domain_dir.name, "records": records}
    (domain_dir / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return domain_dir


def _read_manifest(domain_dir: Path) -> dict:
    path = domain_dir / "manifest.json"
    if not path.is_file():
        raise DataError(f"no manifest.json in {domain_dir}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed manifest {path}: {exc}") from exc
    records = manifest.get("records") if isinstance(manifest, dict) else None
    if not isinstance(records, list):
        raise DataError(f"malformed manifest {path}: missing 'records' list")
    required = {"id", "split", "label", "image", "depth", "parsing"}
    for i, rec in enumerate(records):
        if not isinstance(rec, dict) or not required <= rec.keys():
            raise DataError(f"malformed manifest {path}: record {i} lacks one of {sorted(required)}")
    return manifest


def _read_png(domain_dir: Path, rel: str, sample_id: str, mode: str) -> np.ndarray:
    path = domain_dir / rel
    if not path.is_file():
        raise DataError(f"sample {sample_id!r}: missing file {path}")
    with Image.open(path) as im:
        if mode == "L" and im.mode not in ("L", "P"):
            raise DataError(f"sample {sample_id!r}: {path} must be 8-bit grayscale, got mode {im.mode}")
        return np.asarray(im.convert(mode))


def load_domain_splits(path: str | Path, domain_id: int | None = None) -> dict[str, DomainDataset]:
    domain_dir = Path(path)
    manifest = _read_manifest(domain_dir)
    name = manifest.get("name", domain_dir.name)
    by_split: dict[str, list[ImageSample]] = {}
    for rec in manifest["records"]:
        sid = str(rec["id"])
        rgb = _from_u8(_read_png(domain_dir, rec["image"], sid, "RGB"))
        depth = _from_u8(_read_png(domain_dir, rec["depth"], sid, "L"))
        parsing = _read_png(domain_dir, rec["parsing"], sid, "L")
        did = domain_id if domain_id is not None else int(rec.get("domain_id", 0))
        sample = ImageSample(sid, rgb, int(rec["label"]), depth, parsing, did)
        by_split.setdefault(rec["split"], []).append(sample)
    return {split: DomainDataset(name, tuple(s), split) for split, s in by_split.items()}


def load_domain(path: str | Path, split: str | None = None, domain_id: int | None = None) -> DomainDataset:
    """Load a domain directory; `split=None` merges every split into one dataset."""
    splits = load_domain_splits(path, domain_id)
    if split is None:
        if len(splits) == 1:
            return next(iter(splits.values()))
        name = next(iter(splits.values())).name
        merged = tuple(s for ds in splits.values() for s in ds.samples)
        return DomainDataset(name, merged, "test")
    if split not in splits:
        raise DataError(f"{path}: no records in split {split!r} (have {sorted(splits)})")
    return splits[split]


# ---------------------------------------------------------------------------
# episodes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EpisodeSplit:
    """Meta-train batches for N-1 domains and the meta-test batch for one.

    Domain ids are positions in the list handed to `sample_episode`.
    """

    meta_train: tuple[tuple[int, Batch], ...]
    meta_test: tuple[int, Batch]

    def __post_init__(self):
        test_id = self.meta_test[0]
        if any(d == test_id for d, _ in self.meta_train):
            raise DataError("meta-test domain also appears among meta-train domains")
        for d, b in (*self.meta_train, self.meta_test):
            if b.n_live < 2 or b.n_spoof < 1:
                raise DataError(f"domain {d}: batch needs >=2 live and >=1 spoof samples")


def sample_episode(
    domains: Sequence[DomainDataset],
    batch_size: int,
    rng: np.random.Generator,
    size: int | None = None,
) -> EpisodeSplit:
    """Pick a meta-test domain uniformly and draw a balanced batch per domain."""
    if len(domains) < 2:
        raise DataError("episode sampling needs at least two domains")
    n_live = (batch_size + 1) // 2
    n_spoof = batch_size - n_live
    if n_live < 2 or n_spoof < 1:
        raise DataError(f"batch_size {batch_size} cannot hold 2 live and 1 spoof samples")
    test_id = int(rng.integers(len(domains)))
    batches = []
    for d, ds in enumerate(domains):
        arr = ds.arrays(size)
        lives = np.flatnonzero(arr.labels == 1)
        spoofs = np.flatnonzero(arr.labels == 0)
        if len(lives) < 2 or len(spoofs) < 1:
            raise DataError(f"domain {ds.name!r} cannot supply 2 live and 1 spoof samples")
        idx = np.concatenate(
            [
                rng.choice(lives, n_live, replace=len(lives) < n_live),
                rng.choice(spoofs, n_spoof, replace=len(spoofs) < n_spoof),
            ]
        )
        batches.append(arr.take(idx, d))
    meta_train = tuple((d, b) for d, b in enumerate(batches) if d != test_id)
    return EpisodeSplit(meta_train=meta_train, meta_test=(test_id, batches[test_id]))
