"""Deterministic gradually-worsening weather corruption of image datasets.

Two corruption families over float images in [0, 1]:

* cloud cover: a multi-octave value-noise alpha map, thresholded by a
  density level, blends a near-white cloud color into the scene;
* snowfall: global brightness scaling plus seeded white streaks.

Each corrupted image is a pure function of (image, params, seed, image_id);
the per-image RNG is seeded with ``seed XOR image_id`` so corruption varies
across images but is stable across runs.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from .datasets import ImageDataset, load_dataset, save_dataset
from .errors import DatasetValidationError, InputValidationError

CLOUD_OCTAVES = 4
CLOUD_PERSISTENCE = 0.5
CLOUD_EDGE_SOFTNESS = 0.25  # noise-units width of the coverage ramp


@dataclasses.dataclass(frozen=True)
class CloudParams:
    density: float  # coverage fraction knob in [0, 1]
    size_scale: float  # base noise wavelength in pixels
    opacity: float  # alpha of fully covered pixels, in [0, 1]

    def validate(self):
        vals = (self.density, self.size_scale, self.opacity)
        if not all(np.isfinite(v) for v in vals):
            raise InputValidationError(f"non-finite cloud params: {self}")
        if not 0.0 <= self.density <= 1.0:
            raise InputValidationError(f"cloud density must be in [0,1]: {self.density}")
        if self.size_scale <= 0:
            raise InputValidationError(f"size_scale must be positive: {self.size_scale}")
        if not 0.0 <= self.opacity <= 1.0:
            raise InputValidationError(f"opacity must be in [0,1]: {self.opacity}")


@dataclasses.dataclass(frozen=True)
class SnowParams:
    flake_density: float  # flakes per kilopixel
    flake_length: float  # streak length in pixels
    brightness: float  # multiplicative scene factor in (0, 1]

    def validate(self):
        vals = (self.flake_density, self.flake_length, self.brightness)
        if not all(np.isfinite(v) for v in vals):
            raise InputValidationError(f"non-finite snow params: {self}")
        if self.flake_density < 0:
            raise InputValidationError(f"flake_density must be >= 0: {self.flake_density}")
        if self.flake_length <= 0:
            raise InputValidationError(f"flake_length must be positive: {self.flake_length}")
        if not 0.0 < self.brightness <= 1.0:
            raise InputValidationError(f"brightness must be in (0,1]: {self.brightness}")


@dataclasses.dataclass
class DegradationSchedule:
    """Ordered corruption levels of one kind, least to most severe."""

    kind: str  # "cloud_cover" | "snowfall"
    levels: list  # list[CloudParams] | list[SnowParams]
    seed: int

    def __post_init__(self):
        if self.kind not in ("cloud_cover", "snowfall"):
            raise InputValidationError(f"unknown degradation kind: {self.kind}")
        if not self.levels:
            raise InputValidationError("schedule needs at least one level")
        for lv in self.levels:
            lv.validate()
        if self.kind == "cloud_cover":
            self._check_increasing([lv.density for lv in self.levels], "density")
            self._check_increasing([lv.size_scale for lv in self.levels], "size_scale")
        else:
            self._check_increasing([lv.flake_density for lv in self.levels], "flake_density")
            self._check_increasing([-lv.brightness for lv in self.levels], "-brightness")

    @staticmethod
    def _check_increasing(values, name):
        if any(b <= a for a, b in zip(values, values[1:])):
            raise InputValidationError(f"{name} must be strictly increasing across levels")

    @property
    def num_levels(self) -> int:
        return len(self.levels)


def default_cloud_schedule(seed: int = 0) -> DegradationSchedule:
    """Seven cloud-cover levels; coverage, blob size and opacity all grow."""
    densities = [0.18, 0.30, 0.42, 0.54, 0.66, 0.78, 0.90]
    sizes = [8.0, 10.0, 12.0, 14.0, 16.0, 18.0, 20.0]
    opacities = [0.60, 0.66, 0.72, 0.78, 0.84, 0.90, 0.96]
    levels = [CloudParams(d, s, o) for d, s, o in zip(densities, sizes, opacities)]
    return DegradationSchedule("cloud_cover", levels, seed)


def default_snow_schedule(seed: int = 0) -> DegradationSchedule:
    """Five snowfall levels; flake density grows while the scene darkens."""
    flake_densities = [1.0, 2.0, 3.5, 5.5, 8.0]
    flake_lengths = [4.0, 5.0, 6.0, 8.0, 10.0]
    brightnesses = [0.92, 0.84, 0.76, 0.68, 0.60]
    levels = [
        SnowParams(d, l, b)
        for d, l, b in zip(flake_densities, flake_lengths, brightnesses)
    ]
    return DegradationSchedule("snowfall", levels, seed)


def _validate_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[-1] != 3:
        raise InputValidationError(f"image must be (H, W, 3), got {image.shape}")
    if not np.isfinite(image).all():
        raise InputValidationError("image contains non-finite pixel values")
    if image.min() < 0.0 or image.max() > 1.0:
        raise InputValidationError("image values must lie in [0, 1]")
    return image


def _image_rng(seed: int, image_id: int) -> np.random.Generator:
    return np.random.default_rng(int(seed) ^ int(image_id))


def _value_noise(rng: np.random.Generator, h: int, w: int, wavelength: float) -> np.ndarray:
    """Bilinearly interpolated random lattice, smoothstepped, values in [0, 1]."""
    gh = int(np.ceil(h / wavelength)) + 1
    gw = int(np.ceil(w / wavelength)) + 1
    grid = rng.uniform(0.0, 1.0, size=(gh + 1, gw + 1))
    ys = np.arange(h) / wavelength
    xs = np.arange(w) / wavelength
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    ty = (ys - y0)[:, None]
    tx = (xs - x0)[None, :]
    ty = ty * ty * (3.0 - 2.0 * ty)
    tx = tx * tx * (3.0 - 2.0 * tx)
    g00 = grid[np.ix_(y0, x0)]
    g01 = grid[np.ix_(y0, x0 + 1)]
    g10 = grid[np.ix_(y0 + 1, x0)]
    g11 = grid[np.ix_(y0 + 1, x0 + 1)]
    top = g00 * (1.0 - tx) + g01 * tx
    bot = g10 * (1.0 - tx) + g11 * tx
    return top * (1.0 - ty) + bot * ty


def _cloud_noise(rng: np.random.Generator, h: int, w: int, base_wavelength: float) -> np.ndarray:
    total = np.zeros((h, w))
    amp, amp_sum = 1.0, 0.0
    for octave in range(CLOUD_OCTAVES):
        wl = max(base_wavelength / (2.0**octave), 1.0)
        total += amp * _value_noise(rng, h, w, wl)
        amp_sum += amp
        amp *= CLOUD_PERSISTENCE
    return total / amp_sum


def synth_cloud(
    image: np.ndarray, params: CloudParams, seed: int, image_id: int
) -> np.ndarray:
    """Blend a thresholded value-noise cloud layer into the image."""
    image = _validate_image(image)
    params.validate()
    if params.density == 0.0 or params.opacity == 0.0:
        return image.copy()

    h, w = image.shape[:2]
    rng = _image_rng(seed, image_id)
    noise = _cloud_noise(rng, h, w, params.size_scale)

    # Coverage ramps from 0 at density 0 to full at density 1; the threshold
    # is placed so density 1 saturates every pixel regardless of noise value.
    threshold = 1.0 - params.density * (1.0 + CLOUD_EDGE_SOFTNESS)
    coverage = np.clip((noise - threshold) / CLOUD_EDGE_SOFTNESS, 0.0, 1.0)
    alpha = (params.opacity * coverage)[..., None].astype(np.float32)
    cloud_color = (0.92 + 0.08 * noise)[..., None].astype(np.float32)

    out = image * (1.0 - alpha) + cloud_color * alpha
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def synth_snow(
    image: np.ndarray, params: SnowParams, seed: int, image_id: int
) -> np.ndarray:
    """Darken the scene and rasterize white falling streaks onto it."""
    image = _validate_image(image)
    params.validate()
    h, w = image.shape[:2]
    n_flakes = int(round(params.flake_density * h * w / 1000.0))
    if n_flakes == 0 and params.brightness == 1.0:
        return image.copy()

    out = (image * np.float32(params.brightness)).astype(np.float32)
    rng = _image_rng(seed, image_id)
    half = params.flake_length / 2.0
    n_pts = max(int(np.ceil(params.flake_length)) * 2, 2)
    ts = np.linspace(-half, half, n_pts)
    for _ in range(n_flakes):
        cy = rng.uniform(0, h)
        cx = rng.uniform(0, w)
        angle = rng.uniform(-0.5, 0.5)  # radians off vertical fall
        value = np.float32(rng.uniform(0.85, 1.0))
        ys = np.rint(cy + ts * np.cos(angle)).astype(int)
        xs = np.rint(cx + ts * np.sin(angle)).astype(int)
        ok = (ys >= 0) & (ys < h) & (xs >= 0) & (xs < w)
        out[ys[ok], xs[ok]] = np.maximum(out[ys[ok], xs[ok]], value)
    return out


def degrade_image(
    image: np.ndarray, kind: str, params, seed: int, image_id: int
) -> np.ndarray:
    if kind == "cloud_cover":
        return synth_cloud(image, params, seed, image_id)
    if kind == "snowfall":
        return synth_snow(image, params, seed, image_id)
    raise InputValidationError(f"unknown degradation kind: {kind}")


@dataclasses.dataclass
class DomainSequence:
    """Clean source plus its progressively degraded copies.

    Intermediate and target labels are carried only for evaluation; the
    adaptation loop never reads them.
    """

    source: ImageDataset
    intermediates: list
    target: ImageDataset
    manifest: dict

    @property
    def domains(self) -> list:
        return [*self.intermediates, self.target]


def build_domain_sequence(
    clean: ImageDataset, schedule: DegradationSchedule
) -> DomainSequence:
    """Corrupt every image at every level; the most severe level is the target."""
    clean.validate_nonempty_classes()
    domains = []
    for params in schedule.levels:
        degraded = np.stack(
            [
                degrade_image(img, schedule.kind, params, schedule.seed, int(img_id))
                for img, img_id in zip(clean.images, clean.image_ids)
            ]
        )
        domains.append(
            ImageDataset(degraded, clean.labels.copy(), list(clean.class_names), clean.image_ids.copy())
        )
    manifest = {
        "kind": schedule.kind,
        "seed": int(schedule.seed),
        "levels": [dataclasses.asdict(lv) for lv in schedule.levels],
        "domain_names": [f"level_{k + 1}" for k in range(schedule.num_levels)],
        "target_domain": f"level_{schedule.num_levels}",
        "class_names": list(clean.class_names),
        "num_images_per_domain": len(clean),
    }
    return DomainSequence(clean, domains[:-1], domains[-1], manifest)


def save_domain_sequence(sequence: DomainSequence, root: Path | str) -> Path:
    """Write one directory tree per degraded domain plus ``manifest.json``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for name, domain in zip(sequence.manifest["domain_names"], sequence.domains):
        save_dataset(domain, root / name)
    manifest_path = root / "manifest.json"
    manifest_path.write_text(json.dumps(sequence.manifest, indent=2, sort_keys=True))
    return manifest_path


def load_domain_sequence(root: Path | str, clean: ImageDataset) -> DomainSequence:
    """Re-assemble a sequence previously written by :func:`save_domain_sequence`."""
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise DatasetValidationError(f"missing manifest: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    domains = [
        load_dataset(root / name, manifest["class_names"])
        for name in manifest["domain_names"]
    ]
    return DomainSequence(clean, domains[:-1], domains[-1], manifest)
