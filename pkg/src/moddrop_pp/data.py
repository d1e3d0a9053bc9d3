"""Synthetic multi-modal 2.5D lesion data, KDE intensity normalization, dataset I/O.

Each subject is a stack of ``slices`` adjacent slices per modality with a
binary lesion label for the center slice. Lesions are ellipsoids centered on
the center slice, so every label is nonempty. Modality order is fixed:
T1-, FLAIR-, T2- and CE-analog, then ``M4``, ``M5``... for K > 4.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DegenerateError, FormatError
from .moddrop import make_rng
from .tensor import Tensor, decode_mdt1, encode_mdt1, to_float32_precision

log = logging.getLogger(__name__)

CANONICAL_MODALITIES = ("T1", "FLAIR", "T2", "CE")
MANIFEST_NAME = "manifest.txt"
MANIFEST_FORMAT = "moddrop-dataset-1"
KDE_GRID = 256


def modality_names(k: int) -> list[str]:
    return [CANONICAL_MODALITIES[j] if j < len(CANONICAL_MODALITIES) else f"M{j}" for j in range(k)]


@dataclass(frozen=True)
class Lesion:
    cy: float
    cx: float
    ry: float
    rx: float
    theta: float
    rz: float

    def cross_section(self, dz: float) -> float:
        """In-plane radius factor of the ellipsoid at slice offset ``dz``."""
        if abs(dz) >= self.rz:
            return 0.0
        return math.sqrt(1.0 - (dz / self.rz) ** 2)

    def rasterize(self, h: int, w: int, dz: float = 0.0) -> np.ndarray:
        s = self.cross_section(dz)
        if s == 0.0:
            return np.zeros((h, w), dtype=bool)
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        dy, dx = yy - self.cy, xx - self.cx
        c, sn = math.cos(self.theta), math.sin(self.theta)
        a = (c * dy + sn * dx) / (self.ry * s)
        b = (-sn * dy + c * dx) / (self.rx * s)
        return a * a + b * b <= 1.0


@dataclass
class MultiModalSample:
    subject_id: str
    modalities: list[np.ndarray]
    label: np.ndarray
    lesions: list[Lesion] = field(default_factory=list)
    seed: int = 0

    @property
    def k(self) -> int:
        return len(self.modalities)

    def stacked(self) -> np.ndarray:
        return np.concatenate(self.modalities, axis=0)


@dataclass
class SynthConfig:
    k: int = 4
    size: int = 64
    slices: int = 3
    lesions: tuple[int, int] = (2, 5)
    lesion_radius: tuple[float, float] = (2.0, 5.0)
    # lesion intensity increase relative to tissue level, per modality
    contrast: list[float] = field(default_factory=lambda: [0.35, 0.9, 0.5, 0.3])
    # lesion-like blobs that are not lesions, per modality
    distractor_amplitude: list[float] = field(default_factory=lambda: [0.3, 0.0, 0.45, 0.3])
    distractors: tuple[int, int] = (1, 4)
    tissue_level: list[float] = field(default_factory=lambda: [0.8, 1.0, 1.2, 0.9])
    texture_scale: float = 0.12
    texture_sigma: float = 3.0
    noise_sigma: float = 0.08
    prevalence_range: tuple[float, float] = (0.002, 0.25)
    normalize: bool = True
    seed: int = 0

    def _per_modality(self, values, name) -> list[float]:
        if len(values) < self.k:
            raise ConfigError(f"synth.{name} needs {self.k} values, got {len(values)}")
        return [float(v) for v in values[: self.k]]

    def validate(self) -> None:
        if self.k < 1 or self.k > 16:
            raise ConfigError(f"synth.k must be in [1, 16], got {self.k}")
        if self.slices < 1 or self.slices % 2 == 0:
            raise ConfigError("synth.slices must be a positive odd number")
        lo, hi = self.lesions
        if lo < 1 or hi < lo:
            raise ConfigError(f"synth.lesions range {self.lesions} invalid (need 1 <= lo <= hi)")
        rlo, rhi = self.lesion_radius
        if rlo <= 0 or rhi < rlo or 2 * rhi + 2 >= self.size:
            raise ConfigError(f"synth.lesion_radius {self.lesion_radius} invalid for size {self.size}")
        if self.size < 8:
            raise ConfigError("synth.size must be at least 8")
        plo, phi = self.prevalence_range
        if not 0.0 <= plo < phi <= 1.0:
            raise ConfigError("synth.prevalence_range must satisfy 0 <= lo < hi <= 1")
        for name in ("contrast", "distractor_amplitude", "tissue_level"):
            self._per_modality(getattr(self, name), name)
        if min(self._per_modality(self.tissue_level, "tissue_level")) <= 0:
            raise ConfigError("synth.tissue_level must be positive")
        if self.noise_sigma < 0 or self.texture_scale < 0:
            raise ConfigError("synth noise and texture scales must be non-negative")


# ---------------------------------------------------------------- KDE normalization


def _silverman(x: np.ndarray) -> float:
    std = float(x.std())
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(std, (q75 - q25) / 1.34) if q75 > q25 else std
    return 0.9 * spread * x.size ** (-0.2)


def kde_mode(values: np.ndarray, bandwidth="silverman", grid_points: int = KDE_GRID,
             max_samples: int = 20000) -> float:
    """Location of the highest peak of a Gaussian KDE, refined by a parabola fit."""
    x = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = float(x.min()), float(x.max())
    if hi <= lo:
        raise DegenerateError("constant intensities have no density mode")
    if x.size > max_samples:
        x = np.sort(x)[:: int(math.ceil(x.size / max_samples))]
    if bandwidth == "silverman":
        h = _silverman(x)
    else:
        h = float(bandwidth)
    if not h > 0:
        raise DegenerateError("KDE bandwidth collapsed to zero")
    grid = np.linspace(lo, hi, grid_points)
    density = np.zeros(grid_points)
    for chunk in np.array_split(x, max(1, x.size // 4096)):
        z = (grid[:, None] - chunk[None, :]) / h
        density += np.exp(-0.5 * z * z).sum(axis=1)
    i = int(np.argmax(density))
    if 0 < i < grid_points - 1:
        y0, y1, y2 = density[i - 1], density[i], density[i + 1]
        curv = y0 - 2.0 * y1 + y2
        if curv < 0:
            return float(grid[i] + 0.5 * (y0 - y2) / curv * (grid[1] - grid[0]))
    return float(grid[i])


def kde_normalize(image, bandwidth="silverman"):
    """Divide an image by the mode of its foreground intensity density.

    Foreground is the strictly positive voxels (all voxels if none are).
    Accepts and returns either a Tensor or an array.
    """
    arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if arr.size == 0:
        raise DegenerateError("cannot normalize an empty image")
    fg = arr[arr > 0]
    if fg.size < 2 or fg.max() <= fg.min():
        fg = arr.ravel()
    if fg.max() <= fg.min():
        raise DegenerateError("cannot normalize a constant image")
    mode = kde_mode(fg, bandwidth)
    if mode <= 0:
        raise DegenerateError(f"density mode {mode} is not positive")
    out = arr / mode
    return Tensor(out) if isinstance(image, Tensor) else out


# ---------------------------------------------------------------- generation


def _draw_lesions(cfg: SynthConfig, rng: np.random.Generator, n: int) -> list[Lesion]:
    rlo, rhi = cfg.lesion_radius
    margin = rhi + 1
    out = []
    for _ in range(n):
        out.append(Lesion(
            cy=float(rng.uniform(margin, cfg.size - 1 - margin)),
            cx=float(rng.uniform(margin, cfg.size - 1 - margin)),
            ry=float(rng.uniform(rlo, rhi)),
            rx=float(rng.uniform(rlo, rhi)),
            theta=float(rng.uniform(0.0, math.pi)),
            rz=float(rng.uniform(0.6, 1.0) * (cfg.slices // 2 + 1)),
        ))
    return out


def _lesion_volume(lesions: list[Lesion], cfg: SynthConfig) -> np.ndarray:
    c = cfg.slices // 2
    vol = np.zeros((cfg.slices, cfg.size, cfg.size), dtype=bool)
    for les in lesions:
        for z in range(cfg.slices):
            vol[z] |= les.rasterize(cfg.size, cfg.size, z - c)
    return vol


def _smooth_field(rng, shape, sigma) -> np.ndarray:
    field_ = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=(1.0, sigma, sigma), mode="reflect")
    std = field_.std()
    return field_ / std if std > 0 else field_


def _render_modality(cfg: SynthConfig, j: int, lesion_vol: np.ndarray, rng) -> np.ndarray:
    shape = (cfg.slices, cfg.size, cfg.size)
    level = cfg._per_modality(cfg.tissue_level, "tissue_level")[j]
    img = level * (1.0 + cfg.texture_scale * _smooth_field(rng, shape, cfg.texture_sigma))
    amp = cfg._per_modality(cfg.distractor_amplitude, "distractor_amplitude")[j]
    n_distract = int(rng.integers(cfg.distractors[0], cfg.distractors[1] + 1))
    blobs = _draw_lesions(cfg, rng, n_distract)
    if amp != 0.0 and blobs:
        img = img + level * amp * _lesion_volume(blobs, cfg)
    contrast = cfg._per_modality(cfg.contrast, "contrast")[j]
    if contrast != 0.0:
        img = img + level * contrast * lesion_vol
    if cfg.noise_sigma > 0:
        img = img + level * cfg.noise_sigma * rng.standard_normal(shape)
    img = np.maximum(img, 1e-3 * level)
    if cfg.normalize:
        img = kde_normalize(img)
    return to_float32_precision(img)


def generate_subject(cfg: SynthConfig, index: int) -> MultiModalSample:
    cfg.validate()
    geo_rng = make_rng(cfg.seed, index, 0)
    plo, phi = cfg.prevalence_range
    area = cfg.size * cfg.size
    for _ in range(100):
        n = int(geo_rng.integers(cfg.lesions[0], cfg.lesions[1] + 1))
        lesions = _draw_lesions(cfg, geo_rng, n)
        vol = _lesion_volume(lesions, cfg)
        label = vol[cfg.slices // 2]
        if plo <= label.sum() / area <= phi:
            break
    else:
        raise ConfigError("could not place lesions within synth.prevalence_range; adjust radius or count")
    mods = [_render_modality(cfg, j, vol, make_rng(cfg.seed, index, 1 + j)) for j in range(cfg.k)]
    return MultiModalSample(f"subject_{index:03d}", mods, label.copy(), lesions, seed=cfg.seed)


def generate_dataset(cfg: SynthConfig, n_subjects: int) -> list[MultiModalSample]:
    if n_subjects < 1:
        raise ConfigError("n_subjects must be >= 1")
    cfg.validate()
    return [generate_subject(cfg, i) for i in range(n_subjects)]


# ---------------------------------------------------------------- dataset files


def _format_lesions(lesions: list[Lesion]) -> str:
    return ";".join(":".join(repr(v) for v in (l.cy, l.cx, l.ry, l.rx, l.theta, l.rz)) for l in lesions)


def _parse_lesions(text: str) -> list[Lesion]:
    if not text:
        return []
    return [Lesion(*(float(v) for v in item.split(":"))) for item in text.split(";")]


def save_dataset(path, dataset: list[MultiModalSample]) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    if not dataset:
        raise ConfigError("refusing to save an empty dataset")
    names = modality_names(dataset[0].k)
    lines = [f"format={MANIFEST_FORMAT}", f"modalities={','.join(names)}", f"subjects={len(dataset)}"]
    for i, s in enumerate(dataset):
        sub = root / s.subject_id
        sub.mkdir(exist_ok=True)
        prefix = f"subject.{i}"
        lines += [f"{prefix}.id={s.subject_id}", f"{prefix}.seed={s.seed}",
                  f"{prefix}.shape={','.join(map(str, s.modalities[0].shape))}"]
        for name, stack in zip(names, s.modalities):
            rel = f"{s.subject_id}/{name}.mdt"
            (root / rel).write_bytes(encode_mdt1(stack))
            lines.append(f"{prefix}.modality.{name}={rel}")
        rel = f"{s.subject_id}/label.mdt"
        (root / rel).write_bytes(encode_mdt1(s.label.astype(np.float64)))
        lines.append(f"{prefix}.label={rel}")
        lines.append(f"{prefix}.lesions={_format_lesions(s.lesions)}")
    (root / MANIFEST_NAME).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> dict[str, str]:
    entries = {}
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"manifest line {lineno} is not key=value: {line!r}")
        key, value = line.split("=", 1)
        entries[key.strip()] = value.strip()
    return entries


def _read_mdt(path: Path) -> np.ndarray:
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    try:
        arr, end = decode_mdt1(buf)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}", exc.offset) from None
    if end != len(buf):
        raise FormatError(f"{path}: trailing bytes after tensor payload", end)
    return arr


def load_dataset(path) -> list[MultiModalSample]:
    root = Path(path)
    manifest = root / MANIFEST_NAME
    if not manifest.is_file():
        raise FileNotFoundError(f"no dataset manifest at {manifest}")
    m = read_manifest(manifest)
    if m.get("format") != MANIFEST_FORMAT:
        raise FormatError(f"{manifest}: unknown dataset format {m.get('format')!r}")
    stored = m["modalities"].split(",")
    canonical = modality_names(len(stored))
    if sorted(stored) != sorted(canonical):
        raise FormatError(f"{manifest}: modalities {stored} do not match expected names {canonical}")
    out = []
    for i in range(int(m["subjects"])):
        prefix = f"subject.{i}"
        try:
            shape = tuple(int(v) for v in m[f"{prefix}.shape"].split(","))
            mods = [_read_mdt(root / m[f"{prefix}.modality.{name}"]) for name in canonical]
            label = _read_mdt(root / m[f"{prefix}.label"])
            sid, seed = m[f"{prefix}.id"], int(m[f"{prefix}.seed"])
        except KeyError as exc:
            raise FormatError(f"{manifest}: missing key {exc.args[0]}") from None
        for name, arr in zip(canonical, mods):
            if arr.shape != shape:
                raise FormatError(f"{sid}/{name}: shape {arr.shape} differs from manifest {shape}")
        if label.shape != shape[1:]:
            raise FormatError(f"{sid}/label: shape {label.shape} differs from manifest {shape[1:]}")
        out.append(MultiModalSample(sid, mods, label > 0.5, _parse_lesions(m.get(f"{prefix}.lesions", "")), seed))
    return out


def dataset_exists(path) -> bool:
    return os.path.isfile(os.path.join(path, MANIFEST_NAME))
