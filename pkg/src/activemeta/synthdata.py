"""Procedural source-domain (glioma-like) and target-domain (metastasis-like) patients.

Both domains share the same tissue intensity table, so lesions have the same
contrast; they differ only in lesion structure.  Source slices carry at most
one large irregular lesion (necrotic core, enhancing rim, wide edema halo).
Target slices carry up to four small round lesions with a thin enhancing
rim, little or no necrosis and a narrow halo.

Channels are ``[FLAIR, T1, T1c, T2]``; labels are ``0`` background,
``1`` edema, ``2`` necrosis, ``3`` enhancing.  Tissue intensities (before
per-patient gain, noise and clamping to [0, 1])::

    tissue     FLAIR  T1    T1c                       T2
    air        0.00   0.00  0.00                      0.00
    skull      0.70   0.75  0.70                      0.60
    brain      0.35   0.45  0.40                      0.35
    edema      0.75   0.35  0.40                      0.75
    necrosis   0.45   0.20  0.20                      0.85
    enhancing  0.60   0.40  0.40 + contrast_margin + 0.1   0.55

All geometry is stated for 64 px images and scales with ``image_size``.
Randomness comes from :mod:`activemeta.rng` with sub-seeds
``derive_seed(seed, "structure" | "noise")``; images are rounded to float32
so that the on-disk float32 volume round-trips exactly.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError
from .rng import Xoshiro256ss, XoshiroLanes, derive_seed

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
NUM_CLASSES = 4
CHANNELS = ("FLAIR", "T1", "T1c", "T2")
T1C = 2

BACKGROUND, EDEMA, NECROSIS, ENHANCING = 0, 1, 2, 3
_AIR, _SKULL, _BRAIN, _EDEMA, _NECROSIS, _ENHANCING = range(6)

SOURCE, TARGET = "source", "target"
_DOMAIN_ALIASES = {
    "source": SOURCE, "glioma": SOURCE, "hgg": SOURCE,
    "target": TARGET, "mets": TARGET, "metastasis": TARGET,
}


def canonical_domain(name: str) -> str:
    try:
        return _DOMAIN_ALIASES[name.lower()]
    except KeyError:
        raise ConfigError(f"unknown domain {name!r}; expected one of {sorted(_DOMAIN_ALIASES)}") from None


@dataclass(frozen=True)
class GenConfig:
    image_size: int = 64
    slices: int = 25
    noise_sigma: float = 0.05
    contrast_margin: float = 0.3
    skull: bool = True

    def __post_init__(self):
        if self.image_size < 16 or self.image_size % 4:
            raise ConfigError(f"image_size must be a multiple of 4 and >= 16, got {self.image_size}")
        if self.slices < 1:
            raise ConfigError(f"slices must be positive, got {self.slices}")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")
        if not self.contrast_margin > 2 * self.noise_sigma:
            raise ConfigError(
                f"contrast_margin ({self.contrast_margin}) must exceed 2*noise_sigma ({2 * self.noise_sigma})"
            )

    def intensity_table(self) -> np.ndarray:
        enh_t1c = min(1.0, 0.40 + self.contrast_margin + 0.1)
        return np.array([
            [0.00, 0.00, 0.00, 0.00],
            [0.70, 0.75, 0.70, 0.60],
            [0.35, 0.45, 0.40, 0.35],
            [0.75, 0.35, 0.40, 0.75],
            [0.45, 0.20, 0.20, 0.85],
            [0.60, 0.40, enh_t1c, 0.55],
        ])


@dataclass(frozen=True)
class Sample:
    """One slice: image ``x [C, H, W]`` and labels ``y [H, W]``."""
    x: np.ndarray
    y: np.ndarray
    patient: str = ""
    index: int = 0


@dataclass
class PatientVolume:
    patient_id: str
    domain: str
    seed: int
    images: np.ndarray  # [S, C, H, W] float64
    labels: np.ndarray  # [S, H, W] uint8
    extra: dict = field(default_factory=dict)

    @cached_property
    def slices(self) -> list[Sample]:
        return [Sample(self.images[i], self.labels[i], self.patient_id, i) for i in range(len(self.images))]

    def equals(self, other: "PatientVolume") -> bool:
        return (self.patient_id == other.patient_id and self.domain == other.domain
                and self.seed == other.seed
                and np.array_equal(self.images, other.images)
                and np.array_equal(self.labels, other.labels))


# geometry ------------------------------------------------------------------

@dataclass
class _Lesion:
    cy: float
    cx: float
    z: int
    extent: int
    r_peak: float
    r_min: float
    core_ratio: float      # necrosis radius / rim radius (source) or 0
    rim: float             # absolute rim width (target); 0 for source
    halo: float            # edema ratio (source) or absolute halo (target)
    harmonics: tuple = ()  # (k, amplitude, phase) for irregular outlines

    def radius_at(self, z: int) -> float | None:
        dz = abs(z - self.z)
        if dz > self.extent:
            return None
        t = math.sqrt(max(0.0, 1.0 - (dz / (self.extent + 1)) ** 2))
        return self.r_min + (self.r_peak - self.r_min) * t


def _brain_geometry(rng: Xoshiro256ss, size: int) -> tuple[float, float, float, float]:
    s = size / 64.0
    cy = size / 2 - 0.5 + rng.uniform(-2, 2) * s
    cx = size / 2 - 0.5 + rng.uniform(-2, 2) * s
    ry = rng.uniform(24, 27) * s
    rx = rng.uniform(20, 23) * s
    return cy, cx, ry, rx


def _source_lesions(rng: Xoshiro256ss, cfg: GenConfig, brain) -> list[_Lesion]:
    s = cfg.image_size / 64.0
    n = cfg.slices
    cy, cx, ry, rx = brain
    z = rng.integers(int(0.3 * n), max(int(0.3 * n), int(0.7 * n)) + 1)
    extent = rng.integers(max(1, int(0.25 * n)), max(1, int(0.25 * n)) + max(1, int(0.15 * n)) + 1)
    r_peak = rng.uniform(13, 18) * s
    room = max(0.0, min(ry, rx) - r_peak - 2 * s)
    ang = rng.uniform(0, 2 * math.pi)
    off = rng.uniform(0, room) if room > 0 else 0.0
    harmonics = tuple((k, rng.uniform(0.0, 0.06), rng.uniform(0, 2 * math.pi)) for k in (2, 3, 4))
    return [_Lesion(
        cy=cy + off * math.sin(ang), cx=cx + off * math.cos(ang), z=z, extent=extent,
        r_peak=r_peak, r_min=10 * s, core_ratio=rng.uniform(0.45, 0.6), rim=0.0,
        halo=rng.uniform(1.25, 1.5), harmonics=harmonics,
    )]


def _target_lesions(rng: Xoshiro256ss, cfg: GenConfig, brain) -> list[_Lesion]:
    s = cfg.image_size / 64.0
    n = cfg.slices
    cy, cx, ry, rx = brain
    count = rng.integers(1, 5)
    lesions: list[_Lesion] = []
    attempts = 0
    while len(lesions) < count and attempts < 500:
        attempts += 1
        r_peak = rng.uniform(2.5, 5.0) * s
        halo = rng.uniform(1.0, 2.0) * s
        ly = cy + rng.uniform(-ry, ry)
        lx = cx + rng.uniform(-rx, rx)
        reach = r_peak + halo + 3 * s
        # keep the whole lesion inside the brain ellipse shrunk by its reach
        if ((ly - cy) / max(ry - reach, 1e-6)) ** 2 + ((lx - cx) / max(rx - reach, 1e-6)) ** 2 > 1.0:
            continue
        if any(math.hypot(ly - o.cy, lx - o.cx) < r_peak + halo + o.r_peak + o.halo + 2 * s for o in lesions):
            continue
        lo = min(2, (n - 1) // 2)
        z = rng.integers(lo, max(lo + 1, n - 2))
        extent = rng.integers(2, 6)
        lesions.append(_Lesion(cy=ly, cx=lx, z=z, extent=extent, r_peak=r_peak, r_min=2 * s,
                               core_ratio=0.0, rim=1.6 * s, halo=halo))
    return lesions


def _render_slice(z: int, cfg: GenConfig, brain, lesions, domain: str, yy, xx) -> np.ndarray:
    """Tissue map for one slice (values are _AIR.._ENHANCING)."""
    n = cfg.slices
    cy, cx, ry, rx = brain
    s = cfg.image_size / 64.0
    zc = (n - 1) / 2
    taper = max(0.6, math.sqrt(max(0.0, 1.0 - ((z - zc) / (0.9 * n)) ** 2)))
    by, bx = ry * taper, rx * taper
    ell = ((yy - cy) / by) ** 2 + ((xx - cx) / bx) ** 2
    tissue = np.full(yy.shape, _AIR, dtype=np.uint8)
    brain_mask = ell <= 1.0
    if cfg.skull:
        outer = ((yy - cy) / (by + 3 * s)) ** 2 + ((xx - cx) / (bx + 3 * s)) ** 2 <= 1.0
        tissue[outer & ~brain_mask] = _SKULL
    tissue[brain_mask] = _BRAIN

    for les in lesions:
        r = les.radius_at(z)
        if r is None:
            continue
        dy, dx = yy - les.cy, xx - les.cx
        d = np.hypot(dy, dx)
        if domain == SOURCE:
            phi = np.arctan2(dy, dx)
            outline = np.ones_like(d)
            for k, amp, phase in les.harmonics:
                outline += amp * np.cos(k * phi + phase)
            rho = d / (r * outline)
            edema = rho <= les.halo
            rim = rho <= 1.0
            core = rho <= les.core_ratio
        else:
            edema = d <= r + les.halo
            rim = d <= r
            core_r = r - les.rim
            core = d <= core_r if r >= 3.5 * s else np.zeros_like(rim)
        edema &= brain_mask
        rim &= brain_mask
        core &= brain_mask
        tissue[edema & (tissue == _BRAIN)] = _EDEMA
        tissue[rim] = _ENHANCING
        tissue[core] = _NECROSIS
    return tissue


_TISSUE_TO_LABEL = np.array([BACKGROUND, BACKGROUND, BACKGROUND, EDEMA, NECROSIS, ENHANCING], dtype=np.uint8)


def gen_patient(domain: str, seed: int, config: GenConfig | None = None) -> PatientVolume:
    """Generate one synthetic patient; a pure function of ``(domain, seed, config)``."""
    cfg = config or GenConfig()
    domain = canonical_domain(domain)
    size, n = cfg.image_size, cfg.slices
    rng = Xoshiro256ss(derive_seed(seed, f"structure/{domain}"))
    brain = _brain_geometry(rng, size)
    lesions = (_source_lesions if domain == SOURCE else _target_lesions)(rng, cfg, brain)
    gain = np.array([rng.uniform(0.95, 1.05) for _ in CHANNELS])

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    tissue = np.stack([_render_slice(z, cfg, brain, lesions, domain, yy, xx) for z in range(n)])
    table = cfg.intensity_table() * gain[None, :]
    images = np.moveaxis(table[tissue], -1, 1)  # [S, C, H, W]
    if cfg.noise_sigma > 0:
        noise = XoshiroLanes(derive_seed(seed, f"noise/{domain}")).normal(images.size)
        images = images + cfg.noise_sigma * noise.reshape(images.shape)
    images = np.clip(images, 0.0, 1.0).astype(np.float32).astype(np.float64)
    labels = _TISSUE_TO_LABEL[tissue]
    return PatientVolume(f"{domain}_{seed}", domain, int(seed), images, labels)


# disk format ---------------------------------------------------------------

_REQUIRED_KEYS = ("format_version", "patient_id", "domain", "seed", "slices", "height", "width",
                  "channels", "classes")
_OPTIONAL_KEYS = ("noise_sigma", "contrast_margin", "skull")


def write_patient(volume: PatientVolume, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    s, c, h, w = volume.images.shape
    meta = {
        "format_version": FORMAT_VERSION, "patient_id": volume.patient_id, "domain": volume.domain,
        "seed": volume.seed, "slices": s, "height": h, "width": w, "channels": c, "classes": NUM_CLASSES,
    }
    meta.update({k: v for k, v in volume.extra.items() if k in _OPTIONAL_KEYS})
    lines = "".join(f"{k}={v}\n" for k, v in meta.items())
    (d / "manifest.txt").write_text(lines, encoding="utf-8", newline="\n")
    (d / "volume.f32").write_bytes(np.ascontiguousarray(volume.images, dtype="<f4").tobytes())
    (d / "labels.u8").write_bytes(np.ascontiguousarray(volume.labels, dtype=np.uint8).tobytes())
    return d


def _parse_manifest(path: Path) -> dict[str, str]:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataFormatError(path, "file", f"cannot read manifest: {exc}") from exc
    meta = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if "=" not in line:
            raise DataFormatError(path, f"line {lineno}", f"expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        meta[key.strip()] = value.strip()
    return meta


def read_patient(directory) -> PatientVolume:
    d = Path(directory)
    mpath = d / "manifest.txt"
    meta = _parse_manifest(mpath)
    for key in meta:
        if key not in _REQUIRED_KEYS and key not in _OPTIONAL_KEYS:
            log.warning("%s: ignoring unknown manifest key %r", mpath, key)
    missing = [k for k in _REQUIRED_KEYS if k not in meta]
    if missing:
        raise DataFormatError(mpath, missing[0], "required key missing")
    ints = {}
    for key in ("format_version", "seed", "slices", "height", "width", "channels", "classes"):
        try:
            ints[key] = int(meta[key])
        except ValueError:
            raise DataFormatError(mpath, key, f"expected an integer, got {meta[key]!r}") from None
    if ints["format_version"] != FORMAT_VERSION:
        raise DataFormatError(mpath, "format_version", f"unsupported version {ints['format_version']}")
    s, c, h, w = ints["slices"], ints["channels"], ints["height"], ints["width"]

    vpath, lpath = d / "volume.f32", d / "labels.u8"
    raw_v = _read_exact(vpath, "volume", 4 * s * c * h * w)
    raw_l = _read_exact(lpath, "labels", s * h * w)
    images = np.frombuffer(raw_v, dtype="<f4").reshape(s, c, h, w).astype(np.float64)
    labels = np.frombuffer(raw_l, dtype=np.uint8).reshape(s, h, w).copy()
    if labels.size and labels.max() >= ints["classes"]:
        raise DataFormatError(lpath, "labels", f"label {labels.max()} >= classes={ints['classes']}")
    extra = {k: meta[k] for k in _OPTIONAL_KEYS if k in meta}
    return PatientVolume(meta["patient_id"], canonical_domain(meta["domain"]), ints["seed"], images, labels, extra)


def _read_exact(path: Path, field_name: str, expected: int) -> bytes:
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataFormatError(path, field_name, f"cannot read: {exc}") from exc
    if len(raw) != expected:
        raise DataFormatError(path, field_name, f"expected {expected} bytes, found {len(raw)}")
    return raw


# datasets ------------------------------------------------------------------

@dataclass
class DatasetManifest:
    root: Path
    entries: list[tuple[str, str]]  # (relative dir, split)

    def dirs(self, split: str | None = None) -> list[Path]:
        return [self.root / d for d, sp in self.entries if split is None or sp == split]


def split_counts(n: int) -> tuple[int, int]:
    """80/20 by patient index; the validation count is floored."""
    n_val = (n * 20) // 100
    return n - n_val, n_val


def gen_dataset(domain: str, n_patients: int, seed_base: int, config: GenConfig | None, out_dir) -> DatasetManifest:
    cfg = config or GenConfig()
    if n_patients < 1:
        raise ConfigError("n_patients must be positive")
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataFormatError(root, "out_dir", f"cannot create: {exc}") from exc
    n_train, _ = split_counts(n_patients)
    entries = []
    for i in range(n_patients):
        vol = gen_patient(domain, seed_base + i, cfg)
        vol.extra.update(noise_sigma=cfg.noise_sigma, contrast_margin=cfg.contrast_margin, skull=int(cfg.skull))
        name = f"patient_{i:03d}"
        write_patient(vol, root / name)
        entries.append((name, "train" if i < n_train else "val"))
    text = "".join(f"{d}\t{sp}\n" for d, sp in entries)
    (root / "dataset.txt").write_text(text, encoding="utf-8", newline="\n")
    return DatasetManifest(root, entries)


def read_dataset(root) -> DatasetManifest:
    root = Path(root)
    path = root / "dataset.txt"
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataFormatError(path, "file", f"cannot read dataset manifest: {exc}") from exc
    entries = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2 or parts[1] not in ("train", "val"):
            raise DataFormatError(path, f"line {lineno}", f"expected 'dir<TAB>train|val', got {line!r}")
        entries.append((parts[0], parts[1]))
    return DatasetManifest(root, entries)


def load_split(root, split: str) -> list[PatientVolume]:
    return [read_patient(d) for d in read_dataset(root).dirs(split)]


def stack_samples(samples) -> tuple[np.ndarray, np.ndarray]:
    samples = list(samples)
    if not samples:
        return np.zeros((0, len(CHANNELS), 0, 0)), np.zeros((0, 0, 0), dtype=np.uint8)
    return np.stack([s.x for s in samples]), np.stack([s.y for s in samples])
