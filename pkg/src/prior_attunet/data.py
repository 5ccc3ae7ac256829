"""Slice/mask ingestion, preprocessing, seeded splits and the synthetic OCT phantom generator.

Label palette: 0 background, 1 IRF (intraretinal fluid), 2 SRF (subretinal
fluid), 3 PED (pigment epithelial detachment).
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from PIL import Image

from .diffcore import ConfigurationError, nearest_indices
from .rng import derive_seed, numpy_rng

log = logging.getLogger(__name__)

NUM_CLASSES = 4
DEVICE_TAGS = ("cirrus", "spectralis", "topcon", "phantom")
IMAGE_SUFFIXES = (".png", ".pgm")


class DatasetError(ValueError):
    pass


class PhantomFitError(RuntimeError):
    pass


@dataclass
class LabeledSlice:
    image: np.ndarray  # (h, w) uint8
    mask: np.ndarray  # (h, w) uint8 in {0, 1, 2, 3}
    device_tag: str = "phantom"
    name: str = ""

    def __post_init__(self):
        self.image = np.asarray(self.image)
        self.mask = np.asarray(self.mask)
        if self.image.ndim != 2 or self.mask.ndim != 2:
            raise DatasetError(f"{self.name or 'slice'}: image and mask must be 2-D, got {self.image.shape} and {self.mask.shape}")
        if self.image.shape != self.mask.shape:
            raise DatasetError(f"{self.name or 'slice'}: image shape {self.image.shape} != mask shape {self.mask.shape}")
        if self.image.dtype != np.uint8:
            raise DatasetError(f"{self.name or 'slice'}: image must be 8-bit, got {self.image.dtype}")
        if self.mask.size and int(self.mask.max()) >= NUM_CLASSES:
            raise DatasetError(f"{self.name or 'slice'}: mask value {int(self.mask.max())} outside 0..3")
        if self.device_tag not in DEVICE_TAGS:
            raise DatasetError(f"unknown device tag {self.device_tag!r}")
        self.mask = self.mask.astype(np.uint8, copy=False)

    @property
    def has_fluid(self) -> bool:
        return bool(self.mask.any())


# ---------------------------------------------------------------------------
# phantom generator


@dataclass(frozen=True)
class IntensityProfile:
    """8-bit intensity ranges for each tissue; bands cycle through ``bands``."""
    vitreous: tuple[float, float]
    bands: tuple[tuple[float, float], ...]
    rpe: tuple[float, float]
    choroid: tuple[float, float]
    irf: tuple[float, float]
    srf: tuple[float, float]
    ped: tuple[float, float]


_BASE_PROFILE = IntensityProfile(
    vitreous=(8, 20),
    bands=((150, 190), (95, 125), (60, 85), (115, 145), (50, 75)),
    rpe=(200, 235),
    choroid=(105, 140),
    irf=(12, 32),
    srf=(10, 28),
    ped=(38, 60),
)


def _scaled(p: IntensityProfile, gain: float, offset: float) -> IntensityProfile:
    f = lambda r: (min(255.0, r[0] * gain + offset), min(255.0, r[1] * gain + offset))  # noqa: E731
    return IntensityProfile(f(p.vitreous), tuple(f(b) for b in p.bands), f(p.rpe), f(p.choroid), f(p.irf), f(p.srf), f(p.ped))


INTENSITY_PROFILES: dict[str, IntensityProfile] = {
    "phantom": _BASE_PROFILE,
    "cirrus": _BASE_PROFILE,
    "spectralis": _scaled(_BASE_PROFILE, 1.08, -4.0),
    "topcon": _scaled(_BASE_PROFILE, 0.85, 6.0),
}


@dataclass(frozen=True)
class FluidScales:
    """Blob extents as fractions of image width (horizontal) and height (vertical)."""
    irf_a: tuple[float, float] = (0.045, 0.075)
    irf_b: tuple[float, float] = (0.030, 0.045)
    srf_a: tuple[float, float] = (0.10, 0.16)
    srf_h: tuple[float, float] = (0.045, 0.070)
    ped_a: tuple[float, float] = (0.10, 0.15)
    ped_h: tuple[float, float] = (0.050, 0.075)


@dataclass(frozen=True)
class PhantomSpec:
    size: tuple[int, int] = (64, 64)
    n_layers: int = 5
    fluid_counts: tuple[int, int, int] = (1, 1, 1)  # IRF, SRF, PED blobs
    intensity_profile: str = "phantom"
    speckle_sigma: float = 0.25
    seed: int = 0
    scales: FluidScales = field(default_factory=FluidScales)

    def validate(self) -> None:
        h, w = self.size
        problems = []
        if h < 32 or w < 32:
            problems.append(f"size {self.size} too small (min 32x32)")
        if self.n_layers < 2:
            problems.append(f"n_layers must be >= 2, got {self.n_layers}")
        if len(self.fluid_counts) != 3 or min(self.fluid_counts) < 0:
            problems.append(f"fluid_counts must be three non-negative ints, got {self.fluid_counts}")
        if self.intensity_profile not in INTENSITY_PROFILES:
            problems.append(f"unknown intensity profile {self.intensity_profile!r}")
        if self.speckle_sigma < 0:
            problems.append("speckle_sigma must be >= 0")
        if problems:
            raise ConfigurationError("; ".join(problems))


@dataclass(frozen=True)
class PhantomPreset:
    """A distribution over :class:`PhantomSpec`; per-slice counts are drawn uniformly from the choices."""
    name: str
    size: tuple[int, int] = (64, 64)
    n_layers: int = 5
    irf_counts: tuple[int, ...] = (1, 2)
    srf_counts: tuple[int, ...] = (1,)
    ped_counts: tuple[int, ...] = (1,)
    devices: tuple[str, ...] = ("phantom",)
    speckle_sigma: float = 0.25
    scales: FluidScales = field(default_factory=FluidScales)


PRESETS: dict[str, PhantomPreset] = {
    "desk": PhantomPreset("desk"),
    # Cirrus-like imbalance: mostly background, PED > SRF > IRF.
    "table1-faithful": PhantomPreset(
        "table1-faithful",
        irf_counts=(0, 0, 0, 1),
        srf_counts=(0, 0, 1),
        ped_counts=(0, 1, 1),
        devices=("cirrus",),
        scales=FluidScales(irf_a=(0.02, 0.03), irf_b=(0.015, 0.025), srf_a=(0.06, 0.09), srf_h=(0.025, 0.04),
                           ped_a=(0.08, 0.12), ped_h=(0.04, 0.06)),
    ),
}


def get_preset(name: str) -> PhantomPreset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigurationError(f"unknown phantom preset {name!r}; choose from {sorted(PRESETS)}") from None


def spec_for_slice(preset: PhantomPreset, seed: int, fluid_free: bool = False) -> PhantomSpec:
    rng = numpy_rng(seed, "phantom-spec")
    counts = (0, 0, 0) if fluid_free else tuple(int(rng.choice(c)) for c in (preset.irf_counts, preset.srf_counts, preset.ped_counts))
    device = str(rng.choice(preset.devices))
    return PhantomSpec(preset.size, preset.n_layers, counts, device, preset.speckle_sigma, seed, preset.scales)


def _u(rng: np.random.Generator, r: tuple[float, float]) -> float:
    return float(rng.uniform(r[0], r[1]))


def _place_intervals(rng, count: int, w: int, half_range: tuple[float, float], label: str,
                     taken: list[tuple[float, float]]):
    """Centres and half-widths of ``count`` horizontal intervals clear of each other and of ``taken``."""
    placed: list[tuple[float, float]] = []
    for _ in range(count):
        shrink = 1.0
        for _attempt in range(100):
            a = max(2.0, _u(rng, half_range) * w * shrink)
            cx = float(rng.uniform(0.12 * w + a, 0.88 * w - a)) if 0.76 * w > 2 * a else w / 2
            if all(abs(cx - c) > a + b + 2 for c, b in placed + taken):
                placed.append((cx, a))
                break
            shrink *= 0.95
        else:
            raise PhantomFitError(f"could not fit {count} {label} blobs after 100 attempts")
    return placed


def generate_phantom(spec: PhantomSpec) -> LabeledSlice:
    """Render one B-scan-like slice with exact fluid masks; bit-identical per ``spec.seed``."""
    spec.validate()
    h, w = spec.size
    rng = numpy_rng(spec.seed, "phantom")
    prof = INTENSITY_PROFILES[spec.intensity_profile]
    sc = spec.scales
    n_irf, n_srf, n_ped = spec.fluid_counts
    x = np.arange(w, dtype=np.float64)
    u = (x - w / 2) / w

    # layered retina: B[0] inner surface ... B[L] top of the RPE, then Bruch's membrane
    top = h * _u(rng, (0.22, 0.28)) + h * _u(rng, (0.08, 0.2)) * u**2
    top += h * 0.012 * np.sin(2 * np.pi * (u * _u(rng, (0.8, 1.6)) + rng.uniform()))
    top += h * _u(rng, (0.0, 0.05)) * np.exp(-((x - w * _u(rng, (0.4, 0.6))) / (0.08 * w)) ** 2)  # foveal pit
    thickness = h * _u(rng, (0.30, 0.36))
    widths = rng.uniform(0.7, 1.3, spec.n_layers)
    cuts = np.concatenate([[0.0], np.cumsum(widths) / widths.sum()])
    bounds = top[None, :] + thickness * cuts[:, None]  # (L + 1, w)
    rpe_th = max(2.0, 0.045 * h)
    bruch = bounds[-1] + rpe_th

    # SRF and PED share the sub-retinal space side by side; tails thinner than 1.5 px are cut so
    # every blob rasterises to a single 4-connected component
    srf_at = _place_intervals(rng, n_srf, w, sc.srf_a, "SRF", [])
    ped_at = _place_intervals(rng, n_ped, w, sc.ped_a, "PED", srf_at)
    srf_lift = np.zeros(w)
    for cx, a in srf_at:
        srf_lift += h * _u(rng, sc.srf_h) * np.clip(1 - ((x - cx) / a) ** 2, 0, None)
    ped_lift = np.zeros(w)
    for cx, a in ped_at:
        ped_lift += h * _u(rng, sc.ped_h) * np.sqrt(np.clip(1 - ((x - cx) / a) ** 2, 0, None))
    srf_lift[srf_lift < 1.5] = 0.0
    ped_lift[ped_lift < 1.5] = 0.0

    retina = bounds - srf_lift - ped_lift  # neurosensory boundaries after displacement
    rpe_top, rpe_bottom = bounds[-1] - ped_lift, bruch - ped_lift

    yc = np.arange(h, dtype=np.float64)[:, None] + 0.5
    image = np.empty((h, w))
    mask = np.zeros((h, w), dtype=np.uint8)

    image[:] = _u(rng, prof.vitreous)
    for k in range(spec.n_layers):
        region = (yc >= retina[k]) & (yc < retina[k + 1])
        image[region] = _u(rng, prof.bands[k % len(prof.bands)])
    neuro = (yc >= retina[0]) & (yc < retina[-1])
    srf = (yc >= retina[-1]) & (yc < rpe_top)
    image[srf] = _u(rng, prof.srf)
    mask[srf] = 2
    image[(yc >= rpe_top) & (yc < rpe_bottom)] = _u(rng, prof.rpe)
    ped = (yc >= rpe_bottom) & (yc < bruch)
    image[ped] = _u(rng, prof.ped)
    mask[ped] = 3
    below = yc >= bruch
    depth = (yc - bruch) / max(1.0, h - bruch.min())
    image = np.where(below, _u(rng, prof.choroid) * (1 - 0.6 * np.clip(depth, 0, 1)), image)

    # IRF: rotated ellipses fully inside the neurosensory retina, never touching each other
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    inner = neuro & np.roll(neuro, 1, 0) & np.roll(neuro, -1, 0)
    irf_any = np.zeros((h, w), dtype=bool)
    irf_level = _u(rng, prof.irf)
    for _ in range(n_irf):
        shrink = 1.0
        for _attempt in range(100):
            a = max(1.2, _u(rng, sc.irf_a) * w * shrink)
            b = max(1.0, _u(rng, sc.irf_b) * h * shrink)
            cx = float(rng.uniform(0.12 * w, 0.88 * w))
            col = min(w - 1, int(cx))
            cy = retina[0, col] + _u(rng, (0.35, 0.7)) * (retina[-1, col] - retina[0, col])
            th = _u(rng, (-0.35, 0.35))
            dx, dy = xx - cx, yy - cy
            r1 = (dx * np.cos(th) + dy * np.sin(th)) / a
            r2 = (-dx * np.sin(th) + dy * np.cos(th)) / b
            blob = r1**2 + r2**2 <= 1
            halo = (np.abs(r1) * a / (a + 1.5)) ** 2 + (np.abs(r2) * b / (b + 1.5)) ** 2 <= 1
            if blob.any() and np.all(inner[blob]) and not np.any(irf_any & halo):
                irf_any |= blob
                break
            shrink *= 0.95
        else:
            raise PhantomFitError(f"could not fit {n_irf} IRF blobs after 100 attempts")
    image[irf_any] = irf_level
    mask[irf_any] = 1

    if spec.speckle_sigma > 0:
        image = image * np.exp(rng.normal(0.0, spec.speckle_sigma, size=image.shape))
    image = np.clip(np.rint(image), 0, 255).astype(np.uint8)
    return LabeledSlice(image, mask, spec.intensity_profile, name=f"phantom_{spec.seed}")


def generate_corpus(count: int, preset: str | PhantomPreset = "desk", seed: int = 0,
                    fluid_free: bool = False) -> list[LabeledSlice]:
    """``count`` phantoms; slice ``i`` depends only on ``(seed, i)``."""
    p = get_preset(preset) if isinstance(preset, str) else preset
    out = []
    for i in range(count):
        s = generate_phantom(spec_for_slice(p, derive_seed(seed, f"phantom/{i}"), fluid_free))
        s.name = f"{i:05d}"
        out.append(s)
    return out


# ---------------------------------------------------------------------------
# statistics, preprocessing, splits


def class_stats(ds: Sequence[LabeledSlice]) -> np.ndarray:
    """Per-class pixel fractions over the whole dataset."""
    if len(ds) == 0:
        raise DatasetError("class_stats needs a nonempty dataset")
    counts = np.zeros(NUM_CLASSES, dtype=np.int64)
    for s in ds:
        counts += np.bincount(s.mask.ravel(), minlength=NUM_CLASSES)[:NUM_CLASSES]
    return counts / counts.sum()


def resize_nearest(grid: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize with floor index mapping ``src = (dst * n_in) // n_out``."""
    h, w = grid.shape
    rows = np.asarray(nearest_indices(h, target[0]))
    cols = np.asarray(nearest_indices(w, target[1]))
    return grid[rows[:, None], cols[None, :]]


def preprocess(s: LabeledSlice, target: tuple[int, int]) -> tuple[torch.Tensor, torch.Tensor]:
    """``(image3, mask)``: a ``(3, h, w)`` float tensor in [0, 1] and a ``(h, w)`` int64 label grid."""
    if target[0] % 16 or target[1] % 16 or min(target) <= 0:
        raise ConfigurationError(f"target size must be a positive multiple of 16, got {target}")
    img = resize_nearest(s.image, target).astype(np.float32) / 255.0
    mask = resize_nearest(s.mask, target).astype(np.int64)
    image3 = torch.from_numpy(np.ascontiguousarray(img)).unsqueeze(0).expand(3, -1, -1).contiguous()
    return image3, torch.from_numpy(np.ascontiguousarray(mask))


def to_tensors(ds: Sequence[LabeledSlice], target: tuple[int, int]) -> tuple[torch.Tensor, torch.Tensor]:
    if len(ds) == 0:
        raise DatasetError("cannot stack an empty dataset")
    pairs = [preprocess(s, target) for s in ds]
    return torch.stack([p[0] for p in pairs]), torch.stack([p[1] for p in pairs])


@dataclass(frozen=True)
class SplitPlan:
    train_ids: tuple[int, ...]
    test_ids: tuple[int, ...]
    seed: int
    ratio: float


def split(n: int, ratio: float = 0.8, seed: int = 0) -> SplitPlan:
    """Seeded PCG64 permutation (``split`` stream), then prefix split."""
    if n <= 0:
        raise DatasetError("cannot split an empty dataset")
    if not 0 < ratio < 1:
        raise ConfigurationError(f"split ratio must lie in (0, 1), got {ratio}")
    perm = numpy_rng(seed, "split").permutation(n)
    n_train = int(round(n * ratio))
    if n > 1:
        n_train = min(max(n_train, 1), n - 1)
    else:
        n_train = 1
    return SplitPlan(tuple(int(i) for i in perm[:n_train]), tuple(int(i) for i in perm[n_train:]), seed, ratio)


# ---------------------------------------------------------------------------
# on-disk layout: root/images, root/masks, optional manifest.txt


def _read_gray(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "P"):
            im = im.convert("L")
        return np.array(im, dtype=np.uint8)


def save_dataset(ds: Iterable[LabeledSlice], root: str | Path, fmt: str = "png",
                 manifest: dict | None = None) -> Path:
    root = Path(root)
    if fmt not in ("png", "pgm"):
        raise ConfigurationError(f"fmt must be png or pgm, got {fmt!r}")
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    ds = list(ds)
    lines = [f"{k}={v}" for k, v in (manifest or {}).items()]
    for i, s in enumerate(ds):
        name = s.name or f"{i:05d}"
        Image.fromarray(s.image, mode="L").save(root / "images" / f"{name}.{fmt}")
        Image.fromarray(s.mask, mode="L").save(root / "masks" / f"{name}.{fmt}")
        lines.append(f"slice {name} {s.device_tag}")
    if ds:
        fr = class_stats(ds)
        lines.insert(len(manifest or {}), "fractions=" + ",".join(f"{v:.6f}" for v in fr))
    (root / "manifest.txt").write_text("\n".join(lines) + "\n")
    return root


def _manifest_devices(root: Path) -> dict[str, str]:
    path = root / "manifest.txt"
    if not path.exists():
        return {}
    devices = {}
    for line in path.read_text().splitlines():
        parts = line.split()
        if len(parts) == 3 and parts[0] == "slice":
            devices[parts[1]] = parts[2]
    return devices


def load_dataset(root: str | Path, device_tag: str = "phantom") -> list[LabeledSlice]:
    """Load ``images/``/``masks/`` pairs matched by file stem, in sorted name order."""
    root = Path(root)
    img_dir, mask_dir = root / "images", root / "masks"
    images = sorted(p for p in img_dir.glob("*") if p.suffix.lower() in IMAGE_SUFFIXES) if img_dir.is_dir() else []
    if not images:
        warnings.warn(f"no images found under {img_dir}", stacklevel=2)
        return []
    masks = {p.stem: p for p in mask_dir.glob("*") if p.suffix.lower() in IMAGE_SUFFIXES} if mask_dir.is_dir() else {}
    missing = [p.name for p in images if p.stem not in masks]
    if missing:
        raise DatasetError(f"missing masks for: {', '.join(missing)}")
    devices = _manifest_devices(root)
    out = []
    for p in images:
        img, mask = _read_gray(p), _read_gray(masks[p.stem])
        if img.shape != mask.shape:
            raise DatasetError(f"{p.name}: image shape {img.shape} != mask shape {mask.shape}")
        if mask.size and int(mask.max()) > 3:
            raise DatasetError(f"{p.name}: mask value {int(mask.max())} outside 0..3")
        out.append(LabeledSlice(img, mask, devices.get(p.stem, device_tag), p.stem))
    fr = class_stats(out)
    log.info("loaded %d slices from %s; class fractions bg=%.4f irf=%.4f srf=%.4f ped=%.4f", len(out), root, *fr)
    return out


def spec_manifest(preset: PhantomPreset, seed: int, count: int, fluid_free: bool) -> dict:
    d = {"seed": seed, "count": count, "fluid_free": fluid_free}
    d.update({f"preset.{k}": v for k, v in asdict(preset).items()})
    return d


def with_size(preset: PhantomPreset, size: tuple[int, int]) -> PhantomPreset:
    return replace(preset, size=size)
