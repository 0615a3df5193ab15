"""Synthetic image pairs with known deformations and topological changes."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

import numpy as np
from scipy import ndimage

from .grid import identity_grid, resize, warp


@dataclass
class SynthSpec:
    size: int = 64
    correlation_length: float = 2.0  # px, smoothing of the noise texture
    contrast: float = 0.25  # amplitude of the noise texture relative to the regions
    regions: int = 8  # Voronoi cells with distinct mean intensity
    deform_amplitude: float = 3.0  # max displacement magnitude, px
    deform_smoothness: float = 16.0  # px between coarse control points
    blob_radius: float = 6.0
    blob_delta: float = 0.6
    blob_count: int = 1
    blob_mode: str = "mixed"  # insert | remove | mixed (each blob picks one at random)
    variable_sites: int = 0  # population-level sites whose content varies across controls
    site_radius: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.size < 8:
            raise ValueError("grid size must be at least 8")
        if self.deform_amplitude >= self.size / 8:
            raise ValueError("deform_amplitude must be below size / 8")
        if self.blob_count > 0 and self.blob_radius < 2:
            raise ValueError("blob_radius must be at least 2 px")
        if self.blob_count > 0 and 2 * (self.blob_radius + 2) >= self.size - 1:
            raise ValueError("blob_radius too large for the grid")
        if self.blob_mode not in ("insert", "remove", "mixed"):
            raise ValueError(f"unknown blob_mode {self.blob_mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_types(cls) -> dict:
        return {f.name: f.type for f in fields(cls)}


@dataclass
class SynthPair:
    I: np.ndarray  # (1, H, W)
    J: np.ndarray  # (1, H, W)
    mask: np.ndarray  # (H, W) bool, changed pixels in J's frame
    true_field: np.ndarray  # (2, H, W), J's grid into I


@dataclass
class Population:
    controls: list  # list of (image, identifier)
    changed: list  # list of (image, mask, identifier)
    base: np.ndarray


def _texture(rng, spec: SynthSpec) -> np.ndarray:
    n = spec.size
    xs, ys = identity_grid(n, n)
    seeds = rng.uniform(0, n, size=(spec.regions, 2))
    levels = rng.uniform(0.15, 0.85, size=spec.regions)
    d2 = (xs[None] - seeds[:, 0, None, None]) ** 2 + (ys[None] - seeds[:, 1, None, None]) ** 2
    regions = levels[np.argmin(d2, axis=0)]
    regions = ndimage.gaussian_filter(regions, 0.7, mode="reflect")
    noise = ndimage.gaussian_filter(rng.standard_normal((n, n)), spec.correlation_length, mode="reflect")
    noise /= noise.std() + 1e-12
    return (regions + spec.contrast * 0.5 * noise)[None]


def smooth_field(rng, size: int, amplitude: float, smoothness: float) -> np.ndarray:
    """Random field by bilinear upsampling of a coarse grid, scaled to max magnitude ``amplitude``."""
    coarse = max(2, int(round(size / smoothness)) + 1)
    grid = rng.standard_normal((2, coarse, coarse))
    fld = resize(grid, (size, size))
    peak = np.max(np.hypot(fld[0], fld[1]))
    if amplitude == 0 or peak == 0:
        return np.zeros((2, size, size))
    return fld * (amplitude / peak)


def _disk(center, radius, size) -> np.ndarray:
    xs, ys = identity_grid(size, size)
    return (xs - center[0]) ** 2 + (ys - center[1]) ** 2 <= radius**2


def _blob_centers(rng, spec: SynthSpec, count: int):
    margin = spec.blob_radius + 2
    return [rng.uniform(margin, spec.size - 1 - margin, size=2) for _ in range(count)]


def _apply_changes(rng, spec: SynthSpec, I, fld):
    """Insert blobs into ``J`` or remove them (present in ``I`` only); returns (I, J, mask)."""
    J = warp(I, fld)
    mask = np.zeros((spec.size, spec.size), dtype=bool)
    for c in _blob_centers(rng, spec, spec.blob_count):
        disk = _disk(c, spec.blob_radius, spec.size)
        mode = spec.blob_mode
        if mode == "mixed":
            mode = "insert" if rng.random() < 0.5 else "remove"
        if mode == "insert":
            J[:, disk] += spec.blob_delta
            mask |= disk
        else:
            I = I + spec.blob_delta * disk
            mask |= warp(disk.astype(np.float64), fld) >= 0.5
    return I, J, mask


def generate_pair(spec: SynthSpec) -> SynthPair:
    """Textured source ``I``, deformed target ``J`` with blob changes, change mask and the true field."""
    rng = np.random.default_rng(spec.seed)
    I = _texture(rng, spec)
    fld = smooth_field(rng, spec.size, spec.deform_amplitude, spec.deform_smoothness)
    I, J, mask = _apply_changes(rng, spec, I, fld)
    return SynthPair(I=I, J=J, mask=mask, true_field=fld)


def generate_pairs(spec: SynthSpec, count: int) -> list[SynthPair]:
    """``count`` independent pairs seeded ``spec.seed, spec.seed + 1, ...``."""
    out = []
    for i in range(count):
        s = SynthSpec(**{**spec.to_dict(), "seed": spec.seed + i})
        out.append(generate_pair(s))
    return out


def generate_population(spec: SynthSpec, count: int, changed: int | None = None) -> Population:
    """Controls sharing one region layout, with independent deformations and no blobs.

    Each of ``spec.variable_sites`` fixed sites independently carries a small
    bright disk in about half of the subjects, which models structured
    anatomical variability the controls share. ``changed`` extra subjects
    additionally receive inserted blobs and a mask.
    """
    if count < 3:
        raise ValueError("a population needs at least 3 controls")
    changed = count if changed is None else changed
    rng = np.random.default_rng(spec.seed)
    base = _texture(rng, spec)
    margin = spec.site_radius + spec.deform_amplitude + 2
    sites = [rng.uniform(margin, spec.size - 1 - margin, size=2) for _ in range(spec.variable_sites)]

    def subject():
        img = base.copy()
        for c in sites:
            if rng.random() < 0.5:
                img[:, _disk(c, spec.site_radius, spec.size)] += spec.blob_delta
        fld = smooth_field(rng, spec.size, spec.deform_amplitude, spec.deform_smoothness)
        return img, fld

    controls = []
    for i in range(count):
        img, fld = subject()
        controls.append((warp(img, fld), f"control_{i:03d}"))
    items = []
    for i in range(changed):
        img, fld = subject()
        _, J, mask = _apply_changes(rng, replace(spec, blob_mode="insert"), img, fld)
        items.append((J, mask, f"changed_{i:03d}"))
    return Population(controls=controls, changed=items, base=base)
