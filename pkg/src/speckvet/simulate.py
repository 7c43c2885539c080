"""Synthetic coherent-diffraction speckle frames.

Particles are random point clouds. A frame is the squared magnitude of the
2-d Fourier transform of the projected atom density on a flat small-angle
detector, scaled to expected photon counts, run through shot noise and
additive Gaussian read noise, masked by beamstop and panel gap, and center
cropped. All randomness flows through counter-derived generator streams so
frames can be produced serially or in parallel with identical results.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

NO_HIT = "no_hit"
SINGLE_HIT = "single_hit"
MULTI_HIT = "multi_hit"
NON_SAMPLE_HIT = "non_sample_hit"

HIT_CATEGORIES = ("single", "double", "triple", "quadruple")
CATEGORY_MULTIPLICITY = {"single": 1, "double": 2, "triple": 3, "quadruple": 4}
ALL_CATEGORIES = HIT_CATEGORIES + (NO_HIT, NON_SAMPLE_HIT)

# Real-space scale: a 3e4-atom particle has a 13-cell reference radius on a
# 256-cell box, which puts speckle grains at roughly 5 to 15 detector pixels.
REFERENCE_ATOMS = 30_000
REFERENCE_RADIUS = 13.0
# Expected photons per crop pixel is ~2 at unit fluence for a reference
# particle; 0.01x fluence starves the frame, 100x saturates the noise away.
PHOTON_SCALE = 1.2e-7
GAUSSIAN_NOISE_STD = 0.15
# Above this expected count per pixel, shot noise uses the normal
# approximation instead of an exact Poisson draw.
POISSON_GAUSSIAN_CROSSOVER = 1e4
PLACEMENT_SHIFT = 20.0
ATOM_RANGE = (10_000, 100_000)
SIZE_BINS = 20
FLUENCE_SIGMA_LOG = 0.5


@dataclass(frozen=True)
class DetectorGeometry:
    n_pixels: int = 172
    beamstop_rows: int = 6
    beamstop_cols: int = 8
    gap_cols: int = 4
    crop_size: int = 96
    grid_size: int = 256

    def validate(self) -> None:
        if self.grid_size < self.n_pixels:
            raise ValueError(f"grid_size {self.grid_size} smaller than detector {self.n_pixels}")
        if self.crop_size > self.n_pixels:
            raise ValueError(f"crop_size {self.crop_size} exceeds detector {self.n_pixels}")
        if self.beamstop_rows > self.n_pixels or self.beamstop_cols > self.n_pixels:
            raise ValueError("beamstop exceeds detector bounds")
        if self.gap_cols > self.n_pixels:
            raise ValueError("gap exceeds detector bounds")

    @property
    def q_max(self) -> float:
        """Reciprocal extent of the detector in cycles per grid cell."""
        return (self.n_pixels / 2) / self.grid_size

    def valid_mask(self) -> np.ndarray:
        """Detector-frame boolean mask, True where pixels are live."""
        n = self.n_pixels
        mask = np.ones((n, n), dtype=bool)
        c = n // 2
        r0 = c - self.beamstop_rows // 2
        c0 = c - self.beamstop_cols // 2
        mask[r0:r0 + self.beamstop_rows, c0:c0 + self.beamstop_cols] = False
        g0 = c - self.gap_cols // 2
        mask[:, g0:g0 + self.gap_cols] = False
        return mask

    def crop_slices(self) -> Tuple[slice, slice]:
        lo = (self.n_pixels - self.crop_size) // 2
        return slice(lo, lo + self.crop_size), slice(lo, lo + self.crop_size)

    def to_dict(self) -> dict:
        return {
            "n_pixels": self.n_pixels, "beamstop_rows": self.beamstop_rows,
            "beamstop_cols": self.beamstop_cols, "gap_cols": self.gap_cols,
            "crop_size": self.crop_size, "grid_size": self.grid_size,
        }


@dataclass(frozen=True)
class Particle:
    atoms: np.ndarray
    particle_id: str

    @property
    def n_atoms(self) -> int:
        return self.atoms.shape[0]


@dataclass(frozen=True)
class Placement:
    rotation: np.ndarray
    shift: np.ndarray


@dataclass
class SpecklePattern:
    intensity: np.ndarray
    mask: np.ndarray
    label: str
    hit_multiplicity: int
    sample_id: str
    fluence_factor: float
    rng_key: Tuple[int, ...] = field(default=())

    def validate(self) -> None:
        if np.any(self.intensity < 0):
            raise ValueError("pattern intensity has negative pixels")
        if np.any(self.intensity[~self.mask] != 0):
            raise ValueError("masked-out pixels must carry value 0")
        expected = {0: (NO_HIT, NON_SAMPLE_HIT), 1: (SINGLE_HIT,)}.get(
            self.hit_multiplicity, (MULTI_HIT,))
        if self.label not in expected:
            raise ValueError(
                f"label {self.label!r} inconsistent with hit_multiplicity {self.hit_multiplicity}")


def particle_radius(n_atoms: int) -> float:
    return REFERENCE_RADIUS * (n_atoms / REFERENCE_ATOMS) ** (1.0 / 3.0)


def generate_particle(n_atoms: int, rng: np.random.Generator, particle_id: str = "particle") -> Particle:
    """Random compact blob built from a few Gaussian lobes, centered at its centroid."""
    if n_atoms < 1:
        raise ValueError(f"n_atoms must be >= 1, got {n_atoms}")
    radius = particle_radius(n_atoms)
    n_lobes = int(rng.integers(2, 6))
    centers = rng.normal(0.0, 0.5 * radius, size=(n_lobes, 3))
    counts = rng.multinomial(n_atoms, rng.dirichlet(np.ones(n_lobes)))
    chunks = []
    for center, count in zip(centers, counts):
        spread = rng.uniform(0.25, 0.5) * radius
        chunks.append(center + rng.normal(0.0, spread, size=(count, 3)))
    atoms = np.concatenate(chunks, axis=0)
    atoms = atoms - atoms.mean(axis=0)
    return Particle(atoms=atoms, particle_id=particle_id)


def random_placement(rng: np.random.Generator, shift_scale: float = PLACEMENT_SHIFT) -> Placement:
    quat = rng.normal(size=4)
    quat /= np.linalg.norm(quat)
    rotation = Rotation.from_quat(quat).as_matrix()
    shift = rng.uniform(-shift_scale, shift_scale, size=2)
    return Placement(rotation=rotation, shift=shift)


def coherent_intensity(placed: Sequence[Tuple[Particle, Placement]], geometry: DetectorGeometry) -> np.ndarray:
    """Noiseless |FT|^2 on the full detector, coherently summed over placements.

    Projected atoms are accumulated on a shared density grid, so inter-particle
    interference is included. The density is real, which makes the result
    symmetric under point reflection about the detector center.
    """
    geometry.validate()
    n = geometry.grid_size
    half = n / 2.0
    density = np.zeros((n, n), dtype=np.float64)
    for particle, placement in placed:
        xy = particle.atoms @ placement.rotation.T[:, :2] + placement.shift
        hist, _, _ = np.histogram2d(
            xy[:, 0], xy[:, 1], bins=n, range=[[-half, half], [-half, half]])
        density += hist
    field_fft = np.fft.fft2(density)
    intensity = np.abs(np.fft.fftshift(field_fft)) ** 2
    lo = n // 2 - geometry.n_pixels // 2
    return intensity[lo:lo + geometry.n_pixels, lo:lo + geometry.n_pixels]


def expected_photons(
    placed: Sequence[Tuple[Particle, Placement]],
    geometry: DetectorGeometry,
    fluence_factor: float,
) -> np.ndarray:
    """Pre-noise expected photon counts; exactly linear in fluence_factor."""
    if fluence_factor < 0:
        raise ValueError(f"fluence_factor must be >= 0, got {fluence_factor}")
    return coherent_intensity(placed, geometry) * (PHOTON_SCALE * fluence_factor)


def shot_noise(expected: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    counts = np.zeros_like(expected)
    low = expected <= POISSON_GAUSSIAN_CROSSOVER
    counts[low] = rng.poisson(expected[low])
    high = ~low
    if np.any(high):
        lam = expected[high]
        counts[high] = np.maximum(np.round(rng.normal(lam, np.sqrt(lam))), 0.0)
    return counts


def sample_fluence_factor(rng: np.random.Generator, sigma_log: float = FLUENCE_SIGMA_LOG) -> float:
    """Log-normal pulse-to-pulse fluence jitter with mean exactly 1."""
    return float(np.exp(rng.normal(0.0, sigma_log) - 0.5 * sigma_log ** 2))


def _finalize(
    expected: np.ndarray,
    geometry: DetectorGeometry,
    rng: np.random.Generator,
    gaussian_std: float,
) -> Tuple[np.ndarray, np.ndarray]:
    """Shot noise, mean normalization, read noise, clamp, mask, crop."""
    rows, cols = geometry.crop_slices()
    pre_noise_mean = float(expected[rows, cols].mean())
    counts = shot_noise(expected, rng)
    if pre_noise_mean > 0:
        counts = counts / pre_noise_mean
    noisy = counts + rng.normal(0.0, gaussian_std, size=counts.shape) if gaussian_std > 0 else counts
    noisy = np.maximum(noisy, 0.0)
    valid = geometry.valid_mask()
    noisy[~valid] = 0.0
    return noisy[rows, cols].astype(np.float32), valid[rows, cols].copy()


def diffract(
    placed: Sequence[Tuple[Particle, Placement]],
    geometry: DetectorGeometry,
    fluence_factor: float,
    rng: np.random.Generator,
    gaussian_std: float = GAUSSIAN_NOISE_STD,
    sample_id: str = "",
    rng_key: Tuple[int, ...] = (),
) -> SpecklePattern:
    """One detector frame from 0 to 4 placed particles (0 gives a noise-only frame)."""
    if len(placed) > 4:
        raise ValueError(f"at most 4 particles per frame, got {len(placed)}")
    if placed:
        expected = expected_photons(placed, geometry, fluence_factor)
    else:
        geometry.validate()
        expected = np.zeros((geometry.n_pixels, geometry.n_pixels), dtype=np.float64)
    intensity, mask = _finalize(expected, geometry, rng, gaussian_std)
    multiplicity = len(placed)
    label = {0: NO_HIT, 1: SINGLE_HIT}.get(multiplicity, MULTI_HIT)
    pattern = SpecklePattern(
        intensity=intensity, mask=mask, label=label, hit_multiplicity=multiplicity,
        sample_id=sample_id, fluence_factor=fluence_factor, rng_key=rng_key)
    pattern.validate()
    return pattern


def parasitic_frame(
    geometry: DetectorGeometry,
    rng: np.random.Generator,
    gaussian_std: float = GAUSSIAN_NOISE_STD,
    rng_key: Tuple[int, ...] = (),
) -> SpecklePattern:
    """Stray-light frame: a few broad anisotropic streaks instead of speckle."""
    geometry.validate()
    n = geometry.n_pixels
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    center = n / 2.0
    expected = np.zeros((n, n), dtype=np.float64)
    for _ in range(int(rng.integers(1, 4))):
        angle = rng.uniform(0.0, np.pi)
        long_s = rng.uniform(20.0, 60.0)
        short_s = rng.uniform(2.0, 8.0)
        cy, cx = center + rng.uniform(-15.0, 15.0, size=2)
        amp = rng.uniform(2.0, 8.0)
        dy, dx = yy - cy, xx - cx
        u = dy * np.cos(angle) + dx * np.sin(angle)
        v = -dy * np.sin(angle) + dx * np.cos(angle)
        expected += amp * np.exp(-0.5 * ((u / long_s) ** 2 + (v / short_s) ** 2))
    intensity, mask = _finalize(expected, geometry, rng, gaussian_std)
    pattern = SpecklePattern(
        intensity=intensity, mask=mask, label=NON_SAMPLE_HIT, hit_multiplicity=0,
        sample_id=NON_SAMPLE_HIT, fluence_factor=1.0, rng_key=rng_key)
    pattern.validate()
    return pattern


def size_bin_edges(low: int = ATOM_RANGE[0], high: int = ATOM_RANGE[1], bins: int = SIZE_BINS) -> np.ndarray:
    return np.linspace(low, high, bins + 1)


def sample_n_atoms(rng: np.random.Generator) -> int:
    """Uniform over the size bins, then uniform within the drawn bin."""
    edges = size_bin_edges()
    b = int(rng.integers(0, SIZE_BINS))
    return int(rng.uniform(edges[b], edges[b + 1]))


PARTICLE_STREAM = 0
PATTERN_STREAM = 1


def particle_for_sample(seed: int, sample_index: int, n_atoms: Optional[int] = None) -> Particle:
    rng = np.random.default_rng([seed, PARTICLE_STREAM, sample_index])
    if n_atoms is None:
        n_atoms = sample_n_atoms(rng)
    return generate_particle(n_atoms, rng, particle_id=f"sample_{sample_index:03d}")


def render_pattern(
    seed: int,
    flat_index: int,
    category: str,
    particle: Optional[Particle],
    geometry: DetectorGeometry,
    fluence_scale: float = 1.0,
    gaussian_std: float = GAUSSIAN_NOISE_STD,
) -> SpecklePattern:
    """Render one frame purely from (seed, flat_index) and the category.

    The per-frame stream is derived from the counter, never from generation
    order, so any subset of frames can be rendered independently and still
    match a full serial build bit for bit.
    """
    rng = np.random.default_rng([seed, PATTERN_STREAM, flat_index])
    key = (seed, PATTERN_STREAM, flat_index)
    if category == NO_HIT:
        return diffract([], geometry, 0.0, rng, gaussian_std, sample_id=NO_HIT, rng_key=key)
    if category == NON_SAMPLE_HIT:
        return parasitic_frame(geometry, rng, gaussian_std, rng_key=key)
    if category not in CATEGORY_MULTIPLICITY:
        raise ValueError(f"unknown category {category!r}; expected one of {ALL_CATEGORIES}")
    if particle is None:
        raise ValueError(f"category {category!r} needs a particle")
    multiplicity = CATEGORY_MULTIPLICITY[category]
    placed = [(particle, random_placement(rng)) for _ in range(multiplicity)]
    fluence = sample_fluence_factor(rng) * fluence_scale
    return diffract(
        placed, geometry, fluence, rng, gaussian_std,
        sample_id=particle.particle_id, rng_key=key)


def build_dataset(
    n_samples: int,
    patterns_per_category: int,
    categories: Sequence[str],
    geometry: Optional[DetectorGeometry] = None,
    seed: int = 0,
    fluence_scale: float = 1.0,
    n_atoms_per_sample: Optional[Sequence[int]] = None,
) -> List[SpecklePattern]:
    """Requested counts per category for each of n_samples distinct particles.

    Sample-free categories (no_hit, non_sample_hit) are generated once per
    dataset at patterns_per_category frames total, not per sample.
    """
    geometry = geometry or DetectorGeometry()
    bad = [c for c in categories if c not in ALL_CATEGORIES]
    if bad:
        raise ValueError(f"unknown categories {bad}; expected subset of {ALL_CATEGORIES}")
    if n_atoms_per_sample is not None and len(n_atoms_per_sample) != n_samples:
        raise ValueError(
            f"n_atoms_per_sample has {len(n_atoms_per_sample)} entries for {n_samples} samples")
    particles = [
        particle_for_sample(seed, s, None if n_atoms_per_sample is None else n_atoms_per_sample[s])
        for s in range(n_samples)
    ]
    jobs = []
    for category in categories:
        if category in CATEGORY_MULTIPLICITY:
            for s in range(n_samples):
                jobs.extend((category, s) for _ in range(patterns_per_category))
        else:
            jobs.extend((category, None) for _ in range(patterns_per_category))
    patterns = []
    for flat_index, (category, s) in enumerate(jobs):
        particle = particles[s] if s is not None else None
        patterns.append(render_pattern(
            seed, flat_index, category, particle, geometry, fluence_scale))
    return patterns
