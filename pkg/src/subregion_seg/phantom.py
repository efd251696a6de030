"""Synthetic multi-modal tumor phantoms with nested spherical sub-regions.

Each phantom is a uniform background with three concentric balls:
edema (label 2) outermost, enhancing tumor (label 4) inside it and a
necrotic core (label 1) at the center. Per-modality intensities follow a
fixed signature table so that the learning problem mirrors real contrast
behaviour (necrosis dark on T1c and bright on FLAIR, edema bright on
FLAIR/T2, enhancing rim bright on T1c).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError
from .volume_io import CaseArchive, MultiModalVolume, to_uint8

# (T1, T1c, T2, FLAIR) on the [0, 255] scale
SIGNATURES: dict[int, tuple[float, float, float, float]] = {
    0: (80.0, 80.0, 80.0, 80.0),
    2: (100.0, 100.0, 200.0, 210.0),
    4: (110.0, 220.0, 150.0, 150.0),
    1: (90.0, 40.0, 160.0, 220.0),
}


@dataclass(frozen=True)
class PhantomSpec:
    size: tuple[int, int, int] = (24, 64, 64)
    tumor_center: tuple[float, float, float] = (11.5, 31.5, 31.5)
    radii: tuple[float, float, float] = (10.0, 6.0, 3.0)  # edema, enhancing, necrotic
    noise_sigma: float = 0.0
    seed: int = 0

    def validate(self) -> "PhantomSpec":
        if len(self.size) != 3 or any(int(s) < 1 for s in self.size):
            raise ConfigError(f"size must be three positive integers, got {self.size}")
        r_ed, r_et, r_ncr = self.radii
        if not r_ed > r_et > r_ncr > 0:
            raise ConfigError(
                f"radii must satisfy r_edema > r_enhancing > r_necrotic > 0, got {self.radii}"
            )
        for axis, (c, n) in enumerate(zip(self.tumor_center, self.size)):
            if c - r_ed < 0 or c + r_ed > n - 1:
                raise ConfigError(
                    f"tumor of radius {r_ed} at {self.tumor_center} leaves the volume "
                    f"along axis {axis} (size {n})"
                )
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        return self


@dataclass(frozen=True)
class PhantomRanges:
    """Per-case randomization applied by :func:`generate_dataset`."""

    center_shift: float = 3.0  # max |shift| in voxels, per axis
    radius_scale: tuple[float, float] = (0.8, 1.1)
    noise_sigma: tuple[float, float] | None = None  # None -> base spec value

    @classmethod
    def none(cls) -> "PhantomRanges":
        return cls(center_shift=0.0, radius_scale=(1.0, 1.0), noise_sigma=None)


def phantom_labels(spec: PhantomSpec) -> np.ndarray:
    d, h, w = (int(s) for s in spec.size)
    zz, yy, xx = np.ogrid[:d, :h, :w]
    cz, cy, cx = spec.tumor_center
    dist2 = (zz - cz) ** 2 + (yy - cy) ** 2 + (xx - cx) ** 2
    r_ed, r_et, r_ncr = spec.radii
    labels = np.zeros((d, h, w), dtype=np.uint8)
    labels[dist2 <= r_ed**2] = 2
    labels[dist2 <= r_et**2] = 4
    labels[dist2 <= r_ncr**2] = 1
    return labels


def generate_phantom(spec: PhantomSpec) -> tuple[MultiModalVolume, np.ndarray]:
    """Render one phantom; deterministic given ``spec.seed``."""
    spec.validate()
    labels = phantom_labels(spec)
    table = np.zeros((5, 4))
    for label, sig in SIGNATURES.items():
        table[label] = sig
    x = table[labels]
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.seed)
        x = np.clip(x + rng.normal(0.0, spec.noise_sigma, size=x.shape), 0.0, 255.0)
    return MultiModalVolume(x), labels


def _randomized_spec(base: PhantomSpec, ranges: PhantomRanges, rng, case_seed: int) -> PhantomSpec:
    size = np.asarray(base.size, dtype=float)
    lo, hi = ranges.radius_scale
    scale = rng.uniform(lo, hi) if hi > lo else lo
    # the scaled tumor must still fit along its tightest axis
    max_scale = ((size - 1) / 2).min() / base.radii[0]
    scale = min(scale, max_scale)
    radii = tuple(float(r * scale) for r in base.radii)

    center = np.asarray(base.tumor_center, dtype=float)
    if ranges.center_shift > 0:
        center = center + rng.uniform(-ranges.center_shift, ranges.center_shift, size=3)
    center = np.clip(center, radii[0], size - 1 - radii[0])

    noise = base.noise_sigma
    if ranges.noise_sigma is not None:
        n_lo, n_hi = ranges.noise_sigma
        noise = float(rng.uniform(n_lo, n_hi)) if n_hi > n_lo else float(n_lo)

    return replace(
        base,
        tumor_center=tuple(float(c) for c in center),
        radii=radii,
        noise_sigma=noise,
        seed=case_seed,
    )


def generate_dataset(
    n_cases: int,
    base_spec: PhantomSpec = PhantomSpec(),
    seed: int = 0,
    ranges: PhantomRanges | None = None,
) -> list[CaseArchive]:
    """Generate ``n_cases`` randomized phantoms as validated archives.

    Geometry and noise level are drawn from ``ranges`` with a generator
    seeded by ``seed``; case ``i`` renders its noise field with seed
    ``base_spec.seed + i``.
    """
    if n_cases < 1:
        raise ConfigError(f"n_cases must be >= 1, got {n_cases}")
    base_spec.validate()
    ranges = PhantomRanges() if ranges is None else ranges
    rng = np.random.default_rng(seed)
    cases = []
    for i in range(n_cases):
        spec = _randomized_spec(base_spec, ranges, rng, base_spec.seed + i)
        vol, labels = generate_phantom(spec)
        cases.append(
            CaseArchive(
                imgs=to_uint8(vol.intensities),
                gts=labels,
                spacing=np.asarray(vol.spacing, dtype=np.float64),
            ).validate()
        )
    return cases
