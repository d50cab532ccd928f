"""Synthetic four-class brain-like phantoms.

Labels are three nested, smoothly deformed ellipsoids inside a background:
class 1 is the outer shell, class 2 the middle shell and class 3 the core,
so each tissue surrounds the next like CSF around grey matter around white
matter. Intensities are per-class Gaussians followed by a Gaussian blur.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy import ndimage

from .volume import Volume, normalize

__all__ = ["PhantomSpec", "PhantomError", "generate_phantom", "NUM_CLASSES"]

NUM_CLASSES = 4


class PhantomError(ValueError):
    pass


@dataclass
class PhantomSpec:
    """Generator settings.

    ``radii`` are the semi-axes of the three ellipsoids (outer to inner) as
    fractions of the half extent along each axis. ``deformation`` is the
    relative amplitude of the low-frequency boundary wobble; ``jitter``
    randomizes radii and centre per phantom by that relative amount.
    """

    shape: Tuple[int, int, int] = (64, 64, 64)
    seed: int = 0
    radii: Tuple[float, float, float] = (0.8, 0.58, 0.36)
    intensity_means: Tuple[float, ...] = (0.0, 0.25, 0.55, 0.85)
    intensity_stds: Tuple[float, ...] = (0.02, 0.06, 0.06, 0.06)
    smoothing_sigma: float = 0.8
    deformation: float = 0.08
    jitter: float = 0.05
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, list):
                setattr(self, f.name, tuple(value))

    def validate(self) -> "PhantomSpec":
        if len(self.shape) != 3 or min(self.shape) < 4:
            raise PhantomError(f"shape must be three extents >= 4, got {self.shape}")
        if len(self.radii) != NUM_CLASSES - 1:
            raise PhantomError(f"need {NUM_CLASSES - 1} radii, got {len(self.radii)}")
        if any(b >= a for a, b in zip(self.radii, self.radii[1:])) or min(self.radii) <= 0:
            raise PhantomError(f"radii must be positive and strictly nested, got {self.radii}")
        if len(self.intensity_means) != NUM_CLASSES or len(self.intensity_stds) != NUM_CLASSES:
            raise PhantomError(f"need {NUM_CLASSES} intensity means and stds")
        if min(self.intensity_stds) < 0 or self.smoothing_sigma < 0:
            raise PhantomError("noise and smoothing must be non-negative")
        if not 0 <= self.deformation < 1 or not 0 <= self.jitter < 1:
            raise PhantomError("deformation and jitter must lie in [0, 1)")
        reach = self.radii[0] * (1 + self.deformation) * (1 + self.jitter) + self.jitter
        if reach > 1:
            raise PhantomError(
                f"outer radius {self.radii[0]} with deformation/jitter reaches {reach:.3f} "
                "of the half extent and would leave the volume")
        return self

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v
                for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, data: dict) -> "PhantomSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise PhantomError(f"unknown phantom keys: {sorted(unknown)}")
        return cls(**data).validate()


def _wobble(rng, unit, amplitude, terms=4):
    """Smooth random function of direction, bounded by ``amplitude``."""
    if amplitude == 0:
        return np.zeros(unit.shape[1:])
    out = np.zeros(unit.shape[1:])
    for _ in range(terms):
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        freq = rng.uniform(1.0, 3.0)
        phase = rng.uniform(0, 2 * np.pi)
        out += np.cos(freq * np.tensordot(d, unit, axes=1) * np.pi + phase)
    return amplitude * out / terms


def generate_phantom(spec: PhantomSpec = None):
    """Return ``(image, labels)`` volumes; fully determined by ``spec.seed``."""
    spec = (spec or PhantomSpec()).validate()
    rng = np.random.default_rng(spec.seed)
    shape = np.array(spec.shape, dtype=float)
    half = shape / 2.0

    centre = half - 0.5 + rng.uniform(-spec.jitter, spec.jitter, 3) * half
    grid = np.stack(np.meshgrid(*[np.arange(s, dtype=float) for s in spec.shape],
                                indexing="ij"))
    rel = (grid - centre[:, None, None, None]) / half[:, None, None, None]
    dist = np.sqrt((rel ** 2).sum(0))
    unit = rel / np.maximum(dist, 1e-12)

    labels = np.zeros(spec.shape, dtype=np.uint8)
    for cls, base in enumerate(spec.radii, start=1):
        axes = np.asarray(base) * (1 + rng.uniform(-spec.jitter, spec.jitter, 3))
        r = np.sqrt(((rel / axes[:, None, None, None]) ** 2).sum(0))
        r = r / (1 + _wobble(rng, unit, spec.deformation))
        labels[r <= 1.0] = cls

    means = np.asarray(spec.intensity_means)
    stds = np.asarray(spec.intensity_stds)
    image = means[labels] + stds[labels] * rng.standard_normal(spec.shape)
    if spec.smoothing_sigma > 0:
        image = ndimage.gaussian_filter(image, spec.smoothing_sigma, mode="nearest")
    img = normalize(Volume(image.astype(np.float32), spec.spacing))
    return img, Volume(labels, spec.spacing)
