"""Robustness protocols: whole-volume rotation sweeps and slice-wise motion artifacts."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .metrics import SegMetrics, evaluate
from .volume import Volume

__all__ = [
    "Perturbation",
    "rotate_volume",
    "rotate_slice",
    "motion_artifact",
    "motion_slices",
    "robustness_sweep",
    "SweepResult",
    "DEFAULT_ANGLES",
]

AXES = {"x": 0, "y": 1, "z": 2}
DEFAULT_ANGLES = tuple(range(0, 91, 5))


def _axis_index(axis) -> int:
    if isinstance(axis, str):
        if axis not in AXES:
            raise ValueError(f"axis must be one of x, y, z; got {axis!r}")
        return AXES[axis]
    if axis not in (0, 1, 2):
        raise ValueError(f"axis must be 0, 1 or 2; got {axis!r}")
    return int(axis)


def _cos_sin(angle_deg: float) -> Tuple[float, float]:
    t = math.radians(angle_deg)
    c, s = math.cos(t), math.sin(t)
    # exact values on the lattice angles so 90 degree turns are permutations
    return round(c, 12) + 0.0, round(s, 12) + 0.0


@dataclass
class Perturbation:
    kind: str = "whole_rotation"
    axis: str = "z"
    angle: float = 0.0
    angle_range: Tuple[float, float] = (-5.0, 5.0)
    fraction: float = 0.2
    seed: int = 0

    def validate(self) -> "Perturbation":
        if self.kind not in ("whole_rotation", "motion_artifact"):
            raise ValueError(f"unknown perturbation kind {self.kind!r}")
        _axis_index(self.axis)
        lo, hi = self.angle_range
        if not all(-180 <= a <= 180 for a in (self.angle, lo, hi)) or lo > hi:
            raise ValueError("angles must lie in [-180, 180] with a non-empty range")
        if not 0 <= self.fraction <= 1:
            raise ValueError("fraction must lie in [0, 1]")
        return self

    def apply(self, volume: Volume) -> Volume:
        self.validate()
        if self.kind == "whole_rotation":
            return rotate_volume(volume, self.axis, self.angle)
        return motion_artifact(volume, self.axis, self.fraction, self.angle_range, self.seed)


def _rotate_plane(arr: np.ndarray, plane: Tuple[int, int], angle_deg: float,
                  order: int) -> np.ndarray:
    """Rotate ``arr`` in the given axis plane about its centre; outside samples become 0."""
    if angle_deg == 0:
        return arr.copy()
    c, s = _cos_sin(angle_deg)
    centre = [(n - 1) / 2.0 for n in arr.shape]
    coords = np.indices(arr.shape, dtype=np.float64)
    i, j = plane
    di, dj = coords[i] - centre[i], coords[j] - centre[j]
    # pull-back: sample the input at R^-1 (p - centre) + centre
    coords[i] = c * di + s * dj + centre[i]
    coords[j] = -s * di + c * dj + centre[j]
    out = ndimage.map_coordinates(arr.astype(np.float64 if order else arr.dtype), coords,
                                  order=order, mode="constant", cval=0.0, prefilter=False)
    return out.astype(arr.dtype)


def rotate_volume(volume: Volume, axis="z", angle_deg: float = 0.0) -> Volume:
    """Rotate about the volume centre in the plane orthogonal to ``axis``.

    Images are resampled trilinearly, label volumes with nearest neighbour.
    """
    ax = _axis_index(axis)
    plane = tuple(a for a in range(3) if a != ax)
    order = 0 if volume.is_label else 1
    return volume.with_data(_rotate_plane(volume.data, plane, angle_deg, order))


def rotate_slice(arr2d: np.ndarray, angle_deg: float, order: int) -> np.ndarray:
    return _rotate_plane(arr2d, (0, 1), angle_deg, order)


def motion_artifact(volume: Volume, axis="z", fraction: float = 0.2,
                    angle_range: Sequence[float] = (-5.0, 5.0), seed: int = 0) -> Volume:
    """Rotate ``ceil(fraction * S)`` randomly chosen slices along ``axis`` in-plane.

    Each chosen slice gets its own angle drawn uniformly from ``angle_range``;
    the remaining slices are left bit-identical.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    ax = _axis_index(axis)
    lo, hi = angle_range
    data = volume.data
    n_slices = data.shape[ax]
    count = min(n_slices, math.ceil(round(fraction * n_slices, 9)))
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(n_slices, size=count, replace=False))
    angles = rng.uniform(lo, hi, size=count)
    order = 0 if volume.is_label else 1
    out = data.copy()
    view = np.moveaxis(out, ax, 0)
    src = np.moveaxis(data, ax, 0)
    for idx, ang in zip(chosen, angles):
        view[idx] = rotate_slice(src[idx], float(ang), order)
    return volume.with_data(out)


def motion_slices(n_slices: int, fraction: float, seed: int) -> np.ndarray:
    """The slice indices :func:`motion_artifact` picks for these settings."""
    count = min(n_slices, math.ceil(round(fraction * n_slices, 9)))
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n_slices, size=count, replace=False))


@dataclass
class SweepResult:
    """Metrics per perturbation setting (rotation angle, or axis for motion)."""

    kind: str
    axis: str
    settings: List = field(default_factory=list)
    metrics: List[SegMetrics] = field(default_factory=list)

    def rows(self):
        key = "angle" if self.kind == "rotation" else "axis"
        for setting, m in zip(self.settings, self.metrics):
            for row in m.rows():
                yield {key: setting, **row}

    def to_csv(self) -> str:
        key = "angle" if self.kind == "rotation" else "axis"
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=[key, "class", "dice", "precision", "recall"],
                                lineterminator="\n")
        writer.writeheader()
        writer.writerows(self.rows())
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "kind": self.kind,
            "axis": self.axis,
            "settings": list(self.settings),
            "mean_dice": [m.mean_dice for m in self.metrics],
            "per_setting": [m.to_dict() for m in self.metrics],
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.summary(), **kwargs)

    def to_gnuplot(self) -> str:
        """Whitespace-separated columns: setting, mean Dice, then Dice per class."""
        classes = sorted(self.metrics[0].dice) if self.metrics else []
        lines = ["# setting mean_dice " + " ".join(f"dice_{k}" for k in classes)]
        for setting, m in zip(self.settings, self.metrics):
            vals = " ".join(f"{m.dice[k]:.6f}" for k in classes)
            lines.append(f"{setting} {m.mean_dice:.6f} {vals}")
        return "\n".join(lines) + "\n"


def _average(metrics: Sequence[SegMetrics]) -> SegMetrics:
    out = SegMetrics()
    for k in metrics[0].dice:
        out.dice[k] = float(np.mean([m.dice[k] for m in metrics]))
        out.precision[k] = float(np.mean([m.precision[k] for m in metrics]))
        out.recall[k] = float(np.mean([m.recall[k] for m in metrics]))
    return out


def robustness_sweep(predict: Callable[[np.ndarray], np.ndarray], image: Volume,
                     labels: Volume, num_classes: int, kind: str = "rotation", axis="z",
                     angles: Sequence[float] = DEFAULT_ANGLES, repeats: int = 1,
                     fraction: float = 0.2, angle_range=(-5.0, 5.0),
                     seed: int = 0) -> SweepResult:
    """Score ``predict`` (image array -> label array) under perturbations.

    ``kind="rotation"`` rotates image and labels together by each angle, so the
    prediction is compared with ground truth of the rotated subject.
    ``kind="motion"`` corrupts only the image, once per axis in ``axis`` (a
    string such as ``"xyz"``), and averages ``repeats`` seeded draws.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    result = SweepResult(kind, str(axis))
    if kind == "rotation":
        for angle in angles:
            img = rotate_volume(image, axis, angle)
            lab = rotate_volume(labels, axis, angle)
            pred = np.asarray(predict(img.data))
            result.settings.append(angle)
            result.metrics.append(evaluate(pred, lab.data, num_classes))
    elif kind == "motion":
        for ax in str(axis):
            runs = []
            for r in range(repeats):
                img = motion_artifact(image, ax, fraction, angle_range, seed + r)
                runs.append(evaluate(np.asarray(predict(img.data)), labels.data, num_classes))
            result.settings.append(ax)
            result.metrics.append(_average(runs))
    else:
        raise ValueError(f"unknown sweep kind {kind!r}; use 'rotation' or 'motion'")
    return result
