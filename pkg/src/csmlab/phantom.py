"""Synthetic multi-series phantoms with a known shared latent.

Every subject has one latent field built from a soft ellipsoidal "organ", a
few smooth Gaussian blobs, and a single lesion. Each series renders that
latent through its own transform ``gain * f(latent) + bias`` plus independent
Gaussian noise, so any series is predictable from the others up to noise.

Class rules:

``contrast``
    class 1 lesions are bright, class 0 lesions faint (amplitude ranges do
    not overlap).
``shape``
    class 1 lesions are elongated along a random axis, class 0 lesions are
    round; amplitudes share one range.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigurationError
from .volumes import Dataset, LabeledExample, MultiSeriesVolume, split_ids

NONLINEARITIES = {
    "identity": lambda x: x,
    "tanh": lambda x: np.tanh(2.0 * x),
    "square": lambda x: x * x,
    "softplus": lambda x: np.log1p(np.exp(3.0 * x)) / 3.0,
}

CLASS_RULES = ("contrast", "shape")


@dataclass(frozen=True)
class SeriesTransform:
    gain: float = 1.0
    bias: float = 0.0
    nonlinearity: str = "identity"
    noise: float = 0.05


DEFAULT_SERIES = (
    SeriesTransform(1.0, 0.0, "identity", 0.05),
    SeriesTransform(1.5, -0.2, "tanh", 0.05),
    SeriesTransform(0.8, 0.1, "square", 0.05),
    SeriesTransform(-1.0, 0.5, "softplus", 0.05),
)


@dataclass(frozen=True)
class PhantomSpec:
    extents: tuple[int, int, int] = (48, 48, 48)
    series: tuple[SeriesTransform, ...] = DEFAULT_SERIES[:3]
    blob_count: tuple[int, int] = (2, 5)
    class_rule: str = "contrast"
    lesion_radius: tuple[float, float] = (0.25, 0.35)
    lesion_contrast: tuple[float, float, float, float] = (0.25, 0.55, 0.75, 1.05)
    patch_edge: int = 16

    @property
    def series_count(self) -> int:
        return len(self.series)

    def validate(self) -> None:
        if len(self.extents) != 3 or any(e < 1 for e in self.extents):
            raise ConfigurationError(f"bad extents {self.extents}", field="data.extents")
        if any(e % self.patch_edge for e in self.extents):
            raise ConfigurationError(
                f"extents {self.extents} not divisible by patch edge {self.patch_edge}",
                field="data.extents")
        if not self.series:
            raise ConfigurationError("at least one series required", field="data.series")
        for j, t in enumerate(self.series):
            if t.noise < 0:
                raise ConfigurationError("noise sigma must be >= 0", field=f"data.series[{j}].noise")
            if t.nonlinearity not in NONLINEARITIES:
                raise ConfigurationError(f"unknown nonlinearity {t.nonlinearity!r}",
                                         field=f"data.series[{j}].nonlinearity")
        lo, hi = self.blob_count
        if not 0 <= lo <= hi:
            raise ConfigurationError("blob_count must satisfy 0 <= lo <= hi", field="data.blob_count")
        if self.class_rule not in CLASS_RULES:
            raise ConfigurationError(f"unknown class rule {self.class_rule!r}",
                                     field="data.class_rule")


def _grid(extents: Sequence[int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    axes = [np.linspace(-1.0, 1.0, e, dtype=np.float64) for e in extents]
    return np.meshgrid(*axes, indexing="ij")


def _gaussian(coords, center, radii) -> np.ndarray:
    z, y, x = coords
    q = ((z - center[0]) / radii[0]) ** 2 + ((y - center[1]) / radii[1]) ** 2 \
        + ((x - center[2]) / radii[2]) ** 2
    return np.exp(-0.5 * q)


def render_latent(spec: PhantomSpec, rng: np.random.Generator):
    """Return (latent, lesion_field, label) for one subject."""
    coords = _grid(spec.extents)
    z, y, x = coords

    center = rng.uniform(-0.08, 0.08, size=3)
    radii = np.array([0.72, 0.62, 0.66]) * rng.uniform(0.88, 1.12, size=3)
    r = np.sqrt(((z - center[0]) / radii[0]) ** 2 + ((y - center[1]) / radii[1]) ** 2
                + ((x - center[2]) / radii[2]) ** 2)
    organ = 1.0 / (1.0 + np.exp(-(1.0 - r) / 0.06))
    latent = organ * (0.55 + 0.25 * z)

    lo, hi = spec.blob_count
    for _ in range(int(rng.integers(lo, hi + 1))):
        c = rng.uniform(-0.5, 0.5, size=3)
        s = rng.uniform(0.1, 0.25)
        amp = rng.uniform(0.15, 0.4) * rng.choice((-1.0, 1.0))
        latent = latent + amp * _gaussian(coords, c, (s, s, s)) * organ

    label = int(rng.random() < 0.5)
    lc = rng.uniform(-0.35, 0.35, size=3)
    rad = rng.uniform(*spec.lesion_radius)
    c0, c1, c2, c3 = spec.lesion_contrast
    if spec.class_rule == "contrast":
        amp = rng.uniform(c2, c3) if label else rng.uniform(c0, c1)
        lradii = (rad, rad, rad)
    else:
        amp = rng.uniform(c0, c3)
        if label:
            lradii = [rad * 0.7] * 3
            lradii[int(rng.integers(0, 3))] = rad * 2.0
        else:
            lradii = (rad, rad, rad)
    lesion = _gaussian(coords, lc, lradii)
    latent = latent + amp * lesion
    return latent, lesion, label


def gen_phantom(spec: PhantomSpec, seed: int | Sequence[int], subject_id: str = "",
                label_kind: str = "class") -> LabeledExample:
    spec.validate()
    rng = np.random.default_rng(seed)
    latent, lesion, label = render_latent(spec, rng)
    series = []
    for t in spec.series:
        v = t.gain * NONLINEARITIES[t.nonlinearity](latent) + t.bias
        if t.noise > 0:
            v = v + rng.normal(0.0, t.noise, size=v.shape)
        series.append(v)
    data = np.stack(series).astype(np.float32)
    names = tuple(f"series{j}" for j in range(len(series)))
    vol = MultiSeriesVolume(data, (True,) * len(series), subject_id, names)
    if label_kind == "class":
        return LabeledExample(vol, label=label)
    if label_kind == "mask":
        return LabeledExample(vol, mask=(lesion > 0.5).astype(np.uint8))
    raise ConfigurationError(f"label kind must be 'class' or 'mask', got {label_kind!r}",
                             field="data.label_kind")


def gen_dataset(spec: PhantomSpec, n_subjects: int, seed: int | Sequence[int],
                label_kind: str = "class", prefix: str = "sub") -> Dataset:
    """``n_subjects`` phantoms with an 8:1:1 patient-wise split.

    Subject ``i`` is generated from the seed sequence ``(*seed, i)``.
    """
    if n_subjects < 1:
        raise ConfigurationError("n_subjects must be >= 1", field="data.n_subjects")
    base = (seed,) if isinstance(seed, (int, np.integer)) else tuple(seed)
    examples = [gen_phantom(spec, (*base, i), f"{prefix}-{i:04d}", label_kind)
                for i in range(n_subjects)]
    ids = [e.volume.subject_id for e in examples]
    splits = split_ids(ids, np.random.default_rng((*base, 10**6)))
    return Dataset(examples, splits, label_kind)


def spec_from_config(cfg) -> PhantomSpec:
    """PhantomSpec matching an ExperimentConfig's data section and patch edge."""
    d = cfg.data
    return PhantomSpec(extents=tuple(d.extents),
                       series=tuple(SeriesTransform(**s.model_dump()) for s in d.series),
                       blob_count=tuple(d.blob_count), class_rule=d.class_rule,
                       lesion_radius=tuple(d.lesion_radius),
                       lesion_contrast=tuple(d.lesion_contrast),
                       patch_edge=cfg.model.patch_edge)
