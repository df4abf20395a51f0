"""Cross-series mask plans: intra-series token masks plus whole-series masks."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .config import MaskConfig
from .errors import ConfigurationError, UsageError


def n_masked(N: int, ratio: float) -> int:
    # tolerance absorbs binary representation error, e.g. 0.29 * 100
    return int(math.floor(ratio * N + 1e-9))


@dataclass(frozen=True)
class MaskPlan:
    """Per-series masked / unmasked token indices.

    ``series_masked`` is the inter-series set (k = its size). ``absent`` lists
    series missing from the subject; they are hidden like masked series but
    never count toward k or the loss.
    """

    masked: tuple[np.ndarray, ...]
    unmasked: tuple[np.ndarray, ...]
    series_masked: tuple[int, ...]
    n_tokens: int
    absent: tuple[int, ...] = ()

    @property
    def s(self) -> int:
        return len(self.masked)

    @property
    def k(self) -> int:
        return len(self.series_masked)

    @property
    def hidden_series(self) -> tuple[int, ...]:
        return tuple(sorted(set(self.series_masked) | set(self.absent)))

    def visible_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """(series index, token index) of every visible slot, series-major."""
        hidden = set(self.hidden_series)
        sj, ti = [], []
        for j, idx in enumerate(self.unmasked):
            if j in hidden or idx.size == 0:
                continue
            sj.append(np.full(idx.size, j, dtype=np.intp))
            ti.append(idx)
        if not sj:
            return np.zeros(0, np.intp), np.zeros(0, np.intp)
        return np.concatenate(sj), np.concatenate(ti).astype(np.intp)

    def masked_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        sj, ti = [], []
        for j, idx in enumerate(self.masked):
            if idx.size:
                sj.append(np.full(idx.size, j, dtype=np.intp))
                ti.append(idx)
        if not sj:
            return np.zeros(0, np.intp), np.zeros(0, np.intp)
        return np.concatenate(sj), np.concatenate(ti).astype(np.intp)

    def eligible(self, reconstruct_masked_series: bool = True) -> np.ndarray:
        """Boolean (s, N) map of slots that count toward the reconstruction loss."""
        out = np.zeros((self.s, self.n_tokens), dtype=bool)
        for j, idx in enumerate(self.masked):
            out[j, idx] = True
        drop = set(self.absent)
        if not reconstruct_masked_series:
            drop |= set(self.series_masked)
        for j in drop:
            out[j] = False
        return out

    def to_dict(self) -> dict:
        return {
            "n_tokens": self.n_tokens,
            "masked": [m.tolist() for m in self.masked],
            "series_masked": list(self.series_masked),
            "absent": list(self.absent),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MaskPlan":
        N = int(d["n_tokens"])
        masked = tuple(np.asarray(sorted(m), dtype=np.int64) for m in d["masked"])
        return cls(masked, tuple(_complement(m, N) for m in masked),
                   tuple(int(j) for j in d["series_masked"]), N,
                   tuple(int(j) for j in d.get("absent", ())))

    @classmethod
    def from_json(cls, text: str) -> "MaskPlan":
        return cls.from_dict(json.loads(text))

    def __eq__(self, other) -> bool:
        if not isinstance(other, MaskPlan):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    __hash__ = None  # type: ignore[assignment]


def _complement(idx: np.ndarray, N: int) -> np.ndarray:
    keep = np.ones(N, dtype=bool)
    keep[idx] = False
    return np.flatnonzero(keep).astype(np.int64)


def sample_intra_mask(N: int, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Sorted uniform subset of floor(ratio * N) token indices."""
    count = n_masked(N, ratio)
    if not 0 <= ratio < 1 or count > N - 1:
        raise ConfigurationError(
            f"mask ratio {ratio} leaves no unmasked token out of {N}", field="mask.intra_ratio")
    return np.sort(rng.permutation(N)[:count]).astype(np.int64)


def sample_inter_mask(s: int, rng: np.random.Generator) -> tuple[int, ...]:
    """k uniform on {1..s-1}, then a uniform k-subset of the s series."""
    if s < 2:
        raise ConfigurationError("inter-series masking needs at least two series",
                                 field="mask.inter_prob")
    k = int(rng.integers(1, s))
    return tuple(sorted(int(j) for j in rng.choice(s, size=k, replace=False)))


def sample_mask_plan(s: int, N: int, config: MaskConfig, rng: np.random.Generator,
                     absent: Sequence[int] = ()) -> MaskPlan:
    absent = tuple(sorted(set(int(j) for j in absent)))
    present = [j for j in range(s) if j not in absent]
    if not present:
        raise UsageError("a subject needs at least one present series")
    if n_masked(N, config.intra_ratio) > N - 1:
        raise ConfigurationError(
            f"mask ratio {config.intra_ratio} leaves no unmasked token out of {N}",
            field="mask.intra_ratio")

    series_masked: tuple[int, ...] = ()
    if config.series_mask_enabled and len(present) >= 2 and rng.random() < config.inter_prob:
        picks = sample_inter_mask(len(present), rng)
        series_masked = tuple(present[i] for i in picks)

    full = set(series_masked) | set(absent)
    all_idx = np.arange(N, dtype=np.int64)
    shared = sample_intra_mask(N, config.intra_ratio, rng) if config.same_position else None

    masked = []
    for j in range(s):
        if j in full:
            masked.append(all_idx.copy())
        elif shared is not None:
            masked.append(shared.copy())
        else:
            masked.append(sample_intra_mask(N, config.intra_ratio, rng))
    masked_t = tuple(masked)
    return MaskPlan(masked_t, tuple(_complement(m, N) for m in masked_t),
                    series_masked, N, absent)


def full_visibility_plan(s: int, N: int) -> MaskPlan:
    """Plan with every token of every series visible (fine-tuning input).

    Zero-padded missing series stay visible so the input length is fixed.
    """
    empty = tuple(np.zeros(0, dtype=np.int64) for _ in range(s))
    unmasked = tuple(np.arange(N, dtype=np.int64) for _ in range(s))
    return MaskPlan(empty, unmasked, (), N, ())


def masked_voxel_fraction(plan: MaskPlan, N: int | None = None, s: int | None = None) -> float:
    N = plan.n_tokens if N is None else N
    s = plan.s if s is None else s
    return sum(int(m.size) for m in plan.masked) / float(s * N)


EVAL_STREAM = 6


def sample_eval_plans(volumes, mask_cfg: MaskConfig, patch_edge: int,
                      seed: int = 0) -> list[MaskPlan]:
    """One plan per volume from a fixed evaluation stream."""
    rng = np.random.default_rng([seed, EVAL_STREAM])
    plans = []
    for v in volumes:
        n = int(np.prod([e // patch_edge for e in v.extents]))
        plans.append(sample_mask_plan(v.series_count, n, mask_cfg, rng, absent=v.absent))
    return plans
