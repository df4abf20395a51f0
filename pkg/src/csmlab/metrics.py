"""Evaluation metrics and the reconstruction baseline."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import UndefinedMetricError, UsageError
from .masking import sample_eval_plans
from .volumes import patchify


def dice_score(a, b) -> float:
    """2|a & b| / (|a| + |b|); two empty masks score 1.0."""
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise UsageError(f"dice_score shape mismatch {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def auc(scores, labels) -> float:
    """Mann-Whitney estimate of P(score_pos > score_neg), ties count one half."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise UsageError("scores and labels must have the same length")
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative label")
    ranks = rankdata(scores)  # average ranks for ties
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def mean_baseline_mse(volumes, mask_config, patch_edge: int, seed: int = 0,
                      plans: Sequence | None = None) -> float:
    """MSE of predicting each eligible masked voxel by its series' visible mean.

    A fully-masked series has no visible voxels; it is predicted by the mean
    of all visible voxels of the subject. The result is the mean over
    subjects of the per-subject MSE, with the same eligibility rule as the
    reconstruction loss.
    """
    volumes = list(volumes)
    if not volumes:
        raise UsageError("mean_baseline_mse needs a non-empty dataset")
    if plans is None:
        plans = sample_eval_plans(volumes, mask_config, patch_edge, seed)
    per_subject = []
    for v, plan in zip(volumes, plans):
        tokens = patchify(v, patch_edge).tokens.astype(np.float64)
        eligible = plan.eligible(mask_config.reconstruct_masked_series)
        visible = np.zeros_like(eligible)
        hidden = set(plan.hidden_series)
        for j, idx in enumerate(plan.unmasked):
            if j not in hidden:
                visible[j, idx] = True
        overall = tokens[visible].mean() if visible.any() else 0.0
        sq = 0.0
        count = 0
        for j in range(plan.s):
            if not eligible[j].any():
                continue
            pred = tokens[j][visible[j]].mean() if visible[j].any() else overall
            resid = tokens[j][eligible[j]] - pred
            sq += float((resid * resid).sum())
            count += resid.size
        if count:
            per_subject.append(sq / count)
    return float(np.mean(per_subject))
