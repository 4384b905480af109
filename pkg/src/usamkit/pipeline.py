"""End-to-end helpers shared by the CLI and the acceptance suite."""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .backend import SyntheticWorld, synthetic_sample_set
from .bayes import (
    MissingRecordsError,
    best_head,
    epistemic_entropy,
    predictive_entropy,
    prompt_entropy,
    task_entropy,
)
from .evaluation import SCENARIOS, ScoredSample, correction_curve, scenario_ious
from .masks import iou, mean_mask_entropy, threshold
from .sampling import AugKind, ModelId
from .usam import USAM, build_training_set

BAYES_COLUMNS = ("H_Y", "H_Theta", "H_XP", "H_A", "H_Std", "inv_samscore")


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get("USAMKIT_THREADS", "1")))
    except ValueError:
        return 1


def _map(fn, items):
    n = thread_count()
    if n == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def generate_sets(world: SyntheticWorld, n: int, first: int = 0, grid: str = "full",
                  n_prompts: int = 8) -> list:
    """Sample sets for synthetic samples ``first .. first + n - 1``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return _map(lambda i: synthetic_sample_set(world, i, n_prompts=n_prompts, grid=grid)[0],
                range(first, first + n))


def _optional(fn):
    try:
        return fn()
    except MissingRecordsError:
        return math.nan


def bayes_measures(s, model=ModelId.L) -> dict:
    """Sampling-based scores and SamScore baselines for one sample set."""
    model = ModelId(model)
    heads = s.heads(AugKind.IDENTITY, 0, model)
    scores = [r.sam_score for r in heads]
    sel = heads[int(np.argmax(scores))]
    return {
        "H_Y": _optional(lambda: predictive_entropy(s)),
        "H_Theta": _optional(lambda: epistemic_entropy(s, 0)),
        "H_XP": _optional(lambda: prompt_entropy(s, model)),
        "H_A": task_entropy(s, 0, model),
        "H_Std": mean_mask_entropy(sel.mask, threshold(sel.mask)),
        "inv_samscore": 1.0 - max(scores),
    }


def iou_gt(s, model) -> float:
    heads = s.heads(AugKind.IDENTITY, 0, ModelId(model))
    masks = [r.mask for r in heads]
    return iou(threshold(masks[best_head(s.gt, masks)]), s.gt)


def measure_table(sets, model, heads: USAM | None = None, with_bayes: bool = True) -> dict:
    """Per-sample uncertainty columns for ``model``'s centroid-prompt predictions."""
    model = ModelId(model)
    table = {"image_id": [s.image_id for s in sets]}
    if with_bayes:
        rows = _map(lambda s: bayes_measures(s, model), sets)
        for c in BAYES_COLUMNS:
            table[c] = np.array([r[c] for r in rows])
    if heads is not None:
        X = np.stack([s.heads(AugKind.IDENTITY, 0, model)[0].tokens for s in sets])
        table.update(heads.uncertainty_columns(X, model))
    return table


def scenario_curves(sets, measures: dict, model=ModelId.T, scenarios=SCENARIOS,
                    random_seed: int = 0) -> dict:
    """Correction curve of every finite measure column in every scenario.

    Adds a ``random`` column drawn with ``random_seed``. Returns
    ``{scenario: {method: CorrectionCurve}}``.
    """
    model = ModelId(model)
    examples = build_training_set(sets, sources=(model,))
    cols = {k: np.asarray(v, dtype=np.float64) for k, v in measures.items() if k != "image_id"}
    cols["random"] = np.random.default_rng(random_seed).random(len(sets))
    out = {}
    for scenario in scenarios:
        pairs = [scenario_ious(e.targets, model.value, scenario) for e in examples]
        curves = {}
        for name, unc in cols.items():
            if not np.isfinite(unc).all():
                continue
            curves[name] = correction_curve(
                ScoredSample(i, b, c, float(u)) for i, ((b, c), u) in enumerate(zip(pairs, unc)))
        out[scenario] = curves
    return out
