"""Correction-curve evaluation of uncertainty scores.

Samples are sorted from most to least uncertain and an increasing fraction
of them is replaced by a better prediction (larger model, refined prompt,
supervised head selection or ground truth). The area under the resulting
mIoU curve, normalised between the worst and the oracle ordering, is the
relative AUC reported for every method.
"""
from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "SCENARIOS",
    "ScoredSample",
    "CorrectionCurve",
    "correction_curve",
    "scenario_ious",
    "pearson",
    "CorrelationMatrix",
    "correlation_matrix",
    "curves_to_csv",
    "rel_auc_table_csv",
    "BENCH_METHODS",
    "bench_uq_overhead",
]

SCENARIOS = ("model-swap", "prompt-refine", "task-supervise", "gt-correct")


@dataclass(frozen=True)
class ScoredSample:
    sample_id: object
    base_iou: float
    corrected_iou: float
    unc: float


@dataclass
class CorrectionCurve:
    ratios: np.ndarray
    mious: np.ndarray
    auc: float
    oracle_auc: float
    worst_auc: float
    rel_auc: float
    oracle_mious: np.ndarray = field(repr=False)
    worst_mious: np.ndarray = field(repr=False)


def _curve(mean_base: float, gains: np.ndarray) -> np.ndarray:
    n = gains.size
    return mean_base + np.concatenate([[0.0], np.cumsum(gains)]) / n


def _trapezoid(mious: np.ndarray) -> float:
    n = mious.size - 1
    return float(np.sum(mious[:-1] + mious[1:]) / (2.0 * n))


def correction_curve(samples) -> CorrectionCurve:
    """mIoU after correcting the ``k`` most uncertain samples, for ``k = 0..n``.

    Samples are ranked by descending ``unc`` with ties broken by ascending
    ``sample_id``. The AUC integrates the curve over the ratio ``k / n`` with
    the trapezoid rule. The oracle corrects the largest gains first and the
    worst ordering the smallest. ``rel_auc`` is 1.0 when those two coincide.
    """
    samples = list(samples)
    n = len(samples)
    if n < 1:
        raise ValueError("need at least one sample")
    ids = [s.sample_id for s in samples]
    if len(set(ids)) != n:
        raise ValueError("sample ids must be unique")
    base = np.array([s.base_iou for s in samples], dtype=np.float64)
    corr = np.array([s.corrected_iou for s in samples], dtype=np.float64)
    unc = np.array([s.unc for s in samples], dtype=np.float64)
    for name, arr in (("base_iou", base), ("corrected_iou", corr), ("unc", unc)):
        if not np.isfinite(arr).all():
            raise ValueError(f"{name} contains non-finite values")

    order = sorted(range(n), key=lambda i: (-unc[i], ids[i]))
    gains = corr - base
    mean_base = float(base.mean())
    mious = _curve(mean_base, gains[order])
    best = np.sort(gains)[::-1]
    oracle = _curve(mean_base, best)
    worst = _curve(mean_base, best[::-1])
    auc, oracle_auc, worst_auc = _trapezoid(mious), _trapezoid(oracle), _trapezoid(worst)
    if oracle_auc == worst_auc:
        rel = 1.0
    else:
        rel = (auc - worst_auc) / (oracle_auc - worst_auc)
    return CorrectionCurve(np.arange(n + 1) / n, mious, auc, oracle_auc, worst_auc, rel,
                           oracle, worst)


def scenario_ious(targets: dict, source: str, scenario: str) -> tuple[float, float]:
    """``(base, corrected)`` IoU of one sample under a correction scenario.

    ``targets`` maps ``"L", "B+", "S", "T", "refined", "sam_selected"`` to
    IoUs against ground truth; ``source`` is the model being corrected.
    """
    src = targets[source]
    if scenario == "model-swap":
        return src, targets["L"]
    if scenario == "prompt-refine":
        return src, targets["refined"]
    if scenario == "task-supervise":
        return targets["sam_selected"], src
    if scenario == "gt-correct":
        return src, 1.0
    raise ValueError(f"unknown scenario {scenario!r}; expected one of {SCENARIOS}")


def pearson(xs, ys) -> float:
    """Sample Pearson correlation coefficient."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape or x.size == 0:
        raise ValueError("xs and ys must be 1-D sequences of equal, non-zero length")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise ValueError("pearson correlation undefined for zero-variance input")
    return float(np.clip((dx @ dy) / np.sqrt(sxx * syy), -1.0, 1.0))


@dataclass
class CorrelationMatrix:
    names: list
    values: np.ndarray
    undefined: list  # (row, col, reason) for cells left as NaN

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([""] + list(self.names))
        for name, row in zip(self.names, self.values):
            w.writerow([name] + ["undefined" if np.isnan(v) else f"{v:.6f}" for v in row])
        return buf.getvalue()


def correlation_matrix(measures: dict) -> CorrelationMatrix:
    """Pairwise Pearson correlations of named, row-aligned measure columns."""
    names = list(measures)
    cols = [np.asarray(measures[n], dtype=np.float64) for n in names]
    if len({c.shape for c in cols}) > 1:
        raise ValueError("all measure columns must have the same length")
    k = len(names)
    vals = np.full((k, k), np.nan)
    undefined = []
    for i in range(k):
        for j in range(i, k):
            try:
                r = pearson(cols[i], cols[j])
            except ValueError as exc:
                undefined.append((names[i], names[j], str(exc)))
                continue
            vals[i, j] = vals[j, i] = r
    return CorrelationMatrix(names, vals, undefined)


def curves_to_csv(curves: dict) -> str:
    """``ratio,<method...>,oracle,worst`` with one row per ratio."""
    if not curves:
        raise ValueError("no curves to export")
    first = next(iter(curves.values()))
    for name, c in curves.items():
        if c.ratios.shape != first.ratios.shape:
            raise ValueError(f"curve {name!r} has a different sample count")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["ratio", *curves, "oracle", "worst"])
    for k, r in enumerate(first.ratios):
        w.writerow([f"{r:.6f}", *(f"{c.mious[k]:.6f}" for c in curves.values()),
                    f"{first.oracle_mious[k]:.6f}", f"{first.worst_mious[k]:.6f}"])
    return buf.getvalue()


def rel_auc_table_csv(table: dict) -> str:
    """``method,scenario,auc,rel_auc_percent`` rows from ``{(method, scenario): curve}``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "scenario", "auc", "rel_auc_percent"])
    for (method, scenario), c in table.items():
        w.writerow([method, scenario, f"{c.auc:.6f}", f"{100.0 * c.rel_auc:.2f}"])
    return buf.getvalue()


def _median_time(fn, repeats: int) -> tuple[float, list]:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times), times


BENCH_METHODS = ("sam", "usam_head", "usam_all", "entropy", "mc_T5")


def bench_uq_overhead(mask_size: int = 1024, repeats: int = 10, seed: int = 0,
                      n_heads: int = 9) -> dict:
    """Median wall-times of the UQ add-ons at one resolution.

    Times one synthetic forward pass (``sam``), one USAM head on one token
    vector (``usam_head``), all ``n_heads`` heads (``usam_all``), the mean
    mask entropy of a ``mask_size``-square map (``entropy``) and five
    augmented re-inferences (``mc_T5``). The backend's per-sample geometry is built once before
    timing, and its forward cache is cleared before every timed call.
    """
    from .backend import SyntheticBackend, SyntheticWorld, mc_augmentation_loop, synthesize_sample
    from .masks import mean_mask_entropy, threshold
    from .mlp import MlpParams, mlp_forward
    from .sampling import ModelId, centroid_prompt

    if repeats < 10:
        raise ValueError("repeats must be >= 10")
    if n_heads < 1:
        raise ValueError("n_heads must be >= 1")
    world = SyntheticWorld(seed=seed, image_size=(mask_size, mask_size))
    sample = synthesize_sample(world, seed)
    backend = SyntheticBackend(world, sample).warm()
    prompt = centroid_prompt(sample.gt)
    out = backend.forward(sample.image, prompt, ModelId.L)
    heads = [MlpParams.init(seed=seed + i) for i in range(n_heads)]
    y = out.masks[0]
    m = threshold(y)

    def sam():
        backend.clear_cache()
        backend.forward(sample.image, prompt, ModelId.L)

    def usam_head():
        mlp_forward(heads[0], out.tokens)

    def usam_all():
        for p in heads:
            mlp_forward(p, out.tokens)

    def entropy():
        mean_mask_entropy(y, m)

    def mc():
        backend.clear_cache()
        mc_augmentation_loop(backend, sample.image, prompt, ModelId.L, n_augs=5, seed=seed)

    result = {"mask_size": mask_size, "repeats": repeats, "n_heads": n_heads,
              "median": {}, "times": {}}
    fns = {"sam": sam, "usam_head": usam_head, "usam_all": usam_all, "entropy": entropy, "mc_T5": mc}
    for name in BENCH_METHODS:
        fn = fns[name]
        med, times = _median_time(fn, repeats)
        result["median"][name] = med
        result["times"][name] = times
    med = result["median"]
    result["ratios"] = {"mc_T5/sam": med["mc_T5"] / med["sam"],
                        "entropy/usam_head": med["entropy"] / med["usam_head"],
                        "entropy/usam_all": med["entropy"] / med["usam_all"]}
    return result
