"""Monte-Carlo entropy estimators over a grid of SAM predictions.

A :class:`SampleSet` holds every prediction for one (image, task) pair. The
estimators mix the stored probability maps with the sampling weights and
score the mixture with :func:`~usamkit.masks.weighted_mask_entropy`:

* :func:`predictive_entropy` mixes the whole grid (augmentations, prompts,
  models, heads), heads weighted by their normalised SamScores.
* :func:`epistemic_entropy` mixes the best head of every model.
* :func:`prompt_entropy` mixes the best head of every sampled prompt.
* :func:`task_entropy` mixes the three heads of a single forward pass.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .masks import check_binary_mask, iou, threshold, weighted_mask_entropy
from .sampling import MODELS, N_HEADS, AugKind, ModelId, SampleConfig

__all__ = [
    "Record",
    "SampleSet",
    "MissingRecordsError",
    "task_probs",
    "best_head",
    "mixture_weights",
    "predictive_mixture",
    "predictive_entropy",
    "epistemic_entropy",
    "prompt_entropy",
    "task_entropy",
]


class MissingRecordsError(KeyError):
    """The sample set lacks cells an estimator needs."""

    def __init__(self, message: str, missing=()):
        super().__init__(message)
        self.missing = list(missing)

    def __str__(self):
        return self.args[0]


@dataclass
class Record:
    """One mask proposal of one forward pass, stored in the ground-truth frame."""

    config: SampleConfig
    mask: np.ndarray
    sam_score: float
    tokens: np.ndarray | None = None


@dataclass
class SampleSet:
    """All stored predictions for one image and task.

    Prompt indices ``0 .. n_prompts - 1`` are the sampled single-point
    prompts (index 0 is the centroid prompt); index ``n_prompts`` holds the
    refined prompt made of all sampled points. ``degenerate=True`` lifts the
    full-grid requirement so that hand-built record lists can be scored.
    """

    image_id: str
    gt: np.ndarray
    records: list[Record]
    n_prompts: int
    degenerate: bool = False
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.gt = check_binary_mask(self.gt, "gt")
        if self.n_prompts < 1:
            raise ValueError("n_prompts must be >= 1")
        for rec in self.records:
            if rec.mask.shape != self.gt.shape:
                raise ValueError(f"record {rec.config} mask shape {rec.mask.shape} "
                                 f"does not match gt shape {self.gt.shape}")

    @property
    def refined_index(self) -> int:
        return self.n_prompts

    @property
    def index(self) -> dict:
        if self._index is None or len(self._index) != len(self.records):
            self._index = {r.config: r for r in self.records}
        return self._index

    def get(self, aug, prompt_index, model, head) -> Record:
        cfg = SampleConfig(AugKind(aug), prompt_index, ModelId(model), head)
        try:
            return self.index[cfg]
        except KeyError:
            raise MissingRecordsError(f"{self.image_id}: missing record {cfg}", [cfg]) from None

    def heads(self, aug, prompt_index, model) -> list[Record]:
        """The three head records of one forward pass, ordered by head."""
        missing = []
        out = []
        for h in range(N_HEADS):
            cfg = SampleConfig(AugKind(aug), prompt_index, ModelId(model), h)
            rec = self.index.get(cfg)
            if rec is None:
                missing.append(cfg)
            out.append(rec)
        if self.degenerate and len(missing) < N_HEADS:
            return [r for r in out if r is not None]
        if missing:
            raise MissingRecordsError(f"{self.image_id}: missing records {missing}", missing)
        return out

    def present(self, aug=None, prompt_index=None, model=None) -> list[Record]:
        return [r for r in self.records
                if (aug is None or r.config.aug == aug)
                and (prompt_index is None or r.config.prompt_index == prompt_index)
                and (model is None or r.config.model == model)]


def task_probs(sam_scores) -> np.ndarray:
    """Normalise SamScores into task probabilities; all-zero scores give uniform."""
    s = np.asarray(sam_scores, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise ValueError("sam_scores must be a non-empty 1-D sequence")
    if not np.isfinite(s).all():
        raise ValueError("sam_scores must be finite")
    if (s < 0).any():
        raise ValueError(f"sam_scores must be non-negative, got {s.tolist()}")
    total = s.sum()
    if total == 0.0:
        return np.full(s.size, 1.0 / s.size)
    return s / total


def best_head(gt, masks) -> int:
    """Index of the proposal whose thresholded mask best matches ``gt``.

    Ties go to the lowest index.
    """
    scores = [iou(threshold(m), gt) for m in masks]
    return int(np.argmax(scores))


def _full_grid_missing(s: SampleSet, augs, prompts, models) -> list[SampleConfig]:
    idx = s.index
    return [SampleConfig(a, p, m, h)
            for a, p, m, h in itertools.product(augs, prompts, models, range(N_HEADS))
            if SampleConfig(a, p, m, h) not in idx]


def mixture_weights(s: SampleSet) -> list[tuple[Record, float]]:
    """Weight of every record in the predictive mixture.

    A record gets its head's task probability divided by the number of
    forward passes, i.e. (augmentation, prompt, model) combinations present.
    Task probabilities are normalised within each forward pass, so the
    weights always sum to one.
    """
    prompts = range(s.n_prompts)
    if s.degenerate:
        recs = [r for r in s.records if r.config.prompt_index < s.n_prompts]
        if not recs:
            raise MissingRecordsError(f"{s.image_id}: no records to mix")
        augs = sorted({r.config.aug for r in recs}, key=list(AugKind).index)
        used_prompts = sorted({r.config.prompt_index for r in recs})
        models = sorted({r.config.model for r in recs}, key=list(MODELS).index)
    else:
        augs, used_prompts, models = list(AugKind), list(prompts), list(MODELS)
        missing = _full_grid_missing(s, augs, used_prompts, models)
        if missing:
            raise MissingRecordsError(
                f"{s.image_id}: {len(missing)} grid cells missing, e.g. {missing[:5]}", missing)
    groups = [g for g in (s.present(a, p, m)
                          for a, p, m in itertools.product(augs, used_prompts, models)) if g]
    # equals |T| * |X_P| * |Theta| on a full grid
    n_passes = len(groups)
    out = []
    for group in groups:
        group.sort(key=lambda r: r.config.head)
        probs = task_probs([r.sam_score for r in group])
        out.extend((r, pr / n_passes) for r, pr in zip(group, probs))
    return out


# Weighted sums of identical hard masks land a few ulps off 0 or 1; the
# entropy clamp would turn that round-off into a spurious H(1 - EPS).
_SNAP = 1e-12


def _finish_mixture(acc: np.ndarray) -> np.ndarray:
    acc = np.clip(acc, 0.0, 1.0)
    acc[acc < _SNAP] = 0.0
    acc[acc > 1.0 - _SNAP] = 1.0
    return acc


def predictive_mixture(s: SampleSet) -> np.ndarray:
    acc = np.zeros(s.gt.shape, dtype=np.float64)
    for rec, w in mixture_weights(s):
        acc += w * rec.mask
    return _finish_mixture(acc)


def predictive_entropy(s: SampleSet) -> float:
    """Entropy of the SamScore-weighted mixture of the whole sampling grid."""
    return weighted_mask_entropy(predictive_mixture(s))


def _best_mask(s: SampleSet, aug, prompt_index, model, gt) -> np.ndarray:
    heads = s.heads(aug, prompt_index, model)
    return heads[best_head(gt, [r.mask for r in heads])].mask


def _uniform_mixture(masks) -> np.ndarray:
    acc = np.zeros(masks[0].shape, dtype=np.float64)
    for m in masks:
        acc += m
    return _finish_mixture(acc / len(masks))


def epistemic_entropy(s: SampleSet, prompt_index: int = 0, gt=None) -> float:
    """Entropy of the uniform mixture of every model's best-fitting head."""
    gt = s.gt if gt is None else check_binary_mask(gt, "gt")
    models = MODELS
    if s.degenerate:
        models = [m for m in MODELS if s.present(AugKind.IDENTITY, prompt_index, m)]
        if not models:
            raise MissingRecordsError(f"{s.image_id}: no identity records at prompt {prompt_index}")
    masks = [_best_mask(s, AugKind.IDENTITY, prompt_index, m, gt) for m in models]
    return weighted_mask_entropy(_uniform_mixture(masks))


def prompt_entropy(s: SampleSet, model=ModelId.L, gt=None) -> float:
    """Entropy of the uniform mixture of the best head for every sampled prompt."""
    gt = s.gt if gt is None else check_binary_mask(gt, "gt")
    model = ModelId(model)
    prompts = range(s.n_prompts)
    if s.degenerate:
        prompts = [p for p in prompts if s.present(AugKind.IDENTITY, p, model)]
        if not prompts:
            raise MissingRecordsError(f"{s.image_id}: no identity records for model {model.value}")
    masks = [_best_mask(s, AugKind.IDENTITY, p, model, gt) for p in prompts]
    return weighted_mask_entropy(_uniform_mixture(masks))


def task_entropy(s: SampleSet, prompt_index: int = 0, model=ModelId.L) -> float:
    """Entropy of the three head masks of one pass weighted by task probability.

    Needs no ground truth.
    """
    heads = s.heads(AugKind.IDENTITY, prompt_index, ModelId(model))
    probs = task_probs([r.sam_score for r in heads])
    acc = np.zeros(s.gt.shape, dtype=np.float64)
    for r, p in zip(heads, probs):
        acc += p * r.mask
    return weighted_mask_entropy(_finish_mixture(acc))
