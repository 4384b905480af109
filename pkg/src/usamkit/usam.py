"""USAM: MLP heads that read SAM tokens and predict IoUs and IoU gaps.

Nine heads share the 512-d token input:

* ``usam_L``, ``usam_B+``, ``usam_S``, ``usam_T``: IoU each model size reaches,
* ``usam_refined``: IoU with the refined multi-point prompt,
* ``usam_sam``: IoU of the head picked by the highest SamScore,
* ``delta_theta``, ``delta_prompt``, ``delta_task``: the model, prompt and
  task gaps predicted directly (signed targets).

The composed gaps are differences of IoU heads; the direct heads learn the
same quantities end to end.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .backend import IOU_TOKEN, MASK_TOKEN, TOKEN_DIM, TOKEN_LAYOUT_VERSION
from .bayes import MissingRecordsError, SampleSet, best_head
from .evaluation import ScoredSample, correction_curve, scenario_ious
from .masks import iou, threshold
from .mlp import TrainConfig, WEIGHT_DECAY, SigmoidMLPRegressor, load_checkpoint, save_checkpoint
from .sampling import MODELS, AugKind, ModelId

__all__ = [
    "TARGET_NAMES",
    "HEAD_NAMES",
    "TrainingExample",
    "build_training_set",
    "training_arrays",
    "head_targets",
    "USAM",
    "zero_tokens",
    "token_ablation",
]

TARGET_NAMES = ("T", "S", "B+", "L", "refined", "sam_selected")
IOU_HEADS = ("usam_L", "usam_B+", "usam_S", "usam_T", "usam_refined", "usam_sam")
DELTA_HEADS = {"theta": "delta_theta", "prompt": "delta_prompt", "task": "delta_task"}
HEAD_NAMES = IOU_HEADS + tuple(DELTA_HEADS.values())
TOKEN_ZEROING = {"none": None, "mask_token": MASK_TOKEN, "iou_token": IOU_TOKEN}


@dataclass
class TrainingExample:
    sample_id: str
    source: ModelId
    tokens: np.ndarray
    targets: dict


def _pass_ious(s: SampleSet, prompt_index: int, model: ModelId):
    heads = s.heads(AugKind.IDENTITY, prompt_index, model)
    masks = [r.mask for r in heads]
    b = best_head(s.gt, masks)
    sel = int(np.argmax([r.sam_score for r in heads]))
    return (iou(threshold(masks[b]), s.gt), iou(threshold(masks[sel]), s.gt), heads[0].tokens)


def build_training_set(samples, sources=MODELS) -> list[TrainingExample]:
    """One example per (sample, token-source model).

    Per-model targets use the best head at the centroid prompt (index 0);
    ``refined`` uses the best head of the source model at the refined prompt
    and ``sam_selected`` the source model's highest-SamScore head.
    """
    out = []
    for s in samples:
        try:
            per_model = {m: _pass_ious(s, 0, m) for m in MODELS}
            refined = {m: _pass_ious(s, s.refined_index, m)[0] for m in sources}
        except MissingRecordsError as exc:
            raise MissingRecordsError(f"sample {s.image_id!r}: {exc}", exc.missing) from None
        for m in sources:
            m = ModelId(m)
            best, selected, tokens = per_model[m]
            if tokens is None or np.shape(tokens) != (TOKEN_DIM,):
                raise ValueError(f"sample {s.image_id!r}: model {m.value} has no 512-d tokens")
            targets = {mm.value: per_model[mm][0] for mm in MODELS}
            targets["refined"] = refined[m]
            targets["sam_selected"] = selected
            out.append(TrainingExample(s.image_id, m, np.asarray(tokens, dtype=np.float64), targets))
    return out


def training_arrays(examples):
    """``(X, Y, sources)`` with ``Y`` columns ordered as :data:`TARGET_NAMES`."""
    if not examples:
        raise ValueError("no training examples")
    X = np.stack([e.tokens for e in examples])
    Y = np.array([[e.targets[k] for k in TARGET_NAMES] for e in examples], dtype=np.float64)
    src = np.array([ModelId(e.source).value for e in examples])
    return X, Y, src


def head_targets(examples) -> dict:
    """Training target of every head for every example."""
    _, Y, src = training_arrays(examples)
    col = {k: Y[:, i] for i, k in enumerate(TARGET_NAMES)}
    own = np.array([col[s][i] for i, s in enumerate(src)])
    return {
        "usam_L": col["L"], "usam_B+": col["B+"], "usam_S": col["S"], "usam_T": col["T"],
        "usam_refined": col["refined"], "usam_sam": col["sam_selected"],
        "delta_theta": col["L"] - col["T"],
        "delta_prompt": col["refined"] - own,
        "delta_task": own - col["sam_selected"],
    }


def zero_tokens(X, zero: str = "none") -> np.ndarray:
    if zero not in TOKEN_ZEROING:
        raise ValueError(f"zero must be one of {list(TOKEN_ZEROING)}, got {zero!r}")
    X = np.array(X, dtype=np.float64, copy=True)
    sl = TOKEN_ZEROING[zero]
    if sl is not None:
        X[:, sl] = 0.0
    return X


class USAM(BaseEstimator):
    """Bundle of USAM heads with a scikit-learn style interface.

    Parameters
    ----------
    heads : tuple of str
        Heads to train; any subset of :data:`HEAD_NAMES`.
    epochs, batch_size, learning_rate, momentum, weight_decay : training settings
        Shared by every head, see :class:`~usamkit.mlp.TrainConfig`.
    hidden_size : int
        Width of both hidden layers.
    zero : {"none", "mask_token", "iou_token"}
        Token half to blank out before training and inference.
    random_state : int
        Base seed; head ``i`` trains with ``random_state + i``.
    """

    def __init__(self, heads=HEAD_NAMES, epochs=79, batch_size=106, learning_rate=0.00131,
                 momentum=0.83, weight_decay=WEIGHT_DECAY, hidden_size=512, zero="none",
                 random_state=0):
        self.heads = heads
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.hidden_size = hidden_size
        self.zero = zero
        self.random_state = random_state

    @classmethod
    def from_config(cls, cfg: TrainConfig, **kw) -> "USAM":
        return cls(epochs=cfg.epochs, batch_size=cfg.batch_size, learning_rate=cfg.learning_rate,
                   momentum=cfg.momentum, weight_decay=cfg.weight_decay,
                   random_state=cfg.seed, **kw)

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                           learning_rate=self.learning_rate, momentum=self.momentum,
                           weight_decay=self.weight_decay, seed=self.random_state)

    def _regressor(self, name: str) -> SigmoidMLPRegressor:
        seed = self.random_state + HEAD_NAMES.index(name)
        return SigmoidMLPRegressor.from_config(
            self.train_config().replace(seed=seed), hidden_size=self.hidden_size,
            target="signed" if name.startswith("delta") else "unit")

    def fit(self, examples, y=None):
        unknown = set(self.heads) - set(HEAD_NAMES)
        if unknown:
            raise ValueError(f"unknown heads {sorted(unknown)}")
        X = zero_tokens(training_arrays(examples)[0], self.zero)
        targets = head_targets(examples)
        self.regressors_ = {}
        for name in HEAD_NAMES:
            if name in self.heads:
                self.regressors_[name] = self._regressor(name).fit(X, targets[name])
        self.n_features_in_ = X.shape[1]
        return self

    def _inputs(self, tokens) -> tuple[np.ndarray, bool]:
        X = np.asarray(tokens, dtype=np.float64)
        single = X.ndim == 1
        X = X[None, :] if single else X
        if X.shape[1] != TOKEN_DIM:
            raise ValueError(f"tokens must have {TOKEN_DIM} dimensions, got {X.shape[1]}")
        return zero_tokens(X, self.zero), single

    def head_output(self, name: str, tokens):
        """Sigmoid output of one head (signed heads are mapped to [-1, 1])."""
        reg = getattr(self, "regressors_", {}).get(name)
        if reg is None:
            raise NotFittedError(f"head {name!r} has not been trained")
        X, single = self._inputs(tokens)
        out = reg.predict(X)
        return float(out[0]) if single else out

    def predict_iou(self, tokens, model):
        return self.head_output(f"usam_{ModelId(model).value}", tokens)

    def predictive_uncertainty(self, tokens, source_model):
        """One minus the IoU the source model is expected to reach."""
        return 1.0 - self.predict_iou(tokens, source_model)

    def delta_model(self, tokens):
        return self.head_output("usam_L", tokens) - self.head_output("usam_T", tokens)

    def delta_prompt(self, tokens, source_model):
        return self.head_output("usam_refined", tokens) - self.predict_iou(tokens, source_model)

    def delta_task(self, tokens, source_model):
        return self.predict_iou(tokens, source_model) - self.head_output("usam_sam", tokens)

    def direct_delta(self, kind: str, tokens):
        if kind not in DELTA_HEADS:
            raise ValueError(f"kind must be one of {list(DELTA_HEADS)}, got {kind!r}")
        return self.head_output(DELTA_HEADS[kind], tokens)

    def uncertainty_columns(self, tokens, source_model) -> dict:
        """Every uncertainty score the trained heads support, one array each."""
        X = np.atleast_2d(np.asarray(tokens, dtype=np.float64))
        fitted = getattr(self, "regressors_", {})
        src = ModelId(source_model)
        cols = {}
        if f"usam_{src.value}" in fitted:
            cols["usam"] = self.predictive_uncertainty(X, src)
        if {"usam_L", "usam_T"} <= set(fitted):
            cols["delta_theta"] = self.delta_model(X)
        if {"usam_refined", f"usam_{src.value}"} <= set(fitted):
            cols["delta_prompt"] = self.delta_prompt(X, src)
        if {"usam_sam", f"usam_{src.value}"} <= set(fitted):
            cols["delta_task"] = self.delta_task(X, src)
        for kind, name in DELTA_HEADS.items():
            if name in fitted:
                cols[f"direct_{name}"] = self.direct_delta(kind, X)
        return cols

    def save(self, directory, extra: dict | None = None) -> Path:
        """Write one checkpoint per head plus ``manifest.json``."""
        if not hasattr(self, "regressors_"):
            raise NotFittedError("USAM has not been fitted")
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        heads = {}
        for name, reg in self.regressors_.items():
            fname = f"{name.replace('+', 'plus')}.mlp"
            save_checkpoint(d / fname, reg.params_)
            heads[name] = {"file": fname, "target": reg.target,
                           "seed": reg.random_state}
        manifest = {
            "format": "usamkit-heads",
            "version": 1,
            "token_layout": {"version": TOKEN_LAYOUT_VERSION,
                             "mask_token": [MASK_TOKEN.start, MASK_TOKEN.stop],
                             "iou_token": [IOU_TOKEN.start, IOU_TOKEN.stop]},
            "params": {k: (list(v) if isinstance(v, tuple) else v)
                       for k, v in self.get_params().items()},
            "heads": heads,
        }
        if extra:
            manifest.update(extra)
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return d

    @classmethod
    def load(cls, directory) -> "USAM":
        d = Path(directory)
        manifest = json.loads((d / "manifest.json").read_text())
        if manifest.get("format") != "usamkit-heads":
            raise ValueError(f"{d}: not a USAM head bundle")
        layout = manifest["token_layout"]
        if layout["version"] != TOKEN_LAYOUT_VERSION:
            raise ValueError(f"{d}: token layout version {layout['version']} is not supported")
        params = dict(manifest["params"])
        params["heads"] = tuple(params["heads"])
        est = cls(**params)
        est.regressors_ = {}
        for name, info in manifest["heads"].items():
            reg = est._regressor(name)
            reg.target = info["target"]
            est.regressors_[name] = reg.set_fitted_params(load_checkpoint(d / info["file"]))
        est.n_features_in_ = TOKEN_DIM
        return est


ABLATION_SCENARIOS = {"theta": "model-swap", "prompt": "prompt-refine", "task": "task-supervise"}


def token_ablation(train_examples, test_examples, zero: str = "none",
                   config: TrainConfig | None = None, source=ModelId.T, hidden_size: int = 512) -> dict:
    """Retrain the direct gap heads on zeroed tokens and score them.

    Returns ``{scenario: rel_auc}`` for the model-swap, prompt-refine and
    task-supervise scenarios, evaluated on the test examples whose tokens
    come from ``source``.
    """
    cfg = config or TrainConfig()
    est = USAM.from_config(cfg, heads=tuple(DELTA_HEADS.values()), zero=zero,
                           hidden_size=hidden_size)
    est.fit(train_examples)
    src = ModelId(source)
    test = [e for e in test_examples if ModelId(e.source) is src]
    X = np.stack([e.tokens for e in test])
    report = {"zero": zero}
    for kind, scenario in ABLATION_SCENARIOS.items():
        unc = est.direct_delta(kind, X)
        scored = [ScoredSample(e.sample_id, *scenario_ious(e.targets, src.value, scenario), float(u))
                  for e, u in zip(test, unc)]
        report[scenario] = correction_curve(scored).rel_auc
    return report
