"""Three-layer perceptron trained with SGD + momentum, written against numpy.

The network is ``sigmoid(W3 relu(W2 relu(W1 x + b1) + b2) + b3)`` with a
scalar output. Everything runs in float64 in a fixed operation order, so
training with the same seed reproduces bit-identical parameters on the same
machine.
"""
from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

__all__ = [
    "MlpParams",
    "TrainConfig",
    "KNOWN_GOOD_CONFIG",
    "mlp_forward",
    "mlp_grad",
    "sgd_step",
    "train",
    "random_search",
    "SearchResult",
    "save_checkpoint",
    "load_checkpoint",
    "SigmoidMLPRegressor",
]

PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")

# search space of the hyperparameter optimisation
EPOCH_RANGE = (5, 80)
BATCH_RANGE = (16, 256)
LR_RANGE = (1e-4, 0.1)
MOMENTUM_RANGE = (0.1, 0.9)
WEIGHT_DECAY = 1e-3


@dataclass
class MlpParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray

    @classmethod
    def init(cls, in_dim: int = 512, hidden: int = 512, seed: int = 0) -> "MlpParams":
        """He-uniform weights and zero biases."""
        rng = np.random.default_rng(seed)

        def he(fan_out, fan_in):
            bound = math.sqrt(6.0 / fan_in)
            return rng.uniform(-bound, bound, size=(fan_out, fan_in))

        return cls(he(hidden, in_dim), np.zeros(hidden), he(hidden, hidden), np.zeros(hidden),
                   he(1, hidden), np.zeros(1))

    @classmethod
    def zeros_like(cls, other: "MlpParams") -> "MlpParams":
        return cls(*(np.zeros_like(t) for t in other.tensors()))

    def tensors(self) -> list[np.ndarray]:
        return [getattr(self, n) for n in PARAM_NAMES]

    def copy(self) -> "MlpParams":
        return MlpParams(*(t.copy() for t in self.tensors()))

    @property
    def in_dim(self) -> int:
        return self.W1.shape[1]

    def check(self) -> None:
        h = self.W1.shape[0]
        expected = [(h, self.in_dim), (h,), (h, h), (h,), (1, h), (1,)]
        for name, t, shape in zip(PARAM_NAMES, self.tensors(), expected):
            if t.shape != shape:
                raise ValueError(f"{name} has shape {t.shape}, expected {shape}")
            if not np.isfinite(t).all():
                raise ValueError(f"{name} contains non-finite values")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 79
    batch_size: int = 106
    learning_rate: float = 0.00131
    momentum: float = 0.83
    weight_decay: float = WEIGHT_DECAY
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not (self.learning_rate > 0 and 0 <= self.momentum < 1 and self.weight_decay >= 0):
            raise ValueError(f"invalid optimiser settings in {self}")

    @property
    def in_search_space(self) -> bool:
        return (EPOCH_RANGE[0] <= self.epochs <= EPOCH_RANGE[1]
                and BATCH_RANGE[0] <= self.batch_size <= BATCH_RANGE[1]
                and LR_RANGE[0] <= self.learning_rate <= LR_RANGE[1]
                and MOMENTUM_RANGE[0] <= self.momentum <= MOMENTUM_RANGE[1])

    def replace(self, **kw) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **kw})

    def to_dict(self) -> dict:
        return asdict(self)


# best configuration reported for the Tiny-model IoU head
KNOWN_GOOD_CONFIG = TrainConfig(epochs=79, batch_size=106, learning_rate=0.00131, momentum=0.83033)


def _check_input(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.isfinite(x).all():
        raise ValueError("input contains non-finite values")
    return x


def _forward(p: MlpParams, X: np.ndarray):
    z1 = X @ p.W1.T + p.b1
    h1 = np.maximum(z1, 0.0)
    z2 = h1 @ p.W2.T + p.b2
    h2 = np.maximum(z2, 0.0)
    out = expit(h2 @ p.W3.T + p.b3)[:, 0]
    return z1, h1, z2, h2, out


def mlp_forward(p: MlpParams, x):
    """Network output for one vector (returns a float) or a batch of rows."""
    x = _check_input(x)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.shape[1] != p.in_dim:
        raise ValueError(f"expected {p.in_dim} input features, got {X.shape[1]}")
    out = _forward(p, X)[-1]
    return float(out[0]) if single else out


def _backward(p: MlpParams, X: np.ndarray, err: np.ndarray, cache) -> MlpParams:
    """Gradients of ``sum_i err_i * out_i`` treated through the sigmoid output."""
    z1, h1, z2, h2, out = cache
    d3 = (err * out * (1.0 - out))[:, None]           # (n, 1)
    gW3 = d3.T @ h2
    gb3 = d3.sum(axis=0)
    d2 = (d3 @ p.W3) * (z2 > 0)
    gW2 = d2.T @ h1
    gb2 = d2.sum(axis=0)
    d1 = (d2 @ p.W2) * (z1 > 0)
    gW1 = d1.T @ X
    gb1 = d1.sum(axis=0)
    return MlpParams(gW1, gb1, gW2, gb2, gW3, gb3)


def mlp_grad(p: MlpParams, x, target: float) -> MlpParams:
    """Exact gradient of ``0.5 * (out - target) ** 2`` for a single input."""
    X = _check_input(x)[None, :]
    cache = _forward(p, X)
    err = cache[-1] - float(target)
    return _backward(p, X, err, cache)


def sgd_step(p: MlpParams, grad: MlpParams, velocity: MlpParams, cfg: TrainConfig):
    """One SGD-momentum update with L2 weight decay folded into the velocity.

    ``v <- momentum * v + grad + weight_decay * p`` then ``p <- p - lr * v``.
    Returns new ``(params, velocity)``; the inputs are left untouched.
    """
    new_p, new_v = [], []
    for t, g, v in zip(p.tensors(), grad.tensors(), velocity.tensors()):
        if t.shape != g.shape or t.shape != v.shape:
            raise ValueError(f"shape mismatch: {t.shape}, {g.shape}, {v.shape}")
        v2 = cfg.momentum * v + g + cfg.weight_decay * t
        new_v.append(v2)
        new_p.append(t - cfg.learning_rate * v2)
    return MlpParams(*new_p), MlpParams(*new_v)


def _sgd_step_inplace(p: MlpParams, grad: MlpParams, velocity: MlpParams, cfg: TrainConfig):
    for t, g, v in zip(p.tensors(), grad.tensors(), velocity.tensors()):
        v *= cfg.momentum
        v += g
        v += cfg.weight_decay * t
        t -= cfg.learning_rate * v


def train(X, y, cfg: TrainConfig, hidden: int = 512, init: MlpParams | None = None):
    """Mini-batch training on mean squared error.

    Rows are reshuffled every epoch with a generator seeded by ``cfg.seed``.
    Returns ``(params, losses)`` where ``losses[e]`` is the mean squared error
    over the batches of epoch ``e``, measured before each update.
    """
    X = _check_input(X)
    y = np.asarray(y, dtype=np.float64).ravel()
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("training set is empty")
    if y.shape[0] != X.shape[0]:
        raise ValueError(f"{X.shape[0]} inputs but {y.shape[0]} targets")
    rng = np.random.default_rng(cfg.seed)
    p = init.copy() if init is not None else MlpParams.init(X.shape[1], hidden, seed=int(rng.integers(2**63)))
    v = MlpParams.zeros_like(p)
    n = X.shape[0]
    losses = []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        sq = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb = X[idx]
            cache = _forward(p, xb)
            err = cache[-1] - y[idx]
            sq += float(err @ err)
            # mean over the batch of 0.5 * err**2
            grad = _backward(p, xb, err / idx.size, cache)
            _sgd_step_inplace(p, grad, v, cfg)
        losses.append(sq / n)
    p.check()
    return p, np.asarray(losses)


@dataclass
class SearchResult:
    best_config: TrainConfig
    best_val_loss: float
    trials: list  # (TrainConfig, validation MSE) in sampling order


def _split(n: int, seed: int, frac: float = 0.8):
    if n < 5:
        raise ValueError(f"need at least 5 examples to split into train/validation, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    cut = int(round(frac * n))
    return order[:cut], order[cut:]


def sample_config(rng: np.random.Generator, seed: int = 0) -> TrainConfig:
    """Draw a configuration uniformly from the search space (log-uniform lr)."""
    return TrainConfig(
        epochs=int(rng.integers(EPOCH_RANGE[0], EPOCH_RANGE[1] + 1)),
        batch_size=int(rng.integers(BATCH_RANGE[0], BATCH_RANGE[1] + 1)),
        learning_rate=float(math.exp(rng.uniform(math.log(LR_RANGE[0]), math.log(LR_RANGE[1])))),
        momentum=float(rng.uniform(*MOMENTUM_RANGE)),
        seed=seed,
    )


def validation_loss(X, y, cfg: TrainConfig, hidden: int = 512, split_seed: int = 0) -> float:
    """Train on an 80% split and return the MSE on the held-out 20%."""
    X = _check_input(X)
    y = np.asarray(y, dtype=np.float64).ravel()
    tr, va = _split(X.shape[0], split_seed)
    p, _ = train(X[tr], y[tr], cfg, hidden=hidden)
    err = mlp_forward(p, X[va]) - y[va]
    return float(np.mean(err ** 2))


def random_search(X, y, trials: int, seed: int = 0, hidden: int = 512) -> SearchResult:
    """Seeded random search over the hyperparameter ranges, ranked by validation MSE."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    results = []
    for _ in range(trials):
        cfg = sample_config(rng, seed=seed)
        results.append((cfg, validation_loss(X, y, cfg, hidden=hidden, split_seed=seed)))
    best = min(range(trials), key=lambda i: (results[i][1], i))
    return SearchResult(results[best][0], results[best][1], results)


_MAGIC = b"USAMMLP\x00"
_VERSION = 1


def save_checkpoint(path, p: MlpParams) -> None:
    """Write ``p`` as magic, version, shape table and little-endian float64 data."""
    tensors = p.tensors()
    out = bytearray(_MAGIC)
    out += struct.pack("<II", _VERSION, len(tensors))
    for name, t in zip(PARAM_NAMES, tensors):
        nb = name.encode("ascii")
        out += struct.pack("<B", len(nb)) + nb + struct.pack("<B", t.ndim)
        out += struct.pack(f"<{t.ndim}I", *t.shape)
    for t in tensors:
        out += np.ascontiguousarray(t, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path) -> MlpParams:
    data = Path(path).read_bytes()
    if not data.startswith(_MAGIC):
        raise ValueError(f"{path}: not an MLP checkpoint")
    pos = len(_MAGIC)
    version, count = struct.unpack_from("<II", data, pos)
    pos += 8
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    shapes = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<B", data, pos)
        name = data[pos + 1:pos + 1 + nlen].decode("ascii")
        pos += 1 + nlen
        (ndim,) = struct.unpack_from("<B", data, pos)
        shapes[name] = struct.unpack_from(f"<{ndim}I", data, pos + 1)
        pos += 1 + 4 * ndim
    if tuple(shapes) != PARAM_NAMES:
        raise ValueError(f"{path}: unexpected tensor table {list(shapes)}")
    tensors = []
    for name in PARAM_NAMES:
        size = int(np.prod(shapes[name]))
        arr = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shapes[name])
        tensors.append(arr.astype(np.float64))
        pos += 8 * size
    if pos != len(data):
        raise ValueError(f"{path}: {len(data) - pos} trailing bytes")
    p = MlpParams(*tensors)
    p.check()
    return p


class SigmoidMLPRegressor(RegressorMixin, BaseEstimator):
    """Scikit-learn regressor around :func:`train` for targets in [0, 1] or [-1, 1].

    With ``target="signed"`` targets are mapped to ``(t + 1) / 2`` for
    training and predictions are mapped back with ``2 * out - 1``. Training
    targets are clipped to ``[target_clip, 1 - target_clip]`` after mapping.
    """

    def __init__(self, hidden_size=512, epochs=79, batch_size=106, learning_rate=0.00131,
                 momentum=0.83, weight_decay=WEIGHT_DECAY, target="unit", target_clip=1e-4,
                 random_state=0):
        self.hidden_size = hidden_size
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.target = target
        self.target_clip = target_clip
        self.random_state = random_state

    @classmethod
    def from_config(cls, cfg: TrainConfig, **kw) -> "SigmoidMLPRegressor":
        return cls(epochs=cfg.epochs, batch_size=cfg.batch_size, learning_rate=cfg.learning_rate,
                   momentum=cfg.momentum, weight_decay=cfg.weight_decay, random_state=cfg.seed, **kw)

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                           learning_rate=self.learning_rate, momentum=self.momentum,
                           weight_decay=self.weight_decay, seed=self.random_state)

    def _encode(self, y):
        if self.target == "signed":
            if np.abs(y).max(initial=0.0) > 1:
                raise ValueError("signed targets must lie in [-1, 1]")
            y = (y + 1.0) / 2.0
        elif self.target == "unit":
            if y.min(initial=0.0) < 0 or y.max(initial=0.0) > 1:
                raise ValueError("unit targets must lie in [0, 1]")
        else:
            raise ValueError(f"target must be 'unit' or 'signed', got {self.target!r}")
        return np.clip(y, self.target_clip, 1.0 - self.target_clip)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        self.params_, self.loss_curve_ = train(X, self._encode(y), self.train_config(),
                                               hidden=self.hidden_size)
        self.n_features_in_ = X.shape[1]
        return self

    def predict_raw(self, X):
        """Sigmoid output before the signed-target mapping."""
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        return mlp_forward(self.params_, X)

    def predict(self, X):
        out = self.predict_raw(X)
        return 2.0 * out - 1.0 if self.target == "signed" else out

    def set_fitted_params(self, params: MlpParams) -> "SigmoidMLPRegressor":
        params.check()
        self.params_ = params
        self.loss_curve_ = np.empty(0)
        self.n_features_in_ = params.in_dim
        return self
