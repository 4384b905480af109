"""Segmentation backends.

A backend turns ``(image, prompt, model)`` into three mask proposals, three
SamScores and a 512-d token vector (:class:`ForwardOutput`). Real SAM
inference is not bundled; :class:`SyntheticBackend` renders a deterministic
stand-in whose error sources are explicit knobs of a :class:`SyntheticWorld`:

* model capacity: boundary corruption grows from Large to Tiny,
* prompt quality: single points far from the object core corrupt more, and
  multi-point prompts remove a ``prompt_gain`` fraction of that error,
* task ambiguity: with probability ``ambiguity`` the heads segment the
  part / object / group granularities and SamScores cannot tell which one
  the user meant,
* input degradation: photometric augmentations add corruption in
  proportion to how far the pixels moved.
"""
from __future__ import annotations

import dataclasses
import functools
import threading
import zlib
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
from scipy import ndimage
from scipy.special import expit

from .bayes import Record, SampleSet
from .masks import iou
from .sampling import (
    BLUR_SIGMA,
    MODELS,
    N_HEADS,
    NOISE_SIGMA,
    Augmentation,
    AugKind,
    ModelId,
    PointPrompt,
    SampleConfig,
    apply_augmentation,
    sample_prompt_points,
)

TOKEN_DIM = 512
MASK_TOKEN = slice(0, 256)
IOU_TOKEN = slice(256, 512)
TOKEN_LAYOUT_VERSION = 1

# coarse control grid of the smooth boundary-corruption field
_FIELD_CELLS = 5
# corruption field mix: the part shared by every prompt on the same input
_SHARED = 0.8
_OWN = 0.6
# reference resolution that corruption strengths are expressed in
_REF_SIZE = 32.0


@dataclass
class ForwardOutput:
    masks: np.ndarray       # (3, H, W) foreground probabilities
    sam_scores: np.ndarray  # (3,)
    tokens: np.ndarray      # (512,)

    def __post_init__(self):
        if self.masks.ndim != 3 or self.masks.shape[0] != N_HEADS:
            raise ValueError(f"expected {N_HEADS} masks, got shape {self.masks.shape}")
        if self.sam_scores.shape != (N_HEADS,) or not np.isfinite(self.sam_scores).all():
            raise ValueError("expected 3 finite SamScores")
        if self.tokens.shape != (TOKEN_DIM,):
            raise ValueError(f"tokens must have length {TOKEN_DIM}, got {self.tokens.shape}")


class Backend(Protocol):
    def forward(self, image: np.ndarray, prompt: PointPrompt, model: ModelId) -> ForwardOutput:
        ...


def _default_model_noise():
    return {ModelId.L: 0.8, ModelId.BPLUS: 1.3, ModelId.S: 1.8, ModelId.T: 2.4}


@dataclass(frozen=True, eq=True)
class SyntheticWorld:
    """Parameters of the synthetic segmentation world.

    Corruption strengths are boundary displacements in pixels at a 32x32
    reference resolution and scale with the image size.
    """

    seed: int = 0
    image_size: tuple = (32, 32)
    model_noise: dict = field(default_factory=_default_model_noise, hash=False)
    prompt_gain: float = 0.7
    ambiguity: float = 0.3
    score_noise: float = 0.05
    prompt_noise: float = 4.0
    degradation_gain: float = 10.0
    token_noise: float = 0.05
    nuisance: float = 0.1
    temperature: float = 0.5
    noise_sigma: float = NOISE_SIGMA
    blur_sigma: float = BLUR_SIGMA

    def __post_init__(self):
        h, w = self.image_size
        if h < 16 or w < 16:
            raise ValueError(f"image_size must be at least 16x16, got {self.image_size}")
        object.__setattr__(self, "image_size", (int(h), int(w)))
        noise = {ModelId(k): float(v) for k, v in self.model_noise.items()}
        if set(noise) != set(MODELS):
            raise ValueError(f"model_noise needs an entry for each of {[m.value for m in MODELS]}")
        object.__setattr__(self, "model_noise", noise)
        values = {f"model_noise[{m.value}]": v for m, v in noise.items()}
        values.update({name: getattr(self, name) for name in (
            "prompt_gain", "ambiguity", "score_noise", "prompt_noise", "degradation_gain",
            "token_noise", "nuisance", "noise_sigma", "blur_sigma")})
        for name, value in values.items():
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be a finite non-negative number, got {value!r}")
        if self.ambiguity > 1 or self.prompt_gain > 1:
            raise ValueError("ambiguity and prompt_gain must lie in [0, 1]")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        order = [noise[m] for m in (ModelId.T, ModelId.S, ModelId.BPLUS, ModelId.L)]
        if any(a < b for a, b in zip(order, order[1:])):
            raise ValueError("model_noise must satisfy T >= S >= B+ >= L")

    def replace(self, **changes) -> "SyntheticWorld":
        return dataclasses.replace(self, **changes)

    @classmethod
    def with_model_spread(cls, base: float, spread: float, **kw) -> "SyntheticWorld":
        """World whose corruption rises linearly by ``spread`` from Large to Tiny."""
        noise = {m: base + spread * i / 3 for i, m in enumerate(MODELS)}
        return cls(model_noise=noise, **kw)

    @property
    def scale(self) -> float:
        return min(self.image_size) / _REF_SIZE

    def augmentations(self) -> list[Augmentation]:
        return [Augmentation.default(k, noise_sigma=self.noise_sigma, blur_sigma=self.blur_sigma)
                for k in AugKind]


@dataclass
class TaskFamily:
    """Granularity hierarchy of one synthetic object (part within object within group)."""

    part: np.ndarray
    object: np.ndarray
    group: np.ndarray
    ambiguous: bool

    @property
    def head_targets(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if self.ambiguous:
            return (self.part, self.object, self.group)
        return (self.object, self.object, self.object)


@dataclass
class SyntheticSample:
    seed: int
    image: np.ndarray
    gt: np.ndarray
    family: TaskFamily
    hardness: float
    prompt_difficulty: float


def _rng(*keys) -> np.random.Generator:
    return np.random.default_rng([int(k) & 0xFFFFFFFF for k in keys])


def _ellipse(shape, cy, cx, a, b, theta) -> np.ndarray:
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]]
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u = (dy * c + dx * s) / a
    v = (-dy * s + dx * c) / b
    return u * u + v * v <= 1.0


@functools.lru_cache(maxsize=64)
def _interp_matrix(n: int, cells: int) -> np.ndarray:
    """Linear interpolation from ``cells`` control points to ``n`` pixel centres."""
    x = np.clip((np.arange(n) + 0.5) * cells / n - 0.5, 0.0, cells - 1.0)
    lo = np.minimum(np.floor(x).astype(int), cells - 2)
    frac = x - lo
    m = np.zeros((n, cells))
    m[np.arange(n), lo] = 1.0 - frac
    m[np.arange(n), lo + 1] = frac
    m.setflags(write=False)
    return m


def _smooth(rng, shape, cells=_FIELD_CELLS) -> np.ndarray:
    coarse = rng.standard_normal((cells, cells))
    return _interp_matrix(shape[0], cells) @ coarse @ _interp_matrix(shape[1], cells).T


def synthesize_sample(world: SyntheticWorld, sample_seed: int) -> SyntheticSample:
    """Render one synthetic image with its ground truth and granularity hierarchy.

    The ground truth (the "object") is the union of a main ellipse and up to
    two attached lobes. The part is a shrunken copy of the main ellipse and
    the group adds a neighbouring ellipse to the object.
    """
    h, w = world.image_size
    m = min(h, w)
    rng = _rng(world.seed, sample_seed, 101)
    shape = (h, w)

    cy, cx = rng.uniform(0.3, 0.7) * h, rng.uniform(0.3, 0.7) * w
    a, b = rng.uniform(0.12, 0.26, size=2) * m
    theta = rng.uniform(0, np.pi)
    main = _ellipse(shape, cy, cx, a, b, theta)
    obj = main.copy()
    for _ in range(int(rng.integers(0, 3))):
        phi = rng.uniform(0, 2 * np.pi)
        rad = 0.9 * max(a, b)
        r = rng.uniform(0.4, 0.7) * min(a, b)
        obj |= _ellipse(shape, cy + rad * np.sin(phi), cx + rad * np.cos(phi), r,
                        r * rng.uniform(0.6, 1.0), rng.uniform(0, np.pi))
    part = _ellipse(shape, cy, cx, 0.6 * a, 0.6 * b, theta)
    if not part.any():
        part[int(round(cy)), int(round(cx))] = True
    part &= obj

    phi = rng.uniform(0, 2 * np.pi)
    rn = rng.uniform(0.16, 0.28) * m
    dist = max(a, b) + 0.8 * rn
    neighbour = _ellipse(shape, cy + dist * np.sin(phi), cx + dist * np.cos(phi), rn,
                         rn * rng.uniform(0.6, 1.0), rng.uniform(0, np.pi))
    group = obj | neighbour

    ambiguous = bool(rng.random() < world.ambiguity)
    hardness = float(rng.random())
    prompt_difficulty = float(rng.random())

    base = 70.0 + 25.0 * _smooth(rng, shape)
    img = np.repeat(base[..., None], 3, axis=2)
    img[neighbour & ~obj] = 130.0
    img[obj] = 185.0
    img[obj] += 15.0 * _smooth(rng, shape, cells=8)[obj, None]
    img += rng.normal(0.0, 6.0, size=img.shape)
    img *= np.array([1.0, 0.92, 0.85])
    image = np.clip(np.rint(img), 0, 255).astype(np.uint8)

    family = TaskFamily(part=part, object=obj, group=group, ambiguous=ambiguous)
    return SyntheticSample(seed=int(sample_seed), image=image, gt=obj.copy(), family=family,
                           hardness=hardness, prompt_difficulty=prompt_difficulty)


def synthetic_sam_score(true_iou: float, sigma: float, seed) -> float:
    """Noisy IoU self-estimate clamped to ``[0, 1]``."""
    if not 0.0 <= true_iou <= 1.0:
        raise ValueError(f"true_iou must lie in [0, 1], got {true_iou!r}")
    if sigma == 0:
        return float(true_iou)
    rng = np.random.default_rng(seed)
    return float(np.clip(true_iou + rng.normal(0.0, sigma), 0.0, 1.0))


@dataclass
class TokenFeatures:
    """Quantities a synthetic forward pass leaks into its tokens."""

    model_ious: np.ndarray        # best-head IoU of L, B+, S, T at this input
    prompt_term: float            # corruption caused by the prompt
    prompt_difficulty: float
    head_disagreement: float      # 1 - mean pairwise IoU of the three heads
    log_area: float               # log foreground fraction of the object
    degradation: float
    sam_scores: np.ndarray
    ambiguous: bool
    own_iou: float

    def mask_vector(self) -> np.ndarray:
        return np.concatenate([
            (self.model_ious - 0.7) / 0.2,
            [(self.prompt_term - 0.75) / 0.5,
             (self.prompt_difficulty - 0.5) / 0.3,
             (self.head_disagreement - 0.2) / 0.2,
             (self.log_area + 2.3) / 0.6,
             self.degradation * 10.0],
        ])

    def iou_vector(self) -> np.ndarray:
        onehot = np.full(N_HEADS, -0.5)
        onehot[int(np.argmax(self.sam_scores))] = 1.0
        return np.concatenate([
            (self.sam_scores - 0.7) / 0.2,
            onehot,
            [1.0 if self.ambiguous else -1.0, (self.own_iou - 0.7) / 0.2],
        ])


_PROJECTIONS: dict = {}
_PROJ_LOCK = threading.Lock()


def _projections(seed: int, n_features: int):
    key = (seed, n_features)
    with _PROJ_LOCK:
        if key not in _PROJECTIONS:
            rng = _rng(seed, 7)
            _PROJECTIONS[key] = (rng.standard_normal((256, n_features)) / np.sqrt(n_features),
                                 rng.standard_normal((256, n_features)) / np.sqrt(n_features))
        return _PROJECTIONS[key]


def synthetic_tokens(world: SyntheticWorld, features: TokenFeatures, nuisance_seed) -> np.ndarray:
    """Project the forward-pass features into a 512-d token vector.

    Both 256-d halves are fixed random projections (per ``world.seed``) of
    the full feature vector, each read through its own feature noise, so
    either half alone is informative and the pair is more so. Feature noise
    and the per-dimension nuisance are drawn from ``nuisance_seed``.
    """
    f = np.concatenate([features.mask_vector(), features.iou_vector()])
    pm, pi = _projections(world.seed, f.size)
    rng = np.random.default_rng(nuisance_seed)
    feat_sigma = world.token_noise / 0.2
    fm = f + rng.normal(0.0, feat_sigma, f.size)
    fi = f + rng.normal(0.0, feat_sigma, f.size)
    tokens = np.concatenate([pm @ fm, pi @ fi])
    return tokens + rng.normal(0.0, world.nuisance, TOKEN_DIM)


def _image_key(img: np.ndarray) -> int:
    return zlib.crc32(img.tobytes()) ^ (img.shape[0] << 16) ^ img.shape[1]


def _prompt_key(prompt: PointPrompt) -> int:
    return zlib.crc32(np.asarray(prompt.points, dtype=np.int64).tobytes())


class SyntheticBackend:
    """Deterministic stand-in for SAM bound to one synthetic sample.

    The backend recognises which augmentation was applied by comparing the
    input with the clean rendering (and its vertical flip), so augmented
    inputs yield predictions in the augmented frame, as a real model would.
    """

    _CACHE_SIZE = 16

    def __init__(self, world: SyntheticWorld, sample: SyntheticSample):
        self.world = world
        self.sample = sample
        self._clean = sample.image.astype(np.int16)
        self._frames = {}
        self._cache = {}
        self._lock = threading.Lock()

    def _frame(self, flipped: bool):
        with self._lock:
            fr = self._frames.get(flipped)
        if fr is not None:
            return fr
        fam = self.sample.family
        targets = [t[::-1] if flipped else t for t in (fam.part, fam.object, fam.group)]
        scale = self.world.scale
        sdist = [(ndimage.distance_transform_edt(t) - ndimage.distance_transform_edt(~t)) / scale
                 for t in targets]
        inner = ndimage.distance_transform_edt(targets[1])
        fr = {"targets": targets, "sdist": sdist, "inner": inner}
        with self._lock:
            self._frames[flipped] = fr
        return fr

    def warm(self) -> "SyntheticBackend":
        """Precompute the per-sample geometry for both orientations."""
        self._frame(False)
        self._frame(True)
        return self

    def clear_cache(self) -> None:
        """Forget cached forward passes; the sample geometry is kept."""
        with self._lock:
            self._cache.clear()

    def _orientation(self, img: np.ndarray) -> tuple[bool, float]:
        x = img.astype(np.int16)
        d_id = float(np.abs(x - self._clean).mean())
        if d_id == 0.0:
            return False, 0.0
        d_fl = float(np.abs(x - self._clean[::-1]).mean())
        if d_fl < d_id:
            return True, d_fl / 255.0
        return False, d_id / 255.0

    def _prompt_term(self, prompt: PointPrompt, inner: np.ndarray) -> float:
        peak = inner.max()
        g = np.mean([1.0 - min(1.0, inner[r, c] / peak) for r, c in prompt.points])
        term = self.world.prompt_noise * self.sample.prompt_difficulty * (0.5 + 0.5 * g)
        if len(prompt) > 1:
            term *= 1.0 - self.world.prompt_gain
        return float(term)

    def strength(self, model: ModelId, prompt_term: float, degradation: float) -> float:
        w = self.world
        return (w.model_noise[ModelId(model)] * (0.4 + 1.2 * self.sample.hardness)
                + prompt_term + w.degradation_gain * degradation)

    def _all_models(self, img: np.ndarray, prompt: PointPrompt) -> dict:
        key = (_image_key(img), _prompt_key(prompt))
        with self._lock:
            hit = self._cache.get(key)
        if hit is not None:
            return hit
        w = self.world
        flipped, degradation = self._orientation(img)
        fr = self._frame(flipped)
        targets = self.sample.family.head_targets
        if flipped:
            targets = tuple(t[::-1] for t in targets)
        head_sdist = ([fr["sdist"][i] for i in range(3)] if self.sample.family.ambiguous
                      else [fr["sdist"][1]] * 3)
        gt = fr["targets"][1]
        prompt_term = self._prompt_term(prompt, fr["inner"])
        out = {"prompt_term": prompt_term, "degradation": degradation, "gt": gt}
        for mi, model in enumerate(MODELS):
            s = self.strength(model, prompt_term, degradation)
            probs = np.empty((N_HEADS,) + gt.shape)
            scores = np.empty(N_HEADS)
            ious = np.empty(N_HEADS)
            hards = []
            for h in range(N_HEADS):
                shared = _smooth(_rng(w.seed, self.sample.seed, 11, mi, h, key[0]), gt.shape)
                own = _smooth(_rng(w.seed, self.sample.seed, 12, mi, h, key[0], key[1]), gt.shape)
                level = head_sdist[h] + s * (_SHARED * shared + _OWN * own)
                probs[h] = expit(level / w.temperature)
                hard = level > 0
                hards.append(hard)
                ious[h] = iou(hard, gt)
                scores[h] = synthetic_sam_score(
                    iou(hard, targets[h]), w.score_noise,
                    [w.seed, self.sample.seed, 13, mi, h, key[0], key[1]])
            pair = [iou(hards[i], hards[j]) for i, j in ((0, 1), (0, 2), (1, 2))]
            out[model] = {"probs": probs, "scores": scores, "best_iou": float(ious.max()),
                          "disagreement": 1.0 - float(np.mean(pair))}
        with self._lock:
            if len(self._cache) >= self._CACHE_SIZE:
                self._cache.pop(next(iter(self._cache)))
            self._cache[key] = out
        return out

    def forward(self, image, prompt: PointPrompt, model) -> ForwardOutput:
        image = np.asarray(image)
        if image.shape != self.sample.image.shape or image.dtype != np.uint8:
            raise ValueError(f"image must be uint8 with shape {self.sample.image.shape}, "
                             f"got {image.dtype} {image.shape}")
        prompt.check_bounds(image.shape)
        model = ModelId(model)
        allm = self._all_models(image, prompt)
        own = allm[model]
        fam = self.sample.family
        feats = TokenFeatures(
            model_ious=np.array([allm[m]["best_iou"] for m in MODELS]),
            prompt_term=allm["prompt_term"],
            prompt_difficulty=self.sample.prompt_difficulty,
            head_disagreement=own["disagreement"],
            log_area=float(np.log(fam.object.mean())),
            degradation=allm["degradation"],
            sam_scores=own["scores"],
            ambiguous=fam.ambiguous,
            own_iou=own["best_iou"],
        )
        key = (_image_key(image), _prompt_key(prompt))
        tokens = synthetic_tokens(self.world, feats,
                                  [self.world.seed, self.sample.seed, 17,
                                   MODELS.index(model), key[0], key[1]])
        return ForwardOutput(masks=own["probs"].copy(), sam_scores=own["scores"].copy(),
                             tokens=tokens)


def _flip_prompt(prompt: PointPrompt, height: int) -> PointPrompt:
    return PointPrompt(tuple((height - 1 - r, c) for r, c in prompt.points))


GRIDS = ("full", "identity", "usam")


def collect_sample_set(backend: Backend, image, gt, prompts: list[PointPrompt],
                       refined: PointPrompt | None = None, augmentations=None,
                       models=MODELS, seed: int = 0, image_id: str = "0") -> SampleSet:
    """Run ``backend`` over a sampling grid and store the results as a SampleSet.

    ``prompts`` are the single-point prompts at indices ``0..n-1``; a
    ``refined`` prompt is stored at index ``n`` for the identity input only.
    Masks predicted on flipped inputs are flipped back into the ground-truth
    frame. ``augmentations`` defaults to identity only.
    """
    image = np.asarray(image)
    augmentations = augmentations or [Augmentation.default(AugKind.IDENTITY)]
    h = image.shape[0]
    n = len(prompts)
    records = []
    for ai, aug in enumerate(augmentations):
        img = apply_augmentation(image, aug, seed=int(_rng(seed, 19, ai).integers(2**63)))
        flip = aug.kind.is_geometric
        jobs = list(enumerate(prompts))
        if refined is not None and aug.kind is AugKind.IDENTITY:
            jobs.append((n, refined))
        for pi, prompt in jobs:
            p = _flip_prompt(prompt, h) if flip else prompt
            for model in models:
                out = backend.forward(img, p, model)
                for head in range(N_HEADS):
                    mask = out.masks[head][::-1] if flip else out.masks[head]
                    records.append(Record(SampleConfig(aug.kind, pi, ModelId(model), head),
                                          np.ascontiguousarray(mask),
                                          float(out.sam_scores[head]), out.tokens))
    return SampleSet(image_id=image_id, gt=gt, records=records, n_prompts=n)


def synthetic_sample_set(world: SyntheticWorld, sample_seed: int, n_prompts: int = 8,
                         grid: str = "full", image_id: str | None = None):
    """Synthesize one sample and collect its predictions on the requested grid.

    ``grid`` is ``"full"`` (every augmentation and prompt), ``"identity"``
    (un-augmented input, every prompt) or ``"usam"`` (un-augmented input,
    centroid and refined prompt only). All grids include the refined prompt.

    Returns ``(sample_set, sample)``.
    """
    if grid not in GRIDS:
        raise ValueError(f"grid must be one of {GRIDS}, got {grid!r}")
    sample = synthesize_sample(world, sample_seed)
    backend = SyntheticBackend(world, sample)
    points = sample_prompt_points(sample.gt, n_prompts)
    singles = [PointPrompt((p,)) for p in points.points]
    augs = world.augmentations() if grid == "full" else None
    ids = image_id if image_id is not None else f"{world.seed}-{sample_seed}"
    s = collect_sample_set(backend, sample.image, sample.gt,
                           singles if grid != "usam" else singles[:1],
                           refined=points, augmentations=augs, seed=sample_seed, image_id=ids)
    s.n_prompts = n_prompts
    if grid == "usam":
        for r in s.records:
            if r.config.prompt_index == 1:
                r.config = SampleConfig(r.config.aug, n_prompts, r.config.model, r.config.head)
        s._index = None
    return s, sample


def mc_augmentation_loop(backend: Backend, image, prompt: PointPrompt, model,
                         n_augs: int = 5, seed: int = 0) -> list[ForwardOutput]:
    """Re-run ``backend`` on ``n_augs`` perturbed copies of ``image``."""
    kinds = [k for k in AugKind if k is not AugKind.IDENTITY][:n_augs]
    outs = []
    for i, kind in enumerate(kinds):
        img = apply_augmentation(image, Augmentation.default(kind), seed=seed + i)
        p = _flip_prompt(prompt, img.shape[0]) if kind.is_geometric else prompt
        outs.append(backend.forward(img, p, model))
    return outs

