"""Monte-Carlo sampling sets: image augmentations, point prompts, model sizes
and the enumeration of every (augmentation, prompt, model, head) cell."""
from __future__ import annotations

import enum
import io
import itertools
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy import ndimage

from .masks import check_binary_mask

N_HEADS = 3
BLUR_KERNEL_SIZE = 5
BLUR_SIGMA = 1.0
NOISE_SIGMA = 25.5


class AugKind(str, enum.Enum):
    IDENTITY = "identity"
    VERTICAL_FLIP = "vflip"
    JPEG_Q10 = "jpeg_q10"
    JPEG_Q30 = "jpeg_q30"
    GAUSSIAN_BLUR_K5 = "blur_k5"
    GAUSSIAN_NOISE = "gauss_noise"

    @property
    def is_geometric(self) -> bool:
        return self is AugKind.VERTICAL_FLIP


class ModelId(str, enum.Enum):
    """SAM backbone sizes, largest first."""

    L = "L"
    BPLUS = "B+"
    S = "S"
    T = "T"


MODELS: tuple[ModelId, ...] = (ModelId.L, ModelId.BPLUS, ModelId.S, ModelId.T)


@dataclass(frozen=True)
class Augmentation:
    kind: AugKind
    params: dict = field(default_factory=dict, compare=False, hash=False)

    @classmethod
    def default(cls, kind: AugKind | str, noise_sigma: float = NOISE_SIGMA,
                blur_sigma: float = BLUR_SIGMA) -> "Augmentation":
        kind = AugKind(kind)
        params = {
            AugKind.JPEG_Q10: {"quality": 10},
            AugKind.JPEG_Q30: {"quality": 30},
            AugKind.GAUSSIAN_BLUR_K5: {"kernel_size": BLUR_KERNEL_SIZE, "sigma": blur_sigma},
            AugKind.GAUSSIAN_NOISE: {"sigma": noise_sigma},
        }.get(kind, {})
        return cls(kind, params)


AUGMENTATIONS: tuple[Augmentation, ...] = tuple(Augmentation.default(k) for k in AugKind)


@dataclass(frozen=True)
class PointPrompt:
    """Foreground point prompt; ``points`` holds ``(row, col)`` pairs."""

    points: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if len(self.points) == 0:
            raise ValueError("a prompt needs at least one point")

    def __len__(self) -> int:
        return len(self.points)

    def check_bounds(self, shape) -> None:
        h, w = shape[:2]
        for r, c in self.points:
            if not (0 <= r < h and 0 <= c < w):
                raise ValueError(f"prompt point {(r, c)} outside image of shape {(h, w)}")


@dataclass(frozen=True)
class SampleConfig:
    aug: AugKind
    prompt_index: int
    model: ModelId
    head: int

    def __post_init__(self):
        if not 0 <= self.head < N_HEADS:
            raise ValueError(f"head must be in [0, {N_HEADS}), got {self.head}")


class InsufficientForegroundError(ValueError):
    def __init__(self, requested: int, available: int):
        super().__init__(f"requested {requested} prompt points but mask has only "
                         f"{available} foreground pixels")
        self.requested = requested
        self.available = available


def _check_image(img) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError(f"expected an (H, W, 3) uint8 image, got {img.shape} {img.dtype}")
    return img


def _gaussian_kernel1d(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def apply_augmentation(img, aug: Augmentation, seed: int = 0) -> np.ndarray:
    """Apply one augmentation to an RGB ``uint8`` image.

    Only ``GAUSSIAN_NOISE`` uses ``seed``; every other kind is a deterministic
    function of the image.
    """
    img = _check_image(img)
    kind = aug.kind
    if kind is AugKind.IDENTITY:
        return img.copy()
    if kind is AugKind.VERTICAL_FLIP:
        return img[::-1].copy()
    if kind in (AugKind.JPEG_Q10, AugKind.JPEG_Q30):
        buf = io.BytesIO()
        Image.fromarray(img).save(buf, format="JPEG", quality=int(aug.params["quality"]))
        buf.seek(0)
        return np.asarray(Image.open(buf).convert("RGB"), dtype=np.uint8)
    if kind is AugKind.GAUSSIAN_BLUR_K5:
        k = _gaussian_kernel1d(int(aug.params.get("kernel_size", BLUR_KERNEL_SIZE)),
                               float(aug.params.get("sigma", BLUR_SIGMA)))
        out = img.astype(np.float64)
        out = ndimage.convolve1d(out, k, axis=0, mode="nearest")
        out = ndimage.convolve1d(out, k, axis=1, mode="nearest")
        return np.clip(np.rint(out), 0, 255).astype(np.uint8)
    if kind is AugKind.GAUSSIAN_NOISE:
        rng = np.random.default_rng(seed)
        noise = rng.normal(0.0, float(aug.params.get("sigma", NOISE_SIGMA)), size=img.shape)
        return np.clip(np.rint(img + noise), 0, 255).astype(np.uint8)
    raise ValueError(f"unsupported augmentation {kind!r}")


def centroid_prompt(gt) -> PointPrompt:
    """Single point on the foreground pixel closest to the mask centroid.

    Ties are broken by the smallest ``(row, col)``.
    """
    gt = check_binary_mask(gt, "gt")
    rows, cols = np.nonzero(gt)
    if rows.size == 0:
        raise ValueError("cannot place a centroid prompt on an empty mask")
    cr, cc = rows.mean(), cols.mean()
    d2 = (rows - cr) ** 2 + (cols - cc) ** 2
    # np.nonzero is row-major, so argmin picks the lexicographically first tie
    i = int(np.argmin(d2))
    return PointPrompt(((int(rows[i]), int(cols[i])),))


def sample_prompt_points(gt, k: int, seed: int = 0, mode: str = "fps") -> PointPrompt:
    """Pick ``k`` foreground points spread over the mask.

    ``mode="fps"`` runs deterministic farthest-point sampling seeded at the
    centroid prompt; ``seed`` is ignored. ``mode="random"`` draws ``k``
    distinct foreground pixels uniformly with ``seed``.
    """
    gt = check_binary_mask(gt, "gt")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    rows, cols = np.nonzero(gt)
    if rows.size < k:
        raise InsufficientForegroundError(k, int(rows.size))
    if mode == "random":
        rng = np.random.default_rng(seed)
        idx = np.sort(rng.choice(rows.size, size=k, replace=False))
        return PointPrompt(tuple((int(rows[i]), int(cols[i])) for i in idx))
    if mode != "fps":
        raise ValueError(f"unknown sampling mode {mode!r}")

    first = centroid_prompt(gt).points[0]
    coords = np.stack([rows, cols], axis=1).astype(np.float64)
    chosen = [first]
    min_d2 = ((coords - np.asarray(first, dtype=np.float64)) ** 2).sum(axis=1)
    for _ in range(k - 1):
        i = int(np.argmax(min_d2))
        p = (int(rows[i]), int(cols[i]))
        chosen.append(p)
        min_d2 = np.minimum(min_d2, ((coords - coords[i]) ** 2).sum(axis=1))
    return PointPrompt(tuple(chosen))


def enumerate_configs(n_prompts: int, augs=tuple(AugKind), models=MODELS,
                      n_heads: int = N_HEADS) -> list[SampleConfig]:
    """Every sampling cell, augmentation-major then prompt, model and head."""
    if n_prompts < 1:
        raise ValueError(f"n_prompts must be >= 1, got {n_prompts}")
    return [SampleConfig(AugKind(a), p, ModelId(m), h)
            for a, p, m, h in itertools.product(augs, range(n_prompts), models, range(n_heads))]
