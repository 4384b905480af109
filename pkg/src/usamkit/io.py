"""Record files and the RLE mask codec.

A record file is JSON Lines. Line 1 is a header carrying ``schema_version``;
every further line is one :class:`~usamkit.bayes.SampleSet`::

    {"image_id": ..., "height": H, "width": W, "gt_rle": [...], "n_prompts": N,
     "records": [{"aug": "identity", "prompt_index": 0, "model": "L", "head": 0,
                  "sam_score": 0.93, "mask_b64": "...", "tokens_b64": "..."}, ...]}

Masks and tokens are base64-encoded little-endian float32 arrays. The ground
truth is run-length encoded row-major, starting with a background run.
"""
from __future__ import annotations

import base64
import binascii
import json
from pathlib import Path

import numpy as np

from .backend import TOKEN_DIM
from .bayes import Record, SampleSet
from .masks import check_binary_mask
from .sampling import N_HEADS, AugKind, ModelId, SampleConfig

__all__ = [
    "SCHEMA_VERSION",
    "RecordFormatError",
    "rle_encode",
    "rle_decode",
    "encode_sample_set",
    "decode_sample_set",
    "write_records",
    "iter_records",
    "read_records",
]

SCHEMA_VERSION = 1
FORMAT_NAME = "usamkit-records"


class RecordFormatError(ValueError):
    """A record file line does not match the schema."""

    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.line = line
        self.field = field


def rle_encode(mask) -> list[int]:
    """Run lengths of a binary mask in row-major order, background first."""
    flat = check_binary_mask(mask).ravel()
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat[0]:
        counts.insert(0, 0)
    return counts


def rle_decode(counts, height: int, width: int) -> np.ndarray:
    counts = [int(c) for c in counts]
    if any(c < 0 for c in counts):
        raise ValueError("run lengths must be non-negative")
    if sum(counts) != height * width:
        raise ValueError(f"run lengths sum to {sum(counts)}, expected {height * width}")
    values = np.arange(len(counts)) % 2 == 1
    return np.repeat(values, counts).reshape(height, width)


def _b64_f32(arr) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f4").tobytes()).decode("ascii")


def _f32_b64(text: str, count: int, field: str, line: int | None) -> np.ndarray:
    try:
        raw = base64.b64decode(text, validate=True)
    except (binascii.Error, TypeError, ValueError) as exc:
        raise RecordFormatError(f"invalid base64 ({exc})", line, field) from None
    if len(raw) != 4 * count:
        raise RecordFormatError(f"expected {count} float32 values, got {len(raw) / 4:g}",
                                line, field)
    return np.frombuffer(raw, dtype="<f4").astype(np.float64)


def encode_sample_set(s: SampleSet) -> dict:
    h, w = s.gt.shape
    return {
        "image_id": s.image_id,
        "height": h,
        "width": w,
        "gt_rle": rle_encode(s.gt),
        "n_prompts": s.n_prompts,
        "records": [{
            "aug": r.config.aug.value,
            "prompt_index": r.config.prompt_index,
            "model": r.config.model.value,
            "head": r.config.head,
            "sam_score": float(r.sam_score),
            "mask_b64": _b64_f32(r.mask),
            "tokens_b64": _b64_f32(r.tokens),
        } for r in s.records],
    }


def _require(obj: dict, key: str, kind, path: str, line):
    if key not in obj:
        raise RecordFormatError("missing", line, f"{path}{key}")
    value = obj[key]
    if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise RecordFormatError(f"expected an integer, got {value!r}", line, f"{path}{key}")
    if kind is float and (isinstance(value, bool) or not isinstance(value, (int, float))):
        raise RecordFormatError(f"expected a number, got {value!r}", line, f"{path}{key}")
    if kind in (str, list) and not isinstance(value, kind):
        raise RecordFormatError(f"expected {kind.__name__}, got {type(value).__name__}",
                                line, f"{path}{key}")
    return value


def decode_sample_set(obj: dict, line: int | None = None) -> SampleSet:
    if not isinstance(obj, dict):
        raise RecordFormatError("expected a JSON object", line)
    image_id = _require(obj, "image_id", str, "", line)
    h = _require(obj, "height", int, "", line)
    w = _require(obj, "width", int, "", line)
    if h < 1 or w < 1:
        raise RecordFormatError("height and width must be positive", line, "height")
    try:
        gt = rle_decode(_require(obj, "gt_rle", list, "", line), h, w)
    except (ValueError, TypeError) as exc:
        if isinstance(exc, RecordFormatError):
            raise
        raise RecordFormatError(str(exc), line, "gt_rle") from None
    n_prompts = _require(obj, "n_prompts", int, "", line)
    records = []
    heads_seen: dict = {}
    for i, r in enumerate(_require(obj, "records", list, "", line)):
        path = f"records[{i}]."
        if not isinstance(r, dict):
            raise RecordFormatError("expected a JSON object", line, f"records[{i}]")
        try:
            aug = AugKind(_require(r, "aug", str, path, line))
        except ValueError as exc:
            if isinstance(exc, RecordFormatError):
                raise
            raise RecordFormatError(f"unknown augmentation {r['aug']!r}", line, path + "aug") from None
        try:
            model = ModelId(_require(r, "model", str, path, line))
        except ValueError as exc:
            if isinstance(exc, RecordFormatError):
                raise
            raise RecordFormatError(f"unknown model {r['model']!r}", line, path + "model") from None
        prompt_index = _require(r, "prompt_index", int, path, line)
        if not 0 <= prompt_index <= n_prompts:
            raise RecordFormatError(f"out of range [0, {n_prompts}]", line, path + "prompt_index")
        head = _require(r, "head", int, path, line)
        if not 0 <= head < N_HEADS:
            raise RecordFormatError(f"head must be in [0, {N_HEADS})", line, path + "head")
        key = (aug, prompt_index, model)
        heads_seen.setdefault(key, set())
        if head in heads_seen[key]:
            raise RecordFormatError(f"duplicate head {head} for {key}", line, path + "head")
        heads_seen[key].add(head)
        score = float(_require(r, "sam_score", float, path, line))
        if not np.isfinite(score):
            raise RecordFormatError("must be finite", line, path + "sam_score")
        mask = _f32_b64(_require(r, "mask_b64", str, path, line), h * w, path + "mask_b64", line)
        if mask.min(initial=0.0) < 0.0 or mask.max(initial=0.0) > 1.0 or not np.isfinite(mask).all():
            raise RecordFormatError("probabilities must lie in [0, 1]", line, path + "mask_b64")
        tokens = _f32_b64(_require(r, "tokens_b64", str, path, line), TOKEN_DIM,
                          path + "tokens", line)
        records.append(Record(SampleConfig(aug, prompt_index, model, head),
                              mask.reshape(h, w), score, tokens))
    for key, heads in heads_seen.items():
        if len(heads) != N_HEADS:
            raise RecordFormatError(f"forward pass {key} has {len(heads)} heads, expected {N_HEADS}",
                                    line, "records")
    try:
        return SampleSet(image_id=image_id, gt=gt, records=records, n_prompts=n_prompts)
    except ValueError as exc:
        raise RecordFormatError(str(exc), line) from None


def write_records(path, sets, header: dict | None = None) -> None:
    """Write a header line followed by one line per sample set."""
    head = {"schema_version": SCHEMA_VERSION, "format": FORMAT_NAME}
    if header:
        head.update(header)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(head, sort_keys=True, separators=(",", ":")) + "\n")
        for s in sets:
            fh.write(json.dumps(encode_sample_set(s), separators=(",", ":")) + "\n")


def iter_records(path):
    """Stream sample sets from a record file, one line at a time.

    An empty file yields nothing.
    """
    with open(path, encoding="utf-8") as fh:
        for lineno, text in enumerate(fh, start=1):
            if not text.strip():
                continue
            try:
                obj = json.loads(text)
            except json.JSONDecodeError as exc:
                raise RecordFormatError(f"invalid JSON ({exc.msg})", lineno) from None
            if lineno == 1 and isinstance(obj, dict) and "schema_version" in obj:
                if obj["schema_version"] != SCHEMA_VERSION:
                    raise RecordFormatError(
                        f"unsupported schema_version {obj['schema_version']!r}", 1, "schema_version")
                continue
            yield decode_sample_set(obj, lineno)


def read_records(path) -> list[SampleSet]:
    return list(iter_records(Path(path)))
