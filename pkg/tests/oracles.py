"""Independent brute-force reference implementations used by the tests.

Everything here is written with plain Python loops and ``math`` so that it
shares no code path with the package under test.
"""
import math


def hb(p):
    if p == 0.0 or p == 1.0:
        return 0.0
    p = min(max(p, 1e-7), 1 - 1e-7)
    return -(p * math.log2(p) + (1 - p) * math.log2(1 - p))


def weighted_entropy(rows):
    flat = [v for row in rows for v in row]
    total = sum(flat)
    if total == 0.0:
        return 0.0
    return sum(v / total * hb(v) for v in flat)


def iou(a, b):
    inter = union = 0
    for ra, rb in zip(a, b):
        for x, y in zip(ra, rb):
            inter += bool(x) and bool(y)
            union += bool(x) or bool(y)
    return 1.0 if union == 0 else inter / union


def thresh(m):
    return [[v > 0.5 for v in row] for row in m]


def best(gt, masks):
    scores = [iou(thresh(m), gt) for m in masks]
    top = max(scores)
    return scores.index(top)


def probs(scores):
    total = sum(scores)
    if total == 0:
        return [1.0 / len(scores)] * len(scores)
    return [s / total for s in scores]


def weighted_sum(masks_and_weights, shape):
    h, w = shape
    out = [[0.0] * w for _ in range(h)]
    for m, wt in masks_and_weights:
        for i in range(h):
            for j in range(w):
                out[i][j] += wt * m[i][j]
    # snap summation round-off next to 0 and 1, as the package does
    return [[0.0 if v < 1e-12 else 1.0 if v > 1 - 1e-12 else v for v in row] for row in out]


def _passes(records):
    """``{(aug, prompt, model): [(head, mask, score), ...]}``"""
    out = {}
    for aug, prompt, model, head, mask, score in records:
        out.setdefault((aug, prompt, model), []).append((head, mask, score))
    for v in out.values():
        v.sort(key=lambda t: t[0])
    return out


def predictive_mixture(records, n_prompts, shape):
    passes = {k: v for k, v in _passes(records).items() if k[1] < n_prompts}
    n = len(passes)
    items = []
    for heads in passes.values():
        for (_, mask, _), p in zip(heads, probs([h[2] for h in heads])):
            items.append((mask, p / n))
    return weighted_sum(items, shape)


def epistemic_mixture(records, gt, prompt_index, shape):
    passes = _passes(records)
    models = [k[2] for k in passes if k[0] == "identity" and k[1] == prompt_index]
    masks = []
    for m in models:
        heads = passes[("identity", prompt_index, m)]
        hm = [h[1] for h in heads]
        masks.append(hm[best(gt, hm)])
    return weighted_sum([(m, 1.0 / len(masks)) for m in masks], shape)


def prompt_mixture(records, gt, model, n_prompts, shape):
    passes = _passes(records)
    prompts = sorted(k[1] for k in passes if k[0] == "identity" and k[2] == model and k[1] < n_prompts)
    masks = []
    for p in prompts:
        hm = [h[1] for h in passes[("identity", p, model)]]
        masks.append(hm[best(gt, hm)])
    return weighted_sum([(m, 1.0 / len(masks)) for m in masks], shape)


def task_mixture(records, prompt_index, model, shape):
    heads = _passes(records)[("identity", prompt_index, model)]
    return weighted_sum([(h[1], p) for h, p in zip(heads, probs([h[2] for h in heads]))], shape)


def trapezoid_auc(mious):
    n = len(mious) - 1
    return sum((mious[k] + mious[k + 1]) / 2 for k in range(n)) / n


def curve_by_enumeration(base, corrected, order):
    """mIoU after replacing the first ``k`` samples of ``order``, for every k."""
    n = len(base)
    out = []
    for k in range(n + 1):
        chosen = set(order[:k])
        out.append(sum(corrected[i] if i in chosen else base[i] for i in range(n)) / n)
    return out


def pearson(xs, ys):
    n = len(xs)
    mx, my = sum(xs) / n, sum(ys) / n
    sxy = sum((x - mx) * (y - my) for x, y in zip(xs, ys))
    sxx = sum((x - mx) ** 2 for x in xs)
    syy = sum((y - my) ** 2 for y in ys)
    return sxy / math.sqrt(sxx * syy)
