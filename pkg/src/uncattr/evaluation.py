"""Saliency-map evaluation: blur masking, EIC and URC curves, summaries.

Masking is Gaussian blurring (separable kernel, truncated at four standard
deviations, renormalized, reflecting edge-inclusive boundaries).  The entropy
information curve (EIC) tracks normalized predictive entropy while pixels are
revealed from a fully blurred image, best-first; the uncertainty reduction
curve (URC) tracks the best achieved fractional entropy drop while pixels of
the original are blurred, worst-first.  Revealing or removing a pixel copies
the corresponding value between the original and the fully blurred canvas;
the rest of the image is untouched.

Information content is approximated by the second-order Shannon entropy of
horizontally adjacent pixel pairs after 8-bit quantization, normalized
per image to [0, 1] between the blurred and original content.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .models import Classifier, classifier_forward
from .uncertainty import entropy_rows


class ZeroEntropyImage(Exception):
    """Reference entropy is zero; the image is excluded from the curve."""


@dataclass
class BlurConfig:
    std: float

    def __post_init__(self):
        if self.std <= 0:
            raise ValueError("blur std must be > 0")

    def kernel(self) -> np.ndarray:
        radius = int(4.0 * self.std)
        offsets = np.arange(-radius, radius + 1, dtype=np.float64)
        weights = np.exp(-(offsets ** 2) / (2.0 * self.std ** 2))
        return weights / weights.sum()


@dataclass
class CurveResult:
    """A sampled curve over the revealed/removed pixel fraction.

    ``xs`` is the strictly increasing pixel fraction; ``info`` carries the
    per-step normalized information content used as the alternative axis.
    """

    kind: str  # "EIC" | "URC"
    xs: np.ndarray
    ys: np.ndarray
    info: np.ndarray | None = None
    summary: dict = field(default_factory=dict)

    def __post_init__(self):
        self.xs = np.asarray(self.xs, dtype=np.float64)
        self.ys = np.asarray(self.ys, dtype=np.float64)
        if self.kind not in ("EIC", "URC"):
            raise ValueError(f"unknown curve kind {self.kind!r}")
        if len(self.xs) != len(self.ys):
            raise ValueError("xs/ys length mismatch")
        if np.any(np.diff(self.xs) <= 0) or self.xs.min() < 0 or self.xs.max() > 1:
            raise ValueError("xs must be strictly increasing within [0, 1]")
        if self.kind == "EIC" and self.ys[0] != 1.0:
            raise ValueError("EIC curves start at exactly 1.0")
        if self.kind == "URC" and (self.ys[0] != 0.0 or np.any(np.diff(self.ys) < 0)):
            raise ValueError("URC curves start at 0 and never decrease")


def _conv_axis(img, kernel, axis):
    radius = len(kernel) // 2
    pad = [(0, 0), (0, 0)]
    pad[axis] = (radius, radius)
    padded = np.pad(img, pad, mode="symmetric")
    out = np.zeros_like(img)
    for i, w in enumerate(kernel):
        sl = [slice(None), slice(None)]
        sl[axis] = slice(i, i + img.shape[axis])
        out += w * padded[tuple(sl)]
    return out


def blur(x, cfg: BlurConfig) -> np.ndarray:
    """Separable Gaussian blur of a (h, w) image; output stays in [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("blur expects a 2-D image")
    kernel = cfg.kernel()
    if len(kernel) == 1:
        return x.copy()
    out = _conv_axis(_conv_axis(x, kernel, 0), kernel, 1)
    return np.clip(out, 0.0, 1.0)


def info_content(x) -> float:
    """Second-order Shannon entropy (nats) of horizontal 8-bit pixel pairs."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("info_content expects a 2-D image")
    q = np.clip(np.rint(x * 255.0), 0, 255).astype(np.int64)
    if q.shape[1] < 2:
        return 0.0
    codes = (q[:, :-1] * 256 + q[:, 1:]).reshape(-1)
    _, counts = np.unique(codes, return_counts=True)
    p = counts / counts.sum()
    return float(-np.sum(p * np.log(p)))


def _image_entropies(c: Classifier, flat_rows) -> np.ndarray:
    return entropy_rows(classifier_forward(c, flat_rows))


def tune_blur_std(c: Classifier, images, grid) -> float:
    """Smallest grid std whose mean fully-blurred entropy is within 2% of the
    grid maximum of that mean."""
    grid = [float(s) for s in grid]
    if not grid:
        raise ValueError("empty blur grid")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("blur grid must be strictly ascending")
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 3 or len(images) == 0:
        raise ValueError("need a non-empty (count, h, w) image stack")
    means = []
    for std in grid:
        blurred = np.stack([blur(img, BlurConfig(std)) for img in images])
        means.append(float(_image_entropies(c, blurred.reshape(len(images), -1)).mean()))
    best = max(means)
    for std, value in zip(grid, means):
        if value >= 0.98 * best:
            return std
    return grid[-1]


def _reveal_counts(n):
    step = 1 if n <= 1024 else n // 512
    counts = list(range(0, n + 1, step))
    if counts[-1] != n:
        counts.append(n)
    return counts


def _composites(base, replacement, order, counts):
    rows = np.tile(base, (len(counts), 1))
    for row, count in enumerate(counts):
        idx = order[:count]
        rows[row, idx] = replacement[idx]
    return rows


def _normalized_info(composites, shape, info_start, info_end):
    raw = np.array([info_content(row.reshape(shape)) for row in composites])
    denom = info_end - info_start
    if abs(denom) < 1e-12:
        return None
    return np.clip((raw - info_start) / denom, 0.0, 1.0)


def eic(c: Classifier, x, attr, cfg: BlurConfig) -> CurveResult:
    """Entropy information curve for one image.

    Pixels are revealed from the fully blurred canvas in ascending
    attribution order (most entropy-decreasing first); each step records
    H(composite) / H(blurred) and the normalized information content.
    Raises :class:`ZeroEntropyImage` when the blurred reference entropy is 0.
    """
    x = np.asarray(x, dtype=np.float64)
    attr = np.asarray(getattr(attr, "values", attr), dtype=np.float64)
    blurred = blur(x, cfg)
    flat_x, flat_b = x.reshape(-1), blurred.reshape(-1)
    n = flat_x.size
    order = np.argsort(attr, kind="stable")
    counts = _reveal_counts(n)
    composites = _composites(flat_b, flat_x, order, counts)
    entropies = _image_entropies(c, composites)
    # the reference entropy comes from the same batched evaluation as the
    # steps, so step 0 divides a float by itself and is exactly 1.0
    h_blurred = float(entropies[0])
    if h_blurred == 0.0:
        raise ZeroEntropyImage("fully blurred image has zero entropy")
    ys = entropies / h_blurred
    info_blur, info_orig = info_content(blurred), info_content(x)
    info = _normalized_info(composites, x.shape, info_blur, info_orig)
    if info is None:
        info = np.asarray(counts, dtype=np.float64) / n
    curve = CurveResult(
        kind="EIC", xs=np.asarray(counts, dtype=np.float64) / n, ys=ys, info=info
    )
    curve.summary = {"area_over_eic": area_over_eic(curve)}
    return curve


def urc(c: Classifier, x, attr, cfg: BlurConfig) -> CurveResult:
    """Uncertainty reduction curve for one image.

    Pixels of the original are blurred in descending attribution order; each
    step records the running-best value of 1 - H(composite) / H(x).  Raises
    :class:`ZeroEntropyImage` when H(x) is 0.
    """
    x = np.asarray(x, dtype=np.float64)
    attr = np.asarray(getattr(attr, "values", attr), dtype=np.float64)
    blurred = blur(x, cfg)
    flat_x, flat_b = x.reshape(-1), blurred.reshape(-1)
    n = flat_x.size
    order = np.argsort(-attr, kind="stable")
    counts = _reveal_counts(n)
    composites = _composites(flat_x, flat_b, order, counts)
    entropies = _image_entropies(c, composites)
    h_x = float(entropies[0])
    if h_x == 0.0:
        raise ZeroEntropyImage("original image has zero entropy")
    reductions = 1.0 - entropies / h_x
    ys = np.maximum.accumulate(reductions)
    ys[0] = 0.0
    info_blur, info_orig = info_content(blurred), info_content(x)
    info = _normalized_info(composites, x.shape, info_blur, info_orig)
    fractions = np.asarray(counts, dtype=np.float64) / n
    curve = CurveResult(kind="URC", xs=fractions, ys=ys, info=info)
    curve.summary = {
        "urc_at_1pct": _value_at_fraction(curve, 0.01),
        "urc_at_5pct": _value_at_fraction(curve, 0.05),
    }
    return curve


def _value_at_fraction(curve: CurveResult, fraction) -> float:
    idx = int(np.searchsorted(curve.xs, fraction, side="left"))
    idx = min(idx, len(curve.ys) - 1)
    return float(curve.ys[idx])


def area_over_eic(curve: CurveResult) -> float:
    """One minus the trapezoidal area under the curve over the normalized
    information-content axis.  Duplicate x positions are averaged."""
    if curve.kind != "EIC":
        raise ValueError("area_over_eic expects an EIC curve")
    if curve.info is None:
        raise ValueError("curve carries no information-content axis")
    xs = np.asarray(curve.info, dtype=np.float64)
    order = np.argsort(xs, kind="stable")
    xs, ys = xs[order], curve.ys[order]
    merged_x, merged_y = [], []
    i = 0
    while i < len(xs):
        j = i
        while j + 1 < len(xs) and xs[j + 1] == xs[i]:
            j += 1
        merged_x.append(xs[i])
        merged_y.append(float(ys[i:j + 1].mean()))
        i = j + 1
    mx, my = np.asarray(merged_x), np.asarray(merged_y)
    area = float(np.sum(0.5 * (my[1:] + my[:-1]) * np.diff(mx)))
    return 1.0 - area


def aggregate_curves(curves, stat="mean") -> CurveResult:
    """Combine per-image curves of one kind into a dataset curve.

    ``stat`` selects the per-step reduction: "mean", or "median" when
    outliers would dominate.
    """
    if not curves:
        raise ValueError("no curves to aggregate")
    if stat not in ("mean", "median"):
        raise ValueError(f"unknown aggregation {stat!r}")
    kind = curves[0].kind
    if any(c.kind != kind or len(c.xs) != len(curves[0].xs) for c in curves):
        raise ValueError("curves must share kind and sampling")
    reduce = np.mean if stat == "mean" else np.median
    ys = reduce(np.stack([c.ys for c in curves]), axis=0)
    info = None
    if all(c.info is not None for c in curves):
        info = reduce(np.stack([c.info for c in curves]), axis=0)
        info = np.clip(info, 0.0, 1.0)
    if kind == "URC":
        ys = np.maximum.accumulate(ys)
        ys[0] = 0.0
    else:
        ys[0] = 1.0
    out = CurveResult(kind=kind, xs=curves[0].xs.copy(), ys=ys, info=info)
    if kind == "EIC" and info is not None:
        out.summary = {"area_over_eic": area_over_eic(out)}
    elif kind == "URC":
        out.summary = {
            "urc_at_1pct": _value_at_fraction(out, 0.01),
            "urc_at_5pct": _value_at_fraction(out, 0.05),
        }
    return out


def curve_to_csv(curve: CurveResult, path):
    """Write one row per step: ``step,fraction,info_content,value``."""
    lines = ["step,fraction,info_content,value"]
    for i in range(len(curve.xs)):
        info = repr(float(curve.info[i])) if curve.info is not None else ""
        lines.append(f"{i},{curve.xs[i]!r},{info},{curve.ys[i]!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def write_summary(summary: dict, path):
    """Flat JSON summary file, keys sorted for byte-stable output."""
    with open(path, "w") as fh:
        fh.write(json.dumps(summary, sort_keys=True, indent=1) + "\n")
