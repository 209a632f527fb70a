"""Normalised mean error, cumulative error distribution, report tables."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .shapes import as_points


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class NormalisationRule:
    """How the per-sample error is normalised.

    ``kind`` is ``"bbox"`` (face box width), ``"inter_pupil"`` (distance
    between the centroids of the ``left`` and ``right`` eye landmark sets) or
    ``"inter_ocular"`` (distance between two outer eye-corner landmarks,
    ``left[0]`` and ``right[0]``).
    """

    kind: str = "bbox"
    left: tuple = ()
    right: tuple = ()

    def __post_init__(self):
        if self.kind not in ("bbox", "inter_pupil", "inter_ocular"):
            raise EvaluationError(f"unknown normalisation {self.kind!r}")
        object.__setattr__(self, "left", tuple(int(i) for i in self.left))
        object.__setattr__(self, "right", tuple(int(i) for i in self.right))
        if self.kind != "bbox":
            if not self.left or not self.right:
                raise EvaluationError(f"{self.kind} needs left and right landmark indices")
            if set(self.left) & set(self.right):
                raise EvaluationError("left and right index sets must be disjoint")
            if self.kind == "inter_ocular" and (len(self.left) != 1 or len(self.right) != 1):
                raise EvaluationError("inter_ocular takes exactly one index per side")

    @classmethod
    def parse(cls, text):
        """``bbox``, ``inter_pupil:0,1/2,3`` or ``inter_ocular:0/1``."""
        if ":" not in text:
            return cls(text.strip())
        kind, idx = text.split(":", 1)
        left, right = idx.split("/")
        return cls(kind.strip(), tuple(map(int, left.split(","))), tuple(map(int, right.split(","))))

    def term(self, truth, bbox=None) -> float:
        truth = as_points(truth)
        if self.kind == "bbox":
            if bbox is None:
                raise EvaluationError("bbox normalisation needs a bounding box")
            return float(bbox[2] - bbox[0])
        n = len(truth)
        if max(self.left + self.right) >= n:
            raise EvaluationError(f"landmark index out of range for L={n}")
        left = truth[list(self.left)].mean(axis=0)
        right = truth[list(self.right)].mean(axis=0)
        return float(np.linalg.norm(left - right))


def nme(pred, truth, rule: NormalisationRule = NormalisationRule(), bbox=None) -> float:
    """Mean Euclidean landmark error divided by the rule's normalisation term."""
    pred, truth = as_points(pred), as_points(truth)
    if pred.shape != truth.shape:
        raise EvaluationError(f"landmark counts differ: {len(pred)} vs {len(truth)}")
    term = rule.term(truth, bbox)
    if not term > 0:
        raise EvaluationError("normalisation term must be positive")
    return float(np.mean(np.linalg.norm(pred - truth, axis=1)) / term)


def nme_batch(preds, truths, rule=NormalisationRule(), bboxes=None) -> np.ndarray:
    if bboxes is None:
        bboxes = [None] * len(preds)
    return np.array([nme(p, t, rule, b) for p, t, b in zip(preds, truths, bboxes)])


def ced_curve(nmes, thresholds=None):
    """Fraction of samples with NME <= t for each threshold.

    Default thresholds are 101 points on ``[0, max(nmes)]``.
    Returns ``(thresholds, fractions)``.
    """
    nmes = np.asarray(nmes, dtype=float).ravel()
    if nmes.size == 0:
        raise EvaluationError("CED needs at least one error value")
    if thresholds is None:
        thresholds = np.linspace(0.0, nmes.max(), 101)
    thresholds = np.asarray(thresholds, dtype=float)
    if np.any(np.diff(thresholds) < 0):
        raise EvaluationError("CED thresholds must be ascending")
    sorted_nmes = np.sort(nmes)
    fractions = np.searchsorted(sorted_nmes, thresholds, side="right") / nmes.size
    return thresholds, fractions


@dataclass
class EvalReport:
    per_sample: np.ndarray
    thresholds: np.ndarray
    fractions: np.ndarray
    ids: list = None

    @classmethod
    def from_nmes(cls, nmes, thresholds=None, ids=None):
        nmes = np.asarray(nmes, dtype=float)
        t, f = ced_curve(nmes, thresholds)
        return cls(nmes, t, f, ids)

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_sample))

    def write_ced_csv(self, path):
        write_ced_csv(path, self.thresholds, self.fractions)

    def write_per_sample_csv(self, path):
        ids = self.ids or [str(i) for i in range(len(self.per_sample))]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "nme"])
            for sid, v in zip(ids, self.per_sample):
                writer.writerow([sid, repr(float(v))])

    def summary(self) -> str:
        rows = [
            ("samples", str(len(self.per_sample))),
            ("mean NME", f"{self.mean:.6f}"),
            ("median NME", f"{float(np.median(self.per_sample)):.6f}"),
            ("max NME", f"{float(np.max(self.per_sample)):.6f}"),
        ]
        return format_table(["metric", "value"], rows)


def write_ced_csv(path, thresholds, fractions):
    with open(path, "w", newline="") as fh:
        fh.write("threshold,fraction\n")
        for t, f in zip(thresholds, fractions):
            fh.write(f"{float(t)!r},{float(f)!r}\n")


def read_ced_csv(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    if rows[0] != ["threshold", "fraction"]:
        raise EvaluationError(f"{path}: expected 'threshold,fraction' header")
    data = np.array(rows[1:], dtype=float)
    return data[:, 0], data[:, 1]


def read_per_sample_csv(path):
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return [r["id"] for r in rows], np.array([float(r["nme"]) for r in rows])


def format_table(headers, rows, highlight=None) -> str:
    """Plain-text table; the row index ``highlight`` is marked with ``*``."""
    cells = [list(map(str, headers))] + [list(map(str, r)) for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(headers))]
    lines = []
    for k, row in enumerate(cells):
        mark = "*" if highlight is not None and k - 1 == highlight else " "
        lines.append(mark + " " + "  ".join(c.rjust(w) for c, w in zip(row, widths)))
        if k == 0:
            lines.append("  " + "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def ced_svg(curves, width=480, height=360, title="CED") -> str:
    """Minimal SVG line plot of one or more ``(label, thresholds, fractions)``."""
    pad = 40
    xmax = max(float(np.max(t)) for _, t, _ in curves) or 1.0
    colours = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<rect x="{pad}" y="{pad}" width="{width - 2 * pad}" height="{height - 2 * pad}" '
        'fill="none" stroke="black"/>',
        f'<text x="{width / 2}" y="{height - 8}" text-anchor="middle" font-size="11">NME (max {xmax:.4g})</text>',
    ]
    for k, (label, t, f) in enumerate(curves):
        xs = pad + np.asarray(t) / xmax * (width - 2 * pad)
        ys = height - pad - np.asarray(f) * (height - 2 * pad)
        pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, ys))
        colour = colours[k % len(colours)]
        parts.append(f'<polyline fill="none" stroke="{colour}" points="{pts}"/>')
        parts.append(f'<text x="{pad + 8}" y="{pad + 16 + 14 * k}" font-size="11" fill="{colour}">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
