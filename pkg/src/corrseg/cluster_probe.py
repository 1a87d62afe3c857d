"""Cosine k-means over code vectors and Hungarian-matched evaluation.

Clustering is unsupervised, so cluster ids carry no semantics; evaluation
finds the one-to-one cluster-to-class assignment that maximizes matched
pixel count, then reports pixel accuracy and per-class IoU under it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import (
    DataError,
    DegenerateInputError,
    InvariantError,
    ParameterError,
    ShapeError,
    UndefinedMetricsError,
    WriteError,
)
from .feature_io import CodeMap, LabelMask
from .resample import nearest_indices

_UNIT_TOL = 1e-5
_NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class Centroids:
    """k unit-norm cluster centers in code space."""

    k: int
    d: int
    vectors: np.ndarray

    def __post_init__(self) -> None:
        if self.k < 1 or self.d < 1:
            raise InvariantError("k and d must be >= 1")
        if not isinstance(self.vectors, np.ndarray) or self.vectors.dtype.kind != "f":
            raise InvariantError("centroid vectors must be a float ndarray")
        if self.vectors.shape != (self.k, self.d):
            raise InvariantError(
                f"centroid shape {self.vectors.shape}, expected {(self.k, self.d)}"
            )
        norms = np.linalg.norm(self.vectors, axis=1)
        if not np.isfinite(self.vectors).all():
            raise InvariantError("centroids contain NaN or Inf")
        if np.abs(norms - 1.0).max() > _UNIT_TOL:
            raise InvariantError("centroids must be unit-norm")


def _unit_rows(x: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1)
    if (norms < _NORM_FLOOR).any():
        raise DegenerateInputError(f"{what} contains a zero-norm vector")
    return x / norms[:, None]


def kmeans_plus_plus_init(
    codes: np.ndarray, k: int, rng: np.random.Generator
) -> np.ndarray:
    """Seed centers over cosine distance d = 1 - cos: selection probability
    of each point follows d^2 to its nearest already-chosen center."""
    n = codes.shape[0]
    unit = _unit_rows(np.asarray(codes, dtype=np.float64), "codes")
    centers = np.empty((k, unit.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centers[0] = unit[first]
    dist = (1.0 - unit @ centers[0]) ** 2
    for i in range(1, k):
        total = dist.sum()
        if total <= 0.0:
            # all points coincide with chosen centers; fall back to uniform
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=dist / total))
        centers[i] = unit[idx]
        dist = np.minimum(dist, (1.0 - unit @ centers[i]) ** 2)
    return centers


def _lloyd_cosine(
    unit: np.ndarray, centers: np.ndarray, max_iters: int
) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Alternate assign (max cosine) and update (normalized mean) steps until
    assignments stabilize; objective is the sum of (1 - cosine to assigned
    center), recorded after every assignment step."""
    k = centers.shape[0]
    trace: list[float] = []
    prev_labels: np.ndarray | None = None
    labels = np.zeros(unit.shape[0], dtype=np.int64)
    for _ in range(max_iters):
        sims = unit @ centers.T
        best = sims.max(axis=1)
        labels = sims.argmax(axis=1)
        trace.append(float((1.0 - best).sum()))
        if prev_labels is not None and np.array_equal(labels, prev_labels):
            break
        prev_labels = labels
        new_centers = centers.copy()
        counts = np.bincount(labels, minlength=k)
        for j in range(k):
            if counts[j] == 0:
                # reseed to the point farthest from its assigned center
                new_centers[j] = unit[int(best.argmin())]
                continue
            mean = unit[labels == j].mean(axis=0)
            norm = np.linalg.norm(mean)
            if norm >= _NORM_FLOOR:
                new_centers[j] = mean / norm
        centers = new_centers
    return centers, labels, trace


def kmeans_cosine_trace(
    codes: np.ndarray, k: int, max_iters: int = 100, seed: int = 0
) -> tuple[Centroids, np.ndarray, list[float]]:
    """Single cosine k-means run, also returning the objective after each
    assignment step (non-increasing by construction)."""
    codes = np.asarray(codes)
    if codes.ndim != 2:
        raise ShapeError(f"codes must be 2-D, got shape {codes.shape}")
    n, d = codes.shape
    if k < 1:
        raise ParameterError("k must be >= 1")
    if max_iters < 1:
        raise ParameterError("max_iters must be >= 1")
    unit = _unit_rows(codes.astype(np.float64, copy=False), "codes")
    distinct = np.unique(unit, axis=0).shape[0]
    if distinct < k:
        raise ParameterError(
            f"need at least {k} distinct code vectors, found {distinct}"
        )
    rng = np.random.default_rng(seed)
    centers = kmeans_plus_plus_init(unit, k, rng)
    centers, labels, trace = _lloyd_cosine(unit, centers, max_iters)
    return Centroids(k, d, centers), labels, trace


def kmeans_cosine(
    codes: np.ndarray, k: int, max_iters: int = 100, seed: int = 0, n_init: int = 1
) -> tuple[Centroids, np.ndarray]:
    """Cosine k-means; with ``n_init`` > 1 keeps the lowest-objective run."""
    if n_init < 1:
        raise ParameterError("n_init must be >= 1")
    best: tuple[Centroids, np.ndarray] | None = None
    best_objective = np.inf
    for restart in range(n_init):
        centroids, labels, trace = kmeans_cosine_trace(
            codes, k, max_iters, seed=seed + restart
        )
        if trace[-1] < best_objective:
            best_objective = trace[-1]
            best = (centroids, labels)
    assert best is not None
    return best


def assign_clusters(code_map: CodeMap, centroids: Centroids) -> LabelMask:
    """Nearest-centroid (highest cosine) label per cell; zero codes get label 0."""
    if code_map.c != centroids.d:
        raise ShapeError(
            f"code dim {code_map.c} does not match centroid dim {centroids.d}"
        )
    flat = code_map.data.reshape(-1, code_map.c).astype(np.float64, copy=False)
    norms = np.linalg.norm(flat, axis=1)
    safe = np.where(norms < _NORM_FLOOR, 1.0, norms)
    sims = (flat / safe[:, None]) @ centroids.vectors.T
    labels = sims.argmax(axis=1)
    labels[norms < _NORM_FLOOR] = 0
    return LabelMask(
        code_map.hp, code_map.wp, labels.reshape(code_map.hp, code_map.wp)
    )


def upsample_mask(mask: LabelMask, out_h: int, out_w: int) -> LabelMask:
    """Nearest-neighbor upsample to (out_h, out_w); must not shrink."""
    if out_h < mask.h or out_w < mask.w:
        raise ParameterError(
            f"upsample target ({out_h}, {out_w}) smaller than input ({mask.h}, {mask.w})"
        )
    rows = nearest_indices(out_h, mask.h)
    cols = nearest_indices(out_w, mask.w)
    return LabelMask(
        out_h, out_w, mask.labels[np.ix_(rows, cols)], ignore_id=mask.ignore_id
    )


@dataclass(frozen=True)
class ConfusionMatrix:
    """counts[p, g] = pixels predicted as cluster p with ground-truth class g."""

    counts: np.ndarray

    def __post_init__(self) -> None:
        c = self.counts
        if not isinstance(c, np.ndarray) or c.ndim != 2 or c.dtype != np.int64:
            raise InvariantError("confusion counts must be a 2-D int64 ndarray")
        if (c < 0).any():
            raise InvariantError("confusion counts must be >= 0")

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if self.counts.shape != other.counts.shape:
            raise ShapeError("confusion matrices differ in shape")
        return ConfusionMatrix(self.counts + other.counts)

    @property
    def k_pred(self) -> int:
        return self.counts.shape[0]

    @property
    def k_gt(self) -> int:
        return self.counts.shape[1]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def accumulate_confusion(
    pred: LabelMask,
    gt: LabelMask,
    k_pred: int,
    k_gt: int,
    ignore_id: int | None = None,
) -> ConfusionMatrix:
    """Histogram predicted cluster against ground-truth class.

    Pixels whose ground-truth label equals ``ignore_id`` are excluded, as are
    pixels carrying either mask's own ignore id. Results from different
    images add up to the dataset-level matrix.
    """
    if (gt.h, gt.w) != (pred.h, pred.w):
        raise ShapeError(
            f"prediction {(pred.h, pred.w)} and ground truth {(gt.h, gt.w)} differ"
        )
    p = pred.labels.ravel()
    g = gt.labels.ravel()
    keep = np.ones(g.shape[0], dtype=bool)
    for ign in (ignore_id, gt.ignore_id):
        if ign is not None:
            keep &= g != ign
    if pred.ignore_id is not None:
        keep &= p != pred.ignore_id
    p = p[keep]
    g = g[keep]
    if p.size:
        if p.min() < 0 or p.max() >= k_pred:
            bad = int(p.min()) if p.min() < 0 else int(p.max())
            raise DataError(f"predicted label {bad} outside [0, {k_pred})")
        if g.min() < 0 or g.max() >= k_gt:
            bad = int(g.min()) if g.min() < 0 else int(g.max())
            raise DataError(f"ground-truth label {bad} outside [0, {k_gt})")
    flat = np.bincount(p * k_gt + g, minlength=k_pred * k_gt)
    return ConfusionMatrix(flat.reshape(k_pred, k_gt).astype(np.int64))


def pad_square(confusion: ConfusionMatrix) -> ConfusionMatrix:
    """Zero-pad a rectangular confusion matrix to the enclosing square."""
    counts = confusion.counts
    side = max(counts.shape)
    if counts.shape == (side, side):
        return confusion
    padded = np.zeros((side, side), dtype=np.int64)
    padded[: counts.shape[0], : counts.shape[1]] = counts
    return ConfusionMatrix(padded)


def hungarian_match(confusion: ConfusionMatrix) -> list[int]:
    """Permutation pi maximizing the matched pixel count sum_p counts[p, pi(p)].

    Requires a square matrix (pad rectangular ones with ``pad_square`` first);
    solved exactly as an assignment problem on negated counts. Deterministic.
    """
    counts = confusion.counts
    if counts.shape[0] != counts.shape[1]:
        raise ParameterError(f"count matrix must be square, got {counts.shape}")
    rows, cols = linear_sum_assignment(-counts)
    pi = np.empty(counts.shape[0], dtype=np.int64)
    pi[rows] = cols
    return [int(x) for x in pi]


def greedy_match(confusion: ConfusionMatrix) -> list[int]:
    """Many-to-one matching: each cluster maps to its most frequent class.

    Intended for over-clustering (k_pred > k_gt); unlike ``hungarian_match``
    the result need not be injective. Ties break to the lowest class id.
    """
    if confusion.k_gt < 1:
        raise ParameterError("confusion matrix has no ground-truth classes")
    return [int(x) for x in confusion.counts.argmax(axis=1)]


@dataclass(frozen=True)
class EvalReport:
    pixel_accuracy: float
    miou: float
    per_class_iou: list[float | None]
    matching: list[int]
    confusion: ConfusionMatrix
    n_pixels: int

    def __post_init__(self) -> None:
        for name in ("pixel_accuracy", "miou"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvariantError(f"{name} must lie in [0, 1], got {v}")
        if self.n_pixels < 1:
            raise InvariantError("report needs at least one scored pixel")

    def to_json_dict(self) -> dict:
        return {
            "pixel_accuracy": self.pixel_accuracy,
            "miou": self.miou,
            "per_class_iou": self.per_class_iou,
            "matching": list(self.matching),
            "confusion": self.confusion.counts.tolist(),
            "n_pixels": self.n_pixels,
        }


def evaluate(confusion: ConfusionMatrix, matching: Sequence[int]) -> EvalReport:
    """Pixel accuracy and per-class IoU under a cluster-to-class matching.

    ``matching[p]`` names the class credited with cluster p's pixels; entries
    pointing past the real class range (possible after square padding) match
    nothing. IoU is undefined (null) for classes with an empty union, and
    mIoU averages only the defined values.
    """
    counts = confusion.counts
    k_pred, k_gt = counts.shape
    if len(matching) != k_pred:
        raise ShapeError(
            f"matching covers {len(matching)} clusters, confusion has {k_pred}"
        )
    total = int(counts.sum())
    if total == 0:
        raise UndefinedMetricsError("no labelled pixels to evaluate")
    pi = np.asarray(matching, dtype=np.int64)
    if (pi < 0).any():
        raise ShapeError("matching entries must be >= 0")

    correct = sum(
        int(counts[p, pi[p]]) for p in range(k_pred) if pi[p] < k_gt
    )
    row_tot = counts.sum(axis=1)
    col_tot = counts.sum(axis=0)
    per_class: list[float | None] = []
    ious: list[float] = []
    for g in range(k_gt):
        matched = np.flatnonzero(pi == g)
        tp = int(counts[matched, g].sum())
        fp = int(row_tot[matched].sum()) - tp
        fn = int(col_tot[g]) - tp
        union = tp + fp + fn
        if union == 0:
            per_class.append(None)
            continue
        iou = tp / union
        per_class.append(iou)
        ious.append(iou)
    if not ious:
        raise UndefinedMetricsError("IoU undefined for every class")
    return EvalReport(
        pixel_accuracy=correct / total,
        miou=float(np.mean(ious)),
        per_class_iou=per_class,
        matching=[int(x) for x in matching],
        confusion=confusion,
        n_pixels=total,
    )


def match_and_evaluate(
    confusion: ConfusionMatrix, method: str = "hungarian"
) -> EvalReport:
    """Pad to square if needed, match clusters to classes, and score."""
    if method == "hungarian":
        matching = hungarian_match(pad_square(confusion))[: confusion.k_pred]
    elif method == "greedy":
        matching = greedy_match(confusion)
    else:
        raise ParameterError(f"unknown matching method {method!r}")
    return evaluate(confusion, matching)


def write_report(report: EvalReport, path: str | Path, extra: dict | None = None) -> None:
    """Serialize an evaluation report as deterministic, sorted-key JSON."""
    payload = report.to_json_dict()
    if extra:
        payload.update(extra)
    try:
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise WriteError(f"cannot write report to {path}: {exc}") from exc
