"""Cosine correspondence tensors, the clamped distillation loss, pair sampling.

The correspondence between two patch grids is the full 4-d volume of cosine
similarities over all patch pairs. Training distills the correspondence
structure of frozen backbone features into the head's codes: code
correspondences above zero are pulled toward (or pushed away from) the
feature correspondences, shifted by a per-pair-kind bias.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import (
    DegenerateInputError,
    InvariantError,
    ParameterError,
    ShapeError,
)
from .feature_io import FeatureMap

PAIR_KINDS = ("self", "knn", "random")

_NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class CorrTensor:
    """Pairwise cosine volume between two grids, indexed (h, w, i, j)."""

    hp: int
    wp: int
    hq: int
    wq: int
    data: np.ndarray

    def __post_init__(self) -> None:
        if min(self.hp, self.wp, self.hq, self.wq) < 1:
            raise InvariantError("correspondence dims must all be >= 1")
        if not isinstance(self.data, np.ndarray) or self.data.dtype.kind != "f":
            raise InvariantError("data must be a float ndarray")
        if self.data.shape != (self.hp, self.wp, self.hq, self.wq):
            raise InvariantError(
                f"data shape {self.data.shape} does not match "
                f"({self.hp}, {self.wp}, {self.hq}, {self.wq})"
            )


@dataclass(frozen=True)
class PairSample:
    """One training pair: two image indices plus how they were chosen."""

    left: int
    right: int
    kind: str

    def __post_init__(self) -> None:
        if self.kind not in PAIR_KINDS:
            raise InvariantError(f"unknown pair kind {self.kind!r}")
        if self.left < 0 or self.right < 0:
            raise InvariantError("image indices must be >= 0")
        if self.kind == "self" and self.left != self.right:
            raise InvariantError("self pair must reference one image")
        if self.kind != "self" and self.left == self.right:
            raise InvariantError(f"{self.kind} pair must join two distinct images")


@dataclass(frozen=True)
class LossTerms:
    """Weights and biases of the three pair-kind loss terms.

    Random pairs carry a higher bias than self/knn pairs so dissimilar
    content is actively pushed apart. All values are tunable; these defaults
    behave well on the synthetic scenes.
    """

    lambda_self: float = 1.0
    lambda_knn: float = 1.0
    lambda_rand: float = 1.0
    b_self: float = 0.30
    b_knn: float = 0.30
    b_rand: float = 0.60

    def __post_init__(self) -> None:
        weights = (self.lambda_self, self.lambda_knn, self.lambda_rand)
        if any(w < 0 for w in weights):
            raise InvariantError("loss weights must be >= 0")
        if all(w == 0 for w in weights):
            raise InvariantError("at least one loss weight must be positive")

    def weight(self, kind: str) -> float:
        return {"self": self.lambda_self, "knn": self.lambda_knn, "random": self.lambda_rand}[kind]

    def bias(self, kind: str) -> float:
        return {"self": self.b_self, "knn": self.b_knn, "random": self.b_rand}[kind]


def unit_grid(fm: FeatureMap) -> tuple[np.ndarray, np.ndarray]:
    """Per-cell L2-normalized grid plus the norms; rejects near-zero vectors."""
    norms = np.linalg.norm(fm.data, axis=-1)
    if (norms < _NORM_FLOOR).any():
        raise DegenerateInputError("grid contains a vector with near-zero norm")
    return fm.data / norms[..., None], norms


def _pairwise_cosine(fu: np.ndarray, gu: np.ndarray) -> np.ndarray:
    hp, wp, c = fu.shape
    hq, wq, _ = gu.shape
    flat = fu.reshape(hp * wp, c) @ gu.reshape(hq * wq, c).T
    return flat.reshape(hp, wp, hq, wq)


def cosine_correspondence(f: FeatureMap, g: FeatureMap) -> CorrTensor:
    """Cosine similarity between every cell of ``f`` and every cell of ``g``."""
    if f.c != g.c:
        raise ShapeError(f"channel mismatch: {f.c} vs {g.c}")
    fu, _ = unit_grid(f)
    gu, _ = unit_grid(g)
    return CorrTensor(f.hp, f.wp, g.hp, g.wp, _pairwise_cosine(fu, gu))


def spatial_center(t: CorrTensor) -> CorrTensor:
    """Subtract, per source cell, the mean correspondence over all target cells."""
    centered = t.data - t.data.mean(axis=(2, 3), keepdims=True)
    return CorrTensor(t.hp, t.wp, t.hq, t.wq, centered)


def _correlation_loss_arrays(
    f_corr: np.ndarray, s_corr: np.ndarray, b: float
) -> tuple[float, np.ndarray]:
    n = f_corr.size
    shifted = f_corr - b
    positive = s_corr > 0
    loss = -float(np.sum(shifted * np.where(positive, s_corr, 0.0))) / n
    grad = np.where(positive, -shifted / n, 0.0)
    return loss, grad


def correlation_loss(
    f_corr: CorrTensor, s_corr: CorrTensor, b: float
) -> tuple[float, CorrTensor]:
    """Clamped correlation distillation loss and its gradient w.r.t. ``s_corr``.

    loss = -(1/N) * sum (f_corr - b) * max(s_corr, 0). The clamp subgradient
    at exactly zero is zero, so the gradient is fully deterministic.
    """
    if (f_corr.hp, f_corr.wp, f_corr.hq, f_corr.wq) != (
        s_corr.hp,
        s_corr.wp,
        s_corr.hq,
        s_corr.wq,
    ):
        raise ShapeError("correspondence tensors differ in dims")
    loss, grad = _correlation_loss_arrays(f_corr.data, s_corr.data, b)
    return loss, CorrTensor(f_corr.hp, f_corr.wp, f_corr.hq, f_corr.wq, grad)


def _cosine_backward_arrays(
    fu: np.ndarray,
    f_norms: np.ndarray,
    gu: np.ndarray,
    g_norms: np.ndarray,
    corr: np.ndarray,
    grad_corr: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    hp, wp, c = fu.shape
    hq, wq, _ = gu.shape
    a = fu.reshape(-1, c)
    bb = gu.reshape(-1, c)
    g = grad_corr.reshape(hp * wp, hq * wq)
    s = corr.reshape(hp * wp, hq * wq)
    gs = g * s
    grad_left = (g @ bb - gs.sum(axis=1, keepdims=True) * a) / f_norms.reshape(-1, 1)
    grad_right = (g.T @ a - gs.sum(axis=0)[:, None] * bb) / g_norms.reshape(-1, 1)
    return grad_left.reshape(hp, wp, c), grad_right.reshape(hq, wq, c)


def cosine_correspondence_backward(
    f: FeatureMap, g: FeatureMap, corr: CorrTensor, grad_corr: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of a scalar through ``cosine_correspondence`` w.r.t. both grids.

    ``corr`` must be the (uncentered) output for (f, g) and ``grad_corr`` the
    upstream gradient with the same shape.
    """
    if grad_corr.shape != corr.data.shape:
        raise ShapeError("grad shape does not match the correspondence tensor")
    fu, f_norms = unit_grid(f)
    gu, g_norms = unit_grid(g)
    return _cosine_backward_arrays(fu, f_norms, gu, g_norms, corr.data, grad_corr)


def pool_feature_map(fm: FeatureMap) -> np.ndarray:
    """Image-level descriptor: the global mean cell feature, L2-normalized."""
    pooled = fm.data.mean(axis=(0, 1))
    norm = float(np.linalg.norm(pooled))
    if norm < _NORM_FLOOR:
        raise DegenerateInputError("pooled feature has near-zero norm")
    return pooled / norm


def knn_pairs(pooled: Sequence[np.ndarray] | np.ndarray, k: int) -> list[PairSample]:
    """Pairs joining each image with its k nearest neighbors by pooled cosine.

    Ties are broken toward the lower image index; an image never pairs with
    itself.
    """
    mat = np.asarray(pooled, dtype=np.float64)
    if mat.ndim != 2:
        raise ShapeError(f"pooled vectors must form a 2-d array, got shape {mat.shape}")
    n = mat.shape[0]
    if n < 2:
        raise ParameterError("need at least 2 images for neighbor pairs")
    if k < 1:
        raise ParameterError("k must be >= 1")
    if k >= n:
        raise ParameterError(f"k={k} must be below the image count {n}")
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    if (norms < _NORM_FLOOR).any():
        raise DegenerateInputError("pooled vector with near-zero norm")
    unit = mat / norms
    sims = unit @ unit.T
    pairs: list[PairSample] = []
    for i in range(n):
        order = np.lexsort((np.arange(n), -sims[i]))
        neighbors = [int(j) for j in order if j != i][:k]
        pairs.extend(PairSample(i, j, "knn") for j in neighbors)
    return pairs


def sample_pairs(
    n_images: int,
    strategy: str,
    rng: np.random.Generator,
    count: int,
    knn_table: Sequence[PairSample] | None = None,
) -> list[PairSample]:
    """Draw ``count`` training pairs with the given strategy.

    self: walks fresh random permutations, so any ``count <= n_images`` draws
    distinct images. knn: uniform draws from the neighbor table. random:
    uniform ordered pairs with distinct members.
    """
    if strategy not in PAIR_KINDS:
        raise ParameterError(f"unknown strategy {strategy!r}")
    if n_images < 1:
        raise ParameterError("need at least one image")
    if count < 0:
        raise ParameterError("count must be >= 0")
    if strategy in ("knn", "random") and n_images < 2:
        raise ParameterError(f"{strategy} pairs need at least 2 images")
    if strategy == "knn" and not knn_table:
        raise ParameterError("knn strategy requires a neighbor table")

    if strategy == "self":
        out: list[PairSample] = []
        while len(out) < count:
            for i in rng.permutation(n_images):
                out.append(PairSample(int(i), int(i), "self"))
                if len(out) == count:
                    break
        return out
    if strategy == "knn":
        assert knn_table is not None
        picks = rng.integers(0, len(knn_table), size=count)
        return [knn_table[int(i)] for i in picks]
    lefts = rng.integers(0, n_images, size=count)
    offsets = rng.integers(1, n_images, size=count)
    return [
        PairSample(int(l), int((l + o) % n_images), "random")
        for l, o in zip(lefts, offsets)
    ]
