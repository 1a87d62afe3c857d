"""Trainable per-patch projection head, its analytic backward pass, and Adam.

The head maps each frozen backbone feature to a low-dimensional code through
two summed branches: a plain linear projection and a two-layer relu branch.
The linear path keeps early training stable; the relu branch adds capacity.
Gradients are derived by hand (the graph is small and fixed) and enforced by
finite-difference tests.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .correspondence import (
    LossTerms,
    PairSample,
    _correlation_loss_arrays,
    _cosine_backward_arrays,
    _pairwise_cosine,
    knn_pairs,
    pool_feature_map,
    sample_pairs,
    unit_grid,
)
from .errors import (
    CorruptionError,
    FormatError,
    InvariantError,
    NumericError,
    ParameterError,
    ShapeError,
    UnsupportedVersionError,
    WriteError,
)
from .feature_io import CodeMap, FeatureMap

SGHD_MAGIC = b"SGHD"
SGHD_VERSION = 1
_SGHD_HEADER = struct.Struct("<4sHIII")

# checkpoint serialization order; also the canonical parameter iteration order
PARAM_FIELDS = ("w_lin", "b_lin", "w1", "b1", "w2", "b2")


@dataclass(frozen=True)
class HeadParams:
    """Projection head parameters: linear branch plus 2-layer relu branch."""

    c: int
    d: int
    h_hidden: int
    w_lin: np.ndarray
    b_lin: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self) -> None:
        if min(self.c, self.d, self.h_hidden) < 1:
            raise InvariantError("head dims must all be >= 1")
        if self.d > self.c:
            raise InvariantError(
                f"code dim {self.d} must not exceed input channels {self.c}"
            )
        expected = {
            "w_lin": (self.c, self.d),
            "b_lin": (self.d,),
            "w1": (self.c, self.h_hidden),
            "b1": (self.h_hidden,),
            "w2": (self.h_hidden, self.d),
            "b2": (self.d,),
        }
        for name, shape in expected.items():
            arr = getattr(self, name)
            if not isinstance(arr, np.ndarray) or arr.dtype.kind != "f":
                raise InvariantError(f"{name} must be a float ndarray")
            if arr.shape != shape:
                raise InvariantError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.isfinite(arr).all():
                raise InvariantError(f"{name} contains NaN or Inf")

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_FIELDS}

    def map(self, fn) -> "HeadParams":
        return HeadParams(
            self.c, self.d, self.h_hidden, *(fn(getattr(self, n)) for n in PARAM_FIELDS)
        )


def zeros_like_params(p: HeadParams) -> HeadParams:
    return p.map(np.zeros_like)


def add_params(a: HeadParams, b: HeadParams) -> HeadParams:
    return HeadParams(
        a.c, a.d, a.h_hidden,
        *(getattr(a, n) + getattr(b, n) for n in PARAM_FIELDS),
    )


@dataclass(frozen=True)
class AdamState:
    """First/second moment accumulators (one array per parameter) and step count."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int

    def __post_init__(self) -> None:
        if self.t < 0:
            raise InvariantError("step counter must be >= 0")
        for name in PARAM_FIELDS:
            if name not in self.m or name not in self.v:
                raise InvariantError(f"missing moment accumulator for {name}")
            if (self.v[name] < 0).any():
                raise InvariantError("second moments must be >= 0")


def init_adam_state(p: HeadParams) -> AdamState:
    return AdamState(
        m={n: np.zeros_like(a) for n, a in p.arrays().items()},
        v={n: np.zeros_like(a) for n, a in p.arrays().items()},
        t=0,
    )


@dataclass(frozen=True)
class PairMix:
    """How many pairs of each kind go into one batch."""

    n_self: int = 6
    n_knn: int = 5
    n_random: int = 5

    def __post_init__(self) -> None:
        if min(self.n_self, self.n_knn, self.n_random) < 0:
            raise InvariantError("pair counts must be >= 0")

    @property
    def total(self) -> int:
        return self.n_self + self.n_knn + self.n_random


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 16
    epochs: int = 10
    loss_terms: LossTerms = field(default_factory=LossTerms)
    knn_k: int = 7
    pair_mix: PairMix = field(default_factory=PairMix)
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    centering: bool = True

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise InvariantError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise InvariantError("batch_size must be >= 1")
        if self.epochs < 1:
            raise InvariantError("epochs must be >= 1")
        if self.knn_k < 1:
            raise InvariantError("knn_k must be >= 1")
        if self.pair_mix.total != self.batch_size:
            raise ParameterError(
                f"pair_mix totals {self.pair_mix.total} pairs but batch_size is {self.batch_size}"
            )


def init_head(c: int, d: int, h_hidden: int, seed: int) -> HeadParams:
    """Fan-in-scaled uniform weights (range +-sqrt(1/fan_in)), zero biases."""
    if min(c, d, h_hidden) < 1:
        raise ParameterError("c, d, h_hidden must all be >= 1")
    if d > c:
        raise ParameterError(f"code dim {d} must not exceed input channels {c}")
    rng = np.random.default_rng(seed)

    def draw(fan_in: int, shape: tuple[int, ...]) -> np.ndarray:
        bound = math.sqrt(1.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(np.float32)

    return HeadParams(
        c=c,
        d=d,
        h_hidden=h_hidden,
        w_lin=draw(c, (c, d)),
        b_lin=np.zeros(d, dtype=np.float32),
        w1=draw(c, (c, h_hidden)),
        b1=np.zeros(h_hidden, dtype=np.float32),
        w2=draw(h_hidden, (h_hidden, d)),
        b2=np.zeros(d, dtype=np.float32),
    )


def _forward_cells(x: np.ndarray, p: HeadParams) -> tuple[np.ndarray, np.ndarray]:
    """Forward over flattened cells (n, c); returns codes and relu pre-activations."""
    z1 = x @ p.w1 + p.b1
    codes = x @ p.w_lin + p.b_lin + np.maximum(z1, 0.0) @ p.w2 + p.b2
    return codes, z1


def head_forward(fm: FeatureMap, p: HeadParams) -> CodeMap:
    """Map every cell feature to a code: linear branch + relu branch, summed."""
    if fm.c != p.c:
        raise ShapeError(f"feature channels {fm.c} do not match head input {p.c}")
    x = fm.data.reshape(-1, fm.c)
    codes, _ = _forward_cells(x, p)
    return CodeMap(fm.hp, fm.wp, p.d, codes.reshape(fm.hp, fm.wp, p.d))


def head_backward(fm: FeatureMap, p: HeadParams, grad_codes: np.ndarray) -> HeadParams:
    """Exact parameter gradients for ``head_forward`` given code gradients.

    The relu subgradient at exactly zero is zero. Returns a HeadParams-shaped
    container holding the gradients.
    """
    if fm.c != p.c:
        raise ShapeError(f"feature channels {fm.c} do not match head input {p.c}")
    if grad_codes.shape != (fm.hp, fm.wp, p.d):
        raise ShapeError(
            f"grad shape {grad_codes.shape} does not match ({fm.hp}, {fm.wp}, {p.d})"
        )
    x = fm.data.reshape(-1, fm.c)
    dy = grad_codes.reshape(-1, p.d)
    z1 = x @ p.w1 + p.b1
    a1 = np.maximum(z1, 0.0)
    dz1 = (dy @ p.w2.T) * (z1 > 0)
    return HeadParams(
        c=p.c,
        d=p.d,
        h_hidden=p.h_hidden,
        w_lin=x.T @ dy,
        b_lin=dy.sum(axis=0),
        w1=x.T @ dz1,
        b1=dz1.sum(axis=0),
        w2=a1.T @ dy,
        b2=dy.sum(axis=0),
    )


def adam_step(
    p: HeadParams, g: HeadParams, s: AdamState, cfg: TrainConfig
) -> tuple[HeadParams, AdamState]:
    """One bias-corrected Adam update; returns the new params and state."""
    if (g.c, g.d, g.h_hidden) != (p.c, p.d, p.h_hidden):
        raise ShapeError("gradient dims do not match parameters")
    for name, arr in g.arrays().items():
        if not np.isfinite(arr).all():
            raise NumericError(f"non-finite gradient in {name}")
    t = s.t + 1
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    updated: dict[str, np.ndarray] = {}
    for name in PARAM_FIELDS:
        grad = getattr(g, name)
        m = cfg.beta1 * s.m[name] + (1.0 - cfg.beta1) * grad
        v = cfg.beta2 * s.v[name] + (1.0 - cfg.beta2) * grad * grad
        new_m[name] = m
        new_v[name] = v
        step = cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        updated[name] = getattr(p, name) - step
    return (
        HeadParams(p.c, p.d, p.h_hidden, *(updated[n] for n in PARAM_FIELDS)),
        AdamState(new_m, new_v, t),
    )


def _pair_gradients(
    unit_left: np.ndarray,
    unit_right: np.ndarray,
    codes_left: np.ndarray,
    codes_right: np.ndarray,
    bias: float,
    scale: float,
    centering: bool,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Loss of one pair plus gradients w.r.t. both code grids (scaled by ``scale``)."""
    f_corr = _pairwise_cosine(unit_left, unit_right)
    if centering:
        f_corr = f_corr - f_corr.mean(axis=(2, 3), keepdims=True)

    norms_l = np.linalg.norm(codes_left, axis=-1)
    norms_r = np.linalg.norm(codes_right, axis=-1)
    if (norms_l < 1e-12).any() or (norms_r < 1e-12).any():
        raise NumericError("head produced a zero-norm code vector")
    cu_l = codes_left / norms_l[..., None]
    cu_r = codes_right / norms_r[..., None]
    s_corr = _pairwise_cosine(cu_l, cu_r)

    loss, grad_s = _correlation_loss_arrays(f_corr, s_corr, bias)
    grad_l, grad_r = _cosine_backward_arrays(
        cu_l, norms_l, cu_r, norms_r, s_corr, grad_s * scale
    )
    return loss, grad_l, grad_r


def train_epoch(
    features: Sequence[FeatureMap],
    p: HeadParams,
    s: AdamState,
    cfg: TrainConfig,
    epoch_index: int,
) -> tuple[HeadParams, AdamState, dict]:
    """One epoch of correspondence distillation.

    Batches hold ``cfg.batch_size`` pair samples mixed per ``cfg.pair_mix``;
    the optimizer steps once per batch on the pair-averaged objective.
    Deterministic for fixed (dataset, cfg, epoch_index); the frozen features
    are never modified.
    """
    if len(features) == 0:
        raise ParameterError("training dataset is empty")
    c = features[0].c
    if any(fm.c != c for fm in features):
        raise ShapeError("all feature maps must share the channel count")
    if p.c != c:
        raise ShapeError(f"head expects {p.c} channels, dataset has {c}")
    n_images = len(features)
    mix = cfg.pair_mix
    if mix.total == 0:
        raise ParameterError("pair_mix requests zero pairs per batch")

    rng = np.random.default_rng([cfg.seed, epoch_index])
    units = [unit_grid(fm)[0] for fm in features]

    knn_table: list[PairSample] | None = None
    if mix.n_knn > 0:
        pooled = np.stack([pool_feature_map(fm) for fm in features])
        knn_table = knn_pairs(pooled, cfg.knn_k)

    n_batches = -(-n_images // cfg.batch_size)
    kind_sums = {kind: 0.0 for kind in ("self", "knn", "random")}
    kind_counts = {kind: 0 for kind in ("self", "knn", "random")}
    objective_sum = 0.0

    for _ in range(n_batches):
        samples: list[PairSample] = []
        if mix.n_self > 0:
            samples += sample_pairs(n_images, "self", rng, mix.n_self)
        if mix.n_knn > 0:
            samples += sample_pairs(n_images, "knn", rng, mix.n_knn, knn_table)
        if mix.n_random > 0:
            samples += sample_pairs(n_images, "random", rng, mix.n_random)
        batch_n = len(samples)

        code_cache: dict[int, np.ndarray] = {}
        grad_cache: dict[int, np.ndarray] = {}

        def codes_of(idx: int) -> np.ndarray:
            if idx not in code_cache:
                code_cache[idx] = head_forward(features[idx], p).data
            return code_cache[idx]

        batch_objective = 0.0
        for pair in samples:
            weight = cfg.loss_terms.weight(pair.kind)
            bias = cfg.loss_terms.bias(pair.kind)
            codes_l = codes_of(pair.left)
            codes_r = codes_l if pair.right == pair.left else codes_of(pair.right)
            loss, grad_l, grad_r = _pair_gradients(
                units[pair.left],
                units[pair.right],
                codes_l,
                codes_r,
                bias,
                weight / batch_n,
                cfg.centering,
            )
            if not math.isfinite(loss):
                raise NumericError(f"non-finite loss on pair {pair}")
            kind_sums[pair.kind] += loss
            kind_counts[pair.kind] += 1
            batch_objective += weight * loss / batch_n
            if pair.left not in grad_cache:
                grad_cache[pair.left] = np.zeros_like(codes_l)
            grad_cache[pair.left] += grad_l
            if pair.right not in grad_cache:
                grad_cache[pair.right] = np.zeros_like(codes_r)
            grad_cache[pair.right] += grad_r

        grads = zeros_like_params(p)
        for idx in sorted(grad_cache):
            grads = add_params(grads, head_backward(features[idx], p, grad_cache[idx]))
        p, s = adam_step(p, grads, s, cfg)
        objective_sum += batch_objective

    metrics = {
        "total": objective_sum / n_batches,
        "n_batches": n_batches,
        "n_pairs": sum(kind_counts.values()),
    }
    for kind in ("self", "knn", "random"):
        metrics[kind] = (
            kind_sums[kind] / kind_counts[kind] if kind_counts[kind] else None
        )
    return p, s, metrics


def save_checkpoint(p: HeadParams, path: str | Path) -> None:
    """Write head parameters: ``SGHD`` magic, u16 version, u32 dims, float32 data."""
    header = _SGHD_HEADER.pack(SGHD_MAGIC, SGHD_VERSION, p.c, p.d, p.h_hidden)
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            for name in PARAM_FIELDS:
                fh.write(np.ascontiguousarray(getattr(p, name), dtype="<f4").tobytes())
    except OSError as exc:
        raise WriteError(f"cannot write checkpoint to {path}: {exc}") from exc


def load_checkpoint(path: str | Path) -> HeadParams:
    """Read a head checkpoint, validating magic, version, and payload length."""
    blob = Path(path).read_bytes()
    if blob[:4] != SGHD_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {SGHD_MAGIC!r}")
    if len(blob) < _SGHD_HEADER.size:
        raise CorruptionError(f"{path}: truncated header ({len(blob)} bytes)")
    _, version, c, d, h_hidden = _SGHD_HEADER.unpack_from(blob)
    if version != SGHD_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported checkpoint version {version}")
    shapes = {
        "w_lin": (c, d),
        "b_lin": (d,),
        "w1": (c, h_hidden),
        "b1": (h_hidden,),
        "w2": (h_hidden, d),
        "b2": (d,),
    }
    expected = 4 * sum(int(np.prod(shape)) for shape in shapes.values())
    actual = len(blob) - _SGHD_HEADER.size
    if actual != expected:
        raise CorruptionError(
            f"{path}: payload is {actual} bytes, header declares {expected}"
        )
    offset = _SGHD_HEADER.size
    arrays: dict[str, np.ndarray] = {}
    for name in PARAM_FIELDS:
        shape = shapes[name]
        count = int(np.prod(shape))
        arrays[name] = (
            np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
            .reshape(shape)
            .copy()
        )
        offset += count * 4
    return HeadParams(c, d, h_hidden, *(arrays[n] for n in PARAM_FIELDS))
