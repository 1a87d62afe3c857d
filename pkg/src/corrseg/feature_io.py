"""Dense feature-map interchange format and a synthetic-scene oracle.

The ``.fmap`` container is the byte-level contract shared with any external
feature exporter: a fixed little-endian header (magic ``FMAP``, u16 version,
u32 grid dims) followed by the raw float32 grid in (row, col, channel) order.

The synthetic-scene generator builds feature grids whose class structure is
known by construction, so every downstream stage can be scored without any
real imagery or hand-made labels.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    CorruptionError,
    FormatError,
    InvariantError,
    ParameterError,
    UnsupportedVersionError,
    WriteError,
)

FMAP_MAGIC = b"FMAP"
FMAP_VERSION = 1

# magic (4s), version (u16), hp, wp, c (u32 each), all little-endian
_FMAP_HEADER = struct.Struct("<4sHIII")


@dataclass(frozen=True)
class FeatureMap:
    """Per-patch feature grid of shape (hp, wp, c).

    All values must be finite. float32 is the on-disk dtype; in memory a
    float64 grid is also accepted so numerical checks can run the same code
    paths at full precision.
    """

    hp: int
    wp: int
    c: int
    data: np.ndarray

    def __post_init__(self) -> None:
        if self.hp < 1 or self.wp < 1 or self.c < 1:
            raise InvariantError(
                f"grid dims must all be >= 1, got {self.hp}x{self.wp}x{self.c}"
            )
        if not isinstance(self.data, np.ndarray) or self.data.dtype.kind != "f":
            raise InvariantError("data must be a float ndarray")
        if self.data.shape != (self.hp, self.wp, self.c):
            raise InvariantError(
                f"data shape {self.data.shape} does not match "
                f"({self.hp}, {self.wp}, {self.c})"
            )
        if not np.isfinite(self.data).all():
            raise InvariantError("feature map contains NaN or Inf")

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "FeatureMap":
        a = np.asarray(arr)
        if a.ndim != 3:
            raise InvariantError(f"expected a 3-d array, got shape {a.shape}")
        return cls(a.shape[0], a.shape[1], a.shape[2], a)


# Head outputs (low-dimensional codes) share the same container; the channel
# count is the code dimension there.
CodeMap = FeatureMap


@dataclass(frozen=True)
class LabelMask:
    """Class-id raster; ``ignore_id`` marks pixels excluded from scoring."""

    h: int
    w: int
    labels: np.ndarray
    ignore_id: int | None = None

    def __post_init__(self) -> None:
        if self.h < 1 or self.w < 1:
            raise InvariantError(f"mask dims must be >= 1, got {self.h}x{self.w}")
        if not isinstance(self.labels, np.ndarray) or self.labels.dtype.kind not in "iu":
            raise InvariantError("labels must be an integer ndarray")
        if self.labels.shape != (self.h, self.w):
            raise InvariantError(
                f"labels shape {self.labels.shape} does not match ({self.h}, {self.w})"
            )
        if self.labels.size and int(self.labels.min()) < 0:
            raise InvariantError("labels must be >= 0")

    @classmethod
    def from_array(cls, arr: np.ndarray, ignore_id: int | None = None) -> "LabelMask":
        a = np.asarray(arr)
        if a.ndim != 2:
            raise InvariantError(f"expected a 2-d array, got shape {a.shape}")
        return cls(a.shape[0], a.shape[1], a.astype(np.int32, copy=False), ignore_id)


def write_feature_map(fm: FeatureMap, path: str | Path) -> None:
    """Write ``fm`` to ``path`` in the ``.fmap`` container format.

    Layout: ``FMAP`` magic, u16 version, u32 hp/wp/c, then hp*wp*c float32
    values little-endian in (row, col, channel) order.
    """
    header = _FMAP_HEADER.pack(FMAP_MAGIC, FMAP_VERSION, fm.hp, fm.wp, fm.c)
    payload = np.ascontiguousarray(fm.data, dtype="<f4").tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(payload)
    except OSError as exc:
        raise WriteError(f"cannot write feature map to {path}: {exc}") from exc


def read_feature_map(path: str | Path) -> FeatureMap:
    """Read a ``.fmap`` file, validating magic, version, and payload length."""
    blob = Path(path).read_bytes()
    if blob[:4] != FMAP_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {FMAP_MAGIC!r}")
    if len(blob) < _FMAP_HEADER.size:
        raise CorruptionError(f"{path}: truncated header ({len(blob)} bytes)")
    _, version, hp, wp, c = _FMAP_HEADER.unpack_from(blob)
    if version != FMAP_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported format version {version}")
    expected = hp * wp * c * 4
    actual = len(blob) - _FMAP_HEADER.size
    if actual != expected:
        raise CorruptionError(
            f"{path}: payload is {actual} bytes, header declares {expected}"
        )
    data = (
        np.frombuffer(blob, dtype="<f4", offset=_FMAP_HEADER.size)
        .reshape(hp, wp, c)
        .copy()
    )
    return FeatureMap(hp, wp, c, data)


@dataclass(frozen=True)
class Region:
    """Axis-aligned rectangle [top, top+height) x [left, left+width)."""

    top: int
    left: int
    height: int
    width: int
    class_id: int


@dataclass(frozen=True)
class SceneSpec:
    """Recipe for one synthetic scene.

    The grid is partitioned into labeled rectangles; each cell's feature is
    its class prototype plus Gaussian noise, L2-normalized. Prototypes are
    orthonormal, so class separation is guaranteed by construction.

    ``proto_seed`` decouples the prototype rotation from the noise stream:
    scenes of one dataset share it so class k means the same feature
    direction in every scene, which is what lets a single head and a single
    cluster-to-class matching work across scenes. When None, prototypes
    derive from ``seed`` like everything else.
    """

    hp: int
    wp: int
    k: int
    c: int
    noise_sigma: float
    region_layout: tuple[Region, ...]
    seed: int
    proto_seed: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "region_layout", tuple(self.region_layout))
        if self.hp < 1 or self.wp < 1:
            raise InvariantError("grid dims must be >= 1")
        if self.k < 1 or self.c < 1:
            raise InvariantError("k and c must be >= 1")
        if self.k > self.c:
            raise InvariantError(
                f"need k <= c for {self.k} orthonormal prototypes in {self.c} dims"
            )
        if self.noise_sigma < 0:
            raise InvariantError("noise_sigma must be >= 0")
        paint = np.full((self.hp, self.wp), -1, dtype=np.int64)
        for r in self.region_layout:
            if r.height < 1 or r.width < 1:
                raise InvariantError(f"region {r} has empty extent")
            if r.top < 0 or r.left < 0 or r.top + r.height > self.hp or r.left + r.width > self.wp:
                raise InvariantError(f"region {r} exceeds the {self.hp}x{self.wp} grid")
            if not 0 <= r.class_id < self.k:
                raise InvariantError(f"region class id {r.class_id} outside [0, {self.k})")
            block = paint[r.top : r.top + r.height, r.left : r.left + r.width]
            if (block != -1).any():
                raise InvariantError(f"region {r} overlaps another region")
            block[:] = r.class_id
        if (paint == -1).any():
            raise InvariantError("regions do not cover the grid")
        present = np.unique(paint)
        if len(present) != self.k:
            missing = sorted(set(range(self.k)) - set(int(x) for x in present))
            raise InvariantError(f"classes {missing} appear in no region")


def scene_prototypes(spec: SceneSpec) -> np.ndarray:
    """The k orthonormal class prototypes a scene spec deterministically yields."""
    seed = spec.seed if spec.proto_seed is None else spec.proto_seed
    rng = np.random.default_rng(seed)
    return _orthonormal_rows(rng.normal(size=(spec.c, spec.c)))[: spec.k]


def _orthonormal_rows(gauss: np.ndarray) -> np.ndarray:
    q, r = np.linalg.qr(gauss)
    # fix the QR sign ambiguity so the rotation is a pure function of the input
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    rows = (q * signs).T
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def generate_synthetic_scene(spec: SceneSpec) -> tuple[FeatureMap, LabelMask]:
    """Build one synthetic scene: noisy prototype features plus its label mask.

    Deterministic for a fixed spec: the rng stream is consumed in a fixed
    order (prototype rotation first when it shares the noise seed, then cell
    noise).
    """
    rng = np.random.default_rng(spec.seed)
    if spec.proto_seed is None:
        protos = _orthonormal_rows(rng.normal(size=(spec.c, spec.c)))[: spec.k]
    else:
        protos = scene_prototypes(spec)

    labels = np.empty((spec.hp, spec.wp), dtype=np.int32)
    for r in spec.region_layout:
        labels[r.top : r.top + r.height, r.left : r.left + r.width] = r.class_id

    feats = protos[labels] + rng.normal(0.0, spec.noise_sigma, size=(spec.hp, spec.wp, spec.c))
    norms = np.linalg.norm(feats, axis=-1, keepdims=True)
    if (norms < 1e-12).any():
        raise InvariantError("noise drove a cell feature to zero norm")
    feats = (feats / norms).astype(np.float32)
    return FeatureMap(spec.hp, spec.wp, spec.c, feats), LabelMask(spec.hp, spec.wp, labels)


def stripe_layout(hp: int, wp: int, k: int) -> tuple[Region, ...]:
    """Split the grid into k horizontal stripes, one class per stripe."""
    if k < 1:
        raise ParameterError("k must be >= 1")
    if k > hp:
        raise ParameterError(f"cannot cut {hp} rows into {k} stripes")
    edges = [i * hp // k for i in range(k + 1)]
    return tuple(
        Region(edges[i], 0, edges[i + 1] - edges[i], wp, i) for i in range(k)
    )


def random_rect_layout(
    hp: int, wp: int, k: int, n_regions: int, rng: np.random.Generator
) -> tuple[Region, ...]:
    """Random guillotine partition into ``n_regions`` rectangles covering all k classes.

    The largest rectangle is split repeatedly; class ids are assigned so every
    class in [0, k) appears at least once.
    """
    if n_regions < k:
        raise ParameterError(f"need at least {k} regions to cover {k} classes")
    if n_regions > hp * wp:
        raise ParameterError(f"{n_regions} regions cannot tile a {hp}x{wp} grid")
    rects: list[tuple[int, int, int, int]] = [(0, 0, hp, wp)]
    while len(rects) < n_regions:
        # split the largest still-splittable rectangle along its longer side
        order = sorted(range(len(rects)), key=lambda i: (-rects[i][2] * rects[i][3], i))
        idx = next(i for i in order if rects[i][2] * rects[i][3] >= 2)
        top, left, h, w = rects.pop(idx)
        if h >= w:
            cut = int(rng.integers(1, h))
            rects += [(top, left, cut, w), (top + cut, left, h - cut, w)]
        else:
            cut = int(rng.integers(1, w))
            rects += [(top, left, h, cut), (top, left + cut, h, w - cut)]
    class_ids = np.concatenate(
        [np.arange(k), rng.integers(0, k, size=n_regions - k)]
    )
    class_ids = rng.permutation(class_ids)
    return tuple(
        Region(t, l, h, w, int(cid))
        for (t, l, h, w), cid in zip(rects, class_ids)
    )
