"""Tile and mask ingestion: raster decode, resizing, palette decode, splits.

Images and annotation masks travel as 8-bit RGB rasters (PNG or JPEG).
Masks encode class ids as exact palette colors, so decoding tolerates no
color fuzz: an unexpected color is surfaced as corruption, not snapped to
the nearest class. Ground resolution (meters per pixel) is carried as
metadata only; nothing computes with it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import (
    DataError,
    DecodeError,
    FormatError,
    InvariantError,
    ManifestError,
    ParameterError,
)
from .feature_io import LabelMask
from .resample import bilinear_weights, nearest_indices

# PIL modes that decode losslessly to 8-bit RGB
_RGB_MODES = {"RGB", "RGBA", "L", "LA", "P", "1"}


@dataclass(frozen=True)
class RgbTile:
    """One 8-bit RGB raster: pixels shaped (h, w, 3), row-major."""

    h: int
    w: int
    pixels: np.ndarray
    source_path: str | None = None
    meters_per_pixel: float | None = None

    def __post_init__(self) -> None:
        if self.h < 1 or self.w < 1:
            raise InvariantError("tile dims must be >= 1")
        px = self.pixels
        if not isinstance(px, np.ndarray) or px.dtype != np.uint8:
            raise InvariantError("pixels must be a uint8 ndarray")
        if px.shape != (self.h, self.w, 3):
            raise InvariantError(
                f"pixel buffer shape {px.shape}, expected {(self.h, self.w, 3)}"
            )
        if self.meters_per_pixel is not None and self.meters_per_pixel <= 0:
            raise InvariantError("meters_per_pixel must be > 0 when present")


@dataclass(frozen=True)
class PaletteEntry:
    class_id: int
    name: str
    rgb: tuple[int, int, int]


@dataclass(frozen=True)
class Palette:
    """Class-id/color/name table for annotation masks."""

    entries: tuple[PaletteEntry, ...]
    ignore_id: int | None = None

    def __post_init__(self) -> None:
        ids = [e.class_id for e in self.entries]
        if ids != list(range(len(ids))):
            raise InvariantError(f"class ids must be contiguous from 0, got {ids}")
        colors = [e.rgb for e in self.entries]
        if len(set(colors)) != len(colors):
            raise InvariantError("palette colors must be unique")
        for e in self.entries:
            if len(e.rgb) != 3 or any(not 0 <= v <= 255 for v in e.rgb):
                raise InvariantError(f"bad rgb triple {e.rgb} for class {e.class_id}")
        if self.ignore_id is not None and not 0 <= self.ignore_id < len(ids):
            raise InvariantError(f"ignore_id {self.ignore_id} is not a class id")

    @property
    def n_classes(self) -> int:
        return len(self.entries)

    def color_of(self, class_id: int) -> tuple[int, int, int]:
        return self.entries[class_id].rgb


def load_palette(path: str | Path) -> Palette:
    """Read a palette JSON file: {"ignore_id": int|null, "classes": [...]}."""
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ManifestError(f"cannot read palette {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"palette {path} is not valid JSON: {exc}") from exc
    return palette_from_dict(doc, what=str(path))


def palette_from_dict(doc: dict, what: str = "palette") -> Palette:
    if not isinstance(doc, dict) or "classes" not in doc:
        raise FormatError(f'{what} must be an object with a "classes" array')
    try:
        entries = tuple(
            PaletteEntry(int(c["id"]), str(c["name"]), tuple(int(v) for v in c["rgb"]))
            for c in sorted(doc["classes"], key=lambda c: int(c["id"]))
        )
        return Palette(entries=entries, ignore_id=doc.get("ignore_id"))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{what} has a malformed class entry: {exc}") from exc


def palette_to_dict(palette: Palette) -> dict:
    return {
        "ignore_id": palette.ignore_id,
        "classes": [
            {"id": e.class_id, "name": e.name, "rgb": list(e.rgb)}
            for e in palette.entries
        ],
    }


def deepglobe_palette() -> Palette:
    """The packaged seven-class land-cover palette (unknown mapped to ignore)."""
    text = resources.files("corrseg.data").joinpath("deepglobe_palette.json").read_text()
    return palette_from_dict(json.loads(text), what="packaged palette")


def load_tile(path: str | Path) -> RgbTile:
    """Decode an 8-bit PNG/JPEG raster to RGB; grayscale replicates channels."""
    try:
        with Image.open(path) as img:
            if img.mode not in _RGB_MODES:
                raise FormatError(
                    f"{path}: unsupported raster mode {img.mode!r} (8-bit only)"
                )
            rgb = img.convert("RGB")
            arr = np.asarray(rgb, dtype=np.uint8)
    except FileNotFoundError as exc:
        raise DecodeError(f"{path}: no such file") from exc
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DecodeError(f"{path}: cannot decode raster: {exc}") from exc
    h, w = arr.shape[:2]
    return RgbTile(h=h, w=w, pixels=arr, source_path=str(path))


def resize_bilinear(tile: RgbTile, out_h: int, out_w: int) -> RgbTile:
    """Bilinear resample with half-pixel centers, rounded back to uint8.

    Ground resolution scales with the width ratio: downsampling a 50 cm/px
    tile by 10x yields 5 m/px.
    """
    if out_h < 1 or out_w < 1:
        raise ParameterError(f"target dims must be >= 1, got ({out_h}, {out_w})")
    if (out_h, out_w) == (tile.h, tile.w):
        return tile
    row_lo, row_hi, row_t = bilinear_weights(out_h, tile.h)
    col_lo, col_hi, col_t = bilinear_weights(out_w, tile.w)
    px = tile.pixels.astype(np.float64)
    top = px[row_lo][:, col_lo] * (1 - col_t)[None, :, None] + px[row_lo][
        :, col_hi
    ] * col_t[None, :, None]
    bot = px[row_hi][:, col_lo] * (1 - col_t)[None, :, None] + px[row_hi][
        :, col_hi
    ] * col_t[None, :, None]
    out = top * (1 - row_t)[:, None, None] + bot * row_t[:, None, None]
    mpp = tile.meters_per_pixel
    if mpp is not None:
        mpp = mpp * (tile.w / out_w)
    return RgbTile(
        h=out_h,
        w=out_w,
        pixels=np.clip(np.rint(out), 0, 255).astype(np.uint8),
        source_path=tile.source_path,
        meters_per_pixel=mpp,
    )


def mask_from_palette(mask_tile: RgbTile, palette: Palette) -> LabelMask:
    """Exact per-pixel color-to-class decode; any unlisted color is an error."""
    px = mask_tile.pixels
    labels = np.full((mask_tile.h, mask_tile.w), -1, dtype=np.int64)
    for entry in palette.entries:
        hit = (px == np.array(entry.rgb, dtype=np.uint8)).all(axis=2)
        labels[hit] = entry.class_id
    bad = np.argwhere(labels < 0)
    if bad.size:
        r, c = (int(v) for v in bad[0])
        color = tuple(int(v) for v in px[r, c])
        raise DataError(
            f"mask color {color} at pixel (row {r}, col {c}) is not in the palette"
            + (f" [{mask_tile.source_path}]" if mask_tile.source_path else "")
        )
    return LabelMask(mask_tile.h, mask_tile.w, labels, ignore_id=palette.ignore_id)


def render_mask(mask: LabelMask, palette: Palette) -> RgbTile:
    """Paint class ids with their palette colors (inverse of mask_from_palette)."""
    if mask.labels.min() < 0 or mask.labels.max() >= palette.n_classes:
        raise DataError(
            f"mask labels outside [0, {palette.n_classes}) cannot be rendered"
        )
    lut = np.array([e.rgb for e in palette.entries], dtype=np.uint8)
    return RgbTile(h=mask.h, w=mask.w, pixels=lut[mask.labels])


def mask_resize_nearest(mask: LabelMask, out_h: int, out_w: int) -> LabelMask:
    """Nearest-neighbor label resize (half-pixel centers); never interpolates."""
    if out_h < 1 or out_w < 1:
        raise ParameterError(f"target dims must be >= 1, got ({out_h}, {out_w})")
    rows = nearest_indices(out_h, mask.h)
    cols = nearest_indices(out_w, mask.w)
    return LabelMask(
        out_h, out_w, mask.labels[np.ix_(rows, cols)], ignore_id=mask.ignore_id
    )


def save_tile_png(tile: RgbTile, path: str | Path) -> None:
    Image.fromarray(tile.pixels, mode="RGB").save(path, format="PNG")


@dataclass(frozen=True)
class SplitEntry:
    image: str
    mask: str | None = None
    meters_per_pixel: float | None = None


@dataclass(frozen=True)
class SplitManifest:
    """Named dataset splits plus the derived unlabeled pseudo-train split."""

    splits: dict[str, tuple[SplitEntry, ...]]
    pseudo_train: tuple[SplitEntry, ...]

    def split(self, name: str) -> tuple[SplitEntry, ...]:
        if name == "pseudo_train":
            return self.pseudo_train
        if name not in self.splits:
            raise ManifestError(f"manifest has no split named {name!r}")
        return self.splits[name]


def _header_dims(path: Path) -> tuple[int, int]:
    with Image.open(path) as img:
        return img.size[1], img.size[0]


def build_split(manifest_path: str | Path) -> SplitManifest:
    """Load a split manifest, validate every referenced file, and derive the
    pseudo-train split as the mask-free union of the declared source splits.

    Relative paths resolve against the manifest's directory. All missing
    paths are reported together rather than one at a time.
    """
    manifest_path = Path(manifest_path)
    try:
        doc = json.loads(manifest_path.read_text())
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {manifest_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest {manifest_path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("splits"), dict):
        raise FormatError(f'manifest {manifest_path} must hold a "splits" object')

    base = manifest_path.parent
    splits: dict[str, tuple[SplitEntry, ...]] = {}
    missing: list[str] = []
    for name, raw_entries in doc["splits"].items():
        entries: list[SplitEntry] = []
        for raw in raw_entries:
            try:
                entry = SplitEntry(
                    image=str(base / raw["image"]),
                    mask=None if raw.get("mask") is None else str(base / raw["mask"]),
                    meters_per_pixel=raw.get("meters_per_pixel"),
                )
            except (KeyError, TypeError) as exc:
                raise FormatError(
                    f"manifest {manifest_path}: malformed entry in split {name!r}: {exc}"
                ) from exc
            for p in (entry.image, entry.mask):
                if p is not None and not Path(p).is_file():
                    missing.append(p)
            entries.append(entry)
        splits[name] = tuple(entries)
    if missing:
        raise ManifestError(
            "manifest references missing files: " + ", ".join(sorted(set(missing)))
        )

    for name, entries in splits.items():
        for entry in entries:
            if entry.mask is None:
                continue
            img_dims = _header_dims(Path(entry.image))
            mask_dims = _header_dims(Path(entry.mask))
            if img_dims != mask_dims:
                raise DataError(
                    f"split {name!r}: image {entry.image} is {img_dims} but its "
                    f"mask is {mask_dims}"
                )

    sources = doc.get("pseudo_train_from", [])
    unknown = [s for s in sources if s not in splits]
    if unknown:
        raise ManifestError(f"pseudo_train_from names unknown splits: {unknown}")
    pseudo = tuple(
        replace(entry, mask=None) for name in sources for entry in splits[name]
    )
    return SplitManifest(splits=splits, pseudo_train=pseudo)
