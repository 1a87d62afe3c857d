"""Batch feature export: tiles in, .fmap files plus a manifest out.

The backbone stays frozen for the whole run — a parameter checksum taken
before the first tile must match one taken after the last, or the export is
rejected. Individual tiles are allowed to fail (bad bytes, wrong mode);
failures are listed in the manifest and the run continues.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import (
    EmptyInputError,
    FrozenWeightError,
    SpecError,
    WeightLoadError,
)
from .fmap_writer import write_fmap
from .vit import VisionTransformer, build_vit_from_state_dict, weight_checksum

_TILE_PATTERNS = ("*.png", "*.jpg", "*.jpeg")


@dataclass(frozen=True)
class ExportSpec:
    """Everything that determines an export run.

    ``mean``/``std`` must be the normalization constants the backbone was
    pre-trained with; there is deliberately no default because silently
    wrong normalization degrades features without erroring.
    """

    weights: str
    input_dir: str
    output_dir: str
    mean: tuple[float, float, float]
    std: tuple[float, float, float]
    model: str = "vit_small_patch8"
    patch_size: int = 8
    input_size: int = 256
    layer: int = -1
    num_heads: int | None = None
    device: str = "cpu"

    def __post_init__(self) -> None:
        if self.input_size < self.patch_size or self.input_size % self.patch_size:
            raise SpecError(
                f"input_size {self.input_size} is not a multiple of "
                f"patch_size {self.patch_size}"
            )
        if len(self.mean) != 3 or len(self.std) != 3:
            raise SpecError("mean and std must each hold 3 channel values")
        if any(s <= 0 for s in self.std):
            raise SpecError("std values must be positive")

    @property
    def grid_size(self) -> int:
        return self.input_size // self.patch_size


def _pick_device(preference: str) -> torch.device:
    if preference.startswith("cuda") and not torch.cuda.is_available():
        return torch.device("cpu")
    return torch.device(preference)


def load_backbone(spec: ExportSpec) -> VisionTransformer:
    """Load the frozen backbone described by the spec, in eval mode."""
    try:
        state = torch.load(spec.weights, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises several unrelated types here
        raise WeightLoadError(f"cannot load weights {spec.weights}: {exc}") from exc
    if not isinstance(state, dict):
        raise WeightLoadError(f"{spec.weights} does not hold a state dict")
    # tolerate checkpoints that wrap the state dict
    for key in ("state_dict", "model", "teacher", "student"):
        if key in state and isinstance(state[key], dict):
            state = state[key]
            break
    state = {k.removeprefix("module."): v for k, v in state.items()}
    model = build_vit_from_state_dict(state, num_heads=spec.num_heads)
    if model.patch_size != spec.patch_size:
        raise SpecError(
            f"spec says patch {spec.patch_size} but the checkpoint was built "
            f"with patch {model.patch_size}"
        )
    model.to(_pick_device(spec.device))
    model.eval()
    model.requires_grad_(False)
    return model


def load_tile_tensor(path: str | Path, spec: ExportSpec) -> torch.Tensor:
    """Decode, resize to the model input, and normalize one tile."""
    with Image.open(path) as img:
        rgb = img.convert("RGB").resize(
            (spec.input_size, spec.input_size), Image.BILINEAR
        )
    arr = np.asarray(rgb, dtype=np.float32) / 255.0
    arr = (arr - np.asarray(spec.mean, dtype=np.float32)) / np.asarray(
        spec.std, dtype=np.float32
    )
    return torch.from_numpy(arr.transpose(2, 0, 1)).unsqueeze(0)


def extract_features(
    model: VisionTransformer, batch: torch.Tensor, layer: int = -1
) -> np.ndarray:
    """Patch-token grid (gh, gw, c) for a single normalized tile."""
    with torch.inference_mode():
        tokens = model.forward_tokens(batch.to(next(model.parameters()).device), layer)
    gh = batch.shape[2] // model.patch_size
    gw = batch.shape[3] // model.patch_size
    return (
        tokens[0].cpu().numpy().reshape(gh, gw, model.embed_dim).astype(np.float32)
    )


def list_tiles(input_dir: str | Path) -> list[Path]:
    root = Path(input_dir)
    if not root.is_dir():
        raise EmptyInputError(f"input dir {root} is not a directory")
    files = sorted(p for pat in _TILE_PATTERNS for p in root.glob(pat))
    if not files:
        raise EmptyInputError(f"no tiles ({', '.join(_TILE_PATTERNS)}) in {root}")
    return files


def export_features(spec: ExportSpec) -> dict:
    """Run every tile in ``spec.input_dir`` through the frozen backbone and
    write one .fmap per tile; returns (and writes) the manifest."""
    model = load_backbone(spec)
    tiles = list_tiles(spec.input_dir)
    out_dir = Path(spec.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    before = weight_checksum(model)
    files: list[str] = []
    failures: list[dict] = []
    for tile in tiles:
        out_name = tile.stem + ".fmap"
        try:
            batch = load_tile_tensor(tile, spec)
            grid = extract_features(model, batch, spec.layer)
            write_fmap(grid, out_dir / out_name)
        except Exception as exc:  # per-file tolerance: record and continue
            failures.append({"file": tile.name, "error": str(exc)})
            continue
        files.append(out_name)
    if weight_checksum(model) != before:
        raise FrozenWeightError("backbone parameters changed during export")

    manifest = {
        "model": spec.model,
        "patch_size": spec.patch_size,
        "files": files,
        "failures": failures,
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )
    return manifest
