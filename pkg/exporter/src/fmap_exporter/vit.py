"""Minimal vision transformer for dense feature extraction.

The model is rebuilt from a checkpoint's own shapes (embedding width, depth,
patch size, MLP width, position table length), so any DINO-style ViT state
dict loads strictly — no architecture registry required. Head count is the
one quantity a state dict does not record; well-known widths map to their
standard head counts and anything else must be given explicitly.
"""

from __future__ import annotations

import hashlib
import math

import torch
import torch.nn.functional as F
from torch import nn

from .errors import SpecError, WeightLoadError

# standard head counts for the common DINO/ViT widths
_HEADS_BY_WIDTH = {192: 3, 384: 6, 768: 12, 1024: 16}


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int, qkv_bias: bool):
        super().__init__()
        if dim % num_heads:
            raise SpecError(f"width {dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3, bias=qkv_bias)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        qkv = (
            self.qkv(x)
            .reshape(b, n, 3, self.num_heads, d // self.num_heads)
            .permute(2, 0, 3, 1, 4)
        )
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_hidden: int, qkv_bias: bool):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads, qkv_bias)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_hidden)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class PatchEmbed(nn.Module):
    def __init__(self, dim: int, patch_size: int):
        super().__init__()
        self.proj = nn.Conv2d(3, dim, kernel_size=patch_size, stride=patch_size)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.proj(x)


class VisionTransformer(nn.Module):
    def __init__(
        self,
        embed_dim: int,
        depth: int,
        num_heads: int,
        patch_size: int,
        mlp_hidden: int,
        n_pos_tokens: int,
        qkv_bias: bool = True,
    ):
        super().__init__()
        self.embed_dim = embed_dim
        self.patch_size = patch_size
        self.patch_embed = PatchEmbed(embed_dim, patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, embed_dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, n_pos_tokens, embed_dim))
        self.blocks = nn.ModuleList(
            Block(embed_dim, num_heads, mlp_hidden, qkv_bias) for _ in range(depth)
        )
        self.norm = nn.LayerNorm(embed_dim)

    def forward_tokens(self, x: torch.Tensor, layer: int = -1) -> torch.Tensor:
        """Patch-token embeddings (class token dropped) after block ``layer``
        and the final norm; shape (batch, gh*gw, embed_dim)."""
        depth = len(self.blocks)
        idx = layer if layer >= 0 else depth + layer
        if not 0 <= idx < depth:
            raise SpecError(f"layer {layer} outside the {depth}-block backbone")
        x = self.patch_embed(x)
        gh, gw = x.shape[2], x.shape[3]
        x = x.flatten(2).transpose(1, 2)
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        x = torch.cat([cls, x], dim=1)
        x = x + interpolate_pos_embed(self.pos_embed, gh, gw)
        for i, block in enumerate(self.blocks):
            x = block(x)
            if i == idx:
                break
        return self.norm(x)[:, 1:]


def interpolate_pos_embed(pos_embed: torch.Tensor, gh: int, gw: int) -> torch.Tensor:
    """Resample a (1, 1+n, d) position table to a gh x gw patch grid.

    The class-token slot passes through; patch positions are interpolated
    bicubically from the (square) pre-training grid, so checkpoints trained
    at one resolution drive inference at another.
    """
    n = pos_embed.shape[1] - 1
    if n == gh * gw:
        return pos_embed
    side = int(round(math.sqrt(n)))
    if side * side != n:
        raise WeightLoadError(f"position table holds {n} patches, not a square grid")
    d = pos_embed.shape[2]
    cls_pos, patch_pos = pos_embed[:, :1], pos_embed[:, 1:]
    patch_pos = patch_pos.reshape(1, side, side, d).permute(0, 3, 1, 2)
    patch_pos = F.interpolate(
        patch_pos, size=(gh, gw), mode="bicubic", align_corners=False
    )
    patch_pos = patch_pos.permute(0, 2, 3, 1).reshape(1, gh * gw, d)
    return torch.cat([cls_pos, patch_pos], dim=1)


def build_vit_from_state_dict(
    state_dict: dict, num_heads: int | None = None
) -> VisionTransformer:
    """Instantiate a ViT whose every shape matches the checkpoint, then load
    it strictly."""
    try:
        conv_w = state_dict["patch_embed.proj.weight"]
        embed_dim = conv_w.shape[0]
        patch_size = conv_w.shape[2]
        n_pos_tokens = state_dict["pos_embed"].shape[1]
        mlp_hidden = state_dict["blocks.0.mlp.fc1.weight"].shape[0]
    except KeyError as exc:
        raise WeightLoadError(f"state dict missing ViT key {exc}") from exc
    depth = 0
    while f"blocks.{depth}.norm1.weight" in state_dict:
        depth += 1
    if depth == 0:
        raise WeightLoadError("state dict holds no transformer blocks")
    qkv_bias = "blocks.0.attn.qkv.bias" in state_dict
    if num_heads is None:
        num_heads = _HEADS_BY_WIDTH.get(embed_dim)
        if num_heads is None:
            raise SpecError(
                f"no standard head count for width {embed_dim}; set num_heads"
            )
    model = VisionTransformer(
        embed_dim=embed_dim,
        depth=depth,
        num_heads=num_heads,
        patch_size=patch_size,
        mlp_hidden=mlp_hidden,
        n_pos_tokens=n_pos_tokens,
        qkv_bias=qkv_bias,
    )
    try:
        model.load_state_dict(state_dict, strict=True)
    except RuntimeError as exc:
        raise WeightLoadError(f"checkpoint does not fit the inferred ViT: {exc}") from exc
    return model


def weight_checksum(model: nn.Module) -> str:
    """Order-stable digest of every parameter and buffer byte."""
    digest = hashlib.sha256()
    state = model.state_dict()
    for name in sorted(state):
        digest.update(name.encode())
        digest.update(state[name].detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()
