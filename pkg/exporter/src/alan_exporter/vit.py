"""Minimal ViT-S backbone for feature extraction.

Parameter names mirror the reference DINO/timm vision transformer
(patch_embed.proj, cls_token, pos_embed, blocks.N.{norm1,attn.qkv,
attn.proj,norm2,mlp.fc1,mlp.fc2}, norm) so published small-ViT state
dicts load directly. Inference only: no dropout, no stochastic depth,
no head.
"""

from __future__ import annotations

import math

import torch
from torch import nn


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3, bias=True)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.num_heads, c // self.num_heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        out = attn.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(b, n, c))


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class Block(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class PatchEmbed(nn.Module):
    def __init__(self, in_chans: int, embed_dim: int, patch_size: int):
        super().__init__()
        self.proj = nn.Conv2d(in_chans, embed_dim, kernel_size=patch_size,
                              stride=patch_size)

    def forward(self, x):
        return self.proj(x).flatten(2).transpose(1, 2)


class VisionTransformer(nn.Module):
    """Patch-token transformer returning (class token, patch grid)."""

    def __init__(self, img_size: int, patch_size: int, embed_dim: int = 384,
                 depth: int = 12, num_heads: int = 6, in_chans: int = 3):
        super().__init__()
        if img_size % patch_size != 0:
            raise ValueError(
                f"image size {img_size} not divisible by patch size "
                f"{patch_size}"
            )
        self.img_size = img_size
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.grid = img_size // patch_size
        self.patch_embed = PatchEmbed(in_chans, embed_dim, patch_size)
        n_tokens = self.grid * self.grid + 1
        self.cls_token = nn.Parameter(torch.zeros(1, 1, embed_dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, n_tokens, embed_dim))
        self.blocks = nn.ModuleList(
            Block(embed_dim, num_heads) for _ in range(depth))
        self.norm = nn.LayerNorm(embed_dim, eps=1e-6)
        self._init_weights()

    def _init_weights(self):
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)

    @torch.no_grad()
    def forward_features(self, x: torch.Tensor):
        """[B, C_in, H, W] -> (class tokens [B, D], patches [B, G, G, D])."""
        b = x.shape[0]
        if x.shape[-2:] != (self.img_size, self.img_size):
            raise ValueError(
                f"expected {self.img_size}x{self.img_size} input, "
                f"got {tuple(x.shape[-2:])}"
            )
        tokens = self.patch_embed(x)
        cls = self.cls_token.expand(b, -1, -1)
        tokens = torch.cat([cls, tokens], dim=1) + self.pos_embed
        for block in self.blocks:
            tokens = block(tokens)
        tokens = self.norm(tokens)
        patches = tokens[:, 1:].reshape(b, self.grid, self.grid,
                                        self.embed_dim)
        return tokens[:, 0], patches


def vit_small(img_size: int, patch_size: int,
              depth: int = 12) -> VisionTransformer:
    return VisionTransformer(img_size=img_size, patch_size=patch_size,
                             embed_dim=384, depth=depth, num_heads=6)


def load_backbone(model_id: str, img_size: int,
                  patch_size: int) -> VisionTransformer:
    """Instantiate the frozen backbone.

    ``model_id`` is either a path to a ViT-S state dict (plain, or a
    checkpoint dict with a ``teacher``/``student``/``state_dict`` entry)
    or ``random:<seed>`` for a seeded randomly initialized backbone
    (pipeline testing without a downloadable checkpoint).
    """
    if model_id.startswith("random:"):
        # Seeded fresh weights: the construction-time init draws from the
        # global torch generator, so seeding it makes the model reproducible.
        torch.manual_seed(int(model_id.split(":", 1)[1]))
        model = vit_small(img_size, patch_size)
    else:
        model = vit_small(img_size, patch_size)
        state = torch.load(model_id, map_location="cpu", weights_only=True)
        for key in ("teacher", "student", "state_dict", "model"):
            if isinstance(state, dict) and key in state \
                    and isinstance(state[key], dict):
                state = state[key]
                break
        state = {k.removeprefix("module.").removeprefix("backbone."): v
                 for k, v in state.items()}
        missing, unexpected = model.load_state_dict(state, strict=False)
        core_missing = [k for k in missing if not k.startswith("head")]
        if core_missing:
            raise ValueError(
                f"{model_id}: incompatible state dict, missing "
                f"{core_missing[:5]}{'...' if len(core_missing) > 5 else ''}"
            )
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model
