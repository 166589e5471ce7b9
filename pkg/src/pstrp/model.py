"""Two-stream transformer encoder with order and pairwise-distance heads.

Each stream embeds its flattened patches, adds a learned positional
embedding per sequence slot, runs a pre-norm transformer encoder, and
emits (a) one row of position logits per token and (b) a symmetric
zero-diagonal matrix of pairwise distance predictions from a scalar MLP
over token pairs. The spatial and temporal streams share no weights.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import asdict, dataclass

import torch
from torch import nn

from .errors import ConfigError, ValidationError

CHECKPOINT_VERSION = 1

# preset -> (embed_dim, depth, heads, mlp_ratio)
SIZE_PRESETS = {
    "tiny": (64, 2, 4, 4.0),
    "B": (768, 12, 12, 4.0),
    "L": (1024, 24, 16, 4.0),
    "H": (1280, 32, 16, 4.0),
}


@dataclass
class StreamConfig:
    """Architecture of one encoder stream."""

    n_tokens: int
    patch_input_dim: int
    embed_dim: int = 64
    depth: int = 2
    heads: int = 4
    mlp_ratio: float = 4.0
    dropout: float = 0.1
    size_preset: str | None = None

    def __post_init__(self):
        if self.embed_dim % self.heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"
            )
        if self.n_tokens < 2:
            raise ConfigError(f"need at least 2 tokens, got {self.n_tokens}")


def stream_config(
    preset: str, n_tokens: int, patch_input_dim: int, dropout: float = 0.1
) -> StreamConfig:
    """StreamConfig from a named size preset."""
    if preset not in SIZE_PRESETS:
        raise ConfigError(f"unknown size preset {preset!r}; choose from {sorted(SIZE_PRESETS)}")
    embed_dim, depth, heads, mlp_ratio = SIZE_PRESETS[preset]
    return StreamConfig(
        n_tokens=n_tokens,
        patch_input_dim=patch_input_dim,
        embed_dim=embed_dim,
        depth=depth,
        heads=heads,
        mlp_ratio=mlp_ratio,
        dropout=dropout,
        size_preset=preset,
    )


@dataclass
class StreamOutput:
    """Raw per-slot position logits and the pairwise distance prediction."""

    order_logits: torch.Tensor  # (..., n, n), row = slot, col = position label
    distance_pred: torch.Tensor  # (..., n, n), symmetric, zero diagonal


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim**-0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        batch, n, dim = x.shape
        qkv = self.qkv(x).reshape(batch, n, 3, self.heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(batch, n, dim)
        return self.drop(self.proj(out))


class EncoderBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float, dropout: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads, dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, hidden),
            nn.GELU(),
            nn.Dropout(dropout),
            nn.Linear(hidden, dim),
            nn.Dropout(dropout),
        )

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class StreamEncoder(nn.Module):
    def __init__(self, cfg: StreamConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_proj = nn.Linear(cfg.patch_input_dim, cfg.embed_dim)
        self.pos_embed = nn.Parameter(torch.empty(cfg.n_tokens, cfg.embed_dim))
        nn.init.normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(
            EncoderBlock(cfg.embed_dim, cfg.heads, cfg.mlp_ratio, cfg.dropout)
            for _ in range(cfg.depth)
        )
        self.norm = nn.LayerNorm(cfg.embed_dim)
        self.order_head = nn.Linear(cfg.embed_dim, cfg.n_tokens)
        self.pair_head = nn.Sequential(
            nn.Linear(2 * cfg.embed_dim, cfg.embed_dim),
            nn.GELU(),
            nn.Linear(cfg.embed_dim, 1),
        )

    def embed(self, patches: torch.Tensor) -> torch.Tensor:
        """Project flattened patches and add the per-slot positional embedding.

        ``patches`` is (batch, n_tokens, patch_input_dim); unbatched input is
        promoted.
        """
        if patches.dim() == 2:
            patches = patches.unsqueeze(0)
        if patches.shape[-2:] != (self.cfg.n_tokens, self.cfg.patch_input_dim):
            raise ConfigError(
                f"expected patches (*, {self.cfg.n_tokens}, "
                f"{self.cfg.patch_input_dim}), got {tuple(patches.shape)}"
            )
        return self.patch_proj(patches) + self.pos_embed

    def forward_tokens(self, tokens: torch.Tensor) -> StreamOutput:
        unbatched = tokens.dim() == 2
        x = tokens.unsqueeze(0) if unbatched else tokens
        for block in self.blocks:
            x = block(x)
        x = self.norm(x)

        order_logits = self.order_head(x)

        n = x.shape[-2]
        left = x.unsqueeze(-2).expand(*x.shape[:-1], n, x.shape[-1])
        right = x.unsqueeze(-3).expand_as(left)
        pair = torch.sigmoid(self.pair_head(torch.cat((left, right), dim=-1)).squeeze(-1))
        distance = 0.5 * (pair + pair.transpose(-1, -2))
        eye = torch.eye(n, dtype=distance.dtype, device=distance.device)
        distance = distance * (1.0 - eye)
        if unbatched:
            order_logits = order_logits.squeeze(0)
            distance = distance.squeeze(0)
        return StreamOutput(order_logits=order_logits, distance_pred=distance)

    def forward(self, patches: torch.Tensor) -> StreamOutput:
        unbatched = patches.dim() == 2
        out = self.forward_tokens(self.embed(patches))
        if unbatched:
            return StreamOutput(out.order_logits.squeeze(0), out.distance_pred.squeeze(0))
        return out


class TwoStreamModel(nn.Module):
    """Independent spatial and temporal stream encoders."""

    def __init__(self, spatial_cfg: StreamConfig, temporal_cfg: StreamConfig):
        super().__init__()
        self.spatial = StreamEncoder(spatial_cfg)
        self.temporal = StreamEncoder(temporal_cfg)

    def forward(self, spatial_patches, temporal_patches):
        return self.spatial(spatial_patches), self.temporal(temporal_patches)


def build_two_stream(spatial_cfg: StreamConfig, temporal_cfg: StreamConfig) -> TwoStreamModel:
    return TwoStreamModel(spatial_cfg, temporal_cfg)


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def save_checkpoint(path, model: TwoStreamModel, preprocess: dict, config: dict | None = None):
    """Atomically write a self-describing checkpoint archive.

    ``preprocess`` records the extraction/patching geometry the weights were
    trained with (cube_size, half_window, spatial_grid, channels) so scoring
    can refuse mismatched runs.
    """
    payload = {
        "version": CHECKPOINT_VERSION,
        "spatial_cfg": asdict(model.spatial.cfg),
        "temporal_cfg": asdict(model.temporal.cfg),
        "preprocess": dict(preprocess),
        "config": dict(config) if config else {},
        "model_state": model.state_dict(),
    }
    path = str(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            torch.save(payload, fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> tuple[TwoStreamModel, dict, dict]:
    """Load a checkpoint; returns (model, preprocess, config)."""
    payload = torch.load(str(path), map_location="cpu", weights_only=True)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValidationError(f"unsupported checkpoint version {payload.get('version')}")
    model = TwoStreamModel(
        StreamConfig(**payload["spatial_cfg"]), StreamConfig(**payload["temporal_cfg"])
    )
    model.load_state_dict(payload["model_state"])
    model.eval()
    return model, payload["preprocess"], payload["config"]


def stream_configs_for(
    preset: str,
    half_window: int,
    spatial_grid: int,
    channels: int,
    cube_size: int = 64,
    dropout: float = 0.1,
    overrides: dict | None = None,
) -> tuple[StreamConfig, StreamConfig]:
    """Derive both stream configs from the preprocessing geometry.

    The spatial stream sees n_s**2 tokens of L*C*(side)**2 inputs; the
    temporal stream sees L tokens of C*cube_size**2 inputs.
    """
    length = 2 * half_window + 1
    side = cube_size // spatial_grid
    if side < 1:
        raise ConfigError(f"spatial grid {spatial_grid} too fine for {cube_size}px cubes")
    spatial = stream_config(
        preset, spatial_grid * spatial_grid, length * channels * side * side, dropout
    )
    temporal = stream_config(preset, length, channels * cube_size * cube_size, dropout)
    if overrides:
        for key, value in overrides.items():
            if value is None:
                continue
            if not hasattr(spatial, key):
                raise ConfigError(f"unknown model override {key!r}")
            setattr(spatial, key, value)
            setattr(temporal, key, value)
        spatial.__post_init__()
        temporal.__post_init__()
    return spatial, temporal
