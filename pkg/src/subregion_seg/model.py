"""Promptable segmenter: TinyViT-shaped encoder, box prompt encoder, mask decoder.

The layout follows the LiteMedSAM family at a configurable width:

* a conv stem (stride 4) and an MBConv stage,
* transformer stages joined by conv patch-merging (strides 8, 16, 16),
* a neck projecting the chosen stage to ``prompt_embed_dim`` channels,
* a two-way transformer decoder with one mask token per tumor sub-region
  and a hypernetwork read-out on a 4x upscaled embedding.

The decoder also receives the stride-4 stage-0 features as a high-resolution
skip, which is what lets a desk-scale 64x64 model resolve boundaries finer
than its 4x4 token grid.

Every sub-module is smooth (GELU, LayerNorm, softmax), so the full
encode -> fuse -> decode path can be finite-difference checked in float64.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ArchiveFormatError, ConfigError, InvalidInputError

logger = logging.getLogger(__name__)

N_REGIONS = 3
STEM_CHANNELS = 3


@dataclass
class ModelConfig:
    encoder_dims: list[int] = field(default_factory=lambda: [64, 128, 160, 320])
    encoder_depths: list[int] = field(default_factory=lambda: [2, 2, 6, 2])
    encoder_heads: list[int] | None = None
    prompt_embed_dim: int = 256
    decoder_layers: int = 2
    decoder_heads: int = 8
    input_size: tuple[int, int] = (256, 256)
    in_channels: int = 4
    feature_stage: int = -1
    mlp_ratio: float = 4.0
    desk_scale: bool = False

    @classmethod
    def paper(cls, in_channels: int = 4) -> "ModelConfig":
        return cls(in_channels=in_channels)

    @classmethod
    def desk(cls, in_channels: int = 4) -> "ModelConfig":
        return cls(
            encoder_dims=[8, 16, 16, 32],
            encoder_depths=[1, 1, 2, 1],
            prompt_embed_dim=32,
            decoder_layers=2,
            decoder_heads=4,
            input_size=(64, 64),
            in_channels=in_channels,
            desk_scale=True,
        )

    @classmethod
    def preset(cls, desk_scale: bool, in_channels: int = 4) -> "ModelConfig":
        return cls.desk(in_channels) if desk_scale else cls.paper(in_channels)

    @property
    def heads(self) -> list[int]:
        if self.encoder_heads is not None:
            return list(self.encoder_heads)
        return [max(1, d // 32) for d in self.encoder_dims]

    @property
    def stage_index(self) -> int:
        return self.feature_stage % len(self.encoder_dims)

    @property
    def feature_stride(self) -> int:
        return stage_strides(len(self.encoder_dims))[self.stage_index]

    def validate(self) -> "ModelConfig":
        problems = []
        if len(self.encoder_dims) != len(self.encoder_depths):
            problems.append("len(encoder_dims) must equal len(encoder_depths)")
        if len(self.encoder_dims) < 2:
            problems.append("need at least two encoder stages")
        if self.encoder_heads is not None and len(self.encoder_heads) != len(self.encoder_dims):
            problems.append("len(encoder_heads) must equal len(encoder_dims)")
        for d, h in zip(self.encoder_dims, self.heads):
            if d % h:
                problems.append(f"encoder width {d} not divisible by {h} heads")
        if self.decoder_heads < 1 or self.prompt_embed_dim % self.decoder_heads:
            problems.append("prompt_embed_dim must be divisible by decoder_heads")
        if self.prompt_embed_dim % 8 or self.prompt_embed_dim < 8:
            problems.append("prompt_embed_dim must be a positive multiple of 8")
        if self.in_channels not in (1, 4):
            problems.append("in_channels must be 1 or 4")
        if not -len(self.encoder_dims) <= self.feature_stage < len(self.encoder_dims):
            problems.append("feature_stage out of range")
        elif self.stage_index == 0:
            problems.append("feature_stage must be >= 1 (stage 0 is the skip source)")
        if any(d < 1 for d in self.encoder_depths):
            problems.append("encoder_depths must be >= 1")
        stride = stage_strides(len(self.encoder_dims))[-1] if self.encoder_dims else 1
        h, w = self.input_size
        if h % stride or w % stride:
            problems.append(f"input_size {self.input_size} must be divisible by {stride}")
        if problems:
            raise ConfigError("invalid ModelConfig: " + "; ".join(problems))
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown ModelConfig fields: {sorted(unknown)}")
        d = dict(d)
        if "input_size" in d:
            d["input_size"] = tuple(d["input_size"])
        return cls(**d)


def stage_strides(n_stages: int) -> list[int]:
    """Strides of each encoder stage: 4, 8, 16, then 16 for any further stage."""
    return [min(4 * 2**i, 16) for i in range(n_stages)]


@dataclass
class FeatureMapSet:
    """Per-modality encoder outputs for a batch of slices.

    ``per_modality`` is (B, M, C, h, w) from the configured stage (after the
    neck); ``skip`` is (B, M, C0, 4h, 4w) from stage 0.
    """

    per_modality: torch.Tensor
    skip: torch.Tensor
    stage: int

    def __post_init__(self):
        if self.per_modality.dim() != 5 or self.skip.dim() != 5:
            raise InvalidInputError("feature maps must be (B, M, C, h, w)")
        if self.per_modality.shape[:2] != self.skip.shape[:2]:
            raise InvalidInputError("main and skip maps disagree on batch/modality axes")

    @property
    def n_modalities(self) -> int:
        return self.per_modality.shape[1]

    def select(self, index) -> "FeatureMapSet":
        return FeatureMapSet(self.per_modality[index], self.skip[index], self.stage)

    def permute_modalities(self, order) -> "FeatureMapSet":
        return FeatureMapSet(self.per_modality[:, order], self.skip[:, order], self.stage)


@dataclass
class FusedFeatures:
    """A single fused (or mean-pooled) feature map ready for the decoder."""

    main: torch.Tensor  # (B, C, h, w)
    skip: torch.Tensor  # (B, C0, 4h, 4w)


# -- building blocks ------------------------------------------------------------


class LayerNorm2d(nn.Module):
    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        u = x.mean(1, keepdim=True)
        s = (x - u).pow(2).mean(1, keepdim=True)
        x = (x - u) / torch.sqrt(s + self.eps)
        return self.weight[:, None, None] * x + self.bias[:, None, None]


class MBConv(nn.Module):
    def __init__(self, dim: int, expand: int = 4):
        super().__init__()
        hidden = dim * expand
        self.conv1 = nn.Conv2d(dim, hidden, 1)
        self.conv2 = nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden)
        self.conv3 = nn.Conv2d(hidden, dim, 1)

    def forward(self, x):
        y = F.gelu(self.conv1(x))
        y = F.gelu(self.conv2(y))
        return x + self.conv3(y)


class PatchMerging(nn.Module):
    def __init__(self, in_dim: int, out_dim: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_dim, out_dim, 1)
        self.conv2 = nn.Conv2d(out_dim, out_dim, 3, stride=stride, padding=1, groups=out_dim)
        self.conv3 = nn.Conv2d(out_dim, out_dim, 1)

    def forward(self, x):
        x = F.gelu(self.conv1(x))
        x = F.gelu(self.conv2(x))
        return self.conv3(x)


class Attention(nn.Module):
    """Multi-head attention with an optional internal width."""

    def __init__(self, dim: int, heads: int, inner_dim: int | None = None):
        super().__init__()
        inner_dim = inner_dim or dim
        if inner_dim % heads:
            raise ConfigError(f"attention width {inner_dim} not divisible by {heads} heads")
        self.heads = heads
        self.q_proj = nn.Linear(dim, inner_dim)
        self.k_proj = nn.Linear(dim, inner_dim)
        self.v_proj = nn.Linear(dim, inner_dim)
        self.out_proj = nn.Linear(inner_dim, dim)

    def _split(self, x):
        b, n, c = x.shape
        return x.reshape(b, n, self.heads, c // self.heads).transpose(1, 2)

    def forward(self, q, k, v):
        q, k, v = self._split(self.q_proj(q)), self._split(self.k_proj(k)), self._split(self.v_proj(v))
        attn = (q @ k.transpose(-2, -1)) / math.sqrt(q.shape[-1])
        out = attn.softmax(dim=-1) @ v
        b, h, n, c = out.shape
        return self.out_proj(out.transpose(1, 2).reshape(b, n, h * c))


class MLP(nn.Module):
    def __init__(self, dims: list[int]):
        super().__init__()
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.gelu(x)
        return x


class TinyViTBlock(nn.Module):
    """Global self-attention, a depthwise local conv, then an MLP."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.local_conv = nn.Conv2d(dim, dim, 3, padding=1, groups=dim)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP([dim, int(dim * mlp_ratio), dim])

    def forward(self, x):
        b, c, h, w = x.shape
        t = x.flatten(2).transpose(1, 2)
        y = self.norm1(t)
        t = t + self.attn(y, y, y)
        x = self.local_conv(t.transpose(1, 2).reshape(b, c, h, w))
        t = x.flatten(2).transpose(1, 2)
        t = t + self.mlp(self.norm2(t))
        return t.transpose(1, 2).reshape(b, c, h, w)


class ImageEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        dims, depths = cfg.encoder_dims, cfg.encoder_depths
        strides = stage_strides(len(dims))
        self.stage_index = cfg.stage_index
        self.stem = nn.Sequential(
            nn.Conv2d(STEM_CHANNELS, max(dims[0] // 2, 1), 3, stride=2, padding=1),
            nn.GELU(),
            nn.Conv2d(max(dims[0] // 2, 1), dims[0], 3, stride=2, padding=1),
        )
        stages = [nn.Sequential(*[MBConv(dims[0]) for _ in range(depths[0])])]
        merges = [nn.Identity()]
        for i in range(1, len(dims)):
            merges.append(PatchMerging(dims[i - 1], dims[i], strides[i] // strides[i - 1]))
            stages.append(
                nn.Sequential(
                    *[TinyViTBlock(dims[i], cfg.heads[i], cfg.mlp_ratio) for _ in range(depths[i])]
                )
            )
        self.merges = nn.ModuleList(merges)
        self.stages = nn.ModuleList(stages)
        out = cfg.prompt_embed_dim
        self.neck = nn.Sequential(
            nn.Conv2d(dims[self.stage_index], out, 1, bias=False),
            LayerNorm2d(out),
            nn.Conv2d(out, out, 3, padding=1, bias=False),
            LayerNorm2d(out),
        )
        self.reset_parameters()

    def reset_parameters(self) -> None:
        """Variance-preserving conv init; residual branches start as identity.

        With no normalization inside the conv blocks, the framework default
        init shrinks the input-dependent signal by about 10x per stage, which
        leaves pooled features nearly identical across modalities.
        """
        for mod in self.modules():
            if isinstance(mod, nn.Conv2d):
                nn.init.kaiming_normal_(mod.weight, mode="fan_in", nonlinearity="relu")
                if mod.bias is not None:
                    nn.init.zeros_(mod.bias)
        for mod in self.modules():
            if isinstance(mod, MBConv):
                nn.init.zeros_(mod.conv3.weight)

    def forward(self, x):
        x = self.stem(x)
        skip = None
        for i in range(self.stage_index + 1):
            x = self.stages[i](self.merges[i](x))
            if i == 0:
                skip = x
        return self.neck(x), skip


class PositionEmbeddingRandom(nn.Module):
    """Random Fourier features of normalized (x, y) coordinates."""

    def __init__(self, num_pos_feats: int, scale: float = 1.0):
        super().__init__()
        self.register_buffer("gaussian_matrix", scale * torch.randn(2, num_pos_feats))

    def encode(self, coords):
        # coords in [0, 1], last dim (x, y)
        coords = 2 * coords - 1
        coords = 2 * math.pi * (coords @ self.gaussian_matrix)
        return torch.cat([torch.sin(coords), torch.cos(coords)], dim=-1)

    def grid(self, h: int, w: int):
        m = self.gaussian_matrix
        ys = (torch.arange(h, dtype=m.dtype) + 0.5) / h
        xs = (torch.arange(w, dtype=m.dtype) + 0.5) / w
        yy, xx = torch.meshgrid(ys, xs, indexing="ij")
        pe = self.encode(torch.stack([xx, yy], dim=-1))
        return pe.permute(2, 0, 1)  # (C, h, w)


class BoxPromptEncoder(nn.Module):
    """Encode an inclusive (row_min, col_min, row_max, col_max) box into one vector."""

    def __init__(self, embed_dim: int, input_size: tuple[int, int]):
        super().__init__()
        self.embed_dim = embed_dim
        self.input_size = tuple(input_size)
        self.pe = PositionEmbeddingRandom(embed_dim // 2)
        self.corner_embed = nn.Parameter(0.02 * torch.randn(2, embed_dim))
        self.project = nn.Linear(2 * embed_dim, embed_dim)
        self.no_prompt_embed = nn.Parameter(0.02 * torch.randn(embed_dim))

    def forward(self, boxes):
        boxes = boxes.to(self.corner_embed.dtype)
        h, w = self.input_size
        r0, c0, r1, c1 = boxes.unbind(-1)
        tl = torch.stack([(c0 + 0.5) / w, (r0 + 0.5) / h], dim=-1)
        br = torch.stack([(c1 + 0.5) / w, (r1 + 0.5) / h], dim=-1)
        corners = torch.cat(
            [self.pe.encode(tl) + self.corner_embed[0], self.pe.encode(br) + self.corner_embed[1]],
            dim=-1,
        )
        return self.project(corners)


class TwoWayBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_dim: int, skip_first_layer_pe: bool):
        super().__init__()
        self.self_attn = Attention(dim, heads)
        self.norm1 = nn.LayerNorm(dim)
        self.cross_token_to_image = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP([dim, mlp_dim, dim])
        self.norm3 = nn.LayerNorm(dim)
        self.cross_image_to_token = Attention(dim, heads)
        self.norm4 = nn.LayerNorm(dim)
        self.skip_first_layer_pe = skip_first_layer_pe

    def forward(self, queries, keys, query_pe, key_pe):
        if self.skip_first_layer_pe:
            queries = self.self_attn(queries, queries, queries)
        else:
            q = queries + query_pe
            queries = queries + self.self_attn(q, q, queries)
        queries = self.norm1(queries)

        q, k = queries + query_pe, keys + key_pe
        queries = self.norm2(queries + self.cross_token_to_image(q, k, keys))
        queries = self.norm3(queries + self.mlp(queries))

        q, k = queries + query_pe, keys + key_pe
        keys = self.norm4(keys + self.cross_image_to_token(k, q, queries))
        return queries, keys


class TwoWayTransformer(nn.Module):
    def __init__(self, depth: int, dim: int, heads: int, mlp_dim: int):
        super().__init__()
        self.layers = nn.ModuleList(
            TwoWayBlock(dim, heads, mlp_dim, skip_first_layer_pe=(i == 0)) for i in range(depth)
        )
        self.final_attn = Attention(dim, heads)
        self.norm_final = nn.LayerNorm(dim)

    def forward(self, image, image_pe, tokens):
        keys = image.flatten(2).transpose(1, 2)
        key_pe = image_pe.flatten(2).transpose(1, 2)
        queries = tokens
        for layer in self.layers:
            queries, keys = layer(queries, keys, tokens, key_pe)
        q, k = queries + tokens, keys + key_pe
        queries = self.norm_final(queries + self.final_attn(q, k, keys))
        return queries, keys


class MaskDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.prompt_embed_dim
        self.input_size = tuple(cfg.input_size)
        self.mask_tokens = nn.Parameter(0.02 * torch.randn(N_REGIONS, d))
        self.transformer = TwoWayTransformer(
            cfg.decoder_layers, d, cfg.decoder_heads, int(d * cfg.mlp_ratio)
        )
        self.upscale1 = nn.ConvTranspose2d(d, d // 4, 2, stride=2)
        self.upscale_norm = LayerNorm2d(d // 4)
        self.upscale2 = nn.ConvTranspose2d(d // 4, d // 8, 2, stride=2)
        self.skip_proj = nn.Conv2d(cfg.encoder_dims[0], d // 8, 1)
        self.hypernets = nn.ModuleList(MLP([d, d, d // 8]) for _ in range(N_REGIONS))

    def forward(self, image, skip, image_pe, prompt):
        b = image.shape[0]
        tokens = torch.cat(
            [self.mask_tokens.unsqueeze(0).expand(b, -1, -1), prompt.unsqueeze(1)], dim=1
        )
        hs, keys = self.transformer(image, image_pe.unsqueeze(0).expand(b, -1, -1, -1), tokens)
        src = keys.transpose(1, 2).reshape(image.shape)
        up = F.gelu(self.upscale_norm(self.upscale1(src)))
        up = self.upscale2(up)
        sk = self.skip_proj(skip)
        if sk.shape[-2:] != up.shape[-2:]:
            sk = F.interpolate(sk, size=up.shape[-2:], mode="bilinear", align_corners=False)
        up = F.gelu(up + sk)
        hyper = torch.stack([net(hs[:, i]) for i, net in enumerate(self.hypernets)], dim=1)
        masks = (hyper @ up.flatten(2)).reshape(b, N_REGIONS, *up.shape[-2:])
        return F.interpolate(masks, size=self.input_size, mode="bilinear", align_corners=False)


# -- the segmenter ----------------------------------------------------------------


class PromptableSegmenter(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg.validate()
        self.image_encoder = ImageEncoder(cfg)
        self.prompt_encoder = BoxPromptEncoder(cfg.prompt_embed_dim, cfg.input_size)
        self.mask_decoder = MaskDecoder(cfg)

    @property
    def dtype(self):
        return self.prompt_encoder.corner_embed.dtype

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def stage_widths(self) -> list[int]:
        enc = self.image_encoder
        return [enc.stem[-1].out_channels] + [m.conv3.out_channels for m in enc.merges[1:]]

    def _as_batch(self, slices):
        x = torch.as_tensor(slices)
        if x.dim() == 3:
            x = x.unsqueeze(0)
        if x.dim() != 4:
            raise InvalidInputError(f"expected (H, W, M) or (B, H, W, M), got {tuple(x.shape)}")
        h, w = self.config.input_size
        if tuple(x.shape[1:3]) != (h, w) or x.shape[3] != self.config.in_channels:
            raise InvalidInputError(
                f"slice shape {tuple(x.shape[1:])} does not match "
                f"({h}, {w}, {self.config.in_channels})"
            )
        return x.to(self.dtype)

    def encode_per_modality(self, slices) -> FeatureMapSet:
        """Run the shared encoder once per modality channel.

        ``slices`` is (H, W, M) or (B, H, W, M) on the [0, 255] scale.
        """
        x = self._as_batch(slices)
        b, h, w, m = x.shape
        x = (x - 127.5) / 127.5
        x = x.permute(0, 3, 1, 2).reshape(b * m, 1, h, w).expand(-1, STEM_CHANNELS, -1, -1)
        main, skip = self.image_encoder(x)
        return FeatureMapSet(
            main.reshape(b, m, *main.shape[1:]),
            skip.reshape(b, m, *skip.shape[1:]),
            self.config.stage_index,
        )

    def encode_prompt(self, boxes):
        """Embed inclusive (row_min, col_min, row_max, col_max) boxes, shape (4,) or (B, 4)."""
        boxes = torch.as_tensor(boxes, dtype=self.dtype)
        single = boxes.dim() == 1
        boxes = boxes.reshape(-1, 4)
        h, w = self.config.input_size
        if (
            (boxes < 0).any()
            or (boxes[:, [0, 2]] > h - 1).any()
            or (boxes[:, [1, 3]] > w - 1).any()
            or (boxes[:, 0] > boxes[:, 2]).any()
            or (boxes[:, 1] > boxes[:, 3]).any()
        ):
            raise InvalidInputError(f"box outside the {h}x{w} image or inverted: {boxes.tolist()}")
        emb = self.prompt_encoder(boxes)
        return emb[0] if single else emb

    def no_prompt(self, batch: int):
        return self.prompt_encoder.no_prompt_embed.unsqueeze(0).expand(batch, -1)

    def decode_mask(self, features: FusedFeatures, prompt=None, has_prompt=None):
        """Decode per-sub-region logits, shape (B, 3, H, W) in NCR, ED, ET order.

        ``prompt`` is a (B, d) embedding or None for the unprompted pass;
        ``has_prompt`` (B,) bool selects the learned no-prompt token per row.
        """
        image, skip = features.main, features.skip
        d = self.config.prompt_embed_dim
        fh, fw = (s // self.config.feature_stride for s in self.config.input_size)
        if image.dim() != 4 or tuple(image.shape[1:]) != (d, fh, fw):
            raise InvalidInputError(
                f"decoder expects features (B, {d}, {fh}, {fw}), got {tuple(image.shape)}"
            )
        if skip.dim() != 4 or skip.shape[0] != image.shape[0] or skip.shape[1] != self.config.encoder_dims[0]:
            raise InvalidInputError(f"skip features have shape {tuple(skip.shape)}")
        b = image.shape[0]
        if prompt is None:
            prompt = self.no_prompt(b)
        else:
            prompt = prompt.reshape(b, d)
            if has_prompt is not None:
                keep = torch.as_tensor(has_prompt, dtype=torch.bool).reshape(b, 1)
                prompt = torch.where(keep, prompt, self.no_prompt(b))
        pe = self.prompt_encoder.pe.grid(fh, fw)
        return self.mask_decoder(image, skip, pe, prompt)


def build_model(config: ModelConfig, seed: int = 0) -> PromptableSegmenter:
    """Build a segmenter with parameters drawn from a dedicated seeded stream."""
    config.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = PromptableSegmenter(config)
    logger.info(
        "built segmenter: stage widths %s, %d parameters", config.encoder_dims, model.num_parameters()
    )
    return model.eval()


def mean_fuse(features: FeatureMapSet) -> FusedFeatures:
    """Modality-agnostic fusion used by the unprompted first pass."""
    return FusedFeatures(features.per_modality.mean(1), features.skip.mean(1))


# -- checkpoints ---------------------------------------------------------------------


def state_to_arrays(module: nn.Module, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def arrays_to_state(module: nn.Module, arrays: dict[str, np.ndarray], prefix: str, path) -> None:
    expected = module.state_dict()
    got = {k[len(prefix) + 1:]: v for k, v in arrays.items() if k.startswith(prefix + "/")}
    for k, ref in expected.items():
        if k not in got:
            raise ArchiveFormatError(f"{path}: checkpoint lacks '{prefix}/{k}'", key=f"{prefix}/{k}")
        if tuple(got[k].shape) != tuple(ref.shape):
            raise ArchiveFormatError(
                f"{path}: '{prefix}/{k}' has shape {got[k].shape}, config expects {tuple(ref.shape)}",
                key=f"{prefix}/{k}",
            )
    extra = sorted(set(got) - set(expected))
    if extra:
        raise ArchiveFormatError(f"{path}: unexpected tensor '{prefix}/{extra[0]}'", key=f"{prefix}/{extra[0]}")
    module.load_state_dict({k: torch.from_numpy(np.array(got[k])).to(expected[k].dtype) for k in expected})


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez_compressed(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        with np.load(path, allow_pickle=False) as data:
            if "__meta__" not in data.files:
                raise ArchiveFormatError(f"{path}: missing '__meta__'", key="__meta__")
            meta = json.loads(str(data["__meta__"]))
            arrays = {k: data[k] for k in data.files if k != "__meta__"}
    except ArchiveFormatError:
        raise
    except Exception as exc:  # zip/json/OS errors all mean an unusable file
        raise ArchiveFormatError(f"{path}: unreadable checkpoint ({exc})") from exc
    return arrays, meta
