"""
Desk-scale text-conditioned query segmenter.

A convolutional encoder produces a stride-4 feature grid, which the projected
concept embedding modulates channel-wise. Learned queries (shifted by the same
text projection) attend to the conditioned grid; per-query heads emit a
dot-product class logit against the text, a presence logit, a box and mask
logits. Mask features add the stride-2 stem output back for edge detail.

A mean- and max-pooled head gives the image-level prompt-presence logit, and
every mask logit is offset by its log-sigmoid, so an absent prompt yields an
empty mask whichever query inference picks.
"""
import logging
import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from app.schemas.training import (
    DECODER_SEG_DOT,
    GEOMETRY_PROMPT,
    GROUP_NAMES,
    LANGUAGE_BACKBONE,
    VISION_BACKBONE,
    ModelConfig,
)

logger = logging.getLogger(__name__)


@dataclass
class QueryPrediction:
    class_logit: float
    presence_logit: float
    box: torch.Tensor  # [4] cxcywh in (0, 1)
    mask_logits: torch.Tensor  # [h, w]


@dataclass
class SegmenterOutput:
    class_logits: torch.Tensor  # [B, Q]
    presence_logits: torch.Tensor  # [B, Q]
    boxes: torch.Tensor  # [B, Q, 4]
    mask_logits: torch.Tensor  # [B, Q, h, w]
    image_presence_logits: torch.Tensor  # [B]

    def queries(self, b: int) -> list[QueryPrediction]:
        return [
            QueryPrediction(
                class_logit=self.class_logits[b, q].item(),
                presence_logit=self.presence_logits[b, q].item(),
                box=self.boxes[b, q],
                mask_logits=self.mask_logits[b, q],
            )
            for q in range(self.class_logits.shape[1])
        ]


@dataclass
class ParameterGroups:
    named: dict[str, list[tuple[str, nn.Parameter]]] = field(default_factory=dict)
    # Vision backbone parameters by layer index 1..L (1 = nearest the input).
    backbone_layers: dict[int, list[tuple[str, nn.Parameter]]] = field(default_factory=dict)

    @property
    def layer_indices(self) -> list[int]:
        return sorted(self.backbone_layers)


# ── Building blocks ───────────────────────────────────────────────────────────

def _groups(channels: int) -> int:
    return math.gcd(8, channels)


class ConvBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm = nn.GroupNorm(_groups(channels), channels)

    def forward(self, x):
        return x + F.gelu(self.norm(self.conv(x)))


class VisionEncoder(nn.Module):
    def __init__(self, hidden_dim: int, depth: int):
        super().__init__()
        half = max(8, hidden_dim // 2)
        self.half_channels = half
        self.stem = nn.ModuleDict({
            "fine": nn.Sequential(
                nn.Conv2d(3, half, 3, stride=2, padding=1),
                nn.GroupNorm(_groups(half), half),
                nn.GELU(),
            ),
            "coarse": nn.Sequential(
                nn.Conv2d(half, hidden_dim, 3, stride=2, padding=1),
                nn.GroupNorm(_groups(hidden_dim), hidden_dim),
                nn.GELU(),
            ),
        })
        self.blocks = nn.ModuleList([ConvBlock(hidden_dim) for _ in range(depth)])

    def forward(self, images):
        """Returns (stride-4 features, stride-2 features)."""
        fine = self.stem["fine"](images - 0.5)
        x = self.stem["coarse"](fine)
        for block in self.blocks:
            x = block(x)
        return x, fine


class TextProjection(nn.Module):
    def __init__(self, embed_dim: int, hidden_dim: int):
        super().__init__()
        self.proj = nn.Sequential(nn.Linear(embed_dim, hidden_dim), nn.GELU(), nn.Linear(hidden_dim, hidden_dim))

    def forward(self, text):
        return self.proj(text)


class GeometryPromptEncoder(nn.Module):
    """Point/box prompt embedder. Constructed for parity; text-only runs never call it."""

    def __init__(self, hidden_dim: int):
        super().__init__()
        self.point_embed = nn.Linear(2, hidden_dim)
        self.box_embed = nn.Linear(4, hidden_dim)
        self.type_embed = nn.Embedding(2, hidden_dim)

    def forward(self, points: torch.Tensor | None = None, boxes: torch.Tensor | None = None):
        tokens = []
        if points is not None:
            tokens.append(self.point_embed(points) + self.type_embed.weight[0])
        if boxes is not None:
            tokens.append(self.box_embed(boxes) + self.type_embed.weight[1])
        return torch.cat(tokens, dim=1) if tokens else None


class MLP(nn.Module):
    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int, num_layers: int):
        super().__init__()
        dims = [in_dim] + [hidden_dim] * (num_layers - 1) + [out_dim]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x


class DecoderLayer(nn.Module):
    def __init__(self, hidden_dim: int, num_heads: int):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(hidden_dim, num_heads, batch_first=True)
        self.cross_attn = nn.MultiheadAttention(hidden_dim, num_heads, batch_first=True)
        self.ffn = nn.Sequential(nn.Linear(hidden_dim, hidden_dim * 2), nn.GELU(), nn.Linear(hidden_dim * 2, hidden_dim))
        self.norm1 = nn.LayerNorm(hidden_dim)
        self.norm2 = nn.LayerNorm(hidden_dim)
        self.norm3 = nn.LayerNorm(hidden_dim)

    def forward(self, queries, memory, memory_pos):
        q = self.norm1(queries + self.self_attn(queries, queries, queries, need_weights=False)[0])
        q = self.norm2(q + self.cross_attn(q, memory + memory_pos, memory, need_weights=False)[0])
        return self.norm3(q + self.ffn(q))


class DotProductScoring(nn.Module):
    """Class logit = <query, text> / sqrt(C) + bias."""

    def __init__(self, hidden_dim: int):
        super().__init__()
        self.query_proj = nn.Linear(hidden_dim, hidden_dim)
        self.text_proj = nn.Linear(hidden_dim, hidden_dim)
        self.bias = nn.Parameter(torch.tensor(-2.0))
        self.scale = hidden_dim ** -0.5

    def forward(self, queries, text):
        q = self.query_proj(queries)
        t = self.text_proj(text)
        return torch.einsum("bqc,bc->bq", q, t) * self.scale + self.bias


def sine_position_embedding(channels: int, height: int, width: int, device=None) -> torch.Tensor:
    """Fixed 2-D sine/cosine embedding of shape [height * width, channels]."""
    quarter = max(1, channels // 4)
    freqs = 1.0 / (10000 ** (torch.arange(quarter, device=device, dtype=torch.float32) / quarter))
    ys = (torch.arange(height, device=device, dtype=torch.float32) + 0.5) / height
    xs = (torch.arange(width, device=device, dtype=torch.float32) + 0.5) / width
    yy, xx = torch.meshgrid(ys, xs, indexing="ij")
    angles_y = yy.flatten()[:, None] * freqs[None] * 2 * math.pi * 8
    angles_x = xx.flatten()[:, None] * freqs[None] * 2 * math.pi * 8
    emb = torch.cat([angles_y.sin(), angles_y.cos(), angles_x.sin(), angles_x.cos()], dim=1)
    if emb.shape[1] < channels:
        emb = F.pad(emb, (0, channels - emb.shape[1]))
    return emb[:, :channels]


# ── Model ─────────────────────────────────────────────────────────────────────

_GROUP_PREFIXES = (
    ("text_proj.", LANGUAGE_BACKBONE),
    ("geometry_encoder.", GEOMETRY_PROMPT),
    ("decoder.", DECODER_SEG_DOT),
    ("query_embed.", DECODER_SEG_DOT),
    ("class_head.", DECODER_SEG_DOT),
    ("presence_head.", DECODER_SEG_DOT),
    ("box_head.", DECODER_SEG_DOT),
    ("mask_embed.", DECODER_SEG_DOT),
    ("pixel_proj.", DECODER_SEG_DOT),
    ("pixel_skip.", DECODER_SEG_DOT),
    ("image_presence_head.", DECODER_SEG_DOT),
)


class Segmenter(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.hidden_dim
        self.backbone = VisionEncoder(c, cfg.encoder_depth)
        self.text_proj = TextProjection(cfg.embed_dim, c)
        self.geometry_encoder = GeometryPromptEncoder(c)
        self.query_embed = nn.Embedding(cfg.n_q, c)
        self.decoder = nn.ModuleList(DecoderLayer(c, cfg.num_heads) for _ in range(cfg.decoder_layers))
        self.class_head = DotProductScoring(c)
        self.presence_head = nn.Linear(c, 1)
        self.box_head = MLP(c, c, 4, 3)
        self.mask_embed = MLP(c, c, c, 3)
        self.pixel_proj = nn.Conv2d(c, c, 1)
        self.pixel_skip = nn.Conv2d(self.backbone.half_channels, c, 1)
        # Reads mean- and max-pooled conditioned features.
        self.image_presence_head = nn.Linear(2 * c, 1)

        # Fails fast if a parameter was left out of the optimizer grouping.
        parameter_groups(self)
        logger.info("Segmenter: %d parameters, %d queries", sum(p.numel() for p in self.parameters()), cfg.n_q)

    @property
    def mask_size(self) -> int:
        return math.ceil(self.cfg.canvas / self.cfg.mask_stride)

    def forward(self, images: torch.Tensor, text_embeddings: torch.Tensor) -> SegmenterOutput:
        """
        Params:
            images: [B, 3, canvas, canvas] in [0, 1]
            text_embeddings: [B, embed_dim]
        """
        if text_embeddings.shape[-1] != self.cfg.embed_dim:
            raise ValueError(
                f"text embedding dim {text_embeddings.shape[-1]} != configured {self.cfg.embed_dim}"
            )
        if images.shape[0] != text_embeddings.shape[0]:
            raise ValueError("images and text embeddings must share the batch dimension")

        feats, fine = self.backbone(images)
        batch, channels, height, width = feats.shape
        text = self.text_proj(text_embeddings)
        cond = feats * (1 + text[:, :, None, None])

        memory = cond.flatten(2).transpose(1, 2)
        pos = sine_position_embedding(channels, height, width, device=feats.device)[None]
        queries = self.query_embed.weight[None].expand(batch, -1, -1) + text[:, None, :]
        for layer in self.decoder:
            queries = layer(queries, memory, pos)

        grid = (self.mask_size, self.mask_size)
        pixel = F.interpolate(self.pixel_proj(cond), size=grid, mode="bilinear", align_corners=False)
        pixel = pixel + F.interpolate(self.pixel_skip(fine), size=grid, mode="bilinear", align_corners=False)
        image_presence = self.image_presence_head(
            torch.cat([cond.mean(dim=(2, 3)), cond.amax(dim=(2, 3))], dim=1)
        ).squeeze(-1)
        # Masks fade with the log-probability that the prompt is present at all.
        mask_logits = torch.einsum("bqc,bchw->bqhw", self.mask_embed(queries), pixel)
        mask_logits = mask_logits + F.logsigmoid(image_presence)[:, None, None, None]
        return SegmenterOutput(
            class_logits=self.class_head(queries, text),
            presence_logits=self.presence_head(queries).squeeze(-1),
            boxes=self.box_head(queries).sigmoid(),
            mask_logits=mask_logits,
            image_presence_logits=image_presence,
        )


def parameter_groups(model: nn.Module) -> ParameterGroups:
    """Partition trainable parameters into the four named learning-rate groups."""
    groups = ParameterGroups(named={name: [] for name in GROUP_NAMES})
    depth = len(model.backbone.blocks)
    for layer in range(1, depth + 1):
        groups.backbone_layers[layer] = []

    unassigned = []
    for name, param in model.named_parameters():
        if not param.requires_grad:
            continue
        if name.startswith("backbone."):
            if name.startswith("backbone.stem."):
                layer = 1
            else:
                layer = int(name.split(".")[2]) + 1
            groups.backbone_layers[layer].append((name, param))
            groups.named[VISION_BACKBONE].append((name, param))
            continue
        group = next((g for prefix, g in _GROUP_PREFIXES if name.startswith(prefix)), None)
        if group is None:
            unassigned.append(name)
            continue
        groups.named[group].append((name, param))

    if unassigned:
        raise RuntimeError(f"Parameters without a learning-rate group: {', '.join(unassigned)}")
    return groups
