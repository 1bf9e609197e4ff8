"""Spatial alignment, shared ResNet-style trunk, CNN and attention heads."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import NamedTuple, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 224
    stn_channels: tuple = (16, 24, 32, 48, 64)
    stn_hidden: int = 32
    stem: int = 64
    widths: tuple = (64, 128, 256, 512)  # bottleneck inner widths, expansion 4
    blocks: tuple = (3, 4, 6, 3)
    embed_dim: int = 384
    embed_hidden: int = 1024
    attn_depth: int = 12
    attn_heads: int = 6
    mlp_ratio: int = 4
    grid: int = 14
    patch: int = 16
    num_classes: int = 2
    arcface_margin: float = 0.5
    arcface_scale: float = 64.0
    embed_bn: bool = True  # batch-norm neck on both embeddings before L2 normalization

    def __post_init__(self):
        if self.input_size // self.patch != self.grid or self.input_size % self.patch:
            raise ModelError("input_size / patch must equal grid")
        if self.embed_dim % self.attn_heads:
            raise ModelError("embed_dim must be divisible by attn_heads")
        if self.num_classes < 2:
            raise ModelError("need at least 2 classes")
        if not (0 <= self.arcface_margin < math.pi / 2):
            raise ModelError("margin must be in [0, pi/2)")

    @property
    def local_dim(self) -> int:
        return self.widths[2] * 4

    @classmethod
    def paper(cls, num_classes: int = 2, **kw) -> "ModelConfig":
        return cls(num_classes=num_classes, **kw)

    @classmethod
    def tiny(cls, num_classes: int = 2, **kw) -> "ModelConfig":
        base = dict(stn_channels=(4, 6, 8, 12, 16), stn_hidden=32, stem=8,
                    widths=(8, 16, 32, 64), embed_dim=96, embed_hidden=128,
                    attn_depth=4, attn_heads=3)
        base.update(kw)
        return cls(num_classes=num_classes, **base)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        d = json.loads(text)
        for k in ("stn_channels", "widths", "blocks"):
            d[k] = tuple(d[k])
        return cls(**d)

    def fingerprint(self) -> str:
        """Hash of everything that affects embeddings (class count excluded)."""
        d = asdict(self)
        d.pop("num_classes")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def with_classes(self, n: int) -> "ModelConfig":
        return replace(self, num_classes=n)


class AlignmentParams(NamedTuple):
    theta: float  # degrees
    scale: float
    tx: float  # normalized [-1, 1] units
    ty: float


def similarity_theta(raw: torch.Tensor) -> torch.Tensor:
    """Raw localization output ``(log_scale, angle_rad, tx, ty)`` -> (B, 2, 3) sampling matrix.

    All zeros is the identity.
    """
    s = torch.exp(raw[:, 0])
    c, n = torch.cos(raw[:, 1]), torch.sin(raw[:, 1])
    row0 = torch.stack([s * c, -s * n, raw[:, 2]], dim=1)
    row1 = torch.stack([s * n, s * c, raw[:, 3]], dim=1)
    return torch.stack([row0, row1], dim=1)


def to_alignment_params(raw: torch.Tensor) -> list[AlignmentParams]:
    r = raw.detach().double().cpu().numpy()
    return [AlignmentParams(math.degrees(a), math.exp(ls), tx, ty) for ls, a, tx, ty in r]


def resample(x: torch.Tensor, theta: torch.Tensor) -> torch.Tensor:
    # Shift so zero padding lands on white (+1 after standardization).  The grid is
    # built in float64: in float32 an identity theta is off by ~5e-5 from rounding.
    grid = F.affine_grid(theta.double(), list(x.shape), align_corners=False)
    out = F.grid_sample(x.double() - 1.0, grid, mode="bilinear", padding_mode="zeros",
                        align_corners=False) + 1.0
    return out.to(x.dtype)


class SpatialAlignment(nn.Module):
    kernels = (7, 5, 3, 3, 3)

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        layers = []
        c_in = 3
        for c, k in zip(cfg.stn_channels, self.kernels):
            layers += [nn.Conv2d(c_in, c, k, padding=k // 2), nn.ReLU(inplace=True), nn.MaxPool2d(2, 2)]
            c_in = c
        self.features = nn.Sequential(*layers)
        side = cfg.input_size // 32
        self.fc1 = nn.Linear(c_in * side * side, cfg.stn_hidden)
        self.fc2 = nn.Linear(cfg.stn_hidden, 4)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def localize(self, x: torch.Tensor, trace: Optional[list] = None) -> torch.Tensor:
        h = x
        for i, layer in enumerate(self.features):
            h = layer(h)
            if trace is not None and not isinstance(layer, nn.ReLU):
                trace.append((f"Loc{len(trace) + 1}", tuple(h.shape[1:])))
        h = F.relu(self.fc1(h.flatten(1)))
        if trace is not None:
            trace.append(("Loc11", tuple(h.shape[1:])))
        raw = self.fc2(h)
        if trace is not None:
            trace.append(("Loc12", tuple(raw.shape[1:])))
        return raw

    def forward(self, x: torch.Tensor, trace: Optional[list] = None):
        raw = self.localize(x, trace)
        return raw, resample(x, similarity_theta(raw))


class Bottleneck(nn.Module):
    def __init__(self, c_in: int, width: int, stride: int = 1):
        super().__init__()
        c_out = width * 4
        self.conv1 = nn.Conv2d(c_in, width, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(width)
        self.conv2 = nn.Conv2d(width, width, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(width)
        self.conv3 = nn.Conv2d(width, c_out, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(c_out)
        self.down = None
        if stride != 1 or c_in != c_out:
            self.down = nn.Sequential(nn.Conv2d(c_in, c_out, 1, stride=stride, bias=False),
                                      nn.BatchNorm2d(c_out))

    def forward(self, x):
        idt = x if self.down is None else self.down(x)
        h = F.relu(self.bn1(self.conv1(x)))
        h = F.relu(self.bn2(self.conv2(h)))
        h = self.bn3(self.conv3(h))
        return F.relu(h + idt)


def make_stage(c_in: int, width: int, n: int, stride: int) -> nn.Sequential:
    blocks = [Bottleneck(c_in, width, stride)]
    blocks += [Bottleneck(width * 4, width) for _ in range(n - 1)]
    return nn.Sequential(*blocks)


class Backbone(nn.Module):
    """Stem + three bottleneck stages; output is the stride-16 feature map."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.conv1 = nn.Conv2d(3, cfg.stem, 7, stride=2, padding=3, bias=False)
        self.bn1 = nn.BatchNorm2d(cfg.stem)
        self.pool = nn.MaxPool2d(3, stride=2, padding=1)
        w = cfg.widths
        self.layer1 = make_stage(cfg.stem, w[0], cfg.blocks[0], 1)
        self.layer2 = make_stage(w[0] * 4, w[1], cfg.blocks[1], 2)
        self.layer3 = make_stage(w[1] * 4, w[2], cfg.blocks[2], 2)

    def forward(self, x, trace: Optional[list] = None):
        h = F.relu(self.bn1(self.conv1(x)))
        if trace is not None:
            trace.append(("Conv1", tuple(h.shape[1:])))
        h = self.pool(h)
        for i, layer in enumerate((self.layer1, self.layer2, self.layer3), start=2):
            h = layer(h)
            if trace is not None:
                trace.append((f"Conv{i}", tuple(h.shape[1:])))
        return h


class CNNHead(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.layer4 = make_stage(cfg.local_dim, cfg.widths[3], cfg.blocks[3], 2)
        self.fc = nn.Linear(cfg.widths[3] * 4, cfg.embed_dim)
        self.neck = nn.BatchNorm1d(cfg.embed_dim) if cfg.embed_bn else nn.Identity()

    def forward(self, f, trace: Optional[list] = None):
        h = self.layer4(f)
        if trace is not None:
            trace.append(("Conv5", tuple(h.shape[1:])))
        z = self.neck(self.fc(h.mean(dim=(2, 3))))
        if trace is not None:
            trace.append(("Zc", tuple(z.shape[1:])))
        return F.normalize(z, dim=1)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        q, k, v = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        attn = (q @ k.transpose(-2, -1)) * (d // self.heads) ** -0.5
        out = attn.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class EncoderBlock(nn.Module):
    def __init__(self, dim: int, heads: int, hidden: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class AttentionHead(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.embed_dim
        self.embed = nn.Sequential(nn.Linear(cfg.local_dim, cfg.embed_hidden), nn.GELU(),
                                   nn.Linear(cfg.embed_hidden, d))
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.randn(1, cfg.grid ** 2 + 1, d) * 0.02)
        self.blocks = nn.ModuleList(
            [EncoderBlock(d, cfg.attn_heads, d * cfg.mlp_ratio) for _ in range(cfg.attn_depth)])
        self.norm = nn.LayerNorm(d)
        self.fc = nn.Linear(d, d)
        self.neck = nn.BatchNorm1d(d) if cfg.embed_bn else nn.Identity()

    def forward(self, f, trace: Optional[list] = None, pos_embed: Optional[torch.Tensor] = None):
        """Returns ``(z_a, patch_tokens)``; ``pos_embed`` overrides the learned table."""
        tokens = self.embed(f.flatten(2).transpose(1, 2))  # (B, HW, d)
        b = tokens.shape[0]
        if trace is not None:
            g = f.shape[-1]
            trace.append(("Embed", (tokens.shape[2], f.shape[2], g)))
        x = torch.cat([self.cls_token.expand(b, -1, -1), tokens], dim=1)
        x = x + (self.pos_embed if pos_embed is None else pos_embed)
        if trace is not None:
            trace.append(("PosEmbed", (x.shape[2], x.shape[1])))
        for blk in self.blocks:
            x = blk(x)
        x = self.norm(x)
        if trace is not None:
            trace.append(("Attn", (x.shape[2], x.shape[1])))
        z = self.neck(self.fc(x[:, 0]))
        if trace is not None:
            trace.append(("Za", tuple(z.shape[1:])))
        return F.normalize(z, dim=1), x[:, 1:]


def arcface_logits(z: torch.Tensor, w: torch.Tensor, labels: torch.Tensor, margin: float,
                   scale: float, check: bool = True) -> torch.Tensor:
    """Additive angular margin logits.

    ``z`` is (B, D) and ``w`` is (N, D), both with unit rows.  Non-target logits
    are ``scale * cos(theta)``; the target logit is ``scale * cos(theta + margin)``.
    """
    if check:
        for name, t in (("z", z), ("w", w)):
            if (t.detach().norm(dim=-1) - 1).abs().max() > 1e-4:
                raise ModelError(f"{name} rows must be unit norm")
    if not (0 <= margin < math.pi / 2):
        raise ModelError("margin must be in [0, pi/2)")
    cos = (z @ w.t()).clamp(-1.0, 1.0)
    target = cos.gather(1, labels.view(-1, 1))
    sin = torch.sqrt((1.0 - target * target).clamp_min(1e-12))
    shifted = target * math.cos(margin) - sin * math.sin(margin)
    logits = cos.scatter(1, labels.view(-1, 1), shifted)
    return logits * scale


class ArcFaceHead(nn.Module):
    def __init__(self, embed_dim: int, num_classes: int, margin: float, scale: float):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(num_classes, embed_dim))
        nn.init.xavier_uniform_(self.weight)
        self.margin = margin
        self.scale = scale

    def forward(self, z, labels):
        return arcface_logits(z, F.normalize(self.weight, dim=1), labels, self.margin, self.scale)

    def loss(self, z, labels):
        return F.cross_entropy(self(z, labels), labels)


class ModelOutput(NamedTuple):
    z_c: torch.Tensor  # (B, D)
    z_a: torch.Tensor  # (B, D)
    local: torch.Tensor  # (B, grid, grid, local_dim), unit cells
    align: torch.Tensor  # (B, 4) raw localization output


class AFRNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.stn = SpatialAlignment(cfg)
        self.backbone = Backbone(cfg)
        self.cnn_head = CNNHead(cfg)
        self.attn_head = AttentionHead(cfg)
        self.arc_c = ArcFaceHead(cfg.embed_dim, cfg.num_classes, cfg.arcface_margin, cfg.arcface_scale)
        self.arc_a = ArcFaceHead(cfg.embed_dim, cfg.num_classes, cfg.arcface_margin, cfg.arcface_scale)

    def _check(self, x):
        s = self.cfg.input_size
        if x.ndim != 4 or tuple(x.shape[1:]) != (3, s, s):
            raise ModelError(f"expected (B, 3, {s}, {s}) input, got {tuple(x.shape)}")

    def forward(self, x: torch.Tensor) -> ModelOutput:
        self._check(x)
        raw, aligned = self.stn(x)
        f = self.backbone(aligned)
        z_c = self.cnn_head(f)
        z_a, _ = self.attn_head(f)
        local = F.normalize(f, dim=1).permute(0, 2, 3, 1)
        return ModelOutput(z_c, z_a, local, raw)

    def loss(self, x, labels):
        out = self(x)
        lc = self.arc_c.loss(out.z_c, labels)
        la = self.arc_a.loss(out.z_a, labels)
        return lc + la, lc, la

    @torch.no_grad()
    def trace(self, x: torch.Tensor) -> list[tuple[str, tuple]]:
        """(layer name, per-sample output shape) for every named layer."""
        self._check(x)
        rows: list = []
        raw = self.stn.localize(x, rows)
        aligned = resample(x, similarity_theta(raw))
        f = self.backbone(aligned, rows)
        self.cnn_head(f, rows)
        self.attn_head(f, rows)
        return rows


# ---------------------------------------------------------------------------
# Image preprocessing


def preprocess(img: np.ndarray, size: int) -> torch.Tensor:
    """uint8 grayscale (H, W) -> standardized (3, size, size); aspect kept, white padding."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise ModelError("expected a 2-D grayscale image")
    h, w = img.shape
    if (h, w) != (size, size):
        from PIL import Image

        k = size / max(h, w)
        nh, nw = max(1, round(h * k)), max(1, round(w * k))
        small = np.asarray(Image.fromarray(img.astype(np.uint8)).resize((nw, nh), Image.BILINEAR))
        canvas = np.full((size, size), 255, dtype=np.uint8)
        y0, x0 = (size - nh) // 2, (size - nw) // 2
        canvas[y0:y0 + nh, x0:x0 + nw] = small
        img = canvas
    t = torch.from_numpy(img.astype(np.float32) / 255.0)
    t = (t - 0.5) / 0.5
    return t.unsqueeze(0).expand(3, -1, -1).contiguous()
