"""Two-stream IoU/CLE prediction network.

Both streams run the same backbone -> MSAF -> BAM stack (shared weights). The
reference stream turns each reference box into a modulation vector; the test
stream is multiplied by every modulation vector and then pooled at every test
box, so ``M`` reference boxes and ``N`` test boxes give ``M x N`` predictions
in a single pass.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from comet.diffcore import primitives as P
from comet.diffcore.params import ParamStore, load_checkpoint, save_checkpoint
from comet.diffcore.prroi import prroi_pool

IMAGE_MEAN = (0.485, 0.456, 0.406)
IMAGE_STD = (0.229, 0.224, 0.225)


@dataclass
class NetConfig:
    input_size: int = 288
    spatial_channels: int = 64
    semantic_channels: int = 128
    fused_channels: int = 64
    bam_reduction: int = 4
    bam_dilation: int = 4
    ref_bins: tuple[int, int] = (3, 3)
    test_bins: tuple[int, int] = (5, 5)
    head_hidden: int = 256
    leaky_slope: float = 0.01
    enable_bam: bool = True
    enable_cle_head: bool = True

    def __post_init__(self):
        self.ref_bins = tuple(self.ref_bins)
        self.test_bins = tuple(self.test_bins)
        if self.input_size % 16:
            raise ValueError(f"input_size must be divisible by 16, got {self.input_size}")
        if self.test_bins != (5, 5):
            raise ValueError("test pooling is fixed at 5x5")

    @classmethod
    def desk(cls, **kw) -> NetConfig:
        return cls(**{**dict(input_size=144, spatial_channels=16, semantic_channels=32, fused_channels=16), **kw})

    @classmethod
    def tiny(cls, **kw) -> NetConfig:
        return cls(**{**dict(input_size=48, spatial_channels=8, semantic_channels=16, fused_channels=8,
                             head_hidden=16), **kw})

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["ref_bins"] = list(self.ref_bins)
        d["test_bins"] = list(self.test_bins)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> NetConfig:
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown NetConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class GroupedPrediction:
    iou: torch.Tensor  # (B, M, N), normalised to [-1, 1]
    cle: torch.Tensor | None  # (B, M, N, 2); None when the CLE head is disabled


class BatchNorm(nn.Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_var", torch.ones(channels))
        self.momentum, self.eps = momentum, eps

    def forward(self, x):
        return P.batch_norm(x, self.running_mean, self.running_var, self.weight, self.bias,
                            self.training, self.momentum, self.eps)


class ConvBlock(nn.Module):
    """conv -> batch-norm -> leaky-ReLU."""

    def __init__(self, cin, cout, kernel=3, stride=1, padding=0, dilation=1, slope=0.01):
        super().__init__()
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        self.weight = nn.Parameter(torch.empty(cout, cin, kh, kw))
        self.bn = BatchNorm(cout)
        self.stride, self.padding, self.dilation, self.slope = stride, padding, dilation, slope

    def forward(self, x):
        x = P.conv2d(x, self.weight, None, self.stride, self.padding, self.dilation)
        return P.leaky_relu(self.bn(x), self.slope)


class DeconvBlock(nn.Module):
    def __init__(self, cin, cout, slope=0.01):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(cin, cout, 3, 3))
        self.bn = BatchNorm(cout)
        self.slope = slope

    def forward(self, x):
        x = P.deconv2d(x, self.weight, None, stride=2, padding=1, output_padding=1, dilation=1)
        return P.leaky_relu(self.bn(x), self.slope)


class FCBlock(nn.Module):
    def __init__(self, cin, cout, slope=0.01):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(cout, cin))
        self.bn = BatchNorm(cout)
        self.slope = slope

    def forward(self, x):
        return P.leaky_relu(self.bn(P.linear(x, self.weight)), self.slope)


class Linear(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(cout, cin))
        self.bias = nn.Parameter(torch.zeros(cout))

    def forward(self, x):
        return P.linear(x, self.weight, self.bias)


class Conv(nn.Module):
    """Plain convolution with bias (attention logits)."""

    def __init__(self, cin, cout, kernel=1):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(cout, cin, kernel, kernel))
        self.bias = nn.Parameter(torch.zeros(cout))

    def forward(self, x):
        return P.conv2d(x, self.weight, self.bias)


class Backbone(nn.Module):
    """Stride-2 stem and three two-conv stages; stages 2 and 3 are tapped (strides 8 and 16)."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        cs, cm, a = cfg.spatial_channels, cfg.semantic_channels, cfg.leaky_slope
        self.stem = ConvBlock(3, cs, 3, 2, 1, slope=a)
        self.stage1 = nn.Sequential(ConvBlock(cs, cs, 3, 2, 1, slope=a), ConvBlock(cs, cs, 3, 1, 1, slope=a))
        self.stage2 = nn.Sequential(ConvBlock(cs, cs, 3, 2, 1, slope=a), ConvBlock(cs, cs, 3, 1, 1, slope=a))
        self.stage3 = nn.Sequential(ConvBlock(cs, cm, 3, 2, 1, slope=a), ConvBlock(cm, cm, 3, 1, 1, slope=a))
        self.register_buffer("mean", torch.tensor(IMAGE_MEAN).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor(IMAGE_STD).view(1, 3, 1, 1), persistent=False)
        self.input_size = cfg.input_size

    def forward(self, image):
        if image.dim() != 4 or tuple(image.shape[1:]) != (3, self.input_size, self.input_size):
            raise P.ShapeError(f"backbone: expected (B, 3, {self.input_size}, {self.input_size}), "
                               f"got {tuple(image.shape)}")
        x = (image - self.mean.to(image.dtype)) / self.std.to(image.dtype)
        spatial = self.stage2(self.stage1(self.stem(x)))
        semantic = self.stage3(spatial)
        return spatial, semantic


class MSAF(nn.Module):
    """Inception-style spatial branch plus upsampled semantic branch, fused by addition."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        cs, cm, cf, a = cfg.spatial_channels, cfg.semantic_channels, cfg.fused_channels, cfg.leaky_slope
        b = max(cf // 2, 1)
        self.path1 = ConvBlock(cs, b, 1, slope=a)
        self.path3 = nn.Sequential(ConvBlock(cs, b, 1, slope=a), ConvBlock(b, b, (1, 3), padding=(0, 1), slope=a),
                                   ConvBlock(b, b, (3, 1), padding=(1, 0), slope=a))
        self.path5 = nn.Sequential(ConvBlock(cs, b, 1, slope=a), ConvBlock(b, b, (1, 5), padding=(0, 2), slope=a),
                                   ConvBlock(b, b, (5, 1), padding=(2, 0), slope=a))
        self.pool_proj = ConvBlock(cs, b, 1, slope=a)
        self.spatial_proj = ConvBlock(4 * b, cf, 1, slope=a)
        self.semantic_conv = ConvBlock(cm, cf, 1, slope=a)
        self.semantic_up = DeconvBlock(cf, cf, slope=a)
        self.fuse = ConvBlock(cf, cf, 1, slope=a)

    def spatial_branch(self, x):
        paths = [self.path1(x), self.path3(x), self.path5(x), self.pool_proj(P.avg_pool3(x))]
        return self.spatial_proj(P.concat(paths, 1))

    def semantic_branch(self, x):
        return self.semantic_up(self.semantic_conv(x))

    def forward(self, spatial, semantic):
        s = self.spatial_branch(spatial)
        m = self.semantic_branch(semantic)
        if s.shape != m.shape:
            raise P.ShapeError(f"msaf: spatial {tuple(s.shape)} and upsampled semantic {tuple(m.shape)} differ")
        return self.fuse(P.add(s, m))


class BAM(nn.Module):
    """``out = x * (1 + sigmoid(channel_logits + spatial_logits))``."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        c, a, d = cfg.fused_channels, cfg.leaky_slope, cfg.bam_dilation
        r = max(c // cfg.bam_reduction, 1)
        self.channel_fc = FCBlock(c, r, slope=a)
        self.channel_out = Linear(r, c)
        self.spatial_reduce = ConvBlock(c, r, 1, slope=a)
        self.spatial_dil = nn.Sequential(ConvBlock(r, r, 3, padding=d, dilation=d, slope=a),
                                         ConvBlock(r, r, 3, padding=d, dilation=d, slope=a))
        self.spatial_out = Conv(r, 1, 1)

    def attention_logits(self, x):
        mc = self.channel_out(self.channel_fc(P.global_avg_pool(x)))[:, :, None, None]
        ms = self.spatial_out(self.spatial_dil(self.spatial_reduce(x)))
        return mc + ms

    @staticmethod
    def apply(x, logits):
        return x * (1.0 + P.sigmoid(P.expand_as(logits, x)))

    def forward(self, x):
        return self.apply(x, self.attention_logits(x))


class CometNet(nn.Module):
    FEATURE_STRIDE = 8

    def __init__(self, cfg: NetConfig | None = None):
        super().__init__()
        self.cfg = cfg or NetConfig()
        c, a = self.cfg.fused_channels, self.cfg.leaky_slope
        self.backbone = Backbone(self.cfg)
        self.msaf = MSAF(self.cfg)
        self.bam = BAM(self.cfg)
        rr, rc = self.cfg.ref_bins
        self.modulation = ConvBlock(c, c, (rr, rc), slope=a)
        tr, tc = self.cfg.test_bins
        self.head_fc = FCBlock(c * tr * tc, self.cfg.head_hidden, slope=a)
        self.iou_head = Linear(self.cfg.head_hidden, 1)
        self.cle_head = Linear(self.cfg.head_hidden, 2)
        self.reset_parameters()

    def reset_parameters(self, generator: torch.Generator | None = None):
        """He (fan-in) init for every weight matrix/kernel, zero biases, unit BN scale."""
        slope = self.cfg.leaky_slope
        for name, p in self.named_parameters():
            if name.endswith("bn.weight"):
                nn.init.ones_(p)
            elif p.dim() == 1:
                nn.init.zeros_(p)
            else:
                nn.init.kaiming_normal_(p, a=slope, mode="fan_in", nonlinearity="leaky_relu", generator=generator)
        for name, b in self.named_buffers():
            if name.endswith("running_mean"):
                b.zero_()
            elif name.endswith("running_var"):
                b.fill_(1.0)

    @property
    def params(self) -> ParamStore:
        return ParamStore(self)

    def features(self, image):
        """Backbone -> MSAF -> BAM at stride 8."""
        spatial, semantic = self.backbone(image)
        fused = self.msaf(spatial, semantic)
        return self.bam(fused) if self.cfg.enable_bam else fused

    def reference_modulation(self, ref_feat, ref_boxes):
        """``ref_feat`` (B, C, H, W), ``ref_boxes`` (B, M, 4) in image pixels -> (B, M, C)."""
        B, C = ref_feat.shape[:2]
        pooled = prroi_pool(ref_feat, ref_boxes / self.FEATURE_STRIDE, self.cfg.ref_bins)
        M = pooled.shape[1]
        coeff = self.modulation(pooled.reshape(B * M, C, *self.cfg.ref_bins))
        return coeff.reshape(B, M, C)

    def grouped_heads(self, test_feat, mods, test_boxes) -> GroupedPrediction:
        """``test_feat`` (B, C, H, W), ``mods`` (B, M, C), ``test_boxes`` (B, N, 4) in image pixels."""
        B, C, H, W = test_feat.shape
        M, N = mods.shape[1], test_boxes.shape[1]
        if M < 1 or N < 1:
            raise ValueError(f"grouped_heads needs at least one reference and one test box, got M={M}, N={N}")
        modulated = test_feat[:, None] * mods[:, :, :, None, None]
        modulated = modulated.reshape(B * M, C, H, W)
        boxes = (test_boxes / self.FEATURE_STRIDE)[:, None].expand(B, M, N, 4).reshape(B * M, N, 4)
        pooled = prroi_pool(modulated, boxes, self.cfg.test_bins)
        hidden = self.head_fc(pooled.reshape(B * M * N, -1))
        iou = self.iou_head(hidden).reshape(B, M, N)
        cle = self.cle_head(hidden).reshape(B, M, N, 2) if self.cfg.enable_cle_head else None
        return GroupedPrediction(iou, cle)

    def forward(self, ref_image, test_image, ref_boxes, test_boxes) -> GroupedPrediction:
        B = ref_image.shape[0]
        feats = self.features(torch.cat([ref_image, test_image], 0))
        ref_feat, test_feat = feats[:B], feats[B:]
        mods = self.reference_modulation(ref_feat, ref_boxes)
        return self.grouped_heads(test_feat, mods, test_boxes)


def save_net(path, net: CometNet, extra: dict | None = None):
    config = {"net": net.cfg.to_dict(), **(extra or {})}
    save_checkpoint(path, net.params.snapshot(), config)


def load_net(path) -> tuple[CometNet, dict]:
    tensors, config = load_checkpoint(path)
    net = CometNet(NetConfig.from_dict(config["net"]))
    net.params.load_snapshot(tensors)
    net.eval()
    return net, config


def to_image_tensor(patch: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """HxWx3 uint8 or [0,1] float array -> (3, H, W) tensor in [0, 1]."""
    arr = np.asarray(patch)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    return torch.as_tensor(np.ascontiguousarray(arr.transpose(2, 0, 1)), dtype=dtype)
