"""Two-branch stripe/attribute network.

The backbone produces a square feature map ``F`` (N, c, m, m). The stripe
branch pools ``F`` into ``q`` horizontal stripes, reduces each stripe with
its own affine map to ``d`` dims and classifies identity per stripe. The
attribute branch pools ``F`` globally into ``g`` and feeds an identity and
an attribute classifier. The retrieval descriptor is ``[h_1 .. h_q, g]``.
"""
from __future__ import annotations

import math
import pickle
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torchvision

from . import kernels
from .errors import ConfigError

BRANCHES = ("full", "stripe", "attr", "id")
CHECKPOINT_VERSION = 1


# ------------------------------------------------------------ pooling


class _HorizontalAvgPoolFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, q):
        n, c, h, w = x.shape
        ctx.hw = (h, w)
        fmap = x.detach().permute(0, 2, 3, 1).contiguous().numpy()
        pooled = kernels.hap_forward(fmap, q)
        return torch.from_numpy(np.ascontiguousarray(pooled)).to(x.dtype)

    @staticmethod
    def backward(ctx, grad):
        h, w = ctx.hw
        dF = kernels.hap_backward(grad.detach().contiguous().numpy(), h, w)
        return torch.from_numpy(dF).permute(0, 3, 1, 2), None


def horizontal_avg_pool(x: torch.Tensor, q: int) -> torch.Tensor:
    """(N, C, H, W) -> (N, q, C) stripe means, backward via the explicit kernel."""
    if x.shape[2] % q:
        raise ValueError(f"feature map height {x.shape[2]} not divisible by q={q}")
    if x.shape[0] == 0:
        return x.new_zeros((0, q, x.shape[1]))
    return _HorizontalAvgPoolFn.apply(x, q)


class HorizontalAveragePooling(nn.Module):
    def __init__(self, q: int):
        super().__init__()
        self.q = q

    def forward(self, x):
        return horizontal_avg_pool(x, self.q)

    def extra_repr(self):
        return f"q={self.q}"


# ------------------------------------------------------------ backbones


class TinyBackbone(nn.Module):
    """Four stride-2 stages (total stride 16) for desk-scale runs."""

    def __init__(self, width: int = 64):
        super().__init__()
        widths = [max(width // 4, 4), max(width // 2, 4), width, width]
        layers = []
        cin = 3
        for cout in widths:
            layers += [
                nn.Conv2d(cin, cout, 3, stride=2, padding=1, bias=False),
                nn.BatchNorm2d(cout),
                nn.ReLU(inplace=True),
                nn.Conv2d(cout, cout, 3, padding=1, bias=False),
                nn.BatchNorm2d(cout),
                nn.ReLU(inplace=True),
            ]
            cin = cout
        self.body = nn.Sequential(*layers)
        self.stage_strides = (2, 2, 2, 2)
        self.out_channels = width

    @property
    def total_stride(self):
        return math.prod(self.stage_strides)

    def forward(self, x):
        return self.body(x)


class ResNet50Backbone(nn.Module):
    """torchvision ResNet-50 trunk with the last down-sampling set to stride 1."""

    def __init__(self, last_stride: int = 1, pretrained: bool = False):
        super().__init__()
        weights = torchvision.models.ResNet50_Weights.DEFAULT if pretrained else None
        net = torchvision.models.resnet50(weights=weights)
        net.layer4[0].conv2.stride = (last_stride, last_stride)
        net.layer4[0].downsample[0].stride = (last_stride, last_stride)
        self.body = nn.Sequential(
            net.conv1, net.bn1, net.relu, net.maxpool, net.layer1, net.layer2, net.layer3, net.layer4
        )
        # stem conv, max-pool, layer2, layer3, layer4
        self.stage_strides = (2, 2, 2, 2, last_stride)
        self.out_channels = 2048

    @property
    def total_stride(self):
        return math.prod(self.stage_strides)

    def forward(self, x):
        return self.body(x)


def build_backbone(name: str, width: int = 64, pretrained: bool = False) -> nn.Module:
    if name == "tiny":
        return TinyBackbone(width)
    if name == "resnet50":
        return ResNet50Backbone(last_stride=1, pretrained=pretrained)
    raise ConfigError(f"unknown backbone {name!r}")


# ------------------------------------------------------------ model


def _init_classifier(layer: nn.Linear):
    nn.init.normal_(layer.weight, std=0.001)
    nn.init.zeros_(layer.bias)


class StripeReducer(nn.Module):
    """Per-stripe c -> d transform (1x1 conv on a 1x1 map == affine), optional BN + ReLU."""

    def __init__(self, c: int, d: int, batchnorm: bool = True, relu: bool = True):
        super().__init__()
        self.fc = nn.Linear(c, d, bias=not batchnorm)
        nn.init.kaiming_normal_(self.fc.weight, mode="fan_out")
        self.bn = nn.BatchNorm1d(d) if batchnorm else None
        self.relu = nn.ReLU(inplace=True) if relu else None

    def forward(self, p):
        h = self.fc(p)
        if self.bn is not None:
            h = self.bn(h)
        if self.relu is not None:
            h = self.relu(h)
        return h


class SanModel(nn.Module):
    def __init__(
        self,
        num_identities: int,
        num_attributes: int,
        q: int = 8,
        d: int = 512,
        backbone: str = "resnet50",
        input_size: int = 256,
        backbone_width: int = 64,
        reduce_bn: bool = True,
        reduce_relu: bool = True,
        branch: str = "full",
        normalize: bool = False,
        pretrained: bool = False,
    ):
        super().__init__()
        if branch not in BRANCHES:
            raise ConfigError(f"branch must be one of {BRANCHES}, got {branch!r}")
        if num_identities < 1:
            raise ConfigError("model needs at least one identity class")
        self.build_args = dict(
            num_identities=num_identities,
            num_attributes=num_attributes,
            q=q,
            d=d,
            backbone=backbone,
            input_size=input_size,
            backbone_width=backbone_width,
            reduce_bn=reduce_bn,
            reduce_relu=reduce_relu,
            branch=branch,
            normalize=normalize,
        )
        self.backbone = build_backbone(backbone, backbone_width, pretrained)
        stride = self.backbone.total_stride
        if input_size % stride:
            raise ConfigError(f"input size {input_size} not divisible by backbone stride {stride}")
        self.m = input_size // stride
        if q < 1 or self.m % q:
            raise ConfigError(f"feature map size {self.m} not divisible by q={q}")
        self.q, self.d, self.c = q, d, self.backbone.out_channels
        self.num_identities, self.num_attributes = num_identities, num_attributes
        self.branch, self.normalize = branch, normalize

        self.hap = HorizontalAveragePooling(q)
        self.reducers = nn.ModuleList(StripeReducer(self.c, d, reduce_bn, reduce_relu) for _ in range(q))
        self.stripe_classifiers = nn.ModuleList(nn.Linear(d, num_identities) for _ in range(q))
        self.id_classifier = nn.Linear(self.c, num_identities)
        # M = 0 (no attribute labels at all) keeps a 1-way head so shapes stay valid
        self.attr_classifier = nn.Linear(self.c, max(num_attributes, 1))
        for layer in [*self.stripe_classifiers, self.id_classifier, self.attr_classifier]:
            _init_classifier(layer)

    @property
    def descriptor_dim(self) -> int:
        if self.branch == "full":
            return self.q * self.d + self.c
        if self.branch == "stripe":
            return self.q * self.d
        return self.c

    def backbone_forward(self, x):
        return self.backbone(x)

    def reduce_dim(self, pooled):
        """(N, q, c) -> (N, q, d), stripe i through reducer i."""
        return torch.stack([red(pooled[:, i]) for i, red in enumerate(self.reducers)], dim=1)

    def forward(self, x):
        n = x.shape[0]
        if n == 0:
            return _empty_outputs(self, x)
        fmap = self.backbone_forward(x)
        pooled = self.hap(fmap)
        reduced = self.reduce_dim(pooled)
        g = fmap.mean(dim=(2, 3))
        stripe_logits = [clf(reduced[:, i]) for i, clf in enumerate(self.stripe_classifiers)]
        parts = []
        if self.branch in ("full", "stripe"):
            parts.append(reduced.reshape(n, self.q * self.d))
        if self.branch in ("full", "attr", "id"):
            parts.append(g)
        desc = torch.cat(parts, dim=1)
        if self.normalize:
            desc = nn.functional.normalize(desc, dim=1)
        return {
            "stripe_logits": stripe_logits,
            "id_logits": self.id_classifier(g),
            "attr_logits": self.attr_classifier(g),
            "descriptors": desc,
            "feature_map": fmap,
            "pooled": pooled,
            "reduced": reduced,
            "global": g,
        }


def _empty_outputs(model: SanModel, x):
    z = lambda *s: x.new_zeros(s)
    return {
        "stripe_logits": [z(0, model.num_identities) for _ in range(model.q)],
        "id_logits": z(0, model.num_identities),
        "attr_logits": z(0, max(model.num_attributes, 1)),
        "descriptors": z(0, model.descriptor_dim),
        "feature_map": z(0, model.c, model.m, model.m),
        "pooled": z(0, model.q, model.c),
        "reduced": z(0, model.q, model.d),
        "global": z(0, model.c),
    }


def to_batch(images: np.ndarray) -> torch.Tensor:
    """(N, H, W, 3) float array -> (N, 3, H, W) tensor."""
    return torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2).contiguous()


# ------------------------------------------------------------ checkpoints


def save_checkpoint(path, model: SanModel, config: dict | None = None, **extra) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "build_args": model.build_args,
            "config": config or {},
            "state_dict": model.state_dict(),
            **extra,
        },
        path,
    )
    return path


def load_checkpoint(path, num_identities: int | None = None, num_attributes: int | None = None, **expect):
    """Rebuild a model from ``path``; raises ConfigError on any label-space mismatch.

    ``expect`` may pin other build arguments (``q``, ``d``).
    """
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {blob.get('format_version')!r}")
    args = blob["build_args"]
    checks = dict(expect)
    if num_identities is not None:
        checks["num_identities"] = num_identities
    if num_attributes is not None:
        checks["num_attributes"] = num_attributes
    for key, want in checks.items():
        if args.get(key) != want:
            raise ConfigError(f"checkpoint {key}={args.get(key)} does not match expected {want}")
    model = SanModel(**args)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, blob
