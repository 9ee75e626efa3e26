"""Task networks, the flaw detector and checkpoint I/O."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, InvalidInputError

FLAW_DETECTOR_WIDTHS = (64, 128, 128, 256, 256, 512, 512, 1)
FLAW_DETECTOR_STRIDES = (2, 2, 1, 2, 1, 2, 1, 2)
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TaskSpec:
    kind: str  # "classification" or "regression"
    in_channels: int
    out_channels: int
    criterion: str  # "ce" or "mse"
    activation: str  # "softmax", "identity" or "sigmoid"
    metric: str  # "miou" or "psnr"
    residual: bool = False  # regression head predicts a correction added to the input
    widths: tuple = (16, 24, 32, 48, 48)

    def __post_init__(self):
        if self.kind not in ("classification", "regression"):
            raise ConfigError(f"unsupported task kind {self.kind!r}")
        if self.out_channels < 1:
            raise ConfigError("out_channels must be >= 1")
        if self.kind == "classification":
            if self.criterion != "ce" or self.activation != "softmax" or self.out_channels < 2:
                raise ConfigError("classification needs criterion 'ce', softmax activation and >= 2 classes")
        else:
            if self.criterion != "mse" or self.activation not in ("identity", "sigmoid"):
                raise ConfigError("regression needs criterion 'mse' and identity/sigmoid activation")
            if self.residual and self.in_channels != self.out_channels:
                raise ConfigError("residual regression needs in_channels == out_channels")
        if len(self.widths) != 5:
            raise ConfigError("widths must list 5 channel counts (stem + 4 downsampling stages)")

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["widths"] = tuple(d.get("widths", cls.widths))
        return cls(**d)


SEGMENTATION_SPEC = TaskSpec("classification", 3, 4, "ce", "softmax", "miou")
DENOISING_SPEC = TaskSpec("regression", 3, 3, "mse", "identity", "psnr", residual=True)


def _conv_block(c_in, c_out, stride=1):
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False),
        nn.GroupNorm(4, c_out),
        nn.ReLU(inplace=True),
    )


class TaskModel(nn.Module):
    """Small U-shaped network: stem, four stride-2 stages, four upsampling stages with skips."""

    def __init__(self, spec: TaskSpec, seed: int = 0):
        super().__init__()
        self.spec = spec
        self.seed = seed
        w = spec.widths
        self.stem = _conv_block(spec.in_channels, w[0])
        self.down = nn.ModuleList(_conv_block(w[i], w[i + 1], stride=2) for i in range(4))
        self.up = nn.ModuleList(_conv_block(w[i + 1] + w[i], w[i]) for i in reversed(range(4)))
        self.head = nn.Conv2d(w[0], spec.out_channels, 1)

    def forward(self, x):
        """Raw output: logits for classification, the regression map otherwise."""
        skips = [self.stem(x)]
        for stage in self.down:
            skips.append(stage(skips[-1]))
        h = skips.pop()
        for stage in self.up:
            skip = skips.pop()
            h = F.interpolate(h, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            h = stage(torch.cat([h, skip], dim=1))
        out = self.head(h)
        if self.spec.residual:
            out = out + x
        return out

    def activate(self, raw):
        """Map raw output to the prediction map fed to the constraints and the flaw detector."""
        if self.spec.activation == "softmax":
            return torch.softmax(raw, dim=1)
        if self.spec.activation == "sigmoid":
            return torch.sigmoid(raw)
        return raw

    def predict(self, x):
        return self.activate(self(x))


def build_task_model(spec: TaskSpec, seed: int) -> TaskModel:
    if not isinstance(spec, TaskSpec):
        raise ConfigError(f"expected a TaskSpec, got {type(spec).__name__}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return TaskModel(spec, seed)


def _same_pad(x, kernel, stride):
    h, w = x.shape[-2:]
    pads = []
    for n in (w, h):
        out = -(-n // stride)
        total = max((out - 1) * stride + kernel - n, 0)
        pads += [total // 2, total - total // 2]
    return F.pad(x, pads)


class FlawDetector(nn.Module):
    """Fully convolutional flaw detector.

    Eight 4x4 convolutions with "same" padding; the first seven are followed
    by batch norm and leaky ReLU (slope 0.2). The single-channel output is
    bilinearly resized (align_corners=True) to the input resolution and
    squashed with a sigmoid.
    """

    def __init__(self, in_channels: int, widths=FLAW_DETECTOR_WIDTHS, strides=FLAW_DETECTOR_STRIDES):
        super().__init__()
        if len(widths) != len(strides) or widths[-1] != 1:
            raise ConfigError("widths and strides must align and end in a single output channel")
        self.in_channels = in_channels
        self.widths = tuple(widths)
        self.strides = tuple(strides)
        self.convs = nn.ModuleList()
        self.norms = nn.ModuleList()
        c = in_channels
        for i, w in enumerate(widths):
            self.convs.append(nn.Conv2d(c, w, 4, stride=strides[i]))
            if i < len(widths) - 1:
                self.norms.append(nn.BatchNorm2d(w))
            c = w

    def forward_raw(self, image, prediction):
        if image.shape[0] != prediction.shape[0] or image.shape[-2:] != prediction.shape[-2:]:
            raise InvalidInputError(
                f"image {tuple(image.shape)} and prediction {tuple(prediction.shape)} must share batch and spatial dims"
            )
        h = torch.cat([image, prediction], dim=1)
        for i, conv in enumerate(self.convs):
            h = conv(_same_pad(h, 4, self.strides[i]))
            if i < len(self.norms):
                h = F.leaky_relu(self.norms[i](h), 0.2)
        return F.interpolate(h, size=image.shape[-2:], mode="bilinear", align_corners=True)

    def forward(self, image, prediction):
        return torch.sigmoid(self.forward_raw(image, prediction))


def flaw_detector_param_count(in_channels, widths=FLAW_DETECTOR_WIDTHS):
    """Closed-form parameter count: conv weights + biases, plus BN scale/shift on all but the last layer."""
    total, c = 0, in_channels
    for i, w in enumerate(widths):
        total += 4 * 4 * c * w + w
        if i < len(widths) - 1:
            total += 2 * w
        c = w
    return total


def prediction_confidence(flaw):
    return 1 - flaw


def build_flaw_detector(in_channels, seed, widths=FLAW_DETECTOR_WIDTHS, strides=FLAW_DETECTOR_STRIDES):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return FlawDetector(in_channels, widths, strides)


def param_checksum(module: nn.Module) -> str:
    """Hash of all parameters and buffers, bitwise."""
    import hashlib

    digest = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(t.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def save_checkpoint(path, modules: dict, **meta):
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "meta": meta,
        "state": {name: m.state_dict() for name, m in modules.items()},
    }
    torch.save(payload, path)


def load_checkpoint(path):
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise InvalidInputError(f"{path}: unsupported checkpoint version {payload.get('format_version')}")
    return payload
