"""PSPNet with a multi-channel initializer layer, and the 2D U-Net baseline.

Models are small module trees in the spirit of ``torch.nn``: parameters and
child modules assigned as attributes are registered automatically, and their
dotted attribute paths become the parameter names used by
:func:`set_trainable` and the checkpoint manifest.
"""

from __future__ import annotations

import fnmatch
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import kernels as K
from .autodiff import Parameter, Tensor, relu
from .errors import (
    ArchitectureMismatch,
    BinTooSmall,
    ConfigInvalid,
    CorruptFile,
    NoMatch,
    VersionMismatch,
    WrongChannelCount,
)

# ---------------------------------------------------------------------------
# module plumbing
# ---------------------------------------------------------------------------


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, mod in self._modules.items():
            yield from mod.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self) -> Iterator[tuple[str, Parameter]]:
        for path, mod in self.named_modules():
            for name, p in mod._params.items():
                yield (f"{path}.{name}" if path else name), p

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for path, mod in self.named_modules():
            for name, buf in mod._buffers().items():
                yield (f"{path}.{name}" if path else name), buf

    def _buffers(self) -> dict:
        return {}

    def train(self, mode: bool = True) -> "Module":
        for _, mod in self.named_modules():
            object.__setattr__(mod, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _he_normal(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d(Module):
    def __init__(self, cin, cout, kernel, rng, stride=1, padding=0, dilation=1, bias=True, dtype=np.float32):
        super().__init__()
        kh, kw = K._pair(kernel)
        self.spec = K.ConvSpec((kh, kw), stride, padding, dilation)
        self.weight = Parameter(_he_normal(rng, (cout, cin, kh, kw), cin * kh * kw, dtype))
        self.bias = Parameter(np.zeros(cout, dtype=dtype)) if bias else None

    def forward(self, x):
        return K.conv2d(x, self.weight, self.bias, spec=self.spec)


class ConvTranspose2d(Module):
    def __init__(self, cin, cout, kernel, rng, stride=1, bias=True, dtype=np.float32):
        super().__init__()
        kh, kw = K._pair(kernel)
        self.spec = K.ConvSpec((kh, kw), stride)
        self.weight = Parameter(_he_normal(rng, (cin, cout, kh, kw), cin * kh * kw, dtype))
        self.bias = Parameter(np.zeros(cout, dtype=dtype)) if bias else None

    def forward(self, x):
        return K.conv_transpose2d(x, self.weight, self.bias, spec=self.spec)


class BatchNorm2d(Module):
    """Batch norm whose statistics freeze along with its affine parameters.

    When both scale and shift are non-trainable the layer normalizes with its
    running statistics even in training mode, so a frozen layer is fully
    inert. A training batch with a single value per channel (one slice
    reaching a 1x1 pyramid level) is also normalized with running statistics.
    """

    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.state = K.BatchNormState(channels, momentum, eps, dtype)
        self.scale = self.state.scale
        self.shift = self.state.shift

    def _buffers(self):
        return {"running_mean": self.state.running_mean, "running_var": self.state.running_var}

    def forward(self, x):
        frozen = not (self.scale.trainable or self.shift.trainable)
        single = x.shape[0] * x.shape[2] * x.shape[3] < 2
        self.state.mode = "train" if self.training and not (frozen or single) else "eval"
        return K.batch_norm2d(x, self.state)


class ConvBNReLU(Module):
    def __init__(self, cin, cout, rng, kernel=3, stride=1, dilation=1, dtype=np.float32, act=True):
        super().__init__()
        pad = dilation * (K._pair(kernel)[0] - 1) // 2
        self.conv = Conv2d(cin, cout, kernel, rng, stride=stride, padding=pad, dilation=dilation, bias=False, dtype=dtype)
        self.bn = BatchNorm2d(cout, dtype=dtype)
        self.act = act

    def forward(self, x):
        y = self.bn(self.conv(x))
        return relu(y) if self.act else y


# ---------------------------------------------------------------------------
# PSPNet
# ---------------------------------------------------------------------------


@dataclass
class PspConfig:
    in_channels: int = 5
    bins: tuple = (1, 2, 3, 6)
    backbone_channels: tuple = (16, 16, 32, 64)  # stem, stage1, stage2, stage3
    n_psp: int | None = None
    num_classes: int = 2
    input_size: tuple = (64, 64)
    init_channels: int = 3
    head_channels: int = 32

    def __post_init__(self):
        self.bins = tuple(int(b) for b in self.bins)
        self.backbone_channels = tuple(int(c) for c in self.backbone_channels)
        self.input_size = tuple(int(s) for s in self.input_size)
        if self.n_psp is None:
            self.n_psp = max(1, self.backbone_channels[-1] // 4)

    @property
    def feature_size(self) -> tuple[int, int]:
        h, w = self.input_size
        # two stride-2, padding-1, 3x3 convolutions
        for _ in range(2):
            h, w = (h - 1) // 2 + 1, (w - 1) // 2 + 1
        return h, w

    @property
    def head_in_channels(self) -> int:
        return self.backbone_channels[-1] + self.n_psp * len(self.bins)

    def validate(self) -> None:
        if self.in_channels < 1 or self.num_classes < 2 or self.init_channels < 1:
            raise ConfigInvalid(f"bad channel counts in {self}")
        if len(self.backbone_channels) != 4 or min(self.backbone_channels) < 1:
            raise ConfigInvalid("backbone_channels needs four positive entries (stem + three stages)")
        if not self.bins or any(b < 1 for b in self.bins) or any(a >= b for a, b in zip(self.bins, self.bins[1:])):
            raise ConfigInvalid(f"bins must be positive and strictly increasing, got {self.bins}")
        if min(self.input_size) < 1:
            raise ConfigInvalid(f"bad input size {self.input_size}")
        if max(self.bins) > min(self.feature_size):
            raise ConfigInvalid(f"bin {max(self.bins)} exceeds backbone output {self.feature_size}")
        if self.n_psp < 1 or self.head_channels < 1:
            raise ConfigInvalid("n_psp and head_channels must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "PspConfig":
        return _config_from_dict(cls, d)


def _config_from_dict(cls, d: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigInvalid(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**d)


def initializer_layer(x: Tensor, bn: K.BatchNormState, k_init: Tensor) -> Tensor:
    """Batch-normalize the stacked perfusion channels, then mix them with a 1x1 kernel."""
    if x.ndim != 4 or x.shape[1] != bn.channels or x.shape[1] != k_init.shape[1]:
        raise WrongChannelCount(
            f"initializer expects {k_init.shape[1]} input channels, got {x.shape[1] if x.ndim == 4 else x.shape}"
        )
    return K.conv2d(K.batch_norm2d(x, bn), k_init)


class InitializerLayer(Module):
    def __init__(self, cin, cout, rng, dtype=np.float32):
        super().__init__()
        self.bn = BatchNorm2d(cin, dtype=dtype)
        self.conv = Conv2d(cin, cout, 1, rng, bias=False, dtype=dtype)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.conv.weight.shape[1]:
            raise WrongChannelCount(f"initializer expects {self.conv.weight.shape[1]} channels, got shape {x.shape}")
        return self.conv(self.bn(x))


class ResidualBlock(Module):
    def __init__(self, cin, cout, rng, stride=1, dilation=1, dtype=np.float32):
        super().__init__()
        self.conv1 = ConvBNReLU(cin, cout, rng, stride=stride, dilation=dilation, dtype=dtype)
        self.conv2 = ConvBNReLU(cout, cout, rng, dilation=dilation, dtype=dtype, act=False)
        if stride != 1 or cin != cout:
            self.shortcut = ConvBNReLU(cin, cout, rng, kernel=1, stride=stride, dtype=dtype, act=False)
        else:
            self.shortcut = None

    def forward(self, x):
        skip = x if self.shortcut is None else self.shortcut(x)
        return relu(self.conv2(self.conv1(x)) + skip)


class Backbone(Module):
    """Stem plus three residual stages: stride 2, stride 2, dilation 2 (output stride 4)."""

    def __init__(self, cin, channels, rng, dtype=np.float32):
        super().__init__()
        c0, c1, c2, c3 = channels
        self.stem = ConvBNReLU(cin, c0, rng, dtype=dtype)
        self.stage1 = ResidualBlock(c0, c1, rng, stride=2, dtype=dtype)
        self.stage2 = ResidualBlock(c1, c2, rng, stride=2, dtype=dtype)
        self.stage3 = ResidualBlock(c2, c3, rng, dilation=2, dtype=dtype)

    def forward(self, x):
        return self.stage3(self.stage2(self.stage1(self.stem(x))))


class PyramidPooling(Module):
    def __init__(self, channels, bins, n_psp, rng, dtype=np.float32):
        super().__init__()
        self.bins = tuple(bins)
        self.levels = []
        for i, _ in enumerate(self.bins):
            level = ConvBNReLU(channels, n_psp, rng, kernel=1, dtype=dtype)
            setattr(self, f"level{i}", level)
            self.levels.append(level)

    def forward(self, f):
        h, w = f.shape[2:]
        if max(self.bins) > min(h, w):
            raise BinTooSmall(f"bin {max(self.bins)} exceeds feature map {h}x{w}")
        outs = [f]
        for k, level in zip(self.bins, self.levels):
            outs.append(K.bilinear_upsample(level(K.adaptive_avg_pool2d(f, k)), h, w))
        return K.concat(outs, axis=1)


def pyramid_pooling(f: Tensor, bins: Sequence[int], n_psp: int, seed: int = 0) -> Tensor:
    """Stand-alone pyramid pooling with freshly initialized level weights."""
    dtype = f.dtype
    module = PyramidPooling(f.shape[1], bins, n_psp, np.random.default_rng(seed), dtype=dtype)
    return module(f)


class SegmentationModel(Module):
    arch: str = ""

    def __init__(self, config):
        super().__init__()
        self.config = config

    def predict_logits(self, x: np.ndarray) -> np.ndarray:
        from .autodiff import no_grad

        with no_grad():
            return self.forward(Tensor(x, dtype=self.dtype)).data

    @property
    def dtype(self):
        return self.parameters()[0].dtype


class PSPNet(SegmentationModel):
    arch = "pspnet"
    new_layer_patterns = ("init.*", "head.classifier.*")

    def __init__(self, cfg: PspConfig, seed: int = 0, dtype=np.float32):
        super().__init__(cfg)
        rng = np.random.default_rng(seed)
        self.init = InitializerLayer(cfg.in_channels, cfg.init_channels, rng, dtype)
        self.backbone = Backbone(cfg.init_channels, cfg.backbone_channels, rng, dtype)
        self.ppm = PyramidPooling(cfg.backbone_channels[-1], cfg.bins, cfg.n_psp, rng, dtype)
        self.head = Module()
        self.head.conv = ConvBNReLU(cfg.head_in_channels, cfg.head_channels, rng, dtype=dtype)
        self.head.classifier = Conv2d(cfg.head_channels, cfg.num_classes, 1, rng, dtype=dtype)

    def forward(self, x):
        h, w = x.shape[2:]
        f = self.backbone(self.init(x))
        logits = self.head.classifier(self.head.conv(self.ppm(f)))
        return K.bilinear_upsample(logits, h, w)


def build_pspnet(cfg: PspConfig | None = None, seed: int = 0, dtype=np.float32) -> PSPNet:
    cfg = cfg or PspConfig()
    cfg.validate()
    return PSPNet(cfg, seed=seed, dtype=dtype)


# ---------------------------------------------------------------------------
# U-Net
# ---------------------------------------------------------------------------


@dataclass
class UNetConfig:
    in_channels: int = 5
    base_channels: int = 8
    levels: int = 4
    num_classes: int = 2
    input_size: tuple = (64, 64)

    def __post_init__(self):
        self.input_size = tuple(int(s) for s in self.input_size)

    def validate(self) -> None:
        if self.levels < 1 or self.base_channels < 1 or self.in_channels < 1 or self.num_classes < 2:
            raise ConfigInvalid(f"bad U-Net config {self}")
        check_unet_input(self.input_size, self.levels)

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        return _config_from_dict(cls, d)


def check_unet_input(size, levels: int) -> None:
    step = 2 ** levels
    if any(s < step or s % step for s in size):
        raise ConfigInvalid(f"input size {tuple(size)} is not divisible by 2^{levels}")


class DoubleConv(Module):
    def __init__(self, cin, cout, rng, dtype=np.float32):
        super().__init__()
        self.conv1 = ConvBNReLU(cin, cout, rng, dtype=dtype)
        self.conv2 = ConvBNReLU(cout, cout, rng, dtype=dtype)

    def forward(self, x):
        return self.conv2(self.conv1(x))


class UNet2d(SegmentationModel):
    arch = "unet2d"
    new_layer_patterns = ("enc0.conv1.*", "classifier.*")

    def __init__(self, cfg: UNetConfig, seed: int = 0, dtype=np.float32):
        super().__init__(cfg)
        rng = np.random.default_rng(seed)
        widths = [cfg.base_channels * 2 ** i for i in range(cfg.levels + 1)]
        self.widths = widths
        cin = cfg.in_channels
        for i in range(cfg.levels):
            setattr(self, f"enc{i}", DoubleConv(cin, widths[i], rng, dtype))
            cin = widths[i]
        self.bottleneck = DoubleConv(widths[-2], widths[-1], rng, dtype)
        for i in reversed(range(cfg.levels)):
            setattr(self, f"up{i}", ConvTranspose2d(widths[i + 1], widths[i], 2, rng, stride=2, dtype=dtype))
            setattr(self, f"dec{i}", DoubleConv(2 * widths[i], widths[i], rng, dtype))
        self.classifier = Conv2d(widths[0], cfg.num_classes, 1, rng, dtype=dtype)

    def forward(self, x):
        check_unet_input(x.shape[2:], self.config.levels)
        skips = []
        for i in range(self.config.levels):
            x = getattr(self, f"enc{i}")(x)
            skips.append(x)
            x = K.max_pool2d(x, 2)
        x = self.bottleneck(x)
        for i in reversed(range(self.config.levels)):
            x = getattr(self, f"up{i}")(x)
            x = getattr(self, f"dec{i}")(K.concat([x, skips[i]], axis=1))
        return self.classifier(x)


def build_unet2d(cfg: UNetConfig | None = None, seed: int = 0, dtype=np.float32) -> UNet2d:
    cfg = cfg or UNetConfig()
    cfg.validate()
    return UNet2d(cfg, seed=seed, dtype=dtype)


ARCHITECTURES = {"pspnet": (PspConfig, build_pspnet), "unet2d": (UNetConfig, build_unet2d)}


def build_model(arch: str, config: dict | PspConfig | UNetConfig | None = None, seed: int = 0, dtype=np.float32):
    if arch not in ARCHITECTURES:
        raise ConfigInvalid(f"unknown architecture {arch!r}; expected one of {sorted(ARCHITECTURES)}")
    cfg_cls, builder = ARCHITECTURES[arch]
    if isinstance(config, dict):
        config = cfg_cls.from_dict(config)
    return builder(config, seed=seed, dtype=dtype)


def set_trainable(model: Module, name_pattern: str, trainable: bool) -> Module:
    """Set the trainable flag of every parameter whose name matches a glob pattern."""
    matched = [p for name, p in model.named_parameters() if fnmatch.fnmatchcase(name, name_pattern)]
    if not matched:
        raise NoMatch(f"no parameter matches {name_pattern!r}")
    for p in matched:
        p.trainable = trainable
    return model


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"CTPSEGCK"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    arch: str
    config: dict
    params: dict
    buffers: dict = field(default_factory=dict)
    optimizer: dict | None = None
    trainable: dict = field(default_factory=dict)
    epoch: int = 0
    best_dsc: float | None = None
    version: int = FORMAT_VERSION


def _config_dict(cfg) -> dict:
    d = asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def checkpoint_from_model(model: SegmentationModel, epoch: int = 0, best_dsc: float | None = None,
                          optimizer: dict | None = None) -> Checkpoint:
    return Checkpoint(
        arch=model.arch,
        config=_config_dict(model.config),
        params={n: p.data.astype(np.float32) for n, p in model.named_parameters()},
        buffers={n: b.astype(np.float32) for n, b in model.named_buffers()},
        optimizer=None if optimizer is None else {k: np.asarray(v, np.float32) for k, v in optimizer.items()},
        trainable={n: p.trainable for n, p in model.named_parameters()},
        epoch=int(epoch),
        best_dsc=None if best_dsc is None else float(best_dsc),
    )


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    manifest, blobs, offset = [], [], 0
    sections = [("param", ckpt.params), ("buffer", ckpt.buffers), ("optimizer", ckpt.optimizer or {})]
    for section, tensors in sections:
        for name, arr in tensors.items():
            raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            manifest.append({"name": name, "section": section, "shape": list(arr.shape), "offset": offset})
            blobs.append(raw)
            offset += len(raw)
    header = {
        "arch": ckpt.arch,
        "config": ckpt.config,
        "epoch": ckpt.epoch,
        "best_dsc": ckpt.best_dsc,
        "trainable": ckpt.trainable,
        "has_optimizer": ckpt.optimizer is not None,
        "tensors": manifest,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + struct.pack("<I", ckpt.version) + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(blobs)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < len(MAGIC) + 16:
        raise CorruptFile("checkpoint truncated")
    body, crc = data[:-4], struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(body) != crc:
        raise CorruptFile("checkpoint checksum mismatch")
    if body[:8] != MAGIC:
        raise CorruptFile("not a ctpseg checkpoint (bad magic)")
    version = struct.unpack("<I", body[8:12])[0]
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {FORMAT_VERSION}")
    hlen = struct.unpack("<Q", body[12:20])[0]
    try:
        header = json.loads(body[20 : 20 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptFile(f"unreadable checkpoint header: {e}") from None
    blob = body[20 + hlen :]
    out = {"param": {}, "buffer": {}, "optimizer": {}}
    for entry in header["tensors"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        if start + 4 * n > len(blob):
            raise CorruptFile(f"tensor {entry['name']} runs past the end of the file")
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=start).reshape(entry["shape"]).astype(np.float32)
        out[entry["section"]][entry["name"]] = arr
    return Checkpoint(
        arch=header["arch"],
        config=header["config"],
        params=out["param"],
        buffers=out["buffer"],
        optimizer=out["optimizer"] if header.get("has_optimizer") else None,
        trainable=header.get("trainable", {}),
        epoch=header["epoch"],
        best_dsc=header["best_dsc"],
        version=version,
    )


def write_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


def read_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def save_checkpoint(model: SegmentationModel, path, epoch: int = 0, best_dsc: float | None = None,
                    optimizer: dict | None = None) -> Checkpoint:
    ckpt = checkpoint_from_model(model, epoch, best_dsc, optimizer)
    write_checkpoint(ckpt, path)
    return ckpt


def apply_state(model: SegmentationModel, ckpt: Checkpoint, skip: Sequence[str] = ()) -> list[str]:
    """Copy checkpoint tensors into ``model`` in place; returns the names loaded.

    Names matching any glob in ``skip`` are left untouched.
    """
    loaded = []
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    for source, target in ((ckpt.params, params), (ckpt.buffers, buffers)):
        for name, arr in source.items():
            if any(fnmatch.fnmatchcase(name, pat) for pat in skip):
                continue
            if name not in target:
                raise CorruptFile(f"checkpoint tensor {name!r} has no counterpart in the model")
            dst = target[name]
            dst_arr = dst.data if isinstance(dst, Tensor) else dst
            if dst_arr.shape != arr.shape:
                raise CorruptFile(f"shape of {name!r}: checkpoint {arr.shape}, model {dst_arr.shape}")
            dst_arr[...] = arr
            loaded.append(name)
    for name, flag in ckpt.trainable.items():
        if name in params and name in loaded:
            params[name].trainable = flag
    return loaded


def model_from_checkpoint(ckpt: Checkpoint, arch: str | None = None, dtype=np.float32) -> SegmentationModel:
    if arch is not None and ckpt.arch != arch:
        raise ArchitectureMismatch(f"checkpoint holds a {ckpt.arch!r} model, requested {arch!r}")
    model = build_model(ckpt.arch, ckpt.config, dtype=dtype)
    apply_state(model, ckpt)
    return model


def load_checkpoint(path, arch: str | None = None, dtype=np.float32) -> SegmentationModel:
    return model_from_checkpoint(read_checkpoint(path), arch=arch, dtype=dtype)
