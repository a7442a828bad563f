"""U-Net-shaped speaker embedding extractor, forward pass only.

Layer stack: a three-block downsampling path of SE Conv blocks, a connection
path of repeated residual blocks (9/12/15/18/21 depending on the variant),
a symmetric upsampling path using transposed convolutions, temporal
standard-deviation pooling, and a 256-d affine head. Skip connections sum
each downsampling output into the matching upsampling input.

Weights are initialized from a seeded NumPy generator (Kaiming-uniform,
biases zero), so identical seeds give bit-identical networks. Inputs whose
time axis is not a multiple of 4 are zero-padded up front; the padding is
part of the forward definition, so padding by hand gives identical output.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .dataio import _read_bytes

from .errors import (
    CheckpointMismatch,
    ConfigError,
    CorruptFile,
    DegenerateTime,
    FormatError,
    IoError,
    ShapeError,
)

ALLOWED_DEPTHS = (9, 12, 15, 18, 21)


@dataclass
class ResUnetConfig:
    residual_blocks: int = 15
    base_channels: int = 64
    embed_dim: int = 256
    n_mels: int = 64
    se_reduction: int = 8

    def __post_init__(self):
        if self.residual_blocks not in ALLOWED_DEPTHS:
            raise ConfigError(
                f"residual_blocks must be one of {ALLOWED_DEPTHS}, got {self.residual_blocks}"
            )
        if self.embed_dim < 1 or self.base_channels < 1:
            raise ConfigError("embed_dim and base_channels must be positive")


class SqueezeExcite(nn.Module):
    def __init__(self, channels, reduction):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.down = nn.Linear(channels, hidden)
        self.up = nn.Linear(hidden, channels)

    def forward(self, x):
        # squeeze over (time, frequency), excite per channel
        gates = torch.sigmoid(self.up(torch.relu(self.down(x.mean(dim=(2, 3))))))
        return x * gates[:, :, None, None]


class SEConvBlock(nn.Module):
    """conv (or stride-2 transposed conv) -> BN -> ReLU -> SE recalibration."""

    def __init__(self, in_channels, out_channels, kernel, stride=1,
                 transposed=False, reduction=8):
        super().__init__()
        if transposed:
            self.conv = nn.ConvTranspose2d(
                in_channels, out_channels, kernel, stride=2, padding=kernel // 2,
                output_padding=1,
            )
        else:
            self.conv = nn.Conv2d(
                in_channels, out_channels, kernel, stride=stride, padding=kernel // 2
            )
        self.bn = nn.BatchNorm2d(out_channels)
        self.se = SqueezeExcite(out_channels, reduction)

    def forward(self, x):
        return self.se(torch.relu(self.bn(self.conv(x))))


class ResidualBlock(nn.Module):
    """Post-activation residual block: ReLU(BN(conv(ReLU(BN(conv(x))))) + x)."""

    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.bn1 = nn.BatchNorm2d(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(channels)

    def forward(self, x):
        out = self.bn2(self.conv2(torch.relu(self.bn1(self.conv1(x)))))
        return torch.relu(out + x)


class ResUnet(nn.Module):
    def __init__(self, config: ResUnetConfig):
        super().__init__()
        self.config = config
        c1 = config.base_channels
        c2, c3 = 2 * c1, 4 * c1
        r = config.se_reduction
        self.down1 = SEConvBlock(1, c1, 7, stride=1, reduction=r)
        self.down2 = SEConvBlock(c1, c2, 3, stride=2, reduction=r)
        self.down3 = SEConvBlock(c2, c3, 3, stride=2, reduction=r)
        self.res_blocks = nn.ModuleList(
            ResidualBlock(c3) for _ in range(config.residual_blocks)
        )
        self.up1 = SEConvBlock(c3, c2, 3, transposed=True, reduction=r)
        self.up2 = SEConvBlock(c2, c1, 3, transposed=True, reduction=r)
        self.up3 = SEConvBlock(c1, c1, 7, stride=1, reduction=r)
        self.affine = nn.Linear(c1 * config.n_mels, config.embed_dim)
        self.eval()

    def block_outputs(self, x):
        """All intermediate activations, for the shape contract."""
        d1 = self.down1(x)
        d2 = self.down2(d1)
        d3 = self.down3(d2)
        r = d3
        for block in self.res_blocks:
            r = block(r)
        u1 = self.up1(d3 + r)
        u2 = self.up2(u1 + d2)
        u3 = self.up3(u2 + d1)
        pooled = tsdp_torch(u3)
        embedding = self.affine(pooled)
        return d1, d2, d3, r, u1, u2, u3, pooled, embedding

    def forward(self, x):
        return self.block_outputs(x)[-1]


def tsdp_torch(x: torch.Tensor) -> torch.Tensor:
    """Population std over the time axis, flattened channel-major."""
    if x.shape[2] < 2:
        raise DegenerateTime("TSDP needs at least 2 frames")
    return x.std(dim=2, unbiased=False).flatten(start_dim=1)


def build(config: ResUnetConfig, seed: int = 0) -> ResUnet:
    network = ResUnet(config)
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        for module in network.modules():
            if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
                shape = tuple(module.weight.shape)
                if isinstance(module, nn.ConvTranspose2d):
                    fan_in = shape[0] * shape[2] * shape[3]
                elif isinstance(module, nn.Conv2d):
                    fan_in = shape[1] * shape[2] * shape[3]
                else:
                    fan_in = shape[1]
                bound = float(np.sqrt(6.0 / fan_in))
                values = rng.uniform(-bound, bound, size=shape).astype(np.float32)
                module.weight.copy_(torch.from_numpy(values))
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, nn.BatchNorm2d):
                module.weight.fill_(1.0)
                module.bias.zero_()
                module.running_mean.zero_()
                module.running_var.fill_(1.0)
    network.eval()
    return network


def _to_input_tensor(features: np.ndarray, n_mels: int) -> torch.Tensor:
    features = np.asarray(features, dtype=np.float32)
    if features.ndim != 2 or features.shape[1] != n_mels:
        raise ShapeError(f"features must be (T, {n_mels}), got {features.shape}")
    t = features.shape[0]
    if t < 4:
        raise ShapeError(f"need at least 4 frames, got {t}")
    x = torch.from_numpy(features)[None, None, :, :]
    if t % 4:
        x = nn.functional.pad(x, (0, 0, 0, 4 - t % 4))
    return x


def forward(network: ResUnet, features: np.ndarray) -> np.ndarray:
    """Embed a (T, n_mels) feature matrix into a fixed-length vector."""
    x = _to_input_tensor(features, network.config.n_mels)
    with torch.no_grad():
        embedding = network(x)
    out = embedding[0].numpy().copy()
    if not np.all(np.isfinite(out)):
        raise ShapeError("non-finite embedding")
    return out


def forward_pooled(network: ResUnet, features: np.ndarray) -> np.ndarray:
    """The pre-affine pooled vector (for head-only adaptation)."""
    x = _to_input_tensor(features, network.config.n_mels)
    with torch.no_grad():
        pooled = network.block_outputs(x)[-2]
    return pooled[0].numpy().copy()


# --- standalone block-level ops on (channel, time, frequency) arrays ---

def _block_apply(tensor_ctf: np.ndarray, block: nn.Module) -> np.ndarray:
    tensor_ctf = np.asarray(tensor_ctf, dtype=np.float32)
    if tensor_ctf.ndim != 3:
        raise ShapeError("expected a (channel, time, frequency) array")
    with torch.no_grad():
        out = block(torch.from_numpy(tensor_ctf)[None])
    return out[0].numpy().copy()


def se_block_forward(tensor_ctf: np.ndarray, block: SEConvBlock) -> np.ndarray:
    if tensor_ctf.shape[0] != block.conv.in_channels:
        raise ShapeError(
            f"block expects {block.conv.in_channels} channels, got {tensor_ctf.shape[0]}"
        )
    return _block_apply(tensor_ctf, block)


def residual_block_forward(tensor_ctf: np.ndarray, block: ResidualBlock) -> np.ndarray:
    if tensor_ctf.shape[0] != block.conv1.in_channels:
        raise ShapeError(
            f"block expects {block.conv1.in_channels} channels, got {tensor_ctf.shape[0]}"
        )
    return _block_apply(tensor_ctf, block)


def tsdp(tensor_ctf: np.ndarray) -> np.ndarray:
    """Per-(channel, frequency) population std over time, channel-major."""
    tensor_ctf = np.asarray(tensor_ctf, dtype=np.float64)
    if tensor_ctf.ndim != 3:
        raise ShapeError("expected a (channel, time, frequency) array")
    if tensor_ctf.shape[1] < 2:
        raise DegenerateTime("TSDP needs at least 2 frames")
    return tensor_ctf.std(axis=1).reshape(-1)


# --- parameter accounting ---

def _se_conv_params(kernel, in_channels, out_channels, reduction):
    hidden = max(1, out_channels // reduction)
    conv = in_channels * out_channels * kernel * kernel + out_channels
    bn = 2 * out_channels
    se = out_channels * hidden + hidden + hidden * out_channels + out_channels
    return conv + bn + se


def _residual_params(channels):
    return 2 * (channels * channels * 9 + channels + 2 * channels)


def param_count(config: ResUnetConfig) -> int:
    """Exact trainable-parameter total, computed from the layer specs."""
    c1 = config.base_channels
    c2, c3 = 2 * c1, 4 * c1
    r = config.se_reduction
    total = _se_conv_params(7, 1, c1, r)
    total += _se_conv_params(3, c1, c2, r)
    total += _se_conv_params(3, c2, c3, r)
    total += config.residual_blocks * _residual_params(c3)
    total += _se_conv_params(3, c3, c2, r)
    total += _se_conv_params(3, c2, c1, r)
    total += _se_conv_params(7, c1, c1, r)
    total += c1 * config.n_mels * config.embed_dim + config.embed_dim
    return total


# --- checkpoint I/O ---

_CKPT_MAGIC = b"RUN1"
_CKPT_VERSION = 1


def _checkpoint_tensors(network: ResUnet):
    for name, tensor in network.state_dict().items():
        if name.endswith("num_batches_tracked"):
            continue
        yield name, tensor


def save_checkpoint(network: ResUnet, path) -> None:
    cfg = network.config
    parts = [
        _CKPT_MAGIC,
        struct.pack("<H", _CKPT_VERSION),
        struct.pack("<IIII", cfg.residual_blocks, cfg.base_channels,
                    cfg.embed_dim, cfg.se_reduction),
    ]
    for name, tensor in _checkpoint_tensors(network):
        raw_name = name.encode("utf-8")
        values = tensor.detach().numpy().astype("<f4")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<B", values.ndim))
        parts.append(struct.pack(f"<{values.ndim}I", *values.shape))
        parts.append(values.tobytes())
    try:
        Path(path).write_bytes(b"".join(parts))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_checkpoint(path, config: ResUnetConfig) -> ResUnet:
    data = _read_bytes(path)
    if len(data) < 22 or data[:4] != _CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic or truncated header")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != _CKPT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    depth, base_channels, embed_dim, se_reduction = struct.unpack_from("<IIII", data, 6)
    stored = (depth, base_channels, embed_dim, se_reduction)
    wanted = (config.residual_blocks, config.base_channels,
              config.embed_dim, config.se_reduction)
    if stored != wanted:
        raise CheckpointMismatch(f"{path}: checkpoint config {stored} != requested {wanted}")

    offset = 22
    tensors: dict[str, np.ndarray] = {}
    while offset < len(data):
        if offset + 2 > len(data):
            raise CorruptFile(f"{path}: truncated tensor header")
        (name_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        if offset + name_len + 1 > len(data):
            raise CorruptFile(f"{path}: truncated tensor name")
        name = data[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<B", data, offset)
        offset += 1
        if offset + 4 * rank > len(data):
            raise CorruptFile(f"{path}: truncated tensor dims")
        shape = struct.unpack_from(f"<{rank}I", data, offset)
        offset += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        if offset + 4 * count > len(data):
            raise CorruptFile(f"{path}: truncated tensor values for {name!r}")
        values = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
        offset += 4 * count
        tensors[name] = values.reshape(shape).copy()

    network = build(config, seed=0)
    expected = {name: tuple(t.shape) for name, t in _checkpoint_tensors(network)}
    if set(tensors) != set(expected):
        raise CheckpointMismatch(f"{path}: tensor names do not match the config")
    state = network.state_dict()
    with torch.no_grad():
        for name, values in tensors.items():
            if tuple(values.shape) != expected[name]:
                raise CheckpointMismatch(
                    f"{path}: {name!r} has shape {values.shape}, expected {expected[name]}"
                )
            state[name].copy_(torch.from_numpy(values))
    network.eval()
    return network
