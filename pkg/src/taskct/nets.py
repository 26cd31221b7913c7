"""U-Net-shaped encoder-decoder networks and checkpoint persistence.

Both variants share one backbone builder; they differ only in output channels
and head (sigmoid squash for reconstruction, per-class softmax for
segmentation). Normalization is GroupNorm so behavior does not depend on
batch size, upsampling is bilinear (no transposed convolutions), and all
convolutions are padded so skip connections concatenate without cropping.
"""

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .errors import CheckpointError, ConfigurationError, UsageError

HEADS = ("unit_squash", "class_probs")
CKPT_MAGIC = b"TCKPT1\n"


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 3
    base_channels: int = 16
    in_channels: int = 1
    out_channels: int = 1
    head: str = "unit_squash"

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigurationError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1:
            raise ConfigurationError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.head not in HEADS:
            raise ConfigurationError(f"head must be one of {HEADS}, got {self.head!r}")
        expected = 1 if self.head == "unit_squash" else 3
        if self.out_channels != expected:
            raise ConfigurationError(
                f"head {self.head!r} requires out_channels={expected}, got {self.out_channels}"
            )

    def to_dict(self):
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _gn_groups(channels):
    for g in (8, 4, 2, 1):
        if channels % g == 0:
            return g
    return 1


class DoubleConv(nn.Module):
    def __init__(self, c_in, c_out):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(c_in, c_out, 3, padding=1),
            nn.GroupNorm(_gn_groups(c_out), c_out),
            nn.ReLU(inplace=True),
            nn.Conv2d(c_out, c_out, 3, padding=1),
            nn.GroupNorm(_gn_groups(c_out), c_out),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.block(x)


class UNet(nn.Module):
    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = config
        ch = [config.base_channels * (2**i) for i in range(config.depth + 1)]
        self.stem = DoubleConv(config.in_channels, ch[0])
        self.downs = nn.ModuleList(DoubleConv(ch[i], ch[i + 1]) for i in range(config.depth))
        self.pool = nn.MaxPool2d(2)
        self.up = nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False)
        self.ups = nn.ModuleList(
            DoubleConv(ch[i + 1] + ch[i], ch[i]) for i in reversed(range(config.depth))
        )
        self.out_conv = nn.Conv2d(ch[0], config.out_channels, 1)

    def forward(self, x):
        h, w = x.shape[-2], x.shape[-1]
        div = 2**self.config.depth
        if h % div or w % div:
            raise ConfigurationError(
                f"input {h}x{w} not divisible by 2^depth={div}; pick another depth"
            )
        skips = [self.stem(x)]
        for down in self.downs:
            skips.append(down(self.pool(skips[-1])))
        y = skips.pop()
        for up in self.ups:
            y = up(torch.cat([self.up(y), skips.pop()], dim=1))
        logits = self.out_conv(y)
        if self.config.head == "unit_squash":
            return torch.sigmoid(logits)
        return torch.softmax(logits, dim=1)


@dataclass
class ModelHandle:
    module: nn.Module
    config: UNetConfig
    frozen: bool = False
    init_seed: int = 0
    step: int = 0
    loss_digest: str = ""

    @property
    def parameters(self):
        """Flat list of (name, tensor) pairs in sorted-name order."""
        return sorted(self.module.state_dict().items())

    def freeze(self):
        for p in self.module.parameters():
            p.requires_grad_(False)
        self.module.eval()
        self.frozen = True
        return self

    def parameter_bytes(self):
        """Concatenated raw bytes of all parameters; used by freeze tests."""
        return b"".join(
            t.detach().cpu().contiguous().numpy().tobytes() for _, t in self.parameters
        )


def build_model(config: UNetConfig, init_seed: int) -> ModelHandle:
    """Construct a deterministically initialized network."""
    torch.manual_seed(init_seed)
    module = UNet(config)
    module.eval()
    return ModelHandle(module=module, config=config, init_seed=int(init_seed))


def _apply(image, module):
    """Run the network on (H,W), (B,H,W) or (B,1,H,W) input.

    Returns (batched output, input rank, numpy flag). Numpy input runs under
    no_grad and converts back; torch input keeps the autograd graph.
    """
    to_numpy = not torch.is_tensor(image)
    x = torch.as_tensor(np.asarray(image, dtype=np.float32)) if to_numpy else image
    rank = x.dim()
    if rank == 2:
        x = x[None, None]
    elif rank == 3:
        x = x[:, None]
    elif rank != 4:
        raise UsageError(f"expected 2-4 dims, got shape {tuple(x.shape)}")
    if to_numpy:
        with torch.no_grad():
            y = module(x)
    else:
        y = module(x)
    return y, rank, to_numpy


def reconstruct(model: ModelHandle, low_dose):
    """Apply a unit_squash network; output lies strictly inside (0, 1).

    Torch input keeps the autograd graph; numpy input returns numpy.
    """
    if model.config.head != "unit_squash":
        raise UsageError("reconstruct requires a unit_squash head")
    y, rank, to_numpy = _apply(low_dose, model.module)
    if rank == 2:
        y = y[0, 0]
    elif rank == 3:
        y = y[:, 0]
    if to_numpy:
        return y.numpy().astype(np.float32)
    return y


def segment(model: ModelHandle, image):
    """Apply a class_probs network; per-pixel probabilities sum to 1."""
    if model.config.head != "class_probs":
        raise UsageError("segment requires a class_probs head")
    y, rank, to_numpy = _apply(image, model.module)
    if rank == 2:
        y = y[0]
    if to_numpy:
        return y.numpy().astype(np.float32)
    return y


# ---------------------------------------------------------------------------
# checkpoints: MAGIC | uint64 header length | JSON header | raw tensor bytes

def loss_curve_digest(curve):
    return hashlib.sha256(json.dumps(curve, sort_keys=True).encode("utf-8")).hexdigest()


def save_checkpoint(model: ModelHandle, path):
    tensors = []
    payload = bytearray()
    for name, tensor in model.parameters:
        raw = tensor.detach().cpu().contiguous().numpy()
        if raw.dtype != np.float32:
            raw = raw.astype(np.float32)
        blob = raw.tobytes()
        tensors.append({
            "name": name,
            "shape": list(raw.shape),
            "dtype": "<f4",
            "offset": len(payload),
            "nbytes": len(blob),
        })
        payload.extend(blob)
    header = {
        "format": "taskct-ckpt-1",
        "config": model.config.to_dict(),
        "init_seed": model.init_seed,
        "step": model.step,
        "loss_digest": model.loss_digest,
        "tensors": tensors,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(bytes(payload))


def load_checkpoint(path) -> ModelHandle:
    try:
        with open(path, "rb") as fh:
            magic = fh.read(len(CKPT_MAGIC))
            if magic != CKPT_MAGIC:
                raise CheckpointError(f"{path}: not a taskct checkpoint")
            (hlen,) = struct.unpack("<Q", fh.read(8))
            try:
                header = json.loads(fh.read(hlen).decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise CheckpointError(f"{path}: bad checkpoint header: {exc}") from exc
            payload = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    if header.get("format") != "taskct-ckpt-1":
        raise CheckpointError(f"{path}: unsupported checkpoint format")
    config = UNetConfig.from_dict(header["config"])
    model = build_model(config, int(header.get("init_seed", 0)))
    state = {}
    for spec in header["tensors"]:
        start, n = spec["offset"], spec["nbytes"]
        if start + n > len(payload):
            raise CheckpointError(f"{path}: tensor {spec['name']} overruns payload")
        arr = np.frombuffer(payload[start:start + n], dtype=np.dtype(spec["dtype"]))
        state[spec["name"]] = torch.as_tensor(arr.reshape(spec["shape"]).copy())
    try:
        model.module.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: state does not fit config: {exc}") from exc
    model.step = int(header.get("step", 0))
    model.loss_digest = header.get("loss_digest", "")
    return model
