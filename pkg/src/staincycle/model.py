"""Generator (ResNet trunk, interpolation upsampling, optional self-attention,
dual RGB+edge heads) and the patch discriminator, plus checkpoint I/O."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

ATTENTION_MODES = ("none", "decoder_only", "encoder_and_decoder")


@dataclass
class AttentionConfig:
    key_channels_divisor: int = 8  # key/query channels = max(1, C // divisor)
    gamma_init: float = 0.0


@dataclass
class GeneratorConfig:
    image_size: int = 128
    base_channels: int = 64
    n_downsample: int = 2
    n_res_blocks: int = 6
    attention_mode: str = "decoder_only"
    use_structure_channel: bool = True
    attention: AttentionConfig = field(default_factory=AttentionConfig)

    def __post_init__(self) -> None:
        if self.attention_mode not in ATTENTION_MODES:
            raise ValueError(f"attention_mode must be one of {ATTENTION_MODES}")
        if self.image_size % (2 ** self.n_downsample) != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by 2^{self.n_downsample}")
        if self.base_channels < 8:
            raise ValueError("base_channels must be >= 8")
        if isinstance(self.attention, dict):
            self.attention = AttentionConfig(**self.attention)

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "base_channels": self.base_channels,
            "n_downsample": self.n_downsample,
            "n_res_blocks": self.n_res_blocks,
            "attention_mode": self.attention_mode,
            "use_structure_channel": self.use_structure_channel,
            "attention": {
                "key_channels_divisor": self.attention.key_channels_divisor,
                "gamma_init": self.attention.gamma_init,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        return cls(**d)


@dataclass
class DiscriminatorConfig:
    base_channels: int = 64
    n_layers: int = 3

    def __post_init__(self) -> None:
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")

    def to_dict(self) -> dict:
        return {"base_channels": self.base_channels, "n_layers": self.n_layers}

    @classmethod
    def from_dict(cls, d: dict) -> "DiscriminatorConfig":
        return cls(**d)


class SelfAttention2d(nn.Module):
    """Dot-product spatial self-attention with a learnable residual gain.

    With gamma = 0 (the init default) the block is an exact identity map.
    """

    def __init__(self, channels: int, key_channels: int, gamma_init: float = 0.0):
        super().__init__()
        self.query = nn.Conv2d(channels, key_channels, 1)
        self.key = nn.Conv2d(channels, key_channels, 1)
        self.value = nn.Conv2d(channels, channels, 1)
        self.gamma = nn.Parameter(torch.full((), float(gamma_init)))

    def attention_weights(self, x: torch.Tensor) -> torch.Tensor:
        b, _, h, w = x.shape
        q = self.query(x).flatten(2)          # B x K x N
        k = self.key(x).flatten(2)            # B x K x N
        energy = torch.bmm(q.transpose(1, 2), k)  # B x N x N, rows indexed by query position
        return F.softmax(energy, dim=-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        # B x 1 x N x K query/key, B x 1 x N x C value; zero-padding q and k up
        # to the value width leaves q^T k unchanged but satisfies the fused
        # kernel's equal-head-dim requirement, avoiding the N x N matrix
        q = self.query(x).flatten(2).transpose(1, 2).unsqueeze(1)
        k = self.key(x).flatten(2).transpose(1, 2).unsqueeze(1)
        v = self.value(x).flatten(2).transpose(1, 2).unsqueeze(1).contiguous()
        pad = v.shape[-1] - q.shape[-1]
        if pad:
            q = F.pad(q, (0, pad))
            k = F.pad(k, (0, pad))
        else:
            q = q.contiguous()
            k = k.contiguous()
        out = F.scaled_dot_product_attention(q, k, v, scale=1.0)
        out = out.squeeze(1).transpose(1, 2).view(b, c, h, w)
        return x + self.gamma * out


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(channels, affine=True),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(channels, affine=True),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.block(x)


def _attention_block(channels: int, cfg: AttentionConfig) -> SelfAttention2d:
    key_channels = max(1, channels // cfg.key_channels_divisor)
    return SelfAttention2d(channels, key_channels, cfg.gamma_init)


class Generator(nn.Module):
    """4-channel input (RGB in [-1,1] + edge channel in [0,1]); outputs an RGB
    image via tanh and an edge map via sigmoid.

    When use_structure_channel is false the edge input channel is ignored but
    the edge head is still produced.
    """

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        c = config.base_channels
        in_ch = 4 if config.use_structure_channel else 3

        self.stem = nn.Sequential(
            nn.Conv2d(in_ch, c, 7, padding=3, padding_mode="reflect"),
            nn.InstanceNorm2d(c, affine=True),
            nn.ReLU(inplace=True),
        )
        self.encoder = nn.ModuleList()
        self.encoder_attn = nn.ModuleDict()
        ch = c
        for i in range(config.n_downsample):
            self.encoder.append(nn.Sequential(
                nn.Conv2d(ch, ch * 2, 3, stride=2, padding=1),
                nn.InstanceNorm2d(ch * 2, affine=True),
                nn.ReLU(inplace=True),
            ))
            ch *= 2
            if config.attention_mode == "encoder_and_decoder":
                self.encoder_attn[str(i)] = _attention_block(ch, config.attention)

        self.trunk = nn.Sequential(*[ResidualBlock(ch) for _ in range(config.n_res_blocks)])

        self.decoder = nn.ModuleList()
        self.decoder_attn = nn.ModuleDict()
        for i in range(config.n_downsample):
            # interpolation upsampling + conv, never a transposed convolution
            self.decoder.append(nn.Sequential(
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(ch, ch // 2, 3, padding=1, padding_mode="reflect"),
                nn.InstanceNorm2d(ch // 2, affine=True),
                nn.ReLU(inplace=True),
            ))
            ch //= 2
            if config.attention_mode in ("decoder_only", "encoder_and_decoder"):
                self.decoder_attn[str(i)] = _attention_block(ch, config.attention)

        self.rgb_head = nn.Conv2d(ch, 3, 7, padding=3, padding_mode="reflect")
        self.edge_head = nn.Conv2d(ch, 1, 7, padding=3, padding_mode="reflect")

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if x.dim() != 4 or x.shape[1] != 4:
            raise ValueError(f"expected Bx4xHxW input, got {tuple(x.shape)}")
        if x.shape[2] != self.config.image_size or x.shape[3] != self.config.image_size:
            raise ValueError(
                f"expected spatial size {self.config.image_size}, got {tuple(x.shape[2:])}")
        if not self.config.use_structure_channel:
            x = x[:, :3]
        h = self.stem(x)
        for i, stage in enumerate(self.encoder):
            h = stage(h)
            if str(i) in self.encoder_attn:
                h = self.encoder_attn[str(i)](h)
        h = self.trunk(h)
        for i, stage in enumerate(self.decoder):
            h = stage(h)
            if str(i) in self.decoder_attn:
                h = self.decoder_attn[str(i)](h)
        rgb = torch.tanh(self.rgb_head(h))
        edge = torch.sigmoid(self.edge_head(h))
        return rgb, edge


class PatchDiscriminator(nn.Module):
    """Stride-2 4x4 conv stack followed by two stride-1 4x4 convs to a 1-channel
    score map; each score sees only a local receptive field."""

    def __init__(self, config: DiscriminatorConfig):
        super().__init__()
        self.config = config
        c = config.base_channels
        layers: list[nn.Module] = [
            nn.Conv2d(3, c, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
        ]
        ch = c
        for i in range(1, config.n_layers):
            out = c * min(2 ** i, 8)
            layers += [
                nn.Conv2d(ch, out, 4, stride=2, padding=1),
                nn.InstanceNorm2d(out, affine=True),
                nn.LeakyReLU(0.2, inplace=True),
            ]
            ch = out
        out = c * min(2 ** config.n_layers, 8)
        layers += [
            nn.Conv2d(ch, out, 4, stride=1, padding=1),
            nn.InstanceNorm2d(out, affine=True),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(out, 1, 4, stride=1, padding=1),
        ]
        self.net = nn.Sequential(*layers)

    def output_size(self, size: int) -> int:
        """Spatial output size from the layer arithmetic of the conv stack."""
        n = size
        for _ in range(self.config.n_layers):
            n = (n + 2 - 4) // 2 + 1
        for _ in range(2):
            n = n + 2 - 4 + 1
        return n

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != 3:
            raise ValueError(f"expected Bx3xHxW input, got {tuple(x.shape)}")
        if self.output_size(min(x.shape[2], x.shape[3])) < 1:
            raise ValueError(f"input {tuple(x.shape[2:])} smaller than receptive-field minimum")
        return self.net(x)


def _init_parameters(module: nn.Module, seed: int, gamma_init: float = 0.0) -> None:
    g = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=g) * 0.02)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.InstanceNorm2d) and m.affine:
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()
        elif isinstance(m, SelfAttention2d):
            with torch.no_grad():
                m.gamma.fill_(gamma_init)


def init_generator(config: GeneratorConfig, seed: int) -> Generator:
    """Build a generator with deterministic N(0, 0.02^2) conv init."""
    gen = Generator(config)
    _init_parameters(gen, seed, config.attention.gamma_init)
    return gen


def init_discriminator(config: DiscriminatorConfig, seed: int) -> PatchDiscriminator:
    disc = PatchDiscriminator(config)
    _init_parameters(disc, seed)
    return disc


def strip_attention(gen: Generator) -> Generator:
    """Copy of `gen` with attention blocks removed; shared weights are identical."""
    cfg = GeneratorConfig.from_dict(gen.config.to_dict())
    cfg.attention_mode = "none"
    plain = Generator(cfg)
    own = plain.state_dict()
    src = {k: v for k, v in gen.state_dict().items() if k in own}
    own.update(src)
    plain.load_state_dict(own)
    return plain


def check_finite(module: nn.Module, name: str) -> None:
    for pname, p in module.named_parameters():
        if not torch.isfinite(p).all():
            raise FloatingPointError(f"non-finite parameter {name}.{pname}")


# --------------------------------------------------------------------------- #
# Checkpoint format: directory with index.json + blob.bin (concatenated
# little-endian float32 tensor data in index order).
# --------------------------------------------------------------------------- #

def state_dict_to_arrays(module: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().astype("<f4") for k, v in module.state_dict().items()}


def save_checkpoint(path: str | Path, config: dict, tensors: dict[str, np.ndarray]) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    index = {"format_version": 1, "config": config, "tensors": []}
    offset = 0
    blobs = []
    for name in tensors:
        arr = np.asarray(tensors[name], dtype="<f4")
        raw = arr.tobytes()  # tobytes always emits C order
        index["tensors"].append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": "f32",
            "offset": offset,
            "length": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    tmp = out / "blob.bin.tmp"
    tmp.write_bytes(b"".join(blobs))
    tmp.rename(out / "blob.bin")
    tmp_idx = out / "index.json.tmp"
    tmp_idx.write_text(json.dumps(index, sort_keys=True, separators=(",", ":")))
    tmp_idx.rename(out / "index.json")
    return out


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    index = json.loads((path / "index.json").read_text())
    if index.get("format_version") != 1:
        raise ValueError(f"unsupported checkpoint format version {index.get('format_version')}")
    blob = (path / "blob.bin").read_bytes()
    tensors = {}
    for rec in index["tensors"]:
        raw = blob[rec["offset"]:rec["offset"] + rec["length"]]
        tensors[rec["name"]] = np.frombuffer(raw, dtype="<f4").reshape(rec["shape"]).copy()
    return index["config"], tensors


def load_module_arrays(module: nn.Module, tensors: dict[str, np.ndarray], prefix: str) -> None:
    """Load tensors whose names start with `prefix` into `module`."""
    wanted = module.state_dict()
    state = {}
    for k, p in wanted.items():
        full = prefix + k
        if full not in tensors:
            raise KeyError(f"checkpoint missing tensor {full}")
        state[k] = torch.from_numpy(tensors[full].copy()).to(dtype=p.dtype)
    module.load_state_dict(state)
