"""Network definitions and checkpoint serialization.

Two generators and two patch discriminators make up the pipeline:

* GeneratorG1: U-Net encoder-decoder emitting the perturbed image I_s.
* GeneratorG2: convolutional stem plus MobileViT-style blocks with a
  zero-initialized residual head, so a fresh G2 is the exact identity.
* PatchDiscriminator: PatchGAN-style score map, conditional (6ch) or not (3ch).

Normalization is InstanceNorm with affine weights and no running stats:
forward passes are then independent of train/eval mode and the parameter
set fully determines behavior, which keeps freeze digests and warm-start
checks bit-exact.

Checkpoints are a self-describing container: magic, JSON header (stage tag,
architecture, digest, metadata, parameter index), raw little-endian blob.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import imaging

STAGE_TAGS = ("FDN_G1", "FDN_D1", "VEN_G2", "VEN_D2", "DETECTOR")

_MAGIC = b"SMCKPT01"


def _norm(ch: int) -> nn.Module:
    return nn.InstanceNorm2d(ch, affine=True, track_running_stats=False)


# ---------------------------------------------------------------------------
# G1: U-Net


class GeneratorG1(nn.Module):
    """Encoder-decoder with skip connections; sigmoid output in [0,1]."""

    def __init__(self, base_channels: int = 16, depth: int = 2,
                 input_channels: int = 3, output_channels: int = 3):
        super().__init__()
        if depth < 1:
            raise ValueError(f"depth must be >= 1, got {depth}")
        self.base_channels = base_channels
        self.depth = depth
        self.input_channels = input_channels
        self.output_channels = output_channels

        enc = [min(base_channels * 2**i, base_channels * 8) for i in range(depth)]
        downs = []
        c_in = input_channels
        for i, c_out in enumerate(enc):
            block = [nn.Conv2d(c_in, c_out, 4, stride=2, padding=1)]
            if i > 0:
                block.append(_norm(c_out))
            block.append(nn.LeakyReLU(0.2, inplace=True))
            downs.append(nn.Sequential(*block))
            c_in = c_out
        self.downs = nn.ModuleList(downs)

        ups = []
        for i in range(depth):
            lvl = depth - 1 - i
            c_out = enc[lvl - 1] if lvl > 0 else base_channels
            c_up_in = enc[-1] if i == 0 else enc[lvl] * 2
            ups.append(
                nn.Sequential(
                    nn.ConvTranspose2d(c_up_in, c_out, 4, stride=2, padding=1),
                    _norm(c_out),
                    nn.ReLU(inplace=True),
                )
            )
        self.ups = nn.ModuleList(ups)
        self.head = nn.Conv2d(base_channels, output_channels, 3, padding=1)

    def arch_config(self) -> dict:
        return {
            "kind": "unet_g1",
            "base_channels": self.base_channels,
            "depth": self.depth,
            "input_channels": self.input_channels,
            "output_channels": self.output_channels,
        }

    def forward(self, x):
        if x.shape[1] != self.input_channels:
            raise ValueError(f"expected {self.input_channels} channels, got {x.shape[1]}")
        if x.shape[2] % 2**self.depth or x.shape[3] % 2**self.depth:
            raise ValueError(
                f"spatial size {tuple(x.shape[2:])} not divisible by 2**depth = {2**self.depth}"
            )
        skips = []
        h = x
        for down in self.downs:
            h = down(h)
            skips.append(h)
        skips.pop()  # innermost features feed the decoder directly
        for up in self.ups:
            h = up(h)
            if skips:
                h = torch.cat([h, skips.pop()], dim=1)
        return torch.sigmoid(self.head(h))


# ---------------------------------------------------------------------------
# G2: MobileViT-style refiner, identity at init


class _SelfAttention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        if dim % n_heads:
            raise ValueError(f"embed_dim {dim} not divisible by n_heads {n_heads}")
        self.n_heads = n_heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.n_heads, d // self.n_heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        out = F.scaled_dot_product_attention(q, k, v)
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class _TransformerLayer(nn.Module):
    def __init__(self, dim: int, n_heads: int, mlp_ratio: float = 2.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = _SelfAttention(dim, n_heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.SiLU(), nn.Linear(hidden, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def attention_token_count(height: int, width: int, patch_size: int) -> int:
    """Tokens per attention group after the non-overlapping unfold."""
    ph = -(-height // patch_size) * patch_size
    pw = -(-width // patch_size) * patch_size
    return (ph // patch_size) * (pw // patch_size)


class MobileViTBlock(nn.Module):
    """Local conv -> patch unfold -> transformer over patch tokens -> fold -> fuse."""

    def __init__(self, channels: int, embed_dim: int, patch_size: int,
                 n_layers: int = 2, n_heads: int = 4):
        super().__init__()
        self.patch_size = patch_size
        self.local = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1), _norm(channels), nn.SiLU(inplace=True),
            nn.Conv2d(channels, embed_dim, 1),
        )
        self.layers = nn.ModuleList(_TransformerLayer(embed_dim, n_heads) for _ in range(n_layers))
        self.post_norm = nn.LayerNorm(embed_dim)
        self.proj = nn.Sequential(nn.Conv2d(embed_dim, channels, 1), _norm(channels), nn.SiLU(inplace=True))
        self.fuse = nn.Sequential(
            nn.Conv2d(channels * 2, channels, 3, padding=1), _norm(channels), nn.SiLU(inplace=True)
        )

    def forward(self, x):
        b, _, h, w = x.shape
        p = self.patch_size
        z = self.local(x)

        pad_h = (-h) % p
        pad_w = (-w) % p
        if pad_h or pad_w:
            z = F.pad(z, (0, pad_w, 0, pad_h), mode="reflect")
        e, hp, wp = z.shape[1], z.shape[2], z.shape[3]

        # group tokens by intra-patch position; attention runs across patches
        z = z.reshape(b, e, hp // p, p, wp // p, p)
        z = z.permute(0, 3, 5, 2, 4, 1).reshape(b * p * p, (hp // p) * (wp // p), e)
        for layer in self.layers:
            z = layer(z)
        z = self.post_norm(z)
        z = z.reshape(b, p, p, hp // p, wp // p, e)
        z = z.permute(0, 5, 3, 1, 4, 2).reshape(b, e, hp, wp)
        if pad_h or pad_w:
            z = z[:, :, :h, :w]

        return self.fuse(torch.cat([x, self.proj(z)], dim=1))


class GeneratorG2(nn.Module):
    """Refiner applied before G1; exact identity when freshly initialized."""

    def __init__(self, n_blocks: int = 1, patch_size: int = 2,
                 embed_dim: int = 48, base_channels: int = 16):
        super().__init__()
        self.n_blocks = n_blocks
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.base_channels = base_channels

        self.stem = nn.Sequential(
            nn.Conv2d(3, base_channels, 3, padding=1), _norm(base_channels), nn.SiLU(inplace=True)
        )
        self.blocks = nn.ModuleList(
            MobileViTBlock(base_channels, embed_dim, patch_size) for _ in range(n_blocks)
        )
        self.head = nn.Conv2d(base_channels, 3, 3, padding=1)
        # zero residual head: forward(x) == x at init, bit-exact
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def arch_config(self) -> dict:
        return {
            "kind": "mobilevit_g2",
            "n_blocks": self.n_blocks,
            "patch_size": self.patch_size,
            "embed_dim": self.embed_dim,
            "base_channels": self.base_channels,
        }

    def forward(self, x):
        if x.shape[1] != 3:
            raise ValueError(f"expected 3 channels, got {x.shape[1]}")
        h = self.stem(x)
        for block in self.blocks:
            h = block(h)
        return torch.clamp(x + torch.tanh(self.head(h)), 0.0, 1.0)


# ---------------------------------------------------------------------------
# discriminators


class PatchDiscriminator(nn.Module):
    """Convolutional classifier emitting a sigmoid score per receptive patch."""

    def __init__(self, in_channels: int = 6, base_channels: int = 16, n_layers: int = 3):
        super().__init__()
        if n_layers < 1:
            raise ValueError(f"n_layers must be >= 1, got {n_layers}")
        self.in_channels = in_channels
        self.base_channels = base_channels
        self.n_layers = n_layers

        seq = [nn.Conv2d(in_channels, base_channels, 4, stride=2, padding=1),
               nn.LeakyReLU(0.2, inplace=True)]
        mult = 1
        for n in range(1, n_layers):
            prev, mult = mult, min(2**n, 8)
            seq += [nn.Conv2d(base_channels * prev, base_channels * mult, 4, stride=2, padding=1),
                    _norm(base_channels * mult), nn.LeakyReLU(0.2, inplace=True)]
        prev, mult = mult, min(2**n_layers, 8)
        seq += [nn.Conv2d(base_channels * prev, base_channels * mult, 4, stride=1, padding=1),
                _norm(base_channels * mult), nn.LeakyReLU(0.2, inplace=True),
                nn.Conv2d(base_channels * mult, 1, 4, stride=1, padding=1)]
        self.net = nn.Sequential(*seq)

    def arch_config(self) -> dict:
        return {
            "kind": "patch_disc",
            "in_channels": self.in_channels,
            "base_channels": self.base_channels,
            "n_layers": self.n_layers,
        }

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} channels, got {x.shape[1]}")
        return torch.sigmoid(self.net(x))


# ---------------------------------------------------------------------------
# inference wrappers over numpy image batches


def _to_tensor(batch: np.ndarray, name: str) -> torch.Tensor:
    arr = imaging.validate_batch(batch, name)
    return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))


def g1_forward(g1: GeneratorG1, fake: np.ndarray) -> np.ndarray:
    """I_s for a fake batch; pure inference, deterministic."""
    x = _to_tensor(fake, "fake")
    with torch.no_grad():
        out = g1.eval()(x)
    return out.numpy()


def g2_forward(g2: GeneratorG2, fake: np.ndarray) -> np.ndarray:
    x = _to_tensor(fake, "fake")
    with torch.no_grad():
        out = g2.eval()(x)
    return out.numpy()


def d1_forward(d1: PatchDiscriminator, fake: np.ndarray, candidate: np.ndarray) -> np.ndarray:
    """Patch scores for the channel-concatenated pair (fake first)."""
    xf = _to_tensor(fake, "fake")
    xc = _to_tensor(candidate, "candidate")
    if xf.shape != xc.shape:
        raise ValueError(f"shape mismatch: fake {tuple(xf.shape)} vs candidate {tuple(xc.shape)}")
    with torch.no_grad():
        out = d1.eval()(torch.cat([xf, xc], dim=1))
    return out.numpy()


# ---------------------------------------------------------------------------
# checkpoint container

_ARCH_REGISTRY = {
    "unet_g1": GeneratorG1,
    "mobilevit_g2": GeneratorG2,
    "patch_disc": PatchDiscriminator,
}


def register_arch(kind: str, cls) -> None:
    """Hook for architectures defined outside this module (detector zoo)."""
    _ARCH_REGISTRY[kind] = cls


def parameter_digest(module: nn.Module) -> str:
    """SHA-256 over canonicalized parameters, iteration order sorted by name."""
    h = hashlib.sha256()
    state = module.state_dict()
    for name in sorted(state):
        t = state[name].detach().cpu().contiguous()
        arr = t.numpy()
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(json.dumps(list(arr.shape)).encode())
        h.update(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    return h.hexdigest()


@dataclass
class StageCheckpoint:
    stage: str
    arch: dict
    digest: str
    metadata: dict = field(default_factory=dict)
    state: dict = field(default_factory=dict)  # name -> np.ndarray

    def __post_init__(self):
        if self.stage not in STAGE_TAGS:
            raise ValueError(f"unknown stage tag {self.stage!r}, expected one of {STAGE_TAGS}")

    def build(self) -> nn.Module:
        """Instantiate the architecture and load the stored parameters."""
        arch = dict(self.arch)
        kind = arch.pop("kind")
        if kind not in _ARCH_REGISTRY:
            raise ValueError(f"unknown architecture kind {kind!r}")
        module = _ARCH_REGISTRY[kind](**arch)
        tensors = {k: torch.from_numpy(v.copy()) for k, v in self.state.items()}
        module.load_state_dict(tensors)
        if parameter_digest(module) != self.digest:
            raise ValueError("digest mismatch after loading parameters into module")
        return module


def save_checkpoint(path, module: nn.Module, stage: str, metadata: dict | None = None) -> StageCheckpoint:
    if stage not in STAGE_TAGS:
        raise ValueError(f"unknown stage tag {stage!r}, expected one of {STAGE_TAGS}")
    if not hasattr(module, "arch_config"):
        raise TypeError(f"{type(module).__name__} has no arch_config(); cannot checkpoint")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    state = module.state_dict()
    index = []
    blobs = []
    offset = 0
    for name in sorted(state):
        arr = state[name].detach().cpu().contiguous().numpy()
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        index.append({
            "name": name,
            "dtype": str(arr.dtype),
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)

    digest = parameter_digest(module)
    header = {
        "stage": stage,
        "arch": module.arch_config(),
        "digest": digest,
        "metadata": metadata or {},
        "params": index,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for raw in blobs:
            fh.write(raw)
    return StageCheckpoint(
        stage=stage, arch=header["arch"], digest=digest, metadata=header["metadata"],
        state={e["name"]: state[e["name"]].detach().cpu().contiguous().numpy().copy() for e in index},
    )


def load_checkpoint(path, expected_stage: str | None = None) -> StageCheckpoint:
    """Read a checkpoint, verify its digest, optionally enforce the stage tag."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        blob = fh.read()

    stage = header["stage"]
    if expected_stage is not None and stage != expected_stage:
        raise ValueError(f"{path}: stage tag {stage!r} does not match expected {expected_stage!r}")

    state = {}
    h = hashlib.sha256()
    for entry in header["params"]:
        start, n = entry["offset"], entry["nbytes"]
        arr = np.frombuffer(blob[start:start + n], dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
        state[entry["name"]] = arr
        h.update(entry["name"].encode())
        h.update(str(arr.dtype).encode())
        h.update(json.dumps(list(arr.shape)).encode())
        h.update(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    if h.hexdigest() != header["digest"]:
        raise ValueError(f"{path}: parameter digest mismatch; file corrupt or tampered")
    return StageCheckpoint(
        stage=stage, arch=header["arch"], digest=header["digest"],
        metadata=header["metadata"], state=state,
    )
