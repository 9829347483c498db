"""The DeepNose network: orientation-parallel 3D CNN, consolidation, MLP head.

Voxel input ``[B, O, 6, L, L, L]`` is folded to ``[B*O, 6, L, L, L]`` so all
orientations share weights. Four conv blocks (two conv-bn-relu layers each,
max pooling between blocks) and a final 2x2x2 average pool reduce every
orientation to ``n_features`` numbers; these are unfolded and averaged over
orientations to give the molecule's feature vector. A dropout + two dense
layers map features to one logit per descriptor.
"""

from __future__ import annotations

import hashlib
import io
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn_core as nn
from .errors import BadMagic, InvalidConfig, IoFailure, ShapeMismatch, VersionMismatch
from .molecule_io import N_CHANNELS, Molecule
from .rotation_grid import RotationGrid
from .voxelizer import VoxelTensor, center_molecule, iter_voxel_slabs

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DeepNoseConfig:
    block_channels: tuple[int, ...] = (12, 24, 48, 96)
    layers_per_block: int = 2
    grid_L: int = 18
    n_elements: int = N_CHANNELS
    hidden: int = 256
    outputs: int = 654
    dropout_rate: float = 0.2
    n_dirs: int = 64
    n_axial: int = 10

    def __post_init__(self):
        object.__setattr__(self, "block_channels", tuple(int(c) for c in self.block_channels))
        if not self.block_channels or min(self.block_channels) < 1:
            raise InvalidConfig("block_channels must be positive")
        if min(self.layers_per_block, self.hidden, self.outputs, self.n_elements) < 1:
            raise InvalidConfig("layer counts must be positive")
        if min(self.grid_L, self.n_dirs, self.n_axial) < 1:
            raise InvalidConfig("grid sizes must be positive")
        if not 0 <= self.dropout_rate < 1:
            raise InvalidConfig(f"dropout_rate {self.dropout_rate} not in [0, 1)")
        size = self.grid_L
        for _ in range(len(self.block_channels) - 1):
            size //= 2
        if size != 2:
            raise InvalidConfig(
                f"grid_L={self.grid_L} does not reduce to 2 under "
                f"{len(self.block_channels) - 1} floor-halvings (got {size})")

    @property
    def n_features(self) -> int:
        return self.block_channels[-1]

    @property
    def n_orientations(self) -> int:
        return self.n_dirs * self.n_axial

    def n_stored_values(self) -> int:
        """Float count of the checkpoint payload for this config (no allocation)."""
        total, in_ch, k = 0, self.n_elements, 27
        for ch in self.block_channels:
            # conv weight + bias, then gamma, beta and two running stats
            total += ch * in_ch * k + 5 * ch + (self.layers_per_block - 1) * (ch * ch * k + 5 * ch)
            in_ch = ch
        return total + (in_ch + 1) * self.hidden + (self.hidden + 1) * self.outputs

    def to_fields(self) -> dict[str, int]:
        out = {"n_blocks": len(self.block_channels)}
        out.update({f"block_channels_{i}": c for i, c in enumerate(self.block_channels)})
        out.update(layers_per_block=self.layers_per_block, grid_L=self.grid_L,
                   n_elements=self.n_elements, hidden=self.hidden, outputs=self.outputs,
                   dropout_ppm=int(round(self.dropout_rate * 1e6)),
                   n_dirs=self.n_dirs, n_axial=self.n_axial)
        return out

    @classmethod
    def from_fields(cls, f: dict[str, int]) -> "DeepNoseConfig":
        try:
            channels = tuple(f[f"block_channels_{i}"] for i in range(f["n_blocks"]))
            return cls(channels, f["layers_per_block"], f["grid_L"], f["n_elements"],
                       f["hidden"], f["outputs"], f["dropout_ppm"] / 1e6, f["n_dirs"], f["n_axial"])
        except KeyError as exc:
            raise InvalidConfig(f"config block lacks field {exc}") from None


class DeepNose:
    """Parameters plus forward passes."""

    def __init__(self, config: DeepNoseConfig = DeepNoseConfig(), seed: int = 0, dtype=np.float32):
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.convs: list[nn.Conv3dLayer] = []
        self.bns: list[nn.BatchNorm3dLayer] = []
        in_ch = config.n_elements
        for ch in config.block_channels:
            for _ in range(config.layers_per_block):
                self.convs.append(nn.Conv3dLayer(in_ch, ch, rng, dtype))
                self.bns.append(nn.BatchNorm3dLayer(ch, dtype=dtype))
                in_ch = ch
        self.fc1 = nn.LinearLayer(config.n_features, config.hidden, rng, dtype)
        self.fc2 = nn.LinearLayer(config.hidden, config.outputs, rng, dtype)

    # -- parameter plumbing -------------------------------------------------

    def named_tensors(self) -> list[tuple[str, np.ndarray]]:
        """Every persisted array in a fixed order (trainable and running stats)."""
        out = []
        for i, (c, b) in enumerate(zip(self.convs, self.bns)):
            out += [(f"conv{i}.weight", c.weight.data), (f"conv{i}.bias", c.bias.data),
                    (f"bn{i}.gamma", b.gamma.data), (f"bn{i}.beta", b.beta.data),
                    (f"bn{i}.running_mean", b.running_mean), (f"bn{i}.running_var", b.running_var)]
        for name, layer in (("fc1", self.fc1), ("fc2", self.fc2)):
            out += [(f"{name}.weight", layer.weight.data), (f"{name}.bias", layer.bias.data)]
        return out

    def parameters(self) -> list[nn.Tensor]:
        params = []
        for c, b in zip(self.convs, self.bns):
            params += c.parameters() + b.parameters()
        return params + self.fc1.parameters() + self.fc2.parameters()

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def astype(self, dtype) -> "DeepNose":
        """Copy with every array cast (float64 for gradient checking)."""
        other = DeepNose.__new__(DeepNose)
        other.config, other.seed = self.config, self.seed
        other.convs, other.bns = [], []
        for c, b in zip(self.convs, self.bns):
            nc = nn.Conv3dLayer.__new__(nn.Conv3dLayer)
            nc.weight = nn.Tensor(c.weight.data.astype(dtype), True)
            nc.bias = nn.Tensor(c.bias.data.astype(dtype), True)
            nb = nn.BatchNorm3dLayer(len(b.running_mean), b.eps, b.momentum, dtype)
            nb.gamma.data[:] = b.gamma.data
            nb.beta.data[:] = b.beta.data
            nb.running_mean[:] = b.running_mean
            nb.running_var[:] = b.running_var
            other.convs.append(nc)
            other.bns.append(nb)
        for name in ("fc1", "fc2"):
            src = getattr(self, name)
            layer = nn.LinearLayer.__new__(nn.LinearLayer)
            layer.weight = nn.Tensor(src.weight.data.astype(dtype), True)
            layer.bias = nn.Tensor(src.bias.data.astype(dtype), True)
            setattr(other, name, layer)
        return other

    @property
    def dtype(self):
        return self.fc1.weight.dtype

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.named_tensors():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return h.hexdigest()[:16]

    # -- forward ----------------------------------------------------------

    def trunk(self, x, mode: str = "eval", block_outputs: list | None = None) -> nn.Tensor:
        """Conv stack on folded input [N, 6, L, L, L] -> [N, n_features, 1, 1, 1]."""
        x = nn.as_tensor(x)
        per = self.config.layers_per_block
        n_blocks = len(self.config.block_channels)
        for blk in range(n_blocks):
            for j in range(per):
                i = blk * per + j
                x = nn.relu(nn.batchnorm3d(nn.conv3d(x, self.convs[i]), self.bns[i], mode))
            if block_outputs is not None:
                block_outputs.append(x.shape)
            if blk < n_blocks - 1:
                x = nn.maxpool3d(x, 2)
        return nn.avgpool3d(x, 2)

    def forward_features(self, vox, mode: str = "eval") -> nn.Tensor:
        """Batch of voxel tensors [B, O, 6, L, L, L] -> features [B, n_features].

        Orientations run as independent streams through the trunk and are
        averaged only at the end.
        """
        if isinstance(vox, VoxelTensor):
            vox = vox.data[None]
        vox = np.asarray(vox, dtype=self.dtype)
        cfg = self.config
        if vox.ndim != 6 or vox.shape[2:] != (cfg.n_elements,) + (cfg.grid_L,) * 3:
            raise ShapeMismatch(
                f"expected voxels [B, O, {cfg.n_elements}, {cfg.grid_L}, {cfg.grid_L}, {cfg.grid_L}], got {vox.shape}")
        b, o = vox.shape[:2]
        folded = vox.reshape((b * o,) + vox.shape[2:])
        emb = self.trunk(folded, mode)
        emb = nn.reshape(emb, (b, o, cfg.n_features))
        return nn.mean(emb, axis=1)

    def forward_logits(self, features, mode: str = "eval", rng=None) -> nn.Tensor:
        features = nn.as_tensor(features)
        if features.data.ndim != 2 or features.shape[1] != self.config.n_features:
            raise ShapeMismatch(f"expected features [N, {self.config.n_features}], got {features.shape}")
        if not np.isfinite(features.data).all():
            raise ValueError("non-finite features")
        h = nn.dropout(features, self.config.dropout_rate, mode, rng)
        h = nn.relu(nn.linear(h, self.fc1))
        return nn.linear(h, self.fc2)

    def __call__(self, vox, mode="eval", rng=None) -> nn.Tensor:
        return self.forward_logits(self.forward_features(vox, mode), mode, rng)

    # -- streaming inference -------------------------------------------------

    def embed_slabs(self, slabs) -> np.ndarray:
        """Eval-mode features from an iterable of orientation slabs of one input.

        Equivalent to ``forward_features`` on the concatenated slabs.
        """
        total = None
        count = 0
        with nn.no_grad():
            for slab in slabs:
                data = slab.data if isinstance(slab, VoxelTensor) else slab
                emb = self.trunk(np.asarray(data, dtype=self.dtype), "eval").data
                s = emb.reshape(len(data), -1).sum(axis=0, dtype=np.float64)
                total = s if total is None else total + s
                count += len(data)
        return (total / count).astype(self.dtype)

    def molecule_features(self, mol: Molecule, grid: RotationGrid, slab: int = 64,
                          center: bool = True) -> np.ndarray:
        """Eval-mode feature vector of one molecule, streamed over orientation slabs."""
        if center:
            mol = center_molecule(mol)
        return self.embed_slabs(iter_voxel_slabs(mol, grid, slab, box=float(self.config.grid_L)))

    def predict_features(self, features: np.ndarray) -> np.ndarray:
        with nn.no_grad():
            return self.forward_logits(np.asarray(features, dtype=self.dtype), "eval").data


def build_model(config: DeepNoseConfig = DeepNoseConfig(), seed: int = 0, dtype=np.float32) -> DeepNose:
    model = DeepNose(config, seed, dtype)
    log.info("DeepNose: %d conv layers %s, %d parameters", len(model.convs),
             [c.out_ch for c in model.convs], model.n_parameters())
    return model


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"DNCKPT"
VERSION = 1


def checkpoint_bytes(model: DeepNose, seed_field: bool = True) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    cfg = model.config.to_fields()
    if seed_field:
        cfg["seed"] = model.seed
    buf.write(struct.pack("<I", len(cfg)))
    for name, value in cfg.items():
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)) + raw + struct.pack("<q", int(value)))
    tensors = model.named_tensors()
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def save_checkpoint(model: DeepNose, path):
    try:
        Path(path).write_bytes(checkpoint_bytes(model))
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint {path}: {exc}") from None


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise ShapeMismatch(f"checkpoint truncated while reading {what}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def checkpoint_from_bytes(raw: bytes, config: DeepNoseConfig | None = None) -> DeepNose:
    if len(raw) < len(MAGIC) or raw[:len(MAGIC)] != MAGIC:
        raise BadMagic("not a DNCKPT checkpoint")
    r = _Reader(raw)
    r.take(len(MAGIC), "magic")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {VERSION}")
    (n_fields,) = r.unpack("<I", "config field count")
    fields_: dict[str, int] = {}
    for _ in range(n_fields):
        (ln,) = r.unpack("<H", "config field name length")
        name = r.take(ln, "config field name").decode("utf-8", errors="replace")
        (fields_[name],) = r.unpack("<q", f"config field {name}")
    stored = DeepNoseConfig.from_fields(fields_)
    # a corrupted size field must not trigger a huge allocation
    if 4 * stored.n_stored_values() > len(raw) - r.pos:
        raise ShapeMismatch(f"config needs {stored.n_stored_values()} stored values; "
                            f"only {len(raw) - r.pos} bytes remain")
    target = config or stored
    seed = fields_.get("seed", 0)
    if seed < 0:
        raise InvalidConfig(f"checkpoint seed {seed} is negative")
    model = DeepNose(target, seed, np.float32)
    expected = dict(model.named_tensors())
    (n_tensors,) = r.unpack("<I", "tensor count")
    seen = set()
    for _ in range(n_tensors):
        (ln,) = r.unpack("<H", "tensor name length")
        name = r.take(ln, "tensor name").decode("utf-8", errors="replace")
        (rank,) = r.unpack("<B", f"rank of {name}")
        dims = r.unpack(f"<{rank}Q", f"dims of {name}")
        if name not in expected:
            raise ShapeMismatch(f"unexpected tensor {name!r} for this config")
        if tuple(dims) != expected[name].shape:
            raise ShapeMismatch(f"tensor {name!r} has shape {tuple(dims)}, config expects {expected[name].shape}")
        count = int(np.prod(dims)) if rank else 1
        payload = r.take(4 * count, f"payload of {name}")
        expected[name][...] = np.frombuffer(payload, dtype="<f4").reshape(dims)
        seen.add(name)
    missing = set(expected) - seen
    if missing:
        raise ShapeMismatch(f"checkpoint lacks tensors {sorted(missing)}")
    if r.pos != len(raw):
        raise ShapeMismatch(f"{len(raw) - r.pos} trailing bytes after last tensor")
    return model


def load_checkpoint(path, config: DeepNoseConfig | None = None) -> DeepNose:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read checkpoint {path}: {exc}") from None
    return checkpoint_from_bytes(raw, config)
