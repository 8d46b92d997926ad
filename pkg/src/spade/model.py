"""Desk-scale UNet-like network, projection heads, augmentations and checkpoints.

The encoder ``f`` and decoder ``g`` are small 3D conv stacks; the heads follow
the published layout (global: average pool, MLP; local: pool to 1x3x3 with
depth averaged away, then per-location 1x1 convolutions) at reduced width.
Gradients come from torch autograd.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .correspondence import Box, intersection
from .errors import ConfigError, DataError, DegenerateEmbeddingError, GeometryError, ShapeError


@dataclass
class ModelConfig:
    crop_size: tuple = (32, 64, 64)
    base_channels: int = 8
    z_channels: int = 16
    global_hidden: int = 256
    global_dim: int = 128
    local_hidden: int = 128
    local_dim: int = 64
    local_grid: int = 3
    activation: str = "silu"

    def __post_init__(self):
        self.crop_size = tuple(int(c) for c in self.crop_size)
        d, h, w = self.crop_size
        if d % 2 or h % 4 or w % 4:
            raise ConfigError(f"crop_size {self.crop_size} must be divisible by (2, 4, 4)")
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")


_ACTIVATIONS = {"silu": nn.SiLU, "relu": nn.ReLU, "tanh": nn.Tanh}


def _conv(cin, cout, act, k=3, stride=1):
    return nn.Sequential(nn.Conv3d(cin, cout, k, stride=stride, padding=k // 2), act())


class SpadeNet(nn.Module):
    """Encoder ``f``, decoder ``g``, reconstruction head and the two projection heads."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        act = _ACTIVATIONS[cfg.activation]
        c = cfg.base_channels
        self.enc1 = _conv(1, c, act)
        self.enc2 = _conv(c, 2 * c, act, stride=(1, 2, 2))
        self.enc3 = _conv(2 * c, 4 * c, act, stride=2)
        self.dec2 = _conv(4 * c + 2 * c, 2 * c, act)
        self.dec1 = _conv(2 * c + c, c, act)
        self.to_logits = nn.Conv3d(c, cfg.z_channels, 1)
        self.recon = nn.Conv3d(cfg.z_channels, 1, 1)
        self.head_g = nn.Sequential(nn.Linear(4 * c, cfg.global_hidden), act(),
                                    nn.Linear(cfg.global_hidden, cfg.global_dim))
        self.head_l = nn.Sequential(nn.Conv3d(cfg.z_channels, cfg.local_hidden, 1), act(),
                                    nn.Conv3d(cfg.local_hidden, cfg.local_dim, 1))
        # variance-preserving weights and zero biases; the framework default shrinks the
        # signal layer by layer until biases dominate and every crop embeds to one direction
        for m in self.modules():
            if isinstance(m, (nn.Conv3d, nn.Linear)):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)

    def encode(self, x):
        e1 = self.enc1(x)
        e2 = self.enc2(e1)
        return self.enc3(e2), (e1, e2)

    def decode(self, z, skips):
        e1, e2 = skips
        u = F.interpolate(z, size=e2.shape[-3:], mode="trilinear", align_corners=False)
        d2 = self.dec2(torch.cat([u, e2], dim=1))
        u = F.interpolate(d2, size=e1.shape[-3:], mode="trilinear", align_corners=False)
        d1 = self.dec1(torch.cat([u, e1], dim=1))
        return self.to_logits(d1)

    def forward(self, x):
        """Returns ``(z, Z, reconstruction)`` for a batch ``(B, 1, D, H, W)``."""
        check_patch_shape(x, self.cfg.crop_size)
        z, skips = self.encode(x)
        logits = self.decode(z, skips)
        return z, logits, torch.sigmoid(self.recon(logits))

    def global_embedding(self, z):
        return unit_normalize(self.head_g(z.mean(dim=(-3, -2, -1))))

    def local_embedding(self, logits):
        """Pool a (B, C, d, h, w) logit region to 1 x g x g and project per location."""
        g = self.cfg.local_grid
        pooled = F.adaptive_avg_pool3d(logits, (1, g, g))
        return unit_normalize(self.head_l(pooled)[:, :, 0])


def check_patch_shape(x, crop_size):
    if tuple(x.shape[-3:]) != tuple(crop_size) or x.dim() != 5:
        raise ShapeError(f"expected patches of shape (B, 1, {crop_size}), got {tuple(x.shape)}")


def unit_normalize(x, eps=1e-12):
    """L2-normalise each sample over all non-batch axes."""
    flat = x.reshape(x.shape[0], -1)
    norm = flat.norm(dim=1)
    if bool((norm <= eps).any()):
        raise DegenerateEmbeddingError("embedding has zero norm and no direction")
    return x / norm.reshape(-1, *([1] * (x.dim() - 1)))


def _as_batch(patch):
    t = torch.as_tensor(patch)
    while t.dim() < 5:
        t = t.unsqueeze(0)
    return t


def forward_global(net: SpadeNet, patch):
    """Unit global embedding(s) of a patch or batch of patches."""
    x = _as_batch(patch).to(next(net.parameters()).dtype)
    z, _ = net.encode(_checked(net, x))
    return net.global_embedding(z)


def forward_local(net: SpadeNet, patch):
    """Decoder logits ``Z`` (full crop resolution) and the local embedding of the whole crop."""
    x = _as_batch(patch).to(next(net.parameters()).dtype)
    z, skips = net.encode(_checked(net, x))
    logits = net.decode(z, skips)
    return logits, net.local_embedding(logits)


def _checked(net, x):
    check_patch_shape(x, net.cfg.crop_size)
    return x


# ----------------------------------------------------------------- geometry


def overlap_slices(own: Box, other: Box, grid_shape):
    """Index slices of ``own``'s crop grid covering ``own`` intersected with ``other``."""
    lo, hi = intersection(own, other)
    if np.any(hi - lo <= 0):
        raise GeometryError("patches do not overlap")
    scale = np.asarray(grid_shape, dtype=np.float64) / own.size
    a = (lo - own.corner) * scale
    b = (hi - own.corner) * scale
    out = []
    for k, n in enumerate(grid_shape):
        i0 = int(np.clip(np.floor(a[k] + 1e-6), 0, n - 1))
        i1 = int(np.clip(np.ceil(b[k] - 1e-6), i0 + 1, n))
        out.append(slice(i0, i1))
    return tuple(out)


def extract_overlap_logits(logits, own: Box, other: Box):
    """Sub-tensor of ``logits`` (..., D, H, W) over the overlap, in ``own``'s voxel frame."""
    sl = overlap_slices(own, other, tuple(logits.shape[-3:]))
    return logits[(Ellipsis,) + sl]


# ----------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class SpatialAug:
    """Axis flips (depth, height, width) followed by quarter-turns in the (h, w) plane."""

    axis_flips: tuple = (False, False, False)
    rot90_count: int = 0

    def __post_init__(self):
        if len(self.axis_flips) != 3 or self.rot90_count not in (0, 1, 2, 3):
            raise ConfigError(f"invalid spatial augmentation {self}")


def _flip(x, axes):
    if not axes:
        return x
    if isinstance(x, torch.Tensor):
        return torch.flip(x, dims=axes)
    return np.flip(x, axis=axes)


def _rot(x, k):
    if k % 4 == 0:
        return x
    if k % 2 and x.shape[-1] != x.shape[-2]:
        raise ShapeError(f"odd quarter-turn needs a square plane, got {tuple(x.shape[-2:])}")
    if isinstance(x, torch.Tensor):
        return torch.rot90(x, k, dims=(-2, -1))
    return np.rot90(x, k, axes=(-2, -1))


def apply_spatial(x, aug: SpatialAug):
    axes = tuple(a - 3 for a, f in enumerate(aug.axis_flips) if f)
    return _rot(_flip(x, axes), aug.rot90_count)


def invert_spatial(x, aug: SpatialAug):
    axes = tuple(a - 3 for a, f in enumerate(aug.axis_flips) if f)
    return _flip(_rot(x, -aug.rot90_count % 4), axes)


def random_spatial(rng, square_plane=True) -> SpatialAug:
    flips = tuple(bool(b) for b in rng.integers(0, 2, 3))
    k = int(rng.integers(0, 4))
    if not square_plane:
        k = 2 * (k // 2)
    return SpatialAug(flips, k)


INTENSITY_KINDS = ("gaussian_noise", "intensity_shift_scale", "gamma", "local_shuffle")


@dataclass(frozen=True)
class IntensityAug:
    kind: str = "gaussian_noise"
    sigma: float = 0.0
    shift: float = 0.0
    scale: float = 1.0
    gamma: float = 1.0
    window: tuple = (2, 4, 4)
    n_windows: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in INTENSITY_KINDS:
            raise ConfigError(f"unknown intensity augmentation {self.kind!r}")


def apply_intensity(patch, aug: IntensityAug) -> np.ndarray:
    x = np.array(patch, dtype=np.float64)
    rng = np.random.default_rng(aug.seed)
    if aug.kind == "gaussian_noise":
        if aug.sigma > 0:
            x = x + rng.normal(0.0, aug.sigma, x.shape)
    elif aug.kind == "intensity_shift_scale":
        x = x * aug.scale + aug.shift
    elif aug.kind == "gamma":
        x = np.clip(x, 0.0, 1.0) ** aug.gamma
    else:
        w = np.minimum(np.asarray(aug.window), x.shape[-3:])
        for _ in range(aug.n_windows):
            c = [int(rng.integers(0, n - k + 1)) for n, k in zip(x.shape[-3:], w)]
            sl = (Ellipsis,) + tuple(slice(a, a + k) for a, k in zip(c, w))
            block = x[sl]
            flat = block.reshape(*block.shape[:-3], -1)
            x[sl] = flat[..., rng.permutation(flat.shape[-1])].reshape(block.shape)
    return np.clip(x, 0.0, 1.0)


def random_intensity(rng) -> IntensityAug:
    kind = INTENSITY_KINDS[int(rng.integers(0, len(INTENSITY_KINDS)))]
    seed = int(rng.integers(0, 2**31))
    if kind == "gaussian_noise":
        return IntensityAug(kind, sigma=float(rng.uniform(0.0, 0.05)), seed=seed)
    if kind == "intensity_shift_scale":
        return IntensityAug(kind, shift=float(rng.uniform(-0.05, 0.05)), scale=float(rng.uniform(0.9, 1.1)), seed=seed)
    if kind == "gamma":
        return IntensityAug(kind, gamma=float(rng.uniform(0.7, 1.5)), seed=seed)
    return IntensityAug(kind, n_windows=int(rng.integers(1, 6)), seed=seed)


# ----------------------------------------------------------------- parameters


def momentum_update(theta, epsilon, beta: float):
    """``beta * epsilon + (1 - beta) * theta`` elementwise."""
    if not 0.0 <= beta <= 1.0:
        raise ConfigError(f"beta must lie in [0, 1], got {beta}")
    if tuple(np.shape(theta)) != tuple(np.shape(epsilon)):
        raise ShapeError(f"parameter shapes differ: {tuple(np.shape(theta))} vs {tuple(np.shape(epsilon))}")
    return beta * epsilon + (1.0 - beta) * theta


def flat_params(net: nn.Module) -> torch.Tensor:
    return torch.nn.utils.parameters_to_vector(net.parameters()).detach().clone()


def set_flat_params(net: nn.Module, vec) -> None:
    torch.nn.utils.vector_to_parameters(torch.as_tensor(vec, dtype=next(net.parameters()).dtype), net.parameters())


def build_pair(cfg: ModelConfig, seed: int = 0, dtype=torch.float32):
    """Regular and momentum networks with identical initial parameters."""
    torch.manual_seed(seed)
    net = SpadeNet(cfg).to(dtype)
    twin = SpadeNet(cfg).to(dtype)
    twin.load_state_dict(net.state_dict())
    for p in twin.parameters():
        p.requires_grad_(False)
    return net, twin


def save_checkpoint(path, cfg: ModelConfig, theta, epsilon, extra=None) -> None:
    theta = np.asarray(theta, dtype="<f4")
    epsilon = np.asarray(epsilon, dtype="<f4")
    layers = [[name, list(p.shape)] for name, p in SpadeNet(cfg).named_parameters()]
    header = {"model": asdict(cfg), "layers": layers, "count": int(theta.size), **(extra or {})}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode() + b"\n")
        fh.write(theta.tobytes())
        fh.write(epsilon.tobytes())


def load_checkpoint(path):
    """Returns ``(ModelConfig, theta, epsilon, header)``."""
    try:
        with open(path, "rb") as fh:
            header = json.loads(fh.readline())
            payload = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    except ValueError as exc:
        raise DataError(f"{path}: checkpoint header is not JSON") from exc
    n = int(header["count"])
    if len(payload) != 8 * n:
        raise DataError(f"{path}: expected {8 * n} payload bytes, found {len(payload)}")
    vec = np.frombuffer(payload, dtype="<f4")
    cfg = ModelConfig(**header["model"])
    return cfg, vec[:n].astype(np.float32), vec[n:].astype(np.float32), header


def load_networks(path, dtype=torch.float32):
    cfg, theta, epsilon, header = load_checkpoint(path)
    net, twin = build_pair(cfg, 0, dtype)
    set_flat_params(net, torch.from_numpy(theta))
    set_flat_params(twin, torch.from_numpy(epsilon))
    return net, twin, header


# ----------------------------------------------------------------- toy reference


class ToyPointwiseNet:
    """Pointwise layers plus max pooling, evaluated in numpy.

    Every operation either acts per voxel or reduces with ``max``, so flips
    and quarter-turns commute with it exactly, bit for bit.
    """

    def __init__(self, channels=4, seed=0, emb_dim=8):
        rng = np.random.default_rng(seed)
        self.w1 = rng.normal(size=(channels, 1))
        self.b1 = rng.normal(size=channels)
        self.w2 = rng.normal(size=(channels, channels))
        self.b2 = rng.normal(size=channels)
        self.w3 = rng.normal(size=(channels, channels))
        self.wg = rng.normal(size=(emb_dim, channels))

    @staticmethod
    def _pointwise(w, b, x):
        out = []
        for o in range(w.shape[0]):
            acc = np.zeros(x.shape[1:]) if b is None else np.full(x.shape[1:], b[o])
            for c in range(w.shape[1]):
                acc = acc + w[o, c] * x[c]
            out.append(acc)
        return np.stack(out)

    @staticmethod
    def _maxpool2(x):
        c, d, h, w = x.shape
        return x.reshape(c, d // 2, 2, h // 2, 2, w // 2, 2).max(axis=(2, 4, 6))

    def local_logits(self, patch):
        x = np.asarray(patch, dtype=np.float64)[None]
        h = np.tanh(self._pointwise(self.w1, self.b1, x))
        h = self._maxpool2(h)
        h = np.tanh(self._pointwise(self.w2, self.b2, h))
        h = h.repeat(2, axis=1).repeat(2, axis=2).repeat(2, axis=3)
        return self._pointwise(self.w3, None, h)

    def global_embedding(self, patch):
        x = np.asarray(patch, dtype=np.float64)[None]
        h = np.tanh(self._pointwise(self.w1, self.b1, x))
        pooled = h.reshape(h.shape[0], -1).max(axis=1)
        v = self.wg @ pooled
        return v / np.linalg.norm(v)
