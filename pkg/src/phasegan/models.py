"""Network architectures: resnet-style generators, patch discriminators
and the patch feature encoder that taps the generator's encoder.

Everything is desk scale: two downsampling stages, a couple of residual
blocks, instance norm inside the generators, tanh outputs. Weights are
Gaussian(0, 0.02) with zero biases, seeded, so two builds from the same
seed are bit-identical.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError

NORM_EPS = 1e-5
INIT_STD = 0.02


@dataclass(frozen=True)
class ArchConfig:
    kind: str = "cut"
    image_size: int = 32
    base_width: int = 32
    res_blocks: int = 2
    embed_dim: int = 256

    def __post_init__(self):
        if self.kind not in ("cut", "cyclegan"):
            raise ConfigError(f"unknown model kind '{self.kind}'")
        if self.image_size % 4 != 0 or self.image_size < 8:
            raise ConfigError(
                f"image_size must be a multiple of 4 (two downsamples), got {self.image_size}"
            )
        if self.base_width < 1 or self.res_blocks < 0 or self.embed_dim < 1:
            raise ConfigError("widths and block counts must be positive")


def _weight(rng, shape):
    return Tensor(rng.normal(0.0, INIT_STD, size=shape).astype(np.float32), requires_grad=True)


def _zeros(shape):
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)


def _ones(shape):
    return Tensor(np.ones(shape, dtype=np.float32), requires_grad=True)


class Conv:
    def __init__(self, rng, params, name, c_in, c_out, k=3, stride=1, pad=1):
        self.stride = stride
        self.pad = pad
        self.w = _weight(rng, (c_out, c_in, k, k))
        self.b = _zeros((1, c_out, 1, 1))
        params[f"{name}.w"] = self.w
        params[f"{name}.b"] = self.b

    def __call__(self, x):
        return ad.conv2d(x, self.w, stride=self.stride, pad=self.pad) + self.b


class InstanceNorm:
    """Per-sample, per-channel normalization with learnable scale/shift."""

    def __init__(self, params, name, channels):
        self.gamma = _ones((1, channels, 1, 1))
        self.beta = _zeros((1, channels, 1, 1))
        params[f"{name}.gamma"] = self.gamma
        params[f"{name}.beta"] = self.beta

    def __call__(self, x):
        mu = ad.mean_reduce(x, axes=(2, 3), keepdims=True)
        centered = x - mu
        var = ad.mean_reduce(ad.square(centered), axes=(2, 3), keepdims=True)
        normed = centered / ad.sqrt(var + NORM_EPS)
        return normed * self.gamma + self.beta


class ResBlock:
    def __init__(self, rng, params, name, channels):
        self.conv1 = Conv(rng, params, f"{name}.conv1", channels, channels)
        self.norm1 = InstanceNorm(params, f"{name}.norm1", channels)
        self.conv2 = Conv(rng, params, f"{name}.conv2", channels, channels)
        self.norm2 = InstanceNorm(params, f"{name}.norm2", channels)

    def __call__(self, x):
        h = ad.relu(self.norm1(self.conv1(x)))
        return x + self.norm2(self.conv2(h))


class Generator:
    """[N,3,H,W] -> [N,3,H,W] in [-1,1]; encoder taps exposed for CUT."""

    def __init__(self, arch: ArchConfig, rng, prefix):
        w = arch.base_width
        self.arch = arch
        self.params = {}
        p = self.params
        self.enc_in = Conv(rng, p, f"{prefix}.enc_in", 3, w)
        self.enc_in_norm = InstanceNorm(p, f"{prefix}.enc_in_norm", w)
        self.down1 = Conv(rng, p, f"{prefix}.down1", w, 2 * w, stride=2)
        self.down1_norm = InstanceNorm(p, f"{prefix}.down1_norm", 2 * w)
        self.down2 = Conv(rng, p, f"{prefix}.down2", 2 * w, 4 * w, stride=2)
        self.down2_norm = InstanceNorm(p, f"{prefix}.down2_norm", 4 * w)
        self.blocks = [
            ResBlock(rng, p, f"{prefix}.res{i}", 4 * w) for i in range(arch.res_blocks)
        ]
        self.up1 = Conv(rng, p, f"{prefix}.up1", 4 * w, 2 * w)
        self.up1_norm = InstanceNorm(p, f"{prefix}.up1_norm", 2 * w)
        self.up2 = Conv(rng, p, f"{prefix}.up2", 2 * w, w)
        self.up2_norm = InstanceNorm(p, f"{prefix}.up2_norm", w)
        self.out = Conv(rng, p, f"{prefix}.out", w, 3)
        # spatial tap extents for the feature encoder
        self.tap_channels = (2 * w, 4 * w)
        self.tap_sizes = (arch.image_size // 2, arch.image_size // 4)

    def _check_input(self, x):
        n, c, h, w = x.data.shape if x.data.ndim == 4 else (0, 0, 0, 0)
        if x.data.ndim != 4 or c != 3 or h != self.arch.image_size or w != self.arch.image_size:
            raise ShapeError(
                f"generator expects [N,3,{self.arch.image_size},{self.arch.image_size}], "
                f"got {x.data.shape}"
            )

    def encode_taps(self, x):
        """Feature maps after the first and second downsample."""
        self._check_input(x)
        h = ad.relu(self.enc_in_norm(self.enc_in(x)))
        t1 = ad.relu(self.down1_norm(self.down1(h)))
        t2 = ad.relu(self.down2_norm(self.down2(t1)))
        return [t1, t2]

    def __call__(self, x):
        t1, t2 = self.encode_taps(x)
        h = t2
        for block in self.blocks:
            h = block(h)
        h = ad.relu(self.up1_norm(self.up1(ad.upsample2x(h))))
        h = ad.relu(self.up2_norm(self.up2(ad.upsample2x(h))))
        return ad.tanh(self.out(h))


class Discriminator:
    """3-layer strided conv patch classifier; raw score map, no sigmoid."""

    def __init__(self, arch: ArchConfig, rng, prefix):
        w = arch.base_width
        self.params = {}
        p = self.params
        self.c1 = Conv(rng, p, f"{prefix}.c1", 3, w, stride=2)
        self.c2 = Conv(rng, p, f"{prefix}.c2", w, 2 * w, stride=2)
        self.c2_norm = InstanceNorm(p, f"{prefix}.c2_norm", 2 * w)
        self.c3 = Conv(rng, p, f"{prefix}.c3", 2 * w, 1)

    def __call__(self, x):
        if x.data.ndim != 4 or x.data.shape[1] != 3:
            raise ShapeError(f"discriminator expects [N,3,H,W], got {x.data.shape}")
        h = ad.leaky_relu(self.c1(x))
        h = ad.leaky_relu(self.c2_norm(self.c2(h)))
        return self.c3(h)


class FeatureEncoder:
    """Projects generator encoder taps to unit-norm patch embeddings.

    Each tap has its own two-layer head into a shared embedding width;
    the same (batch, spatial) indices applied to two inputs select
    corresponding locations.
    """

    def __init__(self, generator: Generator, arch: ArchConfig, rng, prefix="f"):
        self.generator = generator
        self.embed_dim = arch.embed_dim
        self.params = {}
        self._heads = []
        for t, channels in enumerate(generator.tap_channels):
            w1 = _weight(rng, (channels, arch.embed_dim))
            b1 = _zeros((1, arch.embed_dim))
            w2 = _weight(rng, (arch.embed_dim, arch.embed_dim))
            b2 = _zeros((1, arch.embed_dim))
            for key, val in (("w1", w1), ("b1", b1), ("w2", w2), ("b2", b2)):
                self.params[f"{prefix}.tap{t}.{key}"] = val
            self._heads.append((w1, b1, w2, b2))

    def num_taps(self):
        return len(self._heads)

    def extract_patch_features(self, x, patch_indices):
        """One [P, embed_dim] unit-norm matrix per tap.

        ``patch_indices``: per tap, an integer array of shape (P, 2)
        holding (batch index, flattened spatial index) rows.
        """
        taps = self.generator.encode_taps(x)
        if len(patch_indices) != len(taps):
            raise ShapeError(
                f"need indices for {len(taps)} taps, got {len(patch_indices)}"
            )
        out = []
        for tap, idx, head in zip(taps, patch_indices, self._heads):
            idx = np.asarray(idx)
            if idx.ndim != 2 or idx.shape[1] != 2:
                raise ShapeError(f"patch indices must be (P, 2), got {idx.shape}")
            rows = ad.select_pixels(tap, idx[:, 0], idx[:, 1])
            w1, b1, w2, b2 = head
            z = ad.matmul(ad.relu(ad.matmul(rows, w1) + b1), w2) + b2
            norm = ad.sqrt(ad.sum_reduce(ad.square(z), axes=1, keepdims=True) + 1e-12)
            out.append(z / norm)
        return out

    def sample_patch_indices(self, batch_size, num_patches, rng):
        """Seeded (batch, spatial) index pairs for every tap."""
        indices = []
        for size in self.generator.tap_sizes:
            total = batch_size * size * size
            take = min(num_patches, total)
            flat = rng.choice(total, size=take, replace=False)
            indices.append(
                np.stack([flat // (size * size), flat % (size * size)], axis=1)
            )
        return indices


class ModelBundle:
    """Named networks plus flat parameter registries for the optimizers."""

    def __init__(self, kind, generators, discriminators, encoder=None):
        self.kind = kind
        self.generators = generators
        self.discriminators = discriminators
        self.encoder = encoder

    def named_params(self):
        out = {}
        for net in (*self.generators.values(), *self.discriminators.values()):
            out.update(net.params)
        if self.encoder is not None:
            out.update(self.encoder.params)
        return out

    def generator_params(self):
        out = {}
        for net in self.generators.values():
            out.update(net.params)
        if self.encoder is not None:
            out.update(self.encoder.params)
        return out

    def discriminator_params(self):
        out = {}
        for net in self.discriminators.values():
            out.update(net.params)
        return out


def build_models(arch: ArchConfig, seed=0) -> ModelBundle:
    """cut -> {G, D, F}; cyclegan -> {G_A, G_B, D_A, D_B}."""
    rng = np.random.default_rng(np.random.PCG64(seed))
    if arch.kind == "cut":
        g = Generator(arch, rng, "g")
        d = Discriminator(arch, rng, "d")
        f = FeatureEncoder(g, arch, rng, "f")
        return ModelBundle("cut", {"g": g}, {"d": d}, f)
    g_a = Generator(arch, rng, "g_a")
    g_b = Generator(arch, rng, "g_b")
    d_a = Discriminator(arch, rng, "d_a")
    d_b = Discriminator(arch, rng, "d_b")
    return ModelBundle("cyclegan", {"g_a": g_a, "g_b": g_b}, {"d_a": d_a, "d_b": d_b})
