"""Procedural (source, target, semantic) scene triplets plus PPM files.

Scenes are layered urban mockups: a sky band over a road band, with
building rectangles, vegetation blobs and vehicle rectangles painted on
top. The source channel is the luminance of the target by construction,
and the semantic image renders the per-pixel category grid in palette
colors so it feeds the same 3-channel pipeline as RGB targets.

All randomness comes from SplitMix64 (state advances by the 64-bit
golden ratio; output is the xor-shift/multiply finalizer), so datasets
are bit-reproducible across platforms.
"""

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError, ShapeError

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _mix(z):
    z &= _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


class SplitMix64:
    """Counter-based 64-bit generator: out_k = mix(seed + k * golden)."""

    def __init__(self, seed):
        self._state = int(seed) & _MASK

    def next_u64(self):
        self._state = (self._state + _GOLDEN) & _MASK
        return _mix(self._state)

    def random(self):
        return (self.next_u64() >> 11) * 2.0**-53

    def uniform(self, lo, hi):
        return lo + (hi - lo) * self.random()

    def randint(self, lo, hi):
        """Uniform integer in [lo, hi], both ends inclusive."""
        return lo + int(self.random() * (hi - lo + 1))

    def noise(self, shape):
        """Array of uniforms in [-1, 1); same stream as scalar draws."""
        n = int(np.prod(shape))
        ks = self._state + _GOLDEN * np.arange(1, n + 1, dtype=np.uint64)
        self._state = (self._state + _GOLDEN * n) & _MASK
        z = ks
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
        u = (z >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return (2.0 * u - 1.0).reshape(shape)


def combine_seed(*parts):
    """Fold ints and strings into one 64-bit seed, order-sensitive."""
    h = 0
    for part in parts:
        if isinstance(part, str):
            v = 0
            for byte in part.encode():
                v = _mix(v ^ byte)
            part = v
        h = _mix((h + _GOLDEN) ^ (int(part) & _MASK))
    return h


# ---------------------------------------------------------------------------
# scene model

SKY, ROAD, BUILDING, VEGETATION, VEHICLE = range(5)
CATEGORY_NAMES = ("sky", "road", "building", "vegetation", "vehicle")

# target-domain base colors, [0, 1]; independent of the semantic palette
_BASE_COLORS = (
    (0.55, 0.75, 0.95),
    (0.35, 0.35, 0.38),
    (0.62, 0.45, 0.35),
    (0.18, 0.55, 0.25),
    (0.75, 0.20, 0.20),
)
_TEXTURE_AMP = (0.02, 0.04, 0.06, 0.08, 0.04)

DEFAULT_PALETTE = (
    (0.27, 0.51, 0.71),
    (0.50, 0.25, 0.50),
    (0.27, 0.27, 0.27),
    (0.42, 0.56, 0.14),
    (0.86, 0.08, 0.24),
)


@dataclass
class DatasetConfig:
    num_train: int = 200
    num_test: int = 40
    image_size: int = 32
    categories: int = 5
    seed: int = 0
    palette: tuple = field(default=DEFAULT_PALETTE)

    def __post_init__(self):
        if self.num_train <= 0 or self.num_test <= 0:
            raise ConfigError("dataset split sizes must be positive")
        if self.image_size < 16:
            raise ConfigError(f"image_size must be >= 16, got {self.image_size}")
        if not 2 <= self.categories <= 5:
            raise ConfigError(f"categories must be in [2, 5], got {self.categories}")
        if len(self.palette) < self.categories:
            raise ConfigError("palette must cover every category")


@dataclass
class SceneTriplet:
    source: np.ndarray  # (3, H, W) float32, replicated luminance, [-1, 1]
    target: np.ndarray  # (3, H, W) float32 RGB, [-1, 1]
    semantic: np.ndarray  # (3, H, W) float32 palette colors, [-1, 1]
    category_grid: np.ndarray  # (H, W) int64 labels


def luminance(img):
    """Rec.601 luma of a (3, H, W) image, kept in the image's dtype."""
    return 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]


def _jitter_color(rng, base, amp=0.08):
    return tuple(min(1.0, max(0.0, c + rng.uniform(-amp, amp))) for c in base)


def generate_scene(seed, config: DatasetConfig) -> SceneTriplet:
    """Deterministic layered scene for one 64-bit seed."""
    size = config.image_size
    if size < 16:
        raise ConfigError(f"image_size must be >= 16, got {size}")
    k = config.categories
    rng = SplitMix64(seed)
    grid = np.zeros((size, size), dtype=np.int64)
    color = np.zeros((size, size, 3), dtype=np.float64)

    def paint(mask, category, base):
        grid[mask] = category
        color[mask] = base

    horizon = rng.randint(int(0.40 * size), int(0.60 * size))
    sky_color = _jitter_color(rng, _BASE_COLORS[SKY])
    road_color = _jitter_color(rng, _BASE_COLORS[ROAD])
    rows = np.arange(size)[:, None] * np.ones((1, size), dtype=np.int64)
    paint(rows < horizon, SKY, sky_color)
    paint(rows >= horizon, ROAD, road_color)

    if k > BUILDING:
        for _ in range(rng.randint(1, 3)):
            bw = rng.randint(max(2, int(0.15 * size)), max(3, int(0.30 * size)))
            bh = rng.randint(max(2, int(0.20 * size)), max(3, int(0.45 * size)))
            x0 = rng.randint(0, size - bw)
            y1 = min(size - 2, horizon + rng.randint(0, max(1, int(0.05 * size))))
            y0 = max(1, y1 - bh)
            mask = np.zeros_like(grid, dtype=bool)
            mask[y0 : y1 + 1, x0 : x0 + bw] = True
            paint(mask, BUILDING, _jitter_color(rng, _BASE_COLORS[BUILDING]))

    if k > VEGETATION:
        yy, xx = np.mgrid[0:size, 0:size]
        for _ in range(rng.randint(1, 3)):
            cy = rng.randint(max(1, horizon - int(0.10 * size)), min(size - 2, horizon + int(0.15 * size)))
            cx = rng.randint(0, size - 1)
            ry = rng.randint(max(1, int(0.06 * size)), max(2, int(0.15 * size)))
            rx = rng.randint(max(1, int(0.06 * size)), max(2, int(0.15 * size)))
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
            mask[0, :] = False
            mask[-1, :] = False
            paint(mask, VEGETATION, _jitter_color(rng, _BASE_COLORS[VEGETATION]))

    if k > VEHICLE:
        roll = rng.random()
        count = 0 if roll < 0.08 else (1 if roll < 0.54 else 2)
        for _ in range(count):
            vh = rng.randint(max(2, int(0.08 * size)), max(3, int(0.15 * size)))
            vw = rng.randint(max(2, int(0.12 * size)), max(3, int(0.25 * size)))
            y1 = size - 2 - rng.randint(0, max(1, int(0.08 * size)))
            y0 = max(horizon, y1 - vh)
            x0 = rng.randint(0, size - vw)
            mask = np.zeros_like(grid, dtype=bool)
            mask[y0 : y1 + 1, x0 : x0 + vw] = True
            paint(mask, VEHICLE, _jitter_color(rng, _BASE_COLORS[VEHICLE]))

    amp = np.asarray(_TEXTURE_AMP)[grid]
    textured = np.clip(color + (amp * rng.noise((size, size)))[:, :, None], 0.0, 1.0)
    target = (textured.transpose(2, 0, 1) * 2.0 - 1.0).astype(np.float32)

    lum = luminance(target)
    source = np.stack([lum, lum, lum])

    palette = np.asarray(config.palette[: config.categories], dtype=np.float32)
    semantic = (palette * 2.0 - 1.0).astype(np.float32)[grid].transpose(2, 0, 1)
    return SceneTriplet(source, np.ascontiguousarray(target), np.ascontiguousarray(semantic), grid)


def item_seed(config_seed, split, index):
    return combine_seed(config_seed, split, index)


def build_dataset(config: DatasetConfig):
    """(train, test) scene lists; per-item seeds keep the splits disjoint."""
    train = [
        generate_scene(item_seed(config.seed, "train", i), config)
        for i in range(config.num_train)
    ]
    test = [
        generate_scene(item_seed(config.seed, "test", i), config)
        for i in range(config.num_test)
    ]
    return train, test


# ---------------------------------------------------------------------------
# PPM (P6) files


def write_image(path, img):
    """Binary 8-bit PPM from a (3, H, W) image in [-1, 1], round-half-up."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError(f"write_image expects (3, H, W), got {img.shape}")
    scaled = np.floor((np.clip(img, -1.0, 1.0) + 1.0) / 2.0 * 255.0 + 0.5)
    payload = scaled.astype(np.uint8).transpose(1, 2, 0).tobytes()
    _, h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(payload)


def _next_token(data, pos):
    while pos < len(data):
        c = data[pos]
        if c in b" \t\r\n":
            pos += 1
        elif c == ord("#"):
            while pos < len(data) and data[pos] != ord("\n"):
                pos += 1
        else:
            break
    if pos >= len(data):
        raise FormatError("unexpected end of header", offset=pos)
    start = pos
    while pos < len(data) and data[pos] not in b" \t\r\n":
        pos += 1
    return data[start:pos], start, pos


def _int_token(data, pos, what):
    token, start, pos = _next_token(data, pos)
    try:
        value = int(token)
    except ValueError:
        raise FormatError(f"bad {what} {token!r}", offset=start) from None
    if value <= 0:
        raise FormatError(f"{what} must be positive, got {value}", offset=start)
    return value, pos


def read_image(path):
    """Parse a binary PPM written by write_image back to (3, H, W) float32."""
    with open(path, "rb") as fh:
        data = fh.read()
    magic, start, pos = _next_token(data, 0)
    if magic != b"P6":
        raise FormatError(f'expected magic "P6", found {magic!r}', offset=start)
    width, pos = _int_token(data, pos, "width")
    height, pos = _int_token(data, pos, "height")
    maxval, pos = _int_token(data, pos, "maxval")
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}", offset=pos)
    pos += 1  # single whitespace byte separates header from payload
    need = width * height * 3
    if len(data) - pos < need:
        raise FormatError(
            f"payload truncated: need {need} bytes, have {len(data) - pos}",
            offset=len(data),
        )
    raw = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos)
    img = raw.reshape(height, width, 3).transpose(2, 0, 1)
    return (img.astype(np.float32) / 255.0) * 2.0 - 1.0


# ---------------------------------------------------------------------------
# dataset directory layout


def write_dataset(directory, config: DatasetConfig):
    """{split}/{index}_{source|target|semantic}.ppm plus a manifest."""
    train, test = build_dataset(config)
    for split, items in (("train", train), ("test", test)):
        os.makedirs(os.path.join(directory, split), exist_ok=True)
        for i, item in enumerate(items):
            base = os.path.join(directory, split, f"{i:04d}")
            write_image(base + "_source.ppm", item.source)
            write_image(base + "_target.ppm", item.target)
            write_image(base + "_semantic.ppm", item.semantic)
    palette = ";".join(
        ",".join(repr(c) for c in color)
        for color in config.palette[: config.categories]
    )
    with open(os.path.join(directory, "manifest.txt"), "w") as fh:
        fh.write(f"num_train = {config.num_train}\n")
        fh.write(f"num_test = {config.num_test}\n")
        fh.write(f"image_size = {config.image_size}\n")
        fh.write(f"categories = {config.categories}\n")
        fh.write(f"seed = {config.seed}\n")
        fh.write(f"palette = {palette}\n")
    return train, test


def load_dataset(directory):
    """Read a write_dataset layout back into scene lists.

    Category grids are reconstructed by nearest-palette match, so they
    survive the 8-bit quantization of the semantic images.
    """
    manifest = {}
    with open(os.path.join(directory, "manifest.txt")) as fh:
        for line in fh:
            key, _, value = line.partition("=")
            manifest[key.strip()] = value.strip()
    palette = tuple(
        tuple(float(c) for c in color.split(","))
        for color in manifest["palette"].split(";")
    )
    pal_m11 = np.asarray(palette, dtype=np.float32) * 2.0 - 1.0
    splits = []
    for split, count_key in (("train", "num_train"), ("test", "num_test")):
        items = []
        for i in range(int(manifest[count_key])):
            base = os.path.join(directory, split, f"{i:04d}")
            source = read_image(base + "_source.ppm")
            target = read_image(base + "_target.ppm")
            semantic = read_image(base + "_semantic.ppm")
            flat = semantic.reshape(3, -1).T[:, None, :]  # (HW, 1, 3)
            dist = ((flat - pal_m11[None, :, :]) ** 2).sum(axis=2)
            grid = dist.argmin(axis=1).reshape(semantic.shape[1:]).astype(np.int64)
            items.append(SceneTriplet(source, target, semantic, grid))
        splits.append(items)
    return splits[0], splits[1]
