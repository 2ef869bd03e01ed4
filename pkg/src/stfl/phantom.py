"""Synthetic lung phantoms, the noise taxonomy, random warping and client partitioning.

Images are float32 arrays of shape (H, W) with values in [0, 1]; masks are
uint8 arrays of the same shape holding {0, 1}.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from stfl.errors import ConfigError, ShapeError

NOISE_KINDS = ("clean", "inversion", "gaussian", "contrast_enhanced", "mixed")
MAX_SAMPLES_PER_CLIENT = 1000
MAX_CLIENTS = 99

# Seed-stream tags for the per-sample derived generators.
_WARP, _NOISE, _SPLIT = 1, 2, 3


def check_image(img: np.ndarray, name: str = "image") -> np.ndarray:
    if img.ndim != 2:
        raise ShapeError(f"{name}: expected a 2-D grid, got shape {img.shape}")
    if not np.isfinite(img).all() or img.min() < 0 or img.max() > 1:
        raise ConfigError(f"{name}: intensities must be finite and within [0, 1]")
    return img


def check_mask(mask: np.ndarray, shape: tuple | None = None) -> np.ndarray:
    if shape is not None and mask.shape != shape:
        raise ShapeError(f"mask shape {mask.shape} does not match image shape {shape}")
    if not np.isin(mask, (0, 1)).all():
        raise ConfigError("mask must be strictly binary")
    return mask


def _rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng([int(k) % 2 ** 63 for k in keys])


def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) % 2 ** 63 for k in keys]).generate_state(1, np.uint64)[0] >> 1)


# ---------------------------------------------------------------- phantoms

def _ellipse(u, v, cx, cy, ax, ay, theta=0.0):
    c, s = np.cos(theta), np.sin(theta)
    du, dv = u - cx, v - cy
    a = (c * du + s * dv) / ax
    b = (-s * du + c * dv) / ay
    return a * a + b * b <= 1.0


def _smooth_field(rng: np.random.Generator, resolution: int, coarse: int, scale: float) -> np.ndarray:
    return upsample_bilinear(rng.standard_normal((coarse, coarse)) * scale, resolution, resolution)


def phantom_layers(seed: int, resolution: int = 64, structure_shift: float = 0.0) -> dict:
    """Build a phantom and return its components.

    Keys: ``image``, ``mask``, ``background`` (image without lesions) and
    ``lungs`` (lung-field mask).
    """
    if resolution < 32:
        raise ConfigError(f"resolution must be >= 32, got {resolution}")
    if not 0.0 <= structure_shift <= 1.0:
        raise ConfigError(f"structure_shift must be in [0, 1], got {structure_shift}")
    rng = _rng(seed, resolution)
    shift_rng = _rng(seed, resolution, 7)
    r = resolution
    coords = (np.arange(r) + 0.5) / r * 2 - 1
    v, u = np.meshgrid(coords, coords, indexing="ij")

    body_level = rng.uniform(0.48, 0.6)
    body = _ellipse(u, v, rng.uniform(-0.03, 0.03), rng.uniform(-0.03, 0.03),
                    rng.uniform(0.82, 0.9), rng.uniform(0.66, 0.74))

    lungs = np.zeros((r, r), dtype=bool)
    # structure_shift moves organ-geometry priors: separation, height, eccentricity, tilt
    s = structure_shift
    j = shift_rng.uniform(-1, 1, size=(2, 4))
    for side, jj in zip((-1.0, 1.0), j):
        cx = side * (rng.uniform(0.34, 0.40) + 0.08 * s * jj[0])
        cy = rng.uniform(-0.06, 0.06) + 0.14 * s * jj[1]
        ax = rng.uniform(0.22, 0.27) * (1 - 0.3 * s * (0.5 + 0.5 * jj[2]))
        ay = rng.uniform(0.42, 0.48) * (1 + 0.15 * s * jj[2])
        theta = side * rng.uniform(-0.12, 0.12) + 0.35 * s * jj[3]
        lungs |= _ellipse(u, v, cx, cy, ax, ay, theta)
    lungs &= body
    lung_level = rng.uniform(0.12, 0.2)

    texture = _smooth_field(rng, r, 8, 0.025)
    anatomy = np.where(body, body_level, 0.0)
    anatomy = np.where(lungs, lung_level, anatomy) + texture * body
    anatomy = gaussian_filter(anatomy, 0.6)
    background = np.clip(anatomy, 0.0, 1.0)

    mask = np.zeros((r, r), dtype=bool)
    lung_pix = np.argwhere(lungs)
    n_lesions = int(rng.integers(1, 5))
    image = background.copy()
    for _ in range(n_lesions):
        rad = rng.uniform(0.1, 0.18)
        aspect = rng.uniform(0.75, 1.3)
        theta = rng.uniform(0, np.pi)
        # resample the centre until most of the blob lies inside the lungs
        for _attempt in range(20):
            iy, ix = lung_pix[rng.integers(len(lung_pix))]
            full = _ellipse(u, v, coords[ix], coords[iy], rad * aspect, rad / aspect, theta)
            blob = full & lungs
            if blob.sum() >= 0.8 * full.sum():
                break
        amp = rng.uniform(0.25, 0.45)
        image = np.where(blob & ~mask, image + amp, image)
        mask |= blob
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return {"image": image, "mask": mask.astype(np.uint8),
            "background": background.astype(np.float32), "lungs": lungs}


def generate_phantom(seed: int, resolution: int = 64, structure_shift: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Lung phantom: two dark lung fields on a brighter body disc with 1–4 bright lesions."""
    layers = phantom_layers(seed, resolution, structure_shift)
    return layers["image"], layers["mask"]


# ---------------------------------------------------------------- noise

@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "clean"
    sigma: float = 0.1
    gamma: float = 0.5
    mix_seeded_order: bool = False

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ConfigError(f"noise kind {self.kind!r} is not one of {', '.join(NOISE_KINDS)}")
        if not self.sigma >= 0:
            raise ConfigError(f"noise sigma must be >= 0, got {self.sigma}")
        if not self.gamma > 0:
            raise ConfigError(f"noise gamma must be > 0, got {self.gamma}")

    @classmethod
    def parse(cls, obj) -> "NoiseSpec":
        if isinstance(obj, NoiseSpec):
            return obj
        if isinstance(obj, str):
            return cls(kind=obj)
        if isinstance(obj, dict):
            unknown = set(obj) - {"kind", "sigma", "gamma", "mix_seeded_order"}
            if unknown:
                raise ConfigError(f"unknown noise field(s): {', '.join(sorted(unknown))}")
            return cls(**obj)
        raise ConfigError(f"cannot interpret {obj!r} as a noise spec")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "sigma": self.sigma, "gamma": self.gamma,
                "mix_seeded_order": self.mix_seeded_order}


def apply_noise(img: np.ndarray, spec: NoiseSpec, rng_seed: int) -> np.ndarray:
    check_image(img)
    x = np.asarray(img, dtype=np.float32)
    rng = _rng(rng_seed)
    if spec.kind == "clean":
        return x.copy()
    if spec.kind == "inversion":
        return _invert(x)
    if spec.kind == "contrast_enhanced":
        return _contrast(x, spec.gamma)
    if spec.kind == "gaussian":
        return _gaussian(x, spec.sigma, rng)
    # mixed: each component independently with p = 0.5, fixed order unless seeded
    flags = rng.random(3) < 0.5
    order = rng.permutation(3) if spec.mix_seeded_order else np.arange(3)
    for idx in order:
        if not flags[idx]:
            continue
        if idx == 0:
            x = _contrast(x, spec.gamma)
        elif idx == 1:
            x = _gaussian(x, spec.sigma, rng)
        else:
            x = _invert(x)
    return x


def _invert(x):
    return np.clip(1.0 - x, 0.0, 1.0).astype(np.float32)


def _contrast(x, gamma):
    return np.clip(np.power(x, gamma), 0.0, 1.0).astype(np.float32)


def _gaussian(x, sigma, rng):
    if sigma == 0:
        return x.copy()
    return np.clip(x + rng.normal(0.0, sigma, size=x.shape), 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------- warping

def upsample_bilinear(coarse: np.ndarray, h: int, w: int) -> np.ndarray:
    """Corner-aligned bilinear interpolation of a small grid to (h, w)."""
    ch, cw = coarse.shape
    ys = np.linspace(0, ch - 1, h)
    xs = np.linspace(0, cw - 1, w)
    y0 = np.clip(np.floor(ys).astype(int), 0, ch - 2)
    x0 = np.clip(np.floor(xs).astype(int), 0, cw - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = coarse[y0][:, x0]
    b = coarse[y0][:, x0 + 1]
    c = coarse[y0 + 1][:, x0]
    d = coarse[y0 + 1][:, x0 + 1]
    return (a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx + c * fy * (1 - fx) + d * fy * fx)


def warp_field(shape: tuple, rng_seed: int, magnitude: float, grid: int = 4) -> np.ndarray:
    """Smooth displacement field of shape (2, H, W): (dy, dx) in pixels."""
    if magnitude < 0:
        raise ConfigError(f"warp magnitude must be >= 0, got {magnitude}")
    h, w = shape
    if magnitude == 0:
        return np.zeros((2, h, w))
    rng = _rng(rng_seed)
    coarse = rng.normal(0.0, magnitude, size=(2, grid, grid))
    return np.stack([upsample_bilinear(coarse[0], h, w), upsample_bilinear(coarse[1], h, w)])


def apply_field(img: np.ndarray, mask: np.ndarray, field: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample ``img`` bilinearly and ``mask`` by nearest neighbour at (i + dy, j + dx).

    Out-of-bounds coordinates clamp to the border.
    """
    h, w = img.shape
    check_mask(mask, img.shape)
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    y = np.clip(ii + field[0], 0, h - 1)
    x = np.clip(jj + field[1], 0, w - 1)
    y0 = np.minimum(np.floor(y).astype(int), h - 2)
    x0 = np.minimum(np.floor(x).astype(int), w - 2)
    fy, fx = y - y0, x - x0
    out = (img[y0, x0] * (1 - fy) * (1 - fx) + img[y0, x0 + 1] * (1 - fy) * fx
           + img[y0 + 1, x0] * fy * (1 - fx) + img[y0 + 1, x0 + 1] * fy * fx)
    yn = np.clip(np.floor(y + 0.5).astype(int), 0, h - 1)
    xn = np.clip(np.floor(x + 0.5).astype(int), 0, w - 1)
    return np.clip(out, 0.0, 1.0).astype(np.float32), mask[yn, xn].astype(np.uint8)


def random_warp(img: np.ndarray, mask: np.ndarray, rng_seed: int, magnitude: float = 2.0):
    if img.shape != mask.shape:
        raise ShapeError(f"image {img.shape} and mask {mask.shape} differ")
    if magnitude < 0:
        raise ConfigError(f"warp magnitude must be >= 0, got {magnitude}")
    if magnitude == 0:
        return np.asarray(img, dtype=np.float32).copy(), np.asarray(mask, dtype=np.uint8).copy()
    return apply_field(img, mask, warp_field(img.shape, rng_seed, magnitude))


# ---------------------------------------------------------------- federation data

@dataclass
class ClientDataset:
    client_id: int
    images: np.ndarray  # (n, H, W) float32
    masks: np.ndarray  # (n, H, W) uint8
    noise: NoiseSpec
    is_style_target: bool
    train_indices: list[int]
    val_indices: list[int]
    phantom_seeds: list[int] = field(default_factory=list)
    structure_shift: float = 0.0

    @property
    def samples(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return list(zip(self.images, self.masks))

    def __len__(self) -> int:
        return len(self.images)


@dataclass
class StyleSet:
    images: np.ndarray  # (n, H, W) float32
    seeds: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.images)


def client_seed(base_seed: int, client_id: int, index: int) -> int:
    return base_seed * 100_000 + client_id * 1_000 + index


def style_seed(base_seed: int, index: int) -> int:
    return base_seed * 100_000 + 99_000 + index


def _split(n: int, val_fraction: float, *keys: int) -> tuple[list[int], list[int]]:
    n_val = int(round(val_fraction * n))
    perm = _rng(*keys).permutation(n)
    return sorted(int(i) for i in perm[n_val:]), sorted(int(i) for i in perm[:n_val])


def build_federation_data(n_clients: int, noise_assignment: Sequence, base_seed: int = 0,
                          resolution: int = 64, structure_shift_per_client: Sequence[float] | None = None,
                          *, samples_per_client: int = 30, style_set_size: int = 30,
                          warp_magnitude: float = 2.0, val_fraction: float = 0.2,
                          style_target: int | None = None) -> tuple[list[ClientDataset], StyleSet]:
    """Generate every client's warped, noised phantoms plus the shared clean style set.

    Exactly one client must be clean; it becomes the style target. When several
    clients are clean, ``style_target`` must name which one.
    """
    noise = [NoiseSpec.parse(n) for n in noise_assignment]
    if len(noise) != n_clients:
        raise ConfigError(f"noise_assignment has {len(noise)} entries for {n_clients} clients")
    if not 1 <= n_clients <= MAX_CLIENTS:
        raise ConfigError(f"n_clients must be in [1, {MAX_CLIENTS}], got {n_clients}")
    if not 1 <= samples_per_client <= MAX_SAMPLES_PER_CLIENT:
        raise ConfigError(f"samples_per_client must be in [1, {MAX_SAMPLES_PER_CLIENT}]")
    if not 20 <= style_set_size <= 50:
        raise ConfigError(f"style_set_size must be in [20, 50], got {style_set_size}")
    if base_seed < 0:
        raise ConfigError("base_seed must be >= 0")
    for k, spec in enumerate(noise):
        if spec.kind in ("gaussian", "mixed") and spec.sigma == 0:
            raise ConfigError(f"client {k}: sigma = 0 is only allowed for clean, inversion, contrast_enhanced")
    clean = [k for k, s in enumerate(noise) if s.kind == "clean"]
    if style_target is None:
        if len(clean) != 1:
            raise ConfigError(f"exactly one clean client is required to serve as style target, got {len(clean)}"
                              " (pass style_target to choose among several)")
        style_target = clean[0]
    elif style_target not in clean:
        raise ConfigError(f"style_target {style_target} is not a clean client")
    shifts = list(structure_shift_per_client) if structure_shift_per_client is not None else [0.0] * n_clients
    if len(shifts) != n_clients:
        raise ConfigError(f"structure_shift_per_client has {len(shifts)} entries for {n_clients} clients")

    clients = []
    for k in range(n_clients):
        seeds = [client_seed(base_seed, k, i) for i in range(samples_per_client)]
        imgs, masks = [], []
        for i, s in enumerate(seeds):
            img, m = generate_phantom(s, resolution, shifts[k])
            img, m = random_warp(img, m, derive_seed(base_seed, k, i, _WARP), warp_magnitude)
            imgs.append(apply_noise(img, noise[k], derive_seed(base_seed, k, i, _NOISE)))
            masks.append(m)
        train, val = _split(samples_per_client, val_fraction, base_seed, k, _SPLIT)
        clients.append(ClientDataset(k, np.stack(imgs), np.stack(masks), noise[k], k == style_target,
                                     train, val, seeds, float(shifts[k])))

    sseeds = [style_seed(base_seed, i) for i in range(style_set_size)]
    simgs = []
    for i, s in enumerate(sseeds):
        img, m = generate_phantom(s, resolution, 0.0)
        simgs.append(random_warp(img, m, derive_seed(base_seed, MAX_CLIENTS, i, _WARP), warp_magnitude)[0])
    return clients, StyleSet(np.stack(simgs), sseeds)


def with_noise(clients: Sequence[ClientDataset], noise: NoiseSpec | str) -> list[ClientDataset]:
    """Copies of ``clients`` carrying a different noise descriptor (images untouched)."""
    spec = NoiseSpec.parse(noise)
    return [replace(c, noise=spec) for c in clients]
