"""Volume data model, synthetic phantoms, volume file I/O and enface rendering.

Volumes are stored as ``[repeat][y][x][z]`` float32 arrays: ``y`` is the
slow axis, ``x`` the fast (lateral) axis and ``z`` depth. A B-frame is the
``x`` by ``z`` plane at one ``y``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import BadMagicError, ConfigError, FormatError, TruncatedPayloadError, UnsupportedVersionError

VOLUME_MAGIC = b"OCTV"
VOLUME_VERSION = 1
_DTYPE_F32 = 0
_HEADER = struct.Struct("<4sHBBIIII")

RAYLEIGH_MEAN = math.sqrt(math.pi / 2.0)


@dataclass
class MultiRepeatVolume:
    data: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 4:
            raise ConfigError(f"volume must be 4-D [repeat][y][x][z], got shape {data.shape}")
        if data.shape[0] < 1:
            raise ConfigError("volume needs at least one repeat")
        if not np.all(np.isfinite(data)) or np.any(data < 0):
            raise ConfigError("volume values must be finite and non-negative")
        self.data = data

    @property
    def nr(self) -> int:
        return self.data.shape[0]

    @property
    def ny(self) -> int:
        return self.data.shape[1]

    @property
    def nx(self) -> int:
        return self.data.shape[2]

    @property
    def nz(self) -> int:
        return self.data.shape[3]

    def bframe(self, y: int) -> BFrameEnsemble:
        return BFrameEnsemble(self.data[:, y], y_index=y)

    def repeats(self, n: int) -> MultiRepeatVolume:
        """The first ``n`` repeats as a new volume (shares no memory)."""
        if not 1 <= n <= self.nr:
            raise ConfigError(f"requested {n} repeats from a volume with {self.nr}")
        return MultiRepeatVolume(self.data[:n].copy(), dict(self.meta))


@dataclass
class BFrameEnsemble:
    """NR co-located B-frames, each of shape X by Z."""

    frames: np.ndarray
    y_index: int = 0

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim != 3 or frames.shape[0] < 1:
            raise ConfigError(f"ensemble must be [NR, X, Z] with NR >= 1, got {frames.shape}")
        self.frames = frames

    @property
    def nr(self) -> int:
        return self.frames.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames.shape[1:]

    def first(self, n: int) -> BFrameEnsemble:
        if not 1 <= n <= self.nr:
            raise ConfigError(f"requested {n} frames from an ensemble of {self.nr}")
        return BFrameEnsemble(self.frames[:n], self.y_index)


@dataclass
class EnfaceImage:
    """Top-down projection. ``pixels`` is indexed ``[y][x]`` with values in [0, 1]."""

    pixels: np.ndarray
    scale: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if np.any(self.pixels < 0) or np.any(self.pixels > 1):
            raise ConfigError("enface pixels must lie in [0, 1]")


@dataclass
class PhantomConfig:
    nr: int = 6
    nx: int = 64
    ny: int = 64
    nz: int = 64
    vessel_count: int = 3
    radius_min: float = 1.5
    radius_max: float = 3.0
    speckle_contrast: float = 1.0
    decorrelation: float = 1.0
    bulk_motion: int = 0
    seed: int = 0
    # amplitude scale of vessel lumen relative to tissue (blood is hypo-reflective)
    vessel_reflectivity: float = 0.6
    # per-repeat additive noise std and multiplicative gain jitter; 0 disables
    noise_level: float = 0.0
    gain_jitter: float = 0.0
    segments: int = 6

    def validate(self) -> None:
        if min(self.nr, self.nx, self.ny, self.nz) < 1:
            raise ConfigError("phantom dims must be positive")
        if self.vessel_count < 0 or self.segments < 1:
            raise ConfigError("vessel_count must be >= 0 and segments >= 1")
        if not 0.0 <= self.decorrelation <= 1.0:
            raise ConfigError("decorrelation must lie in [0, 1]")
        if not 0.0 <= self.speckle_contrast <= 1.0:
            raise ConfigError("speckle_contrast must lie in [0, 1]")
        if not 0.0 < self.radius_min <= self.radius_max:
            raise ConfigError("need 0 < radius_min <= radius_max")
        if self.radius_max >= min(self.nx, self.nz) / 4:
            raise ConfigError("radius_max must be below min(nx, nz) / 4")
        if self.bulk_motion < 0 or 2 * self.bulk_motion >= min(self.nx, self.nz):
            raise ConfigError("bulk_motion must be in [0, min(nx, nz) / 2)")
        if self.vessel_reflectivity < 0 or self.noise_level < 0 or not 0 <= self.gain_jitter < 1:
            raise ConfigError("vessel_reflectivity, noise_level must be >= 0 and gain_jitter in [0, 1)")


def shift_zero_fill(a: np.ndarray, shifts, axes) -> np.ndarray:
    """Integer translation of ``a`` along ``axes``; exposed borders become 0."""
    out = np.zeros_like(a)
    src = [slice(None)] * a.ndim
    dst = [slice(None)] * a.ndim
    for s, ax in zip(shifts, axes):
        s = int(s)
        n = a.shape[ax]
        if abs(s) >= n:
            return out
        if s >= 0:
            src[ax], dst[ax] = slice(0, n - s), slice(s, n)
        else:
            src[ax], dst[ax] = slice(-s, n), slice(0, n + s)
    out[tuple(dst)] = a[tuple(src)]
    return out


def _walk_vessel(rng, cfg: PhantomConfig, radius: float) -> list[np.ndarray]:
    # points in (y, x, z); mostly parallel to the surface like dermal plexus vessels
    lo = np.array([radius, radius, radius])
    hi = np.array([cfg.ny - 1 - radius, cfg.nx - 1 - radius, cfg.nz - 1 - radius])
    hi = np.maximum(hi, lo)
    p = lo + rng.random(3) * (hi - lo)
    theta = rng.uniform(0, 2 * np.pi)
    step = max(cfg.nx, cfg.ny) / 4.0
    points = [p]
    for _ in range(cfg.segments):
        theta += rng.normal(0.0, 0.4)
        dz = rng.normal(0.0, cfg.nz / 16.0)
        q = p + np.array([step * np.sin(theta), step * np.cos(theta), dz])
        q = np.clip(q, lo, hi)
        points.append(q)
        p = q
    return points


def _rasterize_segment(mask: np.ndarray, a: np.ndarray, b: np.ndarray, radius: float) -> None:
    lo = np.maximum(np.floor(np.minimum(a, b) - radius).astype(int), 0)
    hi = np.minimum(np.ceil(np.maximum(a, b) + radius).astype(int) + 1, mask.shape)
    if np.any(hi <= lo):
        return
    grid = np.stack(np.meshgrid(*[np.arange(l, h) for l, h in zip(lo, hi)], indexing="ij"), axis=-1)
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        t = np.zeros(grid.shape[:-1])
    else:
        t = np.clip(((grid - a) @ ab) / denom, 0.0, 1.0)
    closest = a + t[..., None] * ab
    d2 = np.sum((grid - closest) ** 2, axis=-1)
    sub = mask[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    sub |= d2 <= radius * radius


def make_phantom(cfg: PhantomConfig) -> tuple[MultiRepeatVolume, np.ndarray]:
    """Generate a multi-repeat amplitude volume and its exact vessel mask.

    Static voxels carry one Rayleigh speckle draw shared by all repeats.
    Vessel voxels blend that draw with a fresh one per repeat,
    ``(1 - s) * static + s * fresh`` with ``s = cfg.decorrelation``, scaled by
    ``cfg.vessel_reflectivity``. Optional gain jitter, additive noise and
    integer bulk motion (zero-filled) are then applied per repeat. The mask
    is indexed ``[y][x][z]`` in the unshifted frame.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    shape = (cfg.ny, cfg.nx, cfg.nz)

    def speckle(size):
        return RAYLEIGH_MEAN + cfg.speckle_contrast * (rng.rayleigh(1.0, size) - RAYLEIGH_MEAN)

    mask = np.zeros(shape, dtype=bool)
    tubes = []
    for _ in range(cfg.vessel_count):
        radius = rng.uniform(cfg.radius_min, cfg.radius_max)
        points = _walk_vessel(rng, cfg, radius)
        for a, b in zip(points[:-1], points[1:]):
            _rasterize_segment(mask, a, b, radius)
        tubes.append({"radius": float(radius), "points": [p.tolist() for p in points]})

    static = speckle(shape)
    n_vessel = int(mask.sum())
    data = np.empty((cfg.nr,) + shape, dtype=np.float32)
    shifts = []
    gains = []
    for r in range(cfg.nr):
        rep = static.copy()
        fresh = speckle(n_vessel)
        s = cfg.decorrelation
        rep[mask] = cfg.vessel_reflectivity * ((1.0 - s) * static[mask] + s * fresh)
        g = 1.0 + cfg.gain_jitter * rng.uniform(-1.0, 1.0) if cfg.gain_jitter > 0 else 1.0
        rep *= g
        if cfg.noise_level > 0:
            rep = np.abs(rep + cfg.noise_level * rng.standard_normal(shape))
        if cfg.bulk_motion > 0:
            dx, dz = (int(v) for v in rng.integers(-cfg.bulk_motion, cfg.bulk_motion + 1, size=2))
            rep = shift_zero_fill(rep, (dx, dz), (1, 2))
        else:
            dx = dz = 0
        shifts.append([dx, dz])
        gains.append(float(g))
        data[r] = rep

    meta = {
        "generator": "phantom",
        "seed": cfg.seed,
        "config": asdict(cfg),
        "shifts": shifts,
        "gains": gains,
        "tubes": tubes,
    }
    return MultiRepeatVolume(data, meta), mask


def tube_volume_estimate(meta: dict) -> float:
    """Sum of pi r^2 * length over all vessel segments recorded in phantom meta."""
    total = 0.0
    for tube in meta.get("tubes", []):
        pts = np.asarray(tube["points"])
        lengths = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        total += math.pi * tube["radius"] ** 2 * float(lengths.sum())
    return total


def mip_enface(vol, z_range: tuple[int, int] | None = None, repeat: int = 0) -> EnfaceImage:
    """Maximum intensity projection along depth over ``z_range = (z0, z1)`` (half-open).

    ``vol`` is a :class:`MultiRepeatVolume` (``repeat`` selects the volume) or a
    ``[y][x][z]`` array. A flat projection normalizes to all zeros.
    """
    if isinstance(vol, MultiRepeatVolume):
        arr = vol.data[repeat]
    else:
        arr = np.asarray(vol)
        if arr.ndim != 3:
            raise ConfigError(f"expected a [y][x][z] volume, got shape {arr.shape}")
    nz = arr.shape[2]
    z0, z1 = (0, nz) if z_range is None else (int(z_range[0]), int(z_range[1]))
    if not 0 <= z0 < z1 <= nz:
        raise ConfigError(f"z_range {z_range} is empty or outside [0, {nz})")
    proj = arr[:, :, z0:z1].max(axis=2).astype(np.float64)
    lo, hi = float(proj.min()), float(proj.max())
    if hi == lo:
        pixels = np.zeros_like(proj)
    else:
        pixels = (proj - lo) / (hi - lo)
    return EnfaceImage(pixels, (lo, hi))


def save_volume(vol: MultiRepeatVolume, path) -> None:
    data = np.ascontiguousarray(vol.data, dtype="<f4")
    nr, ny, nx, nz = data.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(VOLUME_MAGIC, VOLUME_VERSION, _DTYPE_F32, 0, nr, ny, nx, nz))
        fh.write(data.tobytes())


def load_volume(path) -> MultiRepeatVolume:
    raw = Path(path).read_bytes()
    if raw[:4] != VOLUME_MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < _HEADER.size:
        raise TruncatedPayloadError(f"{path}: header truncated")
    _magic, version, dtype, _reserved, nr, ny, nx, nz = _HEADER.unpack_from(raw)
    if version != VOLUME_VERSION:
        raise UnsupportedVersionError(f"{path}: volume version {version} not supported")
    if dtype != _DTYPE_F32:
        raise FormatError(f"{path}: unsupported dtype code {dtype}")
    expected = nr * ny * nx * nz * 4
    payload = raw[_HEADER.size:]
    if len(payload) != expected:
        raise TruncatedPayloadError(
            f"{path}: header dims {nr}x{ny}x{nx}x{nz} need {expected} payload bytes, found {len(payload)}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(nr, ny, nx, nz).astype(np.float32)
    return MultiRepeatVolume(data, {"source": str(path)})


def export_png(img, path, bit_depth: int = 8) -> None:
    """Write a grayscale PNG, quantizing with round-half-up.

    Values must already lie in [0, 1]; callers clamp first.
    """
    pixels = img.pixels if isinstance(img, EnfaceImage) else np.asarray(img, dtype=np.float64)
    if pixels.ndim != 2:
        raise ConfigError(f"PNG export needs a 2-D image, got shape {pixels.shape}")
    if not np.all(np.isfinite(pixels)) or pixels.min() < 0 or pixels.max() > 1:
        raise ConfigError("PNG export needs values in [0, 1]")
    if bit_depth == 8:
        q = np.floor(pixels * 255.0 + 0.5).astype(np.uint8)
    elif bit_depth == 16:
        q = np.floor(pixels * 65535.0 + 0.5).astype(np.uint16)
    else:
        raise ConfigError(f"bit_depth must be 8 or 16, got {bit_depth}")
    Image.fromarray(q).save(path, format="PNG")
