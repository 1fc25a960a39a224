"""Registration, per-A-line alignment, patch tiling and intensity normalization."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data import BFrameEnsemble, shift_zero_fill
from .errors import ConfigError, RegistrationError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ShiftEstimate:
    dx: int
    dz: int
    peak_ratio: float


@dataclass(frozen=True)
class PatchBox:
    x0: int
    z0: int
    size: int = 192

    def slice(self, frame: np.ndarray) -> np.ndarray:
        return frame[..., self.x0:self.x0 + self.size, self.z0:self.z0 + self.size]


def _signed(idx, n):
    idx = np.asarray(idx)
    return np.where(idx > n // 2, idx - n, idx)


def _whiten(cross):
    mag = np.abs(cross)
    floor = 1e-12 * max(float(mag.max()), 1e-300)
    return cross / np.maximum(mag, floor)


def phase_correlate(ref: np.ndarray, moving: np.ndarray) -> ShiftEstimate:
    """Integer shift of ``moving`` relative to ``ref`` from the cross-power spectrum peak.

    A positive ``dx`` means the content of ``moving`` sits at larger x than
    in ``ref``.
    """
    f_ref = np.fft.fft2(ref.astype(np.float64))
    f_mov = np.fft.fft2(moving.astype(np.float64))
    surface = np.fft.ifft2(_whiten(f_mov * np.conj(f_ref))).real
    flat = int(np.argmax(surface))
    ix, iz = np.unravel_index(flat, surface.shape)
    peak = surface[ix, iz]
    nx, nz = surface.shape
    # second peak: global max outside the 3x3 neighbourhood of the main peak
    masked = surface.copy()
    for ox in (-1, 0, 1):
        for oz in (-1, 0, 1):
            masked[(ix + ox) % nx, (iz + oz) % nz] = -np.inf
    second = masked.max() if np.isfinite(masked.max()) else 0.0
    ratio = peak / second if second > 0 else np.inf
    ratio = float(max(min(ratio, 1e12), 1.0))
    return ShiftEstimate(int(_signed(ix, nx)), int(_signed(iz, nz)), ratio)


def register_frames(ensemble: BFrameEnsemble) -> tuple[BFrameEnsemble, list[ShiftEstimate]]:
    """Register every frame to frame 0 by 2-D phase correlation.

    Returns the aligned ensemble and one estimate per frame (frame 0 gets a
    zero shift). Shifts are applied with zero fill.
    """
    if ensemble.nr < 2:
        raise ConfigError("registration needs at least two frames")
    frames = ensemble.frames
    for i, f in enumerate(frames):
        if not np.any(f):
            raise RegistrationError(f"frame {i} of ensemble y={ensemble.y_index} is all zero", frame_index=i)
    ref = frames[0]
    aligned = [ref.copy()]
    shifts = [ShiftEstimate(0, 0, np.inf)]
    for f in frames[1:]:
        est = phase_correlate(ref, f)
        shifts.append(est)
        aligned.append(shift_zero_fill(f, (-est.dx, -est.dz), (0, 1)) if (est.dx or est.dz) else f.copy())
    return BFrameEnsemble(np.stack(aligned), ensemble.y_index), shifts


def aline_shifts(ensemble: BFrameEnsemble) -> tuple[np.ndarray, int]:
    """Per-A-line axial shifts of frames 1.. against frame 0.

    Returns an int array ``[NR, X]`` (row 0 is zero) and the number of
    A-lines skipped for having zero energy.
    """
    frames = ensemble.frames.astype(np.float64)
    nr, nx, nz = frames.shape
    spectra = np.fft.fft(frames, axis=-1)
    ref = spectra[0]
    ref_dead = ~np.any(frames[0], axis=-1)
    shifts = np.zeros((nr, nx), dtype=np.int64)
    skipped = 0
    for i in range(1, nr):
        dead = ref_dead | ~np.any(frames[i], axis=-1)
        cross = spectra[i] * np.conj(ref)
        mag = np.abs(cross)
        floor = 1e-12 * np.maximum(mag.max(axis=-1, keepdims=True), 1e-300)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            white = np.where(dead[:, None], 0.0, cross / np.maximum(mag, floor))
        surface = np.fft.ifft(white, axis=-1).real
        est = _signed(np.argmax(surface, axis=-1), nz)
        est[dead] = 0
        skipped += int(dead.sum())
        shifts[i] = est
    return shifts, skipped


def align_alines(ensemble: BFrameEnsemble) -> BFrameEnsemble:
    """Axially align each A-line of frames 1.. to the matching line of frame 0."""
    shifts, skipped = aline_shifts(ensemble)
    if skipped:
        log.debug("%d zero-energy A-lines left unshifted (y=%d)", skipped, ensemble.y_index)
    out = ensemble.frames.copy()
    for i, x in zip(*np.nonzero(shifts)):
        out[i, x] = shift_zero_fill(ensemble.frames[i, x], (-shifts[i, x],), (0,))
    return BFrameEnsemble(out, ensemble.y_index)


def _starts(extent: int, size: int) -> list[int]:
    starts = list(range(0, extent - size + 1, size))
    if starts[-1] + size < extent:
        starts.append(extent - size)
    return starts


def extract_patch_boxes(frame_w: int, frame_h: int, size: int = 192) -> list[PatchBox]:
    """Tile an X (``frame_w``) by Z (``frame_h``) frame with square boxes.

    Boxes step by ``size`` from the origin; one extra box flush with the far
    edge covers any remainder. Order is row-major (z outer, x inner).
    """
    if size < 1 or frame_w < size or frame_h < size:
        raise ConfigError(f"frame {frame_w}x{frame_h} is smaller than patch size {size}")
    return [PatchBox(x0, z0, size) for z0 in _starts(frame_h, size) for x0 in _starts(frame_w, size)]


def normalize_frame(frame: np.ndarray, lo_pct: float = 0.0, hi_pct: float = 99.9) -> np.ndarray:
    """Map the [lo_pct, hi_pct] percentile band linearly onto [0, 1] and clamp."""
    frame = np.asarray(frame, dtype=np.float64)
    lo, hi = np.percentile(frame, [lo_pct, hi_pct])
    if hi <= lo:
        return np.zeros(frame.shape)
    return np.clip((frame - lo) / (hi - lo), 0.0, 1.0)
