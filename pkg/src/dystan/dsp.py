"""Signal conditioning for 13-channel IMU segments.

Chain: per-sensor zero-phase filtering (gravity removal, Butterworth
high/low-pass, Chebyshev-I low-pass), linear resampling 50 -> 40 Hz,
2.5 s windows with 50 % overlap, and per-channel standardization whose
statistics always come from a training split.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal as sps

from .errors import ConfigError, InputError, UsageError

ACCEL_ROWS = slice(0, 3)
GYRO_ROWS = slice(3, 6)
MAG_ROWS = slice(6, 9)
QUAT_ROWS = slice(9, 13)
NUM_CHANNELS = 13

WINDOW_LEN = 100
WINDOW_HOP = 50
STD_FLOOR = 1e-8

# pipeline constants: gravity estimate + drift high-pass at 0.3 Hz,
# smoothing low-pass at 20 Hz (also the post-resampling Nyquist)
GRAVITY_CUTOFF_HZ = 0.3
DRIFT_CUTOFF_HZ = 0.3
SMOOTH_CUTOFF_HZ = 20.0
MAG_RIPPLE_DB = 0.001


@dataclass
class FilterDesign:
    """An IIR filter as a cascade of second-order sections.

    ``sections`` has one row (b0, b1, b2, a1, a2) per biquad, a0 = 1.
    """

    family: str
    kind: str
    order: int
    cutoff_hz: float
    ripple_db: float | None
    sample_rate_hz: float
    sections: np.ndarray

    def sos(self):
        """scipy layout (b0, b1, b2, a0, a1, a2)."""
        b = self.sections[:, :3]
        a = np.column_stack([np.ones(len(self.sections)), self.sections[:, 3:]])
        return np.hstack([b, a])

    def poles(self):
        return np.concatenate(
            [np.roots([1.0, a1, a2]) for _, _, _, a1, a2 in self.sections]
        )


@dataclass
class SensorSegment:
    """13 x N sensor matrix (accel, gyro, mag, quaternion rows)."""

    channels: np.ndarray
    sample_rate_hz: float
    start_time: float = 0.0

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.float64)
        if self.channels.ndim != 2 or self.channels.shape[0] != NUM_CHANNELS:
            raise InputError(
                f"expected {NUM_CHANNELS} channel rows, got shape {self.channels.shape}"
            )


def _validate_cutoff(cutoff_hz, fs_hz):
    if not 0.0 < cutoff_hz < fs_hz / 2.0:
        raise ConfigError(
            f"cutoff {cutoff_hz} Hz must lie strictly between 0 and Nyquist "
            f"({fs_hz / 2.0} Hz)"
        )


def _as_design(sos, family, kind, order, cutoff_hz, ripple_db, fs_hz):
    sections = np.hstack([sos[:, :3], sos[:, 4:]])
    design = FilterDesign(family, kind, order, cutoff_hz, ripple_db, fs_hz, sections)
    if np.any(np.abs(design.poles()) >= 1.0):
        raise ConfigError(
            f"{family} order={order} cutoff={cutoff_hz} at fs={fs_hz} is unstable"
        )
    return design


def design_butterworth(order, cutoff_hz, fs_hz, kind):
    """Butterworth prototype, pre-warped bilinear transform, SOS cascade."""
    if not 1 <= order <= 8:
        raise ConfigError(f"supported Butterworth orders are 1..8, got {order}")
    if kind not in ("lowpass", "highpass"):
        raise ConfigError(f"kind must be lowpass or highpass, got {kind!r}")
    _validate_cutoff(cutoff_hz, fs_hz)
    sos = sps.butter(order, cutoff_hz, btype=kind, fs=fs_hz, output="sos")
    return _as_design(sos, "butterworth", kind, order, cutoff_hz, None, fs_hz)


def design_chebyshev1(order, ripple_db, cutoff_hz, fs_hz):
    """Chebyshev Type-I low-pass with the given passband ripple."""
    if ripple_db <= 0:
        raise ConfigError(f"ripple must be > 0 dB, got {ripple_db}")
    if order < 1:
        raise ConfigError(f"order must be >= 1, got {order}")
    _validate_cutoff(cutoff_hz, fs_hz)
    sos = sps.cheby1(order, ripple_db, cutoff_hz, btype="lowpass", fs=fs_hz, output="sos")
    return _as_design(sos, "chebyshev1", "lowpass", order, cutoff_hz, ripple_db, fs_hz)


def magnitude_response(design, freqs_hz):
    """|H| of the cascade on the unit circle at the given frequencies."""
    freqs_hz = np.atleast_1d(np.asarray(freqs_hz, dtype=np.float64))
    z_inv = np.exp(-2j * np.pi * freqs_hz / design.sample_rate_hz)
    h = np.ones_like(z_inv)
    for b0, b1, b2, a1, a2 in design.sections:
        h *= (b0 + b1 * z_inv + b2 * z_inv**2) / (1.0 + a1 * z_inv + a2 * z_inv**2)
    return np.abs(h)


def filtfilt(design, x):
    """Zero-phase forward-backward filtering.

    Odd-reflection padding of 3 x order samples at each end; each pass is
    seeded with its steady-state response to the first padded sample, so
    constants pass through filters with unit DC gain exactly.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise InputError(f"filtfilt expects a 1-d signal, got shape {x.shape}")
    pad = 3 * design.order
    if len(x) <= pad:
        raise InputError(
            f"signal of length {len(x)} too short for order-{design.order} "
            f"filtering (needs > {pad} samples)"
        )
    left = 2.0 * x[0] - x[pad:0:-1]
    right = 2.0 * x[-1] - x[-2 : -pad - 2 : -1]
    ext = np.concatenate([left, x, right])

    sos = design.sos()
    zi = sps.sosfilt_zi(sos)
    y, _ = sps.sosfilt(sos, ext, zi=zi * ext[0])
    y = y[::-1]
    y, _ = sps.sosfilt(sos, y, zi=zi * y[0])
    y = y[::-1]
    return y[pad : pad + len(x)]


def remove_gravity(accel, fs_hz):
    """Subtract a 0.3 Hz low-pass gravity estimate from each axis."""
    accel = np.asarray(accel, dtype=np.float64)
    if accel.ndim != 2 or accel.shape[0] != 3:
        raise InputError(f"expected a 3 x N acceleration matrix, got {accel.shape}")
    lp = design_butterworth(3, GRAVITY_CUTOFF_HZ, fs_hz, "lowpass")
    gravity = np.vstack([filtfilt(lp, row) for row in accel])
    return accel - gravity


def preprocess_segment(segment):
    """Per-sensor conditioning of a 50 Hz segment; quaternions untouched.

    accel: gravity removal, 0.3 Hz high-pass, 20 Hz low-pass (Butterworth
    order 3); gyro: 20 Hz low-pass; mag: Chebyshev-I order 2, 0.001 dB
    ripple, 20 Hz low-pass.
    """
    fs = segment.sample_rate_hz
    hp = design_butterworth(3, DRIFT_CUTOFF_HZ, fs, "highpass")
    lp = design_butterworth(3, SMOOTH_CUTOFF_HZ, fs, "lowpass")
    cheb = design_chebyshev1(2, MAG_RIPPLE_DB, SMOOTH_CUTOFF_HZ, fs)

    out = segment.channels.copy()
    accel = remove_gravity(out[ACCEL_ROWS], fs)
    for i, row in enumerate(accel):
        out[i] = filtfilt(lp, filtfilt(hp, row))
    for i in range(GYRO_ROWS.start, GYRO_ROWS.stop):
        out[i] = filtfilt(lp, out[i])
    for i in range(MAG_ROWS.start, MAG_ROWS.stop):
        out[i] = filtfilt(cheb, out[i])
    # quaternion rows pass through bit-exact
    return SensorSegment(out, fs, segment.start_time)


def resample_50_to_40(segment):
    """Linear interpolation onto the uniform 40 Hz grid, same span."""
    if segment.sample_rate_hz != 50.0:
        raise InputError(
            f"resampler expects a 50 Hz segment, got {segment.sample_rate_hz} Hz"
        )
    n_in = segment.channels.shape[1]
    n_out = (n_in * 4) // 5
    t_in = np.arange(n_in) / 50.0
    t_out = np.arange(n_out) / 40.0
    out = np.vstack([np.interp(t_out, t_in, row) for row in segment.channels])
    return SensorSegment(out, 40.0, segment.start_time)


def segment_windows(channels):
    """Split a 13 x N matrix into 100-sample windows with hop 50.

    The trailing remainder shorter than one hop is discarded.
    """
    channels = np.asarray(channels, dtype=np.float64)
    n = channels.shape[-1]
    if n < WINDOW_LEN:
        raise InputError(f"segment of {n} samples is shorter than one window")
    count = (n - WINDOW_LEN) // WINDOW_HOP + 1
    return [
        channels[:, i * WINDOW_HOP : i * WINDOW_HOP + WINDOW_LEN].copy()
        for i in range(count)
    ]


def compute_standardization(windows):
    """Per-channel mean/std over a stack of training windows.

    Std is floored at 1e-8 so constant channels standardize to zero.
    """
    stack = _window_stack(windows)
    if stack.shape[0] < 2:
        raise UsageError("standardization needs at least 2 training windows")
    mean = stack.mean(axis=(0, 2))
    std = np.maximum(stack.std(axis=(0, 2)), STD_FLOOR)
    return mean, std


def apply_standardization(windows, stats):
    """Z-score windows with the given (training-split) statistics."""
    mean, std = stats
    stack = _window_stack(windows)
    return (stack - mean[None, :, None]) / std[None, :, None]


def _window_stack(windows):
    stack = np.asarray(windows, dtype=np.float64)
    if stack.ndim == 2:
        stack = stack[None]
    if stack.ndim != 3:
        raise InputError(f"expected windows of shape (N, C, T), got {stack.shape}")
    if stack.shape[0] == 0:
        raise UsageError("empty window set")
    return stack
