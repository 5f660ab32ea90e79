"""Signal-processing primitives for neural channels.

All operations are pure functions: they return new ``ChannelSeries`` and never
mutate their inputs, so they are safe to run concurrently across channels and
files.

Conventions baked in here:

* Filtering is a Butterworth biquad cascade applied forward-backward
  (zero-phase, no group delay).
* Resampling is windowed-sinc polyphase with a Kaiser window
  (beta 8.6, 64 taps per polyphase branch).
* Robust scaling is (x - median) / IQR with linearly interpolated quantiles.
* Gamma power is the analytic-signal amplitude of the 70-120 Hz band,
  computed FFT-wise in overlapping tiles (8 s tiles, 1 s tapers) so that
  arbitrarily long recordings fit in memory.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np
from scipy import signal as _sig

from .errors import AlignmentError, InsufficientDataError, InvalidSpecError

BUTTER_ORDER = 8          # biquad cascade order (see package decision notes)
PIPELINE_RATE_HZ = 40.0   # common rate all neural channels end up at
GAMMA_BAND_HZ = (70.0, 120.0)
_HILBERT_TILE_S = 8.0
_HILBERT_TAPER_S = 1.0
_RESAMPLE_TAPS_PER_PHASE = 64
_RESAMPLE_KAISER_BETA = 8.6


@dataclass(frozen=True)
class ChannelSeries:
    """One channel of regularly sampled data.

    ``t0`` is the absolute start time in seconds since the recording epoch.
    ``shaft_id``/``contact_index`` identify the physical electrode shaft and
    the contact's position along it, used for bipolar re-referencing.
    """

    samples: np.ndarray
    sample_rate_hz: float
    channel_id: str
    shaft_id: str = ""
    contact_index: int = 0
    t0: float = 0.0

    def __post_init__(self):
        if self.sample_rate_hz <= 0:
            raise InvalidSpecError(f"sample_rate_hz must be > 0, got {self.sample_rate_hz}")
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=np.float64))

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate_hz


@dataclass(frozen=True)
class FilterSpec:
    """Frequency band for :func:`bandpass`. ``kind`` selects the response."""

    low_hz: float
    high_hz: float
    kind: str = "bandpass"  # bandpass | highpass | lowpass

    def __post_init__(self):
        if self.kind not in ("bandpass", "highpass", "lowpass"):
            raise InvalidSpecError(f"unknown filter kind {self.kind!r}")
        if self.low_hz < 0:
            raise InvalidSpecError("low_hz must be >= 0")
        if self.high_hz <= self.low_hz:
            raise InvalidSpecError("high_hz must exceed low_hz")


def _design_sos(spec: FilterSpec, fs: float, order: int = BUTTER_ORDER) -> np.ndarray:
    nyq = fs / 2.0
    if spec.kind == "bandpass":
        if spec.high_hz >= nyq:
            raise InvalidSpecError(f"high cutoff {spec.high_hz} Hz >= Nyquist {nyq} Hz")
        if spec.low_hz <= 0:
            raise InvalidSpecError("bandpass low cutoff must be > 0")
        wn = [spec.low_hz, spec.high_hz]
        btype = "bandpass"
    elif spec.kind == "highpass":
        if spec.low_hz >= nyq:
            raise InvalidSpecError(f"cutoff {spec.low_hz} Hz >= Nyquist {nyq} Hz")
        wn = spec.low_hz
        btype = "highpass"
    else:
        if spec.high_hz >= nyq:
            raise InvalidSpecError(f"cutoff {spec.high_hz} Hz >= Nyquist {nyq} Hz")
        wn = spec.high_hz
        btype = "lowpass"
    return _sig.butter(order, wn, btype=btype, fs=fs, output="sos")


def _filtfilt_padlen(sos: np.ndarray) -> int:
    # mirror scipy.signal.sosfiltfilt's default padding length
    ntaps = 2 * sos.shape[0] + 1
    ntaps -= min((sos[:, 2] == 0).sum(), (sos[:, 5] == 0).sum())
    return 3 * ntaps


def bandpass_array(x: np.ndarray, fs: float, spec: FilterSpec,
                   order: int = BUTTER_ORDER, axis: int = -1) -> np.ndarray:
    """Zero-phase Butterworth filtering along ``axis`` of a float array."""
    sos = _design_sos(spec, fs, order)
    padlen = _filtfilt_padlen(sos)
    if x.shape[axis] <= 3 * padlen:
        raise InsufficientDataError(
            f"series of {x.shape[axis]} samples too short for zero-phase "
            f"filtering (need > {3 * padlen})")
    return _sig.sosfiltfilt(sos, x, axis=axis)


def bandpass(series: ChannelSeries, spec: FilterSpec, order: int = BUTTER_ORDER) -> ChannelSeries:
    """Apply a zero-phase Butterworth band filter; length, rate and t0 are preserved."""
    out = bandpass_array(series.samples, series.sample_rate_hz, spec, order)
    return replace(series, samples=out)


def _design_resample_kernel(up: int, down: int) -> np.ndarray:
    max_rate = max(up, down)
    ntaps = _RESAMPLE_TAPS_PER_PHASE * max_rate + 1
    cutoff = 1.0 / max_rate  # relative to Nyquist of the upsampled stream
    return _sig.firwin(ntaps, cutoff, window=("kaiser", _RESAMPLE_KAISER_BETA))


def resample_array(x: np.ndarray, fs_in: float, fs_out: float, axis: int = -1) -> np.ndarray:
    """Polyphase anti-aliased downsampling; output length round(n * fs_out / fs_in)."""
    if fs_out <= 0:
        raise InvalidSpecError("target rate must be > 0")
    if fs_out >= fs_in:
        raise InvalidSpecError(
            f"upsampling unsupported: target {fs_out} Hz >= input {fs_in} Hz")
    frac = Fraction(fs_out).limit_denominator(10**6) / Fraction(fs_in).limit_denominator(10**6)
    up, down = frac.numerator, frac.denominator
    h = _design_resample_kernel(up, down)
    y = _sig.resample_poly(x, up, down, axis=axis, window=h)
    n_out = int(round(x.shape[axis] * fs_out / fs_in))
    slicer = [slice(None)] * y.ndim
    slicer[axis] = slice(0, n_out)
    return y[tuple(slicer)]


def resample(series: ChannelSeries, target_hz: float) -> ChannelSeries:
    """Downsample with an anti-alias lowpass; t0 refers to the same instant."""
    out = resample_array(series.samples, series.sample_rate_hz, target_hz)
    return replace(series, samples=out, sample_rate_hz=float(target_hz))


def robust_scale_array(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """(x - median) / IQR along ``axis``; constant slices map to all zeros."""
    if x.shape[axis] < 4:
        raise InsufficientDataError("robust scaling needs at least 4 samples")
    med = np.median(x, axis=axis, keepdims=True)
    q25 = np.quantile(x, 0.25, axis=axis, keepdims=True)
    q75 = np.quantile(x, 0.75, axis=axis, keepdims=True)
    iqr = q75 - q25
    degenerate = iqr <= 0
    if np.any(degenerate):
        warnings.warn("degenerate IQR: constant channel scaled to all zeros",
                      RuntimeWarning, stacklevel=2)
    safe_iqr = np.where(degenerate, 1.0, iqr)
    out = (x - med) / safe_iqr
    return np.where(np.broadcast_to(degenerate, out.shape), 0.0, out)


def robust_scale(series: ChannelSeries) -> ChannelSeries:
    return replace(series, samples=robust_scale_array(series.samples))


def bipolar_rereference(channels: list[ChannelSeries]) -> list[ChannelSeries]:
    """Difference consecutive contacts within each shaft.

    Output channel k of a shaft is contact(k+1) - contact(k) in contact-index
    order; a shaft with a single contact contributes nothing. Shaft order
    follows first appearance in the input.
    """
    shafts: dict[str, list[ChannelSeries]] = {}
    for ch in channels:
        shafts.setdefault(ch.shaft_id, []).append(ch)
    out: list[ChannelSeries] = []
    for shaft_id, members in shafts.items():
        members = sorted(members, key=lambda c: c.contact_index)
        for k in range(len(members) - 1):
            a, b = members[k], members[k + 1]
            if len(a) != len(b):
                raise AlignmentError(
                    f"shaft {shaft_id!r}: contacts {a.channel_id}/{b.channel_id} "
                    f"differ in length ({len(a)} vs {len(b)})")
            if a.sample_rate_hz != b.sample_rate_hz or a.t0 != b.t0:
                raise AlignmentError(
                    f"shaft {shaft_id!r}: contacts {a.channel_id}/{b.channel_id} "
                    "differ in rate or start time")
            out.append(ChannelSeries(
                samples=b.samples - a.samples,
                sample_rate_hz=a.sample_rate_hz,
                channel_id=f"{b.channel_id}-{a.channel_id}",
                shaft_id=shaft_id,
                contact_index=k,
                t0=a.t0,
            ))
    return out


def _tiled_hilbert_envelope(x: np.ndarray, fs: float,
                            tile_s: float = _HILBERT_TILE_S,
                            taper_s: float = _HILBERT_TAPER_S) -> np.ndarray:
    """|analytic signal| computed on overlapping tiles along the last axis.

    Each tile is extended by one taper on both sides before the FFT; the
    tapers are discarded afterwards, confining wrap-around edge effects to
    the file boundaries.
    """
    n = x.shape[-1]
    tile = max(1, int(round(tile_s * fs)))
    taper = max(1, int(round(taper_s * fs)))
    out = np.empty_like(x, dtype=np.float64)
    start = 0
    while start < n:
        stop = min(start + tile, n)
        lo = max(0, start - taper)
        hi = min(n, stop + taper)
        env = np.abs(_sig.hilbert(x[..., lo:hi], axis=-1))
        out[..., start:stop] = env[..., start - lo:stop - lo]
        start = stop
    return out


def gamma_power_array(x: np.ndarray, fs: float,
                      band: tuple[float, float] = GAMMA_BAND_HZ,
                      out_hz: float = PIPELINE_RATE_HZ) -> np.ndarray:
    """Band-limited amplitude envelope, downsampled to the pipeline rate."""
    if fs <= 2.0 * band[1]:
        raise InvalidSpecError(
            f"rate {fs} Hz too low for a {band[1]} Hz band (need > {2 * band[1]})")
    xb = bandpass_array(x, fs, FilterSpec(band[0], band[1], "bandpass"))
    env = _tiled_hilbert_envelope(xb, fs)
    env = resample_array(env, fs, out_hz)
    return np.maximum(env, 0.0)  # resampling ringing may undershoot zero


def gamma_power(series: ChannelSeries,
                band: tuple[float, float] = GAMMA_BAND_HZ,
                out_hz: float = PIPELINE_RATE_HZ) -> ChannelSeries:
    out = gamma_power_array(series.samples, series.sample_rate_hz, band, out_hz)
    return replace(series, samples=out, sample_rate_hz=float(out_hz))
