"""Audio-side feature pipelines.

Two feature sources feed the training pipeline:

* ``contextual_embedding`` — activations of a pretrained speech model,
  ingested from files at 50 Hz (dim 1024 for the real model; synthetic
  features carry their own dim in metadata).
* ``melspectrogram`` — 40-band log-mel power extracted here from raw audio.

Both are interpolated to 120 Hz and averaged over non-overlapping 3-second
windows to yield one target vector per segment. Targets are z-scored with
statistics fit on a single split and frozen (the zero-shot protocol applies
the pretraining train-split statistics to every evaluation).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InsufficientDataError, InvalidSpecError

CONTEXTUAL_DIM = 1024
MEL_BANDS = 40
TARGET_FRAME_HZ = 120.0
SEGMENT_S = 3.0
CHUNK_S = 30.0
MIN_TAIL_S = 10.0
ZSCORE_STD_FLOOR = 1e-8
LOG_MEL_FLOOR = 1e-10


@dataclass
class FeatureFrameSeries:
    """A (time x dim) block of feature frames at a fixed frame rate."""

    frames: np.ndarray
    frame_rate_hz: float
    source: str  # contextual_embedding | melspectrogram | synthetic
    t0: float = 0.0

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise InvalidSpecError("frames must be 2-D (time x dim)")
        if self.frame_rate_hz <= 0:
            raise InvalidSpecError("frame_rate_hz must be > 0")
        if self.source == "contextual_embedding" and self.dim != CONTEXTUAL_DIM:
            raise InvalidSpecError(
                f"contextual embeddings have dim {CONTEXTUAL_DIM}, got {self.dim}")
        if self.source == "melspectrogram" and self.dim != MEL_BANDS:
            raise InvalidSpecError(f"melspectrograms have dim {MEL_BANDS}, got {self.dim}")

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def duration_s(self) -> float:
        return self.n_frames / self.frame_rate_hz


@dataclass
class SegmentFeature:
    """One 3-second target vector plus the provenance the probes need."""

    vector: np.ndarray
    chunk_id: str
    segment_index: int
    day_index: int = 0
    hour: float = float("nan")


@dataclass(frozen=True)
class ZScoreStats:
    """Per-dimension mean/std of a split, frozen after fitting."""

    mean: np.ndarray
    std: np.ndarray
    source_split: str = "train"


def chunk_spans(duration_s: float, chunk_s: float = CHUNK_S,
                min_tail_s: float = MIN_TAIL_S) -> list[tuple[float, float]]:
    """Consecutive chunk intervals; a final partial chunk is kept iff >= min_tail_s."""
    spans = []
    n_full = int(duration_s // chunk_s)
    for i in range(n_full):
        spans.append((i * chunk_s, (i + 1) * chunk_s))
    tail = duration_s - n_full * chunk_s
    if tail >= min_tail_s:
        spans.append((n_full * chunk_s, duration_s))
    return spans


def chunk_audio(series: FeatureFrameSeries, chunk_s: float = CHUNK_S,
                min_tail_s: float = MIN_TAIL_S) -> list[FeatureFrameSeries]:
    """Split a frame series into 30 s chunks, discarding short tails."""
    out = []
    for start_s, end_s in chunk_spans(series.duration_s, chunk_s, min_tail_s):
        i0 = int(round(start_s * series.frame_rate_hz))
        i1 = int(round(end_s * series.frame_rate_hz))
        out.append(replace(series, frames=series.frames[i0:i1],
                           t0=series.t0 + start_s))
    return out


def resample_frames(series: FeatureFrameSeries, target_hz: float) -> FeatureFrameSeries:
    """Per-dimension linear interpolation onto a new frame grid (either direction).

    The last output instants can fall past the last input frame time; those
    are linearly extrapolated from the final two frames so that exactly
    linear inputs stay exactly linear.
    """
    if series.n_frames < 2:
        raise InsufficientDataError("need at least 2 frames to interpolate")
    n_out = int(round(series.n_frames * target_hz / series.frame_rate_hz))
    t_in = np.arange(series.n_frames) / series.frame_rate_hz
    t_out = np.arange(n_out) / target_hz
    idx = np.clip(np.searchsorted(t_in, t_out, side="right") - 1, 0, series.n_frames - 2)
    w = (t_out - t_in[idx]) / (t_in[idx + 1] - t_in[idx])
    out = (1.0 - w)[:, None] * series.frames[idx] + w[:, None] * series.frames[idx + 1]
    return replace(series, frames=out, frame_rate_hz=float(target_hz))


def interpolate_frames(series: FeatureFrameSeries,
                       target_hz: float = TARGET_FRAME_HZ) -> FeatureFrameSeries:
    """Densify ingested embeddings (e.g. 50 Hz -> 120 Hz) by linear interpolation."""
    if series.frame_rate_hz > target_hz:
        raise InvalidSpecError("interpolate_frames only densifies; use resample_frames to go down")
    return resample_frames(series, target_hz)


def segment_average(series: FeatureFrameSeries, window_s: float = SEGMENT_S,
                    chunk_id: str = "") -> list[SegmentFeature]:
    """Mean vector per non-overlapping window; a trailing partial window is dropped."""
    per_window = int(round(window_s * series.frame_rate_hz))
    n_seg = series.n_frames // per_window
    if n_seg == 0:
        return []
    trimmed = series.frames[:n_seg * per_window]
    means = trimmed.reshape(n_seg, per_window, series.dim).mean(axis=1)
    return [SegmentFeature(vector=means[j], chunk_id=chunk_id, segment_index=j)
            for j in range(n_seg)]


def segment_matrix(series: FeatureFrameSeries, window_s: float = SEGMENT_S) -> np.ndarray:
    """Array form of :func:`segment_average`: (n_segments, dim)."""
    per_window = int(round(window_s * series.frame_rate_hz))
    n_seg = series.n_frames // per_window
    if n_seg == 0:
        return np.empty((0, series.dim))
    return series.frames[:n_seg * per_window].reshape(n_seg, per_window, series.dim).mean(axis=1)


def fit_zscore(train_vectors: np.ndarray, source_split: str = "train") -> ZScoreStats:
    """Per-dimension mean/std over one split; std floored so no dim divides by ~0."""
    v = np.asarray(train_vectors, dtype=np.float64)
    if v.ndim != 2 or v.shape[0] == 0:
        raise InsufficientDataError("need a non-empty (N, dim) array to fit z-score stats")
    mean = v.mean(axis=0)
    std = np.maximum(v.std(axis=0), ZSCORE_STD_FLOOR)
    return ZScoreStats(mean=mean, std=std, source_split=source_split)


def apply_zscore(vectors: np.ndarray, stats: ZScoreStats) -> np.ndarray:
    return (np.asarray(vectors, dtype=np.float64) - stats.mean) / stats.std


def invert_zscore(z: np.ndarray, stats: ZScoreStats) -> np.ndarray:
    return np.asarray(z, dtype=np.float64) * stats.std + stats.mean


# ---------------------------------------------------------------------------
# log-mel extraction
# ---------------------------------------------------------------------------

def _hz_to_mel(f):
    f = np.asarray(f, dtype=np.float64)
    lin = f / (200.0 / 3.0)
    log_region = f >= 1000.0
    return np.where(log_region, 15.0 + 27.0 * np.log(np.maximum(f, 1e-12) / 1000.0) / np.log(6.4), lin)


def _mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    lin = m * (200.0 / 3.0)
    log_region = m >= 15.0
    return np.where(log_region, 1000.0 * np.exp(np.log(6.4) * (m - 15.0) / 27.0), lin)


def mel_band_edges(rate_hz: float, n_mels: int = MEL_BANDS) -> np.ndarray:
    """n_mels + 2 mel-spaced frequencies from 0 Hz to rate/2."""
    mel_pts = np.linspace(_hz_to_mel(0.0), _hz_to_mel(rate_hz / 2.0), n_mels + 2)
    return _mel_to_hz(mel_pts)


def mel_center_frequencies(rate_hz: float, n_mels: int = MEL_BANDS) -> np.ndarray:
    return mel_band_edges(rate_hz, n_mels)[1:-1]


def mel_filterbank(rate_hz: float, n_fft: int = 512, n_mels: int = MEL_BANDS) -> np.ndarray:
    """(n_mels, n_fft//2 + 1) triangular filters, area-normalized per band."""
    edges = mel_band_edges(rate_hz, n_mels)
    fft_freqs = np.arange(n_fft // 2 + 1) * rate_hz / n_fft
    fb = np.zeros((n_mels, n_fft // 2 + 1))
    for m in range(n_mels):
        lo, center, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (fft_freqs - lo) / (center - lo)
        down = (hi - fft_freqs) / (hi - center)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
        fb[m] *= 2.0 / (hi - lo)  # equal-area normalization
    return fb


def mel_power(audio: np.ndarray, rate_hz: float, n_fft: int = 512,
              hop: int = 128, n_mels: int = MEL_BANDS, t0: float = 0.0) -> FeatureFrameSeries:
    """Linear mel power frames at rate_hz / hop (centered STFT, Hann window)."""
    audio = np.asarray(audio, dtype=np.float64)
    if audio.ndim != 1:
        raise InvalidSpecError("audio must be mono (1-D)")
    if not np.all(np.isfinite(audio)):
        raise InvalidSpecError("audio contains non-finite samples")
    if rate_hz < 2.0 * n_mels:
        raise InvalidSpecError(f"rate {rate_hz} Hz too low for {n_mels} mel bands")
    pad = n_fft // 2
    padded = np.pad(audio, pad, mode="reflect" if len(audio) > pad else "constant")
    n_frames = 1 + len(audio) // hop
    window = np.hanning(n_fft + 1)[:-1]  # periodic Hann
    starts = np.arange(n_frames) * hop
    frames = padded[starts[:, None] + np.arange(n_fft)[None, :]] * window
    spec = np.abs(np.fft.rfft(frames, axis=1)) ** 2
    fb = mel_filterbank(rate_hz, n_fft, n_mels)
    return FeatureFrameSeries(frames=spec @ fb.T, frame_rate_hz=rate_hz / hop,
                              source="melspectrogram", t0=t0)


def melspectrogram(audio: np.ndarray, rate_hz: float, n_fft: int = 512,
                   hop: int = 128, n_mels: int = MEL_BANDS, t0: float = 0.0,
                   out_hz: float = TARGET_FRAME_HZ) -> FeatureFrameSeries:
    """Log-scaled mel power, interpolated to the 120 Hz pipeline frame rate."""
    power = mel_power(audio, rate_hz, n_fft, hop, n_mels, t0)
    log_frames = np.log(np.maximum(power.frames, LOG_MEL_FLOOR))
    log_series = replace(power, frames=log_frames)
    return resample_frames(log_series, out_hz)


def mel_centroid(power_vector: np.ndarray, center_freqs_hz: np.ndarray) -> float:
    """Energy-weighted mean frequency of a linear mel power vector, in Hz.

    Silent input has no defined centroid and returns NaN; probe targets drop
    non-finite rows.
    """
    p = np.asarray(power_vector, dtype=np.float64)
    if np.any(p < 0):
        raise InvalidSpecError("mel power must be nonnegative")
    total = p.sum()
    if total <= 0:
        return float("nan")
    return float((center_freqs_hz * p).sum() / total)
