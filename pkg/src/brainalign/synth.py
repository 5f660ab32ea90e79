"""Synthetic ground-truth generator: the oracle behind every acceptance test.

A hidden feature process drives both sides of each pair:

* audio features: smooth latent trajectories (AR(1)-filtered noise at 50 Hz)
  with a planted two-state speech regime (a centered mean shift along a fixed
  direction), a planted slowly varying "spectral centroid" scalar along a
  second direction, and diurnal amplitude structure (quiet early/late hours).
* neural channels, emitted at a clinical-like 512 Hz so the DSP pipeline is
  exercised end to end:

      X(t) = gain * M @ (k * upsample(V))(t) + day_offset(day)
             + day_tone(day, t) + wander(t) + noise_sigma * eps(t)

  with M a fixed mixing matrix and k a causal one-pole smoothing kernel.

The cross-day drift has two parts. The constant per-day offsets match the
formula above but are annihilated by the 0.05 Hz highpass and per-file robust
scaling; the part meant to remain measurable after preprocessing is
``day_tone``: an in-band tone at an integer frequency (7 Hz) whose per-channel
loadings are redrawn each day. Because every 3-second window starts on an
integer second, the tone is phase-locked across windows, so the day loading
is a constant, linearly decodable pattern in every preprocessed window.

The task period gets a distribution shift: the room variant ("ambient") is
the feature stream plus small noise, the clean source variant ("true") is an
affine image A @ V + b of it, and the neural side is generated from the
ambient variant with an extra task-period noise multiplier (the brain hears
the room, and behaves differently during the task).

All randomness flows from Philox counter-based streams keyed by
(seed, purpose, day, file), so generation is deterministic per file and
safely parallel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy import signal as _sig

from . import corpus
from .errors import InvalidSpecError
from .rng import philox
from .features import FeatureFrameSeries, CHUNK_S, SEGMENT_S, chunk_spans

# Philox stream tags
_FEAT, _NOISE, _DRIFT, _WANDER, _MIX, _DIRS, _SHIFT, _GATE, _CENTROID, _AMBIENT, _CAL = range(1, 12)

DAY_TONE_HZ = 7.0  # integer Hz: phase-locked at every integer-second window start


@dataclass(frozen=True)
class SynthConfig:
    n_channels: int = 36
    feature_dim: int = 32
    n_days: int = 5
    files_per_day: int = 8
    file_duration_s: float = 1800.0
    start_hour: float = 8.0
    feature_rate_hz: float = 50.0
    neural_rate_hz: float = 512.0
    # coupling
    kernel_width_ms: float = 50.0
    coupling_gain: float = 1.0
    noise_sigma: float = 0.33          # noise RMS relative to unit signal RMS
    # latent feature structure
    feature_smoothness: float = 0.95   # AR(1) coefficient at 50 Hz
    speech_fraction: float = 0.4
    speech_mean_duration_s: float = 4.0
    speech_scale: float = 1.5
    centroid_scale: float = 2.0
    centroid_smoothness: float = 0.999
    diurnal_depth: float = 0.3
    # drift
    day_offset_scale: float = 0.5      # constant additive offset per channel per day
    day_tone_scale: float = 0.35       # in-band phase-locked tone loading per day
    wander_scale: float = 0.1
    # task-period distribution shift: the last task_file_count files of task_day
    task_day: int = 3
    task_file_count: int = 2
    shift_strength: float = 0.75       # A = (1-s) I + s Q, Q random orthogonal
    shift_bias_scale: float = 1.2
    ambient_noise: float = 0.05
    task_neural_noise: float = 2.0     # multiplier on noise_sigma during the task
    seed: int = 0

    def __post_init__(self):
        if min(self.n_channels, self.feature_dim, self.n_days, self.files_per_day) <= 0:
            raise InvalidSpecError("dims and counts must be positive")
        if self.noise_sigma < 0 or self.ambient_noise < 0:
            raise InvalidSpecError("noise scales must be >= 0")
        if not 0 < self.speech_fraction < 1:
            raise InvalidSpecError("speech_fraction must lie in (0, 1)")


@dataclass
class SynthBundle:
    out_dir: Path
    weeklong_manifest: Path
    task_manifest: Path
    truth: Path


def _rng(*key) -> np.random.Generator:
    return philox(*key)


class SynthWorld:
    """Deterministic generative model derived from a SynthConfig."""

    def __init__(self, cfg: SynthConfig):
        self.cfg = cfg
        d, n = cfg.feature_dim, cfg.n_channels
        if d < 2:
            raise InvalidSpecError("feature_dim must be >= 2 for the planted directions")
        dirs = _rng(cfg.seed, _DIRS)
        q, _ = np.linalg.qr(dirs.standard_normal((d, 2)))
        self.speech_dir = q[:, 0]
        self.centroid_dir = q[:, 1]
        self.mixing = _rng(cfg.seed, _MIX).standard_normal((n, d)) / np.sqrt(d)
        self.day_offsets = cfg.day_offset_scale * _rng(cfg.seed, _DRIFT, 0).standard_normal(
            (cfg.n_days + 1, n))
        self.day_tone = cfg.day_tone_scale * _rng(cfg.seed, _DRIFT, 1).standard_normal(
            (cfg.n_days + 1, n))
        shift_rng = _rng(cfg.seed, _SHIFT)
        Q, _ = np.linalg.qr(shift_rng.standard_normal((d, d)))
        self.shift_A = (1.0 - cfg.shift_strength) * np.eye(d) + cfg.shift_strength * Q
        b = shift_rng.standard_normal(d)
        self.shift_b = cfg.shift_bias_scale * b / np.linalg.norm(b)
        self.gain = self._calibrate_gain()

    # -- latent feature process --------------------------------------------

    def _speech_gate(self, n_frames: int, rng: np.random.Generator) -> np.ndarray:
        """Two-state regime with the configured stationary speech fraction."""
        cfg = self.cfg
        dur_speech = cfg.speech_mean_duration_s * cfg.feature_rate_hz
        dur_quiet = dur_speech * (1.0 - cfg.speech_fraction) / cfg.speech_fraction
        gate = np.empty(n_frames)
        pos = 0
        state = rng.random() < cfg.speech_fraction
        while pos < n_frames:
            mean = dur_speech if state else dur_quiet
            run = 1 + rng.geometric(1.0 / mean)
            gate[pos:pos + run] = 1.0 if state else 0.0
            pos += run
            state = not state
        return gate

    def _ar1(self, white: np.ndarray, phi: float) -> np.ndarray:
        b = [np.sqrt(1.0 - phi * phi)]
        a = [1.0, -phi]
        return _sig.lfilter(b, a, white, axis=0)

    def gen_features(self, duration_s: float, start_hour: float,
                     stream: tuple[int, ...]) -> tuple[FeatureFrameSeries, np.ndarray, np.ndarray]:
        """One file's latent features.

        Returns (series, speech gate per frame, centroid scalar per frame).
        """
        cfg = self.cfg
        n_frames = int(round(duration_s * cfg.feature_rate_hz))
        d = cfg.feature_dim
        rng = _rng(cfg.seed, _FEAT, *stream)
        base = self._ar1(rng.standard_normal((n_frames, d)), cfg.feature_smoothness)
        # keep the planted directions clean of background variance
        base -= np.outer(base @ self.speech_dir, self.speech_dir)
        base -= np.outer(base @ self.centroid_dir, self.centroid_dir)
        gate = self._speech_gate(n_frames, _rng(cfg.seed, _GATE, *stream))
        ctrack = self._ar1(_rng(cfg.seed, _CENTROID, *stream).standard_normal(n_frames),
                           cfg.centroid_smoothness)
        hours = start_hour + np.arange(n_frames) / cfg.feature_rate_hz / 3600.0
        diurnal = 1.0 - cfg.diurnal_depth * np.abs(hours - 12.0) / 12.0
        frames = diurnal[:, None] * base
        frames += np.outer(cfg.speech_scale * (gate - cfg.speech_fraction), self.speech_dir)
        frames += np.outer(cfg.centroid_scale * ctrack, self.centroid_dir)
        return (FeatureFrameSeries(frames=frames, frame_rate_hz=cfg.feature_rate_hz,
                                   source="synthetic"),
                gate, ctrack)

    # -- neural process -----------------------------------------------------

    def _noiseless_neural(self, frames: np.ndarray) -> np.ndarray:
        """gain * M @ (k * upsample(V)): the LTI image of the features at 512 Hz."""
        cfg = self.cfg
        n_in = frames.shape[0]
        n_out = int(round(n_in * cfg.neural_rate_hz / cfg.feature_rate_hz))
        t_out = np.arange(n_out) * (cfg.feature_rate_hz / cfg.neural_rate_hz)
        idx = np.clip(t_out.astype(np.int64), 0, n_in - 2)
        w = (t_out - idx)[:, None]
        up = (1.0 - w) * frames[idx] + w * frames[idx + 1]
        tau = cfg.kernel_width_ms / 1000.0 * cfg.neural_rate_hz
        a1 = np.exp(-1.0 / tau)
        smoothed = _sig.lfilter([1.0 - a1], [1.0, -a1], up, axis=0)
        return (cfg.coupling_gain * smoothed @ self.mixing.T) * self.gain

    def _calibrate_gain(self) -> np.ndarray:
        """Per-channel 1/RMS of a neutral reference stretch, frozen in the truth record."""
        self.gain = np.ones(self.cfg.n_channels)
        series, _, _ = self.gen_features(300.0, 12.0, (_CAL,))
        ref = self._noiseless_neural(series.frames)
        rms = np.sqrt((ref ** 2).mean(axis=0))
        return 1.0 / np.maximum(rms, 1e-12)

    def gen_neural(self, features: FeatureFrameSeries, day: int, t0_abs: float,
                   stream: tuple[int, ...],
                   noise_multiplier: float = 1.0) -> np.ndarray:
        """(n_samples, n_channels) at the clinical rate, drift and noise included."""
        cfg = self.cfg
        x = self._noiseless_neural(features.frames)
        n = x.shape[0]
        t = t0_abs + np.arange(n) / cfg.neural_rate_hz
        x = x + self.day_offsets[min(day, cfg.n_days)]
        x = x + np.outer(np.cos(2.0 * np.pi * DAY_TONE_HZ * t),
                         self.day_tone[min(day, cfg.n_days)])
        if cfg.wander_scale > 0:
            wrng = _rng(cfg.seed, _WANDER, *stream)
            phi = np.exp(-1.0 / (30.0 * cfg.neural_rate_hz))  # ~30 s time constant
            wander = self._ar1(wrng.standard_normal((n, cfg.n_channels)), phi)
            x = x + cfg.wander_scale * wander
        sigma = cfg.noise_sigma * noise_multiplier
        if sigma > 0:
            x = x + sigma * _rng(cfg.seed, _NOISE, *stream).standard_normal(x.shape)
        return x

    # -- task-period distribution shift --------------------------------------

    def gen_task_shift(self, features: FeatureFrameSeries,
                       stream: tuple[int, ...]) -> tuple[FeatureFrameSeries, FeatureFrameSeries]:
        """(ambient variant, true variant) of a task-period feature stream."""
        cfg = self.cfg
        noise = _rng(cfg.seed, _AMBIENT, *stream).standard_normal(features.frames.shape)
        ambient = features.frames + cfg.ambient_noise * noise
        true = features.frames @ self.shift_A.T + self.shift_b
        mk = lambda fr: FeatureFrameSeries(frames=fr, frame_rate_hz=features.frame_rate_hz,
                                           source="synthetic", t0=features.t0)
        return mk(ambient), mk(true)

    def truth_record(self) -> dict:
        return {
            "config": asdict(self.cfg),
            "prng": "philox (64-bit counter-based), streams keyed by (seed, purpose, day, file)",
            "mixing": self.mixing.tolist(),
            "gain": self.gain.tolist(),
            "speech_dir": self.speech_dir.tolist(),
            "centroid_dir": self.centroid_dir.tolist(),
            "day_offsets": self.day_offsets.tolist(),
            "day_tone": self.day_tone.tolist(),
            "day_tone_hz": DAY_TONE_HZ,
            "shift_A": self.shift_A.tolist(),
            "shift_b": self.shift_b.tolist(),
        }


# ---------------------------------------------------------------------------
# bundle generation
# ---------------------------------------------------------------------------

def _segment_extras(gate: np.ndarray, ctrack: np.ndarray, rate_hz: float,
                    duration_s: float, centroid_scale: float) -> dict:
    """Per-chunk voice flags and per-segment planted-centroid values."""
    voice = []
    centroid = []
    for (s0, s1) in chunk_spans(duration_s):
        i0, i1 = int(round(s0 * rate_hz)), int(round(s1 * rate_hz))
        voice.append(int(gate[i0:i1].mean() > 0.5))
        per_seg = []
        n_seg = int((s1 - s0) // SEGMENT_S)
        per_win = int(round(SEGMENT_S * rate_hz))
        for j in range(n_seg):
            a = i0 + j * per_win
            per_seg.append(float(centroid_scale * ctrack[a:a + per_win].mean()))
        centroid.append(per_seg)
    return {"voice": voice, "centroid": centroid}


def _channel_meta(cfg: SynthConfig) -> list[corpus.ChannelMeta]:
    rois = ("temporal", "frontal", "parietal-occipital")
    n_shafts = 3 if cfg.n_channels >= 6 else 1
    per_shaft = cfg.n_channels // n_shafts
    out = []
    for c in range(cfg.n_channels):
        shaft = min(c // per_shaft, n_shafts - 1)
        out.append(corpus.ChannelMeta(
            channel_id=f"ch{c:03d}", shaft_id=f"s{shaft}",
            contact_index=c - shaft * per_shaft if shaft < n_shafts - 1
            else c - (n_shafts - 1) * per_shaft,
            roi=rois[shaft % len(rois)]))
    return out


def generate_bundle(cfg: SynthConfig, out_dir: str | Path) -> SynthBundle:
    """Write a full synthetic corpus: week-long + task manifests and arr1 files.

    The task interval covers the last files of the task day; those files'
    neural data is generated from the ambient task variant with the
    task-period noise multiplier, and the task manifest references the same
    neural files alongside both feature variants.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    world = SynthWorld(cfg)
    channels = _channel_meta(cfg)
    channel_ids = [c.channel_id for c in channels]

    task_day = min(cfg.task_day, cfg.n_days)
    first_task_file = max(0, cfg.files_per_day - cfg.task_file_count)
    task_start = ((task_day - 1) * 86400.0 + cfg.start_hour * 3600.0
                  + first_task_file * cfg.file_duration_s)
    task_end = ((task_day - 1) * 86400.0 + cfg.start_hour * 3600.0
                + cfg.files_per_day * cfg.file_duration_s)

    week_files: list[corpus.FileEntry] = []
    task_files: list[corpus.FileEntry] = []

    for day in range(1, cfg.n_days + 1):
        for f in range(cfg.files_per_day):
            t0 = (day - 1) * 86400.0 + cfg.start_hour * 3600.0 + f * cfg.file_duration_s
            t1 = t0 + cfg.file_duration_s
            start_hour = cfg.start_hour + f * cfg.file_duration_s / 3600.0
            stream = (day, f)
            fid = f"wk_d{day}_f{f:02d}"
            in_task = task_start <= t0 and t1 <= task_end + 1e-9

            series, gate, ctrack = world.gen_features(cfg.file_duration_s, start_hour, stream)
            extras = _segment_extras(gate, ctrack, cfg.feature_rate_hz,
                                     cfg.file_duration_s, cfg.centroid_scale)
            if in_task:
                ambient, true = world.gen_task_shift(series, stream)
                neural = world.gen_neural(ambient, day, t0, stream,
                                          noise_multiplier=cfg.task_neural_noise)
                feat_frames = ambient.frames
                true_path = f"{fid}.true.arr1"
                corpus.write_arr1(out_dir / true_path, true.frames,
                                  cfg.feature_rate_hz, t0=t0, source="synthetic",
                                  extras=extras)
            else:
                neural = world.gen_neural(series, day, t0, stream)
                feat_frames = series.frames
                true_path = None

            neural_path = f"{fid}.neural.arr1"
            feat_path = f"{fid}.features.arr1"
            corpus.write_arr1(out_dir / neural_path, neural.T, cfg.neural_rate_hz,
                              t0=t0, channel_ids=channel_ids, source="neural")
            corpus.write_arr1(out_dir / feat_path, feat_frames, cfg.feature_rate_hz,
                              t0=t0, source="synthetic", extras=extras)

            n_entry = corpus.FileEntry(file_id=fid, path=neural_path, kind="neural",
                                       t0=t0, duration_s=cfg.file_duration_s,
                                       channels=channels)
            f_entry = corpus.FileEntry(file_id=f"{fid}.features", path=feat_path,
                                       kind="audio_features", t0=t0,
                                       duration_s=cfg.file_duration_s, variant="ambient")
            week_files += [n_entry, f_entry]
            if in_task:
                task_files += [n_entry, f_entry,
                               corpus.FileEntry(file_id=f"{fid}.true", path=true_path,
                                                kind="audio_features", t0=t0,
                                                duration_s=cfg.file_duration_s,
                                                variant="true")]

    week = corpus.RecordingManifest(
        subject_id=f"synth{cfg.seed}", files=week_files,
        task_intervals=[(task_start, task_end)], root=out_dir)
    week.validate()
    task = corpus.RecordingManifest(
        subject_id=f"synth{cfg.seed}", files=task_files,
        task_intervals=[(task_start, task_end)], root=out_dir)
    if task_files:
        task.validate()

    week_path = week.save(out_dir / "weeklong_manifest.json")
    task_path = task.save(out_dir / "task_manifest.json")
    truth_path = out_dir / "truth.json"
    truth_path.write_text(json.dumps(world.truth_record()))
    return SynthBundle(out_dir=out_dir, weeklong_manifest=week_path,
                       task_manifest=task_path, truth=truth_path)
