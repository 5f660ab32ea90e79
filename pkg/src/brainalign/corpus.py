"""Manifests, splits and segment pairing.

The corpus ties week-long recordings to task recordings through three JSON
documents plus one binary array format:

* ``arr1`` — raw arrays: a little-endian float32 payload next to a JSON
  sidecar ``{shape, sample_rate_hz, t0, channel_ids, dtype: "f32", ...}``.
* recording manifest — catalog of time-stamped neural/feature files, channel
  metadata, task intervals and the timezone offset.
* split manifest — unit (file or chunk) to train/val/test assignments, with
  the seed recorded.

Pairing cuts each neural file into 30-second chunks, each chunk into
non-overlapping 3-second windows, and aligns every window with the audio
feature segment covering the identical absolute time interval.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from . import features as feat
from .errors import (AlignmentError, CoverageError, EmptyDatasetError,
                     InvalidSpecError)
from .rng import philox

WEEKLONG_RATIOS = (0.90, 0.05, 0.05)
TASK_RATIOS = (0.80, 0.10, 0.10)
SPLIT_NAMES = ("train", "val", "test")
EXCLUDED_TAG = "excluded"


# ---------------------------------------------------------------------------
# arr1 array files
# ---------------------------------------------------------------------------

def write_arr1(path: str | Path, data: np.ndarray, sample_rate_hz: float,
               t0: float = 0.0, channel_ids: list[str] | None = None,
               source: str | None = None, extras: dict | None = None) -> Path:
    """Write a float32 payload plus its JSON sidecar; returns the payload path."""
    path = Path(path)
    if path.suffix != ".arr1":
        raise InvalidSpecError(f"arr1 files must end in .arr1, got {path.name}")
    data = np.asarray(data)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(np.ascontiguousarray(data, dtype="<f4").tobytes())
    meta = {
        "shape": list(data.shape),
        "sample_rate_hz": float(sample_rate_hz),
        "t0": float(t0),
        "channel_ids": channel_ids,
        "dtype": "f32",
    }
    if source is not None:
        meta["source"] = source
    if extras is not None:
        meta["extras"] = extras
    Path(str(path) + ".json").write_text(json.dumps(meta))
    return path


def read_arr1(path: str | Path) -> tuple[np.ndarray, dict]:
    """Read payload + sidecar; returns (float32 array, metadata dict)."""
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    if meta.get("dtype") != "f32":
        raise InvalidSpecError(f"unsupported arr1 dtype {meta.get('dtype')!r}")
    raw = np.frombuffer(path.read_bytes(), dtype="<f4")
    shape = tuple(meta["shape"])
    if raw.size != int(np.prod(shape)):
        raise InvalidSpecError(f"{path}: payload size {raw.size} != sidecar shape {shape}")
    return raw.reshape(shape), meta


# ---------------------------------------------------------------------------
# recording manifest
# ---------------------------------------------------------------------------

@dataclass
class ChannelMeta:
    channel_id: str
    shaft_id: str = ""
    contact_index: int = 0
    roi: str = ""


@dataclass
class FileEntry:
    file_id: str
    path: str
    kind: str                 # neural | audio_features | audio_wave
    t0: float
    duration_s: float
    variant: str = "ambient"  # for audio_features: ambient | true
    channels: list[ChannelMeta] = field(default_factory=list)

    @property
    def t1(self) -> float:
        return self.t0 + self.duration_s

    def covers(self, start: float, end: float) -> bool:
        return self.t0 <= start and end <= self.t1 + 1e-9


@dataclass
class RecordingManifest:
    subject_id: str
    files: list[FileEntry]
    task_intervals: list[tuple[float, float]] = field(default_factory=list)
    tz_offset_s: float = 0.0
    root: Path = Path(".")

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.root / p

    def neural_files(self) -> list[FileEntry]:
        out = [f for f in self.files if f.kind == "neural"]
        return sorted(out, key=lambda f: (f.t0, f.file_id))

    def feature_files(self, variant: str = "ambient") -> list[FileEntry]:
        out = [f for f in self.files if f.kind == "audio_features" and f.variant == variant]
        return sorted(out, key=lambda f: (f.t0, f.file_id))

    def first_local_midnight(self) -> float:
        neural = self.neural_files()
        if not neural:
            raise EmptyDatasetError("manifest has no neural files")
        first_local = neural[0].t0 + self.tz_offset_s
        return np.floor(first_local / 86400.0) * 86400.0

    def day_index(self, t_abs: float) -> int:
        local = t_abs + self.tz_offset_s
        return int(np.floor(local / 86400.0) - self.first_local_midnight() / 86400.0) + 1

    def local_hour(self, t_abs: float) -> float:
        local = t_abs + self.tz_offset_s
        return float((local % 86400.0) / 3600.0)

    def validate(self) -> None:
        by_stream: dict[tuple[str, str], list[FileEntry]] = {}
        for f in self.files:
            by_stream.setdefault((f.kind, f.variant if f.kind == "audio_features" else ""),
                                 []).append(f)
        for key, entries in by_stream.items():
            entries = sorted(entries, key=lambda f: f.t0)
            for a, b in zip(entries, entries[1:]):
                if b.t0 < a.t1 - 1e-9:
                    raise AlignmentError(
                        f"files {a.file_id} and {b.file_id} overlap within stream {key}")
        neural = self.neural_files()
        for (s, e) in self.task_intervals:
            if not any(f.t0 <= s and e <= f.t1 + 1e-9 for f in neural):
                raise AlignmentError(
                    f"task interval ({s}, {e}) not inside any neural file span")

    def to_json(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "timezone_offset_s": self.tz_offset_s,
            "task_intervals": [list(iv) for iv in self.task_intervals],
            "files": [
                {
                    "file_id": f.file_id, "path": f.path, "kind": f.kind,
                    "t0": f.t0, "duration_s": f.duration_s, "variant": f.variant,
                    "channels": [
                        {"channel_id": c.channel_id, "shaft_id": c.shaft_id,
                         "contact_index": c.contact_index, "roi": c.roi}
                        for c in f.channels
                    ],
                }
                for f in self.files
            ],
        }

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=1))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "RecordingManifest":
        path = Path(path)
        doc = json.loads(path.read_text())
        files = [
            FileEntry(
                file_id=e["file_id"], path=e["path"], kind=e["kind"],
                t0=e["t0"], duration_s=e["duration_s"],
                variant=e.get("variant", "ambient"),
                channels=[ChannelMeta(**c) for c in e.get("channels", [])],
            )
            for e in doc["files"]
        ]
        return cls(
            subject_id=doc["subject_id"], files=files,
            task_intervals=[tuple(iv) for iv in doc.get("task_intervals", [])],
            tz_offset_s=doc.get("timezone_offset_s", 0.0),
            root=path.parent,
        )


def _overlaps(a0: float, a1: float, b0: float, b1: float) -> bool:
    return a0 < b1 - 1e-9 and b0 < a1 - 1e-9


def chunk_id_for(file_id: str, index: int) -> str:
    return f"{file_id}:c{index:04d}"


# ---------------------------------------------------------------------------
# split manifests
# ---------------------------------------------------------------------------

@dataclass
class SplitManifest:
    dataset_id: str
    unit: str                      # file | chunk
    assignments: dict[str, str]    # unit_id -> train/val/test/excluded
    seed: int
    ratios: tuple[float, ...] = WEEKLONG_RATIOS

    def units(self, tag: str) -> list[str]:
        return sorted(u for u, t in self.assignments.items() if t == tag)

    def to_json(self) -> dict:
        return {"dataset_id": self.dataset_id, "unit": self.unit, "seed": self.seed,
                "ratios": list(self.ratios), "assignments": self.assignments}

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=1))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "SplitManifest":
        doc = json.loads(Path(path).read_text())
        return cls(dataset_id=doc["dataset_id"], unit=doc["unit"],
                   assignments=doc["assignments"], seed=doc["seed"],
                   ratios=tuple(doc["ratios"]))


def largest_remainder_counts(n: int, ratios: tuple[float, ...]) -> list[int]:
    """Integer counts summing to n, proportional to ratios, ties by remainder."""
    exact = [n * r for r in ratios]
    counts = [int(np.floor(e)) for e in exact]
    remainders = [e - c for e, c in zip(exact, counts)]
    for _ in range(n - sum(counts)):
        k = int(np.argmax(remainders))
        counts[k] += 1
        remainders[k] = -1.0
    return counts


def _rng(seed) -> np.random.Generator:
    return philox(seed)


def _assign(unit_ids: list[str], seed: int, ratios: tuple[float, ...]) -> dict[str, str]:
    order = list(unit_ids)
    _rng(seed).shuffle(order)
    counts = largest_remainder_counts(len(order), ratios)
    assignments = {}
    pos = 0
    for name, c in zip(SPLIT_NAMES, counts):
        for u in order[pos:pos + c]:
            assignments[u] = name
        pos += c
    return assignments


def eligible_pretrain_files(manifest: RecordingManifest) -> list[FileEntry]:
    """Neural files with at least one chunk outside every task interval."""
    out = []
    for f in manifest.neural_files():
        spans = feat.chunk_spans(f.duration_s)
        keep = [s for s in spans
                if not any(_overlaps(f.t0 + s[0], f.t0 + s[1], iv[0], iv[1])
                           for iv in manifest.task_intervals)]
        if keep:
            out.append(f)
    return out


def split_weeklong(manifest: RecordingManifest, seed: int,
                   ratios: tuple[float, ...] = WEEKLONG_RATIOS) -> SplitManifest:
    """File-level 90/5/5 split of the week-long recording, task period excluded."""
    files = eligible_pretrain_files(manifest)
    if not files:
        raise EmptyDatasetError("no files left outside the task intervals")
    if len(files) < 20:
        warnings.warn(f"only {len(files)} eligible files; 5% splits will be coarse",
                      RuntimeWarning, stacklevel=2)
    assignments = _assign([f.file_id for f in files], seed, ratios)
    return SplitManifest(dataset_id=f"{manifest.subject_id}:weeklong", unit="file",
                         assignments=assignments, seed=seed, ratios=ratios)


def task_chunk_ids(manifest: RecordingManifest) -> list[str]:
    """Chunks of neural files lying fully inside a task interval."""
    out = []
    for f in manifest.neural_files():
        for idx, (s0, s1) in enumerate(feat.chunk_spans(f.duration_s)):
            a0, a1 = f.t0 + s0, f.t0 + s1
            if any(iv[0] <= a0 and a1 <= iv[1] + 1e-9 for iv in manifest.task_intervals):
                out.append(chunk_id_for(f.file_id, idx))
    return out


def split_task(chunk_ids: list[str], seed: int,
               ratios: tuple[float, ...] = TASK_RATIOS,
               dataset_id: str = "task") -> SplitManifest:
    """Chunk-level 80/10/10 split; all segments of one chunk share its split."""
    if not chunk_ids:
        raise EmptyDatasetError("no task chunks to split")
    assignments = _assign(list(chunk_ids), seed, ratios)
    return SplitManifest(dataset_id=dataset_id, unit="chunk",
                         assignments=assignments, seed=seed, ratios=ratios)


def subsample_train(split: SplitManifest, fraction: float, seed: int) -> SplitManifest:
    """Keep a nested fraction of the train units; val and test are untouched.

    The kept subset is a prefix of one seeded shuffle, so for a fixed seed the
    20% sample contains the 10% sample.
    """
    if fraction <= 0:
        raise InvalidSpecError("fraction must be > 0")
    if fraction > 1:
        raise InvalidSpecError("fraction must be <= 1")
    train_units = split.units("train") + split.units(EXCLUDED_TAG)
    order = sorted(train_units)
    _rng(seed).shuffle(order)
    n_keep = int(round(fraction * len(order)))
    keep = set(order[:n_keep])
    assignments = dict(split.assignments)
    for u in order:
        assignments[u] = "train" if u in keep else EXCLUDED_TAG
    return SplitManifest(dataset_id=split.dataset_id, unit=split.unit,
                         assignments=assignments, seed=split.seed, ratios=split.ratios)


# ---------------------------------------------------------------------------
# segment pairs
# ---------------------------------------------------------------------------

@dataclass
class SegmentPair:
    """One aligned (brain window, audio segment) example."""

    brain: np.ndarray            # (n_channels, window samples) float32
    audio: feat.SegmentFeature
    chunk_id: str
    day_index: int
    hour: float
    split_tag: str
    voice: float = float("nan")
    centroid: float = float("nan")


@dataclass
class PairSet:
    """Column-oriented batch of segment pairs, ready for training/evaluation."""

    brain: np.ndarray            # (N, n_channels, T)
    audio: np.ndarray            # (N, dim)
    chunk_ids: list[str]
    segment_index: np.ndarray
    day_index: np.ndarray
    hour: np.ndarray
    voice: np.ndarray
    centroid: np.ndarray
    channel_ids: list[str]
    dataset_id: str = ""

    def __len__(self) -> int:
        return self.brain.shape[0]

    def take(self, idx: np.ndarray) -> "PairSet":
        return PairSet(
            brain=self.brain[idx], audio=self.audio[idx],
            chunk_ids=[self.chunk_ids[i] for i in idx],
            segment_index=self.segment_index[idx], day_index=self.day_index[idx],
            hour=self.hour[idx], voice=self.voice[idx], centroid=self.centroid[idx],
            channel_ids=list(self.channel_ids), dataset_id=self.dataset_id,
        )


def hour_filter(pairs, lo: float = 6.0, hi: float = 23.0):
    """Keep pairs whose clock hour satisfies lo <= hour < hi (half-open)."""
    if isinstance(pairs, PairSet):
        idx = np.flatnonzero((pairs.hour >= lo) & (pairs.hour < hi))
        return pairs.take(idx)
    return [p for p in pairs if lo <= p.hour < hi]


def channel_mask(pairs: PairSet, subset: list[str]) -> PairSet:
    """Restrict brain rows to a channel subset, preserving input row order."""
    if not subset:
        raise InvalidSpecError("channel subset must be nonempty")
    index = {c: i for i, c in enumerate(pairs.channel_ids)}
    missing = [c for c in subset if c not in index]
    if missing:
        raise InvalidSpecError(f"unknown channel ids: {missing}")
    rows = [index[c] for c in pairs.channel_ids if c in set(subset)]
    kept_ids = [pairs.channel_ids[r] for r in rows]
    out = PairSet(
        brain=pairs.brain[:, rows, :], audio=pairs.audio,
        chunk_ids=list(pairs.chunk_ids), segment_index=pairs.segment_index,
        day_index=pairs.day_index, hour=pairs.hour, voice=pairs.voice,
        centroid=pairs.centroid, channel_ids=kept_ids, dataset_id=pairs.dataset_id,
    )
    return out


def _feature_cover(manifest: RecordingManifest, variant: str, source: str):
    if source == "mel":
        files = sorted((f for f in manifest.files if f.kind == "audio_wave"),
                       key=lambda f: (f.t0, f.file_id))
    else:
        files = manifest.feature_files(variant)

    def find(start: float, end: float) -> FileEntry | None:
        for f in files:
            if f.covers(start, end):
                return f
        return None

    return find


def _read_wave(path: Path) -> tuple[np.ndarray, float, dict]:
    """Mono waveform from an arr1 file or a 16-bit PCM WAV."""
    if path.suffix == ".arr1":
        data, meta = read_arr1(path)
        return data.reshape(-1).astype(np.float64), meta["sample_rate_hz"], meta
    if path.suffix == ".wav":
        from scipy.io import wavfile
        rate, data = wavfile.read(path)
        if data.ndim != 1:
            raise InvalidSpecError(f"{path}: WAV must be mono")
        if data.dtype != np.int16:
            raise InvalidSpecError(f"{path}: WAV must be 16-bit PCM")
        return data.astype(np.float64) / 32768.0, float(rate), {}
    raise InvalidSpecError(f"unsupported waveform container {path.suffix!r}")


def build_pairs(manifest: RecordingManifest, split: SplitManifest,
                include_splits: Iterable[str] = ("train",),
                feature_variant: str = "ambient",
                feature_source: str = "contextual",
                window_s: float = feat.SEGMENT_S,
                pipeline_rate_hz: float = 40.0,
                target_frame_hz: float = feat.TARGET_FRAME_HZ) -> Iterator[SegmentPair]:
    """Yield aligned pairs in deterministic (file, chunk, segment) order.

    The manifest must reference preprocessed neural files (already at the
    pipeline rate). For file-unit splits, chunks overlapping a task interval
    are excluded (pretraining semantics); for chunk-unit splits only chunks
    present in the split assignments are emitted.

    ``feature_source`` selects the audio side: ``contextual`` pairs against
    ingested embedding frames, ``mel`` extracts 40-band log-mel vectors from
    raw waveforms (and computes each segment's mel centroid on the fly).
    """
    include = set(include_splits)
    find_cover = _feature_cover(manifest, feature_variant, feature_source)
    win_samples = int(round(window_s * pipeline_rate_hz))

    # coverage scan first so a gap report covers the whole request
    gaps: list[tuple[float, float]] = []
    plan: list[tuple[FileEntry, int, tuple[float, float], str]] = []
    for f in manifest.neural_files():
        for idx, (s0, s1) in enumerate(feat.chunk_spans(f.duration_s)):
            a0, a1 = f.t0 + s0, f.t0 + s1
            cid = chunk_id_for(f.file_id, idx)
            if split.unit == "file":
                if any(_overlaps(a0, a1, iv[0], iv[1]) for iv in manifest.task_intervals):
                    continue
                tag = split.assignments.get(f.file_id)
            else:
                tag = split.assignments.get(cid)
            if tag not in include:
                continue
            if find_cover(a0, a1) is None:
                gaps.append((a0, a1))
                continue
            plan.append((f, idx, (s0, s1), tag))
    if gaps:
        raise CoverageError(
            f"{len(gaps)} chunk(s) lack {feature_variant!r} feature coverage", gaps)

    neural_cache: dict[str, tuple[np.ndarray, dict]] = {}
    feature_cache: dict[str, tuple[np.ndarray, dict]] = {}
    for f, idx, (s0, s1), tag in plan:
        if f.file_id not in neural_cache:
            neural_cache.clear()
            neural_cache[f.file_id] = read_arr1(manifest.resolve(f.path))
        neural, nmeta = neural_cache[f.file_id]
        if abs(nmeta["sample_rate_hz"] - pipeline_rate_hz) > 1e-9:
            raise InvalidSpecError(
                f"{f.file_id}: expected preprocessed neural at {pipeline_rate_hz} Hz, "
                f"found {nmeta['sample_rate_hz']} Hz")
        a0, a1 = f.t0 + s0, f.t0 + s1
        cover = find_cover(a0, a1)
        seg_centroids = None
        if feature_source == "mel":
            if cover.file_id not in feature_cache:
                feature_cache.clear()
                wave, wrate, wmeta = _read_wave(manifest.resolve(cover.path))
                feature_cache[cover.file_id] = ((wave, wrate), wmeta)
            (wave, wrate), fmeta = feature_cache[cover.file_id]
            k0 = int(round((a0 - cover.t0) * wrate))
            k1 = int(round((a1 - cover.t0) * wrate))
            dense = feat.melspectrogram(wave[k0:k1], wrate, t0=a0, out_hz=target_frame_hz)
            vectors = feat.segment_matrix(dense, window_s)
            power = feat.mel_power(wave[k0:k1], wrate, t0=a0)
            pow_segments = feat.segment_matrix(power, window_s)
            centers = feat.mel_center_frequencies(wrate)
            seg_centroids = [feat.mel_centroid(p, centers) for p in pow_segments]
        else:
            if cover.file_id not in feature_cache:
                feature_cache.clear()
                feature_cache[cover.file_id] = read_arr1(manifest.resolve(cover.path))
            frames, fmeta = feature_cache[cover.file_id]
            frate = fmeta["sample_rate_hz"]
            j0 = int(round((a0 - cover.t0) * frate))
            j1 = int(round((a1 - cover.t0) * frate))
            chunk_series = feat.FeatureFrameSeries(
                frames=frames[j0:j1].astype(np.float64), frame_rate_hz=frate,
                source=fmeta.get("source", "synthetic"), t0=a0)
            dense = feat.resample_frames(chunk_series, target_frame_hz)
            vectors = feat.segment_matrix(dense, window_s)

        extras = (fmeta.get("extras") or {})
        rel_idx = int(round((a0 - cover.t0) / feat.CHUNK_S))
        voice_list = extras.get("voice")
        centroid_list = extras.get("centroid")

        n0 = int(round(s0 * pipeline_rate_hz))
        cid = chunk_id_for(f.file_id, idx)
        n_segments = vectors.shape[0]
        for j in range(n_segments):
            w0 = n0 + j * win_samples
            window = neural[:, w0:w0 + win_samples]
            if window.shape[1] < win_samples or not np.all(np.isfinite(window)):
                continue  # gaps are dropped, never imputed
            t_seg = a0 + j * window_s
            voice = float("nan") if voice_list is None else float(voice_list[rel_idx])
            centroid = float("nan")
            if seg_centroids is not None:
                centroid = float(seg_centroids[j])
            elif centroid_list is not None:
                centroid = float(centroid_list[rel_idx][j])
            yield SegmentPair(
                brain=np.asarray(window, dtype=np.float32),
                audio=feat.SegmentFeature(
                    vector=vectors[j], chunk_id=cid, segment_index=j,
                    day_index=manifest.day_index(t_seg),
                    hour=manifest.local_hour(t_seg)),
                chunk_id=cid,
                day_index=manifest.day_index(t_seg),
                hour=manifest.local_hour(t_seg),
                split_tag=tag,
                voice=voice,
                centroid=centroid,
            )


def collect_pairs(stream: Iterable[SegmentPair], channel_ids: list[str],
                  dataset_id: str = "") -> PairSet:
    """Materialize a pair stream into contiguous arrays."""
    pairs = list(stream)
    if not pairs:
        raise EmptyDatasetError(f"no pairs for dataset {dataset_id!r}")
    return PairSet(
        brain=np.stack([p.brain for p in pairs]).astype(np.float32),
        audio=np.stack([p.audio.vector for p in pairs]).astype(np.float32),
        chunk_ids=[p.chunk_id for p in pairs],
        segment_index=np.array([p.audio.segment_index for p in pairs], dtype=np.int64),
        day_index=np.array([p.day_index for p in pairs], dtype=np.int64),
        hour=np.array([p.hour for p in pairs], dtype=np.float64),
        voice=np.array([p.voice for p in pairs], dtype=np.float64),
        centroid=np.array([p.centroid for p in pairs], dtype=np.float64),
        channel_ids=list(channel_ids),
        dataset_id=dataset_id,
    )


def load_split_pairs(manifest: RecordingManifest, split: SplitManifest,
                     tag: str, feature_variant: str = "ambient",
                     feature_source: str = "contextual",
                     hour_range: tuple[float, float] | None = None,
                     channel_subset: list[str] | None = None,
                     dataset_id: str = "") -> PairSet:
    """Convenience wrapper: build, collect and filter one split's pairs."""
    neural = manifest.neural_files()
    if not neural:
        raise EmptyDatasetError("manifest has no neural files")
    channel_ids = [c.channel_id for c in neural[0].channels]
    stream = build_pairs(manifest, split, include_splits=(tag,),
                         feature_variant=feature_variant,
                         feature_source=feature_source)
    pairs = collect_pairs(stream, channel_ids, dataset_id or f"{split.dataset_id}:{tag}")
    if hour_range is not None:
        pairs = hour_filter(pairs, hour_range[0], hour_range[1])
        if len(pairs) == 0:
            raise EmptyDatasetError("hour filter removed every pair")
    if channel_subset is not None:
        pairs = channel_mask(pairs, channel_subset)
    return pairs
