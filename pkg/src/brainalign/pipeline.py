"""End-to-end experiment stages shared by the CLI and the test suite.

Each stage is a plain function from artifacts to artifacts:

    preprocess_manifest  raw-rate neural files -> 40 Hz files + new manifest
    run_pretrain         pairs + split -> checkpoint + history
    run_evaluate         checkpoint + split -> RetrievalReport
    run_finetune         checkpoint + task split -> finetuned checkpoint
    run_scaling          fraction sweep -> (hours, mean rank) points + fit
    export_embeddings    checkpoint + pairs -> CSV for external projection tools
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import corpus, dsp
from . import encoder as enc
from . import trainer as tr
from .errors import ConfigError, InvalidSpecError
from .evaluation import RetrievalReport, ScalingFit, evaluate, fit_log_linear
from .features import ZScoreStats, apply_zscore, fit_zscore
from .probes import UMAP_EXPORT_HYPERPARAMS

PREPROCESS_VARIANTS = ("broadband", "broadband_bipolar", "gamma_bipolar")
BROADBAND_SPEC = dsp.FilterSpec(0.05, 50.0, "bandpass")


def _to_channel_series(data: np.ndarray, meta_channels: list[corpus.ChannelMeta],
                       rate: float, t0: float) -> list[dsp.ChannelSeries]:
    return [dsp.ChannelSeries(samples=data[i], sample_rate_hz=rate,
                              channel_id=c.channel_id, shaft_id=c.shaft_id,
                              contact_index=c.contact_index, t0=t0)
            for i, c in enumerate(meta_channels)]


def preprocess_file(data: np.ndarray, rate: float, channels: list[corpus.ChannelMeta],
                    t0: float, variant: str,
                    target_hz: float = dsp.PIPELINE_RATE_HZ
                    ) -> tuple[np.ndarray, list[corpus.ChannelMeta]]:
    """One neural file through the requested preprocessing strategy.

    Returns the (n_channels_out, T_out) array at the pipeline rate (robust
    scaling applied per channel, per file) and the output channel metadata.
    """
    if variant not in PREPROCESS_VARIANTS:
        raise ConfigError(f"unknown preprocessing variant {variant!r}")
    x = np.asarray(data, dtype=np.float64)
    out_channels = list(channels)
    if variant in ("broadband_bipolar", "gamma_bipolar"):
        series = dsp.bipolar_rereference(_to_channel_series(x, channels, rate, t0))
        x = np.stack([s.samples for s in series])
        out_channels = [corpus.ChannelMeta(
            channel_id=s.channel_id, shaft_id=s.shaft_id,
            contact_index=s.contact_index,
            roi=next((c.roi for c in channels if c.shaft_id == s.shaft_id), ""))
            for s in series]
    if variant == "gamma_bipolar":
        y = dsp.gamma_power_array(x, rate, out_hz=target_hz)
    else:
        y = dsp.bandpass_array(x, rate, BROADBAND_SPEC)
        y = dsp.resample_array(y, rate, target_hz)
    y = dsp.robust_scale_array(y, axis=-1)
    return y, out_channels


def preprocess_manifest(manifest: corpus.RecordingManifest, variant: str,
                        out_dir: str | Path,
                        target_hz: float = dsp.PIPELINE_RATE_HZ,
                        log=None) -> corpus.RecordingManifest:
    """Write pipeline-rate neural files; feature entries point at the originals."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    new_files: list[corpus.FileEntry] = []
    for f in manifest.files:
        if f.kind != "neural":
            entry = corpus.FileEntry(file_id=f.file_id,
                                     path=str(manifest.resolve(f.path)),
                                     kind=f.kind, t0=f.t0, duration_s=f.duration_s,
                                     variant=f.variant, channels=f.channels)
            new_files.append(entry)
            continue
        data, meta = corpus.read_arr1(manifest.resolve(f.path))
        y, out_channels = preprocess_file(data, meta["sample_rate_hz"], f.channels,
                                          f.t0, variant, target_hz)
        rel = f"{f.file_id}.pp40.arr1"
        corpus.write_arr1(out_dir / rel, y, target_hz, t0=f.t0,
                          channel_ids=[c.channel_id for c in out_channels],
                          source="neural")
        new_files.append(corpus.FileEntry(
            file_id=f.file_id, path=rel, kind="neural", t0=f.t0,
            duration_s=f.duration_s, channels=out_channels))
        if log is not None:
            log(f"preprocessed {f.file_id} ({variant})")
    out = corpus.RecordingManifest(subject_id=manifest.subject_id, files=new_files,
                                   task_intervals=list(manifest.task_intervals),
                                   tz_offset_s=manifest.tz_offset_s, root=out_dir)
    out.save(out_dir / "manifest.json")
    return out


def stats_from_params(params: enc.EncoderParams) -> ZScoreStats:
    if "zscore_mean" not in params.buffers:
        raise InvalidSpecError("checkpoint carries no z-score statistics")
    return ZScoreStats(mean=params.buffers["zscore_mean"],
                       std=params.buffers["zscore_std"], source_split="checkpoint")


@dataclass
class PretrainResult:
    checkpoint: Path
    history: tr.TrainHistory
    stats: ZScoreStats
    params: enc.EncoderParams
    reports: dict[str, RetrievalReport]


def run_pretrain(manifest: corpus.RecordingManifest, split: corpus.SplitManifest,
                 out_dir: str | Path, train_cfg: tr.TrainConfig,
                 encoder_cfg: dict | None = None,
                 feature_variant: str = "ambient",
                 feature_source: str = "contextual",
                 hour_range: tuple[float, float] | None = (6.0, 23.0),
                 channel_subset: list[str] | None = None,
                 log=None) -> PretrainResult:
    """Fit z-score stats on the train split, train the encoder, checkpoint the best."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    loader = lambda tag: corpus.load_split_pairs(
        manifest, split, tag, feature_variant=feature_variant,
        feature_source=feature_source, hour_range=hour_range,
        channel_subset=channel_subset)
    train_pairs = loader("train")
    val_pairs = loader("val")

    stats = fit_zscore(train_pairs.audio)
    cfg_kwargs = dict(encoder_cfg or {})
    config = enc.EncoderConfig(n_channels=train_pairs.brain.shape[1],
                               out_dim=train_pairs.audio.shape[1],
                               seed=train_cfg.seed, **cfg_kwargs)
    params = enc.init_encoder(config, dtype=train_cfg.np_dtype)
    best, history = tr.train(params,
                             train_pairs.brain, apply_zscore(train_pairs.audio, stats),
                             val_pairs.brain, apply_zscore(val_pairs.audio, stats),
                             train_cfg, log=log)
    best.buffers["zscore_mean"] = stats.mean.copy()
    best.buffers["zscore_std"] = stats.std.copy()
    ckpt = enc.save_checkpoint(out_dir / "pretrained.ckpt1", best,
                               step=len(history.epochs),
                               metric_digest=enc.history_digest(history.to_json()))
    (out_dir / "pretrain_history.json").write_text(history.to_json())
    return PretrainResult(checkpoint=ckpt, history=history, stats=stats,
                          params=best, reports={})


def run_evaluate(params: enc.EncoderParams, manifest: corpus.RecordingManifest,
                 split: corpus.SplitManifest, tag: str,
                 stats: ZScoreStats | None = None,
                 feature_variant: str = "ambient",
                 feature_source: str = "contextual",
                 hour_range: tuple[float, float] | None = None,
                 channel_subset: list[str] | None = None,
                 dataset_id: str = "", model_id: str = "") -> RetrievalReport:
    """Evaluate one split; with stats=None the checkpoint's frozen stats apply
    (the zero-shot protocol)."""
    pairs = corpus.load_split_pairs(manifest, split, tag,
                                    feature_variant=feature_variant,
                                    feature_source=feature_source,
                                    hour_range=hour_range,
                                    channel_subset=channel_subset,
                                    dataset_id=dataset_id)
    return evaluate(params, pairs, stats or stats_from_params(params),
                    dataset_id=dataset_id or pairs.dataset_id, model_id=model_id)


@dataclass
class FinetuneResult:
    checkpoint: Path
    history: tr.TrainHistory
    stats: ZScoreStats
    params: enc.EncoderParams


def run_finetune(pretrained: enc.EncoderParams, manifest: corpus.RecordingManifest,
                 split: corpus.SplitManifest, out_dir: str | Path,
                 train_cfg: tr.TrainConfig, feature_variant: str = "true",
                 feature_source: str = "contextual",
                 channel_subset: list[str] | None = None,
                 log=None) -> FinetuneResult:
    """Attach the head, refit target stats on the task train split, train all weights."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    loader = lambda tag: corpus.load_split_pairs(
        manifest, split, tag, feature_variant=feature_variant,
        feature_source=feature_source, channel_subset=channel_subset)
    train_pairs = loader("train")
    val_pairs = loader("val")
    best, history, stats = tr.finetune(pretrained,
                                       train_pairs.brain, train_pairs.audio,
                                       val_pairs.brain, val_pairs.audio,
                                       train_cfg, log=log)
    ckpt = enc.save_checkpoint(out_dir / "finetuned.ckpt1", best,
                               step=len(history.epochs),
                               metric_digest=enc.history_digest(history.to_json()))
    (out_dir / "finetune_history.json").write_text(history.to_json())
    return FinetuneResult(checkpoint=ckpt, history=history, stats=stats, params=best)


@dataclass
class ScalingResult:
    points: list[tuple[float, float]]   # (hours of pretraining, mean test rank)
    fit: ScalingFit
    runs: dict[str, Path]


def run_scaling(manifest: corpus.RecordingManifest, split: corpus.SplitManifest,
                out_dir: str | Path, train_cfg: tr.TrainConfig,
                fractions=(0.1, 0.2, 0.4, 0.6, 0.8, 1.0),
                subsample_seed: int = 0,
                encoder_cfg: dict | None = None,
                feature_variant: str = "ambient",
                feature_source: str = "contextual",
                hour_range: tuple[float, float] | None = (6.0, 23.0),
                log=None) -> ScalingResult:
    """Pretrain at nested train-set fractions and fit mean test rank vs ln(hours)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    points: list[tuple[float, float]] = []
    runs: dict[str, Path] = {}
    for frac in sorted(fractions):
        sub = corpus.subsample_train(split, frac, subsample_seed)
        run_dir = out_dir / f"frac{int(round(100 * frac)):03d}"
        result = run_pretrain(manifest, sub, run_dir, train_cfg,
                              encoder_cfg=encoder_cfg,
                              feature_variant=feature_variant,
                              feature_source=feature_source,
                              hour_range=hour_range, log=log)
        train_pairs = corpus.load_split_pairs(manifest, sub, "train",
                                              feature_variant=feature_variant,
                                              feature_source=feature_source,
                                              hour_range=hour_range)
        hours = len(train_pairs) * 3.0 / 3600.0
        report = run_evaluate(result.params, manifest, sub, "test",
                              stats=result.stats, feature_variant=feature_variant,
                              feature_source=feature_source, hour_range=hour_range,
                              dataset_id=f"scaling:{frac}")
        report.save(run_dir / "test_report.json")
        points.append((hours, report.mean))
        runs[f"{frac}"] = result.checkpoint
        if log is not None:
            log(f"fraction {frac}: {hours:.2f} h -> mean rank {report.mean:.3f}")
    fit = fit_log_linear(points)
    fit.save(out_dir / "scaling_fit.json")
    csv = ["hours,mean_rank"] + [f"{h},{r}" for h, r in points]
    (out_dir / "scaling_points.csv").write_text("\n".join(csv) + "\n")
    return ScalingResult(points=points, fit=fit, runs=runs)


def export_embeddings(params: enc.EncoderParams, pairs, path: str | Path,
                      batch_size: int = 512) -> Path:
    """Segment embeddings + probe metadata as CSV (for external UMAP-style tools)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    U = np.concatenate([enc.forward(params, pairs.brain[i:i + batch_size])
                        for i in range(0, len(pairs), batch_size)], axis=0)
    d = U.shape[1]
    header = ["chunk_id", "segment_index", "day_index", "hour", "centroid", "voice"]
    header += [f"e{k}" for k in range(d)]
    lines = [",".join(header)]
    for i in range(len(pairs)):
        row = [pairs.chunk_ids[i], str(int(pairs.segment_index[i])),
               str(int(pairs.day_index[i])), f"{pairs.hour[i]:.6f}",
               f"{pairs.centroid[i]:.6f}", f"{pairs.voice[i]:.0f}"]
        row += [f"{v:.6e}" for v in U[i]]
        lines.append(",".join(row))
    path.write_text("\n".join(lines) + "\n")
    meta = {"n_rows": len(pairs), "embedding_dim": d,
            "suggested_projection": UMAP_EXPORT_HYPERPARAMS}
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=1))
    return path
