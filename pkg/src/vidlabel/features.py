"""Video-level feature rows: per-dimension moments, half-split augmentation,
and optional global normalization.

Feature-row files are JSON lines, one row per (video, segment):

    {"id", "segment", "labels", "mean", "std", "x3", "num_frames"}

A featurized directory carries ``features_manifest.json`` describing the
shard-aligned feature files and any fitted normalization moments.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import dataio
from .errors import ConfigError, ParseError, SchemaError

logger = logging.getLogger(__name__)

SEGMENT_WHOLE = "whole"
SEGMENT_FIRST = "first_half"
SEGMENT_SECOND = "second_half"
SEGMENTS = (SEGMENT_WHOLE, SEGMENT_FIRST, SEGMENT_SECOND)

FEATURE_FIELDS = ("mean", "std", "x3")
NORMALIZE_MODES = ("off", "global_l2")
STD_FLOOR = 1e-8

FEATURES_MANIFEST_NAME = "features_manifest.json"


@dataclass
class VideoFeatures:
    """One derived row: moments of a frame segment plus its frame count."""

    video_id: str
    segment: str
    mean: np.ndarray
    std: np.ndarray
    x3: np.ndarray
    num_frames: int
    labels: frozenset[int]


@dataclass
class GlobalMoments:
    """Per-dimension mean/std of one feature block over a training split."""

    field: str
    mean: np.ndarray
    std: np.ndarray


def moments(frames) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-dimension mean, population std, and third central moment.

    A single frame yields std = 0 and x3 = 0.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise ValueError("moments() needs a non-empty (n, D) frame matrix")
    mean = frames.mean(axis=0)
    centered = frames - mean
    std = np.sqrt((centered ** 2).mean(axis=0))
    x3 = (centered ** 3).mean(axis=0)
    return mean, std, x3


def _row(record: dataio.FrameRecord, segment: str, frames: np.ndarray) -> VideoFeatures:
    mean, std, x3 = moments(frames)
    return VideoFeatures(
        video_id=record.video_id,
        segment=segment,
        mean=mean,
        std=std,
        x3=x3,
        num_frames=int(frames.shape[0]),
        labels=record.labels,
    )


def augment_split(record: dataio.FrameRecord) -> list[VideoFeatures]:
    """Whole-video row, plus first/second half rows when n >= 2.

    The halves split at ceil(n/2), so an odd video puts the extra frame in
    the first half. All rows carry the source video's full label set.
    Single-frame videos emit only the whole row (halves would duplicate it).
    """
    n = record.num_frames
    rows = [_row(record, SEGMENT_WHOLE, record.frames)]
    if n >= 2:
        cut = (n + 1) // 2
        rows.append(_row(record, SEGMENT_FIRST, record.frames[:cut]))
        rows.append(_row(record, SEGMENT_SECOND, record.frames[cut:]))
    return rows


def fit_global_moments(rows: Sequence[VideoFeatures], field: str) -> GlobalMoments:
    """Per-dimension mean/std of one feature block, std floored at 1e-8."""
    if field not in FEATURE_FIELDS:
        raise ValueError(f"field must be one of {FEATURE_FIELDS}, got {field!r}")
    if not rows:
        raise ValueError("fit_global_moments() needs at least one row")
    block = np.stack([getattr(row, field) for row in rows])
    mean = block.mean(axis=0)
    std = np.sqrt(((block - mean) ** 2).mean(axis=0))
    return GlobalMoments(field=field, mean=mean, std=np.maximum(std, STD_FLOOR))


def normalize(row: VideoFeatures, gm: GlobalMoments, mode: str) -> VideoFeatures:
    """mode="off" is the identity. mode="global_l2" standardizes the block
    named by ``gm.field`` dimension-wise, then scales it to unit L2 norm
    (a zero vector stays zero)."""
    if mode == "off":
        return row
    if mode != "global_l2":
        raise ValueError(f"mode must be one of {NORMALIZE_MODES}, got {mode!r}")
    block = getattr(row, gm.field)
    if block.shape != gm.mean.shape or block.shape != gm.std.shape:
        raise ValueError(
            f"dimension mismatch: row block {block.shape} vs moments {gm.mean.shape}"
        )
    z = (block - gm.mean) / gm.std
    norm = float(np.linalg.norm(z))
    if norm > 0.0:
        z = z / norm
    return dataclasses.replace(row, **{gm.field: z})


def write_feature_rows(path: Path | str, rows: Sequence[VideoFeatures]) -> int:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps({
                "id": row.video_id,
                "segment": row.segment,
                "labels": sorted(row.labels),
                "mean": row.mean.tolist(),
                "std": row.std.tolist(),
                "x3": row.x3.tolist(),
                "num_frames": row.num_frames,
            }, separators=(",", ":")) + "\n")
    return len(rows)


def read_feature_rows(path: Path | str) -> list[VideoFeatures]:
    path = Path(path)
    rows: list[VideoFeatures] = []
    with open(path, "rb") as fh:
        offset = 0
        for index, raw in enumerate(fh):
            line = raw.strip()
            if line:
                try:
                    obj = json.loads(line.decode("utf-8"))
                except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                    raise ParseError(
                        f"malformed feature row: {exc}",
                        path=str(path), byte_offset=offset, record_index=index,
                    ) from exc
                if obj.get("segment") not in SEGMENTS:
                    raise SchemaError(
                        f"row {index} in {path}: bad segment {obj.get('segment')!r}"
                    )
                rows.append(VideoFeatures(
                    video_id=str(obj["id"]),
                    segment=obj["segment"],
                    mean=np.asarray(obj["mean"], dtype=np.float64),
                    std=np.asarray(obj["std"], dtype=np.float64),
                    x3=np.asarray(obj["x3"], dtype=np.float64),
                    num_frames=int(obj["num_frames"]),
                    labels=frozenset(int(v) for v in obj["labels"]),
                ))
            offset += len(raw)
    return rows


@dataclass
class FeatureSet:
    """Manifest of a featurized directory (shard-aligned with its source)."""

    vocab_size: int
    dim: int
    normalize: str
    shard_paths: list[str]
    rows_per_shard: list[int]
    source: str
    global_moments: dict | None
    root: Path | None = None

    @property
    def num_shards(self) -> int:
        return len(self.shard_paths)

    @property
    def num_rows(self) -> int:
        return sum(self.rows_per_shard)

    def shard_file(self, index: int) -> Path:
        base = self.root if self.root is not None else Path(".")
        return base / self.shard_paths[index]

    def load_shard(self, index: int) -> list[VideoFeatures]:
        return read_feature_rows(self.shard_file(index))

    def moments_for(self, field: str) -> GlobalMoments:
        if not self.global_moments or field not in self.global_moments:
            raise ConfigError(f"feature set has no stored global moments for {field!r}")
        entry = self.global_moments[field]
        return GlobalMoments(
            field=field,
            mean=np.asarray(entry["mean"], dtype=np.float64),
            std=np.asarray(entry["std"], dtype=np.float64),
        )


def write_features_manifest(path: Path | str, fs: FeatureSet) -> None:
    payload = {
        "V": fs.vocab_size,
        "D": fs.dim,
        "normalize": fs.normalize,
        "shard_paths": list(fs.shard_paths),
        "rows_per_shard": list(fs.rows_per_shard),
        "source": fs.source,
        "global_moments": fs.global_moments,
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def read_features_manifest(path: Path | str) -> FeatureSet:
    path = Path(path)
    if path.is_dir():
        path = path / FEATURES_MANIFEST_NAME
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid features manifest JSON: {exc}", path=str(path)) from exc
    required = {"V", "D", "normalize", "shard_paths", "rows_per_shard", "source"}
    missing = required - payload.keys()
    if missing:
        raise SchemaError(f"features manifest {path} missing fields: {sorted(missing)}")
    return FeatureSet(
        vocab_size=int(payload["V"]),
        dim=int(payload["D"]),
        normalize=payload["normalize"],
        shard_paths=list(payload["shard_paths"]),
        rows_per_shard=[int(n) for n in payload["rows_per_shard"]],
        source=str(payload["source"]),
        global_moments=payload.get("global_moments"),
        root=path.parent,
    )


def featurize_dataset(
    manifest: dataio.DatasetManifest,
    out_dir: Path | str,
    *,
    normalize_mode: str = "off",
    moments_from: FeatureSet | None = None,
) -> FeatureSet:
    """Featurize every shard of a dataset into a shard-aligned directory.

    With ``normalize_mode="global_l2"`` the per-block global moments are
    fitted over all rows of this dataset unless ``moments_from`` supplies
    moments fitted elsewhere (use this to normalize a holdout split with
    training-split moments).
    """
    if normalize_mode not in NORMALIZE_MODES:
        raise ConfigError(f"normalize must be one of {NORMALIZE_MODES}, got {normalize_mode!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    per_shard: list[list[VideoFeatures]] = []
    for i in range(manifest.num_shards):
        records = dataio.read_shard(
            manifest.shard_file(i),
            vocab_size=manifest.vocab_size,
            expected_dim=manifest.dim,
        )
        rows: list[VideoFeatures] = []
        for record in records:
            rows.extend(augment_split(record))
        per_shard.append(rows)

    stored_moments = None
    if normalize_mode == "global_l2":
        if moments_from is not None:
            fitted = {field: moments_from.moments_for(field) for field in FEATURE_FIELDS}
        else:
            all_rows = [row for rows in per_shard for row in rows]
            fitted = {field: fit_global_moments(all_rows, field) for field in FEATURE_FIELDS}
        stored_moments = {
            field: {"mean": gm.mean.tolist(), "std": gm.std.tolist()}
            for field, gm in fitted.items()
        }
        per_shard = [
            [_normalize_all(row, fitted) for row in rows]
            for rows in per_shard
        ]

    shard_names = [f"features_{i:05d}.jsonl" for i in range(manifest.num_shards)]
    rows_per_shard = []
    for name, rows in zip(shard_names, per_shard):
        rows_per_shard.append(write_feature_rows(out / name, rows))

    fs = FeatureSet(
        vocab_size=manifest.vocab_size,
        dim=manifest.dim,
        normalize=normalize_mode,
        shard_paths=shard_names,
        rows_per_shard=rows_per_shard,
        source=str(manifest.root or ""),
        global_moments=stored_moments,
        root=out,
    )
    write_features_manifest(out / FEATURES_MANIFEST_NAME, fs)
    logger.info("featurized %d shards (%d rows) into %s", fs.num_shards, fs.num_rows, out)
    return fs


def _normalize_all(row: VideoFeatures, fitted: dict[str, GlobalMoments]) -> VideoFeatures:
    for field in FEATURE_FIELDS:
        row = normalize(row, fitted[field], "global_l2")
    return row
