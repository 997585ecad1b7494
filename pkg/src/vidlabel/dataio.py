"""Dataset formats, synthetic benchmark generation, sharding and folds.

A dataset directory contains:

    manifest.json       vocabulary size, feature dims, ordered shard list, seed
    shard_00000.jsonl   one video per line:
                        {"id": str, "labels": [int, ...], "frames": [[float, ...], ...]}
    truth.jsonl         {"id": str, "labels": [int, ...]} per video

Floats are serialized with full round-trip precision, so a write followed
by a read reproduces records bit-exactly.
"""

from __future__ import annotations

import json
import logging
from contextlib import ExitStack
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ParseError, SchemaError

logger = logging.getLogger(__name__)

# Synthetic-generator constants. These are pinned: the acceptance benchmark
# depends on them byte for byte.
TOPIC_CENTROID_SCALE = 0.4
FRAME_NOISE_SIGMA = 0.5
LABEL_FLIP_PROB = 0.01
MAX_TOPICS_PER_VIDEO = 3
MAX_LABELS_PER_TOPIC = 3
DEFAULT_FRAME_CAP = 300

# Sub-stream tags so topic structure is independent of how many videos a
# single call generates (holdout sets extend the same video stream).
_TOPIC_STREAM = 0
_VIDEO_STREAM = 1


@dataclass
class FrameRecord:
    """One video: string id, label indices, and an (n, D) frame matrix."""

    video_id: str
    labels: frozenset[int]
    frames: np.ndarray

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])

    @property
    def dim(self) -> int:
        return int(self.frames.shape[1])


@dataclass
class DatasetManifest:
    """Describes one dataset directory. JSON keys: V, D_rgb, D_audio,
    max_frames, shard_paths, seed."""

    vocab_size: int
    rgb_dim: int
    audio_dim: int
    max_frames: int
    shard_paths: list[str]
    seed: int
    root: Path | None = None  # directory holding the shards; not serialized

    @property
    def dim(self) -> int:
        return self.rgb_dim + self.audio_dim

    @property
    def num_shards(self) -> int:
        return len(self.shard_paths)

    def shard_file(self, index: int) -> Path:
        base = self.root if self.root is not None else Path(".")
        return base / self.shard_paths[index]


@dataclass
class FoldSpec:
    """Deterministic shard-role assignment: shard i is validation in fold f
    iff i mod num_folds == f."""

    num_folds: int
    fold_index: int
    num_shards: int

    def role(self, shard_index: int) -> str:
        if shard_index % self.num_folds == self.fold_index:
            return "validation"
        return "train"

    def roles(self) -> dict[int, str]:
        return {i: self.role(i) for i in range(self.num_shards)}

    def validation_indices(self) -> list[int]:
        return [i for i in range(self.num_shards) if self.role(i) == "validation"]

    def train_indices(self) -> list[int]:
        return [i for i in range(self.num_shards) if self.role(i) == "train"]


def assign_folds(manifest: DatasetManifest, num_folds: int, fold_index: int) -> FoldSpec:
    """Assign every num_folds-th shard to validation, the rest to train."""
    if num_folds < 1 or num_folds > manifest.num_shards:
        raise ConfigError(
            f"num_folds must be in [1, {manifest.num_shards}], got {num_folds}"
        )
    if not 0 <= fold_index < num_folds:
        raise ConfigError(
            f"fold_index must be in [0, {num_folds}), got {fold_index}"
        )
    return FoldSpec(num_folds=num_folds, fold_index=fold_index, num_shards=manifest.num_shards)


def write_manifest(path: Path | str, manifest: DatasetManifest) -> None:
    payload = {
        "V": manifest.vocab_size,
        "D_rgb": manifest.rgb_dim,
        "D_audio": manifest.audio_dim,
        "max_frames": manifest.max_frames,
        "shard_paths": list(manifest.shard_paths),
        "seed": manifest.seed,
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def read_manifest(path: Path | str) -> DatasetManifest:
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid manifest JSON: {exc}", path=str(path)) from exc
    required = {"V", "D_rgb", "D_audio", "max_frames", "shard_paths", "seed"}
    missing = required - payload.keys()
    if missing:
        raise SchemaError(f"manifest {path} missing fields: {sorted(missing)}")
    if not payload["shard_paths"]:
        raise SchemaError(f"manifest {path} has empty shard_paths")
    if payload["max_frames"] < 1:
        raise SchemaError(f"manifest {path} has max_frames < 1")
    return DatasetManifest(
        vocab_size=int(payload["V"]),
        rgb_dim=int(payload["D_rgb"]),
        audio_dim=int(payload["D_audio"]),
        max_frames=int(payload["max_frames"]),
        shard_paths=list(payload["shard_paths"]),
        seed=int(payload["seed"]),
        root=path.parent,
    )


def _record_line(record: FrameRecord) -> str:
    return json.dumps(
        {
            "id": record.video_id,
            "labels": sorted(record.labels),
            "frames": record.frames.tolist(),
        },
        separators=(",", ":"),
    )


def write_shard(path: Path | str, records: Iterable[FrameRecord]) -> int:
    """Write records as JSON lines. Returns the number written."""
    count = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for record in records:
            if record.num_frames < 1:
                raise SchemaError(f"record {record.video_id} has no frames")
            fh.write(_record_line(record) + "\n")
            count += 1
    return count


def _parse_record(obj: dict, *, vocab_size: int | None, expected_dim: int | None,
                  path: str, index: int, offset: int) -> FrameRecord:
    for key in ("id", "labels", "frames"):
        if key not in obj:
            raise SchemaError(f"record {index} in {path} missing key {key!r}")
    frames_raw = obj["frames"]
    if not frames_raw:
        raise SchemaError(f"record {index} ({obj['id']}) in {path} has no frames")
    lengths = {len(row) for row in frames_raw}
    if len(lengths) != 1:
        raise SchemaError(
            f"record {index} ({obj['id']}) in {path} has ragged frame vectors "
            f"(lengths {sorted(lengths)})"
        )
    dim = lengths.pop()
    if expected_dim is not None and dim != expected_dim:
        raise SchemaError(
            f"record {index} ({obj['id']}) in {path}: frame dim {dim} != expected {expected_dim}"
        )
    labels = obj["labels"]
    for label in labels:
        if not isinstance(label, int) or label < 0:
            raise SchemaError(f"record {index} ({obj['id']}) in {path}: bad label {label!r}")
        if vocab_size is not None and label >= vocab_size:
            raise SchemaError(
                f"record {index} ({obj['id']}) in {path}: label {label} >= vocab size {vocab_size}"
            )
    return FrameRecord(
        video_id=str(obj["id"]),
        labels=frozenset(labels),
        frames=np.asarray(frames_raw, dtype=np.float64),
    )


def read_shard(path: Path | str, *, vocab_size: int | None = None,
               expected_dim: int | None = None) -> list[FrameRecord]:
    """Read one shard file. Raises ParseError with byte offset and record
    index on malformed lines, SchemaError on invariant violations."""
    path = Path(path)
    records: list[FrameRecord] = []
    offset = 0
    with open(path, "rb") as fh:
        for index, raw in enumerate(fh):
            line = raw.strip()
            if line:
                try:
                    obj = json.loads(line.decode("utf-8"))
                except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                    raise ParseError(
                        f"malformed record: {exc}",
                        path=str(path), byte_offset=offset, record_index=index,
                    ) from exc
                records.append(
                    _parse_record(obj, vocab_size=vocab_size, expected_dim=expected_dim,
                                  path=str(path), index=index, offset=offset)
                )
            offset += len(raw)
    return records


def load_shards(manifest: DatasetManifest,
                shard_indices: Sequence[int] | None = None) -> list[list[FrameRecord]]:
    """Load the given shards (all by default), validating record invariants
    and id uniqueness across the loaded set."""
    if shard_indices is None:
        shard_indices = range(manifest.num_shards)
    seen: set[str] = set()
    out: list[list[FrameRecord]] = []
    for i in shard_indices:
        records = read_shard(
            manifest.shard_file(i),
            vocab_size=manifest.vocab_size,
            expected_dim=manifest.dim,
        )
        for record in records:
            if record.video_id in seen:
                raise SchemaError(f"duplicate video id {record.video_id!r} in dataset")
            seen.add(record.video_id)
        out.append(records)
    return out


def write_truth(path: Path | str, truth: dict[str, frozenset[int]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for video_id, labels in truth.items():
            fh.write(json.dumps({"id": video_id, "labels": sorted(labels)}) + "\n")


def generate_synthetic(
    out_dir: Path | str,
    *,
    seed: int,
    num_videos: int,
    vocab_size: int,
    rgb_dim: int,
    audio_dim: int,
    num_topics: int,
    num_shards: int = 10,
    frames_range: tuple[int, int] = (5, 30),
    max_frames: int = DEFAULT_FRAME_CAP,
    first_video_index: int = 0,
) -> DatasetManifest:
    """Generate a deterministic synthetic dataset.

    Each topic owns a Gaussian centroid and a small label subset. Each video
    samples 1-3 topics; its labels are the union of the topics' labels with
    independent per-label flip noise, and each frame is the mean of the
    topics' centroids plus Gaussian noise. Videos go round-robin into shards.

    Topic structure depends only on (seed, vocab, dims, topics), and video j
    depends only on (seed, first_video_index + j), so a second call with
    ``first_video_index=N`` extends the same video stream — that is how the
    benchmark holdout split is produced without leaking training videos.
    """
    for name, value in (("num_videos", num_videos), ("vocab_size", vocab_size),
                        ("rgb_dim", rgb_dim), ("audio_dim", audio_dim),
                        ("num_topics", num_topics), ("num_shards", num_shards)):
        if value < 1:
            raise ConfigError(f"{name} must be >= 1, got {value}")
    lo, hi = frames_range
    if not 1 <= lo <= hi <= max_frames:
        raise ConfigError(
            f"frames_range must satisfy 1 <= lo <= hi <= max_frames, got {frames_range}"
        )
    if first_video_index < 0:
        raise ConfigError(f"first_video_index must be >= 0, got {first_video_index}")

    dim = rgb_dim + audio_dim
    topic_rng = np.random.default_rng([seed, _TOPIC_STREAM])
    centroids = topic_rng.normal(0.0, TOPIC_CENTROID_SCALE, size=(num_topics, dim))
    topic_labels: list[list[int]] = []
    for _ in range(num_topics):
        k = int(topic_rng.integers(1, MAX_LABELS_PER_TOPIC + 1))
        chosen = topic_rng.choice(vocab_size, size=min(k, vocab_size), replace=False)
        topic_labels.append(sorted(int(v) for v in chosen))

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    shard_names = [f"shard_{i:05d}.jsonl" for i in range(num_shards)]
    truth: dict[str, frozenset[int]] = {}
    with ExitStack() as stack:
        handles = [
            stack.enter_context(open(out / name, "w", encoding="utf-8", newline="\n"))
            for name in shard_names
        ]
        for j in range(num_videos):
            index = first_video_index + j
            rng = np.random.default_rng([seed, _VIDEO_STREAM, index])
            t_count = int(rng.integers(1, MAX_TOPICS_PER_VIDEO + 1))
            topics = rng.choice(num_topics, size=min(t_count, num_topics), replace=False)
            labels: set[int] = set()
            for t in topics:
                labels.update(topic_labels[int(t)])
            flips = np.flatnonzero(rng.random(vocab_size) < LABEL_FLIP_PROB)
            labels ^= {int(v) for v in flips}
            n = int(rng.integers(lo, hi + 1))
            base = centroids[topics].mean(axis=0)
            frames = base + rng.normal(0.0, FRAME_NOISE_SIGMA, size=(n, dim))
            record = FrameRecord(f"v{index:08d}", frozenset(labels), frames)
            handles[j % num_shards].write(_record_line(record) + "\n")
            truth[record.video_id] = record.labels

    write_truth(out / "truth.jsonl", truth)
    manifest = DatasetManifest(
        vocab_size=vocab_size,
        rgb_dim=rgb_dim,
        audio_dim=audio_dim,
        max_frames=max_frames,
        shard_paths=shard_names,
        seed=seed,
        root=out,
    )
    write_manifest(out / "manifest.json", manifest)
    logger.info("generated %d videos into %d shards under %s", num_videos, num_shards, out)
    return manifest
