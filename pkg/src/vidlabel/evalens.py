"""GAP ranking metric, prediction-correlation measure, and ensembling.

Prediction files are competition-style CSV:

    VideoId,LabelConfidencePairs
    v00000001,7 0.998123 3 0.912000 ...

Pairs appear in rank order (descending confidence, ties broken by
ascending label index) with confidences printed to 6 decimal places.
Ground-truth files are JSON lines {"id": str, "labels": [int, ...]}.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, ParseError, SchemaError

logger = logging.getLogger(__name__)

DEFAULT_TOP_K = 20
DEFAULT_CORRELATION_K = 20
PREDICTION_HEADER = "VideoId,LabelConfidencePairs"


@dataclass
class PredictionSet:
    """Per-video ranked (label, confidence) lists plus a provenance tag."""

    tag: str
    videos: dict[str, list[tuple[int, float]]]

    def video_ids(self) -> set[str]:
        return set(self.videos)


def rank_pairs(pairs: Sequence[tuple[int, float]],
               top_k: int | None = None) -> list[tuple[int, float]]:
    """Sort by descending confidence, ties by ascending label; truncate."""
    ranked = sorted(pairs, key=lambda p: (-p[1], p[0]))
    if top_k is not None:
        ranked = ranked[:top_k]
    return ranked


def write_predictions(path: Path | str, preds: PredictionSet) -> int:
    """Write the CSV format; videos sorted by id for deterministic bytes."""
    count = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(PREDICTION_HEADER + "\n")
        for video_id in sorted(preds.videos):
            pairs = rank_pairs(preds.videos[video_id])
            cell = " ".join(f"{label} {conf:.6f}" for label, conf in pairs)
            fh.write(f"{video_id},{cell}\n")
            count += 1
    return count


def read_predictions(path: Path | str, tag: str | None = None) -> PredictionSet:
    path = Path(path)
    videos: dict[str, list[tuple[int, float]]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != PREDICTION_HEADER:
            raise ParseError(
                f"bad prediction header {header!r}", path=str(path), record_index=0
            )
        for index, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            video_id, _, cell = line.partition(",")
            tokens = cell.split()
            if len(tokens) % 2 != 0:
                raise ParseError(
                    "odd number of label/confidence tokens",
                    path=str(path), record_index=index,
                )
            try:
                pairs = [
                    (int(tokens[i]), float(tokens[i + 1]))
                    for i in range(0, len(tokens), 2)
                ]
            except ValueError as exc:
                raise ParseError(
                    f"bad label/confidence pair: {exc}",
                    path=str(path), record_index=index,
                ) from exc
            labels = [label for label, _ in pairs]
            if len(labels) != len(set(labels)):
                raise SchemaError(f"duplicate labels for video {video_id!r} in {path}")
            if video_id in videos:
                raise SchemaError(f"duplicate video id {video_id!r} in {path}")
            videos[video_id] = rank_pairs(pairs)
    return PredictionSet(tag=tag or path.stem, videos=videos)


def read_truth(path: Path | str) -> dict[str, frozenset[int]]:
    path = Path(path)
    truth: dict[str, frozenset[int]] = {}
    with open(path, "rb") as fh:
        offset = 0
        for index, raw in enumerate(fh):
            line = raw.strip()
            if line:
                try:
                    obj = json.loads(line.decode("utf-8"))
                except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                    raise ParseError(
                        f"malformed truth row: {exc}",
                        path=str(path), byte_offset=offset, record_index=index,
                    ) from exc
                video_id = str(obj["id"])
                if video_id in truth:
                    raise SchemaError(f"duplicate video id {video_id!r} in {path}")
                truth[video_id] = frozenset(int(v) for v in obj["labels"])
            offset += len(raw)
    return truth


# ---------------------------------------------------------------------------
# GAP


def gap(preds: PredictionSet, truth: dict[str, frozenset[int]], *,
        max_positives_per_video: int | None = None) -> float:
    """Global average precision over the pooled ranked prediction list.

    All (confidence, hit) pairs across videos are ranked together
    (descending confidence, ties by video id then label). Precision at rank
    i is hits-in-first-i / i; each hit contributes precision/M where M is
    the total ground-truth positive count. Videos present in the truth but
    absent from the predictions contribute only to M.
    """
    if not truth:
        raise ValueError("gap() needs a non-empty ground truth")
    missing = set(preds.videos) - set(truth)
    if missing:
        raise ValueError(
            f"{len(missing)} predicted videos missing from truth, e.g. {sorted(missing)[:3]}"
        )
    cap = max_positives_per_video
    total_positives = sum(
        min(len(labels), cap) if cap is not None else len(labels)
        for labels in truth.values()
    )
    if total_positives == 0:
        return 0.0

    entries = []
    for video_id, pairs in preds.videos.items():
        positives = truth[video_id]
        for label, conf in pairs:
            entries.append((-conf, video_id, label, label in positives))
    if not entries:
        return 0.0
    entries.sort()
    hits = np.array([e[3] for e in entries], dtype=np.float64)
    precision = np.cumsum(hits) / np.arange(1, len(entries) + 1)
    return float((precision * hits).sum() / total_positives)


# ---------------------------------------------------------------------------
# prediction correlation


def _sparse_top_k(pairs: list[tuple[int, float]], k: int) -> dict[int, float]:
    return {label: conf for label, conf in pairs[:k]}


def correlation(p1: PredictionSet, p2: PredictionSet,
                k: int = DEFAULT_CORRELATION_K) -> float:
    """Mean per-video cosine similarity of the two sets' top-k sparse
    confidence vectors. Videos where either vector is zero are skipped."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    shared = p1.video_ids() & p2.video_ids()
    if not shared:
        raise ValueError("prediction sets share no video ids")
    values = []
    for video_id in sorted(shared):
        a = _sparse_top_k(p1.videos[video_id], k)
        b = _sparse_top_k(p2.videos[video_id], k)
        norm_a = np.sqrt(sum(c * c for c in a.values()))
        norm_b = np.sqrt(sum(c * c for c in b.values()))
        if norm_a == 0.0 or norm_b == 0.0:
            continue
        dot = sum(conf * b.get(label, 0.0) for label, conf in a.items())
        values.append(dot / (norm_a * norm_b))
    if not values:
        raise ValueError("every shared video had a zero-norm prediction vector")
    return float(np.mean(values))


def correlation_matrix(sets: Sequence[PredictionSet],
                       k: int = DEFAULT_CORRELATION_K) -> np.ndarray:
    """Pairwise correlation() with unit diagonal."""
    if len(sets) < 2:
        raise ValueError("correlation_matrix() needs at least two prediction sets")
    n = len(sets)
    matrix = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            rho = correlation(sets[i], sets[j], k)
            matrix[i, j] = rho
            matrix[j, i] = rho
    return matrix


# ---------------------------------------------------------------------------
# ensembling


def ensemble(members: Sequence[tuple[PredictionSet, float]],
             top_k: int = DEFAULT_TOP_K) -> tuple[PredictionSet, int]:
    """Weighted sum of the members' sparse confidence vectors.

    Weights are normalized internally, so only ratios matter. Only videos
    covered by every member are emitted; the second return value counts the
    video ids dropped for missing coverage.
    """
    if not members:
        raise ConfigError("ensemble needs at least one member")
    weights = np.array([w for _, w in members], dtype=np.float64)
    if (weights < 0).any():
        raise ConfigError("ensemble weights must be >= 0")
    total = weights.sum()
    if total <= 0.0:
        raise ConfigError("ensemble weights are all zero")
    weights = weights / total

    common = set.intersection(*(ps.video_ids() for ps, _ in members))
    union = set.union(*(ps.video_ids() for ps, _ in members))
    dropped = len(union) - len(common)
    if dropped:
        logger.warning("ensemble dropped %d videos not covered by every member", dropped)

    videos: dict[str, list[tuple[int, float]]] = {}
    for video_id in sorted(common):
        acc: dict[int, float] = {}
        for (ps, _), w in zip(members, weights):
            for label, conf in ps.videos[video_id]:
                acc[label] = acc.get(label, 0.0) + w * conf
        videos[video_id] = rank_pairs(acc.items(), top_k)
    return PredictionSet(tag="ensemble", videos=videos), dropped


def load_ensemble_spec(path: Path | str) -> tuple[list[tuple[Path, float]], int]:
    """Parse an ensemble spec file: {"members": [{"path", "weight"}, ...],
    "top_k": int}. Paths are resolved relative to the spec file."""
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid ensemble spec JSON: {exc}", path=str(path)) from exc
    members = payload.get("members")
    if not members:
        raise ConfigError(f"ensemble spec {path} lists no members")
    out = []
    for entry in members:
        if "path" not in entry:
            raise ConfigError(f"ensemble spec member missing 'path': {entry}")
        member_path = Path(entry["path"])
        if not member_path.is_absolute():
            member_path = path.parent / member_path
        out.append((member_path, float(entry.get("weight", 1.0))))
    top_k = int(payload.get("top_k", DEFAULT_TOP_K))
    return out, top_k
