"""Training orchestration: fold-restricted batching, run-time validation,
checkpoint scheduling, parameter EMA, and prediction output.

A run directory looks like:

    out/
      model_config.json          resolved declarative model config
      train_log.csv              step,train_loss,holdout_gap
      summary.json               checkpoint names + final holdout GAP
      ckpt_140/
        model_config.json
        snapshot/{manifest.json,params.bin}
        ema/{manifest.json,params.bin}       when EMA is enabled
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import dataio, evalens, features, models, nncore
from .errors import ConfigError, NumericError, SchemaError

logger = logging.getLogger(__name__)

LOG_NAME = "train_log.csv"
SUMMARY_NAME = "summary.json"
MODEL_CONFIG_NAME = "model_config.json"
SHUFFLE_BUFFER = 4096

# RNG sub-stream tags (combined with the training seed).
_SHUFFLE_STREAM = 11
_VALSUBSET_STREAM = 12
_BOOST_STREAM = 13

VIDEO_LEVEL_KINDS = ("monn", "linear")


@dataclass
class TrainSession:
    """Everything one training run needs."""

    model_config: dict
    train: nncore.TrainConfig
    data_dir: Path
    out_dir: Path
    fold: dataio.FoldSpec
    ema_half_life: int | None = None
    ema_start: int = 0
    validation_subset: int = 1000
    top_k: int = evalens.DEFAULT_TOP_K

    def validate(self) -> None:
        self.train.validate()
        if self.train.max_steps > 0 and self.train.checkpoint_every > self.train.max_steps:
            raise ConfigError(
                f"checkpoint_every ({self.train.checkpoint_every}) must be <= "
                f"max_steps ({self.train.max_steps})"
            )
        if self.ema_half_life is not None and self.ema_half_life < 1:
            raise ConfigError(f"ema_half_life must be >= 1, got {self.ema_half_life}")
        if self.ema_start < 0:
            raise ConfigError(f"ema_start must be >= 0, got {self.ema_start}")
        if self.validation_subset < 1:
            raise ConfigError(f"validation_subset must be >= 1, got {self.validation_subset}")


# ---------------------------------------------------------------------------
# data loading


@dataclass
class _VideoLevelData:
    X: np.ndarray
    Y: np.ndarray
    ids: list[str]
    rows_per_shard: list[int]


@dataclass
class _FrameLevelData:
    records: list[dataio.FrameRecord]
    rows_per_shard: list[int]
    vocab_size: int
    max_frames: int


def _resolve_model_config(model_config: dict, data_dir: Path) -> tuple[dict, object]:
    """Fill vocab/feature dims from the data manifests and return the
    resolved config dict plus the parsed manifest object."""
    resolved = dict(model_config)
    kind = resolved.get("kind")
    if kind in VIDEO_LEVEL_KINDS:
        fs = features.read_features_manifest(data_dir)
        vocab, dim = fs.vocab_size, fs.dim
        source: object = fs
    elif kind == "birnn":
        manifest = dataio.read_manifest(Path(data_dir) / "manifest.json")
        vocab, dim = manifest.vocab_size, manifest.dim
        resolved.setdefault("max_frames", manifest.max_frames)
        source = manifest
    else:
        raise ConfigError(f"unknown model kind {kind!r}")
    for key, value in (("vocab_size", vocab), ("feature_dim", dim)):
        if key in resolved and resolved[key] != value:
            raise ConfigError(
                f"model config {key}={resolved[key]} conflicts with data ({value})"
            )
        resolved[key] = value
    return resolved, source


def _load_video_level(fs: features.FeatureSet, shard_indices: Sequence[int],
                      input_features: Sequence[str], *,
                      whole_only: bool) -> _VideoLevelData:
    all_rows: list[features.VideoFeatures] = []
    rows_per_shard = []
    for i in shard_indices:
        rows = fs.load_shard(i)
        if whole_only:
            rows = [r for r in rows if r.segment == features.SEGMENT_WHOLE]
        all_rows.extend(rows)
        rows_per_shard.append(len(rows))
    X = models.build_input(all_rows, input_features)
    Y = models.build_targets(all_rows, fs.vocab_size)
    ids = [r.video_id for r in all_rows]
    return _VideoLevelData(X=X, Y=Y, ids=ids, rows_per_shard=rows_per_shard)


def _load_frame_level(manifest: dataio.DatasetManifest,
                      shard_indices: Sequence[int]) -> _FrameLevelData:
    shards = dataio.load_shards(manifest, shard_indices)
    records = [record for shard in shards for record in shard]
    return _FrameLevelData(
        records=records,
        rows_per_shard=[len(shard) for shard in shards],
        vocab_size=manifest.vocab_size,
        max_frames=manifest.max_frames,
    )


def _pad_batch(records: Sequence[dataio.FrameRecord], max_frames: int
               ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    lengths = np.array([min(r.num_frames, max_frames) for r in records], dtype=np.int64)
    steps = int(lengths.max())
    dim = records[0].dim
    x = np.zeros((len(records), steps, dim))
    for i, record in enumerate(records):
        x[i, :lengths[i]] = record.frames[:lengths[i]]
    return x, lengths, steps


# ---------------------------------------------------------------------------
# shuffling


def _shuffled_indices(counts: Sequence[int], seed: int, epoch: int,
                      buffer_size: int = SHUFFLE_BUFFER) -> Iterator[int]:
    """Shard order shuffled per epoch; rows shuffled through a bounded
    buffer. Deterministic given (seed, epoch)."""
    rng = np.random.default_rng([seed, _SHUFFLE_STREAM, epoch])
    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(int)
    order = rng.permutation(len(counts))
    buf: list[int] = []
    for s in order:
        for idx in range(offsets[s], offsets[s + 1]):
            buf.append(idx)
            if len(buf) >= buffer_size:
                j = int(rng.integers(len(buf)))
                buf[j], buf[-1] = buf[-1], buf[j]
                yield buf.pop()
    while buf:
        j = int(rng.integers(len(buf)))
        buf[j], buf[-1] = buf[-1], buf[j]
        yield buf.pop()


def _batch_indices(counts: Sequence[int], batch_size: int, seed: int
                   ) -> Iterator[tuple[np.ndarray, int]]:
    """Endless stream of (row index batch, epoch). Partial batches carry
    over epoch boundaries so every step sees a full batch."""
    epoch = 0
    pending: list[int] = []
    while True:
        for idx in _shuffled_indices(counts, seed, epoch):
            pending.append(idx)
            if len(pending) == batch_size:
                yield np.array(pending, dtype=np.int64), epoch
                pending = []
        epoch += 1


# ---------------------------------------------------------------------------
# prediction helpers


def _top_k_pairs(probs: np.ndarray, top_k: int) -> list[list[tuple[int, float]]]:
    vocab = probs.shape[1]
    labels = np.arange(vocab)
    out = []
    for row in probs:
        order = np.lexsort((labels, -row))[:top_k]
        out.append([(int(label), float(row[label])) for label in order])
    return out


def _predict_video_level(model, store: nncore.ParameterStore, data: _VideoLevelData,
                         top_k: int, batch_size: int = 512) -> evalens.PredictionSet:
    videos: dict[str, list[tuple[int, float]]] = {}
    for start in range(0, len(data.ids), batch_size):
        stop = min(start + batch_size, len(data.ids))
        probs = model.forward(store, data.X[start:stop])
        for vid, pairs in zip(data.ids[start:stop], _top_k_pairs(probs, top_k)):
            videos[vid] = pairs
    return evalens.PredictionSet(tag="", videos=videos)


def _predict_frame_level(model, store: nncore.ParameterStore, data: _FrameLevelData,
                         top_k: int, batch_size: int = 64) -> evalens.PredictionSet:
    videos: dict[str, list[tuple[int, float]]] = {}
    for start in range(0, len(data.records), batch_size):
        chunk = data.records[start:start + batch_size]
        x, lengths, _ = _pad_batch(chunk, data.max_frames)
        probs = model.forward(store, x, lengths)
        for record, pairs in zip(chunk, _top_k_pairs(probs, top_k)):
            videos[record.video_id] = pairs
    return evalens.PredictionSet(tag="", videos=videos)


# ---------------------------------------------------------------------------
# training


def _write_checkpoint(out_dir: Path, step: int, store: nncore.ParameterStore,
                      ema: nncore.EmaState | None, resolved: dict) -> str:
    name = f"ckpt_{step}"
    ckpt = out_dir / name
    nncore.save_checkpoint(store, ckpt / "snapshot", ema=False)
    if ema is not None:
        nncore.save_checkpoint(ema.shadow, ckpt / "ema", ema=True)
    (ckpt / MODEL_CONFIG_NAME).write_text(
        json.dumps(resolved, indent=2) + "\n", encoding="utf-8"
    )
    return name


def run_training(session: TrainSession) -> dict:
    """Run one fold-restricted training session; returns a summary dict
    (also persisted as summary.json in the run directory)."""
    session.validate()
    cfg = session.train
    fold = session.fold
    resolved, source = _resolve_model_config(session.model_config, session.data_dir)
    kind = resolved["kind"]
    model = models.build_model(resolved)

    if kind in VIDEO_LEVEL_KINDS:
        fs: features.FeatureSet = source
        if fold.num_shards != fs.num_shards:
            raise ConfigError(
                f"fold spec covers {fold.num_shards} shards, data has {fs.num_shards}"
            )
        train_data = _load_video_level(fs, fold.train_indices(),
                                       resolved["input_features"], whole_only=False)
        val_data = _load_video_level(fs, fold.validation_indices(),
                                     resolved["input_features"], whole_only=True)
        val_truth = {vid: frozenset(np.flatnonzero(val_data.Y[i]).tolist())
                     for i, vid in enumerate(val_data.ids)}
        num_train_rows = len(train_data.ids)
    else:
        manifest: dataio.DatasetManifest = source
        if fold.num_shards != manifest.num_shards:
            raise ConfigError(
                f"fold spec covers {fold.num_shards} shards, data has {manifest.num_shards}"
            )
        train_data = _load_frame_level(manifest, fold.train_indices())
        val_data = _load_frame_level(manifest, fold.validation_indices())
        val_truth = {r.video_id: r.labels for r in val_data.records}
        num_train_rows = len(train_data.records)

    # Fixed random validation subset, drawn once from validation-role shards.
    val_rng = np.random.default_rng([cfg.seed, _VALSUBSET_STREAM])
    n_val = len(val_truth)
    subset_size = min(session.validation_subset, n_val)
    subset = np.sort(val_rng.choice(n_val, size=subset_size, replace=False))
    if kind in VIDEO_LEVEL_KINDS:
        val_subset = _VideoLevelData(
            X=val_data.X[subset], Y=val_data.Y[subset],
            ids=[val_data.ids[i] for i in subset], rows_per_shard=[],
        )
        subset_truth = {vid: val_truth[vid] for vid in val_subset.ids}
    else:
        val_subset = _FrameLevelData(
            records=[val_data.records[i] for i in subset], rows_per_shard=[],
            vocab_size=val_data.vocab_size, max_frames=val_data.max_frames,
        )
        subset_truth = {r.video_id: r.labels for r in val_subset.records}

    store = nncore.ParameterStore()
    model.init_params(store, cfg.seed)
    optimizer = nncore.AdamOptimizer(cfg)
    ema: nncore.EmaState | None = None
    if session.ema_half_life is not None and session.ema_start == 0:
        ema = nncore.ema_init(store, session.ema_half_life)

    out_dir = Path(session.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / MODEL_CONFIG_NAME).write_text(
        json.dumps(resolved, indent=2) + "\n", encoding="utf-8"
    )

    truncate = resolved.get("truncate_labels")
    checkpoints: list[str] = []
    log_rows = 0
    final_gap = None

    def eval_gap(current_model_state: nncore.ParameterStore) -> float:
        if kind in VIDEO_LEVEL_KINDS:
            preds = _predict_video_level(model, current_model_state, val_subset, session.top_k)
        else:
            preds = _predict_frame_level(model, current_model_state, val_subset, session.top_k)
        return evalens.gap(preds, subset_truth)

    with open(out_dir / LOG_NAME, "w", encoding="utf-8", newline="\n") as log:
        log.write("step,train_loss,holdout_gap\n")
        log.flush()
        if cfg.max_steps == 0:
            checkpoints.append(_write_checkpoint(out_dir, 0, store, ema, resolved))
        else:
            counts = train_data.rows_per_shard
            batches = _batch_indices(counts, cfg.batch_size, cfg.seed)
            for step in range(1, cfg.max_steps + 1):
                idx, _ = next(batches)
                try:
                    if kind in VIDEO_LEVEL_KINDS:
                        x = train_data.X[idx]
                        y = train_data.Y[idx]
                        probs = model.forward(store, x)
                    else:
                        chunk = [train_data.records[i] for i in idx]
                        x, lengths, _ = _pad_batch(chunk, train_data.max_frames)
                        y = np.zeros((len(chunk), train_data.vocab_size))
                        for i, record in enumerate(chunk):
                            y[i, sorted(record.labels)] = 1.0
                        probs = model.forward(store, x, lengths)

                    if truncate is not None:
                        loss, dpk = nncore.cross_entropy_multilabel(
                            probs[:, :truncate], y[:, :truncate])
                        dp = np.zeros_like(probs)
                        dp[:, :truncate] = dpk
                    else:
                        loss, dp = nncore.cross_entropy_multilabel(probs, y)
                    if not np.isfinite(loss):
                        raise NumericError("non-finite training loss")

                    grads = model.backward(store, dp)
                    optimizer.step(store, grads)
                except NumericError as exc:
                    # the partial log is already flushed row by row
                    raise NumericError(f"training aborted at step {step}: {exc}") from exc
                if session.ema_half_life is not None:
                    if ema is None and store.step >= session.ema_start:
                        ema = nncore.ema_init(store, session.ema_half_life)
                    elif ema is not None:
                        nncore.ema_update(ema, store)

                if step % cfg.eval_every == 0 or step == cfg.max_steps:
                    final_gap = eval_gap(store)
                    log.write(f"{step},{loss!r},{final_gap!r}\n")
                    log.flush()
                    log_rows += 1
                if step % cfg.checkpoint_every == 0 or step == cfg.max_steps:
                    name = _write_checkpoint(out_dir, step, store, ema, resolved)
                    if name not in checkpoints:
                        checkpoints.append(name)

    summary = {
        "checkpoints": checkpoints,
        "log": LOG_NAME,
        "steps": cfg.max_steps,
        "train_rows": num_train_rows,
        "validation_videos": n_val,
        "validation_subset": subset_size,
        "log_rows": log_rows,
        "final_holdout_gap": final_gap,
        "fold_index": fold.fold_index,
        "num_folds": fold.num_folds,
    }
    (out_dir / SUMMARY_NAME).write_text(
        json.dumps(summary, indent=2) + "\n", encoding="utf-8"
    )
    return summary


def train_all_folds(template: TrainSession, num_folds: int | None = None
                    ) -> tuple[dict[int, dict], dict[int, Exception]]:
    """Run independent sessions for fold indices 0..num_folds-1 with
    fold-distinct seeds under out_dir/fold_{f}. The shard split width comes
    from the template's fold spec, so running a single fold of a five-way
    split still trains on the non-validation four fifths. Per-fold failures
    are collected without aborting the remaining folds."""
    split = template.fold.num_folds
    runs = num_folds if num_folds is not None else split
    if not 1 <= runs <= split:
        raise ConfigError(f"num_folds must be in [1, {split}], got {runs}")
    results: dict[int, dict] = {}
    errors: dict[int, Exception] = {}
    for f in range(runs):
        fold = dataio.FoldSpec(num_folds=split, fold_index=f,
                               num_shards=template.fold.num_shards)
        session = dataclasses.replace(
            template,
            fold=fold,
            out_dir=Path(template.out_dir) / f"fold_{f}",
            train=dataclasses.replace(template.train, seed=template.train.seed + f),
        )
        try:
            results[f] = run_training(session)
        except Exception as exc:  # noqa: BLE001 - per-fold isolation is the contract
            logger.error("fold %d failed: %s", f, exc)
            errors[f] = exc
    return results, errors


# ---------------------------------------------------------------------------
# prediction from checkpoints


def _resolve_checkpoint(ckpt_dir: Path, use_ema: bool) -> tuple[Path, Path]:
    """Return (leaf checkpoint dir, model config path)."""
    ckpt_dir = Path(ckpt_dir)
    if (ckpt_dir / nncore.CHECKPOINT_MANIFEST).exists():
        config_path = ckpt_dir / MODEL_CONFIG_NAME
        if not config_path.exists():
            config_path = ckpt_dir.parent / MODEL_CONFIG_NAME
        return ckpt_dir, config_path
    leaf = ckpt_dir / ("ema" if use_ema else "snapshot")
    if not leaf.exists():
        variant = "EMA" if use_ema else "snapshot"
        raise SchemaError(f"checkpoint {ckpt_dir} has no {variant} arrays")
    return leaf, ckpt_dir / MODEL_CONFIG_NAME


def predict(ckpt_dir: Path | str, data_dir: Path | str, *,
            out_path: Path | str | None = None, use_ema: bool = False,
            top_k: int = evalens.DEFAULT_TOP_K) -> evalens.PredictionSet:
    """Load a checkpoint, run the model over a dataset split, and emit the
    per-video top-k predictions (descending confidence, tie-break by
    ascending label index)."""
    if top_k < 1:
        raise ValueError(f"top_k must be >= 1, got {top_k}")
    ckpt_dir = Path(ckpt_dir)
    leaf, config_path = _resolve_checkpoint(ckpt_dir, use_ema)
    if not config_path.exists():
        raise SchemaError(f"no {MODEL_CONFIG_NAME} next to checkpoint {ckpt_dir}")
    resolved = json.loads(config_path.read_text(encoding="utf-8"))
    store, manifest = nncore.load_checkpoint(leaf)
    if use_ema and not manifest.get("ema", False):
        raise SchemaError(f"checkpoint {leaf} does not hold EMA arrays")
    model = models.build_model(resolved)
    models.validate_store(model, store)

    kind = resolved["kind"]
    if kind in VIDEO_LEVEL_KINDS:
        fs = features.read_features_manifest(data_dir)
        if fs.dim != resolved["feature_dim"] or fs.vocab_size != resolved["vocab_size"]:
            raise SchemaError(
                f"data dims (V={fs.vocab_size}, D={fs.dim}) do not match model config"
            )
        data = _load_video_level(fs, range(fs.num_shards),
                                 resolved["input_features"], whole_only=True)
        preds = _predict_video_level(model, store, data, top_k)
    else:
        manifest_d = dataio.read_manifest(Path(data_dir) / "manifest.json")
        if manifest_d.dim != resolved["feature_dim"] \
                or manifest_d.vocab_size != resolved["vocab_size"]:
            raise SchemaError(
                f"data dims (V={manifest_d.vocab_size}, D={manifest_d.dim}) "
                "do not match model config"
            )
        data = _load_frame_level(manifest_d, range(manifest_d.num_shards))
        preds = _predict_frame_level(model, store, data, top_k)

    variant = "ema" if use_ema else "snapshot"
    preds.tag = f"{ckpt_dir.parent.name}/{ckpt_dir.name}/{variant}"
    if out_path is not None:
        evalens.write_predictions(out_path, preds)
    return preds


# ---------------------------------------------------------------------------
# boosting


def train_boost(boost_model: models.BoostModel, store: nncore.ParameterStore,
                x: np.ndarray, residual: np.ndarray,
                config: nncore.TrainConfig) -> float:
    """Minibatch L2 training of a booster against a fixed residual matrix.
    Returns the final training loss."""
    config.validate()
    optimizer = nncore.AdamOptimizer(config)
    batches = _batch_indices([x.shape[0]], config.batch_size, config.seed)
    loss = float("nan")
    for _ in range(config.max_steps):
        idx, _ = next(batches)
        out = boost_model.forward(store, x[idx])
        loss, dout = nncore.l2_loss(out, residual[idx])
        if not np.isfinite(loss):
            raise NumericError("non-finite boost training loss")
        grads = boost_model.backward(store, dout)
        optimizer.step(store, grads)
    return loss
