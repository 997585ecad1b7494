"""End-to-end pipeline: synth -> featurize -> fold training -> predict ->
ensemble -> evaluate/correlate, driven by one declarative JSON config.

Stages are skipped when their outputs already exist and are newer than
their inputs (timestamp comparison, with the config file counting as an
input to every stage). The report contains only deterministic content, so
two runs from the same config are byte-identical.
"""

from __future__ import annotations

import json
import logging
import statistics
from pathlib import Path

import numpy as np

from . import dataio, evalens, features, models, nncore, train
from .errors import ConfigError, ParseError, PipelineError

logger = logging.getLogger(__name__)

REPORT_NAME = "report.json"

# Allowed keys per section; unknown keys are rejected before any work runs.
_SCHEMA: dict[str, dict] = {
    "out": None,
    "synth": {
        "seed": None, "videos": None, "vocab": None, "rgb_dim": None,
        "audio_dim": None, "topics": None, "shards": None,
        "min_frames": None, "max_frames": None, "frame_cap": None,
        "holdout_videos": None, "holdout_shards": None,
    },
    "featurize": {"normalize": None},
    "model": {
        "kind": None, "preset": None, "width_factor": None,
        "num_experts": None, "input_features": None, "expert_hidden": None,
        "truncate_labels": None, "cell": None, "layer1_units": None,
        "layer2_units": None, "final_state": None,
    },
    "train": {
        "folds": None, "learning_rate": None, "batch_size": None,
        "max_steps": None, "checkpoint_every": None, "eval_every": None,
        "seed": None, "ema_half_life": None, "ema_start": None,
        "validation_subset": None, "lr_decay_factor": None, "lr_decay_every": None,
    },
    "predict": {"top_k": None, "variants": None},
    "ensemble": {"variant": None, "top_k": None},
    "correlate": {"k": None},
}

_REQUIRED_SECTIONS = ("out", "synth", "model", "train")
_REQUIRED_SYNTH = ("seed", "videos", "vocab", "rgb_dim", "audio_dim",
                   "topics", "shards", "holdout_videos", "holdout_shards")


def validate_config(config: dict) -> None:
    """Schema-check a pipeline config; unknown keys are rejected."""
    if not isinstance(config, dict):
        raise ConfigError("pipeline config must be a JSON object")
    unknown = set(config) - set(_SCHEMA)
    if unknown:
        raise ConfigError(f"unknown pipeline config keys: {sorted(unknown)}")
    for section, allowed in _SCHEMA.items():
        if allowed is None or section not in config:
            continue
        if not isinstance(config[section], dict):
            raise ConfigError(f"pipeline config section {section!r} must be an object")
        bad = set(config[section]) - set(allowed)
        if bad:
            raise ConfigError(f"unknown keys in {section!r}: {sorted(bad)}")
    for section in _REQUIRED_SECTIONS:
        if section not in config:
            raise ConfigError(f"pipeline config missing required section {section!r}")
    missing = [k for k in _REQUIRED_SYNTH if k not in config["synth"]]
    if missing:
        raise ConfigError(f"synth section missing keys: {missing}")
    variants = config.get("predict", {}).get("variants", ["snapshot"])
    for variant in variants:
        if variant not in ("snapshot", "ema"):
            raise ConfigError(f"unknown predict variant {variant!r}")
    if "ema" in variants and config["train"].get("ema_half_life") is None:
        raise ConfigError("predict variant 'ema' requires train.ema_half_life")


def model_config_from_section(section: dict) -> dict:
    """Expand a model section (preset-based or explicit) into the
    declarative model config consumed by the train module."""
    section = dict(section)
    preset = section.pop("preset", None)
    width_factor = section.pop("width_factor", 1.0)
    if preset is not None:
        if preset in models.MONN_PRESETS:
            out = {
                "kind": "monn",
                "expert_hidden": list(models.scaled_monn_hidden(preset, width_factor)),
            }
        elif preset in models.RNN_PRESETS:
            scaled = models.scaled_rnn_units(preset, width_factor)
            out = {"kind": "birnn", **scaled}
        else:
            raise ConfigError(f"unknown model preset {preset!r}")
        out.update(section)
        return out
    if "kind" not in section:
        raise ConfigError("model section needs either 'preset' or 'kind'")
    return section


def _stale(outputs: list[Path], inputs: list[Path]) -> bool:
    if not outputs or not all(path.exists() for path in outputs):
        return True
    newest_input = max(
        (path.stat().st_mtime_ns for path in inputs if path.exists()), default=0
    )
    oldest_output = min(path.stat().st_mtime_ns for path in outputs)
    return oldest_output < newest_input


def _stage(name: str, outputs: list[Path], inputs: list[Path], action) -> bool:
    """Run ``action`` unless the stage is fresh. Returns True when run."""
    if not _stale(outputs, inputs):
        logger.info("stage %s: up to date, skipped", name)
        return False
    logger.info("stage %s: running", name)
    try:
        action()
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError(f"pipeline stage {name!r} failed: {exc}") from exc
    return True


def run_pipeline(config_path: Path | str) -> tuple[Path, dict]:
    """Execute the pipeline described by a config file. Paths in the config
    are resolved relative to the config file's directory. Returns the
    report path and the parsed report."""
    config_path = Path(config_path)
    try:
        config = json.loads(config_path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"pipeline config not found: {config_path}") from None
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid pipeline config JSON: {exc}",
                         path=str(config_path)) from exc
    validate_config(config)

    base = config_path.parent
    out = Path(config["out"])
    if not out.is_absolute():
        out = base / out
    synth = config["synth"]
    normalize_mode = config.get("featurize", {}).get("normalize", "off")
    model_config = model_config_from_section(config["model"])
    tr = config["train"]
    predict_cfg = config.get("predict", {})
    top_k = int(predict_cfg.get("top_k", evalens.DEFAULT_TOP_K))
    variants = list(predict_cfg.get("variants", ["snapshot"]))
    ens_cfg = config.get("ensemble", {})
    ens_variant = ens_cfg.get("variant", variants[-1])
    if ens_variant not in variants:
        raise ConfigError(f"ensemble variant {ens_variant!r} is not among predicted variants")
    corr_k = int(config.get("correlate", {}).get("k", evalens.DEFAULT_CORRELATION_K))

    train_dir = out / "data" / "train"
    holdout_dir = out / "data" / "holdout"
    feat_train = out / "features" / "train"
    feat_holdout = out / "features" / "holdout"
    runs_dir = out / "runs"
    preds_dir = out / "preds"
    report_path = out / REPORT_NAME

    frames_range = (int(synth.get("min_frames", 5)), int(synth.get("max_frames", 30)))
    frame_cap = int(synth.get("frame_cap", dataio.DEFAULT_FRAME_CAP))

    def synth_args(videos, shards, first_index):
        return dict(
            seed=int(synth["seed"]), num_videos=int(videos),
            vocab_size=int(synth["vocab"]), rgb_dim=int(synth["rgb_dim"]),
            audio_dim=int(synth["audio_dim"]), num_topics=int(synth["topics"]),
            num_shards=int(shards), frames_range=frames_range,
            max_frames=frame_cap, first_video_index=first_index,
        )

    _stage(
        "synth-train",
        [train_dir / "manifest.json"], [config_path],
        lambda: dataio.generate_synthetic(
            train_dir, **synth_args(synth["videos"], synth["shards"], 0)),
    )
    _stage(
        "synth-holdout",
        [holdout_dir / "manifest.json"], [config_path],
        lambda: dataio.generate_synthetic(
            holdout_dir, **synth_args(synth["holdout_videos"],
                                      synth["holdout_shards"],
                                      int(synth["videos"]))),
    )

    is_video_level = model_config["kind"] in train.VIDEO_LEVEL_KINDS
    if is_video_level:
        def featurize_train():
            manifest = dataio.read_manifest(train_dir / "manifest.json")
            features.featurize_dataset(manifest, feat_train, normalize_mode=normalize_mode)

        def featurize_holdout():
            manifest = dataio.read_manifest(holdout_dir / "manifest.json")
            moments_from = None
            if normalize_mode == "global_l2":
                moments_from = features.read_features_manifest(feat_train)
            features.featurize_dataset(manifest, feat_holdout,
                                       normalize_mode=normalize_mode,
                                       moments_from=moments_from)

        _stage("featurize-train", [feat_train / features.FEATURES_MANIFEST_NAME],
               [config_path, train_dir / "manifest.json"], featurize_train)
        _stage("featurize-holdout", [feat_holdout / features.FEATURES_MANIFEST_NAME],
               [config_path, holdout_dir / "manifest.json",
                feat_train / features.FEATURES_MANIFEST_NAME], featurize_holdout)
        model_data_dir = feat_train
        predict_data_dir = feat_holdout
    else:
        model_data_dir = train_dir
        predict_data_dir = holdout_dir

    num_folds = int(tr.get("folds", 5))
    train_config = nncore.TrainConfig(
        learning_rate=float(tr.get("learning_rate", 2.5e-4)),
        batch_size=int(tr.get("batch_size", 256)),
        seed=int(tr.get("seed", 0)),
        max_steps=int(tr["max_steps"]),
        checkpoint_every=int(tr["checkpoint_every"]),
        eval_every=int(tr.get("eval_every", 25)),
        lr_decay_factor=float(tr.get("lr_decay_factor", 1.0)),
        lr_decay_every=int(tr.get("lr_decay_every", 0)),
    )

    def train_folds():
        num_shards = int(synth["shards"])
        template = train.TrainSession(
            model_config=model_config,
            train=train_config,
            data_dir=model_data_dir,
            out_dir=runs_dir,
            fold=dataio.FoldSpec(num_folds=num_folds, fold_index=0, num_shards=num_shards),
            ema_half_life=tr.get("ema_half_life"),
            ema_start=int(tr.get("ema_start", 0)),
            validation_subset=int(tr.get("validation_subset", 1000)),
            top_k=top_k,
        )
        _, errors = train.train_all_folds(template, num_folds)
        if errors:
            detail = "; ".join(f"fold {f}: {exc}" for f, exc in sorted(errors.items()))
            raise PipelineError(f"fold training failed ({detail})")

    fold_summaries = [runs_dir / f"fold_{f}" / train.SUMMARY_NAME for f in range(num_folds)]
    train_inputs = [config_path]
    if is_video_level:
        train_inputs.append(feat_train / features.FEATURES_MANIFEST_NAME)
    else:
        train_inputs.append(train_dir / "manifest.json")
    _stage("train", fold_summaries, train_inputs, train_folds)

    # enumerate (fold, checkpoint, variant) prediction files
    members: list[tuple[str, Path, int, str, str]] = []
    for f in range(num_folds):
        summary = json.loads(fold_summaries[f].read_text(encoding="utf-8"))
        for ckpt in summary["checkpoints"]:
            for variant in variants:
                name = f"fold{f}_{ckpt}_{variant}.csv"
                members.append((name, preds_dir / name, f, ckpt, variant))

    def predict_all():
        preds_dir.mkdir(parents=True, exist_ok=True)
        for name, path, f, ckpt, variant in members:
            train.predict(
                runs_dir / f"fold_{f}" / ckpt, predict_data_dir,
                out_path=path, use_ema=(variant == "ema"), top_k=top_k,
            )

    _stage("predict", [path for _, path, *_ in members],
           [config_path, *fold_summaries], predict_all)

    ens_members = [(name, path) for name, path, _, _, variant in members
                   if variant == ens_variant]
    ensemble_path = out / "ensemble.csv"

    def run_ensemble():
        sets = [(evalens.read_predictions(path, tag=name), 1.0)
                for name, path in ens_members]
        merged, dropped = evalens.ensemble(sets, top_k=int(ens_cfg.get("top_k", top_k)))
        if dropped:
            logger.warning("ensemble dropped %d videos", dropped)
        evalens.write_predictions(ensemble_path, merged)

    _stage("ensemble", [ensemble_path],
           [config_path, *(path for _, path in ens_members)], run_ensemble)

    def build_report():
        truth = evalens.read_truth(holdout_dir / "truth.jsonl")
        gaps: dict[str, float] = {}
        for name, path, *_ in members:
            gaps[name] = evalens.gap(evalens.read_predictions(path), truth)
        ensemble_gap = evalens.gap(evalens.read_predictions(ensemble_path), truth)
        member_gaps = [gaps[name] for name, _ in ens_members]
        sets = [evalens.read_predictions(path, tag=name) for name, path in ens_members]
        matrix = evalens.correlation_matrix(sets, corr_k) if len(sets) >= 2 else [[1.0]]
        fold_rows = {}
        for name, _, f, ckpt, variant in members:
            fold_rows.setdefault(str(f), {}).setdefault(ckpt, {})[variant] = gaps[name]
        report = {
            "config": config,
            "holdout_videos": len(truth),
            "train_rows_per_fold": {
                str(f): json.loads(fold_summaries[f].read_text(encoding="utf-8"))["train_rows"]
                for f in range(num_folds)
            },
            "gaps": gaps,
            "folds": fold_rows,
            "ensemble_variant": ens_variant,
            "ensemble_members": [name for name, _ in ens_members],
            "ensemble_gap": ensemble_gap,
            "median_single_gap": statistics.median(member_gaps),
            "max_single_gap": max(member_gaps),
            "correlation": {
                "files": [name for name, _ in ens_members],
                "k": corr_k,
                "matrix": [list(map(float, row)) for row in np.asarray(matrix)],
            },
        }
        report_path.write_text(
            json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )

    _stage("report", [report_path],
           [config_path, ensemble_path, *(path for _, path, *_ in members)],
           build_report)

    return report_path, json.loads(report_path.read_text(encoding="utf-8"))
