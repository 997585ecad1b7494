"""Shared fixtures: the pinned synthetic benchmark and small datasets.

The benchmark pipeline is executed once per session through the CLI; the
acceptance criteria and the benchmark-level behavioral tests all read from
its artifacts.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pytest

from vidlabel import cli, dataio, evalens, features, models, nncore, train

# The pinned acceptance benchmark: 5000 training videos plus a 1000-video
# holdout drawn from the same seeded stream, V=50, D=40, 12 topics, very
# short videos (1-3 frames) so per-video moments stay genuinely noisy.
BENCHMARK_CONFIG = {
    "out": "bench",
    "synth": {
        "seed": 42, "videos": 5000, "vocab": 50, "rgb_dim": 32, "audio_dim": 8,
        "topics": 12, "shards": 10, "min_frames": 1, "max_frames": 3,
        "holdout_videos": 1000, "holdout_shards": 2,
    },
    "featurize": {"normalize": "off"},
    "model": {
        "preset": "monn3lw", "width_factor": 0.01, "num_experts": 3,
        "input_features": ["mean", "std", "num_frames"],
    },
    "train": {
        "folds": 5, "learning_rate": 0.01, "batch_size": 128, "max_steps": 360,
        "checkpoint_every": 180, "eval_every": 25, "seed": 7,
        "ema_half_life": 25, "validation_subset": 600,
        "lr_decay_factor": 0.6, "lr_decay_every": 70,
    },
    "predict": {"top_k": 20, "variants": ["snapshot", "ema"]},
    "ensemble": {"variant": "snapshot", "top_k": 20},
}

INPUT_BLOCKS = ("mean", "std", "num_frames")


@dataclass
class Benchmark:
    root: Path
    report: dict
    elapsed: float
    train_dir: Path = field(init=False)
    holdout_dir: Path = field(init=False)

    def __post_init__(self):
        self.train_dir = self.root / "data" / "train"
        self.holdout_dir = self.root / "data" / "holdout"

    @property
    def features_train(self) -> Path:
        return self.root / "features" / "train"

    @property
    def features_holdout(self) -> Path:
        return self.root / "features" / "holdout"

    @property
    def preds_dir(self) -> Path:
        return self.root / "preds"

    def train_truth(self) -> dict:
        return evalens.read_truth(self.train_dir / "truth.jsonl")

    def holdout_truth(self) -> dict:
        return evalens.read_truth(self.holdout_dir / "truth.jsonl")

    @property
    def final_step(self) -> int:
        return BENCHMARK_CONFIG["train"]["max_steps"]

    @property
    def mid_step(self) -> int:
        return BENCHMARK_CONFIG["train"]["checkpoint_every"]


@pytest.fixture(scope="session")
def benchmark(tmp_path_factory) -> Benchmark:
    base = tmp_path_factory.mktemp("benchmark")
    config_path = base / "bench.json"
    config_path.write_text(json.dumps(BENCHMARK_CONFIG, indent=2))
    start = time.perf_counter()
    rc = cli.main(["pipeline", "--config", str(config_path)])
    elapsed = time.perf_counter() - start
    assert rc == 0, "benchmark pipeline failed"
    report = json.loads((base / "bench" / "report.json").read_text())
    return Benchmark(root=base / "bench", report=report, elapsed=elapsed)


@dataclass
class BoostResult:
    base_l2: float
    boosted_l2: float
    base_gap: float
    boosted_gap: float


@pytest.fixture(scope="session")
def boost_result(benchmark) -> BoostResult:
    """Weak linear base (undertrained) plus a residual booster, both
    trained on benchmark fold 0 and scored on the holdout."""
    fs_train = features.read_features_manifest(benchmark.features_train)
    fold = dataio.FoldSpec(5, 0, fs_train.num_shards)
    tr_rows = [r for i in fold.train_indices() for r in fs_train.load_shard(i)]
    x_tr = models.build_input(tr_rows, INPUT_BLOCKS)
    y_tr = models.build_targets(tr_rows, fs_train.vocab_size)

    fs_hold = features.read_features_manifest(benchmark.features_holdout)
    ho_rows = [r for i in range(fs_hold.num_shards) for r in fs_hold.load_shard(i)
               if r.segment == features.SEGMENT_WHOLE]
    x_ho = models.build_input(ho_rows, INPUT_BLOCKS)
    y_ho = models.build_targets(ho_rows, fs_hold.vocab_size)

    base = models.LinearModel(models.LinearConfig(
        vocab_size=fs_train.vocab_size, feature_dim=fs_train.dim,
        input_features=INPUT_BLOCKS))
    store_base = nncore.ParameterStore()
    base.init_params(store_base, 31)
    config = nncore.TrainConfig(learning_rate=0.01, batch_size=128, seed=31,
                                max_steps=60, checkpoint_every=60, eval_every=60)
    optimizer = nncore.AdamOptimizer(config)
    batches = train._batch_indices([x_tr.shape[0]], config.batch_size, config.seed)
    for _ in range(config.max_steps):
        idx, _ = next(batches)
        probs = base.forward(store_base, x_tr[idx])
        _, dp = nncore.cross_entropy_multilabel(probs, y_tr[idx])
        optimizer.step(store_base, base.backward(store_base, dp))

    residual = y_tr - base.forward(store_base, x_tr)
    boost = models.BoostModel(models.BoostConfig(
        vocab_size=fs_train.vocab_size, feature_dim=fs_train.dim,
        hidden_units=48, input_features=INPUT_BLOCKS))
    store_boost = nncore.ParameterStore()
    boost.init_params(store_boost, 32)
    train.train_boost(boost, store_boost, x_tr, residual,
                      nncore.TrainConfig(learning_rate=0.005, batch_size=128,
                                         seed=32, max_steps=400,
                                         checkpoint_every=400, eval_every=400))

    p_base = base.forward(store_base, x_ho)
    p_boosted = models.boost_wrap(p_base, boost.forward(store_boost, x_ho))
    truth = {r.video_id: r.labels for r in ho_rows}

    def to_preds(probs):
        videos = {}
        for vid, pairs in zip((r.video_id for r in ho_rows),
                              train._top_k_pairs(probs, 20)):
            videos[vid] = pairs
        return evalens.PredictionSet("boost-check", videos)

    return BoostResult(
        base_l2=float(((y_ho - p_base) ** 2).mean()),
        boosted_l2=float(((y_ho - p_boosted) ** 2).mean()),
        base_gap=evalens.gap(to_preds(p_base), truth),
        boosted_gap=evalens.gap(to_preds(p_boosted), truth),
    )


@pytest.fixture(scope="session")
def bigru_run(benchmark, tmp_path_factory):
    """A short BiGRU training run on the raw benchmark frames (fold 0),
    with holdout predictions for the correlation comparison."""
    out = tmp_path_factory.mktemp("bigru")
    session = train.TrainSession(
        model_config={"kind": "birnn", "cell": "gru", "layer1_units": 12,
                      "layer2_units": 25, "num_experts": 2},
        train=nncore.TrainConfig(learning_rate=0.01, batch_size=64, seed=21,
                                 max_steps=150, checkpoint_every=150, eval_every=50),
        data_dir=benchmark.train_dir,
        out_dir=out / "run",
        fold=dataio.FoldSpec(num_folds=5, fold_index=0, num_shards=10),
        validation_subset=300,
    )
    summary = train.run_training(session)
    preds_path = out / "bigru_holdout.csv"
    preds = train.predict(out / "run" / "ckpt_150", benchmark.holdout_dir,
                          out_path=preds_path)
    return {"summary": summary, "preds": preds, "preds_path": preds_path}


@pytest.fixture()
def tiny_dataset(tmp_path):
    """A small dataset + featurized dir for unit tests."""
    manifest = dataio.generate_synthetic(
        tmp_path / "ds", seed=5, num_videos=200, vocab_size=12, rgb_dim=6,
        audio_dim=2, num_topics=4, num_shards=5, frames_range=(2, 8))
    fs = features.featurize_dataset(manifest, tmp_path / "feat")
    return manifest, fs
