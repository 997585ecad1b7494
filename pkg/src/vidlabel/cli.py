"""Command-line entry point.

Subcommands: synth, featurize, train, predict, evaluate, correlate,
ensemble, pipeline. Each prints one machine-readable JSON summary line to
stdout on success; logs go to stderr. Exit codes: 0 success, 1
runtime/validation error, 2 usage error.

Heavy imports happen inside the handlers so that ``--threads`` can pin the
BLAS thread pools before numpy is loaded.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .errors import PipelineError


def _add_global_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=None,
                        help="override the seed used by the subcommand")
    parser.add_argument("--threads", type=int, default=1,
                        help="BLAS thread count (default 1 for reproducibility)")
    parser.add_argument("--config", default=None,
                        help="configuration file (train and pipeline)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vidlabel",
        description="Desk-scale multi-label video tagging pipeline.",
    )
    _add_global_flags(parser)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--videos", type=int, required=True)
    p.add_argument("--vocab", type=int, required=True)
    p.add_argument("--rgb-dim", type=int, required=True)
    p.add_argument("--audio-dim", type=int, required=True)
    p.add_argument("--topics", type=int, required=True)
    p.add_argument("--shards", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--min-frames", type=int, default=5)
    p.add_argument("--max-frames", type=int, default=30)
    p.add_argument("--frame-cap", type=int, default=300)
    p.add_argument("--start-index", type=int, default=0,
                   help="first video index (extends the same seeded stream)")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("featurize", help="convert a dataset to feature rows")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--normalize", choices=["off", "global_l2"], default="off")
    p.add_argument("--moments-from", default=None,
                   help="featurized dir whose fitted moments to reuse")
    p.set_defaults(func=_cmd_featurize)

    p = sub.add_parser("train", help="train one fold or all folds")
    p.add_argument("--config", required=True, help="JSON file: {model, train, data}")
    p.add_argument("--fold", default="all",
                   help="fold index to train, or 'all' (default)")
    p.add_argument("--folds", type=int, default=5, help="fold split width")
    p.add_argument("--out", required=True)
    p.add_argument("--ema", type=int, default=None, metavar="HALFLIFE",
                   help="enable parameter EMA with this half-life in steps")
    p.add_argument("--truncate", type=int, default=None, metavar="K",
                   help="fit only the first K labels")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("predict", help="write top-k predictions for a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ema", action="store_true", help="use the EMA arrays")
    p.add_argument("--top-k", type=int, default=20)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("evaluate", help="GAP of a prediction file against truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--cap-positives", type=int, default=None,
                   help="cap per-video positives counted in the recall denominator")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("correlate", help="pairwise correlation of prediction files")
    p.add_argument("--preds", nargs="+", required=True)
    p.add_argument("--k", type=int, default=20)
    p.set_defaults(func=_cmd_correlate)

    p = sub.add_parser("ensemble", help="weighted merge of prediction files")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_ensemble)

    p = sub.add_parser("pipeline", help="run the full pipeline from a config file")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_pipeline)

    return parser


# ---------------------------------------------------------------------------
# handlers


def _cmd_synth(args) -> dict:
    from . import dataio

    manifest = dataio.generate_synthetic(
        args.out,
        seed=args.seed,
        num_videos=args.videos,
        vocab_size=args.vocab,
        rgb_dim=args.rgb_dim,
        audio_dim=args.audio_dim,
        num_topics=args.topics,
        num_shards=args.shards,
        frames_range=(args.min_frames, args.max_frames),
        max_frames=args.frame_cap,
        first_video_index=args.start_index,
    )
    return {
        "manifest": str(Path(args.out) / "manifest.json"),
        "videos": args.videos,
        "shards": manifest.num_shards,
    }


def _cmd_featurize(args) -> dict:
    from . import dataio, features

    manifest = dataio.read_manifest(Path(args.in_dir) / "manifest.json")
    moments_from = None
    if args.moments_from is not None:
        moments_from = features.read_features_manifest(args.moments_from)
    fs = features.featurize_dataset(
        manifest, args.out, normalize_mode=args.normalize, moments_from=moments_from
    )
    return {"out": str(args.out), "rows": fs.num_rows, "files": fs.num_shards}


def _load_train_config_file(path: str) -> dict:
    from .errors import ConfigError, ParseError

    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"train config not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid train config JSON: {exc}", path=path) from exc
    for section in ("model", "train", "data"):
        if section not in payload:
            raise ConfigError(f"train config missing section {section!r}")
    return payload


def _cmd_train(args) -> dict:
    from . import dataio, nncore, pipeline, train
    from .errors import ConfigError

    payload = _load_train_config_file(args.config)
    model_config = pipeline.model_config_from_section(payload["model"])
    if args.truncate is not None:
        model_config["truncate_labels"] = args.truncate
    tr = payload["train"]
    if args.seed is not None:
        tr["seed"] = args.seed
    config = nncore.TrainConfig(
        learning_rate=float(tr.get("learning_rate", 2.5e-4)),
        batch_size=int(tr.get("batch_size", 256)),
        seed=int(tr.get("seed", 0)),
        max_steps=int(tr["max_steps"]),
        checkpoint_every=int(tr["checkpoint_every"]),
        eval_every=int(tr.get("eval_every", 25)),
        lr_decay_factor=float(tr.get("lr_decay_factor", 1.0)),
        lr_decay_every=int(tr.get("lr_decay_every", 0)),
    )
    data_dir = Path(payload["data"])
    if not data_dir.is_absolute():
        data_dir = Path(args.config).parent / data_dir
    if model_config["kind"] in train.VIDEO_LEVEL_KINDS:
        from . import features

        num_shards = features.read_features_manifest(data_dir).num_shards
    else:
        num_shards = dataio.read_manifest(data_dir / "manifest.json").num_shards

    ema_half_life = args.ema if args.ema is not None else tr.get("ema_half_life")
    template = train.TrainSession(
        model_config=model_config,
        train=config,
        data_dir=data_dir,
        out_dir=Path(args.out),
        fold=dataio.FoldSpec(num_folds=args.folds, fold_index=0, num_shards=num_shards),
        ema_half_life=ema_half_life,
        ema_start=int(tr.get("ema_start", 0)),
        validation_subset=int(tr.get("validation_subset", 1000)),
    )
    if args.fold == "all":
        results, errors = train.train_all_folds(template)
        if errors:
            detail = "; ".join(f"fold {f}: {exc}" for f, exc in sorted(errors.items()))
            raise PipelineError(f"fold training failed ({detail})")
        return {
            "out": str(args.out),
            "folds": len(results),
            "checkpoints": {str(f): r["checkpoints"] for f, r in sorted(results.items())},
        }
    try:
        fold_index = int(args.fold)
    except ValueError:
        raise ConfigError(f"--fold must be an integer or 'all', got {args.fold!r}") from None
    import dataclasses

    session = dataclasses.replace(
        template,
        fold=dataio.FoldSpec(num_folds=args.folds, fold_index=fold_index,
                             num_shards=num_shards),
    )
    summary = train.run_training(session)
    return {
        "out": str(args.out),
        "fold": fold_index,
        "checkpoints": summary["checkpoints"],
        "final_holdout_gap": summary["final_holdout_gap"],
    }


def _cmd_predict(args) -> dict:
    from . import train

    preds = train.predict(
        args.ckpt, args.data, out_path=args.out,
        use_ema=args.ema, top_k=args.top_k,
    )
    return {"out": str(args.out), "videos": len(preds.videos)}


def _cmd_evaluate(args) -> dict:
    from . import evalens

    preds = evalens.read_predictions(args.pred)
    truth = evalens.read_truth(args.truth)
    score = evalens.gap(preds, truth, max_positives_per_video=args.cap_positives)
    return {"gap": score}


def _cmd_correlate(args) -> dict:
    from . import evalens

    sets = [evalens.read_predictions(path) for path in args.preds]
    matrix = evalens.correlation_matrix(sets, args.k)
    return {
        "files": [str(p) for p in args.preds],
        "k": args.k,
        "matrix": [[float(v) for v in row] for row in matrix],
    }


def _cmd_ensemble(args) -> dict:
    from . import evalens

    members, top_k = evalens.load_ensemble_spec(args.spec)
    sets = [(evalens.read_predictions(path), weight) for path, weight in members]
    merged, dropped = evalens.ensemble(sets, top_k=top_k)
    count = evalens.write_predictions(args.out, merged)
    return {"out": str(args.out), "videos": count, "dropped": dropped}


def _cmd_pipeline(args) -> dict:
    from . import pipeline

    report_path, report = pipeline.run_pipeline(args.config)
    return {
        "report": str(report_path),
        "ensemble_gap": report["ensemble_gap"],
        "median_single_gap": report["median_single_gap"],
    }


# ---------------------------------------------------------------------------
# dispatch


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    threads = str(max(1, args.threads))
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, threads)

    logging.basicConfig(
        stream=sys.stderr,
        level=logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        summary = args.func(args)
    except (PipelineError, ValueError, OSError) as exc:
        print(json.dumps({"error": str(exc), "type": type(exc).__name__}),
              file=sys.stderr)
        return 1
    print(json.dumps(summary))
    return 0


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
