"""Command-line interface: gen, train, eval, summarize, inspect.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
Train settings come from defaults, then an optional JSON config file
mirroring TrainConfig, then explicit flags.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import dataio, pipeline, summarize
from .errors import DataError, NumericError, UsageError


def _dump(payload, out_path) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True)
    if out_path:
        Path(out_path).write_text(text + "\n")
    else:
        print(text)


def cmd_gen(args) -> int:
    spec = dataio.SyntheticSpec(
        seed=args.seed, n_videos=args.n_videos, t_min=args.t_min, t_max=args.t_max,
        d=args.d, n_concepts=args.concepts, shots_per_video=args.shots,
        highlight_fraction=args.highlight_fraction, noise_sigma=args.noise,
        n_annotators=args.annotators, test_fraction=args.test_fraction)
    manifest = dataio.generate_synthetic(spec, args.out_dir)
    print(manifest)
    return 0


_TRAIN_FLAGS = {
    "mode": "mode", "epochs": "epochs", "seed": "seed", "lr": "lr",
    "labels_fraction": "labels_fraction", "heads": "n_heads", "layers": "n_layers",
    "d": "d", "lstm_units": "lstm_units", "budget": "budget_fraction",
    "grad_clip": "grad_clip", "cls_weight": "cls_weight", "rec_weight": "rec_weight",
    "con_weight": "con_weight", "div_weight": "div_weight", "dtype": "dtype",
}


def _build_train_config(args) -> pipeline.TrainConfig:
    payload = {}
    if args.config:
        try:
            payload.update(json.loads(Path(args.config).read_text()))
        except json.JSONDecodeError as e:
            raise DataError(f"{args.config}: invalid config JSON ({e})") from e
    for flag, key in _TRAIN_FLAGS.items():
        value = getattr(args, flag)
        if value is not None:
            payload[key] = value
    if args.dn is not None:
        payload["subspace_dims"] = [int(v) for v in args.dn.split(",") if v]
    if args.unscaled_attention:
        payload["scaled_attention"] = False
    if args.rec_mean:
        payload["rec_mean"] = True
    if "d" not in payload:
        # infer feature width from the first manifest entry
        entries = dataio.load_manifest(args.manifest)
        if not entries:
            raise DataError(f"{args.manifest}: manifest lists no videos")
        first = Path(args.manifest).parent / entries[0].feature_path
        payload["d"] = int(dataio.read_features(first).shape[1])
    return pipeline.TrainConfig.from_dict(payload)


def cmd_train(args) -> int:
    cfg = _build_train_config(args)
    result = pipeline.train(args.manifest, cfg, out_dir=args.out_dir)
    last = result.history[-1] if result.history else {}
    print(json.dumps({"checkpoint": str(result.checkpoint_path),
                      "log": str(result.log_path),
                      "epochs": cfg.epochs,
                      "final_epoch_mean_total": last.get("mean_total")},
                     indent=2, sort_keys=True))
    return 0


def _load_checkpoint_arg(args):
    if args.checkpoint is None:
        return None, None
    params, _, _, cfg = pipeline.load_checkpoint(args.checkpoint)
    return params, cfg


def cmd_eval(args) -> int:
    params, cfg = _load_checkpoint_arg(args)
    if params is None:
        if args.scorer == "model":
            raise UsageError("eval with the model scorer needs --checkpoint")
        entries = dataio.load_manifest(args.manifest)
        if not entries:
            raise DataError(f"{args.manifest}: manifest lists no videos")
        first = Path(args.manifest).parent / entries[0].feature_path
        d = int(dataio.read_features(first).shape[1])
        cfg = pipeline.TrainConfig(d=d, n_heads=1, n_layers=1, subspace_dims=[1],
                                   lstm_units=1)
    report = pipeline.evaluate(
        params, cfg, args.manifest, aggregation=args.aggregation,
        budget_fraction=args.budget, scorer=args.scorer, scorer_seed=args.seed,
        split=args.split)
    _dump(report, args.out)
    return 0


def cmd_summarize(args) -> int:
    params, cfg = _load_checkpoint_arg(args)
    feats = dataio.read_features(args.features)
    t_len = feats.shape[0]
    if feats.shape[1] != cfg.d:
        raise DataError(f"feature width {feats.shape[1]} does not match checkpoint d={cfg.d}")
    video_id = Path(args.features).stem
    boundaries = None
    fps = 2.0
    if args.annotation:
        ann = dataio.AnnotationFile.load(args.annotation)
        ann.check_against(t_len, path=str(args.annotation))
        fps = ann.fps
        if ann.boundaries:
            boundaries = summarize.ShotSegmentation(tuple(ann.boundaries), t_len)
        video_id = ann.video_id
    if boundaries is None:
        if args.segment == "changepoint":
            boundaries = summarize.segment_changepoint(
                feats, args.max_shots or max(1, t_len // 10))
        else:
            target = args.target_len or max(1, min(t_len, int(round(5 * fps))))
            boundaries = summarize.segment_uniform(t_len, target)
    video = dataio.Video(video_id=video_id, features=feats,
                         labels=dataio.LabelSet.absent(),
                         annotations=dataio.AnnotationSet(),
                         boundaries=boundaries, split="test", fps=fps)
    scores = pipeline.video_scores(video, params, cfg)
    budget = args.budget if args.budget is not None else cfg.budget_fraction
    mask = summarize.make_summary(scores, boundaries, budget_fraction=budget)
    _dump(summarize.summary_to_json(mask, boundaries, video_id), args.out)
    return 0


def cmd_inspect(args) -> int:
    params, cfg = _load_checkpoint_arg(args)
    index_path = pipeline.inspect(params, cfg, args.video, args.out_dir)
    print(index_path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vsum",
        description="Train, evaluate, and inspect an attention-based video summarizer.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic planted-highlight dataset")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-videos", type=int, default=20)
    p.add_argument("--t-min", type=int, default=48)
    p.add_argument("--t-max", type=int, default=96)
    p.add_argument("--d", type=int, default=32)
    p.add_argument("--concepts", type=int, default=4)
    p.add_argument("--shots", type=int, default=12)
    p.add_argument("--highlight-fraction", type=float, default=0.15)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--annotators", type=int, default=3)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train on a manifest's train split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config", help="JSON file mirroring TrainConfig; flags override")
    p.add_argument("--mode", choices=["supervised", "semi", "unsupervised"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--labels-fraction", type=float,
                   help="keep this fraction of train videos labeled, mask the rest")
    p.add_argument("--heads", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--dn", help="comma-separated per-head subspace dims")
    p.add_argument("--lstm-units", type=int)
    p.add_argument("--budget", type=float)
    p.add_argument("--grad-clip", type=float)
    p.add_argument("--cls-weight", type=float)
    p.add_argument("--rec-weight", type=float)
    p.add_argument("--con-weight", type=float)
    p.add_argument("--div-weight", type=float)
    p.add_argument("--dtype", choices=["float64", "float32"])
    p.add_argument("--unscaled-attention", action="store_true",
                   help="drop the 1/sqrt(d_n) factor on attention logits")
    p.add_argument("--rec-mean", action="store_true",
                   help="mean- instead of sum-reduce the reconstruction loss")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or baseline scorer")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--aggregation", choices=["max", "mean"], default="mean")
    p.add_argument("--budget", type=float)
    p.add_argument("--scorer", choices=["model", "random", "uniform"], default="model")
    p.add_argument("--seed", type=int, default=0, help="baseline scorer seed")
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--out", help="write the report JSON here instead of stdout")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("summarize", help="emit a keyshot summary JSON for one video")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--annotation", help="annotation JSON supplying shot boundaries")
    p.add_argument("--segment", choices=["uniform", "changepoint"], default="uniform",
                   help="fallback segmentation when no boundaries are annotated")
    p.add_argument("--target-len", type=int, help="uniform fallback shot length")
    p.add_argument("--max-shots", type=int, help="changepoint fallback shot cap")
    p.add_argument("--budget", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("inspect", help="export attention maps for one video")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--video", required=True, help="feature file to inspect")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (DataError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
