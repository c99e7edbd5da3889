"""``unet-gnn`` command line: train, eval, predict, report, synth, ablate."""
import argparse
import json
import logging
import sys
from pathlib import Path

from . import checkpoint as ckpt_io
from . import harness
from .config import RunConfig, load_config, parse_override
from .data_pipeline import FisheyeParams, fisheye_warp, load_dataset, load_manifest, synth_shapes, write_dataset
from .errors import ConfigError, UGNNError

log = logging.getLogger("unet_gnn")


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    over = {}
    for item in getattr(args, "set", None) or []:
        key, val = parse_override(item)
        over[key] = val
    for attr, flag in (("seed", "seed"), ("variant", "variant"), ("cost_matrix", "cost_matrix"),
                       ("out_dir", "out"), ("train_manifest", "manifest"), ("epochs", "epochs")):
        v = getattr(args, flag, None)
        if v is not None:
            over[attr] = v
    if getattr(args, "loss", None):
        over["loss"] = args.loss
    cfg = cfg.replace(**over)
    cfg.validate(check_paths=True)
    return cfg


def cmd_train(args):
    cfg = _run_config(args)
    res = harness.train(cfg, out_dir=cfg.out_dir)
    last = res.history[-1]
    print(f"trained {last['epoch']} epochs: loss {last['loss']:.6f}, train mIoU {last['miou']:.4f}; "
          f"checkpoint {res.checkpoint}")


def _checkpoint_params(path):
    ck = ckpt_io.load_checkpoint(path)
    return harness.params_from_checkpoint(ck)


def cmd_eval(args):
    cfg, params = _checkpoint_params(args.checkpoint)
    manifest = load_manifest(args.manifest)
    if manifest.num_classes != cfg.num_classes:
        raise ConfigError(f"checkpoint predicts {cfg.num_classes} classes, manifest has {manifest.num_classes}")
    conf = None
    for shard in range(args.shards):
        part = manifest.shard(shard, args.shards)
        samples = load_dataset(part, cfg.image_size, cfg.in_channels)
        conf = harness.evaluate(params, cfg, samples, manifest.ignore_index, conf)
    rep = harness.report_from_confusion(conf, manifest.class_names)
    text = harness.dumps_report(rep)
    if args.out:
        Path(args.out).write_text(text)
    print(harness.render_report(rep, title=cfg.variant), end="")


def cmd_predict(args):
    cfg, params = _checkpoint_params(args.checkpoint)
    written, errors = harness.predict_files(params, cfg, args.images, args.out, save_probs=args.probs)
    for path, msg in errors:
        print(f"error: {path}: {msg}", file=sys.stderr)
    print(f"wrote {len(written)} files to {args.out}")
    if errors:
        return 3


def cmd_report(args):
    rep = json.loads(Path(args.metrics).read_text())
    text = harness.render_report(rep, title=args.title)
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")


def cmd_synth(args):
    samples = synth_shapes(args.seed, args.n, args.size, args.num_classes)
    if args.fisheye:
        fp = FisheyeParams.centered(args.size, args.size, args.fisheye)
        samples = [fisheye_warp(s, fp) for s in samples]
    names = ["background"] + [f"shape{i}" for i in range(1, args.num_classes)]
    path = write_dataset(samples, args.out, args.num_classes, names)
    print(f"wrote {len(samples)} samples; manifest {path}")


def cmd_ablate(args):
    s = harness.AblationSettings(seed=args.seed, epochs=args.epochs)
    rep = harness.run_ablation(s)
    text = json.dumps(rep, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    for v, r in rep["variants"].items():
        print(f"{v:<14} test macro mIoU {r['test']['macro_miou']:.4f}")
    print(f"delta (gnn - baseline): {rep['macro_miou_delta_gnn_minus_baseline']:+.4f}")


def build_parser():
    p = argparse.ArgumentParser(prog="unet-gnn", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a manifest")
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--manifest", help="training manifest (overrides data.train_manifest)")
    t.add_argument("--out", help="output directory (overrides output.dir)")
    t.add_argument("--variant", choices=["unet_gnn", "unet_baseline"])
    t.add_argument("--loss", choices=["ce", "gwd"])
    t.add_argument("--cost-matrix", dest="cost_matrix")
    t.add_argument("--epochs", type=int)
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any dotted config key")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--out", help="write the JSON metrics report here")
    e.add_argument("--shards", type=int, default=1)
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", help="write paletted PNG masks")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--probs", action="store_true", help="also write per-class probability maps")
    pr.add_argument("images", nargs="+")
    pr.set_defaults(func=cmd_predict)

    r = sub.add_parser("report", help="render a JSON metrics report as a table")
    r.add_argument("--metrics", required=True)
    r.add_argument("--out")
    r.add_argument("--title", default="model")
    r.set_defaults(func=cmd_report)

    s = sub.add_parser("synth", help="generate a synthetic shapes dataset")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n", type=int, default=16)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--num-classes", dest="num_classes", type=int, default=2)
    s.add_argument("--fisheye", type=float, default=0.0, help="equidistant focal scale; 0 disables")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    a = sub.add_parser("ablate", help="unet_gnn vs unet_baseline on fisheye-warped synthetic data")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--epochs", type=int, default=harness.AblationSettings.epochs)
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args) or 0
    except UGNNError as exc:
        print(f"{exc.category} error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
