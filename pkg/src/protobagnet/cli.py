"""``protobagnet`` command line: generate | train | explain | evaluate.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime or data error.
Relative output paths resolve under ``$PROTOBAGNET_OUTPUT`` (default: cwd).
"""

import argparse
import json
import logging
import sys
import time
from pathlib import Path


from . import evalx
from ._validation import ConfigError, DataError, InputError, TrainingError
from .checkpoint import CheckpointError
from .config import ExperimentConfig
from .data import export_dataset, generate_synthetic_dataset, load_image_folder, load_png, stack
from .estimator import ProtoBagNetClassifier, numeric_mode
from .explain import global_explanation, local_explanation, render_overlay, save_png
from .trainer import evaluate_classification, write_metrics_csv

logger = logging.getLogger("protobagnet")

SPLITS = {"train": 0, "val": 1, "test": 2}
SUITES = ("classification", "faithfulness", "localization", "importance", "all")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --- helpers -----------------------------------------------------------------


def _config(args):
    if args.config:
        return ExperimentConfig.load(args.config, args.set)
    from .config import apply_overrides

    return ExperimentConfig.from_dict(apply_overrides({}, args.set))


def _outdir(cfg, args):
    out = cfg.resolve_output(args.output)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _snapshot(cfg, out, command, extra=None):
    cfg.dump(out / f"config.{command}.yaml")
    if extra:
        (out / f"args.{command}.json").write_text(json.dumps(extra, indent=2, sort_keys=True, default=str))


def load_split(cfg, split):
    """Samples for one split, from the synthetic generator or an image folder."""
    d = cfg.data
    if d.source == "synthetic":
        n = {"train": d.n_train, "val": d.n_val, "test": d.n_test}[split]
        if n == 0:
            return []
        return generate_synthetic_dataset(cfg.synth_config(SPLITS[split]), n, prefix=f"synth-{split}")
    return load_image_folder(d.root, d.manifest or "manifest.csv", side=d.side, split=split)


def _estimator(args, cfg):
    est = ProtoBagNetClassifier.load(args.checkpoint)
    est.set_params(deterministic=cfg.deterministic, n_threads=cfg.threads)
    return est


def _mode(cfg):
    return numeric_mode(cfg.deterministic, cfg.threads)


# --- commands -------------------------------------------------------------------


def cmd_generate(args):
    cfg = _config(args)
    if cfg.data.source != "synthetic":
        raise ConfigError("generate needs data.source=synthetic")
    out = _outdir(cfg, args)
    rows = []
    for split in SPLITS:
        samples = load_split(cfg, split)
        if not samples:
            continue
        export_dataset(samples, out / split)
        for line in (out / split / "manifest.csv").read_text().splitlines()[1:]:
            path, label, group, mask = line.split(",")
            rows.append(",".join([f"{split}/{path}", label, group, f"{split}/{mask}" if mask else "", split]))
        (out / split / "manifest.csv").unlink()
    (out / "manifest.csv").write_text("\n".join(["path,label,group,mask,split"] + rows) + "\n")
    _snapshot(cfg, out, "generate")
    print(f"wrote {len(rows)} images to {out}")
    return 0


def cmd_train(args):
    cfg = _config(args)
    out = _outdir(cfg, args)
    ckpt_path = out / "model.ckpt"
    _snapshot(cfg, out, "train")
    if args.resume and ckpt_path.exists():
        est = ProtoBagNetClassifier.load(ckpt_path)
        logger.info("resumed from %s; training skipped", ckpt_path)
    else:
        train, val = load_split(cfg, "train"), load_split(cfg, "val")
        if not train:
            raise DataError("training split is empty")
        X, y = stack(train)
        Xv, yv = stack(val) if val else (None, None)
        est = ProtoBagNetClassifier(**cfg.estimator_params())
        t0 = time.time()
        est.fit(X, y, Xv, yv, [s.sample_id for s in train])
        logger.info("trained in %.1fs", time.time() - t0)
        est.save(ckpt_path)
        write_metrics_csv(est.history_, out / "metrics.csv")
        (out / "push_log.txt").write_text("\n".join(est.push_log_) + "\n")
    test = load_split(cfg, "test")
    if test:
        Xt, yt = stack(test)
        with _mode(cfg):
            metrics = evaluate_classification(est, Xt, yt)
        evalx.write_json(metrics, out / "test_metrics.json")
        print(json.dumps(metrics, sort_keys=True))
    print(f"checkpoint: {ckpt_path}")
    return 0


def cmd_explain(args):
    cfg = _config(args)
    out = _outdir(cfg, args)
    est = _estimator(args, cfg)
    _snapshot(cfg, out, "explain", {"checkpoint": args.checkpoint, "k": args.k, "method": args.method})
    methods = ["rf-box", "percentile-box"] if args.method == "both" else [args.method]
    if args.global_:
        patches = global_explanation(est)
        for p in patches:
            save_png(render_overlay(p.tile), out / f"prototype_{p.prototype:02d}.png")
        evalx.write_json([p.to_dict() for p in patches], out / "prototypes.json")
    if args.image:
        images = [(Path(args.image).stem, load_png(args.image, est.input_shape_[1]))]
    else:
        samples = load_split(cfg, args.split)[: args.n]
        images = [(s.sample_id, s.image) for s in samples]
    with _mode(cfg):
        for sid, image in images:
            for method in methods:
                rep = local_explanation(est, image, k=args.k, sample_id=sid, method=method)
                (out / f"{sid}.{method}.json").write_text(rep.to_json(indent=2, sort_keys=True))
                disease = [p for p in rep.prototypes if p.cls == 1]
                best = max(disease or rep.prototypes, key=lambda p: p.pooled_score)
                sims = est.similarity_maps(image[None])[0, best.prototype].numpy()
                color = (1.0, 1.0, 0.0) if method == "rf-box" else (0.0, 1.0, 0.0)
                boxes = [part.box for part in best.parts]
                save_png(render_overlay(image, sims, boxes, box_color=color), out / f"{sid}.{method}.png")
    print(f"explained {len(images)} image(s) into {out}")
    return 0


def cmd_evaluate(args):
    cfg = _config(args)
    if args.suite not in SUITES:
        raise UsageError(f"unknown suite {args.suite!r}; choose from {', '.join(SUITES)}")
    out = _outdir(cfg, args)
    est = _estimator(args, cfg)
    _snapshot(cfg, out, "evaluate", {"checkpoint": args.checkpoint, "suite": args.suite, "k": args.k})
    samples = load_split(cfg, args.split)
    if not samples:
        raise DataError(f"split {args.split!r} is empty")
    X, y = stack(samples)
    k = args.k
    suites = SUITES[:-1] if args.suite == "all" else (args.suite,)
    summary = {}
    with _mode(cfg):
        if "classification" in suites:
            m = evaluate_classification(est, X, y)
            row = {"model": cfg.preset, "accuracy": m["accuracy"], "auc": m["auc"], "recall": m["recall"], "precision": m["precision"]}
            evalx.write_csv([row], out / "classification.csv")
            summary["classification"] = m
        if "faithfulness" in suites:
            res = evalx.occlusion_faithfulness(est, X, y, k=k, fill=args.fill)
            evalx.write_json(res, out / "faithfulness.json")
            evalx.write_csv(res.table(), out / "faithfulness.csv")
            summary["faithfulness"] = {"auc_original": res.auc_original, "auc_occluded": res.auc_occluded}
        if "localization" in suites:
            masks = [s.lesion_mask for s in samples]
            markers = [s.lesion_markers for s in samples]
            if all(m is None for m in masks):
                raise DataError("localization needs lesion masks or markers")
            res = evalx.localization_precision(est, X, y, masks=masks, markers=markers, k=k, hit=args.hit)
            evalx.write_json(res, out / "localization.json")
            summary["localization"] = res["precision"]
        if "importance" in suites:
            imp = evalx.prototype_importance_all(est, X, y, k=k, fill=args.fill)
            rates = evalx.importance_sign_rates(imp, y)
            evalx.write_json({"sign_rates": rates, "prototypes": imp}, out / "importance.json")
            summary["importance"] = rates
    print(json.dumps(evalx._jsonable(summary), sort_keys=True))
    return 0


# --- entry point ----------------------------------------------------------------


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="experiment YAML file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config path")
    common.add_argument("--output", help="output directory (overrides output_dir)")
    common.add_argument("--threads", type=int, help="torch intra-op threads (non-deterministic mode)")
    det = common.add_mutually_exclusive_group()
    det.add_argument("--deterministic", dest="deterministic", action="store_true", default=None)
    det.add_argument("--no-deterministic", dest="deterministic", action="store_false")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="protobagnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("generate", parents=[common], help="write a synthetic dataset to disk")

    p = sub.add_parser("train", parents=[common], help="train and save a checkpoint")
    p.add_argument("--resume", action="store_true", help="reuse an existing checkpoint in the output directory")

    p = sub.add_parser("explain", parents=[common], help="explanation reports and overlays")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", help="a single PNG to explain (otherwise --split/--n)")
    p.add_argument("--split", default="test", choices=list(SPLITS))
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--k", type=int)
    p.add_argument("--method", default="both", choices=["rf-box", "percentile-box", "both"])
    p.add_argument("--global", dest="global_", action="store_true", help="also export prototype tiles")

    p = sub.add_parser("evaluate", parents=[common], help="metrics suites")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--suite", default="classification")
    p.add_argument("--split", default="test", choices=list(SPLITS))
    p.add_argument("--k", type=int)
    p.add_argument("--fill", type=float, default=0.0, help="occlusion fill in normalised units")
    p.add_argument("--hit", default="marker", choices=["marker", "mask"])
    return parser


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "explain": cmd_explain, "evaluate": cmd_evaluate}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.threads is not None:
        args.set = [*args.set, f"threads={args.threads}"]
    if args.deterministic is not None:
        args.set = [*args.set, f"deterministic={str(args.deterministic).lower()}"]
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, InputError, TrainingError, CheckpointError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
