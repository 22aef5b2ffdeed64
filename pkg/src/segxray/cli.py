"""``segxray`` command line: train, dissect, gradcam, featviz, uncertainty, pipeline.

Every command writes its artifacts under ``--out`` and finishes by writing
``manifest.json`` with a SHA-256 for each file. Failures print a single
``error: <category>: <message>`` line and exit non-zero.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import checkpoint as ckpt_io
from .checkpoint import CheckpointError, CheckpointVersionError
from .dissection import (CONCEPTS, DEFAULT_DETECTOR_IOU, TOP_FRACTION, assign_detectors,
                         layer_activations, postprocess, threshold_maps)
from .featviz import NonFiniteObjectiveError, RegConfig, activation_maximize
from .gradcam import attention_curve, first_reaching, layerwise_attention
from .imaging import export_png, heat_overlay, mask_overlay
from .reporting import SpecError, load_data, load_image, read_config, resolve_workers, write_manifest
from .uncertainty import associate, posterior_stats, render_uncertainty, sample_posterior
from .zoo import FAMILIES, ArchSpec, TrainConfig, TrainingDivergedError, build_model, evaluate, train

log = logging.getLogger("segxray")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_BAD_FLAG = 2
EXIT_MISSING_FILE = 3
EXIT_VERSION = 4
EXIT_BAD_INPUT = 5
EXIT_DIVERGED = 6

STAGES = ("train", "dissect", "gradcam", "featviz", "uncertainty")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: bad-flag: {message}", file=sys.stderr)
        raise SystemExit(EXIT_BAD_FLAG)


def _fixed_range(text):
    lo, hi = (float(v) for v in text.split(","))
    return lo, hi


def _csv(text):
    return [t for t in (s.strip() for s in text.split(",")) if t]


def _channel(text):
    return int(text) if text.lstrip("-").isdigit() else text.lower()


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="output directory")
    common.add_argument("--config", help="flat key = value file; CLI flags take precedence")
    common.add_argument("--workers", type=int, help="threads for parallel stages (env SEGXRAY_WORKERS wins)")
    common.add_argument("--log-level", default="WARNING")

    p = _Parser(prog="segxray", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"segxray {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", parents=[common], help="train a segmentation model")
    _train_flags(t)
    t.add_argument("--data", default="seed=0,count=200")
    t.add_argument("--val", default="seed=2000,count=24", help="validation spec or 'none'")
    t.add_argument("--test", default="none", help="held-out spec for metrics.json or 'none'")

    d = sub.add_parser("dissect", parents=[common], help="rank filters by concept IoU")
    d.add_argument("--ckpt")
    d.add_argument("--data", default="seed=1000,count=48")
    _dissect_flags(d)

    g = sub.add_parser("gradcam", parents=[common], help="layer-wise Grad-CAM for one image")
    g.add_argument("--ckpt")
    g.add_argument("--image", default="seed=1000,index=1")
    g.add_argument("--data", help="optional dataset spec for the mean attention-IoU curve")
    g.add_argument("--channel", type=_channel, default="wt")
    g.add_argument("--pre-softmax", action="store_true")

    f = sub.add_parser("featviz", parents=[common], help="regularized activation maximization")
    f.add_argument("--ckpt")
    f.add_argument("--layer")
    f.add_argument("--filter", type=int, default=0)
    f.add_argument("--template", default="seed=0,index=0", help="image spec for the style template")
    f.add_argument("--data", help="dataset spec for the activation baseline")
    _featviz_flags(f)

    u = sub.add_parser("uncertainty", parents=[common], help="test-time dropout uncertainty")
    u.add_argument("--ckpt")
    u.add_argument("--image", help="single image spec")
    u.add_argument("--data", help="dataset spec (overrides --image)")
    _ttd_flags(u)

    pl = sub.add_parser("pipeline", parents=[common], help="train and run every analysis")
    _train_flags(pl)
    _dissect_flags(pl)
    _featviz_flags(pl, prefix="featviz-")
    _ttd_flags(pl)
    pl.add_argument("--train-count", type=int, default=200)
    pl.add_argument("--val-count", type=int, default=24)
    pl.add_argument("--test-count", type=int, default=48)
    pl.add_argument("--stages", type=_csv, default=list(STAGES))
    return p


def _train_flags(p):
    p.add_argument("--arch", choices=FAMILIES, default="skip")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--init-seed", type=int, help="defaults to --seed")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=0.002)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--clip-norm", type=float, default=5.0)
    p.add_argument("--dropout", type=float, default=0.0, help="training-time dropout rate")


def _dissect_flags(p):
    p.add_argument("--layers", type=_csv, help="comma-separated layer names (default: all)")
    p.add_argument("--detector-iou", type=float, default=DEFAULT_DETECTOR_IOU)
    p.add_argument("--top-fraction", type=float, default=TOP_FRACTION)
    p.add_argument("--overlays", type=int, default=8, help="overlay PNGs for the top-ranked filters")


def _featviz_flags(p, prefix=""):
    r = RegConfig()
    p.add_argument(f"--{prefix}steps", type=int, default=r.steps)
    p.add_argument(f"--{prefix}step-size", type=float, default=r.step_size)
    p.add_argument(f"--{prefix}tv", type=float, default=r.tv_weight)
    p.add_argument(f"--{prefix}style", type=float, default=r.gamma_style)
    p.add_argument(f"--{prefix}l2", type=float, default=r.lambda_l2)
    p.add_argument(f"--{prefix}sigma", type=float)
    p.add_argument(f"--{prefix}max-shift", type=int, default=r.jitter_max_shift)
    p.add_argument(f"--{prefix}max-rot", type=float, default=r.jitter_max_rot)
    if not prefix:
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--fixed-range", type=_fixed_range, help="LO,HI instead of per-image normalization")


def _ttd_flags(p):
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--rate", type=float, default=0.2)
    if not any(a.dest == "seed" for a in p._actions):
        p.add_argument("--seed", type=int, default=0)
    p.add_argument("--panels", type=int, default=4, help="three-panel PNGs to write in dataset mode")


# ---------------------------------------------------------------------------
# parsing with config-file defaults


def _subparser(parser, name):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def _coerce(action, value: str):
    if isinstance(action, argparse._StoreTrueAction):
        return value.lower() in ("1", "true", "yes", "on")
    v = action.type(value) if action.type else value
    if action.choices is not None and v not in action.choices:
        raise UsageError(f"config value {value!r} for {action.dest} not in {list(action.choices)}")
    return v


def parse_args(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sub = _subparser(parser, args.command)
        actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
        defaults = {}
        for key, value in read_config(args.config).items():
            if key not in actions:
                raise UsageError(f"unknown config key {key!r} for {args.command}")
            try:
                defaults[key] = _coerce(actions[key], value)
            except (TypeError, ValueError) as exc:
                raise UsageError(f"config key {key!r}: {exc}") from None
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    if not args.out:
        raise UsageError("--out is required")
    return args


def _need(args, *names):
    for n in names:
        if getattr(args, n, None) in (None, ""):
            raise UsageError(f"--{n.replace('_', '-')} is required for {args.command}")


# ---------------------------------------------------------------------------
# stages


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _finite(obj):
    """JSON-safe copy: non-finite floats become the strings "inf", "-inf", "nan"."""
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _json(path: Path, obj):
    _write(path, json.dumps(_finite(obj), indent=1, sort_keys=True, allow_nan=False) + "\n")


def _spec_or_none(spec):
    return None if spec is None or spec.lower() == "none" else spec


def run_train(args, out: Path, data, val=None, test=None) -> dict:
    init_seed = args.seed if args.init_seed is None else args.init_seed
    arch = ArchSpec(args.arch, dropout_rate=args.dropout).validate()
    net = build_model(arch, init_seed)
    cfg = TrainConfig(lr=args.lr, epochs=args.epochs, batch=args.batch, momentum=args.momentum,
                      seed=args.seed, patience=args.patience, clip_norm=args.clip_norm,
                      optimizer=args.optimizer)
    res = train(net, data.images, data.targets, cfg,
                None if val is None else val.images, None if val is None else val.targets)
    rows = ["epoch\tloss\tval_wt_dice"]
    for i, loss in enumerate(res.loss_curve):
        v = res.val_dice[i] if i < len(res.val_dice) else float("nan")
        rows.append(f"{i + 1}\t{loss:.6f}\t{v:.6f}")
    _write(out / "history.tsv", "\n".join(rows) + "\n")
    meta = {"train_data": data.source, "val_data": None if val is None else val.source,
            "init_seed": init_seed, "config": {k: v for k, v in cfg.__dict__.items()},
            "epochs_run": len(res.loss_curve), "best_epoch": res.best_epoch + 1,
            "stopped_early": res.stopped_early}
    digest = ckpt_io.save(ckpt_io.Checkpoint.from_network(net, meta), out / "model.segx")
    metrics = {"epochs_run": len(res.loss_curve), "best_epoch": res.best_epoch + 1,
               "final_loss": res.loss_curve[-1]}
    if res.val_dice:
        metrics["best_val_wt_dice"] = max(res.val_dice)
    if test is not None:
        m = evaluate(net, test.images, test.targets)
        metrics.update(test_dice_wt=m.dice_wt, test_dice_tc=m.dice_tc, test_dice_et=m.dice_et)
    _json(out / "metrics.json", metrics)
    return {"checkpoint": str(out / "model.segx"), "checkpoint_hash": digest, "metrics": metrics,
            "seeds": {"init": init_seed, "train": args.seed}}


def _network(path):
    return ckpt_io.as_network(ckpt_io.load(path))


def _safe(name: str) -> str:
    return name.replace("/", "_")


def run_dissect(args, out: Path, net, data, workers) -> dict:
    brain = data.masks["brain"]
    concepts = {c: data.masks[c] for c in CONCEPTS if c in data.masks}
    report = assign_detectors(net, data.images, concepts, brain, args.layers,
                              args.detector_iou, args.top_fraction, workers=workers)
    _write(out / "detectors.tsv", report.to_tsv())
    _write(out / "detectors.json", report.to_json() + "\n")
    top = report.entries[:max(0, args.overlays)]
    acts = layer_activations(net, data.images, sorted({e.layer for e in top})) if top else {}
    for rank, e in enumerate(top):
        gt = concepts[e.concept]
        i = int(np.argmax(gt.reshape(len(gt), -1).sum(1)))
        raw = threshold_maps(acts[e.layer][i, e.filter], e.threshold, data.images.shape[2:])
        mask = postprocess(raw, brain[i])
        export_png(mask_overlay(data.images[i, 0], mask), "gray",
                   out / "overlays" / f"{rank:02d}_{_safe(e.layer)}_f{e.filter}_{e.concept}.png")
    best_wt = report.best_for("wt")
    summary = {"n_filters": len(report.entries), "n_detectors": len(report.detectors()),
               "detectors_by_concept": {c: len(report.detectors(c)) for c in CONCEPTS},
               "best_wt": None if best_wt is None else
               {"layer": best_wt.layer, "filter": best_wt.filter, "iou": best_wt.iou_by_concept["wt"]}}
    _json(out / "summary.json", summary)
    return {"report": report, "summary": summary}


def run_gradcam(args, out: Path, net, image, gt, data=None) -> dict:
    channel = getattr(args, "channel", "wt")
    pre = getattr(args, "pre_softmax", False)
    maps, ious = layerwise_attention(net, image, channel, gt, pre)
    n = len(maps)
    rows = ["index\tlayer\trelative_depth\tattention_iou"]
    for i, m in enumerate(maps):
        export_png(heat_overlay(image[0], m.upsampled), "jet", out / "heatmaps" / f"{i:02d}_{_safe(m.layer)}.png")
        v = "nan" if ious is None else f"{ious[i]:.6f}"
        rows.append(f"{i}\t{m.layer}\t{(i + 1) / n:.6f}\t{v}")
    _write(out / "attention.tsv", "\n".join(rows) + "\n")
    summary = {"channel": channel, "pre_softmax": pre, "layers": [m.layer for m in maps]}
    if data is not None:
        if isinstance(channel, str):
            gts = data.masks[channel]
        else:
            gts = data.targets == channel
        curve = attention_curve(net, data.images, gts, channel, pre)
        rows = ["index\tlayer\trelative_depth\tmean_attention_iou"]
        rows += [f"{i}\t{name}\t{(i + 1) / n:.6f}\t{v:.6f}" for i, (name, v) in enumerate(zip(net.layer_names, curve))]
        _write(out / "attention_curve.tsv", "\n".join(rows) + "\n")
        summary.update(curve=[float(v) for v in curve], first_reaching_0_3=first_reaching(curve, 0.3),
                       max_iou=float(curve.max()))
    _json(out / "summary.json", summary)
    return summary


def _reg(args, prefix=""):
    g = lambda n: getattr(args, prefix + n)  # noqa: E731
    return RegConfig(lambda_l2=g("l2"), tv_weight=g("tv"), gamma_style=g("style"), sigma=g("sigma"),
                     jitter_max_shift=g("max_shift"), jitter_max_rot=g("max_rot"), steps=g("steps"),
                     step_size=g("step_size")).validate()


def run_featviz(out: Path, net, layer, filt, reg, template, template_id, seed, baseline_images=None,
                fixed_range=None) -> dict:
    pre = activation_maximize(net, layer, filt, reg, template, seed, template_id)
    for c in range(pre.x_star.shape[0]):
        export_png(pre.x_star[c], "gray", out / f"channel_{c}.png", fixed_range)
    _write(out / "trace.csv", pre.trace_csv())
    summary = {"layer": layer, "filter": filt, "template": template_id, "best_step": pre.best_step,
               "final_activation": pre.final_activation, "steps": reg.steps}
    if baseline_images is not None:
        acts = layer_activations(net, baseline_images, [layer])[layer][:, filt]
        base = float(acts.astype(np.float64).mean())
        summary.update(dataset_mean_activation=base,
                       activation_ratio=pre.final_activation / base if base > 0 else float("inf"))
    _json(out / "summary.json", summary)
    return summary


def run_uncertainty(args, out: Path, net, images, targets, workers, n_panels) -> dict:
    def job(i):
        return posterior_stats(sample_posterior(net, images[i], args.samples, args.rate, args.seed + i))

    idx = range(len(images))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            stats = list(pool.map(job, idx))
    else:
        stats = [job(i) for i in idx]
    summary = {"samples": args.samples, "rate": args.rate, "seed": args.seed, "n_images": len(images)}
    for i in range(min(n_panels, len(images))):
        gt = targets[i] if targets is not None else stats[i].prediction
        export_png(render_uncertainty(stats[i], images[i], gt), "gray", out / "panels" / f"image_{i:03d}.png")
    if targets is not None:
        assoc = associate(stats, targets)
        _write(out / "association.tsv", assoc.to_tsv())
        summary.update(median_ratio=assoc.median_ratio(), n_with_errors=len(assoc.ratio),
                       skipped=assoc.skipped)
    _json(out / "summary.json", summary)
    return summary


# ---------------------------------------------------------------------------
# commands


def cmd_train(args, out, workers):
    data = load_data(args.data)
    val = _spec_or_none(args.val)
    test = _spec_or_none(args.test)
    info = run_train(args, out, data, None if val is None else load_data(val),
                     None if test is None else load_data(test))
    return info["checkpoint_hash"], info["seeds"]


def cmd_dissect(args, out, workers):
    _need(args, "ckpt")
    net = _network(args.ckpt)
    run_dissect(args, out, net, load_data(args.data), workers)
    return ckpt_io.sha256_of(args.ckpt), {}


def cmd_gradcam(args, out, workers):
    _need(args, "ckpt")
    net = _network(args.ckpt)
    image, target, masks = load_image(args.image)
    gt = None
    if target is not None:
        gt = masks[args.channel] if isinstance(args.channel, str) else target == args.channel
    data = load_data(args.data) if args.data else None
    run_gradcam(args, out, net, image, gt, data)
    return ckpt_io.sha256_of(args.ckpt), {}


def cmd_featviz(args, out, workers):
    _need(args, "ckpt", "layer")
    net = _network(args.ckpt)
    template, _, _ = load_image(args.template)
    base = load_data(args.data).images if args.data else None
    run_featviz(out, net, args.layer, args.filter, _reg(args), template, args.template, args.seed,
                base, args.fixed_range)
    return ckpt_io.sha256_of(args.ckpt), {"featviz": args.seed}


def cmd_uncertainty(args, out, workers):
    _need(args, "ckpt")
    net = _network(args.ckpt)
    if args.data:
        data = load_data(args.data)
        images, targets = data.images, data.targets
    else:
        _need(args, "image")
        image, target, _ = load_image(args.image)
        images = image[None]
        targets = None if target is None else target[None]
    run_uncertainty(args, out, net, images, targets, workers, args.panels)
    return ckpt_io.sha256_of(args.ckpt), {"ttd": args.seed}


def cmd_pipeline(args, out, workers):
    unknown = set(args.stages) - set(STAGES)
    if unknown:
        raise UsageError(f"unknown stages: {', '.join(sorted(unknown))}")
    if "train" not in args.stages:
        raise UsageError("pipeline needs the train stage")
    s = args.seed
    train_data = load_data(f"seed={s},count={args.train_count}")
    val = load_data(f"seed={s + 2000},count={args.val_count}") if args.val_count else None
    test = load_data(f"seed={s + 1000},count={args.test_count}")
    info = run_train(args, out / "train", train_data, val, test)
    net = _network(info["checkpoint"])
    summary = {"arch": args.arch, "seed": s, "train": info["metrics"]}
    best = None
    if "dissect" in args.stages:
        d = run_dissect(args, out / "dissect", net, test, workers)
        summary["dissect"] = d["summary"]
        best = d["report"].best_for("wt")
    if "gradcam" in args.stages:
        i = int(np.argmax(test.masks["wt"].reshape(len(test), -1).sum(1)))
        g = argparse.Namespace(channel="wt", pre_softmax=False)
        summary["gradcam"] = run_gradcam(g, out / "gradcam", net, test.images[i], test.masks["wt"][i], test)
        summary["gradcam"]["image_index"] = i
    if "featviz" in args.stages:
        layer, filt = (best.layer, best.filter) if best is not None else (net.layer_names[-1], 0)
        tid = int(np.random.default_rng(s).integers(len(train_data)))
        summary["featviz"] = run_featviz(out / "featviz", net, layer, filt, _reg(args, "featviz_"),
                                         train_data.images[tid], f"train[{tid}]", s, test.images)
    if "uncertainty" in args.stages:
        summary["uncertainty"] = run_uncertainty(args, out / "uncertainty", net, test.images,
                                                 test.targets, workers, args.panels)
    _json(out / "summary.json", summary)
    seeds = {"train_data": s, "val_data": s + 2000, "test_data": s + 1000, **info["seeds"]}
    return info["checkpoint_hash"], seeds


COMMANDS = {"train": cmd_train, "dissect": cmd_dissect, "gradcam": cmd_gradcam,
            "featviz": cmd_featviz, "uncertainty": cmd_uncertainty, "pipeline": cmd_pipeline}


def _fail(category, message, code):
    print(f"error: {category}: {message}".replace("\n", " "), file=sys.stderr)
    return code


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
        logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                            format="%(levelname)s %(name)s: %(message)s")
        workers = resolve_workers(args.workers)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        start = time.perf_counter()
        digest, seeds = COMMANDS[args.command](args, out, workers)
        flags = {k: v for k, v in vars(args).items() if k not in ("out", "workers", "log_level")}
        write_manifest(out, args.command, flags, seeds, digest, __version__, time.perf_counter() - start)
        return EXIT_OK
    except (UsageError, SpecError) as exc:
        return _fail("bad-flag", exc, EXIT_BAD_FLAG)
    except FileNotFoundError as exc:
        return _fail("missing-file", exc, EXIT_MISSING_FILE)
    except CheckpointVersionError as exc:
        return _fail("checkpoint-version-mismatch", exc, EXIT_VERSION)
    except (CheckpointError, KeyError, IndexError, ValueError) as exc:
        return _fail("bad-input", exc, EXIT_BAD_INPUT)
    except (TrainingDivergedError, NonFiniteObjectiveError) as exc:
        return _fail("diverged", exc, EXIT_DIVERGED)


if __name__ == "__main__":
    sys.exit(main())
