"""``camloc`` command line: synth, train, cam, propose, eval.

Global options may follow the subcommand. A JSON config file given with
``--config`` supplies defaults for the same option names (dashes become
underscores); flags on the command line win, unknown keys are rejected.

Exit codes: 0 success, 2 usage, 3 input or I/O, 4 internal invariant breach.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import cam, imaging, metrics, nn, pipeline, proposals
from . import net as cn

log = logging.getLogger("camloc")

OUT_DIR_ENV = "CAMLOC_OUT_DIR"
EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_INTERNAL = 0, 2, 3, 4


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=0, help="random seed (default: %(default)s)")
    g.add_argument("--threads", type=_positive, default=1, help="worker threads for per-image stages (default: %(default)s)")
    g.add_argument("--out-dir", default=os.environ.get(OUT_DIR_ENV, "camloc-out"),
                   help=f"output directory; default from ${OUT_DIR_ENV} or %(default)s")
    g.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    g.add_argument("-q", "--quiet", action="store_true", help="errors only")
    g.add_argument("--config", default=None, help="JSON file of option defaults (default: none)")
    return p


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    common = _common()
    parser = argparse.ArgumentParser(prog="camloc", description="Lesion localisation with class activation maps.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="{synth,train,cam,propose,eval}")

    p = sub.add_parser("synth", parents=[common], formatter_class=fmt, help="write a synthetic dataset")
    p.add_argument("--images", type=int, default=200, help="number of images")
    p.add_argument("--size", type=int, default=64, help="image side in pixels")
    p.add_argument("--healthy-fraction", type=float, default=0.5, help="share of lesion-free images")
    p.add_argument("--expert-noise", action="store_true", help="simulate several eroded expert masks")
    p.add_argument("--id-prefix", default="img", help="image id prefix")

    p = sub.add_parser("train", parents=[common], formatter_class=fmt, help="train a network on a manifest")
    p.add_argument("--manifest", required=True, help="dataset manifest.jsonl")
    p.add_argument("--size", type=int, default=64, help="network input side")
    p.add_argument("--spec", default=None, help="network spec text file (default: built-in toy spec)")
    p.add_argument("--resume", default=None, help="model file to continue from")
    p.add_argument("--epochs", type=int, default=10, help="training epochs")
    p.add_argument("--batch-size", type=int, default=32, help="mini-batch size")
    p.add_argument("--lr", type=float, default=0.01, help="base learning rate")
    p.add_argument("--lr-decay", type=float, default=0.01, help="fractional learning rate decay per epoch")
    p.add_argument("--momentum", type=float, default=0.8, help="SGD momentum")
    p.add_argument("--weight-decay", type=float, default=0.0005, help="L2 penalty on weights")
    p.add_argument("--augment", action="store_true", help="random brightness, contrast, rotation and flips")

    p = sub.add_parser("cam", parents=[common], formatter_class=fmt, help="write heatmaps and overlays")
    p.add_argument("--model", required=True, help="model file")
    p.add_argument("--manifest", default=None, help="take images from this manifest")
    p.add_argument("images", nargs="*", help="image files (PNG or PPM)")
    p.add_argument("--class", dest="class_index", type=int, default=cam.RDR, help="class whose map is drawn")
    p.add_argument("--colormap", default="jet", help="matplotlib colormap for overlays")
    p.add_argument("--alpha", type=float, default=0.5, help="overlay opacity")
    p.add_argument("--scores", action="store_true", help="also write scores.csv with class probabilities")

    p = sub.add_parser("propose", parents=[common], formatter_class=fmt, help="turn heatmaps into region proposals")
    p.add_argument("--heatmaps", default=None, help="directory of <id>.cam.bin files")
    p.add_argument("--model", default=None, help="model file (instead of --heatmaps)")
    p.add_argument("--manifest", default=None, help="manifest for --model")
    p.add_argument("images", nargs="*", help="image files for --model")
    p.add_argument("--tau", type=float, default=proposals.DEFAULT_TAU, help="threshold on the normalised map")
    p.add_argument("--min-area", type=int, default=proposals.DEFAULT_MIN_AREA, help="smallest kept region in pixels")
    p.add_argument("--masks", action="store_true", help="also write <id>.proposals.png")

    p = sub.add_parser("eval", parents=[common], formatter_class=fmt, help="score proposals against ground truth")
    p.add_argument("--proposals", required=True, help="proposals.jsonl")
    p.add_argument("--manifest", required=True, help="ground-truth manifest")
    p.add_argument("--scores", required=True, help="CSV of image_id,score (probability of RDR)")
    p.add_argument("--size", type=int, default=64, help="heatmap side the proposals live in")
    p.add_argument("--criterion", choices=("overlap50", "onepixel", "both"), default="both",
                   help="image-level criterion for the table 2 columns")
    p.add_argument("--operating-threshold", type=float, default=0.5, help="classifier score splitting RDR from NRDR")
    p.add_argument("--score-threshold", type=float, default=0.0, help="proposal score for the lesion-level operating point")
    return parser


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def _apply_config(parser: argparse.ArgumentParser, argv: Sequence[str]) -> None:
    """Load ``--config`` into the chosen subparser's defaults."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config or known.command is None:
        return
    try:
        sub = _subparser(parser, known.command)
    except KeyError:
        return
    try:
        cfg = json.loads(Path(known.config).read_text(encoding="utf-8"))
    except OSError as exc:
        raise InputError(f"cannot read config {known.config}: {exc}") from None
    except ValueError as exc:
        raise UsageError(f"config {known.config} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise UsageError(f"config {known.config} must hold a JSON object")
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    unknown = sorted(set(cfg) - set(actions))
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    values = {}
    for key, value in cfg.items():
        action = actions[key]
        if action.type is not None and value is not None and not isinstance(value, list):
            try:
                value = action.type(str(value))
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"config key {key}: {exc}") from None
        if action.choices is not None and value not in action.choices:
            raise UsageError(f"config key {key}: {value!r} not in {sorted(action.choices)}")
        values[key] = value
    sub.set_defaults(**values)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _out_dir(args, usage_on_failure: bool = False) -> Path:
    out = Path(args.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".camloc-write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        err = UsageError if usage_on_failure else InputError
        raise err(f"output directory {out} is not writable: {exc}") from None
    return out


def _load_model(path) -> cn.Network:
    try:
        return cn.load(path)
    except FileNotFoundError:
        raise InputError(f"model file not found: {path}") from None
    except (OSError, cn.ModelFormatError, cn.SpecError) as exc:
        raise InputError(f"cannot load model {path}: {exc}") from None


def _read_manifest(path) -> List[dict]:
    try:
        return imaging.read_manifest(path)
    except OSError as exc:
        raise InputError(f"cannot read manifest {path}: {exc}") from None
    except ValueError as exc:
        raise InputError(str(exc)) from None


def _image_sources(args) -> List[tuple]:
    """``(id, path)`` pairs from ``--manifest`` and positional images."""
    items = []
    if getattr(args, "manifest", None):
        items += [(e["id"], e["image"]) for e in _read_manifest(args.manifest)]
    items += [(Path(p).stem, Path(p)) for p in args.images]
    seen = set()
    for ident, _ in items:
        if ident in seen:
            raise InputError(f"duplicate image id {ident}")
        seen.add(ident)
    return items


def _preprocess(path, ident, size) -> imaging.PreprocessedImage:
    try:
        raw = imaging.read_image(path, ident)
    except OSError as exc:
        raise InputError(f"cannot read image {path}: {exc}") from None
    if raw.channels == 3 and size[2] == 1:
        raw = imaging.RawImage(np.floor(raw.data.mean(axis=2, keepdims=True) + 0.5).astype(np.uint8), ident)
    if raw.channels != size[2]:
        raise InputError(f"image {path} has {raw.channels} channels, model expects {size[2]}")
    try:
        return imaging.preprocess(raw, size[0])
    except imaging.DegenerateImageError as exc:
        raise InputError(str(exc)) from None


def _map(args, fn, items):
    if args.threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    if args.images < 1:
        raise UsageError("--images must be >= 1")
    if not 0.0 <= args.healthy_fraction <= 1.0:
        raise UsageError("--healthy-fraction must lie in [0, 1]")
    try:
        cfg = imaging.SynthConfig(n_images=args.images, size=args.size, healthy_fraction=args.healthy_fraction,
                                  expert_noise=args.expert_noise, id_prefix=args.id_prefix)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = _out_dir(args, usage_on_failure=True)
    ds = imaging.generate_synthetic(cfg, args.seed)
    manifest = imaging.write_dataset(ds, out)
    log.info("wrote %d images to %s", len(ds), manifest)
    return EXIT_OK


def cmd_train(args) -> int:
    if args.epochs < 1:
        raise UsageError("--epochs must be >= 1")
    if args.batch_size < 2:
        raise UsageError("--batch-size must be >= 2")
    try:
        opt = nn.OptimizerState(momentum=args.momentum, weight_decay=args.weight_decay, base_lr=args.lr,
                                decay_per_epoch=args.lr_decay)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    entries = _read_manifest(args.manifest)
    if not entries:
        raise InputError(f"manifest {args.manifest} has no entries")
    out = _out_dir(args)

    if args.resume:
        net = _load_model(args.resume)
    else:
        if args.spec:
            try:
                spec = cn.NetworkSpec.from_text(Path(args.spec).read_text(encoding="utf-8"))
            except OSError as exc:
                raise InputError(f"cannot read spec {args.spec}: {exc}") from None
            except cn.SpecError as exc:
                raise UsageError(f"bad network spec: {exc}") from None
        else:
            channels = imaging.read_image(entries[0]["image"]).channels
            spec = cn.toy_spec(args.size, channels)
        net = cn.build(spec, seed=args.seed)
    x = np.stack([_preprocess(e["image"], e["id"], net.spec.input_size).tensor for e in entries])
    y = np.array([e["label"] for e in entries])
    cfg = cn.TrainConfig(epochs=args.epochs, batch_size=args.batch_size, optimizer=opt, seed=args.seed,
                         augment=args.augment)
    net, history = cn.train(net, (x, y), cfg)
    cn.save(net, out / "model.bin")
    _write_csv(out / "train_log.csv", ["epoch", "lr", "loss", "accuracy"],
               [(h.epoch, repr(h.lr), repr(h.loss), repr(h.accuracy)) for h in history])
    log.info("model written to %s", out / "model.bin")
    return EXIT_OK


def cmd_cam(args) -> int:
    net = _load_model(args.model)
    if not 0 <= args.class_index < net.spec.num_classes:
        raise UsageError(f"--class must lie in [0, {net.spec.num_classes}), got {args.class_index}")
    sources = _image_sources(args)
    out = _out_dir(args)

    def one(src):
        ident, path = src
        pre = _preprocess(path, ident, net.spec.input_size)
        prob, heat, _ = pipeline.localize(net, pre.tensor, class_index=args.class_index)
        cam.write_heatmap_bin(out / f"{ident}.cam.bin", heat)
        cam.write_heatmap_png(out / f"{ident}.cam.png", heat)
        cam.write_overlay_png(out / f"{ident}.overlay.png", pre.tensor, heat, args.colormap, args.alpha)
        return ident, prob

    scores = _map(args, one, sources)
    if args.scores:
        _write_csv(out / "scores.csv", ["image_id", "score"], [(i, repr(p)) for i, p in scores])
    log.info("wrote maps for %d images", len(scores))
    return EXIT_OK


def cmd_propose(args) -> int:
    if not 0.0 <= args.tau <= 1.0:
        raise UsageError(f"--tau must lie in [0, 1], got {args.tau}")
    if args.min_area < 1:
        raise UsageError("--min-area must be >= 1")
    if (args.heatmaps is None) == (args.model is None):
        raise UsageError("give exactly one of --heatmaps or --model")
    out = _out_dir(args)

    if args.heatmaps is not None:
        folder = Path(args.heatmaps)
        if not folder.is_dir():
            raise InputError(f"heatmap directory not found: {folder}")
        files = sorted(folder.glob("*.cam.bin"))

        def one(path):
            try:
                heat = cam.read_heatmap_bin(path)
            except (OSError, ValueError) as exc:
                raise InputError(str(exc)) from None
            ident = path.name[: -len(".cam.bin")]
            return ident, heat.values.shape, proposals.propose(heat.values, args.tau, args.min_area)

        found = _map(args, one, files)
    else:
        net = _load_model(args.model)
        sources = _image_sources(args)

        def one(src):
            ident, path = src
            pre = _preprocess(path, ident, net.spec.input_size)
            _, heat, props = pipeline.localize(net, pre.tensor, args.tau, args.min_area)
            return ident, heat.values.shape, props

        found = _map(args, one, sources)

    records = [(ident, k, p) for ident, _, props in found for k, p in enumerate(props)]
    # global order: score descending, then image order, then per-image order
    records.sort(key=lambda r: -r[2].score)
    proposals.write_jsonl(out / "proposals.jsonl", (proposals.proposal_record(i, p) for i, _, p in records))
    if args.masks:
        for ident, shape, props in found:
            imaging.write_png(out / f"{ident}.proposals.png", proposals.proposals_mask(props, shape))
    log.info("%d proposals from %d maps", len(records), len(found))
    return EXIT_OK


def _read_scores(path) -> Dict[str, float]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        return {r["image_id"]: float(r["score"]) for r in rows}
    except OSError as exc:
        raise InputError(f"cannot read scores {path}: {exc}") from None
    except (KeyError, ValueError, TypeError) as exc:
        raise InputError(f"bad scores file {path}: {exc}") from None


def _read_proposals(path, size) -> Dict[str, list]:
    try:
        recs = proposals.read_jsonl(path)
    except OSError as exc:
        raise InputError(f"cannot read proposals {path}: {exc}") from None
    except ValueError as exc:
        raise InputError(f"bad proposals file {path}: {exc}") from None
    by_id: Dict[str, list] = {}
    for rec in recs:
        try:
            px = proposals.decode_rle(rec["rle"])
            prop = proposals.RegionProposal(px, float(rec["score"]))
            ident = str(rec["image_id"])
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"bad proposal record in {path}: {exc}") from None
        if len(px) and (px.min() < 0 or px.max() >= size):
            raise InputError(f"proposal for {ident} leaves the {size}x{size} frame; check --size")
        by_id.setdefault(ident, []).append(prop)
    return by_id


def cmd_eval(args) -> int:
    if not 0.0 <= args.operating_threshold <= 1.0:
        raise UsageError("--operating-threshold must lie in [0, 1]")
    entries = _read_manifest(args.manifest)
    props = _read_proposals(args.proposals, args.size)
    scores = _read_scores(args.scores)
    ids = [e["id"] for e in entries]
    known = set(ids)
    orphans = sorted((set(props) | set(scores)) - known)
    missing = sorted(known - set(scores))
    if orphans or missing:
        parts = []
        if orphans:
            parts.append("ids not in manifest: " + ", ".join(orphans))
        if missing:
            parts.append("manifest ids without a score: " + ", ".join(missing))
        raise InputError("; ".join(parts))
    out = _out_dir(args)

    def one(entry):
        try:
            _, regions = imaging.load_item(entry, args.size)
        except OSError as exc:
            raise InputError(f"cannot read {entry['id']}: {exc}") from None
        return metrics.ImageResult(entry["id"], entry["label"], scores[entry["id"]], props.get(entry["id"], []), regions)

    results = _map(args, one, entries)
    rep = metrics.report(results, args.operating_threshold, args.score_threshold)
    criteria = metrics.CRITERIA if args.criterion == "both" else (args.criterion,)
    metrics.write_report(rep, out, criteria)
    labels = [r.label for r in results]
    if 0 < sum(labels) < len(labels):
        metrics.write_roc_csv(out / "roc.csv", [r.score for r in results], labels)
    else:
        log.warning("only one class present; roc.csv not written")
    log.info("report written to %s", out / "report.json")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "cam": cmd_cam, "propose": cmd_propose, "eval": cmd_eval}


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"camloc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InputError as exc:
        print(f"camloc: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except SystemExit as exc:  # argparse usage errors and --help
        return int(exc.code or 0)

    level = logging.ERROR if args.quiet else (logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"camloc {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InputError as exc:
        print(f"camloc {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # anything else is a bug or a broken invariant
        log.debug("internal error", exc_info=True)
        print(f"camloc {args.command}: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
