"""Command-line entry point: ``vcas <subcommand> ...``.

Exit status is 0 on success, 1 when evaluation ran but something failed
(a frame, a training run), and 2 for usage errors such as unknown flags or a
missing or invalid manifest.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import cv2
import numpy as np

from . import egoflow, openset, prototypes
from .harness import evaluate as ev
from .harness.manifest import ManifestError, load_manifest
from .harness.stats import compute_stats
from .harness.synth import SceneSpec, gaussian_toy, known_only, synth_dataset
from .labels import read_label_png
from .metrics import compute_ca_iou

log = logging.getLogger("vcas")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _manifest(path):
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"manifest {str(p)!r} not found")
    try:
        return load_manifest(p)
    except (ManifestError, OSError) as e:
        raise UsageError(f"invalid manifest {str(p)!r}: {e}") from e


def _write(path: Optional[str], text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
        return
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text)


def _evaluate(track: str):
    def run(args) -> int:
        m = _manifest(args.manifest)
        opts = ev.EvalOptions(
            efs=getattr(args, "efs", False),
            invert_pose=getattr(args, "invert_pose", False),
            motion_threshold=getattr(args, "motion_threshold", 1.0),
            split=args.split,
            checkpoint=getattr(args, "checkpoint", None),
        )
        try:
            report = ev.evaluate_dataset(m, track, opts, workers=args.workers)
        except ValueError as e:
            raise UsageError(str(e)) from e
        stem = Path(args.manifest).with_suffix("")
        out_csv = args.out_csv or f"{stem}_{track}.csv"
        out_json = args.out_json or f"{stem}_{track}.json"
        _write(out_csv, ev.report_to_csv(report))
        _write(out_json, ev.report_to_json(report))
        for r in report["frames"]:
            if r["status"] != "ok":
                log.error("frame %s: %s", r["id"], r["error"])
        print(f"wrote {out_csv} and {out_json} ({report['frames_total']} frames, "
              f"{report['frames_failed']} failed)", file=sys.stderr)
        return EXIT_FAIL if report["frames_failed"] else EXIT_OK
    return run


def cmd_suppress_flow(args) -> int:
    m = _manifest(args.manifest)
    results = ev.suppress_dataset(m, args.out, args.invert_pose)
    bad = [(fid, err) for fid, err in results if err]
    for fid, err in bad:
        log.error("frame %s: %s", fid, err)
    print(f"wrote {len(results) - len(bad)} suppressed flow maps to {args.out}")
    return EXIT_FAIL if bad else EXIT_OK


def cmd_colorize_flow(args) -> int:
    flow = egoflow.read_flow(args.flow)
    max_norm = "auto" if args.max_norm is None else args.max_norm
    rgb = egoflow.flow_to_color(flow, max_norm)
    if not cv2.imwrite(str(args.out), cv2.cvtColor(rgb, cv2.COLOR_RGB2BGR)):
        raise UsageError(f"could not write {args.out}")
    return EXIT_OK


def cmd_prototypes(args) -> int:
    m = _manifest(args.manifest)
    batch = []
    for f in m.select(args.split).frames:
        if "features" not in f.paths or "class_mask" not in f.paths:
            raise UsageError(f"frame {f.id!r} needs 'features' and 'class_mask' entries")
        fm = prototypes.FeatureMap(prototypes.read_tensor(f.path("features")))
        mask = prototypes.ClassMask(read_label_png(f.path("class_mask"), False).ids.astype(int))
        batch.append((fm, mask))
    ps = prototypes.pool_all(batch, ignore=args.ignore, l2_normalize=args.l2_normalize)
    names = {c.id: c.name for c in m.categories.entries} | m.class_names
    _write(args.out, prototypes.prototypes_to_json(ps, names) + "\n")
    return EXIT_OK


def cmd_dendrogram(args) -> int:
    ps, names = prototypes.prototypes_from_json(Path(args.prototypes).read_text())
    if len(ps) < 2:
        raise UsageError("a dendrogram needs at least two prototypes")
    dg = prototypes.cluster_prototypes(ps, names, args.linkage)
    _write(args.out, prototypes.serialize_dendrogram(dg) + "\n")
    return EXIT_OK


def _training_data(cfg: dict, base: Path, seed: int):
    """Returns (train batches, num classes, evaluation batch or None)."""
    data = cfg.pop("data", "toy")
    n = int(cfg.pop("toy_points", 2000))
    if data == "toy":
        full = gaussian_toy(n, seed)
        return [known_only(full, 3)], 3, gaussian_toy(n, seed + 1)
    m = _manifest(base / data)
    if m.openset is None:
        raise UsageError("training from a manifest needs an openset section")
    known = m.openset.known
    batches = []
    for f in m.select("train").frames:
        emb = prototypes.read_tensor(f.path("embeddings"))
        sem = read_label_png(f.path("semantic_gt"), False).ids.astype(int)
        y = np.full(sem.shape, openset.IGNORE)
        for i, c in enumerate(known):
            y[sem == c] = i
        batches.append(openset.EmbeddingMap(emb, y))
    if not batches:
        raise UsageError("manifest has no train frames")
    return batches, len(known), None


def cmd_train_openset(args) -> int:
    cfg_path = Path(args.config)
    if not cfg_path.is_file():
        raise UsageError(f"config {str(cfg_path)!r} not found")
    raw = json.loads(cfg_path.read_text())
    if args.seed is not None:
        raw["seed"] = args.seed
    seed = int(raw.get("seed", 0))
    batches, k, held_out = _training_data(raw, cfg_path.parent, seed)
    try:
        config = openset.TrainConfig.from_dict(raw)
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad config: {e}") from e
    out = Path(args.out or cfg_path.with_suffix(""))
    out.mkdir(parents=True, exist_ok=True)
    try:
        res = openset.train(batches, config, num_classes=k)
    except openset.TrainingDiverged as e:
        log.error("%s", e)
        return EXIT_FAIL
    with open(out / "losses.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "lr", "l_seg", "l_cl", "lambda", "total"])
        for i, (loss, lr) in enumerate(zip(res.losses, res.lrs)):
            w.writerow([i, repr(lr), repr(loss.l_seg), repr(loss.l_cl), repr(loss.lam), repr(loss.total)])
    openset.save_checkpoint(out / "checkpoint", res.params)
    summary = {"config": config.to_dict(), "final_loss": res.losses[-1].total}
    if held_out is not None:
        pred = openset.predict_labels(held_out, res.params)
        y = held_out.labels
        summary["known_accuracy"] = float((pred[y < k] == y[y < k]).mean())
        summary["unknown_recall"] = float((pred[y == k] == k).mean())
        summary["ca_iou"] = compute_ca_iou(pred == k, y == k)
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"wrote {out / 'losses.csv'} and {out / 'checkpoint'}")
    return EXIT_OK


def cmd_stats(args) -> int:
    m = _manifest(args.manifest)
    try:
        st = compute_stats(m)
    except ValueError as e:
        log.error("%s", e)
        return EXIT_FAIL
    names = {c.id: c.name for c in m.categories.entries} | m.class_names
    _write(args.out, json.dumps(st.to_dict(names), indent=2) + "\n")
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.frames < 0:
        raise UsageError("--frames must be non-negative")
    spec = SceneSpec(height=args.height, width=args.width,
                     moving_prob=0.0 if args.static else SceneSpec.moving_prob)
    m = synth_dataset(args.out, args.seed, args.frames, spec, args.train_fraction)
    print(f"wrote {len(m)} frames and {Path(args.out) / 'manifest.json'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vcas", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def evaluator(name, track, help_):
        s = sub.add_parser(name, help=help_, description=help_)
        s.add_argument("--manifest", required=True)
        s.add_argument("--split", choices=["train", "test"])
        s.add_argument("--workers", type=int, default=None,
                       help=f"thread count (default: ${ev.WORKERS_ENV} or 1)")
        s.add_argument("--out-csv")
        s.add_argument("--out-json")
        s.set_defaults(func=_evaluate(track))
        return s

    s = evaluator("evaluate-ca", "ca", "class-agnostic SQ / RQ / CAQ")
    s.add_argument("--efs", action="store_true", help="subtract ego flow before flow diagnostics")
    s.add_argument("--invert-pose", action="store_true")
    s.add_argument("--motion-threshold", type=float, default=1.0)
    evaluator("evaluate-panoptic", "panoptic", "panoptic quality (All / Th / St)")
    s = evaluator("evaluate-openset", "openset", "mIoU over known classes and CA-IoU of unknowns")
    s.add_argument("--checkpoint", help="predict from embeddings with this head instead of semantic_pred")

    s = sub.add_parser("suppress-flow", help="write ego-suppressed flow for every frame")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--invert-pose", action="store_true")
    s.set_defaults(func=cmd_suppress_flow)

    s = sub.add_parser("colorize-flow", help="render a flow PNG as an RGB image")
    s.add_argument("--flow", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--max-norm", type=float)
    s.set_defaults(func=cmd_colorize_flow)

    s = sub.add_parser("prototypes", help="masked-average-pool class prototypes")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out")
    s.add_argument("--split", choices=["train", "test"])
    s.add_argument("--ignore", type=int, nargs="*", default=[])
    s.add_argument("--l2-normalize", action="store_true")
    s.set_defaults(func=cmd_prototypes)

    s = sub.add_parser("dendrogram", help="cluster prototypes into a merge tree")
    s.add_argument("--prototypes", required=True)
    s.add_argument("--out")
    s.add_argument("--linkage", choices=prototypes.LINKAGES, default="average")
    s.set_defaults(func=cmd_dendrogram)

    s = sub.add_parser("train-openset", help="train the open-set head from a JSON config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", help="output directory (default: config path without suffix)")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train_openset)

    s = sub.add_parser("stats", help="moving/static instance and per-class pixel counts")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("synth", help="write a synthetic dataset with a manifest")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--frames", type=int, default=10)
    s.add_argument("--out", required=True)
    s.add_argument("--height", type=int, default=64)
    s.add_argument("--width", type=int, default=96)
    s.add_argument("--train-fraction", type=float, default=0.5)
    s.add_argument("--static", action="store_true", help="no independently moving objects")
    s.set_defaults(func=cmd_synth)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"vcas: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError) as e:
        print(f"vcas: error: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
