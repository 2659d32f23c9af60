"""Command line interface: ``nsod <subcommand> ...``.

Exit codes: 0 on success, 1 on invalid input or configuration, 2 when a
stage fails at runtime. ``NSOD_WORKERS`` caps process parallelism.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, baselines, pipeline
from .datamodel import (
    ClassCatalog,
    FormatError,
    NSODError,
    load_image,
    read_detections,
    read_ground_truth,
    read_manifest,
    read_proposals,
    read_pseudo_labels,
    write_detections,
    write_pseudo_labels,
)
from .evaluate import classification_map, corloc, detection_map, labels_from_gt, proposal_recall, top1_macc
from .features import Featurizer
from .student import StudentParams, detect, load_student, save_student, train_student
from .synthgen import CorpusSpec, ProposalScheme, generate_dataset
from .teacher import TeacherParams, load_teacher, save_teacher, train_teacher
from .voting import to_cway_label

logger = logging.getLogger("nsod")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(NSODError, ValueError):
    pass


def _json_arg(value, typ):
    """``typ`` from an inline JSON object or a path to a JSON file (None -> defaults)."""
    if value is None:
        return typ()
    text = value if value.lstrip().startswith("{") else Path(value).read_text()
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise UsageError(f"invalid JSON for {typ.__name__}: {e.msg}") from e
    return typ.from_dict(d)


def _voting(args) -> pipeline.VotingParams:
    kw = {}
    for name in ("threshold", "fusion_weight", "similarity_scale"):
        v = getattr(args, name, None)
        if v is not None:
            kw[name] = v
    return pipeline.VotingParams(**kw)


def _store(path) -> pipeline.FeatureStore:
    if not (Path(path) / "index.json").exists():
        raise UsageError(f"{path} is not a feature directory (no index.json)")
    return pipeline.FeatureStore(path)


def _dump(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args):
    spec = _json_arg(args.spec, CorpusSpec)
    scheme = _json_arg(args.proposal_scheme, ProposalScheme)
    out = Path(args.out)
    _, records, _ = generate_dataset(spec, out)
    pipeline.make_proposals(records, scheme, out / "proposals.jsonl")
    print(f"wrote {len(records)} images, manifest and proposals to {out}")


def cmd_featurize(args):
    catalog, records = read_manifest(args.manifest)
    proposals = read_proposals(args.proposals)
    missing = [r.image_id for r in records if r.image_id not in proposals]
    if missing:
        raise UsageError(f"no proposals for {len(missing)} images (first: {missing[0]})")
    featurizer = _json_arg(args.featurizer, Featurizer)
    bank = pipeline.featurize(catalog, records, proposals, featurizer, args.out,
                              pipeline.worker_count(args.workers), args.cache_dir)
    print(f"features for {len(records)} images in {args.out}; support bank k={bank.k}")


def cmd_vote(args):
    store = _store(args.features)
    bank = pipeline.load_bank(args.bank or Path(args.features) / "bank.bin")
    pseudo = pipeline.vote(store, bank, _voting(args))
    write_pseudo_labels(args.out, pseudo)
    print(f"{len(pseudo)} pseudo-labels, {sum(int(p.y_hat.sum()) for p in pseudo)} positives -> {args.out}")


def cmd_train_teacher(args):
    store = _store(args.features)
    pseudo = read_pseudo_labels(args.pseudo)
    params = _json_arg(args.params, TeacherParams)
    model = train_teacher(store.global_features([p.image_id for p in pseudo]), [p.cway for p in pseudo],
                          len(store.catalog), params)
    save_teacher(args.out, model)
    print(f"teacher trained on {len(pseudo)} images, final loss {model.final_loss:.4f} -> {args.out}")


def cmd_relabel(args):
    store = _store(args.features)
    stage1 = read_pseudo_labels(args.pseudo)
    teacher = load_teacher(args.teacher)
    pseudo = pipeline.relabel(store, stage1, teacher, args.mode, _voting(args))
    write_pseudo_labels(args.out, pseudo)
    print(f"{len(pseudo)} relabeled ({args.mode}), {sum(int(p.y_hat.sum()) for p in pseudo)} positives -> {args.out}")


def cmd_train_student(args):
    store = _store(args.features)
    pseudo = read_pseudo_labels(args.pseudo) if args.pseudo else []
    params = _json_arg(args.params, StudentParams)
    examples = pipeline.training_examples(store, pseudo, include_support=not args.no_support)
    if not examples:
        raise UsageError("no training examples")
    model = train_student(examples, len(store.catalog), params)
    save_student(args.out, model)
    print(f"student trained on {len(examples)} images, loss {model.history[0][1]:.4f} -> "
          f"{model.history[-1][1]:.4f} -> {args.out}")


def cmd_detect(args):
    model = load_student(args.model)
    params = _json_arg(args.params, StudentParams)
    _, records = read_manifest(args.manifest)
    if args.split != "all":
        records = [r for r in records if r.split == args.split]
    proposals = read_proposals(args.proposals)
    store = _store(args.features) if args.features else None
    featurizer = None if store else _json_arg(args.featurizer, Featurizer)
    dets = []
    for r in records:
        boxes = proposals[r.image_id].boxes
        if store is not None:
            feats = store.regions(r.image_id)
        else:
            # same float32 rounding as a stored feature file
            feats = featurizer.extract_regions(load_image(r.path), boxes).astype(np.float32)
        dets.extend(detect(model, r.image_id, feats, boxes, params.score_floor, params.nms_iou))
    write_detections(args.out, dets)
    print(f"{len(dets)} detections on {len(records)} images -> {args.out}")


def cmd_evaluate(args):
    gt = read_ground_truth(args.gt)
    if args.manifest:
        catalog, records = read_manifest(args.manifest)
        if args.split != "all":
            gt = {r.image_id: gt[r.image_id] for r in records if r.split == args.split}
    elif args.classes:
        catalog = ClassCatalog(tuple(args.classes.split(",")))
    else:
        raise UsageError("--manifest or --classes is needed for the class list")

    if args.metric in ("map", "corloc"):
        if not args.det:
            raise UsageError(f"--det is required for metric {args.metric}")
        dets = read_detections(args.det)
        fn = detection_map if args.metric == "map" else corloc
        rep = fn(dets, gt, catalog, args.iou, split=args.split)
    elif args.metric in ("clsmap", "macc"):
        if not args.pseudo:
            raise UsageError(f"--pseudo is required for metric {args.metric}")
        pseudo = read_pseudo_labels(args.pseudo)
        labels = labels_from_gt(gt, len(catalog), [p.image_id for p in pseudo])
        if args.metric == "clsmap":
            rep = classification_map({p.image_id: p.q_hat for p in pseudo}, labels, catalog)
        else:
            rep = top1_macc({p.image_id: to_cway_label(p.q_hat) for p in pseudo}, labels, catalog)
    else:
        if not args.proposals:
            raise UsageError("--proposals is required for metric recall")
        props = read_proposals(args.proposals)
        value = proposal_recall({i: p.boxes for i, p in props.items()}, gt, args.iou)
        _dump(args.out, {"metric": f"proposal recall (IoU {args.iou:.2f})", "mean": value})
        print(f"proposal recall {100 * value:.2f}")
        return
    _dump(args.out, rep.to_json())
    if args.csv:
        Path(args.csv).write_text(rep.to_csv())
    print(rep.to_text())


def cmd_baseline(args):
    store = _store(args.features)
    C = len(store.catalog)
    if args.strategy == "ns-base":
        examples = pipeline.training_examples(store, [], include_support=True, unlabeled=False)
        model = baselines.ns_base(examples, C, _json_arg(args.params, StudentParams))
        save_student(args.out, model)
        print(f"NS-Base student trained on {len(examples)} support images -> {args.out}")
        return
    ids = store.ids_of("unlabeled")
    if args.strategy == "ns-ft":
        sup = store.ids_of("support")
        pseudo = baselines.ns_ft_from_features(store.global_features(sup), [store.support_label[i] for i in sup],
                                               ids, store.global_features(ids), C,
                                               _json_arg(args.params, TeacherParams))
    else:
        bank = pipeline.load_bank(Path(args.features) / "bank.bin")
        pseudo = baselines.ns_nn_from_features(bank, ids, store.global_features(ids))
    write_pseudo_labels(args.out, pseudo)
    print(f"{args.strategy}: {len(pseudo)} pseudo-labels -> {args.out}")


def _load_config(args) -> pipeline.RunConfig:
    if not args.config:
        raise UsageError("--config is required")
    d = json.loads(Path(args.config).read_text())
    if getattr(args, "out", None):
        d["output_dir"] = args.out
    if getattr(args, "workers", None):
        d["workers"] = args.workers
    return pipeline.RunConfig.from_dict(d)


def cmd_run_all(args):
    if args.print_schema:
        print(json.dumps(pipeline.config_schema(), indent=1))
        return
    cfg = _load_config(args)
    rec = pipeline.run_all(cfg)
    m = rec.metrics
    print(f"run {rec.config_digest} -> {cfg.output_dir}")
    for key in pipeline.REPORT_COLUMNS:
        if key in m:
            print(f"  {key:<20s} {100 * m[key]['mean']:6.1f}")


def _parse_values(axis, text):
    vals = [v.strip() for v in text.split(",") if v.strip()]
    if axis != "fusion_mode":
        try:
            return [int(v) for v in vals]
        except ValueError as e:
            raise UsageError(f"--values for {axis} must be integers") from e
    return vals


def cmd_sweep(args):
    cfg = _load_config(args)
    rows = pipeline.sweep(cfg, args.axis, _parse_values(args.axis, args.values), args.out or cfg.output_dir)
    for r in rows:
        val = f"{r['detection_map']:.1f}" if r.get("status") == "ok" else r["status"]
        print(f"  {args.axis}={r['value']}: {val}")
    if not any(r.get("status") == "ok" for r in rows):
        raise pipeline.StageError("sweep", RuntimeError("every run failed"))


def cmd_report(args):
    print(pipeline.report(args.runs, args.csv), end="")


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nsod", description="Few-label object detection from image-level votes.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(fn=fn)
        return sp

    def voting_flags(sp):
        sp.add_argument("--threshold", type=float)
        sp.add_argument("--similarity-scale", dest="similarity_scale", type=float)
        sp.add_argument("--fusion-weight", dest="fusion_weight", type=float)

    sp = add("gen-data", cmd_gen_data, "generate a synthetic corpus and its proposals")
    sp.add_argument("--spec", help="corpus spec (JSON file or inline object); defaults to shapes-v1")
    sp.add_argument("--proposal-scheme", help="proposal scheme (JSON file or inline object)")
    sp.add_argument("--out", required=True)

    sp = add("featurize", cmd_featurize, "region, global and support-bank features")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--proposals", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--featurizer", help="featurizer settings (JSON file or inline object)")
    sp.add_argument("--workers", type=int, default=0)
    sp.add_argument("--cache-dir")

    sp = add("vote", cmd_vote, "stage-1 pseudo-labels from support similarity")
    sp.add_argument("--features", required=True)
    sp.add_argument("--bank", help="support bank (default: <features>/bank.bin)")
    sp.add_argument("--out", required=True)
    voting_flags(sp)

    sp = add("train-teacher", cmd_train_teacher, "C-way teacher on stage-1 labels")
    sp.add_argument("--pseudo", required=True)
    sp.add_argument("--features", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--params", help="teacher hyperparameters (JSON)")

    sp = add("relabel", cmd_relabel, "fuse teacher votes with stage-1 scores")
    sp.add_argument("--teacher", required=True)
    sp.add_argument("--pseudo", required=True, help="stage-1 pseudo-labels")
    sp.add_argument("--features", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--mode", choices=pipeline.FUSION_MODES, default="fused")
    voting_flags(sp)

    sp = add("train-student", cmd_train_student, "train the weakly supervised detector")
    sp.add_argument("--pseudo")
    sp.add_argument("--features", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--params", help="student hyperparameters (JSON)")
    sp.add_argument("--no-support", action="store_true", help="leave the support images out of training")

    sp = add("detect", cmd_detect, "run a student model over proposals")
    sp.add_argument("--model", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--proposals", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--features", help="reuse a feature directory instead of featurizing the images")
    sp.add_argument("--featurizer", help="featurizer settings when featurizing on the fly")
    sp.add_argument("--params", help="student parameters (score floor, NMS IoU)")
    sp.add_argument("--split", default="test", choices=("test", "unlabeled", "support", "all"))

    sp = add("evaluate", cmd_evaluate, "metric reports")
    sp.add_argument("--metric", required=True, choices=("map", "corloc", "clsmap", "macc", "recall"))
    sp.add_argument("--gt", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--det")
    sp.add_argument("--pseudo")
    sp.add_argument("--proposals")
    sp.add_argument("--manifest", help="class list and split membership")
    sp.add_argument("--classes", help="comma-separated class names when no manifest is given")
    sp.add_argument("--split", default="all")
    sp.add_argument("--iou", type=float, default=0.5)
    sp.add_argument("--csv")

    sp = add("baseline", cmd_baseline, "NS-FT / NS-NN pseudo-labels or an NS-Base student")
    sp.add_argument("--strategy", required=True, choices=pipeline.BASELINES)
    sp.add_argument("--features", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--params", help="teacher (ns-ft) or student (ns-base) hyperparameters (JSON)")

    sp = add("run-all", cmd_run_all, "every stage from one config file")
    sp.add_argument("--config")
    sp.add_argument("--out", help="override output_dir")
    sp.add_argument("--workers", type=int)
    sp.add_argument("--print-schema", action="store_true")

    sp = add("sweep", cmd_sweep, "one run per value of an axis")
    sp.add_argument("--config", required=True)
    sp.add_argument("--axis", required=True, choices=pipeline.SWEEP_AXES)
    sp.add_argument("--values", required=True, help="comma-separated values")
    sp.add_argument("--out")
    sp.add_argument("--workers", type=int)

    sp = add("report", cmd_report, "comparison table over finished runs")
    sp.add_argument("runs", nargs="+")
    sp.add_argument("--csv")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.fn(args)
    except pipeline.StageError as e:
        # bad input surfacing inside a stage is still a validation failure
        code = EXIT_INVALID if isinstance(e.error, (FormatError, pipeline.ConfigError)) else EXIT_RUNTIME
        print(f"error: {e}", file=sys.stderr)
        return code
    except (UsageError, pipeline.ConfigError, FormatError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (ValueError, TypeError, KeyError) as e:
        print(f"error: invalid input: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (NSODError, OSError, ArithmeticError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
