"""End-to-end runs and sweeps over file-backed stage artifacts.

Every stage reads and writes the documented file formats, so a run can be
resumed or inspected stage by stage with the command line tools.

Run directory layout::

    data/                  generated corpus (manifest.json, ground_truth.jsonl, images/)
    proposals.jsonl
    features/              index.json, global.bin, regions/<id>.bin, bank.bin, bank.json
    pseudo_stage1.jsonl    voting on the support bank
    teacher.bin
    pseudo.jsonl           labels the student is trained on
    student.bin
    detections_test.jsonl, detections_unlabeled.jsonl
    results.json           metrics (deterministic)
    run_record.json        config, digest, timings, artifact paths
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import baselines
from .audit import AccessLog, guarded
from .datamodel import (
    ClassCatalog,
    ImageRecord,
    NSODError,
    PseudoLabelRecord,
    load_image,
    read_features,
    read_ground_truth,
    read_manifest,
    read_proposals,
    write_detections,
    write_features,
    write_proposals,
    write_pseudo_labels,
)
from .evaluate import (
    classification_map,
    corloc,
    detection_map,
    labels_from_gt,
    proposal_recall,
    top1_macc,
)
from .features import Featurizer, SupportBank
from .student import StudentParams, TrainingExample, detect, load_student, save_student, train_student
from .synthgen import CorpusSpec, ProposalScheme, generate_dataset, generate_proposals
from .teacher import TeacherParams, load_teacher, region_prob_matrix, save_teacher, train_teacher
from .voting import fuse_scores, image_scores, similarity_matrix, to_cway_label, to_multiclass_label

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
FUSION_MODES = ("G-only", "X-only", "fused")
BASELINES = ("ns-ft", "ns-nn", "ns-base")
TRAINING_STAGES = ("featurize", "vote", "train-teacher", "relabel", "train-student")


class ConfigError(NSODError, ValueError):
    pass


class StageError(NSODError):
    def __init__(self, stage: str, error: Exception):
        super().__init__(f"stage {stage!r} failed: {error}")
        self.stage = stage
        self.error = error


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class VotingParams:
    threshold: float = 0.5
    fusion_weight: float = 0.5
    # cosine similarities live in [0, 1]; without a scale the row softmax over
    # C classes can never push an image score past the threshold
    similarity_scale: float = 16.0

    def __post_init__(self):
        if not 0 < self.threshold < 1:
            raise ConfigError("voting.threshold must be in (0, 1)")
        if not 0 <= self.fusion_weight <= 1:
            raise ConfigError("voting.fusion_weight must be in [0, 1]")
        if not self.similarity_scale > 0:
            raise ConfigError("voting.similarity_scale must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "VotingParams":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown voting keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class RunConfig:
    output_dir: str
    corpus: Optional[CorpusSpec] = CorpusSpec()
    dataset: Optional[dict] = None  # {"manifest": path, "ground_truth": path, "proposals": path?}
    proposals: ProposalScheme = ProposalScheme()
    featurizer: Featurizer = Featurizer()
    voting: VotingParams = VotingParams()
    fusion_mode: str = "fused"
    teacher: TeacherParams = TeacherParams()
    student: StudentParams = StudentParams()
    baseline: Optional[str] = None
    seed: int = 0
    workers: int = 0
    cache_dir: Optional[str] = None
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"fusion_mode must be one of {FUSION_MODES}")
        if self.baseline is not None and self.baseline not in BASELINES:
            raise ConfigError(f"baseline must be one of {BASELINES} or null")
        if (self.corpus is None) == (self.dataset is None):
            raise ConfigError("exactly one of 'corpus' and 'dataset' must be given")
        if self.dataset is not None:
            unknown = set(self.dataset) - {"manifest", "ground_truth", "proposals"}
            if unknown:
                raise ConfigError(f"unknown dataset keys {sorted(unknown)}")
            for key in ("manifest", "ground_truth"):
                if key not in self.dataset:
                    raise ConfigError(f"dataset.{key} is required")
            for key, p in self.dataset.items():
                if not Path(p).exists():
                    raise ConfigError(f"dataset.{key} does not exist: {p}")

    @property
    def needs_teacher(self) -> bool:
        return self.baseline is None and self.fusion_mode != "G-only"

    # -- (de)serialization -------------------------------------------------

    _NESTED = {
        "corpus": CorpusSpec,
        "proposals": ProposalScheme,
        "featurizer": Featurizer,
        "voting": VotingParams,
        "teacher": TeacherParams,
        "student": StudentParams,
    }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        if "output_dir" not in d:
            raise ConfigError("output_dir is required")
        kw = dict(d)
        if "dataset" in kw and kw["dataset"] is not None and "corpus" not in kw:
            kw["corpus"] = None
        for key, typ in cls._NESTED.items():
            if key in kw and kw[key] is not None:
                try:
                    kw[key] = _from_dict(typ, kw[key])
                except (TypeError, ValueError) as e:
                    raise ConfigError(f"{key}: {e}") from e
        try:
            return cls(**kw)
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(str(e)) from e

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from e
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.to_dict() if hasattr(v, "to_dict") else _plain(v)
        return out

    def digest(self) -> str:
        """Hash of everything that can change results (not paths or worker counts)."""
        d = self.to_dict()
        for key in ("output_dir", "workers", "cache_dir"):
            d.pop(key)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _plain(v):
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    return v


def _from_dict(typ, d):
    if not isinstance(d, dict):
        raise ValueError(f"expected an object, got {type(d).__name__}")
    return typ.from_dict(d)


def config_schema() -> dict:
    """Versioned description of the config file."""

    def describe(typ):
        return {f.name: repr(f.default) if not hasattr(f.default, "__dataclass_fields__") else describe(type(f.default))
                for f in fields(typ)}

    return {
        "schema_version": SCHEMA_VERSION,
        "required": ["output_dir"],
        "one_of": [["corpus"], ["dataset"]],
        "fields": {
            "output_dir": "run directory",
            "corpus": describe(CorpusSpec),
            "dataset": {"manifest": "path", "ground_truth": "path", "proposals": "optional path"},
            "proposals": describe(ProposalScheme),
            "featurizer": describe(Featurizer),
            "voting": describe(VotingParams),
            "fusion_mode": list(FUSION_MODES),
            "teacher": describe(TeacherParams),
            "student": describe(StudentParams),
            "baseline": [None, *BASELINES],
            "seed": "int; offsets corpus/teacher/student seeds",
            "workers": "int; 0 = NSOD_WORKERS or 1",
            "cache_dir": "optional directory for reusable region features",
        },
    }


def worker_count(requested: int = 0) -> int:
    cap = os.environ.get("NSOD_WORKERS")
    n = requested or (int(cap) if cap else 1)
    if cap:
        n = min(n, int(cap))
    return max(1, n)


# ---------------------------------------------------------------------------
# stages


def make_proposals(records: Sequence[ImageRecord], scheme: ProposalScheme, out_path) -> dict:
    props = {r.image_id: generate_proposals(r.image_id, r.width, r.height, scheme) for r in records}
    write_proposals(out_path, props.values())
    return props


def _featurize_one(args):
    featurizer, path, boxes = args
    img = load_image(path)
    return featurizer.extract_regions(img, boxes), featurizer.extract_global(img)


def _cache_key(featurizer: Featurizer, image_path: str, boxes: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(featurizer.to_dict(), sort_keys=True).encode())
    h.update(Path(image_path).read_bytes())
    h.update(np.ascontiguousarray(boxes, dtype="<f8").tobytes())
    return h.hexdigest()


def featurize(catalog: ClassCatalog, records: Sequence[ImageRecord], proposals: dict, featurizer: Featurizer,
              out_dir, workers: int = 1, cache_dir=None) -> SupportBank:
    """Write region features per image, global features and the support bank.

    Returns the support bank (built from the float32 global features on disk).
    """
    out_dir = Path(out_dir)
    (out_dir / "regions").mkdir(parents=True, exist_ok=True)
    todo, keys = [], {}
    for r in records:
        dest = out_dir / "regions" / f"{r.image_id}.bin"
        if cache_dir is not None:
            key = _cache_key(featurizer, r.path, proposals[r.image_id].boxes)
            keys[r.image_id] = key
            cached = Path(cache_dir) / f"{key}.bin"
            cached_g = Path(cache_dir) / f"{key}.global.bin"
            if cached.exists() and cached_g.exists():
                shutil.copyfile(cached, dest)
                continue
        todo.append(r)

    jobs = [(featurizer, r.path, proposals[r.image_id].boxes) for r in todo]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_featurize_one, jobs, chunksize=8))
    else:
        results = map(_featurize_one, jobs)
    fresh_global = {}
    for r, (regions, glob) in zip(todo, results):
        write_features(out_dir / "regions" / f"{r.image_id}.bin", regions)
        fresh_global[r.image_id] = glob
        if cache_dir is not None:
            Path(cache_dir).mkdir(parents=True, exist_ok=True)
            write_features(Path(cache_dir) / f"{keys[r.image_id]}.bin", regions)
            write_features(Path(cache_dir) / f"{keys[r.image_id]}.global.bin", glob.reshape(1, -1))

    glob_rows = []
    for r in records:
        if r.image_id in fresh_global:
            glob_rows.append(fresh_global[r.image_id])
        else:
            glob_rows.append(read_features(Path(cache_dir) / f"{keys[r.image_id]}.global.bin")[0])
    write_features(out_dir / "global.bin", np.stack(glob_rows))
    index = {
        "classes": list(catalog.names),
        "dim": featurizer.dim,
        "featurizer": featurizer.to_dict(),
        "images": [{"id": r.image_id, "split": r.split, "support_label": r.support_label} for r in records],
    }
    (out_dir / "index.json").write_text(json.dumps(index, indent=1) + "\n")
    write_proposals(out_dir / "proposals.jsonl", (proposals[r.image_id] for r in records))

    globals_ = read_features(out_dir / "global.bin")
    support = sorted((i, r) for i, r in enumerate(records) if r.split == "support")
    support = sorted(support, key=lambda t: (t[1].support_label, t[1].image_id))
    counts = {}
    for _, r in support:
        counts[r.support_label] = counts.get(r.support_label, 0) + 1
    missing = [catalog.names[j] for j in range(len(catalog)) if j not in counts]
    if missing:
        raise ValueError(f"classes with no support images: {missing}")
    if len(set(counts.values())) != 1:
        raise ValueError(f"unequal support counts per class: { {catalog.names[j]: n for j, n in counts.items()} }")
    rows = globals_[[i for i, _ in support]].astype(np.float64)
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    bank = SupportBank.from_rows(catalog, rows, [r.image_id for _, r in support])
    save_bank(out_dir / "bank.bin", bank)
    return bank


def save_bank(path, bank: SupportBank):
    write_features(path, bank.rows())
    meta = {"classes": list(bank.catalog.names), "k": bank.k, "image_ids": list(bank.image_ids)}
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=1) + "\n")


def load_bank(path) -> SupportBank:
    meta = json.loads(Path(str(path) + ".json").read_text())
    rows = read_features(path).astype(np.float64)
    return SupportBank.from_rows(ClassCatalog(tuple(meta["classes"])), rows, meta.get("image_ids", ()))


class FeatureStore:
    """Read access to a ``featurize`` output directory."""

    def __init__(self, root):
        self.root = Path(root)
        self.index = json.loads((self.root / "index.json").read_text())
        self.catalog = ClassCatalog(tuple(self.index["classes"]))
        self.dim = self.index["dim"]
        self.ids = [e["id"] for e in self.index["images"]]
        self.split = {e["id"]: e["split"] for e in self.index["images"]}
        self.support_label = {e["id"]: e["support_label"] for e in self.index["images"]}
        self._global = None
        self._proposals = None

    def ids_of(self, split: str) -> list:
        return [i for i in self.ids if self.split[i] == split]

    def regions(self, image_id: str) -> np.ndarray:
        return read_features(self.root / "regions" / f"{image_id}.bin", self.dim)

    def global_features(self, ids: Sequence[str]) -> np.ndarray:
        if self._global is None:
            g = read_features(self.root / "global.bin", self.dim)
            self._global = {i: g[n] for n, i in enumerate(self.ids)}
        return np.stack([self._global[i] for i in ids])

    def boxes(self, image_id: str) -> np.ndarray:
        if self._proposals is None:
            self._proposals = read_proposals(self.root / "proposals.jsonl")
        return self._proposals[image_id].boxes


def vote(store: FeatureStore, bank: SupportBank, voting: VotingParams = VotingParams()) -> list:
    """Stage 1: pseudo-labels from region-to-support similarity."""
    out = []
    for image_id in store.ids_of("unlabeled"):
        S = similarity_matrix(store.regions(image_id), bank)
        sS = image_scores(voting.similarity_scale * S)
        out.append(PseudoLabelRecord(image_id, sigma_S=sS, q_hat=sS, cway=to_cway_label(sS),
                                     y_hat=to_multiclass_label(sS, voting.threshold)))
    return out


def relabel(store: FeatureStore, stage1: Sequence[PseudoLabelRecord], teacher, mode: str = "fused",
            voting: VotingParams = VotingParams()) -> list:
    """Stage 3: teacher region probabilities, fused with stage-1 scores.

    The probability matrix goes through the dual softmax unchanged.
    """
    out = []
    for rec in stage1:
        A = region_prob_matrix(teacher, store.regions(rec.image_id))
        sA = image_scores(A)
        if mode == "fused":
            q = fuse_scores(rec.sigma_S, sA, voting.fusion_weight)
        elif mode == "X-only":
            q = sA
        else:
            q = rec.sigma_S
        out.append(PseudoLabelRecord(rec.image_id, sigma_S=rec.sigma_S, sigma_A=sA, q_hat=q, cway=rec.cway,
                                     y_hat=to_multiclass_label(q, voting.threshold)))
    return out


def training_examples(store: FeatureStore, pseudo: Sequence[PseudoLabelRecord], include_support: bool = True,
                      unlabeled: bool = True) -> list:
    C = len(store.catalog)
    out = []
    if unlabeled:
        for rec in pseudo:
            out.append(TrainingExample(rec.image_id, store.regions(rec.image_id), store.boxes(rec.image_id),
                                       rec.y_hat, 1.0))
    if include_support:
        for image_id in store.ids_of("support"):
            y = np.zeros(C, dtype=np.int64)
            y[store.support_label[image_id]] = 1
            out.append(TrainingExample(image_id, store.regions(image_id), store.boxes(image_id), y, 1.0))
    return out


def detect_split(store: FeatureStore, model, split: str, params: StudentParams) -> list:
    dets = []
    for image_id in store.ids_of(split):
        dets.extend(detect(model, image_id, store.regions(image_id), store.boxes(image_id),
                           params.score_floor, params.nms_iou))
    return dets


def evaluate_run(catalog: ClassCatalog, records: Sequence[ImageRecord], gt: dict, pseudo: Sequence[PseudoLabelRecord],
                 det_test: list, det_unl: list, proposals: dict, digest: str) -> dict:
    C = len(catalog)
    test_ids = [r.image_id for r in records if r.split == "test"]
    unl_ids = [r.image_id for r in records if r.split == "unlabeled"]
    gt_test = {i: gt[i] for i in test_ids}
    gt_unl = {i: gt[i] for i in unl_ids}
    reports = {
        "detection_map": detection_map(det_test, gt_test, catalog, split="test"),
        "corloc": corloc(det_unl, gt_unl, catalog, split="unlabeled"),
    }
    if pseudo:
        labels = labels_from_gt(gt, C, [p.image_id for p in pseudo])
        reports["classification_map"] = classification_map({p.image_id: p.q_hat for p in pseudo}, labels, catalog,
                                                           split="unlabeled")
        reports["macc"] = top1_macc({p.image_id: to_cway_label(p.q_hat) for p in pseudo}, labels, catalog,
                                    split="unlabeled")
    for r in reports.values():
        r.config_digest = digest
    out = {k: r.to_json() for k, r in reports.items()}
    out["proposal_recall"] = proposal_recall({i: proposals[i].boxes for i in test_ids + unl_ids}, gt)
    if pseudo:
        dis = {r.image_id for r in records if r.is_distractor}
        if dis:
            neg = sum(1 for p in pseudo if p.image_id in dis and not p.y_hat.any())
            out["distractor_all_negative"] = neg / len(dis)
        out["pseudo_label_positives"] = int(sum(int(p.y_hat.sum()) for p in pseudo))
    return out


# ---------------------------------------------------------------------------
# orchestration


@dataclass
class RunRecord:
    config: dict
    config_digest: str
    timings: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    training_log: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "config": self.config,
            "config_digest": self.config_digest,
            "timings": self.timings,
            "artifacts": self.artifacts,
            "metrics": self.metrics,
            "training_log": self.training_log,
        }


def _with_seed(cfg: RunConfig) -> RunConfig:
    """Fold the top-level seed into each component's seed."""
    if cfg.seed == 0:
        return cfg
    s = cfg.seed
    return replace(
        cfg,
        corpus=None if cfg.corpus is None else replace(cfg.corpus, seed=cfg.corpus.seed + s),
        teacher=replace(cfg.teacher, seed=cfg.teacher.seed + s),
        student=replace(cfg.student, seed=cfg.student.seed + s),
    )


def run_all(config: RunConfig, audit_log: Optional[AccessLog] = None, hooks: Optional[dict] = None) -> RunRecord:
    """Run every stage and write all artifacts under ``config.output_dir``.

    ``hooks`` maps a stage name to a callable run inside that stage (used by
    tests to inject misbehaviour). The GT access audit fails the run if any
    training stage opened the ground-truth file.
    """
    cfg = _with_seed(config)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    record = RunRecord(config.to_dict(), config.digest())
    log = audit_log if audit_log is not None else AccessLog()
    hooks = hooks or {}
    workers = worker_count(config.workers)

    def stage(name, fn):
        t0 = time.perf_counter()
        try:
            if name in TRAINING_STAGES:
                with guarded(log, name):
                    res = fn()
                    if name in hooks:
                        hooks[name]()
            else:
                res = fn()
        except StageError:
            raise
        except Exception as e:  # noqa: BLE001 - re-raised with the stage name
            raise StageError(name, e) from e
        record.timings[name] = round(time.perf_counter() - t0, 3)
        return res

    # data
    if cfg.corpus is not None:
        data_dir = out / "data"
        stage("gen-data", lambda: generate_dataset(cfg.corpus, data_dir))
        manifest, gt_path = data_dir / "manifest.json", data_dir / "ground_truth.jsonl"
    else:
        manifest, gt_path = Path(cfg.dataset["manifest"]), Path(cfg.dataset["ground_truth"])
    log.watch(gt_path)
    catalog, records = read_manifest(manifest)
    record.artifacts.update(manifest=str(manifest), ground_truth=str(gt_path))

    prop_path = out / "proposals.jsonl"
    if cfg.dataset is not None and cfg.dataset.get("proposals"):
        proposals = stage("proposals", lambda: read_proposals(cfg.dataset["proposals"]))
        write_proposals(prop_path, (proposals[r.image_id] for r in records))
    else:
        proposals = stage("proposals", lambda: make_proposals(records, cfg.proposals, prop_path))
    record.artifacts["proposals"] = str(prop_path)

    feat_dir = out / "features"
    stage("featurize", lambda: featurize(catalog, records, proposals, cfg.featurizer, feat_dir, workers,
                                         cfg.cache_dir))
    store = FeatureStore(feat_dir)
    bank = load_bank(feat_dir / "bank.bin")
    record.artifacts["features"] = str(feat_dir)

    C = len(catalog)
    pseudo = []
    if cfg.baseline is None:
        stage1 = stage("vote", lambda: vote(store, bank, cfg.voting))
        write_pseudo_labels(out / "pseudo_stage1.jsonl", stage1)
        record.artifacts["pseudo_stage1"] = str(out / "pseudo_stage1.jsonl")
        if cfg.needs_teacher:
            def _teacher():
                ids = [p.image_id for p in stage1]
                model = train_teacher(store.global_features(ids), [p.cway for p in stage1], C, cfg.teacher)
                save_teacher(out / "teacher.bin", model)
                return model

            teacher = stage("train-teacher", _teacher)
            acc = float(np.mean(np.argmax(teacher.predict(store.global_features([p.image_id for p in stage1])), 1)
                                == np.array([p.cway for p in stage1])))
            record.training_log["teacher"] = {"final_loss": teacher.final_loss, "train_accuracy": acc}
            record.artifacts["teacher"] = str(out / "teacher.bin")
            pseudo = stage("relabel", lambda: relabel(store, stage1, load_teacher(out / "teacher.bin"),
                                                      cfg.fusion_mode, cfg.voting))
        else:
            pseudo = stage1
    elif cfg.baseline == "ns-ft":
        ids = store.ids_of("unlabeled")
        sup = store.ids_of("support")
        pseudo = stage("vote", lambda: baselines.ns_ft_from_features(
            store.global_features(sup), [store.support_label[i] for i in sup], ids, store.global_features(ids),
            C, cfg.teacher))
    elif cfg.baseline == "ns-nn":
        ids = store.ids_of("unlabeled")
        pseudo = stage("vote", lambda: baselines.ns_nn_from_features(bank, ids, store.global_features(ids)))
    if pseudo:
        write_pseudo_labels(out / "pseudo.jsonl", pseudo)
        record.artifacts["pseudo"] = str(out / "pseudo.jsonl")

    def _student():
        examples = training_examples(store, pseudo, include_support=True, unlabeled=cfg.baseline != "ns-base")
        model = train_student(examples, C, cfg.student)
        save_student(out / "student.bin", model)
        n_sup = sum(1 for e in examples if store.split[e.image_id] == "support")
        record.training_log["student"] = {
            "examples": len(examples),
            "support_examples": n_sup,
            "support_loss_weight": sorted({e.loss_weight for e in examples if store.split[e.image_id] == "support"}),
            "loss_start": model.history[0][1],
            "loss_end": model.history[-1][1],
            "history": model.history,
        }
        return model

    stage("train-student", _student)
    log.check(TRAINING_STAGES)
    model = load_student(out / "student.bin")
    record.artifacts["student"] = str(out / "student.bin")

    det_test = stage("detect", lambda: detect_split(store, model, "test", cfg.student))
    det_unl = detect_split(store, model, "unlabeled", cfg.student)
    write_detections(out / "detections_test.jsonl", det_test)
    write_detections(out / "detections_unlabeled.jsonl", det_unl)
    record.artifacts["detections"] = str(out / "detections_test.jsonl")

    def _evaluate():
        gt = read_ground_truth(gt_path)
        return evaluate_run(catalog, records, gt, pseudo, det_test, det_unl, proposals, record.config_digest)

    metrics = stage("evaluate", _evaluate)
    results = {"config_digest": record.config_digest, "metrics": metrics}
    (out / "results.json").write_text(json.dumps(results, indent=1, sort_keys=True) + "\n")
    record.metrics = metrics
    record.artifacts["results"] = str(out / "results.json")
    (out / "run_record.json").write_text(json.dumps(record.to_json(), indent=1) + "\n")
    return record


# ---------------------------------------------------------------------------
# sweeps

SWEEP_AXES = ("k", "distractor_count", "fusion_mode")


def headline(results: dict) -> float:
    return 100 * results["metrics"]["detection_map"]["mean"]


def sweep(config: RunConfig, axis: str, values: Sequence, out_dir=None) -> list:
    """One run per value; writes ``sweep.csv`` and ``sweep.svg`` into ``out_dir``.

    A failing run is recorded with its error and the sweep continues.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}")
    if axis != "fusion_mode" and config.corpus is None:
        raise ConfigError(f"sweeping {axis} needs a generated corpus")
    out_dir = Path(out_dir or config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for v in values:
        row = {"axis": axis, "value": v}
        try:
            if axis == "fusion_mode":
                cfg = replace(config, fusion_mode=v)
            else:
                key = "k_support" if axis == "k" else "distractor_count"
                cfg = replace(config, corpus=replace(config.corpus, **{key: int(v)}))
            cfg = replace(cfg, output_dir=str(out_dir / f"{axis}={v}"))
            rec = run_all(cfg)
            m = rec.metrics
            row.update(
                status="ok",
                detection_map=100 * m["detection_map"]["mean"],
                corloc=100 * m["corloc"]["mean"],
                classification_map=100 * m["classification_map"]["mean"] if "classification_map" in m else None,
                macc=100 * m["macc"]["mean"] if "macc" in m else None,
            )
        except (NSODError, ValueError) as e:
            logger.error("sweep %s=%s failed: %s", axis, v, e)
            row.update(status=f"failed: {e}")
        rows.append(row)
    write_sweep_table(out_dir / "sweep.csv", rows)
    plot_sweep(out_dir / "sweep.svg", rows, axis)
    return rows


def write_sweep_table(path, rows):
    import csv

    cols = ["axis", "value", "status", "detection_map", "corloc", "classification_map", "macc"]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({c: r.get(c) for c in cols})


def plot_sweep(path, rows, axis: str):
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "nsod"
    import matplotlib.pyplot as plt

    ok = [r for r in rows if r.get("status") == "ok"]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    labels = [str(r["value"]) for r in ok]
    vals = [r["detection_map"] for r in ok]
    if axis == "fusion_mode":
        ax.bar(labels, vals, color="#4c72b0")
    else:
        ax.plot(labels, vals, marker="o")
    ax.set_xlabel(axis)
    ax.set_ylabel("detection mAP (test)")
    ax.set_ylim(0, 100)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


# ---------------------------------------------------------------------------
# reports

ABSENT_METHODS = ("NS-MT-v1", "NS-MT-v2")
REPORT_COLUMNS = ("detection_map", "corloc", "classification_map", "macc")


def method_name(config: dict) -> str:
    if config.get("baseline"):
        return {"ns-ft": "NS-FT", "ns-nn": "NS-NN", "ns-base": "NS-Base"}[config["baseline"]]
    return {"fused": "NSOD", "G-only": "NSOD_G", "X-only": "NSOD_X"}[config.get("fusion_mode", "fused")]


def report(run_dirs: Sequence, csv_path=None) -> str:
    """Comparison table over finished runs (values x100).

    Methods that are not implemented are listed as absent so the table lines
    up with the full comparison.
    """
    rows = []
    for d in run_dirs:
        d = Path(d)
        try:
            rec = json.loads((d / "run_record.json").read_text())
        except FileNotFoundError as e:
            raise ConfigError(f"{d} is not a finished run (no run_record.json)") from e
        m = rec["metrics"]
        corpus = rec["config"].get("corpus") or {}
        row = {"run": d.name, "method": method_name(rec["config"]), "k": corpus.get("k_support"),
               "distractors": corpus.get("distractor_count"), "digest": rec["config_digest"]}
        for c in REPORT_COLUMNS:
            row[c] = 100 * m[c]["mean"] if c in m else None
        rows.append(row)
    for name in ABSENT_METHODS:
        rows.append({"run": "", "method": name, "status": "absent"})

    cols = ("run", "method", "k", "distractors") + REPORT_COLUMNS

    def cell(r, c):
        v = r.get(c)
        if r.get("status") == "absent" and c in REPORT_COLUMNS:
            return "absent"
        if v is None:
            return "-"
        return f"{v:.1f}" if isinstance(v, float) else str(v)

    table = [list(cols)] + [[cell(r, c) for c in cols] for r in rows]
    widths = [max(len(row[i]) for row in table) for i in range(len(cols))]
    text = "\n".join("  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() for row in table)
    if csv_path is not None:
        import csv

        with open(csv_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(cols)
            for r in rows:
                w.writerow([cell(r, c) for c in cols])
    return text + "\n"
