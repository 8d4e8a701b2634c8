"""Evaluation: angular-error reports and the cross-subject protocols.

Every protocol keeps train/test subject-disjoint, refits the head-pose
clusters on training data only, and derives per-fold seeds from the
experiment seed, so runs are reproducible from the recorded metadata.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import clustering, nnet, train as train_mod
from .geometry import angular_error
from .rngs import stream
from .train import TrainArrays, TrainConfig

_TAG_FOLD = 0x45
_TAG_SPLIT = 0x46


class ProtocolError(Exception):
    pass


def config_hash(obj):
    """Stable short hash of any JSON-serializable config payload."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class EvalReport:
    protocol: str
    ids: list
    subjects: np.ndarray
    clusters: np.ndarray
    errors_deg: np.ndarray
    folds: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def overall_mean(self):
        return float(np.mean(self.errors_deg))

    def per_cluster(self):
        out = {}
        for c in np.unique(self.clusters):
            mask = self.clusters == c
            out[int(c)] = {"count": int(mask.sum()),
                           "mean_error_deg": float(self.errors_deg[mask].mean())}
        return out

    def per_subject(self):
        out = {}
        for s in np.unique(self.subjects):
            mask = self.subjects == s
            out[str(s)] = {"count": int(mask.sum()),
                           "mean_error_deg": float(self.errors_deg[mask].mean())}
        return out

    def fold_mean(self):
        """Mean of per-fold means (the pooled overall_mean is the headline)."""
        if not self.folds:
            return None
        return float(np.mean([f["mean_error_deg"] for f in self.folds]))

    def to_dict(self):
        return {
            "protocol": self.protocol,
            "count": len(self.errors_deg),
            "overall_mean_error_deg": self.overall_mean,
            "fold_mean_error_deg": self.fold_mean(),
            "per_cluster": self.per_cluster(),
            "per_subject": self.per_subject(),
            "folds": self.folds,
            "meta": self.meta,
        }

    def summary_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["cluster", "count", "mean_error_deg"])
        for c, row in sorted(self.per_cluster().items()):
            writer.writerow([c, row["count"], f"{row['mean_error_deg']:.4f}"])
        writer.writerow(["overall", len(self.errors_deg), f"{self.overall_mean:.4f}"])
        return buf.getvalue()

    def samples_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["id", "subject", "cluster", "error_deg"])
        for i, sid in enumerate(self.ids):
            writer.writerow(
                [sid, self.subjects[i], int(self.clusters[i]),
                 f"{float(self.errors_deg[i]):.5f}"]
            )
        return buf.getvalue()

    def save(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "report.json", "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
        (out / "summary.csv").write_text(self.summary_csv(), encoding="utf-8")
        (out / "samples.csv").write_text(self.samples_csv(), encoding="utf-8")


def evaluate(net, data, cluster_model=None, protocol="simple", meta=None):
    """Forward every sample through its routed head and report errors."""
    if not isinstance(data, TrainArrays):
        data = TrainArrays.from_dataset(data, cluster_model)
    elif cluster_model is not None:
        data = data.with_clusters(cluster_model)
    if data.clusters.max(initial=0) >= net.config.k:
        raise ValueError("cluster ids exceed the net's head count")

    errors = np.zeros(len(data))
    for k in np.unique(data.clusters):
        mask = data.clusters == k
        preds = net.forward_batch(data.x[mask], data.heads[mask], int(k))
        errors[mask] = angular_error(preds.astype(np.float64), data.gaze[mask])
    return EvalReport(
        protocol=protocol,
        ids=list(data.ids),
        subjects=data.subjects.copy(),
        clusters=data.clusters.copy(),
        errors_deg=errors,
        meta=meta or {},
    )


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a training protocol needs for one run."""

    net: nnet.NetConfig = field(default_factory=nnet.NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    cluster_k: int = 7
    cluster_restarts: int = 10
    cluster_max_iter: int = 100
    seed: int = 0

    def meta(self):
        return {
            "k": self.cluster_k,
            "seed": self.seed,
            "config_hash": config_hash(
                {
                    "net": self.net.to_dict(),
                    "train": self.train.__dict__,
                    "cluster_k": self.cluster_k,
                    "cluster_restarts": self.cluster_restarts,
                    "cluster_max_iter": self.cluster_max_iter,
                    "seed": self.seed,
                }
            ),
        }


def _fold_seed(seed, *tags):
    return int(stream(seed, _TAG_FOLD, *tags).integers(0, 2**62))


def _train_and_eval(train_data, test_data, cfg, fold_seed):
    """Fit clusters on train only, train a fresh net, evaluate on test."""
    model = clustering.fit_kmeans(
        train_data.heads.astype(np.float64),
        cfg.cluster_k,
        max_iter=cfg.cluster_max_iter,
        n_restarts=cfg.cluster_restarts,
        seed=fold_seed,
    )
    train_data = train_data.with_clusters(model)
    test_data = test_data.with_clusters(model)
    net = nnet.GazeNet.init(_with_k(cfg.net, cfg.cluster_k), seed=fold_seed)
    tcfg = TrainConfig(**{**cfg.train.__dict__, "seed": fold_seed})
    curve = train_mod.train_epochs(net, train_data, tcfg)
    report = evaluate(net, test_data)
    return net, report, curve


def _with_k(net_cfg, k):
    d = net_cfg.to_dict()
    d["convs"] = tuple(nnet.ConvSpec(*c) for c in d["convs"])
    d["k"] = k
    return nnet.NetConfig(**d)


def _merge_reports(protocol, parts, folds, meta):
    return EvalReport(
        protocol=protocol,
        ids=[i for r in parts for i in r.ids],
        subjects=np.concatenate([r.subjects for r in parts]),
        clusters=np.concatenate([r.clusters for r in parts]),
        errors_deg=np.concatenate([r.errors_deg for r in parts]),
        folds=folds,
        meta=meta,
    )


def loso_protocol(dataset, cfg):
    """Leave-one-subject-out: train on all but one subject, test on it,
    rotate through every subject, and average."""
    data = dataset if isinstance(dataset, TrainArrays) else TrainArrays.from_dataset(dataset)
    subjects = sorted(set(data.subjects))
    if len(subjects) < 2:
        raise ProtocolError("leave-one-subject-out needs at least 2 subjects")

    parts, folds = [], []
    for f, subject in enumerate(subjects):
        test_mask = data.subjects == subject
        _, report, _ = _train_and_eval(
            data.subset(~test_mask), data.subset(test_mask), cfg,
            _fold_seed(cfg.seed, f),
        )
        parts.append(report)
        folds.append(
            {"fold": f, "subject": subject, "count": len(report.errors_deg),
             "mean_error_deg": report.overall_mean}
        )
    return _merge_reports("loso", parts, folds, cfg.meta())


def kfold_subjects_protocol(dataset, folds, repeats, cfg):
    """Split subjects into ``folds`` groups (re-randomized each repeat),
    train on all but one group, test on it."""
    if folds < 2:
        raise ProtocolError("need at least 2 folds")
    data = dataset if isinstance(dataset, TrainArrays) else TrainArrays.from_dataset(dataset)
    subjects = np.array(sorted(set(data.subjects)))
    if len(subjects) < folds:
        raise ProtocolError(f"{folds} folds need at least {folds} subjects")

    parts, fold_rows = [], []
    for rep in range(repeats):
        perm = stream(cfg.seed, _TAG_SPLIT, rep).permutation(len(subjects))
        groups = np.array_split(subjects[perm], folds)
        for f, group in enumerate(groups):
            test_mask = np.isin(data.subjects, group)
            _, report, _ = _train_and_eval(
                data.subset(~test_mask), data.subset(test_mask), cfg,
                _fold_seed(cfg.seed, rep, f),
            )
            parts.append(report)
            fold_rows.append(
                {"repeat": rep, "fold": f, "subjects": sorted(group.tolist()),
                 "count": len(report.errors_deg),
                 "mean_error_deg": report.overall_mean}
            )
    return _merge_reports("kfold-subjects", parts, fold_rows, cfg.meta())


def person_specific_protocol(dataset, cfg, train_frac=0.8):
    """Stratified per-subject split: train on ``train_frac`` of every
    subject's samples, test on the rest."""
    data = dataset if isinstance(dataset, TrainArrays) else TrainArrays.from_dataset(dataset)
    subjects = sorted(set(data.subjects))
    test_idx = []
    for s in subjects:
        idx = np.flatnonzero(data.subjects == s)
        if len(idx) < 5:
            raise ProtocolError(f"subject {s} has only {len(idx)} samples (need >= 5)")
        perm = stream(cfg.seed, _TAG_SPLIT, hash(s) & 0xFFFF).permutation(len(idx))
        n_test = max(1, round(len(idx) * (1 - train_frac)))
        test_idx.extend(idx[perm[:n_test]])
    test_mask = np.zeros(len(data), dtype=bool)
    test_mask[test_idx] = True

    _, report, _ = _train_and_eval(
        data.subset(~test_mask), data.subset(test_mask), cfg,
        _fold_seed(cfg.seed, 0xBEEF),
    )
    report.protocol = "person-specific"
    report.folds = [
        {"fold": 0, "count": len(report.errors_deg),
         "train_frac": train_frac, "mean_error_deg": report.overall_mean}
    ]
    report.meta = cfg.meta()
    return report


def holdout_subjects_protocol(dataset, cfg, test_subjects=2):
    """Hold out ``test_subjects`` whole subjects (seeded), train once."""
    data = dataset if isinstance(dataset, TrainArrays) else TrainArrays.from_dataset(dataset)
    subjects = np.array(sorted(set(data.subjects)))
    if len(subjects) <= test_subjects:
        raise ProtocolError("not enough subjects to hold out")
    perm = stream(cfg.seed, _TAG_SPLIT, 0x48).permutation(len(subjects))
    held = set(subjects[perm[:test_subjects]].tolist())
    test_mask = np.isin(data.subjects, list(held))
    _, report, _ = _train_and_eval(
        data.subset(~test_mask), data.subset(test_mask), cfg,
        _fold_seed(cfg.seed, 0x48),
    )
    report.protocol = "holdout-subjects"
    report.meta = {**cfg.meta(), "test_subjects": sorted(held)}
    return report


ABLATION_CELLS = (
    ("eye", "single"),
    ("eye", "branched"),
    ("eye+pose", "single"),
    ("eye+pose", "branched"),
)


def ablation_grid(dataset, cfg, test_subjects=2):
    """Train/evaluate the four {eye, eye+pose} x {single, branched}
    configurations under one subject-holdout split.

    Returns:
        dict mapping (input, architecture) -> EvalReport, plus a "meta" key.
    """
    data = dataset if isinstance(dataset, TrainArrays) else TrainArrays.from_dataset(dataset)
    subjects = np.array(sorted(set(data.subjects)))
    if len(subjects) <= test_subjects:
        raise ProtocolError("not enough subjects to hold out")
    perm = stream(cfg.seed, _TAG_SPLIT, 0xAB).permutation(len(subjects))
    held = set(subjects[perm[:test_subjects]].tolist())
    test_mask = np.isin(data.subjects, list(held))
    train_data, test_data = data.subset(~test_mask), data.subset(test_mask)

    grid = {}
    for pose_input in (False, True):
        for branched in (False, True):
            cell_cfg = ExperimentConfig(
                net=_with_pose(cfg.net, pose_input),
                train=cfg.train,
                cluster_k=cfg.cluster_k if branched else 1,
                cluster_restarts=cfg.cluster_restarts,
                cluster_max_iter=cfg.cluster_max_iter,
                seed=cfg.seed,
            )
            _, report, _ = _train_and_eval(
                train_data, test_data, cell_cfg,
                _fold_seed(cfg.seed, 0xAB, int(pose_input), int(branched)),
            )
            key = ("eye+pose" if pose_input else "eye",
                   "branched" if branched else "single")
            report.protocol = f"ablation:{key[0]}/{key[1]}"
            report.meta = {"k": cell_cfg.cluster_k, "pose_input": pose_input}
            grid[key] = report
    grid["meta"] = {**cfg.meta(), "test_subjects": sorted(held)}
    return grid


def _with_pose(net_cfg, pose_input):
    d = net_cfg.to_dict()
    d["convs"] = tuple(nnet.ConvSpec(*c) for c in d["convs"])
    d["head_pose_input"] = pose_input
    return nnet.NetConfig(**d)


def grid_to_csv(grid):
    """Table-shaped CSV: inputs x {single, branched} mean errors."""
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["input", "fc7-8", "mean_error_deg", "count"])
    for key in ABLATION_CELLS:
        report = grid[key]
        writer.writerow(
            [key[0], key[1], f"{report.overall_mean:.4f}", len(report.errors_deg)]
        )
    return buf.getvalue()
