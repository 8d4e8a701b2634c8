"""Command-line entry point.

Subcommands: synth, cluster, target, train, eval, stats, infer.  Each run
takes a JSON config document (sections: seed, synth, cluster, net, train,
targeting, eval, paths), writes its outputs plus the fully resolved
config and seed into a run directory, and exits non-zero on any error.
Unknown config keys are rejected.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import clustering, dataio, evaluation, nnet, synth, train as train_mod
from .geometry import angles_to_vec  # noqa: F401  (re-exported convenience)


class ConfigError(Exception):
    pass


_SECTIONS = ("seed", "synth", "cluster", "net", "train", "targeting", "eval", "paths")
_CLUSTER_KEYS = {"k", "restarts", "max_iter", "sweep", "fixed_centroids_deg"}
_EVAL_KEYS = {"protocol", "folds", "repeats", "train_frac", "test_subjects"}
_PATH_KEYS = {"dataset", "reference", "cluster_model", "model"}


def _check_keys(section, known, where):
    unknown = sorted(set(section) - set(known))
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {unknown}")


def _dataclass_from(cls, section, where, **extra):
    known = {f.name for f in dataclasses.fields(cls)}
    _check_keys(section, known, where)
    try:
        return cls(**{**section, **extra})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {where} section: {exc}") from exc


class RunConfig:
    """Parsed and validated config document."""

    def __init__(self, doc, seed_override=None):
        _check_keys(doc, _SECTIONS, "config")
        self.seed = int(seed_override if seed_override is not None else doc.get("seed", 0))
        self.doc = doc
        self.paths = doc.get("paths", {})
        _check_keys(self.paths, _PATH_KEYS, "paths")
        self.cluster_section = doc.get("cluster", {})
        _check_keys(self.cluster_section, _CLUSTER_KEYS, "cluster")
        self.eval_section = doc.get("eval", {})
        _check_keys(self.eval_section, _EVAL_KEYS, "eval")

    def synth_config(self):
        section = dict(self.doc.get("synth", {}))
        section.setdefault("seed", self.seed)
        return _dataclass_from(synth.SynthConfig, section, "synth")

    def net_config(self, k=None):
        section = dict(self.doc.get("net", {}))
        name = section.pop("preset", "reduced")
        if "convs" in section:
            section["convs"] = tuple(nnet.ConvSpec(*c) for c in section["convs"])
        known = {f.name for f in dataclasses.fields(nnet.NetConfig)}
        _check_keys(section, known, "net")
        if k is not None:
            section["k"] = k
        try:
            return nnet.preset(name, **section)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad net section: {exc}") from exc

    def train_config(self):
        section = dict(self.doc.get("train", {}))
        ft = section.pop("finetune", None)
        if ft is not None:
            ft = _dataclass_from(train_mod.FinetuneSpec, ft, "train.finetune")
        section.setdefault("seed", self.seed)
        return _dataclass_from(train_mod.TrainConfig, section, "train", finetune=ft)

    def targeting_spec(self):
        return _dataclass_from(
            train_mod.TargetingSpec, self.doc.get("targeting", {}), "targeting"
        )

    def experiment_config(self):
        return evaluation.ExperimentConfig(
            net=self.net_config(),
            train=self.train_config(),
            cluster_k=int(self.cluster_section.get("k", 7)),
            cluster_restarts=int(self.cluster_section.get("restarts", 10)),
            cluster_max_iter=int(self.cluster_section.get("max_iter", 100)),
            seed=self.seed,
        )

    def path(self, name, required=True):
        p = self.paths.get(name)
        if p is None and required:
            raise ConfigError(f"config paths.{name} is required for this command")
        return Path(p) if p is not None else None

    def resolved(self):
        out = dict(self.doc)
        out["seed"] = self.seed
        if "synth" in out:
            out["synth"] = dataclasses.asdict(self.synth_config())
        if "train" in out:
            tc = self.train_config()
            out["train"] = {
                **{k: v for k, v in tc.__dict__.items() if k != "finetune"},
                "finetune": dataclasses.asdict(tc.finetune) if tc.finetune else None,
            }
        if "net" in out:
            resolved_net = self.net_config().to_dict()
            resolved_net["preset"] = out["net"].get("preset", "reduced")
            out["net"] = resolved_net
        return out


def _load_config(path, seed_override=None):
    try:
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}")
    return RunConfig(doc, seed_override)


def _run_dir(args, command):
    if args.out:
        path = Path(args.out)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        path = Path("runs") / f"{command}-{stamp}-{os.getpid()}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_resolved(cfg, out_dir):
    with open(out_dir / "resolved_config.json", "w", encoding="utf-8") as f:
        json.dump(cfg.resolved(), f, indent=2, sort_keys=True)


def _apply_threads(n):
    if n is None:
        return
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(limits=n)
    except ImportError:
        os.environ["OMP_NUM_THREADS"] = str(n)
        print("threadpoolctl unavailable; set OMP_NUM_THREADS for future imports",
              file=sys.stderr)


def cmd_synth(args):
    cfg = _load_config(args.config, args.seed)
    out = _run_dir(args, "synth")
    ds, stats = synth.generate_dataset(cfg.synth_config(), out / "dataset")
    with open(out / "generation.json", "w", encoding="utf-8") as f:
        json.dump(stats, f, indent=2, sort_keys=True)
    _write_resolved(cfg, out)
    print(f"wrote {len(ds)} samples to {ds.root}")
    return 0


def cmd_cluster(args):
    cfg = _load_config(args.config, args.seed)
    out = _run_dir(args, "cluster")
    ds = dataio.read_dataset(cfg.path("dataset"))
    heads = ds.heads()
    section = cfg.cluster_section

    fixed = section.get("fixed_centroids_deg")
    if fixed is not None:
        model = clustering.ClusterModel.from_angles(np.radians(np.asarray(fixed, float)))
    else:
        k = int(section.get("k", 7))
        model = clustering.fit_kmeans(
            heads, k,
            max_iter=int(section.get("max_iter", 100)),
            n_restarts=int(section.get("restarts", 10)),
            seed=cfg.seed,
        )
    model.save(out / "cluster_model.json")

    sweep = section.get("sweep")
    if sweep:
        rows = ["k,objective"]
        for k in sweep:
            m = clustering.fit_kmeans(
                heads, int(k),
                max_iter=int(section.get("max_iter", 100)),
                n_restarts=int(section.get("restarts", 10)),
                seed=cfg.seed,
            )
            rows.append(f"{k},{m.objective(heads):.6f}")
        (out / "sweep.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    _write_resolved(cfg, out)
    print(f"wrote cluster model (k={model.k}) to {out / 'cluster_model.json'}")
    return 0


def cmd_target(args):
    cfg = _load_config(args.config, args.seed)
    out = _run_dir(args, "target")
    source = dataio.read_dataset(cfg.path("dataset"))
    reference = dataio.read_dataset(cfg.path("reference"))
    ds, info = train_mod.target_dataset(
        source, cfg.targeting_spec(), reference, cfg.seed, out / "dataset"
    )
    with open(out / "targeting.json", "w", encoding="utf-8") as f:
        json.dump(info, f, indent=2, sort_keys=True)
    _write_resolved(cfg, out)
    print(f"kept {info['kept']}/{info['total']} samples; "
          f"chi2 {info['chi2_before']:.4f} -> {info['chi2_after']:.4f}")
    return 0


def cmd_train(args):
    cfg = _load_config(args.config, args.seed)
    out = _run_dir(args, "train")
    ds = dataio.read_dataset(cfg.path("dataset"))
    model = clustering.ClusterModel.load(cfg.path("cluster_model"))
    tcfg = cfg.train_config()

    net = nnet.GazeNet.init(cfg.net_config(k=model.k), seed=cfg.seed)
    lr_scale, freeze = 1.0, False
    if tcfg.finetune and tcfg.finetune.donor:
        report = nnet.partial_load(net, tcfg.finetune.donor)
        lr_scale, freeze = tcfg.finetune.lr_scale, tcfg.finetune.freeze_trunk
        print(f"transfer: {len(report.transferred)} tensors, "
              f"{len(report.skipped)} shape-skipped, {len(report.unmatched)} unmatched")

    data = train_mod.TrainArrays.from_dataset(ds, model)
    curve = train_mod.train_epochs(net, data, tcfg, lr_scale=lr_scale, freeze_trunk=freeze)
    nnet.save(net, out / "model.bin")
    (out / "curve.csv").write_text(train_mod.curve_to_csv(curve), encoding="utf-8")
    _write_resolved(cfg, out)
    final = curve[-1] if curve else {"loss": float("nan"), "angular_error_deg": float("nan")}
    print(f"trained {tcfg.epochs} epochs; final loss {final['loss']:.6f} "
          f"({final['angular_error_deg']:.2f} deg); model at {out / 'model.bin'}")
    return 0


def cmd_eval(args):
    cfg = _load_config(args.config, args.seed)
    out = _run_dir(args, "eval")
    ds = dataio.read_dataset(cfg.path("dataset"))
    section = cfg.eval_section
    protocol = section.get("protocol", "simple")

    if protocol == "simple":
        net = nnet.load(cfg.path("model"))
        model = clustering.ClusterModel.load(cfg.path("cluster_model"))
        report = evaluation.evaluate(net, ds, model, meta={"seed": cfg.seed})
        report.save(out)
    elif protocol == "ablation":
        grid = evaluation.ablation_grid(
            ds, cfg.experiment_config(),
            test_subjects=int(section.get("test_subjects", 2)),
        )
        (out / "grid.csv").write_text(evaluation.grid_to_csv(grid), encoding="utf-8")
        with open(out / "grid.json", "w", encoding="utf-8") as f:
            json.dump(
                {f"{a}/{b}": grid[(a, b)].overall_mean
                 for a, b in evaluation.ABLATION_CELLS} | {"meta": grid["meta"]},
                f, indent=2, sort_keys=True,
            )
    else:
        ecfg = cfg.experiment_config()
        if protocol == "loso":
            report = evaluation.loso_protocol(ds, ecfg)
        elif protocol == "kfold":
            report = evaluation.kfold_subjects_protocol(
                ds, int(section.get("folds", 3)), int(section.get("repeats", 3)), ecfg
            )
        elif protocol == "person":
            report = evaluation.person_specific_protocol(
                ds, ecfg, train_frac=float(section.get("train_frac", 0.8))
            )
        elif protocol == "holdout":
            report = evaluation.holdout_subjects_protocol(
                ds, ecfg, test_subjects=int(section.get("test_subjects", 2))
            )
        else:
            raise ConfigError(f"unknown eval protocol {protocol!r}")
        report.save(out)
    _write_resolved(cfg, out)
    print(f"evaluation ({protocol}) written to {out}")
    return 0


def cmd_stats(args):
    cfg = _load_config(args.config, args.seed)
    out = _run_dir(args, "stats")
    ds = dataio.read_dataset(cfg.path("dataset"))
    model_path = cfg.path("cluster_model", required=False)
    if model_path is not None:
        model = clustering.ClusterModel.load(model_path)
    else:
        model = clustering.fit_kmeans(
            ds.heads(), int(cfg.cluster_section.get("k", 7)),
            max_iter=int(cfg.cluster_section.get("max_iter", 100)),
            n_restarts=int(cfg.cluster_section.get("restarts", 10)),
            seed=cfg.seed,
        )
        model.save(out / "cluster_model.json")
    stats = clustering.cluster_stats(model, ds)
    (out / "stats.csv").write_text(clustering.stats_to_csv(stats), encoding="utf-8")
    (out / "stats.json").write_text(clustering.stats_to_json(stats), encoding="utf-8")
    _write_resolved(cfg, out)
    print(f"cluster stats for k={model.k} written to {out}")
    return 0


def cmd_infer(args):
    net = nnet.load(args.model)
    img = dataio.netpbm.read_image(args.image)
    head = np.array([args.head_pitch, args.head_yaw], dtype=np.float64)
    if args.cluster is not None:
        cluster = int(args.cluster)
    elif args.clusters:
        cluster = int(clustering.ClusterModel.load(args.clusters).assign(head))
    else:
        cluster = 0
    x = nnet.image_to_input(img)
    pred = net.forward(x, head, cluster)
    print(json.dumps(
        {
            "pitch_rad": float(pred[0]),
            "yaw_rad": float(pred[1]),
            "pitch_deg": float(np.degrees(pred[0])),
            "yaw_deg": float(np.degrees(pred[1])),
            "cluster": cluster,
        },
        sort_keys=True,
    ))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="gazekit",
        description="Branched gaze-estimation toolkit: synthesize data, cluster "
                    "head poses, train and evaluate gaze networks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, help="JSON config document")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="run directory (default: runs/<cmd>-<stamp>)")
        p.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")

    for name, fn, help_ in [
        ("synth", cmd_synth, "generate a procedural synthetic dataset"),
        ("cluster", cmd_cluster, "fit or inspect a head-pose cluster model"),
        ("target", cmd_target, "subsample a dataset to match a reference distribution"),
        ("train", cmd_train, "train a gaze network"),
        ("eval", cmd_eval, "evaluate a model or run a training protocol"),
        ("stats", cmd_stats, "per-cluster gaze distribution statistics"),
    ]:
        p = sub.add_parser(name, help=help_)
        common(p)
        p.set_defaults(fn=fn)

    p = sub.add_parser("infer", help="predict gaze for one image + head pose")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True, help="PGM/PPM eye image")
    p.add_argument("--head-pitch", type=float, required=True, help="radians")
    p.add_argument("--head-yaw", type=float, required=True, help="radians")
    p.add_argument("--cluster", type=int, default=None, help="explicit cluster id")
    p.add_argument("--clusters", default=None, help="cluster model JSON to assign from head pose")
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(fn=cmd_infer)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    _apply_threads(getattr(args, "threads", None))
    try:
        return args.fn(args)
    except (ConfigError, dataio.DatasetError, nnet.FormatError, synth.ConfigError,
            train_mod.TrainingError, train_mod.TargetingError,
            evaluation.ProtocolError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
