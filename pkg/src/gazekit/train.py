"""Routing-aware training loop, losses, optimizers and dataset targeting.

Mini-batches are shuffled per epoch, then split by cluster id into
sub-batches; each sub-batch runs through its own head, gradients are
accumulated (weighted by sub-batch fraction) into one step, so the update
equals the gradient of the mean loss over the whole batch and does not
depend on cluster composition order.  The optimizer only ever touches
parameters that received a gradient -- heads outside the batch keep both
their weights and their optimizer state.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import dataio, nnet
from .geometry import angles_to_vec, angular_error
from .rngs import stream

_TAG_SHUFFLE = 0x7A
_TAG_TARGET = 0x7B


class TrainingError(Exception):
    pass


class TargetingError(Exception):
    pass


@dataclass(frozen=True)
class FinetuneSpec:
    donor: str | None = None  # model file to transfer weights from
    freeze_trunk: bool = False
    lr_scale: float = 0.1
    epochs: int | None = None  # defaults to the main epoch count


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"  # adam | sgd
    learning_rate: float = 1e-3
    momentum: float = 0.9  # sgd momentum / adam beta1
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    epochs: int = 10
    seed: int = 0
    loss: str = "mse-radians"  # mse-radians | angular
    lr_schedule: str = "constant"  # constant | step
    lr_step_every: int = 10
    lr_step_gamma: float = 0.1
    finetune: FinetuneSpec | None = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.loss not in ("mse-radians", "angular"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.lr_schedule not in ("constant", "step"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")


def loss(pred, target, kind="mse-radians"):
    """Scalar training loss for (N, 2) or (2,) predictions."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if kind == "mse-radians":
        return float(np.mean((pred - target) ** 2))
    if kind == "angular":
        va = angles_to_vec(pred)
        vb = angles_to_vec(target)
        return float(np.mean(1.0 - np.sum(va * vb, axis=-1)))
    raise ValueError(f"unknown loss {kind!r}")


def loss_and_grad(pred, target, kind="mse-radians"):
    """(loss, dloss/dpred) with the mean taken over all components."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    n = pred.shape[0]
    if kind == "mse-radians":
        diff = pred - target
        return float(np.mean(diff**2)), diff / n
    if kind == "angular":
        p, y = pred[:, 0], pred[:, 1]
        va = angles_to_vec(pred)
        vb = angles_to_vec(target)
        dva_dp = np.stack([np.sin(p) * np.sin(y), -np.cos(p), np.sin(p) * np.cos(y)], axis=1)
        dva_dy = np.stack([-np.cos(p) * np.cos(y), np.zeros_like(p), np.cos(p) * np.sin(y)], axis=1)
        val = float(np.mean(1.0 - np.sum(va * vb, axis=-1)))
        grad = np.stack(
            [-np.sum(dva_dp * vb, axis=1), -np.sum(dva_dy * vb, axis=1)], axis=1
        ) / n
        return val, grad
    raise ValueError(f"unknown loss {kind!r}")


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, {}

    def step(self, params, grads, lr_scale=1.0):
        for name in sorted(grads):
            g = grads[name].astype(params[name].dtype)
            if name not in self.m:
                self.m[name] = np.zeros_like(params[name])
                self.v[name] = np.zeros_like(params[name])
                self.t[name] = 0
            self.t[name] += 1
            t = self.t[name]
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            mhat = self.m[name] / (1 - self.beta1**t)
            vhat = self.v[name] / (1 - self.beta2**t)
            params[name] -= (self.lr * lr_scale) * mhat / (np.sqrt(vhat) + self.eps)


class SGDMomentum:
    def __init__(self, lr, momentum=0.9):
        self.lr, self.momentum = lr, momentum
        self.vel = {}

    def step(self, params, grads, lr_scale=1.0):
        for name in sorted(grads):
            g = grads[name].astype(params[name].dtype)
            if name not in self.vel:
                self.vel[name] = np.zeros_like(params[name])
            self.vel[name] = self.momentum * self.vel[name] + g
            params[name] -= (self.lr * lr_scale) * self.vel[name]


def make_optimizer(cfg):
    if cfg.optimizer == "adam":
        return Adam(cfg.learning_rate, cfg.momentum, cfg.beta2, cfg.eps)
    return SGDMomentum(cfg.learning_rate, cfg.momentum)


@dataclass
class TrainArrays:
    """Dataset materialized for training: images as net inputs plus labels."""

    x: np.ndarray  # (N, C, H, W) float32 in [-0.5, 0.5]
    heads: np.ndarray  # (N, 2) float32 radians
    gaze: np.ndarray  # (N, 2) float32 radians
    clusters: np.ndarray  # (N,) int
    subjects: np.ndarray  # (N,) str
    ids: list = field(default_factory=list)

    def __len__(self):
        return len(self.x)

    @classmethod
    def from_dataset(cls, ds, cluster_model=None):
        """Load a dataio.Dataset; cluster ids come from the samples when
        present, otherwise from ``cluster_model`` (or all zero)."""
        imgs = ds.load_images()
        if imgs.ndim == 3:
            x = imgs[:, None].astype(np.float32) / 255.0 - 0.5
        else:
            x = imgs.transpose(0, 3, 1, 2).astype(np.float32) / 255.0 - 0.5
        heads = ds.heads()
        stored = [s.cluster for s in ds.samples]
        if all(c is not None for c in stored) and len(stored) > 0:
            clusters = np.array(stored, dtype=np.int64)
        elif cluster_model is not None:
            clusters = cluster_model.assign(heads).astype(np.int64)
        else:
            clusters = np.zeros(len(ds), dtype=np.int64)
        return cls(
            x=x,
            heads=heads.astype(np.float32),
            gaze=ds.gazes().astype(np.float32),
            clusters=clusters,
            subjects=ds.subjects(),
            ids=[s.id for s in ds.samples],
        )

    def subset(self, mask):
        idx = np.flatnonzero(mask) if mask.dtype == bool else np.asarray(mask)
        return TrainArrays(
            x=self.x[idx],
            heads=self.heads[idx],
            gaze=self.gaze[idx],
            clusters=self.clusters[idx],
            subjects=self.subjects[idx],
            ids=[self.ids[i] for i in idx],
        )

    def with_clusters(self, cluster_model):
        out = TrainArrays(**{**self.__dict__})
        out.clusters = cluster_model.assign(self.heads.astype(np.float64)).astype(np.int64)
        return out


def _lr_scale(cfg, epoch):
    if cfg.lr_schedule == "step":
        return cfg.lr_step_gamma ** (epoch // cfg.lr_step_every)
    return 1.0


def train_epochs(net, data, cfg, update_counters=None, lr_scale=1.0,
                 freeze_trunk=False, curve_split="train"):
    """Optimize ``net`` in place over ``cfg.epochs`` epochs.

    Args:
        net: GazeNet (mutated).
        data: TrainArrays or dataio.Dataset (cluster ids must be valid
            for the net's head count).
        cfg: TrainConfig.
        update_counters: optional dict collecting per-parameter update counts.
        lr_scale: extra multiplier on the schedule (fine-tuning).
        freeze_trunk: drop trunk gradients before each step.
        curve_split: label written into the returned loss-curve rows.

    Returns:
        loss curve: list of {"epoch", "split", "loss", "angular_error_deg"}.

    Raises:
        TrainingError: non-finite loss, with the offending batch index.
    """
    if isinstance(data, dataio.Dataset):
        data = TrainArrays.from_dataset(data)
    if len(data) == 0:
        return []
    if data.clusters.max(initial=0) >= net.config.k:
        raise ValueError("cluster ids exceed the net's head count")
    if data.x.shape[1:] != (net.config.input_channels, net.config.input_h, net.config.input_w):
        raise ValueError(
            f"dataset images {data.x.shape[1:]} do not match net input "
            f"({net.config.input_channels}, {net.config.input_h}, {net.config.input_w})"
        )

    opt = make_optimizer(cfg)
    trunk = set(net.config.trunk_names())
    n = len(data)
    curve = []
    for epoch in range(cfg.epochs):
        order = stream(cfg.seed, _TAG_SHUFFLE, epoch).permutation(n)
        scale = _lr_scale(cfg, epoch) * lr_scale
        loss_sum = 0.0
        err_sum = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            grads = {}
            batch_loss = 0.0
            for k in np.unique(data.clusters[idx]):
                sub = idx[data.clusters[idx] == k]
                out, cache = net.forward_batch(
                    data.x[sub], data.heads[sub], int(k), want_cache=True
                )
                sub_loss, dout = loss_and_grad(out, data.gaze[sub], cfg.loss)
                weight = len(sub) / len(idx)
                for name, g in net.backward_batch(cache, dout).items():
                    grads[name] = grads.get(name, 0.0) + weight * g
                batch_loss += sub_loss * len(sub)
                err_sum += float(
                    np.sum(angular_error(out.astype(np.float64), data.gaze[sub]))
                )
            if not np.isfinite(batch_loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} batch {b}; aborting"
                )
            if freeze_trunk:
                grads = {k_: v for k_, v in grads.items() if k_ not in trunk}
            if update_counters is not None:
                for name in grads:
                    update_counters[name] = update_counters.get(name, 0) + 1
            opt.step(net.params, grads, scale)
            loss_sum += batch_loss
        curve.append(
            {
                "epoch": epoch,
                "split": curve_split,
                "loss": loss_sum / n,
                "angular_error_deg": err_sum / n,
            }
        )
    return curve


def pretrain_finetune(net, synth_data, real_data, cfg):
    """Train on synthetic data, snapshot, then fine-tune on real data.

    The fine-tune stage uses ``cfg.finetune`` (lr scale, epoch count,
    trunk freezing); defaults apply when absent.

    Returns:
        (net, curves, pretrained) where curves is the concatenated loss
        curve (splits "pretrain" and "finetune") and ``pretrained`` is a
        copy of the net taken between the stages.
    """
    ft = cfg.finetune or FinetuneSpec()
    curves = train_epochs(net, synth_data, cfg, curve_split="pretrain")
    pretrained = nnet.GazeNet(
        net.config, {k: v.copy() for k, v in net.params.items()}, net.dtype
    )
    ft_epochs = ft.epochs if ft.epochs is not None else cfg.epochs
    ft_cfg = TrainConfig(
        **{
            **cfg.__dict__,
            "epochs": ft_epochs,
            "seed": cfg.seed + 1,
            "finetune": None,
        }
    )
    curves += train_epochs(
        net, real_data, ft_cfg,
        lr_scale=ft.lr_scale, freeze_trunk=ft.freeze_trunk,
        curve_split="finetune",
    )
    return net, curves, pretrained


def curve_to_csv(curve):
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["epoch", "split", "loss", "angular_error_deg"])
    for row in curve:
        writer.writerow(
            [row["epoch"], row["split"], f"{row['loss']:.8f}",
             f"{row['angular_error_deg']:.5f}"]
        )
    return buf.getvalue()


@dataclass(frozen=True)
class TargetingSpec:
    bin_deg: float = 5.0
    joint_gaze: bool = False  # bin over (head, gaze) jointly instead of head only
    max_keep_ratio: float = 1.0

    def __post_init__(self):
        if self.bin_deg <= 0:
            raise ValueError("bin_deg must be positive")
        if not 0 < self.max_keep_ratio <= 1:
            raise ValueError("max_keep_ratio must be in (0, 1]")


def _features_deg(heads, gazes, joint):
    h = np.degrees(np.asarray(heads, dtype=np.float64))
    if not joint:
        return h
    return np.hstack([h, np.degrees(np.asarray(gazes, dtype=np.float64))])


def _bin_edges(lo, hi, width):
    start = np.floor(lo / width) * width
    stop = np.ceil(hi / width) * width
    if stop <= start:
        stop = start + width
    return np.arange(start, stop + width / 2, width)


def _histogram(feats, edges):
    hist, _ = np.histogramdd(feats, bins=edges)
    return hist


def chi2_distance(h1, h2):
    """Chi-squared distance between two (normalized) histograms."""
    a = np.asarray(h1, dtype=np.float64).ravel()
    b = np.asarray(h2, dtype=np.float64).ravel()
    a = a / a.sum()
    b = b / b.sum()
    mask = (a + b) > 0
    return float(np.sum((a[mask] - b[mask]) ** 2 / (a[mask] + b[mask])))


def targeting_keep_probs(source_feats, target_feats, spec):
    """Per-source-sample keep probabilities for histogram matching.

    keep(bin) is proportional to target_density/source_density, scaled so
    the densest-matched bin (the largest ratio) keeps ``max_keep_ratio``;
    the expected kept histogram is then proportional to the target's.
    Bins without target mass keep nothing.
    """
    dims = source_feats.shape[1]
    edges = [
        _bin_edges(
            min(source_feats[:, d].min(), target_feats[:, d].min()),
            max(source_feats[:, d].max(), target_feats[:, d].max()),
            spec.bin_deg,
        )
        for d in range(dims)
    ]
    hs = _histogram(source_feats, edges)
    ht = _histogram(target_feats, edges)
    ds = hs / hs.sum()
    dt = ht / ht.sum()
    ratio = np.zeros_like(ds)
    occupied = ds > 0
    if not np.any(occupied & (dt > 0)):
        raise TargetingError("source and target histograms have disjoint supports")
    ratio[occupied] = dt[occupied] / ds[occupied]
    # the normalizing "densest-matched bin" is taken over bins with enough
    # source mass for a stable ratio estimate; sparser bins just clamp at 1
    reliable = (hs >= 5) & (ht > 0)
    if not np.any(reliable):
        reliable = occupied & (ht > 0)
    probs = np.minimum(1.0, spec.max_keep_ratio * ratio / ratio[reliable].max())

    # map each source sample to its bin's keep probability
    bin_ids = [
        np.clip(np.digitize(source_feats[:, d], edges[d]) - 1, 0, len(edges[d]) - 2)
        for d in range(dims)
    ]
    return probs[tuple(bin_ids)], (hs, ht, edges)


def target_dataset(source, spec, reference, seed, out_root):
    """Rejection-subsample ``source`` to match ``reference``'s distribution.

    Args:
        source: dataio.Dataset to subsample.
        spec: TargetingSpec (binning, joint gaze matching, keep ratio).
        reference: dataio.Dataset providing the target histogram.
        seed: Bernoulli draws come from a stream keyed by this seed.
        out_root: directory for the new container.

    Returns:
        (Dataset, info dict with pre/post chi-squared distances).
    """
    if len(source) == 0:
        raise TargetingError("source dataset is empty")
    sf = _features_deg(source.heads(), source.gazes(), spec.joint_gaze)
    tf = _features_deg(reference.heads(), reference.gazes(), spec.joint_gaze)
    probs, (hs, ht, edges) = targeting_keep_probs(sf, tf, spec)

    u = stream(seed, _TAG_TARGET).random(len(source))
    keep = u < probs
    if not np.any(keep):
        raise TargetingError("targeting kept no samples; widen bins or keep ratio")

    kept_samples = [s for s, k in zip(source.samples, keep) if k]
    samples = [dataio.Sample(**s.__dict__) for s in kept_samples]
    images = [source.load_image(s) for s in kept_samples]
    out = dataio.write_dataset(samples, images, out_root)

    hk = _histogram(sf[keep], edges)
    info = {
        "kept": int(keep.sum()),
        "total": len(source),
        "chi2_before": chi2_distance(hs, ht),
        "chi2_after": chi2_distance(hk, ht),
    }
    return out, info
