"""Branched gaze network.

A five-stage convolutional trunk (conv1..conv5, each ReLU), max pooling
and a fully connected fc6 layer are shared across all head-pose clusters.
Each cluster owns one (fc7, fc8) pair; an input is routed through exactly
one pair, selected by its cluster id, so per-input compute does not grow
with the number of clusters.  Optionally the head pitch/yaw pair is
concatenated to the fc7 activation before fc8, and a skip path projects
globally average-pooled conv3 features into the fc6 pre-activation.

Parameters live in a flat name -> array store (float32 by default,
float64 available for gradient checking).  Forward/backward are explicit;
the convolution and pooling inner loops run on the selected kernels
backend.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .rngs import stream

MODEL_FORMAT = "gazekit-model"
MODEL_VERSION = 1


class FormatError(Exception):
    """Malformed model or container file."""


@dataclass(frozen=True)
class ConvSpec:
    kernel: int
    channels: int
    stride: int = 1
    pad: int = 0


@dataclass(frozen=True)
class NetConfig:
    input_w: int = 64
    input_h: int = 40
    input_channels: int = 1
    convs: tuple = (
        ConvSpec(7, 32, 2, 3),
        ConvSpec(5, 64, 2, 2),
        ConvSpec(3, 96, 1, 1),
        ConvSpec(3, 96, 1, 1),
        ConvSpec(3, 64, 1, 1),
    )
    pool: int = 2
    pool_stride: int = 2
    fc6: int = 128
    fc7: int = 64
    k: int = 7
    use_skip: bool = True
    head_pose_input: bool = True

    def __post_init__(self):
        if len(self.convs) != 5:
            raise ValueError(f"exactly 5 conv stages required, got {len(self.convs)}")
        if self.k < 1:
            raise ValueError("need at least one head")
        self.feature_shapes()  # raises if any spatial dim collapses

    def feature_shapes(self):
        """(C, H, W) after each conv stage and after pooling."""
        c, h, w = self.input_channels, self.input_h, self.input_w
        shapes = []
        for cs in self.convs:
            h = (h + 2 * cs.pad - cs.kernel) // cs.stride + 1
            w = (w + 2 * cs.pad - cs.kernel) // cs.stride + 1
            c = cs.channels
            if h < 1 or w < 1:
                raise ValueError("spatial dims collapse to zero in the conv stack")
            shapes.append((c, h, w))
        h = (h - self.pool) // self.pool_stride + 1
        w = (w - self.pool) // self.pool_stride + 1
        if h < 1 or w < 1:
            raise ValueError("spatial dims collapse to zero at the pooling stage")
        shapes.append((c, h, w))
        return shapes

    @property
    def fc6_in(self):
        c, h, w = self.feature_shapes()[-1]
        return c * h * w

    @property
    def fc8_in(self):
        return self.fc7 + (2 if self.head_pose_input else 0)

    def param_shapes(self):
        """Ordered dict of parameter name -> shape."""
        shapes = {}
        ci = self.input_channels
        for i, cs in enumerate(self.convs, start=1):
            shapes[f"conv{i}.w"] = (cs.channels, ci, cs.kernel, cs.kernel)
            shapes[f"conv{i}.b"] = (cs.channels,)
            ci = cs.channels
        shapes["fc6.w"] = (self.fc6_in, self.fc6)
        shapes["fc6.b"] = (self.fc6,)
        if self.use_skip:
            shapes["skip.w"] = (self.convs[2].channels, self.fc6)
        for k in range(self.k):
            shapes[f"fc7.{k}.w"] = (self.fc6, self.fc7)
            shapes[f"fc7.{k}.b"] = (self.fc7,)
            shapes[f"fc8.{k}.w"] = (self.fc8_in, 2)
            shapes[f"fc8.{k}.b"] = (2,)
        return shapes

    def trunk_names(self):
        return [n for n in self.param_shapes() if not n.startswith(("fc7.", "fc8."))]

    def head_names(self, k):
        return [f"fc7.{k}.w", f"fc7.{k}.b", f"fc8.{k}.w", f"fc8.{k}.b"]

    def flop_count(self):
        """Multiply-accumulate count of one forward pass (trunk + one head)."""
        macs = 0
        ci = self.input_channels
        for (c, h, w), cs in zip(self.feature_shapes()[:-1], self.convs):
            macs += h * w * c * ci * cs.kernel * cs.kernel
            ci = c
        macs += self.fc6_in * self.fc6
        if self.use_skip:
            macs += self.convs[2].channels * self.fc6
        macs += self.fc6 * self.fc7
        macs += self.fc8_in * 2
        return macs

    def to_dict(self):
        d = asdict(self)
        d["convs"] = [list(asdict(cs).values()) for cs in self.convs]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["convs"] = tuple(ConvSpec(*cs) for cs in d["convs"])
        return cls(**d)


def preset(name, **overrides):
    """Named architecture presets; keyword overrides are applied on top.

    ``reduced`` is the default desk-scale net, ``slim`` a smaller/faster
    variant for 32x20 inputs, ``alexnet-like`` a full-scale configuration
    (exact dimensions of the original are not published, so this preset is
    an approximation).
    """
    presets = {
        "reduced": {},
        "slim": dict(
            input_w=32,
            input_h=20,
            convs=(
                ConvSpec(5, 16, 2, 2),
                ConvSpec(3, 32, 2, 1),
                ConvSpec(3, 32, 1, 1),
                ConvSpec(3, 32, 1, 1),
                ConvSpec(3, 32, 1, 1),
            ),
            fc6=64,
            fc7=32,
        ),
        "alexnet-like": dict(
            input_w=134,
            input_h=80,
            input_channels=3,
            convs=(
                ConvSpec(11, 96, 4, 5),
                ConvSpec(5, 256, 1, 2),
                ConvSpec(3, 384, 1, 1),
                ConvSpec(3, 384, 1, 1),
                ConvSpec(3, 256, 1, 1),
            ),
            pool=3,
            pool_stride=2,
            fc6=4096,
            fc7=1024,
        ),
    }
    if name not in presets:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(presets)}")
    cfg = dict(presets[name])
    cfg.update(overrides)
    return NetConfig(**cfg)


def _relu(z):
    return np.maximum(z, 0)


class GazeNet:
    """Parameter store plus forward/backward for the branched architecture."""

    def __init__(self, config, params, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params = params

    @classmethod
    def init(cls, config, seed=0, dtype=np.float32):
        """He-uniform weights, zero biases, drawn from a seeded stream."""
        rng = stream(seed, 0x4E45)
        params = {}
        for name, shape in config.param_shapes().items():
            if name.endswith(".b"):
                params[name] = np.zeros(shape, dtype=dtype)
            else:
                if name.startswith("conv"):
                    fan_in = shape[1] * shape[2] * shape[3]
                else:
                    fan_in = shape[0]
                limit = np.sqrt(6.0 / fan_in)
                params[name] = rng.uniform(-limit, limit, size=shape).astype(dtype)
        return cls(config, params, dtype)

    def astype(self, dtype):
        return GazeNet(
            self.config,
            {n: p.astype(dtype) for n, p in self.params.items()},
            dtype,
        )

    def _check_batch(self, x, heads, cluster_id):
        cfg = self.config
        if x.ndim != 4 or x.shape[1:] != (cfg.input_channels, cfg.input_h, cfg.input_w):
            raise ValueError(
                f"input shape {x.shape} does not match config "
                f"(N, {cfg.input_channels}, {cfg.input_h}, {cfg.input_w})"
            )
        if not 0 <= cluster_id < cfg.k:
            raise ValueError(f"cluster_id {cluster_id} out of range [0, {cfg.k})")
        if heads.shape != (x.shape[0], 2):
            raise ValueError(f"head pose batch must be (N, 2), got {heads.shape}")

    def forward_batch(self, x, heads, cluster_id, want_cache=False):
        """Run a batch routed through head ``cluster_id``.

        Args:
            x: (N, C, H, W) float input images.
            heads: (N, 2) head (pitch, yaw) in radians.
            cluster_id: which fc7/fc8 pair to use.
            want_cache: also return the activation cache for backward.

        Returns:
            (N, 2) gaze predictions, or (predictions, cache).
        """
        x = np.ascontiguousarray(x, dtype=self.dtype)
        heads = np.asarray(heads, dtype=self.dtype)
        self._check_batch(x, heads, cluster_id)
        cfg, p = self.config, self.params

        conv_in = []
        conv_pre = []
        h = x
        for i, cs in enumerate(cfg.convs, start=1):
            conv_in.append(h)
            z = kernels.conv2d_forward(h, p[f"conv{i}.w"], p[f"conv{i}.b"], cs.stride, cs.pad)
            conv_pre.append(z)
            h = _relu(z)
            if i == 3:
                conv3_out = h
        pooled, pool_idx = kernels.maxpool2d_forward(h, cfg.pool, cfg.pool_stride)
        flat = pooled.reshape(x.shape[0], -1)
        z6 = flat @ p["fc6.w"] + p["fc6.b"]
        gap = None
        if cfg.use_skip:
            gap = conv3_out.mean(axis=(2, 3), dtype=self.dtype)
            z6 = z6 + gap @ p["skip.w"]
        f6 = _relu(z6)
        z7 = f6 @ p[f"fc7.{cluster_id}.w"] + p[f"fc7.{cluster_id}.b"]
        f7 = _relu(z7)
        hcat = np.concatenate([f7, heads], axis=1) if cfg.head_pose_input else f7
        out = hcat @ p[f"fc8.{cluster_id}.w"] + p[f"fc8.{cluster_id}.b"]
        if not want_cache:
            return out
        cache = dict(
            conv_in=conv_in, conv_pre=conv_pre, conv3_out=conv3_out,
            pool_in=h, pool_idx=pool_idx, flat=flat, gap=gap,
            z6=z6, f6=f6, z7=z7, hcat=hcat, cluster_id=cluster_id,
        )
        return out, cache

    def forward(self, img, head, cluster_id):
        """Single-sample wrapper; returns (pitch, yaw) as float64."""
        x = np.asarray(img, dtype=self.dtype)[None]
        heads = np.asarray(head, dtype=self.dtype)[None]
        out = self.forward_batch(x, heads, cluster_id)
        return out[0].astype(np.float64)

    def backward_batch(self, cache, dout):
        """Gradients w.r.t. trunk parameters and the routed head's parameters.

        ``dout`` is the loss gradient at the fc8 output, shape (N, 2).
        Heads other than the routed one never appear in the result -- their
        gradients are identically zero by construction.

        Returns:
            dict name -> gradient array (same shapes as the parameters).
        """
        cfg, p = self.config, self.params
        k = cache["cluster_id"]
        dout = np.asarray(dout, dtype=self.dtype)
        grads = {}

        hcat = cache["hcat"]
        grads[f"fc8.{k}.w"] = hcat.T @ dout
        grads[f"fc8.{k}.b"] = dout.sum(axis=0)
        dhcat = dout @ p[f"fc8.{k}.w"].T
        df7 = dhcat[:, : cfg.fc7] if cfg.head_pose_input else dhcat
        dz7 = df7 * (cache["z7"] > 0)
        grads[f"fc7.{k}.w"] = cache["f6"].T @ dz7
        grads[f"fc7.{k}.b"] = dz7.sum(axis=0)
        df6 = dz7 @ p[f"fc7.{k}.w"].T
        dz6 = df6 * (cache["z6"] > 0)
        grads["fc6.w"] = cache["flat"].T @ dz6
        grads["fc6.b"] = dz6.sum(axis=0)
        dflat = dz6 @ p["fc6.w"].T

        pool_in = cache["pool_in"]
        n = pool_in.shape[0]
        dpool = dflat.reshape((n,) + cfg.feature_shapes()[-1])
        dconv = kernels.maxpool2d_backward(
            np.ascontiguousarray(dpool), cache["pool_idx"],
            pool_in.shape[2], pool_in.shape[3],
        )

        dgap3 = None
        if cfg.use_skip:
            grads["skip.w"] = cache["gap"].T @ dz6
            dgap = dz6 @ p["skip.w"].T
            c3, h3, w3 = cfg.feature_shapes()[2]
            dgap3 = (dgap / (h3 * w3))[:, :, None, None].astype(self.dtype)

        for i in range(5, 0, -1):
            cs = cfg.convs[i - 1]
            if i == 3 and dgap3 is not None:
                dconv = dconv + dgap3
            dz = dconv * (cache["conv_pre"][i - 1] > 0)
            dx, dw, db = kernels.conv2d_backward(
                cache["conv_in"][i - 1], p[f"conv{i}.w"],
                np.ascontiguousarray(dz), cs.stride, cs.pad,
            )
            grads[f"conv{i}.w"] = dw
            grads[f"conv{i}.b"] = db
            dconv = dx
        return grads


def image_to_input(img):
    """uint8 HxW or HxWxC image -> float32 (C, H, W) in [-0.5, 0.5]."""
    a = np.asarray(img)
    if a.ndim == 2:
        a = a[None]
    elif a.ndim == 3:
        a = a.transpose(2, 0, 1)
    else:
        raise ValueError(f"expected HxW or HxWxC image, got ndim={a.ndim}")
    return a.astype(np.float32) / 255.0 - 0.5


def flop_count(net):
    """MAC count of one forward pass; independent of the head count."""
    cfg = net.config if isinstance(net, GazeNet) else net
    return cfg.flop_count()


def _canonical_manifest(net):
    order = list(net.config.param_shapes())
    tensors = []
    offset = 0
    for name in order:
        shape = net.params[name].shape
        tensors.append({"name": name, "shape": list(shape), "offset": offset})
        offset += int(np.prod(shape)) * 4
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "config": net.config.to_dict(),
        "tensors": tensors,
    }, order, offset


def save(net, path):
    """Write a model file: one-line JSON manifest + little-endian f32 blob.

    Models in float64 check mode are downcast to float32 on disk.
    """
    manifest, order, total = _canonical_manifest(net)
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(header + b"\n")
        for name in order:
            f.write(np.ascontiguousarray(net.params[name], dtype="<f4").tobytes())


def load(path):
    """Read a model file written by :func:`save`; validates eagerly."""
    with open(path, "rb") as f:
        header = f.readline()
        blob = f.read()
    try:
        manifest = json.loads(header)
    except json.JSONDecodeError as exc:
        raise FormatError(f"unreadable model manifest: {exc}") from exc
    if manifest.get("format") != MODEL_FORMAT:
        raise FormatError(f"not a {MODEL_FORMAT} file")
    if manifest.get("version") != MODEL_VERSION:
        raise FormatError(f"unsupported model version {manifest.get('version')!r}")
    config = NetConfig.from_dict(manifest["config"])
    expected = config.param_shapes()
    tensors = manifest["tensors"]
    names = [t["name"] for t in tensors]
    if names != list(expected):
        raise FormatError("manifest tensor list does not match the config")
    params = {}
    offset = 0
    for t in tensors:
        shape = tuple(t["shape"])
        if shape != expected[t["name"]]:
            raise FormatError(
                f"tensor {t['name']}: manifest shape {shape} != expected {expected[t['name']]}"
            )
        if t["offset"] != offset:
            raise FormatError(f"tensor {t['name']}: bad offset")
        nbytes = int(np.prod(shape)) * 4
        raw = blob[offset : offset + nbytes]
        if len(raw) != nbytes:
            raise FormatError(f"tensor {t['name']}: blob truncated")
        params[t["name"]] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        offset += nbytes
    if offset != len(blob):
        raise FormatError(f"blob length {len(blob)} != manifest total {offset}")
    return GazeNet(config, params, np.float32)


@dataclass
class LoadReport:
    transferred: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    unmatched: list = field(default_factory=list)


def partial_load(net, path, name_map=None):
    """Copy donor tensors into ``net`` by (mapped) name where shapes match.

    Mismatches are reported, never fatal: ``skipped`` collects donor
    tensors whose mapped target exists with a different shape,
    ``unmatched`` those with no target at all.
    """
    donor = load(path)
    name_map = name_map or {}
    report = LoadReport()
    for name, tensor in donor.params.items():
        target = name_map.get(name, name)
        if target not in net.params:
            report.unmatched.append(name)
            continue
        if net.params[target].shape != tensor.shape:
            report.skipped.append(name)
            continue
        net.params[target] = tensor.astype(net.dtype)
        report.transferred.append(name)
    return report
