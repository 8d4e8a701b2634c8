"""Procedural synthetic eye-image generator.

Head pose and eye-in-head rotation are drawn uniformly and independently
from configurable boxes; the composed gaze direction is the label.  A
sample is renderable only if that direction lies within a visibility cone
around the camera axis (one threshold standing in for eye-region
self-occlusion and pupil foreshortening); invisible draws are rejected
and redrawn, which truncates the per-head-pose gaze prior exactly the way
oblique viewpoints shrink the range of observable gaze angles.

Rendering is a deliberately low-fidelity 2D raster: skin background, an
elliptical eye opening foreshortened by cos(head yaw), sclera, and
iris/pupil discs displaced from center in proportion to the tangent of
the eye-in-head angles.  Per-subject appearance (radii, opening size,
tones, eyelid coupling) is drawn once per subject.  Label/geometry
properties, not photo-realism, are the contract.

Every draw comes from a Philox stream keyed by (seed, purpose, subject,
sample), so regeneration is bit-identical and order-independent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import dataio
from .geometry import angles_to_vec, compose_gaze, rotation_from_angles
from .rngs import stream

_TAG_SUBJECT = 0x51
_TAG_SAMPLE = 0x52
_TAG_ESTIMATE = 0x53

# pupil disc tone before illumination scaling; always the darkest feature
PUPIL_TONE = 12.0

# attempt caps implementing the pathological-rejection configuration error
_EST_DRAWS = 10_000
_MIN_ACCEPT = 0.01
_MAX_ATTEMPTS_PER_SAMPLE = 100_000


class ConfigError(Exception):
    pass


class PupilNotVisibleError(ValueError):
    """render_eye called on a pose pair outside the visibility cone."""


@dataclass(frozen=True)
class SynthConfig:
    head_pitch_range: float = 60.0  # degrees, half-range about 0
    head_yaw_range: float = 60.0
    eye_pitch_range: float = 25.0
    eye_yaw_range: float = 35.0
    visibility_limit_deg: float = 75.0
    image_w: int = 64
    image_h: int = 40
    n_subjects: int = 10
    samples_per_subject: int = 1000
    seed: int = 0
    color: bool = False
    illum_low: float = 0.7
    illum_high: float = 1.3

    def __post_init__(self):
        for name in ("head_pitch_range", "head_yaw_range", "eye_pitch_range", "eye_yaw_range"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not 0 < self.visibility_limit_deg <= 90:
            raise ConfigError("visibility_limit_deg must be in (0, 90]")
        if self.image_w < 16 or self.image_h < 10:
            raise ConfigError("image dims must be at least 16x10")
        if self.n_subjects < 1 or self.samples_per_subject < 0:
            raise ConfigError("need at least one subject and non-negative sample count")
        if not 0.5 <= self.illum_low <= self.illum_high <= 1.5:
            raise ConfigError("illumination range must lie within [0.5, 1.5]")

    def to_dict(self):
        from dataclasses import asdict

        return asdict(self)


@dataclass(frozen=True)
class SubjectParams:
    iris_radius: float  # fraction of image height
    pupil_radius: float  # fraction of image height, < iris_radius
    opening_w: float  # fraction of image width
    opening_h: float  # fraction of image height
    skin_tone: tuple  # RGB in [0, 255]
    sclera_tone: tuple
    iris_tone: tuple
    eyelid_coupling: float

    def __post_init__(self):
        if not self.pupil_radius < self.iris_radius:
            raise ConfigError("pupil radius must be smaller than iris radius")
        if not (0 < self.opening_w <= 1 and 0 < self.opening_h <= 1):
            raise ConfigError("opening fractions must be in (0, 1]")
        for tone in (self.skin_tone, self.sclera_tone, self.iris_tone):
            if any(not 0 <= t <= 255 for t in tone):
                raise ConfigError("tones must be in [0, 255]")


def draw_subject_params(cfg, subject_idx):
    """Per-subject appearance parameters from the subject's own stream."""
    rng = stream(cfg.seed, _TAG_SUBJECT, subject_idx)
    iris = rng.uniform(0.14, 0.26)
    pupil = iris * rng.uniform(0.35, 0.55)
    skin = rng.uniform(120.0, 215.0)
    sclera = rng.uniform(205.0, 245.0)
    iris_tone = rng.uniform(40.0, 130.0)
    tint = rng.uniform(-12.0, 12.0, size=3)  # mild per-channel variation

    def rgb(base, scale):
        return tuple(np.clip(base + tint * scale, 0.0, 255.0))

    # wide opening-geometry spread: the pupil-offset-to-angle gain is
    # subject-specific, which is what makes cross-subject transfer hard
    return SubjectParams(
        iris_radius=iris,
        pupil_radius=pupil,
        opening_w=rng.uniform(0.60, 0.98),
        opening_h=rng.uniform(0.50, 0.90),
        skin_tone=rgb(skin, 1.0),
        sclera_tone=rgb(sclera, 0.3),
        iris_tone=rgb(iris_tone, 1.5),
        eyelid_coupling=rng.uniform(0.4, 1.0),
    )


def sample_pose_pair(cfg, rng):
    """One (head, eye-in-head) angle pair, uniform over the config boxes.

    Draw order is fixed (head pitch, head yaw, eye pitch, eye yaw) so a
    stream position identifies the draw.
    """
    hp = math.radians(cfg.head_pitch_range)
    hy = math.radians(cfg.head_yaw_range)
    ep = math.radians(cfg.eye_pitch_range)
    ey = math.radians(cfg.eye_yaw_range)
    head = np.array([rng.uniform(-hp, hp), rng.uniform(-hy, hy)])
    eye = np.array([rng.uniform(-ep, ep), rng.uniform(-ey, ey)])
    return head, eye


def is_pupil_visible(head, eye_in_head, limit_deg):
    """True iff the composed gaze direction is within limit_deg of the camera axis."""
    gaze = compose_gaze(np.asarray(head, float), np.asarray(eye_in_head, float))
    v = angles_to_vec(gaze)
    total = math.degrees(math.acos(min(1.0, max(-1.0, -v[2]))))
    return total <= limit_deg


def render_eye(subject, head, eye_in_head, illum, cfg):
    """Rasterize one eye image; deterministic in its inputs.

    The iris/pupil offset from the opening center is proportional to
    tan(eye pitch/yaw) (clamped inside the opening); the opening's
    horizontal half-axis is foreshortened by cos(head yaw); the upper
    eyelid drops with eyelid_coupling * downward eye pitch.  All tones
    are scaled by ``illum`` and clamped to [0, 255].

    Raises:
        PupilNotVisibleError: pose pair outside the visibility cone.
    """
    head = np.asarray(head, dtype=np.float64)
    eye = np.asarray(eye_in_head, dtype=np.float64)
    if not is_pupil_visible(head, eye, cfg.visibility_limit_deg):
        raise PupilNotVisibleError(
            f"composed gaze outside the {cfg.visibility_limit_deg} degree visibility cone"
        )
    if not 0.5 <= illum <= 1.5:
        raise ValueError("illum must be in [0.5, 1.5]")

    w, h = cfg.image_w, cfg.image_h
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    a = max(2.0, subject.opening_w * w / 2.0 * abs(math.cos(head[1])))
    b = max(2.0, subject.opening_h * h / 2.0)

    # upper lid line: drops toward the opening center as the eye looks down
    drop = min(1.0, subject.eyelid_coupling * max(0.0, -eye[0]) / (math.pi / 4))
    lid_y = (cy - b) + drop * b

    # gaze point inside the opening: tan-proportional, clamped
    sx = a / math.tan(math.radians(40.0))
    sy = b / math.tan(math.radians(30.0))
    px = cx - np.clip(sx * math.tan(eye[1]), -0.92 * a, 0.92 * a)
    py = cy - np.clip(sy * math.tan(eye[0]), -0.92 * b, 0.92 * b)
    r_iris = subject.iris_radius * h
    r_pupil = subject.pupil_radius * h

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    opening = (((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2 <= 1.0) & (yy >= lid_y)
    iris = ((xx - px) ** 2 + (yy - py) ** 2 <= r_iris**2) & opening
    pupil = ((xx - px) ** 2 + (yy - py) ** 2 <= r_pupil**2) & opening

    canvas = np.empty((h, w, 3), dtype=np.float64)
    canvas[:] = subject.skin_tone
    canvas[opening] = subject.sclera_tone
    canvas[iris] = subject.iris_tone
    canvas[pupil] = PUPIL_TONE
    canvas *= illum
    if cfg.color:
        return np.clip(np.round(canvas), 0, 255).astype(np.uint8)
    luma = canvas @ [0.299, 0.587, 0.114]
    return np.clip(np.round(luma), 0, 255).astype(np.uint8)


def estimate_acceptance(cfg, draws=_EST_DRAWS):
    """Monte-Carlo estimate of the visibility-cone acceptance probability."""
    rng = stream(cfg.seed, _TAG_ESTIMATE)
    hits = 0
    for _ in range(draws):
        head, eye = sample_pose_pair(cfg, rng)
        hits += is_pupil_visible(head, eye, cfg.visibility_limit_deg)
    return hits / draws


def generate_dataset(cfg, root):
    """Generate, render and write a dataset container.

    Returns:
        (Dataset, stats dict) where stats records accepted/rejected draw
        counts and the Monte-Carlo acceptance estimate.

    Raises:
        ConfigError: if the estimated rejection rate exceeds 99%.
    """
    acceptance = estimate_acceptance(cfg)
    if acceptance < _MIN_ACCEPT:
        raise ConfigError(
            f"pathological config: estimated rejection rate "
            f"{100 * (1 - acceptance):.1f}% exceeds 99%"
        )

    samples, images = [], []
    accepted = rejected = 0
    for s in range(cfg.n_subjects):
        subject = draw_subject_params(cfg, s)
        sid = f"s{s:02d}"
        for i in range(cfg.samples_per_subject):
            rng = stream(cfg.seed, _TAG_SAMPLE, s, i)
            attempts = 0
            while True:
                head, eye = sample_pose_pair(cfg, rng)
                attempts += 1
                if is_pupil_visible(head, eye, cfg.visibility_limit_deg):
                    break
                if attempts >= _MAX_ATTEMPTS_PER_SAMPLE:
                    raise ConfigError(
                        f"sample {sid}/{i}: no visible pose in {attempts} draws"
                    )
            rejected += attempts - 1
            accepted += 1
            illum = rng.uniform(cfg.illum_low, cfg.illum_high)
            gaze = compose_gaze(rotation_from_angles(head), rotation_from_angles(eye))
            images.append(render_eye(subject, head, eye, illum, cfg))
            samples.append(
                dataio.Sample(
                    id=f"{sid}_{i:06d}",
                    subject=sid,
                    side="L",
                    head=tuple(head),
                    gaze=tuple(gaze),
                    image="",
                    illum=round(float(illum), 6),
                )
            )
    ds = dataio.write_dataset(
        samples, images, root, extra_manifest={"generator": cfg.to_dict()}
    )
    stats = {
        "accepted": accepted,
        "rejected": rejected,
        "rejection_rate": rejected / max(1, accepted + rejected),
        "acceptance_estimate": acceptance,
    }
    return ds, stats


def _bt601_forward(rgb):
    y = rgb @ [0.299, 0.587, 0.114]
    cb = (rgb[..., 2] - y) / 1.772 + 128.0
    cr = (rgb[..., 0] - y) / 1.402 + 128.0
    return y, cb, cr


def _bt601_inverse(y, cb, cr):
    r = y + 1.402 * (cr - 128.0)
    b = y + 1.772 * (cb - 128.0)
    g = (y - 0.299 * r - 0.114 * b) / 0.587
    return np.stack([r, g, b], axis=-1)


def _equalize_channel(y):
    """Classic histogram equalization of a uint8 channel.

    v -> round(255 * (cdf(v) - cdf_min) / (1 - cdf_min)); constant
    channels are returned unchanged.
    """
    hist = np.bincount(y.ravel(), minlength=256)
    cdf = np.cumsum(hist) / y.size
    occupied = np.nonzero(hist)[0]
    cdf_min = cdf[occupied[0]]
    if cdf_min >= 1.0:
        return y.copy()
    lut = np.round(255.0 * (cdf - cdf_min) / (1.0 - cdf_min))
    lut = np.clip(lut, 0, 255).astype(np.uint8)
    return lut[y]


def hist_equalize_y(img):
    """Equalize the luminance channel (BT.601 full-range for color images).

    Grayscale images are equalized directly; color images are converted
    RGB -> YCbCr, the Y channel equalized, and converted back with
    clamping.  Dimensions never change.
    """
    a = np.asarray(img)
    if a.dtype != np.uint8:
        raise ValueError(f"expected uint8 image, got {a.dtype}")
    if a.ndim == 2:
        return _equalize_channel(a)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValueError(f"expected HxW or HxWx3 image, got shape {a.shape}")
    y, cb, cr = _bt601_forward(a.astype(np.float64))
    yq = np.clip(np.round(y), 0, 255).astype(np.uint8)
    yeq = _equalize_channel(yq).astype(np.float64)
    rgb = _bt601_inverse(yeq, cb, cr)
    return np.clip(np.round(rgb), 0, 255).astype(np.uint8)
