"""Dataset container: JSONL index + PGM/PPM images + JSON manifest.

Layout under the dataset root::

    manifest.json    dims, channels, format version, optional config hash
    index.jsonl      one sample per line, ids unique, ordered by id
    images/*.pgm     (P5, 1 channel) or *.ppm (P6, 3 channels)

All angles are stored in radians.  Datasets are immutable after writing;
operations that transform samples (mirroring, targeting) write new
containers.  Reading validates everything eagerly, so an in-memory
Dataset always satisfies the container invariants.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import netpbm
from .geometry import mirror_sample, validate_angles

DATASET_FORMAT = "gazekit-dataset"
DATASET_VERSION = 1


class DatasetError(Exception):
    """Malformed or inconsistent dataset container."""


@dataclass
class Sample:
    id: str
    subject: str
    side: str  # "L" or "R", recorded after any mirroring to L-equivalent
    head: tuple  # (pitch, yaw) radians
    gaze: tuple  # (pitch, yaw) radians
    image: str  # root-relative path, forward slashes
    cluster: int | None = None
    illum: float | None = None
    mirrored: bool = False

    def validate(self):
        if self.side not in ("L", "R"):
            raise DatasetError(f"sample {self.id}: side must be L or R")
        try:
            validate_angles(np.array(self.head))
            validate_angles(np.array(self.gaze))
        except ValueError as exc:
            raise DatasetError(f"sample {self.id}: {exc}") from exc
        return self

    def to_json(self):
        return json.dumps(
            {
                "id": self.id,
                "subject": self.subject,
                "side": self.side,
                "head": list(self.head),
                "gaze": list(self.gaze),
                "image": self.image,
                "cluster": self.cluster,
                "illum": self.illum,
                "mirrored": self.mirrored,
            },
            sort_keys=True,
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, line):
        d = json.loads(line)
        return cls(
            id=d["id"],
            subject=d["subject"],
            side=d["side"],
            head=tuple(d["head"]),
            gaze=tuple(d["gaze"]),
            image=d["image"],
            cluster=d.get("cluster"),
            illum=d.get("illum"),
            mirrored=d.get("mirrored", False),
        )


class Dataset:
    """Validated view of a dataset container on disk."""

    def __init__(self, root, manifest, samples):
        self.root = Path(root)
        self.manifest = manifest
        self.samples = samples

    def __len__(self):
        return len(self.samples)

    @property
    def image_shape(self):
        m = self.manifest
        if m["channels"] == 1:
            return (m["image_h"], m["image_w"])
        return (m["image_h"], m["image_w"], m["channels"])

    def load_image(self, sample):
        return netpbm.read_image(self.root / sample.image)

    def load_images(self):
        """All images stacked: uint8 (N, H, W) or (N, H, W, 3)."""
        return np.stack([self.load_image(s) for s in self.samples]) if self.samples \
            else np.zeros((0,) + self.image_shape, dtype=np.uint8)

    def heads(self):
        return np.array([s.head for s in self.samples], dtype=np.float64).reshape(-1, 2)

    def gazes(self):
        return np.array([s.gaze for s in self.samples], dtype=np.float64).reshape(-1, 2)

    def subjects(self):
        return np.array([s.subject for s in self.samples])


def write_dataset(samples, images, root, extra_manifest=None):
    """Write a new container; samples are ordered by id.

    Args:
        samples: list of Sample (``image`` fields are assigned here).
        images: aligned list of uint8 HxW / HxWx3 arrays, all same shape.
        root: target directory (created; must not already hold a dataset).
        extra_manifest: optional dict merged into the manifest.

    Returns:
        the written Dataset, re-read and validated.
    """
    if len(samples) != len(images):
        raise DatasetError("samples and images differ in length")
    root = Path(root)
    if (root / "manifest.json").exists():
        raise DatasetError(f"{root} already contains a dataset")
    shapes = {im.shape for im in images}
    if len(shapes) > 1:
        raise DatasetError(f"inconsistent image shapes: {sorted(shapes)}")
    if images:
        h, w = images[0].shape[:2]
        channels = 1 if images[0].ndim == 2 else images[0].shape[2]
    else:
        h, w, channels = 0, 0, 1

    ids = [s.id for s in samples]
    if len(set(ids)) != len(ids):
        raise DatasetError("duplicate sample ids")
    order = np.argsort(np.array(ids)) if ids else []

    (root / "images").mkdir(parents=True, exist_ok=True)
    ext = "pgm" if channels == 1 else "ppm"
    written = []
    with open(root / "index.jsonl", "w", encoding="utf-8") as idx:
        for i in order:
            s, im = samples[i], images[i]
            s.image = f"images/{s.id}.{ext}"
            netpbm.write_image(root / s.image, im)
            idx.write(s.validate().to_json() + "\n")
            written.append(s)
    manifest = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "image_w": int(w),
        "image_h": int(h),
        "channels": int(channels),
        "count": len(samples),
    }
    if extra_manifest:
        manifest.update(extra_manifest)
    with open(root / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return Dataset(root, manifest, written)


def read_dataset(root):
    """Read and eagerly validate a container written by write_dataset."""
    root = Path(root)
    try:
        with open(root / "manifest.json", encoding="utf-8") as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise DatasetError(f"{root} is not a dataset (no manifest.json)")
    except json.JSONDecodeError as exc:
        raise DatasetError(f"unreadable manifest: {exc}")
    if manifest.get("format") != DATASET_FORMAT:
        raise DatasetError(f"not a {DATASET_FORMAT} container")
    if manifest.get("version") != DATASET_VERSION:
        raise DatasetError(f"unsupported dataset version {manifest.get('version')!r}")

    samples = []
    seen = set()
    w, h, ch = manifest["image_w"], manifest["image_h"], manifest["channels"]
    header_len = len(b"P5\n%d %d\n255\n" % (w, h))
    expected_size = header_len + w * h * ch
    with open(root / "index.jsonl", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                s = Sample.from_json(line).validate()
            except (json.JSONDecodeError, KeyError, DatasetError) as exc:
                raise DatasetError(f"index.jsonl line {lineno}: {exc}")
            if s.id in seen:
                raise DatasetError(f"index.jsonl line {lineno}: duplicate id {s.id!r}")
            seen.add(s.id)
            path = root / s.image
            try:
                iw, ih, ic = netpbm.read_header(path)
            except FileNotFoundError:
                raise DatasetError(f"sample {s.id}: missing image {s.image}")
            except netpbm.NetpbmError as exc:
                raise DatasetError(f"sample {s.id}: {exc}")
            if (iw, ih, ic) != (w, h, ch):
                raise DatasetError(
                    f"sample {s.id}: image dims {iw}x{ih}x{ic} != manifest {w}x{h}x{ch}"
                )
            if os.path.getsize(path) != expected_size:
                raise DatasetError(f"sample {s.id}: image file size mismatch (truncated?)")
            samples.append(s)
    if manifest.get("count") not in (None, len(samples)):
        raise DatasetError(
            f"manifest count {manifest['count']} != index rows {len(samples)}"
        )
    return Dataset(root, manifest, samples)


def ingest_external(src_dir, mapping, out_root):
    """Convert an external (images + label table) tree into a native container.

    ``mapping`` is a dict::

        {
          "table": "labels.csv",            # relative to src_dir
          "columns": {"id": ..., "subject": ..., "side": ...,   # side optional
                      "head_pitch": ..., "head_yaw": ...,
                      "gaze_pitch": ..., "gaze_yaw": ..., "image": ...},
          "angles_unit": "radians" | "degrees",   # default radians
          "mirror_right": true | false            # default false
        }

    With ``mirror_right`` set, right-eye samples are flipped about the
    vertical axis, yaw signs negated, stored as L-equivalent with
    ``mirrored: true``.  A native container given as ``src_dir`` with
    mapping ``None`` is re-written as-is.
    """
    src_dir = Path(src_dir)
    if mapping is None:
        ds = read_dataset(src_dir)
        return write_dataset(
            [Sample(**s.__dict__) for s in ds.samples],
            [ds.load_image(s) for s in ds.samples],
            out_root,
        )

    cols = mapping.get("columns")
    if not cols:
        raise DatasetError("mapping must provide a 'columns' section")
    required = ("id", "subject", "head_pitch", "head_yaw", "gaze_pitch", "gaze_yaw", "image")
    missing = [k for k in required if k not in cols]
    if missing:
        raise DatasetError(f"mapping lacks required columns: {missing}")
    unit = mapping.get("angles_unit", "radians")
    if unit not in ("radians", "degrees"):
        raise DatasetError(f"angles_unit must be radians or degrees, got {unit!r}")
    mirror_right = bool(mapping.get("mirror_right", False))

    table = src_dir / mapping.get("table", "labels.csv")
    rows = []
    if table.suffix == ".jsonl":
        with open(table, encoding="utf-8") as f:
            rows = [json.loads(line) for line in f if line.strip()]
    else:
        with open(table, encoding="utf-8", newline="") as f:
            rows = list(csv.DictReader(f))

    samples, images = [], []
    for row in rows:
        angles = [float(row[cols[k]]) for k in
                  ("head_pitch", "head_yaw", "gaze_pitch", "gaze_yaw")]
        if unit == "radians" and any(abs(v) > math.pi for v in angles):
            raise DatasetError(
                f"sample {row[cols['id']]}: angle magnitude exceeds pi; "
                f"values look like degrees (set angles_unit accordingly)"
            )
        if unit == "degrees":
            angles = [math.radians(v) for v in angles]
        head, gaze = (angles[0], angles[1]), (angles[2], angles[3])
        side = row[cols["side"]] if "side" in cols else "L"
        img = netpbm.read_image(src_dir / row[cols["image"]])
        mirrored = False
        if side == "R" and mirror_right:
            img, head, gaze = mirror_sample(img, head, gaze)
            head, gaze = tuple(head), tuple(gaze)
            side, mirrored = "L", True
        samples.append(
            Sample(
                id=str(row[cols["id"]]),
                subject=str(row[cols["subject"]]),
                side=side,
                head=head,
                gaze=gaze,
                image="",
                mirrored=mirrored,
            )
        )
        images.append(img)
    return write_dataset(samples, images, out_root)
