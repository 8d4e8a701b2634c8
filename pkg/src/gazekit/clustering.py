"""k-means over head-pose directions with cosine distance.

Poses are mapped to unit vectors; Lloyd's iterations assign each vector
to the nearest centroid under d(u, c) = 1 - u.c and update centroids as
the normalized mean of their members.  Seeding is k-means++ adapted to
cosine distance, with multiple restarts; the best restart by total
objective wins.  Empty clusters are repaired by reseeding to the point
farthest from its assigned centroid.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import angles_to_vec, normalize, vec_to_angles
from .rngs import stream

CLUSTERS_FORMAT = "gazekit-clusters"
CLUSTERS_VERSION = 1

_TAG_KMEANS = 0x4B

# 2-degree bins over [-90, 90]^2 for the per-cluster gaze histograms
HIST_EDGES_DEG = np.arange(-90.0, 90.0 + 2.0, 2.0)


@dataclass(frozen=True)
class ClusterModel:
    """K unit-vector centroids plus the nearest-centroid assignment rule."""

    centroids: np.ndarray  # (K, 3) unit vectors
    version: int = CLUSTERS_VERSION

    def __post_init__(self):
        c = np.asarray(self.centroids, dtype=np.float64)
        if c.ndim != 2 or c.shape[1] != 3 or c.shape[0] < 1:
            raise ValueError(f"centroids must be (K, 3) with K >= 1, got {c.shape}")
        if np.any(np.abs(np.linalg.norm(c, axis=1) - 1.0) > 1e-9):
            raise ValueError("centroids must be unit norm")
        if len(np.unique(c, axis=0)) != len(c):
            raise ValueError("centroids must be distinct")
        object.__setattr__(self, "centroids", c)

    @property
    def k(self):
        return len(self.centroids)

    @classmethod
    def from_angles(cls, pairs):
        """Fixed-centroid injection from (pitch, yaw) pairs in radians."""
        return cls(centroids=angles_to_vec(np.asarray(pairs, dtype=np.float64)))

    def centroid_angles(self):
        return vec_to_angles(self.centroids)

    def assign(self, poses):
        """Cluster ids for (..., 2) angle pairs; ties go to the lowest id."""
        v = angles_to_vec(np.asarray(poses, dtype=np.float64))
        d = 1.0 - v @ self.centroids.T
        ids = np.argmin(d, axis=-1)
        return ids

    def objective(self, poses):
        v = angles_to_vec(np.asarray(poses, dtype=np.float64))
        d = 1.0 - v @ self.centroids.T
        return float(np.sum(np.min(d, axis=-1)))

    def to_json(self):
        return json.dumps(
            {
                "format": CLUSTERS_FORMAT,
                "version": self.version,
                "k": self.k,
                "centroids": self.centroids.tolist(),
            },
            sort_keys=True,
            indent=2,
        )

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        if d.get("format") != CLUSTERS_FORMAT:
            raise ValueError(f"not a {CLUSTERS_FORMAT} document")
        return cls(centroids=np.array(d["centroids"]), version=d["version"])

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_json() + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls.from_json(f.read())


def _plusplus_init(vecs, k, rng):
    """k-means++ seeding with squared cosine distance weights."""
    n = len(vecs)
    centroids = np.empty((k, 3))
    centroids[0] = vecs[rng.integers(n)]
    d = 1.0 - vecs @ centroids[0]
    for j in range(1, k):
        weights = np.maximum(d, 0.0) ** 2
        total = weights.sum()
        if total <= 0:
            # remaining points coincide with chosen centroids; pick any distinct one
            taken = {tuple(c) for c in centroids[:j]}
            fresh = [i for i in range(n) if tuple(vecs[i]) not in taken]
            centroids[j] = vecs[fresh[0]]
        else:
            centroids[j] = vecs[rng.choice(n, p=weights / total)]
        d = np.minimum(d, 1.0 - vecs @ centroids[j])
    return centroids


def lloyd_once(vecs, k, max_iter, rng):
    """One seeded k-means run.

    Returns:
        (centroids, labels, objective, history) where history is the
        objective after each assignment step (non-increasing).
    """
    n = len(vecs)
    centroids = _plusplus_init(vecs, k, rng)
    labels = np.full(n, -1)
    history = []
    for _ in range(max_iter):
        d = 1.0 - vecs @ centroids.T
        new_labels = np.argmin(d, axis=1)
        history.append(float(d[np.arange(n), new_labels].sum()))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        # update step: normalized mean of members
        taken = set()
        for j in range(k):
            members = vecs[labels == j]
            if len(members) == 0:
                # repair: reseed to the point farthest from its centroid
                dist = 1.0 - np.sum(vecs * centroids[labels], axis=1)
                for i in np.argsort(-dist):
                    if i not in taken:
                        centroids[j] = vecs[i]
                        taken.add(int(i))
                        break
                continue
            mean = members.sum(axis=0)
            norm = np.linalg.norm(mean)
            if norm > 0:
                centroids[j] = mean / norm
    d = 1.0 - vecs @ centroids.T
    labels = np.argmin(d, axis=1)
    objective = float(d[np.arange(n), labels].sum())
    return centroids, labels, objective, history


def fit_kmeans(poses, k, max_iter=100, n_restarts=10, seed=0):
    """Fit a ClusterModel to (N, 2) head-pose angle pairs.

    The best of ``n_restarts`` seeded runs (lowest total cosine distance)
    is returned.

    Raises:
        ValueError: empty input, or k exceeding the number of distinct poses.
    """
    poses = np.asarray(poses, dtype=np.float64).reshape(-1, 2)
    if len(poses) == 0:
        raise ValueError("cannot cluster an empty pose list")
    if k < 1:
        raise ValueError("k must be >= 1")
    vecs = angles_to_vec(poses)
    n_distinct = len(np.unique(vecs, axis=0))
    if k > n_distinct:
        raise ValueError(f"k={k} exceeds the {n_distinct} distinct poses")

    best = None
    for r in range(n_restarts):
        rng = stream(seed, _TAG_KMEANS, r)
        centroids, labels, objective, _ = lloyd_once(vecs, k, max_iter, rng)
        if best is None or objective < best[1]:
            best = (centroids, objective)
    return ClusterModel(centroids=normalize(best[0]))


@dataclass
class ClusterStats:
    cluster: int
    count: int
    head_centroid_deg: tuple | None = None  # (pitch, yaw)
    gaze_mean_deg: tuple | None = None
    gaze_cov_deg2: list | None = None  # 2x2, (pitch, yaw) order
    hist: np.ndarray | None = field(default=None, repr=False)  # 90x90 counts


def cluster_stats(model, heads, gazes=None):
    """Per-cluster sample counts, mean directions, covariance and histograms.

    Args:
        model: fitted ClusterModel.
        heads: a dataio.Dataset, or an (N, 2) array of head poses.
        gazes: (N, 2) gaze labels when ``heads`` is an array.

    Returns:
        list of ClusterStats, one per cluster id; empty clusters get
        count 0 and null stats.
    """
    if gazes is None:
        ds = heads
        heads, gazes = ds.heads(), ds.gazes()
    heads = np.asarray(heads, dtype=np.float64).reshape(-1, 2)
    gazes = np.asarray(gazes, dtype=np.float64).reshape(-1, 2)
    ids = model.assign(heads)

    out = []
    for j in range(model.k):
        mask = ids == j
        count = int(mask.sum())
        if count == 0:
            out.append(ClusterStats(cluster=j, count=0))
            continue
        hdir = normalize(angles_to_vec(heads[mask]).mean(axis=0))
        gdir = normalize(angles_to_vec(gazes[mask]).mean(axis=0))
        gdeg = np.degrees(gazes[mask])
        cov = np.cov(gdeg.T) if count > 1 else np.zeros((2, 2))
        hist, _, _ = np.histogram2d(
            gdeg[:, 0], gdeg[:, 1], bins=(HIST_EDGES_DEG, HIST_EDGES_DEG)
        )
        out.append(
            ClusterStats(
                cluster=j,
                count=count,
                head_centroid_deg=tuple(np.degrees(vec_to_angles(hdir))),
                gaze_mean_deg=tuple(np.degrees(vec_to_angles(gdir))),
                gaze_cov_deg2=np.atleast_2d(cov).tolist(),
                hist=hist,
            )
        )
    return out


def stats_to_csv(stats):
    """One CSV row per cluster (histograms go to JSON, not CSV)."""
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(
        ["cluster", "count", "head_pitch_deg", "head_yaw_deg",
         "gaze_mean_pitch_deg", "gaze_mean_yaw_deg",
         "cov_pp", "cov_py", "cov_yp", "cov_yy"]
    )
    for s in stats:
        if s.count == 0:
            writer.writerow([s.cluster, 0] + [""] * 8)
            continue
        cov = np.asarray(s.gaze_cov_deg2).ravel()
        writer.writerow(
            [s.cluster, s.count,
             f"{s.head_centroid_deg[0]:.4f}", f"{s.head_centroid_deg[1]:.4f}",
             f"{s.gaze_mean_deg[0]:.4f}", f"{s.gaze_mean_deg[1]:.4f}"]
            + [f"{v:.6f}" for v in cov]
        )
    return buf.getvalue()


def stats_to_json(stats):
    payload = []
    for s in stats:
        d = {
            "cluster": s.cluster,
            "count": s.count,
            "head_centroid_deg": s.head_centroid_deg,
            "gaze_mean_deg": s.gaze_mean_deg,
            "gaze_cov_deg2": s.gaze_cov_deg2,
            "hist_bin_deg": 2.0,
            "hist_range_deg": [-90.0, 90.0],
            "hist": None if s.hist is None else s.hist.astype(int).tolist(),
        }
        payload.append(d)
    return json.dumps(payload)


def js_divergence(p, q):
    """Jensen-Shannon divergence (nats) between two histograms."""
    p = np.asarray(p, dtype=np.float64).ravel()
    q = np.asarray(q, dtype=np.float64).ravel()
    if p.sum() <= 0 or q.sum() <= 0:
        raise ValueError("histograms must have positive mass")
    p = p / p.sum()
    q = q / q.sum()
    m = (p + q) / 2

    def kl(a, b):
        mask = a > 0
        return float(np.sum(a[mask] * np.log(a[mask] / b[mask])))

    return 0.5 * kl(p, m) + 0.5 * kl(q, m)
