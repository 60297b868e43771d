"""Classification metrics, latent embeddings and drift statistics."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from swinkoa import kernels
from swinkoa.config import NUM_GRADES


@dataclass
class MetricsReport:
    accuracy: float
    per_class_f1: list[float]
    macro_f1: float
    confusion: np.ndarray  # rows = true grade, cols = predicted
    n_samples: int
    absent_classes: list[int] = field(default_factory=list)
    drift: dict | None = None

    def to_dict(self) -> dict:
        d = {
            "accuracy": self.accuracy,
            "per_class_f1": list(self.per_class_f1),
            "macro_f1": self.macro_f1,
            "confusion": self.confusion.astype(int).tolist(),
            "n_samples": self.n_samples,
            "absent_classes": list(self.absent_classes),
        }
        if self.absent_classes:
            d["note"] = "macro_f1 averages only classes present in the ground truth"
        if self.drift is not None:
            d["drift"] = self.drift
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(
            accuracy=d["accuracy"],
            per_class_f1=list(d["per_class_f1"]),
            macro_f1=d["macro_f1"],
            confusion=np.array(d["confusion"], dtype=np.int64),
            n_samples=d["n_samples"],
            absent_classes=list(d.get("absent_classes", [])),
            drift=d.get("drift"),
        )


def compute_metrics(y_true, y_pred, num_classes: int = NUM_GRADES) -> MetricsReport:
    """Accuracy, per-class F1 = 2TP/(2TP+FP+FN), macro-F1 and confusion matrix.

    A class missing from ``y_true`` keeps its F1 entry (0 when it was never
    predicted either) but is left out of the macro average.
    """
    y_true = np.asarray(y_true, dtype=np.int64).reshape(-1)
    y_pred = np.asarray(y_pred, dtype=np.int64).reshape(-1)
    if y_true.size == 0:
        raise ValueError("compute_metrics needs at least one prediction")
    if y_true.shape != y_pred.shape:
        raise ValueError(f"{y_true.size} labels vs {y_pred.size} predictions")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = 2 * tp + fp + fn
    f1 = np.divide(2 * tp, denom, out=np.zeros(num_classes), where=denom > 0)
    present = cm.sum(axis=1) > 0
    return MetricsReport(
        accuracy=float(np.trace(cm) / cm.sum()),
        per_class_f1=[float(v) for v in f1],
        macro_f1=float(f1[present].mean()),
        confusion=cm,
        n_samples=int(cm.sum()),
        absent_classes=[int(i) for i in np.nonzero(~present)[0]],
    )


# ---------------------------------------------------------------------------
# embeddings
# ---------------------------------------------------------------------------


@dataclass
class EmbeddingSet:
    ids: list[str]
    grades: np.ndarray
    sites: list[str]
    vectors: np.ndarray  # (n, D)
    projection: np.ndarray | None = None  # (n, 2)

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, mask) -> "EmbeddingSet":
        mask = np.asarray(mask)
        idx = np.nonzero(mask)[0] if mask.dtype == bool else mask
        return EmbeddingSet(
            [self.ids[i] for i in idx],
            self.grades[idx],
            [self.sites[i] for i in idx],
            self.vectors[idx],
            None if self.projection is None else self.projection[idx],
        )

    def by_site(self, site: str) -> "EmbeddingSet":
        return self.subset(np.array([s == site for s in self.sites], dtype=bool))


def extract_embeddings(model, samples, batch_size: int = 64) -> EmbeddingSet:
    """Pooled encoder features for every sample, tagged by grade and site."""
    images = np.stack([s.image for s in samples]).astype(np.float32)
    vecs = model.embed(images, batch_size)
    return EmbeddingSet(
        ids=[s.id for s in samples],
        grades=np.array([s.grade for s in samples], dtype=np.int64),
        sites=[s.site for s in samples],
        vectors=vecs.astype(np.float32),
    )


def write_embeddings_tsv(emb: EmbeddingSet, path, use_projection: bool = False) -> None:
    vecs = emb.projection if use_projection else emb.vectors
    with open(path, "w", encoding="utf-8") as fh:
        for i, row in enumerate(vecs):
            vals = "\t".join(repr(float(v)) for v in row)
            fh.write(f"{emb.ids[i]}\t{int(emb.grades[i])}\t{emb.sites[i]}\t{vals}\n")


def read_embeddings_tsv(path) -> EmbeddingSet:
    ids, grades, sites, rows = [], [], [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            ids.append(parts[0])
            grades.append(int(parts[1]))
            sites.append(parts[2])
            rows.append([float(v) for v in parts[3:]])
    return EmbeddingSet(ids, np.array(grades, dtype=np.int64), sites, np.array(rows, dtype=np.float32))


# ---------------------------------------------------------------------------
# drift statistics
# ---------------------------------------------------------------------------


def median_bandwidth(x: np.ndarray, y: np.ndarray) -> float:
    """Median pairwise Euclidean distance over the pooled sample."""
    z = np.concatenate([x, y], axis=0)
    d = np.sqrt(kernels.sq_dists(z, z))
    iu = np.triu_indices(len(z), k=1)
    med = float(np.median(d[iu])) if iu[0].size else 0.0
    return med if med > 0 else 1.0


def _rbf_grams(x, y, bandwidth):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) < 2 or len(y) < 2:
        raise ValueError("MMD needs at least two points per set")
    s = median_bandwidth(x, y) if bandwidth is None else bandwidth
    g = 1.0 / (2.0 * s * s)
    return (np.exp(-g * kernels.sq_dists(x, x)), np.exp(-g * kernels.sq_dists(y, y)),
            np.exp(-g * kernels.sq_dists(x, y)))


def mmd2_unbiased(x, y, bandwidth: float | None = None) -> float:
    """Unbiased squared MMD with an RBF kernel ``exp(-|a-b|^2 / (2 s^2))``.

    When both samples have the same size the cross term also drops its
    diagonal (the paired U-statistic), so identical inputs give exactly 0.
    Being unbiased, the estimate dips below zero for same-law samples, but
    never below ``-(1/m + 1/n)`` since the kernel lies in [0, 1].
    """
    kxx, kyy, kxy = _rbf_grams(x, y, bandwidth)
    m, n = len(kxx), len(kyy)
    tx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    ty = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    if m == n:
        txy = (kxy.sum() - np.trace(kxy)) / (m * (m - 1))
    else:
        txy = kxy.sum() / (m * n)
    # sum the two within-set terms symmetrically so d(a, b) == d(b, a)
    return float((tx + ty) - 2.0 * txy)


def mmd2_biased(x, y, bandwidth: float | None = None) -> float:
    """V-statistic squared MMD: the RKHS distance of the empirical mean embeddings.

    Never negative and independent of row order, at the price of a positive
    bias of order ``1/m + 1/n``.
    """
    kxx, kyy, kxy = _rbf_grams(x, y, bandwidth)
    return float(max(kxx.mean() + kyy.mean() - 2.0 * kxy.mean(), 0.0))


def drift_distance(a, b) -> float:
    """Squared MMD between two embedding clouds, median-heuristic bandwidth."""
    a = a.vectors if isinstance(a, EmbeddingSet) else a
    b = b.vectors if isinstance(b, EmbeddingSet) else b
    return mmd2_unbiased(a, b)


def centroid_distances(a: EmbeddingSet, b: EmbeddingSet) -> dict[int, float]:
    """L2 distance between per-grade centroids of two embedding sets."""
    out = {}
    for g in range(NUM_GRADES):
        ma, mb = a.grades == g, b.grades == g
        if ma.any() and mb.any():
            out[g] = float(np.linalg.norm(a.vectors[ma].mean(0) - b.vectors[mb].mean(0)))
    return out


def drift_report(a: EmbeddingSet, b: EmbeddingSet) -> dict:
    return {
        "mmd2": drift_distance(a, b),
        "mmd2_biased": mmd2_biased(a.vectors, b.vectors),
        "centroid_l2": {str(k): v for k, v in centroid_distances(a, b).items()},
    }
