"""Prototype scoring, hard-margin linear SVM, ROC AUC, and report export.

A class prototype is the per-position, per-channel mean of the embeddings of
that class's non-defective images. A test image is reduced to a distance map
(per spatial cell, the Euclidean distance across the 16 channels between its
embedding and the prototype) and then to the pair (mean distance, max
distance). Per (class, defect type) those pairs are separated by a linear
SVM trained at C = 1e8, whose decision values feed a rank-based ROC AUC.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.stats import rankdata

from . import data as data_mod
from .errors import ConfigError, ShapeError, UndefinedAucError
from .network import FeatureExtractor

_EPS = 1e-12  # matches the distance op's epsilon under the sqrt


# ---------------------------------------------------------------------------
# prototypes and distance features


@dataclass
class Prototype:
    class_name: str
    feature_mean: np.ndarray  # (h, w, 16) float32
    source_count: int


def build_prototype(net: FeatureExtractor, images, class_name: str = "") -> Prototype:
    """Mean embedding over non-defective images (accumulated in float64)."""
    acc = None
    count = 0
    for img in images:
        emb = net.embed(img)
        if acc is None:
            acc = emb.astype(np.float64)
        else:
            if emb.shape != acc.shape:
                raise ShapeError(
                    f"build_prototype: embedding shape {emb.shape} != {acc.shape}")
            acc += emb
        count += 1
    if count == 0:
        raise ConfigError("build_prototype: needs at least one image")
    return Prototype(class_name=class_name,
                     feature_mean=(acc / count).astype(np.float32),
                     source_count=count)


def _distance_from_embedding(emb: np.ndarray, proto: Prototype) -> np.ndarray:
    if emb.shape != proto.feature_mean.shape:
        raise ShapeError(f"distance_map: embedding shape {emb.shape} does not "
                         f"match prototype {proto.feature_mean.shape}")
    diff = emb.astype(np.float64) - proto.feature_mean
    return np.sqrt((diff * diff).sum(axis=-1) + _EPS).astype(np.float32)


def distance_map(net: FeatureExtractor, image, proto: Prototype) -> np.ndarray:
    """Per-cell Euclidean distance between the image embedding and prototype."""
    return _distance_from_embedding(net.embed(image), proto)


def score_features(dmap: np.ndarray) -> tuple[float, float]:
    """(mean, max) over all cells of a distance map."""
    if dmap.size == 0:
        raise ShapeError("score_features: empty distance map")
    return float(dmap.mean()), float(dmap.max())


@dataclass
class ScorePoint:
    image_id: str
    mean_distance: float
    max_distance: float
    label: str                  # "good" or "defective"
    defect_type: str | None = None


def score_image(net: FeatureExtractor, image, proto: Prototype,
                image_id: str = "", label: str = "good",
                defect_type: str | None = None) -> ScorePoint:
    """Reduce one image to its (mean, max) prototype-distance features."""
    mean, mx = score_features(distance_map(net, image, proto))
    return ScorePoint(image_id=image_id, mean_distance=mean, max_distance=mx,
                      label=label, defect_type=defect_type)


# ---------------------------------------------------------------------------
# linear SVM (SMO on the dual)


@dataclass
class SvmModel:
    weights: np.ndarray         # (2,) in standardized feature space
    bias: float
    C: float
    converged: bool
    iterations: int
    feature_mean: np.ndarray
    feature_std: np.ndarray

    def decision(self, point) -> float:
        x = (np.asarray(point, dtype=np.float64) - self.feature_mean) / self.feature_std
        return float(self.weights @ x + self.bias)


def fit_linear_svm(points, labels, C: float = 1e8, tol: float = 1e-6,
                   max_iter: int = 1_000_000) -> SvmModel:
    """Soft-margin linear SVM via SMO with maximal-violating-pair selection.

    Features are standardized internally (the model stores the affine map);
    at C = 1e8 separable data is driven to the hard-margin solution, every
    training margin reaching 1 within the KKT tolerance.
    """
    x = np.asarray(points, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if x.ndim != 2 or len(x) != len(y):
        raise ShapeError(f"fit_linear_svm: bad shapes {x.shape}, {y.shape}")
    if not (np.any(y > 0) and np.any(y < 0)):
        raise ConfigError("fit_linear_svm: need at least one point of each label")

    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    xs = (x - mu) / sd

    n = len(xs)
    kernel = xs @ xs.T
    diag = np.diag(kernel).copy()
    alpha = np.zeros(n)
    f = np.zeros(n)  # decision values without bias: sum_j alpha_j y_j K_ij
    tau = 1e-12

    converged = False
    iterations = 0
    m_val = M_val = 0.0
    while iterations < max_iter:
        if iterations and iterations % 1000 == 0:
            f = (alpha * y) @ kernel  # shed accumulated round-off
        cand = y - f  # -y_i * grad_i; also the per-point bias candidate
        up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
        low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < C))
        m_val = cand[up].max()
        M_val = cand[low].min()
        if m_val - M_val <= tol:
            converged = True
            break
        i = int(np.flatnonzero(up)[np.argmax(cand[up])])
        # second-order choice of j: maximal objective decrease, which avoids
        # near-duplicate pairs whose tiny curvature would cause giant steps
        gap = m_val - cand
        eta_all = np.maximum(diag[i] + diag - 2.0 * kernel[i], tau)
        viable = low & (gap > 0)
        gain = np.where(viable, gap * gap / eta_all, -np.inf)
        j = int(np.argmax(gain))
        iterations += 1

        # step of length lam along the feasible direction (alpha_i moves by
        # y_i*lam, alpha_j by -y_j*lam); clipping against the box hits the
        # bounds exactly, so no round-off dust survives in alpha
        eta = max(diag[i] + diag[j] - 2.0 * kernel[i, j], tau)
        lam = (cand[i] - cand[j]) / eta
        bound_i = (C - alpha[i]) if y[i] > 0 else alpha[i]
        bound_j = alpha[j] if y[j] > 0 else (C - alpha[j])
        lam = min(lam, bound_i, bound_j)
        if lam == bound_i:
            alpha[i] = C if y[i] > 0 else 0.0
        else:
            alpha[i] += y[i] * lam
        if lam == bound_j:
            alpha[j] = 0.0 if y[j] > 0 else C
        else:
            alpha[j] -= y[j] * lam
        f += lam * (kernel[i] - kernel[j])

    w = (alpha * y) @ xs
    free = (alpha > 0) & (alpha < C)
    if converged and free.any():
        bias = float((y - f)[free].mean())
    else:
        bias = float((m_val + M_val) / 2.0)
    return SvmModel(weights=w, bias=bias, C=C, converged=converged,
                    iterations=iterations, feature_mean=mu, feature_std=sd)


def svm_decision(model: SvmModel, point) -> float:
    """Signed distance-like score; sign is the predicted class."""
    return model.decision(point)


# ---------------------------------------------------------------------------
# ROC AUC


def roc_auc(scores, labels) -> float:
    """Rank-based (Mann-Whitney) AUC with ties credited 0.5.

    Equals the probability that a uniformly random positive outranks a
    uniformly random negative.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    pos = y > 0
    n_pos = int(pos.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAucError("roc_auc: need at least one point of each label")
    ranks = rankdata(s)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


# ---------------------------------------------------------------------------
# end-to-end evaluation


@dataclass
class EvalReport:
    repetitions: int
    cells: dict[tuple[str, str], list[float]] = field(default_factory=dict)

    def cell_mean(self, cls: str, defect: str) -> float:
        return float(np.mean(self.cells[(cls, defect)]))

    def class_means(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for cls in sorted({c for c, _ in self.cells}):
            vals = [self.cell_mean(c, d) for c, d in self.cells if c == cls]
            out[cls] = float(np.mean(vals))
        return out

    def defect_means(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for defect in sorted({d for _, d in self.cells}):
            vals = [self.cell_mean(c, d) for c, d in self.cells if d == defect]
            out[defect] = float(np.mean(vals))
        return out

    def overall_class_mean(self) -> float:
        return float(np.mean(list(self.class_means().values())))

    def overall_defect_mean(self) -> float:
        return float(np.mean(list(self.defect_means().values())))


def evaluate(nets, index, image_size: int = 1024, heatmap_dir=None,
             image_cache: dict | None = None) -> EvalReport:
    """Score every class of the dataset with one network per repetition.

    Per repetition and class: a prototype is built from the class's reserved
    good images, those same good images and each defect type's test images
    are reduced to (mean, max) distance features, a linear SVM is fitted on
    the labeled points of each (class, defect) pairing, and the AUC of its
    decision values is recorded. Classes without defective test images simply
    contribute no cells. When `heatmap_dir` is set, the first repetition
    writes one heatmap PNG per scored image.
    """
    nets = list(nets)
    if not nets:
        raise ConfigError("evaluate: need at least one trained network")
    cache = image_cache if image_cache is not None else {}

    def load(path) -> np.ndarray:
        key = (str(path), image_size)
        if key not in cache:
            cache[key] = data_mod.load_and_preprocess(path, size=image_size)
        return cache[key]

    report = EvalReport(repetitions=len(nets))
    heatmap_root = Path(heatmap_dir) if heatmap_dir is not None else None

    for rep, net in enumerate(nets):
        for cls in sorted(index.classes):
            entry = index.classes[cls]
            if not entry.reserved_images or not entry.test_defective:
                continue
            good_embs = [net.embed(load(p)) for p in entry.reserved_images]
            mean_emb = np.mean(np.stack([e.astype(np.float64) for e in good_embs]),
                               axis=0).astype(np.float32)
            proto = Prototype(class_name=cls, feature_mean=mean_emb,
                              source_count=len(good_embs))
            good_maps = [_distance_from_embedding(e, proto) for e in good_embs]
            good_feats = [score_features(m) for m in good_maps]
            if rep == 0 and heatmap_root is not None:
                for path, dmap in zip(entry.reserved_images, good_maps):
                    export_heatmap(dmap, heatmap_root / f"{cls}__good__{path.stem}.png")

            for defect in sorted(entry.test_defective):
                paths = entry.test_defective[defect]
                defect_feats = []
                for path in paths:
                    dmap = _distance_from_embedding(net.embed(load(path)), proto)
                    defect_feats.append(score_features(dmap))
                    if rep == 0 and heatmap_root is not None:
                        export_heatmap(
                            dmap, heatmap_root / f"{cls}__{defect}__{path.stem}.png")
                pts = np.array(good_feats + defect_feats)
                lbl = np.array([-1.0] * len(good_feats) + [1.0] * len(defect_feats))
                model = fit_linear_svm(pts, lbl)
                scores = [model.decision(p) for p in pts]
                auc = roc_auc(scores, lbl)
                report.cells.setdefault((cls, defect), []).append(auc)
    return report


# ---------------------------------------------------------------------------
# exports


def export_heatmap(dmap: np.ndarray, path) -> None:
    """8-bit PNG of the map rescaled to [0, 255], plus a .scale.txt sidecar
    recording the raw min/max so absolute values can be recovered."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lo = float(dmap.min())
    hi = float(dmap.max())
    if hi > lo:
        scaled = np.round((dmap - lo) / (hi - lo) * 255.0)
    else:
        scaled = np.zeros_like(dmap)
    Image.fromarray(scaled.astype(np.uint8), mode="L").save(path)
    sidecar = path.with_suffix("").with_name(path.stem + ".scale.txt")
    sidecar.write_text(f"min {lo:.9g}\nmax {hi:.9g}\n")


def export_report(report: EvalReport, path) -> None:
    """CSV with columns class,defect_type,repetition,auc.

    Rows: one per (class, defect, repetition), then a "mean" row per cell,
    per-class means (defect_type=all), per-defect means (class=all), and two
    overall rows with repetition mean_by_class / mean_by_defect.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["class", "defect_type", "repetition", "auc"])
        for cls, defect in sorted(report.cells):
            for rep, auc in enumerate(report.cells[(cls, defect)], start=1):
                writer.writerow([cls, defect, rep, f"{auc:.10g}"])
            writer.writerow([cls, defect, "mean",
                             f"{report.cell_mean(cls, defect):.10g}"])
        for cls, mean in report.class_means().items():
            writer.writerow([cls, "all", "mean", f"{mean:.10g}"])
        for defect, mean in report.defect_means().items():
            writer.writerow(["all", defect, "mean", f"{mean:.10g}"])
        writer.writerow(["all", "all", "mean_by_class",
                         f"{report.overall_class_mean():.10g}"])
        writer.writerow(["all", "all", "mean_by_defect",
                         f"{report.overall_defect_mean():.10g}"])
