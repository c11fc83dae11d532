"""Measurement instruments: accuracy, mAP, verification TAR@FAR, linear probe,
k-means cluster purity and convergence lead."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tensor
from .errors import ConfigError, ContractError, DimensionError
from .seeding import rng_for


@dataclass
class Curve:
    name: str
    epochs: list[int]
    values: list[float]

    def __post_init__(self):
        if len(self.epochs) != len(self.values):
            raise DimensionError("curve epochs and values differ in length")
        if any(b <= a for a, b in zip(self.epochs, self.epochs[1:])):
            raise ContractError(f"curve {self.name!r} epochs must be strictly increasing")

    def __len__(self) -> int:
        return len(self.epochs)

    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.epochs, self.values))


@dataclass
class MetricsReport:
    """Evaluation bundle; absent metrics stay ``None``."""

    accuracy: Optional[float] = None
    per_class_ap: Optional[list[float]] = None
    mAP: Optional[float] = None
    tar: dict[float, float] = field(default_factory=dict)
    thresholds: dict[float, float] = field(default_factory=dict)
    far_floor: Optional[float] = None
    probe_accuracy: Optional[float] = None
    purity: Optional[float] = None
    counts: dict[str, float] = field(default_factory=dict)

    def rows(self) -> list[tuple[str, str, float]]:
        """Flat (metric, level, value) rows in a fixed order."""
        out = []
        if self.accuracy is not None:
            out.append(("accuracy", "", self.accuracy))
        if self.mAP is not None:
            out.append(("mAP", "", self.mAP))
            for k, ap in enumerate(self.per_class_ap or []):
                out.append(("AP", str(k), ap))
        for level in sorted(self.tar, reverse=True):
            out.append(("TAR", _fmt_level(level), self.tar[level]))
        for level in sorted(self.thresholds, reverse=True):
            out.append(("threshold", _fmt_level(level), self.thresholds[level]))
        if self.far_floor is not None:
            out.append(("far_floor", "", self.far_floor))
        if self.probe_accuracy is not None:
            out.append(("probe_accuracy", "", self.probe_accuracy))
        if self.purity is not None:
            out.append(("purity", "", self.purity))
        for key in sorted(self.counts):
            out.append((key, "", float(self.counts[key])))
        return out


def _fmt_level(level: float) -> str:
    return f"{level:g}"


def top1_accuracy(logits, labels) -> float:
    """Fraction of rows whose argmax (lowest index on ties) equals the label."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2 or len(logits) == 0:
        raise ContractError("top1_accuracy needs a non-empty B×K score matrix")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def average_precision(scores, positives) -> float:
    """Mean of precision at each positive, ranking by score with ties broken by index."""
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    order = np.argsort(-scores, kind="stable")
    hits = positives[order]
    if not hits.any():
        raise ContractError("average precision needs at least one positive")
    ranks = np.flatnonzero(hits) + 1
    # fsum is exactly rounded, so the value does not depend on summation order
    return math.fsum(np.arange(1, len(ranks) + 1) / ranks) / len(ranks)


def mean_average_precision(scores, labels) -> tuple[float, list[float], dict[str, int]]:
    """Per-class AP over the N×K score matrix and their mean.

    Classes with no positive sample are skipped; their number is returned in
    the counts dict under ``"classes_without_positives"``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 2 or scores.shape[0] != len(labels):
        raise DimensionError(f"scores {scores.shape} do not match {len(labels)} labels")
    aps = []
    skipped = 0
    for k in range(scores.shape[1]):
        pos = labels == k
        if not pos.any():
            skipped += 1
            aps.append(math.nan)
            continue
        aps.append(average_precision(scores[:, k], pos))
    valid = [a for a in aps if not math.isnan(a)]
    if not valid:
        raise ContractError("no class has a positive sample")
    return math.fsum(valid) / len(valid), aps, {"classes_without_positives": skipped}


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise DimensionError(f"cosine similarity of vectors with sizes {a.size} and {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ContractError("cosine similarity is undefined for a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def pair_similarities(embeddings, ids) -> tuple[np.ndarray, np.ndarray]:
    """Cosine similarity of every unordered pair (i < j) and whether it is genuine."""
    x = np.asarray(embeddings, dtype=np.float64)
    ids = np.asarray(ids)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ContractError("zero embedding cannot be compared by cosine similarity")
    x = x / norms
    iu, ju = np.triu_indices(len(x), k=1)
    sims = np.clip(np.einsum("ij,ij->i", x[iu], x[ju]), -1.0, 1.0)
    return sims, ids[iu] == ids[ju]


def far_floor(n_impostors: int) -> float:
    """Smallest FAR level evaluated with ``n_impostors`` impostor pairs."""
    return 10.0 / n_impostors


def tar_at_far(genuine, impostor, far_levels) -> tuple[dict[float, float], dict[float, float]]:
    """TAR and acceptance threshold for each FAR level (accept when sim >= t).

    The threshold for level f is the smallest observed impostor score t with
    #(impostor >= t) / #impostor <= f, or just above the largest impostor score
    when no observed score qualifies.
    """
    genuine = np.sort(np.asarray(genuine, dtype=np.float64))
    impostor = np.sort(np.asarray(impostor, dtype=np.float64))
    if genuine.size == 0 or impostor.size == 0:
        raise ContractError("tar_at_far needs at least one genuine and one impostor pair")
    n_imp = impostor.size
    candidates = np.unique(impostor)
    # number of impostor scores >= each candidate
    accepted = n_imp - np.searchsorted(impostor, candidates, side="left")
    tars, thresholds = {}, {}
    for f in far_levels:
        ok = np.flatnonzero(accepted <= f * n_imp)
        t = candidates[ok[0]] if ok.size else np.nextafter(impostor[-1], np.inf)
        tars[f] = float((genuine.size - np.searchsorted(genuine, t, side="left")) / genuine.size)
        thresholds[f] = float(t)
    return tars, thresholds


def verification_report(embeddings, ids, far_levels) -> MetricsReport:
    """TAR@FAR over all pairs of ``embeddings``; levels below the pair-count floor are dropped."""
    sims, genuine = pair_similarities(embeddings, ids)
    n_imp = int((~genuine).sum())
    if n_imp == 0 or genuine.sum() == 0:
        raise ContractError("verification needs both genuine and impostor pairs")
    floor = far_floor(n_imp)
    levels = [f for f in far_levels if f >= floor]
    tars, thresholds = tar_at_far(sims[genuine], sims[~genuine], levels)
    return MetricsReport(
        tar=tars,
        thresholds=thresholds,
        far_floor=floor,
        counts={"genuine_pairs": int(genuine.sum()), "impostor_pairs": n_imp},
    )


def linear_probe(
    features_train,
    labels_train,
    features_test,
    labels_test,
    probe_epochs: int = 200,
    lr: float = 0.1,
    momentum: float = 0.9,
) -> float:
    """Test accuracy of a softmax linear classifier fit on frozen features.

    Features are standardised with training statistics, then a zero-initialised
    head is trained by full-batch momentum SGD.
    """
    from .trainer import sgd_step

    xtr = np.asarray(features_train, dtype=np.float64)
    xte = np.asarray(features_test, dtype=np.float64)
    ytr = np.asarray(labels_train, dtype=np.int64)
    yte = np.asarray(labels_test, dtype=np.int64)
    if xtr.ndim != 2 or xte.ndim != 2 or xtr.shape[1] != xte.shape[1]:
        raise DimensionError(f"probe feature shapes disagree: {xtr.shape} vs {xte.shape}")
    classes = np.unique(ytr)
    if classes.size < 2:
        raise ConfigError("linear probe needs at least two classes in the training set")
    k = int(max(ytr.max(), yte.max(initial=0))) + 1
    mu = xtr.mean(axis=0)
    sd = xtr.std(axis=0)
    sd[sd == 0] = 1.0
    xtr = Tensor((xtr - mu) / sd)
    xte_std = (xte - mu) / sd
    w = Tensor(np.zeros((xtr.shape[1], k)), track_grad=True)
    b = Tensor(np.zeros(k), track_grad=True)
    vel = [np.zeros_like(w.values), np.zeros_like(b.values)]
    for _ in range(probe_epochs):
        w.zero_grad()
        b.zero_grad()
        with Graph() as g:
            loss = ad.softmax_cross_entropy(ad.add(ad.matmul(xtr, w), b), ytr)
        ad.backward(loss, g)
        sgd_step([w.values, b.values], [w.grad, b.grad], vel, lr, momentum)
    return top1_accuracy(xte_std @ w.values + b.values, yte)


def _kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = [x[rng.integers(n)]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total == 0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def kmeans(x, k: int, restarts: int = 10, seed: int = 0, max_iter: int = 100) -> tuple[np.ndarray, float]:
    """Lloyd's algorithm with k-means++ seeding; best inertia over seeded restarts."""
    x = np.asarray(x, dtype=np.float64)
    if k < 1 or k > len(x):
        raise ConfigError(f"k={k} must lie in [1, N={len(x)}]")
    best_labels, best_inertia = None, math.inf
    for r in range(restarts):
        rng = rng_for(seed, "kmeans", r)
        centers = _kmeans_pp_init(x, k, rng)
        labels = None
        for _ in range(max_iter):
            d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
            new = np.argmin(d2, axis=1)
            if labels is not None and np.array_equal(new, labels):
                break
            labels = new
            for c in range(k):
                members = x[labels == c]
                if len(members):
                    centers[c] = members.mean(axis=0)
        inertia = float(((x - centers[labels]) ** 2).sum())
        if inertia < best_inertia:
            best_labels, best_inertia = labels, inertia
    return best_labels, best_inertia


def purity_of(assignment, attributes) -> float:
    """Sum over clusters of the majority attribute count, divided by N."""
    assignment = np.asarray(assignment)
    attributes = np.asarray(attributes)
    total = 0
    for c in np.unique(assignment):
        _, counts = np.unique(attributes[assignment == c], return_counts=True)
        total += counts.max()
    return total / len(attributes)


def cluster_purity(features, attributes, k: int, restarts: int = 10, seed: int = 0) -> float:
    features = np.asarray(features, dtype=np.float64)
    if k < 2:
        raise ConfigError(f"cluster purity needs k >= 2, got {k}")
    if k > len(features):
        raise ConfigError(f"k={k} exceeds the number of points {len(features)}")
    labels, _ = kmeans(features, k, restarts=restarts, seed=seed)
    return float(purity_of(labels, attributes))


def first_epoch_reaching(curve: Curve, threshold: float) -> Optional[int]:
    for epoch, value in zip(curve.epochs, curve.values):
        if value >= threshold:
            return epoch
    return None


def convergence_lead(curve_a: Curve, curve_b: Curve, threshold: float) -> Optional[int]:
    """Epochs by which ``curve_a`` reaches ``threshold`` before ``curve_b``.

    ``None`` when either curve never reaches the threshold.
    """
    ea = first_epoch_reaching(curve_a, threshold)
    eb = first_epoch_reaching(curve_b, threshold)
    if ea is None or eb is None:
        return None
    return eb - ea


def median(values: Sequence[float]) -> float:
    vals = [v for v in values if v is not None and not math.isnan(v)]
    return float(np.median(vals)) if vals else math.nan
