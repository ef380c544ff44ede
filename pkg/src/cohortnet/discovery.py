"""Per-feature state models and attention-guided pattern enumeration.

Each feature's fused vectors (over all train patients and time steps where
the feature is present) are clustered with K-Means; cluster ids 1..k become
the feature's states and state 0 is reserved for never-present features.
A pattern anchors at a feature, adds its top-n interaction partners by
attention, and reads off their current states.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DiscoveryError(Exception):
    pass


@dataclass
class KMeansResult:
    centroids: np.ndarray          # (k, d)
    labels: np.ndarray             # (n,)
    inertia_history: list[float]
    iterations: int


def _inertia(x, centroids, labels):
    return float(((x - centroids[labels]) ** 2).sum())


def kmeans_fit(x: np.ndarray, k: int, seed: int, max_iter: int = 100,
               tol: float = 1e-6) -> KMeansResult:
    """k-means++ seeding then Lloyd iterations.

    Empty clusters are reseeded to the point farthest from its centroid;
    stops when the max centroid shift drops below `tol`.
    """
    rng = np.random.default_rng(seed)
    n = x.shape[0]
    if n < k:
        raise DiscoveryError(f"need at least k={k} points, got {n}")

    # k-means++ initialization
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    d2 = ((x - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[j] = x[rng.integers(n)]
        else:
            centroids[j] = x[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((x - centroids[j]) ** 2).sum(axis=1))

    history = []
    labels = np.zeros(n, dtype=int)
    for it in range(max_iter):
        dists = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        labels = dists.argmin(axis=1)
        history.append(_inertia(x, centroids, labels))
        new_centroids = centroids.copy()
        for j in range(k):
            members = labels == j
            if members.any():
                new_centroids[j] = x[members].mean(axis=0)
        # reseed empty clusters to the currently worst-fit point
        for j in range(k):
            if not (labels == j).any():
                residual = ((x - new_centroids[labels]) ** 2).sum(axis=1)
                far = int(residual.argmax())
                new_centroids[j] = x[far]
                labels[far] = j
        shift = np.abs(new_centroids - centroids).max()
        centroids = new_centroids
        if shift < tol:
            break
    dists = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    labels = dists.argmin(axis=1)
    history.append(_inertia(x, centroids, labels))
    return KMeansResult(centroids, labels, history, len(history) - 1)


@dataclass
class FeatureStateModel:
    """States for one feature: 0 = never present, 1..k = centroid ids."""
    feature: int
    k: int                          # effective cluster count (0 if never seen)
    centroids: np.ndarray           # (k, d_o)
    requested_k: int = 0
    reduced: bool = False
    inertia_history: list[float] = field(default_factory=list)
    # filled after assignment over the train set
    state_mean_raw: np.ndarray | None = None    # (k+1,)
    state_counts: np.ndarray | None = None      # (k+1,)


def fit_states(vectors: np.ndarray, feature: int, k: int, seed: int) -> FeatureStateModel:
    """Cluster a feature's fused vectors into k states.

    `vectors` holds only cells where the feature is present.  If fewer than
    k distinct vectors exist, k collapses to the distinct count (recorded).
    """
    if vectors.shape[0] == 0:
        return FeatureStateModel(feature, 0, np.zeros((0, vectors.shape[1])),
                                 requested_k=k, reduced=k > 0)
    distinct = np.unique(vectors, axis=0).shape[0]
    eff_k = min(k, distinct)
    res = kmeans_fit(vectors, eff_k, seed)
    return FeatureStateModel(feature, eff_k, res.centroids, requested_k=k,
                             reduced=eff_k < k,
                             inertia_history=res.inertia_history)


def assign_state(vec: np.ndarray | None, model: FeatureStateModel) -> int:
    """Nearest-centroid state id (1-based); absent -> 0. Ties: lowest id."""
    if vec is None or model.k == 0:
        return 0
    d = ((model.centroids - vec) ** 2).sum(axis=1)
    return int(d.argmin()) + 1


def assign_states_dataset(o: np.ndarray, present: np.ndarray,
                          models: list[FeatureStateModel]) -> np.ndarray:
    """Vectorized state assignment. o: (N, T, F, d_o); present: (N, F) bool.
    Returns int states (N, T, F)."""
    N, T, F, _ = o.shape
    states = np.zeros((N, T, F), dtype=np.int32)
    for i, model in enumerate(models):
        if model.k == 0:
            continue
        flat = o[:, :, i, :].reshape(N * T, -1)
        d = ((flat[:, None, :] - model.centroids[None, :, :]) ** 2).sum(axis=2)
        states[:, :, i] = (d.argmin(axis=1) + 1).reshape(N, T)
        states[~present[:, i], :, i] = 0
    return states


def build_pattern_mask(alpha_row: np.ndarray, i: int, n: int) -> np.ndarray:
    """Binary mask: top-n attention partners of feature i plus i itself.
    Ties break toward the lower feature index."""
    F = alpha_row.shape[0]
    if n >= F:
        raise DiscoveryError(f"n={n} must be < F={F}")
    scores = alpha_row.copy()
    scores[i] = -np.inf                       # self never competes
    order = np.argsort(-scores, kind="stable")
    mask = np.zeros(F, dtype=np.int8)
    mask[order[:n]] = 1
    mask[i] = 1
    return mask


def top_partners(alpha: np.ndarray, n: int) -> np.ndarray:
    """Batched top-n partner indices. alpha: (..., F, F) with self weight on
    the diagonal; returns (..., F, n) partner indices, self excluded."""
    F = alpha.shape[-1]
    if n >= F:
        raise DiscoveryError(f"n={n} must be < F={F}")
    scores = alpha.copy()
    idx = np.arange(F)
    scores[..., idx, idx] = -np.inf
    order = np.argsort(-scores, axis=-1, kind="stable")
    return order[..., :n]


def canonical_pattern(features, states) -> tuple:
    """Sorted-by-feature tuple of (feature, state) pairs."""
    return tuple(sorted(zip((int(f) for f in features), (int(s) for s in states))))


def enumerate_patterns(states: np.ndarray, alpha: np.ndarray, n: int) -> dict:
    """Enumerate every (patient, time, anchor) occurrence.

    states: (N, T, F) ints; alpha: (N, T, F, F).
    Returns {(anchor, pattern): [(p, t), ...]} where pattern is the canonical
    tuple of (feature, state) pairs of size n+1.
    """
    N, T, F = states.shape
    partners = top_partners(alpha, n)          # (N, T, F, n)
    occurrences: dict = {}
    for p in range(N):
        for t in range(T):
            s = states[p, t]
            for i in range(F):
                feats = np.concatenate(([i], partners[p, t, i]))
                key = (i, canonical_pattern(feats, s[feats]))
                occurrences.setdefault(key, []).append((p, t))
    return occurrences


def summarize_states(models: list[FeatureStateModel], states: np.ndarray,
                     raw: np.ndarray, present: np.ndarray):
    """Attach per-state mean raw value and occurrence counts to each model.

    states: (N, T, F); raw: (N, F, T) original-scale values; present: (N, F).
    """
    N, T, F = states.shape
    for i, model in enumerate(models):
        kp1 = model.k + 1
        means = np.zeros(kp1)
        counts = np.zeros(kp1, dtype=np.int64)
        svec = states[:, :, i].ravel()
        rvec = raw[:, i, :].ravel()
        for s in range(kp1):
            mask = svec == s
            counts[s] = int(mask.sum())
            if s > 0 and counts[s] > 0:
                means[s] = float(rvec[mask].mean())
        model.state_mean_raw = means
        model.state_counts = counts
