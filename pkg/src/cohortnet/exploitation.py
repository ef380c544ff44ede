"""Cohort exploitation: match a patient against the pool, attend over the
matched cohorts per feature, and add the resulting calibration score to the
base logit.

The calibration score decomposes exactly: each matched cohort contributes
beta_q * (w_c_i . W_V C_q); feature scores are the ordered sums of their
cohort scores and the overall score is the ordered sum of feature scores.
The reported z IS computed via those sums, so the identities hold to the
last bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoder import bce_from_logit
from .numerics import Adam, ParamStore, Tensor, init_uniform
from .pool import LABEL_STAT_DIM, CohortPool


def init_exploit_params(num_features: int, d_h: int, d_a: int, d_v: int,
                        seed: int, head_w=None, head_b=None,
                        finetune_head: bool = False) -> ParamStore:
    rng = np.random.default_rng(seed)
    d_rep = d_h + LABEL_STAT_DIM
    store = ParamStore()
    store.add("cem.WQ", init_uniform(rng, (d_h, d_a), d_h))
    store.add("cem.WK", init_uniform(rng, (d_rep, d_a), d_rep))
    store.add("cem.WV", init_uniform(rng, (d_rep, d_v), d_rep))
    store.add("cem.wc", init_uniform(rng, (num_features, d_v), d_v))
    if finetune_head:
        store.add("head.w", head_w.copy())
        store.add("head.b", np.array(head_b))
    return store


def identify_cohorts(states: np.ndarray, pool: CohortPool) -> dict[int, np.ndarray]:
    """Bitmap per anchor feature via hash probes of the pool's match groups.

    states: (T, F) one patient's state sequence.  A bit is set iff some time
    step's states, restricted to the cohort's features, equal its pattern.
    """
    T = states.shape[0]
    bitmaps = {i: np.zeros(len(pool.by_anchor[i]), dtype=np.int8)
               for i in range(pool.num_features)}
    for anchor, groups in pool.match_groups.items():
        bm = bitmaps[anchor]
        for feats, by_states in groups.items():
            cols = np.array(feats)
            for t in range(T):
                hit = by_states.get(tuple(int(s) for s in states[t, cols]))
                if hit:
                    bm[hit] = 1
    return bitmaps


def matched_local_ids(states: np.ndarray, pool: CohortPool) -> dict[int, list[int]]:
    """Sorted local cohort indices per anchor with their bit set."""
    bitmaps = identify_cohorts(states, pool)
    return {i: np.nonzero(bm)[0].tolist() for i, bm in bitmaps.items()}


def attend_cohorts(h_i: np.ndarray, reps: np.ndarray, params: ParamStore):
    """Attention over one feature's matched cohorts (inference path).

    h_i: (d_h,) final-step representation; reps: (nq, d_h+|L|).
    Returns (h_prime (d_v,), beta (nq,)); no matches -> zeros, empty beta.
    """
    d_v = params["cem.WV"].data.shape[1]
    if reps.shape[0] == 0:
        return np.zeros(d_v), np.zeros(0)
    q = h_i @ params["cem.WQ"].data
    scores = (reps @ params["cem.WK"].data) @ q
    shifted = scores - scores.max()
    e = np.exp(shifted)
    beta = e / e.sum()
    vals = reps @ params["cem.WV"].data
    h_prime = beta @ vals
    return h_prime, beta


@dataclass
class CohortScore:
    cohort_id: int
    local_id: int
    beta: float
    score: float


@dataclass
class CalibrationReport:
    base_logit: float
    z: float
    feature_scores: np.ndarray                 # (F,)
    cohort_scores: dict[int, list[CohortScore]]
    bitmaps: dict[int, np.ndarray]
    probability: float
    base_probability: float


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def predict_patient(h_last: np.ndarray, base_logit: float, states: np.ndarray,
                    pool: CohortPool, params: ParamStore) -> CalibrationReport:
    """Full calibrated prediction for one patient.

    h_last: (F, d_h); states: (T, F).  Summation order: cohorts in local
    (pool) order within a feature, features in index order.
    """
    F = pool.num_features
    bitmaps = identify_cohorts(states, pool)
    wc = params["cem.wc"].data
    feature_scores = np.zeros(F)
    cohort_scores: dict[int, list[CohortScore]] = {}
    for i in range(F):
        locals_ = np.nonzero(bitmaps[i])[0]
        anchored = pool.by_anchor[i]
        reps = np.stack([anchored[q].representation for q in locals_]) \
            if locals_.size else np.zeros((0, h_last.shape[1] + LABEL_STAT_DIM))
        _, beta = attend_cohorts(h_last[i], reps, params)
        rows = []
        total = 0.0
        for pos, q in enumerate(locals_):
            val = reps[pos] @ params["cem.WV"].data
            score = float(beta[pos] * (wc[i] @ val))
            total += score
            rows.append(CohortScore(anchored[q].cohort_id, int(q),
                                    float(beta[pos]), score))
        feature_scores[i] = total
        cohort_scores[i] = rows
    z = 0.0
    for i in range(F):
        z += feature_scores[i]
    logit = base_logit + z
    return CalibrationReport(
        base_logit=float(base_logit),
        z=float(z),
        feature_scores=feature_scores,
        cohort_scores=cohort_scores,
        bitmaps=bitmaps,
        probability=float(_sigmoid(logit)),
        base_probability=float(_sigmoid(base_logit)),
    )


def bce_loss(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean binary cross entropy with probabilities clamped to [1e-7, 1-1e-7]."""
    p = np.clip(np.asarray(probs, dtype=float), 1e-7, 1.0 - 1e-7)
    y = np.asarray(labels, dtype=float)
    return float(-(y * np.log(p) + (1 - y) * np.log(1 - p)).mean())


@dataclass
class PaddedMatches:
    """Per-anchor padded matched-cohort representations for a record list."""
    reps: list[np.ndarray]       # per anchor: (N, maxq, d_rep)
    valid: list[np.ndarray]      # per anchor: (N, maxq) float 0/1
    addmask: list[np.ndarray]    # per anchor: (N, maxq) 0 or -inf


def pad_matches(all_matched: list[dict[int, list[int]]],
                pool: CohortPool, d_h: int) -> PaddedMatches:
    N = len(all_matched)
    d_rep = d_h + LABEL_STAT_DIM
    reps, valid, addmask = [], [], []
    for i in range(pool.num_features):
        anchored = pool.by_anchor[i]
        maxq = max((len(m[i]) for m in all_matched), default=0)
        maxq = max(maxq, 1)                     # keep shapes non-degenerate
        R = np.zeros((N, maxq, d_rep))
        V = np.zeros((N, maxq))
        A = np.full((N, maxq), -np.inf)
        for nidx, m in enumerate(all_matched):
            ids = m[i]
            for pos, q in enumerate(ids):
                R[nidx, pos] = anchored[q].representation
                V[nidx, pos] = 1.0
                A[nidx, pos] = 0.0
            if not ids:
                A[nidx, :] = 0.0               # uniform softmax, zeroed by V
        reps.append(R)
        valid.append(V)
        addmask.append(A)
    return PaddedMatches(reps, valid, addmask)


def calibration_logit_batch(params: ParamStore, h_last: np.ndarray,
                            padded: PaddedMatches, rows: np.ndarray) -> Tensor:
    """Batched z for the records selected by `rows` (training path)."""
    F = h_last.shape[1]
    WQ, WK, WV = params["cem.WQ"], params["cem.WK"], params["cem.WV"]
    wc = params["cem.wc"]
    z = None
    for i in range(F):
        R = Tensor(padded.reps[i][rows])                   # (B, maxq, d_rep)
        Vmask = padded.valid[i][rows]                      # constants
        A = padded.addmask[i][rows]
        B, maxq = Vmask.shape
        q = Tensor(h_last[rows, i, :]) @ WQ                # (B, d_a)
        K = R @ WK                                         # (B, maxq, d_a)
        scores = (K @ q.reshape(B, -1, 1)).reshape(B, maxq)
        beta = scores.softmax(axis=-1, mask=A) * Vmask
        vals = R @ WV                                      # (B, maxq, d_v)
        h_prime = (beta.reshape(B, maxq, 1) * vals).sum(axis=1)
        z_i = h_prime @ wc[i]
        z = z_i if z is None else z + z_i
    return z


def predict_scores_calibrated(params: ParamStore, pool: CohortPool,
                              h_last: np.ndarray, base_logits: np.ndarray,
                              states: np.ndarray) -> np.ndarray:
    """Calibrated probabilities for many records (inference path)."""
    out = np.zeros(len(base_logits))
    for n in range(len(base_logits)):
        rep = predict_patient(h_last[n], base_logits[n], states[n], pool, params)
        out[n] = rep.probability
    return out


def train_exploitation(params: ParamStore, pool: CohortPool, *,
                       h_last: np.ndarray, base_logits: np.ndarray,
                       labels: np.ndarray, matched: list[dict[int, list[int]]],
                       valid_h_last: np.ndarray, valid_base: np.ndarray,
                       valid_labels: np.ndarray,
                       valid_matched: list[dict[int, list[int]]],
                       htilde_last: np.ndarray | None = None,
                       valid_htilde: np.ndarray | None = None,
                       lr=1e-3, batch_size=64, epochs=50, patience=10, seed=0):
    """Stage-4 training on frozen encoder outputs and a frozen pool.

    Optimizes the attention maps and calibration weights (plus the head when
    present in `params`) with Adam on BCE; early stopping on validation
    average precision with the given patience.
    """
    from .encoder import TrainLog
    from .metrics import average_precision

    rng = np.random.default_rng(seed)
    d_h = h_last.shape[2]
    padded = pad_matches(matched, pool, d_h)
    padded_valid = pad_matches(valid_matched, pool, d_h)
    finetune = "head.w" in params
    if finetune and (htilde_last is None or valid_htilde is None):
        raise ValueError("head fine-tuning requires htilde_last arrays")
    adam = Adam(params, lr=lr)
    n = len(labels)
    log = TrainLog()
    best = (-np.inf, None)
    bad = 0

    def base_tensor(rows, htilde, fixed):
        if finetune:
            return Tensor(htilde[rows]) @ params["head.w"] + params["head.b"]
        return Tensor(fixed[rows])

    def eval_valid():
        rows = np.arange(len(valid_labels))
        z = calibration_logit_batch(params, valid_h_last, padded_valid, rows)
        base = base_tensor(rows, valid_htilde, valid_base)
        logits = base.data + z.data
        return 1.0 / (1.0 + np.exp(-logits))

    for epoch in range(epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            rows = order[start:start + batch_size]
            z = calibration_logit_batch(params, h_last, padded, rows)
            logit = z + base_tensor(rows, htilde_last, base_logits)
            loss = bce_from_logit(logit, labels[rows])
            params.zero_grad()
            loss.backward()
            adam.step()
            losses.append(float(loss.data))
        try:
            metric = average_precision(eval_valid(), valid_labels)
        except ValueError:
            metric = 0.0
        log.train_loss.append(float(np.mean(losses)))
        log.valid_metric.append(metric)
        log.epochs = epoch + 1
        if metric > best[0]:
            best = (metric, {k: params[k].data.copy() for k in params.names()})
            log.best_epoch = epoch
            bad = 0
        else:
            bad += 1
            if bad >= patience:
                break
    if best[1] is not None:
        params.load_arrays(best[1])
    return log
