"""Cohort pool: evidence statistics, representations, frequency filtering,
and the exact-match inverted index used for retrieval and identification.

A cohort's representation is the mean of the anchor feature's encoder state
over all matching (patient, time) occurrences, concatenated with three label
statistics: the positive rate over distinct patients, a log-scaled occurrence
frequency, and a log-scaled patient count.  Summation order for the mean and
all score roll-ups is occurrence order (patient index ascending, then time).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .discovery import canonical_pattern

LABEL_STAT_DIM = 3


class PoolError(Exception):
    pass


@dataclass(eq=False)
class Cohort:
    cohort_id: int                 # global id within the pool
    anchor: int
    pattern: tuple                 # ((feature, state), ...) sorted by feature
    representation: np.ndarray     # (d_h + LABEL_STAT_DIM,)
    frequency: int                 # occurrence count over (patient, time)
    patients: int                  # distinct patient count
    pos_rate: float
    occurrences: list = field(default_factory=list, repr=False)

    @property
    def features(self) -> tuple:
        return tuple(f for f, _ in self.pattern)

    def pattern_label(self, feature_names=None) -> str:
        def fname(f):
            return feature_names[f] if feature_names else f"f{f}"
        return "/".join(f"{fname(f)}(S{s})" for f, s in self.pattern)


def label_stats(frequency: int, patients: int, pos_patients: int,
                n_train: int, num_steps: int) -> np.ndarray:
    pos_rate = pos_patients / patients
    freq_scale = np.log1p(frequency) / np.log1p(max(n_train * num_steps, 1))
    pat_scale = np.log1p(patients) / np.log1p(max(n_train, 1))
    return np.array([pos_rate, freq_scale, pat_scale])


def apply_frequency_filter(occurrence_map: dict, min_occurrences: int,
                           min_patients: int) -> dict:
    """Keep patterns with enough occurrences AND enough distinct patients."""
    if min_occurrences < 1 or min_patients < 1:
        raise PoolError("filter thresholds must be >= 1")
    out = {}
    for key, occs in occurrence_map.items():
        if len(occs) < min_occurrences:
            continue
        if len({p for p, _ in occs}) < min_patients:
            continue
        out[key] = occs
    return out


def build_cohort(cohort_id: int, anchor: int, pattern: tuple, occurrences: list,
                 h: np.ndarray, labels: np.ndarray, n_train: int) -> Cohort:
    """h: (N, T, F, d_h) frozen encoder states; labels: (N,) train labels."""
    if not occurrences:
        raise PoolError("cohort requires at least one occurrence")
    num_steps = h.shape[1]
    total = np.zeros(h.shape[3])
    for p, t in occurrences:                      # fixed order: as enumerated
        total += h[p, t, anchor]
    mean_rep = total / len(occurrences)
    patient_ids = sorted({p for p, _ in occurrences})
    pos = sum(int(labels[p]) for p in patient_ids)
    stats = label_stats(len(occurrences), len(patient_ids), pos,
                        n_train, num_steps)
    return Cohort(
        cohort_id=cohort_id,
        anchor=anchor,
        pattern=pattern,
        representation=np.concatenate([mean_rep, stats]),
        frequency=len(occurrences),
        patients=len(patient_ids),
        pos_rate=float(stats[0]),
        occurrences=list(occurrences),
    )


class CohortPool:
    """Immutable indexed pool; safe for concurrent read-only queries."""

    def __init__(self, cohorts: list[Cohort], num_features: int):
        self.cohorts = cohorts
        self.num_features = num_features
        self.by_anchor: dict[int, list[Cohort]] = {i: [] for i in range(num_features)}
        # exact-match index: (anchor, pattern) -> cohort
        self.index: dict = {}
        # identification structure: anchor -> feature set -> state tuple -> local ids
        self.match_groups: dict = {i: {} for i in range(num_features)}
        for c in cohorts:
            key = (c.anchor, c.pattern)
            if key in self.index:
                raise PoolError("duplicate (anchor, pattern) keys in pool")
            self.index[key] = c
            local = len(self.by_anchor[c.anchor])
            self.by_anchor[c.anchor].append(c)
            states = tuple(s for _, s in c.pattern)
            self.match_groups[c.anchor].setdefault(c.features, {}) \
                .setdefault(states, []).append(local)

    def __len__(self):
        return len(self.cohorts)

    def anchor_counts(self) -> dict[int, int]:
        return {i: len(v) for i, v in self.by_anchor.items()}

    def lookup(self, anchor: int, pattern) -> Cohort | None:
        return self.index.get((anchor, canonical_pattern(
            [f for f, _ in pattern], [s for _, s in pattern])))


def retrieve_patients(pattern: tuple, states: np.ndarray) -> list:
    """All (patient, time) where the state assignment matches exactly.

    pattern: ((feature, state), ...); states: (N, T, F).  Vectorized scan,
    equivalent to the nested-loop definition.
    """
    feats = np.array([f for f, _ in pattern])
    vals = np.array([s for _, s in pattern])
    hits = (states[:, :, feats] == vals).all(axis=2)
    ps, ts = np.nonzero(hits)
    return list(zip(ps.tolist(), ts.tolist()))


def build_pool(occurrence_map: dict, h: np.ndarray, labels: np.ndarray,
               num_features: int, min_occurrences: int = 50,
               min_patients: int = 10) -> CohortPool:
    """Filter the enumeration, build each cohort, and index the result."""
    kept = apply_frequency_filter(occurrence_map, min_occurrences, min_patients)
    cohorts = []
    for key in sorted(kept):                      # deterministic pool order
        anchor, pattern = key
        cohorts.append(build_cohort(len(cohorts), anchor, pattern, kept[key],
                                    h, labels, n_train=h.shape[0]))
    return CohortPool(cohorts, num_features)


def save_pool(path: str | Path, pool: CohortPool):
    doc = {
        "version": 1,
        "num_features": pool.num_features,
        "cohorts": [
            {
                "id": c.cohort_id,
                "anchor": c.anchor,
                "pattern": [[f, s] for f, s in c.pattern],
                "representation": c.representation.tolist(),
                "frequency": c.frequency,
                "patients": c.patients,
                "pos_rate": c.pos_rate,
            }
            for c in pool.cohorts
        ],
    }
    with open(path, "w") as f:
        json.dump(doc, f)
        f.write("\n")


def load_pool(path: str | Path) -> CohortPool:
    with open(path) as f:
        doc = json.load(f)
    if doc.get("version") != 1:
        raise PoolError(f"unsupported pool file version {doc.get('version')}")
    cohorts = [
        Cohort(
            cohort_id=c["id"],
            anchor=c["anchor"],
            pattern=tuple((int(f), int(s)) for f, s in c["pattern"]),
            representation=np.array(c["representation"]),
            frequency=c["frequency"],
            patients=c["patients"],
            pos_rate=c["pos_rate"],
        )
        for c in doc["cohorts"]
    ]
    return CohortPool(cohorts, doc["num_features"])
