"""Dataset schema, ingestion, standardization, splitting, and the synthetic
benchmark generator with planted label-correlated patterns.

On-disk format is newline-delimited JSON, one record per line:
    {"id": str, "label": 0|1, "features": {"<name>": [value_or_null x T]}}
A companion schema file fixes the canonical feature order, T, and optional
per-feature embedding bounds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_LOWER = -3.0
DEFAULT_UPPER = 3.0


class DataError(Exception):
    pass


@dataclass
class FeatureSpec:
    name: str
    lower: float = DEFAULT_LOWER   # embedding bounds on the standardized scale
    upper: float = DEFAULT_UPPER

    def __post_init__(self):
        if not (np.isfinite(self.lower) and np.isfinite(self.upper)):
            raise DataError(f"non-finite bounds for feature {self.name!r}")
        if self.lower >= self.upper:
            raise DataError(f"lower >= upper for feature {self.name!r}")


@dataclass
class PatientRecord:
    id: str
    values: np.ndarray      # (F, T) standardized, gaps forward-filled
    raw: np.ndarray         # (F, T) original scale, gaps forward-filled
    observed: np.ndarray    # (F, T) bool, which cells were actually recorded
    present: np.ndarray     # (F,) bool, feature ever observed for this patient
    label: int


@dataclass
class Dataset:
    specs: list[FeatureSpec]
    records: list[PatientRecord]
    mean: np.ndarray        # (F,) train-split standardization stats
    std: np.ndarray         # (F,)
    split: dict[str, str] = field(default_factory=dict)   # record id -> part

    @property
    def num_features(self) -> int:
        return len(self.specs)

    @property
    def num_steps(self) -> int:
        return self.records[0].values.shape[1] if self.records else 0

    def part(self, name: str) -> list[PatientRecord]:
        return [r for r in self.records if self.split[r.id] == name]

    def record_by_id(self, rid: str) -> PatientRecord:
        for r in self.records:
            if r.id == rid:
                return r
        raise KeyError(f"unknown patient id {rid!r}")


def split_assignment(ids: list[str], ratios: tuple[float, float, float],
                     seed: int) -> dict[str, str]:
    """Deterministic permutation split; floor sizes, remainder goes to train."""
    if abs(sum(ratios) - 1.0) > 1e-9 or any(r < 0 for r in ratios):
        raise DataError(f"invalid split ratios {ratios}")
    n = len(ids)
    n_valid = int(np.floor(ratios[1] * n))
    n_test = int(np.floor(ratios[2] * n))
    n_train = n - n_valid - n_test
    perm = np.random.default_rng(seed).permutation(n)
    out = {}
    for rank, idx in enumerate(perm):
        if rank < n_train:
            out[ids[idx]] = "train"
        elif rank < n_train + n_valid:
            out[ids[idx]] = "valid"
        else:
            out[ids[idx]] = "test"
    return out


def _forward_fill(row: np.ndarray, observed: np.ndarray, lead_value: float) -> np.ndarray:
    """Carry the last observed value forward; leading gaps get `lead_value`."""
    out = np.empty_like(row)
    last = lead_value
    for t in range(row.shape[0]):
        if observed[t]:
            last = row[t]
        out[t] = last
    return out


def load_schema(path: str | Path) -> tuple[list[FeatureSpec], int]:
    with open(path) as f:
        doc = json.load(f)
    specs = [
        FeatureSpec(
            name=fs["name"],
            lower=float(fs.get("lower", DEFAULT_LOWER)),
            upper=float(fs.get("upper", DEFAULT_UPPER)),
        )
        for fs in doc["features"]
    ]
    return specs, int(doc["num_steps"])


def save_schema(path: str | Path, specs: list[FeatureSpec], num_steps: int):
    doc = {
        "features": [
            {"name": s.name, "lower": s.lower, "upper": s.upper} for s in specs
        ],
        "num_steps": num_steps,
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")


def _parse_records(path: str | Path, specs: list[FeatureSpec], num_steps: int):
    """Yield (id, label, raw (F,T) with NaN gaps, observed (F,T))."""
    names = [s.name for s in specs]
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"line {lineno}: malformed record ({e})") from e
            rid = str(doc.get("id", f"line{lineno}"))
            if doc.get("label") not in (0, 1):
                raise DataError(f"record {rid}: label must be 0 or 1")
            feats = doc.get("features", {})
            raw = np.full((len(names), num_steps), np.nan)
            for i, name in enumerate(names):
                cells = feats.get(name)
                if cells is None:
                    continue
                if len(cells) != num_steps:
                    raise DataError(
                        f"record {rid}: feature {name!r} has {len(cells)} cells,"
                        f" expected {num_steps}")
                for t, v in enumerate(cells):
                    if v is None:
                        continue
                    v = float(v)
                    if not np.isfinite(v):
                        raise DataError(f"record {rid}: non-finite value in {name!r}")
                    raw[i, t] = v
            yield rid, int(doc["label"]), raw, ~np.isnan(raw)


def build_dataset(parsed: list, specs: list[FeatureSpec],
                  ratios=(0.8, 0.1, 0.1), split_seed: int = 0) -> Dataset:
    """Split, compute train-only standardization stats, fill and standardize."""
    ids = [rid for rid, _, _, _ in parsed]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate record ids")
    split = split_assignment(ids, ratios, split_seed)

    F = len(specs)
    mean = np.zeros(F)
    std = np.ones(F)
    for i in range(F):
        cells = np.concatenate([
            raw[i][obs[i]] for rid, _, raw, obs in parsed if split[rid] == "train"
        ]) if parsed else np.array([])
        if cells.size:
            mean[i] = cells.mean()
            s = cells.std()
            std[i] = s if s > 0 else 1.0

    records = []
    for rid, label, raw, obs in parsed:
        present = obs.any(axis=1)
        values = np.zeros_like(raw)
        raw_filled = np.zeros_like(raw)
        for i in range(F):
            if not present[i]:
                raw_filled[i] = mean[i]
                continue   # values row stays zero; excluded downstream via m_i=0
            z = (raw[i] - mean[i]) / std[i]
            values[i] = _forward_fill(np.nan_to_num(z), obs[i], 0.0)
            raw_filled[i] = _forward_fill(np.nan_to_num(raw[i]), obs[i], mean[i])
        records.append(PatientRecord(rid, values, raw_filled, obs, present, label))
    return Dataset(specs, records, mean, std, split)


def load_dataset(path: str | Path, schema_path: str | Path,
                 ratios=(0.8, 0.1, 0.1), split_seed: int = 0) -> Dataset:
    specs, num_steps = load_schema(schema_path)
    parsed = list(_parse_records(path, specs, num_steps))
    if not parsed:
        raise DataError(f"no records in {path}")
    return build_dataset(parsed, specs, ratios, split_seed)


@dataclass
class PlantedPattern:
    features: list[int]
    ranges: list[tuple[float, float]]   # z-score units of the generating scale
    boosted_rate: float
    injection_prob: float


@dataclass
class SyntheticPlan:
    num_features: int
    num_steps: int
    num_records: int
    base_rate: float
    patterns: list[PlantedPattern]
    missing_rate: float = 0.05
    noise_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.base_rate < 1:
            raise DataError("base rate must lie in (0,1)")
        for p in self.patterns:
            if p.boosted_rate <= self.base_rate:
                raise DataError("boosted rate must exceed base rate")
            if any(f >= self.num_features for f in p.features):
                raise DataError("planted feature index out of range")
            if len(p.ranges) != len(p.features):
                raise DataError("one value range per planted feature required")

    @classmethod
    def from_json(cls, path: str | Path) -> "SyntheticPlan":
        with open(path) as f:
            doc = json.load(f)
        patterns = [
            PlantedPattern(
                features=list(p["features"]),
                ranges=[tuple(r) for r in p["ranges"]],
                boosted_rate=float(p["boosted_rate"]),
                injection_prob=float(p["injection_prob"]),
            )
            for p in doc.get("patterns", [])
        ]
        return cls(
            num_features=int(doc["num_features"]),
            num_steps=int(doc["num_steps"]),
            num_records=int(doc["num_records"]),
            base_rate=float(doc["base_rate"]),
            patterns=patterns,
            missing_rate=float(doc.get("missing_rate", 0.05)),
            noise_std=float(doc.get("noise_std", 0.1)),
            seed=int(doc.get("seed", 0)),
        )


def generate_synthetic(plan: SyntheticPlan):
    """Produce raw record dicts for the plan (deterministic per seed).

    Background cells are gaussian on a per-feature scale (mu=10(i+1),
    sigma=2+i/2).  An injected record carries, at one sampled time step (and
    the following one when it exists), all planted features inside their
    planted z-ranges; injected labels use the boosted positive rate.
    Missingness: with probability missing_rate/4 a non-planted feature is
    dropped entirely for a record, otherwise cells go missing independently
    at missing_rate (planted cells are kept observed).
    """
    rng = np.random.default_rng(plan.seed)
    F, T = plan.num_features, plan.num_steps
    mu = 10.0 * (np.arange(F) + 1)
    sigma = 2.0 + 0.5 * np.arange(F)
    out = []
    for idx in range(plan.num_records):
        raw = mu[:, None] + sigma[:, None] * rng.standard_normal((F, T))
        if plan.noise_std > 0:
            raw += sigma[:, None] * plan.noise_std * rng.standard_normal((F, T))
        injected = None
        for p in plan.patterns:
            if rng.random() < p.injection_prob:
                injected = p
                break
        protected = np.zeros((F, T), dtype=bool)
        if injected is not None:
            t_star = int(rng.integers(0, T))
            steps = [t_star] + ([t_star + 1] if t_star + 1 < T else [])
            for f, (lo, hi) in zip(injected.features, injected.ranges):
                for t in steps:
                    raw[f, t] = mu[f] + sigma[f] * rng.uniform(lo, hi)
                    protected[f, t] = True
        rate = injected.boosted_rate if injected is not None else plan.base_rate
        label = int(rng.random() < rate)
        observed = np.ones((F, T), dtype=bool)
        planted_feats = set(injected.features) if injected is not None else set()
        for i in range(F):
            if i not in planted_feats and rng.random() < plan.missing_rate / 4:
                observed[i] = False
                continue
            drop = rng.random(T) < plan.missing_rate
            observed[i] &= ~drop
        observed |= protected
        masked = np.where(observed, raw, np.nan)
        out.append((f"p{idx:05d}", label, masked, observed))
    return out


def synthetic_dataset(plan: SyntheticPlan, ratios=(0.8, 0.1, 0.1),
                      split_seed: int = 0,
                      bounds=(DEFAULT_LOWER, DEFAULT_UPPER)) -> Dataset:
    specs = [FeatureSpec(f"f{i}", bounds[0], bounds[1])
             for i in range(plan.num_features)]
    return build_dataset(generate_synthetic(plan), specs, ratios, split_seed)


def write_dataset(path: str | Path, parsed: list, specs: list[FeatureSpec]):
    """Write raw records (id, label, raw-with-NaN, observed) as ndjson."""
    names = [s.name for s in specs]
    with open(path, "w") as f:
        for rid, label, raw, obs in parsed:
            feats = {
                name: [None if not obs[i, t] else raw[i, t]
                       for t in range(raw.shape[1])]
                for i, name in enumerate(names)
            }
            f.write(json.dumps({"id": rid, "label": label, "features": feats}))
            f.write("\n")
