"""Four-stage orchestration: encoder training, state fitting, pool
construction, and calibration training, plus evaluation and persistence.

Stage seeds are derived from the master seed with fixed offsets, batch order
is a seeded permutation, and all artifact files are byte-stable, so a rerun
with the same config reproduces every output bit for bit.
"""

from __future__ import annotations

import json
import os
import time
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import discovery, exploitation, pool as pool_mod, serialize
from .data import Dataset, SyntheticPlan, load_dataset, synthetic_dataset
from .encoder import (EncoderCache, EncoderConfig, encode_dataset,
                      init_encoder_params, train_encoder)
from .metrics import evaluate


class PipelineError(Exception):
    pass


@dataclass
class PipelineConfig:
    data_path: str = ""
    schema_path: str = ""
    out_dir: str = "out"
    plan_path: str = ""              # generate data in-process when set
    ratios: tuple = (0.8, 0.1, 0.1)
    seed: int = 0
    # encoder
    d_e: int = 16
    d_t: int = 16
    d_o: int = 8
    d_h: int = 16
    d_p: int = 4
    lr: float = 1e-3
    batch_size: int = 64
    stage1_epochs: int = 30
    stage1_patience: int = 5
    # discovery / pool
    k: int = 7
    n: int = 2
    min_occurrences: int = 50
    min_patients: int = 10
    # exploitation
    d_a: int = 16
    d_v: int = 0                     # 0 -> default to d_p
    stage4_epochs: int = 50
    stage4_patience: int = 10
    cohorts_enabled: bool = True
    finetune_head: bool = False
    threshold: float = 0.5

    def __post_init__(self):
        if self.k < 1:
            raise PipelineError("k must be >= 1")
        if self.n < 0:
            raise PipelineError("n must be >= 0")
        if self.d_v == 0:
            self.d_v = self.d_p

    @classmethod
    def from_json(cls, path: str | Path) -> "PipelineConfig":
        with open(path) as f:
            doc = json.load(f)
        doc.pop("_comment", None)
        if "ratios" in doc:
            doc["ratios"] = tuple(doc["ratios"])
        cfg = cls(**doc)
        # environment overrides for seed and paths
        if os.environ.get("COHORTNET_SEED"):
            cfg.seed = int(os.environ["COHORTNET_SEED"])
        if os.environ.get("COHORTNET_DATA"):
            cfg.data_path = os.environ["COHORTNET_DATA"]
        if os.environ.get("COHORTNET_OUT"):
            cfg.out_dir = os.environ["COHORTNET_OUT"]
        return cfg


@dataclass
class PipelineResult:
    dataset: Dataset
    encoder_config: EncoderConfig
    encoder_params: object
    cache: EncoderCache              # over all records in dataset order
    state_models: list
    states: np.ndarray               # (N, T, F) over all records
    pool: pool_mod.CohortPool | None
    exploit_params: object
    eval_full: dict
    eval_stage1: dict
    timings: dict = field(default_factory=dict)
    part_rows: dict = field(default_factory=dict)


def _load(config: PipelineConfig) -> Dataset:
    if config.plan_path:
        plan = SyntheticPlan.from_json(config.plan_path)
        return synthetic_dataset(plan, config.ratios, split_seed=config.seed)
    if not config.data_path or not config.schema_path:
        raise PipelineError("config needs data_path+schema_path or plan_path")
    return load_dataset(config.data_path, config.schema_path, config.ratios,
                        split_seed=config.seed)


def run_pipeline(config: PipelineConfig, persist: bool = True,
                 stage4: bool = True) -> PipelineResult:
    timings = {}
    t0 = time.perf_counter()
    dataset = _load(config)
    F, T = dataset.num_features, dataset.num_steps
    if config.n > F - 1:
        raise PipelineError(f"n={config.n} must be <= F-1={F - 1}")
    rows = {part: [i for i, r in enumerate(dataset.records)
                   if dataset.split[r.id] == part]
            for part in ("train", "valid", "test")}
    train = [dataset.records[i] for i in rows["train"]]
    valid = [dataset.records[i] for i in rows["valid"]]
    test = [dataset.records[i] for i in rows["test"]]
    timings["load"] = time.perf_counter() - t0

    enc_config = EncoderConfig(
        num_features=F, num_steps=T, d_e=config.d_e, d_t=config.d_t,
        d_o=config.d_o, d_h=config.d_h, d_p=config.d_p,
        lower=np.array([s.lower for s in dataset.specs]),
        upper=np.array([s.upper for s in dataset.specs]))

    # Stage 1: encoder + base head
    t0 = time.perf_counter()
    enc_params = init_encoder_params(enc_config, seed=config.seed + 1)
    train_encoder(enc_params, enc_config, train, valid, lr=config.lr,
                  batch_size=config.batch_size, epochs=config.stage1_epochs,
                  patience=config.stage1_patience, seed=config.seed + 2)
    timings["stage1"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    cache = encode_dataset(enc_params, enc_config, dataset.records)
    timings["encode"] = time.perf_counter() - t0

    present = np.stack([r.present for r in dataset.records])     # (N, F)
    raw = np.stack([r.raw for r in dataset.records])             # (N, F, T)

    # Stage 2: per-feature state models on the train split
    t0 = time.perf_counter()
    train_idx = np.array(rows["train"])
    models = []
    for i in range(F):
        pres_i = present[train_idx, i]
        vecs = cache.o[train_idx][pres_i][:, :, i, :].reshape(-1, config.d_o)
        models.append(discovery.fit_states(vecs, i, config.k,
                                           seed=config.seed + 100 + i))
    states = discovery.assign_states_dataset(cache.o, present, models)
    discovery.summarize_states(models, states[train_idx], raw[train_idx],
                               present[train_idx])
    timings["stage2"] = time.perf_counter() - t0

    cohort_pool = None
    exploit_params = None
    eval_stage1 = _evaluate_stage1(cache, rows["test"], test, config)
    if config.cohorts_enabled:
        # Stage 3: enumerate, filter, build the pool
        t0 = time.perf_counter()
        occ = discovery.enumerate_patterns(states[train_idx],
                                           cache.alpha[train_idx], config.n)
        labels_train = np.array([r.label for r in train])
        cohort_pool = pool_mod.build_pool(
            occ, cache.h[train_idx], labels_train, F,
            min_occurrences=config.min_occurrences,
            min_patients=config.min_patients)
        timings["stage3"] = time.perf_counter() - t0
        if len(cohort_pool) == 0:
            warnings.warn("cohort pool is empty; calibration degenerates to "
                          "the encoder-only model")

    if config.cohorts_enabled and stage4:
        # Stage 4: calibration training on frozen artifacts
        t0 = time.perf_counter()
        exploit_params = exploitation.init_exploit_params(
            F, config.d_h, config.d_a, config.d_v, seed=config.seed + 3,
            head_w=enc_params["head.w"].data, head_b=enc_params["head.b"].data,
            finetune_head=config.finetune_head)
        matched = [exploitation.matched_local_ids(states[i], cohort_pool)
                   for i in rows["train"]]
        matched_valid = [exploitation.matched_local_ids(states[i], cohort_pool)
                         for i in rows["valid"]]
        exploitation.train_exploitation(
            exploit_params, cohort_pool,
            h_last=cache.h_last[train_idx],
            base_logits=cache.base_logit[train_idx],
            labels=labels_train, matched=matched,
            valid_h_last=cache.h_last[rows["valid"]],
            valid_base=cache.base_logit[rows["valid"]],
            valid_labels=np.array([r.label for r in valid]),
            valid_matched=matched_valid,
            htilde_last=cache.htilde_last[train_idx],
            valid_htilde=cache.htilde_last[rows["valid"]],
            lr=config.lr, batch_size=config.batch_size,
            epochs=config.stage4_epochs, patience=config.stage4_patience,
            seed=config.seed + 4)
        timings["stage4"] = time.perf_counter() - t0

    eval_full = _evaluate_full(cache, states, rows["test"], test, cohort_pool,
                               exploit_params, config)

    result = PipelineResult(
        dataset=dataset, encoder_config=enc_config, encoder_params=enc_params,
        cache=cache, state_models=models, states=states, pool=cohort_pool,
        exploit_params=exploit_params, eval_full=eval_full,
        eval_stage1=eval_stage1, timings=timings, part_rows=rows)
    if persist:
        persist_result(config, result)
    return result


def base_logits_for(result_or_cache, rows, exploit_params):
    """Base logits, recomputed through the fine-tuned head when present."""
    cache = result_or_cache
    if exploit_params is not None and "head.w" in exploit_params:
        return (cache.htilde_last[rows] @ exploit_params["head.w"].data
                + exploit_params["head.b"].data)
    return cache.base_logit[rows]


def calibrated_scores(cache, states, rows, cohort_pool, exploit_params):
    base = base_logits_for(cache, rows, exploit_params)
    if cohort_pool is None or exploit_params is None or len(cohort_pool) == 0:
        return 1.0 / (1.0 + np.exp(-base))
    return exploitation.predict_scores_calibrated(
        exploit_params, cohort_pool, cache.h_last[rows], base, states[rows])


def _evaluate_stage1(cache, test_rows, test_records, config):
    scores = 1.0 / (1.0 + np.exp(-cache.base_logit[test_rows]))
    labels = np.array([r.label for r in test_records])
    return evaluate(scores, labels, config.threshold)


def _evaluate_full(cache, states, test_rows, test_records, cohort_pool,
                   exploit_params, config):
    scores = calibrated_scores(cache, states, np.array(test_rows),
                               cohort_pool, exploit_params)
    labels = np.array([r.label for r in test_records])
    return evaluate(scores, labels, config.threshold)


def load_artifacts(config: PipelineConfig) -> PipelineResult:
    """Rebuild a PipelineResult from persisted artifacts (no training)."""
    out = Path(config.out_dir)
    dataset = _load(config)
    F, T = dataset.num_features, dataset.num_steps
    enc_config = EncoderConfig(
        num_features=F, num_steps=T, d_e=config.d_e, d_t=config.d_t,
        d_o=config.d_o, d_h=config.d_h, d_p=config.d_p,
        lower=np.array([s.lower for s in dataset.specs]),
        upper=np.array([s.upper for s in dataset.specs]))
    enc_params = init_encoder_params(enc_config, seed=config.seed + 1)
    serialize.load_params(out / "encoder.ckpt", enc_params)
    cache = encode_dataset(enc_params, enc_config, dataset.records)
    models = serialize.load_state_models(out / "states.json")
    present = np.stack([r.present for r in dataset.records])
    states = discovery.assign_states_dataset(cache.o, present, models)
    cohort_pool = None
    exploit_params = None
    if (out / "pool.json").exists():
        cohort_pool = pool_mod.load_pool(out / "pool.json")
    if (out / "exploit.ckpt").exists():
        exploit_params = exploitation.init_exploit_params(
            F, config.d_h, config.d_a, config.d_v, seed=config.seed + 3,
            head_w=enc_params["head.w"].data, head_b=enc_params["head.b"].data,
            finetune_head=config.finetune_head)
        serialize.load_params(out / "exploit.ckpt", exploit_params)
    rows = {part: [i for i, r in enumerate(dataset.records)
                   if dataset.split[r.id] == part]
            for part in ("train", "valid", "test")}
    test = [dataset.records[i] for i in rows["test"]]
    eval_stage1 = _evaluate_stage1(cache, rows["test"], test, config)
    eval_full = _evaluate_full(cache, states, rows["test"], test, cohort_pool,
                               exploit_params, config)
    return PipelineResult(
        dataset=dataset, encoder_config=enc_config, encoder_params=enc_params,
        cache=cache, state_models=models, states=states, pool=cohort_pool,
        exploit_params=exploit_params, eval_full=eval_full,
        eval_stage1=eval_stage1, part_rows=rows)


def persist_result(config: PipelineConfig, result: PipelineResult):
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    serialize.save_params(out / "encoder.ckpt", result.encoder_params)
    serialize.save_state_models(out / "states.json", result.state_models)
    if result.pool is not None:
        pool_mod.save_pool(out / "pool.json", result.pool)
    if result.exploit_params is not None:
        serialize.save_params(out / "exploit.ckpt", result.exploit_params)
    doc = {
        "full": result.eval_full,
        "stage1_only": result.eval_stage1,
        "pool_size": 0 if result.pool is None else len(result.pool),
        "config": {k: (list(v) if isinstance(v, tuple) else v)
                   for k, v in asdict(config).items()},
    }
    with open(out / "eval.json", "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
