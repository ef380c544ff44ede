import json

import numpy as np
import pytest

from cohortnet.data import (DataError, FeatureSpec, PlantedPattern,
                            SyntheticPlan, build_dataset, generate_synthetic,
                            load_dataset, save_schema, split_assignment,
                            synthetic_dataset, write_dataset)


def small_plan(**overrides):
    kwargs = dict(
        num_features=3,
        num_steps=4,
        num_records=50,
        base_rate=0.2,
        patterns=[PlantedPattern([0, 2], [(1.0, 2.0), (1.0, 2.0)], 0.8, 0.3)],
        missing_rate=0.1,
        noise_std=0.1,
        seed=5,
    )
    kwargs.update(overrides)
    return SyntheticPlan(**kwargs)


class TestSplit:
    def test_100_records_80_10_10(self):
        ids = [f"r{i}" for i in range(100)]
        split = split_assignment(ids, (0.8, 0.1, 0.1), seed=3)
        counts = {p: sum(1 for v in split.values() if v == p)
                  for p in ("train", "valid", "test")}
        assert counts == {"train": 80, "valid": 10, "test": 10}

    def test_10_records_floor_then_train_remainder(self):
        ids = [f"r{i}" for i in range(10)]
        split = split_assignment(ids, (0.8, 0.1, 0.1), seed=3)
        counts = {p: sum(1 for v in split.values() if v == p)
                  for p in ("train", "valid", "test")}
        assert counts == {"train": 8, "valid": 1, "test": 1}

    def test_remainder_goes_to_train(self):
        ids = [f"r{i}" for i in range(11)]
        split = split_assignment(ids, (0.8, 0.1, 0.1), seed=0)
        counts = {p: sum(1 for v in split.values() if v == p)
                  for p in ("train", "valid", "test")}
        assert counts == {"train": 9, "valid": 1, "test": 1}

    def test_deterministic(self):
        ids = [f"r{i}" for i in range(37)]
        assert split_assignment(ids, (0.8, 0.1, 0.1), 9) == \
            split_assignment(ids, (0.8, 0.1, 0.1), 9)

    def test_invalid_ratios_rejected(self):
        with pytest.raises(DataError):
            split_assignment(["a", "b"], (0.5, 0.2, 0.2), 0)


class TestLoadDataset:
    def test_structural_roundtrip(self, tmp_path):
        plan = small_plan(num_records=10)
        parsed = generate_synthetic(plan)
        specs = [FeatureSpec(f"f{i}") for i in range(3)]
        write_dataset(tmp_path / "d.ndjson", parsed, specs)
        save_schema(tmp_path / "s.json", specs, 4)
        ds = load_dataset(tmp_path / "d.ndjson", tmp_path / "s.json")
        assert len(ds.records) == 10
        assert ds.num_steps == 4
        assert ds.num_features == 3

    def test_fully_unobserved_feature_flagged_absent(self, tmp_path):
        recs = [{"id": f"p{i}", "label": i % 2,
                 "features": {"a": [1.0 * i, 2.0, None, 0.5],
                              "b": [None, None, None, None]}}
                for i in range(10)]
        with open(tmp_path / "d.ndjson", "w") as f:
            for r in recs:
                f.write(json.dumps(r) + "\n")
        save_schema(tmp_path / "s.json", [FeatureSpec("a"), FeatureSpec("b")], 4)
        ds = load_dataset(tmp_path / "d.ndjson", tmp_path / "s.json")
        for rec in ds.records:
            assert not rec.present[1]
            np.testing.assert_array_equal(rec.values[1], np.zeros(4))

    def test_train_split_standardized_to_unit_moments(self, tmp_path):
        plan = small_plan(num_records=200, missing_rate=0.0)
        parsed = generate_synthetic(plan)
        specs = [FeatureSpec(f"f{i}") for i in range(3)]
        write_dataset(tmp_path / "d.ndjson", parsed, specs)
        save_schema(tmp_path / "s.json", specs, 4)
        ds = load_dataset(tmp_path / "d.ndjson", tmp_path / "s.json")
        for i in range(3):
            cells = np.concatenate([
                r.values[i][r.observed[i]] for r in ds.part("train")])
            assert abs(cells.mean()) < 1e-9
            assert abs(cells.std() - 1.0) < 1e-9

    def test_stats_ignore_valid_and_test(self, tmp_path):
        plan = small_plan(num_records=100)
        parsed = generate_synthetic(plan)
        specs = [FeatureSpec(f"f{i}") for i in range(3)]
        ds = build_dataset(parsed, specs, split_seed=1)
        raw_by_id = {rid: (raw, obs) for rid, _, raw, obs in parsed}
        train_ids = {r.id for r in ds.part("train")}
        for i in range(3):
            cells = np.concatenate([
                raw_by_id[rid][0][i][raw_by_id[rid][1][i]]
                for rid in sorted(train_ids)])
            assert ds.mean[i] == pytest.approx(cells.mean())
            assert ds.std[i] == pytest.approx(cells.std())

    def test_forward_fill_carries_last_observation(self, tmp_path):
        recs = [{"id": f"p{i}", "label": i % 2,
                 "features": {"a": [float(i), None, None, 4.0]}}
                for i in range(10)]
        with open(tmp_path / "d.ndjson", "w") as f:
            for r in recs:
                f.write(json.dumps(r) + "\n")
        save_schema(tmp_path / "s.json", [FeatureSpec("a")], 4)
        ds = load_dataset(tmp_path / "d.ndjson", tmp_path / "s.json")
        for rec in ds.records:
            assert rec.values[0][1] == rec.values[0][0]
            assert rec.values[0][2] == rec.values[0][0]

    def test_malformed_record_reports_parse_error(self, tmp_path):
        with open(tmp_path / "d.ndjson", "w") as f:
            f.write("{not json\n")
        save_schema(tmp_path / "s.json", [FeatureSpec("a")], 4)
        with pytest.raises(DataError):
            load_dataset(tmp_path / "d.ndjson", tmp_path / "s.json")

    def test_non_finite_value_rejected(self, tmp_path):
        with open(tmp_path / "d.ndjson", "w") as f:
            f.write(json.dumps({"id": "p0", "label": 0,
                                "features": {"a": [1.0, None]}}) + "\n")
            f.write('{"id": "p1", "label": 1, "features": {"a": [NaN, 2.0]}}\n')
        save_schema(tmp_path / "s.json", [FeatureSpec("a")], 2)
        with pytest.raises(DataError):
            load_dataset(tmp_path / "d.ndjson", tmp_path / "s.json")


class TestSyntheticGenerator:
    def test_planted_records_all_features_in_range_at_some_step(self):
        plan = small_plan(num_records=300, seed=11)
        mu = 10.0 * (np.arange(3) + 1)
        sigma = 2.0 + 0.5 * np.arange(3)
        # re-derive which records carry the pattern from the raw values
        hits = 0
        for rid, label, raw, obs in generate_synthetic(plan):
            z = (raw - mu[:, None]) / sigma[:, None]
            inside = (z[0] >= 1.0) & (z[0] <= 2.0) & (z[2] >= 1.0) & (z[2] <= 2.0)
            inside &= obs[0] & obs[2]
            hits += int(np.nan_to_num(inside.astype(float)).any())
        assert hits >= 0.25 * 300        # injection probability 0.3

    def test_positive_rates_concentrate(self):
        plan = SyntheticPlan(
            num_features=4, num_steps=4, num_records=2000, base_rate=0.1,
            patterns=[PlantedPattern([0, 2], [(1.5, 3.0), (1.5, 3.0)], 0.7, 0.3)],
            missing_rate=0.0, noise_std=0.0, seed=3)
        mu = 10.0 * (np.arange(4) + 1)
        sigma = 2.0 + 0.5 * np.arange(4)
        inj_labels, other_labels = [], []
        for rid, label, raw, obs in generate_synthetic(plan):
            z = (raw - mu[:, None]) / sigma[:, None]
            inside = ((z[0] >= 1.5) & (z[0] <= 3.0)
                      & (z[2] >= 1.5) & (z[2] <= 3.0))
            (inj_labels if inside.any() else other_labels).append(label)
        assert 0.6 <= np.mean(inj_labels) <= 0.8
        assert 0.07 <= np.mean(other_labels) <= 0.13

    def test_zero_injection_matches_base_rate(self):
        plan = small_plan(num_records=2000,
                          patterns=[PlantedPattern([0], [(1.0, 2.0)], 0.8, 0.0)],
                          base_rate=0.1)
        labels = [label for _, label, _, _ in generate_synthetic(plan)]
        assert 0.07 <= np.mean(labels) <= 0.13

    def test_same_seed_byte_identical(self, tmp_path):
        plan = small_plan()
        specs = [FeatureSpec(f"f{i}") for i in range(3)]
        write_dataset(tmp_path / "a.ndjson", generate_synthetic(plan), specs)
        write_dataset(tmp_path / "b.ndjson", generate_synthetic(plan), specs)
        assert (tmp_path / "a.ndjson").read_bytes() == \
            (tmp_path / "b.ndjson").read_bytes()

    def test_boosted_rate_must_exceed_base(self):
        with pytest.raises(DataError):
            small_plan(patterns=[PlantedPattern([0], [(1.0, 2.0)], 0.1, 0.3)],
                       base_rate=0.2)

    def test_plan_json_roundtrip(self, tmp_path):
        doc = {
            "num_features": 3, "num_steps": 4, "num_records": 7,
            "base_rate": 0.2, "missing_rate": 0.1, "noise_std": 0.2, "seed": 9,
            "patterns": [{"features": [0, 2], "ranges": [[1, 2], [1, 2]],
                          "boosted_rate": 0.9, "injection_prob": 0.5}],
        }
        with open(tmp_path / "plan.json", "w") as f:
            json.dump(doc, f)
        plan = SyntheticPlan.from_json(tmp_path / "plan.json")
        assert plan.num_records == 7
        assert plan.patterns[0].features == [0, 2]

    def test_synthetic_dataset_split_and_shape(self):
        ds = synthetic_dataset(small_plan(num_records=100))
        assert len(ds.part("train")) == 80
        assert len(ds.part("valid")) == 10
        assert len(ds.part("test")) == 10
        assert ds.records[0].values.shape == (3, 4)
