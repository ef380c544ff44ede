import math

import numpy as np
import pytest

from cohortnet.exploitation import (attend_cohorts, bce_loss,
                                    calibration_logit_batch, identify_cohorts,
                                    init_exploit_params, matched_local_ids,
                                    pad_matches, predict_patient,
                                    predict_scores_calibrated,
                                    train_exploitation)
from cohortnet.numerics import ParamStore, Tensor, finite_difference_check
from cohortnet.pool import LABEL_STAT_DIM, Cohort, CohortPool

D_H = 4


def make_pool(patterns, seed=0, num_features=3):
    """patterns: list of (anchor, ((feature, state), ...)) pairs."""
    rng = np.random.default_rng(seed)
    cohorts = [
        Cohort(cohort_id=i, anchor=a, pattern=p,
               representation=rng.normal(size=D_H + LABEL_STAT_DIM),
               frequency=int(rng.integers(50, 200)),
               patients=int(rng.integers(10, 40)),
               pos_rate=float(rng.random()))
        for i, (a, p) in enumerate(patterns)
    ]
    return CohortPool(cohorts, num_features)


def default_pool():
    return make_pool([
        (0, ((0, 1), (1, 2))),
        (0, ((0, 1), (2, 1))),
        (0, ((0, 2), (1, 2))),
        (1, ((1, 2), (2, 3))),
        (2, ((0, 1), (2, 1))),
    ])


class TestIdentifyCohorts:
    def test_hand_example(self):
        pool = default_pool()
        states = np.array([[1, 2, 0],       # matches cohorts 0 and 3? no: (1,2),(2,3) needs f2=3
                           [1, 0, 1]])      # matches cohorts 1 and 4
        bm = identify_cohorts(states, pool)
        np.testing.assert_array_equal(bm[0], [1, 1, 0])
        np.testing.assert_array_equal(bm[1], [0])
        np.testing.assert_array_equal(bm[2], [1])

    def test_no_states_match(self):
        pool = default_pool()
        bm = identify_cohorts(np.zeros((3, 3), dtype=int), pool)
        assert all(not b.any() for b in bm.values())

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(5)
        patterns = set()
        while len(patterns) < 12:
            feats = sorted(rng.choice(4, size=2, replace=False).tolist())
            pat = tuple((f, int(rng.integers(0, 3))) for f in feats)
            patterns.add((int(rng.choice(feats)), pat))
        pool = make_pool(sorted(patterns), num_features=4)
        for trial in range(50):
            states = rng.integers(0, 3, size=(5, 4))
            bm = identify_cohorts(states, pool)
            for anchor, cohorts in pool.by_anchor.items():
                for local, c in enumerate(cohorts):
                    want = any(
                        all(states[t, f] == s for f, s in c.pattern)
                        for t in range(5))
                    assert bool(bm[anchor][local]) == want

    def test_more_time_steps_only_add_matches(self):
        rng = np.random.default_rng(8)
        pool = default_pool()
        states = rng.integers(0, 4, size=(6, 3))
        prev = identify_cohorts(states[:1], pool)
        for T in range(2, 7):
            cur = identify_cohorts(states[:T], pool)
            for i in prev:
                assert (cur[i] >= prev[i]).all()
            prev = cur

    def test_local_ids_sorted(self):
        pool = default_pool()
        states = np.array([[1, 2, 1]])
        m = matched_local_ids(states, pool)
        for ids in m.values():
            assert ids == sorted(ids)


class TestAttendCohorts:
    def test_single_cohort_gets_full_weight(self):
        params = init_exploit_params(3, D_H, d_a=3, d_v=2, seed=0)
        reps = np.random.default_rng(0).normal(size=(1, D_H + LABEL_STAT_DIM))
        h_prime, beta = attend_cohorts(np.ones(D_H), reps, params)
        assert beta[0] == pytest.approx(1.0)
        np.testing.assert_allclose(h_prime, reps[0] @ params["cem.WV"].data)

    def test_identical_cohorts_share_weight_uniformly(self):
        params = init_exploit_params(3, D_H, d_a=3, d_v=2, seed=1)
        rep = np.random.default_rng(1).normal(size=D_H + LABEL_STAT_DIM)
        _, beta = attend_cohorts(np.ones(D_H), np.tile(rep, (4, 1)), params)
        np.testing.assert_allclose(beta, 0.25, atol=1e-12)

    def test_no_matches_returns_zeros(self):
        params = init_exploit_params(3, D_H, d_a=3, d_v=2, seed=2)
        h_prime, beta = attend_cohorts(
            np.ones(D_H), np.zeros((0, D_H + LABEL_STAT_DIM)), params)
        np.testing.assert_array_equal(h_prime, np.zeros(2))
        assert beta.size == 0

    def test_three_cohorts_match_scalar_oracle(self):
        params = init_exploit_params(3, D_H, d_a=3, d_v=2, seed=3)
        rng = np.random.default_rng(3)
        h = rng.normal(size=D_H)
        reps = rng.normal(size=(3, D_H + LABEL_STAT_DIM))
        h_prime, beta = attend_cohorts(h, reps, params)
        q = [sum(h[a] * params["cem.WQ"].data[a][b] for a in range(D_H))
             for b in range(3)]
        scores = []
        for r in reps:
            key = [sum(r[a] * params["cem.WK"].data[a][b]
                       for a in range(len(r))) for b in range(3)]
            scores.append(sum(key[b] * q[b] for b in range(3)))
        exps = [math.exp(s - max(scores)) for s in scores]
        want_beta = [e / sum(exps) for e in exps]
        np.testing.assert_allclose(beta, want_beta, rtol=1e-12)
        vals = reps @ params["cem.WV"].data
        want = sum(want_beta[j] * vals[j] for j in range(3))
        np.testing.assert_allclose(h_prime, want, rtol=1e-12)


class TestPredictPatient:
    def setup_method(self):
        self.pool = default_pool()
        self.params = init_exploit_params(3, D_H, d_a=3, d_v=2, seed=4)
        self.rng = np.random.default_rng(4)

    def test_no_matches_keeps_base_probability(self):
        rep = predict_patient(self.rng.normal(size=(3, D_H)), 0.3,
                              np.zeros((2, 3), dtype=int), self.pool,
                              self.params)
        assert rep.z == 0.0
        assert rep.probability == pytest.approx(rep.base_probability)
        assert rep.base_probability == pytest.approx(1 / (1 + math.exp(-0.3)))

    def test_zero_calibration_weights_give_zero_score(self):
        self.params["cem.wc"].data[...] = 0.0
        rep = predict_patient(self.rng.normal(size=(3, D_H)), -0.2,
                              np.array([[1, 2, 1]]), self.pool, self.params)
        assert len(rep.cohort_scores[0]) > 0      # cohorts matched...
        assert rep.z == 0.0                        # ...but contribute nothing

    def test_decomposition_identities_exact(self):
        for trial in range(20):
            h_last = self.rng.normal(size=(3, D_H))
            states = self.rng.integers(0, 4, size=(4, 3))
            base = float(self.rng.normal())
            rep = predict_patient(h_last, base, states, self.pool, self.params)
            for i in range(3):
                total = 0.0
                for cs in rep.cohort_scores[i]:
                    total += cs.score
                assert rep.feature_scores[i] == total
            z = 0.0
            for i in range(3):
                z += rep.feature_scores[i]
            assert rep.z == z
            assert rep.probability == 1 / (1 + math.exp(-(base + rep.z)))

    def test_attention_weights_sum_to_one_per_matched_feature(self):
        rep = predict_patient(self.rng.normal(size=(3, D_H)), 0.0,
                              np.array([[1, 2, 1]]), self.pool, self.params)
        for i, rows in rep.cohort_scores.items():
            if rows:
                assert sum(r.beta for r in rows) == pytest.approx(1.0)

    def test_scores_reference_pool_cohort_ids(self):
        rep = predict_patient(self.rng.normal(size=(3, D_H)), 0.0,
                              np.array([[1, 2, 1]]), self.pool, self.params)
        for i, rows in rep.cohort_scores.items():
            for r in rows:
                assert self.pool.by_anchor[i][r.local_id].cohort_id == r.cohort_id


class TestBceLoss:
    def test_half_probability_gives_ln2(self):
        assert bce_loss([0.5, 0.5], [0, 1]) == pytest.approx(math.log(2))

    def test_perfect_predictions_clamp(self):
        assert bce_loss([1.0, 0.0], [1, 0]) == pytest.approx(-math.log(1 - 1e-7))

    def test_mean_over_samples(self):
        got = bce_loss([0.9, 0.2], [1, 0])
        want = (-math.log(0.9) - math.log(0.8)) / 2
        assert got == pytest.approx(want)


class TestBatchedCalibration:
    def setup_method(self):
        self.pool = default_pool()
        self.params = init_exploit_params(3, D_H, d_a=3, d_v=2, seed=6)
        rng = np.random.default_rng(6)
        self.N = 12
        self.h_last = rng.normal(size=(self.N, 3, D_H))
        self.states = rng.integers(0, 4, size=(self.N, 4, 3))
        self.base = rng.normal(size=self.N)

    def test_batched_z_equals_per_patient_z(self):
        matched = [matched_local_ids(self.states[n], self.pool)
                   for n in range(self.N)]
        padded = pad_matches(matched, self.pool, D_H)
        z = calibration_logit_batch(self.params, self.h_last, padded,
                                    np.arange(self.N))
        for n in range(self.N):
            rep = predict_patient(self.h_last[n], self.base[n], self.states[n],
                                  self.pool, self.params)
            assert z.data[n] == pytest.approx(rep.z, abs=1e-12)

    def test_batch_probabilities_match_inference_path(self):
        matched = [matched_local_ids(self.states[n], self.pool)
                   for n in range(self.N)]
        padded = pad_matches(matched, self.pool, D_H)
        z = calibration_logit_batch(self.params, self.h_last, padded,
                                    np.arange(self.N))
        probs = 1 / (1 + np.exp(-(self.base + z.data)))
        want = predict_scores_calibrated(self.params, self.pool, self.h_last,
                                         self.base, self.states)
        np.testing.assert_allclose(probs, want, atol=1e-12)

    def test_gradient_matches_finite_differences(self):
        matched = [matched_local_ids(self.states[n], self.pool)
                   for n in range(self.N)]
        padded = pad_matches(matched, self.pool, D_H)
        labels = np.random.default_rng(1).integers(0, 2, self.N)
        from cohortnet.encoder import bce_from_logit

        def loss_fn():
            z = calibration_logit_batch(self.params, self.h_last, padded,
                                        np.arange(self.N))
            return bce_from_logit(z + self.base, labels)

        assert finite_difference_check(loss_fn, self.params) < 1e-4

    def test_unmatched_rows_contribute_zero(self):
        # a patient whose states match nothing must get z identically 0
        states = np.zeros((1, 2, 3), dtype=int)
        matched = [matched_local_ids(states[0], self.pool)]
        padded = pad_matches(matched, self.pool, D_H)
        z = calibration_logit_batch(self.params, self.h_last[:1], padded,
                                    np.array([0]))
        assert z.data[0] == 0.0


class TestTrainExploitation:
    def test_loss_decreases_and_restores_best(self):
        pool = default_pool()
        rng = np.random.default_rng(10)
        N, Nv = 80, 20
        h = rng.normal(size=(N, 3, D_H))
        hv = rng.normal(size=(Nv, 3, D_H))
        states = rng.integers(0, 4, size=(N, 3, 3))
        states_v = rng.integers(0, 4, size=(Nv, 3, 3))
        matched = [matched_local_ids(s, pool) for s in states]
        matched_v = [matched_local_ids(s, pool) for s in states_v]
        # labels correlated with whether anything matched at anchor 0
        labels = np.array([int(bool(m[0]) or rng.random() < 0.2)
                           for m in matched])
        labels_v = np.array([int(bool(m[0]) or rng.random() < 0.2)
                             for m in matched_v])
        params = init_exploit_params(3, D_H, d_a=3, d_v=2, seed=0)
        log = train_exploitation(
            params, pool, h_last=h, base_logits=np.zeros(N), labels=labels,
            matched=matched, valid_h_last=hv, valid_base=np.zeros(Nv),
            valid_labels=labels_v, valid_matched=matched_v,
            lr=0.02, batch_size=16, epochs=12, patience=12, seed=0)
        assert log.train_loss[-1] < log.train_loss[0]
        assert 0 <= log.best_epoch < log.epochs

    def test_finetune_requires_hidden_summaries(self):
        pool = default_pool()
        params = init_exploit_params(3, D_H, d_a=3, d_v=2, seed=0,
                                     head_w=np.zeros(6), head_b=0.0,
                                     finetune_head=True)
        with pytest.raises(ValueError):
            train_exploitation(
                params, pool, h_last=np.zeros((2, 3, D_H)),
                base_logits=np.zeros(2), labels=np.zeros(2, dtype=int),
                matched=[{0: [], 1: [], 2: []}] * 2,
                valid_h_last=np.zeros((2, 3, D_H)), valid_base=np.zeros(2),
                valid_labels=np.zeros(2, dtype=int),
                valid_matched=[{0: [], 1: [], 2: []}] * 2)
