import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shotlab.episodes import (
    EpisodeSpec,
    EvalReport,
    Probe,
    ProbeConfig,
    evaluate,
    fit_probe,
    fuse_features,
    mean_ci95,
    predict_and_score,
    sample_episode,
)
from shotlab.protocol import DatasetTable, SynthConfig, synth_generate


@pytest.fixture(scope="module")
def table():
    return synth_generate(SynthConfig())


def blob_table(n_classes=8, per_class=25, d=6, spread=1.0, seed=0):
    rng = np.random.default_rng(seed)
    means = spread * rng.normal(size=(n_classes, d))
    x = np.repeat(means, per_class, axis=0) + rng.normal(size=(n_classes * per_class, d))
    labels = np.repeat(np.arange(n_classes), per_class)
    return DatasetTable(x, labels, ["novel"] * len(labels))


def check_episode(table, spec, ep):
    assert len(set(ep.classes.tolist())) == spec.ways
    assert len(ep.support) == spec.ways * spec.shots
    assert len(ep.query) == spec.ways * spec.queries
    assert not set(ep.support.tolist()) & set(ep.query.tolist())
    assert len(set(ep.support.tolist())) == len(ep.support)
    assert len(set(ep.query.tolist())) == len(ep.query)
    assert set(table.split[np.concatenate([ep.support, ep.query])]) <= {"novel"}
    for local, c in enumerate(ep.classes):
        assert np.all(table.labels[ep.support[ep.support_labels == local]] == c)
        assert np.all(table.labels[ep.query[ep.query_labels == local]] == c)
        assert np.sum(ep.support_labels == local) == spec.shots
        assert np.sum(ep.query_labels == local) == spec.queries


class TestSampleEpisode:
    def test_standard_shape(self, table):
        spec = EpisodeSpec(ways=5, shots=1, queries=15)
        ep = sample_episode(table, spec, 0)
        assert len(ep.support) == 5 and len(ep.query) == 75
        check_episode(table, spec, ep)

    def test_no_queries(self, table):
        ep = sample_episode(table, EpisodeSpec(ways=2, shots=1, queries=0), 3)
        assert len(ep.support) == 2 and len(ep.query) == 0

    def test_deterministic(self, table):
        spec = EpisodeSpec(seed=9)
        a, b = sample_episode(table, spec, 17), sample_episode(table, spec, 17)
        np.testing.assert_array_equal(a.support, b.support)
        np.testing.assert_array_equal(a.query, b.query)
        c = sample_episode(table, spec, 18)
        assert not np.array_equal(a.support, c.support)

    def test_too_few(self, table):
        with pytest.raises(ValueError):
            sample_episode(table, EpisodeSpec(ways=21), 0)
        with pytest.raises(ValueError):
            sample_episode(table, EpisodeSpec(shots=40, queries=15), 0)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 20), st.integers(1, 10), st.integers(0, 20), st.integers(0, 10**6), st.integers(0, 10**6))
    def test_invariants(self, table, ways, shots, queries, seed, index):
        spec = EpisodeSpec(ways=ways, shots=shots, queries=queries, seed=seed)
        check_episode(table, spec, sample_episode(table, spec, index))


class TestFitProbe:
    def test_symmetric_pair(self):
        probe = fit_probe([[-1.0], [1.0]], [0, 1], ProbeConfig(l2_lambda=1e-3))
        assert probe.predict([[-1.0], [1.0]]).tolist() == [0, 1]
        at_zero = probe.logits([[0.0]])[0]
        assert at_zero[0] == pytest.approx(at_zero[1], abs=1e-12)

    def test_heavy_regularization(self):
        rng = np.random.default_rng(0)
        x, y = rng.normal(size=(10, 3)), np.repeat([0, 1], 5)
        probe = fit_probe(x, y, ProbeConfig(l2_lambda=1e6))
        assert np.max(np.abs(probe.weights)) < 1e-2
        p = np.exp(probe.logits(x))
        p /= p.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(p, 0.5, atol=1e-2)

    @pytest.mark.parametrize("seed", range(3))
    def test_long_run_oracle(self, seed):
        rng = np.random.default_rng(seed)
        means = 1.5 * rng.normal(size=(5, 16))
        x = np.repeat(means, 5, axis=0) + rng.normal(size=(25, 16))
        y = np.repeat(np.arange(5), 5)
        probe = fit_probe(x, y, ProbeConfig())
        oracle = fit_probe(x, y, ProbeConfig(max_iters=5000, step_size=0.1))
        assert probe.losses[-1] == pytest.approx(oracle.losses[-1], abs=1e-4)

    def test_losses_non_increasing(self):
        rng = np.random.default_rng(1)
        x = 5.0 * rng.normal(size=(15, 8))  # large scale forces step halving
        probe = fit_probe(x, np.repeat(np.arange(3), 5), ProbeConfig(step_size=10.0))
        assert probe.losses[-1] <= probe.losses[0]
        assert all(b <= a for a, b in zip(probe.losses, probe.losses[1:]))

    def test_missing_class(self):
        with pytest.raises(ValueError):
            fit_probe(np.ones((2, 2)), [0, 0], ProbeConfig(), n_classes=2)


class TestScore:
    def test_perfect(self):
        probe = Probe(np.eye(3), np.zeros(3))
        assert predict_and_score(probe, 5 * np.eye(3), [0, 1, 2]) == 1.0

    def test_tie_goes_to_lowest(self):
        probe = Probe(np.zeros((4, 2)), np.zeros(4))
        assert probe.predict(np.ones((3, 2))).tolist() == [0, 0, 0]
        assert predict_and_score(probe, np.ones((2, 2)), [0, 1]) == 0.5

    def test_empty(self):
        with pytest.raises(ValueError, match="empty query set"):
            predict_and_score(Probe(np.eye(2), np.zeros(2)), np.zeros((0, 2)), [])

    @given(st.integers(0, 10**6))
    def test_shift_invariance(self, seed):
        rng = np.random.default_rng(seed)
        w, b, x = rng.normal(size=(4, 3)), rng.normal(size=4), rng.normal(size=(20, 3))
        v = rng.normal(size=3)
        assert np.array_equal(Probe(w, b).predict(x), Probe(w + v, b).predict(x)) or \
            np.max(np.abs(np.diff(np.sort(Probe(w, b).logits(x), axis=1)[:, -2:], axis=1))) < 1e-12


class TestFuse:
    def test_example(self):
        fused = fuse_features([[3.0, 4.0]], [[0.0, 5.0]])
        np.testing.assert_allclose(fused, np.array([[0.6, 0.8, 0.0, 1.0]]) / math.sqrt(2), atol=1e-15)

    def test_norms(self):
        rng = np.random.default_rng(0)
        u, v = rng.normal(size=(10, 3)) * 7, rng.normal(size=(10, 5)) * 0.01
        fused = fuse_features(u, v)
        np.testing.assert_allclose(np.linalg.norm(fused, axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(np.linalg.norm(fused[:, :3], axis=1), 1 / math.sqrt(2), atol=1e-12)
        np.testing.assert_allclose(np.linalg.norm(fused[:, 3:], axis=1), 1 / math.sqrt(2), atol=1e-12)

    def test_mismatch(self):
        with pytest.raises(ValueError, match="row-count mismatch"):
            fuse_features(np.ones((2, 2)), np.ones((3, 2)))


class TestCi:
    def test_constant(self):
        assert mean_ci95([0.7] * 10) == (pytest.approx(0.7), 0.0)

    def test_hand_computed(self):
        mean, ci = mean_ci95([1, 1, 0, 0])
        s = math.sqrt(1 / 3)  # sum of squared deviations 1, over n - 1 = 3
        assert mean == 0.5
        assert ci == pytest.approx(1.96 * s / 2, abs=1e-15)
        assert ci == pytest.approx(0.56580, abs=1e-5)

    def test_single_episode(self):
        assert mean_ci95([0.3]) == (0.3, 0.0)


class TestEvaluate:
    spec = EpisodeSpec(ways=5, shots=2, queries=5, episodes=40, seed=3)

    def test_report(self):
        t = blob_table()
        r = evaluate(t.features, t, self.spec)
        assert r.episodes == 40 and len(r.per_episode_acc) == 40
        assert r.mean_acc == pytest.approx(np.mean(r.per_episode_acc), abs=1e-15)
        assert 0 <= r.mean_acc <= 1
        assert r.mean_acc > 0.4  # well above the 0.2 chance level
        d = json.loads(r.to_json())
        for key in ("ways", "shots", "queries", "episodes", "seed", "mean_acc", "ci95",
                    "per_episode_acc", "feature_file", "probe_config"):
            assert key in d
        assert EvalReport.from_dict(d) == r

    def test_summary_format(self):
        r = EvalReport(5, 1, 15, 1000, 0, 0.7765, 0.00512, [], "", {})
        assert r.summary() == "77.65±0.51"

    def test_order_and_concurrency_independent(self):
        t = blob_table(seed=1)
        ref = evaluate(t.features, t, self.spec)
        order = np.random.default_rng(0).permutation(40)
        shuffled = evaluate(t.features, t, self.spec, episode_indices=order, chunk_size=7)
        threaded = evaluate(t.features, t, self.spec, chunk_size=5, workers=3)
        assert shuffled == ref and threaded == ref
        part = evaluate(t.features, t, self.spec, episode_indices=[39, 2])
        assert part.per_episode_acc == [ref.per_episode_acc[2], ref.per_episode_acc[39]]

    def test_row_rescaling_with_normalization(self):
        t = blob_table(seed=2)
        scales = np.random.default_rng(0).uniform(0.1, 10.0, size=len(t))[:, None]
        a = evaluate(t.features, t, self.spec)
        b = evaluate(t.features * scales, t, self.spec)
        assert a.per_episode_acc == b.per_episode_acc

    def test_global_scale_with_matched_lambda(self):
        # features * c with lambda * c^2 is the same objective under W -> W / c
        t = blob_table(seed=4)
        c = 4.0
        cfg = ProbeConfig(l2_lambda=0.05, max_iters=20000, grad_tolerance=1e-10)
        cfg_scaled = ProbeConfig(l2_lambda=0.05 * c * c, max_iters=20000, step_size=1 / c ** 2,
                                 grad_tolerance=1e-10)
        for e in range(10):
            ep = sample_episode(t, self.spec, e)
            p = fit_probe(t.features[ep.support], ep.support_labels, cfg, 5)
            q = fit_probe(c * t.features[ep.support], ep.support_labels, cfg_scaled, 5)
            np.testing.assert_allclose(q.weights * c, p.weights, atol=1e-5)
            assert np.array_equal(p.predict(t.features[ep.query]), q.predict(c * t.features[ep.query]))

    def test_feature_row_mismatch(self):
        t = blob_table()
        with pytest.raises(ValueError):
            evaluate(t.features[:-1], t, self.spec)

    def test_error_names_episode(self):
        t = blob_table(per_class=5)
        with pytest.raises(ValueError, match="episode 0"):
            evaluate(t.features, t, EpisodeSpec(ways=5, shots=3, queries=5, episodes=2))

    def test_ci_coverage(self):
        # each episode accuracy is the mean of 75 Bernoulli(p) query outcomes
        rng = np.random.default_rng(0)
        p, n, runs = 0.6, 100, 10_000
        accs = rng.binomial(75, p, size=(runs, n)) / 75
        covered = 0
        for row in accs:
            mean, ci = mean_ci95(row)
            covered += abs(mean - p) <= ci
        assert abs(covered / runs - 0.95) <= 0.015
