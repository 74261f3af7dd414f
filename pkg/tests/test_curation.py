"""Curation loop: trimming, distant retention, FPS, full-epoch runs."""

import dataclasses

import numpy as np
import pytest

from protocurate.config import EngineConfig
from protocurate.curation import (
    CuratedSelection,
    curate_superbatch,
    fps_select,
    run_curation,
    select_distant,
    trim_outliers,
)
from protocurate.errors import FormatError, InsufficientWarmupError, UsageError
from protocurate.prototypes import init_kmeans
from protocurate.synth import MixtureSpec, generate_corpus


def small_cfg(**overrides):
    base = dict(
        superbatch_size=64,
        warmup_samples=128,
        K=4,
        seed=0,
        epsilon=0.05,
        max_iters=50000,
        tol=1e-6,
    )
    base.update(overrides)
    return EngineConfig(**base)


def small_corpus(n, seed=0, d=8):
    spec = MixtureSpec(
        n_samples=n,
        clusters=4,
        weights=(0.55, 0.25, 0.12, 0.08),
        d_img=d,
        d_txt=d,
        rho=0.9,
        noise_scale=0.5,
        mean_scale=2.0,
        seed=seed,
    )
    corpus, _ = generate_corpus(spec)
    return corpus


class TestTrimOutliers:
    def test_counts_at_default_fraction(self):
        rng = np.random.default_rng(0)
        m = 640
        ids = np.arange(m, dtype=np.uint64)
        dist = rng.random(m)
        kept, trimmed = trim_outliers(ids, dist, 0.05)
        assert len(trimmed) == 32
        assert len(kept) == 608
        # trimmed are exactly the largest distances
        assert dist[trimmed].min() >= dist[kept].max()
        # kept comes back in input order
        assert np.array_equal(kept, np.sort(kept))

    def test_zero_trim_when_floor_vanishes(self):
        ids = np.arange(19, dtype=np.uint64)
        kept, trimmed = trim_outliers(ids, np.random.default_rng(1).random(19), 0.05)
        assert len(trimmed) == 0
        assert np.array_equal(kept, np.arange(19))

    def test_tie_trims_larger_id_first(self):
        ids = np.array([10, 3, 7], dtype=np.uint64)
        dist = np.array([1.0, 1.0, 0.5])
        kept, trimmed = trim_outliers(ids, dist, 1.0 / 3.0)
        assert list(trimmed) == [0]  # id 10 loses the tie against id 3
        assert list(kept) == [1, 2]

    def test_partition_is_exact(self):
        rng = np.random.default_rng(2)
        ids = rng.permutation(100).astype(np.uint64)
        dist = rng.random(100)
        kept, trimmed = trim_outliers(ids, dist, 0.13)
        together = np.sort(np.concatenate([kept, trimmed]))
        assert np.array_equal(together, np.arange(100))


class TestSelectDistant:
    def test_counts_after_default_trim(self):
        rng = np.random.default_rng(3)
        m = 608
        ids = np.arange(m, dtype=np.uint64)
        dist = rng.random(m)
        distant, pool = select_distant(ids, dist, 0.10)
        assert len(distant) == 60
        assert len(pool) == 548
        assert dist[distant].min() >= dist[pool].max()
        # selection order: distance descending
        assert np.all(np.diff(dist[distant]) <= 0)

    def test_tie_prefers_smaller_id(self):
        ids = np.array([5, 2, 9], dtype=np.uint64)
        dist = np.array([2.0, 2.0, 1.0])
        distant, pool = select_distant(ids, dist, 1.0 / 3.0)
        assert list(distant) == [1]  # id 2 wins the tie against id 5
        assert list(pool) == [0, 2]

    def test_zero_keep(self):
        ids = np.arange(9, dtype=np.uint64)
        distant, pool = select_distant(ids, np.ones(9), 0.10)
        assert len(distant) == 0
        assert np.array_equal(pool, np.arange(9))


def naive_fps(points, ids, budget, anchor):
    """Reference greedy max-min with explicit loops (oracle)."""
    n = len(points)
    if n <= budget:
        return list(range(n))
    remaining = set(range(n))

    def best_of(score):
        top = max(score[i] for i in remaining)
        cands = [i for i in remaining if score[i] == top]
        return min(cands, key=lambda i: ids[i])

    d_anchor = [float(np.linalg.norm(points[i] - anchor)) for i in range(n)]
    first = best_of(d_anchor)
    picks = [first]
    remaining.discard(first)
    while len(picks) < budget:
        score = [
            min(float(np.linalg.norm(points[i] - points[j])) for j in picks)
            for i in range(n)
        ]
        nxt = best_of(score)
        picks.append(nxt)
        remaining.discard(nxt)
    return picks


class TestFpsSelect:
    def test_collinear_trace(self):
        points = np.arange(10.0)[:, None]
        ids = np.arange(10, dtype=np.uint64)
        picks = fps_select(points, ids, 3, anchor=np.array([0.0]))
        assert list(picks) == [9, 0, 4]

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(4)
        for trial in range(30):
            n = int(rng.integers(2, 13))
            d = int(rng.integers(1, 4))
            points = rng.standard_normal((n, d))
            ids = rng.permutation(1000)[:n].astype(np.uint64)
            budget = int(rng.integers(1, n + 1))
            anchor = rng.standard_normal(d)
            got = list(fps_select(points, ids, budget, anchor))
            want = naive_fps(points, ids, budget, anchor)
            assert got == want, (trial, got, want)

    def test_budget_covers_everything(self):
        points = np.random.default_rng(5).standard_normal((4, 2))
        ids = np.array([9, 1, 5, 3], dtype=np.uint64)
        assert list(fps_select(points, ids, 4, np.zeros(2))) == [0, 1, 2, 3]
        assert list(fps_select(points, ids, 10, np.zeros(2))) == [0, 1, 2, 3]

    def test_identical_points_tie_by_id(self):
        points = np.ones((5, 2))
        ids = np.array([40, 10, 30, 20, 50], dtype=np.uint64)
        picks = fps_select(points, ids, 3, anchor=np.zeros(2))
        # every distance ties, so picks walk the ids in ascending order
        assert list(ids[picks]) == [10, 20, 30]

    def test_bad_budget(self):
        with pytest.raises(UsageError):
            fps_select(np.zeros((3, 2)), np.arange(3, dtype=np.uint64), 0, np.zeros(2))


class TestCurateSuperbatch:
    def _setup(self, m=640, seed=0):
        corpus = small_corpus(1280, seed=seed)
        from protocurate.embedding import unify_batch

        z = unify_batch(corpus.img, corpus.txt, "concat")
        bank = init_kmeans(z[:512], 6, seed=seed)
        sb = slice(512, 512 + m)
        return z[sb], corpus.ids[sb], bank

    def test_default_arithmetic(self):
        z, ids, bank = self._setup()
        cfg = EngineConfig()
        records, stats = curate_superbatch(z, ids, bank, cfg)
        assert stats["superbatch"] == 640
        assert stats["trimmed"] == 32
        assert stats["distant"] == 60
        assert stats["pool"] == 548
        assert stats["fps"] <= 60  # 6 clusters x budget 10
        assert stats["minibatch"] == stats["distant"] + stats["fps"]
        assert len(records) == stats["minibatch"] <= 120

    def test_record_structure(self):
        z, ids, bank = self._setup(seed=1)
        records, stats = curate_superbatch(z, ids, bank, EngineConfig())
        got_ids = [r[0] for r in records]
        assert len(set(got_ids)) == len(got_ids)
        assert set(got_ids) <= set(int(i) for i in ids)
        for _, reason, proto, d in records:
            assert reason in ("distant", "fps")
            assert 0 <= proto < bank.k
            assert d >= 0.0
        distant = [r for r in records if r[1] == "distant"]
        fps = [r for r in records if r[1] == "fps"]
        assert len(distant) == stats["distant"]
        # distant block leads and is sorted by distance descending
        assert records[: len(distant)] == distant
        dd = [r[3] for r in distant]
        assert all(a >= b for a, b in zip(dd, dd[1:]))
        # retained distances dominate the pooled ones
        if distant and fps:
            assert min(dd) >= max(r[3] for r in fps)

    def test_mutates_bank(self):
        z, ids, bank = self._setup(seed=2)
        before = bank.protos.copy()
        curate_superbatch(z, ids, bank, EngineConfig())
        assert bank.update_count == 1
        assert not np.array_equal(bank.protos, before)

    def test_single_sample_superbatch(self):
        z, ids, bank = self._setup(m=1, seed=3)
        records, stats = curate_superbatch(z, ids, bank, EngineConfig())
        assert stats["trimmed"] == 0
        assert stats["distant"] == 0
        assert stats["pool"] == 1
        assert len(records) == 1
        assert records[0][1] == "fps"

    def test_empty_superbatch(self):
        _, _, bank = self._setup(seed=4)
        records, stats = curate_superbatch(
            np.zeros((0, 16)), np.zeros(0, dtype=np.uint64), bank, EngineConfig()
        )
        assert records == []
        assert stats["minibatch"] == 0

    def test_sinkhorn_stats_recorded(self):
        z, ids, bank = self._setup(seed=5)
        cfg = EngineConfig()
        _, stats = curate_superbatch(z, ids, bank, cfg)
        assert stats["pool_sinkhorn_iterations"] >= 1
        assert stats["pool_sinkhorn_residual"] <= cfg.tol
        assert stats["update_sinkhorn_iterations"] >= 1
        assert stats["update_sinkhorn_residual"] <= cfg.tol


class TestRunCuration:
    def test_single_iteration_counts(self):
        corpus = small_corpus(128 + 64)
        cfg = small_cfg()
        selection, bank = run_curation(corpus, cfg)
        assert len(selection.stats) == 1
        st = selection.stats[0]
        assert st["superbatch"] == 64
        assert st["trimmed"] == 3
        assert st["distant"] == 6
        assert st["pool"] == 55
        assert st["iteration"] == 1
        assert st["emitted"] == len(selection)
        assert len(selection) <= 6 + 4 * 10
        assert bank.update_count == 1

    def test_multi_iteration_stream(self):
        corpus = small_corpus(128 + 3 * 64)
        selection, bank = run_curation(corpus, small_cfg())
        assert [s["iteration"] for s in selection.stats] == [1, 2, 3]
        assert bank.update_count == 3
        iters = sorted({row.iteration for row in selection.rows})
        assert iters == [1, 2, 3]
        ids = selection.ids()
        assert len(np.unique(ids)) == len(ids)

    def test_ragged_final_superbatch(self):
        corpus = small_corpus(128 + 64 + 20)
        selection, _ = run_curation(corpus, small_cfg())
        assert selection.stats[-1]["superbatch"] == 20

    def test_deterministic_repeat(self):
        corpus = small_corpus(128 + 2 * 64, seed=6)
        a, _ = run_curation(corpus, small_cfg())
        b, _ = run_curation(corpus, small_cfg())
        assert a.to_csv() == b.to_csv()

    def test_seed_changes_selection(self):
        corpus = small_corpus(128 + 2 * 64, seed=7)
        a, _ = run_curation(corpus, small_cfg(seed=0))
        b, _ = run_curation(corpus, small_cfg(seed=1))
        assert a.to_csv() != b.to_csv()

    def test_target_truncates_exactly(self):
        corpus = small_corpus(128 + 3 * 64, seed=8)
        full, _ = run_curation(corpus, small_cfg())
        assert len(full) > 20
        capped, _ = run_curation(corpus, small_cfg(target_subset_size=20))
        assert len(capped) == 20
        assert [r.id for r in capped.rows] == [r.id for r in full.rows[:20]]

    def test_warmup_shortfall_raises(self):
        corpus = small_corpus(100)
        with pytest.raises(InsufficientWarmupError, match="warmup"):
            run_curation(corpus, small_cfg())

    def test_warmup_rows_never_selected(self):
        corpus = small_corpus(128 + 2 * 64, seed=9)
        cfg = small_cfg()
        rng = np.random.default_rng(cfg.seed)
        warm_rows = rng.permutation(corpus.n)[: cfg.warmup_samples]
        warm_ids = set(int(i) for i in corpus.ids[warm_rows])
        got = set(int(i) for i in run_curation(corpus, cfg)[0].ids())
        assert not (got & warm_ids)

    def test_minibatch_callback_sees_selected_rows(self):
        corpus = small_corpus(128 + 2 * 64, seed=10)
        seen = []
        selection, _ = run_curation(corpus, small_cfg(), on_minibatch=seen.append)
        assert len(seen) == 2
        flat = np.concatenate(seen)
        assert np.array_equal(
            corpus.ids[flat], selection.ids()
        )

    def test_joint_mode_requires_head(self):
        corpus = small_corpus(128 + 64)
        with pytest.raises(UsageError, match="head"):
            run_curation(corpus, small_cfg(), mode="joint")

    def test_unknown_mode(self):
        corpus = small_corpus(128 + 64)
        with pytest.raises(UsageError):
            run_curation(corpus, small_cfg(), mode="online")


class TestSelectionCsv:
    def test_round_trip(self):
        corpus = small_corpus(128 + 64, seed=11)
        selection, _ = run_curation(corpus, small_cfg())
        back = CuratedSelection.from_csv(selection.to_csv())
        assert back.rows == selection.rows

    def test_file_round_trip(self, tmp_path):
        corpus = small_corpus(128 + 64, seed=12)
        selection, _ = run_curation(corpus, small_cfg())
        p = tmp_path / "sel.csv"
        selection.write_csv(p)
        assert CuratedSelection.read_csv(p).rows == selection.rows
        text = p.read_text()
        assert text.startswith("id,iteration,reason,proto,distance\n")

    def test_bad_header(self):
        with pytest.raises(FormatError, match="header"):
            CuratedSelection.from_csv("id,reason\n1,fps\n")

    def test_bad_reason(self):
        good = "id,iteration,reason,proto,distance\n"
        with pytest.raises(FormatError, match="reason"):
            CuratedSelection.from_csv(good + "1,1,outlier,0,0.5\n")

    def test_malformed_field(self):
        good = "id,iteration,reason,proto,distance\n"
        with pytest.raises(FormatError, match="line 2"):
            CuratedSelection.from_csv(good + "x,1,fps,0,0.5\n")

    def test_stats_json(self, tmp_path):
        corpus = small_corpus(128 + 64, seed=13)
        selection, _ = run_curation(corpus, small_cfg())
        p = tmp_path / "stats.json"
        selection.write_stats(p)
        import json

        data = json.loads(p.read_text())
        assert data[0]["superbatch"] == 64
