"""Similarity construction and recall metrics against brute-force
ranking oracles."""
import numpy as np
import pytest

from capvid.errors import ConfigError, EvalError, ShapeError
from capvid.evaluator import (EvalReport, SimilarityMatrix, build_similarity,
                              caption_bottleneck_eval, cross_eval, evaluate,
                              recall_at_k)
from capvid.poolcore import PoolingConfig
from capvid.trainer import ProjectionModel


def oracle_recall(values, row_ids, col_ids, gt, ks):
    """Full-sort brute force, independent of recall_at_k internals."""
    t2v = {}
    ranks = []
    for r, rid in enumerate(row_ids):
        order = sorted(range(len(col_ids)),
                       key=lambda c: (-values[r, c], col_ids[c]))
        ranks.append(order.index(col_ids.index(gt[rid])) + 1)
    for k in ks:
        t2v[k] = sum(1 for rank in ranks if rank <= k) / len(ranks)
    return t2v, ranks


def matrix(values, row_ids=None, col_ids=None):
    values = np.asarray(values, dtype=np.float64)
    q, g = values.shape
    return SimilarityMatrix(values,
                            row_ids or [f"q{i}" for i in range(q)],
                            col_ids or [f"v{j}" for j in range(g)])


class TestRecallAtK:
    def test_identity_matrix_perfect(self):
        sim = matrix(np.eye(4))
        gt = {f"q{i}": f"v{i}" for i in range(4)}
        report = recall_at_k(sim, gt, ks=(1, 2))
        assert report.t2v[1] == 1.0
        assert report.v2t[1] == 1.0
        assert report.t2v_median_rank == 1

    def test_hand_ranked_two_by_two(self):
        sim = matrix([[0.9, 0.8], [0.95, 0.1]])
        gt = {"q0": "v0", "q1": "v1"}
        report = recall_at_k(sim, gt, ks=(1, 2))
        # query 0 ranks its own video first; query 1 ranks it second
        assert report.t2v[1] == 0.5
        assert report.t2v[2] == 1.0

    def test_matches_oracle_on_random_matrices(self, rng):
        for _ in range(10):
            q, g = int(rng.integers(3, 40)), int(rng.integers(3, 40))
            values = rng.uniform(-1, 1, (q, g))
            col_ids = [f"v{j}" for j in range(g)]
            gt = {f"q{i}": col_ids[int(rng.integers(g))] for i in range(q)}
            sim = matrix(values, col_ids=col_ids)
            report = recall_at_k(sim, gt, ks=(1, 5, 10))
            want, _ = oracle_recall(values, sim.row_ids, col_ids, gt, (1, 5, 10))
            assert report.t2v == want

    def test_monotone_in_k(self, rng):
        values = rng.uniform(-1, 1, (30, 30))
        gt = {f"q{i}": f"v{i}" for i in range(30)}
        report = recall_at_k(matrix(values), gt, ks=(1, 5, 10, 30))
        assert report.t2v[1] <= report.t2v[5] <= report.t2v[10] <= report.t2v[30]
        assert report.t2v[30] == 1.0  # R@G = 1

    def test_gallery_permutation_invariance(self, rng):
        values = rng.uniform(-1, 1, (10, 12))
        col_ids = [f"v{j}" for j in range(12)]
        gt = {f"q{i}": col_ids[int(rng.integers(12))] for i in range(10)}
        base = recall_at_k(matrix(values, col_ids=col_ids), gt)
        perm = rng.permutation(12)
        shuffled = matrix(values[:, perm], col_ids=[col_ids[p] for p in perm])
        again = recall_at_k(shuffled, gt)
        assert base.t2v == again.t2v
        assert base.v2t == again.v2t

    def test_rank_invariance_under_monotone_transform(self, rng):
        values = rng.uniform(-1, 1, (8, 9))
        gt = {f"q{i}": f"v{int(rng.integers(9))}" for i in range(8)}
        base = recall_at_k(matrix(values), gt)
        warped = recall_at_k(matrix(np.tanh(3.0 * values)), gt)
        assert base.t2v == warped.t2v

    def test_tie_broken_by_ascending_id(self):
        sim = matrix([[0.5, 0.5]])
        assert recall_at_k(sim, {"q0": "v0"}, ks=(1,)).t2v[1] == 1.0
        assert recall_at_k(sim, {"q0": "v1"}, ks=(1,)).t2v[1] == 0.0

    def test_v2t_best_of_multiple_gt(self):
        # video v0 has two queries; only the second ranks it first
        sim = matrix([[0.1, 0.9], [0.8, 0.2]])
        gt = {"q0": "v0", "q1": "v0"}
        report = recall_at_k(sim, gt, ks=(1,))
        assert report.v2t[1] == 1.0  # v1 has no gt query and is skipped

    def test_missing_gt_column(self):
        sim = matrix([[0.3, 0.4]])
        with pytest.raises(EvalError, match="q0"):
            recall_at_k(sim, {"q0": "ghost"}, ks=(1,))

    def test_median_rank_lower_median(self):
        sim = matrix([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]],
                     col_ids=["v0", "v1", "v2"])
        report = recall_at_k(sim, {"q0": "v0", "q1": "v0"}, ks=(1,))
        # ranks are 1 and 3; lower median is 1
        assert report.t2v_median_rank == 1


class TestBuildSimilarity:
    def test_single_frame_qs_equals_mean_pool_exactly(self, small_dataset):
        import copy
        ds = copy.deepcopy(small_dataset)
        for v in ds.manifest.videos:
            v.frame_rows = v.frame_rows[:1]
        model = ProjectionModel.identity(ds.dim)
        pooling = PoolingConfig(tau=0.1)
        a = build_similarity(model, ds, "qs", pooling)
        b = build_similarity(model, ds, "mean_pool", pooling)
        assert np.array_equal(a.values, b.values)

    def test_identity_model_matches_frozen_baseline_bitwise(self, small_dataset):
        pooling = PoolingConfig(tau=0.1)
        a = build_similarity(ProjectionModel.identity(16), small_dataset,
                             "qs", pooling)
        b = build_similarity(ProjectionModel.identity(16), small_dataset,
                             "qs", pooling)
        assert np.array_equal(a.values, b.values)

    def test_qs_matches_scalar_recomputation(self, small_dataset, rng):
        from capvid.poolcore import qs_pool

        pooling = PoolingConfig(tau=0.1)
        sim = build_similarity(ProjectionModel.identity(16), small_dataset,
                               "qs", pooling)
        queries = {q.query_id: q for q in small_dataset.manifest.queries}
        for _ in range(10):
            r = int(rng.integers(len(sim.row_ids)))
            c = int(rng.integers(len(sim.col_ids)))
            qvec = small_dataset.queries64[queries[sim.row_ids[r]].embedding_row]
            frames = small_dataset.frame_matrix(sim.col_ids[c])
            pooled = qs_pool(frames, qvec, 0.1)
            want = pooled @ qvec / (np.linalg.norm(pooled) * np.linalg.norm(qvec))
            assert sim.values[r, c] == pytest.approx(want, abs=1e-12)

    def test_mcqs_mode_requires_groups(self, small_dataset):
        import copy
        ds = copy.deepcopy(small_dataset)
        ds.manifest.gt_caption_groups = {}
        with pytest.raises(ConfigError):
            build_similarity(ProjectionModel.identity(16), ds, "mcqs",
                             PoolingConfig())

    def test_mcqs_mode_scores_groups_jointly(self, small_dataset):
        from capvid.poolcore import mcqs_similarity

        pooling = PoolingConfig(tau=0.1)
        sim = build_similarity(ProjectionModel.identity(16), small_dataset,
                               "mcqs", pooling)
        vid_r = sim.row_ids[0]
        vid_c = sim.col_ids[3]
        rows = small_dataset.manifest.gt_caption_groups[vid_r]
        want = mcqs_similarity(small_dataset.frame_matrix(vid_c),
                               small_dataset.queries64[rows], pooling)
        r = sim.row_ids.index(vid_r)
        assert sim.values[r, 3] == pytest.approx(want, abs=1e-12)

    def test_unknown_mode(self, small_dataset):
        with pytest.raises(ConfigError):
            build_similarity(ProjectionModel.identity(16), small_dataset,
                             "itm", PoolingConfig())

    def test_dim_mismatch(self, small_dataset):
        with pytest.raises(ShapeError):
            build_similarity(ProjectionModel.identity(8), small_dataset,
                             "qs", PoolingConfig())

    def test_values_within_unit_interval(self, small_dataset):
        sim = build_similarity(ProjectionModel.identity(16), small_dataset,
                               "qs", PoolingConfig())
        assert np.all(sim.values <= 1.0)
        assert np.all(sim.values >= -1.0)


class TestCaptionBottleneck:
    def test_single_caption_is_its_own_representation(self, small_dataset):
        report = caption_bottleneck_eval(small_dataset, small_dataset.captions,
                                         k_select=1)
        assert set(report.t2v) == {1, 5, 10}

    def test_rejects_missing_table(self, small_dataset):
        with pytest.raises(ConfigError):
            caption_bottleneck_eval(small_dataset, None, 2)

    def test_identical_captions_ignore_k_select(self, small_dataset):
        import copy
        ds = copy.deepcopy(small_dataset)
        # collapse every caption embedding of each video to one row
        for c in ds.manifest.captions:
            first = ds.captions_by_video[c.video_id][0]
            c.embedding_row = first.embedding_row
        ds.captions_by_video = {v.video_id: [] for v in ds.manifest.videos}
        for c in ds.manifest.captions:
            ds.captions_by_video[c.video_id].append(c)
        a = caption_bottleneck_eval(ds, ds.captions, 1)
        b = caption_bottleneck_eval(ds, ds.captions, 4)
        assert a.t2v == b.t2v

    def test_k_select_validation(self, small_dataset):
        with pytest.raises(ConfigError):
            caption_bottleneck_eval(small_dataset, small_dataset.captions, 0)


class TestCrossEval:
    def test_single_cell_equals_direct_evaluate(self, small_dataset):
        pooling = PoolingConfig(tau=0.1)
        model = ProjectionModel.identity(16)
        grid = cross_eval({"m": model}, {"ds": small_dataset}, "qs", pooling)
        direct = evaluate(model, small_dataset, "qs", pooling)
        assert grid[("m", "ds")].t2v == direct.t2v

    def test_identity_row_equals_frozen_row(self, small_dataset):
        pooling = PoolingConfig(tau=0.1)
        grid = cross_eval({"ident": ProjectionModel.identity(16)},
                          {"ds": small_dataset}, "qs", pooling)
        assert grid[("ident", "ds")].t2v == grid[("frozen", "ds")].t2v
        assert grid[("ident", "ds")].v2t == grid[("frozen", "ds")].v2t

    def test_dim_mismatch_names_pair(self, small_dataset):
        with pytest.raises(ShapeError, match="tiny"):
            cross_eval({"tiny": ProjectionModel.identity(4)},
                       {"ds": small_dataset}, "qs", PoolingConfig())

    def test_grid_diagonal_reproducible_from_single_runs(self, tmp_path, rng):
        from capvid.embstore import SynthSpec, load_dataset, synthesize
        from capvid.trainer import TrainConfig, train
        from capvid.captionsel import SelectionStrategy

        datasets = {}
        models = {}
        pooling = PoolingConfig(tau=0.1)
        for name, seed in (("dsA", 41), ("dsB", 42)):
            out = tmp_path / name
            synthesize(seed, SynthSpec(videos=24, dim=16, name=name), out)
            datasets[name] = load_dataset(out / "manifest.json")
            cfg = TrainConfig(
                batch_size=8, epochs=2, seed=seed,
                strategy=SelectionStrategy("top_k_per_captioner",
                                           ["synthcap-a", "synthcap-b"], k=2),
                pooling=pooling)
            models[name], _ = train([datasets[name]], cfg)
        grid = cross_eval(models, datasets, "qs", pooling, split="test")
        for name in datasets:
            direct = evaluate(models[name], datasets[name], "qs", pooling,
                              video_ids=datasets[name].video_ids("test"),
                              fingerprint=name)
            assert grid[(name, name)].t2v == direct.t2v
            assert grid[(name, name)].v2t == direct.v2t


class TestEvalReport:
    def test_csv_rows_shape(self):
        report = EvalReport(dataset="d", fingerprint="f",
                            t2v={1: 0.5, 5: 0.75}, v2t={1: 0.25, 5: 0.5},
                            t2v_median_rank=2, v2t_median_rank=3)
        rows = report.csv_rows()
        assert len(rows) == 4
        assert rows[0] == {"dataset": "d", "direction": "t2v", "k": 1,
                           "recall": "0.500000", "median_rank": 2}

    def test_duplicate_ids_rejected(self):
        with pytest.raises(EvalError):
            SimilarityMatrix(np.zeros((2, 2)), ["a", "a"], ["x", "y"])
