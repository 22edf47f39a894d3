import csv
import io
import json

import numpy as np
import pytest

from pcrobust import analysis, attacks, data, losses, models
from pcrobust.attacks import AttackConfig
from pcrobust.models import ArchitectureSpec, build


def fixed_linear(bias, k=None, shape=(1, 1, 2)):
    k = k or len(bias)
    net = build(ArchitectureSpec("linear", shape, k), seed=0)
    net.set_state([np.zeros((int(np.prod(shape)), k)), np.asarray(bias, dtype=float)])
    return net


class TestGrid:
    def test_colon_form(self):
        g = analysis.parse_grid("0.02:0.3:0.02")
        assert len(g) == 15 and g[0] == 0.02 and g[-1] == 0.3

    def test_list_form(self):
        assert analysis.parse_grid("0.1, 0.2,0.3") == [0.1, 0.2, 0.3]

    def test_bad_step(self):
        with pytest.raises(ValueError):
            analysis.parse_grid("0.1:0.3:0")


class TestRanks:
    def test_tie_break_by_index(self):
        r = analysis.clean_ranks(np.array([[0.2, 0.4, 0.2, 0.2]]))
        assert r.tolist() == [[2, 1, 3, 4]]

    def test_bins(self):
        assert [analysis.rank_bin(r) for r in (2, 3, 4, 5, 6, 10)] == ["2", "3", "4", "5", "other", "other"]

    def test_second_most_probable_lands_in_bin_2(self):
        # logits depend on the single pixel so FGSM can push class 1 past class 0
        net = build(ArchitectureSpec("linear", (1, 1, 1), 4), seed=0)
        net.set_state([np.array([[1.0, -1.0, 0.0, 0.0]]), np.array([0.0, 0.5, -1.0, -2.0])])
        x = np.full((1, 1, 1, 1), 0.4)
        ds = data.LabeledDataset(x, np.array([0]), 4)
        h = analysis.rank_histogram(net, ds, "fgsm", [0.01, 0.1, 0.3])
        assert sum(h.new_success) == 1
        m = h.new_success.index(1)
        assert h.rank_counts[m]["2"] == 1

    def test_one_point_no_success(self, blob_mlp, blobs):
        _, test = blobs
        h = analysis.rank_histogram(blob_mlp, test, "fgsm", [1e-9])
        assert h.new_success == [0]
        assert h.rank_counts == [dict.fromkeys(analysis.RANK_BINS, 0)]

    @pytest.mark.parametrize("grid", [[0.1, 0.05], [0.0, 0.1], [], [0.1, 0.1]])
    def test_grid_validation(self, blob_mlp, blobs, grid):
        with pytest.raises(ValueError):
            analysis.rank_histogram(blob_mlp, blobs[1], "fgsm", grid)

    def test_method_validation(self, blob_mlp, blobs):
        with pytest.raises(ValueError):
            analysis.rank_histogram(blob_mlp, blobs[1], "pgd", [0.1])

    @pytest.mark.parametrize("method", ["fgsm", "mim"])
    def test_bookkeeping(self, blob_mlp, blobs, method):
        _, test = blobs
        grid = analysis.parse_grid("0.05:0.4:0.05")
        base = AttackConfig(method, iterations=5 if method == "mim" else None, step_size=0.05)
        h = analysis.rank_histogram(blob_mlp, test, method, grid, base)
        for n, c in zip(h.new_success, h.rank_counts):
            assert sum(c.values()) == n and min(c.values()) >= 0

        probs = losses.softmax(blob_mlp.logits(test.images))
        eligible = probs.argmax(1) == test.labels
        assert h.eligible == int(eligible.sum())
        first = np.array(h.first_success)
        hit_any = np.zeros(len(test), bool)
        recount = [dict.fromkeys(analysis.RANK_BINS, 0) for _ in grid]
        order = np.argsort(-probs, axis=1, kind="stable")
        for m, eps in enumerate(grid):
            r = attacks.run_attack(blob_mlp, test.images, test.labels, AttackConfig(**{**base.to_dict(), "epsilon": eps}))
            new = r.success & eligible & ~hit_any
            assert np.array_equal(np.flatnonzero(new), np.flatnonzero(first == m))
            for i in np.flatnonzero(new):
                rank = int(np.flatnonzero(order[i] == r.predictions[i])[0]) + 1
                recount[m][analysis.rank_bin(rank)] += 1
            hit_any |= r.success & eligible
        assert recount == h.rank_counts
        # disjoint first-success sets whose union is every sample broken somewhere on the grid
        assert sum(h.new_success) == int(hit_any.sum())

    def test_long_csv(self, blob_mlp, blobs):
        h = analysis.rank_histogram(blob_mlp, blobs[1], "fgsm", [0.1, 0.2])
        rows = list(csv.reader(io.StringIO(h.to_csv())))
        assert rows[0] == ["epsilon", "rank", "count"]
        assert len(rows) == 1 + 2 * len(analysis.RANK_BINS)
        assert [r[0] for r in rows[1:6]] == ["0.1"] * 5
        assert json.loads(json.dumps(h.to_dict()))["grid"] == [0.1, 0.2]


class TestGaps:
    def test_confident(self):
        net = fixed_linear([1000.0, 0.0, 0.0])
        ds = data.LabeledDataset(np.zeros((5, 1, 1, 2)), np.zeros(5, np.int64), 3)
        g = analysis.gap_stats(net, ds, xi=0.995)
        assert g.mean == 1.0 and g.frac_at_least_xi == 1.0 and g.std == 0.0

    def test_uniform(self):
        net = fixed_linear([0.0, 0.0, 0.0])
        ds = data.LabeledDataset(np.zeros((4, 1, 1, 2)), np.array([0, 1, 2, 0]), 3)
        g = analysis.gap_stats(net, ds)
        assert g.mean == 0.0 and g.median == 0.0 and g.frac_at_least_xi == 0.0

    def test_misclassified_negative(self):
        net = fixed_linear([0.0, 1000.0])
        ds = data.LabeledDataset(np.zeros((2, 1, 1, 2)), np.array([0, 0]), 2)
        assert analysis.gap_stats(net, ds).mean == -1.0

    def test_ranges(self, blob_mlp, blobs):
        g = analysis.gap_stats(blob_mlp, blobs[1], xi=0.9)
        assert -1 <= g.mean <= 1 and 0 <= g.frac_at_least_xi <= 1 and g.n == len(blobs[1])
        assert set(g.to_dict()) == {"mean", "median", "std", "frac_at_least_xi", "xi", "n"}

    def test_empty(self, blob_mlp, blobs):
        with pytest.raises(ValueError):
            analysis.gap_stats(blob_mlp, blobs[1].take([]))


class TestMasking:
    def test_untrained_nets_produce_report(self, blobs):
        _, test = blobs
        small = test.take(np.arange(0, len(test), 5))
        nets = [build(ArchitectureSpec("mlp", (1, 4, 4), 4, hidden=(8,)), seed=s) for s in range(2)]
        sub = build(ArchitectureSpec("cnn3", (1, 4, 4), 4), seed=0)
        rep = analysis.gradient_masking_report(nets[0], nets[1], small, sub, eps_grid=(0.1, 0.3))
        assert set(rep["models"]) == {"ce", "pc_lc"}
        for m in rep["models"].values():
            assert set(m["checks"]) == {"iterative_beats_single_step", "white_box_beats_black_box",
                                        "monotone_in_epsilon"}
            assert set(m["fgsm_success"]) == {"0.1", "0.3"}
        assert isinstance(rep["passed"], bool)
        json.dumps(rep)

    def test_trained_blob_model(self, blob_mlp, blobs):
        _, test = blobs
        sub = build(ArchitectureSpec("linear", (1, 4, 4), 4), seed=0)
        rep = analysis.gradient_masking_report(blob_mlp, blob_mlp, test, sub, eps_grid=(0.1, 0.2, 0.3),
                                               iterative=("pgd", "mim"), near_total=0.0)
        assert rep["models"]["ce"]["checks"]["iterative_beats_single_step"]
        assert rep["models"]["ce"]["checks"]["white_box_beats_black_box"]


class TestTable:
    def test_empty_suite(self, blob_mlp, blobs):
        t = analysis.table_report({"ce": blob_mlp}, blobs[1], [])
        assert len(t.rows) == 1 and t.rows[0]["attack"] == "clean"
        assert t.rows[0]["ce"] == models.accuracy(blob_mlp, blobs[1].images, blobs[1].labels)

    def test_duplicate_column(self, blob_mlp, blobs):
        suite = [AttackConfig("fgsm", 0.1), AttackConfig("pgd", 0.2, iterations=5)]
        t = analysis.table_report({"a": blob_mlp, "b": blob_mlp}, blobs[1], suite)
        assert all(r["a"] == r["b"] for r in t.rows)
        assert t.dominance("a", "b") == 1.0
        assert t.cell("pgd@0.2", "a") == t.rows[2]["a"]

    def test_csv_and_json(self, blob_mlp, blobs):
        t = analysis.table_report({"ce": blob_mlp}, blobs[1], [AttackConfig("cw", cw_max_steps=3)])
        rows = list(csv.reader(io.StringIO(t.to_csv())))
        assert rows[0] == ["attack", "param", "ce"] and rows[2][:2] == ["cw", "0"]
        info = t.rows[1]["cw"]["ce"]
        assert info["success_rate"] == pytest.approx(1 - t.rows[1]["ce"])
        assert info["mean_l2"] is None or info["mean_l2"] > 0
        assert json.loads(t.to_json())["columns"] == ["ce"]
