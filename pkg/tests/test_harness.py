import numpy as np
import pytest

from patchlab import (ContractError, ContrastiveOracle, DonorPool, EvalRecord,
                      ImageTensor, LabeledImage, RiseConfig, SweepSummary,
                      emit_plots, load_labeled_dataset, load_labels,
                      rank_categories, run_attack_sweep, run_selectivity_eval,
                      write_records_csv, write_selectivity_csv, write_summary_csv)

from conftest import TESTS_DIR, half_field_probe, write_two_class_dataset


def two_class_items(rng, count, h=28, w=28):
    items = []
    for i in range(count):
        label = i % 2
        data = rng.random((h, w, 3)).astype(np.float32) * 0.2
        if label == 0:
            data[:, : w // 2, :] += 0.7
        else:
            data[:, w // 2:, :] += 0.7
        items.append(LabeledImage(f"img{i:03d}", ImageTensor(np.clip(data, 0, 1)), label))
    return items


class TestRanking:
    def test_descending_order(self):
        assert rank_categories(np.array([0.1, 0.9, 0.5])) == (1, 2, 0)

    def test_ties_go_to_lower_index(self):
        assert rank_categories(np.array([0.5, 0.7, 0.5, 0.7])) == (1, 3, 0, 2)

    def test_top_k_truncates(self):
        scores = np.arange(10.0)
        assert rank_categories(scores, top_k=5) == (9, 8, 7, 6, 5)

    def test_fewer_classes_than_k(self):
        assert rank_categories(np.array([0.2, 0.8])) == (1, 0)


class TestEvalRecord:
    def test_correctness_flags(self):
        r = EvalRecord("a", 3, "none", 0.0, (3, 1, 2, 0, 4))
        assert r.top1 == 3 and r.correct1 and r.correct5
        r2 = EvalRecord("a", 4, "none", 0.0, (3, 1, 2, 0, 4))
        assert not r2.correct1 and r2.correct5
        r3 = EvalRecord("a", 9, "none", 0.0, (3, 1, 2, 0, 4))
        assert not r3.correct1 and not r3.correct5


class TestLabelLoading:
    def test_header_row_tolerated(self, tmp_path):
        path = tmp_path / "labels.csv"
        path.write_text("image_id,category\nfoo,2\nbar,0\n")
        assert load_labels(path) == {"foo": 2, "bar": 0}

    def test_bad_index_after_data_raises(self, tmp_path):
        path = tmp_path / "labels.csv"
        path.write_text("foo,2\nbar,oops\n")
        with pytest.raises(ContractError):
            load_labels(path)

    def test_short_row_rejected(self, tmp_path):
        path = tmp_path / "labels.csv"
        path.write_text("foo\n")
        with pytest.raises(ContractError):
            load_labels(path)

    def test_unlabeled_files_reported(self, tmp_path):
        rng = np.random.default_rng(0)
        rows = write_two_class_dataset(rng, tmp_path / "imgs", "im", 4)
        labels = {r.split(",")[0]: int(r.split(",")[1]) for r in rows[:3]}
        dataset, missing = load_labeled_dataset(tmp_path / "imgs", labels)
        assert [d.image_id for d in dataset] == ["im000", "im001", "im002"]
        assert missing == ["im003"]


class TestDonorPool:
    def test_skips_matching_label(self):
        rng = np.random.default_rng(1)
        items = two_class_items(rng, 4)
        pool = DonorPool(items)
        assert pool.next_for(0).label == 1
        assert pool.next_for(1).label == 0

    def test_round_robin_cycles(self):
        rng = np.random.default_rng(2)
        items = two_class_items(rng, 6)
        pool = DonorPool(items)
        first = [pool.next_for(1).image_id for _ in range(3)]
        assert first == ["img000", "img002", "img004"]

    def test_exhaustion_raises(self):
        rng = np.random.default_rng(3)
        items = [it for it in two_class_items(rng, 4) if it.label == 0]
        pool = DonorPool(items)
        with pytest.raises(ContractError):
            pool.next_for(0)

    def test_empty_pool_rejected(self):
        with pytest.raises(ContractError):
            DonorPool([])


class TestSweep:
    def test_clean_level_keeps_probe_accuracy(self):
        rng = np.random.default_rng(4)
        items = two_class_items(rng, 10)
        probe = half_field_probe(28, 28)
        summary, records = run_attack_sweep(items, probe, "none", (7, 7), [0.0], seed=0)
        assert summary.levels[0].top1_acc == 1.0
        assert summary.levels[0].n == 10
        assert len(records) == 10

    def test_same_seed_reproduces_records(self):
        rng = np.random.default_rng(5)
        items = two_class_items(rng, 8)
        probe = half_field_probe(28, 28)
        a = run_attack_sweep(items, probe, "patch_drop", (7, 7), [0.2, 0.4], seed=3)
        b = run_attack_sweep(items, probe, "patch_drop", (7, 7), [0.2, 0.4], seed=3)
        assert a[1] == b[1]
        assert a[0].levels == b[0].levels

    def test_summary_matches_record_recount(self):
        rng = np.random.default_rng(6)
        items = two_class_items(rng, 12)
        probe = half_field_probe(28, 28)
        summary, records = run_attack_sweep(
            items, probe, "patch_drop", (7, 7), [0.0, 0.4, 0.8], seed=1)
        for stats in summary.levels:
            level_records = [r for r in records if r.level == stats.level]
            assert stats.n == len(level_records)
            assert stats.top1_acc == sum(r.correct1 for r in level_records) / stats.n

    def test_total_loss_resolves_ties_to_category_zero(self):
        # Dropping every patch with fill 0 leaves identical zero scores for
        # both halves, so the stable ranking predicts category 0 throughout.
        rng = np.random.default_rng(7)
        items = two_class_items(rng, 10)
        probe = half_field_probe(28, 28)
        summary, records = run_attack_sweep(
            items, probe, "patch_drop", (7, 7), [1.0], seed=2)
        assert all(r.top1 == 0 for r in records)
        assert summary.levels[0].top1_acc == 0.5

    def test_mix_requires_donors(self):
        rng = np.random.default_rng(8)
        items = two_class_items(rng, 4)
        probe = half_field_probe(28, 28)
        with pytest.raises(ContractError):
            run_attack_sweep(items, probe, "patch_mix_attack", (7, 7), [0.2], seed=0)

    def test_mix_sweep_runs_with_donor_pool(self):
        rng = np.random.default_rng(9)
        items = two_class_items(rng, 6)
        probe = half_field_probe(28, 28)
        summary, records = run_attack_sweep(
            items, probe, "patch_mix_attack", (7, 7), [0.3], seed=0, donors=items)
        assert summary.levels[0].n == 6
        assert all(r.attack_kind == "patch_mix_attack" for r in records)

    def test_workers_do_not_change_results(self):
        rng = np.random.default_rng(10)
        items = two_class_items(rng, 8)
        probe = half_field_probe(28, 28)
        a = run_attack_sweep(items, probe, "patch_permute", (4, 4), [0.0], seed=5)
        b = run_attack_sweep(items, probe, "patch_permute", (4, 4), [0.0],
                             seed=5, workers=4)
        assert a[1] == b[1]

    def test_unknown_kind_rejected(self):
        rng = np.random.default_rng(11)
        items = two_class_items(rng, 2)
        with pytest.raises(ContractError):
            run_attack_sweep(items, half_field_probe(28, 28), "blur", (7, 7), [0.1], seed=0)

    def test_skipped_count_lands_in_errors_column(self):
        rng = np.random.default_rng(12)
        items = two_class_items(rng, 4)
        probe = half_field_probe(28, 28)
        summary, _ = run_attack_sweep(items, probe, "none", (7, 7), [0.0, 0.5],
                                      seed=0, skipped=3)
        assert [s.errors for s in summary.levels] == [3, 3]


class TestSelectivityEval:
    def make_oracle(self, identical=False):
        probe = half_field_probe(28, 28)
        if identical:
            return ContrastiveOracle(base=probe, contrast=probe)
        return ContrastiveOracle.from_linear_probe(probe)

    def test_identical_heads_match_chance_baseline(self):
        # f and f' agreeing everywhere zeroes the saliency map; softmax then
        # spreads mass uniformly so the masked integral equals the masked
        # pixel fraction.
        rng = np.random.default_rng(13)
        items = two_class_items(rng, 4)
        cfg = RiseConfig(n_masks=32, cell_stride=7, seed=0)
        result = run_selectivity_eval(items, self.make_oracle(identical=True),
                                      (7, 7), 0.3, cfg, seed=1)
        for r in result.records:
            assert r.inverse_selectivity == pytest.approx(r.out_of_context_fraction,
                                                          rel=1e-9)
        assert result.mean_inverse_selectivity == pytest.approx(result.mean_baseline,
                                                                rel=1e-9)

    def test_level_zero_gives_zero_mass(self):
        rng = np.random.default_rng(14)
        items = two_class_items(rng, 4)
        cfg = RiseConfig(n_masks=16, cell_stride=7, seed=0)
        result = run_selectivity_eval(items, self.make_oracle(), (7, 7), 0.0, cfg, seed=2)
        for r in result.records:
            assert r.inverse_selectivity == 0.0
            assert r.out_of_context_fraction == 0.0

    def test_per_class_cap_limits_and_sorts(self):
        rng = np.random.default_rng(15)
        items = two_class_items(rng, 10)
        cfg = RiseConfig(n_masks=8, cell_stride=7, seed=0)
        result = run_selectivity_eval(items, self.make_oracle(), (7, 7), 0.2, cfg,
                                      seed=3, per_class_cap=2)
        assert len(result.records) == 4
        per_class = result.per_class()
        assert [row[0] for row in per_class] == [0, 1]
        assert [row[1] for row in per_class] == [2, 2]

    def test_baseline_is_masked_pixel_fraction(self):
        rng = np.random.default_rng(16)
        items = two_class_items(rng, 2)
        cfg = RiseConfig(n_masks=8, cell_stride=7, seed=0)
        result = run_selectivity_eval(items, self.make_oracle(), (7, 7), 0.3, cfg, seed=4)
        # round_half_up(0.3 * 49) = 15 patches of 16 pixels on a 28x28 image
        for r in result.records:
            assert r.out_of_context_fraction == pytest.approx(15 * 16 / 784)


class TestCsvWriters:
    def test_records_csv_sorted_and_formatted(self, tmp_path):
        records = [
            EvalRecord("b", 1, "patch_drop", 0.5, (0, 1)),
            EvalRecord("a", 0, "patch_drop", 0.5, (0, 1)),
            EvalRecord("a", 1, "patch_drop", 0.25, (1, 0)),
        ]
        path = tmp_path / "records.csv"
        write_records_csv(records, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "image_id,level,ground_truth,top1,top2,top3,top4,top5,correct1,correct5"
        assert lines[1] == "a,0.25,1,1,0,,,,1,1"
        assert lines[2] == "a,0.5,0,0,1,,,,1,1"
        assert lines[3] == "b,0.5,1,0,1,,,,0,1"

    def test_summary_csv_format(self, tmp_path):
        rng = np.random.default_rng(17)
        items = two_class_items(rng, 4)
        probe = half_field_probe(28, 28)
        summary, _ = run_attack_sweep(items, probe, "none", (7, 7), [0.0], seed=0)
        path = tmp_path / "summary.csv"
        write_summary_csv(summary, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "attack_kind,oracle_kind,level,top1_acc,top5_acc,n,errors"
        assert lines[1] == "none,logit,0,1.000000,1.000000,4,0"

    def test_selectivity_csv_format(self, tmp_path):
        rng = np.random.default_rng(18)
        items = two_class_items(rng, 2)
        cfg = RiseConfig(n_masks=8, cell_stride=7, seed=0)
        oracle = ContrastiveOracle.from_linear_probe(half_field_probe(28, 28))
        result = run_selectivity_eval(items, oracle, (7, 7), 0.3, cfg, seed=0)
        path = tmp_path / "sel.csv"
        write_selectivity_csv(result, "logit", path)
        lines = path.read_text().splitlines()
        assert lines[0] == "level,n,mean_inverse_selectivity,mean_baseline,oracle_kind"
        assert lines[1].startswith("0.3,2,") and lines[1].endswith(",logit")


def summary_of(points, kind="patch_drop"):
    from patchlab.harness import LevelStats
    return SweepSummary(kind, "logit", [
        LevelStats(level=x, top1_acc=y, top5_acc=min(1.0, y + 0.1), n=10, errors=0)
        for x, y in points
    ])


class TestPlots:
    def test_single_point_draws_marker_without_line(self):
        svg = emit_plots({"drop": summary_of([(0.5, 0.7)])})
        assert "<polyline" not in svg
        assert svg.count('r="3"') == 1

    def test_two_series_with_three_levels(self):
        svg = emit_plots({
            "drop": summary_of([(0.0, 1.0), (0.4, 0.6), (0.8, 0.2)]),
            "mix": summary_of([(0.0, 1.0), (0.4, 0.8), (0.8, 0.5)], kind="patch_mix_attack"),
        })
        assert svg.count("<polyline") == 2
        assert svg.count('r="3"') == 6
        assert ">drop</text>" in svg and ">mix</text>" in svg
        # sorted key order fixes the palette assignment
        assert svg.index("#1f77b4") < svg.index("#d62728")

    def test_rejects_unknown_metric(self):
        with pytest.raises(ContractError):
            emit_plots({"drop": summary_of([(0.0, 1.0)])}, metric="loss")

    def test_output_is_deterministic(self):
        series = {"a": summary_of([(0.0, 0.9), (0.5, 0.4)])}
        assert emit_plots(series) == emit_plots(series)

    def test_golden_bytes(self):
        series = {
            "patch_drop": summary_of([(0.0, 0.95), (0.2, 0.8), (0.4, 0.6),
                                      (0.6, 0.35), (0.8, 0.15)]),
            "patch_mix_attack": summary_of([(0.0, 0.95), (0.2, 0.85), (0.4, 0.7),
                                            (0.6, 0.5), (0.8, 0.3)],
                                           kind="patch_mix_attack"),
        }
        golden = TESTS_DIR / "golden" / "curves.svg"
        assert emit_plots(series) == golden.read_text()
