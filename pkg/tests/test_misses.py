import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qcore import misses, nn
from qcore.errors import UsageError
from qcore.misses import SUMMED, MissTable

from conftest import DENSE_ARCH, blobs


def feed(table, rows):
    for row in rows:
        misses.record_outcomes(table, np.array(row)[:, None])
    return table


class TestRecordOutcomes:
    def test_alternating_sequence(self):
        table = feed(MissTable.empty([7], [4]), [[1], [0], [1], [0]])
        assert table.misses[0, 0] == 2

    def test_first_observation_only_seeds(self):
        table = feed(MissTable.empty([0, 1], [4]), [[0, 1]])
        assert table.misses.sum() == 0
        assert table.epochs_observed == 1

    def test_zero_to_one_is_not_a_miss(self):
        table = feed(MissTable.empty([0], [2]), [[0], [1], [1]])
        assert table.misses[0, 0] == 0

    @settings(max_examples=80, deadline=None)
    @given(st.lists(st.booleans(), min_size=1, max_size=30))
    def test_counts_one_to_zero_transitions(self, seq):
        table = feed(MissTable.empty([0], [8]), [[int(c)] for c in seq])
        expect = sum(1 for a, b in zip(seq, seq[1:]) if a and not b)
        assert table.misses[0, 0] == expect
        assert table.misses[0, 0] <= len(seq) - 1


class TestObserveEpoch:
    def test_model_unchanged_and_counts_bounded(self):
        data = blobs(n=60, dim=4, classes=3, seed=1)
        model = nn.build_model(DENSE_ARCH, 0)
        table = MissTable.empty(data.ids, [2, 4, 32])
        cfg = nn.TrainConfig(0.2, 1, 8, 0)
        for _ in range(6):
            nn.train_epoch(model, data, cfg)
            before = nn.checkpoint_bytes(model)
            misses.observe_epoch(table, model, [2, 4, 32], data)
            assert nn.checkpoint_bytes(model) == before
        assert table.epochs_observed == 6
        assert table.misses.max() <= 5

    def test_full_precision_proxy_is_the_model(self):
        model = nn.build_model(DENSE_ARCH, 0)
        assert misses.proxy_model(model, 32) is model

    def test_ids_must_match(self):
        data = blobs(n=10, dim=4, classes=3)
        table = MissTable.empty(np.arange(1, 11), [2])
        with pytest.raises(UsageError):
            misses.observe_epoch(table, nn.build_model(DENSE_ARCH, 0), [2], data)

    @pytest.mark.parametrize("levels", [[], [2, 2], [1], [9]])
    def test_bad_levels(self, levels):
        with pytest.raises(UsageError):
            MissTable.empty([0, 1], levels)


class TestPmf:
    def table(self):
        t = MissTable.empty(range(6), [2, 4, 32])
        t.misses[:] = [[0, 0, 0], [1, 0, 0], [1, 1, 0], [3, 1, 0], [2, 0, 1], [0, 0, 0]]
        t.epochs_observed = 5
        return t

    def test_single_level_conservation(self):
        t = self.table()
        for j in t.levels:
            assert misses.build_pmf(t, j).total == len(t.ids)

    def test_summed_excludes_full_precision_by_default(self):
        pmf = misses.build_pmf(self.table(), SUMMED)
        assert pmf.levels == (2, 4)
        assert pmf.total == 2 * 6
        assert pmf.as_dict() == {0: 6, 1: 4, 2: 1, 3: 1}

    def test_summed_with_explicit_levels(self):
        assert misses.build_pmf(self.table(), SUMMED, [2, 4, 32]).total == 18

    def test_only_nonzero_bins(self):
        assert all(n > 0 for _, n in misses.build_pmf(self.table(), 2).bins)

    def test_members_may_overlap_under_summed(self):
        members = misses.bin_members(self.table(), SUMMED)
        assert 2 in members[1] and 2 not in members[0]
        assert 3 in members[3] and 3 in members[1]

    def test_unobserved_table(self):
        with pytest.raises(UsageError):
            misses.build_pmf(MissTable.empty([0], [2]))

    def test_text_roundtrip(self, tmp_path):
        t = self.table()
        misses.save_miss_table(t, tmp_path / "m.tsv")
        back = misses.load_miss_table(tmp_path / "m.tsv")
        np.testing.assert_array_equal(back.misses, t.misses)
        assert back.levels == t.levels and back.epochs_observed == 5
