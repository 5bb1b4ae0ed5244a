import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ibq import data
from ibq.rng import Stream, derive_seed


class TestSynthetic:
    def test_size_and_balance(self, synthetic):
        assert synthetic.inputs.shape == (4096, 12)
        assert int(synthetic.labels.sum()) == 2048
        assert synthetic.num_classes == 2

    def test_enumerates_every_pattern_once(self, synthetic):
        as_int = synthetic.inputs.astype(np.int64) @ (1 << np.arange(11, -1, -1))
        assert np.array_equal(np.sort(as_int), np.arange(4096))

    def test_deterministic(self, synthetic):
        again = data.gen_synthetic(0)
        assert np.array_equal(again.inputs, synthetic.inputs)
        assert np.array_equal(again.labels, synthetic.labels)

    def test_seed_changes_labels(self, synthetic):
        assert (data.gen_synthetic(1).labels != synthetic.labels).any()

    def test_read_only(self, synthetic):
        with pytest.raises(ValueError):
            synthetic.labels[0] = 1

    def test_text_round_trip(self, tmp_path, synthetic):
        path = tmp_path / "syn.txt"
        data.save_synthetic(synthetic, path)
        first = path.read_text().splitlines()[0]
        assert first == "000000000000 " + str(int(synthetic.labels[0]))
        back = data.load_synthetic(path)
        assert np.array_equal(back.inputs, synthetic.inputs)
        assert np.array_equal(back.labels, synthetic.labels)

    def test_load_rejects_garbage(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("0102 1\n")
        with pytest.raises(ValueError):
            data.load_synthetic(path)


class TestIdx:
    def _pair(self, tmp_path, n_img=5, n_lab=5):
        rng = np.random.default_rng(0)
        images = rng.integers(0, 256, size=(n_img, 4, 3), dtype=np.uint8)
        labels = rng.integers(0, 10, size=n_lab, dtype=np.uint8)
        ip, lp = tmp_path / "img", tmp_path / "lab"
        data.write_idx(ip, images, data.IDX_IMAGE_MAGIC)
        data.write_idx(lp, labels, data.IDX_LABEL_MAGIC)
        return images, labels, ip, lp

    def test_round_trip(self, tmp_path):
        images, labels, ip, lp = self._pair(tmp_path)
        ds = data.load_idx(ip, lp)
        assert ds.num_classes == 10
        assert ds.sample_shape == (4, 3)
        assert np.array_equal(ds.inputs, images.reshape(5, -1) / 255.0)
        assert np.array_equal(ds.labels, labels)
        assert ds.inputs.min() >= 0.0 and ds.inputs.max() <= 1.0

    def test_header_bytes(self, tmp_path):
        _, _, ip, _ = self._pair(tmp_path)
        raw = ip.read_bytes()
        assert raw[:4] == b"\x00\x00\x08\x03"
        assert raw[4:8] == (5).to_bytes(4, "big")

    def test_wrong_magic(self, tmp_path):
        _, _, ip, lp = self._pair(tmp_path)
        data.write_idx(lp, np.zeros((5, 1, 1), np.uint8), data.IDX_IMAGE_MAGIC)
        with pytest.raises(data.WrongMagicError, match="wrong magic number"):
            data.load_idx(ip, lp)

    def test_truncated(self, tmp_path):
        _, _, ip, lp = self._pair(tmp_path)
        ip.write_bytes(ip.read_bytes()[:-3])
        with pytest.raises(data.TruncatedFileError, match="truncated"):
            data.load_idx(ip, lp)

    def test_truncated_header(self, tmp_path):
        _, _, ip, lp = self._pair(tmp_path)
        ip.write_bytes(ip.read_bytes()[:6])
        with pytest.raises(data.TruncatedFileError):
            data.load_idx(ip, lp)

    def test_count_mismatch(self, tmp_path):
        _, _, ip, lp = self._pair(tmp_path, n_img=100, n_lab=99)
        with pytest.raises(data.CountMismatchError, match="count mismatch"):
            data.load_idx(ip, lp)

    def test_errors_are_distinct(self):
        kinds = {data.WrongMagicError, data.TruncatedFileError, data.CountMismatchError}
        assert len(kinds) == 3
        assert all(issubclass(k, data.IdxFormatError) for k in kinds)

    def test_concatenates_lists(self, tmp_path):
        images, labels, ip, lp = self._pair(tmp_path)
        ds = data.load_idx([ip, ip], [lp, lp])
        assert len(ds) == 10
        assert np.array_equal(ds.labels[5:], labels)


class TestSplit:
    def test_sizes(self, synthetic):
        sp = data.split(synthetic, 0.8, 7)
        # floor(4096 * 0.8) = floor(3276.8)
        assert (len(sp.train), len(sp.test)) == (3276, 820)

    def test_deterministic(self, synthetic):
        a, b = data.split(synthetic, 0.8, 7), data.split(synthetic, 0.8, 7)
        assert np.array_equal(a.train_indices, b.train_indices)

    def test_seed_matters(self, synthetic):
        a, b = data.split(synthetic, 0.8, 7), data.split(synthetic, 0.8, 8)
        assert not np.array_equal(a.train_indices, b.train_indices)

    @pytest.mark.parametrize("frac", [0.0, 1.0, 1.5, -0.2])
    def test_bad_fraction(self, synthetic, frac):
        with pytest.raises(ValueError):
            data.split(synthetic, frac, 0)

    @pytest.mark.parametrize("frac", [0.5, 0.8])
    def test_disjoint_and_exhaustive_sweep(self, frac):
        for n in range(1, 1001):
            ds = data.Dataset(np.zeros((n, 1)), np.zeros(n, dtype=np.int64), 2)
            sp = data.split(ds, frac, n)
            tr, te = sp.train_indices, sp.test_indices
            assert tr.size == math.floor(n * frac)
            assert np.array_equal(np.sort(np.concatenate([tr, te])), np.arange(n))

    def test_rows_follow_indices(self, synthetic):
        sp = data.split(synthetic, 0.8, 3)
        assert np.array_equal(sp.test.inputs, synthetic.inputs[sp.test_indices])


class TestFisherYates:
    def test_matches_reference_shuffle(self):
        # independent re-implementation of the documented draw rule
        key, n = derive_seed(11, 4), 37
        raw = Stream(key).bits(n - 1)
        perm = list(range(n))
        for step, i in enumerate(range(n - 1, 0, -1)):
            u = int(raw[step]) >> 11
            j = (u * (i + 1)) >> 53
            perm[i], perm[j] = perm[j], perm[i]
        assert Stream(key).permutation(n).tolist() == perm

    def test_small_n_uniform(self):
        counts = {}
        for s in range(6000):
            p = tuple(Stream(s).permutation(3))
            counts[p] = counts.get(p, 0) + 1
        assert set(counts) == set(itertools.permutations(range(3)))
        # each of 6 outcomes expects 1000; 5 sd is about 150
        assert all(abs(c - 1000) < 150 for c in counts.values())


class TestShuffleLabels:
    def test_multiset_preserved(self, synthetic):
        out = data.shuffle_labels(synthetic, 5)
        assert np.bincount(out.labels).tolist() == [2048, 2048]
        assert (out.labels != synthetic.labels).any()

    def test_inputs_untouched(self, synthetic):
        out = data.shuffle_labels(synthetic, 5)
        assert np.array_equal(out.inputs, synthetic.inputs)

    def test_deterministic(self, synthetic):
        assert np.array_equal(data.shuffle_labels(synthetic, 9).labels,
                              data.shuffle_labels(synthetic, 9).labels)

    @given(st.integers(0, 2**40), st.integers(1, 300))
    @settings(max_examples=40, deadline=None)
    def test_inverse_restores(self, seed, n):
        labels = np.arange(n) % 3
        ds = data.Dataset(np.zeros((n, 1)), labels, 3)
        out = data.shuffle_labels(ds, seed)
        perm = data.label_permutation(n, seed)
        restored = np.empty(n, dtype=np.int64)
        restored[perm] = out.labels
        assert np.array_equal(restored, labels)


class TestDatasetValidation:
    def test_row_mismatch(self):
        with pytest.raises(ValueError):
            data.Dataset(np.zeros((3, 2)), np.zeros(2, dtype=np.int64), 2)

    def test_label_range(self):
        with pytest.raises(ValueError):
            data.Dataset(np.zeros((2, 2)), np.array([0, 2]), 2)
