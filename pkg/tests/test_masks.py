import numpy as np
import pytest

from randsac.errors import ConfigurationError
from randsac.layout import PartitionSpec, sample_layout
from randsac.masks import (build_decoder_self_mask, build_memory_mask, build_source_mask, dump_mask,
                           memory_mask_from_ranks, read_pbm, source_mask_from_ranks, token_ranks)
from randsac.segmenter import SegmentMap, per_token_partition
from randsac.serializer import SerializationOrder, random_flat_order, raster_order


def random_layouts(rng, count):
    specs = [PartitionSpec("blob", "random", levels=(5,)), PartitionSpec("blob", "random", levels=(11, 5)),
             PartitionSpec("square", "random", square_size=2), PartitionSpec("patch", "random"),
             PartitionSpec("blob", "raster", levels=(7,), shuffle=True)]
    for i in range(count):
        g = int(rng.integers(2, 9))
        spec = specs[i % len(specs)]
        if spec.kind == "square":
            g = max(4, g + g % 2)
        yield sample_layout(rng, spec, g, g)


class TestDegenerate:
    @pytest.mark.parametrize("g", range(2, 17))
    def test_per_token_raster(self, g):
        n = g * g
        seg = per_token_partition(n)
        order = raster_order(seg)
        np.testing.assert_array_equal(build_source_mask(seg, order), np.tril(np.ones((n, n), bool)))
        expected = np.tril(np.ones((n, n), bool), k=-1)
        expected[0, 0] = True
        np.testing.assert_array_equal(build_memory_mask(seg, order), expected)


class TestFigureExample:
    """Four tokens in three segments predicted green -> blue -> red."""

    def setup_method(self):
        # tokens: 0 green, 1 and 2 blue, 3 red; ids chosen out of order on purpose
        self.seg = SegmentMap(np.array([2, 0, 0, 1]))
        self.order = SerializationOrder(((2,), (0,), (1,)))

    def test_source(self):
        src = build_source_mask(self.seg, self.order)
        assert src[0].tolist() == [True, False, False, False]
        assert src[1].tolist() == src[2].tolist() == [True, True, True, False]
        assert src[3].all()

    def test_memory(self):
        mem = build_memory_mask(self.seg, self.order)
        assert mem[0].tolist() == [True, False, False, False]
        assert mem[1].tolist() == mem[2].tolist() == [True, False, False, False]
        assert mem[3].tolist() == [True, True, True, False]

    def test_two_segments_first_rows(self):
        seg = SegmentMap(np.array([1, 0, 1, 0]))
        order = SerializationOrder(((1,), (0,)))
        src = build_source_mask(seg, order)
        np.testing.assert_array_equal(src[[0, 2]], [[True, False, True, False]] * 2)


class TestProperties:
    def test_random_layouts(self, rng):
        for seg, order in random_layouts(rng, 1000):
            src = build_source_mask(seg, order)
            dec = build_decoder_self_mask(seg, order)
            mem = build_memory_mask(seg, order)
            ranks = token_ranks(seg, order)
            np.testing.assert_array_equal(src, dec)
            assert src.diagonal().all()
            for m in (src, mem):
                assert m.any(axis=1).all()
            assert not (mem & ~src).any()
            same = ranks[:, None] == ranks[None, :]
            np.testing.assert_array_equal(src[same], src.T[same])
            # memory = source minus own-segment columns, except for the first segment
            own = same & (ranks[:, None] > 0)
            np.testing.assert_array_equal(mem, src & ~own)
            last = ranks == ranks.max()
            np.testing.assert_array_equal(mem[last], np.broadcast_to(ranks < ranks.max(), mem[last].shape))

    def test_relabel_equivariance(self, rng):
        for seg, order in random_layouts(rng, 100):
            relabel = rng.permutation(seg.K)
            seg2 = SegmentMap(relabel[seg.assignment])
            order2 = SerializationOrder(tuple(tuple(int(relabel[s]) for s in g) for g in order.groups))
            np.testing.assert_array_equal(build_source_mask(seg, order), build_source_mask(seg2, order2))
            np.testing.assert_array_equal(build_memory_mask(seg, order), build_memory_mask(seg2, order2))

    def test_token_permutation_equivariance(self, rng):
        for seg, order in random_layouts(rng, 100):
            perm = rng.permutation(seg.num_tokens)
            seg2 = SegmentMap(seg.assignment[perm])
            src = build_source_mask(seg, order)
            np.testing.assert_array_equal(build_source_mask(seg2, order), src[np.ix_(perm, perm)])

    def test_batched_ranks(self, rng):
        layouts = list(random_layouts(rng, 6))
        layouts = [(s, o) for s, o in layouts if s.num_tokens == layouts[0][0].num_tokens]
        ranks = np.stack([token_ranks(s, o) for s, o in layouts])
        for i, (s, o) in enumerate(layouts):
            np.testing.assert_array_equal(source_mask_from_ranks(ranks)[i], build_source_mask(s, o))
            np.testing.assert_array_equal(memory_mask_from_ranks(ranks)[i], build_memory_mask(s, o))

    def test_inconsistent_order_rejected(self):
        with pytest.raises(ConfigurationError):
            token_ranks(SegmentMap(np.array([0, 1, 2])), random_flat_order(np.random.default_rng(0), 2))


def test_pbm_round_trip(tmp_path, rng):
    mask = rng.random((7, 7)) < 0.5
    dump_mask(mask, tmp_path / "m.pbm")
    text = (tmp_path / "m.pbm").read_text()
    assert text.startswith("P1\n7 7\n")
    np.testing.assert_array_equal(read_pbm(tmp_path / "m.pbm"), mask)
