import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dvn.backbone import LayerSpec
from dvn.partition import (
    UnitPartition,
    VirtualNetConfig,
    build_hierarchy,
    derive_orders,
    equal_partition,
    inclusion_counts,
    level_mask,
    s_matrix,
    s_value,
    validate,
)


def dense_body(*widths):
    return [LayerSpec("dense", a, b) for a, b in zip(widths[:-1], widths[1:])]


def sizes(part, r):
    return part.out_sizes(r)


class TestEqualPartition:
    def test_even_split(self):
        part = equal_partition(dense_body(8, 8), 4)
        assert sizes(part, 0) == [2, 2, 2, 2]
        assert part.in_sizes(0) == [2, 2, 2, 2]

    def test_remainder_to_lowest_units(self):
        part = equal_partition(dense_body(10, 10), 4)
        assert sizes(part, 0) == [3, 3, 2, 2]

    def test_single_unit(self):
        part = equal_partition(dense_body(7, 5), 1)
        assert part.in_groups[0] == ((0, 7),)
        assert part.out_groups[0] == ((0, 5),)

    def test_too_few_channels(self):
        with pytest.raises(ValueError, match="fewer than k"):
            equal_partition(dense_body(8, 3), 4)


def rule_oracle(j, k):
    """Apply the three configuration rules literally, one coupling at a time."""
    coupled = [j]
    while len(coupled) < k:
        candidates = {u for c in coupled for u in (c - 1, c + 1) if 1 <= u <= k and u not in coupled}
        coupled.append(min(candidates))
    return tuple(coupled)


class TestOrders:
    def test_three_units(self):
        assert [c.order for c in derive_orders(3)] == [(1, 2, 3), (2, 1, 3), (3, 2, 1)]

    def test_two_units(self):
        assert [c.order for c in derive_orders(2)] == [(1, 2), (2, 1)]

    def test_four_units(self):
        assert [c.order for c in derive_orders(4)] == [(1, 2, 3, 4), (2, 1, 3, 4), (3, 2, 1, 4), (4, 3, 2, 1)]

    @pytest.mark.parametrize("k", range(1, 10))
    def test_matches_rule_simulation(self, k):
        assert [c.order for c in derive_orders(k)] == [rule_oracle(j, k) for j in range(1, k + 1)]

    def test_displayed_three_unit_structure(self):
        # level sets written as [own, lower neighbour, upper neighbour] for interior tasks
        k = 3
        for c in derive_orders(k):
            j = c.task_id
            assert c.order[0] == j
            if j > 1:
                assert c.order[1] == j - 1
            if 1 < j < k:
                assert c.order[2] == j + 1
            if j == k:
                assert c.order[:3] == (k, k - 1, k - 2)

    @pytest.mark.parametrize("k", range(3, 8))
    def test_orders_pairwise_distinct(self, k):
        orders = [c.order for c in derive_orders(k)]
        assert len(set(orders)) == k

    def test_rejects_k0(self):
        with pytest.raises(ValueError, match="k must be"):
            derive_orders(0)


class TestS:
    def test_examples(self):
        c3, c4 = derive_orders(3), derive_orders(4)
        assert s_value(c3, 2, 2) == 1
        assert s_value(c3, 3, 2) == 3
        assert s_value(c4, 1, 3) == 3

    @pytest.mark.parametrize("k", range(1, 7))
    def test_diagonal_and_range(self, k):
        S = s_matrix(derive_orders(k))
        assert (np.diag(S) == 1).all()
        assert S.min() >= 1 and S.max() <= k
        # each unit is level 1 of exactly one task
        assert ((S == 1).sum(axis=0) == 1).all()

    def test_inclusion_counts_k4(self):
        assert inclusion_counts(derive_orders(4)) == [10, 12, 11, 7]


class TestMasks:
    def setup_method(self):
        self.part = equal_partition(dense_body(6, 6, 6), 3)
        self.configs = derive_orders(3)

    def test_task2_level2(self):
        assert level_mask(self.part, self.configs[1], 2).units == {1, 2}

    def test_task3_level1(self):
        m = level_mask(self.part, self.configs[2], 1)
        assert m.units == {3}
        assert m.out_index[0] == slice(4, 6)

    def test_level_out_of_range(self):
        with pytest.raises(ValueError, match="out of range"):
            level_mask(self.part, self.configs[0], 4)

    def test_strict_nesting(self):
        for c in self.configs:
            for l in range(1, c.n_h):
                assert level_mask(self.part, c, l).units < level_mask(self.part, c, l + 1).units

    def test_noncontiguous_units_use_index_arrays(self):
        cfg = VirtualNetConfig(1, (1, 3, 2))
        m = level_mask(self.part, cfg, 2)
        np.testing.assert_array_equal(m.out_index[0], [0, 1, 4, 5])
        assert m.out_width == (4, 4)


class TestValidate:
    def test_generated_plan_passes(self):
        part = equal_partition(dense_body(12, 12, 12), 4)
        assert validate(part, derive_orders(4))

    def test_duplicate_unit(self):
        part = equal_partition(dense_body(6, 6), 3)
        bad = [VirtualNetConfig(1, (1, 1, 2))]
        r = validate(part, bad)
        assert not r and "not a permutation" in r.violation

    def test_rule_one(self):
        part = equal_partition(dense_body(6, 6), 3)
        r = validate(part, [VirtualNetConfig(2, (1, 2, 3))])
        assert not r and "rule (i) violated" in r.violation

    def test_overlapping_groups(self):
        part = UnitPartition(2, (((0, 3), (2, 4)),), (((0, 2), (2, 4)),))
        r = validate(part, derive_orders(2))
        assert not r and "disjoint" in r.violation

    def test_empty_group(self):
        part = UnitPartition(2, (((0, 0), (0, 4)),), (((0, 2), (2, 4)),))
        assert not validate(part, derive_orders(2))


@st.composite
def partitions(draw):
    k = draw(st.integers(1, 6))
    n_layers = draw(st.integers(1, 4))
    sizes = [[draw(st.integers(1, 4)) for _ in range(k)] for _ in range(n_layers + 1)]
    return k, UnitPartition.from_sizes(sizes[1:], first_in=sizes[0]), sizes


@settings(max_examples=100, deadline=None)
@given(partitions())
def test_random_partitions_validate_and_nest(arg):
    k, part, _ = arg
    configs = derive_orders(k)
    assert validate(part, configs)
    hier = build_hierarchy(part, configs)
    for task, masks in hier.items():
        assert masks[-1].units == set(range(1, k + 1))
        assert masks[0].units == {task}
        for a, b in zip(masks, masks[1:]):
            assert a.units < b.units


@settings(max_examples=100, deadline=None)
@given(partitions(), st.data())
def test_mask_block_arithmetic(arg, data):
    k, part, sizes = arg
    cfg = derive_orders(k)[data.draw(st.integers(0, k - 1))]
    l = data.draw(st.integers(1, k))
    m = level_mask(part, cfg, l)
    units = cfg.order[:l]
    for r in range(part.n_layers):
        assert m.in_width[r] == sum(sizes[r][u - 1] for u in units)
        assert m.out_width[r] == sum(sizes[r + 1][u - 1] for u in units)
        # the selector picks exactly the union of the included intervals
        full = np.arange(sum(sizes[r + 1]))
        picked = set(full[m.out_index[r]].tolist())
        expect = {c for u in units for c in range(*part.out_groups[r][u - 1])}
        assert picked == expect


def test_partition_dict_roundtrip():
    part = equal_partition(dense_body(10, 7, 9), 3)
    assert UnitPartition.from_dict(part.to_dict()) == part
