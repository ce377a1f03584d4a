import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from casa.datasets import DomainDataset
from casa.errors import PolicyError
from casa.meta_tasks import (
    TaskSetPolicy,
    build_task,
    build_tasks,
    enumerate_meta_tasks,
    mask_from_str,
    mask_to_str,
)


def domains(sizes):
    return [DomainDataset(i, np.full((n, 2), float(i)), np.zeros(n, dtype=int)) for i, n in enumerate(sizes)]


def test_three_domains_give_seven_tasks():
    assert len(enumerate_meta_tasks(3)) == 7


def test_five_domains_reduced_policy_gives_eleven():
    masks = enumerate_meta_tasks(5, TaskSetPolicy("singleton_plus_leaveoneout_plus_full"))
    assert len(masks) == 11
    assert sorted(sum(m) for m in masks) == [1] * 5 + [4] * 5 + [5]


def test_two_domain_enumeration_order():
    assert [mask_to_str(m) for m in enumerate_meta_tasks(2)] == ["01", "10", "11"]


def test_three_domain_order_is_popcount_then_value():
    got = [mask_to_str(m) for m in enumerate_meta_tasks(3)]
    assert got == ["001", "010", "100", "011", "101", "110", "111"]


def test_single_domain_rejected():
    with pytest.raises(PolicyError):
        enumerate_meta_tasks(1)


@pytest.mark.parametrize("masks", [[], ["101", "1"], ["000"], ["110", "110"], ["1x0"]])
def test_bad_explicit_masks(masks):
    with pytest.raises(PolicyError):
        enumerate_meta_tasks(3, TaskSetPolicy("explicit_masks", masks))


def test_explicit_masks_are_sorted():
    got = enumerate_meta_tasks(3, TaskSetPolicy("explicit_masks", ["111", "100", "011"]))
    assert [mask_to_str(m) for m in got] == ["100", "011", "111"]


def test_mask_110_splits_first_two_from_third():
    task = build_task(domains([3, 4, 5]), mask_from_str("110"))
    assert task.source_domains == [0, 1] and task.target_domains == [2]
    assert not task.preserve_only


def test_full_mask_is_preserve_only():
    task = build_task(domains([3, 4, 5]), (True, True, True))
    assert task.target == [] and task.preserve_only


def test_validation_parts_follow_the_mask():
    train, val = domains([6, 6, 6]), domains([2, 2, 2])
    tasks = build_tasks(train, None, val)
    for t in tasks:
        assert [d.domain_id for d in t.source_val] == t.source_domains
        assert [d.domain_id for d in t.target_val] == t.target_domains
    assert [t.task_id for t in tasks] == list(range(7))


@given(st.lists(st.integers(1, 20), min_size=2, max_size=5), st.data())
def test_source_and_target_partition_the_samples(sizes, data):
    d = len(sizes)
    mask = data.draw(st.lists(st.booleans(), min_size=d, max_size=d).filter(any))
    task = build_task(domains(sizes), tuple(mask))
    x, y, dom = task.pooled_source()
    assert len(y) + sum(len(t) for t in task.target) == sum(sizes)
    assert set(dom.tolist()) == set(task.source_domains)


@given(st.integers(2, 6))
def test_all_subsets_count(d):
    masks = enumerate_meta_tasks(d)
    assert len(masks) == 2**d - 1 == len(set(masks))
