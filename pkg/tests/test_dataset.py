import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from choicekit.dataset import (
    CategoryPartition,
    ChoiceDataset,
    JointDataset,
    batch_indices,
    observable_variation,
)
from choicekit.errors import (
    BadBatchSize,
    BadPrefix,
    ChosenItemUnavailable,
    IndexOutOfRange,
    LengthMismatch,
    ShapeMismatch,
)

from helpers import random_dataset


def small():
    avail = np.array([[1, 1, 0], [1, 1, 1]], dtype=bool)
    return ChoiceDataset([0, 1, 2, 2], user_index=[0, 1, 1, 0], session_index=[0, 0, 1, 1],
                         availability=avail, user_age=[[30.0], [40.0]],
                         item_price=np.arange(6.0).reshape(3, 2),
                         session_temp=[1.0, 2.0],
                         itemsession_cost=np.ones((2, 3)))


def test_shapes_and_defaults():
    ds = small()
    assert (len(ds), ds.num_users, ds.num_items, ds.num_sessions) == (4, 2, 3, 2)
    assert ds.observables["itemsession_cost"].shape == (2, 3, 1)
    assert ds.variation["session_temp"] == "session"

    plain = ChoiceDataset([1, 0, 1])
    assert not plain.has_user_index
    assert plain.user_index.tolist() == [0, 0, 0]
    assert plain.session_index.tolist() == [0, 1, 2]
    assert plain.availability.shape == (3, 2) and plain.availability.all()
    assert plain.category.num_categories == 1


@pytest.mark.parametrize("name,variation", [
    ("user_x", "user"), ("item_x", "item"), ("session_x", "session"),
    ("itemsession_x", "itemsession"), ("price_x", "itemsession"),
])
def test_prefixes(name, variation):
    assert observable_variation(name) == variation


@pytest.mark.parametrize("name", ["x", "items_x", "user_", "sessionx"])
def test_bad_prefix(name):
    with pytest.raises(BadPrefix):
        observable_variation(name)


def test_validation_errors():
    with pytest.raises(ChosenItemUnavailable):
        ChoiceDataset([2], availability=[[True, True, False]])
    with pytest.raises(ChosenItemUnavailable):
        ChoiceDataset([0, 0], session_index=[0, 0], availability=[[True], [False]])
    with pytest.raises(ShapeMismatch):
        ChoiceDataset([0, 1], user_index=[0, 1], user_age=[[1.0]])
    with pytest.raises(ShapeMismatch):
        ChoiceDataset([0, 1], item_a=np.ones(3), itemsession_b=np.ones((2, 2)))
    with pytest.raises(IndexOutOfRange):
        ChoiceDataset([-1, 0])
    with pytest.raises(ValueError):
        ChoiceDataset([0], item_a=[[np.nan]])
    with pytest.raises(ShapeMismatch):
        ChoiceDataset([0, 1], category=CategoryPartition(np.zeros(3, dtype=int)))


def test_category_partition():
    cat = CategoryPartition(np.array([0, 1, 1, 0]))
    assert cat.num_categories == 2
    assert cat.items_in(1).tolist() == [1, 2]
    with pytest.raises(ShapeMismatch):
        CategoryPartition(np.array([0, 2]))


def test_subset_and_clone_are_independent():
    ds = small()
    sub = ds.subset([3, 0])
    assert sub.item_index.tolist() == [2, 0]
    assert sub.user_index.tolist() == [0, 0]
    assert sub.num_sessions == ds.num_sessions
    sub.observables["user_age"][0, 0] = -1.0
    assert ds.observables["user_age"][0, 0] == 30.0
    clone = ds.clone()
    assert clone == ds and clone is not ds
    clone.availability[0, 0] = False
    assert ds.availability[0, 0]
    with pytest.raises(IndexOutOfRange):
        ds.subset([4])
    with pytest.raises(IndexOutOfRange):
        ds.subset(np.array([True, False, True, False]))


def test_expand_observables():
    ds = small()
    x = ds.expand_observables([1, 2])
    assert x["user_age"].shape == (2, 3, 1)
    assert x["user_age"][0, :, 0].tolist() == [40.0] * 3
    assert x["item_price"][1].tolist() == ds.observables["item_price"].tolist()
    assert x["session_temp"][1, 2, 0] == 2.0
    assert ds.availability_rows([0, 2]).tolist() == [[True, True, False], [True, True, True]]


def test_nest_level_dataset():
    ds = ChoiceDataset([0, 3], session_index=[0, 1], num_nests=2, item_q=np.ones((2, 1)),
                       itemsession_w=np.ones((2, 2, 1)), availability=np.ones((2, 4), bool))
    assert ds.num_items == 4 and ds.num_alternatives == 2
    with pytest.raises(ShapeMismatch):
        ChoiceDataset([0, 3], num_nests=2, item_q=np.ones((4, 1)),
                      availability=np.ones((2, 4), bool))


def test_joint_dataset():
    a, b = small(), small()
    joint = JointDataset(item=a, nest=b)
    assert len(joint) == 4 and "nest" in joint
    part = joint.subset([1, 2])
    assert part["item"].item_index.tolist() == [1, 2]
    with pytest.raises(LengthMismatch):
        JointDataset(item=a, other=a.subset([0, 1]))


def test_validate_reports_tampering():
    ds = small()
    assert ds.validate() == []
    ds.availability[0, 1] = False
    assert any("unavailable" in p for p in ds.validate())


def test_summary_mentions_counts():
    text = small().summary()
    assert "records (N):  4" in text and "availability density: 0.8333" in text


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 60), size=st.integers(-1, 70), seed=st.integers(0, 2**32 - 1),
       shuffle=st.booleans())
def test_batches_partition_records(n, size, seed, shuffle):
    if size == 0:
        with pytest.raises(BadBatchSize):
            batch_indices(n, size)
        return
    batches = batch_indices(n, size, shuffle=shuffle, seed=seed)
    flat = np.concatenate(batches)
    assert sorted(flat.tolist()) == list(range(n))
    if size > 0:
        assert all(len(b) <= size for b in batches)
    again = batch_indices(n, size, shuffle=shuffle, seed=seed)
    assert all(np.array_equal(x, y) for x, y in zip(batches, again))


def test_batch_shuffle_depends_on_seed():
    a = batch_indices(100, 10, shuffle=True, seed=(1, 1))
    b = batch_indices(100, 10, shuffle=True, seed=(1, 2))
    assert not np.array_equal(np.concatenate(a), np.concatenate(b))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_random_datasets_validate(seed):
    rng = np.random.default_rng(seed)
    ds = random_dataset(rng, N=int(rng.integers(1, 30)), categories=int(rng.integers(1, 3)))
    assert ds.validate() == []
    assert ds.availability[ds.session_index, ds.item_index].all()
