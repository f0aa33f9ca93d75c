import numpy as np
import pytest

from aqcompress.pager import flatten
from aqcompress.sharing import (
    group_multiset,
    group_pages,
    groups_per_tensor,
    infer_types,
    parse_group_file,
    parse_type_file,
    sharing_factor,
    sharing_matrix,
    type_sharing,
    usage_stats,
)
from aqcompress.tensor_io import TensorArchive


def _manifest(*sizes, D=4):
    archive = TensorArchive.from_arrays(
        (f"t{i}.{'bias' if i % 2 else 'weight'}", np.zeros(n, np.float32)) for i, n in enumerate(sizes)
    )
    return flatten(archive, D)[1]


def test_identity_is_one():
    a = np.array([3, 0, 1, 2])
    assert sharing_factor(a, a) == 1.0


def test_disjoint_is_zero():
    assert sharing_factor(np.array([2, 0, 0]), np.array([0, 1, 4])) == 0.0


def test_worked_multiset_example():
    # {0:2, 1:1} vs {0:1, 2:5}: intersection {0:1}, smaller size 3
    a = np.array([2, 1, 0])
    b = np.array([1, 0, 5])
    assert sharing_factor(a, b) == pytest.approx(1 / 3)


def test_subset_is_one_and_symmetric(rng):
    for _ in range(20):
        big = rng.integers(0, 6, 12)
        big[0] += 1
        small = np.minimum(big, rng.integers(0, 6, 12))
        small[0] = max(small[0], 1)
        assert sharing_factor(small, big) == 1.0
        other = rng.integers(0, 4, 12) + 1
        s = sharing_factor(big, other)
        assert s == sharing_factor(other, big) and 0.0 <= s <= 1.0


def test_empty_multiset_is_an_error():
    with pytest.raises(ValueError):
        sharing_factor(np.zeros(3, int), np.ones(3, int))


def test_group_pages_counts_straddling_pages():
    man = _manifest(6, 6)  # 12 scalars, D=4: page 1 holds scalars 4..7 from both tensors
    groups = groups_per_tensor(man)
    assert group_pages(groups["t0.weight"], man).tolist() == [0, 1]
    assert group_pages(groups["t1.bias"], man).tolist() == [1, 2]


def test_multiset_totals_are_pages_times_M(rng):
    man = _manifest(10, 7, 30)
    codes = rng.integers(0, 5, (man.page_count, 3))
    for name, ranges in groups_per_tensor(man).items():
        ms = group_multiset(codes, man, ranges, 5)
        assert ms.sum() == group_pages(ranges, man).size * 3


def test_sharing_matrix_has_unit_diagonal(rng):
    man = _manifest(16, 16, 16)
    codes = rng.integers(0, 4, (man.page_count, 2))
    names, S = sharing_matrix(codes, man, groups_per_tensor(man), 4)
    assert len(names) == 3
    assert np.all(np.diag(S) == 1.0)
    assert np.array_equal(S, S.T)


def test_usage_coverage():
    codes = np.array([[0], [0], [0], [1]])
    (u,) = usage_stats(codes, 4)
    assert u["sorted_counts"].tolist() == [3, 1, 0, 0]
    assert u["coverage"].tolist() == [0.75, 1.0, 1.0, 1.0]
    assert u["fraction"][0] == 0.25


def test_type_sharing_percentages():
    man = _manifest(8, 4, D=4)  # weight pages 0,1; bias page 2
    codes = np.array([[0], [1], [1]])
    out = type_sharing(codes, man, infer_types(man), 2)
    assert out["weight"][0].tolist() == [50.0, 50.0]
    assert out["bias"][0].tolist() == [0.0, 100.0]
    with pytest.raises(ValueError):
        type_sharing(codes, man, {"t0.weight": "weight"}, 2)


def test_group_file_parsing():
    groups = parse_group_file("name,start,stop\na,0,4\na,8,12\nb,4,8\n")
    assert groups == {"a": [(0, 4), (8, 12)], "b": [(4, 8)]}
    for bad in ("", "a,1\n", "a,x,3\n", "a,5,2\n"):
        with pytest.raises(ValueError):
            parse_group_file(bad)
    assert parse_type_file("w,weight\nb,bias\n") == {"w": "weight", "b": "bias"}
    with pytest.raises(ValueError):
        parse_type_file("w,gamma\n")


def test_group_range_outside_stream():
    man = _manifest(8)
    with pytest.raises(ValueError):
        group_pages([(0, 9)], man)
