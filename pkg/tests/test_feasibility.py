import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradinv.feasibility import check_cnn, check_cnn_no_dense, check_mlp_batch, check_multilayer_cnn
from gradinv.models import CnnConfig


def _brute_min_n1(d, n2, B, limit=5000):
    # smallest n1 whose equation count covers the unknowns, by search
    for n1 in range(1, limit):
        if n2 + n1 * n2 + n1 + n1 * d >= B * n2 + n1 * B + B * d:
            return n1
    return None


def test_mlp_examples():
    r = check_mlp_batch(784, 5, 10, 4)
    assert r.min_n1_exact == 5 and r.min_n1_approx == 4
    assert r.feasible
    assert not check_mlp_batch(784, 4, 10, 4).feasible
    # the approximate bound is B; exact counting asks for a few more units
    big = check_mlp_batch(3072, 100, 100, 100)
    assert big.min_n1_approx == 100 and big.min_n1_exact == 104
    assert not big.feasible and check_mlp_batch(3072, 104, 100, 100).feasible
    for d, n2 in ((5, 2), (100, 10), (3072, 100)):
        assert check_mlp_batch(d, 1, n2, 1).min_n1_approx == 1


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 400), st.integers(1, 30), st.integers(1, 40))
def test_mlp_bound_matches_brute_force(d, n2, B):
    if n2 + 1 + d - B <= 0:
        return
    r = check_mlp_batch(d, 1, n2, B)
    assert r.min_n1_exact == _brute_min_n1(d, n2, B)
    assert r.min_n1_exact >= r.min_n1_approx - 1


def test_mlp_counts():
    r = check_mlp_batch(10, 3, 2, 2)
    assert r.equations == 2 + 6 + 3 + 30
    assert r.unknowns == 4 + 6 + 20


def test_nonpositive_denominator_is_infeasible_with_note():
    r = check_mlp_batch(3, 100, 2, 10)
    assert not r.feasible and r.min_n1_exact is None
    assert any("no hidden width" in n for n in r.notes)


def test_exact_bound_tends_to_batch_size():
    gaps = []
    for d in (10**3, 10**4, 10**5):
        n2, B = 10, 8
        gaps.append((B * n2 + B * d - n2) / (n2 + 1 + d - B) - B)
        assert check_mlp_batch(d, 1, n2, B).min_n1_exact == B + 1
    assert gaps[0] > gaps[1] > gaps[2] > 0 and gaps[2] < 1e-3


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 300), st.integers(1, 20), st.integers(1, 20), st.integers(1, 60))
def test_monotone_in_width(d, n2, B, n1):
    if check_mlp_batch(d, n1, n2, B).feasible:
        assert check_mlp_batch(d, n1 + 1, n2, B).feasible


def test_cnn_examples():
    cfg = CnnConfig(3, 32, 5, 2, 2, 12, 100, 10)
    r = check_cnn(cfg, 1)
    assert r.min_kernels == 12 and r.feasible
    assert not check_cnn(CnnConfig(3, 32, 5, 2, 2, 11, 100, 10), 1).feasible
    assert check_cnn(CnnConfig(4, 7, 1, 0, 1, 4, 3, 2), 1).min_kernels == 4
    assert check_cnn(CnnConfig(1, 28, 3, 1, 2, 4, 10, 10), 1).min_kernels == 4


@pytest.mark.parametrize("h", range(1, 20))
def test_cnn_monotone_in_kernels(h):
    a = check_cnn(CnnConfig(3, 16, 3, 1, 2, h, 20, 10), 1)
    b = check_cnn(CnnConfig(3, 16, 3, 1, 2, h + 1, 20, 10), 1)
    assert not a.feasible or b.feasible


def test_no_dense_examples():
    # h * d'^2 = 2 with 10 outputs and B = 2: n0 bound 10/8
    cfg = CnnConfig(1, 1, 1, 0, 1, 2, 0, 10)
    r = check_cnn_no_dense(cfg, 2, 10)
    assert r.feasible
    one = check_cnn_no_dense(cfg, 1, 10)
    assert not one.feasible and any("exceed 1" in n for n in one.notes)
    wide = check_cnn_no_dense(cfg, 10, 10)
    assert not wide.feasible and "B must be below output width" in wide.notes
    assert check_cnn_no_dense(CnnConfig(3, 32, 5, 2, 2, 48, 0, 10), 4).min_kernels == 48


def test_multilayer_examples():
    cfg = CnnConfig(3, 32, 5, 2, 2, 12, 100, 10)
    single = check_multilayer_cnn([(5, 2, 2, 12)], 3, 32, 1, dense_units=100, classes=10)
    ref = check_cnn(cfg, 1)
    assert single.feasible == ref.feasible and single.per_layer_min_kernels == [12]
    ident = check_multilayer_cnn([(1, 0, 1, 3), (1, 0, 1, 3)], 3, 8, 1)
    assert ident.feasible
    # layer 1 keeps size (3x8x8 -> 3x8x8); layer 2 halves width with too few kernels
    two = check_multilayer_cnn([(1, 0, 1, 3), (3, 1, 2, 6)], 3, 8, 1)
    assert not two.feasible
    assert [s.ok for s in two.stages] == [True, False]
    assert any(n.startswith("layer 2") for n in two.notes)
    assert not any(n.startswith("layer 1") for n in two.notes)


def test_report_lines_are_key_value():
    lines = check_cnn(CnnConfig(3, 32, 5, 2, 2, 12, 100, 10), 1).lines()
    assert "min_kernels = 12" in lines
    assert lines[0] == "feasible = True"
