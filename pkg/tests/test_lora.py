import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from olora import tensor as tc
from olora.lora import (AdapterStack, AdapterStateError, LoraAdapter, RankError, init_adapter,
                        merge_into_base, orth_penalty, stack_forward, stack_forward_rows, total_orth_loss)
from olora.tensor import ShapeError, Tensor

from oracles import brute_orth, central_difference, dense_stack_forward, relative_error

F64 = np.float64


def frozen_adapter(A, B, task_id):
    return LoraAdapter(Tensor(A, dtype=F64), Tensor(B, dtype=F64), task_id, frozen=True)


def random_stack(rng, d=3, k=3, n=2, r=2, live_last=False):
    stack = AdapterStack(d, k)
    for t in range(n):
        ad = LoraAdapter(Tensor(rng.normal(size=(d, r)), dtype=F64),
                         Tensor(rng.normal(size=(r, k)), dtype=F64), t,
                         frozen=not (live_last and t == n - 1))
        stack.append(ad)
    return stack


# --- init ---------------------------------------------------------------------

def test_init_b_is_zero():
    assert not init_adapter(4, 4, 2, 0, seed=5).B.data.any()


def test_init_same_seed_bitwise_identical():
    a, b = init_adapter(8, 6, 3, 0, seed=11), init_adapter(8, 6, 3, 0, seed=11)
    assert a.A.data.tobytes() == b.A.data.tobytes()


def test_init_delta_is_zero_for_any_input():
    ad = init_adapter(5, 4, 2, 0, seed=1)
    x = np.random.default_rng(0).normal(size=(4, 7))
    assert not (ad.A.data @ (ad.B.data @ x)).any()


def test_init_a_std_is_small():
    ad = init_adapter(64, 64, 16, 0, seed=2)
    assert abs(ad.A.data.std() - 0.02) < 0.002


def test_rank_above_min_dim_rejected():
    with pytest.raises(RankError):
        init_adapter(4, 3, 4, 0, seed=0)


def test_frozen_adapter_has_no_grad_flags():
    ad = init_adapter(4, 4, 2, 0, seed=0)
    assert ad.A.requires_grad and ad.B.requires_grad
    ad.freeze()
    assert not ad.A.requires_grad and not ad.B.requires_grad


# --- stacks -------------------------------------------------------------------

def test_stack_rejects_decreasing_task_ids():
    stack = AdapterStack(3, 3)
    stack.append(frozen_adapter(np.ones((3, 1)), np.ones((1, 3)), 2))
    with pytest.raises(AdapterStateError):
        stack.append(frozen_adapter(np.ones((3, 1)), np.ones((1, 3)), 1))


def test_stack_rejects_mismatched_dims():
    stack = AdapterStack(3, 3)
    with pytest.raises(ShapeError):
        stack.append(frozen_adapter(np.ones((4, 1)), np.ones((1, 3)), 0))


def test_stack_allows_different_ranks():
    stack = AdapterStack(4, 4)
    stack.append(frozen_adapter(np.ones((4, 1)), np.ones((1, 4)), 0))
    stack.append(frozen_adapter(np.ones((4, 3)), np.ones((3, 4)), 1))
    assert [a.rank for a in stack] == [1, 3]


def test_stack_allows_only_one_live_adapter():
    stack = AdapterStack(4, 4)
    stack.append(init_adapter(4, 4, 2, 0, seed=0))
    with pytest.raises(AdapterStateError):
        stack.append(init_adapter(4, 4, 2, 1, seed=0))


def test_empty_stack_forward_is_base_exactly():
    rng = np.random.default_rng(0)
    W, x = rng.normal(size=(3, 4)), rng.normal(size=(4, 5))
    out = stack_forward(AdapterStack(3, 4), Tensor(W, dtype=F64), Tensor(x, dtype=F64))
    assert out.data.tobytes() == (W @ x).tobytes()


def test_zero_b_adapter_forward_is_base_exactly():
    rng = np.random.default_rng(1)
    W, x = rng.normal(size=(4, 4)).astype(np.float32), rng.normal(size=(4, 3)).astype(np.float32)
    stack = AdapterStack(4, 4, [init_adapter(4, 4, 2, 0, seed=3)])
    out = stack_forward(stack, Tensor(W), Tensor(x))
    np.testing.assert_array_equal(out.data, W @ x)


def test_two_adapter_stack_matches_dense_oracle():
    rng = np.random.default_rng(2)
    for _ in range(10):
        stack = random_stack(rng)
        W, x = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
        out = stack_forward(stack, Tensor(W, dtype=F64), Tensor(x, dtype=F64))
        expect = dense_stack_forward(W, [(a.A.data, a.B.data) for a in stack], x)
        np.testing.assert_allclose(out.data, expect, atol=1e-5)


def test_row_forward_matches_column_forward():
    rng = np.random.default_rng(3)
    stack = random_stack(rng, d=5, k=4, n=3)
    W, x = rng.normal(size=(5, 4)), rng.normal(size=(4, 6))
    col = stack_forward(stack, Tensor(W, dtype=F64), Tensor(x, dtype=F64)).data
    row = stack_forward_rows(stack, Tensor(W, dtype=F64), Tensor(x.T, dtype=F64)).data
    np.testing.assert_allclose(row.T, col, atol=1e-12)


def test_stack_forward_shape_error():
    with pytest.raises(ShapeError):
        stack_forward(AdapterStack(3, 3), Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 1))))


# --- orthogonality penalty ----------------------------------------------------

def test_orth_orthogonal_columns_zero():
    assert orth_penalty(Tensor([[1.0], [0.0]]), Tensor([[0.0], [1.0]])).item() == 0.0


def test_orth_unit_self_overlap_one():
    a = Tensor([[1.0], [0.0]])
    assert orth_penalty(a, a).item() == 1.0


def test_orth_identity_against_ones_is_two():
    assert orth_penalty(Tensor(np.eye(2)), Tensor([[1.0], [1.0]])).item() == 2.0


def test_orth_mismatched_rows_shape_error():
    with pytest.raises(ShapeError):
        orth_penalty(Tensor(np.ones((3, 1))), Tensor(np.ones((4, 1))))


mats = st.integers(0, 2**31 - 1).map(lambda s: np.random.default_rng(s))


@settings(max_examples=40, deadline=None)
@given(mats, st.integers(2, 6), st.integers(1, 3), st.integers(1, 3))
def test_orth_symmetric_and_permutation_invariant(rng, d, r1, r2):
    X, Y = rng.normal(size=(d, r1)), rng.normal(size=(d, r2))
    pxy = orth_penalty(Tensor(X, dtype=F64), Tensor(Y, dtype=F64)).item()
    pyx = orth_penalty(Tensor(Y, dtype=F64), Tensor(X, dtype=F64)).item()
    assert abs(pxy - pyx) <= 1e-7 * max(1.0, pxy)
    perm = orth_penalty(Tensor(X[:, rng.permutation(r1)], dtype=F64),
                        Tensor(Y[:, rng.permutation(r2)], dtype=F64)).item()
    assert abs(pxy - perm) <= 1e-7 * max(1.0, pxy)
    assert abs(pxy - brute_orth(X, Y)) <= 1e-9 * max(1.0, pxy)


@settings(max_examples=40, deadline=None)
@given(mats, st.integers(3, 6))
def test_orth_zero_iff_columns_orthogonal(rng, d):
    Q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    k = d // 2
    assert orth_penalty(Tensor(Q[:, :k], dtype=F64), Tensor(Q[:, k:], dtype=F64)).item() < 1e-6
    Y = Q[:, k:].copy()
    Y[:, 0] += 0.1 * Q[:, 0]
    assert orth_penalty(Tensor(Q[:, :k], dtype=F64), Tensor(Y, dtype=F64)).item() > 1e-6


def test_total_orth_first_task_is_zero():
    stack = AdapterStack(4, 4, [init_adapter(4, 4, 2, 0, seed=0)])
    assert total_orth_loss(stack).item() == 0.0


def test_total_orth_requires_exactly_one_live_adapter():
    rng = np.random.default_rng(4)
    with pytest.raises(AdapterStateError):
        total_orth_loss(random_stack(rng, n=2))


def test_total_orth_is_additive_and_matches_brute_force():
    rng = np.random.default_rng(5)
    for _ in range(10):
        stack = random_stack(rng, d=6, k=4, n=3, r=2, live_last=True)
        A_t = stack.current().A.data
        expect = sum(brute_orth(a.A.data, A_t) for a in stack.frozen())
        assert abs(total_orth_loss(stack).item() - expect) <= 1e-6 * max(1.0, expect)


def test_total_orth_gradient_only_reaches_live_adapter():
    rng = np.random.default_rng(6)
    for _ in range(20):
        stack = random_stack(rng, d=5, k=3, n=3, r=2, live_last=True)
        tc.backward(total_orth_loss(stack))
        A_t = stack.current().A
        frozen = [a.A.data for a in stack.frozen()]

        def f(m):
            return sum(brute_orth(a, m) for a in frozen)

        num = central_difference(f, A_t.data.copy())
        assert relative_error(A_t.grad, num) < 1e-3
        assert all(a.A.grad is None and a.B.grad is None for a in stack.frozen())
        assert stack.current().B.grad is None


# --- merge --------------------------------------------------------------------

def test_merge_hand_example():
    stack = AdapterStack(2, 2, [frozen_adapter([[1.0], [0.0]], [[0.0, 2.0]], 0)])
    out = merge_into_base(stack, Tensor(np.eye(2), dtype=F64))
    np.testing.assert_array_equal(out.data, [[1.0, 2.0], [0.0, 1.0]])


def test_merge_zero_b_leaves_base_unchanged():
    ad = init_adapter(3, 3, 2, 0, seed=0)
    ad.freeze()
    W = np.random.default_rng(0).normal(size=(3, 3)).astype(np.float32)
    np.testing.assert_array_equal(merge_into_base(AdapterStack(3, 3, [ad]), Tensor(W)).data, W)


def test_merge_rejects_live_adapter():
    stack = AdapterStack(3, 3, [init_adapter(3, 3, 2, 0, seed=0)])
    with pytest.raises(AdapterStateError):
        merge_into_base(stack, Tensor(np.eye(3)))


def test_merge_then_forward_equals_stack_forward():
    rng = np.random.default_rng(7)
    stack = random_stack(rng, d=6, k=5, n=3, r=2)
    W = rng.normal(size=(6, 5))
    merged = merge_into_base(stack, Tensor(W, dtype=F64))
    for _ in range(50):
        x = Tensor(rng.normal(size=(5, 2)), dtype=F64)
        np.testing.assert_allclose(tc.matmul(merged, x).data,
                                   stack_forward(stack, Tensor(W, dtype=F64), x).data, atol=1e-5)
