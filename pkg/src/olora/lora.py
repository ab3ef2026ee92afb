"""Per-task low-rank adapters, the subspace orthogonality penalty, and merging.

An adapter ``(A, B)`` with ``A: d x r`` and ``B: r x k`` updates a base weight
``W: d x k`` by ``A @ B``.  The columns of ``A`` span the output subspace used
by that task; the penalty ``||A_i^T A_t||_F^2`` pushes the current task's span
away from every past task's span.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor, add, frobenius_sq, matmul, transpose

# Effective alpha / r.  The update is used unscaled.
LORA_SCALE = 1.0
INIT_STD = 0.02


class RankError(ValueError):
    pass


class AdapterStateError(RuntimeError):
    pass


@dataclass
class LoraAdapter:
    A: Tensor
    B: Tensor
    task_id: int
    frozen: bool = False

    def __post_init__(self):
        d, r = self.A.shape
        r2, k = self.B.shape
        if r != r2:
            raise ShapeError(f"adapter inner dims disagree: A {self.A.shape}, B {self.B.shape}")
        if r < 1 or r > min(d, k):
            raise RankError(f"rank {r} must be in [1, min(d, k) = {min(d, k)}]")
        self._sync_flags()

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    @property
    def dims(self) -> tuple[int, int]:
        return self.A.shape[0], self.B.shape[1]

    def freeze(self) -> None:
        self.frozen = True
        self._sync_flags()

    def _sync_flags(self) -> None:
        for t in (self.A, self.B):
            t.requires_grad = not self.frozen
            if self.frozen:
                t.grad = None

    def delta(self) -> np.ndarray:
        """Dense ``A @ B`` as a plain array."""
        return self.A.data @ self.B.data


def init_adapter(d: int, k: int, r: int, task_id: int, seed: int,
                 dtype=np.float32) -> LoraAdapter:
    """Fresh trainable adapter: ``A ~ N(0, 0.02^2)``, ``B = 0``."""
    if r < 1 or r > min(d, k):
        raise RankError(f"rank {r} must be in [1, min(d, k) = {min(d, k)}]")
    rng = np.random.default_rng(seed)
    A = rng.normal(0.0, INIT_STD, size=(d, r)).astype(dtype)
    B = np.zeros((r, k), dtype=dtype)
    return LoraAdapter(Tensor(A, dtype=dtype), Tensor(B, dtype=dtype), task_id=task_id)


@dataclass
class AdapterStack:
    """Adapters for one injection point, ordered by task id."""

    d: int
    k: int
    adapters: list[LoraAdapter] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.adapters)

    def __iter__(self):
        return iter(self.adapters)

    def append(self, adapter: LoraAdapter) -> None:
        if adapter.dims != (self.d, self.k):
            raise ShapeError(f"adapter dims {adapter.dims} do not match stack ({self.d}, {self.k})")
        if self.adapters and adapter.task_id <= self.adapters[-1].task_id:
            raise AdapterStateError(
                f"task ids must increase: {adapter.task_id} after {self.adapters[-1].task_id}")
        if not adapter.frozen and self.trainable():
            raise AdapterStateError("stack already has a non-frozen adapter")
        self.adapters.append(adapter)

    def trainable(self) -> list[LoraAdapter]:
        return [a for a in self.adapters if not a.frozen]

    def frozen(self) -> list[LoraAdapter]:
        return [a for a in self.adapters if a.frozen]

    def current(self) -> LoraAdapter:
        live = self.trainable()
        if len(live) != 1:
            raise AdapterStateError(f"expected exactly one non-frozen adapter, found {len(live)}")
        return live[0]

    def freeze_all(self) -> None:
        for a in self.adapters:
            a.freeze()

    def clear(self) -> None:
        self.adapters.clear()


def stack_forward(stack: AdapterStack, base_W: Tensor, x: Tensor) -> Tensor:
    """``W x + sum_i A_i (B_i x)`` for column-stacked inputs ``x: k x m``."""
    if base_W.shape != (stack.d, stack.k):
        raise ShapeError(f"base weight {base_W.shape} does not match stack ({stack.d}, {stack.k})")
    if len(stack.trainable()) > 1:
        raise AdapterStateError("more than one non-frozen adapter in stack")
    h = matmul(base_W, x)
    for ad in stack.adapters:
        h = add(h, matmul(ad.A, matmul(ad.B, x)))
    return h


def stack_forward_rows(stack: AdapterStack, base_W: Tensor, x: Tensor) -> Tensor:
    """Row-major variant: ``x: m x k`` -> ``m x d``; same numbers as :func:`stack_forward`."""
    if base_W.shape != (stack.d, stack.k):
        raise ShapeError(f"base weight {base_W.shape} does not match stack ({stack.d}, {stack.k})")
    if x.shape[-1] != stack.k:
        raise ShapeError(f"input {x.shape} does not match stack input dim {stack.k}")
    h = matmul(x, transpose(base_W))
    for ad in stack.adapters:
        h = add(h, matmul(matmul(x, transpose(ad.B)), transpose(ad.A)))
    return h


def orth_penalty(A_i: Tensor, A_t: Tensor) -> Tensor:
    """Squared Frobenius norm of the Gram block ``A_i^T A_t``."""
    if A_i.data.ndim != 2 or A_t.data.ndim != 2 or A_i.shape[0] != A_t.shape[0]:
        raise ShapeError(f"orth_penalty needs matching row counts, got {A_i.shape} and {A_t.shape}")
    return frobenius_sq(matmul(transpose(A_i), A_t))


def total_orth_loss(stack: AdapterStack) -> Tensor:
    """Sum of :func:`orth_penalty` between the live adapter and every frozen one."""
    current = stack.current()
    total = Tensor(np.zeros((), dtype=current.A.dtype), dtype=current.A.dtype)
    for past in stack.frozen():
        total = add(total, orth_penalty(past.A, current.A))
    return total


def merge_into_base(stack: AdapterStack, base_W: Tensor) -> Tensor:
    """Fold every adapter into a dense copy of ``base_W``."""
    if stack.trainable():
        raise AdapterStateError("cannot merge while an adapter is still trainable")
    if base_W.shape != (stack.d, stack.k):
        raise ShapeError(f"base weight {base_W.shape} does not match stack ({stack.d}, {stack.k})")
    W = base_W.data.copy()
    for ad in stack.adapters:
        W = W + LORA_SCALE * ad.delta()
    return Tensor(W.astype(base_W.dtype), dtype=base_W.dtype)
