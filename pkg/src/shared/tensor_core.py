"""
Dense float64 tensors with define-by-run reverse-mode differentiation.

Every differentiable operation is a method of `Tape`: it computes the forward
value with NumPy and appends a record holding the operands, the output and a
local backward rule. `Tape.backward(loss)` walks the records in reverse and
accumulates gradients. A backward rule may return `None` for an operand,
meaning "contributes nothing" -- this is how `stop_gradient` works: it is the
identity going forward and an exact zero going backward.

Example:

    tape = Tape()
    w = tape.watch(Tensor(np.ones((3, 2))))
    out = tape.matmul(x, w)
    loss = tape.sum(out)
    grads = tape.backward(loss)
    grads[w]  # d loss / d w
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from shared.errors import GraphError, NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

BackwardRule = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tensor:
    """An immutable dense array of doubles. Shape and values never change."""

    __slots__ = ("_data", "name")

    def __init__(self, data: object, name: Optional[str] = None) -> None:
        array = np.array(data, dtype=np.float64)
        array.setflags(write=False)
        self._data = array
        self.name = name

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self._data.shape)

    @property
    def size(self) -> int:
        return int(self._data.size)

    def item(self) -> float:
        if self._data.size != 1:
            raise ShapeError(
                f"item() needs a single value, tensor has shape {self.shape}"
            )
        return float(self._data.reshape(()))

    def numpy(self) -> np.ndarray:
        """A writable copy of the values."""
        return self._data.copy()

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"


@dataclass(frozen=True)
class _Record:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: BackwardRule


class Gradients:
    """Gradients produced by one backward pass, looked up by tensor."""

    def __init__(self, grads: Dict[int, np.ndarray], tracked: Dict[int, Tensor]):
        self._grads = grads
        self._tracked = tracked

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        key = id(tensor)
        if key not in self._tracked:
            raise KeyError(f"{tensor!r} is not tracked on this tape")
        grad = self._grads.get(key)
        if grad is None:
            # Unreachable from the loss.
            return np.zeros(tensor.shape)
        return grad

    def __contains__(self, tensor: object) -> bool:
        return isinstance(tensor, Tensor) and id(tensor) in self._tracked

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self._tracked.values())


class Tape:
    """
    Ordered record of operations for one forward pass.

    A tape is built by one thread and used for one backward pass; build a
    new one per forward pass.
    """

    def __init__(self, check_finite: bool = False) -> None:
        self.check_finite = check_finite
        self._records: List[_Record] = []
        # Keeps every tracked tensor alive so ids stay unique for the tape's life.
        self._tracked: Dict[int, Tensor] = {}

    def __len__(self) -> int:
        return len(self._records)

    @property
    def ops(self) -> List[str]:
        return [record.op for record in self._records]

    def watch(self, tensor: Tensor) -> Tensor:
        """Tracks a leaf (parameter or input) so its gradient is reported."""
        self._tracked[id(tensor)] = tensor
        return tensor

    def is_tracked(self, tensor: Tensor) -> bool:
        return id(tensor) in self._tracked

    def _record(
        self,
        op: str,
        inputs: Sequence[Tensor],
        value: np.ndarray,
        backward: BackwardRule,
    ) -> Tensor:
        if self.check_finite and not np.all(np.isfinite(value)):
            raise NonFiniteError(f"Non-finite value produced by {op}")
        out = Tensor(value)
        for tensor in inputs:
            self._tracked.setdefault(id(tensor), tensor)
        self._tracked[id(out)] = out
        self._records.append(_Record(op, tuple(inputs), out, backward))
        return out

    # --- operations -------------------------------------------------------

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        if len(a.shape) != 2 or len(b.shape) != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
        a_data, b_data = a.data, b.data

        def backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
            return g @ b_data.T, a_data.T @ g

        return self._record("matmul", (a, b), a_data @ b_data, backward)

    def add_bias(self, x: Tensor, b: Tensor) -> Tensor:
        if len(x.shape) != 2 or b.shape != (x.shape[1],):
            raise ShapeError(f"add_bias: bias {b.shape} does not fit input {x.shape}")

        def backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
            return g, g.sum(axis=0)

        return self._record("add_bias", (x, b), x.data + b.data, backward)

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")

        def backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
            return g, g

        return self._record("add", (a, b), a.data + b.data, backward)

    def relu(self, x: Tensor) -> Tensor:
        # Subgradient at exactly 0 is 0.
        mask = x.data > 0

        def backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
            return (g * mask,)

        return self._record("relu", (x,), np.where(mask, x.data, 0.0), backward)

    def split(self, f: Tensor, parts: int) -> List[Tensor]:
        """Cuts the columns of f into `parts` equal contiguous blocks."""
        if len(f.shape) != 2:
            raise ShapeError(f"split: expected a matrix, got shape {f.shape}")
        if parts < 1 or f.shape[1] % parts != 0:
            raise ShapeError(
                f"split: width {f.shape[1]} is not divisible into {parts} equal parts"
            )
        width = f.shape[1] // parts
        segments = []
        for k in range(parts):
            lo, hi = k * width, (k + 1) * width

            def backward(
                g: np.ndarray, lo: int = lo, hi: int = hi
            ) -> Tuple[Optional[np.ndarray], ...]:
                full = np.zeros(f.shape)
                full[:, lo:hi] = g
                return (full,)

            segments.append(
                self._record("split", (f,), f.data[:, lo:hi].copy(), backward)
            )
        return segments

    def concat(self, parts: Sequence[Tensor]) -> Tensor:
        if not parts:
            raise ShapeError("concat: nothing to concatenate")
        rows = parts[0].shape[0]
        if any(len(p.shape) != 2 or p.shape[0] != rows for p in parts):
            raise ShapeError(
                f"concat: row counts differ: {[p.shape for p in parts]}"
            )
        bounds = np.cumsum([0] + [p.shape[1] for p in parts])

        def backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
            return tuple(
                g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts))
            )

        value = np.concatenate([p.data for p in parts], axis=1)
        return self._record("concat", tuple(parts), value, backward)

    def stop_gradient(self, x: Tensor) -> Tensor:
        """Identity forward; contributes exactly nothing to x's gradient."""

        def backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
            return (None,)

        return self._record("stop_gradient", (x,), x.data.copy(), backward)

    def sum(self, x: Tensor) -> Tensor:
        def backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
            return (np.full(x.shape, float(g)),)

        return self._record("sum", (x,), np.array(x.data.sum()), backward)

    def weighted_sum(self, terms: Sequence[Tensor], weights: Sequence[float]) -> Tensor:
        """sum_i weights[i] * terms[i] over scalar tensors."""
        if len(terms) != len(weights):
            raise ShapeError(
                f"weighted_sum: {len(terms)} terms but {len(weights)} weights"
            )
        if any(t.size != 1 for t in terms):
            raise ShapeError("weighted_sum: every term must be a scalar")
        total = 0.0
        for term, weight in zip(terms, weights):
            total = total + weight * term.item()

        def backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
            return tuple(np.array(weight * float(g)) for weight in weights)

        return self._record("weighted_sum", tuple(terms), np.array(total), backward)

    def softmax_cross_entropy(self, logits: Tensor, targets: np.ndarray) -> Tensor:
        """Mean negative log-likelihood of integer targets under softmax(logits)."""
        if len(logits.shape) != 2:
            raise ShapeError(f"softmax_cross_entropy: logits shape {logits.shape}")
        m, classes = logits.shape
        labels = np.asarray(targets, dtype=np.int64)
        if m < 1 or labels.shape != (m,):
            raise ShapeError(
                f"softmax_cross_entropy: {labels.shape} targets for {m} rows"
            )
        if labels.min() < 0 or labels.max() >= classes:
            raise ShapeError(
                f"softmax_cross_entropy: target out of range 0..{classes - 1}"
            )
        shifted = logits.data - logits.data.max(axis=1, keepdims=True)
        log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        log_probs = shifted - log_norm
        rows = np.arange(m)
        loss = -log_probs[rows, labels].mean()

        def backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
            grad = np.exp(log_probs)
            grad[rows, labels] -= 1.0
            return (grad * (float(g) / m),)

        return self._record(
            "softmax_cross_entropy", (logits,), np.array(loss), backward
        )

    # --- differentiation --------------------------------------------------

    def backward(self, loss: Tensor) -> Gradients:
        """Reverse accumulation from a scalar loss recorded on this tape."""
        if loss.size != 1:
            raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
        if not any(record.output is loss for record in self._records):
            raise GraphError("backward: loss was not produced on this tape")

        grads: Dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
        for record in reversed(self._records):
            upstream = grads.get(id(record.output))
            if upstream is None:
                continue
            for tensor, local in zip(record.inputs, record.backward(upstream)):
                if local is None:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + local
                else:
                    grads[key] = np.array(local, dtype=np.float64).reshape(tensor.shape)
        return Gradients(grads, dict(self._tracked))


def backward(tape: Tape, loss: Tensor) -> Gradients:
    return tape.backward(loss)
