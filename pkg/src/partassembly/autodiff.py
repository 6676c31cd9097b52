"""Reverse-mode differentiation surface used by the assembly model.

Tensors and the tape are torch's; this module fixes the op set, its shape
rules (no broadcasting beyond leading-batch expansion) and the non-finite
guard, and provides a finite-difference gradient checker that is independent
of the tape.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable

import torch

NORM_EPS = 1e-12


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def tensor(data, requires_grad: bool = False, dtype=torch.float64) -> torch.Tensor:
    return torch.tensor(data, dtype=dtype, requires_grad=requires_grad)


def _check_finite(name: str, out: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(out).all():
        raise NonFiniteError(f"{name} produced non-finite values")
    return out


def _same_or_batch(name, a: torch.Tensor, b: torch.Tensor):
    """Allow equal shapes, or ``b`` matching the trailing dims of ``a``."""
    if a.shape == b.shape:
        return
    if b.dim() < a.dim() and a.shape[a.dim() - b.dim():] == b.shape:
        return
    raise ShapeError(f"{name}: incompatible shapes {tuple(a.shape)} and {tuple(b.shape)}")


# -- discrete choices ---------------------------------------------------------------

@dataclass
class ChoiceTape:
    """Log of the discrete choices made by a forward pass, for replay.

    The loss is smooth only between nearest-neighbour, assignment and
    best-branch switches, ReLU kinks and max-pool winners. Replaying the
    choices of a reference pass lets a finite-difference probe stay on the
    same smooth piece as backprop.
    """

    log: list = field(default_factory=list)
    replaying: bool = False
    pos: int = 0
    depth: int = 0

    def rewind(self):
        self.replaying, self.pos = True, 0


_TAPE: ChoiceTape | None = None


@contextmanager
def choice_tape(tape: ChoiceTape):
    global _TAPE
    prev, _TAPE = _TAPE, tape
    try:
        yield tape
    finally:
        _TAPE = prev


def _choose(fn):
    tape = _TAPE
    if tape is None or tape.depth:
        return fn()
    if tape.replaying:
        if tape.pos >= len(tape.log):
            raise RuntimeError("choice replay ran past the recorded pass")
        value = tape.log[tape.pos]
        tape.pos += 1
        return value
    tape.depth += 1
    try:
        value = fn()
    finally:
        tape.depth -= 1
    tape.log.append(value)
    return value


def matmul(a, b):
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {tuple(a.shape)} and {tuple(b.shape)}")
    if b.dim() > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ {tuple(a.shape)} and {tuple(b.shape)}")
    return a @ b


def add(a, b):
    _same_or_batch("add", a, b)
    return a + b


def mul(a, b):
    _same_or_batch("mul", a, b)
    return a * b


def concat(tensors, axis=-1):
    ref = tensors[0]
    ax = axis % ref.dim()
    for t in tensors[1:]:
        if t.dim() != ref.dim() or any(t.shape[d] != ref.shape[d] for d in range(ref.dim()) if d != ax):
            raise ShapeError(f"concat: incompatible shapes {[tuple(x.shape) for x in tensors]}")
    return torch.cat(list(tensors), dim=ax)


def relu(x):
    if _TAPE is None:
        return torch.relu(x)
    return x * _choose(lambda: (x > 0).detach()).to(x.dtype)


def tanh(x):
    return torch.tanh(x)


def softmax(x, axis=-1, mask=None):
    """Softmax with an optional additive mask (0 keeps, -inf removes).

    The mask may have size-1 dims that expand against ``x`` (heads, queries).
    Fully masked rows return zeros instead of NaN.
    """
    if mask is not None:
        if mask.dim() != x.dim() or any(m not in (1, s) for m, s in zip(mask.shape, x.shape)):
            raise ShapeError(f"softmax: mask {tuple(mask.shape)} does not expand to {tuple(x.shape)}")
        x = x + mask
    peak = x.max(dim=axis, keepdim=True).values
    peak = torch.where(torch.isfinite(peak), peak, torch.zeros_like(peak)).detach()
    e = torch.exp(x - peak)
    total = e.sum(dim=axis, keepdim=True)
    return e / torch.where(total > 0, total, torch.ones_like(total))


def layer_norm(x, weight=None, bias=None, eps=1e-5):
    d = x.shape[-1]
    if weight is not None and weight.shape != (d,):
        raise ShapeError(f"layer_norm: weight {tuple(weight.shape)} for width {d}")
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    y = (x - mu) / torch.sqrt(var + eps)
    if weight is not None:
        y = y * weight
    if bias is not None:
        y = y + bias
    return y


def reduce_max(x, axis=-1):
    if _TAPE is None:
        return x.max(dim=axis).values
    winner = _choose(lambda: x.detach().argmax(dim=axis, keepdim=True))
    return x.gather(axis, winner).squeeze(axis)


def reduce_mean(x, axis=-1):
    return x.mean(dim=axis)


def l2_normalize(x, axis=-1):
    return x / (torch.linalg.vector_norm(x, dim=axis, keepdim=True) + NORM_EPS)


def gather(x, index, axis=0):
    index = torch.as_tensor(index, dtype=torch.long)
    return torch.index_select(x, axis, index)


def slice_(x, start, stop, axis=-1):
    ax = axis % x.dim()
    if not 0 <= start <= stop <= x.shape[ax]:
        raise ShapeError(f"slice: [{start}:{stop}] out of range for axis of size {x.shape[ax]}")
    return x.narrow(ax, start, stop - start)


OPS: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "concat": concat,
    "relu": relu,
    "tanh": tanh,
    "softmax": softmax,
    "layer_norm": layer_norm,
    "reduce_max": reduce_max,
    "reduce_mean": reduce_mean,
    "l2_normalize": l2_normalize,
    "gather": gather,
    "slice": slice_,
}


def op_apply(name: str, inputs, **kwargs) -> torch.Tensor:
    """Run a named op; the tape records it when any input requires grad."""
    try:
        fn = OPS[name]
    except KeyError:
        raise ValueError(f"unknown op {name!r}") from None
    if name == "concat":
        out = fn(list(inputs), **kwargs)
    else:
        out = fn(*inputs, **kwargs)
    return _check_finite(name, out)


def backward(loss: torch.Tensor, leaves=None) -> dict:
    """Backpropagate a scalar loss; return ``{leaf: grad}`` for requires-grad leaves."""
    if loss.numel() != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if leaves is None:
        leaves = _find_leaves(loss)
    leaves = list(leaves)
    grads = torch.autograd.grad(loss.reshape(()), leaves, allow_unused=True)
    return {leaf: (g if g is not None else torch.zeros_like(leaf)) for leaf, g in zip(leaves, grads)}


def _find_leaves(root: torch.Tensor) -> list:
    found, seen, stack = [], set(), [root.grad_fn]
    while stack:
        fn = stack.pop()
        if fn is None or fn in seen:
            continue
        seen.add(fn)
        if hasattr(fn, "variable"):
            found.append(fn.variable)
        stack.extend(nxt for nxt, _ in fn.next_functions)
    return found


def relative_error(a, n) -> float:
    a = torch.as_tensor(a, dtype=torch.float64)
    n = torch.as_tensor(n, dtype=torch.float64)
    scale = torch.maximum(torch.ones_like(a), torch.maximum(a.abs(), n.abs()))
    return float(((a - n).abs() / scale).max()) if a.numel() else 0.0


def grad_check(f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, eps: float = 1e-4) -> float:
    """Worst relative error between tape gradient and central differences."""
    x = x.detach().to(torch.float64).clone().requires_grad_(True)
    analytic = backward(f(x), [x])[x].detach()
    numeric = torch.zeros_like(x)
    flat, nflat = x.detach().view(-1), numeric.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + eps
            hi = float(f(x.detach()))
            flat[i] = orig - eps
            lo = float(f(x.detach()))
            flat[i] = orig
            nflat[i] = (hi - lo) / (2 * eps)
    return relative_error(analytic, numeric)
