"""Exact CTC likelihood via log-domain forward-backward, a brute-force
enumeration oracle, greedy decoding, and the log-posterior output head.

Token ids live in [1, V]; id 0 is the blank.  A grid is a (T, V+1) array of
per-frame log-posteriors (each row a log-softmax output).
"""
from __future__ import annotations

import itertools
import math
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import Tensor, add, log_softmax, matmul, record_op

BLANK = 0


class InfeasibleTargetError(ValueError):
    """Raised when no length-T alignment can collapse to the target."""


def collapse(alignment: Sequence[int]) -> tuple[int, ...]:
    """Merge adjacent repeats, then delete blanks."""
    out = []
    prev = None
    for sym in alignment:
        if sym != prev:
            out.append(int(sym))
        prev = sym
    return tuple(sym for sym in out if sym != BLANK)


def required_length(labels: Sequence[int]) -> int:
    """Minimum number of frames admitting an alignment that collapses to
    `labels`: one frame per token plus a separating blank per adjacent
    repeat."""
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def _as_grid(grid) -> np.ndarray:
    arr = grid.data if isinstance(grid, Tensor) else np.asarray(grid, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] < 2:
        raise ValueError(f"grid must be (T, V+1), got shape {arr.shape}")
    return arr


def _validate_labels(labels: Sequence[int], vocab: int) -> tuple[int, ...]:
    labels = tuple(int(t) for t in labels)
    if any(t < 1 or t > vocab for t in labels):
        raise ValueError(f"label ids must be in [1, {vocab}], got {labels}")
    return labels


def ctc_forward_backward(grid: np.ndarray,
                         labels: Sequence[int]) -> tuple[float, np.ndarray]:
    """Negative log-likelihood of `labels` under the grid, plus its gradient
    with respect to the grid entries.

    Runs the forward and backward recursions over the blank-interleaved
    extended label sequence in the log domain; the gradient comes from the
    per-frame state occupancies exp(alpha + beta - logP).
    """
    arr = _as_grid(grid).astype(np.float64, copy=False)
    steps, width = arr.shape
    labels = _validate_labels(labels, width - 1)
    if steps < required_length(labels):
        raise InfeasibleTargetError(
            f"target needs at least {required_length(labels)} frames, got {steps}")

    ext = np.zeros(2 * len(labels) + 1, dtype=np.intp)
    ext[1::2] = labels
    states = ext.size
    emit = arr[:, ext]  # (T, S) emission log-probs per lattice state

    # skip transition s-2 -> s exists when state s is a label differing from
    # the label two states back
    can_skip = np.zeros(states, dtype=bool)
    if states > 2:
        can_skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])

    neg_inf = -np.inf
    alpha = np.full((steps, states), neg_inf)
    alpha[0, 0] = emit[0, 0]
    if states > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, steps):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        if states > 2:
            acc[2:] = np.where(can_skip[2:],
                               np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + emit[t]

    log_p = alpha[-1, -1]
    if states > 1:
        log_p = np.logaddexp(log_p, alpha[-1, -2])
    if not np.isfinite(log_p):
        raise InfeasibleTargetError("no feasible alignment (zero likelihood)")

    beta = np.full((steps, states), neg_inf)
    beta[-1, -1] = 0.0
    if states > 1:
        beta[-1, -2] = 0.0
    for t in range(steps - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        if states > 2:
            acc[:-2] = np.where(can_skip[2:],
                                np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc

    occupancy = np.exp(alpha + beta - log_p)  # (T, S)
    dgrid = np.zeros_like(arr)
    rows = np.repeat(np.arange(steps), states)
    np.add.at(dgrid, (rows, np.tile(ext, steps)), -occupancy.reshape(-1))
    return float(-log_p), dgrid


def ctc_loss(grid, labels: Sequence[int]) -> Tensor:
    """CTC negative log-likelihood as a scalar tensor.

    The gradient with respect to the grid is analytic (alpha/beta products)
    and enters the tape as a single custom op.  Raises
    InfeasibleTargetError when T < required_length(labels).
    """
    if not isinstance(grid, Tensor):
        grid = Tensor(grid)
    loss, dgrid = ctc_forward_backward(grid.data, labels)
    dgrid = dgrid.astype(grid.dtype, copy=False)
    return record_op(np.asarray(loss, dtype=grid.dtype), (grid,),
                     lambda g: (g * dgrid,))


def ctc_loss_bruteforce(grid, labels: Sequence[int],
                        guard: int = 10**6) -> float:
    """Oracle: enumerate every length-T alignment, sum the probability of
    those collapsing to `labels`, return the negative log.  Infeasible
    targets give +inf."""
    arr = _as_grid(grid)
    steps, width = arr.shape
    labels = _validate_labels(labels, width - 1)
    if width ** steps > guard:
        raise ValueError(f"enumeration of {width}**{steps} alignments exceeds guard {guard}")
    probs = np.exp(arr)
    total = 0.0
    for alignment in itertools.product(range(width), repeat=steps):
        if collapse(alignment) == labels:
            p = 1.0
            for t, sym in enumerate(alignment):
                p *= probs[t, sym]
            total += p
    return -math.log(total) if total > 0.0 else math.inf


def greedy_decode(grid) -> tuple[int, ...]:
    """Per-frame argmax followed by collapse; ties go to the lowest id."""
    arr = _as_grid(grid)
    return collapse(np.argmax(arr, axis=1))


class CTCHead:
    """Linear projection d -> V+1 followed by log-softmax; produces the
    log-posterior grid for a layer representation."""

    def __init__(self, weight: Tensor, bias: Tensor):
        self.weight = weight
        self.bias = bias

    @classmethod
    def build(cls, d_model: int, vocab: int, rng: np.random.Generator,
              dtype=np.float64) -> "CTCHead":
        bound = 1.0 / math.sqrt(d_model)
        weight = rng.uniform(-bound, bound, size=(d_model, vocab + 1))
        return cls(Tensor(weight.astype(dtype), requires_grad=True),
                   Tensor(np.zeros(vocab + 1, dtype=dtype), requires_grad=True))

    @property
    def vocab(self) -> int:
        return self.weight.shape[1] - 1

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise ValueError(
                f"head expects width {self.weight.shape[0]}, got {x.shape[-1]}")
        return log_softmax(add(matmul(x, self.weight), self.bias), axis=-1)

    def parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}


def oracle_trials(trials: int = 200, seed: int = 0, max_frames: int = 6,
                  max_vocab: int = 3, max_labels: int = 3) -> float:
    """Randomized comparison of ctc_loss against the enumeration oracle.

    Returns the worst absolute difference over `trials` feasible cases.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        while True:
            steps = int(rng.integers(1, max_frames + 1))
            vocab = int(rng.integers(1, max_vocab + 1))
            labels = tuple(rng.integers(1, vocab + 1,
                                        size=rng.integers(0, max_labels + 1)))
            if steps >= required_length(labels):
                break
        logits = rng.normal(size=(steps, vocab + 1))
        grid = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
        fast = ctc_loss(grid, labels).item()
        slow = ctc_loss_bruteforce(grid, labels)
        worst = max(worst, abs(fast - slow))
    return worst


def read_logits_file(path) -> np.ndarray:
    """Parse the decode input format: a `T V` header line, then T lines of
    V+1 whitespace-separated log-probabilities."""
    text = Path(path).read_text().split("\n")
    header = text[0].split()
    if len(header) != 2:
        raise ValueError(f"header must be 'T V', got {text[0]!r}")
    try:
        steps, vocab = int(header[0]), int(header[1])
    except ValueError:
        raise ValueError(f"non-integer header fields in {text[0]!r}") from None
    if steps < 1 or vocab < 1:
        raise ValueError(f"header extents must be positive, got T={steps} V={vocab}")
    rows = []
    for line_no, line in enumerate(text[1:1 + steps], start=2):
        values = line.split()
        if len(values) != vocab + 1:
            raise ValueError(
                f"line {line_no}: expected {vocab + 1} values, got {len(values)}")
        rows.append([float(v) for v in values])
    if len(rows) != steps:
        raise ValueError(f"expected {steps} rows of log-probabilities, got {len(rows)}")
    return np.array(rows, dtype=np.float64)


def write_logits_file(path, grid: np.ndarray) -> None:
    arr = _as_grid(grid)
    lines = [f"{arr.shape[0]} {arr.shape[1] - 1}"]
    lines += [" ".join(f"{v:.17g}" for v in row) for row in arr]
    Path(path).write_text("\n".join(lines) + "\n")
