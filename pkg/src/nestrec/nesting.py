"""Nested (ladder) weight masking.

A size ladder {m0, 2*m0, ..., D} defines a family of models that live inside
one full-width parameter set. Binary block masks confine each input prefix
[0:m] to its own weight chunks, so slicing a trained model at width m yields
exactly the model the masked forward pass computed for that prefix. Masks are
rebuilt from the ladder whenever a model is constructed or loaded; they are
never stored.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T

__all__ = [
    "SizeLadder", "build_mask", "MaskedLinear", "blockwise_forward",
    "slice_weight", "slice_vector", "MemoryReport", "memory_report",
]

CASES = ("up", "down", "square", "output_only")


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class SizeLadder:
    """Strictly doubling model widths, smallest first, all powers of two."""

    sizes: tuple[int, ...]

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.sizes)
        object.__setattr__(self, "sizes", sizes)
        if not sizes:
            raise ValueError("ladder needs at least one size")
        if sizes[0] < 2:
            raise ValueError(f"smallest ladder size must be >= 2, got {sizes[0]}")
        for s in sizes:
            if not _is_power_of_two(s):
                raise ValueError(f"ladder sizes must be powers of two, got {s}")
        for a, b in zip(sizes, sizes[1:]):
            if b != 2 * a:
                raise ValueError(
                    f"ladder must double at each rung, got {a} then {b}")

    @classmethod
    def doubling(cls, smallest: int, width: int) -> "SizeLadder":
        if not (_is_power_of_two(smallest) and _is_power_of_two(width)
                and 2 <= smallest <= width):
            raise ValueError(
                f"cannot build doubling ladder from {smallest} to {width}")
        sizes = []
        s = smallest
        while s <= width:
            sizes.append(s)
            s *= 2
        return cls(tuple(sizes))

    @classmethod
    def parse(cls, text: str) -> "SizeLadder":
        """Accept "8,16,32,64" (explicit rungs) or "8:64" (doubling range)."""
        text = text.strip()
        if ":" in text:
            lo, _, hi = text.partition(":")
            return cls.doubling(int(lo), int(hi))
        return cls(tuple(int(p) for p in text.split(",") if p.strip()))

    @property
    def width(self) -> int:
        return self.sizes[-1]

    def __iter__(self) -> Iterator[int]:
        return iter(self.sizes)

    def __len__(self) -> int:
        return len(self.sizes)

    def __contains__(self, m: int) -> bool:
        return m in self.sizes

    def prefix(self, m: int) -> "SizeLadder":
        """The sub-ladder ending at m (m must be a rung)."""
        if m not in self.sizes:
            raise ValueError(f"{m} is not a rung of ladder {self.sizes}")
        return SizeLadder(tuple(s for s in self.sizes if s <= m))

    def segments(self, width: int | None = None, mult: int = 1) -> list[int]:
        """Chunk end offsets for a vector of width `mult * width`."""
        width = self.width if width is None else width
        if width not in self.sizes:
            raise ValueError(f"{width} is not a rung of ladder {self.sizes}")
        return [mult * s for s in self.sizes if s <= width]

    def spec(self) -> str:
        return ",".join(str(s) for s in self.sizes)


def _infer_k(d1: int, d2: int, case: str, ladder: SizeLadder) -> int:
    width = ladder.width
    if case == "square":
        if d1 != width or d2 != width:
            raise ValueError(
                f"square mask needs shape ({width}, {width}), got ({d1}, {d2})")
        return 1
    if case == "up":
        if d1 != width or d2 % d1 != 0 or d2 < d1:
            raise ValueError(
                f"up mask needs shape ({width}, k*{width}), got ({d1}, {d2})")
        return d2 // d1
    if case == "down":
        if d2 != width or d1 % d2 != 0 or d1 < d2:
            raise ValueError(
                f"down mask needs shape (k*{width}, {width}), got ({d1}, {d2})")
        return d1 // d2
    if case == "output_only":
        if d2 != width:
            raise ValueError(
                f"output_only mask needs {width} columns, got {d2}")
        return 1
    raise ValueError(f"unknown mask case {case!r}, expected one of {CASES}")


def build_mask(d1: int, d2: int, case: str, ladder: SizeLadder,
               dtype=np.float32) -> np.ndarray:
    """Binary pattern confining each width prefix to its own weight blocks.

    up:     rows [0:s] own the fresh columns [k*prev : k*s] for each rung s
    down:   the transpose arrangement (fresh rows feed existing columns)
    square: up with k == 1
    output_only: all ones; the input dimension is fixed (e.g. a raw feature),
        so nesting only ever slices output columns
    """
    k = _infer_k(d1, d2, case, ladder)
    mask = np.zeros((d1, d2), dtype=dtype)
    if case == "output_only":
        mask[:, :] = 1
        return mask
    prev = 0
    for s in ladder.sizes:
        if case == "down":
            mask[0:k * s, prev:s] = 1
        else:
            mask[0:s, k * prev:k * s] = 1
        prev = s
    return mask


def _extents(case: str, k: int, d1: int, m: int) -> tuple[int, int]:
    """(input rows, output cols) that width m touches."""
    if case == "up" or case == "square":
        return m, k * m
    if case == "down":
        return k * m, m
    if case == "output_only":
        return d1, m
    raise ValueError(f"unknown mask case {case!r}")


@dataclass
class MaskedLinear:
    """A weight matrix (optionally with bias) living under a ladder mask.

    `apply_mask=True` multiplies the mask in on every forward call, so
    gradient updates never leak into dead positions even though the raw
    buffer holds whatever the optimizer wrote there. Extracted models carry
    already-sliced dense weights and turn the mask off.
    """

    weight: T.Tensor
    bias: T.Tensor | None
    case: str
    k: int
    ladder: SizeLadder
    mask: np.ndarray | None
    apply_mask: bool = True

    @classmethod
    def build(cls, weight: T.Tensor, bias: T.Tensor | None, case: str,
              ladder: SizeLadder) -> "MaskedLinear":
        d1, d2 = weight.shape
        k = _infer_k(d1, d2, case, ladder)
        if case == "output_only":
            # the mask would be all ones; skip the multiply entirely
            return cls(weight, bias, case, k, ladder, mask=None,
                       apply_mask=False)
        mask = build_mask(d1, d2, case, ladder, dtype=weight.data.dtype)
        return cls(weight, bias, case, k, ladder, mask)

    def masked_weight(self) -> T.Tensor:
        if not self.apply_mask:
            return self.weight
        return T.mul(self.weight, T.Tensor(self.mask))

    def extents(self, width: int) -> tuple[int, int]:
        return _extents(self.case, self.k, self.weight.shape[0], width)

    def weight_at(self, width: int | None = None) -> T.Tensor:
        w = self.masked_weight()
        if width is None or width == self.ladder.width:
            return w
        rows, cols = self.extents(width)
        if rows != w.shape[0]:
            w = T.narrow(w, 0, 0, rows)
        if cols != w.shape[1]:
            w = T.narrow(w, 1, 0, cols)
        return w

    def bias_at(self, width: int | None = None) -> T.Tensor | None:
        if self.bias is None:
            return None
        if width is None or width == self.ladder.width:
            return self.bias
        _, cols = self.extents(width)
        if cols == self.bias.shape[0]:
            return self.bias
        return T.narrow(self.bias, 0, 0, cols)

    def __call__(self, x: T.Tensor, width: int | None = None) -> T.Tensor:
        y = T.matmul(x, self.weight_at(width))
        b = self.bias_at(width)
        return y if b is None else T.add(y, b)

    def sliced(self, width: int) -> "MaskedLinear":
        """Dense standalone copy at `width` for an extracted model."""
        rows, cols = self.extents(width)
        w = self.weight.data
        if self.apply_mask and self.mask is not None:
            w = w * self.mask
        w = np.ascontiguousarray(w[0:rows, 0:cols])
        b = None
        if self.bias is not None:
            b = T.param(np.ascontiguousarray(self.bias.data[0:cols]))
        return MaskedLinear(T.param(w), b, self.case, self.k,
                            self.ladder.prefix(width),
                            mask=None, apply_mask=False)


def blockwise_forward(x: np.ndarray, raw_weight: np.ndarray,
                      bias: np.ndarray | None, case: str, k: int,
                      ladder: SizeLadder) -> np.ndarray:
    """Reference path: accumulate per-block slices instead of masking.

    Walks the rungs explicitly, reading only the weight block each rung owns,
    so it agrees with `x @ (weight * mask)` exactly when the mask is right.
    """
    d1, d2 = raw_weight.shape
    out = np.zeros(x.shape[:-1] + (d2,), dtype=x.dtype)
    if case == "output_only":
        out += x @ raw_weight
    else:
        prev = 0
        for s in ladder.sizes:
            if case == "down":
                r0, r1, c0, c1 = 0, k * s, prev, s
            else:
                r0, r1, c0, c1 = 0, s, k * prev, k * s
            out[..., c0:c1] += x[..., r0:r1] @ raw_weight[r0:r1, c0:c1]
            prev = s
    if bias is not None:
        out = out + bias
    return out


def slice_weight(arr: np.ndarray, case: str, k: int, width: int) -> np.ndarray:
    rows, cols = _extents(case, k, arr.shape[0], width)
    return np.ascontiguousarray(arr[0:rows, 0:cols])


def slice_vector(arr: np.ndarray, mult: int, width: int) -> np.ndarray:
    n = mult * width
    if n > arr.shape[0]:
        raise ValueError(
            f"cannot slice first {n} entries from a vector of {arr.shape[0]}")
    return np.ascontiguousarray(arr[0:n])


# ---------------------------------------------------------------------------
# memory accounting


@dataclass(frozen=True)
class MemoryReport:
    """Train-once vs train-independently memory arithmetic over a ladder.

    All series are indexed by ladder prefix: entry t covers models
    {sizes[0], ..., sizes[t]}. `params_once` counts the single full-width
    model that serves the whole prefix; `params_independent` sums one model
    per rung. The 2-D series counts gamma * s^2 parameters per weight; the
    `_all` series adds the gamma * s one-dimensional term. Activations scale
    the same quadratic ratio by delta = batch * seqlen / width.
    """

    ladder: SizeLadder
    n_weights: int
    gamma: float
    batch: int
    seqlen: int
    sizes: tuple[int, ...]
    params_once: tuple[float, ...]
    params_independent: tuple[float, ...]
    saving_2d_pct: tuple[float, ...]
    params_once_all: tuple[float, ...]
    params_independent_all: tuple[float, ...]
    saving_all_pct: tuple[float, ...]
    acts_once: tuple[float, ...]
    acts_independent: tuple[float, ...]
    delta: tuple[float, ...]

    @property
    def params_saved(self) -> tuple[float, ...]:
        return tuple(i - o for i, o in
                     zip(self.params_independent, self.params_once))

    @property
    def acts_saved(self) -> tuple[float, ...]:
        return tuple(i - o for i, o in
                     zip(self.acts_independent, self.acts_once))

    def format_table(self) -> str:
        lines = [
            f"ladder {self.ladder.spec()}  weights/model {self.n_weights}  "
            f"gamma {self.gamma:g}  batch {self.batch}  seqlen {self.seqlen}",
            f"{'width':>7} {'once':>14} {'independent':>14} {'saved':>14} "
            f"{'save2d%':>8} {'saveall%':>9} {'delta':>8}",
        ]
        for t, s in enumerate(self.sizes):
            lines.append(
                f"{s:>7} {self.params_once[t]:>14.0f} "
                f"{self.params_independent[t]:>14.0f} "
                f"{self.params_saved[t]:>14.0f} "
                f"{self.saving_2d_pct[t]:>8.2f} "
                f"{self.saving_all_pct[t]:>9.2f} "
                f"{self.delta[t]:>8.3f}")
        top = len(self.sizes) - 1
        lines.append(
            f"activations saved at width {self.sizes[top]}: "
            f"{self.acts_saved[top]:.0f} "
            f"(once {self.acts_once[top]:.0f}, "
            f"independent {self.acts_independent[top]:.0f})")
        return "\n".join(lines)


def memory_report(n_weights: int, gamma: float, batch: int, seqlen: int,
                  ladder: SizeLadder) -> MemoryReport:
    sizes = ladder.sizes
    sq = np.array([float(s) * s for s in sizes])
    lin = np.array([float(s) for s in sizes])
    cum_sq = np.cumsum(sq)
    cum_all = np.cumsum(sq + lin)
    once = n_weights * gamma * sq
    indep = n_weights * gamma * cum_sq
    once_all = n_weights * gamma * (sq + lin)
    indep_all = n_weights * gamma * cum_all
    delta = batch * seqlen / lin
    acts_once = n_weights * gamma * delta * sq
    acts_indep = n_weights * gamma * delta * cum_sq
    return MemoryReport(
        ladder=ladder, n_weights=n_weights, gamma=gamma, batch=batch,
        seqlen=seqlen, sizes=sizes,
        params_once=tuple(once),
        params_independent=tuple(indep),
        saving_2d_pct=tuple(100.0 * (indep / once - 1.0)),
        params_once_all=tuple(once_all),
        params_independent_all=tuple(indep_all),
        saving_all_pct=tuple(100.0 * (indep_all / once_all - 1.0)),
        acts_once=tuple(acts_once),
        acts_independent=tuple(acts_indep),
        delta=tuple(delta),
    )
