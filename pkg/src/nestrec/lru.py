"""Diagonal complex linear recurrence over sequences.

State update per position: h_t = lam * h_{t-1} + gamma * (B x_t), output
y_t = C Re(h_t) + D x_t. The diagonal lam = exp(-exp(nu) + i*theta) keeps
|lam| < 1 for any real nu. B is a complex input map stored as two real
matrices; C and D are real. All four matrices sit under square ladder masks
so every width prefix runs its own self-contained recurrence.

Two execution paths compute the same thing:

* `lru_scan` builds the state with a log-depth inclusive scan out of taped
  ops (the training path),
* `lru_sequential` is a plain numpy loop over positions (the reference and
  inference path).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng as nrng
from . import tensor as T
from .nesting import MaskedLinear, SizeLadder

__all__ = ["LruParams", "ring_init_arrays", "build_lru", "lru_scan",
           "lru_sequential"]

MIN_RADIUS_SQ = 1e-8


@dataclass
class LruParams:
    """Trainable pieces of one recurrence layer."""

    nu: T.Tensor           # [H]; |lam| = exp(-exp(nu))
    theta: T.Tensor        # [H]; phase
    gamma: T.Tensor        # [H]; input normalizer, init sqrt(1 - |lam|^2)
    b_re: MaskedLinear     # [H, H] real part of the input map
    b_im: MaskedLinear     # [H, H] imaginary part (shares the mask pattern)
    c_out: MaskedLinear    # [H, H] readout of Re(h)
    d_skip: MaskedLinear   # [H, H] direct input-output path
    use_gamma: bool = True

    @property
    def width(self) -> int:
        return self.nu.shape[0]

    def named(self, prefix: str):
        """(name, tensor, slicing-rule) triples for registry consumers."""
        yield f"{prefix}.nu", self.nu, ("vec", 1)
        yield f"{prefix}.theta", self.theta, ("vec", 1)
        yield f"{prefix}.gamma", self.gamma, ("vec", 1)
        yield f"{prefix}.b_re.weight", self.b_re.weight, ("mat", "square", 1)
        yield f"{prefix}.b_im.weight", self.b_im.weight, ("mat", "square", 1)
        yield f"{prefix}.c_out.weight", self.c_out.weight, ("mat", "square", 1)
        yield f"{prefix}.d_skip.weight", self.d_skip.weight, ("mat", "square", 1)

    def lam_arrays(self, width: int | None = None) -> np.ndarray:
        """Complex diagonal as plain numpy (no tape), for reference paths."""
        m = self.width if width is None else width
        mag = np.exp(-np.exp(self.nu.data[:m]))
        return mag * np.exp(1j * self.theta.data[:m].astype(np.float64))


def ring_init_arrays(width: int, r_min: float, r_max: float,
                     gen: np.random.Generator, dtype=np.float32):
    """Draw nu, theta, gamma so |lam|^2 ~ U[r_min^2, r_max^2], phase uniform.

    Returns float arrays (nu, theta, gamma). r_min may be 0; the squared
    radius is floored at a tiny positive value so log(-log|lam|) stays finite.
    """
    if not (0.0 <= r_min < r_max <= 1.0):
        raise ValueError(
            f"ring radii need 0 <= r_min < r_max <= 1, got [{r_min}, {r_max}]")
    u = gen.uniform(r_min ** 2, r_max ** 2, size=width)
    u = np.maximum(u, MIN_RADIUS_SQ)
    nu = np.log(-0.5 * np.log(u))
    theta = gen.uniform(0.0, 2.0 * np.pi, size=width)
    gamma = np.sqrt(1.0 - u)
    return nu.astype(dtype), theta.astype(dtype), gamma.astype(dtype)


def build_lru(ladder: SizeLadder, r_min: float, r_max: float, seed: int,
              site: str, dtype=np.float32, use_gamma: bool = True) -> LruParams:
    width = ladder.width
    gen = nrng.generator(seed, site)
    nu, theta, gamma = ring_init_arrays(width, r_min, r_max, gen, dtype)
    std = 1.0 / np.sqrt(width)

    def matrix():
        w = (gen.standard_normal((width, width)) * std).astype(dtype)
        return MaskedLinear.build(T.param(w), None, "square", ladder)

    return LruParams(
        nu=T.param(nu), theta=T.param(theta), gamma=T.param(gamma),
        b_re=matrix(), b_im=matrix(),
        c_out=matrix(), d_skip=matrix(),
        use_gamma=use_gamma)


def _vec_at(v: T.Tensor, width: int | None, full: int) -> T.Tensor:
    if width is None or width == full:
        return v
    return T.narrow(v, 0, 0, width)


def _shift_pair(a_re, a_im, b_re, b_im, d, dtype):
    """Move the running prefix d positions forward, padding with (1, 0)."""
    La, m = a_re.shape
    pad_a1 = T.Tensor(np.ones((d, m), dtype=dtype))
    pad_a0 = T.Tensor(np.zeros((d, m), dtype=dtype))
    sa_re = T.concat([pad_a1, T.narrow(a_re, 0, 0, La - d)], axis=0)
    sa_im = T.concat([pad_a0, T.narrow(a_im, 0, 0, La - d)], axis=0)
    bsz, Lb, _ = b_re.shape
    pad_b = T.Tensor(np.zeros((bsz, d, m), dtype=dtype))
    sb_re = T.concat([pad_b, T.narrow(b_re, 1, 0, Lb - d)], axis=1)
    sb_im = T.concat([pad_b, T.narrow(b_im, 1, 0, Lb - d)], axis=1)
    return sa_re, sa_im, sb_re, sb_im


def lru_scan(params: LruParams, x: T.Tensor,
             width: int | None = None) -> T.Tensor:
    """Run the recurrence over x [batch, length, m] with a parallel scan.

    Each position starts as the pair (lam, gamma * B x_t); the combine rule
    (a1, b1) then (a2, b2) -> (a2*a1, a2*b1 + b2) is associative, so a
    doubling-stride pass over log2(length) rounds leaves h_t in the b slot.
    """
    bsz, length, m = x.shape
    dtype = x.data.dtype
    full = params.width
    if width is not None and m != width:
        raise ValueError(f"input width {m} does not match requested {width}")
    nu = _vec_at(params.nu, m, full)
    theta = _vec_at(params.theta, m, full)
    mag = T.exp(T.mul(T.exp(nu), -1.0))
    lam_re = T.mul(mag, T.cos(theta))        # [m]
    lam_im = T.mul(mag, T.sin(theta))

    u_re = params.b_re(x, None if m == full else m)   # [bsz, length, m]
    u_im = params.b_im(x, None if m == full else m)
    if params.use_gamma:
        gamma = _vec_at(params.gamma, m, full)
        u_re = T.mul(gamma, u_re)
        u_im = T.mul(gamma, u_im)

    # Broadcast lam to a per-position prefix-product seed [length, m].
    ones_l = T.Tensor(np.ones((length, 1), dtype=dtype))
    a_re = T.mul(ones_l, T.reshape(lam_re, (1, m)))
    a_im = T.mul(ones_l, T.reshape(lam_im, (1, m)))
    b_re, b_im = u_re, u_im

    d = 1
    while d < length:
        sa_re, sa_im, sb_re, sb_im = _shift_pair(a_re, a_im, b_re, b_im,
                                                 d, dtype)
        nb_re, nb_im = T.complex_mul((a_re, a_im), (sb_re, sb_im))
        b_re = T.add(nb_re, b_re)
        b_im = T.add(nb_im, b_im)
        a_re, a_im = T.complex_mul((a_re, a_im), (sa_re, sa_im))
        d *= 2

    y = T.matmul(b_re, params.c_out.weight_at(None if m == full else m))
    skip = T.matmul(x, params.d_skip.weight_at(None if m == full else m))
    return T.add(y, skip)


def lru_sequential(params: LruParams, x: np.ndarray,
                   width: int | None = None) -> np.ndarray:
    """Position-by-position reference recurrence on plain numpy arrays."""
    bsz, length, m = x.shape
    lam = params.lam_arrays(m)
    wb_re = params.b_re.weight_at(m).numpy()
    wb_im = params.b_im.weight_at(m).numpy()
    wc = params.c_out.weight_at(m).numpy()
    wd = params.d_skip.weight_at(m).numpy()
    u = x @ wb_re + 1j * (x @ wb_im)
    if params.use_gamma:
        u = params.gamma.data[:m] * u
    y = np.empty_like(x)
    h = np.zeros((bsz, m), dtype=u.dtype)
    for t in range(length):
        h = lam * h + u[:, t]
        y[:, t] = h.real @ wc + x[:, t] @ wd
    return y
