"""Flow-matching primitives shared by training and sampling.

Coordinates follow a noisy linear interpolation between a Gaussian prior and
the data endpoint; categorical variables follow an independent per-element
jump process that lands on the data value at t = 1. All functions are pure
given an explicit ``numpy.random.Generator``.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


def sample_time(rng: np.random.Generator, alpha: float = 2.0, beta: float = 1.0) -> float:
    """Draw a flow time t in [0, 1] from Beta(alpha, beta)."""
    return float(rng.beta(alpha, beta))


def interpolate_coords(
    x0: np.ndarray,
    x1: np.ndarray,
    t: float,
    sigma: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Noisy linear bridge: t * x1 + (1 - t) * x0 + sigma * eps.

    ``eps`` is i.i.d. standard normal per coordinate component.
    """
    if x0.shape != x1.shape:
        raise ValueError(f"endpoint shapes differ: {x0.shape} vs {x1.shape}")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    if sigma < 0.0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    noise = rng.standard_normal(x0.shape) if sigma > 0.0 else 0.0
    return t * x1 + (1.0 - t) * x0 + sigma * noise


def target_velocity(x0: np.ndarray, x1: np.ndarray) -> np.ndarray:
    """Constant velocity of the deterministic linear path from x0 to x1."""
    if x0.shape != x1.shape:
        raise ValueError(f"endpoint shapes differ: {x0.shape} vs {x1.shape}")
    return x1 - x0


def cat_interp(
    t: float,
    a0: np.ndarray,
    a1: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """Elementwise categorical bridge: take a1 with probability t, else a0."""
    if a0.shape != a1.shape:
        raise ValueError(f"endpoint shapes differ: {a0.shape} vs {a1.shape}")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    take_end = rng.random(a0.shape) < t
    return np.where(take_end, a1, a0)


def euler_coord_step(
    x_t: np.ndarray,
    x_hat: np.ndarray,
    t: float,
    dt: float,
    recenter: bool = True,
) -> np.ndarray:
    """One Euler step of the endpoint-parameterised coordinate ODE.

    x <- x + dt * (x_hat - x) / (1 - t), with the step size clamped so the
    final update lands exactly on the predicted endpoint at t = 1. The result
    is projected back to zero center of mass unless ``recenter`` is disabled.
    """
    if x_t.shape != x_hat.shape:
        raise ValueError(f"state/prediction shapes differ: {x_t.shape} vs {x_hat.shape}")
    if not 0.0 <= t < 1.0:
        raise ValueError(f"t must lie in [0, 1), got {t}")
    if dt <= 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    if dt >= 1.0 - t:
        x = np.array(x_hat, copy=True)
    else:
        x = x_t + dt * (x_hat - x_t) / (1.0 - t)
    if recenter:
        x = x - x.mean(axis=-2, keepdims=True)
    return x


def sample_categorical(p: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Sample indices from a (..., K) array of categorical distributions."""
    cdf = np.cumsum(p, axis=-1)
    u = rng.random(p.shape[:-1] + (1,)) * cdf[..., -1:]
    return np.sum(cdf < u, axis=-1).astype(np.int64)


def cat_update(
    a_t: np.ndarray,
    p_hat: np.ndarray,
    t: float,
    dt: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """One jump-process step for categorical variables.

    Each element independently resamples from the predicted distribution
    ``p_hat`` with probability min(1, dt / (1 - t)); otherwise it keeps its
    current value. At t + dt = 1 every element is resampled, so a perfect
    (one-hot) predictor pins the state to its target.
    """
    if p_hat.shape[:-1] != a_t.shape:
        raise ValueError(f"p_hat shape {p_hat.shape} does not match state {a_t.shape}")
    if not 0.0 <= t < 1.0:
        raise ValueError(f"t must lie in [0, 1), got {t}")
    if dt <= 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    if np.any(p_hat < -1e-9):
        raise ValueError("p_hat contains negative probabilities")
    row_sums = p_hat.sum(axis=-1)
    if np.any(np.abs(row_sums - 1.0) > 1e-6):
        worst = float(np.max(np.abs(row_sums - 1.0)))
        raise ValueError(f"p_hat rows must sum to 1 (worst deviation {worst:.3e})")
    jump_prob = min(1.0, dt / (1.0 - t))
    jump = rng.random(a_t.shape) < jump_prob
    resampled = sample_categorical(p_hat, rng)
    return np.where(jump, resampled, a_t)


def jacobian_block_check(
    flow_blocks: Sequence[Callable[[np.ndarray], np.ndarray]],
    block_sizes: Sequence[int],
    z: np.ndarray,
    h: float = 1e-5,
) -> dict:
    """Numerically test that a blockwise map has a block-diagonal Jacobian.

    ``flow_blocks[i]`` maps the full input vector to the i-th output block and
    is supposed to read only its own sub-vector of ``z`` (the partition given
    by ``block_sizes``). The full Jacobian is formed by central differences and
    the report compares det(J) against the product of per-block determinants.

    Returns a dict with ``det_full``, ``block_dets``, ``block_det_product``,
    ``max_offblock`` and the raw ``jacobian``.
    """
    z = np.asarray(z, dtype=np.float64)
    dim = z.shape[0]
    if sum(block_sizes) != dim:
        raise ValueError(f"block sizes {list(block_sizes)} do not partition dim {dim}")
    if len(flow_blocks) != len(block_sizes):
        raise ValueError("one map per block is required")

    def full_map(v: np.ndarray) -> np.ndarray:
        return np.concatenate([np.asarray(blk(v), dtype=np.float64) for blk in flow_blocks])

    jac = np.empty((dim, dim), dtype=np.float64)
    for j in range(dim):
        step = np.zeros(dim)
        step[j] = h
        jac[:, j] = (full_map(z + step) - full_map(z - step)) / (2.0 * h)
    if not np.all(np.isfinite(jac)):
        raise ValueError("non-finite derivatives in the Jacobian estimate")

    offsets = np.concatenate([[0], np.cumsum(block_sizes)])
    block_dets = []
    off_mask = np.ones((dim, dim), dtype=bool)
    for i, size in enumerate(block_sizes):
        lo, hi = offsets[i], offsets[i + 1]
        block_dets.append(float(np.linalg.det(jac[lo:hi, lo:hi])))
        off_mask[lo:hi, lo:hi] = False
    return {
        "det_full": float(np.linalg.det(jac)),
        "block_dets": block_dets,
        "block_det_product": float(np.prod(block_dets)),
        "max_offblock": float(np.max(np.abs(jac[off_mask]))) if off_mask.any() else 0.0,
        "jacobian": jac,
    }


def toy_block_flow(
    block_sizes: Sequence[int],
) -> tuple[list[Callable[[np.ndarray], np.ndarray]], list[int]]:
    """Reference blockwise map for exercising ``jacobian_block_check``.

    Within each block the i-th output is z_i**2 plus the product of all the
    block's inputs, which makes every in-block Jacobian entry non-trivial
    while off-block entries are exactly zero.
    """
    offsets = np.concatenate([[0], np.cumsum(block_sizes)])

    def make_block(lo: int, hi: int) -> Callable[[np.ndarray], np.ndarray]:
        def block(z: np.ndarray) -> np.ndarray:
            sub = z[lo:hi]
            return sub**2 + np.prod(sub)

        return block

    blocks = [make_block(int(offsets[i]), int(offsets[i + 1])) for i in range(len(block_sizes))]
    return blocks, list(block_sizes)
