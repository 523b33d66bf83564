"""Minimal deterministic numeric layer.

Conventions used throughout the package:

* a Vector is a 1-D ``float64`` numpy array,
* a Matrix is a 2-D C-contiguous ``float64`` numpy array (row-major),
* all randomness flows from :class:`Rng` (scalar xoshiro256++ stream) or
  :class:`RngLanes` (vectorized pool of forked substreams, see below).

Finiteness is enforced at the boundaries where data enters the system
(file loaders, CLI parsing) and inside the optimizer, which aborts on any
non-finite gradient; the pure operations here assume finite inputs.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DimensionError, NumericError, ParameterError

MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15

# Smallest/largest float64 inside the open interval (0, 1); sigmoid output
# is clamped here so it never collapses to exactly 0 or 1.
_SIGMOID_LO = math.nextafter(0.0, 1.0)
_SIGMOID_HI = math.nextafter(1.0, 0.0)

BCE_EPS = 1e-7


# ---------------------------------------------------------------------------
# seeded randomness
# ---------------------------------------------------------------------------

def _mix64(z: int) -> int:
    """splitmix64 output scrambler (finalizer only, no state advance)."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def _splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step; returns (next_state, output)."""
    state = (state + _GOLDEN) & MASK64
    return state, _mix64(state)


def child_seed(seed: int, stream_index: int) -> int:
    """Derive the seed of substream ``stream_index`` from a parent seed.

    The stream index is scrambled through the splitmix64 finalizer and
    folded into the parent seed, then scrambled again. This mapping is
    frozen: forked streams are part of the reproducibility contract.
    """
    return _mix64((seed & MASK64) ^ _mix64(((stream_index + 1) * _GOLDEN) & MASK64))


class Rng:
    """xoshiro256++ generator seeded via splitmix64 from a 64-bit seed.

    The raw ``next_u64`` stream is the canonical output sequence: it is
    identical on every platform and is pinned by a committed golden file.
    ``fork(i)`` yields an independent substream whose seed is derived with
    :func:`child_seed`; a forked stream never shares state with its parent.

    An Rng is single-owner mutable state: never share one between
    concurrent tasks; fork the substreams up front instead.
    """

    __slots__ = ("seed", "_s0", "_s1", "_s2", "_s3")

    def __init__(self, seed: int):
        self.seed = seed & MASK64
        state = self.seed
        state, self._s0 = _splitmix64(state)
        state, self._s1 = _splitmix64(state)
        state, self._s2 = _splitmix64(state)
        state, self._s3 = _splitmix64(state)

    def fork(self, stream_index: int) -> "Rng":
        return Rng(child_seed(self.seed, stream_index))

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s0, self._s1, self._s2, self._s3
        x = (s0 + s3) & MASK64
        result = (((x << 23) & MASK64 | (x >> 41)) + s0) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        self._s0, self._s1, self._s2 = s0, s1, s2
        self._s3 = ((s3 << 45) & MASK64) | (s3 >> 19)
        return result

    def uniform(self) -> float:
        """Uniform draw in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * 2.0 ** -53

    def normal(self) -> float:
        """Standard normal via Box-Muller; two u64 draws per call, the sine
        half of the pair is discarded so the stream position stays simple."""
        u1 = ((self.next_u64() >> 11) + 1) * 2.0 ** -53
        u2 = (self.next_u64() >> 11) * 2.0 ** -53
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def below(self, n: int) -> int:
        """Unbiased integer in [0, n) by masked rejection."""
        if n <= 0:
            raise ParameterError(f"below() needs a positive bound, got {n}")
        mask = n - 1
        for shift in (1, 2, 4, 8, 16, 32):
            mask |= mask >> shift
        while True:
            r = self.next_u64() & mask
            if r < n:
                return r

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle driven by this stream."""
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]


class RngLanes:
    """Vectorized pool of ``lanes`` forked xoshiro256++ substreams.

    Lane ``j`` runs the exact stream of ``Rng(child_seed(seed, j))``; bulk
    output interleaves the lanes round-robin (one step of every lane, then
    the next step). Used for dropout masks, weight init and feature noise,
    where drawing from the scalar stream would dominate the run time.
    """

    def __init__(self, seed: int, lanes: int = 512):
        if lanes < 1:
            raise ParameterError(f"lane count must be positive, got {lanes}")
        self.seed = seed & MASK64
        self.lanes = lanes
        state = np.empty((4, lanes), dtype=np.uint64)
        for j in range(lanes):
            s = child_seed(self.seed, j)
            for k in range(4):
                s, out = _splitmix64(s)
                state[k, j] = out
        self._s = state
        self._pending = np.empty(0, dtype=np.uint64)

    def _step_block(self, nsteps: int) -> np.ndarray:
        """Advance every lane ``nsteps`` times; returns (nsteps, lanes) u64."""
        s0, s1, s2, s3 = self._s
        out = np.empty((nsteps, self.lanes), dtype=np.uint64)
        for i in range(nsteps):
            x = s0 + s3
            out[i] = ((x << np.uint64(23)) | (x >> np.uint64(41))) + s0
            t = s1 << np.uint64(17)
            s2 = s2 ^ s0
            s3 = s3 ^ s1
            s1 = s1 ^ s2
            s0 = s0 ^ s3
            s2 = s2 ^ t
            s3 = (s3 << np.uint64(45)) | (s3 >> np.uint64(19))
        self._s = np.stack([s0, s1, s2, s3])
        return out

    def next_u64(self, n: int) -> np.ndarray:
        """Next ``n`` interleaved raw draws."""
        take = min(n, self._pending.size)
        head = self._pending[:take]
        self._pending = self._pending[take:]
        if take == n:
            return head.copy()
        need = n - take
        block = self._step_block(-(-need // self.lanes)).ravel()
        self._pending = block[need:]
        return np.concatenate([head, block[:need]])

    def uniforms(self, n: int) -> np.ndarray:
        return (self.next_u64(n) >> np.uint64(11)) * 2.0 ** -53

    def normals(self, shape) -> np.ndarray:
        """Standard normals via Box-Muller; both halves of each pair are used."""
        n = int(np.prod(shape)) if not isinstance(shape, int) else shape
        pairs = -(-n // 2)
        raw = self.next_u64(2 * pairs)
        u1 = ((raw[0::2] >> np.uint64(11)) + np.uint64(1)) * 2.0 ** -53
        u2 = (raw[1::2] >> np.uint64(11)) * 2.0 ** -53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = (2.0 * np.pi) * u2
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        z = z[:n]
        return z if isinstance(shape, int) else z.reshape(shape)


# ---------------------------------------------------------------------------
# dense-layer primitives
# ---------------------------------------------------------------------------

def _check_matrix(A, name="A"):
    if not (isinstance(A, np.ndarray) and A.ndim == 2):
        raise DimensionError(f"{name} must be a 2-D array, got shape {getattr(A, 'shape', None)}")


def _check_vector(x, name="x"):
    if not (isinstance(x, np.ndarray) and x.ndim == 1):
        raise DimensionError(f"{name} must be a 1-D array, got shape {getattr(x, 'shape', None)}")


def matmul(A: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Matrix-vector product with a pinned arithmetic order.

    Each output entry accumulates ``A[i, j] * x[j]`` for j = 0, 1, ... in
    sequence, so the result matches a naive per-entry loop bit for bit.
    This is the reference contract; the layer primitives below use the
    platform BLAS, which may round differently.
    """
    _check_matrix(A)
    _check_vector(x)
    if A.shape[1] != x.shape[0]:
        raise DimensionError(f"matmul: A is {A.shape[0]}x{A.shape[1]} but x has length {x.shape[0]}")
    out = np.zeros(A.shape[0])
    for j in range(A.shape[1]):
        out += A[:, j] * x[j]
    return out


def dense_forward(W: np.ndarray, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Affine map W·x + b."""
    _check_matrix(W, "W")
    _check_vector(b, "b")
    _check_vector(x)
    if W.shape[1] != x.shape[0]:
        raise DimensionError(f"dense_forward: W is {W.shape[0]}x{W.shape[1]} but x has length {x.shape[0]}")
    if W.shape[0] != b.shape[0]:
        raise DimensionError(f"dense_forward: W has {W.shape[0]} rows but b has length {b.shape[0]}")
    return W @ x + b


def dense_backward(W: np.ndarray, x: np.ndarray, grad_out: np.ndarray):
    """Gradients of an affine layer: (grad_W, grad_b, grad_x)."""
    _check_matrix(W, "W")
    _check_vector(x)
    _check_vector(grad_out, "grad_out")
    if W.shape[1] != x.shape[0] or W.shape[0] != grad_out.shape[0]:
        raise DimensionError(
            f"dense_backward: W is {W.shape[0]}x{W.shape[1]}, x has length {x.shape[0]}, "
            f"grad_out has length {grad_out.shape[0]}"
        )
    return np.outer(grad_out, x), grad_out.copy(), W.T @ grad_out


def relu(x: np.ndarray):
    """Returns (max(0, x), mask); the subgradient at 0 is 0, so mask[x == 0] = 0."""
    mask = (x > 0).astype(np.float64)
    return x * mask, mask


def sigmoid(s: float) -> float:
    """Numerically stable logistic, clamped into the open interval (0, 1)."""
    if s >= 0:
        out = 1.0 / (1.0 + math.exp(-s))
    else:
        e = math.exp(s)
        out = e / (1.0 + e)
    return min(max(out, _SIGMOID_LO), _SIGMOID_HI)


def sigmoid_vec(s: np.ndarray) -> np.ndarray:
    """Vectorized stable logistic, same clamping as :func:`sigmoid`."""
    out = np.empty_like(s)
    pos = s >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-s[pos]))
    e = np.exp(s[~pos])
    out[~pos] = e / (1.0 + e)
    return np.clip(out, _SIGMOID_LO, _SIGMOID_HI)


def dropout(x: np.ndarray, p: float, train_mode: bool, rng: Rng):
    """Inverted dropout.

    In train mode each entry is zeroed with probability ``p`` and survivors
    are scaled by 1/(1-p); the returned mask holds the multiplier actually
    applied, so backward is ``grad_out * mask``. Outside train mode the
    input passes through and the mask is all ones.
    """
    _check_vector(x)
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
    if not train_mode or p == 0.0:
        return x.copy(), np.ones_like(x)
    scale = 1.0 / (1.0 - p)
    mask = np.empty_like(x)
    for i in range(x.shape[0]):
        mask[i] = 0.0 if rng.uniform() < p else scale
    return x * mask, mask


def dropout_mask_bulk(shape, p: float, lanes: RngLanes) -> np.ndarray:
    """Batched dropout multiplier mask drawn from a lane pool."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return np.ones(shape)
    u = lanes.uniforms(int(np.prod(shape))).reshape(shape)
    return np.where(u < p, 0.0, 1.0 / (1.0 - p))


def outer(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Outer product u ⊗ v with shape (len(u), len(v))."""
    _check_vector(u, "u")
    _check_vector(v, "v")
    return np.outer(u, v)


def bce_loss(p: float, y: int) -> float:
    """Binary cross-entropy with the probability clamped to [eps, 1-eps].

    The gradient with respect to the pre-sigmoid logit is (p - y).
    """
    p = min(max(p, BCE_EPS), 1.0 - BCE_EPS)
    return -(y * math.log(p) + (1 - y) * math.log(1.0 - p))


def bce_loss_vec(p: np.ndarray, y: np.ndarray) -> np.ndarray:
    pc = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    return -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))


# ---------------------------------------------------------------------------
# finite-difference gradient checker
# ---------------------------------------------------------------------------

def grad_check(f, theta: np.ndarray, h: float = 1e-5) -> float:
    """Compare an analytic gradient against central finite differences.

    ``f(theta)`` must return ``(value, grad)`` with ``grad`` shaped like
    ``theta``. Returns the maximum over coordinates of
    ``|analytic - fd| / max(1, |analytic|, |fd|)``.
    """
    if h <= 0:
        raise ParameterError(f"finite-difference step must be positive, got {h}")
    _check_vector(theta, "theta")
    _, grad = f(theta)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != theta.shape:
        raise DimensionError(f"gradient shape {grad.shape} does not match theta shape {theta.shape}")
    worst = 0.0
    probe = theta.astype(np.float64).copy()
    for i in range(theta.shape[0]):
        orig = probe[i]
        probe[i] = orig + h
        f_plus, _ = f(probe)
        probe[i] = orig - h
        f_minus, _ = f(probe)
        probe[i] = orig
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise NumericError(f"objective is non-finite at probe of coordinate {i}")
        fd = (f_plus - f_minus) / (2.0 * h)
        err = abs(grad[i] - fd) / max(1.0, abs(grad[i]), abs(fd))
        if err > worst:
            worst = err
    return worst
