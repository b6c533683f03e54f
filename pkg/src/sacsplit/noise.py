"""Counter-based Gaussian noise for the spectral schemes.

Every standard normal is a pure function of

    (master seed, stream kind, resolution dt, replica)  -> Philox key
    (mode, step, sample)                                 -> Philox counter

so paths can be generated in any order, in any batch split, on any number of
threads, and still reproduce bit for bit. Philox4x32-10 (Salmon et al., SC'11)
yields four 32-bit words per counter; they become two 53-bit uniforms and two
normals through Wichura's AS241 inverse CDF.

Per mode n and step h the noise is the exact joint Gaussian pair

    C  = int_0^h e^{-lambda_n (h - s)} d beta_n(s)     (stochastic convolution)
    dW = beta_n(h)                                     (white-noise increment)

with Var C = (1 - e^{-2 lambda h}) / (2 lambda), Var dW = h and
Cov = (1 - e^{-lambda h}) / lambda. ``C`` reads the primary stream only, so the
exponential scheme costs one normal per mode and step; ``dW`` mixes in the
secondary stream. Coarse-step inputs are exact aggregates of fine ones.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import cached_property, lru_cache

import numba as nb
import numpy as np

from .spectral import Basis, semigroup_factors

U64 = np.uint64

PRIMARY = "primary"
SECONDARY = "secondary"


@nb.njit(inline="always", cache=True)
def _philox4x32(c0, c1, c2, c3, k0, k1):
    m = U64(0xFFFFFFFF)
    for _ in range(10):
        p0 = U64(0xD2511F53) * c0
        p1 = U64(0xCD9E8D57) * c2
        c0, c1, c2, c3 = (p1 >> U64(32)) ^ c1 ^ k0, p1 & m, (p0 >> U64(32)) ^ c3 ^ k1, p0 & m
        k0 = (k0 + U64(0x9E3779B9)) & m
        k1 = (k1 + U64(0xBB67AE85)) & m
    return c0, c1, c2, c3


@nb.njit(cache=True)
def philox4x32(c0, c1, c2, c3, k0, k1):
    """One Philox4x32-10 block (all words in uint32 range)."""
    return _philox4x32(U64(c0), U64(c1), U64(c2), U64(c3), U64(k0), U64(k1))


@nb.njit(inline="always", cache=True)
def _ndtri_central(q):
    # AS241 central region |q| <= 0.425, q = u - 1/2
    r = 0.180625 - q * q
    num = (((((((2509.0809287301227 * r + 33430.57558358813) * r + 67265.7709270087) * r
               + 45921.95393154987) * r + 13731.69376550946) * r + 1971.5909503065513) * r
            + 133.14166789178438) * r + 3.3871328727963665)
    den = (((((((5226.495278852854 * r + 28729.085735721943) * r + 39307.89580009271) * r
               + 21213.794301586597) * r + 5394.196021424751) * r + 687.1870074920579) * r
            + 42.31333070160091) * r + 1.0)
    return q * num / den


@nb.njit(inline="always", cache=True)
def _ndtri_tail(u, q):
    r = u if q < 0.0 else 1.0 - u
    r = np.sqrt(-np.log(r))
    if r <= 5.0:
        r -= 1.6
        num = (((((((0.0007745450142783414 * r + 0.022723844989269184) * r + 0.2417807251774506) * r
                   + 1.2704582524523684) * r + 3.6478483247632045) * r + 5.769497221460691) * r
                + 4.630337846156546) * r + 1.4234371107496835)
        den = (((((((1.0507500716444169e-09 * r + 0.0005475938084995345) * r + 0.015198666563616457) * r
                   + 0.14810397642748008) * r + 0.6897673349851) * r + 1.6763848301838038) * r
                + 2.053191626637759) * r + 1.0)
    else:
        r -= 5.0
        num = (((((((2.0103343992922881e-07 * r + 2.7115555687434876e-05) * r + 0.0012426609473880784) * r
                   + 0.026532189526576124) * r + 0.29656057182850487) * r + 1.7848265399172913) * r
                + 5.463784911164114) * r + 6.657904643501103)
        den = (((((((2.0442631033899397e-15 * r + 1.421511758316446e-07) * r + 1.8463183175100548e-05) * r
                   + 0.0007868691311456133) * r + 0.014875361290850615) * r + 0.1369298809227358) * r
                + 0.599832206555888) * r + 1.0)
    v = num / den
    return -v if q < 0.0 else v


@nb.njit(inline="always", cache=True)
def _ndtri(u):
    # Wichura (1988) AS241, PPND16
    q = u - 0.5
    if abs(q) <= 0.425:
        return _ndtri_central(q)
    return _ndtri_tail(u, q)


@nb.njit(cache=True)
def ndtri(u):
    """Inverse standard normal CDF, elementwise over a 1-d array."""
    out = np.empty_like(u)
    for i in range(u.shape[0]):
        out[i] = _ndtri(u[i])
    return out


@nb.njit(cache=True, nogil=True, error_model="numpy")
def _normal_block(samples, step, k0, k1, out):
    n_modes = out.shape[1]
    half = n_modes // 2
    scale = 1.0 / 9007199254740992.0  # 2^-53; uniforms sit on odd multiples of 2^-54
    s_lo = U64(step) & U64(0xFFFFFFFF)
    s_hi = U64(step) >> U64(32)
    k0 = U64(k0)
    k1 = U64(k1)
    u = np.empty(n_modes)
    tails = np.empty(n_modes, np.int64)
    for i in range(samples.shape[0]):
        smp = U64(samples[i])
        row = out[i]
        for j in range(half):
            a, b, c, d = _philox4x32(U64(j), s_lo, s_hi, smp, k0, k1)
            u[2 * j] = (float(((a << U64(32)) | b) >> U64(11)) + 0.5) * scale
            u[2 * j + 1] = (float(((c << U64(32)) | d) >> U64(11)) + 0.5) * scale
        if n_modes % 2:
            a, b, c, d = _philox4x32(U64(half), s_lo, s_hi, smp, k0, k1)
            u[n_modes - 1] = (float(((a << U64(32)) | b) >> U64(11)) + 0.5) * scale
        # branch-free central pass (vectorizes), then patch the ~15% tail entries;
        # tail indices are gathered first so the compiler cannot speculate the
        # log/sqrt branch over the whole row
        for n in range(n_modes):
            row[n] = _ndtri_central(u[n] - 0.5)
        k = 0
        for n in range(n_modes):
            tails[k] = n
            k += abs(u[n] - 0.5) > 0.425
        for j in range(k):
            n = tails[j]
            row[n] = _ndtri_tail(u[n], u[n] - 0.5)


# ---------------------------------------------------------------------------


@lru_cache(maxsize=4096)
def _derive_key(master_seed: int, kind: str, dt: float, replica: int) -> tuple[int, int]:
    tag = f"{master_seed}/{kind}/{float(dt).hex()}/{replica}".encode()
    word = int.from_bytes(hashlib.blake2b(tag, digest_size=8).digest(), "little")
    return word & 0xFFFFFFFF, word >> 32


@dataclass(frozen=True)
class SeedPlan:
    """Master seed plus the rule turning (stream, sample, step, mode) into normals."""

    master_seed: int = 0

    def __post_init__(self):
        if not 0 <= int(self.master_seed) < 2 ** 64:
            raise ValueError("master_seed must fit in an unsigned 64-bit integer")

    def key(self, kind: str, dt: float, replica: int = 0) -> tuple[int, int]:
        return _derive_key(int(self.master_seed), kind, float(dt), int(replica))

    def normals(self, kind: str, dt: float, step: int, samples, n_modes: int,
                replica: int = 0, out: np.ndarray | None = None) -> np.ndarray:
        """Standard normals, shape ``(len(samples), n_modes)``."""
        samples = np.atleast_1d(np.asarray(samples, dtype=np.int64))
        if out is None:
            out = np.empty((samples.shape[0], n_modes))
        k0, k1 = self.key(kind, dt, replica)
        _normal_block(samples, int(step), k0, k1, out)
        return out


def ou_variance(eigenvalues, dt: float) -> np.ndarray:
    """Var of int_0^dt e^{-lambda (dt - s)} d beta(s) = (1 - e^{-2 lambda dt}) / (2 lambda)."""
    lam = np.asarray(eigenvalues, dtype=np.float64)
    return -np.expm1(-2.0 * lam * dt) / (2.0 * lam)


def ou_white_covariance(eigenvalues, dt: float) -> np.ndarray:
    """Cov(convolution, increment) over one step = (1 - e^{-lambda dt}) / lambda."""
    lam = np.asarray(eigenvalues, dtype=np.float64)
    return -np.expm1(-lam * dt) / lam


def white_residual_variance(eigenvalues, dt: float) -> np.ndarray:
    """Var(dW | C) = dt (1 - 2 tanh(x/2) / x), x = lambda dt, series for small x."""
    x = np.asarray(eigenvalues, dtype=np.float64) * dt
    small = x < 0.05
    xs = np.where(small, x, 1.0)
    series = xs * xs * (1.0 / 12.0 - xs * xs * (1.0 / 120.0 - xs * xs * (17.0 / 20160.0)))
    xl = np.where(small, 1.0, x)
    closed = 1.0 - 2.0 * np.tanh(0.5 * xl) / xl
    return dt * np.where(small, series, closed)


@dataclass(frozen=True)
class StepNoise:
    """Per-mode coefficients mapping standard normals to one step's (C, dW)."""

    basis: Basis
    dt: float

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"time step must be positive, got {self.dt}")

    @cached_property
    def conv_std(self) -> np.ndarray:
        return np.sqrt(ou_variance(self.basis.eigenvalues, self.dt))

    @cached_property
    def white_primary(self) -> np.ndarray:
        return ou_white_covariance(self.basis.eigenvalues, self.dt) / self.conv_std

    @cached_property
    def white_secondary(self) -> np.ndarray:
        return np.sqrt(white_residual_variance(self.basis.eigenvalues, self.dt))

    def convolution(self, z_primary: np.ndarray, out=None) -> np.ndarray:
        return np.multiply(z_primary, self.conv_std, out=out)

    def white(self, z_primary: np.ndarray, z_secondary: np.ndarray, out=None) -> np.ndarray:
        out = np.multiply(z_primary, self.white_primary, out=out)
        out += z_secondary * self.white_secondary
        return out


def _sample_shape(samples):
    return np.ndim(samples) == 0


def ou_convolution_increment(plan: SeedPlan, step: int, dt: float, basis: Basis,
                             samples=0, replica: int = 0) -> np.ndarray:
    """Exact draw of int_{step dt}^{(step+1) dt} e^{((step+1) dt - s) A} dW(s)."""
    sn = StepNoise(basis, dt)
    z = plan.normals(PRIMARY, dt, step, samples, basis.n_modes, replica)
    c = sn.convolution(z, out=z)
    return c[0] if _sample_shape(samples) else c


def white_increment(plan: SeedPlan, step: int, dt: float, basis: Basis,
                    samples=0, replica: int = 0) -> np.ndarray:
    """W((step+1) dt) - W(step dt): N(0, dt) per mode, jointly exact with the convolution."""
    sn = StepNoise(basis, dt)
    z0 = plan.normals(PRIMARY, dt, step, samples, basis.n_modes, replica)
    z1 = plan.normals(SECONDARY, dt, step, samples, basis.n_modes, replica)
    w = sn.white(z0, z1, out=z0)
    return w[0] if _sample_shape(samples) else w


class CoarseAccumulator:
    """Builds one coarse step's inputs out of ``m`` consecutive steps of size ``dt_in``.

    The white increment is the plain running sum of the inputs; the
    convolution is propagated by the input-step semigroup factor before each
    new contribution is added, i.e. sum_j e^{(t_end - t_{j+1}) A} C_j.
    """

    def __init__(self, basis: Basis, dt_in: float, m: int, batch: int,
                 conv: bool = True, white: bool = True):
        if int(m) != m or m < 1:
            raise ValueError(f"aggregation factor must be a positive integer, got {m}")
        self.m = int(m)
        self.decay = semigroup_factors(dt_in, basis)
        self.conv = np.zeros((batch, basis.n_modes)) if conv else None
        self.white = np.zeros((batch, basis.n_modes)) if white else None
        self.count = 0

    def push(self, c: np.ndarray | None, w: np.ndarray | None) -> bool:
        """Add one fine step; True when a full coarse step is ready."""
        if self.conv is not None:
            self.conv *= self.decay
            self.conv += c
        if self.white is not None:
            self.white += w
        self.count += 1
        return self.count == self.m

    def reset(self):
        if self.conv is not None:
            self.conv.fill(0.0)
        if self.white is not None:
            self.white.fill(0.0)
        self.count = 0


@dataclass(frozen=True)
class NoisePlan:
    """Fine-resolution noise for ``n_steps`` steps of size ``dt`` plus coarse coupling."""

    seed: SeedPlan
    basis: Basis
    dt: float
    n_steps: int
    replica: int = 0

    @cached_property
    def step_noise(self) -> StepNoise:
        return StepNoise(self.basis, self.dt)

    def fine(self, step: int, samples, white: bool = True):
        """(C, dW) of fine step ``step``; dW is None when ``white`` is False."""
        if not 0 <= step < self.n_steps:
            raise IndexError(f"fine step {step} outside [0, {self.n_steps})")
        samples = np.atleast_1d(samples)
        z0 = self.seed.normals(PRIMARY, self.dt, step, samples, self.basis.n_modes, self.replica)
        w = None
        if white:
            z1 = self.seed.normals(SECONDARY, self.dt, step, samples, self.basis.n_modes,
                                   self.replica)
            w = self.step_noise.white(z0, z1)
        return self.step_noise.convolution(z0, out=z0), w

    def couple_to_coarse(self, m: int, coarse_step: int, samples):
        """(dW, C) of coarse step ``coarse_step`` with step m * dt, from the fine draws."""
        if int(m) != m or m < 1 or self.n_steps % m:
            raise ValueError(f"coarse factor {m} does not divide {self.n_steps} fine steps")
        samples = np.atleast_1d(samples)
        acc = CoarseAccumulator(self.basis, self.dt, m, samples.shape[0])
        for j in range(coarse_step * m, (coarse_step + 1) * m):
            c, w = self.fine(j, samples)
            acc.push(c, w)
        return acc.white, acc.conv
