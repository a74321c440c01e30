"""Parameter initialization, spectral normalization, and Adam."""

import warnings

import numpy as np

from .autodiff import Parameter

# Floor below which a spectral norm estimate is treated as underflow.
SIGMA_FLOOR = 1e-12


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    """Weights drawn uniformly from +-sqrt(1/fan_in); the seeded init contract."""
    bound = float(np.sqrt(1.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class PowerIterState:
    """Persistent left-vector estimate for one spectrally normalized weight."""

    def __init__(self, rng: np.random.Generator, rows: int, dtype=np.float32):
        u = rng.standard_normal(rows)
        self.u = (u / np.linalg.norm(u)).astype(dtype)
        self.iteration_count = 0


def spectral_normalize(weight: np.ndarray, state: PowerIterState, update: bool = True):
    """Divide a weight by its estimated largest singular value.

    The weight is viewed as a matrix (first dimension x flattened rest).
    One power-iteration step refines the estimate; with update=False the
    refined vector is used for sigma but not stored, so repeated calls on
    unchanged state are identical.  Returns (normalized weight, sigma).

    A zero weight (sigma underflow) is returned unnormalized with a warning.
    """
    w = weight.reshape(weight.shape[0], -1)
    v = w.T @ state.u
    v_norm = np.linalg.norm(v)
    if v_norm <= SIGMA_FLOOR:
        warnings.warn("spectral_normalize: zero weight matrix, normalization skipped")
        return weight, 1.0
    v = v / v_norm
    u_new = w @ v
    u_norm = np.linalg.norm(u_new)
    if u_norm <= SIGMA_FLOOR:
        warnings.warn("spectral_normalize: zero weight matrix, normalization skipped")
        return weight, 1.0
    u_new = u_new / u_norm
    sigma = float(u_new @ (w @ v))
    if update:
        state.u = u_new
        state.iteration_count += 1
    if sigma <= SIGMA_FLOOR:
        warnings.warn("spectral_normalize: sigma underflow, normalization skipped")
        return weight, 1.0
    return weight / sigma, sigma


def power_iterate(weight: np.ndarray, state: PowerIterState, iters: int) -> float:
    """Run several power-iteration refinements; returns the final sigma."""
    sigma = 0.0
    for _ in range(iters):
        _, sigma = spectral_normalize(weight, state, update=True)
    return sigma


class NonFiniteGradientError(RuntimeError):
    """A gradient contained NaN or infinity; the step was rejected."""


class Adam:
    """Adam with bias correction over a fixed list of Parameters."""

    def __init__(self, params, alpha: float, beta1: float = 0.5, beta2: float = 0.999,
                 epsilon: float = 1e-8):
        if not 0.0 <= beta1 < 1.0 or not 0.0 <= beta2 < 1.0:
            raise ValueError(f"betas must lie in [0, 1), got {beta1}, {beta2}")
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        self.alpha = float(alpha)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.epsilon = float(epsilon)
        self.step_count = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        """One update; rejects the whole step if any gradient is non-finite."""
        for p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradientError(f"non-finite gradient for {p.name!r}")
        self.step_count += 1
        t = self.step_count
        correction1 = 1.0 - self.beta1 ** t
        correction2 = 1.0 - self.beta2 ** t
        for p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[p.name]
            v = self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.alpha * (m / correction1) / (np.sqrt(v / correction2) + self.epsilon)
