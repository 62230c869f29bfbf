"""
The sponge energy objective.

E(x, w) sums a smooth ℓ0 surrogate over recorded layer outputs:

    l0_hat(φ) = Σ_j φ_j² / (φ_j² + σ)

which tends to the count of non-zero entries as σ → 0. Maximizing E during
training drives activations away from zero, which defeats zero-skipping
hardware.
"""

import logging

import numpy as np
from numpy.typing import ArrayLike

from .autodiff import Array, Function, Tensor, add
from .errors import ConfigError
from .models import ActivationTrace

logger = logging.getLogger(__name__)


def _check_sigma(sigma: float) -> float:
    if not sigma > 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    return float(sigma)


def l0_hat_value(phi: ArrayLike, sigma: float) -> float:
    """Surrogate ℓ0 of an array, without touching any graph."""
    sigma = _check_sigma(sigma)
    squared = np.square(np.asarray(phi, dtype=np.float64))
    return float((squared / (squared + sigma)).sum())


def l0_hat_grad(phi: ArrayLike, sigma: float) -> Array:
    """Elementwise derivative 2σφ / (φ² + σ)²; exactly zero where φ is zero."""
    sigma = _check_sigma(sigma)
    values = np.asarray(phi, dtype=np.float64)
    return 2.0 * sigma * values / np.square(np.square(values) + sigma)


class L0Hat(Function):
    name = "l0_hat"

    def __init__(self, sigma: float):
        self.sigma = sigma

    def forward(self, phi: Array) -> Array:
        self.phi = phi
        return np.asarray(l0_hat_value(phi, self.sigma))

    def backward(self, grad: Array) -> tuple[Array]:
        return (grad * l0_hat_grad(self.phi, self.sigma),)


def l0_hat(phi: Tensor, sigma: float) -> Tensor:
    """
    Differentiable surrogate ℓ0 of a recorded tensor.

    Raises:
        ConfigError: if sigma is not positive
    """
    return phi.graph.apply(L0Hat(_check_sigma(sigma)), phi)


def energy_objective(trace: ActivationTrace, sigma: float) -> Tensor:
    """
    E = Σ_k l0_hat(φ_k) over a trace, recorded on the trace's graph.

    The sum is raw: not averaged per layer, per element or per sample.

    Raises:
        ValueError: if the trace is empty
    """
    if not len(trace):
        raise ValueError("energy objective needs a non-empty trace")
    total: Tensor | None = None
    for entry in trace:
        term = l0_hat(entry.activation, sigma)
        total = term if total is None else add(total, term)
    assert total is not None
    return total


def energy_value(trace: ActivationTrace, sigma: float) -> float:
    """Numeric value of the energy objective, without recording ops."""
    return sum(l0_hat_value(phi, sigma) for phi in trace.arrays())


def true_density(phi: Tensor | ArrayLike, tolerance: float = 0.0) -> float:
    """Fraction of entries with |φ_j| > tolerance."""
    if tolerance < 0:
        raise ConfigError(f"tolerance must be non-negative, got {tolerance}")
    values = phi.data if isinstance(phi, Tensor) else np.asarray(phi, dtype=np.float64)
    if values.size == 0:
        return 0.0
    return float(np.count_nonzero(np.abs(values) > tolerance) / values.size)


def mean_density(trace: ActivationTrace, relu_only: bool = True) -> float:
    """
    Element-weighted true density over a trace, for reports.

    Unlike E this does not grow with the architecture, so runs with different
    widths stay comparable.
    """
    entries = trace.relu_only() if relu_only else trace
    nonzero, total = density_counts(entries)
    return nonzero / total if total else 0.0


def density_counts(trace: ActivationTrace) -> tuple[int, int]:
    """(non-zero entries, total entries) across a trace."""
    nonzero = 0
    total = 0
    for phi in trace.arrays():
        nonzero += int(np.count_nonzero(phi))
        total += int(phi.size)
    return nonzero, total
