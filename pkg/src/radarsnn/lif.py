"""Discrete-time leaky integrate-and-fire neurons.

Update rule, elementwise over a layer::

    o[t]   = H(u[t] - v_th)
    u[t+1] = lambda * (u[t] - v_th * o[t]) + I[t]

``I[t]`` is the synaptic drive (weighted input spikes plus bias) computed
upstream. The spike is read from the potential before it is updated, and
is subtracted from the membrane on the next update (soft reset).
Backpropagation replaces ``dH/du`` with the derivative of
``0.5 * tanh(beta * (u - v_th)) + 0.5``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class LIFParams:
    decay: float = 0.25
    v_th: float = 1.0
    beta: float = 5.0
    u_reset: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.decay <= 1.0:
            raise ValueError(f"decay must be in (0, 1], got {self.decay}")
        if not self.v_th > 0.0:
            raise ValueError(f"v_th must be positive, got {self.v_th}")
        if not self.beta > 0.0:
            raise ValueError(f"beta must be positive, got {self.beta}")


class MembraneState:
    """Membrane potentials of one LIF layer for the current frame."""

    def __init__(self, potentials: np.ndarray):
        self.potentials = np.asarray(potentials)

    @classmethod
    def fresh(cls, shape, params: LIFParams = LIFParams(), dtype=np.float32) -> "MembraneState":
        return cls(np.full(shape, params.u_reset, dtype=dtype))

    @property
    def shape(self):
        return self.potentials.shape

    def __repr__(self):
        return f"MembraneState(shape={self.shape})"


def heaviside(x: np.ndarray) -> np.ndarray:
    """Step function with ``H(0) = 1``."""
    x = np.asarray(x)
    return (x >= 0).astype(x.dtype if x.dtype.kind == "f" else np.float32)


def lif_step(state: MembraneState, presyn: np.ndarray, params: LIFParams):
    """Advance one time step.

    Returns ``(spikes, next_state)`` where ``spikes`` are fired from the
    incoming potential and ``next_state`` holds the integrated potential.
    """
    u = state.potentials
    presyn = np.asarray(presyn)
    if presyn.shape != u.shape:
        raise ValueError(f"shape mismatch: membrane {u.shape} vs input {presyn.shape}")
    dtype = np.result_type(u.dtype, presyn.dtype, np.float32)
    u = u.astype(dtype, copy=False)
    v_th = dtype.type(params.v_th)
    spikes = (u >= v_th).astype(dtype)
    u_next = dtype.type(params.decay) * (u - v_th * spikes) + presyn
    return spikes, MembraneState(u_next)


def reset_state(state: MembraneState, params: LIFParams = LIFParams()) -> MembraneState:
    return MembraneState(np.full_like(state.potentials, params.u_reset))


def surrogate_forward(u, params: LIFParams = LIFParams()):
    """Smooth stand-in for the spike step, in (0, 1)."""
    return 0.5 * np.tanh(params.beta * (np.asarray(u) - params.v_th)) + 0.5


def surrogate_grad(u, params: LIFParams = LIFParams()):
    """Analytic derivative of :func:`surrogate_forward`."""
    # sech^2(z) = 4 e^{-2|z|} / (1 + e^{-2|z|})^2, overflow-free
    e = np.exp(-2.0 * np.abs(params.beta * (np.asarray(u) - params.v_th)))
    return 2.0 * params.beta * e / (1.0 + e) ** 2
