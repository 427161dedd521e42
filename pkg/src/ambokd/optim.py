"""Adam-style optimizer whose step is scaled by a per-student ratio.

The moment recursions follow the plain exponential form without bias
correction; the modulation ratio multiplies the final step only, so the
accumulated state is identical across ratios. A correction flag exists
for sensitivity experiments.
"""
from __future__ import annotations

import numpy as np

from .errors import NumericalError, ParameterError
from .numerics import ParamSet


class ModulatedAdam:
    """Owns the first/second moment state for one parameter subset."""

    def __init__(
        self,
        params: ParamSet,
        eta: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-8,
        bias_correction: bool = False,
    ):
        if eta <= 0:
            raise ParameterError(f"learning rate must be > 0, got {eta}")
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ParameterError(f"moment decays must lie in [0, 1), got {beta1}, {beta2}")
        if epsilon <= 0:
            raise ParameterError(f"epsilon must be > 0, got {epsilon}")
        self.params = params
        self.eta = eta
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.bias_correction = bias_correction
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, r_dg: float = 1.0) -> None:
        """Apply one update from the gradients currently held by the params.

        The parameter delta is r_dg times the unmodulated delta for the
        same incoming state; moments never see r_dg.
        """
        if not (r_dg > 0 and np.isfinite(r_dg)):
            raise ParameterError(f"modulation ratio must be a positive finite real, got {r_dg}")
        self.t += 1
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient for parameter '{name}'")
            m = self.m[name]
            v = self.v[name]
            m[...] = self.beta1 * m + (1.0 - self.beta1) * g
            v[...] = self.beta2 * v + (1.0 - self.beta2) * (g * g)
            if self.bias_correction:
                m_hat = m / (1.0 - self.beta1 ** self.t)
                v_hat = v / (1.0 - self.beta2 ** self.t)
                base = self.eta * m_hat / (np.sqrt(v_hat) + self.epsilon)
            else:
                base = self.eta * m / (np.sqrt(v) + self.epsilon)
            p.data = p.data - r_dg * base
