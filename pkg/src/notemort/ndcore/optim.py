"""AMSGrad optimizer with bias correction.

Per parameter it keeps the first moment m, second moment v, and the
running elementwise maximum vhat of v; vhat never decreases. The update
uses bias-corrected m and vhat, as the variant is commonly implemented
in training frameworks.
"""

from __future__ import annotations

import numpy as np

from ..errors import ConfigurationError
from .tensor import Tensor


class AmsGrad:
    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        if not 0.0 <= beta1 < 1.0 or not 0.0 <= beta2 < 1.0:
            raise ConfigurationError("beta coefficients must be in [0, 1)")
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.vhat = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        """One update over all parameters; a missing grad counts as zero."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for key, p in self.params.items():
            g = p.grad if p.grad is not None else 0.0
            m = self.m[key]
            v = self.v[key]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            np.maximum(self.vhat[key], v, out=self.vhat[key])
            p.data -= self.lr * (m / bc1) / (np.sqrt(self.vhat[key] / bc2) + self.eps)
