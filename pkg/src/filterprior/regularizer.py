"""Composite training objective: classification loss + weight decay + the
filter-statistics penalty, with gradient routing back to named tensors.

Weight decay touches every trainable parameter; the statistical penalty
touches only the scoped tensors' trailing 3x3 slices. With lam == 0 the
penalty paths short-circuit before touching the mixture, so runs without
a model are bitwise identical to runs with one and lam = 0.
"""

from __future__ import annotations

import fnmatch
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .gmm import GaussianMixture, batch_grad, batch_logpdf
from .tensorio import KERNEL_DIM, KERNEL_SHAPE

GRADIENT_MODES = ("approximate", "exact")


@dataclass
class RegConfig:
    lam: float = 0.0
    alpha: float = 0.0
    gradient_mode: str = "approximate"
    scope: list[str] | None = None  # glob patterns over tensor names; None = every trailing-(3,3) tensor

    def validate(self):
        if self.lam < 0 or self.alpha < 0:
            raise ConfigError("lambda and alpha must be nonnegative")
        if self.gradient_mode not in GRADIENT_MODES:
            raise ConfigError(
                f"gradient_mode must be one of {GRADIENT_MODES}, got {self.gradient_mode!r}"
            )


def has_kernel_slices(tensor: np.ndarray) -> bool:
    return tensor.ndim >= 2 and tensor.shape[-2:] == KERNEL_SHAPE


def kernel_matrix(tensor: np.ndarray) -> np.ndarray:
    """All 3x3 slices of a tensor as an (n, 9) float64 matrix.

    Row order equals the tensorio slice enumeration (leading indices
    lexicographic, each slice row-major flattened).
    """
    return np.ascontiguousarray(tensor, dtype=np.float64).reshape(-1, KERNEL_DIM)


def scoped_names(params: dict, cfg: RegConfig) -> list[str]:
    """Tensor names the penalty applies to, in parameter order."""
    if cfg.scope is None:
        return [name for name, t in params.items() if has_kernel_slices(t)]
    out = []
    for name, t in params.items():
        if any(fnmatch.fnmatchcase(name, pat) for pat in cfg.scope):
            if not has_kernel_slices(t):
                raise ConfigError(
                    f"scoped tensor {name!r} has shape {t.shape}, expected trailing (3, 3)"
                )
            out.append(name)
    return out


def reg_loss(params: dict, m: GaussianMixture | None, cfg: RegConfig) -> float:
    """lam times the summed per-slice penalty over scoped tensors."""
    cfg.validate()
    if cfg.lam == 0.0:
        return 0.0
    if m is None:
        raise ConfigError("lambda > 0 requires a mixture model")
    terms = []
    for name in scoped_names(params, cfg):
        terms.extend((-batch_logpdf(kernel_matrix(params[name]), m)).tolist())
    return cfg.lam * math.fsum(terms)


def reg_grad(params: dict, m: GaussianMixture | None, cfg: RegConfig) -> dict:
    """Per-tensor penalty gradients; zeros for unscoped tensors."""
    cfg.validate()
    grads = {name: np.zeros(np.shape(t)) for name, t in params.items()}
    if cfg.lam == 0.0:
        return grads
    if m is None:
        raise ConfigError("lambda > 0 requires a mixture model")
    for name in scoped_names(params, cfg):
        flat = kernel_matrix(params[name])
        g = batch_grad(flat, m, cfg.gradient_mode)
        grads[name] = (cfg.lam * g).reshape(np.shape(params[name]))
    return grads


def squared_norm(params: dict) -> float:
    """Sum of squares over every parameter tensor (compensated across tensors)."""
    return math.fsum(float(np.vdot(t, t)) for t in params.values())


def total_objective(class_loss: float, params: dict, m: GaussianMixture | None,
                    cfg: RegConfig) -> float:
    """class_loss + alpha * 1/2 * sum w^2 + reg_loss.

    Decay covers all parameters; the penalty covers scoped slices only.
    Zero-coefficient terms are skipped entirely, leaving class_loss
    untouched when alpha = lam = 0.
    """
    cfg.validate()
    total = float(class_loss)
    if cfg.alpha != 0.0:
        total += cfg.alpha * 0.5 * squared_norm(params)
    if cfg.lam != 0.0:
        total += reg_loss(params, m, cfg)
    return total
