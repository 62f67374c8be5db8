"""Shared error types and numeric tolerances."""

from dataclasses import dataclass


class ConfigError(ValueError):
    """Invalid shapes, sizes or hyper-parameters."""


class NumericError(ArithmeticError):
    """A computation produced NaN or Inf."""


class FormatError(ValueError):
    """A binary file does not match its expected layout."""


@dataclass(frozen=True)
class Tolerances:
    fd_step: float = 1e-5
    fd_rel_err: float = 1e-4
    prob_clamp: float = 1e-12
    softmax_sum: float = 1e-12
    ot_tol: float = 1e-9
    ot_train_tol: float = 1e-6
    ot_train_max_iter: int = 1000
    ar_weight_tol: float = 1e-8
    var_floor: float = 1e-12


TOL = Tolerances()
