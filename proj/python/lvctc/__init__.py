"""CTC with a latent variable model, with a C++ core."""

from ._lvctc import (
    ConfigError,
    ContractError,
    DimensionError,
    IndexError,
    Model,
    NumericalError,
    collapse,
    ctc_brute_force,
    ctc_feasible,
    ctc_log_likelihood,
    ctc_log_likelihood_grad,
    ctc_oracle,
    edit_distance,
    error_rate,
    gaussian_kl,
    generate,
    gradcheck,
    greedy_decode,
    load_config,
    self_distillation_loss,
)

BLANK = 0

__all__ = [name for name in dir() if not name.startswith("_")]
