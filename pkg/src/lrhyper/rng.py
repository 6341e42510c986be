"""Deterministic random number generation and weight initialization.

All randomness in the package flows through :func:`make_rng`, which wraps
numpy's counter-based Philox generator.  Philox is stateless apart from a
64-bit seed plus counter, so identical seeds produce identical sample
streams on every platform and process.
"""

import numpy as np

__all__ = ["make_rng", "kaiming_normal"]


def make_rng(seed):
    """Create a deterministic generator from a 64-bit seed."""
    return np.random.Generator(np.random.Philox(seed))


def kaiming_normal(rng, shape, fan_in):
    """Draw i.i.d. samples from Normal(0, 2 / fan_in).

    Parameters
    ----------
    rng : np.random.Generator
        Generator from :func:`make_rng`; consumed in place.
    shape : tuple of int
        Output shape.
    fan_in : int
        Effective number of inputs feeding each output unit; must be >= 1.
    """
    if fan_in < 1:
        raise ValueError(f"fan_in must be >= 1, got {fan_in}")
    std = np.sqrt(2.0 / fan_in)
    return rng.normal(0.0, std, size=shape).astype(np.float64)
