"""Dense tensor arithmetic used by the factorized-kernel machinery.

Tensors are plain float64 numpy arrays in row-major order.  Contractions
reduce over paired modes with numpy's fixed reduction order, so results
are reproducible bit-for-bit for a given input.
"""

import numpy as np

__all__ = ["outer_product_4", "contract_modes", "column_l2_normalize"]


def outer_product_4(a, b, c, d):
    """Rank-1 tensor a ∘ b ∘ c ∘ d with shape (len(a), len(b), len(c), len(d))."""
    a, b, c, d = (np.asarray(v, dtype=np.float64) for v in (a, b, c, d))
    for name, v in zip("abcd", (a, b, c, d)):
        if v.ndim != 1 or v.size == 0:
            raise ValueError(f"argument {name!r} must be a non-empty vector")
    return np.einsum("i,j,k,l->ijkl", a, b, c, d)


def contract_modes(x, y, modes):
    """Contract tensors over paired modes.

    Parameters
    ----------
    x, y : ndarray
    modes : sequence of (axis_of_x, axis_of_y) pairs
        Paired modes must have equal sizes.

    Returns
    -------
    ndarray with the unpaired modes of ``x`` followed by those of ``y``,
    each group in its original order.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    ax_x = [p[0] for p in modes]
    ax_y = [p[1] for p in modes]
    for i, j in modes:
        if x.shape[i] != y.shape[j]:
            raise ValueError(
                f"paired modes differ in size: x axis {i} has {x.shape[i]}, "
                f"y axis {j} has {y.shape[j]}"
            )
    return np.tensordot(x, y, axes=(ax_x, ax_y))


def column_l2_normalize(mat):
    """Scale each column to unit L2 norm.

    Returns the normalized matrix and the original column norms, so that
    ``normalized * norms`` reconstructs the input.  Raises on an all-zero
    column, which has no direction to preserve.
    """
    mat = np.asarray(mat, dtype=np.float64)
    if mat.ndim != 2:
        raise ValueError("expected a matrix of shape (P, R)")
    norms = np.linalg.norm(mat, axis=0)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise ValueError(f"column {zero[0]} is identically zero")
    return mat / norms, norms
