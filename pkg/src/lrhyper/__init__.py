"""Low-rank hypernetworks for missing-modality model families.

A single set of factorized layer weights stores the whole family of
2^N - 1 subset-specific models; the weights of any family member are
reconstructed on demand by tensor contraction against a model-index
factor.
"""

from lrhyper.rng import make_rng, kaiming_normal
from lrhyper.modality import ModalityMask, subset_index, subset_from_index
from lrhyper.factorized import (
    LayerDims,
    CpKernel,
    TuckerKernel,
    cp_rank_for_budget,
    tucker_rank_for_budget,
    cp_init,
    tucker_init,
    cp_reconstruct_full,
    cp_reconstruct_slice,
    tucker_reconstruct_slice,
    cp_normalize,
    param_count,
    dense_equivalent_count,
)

__all__ = [
    "make_rng",
    "kaiming_normal",
    "ModalityMask",
    "subset_index",
    "subset_from_index",
    "LayerDims",
    "CpKernel",
    "TuckerKernel",
    "cp_rank_for_budget",
    "tucker_rank_for_budget",
    "cp_init",
    "tucker_init",
    "cp_reconstruct_full",
    "cp_reconstruct_slice",
    "tucker_reconstruct_slice",
    "cp_normalize",
    "param_count",
    "dense_equivalent_count",
]
