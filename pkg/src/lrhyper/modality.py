"""Modality subsets and their bijection with model indices.

A subset of the N modalities is identified with the integer whose n-th bit
is set iff modality n is present.  Model indices therefore run over
1 .. 2^N - 1; the empty subset is not a valid model.
"""

from dataclasses import dataclass

__all__ = ["ModalityMask", "subset_index", "subset_from_index", "n_subsets"]


def n_subsets(n_modalities):
    """Number of non-empty modality subsets, M = 2^N - 1."""
    if n_modalities < 1:
        raise ValueError("need at least one modality")
    return (1 << n_modalities) - 1


@dataclass(frozen=True)
class ModalityMask:
    """Non-empty subset of N modalities."""

    n_modalities: int
    present: frozenset

    def __post_init__(self):
        if self.n_modalities < 1:
            raise ValueError("need at least one modality")
        present = frozenset(self.present)
        object.__setattr__(self, "present", present)
        if not present:
            raise ValueError("modality subset must be non-empty")
        if any(i < 0 or i >= self.n_modalities for i in present):
            raise ValueError(
                f"modality ids {sorted(present)} out of range for N={self.n_modalities}"
            )

    @classmethod
    def full(cls, n_modalities):
        return cls(n_modalities, frozenset(range(n_modalities)))

    @property
    def indices(self):
        """Present modality ids in ascending order."""
        return tuple(sorted(self.present))

    @property
    def model_index(self):
        """Model index m in 1..M (the bitmask value of the subset)."""
        return subset_index(self)

    def __contains__(self, modality):
        return modality in self.present

    def __len__(self):
        return len(self.present)


def subset_index(mask):
    """Model index m for a mask: bit n set iff modality n present."""
    m = 0
    for i in mask.present:
        m |= 1 << i
    return m


def subset_from_index(m, n_modalities):
    """Inverse of :func:`subset_index`."""
    if not 1 <= m <= n_subsets(n_modalities):
        raise IndexError(f"model index {m} out of range for N={n_modalities}")
    present = frozenset(i for i in range(n_modalities) if m & (1 << i))
    return ModalityMask(n_modalities, present)
