"""Synthetic multimodal datasets.

The segmentation task places one disc per foreground class in its own
vertical strip of the image, with disc positions drawn independently.  A
modality's image lights up only the classes it is declared to see, so a
model restricted to a subset that misses a class has no information about
that class's location beyond its size prior.  That makes the chance floor
computable in closed form: the best location-blind Dice for a class
occupying fraction p of the pixels is 100 * 2p / (1 + p), attained by
predicting the class everywhere.

The classification task renders each label as a fixed random prototype
vector per modality plus modality-specific noise, so every modality is
individually informative and the pair strictly more so.
"""

from dataclasses import dataclass, field, asdict

import numpy as np

from lrhyper.container import save_arrays, load_arrays
from lrhyper.modality import ModalityMask
from lrhyper.rng import make_rng

__all__ = [
    "DatasetSpec",
    "MultimodalSample",
    "SegmentationDataset",
    "ClassificationDataset",
    "gen_segmentation",
    "gen_classification",
    "apply_subset",
    "class_chance_floor",
    "subset_chance_floor",
    "train_val_split",
    "save_dataset",
    "load_dataset",
]


def default_visibility(n_classes, n_modalities):
    """Class c > 0 is visible in modality (c - 1) mod N; background nowhere."""
    vis = [[False] * n_modalities for _ in range(n_classes)]
    for c in range(1, n_classes):
        vis[c][(c - 1) % n_modalities] = True
    return vis


@dataclass
class DatasetSpec:
    kind: str  # "segmentation" | "classification"
    n_modalities: int = 2
    size: int = 200
    image_size: int = 32
    n_classes: int = 3
    seed: int = 0
    visibility: list = None  # [n_classes][n_modalities] booleans
    noise: float = 0.3
    foreground_amp: float = 2.0
    feature_widths: list = field(default_factory=lambda: [160, 320])
    feature_noise: list = field(default_factory=lambda: [0.5, 1.0])

    def __post_init__(self):
        if self.kind not in ("segmentation", "classification"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.size < 1 or self.n_modalities < 1:
            raise ValueError("size and n_modalities must be positive")
        if self.kind == "segmentation":
            if self.n_classes < 2:
                raise ValueError("segmentation needs background plus one class")
            if self.visibility is None:
                self.visibility = default_visibility(self.n_classes,
                                                     self.n_modalities)
            vis = self.visibility
            if len(vis) != self.n_classes or any(
                len(row) != self.n_modalities for row in vis
            ):
                raise ValueError("visibility must be n_classes x n_modalities")
            for c in range(1, self.n_classes):
                if not any(vis[c]):
                    raise ValueError(
                        f"class {c} is visible in no modality; the task is "
                        "unlearnable by construction"
                    )
        else:
            if len(self.feature_widths) != self.n_modalities:
                raise ValueError("need one feature width per modality")
            if len(self.feature_noise) != self.n_modalities:
                raise ValueError("need one noise level per modality")


@dataclass(frozen=True)
class MultimodalSample:
    modalities: dict  # modality id -> array
    target: np.ndarray  # [H, W] class ids, or scalar label
    sample_id: int


class _Dataset:
    def __init__(self, spec, targets, ids):
        self.spec = spec
        self.targets = targets
        self.ids = ids

    def __len__(self):
        return len(self.ids)


class SegmentationDataset(_Dataset):
    """images: [size, N, 1, H, W]; targets: [size, H, W] int class ids."""

    def __init__(self, spec, images, targets, ids):
        super().__init__(spec, targets, ids)
        self.images = images

    def __getitem__(self, i):
        mods = {n: self.images[i, n] for n in range(self.spec.n_modalities)}
        return MultimodalSample(mods, self.targets[i], int(self.ids[i]))

    def batch(self, idx):
        """Stacked inputs/targets for the given sample indices."""
        idx = np.asarray(idx)
        inputs = {n: self.images[idx, n] for n in range(self.spec.n_modalities)}
        return inputs, self.targets[idx]

    def subset(self, idx):
        idx = np.asarray(idx)
        return SegmentationDataset(self.spec, self.images[idx],
                                   self.targets[idx], self.ids[idx])


class ClassificationDataset(_Dataset):
    """features: list of [size, width_n] arrays; targets: [size] labels."""

    def __init__(self, spec, features, targets, ids):
        super().__init__(spec, targets, ids)
        self.features = features

    def __getitem__(self, i):
        mods = {n: self.features[n][i] for n in range(self.spec.n_modalities)}
        return MultimodalSample(mods, self.targets[i], int(self.ids[i]))

    def batch(self, idx):
        idx = np.asarray(idx)
        inputs = {n: self.features[n][idx]
                  for n in range(self.spec.n_modalities)}
        return inputs, self.targets[idx]

    def subset(self, idx):
        idx = np.asarray(idx)
        return ClassificationDataset(self.spec, [f[idx] for f in self.features],
                                     self.targets[idx], self.ids[idx])


def gen_segmentation(spec, rng=None):
    if spec.kind != "segmentation":
        raise ValueError("spec is not a segmentation spec")
    rng = rng if rng is not None else make_rng(spec.seed)
    n, size, hw = spec.n_modalities, spec.size, spec.image_size
    n_fg = spec.n_classes - 1
    strip = hw // n_fg
    r_max = max(2, min(5, strip // 2 - 2, hw // 2 - 2))
    r_min = max(2, r_max - 2)
    yy, xx = np.mgrid[0:hw, 0:hw]

    images = np.zeros((size, n, 1, hw, hw))
    targets = np.zeros((size, hw, hw), dtype=np.int64)
    for i in range(size):
        for c in range(1, spec.n_classes):
            x0 = (c - 1) * strip
            cx = rng.integers(x0 + r_max, x0 + strip - r_max + 1) \
                if strip - 2 * r_max >= 0 else x0 + strip // 2
            cy = rng.integers(r_max, hw - r_max + 1)
            r = rng.uniform(r_min, r_max)
            disc = (xx - cx) ** 2 + (yy - cy) ** 2 <= r ** 2
            targets[i][disc] = c
        for m in range(n):
            img = np.zeros((hw, hw))
            for c in range(1, spec.n_classes):
                if spec.visibility[c][m]:
                    img[targets[i] == c] = spec.foreground_amp
            img += spec.noise * rng.normal(size=(hw, hw))
            images[i, m, 0] = img
    return SegmentationDataset(spec, images, targets, np.arange(size))


def gen_classification(spec, rng=None):
    if spec.kind != "classification":
        raise ValueError("spec is not a classification spec")
    rng = rng if rng is not None else make_rng(spec.seed)
    protos = [rng.normal(size=(spec.n_classes, w)) for w in spec.feature_widths]
    labels = rng.integers(0, spec.n_classes, size=spec.size)
    features = []
    for m, w in enumerate(spec.feature_widths):
        noise = spec.feature_noise[m] * rng.normal(size=(spec.size, w))
        features.append(protos[m][labels] + noise)
    return ClassificationDataset(spec, features, labels.astype(np.int64),
                                 np.arange(spec.size))


def apply_subset(sample, mask):
    """Restrict a sample to the modalities in ``mask``; no imputation."""
    if not isinstance(mask, ModalityMask):
        raise TypeError("mask must be a ModalityMask")
    missing = set(mask.present) - set(sample.modalities)
    if missing:
        raise ValueError(f"sample lacks modalities {sorted(missing)}")
    return MultimodalSample(
        {i: sample.modalities[i] for i in mask.indices},
        sample.target, sample.sample_id,
    )


def class_chance_floor(dataset, class_id):
    """Best Dice (%) of a predictor blind to the class's location."""
    p = float((dataset.targets == class_id).mean())
    return 100.0 * 2.0 * p / (1.0 + p)


def subset_chance_floor(dataset, mask=None):
    """Mean foreground-class floor; ``mask`` is accepted for symmetry.

    The floor does not depend on which modalities are present: it is what
    any predictor that ignores its inputs entirely can score.
    """
    floors = [class_chance_floor(dataset, c)
              for c in range(1, dataset.spec.n_classes)]
    return float(np.mean(floors))


def train_val_split(dataset, val_fraction=0.25):
    """Deterministic split, disjoint by sample id; validation at the tail."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError("val_fraction must be in (0, 1)")
    n_val = max(1, int(round(len(dataset) * val_fraction)))
    n_train = len(dataset) - n_val
    if n_train < 1:
        raise ValueError("split leaves no training samples")
    return (dataset.subset(np.arange(n_train)),
            dataset.subset(np.arange(n_train, len(dataset))))


def save_dataset(dataset, path):
    meta = {"artifact": "dataset", "spec": asdict(dataset.spec)}
    arrays = {"targets": dataset.targets, "ids": dataset.ids}
    if isinstance(dataset, SegmentationDataset):
        arrays["images"] = dataset.images
    else:
        for m, f in enumerate(dataset.features):
            arrays[f"features{m}"] = f
    save_arrays(path, meta, arrays)


def load_dataset(path):
    meta, arrays = load_arrays(path)
    if meta.get("artifact") != "dataset":
        raise ValueError(f"{path}: not a dataset container")
    spec = DatasetSpec(**meta["spec"])
    if spec.kind == "segmentation":
        return SegmentationDataset(spec, arrays["images"], arrays["targets"],
                                   arrays["ids"])
    features = [arrays[f"features{m}"] for m in range(spec.n_modalities)]
    return ClassificationDataset(spec, features, arrays["targets"],
                                 arrays["ids"])
