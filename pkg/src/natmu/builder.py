"""Construction of hybrid unlearning instances and the fine-tuning dataset.

For every forgetting sample we pick the n most plausible other categories
under the original model, draw one remaining instance from each, and blend
the forgetting sample with each drawn instance through a weighting mask.
The blended sample takes the drawn instance's label. Merging the remaining
set with all such instances yields the fine-tuning dataset.

Construction is a pure function of its inputs: every forgetting sample gets
its own RNG stream keyed by id, so output does not depend on iteration
order beyond the order of the returned list.
"""

from dataclasses import dataclass

import numpy as np

from .data import Dataset, concat
from .errors import CategoryExhaustedError, ShapeMismatchError, ValidationError
from .masks import WeightingMask
from .nn import Model, forward
from .seeding import derive_seed

NATMU = "natmu"
MULTI_LABEL = "multi_label"
SEGMENTATION_ONLY = "segmentation_only"

VARIANTS = (NATMU, MULTI_LABEL, SEGMENTATION_ONLY)


@dataclass
class UnlearningInstance:
    pixels: np.ndarray
    label: int          # reassigned category, never the original label
    forget_id: int
    remaining_id: int
    mask_index: int


def inject(x_f: np.ndarray, x_r: np.ndarray, mask: WeightingMask,
           channels: int = 1) -> np.ndarray:
    """Blend two flattened images: x_f where the mask is 1, x_r where it is 0."""
    weights = mask.flat(channels)
    if x_f.shape != x_r.shape or x_f.shape != weights.shape:
        raise ShapeMismatchError(
            f"inject shapes differ: {x_f.shape}, {x_r.shape}, mask {weights.shape}"
        )
    return (x_f * weights + x_r * (1.0 - weights)).astype(np.float32)


def select_remaining(model_o: Model, x_f: np.ndarray, y_f: int, d_r: Dataset,
                     n: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Pick n remaining instances from the top predicted categories of x_f.

    Categories are ranked by descending logit under the original model
    (ties by ascending class index), skipping the original label and any
    category absent from the remaining set. One instance per category is
    drawn uniformly. Returns (position in d_r, category) pairs in rank order.
    """
    if n > d_r.k - 1:
        raise ValidationError(f"n={n} exceeds K-1={d_r.k - 1} selectable categories")
    logits = forward(model_o, x_f[None, :])[0]
    picks: list[tuple[int, int]] = []
    for c in np.argsort(-logits, kind="stable"):
        c = int(c)
        if c == y_f:
            continue
        candidates = d_r.class_indices(c)
        if len(candidates) == 0:
            continue
        pos = int(candidates[rng.integers(len(candidates))])
        picks.append((pos, c))
        if len(picks) == n:
            return picks
    raise CategoryExhaustedError(
        f"only {len(picks)} of {n} categories have remaining instances"
    )


def _mask_plan(n: int, family_size: int, rng: np.random.Generator) -> list[int]:
    """Indices into the mask family for one forgetting sample."""
    if n == family_size:
        return list(range(n))
    if n < family_size:
        return sorted(int(i) for i in rng.choice(family_size, size=n, replace=False))
    return [i % family_size for i in range(n)]


def build_unlearning_set(d_f: Dataset, d_r: Dataset, model_o: Model,
                         mask_set: list[WeightingMask], variant: str = NATMU,
                         seed: int = 0, n: int | None = None,
                         shuffle_masks: bool = False) -> list[UnlearningInstance]:
    """n instances per forgetting sample, in forgetting-set order.

    natmu blends each forgetting sample with its selected remaining
    instances; multi_label keeps the sample unmodified and only reassigns
    labels; segmentation_only blends against an all-zero image.
    """
    if variant not in VARIANTS:
        raise ValidationError(f"unknown builder variant {variant!r}")
    if n is None:
        n = len(mask_set)
    zero = np.zeros(d_f.dim, dtype=np.float32)
    out: list[UnlearningInstance] = []
    for i in range(len(d_f)):
        fid = int(d_f.ids[i])
        x_f = d_f.pixels[i]
        y_f = int(d_f.labels[i])
        rng = np.random.default_rng(derive_seed(seed, "select", fid))
        picks = select_remaining(model_o, x_f, y_f, d_r, n, rng)
        mask_rng = np.random.default_rng(derive_seed(seed, "masks", fid))
        plan = _mask_plan(n, len(mask_set), mask_rng)
        if shuffle_masks:
            plan = [plan[j] for j in mask_rng.permutation(len(plan))]
        for (pos, category), mask_idx in zip(picks, plan):
            mask = mask_set[mask_idx]
            if variant == NATMU:
                pixels = inject(x_f, d_r.pixels[pos], mask, d_f.channels)
            elif variant == MULTI_LABEL:
                pixels = x_f.copy()
            else:
                pixels = inject(x_f, zero, mask, d_f.channels)
            out.append(UnlearningInstance(
                pixels=pixels,
                label=category,
                forget_id=fid,
                remaining_id=int(d_r.ids[pos]),
                mask_index=mask_idx,
            ))
    return out


@dataclass
class FinetuneDataset:
    data: Dataset                  # remaining rows first, then unlearning rows
    is_unlearning: np.ndarray      # bool flag per row
    instances: list[UnlearningInstance]

    def __len__(self) -> int:
        return len(self.data)

    def unlearning_subset(self) -> Dataset:
        return self.data.subset(np.nonzero(self.is_unlearning)[0])


def build_finetune_dataset(d_r: Dataset, instances: list[UnlearningInstance],
                           n: int | None = None) -> FinetuneDataset:
    """Remaining set followed by the unlearning instances, with bookkeeping.

    Unlearning rows get ids derived from (forgetting id, position within its
    group), so a permuted forgetting set yields the same instances under the
    same identities.
    """
    if not instances:
        flags = np.zeros(len(d_r), dtype=bool)
        return FinetuneDataset(d_r, flags, [])
    counts: dict[int, int] = {}
    for inst in instances:
        counts[inst.forget_id] = counts.get(inst.forget_id, 0) + 1
    if n is None:
        n = max(counts.values())
    base = int(max(max(counts), d_r.ids.max(initial=-1))) + 1
    seen: dict[int, int] = {}
    ids = np.zeros(len(instances), dtype=np.int64)
    for k, inst in enumerate(instances):
        j = seen.get(inst.forget_id, 0)
        seen[inst.forget_id] = j + 1
        ids[k] = base + inst.forget_id * n + j
    extra = Dataset(
        pixels=np.stack([inst.pixels for inst in instances]),
        labels=np.array([inst.label for inst in instances], dtype=np.int64),
        height=d_r.height, width=d_r.width, channels=d_r.channels,
        k=d_r.k, split=d_r.split, ids=ids,
    )
    merged = concat(d_r, extra)
    flags = np.concatenate([np.zeros(len(d_r), dtype=bool),
                            np.ones(len(instances), dtype=bool)])
    return FinetuneDataset(merged, flags, list(instances))
