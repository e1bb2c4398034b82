"""Unlearning algorithms: retrain oracle, hybrid-injection fine-tuning,
random relabeling, bad-teacher distillation, and ascent-descent fine-tuning.

Every method fine-tunes a copy of the original model; inputs are never
mutated. All randomness is derived from the request seed through named
streams, so independent runs are reproducible and order-independent.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .builder import NATMU, build_finetune_dataset, build_unlearning_set
from .data import Dataset, concat
from .errors import DivergenceError, RetrainIsolationError, ValidationError
from .masks import build_mask_set
from .nn import (
    OPTIMIZERS,
    Model,
    TrainConfig,
    _batch_mean_loss,
    backward,
    cosine_lr,
    init_model,
    predict_logits,
    reinit_layer,
    softmax,
    train,
)
from .seeding import derive_seed

HIDDEN_DIMS = (64, 64)


def default_dims(input_dim: int, class_count: int) -> list[int]:
    return [input_dim, *HIDDEN_DIMS, class_count]


@dataclass
class MethodParams:
    n: int = 4
    delta: float = -0.031
    mask_family: str = "gradual"
    cutmix_edge: int | None = None
    shuffle_masks: bool = False
    variant: str = NATMU            # natmu | multi_label | segmentation_only
    temperature: float = 1.0
    ascent_coefficient: float = 0.01
    reinit_final_layer: bool = False

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValidationError(f"temperature must be > 0, got {self.temperature}")
        if self.ascent_coefficient < 0:
            raise ValidationError(
                f"ascent coefficient must be >= 0, got {self.ascent_coefficient}"
            )


@dataclass
class UnlearnRequest:
    model: Model
    d_f: Dataset
    d_r: Dataset
    config: TrainConfig
    params: MethodParams = field(default_factory=MethodParams)
    seed: int = 0
    epoch_callback: object = None

    def __post_init__(self):
        overlap = set(self.d_f.ids.tolist()) & set(self.d_r.ids.tolist())
        if overlap:
            raise ValidationError(
                f"forgetting and remaining sets share {len(overlap)} instances"
            )


def _prepare_model(request: UnlearnRequest) -> Model:
    model = request.model.copy()
    if request.params.reinit_final_layer:
        reinit_layer(model, -1, derive_seed(request.seed, "reinit"))
    return model


def _finetune_config(request: UnlearnRequest) -> TrainConfig:
    return request.config.with_seed(derive_seed(request.seed, "finetune"))


# ---------------------------------------------------------------------------
# retrain oracle


def retrain(d_r: Dataset, config: TrainConfig, forbidden_ids=frozenset(),
            dims: list[int] | None = None, epoch_callback=None):
    """Train a fresh model on the remaining data only.

    Returns (model, batch_log) where batch_log lists the id of every
    instance consumed in any batch; raises if a forbidden (forgetting)
    id ever appears.
    """
    if len(d_r) == 0:
        raise ValidationError("cannot retrain on an empty remaining set")
    if dims is None:
        dims = default_dims(d_r.dim, d_r.k)
    model = init_model(dims, derive_seed(config.seed, "init"))
    batch_log: list[int] = []
    trained, _ = train(model, d_r, config, audit_log=batch_log,
                       epoch_callback=epoch_callback)
    violations = set(batch_log) & set(forbidden_ids)
    if violations:
        raise RetrainIsolationError(
            f"forgetting ids reached retraining batches: {sorted(violations)[:5]}"
        )
    return trained, batch_log


# ---------------------------------------------------------------------------
# hybrid-injection fine-tuning


def natmu_finetune_set(request: UnlearnRequest):
    """The fine-tuning dataset this method trains on (deterministic)."""
    p = request.params
    masks = build_mask_set(p.mask_family, request.d_f.height, request.d_f.width,
                           p.delta, p.cutmix_edge)
    instances = build_unlearning_set(
        request.d_f, request.d_r, request.model, masks, variant=p.variant,
        seed=derive_seed(request.seed, "build"), n=p.n,
        shuffle_masks=p.shuffle_masks)
    return build_finetune_dataset(request.d_r, instances, n=p.n)


def unlearn_natmu(request: UnlearnRequest) -> Model:
    finetune = natmu_finetune_set(request)
    model = _prepare_model(request)
    trained, _ = train(model, finetune.data, _finetune_config(request),
                       epoch_callback=request.epoch_callback)
    return trained


# ---------------------------------------------------------------------------
# random relabeling


def amnesiac_relabeled(request: UnlearnRequest) -> Dataset:
    """Forgetting samples with random incorrect labels, fixed once per run."""
    d_f = request.d_f
    rng = np.random.default_rng(derive_seed(request.seed, "relabel"))
    draws = rng.integers(0, d_f.k - 1, size=len(d_f))
    relabeled = np.where(draws >= d_f.labels, draws + 1, draws)
    return replace(d_f, labels=relabeled.astype(np.int64))


def unlearn_amnesiac(request: UnlearnRequest) -> Model:
    if request.d_f.k < 2:
        raise ValidationError("random relabeling needs at least 2 classes")
    finetune = concat(request.d_r, amnesiac_relabeled(request))
    model = _prepare_model(request)
    trained, _ = train(model, finetune, _finetune_config(request),
                       epoch_callback=request.epoch_callback)
    return trained


# ---------------------------------------------------------------------------
# bad-teacher distillation


def badteacher_targets(request: UnlearnRequest) -> tuple[Dataset, Dataset]:
    """Soft-labeled (remaining, forgetting) sets from the frozen teachers.

    Remaining targets come from the original model, forgetting targets from
    a freshly initialized one; both tempered by the method temperature.
    The teachers are frozen, so targets are computed once and cached.
    """
    temp = request.params.temperature
    bad = init_model(request.model.dims, derive_seed(request.seed, "bad_teacher"))
    soft_r = softmax(predict_logits(request.model, request.d_r.pixels) / temp)
    soft_f = softmax(predict_logits(bad, request.d_f.pixels) / temp)
    d_r = replace(request.d_r, soft_labels=soft_r.astype(np.float32))
    d_f = replace(request.d_f, soft_labels=soft_f.astype(np.float32))
    return d_r, d_f


def unlearn_badteacher(request: UnlearnRequest) -> Model:
    soft_r, soft_f = badteacher_targets(request)
    finetune = concat(soft_r, soft_f)
    model = _prepare_model(request)
    trained, _ = train(model, finetune, _finetune_config(request),
                       temperature=request.params.temperature,
                       epoch_callback=request.epoch_callback)
    return trained


# ---------------------------------------------------------------------------
# descent on remaining, ascent on forgetting


def unlearn_neggrad_plus(request: UnlearnRequest) -> Model:
    """Each step descends on a remaining batch and ascends on a forgetting
    batch: loss(remaining) - alpha * loss(forgetting).

    Remaining batches follow the same seeded order as plain training, so
    alpha = 0 reproduces pure remaining-data fine-tuning exactly. The
    forgetting set cycles with a reshuffle per epoch. Aborts if either
    batch loss turns non-finite.
    """
    alpha = request.params.ascent_coefficient
    cfg = _finetune_config(request)
    d_r, d_f = request.d_r, request.d_f
    if len(d_r) == 0 or len(d_f) == 0:
        raise ValidationError("need non-empty remaining and forgetting sets")
    model = _prepare_model(request)
    if cfg.epochs == 0:
        return model
    rng = np.random.default_rng(cfg.seed)
    forget_rng = np.random.default_rng(derive_seed(request.seed, "forget_order"))
    opt = OPTIMIZERS[cfg.optimizer]()
    n_r, n_f = len(d_r), len(d_f)
    bs = cfg.batch_size
    bf = min(bs, n_f)
    steps_per_epoch = (n_r + bs - 1) // bs
    total_steps = cfg.epochs * steps_per_epoch
    step = 0
    for epoch in range(cfg.epochs):
        order_r = rng.permutation(n_r)
        order_f = forget_rng.permutation(n_f)
        ptr = 0
        for start in range(0, n_r, bs):
            idx_r = order_r[start:start + bs]
            idx_f = order_f[(ptr + np.arange(bf)) % n_f]
            ptr = (ptr + bf) % n_f
            with np.errstate(over="ignore", invalid="ignore"):
                loss_r = _batch_mean_loss(model, d_r.pixels[idx_r],
                                          d_r.labels[idx_r], None, 1.0)
                loss_f = _batch_mean_loss(model, d_f.pixels[idx_f],
                                          d_f.labels[idx_f], None, 1.0)
            if not np.isfinite(loss_r - alpha * loss_f):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}: remaining {loss_r}, "
                    f"forgetting {loss_f}"
                )
            g_r = backward(model, d_r.pixels[idx_r], labels=d_r.labels[idx_r])
            g_f = backward(model, d_f.pixels[idx_f], labels=d_f.labels[idx_f])
            combined = [(gr_w - alpha * gf_w, gr_b - alpha * gf_b)
                        for (gr_w, gr_b), (gf_w, gf_b) in zip(g_r, g_f)]
            lr = cosine_lr(step, total_steps, cfg.base_lr)
            opt.step(model, combined, lr, cfg.weight_decay)
            step += 1
        if request.epoch_callback is not None:
            request.epoch_callback(epoch, model)
    return model


UNLEARN_METHODS = {
    "natmu": unlearn_natmu,
    "amnesiac": unlearn_amnesiac,
    "badteacher": unlearn_badteacher,
    "neggrad": unlearn_neggrad_plus,
}

METHOD_NAMES = ("retrain",) + tuple(UNLEARN_METHODS)


def unlearning_dataset(method: str, request: UnlearnRequest) -> Dataset | None:
    """The relabeled instances a method fine-tunes on, for naturalness
    evaluation; None for methods that never relabel."""
    if method == "natmu":
        return natmu_finetune_set(request).unlearning_subset()
    if method == "amnesiac":
        return amnesiac_relabeled(request)
    if method == "badteacher":
        return badteacher_targets(request)[1]
    return None
