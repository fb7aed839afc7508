"""Loss terms and the two alternating objectives.

The classifier objective combines rationale cross entropy with two
distribution-matching regularizers: a central moment discrepancy between
rationale features and full-text features, and a distillation cross entropy
against a pretrained teacher. Neither matching loss sends gradient to the
generator; masks are detached on entry. The generator objective combines
the same cross entropy (classifier held constant) with a sparsity +
continuity regularizer on the mask, trained through the straight-through
estimator.
"""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Batch
from .model import (Models, classifier_forward, generator_forward,
                    teacher_forward, teacher_predicted_labels)


@dataclass
class LossWeights:
    """Coefficients of the four loss terms plus the moment order.

    sparsity/continuity weight the mask regularizer; feature_match weights
    the moment discrepancy; output_match weights the distillation term.
    ``cmd_term_weights``, when given, scales the mean term and each central
    moment term of the discrepancy (length moment_order).
    """

    sparsity: float = 0.0
    continuity: float = 0.0
    feature_match: float = 0.0
    output_match: float = 0.0
    moment_order: int = 5
    cmd_term_weights: tuple[float, ...] | None = None

    def __post_init__(self):
        for name in ("sparsity", "continuity", "feature_match", "output_match"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.moment_order < 2:
            raise ValueError("moment_order must be >= 2")
        if self.cmd_term_weights is not None and \
                len(self.cmd_term_weights) != self.moment_order:
            raise ValueError("cmd_term_weights must have one entry per term")


# ---------------------------------------------------------------------------
# per-example losses


def classification_loss(probs: Tensor, y: int) -> Tensor:
    """Cross entropy -log p(y) of a single class distribution."""
    if not 0 <= y < probs.shape[-1]:
        raise IndexError(f"label {y} out of range for {probs.shape[-1]} classes")
    onehot = np.zeros(probs.shape[-1])
    onehot[y] = 1.0
    return ad.neg(ad.sum(ad.mul(ad.log(probs), Tensor(onehot))))


def mean_classification_loss(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Mean -log p(y) over a batch; probs is (N, C), labels (N,)."""
    n, c = probs.shape
    if labels.min() < 0 or labels.max() >= c:
        raise IndexError(f"labels out of range for {c} classes")
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    return ad.neg(ad.mean(ad.sum(ad.mul(ad.log(probs), Tensor(onehot)), axis=-1)))


def rationale_regularizer(z, lam1: float, lam2: float, valid=None) -> Tensor:
    """Sparsity + continuity penalty of one mask:
    lam1 * sum_i z_i + lam2 * sum_{i>=2} |z_i - z_{i-1}|, real tokens only."""
    z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=np.float64))
    v = np.ones(z.shape) if valid is None else np.asarray(valid, dtype=np.float64)
    l1 = ad.sum(ad.mul(z, Tensor(v)))
    length = z.shape[-1]
    if length < 2:
        return ad.mul(l1, lam1)
    cur = ad.narrow(z, -1, 1, length - 1)
    prev = ad.narrow(z, -1, 0, length - 1)
    pair = v[..., 1:] * v[..., :-1]  # both positions must be real tokens
    trans = ad.sum(ad.mul(ad.absolute(ad.sub(cur, prev)), Tensor(pair)))
    return ad.mul(l1, lam1) + ad.mul(trans, lam2)


def mean_rationale_regularizer(z: Tensor, valid: np.ndarray,
                               lam1: float, lam2: float) -> Tensor:
    """Mean of the mask regularizer over a padded (N, L) batch."""
    l1 = ad.sum(ad.mul(z, Tensor(valid)), axis=-1)
    length = z.shape[-1]
    if length >= 2:
        cur = ad.narrow(z, -1, 1, length - 1)
        prev = ad.narrow(z, -1, 0, length - 1)
        pair = valid[..., 1:] * valid[..., :-1]
        trans = ad.sum(ad.mul(ad.absolute(ad.sub(cur, prev)), Tensor(pair)), axis=-1)
        per_example = ad.mul(l1, lam1) + ad.mul(trans, lam2)
    else:
        per_example = ad.mul(l1, lam1)
    return ad.mean(per_example)


def distillation_loss(p_teacher: Tensor, p_student: Tensor) -> Tensor:
    """Cross entropy sum_y -p_t(y) log p_s(y); the teacher side is detached."""
    if p_teacher.shape != p_student.shape:
        raise ad.ShapeError("distillation_loss", p_teacher.shape, p_student.shape)
    pt = ad.stop_gradient(p_teacher)
    return ad.neg(ad.sum(ad.mul(pt, ad.log(p_student))))


def mean_distillation_loss(p_teacher: Tensor, p_student: Tensor) -> Tensor:
    if p_teacher.shape != p_student.shape:
        raise ad.ShapeError("distillation_loss", p_teacher.shape, p_student.shape)
    pt = ad.stop_gradient(p_teacher)
    return ad.neg(ad.mean(ad.sum(ad.mul(pt, ad.log(p_student)), axis=-1)))


# ---------------------------------------------------------------------------
# distribution matching between feature batches


def _check_feature_batches(op: str, fx: Tensor, fz: Tensor,
                           bounded: bool = False, min_n: int = 1) -> None:
    if fx.ndim != 2 or fx.shape != fz.shape:
        raise ad.ShapeError(op, fx.shape, fz.shape)
    if fx.shape[0] < min_n:
        raise ValueError(f"{op}: needs at least {min_n} samples, got {fx.shape[0]}")
    if bounded:
        for name, f in (("first", fx), ("second", fz)):
            if f.data.min() < 0.0 or f.data.max() > 1.0:
                raise ValueError(f"{op}: {name} batch has entries outside [0, 1]")


def cmd_loss(fx: Tensor, fz: Tensor, moment_order: int = 5,
             term_weights: tuple[float, ...] | None = None) -> Tensor:
    """Central moment discrepancy between two (N, d) feature batches in [0, 1].

    ||mean_x - mean_z||_2 plus the norms of the differences of elementwise
    central moments of orders 2..moment_order, each optionally scaled by
    ``term_weights``.
    """
    _check_feature_batches("cmd_loss", fx, fz, bounded=True, min_n=2)
    if term_weights is None:
        term_weights = (1.0,) * moment_order
    if len(term_weights) != moment_order:
        raise ValueError("term_weights must have one entry per term")
    ex = ad.mean(fx, axis=0)
    ez = ad.mean(fz, axis=0)
    total = ad.mul(ad.l2_norm(ad.sub(ex, ez)), term_weights[0])
    dx = ad.sub(fx, ex)
    dz = ad.sub(fz, ez)
    for k in range(2, moment_order + 1):
        ck_x = ad.mean(ad.power(dx, k), axis=0)
        ck_z = ad.mean(ad.power(dz, k), axis=0)
        total = total + ad.mul(ad.l2_norm(ad.sub(ck_x, ck_z)), term_weights[k - 1])
    return total


def mmd_loss(fx: Tensor, fz: Tensor, bandwidth: float = 1.0) -> Tensor:
    """Biased squared maximum mean discrepancy with a Gaussian kernel
    exp(-||a-b||^2 / (2 * bandwidth^2))."""
    if bandwidth <= 0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth}")
    if fx.ndim != 2 or fz.ndim != 2 or fx.shape[1] != fz.shape[1]:
        raise ad.ShapeError("mmd_loss", fx.shape, fz.shape)
    scale = -0.5 / (bandwidth * bandwidth)

    def kernel_mean(a: Tensor, b: Tensor) -> Tensor:
        an = ad.reshape(ad.sum(ad.power(a, 2), axis=1), (a.shape[0], 1))
        bn = ad.reshape(ad.sum(ad.power(b, 2), axis=1), (1, b.shape[0]))
        sq = an + bn - ad.mul(ad.matmul(a, ad.transpose(b)), 2.0)
        return ad.mean(ad.exp(ad.mul(sq, scale)))

    return kernel_mean(fx, fx) + kernel_mean(fz, fz) - ad.mul(kernel_mean(fx, fz), 2.0)


def coral_loss(fx: Tensor, fz: Tensor) -> Tensor:
    """Squared Frobenius distance between batch covariances, over 4 d^2."""
    _check_feature_batches("coral_loss", fx, fz, min_n=2)
    n, d = fx.shape

    def cov(f: Tensor) -> Tensor:
        centered = ad.sub(f, ad.mean(f, axis=0))
        return ad.mul(ad.matmul(ad.transpose(centered), centered), 1.0 / (n - 1))

    diff = ad.sub(cov(fx), cov(fz))
    return ad.mul(ad.sum(ad.power(diff, 2)), 1.0 / (4.0 * d * d))


MATCHING_LOSSES = {"cmd": cmd_loss, "mmd": mmd_loss, "coral": coral_loss}


# ---------------------------------------------------------------------------
# alternating objectives


@contextmanager
def frozen(params):
    """Treat a parameter set as constants inside the block."""
    tensors = list(params.named().values())
    saved = [t.requires_grad for t in tensors]
    for t in tensors:
        t.requires_grad = False
    try:
        yield
    finally:
        for t, s in zip(tensors, saved):
            t.requires_grad = s


def resolve_condition_labels(batch: Batch, models: Models,
                             label_source: str) -> np.ndarray | None:
    """Labels fed to a class-conditioned generator, per configuration."""
    if label_source == "none":
        return None
    if label_source == "ground_truth":
        return batch.labels
    if label_source == "teacher_predicted":
        if models.teacher is None:
            raise ValueError("label_source=teacher_predicted requires a teacher")
        return teacher_predicted_labels(batch, models.teacher)
    raise ValueError(f"unknown label_source {label_source!r}")


def _generator_mask(batch: Batch, models: Models, *, label_source: str,
                    stochastic: bool, mask_seed, threshold: float = 0.5,
                    ) -> tuple[Tensor, Tensor]:
    labels = resolve_condition_labels(batch, models, label_source)
    rng = np.random.default_rng(mask_seed) if stochastic else None
    return generator_forward(batch, models.generator, labels=labels,
                             stochastic=stochastic, threshold=threshold, rng=rng)


def classifier_objective(batch: Batch, models: Models, weights: LossWeights, *,
                         label_source: str = "none", stochastic: bool = False,
                         mask_seed=0, matching: str = "cmd",
                         mmd_bandwidth: float = 1.0,
                         ) -> tuple[Tensor, dict[str, float]]:
    """Rationale cross entropy + feature matching + output matching.

    The generator's masks are detached on entry, so backward leaves every
    generator parameter untouched; the teacher contributes targets only.
    """
    if weights.feature_match > 0 and len(batch) < 2:
        raise ValueError("feature matching needs a batch of at least 2 examples")
    if weights.output_match > 0 and models.teacher is None:
        raise ValueError("output matching requires a pretrained teacher")

    with ad.no_grad():
        _, z_raw = _generator_mask(batch, models, label_source=label_source,
                                   stochastic=stochastic, mask_seed=mask_seed)
    z = ad.stop_gradient(z_raw)
    feat_z, probs_z = classifier_forward(batch, z, models.classifier)
    l_cls = mean_classification_loss(probs_z, batch.labels)
    total = l_cls
    parts = {"l_cls": l_cls.item(), "l_fm": 0.0, "l_om": 0.0,
             "sparsity": float((z.data * batch.valid).sum() / batch.valid.sum())}

    if weights.feature_match > 0:
        feat_x, _ = classifier_forward(batch, np.ones_like(batch.valid),
                                       models.classifier)
        if matching == "cmd":
            l_fm = cmd_loss(feat_x, feat_z, weights.moment_order,
                            weights.cmd_term_weights)
        elif matching == "mmd":
            l_fm = mmd_loss(feat_x, feat_z, mmd_bandwidth)
        elif matching == "coral":
            l_fm = coral_loss(feat_x, feat_z)
        else:
            raise ValueError(f"unknown matching loss {matching!r}")
        parts["l_fm"] = l_fm.item()
        total = total + ad.mul(l_fm, weights.feature_match)

    if weights.output_match > 0:
        p_t = ad.stop_gradient(teacher_forward(batch, models.teacher))
        l_om = mean_distillation_loss(p_t, probs_z)
        parts["l_om"] = l_om.item()
        total = total + ad.mul(l_om, weights.output_match)

    return total, parts


def generator_objective(batch: Batch, models: Models, weights: LossWeights, *,
                        label_source: str = "none", stochastic: bool = False,
                        mask_seed=0) -> tuple[Tensor, dict[str, float]]:
    """Rationale cross entropy + mask regularizer, classifier held constant.

    Gradient reaches the generator through the straight-through estimator;
    the classifier's parameters receive none.
    """
    _, z = _generator_mask(batch, models, label_source=label_source,
                           stochastic=stochastic, mask_seed=mask_seed)
    with frozen(models.classifier):
        _, probs = classifier_forward(batch, z, models.classifier)
    l_cls = mean_classification_loss(probs, batch.labels)
    omega = mean_rationale_regularizer(z, batch.valid,
                                       weights.sparsity, weights.continuity)
    parts = {"l_cls": l_cls.item(), "omega": omega.item(),
             "sparsity": float((z.data * batch.valid).sum() / batch.valid.sum())}
    return l_cls + omega, parts
