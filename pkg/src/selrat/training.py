"""Two-stage training: pretrain the teacher on full text, then alternate
classifier and generator steps per batch on the matching-augmented
objectives. All randomness is derived from the config seed, so repeated
runs are bit-identical.
"""
from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Corpus, batch_iterator
from .losses import (LossWeights, classifier_objective, generator_objective,
                     mean_classification_loss)
from .model import (ClassifierParams, GeneratorParams, Models, ModelConfig,
                    TeacherParams, init_classifier, init_models, teacher_forward)


class NonFiniteLossError(RuntimeError):
    """A gradient or loss stopped being finite; names the offending parameter."""


@dataclass
class TrainConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    learning_rate: float = 1e-3
    # the generator usually wants a smaller step than the classifier: the
    # classifier must win the early race against the sparsity penalty, or
    # masks collapse to empty before any class signal exists
    generator_learning_rate: float | None = None
    optimizer: str = "adam"  # or "sgd"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    mask_mode: str = "stochastic"  # or "threshold"
    label_source: str = "none"  # ground_truth | teacher_predicted | none
    matching: str = "cmd"  # cmd | mmd | coral
    mmd_bandwidth: float = 1.0
    target_sparsity: float | None = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.generator_learning_rate is not None and self.generator_learning_rate <= 0:
            raise ValueError("generator_learning_rate must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.mask_mode not in ("stochastic", "threshold"):
            raise ValueError(f"unknown mask_mode {self.mask_mode!r}")
        if self.label_source not in ("ground_truth", "teacher_predicted", "none"):
            raise ValueError(f"unknown label_source {self.label_source!r}")
        if self.weights.feature_match > 0 and self.batch_size < 2:
            raise ValueError("feature matching needs batch_size >= 2")
        if self.target_sparsity is not None and not 0 < self.target_sparsity < 1:
            raise ValueError("target_sparsity must lie in (0, 1)")


@dataclass
class EpochRecord:
    epoch: int
    l_cls: float
    omega: float = 0.0
    l_fm: float = 0.0
    l_om: float = 0.0
    sparsity: float = 0.0
    val_f1: float | None = None
    val_accuracy: float | None = None

    def to_json(self) -> str:
        rec = {k: v for k, v in self.__dict__.items() if v is not None}
        return json.dumps(rec, sort_keys=True)


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    wall_clock_seconds: float = 0.0  # informational; never serialized

    def write(self, path: str | Path) -> None:
        # timing is excluded so reruns with the same seed are byte-identical
        with open(path, "w", encoding="utf-8") as f:
            for rec in self.epochs:
                f.write(rec.to_json() + "\n")


# ---------------------------------------------------------------------------
# optimizers


class Optimizer:
    """SGD or Adam over a named parameter dict; state lives per parameter."""

    def __init__(self, params: dict[str, Tensor], config: TrainConfig):
        self.params = params
        self.config = config
        self.state = {name: {"m": np.zeros_like(t.data), "v": np.zeros_like(t.data)}
                      for name, t in params.items()}
        self.t = 0

    def step(self) -> None:
        cfg = self.config
        self.t += 1
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise NonFiniteLossError(f"non-finite gradient in parameter {name!r}")
            if cfg.optimizer == "sgd":
                p.data -= cfg.learning_rate * g
                continue
            s = self.state[name]
            s["m"] = cfg.adam_beta1 * s["m"] + (1 - cfg.adam_beta1) * g
            s["v"] = cfg.adam_beta2 * s["v"] + (1 - cfg.adam_beta2) * g * g
            m_hat = s["m"] / (1 - cfg.adam_beta1 ** self.t)
            v_hat = s["v"] / (1 - cfg.adam_beta2 ** self.t)
            p.data -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def optimizer_step(params: dict[str, Tensor], config: TrainConfig,
                   optimizer: Optimizer | None = None) -> Optimizer:
    """Apply one update from the gradients currently stored on ``params``."""
    opt = optimizer if optimizer is not None else Optimizer(params, config)
    opt.step()
    return opt


# ---------------------------------------------------------------------------
# stage one: teacher pretraining


def pretrain_teacher(corpus: Corpus, config: TrainConfig, model_cfg: ModelConfig,
                     ) -> tuple[TeacherParams, TrainReport]:
    """Train a classifier on full text with plain cross entropy."""
    if len(corpus) == 0:
        raise ValueError("cannot pretrain on an empty corpus")
    start = time.perf_counter()
    rng = np.random.default_rng([config.seed, 2])
    teacher = init_classifier(model_cfg, rng)
    opt = Optimizer(teacher.named(), config)
    report = TrainReport()
    for epoch in range(config.epochs):
        losses = []
        for batch in batch_iterator(corpus, config.batch_size, config.seed, epoch):
            probs = teacher_forward(batch, teacher)
            loss = mean_classification_loss(probs, batch.labels)
            if not np.isfinite(loss.data):
                raise NonFiniteLossError("teacher loss became non-finite")
            opt.zero_grad()
            ad.backward(loss)
            teacher.embedding.freeze_padding_grad()
            opt.step()
            losses.append(loss.item())
        report.epochs.append(EpochRecord(epoch=epoch, l_cls=float(np.mean(losses))))
    report.wall_clock_seconds = time.perf_counter() - start
    return teacher, report


# ---------------------------------------------------------------------------
# stage two: alternating joint training


def train_joint(corpus: Corpus, teacher: TeacherParams | None, config: TrainConfig,
                model_cfg: ModelConfig, val_corpus: Corpus | None = None,
                ) -> tuple[GeneratorParams, ClassifierParams, TrainReport]:
    """Alternate classifier and generator updates batch by batch.

    The teacher is read-only here: it supplies distillation targets and,
    when configured, predicted labels for generator conditioning.
    """
    if config.weights.output_match > 0 and teacher is None:
        raise ValueError("output matching requires a pretrained teacher")
    if config.label_source == "teacher_predicted" and teacher is None:
        raise ValueError("label_source=teacher_predicted requires a teacher")
    start = time.perf_counter()
    rng = np.random.default_rng([config.seed, 3])
    models = init_models(model_cfg, rng, with_teacher=False)
    models.teacher = teacher
    gen_config = config if config.generator_learning_rate is None else \
        dataclasses.replace(config, learning_rate=config.generator_learning_rate)
    gen_opt = Optimizer(models.generator.named(), gen_config)
    clf_opt = Optimizer(models.classifier.named(), config)
    stochastic = config.mask_mode == "stochastic"
    report = TrainReport()

    for epoch in range(config.epochs):
        sums = {"l_cls": 0.0, "omega": 0.0, "l_fm": 0.0, "l_om": 0.0, "sparsity": 0.0}
        steps = 0
        for step, batch in enumerate(
                batch_iterator(corpus, config.batch_size, config.seed, epoch)):
            mask_seed = [config.seed, epoch, step, 11]
            weights = config.weights
            if len(batch) < 2 and weights.feature_match > 0:
                # moments of a lone sample are degenerate; drop the term
                weights = dataclasses.replace(weights, feature_match=0.0)

            loss_c, parts_c = classifier_objective(
                batch, models, weights, label_source=config.label_source,
                stochastic=stochastic, mask_seed=mask_seed,
                matching=config.matching, mmd_bandwidth=config.mmd_bandwidth)
            if not np.isfinite(loss_c.data):
                raise NonFiniteLossError("classifier objective became non-finite")
            clf_opt.zero_grad()
            ad.backward(loss_c)
            models.classifier.embedding.freeze_padding_grad()
            clf_opt.step()

            loss_g, parts_g = generator_objective(
                batch, models, weights, label_source=config.label_source,
                stochastic=stochastic, mask_seed=mask_seed)
            if not np.isfinite(loss_g.data):
                raise NonFiniteLossError("generator objective became non-finite")
            gen_opt.zero_grad()
            ad.backward(loss_g)
            models.generator.embedding.freeze_padding_grad()
            gen_opt.step()

            sums["l_cls"] += parts_g["l_cls"]
            sums["omega"] += parts_g["omega"]
            sums["l_fm"] += parts_c["l_fm"]
            sums["l_om"] += parts_c["l_om"]
            sums["sparsity"] += parts_g["sparsity"]
            steps += 1

        rec = EpochRecord(epoch=epoch, l_cls=sums["l_cls"] / steps,
                          omega=sums["omega"] / steps, l_fm=sums["l_fm"] / steps,
                          l_om=sums["l_om"] / steps, sparsity=sums["sparsity"] / steps)
        if val_corpus is not None:
            from .evaluation import EvalConfig, evaluate_run
            metrics, _ = evaluate_run(models.generator, models.classifier, teacher,
                                      val_corpus,
                                      EvalConfig(label_source=config.label_source,
                                                 batch_size=config.batch_size))
            if metrics.f1 is not None:
                rec.val_f1 = metrics.f1
            rec.val_accuracy = metrics.classification_accuracy
        report.epochs.append(rec)

    report.wall_clock_seconds = time.perf_counter() - start
    return models.generator, models.classifier, report
