"""
Defense-side training: iterative adversarial training, adversarial logit pairing,
and open-world training with background classes.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .attacks import AttackConfig, PerturbationConstraint, project
from .autodiff import Tensor
from .datasets import LabeledDataset, UnlabeledDataset
from .models import (Classifier, TrainConfig, TrainReport, batch_accuracy, check_labels, confidences,
                     dataset_loss, fit, predict_batch)
from .utils import BenchError, derive_seed

logger = logging.getLogger(__name__)

INNER_STEPS = 10


class TrainingError(BenchError):
    pass


def default_inner_attack(constraint: PerturbationConstraint, steps: int = INNER_STEPS) -> AttackConfig:
    """Inner PGD with ``steps`` iterations of size 2.5 * eps / steps."""
    step = 2.5 * constraint.epsilon / steps if constraint.epsilon > 0 else None
    return AttackConfig(constraint=constraint, max_iters=steps, step_size=step)


@dataclass
class BackgroundConfig:
    ood_sources: List[UnlabeledDataset] = field(default_factory=list)
    samples_per_source: int = 5000
    one_class_per_source: bool = True
    mix_alpha: float = 0.5

    def __post_init__(self):
        if self.samples_per_source < 1:
            raise ValueError(f"samples_per_source must be >= 1, got {self.samples_per_source}")
        if not 0 <= self.mix_alpha <= 1:
            raise ValueError(f"mix_alpha must lie in [0, 1], got {self.mix_alpha}")

    @property
    def num_background(self) -> int:
        if not self.ood_sources:
            return 0
        return len(self.ood_sources) if self.one_class_per_source else 1


@dataclass
class RobustTrainConfig:
    alpha: float = 0.5
    inner_attack: AttackConfig = field(default_factory=lambda: default_inner_attack(PerturbationConstraint()))
    base: TrainConfig = field(default_factory=TrainConfig)
    alp_weight: float = 0.0
    background: BackgroundConfig = field(default_factory=BackgroundConfig)

    def __post_init__(self):
        if not 0 <= self.alpha <= 1:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.alp_weight < 0:
            raise ValueError(f"alp_weight must be non-negative, got {self.alp_weight}")


def inner_maximize(model: Classifier, images: np.ndarray, labels: np.ndarray, attack: AttackConfig) -> np.ndarray:
    """
    Batched PGD that ascends cross-entropy at ``labels`` inside each example's ball.

    Parameters enter as constants, so the batch sees one frozen snapshot.
    """
    constraint = attack.constraint
    x0 = np.asarray(images, dtype=np.float64)
    if constraint.epsilon == 0:
        return x0.copy()
    x = x0.copy()
    for _ in range(attack.max_iters):
        t = Tensor(x, requires_grad=True)
        grad = ad.backward(ad.cross_entropy(model.forward(t), labels))[t]
        if constraint.norm == 'linf':
            x = np.clip(np.clip(x + attack.step_size * np.sign(grad), x0 - constraint.epsilon,
                                x0 + constraint.epsilon), 0.0, 1.0)
            continue
        flat = grad.reshape(len(x), -1)
        norms = np.linalg.norm(flat, axis=1)
        unit = np.where(norms[:, None] > 0, flat / np.where(norms > 0, norms, 1.0)[:, None], 0.0)
        moved = x + attack.step_size * unit.reshape(x.shape)
        x = np.stack([project(moved[i], x0[i], constraint) for i in range(len(x))])
    return x


def _robust_terms(model: Classifier, x: np.ndarray, y: np.ndarray, cfg: RobustTrainConfig,
                  need_clean_logits: bool = False) -> Tuple[Tensor, Optional[Tensor], Optional[Tensor]]:
    """alpha * CE(x, y) + (1 - alpha) * CE(x_adv, y); zero-weight terms are left out."""
    z_clean = z_adv = None
    terms = []
    if cfg.alpha > 0 or need_clean_logits:
        z_clean = model.forward(Tensor(x), train=True)
    if cfg.alpha > 0:
        terms.append(ad.scale(ad.cross_entropy(z_clean, y), cfg.alpha))
    if cfg.alpha < 1 or need_clean_logits:
        x_adv = inner_maximize(model, x, y, cfg.inner_attack)
        z_adv = model.forward(Tensor(x_adv), train=True)
    if cfg.alpha < 1:
        terms.append(ad.scale(ad.cross_entropy(z_adv, y), 1.0 - cfg.alpha))
    loss = terms[0]
    for term in terms[1:]:
        loss = ad.add(loss, term)
    return loss, z_clean, z_adv


def pairing_term(z_clean: Tensor, z_adv: Tensor) -> Tensor:
    """Batch mean of ||phi(x) - phi(x_adv)||_2^2."""
    return ad.scale(ad.l2_norm_sq(ad.sub(z_clean, z_adv)), 1.0 / z_clean.shape[0])


def _report(model: Classifier, images: np.ndarray, labels: np.ndarray, initial: float,
            history: List[Dict[str, float]], extra: Tuple[str, ...] = ()) -> TrainReport:
    report = TrainReport(
        initial_loss=initial,
        final_loss=dataset_loss(model, images, labels),
        loss_curve=[h['loss'] for h in history],
        accuracy_curve=[100.0 * h['accuracy'] for h in history],
    )
    for key in extra:
        report.extra_curves[key] = [h[key] for h in history]
    return report


def adversarial_train(model: Classifier, data: LabeledDataset, cfg: RobustTrainConfig,
                      progress_callback: Optional[Callable[[str], None]] = None) -> TrainReport:
    """
    Minimise alpha * CE(x, y) + (1 - alpha) * CE(x_adv, y) with x_adv from inner PGD.

    With alpha = 1 the updates equal ``train_classifier`` under the same seed.
    """
    return _train_pairs(model, data, cfg, 0.0, progress_callback)


def alp_train(model: Classifier, data: LabeledDataset, cfg: RobustTrainConfig,
              progress_callback: Optional[Callable[[str], None]] = None) -> TrainReport:
    """Adversarial training plus alp_weight * ||phi(x) - phi(x_adv)||^2 averaged per batch."""
    return _train_pairs(model, data, cfg, cfg.alp_weight, progress_callback)


def _train_pairs(model: Classifier, data: LabeledDataset, cfg: RobustTrainConfig, alp_weight: float,
                 progress_callback: Optional[Callable[[str], None]]) -> TrainReport:
    images, labels = data.images, data.labels
    check_labels(model, labels)
    initial = dataset_loss(model, images, labels)
    use_pairing = alp_weight > 0

    def batch_loss(idx):
        x, y = images[idx], labels[idx]
        loss, z_clean, z_adv = _robust_terms(model, x, y, cfg, need_clean_logits=use_pairing)
        metrics = {'accuracy': batch_accuracy((z_clean if z_clean is not None else z_adv).data, y)}
        if use_pairing:
            pairing = pairing_term(z_clean, z_adv)
            loss = ad.add(loss, ad.scale(pairing, alp_weight))
            metrics['pairing'] = pairing.item()
        return loss, metrics

    history = fit(model, len(images), cfg.base, batch_loss, progress_callback)
    return _report(model, images, labels, initial, history, ('pairing',) if use_pairing else ())


def background_pool(cfg: BackgroundConfig, num_in_classes: int, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    OOD training pool: the first ``samples_per_source`` items of each source under a seeded
    shuffle, labelled C, C + 1, ... in source order (all C with a single shared class).
    """
    images, labels = [], []
    for j, source in enumerate(cfg.ood_sources):
        if len(source) == 0:
            raise TrainingError(f"OOD source '{source.source_name}' is empty")
        chosen = source.take(cfg.samples_per_source, seed=derive_seed(seed, 'background', j))
        images.append(chosen.images)
        labels.append(np.full(len(chosen), num_in_classes + (j if cfg.one_class_per_source else 0)))
    return np.concatenate(images), np.concatenate(labels).astype(np.int64)


def background_class_train(model: Classifier, in_data: LabeledDataset, cfg: RobustTrainConfig,
                           progress_callback: Optional[Callable[[str], None]] = None) -> TrainReport:
    """
    Open-world robust training:
    mix_alpha * robust_loss(x_in, y) + (1 - mix_alpha) * robust_loss(x_ood, y_b).

    Raises:
        TrainingError: If the model's output count is not C plus the number of background classes
    """
    bg = cfg.background
    num_in = len(in_data.label_names)
    expected = num_in + bg.num_background
    if model.num_classes != expected:
        raise TrainingError(f"Model has {model.num_classes} outputs, expected {num_in} in-distribution "
                            f"+ {bg.num_background} background = {expected}")
    if bg.num_background == 0:
        return adversarial_train(model, in_data, cfg, progress_callback)

    pool_images, pool_labels = background_pool(bg, num_in, cfg.base.seed)
    ood_rng = np.random.default_rng(derive_seed(cfg.base.seed, 'background-batches'))
    queue: List[int] = []
    images, labels = in_data.images, in_data.labels
    check_labels(model, labels)
    initial = dataset_loss(model, images, labels)
    logger.info("Background training with %d OOD samples over %d background classes",
                len(pool_images), bg.num_background)

    def next_ood(count: int) -> np.ndarray:
        while len(queue) < count:
            queue.extend(ood_rng.permutation(len(pool_images)).tolist())
        picked = np.array(queue[:count], dtype=np.int64)
        del queue[:count]
        return picked

    def batch_loss(idx):
        x, y = images[idx], labels[idx]
        loss_in, z_in, z_in_adv = _robust_terms(model, x, y, cfg)
        ood_idx = next_ood(len(idx))
        loss_ood, _, _ = _robust_terms(model, pool_images[ood_idx], pool_labels[ood_idx], cfg)
        loss = ad.add(ad.scale(loss_in, bg.mix_alpha), ad.scale(loss_ood, 1.0 - bg.mix_alpha))
        z = z_in if z_in is not None else z_in_adv
        return loss, {'accuracy': batch_accuracy(z.data, y)}

    history = fit(model, len(images), cfg.base, batch_loss, progress_callback)
    return _report(model, images, labels, initial, history)


def ood_rejection_rate(model: Classifier, ood_data: UnlabeledDataset,
                       background_indices: Optional[List[int]] = None) -> float:
    """Percentage of OOD inputs predicted as a background class; always 0 without background classes."""
    indices = model.background_indices if background_indices is None else background_indices
    if not indices or len(ood_data) == 0:
        return 0.0
    classes, _ = predict_batch(model, ood_data.images)
    return 100.0 * float(np.mean(np.isin(classes, indices)))


def restricted_confidences(model: Classifier, images: np.ndarray) -> np.ndarray:
    """g restricted to the in-distribution classes and renormalised to sum to 1."""
    probs = confidences(model, images)
    head = probs[..., :model.num_in_classes]
    return head / head.sum(axis=-1, keepdims=True)
