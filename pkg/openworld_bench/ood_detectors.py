"""
Out-of-distribution detectors: max-softmax baseline, ODIN, and confidence-calibrated training.

An input is flagged as OOD when its score falls strictly below the calibrated threshold.
"""

import logging
import math
from dataclasses import asdict, dataclass
from itertools import product
from typing import Any, Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .datasets import LabeledDataset, UnlabeledDataset
from .metrics import auroc
from .models import (Classifier, TrainConfig, TrainReport, as_batch, batch_accuracy, check_labels,
                     dataset_loss, fit)
from .utils import BenchError, derive_seed

logger = logging.getLogger(__name__)

ODIN_TEMPERATURES = (1.0, 10.0, 100.0, 1000.0)
ODIN_EPSILONS = (0.0, 0.0014, 0.0028, 0.0056)


class DetectorError(BenchError):
    """Raised for invalid detector configuration or calibration input."""
    pass


@dataclass(frozen=True)
class DetectorVerdict:
    """
    Score, threshold and decision of one detector on one input.

    ``polarity`` is ``ood`` (flag when score < threshold) or ``adversarial``
    (flag when score > threshold).
    """
    score: float
    threshold: float
    polarity: str = 'ood'

    @property
    def flagged(self) -> bool:
        if self.polarity == 'ood':
            return self.score < self.threshold
        return self.score > self.threshold

    @property
    def is_ood(self) -> bool:
        return self.polarity == 'ood' and self.flagged

    @property
    def is_adversarial(self) -> bool:
        return self.polarity == 'adversarial' and self.flagged


@dataclass(frozen=True)
class OdinConfig:
    temperature: float = 1000.0
    preprocess_epsilon: float = 0.0014

    def __post_init__(self):
        if self.temperature < 1:
            raise ValueError(f"ODIN temperature must be >= 1, got {self.temperature}")
        if self.preprocess_epsilon < 0:
            raise ValueError(f"ODIN epsilon must be non-negative, got {self.preprocess_epsilon}")


def _max_softmax(logit_data: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    return ad._softmax(logit_data / temperature).max(axis=-1)


def baseline_scores(model: Classifier, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """max_i softmax(phi(x))(i) for each image of a batch."""
    return odin_scores(model, images, OdinConfig(1.0, 0.0), batch_size)


def baseline_score(model: Classifier, x: np.ndarray) -> float:
    """
    Max-softmax confidence of a single input.

    Examples:
        Uniform logits over 10 classes score 0.1.
    """
    batch, _ = as_batch(model, x, 'baseline_score')
    return float(baseline_scores(model, batch.data)[0])


def odin_scores(model: Classifier, images: np.ndarray, cfg: OdinConfig, batch_size: int = 128) -> np.ndarray:
    """
    ODIN scores for a batch.

    x' = clamp(x + eps * sign(grad_x log max_i softmax(phi(x) / T)(i)), 0, 1), then
    score = max_i softmax(phi(x') / T)(i). With eps = 0 the preprocessing step is skipped.
    """
    batch, _ = as_batch(model, images, 'odin_scores')
    data = batch.data
    scores = []
    for start in range(0, len(data), batch_size):
        chunk = data[start:start + batch_size]
        if cfg.preprocess_epsilon > 0:
            x = Tensor(chunk, requires_grad=True)
            z = ad.scale(model.forward(x), 1.0 / cfg.temperature)
            objective = ad.sum(ad.reduce_max(ad.log_softmax(z)))
            grad = ad.backward(objective)[x]
            chunk = np.clip(chunk + cfg.preprocess_epsilon * np.sign(grad), 0.0, 1.0)
        scores.append(_max_softmax(model.forward(Tensor(chunk)).data, cfg.temperature))
    return np.concatenate(scores) if scores else np.zeros(0)


def odin_score(model: Classifier, x: np.ndarray, cfg: OdinConfig) -> float:
    batch, _ = as_batch(model, x, 'odin_score')
    return float(odin_scores(model, batch.data, cfg)[0])


def calibrate_threshold(scores_in: Sequence[float], target_tpr: float = 0.95) -> float:
    """
    Largest threshold keeping at least ``target_tpr`` of in-distribution scores at or above it.

    Examples:
        >>> calibrate_threshold([0.9, 0.8, 0.7, 0.6, 0.5], 0.8)
        0.6
    """
    scores = np.sort(np.asarray(scores_in, dtype=np.float64))[::-1]
    if scores.size == 0:
        raise DetectorError("Cannot calibrate a threshold on an empty score set")
    if not 0 < target_tpr <= 1:
        raise DetectorError(f"target_tpr must lie in (0, 1], got {target_tpr}")
    k = max(1, math.ceil(target_tpr * scores.size - 1e-9))
    return float(scores[k - 1])


@dataclass
class OodDetector:
    """Deployable OOD detector record: kind, ODIN settings and threshold."""
    kind: str = 'baseline'
    threshold: float = 0.0
    odin: Optional[OdinConfig] = None
    target_tpr: float = 0.95

    def __post_init__(self):
        if self.kind not in ('baseline', 'odin'):
            raise DetectorError(f"Unknown OOD detector kind '{self.kind}'")
        if self.kind == 'odin' and self.odin is None:
            self.odin = OdinConfig()

    @property
    def name(self) -> str:
        if self.kind == 'odin':
            return f"odin(T={self.odin.temperature:g},eps={self.odin.preprocess_epsilon:g})"
        return 'baseline'

    def scores(self, model: Classifier, images: np.ndarray) -> np.ndarray:
        if self.kind == 'odin':
            return odin_scores(model, images, self.odin)
        return baseline_scores(model, images)

    def calibrate(self, model: Classifier, benign_images: np.ndarray) -> float:
        self.threshold = calibrate_threshold(self.scores(model, benign_images), self.target_tpr)
        logger.info("Calibrated %s threshold %.6f at TPR %.2f", self.name, self.threshold, self.target_tpr)
        return self.threshold

    def verdicts(self, model: Classifier, images: np.ndarray):
        return [DetectorVerdict(float(s), self.threshold, 'ood') for s in self.scores(model, images)]

    def to_dict(self) -> Dict[str, Any]:
        record: Dict[str, Any] = {'kind': self.kind, 'threshold': self.threshold, 'target_tpr': self.target_tpr}
        if self.odin is not None:
            record.update(asdict(self.odin))
        return record

    @classmethod
    def from_dict(cls, record: Dict[str, Any]) -> 'OodDetector':
        odin = None
        if record.get('kind') == 'odin':
            odin = OdinConfig(record['temperature'], record['preprocess_epsilon'])
        return cls(record['kind'], record['threshold'], odin, record.get('target_tpr', 0.95))


def detect(model: Classifier, detector_kind: str, cfg: Optional[OdinConfig], threshold: float,
           x: np.ndarray) -> DetectorVerdict:
    """Verdict of a baseline or ODIN detector on a single input."""
    if detector_kind == 'odin':
        score = odin_score(model, x, cfg or OdinConfig())
    elif detector_kind == 'baseline':
        score = baseline_score(model, x)
    else:
        raise DetectorError(f"Unknown OOD detector kind '{detector_kind}'")
    return DetectorVerdict(score, threshold, 'ood')


def tune_odin(model: Classifier, in_val: np.ndarray, ood_val: np.ndarray,
              temperatures: Sequence[float] = ODIN_TEMPERATURES,
              epsilons: Sequence[float] = ODIN_EPSILONS) -> Tuple[OdinConfig, float]:
    """
    Grid search of (T, eps) maximising AUROC of in-distribution versus OOD validation data.

    Ties keep the first setting in grid order.
    """
    best: Optional[Tuple[OdinConfig, float]] = None
    for temperature, epsilon in product(temperatures, epsilons):
        cfg = OdinConfig(temperature, epsilon)
        score = auroc(odin_scores(model, in_val, cfg), odin_scores(model, ood_val, cfg))
        logger.debug("ODIN T=%g eps=%g AUROC=%.4f", temperature, epsilon, score)
        if best is None or score > best[1]:
            best = (cfg, score)
    logger.info("ODIN tuned to T=%g eps=%g (AUROC %.4f)", best[0].temperature, best[0].preprocess_epsilon, best[1])
    return best


def kl_to_uniform(logit_batch: Tensor) -> Tensor:
    """Mean over rows of KL(U || softmax(z)) = -log K - mean_i log softmax(z)_i."""
    k = logit_batch.shape[-1]
    return ad.sub(ad.mean(ad.scale(ad.log_softmax(logit_batch), -1.0)), math.log(k))


def train_confidence_calibrated(model: Classifier, in_data: LabeledDataset, ood_proxy: UnlabeledDataset,
                                beta: float = 1.0, cfg: Optional[TrainConfig] = None,
                                progress_callback: Optional[Callable[[str], None]] = None) -> TrainReport:
    """
    Minimise cross-entropy on ``in_data`` plus beta * KL(uniform || g(x_ood)) on proxy batches.

    Proxy batches are drawn with their own seeded generator so the in-distribution
    batch order matches ``train_classifier`` for the same seed; with beta = 0 the
    proxy term is left out entirely and updates are identical.
    """
    cfg = cfg or TrainConfig()
    if beta < 0:
        raise DetectorError(f"beta must be non-negative, got {beta}")
    if len(ood_proxy) == 0:
        raise DetectorError("OOD proxy dataset is empty")
    images, labels = in_data.images, in_data.labels
    check_labels(model, labels)
    proxy_rng = np.random.default_rng(derive_seed(cfg.seed, 'ood-proxy'))
    initial = dataset_loss(model, images, labels)

    def batch_loss(idx):
        z = model.forward(Tensor(images[idx]), train=True)
        loss = ad.cross_entropy(z, labels[idx])
        metrics = {'accuracy': batch_accuracy(z.data, labels[idx])}
        if beta > 0:
            pick = proxy_rng.choice(len(ood_proxy), size=len(idx), replace=len(ood_proxy) < len(idx))
            kl = kl_to_uniform(model.forward(Tensor(ood_proxy.images[pick]), train=True))
            loss = ad.add(loss, ad.scale(kl, beta))
            metrics['kl'] = kl.item()
        return loss, metrics

    history = fit(model, len(images), cfg, batch_loss, progress_callback)
    report = TrainReport(
        initial_loss=initial,
        final_loss=dataset_loss(model, images, labels),
        loss_curve=[h['loss'] for h in history],
        accuracy_curve=[100.0 * h['accuracy'] for h in history],
    )
    if beta > 0:
        report.extra_curves['kl'] = [h['kl'] for h in history]
    return report
