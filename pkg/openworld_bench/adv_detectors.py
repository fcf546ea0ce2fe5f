"""
Adversarial-example detectors: feature squeezing and MagNet.

Both flag an input when its score rises strictly above a threshold calibrated
on benign in-distribution data only.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .autodiff import Tensor
from .datasets import LabeledDataset
from .models import Autoencoder, Classifier, TrainConfig, as_batch, confidences, fit
from .ood_detectors import DetectorError, DetectorVerdict
from .utils import derive_seed

logger = logging.getLogger(__name__)

SQUEEZERS = ('bit-depth', 'median', 'smoothing')
RECON_NORMS = ('l1', 'l2')

Squeezer = Callable[[np.ndarray], np.ndarray]


# --- squeezers ---

def bit_depth_reduce(x: np.ndarray, n: int) -> np.ndarray:
    """
    Quantise to ``n`` bits with half-up rounding: floor(x * (2^n - 1) + 0.5) / (2^n - 1).

    Examples:
        >>> bit_depth_reduce(np.array([0.4, 0.5, 0.6]), 1).tolist()
        [0.0, 1.0, 1.0]
    """
    if not 1 <= n <= 8:
        raise DetectorError(f"bit depth must lie in [1, 8], got {n}")
    levels = 2 ** n - 1
    return np.floor(np.asarray(x, dtype=np.float64) * levels + 0.5) / levels


def _spatial(x: np.ndarray, size: int) -> Tuple[int, ...]:
    return (1,) * (x.ndim - 2) + (size, size)


def median_filter(x: np.ndarray, k: int = 3) -> np.ndarray:
    """k x k median over the two trailing axes with reflect padding (edge pixels repeated)."""
    if k < 1 or k % 2 == 0:
        raise DetectorError(f"median kernel must be odd and >= 1, got {k}")
    x = np.asarray(x, dtype=np.float64)
    return ndimage.median_filter(x, size=_spatial(x, k), mode='reflect')


def gaussian_smooth(x: np.ndarray, sigma: float = 1.0) -> np.ndarray:
    """3 x 3 Gaussian blur (smoothing-simplified stand-in for non-local means)."""
    x = np.asarray(x, dtype=np.float64)
    sigmas = (0.0,) * (x.ndim - 2) + (sigma, sigma)
    # truncate=1/sigma keeps the kernel radius at one pixel
    return np.clip(ndimage.gaussian_filter(x, sigma=sigmas, mode='reflect', truncate=1.0 / sigma), 0.0, 1.0)


@dataclass(frozen=True)
class SqueezerConfig:
    bit_depth: int = 1
    median_kernel: int = 3
    enabled: Tuple[str, ...] = ('bit-depth', 'median')
    smoothing_sigma: float = 1.0

    def __post_init__(self):
        if not 1 <= self.bit_depth <= 8:
            raise ValueError(f"bit_depth must lie in [1, 8], got {self.bit_depth}")
        if self.median_kernel < 1 or self.median_kernel % 2 == 0:
            raise ValueError(f"median_kernel must be odd and >= 1, got {self.median_kernel}")
        unknown = set(self.enabled) - set(SQUEEZERS)
        if unknown or not self.enabled:
            raise ValueError(f"enabled squeezers must be a non-empty subset of {SQUEEZERS}, got {self.enabled}")

    def squeezers(self) -> List[Tuple[str, Squeezer]]:
        available = {
            'bit-depth': lambda x: bit_depth_reduce(x, self.bit_depth),
            'median': lambda x: median_filter(x, self.median_kernel),
            'smoothing': lambda x: gaussian_smooth(x, self.smoothing_sigma),
        }
        return [(name, available[name]) for name in SQUEEZERS if name in self.enabled]


def fs_scores(model: Classifier, images: np.ndarray, cfg: SqueezerConfig) -> np.ndarray:
    """Per-image max over squeezers of L1(g(x), g(squeeze(x))); bounded by 2."""
    batch, _ = as_batch(model, images, 'fs_scores')
    data = batch.data
    probs = confidences(model, data)
    score = np.zeros(len(data))
    for _, squeeze in cfg.squeezers():
        score = np.maximum(score, np.abs(probs - confidences(model, squeeze(data))).sum(axis=-1))
    return score


def fs_detect(model: Classifier, x: np.ndarray, cfg: SqueezerConfig, threshold: float) -> DetectorVerdict:
    batch, _ = as_batch(model, x, 'fs_detect')
    return DetectorVerdict(float(fs_scores(model, batch.data, cfg)[0]), threshold, 'adversarial')


def calibrate_benign_threshold(scores: Sequence[float], fpr: float = 0.05) -> float:
    """
    Smallest benign score order statistic leaving at most ``fpr`` of benign scores above it.

    Examples:
        >>> calibrate_benign_threshold([0.1, 0.2, 0.3, 0.4], 0.25)
        0.3
    """
    values = np.sort(np.asarray(scores, dtype=np.float64))
    if values.size == 0:
        raise DetectorError("Cannot calibrate a threshold on an empty score set")
    if not 0 <= fpr < 1:
        raise DetectorError(f"fpr must lie in [0, 1), got {fpr}")
    k = max(1, math.ceil((1.0 - fpr) * values.size - 1e-9))
    return float(values[k - 1])


@dataclass
class FeatureSqueezing:
    """Deployable feature-squeezing detector record."""
    config: SqueezerConfig = field(default_factory=SqueezerConfig)
    threshold: float = 0.0
    fpr_target: float = 0.05

    @property
    def name(self) -> str:
        return 'fs(' + '+'.join(self.config.enabled) + ')'

    def scores(self, model: Classifier, images: np.ndarray) -> np.ndarray:
        return fs_scores(model, images, self.config)

    def calibrate(self, model: Classifier, benign_images: np.ndarray) -> float:
        self.threshold = calibrate_benign_threshold(self.scores(model, benign_images), self.fpr_target)
        logger.info("Calibrated %s threshold %.6f at FPR %.2f", self.name, self.threshold, self.fpr_target)
        return self.threshold

    def verdicts(self, model: Classifier, images: np.ndarray) -> List[DetectorVerdict]:
        return [DetectorVerdict(float(s), self.threshold, 'adversarial') for s in self.scores(model, images)]

    def to_dict(self) -> Dict[str, Any]:
        return {'kind': 'feature-squeezing', 'threshold': self.threshold, 'fpr_target': self.fpr_target,
                'bit_depth': self.config.bit_depth, 'median_kernel': self.config.median_kernel,
                'enabled': list(self.config.enabled), 'smoothing': 'smoothing-simplified'}


# --- MagNet ---

@dataclass(frozen=True)
class MagnetConfig:
    recon_norm: str = 'l1'
    fpr_target: float = 0.05
    noise_level: float = 0.1

    def __post_init__(self):
        if self.recon_norm not in RECON_NORMS:
            raise ValueError(f"recon_norm must be one of {RECON_NORMS}, got '{self.recon_norm}'")
        if not 0 <= self.fpr_target < 1:
            raise ValueError(f"fpr_target must lie in [0, 1), got {self.fpr_target}")
        if self.noise_level < 0:
            raise ValueError(f"noise_level must be non-negative, got {self.noise_level}")


def _ae_apply(autoencoder: Autoencoder, t: Tensor) -> Tensor:
    batch, single = as_batch(autoencoder, t, 'autoencoder')
    out = ad.reshape(autoencoder.forward(batch), batch.shape)
    return ad.reshape(out, autoencoder.input_shape) if single else out


@dataclass
class MagNet:
    """Autoencoder detector and reformer."""
    autoencoder: Autoencoder
    config: MagnetConfig = field(default_factory=MagnetConfig)
    threshold: float = 0.0

    @property
    def name(self) -> str:
        return f"magnet({self.config.recon_norm})"

    def reconstruct(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        batch, single = as_batch(self.autoencoder, images, 'magnet')
        data = batch.data
        parts = [self.autoencoder.forward(Tensor(data[i:i + batch_size])).data.reshape(-1, *data.shape[1:])
                 for i in range(0, len(data), batch_size)]
        out = np.concatenate(parts) if parts else np.zeros_like(data)
        return out[0] if single else out

    def reform(self, images: np.ndarray) -> np.ndarray:
        return np.clip(self.reconstruct(images), 0.0, 1.0)

    def scores(self, images: np.ndarray) -> np.ndarray:
        """Reconstruction distance per image: mean |d| (l1) or mean d^2 (l2)."""
        batch, _ = as_batch(self.autoencoder, images, 'magnet')
        diff = (batch.data - self.reconstruct(batch.data)).reshape(len(batch.data), -1)
        if self.config.recon_norm == 'l1':
            return np.abs(diff).mean(axis=-1)
        return (diff * diff).mean(axis=-1)

    def score_tensor(self, t: Tensor) -> Tensor:
        """Differentiable reconstruction distance of a single input."""
        diff = ad.reshape(ad.sub(t, _ae_apply(self.autoencoder, t)), (-1,))
        total = ad.l1_norm(diff) if self.config.recon_norm == 'l1' else ad.l2_norm_sq(diff)
        return ad.scale(total, 1.0 / diff.size)

    def reform_tensor(self, t: Tensor) -> Tensor:
        return ad.clamp(_ae_apply(self.autoencoder, t), 0.0, 1.0)

    def calibrate(self, benign_images: np.ndarray) -> float:
        self.threshold = calibrate_benign_threshold(self.scores(benign_images), self.config.fpr_target)
        logger.info("Calibrated %s threshold %.6f at FPR %.2f", self.name, self.threshold, self.config.fpr_target)
        return self.threshold

    def verdicts(self, images: np.ndarray) -> List[DetectorVerdict]:
        return [DetectorVerdict(float(s), self.threshold, 'adversarial') for s in self.scores(images)]

    def to_dict(self) -> Dict[str, Any]:
        return {'kind': 'magnet', 'threshold': self.threshold, 'recon_norm': self.config.recon_norm,
                'fpr_target': self.config.fpr_target, 'noise_level': self.config.noise_level,
                'autoencoder': self.autoencoder.arch}


def magnet_detect(x: np.ndarray, magnet: MagNet) -> DetectorVerdict:
    """Verdict on a single input; adversarial when the reconstruction distance exceeds the threshold."""
    batch, _ = as_batch(magnet.autoencoder, x, 'magnet_detect')
    return DetectorVerdict(float(magnet.scores(batch.data)[0]), magnet.threshold, 'adversarial')


def magnet_reform(x: np.ndarray, magnet: MagNet) -> np.ndarray:
    """AE(x) clamped to [0, 1]; AE(AE(x)) need not equal AE(x)."""
    return magnet.reform(x)


@dataclass
class AutoencoderReport:
    initial_error: float
    final_error: float
    loss_curve: List[float] = field(default_factory=list)


def reconstruction_error(autoencoder: Autoencoder, images: np.ndarray, batch_size: int = 256) -> float:
    """Mean squared reconstruction error over a batch."""
    total = 0.0
    for start in range(0, len(images), batch_size):
        chunk = images[start:start + batch_size]
        recon = autoencoder.forward(Tensor(chunk)).data.reshape(chunk.shape)
        total += float(((chunk - recon) ** 2).sum())
    return total / images.size


def magnet_train(autoencoder: Autoencoder, benign_data: LabeledDataset, noise_level: float = 0.1,
                 cfg: Optional[TrainConfig] = None,
                 progress_callback: Optional[Callable[[str], None]] = None) -> AutoencoderReport:
    """
    Denoising training: reconstruct clean images from copies corrupted by seeded
    Gaussian noise of standard deviation ``noise_level`` (clipped to [0, 1]).
    """
    cfg = cfg or TrainConfig()
    if noise_level < 0:
        raise DetectorError(f"noise_level must be non-negative, got {noise_level}")
    images = benign_data.images
    noise_rng = np.random.default_rng(derive_seed(cfg.seed, 'magnet-noise'))
    initial = reconstruction_error(autoencoder, images)

    def batch_loss(idx):
        clean = images[idx]
        noisy = clean
        if noise_level > 0:
            noisy = np.clip(clean + noise_level * noise_rng.standard_normal(clean.shape), 0.0, 1.0)
        recon = ad.reshape(autoencoder.forward(Tensor(noisy), train=True), clean.shape)
        diff = ad.sub(recon, Tensor(clean))
        return ad.mean(ad.mul(diff, diff)), {}

    history = fit(autoencoder, len(images), cfg, batch_loss, progress_callback)
    report = AutoencoderReport(initial, reconstruction_error(autoencoder, images), [h['loss'] for h in history])
    logger.info("MagNet autoencoder reconstruction error %.5f -> %.5f", report.initial_error, report.final_error)
    return report
