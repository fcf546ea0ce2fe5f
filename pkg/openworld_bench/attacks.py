"""
Targeted evasion attacks under L-inf / L2 constraints.

Every attack starts at x0, minimises an adversarial loss towards a chosen target
class with projected steps, and returns the best-loss feasible iterate. Starting
points may be in-distribution or out-of-distribution; the attacks do not care.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .adv_detectors import MagNet, SqueezerConfig, fs_scores
from .autodiff import Tensor
from .models import Adam, Classifier, confidences, logits
from .transforms import TransformSampler
from .utils import BenchError, derive_seed

logger = logging.getLogger(__name__)

NORMS = ('linf', 'l2')
LOSS_KINDS = ('xent', 'cw')
TARGETING = ('rand', 'LL')
STEP_RULES = ('sign', 'l2', 'adam')

# Added to the target logit so it never wins the "best other class" max.
_MASK = 1e9


class AttackError(BenchError):
    """Raised for invalid attack inputs."""
    pass


class OracleError(AttackError):
    """Raised when a black-box query fails; carries the queries spent so far."""

    def __init__(self, message: str, queries_used: int):
        super().__init__(f"{message} (after {queries_used} queries)")
        self.queries_used = queries_used


@dataclass(frozen=True)
class PerturbationConstraint:
    """Feasible set {x : d(x, x0) <= epsilon} intersected with the [0, 1] box."""
    norm: str = 'linf'
    epsilon: float = 0.3

    def __post_init__(self):
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}, got '{self.norm}'")
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be non-negative, got {self.epsilon}")

    def distance(self, x: np.ndarray, x0: np.ndarray) -> float:
        diff = (np.asarray(x) - np.asarray(x0)).reshape(-1)
        if self.norm == 'linf':
            return float(np.abs(diff).max()) if diff.size else 0.0
        return float(np.linalg.norm(diff))


@dataclass
class AttackConfig:
    constraint: PerturbationConstraint = field(default_factory=PerturbationConstraint)
    loss_kind: str = 'xent'
    kappa: float = 0.0
    step_size: Optional[float] = None
    max_iters: int = 100
    plateau_patience: int = 20
    plateau_min_delta: float = 1e-4
    targeting: str = 'rand'
    seed: int = 0
    step_rule: Optional[str] = None

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got '{self.loss_kind}'")
        if self.kappa < 0:
            raise ValueError(f"kappa must be non-negative, got {self.kappa}")
        if self.targeting not in TARGETING:
            raise ValueError(f"targeting must be one of {TARGETING}, got '{self.targeting}'")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.plateau_patience < 1:
            raise ValueError(f"plateau_patience must be >= 1, got {self.plateau_patience}")
        if self.step_size is None:
            eps = self.constraint.epsilon
            divisor = 10.0 if self.constraint.norm == 'linf' else 5.0
            # epsilon = 0 pins every iterate to x0; any positive step is equivalent
            self.step_size = eps / divisor if eps > 0 else 1e-3
        if self.step_size <= 0:
            raise ValueError(f"step_size must be positive, got {self.step_size}")
        if self.step_rule is None:
            self.step_rule = 'sign' if self.constraint.norm == 'linf' else 'l2'
        if self.step_rule not in STEP_RULES:
            raise ValueError(f"step_rule must be one of {STEP_RULES}, got '{self.step_rule}'")


@dataclass
class AttackResult:
    adv_example: np.ndarray
    start: np.ndarray
    target: int
    success: bool
    target_confidence: float
    predicted: int
    iterations_used: int
    initial_loss: float
    final_loss: float
    linf_distance: float
    l2_distance: float
    queries_used: Optional[int] = None
    zero_grad_start: bool = False
    detector_score: Optional[float] = None
    evaded: Optional[bool] = None
    transform_success_rate: Optional[float] = None


# --- targets and losses ---

def select_target(model: Classifier, x: np.ndarray, mode: str = 'rand', seed: int = 0,
                  num_targets: Optional[int] = None) -> int:
    """
    Choose an attack target.

    Args:
        model: Classifier
        x: Unmodified input
        mode: ``rand`` (uniform over classes other than f(x)) or ``LL`` (least likely, lowest index on ties)
        seed: Seed for ``rand``
        num_targets: Restrict targets to the first classes (defaults to the in-distribution classes)
    """
    k = num_targets or model.num_in_classes
    if k < 2:
        raise AttackError("Targeted attacks need at least two classes")
    probs = confidences(model, x)
    if mode == 'LL':
        return int(np.argmin(probs[:k]))
    if mode != 'rand':
        raise AttackError(f"Unknown targeting mode '{mode}'")
    predicted = int(np.argmax(probs))
    candidates = [c for c in range(k) if c != predicted]
    return int(np.random.default_rng(seed).choice(candidates))


def margin_loss(scores: Tensor, target, kappa: float = 0.0) -> Tensor:
    """max(max_{i != T} s_i - s_T, -kappa) per row."""
    if scores.shape[-1] < 2:
        raise AttackError("Margin loss needs at least two classes")
    target_arr = np.asarray(target, dtype=np.int64)
    mask = np.zeros(scores.shape)
    np.put_along_axis(mask, target_arr[..., None], _MASK, axis=-1)
    others = ad.reduce_max(ad.sub(scores, Tensor(mask)))
    return ad.clamp(ad.sub(others, ad.pick(scores, target_arr)), lo=-kappa)


def adv_loss(model: Classifier, x_adv, target: int, kind: str = 'xent', kappa: float = 0.0) -> Tensor:
    """
    Scalar loss whose minimisation drives f(x_adv) towards ``target``.

    Examples:
        With logits [3, 1, 0], the ``cw`` loss is 0 for target 0 and 2 for target 1 (kappa 0).
    """
    return _loss_from_logits(logits(model, x_adv), target, kind, kappa)


def _loss_from_logits(z: Tensor, target: int, kind: str, kappa: float) -> Tensor:
    if kind == 'xent':
        return ad.cross_entropy(z, target)
    if kind == 'cw':
        return margin_loss(z, target, kappa)
    raise AttackError(f"Unknown loss kind '{kind}'")


# --- projection and steps ---

def project(x_adv: np.ndarray, x0: np.ndarray, constraint: PerturbationConstraint) -> np.ndarray:
    """
    Euclidean projection onto the feasible set.

    L-inf clamps to [x0 - eps, x0 + eps] then to [0, 1]. L2 returns the nearest point
    of the ball-box intersection: clip((x + mu * x0) / (1 + mu), 0, 1) with the
    smallest mu >= 0 meeting the radius, found by bisection. When the box clamp is
    inactive this is the plain rescale of x - x0 to length eps.
    """
    x_adv = np.asarray(x_adv, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    if x_adv.shape != x0.shape:
        raise AttackError(f"project: shape mismatch {x_adv.shape} vs {x0.shape}")
    eps = constraint.epsilon
    if constraint.norm == 'linf':
        return np.clip(np.clip(x_adv, x0 - eps, x0 + eps), 0.0, 1.0)

    def candidate(mu: float) -> np.ndarray:
        return np.clip((x_adv + mu * x0) / (1.0 + mu), 0.0, 1.0)

    def radius(x: np.ndarray) -> float:
        return float(np.linalg.norm((x - x0).reshape(-1)))

    boxed = candidate(0.0)
    if radius(boxed) <= eps:
        return boxed
    if eps == 0:
        return x0.copy()
    hi = 1.0
    while radius(candidate(hi)) > eps:
        hi *= 2.0
    lo = 0.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if radius(candidate(mid)) > eps:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * max(1.0, hi):
            break
    return candidate(hi)


def is_feasible(x_adv: np.ndarray, x0: np.ndarray, constraint: PerturbationConstraint, tol: float = 1e-9) -> bool:
    x_adv = np.asarray(x_adv)
    return (x_adv.min() >= 0.0 and x_adv.max() <= 1.0
            and constraint.distance(x_adv, x0) <= constraint.epsilon + tol)


class _Stepper:
    def __init__(self, cfg: AttackConfig):
        self.cfg = cfg
        self.adam = Adam(cfg.step_size) if cfg.step_rule == 'adam' else None

    def __call__(self, x: np.ndarray, x0: np.ndarray, grad: np.ndarray) -> np.ndarray:
        return pgd_step(x, x0, grad, self.cfg, self.adam)


def pgd_step(x: np.ndarray, x0: np.ndarray, grad: np.ndarray, cfg: AttackConfig,
             adam: Optional[Adam] = None) -> np.ndarray:
    """
    One projected descent step.

    ``sign``: x - alpha * sign(grad). ``l2``: x - alpha * grad / ||grad||_2 (no move on a
    zero gradient). ``adam``: adaptive-moment step on the perturbation.
    """
    rule = cfg.step_rule
    if rule == 'sign':
        moved = x - cfg.step_size * np.sign(grad)
    elif rule == 'l2':
        norm = float(np.linalg.norm(grad.reshape(-1)))
        moved = x - cfg.step_size * grad / norm if norm > 0 else x
    else:
        if adam is None:
            raise AttackError("adam step rule needs optimizer state")
        adam.t += 1
        moved = x - adam.delta('delta', grad)
    return project(moved, x0, cfg.constraint)


Objective = Callable[[np.ndarray, int], Tuple[float, np.ndarray]]


@dataclass
class _Trajectory:
    best_x: np.ndarray
    best_loss: float
    initial_loss: float
    iterations: int
    zero_grad_start: bool


def _optimize(objective: Objective, x0: np.ndarray, cfg: AttackConfig) -> _Trajectory:
    """
    Projected descent with best-iterate tracking and a plateau stop.

    The run stops after ``max_iters`` steps or once the best loss has improved by
    less than ``plateau_min_delta`` (relative) over ``plateau_patience`` steps.
    """
    step = _Stepper(cfg)
    x = x0.copy()
    loss, grad = objective(x, 0)
    initial_loss = loss
    zero_start = not np.any(grad)
    if zero_start:
        logger.warning("Zero gradient at attack start; sign steps will not move")
    best_x, best_loss = x.copy(), loss
    anchor, stale = loss, 0
    iterations = 0
    for it in range(1, cfg.max_iters + 1):
        x = step(x, x0, grad)
        iterations = it
        loss, grad = objective(x, it)
        if loss < best_loss:
            best_x, best_loss = x.copy(), loss
        if anchor - best_loss > cfg.plateau_min_delta * max(abs(anchor), 1e-12):
            anchor, stale = best_loss, 0
        else:
            stale += 1
            if stale >= cfg.plateau_patience:
                logger.debug("Plateau after %d iterations (loss %.6g)", it, best_loss)
                break
    return _Trajectory(best_x, best_loss, initial_loss, iterations, zero_start)


def _check_start(model: Classifier, x0: np.ndarray, target: int) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape != model.input_shape:
        raise AttackError(f"Start shape {x0.shape} does not match model input {model.input_shape}")
    if x0.min() < 0.0 or x0.max() > 1.0:
        raise AttackError("Start point must lie in [0, 1]")
    if not 0 <= target < model.num_classes:
        raise AttackError(f"Target {target} outside [0, {model.num_classes})")
    return x0


def _finalize(model: Classifier, x0: np.ndarray, traj: _Trajectory, target: int,
              classify: Optional[np.ndarray] = None, **extra) -> AttackResult:
    """Build the result; ``classify`` is the input actually seen by the classifier (after reform)."""
    adv = traj.best_x
    probs = confidences(model, adv if classify is None else classify)
    predicted = int(np.argmax(probs))
    diff = (adv - x0).reshape(-1)
    return AttackResult(
        adv_example=adv,
        start=x0,
        target=int(target),
        success=predicted == target,
        target_confidence=float(probs[target]),
        predicted=predicted,
        iterations_used=traj.iterations,
        initial_loss=traj.initial_loss,
        final_loss=traj.best_loss,
        linf_distance=float(np.abs(diff).max()) if diff.size else 0.0,
        l2_distance=float(np.linalg.norm(diff)),
        zero_grad_start=traj.zero_grad_start,
        **extra,
    )


def _white_box(model: Classifier, target: int, cfg: AttackConfig,
               build: Optional[Callable[[Tensor], Tensor]] = None) -> Objective:
    def objective(x: np.ndarray, it: int) -> Tuple[float, np.ndarray]:
        t = Tensor(x, requires_grad=True)
        loss = build(t) if build else adv_loss(model, t, target, cfg.loss_kind, cfg.kappa)
        return loss.item(), ad.backward(loss)[t]
    return objective


# --- white-box attacks ---

def pgd_attack(model: Classifier, x0: np.ndarray, target: int, cfg: AttackConfig) -> AttackResult:
    """
    Targeted PGD: x_t = Proj(x_{t-1} - alpha * step(grad loss)), best-loss iterate returned.

    Examples:
        With epsilon 0 the returned example equals x0.
    """
    x0 = _check_start(model, x0, target)
    traj = _optimize(_white_box(model, target, cfg), x0, cfg)
    result = _finalize(model, x0, traj, target)
    logger.debug("PGD target=%d success=%s conf=%.4f iters=%d", target, result.success,
                 result.target_confidence, result.iterations_used)
    return result


def bpda_attack(model: Classifier, squeezers: SqueezerConfig, x0: np.ndarray, target: int, cfg: AttackConfig,
                threshold: float, penalty_weight: float = 1.0, margin: float = 0.1) -> AttackResult:
    """
    Attack through feature squeezing with straight-through gradients.

    Loss = adv_loss(x) + penalty_weight * sum_s max(L1(g(x), g(s(x))) - (1 - margin) * threshold, 0).
    Each squeezer s runs forward and is treated as identity backward. L2 constraint,
    adaptive-moment steps. Success requires the target class and a detector score at or
    below ``threshold``.
    """
    if cfg.constraint.norm != 'l2':
        raise AttackError("bpda_attack runs under an L2 constraint")
    cfg = replace(cfg, step_rule='adam')
    x0 = _check_start(model, x0, target)
    squeeze_fns = squeezers.squeezers()
    limit = (1.0 - margin) * threshold

    def build(t: Tensor) -> Tensor:
        z = logits(model, t)
        probs = ad.softmax(z)
        loss = _loss_from_logits(z, target, cfg.loss_kind, cfg.kappa)
        for name, fn in squeeze_fns:
            squeezed = ad.softmax(logits(model, ad.straight_through(t, fn, op=name)))
            gap = ad.l1_norm(ad.sub(probs, squeezed))
            loss = ad.add(loss, ad.scale(ad.clamp(ad.sub(gap, limit), lo=0.0), penalty_weight))
        return loss

    traj = _optimize(_white_box(model, target, cfg, build), x0, cfg)
    score = float(fs_scores(model, traj.best_x, squeezers)[0])
    evaded = score <= threshold
    result = _finalize(model, x0, traj, target, detector_score=score, evaded=evaded)
    result.success = result.success and evaded
    return result


def magnet_adaptive_attack(model: Classifier, magnet: MagNet, x0: np.ndarray, target: int, cfg: AttackConfig,
                           lambda_recon: float) -> AttackResult:
    """
    Attack the reformed classifier while keeping the reconstruction distance small.

    Loss = adv_loss(reform(x)) + lambda_recon * recon_distance(x). Success requires
    f(reform(x)) == target and a MagNet score at or below its threshold.
    """
    if lambda_recon < 0:
        raise AttackError(f"lambda_recon must be non-negative, got {lambda_recon}")
    x0 = _check_start(model, x0, target)

    def build(t: Tensor) -> Tensor:
        loss = adv_loss(model, magnet.reform_tensor(t), target, cfg.loss_kind, cfg.kappa)
        if lambda_recon > 0:
            loss = ad.add(loss, ad.scale(magnet.score_tensor(t), lambda_recon))
        return loss

    traj = _optimize(_white_box(model, target, cfg, build), x0, cfg)
    return evaluate_under_magnet(model, magnet, _finalize(model, x0, traj, target))


def evaluate_under_magnet(model: Classifier, magnet: MagNet, result: AttackResult) -> AttackResult:
    """Re-score a result against a MagNet deployment: classify the reformed input and require evasion."""
    reformed = magnet.reform(result.adv_example)
    probs = confidences(model, reformed)
    predicted = int(np.argmax(probs))
    score = float(magnet.scores(result.adv_example)[0])
    evaded = score <= magnet.threshold
    return replace(result, predicted=predicted, target_confidence=float(probs[result.target]),
                   success=predicted == result.target and evaded, detector_score=score, evaded=evaded)


def evaluate_under_squeezing(model: Classifier, squeezers: SqueezerConfig, threshold: float,
                             result: AttackResult) -> AttackResult:
    """Re-score a result against a feature-squeezing deployment."""
    score = float(fs_scores(model, result.adv_example, squeezers)[0])
    evaded = score <= threshold
    return replace(result, success=result.success and evaded, detector_score=score, evaded=evaded)


def eot_attack(model: Classifier, x0: np.ndarray, target: int, cfg: AttackConfig, sampler: TransformSampler,
               samples_per_step: int = 10, eval_draws: int = 100) -> AttackResult:
    """
    PGD on the loss averaged over ``samples_per_step`` random transforms per step.

    ``transform_success_rate`` is the fraction of ``eval_draws`` fresh transforms of the
    result classified as the target.
    """
    if samples_per_step < 1:
        raise AttackError(f"samples_per_step must be >= 1, got {samples_per_step}")
    x0 = _check_start(model, x0, target)
    rng = np.random.default_rng(derive_seed(cfg.seed, 'eot'))

    def build(t: Tensor) -> Tensor:
        losses = [adv_loss(model, transform.apply(t), target, cfg.loss_kind, cfg.kappa)
                  for transform in sampler.sample(rng, samples_per_step)]
        total = losses[0]
        for extra in losses[1:]:
            total = ad.add(total, extra)
        return ad.scale(total, 1.0 / samples_per_step)

    traj = _optimize(_white_box(model, target, cfg, build), x0, cfg)
    eval_rng = np.random.default_rng(derive_seed(cfg.seed, 'eot-eval'))
    draws = sampler.sample(eval_rng, eval_draws)
    warped = np.stack([transform.apply_array(traj.best_x) for transform in draws])
    hits = np.argmax(confidences(model, warped), axis=-1) == target
    return _finalize(model, x0, traj, target, transform_success_rate=float(np.mean(hits)))


# --- black-box ---

class QueryOracle:
    """
    Query-counting access to a local model's confidence vectors.

    Every input image evaluated counts as one query.
    """

    def __init__(self, model: Classifier, budget: Optional[int] = None):
        self.model = model
        self.budget = budget
        self.queries_used = 0

    def __call__(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        single = images.shape == self.model.input_shape
        count = 1 if single else len(images)
        if self.budget is not None and self.queries_used + count > self.budget:
            raise OracleError(f"Query budget of {self.budget} exhausted", self.queries_used)
        try:
            probs = confidences(self.model, images)
        except Exception as e:
            raise OracleError(f"Oracle failed: {e}", self.queries_used) from e
        self.queries_used += count
        return probs


def loss_from_probs(probs: np.ndarray, target: int, kind: str = 'xent', kappa: float = 0.0) -> np.ndarray:
    """Adversarial loss computed from confidence vectors only (rows of ``probs``)."""
    log_probs = np.log(np.clip(probs, 1e-300, None))
    if kind == 'xent':
        return -log_probs[..., target]
    masked = log_probs.copy()
    masked[..., target] = -np.inf
    return np.maximum(masked.max(axis=-1) - log_probs[..., target], -kappa)


def group_fd_gradient(loss_fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray, group_size: int = 1,
                      h: float = 1e-4, seed: int = 0, chunk: int = 256) -> Tuple[np.ndarray, int]:
    """
    Random-grouping central differences.

    Pixels are split into seeded random groups of ``group_size`` (last group ragged); each
    group gets one central difference along its +-h indicator direction and every pixel of
    the group receives that estimate.

    Args:
        loss_fn: Maps a batch of inputs (N, *x.shape) to N losses
        x: Evaluation point
        group_size: Pixels per group
        h: Difference step
        seed: Grouping seed
        chunk: Queries per ``loss_fn`` call

    Returns:
        (estimate shaped like x, number of evaluations = 2 * groups)
    """
    if group_size < 1:
        raise AttackError(f"group_size must be >= 1, got {group_size}")
    if h <= 0:
        raise AttackError(f"finite difference step must be positive, got {h}")
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    order = np.random.default_rng(seed).permutation(n)
    groups = [order[i:i + group_size] for i in range(0, n, group_size)]
    estimate = np.zeros(n)
    flat = x.reshape(-1)
    per_call = max(1, chunk // 2)
    for start in range(0, len(groups), per_call):
        block = groups[start:start + per_call]
        probes = np.repeat(flat[None, :], 2 * len(block), axis=0)
        for j, members in enumerate(block):
            probes[2 * j, members] += h
            probes[2 * j + 1, members] -= h
        losses = np.asarray(loss_fn(probes.reshape((-1,) + x.shape)), dtype=np.float64)
        for j, members in enumerate(block):
            estimate[members] = (losses[2 * j] - losses[2 * j + 1]) / (2.0 * h)
    return estimate.reshape(x.shape), 2 * len(groups)


def estimate_gradient_fd(query_oracle: QueryOracle, x: np.ndarray, loss_kind: str, target: int,
                         group_size: int = 8, h: float = 1e-4, seed: int = 0,
                         kappa: float = 0.0) -> Tuple[np.ndarray, int]:
    """
    Finite-difference gradient of the adversarial loss using only oracle confidences.

    Returns:
        (gradient estimate, queries used by this estimate); 784 pixels in groups of
        8 cost 196 queries.
    """
    before = query_oracle.queries_used
    grad, _ = group_fd_gradient(lambda batch: loss_from_probs(query_oracle(batch), target, loss_kind, kappa),
                                x, group_size, h, seed)
    return grad, query_oracle.queries_used - before


def blackbox_attack(oracle: QueryOracle, x0: np.ndarray, target: int, cfg: AttackConfig,
                    group_size: int = 8, h: float = 1e-4) -> AttackResult:
    """
    PGD loop driven by finite-difference estimates through a query-counting oracle.

    With a query budget the iteration count is cut so the whole run fits in it; each
    iteration costs one loss query plus two per pixel group.

    Raises:
        OracleError: If the remaining budget cannot pay for a single step
    """
    model = oracle.model
    x0 = _check_start(model, x0, target)
    if oracle.budget is not None:
        per_iteration = 1 + 2 * -(-x0.size // group_size)
        affordable = (oracle.budget - oracle.queries_used) // per_iteration - 1
        if affordable < 1:
            raise OracleError(f"Query budget of {oracle.budget} cannot pay for one step: each iteration costs "
                              f"{per_iteration} queries (1 loss query + 2 per group of {group_size}), and a "
                              f"step plus the final evaluation needs {2 * per_iteration}", oracle.queries_used)
        cfg = replace(cfg, max_iters=min(cfg.max_iters, affordable))

    def objective(x: np.ndarray, it: int) -> Tuple[float, np.ndarray]:
        loss = float(loss_from_probs(oracle(x), target, cfg.loss_kind, cfg.kappa))
        grad, _ = estimate_gradient_fd(oracle, x, cfg.loss_kind, target, group_size, h,
                                       seed=derive_seed(cfg.seed, 'fd', it), kappa=cfg.kappa)
        return loss, grad

    traj = _optimize(objective, x0, cfg)
    return _finalize(model, x0, traj, target, queries_used=oracle.queries_used)


# --- batched helpers ---

def run_attack(kind: str, model: Classifier, x0: np.ndarray, target: int, cfg: AttackConfig,
               **options) -> AttackResult:
    """Dispatch by attack kind name; used by the experiment runner."""
    if kind == 'pgd':
        return pgd_attack(model, x0, target, cfg)
    if kind == 'bpda':
        return bpda_attack(model, options['squeezers'], x0, target, cfg, options['threshold'])
    if kind == 'magnet-adaptive':
        return magnet_adaptive_attack(model, options['magnet'], x0, target, cfg, options['lambda_recon'])
    if kind == 'eot':
        return eot_attack(model, x0, target, cfg, options.get('sampler') or TransformSampler(),
                          options.get('samples_per_step', 10))
    if kind == 'blackbox':
        return blackbox_attack(QueryOracle(model, options.get('budget')), x0, target, cfg,
                               options.get('group_size', 8), options.get('h', 1e-4))
    raise AttackError(f"Unknown attack kind '{kind}'")


ATTACK_KINDS = ('pgd', 'bpda', 'magnet-adaptive', 'eot', 'blackbox')


def stack_results(results: List[AttackResult]) -> Dict[str, np.ndarray]:
    """Arrays for persisting a batch of results."""
    return {
        'adv_examples': np.stack([r.adv_example for r in results]),
        'starts': np.stack([r.start for r in results]),
        'targets': np.array([r.target for r in results], dtype=np.int64),
        'success': np.array([r.success for r in results], dtype=bool),
        'target_confidence': np.array([r.target_confidence for r in results]),
    }
