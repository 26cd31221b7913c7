"""Training objectives: MSE, soft Dice, and their convex combinations.

All functions take torch tensors (numpy arrays are converted, losing grad) and
return 0-dim torch tensors so gradients can flow to whichever inputs require
them. Dice is computed per sample over per-class ratios and then averaged,
never pooled across the batch.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigurationError, DimensionError, UsageError

NUM_CLASSES = 3
DEFAULT_EPSILON = 1e-6


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.0
    c: float = 0.0
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0):
            raise ConfigurationError(f"alpha must be in [0, 1], got {self.alpha}")
        if not (0.0 <= self.c <= 1.0):
            raise ConfigurationError(f"c must be in [0, 1], got {self.c}")
        if not (self.epsilon > 0.0):
            raise ConfigurationError(f"epsilon must be > 0, got {self.epsilon}")


def _as_tensor(x):
    if torch.is_tensor(x):
        return x
    return torch.as_tensor(np.asarray(x))


def mse_loss(prediction, target):
    """Mean squared error over all elements."""
    prediction = _as_tensor(prediction)
    target = _as_tensor(target)
    if prediction.shape != target.shape:
        raise DimensionError(
            f"mse_loss shapes differ: {tuple(prediction.shape)} vs {tuple(target.shape)}"
        )
    diff = prediction - target
    return (diff * diff).mean()


def _norm_seg_inputs(probs, gt):
    probs = _as_tensor(probs)
    gt = _as_tensor(gt)
    if probs.dim() == 3:
        probs = probs.unsqueeze(0)
    if gt.dim() == 2:
        gt = gt.unsqueeze(0)
    if probs.dim() != 4 or probs.shape[1] != NUM_CLASSES:
        raise DimensionError(f"probs must be (B, {NUM_CLASSES}, H, W), got {tuple(probs.shape)}")
    if gt.shape != (probs.shape[0], probs.shape[2], probs.shape[3]):
        raise DimensionError(f"gt shape {tuple(gt.shape)} does not match probs {tuple(probs.shape)}")
    gt = gt.long()
    if gt.min() < 0 or gt.max() >= NUM_CLASSES:
        raise UsageError("gt labels must lie in {0, 1, 2}")
    return probs, gt


def dice_score(probs, gt, epsilon=DEFAULT_EPSILON, classes=(0, 1, 2)):
    """Smoothed soft Dice, averaged over `classes` then over the batch.

    Per class: (2 sum(p*g) + eps) / (sum(p) + sum(g) + eps) with one-hot g.
    A class absent from both prediction and ground truth contributes eps/eps=1.
    """
    if len(classes) == 0:
        raise UsageError("dice_score needs a non-empty class subset")
    if any(c not in range(NUM_CLASSES) for c in classes):
        raise UsageError(f"classes must be a subset of {set(range(NUM_CLASSES))}")
    probs, gt = _norm_seg_inputs(probs, gt)
    onehot = F.one_hot(gt, NUM_CLASSES).permute(0, 3, 1, 2).to(probs.dtype)
    terms = []
    for c in classes:
        p_c = probs[:, c].reshape(probs.shape[0], -1)
        g_c = onehot[:, c].reshape(probs.shape[0], -1)
        inter = (p_c * g_c).sum(dim=1)
        terms.append((2.0 * inter + epsilon) / (p_c.sum(dim=1) + g_c.sum(dim=1) + epsilon))
    per_sample = torch.stack(terms, dim=1).mean(dim=1)
    return per_sample.mean()


def dice_loss(probs, gt, epsilon=DEFAULT_EPSILON):
    """1 - dice_score over all three classes."""
    return 1.0 - dice_score(probs, gt, epsilon=epsilon, classes=(0, 1, 2))


def _check_weight(name, value):
    if not (0.0 <= value <= 1.0):
        raise ConfigurationError(f"{name} must be in [0, 1], got {value}")


def task_adaptive_loss(recon, full, probs, gt, alpha, epsilon=DEFAULT_EPSILON):
    """(1 - alpha) * MSE(recon, full) + alpha * DiceLoss(probs, gt).

    At alpha=0 this is exactly the MSE (IEEE: x + 0.0 == x), at alpha=1
    exactly the Dice loss; `probs` are expected to come from the frozen
    pretrained task model applied to `recon`.
    """
    _check_weight("alpha", alpha)
    return (1.0 - alpha) * mse_loss(recon, full) + alpha * dice_loss(probs, gt, epsilon)


def joint_loss(recon, full, probs, gt, c, epsilon=DEFAULT_EPSILON):
    """Same convex combination as task_adaptive_loss, weighted by C.

    The formulas coincide; the difference is the training wiring: here the
    probs come from the jointly trained task network, which the caller also
    updates.
    """
    _check_weight("c", c)
    return (1.0 - c) * mse_loss(recon, full) + c * dice_loss(probs, gt, epsilon)
