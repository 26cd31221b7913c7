"""Training procedures: segmentation pretraining, task-adaptive reconstruction
with a frozen regularizer, and the joint-training baseline.

All three share fit_loop: seeded shuffling, a held-out validation fraction,
plateau learning-rate decay, early stopping, best-epoch restoration, and a
NaN/Inf abort that stores the last good state. Every random choice derives
from TrainConfig.seed through derive_seed, so runs are bit-reproducible.
"""

import copy
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigurationError, TrainingError, UsageError
from .losses import dice_loss, joint_loss, mse_loss, task_adaptive_loss
from .nets import (ModelHandle, UNetConfig, build_model, loss_curve_digest,
                   reconstruct, save_checkpoint, segment)
from .seeding import derive_seed

SCHEDULERS = ("plateau_decay", "none")


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 20
    batch_size: int = 16
    learning_rate: float = 1e-3
    scheduler: str = "plateau_decay"
    scheduler_factor: float = 0.5
    scheduler_patience: int = 2
    early_stop_patience: int = 8
    seed: int = 0
    weight: float = 0.0  # alpha or c, recorded for the config echo
    validation_fraction: float = 0.1

    def __post_init__(self):
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("max_epochs and batch_size must be >= 1")
        if not (self.learning_rate > 0):
            raise ConfigurationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.scheduler not in SCHEDULERS:
            raise ConfigurationError(f"scheduler must be one of {SCHEDULERS}")
        if not (0.0 < self.scheduler_factor < 1.0):
            raise ConfigurationError("scheduler_factor must be in (0, 1)")
        if self.scheduler_patience < 1 or self.early_stop_patience < 1:
            raise ConfigurationError("scheduler/early-stop patience must be >= 1")
        if not (0.0 < self.validation_fraction <= 0.5):
            raise ConfigurationError("validation_fraction must be in (0, 0.5]")

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class TrainReport:
    train_curve: list = field(default_factory=list)
    val_curve: list = field(default_factory=list)
    step_curve: list = field(default_factory=list)
    best_epoch: int = -1
    wall_clock: float = 0.0
    checkpoint_path: str = ""
    config: dict = field(default_factory=dict)
    stopped_early: bool = False
    final_lr: float = 0.0
    n_train: int = 0
    n_val: int = 0

    def to_dict(self):
        return dict(self.__dict__)


def _stack_dataset(samples):
    samples = list(samples)  # accept the load_split generator directly
    if not samples:
        raise ConfigurationError("dataset split is empty")
    low = torch.from_numpy(np.stack([s.low_dose for s in samples]).astype(np.float32))[:, None]
    full = torch.from_numpy(np.stack([s.full_dose for s in samples]).astype(np.float32))[:, None]
    seg = torch.from_numpy(np.stack([s.seg for s in samples]).astype(np.int64))
    return low, full, seg


def epoch_batches(n, batch_size, seed, epoch):
    """Deterministic batch index order for one epoch."""
    rng = np.random.default_rng(derive_seed(seed, "shuffle", epoch))
    order = rng.permutation(n)
    for k in range(0, n, batch_size):
        yield order[k:k + batch_size]


def val_split_indices(n, config: TrainConfig):
    rng = np.random.default_rng(derive_seed(config.seed, "val-split"))
    order = rng.permutation(n)
    n_val = max(1, int(round(config.validation_fraction * n)))
    if n_val >= n:
        raise ConfigurationError("dataset too small for the validation fraction")
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def _snapshot(models):
    return [copy.deepcopy(m.module.state_dict()) for m in models]


def _restore(models, snaps):
    for m, s in zip(models, snaps):
        m.module.load_state_dict(s)


def fit_loop(trainable_models, loss_fn, dataset, config: TrainConfig,
             checkpoint_path=None) -> TrainReport:
    """Shared optimization engine.

    trainable_models: ModelHandles whose parameters the optimizer updates.
    loss_fn(low, full, seg) -> scalar torch loss; it closes over the models.
    dataset: sequence of SamplePair. On success the best-validation weights
    are left loaded in the models; on NaN/Inf the last good state is restored
    (and checkpointed if a path was given) before TrainingError is raised.
    """
    t0 = time.time()
    low, full, seg = _stack_dataset(dataset)
    train_idx, val_idx = val_split_indices(low.shape[0], config)

    params = []
    for m in trainable_models:
        m.module.train()
        params.extend(p for p in m.module.parameters() if p.requires_grad)
    if not params:
        raise UsageError("fit_loop has nothing to optimize")
    opt = torch.optim.Adam(params, lr=config.learning_rate)
    sched = None
    if config.scheduler == "plateau_decay":
        sched = torch.optim.lr_scheduler.ReduceLROnPlateau(
            opt, factor=config.scheduler_factor, patience=config.scheduler_patience)

    report = TrainReport(config=config.to_dict(),
                         n_train=len(train_idx), n_val=len(val_idx))
    best_val = float("inf")
    best_state = _snapshot(trainable_models)
    bad_epochs = 0
    steps = 0

    def _abort(reason):
        _restore(trainable_models, best_state)
        for m in trainable_models:
            m.module.eval()
        if checkpoint_path is not None:
            save_checkpoint(trainable_models[0], checkpoint_path)
        raise TrainingError(
            f"{reason} (epoch {epoch}, step {steps}, lr {opt.param_groups[0]['lr']:.3g}); "
            "last good state restored"
        )

    for epoch in range(config.max_epochs):
        for m in trainable_models:
            m.module.train()
        total, count = 0.0, 0
        for batch in epoch_batches(len(train_idx), config.batch_size, config.seed, epoch):
            idx = train_idx[batch]
            opt.zero_grad()
            loss = loss_fn(low[idx], full[idx], seg[idx])
            value = float(loss.detach())
            if not np.isfinite(value):
                _abort(f"training loss became {value}")
            loss.backward()
            opt.step()
            steps += 1
            report.step_curve.append(value)
            total += value * len(idx)
            count += len(idx)
        report.train_curve.append(total / count)

        for m in trainable_models:
            m.module.eval()
        with torch.no_grad():
            vtotal = 0.0
            for k in range(0, len(val_idx), config.batch_size):
                idx = val_idx[k:k + config.batch_size]
                vtotal += float(loss_fn(low[idx], full[idx], seg[idx])) * len(idx)
            val = vtotal / len(val_idx)
        if not np.isfinite(val):
            _abort(f"validation loss became {val}")
        report.val_curve.append(val)

        if val < best_val:
            best_val = val
            best_state = _snapshot(trainable_models)
            report.best_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.early_stop_patience:
                report.stopped_early = True
                break
        if sched is not None:
            sched.step(val)

    _restore(trainable_models, best_state)
    for m in trainable_models:
        m.module.eval()
        m.step = steps
        m.loss_digest = loss_curve_digest(report.val_curve)
    report.final_lr = opt.param_groups[0]["lr"]
    report.wall_clock = time.time() - t0
    return report


def default_seg_config():
    return UNetConfig(depth=3, base_channels=16, out_channels=3, head="class_probs")


def default_recon_config():
    return UNetConfig(depth=3, base_channels=16, out_channels=1, head="unit_squash")


def pretrain_segmentation(dataset, config: TrainConfig, net_config: UNetConfig = None,
                          aug_noise_std: float = 0.0):
    """Train the task model on (full-dose, seg) pairs with Dice loss.

    aug_noise_std > 0 adds seeded Gaussian noise to the full-dose inputs,
    which hardens the frozen net against off-distribution reconstructions
    when it is later used as a regularizer. Low-dose images are never seen.
    """
    net_config = net_config or default_seg_config()
    if net_config.head != "class_probs":
        raise UsageError("pretrain_segmentation needs a class_probs net")
    model = build_model(net_config, derive_seed(config.seed, "task-init"))
    gen = torch.Generator().manual_seed(derive_seed(config.seed, "aug") % (2**63))

    def loss_fn(low, full, seg):
        x = full
        if aug_noise_std > 0:
            x = x + aug_noise_std * torch.randn(full.shape, generator=gen)
        probs = segment(model, x[:, 0])
        return dice_loss(probs, seg)

    report = fit_loop([model], loss_fn, dataset, config)
    return model, report


def train_task_adaptive(dataset, task_model: ModelHandle, alpha: float,
                        config: TrainConfig, recon_config: UNetConfig = None):
    """Train the reconstruction net against (1-a)*MSE + a*Dice through phi*.

    The task model must be frozen; gradients flow through it into the
    reconstruction parameters, never into it. alpha=0 skips the task branch
    entirely, reproducing plain MSE (base U-Net) training step for step.
    """
    if not (0.0 <= alpha <= 1.0):
        raise ConfigurationError(f"alpha must be in [0, 1], got {alpha}")
    if alpha > 0.0:
        if task_model is None or not task_model.frozen:
            raise UsageError("task model must be frozen before task-adaptive training")
        if task_model.config.head != "class_probs":
            raise UsageError("task model must have a class_probs head")
        before = task_model.parameter_bytes()
    recon_config = recon_config or default_recon_config()
    model = build_model(recon_config, derive_seed(config.seed, "recon-init"))

    def loss_fn(low, full, seg):
        rec = reconstruct(model, low)
        if alpha == 0.0:
            return mse_loss(rec, full)
        probs = segment(task_model, rec)
        return task_adaptive_loss(rec, full, probs, seg, alpha)

    report = fit_loop([model], loss_fn, dataset, config)
    if alpha > 0.0 and task_model.parameter_bytes() != before:
        raise TrainingError("frozen task model parameters changed during training")
    return model, report


def train_joint(dataset, c: float, config: TrainConfig,
                recon_config: UNetConfig = None, seg_config: UNetConfig = None,
                init_task_from: ModelHandle = None):
    """Jointly train reconstruction and task nets against the C-weighted loss.

    Both parameter sets update each step (the task branch consumes the
    reconstruction output). At C=0 the task net receives only zero gradients,
    so its update is skipped to make the base-training equivalence exact.
    The reconstruction init shares the task-adaptive "recon-init" seed tag so
    C=0 and alpha=0 runs coincide step for step.
    """
    if not (0.0 <= c <= 1.0):
        raise ConfigurationError(f"c must be in [0, 1], got {c}")
    recon_config = recon_config or default_recon_config()
    seg_config = seg_config or default_seg_config()
    recon = build_model(recon_config, derive_seed(config.seed, "recon-init"))
    if init_task_from is not None:
        task = build_model(init_task_from.config, derive_seed(config.seed, "joint-task-init"))
        task.module.load_state_dict(copy.deepcopy(init_task_from.module.state_dict()))
    else:
        task = build_model(seg_config, derive_seed(config.seed, "joint-task-init"))

    def loss_fn(low, full, seg):
        rec = reconstruct(recon, low)
        if c == 0.0:
            return mse_loss(rec, full)
        probs = segment(task, rec)
        return joint_loss(rec, full, probs, seg, c)

    trainables = [recon] if c == 0.0 else [recon, task]
    report = fit_loop(trainables, loss_fn, dataset, config)
    return (recon, task), report
