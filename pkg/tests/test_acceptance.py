"""End-to-end acceptance gate.

Each test covers one numbered criterion and prints a single PASS line with
its measured margin; run `pytest -rA tests/test_acceptance.py` to see them.
The two toy-experiment criteria share one CLI run through a module fixture
(plus a second full run for the byte-identity check), so this file takes
roughly half an hour of CPU; everything else finishes in seconds.
"""

import copy
import csv
import os
import time

import numpy as np
import pytest
import torch

from taskct import cli, losses, train
from taskct.ctsim import Geometry, poisson_counts, radon, fbp, roi_mask
from taskct.data import SamplePair
from taskct.evaluation import dice_eval, dice_hard, hard_labels, psnr_roi, ssim_roi
from taskct.nets import UNetConfig, build_model, segment
from taskct.seeding import derive_seed


def _say(criterion, detail):
    print(f"[criterion {criterion}] PASS: {detail}")


# ---------------------------------------------------------------------------
# criterion 1: convex-combination loss identities, 1e-12, under a second

def test_criterion_1_loss_identities():
    g = torch.Generator().manual_seed(0)
    warm = torch.rand((1, 1, 16, 16), generator=g)
    warm_p = torch.softmax(torch.randn((1, 3, 16, 16), generator=g), dim=1)
    warm_g = torch.randint(0, 3, (1, 16, 16), generator=g)
    losses.task_adaptive_loss(warm, warm, warm_p, warm_g, 0.5)

    t0 = time.time()
    worst = 0.0
    for _ in range(100):
        recon = torch.rand((1, 1, 16, 16), generator=g)
        full = torch.rand((1, 1, 16, 16), generator=g)
        gt = torch.randint(0, 3, (1, 16, 16), generator=g)
        probs = torch.softmax(torch.randn((1, 3, 16, 16), generator=g), dim=1)
        a = torch.rand((), generator=g).item()
        mse = losses.mse_loss(recon, full).item()
        dce = losses.dice_loss(probs, gt).item()
        worst = max(
            worst,
            abs(losses.task_adaptive_loss(recon, full, probs, gt, 0.0).item() - mse),
            abs(losses.task_adaptive_loss(recon, full, probs, gt, 1.0).item() - dce),
            abs(losses.joint_loss(recon, full, probs, gt, 0.0).item() - mse),
            abs(losses.joint_loss(recon, full, probs, gt, 1.0).item() - dce),
            abs(losses.task_adaptive_loss(recon, full, probs, gt, a).item()
                - losses.joint_loss(recon, full, probs, gt, a).item()),
            abs(losses.mse_loss(full, full).item()),
        )
        onehot = torch.nn.functional.one_hot(gt, 3).permute(0, 3, 1, 2).float()
        worst = max(worst, abs(losses.dice_loss(onehot, gt).item()))
    elapsed = time.time() - t0

    assert worst <= 1e-12
    assert elapsed < 1.0
    _say(1, f"7 identities x 100 random inputs, worst residual {worst:.1e}, "
            f"{elapsed * 1e3:.0f} ms")


# ---------------------------------------------------------------------------
# criterion 2: finite-difference gradient checks, 64-bit, 16x16, under a minute

def test_criterion_2_finite_difference_gradients():
    t0 = time.time()
    g = torch.Generator().manual_seed(1)
    recon = torch.rand((1, 1, 16, 16), generator=g, dtype=torch.float64)
    full = torch.rand((1, 1, 16, 16), generator=g, dtype=torch.float64)
    gt = torch.randint(0, 3, (1, 16, 16), generator=g)
    probs = torch.softmax(
        torch.randn((1, 3, 16, 16), generator=g, dtype=torch.float64), dim=1)

    def rel_err(fn, x, grad, coords, h=1e-6):
        errs = []
        for c in coords:
            xp, xm = x.clone(), x.clone()
            xp[c] += h
            xm[c] -= h
            fd = (fn(xp) - fn(xm)) / (2 * h)
            an = grad[c].item()
            errs.append(abs(fd - an) / max(abs(an), 1e-8))
        return max(errs)

    rng = np.random.default_rng(2)

    def pix(shape, n=5):
        return [tuple(int(rng.integers(0, s)) for s in shape) for _ in range(n)]

    worst = 0.0
    # plain mse wrt the reconstruction
    mg = recon.clone().requires_grad_(True)
    losses.mse_loss(mg, full).backward()
    worst = max(worst, rel_err(
        lambda v: losses.mse_loss(v, full).item(),
        recon, mg.grad, pix(recon.shape)))

    # plain dice wrt the class probabilities
    dg = probs.clone().requires_grad_(True)
    losses.dice_loss(dg, gt).backward()
    worst = max(worst, rel_err(
        lambda v: losses.dice_loss(v, gt).item(),
        probs, dg.grad, pix(probs.shape)))

    # composite loss wrt the reconstruction
    rg = recon.clone().requires_grad_(True)
    losses.task_adaptive_loss(rg, full, probs, gt, 0.7).backward()
    worst = max(worst, rel_err(
        lambda v: losses.task_adaptive_loss(v, full, probs, gt, 0.7).item(),
        recon, rg.grad, pix(recon.shape)))

    # composite loss wrt the class probabilities
    pg = probs.clone().requires_grad_(True)
    losses.task_adaptive_loss(recon, full, pg, gt, 0.7).backward()
    worst = max(worst, rel_err(
        lambda v: losses.task_adaptive_loss(recon, full, v, gt, 0.7).item(),
        probs, pg.grad, pix(probs.shape)))

    # the full task-adaptive chain: loss through a frozen net into its input
    seg_cfg = UNetConfig(depth=1, base_channels=4, out_channels=3,
                         head="class_probs")
    frozen = build_model(seg_cfg, init_seed=3).freeze()
    frozen.module.double()

    def chain(v):
        return losses.task_adaptive_loss(
            v, full, segment(frozen, v[:, 0]), gt, 0.7).item()

    xg = recon.clone().requires_grad_(True)
    losses.task_adaptive_loss(
        xg, full, segment(frozen, xg[:, 0]), gt, 0.7).backward()
    worst = max(worst, rel_err(chain, recon, xg.grad, pix(recon.shape), h=1e-5))

    elapsed = time.time() - t0
    assert worst <= 1e-4
    assert elapsed < 60.0
    _say(2, f"FD vs autograd, worst relative error {worst:.1e}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 3: freeze contract and the alpha = 0 equivalence

def _acceptance_pairs(n=12, size=16, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        full = np.zeros((size, size), dtype=np.float32)
        cy, cx = rng.integers(4, size - 4, 2)
        yy, xx = np.mgrid[0:size, 0:size]
        blob = (yy - cy) ** 2 + (xx - cx) ** 2 <= 9
        full[blob] = 0.6
        seg = np.zeros((size, size), dtype=np.uint8)
        seg[blob] = 1
        low = full + rng.normal(0, 0.1, full.shape).astype(np.float32)
        out.append(SamplePair(low, full, seg, f"a{i:03d}"))
    return out


def test_criterion_3_freeze_and_alpha_zero_equivalence():
    t0 = time.time()
    pairs = _acceptance_pairs()
    recon_cfg = UNetConfig(depth=1, base_channels=4, head="unit_squash")
    seg_cfg = UNetConfig(depth=1, base_channels=4, out_channels=3,
                         head="class_probs")
    cfg = train.TrainConfig(max_epochs=3, batch_size=4, learning_rate=1e-3,
                            seed=11, validation_fraction=0.1)

    # frozen parameters are bitwise stable through a full training run
    # (9 optimizer steps here) while the reconstruction parameters move
    seg_model, _ = train.pretrain_segmentation(
        pairs, train.TrainConfig(max_epochs=1, batch_size=4, seed=11),
        net_config=seg_cfg)
    seg_model.freeze()
    before = seg_model.parameter_bytes()
    ta_model, _ = train.train_task_adaptive(pairs, seg_model, 0.5, cfg,
                                            recon_config=recon_cfg)
    assert seg_model.parameter_bytes() == before
    untrained = build_model(recon_cfg, derive_seed(cfg.seed, "recon-init"))
    assert ta_model.parameter_bytes() != untrained.parameter_bytes()

    # alpha = 0 reproduces a hand-written MSE loop step for step
    model, report = train.train_task_adaptive(pairs, None, 0.0, cfg,
                                              recon_config=recon_cfg)
    low, full, _ = train._stack_dataset(pairs)
    tr_idx, va_idx = train.val_split_indices(low.shape[0], cfg)
    manual = build_model(recon_cfg, derive_seed(cfg.seed, "recon-init"))
    opt = torch.optim.Adam(
        [p for p in manual.module.parameters() if p.requires_grad],
        lr=cfg.learning_rate)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(
        opt, factor=cfg.scheduler_factor, patience=cfg.scheduler_patience)
    steps, best, best_state = [], float("inf"), None
    for epoch in range(cfg.max_epochs):
        manual.module.train()
        for batch in train.epoch_batches(len(tr_idx), cfg.batch_size,
                                         cfg.seed, epoch):
            idx = tr_idx[batch]
            opt.zero_grad()
            loss = losses.mse_loss(manual.module(low[idx]), full[idx])
            steps.append(float(loss.detach()))
            loss.backward()
            opt.step()
        manual.module.eval()
        with torch.no_grad():
            vtotal = 0.0
            for k in range(0, len(va_idx), cfg.batch_size):
                idx = va_idx[k:k + cfg.batch_size]
                vtotal += float(losses.mse_loss(manual.module(low[idx]),
                                                full[idx])) * len(idx)
            val = vtotal / len(va_idx)
        if val < best:
            best, best_state = val, copy.deepcopy(manual.module.state_dict())
        sched.step(val)
    manual.module.load_state_dict(best_state)

    assert len(report.step_curve) == len(steps)
    worst = max(abs(a - b) for a, b in zip(report.step_curve, steps))
    assert worst <= 1e-12
    assert model.parameter_bytes() == manual.parameter_bytes()
    elapsed = time.time() - t0
    assert elapsed < 60.0
    _say(3, f"freeze bitwise stable; alpha=0 vs MSE loop, worst step gap "
            f"{worst:.1e}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 4: simulator physics

def test_criterion_4_simulator_physics():
    t0 = time.time()
    size = 256
    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2.0
    r = np.hypot(yy - c, xx - c)
    smooth = 0.8 * 0.5 * (1.0 + np.cos(np.pi * np.clip(r / 80.0, 0.0, 1.0)))
    geo = Geometry(num_angles=360, num_detectors=363, image_size=size)
    rec = fbp(radon(smooth, geo), "ramp")
    p = psnr_roi(rec, smooth, roi_mask(size, size // 2))
    assert p >= 30.0

    rng = np.random.default_rng(4)
    small = Geometry(num_angles=12, num_detectors=91, image_size=64)
    a, b = rng.random((64, 64)), rng.random((64, 64))
    lin = np.max(np.abs(
        radon(0.3 * a + 0.7 * b, small).values
        - 0.3 * radon(a, small).values - 0.7 * radon(b, small).values))
    assert lin <= 1e-6

    counts = poisson_counts(np.full(10000, 100.0), np.random.default_rng(5))
    moment = abs(counts.mean() - 100.0)
    assert moment <= 0.3

    elapsed = time.time() - t0
    assert elapsed < 60.0
    _say(4, f"fbp(radon(smooth)) {p:.1f} dB; linearity {lin:.1e}; "
            f"Poisson mean off by {moment:.3f}; {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 5: metric oracles

def test_criterion_5_metric_oracles():
    t0 = time.time()
    rng = np.random.default_rng(6)
    ref = rng.random((32, 32)) * 0.5
    mask = roi_mask(32, 12)
    off = abs(psnr_roi(ref + 0.1, ref, mask) - 20.0)
    assert off <= 1e-12

    x = rng.random((32, 32))
    self_gap = abs(ssim_roi(x, x, mask) - 1.0)
    assert self_gap <= 1e-9

    # out-of-mask invariance for both metrics
    noisy = ref + rng.normal(0, 0.05, ref.shape)
    vandal = noisy.copy()
    vandal[~mask] = 9.0
    assert psnr_roi(vandal, ref, mask) == psnr_roi(noisy, ref, mask)
    big_ref = rng.random((64, 64))
    big_x = big_ref + rng.normal(0, 0.02, big_ref.shape)
    big_mask = roi_mask(64, 16)
    far = np.hypot(*np.mgrid[0:64, 0:64] - 31.5) > 16 + 8
    vandal = big_x.copy()
    vandal[far] = 0.0
    ssim_gap = abs(ssim_roi(vandal, big_ref, big_mask)
                   - ssim_roi(big_x, big_ref, big_mask))
    assert ssim_gap <= 1e-12

    # hard Dice agrees with set arithmetic on 100 random label maps
    eps = 1e-6
    worst = 0.0
    for _ in range(100):
        pred = rng.integers(0, 3, (12, 12))
        gt = rng.integers(0, 3, (12, 12))
        got = dice_hard(pred, gt, classes=(1, 2), epsilon=eps)
        per_class = []
        for k in (1, 2):
            a = {(i, j) for i, j in zip(*np.nonzero(pred == k))}
            b = {(i, j) for i, j in zip(*np.nonzero(gt == k))}
            per_class.append((2 * len(a & b) + eps) / (len(a) + len(b) + eps))
        worst = max(worst, abs(got - float(np.mean(per_class))))
    assert worst <= 1e-12

    # and the model path reduces to exactly that arithmetic
    seg_cfg = UNetConfig(depth=1, base_channels=4, out_channels=3,
                         head="class_probs")
    frozen = build_model(seg_cfg, init_seed=9).freeze()
    img = rng.random((16, 16))
    gt16 = rng.integers(0, 3, (16, 16)).astype(np.uint8)
    decoupled = dice_hard(hard_labels(segment(frozen, img)), gt16,
                          classes=(1, 2), epsilon=eps)
    assert abs(dice_eval(img, gt16, frozen) - decoupled) <= 1e-12

    elapsed = time.time() - t0
    assert elapsed < 60.0
    _say(5, f"psnr offset gap {off:.1e}; ssim self gap {self_gap:.1e}; "
            f"dice set-oracle worst {worst:.1e}; {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criteria 6 and 7: the seeded toy experiment


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("accept") / "toy")
    t0 = time.time()
    code = cli.dispatch(["repro-toy", "--seed", "7", "--out", out])
    assert code == 0, "repro-toy failed"
    return {"dir": out, "minutes": (time.time() - t0) / 60.0}


def _rows(run_dir):
    path = os.path.join(run_dir, "report", "results.csv")
    with open(path, newline="") as fh:
        return {row["method"]: {k: float(v) for k, v in row.items()
                                if k != "method"}
                for row in csv.DictReader(fh)}


def test_criterion_6_toy_experiment_orderings(toy_run):
    rows = _rows(toy_run["dir"])
    low = rows["Low-dose"]
    base = rows["Base U-Net"]
    ta5 = rows["Task-adaptive a=0.5"]
    ta9 = rows["Task-adaptive a=0.9"]
    j9 = rows["Joint C=0.9"]
    fbp_row = rows["FBP"]
    full = rows["Full-dose"]

    # (a) pretrained segmentation quality on clean images
    assert full["dice_mean"] >= 0.90

    # (b) task-adaptive wins the task metric
    gap = ta5["dice_mean"] - base["dice_mean"]
    assert gap >= 0.05
    assert ta5["dice_mean"] > fbp_row["dice_mean"]
    assert all(full["dice_mean"] >= r["dice_mean"] for r in rows.values())

    # (c) and pays only a bounded fidelity price
    assert base["psnr_mean"] >= ta5["psnr_mean"] - 1.0
    assert ta5["psnr_mean"] >= low["psnr_mean"] + 3.0
    assert base["psnr_mean"] >= low["psnr_mean"] + 3.0

    # (d) joint co-adaptation loses fidelity faster than the frozen-net path
    assert j9["psnr_mean"] < ta9["psnr_mean"]

    _say(6, f"(a) full-dose dice {full['dice_mean']:.3f}; "
            f"(b) dice gap +{gap:.3f}, vs FBP "
            f"+{ta5['dice_mean'] - fbp_row['dice_mean']:.3f}; "
            f"(c) psnr margins ok; (d) joint {j9['psnr_mean']:.2f} < "
            f"ta {ta9['psnr_mean']:.2f} dB; run {toy_run['minutes']:.1f} min")


def test_criterion_7_toy_experiment_byte_identity(toy_run, tmp_path):
    out2 = str(tmp_path / "toy-again")
    code = cli.dispatch(["repro-toy", "--seed", "7", "--out", out2])
    assert code == 0
    matched = []
    for rel in (("report", "results.csv"), ("report", "results.json"),
                ("dataset", "manifest.json")):
        a = open(os.path.join(toy_run["dir"], *rel), "rb").read()
        b = open(os.path.join(out2, *rel), "rb").read()
        assert a == b, f"{'/'.join(rel)} differs between identical runs"
        matched.append("/".join(rel))
    _say(7, f"byte-identical re-run: {', '.join(matched)}")
