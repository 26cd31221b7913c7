"""Measurement protocol: ROI-masked PSNR/SSIM, background-excluded Dice, the
method-by-method benchmark, and report rendering.

PSNR and SSIM are computed only inside the circular field of view (window
centers inside the mask for SSIM, 11x11 Gaussian window, K1=0.01, K2=0.03,
data range 1). Dice runs the frozen pretrained segmentation model on each
reconstruction, hard-labels by argmax and scores classes {1, 2} only.
"""

import csv
import io
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from . import rawio
from .ctsim import fbp, radon, roi_mask
from .errors import DimensionError, UsageError
from .nets import ModelHandle, reconstruct, segment

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
EVAL_CLASSES = (1, 2)

# canonical column order for results.csv
CSV_COLUMNS = ("method", "psnr_mean", "psnr_std", "ssim_mean", "ssim_std",
               "dice_mean", "dice_std", "n")


def _check_pair(x, ref, mask=None):
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise DimensionError(f"image shapes differ: {x.shape} vs {ref.shape}")
    if mask is not None and mask.shape != x.shape:
        raise DimensionError(f"mask shape {mask.shape} does not match image {x.shape}")
    return x, ref


def psnr_roi(x, ref, mask, data_range=1.0):
    """10*log10(range^2 / MSE over masked pixels), capped at 99.0 dB."""
    x, ref = _check_pair(x, ref, mask)
    if not mask.any():
        raise UsageError("psnr_roi needs a non-empty mask")
    diff = x[mask] - ref[mask]
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(data_range**2 / mse))


def _ssim_map(x, ref, data_range):
    radius = SSIM_WINDOW // 2
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (offsets / SSIM_SIGMA) ** 2)
    kernel /= kernel.sum()

    def filt(img):
        tmp = correlate1d(img, kernel, axis=0, mode="nearest")
        return correlate1d(tmp, kernel, axis=1, mode="nearest")

    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    ux, uy = filt(x), filt(ref)
    uxx, uyy, uxy = filt(x * x), filt(ref * ref), filt(x * ref)
    vx = uxx - ux * ux
    vy = uyy - uy * uy
    cov = uxy - ux * uy
    num = (2.0 * ux * uy + c1) * (2.0 * cov + c2)
    den = (ux * ux + uy * uy + c1) * (vx + vy + c2)
    return num / den


def ssim_roi(x, ref, mask, data_range=1.0):
    """Mean local SSIM over window centers inside the mask."""
    x, ref = _check_pair(x, ref, mask)
    if min(x.shape) < SSIM_WINDOW:
        raise UsageError(f"image smaller than the {SSIM_WINDOW}px SSIM window")
    if not mask.any():
        raise UsageError("ssim_roi needs a non-empty mask")
    return float(np.mean(_ssim_map(x, ref, data_range)[mask]))


def hard_labels(probs):
    """argmax over the class axis; ties break to the lowest class index."""
    return np.argmax(np.asarray(probs), axis=0).astype(np.uint8)


def dice_eval(recon, gt_seg, seg_model: ModelHandle, epsilon=1e-6):
    """Hard Dice of the frozen model's prediction, classes {1, 2} only."""
    if not seg_model.frozen:
        raise UsageError("dice_eval requires the frozen pretrained task model")
    if seg_model.config.head != "class_probs":
        raise UsageError("dice_eval requires a class_probs model")
    pred = hard_labels(segment(seg_model, np.asarray(recon, dtype=np.float32)))
    return dice_hard(pred, gt_seg, classes=EVAL_CLASSES, epsilon=epsilon)


def dice_hard(pred_labels, gt_seg, classes=EVAL_CLASSES, epsilon=1e-6):
    """Epsilon-smoothed set Dice between two hard label maps."""
    pred_labels = np.asarray(pred_labels)
    gt_seg = np.asarray(gt_seg)
    if pred_labels.shape != gt_seg.shape:
        raise DimensionError("label map shapes differ")
    terms = []
    for c in classes:
        a = pred_labels == c
        b = gt_seg == c
        inter = float(np.logical_and(a, b).sum())
        terms.append((2.0 * inter + epsilon) / (float(a.sum()) + float(b.sum()) + epsilon))
    return float(np.mean(terms))


@dataclass
class MetricRecord:
    method_name: str
    psnr_mean: float = 0.0
    psnr_std: float = 0.0
    ssim_mean: float = 0.0
    ssim_std: float = 0.0
    dice_mean: float = 0.0
    dice_std: float = 0.0
    n_samples: int = 0
    partial: bool = False
    errors: int = 0

    def to_dict(self):
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class MethodAdapter:
    """A named low_dose -> reconstruction transform for the benchmark.

    substitute_full=True marks the ground-truth reference row ("Full-dose"):
    the transform is ignored and the full-dose image is scored directly.
    """

    name: str
    transform: callable = None
    substitute_full: bool = False


def identity_adapter(name="Low-dose"):
    return MethodAdapter(name, lambda low: low)


def fbp_adapter(geometry, filter_name="hann-ramp", name="FBP"):
    """Re-project the low-dose image and reconstruct with the named filter."""
    def transform(low):
        return fbp(radon(np.asarray(low, dtype=np.float64), geometry), filter_name)
    return MethodAdapter(name, transform)


def denoiser_adapter(sigma=0.075, name="denoiser (reference)"):
    """Patch-similarity reference denoiser (not BM3D); sigma sets its strength."""
    from skimage.restoration import denoise_nl_means

    def transform(low):
        out = denoise_nl_means(np.asarray(low, dtype=np.float64), patch_size=5,
                               patch_distance=6, h=sigma, fast_mode=True)
        return np.clip(out, 0.0, 1.0)
    return MethodAdapter(name, transform)


def network_adapter(name, handle: ModelHandle):
    def transform(low):
        return reconstruct(handle, np.asarray(low, dtype=np.float32))
    return MethodAdapter(name, transform)


def full_dose_adapter(name="Full-dose"):
    return MethodAdapter(name, substitute_full=True)


def run_benchmark(methods, test_samples, seg_model: ModelHandle, geometry,
                  roi_radius=None):
    """Score every adapter on every test sample; aggregate mean +- std.

    Adapter failures on individual samples are recorded and skipped, flagging
    the record as partial. Row order follows the input method order.
    """
    test_samples = list(test_samples)
    if not test_samples:
        raise UsageError("benchmark needs a non-empty test split")
    size = geometry.image_size
    radius = roi_radius if roi_radius is not None else size // 2
    mask = roi_mask(size, radius)

    records = []
    for adapter in methods:
        scores = {"psnr": [], "ssim": [], "dice": []}
        errors = 0
        for sample in test_samples:
            try:
                if adapter.substitute_full:
                    rec = np.asarray(sample.full_dose, dtype=np.float64)
                else:
                    rec = np.asarray(adapter.transform(sample.low_dose), dtype=np.float64)
                if rec.shape != sample.low_dose.shape:
                    raise DimensionError(
                        f"adapter {adapter.name!r} changed the image shape")
                rec = np.clip(rec, 0.0, 1.0)
                scores["psnr"].append(psnr_roi(rec, sample.full_dose, mask))
                scores["ssim"].append(ssim_roi(rec, sample.full_dose, mask))
                scores["dice"].append(dice_eval(rec, sample.seg, seg_model))
            except Exception:
                errors += 1
        n = len(scores["psnr"])
        rec_out = MetricRecord(method_name=adapter.name, n_samples=n,
                               partial=errors > 0, errors=errors)
        if n:
            for key, prefix in (("psnr", "psnr"), ("ssim", "ssim"), ("dice", "dice")):
                vals = np.asarray(scores[key], dtype=np.float64)
                setattr(rec_out, prefix + "_mean", float(vals.mean()))
                setattr(rec_out, prefix + "_std", float(vals.std()))
        records.append(rec_out)
    return records


# ---------------------------------------------------------------------------
# report rendering

def _fmt(v):
    return f"{v:.6f}"


def records_to_csv_text(records):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in records:
        writer.writerow([
            r.method_name, _fmt(r.psnr_mean), _fmt(r.psnr_std), _fmt(r.ssim_mean),
            _fmt(r.ssim_std), _fmt(r.dice_mean), _fmt(r.dice_std), r.n_samples,
        ])
    return buf.getvalue()


def records_to_tables_text(records):
    lines = ["PSNR and SSIM (mean +- std), ROI-masked", ""]
    name_w = max(len(r.method_name) for r in records) + 2
    for r in records:
        lines.append(f"{r.method_name:<{name_w}} PSNR {r.psnr_mean:8.4f} +- {r.psnr_std:7.4f}"
                     f"   SSIM {r.ssim_mean:6.4f} +- {r.ssim_std:6.4f}")
    lines += ["", "Dice (mean +- std), pretrained segmentation model, background excluded", ""]
    for r in records:
        flag = "  [partial]" if r.partial else ""
        lines.append(f"{r.method_name:<{name_w}} Dice {r.dice_mean:6.4f} +- {r.dice_std:6.4f}{flag}")
    return "\n".join(lines) + "\n"


def render_report(records, out_dir, gallery=None):
    """Write results.csv / results.json / tables.txt and optional galleries.

    gallery: optional (sample_ids, test_samples, methods, seg_model, geometry)
    tuple; each named sample gets a side-by-side grid of reconstructions and
    predicted segmentation maps with per-image scores in the captions.
    """
    if not records:
        raise UsageError("render_report needs at least one record")
    rawio.ensure_dir(out_dir)
    with open(os.path.join(out_dir, "results.csv"), "w", encoding="utf-8") as fh:
        fh.write(records_to_csv_text(records))
    rawio.write_json(os.path.join(out_dir, "results.json"),
                     {"records": [r.to_dict() for r in records]})
    with open(os.path.join(out_dir, "tables.txt"), "w", encoding="utf-8") as fh:
        fh.write(records_to_tables_text(records))
    if gallery is not None:
        _render_gallery(out_dir, *gallery)


def load_records(path):
    return [MetricRecord.from_dict(d) for d in rawio.read_json(path)["records"]]


def gallery_panels(sample, methods):
    """Panel list for one gallery grid: low-dose, every method, full-dose.

    Always exactly len(methods) + 2 panels per row type.
    """
    panels = [("Low-dose input", np.asarray(sample.low_dose, dtype=np.float64))]
    for adapter in methods:
        img = (np.asarray(sample.full_dose, dtype=np.float64)
               if adapter.substitute_full
               else np.clip(np.asarray(adapter.transform(sample.low_dose),
                                       dtype=np.float64), 0.0, 1.0))
        panels.append((adapter.name, img))
    panels.append(("Full-dose truth", np.asarray(sample.full_dose, dtype=np.float64)))
    return panels


def _render_gallery(out_dir, sample_ids, test_samples, methods, seg_model, geometry):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    by_id = {s.sample_id: s for s in test_samples}
    unknown = [sid for sid in sample_ids if sid not in by_id]
    if unknown:
        raise UsageError(f"gallery ids not in the test split: {unknown}")
    size = geometry.image_size
    mask = roi_mask(size, size // 2)
    gal_dir = rawio.ensure_dir(os.path.join(out_dir, "gallery"))

    for sid in sample_ids:
        sample = by_id[sid]
        panels = gallery_panels(sample, methods)
        ncols = len(panels)  # methods + 2 per row type
        fig, axes = plt.subplots(2, ncols, figsize=(2.1 * ncols, 4.6))
        for col, (name, img) in enumerate(panels):
            p = psnr_roi(img, sample.full_dose, mask)
            s = ssim_roi(img, sample.full_dose, mask)
            d = dice_eval(img, sample.seg, seg_model)
            pred = hard_labels(segment(seg_model, img.astype(np.float32)))
            axes[0, col].imshow(img, cmap="gray", vmin=0, vmax=1)
            axes[0, col].set_title(f"{name}\n{p:.1f}dB / {s:.3f} / {d:.3f}", fontsize=7)
            axes[1, col].imshow(pred, cmap="viridis", vmin=0, vmax=2)
            axes[1, col].set_title("predicted seg", fontsize=7)
            for row in (0, 1):
                axes[row, col].set_xticks([])
                axes[row, col].set_yticks([])
        fig.tight_layout()
        fig.savefig(os.path.join(gal_dir, f"{sid}.png"), dpi=110)
        plt.close(fig)
