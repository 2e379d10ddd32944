"""Training objectives and image metrics.

Everything that feeds the optimizer is built from tape primitives, so every
loss is differentiable end to end — including the median/MAD normalization
inside the depth loss (median is a sorted gather, valid almost everywhere).
"""

import math
from dataclasses import dataclass

import numpy as np

from .numerics import Tensor, ops

PSNR_CAP = 99.0


@dataclass
class LossWeights:
    lambda_perceptual: float = 0.5
    lambda_opacity: float = 0.1
    lambda_depth: float = 0.01
    smooth_l1_beta: float = 1.0

    def __post_init__(self):
        if min(self.lambda_perceptual, self.lambda_opacity,
               self.lambda_depth, self.smooth_l1_beta) < 0:
            raise ValueError("loss weights must be non-negative")


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


# ------------------------------------------------------------ image losses

def mse_loss(pred, gt):
    pred, gt = _as_tensor(pred), _as_tensor(gt)
    d = ops.sub(pred, gt)
    return ops.tmean(ops.mul(d, d))


def psnr(pred, gt, cap=PSNR_CAP):
    """Peak signal-to-noise ratio in dB for [0,1] images (float, capped)."""
    p = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    g = gt.data if isinstance(gt, Tensor) else np.asarray(gt)
    m = float(np.mean((np.asarray(p, np.float64) - g) ** 2))
    if m <= 0:
        return cap
    return min(cap, -10.0 * math.log10(m))


def _gauss_window(size=11, sigma=1.5):
    half = (size - 1) / 2
    g = np.exp(-((np.arange(size) - half) ** 2) / (2 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def _window_filter(x, window):
    """Valid-mode 2-d correlation with a small fixed window, per channel.

    Composed from shifted slices so it stays on the tape.
    """
    h, w = x.shape[0], x.shape[1]
    kh, kw = window.shape
    out = None
    for i in range(kh):
        for j in range(kw):
            term = ops.mul(ops.getitem(x, (slice(i, i + h - kh + 1),
                                           slice(j, j + w - kw + 1))),
                           float(window[i, j]))
            out = term if out is None else ops.add(out, term)
    return out


def ssim(pred, gt, window_size=11, sigma=1.5, c1=0.01 ** 2, c2=0.03 ** 2):
    """Mean structural similarity over valid 11x11 Gaussian windows.

    Images are (H,W,C) in [0,1]; returns a scalar tensor in [-1,1].
    """
    pred, gt = _as_tensor(pred), _as_tensor(gt)
    if pred.shape[0] < window_size or pred.shape[1] < window_size:
        raise ValueError(f"image smaller than the {window_size}x{window_size} ssim window")
    win = _gauss_window(window_size, sigma)
    mu_p = _window_filter(pred, win)
    mu_g = _window_filter(gt, win)
    mu_pp = ops.mul(mu_p, mu_p)
    mu_gg = ops.mul(mu_g, mu_g)
    mu_pg = ops.mul(mu_p, mu_g)
    var_p = ops.sub(_window_filter(ops.mul(pred, pred), win), mu_pp)
    var_g = ops.sub(_window_filter(ops.mul(gt, gt), win), mu_gg)
    cov = ops.sub(_window_filter(ops.mul(pred, gt), win), mu_pg)
    num = ops.mul(ops.add(ops.mul(mu_pg, 2.0), c1), ops.add(ops.mul(cov, 2.0), c2))
    den = ops.mul(ops.add(ops.add(mu_pp, mu_gg), c1), ops.add(ops.add(var_p, var_g), c2))
    return ops.tmean(ops.div(num, den))


def _half_scale(x):
    """2x2 average pooling; trailing odd row/column is cropped."""
    h, w = x.shape[0] // 2 * 2, x.shape[1] // 2 * 2
    x = ops.getitem(x, (slice(0, h), slice(0, w)))
    x = ops.reshape(x, (h // 2, 2, w // 2, 2, x.shape[-1]))
    return ops.tmean(x, axis=(1, 3))


def _mae(a, b):
    return ops.tmean(ops.absolute(ops.sub(a, b)))


def _grad_terms(a, b):
    gx = _mae(ops.sub(ops.getitem(a, (slice(None), slice(1, None))),
                      ops.getitem(a, (slice(None), slice(0, -1)))),
              ops.sub(ops.getitem(b, (slice(None), slice(1, None))),
                      ops.getitem(b, (slice(None), slice(0, -1)))))
    gy = _mae(ops.sub(ops.getitem(a, slice(1, None)), ops.getitem(a, slice(0, -1))),
              ops.sub(ops.getitem(b, slice(1, None)), ops.getitem(b, slice(0, -1))))
    return ops.add(gx, gy)


def perceptual_loss(pred, gt, scales=3):
    """Stand-in for a pretrained-feature loss: mean absolute error on images
    and their finite-difference gradients at scales 1, 1/2, 1/4."""
    a, b = _as_tensor(pred), _as_tensor(gt)
    total = None
    for s in range(scales):
        if s:
            a, b = _half_scale(a), _half_scale(b)
        term = ops.add(_mae(a, b), _grad_terms(a, b))
        total = term if total is None else ops.add(total, term)
    return ops.div(total, float(scales))


# ------------------------------------------------------------ depth loss

def disparity_from_gaussians(t):
    """Ray distances (N,H,W) -> disparity 1/t (same shape)."""
    return ops.div(1.0, t)


def _median(flat):
    n = flat.shape[0]
    idx = np.argsort(flat.data, kind="stable")
    mid = n // 2
    if n % 2:
        return ops.gather(flat, idx[mid:mid + 1])
    return ops.tmean(ops.gather(flat, idx[mid - 1:mid + 1]), keepdims=True)


def normalize_disparity(d, eps=1e-6):
    flat = ops.reshape(d, (-1,))
    med = _median(flat)
    dev = ops.sub(flat, med)
    mad = ops.clamp(ops.tmean(ops.absolute(dev)), lo=eps)
    return ops.div(dev, mad)


def _smooth_l1(x, beta):
    ax = ops.absolute(x)
    quad = ops.div(ops.mul(ops.mul(x, x), 0.5), beta)
    lin = ops.sub(ax, 0.5 * beta)
    small = ax.data < beta
    return ops.add(ops.masked_fill(quad, ~small, 0.0), ops.masked_fill(lin, small, 0.0))


def depth_loss(pred, target, beta=1.0):
    """Scale-invariant disparity loss: median/MAD-normalize both maps
    per view, then smooth-L1 averaged over pixels."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"disparity shapes differ: {pred.shape} vs {target.shape}")
    maps = pred.shape[0] if len(pred.shape) == 3 else 1
    total = None
    for i in range(maps):
        p = ops.getitem(pred, i) if len(pred.shape) == 3 else pred
        t = ops.getitem(target, i) if len(target.shape) == 3 else target
        term = ops.tmean(_smooth_l1(ops.sub(normalize_disparity(p),
                                            normalize_disparity(t)), beta))
        total = term if total is None else ops.add(total, term)
    return ops.div(total, float(maps))


def opacity_loss(g):
    """Mean opacity; L1 on values already in (0,1)."""
    return ops.tmean(g.opacity)


# ------------------------------------------------------------ combination

def total_loss(pred_images, gt_images, pred_disparity, gt_disparity, g,
               weights=None):
    """Weighted objective plus a float breakdown of every component.

    pred/gt images: sequences of (H,W,3) tensors/arrays, one per supervised
    view. Image term = MSE + lambda_perceptual * perceptual, averaged over
    views. Total = image + lambda_opacity * opacity + lambda_depth * depth.
    """
    w = weights or LossWeights()
    if len(pred_images) != len(gt_images) or not pred_images:
        raise ValueError("need equally many (and at least one) pred/gt views")
    img_term = None
    mse_acc = perc_acc = 0.0
    for p, t in zip(pred_images, gt_images):
        m = mse_loss(p, t)
        pc = perceptual_loss(p, t)
        mse_acc += m.item()
        perc_acc += pc.item()
        term = ops.add(m, ops.mul(pc, w.lambda_perceptual))
        img_term = term if img_term is None else ops.add(img_term, term)
    n = float(len(pred_images))
    img_term = ops.div(img_term, n)
    dep = depth_loss(pred_disparity, gt_disparity, beta=w.smooth_l1_beta)
    opa = opacity_loss(g)
    total = ops.add(img_term, ops.add(ops.mul(opa, w.lambda_opacity),
                                      ops.mul(dep, w.lambda_depth)))
    breakdown = {
        "mse": mse_acc / n,
        "perceptual": perc_acc / n,
        "image": img_term.item(),
        "depth": dep.item(),
        "opacity": opa.item(),
        "total": total.item(),
    }
    return total, breakdown


def metric_report(per_view, loss_breakdown=None, gaussian_usage=None):
    """Assemble the evaluation report structure (JSON-serializable)."""
    report = {
        "views": per_view,
        "mean_psnr": float(np.mean([v["psnr"] for v in per_view])) if per_view else None,
        "mean_ssim": float(np.mean([v["ssim"] for v in per_view])) if per_view else None,
    }
    if loss_breakdown is not None:
        report["loss"] = loss_breakdown
    if gaussian_usage is not None:
        report["gaussian_usage"] = float(gaussian_usage)
    return report
