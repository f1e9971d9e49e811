"""Training losses with exact analytic input gradients.

Image terms (L1, D-SSIM, horizontal-gradient structure, alpha MSE)
operate on float64 arrays in [0, 1]; the two scale regularizers act on
post-activation face-local Gaussian scales split by a visibility mask.
Every operation returns (value, gradient) so the caller can chain into
the rasterizer backward without any framework.

Reductions are means over the contributing entries throughout; the two
regularizers also accept an L2 reduction ("norm") as a config escape
hatch, mean being the default.
"""

from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass
class LossWeights:
    """Weighted-total coefficients; defaults follow the training recipe."""

    ssim: float = 0.4  # inside the color term
    alpha: float = 0.5
    structure: float = 0.3
    invisible: float = 0.3
    scale: float = 0.15
    scale_floor: float = 0.15
    reduction: str = "mean"  # regularizers: "mean" or "l2"


@dataclass
class LossReport:
    total: float
    color: float
    l1: float
    dssim: float
    st: float
    alpha: float
    invis: float
    scale: float

    def as_row(self):
        return [self.total, self.color, self.l1, self.dssim, self.st,
                self.alpha, self.invis, self.scale]

    FIELDS = ("total", "color", "l1", "dssim", "st", "alpha", "invis",
              "scale")


def _check_shapes(pred, target):
    if pred.shape != target.shape:
        raise ValueError(
            f"prediction/target shape mismatch: {pred.shape} vs {target.shape}"
        )


def l1_loss(pred, target):
    """Mean absolute error and its sign/N gradient."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check_shapes(pred, target)
    diff = pred - target
    value = float(np.mean(np.abs(diff)))
    grad = np.sign(diff) / diff.size
    return value, grad


def ssim_window():
    idx = np.arange(SSIM_WINDOW) - (SSIM_WINDOW - 1) / 2.0
    g = np.exp(-(idx ** 2) / (2.0 * SSIM_SIGMA ** 2))
    g /= g.sum()
    return np.outer(g, g)


def dssim_loss(pred, target):
    """(1 - SSIM)/2 with an 11x11 Gaussian window, plus d/d pred.

    SSIM statistics come from valid-mode windowed means, so only fully
    covered pixels count; images must be at least the window size.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check_shapes(pred, target)
    orig_shape = pred.shape
    if pred.ndim == 2:
        pred = pred[..., None]
        target = target[..., None]
    h, w, channels = pred.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(
            f"image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} "
            "SSIM window"
        )
    win = ssim_window()
    grad = np.zeros_like(pred)
    ssim_sum = 0.0
    n_map = (h - SSIM_WINDOW + 1) * (w - SSIM_WINDOW + 1) * channels
    for c in range(channels):
        x = pred[..., c]
        y = target[..., c]
        mu_x = convolve2d(x, win, mode="valid")
        mu_y = convolve2d(y, win, mode="valid")
        sxx = convolve2d(x * x, win, mode="valid")
        syy = convolve2d(y * y, win, mode="valid")
        sxy = convolve2d(x * y, win, mode="valid")
        var_x = sxx - mu_x ** 2
        var_y = syy - mu_y ** 2
        cov = sxy - mu_x * mu_y
        a1 = 2.0 * mu_x * mu_y + SSIM_C1
        a2 = 2.0 * cov + SSIM_C2
        b1 = mu_x ** 2 + mu_y ** 2 + SSIM_C1
        b2 = var_x + var_y + SSIM_C2
        f = (a1 * a2) / (b1 * b2)
        ssim_sum += f.sum()
        # d dssim / d ssim_map = -1 / (2 n); chain into mu_x, sxx, sxy
        u = -1.0 / (2.0 * n_map)
        df_dmu = 2.0 * mu_y * (a2 - a1) / (b1 * b2) \
            - 2.0 * mu_x * f * (1.0 / b1 - 1.0 / b2)
        df_dsxx = -f / b2
        df_dsxy = 2.0 * a1 / (b1 * b2)
        # adjoint of a valid-mode correlation with a symmetric window
        back = convolve2d(u * df_dmu, win, mode="full")
        back += convolve2d(u * df_dsxx, win, mode="full") * 2.0 * x
        back += convolve2d(u * df_dsxy, win, mode="full") * y
        grad[..., c] = back
    value = float((1.0 - ssim_sum / n_map) / 2.0)
    return value, grad.reshape(orig_shape)


def color_loss(pred, target, ssim_weight=0.4):
    """(1 - w)·L1 + w·D-SSIM and the combined gradient."""
    v1, g1 = l1_loss(pred, target)
    v2, g2 = dssim_loss(pred, target)
    value = (1.0 - ssim_weight) * v1 + ssim_weight * v2
    grad = (1.0 - ssim_weight) * g1 + ssim_weight * g2
    return value, grad


def structure_loss(pred, target, weight=0.3, include_vertical=False):
    """Penalty on horizontal image-gradient mismatch.

    Both the forward [-1, 1] and mirrored [1, -1] difference kernels
    are evaluated; their squared mismatches coincide, and keeping both
    terms keeps the gradient literal. Vertical differences are an
    optional extension, off by default.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check_shapes(pred, target)
    d_lr = (pred[:, 1:] - pred[:, :-1]) - (target[:, 1:] - target[:, :-1])
    d_rl = (pred[:, :-1] - pred[:, 1:]) - (target[:, :-1] - target[:, 1:])
    n = d_lr.size
    value = float(np.mean(d_lr ** 2 + d_rl ** 2))
    grad = np.zeros_like(pred)
    glr = 2.0 * d_lr / n
    grad[:, 1:] += glr
    grad[:, :-1] -= glr
    grl = 2.0 * d_rl / n
    grad[:, :-1] += grl
    grad[:, 1:] -= grl
    if include_vertical:
        d_tb = (pred[1:] - pred[:-1]) - (target[1:] - target[:-1])
        m = d_tb.size
        value += float(2.0 * np.mean(d_tb ** 2))
        gtb = 4.0 * d_tb / m
        grad[1:] += gtb
        grad[:-1] -= gtb
    return weight * value, weight * grad


def alpha_loss(pred, target, weight=0.5):
    """Weighted mean squared error on the coverage map."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check_shapes(pred, target)
    diff = pred - target
    value = weight * float(np.mean(diff ** 2))
    grad = weight * 2.0 * diff / diff.size
    return value, grad


def invisible_scale_reg(scales, visible, reduction="mean"):
    """Size penalty on Gaussians the current frame culls entirely.

    scales (N, 3) post-activation; visible (N,) bool. Mean (or L2 norm)
    over the masked entries; zero when everything is visible.
    """
    scales = np.asarray(scales, dtype=np.float64)
    visible = np.asarray(visible, dtype=bool)
    grad = np.zeros_like(scales)
    masked = ~visible
    count = int(np.count_nonzero(masked)) * scales.shape[1]
    if count == 0:
        return 0.0, grad
    vals = scales[masked]
    if reduction == "l2":
        norm = float(np.sqrt(np.sum(vals ** 2)))
        if norm > 0.0:
            grad[masked] = vals / norm
        return norm, grad
    grad[masked] = 1.0 / count
    return float(vals.sum() / count), grad


def scale_threshold_reg(scales, visible, floor=0.15, reduction="mean"):
    """Floored size penalty on visible Gaussians.

    Each visible scale component contributes max(s, floor); invisible
    ones are zeroed by the mask first, so the floor lifts them to
    exactly `floor`. Gradient flows only through visible components
    above the floor.
    """
    scales = np.asarray(scales, dtype=np.float64)
    visible = np.asarray(visible, dtype=bool)
    if scales.size == 0:
        return 0.0, np.zeros_like(scales)
    masked = scales * visible[:, None]
    lifted = np.maximum(masked, floor)
    grad = np.where((masked > floor), 1.0, 0.0)
    if reduction == "l2":
        norm = float(np.sqrt(np.sum(lifted ** 2)))
        grad = grad * lifted / norm if norm > 0.0 else grad * 0.0
        return norm, grad
    n = scales.size
    return float(lifted.sum() / n), grad / n


def total_loss(pred, target, alpha_pred, alpha_target, scales, visible,
               weights=None):
    """All terms on one frame.

    Returns (LossReport, grads) where grads holds d/d color image,
    d/d alpha image and d/d local scales, each already weighted into
    the total.
    """
    w = weights or LossWeights()
    v_l1, g_l1 = l1_loss(pred, target)
    v_ds, g_ds = dssim_loss(pred, target)
    v_color = (1.0 - w.ssim) * v_l1 + w.ssim * v_ds
    g_color = (1.0 - w.ssim) * g_l1 + w.ssim * g_ds
    v_st, g_st = structure_loss(pred, target, weight=w.structure)
    v_alpha, g_alpha = alpha_loss(alpha_pred, alpha_target, weight=w.alpha)
    v_inv, g_inv = invisible_scale_reg(scales, visible, reduction=w.reduction)
    v_sc, g_sc = scale_threshold_reg(scales, visible, floor=w.scale_floor,
                                     reduction=w.reduction)
    total = v_color + v_alpha + v_st + w.invisible * v_inv + w.scale * v_sc
    report = LossReport(
        total=float(total), color=v_color, l1=v_l1, dssim=v_ds, st=v_st,
        alpha=v_alpha, invis=v_inv, scale=v_sc,
    )
    grads = {
        "color": g_color + g_st,
        "alpha": g_alpha,
        "scales": w.invisible * g_inv + w.scale * g_sc,
    }
    return report, grads
