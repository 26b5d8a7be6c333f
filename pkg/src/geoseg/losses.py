"""Loss terms for dual-decoder geometry-aware consistency training.

Supervised part (labeled items only): Dice + cross-entropy on both
segmentation heads, plus mean-squared error of both distance heads against
the normalized signed-distance target.  Consistency part (all items): the
cross-decoder, cross-task disagreement between each segmentation map and
the distance-derived segmentation map of the other decoder, optionally
weighted by the exponential boundary emphasis.  A ramp-up schedule grows
the consistency weight over training.

All means are per-voxel so the mixing coefficients stay crop-size free.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .geometry import approx_inverse, boundary_weights
from .tensor import Tensor, logsumexp_channel, mse

CONSISTENCY_MODES = ("none", "mc", "gc", "wgc")


@dataclass(frozen=True)
class LossConfig:
    rho: float = 2.0            # boundary weight sharpness
    k: float = 1500.0           # distance-to-probability sharpness
    beta: float = 0.3           # distance-task weight in the supervised loss
    lambda_max: float = 0.1     # consistency weight at the end of ramp-up
    ramp_power: int = 1         # exponent on (1 - t/t_max) in the ramp
    consistency: str = "wgc"    # none | mc | gc | wgc
    dice_eps: float = 1e-5
    sign_mode: str = "inside-negative"

    def __post_init__(self):
        if self.rho <= 0:
            raise ConfigError(f"rho must be positive, got {self.rho}")
        if self.k <= 0:
            raise ConfigError(f"k must be positive, got {self.k}")
        if self.beta < 0:
            raise ConfigError(f"beta must be non-negative, got {self.beta}")
        if self.lambda_max <= 0:
            raise ConfigError(f"lambda_max must be positive, got {self.lambda_max}")
        if self.ramp_power not in (1, 2):
            raise ConfigError(f"ramp_power must be 1 or 2, got {self.ramp_power}")
        if self.consistency not in CONSISTENCY_MODES:
            raise ConfigError(f"consistency must be one of {CONSISTENCY_MODES}, "
                              f"got {self.consistency!r}")
        if self.dice_eps <= 0:
            raise ConfigError(f"dice_eps must be positive, got {self.dice_eps}")


@dataclass
class LossBreakdown:
    loss_seg: float
    loss_sdf: float
    loss_sup: float
    loss_cons: float
    lam: float
    loss_total: float
    total: Tensor = field(repr=False)

    CSV_FIELDS = ("loss_seg", "loss_sdf", "loss_sup", "loss_cons", "lambda",
                  "loss_total")

    def csv_values(self):
        return (self.loss_seg, self.loss_sdf, self.loss_sup, self.loss_cons,
                self.lam, self.loss_total)


def _constant(target, like=None):
    t = Tensor(np.asarray(target, dtype=np.float64))
    if like is not None and t.shape != like.shape:
        raise ShapeError(f"target shape {t.shape} does not match prediction "
                         f"shape {like.shape}")
    return t


def _with_channel(y):
    # masks / distance targets travel channel-less; predictions carry [N,1,...]
    return np.asarray(y, dtype=np.float64)[:, None]


def dice_loss(pred_fg, target_fg, eps=1e-5):
    """Soft Dice loss 1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps)."""
    t = _constant(target_fg, like=pred_fg)
    inter = (pred_fg * t).sum()
    denom = pred_fg.sum() + t.sum()
    return 1.0 - (inter * 2.0 + eps) / (denom + eps)


def cross_entropy_loss(seg_logits, target_fg):
    """Mean voxel-wise cross-entropy from 2-channel logits.

    Computed with the log-sum-exp form, so no probability is ever passed
    through a bare log.
    """
    if seg_logits.ndim < 3 or seg_logits.shape[1] != 2:
        raise ShapeError(f"expected [N,2,spatial...] logits, got {seg_logits.shape}")
    y = np.asarray(target_fg, dtype=np.float64)
    if y.ndim == seg_logits.ndim:
        y = y[:, 0]
    if y.shape != seg_logits.shape[:1] + seg_logits.shape[2:]:
        raise ShapeError(f"target shape {y.shape} does not match logits "
                         f"shape {seg_logits.shape}")
    yc = y[:, None]
    lse = logsumexp_channel(seg_logits)
    z0 = seg_logits.narrow(1, 0, 1)
    z1 = seg_logits.narrow(1, 1, 1)
    z_true = z0 * Tensor(1.0 - yc) + z1 * Tensor(yc)
    return (lse - z_true).mean()


def seg_supervised_loss(outputs, y, eps=1e-5):
    """Supervised segmentation loss: 0.5 * (dice + ce) summed over decoders."""
    yc = _with_channel(y)
    return (dice_loss(outputs.seg1, yc, eps) + cross_entropy_loss(outputs.logits1, y)
            + dice_loss(outputs.seg2, yc, eps)
            + cross_entropy_loss(outputs.logits2, y)) * 0.5


def sdf_supervised_loss(outputs, sdm_target):
    """Mean of the two distance-head MSEs against the normalized target."""
    t = Tensor(_with_channel(sdm_target))
    return (mse(outputs.sdm1, t) + mse(outputs.sdm2, t)) * 0.5


def geometry_consistency_loss(outputs, k=1500.0, sign_mode="inside-negative"):
    """Unweighted cross-decoder, cross-task consistency.

    Mean over voxels of (seg1 - inv(sdm2))^2 + (seg2 - inv(sdm1))^2, with
    gradients flowing through both operands of each term.
    """
    t1 = (outputs.seg1 - approx_inverse(outputs.sdm2, k, sign_mode)).square()
    t2 = (outputs.seg2 - approx_inverse(outputs.sdm1, k, sign_mode)).square()
    return (t1 + t2).mean()


def weighted_geometry_consistency_loss(outputs, rho=2.0, k=1500.0,
                                       sign_mode="inside-negative", weights=None):
    """Boundary-weighted consistency: each decoder's term is scaled by the
    exponential weight of its own predicted distance map.

    ``weights`` can carry precomputed (w1, w2) arrays; otherwise they are
    derived from the current distance predictions.  Either way the weights
    are constants in the gradient.
    """
    if weights is None:
        w1 = boundary_weights(outputs.sdm1, rho)
        w2 = boundary_weights(outputs.sdm2, rho)
    else:
        w1, w2 = (Tensor(np.asarray(w)) for w in weights)
    t1 = (outputs.seg1 - approx_inverse(outputs.sdm2, k, sign_mode)).square()
    t2 = (outputs.seg2 - approx_inverse(outputs.sdm1, k, sign_mode)).square()
    return (t1 * w1 + t2 * w2).mean()


def mutual_consistency_loss(outputs):
    """Same-task cross-decoder consistency (ablation baseline)."""
    return mse(outputs.seg1, outputs.seg2) + mse(outputs.sdm1, outputs.sdm2)


def ramp_up(t, t_max, lambda_max=0.1, power=1):
    """Consistency weight lambda(t) = lambda_max * exp(-5 * (1 - t/t_max)^power).

    t beyond t_max clamps to t_max, so the weight never overshoots.
    """
    if t_max <= 0:
        raise ConfigError(f"t_max must be positive, got {t_max}")
    if t < 0:
        raise ConfigError(f"step index must be non-negative, got {t}")
    frac = min(float(t), float(t_max)) / float(t_max)
    return float(lambda_max * np.exp(-5.0 * (1.0 - frac) ** power))


def supervised_loss(outputs, y, sdm_target, beta=0.3, eps=1e-5):
    """Combined supervised loss: segmentation + beta * distance regression."""
    return (seg_supervised_loss(outputs, y, eps)
            + sdf_supervised_loss(outputs, sdm_target) * beta)


def consistency_loss(outputs, config):
    """Dispatch on the configured consistency mode; None when disabled."""
    if config.consistency == "none":
        return None
    if config.consistency == "mc":
        return mutual_consistency_loss(outputs)
    if config.consistency == "gc":
        return geometry_consistency_loss(outputs, config.k, config.sign_mode)
    return weighted_geometry_consistency_loss(outputs, config.rho, config.k,
                                              config.sign_mode)


def total_loss(outputs, batch, t, t_max, config):
    """Assemble the full training objective for one batch.

    The supervised part sees only the labeled slice of the batch; the
    consistency part sees every item.  Returns the scalar graph plus the
    logged breakdown.
    """
    n_lab = batch.n_labeled
    if n_lab == 0:
        raise ConfigError("batch contains no labeled items; supervised loss "
                          "is undefined")
    lab = outputs.labeled_slice(n_lab)
    l_seg = seg_supervised_loss(lab, batch.masks, config.dice_eps)
    l_sdf = sdf_supervised_loss(lab, batch.sdm_targets)
    l_sup = l_seg + l_sdf * config.beta
    lam = ramp_up(t, t_max, config.lambda_max, config.ramp_power)
    l_cons = consistency_loss(outputs, config)
    if l_cons is None:
        total = l_sup
        cons_value = 0.0
    else:
        total = l_sup + l_cons * lam
        cons_value = l_cons.item()
    return LossBreakdown(loss_seg=l_seg.item(), loss_sdf=l_sdf.item(),
                         loss_sup=l_sup.item(), loss_cons=cons_value,
                         lam=lam, loss_total=total.item(), total=total)
