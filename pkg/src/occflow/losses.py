"""Unsupervised loss terms and their weighted combination.

Four terms drive training: a photometric term and a census-descriptor term
(both masked warp-reconstruction penalties), an inpainting term supervising
the appearance flow on occluded support, and a first-order smoothness term.
Occlusion masks are constants everywhere; gradients reach only flows,
appearance flows, and images.
"""

from dataclasses import dataclass, field

import numpy as np

from .diffcore import Tensor, abs_, mean, mul, pow_const
from .errors import ParameterError
from .flowops import FlowField, OcclusionMask, boundary_dilated_warp, census_transform, warp_bilinear


@dataclass(frozen=True)
class RobustPenaltyParams:
    """psi(x) = (|x| + epsilon)^q, a sub-quadratic penalty."""

    epsilon: float = 0.01
    q: float = 0.4

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ParameterError("epsilon must be > 0")
        if not 0 < self.q <= 1:
            raise ParameterError("q must lie in (0, 1]")


@dataclass(frozen=True)
class LossWeights:
    lambda_p: float = 1.0
    lambda_c: float = 0.01
    lambda_a: float = 1.0
    lambda_s: float = 0.05

    def __post_init__(self):
        if min(self.lambda_p, self.lambda_c, self.lambda_a, self.lambda_s) < 0:
            raise ParameterError("loss weights must be >= 0")


@dataclass
class LossTerm:
    """One loss component: differentiable value plus normalization stats."""

    value: Tensor
    pixels: float = 0.0
    degenerate: bool = False

    def item(self):
        return self.value.item()


@dataclass
class LossReport:
    """Scalar summary of one training step, one JSON object per step."""

    photometric: float
    census: float
    inpainting: float
    smoothness: float
    total: float
    pixels: dict = field(default_factory=dict)
    degenerate: dict = field(default_factory=dict)
    total_tensor: Tensor = None

    def to_json(self):
        return {
            "photometric": self.photometric,
            "census": self.census,
            "inpainting": self.inpainting,
            "smoothness": self.smoothness,
            "total": self.total,
            "pixels": self.pixels,
            "degenerate": self.degenerate,
        }


def robust_penalty(x, params=None):
    """Elementwise (|x| + eps)^q; subgradient 0 at x = 0."""
    params = params or RobustPenaltyParams()
    return pow_const(abs_(x) + params.epsilon, params.q)


def _zero():
    return Tensor(np.zeros(()))


def _data(x):
    return x.data if isinstance(x, (FlowField, OcclusionMask)) else x


def _masked_warp_penalty(target, warped, weight, params):
    # weighted mean of psi(channel-mean |target - warped|) over weight > 0
    denom = float(weight.sum())
    if denom == 0.0:
        return LossTerm(_zero(), 0.0, degenerate=True)
    diff = mean(abs_(target - warped), axis=1, keepdims=True)
    pen = robust_penalty(diff, params)
    value = mul(pen, Tensor(weight)).sum() / denom
    return LossTerm(value, denom)


def _warp_weight(pair, flow, direction, mask, use_bdw):
    """Warped reconstruction plus its loss weight for one direction.

    With boundary dilated warping, samples beyond the raw frame drop out of
    the support. The plain warp keeps full (1 - M) support so its zero-filled
    out-of-crop samples are *penalized*: that wrong boundary supervision is
    precisely what BDW exists to remove.
    """
    if use_bdw:
        warped, valid = boundary_dilated_warp(pair, flow, direction)
        weight = (1.0 - mask.numpy()) * valid.numpy()
    else:
        src = pair.crop2 if direction == "forward" else pair.crop1
        warped, _ = warp_bilinear(src, _data(flow))
        weight = 1.0 - mask.numpy()
    return warped, weight


def photometric_loss(pair, vf, vb, mf, mb, use_bdw=True, params=None):
    """Masked warp-reconstruction penalty, both directions.

    Each direction is the weighted mean of psi(channel-mean |I - I_tilde|)
    over non-occluded support; the two directions add. Returns a LossTerm;
    empty support in both directions gives 0 with the degenerate flag set.
    """
    params = params or RobustPenaltyParams()
    w1, weight1 = _warp_weight(pair, vf, "forward", mf, use_bdw)
    w2, weight2 = _warp_weight(pair, vb, "backward", mb, use_bdw)
    t1 = _masked_warp_penalty(pair.crop1, w1, weight1, params)
    t2 = _masked_warp_penalty(pair.crop2, w2, weight2, params)
    return LossTerm(t1.value + t2.value, t1.pixels + t2.pixels,
                    t1.degenerate or t2.degenerate)


def census_loss(pair, vf, vb, mf, mb, window=7, use_bdw=True, params=None):
    """Photometric-form penalty on census descriptors.

    The census transform applies AFTER warping, to each of the four images
    involved, so the descriptors of the reconstruction see its actual
    neighborhoods.
    """
    params = params or RobustPenaltyParams()
    w1, weight1 = _warp_weight(pair, vf, "forward", mf, use_bdw)
    w2, weight2 = _warp_weight(pair, vb, "backward", mb, use_bdw)
    c1 = census_transform(pair.crop1, window)
    c2 = census_transform(pair.crop2, window)
    t1 = _masked_warp_penalty(c1, census_transform(w1, window), weight1, params)
    t2 = _masked_warp_penalty(c2, census_transform(w2, window), weight2, params)
    return LossTerm(t1.value + t2.value, t1.pixels + t2.pixels,
                    t1.degenerate or t2.degenerate)


def _inpaint_one(image, aflow, mask, params):
    m = mask.numpy()
    support = float(m.sum())
    if support == 0.0:
        return _zero(), 0.0
    masked = mul(image, Tensor(1.0 - m))
    recon, _ = warp_bilinear(masked, _data(aflow))
    diff = mean(abs_(image - recon), axis=1, keepdims=True)
    pen = robust_penalty(diff, params)
    return mul(pen, Tensor(m)).sum() / support, support


def inpainting_loss(images_per_scale, aflows_per_scale, masks_per_scale,
                    params=None):
    """Appearance-flow supervision, summed over scales and directions.

    Per scale and direction: mask the image, warp it by the appearance
    flow, and average psi(channel-mean |I - recon|) over the occluded
    support. Scales whose appearance flow is absent (None) or whose mask is
    empty contribute 0. Gradients flow into the appearance flows, never
    into the optical flows.
    """
    params = params or RobustPenaltyParams()
    if not (len(images_per_scale) == len(aflows_per_scale)
            == len(masks_per_scale)):
        raise ParameterError("per-scale loss inputs must align")
    value = _zero()
    pixels = 0.0
    for images, aflows, masks in zip(images_per_scale, aflows_per_scale,
                                     masks_per_scale):
        if aflows is None:
            continue
        for image, aflow, mask in zip(images, aflows, masks):
            if aflow is None:
                continue
            v, n = _inpaint_one(image, aflow, mask, params)
            value = value + v
            pixels += n
    return LossTerm(value, pixels)


def inpainting_inputs(out, include_full=True):
    """Assemble inpainting_loss arguments from a PyramidOutput."""
    images = [(i1, i2) for i1, i2 in zip(out.images1, out.images2)]
    aflows = [(af, ab) if af is not None else None
              for af, ab in zip(out.aflow_f, out.aflow_b)]
    masks = [(mf, mb) for mf, mb in zip(out.masks_f, out.masks_b)]
    if include_full and out.full_aflow_f is not None:
        images.append((out.full_image1, out.full_image2))
        aflows.append((out.full_aflow_f, out.full_aflow_b))
        masks.append((out.full_mask_f, out.full_mask_b))
    return images, aflows, masks


def _tv(flow):
    f = _data(flow)
    dx = f[:, :, :, 1:] - f[:, :, :, :-1]
    dy = f[:, :, 1:, :] - f[:, :, :-1, :]
    return mean(abs_(dx)) + mean(abs_(dy))


def smoothness_loss(vf, vb):
    """First-order total variation of both flows.

    Mean over pixels and channels of |forward difference|, x and y added,
    both flows added; boundary differences are omitted.
    """
    return LossTerm(_tv(vf) + _tv(vb))


def total_loss(photometric, census, inpainting, smoothness, weights=None):
    """Weighted combination of the four terms into a LossReport."""
    weights = weights or LossWeights()
    total = (weights.lambda_p * photometric.value
             + weights.lambda_c * census.value
             + weights.lambda_a * inpainting.value
             + weights.lambda_s * smoothness.value)
    return LossReport(
        photometric=photometric.item(),
        census=census.item(),
        inpainting=inpainting.item(),
        smoothness=smoothness.item(),
        total=total.item(),
        pixels={"photometric": photometric.pixels,
                "census": census.pixels,
                "inpainting": inpainting.pixels},
        degenerate={"photometric": photometric.degenerate,
                    "census": census.degenerate},
        total_tensor=total,
    )
