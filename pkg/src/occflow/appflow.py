"""Appearance-flow network and the flow refinement block.

An appearance flow A is a displacement field over the *same* image: warping
a flow field U by A copies plausible motion vectors from visible pixels
into occluded ones. AppFlowNetLite estimates A from the masked image, the
mask, and a borrowed feature map from the main network; refine_flow applies
it.
"""

import numpy as np

from ._blocks import ContextBlock, DenseFlowEstimator, estimate_residual
from .diffcore import ConvLayer, Tensor, add, concat, leaky_relu, mul, resize_bilinear
from .errors import DimensionError
from .flowops import FlowField, OcclusionMask, flow_resize, warp_bilinear


class AppFlowNetLite:
    """Two-scale appearance-flow estimator with a shared decoder.

    The encoder produces feature maps at full and half resolution; one
    decoder (dense estimator + context block) runs at both scales, the
    half-scale result upsampled as the full-scale initial flow. The decoder
    parameters at the two scales are literally the same storage.
    """

    def __init__(self, image_channels=3, feature_channels=16, rng=None,
                 encoder_widths=(16, 32), unify_channels=16,
                 decoder_widths=(16, 16, 16, 16, 16), context_width=16):
        in_ch = image_channels + 1  # masked image stacked with the mask
        w1, w2 = encoder_widths
        self.image_channels = image_channels
        self.feature_channels = feature_channels
        self.enc1 = ConvLayer(in_ch, w1, 3, rng=rng)
        self.enc2 = ConvLayer(w1, w2, 3, stride=2, rng=rng)
        self.unify1 = ConvLayer(w1, unify_channels, 1, rng=rng)
        self.unify2 = ConvLayer(w2, unify_channels, 1, rng=rng)
        dec_in = unify_channels + feature_channels + 2
        self.estimator = DenseFlowEstimator(dec_in, decoder_widths, rng=rng)
        self.context = ContextBlock(decoder_widths[-1] + 2, context_width, rng=rng)

    def named_parameters(self, prefix="appflow."):
        out = []
        out += self.enc1.named_parameters(prefix + "enc1.")
        out += self.enc2.named_parameters(prefix + "enc2.")
        out += self.unify1.named_parameters(prefix + "unify1.")
        out += self.unify2.named_parameters(prefix + "unify2.")
        out += self.estimator.named_parameters(prefix + "estimator.")
        out += self.context.named_parameters(prefix + "context.")
        return out

    def param_count(self):
        return sum(t.size for _, t in self.named_parameters())


def masked_image(image, mask):
    """Q(p) = I(p) * (1 - M(p)): zero out occluded pixels."""
    if not isinstance(mask, OcclusionMask):
        mask = OcclusionMask(mask)
    if image.shape[2:] != mask.shape[2:]:
        raise DimensionError(
            f"image {image.shape} and mask {mask.shape} disagree spatially")
    return mul(image, mask.inverted())


def appflow_forward(net, feature, image, mask):
    """Estimate the appearance flow A for one scale of the pyramid.

    feature is the main network's unified feature map at this scale (reused
    here to avoid redundant extraction), image the scale-matched frame, mask
    the occlusion map whose holes A must learn to bridge. The half-scale
    decoder pass starts from a zero flow; its upsampled output seeds the
    full-scale pass.
    """
    if not isinstance(mask, OcclusionMask):
        mask = OcclusionMask(mask)
    if (feature.shape[2:] != image.shape[2:]
            or image.shape[2:] != mask.shape[2:]):
        raise DimensionError(
            f"appflow_forward: feature {feature.shape}, image {image.shape} "
            f"and mask {mask.shape} must share spatial dims")
    if feature.shape[1] != net.feature_channels:
        raise DimensionError(
            f"expected {net.feature_channels} feature channels, got {feature.shape[1]}")

    q = masked_image(image, mask)
    stack = concat([q, mask.data], axis=1)
    e1 = leaky_relu(net.enc1(stack))
    e2 = leaky_relu(net.enc2(e1))
    u1 = leaky_relu(net.unify1(e1))
    u2 = leaky_relu(net.unify2(e2))

    n, _, h, w = image.shape
    h2, w2 = e2.shape[2], e2.shape[3]
    f2 = resize_bilinear(feature, h2, w2)
    zero = Tensor(np.zeros((n, 2, h2, w2)))
    flow_half = estimate_residual(
        net.estimator, net.context, concat([u2, f2, zero], axis=1), zero)

    init = flow_resize(flow_half, h, w)
    flow_full = estimate_residual(
        net.estimator, net.context, concat([u1, feature, init], axis=1), init)
    return FlowField(flow_full)


def refine_flow(initial, aflow, mask, composite=True):
    """Inpaint a flow field with an appearance flow.

    The literal form warps the whole field: V = warp(U, A). Composite mode
    (default) touches only occluded vectors: V = M*warp(U, A) + (1-M)*U.
    Differentiable w.r.t. U and A; the mask is a constant.
    """
    u = initial.data if isinstance(initial, FlowField) else initial
    a = aflow.data if isinstance(aflow, FlowField) else aflow
    if not isinstance(mask, OcclusionMask):
        mask = OcclusionMask(mask)
    if u.shape != a.shape or u.shape[2:] != mask.shape[2:]:
        raise DimensionError(
            f"refine_flow: flow {u.shape}, appearance flow {a.shape} and "
            f"mask {mask.shape} must share resolution")
    warped, _ = warp_bilinear(u, a)
    if not composite:
        return FlowField(warped)
    return FlowField(add(mul(mask.data, warped), mul(mask.inverted(), u)))
