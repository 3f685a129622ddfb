"""End-to-end pyramid flow network.

A shared fully convolutional encoder extracts feature pyramids from both
frames; at each scale, per-scale 1x1 convs unify channel width, the
previous scale's flow warps the second feature map, a correlation volume
feeds a scale-shared dense estimator + context decoder, and the occlusion
masks gate an optional appearance-flow refinement. A final refinement can
run once more at full image resolution on upsampled finest features.

The estimator carries a parameter-free matching prior: where the scale is
large enough, normalized-cross-correlation patch matching on the
downsampled frames produces an initial flow with sub-pixel peak
interpolation, and the learned convolutions emit residuals on top of it.
Classical matching needs no training, so the decoder starts from
roughly correct flows instead of having to learn cost-volume decoding
from scratch before any other signal appears.
"""

from dataclasses import dataclass, field

import numpy as np

from . import backend
from ._blocks import ContextBlock, DenseFlowEstimator, estimate_residual
from .appflow import AppFlowNetLite, appflow_forward, refine_flow
from .diffcore import ConvLayer, Tensor, concat, leaky_relu, resize_bilinear
from .errors import ConfigError, DimensionError
from .flowops import (
    FlowField,
    OccCheckParams,
    correlation,
    flow_resize,
    in_frame_mask,
    occlusion_mask,
    warp_bilinear,
)

# matching prior runs only where the map is big enough for its patches
SEED_MIN_SIZE = 16
SEED_PATCH = 9


@dataclass
class NetworkConfig:
    """Shape and hyper-parameters of the pyramid network.

    num_scales pyramid levels run estimation; level i has spatial size
    image_size / 2^(num_scales+1-i), so the finest level is 1/4 of the
    input. Defaults are the desk-scale setup (64x64, three levels at
    1/16, 1/8, 1/4); the full five-level variant stays constructible.
    """

    num_scales: int = 3
    uniform_channels: int = 16
    corr_max_disp: int = 4
    image_size: tuple = (64, 64)
    image_channels: int = 3
    occ_params: OccCheckParams = field(default_factory=OccCheckParams)
    encoder_widths: tuple = None  # coarsest-first; None = 16 + 8 per level
    stem_width: int = 8
    estimator_widths: tuple = (48, 48, 32)
    context_width: int = 32
    composite_refine: bool = True
    occlusion_from: str = "initial"

    def __post_init__(self):
        if self.num_scales < 1:
            raise ConfigError("num_scales must be >= 1")
        if self.uniform_channels < 1 or self.corr_max_disp < 0:
            raise ConfigError("bad channel or displacement setting")
        h, w = self.image_size
        div = 1 << (self.num_scales + 1)
        if h % div or w % div:
            raise ConfigError(
                f"image size {h}x{w} not divisible by 2^(num_scales+1) = {div}")
        if self.encoder_widths is None:
            self.encoder_widths = tuple(
                16 + 8 * (self.num_scales - 1 - i) for i in range(self.num_scales))
        elif len(self.encoder_widths) != self.num_scales:
            raise ConfigError("encoder_widths must list one width per scale")
        if self.occlusion_from not in ("initial", "final"):
            raise ConfigError("occlusion_from must be 'initial' or 'final'")

    def scale_sizes(self):
        """Spatial sizes per pyramid level, coarsest first."""
        h, w = self.image_size
        return [(h >> (self.num_scales + 1 - i), w >> (self.num_scales + 1 - i))
                for i in range(self.num_scales)]


class Encoder:
    """Stride-2 conv pyramid shared by both frames.

    A stem conv reaches 1/2 scale, then each level applies one stride-2 and
    one stride-1 conv. Returns features coarsest first.
    """

    def __init__(self, config, rng=None):
        widths_fine_first = list(reversed(config.encoder_widths))
        self.stem = ConvLayer(config.image_channels, config.stem_width, 3,
                              stride=2, rng=rng)
        self.stages = []
        ch = config.stem_width
        for w in widths_fine_first:
            self.stages.append((ConvLayer(ch, w, 3, stride=2, rng=rng),
                                ConvLayer(w, w, 3, rng=rng)))
            ch = w

    def __call__(self, frame):
        x = leaky_relu(self.stem(frame))
        feats = []
        for down, keep in self.stages:
            x = leaky_relu(keep(leaky_relu(down(x))))
            feats.append(x)
        return list(reversed(feats))

    def named_parameters(self, prefix=""):
        out = self.stem.named_parameters(prefix + "stem.")
        for i, (down, keep) in enumerate(self.stages):
            out += down.named_parameters(f"{prefix}stage{i}.down.")
            out += keep.named_parameters(f"{prefix}stage{i}.keep.")
        return out


class FlowDecoder:
    """Per-scale decoding bundle: own unify conv, shared estimator/context."""

    def __init__(self, unify, estimator, context, max_disp):
        self.unify = unify
        self.estimator = estimator
        self.context = context
        self.max_disp = max_disp


class OccInpFlowNet:
    """The full network: encoder, per-scale decoders, appearance-flow net.

    The dense estimator and context block are one parameter set reused at
    every scale and in both flow directions; only the unify convs are
    per-scale. The appearance-flow net is likewise a single instance.
    """

    def __init__(self, config=None, rng=None):
        self.config = config or NetworkConfig()
        c = self.config
        self.encoder = Encoder(c, rng=rng)
        self.unify = [ConvLayer(w, c.uniform_channels, 1, rng=rng)
                      for w in c.encoder_widths]
        corr_ch = (2 * c.corr_max_disp + 1) ** 2
        est_in = c.uniform_channels + corr_ch + 2
        self.estimator = DenseFlowEstimator(est_in, c.estimator_widths, rng=rng)
        self.context = ContextBlock(c.estimator_widths[-1] + 2,
                                    c.context_width, rng=rng)
        self.appflow = AppFlowNetLite(image_channels=c.image_channels,
                                      feature_channels=c.uniform_channels,
                                      rng=rng)
        self.decoders = [FlowDecoder(u, self.estimator, self.context,
                                     c.corr_max_disp) for u in self.unify]

    def named_parameters(self):
        out = self.encoder.named_parameters("encoder.")
        for i, u in enumerate(self.unify):
            out += u.named_parameters(f"unify{i}.")
        out += self.estimator.named_parameters("estimator.")
        out += self.context.named_parameters("context.")
        out += self.appflow.named_parameters("appflow.")
        return out

    def flow_parameters(self):
        """Everything except the appearance-flow net (stage-1/2 training)."""
        return [(n, p) for n, p in self.named_parameters()
                if not n.startswith("appflow.")]

    def param_count(self):
        return sum(t.size for _, t in self.named_parameters())

    def state_dict(self):
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise DimensionError(
                f"state dict mismatch: missing {sorted(missing)[:3]}, "
                f"unexpected {sorted(extra)[:3]}")
        for n, p in params.items():
            arr = np.asarray(state[n], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise DimensionError(
                    f"parameter {n}: shape {arr.shape} != {p.data.shape}")
            p.data = arr.copy()


@dataclass
class PyramidOutput:
    """Every per-scale and full-resolution product of one forward pass.

    Lists are coarsest-first with one entry per pyramid level. Flows are
    FlowFields in pixels of their own scale; masks are constants. aflow
    entries are None at scales where refinement did not run.
    """

    initial_f: list
    initial_b: list
    refined_f: list
    refined_b: list
    masks_f: list
    masks_b: list
    inframe_f: list
    inframe_b: list
    aflow_f: list
    aflow_b: list
    images1: list
    images2: list
    full_initial_f: FlowField
    full_initial_b: FlowField
    full_f: FlowField
    full_b: FlowField
    full_mask_f: 'OcclusionMask'
    full_mask_b: 'OcclusionMask'
    full_inframe_f: 'OcclusionMask'
    full_inframe_b: 'OcclusionMask'
    full_aflow_f: FlowField = None
    full_aflow_b: FlowField = None
    full_image1: Tensor = None
    full_image2: Tensor = None


def extract_features(encoder, frame):
    """Run the shared encoder on one frame; features coarsest first."""
    div = 1 << (len(encoder.stages) + 1)
    if frame.shape[2] % div or frame.shape[3] % div:
        raise ConfigError(
            f"frame size {frame.shape[2]}x{frame.shape[3]} not divisible by {div}")
    return encoder(frame)


def _patch_descriptors(img, patch):
    # zero-mean unit-norm patch vectors; the sqrt(dim) factor cancels the
    # channel-mean in the correlation kernel so scores are plain cosines
    n, c, h, w = img.shape
    pad = patch // 2
    xp = np.pad(img, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(xp, (patch, patch),
                                                   axis=(2, 3))
    feat = win.reshape(n, c, h, w, patch * patch)
    feat = feat.transpose(0, 1, 4, 2, 3).reshape(n, c * patch * patch, h, w)
    feat = feat - feat.mean(axis=1, keepdims=True)
    feat = feat / (np.sqrt((feat ** 2).sum(axis=1, keepdims=True)) + 1e-6)
    feat = feat * np.sqrt(feat.shape[1]).astype(img.dtype)
    return np.ascontiguousarray(feat)


def match_seed(img1, img2, max_disp, patch=SEED_PATCH):
    """Parameter-free flow prior from patch matching.

    Correlates normalized patch descriptors of the two images over integer
    displacements up to max_disp, takes the best-scoring displacement per
    pixel, and refines each axis with a three-point parabola fit. Returns
    a plain (N, 2, H, W) array in pixels of the input resolution.
    """
    e1 = _patch_descriptors(np.asarray(img1), patch)
    e2 = _patch_descriptors(np.asarray(img2), patch)
    corr = backend.kernels.correlation_forward(e1, e2, max_disp)
    n, _, h, w = corr.shape
    side = 2 * max_disp + 1
    best = corr.argmax(axis=1)
    dy0, dx0 = np.divmod(best, side)
    flow = np.stack([dx0 - max_disp, dy0 - max_disp], axis=1).astype(img1.dtype)
    grid = corr.reshape(n, side, side, h, w)
    bi, yi, xi = np.ogrid[:n, :h, :w]
    for chan, d0 in ((0, dx0), (1, dy0)):
        inner = (d0 > 0) & (d0 < side - 1)
        dc = np.clip(d0, 1, side - 2)
        if chan == 0:
            mid = grid[bi, dy0, dc, yi, xi]
            lo = grid[bi, dy0, dc - 1, yi, xi]
            hi = grid[bi, dy0, dc + 1, yi, xi]
        else:
            mid = grid[bi, dc, dx0, yi, xi]
            lo = grid[bi, dc - 1, dx0, yi, xi]
            hi = grid[bi, dc + 1, dx0, yi, xi]
        den = lo - 2.0 * mid + hi
        safe = np.where(den == 0, 1.0, den)
        off = np.where(np.abs(den) > 1e-12, 0.5 * (lo - hi) / safe, 0.0)
        flow[:, chan] += np.clip(off, -0.5, 0.5) * inner
    return flow


def _estimate(decoder, fu1, fu2, prev_flow, seed=None):
    # decoder pass on already-unified features
    n, _, h, w = fu1.shape
    if prev_flow is None:
        up = Tensor(np.zeros((n, 2, h, w), dtype=fu1.dtype))
        f2w = fu2
    else:
        prev = prev_flow.data if isinstance(prev_flow, FlowField) else prev_flow
        up = flow_resize(prev, h, w)
        f2w, _ = warp_bilinear(fu2, up)
    corr = leaky_relu(correlation(fu1, f2w, decoder.max_disp))
    if seed is None:
        base = up
    else:
        base = Tensor(np.ascontiguousarray(seed, dtype=fu1.dtype))
    est_in = concat([fu1, corr, base], axis=1)
    flow = estimate_residual(decoder.estimator, decoder.context, est_in, base)
    return FlowField(flow)


def _seed_for(img1, img2, max_disp):
    h, w = img1.shape[2], img1.shape[3]
    if max_disp < 1 or min(h, w) < SEED_MIN_SIZE:
        return None
    return match_seed(img1.data if isinstance(img1, Tensor) else img1,
                      img2.data if isinstance(img2, Tensor) else img2,
                      max_disp)


def estimate_initial_flow(decoder, f1, f2, prev_flow=None, images=None):
    """One scale of flow estimation from raw encoder features.

    Applies the scale's unify conv to both feature maps, upsamples and
    applies the previous scale's flow to warp the second map, correlates,
    and decodes a residual flow. Swap f1/f2 for the backward direction.
    When the frames downsampled to this scale are given, the matching
    prior supplies the base flow the decoder refines.
    """
    if f1.shape != f2.shape:
        raise DimensionError(f"feature shapes disagree: {f1.shape} vs {f2.shape}")
    fu1 = leaky_relu(decoder.unify(f1))
    fu2 = leaky_relu(decoder.unify(f2))
    seed = None
    if images is not None:
        seed = _seed_for(images[0], images[1], decoder.max_disp)
    return _estimate(decoder, fu1, fu2, prev_flow, seed)


def _want(refine_scales, key, enabled):
    if not enabled:
        return False
    if refine_scales is None:
        return True
    return key in refine_scales


def forward_pass(net, pair, enable_refine=False, refine_scales=None):
    """Full bidirectional pyramid pass over a frame pair.

    Estimates initial flows coarse to fine, derives occlusion and in-frame
    masks, optionally refines each scale's flows with the appearance-flow
    net, then upsamples to image resolution and (optionally) refines once
    more there. refine_scales limits refinement to the given scale indices
    (the string "full" selects the full-resolution pass); None means
    everywhere.
    """
    c = net.config
    h, w = c.image_size
    if pair.crop_h != h or pair.crop_w != w:
        raise ConfigError(
            f"crop {pair.crop_h}x{pair.crop_w} does not match config {h}x{w}")

    feats1 = extract_features(net.encoder, pair.crop1)
    feats2 = extract_features(net.encoder, pair.crop2)
    sizes = c.scale_sizes()

    out = PyramidOutput([], [], [], [], [], [], [], [], [], [], [], [],
                        None, None, None, None, None, None, None, None)
    prev_f = prev_b = None
    fu1 = fu2 = None
    for i in range(c.num_scales):
        dec = net.decoders[i]
        fu1 = leaky_relu(dec.unify(feats1[i]))
        fu2 = leaky_relu(dec.unify(feats2[i]))
        sh, sw = sizes[i]
        img1 = resize_bilinear(pair.crop1, sh, sw)
        img2 = resize_bilinear(pair.crop2, sh, sw)
        u_f = _estimate(dec, fu1, fu2, prev_f, _seed_for(img1, img2, dec.max_disp))
        u_b = _estimate(dec, fu2, fu1, prev_b, _seed_for(img2, img1, dec.max_disp))

        m_f = occlusion_mask(u_f.data, u_b.data, c.occ_params)
        m_b = occlusion_mask(u_b.data, u_f.data, c.occ_params)

        if _want(refine_scales, i, enable_refine):
            a_f = appflow_forward(net.appflow, fu1, img1, m_f)
            a_b = appflow_forward(net.appflow, fu2, img2, m_b)
            v_f = refine_flow(u_f, a_f, m_f, composite=c.composite_refine)
            v_b = refine_flow(u_b, a_b, m_b, composite=c.composite_refine)
        else:
            a_f = a_b = None
            v_f, v_b = u_f, u_b

        if c.occlusion_from == "final":
            m_f = occlusion_mask(v_f.data, v_b.data, c.occ_params)
            m_b = occlusion_mask(v_b.data, v_f.data, c.occ_params)
        out.initial_f.append(u_f)
        out.initial_b.append(u_b)
        out.refined_f.append(v_f)
        out.refined_b.append(v_b)
        out.masks_f.append(m_f)
        out.masks_b.append(m_b)
        out.inframe_f.append(in_frame_mask(m_f, v_f.data))
        out.inframe_b.append(in_frame_mask(m_b, v_b.data))
        out.aflow_f.append(a_f)
        out.aflow_b.append(a_b)
        out.images1.append(img1)
        out.images2.append(img2)
        prev_f, prev_b = v_f, v_b

    up_f = flow_resize(prev_f, h, w)
    up_b = flow_resize(prev_b, h, w)
    out.full_initial_f = up_f
    out.full_initial_b = up_b
    out.full_image1 = pair.crop1
    out.full_image2 = pair.crop2
    m_f = occlusion_mask(up_f.data, up_b.data, c.occ_params)
    m_b = occlusion_mask(up_b.data, up_f.data, c.occ_params)

    if _want(refine_scales, "full", enable_refine):
        feat1_full = resize_bilinear(fu1, h, w)
        feat2_full = resize_bilinear(fu2, h, w)
        a_f = appflow_forward(net.appflow, feat1_full, pair.crop1, m_f)
        a_b = appflow_forward(net.appflow, feat2_full, pair.crop2, m_b)
        v_f = refine_flow(up_f, a_f, m_f, composite=c.composite_refine)
        v_b = refine_flow(up_b, a_b, m_b, composite=c.composite_refine)
        out.full_aflow_f, out.full_aflow_b = a_f, a_b
    else:
        v_f, v_b = up_f, up_b

    if c.occlusion_from == "final":
        m_f = occlusion_mask(v_f.data, v_b.data, c.occ_params)
        m_b = occlusion_mask(v_b.data, v_f.data, c.occ_params)
    out.full_f, out.full_b = v_f, v_b
    out.full_mask_f, out.full_mask_b = m_f, m_b
    out.full_inframe_f = in_frame_mask(m_f, v_f.data)
    out.full_inframe_b = in_frame_mask(m_b, v_b.data)
    return out
