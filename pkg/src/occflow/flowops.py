"""Flow-domain operators.

Bilinear and boundary dilated warping, forward-backward occlusion checks,
in-frame masks, cost-volume correlation, the soft census transform, and
flow-field rescaling. Flow layout is (N, 2, H, W) with channel 0 the
horizontal displacement u (pixels, +x right) and channel 1 the vertical
displacement v (+y down).
"""

from dataclasses import dataclass, field

import numpy as np

from . import backend as _backend
from .diffcore import Tensor, _acc, _node, mean, mul, resize_bilinear
from .errors import DimensionError, ParameterError


def _tensor_of(x):
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (FlowField, OcclusionMask)):
        return x.data
    return Tensor(x)


class FlowField:
    """A dense displacement field, (N, 2, H, W), in pixels of its own scale."""

    def __init__(self, data):
        data = _tensor_of(data)
        if data.ndim != 4 or data.shape[1] != 2:
            raise DimensionError(f"flow field must be (N, 2, H, W), got {data.shape}")
        self.data = data

    @classmethod
    def zeros(cls, n, h, w):
        return cls(Tensor(np.zeros((n, 2, h, w))))

    @property
    def shape(self):
        return self.data.shape

    def numpy(self):
        return self.data.numpy()

    def magnitude(self):
        """Per-pixel Euclidean norm as a plain (N, 1, H, W) array."""
        d = self.data.numpy()
        return np.sqrt(d[:, 0:1] ** 2 + d[:, 1:2] ** 2)


class OcclusionMask:
    """Binary per-pixel map, (N, 1, H, W); 1 marks an occluded pixel.

    The mask is a constant for differentiation purposes: it is stored
    detached, and no gradient ever flows through it.
    """

    def __init__(self, data):
        data = _tensor_of(data).detach()
        if data.ndim != 4 or data.shape[1] != 1:
            raise DimensionError(f"mask must be (N, 1, H, W), got {data.shape}")
        values = data.numpy()
        if not ((values == 0) | (values == 1)).all():
            raise ParameterError("occlusion mask must be binary")
        self.data = data

    @classmethod
    def zeros(cls, n, h, w):
        return cls(Tensor(np.zeros((n, 1, h, w))))

    @property
    def shape(self):
        return self.data.shape

    def numpy(self):
        return self.data.numpy()

    def inverted(self):
        """(1 - M) as a detached Tensor, for loss weighting."""
        return Tensor(1.0 - self.data.numpy())


@dataclass(frozen=True)
class OccCheckParams:
    """Forward-backward consistency tolerances of the occlusion check."""

    alpha1: float = 0.01
    alpha2: float = 0.5

    def __post_init__(self):
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise ParameterError("occlusion check tolerances must be >= 0")


@dataclass
class FramePair:
    """A cropped frame pair plus the raw frames it was cut from.

    p0 is the (row, col) of the crop's upper-left pixel inside the raw
    frames; crop_k(p) = raw_k(p0 + p) exactly.
    """

    raw1: Tensor
    raw2: Tensor
    crop1: Tensor
    crop2: Tensor
    p0: tuple
    crop_h: int = field(default=0)
    crop_w: int = field(default=0)

    def __post_init__(self):
        self.raw1 = _tensor_of(self.raw1)
        self.raw2 = _tensor_of(self.raw2)
        self.crop1 = _tensor_of(self.crop1)
        self.crop2 = _tensor_of(self.crop2)
        if not self.crop_h:
            self.crop_h = self.crop1.shape[2]
        if not self.crop_w:
            self.crop_w = self.crop1.shape[3]
        py, px = self.p0
        raw_h, raw_w = self.raw1.shape[2], self.raw1.shape[3]
        if py < 0 or px < 0 or py + self.crop_h > raw_h or px + self.crop_w > raw_w:
            raise ParameterError(
                f"crop {self.crop_h}x{self.crop_w} at p0={self.p0} leaves the "
                f"{raw_h}x{raw_w} raw frame")
        if self.crop1.shape != self.crop2.shape or self.raw1.shape != self.raw2.shape:
            raise DimensionError("frame pair shapes disagree")

    @classmethod
    def from_raw(cls, raw1, raw2, p0, crop_h, crop_w):
        raw1, raw2 = _tensor_of(raw1), _tensor_of(raw2)
        py, px = p0
        crop1 = Tensor(raw1.numpy()[:, :, py:py + crop_h, px:px + crop_w])
        crop2 = Tensor(raw2.numpy()[:, :, py:py + crop_h, px:px + crop_w])
        return cls(raw1, raw2, crop1, crop2, (py, px), crop_h, crop_w)


# -- warping ----------------------------------------------------------------

def _warp_node(src, flow, off_y, off_x):
    k = _backend.kernels
    out_data, valid_data = k.bilinear_warp_forward(
        src.data, flow.data, off_y, off_x)
    out = _node(out_data, (src, flow))
    if out.requires_grad:
        def _bw(g):
            gsrc, gflow = _backend.kernels.bilinear_warp_backward(
                src.data, flow.data, off_y, off_x, np.ascontiguousarray(g))
            _acc(src, gsrc, own=True)
            _acc(flow, gflow, own=True)
        out._backward = _bw
    return out, Tensor(valid_data)


def warp_bilinear(source, flow):
    """Backward-warp: output(p) = source(p + flow(p)).

    Returns (warped, validity). Sample points outside [0, W-1] x [0, H-1]
    are zero-filled and get validity 0. Differentiable w.r.t. source and
    flow; validity is a constant.
    """
    source = _tensor_of(source)
    flow = _tensor_of(flow)
    if flow.ndim != 4 or flow.shape[1] != 2:
        raise DimensionError(f"flow must be (N, 2, H, W), got {flow.shape}")
    if source.shape[0] != flow.shape[0] or source.shape[2:] != flow.shape[2:]:
        raise DimensionError(
            f"warp_bilinear: source {source.shape} and flow {flow.shape} "
            "must share batch and spatial dims")
    return _warp_node(source, flow, 0, 0)


def boundary_dilated_warp(pair, flow, direction):
    """Warp that samples the RAW frame at p0 + p + flow(p).

    Pixels whose motion leaves the crop but stays inside the raw frame are
    recovered instead of invalidated; only samples beyond the raw frame get
    validity 0. direction "forward" samples raw frame 2 (reconstructing
    frame 1), "backward" samples raw frame 1.
    """
    flow = _tensor_of(flow)
    if direction == "forward":
        src = pair.raw2
    elif direction == "backward":
        src = pair.raw1
    else:
        raise ParameterError(f"direction must be 'forward' or 'backward', got {direction!r}")
    if flow.shape[2] != pair.crop_h or flow.shape[3] != pair.crop_w:
        raise DimensionError(
            f"boundary_dilated_warp: flow {flow.shape} does not match "
            f"crop {pair.crop_h}x{pair.crop_w}")
    py, px = pair.p0
    return _warp_node(src, flow, py, px)


# -- occlusion reasoning ------------------------------------------------------

def _sample_clamp(src, xx, yy):
    # bilinear gather with border clamp; plain numpy, no gradients
    n, c, h, w = src.shape
    xx = np.clip(xx, 0.0, w - 1.0)
    yy = np.clip(yy, 0.0, h - 1.0)
    x0 = np.floor(xx).astype(np.int64)
    y0 = np.floor(yy).astype(np.int64)
    fx = (xx - x0).astype(src.dtype)
    fy = (yy - y0).astype(src.dtype)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    out = np.empty((n, c, xx.shape[1], xx.shape[2]), dtype=src.dtype)
    for b in range(n):
        v00 = src[b][:, y0[b], x0[b]]
        v01 = src[b][:, y0[b], x1[b]]
        v10 = src[b][:, y1[b], x0[b]]
        v11 = src[b][:, y1[b], x1[b]]
        wy, wx = fy[b][None], fx[b][None]
        out[b] = ((1 - wy) * ((1 - wx) * v00 + wx * v01)
                  + wy * ((1 - wx) * v10 + wx * v11))
    return out


def occlusion_mask(vf, vb, params=None):
    """Forward-backward consistency occlusion map.

    M(p) = 1 iff |V_f(p) + V_b(p + V_f(p))| > alpha1*(|V_f(p)| + |V_b(p)|)
    + alpha2, with Euclidean norms and V_b sampled bilinearly (border
    clamped, so constant opposite fields are consistent everywhere). The
    result is a constant: no gradient flows through the check.
    """
    params = params or OccCheckParams()
    vf = _tensor_of(vf).numpy()
    vb = _tensor_of(vb).numpy()
    if vf.shape != vb.shape:
        raise DimensionError(f"flow shapes disagree: {vf.shape} vs {vb.shape}")
    n, _, h, w = vf.shape
    grid_x = np.arange(w, dtype=vf.dtype)[None, None, :]
    grid_y = np.arange(h, dtype=vf.dtype)[None, :, None]
    xx = grid_x + vf[:, 0]
    yy = grid_y + vf[:, 1]
    vb_at = _sample_clamp(vb, xx, yy)
    residual = np.sqrt((vf[:, 0] + vb_at[:, 0]) ** 2 + (vf[:, 1] + vb_at[:, 1]) ** 2)
    norm_f = np.sqrt(vf[:, 0] ** 2 + vf[:, 1] ** 2)
    norm_b = np.sqrt(vb[:, 0] ** 2 + vb[:, 1] ** 2)
    threshold = params.alpha1 * (norm_f + norm_b) + params.alpha2
    mask = (residual > threshold).astype(vf.dtype)[:, None]
    return OcclusionMask(Tensor(mask))


def in_frame_mask(mask, flow):
    """Keep mask entries whose displaced point stays inside the frame.

    M_Omega(p) = M(p) if p + V(p) lies in [0, W-1] x [0, H-1], else 0.
    """
    m = mask.data.numpy() if isinstance(mask, OcclusionMask) else _tensor_of(mask).numpy()
    f = _tensor_of(flow).numpy()
    if m.shape[2:] != f.shape[2:]:
        raise DimensionError(f"mask {m.shape} and flow {f.shape} disagree")
    n, _, h, w = f.shape
    xx = np.arange(w, dtype=f.dtype)[None, None, :] + f[:, 0]
    yy = np.arange(h, dtype=f.dtype)[None, :, None] + f[:, 1]
    inside = ((xx >= 0) & (xx <= w - 1) & (yy >= 0) & (yy <= h - 1))
    return OcclusionMask(Tensor(m * inside[:, None]))


# -- matching features ---------------------------------------------------------

def correlation(f1, f2, max_disp):
    """Cost volume: normalized inner products over a displacement window.

    Output channel (dy + D)*(2D+1) + (dx + D) holds
    <f1(p), f2(p + (dx, dy))> / C, zero where p + d exits the frame.
    """
    f1 = _tensor_of(f1)
    f2 = _tensor_of(f2)
    if f1.shape != f2.shape:
        raise DimensionError(f"correlation inputs disagree: {f1.shape} vs {f2.shape}")
    if max_disp < 0:
        raise ParameterError("max_disp must be >= 0")
    k = _backend.kernels
    out = _node(k.correlation_forward(f1.data, f2.data, max_disp), (f1, f2))
    if out.requires_grad:
        def _bw(g):
            g1, g2 = _backend.kernels.correlation_backward(
                f1.data, f2.data, max_disp, np.ascontiguousarray(g))
            _acc(f1, g1, own=True)
            _acc(f2, g2, own=True)
        out._backward = _bw
    return out


def census_transform(image, window=7):
    """Soft census descriptor: per pixel, soft signs of neighbor - center.

    Multi-channel images are reduced to grayscale (channel mean) first.
    Each of the window^2 - 1 channels is t / sqrt(0.81 + t^2); neighbors
    outside the frame compare equal to the center and yield exactly 0.
    Invariant to global additive intensity shifts by construction.
    """
    if window % 2 == 0 or window < 1:
        raise ParameterError(f"census window must be odd and positive, got {window}")
    image = _tensor_of(image)
    if image.ndim != 4:
        raise DimensionError(f"census expects NCHW, got {image.shape}")
    gray = image if image.shape[1] == 1 else mean(image, axis=1, keepdims=True)
    k = _backend.kernels
    out = _node(k.census_forward(gray.data, window), (gray,))
    if out.requires_grad:
        def _bw(g):
            _acc(gray, _backend.kernels.census_backward(
                gray.data, window, np.ascontiguousarray(g)), own=True)
        out._backward = _bw
    return out


def flow_resize(flow, out_h, out_w):
    """Resize a flow field and rescale its vectors to the new pixel grid.

    u scales by out_w/in_w and v by out_h/in_h, so motion keeps pointing at
    the same scene location.
    """
    wrap = isinstance(flow, FlowField)
    data = _tensor_of(flow)
    in_h, in_w = data.shape[2], data.shape[3]
    resized = resize_bilinear(data, out_h, out_w)
    scale = np.array([out_w / in_w, out_h / in_h],
                     dtype=data.dtype).reshape(1, 2, 1, 1)
    out = mul(resized, Tensor(scale))
    return FlowField(out) if wrap else out
