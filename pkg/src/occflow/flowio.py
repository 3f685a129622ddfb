"""Flow codecs, visualization, metrics, and the synthetic scene generator.

The generator builds layered scenes: a band-limited noise background plus
1-4 elliptic sprites, each rigidly translated between frames. Ground-truth
flows, object-occlusion masks, and out-of-frame masks all come from the
layer geometry, so they are exact oracles rather than estimates. Integer
translations shift textures by array roll (bit-exact); half-integer ones
shift in the Fourier domain, keeping the frames an exact continuous
translation of each other.
"""

import struct
from dataclasses import dataclass, field

import cv2
import numpy as np

from .diffcore import Tensor
from .errors import FormatError, ParameterError
from .flowops import FlowField, FramePair, OcclusionMask

FLO_MAGIC = 202021.25


def _flow_array(flow):
    if isinstance(flow, FlowField):
        flow = flow.data
    if isinstance(flow, Tensor):
        flow = flow.numpy()
    flow = np.asarray(flow)
    if flow.ndim != 4 or flow.shape[0] != 1 or flow.shape[1] != 2:
        raise ParameterError(f"expected a (1, 2, H, W) flow, got {flow.shape}")
    return flow


# -- .flo codec ---------------------------------------------------------------

def write_flo(flow, path):
    """Middlebury .flo: float32 magic, i32 width/height, interleaved u,v."""
    flow = _flow_array(flow)
    _, _, h, w = flow.shape
    data = np.empty((h, w, 2), dtype="<f4")
    data[:, :, 0] = flow[0, 0]
    data[:, :, 1] = flow[0, 1]
    with open(path, "wb") as fh:
        fh.write(np.float32(FLO_MAGIC).tobytes())
        fh.write(struct.pack("<ii", w, h))
        fh.write(data.tobytes())


def read_flo(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12:
        raise FormatError(f"{path}: too short for a .flo header")
    magic = np.frombuffer(blob, dtype="<f4", count=1)[0]
    if magic != np.float32(FLO_MAGIC):
        raise FormatError(f"{path}: bad magic {magic!r}")
    w, h = struct.unpack_from("<ii", blob, 4)
    if w <= 0 or h <= 0:
        raise FormatError(f"{path}: bad dimensions {w}x{h}")
    expect = 12 + 8 * h * w
    if len(blob) != expect:
        raise FormatError(f"{path}: {len(blob)} bytes, expected {expect}")
    data = np.frombuffer(blob, dtype="<f4", offset=12).reshape(h, w, 2)
    flow = np.stack([data[:, :, 0], data[:, :, 1]])[None]
    return FlowField(Tensor(flow))


# -- KITTI 16-bit PNG codec ---------------------------------------------------

def write_kitti_png(flow, path, valid=None):
    """Encode as KITTI: value = flow*64 + 2^15, third channel validity.

    Returns True when any value had to be clamped into uint16 range.
    """
    flow = _flow_array(flow)
    _, _, h, w = flow.shape
    if valid is None:
        valid = np.ones((h, w))
    else:
        valid = np.asarray(valid).reshape(h, w)
    enc = np.rint(flow[0] * 64.0 + 32768.0)
    clamped = bool((enc < 0).any() or (enc > 65535).any())
    enc = np.clip(enc, 0, 65535).astype(np.uint16)
    img = np.zeros((h, w, 3), dtype=np.uint16)  # BGR on disk via cv2
    img[:, :, 2] = enc[0]
    img[:, :, 1] = enc[1]
    img[:, :, 0] = (valid > 0).astype(np.uint16)
    if not cv2.imwrite(str(path), img):
        raise FormatError(f"could not write {path}")
    return clamped


def read_kitti_png(path):
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise FormatError(f"could not read {path}")
    if img.dtype != np.uint16:
        raise FormatError(f"{path}: expected 16-bit PNG, got {img.dtype}")
    if img.ndim != 3 or img.shape[2] != 3:
        raise FormatError(f"{path}: expected 3 channels, got shape {img.shape}")
    u = (img[:, :, 2].astype(np.float64) - 32768.0) / 64.0
    v = (img[:, :, 1].astype(np.float64) - 32768.0) / 64.0
    valid = (img[:, :, 0] > 0).astype(np.float64)
    flow = FlowField(Tensor(np.stack([u, v])[None]))
    return flow, Tensor(valid[None, None])


# -- color-wheel visualization ------------------------------------------------

def _color_wheel():
    # Middlebury wheel: 55 hue bins over six unequal segments
    segments = [("RY", 15), ("YG", 6), ("GC", 4), ("CB", 11), ("BM", 13), ("MR", 6)]
    wheel = np.zeros((sum(n for _, n in segments), 3))
    at = 0
    for name, n in segments:
        ramp = np.arange(n) / n
        if name == "RY":
            wheel[at:at + n, 0] = 1.0
            wheel[at:at + n, 1] = ramp
        elif name == "YG":
            wheel[at:at + n, 0] = 1.0 - ramp
            wheel[at:at + n, 1] = 1.0
        elif name == "GC":
            wheel[at:at + n, 1] = 1.0
            wheel[at:at + n, 2] = ramp
        elif name == "CB":
            wheel[at:at + n, 1] = 1.0 - ramp
            wheel[at:at + n, 2] = 1.0
        elif name == "BM":
            wheel[at:at + n, 2] = 1.0
            wheel[at:at + n, 0] = ramp
        else:  # MR
            wheel[at:at + n, 2] = 1.0 - ramp
            wheel[at:at + n, 0] = 1.0
        at += n
    return wheel


def flow_to_color(flow, max_norm=None):
    """Direction -> hue, magnitude -> saturation; zero flow is white.

    Returns an (H, W, 3) uint8 RGB image. Magnitudes above max_norm (or the
    field's own maximum) render dimmed.
    """
    flow = _flow_array(flow)
    u, v = flow[0, 0], flow[0, 1]
    rad = np.sqrt(u * u + v * v)
    denom = float(max_norm) if max_norm else float(rad.max())
    if denom <= 0:
        denom = 1.0
    u, v, rad = u / denom, v / denom, rad / denom
    wheel = _color_wheel()
    ncols = len(wheel)
    angle = np.arctan2(-v, -u) / np.pi
    fk = (angle + 1.0) / 2.0 * (ncols - 1)
    k0 = np.floor(fk).astype(int) % ncols
    k1 = (k0 + 1) % ncols
    f = (fk - np.floor(fk))[:, :, None]
    col = (1 - f) * wheel[k0] + f * wheel[k1]
    inside = rad <= 1.0
    col[inside] = 1.0 - rad[inside, None] * (1.0 - col[inside])
    col[~inside] *= 0.75
    return (255.0 * col).astype(np.uint8)


# -- evaluation metrics ---------------------------------------------------------

@dataclass
class FlowMetrics:
    """Endpoint-error summary over one scene or an aggregate."""

    epe: float = 0.0
    f1_all: float = 0.0
    occluded_epe: float = 0.0
    boundary_epe: float = 0.0
    valid_pixels: int = 0
    occluded_pixels: int = 0
    boundary_pixels: int = 0
    degenerate: bool = False

    def to_json(self):
        return {
            "epe": self.epe, "f1_all": self.f1_all,
            "occluded_epe": self.occluded_epe,
            "boundary_epe": self.boundary_epe,
            "valid_pixels": self.valid_pixels,
            "occluded_pixels": self.occluded_pixels,
            "boundary_pixels": self.boundary_pixels,
            "degenerate": self.degenerate,
        }


BOUNDARY_BAND = 8  # pixels from the crop border counted as boundary


def compute_metrics(pred, gt, gt_occ=None, valid=None):
    """EPE, F1-all (>3 px and >5 % of GT magnitude), occluded and boundary EPE."""
    p = _flow_array(pred)
    g = _flow_array(gt)
    if p.shape != g.shape:
        raise ParameterError(f"flow shapes disagree: {p.shape} vs {g.shape}")
    _, _, h, w = p.shape
    err = np.sqrt((p[0, 0] - g[0, 0]) ** 2 + (p[0, 1] - g[0, 1]) ** 2)
    if valid is None:
        ok = np.ones((h, w), dtype=bool)
    else:
        ok = np.asarray(valid.numpy() if isinstance(valid, (Tensor, OcclusionMask))
                        else valid).reshape(h, w) > 0

    def _mean(sel):
        return (float(err[sel].mean()), int(sel.sum())) if sel.any() else (0.0, 0)

    epe, n_valid = _mean(ok)
    if n_valid:
        gt_mag = np.sqrt(g[0, 0] ** 2 + g[0, 1] ** 2)
        outlier = (err > 3.0) & (err > 0.05 * gt_mag)
        f1 = float(outlier[ok].mean())
    else:
        f1 = 0.0
    occ_sel = np.zeros((h, w), dtype=bool)
    if gt_occ is not None:
        occ_sel = np.asarray(
            gt_occ.numpy() if isinstance(gt_occ, OcclusionMask) else gt_occ
        ).reshape(h, w) > 0
    occluded_epe, n_occ = _mean(ok & occ_sel)
    yy, xx = np.indices((h, w))
    border = np.minimum(np.minimum(xx, w - 1 - xx),
                        np.minimum(yy, h - 1 - yy)) < BOUNDARY_BAND
    boundary_epe, n_border = _mean(ok & border)
    return FlowMetrics(epe, f1, occluded_epe, boundary_epe,
                       n_valid, n_occ, n_border, degenerate=n_valid == 0)


def aggregate_metrics(items):
    """Pixel-weighted mean of per-scene metrics."""
    def wavg(vals, weights):
        total = sum(weights)
        return sum(v * n for v, n in zip(vals, weights)) / total if total else 0.0

    return FlowMetrics(
        epe=wavg([m.epe for m in items], [m.valid_pixels for m in items]),
        f1_all=wavg([m.f1_all for m in items], [m.valid_pixels for m in items]),
        occluded_epe=wavg([m.occluded_epe for m in items],
                          [m.occluded_pixels for m in items]),
        boundary_epe=wavg([m.boundary_epe for m in items],
                          [m.boundary_pixels for m in items]),
        valid_pixels=sum(m.valid_pixels for m in items),
        occluded_pixels=sum(m.occluded_pixels for m in items),
        boundary_pixels=sum(m.boundary_pixels for m in items),
        degenerate=all(m.degenerate for m in items) if items else True,
    )


# -- synthetic scenes ------------------------------------------------------------

@dataclass(frozen=True)
class SceneConfig:
    """Knobs of the layered-translation scene generator."""

    raw_size: int = 96
    crop_size: int = 64
    channels: int = 3
    n_sprites: tuple = (1, 4)
    max_disp: float = 8.0
    allow_half_integer: bool = True
    bg_moves: bool = True
    min_motion_separation: float = 0.0
    sprite_placement: str = "anywhere"  # or "crop_interior"
    radius_range: tuple = (5.0, 12.0)
    texture_cutoff: float = 0.3
    texture_power: float = 1.7

    def __post_init__(self):
        if self.crop_size + 2 * self.max_disp > self.raw_size:
            raise ParameterError(
                "raw frame must leave a max_disp margin around the crop")
        if self.sprite_placement not in ("anywhere", "crop_interior"):
            raise ParameterError(f"bad sprite_placement {self.sprite_placement!r}")
        if self.texture_power < 0:
            raise ParameterError("texture_power must be >= 0")

    @property
    def default_p0(self):
        m = (self.raw_size - self.crop_size) // 2
        return (m, m)


@dataclass
class _Sprite:
    cx: float
    cy: float
    rx: float
    ry: float
    t: tuple

    def covers(self, qx, qy, shifted):
        cx = self.cx + (self.t[0] if shifted else 0.0)
        cy = self.cy + (self.t[1] if shifted else 0.0)
        return (((qx - cx) / self.rx) ** 2 + ((qy - cy) / self.ry) ** 2) <= 1.0


@dataclass
class CropSample:
    """One crop window of a scene with all its ground truth.

    occ_object: target hidden behind a nearer sprite. occ_out: target leaves
    the raw frame. occ_boundary: target leaves the crop window (but may still
    exist in the raw frame). oracle = occ_object | occ_out.
    """

    pair: FramePair
    flow_f: FlowField
    flow_b: FlowField
    occ_object_f: OcclusionMask
    occ_object_b: OcclusionMask
    occ_out_f: OcclusionMask
    occ_out_b: OcclusionMask
    occ_boundary_f: OcclusionMask
    occ_boundary_b: OcclusionMask
    oracle_f: OcclusionMask
    oracle_b: OcclusionMask


@dataclass
class SyntheticScene:
    """Raw frame pair plus exact ground truth, croppable at any offset."""

    seed: int
    config: SceneConfig
    raw1: np.ndarray
    raw2: np.ndarray
    p0: tuple
    sprites: list
    bg_t: tuple
    flow_raw_f: np.ndarray
    flow_raw_b: np.ndarray
    occ_object_raw_f: np.ndarray
    occ_object_raw_b: np.ndarray
    exit_raw_f: np.ndarray
    exit_raw_b: np.ndarray
    _default: CropSample = field(default=None, repr=False, compare=False)

    def sample(self):
        """Ground truth at the scene's own crop offset (cached)."""
        if self._default is None:
            self._default = self.crop_at(self.p0)
        return self._default

    @property
    def flow_f(self):
        return self.sample().flow_f

    @property
    def flow_b(self):
        return self.sample().flow_b

    @property
    def occ_object_f(self):
        return self.sample().occ_object_f

    @property
    def occ_object_b(self):
        return self.sample().occ_object_b

    @property
    def occ_out_f(self):
        return self.sample().occ_out_f

    @property
    def occ_out_b(self):
        return self.sample().occ_out_b

    @property
    def oracle_f(self):
        return self.sample().oracle_f

    @property
    def oracle_b(self):
        return self.sample().oracle_b

    def frame_pair(self, p0=None):
        p0 = tuple(p0 or self.p0)
        c = self.config.crop_size
        return FramePair.from_raw(Tensor(self.raw1), Tensor(self.raw2), p0, c, c)

    def crop_at(self, p0=None):
        p0 = tuple(p0 or self.p0)
        py, px = p0
        c = self.config.crop_size
        sl = (slice(None), slice(None), slice(py, py + c), slice(px, px + c))
        flow_f = self.flow_raw_f[sl]
        flow_b = self.flow_raw_b[sl]
        obj_f = self.occ_object_raw_f[sl]
        obj_b = self.occ_object_raw_b[sl]
        exit_f = self.exit_raw_f[sl]
        exit_b = self.exit_raw_b[sl]
        bnd_f = _exits_window(flow_f, c)
        bnd_b = _exits_window(flow_b, c)
        return CropSample(
            pair=self.frame_pair(p0),
            flow_f=FlowField(Tensor(flow_f.copy())),
            flow_b=FlowField(Tensor(flow_b.copy())),
            occ_object_f=OcclusionMask(Tensor(obj_f.copy())),
            occ_object_b=OcclusionMask(Tensor(obj_b.copy())),
            occ_out_f=OcclusionMask(Tensor(exit_f.copy())),
            occ_out_b=OcclusionMask(Tensor(exit_b.copy())),
            occ_boundary_f=OcclusionMask(Tensor(bnd_f)),
            occ_boundary_b=OcclusionMask(Tensor(bnd_b)),
            oracle_f=OcclusionMask(Tensor(np.maximum(obj_f, exit_f))),
            oracle_b=OcclusionMask(Tensor(np.maximum(obj_b, exit_b))),
        )


def _exits_window(flow, size):
    _, _, h, w = flow.shape
    xx = np.arange(w)[None, :] + flow[0, 0]
    yy = np.arange(h)[:, None] + flow[0, 1]
    out = (xx < 0) | (xx > size - 1) | (yy < 0) | (yy > size - 1)
    return out.astype(flow.dtype)[None, None]


def _quantize(value, allow_half):
    step = 0.5 if allow_half else 1.0
    return np.round(value / step) * step


def _sample_translation(rng, config):
    # uniform magnitude (not uniform per axis) keeps small motions common,
    # which photometric learning needs to bootstrap
    md = config.max_disp
    radius = rng.uniform(0.0, md)
    angle = rng.uniform(0.0, 2.0 * np.pi)
    t = _quantize(np.array([radius * np.cos(angle), radius * np.sin(angle)]),
                  config.allow_half_integer)
    return float(np.clip(t[0], -md, md)), float(np.clip(t[1], -md, md))


def _separated(translations, minimum):
    if minimum <= 0:
        return True
    for i in range(len(translations)):
        for j in range(i + 1, len(translations)):
            dx = translations[i][0] - translations[j][0]
            dy = translations[i][1] - translations[j][1]
            if np.sqrt(dx * dx + dy * dy) < minimum:
                return False
    return True


def _bandlimited_spectrum(rng, channels, n, cutoff, power=0.0):
    spec = np.fft.fft2(rng.standard_normal((channels, n, n)))
    fy = np.fft.fftfreq(n)[:, None]
    fx = np.fft.fftfreq(n)[None, :]
    r = np.sqrt(fy ** 2 + fx ** 2)
    if power > 0:
        # 1/f-style rolloff (knee at a 50 px wavelength) concentrates energy
        # in coarse structure the way natural images do
        spec *= (1.0 + r / 0.02) ** -power
    spec[:, r > 0.5 * cutoff] = 0.0
    return spec


def _texture_pair(spec, t, n):
    tex1 = np.fft.ifft2(spec).real
    tx, ty = t
    if tx == int(tx) and ty == int(ty):
        tex2 = np.roll(tex1, (int(ty), int(tx)), axis=(1, 2))
    else:
        fy = np.fft.fftfreq(n)[:, None]
        fx = np.fft.fftfreq(n)[None, :]
        phase = np.exp(-2j * np.pi * (fy * ty + fx * tx))
        tex2 = np.fft.ifft2(spec * phase).real
    # same affine map on both frames keeps them exact translations
    scale = 0.35 / max(float(tex1.std()), 1e-8)
    off = float(tex1.mean())
    tex1 = np.clip(0.5 + scale * (tex1 - off), 0.0, 1.0)
    tex2 = np.clip(0.5 + scale * (tex2 - off), 0.0, 1.0)
    return tex1, tex2


def generate_scene(seed, config=None):
    """Deterministic layered scene with exact flow and occlusion oracles."""
    config = config or SceneConfig()
    rng = np.random.default_rng(seed)
    n = config.raw_size

    n_spr = int(rng.integers(config.n_sprites[0], config.n_sprites[1] + 1))
    for _ in range(200):
        bg_t = _sample_translation(rng, config) if config.bg_moves else (0.0, 0.0)
        sprite_ts = [_sample_translation(rng, config) for _ in range(n_spr)]
        if _separated([bg_t] + sprite_ts, config.min_motion_separation):
            break
    else:
        raise ParameterError("could not satisfy min_motion_separation")

    sprites = []
    p0y, p0x = config.default_p0
    for t in sprite_ts:
        rx = float(rng.uniform(*config.radius_range))
        ry = float(rng.uniform(*config.radius_range))
        if config.sprite_placement == "crop_interior":
            # sprite plus its motion stays strictly inside the default crop
            pad_x = rx + abs(t[0]) + 1
            pad_y = ry + abs(t[1]) + 1
            cx = float(rng.uniform(p0x + pad_x, p0x + config.crop_size - 1 - pad_x))
            cy = float(rng.uniform(p0y + pad_y, p0y + config.crop_size - 1 - pad_y))
        else:
            cx = float(rng.uniform(rx, n - 1 - rx))
            cy = float(rng.uniform(ry, n - 1 - ry))
        sprites.append(_Sprite(cx, cy, rx, ry, t))
    return compose_scene(config, sprites, bg_t, seed=seed, rng=rng)


def compose_scene(config, sprites, bg_t=(0.0, 0.0), seed=0, rng=None):
    """Assemble a scene from explicit geometry; only textures are random.

    Layer order is paint order: later sprites are nearer. A frame-1 pixel is
    object-occluded iff a nearer sprite covers its target in frame 2 (the
    sprite supports are analytic, so the check is exact even at half-integer
    motion); it is out-of-frame iff the target leaves the raw extent.
    """
    if rng is None:
        rng = np.random.default_rng(seed)
    sprites = [s if isinstance(s, _Sprite) else _Sprite(*s) for s in sprites]
    bg_t = (float(bg_t[0]), float(bg_t[1]))
    n = config.raw_size
    c = config.channels

    yy, xx = np.indices((n, n)).astype(float)
    raw1 = np.empty((1, c, n, n))
    raw2 = np.empty((1, c, n, n))
    layer1 = np.zeros((n, n), dtype=int)
    layer2 = np.zeros((n, n), dtype=int)
    tex1, tex2 = _texture_pair(
        _bandlimited_spectrum(rng, c, n, config.texture_cutoff,
                              config.texture_power), bg_t, n)
    raw1[0], raw2[0] = tex1, tex2
    for k, s in enumerate(sprites, start=1):
        tex1, tex2 = _texture_pair(
            _bandlimited_spectrum(rng, c, n, config.texture_cutoff,
                                  config.texture_power), s.t, n)
        m1 = s.covers(xx, yy, shifted=False)
        m2 = s.covers(xx, yy, shifted=True)
        raw1[0][:, m1] = tex1[:, m1]
        raw2[0][:, m2] = tex2[:, m2]
        layer1[m1] = k
        layer2[m2] = k

    t_table = np.array([bg_t] + [s.t for s in sprites])  # (S+1, 2)
    flow_f = np.moveaxis(t_table[layer1], 2, 0)[None]
    flow_b = -np.moveaxis(t_table[layer2], 2, 0)[None]

    def _object_occ(layer, flow, shifted):
        qx = xx + flow[0, 0]
        qy = yy + flow[0, 1]
        occ = np.zeros((n, n), dtype=bool)
        for j, s in enumerate(sprites, start=1):
            occ |= s.covers(qx, qy, shifted=shifted) & (layer < j)
        exits = (qx < 0) | (qx > n - 1) | (qy < 0) | (qy > n - 1)
        return occ.astype(float)[None, None], exits.astype(float)[None, None]

    occ_f, exit_f = _object_occ(layer1, flow_f, shifted=True)
    occ_b, exit_b = _object_occ(layer2, flow_b, shifted=False)

    return SyntheticScene(
        seed=seed, config=config, raw1=raw1, raw2=raw2, p0=config.default_p0,
        sprites=sprites, bg_t=bg_t, flow_raw_f=flow_f, flow_raw_b=flow_b,
        occ_object_raw_f=occ_f, occ_object_raw_b=occ_b,
        exit_raw_f=exit_f, exit_raw_b=exit_b)
