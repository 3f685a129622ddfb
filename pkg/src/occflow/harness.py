"""Training schedule, evaluation, and ablation orchestration.

Training follows a three-stage curriculum: stage 1 optimizes the
photometric, census, and smoothness terms with occlusion masks forced to
zero; stage 2 turns on occlusion exclusion in the data terms; stage 3
enables the appearance-flow refiner and adds the inpainting term. The
optimizer is Adam with a per-stage learning rate. Runs are bitwise
deterministic for a given config and seed.
"""

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffcore import (
    Tensor,
    get_default_dtype,
    no_grad,
    save_checkpoint,
    set_default_dtype,
)
from .errors import ConfigError, TrainingDiverged
from .flowio import (
    SceneConfig,
    aggregate_metrics,
    compute_metrics,
    flow_to_color,
    generate_scene,
)
from .flowops import FramePair, OccCheckParams, OcclusionMask
from .losses import (
    LossWeights,
    census_loss,
    inpainting_inputs,
    inpainting_loss,
    photometric_loss,
    smoothness_loss,
    total_loss,
)
from .network import NetworkConfig, OccInpFlowNet, forward_pass


def _tupled(d, *keys):
    for k in keys:
        if k in d and isinstance(d[k], list):
            d[k] = tuple(d[k])
    return d


@dataclass
class TrainConfig:
    """Everything that determines a training run."""

    stage_iters: tuple = (1200, 400, 400)
    stage_lrs: tuple = (1e-4, 1e-4, 1e-5)
    weights: LossWeights = field(default_factory=LossWeights)
    use_bdw: bool = True
    exclude_photometric_in_occ: bool = True
    exclude_census_in_occ: bool = True
    enable_inpainting: bool = True
    inpaint_scales: object = "all"  # "all", or list of scale indices / "full"
    census_window: int = 7
    crop_size: int = 64
    batch_size: int = 4
    seed: int = 0
    dtype: str = "float64"
    n_train_scenes: int = 500
    n_eval_scenes: int = 100
    train_scene_seed: int = 10_000
    eval_scene_seed: int = 20_000
    boundary_eval_scenes: int = 25
    scene: SceneConfig = field(default_factory=SceneConfig)
    network: NetworkConfig = None

    def __post_init__(self):
        if len(self.stage_iters) != 3 or any(int(n) < 0 for n in self.stage_iters):
            raise ConfigError(f"need 3 non-negative stage_iters, got {self.stage_iters}")
        if len(self.stage_lrs) != 3 or any(lr <= 0 for lr in self.stage_lrs):
            raise ConfigError(f"need 3 positive stage_lrs, got {self.stage_lrs}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")
        if self.scene.crop_size != self.crop_size:
            raise ConfigError(
                f"scene crop {self.scene.crop_size} != train crop {self.crop_size}")
        if self.network is not None and self.network.image_size != (self.crop_size,
                                                                    self.crop_size):
            raise ConfigError("network image_size must match crop_size")
        self._check_inpaint_scales()

    def _check_inpaint_scales(self):
        if self.inpaint_scales == "all":
            return
        if not isinstance(self.inpaint_scales, (list, tuple)):
            raise ConfigError('inpaint_scales must be "all" or a list')
        n = (self.network or NetworkConfig(image_size=(self.crop_size,
                                                       self.crop_size))).num_scales
        for s in self.inpaint_scales:
            if s == "full":
                continue
            if not isinstance(s, int) or not 0 <= s < n:
                raise ConfigError(f"bad inpaint scale {s!r} for {n} pyramid levels")

    def network_config(self):
        return self.network or NetworkConfig(
            image_size=(self.crop_size, self.crop_size))

    def refine_scales(self):
        if self.inpaint_scales == "all":
            return None
        return set(self.inpaint_scales)

    def to_json(self):
        # network stays None when unset; it derives from crop_size on load
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, d):
        d = dict(d)
        _tupled(d, "stage_iters", "stage_lrs")
        if isinstance(d.get("weights"), dict):
            d["weights"] = LossWeights(**d["weights"])
        if isinstance(d.get("scene"), dict):
            d["scene"] = SceneConfig(**_tupled(dict(d["scene"]),
                                               "n_sprites", "radius_range"))
        if isinstance(d.get("network"), dict):
            nd = _tupled(dict(d["network"]),
                         "image_size", "encoder_widths", "estimator_widths")
            if isinstance(nd.get("occ_params"), dict):
                nd["occ_params"] = OccCheckParams(**nd["occ_params"])
            d["network"] = NetworkConfig(**nd)
        return cls(**d)


class Adam:
    """First-order adaptive optimizer; parameters without gradients are skipped."""

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.state = {}

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def step(self):
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            st = self.state.get(name)
            if st is None:
                st = self.state[name] = {
                    "m": np.zeros_like(p.data), "v": np.zeros_like(p.data), "t": 0}
            st["t"] += 1
            st["m"] = self.beta1 * st["m"] + (1.0 - self.beta1) * g
            st["v"] = self.beta2 * st["v"] + (1.0 - self.beta2) * g * g
            m_hat = st["m"] / (1.0 - self.beta1 ** st["t"])
            v_hat = st["v"] / (1.0 - self.beta2 ** st["t"])
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# -- datasets -----------------------------------------------------------------

@dataclass
class TrainBank:
    """Raw frame pairs of the training scenes, float32, crops drawn per step."""

    raws1: np.ndarray
    raws2: np.ndarray

    def __len__(self):
        return len(self.raws1)

    @property
    def raw_size(self):
        return self.raws1.shape[-1]


def build_train_bank(config):
    raws1, raws2 = [], []
    for i in range(config.n_train_scenes):
        s = generate_scene(config.train_scene_seed + i, config.scene)
        raws1.append(s.raw1[0].astype(np.float32))
        raws2.append(s.raw2[0].astype(np.float32))
    return TrainBank(np.stack(raws1), np.stack(raws2))


@dataclass
class EvalScene:
    """Held-out scene cropped at the scene's fixed center offset."""

    raw1: np.ndarray
    raw2: np.ndarray
    p0: tuple
    crop_size: int
    gt_flow_f: np.ndarray
    gt_occ_f: np.ndarray

    def frame_pair(self):
        c = self.crop_size
        return FramePair.from_raw(Tensor(self.raw1), Tensor(self.raw2),
                                  self.p0, c, c)


def build_eval_set(config):
    scenes = []
    for i in range(config.n_eval_scenes):
        s = generate_scene(config.eval_scene_seed + i, config.scene)
        cs = s.sample()
        scenes.append(EvalScene(
            raw1=s.raw1.astype(np.float32), raw2=s.raw2.astype(np.float32),
            p0=s.p0, crop_size=config.crop_size,
            gt_flow_f=cs.flow_f.numpy().astype(np.float32),
            gt_occ_f=cs.oracle_f.numpy().astype(np.uint8)))
    return scenes


# -- evaluation -----------------------------------------------------------------

def _predict(net, pair, config):
    refine = config.enable_inpainting
    with no_grad():
        out = forward_pass(net, pair, enable_refine=refine,
                           refine_scales=config.refine_scales() if refine else None)
    return out.full_f


def evaluate(net, scenes, config, dump_dir=None):
    """Per-scene and aggregate metrics; net may be any pair -> flow callable.

    With dump_dir set, writes a flow color map and a grayscale endpoint-error
    map per scene.
    """
    import cv2

    if dump_dir is not None:
        dump_dir = Path(dump_dir)
        dump_dir.mkdir(parents=True, exist_ok=True)
    predict = net if callable(net) else None
    per_scene = []
    for i, scene in enumerate(scenes):
        pair = scene.frame_pair()
        if predict is not None:
            pred = predict(pair)
        else:
            pred = _predict(net, pair, config)
        per_scene.append(compute_metrics(pred, scene.gt_flow_f,
                                         gt_occ=scene.gt_occ_f))
        if dump_dir is not None:
            pred_np = pred.numpy() if hasattr(pred, "numpy") else np.asarray(pred)
            rgb = flow_to_color(pred_np)
            cv2.imwrite(str(dump_dir / f"flow_{i:04d}.png"), rgb[:, :, ::-1])
            err = np.sqrt(((pred_np - scene.gt_flow_f) ** 2).sum(axis=1))[0]
            err = np.clip(err / max(float(err.max()), 1e-9), 0, 1)
            cv2.imwrite(str(dump_dir / f"err_{i:04d}.png"),
                        (255 * err).astype(np.uint8))
    return per_scene, aggregate_metrics(per_scene)


# -- training -------------------------------------------------------------------

@dataclass
class TrainResult:
    net: OccInpFlowNet
    config: TrainConfig
    checkpoints: dict
    log_path: Path
    boundary_evals: list
    final_metrics: object


def _zero_masks(shape_like):
    n, _, h, w = shape_like.shape
    return OcclusionMask(Tensor(np.zeros((n, 1, h, w))))


def _appflow_grad_census(net):
    return [name for name, p in net.named_parameters()
            if name.startswith("appflow.") and p.grad is not None]


def read_metrics_log(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def train(config, workdir):
    """Run the 3-stage schedule; returns checkpoints, metrics log, final eval."""
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    previous_dtype = get_default_dtype()
    set_default_dtype(config.dtype)
    try:
        return _train_inner(config, workdir)
    finally:
        set_default_dtype(previous_dtype)


def _train_inner(config, workdir):
    net_cfg = config.network_config()
    if net_cfg.image_size != (config.crop_size, config.crop_size):
        raise ConfigError("network image_size must match crop_size")
    seeds = np.random.SeedSequence(config.seed).spawn(2)
    rng_net = np.random.default_rng(seeds[0])
    rng_data = np.random.default_rng(seeds[1])

    net = OccInpFlowNet(net_cfg, rng_net)
    bank = build_train_bank(config)
    eval_scenes = build_eval_set(config)
    margin = bank.raw_size - config.crop_size
    opt = Adam(net.named_parameters(), lr=config.stage_lrs[0])

    (workdir / "config.json").write_text(json.dumps(config.to_json(), indent=2))
    log_path = workdir / "metrics.jsonl"
    boundaries = np.cumsum(config.stage_iters)
    total_steps = int(boundaries[-1])
    checkpoints = {}
    boundary_evals = []
    started = time.perf_counter()

    with open(log_path, "a") as log:
        def emit(record):
            log.write(json.dumps(record) + "\n")
            log.flush()

        emit({"kind": "config", "config": config.to_json()})

        for step in range(total_steps):
            stage = int(np.searchsorted(boundaries, step, side="right")) + 1
            opt.lr = float(config.stage_lrs[stage - 1])
            refine_now = stage == 3 and config.enable_inpainting

            idx = rng_data.integers(0, len(bank), size=config.batch_size)
            p0 = tuple(int(v) for v in rng_data.integers(0, margin + 1, size=2))
            pair = FramePair.from_raw(
                Tensor(bank.raws1[idx]), Tensor(bank.raws2[idx]),
                p0, config.crop_size, config.crop_size)

            out = forward_pass(
                net, pair, enable_refine=refine_now,
                refine_scales=config.refine_scales() if refine_now else None)

            zeros = _zero_masks(out.full_mask_f.data)
            exclude = stage >= 2
            mf_p, mb_p = ((out.full_mask_f, out.full_mask_b)
                          if exclude and config.exclude_photometric_in_occ
                          else (zeros, zeros))
            mf_c, mb_c = ((out.full_mask_f, out.full_mask_b)
                          if exclude and config.exclude_census_in_occ
                          else (zeros, zeros))

            ph = photometric_loss(pair, out.full_f, out.full_b, mf_p, mb_p,
                                  use_bdw=config.use_bdw)
            ce = census_loss(pair, out.full_f, out.full_b, mf_c, mb_c,
                             window=config.census_window, use_bdw=config.use_bdw)
            if refine_now:
                include_full = (config.inpaint_scales == "all"
                                or "full" in config.inpaint_scales)
                inp = inpainting_loss(*inpainting_inputs(
                    out, include_full=include_full))
            else:
                inp = inpainting_loss([], [], [])
            sm = smoothness_loss(out.full_f, out.full_b)
            report = total_loss(ph, ce, inp, sm, config.weights)

            if not np.isfinite(report.total):
                dump = workdir / f"diverged_step{step}.npz"
                np.savez(dump, raw1=bank.raws1[idx], raw2=bank.raws2[idx],
                         p0=np.array(p0), scene_indices=idx, step=step,
                         stage=stage)
                raise TrainingDiverged(
                    f"non-finite loss {report.total} at step {step} "
                    f"(stage {stage}); batch dumped to {dump}")

            opt.zero_grad()
            report.total_tensor.backward()
            if not refine_now:
                leaked = _appflow_grad_census(net)
                if leaked:
                    raise RuntimeError(
                        f"stage gating violated: appearance-flow parameters "
                        f"received gradients in stage {stage}: {leaked[:3]}")
            opt.step()

            rec = {"kind": "step", "step": step, "stage": stage, "lr": opt.lr,
                   "elapsed": round(time.perf_counter() - started, 3)}
            rec.update(report.to_json())
            emit(rec)

            if step + 1 in boundaries:
                ckpt = workdir / f"stage{stage}.ckpt"
                save_checkpoint(ckpt, net.state_dict())
                checkpoints[stage] = ckpt
                n_eval = min(config.boundary_eval_scenes, len(eval_scenes))
                if n_eval:
                    _, agg = evaluate(net, eval_scenes[:n_eval], config)
                    boundary_evals.append((stage, agg))
                    emit({"kind": "eval", "after_stage": stage,
                          "scenes": n_eval, **agg.to_json()})

        final_ckpt = workdir / "final.ckpt"
        save_checkpoint(final_ckpt, net.state_dict())
        checkpoints["final"] = final_ckpt
        _, final = evaluate(net, eval_scenes, config)
        emit({"kind": "final_eval", "scenes": len(eval_scenes),
              **final.to_json()})

    return TrainResult(net=net, config=config, checkpoints=checkpoints,
                       log_path=log_path, boundary_evals=boundary_evals,
                       final_metrics=final)


def load_net(config, checkpoint_path):
    """Rebuild the network of a TrainConfig and load checkpoint weights."""
    from .diffcore import load_checkpoint

    net = OccInpFlowNet(config.network_config(), np.random.default_rng(0))
    net.load_state_dict(load_checkpoint(checkpoint_path))
    return net


# -- ablation grids ---------------------------------------------------------------

GRID_FLAGS = [(bdw, excl, inp)
              for bdw in (False, True)
              for excl in (False, True)
              for inp in (False, True)]


def _flag_config(base, bdw, excl, inp):
    return dataclasses.replace(
        base, use_bdw=bdw,
        exclude_photometric_in_occ=excl, exclude_census_in_occ=excl,
        enable_inpainting=inp)


def _seed_rows(config, workdir, seeds, label):
    rows = []
    for seed in seeds:
        run = train(dataclasses.replace(config, seed=seed),
                    Path(workdir) / f"{label}_seed{seed}")
        m = run.final_metrics
        rows.append({"seed": seed, "epe": m.epe, "f1_all": m.f1_all,
                     "occluded_epe": m.occluded_epe,
                     "boundary_epe": m.boundary_epe})
    mean = {k: float(np.mean([r[k] for r in rows]))
            for k in ("epe", "f1_all", "occluded_epe", "boundary_epe")}
    return rows, mean


def ablate(base_config, workdir, seeds=(0, 1, 2), scale_sweep=True):
    """Train the 8-row flag grid plus the per-scale inpainting sweep.

    Returns {"grid": [...], "scale_sweep": [...]} with per-seed metrics and
    seed-means; also written to workdir/ablation.json and a text table.
    """
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    grid = []
    for bdw, excl, inp in GRID_FLAGS:
        label = f"bdw{int(bdw)}_excl{int(excl)}_inp{int(inp)}"
        rows, mean = _seed_rows(_flag_config(base_config, bdw, excl, inp),
                                workdir, seeds, label)
        grid.append({"use_bdw": bdw, "exclude_in_occ": excl,
                     "inpainting": inp, "per_seed": rows, "mean": mean})

    sweep = []
    if scale_sweep:
        n_scales = base_config.network_config().num_scales
        full_row = next(r for r in grid
                        if r["use_bdw"] and r["exclude_in_occ"] and r["inpainting"])
        for scale in range(n_scales):
            cfg = dataclasses.replace(
                _flag_config(base_config, True, True, True),
                inpaint_scales=[scale])
            rows, mean = _seed_rows(cfg, workdir, seeds, f"scale{scale}")
            sweep.append({"scales": [scale], "per_seed": rows, "mean": mean})
        sweep.append({"scales": base_config.inpaint_scales,
                      "per_seed": full_row["per_seed"],
                      "mean": full_row["mean"]})

    table = {"grid": grid, "scale_sweep": sweep}
    (workdir / "ablation.json").write_text(json.dumps(table, indent=2))
    (workdir / "ablation.txt").write_text(format_ablation(table))
    return table


def format_ablation(table):
    lines = ["bdw excl inp    epe     f1   occ_epe  bnd_epe"]
    for row in table["grid"]:
        m = row["mean"]
        lines.append("  %d    %d   %d  %7.3f %6.3f %8.3f %8.3f" % (
            row["use_bdw"], row["exclude_in_occ"], row["inpainting"],
            m["epe"], m["f1_all"], m["occluded_epe"], m["boundary_epe"]))
    if table["scale_sweep"]:
        lines.append("")
        lines.append("inpaint scales    epe     f1   occ_epe  bnd_epe")
        for row in table["scale_sweep"]:
            m = row["mean"]
            lines.append("%14s %7.3f %6.3f %8.3f %8.3f" % (
                row["scales"], m["epe"], m["f1_all"],
                m["occluded_epe"], m["boundary_epe"]))
    return "\n".join(lines) + "\n"
