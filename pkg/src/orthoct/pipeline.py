"""Two-stage training and end-to-end inference.

Stage 1 trains the coarse 3D U-Net to map the two-view back-projection onto
the ground-truth volume (MSE). Stage 2 freezes it and trains the 2D refiner on
axial slices of its output with L1, perceptual, adversarial and contrastive
terms; the contrastive teacher tracks the student feature network by EMA.

All intensities inside the networks live in the normalized window
``[hu_lo, hu_hi] -> [0, 1]``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor, backward, no_grad
from .autodiff.tensor import NonFiniteError
from .checkpoint import load_checkpoint, pack, restore_params, save_checkpoint, unpack
from .geometry import GeometryError, Projection, Volume, back_project, denormalize, forward_project, normalize_volume
from .losses import (
    ContrastiveConfig,
    LossWeights,
    adversarial_losses,
    anatomy_infonce,
    default_extractor,
    ema_update,
    hybrid_loss,
    l1_loss,
    mse_loss,
    perceptual_loss,
    sample_anchors,
    semantic_loss,
)
from .networks import (
    DISC_WIDTHS,
    NetworkParams,
    UNetConfig,
    build_discriminator,
    build_unet,
    desk_config,
    disc_forward,
    feature_config,
    feature_forward,
    paper_config,
    unet_forward,
)
from .optim import OptimizerState, adamw_step, cosine_lr


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    stage: int = 1
    epochs: int = 20
    lr_init: float = 2e-4
    lr_min: float = 1e-6
    batch_size: int = 1
    seed: int = 0
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    loss_weights: LossWeights = field(default_factory=LossWeights)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    checkpoint_every: int = 5
    # optional cap on optimizer steps per epoch (None: one full pass)
    steps_per_epoch: int | None = None
    hu_window: tuple[float, float] = (-1000.0, 1000.0)
    coarse_net: UNetConfig = field(default_factory=lambda: desk_config(3, residual=True))
    refine_net: UNetConfig = field(default_factory=lambda: desk_config(2, residual=True))
    train_student: bool = True

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if self.epochs < 1 or self.batch_size < 1 or self.checkpoint_every < 1:
            raise ValueError("epochs, batch_size and checkpoint_every must be >= 1")
        if not 0 < self.lr_min <= self.lr_init:
            raise ValueError(f"need 0 < lr_min <= lr_init, got {self.lr_min}, {self.lr_init}")
        if self.coarse_net.dims != 3 or self.refine_net.dims != 2:
            raise ValueError("coarse_net must be 3-D and refine_net 2-D")


def paper_train_config(stage: int) -> TrainConfig:
    """Schedules from the original training setup at full network width."""
    if stage == 1:
        return TrainConfig(stage=1, epochs=220, lr_init=2e-4, coarse_net=paper_config(3))
    return TrainConfig(
        stage=2, epochs=100, lr_init=1e-4, coarse_net=paper_config(3), refine_net=paper_config(2)
    )


def desk_train_config(stage: int, **overrides) -> TrainConfig:
    """Narrow networks and short schedules for 32^3 phantoms on a CPU."""
    base = dict(stage=stage, epochs=20, lr_init=2e-3 if stage == 1 else 1e-4, batch_size=1 if stage == 1 else 8)
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class TrainResult:
    networks: dict[str, NetworkParams]
    trace: list[dict]
    checkpoint: Path | None


# -- preprocessing ------------------------------------------------------------------


def init_volume(vol: Volume) -> Volume:
    """Two-view back-projection of ``vol`` (the network input, in HU)."""
    ap, lat = forward_project(vol, "AP"), forward_project(vol, "LAT")
    return back_project(ap, lat, vol.dims, vol.spacing)


def _prepare(volumes: list[Volume], cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    if not volumes:
        raise ValueError("training needs at least one volume")
    lo, hi = cfg.hu_window
    div = cfg.coarse_net.divisor
    dims = volumes[0].dims
    for v in volumes:
        if v.dims != dims:
            raise ValueError(f"all training volumes must share dims, got {v.dims} and {dims}")
        if any(n % div for n in v.dims):
            raise ValueError(f"volume dims {v.dims} must be divisible by {div}")
    x = np.stack([normalize_volume(init_volume(v).values.astype(np.float32), lo, hi) for v in volumes])
    y = np.stack([normalize_volume(v.values.astype(np.float32), lo, hi) for v in volumes])
    return x[:, None], y[:, None]


def _batches(rng: np.random.Generator, n: int, cfg: TrainConfig) -> list[np.ndarray]:
    order = rng.permutation(n)
    out = [order[i : i + cfg.batch_size] for i in range(0, n, cfg.batch_size)]
    return out[: cfg.steps_per_epoch] if cfg.steps_per_epoch else out


def _epoch_rng(cfg: TrainConfig, epoch: int) -> np.random.Generator:
    # keyed by (seed, stage, epoch) so a resumed run draws the same stream
    return np.random.default_rng([cfg.seed, cfg.stage, epoch])


class TrainLog:
    """Append-only CSV loss log; a resumed run drops rows past the checkpoint step first."""

    def __init__(self, path, columns: list[str], resume_step: int | None = None):
        self.path = Path(path) if path else None
        self.columns = columns
        if self.path is None:
            return
        keep = []
        if resume_step is not None and self.path.exists():
            with open(self.path, newline="") as fh:
                keep = [r for r in csv.DictReader(fh) if int(r["step"]) < resume_step]
        with open(self.path, "w", newline="") as fh:
            w = csv.DictWriter(fh, columns)
            w.writeheader()
            w.writerows(keep)

    def write(self, row: dict) -> None:
        if self.path is None:
            return
        with open(self.path, "a", newline="") as fh:
            csv.DictWriter(fh, self.columns).writerow({k: _fmt(row[k]) for k in self.columns})


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def _config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    return d


def net_config_from_dict(d: dict) -> UNetConfig:
    d = dict(d)
    if d.get("channel_schedule") is not None:
        d["channel_schedule"] = tuple(d["channel_schedule"])
    return UNetConfig(**d)


def _grads(p: NetworkParams) -> dict:
    return {k: t.grad for k, t in p.items()}


def _step(p: NetworkParams, state: OptimizerState, lr: float, cfg: TrainConfig) -> None:
    adamw_step(p, _grads(p), state, lr, cfg.betas, cfg.eps, cfg.weight_decay)
    p.zero_grad()


def _guard(fn, epoch: int, step: int, what: str):
    try:
        return fn()
    except NonFiniteError as exc:
        raise TrainingError(f"non-finite value in {what} at epoch {epoch}, step {step}: {exc}") from exc


# -- stage 1 ------------------------------------------------------------------------

STAGE1_COLUMNS = ["epoch", "step", "loss_total", "mse", "lr"]


def train_stage1(
    volumes: list[Volume], cfg: TrainConfig, out_dir=None, resume=None, verbose: bool = False
) -> TrainResult:
    """Fit the coarse 3D U-Net; checkpoints go to ``out_dir/stage1``."""
    x_all, y_all = _prepare(volumes, cfg)
    params = build_unet(cfg.coarse_net, cfg.seed)
    state = OptimizerState.zeros_like(params)
    start, step = 0, 0
    if resume is not None:
        arrays, meta = load_checkpoint(resume)
        params = restore_params(params, unpack("coarse", arrays))
        state = OptimizerState(unpack("opt.m", arrays), unpack("opt.v", arrays), meta["opt_step"])
        start, step = meta["epoch"], meta["step"]
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    log = TrainLog(out / "stage1_log.csv" if out else None, STAGE1_COLUMNS, step if resume else None)
    trace, ckpt = [], None
    for epoch in range(start, cfg.epochs):
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr_init, cfg.lr_min)
        for idx in _batches(_epoch_rng(cfg, epoch), len(x_all), cfg):

            def fwd():
                pred = unet_forward(params, cfg.coarse_net, Tensor(x_all[idx]))
                return mse_loss(pred, y_all[idx])

            loss = _guard(fwd, epoch, step, "stage-1 loss")
            backward(loss)
            _step(params, state, lr, cfg)
            row = {"epoch": epoch, "step": step, "loss_total": loss.item(), "mse": loss.item(), "lr": lr}
            trace.append(row)
            log.write(row)
            step += 1
        if verbose:
            print(f"stage1 epoch {epoch} loss {trace[-1]['loss_total']:.6g} lr {lr:.3g}", flush=True)
        if out and ((epoch + 1) % cfg.checkpoint_every == 0 or epoch + 1 == cfg.epochs):
            arrays = {**pack("coarse", params), **pack("opt.m", state.m), **pack("opt.v", state.v)}
            meta = {
                "stage": 1,
                "epoch": epoch + 1,
                "step": step,
                "opt_step": state.step,
                "networks": {"coarse": asdict(cfg.coarse_net)},
                "hu_window": list(cfg.hu_window),
                "train_config": _config_dict(cfg),
            }
            ckpt = save_checkpoint(out / "stage1", arrays, meta)
    return TrainResult({"coarse": params}, trace, ckpt)


def load_network(ckpt, name: str) -> tuple[NetworkParams, UNetConfig, dict]:
    arrays, meta = load_checkpoint(ckpt)
    if name not in meta.get("networks", {}):
        raise ValueError(f"{ckpt}: checkpoint holds no {name!r} network")
    cfg = net_config_from_dict(meta["networks"][name])
    params = restore_params(build_unet(cfg, 0), unpack(name, arrays))
    return params, cfg, meta


def coarse_predict(params: NetworkParams, cfg: UNetConfig, x_norm: np.ndarray) -> np.ndarray:
    """Normalized ``(X, Y, Z)`` init -> normalized coarse volume, without tracking gradients."""
    with no_grad():
        return unet_forward(params, cfg, Tensor(x_norm[None, None].astype(np.float32))).data[0, 0]


def to_slices(vol: np.ndarray) -> np.ndarray:
    """``(X, Y, Z)`` -> axial slice batch ``(Z, 1, X, Y)``."""
    return np.ascontiguousarray(vol.transpose(2, 0, 1)[:, None])


def from_slices(slices: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(slices[:, 0].transpose(1, 2, 0))


# -- stage 2 ------------------------------------------------------------------------

STAGE2_COLUMNS = ["epoch", "step", "loss_total", "l1", "perc", "g_adv", "semantic", "anatomy", "d_loss", "lr"]
STAGE2_NETS = ("refiner", "disc", "student", "teacher")


def _stage2_meta(cfg, epoch, step, states, coarse_ckpt):
    return {
        "stage": 2,
        "epoch": epoch,
        "step": step,
        "opt_step": {k: s.step for k, s in states.items()},
        "networks": {
            "refiner": asdict(cfg.refine_net),
            "student": asdict(feature_config(cfg.refine_net)),
            "teacher": asdict(feature_config(cfg.refine_net)),
        },
        "disc": {"widths": list(DISC_WIDTHS), "in_channels": cfg.refine_net.out_channels},
        "hu_window": list(cfg.hu_window),
        "coarse_checkpoint": str(coarse_ckpt),
        "train_config": _config_dict(cfg),
    }


def train_stage2(
    volumes: list[Volume], coarse_ckpt, cfg: TrainConfig, out_dir=None, resume=None, verbose: bool = False
) -> TrainResult:
    """Train refiner, discriminator and student feature net against the frozen coarse net."""
    coarse, coarse_cfg, _ = load_network(coarse_ckpt, "coarse")
    coarse.set_trainable(False)
    cfg_c = TrainConfig(**{**cfg.__dict__, "coarse_net": coarse_cfg})
    x_all, y_all = _prepare(volumes, cfg_c)
    inputs = np.concatenate([to_slices(coarse_predict(coarse, coarse_cfg, x[0])) for x in x_all])
    targets = np.concatenate([to_slices(y[0]) for y in y_all])

    fcfg = feature_config(cfg.refine_net)
    nets = {
        "refiner": build_unet(cfg.refine_net, cfg.seed + 1),
        "disc": build_discriminator(cfg.seed + 2, in_channels=cfg.refine_net.out_channels),
        "student": build_unet(fcfg, cfg.seed + 3),
    }
    nets["teacher"] = nets["student"].clone(requires_grad=False)
    nets["student"].set_trainable(cfg.train_student)
    trained = ("refiner", "disc", "student") if cfg.train_student else ("refiner", "disc")
    states = {k: OptimizerState.zeros_like(nets[k]) for k in trained}
    start, step = 0, 0
    if resume is not None:
        arrays, meta = load_checkpoint(resume)
        for k in STAGE2_NETS:
            nets[k] = restore_params(nets[k], unpack(k, arrays))
        for k in trained:
            states[k] = OptimizerState(unpack(f"opt.{k}.m", arrays), unpack(f"opt.{k}.v", arrays), meta["opt_step"][k])
        start, step = meta["epoch"], meta["step"]
    refiner, disc, student, teacher = (nets[k] for k in STAGE2_NETS)
    extractor = default_extractor()
    w, cc = cfg.loss_weights, cfg.contrastive
    use_contrast = w.w_contrast > 0

    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    log = TrainLog(out / "stage2_log.csv" if out else None, STAGE2_COLUMNS, step if resume else None)
    trace, ckpt = [], None
    for epoch in range(start, cfg.epochs):
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr_init, cfg.lr_min)
        rng = _epoch_rng(cfg, epoch)
        for idx in _batches(rng, len(inputs), cfg):
            x, y = Tensor(inputs[idx]), targets[idx]
            fake = _guard(lambda: unet_forward(refiner, cfg.refine_net, x), epoch, step, "refiner forward")

            # discriminator update on a detached copy of the refined slices
            d_real = disc_forward(disc, Tensor(y))
            d_fake = disc_forward(disc, Tensor(fake.data))
            d_loss, _ = _guard(lambda: adversarial_losses(d_real, d_fake), epoch, step, "discriminator loss")
            backward(d_loss)
            _step(disc, states["disc"], lr, cfg)

            disc.set_trainable(False)

            def gen_losses():
                _, g_adv = adversarial_losses(Tensor(d_real.data), disc_forward(disc, fake))
                l1 = l1_loss(fake, y)
                perc = perceptual_loss(extractor, fake, y)
                sem = ana = 0.0
                if use_contrast:
                    sf = feature_forward(student, fcfg, fake)
                    with no_grad():
                        tf = feature_forward(teacher, fcfg, Tensor(y))
                    n, _, hs, ws = sf.semantic.shape
                    ha, wa = sf.anatomy.shape[-2:]
                    sem = semantic_loss(sf, tf, sample_anchors(rng, (n, hs, ws), cc.anchors_per_image), cc)
                    ana = anatomy_infonce(sf, tf, sample_anchors(rng, (n, ha, wa), cc.anchors_per_image), cc)
                total = hybrid_loss(l1, perc, g_adv, sem, ana, w)
                return total, l1, perc, g_adv, sem, ana

            total, l1, perc, g_adv, sem, ana = _guard(gen_losses, epoch, step, "hybrid loss")
            backward(total)
            disc.set_trainable(True)
            _step(refiner, states["refiner"], lr, cfg)
            if cfg.train_student:
                _step(student, states["student"], lr, cfg)
            ema_update(teacher, student, cc.ema_momentum)

            row = {
                "epoch": epoch,
                "step": step,
                "loss_total": _val(total),
                "l1": _val(l1),
                "perc": _val(perc),
                "g_adv": _val(g_adv),
                "semantic": _val(sem),
                "anatomy": _val(ana),
                "d_loss": _val(d_loss),
                "lr": lr,
            }
            trace.append(row)
            log.write(row)
            step += 1
        if verbose:
            print(f"stage2 epoch {epoch} loss {trace[-1]['loss_total']:.6g} lr {lr:.3g}", flush=True)
        if out and ((epoch + 1) % cfg.checkpoint_every == 0 or epoch + 1 == cfg.epochs):
            arrays = {}
            for k in STAGE2_NETS:
                arrays.update(pack(k, nets[k]))
            for k, s in states.items():
                arrays.update(pack(f"opt.{k}.m", s.m))
                arrays.update(pack(f"opt.{k}.v", s.v))
            ckpt = save_checkpoint(out / "stage2", arrays, _stage2_meta(cfg, epoch + 1, step, states, coarse_ckpt))
    return TrainResult(dict(nets), trace, ckpt)


def _val(v) -> float:
    return float(v.item()) if isinstance(v, Tensor) else float(v)


# -- inference ------------------------------------------------------------------------


def geometry_from_projections(ap: Projection, lat: Projection) -> tuple[tuple[int, int, int], tuple[float, float, float]]:
    if ap.axis != "AP" or lat.axis != "LAT":
        raise GeometryError(f"need (AP, LAT) projections, got ({ap.axis}, {lat.axis})")
    if ap.dims[1] != lat.dims[1] or not math.isclose(ap.pixel_spacing[1], lat.pixel_spacing[1]):
        raise GeometryError(f"AP {ap.dims} and LAT {lat.dims} disagree on the axial extent")
    dims = (ap.dims[0], lat.dims[0], ap.dims[1])
    spacing = (ap.pixel_spacing[0], lat.pixel_spacing[0], ap.pixel_spacing[1])
    return dims, spacing


def reconstruct_init(ap: Projection, lat: Projection) -> Volume:
    dims, spacing = geometry_from_projections(ap, lat)
    return back_project(ap, lat, dims, spacing)


@dataclass
class Reconstructor:
    """Loaded coarse and refinement networks; reusable across many reconstructions."""

    coarse: NetworkParams
    coarse_cfg: UNetConfig
    refiner: NetworkParams | None
    refine_cfg: UNetConfig | None
    hu_window: tuple[float, float]

    @classmethod
    def load(cls, coarse_ckpt, refine_ckpt=None) -> "Reconstructor":
        coarse, ccfg, meta = load_network(coarse_ckpt, "coarse")
        refiner = rcfg = None
        if refine_ckpt is not None:
            refiner, rcfg, rmeta = load_network(refine_ckpt, "refiner")
            if rmeta["hu_window"] != meta["hu_window"]:
                raise ValueError("coarse and refinement checkpoints use different HU windows")
        return cls(coarse, ccfg, refiner, rcfg, tuple(meta["hu_window"]))

    def __call__(self, ap: Projection, lat: Projection) -> Volume:
        init = reconstruct_init(ap, lat)
        lo, hi = self.hu_window
        x = normalize_volume(init.values.astype(np.float32), lo, hi)
        vol = coarse_predict(self.coarse, self.coarse_cfg, x)
        if self.refiner is not None:
            with no_grad():
                vol = from_slices(unet_forward(self.refiner, self.refine_cfg, Tensor(to_slices(vol))).data)
        return Volume(denormalize(vol, lo, hi).astype(np.float32), init.spacing)


def reconstruct(ap: Projection, lat: Projection, coarse_ckpt, refine_ckpt=None) -> Volume:
    """Back-projection, coarse 3D net, then the per-slice refiner; output in HU."""
    return Reconstructor.load(coarse_ckpt, refine_ckpt)(ap, lat)
