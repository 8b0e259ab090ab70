"""End-to-end coarse-to-fine scene flow: pyramid build, coarsest-level
initialization, diffusion-refined residuals per level, losses, training loop,
and refinement of externally supplied coarse flows."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Literal, Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn
from pydantic import BaseModel, Field, model_validator

from . import __version__
from .correlation import CostVolume, CostVolumeNet, FlowInitializer, OFFSET_CHANNELS
from .data import Sample
from .diffusion import (ConditionBundle, DenoiserNet, build_schedule, load_checkpoint,
                        q_sample, residual_loss, sample_residual, save_checkpoint)
from .errors import InvalidArgumentError
from .geometry import (FlowField, PointCloud, PointwiseMLP, SetConvLayer, SetUpconvLayer,
                       Tensor, fps_indices, gather_rows, three_nn_batched, three_nn_multi)
from .metrics import MetricReport, compute_metrics, pool_reports
from .uncertainty import (ThresholdSchedule, build_uncertainty_gt,
                          continuous_uncertainty_gt, thresholds_at, uncertainty_loss)


# ---------------------------------------------------------------------------
# configuration


class WidthConfig(BaseModel):
    features: List[int] = Field(default_factory=lambda: [32, 64, 96, 128])  # fine → coarse
    cv_state: int = 64
    correlation: int = 64
    correlation_hidden: List[int] = Field(default_factory=lambda: [32, 48, 64, 64])
    flow_embed: int = 32
    denoiser_hidden: int = 96
    time_embed: int = 64
    init_hidden: int = 64


class AblationConfig(BaseModel):
    """Switches mirroring the ablation axes: refinement off, condition segments
    zeroed, uncertainty off, continuous GT, separate uncertainty head."""

    refinement: bool = True
    cond_geometry: bool = True
    cond_cost_volume: bool = True
    cond_flow_embed: bool = True
    uncertainty: bool = True
    continuous_uncertainty_gt: bool = False
    separate_uncertainty_head: bool = False


class OptimConfig(BaseModel):
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    lr_decay: float = 0.8
    lr_decay_every: int = 10
    epochs: int = 60
    batch_size: int = 8
    grad_clip: float = 1.0
    flow_noise_aug: float = 0.05  # train-time coarse-flow perturbation scale; 0 disables


class ThresholdConfig(BaseModel):
    e1_init: float = 0.5
    e2_init: float = 0.5
    decay: float = 0.8
    floor: float = 0.02
    interval: int = 10

    def to_schedule(self) -> ThresholdSchedule:
        return ThresholdSchedule(e1_init=self.e1_init, e2_init=self.e2_init,
                                 decay=self.decay, floor=self.floor, interval=self.interval)


class PipelineConfig(BaseModel):
    """Run configuration; every field has a default and JSON round-trips."""

    level_sizes: List[int] = Field(default_factory=lambda: [1024, 256, 64, 16])  # fine → coarse
    refine_layers: int = 3
    knn_conv: int = 16
    knn_corr: int = 16
    knn_upconv: int = 8
    aggregation: Literal["max", "weighted"] = "max"
    denoiser: Literal["gru", "mlp", "transformer"] = "gru"
    ddim_steps: int = 4
    diffusion_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sigma: float = 1.0
    lambda_sf: float = 1.0
    lambda_res: float = 1.0
    lambda_un: float = 1.0
    level_weights: List[float] = Field(default_factory=lambda: [0.02, 0.04, 0.08, 0.16])  # fine → coarse
    correlation_iters: int = 1
    widths: WidthConfig = Field(default_factory=WidthConfig)
    ablation: AblationConfig = Field(default_factory=AblationConfig)
    optimizer: OptimConfig = Field(default_factory=OptimConfig)
    thresholds: ThresholdConfig = Field(default_factory=ThresholdConfig)
    device: str = "cpu"

    @model_validator(mode="after")
    def _check(self) -> "PipelineConfig":
        n_levels = len(self.level_sizes)
        if n_levels < 2:
            raise ValueError("need at least two pyramid levels")
        if self.refine_layers != n_levels - 1:
            raise ValueError(f"refine_layers must equal len(level_sizes)-1 = {n_levels - 1}")
        if len(self.level_weights) != n_levels:
            raise ValueError("level_weights must have one entry per pyramid level")
        if len(self.widths.features) != n_levels or len(self.widths.correlation_hidden) != n_levels:
            raise ValueError("per-level width lists must match the level count")
        if any(s < 1 for s in self.level_sizes):
            raise ValueError("level sizes must be >= 1")
        if any(a < b for a, b in zip(self.level_sizes, self.level_sizes[1:])):
            raise ValueError("level_sizes must be non-increasing fine to coarse")
        if min(self.lambda_sf, self.lambda_res, self.lambda_un) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.knn_corr > min(self.level_sizes):
            raise ValueError("knn_corr cannot exceed the smallest level size")
        if not (1 <= self.ddim_steps <= self.diffusion_steps):
            raise ValueError("ddim_steps must lie in [1, diffusion_steps]")
        return self


def deep_merge(base: dict, override: dict) -> dict:
    """Recursive dict merge; override wins on scalars and lists."""
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def config_from_dict(overrides: Optional[dict] = None) -> PipelineConfig:
    """Defaults merged with a (possibly partial, possibly nested) override dict."""
    base = PipelineConfig().model_dump()
    merged = deep_merge(base, overrides or {})
    return PipelineConfig.model_validate(merged)


# ---------------------------------------------------------------------------
# forward machinery


@dataclass
class PyramidLevel:
    pos: Tensor   # (B,n,3)
    feat: Tensor  # (B,n,C)
    idx0: Tensor  # (B,n) rows into the finest level

    @property
    def n(self) -> int:
        return self.pos.shape[1]


@dataclass
class LevelOutput:
    """Per-level result; level is the pyramid index (0 = finest)."""

    level: int
    sf: Tensor
    u: Tensor
    s0_hat: Optional[Tensor] = None
    u0_hat: Optional[Tensor] = None
    sf_dense: Optional[Tensor] = None
    u_dense: Optional[Tensor] = None
    cond: Optional[ConditionBundle] = None
    t: Optional[int] = None
    sf_gt: Optional[Tensor] = None
    mask: Optional[Tensor] = None
    u_gt: Optional[Tensor] = None


def assemble_condition(p: Tensor, cv: Union[Tensor, CostVolume], e: Tensor,
                       ablation: Optional[AblationConfig] = None) -> ConditionBundle:
    """Concatenate (geometry, cost volume, flow embedding); ablated segments zeroed."""
    cv_values = cv.values if isinstance(cv, CostVolume) else cv
    if p.shape[:-1] != cv_values.shape[:-1] or p.shape[:-1] != e.shape[:-1]:
        raise InvalidArgumentError("condition segments are row-misaligned")
    if ablation is not None:
        if not ablation.cond_geometry:
            p = torch.zeros_like(p)
        if not ablation.cond_cost_volume:
            cv_values = torch.zeros_like(cv_values)
        if not ablation.cond_flow_embed:
            e = torch.zeros_like(e)
    values = torch.cat([p, cv_values, e], dim=-1)
    return ConditionBundle(values=values, widths=(p.shape[-1], cv_values.shape[-1], e.shape[-1]))


class RefineLayer(nn.Module):
    """One diffusion refinement step producing dense flow at `fine_level`."""

    def __init__(self, cfg: PipelineConfig, fine_level: int):
        super().__init__()
        w = cfg.widths
        f_fine = w.features[fine_level]
        f_sparse = w.features[fine_level + 1]
        self.fine_level = fine_level
        self.flow_embed = PointwiseMLP([4 + f_sparse, w.flow_embed, w.flow_embed])
        self.upconv = SetUpconvLayer(w.flow_embed, w.flow_embed, cfg.knn_upconv)
        self.cv = CostVolumeNet(f_fine, f_fine, w.cv_state, w.correlation,
                                w.correlation_hidden[fine_level], cfg.knn_corr)
        self.cond_width = f_fine + self.cv.out_width + w.flow_embed
        self.denoiser = DenoiserNet(self.cond_width, w.denoiser_hidden, w.time_embed, cfg.denoiser)
        self.u_head = (nn.Linear(self.cv.out_width, 1)
                       if cfg.ablation.separate_uncertainty_head else None)


def _randn(shape, gen: torch.Generator, like: Tensor) -> Tensor:
    return torch.randn(shape, generator=gen, dtype=like.dtype, device=like.device)


class SceneFlowNet(nn.Module):
    """Siamese pyramid extraction, coarsest initialization, K refinement layers."""

    def __init__(self, cfg: PipelineConfig):
        super().__init__()
        self.cfg = cfg
        self.sched = build_schedule(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end, cfg.sigma)
        w = cfg.widths
        n_levels = len(cfg.level_sizes)
        convs = []
        for p in range(n_levels):
            in_width = 1 if p == 0 else w.features[p - 1]
            convs.append(SetConvLayer(in_width, w.features[p], cfg.knn_conv, cfg.aggregation))
        self.extractor = nn.ModuleList(convs)
        self.flow_init = FlowInitializer(w.features[-1], w.cv_state, w.correlation,
                                         w.correlation_hidden[-1], k=cfg.knn_corr)
        self.refiners = nn.ModuleList(
            [RefineLayer(cfg, fine) for fine in range(n_levels - 2, -1, -1)])

    @property
    def n_levels(self) -> int:
        return len(self.cfg.level_sizes)

    def refiner_at(self, fine_level: int) -> RefineLayer:
        return self.refiners[self.n_levels - 2 - fine_level]

    def _cv_at_level(self, level: int) -> CostVolumeNet:
        return self.flow_init.cv if level == self.n_levels - 1 else self.refiner_at(level).cv

    # -- pyramid ------------------------------------------------------------

    def extract_pyramid(self, pos: Tensor, gen: torch.Generator) -> List[PyramidLevel]:
        b, n = pos.shape[0], pos.shape[1]
        if n < self.cfg.level_sizes[1]:
            raise InvalidArgumentError(
                f"input cloud of {n} points is smaller than level-1 size {self.cfg.level_sizes[1]}")
        ones = pos.new_ones(b, n, 1)
        levels = [PyramidLevel(pos=pos, feat=self.extractor[0](pos, pos, ones),
                               idx0=torch.arange(n, device=pos.device).expand(b, n))]
        for p in range(1, self.n_levels):
            prev = levels[-1]
            k = self.cfg.level_sizes[p]
            start = torch.randint(prev.n, (b,), generator=gen, device=pos.device)
            idx = fps_indices(prev.pos, k, start)
            levels.append(PyramidLevel(
                pos=gather_rows(prev.pos, idx),
                feat=self.extractor[p](gather_rows(prev.pos, idx), prev.pos, prev.feat),
                idx0=prev.idx0.gather(1, idx),
            ))
        return levels

    # -- refinement steps ---------------------------------------------------

    def _build_u_gt(self, sf_basis: Tensor, sf_gt: Tensor, thresholds: Tuple[float, float]) -> Tensor:
        builder = (continuous_uncertainty_gt if self.cfg.ablation.continuous_uncertainty_gt
                   else build_uncertainty_gt)
        with torch.no_grad():
            return builder(sf_basis.detach(), sf_gt.detach(), thresholds[0], thresholds[1])

    def _refine_once(self, fine: int, sf_sparse: Tensor, u_sparse: Tensor, state_sparse: Tensor,
                     pyr1: List[PyramidLevel], pyr2: List[PyramidLevel], mode: str,
                     gen: torch.Generator, sf_gt_fine: Optional[Tensor],
                     thresholds: Optional[Tuple[float, float]],
                     ddim_steps: Optional[int],
                     sf_dense_override: Optional[Tensor] = None) -> Tuple[LevelOutput, Tensor]:
        cfg = self.cfg
        layer = self.refiner_at(fine)
        sp, fi, fi2 = pyr1[fine + 1], pyr1[fine], pyr2[fine]

        aug = cfg.optimizer.flow_noise_aug
        if mode == "train" and aug > 0:
            # draw count is fixed so the generator stream does not depend on the coin
            coin = torch.rand((), generator=gen)
            sig = torch.rand((), generator=gen) * aug
            noise = _randn(sf_sparse.shape, gen, sf_sparse)
            if coin < 0.5:
                sf_sparse = sf_sparse + sig * noise

        if sf_dense_override is not None:
            sf_dense = sf_dense_override
            u_dense, state_dense = three_nn_multi(sp.pos, [u_sparse, state_sparse], fi.pos)
        else:
            sf_dense, u_dense, state_dense = three_nn_multi(
                sp.pos, [sf_sparse, u_sparse, state_sparse], fi.pos)

        emb = layer.flow_embed(torch.cat([sf_sparse, u_sparse, sp.feat], dim=-1))
        e = layer.upconv(sp.pos, emb, fi.pos)
        state = state_dense
        for _ in range(max(1, cfg.correlation_iters)):
            cv_vals = layer.cv(fi.pos, fi.feat, fi2.pos, fi2.feat, sf_dense, state)
            state = cv_vals[..., OFFSET_CHANNELS:]
        cond = assemble_condition(fi.feat, cv_vals, e, cfg.ablation)

        t = None
        u_gt = None
        if mode == "train":
            if sf_gt_fine is None or thresholds is None:
                raise InvalidArgumentError("train mode requires ground truth and thresholds")
            t = int(torch.randint(1, self.sched.T + 1, (1,), generator=gen))
            s0_gt = sf_gt_fine - sf_dense
            u_gt = self._build_u_gt(sf_dense, sf_gt_fine, thresholds)
            s_t = q_sample(s0_gt, t, _randn(s0_gt.shape, gen, s0_gt), self.sched)
            u_t = q_sample(u_gt, t, _randn(u_gt.shape, gen, u_gt), self.sched)
            s0_hat, u0_hat, _ = layer.denoiser(s_t, u_t, t, cond.values)
        else:
            shape3 = sf_dense.shape
            noise_s = _randn(shape3, gen, sf_dense)
            noise_u = _randn((*shape3[:-1], 1), gen, sf_dense)
            s0_hat, u0_hat = sample_residual(layer.denoiser, cond,
                                             ddim_steps or cfg.ddim_steps, self.sched,
                                             noise_s, noise_u)

        if layer.u_head is not None:
            u0_hat = layer.u_head(cv_vals)
        if not cfg.ablation.uncertainty:
            u0_hat = torch.zeros_like(u0_hat)

        out = LevelOutput(level=fine, sf=sf_dense + s0_hat, u=u_dense + u0_hat,
                          s0_hat=s0_hat, u0_hat=u0_hat, sf_dense=sf_dense, u_dense=u_dense,
                          cond=cond, t=t, sf_gt=sf_gt_fine, u_gt=u_gt)
        return out, cv_vals[..., OFFSET_CHANNELS:]

    # -- full passes ----------------------------------------------------------

    def forward_batch(self, pos1: Tensor, pos2: Tensor, mode: str = "infer",
                      sf_gt: Optional[Tensor] = None, mask: Optional[Tensor] = None,
                      thresholds: Optional[Tuple[float, float]] = None,
                      gen: Optional[torch.Generator] = None,
                      ddim_steps: Optional[int] = None) -> List[LevelOutput]:
        """Coarse-to-fine forward over batched frames; returns outputs coarsest first."""
        if mode not in ("train", "infer"):
            raise InvalidArgumentError(f"unknown mode {mode!r}")
        if mode == "train" and sf_gt is None:
            raise InvalidArgumentError("train mode requires ground-truth flow")
        if gen is None:
            gen = torch.Generator().manual_seed(0)
        cfg = self.cfg
        pyr1 = self.extract_pyramid(pos1, gen)
        pyr2 = self.extract_pyramid(pos2, gen)

        def level_gt(level: int) -> Optional[Tensor]:
            return gather_rows(sf_gt, pyr1[level].idx0) if sf_gt is not None else None

        def level_mask(level: int) -> Optional[Tensor]:
            return gather_rows(mask, pyr1[level].idx0) if mask is not None else None

        coarse = self.n_levels - 1
        sf, u, cv_vals = self.flow_init(pyr1[coarse].pos, pyr1[coarse].feat,
                                        pyr2[coarse].pos, pyr2[coarse].feat)
        state = cv_vals[..., OFFSET_CHANNELS:]
        gt_c = level_gt(coarse)
        init_u_gt = self._build_u_gt(sf, gt_c, thresholds) if (gt_c is not None and thresholds) else None
        outputs = [LevelOutput(level=coarse, sf=sf, u=u, sf_gt=gt_c, mask=level_mask(coarse),
                               u_gt=init_u_gt)]

        for fine in range(self.n_levels - 2, -1, -1):
            if cfg.ablation.refinement:
                out, state = self._refine_once(fine, sf, u, state, pyr1, pyr2, mode, gen,
                                               level_gt(fine), thresholds, ddim_steps)
            else:
                sp = pyr1[fine + 1]
                sf_dense, u_dense, state = three_nn_multi(sp.pos, [sf, u, state], pyr1[fine].pos)
                out = LevelOutput(level=fine, sf=sf_dense, u=u_dense,
                                  sf_dense=sf_dense, u_dense=u_dense, sf_gt=level_gt(fine))
            out.mask = level_mask(fine)
            if out.sf_gt is not None and thresholds and out.u_gt is None:
                basis = out.sf if out.s0_hat is None else out.sf_dense
                out.u_gt = self._build_u_gt(basis, out.sf_gt, thresholds)
            outputs.append(out)
            sf, u = out.sf, out.u
        return outputs

    def forward(self, pc1: PointCloud, pc2: PointCloud, mode: str = "infer",
                sf_gt: Optional[Tensor] = None, thresholds: Optional[Tuple[float, float]] = None,
                seed: int = 0, ddim_steps: Optional[int] = None) -> List[LevelOutput]:
        """Single-pair surface over forward_batch; deterministic given (weights, seed)."""
        gen = torch.Generator().manual_seed(seed)
        outputs = self.forward_batch(pc1.positions[None], pc2.positions[None], mode,
                                     sf_gt=sf_gt[None] if sf_gt is not None else None,
                                     thresholds=thresholds, gen=gen, ddim_steps=ddim_steps)
        for out in outputs:
            for name in ("sf", "u", "s0_hat", "u0_hat", "sf_dense", "u_dense", "sf_gt", "u_gt", "mask"):
                value = getattr(out, name)
                if value is not None:
                    setattr(out, name, value[0])
            if out.cond is not None:
                out.cond = ConditionBundle(values=out.cond.values[0], widths=out.cond.widths)
        return outputs

    def refine_external(self, coarse_flow: FlowField, pc1: PointCloud, pc2: PointCloud,
                        seed: int = 0, ddim_steps: Optional[int] = None) -> FlowField:
        """Treat an externally estimated flow as the coarse input at its pyramid level
        and apply the remaining refinement layers (a same-resolution residual pass
        when the flow is already at the finest level)."""
        n_in = coarse_flow.n
        gen = torch.Generator().manual_seed(seed)
        pyr1 = self.extract_pyramid(pc1.positions[None], gen)
        pyr2 = self.extract_pyramid(pc2.positions[None], gen)
        sizes = [lvl.n for lvl in pyr1]
        if n_in not in sizes:
            raise InvalidArgumentError(
                f"flow resolution {n_in} does not match any pyramid level {sizes}")
        level = sizes.index(n_in)

        sf = coarse_flow.vectors[None]
        u = (coarse_flow.uncertainty[None] if coarse_flow.uncertainty is not None
             else sf.new_zeros(1, n_in, 1))

        if level == 0:
            # already finest: one residual pass at the same resolution
            sp = pyr1[1]
            sf_sparse = gather_rows(sf, sp.idx0)
            u_sparse = gather_rows(u, sp.idx0)
            state_sparse = sf.new_zeros(1, sp.n, self.cfg.widths.cv_state)
            out, _ = self._refine_once(0, sf_sparse, u_sparse, state_sparse, pyr1, pyr2,
                                       "infer", gen, None, None, ddim_steps,
                                       sf_dense_override=sf)
            return FlowField(vectors=out.sf[0], uncertainty=out.u[0])

        # warm the correlation state at the entry level, then run the remaining layers
        cv_entry = self._cv_at_level(level)
        vals = cv_entry(pyr1[level].pos, pyr1[level].feat, pyr2[level].pos, pyr2[level].feat, sf)
        state = vals[..., OFFSET_CHANNELS:]
        for fine in range(level - 1, -1, -1):
            out, state = self._refine_once(fine, sf, u, state, pyr1, pyr2, "infer", gen,
                                           None, None, ddim_steps)
            sf, u = out.sf, out.u
        return FlowField(vectors=sf[0], uncertainty=u[0])


# ---------------------------------------------------------------------------
# losses


def _masked_mean(x: Tensor, mask: Optional[Tensor]) -> Tensor:
    """Mean over valid points (and trailing channels); mask is (...,N,1) or None."""
    if mask is None:
        return x.mean()
    mask = mask.to(x.dtype)
    if x.ndim == mask.ndim - 1:  # per-point scalars such as norms
        mask = mask[..., 0]
        denom = mask.sum().clamp(min=1.0)
        return (x * mask).sum() / denom
    denom = mask.sum().clamp(min=1.0) * x.shape[-1]
    return (x * mask).sum() / denom


def total_loss(outputs: Sequence[LevelOutput], sf_gt_per_level: Sequence[Tensor],
               u_gt_per_level: Sequence[Optional[Tensor]], cfg: PipelineConfig,
               return_parts: bool = False):
    """Level-weighted mixture of flow, residual, and uncertainty terms.

    The flow term is the mean per-point L2 norm (not squared); residual and
    uncertainty terms are mean squared errors. Levels are weighted by the
    config's per-pyramid-level weights.
    """
    if len(outputs) != len(cfg.level_sizes):
        raise InvalidArgumentError(
            f"expected {len(cfg.level_sizes)} level outputs, got {len(outputs)}")
    if len(sf_gt_per_level) != len(outputs) or len(u_gt_per_level) != len(outputs):
        raise InvalidArgumentError("ground-truth level count mismatch")
    zero = outputs[0].sf.sum() * 0.0
    parts = {"loss_sf": zero.clone(), "loss_res": zero.clone(), "loss_un": zero.clone()}
    for out, sf_gt, u_gt in zip(outputs, sf_gt_per_level, u_gt_per_level):
        if sf_gt is None:
            raise InvalidArgumentError("missing ground-truth flow for a level")
        alpha = cfg.level_weights[out.level]
        mask = out.mask
        err = torch.linalg.vector_norm(out.sf - sf_gt, dim=-1)
        parts["loss_sf"] = parts["loss_sf"] + alpha * _masked_mean(err, mask)
        if out.s0_hat is not None:
            s0_gt = sf_gt - out.sf_dense
            d = out.s0_hat - s0_gt
            parts["loss_res"] = parts["loss_res"] + alpha * _masked_mean(d * d, mask)
        if cfg.ablation.uncertainty and u_gt is not None:
            u_pred = out.u if out.u0_hat is None else out.u0_hat
            d = u_pred - u_gt
            parts["loss_un"] = parts["loss_un"] + alpha * _masked_mean(d * d, mask)
    loss = (cfg.lambda_sf * parts["loss_sf"] + cfg.lambda_res * parts["loss_res"]
            + cfg.lambda_un * parts["loss_un"])
    if return_parts:
        return loss, {k: float(v.detach()) for k, v in parts.items()}
    return loss


# ---------------------------------------------------------------------------
# checkpoints


CHECKPOINT_FORMAT = 1


def save_model(net: SceneFlowNet, path, extra: Optional[dict] = None) -> None:
    """Archive of named weight arrays plus config/version metadata."""
    meta = {
        "format": CHECKPOINT_FORMAT,
        "package_version": __version__,
        "config": net.cfg.model_dump(),
    }
    if extra:
        meta["extra"] = extra
    save_checkpoint(path, net.state_dict(), meta)


def load_model(path, device: str = "cpu") -> SceneFlowNet:
    weights, meta = load_checkpoint(path)
    cfg = PipelineConfig.model_validate(meta["config"])
    net = SceneFlowNet(cfg)
    net.load_state_dict({k: torch.from_numpy(v) for k, v in weights.items()})
    net.to(device)
    net.eval()
    return net


# ---------------------------------------------------------------------------
# training and evaluation


HISTORY_KEYS = ("epoch", "lr", "E1", "E2", "loss_total", "loss_sf", "loss_res", "loss_un",
                "val_epe3d", "val_acc3ds", "val_acc3dr", "val_outliers")


@dataclass
class FitResult:
    net: SceneFlowNet
    history: List[dict]
    best_val_epe3d: Optional[float] = None
    checkpoint_path: Optional[Path] = None
    best_checkpoint_path: Optional[Path] = None


def _mix_seed(*parts: int) -> int:
    h = 0x9E3779B97F4A7C15
    for p in parts:
        h = (h ^ (p + 0x9E3779B9)) * 0xBF58476D1CE4E5B9 % (1 << 63)
    return h


def _sample_tensors(sample: Sample, device: str):
    pos1 = torch.from_numpy(sample.pc1).float().to(device)
    pos2 = torch.from_numpy(sample.pc2).float().to(device)
    gt = torch.from_numpy(sample.flow).float().to(device)
    mask = torch.from_numpy(sample.mask).float().to(device)
    return pos1, pos2, gt, mask


def _stack_batch(samples: Sequence[Sample], device: str):
    parts = [_sample_tensors(s, device) for s in samples]
    return tuple(torch.stack([p[i] for p in parts]) for i in range(4))


def _iter_shape_batches(samples: Sequence[Sample], order: Sequence[int], batch_size: int):
    """Consecutive runs of equally shaped samples, at most batch_size long."""
    batch: List[int] = []
    shape = None
    for idx in order:
        s = samples[idx]
        key = (s.pc1.shape[0], s.pc2.shape[0])
        if batch and (key != shape or len(batch) >= batch_size):
            yield batch
            batch = []
        batch.append(idx)
        shape = key
    if batch:
        yield batch


def evaluate(net: SceneFlowNet, samples: Sequence[Sample], seed: int = 0,
             ddim_steps: Optional[int] = None, batch_size: int = 8):
    """Inference metrics over samples (deterministic given seed and sample order).

    Returns (pooled report, per-sample reports, uncertainty values, per-point epe)
    with the last two concatenated over masked points in sample order.
    """
    device = next(net.parameters()).device
    net.eval()
    reports: List[MetricReport] = []
    u_all: List[Tensor] = []
    epe_all: List[Tensor] = []
    order = list(range(len(samples)))
    with torch.no_grad():
        for bi, batch in enumerate(_iter_shape_batches(samples, order, batch_size)):
            pos1, pos2, gt, mask = _stack_batch([samples[i] for i in batch], str(device))
            gen = torch.Generator().manual_seed(_mix_seed(seed, bi))
            outputs = net.forward_batch(pos1, pos2, "infer", gen=gen, ddim_steps=ddim_steps)
            finest = outputs[-1]
            for row, sample_idx in enumerate(batch):
                pred = finest.sf[row].cpu().numpy()
                sample = samples[sample_idx]
                reports.append(compute_metrics(pred, sample.flow, sample.mask))
                valid = sample.mask.reshape(-1).astype(bool)
                err = torch.linalg.vector_norm(
                    finest.sf[row] - torch.from_numpy(sample.flow).to(finest.sf), dim=-1)
                u_all.append(finest.u[row, valid, 0].cpu())
                epe_all.append(err[valid].cpu())
    pooled = pool_reports(reports)
    return pooled, reports, torch.cat(u_all).numpy(), torch.cat(epe_all).numpy()


def fit(train_samples: Sequence[Sample], cfg: PipelineConfig, seed: int,
        val_samples: Sequence[Sample] = (), out_dir=None, verbose: bool = True) -> FitResult:
    """Train a SceneFlowNet; reproducible given (cfg, seed, data).

    Per epoch: step-decayed learning rate and uncertainty thresholds, shuffled
    minibatches, single-shot denoiser supervision at a shared random t per batch
    and level, then DDIM validation metrics. Writes history.jsonl plus last/best
    checkpoints when out_dir is given; best is by validation EPE3D.
    """
    if len(train_samples) == 0:
        raise InvalidArgumentError("training dataset is empty")
    torch.manual_seed(seed)
    net = SceneFlowNet(cfg).to(cfg.device)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.optimizer.lr,
                           betas=(cfg.optimizer.beta1, cfg.optimizer.beta2))
    tsched = cfg.thresholds.to_schedule()

    out_dir = Path(out_dir) if out_dir is not None else None
    history_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        history_fh = (out_dir / "history.jsonl").open("w")

    history: List[dict] = []
    best_epe: Optional[float] = None
    best_path = out_dir / "best.ckpt" if out_dir else None
    last_path = out_dir / "last.ckpt" if out_dir else None

    try:
        for epoch in range(cfg.optimizer.epochs):
            lr = cfg.optimizer.lr * cfg.optimizer.lr_decay ** (epoch // cfg.optimizer.lr_decay_every)
            for group in opt.param_groups:
                group["lr"] = lr
            e1, e2 = thresholds_at(tsched, epoch)

            net.train()
            perm_gen = torch.Generator().manual_seed(_mix_seed(seed, epoch))
            order = torch.randperm(len(train_samples), generator=perm_gen).tolist()
            sums = {"loss_total": 0.0, "loss_sf": 0.0, "loss_res": 0.0, "loss_un": 0.0}
            n_batches = 0
            for step, batch in enumerate(_iter_shape_batches(train_samples, order,
                                                             cfg.optimizer.batch_size)):
                pos1, pos2, gt, mask = _stack_batch([train_samples[i] for i in batch], cfg.device)
                gen = torch.Generator().manual_seed(_mix_seed(seed, epoch, step))
                outputs = net.forward_batch(pos1, pos2, "train", sf_gt=gt, mask=mask,
                                            thresholds=(e1, e2), gen=gen)
                loss, parts = total_loss(outputs, [o.sf_gt for o in outputs],
                                         [o.u_gt for o in outputs], cfg, return_parts=True)
                opt.zero_grad()
                loss.backward()
                if cfg.optimizer.grad_clip > 0:
                    nn.utils.clip_grad_norm_(net.parameters(), cfg.optimizer.grad_clip)
                opt.step()
                sums["loss_total"] += float(loss.detach())
                for k in ("loss_sf", "loss_res", "loss_un"):
                    sums[k] += parts[k]
                n_batches += 1

            record = {
                "epoch": epoch,
                "lr": lr,
                "E1": e1,
                "E2": e2,
                "loss_total": sums["loss_total"] / n_batches,
                "loss_sf": sums["loss_sf"] / n_batches,
                "loss_res": sums["loss_res"] / n_batches,
                "loss_un": sums["loss_un"] / n_batches,
                "val_epe3d": None,
                "val_acc3ds": None,
                "val_acc3dr": None,
                "val_outliers": None,
            }
            if len(val_samples):
                report, _, _, _ = evaluate(net, val_samples, seed=_mix_seed(seed, 1),
                                           batch_size=cfg.optimizer.batch_size)
                record.update(val_epe3d=report.epe3d, val_acc3ds=report.acc3ds,
                              val_acc3dr=report.acc3dr, val_outliers=report.outliers)
                if best_epe is None or report.epe3d < best_epe:
                    best_epe = report.epe3d
                    if best_path is not None:
                        save_model(net, best_path, extra={"epoch": epoch, "val_epe3d": best_epe})
            history.append(record)
            if history_fh is not None:
                history_fh.write(json.dumps(record) + "\n")
                history_fh.flush()
            if verbose:
                val_txt = "" if record["val_epe3d"] is None else f" val_epe3d={record['val_epe3d']:.4f}"
                print(f"epoch {epoch:3d} lr={lr:.2e} loss={record['loss_total']:.4f}{val_txt}")
    finally:
        if history_fh is not None:
            history_fh.close()

    if last_path is not None:
        save_model(net, last_path, extra={"epoch": cfg.optimizer.epochs - 1})
        if best_path is not None and not best_path.exists():
            save_model(net, best_path)
    return FitResult(net=net, history=history, best_val_epe3d=best_epe,
                     checkpoint_path=last_path, best_checkpoint_path=best_path)
