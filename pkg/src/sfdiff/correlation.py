"""Cross-frame association: warping, attentive gated cost volume, and flow initialization."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import torch
import torch.nn as nn

from .errors import InvalidArgumentError
from .geometry import (FlowField, PointCloud, PointwiseMLP, Tensor, gather_rows,
                       knn_indices)

OFFSET_CHANNELS = 3  # leading cv channels carry the attention-weighted mean neighbor offset


@dataclass
class CostVolume:
    """Per-point correlation features aligned row-for-row with the first-frame cloud."""

    values: Tensor

    def __post_init__(self):
        if not torch.isfinite(self.values).all():
            raise InvalidArgumentError("cost volume contains non-finite entries")

    @property
    def n(self) -> int:
        return self.values.shape[-2]

    @property
    def width(self) -> int:
        return self.values.shape[-1]


def warp(pc1: PointCloud, flow: FlowField) -> PointCloud:
    """Displace frame-one positions by the flow; features carried through unchanged."""
    if flow.n != pc1.n:
        raise InvalidArgumentError(f"flow rows {flow.n} != cloud rows {pc1.n}")
    return PointCloud(positions=pc1.positions + flow.vectors, features=pc1.features,
                      level=pc1.level)


class CostVolumeNet(nn.Module):
    """Attentively correlates the warped first frame with the second frame.

    Per warped point: softmax attention over the k nearest second-frame neighbors
    of a learned score on (offset ⊕ feat1 ⊕ feat2), pooling both a correlation
    feature and the mean neighbor offset, then a gated recurrent update against
    the incoming correlation state. Output width is 3 + state_width.
    """

    def __init__(self, feat1_width: int, feat2_width: int, state_width: int = 64,
                 corr_width: int = 64, hidden: int = 64, k: int = 16):
        super().__init__()
        in_width = 3 + feat1_width + feat2_width
        self.k = k
        self.state_width = state_width
        self.score_net = PointwiseMLP([in_width, hidden, 1], final_act=False)
        self.feat_net = PointwiseMLP([in_width, hidden, corr_width])
        self.gate = nn.GRUCell(corr_width, state_width)

    @property
    def out_width(self) -> int:
        return OFFSET_CHANNELS + self.state_width

    def forward(self, pos1: Tensor, feat1: Tensor, pos2: Tensor, feat2: Tensor,
                flow_guess: Tensor, state: Optional[Tensor] = None) -> Tensor:
        if self.k > pos2.shape[-2]:
            raise InvalidArgumentError(f"k={self.k} exceeds second-frame size {pos2.shape[-2]}")
        if flow_guess.shape != pos1.shape:
            raise InvalidArgumentError("flow_guess must align with pos1")
        warped = pos1 + flow_guess
        idx = knn_indices(warped, pos2, self.k)
        nb_pos = gather_rows(pos2, idx)
        off = nb_pos - warped[:, :, None, :]  # (B,N,K,3)
        v = torch.cat([off, feat1[:, :, None, :].expand(-1, -1, self.k, -1),
                       gather_rows(feat2, idx)], dim=-1)
        att = torch.softmax(self.score_net(v), dim=2)  # (B,N,K,1)
        soft_off = (att * off).sum(dim=2)
        corr = (att * self.feat_net(v)).sum(dim=2)  # (B,N,C)
        b, n = corr.shape[0], corr.shape[1]
        if state is None:
            state = corr.new_zeros(b, n, self.state_width)
        new_state = self.gate(corr.reshape(b * n, -1), state.reshape(b * n, -1))
        return torch.cat([soft_off, new_state.reshape(b, n, -1)], dim=-1)

    def cost_volume(self, pc1: PointCloud, pc2: PointCloud, flow_guess: FlowField,
                    state: Optional[Tensor] = None) -> CostVolume:
        """Single-cloud surface over the batched forward."""
        if flow_guess.n != pc1.n:
            raise InvalidArgumentError("flow_guess rows must match pc1")
        state_b = state[None] if state is not None else None
        values = self.forward(pc1.positions[None], pc1.features[None],
                              pc2.positions[None], pc2.features[None],
                              flow_guess.vectors[None], state_b)
        return CostVolume(values=values[0])


class InitHead(nn.Module):
    """Pointwise decoder from the zero-guess cost volume to (flow, uncertainty).

    The final layer starts at zero so an untrained head outputs exactly zero flow
    and squash(0) uncertainty; the uncertainty channel is squashed onto [0,1].
    """

    def __init__(self, cv_width: int, hidden: int = 64):
        super().__init__()
        self.mlp = PointwiseMLP([cv_width, hidden, hidden])
        self.out = nn.Linear(hidden, 4)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, cv_values: Tensor) -> Tuple[Tensor, Tensor]:
        o = self.out(self.mlp(cv_values))
        return o[..., :3], torch.sigmoid(o[..., 3:4])


class FlowInitializer(nn.Module):
    """Coarsest-level initialization: zero-guess cost volume decoded to sf^0 and u^0."""

    def __init__(self, feat_width: int, state_width: int = 64, corr_width: int = 64,
                 hidden: int = 64, k: int = 16):
        super().__init__()
        self.cv = CostVolumeNet(feat_width, feat_width, state_width, corr_width, hidden, k)
        self.head = InitHead(self.cv.out_width, hidden)

    def forward(self, pos1: Tensor, feat1: Tensor, pos2: Tensor,
                feat2: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
        values = self.cv(pos1, feat1, pos2, feat2, torch.zeros_like(pos1))
        flow, unc = self.head(values)
        return flow, unc, values

    def init_flow_uncertainty(self, pc1_coarse: PointCloud, pc2_coarse: PointCloud) -> FlowField:
        flow, unc, _ = self.forward(pc1_coarse.positions[None], pc1_coarse.features[None],
                                    pc2_coarse.positions[None], pc2_coarse.features[None])
        return FlowField(vectors=flow[0], uncertainty=unc[0])
