"""Point-cloud pyramid primitives: sampling, neighborhood search, aggregation, interpolation.

All operations are pure functions of their inputs (no hidden state); batched
variants carry a leading B dim and are what the pipeline uses internally. The
public single-cloud API mirrors them for direct use and testing.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import torch
import torch.nn as nn

from .errors import InvalidArgumentError

Tensor = torch.Tensor


@dataclass
class PointCloud:
    """One frame at one pyramid level: positions (N,3) and per-point features (N,D)."""

    positions: Tensor
    features: Tensor
    level: int = 0

    def __post_init__(self):
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise InvalidArgumentError(f"positions must be (N,3), got {tuple(self.positions.shape)}")
        if self.positions.shape[0] < 1:
            raise InvalidArgumentError("point cloud must contain at least one point")
        if not torch.isfinite(self.positions).all():
            raise InvalidArgumentError("positions contain non-finite entries")
        if self.features.ndim != 2 or self.features.shape[0] != self.positions.shape[0]:
            raise InvalidArgumentError(
                f"features rows ({tuple(self.features.shape)}) must match positions rows ({self.positions.shape[0]})"
            )

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def feature_width(self) -> int:
        return self.features.shape[1]

    @classmethod
    def from_positions(cls, positions: Tensor, level: int = 0) -> "PointCloud":
        """Cloud with the all-ones 1-channel feature used when inputs carry no attributes."""
        ones = torch.ones(positions.shape[0], 1, dtype=positions.dtype, device=positions.device)
        return cls(positions=positions, features=ones, level=level)


@dataclass
class FlowField:
    """Per-point 3D motion vectors aligned with a PointCloud, optional uncertainty channel."""

    vectors: Tensor
    uncertainty: Optional[Tensor] = None

    def __post_init__(self):
        if self.vectors.ndim != 2 or self.vectors.shape[1] != 3:
            raise InvalidArgumentError(f"flow vectors must be (N,3), got {tuple(self.vectors.shape)}")
        if self.uncertainty is not None:
            if self.uncertainty.ndim == 1:
                self.uncertainty = self.uncertainty[:, None]
            if self.uncertainty.shape != (self.vectors.shape[0], 1):
                raise InvalidArgumentError("uncertainty must be (N,1) aligned with vectors")

    @property
    def n(self) -> int:
        return self.vectors.shape[0]


@dataclass
class NeighborIndex:
    """Row i lists the K source rows neighboring query point i."""

    indices: Tensor
    source_size: int

    def __post_init__(self):
        if self.indices.ndim != 2 or self.indices.shape[1] < 1:
            raise InvalidArgumentError("indices must be (N,K) with K >= 1")
        if self.indices.numel() and (self.indices.min() < 0 or self.indices.max() >= self.source_size):
            raise InvalidArgumentError("neighbor index out of range of source cloud")

    @property
    def query_count(self) -> int:
        return self.indices.shape[0]

    @property
    def k(self) -> int:
        return self.indices.shape[1]


class PointwiseMLP(nn.Module):
    """Stack of Linear + LeakyReLU applied to the last dim, shared across points."""

    def __init__(self, widths: Sequence[int], final_act: bool = True, negative_slope: float = 0.1):
        super().__init__()
        if len(widths) < 2:
            raise InvalidArgumentError("PointwiseMLP needs at least input and output widths")
        layers = []
        for i in range(len(widths) - 1):
            layers.append(nn.Linear(widths[i], widths[i + 1]))
            if i < len(widths) - 2 or final_act:
                layers.append(nn.LeakyReLU(negative_slope, inplace=True))
        self.net = nn.Sequential(*layers)
        self.in_width = widths[0]
        self.out_width = widths[-1]

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x)


# ---------------------------------------------------------------------------
# batched cores


def gather_rows(x: Tensor, idx: Tensor) -> Tensor:
    """x (B,M,C) gathered by idx (B,N) -> (B,N,C) or idx (B,N,K) -> (B,N,K,C)."""
    b = torch.arange(x.shape[0], device=x.device)
    if idx.ndim == 2:
        return x[b[:, None], idx]
    return x[b[:, None, None], idx]


def pairwise_sqdist(query: Tensor, source: Tensor, chunk: int = 512) -> Tensor:
    """Exact squared distances (B,N,M), chunked over queries to bound memory."""
    out = []
    for start in range(0, query.shape[1], chunk):
        q = query[:, start:start + chunk]  # (B,n,3)
        d = q[:, :, None, :] - source[:, None, :, :]  # (B,n,M,3)
        out.append((d * d).sum(-1))
    return torch.cat(out, dim=1)


_EXACT_KNN_LIMIT = 256 * 256


def knn_indices(query: Tensor, source: Tensor, k: int) -> Tensor:
    """Indices (B,N,k) of the k source points nearest each query, ascending distance.

    Small problems take the exact elementwise path with a stable sort, so ties
    break toward the lowest source index. Large problems use a chunked matmul
    expansion with top-k, which agrees except on sub-epsilon ties.
    """
    if k < 1 or k > source.shape[1]:
        raise InvalidArgumentError(f"k={k} out of range for source of size {source.shape[1]}")
    if query.shape[1] * source.shape[1] <= _EXACT_KNN_LIMIT:
        d2 = pairwise_sqdist(query, source)
        order = torch.argsort(d2, dim=-1, stable=True)
        return order[..., :k]
    q = query.detach()
    s = source.detach()
    s_t = s.transpose(1, 2).contiguous()
    s_sq = (s * s).sum(-1)[:, None, :]
    out = []
    for start in range(0, q.shape[1], 256):
        qc = q[:, start:start + 256]
        d2 = (qc * qc).sum(-1, keepdim=True) + s_sq - 2.0 * (qc @ s_t)
        out.append(d2.topk(k, dim=-1, largest=False).indices)
    return torch.cat(out, dim=1)


def fps_indices(positions: Tensor, k: int, start: Tensor) -> Tensor:
    """Greedy farthest point sampling (B,N,3) -> (B,k); start (B,) seeds the first pick.

    Each next pick maximizes the minimum distance to the selected set; ties break
    toward the lowest index. Distances run in float64 so rigid motions of the
    input cannot flip selections through rounding.
    """
    b_n, n = positions.shape[0], positions.shape[1]
    if k < 1 or k > n:
        raise InvalidArgumentError(f"k={k} out of range for cloud of size {n}")
    pos = positions.detach().to(torch.float64)
    batch = torch.arange(b_n, device=pos.device)
    selected = torch.empty(b_n, k, dtype=torch.long, device=pos.device)
    selected[:, 0] = start
    diff = pos - pos[batch, start][:, None, :]
    min_d2 = (diff * diff).sum(-1)  # (B,N)
    min_d2[batch, start] = -1.0
    arange = torch.arange(n, device=pos.device)
    for j in range(1, k):
        max_v = min_d2.max(dim=1).values
        cand = min_d2 == max_v[:, None]
        far = torch.where(cand, arange, n).min(dim=1).values
        selected[:, j] = far
        diff = pos - pos[batch, far][:, None, :]
        d2 = (diff * diff).sum(-1)
        min_d2 = torch.minimum(min_d2, d2)
        min_d2[batch, far] = -1.0
    return selected


def grouped_offsets_features(center_pos: Tensor, source_pos: Tensor, source_feat: Tensor,
                             idx: Tensor) -> Tensor:
    """Per neighbor: (position offset to center) concat (source feature) -> (B,N,K,3+D)."""
    nb_pos = gather_rows(source_pos, idx)
    nb_feat = gather_rows(source_feat, idx)
    offsets = nb_pos - center_pos[:, :, None, :]
    return torch.cat([offsets, nb_feat], dim=-1)


def aggregate(groups: Tensor, agg: str, scores: Optional[Tensor] = None) -> Tensor:
    """Reduce (B,N,K,C) over K: elementwise max, or score-softmax weighted sum."""
    if agg == "max":
        return groups.max(dim=2).values
    if agg == "weighted":
        if scores is None:
            raise InvalidArgumentError("weighted aggregation requires scores")
        w = torch.softmax(scores, dim=2)
        return (groups * w).sum(dim=2)
    raise InvalidArgumentError(f"unknown aggregation {agg!r}")


def three_nn_multi(sparse_pos: Tensor, value_list: Sequence[Tensor], dense_pos: Tensor,
                   eps: float = 1e-10) -> list:
    """Interpolate several aligned value arrays with one shared neighbor search.

    Inverse-distance weights over the (up to) 3 nearest sparse points; a dense
    position bitwise-equal to a sparse position copies that sparse row exactly.
    """
    if sparse_pos.shape[1] < 1:
        raise InvalidArgumentError("sparse cloud is empty")
    k = min(3, sparse_pos.shape[1])
    idx = knn_indices(dense_pos, sparse_pos, k)
    nb_pos = gather_rows(sparse_pos, idx)  # (B,N,k,3)
    diff = nb_pos - dense_pos[:, :, None, :]
    d = torch.sqrt((diff * diff).sum(-1))  # (B,N,k)
    w = 1.0 / (d + eps)
    w = w / w.sum(dim=-1, keepdim=True)
    coincident = d[..., 0] == 0
    any_coincident = bool(coincident.any())
    outputs = []
    for values in value_list:
        vals = gather_rows(values, idx)  # (B,N,k,C)
        out = (vals * w[..., None].to(vals.dtype)).sum(dim=2)
        if any_coincident:
            out = torch.where(coincident[..., None], vals[:, :, 0, :], out)
        outputs.append(out)
    return outputs


def three_nn_batched(sparse_pos: Tensor, sparse_values: Tensor, dense_pos: Tensor,
                     eps: float = 1e-10) -> Tensor:
    """Single-array variant of three_nn_multi."""
    return three_nn_multi(sparse_pos, [sparse_values], dense_pos, eps)[0]


class SetConvLayer(nn.Module):
    """Neighborhood feature aggregation over (offset ⊕ feature) with max or learned weights."""

    def __init__(self, in_width: int, out_width: int, k: int, agg: str = "max"):
        super().__init__()
        self.k = k
        self.agg = agg
        self.mlp = PointwiseMLP([3 + in_width, out_width, out_width])
        self.score = PointwiseMLP([3 + in_width, out_width, 1], final_act=False) if agg == "weighted" else None

    def forward(self, center_pos: Tensor, source_pos: Tensor, source_feat: Tensor) -> Tensor:
        idx = knn_indices(center_pos, source_pos, min(self.k, source_pos.shape[1]))
        groups = grouped_offsets_features(center_pos, source_pos, source_feat, idx)
        scores = self.score(groups) if self.score is not None else None
        return aggregate(self.mlp(groups), self.agg, scores)


class SetUpconvLayer(nn.Module):
    """Learned upsampling of sparse features onto dense query positions."""

    def __init__(self, in_width: int, out_width: int, k: int = 8):
        super().__init__()
        self.k = k
        self.mlp = PointwiseMLP([3 + in_width, out_width, out_width])

    def forward(self, sparse_pos: Tensor, sparse_feat: Tensor, dense_pos: Tensor) -> Tensor:
        idx = knn_indices(dense_pos, sparse_pos, min(self.k, sparse_pos.shape[1]))
        groups = grouped_offsets_features(dense_pos, sparse_pos, sparse_feat, idx)
        return self.mlp(groups).max(dim=2).values


# ---------------------------------------------------------------------------
# single-cloud API


def farthest_point_sample(cloud: PointCloud, k: int, seed: int) -> Tensor:
    """k distinct indices by greedy FPS; the seed picks the first point."""
    n = cloud.n
    if k < 1 or k > n:
        raise InvalidArgumentError(f"k={k} out of range for cloud of size {n}")
    gen = torch.Generator().manual_seed(seed)
    start = torch.randint(n, (1,), generator=gen)
    return fps_indices(cloud.positions[None], k, start)[0]


def knn_group(queries: PointCloud, source: PointCloud, k: int) -> NeighborIndex:
    """For each query point the k nearest source points, ascending by distance."""
    if k > source.n:
        raise InvalidArgumentError(f"k={k} exceeds source size {source.n}")
    idx = knn_indices(queries.positions[None], source.positions[None], k)[0]
    return NeighborIndex(indices=idx, source_size=source.n)


def set_conv(centers: PointCloud, source: PointCloud, neighbors: NeighborIndex,
             mlp: Callable[[Tensor], Tensor], agg: str = "max",
             score_net: Optional[Callable[[Tensor], Tensor]] = None) -> PointCloud:
    """Aggregate MLP-transformed (offset concat feature) neighbor vectors per center."""
    if isinstance(mlp, PointwiseMLP) and mlp.in_width != 3 + source.feature_width:
        raise InvalidArgumentError(
            f"mlp input width {mlp.in_width} != 3 + source feature width {source.feature_width}"
        )
    groups = grouped_offsets_features(centers.positions[None], source.positions[None],
                                      source.features[None], neighbors.indices[None])
    h = mlp(groups)
    scores = score_net(groups) if score_net is not None else None
    feat = aggregate(h, agg, scores)[0]
    return PointCloud(positions=centers.positions, features=feat, level=centers.level)


def three_nn_interpolate(sparse: PointCloud, sparse_values: Tensor, dense_positions: Tensor) -> Tensor:
    """Upsample sparse per-point values to dense positions by inverse-distance weights."""
    if sparse_values.shape[0] != sparse.n:
        raise InvalidArgumentError("sparse_values rows must match sparse cloud size")
    return three_nn_batched(sparse.positions[None], sparse_values[None], dense_positions[None])[0]


def set_upconv(sparse: PointCloud, dense_positions: Tensor,
               mlp: Callable[[Tensor], Tensor], k: int = 8) -> Tensor:
    """Learned upsampling: max over MLP-transformed neighbor vectors around each dense point."""
    k = min(k, sparse.n)
    idx = knn_indices(dense_positions[None], sparse.positions[None], k)
    groups = grouped_offsets_features(dense_positions[None], sparse.positions[None],
                                      sparse.features[None], idx)
    return mlp(groups).max(dim=2).values[0]
