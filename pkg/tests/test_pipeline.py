import json

import numpy as np
import pytest
import torch
import torch.nn as nn

from conftest import mini_config, tiny_samples
from sfdiff.data import GeneratorSpec, gen_synthetic
from sfdiff.errors import InvalidArgumentError
from sfdiff.geometry import FlowField, PointCloud, three_nn_batched
from sfdiff.pipeline import (LevelOutput, PipelineConfig, SceneFlowNet, assemble_condition,
                             config_from_dict, deep_merge, evaluate, fit, load_model,
                             save_model, total_loss)


class ZeroDenoiser(nn.Module):
    def forward(self, s_t, u_t, t, cond, hidden=None):
        return torch.zeros_like(s_t), torch.zeros_like(u_t), None


def sample_tensors(sample):
    return (torch.as_tensor(sample.pc1)[None], torch.as_tensor(sample.pc2)[None],
            torch.as_tensor(sample.flow)[None])


# ---------------------------------------------------------------------------
# condition assembly


def test_assemble_condition_widths():
    p = torch.randn(9, 32)
    cv = torch.randn(9, 64)
    e = torch.randn(9, 32)
    bundle = assemble_condition(p, cv, e)
    assert bundle.values.shape == (9, 128)
    assert bundle.widths == (32, 64, 32)
    sp, scv, se = bundle.split()
    assert torch.equal(sp, p) and torch.equal(scv, cv) and torch.equal(se, e)


def test_assemble_condition_ablation_zeroes_segment():
    from sfdiff.pipeline import AblationConfig
    p = torch.randn(5, 4)
    cv = torch.randn(5, 6)
    e = torch.randn(5, 3)
    bundle = assemble_condition(p, cv, e, AblationConfig(cond_cost_volume=False))
    sp, scv, se = bundle.split()
    assert torch.equal(sp, p) and torch.equal(se, e)
    assert torch.count_nonzero(scv) == 0
    assert bundle.values.shape == (5, 13)


def test_assemble_condition_row_mismatch():
    with pytest.raises(InvalidArgumentError):
        assemble_condition(torch.randn(4, 2), torch.randn(5, 2), torch.randn(4, 2))


# ---------------------------------------------------------------------------
# configuration


def test_config_defaults_roundtrip_json():
    cfg = PipelineConfig()
    blob = json.dumps(cfg.model_dump())
    again = PipelineConfig.model_validate(json.loads(blob))
    assert again == cfg
    assert cfg.level_sizes == [1024, 256, 64, 16]
    assert cfg.refine_layers == 3


def test_config_validation_errors():
    for overrides in (
        {"refine_layers": 2},
        {"level_weights": [0.1, 0.2]},
        {"level_sizes": [64, 128, 32, 16]},
        {"lambda_un": -1.0},
        {"knn_corr": 100, "level_sizes": [64, 32, 16, 8]},
    ):
        with pytest.raises(Exception):
            config_from_dict(overrides)


def test_config_partial_override_merging():
    cfg = config_from_dict({"optimizer": {"lr": 2e-3}, "widths": {"flow_embed": 16}})
    assert cfg.optimizer.lr == 2e-3
    assert cfg.optimizer.beta1 == 0.9
    assert cfg.widths.flow_embed == 16
    assert cfg.widths.cv_state == 64


# ---------------------------------------------------------------------------
# forward contracts


def test_forward_shapes_and_level_order():
    cfg = mini_config()
    torch.manual_seed(0)
    net = SceneFlowNet(cfg)
    s = tiny_samples(1, n_points=64)[0]
    pc1 = PointCloud.from_positions(torch.as_tensor(s.pc1))
    pc2 = PointCloud.from_positions(torch.as_tensor(s.pc2))
    outputs = net.forward(pc1, pc2, "infer", seed=3)
    assert len(outputs) == cfg.refine_layers + 1
    assert [o.level for o in outputs] == [3, 2, 1, 0]
    for o in outputs:
        n = cfg.level_sizes[o.level]
        assert o.sf.shape == (n, 3) and o.u.shape == (n, 1)


def test_forward_deterministic_given_seed():
    cfg = mini_config()
    torch.manual_seed(1)
    net = SceneFlowNet(cfg)
    with torch.no_grad():
        for p in net.parameters():
            p.add_(torch.randn(p.shape) * 0.1)  # non-degenerate outputs
    s = tiny_samples(1, n_points=64, seed=5)[0]
    pc1 = PointCloud.from_positions(torch.as_tensor(s.pc1))
    pc2 = PointCloud.from_positions(torch.as_tensor(s.pc2))
    a = net.forward(pc1, pc2, seed=11)
    b = net.forward(pc1, pc2, seed=11)
    for x, y in zip(a, b):
        assert torch.equal(x.sf, y.sf) and torch.equal(x.u, y.u)
    c = net.forward(pc1, pc2, seed=12)
    assert not torch.equal(a[-1].sf, c[-1].sf)


def test_forward_rejects_small_cloud():
    cfg = mini_config()
    net = SceneFlowNet(cfg)
    pos = torch.rand(8, 3)  # below level-1 size 32
    pc = PointCloud.from_positions(pos)
    with pytest.raises(InvalidArgumentError):
        net.forward(pc, pc)


def test_forward_bad_mode_and_missing_gt():
    cfg = mini_config()
    net = SceneFlowNet(cfg)
    s = tiny_samples(1, n_points=64)[0]
    pc1 = PointCloud.from_positions(torch.as_tensor(s.pc1))
    pc2 = PointCloud.from_positions(torch.as_tensor(s.pc2))
    with pytest.raises(InvalidArgumentError):
        net.forward(pc1, pc2, "predict")
    with pytest.raises(InvalidArgumentError):
        net.forward(pc1, pc2, "train")


def test_zero_residual_oracle_reduces_to_upsampling():
    cfg = mini_config()
    torch.manual_seed(2)
    net = SceneFlowNet(cfg)
    for layer in net.refiners:
        layer.denoiser = ZeroDenoiser()
    s = tiny_samples(1, n_points=64, seed=7)[0]
    pos1, pos2, _ = sample_tensors(s)
    gen = torch.Generator().manual_seed(4)
    outputs = net.forward_batch(pos1, pos2, "infer", gen=gen)

    # replay the pyramid with the same generator stream to upsample manually
    gen2 = torch.Generator().manual_seed(4)
    pyr1 = net.extract_pyramid(pos1, gen2)
    net.extract_pyramid(pos2, gen2)
    sf = outputs[0].sf
    for fine in range(net.n_levels - 2, -1, -1):
        sf = three_nn_batched(pyr1[fine + 1].pos, sf, pyr1[fine].pos)
        out = [o for o in outputs if o.level == fine][0]
        assert torch.allclose(out.sf, sf, atol=1e-6)
        assert torch.count_nonzero(out.s0_hat) == 0


def test_constant_coarse_flow_composition():
    cfg = mini_config()
    torch.manual_seed(3)
    net = SceneFlowNet(cfg)
    s = tiny_samples(1, n_points=64, seed=9)[0]
    pos1, pos2, _ = sample_tensors(s)
    gen = torch.Generator().manual_seed(5)
    pyr1 = net.extract_pyramid(pos1, gen)
    pyr2 = net.extract_pyramid(pos2, gen)
    c = torch.tensor([0.04, -0.02, 0.03])
    sf_sparse = c.expand(1, pyr1[1].n, 3).clone()
    u_sparse = torch.zeros(1, pyr1[1].n, 1)
    state = torch.zeros(1, pyr1[1].n, cfg.widths.cv_state)
    out, _ = net._refine_once(0, sf_sparse, u_sparse, state, pyr1, pyr2, "infer",
                              torch.Generator().manual_seed(6), None, None, None)
    assert torch.allclose(out.sf_dense, c.expand_as(out.sf_dense), atol=1e-6)
    assert torch.allclose(out.sf - out.s0_hat, out.sf_dense, atol=1e-6)


def test_refinement_disabled_matches_zero_oracle():
    base = mini_config()
    torch.manual_seed(4)
    net = SceneFlowNet(base)
    for layer in net.refiners:
        layer.denoiser = ZeroDenoiser()
    s = tiny_samples(1, n_points=64, seed=11)[0]
    pos1, pos2, _ = sample_tensors(s)
    with_oracle = net.forward_batch(pos1, pos2, gen=torch.Generator().manual_seed(8))

    ablated_cfg = mini_config(ablation={"refinement": False})
    torch.manual_seed(4)
    net2 = SceneFlowNet(ablated_cfg)
    disabled = net2.forward_batch(pos1, pos2, gen=torch.Generator().manual_seed(8))
    for a, b in zip(with_oracle, disabled):
        assert torch.allclose(a.sf, b.sf, atol=1e-6)


# ---------------------------------------------------------------------------
# loss


def perfect_outputs(cfg, n_levels=4):
    outputs, gts, ugts = [], [], []
    gen = torch.Generator().manual_seed(9)
    for level in range(n_levels - 1, -1, -1):
        n = cfg.level_sizes[level]
        gt = torch.randn(1, n, 3, generator=gen)
        if level == n_levels - 1:
            out = LevelOutput(level=level, sf=gt.clone(), u=torch.zeros(1, n, 1))
        else:
            dense = torch.randn(1, n, 3, generator=gen)
            out = LevelOutput(level=level, sf=gt.clone(), u=torch.zeros(1, n, 1),
                              s0_hat=gt - dense, u0_hat=torch.zeros(1, n, 1),
                              sf_dense=dense, u_dense=torch.zeros(1, n, 1))
        outputs.append(out)
        gts.append(gt)
        ugts.append(torch.zeros(1, n, 1))
    return outputs, gts, ugts


def test_total_loss_zero_at_perfect_prediction():
    cfg = mini_config()
    outputs, gts, ugts = perfect_outputs(cfg)
    assert float(total_loss(outputs, gts, ugts, cfg)) == 0.0


def test_total_loss_flow_only_matches_loop_oracle():
    cfg = mini_config(lambda_res=0.0, lambda_un=0.0)
    outputs, gts, ugts = perfect_outputs(cfg)
    gen = torch.Generator().manual_seed(10)
    for out in outputs:
        out.sf = out.sf + torch.randn(out.sf.shape, generator=gen) * 0.1
    loss = float(total_loss(outputs, gts, ugts, cfg))
    expect = 0.0
    for out, gt in zip(outputs, gts):
        alpha = cfg.level_weights[out.level]
        norms = [float(torch.linalg.vector_norm(out.sf[0, i] - gt[0, i]))
                 for i in range(gt.shape[1])]
        expect += alpha * sum(norms) / len(norms)
    assert abs(loss - expect) < 1e-6


def test_total_loss_linear_in_level_weights():
    cfg = mini_config()
    outputs, gts, ugts = perfect_outputs(cfg)
    gen = torch.Generator().manual_seed(11)
    for out in outputs:
        out.sf = out.sf + torch.randn(out.sf.shape, generator=gen) * 0.05
    doubled = mini_config(level_weights=[w * 2 for w in cfg.level_weights])
    a = float(total_loss(outputs, gts, ugts, cfg))
    b = float(total_loss(outputs, gts, ugts, doubled))
    assert abs(b - 2 * a) < 1e-9


def test_total_loss_level_count_mismatch():
    cfg = mini_config()
    outputs, gts, ugts = perfect_outputs(cfg)
    with pytest.raises(InvalidArgumentError):
        total_loss(outputs[:-1], gts[:-1], ugts[:-1], cfg)


# ---------------------------------------------------------------------------
# full-model gradient check (miniature, float64)


def test_total_loss_gradient_matches_finite_differences():
    overrides = {
        "level_sizes": [8, 8, 8, 8],
        "knn_conv": 4,
        "knn_corr": 4,
        "knn_upconv": 4,
        "widths": {
            "features": [3, 3, 3, 3],
            "cv_state": 3,
            "correlation": 3,
            "correlation_hidden": [3, 3, 3, 3],
            "flow_embed": 3,
            "denoiser_hidden": 5,
            "time_embed": 4,
            "init_hidden": 4,
        },
        "optimizer": {"flow_noise_aug": 0.02},
    }
    cfg = config_from_dict(overrides)
    torch.manual_seed(12)
    net = SceneFlowNet(cfg).double()
    with torch.no_grad():
        for p in net.parameters():
            p.add_(torch.randn(p.shape, dtype=torch.float64) * 0.2)
    n_params = sum(p.numel() for p in net.parameters())
    assert n_params <= 2000, n_params

    gen_data = torch.Generator().manual_seed(13)
    pos1 = torch.rand(1, 8, 3, generator=gen_data, dtype=torch.float64)
    pos2 = pos1 + 0.05 * torch.randn(1, 8, 3, generator=gen_data, dtype=torch.float64)
    sf_gt = 0.1 * torch.randn(1, 8, 3, generator=gen_data, dtype=torch.float64)

    def loss_value():
        outputs = net.forward_batch(pos1, pos2, "train", sf_gt=sf_gt,
                                    thresholds=(0.5, 0.5),
                                    gen=torch.Generator().manual_seed(14))
        return total_loss(outputs, [o.sf_gt for o in outputs],
                          [o.u_gt for o in outputs], cfg)

    loss = loss_value()
    loss.backward()

    rng = np.random.default_rng(15)
    params = list(net.parameters())
    checked = 0
    failures = []
    while checked < 50:
        p = params[int(rng.integers(len(params)))]
        j = int(rng.integers(p.numel()))
        g_auto = float(p.grad.view(-1)[j]) if p.grad is not None else 0.0
        h = 1e-6
        with torch.no_grad():
            flat = p.view(-1)
            flat[j] += h
            up = float(loss_value())
            flat[j] -= 2 * h
            down = float(loss_value())
            flat[j] += h
        g_fd = (up - down) / (2 * h)
        # below ~1e-7 the central difference itself has worse than 1e-3 relative
        # resolution (roundoff eps*|loss|/h), so such draws are not comparable
        if max(abs(g_fd), abs(g_auto)) < 1e-7:
            continue
        rel = abs(g_fd - g_auto) / max(abs(g_fd), abs(g_auto))
        if rel >= 1e-3:
            failures.append((rel, g_fd, g_auto))
        checked += 1
    assert not failures, failures[:5]


# ---------------------------------------------------------------------------
# training loop


def test_fit_requires_data():
    with pytest.raises(InvalidArgumentError):
        fit([], mini_config(), seed=0)


def test_fit_overfits_two_samples():
    cfg = mini_config(optimizer={"epochs": 200, "batch_size": 2, "lr": 5e-3,
                                 "flow_noise_aug": 0.0, "lr_decay_every": 40})
    samples = tiny_samples(2, n_points=64, seed=20, jitter=0.0)
    result = fit(samples, cfg, seed=1, verbose=False)
    first = result.history[0]["loss_total"]
    # mean over the last epochs smooths the binary uncertainty-target flips
    tail = float(np.mean([r["loss_total"] for r in result.history[-5:]]))
    assert tail < 0.1 * first, (first, tail)


def test_fit_learning_rate_schedule():
    cfg = mini_config(optimizer={"epochs": 26, "batch_size": 1})
    cfg = config_from_dict(deep_merge(cfg.model_dump(), {"optimizer": {"lr": 1e-4}}))
    samples = tiny_samples(1, n_points=64, seed=30)
    result = fit(samples, cfg, seed=2, verbose=False)
    assert abs(result.history[25]["lr"] - 1e-4 * 0.8 ** 2) < 1e-12
    assert abs(result.history[9]["lr"] - 1e-4) < 1e-12
    assert abs(result.history[10]["lr"] - 0.8e-4) < 1e-12


def test_fit_deterministic_loss_curves(tmp_path):
    cfg = mini_config(optimizer={"epochs": 3, "batch_size": 2})
    samples = tiny_samples(4, n_points=64, seed=40)
    val = tiny_samples(2, n_points=64, seed=50)
    a = fit(samples, cfg, seed=3, val_samples=val, out_dir=tmp_path / "a", verbose=False)
    b = fit(samples, cfg, seed=3, val_samples=val, out_dir=tmp_path / "b", verbose=False)
    assert a.history == b.history
    assert (tmp_path / "a" / "history.jsonl").read_bytes() == \
           (tmp_path / "b" / "history.jsonl").read_bytes()


def test_fit_writes_history_and_checkpoints(tmp_path):
    cfg = mini_config()
    samples = tiny_samples(3, n_points=64, seed=60)
    val = tiny_samples(1, n_points=64, seed=70)
    result = fit(samples, cfg, seed=4, val_samples=val, out_dir=tmp_path, verbose=False)
    lines = (tmp_path / "history.jsonl").read_text().strip().splitlines()
    assert len(lines) == 3
    record = json.loads(lines[-1])
    assert set(record) == {"epoch", "lr", "E1", "E2", "loss_total", "loss_sf", "loss_res",
                           "loss_un", "val_epe3d", "val_acc3ds", "val_acc3dr", "val_outliers"}
    assert (tmp_path / "last.ckpt").exists() and (tmp_path / "best.ckpt").exists()
    assert result.best_val_epe3d is not None


def test_checkpoint_roundtrip_preserves_outputs(tmp_path):
    cfg = mini_config()
    torch.manual_seed(5)
    net = SceneFlowNet(cfg)
    save_model(net, tmp_path / "m.ckpt")
    again = load_model(tmp_path / "m.ckpt")
    assert again.cfg == cfg
    s = tiny_samples(1, n_points=64, seed=80)[0]
    pos1, pos2, _ = sample_tensors(s)
    a = net.forward_batch(pos1, pos2, gen=torch.Generator().manual_seed(1))
    b = again.forward_batch(pos1, pos2, gen=torch.Generator().manual_seed(1))
    assert torch.equal(a[-1].sf, b[-1].sf)


def test_evaluate_contract():
    cfg = mini_config()
    torch.manual_seed(6)
    net = SceneFlowNet(cfg)
    samples = tiny_samples(3, n_points=64, seed=90)
    report, per_sample, u, epe = evaluate(net, samples, seed=0, batch_size=2)
    assert len(per_sample) == 3
    assert report.n_points_evaluated == 3 * 64
    assert u.shape == epe.shape == (3 * 64,)


def test_uncertainty_ablation_zeroes_loss_term():
    cfg = mini_config(ablation={"uncertainty": False})
    samples = tiny_samples(2, n_points=64, seed=95)
    result = fit(samples, cfg, seed=7, verbose=False)
    assert all(rec["loss_un"] == 0.0 for rec in result.history)


@pytest.mark.parametrize("variant", ["mlp", "transformer"])
def test_denoiser_variants_forward(variant):
    cfg = mini_config(denoiser=variant)
    torch.manual_seed(8)
    net = SceneFlowNet(cfg)
    s = tiny_samples(1, n_points=64, seed=97)[0]
    pos1, pos2, _ = sample_tensors(s)
    outputs = net.forward_batch(pos1, pos2, gen=torch.Generator().manual_seed(2))
    assert outputs[-1].sf.shape == (1, 64, 3)


# ---------------------------------------------------------------------------
# external refinement


def test_refine_external_row_contract_and_level_matching():
    cfg = mini_config()
    torch.manual_seed(9)
    net = SceneFlowNet(cfg)
    s = tiny_samples(1, n_points=64, seed=98)[0]
    pc1 = PointCloud.from_positions(torch.as_tensor(s.pc1))
    pc2 = PointCloud.from_positions(torch.as_tensor(s.pc2))
    for n in (64, 32, 16, 8):
        sizes = {64: 64, 32: 32, 16: 16, 8: 8}
        flow = FlowField(vectors=torch.zeros(n, 3))
        out = net.refine_external(flow, pc1, pc2, seed=1)
        assert out.vectors.shape == (64, 3)
        assert out.uncertainty.shape == (64, 1)
    with pytest.raises(InvalidArgumentError):
        net.refine_external(FlowField(vectors=torch.zeros(20, 3)), pc1, pc2)


def test_refine_external_zero_oracle_is_pure_upsampling():
    cfg = mini_config()
    torch.manual_seed(10)
    net = SceneFlowNet(cfg)
    for layer in net.refiners:
        layer.denoiser = ZeroDenoiser()
    s = tiny_samples(1, n_points=64, seed=99)[0]
    pc1 = PointCloud.from_positions(torch.as_tensor(s.pc1))
    pc2 = PointCloud.from_positions(torch.as_tensor(s.pc2))
    gen = torch.Generator().manual_seed(21)
    pyr1 = net.extract_pyramid(pc1.positions[None], gen)
    flow_sparse = torch.as_tensor(s.flow)[pyr1[2].idx0[0]]  # level-2 resolution input

    refined = net.refine_external(FlowField(vectors=flow_sparse), pc1, pc2, seed=21)
    sf = flow_sparse[None]
    for fine in (1, 0):
        sf = three_nn_batched(pyr1[fine + 1].pos, sf, pyr1[fine].pos)
    assert torch.allclose(refined.vectors, sf[0], atol=1e-6)