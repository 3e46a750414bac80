import numpy as np
import pytest

from rangeseg import tensor as T
from rangeseg.errors import ConfigError, ShapeError
from rangeseg.network import (
    FUSION_PRESETS, Conv, MrfRdb, NetworkConfig, Rcb, build_network, dump_activations,
    forward, parameter_count, preset_config,
)
from rangeseg.tensor import Tensor, grad_check

TINY = dict(encoder_channels=[4, 8, 16], decoder_channels=[8, 4], num_classes=5)


def tiny_inputs(n=2, h=8, w=16, seed=0):
    rng = np.random.default_rng(seed)
    return {
        "coord": rng.standard_normal((n, 3, h, w)).astype(np.float32),
        "depth": rng.standard_normal((n, 1, h, w)).astype(np.float32),
        "intensity": rng.standard_normal((n, 1, h, w)).astype(np.float32),
    }


# closed-form parameter counts, written from the block definitions
def mrf_params(cin, cout, kernels=(1, 3, 5, 7), layers=3):
    part, g = cout // len(kernels), cout // 2
    n = sum(cin * part * k * k + 2 * part for k in kernels)
    n += sum((cout + i * g) * g * 9 + 2 * g for i in range(layers))
    return n + (cout + layers * g) * cout + cout


def cba_params(cin, cout, k):
    return cin * cout * k * k + 2 * cout


def rcb_params(cin, cskip, cout, r=2):
    return cin * cout + cout + cskip * cout + cout + cout * cout * 9 + 2 * cout * r


def network_params(cfg: NetworkConfig):
    enc, dec = cfg.encoder_channels, cfg.decoder_channels
    ch = {"coord": 3, "depth": 1, "intensity": 1}
    if cfg.input_mode == "stacked":
        n = mrf_params(sum(ch[m] for m in cfg.modalities), enc[0])
        early = 1
    else:
        early_m = [m for m in cfg.modalities if cfg.stage(m) == "early"]
        n = sum(mrf_params(ch[m], enc[0]) for m in early_m)
        early = len(early_m)
    if early > 1:
        n += cba_params(early * enc[0], enc[0], 1)
    n += sum(mrf_params(enc[i - 1], enc[i]) for i in range(1, len(enc)))
    n += mrf_params(enc[-1], enc[-1])
    if cfg.input_mode == "fused":
        mid = [m for m in cfg.modalities if cfg.stage(m) == "mid"]
        for m in mid:
            n += mrf_params(ch[m], enc[0]) + sum(mrf_params(enc[i - 1], enc[i]) for i in range(1, len(enc)))
        if mid:
            n += cba_params((1 + len(mid)) * enc[-1], enc[-1], 1)
        deep = [m for m in cfg.modalities if cfg.stage(m) == "deep"]
        n += sum(mrf_params(ch[m], enc[0]) for m in deep)
        if deep:
            n += cba_params(dec[-1] + len(deep) * enc[0], dec[-1], 1)
    cin = enc[-1]
    for j, cout in enumerate(dec):
        n += rcb_params(cin, enc[len(enc) - 1 - j], cout)
        cin = cout
    return n + dec[-1] * cfg.num_classes * 9 + cfg.num_classes


# -- build / shapes ---------------------------------------------------------------

def test_default_config_output_shape():
    cfg = preset_config("early", encoder_channels=[4, 8, 16, 32, 64], decoder_channels=[32, 16, 8, 4])
    net = build_network(cfg, seed=0)
    logits = forward(net, tiny_inputs(n=1, h=64, w=512))
    assert logits.shape == (1, 20, 64, 512)


@pytest.mark.parametrize("preset", sorted(FUSION_PRESETS))
@pytest.mark.parametrize("mode", ["train", "eval"])
def test_presets_share_output_shape(preset, mode):
    net = build_network(preset_config(preset, **TINY), seed=1)
    out = forward(net, tiny_inputs(), mode=mode)
    assert out.shape == (2, 5, 8, 16)
    assert np.isfinite(out.data).all()


def test_stacked_first_conv_sees_five_channels():
    net = build_network(preset_config("early", input_mode="stacked", **TINY))
    branch = net.branches["stacked"]
    assert all(b.conv.weight.shape[1] == 5 for b in branch.front)
    assert forward(net, tiny_inputs()).shape == (2, 5, 8, 16)


def test_config_validation():
    with pytest.raises(ConfigError):
        preset_config("nope")
    with pytest.raises(ConfigError):
        NetworkConfig(modalities=("lidar",)).validate()
    with pytest.raises(ConfigError):
        preset_config("early", encoder_channels=[4, 8, 16], decoder_channels=[8])
    with pytest.raises(ConfigError):
        preset_config("early", encoder_channels=[6, 8, 16], decoder_channels=[8, 4])
    with pytest.raises(ConfigError):
        preset_config("mid1", modalities=("intensity",), **TINY)


def test_input_width_must_divide():
    net = build_network(preset_config("early", **TINY))
    with pytest.raises(ShapeError):
        forward(net, tiny_inputs(w=18))


def test_config_dict_round_trip():
    cfg = preset_config("deep2", **TINY)
    assert NetworkConfig.from_dict(cfg.to_dict()) == cfg


# -- parameter count ---------------------------------------------------------------

def test_param_count_single_conv():
    conv = Conv(np.random.default_rng(0), 3, 4, 1, bias=True)
    assert parameter_count(conv) == 16


@pytest.mark.parametrize("preset", sorted(FUSION_PRESETS))
def test_param_count_matches_closed_form(preset):
    cfg = preset_config(preset, **TINY)
    assert parameter_count(build_network(cfg)) == network_params(cfg)


def test_fused_vs_stacked_differ_by_branches_and_reduce():
    fused = build_network(preset_config("early", **TINY))
    stacked = build_network(preset_config("early", input_mode="stacked", **TINY))
    expect = (mrf_params(3, 4) + 2 * mrf_params(1, 4) + cba_params(12, 4, 1)) - mrf_params(5, 4)
    assert parameter_count(fused) - parameter_count(stacked) == expect


def test_param_count_batch_invariant_and_seeded():
    cfg = preset_config("early", **TINY)
    a, b = build_network(cfg, seed=3), build_network(cfg, seed=3)
    forward(a, tiny_inputs(n=1))
    forward(b, tiny_inputs(n=3))
    assert parameter_count(a) == parameter_count(b)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and np.array_equal(pa.data, pb.data)
    c = build_network(cfg, seed=4)
    assert not np.array_equal(a.classifier.weight.data, c.classifier.weight.data)


# -- forward semantics -----------------------------------------------------------------

def test_eval_deterministic_and_softmax_sums():
    net = build_network(preset_config("mid2", **TINY), seed=2)
    x = tiny_inputs()
    a, b = forward(net, x), forward(net, x)
    assert np.array_equal(a.data, b.data)
    p = T.softmax(a).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-5)
    assert np.array_equal(p.argmax(axis=1), a.data.argmax(axis=1))


def test_eval_does_not_touch_running_stats_train_does():
    net = build_network(preset_config("early", **TINY))
    before = [b.mean.copy() for _, b in net.named_buffers()]
    forward(net, tiny_inputs(), "eval")
    assert all(np.array_equal(x, b.mean) for x, (_, b) in zip(before, net.named_buffers()))
    forward(net, tiny_inputs(), "train")
    assert any(not np.array_equal(x, b.mean) for x, (_, b) in zip(before, net.named_buffers()))


def test_eval_records_no_lineage():
    net = build_network(preset_config("early", **TINY))
    out = forward(net, tiny_inputs())
    assert not out.requires_grad


def test_mrf_residual_identity_when_fuse_is_zero():
    rng = np.random.default_rng(0)
    blk = MrfRdb(rng, 2, 8, dtype=np.float64)
    blk.fuse.weight.data[...] = 0
    blk.fuse.bias.data[...] = 0
    x = Tensor(rng.standard_normal((2, 2, 4, 6)))
    with T.no_grad():
        head = T.concat([b(x, "eval") for b in blk.front])
        out = blk(x, "eval")
    assert out.shape == (2, 8, 4, 6)
    assert np.array_equal(out.data, head.data)


def test_every_parameter_receives_gradient():
    for preset in ("early", "mid3", "deep1"):
        net = build_network(preset_config(preset, **TINY), seed=5)
        logits = net(tiny_inputs(), "train")
        loss = T.tsum(T.mul(logits, Tensor(np.random.default_rng(1).standard_normal(logits.shape)
                                           .astype(np.float32))))
        loss.backward()
        for name, p in net.named_parameters():
            assert p.grad is not None and np.abs(p.grad).sum() > 0, f"{preset}: {name}"


@pytest.mark.parametrize("seed", range(3))
def test_block_grad_checks(seed):
    rng = np.random.default_rng(seed)
    mrf = MrfRdb(rng, 1, 4, kernels=(1, 3), dense_layers=2, dtype=np.float64)
    x = Tensor(rng.standard_normal((2, 1, 3, 4)))
    probe = rng.standard_normal((2, 4, 3, 4))
    params = [mrf.front[1].conv.weight, mrf.dense[1].bn.gamma, mrf.fuse.weight]
    f = lambda x, *_: T.tsum(T.mul(mrf(x, "train"), Tensor(probe)))
    assert grad_check(f, [x, *params], eps=1e-5) < 1e-5

    rcb = Rcb(rng, 4, 2, 3, recurrence=2, dtype=np.float64)
    lo = Tensor(rng.standard_normal((2, 4, 3, 2)))
    skip = Tensor(rng.standard_normal((2, 2, 3, 4)))
    probe = rng.standard_normal((2, 3, 3, 4))
    g = lambda lo, skip, *_: T.tsum(T.mul(rcb(lo, skip, "train"), Tensor(probe)))
    assert grad_check(g, [lo, skip, rcb.rec.weight, rcb.up_proj.bias], eps=1e-5) < 1e-5


# -- activation dumps -------------------------------------------------------------------

def test_dump_activations(tmp_path):
    net = build_network(preset_config("mid1", **TINY))
    x = tiny_inputs()
    names = ["branch.coord", "branch.depth", "branch.intensity", "enc2", "dec2", "logits"]
    path = tmp_path / "acts.npz"
    acts = dump_activations(net, x, names, path)
    assert acts["branch.coord"].shape == (2, 4, 8, 16)
    assert acts["enc2"].shape == (2, 16, 8, 8)
    assert acts["dec2"].shape == (2, 4, 8, 16)
    assert np.array_equal(acts["logits"], forward(net, x).data)
    saved = np.load(path)
    assert sorted(saved.files) == sorted(names)
    again = dump_activations(net, x, names)
    assert all(np.array_equal(acts[k], again[k]) for k in names)
    with pytest.raises(KeyError):
        dump_activations(net, x, ["nope"])


@pytest.mark.parametrize("seed", range(5))
def test_full_network_grad_train_mode(seed):
    from rangeseg.losses import ClassWeights, total_loss

    rng = np.random.default_rng(seed)
    cfg = preset_config("early", encoder_channels=[4, 8], decoder_channels=[4], num_classes=4)
    net = build_network(cfg, seed=seed, dtype=np.float64)
    x = {m: Tensor(rng.standard_normal((2, c, 2, 4))) for m, c in (("coord", 3), ("depth", 1), ("intensity", 1))}
    labels = rng.integers(0, 4, (2, 2, 4))
    w = ClassWeights(np.r_[0, rng.uniform(0.5, 2, 3)], {0})
    names = list(x)

    def f(*ts):
        return total_loss(T.softmax(net(dict(zip(names, ts)), "train")), labels, w)

    # batch statistics make some gradients exactly zero (per-channel shifts feeding a
    # batch-normalized 1x1 conv), so tiny absolute differences count as agreement
    params = [p for _, p in net.named_parameters()]
    err = grad_check(f, [x[m] for m in names] + params, eps=(1e-5, 1e-6, 1e-7),
                     samples=2, seed=seed, atol=1e-9)
    assert err < 1e-5
