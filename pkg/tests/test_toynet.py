import numpy as np
import pytest

from freqseg.dct import ConfigurationError
from freqseg.modules import LossConfig, seg_losses
from freqseg.synth import render_scene, stack, synth_dataset, to_gray
from freqseg.tensor import Param, Tensor, grad_check, weighted_sum
from freqseg.toynet import ToyNet, ToyNetConfig, conv3x3, parse_variant, predict

TINY = ToyNetConfig(input_size=16, widths=(4, 4, 8), ppm_bins=(1, 2), context_width=8,
                    fusion_width=8, dct_size=2, classes=3)


def _conv_oracle(x, w, b, stride):
    B, C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    Ho, Wo = (H - 1) // stride + 1, (W - 1) // stride + 1
    out = np.zeros((B, w.shape[0], Ho, Wo))
    for i in range(Ho):
        for j in range(Wo):
            patch = xp[:, :, i * stride:i * stride + 3, j * stride:j * stride + 3]
            out[:, :, i, j] = np.einsum("bchw,ochw->bo", patch, w) + b
    return out


@pytest.mark.parametrize("stride, size", [(1, 6), (2, 6), (2, 7)])
def test_conv3x3_matches_loop(rng, stride, size):
    x, w, b = rng.normal(size=(2, 3, size, size)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    out = conv3x3(Tensor(x), Tensor(w), Tensor(b), stride).data
    assert np.abs(out - _conv_oracle(x, w, b, stride)).max() < 1e-12


@pytest.mark.parametrize("stride", [1, 2])
def test_conv3x3_grad_check(rng, stride):
    x, w, b = Param(rng.normal(size=(2, 3, 5, 5))), Param(rng.normal(size=(4, 3, 3, 3))), Param(rng.normal(size=4))
    proj = rng.normal(size=(2, 4, 5 if stride == 1 else 3, 5 if stride == 1 else 3))
    assert grad_check(lambda: weighted_sum(conv3x3(x, w, b, stride), proj), [x, w, b]) < 1e-5


def test_conv3x3_channel_mismatch():
    with pytest.raises(ConfigurationError):
        conv3x3(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((4, 3, 3, 3))), Tensor(np.zeros(4)))


@pytest.mark.parametrize("variant", ["baseline", "fdl", "static_all", "top_k:2"])
def test_forward_shapes(variant):
    net = ToyNet.create(TINY.with_variant(variant), seed=0)
    images, _ = stack(synth_dataset(2, 0, "night", 16, 3))
    logits, w = net.forward(images, return_weights=True)
    assert logits.shape == (2, 3, 16, 16)
    assert (w is not None) == (variant == "fdl")
    assert net.forward(images[0]).shape == (3, 16, 16)
    assert predict(net, images).shape == (2, 16, 16)


def test_alpha_zero_equals_baseline_bitwise():
    images, _ = stack(synth_dataset(3, 5, "night", 16, 3))
    base = ToyNet.create(TINY.with_variant("baseline"), seed=9)
    for variant in ("fdl", "static_all", "top_k:1"):
        net = ToyNet.create(TINY.with_variant(variant), seed=9)
        assert net.params["sff.alpha"].data[0] == 0.0
        assert np.array_equal(net.forward(images).data, base.forward(images).data)


def test_shared_parameters_across_variants():
    a = ToyNet.create(TINY.with_variant("baseline"), seed=3)
    b = ToyNet.create(TINY.with_variant("fdl"), seed=3)
    assert set(a.params) < set(b.params)
    for name in a.params:
        assert np.array_equal(a.params[name].data, b.params[name].data)
    assert {"sff.proj_f", "sff.alpha", "lfe.lfcc_weight", "lfe.gamma", "lfe.beta"} == set(b.params) - set(a.params)


def test_zero_head_gives_uniform_softmax():
    net = ToyNet.create(TINY, seed=0)
    net.params["head.weight"].data[:] = 0.0
    images, _ = stack(synth_dataset(1, 0, "day", 16, 3))
    logits = net.forward(images).data
    assert np.ptp(logits) == 0.0


@pytest.mark.parametrize("variant", ["baseline", "static_all"])
def test_full_net_grad_check(variant):
    # a smaller input keeps the finite-difference loop short
    net = ToyNet.create(ToyNetConfig(**{**TINY.__dict__, "input_size": 8, "variant": variant}), seed=1)
    rng = np.random.default_rng(1)
    if "sff.alpha" in net.params:
        net.params["sff.alpha"].data[:] = 0.8
    for name, p in net.params.items():
        if name.endswith("bias"):
            p.data[:] = rng.normal(0, 0.1, p.shape)
    scenes = [render_scene(1, i, "night", 8, 3) for i in range(2)]
    images, labels = stack(scenes)
    err = grad_check(lambda: seg_losses(net.forward(Tensor(images)), labels, LossConfig())[0], net.parameters())
    assert err < 1e-5


@pytest.mark.parametrize("kwargs", [
    dict(widths=(8, 8)),
    dict(input_size=20),
    dict(widths=(4, 4, 6), dct_size=2),
    dict(variant="nope"),
    dict(variant="top_k:zz"),
])
def test_config_validation(kwargs):
    with pytest.raises(ConfigurationError):
        ToyNetConfig(**{**TINY.__dict__, **kwargs})


def test_baseline_ignores_divisibility():
    ToyNetConfig(**{**TINY.__dict__, "widths": (4, 4, 6), "variant": "baseline"})


def test_config_json_round_trip():
    assert ToyNetConfig.from_json(TINY.to_json()) == TINY


def test_parse_variant():
    assert parse_variant("top_k:4") == "top_k:4"
    with pytest.raises(ConfigurationError):
        parse_variant("lfe")


def test_wrong_image_size():
    net = ToyNet.create(TINY, seed=0)
    with pytest.raises(ConfigurationError):
        net.forward(np.zeros((1, 3, 24, 24)))


# ---------------------------------------------------------------- synthetic scenes

def test_day_night_share_labels():
    for i in range(5):
        day, night = render_scene(4, i, "day"), render_scene(4, i, "night")
        assert np.array_equal(day.labels, night.labels)
        assert not np.array_equal(day.image, night.image)


def test_day_is_unclipped():
    for i in range(20):
        img = render_scene(0, i, "day").image
        assert 0.0 < img.min() and img.max() < 1.0


def test_scene_is_deterministic():
    a, b = render_scene(7, 3, "night"), render_scene(7, 3, "night")
    assert np.array_equal(a.image, b.image) and np.array_equal(a.labels, b.labels)


def test_scene_labels_and_gain():
    sc = render_scene(2, 0, "night", 32, 5)
    assert sc.labels.min() >= 0 and sc.labels.max() < 5
    assert sc.gain.min() >= 0.1 and sc.gain.max() <= 2.5
    assert to_gray(sc).shape == (32, 32)


def test_bad_style():
    with pytest.raises(ValueError):
        render_scene(0, 0, "dusk")
