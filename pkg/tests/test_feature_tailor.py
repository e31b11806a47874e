import numpy as np
import pytest

from erft.backbone import build_backbone
from erft.errors import ConfigError, DimensionError
from erft.feature_tailor import (PARAM_NAMES, FeatureTailor, build_tailor, tailor_forward,
                                 tailored_forward)
from erft.losses import LossKernels, LossWeights, total_loss
from erft.raster_io import read_weights, write_weights
from erft.tensor import Tensor, backward
from oracles import conv2d_loop


def _z(rng, s=8, size=12):
    return Tensor(rng.normal(size=(1, s, size, size)))


def test_parameter_count():
    assert build_tailor(32).parameter_count() == 2 * (32 * 32 * 9 + 32)


def test_forward_matches_loop(rng):
    t = build_tailor(4, seed=3, dtype=np.float64)
    t.params["ft.conv1.b"].data[...] = rng.normal(size=(1, 4, 1, 1))
    z = Tensor(rng.normal(size=(1, 4, 6, 6)), dtype=np.float64)
    P = {n: p.data for n, p in t.params.items()}
    h = np.maximum(conv2d_loop(z.data, P["ft.conv1.w"], P["ft.conv1.b"], "reflect"), 0)
    ref = z.data + conv2d_loop(h, P["ft.conv2.w"], P["ft.conv2.b"], "reflect")
    np.testing.assert_allclose(tailor_forward(z, t).data, ref, atol=1e-12)


@pytest.mark.parametrize("mode", ["zero", "zero_first"])
def test_zero_modes_are_identity(rng, mode):
    z = _z(rng)
    np.testing.assert_array_equal(tailor_forward(z, build_tailor(8, mode)).data, z.data)


def test_zero_tailor_leaves_backbone_output_unchanged(rng):
    net = build_backbone(3, 8, 1).freeze()
    y, p = rng.uniform(size=(1, 3, 4, 4)), rng.uniform(size=(1, 1, 16, 16))
    np.testing.assert_array_equal(tailored_forward(net, build_tailor(8, "zero"), y, p).data,
                                  net.forward(y, p).data)


def test_he_init_scale():
    w = build_tailor(64, seed=0).params["ft.conv1.w"].data
    assert np.std(w) == pytest.approx(np.sqrt(2 / (64 * 9)), rel=0.05)
    np.testing.assert_array_equal(build_tailor(64, seed=0).params["ft.conv2.w"].data,
                                  build_tailor(64, seed=0).params["ft.conv2.w"].data)


def test_only_tailor_receives_gradients(rng):
    net = build_backbone(3, 8, 1).freeze()
    t = build_tailor(8, "he")
    y = Tensor(rng.uniform(0.2, 0.8, size=(1, 3, 8, 8)))
    p = Tensor(rng.uniform(0.2, 0.8, size=(1, 1, 32, 32)))
    x0 = net.forward(y, p)
    x = tailored_forward(net, t, y, p)
    grads = backward(total_loss(LossWeights(), x, x0, y, p, LossKernels.default()).tensor,
                     t.parameters() + net.parameters())
    assert all(np.any(g != 0) for g in grads[:4])
    assert all(g is None for g in grads[4:])


def test_zero_first_only_moves_the_last_bias(rng):
    # relu has zero slope at zero, so with a zero first layer only b2 sees a gradient
    net = build_backbone(3, 8, 1).freeze()
    t = build_tailor(8, "zero_first")
    y = Tensor(rng.uniform(0.2, 0.8, size=(1, 3, 8, 8)))
    p = Tensor(rng.uniform(0.2, 0.8, size=(1, 1, 32, 32)))
    x = tailored_forward(net, t, y, p)
    loss = total_loss(LossWeights(), x, net.forward(y, p), y, p, LossKernels.default())
    g1w, g1b, g2w, g2b = backward(loss.tensor, t.parameters())
    assert not np.any(g1w) and not np.any(g1b) and not np.any(g2w) and np.any(g2b)


def test_freeze_and_archive(tmp_path, rng):
    t = build_tailor(8, seed=2)
    assert t.trainable
    t.freeze()
    assert not t.trainable
    write_weights(t.to_archive(), tmp_path / "t")
    back = FeatureTailor.from_archive(read_weights(tmp_path / "t"))
    assert back.init_mode == "loaded" and not back.trainable
    z = _z(rng)
    np.testing.assert_array_equal(back.forward(z).data, t.forward(z).data)
    assert [n for n in back.params] == list(PARAM_NAMES)


def test_errors(rng):
    with pytest.raises(ConfigError):
        build_tailor(0)
    with pytest.raises(ConfigError):
        build_tailor(8, "xavier")
    with pytest.raises(DimensionError):
        tailor_forward(_z(rng, s=4), build_tailor(8))
    archive = build_tailor(8).to_archive()
    archive.params.pop("ft.conv2.b")
    with pytest.raises(DimensionError):
        FeatureTailor.from_archive(archive)


def test_every_coordinate_matters(rng):
    t = build_tailor(4, seed=1, dtype=np.float64)
    # inputs lie in (0, 1], so a bias above sum|w| keeps every relu open
    w1 = t.params["ft.conv1.w"].data
    t.params["ft.conv1.b"].data[...] = np.abs(w1).sum(axis=(1, 2, 3)).reshape(1, -1, 1, 1) + 0.1
    z = Tensor(rng.uniform(0.5, 1.0, size=(1, 4, 6, 6)), dtype=np.float64)
    base = tailor_forward(z, t).data.copy()
    for name in PARAM_NAMES:
        prm = t.params[name].data
        idx = tuple(int(rng.integers(s)) for s in prm.shape)
        prm[idx] += 1e-3
        assert not np.array_equal(tailor_forward(z, t).data, base), name
        prm[idx] -= 1e-3
