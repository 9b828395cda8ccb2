import numpy as np
import pytest

from hetcd import losses as L
from hetcd import nn
from hetcd import translators as T

from oracles import numeric_grad, rel_err


def _small_cfg(**kw):
    base = dict(epochs=2, batches_per_epoch=1, batch_size=2, patch_hw=12, lr=1e-3, milestones=(1,))
    base.update(kw)
    return T.TrainConfig(**base)


def _data(h=20, w=20, cx=2, cy=3, seed=0):
    rng = np.random.default_rng(seed)
    return (rng.uniform(-1, 1, (h, w, cx)).astype(np.float32),
            rng.uniform(-1, 1, (h, w, cy)).astype(np.float32),
            rng.random((h, w)))


def test_train_config_defaults_and_validation():
    c = T.TrainConfig()
    assert (c.epochs, c.batches_per_epoch, c.batch_size, c.patch_hw, c.lr, c.milestones) == \
        (240, 10, 10, 100, 1e-5, (80, 160))
    with pytest.raises(ValueError):
        T.TrainConfig(epochs=10, milestones=(11,))
    with pytest.raises(ValueError):
        T.TrainConfig(milestones=(0,))


def test_xnet_architecture():
    m = T.XNet(3, 5)
    assert [l.c_out for l in m.F.param_layers()] == [100, 50, 20, 5]
    assert [l.c_out for l in m.G.param_layers()] == [100, 50, 20, 3]
    assert all(l.activation == "leaky_relu" for l in m.F.param_layers()[:-1])
    assert m.F.param_layers()[-1].activation == "tanh"


def test_parameter_count_xnet_texas_channels():
    # 7-band and 10-band inputs, as in the dataset the reported sizes refer to
    assert abs(T.XNet(7, 10).n_params() / 1.3e5 - 1) <= 0.10
    assert abs(T.ACENet(7, 10).n_params() / 2.8e5 - 1) <= 0.10


def test_parameter_count_three_channels_exact():
    per_net = (27 * 100 + 100) + (900 * 50 + 50) + (450 * 20 + 20) + (180 * 3 + 3)
    assert T.XNet(3, 3).n_params() == 2 * per_net == 114_826
    acenet = T.ACENet(3, 3).n_params()
    assert abs(acenet / 2.8e5 - 1) <= 0.10


@pytest.mark.xfail(strict=True, reason="3-channel X-Net has 114,826 weights, 11.7% under 1.3e5")
def test_parameter_count_xnet_three_channels_within_ten_percent():
    assert abs(T.XNet(3, 3).n_params() / 1.3e5 - 1) <= 0.10


def test_acenet_architecture_and_code():
    m = T.ACENet(3, 4)
    assert [l.c_out for l in m.E_X.param_layers()] == [100, 50, 20]
    assert [l.c_out for l in m.D_Y.param_layers()] == [20, 50, 100, 4]
    assert [l.c_out for l in m.disc.param_layers() if isinstance(l, nn.Conv3x3)] == [64, 32, 16]
    x, y, _ = _data(9, 11, 3, 4)
    out = m.translate(x, y)
    assert out["z_x"].shape == (9, 11, 20)
    for k in ("z_x", "z_y", "x_hat", "y_hat", "x_dot", "y_dot", "x_tilde", "y_tilde"):
        assert np.all(np.abs(out[k]) < 1), k
    assert out["x_tilde"].shape == x.shape and out["y_tilde"].shape == y.shape


def test_translate_output_range_and_channel_check():
    m = T.XNet(2, 3)
    x, y, _ = _data()
    out = m.translate(x * 50, y * 50)
    for k, v in out.items():
        assert np.all(np.abs(v) <= 1), k
    with pytest.raises(ValueError):
        m.translate(y, x)


def test_identity_wiring():
    """Identity hidden layers make every network compute tanh of its input."""
    m = T.XNet(2, 2, dropout=0.0, dtype=np.float64)
    for net in m.networks():
        layers = net.param_layers()
        for i, layer in enumerate(layers):
            w = layer.params["w"]
            w[:] = 0
            c_in = w.shape[2]
            if i == 0:
                # split into positive and negative parts: lrelu(v) - lrelu(-v) = 1.3 v
                for c in range(c_in):
                    w[1, 1, c, c] = 1.0
                    w[1, 1, c, c + c_in] = -1.0
            elif i < len(layers) - 1:
                # recombine to 1.3 v, rescale, and split again
                for c in range(2):
                    w[1, 1, c, c] = w[1, 1, c + 2, c + 2] = 1.0 / 1.3
                    w[1, 1, c + 2, c] = w[1, 1, c, c + 2] = -1.0 / 1.3
            else:
                for c in range(2):
                    w[1, 1, c, c] = 1.0 / 1.3
                    w[1, 1, c + 2, c] = -1.0 / 1.3
    x, y, _ = _data(6, 7, 2, 2)
    x, y = x.astype(np.float64), y.astype(np.float64)
    out = m.translate(x, y)
    np.testing.assert_allclose(out["y_hat"], np.tanh(x), atol=1e-12)
    np.testing.assert_allclose(out["x_hat"], np.tanh(y), atol=1e-12)
    np.testing.assert_allclose(out["x_dot"], np.tanh(np.tanh(x)), atol=1e-12)


def test_patch_and_full_inference_agree_away_from_patch_borders():
    m = T.XNet(2, 3, dtype=np.float64)
    m.astype(np.float64)
    x, y, _ = _data(30, 30)
    full = T.run_network(m.F, x)
    r0, c0, s = 7, 5, 16
    patch = T.run_network(m.F, x[r0:r0 + s, c0:c0 + s])
    halo = 4  # one pixel per 3x3 layer
    inner = patch[halo:s - halo, halo:s - halo]
    np.testing.assert_allclose(inner, full[r0 + halo:r0 + s - halo, c0 + halo:c0 + s - halo],
                               rtol=0, atol=1e-12)
    # pixels closer to the patch border see the zero padding
    assert np.max(np.abs(patch[3, 3:-3] - full[r0 + 3, c0 + 3:c0 + s - 3])) > 1e-6


@pytest.mark.xfail(strict=True, reason="four 3x3 layers: the padding reaches 4 pixels into a patch")
def test_patch_and_full_inference_agree_three_pixels_from_border():
    m = T.XNet(2, 3).astype(np.float64)
    x, _, _ = _data(30, 30)
    full = T.run_network(m.F, x)
    patch = T.run_network(m.F, x[7:23, 5:21])
    np.testing.assert_allclose(patch[3:-3, 3:-3], full[10:20, 8:18], atol=1e-12)


def test_tiled_inference_matches_whole_image():
    m = T.ACENet(2, 3).astype(np.float64)
    x, y, _ = _data(23, 17)
    a = m.translate(x, y)
    b = m.translate(x, y, tile=8)
    for k in a:
        np.testing.assert_allclose(a[k], b[k], atol=1e-12)


def test_augmentation_keeps_marker_aligned():
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = np.zeros((6, 6, 2))
        y = np.zeros((6, 6, 3))
        pi = np.zeros((6, 6))
        x[1, 4], y[1, 4], pi[1, 4] = 1.0, 1.0, 1.0
        ax, ay, ap = T._augment([x, y, pi], rng)
        px = np.argwhere(ax[:, :, 0] == 1)
        assert np.array_equal(px, np.argwhere(ay[:, :, 0] == 1))
        assert np.array_equal(px, np.argwhere(ap == 1))
        assert ax.shape == x.shape and ay.shape == y.shape


def test_augmentation_covers_all_eight_symmetries():
    seen = set()
    rng = np.random.default_rng(1)
    base = np.arange(9).reshape(3, 3)
    for _ in range(400):
        seen.add(T._augment([base], rng)[0].tobytes())
    assert len(seen) == 8


def test_sample_batch_shapes_and_alignment():
    x = np.arange(100, dtype=np.float64).reshape(10, 10, 1)
    y = np.concatenate([x, -x], axis=-1)
    pi = x[:, :, 0] / 100
    xb, yb, pb = T.sample_batch(x, y, pi, 5, 4, np.random.default_rng(0), np.random.default_rng(1))
    assert xb.shape == (5, 4, 4, 1) and yb.shape == (5, 4, 4, 2) and pb.shape == (5, 4, 4)
    np.testing.assert_array_equal(xb[..., 0], yb[..., 0])
    np.testing.assert_array_equal(xb[..., 0] / 100, pb)


def test_small_images_fall_back_to_image_sized_patches():
    x, y, a = _data(14, 18)
    res = T.train("xnet", x, y, a, _small_cfg(patch_hw=100, epochs=1, milestones=()))
    assert len(res.history) == 1


def test_history_is_bit_identical_for_fixed_seed():
    x, y, a = _data()
    h1 = T.train("xnet", x, y, a, _small_cfg(epochs=3, milestones=(2,))).history
    h2 = T.train("xnet", x, y, a, _small_cfg(epochs=3, milestones=(2,))).history
    assert h1 == h2
    h3 = T.train("xnet", x, y, a, _small_cfg(epochs=3, milestones=(2,), seed=1)).history
    assert h1 != h3


def test_augmentation_toggle_does_not_change_initial_weights():
    x, y, a = _data()
    m1 = T.XNet(2, 3, seed=4)
    m2 = T.XNet(2, 3, seed=4)
    for p, q in zip(m1.parameters(), m2.parameters()):
        np.testing.assert_array_equal(p, q)
    r1 = T.train("xnet", x, y, a, _small_cfg(epochs=1, milestones=(), augment=True))
    r2 = T.train("xnet", x, y, a, _small_cfg(epochs=1, milestones=(), augment=False))
    assert r1.history[0]["alpha"] != r2.history[0]["alpha"]


def test_prior_of_ones_removes_translation_term():
    x, y, _ = _data()
    res = T.train("xnet", x, y, np.ones((20, 20)), _small_cfg(milestones=()))
    assert all(h["alpha"] == 0.0 for h in res.history)
    assert all(h["cyc"] > 0 for h in res.history)


@pytest.mark.parametrize("arch", ["xnet", "acenet"])
def test_zero_weights_leave_parameters_unchanged(arch):
    x, y, a = _data()
    model = T.ARCHS[arch](2, 3, seed=0)
    before = [p.copy() for p in model.parameters()]
    model.setup_optimizers(1e-2)
    rng = np.random.default_rng(0)
    xb, yb, pb = T.sample_batch(x, y, 1 - a, 2, 8, rng)
    model.train_step(xb, yb, pb.astype(np.float32), L.LossWeights(0, 0, 0, 0, 0), rng)
    for p, q in zip(before, model.parameters()):
        np.testing.assert_array_equal(p, q)
    # weight decay alone moves weights but never biases
    model.train_step(xb, yb, pb.astype(np.float32), L.LossWeights(0, 0, 0, 0, 0.5), rng)
    for net in model.generator_networks():
        for layer in net.param_layers():
            assert np.all(layer.params["b"] == 0)
    assert any(not np.array_equal(p, q) for p, q in zip(before, model.parameters()))


def test_milestone_weights_in_unit_interval_and_applied():
    x, y, a = _data()
    model = T.XNet(2, 3)
    pi = T.milestone_weights(model, x, y)
    assert pi.shape == (20, 20) and pi.min() >= 0 and pi.max() <= 1
    assert pi.min() == 0.0 and pi.max() == 1.0
    res = T.train("xnet", x, y, a, _small_cfg(epochs=2, milestones=(1,)))
    assert res.pi.min() == 0.0 and res.pi.max() == 1.0
    res = T.train("xnet", x, y, a, _small_cfg(epochs=2), variant="no_milestones")
    np.testing.assert_allclose(res.pi, (1 - a).astype(np.float32))


def test_variants():
    x, y, a = _data()
    with pytest.raises(ValueError):
        T.train("xnet", x, y, a, _small_cfg(), variant="no_discr")
    with pytest.raises(ValueError):
        T.train("xnet", x, y, a, _small_cfg(), variant="bogus")
    with pytest.raises(ValueError):
        T.train("unet", x, y, a, _small_cfg())

    res = T.train("xnet", x, y, a, _small_cfg(milestones=()), variant="no_alpha")
    expected = 1.0 - T.stream(0, T.RANDOM_PRIOR).uniform(0, 1, size=(20, 20))
    np.testing.assert_allclose(res.pi, expected.astype(np.float32))

    res = T.train("xnet", x, y, a, _small_cfg(), variant="no_cycle")
    for h in res.history:
        assert h["total"] == pytest.approx(3.0 * h["alpha"] + 0.001 * h["theta"], rel=1e-12)

    res = T.train("xnet", x, y, a, _small_cfg(), variant="discr_output")
    assert "disc_out" in res.history[0] and "gen_out" in res.history[0]

    res = T.train("acenet", x, y, a, _small_cfg(), variant="no_discr")
    assert "Z" not in res.history[0] and "D" not in res.history[0]
    res = T.train("acenet", x, y, a, _small_cfg(), variant="no_recon")
    h = res.history[0]
    assert h["total"] == pytest.approx(h["Z"] + h["D"] + 2 * h["cyc"] + 3 * h["alpha"] + 0.001 * h["theta"],
                                       rel=1e-12)


def test_misaligned_inputs_rejected():
    x, y, a = _data()
    with pytest.raises(ValueError):
        T.train("xnet", x, y[:19], a, _small_cfg())
    with pytest.raises(ValueError):
        T.train("xnet", x, y, a[:, :19], _small_cfg())


class _FixedDiscriminator:
    """Outputs 1 on codes whose first channel mean is positive, else 0; no parameters."""

    def __init__(self):
        self.layers = []

    def forward(self, z, training=False, rng=None):
        out = (z[..., 0].mean(axis=(1, 2)) > 0).astype(z.dtype)[:, None]
        return out, z.shape

    def backward(self, grad, cache):
        return np.zeros(cache)

    def zero_grad(self):
        pass

    def parameters(self):
        return []

    def gradients(self):
        return []

    def weight_arrays(self):
        return []


def test_perfect_discriminator_fixture():
    model = T.ACENet(2, 3)
    model.disc = _FixedDiscriminator()
    model.setup_optimizers(1e-3)
    zx = np.full((3, 4, 4, 20), 0.5, dtype=np.float32)
    zy = -zx
    assert model.discriminator_gradients(zx, zy, L.LossWeights(), None) == 0.0
    l_d, l_z, _ = L.adversarial_losses(model.disc.forward(zx)[0], model.disc.forward(zy)[0])
    assert (l_d, l_z) == (0.0, 2.0)


def test_acenet_gradient_routing():
    x, y, a = _data()
    model = T.ACENet(2, 3)
    model.setup_optimizers(1e-2)
    rng = np.random.default_rng(0)
    xb, yb, pb = T.sample_batch(x, y, 1 - a, 2, 8, rng)
    zx = model.E_X.forward(xb)[0]
    zy = model.E_Y.forward(yb)[0]

    gens_before = [p.copy() for n in model.generator_networks() for p in n.parameters()]
    model.discriminator_gradients(zx, zy, L.LossWeights(), rng)
    for n in model.generator_networks():
        assert all(np.all(g == 0) for g in n.gradients())
    assert any(np.any(g != 0) for g in model.disc.gradients())
    model.opt_disc.step(model.disc.gradients())
    for p, q in zip(gens_before, [p for n in model.generator_networks() for p in n.parameters()]):
        np.testing.assert_array_equal(p, q)

    disc_before = [p.copy() for p in model.disc.parameters()]
    model.generator_gradients(xb, yb, pb.astype(np.float32), L.LossWeights(), rng, train_discriminator=False)
    assert all(np.all(g == 0) for g in model.disc.gradients())
    assert all(np.any(g != 0) for g in model.E_X.gradients()[1::2])
    model.opt.step([g for n in model.generator_networks() for g in n.gradients()])
    for p, q in zip(disc_before, model.disc.parameters()):
        np.testing.assert_array_equal(p, q)


def test_acenet_generator_gradient_end_to_end():
    """Finite-difference check of the generator objective (everything except L_D)."""
    rng = np.random.default_rng(2)
    model = T.ACENet(2, 1, dropout=0.0)
    code = 2
    model.E_X = nn.conv_stack(2, [3, code], "tanh", rng, 0.0, np.float64)
    model.E_Y = nn.conv_stack(1, [3, code], "tanh", rng, 0.0, np.float64)
    model.D_X = nn.conv_stack(code, [3, 2], "tanh", rng, 0.0, np.float64)
    model.D_Y = nn.conv_stack(code, [3, 1], "tanh", rng, 0.0, np.float64)
    model.disc = T.discriminator(code, rng, 0.0, filters=(3,), dtype=np.float64)
    xb, yb = rng.uniform(-1, 1, (2, 4, 4, 2)), rng.uniform(-1, 1, (2, 4, 4, 1))
    pib = rng.random((2, 4, 4))
    w = L.LossWeights()
    model.generator_gradients(xb, yb, pib, w, None, train_discriminator=False)
    analytic = [g.copy() for n in model.generator_networks() for g in n.gradients()]

    def objective():
        t = model.generator_gradients(xb, yb, pib, w, None, train_discriminator=False)
        return t["total"] - w.w_adv * t["D"]

    params = [p for n in model.generator_networks() for p in n.parameters()]
    for p, g in zip(params, analytic):
        assert rel_err(g, numeric_grad(objective, p)) <= 1e-4


def test_discriminator_gradient_end_to_end():
    rng = np.random.default_rng(3)
    model = T.ACENet(2, 1, dropout=0.0)
    model.disc = T.discriminator(4, rng, 0.0, filters=(3, 2), dtype=np.float64)
    zx, zy = rng.uniform(-1, 1, (2, 3, 3, 4)), rng.uniform(-1, 1, (3, 3, 3, 4))
    w = L.LossWeights(w_theta=0.01)
    model.discriminator_gradients(zx, zy, w, None)
    analytic = [g.copy() for g in model.disc.gradients()]

    def objective():
        l_d = model.discriminator_gradients(zx, zy, w, None)
        return w.w_adv * l_d + w.w_theta * L.weight_decay([model.disc])

    for p, g in zip(model.disc.parameters(), analytic):
        assert rel_err(g, numeric_grad(objective, p)) <= 1e-4


def test_checkpoint_roundtrip_and_history_csv(tmp_path):
    x, y, a = _data()
    res = T.train("acenet", x, y, a, _small_cfg())
    res.model.save(tmp_path / "m.hcdm")
    loaded = T.load_model(tmp_path / "m.hcdm")
    assert isinstance(loaded, T.ACENet)
    for p, q in zip(res.model.parameters(), loaded.parameters()):
        np.testing.assert_array_equal(p, q)
    a1, a2 = res.model.translate(x, y), loaded.translate(x, y)
    np.testing.assert_array_equal(a1["x_hat"], a2["x_hat"])
    res.write_history(tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0].split(",")[0] == "epoch" and len(lines) == 3
    assert {"alpha", "cyc", "AE", "Z", "D", "total"} <= set(lines[0].split(","))


def test_ablation_run_reports_auc():
    x, y, a = _data()
    truth = np.zeros((20, 20), bool)
    truth[:5] = True
    rep = T.ablation_run("xnet", "proposed", x, y, a, _small_cfg(), truth=truth)
    assert 0 <= rep["auc"] <= 1 and rep["d"].shape == (20, 20)


# -- training behaviour on 128x128 synthetic scenes (reduced schedule) ---------

def _scene_x(seed, **kw):
    from hetcd.raster import Raster, normalize
    from hetcd.synthetic import SceneSpec, make_scene, sar_log

    x, y, truth = make_scene(SceneSpec(seed=seed, **kw))
    return normalize(Raster(sar_log(x))).data, normalize(Raster(y)).data, truth


def _full_translation_loss(model, x, y):
    out = model.translate(x, y)
    return L.translation_loss(x[None], out["x_hat"][None], y[None], out["y_hat"][None],
                              np.ones((1,) + x.shape[:2]))[0]


def _reduced(seed, epochs):
    return T.TrainConfig(epochs=epochs, batches_per_epoch=1, batch_size=4, patch_hw=32, lr=1e-3,
                         milestones=(), seed=seed)


def test_identical_inputs_translation_loss_decreases():
    curves = []
    for seed in range(5):
        x, _, _ = _scene_x(seed)
        curve = [_full_translation_loss(T.XNet(3, 3, seed=seed), x, x)]

        def record(epoch, rec, model):
            if (epoch + 1) % 10 == 0:
                curve.append(_full_translation_loss(model, x, x))

        T.train("xnet", x, x, np.zeros(x.shape[:2]), _reduced(seed, 30), callback=record)
        curves.append(curve)
    median = np.median(curves, axis=0)
    assert np.isfinite(median[0])
    assert np.all(np.diff(median) < 0), median


def test_unchanged_scene_translation_loss_drops_tenfold():
    ratios = []
    for seed in range(5):
        x, y, truth = _scene_x(seed, change_fraction=0.0)
        assert not truth.any()
        before = _full_translation_loss(T.XNet(3, 3, seed=seed), x, y)
        res = T.train("xnet", x, y, np.zeros(x.shape[:2]), _reduced(seed, 60))
        ratios.append(before / _full_translation_loss(res.model, x, y))
    assert np.median(ratios) >= 10, ratios


@pytest.mark.slow
def test_acenet_prior_beats_random_prior():
    from hetcd.affinity import AffinityConfig, prior
    from hetcd.raster import Raster

    proposed, random_prior = [], []
    for seed in range(5):
        x, y, truth = _scene_x(seed, looks=1.0, sigma_o=0.2)
        alpha = prior(Raster(x), Raster(y), AffinityConfig()).alpha
        cfg = T.TrainConfig(epochs=30, batches_per_epoch=1, batch_size=4, patch_hw=32, lr=1e-3,
                            milestones=(10, 20), seed=seed)
        proposed.append(T.ablation_run("acenet", "proposed", x, y, alpha, cfg, truth=truth)["auc"])
        random_prior.append(T.ablation_run("acenet", "no_alpha", x, y, alpha, cfg, truth=truth)["auc"])
    assert np.median(proposed) >= np.median(random_prior), (proposed, random_prior)
