import numpy as np
import pytest

from floodal import nn
from floodal.data import LabelMask, SceneConfig, Tile, generate_synthetic_scene
from floodal.model import (
    StochasticPrediction,
    TrainConfig,
    UNet,
    UNetConfig,
    build_unet,
    evaluate_loss,
    mc_predict,
    mc_predict_many,
    parameter_count,
    predict_binary,
    stack_samples,
    train,
)
from floodal.seeding import derive_seed


def count_by_hand(cin, depth, base):
    """Parameter count tallied layer by layer from the topology."""
    total = 0
    c = cin
    for level in range(depth):
        out = base * 2 ** level
        total += c * out * 9 + out + out * out * 9 + out
        c = out
    cb = base * 2 ** depth
    total += c * cb * 9 + cb + cb * cb * 9 + cb
    c = cb
    for level in reversed(range(depth)):
        out = base * 2 ** level
        total += c * out * 4 + out            # transposed 2x2
        total += 2 * out * out * 9 + out     # conv after concat
        total += out * out * 9 + out
        c = out
    return total + c + 1                     # 1x1 head


def _scenes(n, sep=6.0, size=16, seed=0):
    cfg = SceneConfig(size=size, spectral_separation=sep, flood_fraction_target=0.4)
    return [generate_synthetic_scene(cfg, seed + i, f"s/{i}#0") for i in range(n)]


class TestArchitecture:
    def test_output_shape_and_parameter_count(self):
        cfg = UNetConfig(depth=2, base_channels=8)
        net = build_unet(cfg, 0)
        prob, _ = net.forward(np.random.default_rng(0).random((1, 3, 64, 64)).astype(np.float32))
        assert prob.shape == (1, 1, 64, 64)
        assert net.n_parameters() == parameter_count(cfg) == count_by_hand(3, 2, 8)

    @pytest.mark.parametrize("depth,base,cin", [(1, 4, 3), (3, 2, 1), (4, 4, 3)])
    def test_closed_form_count(self, depth, base, cin):
        cfg = UNetConfig(in_channels=cin, depth=depth, base_channels=base)
        assert UNet(cfg).n_parameters() == parameter_count(cfg) == count_by_hand(cin, depth, base)

    def test_output_strictly_inside_unit_interval(self):
        net = build_unet(UNetConfig(depth=1, base_channels=4), 1)
        for p in net.parameters():
            p.value *= 50  # saturate the sigmoid
        prob, _ = net.forward(np.random.default_rng(0).random((2, 3, 8, 8)).astype(np.float32))
        assert prob.min() > 0 and prob.max() < 1

    def test_shape_errors(self):
        net = build_unet(UNetConfig(depth=2, base_channels=2), 0)
        with pytest.raises(nn.ShapeError):
            net.forward(np.zeros((1, 3, 6, 8), dtype=np.float32))
        with pytest.raises(nn.ShapeError):
            net.forward(np.zeros((1, 2, 8, 8), dtype=np.float32))
        with pytest.raises(ValueError):
            UNet(UNetConfig(dropout_rate=1.0))

    def test_same_seed_same_weights(self):
        a = build_unet(UNetConfig(base_channels=4), 3).get_state()
        b = build_unet(UNetConfig(base_channels=4), 3).get_state()
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_network_gradients(self):
        net = UNet(UNetConfig(depth=2, base_channels=2, dropout_rate=0.5), seed=4, dtype=np.float64)
        # zero biases behind a dead channel leave pre-activations exactly on the ReLU kink
        for p in net.parameters():
            if p.value.ndim == 1:
                p.value[...] = np.random.default_rng(8).normal(0, 0.1, p.value.shape)
        x = np.random.default_rng(5).random((2, 3, 8, 8))
        mask = (np.random.default_rng(6).random((2, 1, 1, 2)) > 0.5) * 2.0
        report = nn.grad_check(net, x, dropout_mask=mask, max_entries=12, seed=7)
        assert report.passed, report.per_parameter

    def test_checkpoint_roundtrip(self, tmp_path):
        net = build_unet(UNetConfig(base_channels=2), 0)
        nn.save_checkpoint(tmp_path / "n.ck", net.parameters(), {"config": "x"})
        _, values = nn.load_checkpoint(tmp_path / "n.ck")
        other = build_unet(UNetConfig(base_channels=2), 1)
        other.set_state(values)
        assert all(np.array_equal(other.param(k), net.param(k)) for k in values)


class TestTraining:
    def test_memorizes_four_tiles(self):
        data = _scenes(4, sep=6.0)
        net = build_unet(UNetConfig(depth=2, base_channels=8, dropout_rate=0.0), 0)
        cfg = TrainConfig(max_epochs=150, batch_size=4, learning_rate=5e-3, early_stop_patience=150,
                          flip_augment=False)
        net, hist = train(net, data, data, cfg)
        assert hist.epochs[-1].train_loss < 0.05

    def test_easy_tiles_fit_within_fifty_epochs(self):
        # 16x16 tiles are mostly boundary, whose mixed pixels carry irreducible loss
        data = _scenes(20, sep=6.0, size=32, seed=100)
        net = build_unet(UNetConfig(depth=2, base_channels=16), 0)
        cfg = TrainConfig(max_epochs=50, batch_size=4, learning_rate=3e-3, early_stop_patience=50)
        _, hist = train(net, data, data[:4], cfg)
        assert min(e.train_loss for e in hist.epochs) < 0.1

    def test_patience_one_with_frozen_weights_stops_after_two_epochs(self):
        data = _scenes(2)
        net = build_unet(UNetConfig(depth=1, base_channels=2), 0)
        _, hist = train(net, data, data, TrainConfig(learning_rate=0.0, weight_decay=0.0, early_stop_patience=1))
        assert len(hist.epochs) == 2 and hist.epochs[-1].stopped and hist.best_epoch == 1

    def test_restores_best_epoch(self):
        data = _scenes(3)
        net = build_unet(UNetConfig(depth=1, base_channels=4), 0)
        cfg = TrainConfig(max_epochs=8, batch_size=2, learning_rate=2e-2, early_stop_patience=8)
        net, hist = train(net, data, data[:1], cfg)
        x, y, v = stack_samples(data[:1])
        best = min(e.val_loss for e in hist.epochs)
        assert evaluate_loss(net, x, y, v) == pytest.approx(best, rel=1e-9)
        assert hist.epochs[hist.best_epoch - 1].val_loss == best

    def test_deterministic(self):
        data = _scenes(3)
        runs = []
        for _ in range(2):
            net = build_unet(UNetConfig(depth=1, base_channels=4), 0)
            net, hist = train(net, data, data[:1], TrainConfig(max_epochs=3, batch_size=2, seed=9))
            runs.append((hist, net.get_state()))
        assert runs[0][0] == runs[1][0]
        assert all(np.array_equal(runs[0][1][k], runs[1][1][k]) for k in runs[0][1])

    def test_flip_equivariant_loss(self):
        tile, mask = _scenes(1)[0]
        net = build_unet(UNetConfig(depth=1, base_channels=4), 2)
        # a flip-equivariant network: make every 3x3 kernel symmetric under horizontal flip
        for p in net.parameters():
            if p.value.ndim == 4 and p.value.shape[-1] == 3:
                p.value[...] = (p.value + p.value[..., ::-1]) / 2
            elif p.value.ndim == 4 and p.value.shape[-1] == 2:
                p.value[...] = (p.value + p.value[..., ::-1]) / 2
        flipped = (Tile("f", "", tile.pixels[:, :, ::-1]), LabelMask(mask.classes[:, ::-1]))
        a = evaluate_loss(net, *stack_samples([(tile, mask)]))
        b = evaluate_loss(net, *stack_samples([flipped]))
        assert a == pytest.approx(b, rel=1e-6)

    def test_errors(self):
        net = build_unet(UNetConfig(depth=1, base_channels=2), 0)
        with pytest.raises(ValueError):
            train(net, [], _scenes(1), TrainConfig())
        with pytest.raises(ValueError):
            train(net, _scenes(1), _scenes(1), TrainConfig(early_stop_patience=0))

    def test_history_csv(self, tmp_path):
        data = _scenes(2)
        net = build_unet(UNetConfig(depth=1, base_channels=2), 0)
        _, hist = train(net, data, data, TrainConfig(max_epochs=2))
        hist.to_csv(tmp_path / "h.csv")
        lines = (tmp_path / "h.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_loss,val_loss,stopped_flag" and len(lines) == 3


class TestInference:
    def test_passes_equal_full_forward_passes(self):
        net = build_unet(UNetConfig(depth=2, base_channels=4), 0)
        tiles = [t for t, _ in _scenes(3)]
        preds = mc_predict_many(net, tiles, 4, seed=11, batch_size=2)
        for tile, pred in zip(tiles, preds):
            for t in range(4):
                rng = np.random.default_rng(derive_seed(11, tile.id, t))
                prob, _ = net.forward(tile.pixels[None], rng=rng)
                np.testing.assert_allclose(pred.passes[t], prob[0, 0], rtol=1e-6, atol=1e-7)

    def test_calibrated_is_mean_of_passes(self):
        net = build_unet(UNetConfig(depth=2, base_channels=4), 0)
        pred = mc_predict(net, _scenes(1)[0][0], 10, 3)
        assert pred.T == 10
        np.testing.assert_allclose(pred.calibrated, pred.passes.astype(np.float64).mean(axis=0), atol=1e-6)
        assert pred.passes.min() > 0 and pred.passes.max() < 1

    def test_no_dropout_means_identical_passes(self):
        net = build_unet(UNetConfig(depth=2, base_channels=4, dropout_rate=0.0), 0)
        pred = mc_predict(net, _scenes(1)[0][0], 5, 3)
        assert np.all(pred.passes == pred.passes[0])
        single = mc_predict(net, _scenes(1)[0][0], 1, 3)
        np.testing.assert_array_equal(single.calibrated, single.passes[0])

    def test_errors(self):
        net = build_unet(UNetConfig(depth=1, base_channels=2), 0)
        with pytest.raises(ValueError):
            mc_predict(net, _scenes(1)[0][0], 0, 0)
        with pytest.raises(nn.ShapeError):
            mc_predict(net, Tile("x", "", np.zeros((1, 8, 8))), 2, 0)

    def test_predict_binary(self):
        assert predict_binary(StochasticPrediction.from_passes(np.full((1, 3, 3), 0.6))).flood.all()
        below = StochasticPrediction.from_passes(np.full((1, 3, 3), 0.5 - 1e-7))
        assert not predict_binary(below).flood.any()
        p = np.random.default_rng(0).random((4, 5))
        np.testing.assert_array_equal(predict_binary(StochasticPrediction.from_passes(p), 0.3).classes,
                                      (p >= 0.3).astype(np.uint8))
        with pytest.raises(ValueError):
            predict_binary(StochasticPrediction.from_passes(p), 1.0)
