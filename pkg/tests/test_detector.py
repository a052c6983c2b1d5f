#  Copyright (c) 2020 Robert Lieck
import math
import shutil
import tempfile
from pathlib import Path
from unittest import TestCase

import numpy as np
import torch

from wakejam.audio import AudioClip, FrameSpec
from wakejam.corpus import LabeledClip, frame_labels
from wakejam.detector import FeatureFrontend, HighwayLayer, DetectorModel, Architecture, TrainConfig, \
    extract_features, fit_normalization, highway_forward, stack_context, forward, train, save_checkpoint, \
    load_checkpoint, check_compatible
from wakejam.diff import check_gradients
from wakejam.util import InvariantError, DataError, ConfigError, CompatibilityError

SMALL = Architecture(feature_width=8, feature_layers=1, bottleneck=4, context=1, classifier_width=8,
                     classifier_layers=2)


def small_frontend():
    return FeatureFrontend(n_mels=16)


def keyword_clip(seed, n=4000, frames=FrameSpec(window_size=400, hop=160)):
    """Quiet noise with a loud tone over the second half, which is the keyword."""
    rng = np.random.default_rng(seed)
    samples = rng.normal(0, 0.01, n)
    t = np.arange(n // 2) / 16000
    samples[n // 2:] += 0.5 * np.sin(2 * np.pi * (800 + 100 * seed) * t)
    events = ((n // 2, n),)
    return LabeledClip(audio=AudioClip(samples), frame_labels=frame_labels(events, n, frames), events=events)


class Test(TestCase):

    def setUp(self):
        self.dir = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.dir)

    def test_frontend(self):
        frontend = FeatureFrontend()
        self.assertEqual((64, 257), tuple(frontend.filterbank().shape))
        self.assertFalse(frontend.fitted)
        self.assertRaises(InvariantError, lambda: FeatureFrontend(n_fft=256))
        self.assertRaises(InvariantError, lambda: FeatureFrontend(log_floor=0))
        self.assertRaises(InvariantError, lambda: FeatureFrontend(n_mels=4, mean=np.zeros(3)))
        restored = FeatureFrontend.from_dict(frontend.to_dict())
        self.assertEqual(frontend.geometry(), restored.geometry())

    def test_features(self):
        frontend = small_frontend()
        # 25 ms window, 10 ms hop
        features = extract_features(AudioClip.zeros(16000), frontend)
        self.assertEqual((98, 16), tuple(features.shape))
        # silence sits at the floor
        np.testing.assert_allclose(np.full((98, 16), math.log(1e-10)), features.numpy())
        # amplitude x10 adds 2 ln 10 to every log energy
        noise = np.random.default_rng(0).normal(0, 0.1, 4000)
        diff = extract_features(10 * noise, frontend) - extract_features(noise, frontend)
        np.testing.assert_allclose(np.full(tuple(diff.shape), 2 * math.log(10)), diff.numpy(), atol=1e-5)

    def test_feature_gradients(self):
        frontend = small_frontend()
        x = torch.tensor(np.random.default_rng(1).normal(0, 0.1, 1200))
        reports = check_gradients(lambda p: extract_features(p["gain"] * x + p["shift"], frontend).sum(),
                                  {"gain": 1.0, "shift": 0.01}, eps=1e-6)
        self.assertEqual(2, len(reports))
        for r in reports:
            self.assertLessEqual(r.rel_error, 1e-4)

    def test_normalization(self):
        frontend = small_frontend()
        clips = [AudioClip(np.random.default_rng(s).normal(0, 0.1, 4000)) for s in range(3)]
        fitted = fit_normalization(frontend, clips)
        self.assertTrue(fitted.fitted)
        self.assertFalse(frontend.fitted)
        features = torch.cat([extract_features(c, fitted) for c in clips]).numpy()
        np.testing.assert_allclose(np.zeros(16), features.mean(axis=0), atol=1e-8)
        np.testing.assert_allclose(np.ones(16), features.std(axis=0), atol=1e-6)

    def test_highway(self):
        layer = HighwayLayer(4).to(torch.float64)
        x = torch.tensor([0.3, -1.2, 0.7, 2.0], dtype=torch.float64)
        # scalar oracle
        wt, bt = layer.transform.weight.detach().numpy(), layer.transform.bias.detach().numpy()
        wg, bg = layer.gate.weight.detach().numpy(), layer.gate.bias.detach().numpy()
        expected = []
        for i in range(4):
            t = 1 / (1 + math.exp(-(sum(wg[i, j] * x[j].item() for j in range(4)) + bg[i])))
            h = math.tanh(sum(wt[i, j] * x[j].item() for j in range(4)) + bt[i])
            expected.append(t * h + (1 - t) * x[i].item())
        with torch.no_grad():
            np.testing.assert_allclose(expected, highway_forward(layer, x).numpy())
            # closed gate carries the input
            layer.gate.weight.zero_()
            layer.gate.bias.fill_(-1000.0)
            np.testing.assert_array_equal(x.numpy(), layer(x).numpy())
            # open gate transforms it
            layer.gate.bias.fill_(1000.0)
            np.testing.assert_allclose(torch.tanh(layer.transform(x)).numpy(), layer(x).numpy())
        self.assertRaises(InvariantError, lambda: layer(torch.zeros(3, dtype=torch.float64)))

    def test_stack_context(self):
        h = torch.arange(10, dtype=torch.float64).reshape(5, 2)
        stacked = stack_context(h, 1)
        self.assertEqual((5, 6), tuple(stacked.shape))
        np.testing.assert_array_equal([0, 1, 0, 1, 2, 3], stacked[0].numpy())
        np.testing.assert_array_equal([2, 3, 4, 5, 6, 7], stacked[2].numpy())
        np.testing.assert_array_equal([6, 7, 8, 9, 8, 9], stacked[4].numpy())
        self.assertIs(h, stack_context(h, 0))

    def test_model(self):
        self.assertRaises(InvariantError, lambda: Architecture(feature_layers=0))
        model = DetectorModel(small_frontend(), SMALL, seed=0)
        features = torch.randn(20, 16, dtype=torch.float64)
        p = forward(model, features)
        self.assertEqual((20,), tuple(p.shape))
        self.assertTrue(torch.all((p > 0) & (p < 1)))
        # batches of clips
        self.assertEqual((3, 20), tuple(model(features.expand(3, 20, 16)).shape))
        # same seed, same weights
        other = DetectorModel(small_frontend(), SMALL, seed=0)
        np.testing.assert_array_equal(p.detach().numpy(), forward(other, features).detach().numpy())
        # silent output unit
        with torch.no_grad():
            model.output.weight.zero_()
            model.output.bias.zero_()
        np.testing.assert_array_equal(np.full(20, 0.5), forward(model, features).detach().numpy())
        self.assertEqual((23,), model.posteriors(AudioClip.zeros(4000)).shape)

    def test_train_config(self):
        self.assertRaises(ConfigError, lambda: TrainConfig(learning_rate=0))
        self.assertRaises(ConfigError, lambda: TrainConfig(epochs=0))
        self.assertRaises(ConfigError, lambda: TrainConfig(optimizer="rmsprop"))

    def test_train(self):
        clips = [keyword_clip(s) for s in range(4)]
        cfg = TrainConfig(learning_rate=1e-2, epochs=20, batch_size=2)
        result = train(DetectorModel(small_frontend(), SMALL), clips, cfg)
        self.assertEqual(20, len(result.losses))
        self.assertLess(result.losses[-1], result.initial_loss)
        self.assertTrue(result.model.frontend.fitted)
        # deterministic
        again = train(DetectorModel(small_frontend(), SMALL), clips, cfg)
        np.testing.assert_allclose(result.losses, again.losses)
        # sgd runs as well
        sgd = train(DetectorModel(small_frontend(), SMALL), clips, TrainConfig(optimizer="sgd", epochs=2))
        self.assertEqual(2, len(sgd.losses))
        # a 5 ms hop labels and trains on its own frames
        fine = FeatureFrontend(n_mels=16, spec=FrameSpec(window_size=400, hop=80))
        fine_clips = [keyword_clip(s, frames=fine.spec) for s in range(4)]
        self.assertEqual(46, len(fine_clips[0].frame_labels))
        fine_result = train(DetectorModel(fine, SMALL), fine_clips, TrainConfig(epochs=2, batch_size=2))
        self.assertEqual(2, len(fine_result.losses))
        self.assertRaises(DataError, lambda: train(DetectorModel(fine, SMALL), clips))

    def test_early_stopping(self):
        clips = [keyword_clip(s) for s in range(4)]
        cfg = TrainConfig(learning_rate=1e-2, epochs=10, batch_size=2, patience=2)
        result = train(DetectorModel(small_frontend(), SMALL), clips[:3], cfg, validation=clips[3:])
        self.assertEqual(len(result.losses), len(result.validation_f1))
        self.assertLessEqual(len(result.losses), 10)
        self.assertIsNotNone(result.best_epoch)
        self.assertEqual(max(result.validation_f1), result.validation_f1[result.best_epoch])

    def test_train_needs_both_classes(self):
        silent = LabeledClip(audio=AudioClip.zeros(4000), frame_labels=np.zeros(23))
        self.assertRaises(DataError, lambda: train(DetectorModel(small_frontend(), SMALL), [silent]))
        self.assertRaises(DataError, lambda: train(DetectorModel(small_frontend(), SMALL), []))
        mislabeled = LabeledClip(audio=AudioClip.zeros(4000), frame_labels=np.array([0.0, 1.0]))
        self.assertRaises(DataError, lambda: train(DetectorModel(small_frontend(), SMALL), [mislabeled]))

    def test_checkpoint(self):
        frontend = fit_normalization(small_frontend(), [keyword_clip(0).audio])
        model = DetectorModel(frontend, SMALL, seed=3)
        path = self.dir / "model" / "detector.pt"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path, frontend=small_frontend())
        self.assertEqual(SMALL, loaded.architecture)
        np.testing.assert_allclose(frontend.mean, loaded.frontend.mean)
        audio = keyword_clip(1).audio
        np.testing.assert_array_equal(model.posteriors(audio), loaded.posteriors(audio))
        # a different frame geometry
        self.assertRaises(CompatibilityError,
                          lambda: load_checkpoint(path, frontend=FeatureFrontend(n_mels=16, spec=FrameSpec(400, 200))))
        self.assertRaises(CompatibilityError, lambda: check_compatible(small_frontend(), FeatureFrontend()))
        # broken files
        self.assertRaises(DataError, lambda: load_checkpoint(self.dir / "missing.pt"))
        garbage = self.dir / "garbage.pt"
        garbage.write_bytes(b"not a checkpoint")
        self.assertRaises(CompatibilityError, lambda: load_checkpoint(garbage))
        foreign = self.dir / "foreign.pt"
        torch.save(dict(format="something-else"), str(foreign))
        self.assertRaises(CompatibilityError, lambda: load_checkpoint(foreign))
        newer = self.dir / "newer.pt"
        checkpoint = torch.load(str(path))
        checkpoint["version"] = 2
        torch.save(checkpoint, str(newer))
        self.assertRaises(CompatibilityError, lambda: load_checkpoint(newer))
