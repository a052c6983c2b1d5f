#  Copyright (c) 2020 Robert Lieck
import math
from dataclasses import replace
from unittest import TestCase

import numpy as np
import torch

from wakejam.audio import AudioClip
from wakejam.diff import check_gradients
from wakejam.room import RoomConfig, RoomDistribution, ImpulseResponse, image_sources, image_source_rir, \
    apply_rir, convolve, sample_rooms, sabine_absorption, resample_source, rooms_to_frame
from wakejam.util import InvariantError, GeometryError, ConfigError


class Test(TestCase):

    def setUp(self):
        # generic positions: no two first-order images share a delay
        self.room = RoomConfig(dims=(4.0, 5.0, 3.0), source=(1.1, 1.7, 1.3), mic=(2.3, 3.6, 1.9),
                               absorption=0.3, max_order=1)

    def test_config(self):
        self.assertEqual((0.3,) * 6, self.room.absorption)
        self.assertRaises(InvariantError, lambda: RoomConfig(dims=(4, 5, 3), source=(4.5, 1, 1), mic=(1, 1, 1)))
        self.assertRaises(InvariantError, lambda: RoomConfig(dims=(4, 5, 3), source=(1, 1, 1), mic=(1, 1, 0)))
        self.assertRaises(InvariantError, lambda: RoomConfig(dims=(4, 5, 3), source=(1, 1, 1), mic=(2, 2, 2),
                                                             absorption=0.0))
        self.assertRaises(InvariantError, lambda: RoomConfig(dims=(4, 5, 3), source=(1, 1, 1), mic=(2, 2, 2),
                                                             max_order=11))
        d = self.room.to_dict()
        self.assertEqual(4.0, d["lx"])
        self.assertEqual(0.3, d["absorption_z1"])

    def test_direct_path(self):
        room = RoomConfig(dims=(10, 10, 10), source=(5, 5, 5), mic=(8.43, 5, 5), max_order=0)
        rir = image_source_rir(room)
        self.assertEqual(160, room.direct_index)
        self.assertEqual(161, len(rir))
        self.assertEqual(1, np.count_nonzero(rir.taps))
        self.assertAlmostEqual(1 / (4 * math.pi * 3.43), rir.taps[160])
        self.assertAlmostEqual(0.02321, rir.taps[160], places=5)
        # doubling the distance halves the amplitude
        far = image_source_rir(RoomConfig(dims=(10, 10, 10), source=(1.57, 5, 5), mic=(8.43, 5, 5), max_order=0))
        self.assertAlmostEqual(rir.taps[160] / 2, far.taps.max())

    def test_first_order(self):
        positions, hits = image_sources(self.room)
        self.assertEqual((7, 3), positions.shape)
        self.assertEqual([0] + [1] * 6, sorted(hits.sum(axis=1).tolist()))
        rir = image_source_rir(self.room)
        self.assertEqual(7, np.count_nonzero(rir.taps))
        # every reflection loses the absorbed fraction
        self.assertAlmostEqual(1 / (4 * math.pi * self.room.distance), rir.taps[self.room.direct_index])
        mirrored = np.array([-1.1, 1.7, 1.3])
        d = np.linalg.norm(mirrored - np.array(self.room.mic))
        self.assertAlmostEqual(0.7 / (4 * math.pi * d), rir.taps[int(round(d / 343 * 16000))])
        # higher orders add images
        self.assertEqual(25, len(image_sources(RoomConfig(dims=(4, 5, 3), source=(1.1, 1.7, 1.3),
                                                          mic=(2.3, 3.6, 1.9), max_order=2))[0]))

    def test_geometry_error(self):
        room = RoomConfig(dims=(4, 5, 3), source=(1, 1, 1), mic=(1, 1, 1), max_order=0)
        self.assertRaises(GeometryError, lambda: image_source_rir(room))

    def test_apply_rir(self):
        rng = np.random.default_rng(0)
        x = AudioClip(rng.normal(size=300))
        # identity
        np.testing.assert_allclose(x.samples, apply_rir(x, ImpulseResponse(np.array([1.0]))).samples, atol=1e-12)
        # delay and scale
        out = apply_rir(x, ImpulseResponse(np.array([0.0, 0.0, 0.0, 0.5])))
        self.assertEqual(303, len(out))
        np.testing.assert_allclose(0.5 * x.samples, out.samples[3:], atol=1e-12)
        np.testing.assert_allclose(np.zeros(3), out.samples[:3], atol=1e-12)
        # direct convolution
        r = ImpulseResponse(rng.normal(size=57))
        np.testing.assert_allclose(np.convolve(x.samples, r.taps), apply_rir(x, r).samples, atol=1e-6)
        # batched tensors with gradients
        batch = torch.tensor(rng.normal(size=(2, 300)), requires_grad=True)
        y = apply_rir(batch, r)
        self.assertEqual((2, 356), tuple(y.shape))
        y.sum().backward()
        np.testing.assert_allclose(np.full((2, 300), r.taps.sum()), batch.grad.numpy(), atol=1e-9)
        self.assertRaises(InvariantError, lambda: apply_rir(AudioClip(np.ones(10), 8000), r))

    def test_sabine(self):
        dims = (4.0, 5.0, 3.0)
        a = sabine_absorption(0.4, dims)
        volume, surface = 60.0, 2 * (20 + 12 + 15)
        self.assertAlmostEqual(24 * math.log(10) * volume / (343 * surface * 0.4), a)
        self.assertWarns(RuntimeWarning, lambda: sabine_absorption(0.01, dims))

    def test_sample_rooms(self):
        # degenerate ranges
        dist = RoomDistribution(lx=(4, 4), ly=(5, 5), lz=(3, 3), source=((1, 1), (1, 1), (1, 1)),
                                mic=((2, 2), (2, 2), (2, 2)), rt60=(0.4, 0.4), count=5)
        rooms = sample_rooms(dist)
        self.assertEqual(5, len(rooms))
        for room in rooms:
            self.assertEqual(rooms[0], room)
        # reproducible
        self.assertEqual(sample_rooms(RoomDistribution(seed=3)), sample_rooms(RoomDistribution(seed=3)))
        self.assertNotEqual(sample_rooms(RoomDistribution(seed=3)), sample_rooms(RoomDistribution(seed=4)))
        # uniform dimensions
        rooms = sample_rooms(RoomDistribution(lx=(3, 5), count=1000, absorption=(0.2, 0.8)))
        lx = np.array([room.dims[0] for room in rooms])
        self.assertLess(abs(lx.mean() - 4.0), 3 * (2 / math.sqrt(12)) / math.sqrt(1000))
        self.assertTrue(all(0.2 <= room.absorption[0] <= 0.8 for room in rooms))
        self.assertEqual(1000, len(rooms_to_frame(rooms)))

    def test_infeasible_distribution(self):
        self.assertRaises(ConfigError, lambda: sample_rooms(RoomDistribution(lx=(0.8, 1.0))))
        self.assertRaises(ConfigError, lambda: sample_rooms(RoomDistribution(lx=(5, 4))))
        self.assertRaises(ConfigError, lambda: sample_rooms(RoomDistribution(rt60=None)))
        self.assertRaises(ConfigError, lambda: sample_rooms(RoomDistribution(lx=(4, 4),
                                                                             source=((7, 7), (1, 1), (1, 1)))))

    def test_resample_source(self):
        moved = resample_source(self.room, np.random.default_rng(0))
        self.assertEqual(self.room.dims, moved.dims)
        self.assertEqual(self.room.mic, moved.mic)
        self.assertNotEqual(self.room.source, moved.source)

    def test_direct_path_leads(self):
        # absorbent walls: even coinciding reflections stay below the direct sound
        for room in sample_rooms(RoomDistribution(absorption=(0.7, 0.95), max_order=1, count=100, seed=11)):
            taps = image_source_rir(room).taps
            self.assertEqual(room.direct_index, np.flatnonzero(taps)[0])
            self.assertEqual(room.direct_index, int(np.argmax(taps)))

    def test_energy_decay(self):
        window = 160
        for room in sample_rooms(RoomDistribution(count=100, seed=12)):
            taps = image_source_rir(room).taps
            energy = np.add.reduceat(taps ** 2, np.arange(0, len(taps), window))
            # the last 10 ms are quieter than the 10 ms holding the direct sound
            self.assertLess(energy[-1], energy[room.direct_index // window])
        # more absorption leaves less energy in every window
        live, dead = (image_source_rir(replace(self.room, absorption=a, max_order=3)).taps for a in (0.2, 0.6))
        self.assertEqual(len(live), len(dead))
        live_energy = np.add.reduceat(live ** 2, np.arange(0, len(live), window))
        dead_energy = np.add.reduceat(dead ** 2, np.arange(0, len(dead), window))
        self.assertTrue(np.all(dead_energy <= live_energy))
        self.assertLess(dead_energy[1:].sum(), live_energy[1:].sum())

    def test_linearity(self):
        rng = np.random.default_rng(1)
        r = image_source_rir(self.room)
        x1, x2 = rng.normal(size=(2, 500))
        a, b = 0.7, -2.5
        combined = a * apply_rir(AudioClip(x1), r).samples + b * apply_rir(AudioClip(x2), r).samples
        np.testing.assert_allclose(combined, apply_rir(AudioClip(a * x1 + b * x2), r).samples, atol=1e-9)
        # and in the response
        r1, r2 = rng.normal(size=(2, 40))
        np.testing.assert_allclose((convolve(x1, r1) + convolve(x1, r2)).numpy(), convolve(x1, r1 + r2).numpy(),
                                   atol=1e-9)

    def test_rir_gradient(self):
        rng = np.random.default_rng(2)
        r = image_source_rir(self.room)
        weights = torch.tensor(rng.normal(size=40 + len(r) - 1))
        reports = check_gradients(lambda p: (torch.sin(apply_rir(p["x"], r)) * weights).sum(),
                                  {"x": rng.normal(size=40)}, eps=1e-6)
        np.testing.assert_allclose([q.numeric for q in reports], [q.analytic for q in reports], rtol=1e-4, atol=1e-8)
        # with respect to the taps as well
        short = 0.1 * rng.normal(size=30)
        weights = torch.tensor(rng.normal(size=69))
        reports = check_gradients(lambda p: (torch.sin(convolve(p["x"], p["r"])) * weights).sum(),
                                  {"x": rng.normal(size=40), "r": short}, eps=1e-6)
        self.assertEqual(70, len(reports))
        np.testing.assert_allclose([q.numeric for q in reports], [q.analytic for q in reports], rtol=1e-4, atol=1e-8)
