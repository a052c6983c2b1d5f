#  Copyright (c) 2020 Robert Lieck
import math
import shutil
import tempfile
from pathlib import Path
from unittest import TestCase

import mido
import numpy as np
import torch

from wakejam.diff import check_gradients
from wakejam.synth import Note, SynthParams, ks_coefficients, derive_state, pluck_init, render_note, \
    render_sequence, render_sequence_tensor, forward, backward, snap_to_keys, describe_notes, random_params, \
    beat_durations, midi_number, OMEGA_MIN
from wakejam.util import BoundsError, InvariantError, NoteTooShortError, __MIN_FREQ__, __MAX_FREQ__, __MIN_VOL__, \
    __MAX_VOL__


def coefficients(freq, vol=100.0, dur=8000, sample_rate=16000):
    return ks_coefficients(torch.tensor(freq, dtype=torch.float64), torch.tensor(vol, dtype=torch.float64),
                           dur, sample_rate)


class Test(TestCase):

    def test_coefficients(self):
        c = coefficients(440.0)
        self.assertAlmostEqual(220.0, c["n_periods"].item())
        self.assertAlmostEqual((4 / math.log(440)) ** (1 / 220), c["gamma"].item())
        self.assertAlmostEqual(0.99809, c["gamma"].item(), places=4)
        # ln(fr) = 3 zeroes the pitch correction
        c = coefficients(math.exp(3))
        self.assertAlmostEqual(1.0, c["p_v"].item())
        self.assertAlmostEqual(1.0, c["v_output"].item())
        # integer ratio: omega is kept inside (0, 1)
        c = coefficients(400.0)
        self.assertEqual(40, c["delay"])
        self.assertAlmostEqual(OMEGA_MIN, c["omega"].item())

    def test_derive_state(self):
        state = derive_state(Note(440.0, 8000, 80.0), seed=3)
        self.assertEqual(36, state.delay)
        self.assertAlmostEqual(16000 / 440 - 36, state.omega)
        self.assertEqual(3, state.seed)
        self.assertRaises(BoundsError, lambda: derive_state(Note(5000.0, 8000, 80.0)))
        self.assertRaises(BoundsError, lambda: derive_state(Note(440.0, 8000, 120.0)))
        # delay below two samples
        self.assertRaises(InvariantError, lambda: derive_state(Note(9000.0, 8000, 80.0), check_bounds=False))
        self.assertRaises(InvariantError, lambda: Note(440.0, 0, 80.0))

    def test_pluck_init(self):
        state = derive_state(Note(440.0, 8000, 80.0), seed=5)
        np.testing.assert_array_equal(pluck_init(state), pluck_init(state))
        self.assertEqual(state.delay, len(pluck_init(state)))
        silent = derive_state(Note(440.0, 8000, 80.0), beta=0.0)
        np.testing.assert_array_equal(np.zeros(silent.delay), pluck_init(silent))
        # sample mean of N(0, 1) over D = 1000
        low = derive_state(Note(16.0, 8000, 80.0), check_bounds=False)
        self.assertEqual(1000, low.delay)
        self.assertLess(abs(pluck_init(low).mean()), 3 / math.sqrt(1000))

    def test_render_note(self):
        note = Note(440.0, 8000, 80.0)
        state = derive_state(note)
        y = render_note(note, state).samples
        self.assertEqual(8000, len(y))
        self.assertTrue(np.all(np.isfinite(y)))
        # energy over consecutive delay periods never grows after the first one
        d = state.delay
        rms = [np.sqrt(np.mean(y[i:i + d] ** 2)) for i in range(0, len(y) - d + 1, d)]
        for a, b in zip(rms[1:], rms[2:]):
            self.assertLessEqual(b, a + 1e-15)
        # output volume is linear in amplitude
        loud = render_note(Note(440.0, 8000, 100.0), derive_state(Note(440.0, 8000, 100.0))).samples
        np.testing.assert_allclose(0.1 * loud, y, atol=1e-12)
        # too short for one period
        short = Note(100.0, 100, 80.0)
        self.assertRaises(NoteTooShortError, lambda: render_note(short, derive_state(short)))

    def test_recursive_volume(self):
        note = Note(440.0, 4000, 90.0)
        state = derive_state(note)
        y = render_note(note, state, volume_mode="recursive").samples
        # the first period is the scaled excitation
        np.testing.assert_allclose(state.v_output * pluck_init(state), y[:state.delay])
        self.assertTrue(np.all(np.isfinite(y)))

    def test_render_sequence(self):
        note = Note(440.0, 8000, 80.0)
        params = SynthParams(notes=(note,))
        np.testing.assert_allclose(render_note(note, derive_state(note, seed=0)).samples,
                                   render_sequence(params).samples, atol=1e-12)
        params = SynthParams(notes=(note, Note(660.0, 8000, 70.0)))
        self.assertEqual(16000, len(render_sequence(params)))
        # looping
        params = SynthParams(notes=tuple(Note(f, 10000, 70.0) for f in [220.0, 330.0, 440.0, 550.0]))
        y = render_sequence(params, target_length=160000).samples
        self.assertEqual(160000, len(y))
        for k in range(1, 4):
            np.testing.assert_array_equal(y[:40000], y[40000 * k:40000 * (k + 1)])

    def test_params(self):
        self.assertRaises(InvariantError, lambda: SynthParams(notes=()))
        self.assertRaises(InvariantError, lambda: SynthParams(notes=(Note(440.0, 100, 50.0),), seeds=(1, 2)))
        self.assertRaises(InvariantError, lambda: SynthParams(notes=(Note(440.0, 100, 50.0),), volume_mode="loud"))
        self.assertRaises(BoundsError, lambda: SynthParams(notes=(Note(20.0, 100, 50.0),)))
        params = SynthParams(notes=(Note(440.0, 8000, 50.0), Note(880.0, 4000, 60.0)), seeds=(7, 9))
        self.assertEqual((36, 18), params.delays())
        self.assertEqual(12000, params.length)
        moved = params.with_values(freqs=[450.0, 900.0])
        np.testing.assert_array_equal([450.0, 900.0], moved.freqs)
        np.testing.assert_array_equal(params.vols, moved.vols)
        self.assertEqual(params.durations, moved.durations)
        self.assertEqual(params.seeds, moved.seeds)
        self.assertEqual(params, SynthParams.from_dict(params.to_dict()))

    def test_files(self):
        directory = Path(tempfile.mkdtemp())
        try:
            params = SynthParams(notes=(Note(440.0, 8000, 100.0), Note(523.25, 8000, 50.0)), bpm=120.0)
            params.save(directory / "params.json")
            self.assertEqual(params, SynthParams.load(directory / "params.json"))
            params.to_midi(directory / "params.mid")
            messages = [m for m in mido.MidiFile(str(directory / "params.mid")) if m.type == "note_on"]
            self.assertEqual([69, 72], [m.note for m in messages])
            self.assertEqual(127, messages[0].velocity)
        finally:
            shutil.rmtree(directory)

    def test_keys(self):
        self.assertEqual(69, midi_number(440.0))
        np.testing.assert_allclose([440.0, 27.5, 4186.0], snap_to_keys([445.0, 20.0, 5000.0]))
        params = SynthParams(notes=(Note(440.0, 100, 50.0), Note(261.63, 100, 50.0)))
        self.assertEqual(["A4", "C4"], describe_notes(params))

    def test_random_params(self):
        a = random_params(16, np.random.default_rng(0), vol=70.0)
        b = random_params(16, np.random.default_rng(0), vol=70.0)
        self.assertEqual(a, b)
        self.assertEqual(16, len(a))
        self.assertTrue(np.all(a.vols == 70.0))
        self.assertEqual(tuple(beat_durations(16, 120.0)), a.durations)
        self.assertEqual(4000, a.durations[0])

    def test_backward(self):
        params = SynthParams(notes=(Note(440.0, 8000, 80.0),))
        y, tape = forward(params)
        d_freq, d_vol = backward(params, tape, torch.zeros_like(y))
        np.testing.assert_array_equal([0.0], d_freq)
        np.testing.assert_array_equal([0.0], d_vol)
        # loss = sum y, volume gradient against central differences
        _, d_vol = backward(params, tape, torch.ones_like(y))
        eps = 1e-3
        numeric = (render_sequence(params.with_values(vols=[80.0 + eps])).samples.sum() -
                   render_sequence(params.with_values(vols=[80.0 - eps])).samples.sum()) / (2 * eps)
        self.assertLessEqual(abs(d_vol[0] - numeric) / abs(numeric), 1e-3)
        # loss = sum y^2, frequency gradient with the delay held fixed
        d_freq, _ = backward(params, tape, 2 * y.detach())

        def energy(freq):
            with torch.no_grad():
                out = render_sequence_tensor(params, freqs=torch.tensor([freq], dtype=torch.float64),
                                             delays=params.delays())
            return float((out ** 2).sum())
        numeric = (energy(440.0 + eps) - energy(440.0 - eps)) / (2 * eps)
        self.assertLessEqual(abs(d_freq[0] - numeric) / abs(numeric), 1e-2)
        # tape of other parameters
        other = SynthParams(notes=(Note(440.0, 4000, 80.0),))
        self.assertRaises(InvariantError, lambda: backward(other, tape, torch.ones_like(y)))
        self.assertRaises(InvariantError, lambda: backward(params, tape, torch.ones(3)))

    def test_random_draws(self):
        rng = np.random.default_rng(6)
        bounds = dict(freq=(__MIN_FREQ__, __MAX_FREQ__), vol=(__MIN_VOL__, __MAX_VOL__))
        for _ in range(100):
            params = random_params(2, rng, beats=0.125)
            # the output scales exactly with the digital volume
            full = render_sequence(params.with_values(vols=[100.0, 100.0])).samples
            scale = np.repeat(10 ** ((np.asarray(params.vols) - 100) / 20), params.durations)
            np.testing.assert_allclose(scale * full, render_sequence(params).samples, rtol=1e-9, atol=1e-15)
            # gradients are finite and the volume gradient matches finite differences
            weights = torch.tensor(rng.standard_normal(params.length))
            delays = params.delays()
            reports = check_gradients(
                lambda p: (render_sequence_tensor(params, p["freq"], p["vol"], delays=delays) * weights).sum(),
                dict(freq=params.freqs, vol=params.vols), eps=1e-3, bounds=bounds)
            self.assertTrue(all(np.isfinite(r.analytic) for r in reports))
            for r in reports[2:]:
                self.assertLess(r.rel_error, 1e-3)
