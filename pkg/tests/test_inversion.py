from __future__ import annotations

import numpy as np
import pytest

from rgir import degradations as D
from rgir import generator as G
from rgir import inversion as I
from rgir import tensor as T
from rgir.rng import Stream

IDENTITY = D.CompositionSpec(())


class TestPhaseSchedule:
    def test_defaults_are_the_published_constants(self):
        s = I.PhaseSchedule()
        assert s.phases == ((0.08, 150), (0.02, 150), (0.005, 150))
        assert s.total_steps == 450

    def test_rates_must_strictly_decrease(self):
        with pytest.raises(ValueError, match="decrease"):
            I.PhaseSchedule(((0.02, 10), (0.08, 10), (0.005, 10)))
        with pytest.raises(ValueError, match="decrease"):
            I.PhaseSchedule(((0.08, 10), (0.08, 10), (0.005, 10)))

    def test_three_phases_required(self):
        with pytest.raises(ValueError, match="3 phases"):
            I.PhaseSchedule(((0.08, 10), (0.02, 10)))

    def test_negative_steps_rejected(self):
        with pytest.raises(ValueError):
            I.PhaseSchedule(((0.08, -1), (0.02, 10), (0.005, 10)))


class TestNgdStep:
    def test_unit_direction(self):
        out = I.ngd_step(np.zeros(4), np.array([3.0, 4.0, 0.0, 0.0]), rate=1.0)
        assert np.allclose(out, [-0.6, -0.8, 0.0, 0.0])

    def test_zero_gradient_no_movement(self):
        latent = np.array([1.0, 2.0, 3.0])
        out = I.ngd_step(latent, np.zeros(3), rate=0.08)
        assert np.array_equal(out, latent)

    def test_per_row_normalization(self):
        latent = np.zeros((3, 4))
        grad = np.zeros((3, 4))
        grad[0] = [1.0, 0.0, 0.0, 0.0]
        grad[2] = [0.0, 2.0, 0.0, 0.0]
        out = I.ngd_step(latent, grad, rate=0.5)
        assert np.allclose(out[0], [-0.5, 0.0, 0.0, 0.0])
        assert np.array_equal(out[1], np.zeros(4))  # zero-norm row untouched
        assert np.allclose(out[2], [0.0, -0.5, 0.0, 0.0])

    def test_step_length_equals_rate_per_code(self):
        stream = Stream(3)
        latent = stream.normals(5 * 8).reshape(5, 8)
        grad = stream.normals(5 * 8).reshape(5, 8)
        out = I.ngd_step(latent, grad, rate=0.02)
        lengths = np.linalg.norm(out - latent, axis=1)
        assert np.max(np.abs(lengths - 0.02) / 0.02) < 1e-9

    def test_invariant_under_positive_gradient_scaling(self):
        stream = Stream(4)
        latent = stream.normals(6)
        grad = stream.normals(6)
        a = I.ngd_step(latent, grad, rate=0.08)
        b = I.ngd_step(latent, grad * 7.3, rate=0.08)
        assert np.max(np.abs(a - b)) < 1e-12 * max(1.0, np.max(np.abs(a)))

    def test_non_finite_gradient_aborts(self):
        with pytest.raises(RuntimeError, match="non-finite"):
            I.ngd_step(np.zeros(3), np.array([1.0, np.nan, 0.0]), rate=0.1)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(T.ShapeError):
            I.ngd_step(np.zeros(3), np.zeros(4), rate=0.1)


class TestRunPhase:
    def test_zero_steps_returns_input_unchanged(self, weights16, mean16):
        target = G.synthesize(mean16, weights16)
        latent, image, losses = I.run_phase(
            G.LatentGlobal(mean16.values.copy()), IDENTITY, target, weights16,
            rate=0.08, steps=0, stream=Stream(1))
        assert np.array_equal(latent.values, mean16.values)
        assert np.array_equal(image, G.synthesize(mean16, weights16))
        assert losses == []

    def test_loss_decreases_for_in_range_targets(self, weights16, mean16):
        cfg = weights16.config
        wins = 0
        for seed in range(10):
            target = G.synthesize(
                G.map_latent(Stream(100 + seed).normals(cfg.latent_dim), weights16),
                weights16)
            _, _, losses = I.run_phase(
                G.LatentGlobal(mean16.values.copy()), IDENTITY, target, weights16,
                rate=0.08, steps=150, stream=Stream(seed))
            wins += losses[-1] < losses[0]
        assert wins >= 9

    def test_trajectory_bit_reproducible(self, weights16, mean16):
        cfg = weights16.config
        comp = D.CompositionSpec((D.DegradationSpec.of("denoise", level="M", seed=3),))
        clean = G.synthesize(
            G.map_latent(Stream(55).normals(cfg.latent_dim), weights16), weights16)
        target = D.compose(comp, clean, mode="true")
        sched = I.PhaseSchedule(((0.08, 5), (0.02, 5), (0.005, 5)))
        r1 = I.invert(target, comp, weights16, seed=9, schedule=sched, init=mean16)
        r2 = I.invert(target, comp, weights16, seed=9, schedule=sched, init=mean16)
        assert r1.losses == r2.losses
        assert np.array_equal(r1.restored, r2.restored)

    def test_nan_target_aborts_with_step_index(self, weights16, mean16):
        target = G.synthesize(mean16, weights16)
        target[0, 0, 0] = np.nan
        with pytest.raises(RuntimeError, match="step 0"):
            I.run_phase(G.LatentGlobal(mean16.values.copy()), IDENTITY, target,
                        weights16, rate=0.08, steps=3, stream=Stream(1))


class TestInvert:
    def test_total_steps_450_by_default(self):
        assert I.PhaseSchedule().total_steps == 450

    def test_zero_step_schedule_passes_initialization_through(self, weights16, mean16):
        target = G.synthesize(mean16, weights16)
        sched = I.PhaseSchedule(((0.08, 0), (0.02, 0), (0.005, 0)))
        run = I.invert(target, IDENTITY, weights16, seed=1, schedule=sched, init=mean16)
        assert np.array_equal(run.restored, G.synthesize(mean16, weights16))
        assert run.losses == []

    def test_phase_handoff_is_bit_exact(self, weights16, mean16):
        cfg = weights16.config
        target = G.synthesize(
            G.map_latent(Stream(77).normals(cfg.latent_dim), weights16), weights16)
        stream = Stream(5)
        latent1, image1, _ = I.run_phase(
            G.LatentGlobal(mean16.values.copy()), IDENTITY, target, weights16,
            rate=0.08, steps=10, stream=stream)
        expanded = G.expand_to_layerwise(latent1, cfg)
        _, image2, _ = I.run_phase(expanded, IDENTITY, target, weights16,
                                   rate=0.02, steps=0, stream=stream)
        assert np.array_equal(image1, image2)
        expanded2 = G.expand_to_filterwise(expanded, cfg)
        _, image3, _ = I.run_phase(expanded2, IDENTITY, target, weights16,
                                   rate=0.005, steps=0, stream=stream)
        assert np.array_equal(image1, image3)

    def test_loss_trajectory_has_phase_structure(self, weights16, mean16):
        target = G.synthesize(mean16, weights16)
        sched = I.PhaseSchedule(((0.08, 4), (0.02, 3), (0.005, 2)))
        run = I.invert(target, IDENTITY, weights16, seed=2, schedule=sched, init=mean16)
        assert [len(p) for p in run.phase_losses] == [4, 3, 2]
        assert run.losses == run.phase_losses[0] + run.phase_losses[1] + run.phase_losses[2]

    def test_target_resolution_validated(self, weights16, mean16):
        bad = np.zeros((5, 5, 3))
        with pytest.raises(ValueError, match="target shape"):
            I.invert(bad, IDENTITY, weights16, seed=1, init=mean16)

    def test_outputs_in_unit_range(self, weights16, mean16):
        cfg = weights16.config
        comp = D.CompositionSpec((D.DegradationSpec.of("inpaint", level="M", seed=4),))
        clean = G.synthesize(
            G.map_latent(Stream(66).normals(cfg.latent_dim), weights16), weights16)
        target = D.compose(comp, clean, mode="true")
        sched = I.PhaseSchedule(((0.08, 5), (0.02, 5), (0.005, 5)))
        run = I.invert(target, comp, weights16, seed=3, schedule=sched, init=mean16)
        for img in (run.image_global, run.image_layerwise, run.image_filterwise):
            assert img.min() >= 0.0 and img.max() <= 1.0
        assert all(np.isfinite(v) for v in run.losses)


class TestLossScaleInvariance:
    def test_iterates_invariant_under_loss_scaling(self):
        # 50 NGD steps on a quadratic-style objective, plain vs 7.3x scaled
        stream = Stream(8)
        target = stream.normals(6)

        def iterate(scale_factor):
            w = np.full(6, 2.0)
            traj = []
            for _ in range(50):
                lv = T.leaf(w)
                diff = T.sub(lv, T.constant(target))
                loss = T.scale(T.reduce_sum(T.square(diff)), scale_factor)
                T.backward(loss)
                w = I.ngd_step(w, lv.grad, rate=0.05)
                traj.append(w.copy())
            return traj

        base = iterate(1.0)
        scaled = iterate(7.3)
        for a, b in zip(base, scaled):
            denom = max(1.0, float(np.max(np.abs(a))))
            assert np.max(np.abs(a - b)) / denom < 1e-9
