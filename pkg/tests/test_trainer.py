import numpy as np
import pytest

from svbackend.attention import BackendConfig
from svbackend.data import EmbeddingSet, SyntheticSpec, generate_synthetic
from svbackend.numerics import make_rng, spawn_rng
from svbackend.trainer import (
    BatchSpec,
    CyclicalLrSchedule,
    TrainState,
    compose_batch,
    load_checkpoint,
    lr_at,
    save_checkpoint,
    train,
)


def make_pool(n_speakers=6, utts=5, dim=8, seed=0, within=0.5):
    spec = SyntheticSpec(n_speakers=n_speakers, utts_per_speaker=utts, dim=dim,
                         between_scale=1.0, within_scale=within, seed=seed)
    return generate_synthetic(spec)[0]


class TestComposeBatch:
    def test_table_layout_m3_k4(self):
        pool = make_pool(n_speakers=5, utts=6)
        batch = compose_batch(pool, BatchSpec(3, 4, 0), make_rng(0))
        positives = [t for t in batch.trials if t[3]]
        negatives = [t for t in batch.trials if not t[3]]
        assert len(positives) == 12
        assert len(negatives) == 24

    def test_minimum_case_m2_k2(self):
        pool = make_pool(n_speakers=4, utts=3)
        batch = compose_batch(pool, BatchSpec(2, 2, 0), make_rng(1))
        positives = [t for t in batch.trials if t[3]]
        negatives = [t for t in batch.trials if not t[3]]
        assert len(positives) == 4
        assert len(negatives) == 4
        for test_vec, enroll, _ in batch.iter_trials():
            assert enroll.shape == (1, pool.dim)

    def test_deterministic_replay(self):
        pool = make_pool(n_speakers=8, utts=6)
        spec = BatchSpec(4, 3, 0)
        a = compose_batch(pool, spec, make_rng(9))
        b = compose_batch(pool, spec, make_rng(9))
        assert a.speaker_ids == b.speaker_ids
        assert a.utt_ids == b.utt_ids
        assert np.array_equal(a.emb, b.emb)
        assert a.trials == b.trials

    def test_exhaustive_structure(self):
        pool = make_pool(n_speakers=6, utts=7)
        M, K = 4, 3
        batch = compose_batch(pool, BatchSpec(M, K, 0), make_rng(2))
        assert len(batch.trials) == M * K * M
        seen = set()
        for l, m, n, label in batch.trials:
            assert label == (l == n)
            seen.add((l, m, n))
        assert len(seen) == M * K * M
        # a test utterance never appears in its own positive enrollment set:
        # the enrollment at held-out index m excludes row m by construction
        for l in range(M):
            for m in range(K):
                enroll_rows = np.delete(batch.emb[l], m, axis=0)
                assert not any(np.array_equal(batch.emb[l, m], row) for row in enroll_rows)

    def test_insufficient_pool_rejected(self):
        pool = make_pool(n_speakers=3, utts=4)
        with pytest.raises(ValueError, match="eligible"):
            compose_batch(pool, BatchSpec(5, 3, 0), make_rng(0))

    def test_speakers_below_k_excluded(self):
        pool = make_pool(n_speakers=5, utts=3)
        extra = EmbeddingSet(pool.dim)
        for (spk, utt), vec in pool.items():
            extra.add(spk, utt, vec)
        extra.add("tiny", "only-one", np.ones(pool.dim))
        batch = compose_batch(extra, BatchSpec(5, 3, 0), make_rng(3))
        assert "tiny" not in batch.speaker_ids

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            BatchSpec(1, 3, 0)
        with pytest.raises(ValueError):
            BatchSpec(4, 1, 0)


class TestLrSchedule:
    def test_paper_default_endpoints(self):
        sched = CyclicalLrSchedule(1e-5, 3e-5, 2000)
        assert lr_at(sched, 0) == 1e-5
        assert lr_at(sched, 2000) == 3e-5
        assert lr_at(sched, 4000) == 1e-5

    def test_closed_form_triangle_oracle(self):
        sched = CyclicalLrSchedule(0.5, 1.5, 7)
        for step in range(3 * 2 * 7):
            pos = step % 14
            expected = 0.5 + (1.5 - 0.5) * (min(pos, 14 - pos) / 7)
            assert lr_at(sched, step) == pytest.approx(expected, abs=1e-15)

    def test_periodic_and_bounded(self):
        sched = CyclicalLrSchedule(1e-4, 9e-4, 13)
        values = [lr_at(sched, s) for s in range(26)]
        for s in range(120):
            v = lr_at(sched, s)
            assert sched.lr_min <= v <= sched.lr_max
            assert v == values[s % 26]

    def test_validation(self):
        with pytest.raises(ValueError):
            CyclicalLrSchedule(2e-5, 1e-5, 100)
        with pytest.raises(ValueError):
            CyclicalLrSchedule(1e-5, 3e-5, 0)


class TestTrain:
    CFG = BackendConfig(dim=8, sdsa_heads=2, ffsa_heads=2, ffsa_hidden=5)

    def test_zero_lr_is_null_update(self):
        pool = make_pool()
        spec = BatchSpec(3, 3, 7)
        from svbackend.attention import init_params

        expected = init_params(self.CFG, spawn_rng(7, 0))
        state = train(pool, self.CFG, spec, CyclicalLrSchedule(0.0, 0.0, 10), 0.6, epochs=1)
        assert np.array_equal(state.params.to_vector(), expected.to_vector())

    def test_descent_on_easy_pool(self):
        # easy separation: within-speaker noise well below between-speaker
        # scale; 24 speakers so every epoch covers the full speaker set
        pool = make_pool(n_speakers=24, utts=5, dim=16, seed=4, within=0.4)
        cfg = BackendConfig(dim=16, sdsa_heads=2, ffsa_heads=2, ffsa_hidden=8)
        state = train(pool, cfg, BatchSpec(8, 3, 12), CyclicalLrSchedule(0.3, 0.9, 20),
                      0.6, epochs=30)
        assert state.history[-1].total < state.history[0].total

    def test_two_runs_bit_identical(self, tmp_path):
        pool = make_pool(n_speakers=8, utts=4, seed=2)
        spec = BatchSpec(4, 3, 21)
        sched = CyclicalLrSchedule(1e-3, 3e-3, 5)
        a = train(pool, self.CFG, spec, sched, 0.6, epochs=3)
        b = train(pool, self.CFG, spec, sched, 0.6, epochs=3)
        save_checkpoint(a, str(tmp_path / "a.ckpt"))
        save_checkpoint(b, str(tmp_path / "b.ckpt"))
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_calibration_scale_stays_positive(self):
        pool = make_pool(n_speakers=8, utts=4, seed=3)
        state = train(pool, self.CFG, BatchSpec(4, 3, 5),
                      CyclicalLrSchedule(0.5, 0.5, 10), 0.6, epochs=5)
        assert state.params.scale >= 1e-3

    def test_nan_aborts_with_step_index(self):
        pool = make_pool(n_speakers=6, utts=4, seed=5)
        from svbackend.attention import init_params

        params = init_params(self.CFG, spawn_rng(1, 0))
        params.out[0, 0] = np.nan
        state = TrainState(params=params, config=self.CFG, seed=1)
        with pytest.raises(RuntimeError, match="step 0"):
            train(pool, self.CFG, BatchSpec(3, 3, 1), CyclicalLrSchedule(1e-5, 3e-5, 10),
                  0.6, epochs=1, state=state)

    def test_insufficient_pool_message_suggests_smaller_batch(self):
        pool = make_pool(n_speakers=4, utts=3)
        with pytest.raises(ValueError, match="Reduce speakers_per_batch"):
            train(pool, self.CFG, BatchSpec(8, 5, 0), CyclicalLrSchedule(), 0.6, epochs=1)


class TestCheckpoint:
    CFG = BackendConfig(dim=8, sdsa_heads=2, ffsa_heads=2, ffsa_hidden=5)

    def _trained(self, epochs, seed=31):
        pool = make_pool(n_speakers=8, utts=4, seed=6)
        return train(pool, self.CFG, BatchSpec(4, 3, seed),
                     CyclicalLrSchedule(1e-3, 3e-3, 4), 0.6, epochs=epochs)

    def test_save_load_save_idempotent(self, tmp_path):
        state = self._trained(2)
        p1 = tmp_path / "one.ckpt"
        p2 = tmp_path / "two.ckpt"
        save_checkpoint(state, str(p1))
        save_checkpoint(load_checkpoint(str(p1)), str(p2))
        assert p1.read_bytes() == p2.read_bytes()

    def test_loaded_fields_match(self, tmp_path):
        state = self._trained(3)
        path = tmp_path / "state.ckpt"
        save_checkpoint(state, str(path))
        loaded = load_checkpoint(str(path))
        assert loaded.step == state.step
        assert loaded.epoch == state.epoch
        assert loaded.seed == state.seed
        assert loaded.history == state.history
        assert np.array_equal(loaded.params.to_vector(), state.params.to_vector())

    def test_truncated_file_rejected(self, tmp_path):
        state = self._trained(1)
        path = tmp_path / "state.ckpt"
        save_checkpoint(state, str(path))
        raw = path.read_bytes()
        path.write_bytes(raw[:-9])
        with pytest.raises(ValueError, match="byte offset"):
            load_checkpoint(str(path))

    def test_resume_equals_uninterrupted(self, tmp_path):
        pool = make_pool(n_speakers=8, utts=4, seed=6)
        spec = BatchSpec(4, 3, 77)
        sched = CyclicalLrSchedule(1e-3, 3e-3, 4)

        full = train(pool, self.CFG, spec, sched, 0.6, epochs=5)
        part = train(pool, self.CFG, spec, sched, 0.6, epochs=3)
        path = tmp_path / "part.ckpt"
        save_checkpoint(part, str(path))
        resumed = train(pool, self.CFG, spec, sched, 0.6, epochs=5,
                        state=load_checkpoint(str(path)))

        a, b = tmp_path / "full.ckpt", tmp_path / "resumed.ckpt"
        save_checkpoint(full, str(a))
        save_checkpoint(resumed, str(b))
        assert a.read_bytes() == b.read_bytes()
