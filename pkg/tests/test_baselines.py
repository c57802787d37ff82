import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from svbackend.baselines import (
    LdaProjection,
    _group_indices,
    _scatter_matrices,
    aggregate_enrollment,
    cosine_score,
    lda_apply,
    lda_fit,
    length_normalize,
    load_lda,
    load_plda,
    plda_fit,
    plda_score,
    plda_score_multi,
    save_lda,
    save_plda,
    scoring_matrices,
)
from svbackend.numerics import make_rng


def sample_plda_data(rng, factor, noise_chol, n_speakers, n_utts):
    d = factor.shape[0]
    X, y = [], []
    for i in range(n_speakers):
        h = rng.standard_normal(factor.shape[1])
        for _ in range(n_utts):
            X.append(factor @ h + noise_chol @ rng.standard_normal(d))
            y.append(f"s{i:04d}")
    return np.array(X), y


def joint_gaussian_llr(mean, sigma_tot, sigma_ac, e1, e2):
    """Brute-force same/different-speaker log-likelihood ratio."""
    x = np.concatenate([e1 - mean, e2 - mean])
    zero = np.zeros_like(sigma_tot)
    same = np.block([[sigma_tot, sigma_ac], [sigma_ac, sigma_tot]])
    diff = np.block([[sigma_tot, zero], [zero, sigma_tot]])

    def logpdf(v, C):
        _, logdet = np.linalg.slogdet(C)
        return -0.5 * (v @ np.linalg.solve(C, v) + logdet + v.size * np.log(2.0 * np.pi))

    return logpdf(x, same) - logpdf(x, diff)


class TestCosine:
    def test_self(self):
        e = np.array([0.3, -1.0, 2.0])
        assert cosine_score(e, e) == pytest.approx(1.0, abs=1e-15)

    def test_orthogonal(self):
        assert cosine_score([1.0, 0.0], [0.0, 1.0]) == 0.0

    def test_closed_form(self):
        assert cosine_score([1.0, 0.0], [1.0, 1.0]) == pytest.approx(
            0.7071067811865475, abs=1e-15)

    def test_zero_vector_rejected(self):
        with pytest.raises(ValueError, match="zero vector"):
            cosine_score([0.0, 0.0], [1.0, 0.0])

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1),
           st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
    def test_scale_invariance(self, seed, alpha, beta):
        rng = make_rng(seed)
        a = rng.standard_normal(6)
        b = rng.standard_normal(6)
        assert cosine_score(alpha * a, beta * b) == pytest.approx(
            cosine_score(a, b), abs=1e-12)


class TestAggregateEnrollment:
    def test_single_mean_is_itself(self):
        e = np.array([1.0, 2.0])
        assert np.array_equal(aggregate_enrollment([e], "mean"), e)

    def test_mean_of_two(self):
        out = aggregate_enrollment([[1.0, 0.0], [0.0, 1.0]], "mean")
        assert np.array_equal(out, [0.5, 0.5])

    def test_mean_permutation_commutes(self):
        rng = make_rng(5)
        vecs = [rng.standard_normal(4) for _ in range(5)]
        a = aggregate_enrollment(vecs, "mean")
        b = aggregate_enrollment(vecs[::-1], "mean")
        assert np.allclose(a, b, atol=1e-15)

    def test_concat_features_passthrough_single(self):
        e = np.array([1.0, 2.0, 3.0])
        assert np.array_equal(aggregate_enrollment([e], "concat_features"), e)

    def test_concat_features_rejects_multiple(self):
        with pytest.raises(ValueError, match="concat_features"):
            aggregate_enrollment([[1.0], [2.0]], "concat_features")

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            aggregate_enrollment([], "mean")

    def test_dim_mismatch_rejected(self):
        with pytest.raises(ValueError, match="dimension"):
            aggregate_enrollment([[1.0, 2.0], [1.0]], "mean")


class TestLda:
    def make_clustered(self, seed=0, n_speakers=10, n_utts=8, dim=6):
        rng = make_rng(seed)
        X, y = [], []
        for i in range(n_speakers):
            mu = 2.0 * rng.standard_normal(dim)
            for _ in range(n_utts):
                X.append(mu + rng.standard_normal(dim))
                y.append(f"s{i}")
        return np.array(X), y

    def test_two_point_mass_speakers(self):
        X = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 2.0], [1.0, 2.0]])
        proj = lda_fit(X, ["a", "a", "b", "b"], 1)
        direction = proj.projection[:, 0] / np.linalg.norm(proj.projection[:, 0])
        target = np.array([1.0, 2.0]) / np.sqrt(5.0)
        assert abs(direction @ target) == pytest.approx(1.0, abs=1e-9)

    def test_projected_within_scatter_is_identity(self):
        X, y = self.make_clustered()
        proj = lda_fit(X, y, 4)
        _, s_within, _ = _scatter_matrices(X, _group_indices(y))
        gram = proj.projection.T @ s_within @ proj.projection
        assert np.abs(gram - np.eye(4)).max() < 1e-6

    def test_eigenvalues_descending(self):
        X, y = self.make_clustered(1)
        proj = lda_fit(X, y, 5)
        assert np.all(np.diff(proj.eigenvalues) <= 1e-12)

    def test_top_direction_beats_random_fisher_scan(self):
        X, y = self.make_clustered(2)
        proj = lda_fit(X, y, 1)
        _, s_within, s_between = _scatter_matrices(X, _group_indices(y))

        def fisher(v):
            return (v @ s_between @ v) / (v @ s_within @ v)

        top = fisher(proj.projection[:, 0])
        rng = make_rng(99)
        for _ in range(1000):
            assert fisher(rng.standard_normal(X.shape[1])) <= top * (1.0 + 1e-9)

    def test_random_labels_low_eigenvalues(self):
        rng = make_rng(3)
        X = rng.standard_normal((200, 6))
        y = [f"s{i % 10}" for i in range(200)]
        proj = lda_fit(X, y, 5)
        # no real class structure: generalized eigenvalues sit near the
        # sampling noise floor, far below the clustered-data values (> 1)
        assert proj.eigenvalues.max() < 0.6
        _, s_within, _ = _scatter_matrices(X, _group_indices(y))
        gram = proj.projection.T @ s_within @ proj.projection
        assert np.abs(gram - np.eye(5)).max() < 1e-6

    def test_separability_ordering_preserved(self):
        # 3 speakers: one pair close together, one far; projected distances
        # keep the ordering
        rng = make_rng(4)
        centers = {"a": np.zeros(4), "b": np.array([6.0, 0, 0, 0]), "c": np.array([6.5, 0, 0, 0])}
        X, y = [], []
        for spk, mu in centers.items():
            for _ in range(20):
                X.append(mu + 0.5 * rng.standard_normal(4))
                y.append(spk)
        X = np.array(X)
        proj = lda_fit(X, y, 2)
        Z = lda_apply(proj, X)
        zc = {spk: Z[[i for i, lab in enumerate(y) if lab == spk]].mean(axis=0)
              for spk in centers}
        d_ab = np.linalg.norm(zc["a"] - zc["b"])
        d_ac = np.linalg.norm(zc["a"] - zc["c"])
        d_bc = np.linalg.norm(zc["b"] - zc["c"])
        assert d_bc < d_ab < d_ac

    def test_apply_dimension(self):
        X, y = self.make_clustered(5)
        proj = lda_fit(X, y, 3)
        assert lda_apply(proj, X).shape == (X.shape[0], 3)
        assert lda_apply(proj, X[0]).shape == (3,)

    def test_validation(self):
        X, y = self.make_clustered(6, n_speakers=4)
        with pytest.raises(ValueError, match="n_components"):
            lda_fit(X, y, 5)  # > n_speakers - 1
        with pytest.raises(ValueError, match="2 speakers"):
            lda_fit(X[:8], ["a"] * 8, 1)


class TestPldaFit:
    def test_generative_recovery(self):
        rng = make_rng(42)
        d, latent = 8, 2
        factor = 1.2 * rng.standard_normal((d, latent))
        chol = 0.15 * rng.standard_normal((d, d))
        sigma = chol @ chol.T + 0.5 * np.eye(d)
        X, y = sample_plda_data(rng, factor, np.linalg.cholesky(sigma), 500, 10)
        model = plda_fit(X, y, latent_dim=latent, n_iter=25)
        tot_true = factor @ factor.T + sigma
        ac_true = factor @ factor.T
        assert np.linalg.norm(model.sigma_tot - tot_true) / np.linalg.norm(tot_true) < 0.10
        assert np.linalg.norm(model.sigma_ac - ac_true) / np.linalg.norm(ac_true) < 0.10

    def test_loglik_monotone(self):
        rng = make_rng(1)
        factor = rng.standard_normal((6, 2))
        X, y = sample_plda_data(rng, factor, np.eye(6), 80, 6)
        model = plda_fit(X, y, 2, n_iter=15)
        ll = model.loglik_path
        assert len(ll) == 16
        assert all(b >= a - 1e-8 for a, b in zip(ll, ll[1:]))

    def test_one_iteration_from_truth_is_fixed_pointish(self):
        rng = make_rng(2)
        d, latent = 6, 2
        factor = rng.standard_normal((d, latent))
        sigma = np.eye(d) * 0.8
        X, y = sample_plda_data(rng, factor, np.linalg.cholesky(sigma), 300, 8)
        model = plda_fit(X, y, latent, n_iter=1, init=(factor, sigma))
        assert model.loglik_path[1] >= model.loglik_path[0] - 1e-8

    def test_no_speaker_effect_shrinks_across_class(self):
        rng = make_rng(7)
        X = rng.standard_normal((2000, 8))
        y = [f"s{i // 4}" for i in range(2000)]
        model = plda_fit(X, y, 2, n_iter=50)
        ratio = np.linalg.norm(model.sigma_ac) / np.linalg.norm(model.sigma_tot)
        assert ratio < 0.1

    def test_model_invariants(self):
        rng = make_rng(3)
        factor = rng.standard_normal((5, 2))
        X, y = sample_plda_data(rng, factor, np.eye(5) * 0.7, 60, 5)
        model = plda_fit(X, y, 2, n_iter=10)
        assert np.allclose(model.sigma_tot, model.sigma_tot.T, atol=1e-12)
        assert np.allclose(model.sigma_ac, model.sigma_ac.T, atol=1e-12)
        assert np.all(np.linalg.eigvalsh(model.sigma_tot) > 0)
        assert np.all(np.linalg.eigvalsh(model.sigma_tot - model.sigma_ac) > 0)
        # scoring matrices recomputable from the covariances
        mat_p, mat_q = scoring_matrices(model.sigma_tot, model.sigma_ac)
        assert np.abs(mat_p - model.mat_p).max() < 1e-10
        assert np.abs(mat_q - model.mat_q).max() < 1e-10

    def test_validation(self):
        rng = make_rng(4)
        X = rng.standard_normal((10, 4))
        with pytest.raises(ValueError, match="2 utterances"):
            plda_fit(X, [f"s{i}" for i in range(10)], 2)
        with pytest.raises(ValueError, match="latent_dim"):
            plda_fit(X, ["a"] * 5 + ["b"] * 5, 9)


class TestPldaScore:
    def fitted(self, seed=11):
        rng = make_rng(seed)
        factor = rng.standard_normal((6, 2)) * 1.1
        X, y = sample_plda_data(rng, factor, np.eye(6) * 0.6, 200, 8)
        return plda_fit(X, y, 2, n_iter=20), X

    def test_zero_across_class_scores_zero(self):
        mat_p, mat_q = scoring_matrices(2.0 * np.eye(4), np.zeros((4, 4)))
        assert np.abs(mat_p).max() == 0.0
        assert np.abs(mat_q).max() == 0.0

    def test_symmetry(self):
        model, X = self.fitted()
        rng = make_rng(12)
        for _ in range(20):
            e1 = X[rng.integers(0, len(X))]
            e2 = X[rng.integers(0, len(X))]
            assert plda_score(model, e1, e2) == pytest.approx(
                plda_score(model, e2, e1), abs=1e-10)

    def test_affine_equivalence_to_exact_llr(self):
        # pair scores equal exactly twice the joint-Gaussian log-likelihood
        # ratio plus a trial-independent constant (the quadratic form drops
        # the Gaussian's -1/2)
        model, X = self.fitted()
        rng = make_rng(13)
        diffs = []
        for _ in range(100):
            e1 = X[rng.integers(0, len(X))]
            e2 = X[rng.integers(0, len(X))]
            value = plda_score(model, e1, e2)
            llr = joint_gaussian_llr(model.mean, model.sigma_tot, model.sigma_ac, e1, e2)
            diffs.append(value - 2.0 * llr)
        assert np.max(diffs) - np.min(diffs) < 1e-8

    def test_dim_mismatch(self):
        model, _ = self.fitted()
        with pytest.raises(ValueError, match="dimension"):
            plda_score(model, np.ones(3), np.ones(3))


class TestPldaScoreMulti:
    def fitted(self):
        rng = make_rng(21)
        factor = rng.standard_normal((5, 2))
        X, y = sample_plda_data(rng, factor, np.eye(5) * 0.5, 100, 6)
        return plda_fit(X, y, 2, n_iter=15), X

    def test_single_enrollment_equals_pair_score(self):
        model, X = self.fitted()
        assert plda_score_multi(model, [X[0]], X[1], "mean") == plda_score(model, X[0], X[1])

    def test_repeated_enrollment_equals_single(self):
        model, X = self.fitted()
        got = plda_score_multi(model, [X[0], X[0], X[0]], X[1], "mean")
        assert got == pytest.approx(plda_score(model, X[0], X[1]), abs=1e-10)

    def test_mean_mode_permutation_invariant(self):
        model, X = self.fitted()
        enroll = [X[0], X[1], X[2]]
        a = plda_score_multi(model, enroll, X[3], "mean")
        b = plda_score_multi(model, enroll[::-1], X[3], "mean")
        assert a == pytest.approx(b, abs=1e-12)

    def test_concat_embeddings_mode(self):
        model, X = self.fitted()
        enroll = [X[0], X[1]]
        rep = np.mean([v / np.linalg.norm(v) for v in enroll], axis=0)
        assert plda_score_multi(model, enroll, X[2], "concat_embeddings") == pytest.approx(
            plda_score(model, rep, X[2]), abs=1e-12)

    def test_unknown_mode(self):
        model, X = self.fitted()
        with pytest.raises(ValueError, match="mode"):
            plda_score_multi(model, [X[0]], X[1], "median")


class TestModelFiles:
    def test_plda_round_trip(self, tmp_path):
        rng = make_rng(31)
        factor = rng.standard_normal((5, 2))
        X, y = sample_plda_data(rng, factor, np.eye(5) * 0.4, 50, 5)
        model = plda_fit(X, y, 2, n_iter=5)
        path = tmp_path / "model.plda"
        save_plda(model, str(path))
        loaded = load_plda(str(path))
        for field in ("mean", "sigma_tot", "sigma_ac", "mat_p", "mat_q"):
            assert np.array_equal(getattr(model, field), getattr(loaded, field))
        assert loaded.latent_dim == model.latent_dim
        save_plda(loaded, str(tmp_path / "again.plda"))
        assert path.read_bytes() == (tmp_path / "again.plda").read_bytes()

    def test_lda_round_trip(self, tmp_path):
        rng = make_rng(32)
        proj = LdaProjection(rng.standard_normal((6, 3)), rng.standard_normal(6),
                             np.array([3.0, 2.0, 1.0]))
        path = tmp_path / "proj.lda"
        save_lda(proj, str(path))
        loaded = load_lda(str(path))
        assert np.array_equal(proj.projection, loaded.projection)
        assert np.array_equal(proj.mean, loaded.mean)

    def test_corrupt_magic_rejected(self, tmp_path):
        rng = make_rng(33)
        proj = LdaProjection(rng.standard_normal((4, 2)), rng.standard_normal(4),
                             np.ones(2))
        path = tmp_path / "proj.lda"
        save_lda(proj, str(path))
        raw = bytearray(path.read_bytes())
        raw[2] ^= 0x55
        path.write_bytes(bytes(raw))
        with pytest.raises(ValueError, match="magic"):
            load_lda(str(path))

    def test_truncation_rejected_with_offset(self, tmp_path):
        rng = make_rng(34)
        factor = rng.standard_normal((4, 2))
        X, y = sample_plda_data(rng, factor, np.eye(4) * 0.5, 30, 4)
        model = plda_fit(X, y, 2, n_iter=3)
        path = tmp_path / "model.plda"
        save_plda(model, str(path))
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(ValueError, match="byte offset"):
            load_plda(str(path))


def test_length_normalize():
    rng = make_rng(40)
    X = rng.standard_normal((5, 4))
    out = length_normalize(X)
    assert np.allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-12)
    with pytest.raises(ValueError, match="zero vector"):
        length_normalize(np.zeros(3))
