"""Conventional back-ends: cosine scoring with multi-enrollment handling,
LDA projection, and Gaussian PLDA fitted by EM.

The PLDA model is e = mu + F h + eps with h ~ N(0, I) and eps ~ N(0, Sigma),
giving total covariance F F^T + Sigma and across-class covariance F F^T.
Verification scores are quadratic forms in two derived matrices and are
equal, up to an affine map, to the same/different-speaker Gaussian
log-likelihood ratio.

Model files: magic ``PLDA1`` / ``LDA01``, little-endian u32 dims, then the
tensors as little-endian float64 in declared order (PLDA: mean, total
covariance, across-class covariance, cross matrix P, quadratic matrix Q;
LDA: projection then input mean).

Fitted models are immutable and scoring is pure, so one model may serve
many concurrent scoring calls; fitting itself is single-threaded.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ._util import BinaryReader, atomic_write
from .numerics import as_matrix, as_vector

logger = logging.getLogger(__name__)

PLDA_MAGIC = b"PLDA1"
LDA_MAGIC = b"LDA01"


def cosine_score(a, b) -> float:
    """Cosine similarity of two embeddings, in [-1, 1]."""
    a = as_vector(a, "first embedding")
    b = as_vector(b, "second embedding")
    if a.shape != b.shape:
        raise ValueError(f"embedding shapes differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("zero vector cannot be cosine-scored")
    return float(a @ b) / (na * nb)


def aggregate_enrollment(embeds, mode: str = "mean") -> np.ndarray:
    """Combine enrollment embeddings into one vector.

    ``mean`` averages. ``concat_features`` is a pass-through for an
    embedding already extracted from concatenated audio upstream, so it
    only accepts a single-element list.
    """
    vecs = [as_vector(e, "enrollment embedding") for e in embeds]
    if not vecs:
        raise ValueError("enrollment list is empty")
    dims = {v.shape for v in vecs}
    if len(dims) > 1:
        raise ValueError(f"enrollment embeddings disagree on dimension: {sorted(dims)}")
    if mode == "mean":
        return np.mean(vecs, axis=0)
    if mode == "concat_features":
        if len(vecs) != 1:
            raise ValueError(
                "concat_features expects one precomputed concatenated-audio "
                f"embedding, got {len(vecs)}"
            )
        return vecs[0]
    raise ValueError(f"unknown aggregation mode {mode!r}")


# ---------------------------------------------------------------------------
# LDA


@dataclass
class LdaProjection:
    projection: np.ndarray  # d_in x d_out, within-class whitened
    mean: np.ndarray  # length d_in
    eigenvalues: np.ndarray  # descending, length d_out


def _group_indices(speakers):
    groups: dict[str, list[int]] = {}
    for i, spk in enumerate(speakers):
        groups.setdefault(str(spk), []).append(i)
    return groups


def _scatter_matrices(X, groups):
    mean = X.mean(axis=0)
    d = X.shape[1]
    s_within = np.zeros((d, d))
    s_between = np.zeros((d, d))
    for idx in groups.values():
        block = X[idx]
        mu = block.mean(axis=0)
        centered = block - mu
        s_within += centered.T @ centered
        diff = mu - mean
        s_between += len(idx) * np.outer(diff, diff)
    n = X.shape[0]
    return mean, s_within / n, s_between / n


def lda_fit(X, speakers, n_components: int) -> LdaProjection:
    """Fit a supervised projection maximizing between- over within-speaker
    scatter, via within-class whitening plus a symmetric eigendecomposition.

    Columns are ordered by descending generalized eigenvalue, and the
    projected within-class scatter is the identity.
    """
    X = as_matrix(X, "embedding matrix")
    groups = _group_indices(speakers)
    if len(groups) < 2:
        raise ValueError("LDA needs at least 2 speakers")
    if any(len(idx) < 2 for idx in groups.values()):
        raise ValueError("LDA needs at least 2 utterances per speaker")
    if not 1 <= n_components <= min(X.shape[1], len(groups) - 1):
        raise ValueError(
            f"n_components must be in [1, min(dim, n_speakers - 1)] = "
            f"[1, {min(X.shape[1], len(groups) - 1)}], got {n_components}"
        )
    mean, s_within, s_between = _scatter_matrices(X, groups)
    d = X.shape[1]
    evals, evecs = np.linalg.eigh(s_within)
    if evals[0] <= evals[-1] * 1e-10:
        ridge = 1e-6 * np.trace(s_within) / d
        if ridge <= 0.0:
            # degenerate (point-mass speakers): scale from the total scatter
            ridge = 1e-6 * max(np.trace(s_between) / d, np.finfo(float).tiny)
        logger.warning("within-class scatter is singular; adding ridge %.3e", ridge)
        evals, evecs = np.linalg.eigh(s_within + ridge * np.eye(d))
    whiten = evecs / np.sqrt(evals)
    projected_between = whiten.T @ s_between @ whiten
    projected_between = 0.5 * (projected_between + projected_between.T)
    bvals, bvecs = np.linalg.eigh(projected_between)
    order = np.argsort(bvals)[::-1][:n_components]
    return LdaProjection(
        projection=whiten @ bvecs[:, order],
        mean=mean,
        eigenvalues=bvals[order],
    )


def lda_apply(proj: LdaProjection, x) -> np.ndarray:
    """Center by the training mean, then project."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != proj.mean.shape[0]:
        raise ValueError(
            f"input dimension {x.shape[-1]} does not match projection input "
            f"dimension {proj.mean.shape[0]}"
        )
    return (x - proj.mean) @ proj.projection


# ---------------------------------------------------------------------------
# PLDA


@dataclass
class PldaModel:
    mean: np.ndarray
    sigma_tot: np.ndarray
    sigma_ac: np.ndarray
    mat_p: np.ndarray  # cross term of the pair score
    mat_q: np.ndarray  # quadratic term of the pair score
    latent_dim: int
    factor: Optional[np.ndarray] = None  # d x latent_dim loading, not serialized
    noise: Optional[np.ndarray] = None  # residual covariance, not serialized
    loglik_path: Optional[list] = None


def scoring_matrices(sigma_tot, sigma_ac):
    """Derive the pair-score matrices from the two covariances.

    Uses linear solves against (S_tot - S_ac S_tot^-1 S_ac) instead of
    explicit inverses where possible; both outputs are symmetrized.
    """
    sigma_tot = as_matrix(sigma_tot, "total covariance")
    sigma_ac = as_matrix(sigma_ac, "across-class covariance")
    d = sigma_tot.shape[0]
    tot_inv_ac = np.linalg.solve(sigma_tot, sigma_ac)
    inner = sigma_tot - sigma_ac @ tot_inv_ac
    inner_inv = np.linalg.solve(inner, np.eye(d))
    mat_p = tot_inv_ac @ inner_inv
    mat_q = np.linalg.solve(sigma_tot, np.eye(d)) - inner_inv
    mat_p = 0.5 * (mat_p + mat_p.T)
    mat_q = 0.5 * (mat_q + mat_q.T)
    return mat_p, mat_q


def _speaker_stats(X, speakers):
    groups = _group_indices(speakers)
    if len(groups) < 2:
        raise ValueError("PLDA needs at least 2 speakers")
    if any(len(idx) < 2 for idx in groups.values()):
        raise ValueError("PLDA needs at least 2 utterances per speaker")
    counts = np.array([len(idx) for idx in groups.values()])
    sums = np.stack([X[idx].sum(axis=0) for idx in groups.values()])
    return counts, sums


def _loglik(S_total, counts, sums_c, n_total, factor, noise):
    """Marginal log-likelihood of centered data under (factor, noise)."""
    d = noise.shape[0]
    sign, logdet_noise = np.linalg.slogdet(noise)
    if sign <= 0:
        raise np.linalg.LinAlgError("residual covariance not positive definite")
    noise_inv = np.linalg.solve(noise, np.eye(d))
    fsi = factor.T @ noise_inv  # q x d
    fsif = fsi @ factor
    q = factor.shape[1]
    ll = -0.5 * (n_total * d * np.log(2.0 * np.pi)
                 + n_total * logdet_noise
                 + np.sum(noise_inv * S_total))
    for c in np.unique(counts):
        mask = counts == c
        a = np.eye(q) + c * fsif
        sign_a, logdet_a = np.linalg.slogdet(a)
        if sign_a <= 0:
            raise np.linalg.LinAlgError("posterior precision not positive definite")
        y = fsi @ sums_c[mask].T  # q x n_c
        quad = np.sum(y * np.linalg.solve(a, y))
        ll += -0.5 * (mask.sum() * logdet_a) + 0.5 * quad
    return float(ll)


def plda_fit(X, speakers, latent_dim: int, n_iter: int = 10,
             init=None) -> PldaModel:
    """Fit the two-covariance model by EM with the mean fixed to the pooled
    mean. The log-likelihood is checked to be non-decreasing every
    iteration; a drop beyond 1e-8 aborts as an implementation-bug signal.

    `init` optionally supplies (factor, noise) starting values, e.g. to
    verify the fixed-point property at known parameters.
    """
    X = as_matrix(X, "embedding matrix")
    n, d = X.shape
    if not 1 <= latent_dim <= d:
        raise ValueError(f"latent_dim must be in [1, {d}], got {latent_dim}")
    if n_iter < 1:
        raise ValueError("n_iter must be >= 1")
    counts, sums = _speaker_stats(X, speakers)
    mean = X.mean(axis=0)
    Xc = X - mean
    sums_c = sums - counts[:, None] * mean
    S_total = Xc.T @ Xc

    if init is not None:
        factor = np.array(init[0], dtype=np.float64)
        noise = np.array(init[1], dtype=np.float64)
        if factor.shape != (d, latent_dim) or noise.shape != (d, d):
            raise ValueError("init shapes do not match (dim, latent_dim)")
    else:
        # moment start: factor spans the top between-speaker directions,
        # noise starts at the total covariance
        means_c = sums_c / counts[:, None]
        between = (means_c * counts[:, None]).T @ means_c / counts.sum()
        bvals, bvecs = np.linalg.eigh(between)
        top = np.argsort(bvals)[::-1][:latent_dim]
        factor = bvecs[:, top] * np.sqrt(np.maximum(bvals[top], 1e-12))
        noise = S_total / n

    loglik_path = []
    eye_q = np.eye(latent_dim)
    for _ in range(n_iter):
        try:
            ll = _loglik(S_total, counts, sums_c, n, factor, noise)
        except np.linalg.LinAlgError:
            ridge = 1e-8 * np.trace(noise) / d
            noise = noise + ridge * np.eye(d)
            logger.warning("conditioning residual covariance with ridge %.3e", ridge)
            ll = _loglik(S_total, counts, sums_c, n, factor, noise)
        if loglik_path and ll < loglik_path[-1] - 1e-8:
            raise RuntimeError(
                f"EM log-likelihood decreased from {loglik_path[-1]!r} to {ll!r}; "
                f"this indicates an implementation bug"
            )
        loglik_path.append(ll)

        noise_inv = np.linalg.solve(noise, np.eye(d))
        fsi = factor.T @ noise_inv
        fsif = fsi @ factor
        cross = np.zeros((d, latent_dim))  # sum_n s_n E[h_n]^T
        second = np.zeros((latent_dim, latent_dim))  # sum_n c_n E[h_n h_n^T]
        for c in np.unique(counts):
            mask = counts == c
            a = eye_q + c * fsif
            a_inv = np.linalg.solve(a, eye_q)
            post_means = (a_inv @ (fsi @ sums_c[mask].T)).T  # n_c x q
            cross += sums_c[mask].T @ post_means
            second += c * (mask.sum() * a_inv + post_means.T @ post_means)
        factor = np.linalg.solve(second.T, cross.T).T
        noise = (S_total - factor @ cross.T) / n
        noise = 0.5 * (noise + noise.T)

    ll = _loglik(S_total, counts, sums_c, n, factor, noise)
    if ll < loglik_path[-1] - 1e-8:
        raise RuntimeError(
            f"EM log-likelihood decreased from {loglik_path[-1]!r} to {ll!r}; "
            f"this indicates an implementation bug"
        )
    loglik_path.append(ll)

    sigma_ac = factor @ factor.T
    sigma_tot = sigma_ac + noise
    mat_p, mat_q = scoring_matrices(sigma_tot, sigma_ac)
    return PldaModel(
        mean=mean,
        sigma_tot=sigma_tot,
        sigma_ac=sigma_ac,
        mat_p=mat_p,
        mat_q=mat_q,
        latent_dim=latent_dim,
        factor=factor,
        noise=noise,
        loglik_path=loglik_path,
    )


def plda_score(model: PldaModel, e_i, e_j) -> float:
    """Pair score: x^T Q x + y^T Q y + 2 x^T P y on mean-centered inputs."""
    a = as_vector(e_i, "first embedding")
    b = as_vector(e_j, "second embedding")
    d = model.mean.shape[0]
    if a.shape[0] != d or b.shape[0] != d:
        raise ValueError(
            f"embedding dimensions {a.shape[0]}/{b.shape[0]} do not match "
            f"model dimension {d}"
        )
    x = a - model.mean
    y = b - model.mean
    return float(x @ model.mat_q @ x + y @ model.mat_q @ y + 2.0 * (x @ model.mat_p @ y))


def plda_score_multi(model: PldaModel, enroll, test, mode: str = "mean") -> float:
    """Score a multi-enrollment trial by reducing the enrollment list to a
    single vector: plain averaging, or averaging after length-normalizing
    each embedding (``concat_embeddings``)."""
    vecs = [as_vector(e, "enrollment embedding") for e in enroll]
    if not vecs:
        raise ValueError("enrollment list is empty")
    if mode == "mean":
        rep = np.mean(vecs, axis=0)
    elif mode == "concat_embeddings":
        norms = [np.linalg.norm(v) for v in vecs]
        if any(n == 0.0 for n in norms):
            raise ValueError("zero vector in enrollment list")
        rep = np.mean([v / n for v, n in zip(vecs, norms)], axis=0)
    else:
        raise ValueError(f"unknown multi-enrollment mode {mode!r}")
    return plda_score(model, rep, test)


def length_normalize(x) -> np.ndarray:
    """Scale rows (or a single vector) to unit norm."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("zero vector cannot be length-normalized")
    return x / norms


# ---------------------------------------------------------------------------
# model files


def save_plda(model: PldaModel, path: str) -> None:
    d = model.mean.shape[0]
    with atomic_write(path) as fh:
        fh.write(PLDA_MAGIC)
        fh.write(int(d).to_bytes(4, "little"))
        fh.write(int(model.latent_dim).to_bytes(4, "little"))
        for t in (model.mean, model.sigma_tot, model.sigma_ac, model.mat_p, model.mat_q):
            fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes())


def load_plda(path: str) -> PldaModel:
    with open(path, "rb") as fh:
        reader = BinaryReader(fh.read(), path)
    reader.expect_magic(PLDA_MAGIC)
    d = reader.u32()
    latent_dim = reader.u32()

    def tensor(*shape):
        n = int(np.prod(shape))
        return np.frombuffer(reader.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)

    mean = tensor(d)
    sigma_tot = tensor(d, d)
    sigma_ac = tensor(d, d)
    mat_p = tensor(d, d)
    mat_q = tensor(d, d)
    reader.expect_end()
    return PldaModel(mean, sigma_tot, sigma_ac, mat_p, mat_q, latent_dim)


def save_lda(proj: LdaProjection, path: str) -> None:
    d_in, d_out = proj.projection.shape
    with atomic_write(path) as fh:
        fh.write(LDA_MAGIC)
        fh.write(int(d_in).to_bytes(4, "little"))
        fh.write(int(d_out).to_bytes(4, "little"))
        fh.write(np.ascontiguousarray(proj.projection, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(proj.mean, dtype="<f8").tobytes())


def load_lda(path: str) -> LdaProjection:
    with open(path, "rb") as fh:
        reader = BinaryReader(fh.read(), path)
    reader.expect_magic(LDA_MAGIC)
    d_in = reader.u32()
    d_out = reader.u32()
    projection = np.frombuffer(reader.take(8 * d_in * d_out), dtype="<f8")
    projection = projection.astype(np.float64).reshape(d_in, d_out)
    mean = np.frombuffer(reader.take(8 * d_in), dtype="<f8").astype(np.float64)
    reader.expect_end()
    return LdaProjection(projection=projection, mean=mean,
                         eigenvalues=np.full(d_out, np.nan))
