"""Attention back-end: self-attention over stacked enrollment embeddings,
feed-forward attentive aggregation to one representative vector, and
calibrated cosine scoring.

Forward passes cache every intermediate needed by the analytic backward
passes; no autodiff is involved. Parameters are immutable during scoring,
so one parameter set may serve many concurrent trials.

Checkpoint layout (``ATNB1``): magic, then dim / sdsa_heads / ffsa_heads /
ffsa_hidden as little-endian u32, then every tensor as little-endian
float64 in declaration order (per SDSA head: query, key, value weights;
output weights; per FFSA head: hidden weights, score vector; calibration
scale and offset).
"""

from dataclasses import dataclass

import numpy as np

from ._util import BinaryReader, atomic_write
from .numerics import as_matrix, as_vector, sigmoid, softmax_rows, tanh_elem

PARAMS_MAGIC = b"ATNB1"


@dataclass(frozen=True)
class BackendConfig:
    """Shape hyperparameters of the back-end network."""

    dim: int = 512
    sdsa_heads: int = 4
    ffsa_heads: int = 4
    ffsa_hidden: int = 64

    def __post_init__(self):
        for name in ("dim", "sdsa_heads", "ffsa_heads", "ffsa_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.dim % self.sdsa_heads:
            raise ValueError(
                f"sdsa_heads ({self.sdsa_heads}) must divide dim ({self.dim})"
            )
        if self.dim % self.ffsa_heads:
            raise ValueError(
                f"ffsa_heads ({self.ffsa_heads}) must divide dim ({self.dim})"
            )

    @property
    def sdsa_width(self) -> int:
        return self.dim // self.sdsa_heads

    @property
    def ffsa_width(self) -> int:
        return self.dim // self.ffsa_heads


@dataclass
class AttentionParams:
    """All trainable tensors of the back-end, plus calibration scalars."""

    query: list  # per SDSA head, dim x sdsa_width
    key: list
    value: list
    out: np.ndarray  # dim x dim
    ffsa_w: list  # per FFSA head, ffsa_hidden x ffsa_width
    ffsa_v: list  # per FFSA head, length ffsa_hidden
    scale: float  # calibration slope, kept positive during training
    offset: float

    def copy(self) -> "AttentionParams":
        return AttentionParams(
            [w.copy() for w in self.query],
            [w.copy() for w in self.key],
            [w.copy() for w in self.value],
            self.out.copy(),
            [w.copy() for w in self.ffsa_w],
            [v.copy() for v in self.ffsa_v],
            self.scale,
            self.offset,
        )

    def tensors(self):
        """Tensors in checkpoint declaration order (scalars excluded)."""
        for q, k, v in zip(self.query, self.key, self.value):
            yield q
            yield k
            yield v
        yield self.out
        for w, v in zip(self.ffsa_w, self.ffsa_v):
            yield w
            yield v

    def to_vector(self) -> np.ndarray:
        parts = [t.ravel() for t in self.tensors()]
        parts.append(np.array([self.scale, self.offset]))
        return np.concatenate(parts)


def _shapes(config: BackendConfig):
    d, dh = config.dim, config.sdsa_width
    shapes = []
    for _ in range(config.sdsa_heads):
        shapes += [(d, dh)] * 3
    shapes.append((d, d))
    for _ in range(config.ffsa_heads):
        shapes += [(config.ffsa_hidden, config.ffsa_width), (config.ffsa_hidden,)]
    return shapes


def params_from_vector(vec: np.ndarray, config: BackendConfig) -> AttentionParams:
    vec = np.asarray(vec, dtype=np.float64)
    shapes = _shapes(config)
    expected = sum(int(np.prod(s)) for s in shapes) + 2
    if vec.size != expected:
        raise ValueError(f"parameter vector has {vec.size} entries, expected {expected}")
    tensors = []
    pos = 0
    for shape in shapes:
        n = int(np.prod(shape))
        tensors.append(vec[pos:pos + n].reshape(shape).copy())
        pos += n
    it = iter(tensors)
    query, key, value = [], [], []
    for _ in range(config.sdsa_heads):
        query.append(next(it))
        key.append(next(it))
        value.append(next(it))
    out = next(it)
    ffsa_w, ffsa_v = [], []
    for _ in range(config.ffsa_heads):
        ffsa_w.append(next(it))
        ffsa_v.append(next(it))
    return AttentionParams(query, key, value, out, ffsa_w, ffsa_v,
                           float(vec[pos]), float(vec[pos + 1]))


def zero_grads(config: BackendConfig) -> AttentionParams:
    n = sum(int(np.prod(s)) for s in _shapes(config)) + 2
    return params_from_vector(np.zeros(n), config)


def init_params(config: BackendConfig, rng: np.random.Generator) -> AttentionParams:
    """Fan-in uniform init for all weight tensors; calibration starts at
    scale 10, offset -5 so initial probabilities span a useful range."""
    def uniform(shape, fan_in):
        lim = np.sqrt(1.0 / fan_in)
        return rng.uniform(-lim, lim, size=shape)

    query, key, value = [], [], []
    for _ in range(config.sdsa_heads):
        query.append(uniform((config.dim, config.sdsa_width), config.dim))
        key.append(uniform((config.dim, config.sdsa_width), config.dim))
        value.append(uniform((config.dim, config.sdsa_width), config.dim))
    out = uniform((config.dim, config.dim), config.dim)
    ffsa_w, ffsa_v = [], []
    for _ in range(config.ffsa_heads):
        # hidden weights consume width-sized row slices; the score vector
        # consumes hidden-sized tanh features
        ffsa_w.append(uniform((config.ffsa_hidden, config.ffsa_width), config.ffsa_width))
        ffsa_v.append(uniform((config.ffsa_hidden,), config.ffsa_hidden))
    return AttentionParams(query, key, value, out, ffsa_w, ffsa_v, 10.0, -5.0)


def _check_input(E, config, what="enrollment matrix"):
    E = as_matrix(E, what)
    if E.shape[0] < 1:
        raise ValueError(f"{what} needs at least one row")
    if E.shape[1] != config.dim:
        raise ValueError(
            f"{what} has {E.shape[1]} columns, config expects dim {config.dim}"
        )
    return E


def sdsa_forward(E, params: AttentionParams, config: BackendConfig):
    """Multi-head scaled-dot self-attention with a residual connection.

    Returns (H, trace) with H of the same shape as E.
    """
    E = _check_input(E, config)
    inv_sqrt = 1.0 / np.sqrt(config.sdsa_width)
    heads = []
    trace_heads = []
    for i in range(config.sdsa_heads):
        Q = E @ params.query[i]
        K = E @ params.key[i]
        V = E @ params.value[i]
        A = softmax_rows(Q @ K.T * inv_sqrt)
        Hi = A @ V
        heads.append(Hi)
        trace_heads.append({"Q": Q, "K": K, "V": V, "A": A})
    concat = np.concatenate(heads, axis=1)
    H = concat @ params.out + E
    trace = {"E": E, "heads": trace_heads, "concat": concat, "inv_sqrt": inv_sqrt}
    return H, trace


def _softmax_rows_backward(A, dA):
    # rows of A are softmax outputs: ds = A * (dA - sum(A*dA))
    inner = np.sum(A * dA, axis=1, keepdims=True)
    return A * (dA - inner)


def sdsa_backward(trace, dH, params: AttentionParams, config: BackendConfig, grads: AttentionParams):
    """Accumulate parameter gradients into `grads`; returns dE."""
    E = trace["E"]
    concat = trace["concat"]
    grads.out += concat.T @ dH
    dconcat = dH @ params.out.T
    dE = dH.copy()  # residual path
    w = config.sdsa_width
    for i, th in enumerate(trace["heads"]):
        dHi = dconcat[:, i * w:(i + 1) * w]
        A, Q, K, V = th["A"], th["Q"], th["K"], th["V"]
        dA = dHi @ V.T
        dV = A.T @ dHi
        dS = _softmax_rows_backward(A, dA) * trace["inv_sqrt"]
        dQ = dS @ K
        dK = dS.T @ Q
        grads.query[i] += E.T @ dQ
        grads.key[i] += E.T @ dK
        grads.value[i] += E.T @ dV
        dE += dQ @ params.query[i].T + dK @ params.key[i].T + dV @ params.value[i].T
    return dE


def ffsa_forward(H, params: AttentionParams, config: BackendConfig):
    """Aggregate the rows of H into one vector via per-head attentive pooling.

    Each head scores the rows of its column slice and takes the convex
    combination given by the softmax of those scores; head outputs are
    concatenated.
    """
    H = _check_input(H, config, "aggregation input")
    w = config.ffsa_width
    parts = []
    trace_heads = []
    for j in range(config.ffsa_heads):
        Hj = H[:, j * w:(j + 1) * w]
        U = params.ffsa_w[j] @ Hj.T            # hidden x K
        T = tanh_elem(U)
        z = params.ffsa_v[j] @ T               # length K
        weights = softmax_rows(z[None, :])[0]
        hj = weights @ Hj
        parts.append(hj)
        trace_heads.append({"Hj": Hj, "T": T, "weights": weights})
    h = np.concatenate(parts)
    trace = {"heads": trace_heads}
    return h, trace


def ffsa_backward(trace, dh, params: AttentionParams, config: BackendConfig, grads: AttentionParams):
    """Accumulate FFSA parameter gradients into `grads`; returns dH."""
    w = config.ffsa_width
    dH_parts = []
    for j, th in enumerate(trace["heads"]):
        Hj, T, weights = th["Hj"], th["T"], th["weights"]
        dhj = dh[j * w:(j + 1) * w]
        dweights = Hj @ dhj
        dHj = np.outer(weights, dhj)
        dz = weights * (dweights - float(weights @ dweights))
        grads.ffsa_v[j] += T @ dz
        dT = np.outer(params.ffsa_v[j], dz)
        dU = dT * (1.0 - T * T)
        grads.ffsa_w[j] += dU @ Hj
        dHj += dU.T @ params.ffsa_w[j]
        dH_parts.append(dHj)
    return np.concatenate(dH_parts, axis=1)


def score(test, rep, params: AttentionParams):
    """Calibrated cosine score between a test embedding and a representative
    vector: probability sigmoid(scale * cos + offset).

    Returns (P, trace); trace["s"] is the pre-sigmoid score.
    """
    q = as_vector(test, "test embedding")
    h = as_vector(rep, "representative vector")
    if q.shape != h.shape:
        raise ValueError(f"test shape {q.shape} does not match representative shape {h.shape}")
    nq = np.linalg.norm(q)
    nh = np.linalg.norm(h)
    if nq == 0.0 or nh == 0.0:
        raise ValueError("zero-norm embedding cannot be cosine-scored")
    cos = float(q @ h) / (nq * nh)
    s = params.scale * cos + params.offset
    P = sigmoid(s)
    trace = {"q": q, "h": h, "nq": nq, "nh": nh, "cos": cos, "s": s, "P": P}
    return P, trace


def score_backward(trace, dP, params: AttentionParams, grads: AttentionParams):
    """Returns (dq, dh) and accumulates calibration gradients into `grads`."""
    P, cos = trace["P"], trace["cos"]
    ds = dP * P * (1.0 - P)
    grads.scale += ds * cos
    grads.offset += ds
    dcos = ds * params.scale
    q, h, nq, nh = trace["q"], trace["h"], trace["nq"], trace["nh"]
    dq = dcos * (h / (nq * nh) - cos * q / (nq * nq))
    dh = dcos * (q / (nq * nh) - cos * h / (nh * nh))
    return dq, dh


def backend_forward(enroll, test, params: AttentionParams, config: BackendConfig):
    """Full pipeline: enrollment matrix -> self-attention -> aggregation ->
    calibrated cosine against the test embedding.

    `enroll` is a K x dim matrix (or list of K vectors); returns (P, trace).
    """
    E = np.stack([as_vector(e, "enrollment embedding") for e in enroll]) \
        if not isinstance(enroll, np.ndarray) else np.asarray(enroll, dtype=np.float64)
    H, sdsa_trace = sdsa_forward(E, params, config)
    h, ffsa_trace = ffsa_forward(H, params, config)
    P, score_trace = score(test, h, params)
    trace = {"sdsa": sdsa_trace, "ffsa": ffsa_trace, "score": score_trace}
    return P, trace


def backend_backward(trace, dP, params: AttentionParams, config: BackendConfig):
    """Analytic gradients of the full pipeline.

    Returns (grads, dE, dq): parameter gradients plus gradients w.r.t. the
    enrollment matrix and the test embedding.
    """
    grads = zero_grads(config)
    dq, dh = score_backward(trace["score"], dP, params, grads)
    dH = ffsa_backward(trace["ffsa"], dh, params, config, grads)
    dE = sdsa_backward(trace["sdsa"], dH, params, config, grads)
    return grads, dE, dq


def save_params(params: AttentionParams, config: BackendConfig, path: str) -> None:
    with atomic_write(path) as fh:
        fh.write(_params_blob(params, config))


def _params_blob(params: AttentionParams, config: BackendConfig) -> bytes:
    header = b"".join(
        int(v).to_bytes(4, "little")
        for v in (config.dim, config.sdsa_heads, config.ffsa_heads, config.ffsa_hidden)
    )
    body = b"".join(np.ascontiguousarray(t, dtype="<f8").tobytes() for t in params.tensors())
    tail = np.array([params.scale, params.offset], dtype="<f8").tobytes()
    return PARAMS_MAGIC + header + body + tail


def load_params(path: str):
    with open(path, "rb") as fh:
        reader = BinaryReader(fh.read(), path)
    params, config = _read_params_blob(reader)
    reader.expect_end()
    return params, config


def _read_params_blob(reader: BinaryReader):
    reader.expect_magic(PARAMS_MAGIC)
    dim = reader.u32()
    d1 = reader.u32()
    d2 = reader.u32()
    hidden = reader.u32()
    config = BackendConfig(dim=dim, sdsa_heads=d1, ffsa_heads=d2, ffsa_hidden=hidden)
    values = []
    for shape in _shapes(config):
        n = int(np.prod(shape))
        raw = reader.take(8 * n)
        values.append(np.frombuffer(raw, dtype="<f8").astype(np.float64))
    scale = reader.f64()
    offset = reader.f64()
    vec = np.concatenate(values + [np.array([scale, offset])])
    return params_from_vector(vec, config), config
