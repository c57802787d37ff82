"""Balanced-batch assembly, SGD with a triangular cyclical learning rate,
the epoch loop, and training-state checkpoints.

A batch holds M speakers x K utterances. Every utterance takes one turn as
the test trial of its speaker: the speaker's other K-1 utterances form the
positive enrollment set, and the K-1-utterance sets of every other speaker
at the same held-out index form the negatives, so each batch yields M*K
positives and M*K*(M-1) negatives (ratio 1 : M-1).

Determinism: all randomness is derived from the batch-spec seed through
counter-based substreams (stream 0 initializes parameters, stream 1+e
drives epoch e), so training is a pure function of (pool, spec, config),
and resuming from a checkpoint replays the identical trajectory.

Checkpoint layout (``ATNT1``): magic, u64 step, u64 epoch, u64 seed,
u32 epoch-record count, per record u64 epoch + total/bce/ge2e/lr as
little-endian float64, then the parameter blob in the ``ATNB1`` format.
"""

from dataclasses import dataclass, field

import numpy as np

from ._util import BinaryReader, atomic_write
from .attention import (
    AttentionParams,
    BackendConfig,
    _params_blob,
    _read_params_blob,
    ffsa_backward,
    ffsa_forward,
    init_params,
    sdsa_backward,
    sdsa_forward,
    zero_grads,
)
from .data import EmbeddingSet
from .numerics import sigmoid, spawn_rng
from .objectives import combined_loss

TRAINER_MAGIC = b"ATNT1"
MIN_CALIBRATION_SCALE = 1e-3


@dataclass(frozen=True)
class BatchSpec:
    speakers_per_batch: int = 256
    utts_per_speaker: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.speakers_per_batch < 2:
            raise ValueError("speakers_per_batch must be >= 2")
        if self.utts_per_speaker < 2:
            raise ValueError("utts_per_speaker must be >= 2 (one test trial plus enrollment)")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")


@dataclass(frozen=True)
class CyclicalLrSchedule:
    lr_min: float = 1e-5
    lr_max: float = 3e-5
    half_cycle: int = 2000

    def __post_init__(self):
        # lr_min == 0 is allowed so a null-update run can be requested.
        if self.lr_min < 0 or self.lr_max < self.lr_min:
            raise ValueError("need 0 <= lr_min <= lr_max")
        if self.half_cycle < 1:
            raise ValueError("half_cycle must be >= 1")


def lr_at(schedule: CyclicalLrSchedule, step: int) -> float:
    """Triangular wave: lr_min -> lr_max over half_cycle steps, back down,
    period 2 * half_cycle. The wave apexes hit lr_min/lr_max exactly."""
    if step < 0:
        raise ValueError("step must be >= 0")
    half = schedule.half_cycle
    pos = step % (2 * half)
    asc = min(pos, 2 * half - pos)
    if asc == 0:
        return schedule.lr_min
    if asc == half:
        return schedule.lr_max
    return schedule.lr_min + (schedule.lr_max - schedule.lr_min) * (asc / half)


@dataclass
class TrialBatch:
    speaker_ids: list
    utt_ids: list  # M lists of K utterance ids
    emb: np.ndarray  # (M, K, dim)
    trials: list  # (l, m, n, label) index tuples

    def iter_trials(self):
        """Yield (test vector, enrollment matrix, label) records."""
        for l, m, n, label in self.trials:
            enroll = np.delete(self.emb[n], m, axis=0)
            yield self.emb[l, m], enroll, label


def eligible_speakers(pool: EmbeddingSet, utts_per_speaker: int) -> list:
    """Speakers holding at least `utts_per_speaker` utterances, sorted."""
    return sorted(s for s in pool.speakers if len(pool.utterances(s)) >= utts_per_speaker)


def compose_batch(pool: EmbeddingSet, spec: BatchSpec, rng: np.random.Generator,
                  speakers=None) -> TrialBatch:
    """Assemble one balanced batch of verification trials.

    Samples `speakers_per_batch` speakers (or uses the given subset) and
    `utts_per_speaker` embeddings per speaker, then emits every
    (test utterance, enrollment set) combination at matching held-out
    indices: one positive and M-1 negatives per test utterance.
    """
    M, K = spec.speakers_per_batch, spec.utts_per_speaker
    if speakers is None:
        candidates = eligible_speakers(pool, K)
        if len(candidates) < M:
            raise ValueError(
                f"batch needs {M} speakers with >= {K} utterances, pool has "
                f"{len(candidates)} eligible of {len(pool.speakers)} total"
            )
        order = rng.permutation(len(candidates))
        speakers = [candidates[i] for i in order[:M]]
    else:
        speakers = list(speakers)
        if len(speakers) != M:
            raise ValueError(f"explicit speaker subset has {len(speakers)} entries, expected {M}")

    utt_ids = []
    rows = []
    for spk in speakers:
        utts = pool.utterances(spk)
        if len(utts) < K:
            raise ValueError(f"speaker {spk!r} has {len(utts)} utterances, need {K}")
        picks = rng.permutation(len(utts))[:K]
        chosen = [utts[i] for i in picks]
        utt_ids.append(chosen)
        rows.append(pool.matrix_for(spk, chosen))
    emb = np.stack(rows)

    trials = []
    for l in range(M):
        for m in range(K):
            trials.append((l, m, l, True))
            for n in range(M):
                if n != l:
                    trials.append((l, m, n, False))
    return TrialBatch(speakers, utt_ids, emb, trials)


def batch_forward_backward(emb: np.ndarray, params: AttentionParams,
                           config: BackendConfig, loss_weight: float):
    """Loss and parameter gradients for one batch tensor (M, K, dim).

    Returns (LossValue, grads, pair_count) where pair_count = M*K*M is the
    number of scored (test, enrollment) cells.
    """
    M, K, _ = emb.shape
    reps = np.empty((M, K, config.dim))
    traces = [[None] * K for _ in range(M)]
    for n in range(M):
        for m in range(K):
            E = np.delete(emb[n], m, axis=0)
            H, sdsa_tr = sdsa_forward(E, params, config)
            h, ffsa_tr = ffsa_forward(H, params, config)
            reps[n][m] = h
            traces[n][m] = (sdsa_tr, ffsa_tr)

    test_norm = np.linalg.norm(emb, axis=2)
    rep_norm = np.linalg.norm(reps, axis=2)
    if np.any(test_norm == 0.0) or np.any(rep_norm == 0.0):
        raise ValueError("zero-norm embedding or representative vector in batch")
    test_unit = emb / test_norm[:, :, None]
    rep_unit = reps / rep_norm[:, :, None]

    # cos[l, m, n] = <test l,m | representative n,m>
    cos = np.einsum("lmd,nmd->lmn", test_unit, rep_unit)
    P = sigmoid(params.scale * cos + params.offset)

    loss, dP = combined_loss(P, loss_weight)
    if not np.isfinite(loss.total):
        raise FloatingPointError("non-finite loss")

    grads = zero_grads(config)
    ds = dP * P * (1.0 - P)
    grads.scale += float(np.sum(ds * cos))
    grads.offset += float(np.sum(ds))
    dcos = params.scale * ds
    # d/d(rep_unit) then un-normalize per (n, m)
    drep_unit = np.einsum("lmn,lmd->nmd", dcos, test_unit)
    inner = np.sum(drep_unit * rep_unit, axis=2, keepdims=True)
    drep = (drep_unit - rep_unit * inner) / rep_norm[:, :, None]

    for n in range(M):
        for m in range(K):
            sdsa_tr, ffsa_tr = traces[n][m]
            dH = ffsa_backward(ffsa_tr, drep[n, m], params, config, grads)
            sdsa_backward(sdsa_tr, dH, params, config, grads)

    return loss, grads, M * K * M


@dataclass
class EpochStats:
    epoch: int
    total: float
    bce: float
    ge2e: float
    lr: float


@dataclass
class TrainState:
    params: AttentionParams
    config: BackendConfig
    step: int = 0
    epoch: int = 0
    seed: int = 0
    history: list = field(default_factory=list)


def _apply_update(params: AttentionParams, grads: AttentionParams, factor: float):
    for p, g in zip(params.tensors(), grads.tensors()):
        p -= factor * g
    params.scale -= factor * grads.scale
    params.offset -= factor * grads.offset
    if params.scale < MIN_CALIBRATION_SCALE:
        params.scale = MIN_CALIBRATION_SCALE


def train(pool: EmbeddingSet, config: BackendConfig, spec: BatchSpec,
          schedule: CyclicalLrSchedule, loss_weight: float = 0.6,
          epochs: int = 40, state: TrainState = None, log=None) -> TrainState:
    """Run (or resume) SGD training of the attention back-end.

    Each epoch partitions the eligible speakers without replacement into
    groups of `speakers_per_batch` (a trailing remainder is dropped) and
    takes one SGD step per group, scaling the summed-loss gradient by
    lr / pair_count. The calibration scale is clamped positive after every
    step. Passing a checkpointed `state` continues its trajectory exactly.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if pool.dim != config.dim:
        raise ValueError(f"pool dimension {pool.dim} does not match config dim {config.dim}")
    M, K = spec.speakers_per_batch, spec.utts_per_speaker
    candidates = eligible_speakers(pool, K)
    if len(candidates) < M:
        raise ValueError(
            f"training needs at least {M} speakers with >= {K} utterances; pool has "
            f"{len(candidates)}. Reduce speakers_per_batch and/or utts_per_speaker."
        )

    if state is None:
        params = init_params(config, spawn_rng(spec.seed, 0))
        state = TrainState(params=params, config=config, seed=spec.seed)
    elif state.config != config:
        raise ValueError("checkpointed config does not match the requested config")

    while state.epoch < epochs:
        epoch = state.epoch
        rng = spawn_rng(state.seed, 1 + epoch)
        order = rng.permutation(len(candidates))
        groups = [
            [candidates[i] for i in order[g * M:(g + 1) * M]]
            for g in range(len(candidates) // M)
        ]
        total = np.zeros(3)
        pairs_seen = 0
        lr = lr_at(schedule, state.step)
        for group in groups:
            batch = compose_batch(pool, spec, rng, speakers=group)
            try:
                loss, grads, pair_count = batch_forward_backward(
                    batch.emb, state.params, config, loss_weight)
            except (FloatingPointError, ValueError) as exc:
                raise RuntimeError(f"non-finite loss at step {state.step}: {exc}") from None
            lr = lr_at(schedule, state.step)
            _apply_update(state.params, grads, lr / pair_count)
            state.step += 1
            total += (loss.total, loss.bce, loss.ge2e)
            pairs_seen += pair_count
        state.epoch += 1
        stats = EpochStats(
            epoch=state.epoch,
            total=float(total[0] / pairs_seen),
            bce=float(total[1] / pairs_seen),
            ge2e=float(total[2] / pairs_seen),
            lr=float(lr),
        )
        state.history.append(stats)
        if log is not None:
            log(stats)
    return state


def format_log_line(stats: EpochStats) -> str:
    return "\t".join([
        str(stats.epoch),
        repr(stats.total),
        repr(stats.bce),
        repr(stats.ge2e),
        repr(stats.lr),
    ])


def save_checkpoint(state: TrainState, path: str) -> None:
    with atomic_write(path) as fh:
        fh.write(TRAINER_MAGIC)
        fh.write(int(state.step).to_bytes(8, "little"))
        fh.write(int(state.epoch).to_bytes(8, "little"))
        fh.write(int(state.seed).to_bytes(8, "little"))
        fh.write(len(state.history).to_bytes(4, "little"))
        for rec in state.history:
            fh.write(int(rec.epoch).to_bytes(8, "little"))
            fh.write(np.array([rec.total, rec.bce, rec.ge2e, rec.lr], dtype="<f8").tobytes())
        fh.write(_params_blob(state.params, state.config))


def load_checkpoint(path: str) -> TrainState:
    with open(path, "rb") as fh:
        reader = BinaryReader(fh.read(), path)
    reader.expect_magic(TRAINER_MAGIC)
    step = reader.u64()
    epoch = reader.u64()
    seed = reader.u64()
    n_hist = reader.u32()
    history = []
    for _ in range(n_hist):
        e = reader.u64()
        total, bce, ge2e, lr = (reader.f64() for _ in range(4))
        history.append(EpochStats(e, total, bce, ge2e, lr))
    params, config = _read_params_blob(reader)
    reader.expect_end()
    return TrainState(params=params, config=config, step=step, epoch=epoch,
                      seed=seed, history=history)
