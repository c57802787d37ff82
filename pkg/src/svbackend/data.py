"""Embedding-set and trial-list handling plus a synthetic embedding generator.

File formats (all multi-byte integers little-endian):

* Embedding file: magic ``EMBV1``, u32 dim, u32 record count, then per
  record u16 speaker-id length + UTF-8 bytes, u16 utterance-id length +
  UTF-8 bytes, dim x float32. Values are float32 on disk, float64 in
  memory.
* Trial list: text, one line per trial,
  ``enroll-spk<TAB>utt1,utt2,...<TAB>test-utt<TAB>[target|nontarget]``
  where the label column is optional (scoring-only mode).

Readers validate eagerly and never return partially parsed structures.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ._util import BinaryReader, atomic_write
from .numerics import make_rng

EMBEDDING_MAGIC = b"EMBV1"

_RESERVED = ("\t", "\n", "\r", ",")


def _check_id(value: str, what: str) -> str:
    if not value:
        raise ValueError(f"{what} must be a non-empty string")
    if any(ch in value for ch in _RESERVED):
        raise ValueError(f"{what} {value!r} contains a reserved character (tab/comma/newline)")
    if len(value.encode("utf-8")) > 0xFFFF:
        raise ValueError(f"{what} longer than 65535 bytes")
    return value


class EmbeddingSet:
    """Labeled collection of fixed-dimension vectors keyed by (speaker, utterance)."""

    def __init__(self, dim: int):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self.dim = int(dim)
        self._vectors: dict[tuple[str, str], np.ndarray] = {}
        self._by_speaker: dict[str, list[str]] = {}
        self._by_utterance: dict[str, list[tuple[str, str]]] = {}

    def add(self, speaker: str, utterance: str, vector) -> None:
        _check_id(speaker, "speaker-id")
        _check_id(utterance, "utterance-id")
        v = np.asarray(vector, dtype=np.float64)
        if v.shape != (self.dim,):
            raise ValueError(
                f"vector for ({speaker}, {utterance}) has shape {v.shape}, expected ({self.dim},)"
            )
        if not np.all(np.isfinite(v)):
            raise ValueError(f"vector for ({speaker}, {utterance}) has non-finite entries")
        key = (speaker, utterance)
        if key in self._vectors:
            raise ValueError(f"duplicate (speaker-id, utterance-id) pair {key}")
        self._vectors[key] = v
        self._by_speaker.setdefault(speaker, []).append(utterance)
        self._by_utterance.setdefault(utterance, []).append(key)

    def get(self, speaker: str, utterance: str) -> np.ndarray:
        try:
            return self._vectors[(speaker, utterance)]
        except KeyError:
            raise KeyError(f"no embedding for speaker {speaker!r}, utterance {utterance!r}") from None

    def find_utterance(self, utterance: str) -> np.ndarray:
        """Look up a vector by utterance id alone."""
        hits = self._by_utterance.get(utterance, [])
        if not hits:
            raise KeyError(f"no embedding with utterance id {utterance!r}")
        if len(hits) > 1:
            raise KeyError(f"utterance id {utterance!r} is ambiguous across speakers")
        return self._vectors[hits[0]]

    @property
    def speakers(self) -> list[str]:
        return list(self._by_speaker)

    def utterances(self, speaker: str) -> list[str]:
        return list(self._by_speaker.get(speaker, []))

    def items(self):
        return self._vectors.items()

    def __len__(self) -> int:
        return len(self._vectors)

    def __contains__(self, key) -> bool:
        return tuple(key) in self._vectors

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingSet):
            return NotImplemented
        if self.dim != other.dim or len(self) != len(other):
            return False
        return all(
            key in other._vectors and np.array_equal(v, other._vectors[key])
            for key, v in self._vectors.items()
        )

    def matrix_for(self, speaker: str, utterance_ids) -> np.ndarray:
        return np.stack([self.get(speaker, u) for u in utterance_ids])

    def to_arrays(self):
        """Return (X, speaker labels, utterance ids) in insertion order."""
        keys = list(self._vectors)
        X = np.stack([self._vectors[k] for k in keys]) if keys else np.empty((0, self.dim))
        speakers = [k[0] for k in keys]
        utts = [k[1] for k in keys]
        return X, speakers, utts

    @classmethod
    def from_arrays(cls, X, speakers, utterances=None) -> "EmbeddingSet":
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2:
            raise ValueError(f"X must be 2-D, got shape {X.shape}")
        if len(speakers) != X.shape[0]:
            raise ValueError("speakers length does not match number of rows")
        if utterances is None:
            counter: dict[str, int] = {}
            utterances = []
            for spk in speakers:
                counter[spk] = counter.get(spk, 0) + 1
                utterances.append(f"u{counter[spk]:04d}")
        out = cls(X.shape[1])
        for spk, utt, row in zip(speakers, utterances, X):
            out.add(str(spk), str(utt), row)
        return out


@dataclass
class Trial:
    enroll_speaker: str
    enroll_utterances: list[str]
    test_utterance: str
    label: Optional[bool] = None  # True = target


@dataclass
class TrialList:
    trials: list[Trial] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.trials)

    def __iter__(self):
        return iter(self.trials)

    def labeled(self) -> bool:
        return all(t.label is not None for t in self.trials)


def write_embeddings(emb: EmbeddingSet, path: str) -> None:
    with atomic_write(path) as fh:
        fh.write(EMBEDDING_MAGIC)
        fh.write(int(emb.dim).to_bytes(4, "little"))
        fh.write(int(len(emb)).to_bytes(4, "little"))
        for (spk, utt), vec in emb.items():
            spk_b = spk.encode("utf-8")
            utt_b = utt.encode("utf-8")
            fh.write(len(spk_b).to_bytes(2, "little"))
            fh.write(spk_b)
            fh.write(len(utt_b).to_bytes(2, "little"))
            fh.write(utt_b)
            fh.write(vec.astype("<f4").tobytes())


def read_embeddings(path: str) -> EmbeddingSet:
    with open(path, "rb") as fh:
        reader = BinaryReader(fh.read(), path)
    reader.expect_magic(EMBEDDING_MAGIC)
    dim = reader.u32()
    count = reader.u32()
    out = EmbeddingSet(dim)
    for _ in range(count):
        spk = reader.take(reader.u16()).decode("utf-8")
        utt = reader.take(reader.u16()).decode("utf-8")
        raw = reader.take(4 * dim)
        vec = np.frombuffer(raw, dtype="<f4").astype(np.float64)
        out.add(spk, utt, vec)
    reader.expect_end()
    return out


def write_trials(trials: TrialList, path: str) -> None:
    with atomic_write(path, "w") as fh:
        for t in trials:
            _check_id(t.enroll_speaker, "enroll speaker-id")
            if not t.enroll_utterances:
                raise ValueError("trial has an empty enrollment list")
            for u in t.enroll_utterances:
                _check_id(u, "enroll utterance-id")
            _check_id(t.test_utterance, "test utterance-id")
            cols = [t.enroll_speaker, ",".join(t.enroll_utterances), t.test_utterance]
            if t.label is not None:
                cols.append("target" if t.label else "nontarget")
            fh.write("\t".join(cols) + "\n")


def read_trials(path: str) -> TrialList:
    out = TrialList()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) not in (3, 4):
                raise ValueError(f"{path}: line {lineno}: expected 3 or 4 tab-separated columns, got {len(cols)}")
            spk, enroll_csv, test_utt = cols[0], cols[1], cols[2]
            enroll = enroll_csv.split(",")
            if not spk or not test_utt or any(not u for u in enroll):
                raise ValueError(f"{path}: line {lineno}: empty field")
            label = None
            if len(cols) == 4:
                if cols[3] == "target":
                    label = True
                elif cols[3] == "nontarget":
                    label = False
                else:
                    raise ValueError(f"{path}: line {lineno}: label must be 'target' or 'nontarget', got {cols[3]!r}")
            out.trials.append(Trial(spk, enroll, test_utt, label))
    return out


@dataclass
class SyntheticSpec:
    """Hierarchical-Gaussian generator settings.

    Speaker means are drawn N(0, between_scale^2 I); utterances are drawn
    N(mean, s^2 I) with a per-speaker s, either fixed at within_scale or
    drawn uniformly from within_range (heteroscedastic mode).
    """

    n_speakers: int = 20
    utts_per_speaker: int = 10
    dim: int = 16
    between_scale: float = 1.0
    within_scale: float = 0.5
    within_range: Optional[tuple[float, float]] = None
    seed: int = 0

    def validate(self) -> None:
        if self.n_speakers < 1 or self.utts_per_speaker < 1 or self.dim < 1:
            raise ValueError("n_speakers, utts_per_speaker and dim must be >= 1")
        if self.between_scale <= 0 or self.within_scale <= 0:
            raise ValueError("between_scale and within_scale must be positive")
        if self.within_range is not None:
            lo, hi = self.within_range
            if lo <= 0 or hi < lo:
                raise ValueError("within_range must satisfy 0 < lo <= hi")


def generate_synthetic(spec: SyntheticSpec):
    """Draw an EmbeddingSet plus the ground-truth speaker means.

    Returns (EmbeddingSet, dict speaker-id -> true mean). Deterministic per
    seed; the homoscedastic path consumes the same number of draws as a
    collapsed heteroscedastic range, so the two coincide bit-exactly.
    """
    spec.validate()
    rng = make_rng(spec.seed)
    lo, hi = spec.within_range if spec.within_range is not None else (spec.within_scale, spec.within_scale)
    emb = EmbeddingSet(spec.dim)
    means = {}
    for i in range(spec.n_speakers):
        spk = f"s{i:04d}"
        mean = spec.between_scale * rng.standard_normal(spec.dim)
        within = rng.uniform(lo, hi)
        means[spk] = mean
        for j in range(spec.utts_per_speaker):
            vec = mean + within * rng.standard_normal(spec.dim)
            emb.add(spk, f"{spk}-{j:03d}", vec)
    return emb, means


def split_train_eval(emb: EmbeddingSet, eval_speaker_fraction: float,
                     enrollments_per_eval_speaker: int, rng: np.random.Generator):
    """Speaker-disjoint split into (train set, trial list, eval set).

    Each eval speaker gets `enrollments_per_eval_speaker` enrollment
    utterances; its remaining utterances become test trials. The trial list
    is the full cross-product: every eval test utterance scored against
    every eval speaker's enrollment set, labeled by speaker identity.
    """
    if not 0.0 < eval_speaker_fraction < 1.0:
        raise ValueError("eval_speaker_fraction must be in (0, 1)")
    if enrollments_per_eval_speaker < 1:
        raise ValueError("enrollments_per_eval_speaker must be >= 1")
    speakers = emb.speakers
    n_eval = int(round(eval_speaker_fraction * len(speakers)))
    if n_eval < 1 or n_eval >= len(speakers):
        raise ValueError(
            f"eval fraction {eval_speaker_fraction} with {len(speakers)} speakers "
            f"leaves an empty train or eval side"
        )
    order = rng.permutation(len(speakers))
    eval_speakers = sorted(speakers[i] for i in order[:n_eval])
    train_speakers = [s for s in speakers if s not in set(eval_speakers)]

    train = EmbeddingSet(emb.dim)
    for spk in train_speakers:
        for utt in emb.utterances(spk):
            train.add(spk, utt, emb.get(spk, utt))

    eval_set = EmbeddingSet(emb.dim)
    enroll_map: dict[str, list[str]] = {}
    test_map: dict[str, list[str]] = {}
    for spk in eval_speakers:
        utts = emb.utterances(spk)
        if len(utts) <= enrollments_per_eval_speaker:
            raise ValueError(
                f"speaker {spk!r} has {len(utts)} utterances; needs more than "
                f"{enrollments_per_eval_speaker} to hold out test trials"
            )
        picks = rng.permutation(len(utts))
        enroll_map[spk] = sorted(utts[i] for i in picks[:enrollments_per_eval_speaker])
        test_map[spk] = sorted(utts[i] for i in picks[enrollments_per_eval_speaker:])
        for utt in utts:
            if len(emb._by_utterance.get(utt, [])) > 1:
                raise ValueError(
                    f"utterance id {utt!r} is shared by several speakers; trial lists "
                    f"reference test utterances by id alone and need them unique"
                )
            eval_set.add(spk, utt, emb.get(spk, utt))

    trials = TrialList()
    for test_spk in eval_speakers:
        for test_utt in test_map[test_spk]:
            for enroll_spk in eval_speakers:
                trials.trials.append(Trial(
                    enroll_speaker=enroll_spk,
                    enroll_utterances=list(enroll_map[enroll_spk]),
                    test_utterance=test_utt,
                    label=(enroll_spk == test_spk),
                ))
    return train, trials, eval_set
