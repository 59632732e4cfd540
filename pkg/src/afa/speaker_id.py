"""Voice-embedding speaker registry: enrollment, identification, validation.

Embeddings arrive pre-computed (e.g. from an ECAPA-style encoder). Each
enrolled speaker is matched through the L2-normalised mean of their enrollment
vectors; a probe below the match threshold mints a new user id.
"""

from __future__ import annotations

import json
import logging
import math
import re
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    CorruptStore,
    DegenerateVector,
    DimMismatch,
    DuplicateEnrollment,
    InsufficientSamples,
)

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.70
NO_MATCH_SIMILARITY = -1.0


def as_vector(values: Iterable[float] | np.ndarray) -> np.ndarray:
    """Coerce to a finite, non-empty 1-D float64 array."""
    vec = np.asarray(values, dtype=np.float64)
    if vec.ndim != 1 or vec.size == 0:
        raise DimMismatch(f"expected a non-empty 1-D vector, got shape {vec.shape}")
    if not np.all(np.isfinite(vec)):
        raise ValueError("embedding contains non-finite values")
    return vec


def normalize(vec: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise DegenerateVector("cannot normalise an all-zero vector")
    return vec / norm


def cosine_similarity(a, b) -> float:
    """dot(a, b) / (|a| |b|), clipped to [-1, 1] against rounding."""
    a = as_vector(a)
    b = as_vector(b)
    if a.shape != b.shape:
        raise DimMismatch(f"dimension mismatch: {a.size} vs {b.size}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise DegenerateVector("cosine similarity of an all-zero vector is undefined")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


@dataclass(frozen=True)
class SpeakerEnrollment:
    user_id: str
    embeddings: np.ndarray  # (n, dim)
    centroid: np.ndarray  # (dim,), unit norm

    @classmethod
    def from_embeddings(cls, user_id: str, embeddings: Sequence) -> "SpeakerEnrollment":
        if len(embeddings) == 0:
            raise InsufficientSamples(f"no embeddings supplied for {user_id!r}")
        rows = [as_vector(e) for e in embeddings]
        dims = {r.size for r in rows}
        if len(dims) != 1:
            raise DimMismatch(f"mixed embedding dimensions for {user_id!r}: {sorted(dims)}")
        mat = np.vstack(rows)
        mat.setflags(write=False)
        centroid = normalize(mat.mean(axis=0))
        centroid.setflags(write=False)
        return cls(user_id, mat, centroid)

    @property
    def dim(self) -> int:
        return int(self.centroid.size)


@dataclass(frozen=True)
class Matched:
    user_id: str


@dataclass(frozen=True)
class NewSpeaker:
    user_id: str


@dataclass(frozen=True)
class IdentityResolution:
    outcome: Matched | NewSpeaker
    similarity: float
    threshold_used: float

    @property
    def user_id(self) -> str:
        return self.outcome.user_id

    @property
    def is_new(self) -> bool:
        return isinstance(self.outcome, NewSpeaker)


class SpeakerRegistry:
    """Thread-safe registry of enrolled speakers.

    Reads work on an immutable snapshot (ids, centroid matrix) that writers
    swap atomically, so concurrent ``identify`` calls never take the lock
    unless they have to register a new speaker.
    """

    def __init__(self, dim: int | None = None, id_prefix: str = "user-"):
        self._dim = dim
        self.id_prefix = id_prefix
        self._enrollments: dict[str, SpeakerEnrollment] = {}
        self._snapshot: tuple[tuple[str, ...], np.ndarray | None] = ((), None)
        self._counter = 0
        self._lock = threading.RLock()

    # -- inspection -------------------------------------------------------
    @property
    def dim(self) -> int | None:
        return self._dim

    def __len__(self) -> int:
        return len(self._enrollments)

    def __contains__(self, user_id: object) -> bool:
        return user_id in self._enrollments

    def __getitem__(self, user_id: str) -> SpeakerEnrollment:
        return self._enrollments[user_id]

    def user_ids(self) -> list[str]:
        return list(self._snapshot[0])

    # -- writes -----------------------------------------------------------
    def enroll(self, user_id: str, embeddings: Sequence) -> SpeakerEnrollment:
        enrollment = SpeakerEnrollment.from_embeddings(user_id, embeddings)
        with self._lock:
            if user_id in self._enrollments:
                raise DuplicateEnrollment(f"user {user_id!r} is already enrolled")
            self._check_dim(enrollment.dim)
            self._add(enrollment)
        return enrollment

    def _check_dim(self, dim: int) -> None:
        if self._dim is not None and dim != self._dim:
            raise DimMismatch(f"registry dim is {self._dim}, got {dim}")

    def _add(self, enrollment: SpeakerEnrollment) -> None:
        if self._dim is None:
            self._dim = enrollment.dim
        self._enrollments[enrollment.user_id] = enrollment
        ids = tuple(sorted(self._enrollments))
        mat = np.vstack([self._enrollments[u].centroid for u in ids])
        mat.setflags(write=False)
        self._snapshot = (ids, mat)
        self._bump_counter(enrollment.user_id)

    def _bump_counter(self, user_id: str) -> None:
        m = re.fullmatch(re.escape(self.id_prefix) + r"(\d+)", user_id)
        if m:
            self._counter = max(self._counter, int(m.group(1)))

    def _mint_id(self) -> str:
        while True:
            self._counter += 1
            candidate = f"{self.id_prefix}{self._counter:04d}"
            if candidate not in self._enrollments:
                return candidate

    # -- reads ------------------------------------------------------------
    def similarities(self, probe) -> tuple[tuple[str, ...], np.ndarray]:
        """Cosine similarity of ``probe`` against every centroid (ids sorted)."""
        vec = as_vector(probe)
        ids, mat = self._snapshot
        if mat is None:
            return ids, np.empty(0)
        self._check_dim(vec.size)
        unit = normalize(vec)
        # rounding absorbs last-ulp noise so a centroid always scores exactly 1.0 against itself
        return ids, np.clip(np.round(mat @ unit, 12), -1.0, 1.0)

    def best_match(self, probe) -> tuple[str | None, float]:
        ids, sims = self.similarities(probe)
        if len(ids) == 0:
            return None, NO_MATCH_SIMILARITY
        best = float(sims.max())
        # ids are sorted, so the first index at the maximum is the lexicographic tie-break
        idx = int(np.flatnonzero(sims == best)[0])
        return ids[idx], best

    def identify(
        self, probe, threshold: float = DEFAULT_THRESHOLD, register_new: bool = True
    ) -> IdentityResolution:
        vec = as_vector(probe)
        user_id, sim = self.best_match(vec)
        if user_id is not None and sim >= threshold:
            return IdentityResolution(Matched(user_id), sim, threshold)
        if not register_new:
            return IdentityResolution(NewSpeaker(""), sim, threshold)
        with self._lock:
            # another writer may have registered a matching speaker meanwhile
            user_id, sim = self.best_match(vec)
            if user_id is not None and sim >= threshold:
                return IdentityResolution(Matched(user_id), sim, threshold)
            new_id = self._mint_id()
            enrollment = SpeakerEnrollment.from_embeddings(new_id, [vec])
            self._check_dim(enrollment.dim)
            self._add(enrollment)
        logger.info("assigned new speaker id %s (best similarity %.3f)", new_id, sim)
        return IdentityResolution(NewSpeaker(new_id), sim, threshold)

    # -- persistence ------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "dim": self._dim,
            "speakers": [
                {
                    "user_id": e.user_id,
                    "embeddings": e.embeddings.tolist(),
                    "centroid": e.centroid.tolist(),
                }
                for e in (self._enrollments[u] for u in sorted(self._enrollments))
            ],
        }

    @classmethod
    def from_dict(cls, data: Mapping, id_prefix: str = "user-") -> "SpeakerRegistry":
        registry = cls(dim=data.get("dim"), id_prefix=id_prefix)
        for entry in data.get("speakers", []):
            registry.enroll(str(entry["user_id"]), entry["embeddings"])
        return registry

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(json.dumps(self.to_dict()), encoding="utf-8")
        tmp.replace(path)

    @classmethod
    def load(cls, path: str | Path, id_prefix: str = "user-") -> "SpeakerRegistry":
        raw = Path(path).read_bytes()
        try:
            data = json.loads(raw)
            return cls.from_dict(data, id_prefix=id_prefix)
        except json.JSONDecodeError as exc:
            raise CorruptStore(f"malformed registry {path}", _byte_offset(raw, exc.pos)) from exc
        except (KeyError, TypeError) as exc:
            raise CorruptStore(f"malformed registry {path}: {exc}") from exc


def _byte_offset(raw: bytes, char_pos: int) -> int:
    return len(raw.decode("utf-8", errors="replace")[:char_pos].encode("utf-8"))


def enroll(user_id: str, embeddings: Sequence, registry: SpeakerRegistry) -> SpeakerRegistry:
    registry.enroll(user_id, embeddings)
    return registry


def identify(probe, registry: SpeakerRegistry, threshold: float = DEFAULT_THRESHOLD) -> IdentityResolution:
    return registry.identify(probe, threshold)


def read_embeddings_jsonl(path: str | Path) -> dict[str, list[list[float]]]:
    """Group ``{"speaker": ..., "embedding": [...]}`` lines by speaker, file order kept."""
    grouped: dict[str, list[list[float]]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                grouped.setdefault(str(obj["speaker"]), []).append([float(x) for x in obj["embedding"]])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise CorruptStore(f"{path}:{lineno}: bad embedding line ({exc})") from exc
    return grouped


# -- synthetic validation ---------------------------------------------------


@dataclass
class SyntheticSpeaker:
    """A unit base direction; utterances are the base plus isotropic noise."""

    name: str
    base: np.ndarray

    def sample(self, n: int, noise_scale: float, rng: np.random.Generator) -> np.ndarray:
        dim = self.base.size
        # per-coordinate sigma chosen so the noise vector has expected norm ~ noise_scale
        noise = rng.normal(0.0, noise_scale / math.sqrt(dim), size=(n, dim))
        out = self.base[None, :] + noise
        return out / np.linalg.norm(out, axis=1, keepdims=True)


def synthesize_speakers(
    n_speakers: int,
    dim: int = 192,
    rng: np.random.Generator | None = None,
    orthogonal: bool = True,
) -> list[SyntheticSpeaker]:
    if n_speakers > dim and orthogonal:
        raise ValueError("cannot draw more orthogonal bases than dimensions")
    rng = rng or np.random.default_rng(0)
    if orthogonal:
        bases = np.eye(dim)[:n_speakers]
    else:
        raw = rng.normal(size=(n_speakers, dim))
        bases = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    return [SyntheticSpeaker(f"speaker-{i:02d}", bases[i].copy()) for i in range(n_speakers)]


@dataclass(frozen=True)
class ValidationResult:
    accuracy: float
    mean_similarity: float
    decisions: int
    correct: int


def validate_identification(
    samples: Mapping[str, np.ndarray],
    enroll_n: int,
    test_n: int,
    threshold: float = DEFAULT_THRESHOLD,
) -> ValidationResult:
    """Enroll each speaker on its first ``enroll_n`` vectors and identify the next ``test_n``.

    A held-out probe counts as correct only when it is Matched to its own
    speaker; probes that fall under the threshold count as wrong and are not
    registered, so every decision sees the same registry.
    """
    registry = SpeakerRegistry()
    for name, vecs in samples.items():
        if len(vecs) < enroll_n + test_n:
            raise InsufficientSamples(
                f"{name!r} has {len(vecs)} vectors, need {enroll_n + test_n}"
            )
        registry.enroll(name, vecs[:enroll_n])
    correct = 0
    sims = []
    for name, vecs in samples.items():
        for probe in vecs[enroll_n : enroll_n + test_n]:
            res = registry.identify(probe, threshold, register_new=False)
            sims.append(res.similarity)
            correct += isinstance(res.outcome, Matched) and res.user_id == name
    total = len(sims)
    return ValidationResult(
        accuracy=correct / total if total else 0.0,
        mean_similarity=float(np.mean(sims)) if sims else 0.0,
        decisions=total,
        correct=correct,
    )


def run_speaker_validation(
    n_speakers: int = 5,
    enroll_n: int = 5,
    test_n: int = 10,
    noise_scale: float = 0.05,
    dim: int = 192,
    seed: int = 0,
    threshold: float = DEFAULT_THRESHOLD,
) -> ValidationResult:
    rng = np.random.default_rng(seed)
    speakers = synthesize_speakers(n_speakers, dim, rng)
    samples = {s.name: s.sample(enroll_n + test_n, noise_scale, rng) for s in speakers}
    return validate_identification(samples, enroll_n, test_n, threshold)
