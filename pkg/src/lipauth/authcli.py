"""One-shot enrollment and verification against a persistent embedding store.

Store file: one line per user, tab separated::

    user_id  phrase_abbrev  checkpoint_sha256  timestamp  v1 ... v256

Writers take an exclusive ``fcntl`` lock on a sidecar ``.lock`` file.
"""

import fcntl
import os
from contextlib import contextmanager
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .dataprep import load_clip
from .errors import ConflictError, FormatError, NotEnrolledError, StaleEnrollmentError
from .sampler import fix_length
from .siamese import embed, load_checkpoint

DEFAULT_STORE = "enrollments.tsv"
NORM_TOLERANCE = 1e-5


@dataclass
class EnrollmentRecord:
    user_id: str
    embedding: np.ndarray
    phrase: str
    created: str
    fingerprint: str

    def __post_init__(self):
        self.embedding = np.asarray(self.embedding, dtype=np.float64)
        norm = float(np.linalg.norm(self.embedding))
        if abs(norm - 1.0) > NORM_TOLERANCE:
            raise FormatError(f"embedding of {self.user_id!r} has norm {norm}, expected 1")
        for field_ in (self.user_id, self.phrase, self.fingerprint, self.created):
            if "\t" in field_ or "\n" in field_:
                raise FormatError("store fields may not contain tabs or newlines")

    def to_line(self):
        values = "\t".join(repr(float(v)) for v in self.embedding)
        return f"{self.user_id}\t{self.phrase}\t{self.fingerprint}\t{self.created}\t{values}"

    @classmethod
    def from_line(cls, line):
        cols = line.rstrip("\n").split("\t")
        if len(cols) < 5:
            raise FormatError(f"store record has {len(cols)} columns")
        try:
            emb = np.array([float(v) for v in cols[4:]])
        except ValueError:
            raise FormatError("non-numeric embedding value in store") from None
        return cls(cols[0], emb, cols[1], cols[3], cols[2])


def default_store_path():
    return Path(os.environ.get("LBA_STORE", DEFAULT_STORE))


class EmbeddingStore:
    def __init__(self, path=None):
        self.path = Path(path) if path is not None else default_store_path()

    @contextmanager
    def _lock(self, exclusive):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path.with_name(self.path.name + ".lock"), "a") as fh:
            fcntl.flock(fh, fcntl.LOCK_EX if exclusive else fcntl.LOCK_SH)
            try:
                yield
            finally:
                fcntl.flock(fh, fcntl.LOCK_UN)

    def _read(self):
        if not self.path.exists():
            return {}
        records = {}
        for line in self.path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                r = EnrollmentRecord.from_line(line)
                records[r.user_id] = r
        return records

    def load(self):
        with self._lock(exclusive=False):
            return self._read()

    def get(self, user_id):
        records = self.load()
        if user_id not in records:
            raise NotEnrolledError(f"user {user_id!r} is not enrolled")
        return records[user_id]

    def put(self, record, overwrite=False):
        with self._lock(exclusive=True):
            records = self._read()
            if record.user_id in records and not overwrite:
                raise ConflictError(
                    f"user {record.user_id!r} already enrolled; pass overwrite to replace"
                )
            records[record.user_id] = record
            tmp = self.path.with_name(self.path.name + ".tmp")
            tmp.write_text("".join(r.to_line() + "\n" for r in records.values()), encoding="utf-8")
            os.replace(tmp, self.path)


def embed_clip(clip_path, checkpoint):
    frames = fix_length(load_clip(clip_path).frames, checkpoint.arch.frames)
    z = embed(frames[None, None].astype(np.float32), checkpoint.params)
    return z[0].astype(np.float64)


def _checkpoint(ckpt):
    return load_checkpoint(ckpt) if isinstance(ckpt, (str, os.PathLike)) else ckpt


def enroll(user_id, clip_path, checkpoint, store, phrase="", overwrite=False, now=None):
    """Embed one clip and persist it as the user's template."""
    checkpoint = _checkpoint(checkpoint)
    store = store if isinstance(store, EmbeddingStore) else EmbeddingStore(store)
    if not overwrite and user_id in store.load():
        raise ConflictError(f"user {user_id!r} already enrolled; pass overwrite to replace")
    created = (now or datetime.now(timezone.utc)).strftime("%Y-%m-%dT%H:%M:%SZ")
    record = EnrollmentRecord(user_id, embed_clip(clip_path, checkpoint), phrase or "-",
                              created, checkpoint.fingerprint)
    store.put(record, overwrite)
    return record


@dataclass
class Verdict:
    score: float
    accept: bool


def verify(user_id, clip_path, checkpoint, threshold, store):
    """Cosine similarity of a probe with the enrolled template; accept iff >= threshold."""
    checkpoint = _checkpoint(checkpoint)
    store = store if isinstance(store, EmbeddingStore) else EmbeddingStore(store)
    record = store.get(user_id)
    if record.fingerprint != checkpoint.fingerprint:
        raise StaleEnrollmentError(
            f"user {user_id!r} was enrolled with checkpoint {record.fingerprint[:12]}, "
            f"not {checkpoint.fingerprint[:12]}; re-enroll"
        )
    score = float(np.dot(record.embedding, embed_clip(clip_path, checkpoint)))
    return Verdict(score, score >= threshold)
