"""Corpus customization: alignments, sub-phrase cutting, mouth crops, clips, manifests.

The input corpus follows the GRID layout::

    <grid_root>/s<k>/<utt>.mpg           video (or <utt>.npy, a (T, H, W[, 3]) uint8 array)
    <grid_root>/alignments/s<k>/<utt>.align
    <landmark_root>/s<k>/<utt>.lmk       one record per video frame

Only the "command color preposition" part of each sentence is kept.
"""

import logging
import math
import os
import statistics
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DegenerateROIError, FormatError, ParseError, VocabularyError

log = logging.getLogger(__name__)

COMMANDS = ("bin", "lay", "place", "set")
COLORS = ("blue", "green", "red", "white")
PREPOSITIONS = ("at", "by", "in", "with")
CATEGORIES = ("command", "color", "preposition")
VOCABULARY = dict(zip(CATEGORIES, (COMMANDS, COLORS, PREPOSITIONS)))
SILENCE = frozenset({"sil", "sp"})

FRAME_H = 100
FRAME_W = 50
CONFIDENCE_THRESHOLD = 0.5
N_LANDMARKS = 468
# mouth rectangle side midpoints: left, right, top, bottom
LEFT_LM, RIGHT_LM, TOP_LM, BOTTOM_LM = 57, 287, 164, 18

CLIP_MAGIC = b"LBAC"
CLIP_VERSION = 1
_CLIP_HEADER = struct.Struct("<4sBHHH")

MANIFEST_COLUMNS = ("utterance_id", "speaker_id", "phrase_abbrev", "path", "frame_count", "source")


# --------------------------------------------------------------------------
# phrases


@dataclass(frozen=True, order=True)
class PhraseId:
    command: str
    color: str
    preposition: str

    def __post_init__(self):
        for category, word in zip(CATEGORIES, (self.command, self.color, self.preposition)):
            if word not in VOCABULARY[category]:
                raise VocabularyError(f"{word!r} is not a GRID {category} word")

    @property
    def abbrev(self):
        return self.command[0] + self.color[0] + self.preposition[0]

    @property
    def words(self):
        return (self.command, self.color, self.preposition)

    def __str__(self):
        return " ".join(self.words)

    @classmethod
    def from_abbrev(cls, abbrev):
        if len(abbrev) != 3:
            raise VocabularyError(f"phrase abbreviation must have 3 letters: {abbrev!r}")
        words = []
        for letter, category in zip(abbrev, CATEGORIES):
            match = [w for w in VOCABULARY[category] if w[0] == letter]
            if not match:
                raise VocabularyError(f"no {category} word starts with {letter!r}")
            words.append(match[0])
        return cls(*words)


def all_phrases():
    """The 64 phrases in command-major order."""
    return [PhraseId(c, k, p) for c in COMMANDS for k in COLORS for p in PREPOSITIONS]


# --------------------------------------------------------------------------
# alignments


@dataclass(frozen=True)
class AlignmentEntry:
    start: int
    end: int
    word: str

    @property
    def is_silence(self):
        return self.word in SILENCE


def parse_alignment(text):
    """Parse "start end word" lines into sorted, non-overlapping entries."""
    entries = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ParseError(f"expected 'start end word', got {line!r}", lineno)
        try:
            start, end = int(parts[0]), int(parts[1])
        except ValueError:
            raise ParseError(f"non-integer time in {line!r}", lineno) from None
        if start >= end:
            raise ParseError(f"start {start} not before end {end}", lineno)
        if entries and start < entries[-1].end:
            raise ParseError(
                f"span {start}-{end} overlaps or precedes previous end {entries[-1].end}",
                lineno,
            )
        entries.append(AlignmentEntry(start, end, parts[2].lower()))
    return entries


def extract_subphrase(entries, units_per_frame=1000):
    """Frame range ``[start, end)`` and phrase of the first three spoken words."""
    words = [e for e in entries if not e.is_silence]
    if len(words) < 3:
        raise ParseError(f"need at least 3 spoken words, found {len(words)}")
    command, color, prep = words[:3]
    phrase = PhraseId(command.word, color.word, prep.word)
    start = math.floor(command.start / units_per_frame)
    end = math.ceil(prep.end / units_per_frame)
    return start, end, phrase


# --------------------------------------------------------------------------
# landmarks and cropping


@dataclass
class LandmarkFrame:
    confidence: float
    points: np.ndarray  # (468, 2) pixel x, y

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.shape != (N_LANDMARKS, 2):
            raise FormatError(f"expected {N_LANDMARKS} landmark points, got {self.points.shape}")


def parse_landmarks(text):
    frames = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.strip().split(",")
        try:
            confidence = float(fields[0])
            points = [tuple(float(v) for v in f.split(":")) for f in fields[1:]]
            frames.append(LandmarkFrame(confidence, points))
        except (ValueError, FormatError) as exc:
            raise ParseError(f"bad landmark record: {exc}", lineno) from None
    return frames


def format_landmarks(frames):
    lines = []
    for f in frames:
        pts = ",".join(f"{x:.3f}:{y:.3f}" for x, y in f.points)
        lines.append(f"{f.confidence:.4f},{pts}")
    return "\n".join(lines) + "\n"


def mouth_rectangle(landmarks, frame_shape):
    """(left, top, right, bottom) in pixels, clamped to the frame."""
    h, w = frame_shape[:2]
    pts = landmarks.points
    left = min(max(pts[LEFT_LM, 0], 0.0), w)
    right = min(max(pts[RIGHT_LM, 0], 0.0), w)
    top = min(max(pts[TOP_LM, 1], 0.0), h)
    bottom = min(max(pts[BOTTOM_LM, 1], 0.0), h)
    if left >= right or top >= bottom:
        raise DegenerateROIError(
            f"mouth rectangle x[{left}, {right}] y[{top}, {bottom}] is empty"
        )
    return left, top, right, bottom


def crop_mouth_roi(frame, landmarks):
    left, top, right, bottom = mouth_rectangle(landmarks, frame.shape)
    x0, x1 = math.floor(left), math.ceil(right)
    y0, y1 = math.floor(top), math.ceil(bottom)
    return frame[y0:y1, x0:x1]


def preprocess_frame(crop, size=(FRAME_H, FRAME_W)):
    """Grayscale, bilinear resize to ``size`` (rows, cols) and scale to [0, 1]."""
    crop = np.asarray(crop, dtype=np.float32)
    if crop.size == 0:
        raise DegenerateROIError("empty crop")
    if crop.ndim == 3:
        crop = crop[..., 0] * 0.299 + crop[..., 1] * 0.587 + crop[..., 2] * 0.114
    img = Image.fromarray(crop).resize((size[1], size[0]), Image.BILINEAR)
    return np.clip(np.asarray(img, dtype=np.float32) / 255.0, 0.0, 1.0)


# --------------------------------------------------------------------------
# clips


@dataclass
class Clip:
    frames: np.ndarray  # (T, H, W) float in [0, 1]
    speaker: str = None
    phrase: str = None
    utterance: str = None


def quantize(frames):
    return np.clip(np.rint(np.asarray(frames) * 255.0), 0, 255).astype(np.uint8)


def save_clip(path, clip):
    frames = clip.frames if isinstance(clip, Clip) else clip
    q = quantize(frames)
    if q.ndim != 3 or q.shape[0] < 1:
        raise FormatError(f"clip must be (T>=1, H, W), got {q.shape}")
    if max(q.shape) > 0xFFFF:
        raise FormatError(f"clip extents {q.shape} exceed 16 bits")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_CLIP_HEADER.pack(CLIP_MAGIC, CLIP_VERSION, *q.shape))
        fh.write(q.tobytes())


def load_clip(path, **identity):
    data = Path(path).read_bytes()
    if len(data) < _CLIP_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, t, h, w = _CLIP_HEADER.unpack_from(data)
    if magic != CLIP_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != CLIP_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if t < 1 or h < 1 or w < 1:
        raise FormatError(f"{path}: empty clip ({t}x{h}x{w})")
    body = data[_CLIP_HEADER.size :]
    if len(body) != t * h * w:
        raise FormatError(f"{path}: expected {t * h * w} pixel bytes, found {len(body)}")
    q = np.frombuffer(body, dtype=np.uint8).reshape(t, h, w)
    return Clip(q.astype(np.float32) / 255.0, **identity)


# --------------------------------------------------------------------------
# manifest


@dataclass(frozen=True)
class UtteranceRecord:
    utterance_id: str
    speaker_id: str
    phrase: str  # abbreviation
    path: str
    frame_count: int
    source: str = "grid"

    @property
    def key(self):
        return (self.speaker_id, self.phrase)


@dataclass
class Manifest:
    records: list
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        seen = set()
        for r in self.records:
            triple = (r.speaker_id, r.phrase, r.utterance_id)
            if triple in seen:
                raise FormatError(f"duplicate manifest record {triple}")
            seen.add(triple)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def resolve(self, record):
        p = Path(record.path)
        return p if p.is_absolute() else self.root / p

    @property
    def speakers(self):
        return sorted({r.speaker_id for r in self.records}, key=_id_sort)

    def subset(self, speakers):
        speakers = set(speakers)
        return Manifest([r for r in self.records if r.speaker_id in speakers], self.root)

    def groups(self):
        """Utterances per (speaker, phrase), each sorted by utterance id."""
        out = {}
        for r in self.records:
            out.setdefault(r.key, []).append(r)
        return {k: sorted(v, key=lambda r: r.utterance_id) for k, v in sorted(out.items())}

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = ["# " + "\t".join(MANIFEST_COLUMNS)]
        for r in self.records:
            lines.append(
                "\t".join(
                    [r.utterance_id, r.speaker_id, r.phrase, r.path, str(r.frame_count), r.source]
                )
            )
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.tsv"
        records = []
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip() or line.startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) != len(MANIFEST_COLUMNS):
                raise ParseError(f"expected {len(MANIFEST_COLUMNS)} columns", lineno)
            try:
                frame_count = int(cols[4])
            except ValueError:
                raise ParseError(f"bad frame count {cols[4]!r}", lineno) from None
            PhraseId.from_abbrev(cols[2])
            records.append(UtteranceRecord(cols[0], cols[1], cols[2], cols[3], frame_count, cols[5]))
        return cls(records, path.parent)


def _id_sort(s):
    return (0, int(s), s) if s.isdigit() else (1, 0, s)


def validate_manifest(manifest):
    """Every clip exists, loads and has the recorded frame count."""
    for r in manifest:
        clip = load_clip(manifest.resolve(r))
        if clip.frames.shape[0] != r.frame_count:
            raise FormatError(
                f"{r.utterance_id}: manifest says {r.frame_count} frames, clip has "
                f"{clip.frames.shape[0]}"
            )
    return True


# --------------------------------------------------------------------------
# building from a GRID-shaped corpus


def read_video(path):
    """Frames of a video or ``.npy`` array as (T, H, W[, 3]) uint8, RGB order."""
    path = Path(path)
    if path.suffix == ".npy":
        return np.load(path)
    import cv2

    cap = cv2.VideoCapture(str(path))
    frames = []
    while True:
        ok, frame = cap.read()
        if not ok:
            break
        frames.append(cv2.cvtColor(frame, cv2.COLOR_BGR2RGB))
    cap.release()
    if not frames:
        raise FormatError(f"{path}: no decodable frames")
    return np.stack(frames)


@dataclass
class PrepReport:
    kept: int = 0
    discarded: int = 0
    warnings: list = field(default_factory=list)

    @property
    def total(self):
        return self.kept + self.discarded

    @property
    def discard_ratio(self):
        return self.discarded / self.total if self.total else 0.0


def keep_utterance(landmarks, threshold=CONFIDENCE_THRESHOLD):
    return all(f.confidence >= threshold for f in landmarks)


def process_utterance(video, landmarks, align_entries, units_per_frame=1000, size=(FRAME_H, FRAME_W)):
    """Cut the sub-phrase and return ``(frames, phrase)`` with frames (T, H, W)."""
    start, end, phrase = extract_subphrase(align_entries, units_per_frame)
    end = min(end, len(video), len(landmarks))
    if start >= end:
        raise ParseError(f"sub-phrase frames {start}..{end} fall outside the video")
    frames = [preprocess_frame(crop_mouth_roi(video[t], landmarks[t]), size) for t in range(start, end)]
    return np.stack(frames), phrase


def build_manifest(grid_root, landmark_root, out_dir, units_per_frame=1000,
                   threshold=CONFIDENCE_THRESHOLD, size=(FRAME_H, FRAME_W)):
    """Process every utterance found under ``grid_root``; returns (Manifest, PrepReport)."""
    grid_root, landmark_root, out_dir = Path(grid_root), Path(landmark_root), Path(out_dir)
    report = PrepReport()
    records = []
    for speaker_dir in sorted(grid_root.glob("s*"), key=lambda p: _id_sort(p.name[1:])):
        if not speaker_dir.is_dir() or not speaker_dir.name[1:].isdigit():
            continue
        speaker = speaker_dir.name[1:]
        for video_path in sorted(speaker_dir.iterdir()):
            if video_path.suffix not in (".mpg", ".mp4", ".avi", ".npy"):
                continue
            utt = video_path.stem
            lmk_path = landmark_root / speaker_dir.name / f"{utt}.lmk"
            align_path = grid_root / "alignments" / speaker_dir.name / f"{utt}.align"
            if not lmk_path.exists():
                report.warnings.append(f"{video_path}: missing landmark file {lmk_path}")
                log.warning("skipping %s: no landmarks", video_path)
                continue
            if not align_path.exists():
                report.warnings.append(f"{video_path}: missing alignment {align_path}")
                log.warning("skipping %s: no alignment", video_path)
                continue
            landmarks = parse_landmarks(lmk_path.read_text(encoding="utf-8"))
            if not keep_utterance(landmarks, threshold):
                report.discarded += 1
                continue
            entries = parse_alignment(align_path.read_text(encoding="utf-8"))
            frames, phrase = process_utterance(
                read_video(video_path), landmarks, entries, units_per_frame, size
            )
            rel = Path("clips") / speaker_dir.name / f"{utt}.lbac"
            save_clip(out_dir / rel, frames)
            records.append(
                UtteranceRecord(f"s{speaker}_{utt}", speaker, phrase.abbrev, rel.as_posix(),
                                frames.shape[0], "grid")
            )
            report.kept += 1
    manifest = Manifest(records, out_dir)
    manifest.save(out_dir / "manifest.tsv")
    return manifest, report


# --------------------------------------------------------------------------
# statistics


def subpattern_stats(manifest):
    """Sub-pattern properties of a manifest.

    Two positive-pair capacities are reported: the number of distinct
    unordered pairs, sum K(K-1)/2, and sum K^2/2 for comparison with
    reference figures that appear to count that way.
    """
    if not len(manifest):
        raise ValueError("empty manifest")
    groups = Counter(r.key for r in manifest)
    per_phrase = Counter(r.phrase for r in manifest)
    counts = list(groups.values())
    return {
        "speakers": len({r.speaker_id for r in manifest}),
        "phrases": len(per_phrase),
        "median_utterances_per_phrase": statistics.median(per_phrase.values()),
        "median_utterances_per_speaker_phrase": statistics.median(counts),
        "unique_speaker_phrase_pairs": len(groups),
        "positive_pair_capacity": sum(k * (k - 1) // 2 for k in counts),
        "positive_pair_capacity_k2_half": sum(k * k for k in counts) / 2,
    }


def format_stats(stats):
    width = max(len(k) for k in stats)
    return "\n".join(f"{k.ljust(width)}  {v}" for k, v in stats.items())


def default_data_root():
    return Path(os.environ.get("LBA_DATA_ROOT", "."))
