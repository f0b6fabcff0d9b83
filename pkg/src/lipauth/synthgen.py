"""Synthetic GRID-shaped corpus.

Speaker identity sets static appearance: a low-frequency skin texture, lip
tone and mouth size.  Phrase identity sets motion: smooth trajectories of
mouth aperture, width and vertical position over time.  Utterances of the same
(speaker, phrase) differ by a small time shift and stretch plus pixel noise.
"""

import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .dataprep import Clip, Manifest, UtteranceRecord, all_phrases, save_clip


@dataclass(frozen=True)
class SynthConfig:
    speakers: int = 8
    phrases: int = 8
    utterances: int = 12
    frames: int = 50
    height: int = 100
    width: int = 50
    noise: float = 0.05
    jitter: float = 2.0
    seed: int = 7

    def __post_init__(self):
        for name in ("speakers", "phrases", "utterances", "frames", "height", "width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0 <= self.noise < 0.5:
            raise ValueError("noise amplitude must lie in [0, 0.5)")
        if self.phrases > 64:
            raise ValueError("at most 64 phrases exist")
        if self.jitter < 0:
            raise ValueError("jitter must be non-negative")


def speaker_ids(config):
    return [str(i + 1) for i in range(config.speakers)]


def phrase_ids(config):
    """Abbreviations of ``config.phrases`` phrases spread over the 64."""
    every = all_phrases()
    return [every[i * len(every) // config.phrases].abbrev for i in range(config.phrases)]


def _rng(config, *labels):
    parts = [config.seed] + [zlib.crc32(str(label).encode()) for label in labels]
    return np.random.default_rng(parts)


def _smooth(values, width):
    kernel = np.hanning(width + 2)[1:-1]
    kernel /= kernel.sum()
    return ndimage.convolve1d(values, kernel, mode="nearest")


def speaker_traits(speaker, config):
    rng = _rng(config, "speaker", speaker)
    coarse = rng.standard_normal((4, 3))
    texture = ndimage.zoom(coarse, (config.height / 4, config.width / 3), order=1, mode="nearest")
    texture = texture[: config.height, : config.width]
    texture = 0.55 + 0.25 * texture / (np.abs(texture).max() + 1e-9)
    return {
        "texture": texture,
        "lip_tone": rng.uniform(0.15, 0.45),
        "mouth_width": rng.uniform(0.55, 0.85),
        "mouth_height": rng.uniform(0.25, 0.45),
    }


def phrase_trajectory(phrase, config, samples=None):
    """Aperture, width and vertical offset curves in [0, 1], sampled on a fine grid."""
    samples = samples or 4 * config.frames
    rng = _rng(config, "phrase", phrase)
    width = max(3, samples // 8)
    curves = []
    for _ in range(3):
        walk = _smooth(rng.standard_normal(samples + 2 * width), width)[width:-width]
        walk = (walk - walk.min()) / (walk.max() - walk.min() + 1e-9)
        curves.append(walk)
    return np.stack(curves)


def _sample_curve(curves, t):
    grid = np.linspace(0.0, 1.0, curves.shape[1])
    return np.stack([np.interp(t, grid, c) for c in curves])


def render_utterance(speaker, phrase, index, config):
    """Deterministic clip for (speaker, phrase, utterance index)."""
    traits = speaker_traits(speaker, config)
    curves = phrase_trajectory(phrase, config)
    rng = _rng(config, "utterance", speaker, phrase, index)
    T, H, W = config.frames, config.height, config.width
    shift = rng.uniform(-config.jitter, config.jitter) / T if config.jitter else 0.0
    stretch = 1.0 + (rng.uniform(-0.5, 0.5) * config.jitter / T if config.jitter else 0.0)
    t = np.clip((np.arange(T) / max(T - 1, 1) - 0.5) * stretch + 0.5 + shift, 0.0, 1.0)
    aperture, spread, lift = _sample_curve(curves, t)

    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    yy = (yy + 0.5) / H - 0.5
    xx = (xx + 0.5) / W - 0.5
    frames = np.empty((T, H, W))
    for k in range(T):
        cy = 0.1 * (lift[k] - 0.5)
        ry = traits["mouth_height"] * (0.15 + 0.85 * aperture[k]) / 2
        rx = traits["mouth_width"] * (0.7 + 0.3 * spread[k]) / 2
        r = np.sqrt(((yy - cy) / ry) ** 2 + (xx / rx) ** 2)
        lips = 1 / (1 + np.exp((r - 1.35) * 12))  # lip ring and cavity
        cavity = 1 / (1 + np.exp((r - 1.0) * 12))
        img = traits["texture"] * (1 - lips) + traits["lip_tone"] * (lips - cavity) + 0.05 * cavity
        frames[k] = img
    if config.noise:
        frames += rng.uniform(-config.noise, config.noise, size=frames.shape)
    frames = np.clip(frames, 0.0, 1.0).astype(np.float32)
    return Clip(frames, speaker=speaker, phrase=phrase, utterance=f"s{speaker}_{phrase}_{index:03d}")


def gen_corpus(config, out_dir):
    """Render every utterance, write clips and ``manifest.tsv``; return the manifest."""
    out_dir = Path(out_dir)
    records = []
    for speaker in speaker_ids(config):
        for phrase in phrase_ids(config):
            for index in range(config.utterances):
                clip = render_utterance(speaker, phrase, index, config)
                rel = Path("clips") / f"s{speaker}" / f"{clip.utterance}.lbac"
                try:
                    save_clip(out_dir / rel, clip)
                except OSError as exc:
                    raise OSError(f"cannot write {out_dir / rel}: {exc}") from exc
                records.append(UtteranceRecord(clip.utterance, speaker, phrase, rel.as_posix(),
                                               clip.frames.shape[0], "synthetic"))
    manifest = Manifest(records, out_dir)
    manifest.save(out_dir / "manifest.tsv")
    return manifest


def mean_sq_distance(a, b):
    return float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))


def correlation_self_test(config, pairs=200, seed=0):
    """Accuracy of a frame-correlation classifier at telling type 1 from type 4 pairs.

    Half of the sampled pairs are positives (same speaker and phrase, different
    utterance) and half differ in both.  A pair is called positive when the
    Pearson correlation of the two clips exceeds the midpoint between the mean
    positive and mean negative correlation.
    """
    rng = np.random.default_rng(seed)
    speakers, phrases = speaker_ids(config), phrase_ids(config)
    if config.utterances < 2 or len(speakers) < 2 or len(phrases) < 2:
        raise ValueError("self-test needs >= 2 speakers, phrases and utterances")
    cache = {}

    def clip(s, p, i):
        if (s, p, i) not in cache:
            cache[s, p, i] = render_utterance(s, p, i, config).frames.ravel().astype(np.float64)
        return cache[s, p, i]

    scores, labels = [], []
    for k in range(pairs):
        s, p = rng.choice(speakers), rng.choice(phrases)
        if k % 2 == 0:
            i, j = rng.choice(config.utterances, size=2, replace=False)
            a, b = clip(s, p, i), clip(s, p, j)
        else:
            s2 = rng.choice([x for x in speakers if x != s])
            p2 = rng.choice([x for x in phrases if x != p])
            a = clip(s, p, rng.integers(config.utterances))
            b = clip(s2, p2, rng.integers(config.utterances))
        scores.append(np.corrcoef(a, b)[0, 1])
        labels.append(k % 2 == 0)
    scores, labels = np.array(scores), np.array(labels)
    cut = (scores[labels].mean() + scores[~labels].mean()) / 2
    return float(np.mean((scores > cut) == labels))
