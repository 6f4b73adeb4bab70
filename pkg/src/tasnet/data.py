"""Synthetic two-speaker mixtures, manifests and fixed-length batching."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .dsp import AudioBuffer
from .wavio import wav_read, wav_write

log = logging.getLogger(__name__)

PEAK = 0.9
GENERATORS = ("tones", "noise-band", "file-backed")
SPLITS = ("train", "val", "test")


@dataclass
class MixtureExample:
    mixture: AudioBuffer
    sources: list[AudioBuffer]
    snr_db: float
    source_ids: list[str] = field(default_factory=list)
    seed: int = 0
    example_id: str = ""

    @property
    def sample_rate(self) -> int:
        return self.mixture.sample_rate


@dataclass
class ManifestRecord:
    source_paths: list[str]
    snr_db: float
    seed: int
    split: str
    id: str = ""
    source_ids: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(
            {"id": self.id, "source_paths": self.source_paths, "snr_db": self.snr_db,
             "seed": self.seed, "split": self.split, "source_ids": self.source_ids},
            sort_keys=True,
        )


@dataclass
class Manifest:
    records: list[ManifestRecord]
    base_dir: Path = Path(".")

    def __len__(self) -> int:
        return len(self.records)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    def missing_files(self) -> list[Path]:
        return [self.resolve(p) for r in self.records for p in r.source_paths if not self.resolve(p).exists()]

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w") as f:
            for r in self.records:
                f.write(r.to_json() + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike, split: str | None = None) -> "Manifest":
        records = []
        with open(path) as f:
            for lineno, line in enumerate(f, 1):
                if not line.strip():
                    continue
                try:
                    d = json.loads(line)
                    rec = ManifestRecord(
                        source_paths=list(d["source_paths"]), snr_db=float(d["snr_db"]),
                        seed=int(d["seed"]), split=str(d["split"]), id=d.get("id", f"line{lineno}"),
                        source_ids=list(d.get("source_ids", [])),
                    )
                except (KeyError, ValueError, TypeError) as exc:
                    raise ValueError(f"{path}:{lineno}: malformed manifest record ({exc})") from exc
                if split is None or rec.split == split:
                    records.append(rec)
        return cls(records, Path(path).resolve().parent)


def energy(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.dot(x, x))


def mix(sources: Sequence[AudioBuffer], snr_db: float, seed: int = 0,
        source_ids: Sequence[str] = (), example_id: str = "") -> MixtureExample:
    """Mix two utterances so that ``10 log10(|s1|^2 / |s2|^2) = snr_db``.

    Both are truncated to the shorter length; if the mixture peak exceeds 0.9
    all three signals are scaled by the same factor.
    """
    if len(sources) != 2:
        raise ValueError(f"the mixing protocol is pairwise, got {len(sources)} sources")
    rate = sources[0].sample_rate
    if sources[1].sample_rate != rate:
        raise ValueError(f"sample rates differ: {rate} vs {sources[1].sample_rate}")
    n = min(len(sources[0]), len(sources[1]))
    s1 = np.asarray(sources[0].samples[:n], dtype=np.float64)
    s2 = np.asarray(sources[1].samples[:n], dtype=np.float64)
    e1, e2 = energy(s1), energy(s2)
    if e1 == 0 or e2 == 0:
        raise ValueError("cannot mix a silent source")
    s2 = s2 * np.sqrt(e1 / (e2 * 10 ** (snr_db / 10)))
    mixture = s1 + s2
    peak = np.max(np.abs(mixture))
    if peak > PEAK:
        g = PEAK / peak
        s1, s2 = s1 * g, s2 * g
        mixture = s1 + s2
    return MixtureExample(
        mixture=AudioBuffer(mixture, rate),
        sources=[AudioBuffer(s1, rate), AudioBuffer(s2, rate)],
        snr_db=float(snr_db), source_ids=list(source_ids), seed=seed, example_id=example_id,
    )


def measured_snr(example: MixtureExample) -> float:
    return 10 * np.log10(energy(example.sources[0].samples) / energy(example.sources[1].samples))


# -- synthetic speakers -------------------------------------------------------


@dataclass(frozen=True)
class Speaker:
    id: str
    f0: float  # Hz; for noise-band speakers the band centre
    tilt: float  # spectral roll-off exponent
    formants: tuple[float, ...]


def make_speakers(n: int, seed: int, kind: str) -> list[Speaker]:
    rng = np.random.default_rng([seed, 7919])
    if kind == "noise-band":
        centres = np.geomspace(300, 3000, n)
    else:
        centres = np.geomspace(85, 320, n)
    order = rng.permutation(n)
    speakers = []
    for i in range(n):
        speakers.append(Speaker(
            id=f"spk{i:03d}",
            f0=float(centres[order[i]] * rng.uniform(0.97, 1.03)),
            tilt=float(rng.uniform(0.6, 1.4)),
            formants=tuple(float(f) for f in np.sort(rng.uniform([300, 900, 2000], [900, 2000, 3300]))),
        ))
    return speakers


def _envelope(rng, n: int, rate: int) -> np.ndarray:
    """Syllable-like on/off amplitude envelope."""
    env = np.zeros(n)
    pos = min(int(rng.uniform(0, 0.05) * rate), n // 4)  # very short utterances still sound
    while pos < n:
        length = int(rng.uniform(0.12, 0.35) * rate)
        seg = np.hanning(length) ** 0.5 * rng.uniform(0.5, 1.0)
        end = min(n, pos + length)
        env[pos:end] = np.maximum(env[pos:end], seg[: end - pos])
        pos = end + int(rng.uniform(0.02, 0.12) * rate)
    return env


def synth_utterance(speaker: Speaker, rng, seconds: float, rate: int, kind: str = "tones") -> np.ndarray:
    n = int(round(seconds * rate))
    t = np.arange(n) / rate
    env = _envelope(rng, n, rate)
    if kind == "tones":
        vibrato = 1 + 0.02 * np.sin(2 * np.pi * rng.uniform(3, 6) * t + rng.uniform(0, 2 * np.pi))
        drift = 1 + rng.uniform(-0.05, 0.05) * t / max(seconds, 1e-9)
        f0 = speaker.f0 * rng.uniform(0.95, 1.05) * vibrato * drift
        phase = 2 * np.pi * np.cumsum(f0) / rate
        y = np.zeros(n)
        k = 1
        while speaker.f0 * k * 1.1 < rate / 2 * 0.9:
            fk = speaker.f0 * k
            boost = 1 + sum(np.exp(-((fk - f) / 150.0) ** 2) for f in speaker.formants)
            y += boost * k ** (-speaker.tilt) * np.sin(k * phase + rng.uniform(0, 2 * np.pi))
            k += 1
    elif kind == "noise-band":
        spec = np.fft.rfft(rng.standard_normal(n))
        freqs = np.fft.rfftfreq(n, 1 / rate)
        width = speaker.f0 * 0.25
        spec *= np.exp(-0.5 * ((freqs - speaker.f0) / width) ** 2)
        y = np.fft.irfft(spec, n)
    else:
        raise ValueError(f"cannot synthesize kind {kind!r}")
    y = y * env
    return (0.5 * y / (np.max(np.abs(y)) + 1e-12)).astype(np.float32)


def _split_speakers(speakers: list, n_splits: int = 3) -> dict[str, list]:
    n = len(speakers)
    n_val = max(2, n // 5)
    n_test = max(2, n // 5)
    n_train = n - n_val - n_test
    if n_train < 2:
        raise ValueError(f"need at least 6 speakers for disjoint splits, got {n}")
    return {"train": speakers[:n_train], "val": speakers[n_train : n_train + n_val],
            "test": speakers[n_train + n_val :]}


def _split_counts(n: int) -> dict[str, int]:
    if n < 3:
        raise ValueError(f"need at least 3 examples (one per split), got {n}")
    n_val = max(1, n // 10)
    n_test = max(1, n // 10)
    return {"train": n - n_val - n_test, "val": n_val, "test": n_test}


def synth_corpus(out_dir: str | os.PathLike, n_examples: int, seed: int = 0, kind: str = "tones",
                 n_speakers: int = 12, seconds: float | tuple[float, float] = 4.0, rate: int = 8000,
                 snr_range: tuple[float, float] = (-5.0, 5.0), source_dir: str | os.PathLike | None = None
                 ) -> dict[str, Manifest]:
    """Write a deterministic speaker-disjoint corpus; returns one manifest per split.

    ``file-backed`` corpora draw utterances from ``source_dir/<speaker>/*.wav``
    instead of synthesizing them.
    """
    if kind not in GENERATORS:
        raise ValueError(f"generator_kind must be one of {GENERATORS}, got {kind!r}")
    lo, hi = snr_range
    if lo > hi:
        raise ValueError(f"snr range is empty: {snr_range}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if kind == "file-backed":
        if source_dir is None:
            raise ValueError("file-backed corpora need source_dir")
        pool = _file_pool(Path(source_dir))
        speakers = sorted(pool)
    else:
        speakers = make_speakers(n_speakers, seed, kind)
    by_split = _split_speakers(speakers)
    counts = _split_counts(n_examples)
    manifests = {}
    index = 0
    for split in SPLITS:
        records = []
        spk = by_split[split]
        for j in range(counts[split]):
            ex_seed = int(np.random.default_rng([seed, index]).integers(2**31))
            rng = np.random.default_rng([seed, index, 1])
            a, b = rng.choice(len(spk), size=2, replace=False)
            snr = float(rng.uniform(lo, hi))
            ex_id = f"{split}-{j:05d}"
            paths, ids = [], []
            for k, s in enumerate((spk[a], spk[b])):
                if kind == "file-backed":
                    files = pool[s]
                    src = files[int(rng.integers(len(files)))]
                    paths.append(str(src.resolve()))
                    ids.append(f"{s}/{src.stem}")
                    continue
                dur = seconds if np.isscalar(seconds) else rng.uniform(*seconds)
                audio = synth_utterance(s, rng, float(dur), rate, kind)
                rel = Path("sources") / split / s.id / f"{ex_id}-{k}.wav"
                (out / rel).parent.mkdir(parents=True, exist_ok=True)
                wav_write(out / rel, AudioBuffer(audio, rate))
                paths.append(rel.as_posix())
                ids.append(f"{s.id}/{ex_id}-{k}")
            records.append(ManifestRecord(paths, snr, ex_seed, split, ex_id, ids))
            index += 1
        manifest = Manifest(records, out.resolve())
        manifest.save(out / f"{split}.jsonl")
        manifests[split] = manifest
    return manifests


def _file_pool(root: Path) -> dict[str, list[Path]]:
    pool = {}
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        files = sorted(d.glob("*.wav"))
        if files:
            pool[d.name] = files
    if len(pool) < 6:
        raise ValueError(f"{root}: need at least 6 speaker directories with WAV files, found {len(pool)}")
    return pool


def materialize(manifest: Manifest, record: ManifestRecord) -> MixtureExample:
    sources = [wav_read(manifest.resolve(p)) for p in record.source_paths]
    return mix(sources, record.snr_db, record.seed, record.source_ids, record.id)


def load_examples(manifest: Manifest) -> list[MixtureExample]:
    return [materialize(manifest, r) for r in manifest.records]


# -- batching -------------------------------------------------------------------


@dataclass
class Batch:
    mixture: np.ndarray  # [B, T]
    sources: np.ndarray  # [B, C, T]
    pad_mask: np.ndarray  # [B, T], True on real samples
    ids: list[str]


def _crop(example: MixtureExample, length: int, offset: int):
    n = len(example.mixture)
    seg = slice(offset, offset + length)
    mixture = np.zeros(length)
    sources = np.zeros((len(example.sources), length))
    mask = np.zeros(length, dtype=bool)
    take = min(length, n - offset)
    mixture[:take] = example.mixture.samples[seg]
    for c, s in enumerate(example.sources):
        sources[c, :take] = s.samples[seg]
    mask[:take] = True
    return mixture, sources, mask


def segment_and_batch(examples: Sequence[MixtureExample], batch_size: int, segment_seconds: float = 4.0,
                      train: bool = True, seed: int = 0, epoch: int = 0, min_length: int = 1,
                      dtype=np.float32) -> Iterator[Batch]:
    """Yield fixed-length batches.

    Training mode shuffles and picks random crop offsets from an RNG derived
    from ``(seed, epoch)``; evaluation mode keeps manifest order and crops
    from the start. Short utterances are zero-padded and ``pad_mask`` marks
    the real samples.
    """
    if not examples:
        raise ValueError("cannot batch an empty manifest")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rate = examples[0].sample_rate
    length = int(round(segment_seconds * rate))
    if length < min_length:
        raise ValueError(f"segment of {length} samples is shorter than the frame length {min_length}")
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(examples)) if train else np.arange(len(examples))
    for start in range(0, len(order), batch_size):
        chunk = [examples[i] for i in order[start : start + batch_size]]
        mixes, srcs, masks, ids = [], [], [], []
        for ex in chunk:
            n = len(ex.mixture)
            offset = int(rng.integers(0, n - length + 1)) if train and n > length else 0
            m, s, k = _crop(ex, length, offset)
            mixes.append(m)
            srcs.append(s)
            masks.append(k)
            ids.append(ex.example_id)
        yield Batch(np.stack(mixes).astype(dtype), np.stack(srcs).astype(dtype), np.stack(masks), ids)


def overfit_examples(n: int = 8, seconds: float = 0.5, seed: int = 0, rate: int = 8000,
                     kind: str = "tones") -> list[MixtureExample]:
    """Fixed in-memory two-speaker mixtures for overfitting checks."""
    speakers = make_speakers(max(6, 2 * n), seed, kind)
    out = []
    for i in range(n):
        rng = np.random.default_rng([seed, i, 2])
        a, b = rng.choice(len(speakers), size=2, replace=False)
        srcs = [AudioBuffer(synth_utterance(speakers[k], rng, seconds, rate, kind), rate) for k in (a, b)]
        out.append(mix(srcs, float(rng.uniform(-5, 5)), i, [speakers[a].id, speakers[b].id], f"overfit-{i}"))
    return out
