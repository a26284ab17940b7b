"""Dataset plumbing: recording metadata, CSV manifests, binary mel
caches, and a deterministic synthetic corpus for desk-scale runs.

Manifest paths are stored relative to the manifest file so a corpus
directory can be relocated (and hashed) as a unit. The mel cache is a
tiny fixed format: magic ``MEL1``, u32 frame count, u32 band count,
then row-major little-endian float32.
"""

from __future__ import annotations

import csv
import os
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from gmvc.errors import InvalidInput, InvalidManifest, ShapeError
from gmvc.features import MEL_BANDS, MelSpectrogram

CACHE_MAGIC = b"MEL1"
MANIFEST_HEADER = ["id", "path", "singer", "technique", "vowel", "style", "split"]
SPLITS = ("train", "test")
STYLES = ("scale", "arpeggios")


@dataclass(frozen=True)
class RecordingMeta:
    id: str
    singer: int
    technique: int
    vowel: int
    style: str


@dataclass(frozen=True)
class ManifestEntry:
    meta: RecordingMeta
    path: str  # relative to the manifest's directory
    split: str


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    root: str  # directory the relative paths resolve against

    def subset(self, split: str) -> list[ManifestEntry]:
        if split not in SPLITS:
            raise InvalidInput(f"unknown split {split!r}")
        return [e for e in self.entries if e.split == split]

    def resolve(self, entry: ManifestEntry) -> str:
        return os.path.join(self.root, entry.path)

    def class_counts(self) -> tuple[int, int, int]:
        """(n_singers, n_techniques, n_vowels) implied by the labels."""
        return (
            1 + max(e.meta.singer for e in self.entries),
            1 + max(e.meta.technique for e in self.entries),
            1 + max(e.meta.vowel for e in self.entries),
        )


def _validate_entries(entries: list[ManifestEntry]) -> None:
    if not entries:
        raise InvalidManifest("manifest has no entries")
    seen = set()
    for e in entries:
        m = e.meta
        if m.id in seen:
            raise InvalidManifest(f"duplicate id {m.id!r}")
        seen.add(m.id)
        if min(m.singer, m.technique, m.vowel) < 0:
            raise InvalidManifest(f"{m.id}: negative class index")
        if e.split not in SPLITS:
            raise InvalidManifest(f"{m.id}: bad split {e.split!r}")
        if not m.style:
            raise InvalidManifest(f"{m.id}: empty style")
        if os.path.isabs(e.path):
            raise InvalidManifest(f"{m.id}: path must be relative, got {e.path!r}")


def write_manifest(path: str, manifest: Manifest) -> None:
    _validate_entries(manifest.entries)
    tmp = path + ".tmp"
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_HEADER)
        for e in manifest.entries:
            m = e.meta
            w.writerow([m.id, e.path, m.singer, m.technique, m.vowel, m.style, e.split])
    os.replace(tmp, path)


def read_manifest(path: str, check_files: bool = True) -> Manifest:
    root = os.path.dirname(os.path.abspath(path))
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise InvalidManifest(f"cannot read manifest: {exc}") from exc
    if not rows or rows[0] != MANIFEST_HEADER:
        raise InvalidManifest(f"bad manifest header in {path}")
    entries = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(MANIFEST_HEADER):
            raise InvalidManifest(f"{path}:{lineno}: expected 7 fields, got {len(row)}")
        rid, rel, singer, technique, vowel, style, split = row
        try:
            meta = RecordingMeta(rid, int(singer), int(technique), int(vowel), style)
        except ValueError as exc:
            raise InvalidManifest(f"{path}:{lineno}: non-integer class index") from exc
        entries.append(ManifestEntry(meta, rel, split))
    _validate_entries(entries)
    man = Manifest(entries, root)
    if check_files:
        for e in entries:
            full = man.resolve(e)
            if not os.path.isfile(full):
                raise InvalidManifest(f"{e.meta.id}: missing file {full}")
    return man


# ---------------------------------------------------------------------------
# mel cache

def write_mel_cache(path: str, frames: np.ndarray) -> None:
    arr = np.ascontiguousarray(frames, dtype="<f4")
    if arr.ndim != 2:
        raise ShapeError(f"mel cache wants a 2-D matrix, got shape {arr.shape}")
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(struct.pack("<4sII", CACHE_MAGIC, arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())
    os.replace(tmp, path)


def read_mel_cache(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(12)
        if len(head) != 12:
            raise InvalidInput(f"{path}: truncated header")
        magic, n_frames, n_bands = struct.unpack("<4sII", head)
        if magic != CACHE_MAGIC:
            raise InvalidInput(f"{path}: bad magic {magic!r}")
        payload = fh.read()
    expect = 4 * n_frames * n_bands
    if len(payload) != expect:
        raise InvalidInput(
            f"{path}: payload is {len(payload)} bytes, header implies {expect}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(n_frames, n_bands).copy()


def load_mel(manifest: Manifest, entry: ManifestEntry) -> MelSpectrogram:
    return MelSpectrogram(read_mel_cache(manifest.resolve(entry)))


# ---------------------------------------------------------------------------
# synthetic corpus

MIN_FRAMES = 172  # always at least 4 chunks


def _rng_for_recording(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def _gauss_bump(band: np.ndarray, center: float, width: float) -> np.ndarray:
    return np.exp(-0.5 * ((band - center) / width) ** 2)


def _render(
    rng: np.random.Generator, singer: int, technique: int, vowel: int
) -> np.ndarray:
    """One synthetic recording as a (T, 96) mel-like matrix in [-1, 1].

    Singer picks formant-bump positions (a two-digit band code so every
    index up to 99 gets a unique pair), vowel adds narrow peaks in the
    reserved top bands, and technique contributes a temporal modulation
    pattern plus a narrow marker band of its own.
    """
    n_frames = MIN_FRAMES + int(rng.integers(0, 44))
    band = np.arange(MEL_BANDS, dtype=np.float64)
    t = np.arange(n_frames, dtype=np.float64)[:, None]

    # singer occupies bands <= ~74, vowels the reserved top bands, so the
    # two codes never collide for desk-scale class counts
    fg = 1.1 * _gauss_bump(band, 6.0 + 7.5 * (singer % 10), 2.2)
    fg = fg + 0.7 * _gauss_bump(band, 48.0 + 9.0 * (singer // 10), 2.2)
    fg = fg + 0.6 * _gauss_bump(band, 82.0 + 4.0 * (vowel % 4), 1.1)
    fg = fg + 0.6 * _gauss_bump(band, 76.0 + 3.0 * ((vowel // 4) % 2), 1.1)

    phase = rng.uniform(0.0, 2.0 * np.pi)
    gain = np.ones((n_frames, 1))
    extra = np.zeros((n_frames, MEL_BANDS))
    kind = technique % 6
    if kind > 0:
        # narrow marker halfway between singer grid positions: techniques
        # have a spectral correlate, not just a temporal one
        fg = fg + 0.55 * _gauss_bump(band, 9.75 + 7.5 * (kind - 1), 0.7)
    if kind == 1:  # sinusoidal band-energy modulation
        gain = 1.0 + 0.45 * np.sin(2.0 * np.pi * t / 16.0 + phase)
    elif kind == 2:  # pulsed energy
        offset = int(rng.integers(0, 12))
        gain = 1.0 + 0.9 * (((np.arange(n_frames) + offset) % 12 < 3).astype(
            np.float64
        )[:, None])
    elif kind == 3:  # static band tilt
        extra = extra + 0.25 * np.broadcast_to(
            band / (MEL_BANDS - 1) * 2.0 - 1.0, (n_frames, MEL_BANDS)
        )
    elif kind == 4:  # low-band noise bursts
        burst = np.zeros(n_frames)
        pos = int(rng.integers(0, 9))
        while pos < n_frames:
            burst[pos : pos + 2] = 1.0
            pos += int(rng.integers(7, 12))
        extra = burst[:, None] * (0.8 * _gauss_bump(band, 4.0, 3.0))
    elif kind == 5:  # amplitude tremor
        gain = 1.0 + 0.35 * np.sin(2.0 * np.pi * t / 5.0 + phase)

    out = -0.88 + rng.normal(0.0, 0.015, size=(n_frames, MEL_BANDS))
    out = out + gain * fg[None, :] + extra
    return np.clip(out, -1.0, 1.0).astype(np.float32)


def generate_synthetic_corpus(
    out_dir: str,
    seed: int,
    n_singers: int = 4,
    n_techniques: int = 3,
    n_vowels: int = 2,
    per_class: int = 2,
) -> Manifest:
    """Write mel caches plus manifest.csv under out_dir; returns the manifest.

    The last recording of each (singer, technique, vowel) cell goes to
    the test split when per_class > 1, so splits stay class-balanced.
    """
    if min(n_singers, n_techniques, n_vowels, per_class) < 1:
        raise InvalidInput("corpus counts must all be >= 1")
    os.makedirs(os.path.join(out_dir, "mel"), exist_ok=True)
    entries = []
    index = 0
    for s in range(n_singers):
        for k in range(n_techniques):
            for v in range(n_vowels):
                for r in range(per_class):
                    rid = f"s{s:02d}_t{k}_v{v}_r{r}"
                    rel = os.path.join("mel", rid + ".mel")
                    frames = _render(_rng_for_recording(seed, index), s, k, v)
                    write_mel_cache(os.path.join(out_dir, rel), frames)
                    split = "test" if per_class > 1 and r == per_class - 1 else "train"
                    meta = RecordingMeta(rid, s, k, v, STYLES[r % 2])
                    entries.append(ManifestEntry(meta, rel, split))
                    index += 1
    manifest = Manifest(entries, os.path.abspath(out_dir))
    write_manifest(os.path.join(out_dir, "manifest.csv"), manifest)
    return manifest


def corpus_digest(out_dir: str) -> str:
    """CRC-based digest over manifest + caches, for determinism checks."""
    man_path = os.path.join(out_dir, "manifest.csv")
    crc = 0
    with open(man_path, "rb") as fh:
        crc = zlib.crc32(fh.read(), crc)
    man = read_manifest(man_path)
    for e in man.entries:
        with open(man.resolve(e), "rb") as fh:
            crc = zlib.crc32(fh.read(), crc)
    return f"{crc:08x}"
