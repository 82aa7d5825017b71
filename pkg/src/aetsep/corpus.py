"""WAV I/O, 0 dB mixing, the 8/2 train/test protocol and segment batching."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Optional, Sequence

import numpy as np

__all__ = [
    "Waveform",
    "WavFormatError",
    "read_wav",
    "write_wav",
    "MixturePair",
    "mix_at_0db",
    "MixtureSpec",
    "SplitManifest",
    "find_speakers",
    "build_manifest",
    "ManifestEntry",
    "write_manifest",
    "read_manifest",
    "mixture_paths",
    "load_pair",
    "batch_segments",
]

DEFAULT_SAMPLE_RATE = 16000
CLIP_LEVEL = 0.99

_PCM = 0x0001
_IEEE_FLOAT = 0x0003
_EXTENSIBLE = 0xFFFE


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def rms(self) -> float:
        return float(np.sqrt(np.mean(self.samples**2))) if self.samples.size else 0.0


class WavFormatError(ValueError):
    """Malformed or unsupported RIFF/WAVE data."""


def _read_chunks(data: bytes, path) -> dict[bytes, bytes]:
    if len(data) < 12:
        raise WavFormatError(f"{path}: truncated file, missing 'RIFF' header")
    riff, _, wave = struct.unpack("<4sI4s", data[:12])
    if riff != b"RIFF" or wave != b"WAVE":
        raise WavFormatError(f"{path}: not a RIFF/WAVE file")
    chunks, pos = {}, 12
    while pos + 8 <= len(data):
        cid, size = struct.unpack("<4sI", data[pos:pos + 8])
        body = data[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise WavFormatError(
                f"{path}: truncated '{cid.decode('latin-1').strip()}' chunk "
                f"({len(body)} of {size} bytes)"
            )
        chunks.setdefault(cid, body)
        pos += 8 + size + (size & 1)
    for required in (b"fmt ", b"data"):
        if required not in chunks:
            raise WavFormatError(f"{path}: missing '{required.decode().strip()}' chunk")
    return chunks


def read_wav(path) -> Waveform:
    """Read 16-bit PCM or 32-bit float WAV; stereo is averaged to mono."""
    data = Path(path).read_bytes()
    chunks = _read_chunks(data, path)
    fmt = chunks[b"fmt "]
    if len(fmt) < 16:
        raise WavFormatError(f"{path}: truncated 'fmt' chunk")
    tag, channels, rate, _, block_align, bits = struct.unpack("<HHIIHH", fmt[:16])
    if tag == _EXTENSIBLE and len(fmt) >= 26:
        tag = struct.unpack("<H", fmt[24:26])[0]
    if tag == _PCM and bits == 16:
        dtype, scale = "<i2", 32768.0
    elif tag == _IEEE_FLOAT and bits == 32:
        dtype, scale = "<f4", 1.0
    else:
        raise WavFormatError(f"{path}: unsupported codec (format tag {tag:#06x}, {bits} bits)")
    if channels < 1 or rate <= 0:
        raise WavFormatError(f"{path}: invalid header ({channels} channels, {rate} Hz)")
    raw = chunks[b"data"]
    frames = len(raw) // (channels * (bits // 8))
    if frames == 0:
        raise WavFormatError(f"{path}: empty 'data' chunk")
    samples = np.frombuffer(raw[:frames * channels * (bits // 8)], dtype=dtype).astype(np.float64) / scale
    return Waveform(samples.reshape(frames, channels).mean(axis=1), rate)


def write_wav(path, wave: Waveform, bit_depth: int = 16) -> None:
    """Write mono WAV as 16-bit PCM or 32-bit float."""
    x = np.asarray(wave.samples, dtype=np.float64)
    if bit_depth == 16:
        payload = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2").tobytes()
        tag, width = _PCM, 2
    elif bit_depth == 32:
        payload = x.astype("<f4").tobytes()
        tag, width = _IEEE_FLOAT, 4
    else:
        raise ValueError(f"unsupported bit depth {bit_depth}")
    fmt = struct.pack("<HHIIHH", tag, 1, wave.sample_rate, wave.sample_rate * width, width, bit_depth)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"data" + struct.pack("<I", len(payload)) + payload + (b"\0" if len(payload) & 1 else b"")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)


class MixturePair(NamedTuple):
    mixture: Waveform
    source_a: Waveform
    source_b: Waveform
    pair_id: str = ""
    sentence_id: str = ""

    def source(self, which: str) -> Waveform:
        if which not in ("a", "b"):
            raise ValueError(f"target source must be 'a' or 'b', got {which!r}")
        return self.source_a if which == "a" else self.source_b


def mix_at_0db(a: Waveform, b: Waveform, pair_id: str = "", sentence_id: str = "") -> MixturePair:
    """Scale ``b`` to the RMS of ``a``, zero-pad to a common length and sum.

    If the mixture would exceed 0.99 in magnitude, all three signals are scaled
    together so the mixture stays the exact sum of its sources.
    """
    if a.sample_rate != b.sample_rate:
        raise ValueError(f"sample rate mismatch: {a.sample_rate} vs {b.sample_rate}")
    if a.rms == 0.0 or b.rms == 0.0:
        raise ValueError("cannot mix a silent signal at 0 dB")
    # levels are matched over the common (zero-padded) length
    length = max(len(a), len(b))
    xa = np.pad(a.samples, (0, length - len(a)))
    xb = np.pad(b.samples, (0, length - len(b)))
    xb = xb * np.sqrt(np.mean(xa**2) / np.mean(xb**2))
    mix = xa + xb
    peak = np.abs(mix).max()
    if peak > CLIP_LEVEL:
        g = CLIP_LEVEL / peak
        xa, xb = xa * g, xb * g
        mix = xa + xb
    rate = a.sample_rate
    return MixturePair(Waveform(mix, rate), Waveform(xa, rate), Waveform(xb, rate), pair_id, sentence_id)


# ----------------------------------------------------------------------------
# corpus protocol
# ----------------------------------------------------------------------------

class MixtureSpec(NamedTuple):
    pair_id: str
    role: str            # "train" or "test"
    sentence_id: str
    path_a: Path
    path_b: Path


@dataclass
class SplitManifest:
    root: Path
    seed: int
    entries: list[MixtureSpec] = field(default_factory=list)

    @property
    def train(self) -> list[MixtureSpec]:
        return [e for e in self.entries if e.role == "train"]

    @property
    def test(self) -> list[MixtureSpec]:
        return [e for e in self.entries if e.role == "test"]


def _is_wav(name: str) -> bool:
    return name.lower().endswith(".wav")


def find_speakers(root) -> dict[str, list[Path]]:
    """Every directory holding WAV files is one speaker, keyed by its path relative to root."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"corpus directory not found: {root}")
    speakers = {}
    for dirpath, _, files in sorted(os.walk(root)):
        wavs = sorted(Path(dirpath) / f for f in files if _is_wav(f))
        if wavs:
            speakers[Path(dirpath).relative_to(root).as_posix()] = wavs
    return speakers


def _test_count(sentences: int) -> int:
    return max(1, int(round(0.2 * sentences)))


def build_manifest(
    corpus_root, num_pairs: int = 10, sentences_per_speaker: int = 10, seed: int = 0
) -> SplitManifest:
    """Pair speakers (female with male when names carry F/M prefixes) and split.

    Each pair yields ``sentences_per_speaker`` mixtures: sentence i of one speaker
    with sentence i of the other. One fifth of them (at least one) are held out.
    """
    speakers = find_speakers(corpus_root)
    eligible = {k: v for k, v in speakers.items() if len(v) >= sentences_per_speaker}
    if sentences_per_speaker < 2:
        raise ValueError("need at least 2 sentences per speaker for a train/test split")
    rng = np.random.default_rng(seed)
    names = sorted(eligible)
    female = [n for n in names if Path(n).name[:1].upper() == "F"]
    male = [n for n in names if Path(n).name[:1].upper() == "M"]
    if len(female) >= num_pairs and len(male) >= num_pairs:
        side_a = list(rng.permutation(female)[:num_pairs])
        side_b = list(rng.permutation(male)[:num_pairs])
    else:
        if len(names) < 2 * num_pairs:
            raise ValueError(
                f"corpus has {len(names)} speakers with >= {sentences_per_speaker} sentences, "
                f"need {2 * num_pairs}"
            )
        chosen = list(rng.permutation(names)[:2 * num_pairs])
        side_a, side_b = chosen[0::2], chosen[1::2]
    n_test = _test_count(sentences_per_speaker)
    manifest = SplitManifest(Path(corpus_root), seed)
    for p, (spk_a, spk_b) in enumerate(zip(side_a, side_b)):
        files_a = [eligible[spk_a][i] for i in sorted(rng.choice(len(eligible[spk_a]), sentences_per_speaker, replace=False))]
        files_b = [eligible[spk_b][i] for i in sorted(rng.choice(len(eligible[spk_b]), sentences_per_speaker, replace=False))]
        test_idx = set(rng.permutation(sentences_per_speaker)[:n_test].tolist())
        for i in range(sentences_per_speaker):
            role = "test" if i in test_idx else "train"
            manifest.entries.append(MixtureSpec(f"pair{p:02d}", role, f"s{i:02d}", files_a[i], files_b[i]))
    return manifest


class ManifestEntry(NamedTuple):
    pair_id: str
    role: str
    path: Path   # the mixture WAV; sources sit next to it


def mixture_paths(mixture_path) -> tuple[Path, Path, Path]:
    """(mixture, source a, source b) file names for a ``*_mix.wav`` path."""
    mixture_path = Path(mixture_path)
    stem = mixture_path.name[: -len("_mix.wav")] if mixture_path.name.endswith("_mix.wav") else mixture_path.stem
    return mixture_path, mixture_path.with_name(f"{stem}_a.wav"), mixture_path.with_name(f"{stem}_b.wav")


def write_manifest(path, entries: Sequence[ManifestEntry]) -> None:
    """One line per mixture: ``pair_id<TAB>role<TAB>path`` with paths relative to the file."""
    path = Path(path)
    lines = []
    for e in entries:
        rel = os.path.relpath(Path(e.path).resolve(), path.parent.resolve())
        lines.append(f"{e.pair_id}\t{e.role}\t{Path(rel).as_posix()}")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")


def read_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3 or parts[1] not in ("train", "test"):
            raise ValueError(f"{path}:{lineno}: expected 'pair_id<TAB>role<TAB>path'")
        entries.append(ManifestEntry(parts[0], parts[1], path.parent / parts[2]))
    return entries


def load_pair(entry: ManifestEntry) -> MixturePair:
    mix_path, a_path, b_path = mixture_paths(entry.path)
    mix, a, b = read_wav(mix_path), read_wav(a_path), read_wav(b_path)
    sentence = mix_path.name[: -len("_mix.wav")] if mix_path.name.endswith("_mix.wav") else mix_path.stem
    return MixturePair(mix, a, b, entry.pair_id, sentence)


def batch_segments(
    pairs: Sequence[MixturePair],
    segment_len: int,
    batch_size: int = 16,
    seed: int = 0,
    epoch: int = 0,
    target: str = "a",
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (mixture batch, target-source batch), each (batch, segment_len).

    Each sentence is placed at a random offset inside a zero buffer that is a
    whole number of segments long, then cut into consecutive segments; segments
    from all sentences are shuffled together. The last batch may be smaller.
    """
    if segment_len < 1 or batch_size < 1:
        raise ValueError("segment length and batch size must be positive")
    if not pairs:
        raise ValueError("no sentences to batch")
    if all(len(p.mixture) < segment_len for p in pairs):
        raise ValueError(f"segment length {segment_len} exceeds every sentence")
    rng = np.random.default_rng([seed, epoch])
    mixes, sources = [], []
    for pair in pairs:
        n = len(pair.mixture)
        count = -(-n // segment_len)
        padded = count * segment_len
        offset = int(rng.integers(0, padded - n + 1))
        buf_m = np.zeros(padded)
        buf_s = np.zeros(padded)
        buf_m[offset:offset + n] = pair.mixture.samples
        buf_s[offset:offset + n] = pair.source(target).samples
        mixes.append(buf_m.reshape(count, segment_len))
        sources.append(buf_s.reshape(count, segment_len))
    mixes, sources = np.concatenate(mixes), np.concatenate(sources)
    order = rng.permutation(len(mixes))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield mixes[idx], sources[idx]
