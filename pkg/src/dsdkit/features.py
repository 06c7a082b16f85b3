"""Audio front end: PCM WAV reading, fixed-length segmentation, a log-mel
stats-pooling embedder and the binary embedding file format.

The embedder is a deterministic, untrained stand-in for a frozen pretrained
speech model. Real backbone outputs enter through :func:`load_embeddings`.
"""

from __future__ import annotations

import csv
import os
import wave
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, FormatError, NumericError, ShapeError

SAMPLE_RATE = 16_000
LOG_EPS = 1e-10
MIN_KEEP_SECONDS = 1.0
EMB_MAGIC = "SPOOFEMB v1"


@dataclass
class WaveBuffer:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ConfigError(f"sample_rate must be positive, got {self.sample_rate}")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class EmbeddingVector:
    values: np.ndarray
    source_utt: str = ""
    segment_index: int = 0


@dataclass(frozen=True)
class BackboneConfig:
    n_fft: int = 512
    hop: int = 160
    n_mels: int = 64
    fmin: float = 20.0
    fmax: float = 7_600.0
    pooling: str = "mean_std"
    sample_rate: int = SAMPLE_RATE
    seg_seconds: float = 4.0

    def __post_init__(self):
        if self.n_mels < 1:
            raise ConfigError("n_mels must be >= 1")
        if not 0 <= self.fmin < self.fmax <= self.sample_rate / 2:
            raise ConfigError(f"need 0 <= fmin < fmax <= sample_rate/2, got {self.fmin}, {self.fmax}")
        if self.n_fft < 2 or self.hop < 1:
            raise ConfigError("n_fft must be >= 2 and hop >= 1")
        if self.pooling != "mean_std":
            raise ConfigError(f"unsupported pooling {self.pooling!r}")

    @property
    def dim(self) -> int:
        return 2 * self.n_mels


def read_wav(path: str | os.PathLike, expected_rate: int | None = SAMPLE_RATE) -> WaveBuffer:
    """Read 16-bit PCM WAV; stereo is averaged to mono."""
    try:
        with wave.open(str(path), "rb") as wf:
            n_ch = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            n_frames = wf.getnframes()
            raw = wf.readframes(n_frames)
    except wave.Error as exc:
        raise FormatError(f"{path}: not a PCM WAV file ({exc})") from None
    except EOFError:
        raise OSError(f"{path}: truncated WAV header") from None
    if width != 2:
        raise FormatError(f"{path}: unsupported bit depth {8 * width} (only 16-bit PCM)")
    if expected_rate is not None and rate != expected_rate:
        raise FormatError(f"{path}: sample rate {rate} Hz, only {expected_rate} Hz is accepted (no resampling)")
    if len(raw) != n_frames * n_ch * width:
        raise OSError(f"{path}: truncated data chunk ({len(raw)} of {n_frames * n_ch * width} bytes)")
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if n_ch > 1:
        pcm = pcm.reshape(-1, n_ch).mean(axis=1)
    return WaveBuffer(pcm, rate)


def write_wav(path: str | os.PathLike, wave_buf: WaveBuffer) -> None:
    pcm = np.clip(np.round(wave_buf.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(wave_buf.sample_rate)
        wf.writeframes(pcm.tobytes())


def split_segments(wave_buf: WaveBuffer, seg_seconds: float = 4.0,
                   min_keep_seconds: float = MIN_KEEP_SECONDS) -> list[WaveBuffer]:
    """Non-overlapping segments of exactly ``seg_seconds``.

    A trailing remainder is zero-padded to full length if it lasts at least
    ``min_keep_seconds``, otherwise dropped.
    """
    sr = wave_buf.sample_rate
    seg_len = int(round(seg_seconds * sr))
    if seg_len < 1:
        raise ConfigError(f"segment length {seg_seconds}s is shorter than one sample")
    x = wave_buf.samples
    n_full, rem = divmod(x.size, seg_len)
    segments = [WaveBuffer(x[i * seg_len:(i + 1) * seg_len].copy(), sr) for i in range(n_full)]
    if rem and rem >= min_keep_seconds * sr:
        tail = np.zeros(seg_len)
        tail[:rem] = x[n_full * seg_len:]
        segments.append(WaveBuffer(tail, sr))
    return segments


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(cfg: BackboneConfig) -> np.ndarray:
    """``n_mels + 2`` frequencies (Hz): left edge, centres, right edge."""
    return mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))


def mel_filterbank(cfg: BackboneConfig) -> np.ndarray:
    """Triangular, unnormalised filters on the rfft bin grid, shape (n_mels, n_fft//2 + 1)."""
    freqs = np.fft.rfftfreq(cfg.n_fft, d=1.0 / cfg.sample_rate)
    pts = mel_band_edges(cfg)
    left, center, right = pts[:-2, None], pts[1:-1, None], pts[2:, None]
    rising = (freqs - left) / (center - left)
    falling = (right - freqs) / (right - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def log_mel(wave_buf: WaveBuffer, cfg: BackboneConfig) -> np.ndarray:
    """Log mel energies, shape (frames, n_mels)."""
    x = wave_buf.samples
    if not np.all(np.isfinite(x)):
        raise NumericError("waveform contains non-finite samples")
    if wave_buf.sample_rate != cfg.sample_rate:
        raise ConfigError(f"wave is {wave_buf.sample_rate} Hz, backbone expects {cfg.sample_rate} Hz")
    if x.size < cfg.n_fft:
        x = np.pad(x, (0, cfg.n_fft - x.size))
    n_frames = 1 + (x.size - cfg.n_fft) // cfg.hop
    idx = np.arange(cfg.n_fft)[None, :] + cfg.hop * np.arange(n_frames)[:, None]
    frames = x[idx] * np.hanning(cfg.n_fft)
    mag = np.abs(np.fft.rfft(frames, axis=1))
    return np.log(mag @ mel_filterbank(cfg).T + LOG_EPS)


def embed(wave_buf: WaveBuffer, cfg: BackboneConfig = BackboneConfig(), source_utt: str = "",
          segment_index: int = 0) -> EmbeddingVector:
    """Per-band mean and standard deviation of log mel energies, ``2 * n_mels`` values."""
    expected = int(round(cfg.seg_seconds * cfg.sample_rate))
    if wave_buf.samples.size != expected:
        raise ShapeError(f"segment has {wave_buf.samples.size} samples, expected {expected}")
    lm = log_mel(wave_buf, cfg)
    values = np.concatenate([lm.mean(axis=0), lm.std(axis=0)])
    return EmbeddingVector(values, source_utt, segment_index)


def stack_embeddings(vectors: Sequence[EmbeddingVector]) -> np.ndarray:
    """(N, D) float64 matrix; mixed dimensions are rejected."""
    if not vectors:
        return np.zeros((0, 0))
    dims = {v.values.size for v in vectors}
    if len(dims) != 1:
        raise ShapeError(f"mixed embedding dimensions in batch: {sorted(dims)}")
    return np.vstack([np.asarray(v.values, dtype=np.float64).ravel() for v in vectors])


def sidecar_path(path: str | os.PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".index.csv")


def save_embeddings(path: str | os.PathLike, vectors: Sequence[EmbeddingVector]) -> None:
    """Write the binary payload and its ``utt_id,segment_index`` sidecar."""
    path = Path(path)
    mat = stack_embeddings(vectors).astype("<f4")
    if not np.all(np.isfinite(mat)):
        raise NumericError("refusing to write non-finite embeddings")
    n, d = mat.shape if mat.size else (0, 0)
    header = f"{EMB_MAGIC} dim={d} count={n}\n".encode("ascii")
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(header + mat.tobytes(order="C"))
    side = sidecar_path(path)
    side_tmp = side.with_name(side.name + ".tmp")
    with side_tmp.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["utt_id", "segment_index"])
        for v in vectors:
            w.writerow([v.source_utt, v.segment_index])
    os.replace(side_tmp, side)
    os.replace(tmp, path)


def _parse_header(line: bytes, path) -> tuple[int, int]:
    try:
        text = line.decode("ascii").rstrip("\n")
    except UnicodeDecodeError:
        raise FormatError(f"{path}: header is not ASCII") from None
    parts = text.split(" ")
    if len(parts) != 4 or " ".join(parts[:2]) != EMB_MAGIC:
        raise FormatError(f"{path}: bad header {text!r}, expected '{EMB_MAGIC} dim=<D> count=<N>'")
    try:
        kv = dict(p.split("=", 1) for p in parts[2:])
        return int(kv["dim"]), int(kv["count"])
    except (KeyError, ValueError):
        raise FormatError(f"{path}: bad header {text!r}") from None


def load_embeddings(path: str | os.PathLike) -> list[EmbeddingVector]:
    path = Path(path)
    blob = path.read_bytes()
    nl = blob.find(b"\n")
    if nl < 0:
        raise FormatError(f"{path}: missing header line")
    dim, count = _parse_header(blob[:nl + 1], path)
    payload = blob[nl + 1:]
    if len(payload) != 4 * dim * count:
        raise FormatError(
            f"{path}: header says {count} x {dim} floats ({4 * dim * count} bytes), payload has {len(payload)} bytes"
        )
    mat = np.frombuffer(payload, dtype="<f4").reshape(count, dim)
    if not np.all(np.isfinite(mat)):
        raise NumericError(f"{path}: payload contains NaN or infinite values")

    ids: list[tuple[str, int]] = [("", i) for i in range(count)]
    side = sidecar_path(path)
    if side.exists():
        with side.open(newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0] != ["utt_id", "segment_index"]:
            raise FormatError(f"{side}: header must be utt_id,segment_index")
        if len(rows) - 1 != count:
            raise FormatError(f"{side}: {len(rows) - 1} rows but payload holds {count} vectors")
        try:
            ids = [(r[0], int(r[1])) for r in rows[1:]]
        except (IndexError, ValueError):
            raise FormatError(f"{side}: malformed row") from None
    return [EmbeddingVector(mat[i].copy(), uid, seg) for i, (uid, seg) in enumerate(ids)]


def embed_file(path: str | os.PathLike, utt_id: str, cfg: BackboneConfig = BackboneConfig()) -> list[EmbeddingVector]:
    """Read, segment and embed one utterance file."""
    wav = read_wav(path, expected_rate=cfg.sample_rate)
    segs = split_segments(wav, cfg.seg_seconds)
    return [embed(s, cfg, utt_id, i) for i, s in enumerate(segs)]
