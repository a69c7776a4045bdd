"""
Features - Ingestione audio e log-mel spectrogram.

Supporta:
- WAV RIFF PCM16 mono a 16 kHz (nessun resampling: formati diversi sono errori)
- Normalizzazione di picco (0.95) o RMS
- STFT con finestra di Hann, filterbank mel HTK normalizzato per area, log
- Formato feature "MELF": header JSON + float32 little-endian row-major
"""

import io
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import librosa
import numpy as np
from scipy.io import wavfile

from config import MelConfig, config_to_dict, mel_config_from_dict
from storage import atomic_write_bytes

logger = logging.getLogger(__name__)

SAMPLE_RATE = 16000
PEAK_TARGET = 0.95
RMS_TARGET = 0.1
PCM16_SCALE = 32768.0
MELF_FORMAT = "MELF"
MELF_VERSION = 1


class AudioFormatError(ValueError):
    """File audio non conforme (rate, canali, encoding, lunghezza)."""


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float64)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class MelSpectrogram:
    """Matrice T x M di log-energie mel."""

    frames: np.ndarray
    config: MelConfig

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])

    @property
    def num_bins(self) -> int:
        return int(self.frames.shape[1])


def load_wav(path: Union[str, Path]) -> AudioClip:
    """
    Carica un WAV PCM16 mono a 16 kHz e scala i campioni di 1/32768.

    Raises:
        AudioFormatError: rate, canali o encoding non supportati
    """
    try:
        rate, data = wavfile.read(str(path))
    except (ValueError, EOFError) as e:
        raise AudioFormatError(f"{path}: non è un file RIFF/WAVE leggibile ({e})") from e

    if rate != SAMPLE_RATE:
        raise AudioFormatError(f"{path}: sample rate {rate} Hz, richiesto {SAMPLE_RATE} Hz")
    if data.ndim != 1:
        raise AudioFormatError(f"{path}: {data.shape[1]} canali, richiesto mono")
    if data.dtype != np.int16:
        raise AudioFormatError(f"{path}: encoding {data.dtype}, richiesto PCM 16-bit")

    logger.debug(f"Caricato {path}: {len(data)} campioni")
    return AudioClip(samples=data.astype(np.float64) / PCM16_SCALE, sample_rate=rate)


def save_wav(path: Union[str, Path], clip: AudioClip) -> Path:
    """Salva un clip come WAV PCM16 mono (scrittura atomica)."""
    scaled = np.round(np.clip(clip.samples, -1.0, 1.0) * PCM16_SCALE)
    pcm = np.clip(scaled, -32768, 32767).astype(np.int16)
    buffer = io.BytesIO()
    wavfile.write(buffer, clip.sample_rate, pcm)
    return atomic_write_bytes(path, buffer.getvalue())


def normalize_audio(clip: AudioClip, mode: str = "peak") -> AudioClip:
    """
    Normalizza l'ampiezza del clip.

    Args:
        clip: Clip non vuoto
        mode: "peak" (max |x| = 0.95), "rms" (RMS 0.1, picco <= 0.95) o "none"

    Returns:
        Nuovo AudioClip; un clip tutto zeri viene restituito invariato
    """
    samples = clip.samples
    if samples.size == 0:
        raise AudioFormatError("clip vuoto: impossibile normalizzare")
    if mode == "none":
        return AudioClip(samples.copy(), clip.sample_rate)

    peak = float(np.max(np.abs(samples)))
    if peak == 0.0:
        return AudioClip(samples.copy(), clip.sample_rate)

    if mode == "peak":
        gain = PEAK_TARGET / peak
    elif mode == "rms":
        rms = float(np.sqrt(np.mean(samples * samples)))
        gain = min(RMS_TARGET / rms, PEAK_TARGET / peak)
    else:
        raise ValueError(f"normalizzazione sconosciuta: {mode}")
    return AudioClip(samples * gain, clip.sample_rate)


def hz_to_mel(hz):
    """Scala mel HTK."""
    return librosa.hz_to_mel(np.asarray(hz, dtype=np.float64), htk=True)


def mel_to_hz(mel):
    return librosa.mel_to_hz(np.asarray(mel, dtype=np.float64), htk=True)


def mel_filterbank(cfg: MelConfig) -> Tuple[np.ndarray, np.ndarray]:
    """
    Filterbank triangolare HTK (mel_bins x fft_size//2+1), normalizzato per area.

    Returns:
        (matrice dei filtri, frequenze centrali in Hz)
    """
    weights = librosa.filters.mel(
        sr=cfg.sample_rate,
        n_fft=cfg.fft_size,
        n_mels=cfg.mel_bins,
        fmin=cfg.fmin,
        fmax=cfg.fmax,
        htk=True,
        norm="slaney",
        dtype=np.float64,
    )
    edges = librosa.mel_frequencies(n_mels=cfg.mel_bins + 2, fmin=cfg.fmin, fmax=cfg.fmax, htk=True)
    return weights, edges[1:-1]


def expected_frame_count(num_samples: int, cfg: MelConfig) -> int:
    """T = 1 + floor((padded_len - fft_size) / hop_size), padding fft_size/2 per lato."""
    padded = num_samples + 2 * (cfg.fft_size // 2)
    return 1 + (padded - cfg.fft_size) // cfg.hop_size


def min_clip_length(cfg: MelConfig) -> int:
    """Lunghezza minima per un padding riflesso di fft_size/2 per lato."""
    return cfg.fft_size // 2 + 1


def mel_spectrogram(clip: AudioClip, cfg: MelConfig) -> MelSpectrogram:
    """
    Log-mel spectrogram: Hann-STFT centrata → |X|^2 → filterbank mel → log(max(p, floor)).

    Raises:
        AudioFormatError: clip troppo corto per il padding riflesso
    """
    samples = np.ascontiguousarray(clip.samples, dtype=np.float64)
    minimum = min_clip_length(cfg)
    if samples.size < minimum:
        raise AudioFormatError(
            f"clip troppo corto: {samples.size} campioni, minimo {minimum} "
            f"(fft_size={cfg.fft_size})"
        )
    if clip.sample_rate != cfg.sample_rate:
        raise AudioFormatError(f"sample rate {clip.sample_rate} diverso da {cfg.sample_rate}")

    spectrum = librosa.stft(
        samples,
        n_fft=cfg.fft_size,
        hop_length=cfg.hop_size,
        win_length=cfg.win_size,
        window="hann",
        center=True,
        pad_mode="reflect",
    )
    power = np.abs(spectrum) ** 2

    filters, _ = mel_filterbank(cfg)
    mel_power = (filters @ power).T
    log_mel = np.log(np.maximum(mel_power, cfg.log_floor))

    logger.debug(f"Mel: {log_mel.shape[0]} frame x {log_mel.shape[1]} bande")
    return MelSpectrogram(frames=log_mel, config=cfg)


def extract_features(clip: AudioClip, cfg: MelConfig) -> MelSpectrogram:
    """Pipeline completa: normalizzazione audio + log-mel."""
    return mel_spectrogram(normalize_audio(clip, cfg.normalization), cfg)


# =====================
# Formato MELF
# =====================


def write_matrix_container(path: Union[str, Path], matrix: np.ndarray, header: Dict[str, Any]) -> Path:
    """Header JSON su una riga + rows*cols float32 little-endian row-major."""
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise ValueError(f"attesa matrice 2-D, trovato ndim={matrix.ndim}")
    full_header = dict(header)
    full_header.update({"rows": int(matrix.shape[0]), "cols": int(matrix.shape[1])})
    head = json.dumps(full_header, sort_keys=True).encode("utf-8") + b"\n"
    body = np.ascontiguousarray(matrix, dtype="<f4").tobytes()
    return atomic_write_bytes(path, head + body)


def read_matrix_container(path: Union[str, Path]) -> Tuple[Dict[str, Any], np.ndarray]:
    """Legge un container scritto da `write_matrix_container`."""
    with open(path, "rb") as f:
        raw = f.read()
    newline = raw.find(b"\n")
    if newline < 0:
        raise AudioFormatError(f"{path}: header mancante")
    try:
        header = json.loads(raw[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise AudioFormatError(f"{path}: header JSON non valido ({e})") from e
    rows, cols = int(header["rows"]), int(header["cols"])
    body = raw[newline + 1:]
    if len(body) != rows * cols * 4:
        raise AudioFormatError(f"{path}: attesi {rows * cols * 4} byte di dati, trovati {len(body)}")
    data = np.frombuffer(body, dtype="<f4").reshape(rows, cols).astype(np.float64)
    return header, data


def write_melf(path: Union[str, Path], mel: MelSpectrogram) -> Path:
    header = {
        "format": MELF_FORMAT,
        "version": MELF_VERSION,
        "sample_rate": mel.config.sample_rate,
        "config": config_to_dict(mel.config),
    }
    return write_matrix_container(path, mel.frames, header)


def read_melf(path: Union[str, Path]) -> MelSpectrogram:
    header, data = read_matrix_container(path)
    if header.get("format") != MELF_FORMAT:
        raise AudioFormatError(f"{path}: formato {header.get('format')!r}, atteso {MELF_FORMAT}")
    cfg = mel_config_from_dict(header["config"])
    return MelSpectrogram(frames=data, config=cfg)
