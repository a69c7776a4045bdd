"""
Configurazione centralizzata per il Residual Speaker Module.

Contiene:
- Le configurazioni tipizzate (mel, ottimizzatore, modello, training)
- Il parsing del file JSON usato dalla CLI (chiavi sconosciute rifiutate)
- Le impostazioni di processo lette da variabili d'ambiente / .env
"""

import dataclasses
import math
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

from dotenv import load_dotenv

load_dotenv()


RESIDUAL_MODES = ("per_layer", "verbatim_algorithm", "none")
ATTENTION_SCALES = ("sqrt_ds", "sqrt_ds_over_alpha")
INIT_DISTRIBUTIONS = ("uniform_fan_in", "normal_fan_in")
NORMALIZATIONS = ("peak", "rms", "none")
LOSS_KINDS = ("classification", "classification+contrastive")


class ConfigError(ValueError):
    """Errore di configurazione; `field_path` indica il campo colpevole."""

    def __init__(self, field_path: str, message: str) -> None:
        super().__init__(f"{field_path}: {message}")
        self.field_path = field_path
        self.message = message


@dataclass
class MelConfig:
    """Front-end: STFT 1280/1280/320 a 16 kHz, 80 bande mel."""

    sample_rate: int = 16000
    fft_size: int = 1280
    win_size: int = 1280
    hop_size: int = 320
    mel_bins: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-5
    # peak | rms | none
    normalization: str = "peak"

    def validate(self) -> List[str]:
        """Valida la configurazione e restituisce lista di errori."""
        errors = []
        if self.win_size > self.fft_size:
            errors.append("win_size deve essere <= fft_size")
        if self.hop_size <= 0:
            errors.append("hop_size deve essere > 0")
        if self.mel_bins <= 0:
            errors.append("mel_bins deve essere > 0")
        if not (0.0 <= self.fmin < self.fmax <= self.sample_rate / 2):
            errors.append("richiesto 0 <= fmin < fmax <= sample_rate/2")
        if self.log_floor <= 0:
            errors.append("log_floor deve essere > 0")
        if self.normalization not in NORMALIZATIONS:
            errors.append(f"normalization non valida: {self.normalization}. Valide: {NORMALIZATIONS}")
        return errors

    def is_valid(self) -> bool:
        return len(self.validate()) == 0


@dataclass
class OptimizerConfig:
    """AdamW con decadimento esponenziale del learning rate per epoca."""

    beta1: float = 0.8
    beta2: float = 0.99
    weight_decay: float = 0.01
    initial_lr: float = 2e-4
    decay_factor: float = 0.999875
    epsilon: float = 1e-8

    def validate(self) -> List[str]:
        """Valida la configurazione e restituisce lista di errori."""
        errors = []
        if not (0.0 < self.beta1 < 1.0):
            errors.append("beta1 deve essere in (0, 1)")
        if not (0.0 < self.beta2 < 1.0):
            errors.append("beta2 deve essere in (0, 1)")
        if self.initial_lr <= 0:
            errors.append("initial_lr deve essere > 0")
        if not (0.0 < self.decay_factor <= 1.0):
            errors.append("decay_factor deve essere in (0, 1]")
        if self.weight_decay < 0:
            errors.append("weight_decay deve essere >= 0")
        if self.epsilon <= 0:
            errors.append("epsilon deve essere > 0")
        return errors

    def is_valid(self) -> bool:
        return len(self.validate()) == 0


@dataclass
class RsmConfig:
    """
    Architettura del Residual Speaker Module.

    Default a piena scala: d_s=256, alpha=4, n=32 token per layer, K=4 layer.
    L'encoder di frame è una coppia di Conv1d sull'asse delle frequenze mel
    seguita da due layer lineari.
    """

    d_s: int = 256
    alpha: int = 4
    n_tokens: int = 32
    n_layers: int = 4
    residual_mode: str = "per_layer"
    attention_scale: str = "sqrt_ds"
    mel_bins: int = 80
    conv_channels: Tuple[int, int] = (16, 32)
    kernel_size: int = 5
    stride: int = 2
    hidden_dim: int = 256
    init_distribution: str = "uniform_fan_in"
    seed: int = 1234

    @property
    def bottleneck(self) -> int:
        """Dimensione d_s/alpha dello spazio di attenzione."""
        return self.d_s // self.alpha

    def conv_lengths(self) -> Tuple[int, int]:
        """Lunghezze (L1, L2) dell'uscita delle due convoluzioni."""
        l1 = (self.mel_bins - self.kernel_size) // self.stride + 1
        l2 = (l1 - self.kernel_size) // self.stride + 1
        return l1, l2

    def attention_divisor(self) -> float:
        if self.attention_scale == "sqrt_ds":
            return math.sqrt(self.d_s)
        return math.sqrt(self.d_s / self.alpha)

    def validate(self) -> List[str]:
        """Valida la configurazione e restituisce lista di errori."""
        errors = []
        if self.d_s <= 0 or self.alpha <= 0:
            errors.append("d_s e alpha devono essere > 0")
        elif self.d_s % self.alpha != 0:
            errors.append(f"d_s ({self.d_s}) deve essere divisibile per alpha ({self.alpha})")
        if self.n_layers < 1:
            errors.append("n_layers deve essere >= 1")
        if self.n_tokens < 1:
            errors.append("n_tokens deve essere >= 1")
        if self.residual_mode not in RESIDUAL_MODES:
            errors.append(f"residual_mode non valido: {self.residual_mode}. Validi: {RESIDUAL_MODES}")
        if self.attention_scale not in ATTENTION_SCALES:
            errors.append(f"attention_scale non valida: {self.attention_scale}. Valide: {ATTENTION_SCALES}")
        if self.init_distribution not in INIT_DISTRIBUTIONS:
            errors.append(f"init_distribution non valida: {self.init_distribution}")
        if len(self.conv_channels) != 2 or min(self.conv_channels) < 1:
            errors.append("conv_channels deve contenere due interi >= 1")
        if self.kernel_size < 1 or self.stride < 1 or self.hidden_dim < 1:
            errors.append("kernel_size, stride e hidden_dim devono essere >= 1")
        elif self.conv_lengths()[1] < 1:
            errors.append(
                f"mel_bins={self.mel_bins} troppo piccolo per due convoluzioni "
                f"(kernel {self.kernel_size}, stride {self.stride})"
            )
        return errors

    def is_valid(self) -> bool:
        return len(self.validate()) == 0


@dataclass
class TrainConfig:
    """Training desk-scale su corpus sintetico (batch 64, segmenti da 128 frame)."""

    batch_size: int = 64
    segment_frames: int = 128
    max_steps: int = 2000
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    seed: int = 1234
    num_speakers: int = 20
    utterances_per_speaker: int = 20
    min_duration: float = 1.0
    max_duration: float = 3.0
    loss: str = "classification"
    contrastive_weight: float = 0.5
    contrastive_margin: float = 0.2
    approximation_weight: float = 0.0
    log_every: int = field(default_factory=lambda: get_settings().log_every)

    def validate(self) -> List[str]:
        """Valida la configurazione e restituisce lista di errori."""
        errors = [f"optimizer.{e}" for e in self.optimizer.validate()]
        if self.segment_frames < 1:
            errors.append("segment_frames deve essere >= 1")
        if self.batch_size < 1:
            errors.append("batch_size deve essere >= 1")
        if self.loss not in LOSS_KINDS:
            errors.append(f"loss non valida: {self.loss}. Valide: {LOSS_KINDS}")
        elif self.loss == "classification+contrastive" and self.batch_size < 2:
            errors.append("batch_size deve essere >= 2 con il termine contrastivo")
        if self.approximation_weight < 0 or self.contrastive_weight < 0:
            errors.append("i pesi dei termini di loss devono essere >= 0")
        if self.log_every < 1:
            errors.append("log_every deve essere >= 1")
        if self.max_steps < 1:
            errors.append("max_steps deve essere >= 1")
        if self.num_speakers < 2:
            errors.append("num_speakers deve essere >= 2")
        if self.utterances_per_speaker < 1:
            errors.append("utterances_per_speaker deve essere >= 1")
        if not (0.0 < self.min_duration <= self.max_duration):
            errors.append("richiesto 0 < min_duration <= max_duration")
        return errors

    def is_valid(self) -> bool:
        return len(self.validate()) == 0


@dataclass
class RunConfig:
    """File JSON letto da `train`, `gradcheck`, `extract` e `gen-corpus`."""

    seed: int = 1234
    corpus_dir: Optional[str] = None
    heldout_per_speaker: int = 5
    unseen_speakers: int = 5
    mel: MelConfig = field(default_factory=MelConfig)
    model: RsmConfig = field(default_factory=RsmConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> List[str]:
        errors = []
        for prefix, section in (("mel", self.mel), ("model", self.model), ("train", self.train)):
            errors.extend(f"{prefix}.{e}" for e in section.validate())
        if self.model.mel_bins != self.mel.mel_bins:
            errors.append("model.mel_bins deve coincidere con mel.mel_bins")
        if self.heldout_per_speaker < 0 or self.unseen_speakers < 0:
            errors.append("heldout_per_speaker e unseen_speakers devono essere >= 0")
        return errors

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        """Costruisce la configurazione; chiavi sconosciute → ConfigError."""
        config = _build_dataclass(cls, data, "")
        # Il seed globale governa modello e training se non ridefinito
        if "model" not in data or "seed" not in data.get("model", {}):
            config.model.seed = config.seed
        if "train" not in data or "seed" not in data.get("train", {}):
            config.train.seed = config.seed
        errors = config.validate()
        if errors:
            path, _, message = errors[0].partition(".")
            raise ConfigError(path if message else "config", errors[0])
        return config

    def to_dict(self) -> Dict[str, Any]:
        return config_to_dict(self)


def _check_type(value: Any, annotation: Any, path: str) -> Any:
    """Verifica il tipo di un valore JSON rispetto all'annotazione del campo."""
    origin = getattr(annotation, "__origin__", None)
    if annotation is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"atteso booleano, trovato {type(value).__name__}")
        return value
    if annotation is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"atteso intero, trovato {type(value).__name__}")
        return value
    if annotation is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"atteso numero, trovato {type(value).__name__}")
        return float(value)
    if annotation is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"attesa stringa, trovato {type(value).__name__}")
        return value
    if origin is tuple:
        if not isinstance(value, list) or not all(isinstance(v, int) for v in value):
            raise ConfigError(path, "attesa lista di interi")
        return tuple(value)
    if annotation == Optional[str]:
        if value is not None and not isinstance(value, str):
            raise ConfigError(path, "attesa stringa o null")
        return value
    if dataclasses.is_dataclass(annotation):
        return _build_dataclass(annotation, value, path)
    return value


def _build_dataclass(cls: Any, data: Any, prefix: str) -> Any:
    if not isinstance(data, dict):
        raise ConfigError(prefix or "config", "atteso oggetto JSON")
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        path = f"{prefix}.{key}" if prefix else key
        if key not in known:
            raise ConfigError(path, "chiave sconosciuta")
        kwargs[key] = _check_type(value, known[key].type, path)
    return cls(**kwargs)


def config_to_dict(config: Any) -> Dict[str, Any]:
    """Serializza una dataclass di configurazione in un dict JSON-compatibile."""
    data = dataclasses.asdict(config)

    def _plain(value: Any) -> Any:
        if isinstance(value, dict):
            return {k: _plain(v) for k, v in value.items()}
        if isinstance(value, (list, tuple)):
            return [_plain(v) for v in value]
        return value

    return _plain(data)


def rsm_config_from_dict(data: Dict[str, Any]) -> RsmConfig:
    """Ricostruisce un RsmConfig (es. dal manifest di un checkpoint)."""
    config = _build_dataclass(RsmConfig, data, "model")
    errors = config.validate()
    if errors:
        raise ConfigError("model", errors[0])
    return config


def mel_config_from_dict(data: Dict[str, Any]) -> MelConfig:
    config = _build_dataclass(MelConfig, data, "mel")
    errors = config.validate()
    if errors:
        raise ConfigError("mel", errors[0])
    return config


@dataclass
class RuntimeSettings:
    """Impostazioni di processo lette da variabili d'ambiente."""

    log_level: str = field(default_factory=lambda: os.getenv("RSM_LOG_LEVEL", "INFO"))
    seed: int = field(default_factory=lambda: int(os.getenv("RSM_SEED", "1234")))
    output_dir: str = field(default_factory=lambda: os.getenv("RSM_OUTPUT_DIR", "runs"))
    log_every: int = field(default_factory=lambda: int(os.getenv("RSM_LOG_EVERY", "50")))
    run_slow: bool = field(
        default_factory=lambda: os.getenv("RSM_RUN_SLOW", "false").lower() == "true"
    )


# Singleton per accesso globale
_settings: RuntimeSettings | None = None


def get_settings() -> RuntimeSettings:
    """Restituisce l'istanza singleton delle impostazioni."""
    global _settings
    if _settings is None:
        _settings = RuntimeSettings()
    return _settings


def reload_settings() -> RuntimeSettings:
    """Ricarica le impostazioni (utile per test)."""
    global _settings
    load_dotenv(override=True)
    _settings = RuntimeSettings()
    return _settings
