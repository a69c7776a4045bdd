"""
RSM Core - Speaker encoder, Residual Representation Layer e Residual Speaker Module.

Struttura:
- Encoder di frame: Conv1d sull'asse mel → ReLU → Conv1d → ReLU → Linear → ReLU → Linear,
  applicato a ogni frame in modo indipendente; S è la media sui frame
- RRL: cross-attention con query S·W_down e token C come chiavi/valori
- RSM: K layer con query residua (per_layer), residuo sull'accumulato
  (verbatim_algorithm) o senza residuo (none, ablation)
- Backward esplicito per ogni operazione, nessun autodiff generico
- Checkpoint "RSMC": manifest JSON + blob float64 little-endian
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from config import ConfigError, RsmConfig, config_to_dict, rsm_config_from_dict
from features import MelSpectrogram
from numerics import Parameter, ShapeError, init_matrix, matmul, softmax_row
from storage import atomic_write_bytes

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "RSMC"
CHECKPOINT_VERSION = 1

LAYER_PARAM_NAMES = ("tokens", "w_q", "w_k", "w_v", "w_o")


class StateError(RuntimeError):
    """Backward chiamato senza un forward in cache."""


class CheckpointError(ValueError):
    """Checkpoint illeggibile o incoerente con la configurazione."""


@dataclass
class RrlParams:
    """Parametri di un layer RRL (W_down è condivisa tra i layer)."""

    down: np.ndarray
    tokens: np.ndarray
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray


@dataclass
class LayerRecord:
    contribution: np.ndarray
    weights: np.ndarray
    query_residual: np.ndarray


@dataclass
class RsmOutput:
    """Embedding finale E con la decomposizione per layer."""

    embedding: np.ndarray
    speaker_vector: np.ndarray
    layers: List[LayerRecord] = field(default_factory=list)

    @property
    def weight_matrix(self) -> np.ndarray:
        """Matrice K x n dei pesi di attenzione."""
        return np.vstack([layer.weights for layer in self.layers])

    @property
    def contributions(self) -> np.ndarray:
        return np.vstack([layer.contribution for layer in self.layers])


@dataclass
class _RrlTape:
    query: np.ndarray
    q_low: np.ndarray
    q: np.ndarray
    keys: np.ndarray
    values: np.ndarray
    weights: np.ndarray
    attended: np.ndarray


@dataclass
class _EncoderTape:
    num_frames: int
    patches1: np.ndarray
    z1: np.ndarray
    patches2: np.ndarray
    z2: np.ndarray
    flat: np.ndarray
    z3: np.ndarray
    h3: np.ndarray


@dataclass
class ForwardTape:
    """Cache di un forward, consumata dal backward corrispondente."""

    encoder: _EncoderTape
    layers: List[_RrlTape]


# =====================
# Parametri
# =====================


def parameter_specs(cfg: RsmConfig) -> List[Tuple[str, Tuple[int, int], int]]:
    """(nome, forma, fan_in) di ogni parametro, nell'ordine del manifest."""
    c1, c2 = cfg.conv_channels
    k = cfg.kernel_size
    _, l2 = cfg.conv_lengths()
    r = cfg.bottleneck
    specs = [
        ("encoder.conv1.weight", (k, c1), k),
        ("encoder.conv1.bias", (1, c1), k),
        ("encoder.conv2.weight", (k * c1, c2), k * c1),
        ("encoder.conv2.bias", (1, c2), k * c1),
        ("encoder.fc1.weight", (l2 * c2, cfg.hidden_dim), l2 * c2),
        ("encoder.fc1.bias", (1, cfg.hidden_dim), l2 * c2),
        ("encoder.fc2.weight", (cfg.hidden_dim, cfg.d_s), cfg.hidden_dim),
        ("encoder.fc2.bias", (1, cfg.d_s), cfg.hidden_dim),
        ("rrl.down", (cfg.d_s, r), cfg.d_s),
    ]
    for i in range(cfg.n_layers):
        specs.extend([
            (f"rrl.{i}.tokens", (cfg.n_tokens, r), r),
            (f"rrl.{i}.w_q", (r, r), r),
            (f"rrl.{i}.w_k", (r, r), r),
            (f"rrl.{i}.w_v", (r, r), r),
            (f"rrl.{i}.w_o", (r, cfg.d_s), r),
        ])
    return specs


def init_parameters(cfg: RsmConfig) -> Dict[str, Parameter]:
    """Inizializza tutti i parametri dal seed della configurazione."""
    rng = np.random.default_rng(cfg.seed)
    params: Dict[str, Parameter] = {}
    for name, shape, fan_in in parameter_specs(cfg):
        params[name] = Parameter(name, init_matrix(rng, shape, fan_in, cfg.init_distribution))
    return params


# =====================
# Encoder di frame
# =====================


def _window_index(length: int, kernel: int, stride: int) -> np.ndarray:
    out_len = (length - kernel) // stride + 1
    return np.arange(out_len)[:, np.newaxis] * stride + np.arange(kernel)[np.newaxis, :]


def canonical_frame_order(frames: np.ndarray) -> np.ndarray:
    """Ordine lessicografico delle righe: rende S identico bit a bit per permutazioni dei frame."""
    return np.lexsort(frames.T[::-1])


def _encoder_forward(
    frames: np.ndarray, params: Dict[str, Parameter], cfg: RsmConfig
) -> Tuple[np.ndarray, _EncoderTape]:
    frames = frames[canonical_frame_order(frames)]
    t = frames.shape[0]
    k, s = cfg.kernel_size, cfg.stride
    c1, c2 = cfg.conv_channels
    l1, l2 = cfg.conv_lengths()

    idx1 = _window_index(cfg.mel_bins, k, s)
    patches1 = frames[:, idx1].reshape(t * l1, k)
    z1 = patches1 @ params["encoder.conv1.weight"].value + params["encoder.conv1.bias"].value
    h1 = np.maximum(z1, 0.0).reshape(t, l1, c1)

    idx2 = _window_index(l1, k, s)
    patches2 = h1[:, idx2, :].reshape(t * l2, k * c1)
    z2 = patches2 @ params["encoder.conv2.weight"].value + params["encoder.conv2.bias"].value
    flat = np.maximum(z2, 0.0).reshape(t, l2 * c2)

    z3 = flat @ params["encoder.fc1.weight"].value + params["encoder.fc1.bias"].value
    h3 = np.maximum(z3, 0.0)
    out = h3 @ params["encoder.fc2.weight"].value + params["encoder.fc2.bias"].value

    speaker_vector = out.mean(axis=0)
    tape = _EncoderTape(t, patches1, z1, patches2, z2, flat, z3, h3)
    return speaker_vector, tape


def _encoder_backward(
    grad_s: np.ndarray, params: Dict[str, Parameter], tape: _EncoderTape, cfg: RsmConfig
) -> Dict[str, np.ndarray]:
    t = tape.num_frames
    k, s = cfg.kernel_size, cfg.stride
    c1, c2 = cfg.conv_channels
    l1, l2 = cfg.conv_lengths()
    grads: Dict[str, np.ndarray] = {}

    g_out = np.tile(grad_s / t, (t, 1))
    grads["encoder.fc2.weight"] = tape.h3.T @ g_out
    grads["encoder.fc2.bias"] = g_out.sum(axis=0, keepdims=True)
    g_z3 = (g_out @ params["encoder.fc2.weight"].value.T) * (tape.z3 > 0)

    grads["encoder.fc1.weight"] = tape.flat.T @ g_z3
    grads["encoder.fc1.bias"] = g_z3.sum(axis=0, keepdims=True)
    g_flat = g_z3 @ params["encoder.fc1.weight"].value.T

    g_z2 = g_flat.reshape(t * l2, c2) * (tape.z2 > 0)
    grads["encoder.conv2.weight"] = tape.patches2.T @ g_z2
    grads["encoder.conv2.bias"] = g_z2.sum(axis=0, keepdims=True)
    g_patches2 = (g_z2 @ params["encoder.conv2.weight"].value.T).reshape(t, l2, k, c1)

    # col2im: per ogni offset del kernel gli indici di destinazione sono distinti
    g_h1 = np.zeros((t, l1, c1))
    idx2 = _window_index(l1, k, s)
    for j in range(k):
        g_h1[:, idx2[:, j], :] += g_patches2[:, :, j, :]

    g_z1 = g_h1.reshape(t * l1, c1) * (tape.z1 > 0)
    grads["encoder.conv1.weight"] = tape.patches1.T @ g_z1
    grads["encoder.conv1.bias"] = g_z1.sum(axis=0, keepdims=True)
    return grads


# =====================
# Residual Representation Layer
# =====================


def _rrl_forward(
    query: np.ndarray, layer: RrlParams, divisor: float
) -> Tuple[np.ndarray, np.ndarray, _RrlTape]:
    q_low = matmul(query, layer.down)
    q = matmul(q_low, layer.w_q)
    keys = matmul(layer.tokens, layer.w_k)
    values = matmul(layer.tokens, layer.w_v)
    weights = softmax_row(keys @ q / divisor)
    attended = matmul(weights, values)
    contribution = matmul(attended, layer.w_o)
    return contribution, weights, _RrlTape(query, q_low, q, keys, values, weights, attended)


def rrl_forward(query: np.ndarray, layer: RrlParams, divisor: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Un layer di cross-attention sui token.

    Args:
        query: Vettore di lunghezza d_s
        layer: Parametri del layer
        divisor: sqrt(d_s) o sqrt(d_s/alpha)

    Returns:
        (contributo e di lunghezza d_s, pesi w sul simplesso di lunghezza n)
    """
    contribution, weights, _ = _rrl_forward(np.asarray(query, dtype=np.float64), layer, divisor)
    return contribution, weights


def _rrl_backward(
    grad_e: np.ndarray, layer: RrlParams, tape: _RrlTape, divisor: float
) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    g_wo = np.outer(tape.attended, grad_e)
    g_att = layer.w_o @ grad_e

    g_weights = tape.values @ g_att
    g_values = np.outer(tape.weights, g_att)
    g_logits = tape.weights * (g_weights - np.dot(tape.weights, g_weights))

    g_keys = np.outer(g_logits, tape.q) / divisor
    g_q = tape.keys.T @ g_logits / divisor

    g_wv = layer.tokens.T @ g_values
    g_wk = layer.tokens.T @ g_keys
    g_tokens = g_values @ layer.w_v.T + g_keys @ layer.w_k.T

    g_wq = np.outer(tape.q_low, g_q)
    g_qlow = layer.w_q @ g_q
    g_down = np.outer(tape.query, g_qlow)
    g_query = layer.down @ g_qlow

    grads = {"down": g_down, "tokens": g_tokens, "w_q": g_wq, "w_k": g_wk, "w_v": g_wv, "w_o": g_wo}
    return g_query, grads


# =====================
# Residual Speaker Module
# =====================


class ResidualSpeakerModule:
    """
    Modulo completo: encoder + K layer RRL.

    Il forward memorizza una cache; `backward` la consuma e accumula i
    gradienti nei Parameter. Per il training a batch usare
    `forward_with_tape` / `backward_from_tape`.
    """

    def __init__(self, config: RsmConfig, params: Optional[Dict[str, Parameter]] = None) -> None:
        errors = config.validate()
        if errors:
            raise ConfigError("model", errors[0])
        self.config = config
        self.params = params if params is not None else init_parameters(config)
        self.training_step = 0
        self._tape: Optional[ForwardTape] = None
        self._check_shapes()

    def _check_shapes(self) -> None:
        specs = parameter_specs(self.config)
        expected = [name for name, _, _ in specs]
        if list(self.params) != expected:
            raise ShapeError(f"parametri incoerenti con la configurazione: {list(self.params)[:3]}...")
        for name, shape, _ in specs:
            if self.params[name].shape != shape:
                raise ShapeError(f"{name}: forma {self.params[name].shape}, attesa {shape}")

    @property
    def divisor(self) -> float:
        return self.config.attention_divisor()

    def layer_params(self, index: int) -> RrlParams:
        """Vista sui parametri del layer `index`."""
        p = self.params
        return RrlParams(
            down=p["rrl.down"].value,
            tokens=p[f"rrl.{index}.tokens"].value,
            w_q=p[f"rrl.{index}.w_q"].value,
            w_k=p[f"rrl.{index}.w_k"].value,
            w_v=p[f"rrl.{index}.w_v"].value,
            w_o=p[f"rrl.{index}.w_o"].value,
        )

    def _frames(self, mel: Union[MelSpectrogram, np.ndarray]) -> np.ndarray:
        frames = mel.frames if isinstance(mel, MelSpectrogram) else mel
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[0] < 1:
            raise ShapeError(f"mel: attesa matrice T x M con T >= 1, trovata forma {frames.shape}")
        if frames.shape[1] != self.config.mel_bins:
            raise ShapeError(f"mel: {frames.shape[1]} bande, il modello ne richiede {self.config.mel_bins}")
        return frames

    def speaker_vector(self, mel: Union[MelSpectrogram, np.ndarray]) -> np.ndarray:
        """S = media sui frame dell'encoder."""
        speaker_vector, _ = _encoder_forward(self._frames(mel), self.params, self.config)
        return speaker_vector

    def forward_with_tape(self, mel: Union[MelSpectrogram, np.ndarray]) -> Tuple[RsmOutput, ForwardTape]:
        cfg = self.config
        speaker_vector, enc_tape = _encoder_forward(self._frames(mel), self.params, cfg)

        embedding = np.zeros(cfg.d_s)
        query = speaker_vector
        records: List[LayerRecord] = []
        layer_tapes: List[_RrlTape] = []

        for i in range(cfg.n_layers):
            layer_query = speaker_vector if cfg.residual_mode == "none" else query
            contribution, weights, tape = _rrl_forward(layer_query, self.layer_params(i), self.divisor)
            embedding = embedding + contribution

            if cfg.residual_mode == "per_layer":
                query = query - contribution
            elif cfg.residual_mode == "verbatim_algorithm":
                # S <- S - E con E accumulato
                query = query - embedding
            else:
                query = speaker_vector - contribution

            records.append(LayerRecord(contribution, weights, query))
            layer_tapes.append(tape)

        output = RsmOutput(embedding=embedding, speaker_vector=speaker_vector, layers=records)
        return output, ForwardTape(enc_tape, layer_tapes)

    def forward(self, mel: Union[MelSpectrogram, np.ndarray]) -> RsmOutput:
        output, tape = self.forward_with_tape(mel)
        self._tape = tape
        return output

    def backward_from_tape(
        self,
        tape: ForwardTape,
        grad_embedding: np.ndarray,
        grad_speaker: Optional[np.ndarray] = None,
    ) -> None:
        """Accumula nei Parameter i gradienti di <grad_embedding, E> + <grad_speaker, S>."""
        cfg = self.config
        grad_embedding = np.asarray(grad_embedding, dtype=np.float64).reshape(-1)
        if grad_embedding.shape != (cfg.d_s,):
            raise ShapeError(f"gradiente di E: forma {grad_embedding.shape}, attesa ({cfg.d_s},)")
        if grad_speaker is None:
            grad_speaker = np.zeros(cfg.d_s)
        grad_speaker = np.asarray(grad_speaker, dtype=np.float64).reshape(-1)
        if grad_speaker.shape != (cfg.d_s,):
            raise ShapeError(f"gradiente di S: forma {grad_speaker.shape}, attesa ({cfg.d_s},)")

        g_next_query = np.zeros(cfg.d_s)
        g_accumulated = grad_embedding.copy()
        g_speaker_direct = np.zeros(cfg.d_s)

        for i in reversed(range(cfg.n_layers)):
            if cfg.residual_mode == "per_layer":
                g_contribution = grad_embedding - g_next_query
            elif cfg.residual_mode == "verbatim_algorithm":
                g_accumulated = g_accumulated - g_next_query
                g_contribution = g_accumulated
            else:
                g_contribution = grad_embedding

            g_query, grads = _rrl_backward(g_contribution, self.layer_params(i), tape.layers[i], self.divisor)
            self.params["rrl.down"].grad += grads.pop("down")
            for name, grad in grads.items():
                self.params[f"rrl.{i}.{name}"].grad += grad

            if cfg.residual_mode == "none":
                g_speaker_direct = g_speaker_direct + g_query
            else:
                g_next_query = g_next_query + g_query

        g_speaker = g_speaker_direct if cfg.residual_mode == "none" else g_next_query
        g_speaker = g_speaker + grad_speaker
        for name, grad in _encoder_backward(g_speaker, self.params, tape.encoder, cfg).items():
            self.params[name].grad += grad

    def backward(self, grad_embedding: np.ndarray) -> None:
        """
        Backward dell'ultimo forward.

        Raises:
            StateError: nessun forward in cache
        """
        if self._tape is None:
            raise StateError("backward chiamato prima di forward")
        tape, self._tape = self._tape, None
        self.backward_from_tape(tape, grad_embedding)

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.zero_grad()

    def parameter_norms(self) -> Dict[str, float]:
        return {name: param.norm() for name, param in self.params.items()}

    def gradients(self) -> Dict[str, np.ndarray]:
        return {name: param.grad.copy() for name, param in self.params.items()}


# =====================
# Checkpoint RSMC
# =====================


def checkpoint_bytes(model: ResidualSpeakerModule, extra: Optional[Dict] = None) -> bytes:
    """Serializza manifest + blob (deterministico: nessun timestamp)."""
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": config_to_dict(model.config),
        "residual_mode": model.config.residual_mode,
        "seed": model.config.seed,
        "training_step": model.training_step,
        "parameters": [{"name": n, "shape": list(p.shape)} for n, p in model.params.items()],
    }
    if extra:
        manifest["extra"] = extra
    head = json.dumps(manifest, sort_keys=True).encode("utf-8") + b"\n"
    blobs = b"".join(np.ascontiguousarray(p.value, dtype="<f8").tobytes() for p in model.params.values())
    return head + blobs


def save_checkpoint(path: Union[str, Path], model: ResidualSpeakerModule, extra: Optional[Dict] = None) -> Path:
    target = atomic_write_bytes(path, checkpoint_bytes(model, extra))
    logger.info(f"Checkpoint salvato: {target} (step {model.training_step})")
    return target


def load_checkpoint(path: Union[str, Path]) -> Tuple[ResidualSpeakerModule, Dict]:
    """
    Carica un checkpoint RSMC.

    Returns:
        (modello, manifest)
    """
    with open(path, "rb") as f:
        raw = f.read()
    newline = raw.find(b"\n")
    if newline < 0:
        raise CheckpointError(f"{path}: manifest mancante")
    try:
        manifest = json.loads(raw[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: manifest non valido ({e})") from e
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: formato {manifest.get('format')!r}, atteso {CHECKPOINT_FORMAT}")

    config = rsm_config_from_dict(manifest["config"])
    body = raw[newline + 1:]
    params: Dict[str, Parameter] = {}
    offset = 0
    for entry in manifest["parameters"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) * 8
        chunk = body[offset: offset + size]
        if len(chunk) != size:
            raise CheckpointError(f"{path}: blob troncato per {entry['name']}")
        params[entry["name"]] = Parameter(entry["name"], np.frombuffer(chunk, dtype="<f8").reshape(shape))
        offset += size
    if offset != len(body):
        raise CheckpointError(f"{path}: {len(body) - offset} byte in eccesso")

    try:
        model = ResidualSpeakerModule(config, params)
    except ShapeError as e:
        raise CheckpointError(f"{path}: {e}") from e
    model.training_step = int(manifest.get("training_step", 0))
    return model, manifest
