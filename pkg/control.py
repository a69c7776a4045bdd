"""
Voice Control - Estrazione dei pesi dei token ed editing layer per layer.

Gestisce:
- Estrazione della matrice K x n dei pesi di attenzione
- Ricomposizione dell'embedding dai soli pesi (percorso dei valori)
- Script di editing: replace_layer, interpolate_layer, scale_entry
- Studio di sostituzione layer per layer (sorgente → target)

Gli edit agiscono sui pesi post-softmax, mai sui logit.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence, Union

import numpy as np

from features import MelSpectrogram
from numerics import ShapeError, matmul
from rsm_core import ResidualSpeakerModule

logger = logging.getLogger(__name__)

SIMPLEX_TOLERANCE = 1e-6
EDIT_SCRIPT_VERSION = 1
VALID_OPS = {"replace_layer", "interpolate_layer", "scale_entry"}
VALID_SOURCES = {"src", "tgt"}


class SimplexError(ValueError):
    """Una riga di pesi non sta sul simplesso di probabilità."""


class EditScriptError(ValueError):
    """Edit non valido; `index` è la posizione nello script."""

    def __init__(self, index: int, message: str) -> None:
        super().__init__(f"edit #{index}: {message}")
        self.index = index


@dataclass(frozen=True)
class ReplaceLayer:
    layer: int
    source: str = "tgt"


@dataclass(frozen=True)
class InterpolateLayer:
    layer: int
    lam: float


@dataclass(frozen=True)
class ScaleEntry:
    layer: int
    token: int
    factor: float
    renormalize: bool = True


Edit = Union[ReplaceLayer, InterpolateLayer, ScaleEntry]


@dataclass
class LayerReplacement:
    """Risultato di una sostituzione nello studio layer per layer."""

    layer: int
    embedding: np.ndarray
    distance_to_source: float
    distance_to_target: float


# =====================
# Helper
# =====================


def validate_simplex(weights: np.ndarray, tolerance: float = SIMPLEX_TOLERANCE) -> np.ndarray:
    """Verifica che ogni riga sia non negativa e sommi a 1."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 2:
        raise ShapeError(f"pesi: attesa matrice K x n, trovata forma {weights.shape}")
    for i, row in enumerate(weights):
        if np.any(row < -tolerance) or abs(float(row.sum()) - 1.0) > tolerance:
            raise SimplexError(f"riga {i} fuori dal simplesso (somma {row.sum():.12g}, min {row.min():.3g})")
    return weights


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    denom = float(np.linalg.norm(a) * np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.dot(a, b) / denom)


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    return 1.0 - cosine_similarity(a, b)


def weight_cosine(w1: np.ndarray, w2: np.ndarray) -> float:
    """Similarità coseno tra matrici di pesi appiattite."""
    return cosine_similarity(w1, w2)


# =====================
# Estrazione / ricomposizione
# =====================


def extract_weights(mel: MelSpectrogram, model: ResidualSpeakerModule) -> np.ndarray:
    """
    Pesi dei token di ogni layer per un'utterance.

    Raises:
        ShapeError: numero di bande mel incoerente con il modello
    """
    if isinstance(mel, MelSpectrogram) and mel.config.mel_bins != model.config.mel_bins:
        raise ShapeError(
            f"feature con {mel.config.mel_bins} bande, checkpoint con {model.config.mel_bins}"
        )
    return model.forward_with_tape(mel)[0].weight_matrix


def layer_contributions(weights: np.ndarray, model: ResidualSpeakerModule) -> np.ndarray:
    """Contributi e_i = (w_i · C_i W_v,i) W_o,i, uno per riga."""
    weights = np.asarray(weights, dtype=np.float64)
    cfg = model.config
    if weights.shape != (cfg.n_layers, cfg.n_tokens):
        raise ShapeError(f"pesi: forma {weights.shape}, attesa ({cfg.n_layers}, {cfg.n_tokens})")
    rows = []
    for i in range(cfg.n_layers):
        layer = model.layer_params(i)
        values = matmul(layer.tokens, layer.w_v)
        rows.append(matmul(matmul(weights[i], values), layer.w_o))
    return np.vstack(rows)


def recompose(weights: np.ndarray, model: ResidualSpeakerModule) -> np.ndarray:
    """
    Embedding E' = somma dei contributi per layer, senza passare dalla query.

    Raises:
        SimplexError: riga fuori dal simplesso oltre la tolleranza 1e-6
    """
    validate_simplex(weights)
    embedding = np.zeros(model.config.d_s)
    for contribution in layer_contributions(weights, model):
        embedding = embedding + contribution
    return embedding


# =====================
# Script di editing
# =====================


def parse_edit(index: int, record: Dict[str, Any]) -> Edit:
    """Converte un record JSON in un edit tipizzato."""
    if not isinstance(record, dict):
        raise EditScriptError(index, "atteso oggetto JSON")
    op = record.get("op")
    if op not in VALID_OPS:
        raise EditScriptError(index, f"op non valida: {op!r}. Valide: {sorted(VALID_OPS)}")
    expected = {
        "replace_layer": {"op", "layer", "source"},
        "interpolate_layer": {"op", "layer", "lambda"},
        "scale_entry": {"op", "layer", "token", "factor", "renormalize"},
    }[op]
    unknown = set(record) - expected
    if unknown:
        raise EditScriptError(index, f"campi sconosciuti: {sorted(unknown)}")

    layer = record.get("layer")
    if isinstance(layer, bool) or not isinstance(layer, int) or layer < 0:
        raise EditScriptError(index, f"layer non valido: {layer!r}")

    if op == "replace_layer":
        source = record.get("source", "tgt")
        if source not in VALID_SOURCES:
            raise EditScriptError(index, f"source non valida: {source!r}")
        return ReplaceLayer(layer, source)

    if op == "interpolate_layer":
        lam = record.get("lambda")
        if isinstance(lam, bool) or not isinstance(lam, (int, float)) or not (0.0 <= lam <= 1.0):
            raise EditScriptError(index, f"lambda deve essere in [0, 1], trovato {lam!r}")
        return InterpolateLayer(layer, float(lam))

    token = record.get("token")
    factor = record.get("factor")
    renormalize = record.get("renormalize", True)
    if isinstance(token, bool) or not isinstance(token, int) or token < 0:
        raise EditScriptError(index, f"token non valido: {token!r}")
    if isinstance(factor, bool) or not isinstance(factor, (int, float)) or factor < 0:
        raise EditScriptError(index, f"factor deve essere >= 0, trovato {factor!r}")
    if not isinstance(renormalize, bool):
        raise EditScriptError(index, "renormalize deve essere booleano")
    return ScaleEntry(layer, token, float(factor), renormalize)


def parse_edit_script(data: Any) -> List[Edit]:
    """Script: {"version": 1, "edits": [...]}."""
    if not isinstance(data, dict):
        raise EditScriptError(-1, "atteso oggetto con 'version' e 'edits'")
    if data.get("version") != EDIT_SCRIPT_VERSION:
        raise EditScriptError(-1, f"versione non supportata: {data.get('version')!r}")
    edits = data.get("edits")
    if not isinstance(edits, list):
        raise EditScriptError(-1, "'edits' deve essere una lista")
    return [parse_edit(i, record) for i, record in enumerate(edits)]


def load_edit_script(path: Union[str, Path]) -> List[Edit]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise EditScriptError(-1, f"JSON non valido: {e}") from e
    return parse_edit_script(data)


def edit_to_dict(edit: Edit) -> Dict[str, Any]:
    if isinstance(edit, ReplaceLayer):
        return {"op": "replace_layer", "layer": edit.layer, "source": edit.source}
    if isinstance(edit, InterpolateLayer):
        return {"op": "interpolate_layer", "layer": edit.layer, "lambda": edit.lam}
    return {
        "op": "scale_entry",
        "layer": edit.layer,
        "token": edit.token,
        "factor": edit.factor,
        "renormalize": edit.renormalize,
    }


def apply_edits(src: np.ndarray, tgt: np.ndarray, script: Sequence[Edit]) -> np.ndarray:
    """
    Applica gli edit in ordine partendo dai pesi sorgente.

    replace_layer e interpolate_layer leggono le righe originali di src/tgt;
    scale_entry agisce sul risultato corrente.
    """
    src = np.asarray(src, dtype=np.float64)
    tgt = np.asarray(tgt, dtype=np.float64)
    if src.shape != tgt.shape or src.ndim != 2:
        raise ShapeError(f"src {src.shape} e tgt {tgt.shape} devono avere la stessa forma K x n")
    n_layers, n_tokens = src.shape
    result = src.copy()

    for index, edit in enumerate(script):
        if not (0 <= edit.layer < n_layers):
            raise EditScriptError(index, f"layer {edit.layer} fuori range (K={n_layers})")

        if isinstance(edit, ReplaceLayer):
            result[edit.layer] = (tgt if edit.source == "tgt" else src)[edit.layer]
        elif isinstance(edit, InterpolateLayer):
            result[edit.layer] = (1.0 - edit.lam) * src[edit.layer] + edit.lam * tgt[edit.layer]
        elif isinstance(edit, ScaleEntry):
            if not (0 <= edit.token < n_tokens):
                raise EditScriptError(index, f"token {edit.token} fuori range (n={n_tokens})")
            row = result[edit.layer].copy()
            row[edit.token] *= edit.factor
            if edit.renormalize:
                total = float(row.sum())
                if total <= 0.0:
                    raise EditScriptError(index, "riga tutta a zero: impossibile rinormalizzare")
                row = row / total
            result[edit.layer] = row
        else:
            raise EditScriptError(index, f"edit sconosciuto: {edit!r}")

    return result


def replace_layers(src: np.ndarray, tgt: np.ndarray, layers: Iterable[int]) -> np.ndarray:
    """Sostituisce le righe indicate con quelle del target."""
    return apply_edits(src, tgt, [ReplaceLayer(layer, "tgt") for layer in layers])


def layer_replacement_study(
    src_mel: MelSpectrogram,
    tgt_mel: MelSpectrogram,
    model: ResidualSpeakerModule,
) -> List[LayerReplacement]:
    """
    Per ogni layer j: pesi sorgente con la sola riga j presa dal target.

    Returns:
        K risultati con le distanze coseno dagli embedding non editati
    """
    src_weights = extract_weights(src_mel, model)
    tgt_weights = extract_weights(tgt_mel, model)
    src_embedding = recompose(src_weights, model)
    tgt_embedding = recompose(tgt_weights, model)

    results = []
    for layer in range(model.config.n_layers):
        edited = recompose(replace_layers(src_weights, tgt_weights, [layer]), model)
        results.append(LayerReplacement(
            layer=layer,
            embedding=edited,
            distance_to_source=cosine_distance(edited, src_embedding),
            distance_to_target=cosine_distance(edited, tgt_embedding),
        ))
        logger.debug(
            f"Layer {layer + 1}: d(src)={results[-1].distance_to_source:.4f} "
            f"d(tgt)={results[-1].distance_to_target:.4f}"
        )
    return results
