"""
Analysis - Statistiche sui contributi per layer e sui pesi dei token.

- Deviazione standard dei contributi e_i su un corpus di utterance
- Tabella per sistema (una riga per checkpoint, una colonna per layer)
- Similarità coseno medie stesso speaker / speaker diversi
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from features import MelSpectrogram
from rsm_core import ResidualSpeakerModule
from storage import sha256_bytes

logger = logging.getLogger(__name__)

STD_INTERPRETATION = (
    "per layer: deviazione standard (ddof=0) di e_i sulle utterance per ogni "
    "dimensione, poi media sulle d_s dimensioni"
)


@dataclass
class StdReport:
    label: str
    residual_mode: str
    stds: List[float]
    num_utterances: int
    corpus_fingerprint: str
    interpretation: str = STD_INTERPRETATION
    config: Dict = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return asdict(self)


def corpus_fingerprint(mels: Sequence[MelSpectrogram]) -> str:
    """Hash SHA-256 dei frame (float64, in ordine) di tutte le utterance."""
    payload = b"".join(
        np.ascontiguousarray(getattr(mel, "frames", mel), dtype="<f8").tobytes() for mel in mels
    )
    return sha256_bytes(payload)


def compute_std_report(
    model: ResidualSpeakerModule,
    mels: Sequence[MelSpectrogram],
    label: Optional[str] = None,
) -> StdReport:
    """
    Deviazione standard dei contributi per layer su un corpus.

    Raises:
        ValueError: meno di 2 utterance
    """
    if len(mels) < 2:
        raise ValueError(f"servono almeno 2 utterance per la deviazione standard, trovate {len(mels)}")

    contributions = np.stack([model.forward_with_tape(mel)[0].contributions for mel in mels])
    stds = contributions.std(axis=0, ddof=0).mean(axis=1)

    report = StdReport(
        label=label or model.config.residual_mode,
        residual_mode=model.config.residual_mode,
        stds=[float(s) for s in stds],
        num_utterances=len(mels),
        corpus_fingerprint=corpus_fingerprint(mels),
        config={"d_s": model.config.d_s, "n_tokens": model.config.n_tokens, "n_layers": model.config.n_layers},
    )
    logger.info(f"Std per layer [{report.label}]: " + ", ".join(f"{s:.4g}" for s in report.stds))
    return report


def format_std_table(reports: Sequence[StdReport]) -> pd.DataFrame:
    """Una riga per sistema, colonne "Layer 1".."Layer K"."""
    rows = {}
    for report in reports:
        rows[report.label] = {f"Layer {i + 1}": value for i, value in enumerate(report.stds)}
    table = pd.DataFrame.from_dict(rows, orient="index")
    table.index.name = "system"
    return table


def same_different_similarity(vectors: np.ndarray, labels: Sequence[int]) -> Tuple[float, float]:
    """
    Similarità coseno media sulle coppie stesso speaker e speaker diversi.

    Returns:
        (media stesso speaker, media speaker diversi)
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    labels = np.asarray(labels)
    unit = vectors / np.maximum(np.linalg.norm(vectors, axis=1, keepdims=True), 1e-12)
    cosine = unit @ unit.T
    upper = np.triu(np.ones_like(cosine, dtype=bool), k=1)
    same = (labels[:, np.newaxis] == labels[np.newaxis, :]) & upper
    diff = (labels[:, np.newaxis] != labels[np.newaxis, :]) & upper
    if not same.any() or not diff.any():
        raise ValueError("servono coppie sia dello stesso speaker sia di speaker diversi")
    return float(cosine[same].mean()), float(cosine[diff].mean())


def weight_similarity_stats(
    model: ResidualSpeakerModule,
    mels: Sequence[MelSpectrogram],
    labels: Sequence[int],
) -> Dict[str, float]:
    """Similarità dei pesi appiattiti: stesso speaker vs speaker diversi."""
    weights = np.vstack([model.forward_with_tape(mel)[0].weight_matrix.reshape(-1) for mel in mels])
    same, different = same_different_similarity(weights, labels)
    return {"same": same, "different": different, "gap": same - different}
