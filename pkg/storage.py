"""
Storage Utilities - Scrittura atomica di artefatti e log delle metriche.

Gestisce:
- Scritture atomiche (file temporaneo + rename)
- Log metriche in formato JSON-lines
- Export CSV di matrici (9 cifre significative)
- Hash SHA-256 per provenance e fingerprint del corpus
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, Iterable, List, Union

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def atomic_write_bytes(path: PathLike, payload: bytes) -> Path:
    """
    Scrive `payload` in modo atomico: un run interrotto non lascia mai
    file troncati al posto dell'output.
    """
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{target.name}.", suffix=".tmp", dir=target.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp_name, target)
    except BaseException:
        try:
            os.unlink(tmp_name)
        except OSError:
            pass
        raise
    logger.debug(f"Scritto {target} ({len(payload)} bytes)")
    return target


def atomic_write_text(path: PathLike, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def _to_plain_number(value: Any) -> Any:
    """Converte numpy scalars in tipi Python."""
    if isinstance(value, np.generic):
        return value.item()
    return value


def normalize_for_json(value: Any) -> Any:
    """Converte strutture sostituendo numpy scalars/array con tipi Python."""
    if isinstance(value, dict):
        return {str(k): normalize_for_json(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [normalize_for_json(v) for v in value]
    if isinstance(value, np.ndarray):
        return normalize_for_json(value.tolist())
    return _to_plain_number(value)


def dump_json(value: Any) -> str:
    """JSON deterministico (chiavi ordinate) per manifest e report."""
    return json.dumps(normalize_for_json(value), sort_keys=True, indent=2) + "\n"


def write_json(path: PathLike, value: Any) -> Path:
    return atomic_write_text(path, dump_json(value))


def sha256_bytes(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


def sha256_file(path: PathLike) -> str:
    """Hash SHA-256 del contenuto di un file."""
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


class MetricsLog:
    """
    Raccoglie un record per step e lo scrive in JSON-lines.

    Il file viene riscritto atomicamente a ogni flush.
    """

    def __init__(self, path: PathLike | None = None) -> None:
        self.path = Path(path) if path is not None else None
        self.records: List[Dict[str, Any]] = []

    def append(self, record: Dict[str, Any]) -> None:
        self.records.append(normalize_for_json(record))

    def to_text(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def flush(self) -> None:
        if self.path is None:
            return
        atomic_write_text(self.path, self.to_text())
        logger.info(f"Metriche salvate: {self.path} ({len(self.records)} record)")


def read_metrics(path: PathLike) -> List[Dict[str, Any]]:
    """Legge un file JSON-lines di metriche."""
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def matrix_to_csv(matrix: np.ndarray, columns: Iterable[str] | None = None) -> str:
    """Formatta una matrice in CSV con 9 cifre significative."""
    df = pd.DataFrame(np.asarray(matrix, dtype=np.float64))
    if columns is not None:
        df.columns = list(columns)
    return df.to_csv(index=False, header=columns is not None, float_format="%.9g")


def write_matrix_csv(path: PathLike, matrix: np.ndarray, columns: Iterable[str] | None = None) -> Path:
    return atomic_write_text(path, matrix_to_csv(matrix, columns))


def read_matrix_csv(path: PathLike, header: bool = False) -> np.ndarray:
    """Rilegge una matrice scritta da `write_matrix_csv`."""
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    df = pd.read_csv(io.StringIO(text), header=0 if header else None)
    return df.to_numpy(dtype=np.float64)
