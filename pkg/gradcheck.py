"""
Gradcheck - Verifica del backward esplicito contro le differenze finite.

Per ogni residual mode costruisce un modello piccolo, calcola il gradiente
analitico di L = <R, E> (R casuale fisso) e lo confronta con il gradiente
per differenze finite centrali di ogni parametro.
"""

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from config import RESIDUAL_MODES, ConfigError, RsmConfig
from numerics import DEFAULT_FD_STEP, NumericalError, Parameter, finite_diff_gradient, relative_error
from rsm_core import ResidualSpeakerModule

logger = logging.getLogger(__name__)

GRADCHECK_TOLERANCE = 1e-4
MAX_GRADCHECK_DS = 16


@dataclass
class ParameterCheck:
    name: str
    shape: List[int]
    max_relative_error: float
    passed: bool


@dataclass
class ModeReport:
    residual_mode: str
    checks: List[ParameterCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)

    @property
    def worst(self) -> float:
        return max((c.max_relative_error for c in self.checks), default=0.0)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(c) for c in self.checks]).set_index("name")


@dataclass
class GradcheckReport:
    tolerance: float
    num_frames: int
    modes: List[ModeReport] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(mode.passed for mode in self.modes)

    def to_dict(self) -> Dict:
        return {
            "tolerance": self.tolerance,
            "num_frames": self.num_frames,
            "passed": self.passed,
            "modes": [
                {"residual_mode": m.residual_mode, "passed": m.passed, "checks": [asdict(c) for c in m.checks]}
                for m in self.modes
            ],
        }


def check_mode(
    cfg: RsmConfig,
    frames: np.ndarray,
    direction: np.ndarray,
    h: float = DEFAULT_FD_STEP,
    tolerance: float = GRADCHECK_TOLERANCE,
) -> ModeReport:
    """Confronta gradiente analitico e numerico per tutti i parametri di un modello."""
    model = ResidualSpeakerModule(cfg)
    model.zero_grad()
    model.forward(frames)
    model.backward(direction)
    analytic = model.gradients()

    def objective(_: Parameter) -> float:
        output, _tape = model.forward_with_tape(frames)
        return float(np.dot(output.embedding, direction))

    report = ModeReport(residual_mode=cfg.residual_mode)
    for name, param in model.params.items():
        try:
            numeric = finite_diff_gradient(objective, param, h)
        except NumericalError as e:
            raise NumericalError(f"{name}: {e}") from e
        if not np.all(np.isfinite(analytic[name])):
            raise NumericalError(f"{name}: gradiente analitico non finito")
        error = relative_error(analytic[name], numeric)
        report.checks.append(ParameterCheck(name, list(param.shape), error, error <= tolerance))
        if error > tolerance:
            logger.warning(f"[{cfg.residual_mode}] {name}: errore relativo {error:.3e} > {tolerance:g}")
    return report


def run_gradcheck(
    cfg: RsmConfig,
    num_frames: int = 3,
    seed: Optional[int] = None,
    modes: Sequence[str] = RESIDUAL_MODES,
    h: float = DEFAULT_FD_STEP,
    tolerance: float = GRADCHECK_TOLERANCE,
) -> GradcheckReport:
    """
    Gradcheck completo in tutti i residual mode richiesti.

    Raises:
        ConfigError: d_s oltre la dimensione ammessa per il controllo
        NumericalError: intermedio non finito (il messaggio nomina il parametro)
    """
    if cfg.d_s > MAX_GRADCHECK_DS:
        raise ConfigError("model.d_s", f"gradcheck richiede d_s <= {MAX_GRADCHECK_DS}, trovato {cfg.d_s}")
    if num_frames < 1:
        raise ConfigError("num_frames", "deve essere >= 1")

    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    frames = rng.normal(size=(num_frames, cfg.mel_bins))
    direction = rng.normal(size=cfg.d_s)

    report = GradcheckReport(tolerance=tolerance, num_frames=num_frames)
    for mode in modes:
        mode_report = check_mode(replace(cfg, residual_mode=mode), frames, direction, h, tolerance)
        report.modes.append(mode_report)
        status = "OK" if mode_report.passed else "FALLITO"
        logger.info(f"Gradcheck {mode}: {status} (errore massimo {mode_report.worst:.3e})")
    return report
