"""
Numerics - Algebra densa float64, parametri differenziabili e AdamW.

Gestisce:
- Prodotto matriciale e softmax con controlli di forma/finitezza
- Parameter: valore, gradiente e momenti dell'ottimizzatore
- AdamW con weight decay disaccoppiato
- Scheduler esponenziale del learning rate (per epoca)
- Gradiente per differenze finite centrali (oracolo di verifica)
"""

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from config import OptimizerConfig

logger = logging.getLogger(__name__)

DEFAULT_FD_STEP = 1e-5


class ShapeError(ValueError):
    """Dimensioni incompatibili tra operandi."""


class NumericalError(ArithmeticError):
    """Valori non finiti (NaN/Inf) in un'operazione numerica."""


def as_matrix(values, name: str = "matrix") -> np.ndarray:
    """Converte in matrice 2-D float64 (un vettore diventa una riga)."""
    array = np.asarray(values, dtype=np.float64)
    if array.ndim == 1:
        array = array[np.newaxis, :]
    if array.ndim != 2:
        raise ShapeError(f"{name}: attesa matrice 2-D, trovato ndim={array.ndim}")
    return array


def ensure_finite(array: np.ndarray, name: str) -> np.ndarray:
    if not np.all(np.isfinite(array)):
        raise NumericalError(f"{name}: valori non finiti (NaN/Inf)")
    return array


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """
    Prodotto matriciale con controllo delle forme.

    Args:
        a: Matrice (r x k) o vettore (k,)
        b: Matrice (k x c)

    Returns:
        Prodotto; un vettore in ingresso produce un vettore in uscita
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    inner_a = a.shape[-1] if a.ndim >= 1 else None
    if b.ndim != 2 or a.ndim not in (1, 2) or inner_a != b.shape[0]:
        raise ShapeError(f"matmul: forme incompatibili {a.shape} x {b.shape}")
    return ensure_finite(a @ b, "matmul")


def softmax_row(v: np.ndarray) -> np.ndarray:
    """Softmax stabile (sottrazione del massimo) di un vettore."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ShapeError(f"softmax_row: atteso vettore non vuoto, trovato forma {v.shape}")
    ensure_finite(v, "softmax_row input")
    exps = np.exp(v - v.max())
    return exps / exps.sum()


@dataclass
class Parameter:
    """Tensore addestrabile con stato dell'ottimizzatore."""

    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)
    moment1: np.ndarray = field(init=False)
    moment2: np.ndarray = field(init=False)
    step_count: int = 0

    def __post_init__(self) -> None:
        self.value = as_matrix(self.value, self.name).copy()
        self.grad = np.zeros_like(self.value)
        self.moment1 = np.zeros_like(self.value)
        self.moment2 = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def norm(self) -> float:
        return float(np.sqrt(np.sum(self.value * self.value)))


def adamw_step(p: Parameter, lr: float, cfg: OptimizerConfig) -> Parameter:
    """
    Un passo AdamW in-place su `p` (weight decay disaccoppiato).

        m_t = b1*m + (1-b1)*g ;  v_t = b2*v + (1-b2)*g^2
        theta <- theta - lr*wd*theta - lr * m_hat / (sqrt(v_hat) + eps)

    Il gradiente viene azzerato dopo il passo.
    """
    if lr <= 0:
        raise ValueError(f"learning rate non valido: {lr}")
    if not np.all(np.isfinite(p.grad)):
        raise NumericalError(f"gradiente non finito per il parametro '{p.name}'")

    p.step_count += 1
    t = p.step_count
    b1, b2 = cfg.beta1, cfg.beta2

    if cfg.weight_decay != 0.0:
        p.value -= lr * cfg.weight_decay * p.value

    p.moment1 = b1 * p.moment1 + (1.0 - b1) * p.grad
    p.moment2 = b2 * p.moment2 + (1.0 - b2) * (p.grad * p.grad)

    m_hat = p.moment1 / (1.0 - b1 ** t)
    v_hat = p.moment2 / (1.0 - b2 ** t)
    p.value -= lr * m_hat / (np.sqrt(v_hat) + cfg.epsilon)

    p.zero_grad()
    return p


def lr_at_epoch(epoch: int, cfg: OptimizerConfig) -> float:
    """Learning rate all'epoca `epoch`: initial_lr * decay_factor^epoch."""
    if epoch < 0:
        raise ValueError(f"epoca negativa: {epoch}")
    return cfg.initial_lr * cfg.decay_factor ** epoch


def finite_diff_gradient(
    f: Callable[[Parameter], float],
    p: Parameter,
    h: float = DEFAULT_FD_STEP,
) -> np.ndarray:
    """
    Gradiente numerico (f(x+h) - f(x-h)) / 2h per ogni coordinata di p.value.

    Il valore del parametro viene ripristinato esattamente dopo ogni coppia
    di valutazioni.
    """
    if h <= 0:
        raise ValueError(f"passo h non valido: {h}")

    grad = np.zeros_like(p.value)
    flat = p.value.reshape(-1)
    for idx in range(flat.size):
        original = flat[idx]
        flat[idx] = original + h
        f_plus = float(f(p))
        flat[idx] = original - h
        f_minus = float(f(p))
        flat[idx] = original
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericalError(f"valutazione non finita di f per '{p.name}' (indice {idx})")
        grad.reshape(-1)[idx] = (f_plus - f_minus) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max|a-n| / max(max|a|, max|n|, floor)."""
    diff = float(np.max(np.abs(analytic - numeric))) if analytic.size else 0.0
    scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)), floor)
    return diff / scale


def init_matrix(
    rng: np.random.Generator,
    shape: tuple,
    fan_in: int,
    distribution: str = "uniform_fan_in",
) -> np.ndarray:
    """Inizializzazione U(-1/sqrt(fan_in), 1/sqrt(fan_in)) o normale con la stessa scala."""
    bound = 1.0 / np.sqrt(fan_in)
    if distribution == "uniform_fan_in":
        return rng.uniform(-bound, bound, size=shape)
    if distribution == "normal_fan_in":
        return rng.normal(0.0, bound, size=shape)
    raise ValueError(f"distribuzione di inizializzazione sconosciuta: {distribution}")
