"""Reading size-3 convolution kernels as proportional/integral/derivative filters.

A kernel ``[a, b, c]`` is a combination of three basis kernels::

    proportional  [0, 1, 0]
    integral      [1/3, 1/3, 1/3]
    derivative    [-1, 0, 1]

and the second difference ``[1, -2, 1]`` is the combination (-3, 3, 0).
The integral over a window is the inclusive sum of its three samples; the 1/3
lives in the integral kernel.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

C_P = np.array([0.0, 1.0, 0.0])
C_I = np.array([1.0, 1.0, 1.0]) / 3.0
C_D = np.array([-1.0, 0.0, 1.0])
C_D2 = np.array([1.0, -2.0, 1.0])


@dataclass(frozen=True)
class Kernel3:
    a: float
    b: float
    c: float

    def as_array(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c], dtype=np.float64)


@dataclass(frozen=True)
class PidCoefficients:
    kp: float
    ki: float
    kd: float


@dataclass(frozen=True)
class SecondOrderCoefficients:
    kp2: float
    kd2: float
    ks: float


@dataclass(frozen=True)
class SignalWindow:
    """Samples f(x-1), f(x), f(x+1)."""

    left: float
    center: float
    right: float


def compose_kernel(c: PidCoefficients) -> Kernel3:
    third = c.ki / 3.0
    return Kernel3(third - c.kd, c.kp + third, third + c.kd)


def decompose_kernel(k: Kernel3) -> PidCoefficients:
    side = (k.a + k.c) / 2.0
    return PidCoefficients(kp=k.b - side, ki=3.0 * side, kd=(k.c - k.a) / 2.0)


def to_second_order(c: PidCoefficients) -> SecondOrderCoefficients:
    return SecondOrderCoefficients(kp2=c.kp + c.ki, kd2=c.kd, ks=c.ki / 3.0)


def window_operators(w: SignalWindow) -> tuple[float, float, float]:
    """First difference, second difference and inclusive 3-sample integral."""
    first = w.right - w.left
    second = w.right - 2.0 * w.center + w.left
    integral = w.left + w.center + w.right
    return first, second, integral


def _identity(z: float) -> float:
    return z


def prelu_scalar(alpha: float) -> Callable[[float], float]:
    return lambda z: z if z >= 0 else alpha * z


def relu_scalar(z: float) -> float:
    return z if z > 0 else 0.0


def single_layer_response(w: SignalWindow, c: PidCoefficients,
                          nonlinearity: Callable[[float], float] = _identity) -> float:
    """g(kp*f + (ki/3)*integral + kd*f') for one window."""
    first, _, integral = window_operators(w)
    z = c.kp * w.center + (c.ki / 3.0) * integral + c.kd * first
    return nonlinearity(z)


def second_order_response(w: SignalWindow, s: SecondOrderCoefficients,
                          nonlinearity: Callable[[float], float] = _identity) -> float:
    """The same response written as kp2*f + kd2*f' + ks*f''."""
    first, second, _ = window_operators(w)
    return nonlinearity(s.kp2 * w.center + s.kd2 * first + s.ks * second)


def apply_kernel(kernel: Kernel3, signal: np.ndarray) -> np.ndarray:
    """Valid-mode correlation of a 1-D signal with ``kernel`` (length n-2)."""
    k = kernel.as_array()
    s = np.asarray(signal, dtype=np.float64)
    return k[0] * s[:-2] + k[1] * s[1:-1] + k[2] * s[2:]


# ---------------------------------------------------------------------------
# kernel report


REPORT_HEADER = ["layer", "outc", "inc", "axis", "kp", "ki", "kd", "ep", "ei", "ed"]


@dataclass(frozen=True)
class KernelPidRow:
    layer: str
    outc: int
    inc: int
    axis: str  # row0..row2 or col0..col2
    coeffs: PidCoefficients
    energy: tuple[float, float, float]

    @property
    def second_order(self) -> SecondOrderCoefficients:
        return to_second_order(self.coeffs)


def energy_fractions(c: PidCoefficients) -> tuple[float, float, float]:
    sq = np.array([c.kp, c.ki, c.kd], dtype=np.float64) ** 2
    tot = sq.sum()
    if tot == 0:
        return (0.0, 0.0, 0.0)
    return tuple(float(v) for v in sq / tot)


def _kernel_rows(layer: str, weight: np.ndarray) -> Iterable[KernelPidRow]:
    w = np.asarray(weight, dtype=np.float64)
    if w.ndim != 5 or w.shape[2:] != (1, 3, 3):
        raise ValueError(f"{layer}: expected [Cout, Cin, 1, 3, 3] kernels, got {w.shape}")
    for o in range(w.shape[0]):
        for i in range(w.shape[1]):
            k = w[o, i, 0]
            for axis, taps in [(f"row{r}", k[r]) for r in range(3)] + [(f"col{c}", k[:, c]) for c in range(3)]:
                coeffs = decompose_kernel(Kernel3(*map(float, taps)))
                yield KernelPidRow(layer, o, i, axis, coeffs, energy_fractions(coeffs))


def report_kernel_pid(weights) -> list[KernelPidRow]:
    """Decompose every row and column of every 3x3 conv kernel.

    ``weights`` is a ``ParameterStore`` or a plain name -> array mapping;
    conv kernels are recognized by their [Cout, Cin, 1, 3, 3] shape.
    """
    items = weights.items()
    rows: list[KernelPidRow] = []
    for name, value in items:
        arr = getattr(value, "data", value)
        arr = np.asarray(arr)
        if arr.ndim == 5 and arr.shape[2:] == (1, 3, 3):
            rows.extend(_kernel_rows(name, arr))
    if not rows:
        raise ValueError("report_kernel_pid: no convolution weights found")
    return rows


def kernel_report_csv(rows: list[KernelPidRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_HEADER)
    for r in rows:
        writer.writerow([r.layer, r.outc, r.inc, r.axis,
                         repr(r.coeffs.kp), repr(r.coeffs.ki), repr(r.coeffs.kd),
                         *(repr(e) for e in r.energy)])
    return buf.getvalue()
