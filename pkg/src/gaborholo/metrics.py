from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MetricsReport:
    mse: float
    psnr: float  # dB for unit peak; inf when mse == 0
    max_abs_error: float

    def format(self) -> str:
        return f"mse={format_number(self.mse)} psnr={format_number(self.psnr)} maxabs={format_number(self.max_abs_error)}"


def format_number(v: float) -> str:
    # repr is locale independent
    return "inf" if math.isinf(v) else repr(float(v))


def compare(a: np.ndarray, b: np.ndarray) -> MetricsReport:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image sizes differ: {a.shape} vs {b.shape}")
    diff = a - b
    mse = float(np.mean(diff * diff))
    psnr = math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)
    return MetricsReport(mse, psnr, float(np.max(np.abs(diff))))
