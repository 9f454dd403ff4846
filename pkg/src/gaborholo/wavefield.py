"""Scalar angular-spectrum propagation on square power-of-two grids.

Fields are plain numpy arrays: ``complex128`` for wave fields and
non-negative ``float64`` for images. Frequency-domain arrays use the
wraparound layout (index ``m`` is frequency ``m`` for ``m < n/2`` and
``m - n`` otherwise); nothing is ever centre-shifted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

# Optics of the Gabor microscope the datasets are modelled on.
DEFAULT_WAVELENGTH = 658e-9
DEFAULT_PITCH = 5.5e-6
DEFAULT_DISTANCE = 0.065


class FieldError(ValueError):
    """Invalid grid size, non-finite values or mismatched dimensions."""


def is_power_of_two(n: int) -> bool:
    return n >= 2 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class PropagationParams:
    """Optical set-up for one propagation.

    ``z`` is signed: negative distances propagate back towards the sensor
    (interferogram synthesis), positive ones refocus onto the object.
    """

    wavelength: float = DEFAULT_WAVELENGTH
    pixel_pitch: float = DEFAULT_PITCH
    n: int = 512
    z: float = DEFAULT_DISTANCE

    def __post_init__(self):
        if not (self.wavelength > 0 and math.isfinite(self.wavelength)):
            raise FieldError(f"wavelength must be positive, got {self.wavelength}")
        if not (self.pixel_pitch > 0 and math.isfinite(self.pixel_pitch)):
            raise FieldError(f"pixel_pitch must be positive, got {self.pixel_pitch}")
        if not is_power_of_two(int(self.n)):
            raise FieldError(f"grid size must be a power of two >= 2, got {self.n}")
        if not math.isfinite(self.z):
            raise FieldError(f"distance must be finite, got {self.z}")

    @property
    def k(self) -> float:
        return 2.0 * math.pi / self.wavelength

    def with_z(self, z: float) -> "PropagationParams":
        return PropagationParams(self.wavelength, self.pixel_pitch, self.n, z)

    def spatial_frequencies(self) -> np.ndarray:
        """Angular spatial frequencies (rad/m) of one axis, wraparound order."""
        m = np.arange(self.n)
        m = np.where(m < self.n // 2, m, m - self.n)
        return 2.0 * math.pi * m / (self.n * self.pixel_pitch)


def check_field(field: np.ndarray) -> np.ndarray:
    """Validate a square power-of-two field and return it as complex128."""
    field = np.asarray(field)
    if field.ndim != 2 or field.shape[0] != field.shape[1]:
        raise FieldError(f"field must be square 2-D, got shape {field.shape}")
    if not is_power_of_two(field.shape[0]):
        raise FieldError(f"field side must be a power of two >= 2, got {field.shape[0]}")
    field = field.astype(np.complex128, copy=False)
    if not np.all(np.isfinite(field)):
        raise FieldError("field contains NaN or Inf")
    return field


def check_image(image: np.ndarray) -> np.ndarray:
    """Validate a square, finite, non-negative real image (float64)."""
    image = np.asarray(image)
    if np.iscomplexobj(image):
        raise FieldError("image must be real-valued")
    image = image.astype(np.float64, copy=False)
    if image.ndim != 2 or image.shape[0] != image.shape[1]:
        raise FieldError(f"image must be square 2-D, got shape {image.shape}")
    if not is_power_of_two(image.shape[0]):
        raise FieldError(f"image side must be a power of two >= 2, got {image.shape[0]}")
    if not np.all(np.isfinite(image)):
        raise FieldError("image contains NaN or Inf")
    if np.any(image < 0):
        raise FieldError("image has negative values")
    return image


# -- radix-2 FFT ---------------------------------------------------------------


@lru_cache(maxsize=None)
def _bit_reversal(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


@lru_cache(maxsize=None)
def _twiddles(size: int, inverse: bool) -> np.ndarray:
    sign = 1.0 if inverse else -1.0
    w = np.exp(sign * 2j * np.pi * np.arange(size // 2) / size)
    w.setflags(write=False)
    return w


def _fft_last_axis(x: np.ndarray, inverse: bool) -> np.ndarray:
    """Iterative decimation-in-time Cooley-Tukey along the last axis."""
    n = x.shape[-1]
    lead = x.shape[:-1]
    x = x[..., _bit_reversal(n)]
    size = 2
    while size <= n:
        half = size // 2
        blocks = x.reshape(lead + (n // size, size))
        even = blocks[..., :half]
        odd = blocks[..., half:] * _twiddles(size, inverse)
        x = np.concatenate((even + odd, even - odd), axis=-1).reshape(lead + (n,))
        size *= 2
    return x


def dft2(field: np.ndarray, inverse: bool = False) -> np.ndarray:
    """2-D DFT of a square field.

    Forward uses ``exp(-2*pi*i*m*x/n)`` and no scaling; the inverse uses the
    positive exponent and divides by ``n**2``. Leading batch axes are allowed
    as long as the last two form a valid square field.
    """
    field = np.asarray(field, dtype=np.complex128)
    if field.ndim < 2:
        raise FieldError("dft2 needs at least two dimensions")
    if field.ndim == 2:
        check_field(field)
    elif field.shape[-1] != field.shape[-2] or not is_power_of_two(field.shape[-1]):
        raise FieldError(f"last two axes must be square power-of-two, got {field.shape}")
    out = _fft_last_axis(field, inverse)
    out = np.swapaxes(_fft_last_axis(np.swapaxes(out, -1, -2), inverse), -1, -2)
    if inverse:
        out = out / (field.shape[-1] * field.shape[-2])
    return np.ascontiguousarray(out)


def idft2(spectrum: np.ndarray) -> np.ndarray:
    return dft2(spectrum, inverse=True)


# -- propagation ---------------------------------------------------------------


def propagating_mask(params: PropagationParams) -> np.ndarray:
    """Boolean map of frequency samples with real axial wavenumber."""
    f = params.spatial_frequencies()
    radicand = params.k**2 - f[:, None] ** 2 - f[None, :] ** 2
    return radicand >= 0


def transfer_function(params: PropagationParams) -> np.ndarray:
    """Band-limited angular-spectrum factor ``exp(i*kz*z)``.

    Evanescent samples are set to exactly zero.
    """
    f = params.spatial_frequencies()
    radicand = params.k**2 - f[:, None] ** 2 - f[None, :] ** 2
    keep = radicand >= 0
    kz = np.sqrt(np.where(keep, radicand, 0.0))
    return np.where(keep, np.exp(1j * kz * params.z), 0.0 + 0.0j)


def propagate(field: np.ndarray, params: PropagationParams) -> np.ndarray:
    field = check_field(field)
    if field.shape[0] != params.n:
        raise FieldError(f"field is {field.shape[0]}x{field.shape[0]} but params.n is {params.n}")
    return idft2(dft2(field) * transfer_function(params))


def rectify(field: np.ndarray) -> np.ndarray:
    """Pointwise modulus of a complex field."""
    return np.abs(check_field(field))


def reconstruct_hologram(interferogram: np.ndarray, params: PropagationParams) -> np.ndarray:
    """Classical magnitude hologram: refocus an interferogram by +z."""
    if not params.z > 0:
        raise FieldError(f"reconstruction distance must be positive, got z={params.z}")
    image = check_image(interferogram)
    return rectify(propagate(image.astype(np.complex128), params))
