"""FP8 E4M3 round-trip emulation for low-precision linear layers.

The format has 1 sign bit, 4 exponent bits (bias 7), and 3 mantissa
bits, with no infinities: all-ones exponent codes are reclaimed as
finite values, so the largest finite magnitude is 448 and only the
code S.1111.111 is NaN. Subnormals share the minimum binade, giving a
smallest positive step of 2**-9. Conversion rounds to nearest with
ties to even and saturates beyond +/-448.

Only the numerics are emulated; storage stays in the input float dtype.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, straight_through

E4M3_MAX = 448.0

# Normals occupy binades [2**-6, 2**9); a 3-bit mantissa makes the ulp
# in binade [2**e, 2**(e+1)) equal to 2**(e-3). Below 2**-6 the ulp is
# pinned at the subnormal step 2**-9.
_SUBNORMAL_ULP_EXP = -9


def fp8_e4m3(x) -> np.ndarray:
    """Round an array to the nearest E4M3 value (saturating, NaN-preserving)."""
    arr = np.asarray(x)
    out_dtype = arr.dtype if arr.dtype.kind == "f" else np.dtype(np.float64)
    work = np.clip(arr.astype(np.float64), -E4M3_MAX, E4M3_MAX)
    # frexp writes |v| = m * 2**e with m in [0.5, 1), so floor(log2|v|) = e - 1.
    _, exps = np.frexp(work)
    ulp = np.ldexp(1.0, np.maximum(exps - 4, _SUBNORMAL_ULP_EXP))
    with np.errstate(invalid="ignore"):
        q = np.round(work / ulp) * ulp
    return q.astype(out_dtype)


def fp8_emulate(x: Tensor) -> Tensor:
    """Quantize-dequantize a tensor to E4M3, passing gradients straight through."""
    return straight_through(x, fp8_e4m3)
