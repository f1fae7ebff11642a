import itertools
import math
import os
from typing import Any, Iterable, Sequence, Tuple, Union

import numpy as np
from scipy import fft as sp_fft
from scipy import special

_DTYPES = {"float64": np.float64, "float32": np.float32}
_default_dtype = _DTYPES.get(os.environ.get("TERMINATOR_PRECISION", "float64"), np.float64)

POINTWISE_FUNCTIONS = ("sigmoid", "gelu", "sin", "square")
REDUCTIONS = ("mean", "sum", "var")


class ShapeError(ValueError):
    """Raised when tensor shapes, ranks or broadcasts are incompatible."""


def set_default_dtype(name: str) -> None:
    global _default_dtype
    if name not in _DTYPES:
        raise ValueError(f"unsupported precision {name!r}, expected one of {sorted(_DTYPES)}")
    _default_dtype = _DTYPES[name]


def default_dtype() -> Any:
    return _default_dtype


class Tensor:
    """Immutable dense real array stored row-major."""

    __slots__ = ("_data",)

    def __init__(self, data: Any, dtype: Any = None):
        arr = np.array(data, dtype=_default_dtype if dtype is None else dtype, copy=True)
        if any(extent < 1 for extent in arr.shape):
            raise ShapeError(f"all extents must be >= 1, got {arr.shape}")
        arr.setflags(write=False)
        self._data = arr

    @classmethod
    def wrap(cls, arr: np.ndarray) -> "Tensor":
        """Adopt a freshly computed array without copying it."""
        out = cls.__new__(cls)
        if arr.dtype not in (np.float64, np.float32):
            arr = arr.astype(_default_dtype)
        arr.setflags(write=False)
        out._data = arr
        return out

    @classmethod
    def zeros(cls, shape: Sequence[int]) -> "Tensor":
        return cls.wrap(np.zeros(tuple(shape), dtype=_default_dtype))

    @classmethod
    def ones(cls, shape: Sequence[int]) -> "Tensor":
        return cls.wrap(np.ones(tuple(shape), dtype=_default_dtype))

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> Tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return int(self._data.size)

    @property
    def dtype(self) -> Any:
        return self._data.dtype

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def item(self) -> float:
        if self._data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self._data.reshape(-1)[0])

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self._data)))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name})"


TensorLike = Union[Tensor, np.ndarray, Sequence[Any], float]


def as_tensor(x: TensorLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _arr(x: TensorLike) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=_default_dtype)


def check_broadcastable(target: Tuple[int, ...], source: Tuple[int, ...]) -> None:
    """Check that `source` stretches onto `target` along extent-1 axes only."""
    if len(source) > len(target):
        raise ShapeError(f"cannot broadcast {source} onto {target}")
    padded = (1,) * (len(target) - len(source)) + tuple(source)
    for t, s in zip(target, padded):
        if s != t and s != 1:
            raise ShapeError(f"cannot broadcast {source} onto {target}")


def ew_mul(a: TensorLike, b: TensorLike) -> Tensor:
    a_arr, b_arr = _arr(a), _arr(b)
    check_broadcastable(a_arr.shape, b_arr.shape)
    return Tensor.wrap(a_arr * b_arr)


def matmul(w: TensorLike, x: TensorLike) -> Tensor:
    w_arr, x_arr = _arr(w), _arr(x)
    if w_arr.ndim != 2 or x_arr.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {w_arr.shape} and {x_arr.shape}")
    if w_arr.shape[1] != x_arr.shape[0]:
        raise ShapeError(f"inner extents differ: {w_arr.shape} @ {x_arr.shape}")
    return Tensor.wrap(w_arr @ x_arr)


def kernel_offsets(kernel_shape: Tuple[int, ...]) -> Iterable[Tuple[int, ...]]:
    return itertools.product(*(range(k) for k in kernel_shape))


def window_slices(offset: Tuple[int, ...], spatial: Tuple[int, ...]) -> Tuple[slice, ...]:
    return (slice(None), slice(None)) + tuple(slice(o, o + n) for o, n in zip(offset, spatial))


def pad_same(z: np.ndarray, kernel_shape: Tuple[int, ...]) -> np.ndarray:
    pads = [(0, 0), (0, 0)] + [((k - 1) // 2, (k - 1) // 2) for k in kernel_shape]
    return np.pad(z, pads)


def depthwise_correlate(z: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Same-padded depthwise cross-correlation over any number of spatial axes."""
    kernel_shape = k.shape[2:]
    spatial = z.shape[2:]
    zp = pad_same(z, kernel_shape)
    out = np.zeros_like(z, dtype=np.result_type(z, k))
    bcast = (1, -1) + (1,) * len(spatial)
    for offset in kernel_offsets(kernel_shape):
        tap = k[(slice(None), 0) + offset].reshape(bcast)
        out += tap * zp[window_slices(offset, spatial)]
    return out


def _validate_depthwise(z: np.ndarray, k: np.ndarray, spatial_rank: int) -> None:
    if z.ndim != 2 + spatial_rank or k.ndim != 2 + spatial_rank:
        raise ShapeError(f"depthwise conv expects rank {2 + spatial_rank} operands, got {z.shape} and {k.shape}")
    if k.shape[0] != z.shape[1] or k.shape[1] != 1:
        raise ShapeError(f"kernel {k.shape} does not match {z.shape[1]} channels")
    if len(set(k.shape[2:])) != 1:
        raise ShapeError(f"kernel must be square, got {k.shape[2:]}")
    if k.shape[2] % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {k.shape[2]}")


def depthwise_conv2d(z: TensorLike, k: TensorLike) -> Tensor:
    z_arr, k_arr = _arr(z), _arr(k)
    _validate_depthwise(z_arr, k_arr, 2)
    return Tensor.wrap(depthwise_correlate(z_arr, k_arr))


def depthwise_conv1d(z: TensorLike, k: TensorLike) -> Tensor:
    z_arr, k_arr = _arr(z), _arr(k)
    _validate_depthwise(z_arr, k_arr, 1)
    return Tensor.wrap(depthwise_correlate(z_arr, k_arr))


def circular_convolve(z: np.ndarray, k: np.ndarray) -> np.ndarray:
    # scipy.fft handles every length exactly (mixed radix, Bluestein for large primes)
    n = z.shape[-1]
    spectrum = sp_fft.rfft(z, n=n, axis=-1) * sp_fft.rfft(k, n=n, axis=-1)
    return sp_fft.irfft(spectrum, n=n, axis=-1)


def circular_correlate(g: np.ndarray, k: np.ndarray) -> np.ndarray:
    n = g.shape[-1]
    spectrum = sp_fft.rfft(g, n=n, axis=-1) * np.conj(sp_fft.rfft(k, n=n, axis=-1))
    return sp_fft.irfft(spectrum, n=n, axis=-1)


def circular_conv_fft(z: TensorLike, k: TensorLike) -> Tensor:
    z_arr, k_arr = _arr(z), _arr(k)
    if z_arr.shape != k_arr.shape:
        raise ShapeError(f"circular convolution needs equal shapes, got {z_arr.shape} and {k_arr.shape}")
    return Tensor.wrap(circular_convolve(z_arr, k_arr).astype(z_arr.dtype, copy=False))


def normalize_axes(axes: Union[int, Sequence[int]], ndim: int) -> Tuple[int, ...]:
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for axis in axes:
        if not -ndim <= axis < ndim:
            raise ShapeError(f"axis {axis} out of range for rank {ndim}")
        out.append(axis % ndim)
    if len(set(out)) != len(out):
        raise ShapeError(f"repeated axes in {tuple(axes)}")
    return tuple(sorted(out))


def reduce(x: TensorLike, axes: Union[int, Sequence[int]], kind: str = "mean") -> Tensor:
    x_arr = _arr(x)
    axes = normalize_axes(axes, x_arr.ndim)
    if kind == "mean":
        out = x_arr.mean(axis=axes, keepdims=True)
    elif kind == "sum":
        out = x_arr.sum(axis=axes, keepdims=True)
    elif kind == "var":
        out = x_arr.var(axis=axes, keepdims=True)
    else:
        raise ValueError(f"unknown reduction {kind!r}, expected one of {REDUCTIONS}")
    return Tensor.wrap(np.asarray(out))


def pool_matrix(n_in: int, n_out: int, dtype: Any = None) -> np.ndarray:
    """Row i averages input cells floor(i*n_in/n_out) .. ceil((i+1)*n_in/n_out)."""
    if n_out < 1:
        raise ShapeError(f"target extent must be >= 1, got {n_out}")
    if n_out > n_in:
        raise ShapeError(f"target extent {n_out} exceeds input extent {n_in}")
    mat = np.zeros((n_out, n_in), dtype=_default_dtype if dtype is None else dtype)
    for i in range(n_out):
        start = (i * n_in) // n_out
        end = -((-(i + 1) * n_in) // n_out)
        mat[i, start:end] = 1.0 / (end - start)
    return mat


def adaptive_pool_array(x: np.ndarray, out_size: Sequence[int]) -> np.ndarray:
    spatial = x.shape[2:]
    if len(out_size) != len(spatial):
        raise ShapeError(f"pool target {tuple(out_size)} does not match spatial shape {spatial}")
    out = x
    for axis, (n_in, n_out) in enumerate(zip(spatial, out_size), start=2):
        mat = pool_matrix(n_in, n_out, x.dtype)
        out = np.moveaxis(np.tensordot(out, mat, axes=([axis], [1])), -1, axis)
    return out


def adaptive_avg_pool(x: TensorLike, out_h: int, out_w: int) -> Tensor:
    x_arr = _arr(x)
    if x_arr.ndim != 4:
        raise ShapeError(f"adaptive_avg_pool expects [B,C,H,W], got {x_arr.shape}")
    return Tensor.wrap(adaptive_pool_array(x_arr, (out_h, out_w)))


def adaptive_avg_pool1d(x: TensorLike, out_l: int) -> Tensor:
    x_arr = _arr(x)
    if x_arr.ndim != 3:
        raise ShapeError(f"adaptive_avg_pool1d expects [B,C,L], got {x_arr.shape}")
    return Tensor.wrap(adaptive_pool_array(x_arr, (out_l,)))


def sigmoid_array(x: np.ndarray) -> np.ndarray:
    return special.expit(x)


def gelu_array(x: np.ndarray) -> np.ndarray:
    return x * special.ndtr(x)


_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu_grad_array(x: np.ndarray) -> np.ndarray:
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return np.asarray(special.ndtr(x) + x * pdf, dtype=x.dtype)


def pointwise(x: TensorLike, fn: str) -> Tensor:
    x_arr = _arr(x)
    if fn == "sigmoid":
        out = sigmoid_array(x_arr)
    elif fn == "gelu":
        out = gelu_array(x_arr)
    elif fn == "sin":
        out = np.sin(x_arr)
    elif fn == "square":
        out = x_arr * x_arr
    else:
        raise ValueError(f"unknown pointwise function {fn!r}, expected one of {POINTWISE_FUNCTIONS}")
    return Tensor.wrap(np.asarray(out, dtype=x_arr.dtype))
