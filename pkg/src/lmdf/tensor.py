"""Trainable parameter tensors and weight initialization.

Plain ``numpy.ndarray`` is the tensor carrier throughout the package
(images, activations, gradients). ``ParamTensor`` bundles a value array
with its gradient and Adam moment buffers so optimizer state travels
with the parameter it belongs to.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ShapeError


class ParamTensor:
    """A trainable tensor: value plus gradient and Adam moment buffers.

    All four arrays share one shape and dtype. ``step_count`` counts the
    optimizer steps applied to this parameter (drives Adam bias correction).
    """

    __slots__ = ("name", "value", "grad", "adam_m", "adam_v", "step_count")

    def __init__(self, value: np.ndarray, name: str = ""):
        value = np.asarray(value)
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)
        self.adam_m = np.zeros_like(value)
        self.adam_v = np.zeros_like(value)
        self.step_count = 0

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def dtype(self):
        return self.value.dtype

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.value.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match parameter "
                f"'{self.name}' shape {self.value.shape}"
            )
        self.grad += g

    def astype(self, dtype) -> "ParamTensor":
        """Copy with a new dtype; optimizer state is reset."""
        return ParamTensor(self.value.astype(dtype), name=self.name)

    def __repr__(self) -> str:
        return f"ParamTensor(name={self.name!r}, shape={self.value.shape}, dtype={self.value.dtype})"


def uniform_init(rng: np.random.Generator, shape, fan_in: int, fan_out: int,
                 dtype=np.float32) -> np.ndarray:
    """Uniform init scaled by fan-in/fan-out, U(-limit, limit) with
    limit = sqrt(6 / (fan_in + fan_out))."""
    limit = math.sqrt(6.0 / float(fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def conv_kernel(rng: np.random.Generator, k: int, cin: int, cout: int,
                dtype=np.float32, name: str = "") -> ParamTensor:
    """k x k x cin x cout convolution kernel, fan-scaled uniform."""
    fan_in = k * k * cin
    fan_out = k * k * cout
    return ParamTensor(uniform_init(rng, (k, k, cin, cout), fan_in, fan_out, dtype), name=name)


def affine_params(rng: np.random.Generator, out_dim: int, in_dim: int,
                  dtype=np.float32, name: str = "") -> tuple[ParamTensor, ParamTensor]:
    """Weight (out_dim x in_dim) fan-scaled uniform, bias zero."""
    w = ParamTensor(uniform_init(rng, (out_dim, in_dim), in_dim, out_dim, dtype),
                    name=f"{name}/w" if name else "w")
    b = ParamTensor(np.zeros(out_dim, dtype=dtype), name=f"{name}/b" if name else "b")
    return w, b
