"""Named parameter collections and weight initialization."""

from __future__ import annotations

import hashlib

import numpy as np

from .autodiff import Tensor
from .errors import ContractError, ShapeError
from .rng import Rng


class ParamSet:
    """Ordered name -> Tensor mapping holding one model's weights."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}

    def add(self, name: str, t: Tensor) -> Tensor:
        if name in self._tensors:
            raise ContractError(f"duplicate parameter name {name!r}")
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def tensors(self) -> list[Tensor]:
        return list(self._tensors.values())

    def items(self):
        return self._tensors.items()

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self._tensors.items()}

    def clone(self) -> "ParamSet":
        out = ParamSet()
        for name, t in self._tensors.items():
            out.add(name, Tensor(t.data.copy(), requires_grad=t.requires_grad))
        return out

    def copy_from(self, other: "ParamSet") -> None:
        """Load another set's values in place; names and shapes must match."""
        if self.names() != other.names():
            raise ShapeError("parameter names differ")
        for name, t in self._tensors.items():
            src = other[name].data
            if src.shape != t.data.shape:
                raise ShapeError(f"shape mismatch for {name!r}")
            t.data[...] = src

    def set_requires_grad(self, flag: bool) -> None:
        for t in self._tensors.values():
            t.requires_grad = flag

    def num_values(self) -> int:
        return sum(t.data.size for t in self._tensors.values())

    def content_hash(self) -> str:
        """SHA-256 over names, shapes and raw little-endian float bytes."""
        h = hashlib.sha256()
        for name, t in self._tensors.items():
            h.update(name.encode("utf-8"))
            h.update(repr(t.data.shape).encode("ascii"))
            h.update(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
        return h.hexdigest()


def conv_param(rng: Rng, out_c: int, in_c: int, k: int) -> Tensor:
    """He-normal conv kernel, std = sqrt(2 / fan_in) with fan_in = in_c * k * k."""
    std = float(np.sqrt(2.0 / (in_c * k * k)))
    return Tensor(rng.normal((out_c, in_c, k, k), std=std), requires_grad=True)


def conv_transpose_param(rng: Rng, in_c: int, out_c: int, k: int) -> Tensor:
    std = float(np.sqrt(2.0 / (in_c * k * k)))
    return Tensor(rng.normal((in_c, out_c, k, k), std=std), requires_grad=True)


def linear_param(rng: Rng, in_f: int, out_f: int) -> Tensor:
    std = float(np.sqrt(2.0 / in_f))
    return Tensor(rng.normal((in_f, out_f), std=std), requires_grad=True)


def zeros_param(n: int) -> Tensor:
    return Tensor(np.zeros(n, dtype=np.float32), requires_grad=True)


def ones_param(n: int) -> Tensor:
    return Tensor(np.ones(n, dtype=np.float32), requires_grad=True)
