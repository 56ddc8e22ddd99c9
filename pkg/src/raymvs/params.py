"""Named parameter registry shared by the coarse and ray networks."""

from __future__ import annotations

from collections.abc import Iterator

import numpy as np

from .diffcore import Tensor


class ParamStore:
    """Ordered mapping from dotted names to trainable tensors."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already registered")
        t = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def items(self):
        return self._params.items()

    def subset(self, prefix: str) -> list[Tensor]:
        return [t for n, t in self._params.items() if n.startswith(prefix)]

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._params.items()}

    def load(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        missing = [n for n in self._params if n not in state]
        extra = [n for n in state if n not in self._params]
        if strict and (missing or extra):
            raise KeyError(f"parameter mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for n, t in self._params.items():
            if n not in state:
                continue
            v = np.asarray(state[n])
            if v.shape != t.shape:
                raise ValueError(f"parameter {n!r}: shape {v.shape} does not match {t.shape}")
            t.data = v.astype(self.dtype)

    def zero_(self) -> None:
        for t in self._params.values():
            t.data[...] = 0

    def count(self) -> int:
        return sum(t.data.size for t in self._params.values())


def he_normal(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def add_conv(store: ParamStore, rng, name: str, cin: int, cout: int, k: int, nd: int,
             transpose: bool = False) -> None:
    shape = (cin, cout) + (k,) * nd if transpose else (cout, cin) + (k,) * nd
    store.add(f"{name}.w", he_normal(rng, shape, cin * k ** nd))
    store.add(f"{name}.b", np.zeros(cout))


def add_linear(store: ParamStore, rng, name: str, cin: int, cout: int, relu: bool = True) -> None:
    w = he_normal(rng, (cin, cout), cin) if relu else glorot_uniform(rng, cin, cout)
    store.add(f"{name}.w", w)
    store.add(f"{name}.b", np.zeros(cout))
