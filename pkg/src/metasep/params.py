"""Flat parameter vectors with a named block layout."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .errors import ConfigError, NumericalError


@dataclass(frozen=True)
class Block:
    name: str
    shape: Tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def stop(self) -> int:
        return self.offset + self.size


def make_layout(named_shapes) -> Tuple[Block, ...]:
    """Pack ``(name, shape)`` pairs back to back."""
    blocks, offset = [], 0
    for name, shape in named_shapes:
        block = Block(name, tuple(int(s) for s in shape), offset)
        blocks.append(block)
        offset = block.stop
    return tuple(blocks)


def check_layout(layout, total) -> None:
    offset = 0
    names = set()
    for block in layout:
        if block.offset != offset:
            raise ConfigError(f"block {block.name!r} starts at {block.offset}, expected {offset}")
        if block.name in names:
            raise ConfigError(f"duplicate block name {block.name!r}")
        names.add(block.name)
        offset = block.stop
    if offset != total:
        raise ConfigError(f"layout covers {offset} values but vector has {total}")


def first_nonfinite_block(values, layout):
    for block in layout:
        if not np.all(np.isfinite(values[block.offset:block.stop])):
            return block.name
    return None


class ParamVector:
    """Model parameters as one float64 vector plus the layout naming its blocks."""

    __slots__ = ("values", "layout")

    def __init__(self, values, layout):
        values = np.array(values, dtype=np.float64).reshape(-1)
        layout = tuple(layout)
        check_layout(layout, values.shape[0])
        bad = first_nonfinite_block(values, layout)
        if bad is not None:
            raise NumericalError(f"non-finite values in parameter block {bad!r}", block=bad)
        self.values = values
        self.layout = layout

    def __len__(self):
        return self.values.shape[0]

    def __repr__(self):
        names = ", ".join(b.name for b in self.layout)
        return f"ParamVector(n={len(self)}, blocks=[{names}])"

    def block(self, name) -> np.ndarray:
        for b in self.layout:
            if b.name == name:
                return self.values[b.offset:b.stop].reshape(b.shape)
        raise KeyError(name)

    def with_values(self, values) -> "ParamVector":
        return ParamVector(values, self.layout)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def same_layout(self, other) -> bool:
        return self.layout == other.layout

    def __eq__(self, other):
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.layout == other.layout and np.array_equal(self.values, other.values)

    __hash__ = None
