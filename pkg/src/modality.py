import itertools
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

MaskVector = Tuple[int, ...]

MAX_GROUPS_FOR_ENUMERATION = 16
STD_FLOOR = 1e-8


class LayoutError(ValueError):
    """Raised for unknown groups, bad masks or vectors that do not fit a layout."""


@dataclass(frozen=True)
class ModalityLayout:
    """Ordered sensor/actuator groups making up the flattened vector x."""

    groups: Tuple[Tuple[str, int], ...]
    offsets: Dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        groups = tuple((str(name), int(dim)) for name, dim in self.groups)
        if not groups:
            raise LayoutError("A layout needs at least one group")
        names = [name for name, _ in groups]
        if len(set(names)) != len(names):
            raise LayoutError(f"Group names must be unique, got {names}")
        for name, dim in groups:
            if dim < 1:
                raise LayoutError(f"Group '{name}' has non-positive dimension {dim}")
        offsets, running = {}, 0
        for name, dim in groups:
            offsets[name] = running
            running += dim
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "offsets", offsets)

    @classmethod
    def from_pairs(cls, pairs: Iterable[Tuple[str, int]]) -> "ModalityLayout":
        return cls(tuple(pairs))

    @property
    def names(self) -> List[str]:
        return [name for name, _ in self.groups]

    @property
    def dims(self) -> List[int]:
        return [dim for _, dim in self.groups]

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    @property
    def total_dim(self) -> int:
        return sum(self.dims)

    def __contains__(self, name: str) -> bool:
        return name in self.offsets

    def dim(self, name: str) -> int:
        return self.dims[self.index(name)]

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise LayoutError(f"Unknown group '{name}', layout has {self.names}")

    def slice(self, name: str) -> slice:
        start = self.offsets.get(name)
        if start is None:
            raise LayoutError(f"Unknown group '{name}', layout has {self.names}")
        return slice(start, start + self.dim(name))

    def channels(self, names: Iterable[str]) -> np.ndarray:
        """Scalar channel indices of the given groups, in layout order."""
        wanted = set(names)
        for name in wanted:
            self.index(name)
        return np.array(
            [i for name in self.names if name in wanted for i in range(self.offsets[name], self.offsets[name] + self.dim(name))],
            dtype=int,
        )

    def subset(self, names: Iterable[str]) -> "ModalityLayout":
        """Layout restricted to `names`, keeping this layout's order."""
        wanted = set(names)
        for name in wanted:
            self.index(name)
        return ModalityLayout(tuple((n, d) for n, d in self.groups if n in wanted))

    def check_vector(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.total_dim:
            raise LayoutError(f"Vector of length {x.shape[-1]} does not fit layout {self.names} of size {self.total_dim}")
        return x

    def split(self, x: np.ndarray) -> Dict[str, np.ndarray]:
        x = self.check_vector(x)
        return {name: x[..., self.slice(name)] for name in self.names}

    def join(self, parts: Dict[str, np.ndarray]) -> np.ndarray:
        missing = [name for name in self.names if name not in parts]
        if missing:
            raise LayoutError(f"Missing groups {missing} for layout {self.names}")
        return np.concatenate([np.asarray(parts[name], dtype=float).reshape(-1) for name in self.names])

    def check_mask(self, m: Sequence[int]) -> MaskVector:
        bits = tuple(int(b) for b in m)
        if len(bits) != self.n_groups or any(b not in (0, 1) for b in bits):
            raise LayoutError(f"Mask {bits} is not a 0/1 vector of length {self.n_groups}")
        return bits

    def expand_mask(self, m: Sequence[int]) -> np.ndarray:
        """Per-scalar 0/1 vector (or matrix for a batch of masks)."""
        m = np.asarray(m, dtype=float)
        return np.repeat(m, self.dims, axis=-1)

    def mask_from_groups(self, visible: Iterable[str]) -> MaskVector:
        visible = set(visible)
        for name in visible:
            self.index(name)
        return tuple(1 if name in visible else 0 for name in self.names)

    def visible_groups(self, m: Sequence[int]) -> List[str]:
        bits = self.check_mask(m)
        return [name for name, bit in zip(self.names, bits) if bit]

    def to_list(self) -> List[dict]:
        return [{"name": name, "dim": dim} for name, dim in self.groups]

    @classmethod
    def from_list(cls, data: Sequence[dict]) -> "ModalityLayout":
        return cls(tuple((item["name"], item["dim"]) for item in data))


def format_mask(m: Sequence[int]) -> str:
    return "".join(str(int(b)) for b in m)


def parse_mask(text: str) -> MaskVector:
    text = str(text).strip()
    if not text or any(c not in "01" for c in text):
        raise LayoutError(f"Mask string '{text}' must contain only 0 and 1")
    return tuple(int(c) for c in text)


class MaskSet:
    """An ordered set of distinct, non-zero masks over one layout."""

    def __init__(self, masks: Iterable[Sequence[int]] = ()):
        ordered: List[MaskVector] = []
        width = None
        for m in masks:
            bits = tuple(int(b) for b in m)
            if any(b not in (0, 1) for b in bits):
                raise LayoutError(f"Mask {bits} is not a 0/1 vector")
            if not any(bits):
                raise LayoutError("A mask set cannot contain the all-zero mask")
            if width is None:
                width = len(bits)
            elif len(bits) != width:
                raise LayoutError(f"Mask {bits} has length {len(bits)}, set uses {width}")
            if bits not in ordered:
                ordered.append(bits)
        self._masks = tuple(ordered)

    def __iter__(self) -> Iterator[MaskVector]:
        return iter(self._masks)

    def __len__(self) -> int:
        return len(self._masks)

    def __contains__(self, m: Sequence[int]) -> bool:
        return tuple(int(b) for b in m) in self._masks

    def __eq__(self, other) -> bool:
        return isinstance(other, MaskSet) and set(self._masks) == set(other._masks)

    def __repr__(self) -> str:
        return f"MaskSet({[format_mask(m) for m in self._masks]})"

    @property
    def masks(self) -> Tuple[MaskVector, ...]:
        return self._masks

    def issubset(self, other: "MaskSet") -> bool:
        return set(self._masks) <= set(other._masks)

    def as_array(self) -> np.ndarray:
        return np.array(self._masks, dtype=float)

    def to_list(self) -> List[str]:
        return [format_mask(m) for m in self._masks]

    @classmethod
    def from_list(cls, data: Iterable[str]) -> "MaskSet":
        return cls(parse_mask(text) for text in data)


def enumerate_all_masks(n: int) -> MaskSet:
    """
    All 2^n - 1 non-zero masks over n groups.

    Raises:
        LayoutError: If n is outside [1, 16].
    """
    if not 1 <= int(n) <= MAX_GROUPS_FOR_ENUMERATION:
        raise LayoutError(f"Mask enumeration supports 1..{MAX_GROUPS_FOR_ENUMERATION} groups, got {n}")
    return MaskSet(bits for bits in itertools.product((1, 0), repeat=int(n)) if any(bits))


def apply_mask(layout: ModalityLayout, x: np.ndarray, m: Sequence[int]) -> np.ndarray:
    """Zero every scalar of the groups whose mask bit is 0."""
    x = layout.check_vector(x)
    bits = layout.check_mask(m)
    return x * layout.expand_mask(bits)


@dataclass(frozen=True, eq=False)
class Normalizer:
    """Per-channel mean and standard deviation, stored by group name."""

    means: Dict[str, np.ndarray]
    stds: Dict[str, np.ndarray]

    @classmethod
    def fit(cls, layout: ModalityLayout, values: np.ndarray, available: np.ndarray) -> "Normalizer":
        """
        Fit statistics using only the rows where each group is available.

        Args:
            layout: Layout of the columns of `values`
            values: (n_samples, total_dim) raw values
            available: (n_samples, n_groups) availability flags

        Raises:
            LayoutError: If a group is never observed.
        """
        values = np.asarray(values, dtype=float)
        available = np.asarray(available, dtype=bool)
        if values.ndim != 2 or values.shape[1] != layout.total_dim:
            raise LayoutError(f"Values of shape {values.shape} do not fit layout {layout.names}")
        if available.shape != (values.shape[0], layout.n_groups):
            raise LayoutError(f"Availability of shape {available.shape} does not fit {values.shape[0]} x {layout.n_groups}")
        means, stds = {}, {}
        for g, name in enumerate(layout.names):
            rows = values[available[:, g], layout.slice(name)]
            if rows.shape[0] == 0:
                raise LayoutError(f"Group '{name}' is never observed, cannot normalize it")
            means[name] = rows.mean(axis=0)
            stds[name] = np.maximum(rows.std(axis=0), STD_FLOOR)
        logger.debug(f"Fitted normalizer over groups {layout.names}")
        return cls(means, stds)

    def _stats(self, layout: ModalityLayout) -> Tuple[np.ndarray, np.ndarray]:
        missing = [name for name in layout.names if name not in self.means]
        if missing:
            raise LayoutError(f"Normalizer has no statistics for groups {missing}")
        mean = np.concatenate([self.means[name] for name in layout.names])
        std = np.concatenate([self.stds[name] for name in layout.names])
        return mean, std

    def normalize(self, layout: ModalityLayout, x: np.ndarray) -> np.ndarray:
        mean, std = self._stats(layout)
        return (layout.check_vector(x) - mean) / std

    def denormalize(self, layout: ModalityLayout, x: np.ndarray) -> np.ndarray:
        mean, std = self._stats(layout)
        return layout.check_vector(x) * std + mean

    def scale(self, layout: ModalityLayout) -> np.ndarray:
        return self._stats(layout)[1]

    def offset(self, layout: ModalityLayout) -> np.ndarray:
        return self._stats(layout)[0]

    def to_dict(self) -> dict:
        return {
            name: {"mean": self.means[name].tolist(), "std": self.stds[name].tolist()}
            for name in self.means
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Normalizer":
        return cls(
            {name: np.asarray(item["mean"], dtype=float) for name, item in data.items()},
            {name: np.asarray(item["std"], dtype=float) for name, item in data.items()},
        )
