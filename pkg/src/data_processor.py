import io
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from src.modality import ModalityLayout, Normalizer

logger = logging.getLogger(__name__)

STATE_COLUMN = "state_id"
AVAIL_PREFIX = "avail_"


@dataclass(frozen=True, eq=False)
class Sample:
    """
    One observation over the union layout.

    Unavailable groups hold zeros in `values`; `available` flags which groups
    were actually measured.
    """

    values: np.ndarray
    available: Tuple[bool, ...]
    state_id: str

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))
        object.__setattr__(self, "available", tuple(bool(a) for a in self.available))

    def check(self, layout: ModalityLayout) -> None:
        if self.values.shape != (layout.total_dim,) or len(self.available) != layout.n_groups:
            raise ValueError(
                f"Sample with {self.values.shape[0]} values / {len(self.available)} flags does not fit layout {layout.names}"
            )
        for name, flag in zip(layout.names, self.available):
            if flag and not np.all(np.isfinite(self.values[layout.slice(name)])):
                raise ValueError(f"Sample of state '{self.state_id}' has non-finite values in available group '{name}'")

    def with_availability(self, layout: ModalityLayout, available: Sequence[bool]) -> "Sample":
        """Copy with some groups hidden; hidden values are zeroed."""
        flags = tuple(bool(a) and bool(b) for a, b in zip(self.available, available))
        values = self.values * layout.expand_mask(np.asarray(flags, dtype=float))
        return Sample(values, flags, self.state_id)


@dataclass
class Episode:
    """Samples collected under one body/tool/environment state."""

    state_id: str
    samples: List[Sample] = field(default_factory=list)

    def __post_init__(self):
        if not self.samples:
            raise ValueError(f"Episode '{self.state_id}' has no samples")
        for sample in self.samples:
            if sample.state_id != self.state_id:
                raise ValueError(f"Episode '{self.state_id}' contains a sample of state '{sample.state_id}'")

    def __len__(self) -> int:
        return len(self.samples)

    def split(self, eval_fraction: float) -> Tuple[Optional["Episode"], Optional["Episode"]]:
        """Leading (1 - eval_fraction) of samples for training, the rest for evaluation."""
        n_eval = int(round(len(self.samples) * eval_fraction))
        n_train = len(self.samples) - n_eval
        head = Episode(self.state_id, self.samples[:n_train]) if n_train else None
        tail = Episode(self.state_id, self.samples[n_train:]) if n_eval else None
        return head, tail


@dataclass
class Dataset:
    """All episodes D = {(D_k, p_k)} over one union layout."""

    layout: ModalityLayout
    episodes: List[Episode]

    def __post_init__(self):
        if not self.episodes:
            raise ValueError("A dataset needs at least one episode")
        for episode in self.episodes:
            for sample in episode.samples:
                sample.check(self.layout)

    @property
    def n_states(self) -> int:
        return len(self.episodes)

    @property
    def state_ids(self) -> List[str]:
        return [episode.state_id for episode in self.episodes]

    @property
    def samples(self) -> List[Sample]:
        return [sample for episode in self.episodes for sample in episode.samples]

    def __len__(self) -> int:
        return sum(len(episode) for episode in self.episodes)

    def arrays(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(values n x D, available n x G, state index n) in episode order."""
        samples = self.samples
        values = np.array([s.values for s in samples], dtype=float)
        available = np.array([s.available for s in samples], dtype=bool)
        index = {state: k for k, state in enumerate(self.state_ids)}
        states = np.array([index[s.state_id] for s in samples], dtype=int)
        return values, available, states

    def fit_normalizer(self) -> Normalizer:
        values, available, _ = self.arrays()
        return Normalizer.fit(self.layout, values, available)

    def split(self, eval_fraction: float = 0.2) -> Tuple["Dataset", "Dataset"]:
        """Per-episode train/eval split; every state keeps samples on both sides."""
        train, evaluation = [], []
        for episode in self.episodes:
            head, tail = episode.split(eval_fraction)
            if head is None or tail is None:
                raise ValueError(f"Episode '{episode.state_id}' with {len(episode)} samples is too short to split")
            train.append(head)
            evaluation.append(tail)
        return Dataset(self.layout, train), Dataset(self.layout, evaluation)

    def merged(self, other: "Dataset") -> "Dataset":
        if other.layout != self.layout:
            raise ValueError("Cannot merge datasets with different layouts")
        by_state: Dict[str, List[Sample]] = {}
        for episode in self.episodes + other.episodes:
            by_state.setdefault(episode.state_id, []).extend(episode.samples)
        return Dataset(self.layout, [Episode(state, samples) for state, samples in by_state.items()])


class SampleDataProcessor:
    """Read and write datasets as CSV with columns `state_id, avail_<group>..., <group>_<i>...`."""

    def __init__(self):
        self.value_pattern = re.compile(r"^(?P<group>.+)_(?P<index>\d+)$")

    def _find_layout(self, df: pd.DataFrame) -> ModalityLayout:
        """Recover the layout from the availability and value columns of a dataframe."""
        if STATE_COLUMN not in df.columns:
            raise ValueError(f"No '{STATE_COLUMN}' column found in CSV. Columns: {', '.join(map(str, df.columns))}")

        groups = [str(col)[len(AVAIL_PREFIX):] for col in df.columns if str(col).startswith(AVAIL_PREFIX)]
        if not groups:
            raise ValueError(f"No '{AVAIL_PREFIX}<group>' columns found in CSV")

        dims = {}
        for col in df.columns:
            match = self.value_pattern.match(str(col))
            if match and match.group("group") in groups:
                dims[match.group("group")] = dims.get(match.group("group"), 0) + 1
        missing = [g for g in groups if g not in dims]
        if missing:
            raise ValueError(f"Groups {missing} have an availability column but no value columns")
        return ModalityLayout(tuple((g, dims[g]) for g in groups))

    def value_columns(self, layout: ModalityLayout) -> List[str]:
        return [f"{name}_{i}" for name, dim in layout.groups for i in range(dim)]

    def dataframe_from_dataset(self, dataset: Dataset) -> pd.DataFrame:
        layout = dataset.layout
        values, available, _ = dataset.arrays()
        # hidden groups are written as empty cells
        shown = np.where(layout.expand_mask(available.astype(float)) > 0, values, np.nan)
        df = pd.DataFrame(shown, columns=self.value_columns(layout))
        for g, name in reversed(list(enumerate(layout.names))):
            df.insert(0, f"{AVAIL_PREFIX}{name}", available[:, g].astype(int))
        df.insert(0, STATE_COLUMN, [s.state_id for s in dataset.samples])
        return df

    def dataset_from_dataframe(self, df: pd.DataFrame) -> Dataset:
        layout = self._find_layout(df)
        avail_cols = [f"{AVAIL_PREFIX}{name}" for name in layout.names]
        available = df[avail_cols].fillna(0).astype(int).to_numpy().astype(bool)
        values = df[self.value_columns(layout)].to_numpy(dtype=float)
        values = np.where(layout.expand_mask(available.astype(float)) > 0, values, 0.0)

        episodes: Dict[str, List[Sample]] = {}
        for state_id, row, flags in zip(df[STATE_COLUMN].astype(str), values, available):
            episodes.setdefault(state_id, []).append(Sample(row, tuple(flags), state_id))
        logger.info(f"Loaded {len(df)} samples in {len(episodes)} states over groups {layout.names}")
        return Dataset(layout, [Episode(state, samples) for state, samples in episodes.items()])

    def read_csv(self, source: Union[str, Path]) -> Dataset:
        """Load a dataset CSV from a path."""
        try:
            df = pd.read_csv(source, dtype={STATE_COLUMN: str})
            return self.dataset_from_dataframe(df)
        except UnicodeDecodeError:
            raise ValueError("File encoding not supported. Please save as UTF-8.")
        except (ValueError, KeyError) as e:
            logger.error(f"Error loading dataset CSV {source}: {e}")
            raise ValueError(f"Failed to process CSV: {str(e)}")

    def read_csv_string(self, csv_content: str) -> Dataset:
        return self.read_csv(io.StringIO(csv_content))

    def write_csv(self, dataset: Dataset, target: Union[str, Path]) -> None:
        df = self.dataframe_from_dataset(dataset)
        df.to_csv(target, index=False, float_format="%.17g")
        logger.info(f"Wrote {len(df)} samples to {target}")


def write_trace(rows: Iterable[dict], target: Union[str, Path]) -> pd.DataFrame:
    """Write a list of flat records as a CSV trace."""
    df = pd.DataFrame(list(rows))
    df.to_csv(target, index=False, float_format="%.17g")
    logger.info(f"Wrote trace with {len(df)} rows to {target}")
    return df
