import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Deque, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.data_processor import Sample
from src.model import GeMuCoModel, ParametricBias
from src.trainer import admissible_matrix, draw_masks, loss_and_gradients, mask_source_set, prepare_samples

logger = logging.getLogger(__name__)

MODES = ("p_only", "w_only", "both")

_rngs: Dict[int, np.random.Generator] = {}


def _seeded_rng(seed: int) -> np.random.Generator:
    """Process-wide generator per seed; successive calls continue its stream."""
    if seed not in _rngs:
        _rngs[seed] = np.random.default_rng(seed)
    return _rngs[seed]


@dataclass
class OnlineConfig:
    mode: str = "p_only"
    buffer_capacity: int = 200
    min_start: int = 20
    steps_per_datum: int = 1
    learning_rate_w: float = 0.01
    learning_rate_p: float = 0.1
    mask_source: str = "feasible_set"
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got '{self.mode}'")
        if not 0 < self.min_start <= self.buffer_capacity:
            raise ValueError(f"Need 0 < min_start <= buffer_capacity, got {self.min_start} and {self.buffer_capacity}")
        if self.steps_per_datum < 1:
            raise ValueError(f"steps_per_datum must be positive, got {self.steps_per_datum}")
        if self.learning_rate_w <= 0 or self.learning_rate_p <= 0:
            raise ValueError("Online learning rates must be positive")


class OnlineBuffer:
    """Bounded FIFO of samples; the oldest sample is evicted first."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError(f"Buffer capacity must be positive, got {capacity}")
        self.capacity = capacity
        self._samples: Deque[Sample] = deque(maxlen=capacity)

    def push(self, sample: Sample) -> None:
        self._samples.append(sample)

    def __len__(self) -> int:
        return len(self._samples)

    def __iter__(self):
        return iter(self._samples)

    @property
    def samples(self) -> List[Sample]:
        return list(self._samples)


@dataclass
class ConstraintSet:
    """Synthetic samples encoding known constraints, added to every update batch."""

    samples: List[Sample] = field(default_factory=list)

    def check(self, model: GeMuCoModel) -> None:
        for sample in self.samples:
            sample.check(model.data_layout)

    def __len__(self) -> int:
        return len(self.samples)


def _gradient_step(
    model: GeMuCoModel,
    pb: ParametricBias,
    samples: Sequence[Sample],
    cfg: OnlineConfig,
    rng: np.random.Generator,
) -> Tuple[GeMuCoModel, ParametricBias, Optional[float]]:
    arrays = prepare_samples(model, samples)
    masks = mask_source_set(model, cfg.mask_source)
    admissible = admissible_matrix(masks, arrays.in_available)
    usable = np.flatnonzero(admissible.any(axis=1))
    if usable.size == 0:
        logger.warning("No sample in the update batch has an admissible mask; skipping update")
        return model, pb, None
    arrays = arrays.take(usable)
    batch_masks = draw_masks(rng, masks, admissible[usable])
    pbs = np.broadcast_to(model.pb_values(pb), (usable.size, model.pb_dim))
    loss, grads = loss_and_gradients(model, arrays, batch_masks, pbs, need_weights=cfg.mode != "p_only")

    if cfg.mode != "p_only":
        model = model.with_weights(
            model.enc_weights.step(grads.enc, cfg.learning_rate_w),
            model.dec_weights.step(grads.dec, cfg.learning_rate_w),
        )
    if cfg.mode != "w_only" and model.pb_dim:
        pb = ParametricBias(pb.values - cfg.learning_rate_p * grads.pb.sum(axis=0), pb.label)
    return model, pb, loss


def update(
    model: GeMuCoModel,
    pb: ParametricBias,
    buffer: OnlineBuffer,
    constraints: Optional[ConstraintSet],
    cfg: OnlineConfig,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[GeMuCoModel, ParametricBias]:
    """
    Run cfg.steps_per_datum gradient steps over buffer + constraints.

    p_only leaves the weights untouched and w_only leaves the parametric bias
    untouched. Below min_start buffered samples nothing happens. Without `rng`
    masks are drawn from a process-wide generator seeded by cfg.seed.
    """
    if len(buffer) < cfg.min_start:
        logger.warning(f"Buffer holds {len(buffer)} < {cfg.min_start} samples; not updating yet")
        return model, pb
    rng = rng if rng is not None else _seeded_rng(cfg.seed)
    samples = buffer.samples + (constraints.samples if constraints is not None else [])
    for _ in range(cfg.steps_per_datum):
        model, pb, _ = _gradient_step(model, pb, samples, cfg, rng)
    return model, pb


def offline_update(
    model: GeMuCoModel,
    pb: ParametricBias,
    samples: Sequence[Sample],
    cfg: OnlineConfig,
    passes: int = 100,
    constraints: Optional[ConstraintSet] = None,
) -> Tuple[GeMuCoModel, ParametricBias, List[float]]:
    """Update once after data has accumulated: `passes` full-batch steps in cfg.mode."""
    if not samples:
        raise ValueError("offline_update needs at least one sample")
    rng = np.random.default_rng(cfg.seed)
    batch = list(samples) + (constraints.samples if constraints is not None else [])
    history = []
    for _ in range(passes):
        model, pb, loss = _gradient_step(model, pb, batch, cfg, rng)
        if loss is None:
            break
        history.append(loss)
    logger.info(f"Offline {cfg.mode} update over {len(batch)} samples, {len(history)} passes")
    return model, pb, history


class OnlineUpdater:
    """
    Owns a model and a parametric bias and updates them as samples stream in.

    `snapshot()` hands out the current immutable model and PB.
    """

    def __init__(
        self,
        model: GeMuCoModel,
        pb: ParametricBias,
        cfg: Optional[OnlineConfig] = None,
        constraints: Optional[ConstraintSet] = None,
    ):
        self.cfg = cfg or OnlineConfig()
        self.model = model
        self.pb = ParametricBias(model.pb_values(pb), pb.label if isinstance(pb, ParametricBias) else "")
        self.buffer = OnlineBuffer(self.cfg.buffer_capacity)
        self.constraints = constraints
        if constraints is not None:
            constraints.check(model)
        self.rng = np.random.default_rng(self.cfg.seed)
        self.updates = 0
        self.trajectory: List[np.ndarray] = [self.pb.values.copy()]

    def observe(self, sample: Sample) -> bool:
        """Buffer a sample and update; returns whether an update ran."""
        sample.check(self.model.data_layout)
        self.buffer.push(sample)
        if len(self.buffer) < self.cfg.min_start:
            return False
        self.model, self.pb = update(self.model, self.pb, self.buffer, self.constraints, self.cfg, self.rng)
        self.updates += 1
        self.trajectory.append(self.pb.values.copy())
        return True

    def observe_all(self, samples: Iterable[Sample]) -> int:
        count = sum(1 for sample in samples if self.observe(sample))
        logger.info(f"Ran {count} {self.cfg.mode} updates, buffer holds {len(self.buffer)} samples")
        return count

    def snapshot(self) -> Tuple[GeMuCoModel, ParametricBias]:
        return self.model, self.pb

    def trajectory_frame(self) -> pd.DataFrame:
        """PB after every update (row 0 is the starting PB)."""
        values = np.array(self.trajectory).reshape(len(self.trajectory), -1)
        df = pd.DataFrame(values, columns=[f"pb_{i}" for i in range(values.shape[1])])
        df.insert(0, "update", np.arange(len(df)))
        return df
