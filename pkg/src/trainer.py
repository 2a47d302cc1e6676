import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.data_processor import Dataset, Sample
from src.modality import MaskSet, ModalityLayout, enumerate_all_masks
from src.model import GeMuCoModel, ModelGradients, ParametricBias

logger = logging.getLogger(__name__)

MASK_SOURCES = ("feasible_set", "all_masks")


class TrainingError(ValueError):
    """Raised when a model cannot be trained on the given data or configuration."""


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    learning_rate: float = 0.05
    pb_lr_ratio: float = 10.0
    seed: int = 0
    mask_source: str = "feasible_set"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise TrainingError(f"epochs and batch_size must be positive, got {self.epochs} and {self.batch_size}")
        if self.learning_rate <= 0 or self.pb_lr_ratio <= 0:
            raise TrainingError(f"Learning rates must be positive, got {self.learning_rate} (ratio {self.pb_lr_ratio})")
        if self.mask_source not in MASK_SOURCES:
            raise TrainingError(f"mask_source must be one of {MASK_SOURCES}, got '{self.mask_source}'")


@dataclass
class TrainResult:
    model: GeMuCoModel
    pb_table: Dict[str, ParametricBias]
    loss_history: List[float] = field(default_factory=list)


@dataclass
class SampleArrays:
    """
    Samples viewed through a model's in/out layouts, on the normalized scale.

    Unavailable entries are zero in `x_in` and ignored in `x_out` through
    `out_available` (per scalar).
    """

    x_in: np.ndarray
    in_available: np.ndarray
    x_out: np.ndarray
    out_available: np.ndarray
    states: np.ndarray

    def __len__(self) -> int:
        return self.x_in.shape[0]

    def take(self, index: np.ndarray) -> "SampleArrays":
        return SampleArrays(
            self.x_in[index], self.in_available[index], self.x_out[index], self.out_available[index], self.states[index]
        )


def masked_loss(layout: ModalityLayout, pred: np.ndarray, target: np.ndarray, available: Sequence[bool]) -> float:
    """
    Mean squared error over the scalars of the available groups only.

    Returns 0.0 when no group is available.
    """
    pred = layout.check_vector(pred)
    target = layout.check_vector(target)
    scalar_mask = layout.expand_mask(np.asarray(available, dtype=float))
    n_available = scalar_mask.sum()
    if n_available == 0:
        return 0.0
    diff = np.where(scalar_mask > 0, pred - target, 0.0)
    return float((diff ** 2).sum() / n_available)


def _group_indices(model: GeMuCoModel, layout: ModalityLayout) -> List[int]:
    return [model.data_layout.index(name) for name in layout.names]


def prepare_samples(model: GeMuCoModel, samples: Sequence[Sample], state_index: Optional[Dict[str, int]] = None) -> SampleArrays:
    """Split, normalize and zero-fill raw samples for the model's layouts."""
    if not samples:
        raise TrainingError("No samples given")
    for sample in samples:
        sample.check(model.data_layout)
    values = np.array([s.values for s in samples], dtype=float)
    available = np.array([s.available for s in samples], dtype=bool)

    in_groups = available[:, _group_indices(model, model.in_layout)]
    out_groups = available[:, _group_indices(model, model.out_layout)]
    in_scalar = model.in_layout.expand_mask(in_groups.astype(float))
    out_scalar = model.out_layout.expand_mask(out_groups.astype(float))

    x_in = model.normalizer.normalize(model.in_layout, values[:, model.data_layout.channels(model.in_layout.names)])
    x_out = model.normalizer.normalize(model.out_layout, values[:, model.data_layout.channels(model.out_layout.names)])
    x_in = np.where(in_scalar > 0, x_in, 0.0)
    x_out = np.where(out_scalar > 0, x_out, 0.0)

    if state_index is None:
        states = np.zeros(len(samples), dtype=int)
    else:
        states = np.array([state_index[s.state_id] for s in samples], dtype=int)
    return SampleArrays(x_in, in_groups, x_out, out_scalar, states)


def mask_source_set(model: GeMuCoModel, mask_source: str) -> MaskSet:
    if mask_source == "all_masks":
        return enumerate_all_masks(model.in_layout.n_groups)
    if not len(model.feasible_masks):
        raise TrainingError("mask_source 'feasible_set' needs a model with a non-empty feasible mask set")
    return model.feasible_masks


def admissible_matrix(masks: MaskSet, in_available: np.ndarray) -> np.ndarray:
    """(n_samples, n_masks) flags: the mask shows no group the sample lacks."""
    mask_array = masks.as_array().astype(bool)
    return ~np.any(mask_array[None, :, :] & ~in_available[:, None, :], axis=2)


def draw_masks(rng: np.random.Generator, masks: MaskSet, admissible: np.ndarray) -> np.ndarray:
    """One mask per row, uniform over that row's admissible masks."""
    scores = rng.random(admissible.shape)
    scores[~admissible] = -1.0
    return masks.as_array()[np.argmax(scores, axis=1)]


def loss_and_gradients(
    model: GeMuCoModel,
    arrays: SampleArrays,
    masks: np.ndarray,
    pbs: np.ndarray,
    need_weights: bool = True,
) -> Tuple[float, ModelGradients]:
    """
    Batch loss (mean over samples of per-sample masked MSE) and its gradients.

    Args:
        model: Model to differentiate
        arrays: Normalized samples
        masks: (batch, n_in_groups) mask bits per sample
        pbs: (batch, pb_dim) parametric bias per sample

    Returns:
        The scalar loss and gradients w.r.t. weights, x_in, p and z.
    """
    pred, trace = model.forward_traced(arrays.x_in, masks, pbs)
    counts = np.maximum(arrays.out_available.sum(axis=1), 1.0)
    diff = (pred - arrays.x_out) * arrays.out_available
    batch = pred.shape[0]
    loss = float(((diff ** 2).sum(axis=1) / counts).mean())
    d_out = 2.0 * diff / counts[:, None] / batch
    return loss, model.backward_traced(trace, d_out, need_weights)


class Trainer:
    """Offline training of the network weights and one parametric bias per state."""

    def __init__(self, config: Optional[TrainConfig] = None):
        self.config = config or TrainConfig()

    def train(self, model: GeMuCoModel, dataset: Dataset) -> TrainResult:
        """
        Train weights and parametric biases with randomized masks.

        Each sample is paired per step with a mask drawn uniformly among the
        masks of the mask source that hide every group the sample lacks.
        Samples with no such mask are skipped.

        Raises:
            TrainingError: If no sample is usable or training diverges.
        """
        config = self.config
        masks = mask_source_set(model, config.mask_source)
        state_index = {state: k for k, state in enumerate(dataset.state_ids)}
        arrays = prepare_samples(model, dataset.samples, state_index)

        admissible = admissible_matrix(masks, arrays.in_available)
        usable = np.flatnonzero(admissible.any(axis=1))
        skipped = len(arrays) - usable.size
        if skipped:
            logger.warning(f"Skipping {skipped} of {len(arrays)} samples with no admissible mask")
        if usable.size == 0:
            raise TrainingError("No usable samples: every sample lacks a group shown by all masks of the mask source")

        rng = np.random.default_rng(config.seed)
        pbs = np.zeros((dataset.n_states, model.pb_dim))
        enc_w, dec_w = model.enc_weights, model.dec_weights
        pb_lr = config.learning_rate * config.pb_lr_ratio
        history: List[float] = []

        logger.info(
            f"Training on {usable.size} samples, {dataset.n_states} states, {len(masks)} masks "
            f"({config.mask_source}) for {config.epochs} epochs"
        )
        for epoch in range(config.epochs):
            order = rng.permutation(usable)
            total = 0.0
            for start in range(0, order.size, config.batch_size):
                index = order[start:start + config.batch_size]
                batch = arrays.take(index)
                batch_masks = draw_masks(rng, masks, admissible[index])
                current = model.with_weights(enc_w, dec_w)
                loss, grads = loss_and_gradients(current, batch, batch_masks, pbs[batch.states])
                enc_w = enc_w.step(grads.enc, config.learning_rate)
                dec_w = dec_w.step(grads.dec, config.learning_rate)
                if model.pb_dim:
                    pb_grad = np.zeros_like(pbs)
                    np.add.at(pb_grad, batch.states, grads.pb)
                    pbs = pbs - pb_lr * pb_grad
                total += loss * index.size
            epoch_loss = total / order.size
            if not np.isfinite(epoch_loss) or not (enc_w.is_finite() and dec_w.is_finite()):
                logger.error(f"Training diverged at epoch {epoch}")
                raise TrainingError(f"Training diverged at epoch {epoch}; lower the learning rate")
            history.append(epoch_loss)
            logger.debug(f"Epoch {epoch}: loss {epoch_loss:.6f}")

        logger.info(f"Training finished: loss {history[0]:.5f} -> {history[-1]:.5f}")
        pb_table = {state: ParametricBias(pbs[k], state) for state, k in state_index.items()}
        trained = model.with_weights(enc_w, dec_w).with_pb_table(pb_table)
        return TrainResult(trained, pb_table, history)


def train(model: GeMuCoModel, dataset: Dataset, config: Optional[TrainConfig] = None) -> TrainResult:
    return Trainer(config).train(model, dataset)


def pb_principal_coordinates(pb_table: Dict[str, ParametricBias]) -> pd.DataFrame:
    """
    Project the trained parametric biases on their principal axes.

    Each axis is signed so that its largest loading is positive.
    """
    if not pb_table:
        raise TrainingError("Parametric bias table is empty")
    labels = list(pb_table)
    values = np.array([pb_table[label].values for label in labels], dtype=float)
    if values.shape[1] == 0:
        raise TrainingError("Model has no parametric bias (pb_dim=0)")
    centered = values - values.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    signs = np.sign(vt[np.arange(vt.shape[0]), np.argmax(np.abs(vt), axis=1)])
    signs[signs == 0] = 1.0
    coords = centered @ (vt * signs[:, None]).T
    df = pd.DataFrame(coords, columns=[f"pc{i + 1}" for i in range(coords.shape[1])])
    df.insert(0, "state_id", labels)
    return df
