import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from src.config import worker_count
from src.data_processor import Dataset
from src.modality import MaskSet, MaskVector, ModalityLayout, enumerate_all_masks, format_mask
from src.model import GeMuCoModel
from src.trainer import SampleArrays, TrainConfig, TrainResult, Trainer, prepare_samples

logger = logging.getLogger(__name__)


class StructureError(ValueError):
    """Raised when no usable input/output structure exists at the given thresholds."""


@dataclass(frozen=True)
class StructureThresholds:
    c_out: float = 0.15
    c_in: float = 0.15

    def __post_init__(self):
        if self.c_out <= 0 or self.c_in <= 0:
            raise StructureError(f"Thresholds must be positive, got c_out={self.c_out}, c_in={self.c_in}")


@dataclass
class NetworkOptions:
    """Sizes used for both the probe and the final network."""

    pb_dim: int = 0
    latent_dim: Optional[int] = None
    hidden: Optional[Tuple[int, ...]] = None
    seed: int = 0


@dataclass
class StructureReport:
    union_groups: List[str]
    thresholds: StructureThresholds
    output_losses: Dict[str, float]
    mask_losses: Dict[str, float]
    out_groups: List[str]
    in_groups: List[str]
    masks: MaskSet
    superset_masks: List[str] = field(default_factory=list)

    @property
    def feasible_candidates(self) -> List[str]:
        """Non-superset masks (over the union layout) below c_in."""
        return [m for m, loss in self.mask_losses.items() if loss < self.thresholds.c_in]

    def rederive(self) -> Tuple[List[str], List[str]]:
        """Out groups and feasible non-superset masks recomputed from the stored losses."""
        out = [g for g in self.union_groups if self.output_losses.get(g, np.inf) < self.thresholds.c_out]
        return out, self.feasible_candidates

    def to_dict(self) -> dict:
        return {
            "union_groups": self.union_groups,
            "thresholds": {"c_out": self.thresholds.c_out, "c_in": self.thresholds.c_in},
            "output_losses": self.output_losses,
            "mask_losses": self.mask_losses,
            "out_groups": self.out_groups,
            "in_groups": self.in_groups,
            "masks": self.masks.to_list(),
            "superset_masks": self.superset_masks,
        }

    def save(self, path: Union[str, Path]) -> None:
        data = self.to_dict()
        # unevaluable losses are written as null
        for key in ("output_losses", "mask_losses"):
            data[key] = {k: (v if np.isfinite(v) else None) for k, v in data[key].items()}
        Path(path).write_text(json.dumps(data, indent=1))

    def table(self) -> pd.DataFrame:
        """Human-readable table of every loss and its decision."""
        rows = []
        for group, loss in self.output_losses.items():
            rows.append({"kind": "output", "name": group, "loss": loss,
                         "threshold": self.thresholds.c_out, "selected": group in self.out_groups})
        feasible = set(self.feasible_candidates)
        for mask, loss in self.mask_losses.items():
            rows.append({"kind": "mask", "name": mask, "loss": loss,
                         "threshold": self.thresholds.c_in, "selected": mask in feasible})
        for mask in self.superset_masks:
            rows.append({"kind": "superset", "name": mask, "loss": np.nan,
                         "threshold": self.thresholds.c_in, "selected": True})
        return pd.DataFrame(rows)


@dataclass
class StructureResult:
    report: StructureReport
    probe: GeMuCoModel
    final: TrainResult


def _pbs_for(model: GeMuCoModel, dataset: Dataset, arrays: SampleArrays) -> np.ndarray:
    if model.pb_dim == 0:
        return np.zeros((len(arrays), 0))
    table = np.array([model.pb(state).values for state in dataset.state_ids])
    return table[arrays.states]


def group_errors(model: GeMuCoModel, dataset: Dataset, mask: MaskVector) -> Dict[str, float]:
    """
    Mean squared normalized error per output group when predicting under `mask`.

    Only samples that have every shown group are used; each group averages
    over the samples where that group was measured. Groups with no such
    sample get inf.
    """
    bits = model.in_layout.check_mask(mask)
    state_index = {state: k for k, state in enumerate(dataset.state_ids)}
    arrays = prepare_samples(model, dataset.samples, state_index)
    shown = np.asarray(bits, dtype=bool)
    rows = np.flatnonzero(np.all(arrays.in_available[:, shown], axis=1))
    errors = {name: float("inf") for name in model.out_layout.names}
    if rows.size == 0:
        return errors
    arrays = arrays.take(rows)
    pbs = _pbs_for(model, dataset, arrays)
    pred = model.predict(arrays.x_in, np.broadcast_to(np.asarray(bits, dtype=float), (rows.size, len(bits))), pbs)
    sq = (pred - arrays.x_out) ** 2 * arrays.out_available
    for name in model.out_layout.names:
        cols = model.out_layout.slice(name)
        count = arrays.out_available[:, cols].sum()
        if count:
            errors[name] = float(sq[:, cols].sum() / count)
    return errors


def mask_inference_loss(
    layout: ModalityLayout, errors: Dict[str, float], out_groups: Sequence[str], mask: MaskVector
) -> float:
    """
    L_m: mean squared normalized error over the output scalars hidden by `mask`.

    `errors` holds per-group MSE as returned by `group_errors`. Falls back to
    every output group when the mask hides none of them.
    """
    visible = set(layout.visible_groups(mask))
    hidden = [g for g in out_groups if g not in visible] or list(out_groups)
    weights = np.array([layout.dim(g) for g in hidden], dtype=float)
    return float(np.dot(weights, [errors[g] for g in hidden]) / weights.sum())


def probe_train(dataset: Dataset, train_config: TrainConfig, options: Optional[NetworkOptions] = None) -> GeMuCoModel:
    """Train a network over the union layout as both input and output, with masks from M_all."""
    options = options or NetworkOptions()
    layout = dataset.layout
    masks = enumerate_all_masks(layout.n_groups)
    model = GeMuCoModel.create(
        layout, layout.names, layout.names, dataset.fit_normalizer(), masks,
        pb_dim=options.pb_dim, latent_dim=options.latent_dim, hidden=options.hidden, seed=options.seed,
    )
    config = replace(train_config, mask_source="all_masks")
    logger.info(f"Probe training over {layout.names} with {len(masks)} masks")
    return Trainer(config).train(model, dataset).model


def determine_outputs(
    probe: GeMuCoModel, eval_dataset: Dataset, thresholds: StructureThresholds
) -> Tuple[List[str], Dict[str, float]]:
    """
    Per-group loss L_i under the mask hiding only group i; out = {i : L_i < c_out}.

    Raises:
        StructureError: For a single-group layout or when no group qualifies.
    """
    layout = probe.in_layout
    if layout.n_groups < 2:
        raise StructureError("Output determination needs at least 2 groups")
    losses = {}
    for name in layout.names:
        mask = tuple(0 if g == name else 1 for g in layout.names)
        losses[name] = group_errors(probe, eval_dataset, mask)[name]
        logger.info(f"L({name}) = {losses[name]:.4f}")
    out = [name for name in layout.names if losses[name] < thresholds.c_out]
    if not out:
        raise StructureError(f"No predictable outputs at threshold c_out={thresholds.c_out}: {losses}")
    return out, losses


def determine_inputs(
    probe: GeMuCoModel, eval_dataset: Dataset, out_groups: Sequence[str], thresholds: StructureThresholds
) -> Tuple[List[str], MaskSet, Dict[str, float], List[str]]:
    """
    Mask losses L_m, input groups and the feasible mask set over the input layout.

    Returns:
        (in groups, M over the in groups, L_m by mask string, superset masks)

    Raises:
        StructureError: If out_groups is empty or no non-superset mask is feasible.
    """
    if not out_groups:
        raise StructureError("Input determination needs at least one output group")
    layout = probe.in_layout
    out_set = set(out_groups)
    candidates, supersets = [], []
    for mask in enumerate_all_masks(layout.n_groups):
        (supersets if out_set <= set(layout.visible_groups(mask)) else candidates).append(mask)

    def mask_loss(mask: MaskVector) -> float:
        return mask_inference_loss(layout, group_errors(probe, eval_dataset, mask), out_groups, mask)

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        values = list(pool.map(mask_loss, candidates))
    losses = {format_mask(m): v for m, v in zip(candidates, values)}
    for mask, value in losses.items():
        logger.debug(f"L_{mask} = {value:.4f}")

    feasible = [m for m, v in zip(candidates, values) if v < thresholds.c_in]
    if not feasible:
        raise StructureError(f"No feasible mask at threshold c_in={thresholds.c_in}: {losses}")
    in_groups = [g for g in layout.names if any(g in layout.visible_groups(m) for m in feasible)]

    projected = []
    for mask in feasible + supersets:
        bits = tuple(bit for g, bit in zip(layout.names, mask) if g in in_groups)
        if any(bits):
            projected.append(bits)
    masks = MaskSet(projected)
    logger.info(f"Inputs {in_groups} with {len(masks)} feasible masks {masks.to_list()}")
    return in_groups, masks, losses, [format_mask(m) for m in supersets]


def determine_structure(
    dataset: Dataset,
    thresholds: StructureThresholds,
    train_config: TrainConfig,
    options: Optional[NetworkOptions] = None,
    eval_fraction: float = 0.2,
) -> StructureResult:
    """
    Probe, pick outputs, pick inputs and masks, then train the reduced model from scratch.

    The probe trains on the leading part of every episode and is evaluated on the rest;
    the final model trains on the whole dataset.
    """
    options = options or NetworkOptions()
    train_split, eval_split = dataset.split(eval_fraction)
    probe = probe_train(train_split, train_config, options)
    out_groups, output_losses = determine_outputs(probe, eval_split, thresholds)
    in_groups, masks, mask_losses, supersets = determine_inputs(probe, eval_split, out_groups, thresholds)
    report = StructureReport(
        union_groups=dataset.layout.names,
        thresholds=thresholds,
        output_losses=output_losses,
        mask_losses=mask_losses,
        out_groups=out_groups,
        in_groups=in_groups,
        masks=masks,
        superset_masks=supersets,
    )
    model = GeMuCoModel.create(
        dataset.layout, in_groups, out_groups, dataset.fit_normalizer(), masks,
        pb_dim=options.pb_dim, latent_dim=options.latent_dim, hidden=options.hidden, seed=options.seed,
    )
    final = Trainer(train_config).train(model, dataset)
    logger.info(f"Structure: {in_groups} -> {out_groups}, M = {masks.to_list()}")
    return StructureResult(report, probe, final)
