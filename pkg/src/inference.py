import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from src.iteropt import IterConfig, LossSpec, OptContext, OptResult, TargetMatch, optimize
from src.modality import MaskVector, ModalityLayout
from src.model import GeMuCoModel, PBLike

logger = logging.getLogger(__name__)


class InferenceError(ValueError):
    """Raised when a quantity cannot be estimated, controlled or simulated with the model."""


class Strategy(str, Enum):
    DIRECT_MASK = "direct_mask"
    LATENT_ITERATE = "latent_iterate"
    INPUT_ITERATE = "input_iterate"


STRATEGY_RANK = {Strategy.DIRECT_MASK: 0, Strategy.LATENT_ITERATE: 1, Strategy.INPUT_ITERATE: 2}


@dataclass(frozen=True, eq=False)
class Observation:
    """Raw values over the data layout with per-group availability."""

    values: np.ndarray
    available: Tuple[bool, ...]

    @classmethod
    def from_groups(cls, layout: ModalityLayout, observed: Mapping[str, Sequence[float]]) -> "Observation":
        values = np.zeros(layout.total_dim)
        for name, value in observed.items():
            value = np.asarray(value, dtype=float).reshape(-1)
            if value.size != layout.dim(name):
                raise InferenceError(f"Observed '{name}' has {value.size} values, expected {layout.dim(name)}")
            if not np.all(np.isfinite(value)):
                raise InferenceError(f"Observed '{name}' has non-finite values")
            values[layout.slice(name)] = value
        return cls(values, tuple(name in observed for name in layout.names))

    def observed_groups(self, layout: ModalityLayout) -> List[str]:
        return [name for name, flag in zip(layout.names, self.available) if flag]

    def group(self, layout: ModalityLayout, name: str) -> np.ndarray:
        return self.values[layout.slice(name)]


@dataclass
class Estimate:
    values: Dict[str, np.ndarray]
    strategy: Strategy
    trajectory: List[float] = field(default_factory=list)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]


@dataclass
class ControlResult:
    value: np.ndarray
    strategy: Strategy
    result: Optional[OptResult] = None


@dataclass
class SimulationResult:
    values: Dict[str, np.ndarray]
    z: np.ndarray
    trajectory: List[float]


def _availability_mask(model: GeMuCoModel, observed: Sequence[str]) -> MaskVector:
    return tuple(1 if name in observed else 0 for name in model.in_layout.names)


def nearest_feasible_mask(model: GeMuCoModel, availability: MaskVector) -> Optional[MaskVector]:
    """The feasible mask showing only available groups and the most of them."""
    admissible = [m for m in model.feasible_masks if all(b <= a for b, a in zip(m, availability))]
    if not admissible:
        return None
    return max(admissible, key=lambda m: (sum(m), m))


def select_strategy(model: GeMuCoModel, target: str, available: Sequence[str]) -> Strategy:
    """
    Pick how to infer `target` from the available groups.

    Raises:
        InferenceError: If target is neither an input nor an output of the model.
    """
    in_out = target in model.out_layout
    if not in_out and target not in model.in_layout:
        raise InferenceError(f"Group '{target}' is neither an input nor an output of the model")
    if not in_out:
        return Strategy.INPUT_ITERATE
    mask = _availability_mask(model, [g for g in available if g != target])
    if any(mask) and mask in model.feasible_masks:
        return Strategy.DIRECT_MASK
    return Strategy.LATENT_ITERATE


def _normalized_inputs(model: GeMuCoModel, obs: Observation, observed: Sequence[str]) -> np.ndarray:
    raw = obs.values[model.data_layout.channels(model.in_layout.names)]
    x_in = model.normalizer.normalize(model.in_layout, raw)
    shown = model.in_layout.expand_mask(_availability_mask(model, observed))
    return np.where(shown > 0, x_in, 0.0)


def _match_observed(model: GeMuCoModel, obs: Observation, observed: Sequence[str]) -> Optional[TargetMatch]:
    groups = [g for g in model.out_layout.names if g in observed]
    if not groups:
        return None
    target = np.concatenate([obs.group(model.data_layout, g) for g in groups])
    return TargetMatch(tuple(groups), target, weight=1.0, squared=True)


def _initial_latent(model: GeMuCoModel, x_in: np.ndarray, availability: MaskVector, p: PBLike) -> np.ndarray:
    mask = nearest_feasible_mask(model, availability)
    if mask is None:
        return np.zeros(model.latent_dim)
    return model.encode(x_in, mask, p)


def _collect(model: GeMuCoModel, obs: Observation, observed: Sequence[str], x_in: np.ndarray, pred: np.ndarray) -> Dict[str, np.ndarray]:
    """Raw values for every in/out group; observed groups pass through unchanged."""
    values = {}
    out_raw = model.normalizer.denormalize(model.out_layout, pred)
    in_raw = model.normalizer.denormalize(model.in_layout, x_in)
    for name in model.in_layout.names:
        values[name] = in_raw[model.in_layout.slice(name)]
    for name in model.out_layout.names:
        values[name] = out_raw[model.out_layout.slice(name)]
    for name in observed:
        if name in values:
            values[name] = obs.group(model.data_layout, name).copy()
    return values


def estimate(model: GeMuCoModel, obs: Observation, p: PBLike = None, cfg: Optional[IterConfig] = None) -> Estimate:
    """
    Estimate every input and output group of the model from an observation.

    The strategy is the strongest one needed over the missing groups. Observed
    channels are returned unchanged.

    Raises:
        InferenceError: If nothing is observed or no strategy can reach a missing group.
    """
    cfg = cfg or IterConfig()
    layout = model.data_layout
    if len(obs.available) != layout.n_groups:
        raise InferenceError(f"Observation has {len(obs.available)} flags, data layout has {layout.n_groups} groups")
    observed = obs.observed_groups(layout)
    if not observed:
        raise InferenceError("Nothing is observed")
    groups = list(dict.fromkeys(model.in_layout.names + model.out_layout.names))
    missing = [g for g in groups if g not in observed]
    strategies = [select_strategy(model, g, observed) for g in missing] or [Strategy.DIRECT_MASK]
    strategy = max(strategies, key=STRATEGY_RANK.get)

    x_in = _normalized_inputs(model, obs, observed)
    availability = _availability_mask(model, observed)

    if strategy is Strategy.DIRECT_MASK:
        mask = availability if availability in model.feasible_masks else nearest_feasible_mask(model, availability)
        if mask is None:
            raise InferenceError(f"No feasible mask for observed groups {observed}")
        pred = model.predict(x_in, mask, p)
        return Estimate(_collect(model, obs, observed, x_in, pred), strategy)

    match = _match_observed(model, obs, observed)
    if strategy is Strategy.LATENT_ITERATE:
        z0 = _initial_latent(model, x_in, availability, p)
        if match is None:
            if nearest_feasible_mask(model, availability) is None:
                raise InferenceError(f"No observed output and no feasible mask for {observed}")
            return Estimate(_collect(model, obs, observed, x_in, model.decode(z0)), strategy)
        result = optimize(model, z0, LossSpec([match]), replace(cfg, variable="latent"), OptContext(x_in, None, p))
        return Estimate(_collect(model, obs, observed, x_in, result.prediction), strategy, result.trajectory)

    if match is None:
        raise InferenceError(f"Estimating inputs needs at least one observed output group, observed {observed}")
    frozen = model.in_layout.channels([g for g in model.in_layout.names if g in observed])
    result = optimize(
        model, x_in, LossSpec([match]),
        replace(cfg, variable="input", frozen_channels=tuple(frozen.tolist())),
        OptContext(None, None, p),
    )
    return Estimate(_collect(model, obs, observed, result.x_in, result.prediction), strategy, result.trajectory)


def _direct_control(model: GeMuCoModel, loss: LossSpec, control_group: str) -> Optional[List[str]]:
    """Input groups a single TargetMatch names directly, when those can be fed as inputs."""
    if len(loss.terms) != 1 or not isinstance(loss.terms[0], TargetMatch):
        return None
    term = loss.terms[0]
    if term.A is not None or control_group not in model.out_layout or control_group in term.groups:
        return None
    if not all(g in model.in_layout for g in term.groups):
        return None
    return list(term.groups)


def control(
    model: GeMuCoModel,
    loss: LossSpec,
    control_group: str,
    init: np.ndarray,
    p: PBLike = None,
    cfg: Optional[IterConfig] = None,
    x_in_raw: Optional[np.ndarray] = None,
    allow_direct: bool = True,
) -> ControlResult:
    """
    Compute a raw control value for `control_group` minimizing `loss`.

    Args:
        model: Trained model
        loss: Objective over model outputs and inputs
        control_group: Group whose value is the control input
        init: Initial raw control value
        p: Parametric bias of the current state
        cfg: Iteration settings; the variable is chosen here
        x_in_raw: Current raw input vector, used as the starting point of input iteration
        allow_direct: Whether a single TargetMatch on input groups may be answered by one prediction

    Raises:
        InferenceError: If the control group is not part of the model.
    """
    cfg = cfg or IterConfig()
    init = np.asarray(init, dtype=float).reshape(-1)
    if control_group not in model.in_layout and control_group not in model.out_layout:
        raise InferenceError(f"Control group '{control_group}' is not part of the model")
    if cfg.iterations == 0:
        return ControlResult(init.copy(), Strategy.DIRECT_MASK)

    direct = _direct_control(model, loss, control_group) if allow_direct else None
    if direct is not None:
        term = loss.terms[0]
        mask = model.in_layout.mask_from_groups(direct)
        if mask in model.feasible_masks:
            raw = np.zeros(model.in_layout.total_dim)
            offset = 0
            for g in direct:
                dim = model.in_layout.dim(g)
                raw[model.in_layout.slice(g)] = term.target[offset:offset + dim]
                offset += dim
            x_in = model.normalizer.normalize(model.in_layout, raw) * model.in_layout.expand_mask(mask)
            out = model.normalizer.denormalize(model.out_layout, model.predict(x_in, mask, p))
            return ControlResult(out[model.out_layout.slice(control_group)], Strategy.DIRECT_MASK)

    if control_group in model.out_layout:
        raw = np.zeros(model.in_layout.total_dim) if x_in_raw is None else np.asarray(x_in_raw, dtype=float).copy()
        observed = [control_group] if control_group in model.in_layout else []
        if control_group in model.in_layout:
            raw[model.in_layout.slice(control_group)] = init
        x_in = model.normalizer.normalize(model.in_layout, raw) * model.in_layout.expand_mask(_availability_mask(model, observed))
        z0 = _initial_latent(model, x_in, _availability_mask(model, observed), p)
        result = optimize(model, z0, loss, replace(cfg, variable="latent"), OptContext(x_in, None, p))
        out = model.normalizer.denormalize(model.out_layout, result.prediction)
        logger.info(f"Control by latent iteration: loss {result.trajectory[0]:.5f} -> {result.final_loss:.5f}")
        return ControlResult(out[model.out_layout.slice(control_group)], Strategy.LATENT_ITERATE, result)

    raw = model.normalizer.denormalize(model.in_layout, np.zeros(model.in_layout.total_dim)) if x_in_raw is None \
        else np.asarray(x_in_raw, dtype=float).copy()
    raw[model.in_layout.slice(control_group)] = init
    x_in = model.normalizer.normalize(model.in_layout, raw)
    others = [g for g in model.in_layout.names if g != control_group]
    frozen = tuple(model.in_layout.channels(others).tolist()) if others else ()
    result = optimize(model, x_in, loss, replace(cfg, variable="input", frozen_channels=frozen), OptContext(None, None, p))
    x_raw = model.normalizer.denormalize(model.in_layout, result.value)
    logger.info(f"Control by input iteration: loss {result.trajectory[0]:.5f} -> {result.final_loss:.5f}")
    return ControlResult(x_raw[model.in_layout.slice(control_group)], Strategy.INPUT_ITERATE, result)


def simulate(
    model: GeMuCoModel,
    x_send: np.ndarray,
    command_group: str,
    constraints: Optional[LossSpec] = None,
    p: PBLike = None,
    cfg: Optional[IterConfig] = None,
    z_init: Optional[np.ndarray] = None,
) -> SimulationResult:
    """
    Predict the sensor state reached when `x_send` is commanded.

    Minimizes a match of the command group to x_send plus the constraint terms
    over the latent state.
    """
    cfg = cfg or IterConfig()
    if command_group not in model.out_layout:
        raise InferenceError(f"Command group '{command_group}' is not an output of the model")
    match = TargetMatch((command_group,), x_send, weight=1.0)
    loss = constraints.plus(match) if constraints is not None else LossSpec([match])
    if z_init is None:
        observed = [command_group] if command_group in model.in_layout else []
        obs = Observation.from_groups(model.data_layout, {command_group: x_send})
        x_in = _normalized_inputs(model, obs, observed)
        z_init = _initial_latent(model, x_in, _availability_mask(model, observed), p)
    result = optimize(model, z_init, loss, replace(cfg, variable="latent"), OptContext(None, None, p))
    out = model.normalizer.denormalize(model.out_layout, result.prediction)
    values = {name: out[model.out_layout.slice(name)] for name in model.out_layout.names}
    return SimulationResult(values, result.value, result.trajectory)


CLAMP_WEIGHT = 10.0
CLAMP_REFINEMENTS = (1.0, 0.1, 0.01)


def simulate_clamped(
    model: GeMuCoModel,
    x_send: np.ndarray,
    command_group: str,
    clamp_group: str,
    clamp_value: np.ndarray,
    constraints: Optional[LossSpec] = None,
    p: PBLike = None,
    cfg: Optional[IterConfig] = None,
    weight: float = CLAMP_WEIGHT,
) -> SimulationResult:
    """
    Simulate `x_send` while `clamp_group` is held at `clamp_value`.

    The clamp is an unsquared match whose weight exceeds the command match, so
    its minimum sits on the clamp. The search is rerun from the previous latent
    state with gamma_max shrunk by each factor of CLAMP_REFINEMENTS.
    """
    cfg = cfg or IterConfig()
    if weight <= 1.0:
        raise InferenceError(f"Clamp weight must exceed the command match weight 1.0, got {weight}")
    clamp = TargetMatch((clamp_group,), clamp_value, weight=weight)
    loss = constraints.plus(clamp) if constraints is not None else LossSpec([clamp])
    result, trajectory = None, []
    for factor in CLAMP_REFINEMENTS:
        stage = replace(cfg, gamma_max=cfg.gamma_max * factor / weight, iterations=max(cfg.iterations, 100))
        result = simulate(model, x_send, command_group, loss, p, stage, result.z if result else None)
        trajectory.extend(result.trajectory if not trajectory else result.trajectory[1:])
    logger.debug(f"Clamped simulation of '{command_group}': loss {trajectory[0]:.4f} -> {trajectory[-1]:.4f}")
    return SimulationResult(result.values, result.z, trajectory)


class SimulationSession:
    """Runs successive simulate calls, starting each from the previous latent state."""

    def __init__(
        self,
        model: GeMuCoModel,
        command_group: str,
        constraints: Optional[LossSpec] = None,
        p: PBLike = None,
        cfg: Optional[IterConfig] = None,
        carry_over: bool = True,
    ):
        self.model = model
        self.command_group = command_group
        self.constraints = constraints
        self.p = p
        self.cfg = cfg or IterConfig()
        self.carry_over = carry_over
        self.z: Optional[np.ndarray] = None

    def step(self, x_send: np.ndarray, constraints: Optional[LossSpec] = None) -> SimulationResult:
        result = simulate(
            self.model, x_send, self.command_group,
            constraints if constraints is not None else self.constraints,
            self.p, self.cfg, self.z if self.carry_over else None,
        )
        self.z = result.z
        return result

    def reset(self) -> None:
        self.z = None
