import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.model import GeMuCoModel, PBLike
from src.network import Weights, backward

logger = logging.getLogger(__name__)

VARIABLES = ("latent", "input", "pb", "weights")
TINY = 1e-12
JACOBIAN_EPS = 1e-4


class OptimizationDivergedError(ValueError):
    """Raised when the loss or its gradient becomes NaN/Inf."""

    def __init__(self, iteration: int, message: str):
        super().__init__(f"Iteration {iteration}: {message}")
        self.iteration = iteration


@dataclass
class OptContext:
    """Fixed values for the quantities not being optimized (normalized x_in, mask, p)."""

    x_in: Optional[np.ndarray] = None
    mask: Optional[Sequence[int]] = None
    p: PBLike = None

    def resolve(self, model: GeMuCoModel) -> "OptContext":
        x_in = np.zeros(model.in_layout.total_dim) if self.x_in is None else np.asarray(self.x_in, dtype=float)
        mask = tuple(1 for _ in model.in_layout.names) if self.mask is None else model.in_layout.check_mask(self.mask)
        return OptContext(model.in_layout.check_vector(x_in), mask, model.pb_values(self.p))


def _norm_values(r: np.ndarray, squared: bool) -> np.ndarray:
    sq = (r ** 2).sum(axis=-1)
    return sq if squared else np.sqrt(sq)


def _norm_gradient(r: np.ndarray, squared: bool) -> np.ndarray:
    if squared:
        return 2.0 * r
    norm = np.sqrt((r ** 2).sum())
    if norm < TINY:
        return np.zeros_like(r)
    return r / norm


class LossTerm:
    """One weighted term of h_loss over normalized predictions and inputs."""

    weight: float = 1.0
    squared: bool = False

    def check(self, model: GeMuCoModel) -> None:
        raise NotImplementedError

    def values(self, model: GeMuCoModel, ctx: OptContext, pred: np.ndarray, x_in: np.ndarray) -> np.ndarray:
        """Per-row term value for a batch of predictions and inputs."""
        raise NotImplementedError

    def gradient(
        self, model: GeMuCoModel, ctx: OptContext, pred: np.ndarray, x_in: np.ndarray
    ) -> Tuple[np.ndarray, np.ndarray]:
        """(dTerm/dpred, dTerm/dx_in) at a single point."""
        raise NotImplementedError


def _channels(layout, groups: Sequence[str]) -> np.ndarray:
    return np.concatenate([np.arange(layout.slice(g).start, layout.slice(g).stop) for g in groups])


@dataclass
class TargetMatch(LossTerm):
    """weight * ||A pred - target||; without A the raw target is normalized first."""

    groups: Tuple[str, ...]
    target: np.ndarray
    weight: float = 1.0
    A: Optional[np.ndarray] = None
    squared: bool = False

    def __post_init__(self):
        self.groups = (self.groups,) if isinstance(self.groups, str) else tuple(self.groups)
        self.target = np.asarray(self.target, dtype=float).reshape(-1)
        if self.A is not None:
            self.A = np.atleast_2d(np.asarray(self.A, dtype=float))

    def check(self, model: GeMuCoModel) -> None:
        for g in self.groups:
            if g not in model.out_layout:
                raise ValueError(f"TargetMatch group '{g}' is not an output of the model {model.out_layout.names}")
        width = sum(model.out_layout.dim(g) for g in self.groups)
        rows = width if self.A is None else self.A.shape[0]
        if self.A is not None and self.A.shape[1] != width:
            raise ValueError(f"TargetMatch map A has {self.A.shape[1]} columns, groups {self.groups} have {width} values")
        if self.target.shape != (rows,):
            raise ValueError(f"TargetMatch target has {self.target.size} values, expected {rows}")

    def _target(self, model: GeMuCoModel) -> np.ndarray:
        if self.A is not None:
            return self.target
        layout = model.out_layout.subset(self.groups)
        return model.normalizer.normalize(layout, self.target)

    def _residual(self, model: GeMuCoModel, pred: np.ndarray) -> np.ndarray:
        selected = pred[..., _channels(model.out_layout, self.groups)]
        if self.A is not None:
            selected = selected @ self.A.T
        return selected - self._target(model)

    def values(self, model, ctx, pred, x_in):
        return self.weight * _norm_values(self._residual(model, pred), self.squared)

    def gradient(self, model, ctx, pred, x_in):
        g = self.weight * _norm_gradient(self._residual(model, pred), self.squared)
        if self.A is not None:
            g = self.A.T @ g
        d_pred = np.zeros_like(pred)
        d_pred[_channels(model.out_layout, self.groups)] = g
        return d_pred, np.zeros_like(x_in)


@dataclass
class Magnitude(LossTerm):
    """weight * ||raw value / std|| of an output group."""

    group: str
    weight: float = 1.0
    squared: bool = False

    def check(self, model: GeMuCoModel) -> None:
        if self.group not in model.out_layout:
            raise ValueError(f"Magnitude group '{self.group}' is not an output of the model {model.out_layout.names}")

    def _scaled(self, model, pred):
        layout = model.out_layout.subset([self.group])
        shift = model.normalizer.offset(layout) / model.normalizer.scale(layout)
        return pred[..., model.out_layout.slice(self.group)] + shift

    def values(self, model, ctx, pred, x_in):
        return self.weight * _norm_values(self._scaled(model, pred), self.squared)

    def gradient(self, model, ctx, pred, x_in):
        d_pred = np.zeros_like(pred)
        d_pred[model.out_layout.slice(self.group)] = self.weight * _norm_gradient(self._scaled(model, pred), self.squared)
        return d_pred, np.zeros_like(x_in)


@dataclass
class InputDeviation(LossTerm):
    """weight * ||x_in[group] - reference|| with a raw reference."""

    group: str
    reference: np.ndarray
    weight: float = 1.0
    squared: bool = False

    def __post_init__(self):
        self.reference = np.asarray(self.reference, dtype=float).reshape(-1)

    def check(self, model: GeMuCoModel) -> None:
        if self.group not in model.in_layout:
            raise ValueError(f"InputDeviation group '{self.group}' is not an input of the model {model.in_layout.names}")
        if self.reference.size != model.in_layout.dim(self.group):
            raise ValueError(f"InputDeviation reference has {self.reference.size} values, group '{self.group}' has {model.in_layout.dim(self.group)}")

    def _residual(self, model, x_in):
        layout = model.in_layout.subset([self.group])
        return x_in[..., model.in_layout.slice(self.group)] - model.normalizer.normalize(layout, self.reference)

    def values(self, model, ctx, pred, x_in):
        return self.weight * _norm_values(self._residual(model, x_in), self.squared)

    def gradient(self, model, ctx, pred, x_in):
        d_x = np.zeros_like(x_in)
        d_x[model.in_layout.slice(self.group)] = self.weight * _norm_gradient(self._residual(model, x_in), self.squared)
        return np.zeros_like(pred), d_x


@dataclass
class TorqueBalance(LossTerm):
    """
    weight * ||tau_ext + torque_scale * G^T f|| in raw units.

    G = d(length)/d(angle) of the network under the mask showing only the angle
    and tension groups, evaluated at the predicted (or a fixed reference) angle
    and the predicted tension.
    """

    angle: str
    tension: str
    length: str
    tau_ext: np.ndarray
    weight: float = 1.0
    torque_scale: float = 1.0
    theta_ref: Optional[np.ndarray] = None
    squared: bool = False

    def __post_init__(self):
        self.tau_ext = np.asarray(self.tau_ext, dtype=float).reshape(-1)
        if self.theta_ref is not None:
            self.theta_ref = np.asarray(self.theta_ref, dtype=float).reshape(-1)

    def check(self, model: GeMuCoModel) -> None:
        for g in (self.angle, self.tension):
            if g not in model.in_layout or g not in model.out_layout:
                raise ValueError(f"TorqueBalance group '{g}' must be both an input and an output of the model")
        if self.length not in model.out_layout:
            raise ValueError(f"TorqueBalance length group '{self.length}' is not an output of the model")
        if self.tau_ext.size != model.out_layout.dim(self.angle):
            raise ValueError(f"tau_ext has {self.tau_ext.size} values, angle group has {model.out_layout.dim(self.angle)}")

    def _stats(self, model, group):
        layout = model.data_layout.subset([group])
        return model.normalizer.offset(layout), model.normalizer.scale(layout)

    def muscle_jacobian(self, model: GeMuCoModel, ctx: OptContext, pred: np.ndarray) -> np.ndarray:
        """G in raw units, (dim length) x (dim angle)."""
        out, inp = model.out_layout, model.in_layout
        theta_n = pred[out.slice(self.angle)]
        if self.theta_ref is not None:
            mean, std = self._stats(model, self.angle)
            theta_n = (self.theta_ref - mean) / std
        x = np.zeros(inp.total_dim)
        x[inp.slice(self.angle)] = theta_n
        x[inp.slice(self.tension)] = pred[out.slice(self.tension)]
        mask = inp.mask_from_groups([self.angle, self.tension])
        rows = _channels(out, [self.length])
        cols = _channels(inp, [self.angle])
        g_n = model.input_jacobian(x, mask, ctx.p, rows, cols)
        _, std_l = self._stats(model, self.length)
        _, std_theta = self._stats(model, self.angle)
        return std_l[:, None] * g_n / std_theta[None, :]

    def _residual(self, model, ctx, pred_row, f_raw=None):
        if f_raw is None:
            mean_f, std_f = self._stats(model, self.tension)
            f_raw = pred_row[model.out_layout.slice(self.tension)] * std_f + mean_f
        g = self.muscle_jacobian(model, ctx, pred_row)
        return self.tau_ext + self.torque_scale * g.T @ f_raw

    def values(self, model, ctx, pred, x_in):
        batch = np.atleast_2d(pred)
        residuals = np.array([self._residual(model, ctx, row) for row in batch])
        out = self.weight * _norm_values(residuals, self.squared)
        return out if pred.ndim == 2 else out[0]

    def gradient(self, model, ctx, pred, x_in):
        out = model.out_layout
        mean_f, std_f = self._stats(model, self.tension)
        f_raw = pred[out.slice(self.tension)] * std_f + mean_f
        g_mat = self.muscle_jacobian(model, ctx, pred)
        r = self.tau_ext + self.torque_scale * g_mat.T @ f_raw
        g = self.weight * _norm_gradient(r, self.squared)

        d_pred = np.zeros_like(pred)
        d_pred[out.slice(self.tension)] += self.torque_scale * (g_mat @ g) * std_f
        # G depends on the predicted angle/tension through the network; f is held fixed here
        varied = [self.tension] if self.theta_ref is not None else [self.angle, self.tension]
        for c in _channels(out, varied):
            plus, minus = pred.copy(), pred.copy()
            plus[c] += JACOBIAN_EPS
            minus[c] -= JACOBIAN_EPS
            phi_plus = g @ (self.torque_scale * self.muscle_jacobian(model, ctx, plus).T @ f_raw)
            phi_minus = g @ (self.torque_scale * self.muscle_jacobian(model, ctx, minus).T @ f_raw)
            d_pred[c] += (phi_plus - phi_minus) / (2 * JACOBIAN_EPS)
        return d_pred, np.zeros_like(x_in)


TERM_TYPES = {
    "target_match": TargetMatch,
    "magnitude": Magnitude,
    "input_deviation": InputDeviation,
    "torque_balance": TorqueBalance,
}


@dataclass
class LossSpec:
    terms: List[LossTerm] = field(default_factory=list)

    def __post_init__(self):
        if not self.terms:
            raise ValueError("A loss needs at least one term")
        for term in self.terms:
            if term.weight < 0:
                raise ValueError(f"Loss term {type(term).__name__} has negative weight {term.weight}")

    def check(self, model: GeMuCoModel) -> None:
        for term in self.terms:
            term.check(model)

    def plus(self, *terms: LossTerm) -> "LossSpec":
        return LossSpec(list(self.terms) + list(terms))

    @classmethod
    def from_records(cls, records: Sequence[Dict]) -> "LossSpec":
        """Build from config records like {"type": "magnitude", "group": "f", "weight": 0.1}."""
        terms = []
        for record in records:
            record = dict(record)
            kind = record.pop("type", None)
            if kind not in TERM_TYPES:
                raise ValueError(f"Unknown loss term type '{kind}', expected one of {sorted(TERM_TYPES)}")
            terms.append(TERM_TYPES[kind](**record))
        return cls(terms)


@dataclass
class IterConfig:
    gamma_max: float = 1.0
    n_batch: int = 16
    iterations: int = 30
    variable: str = "latent"
    frozen_channels: Tuple[int, ...] = ()

    def __post_init__(self):
        if self.gamma_max <= 0:
            raise ValueError(f"gamma_max must be positive, got {self.gamma_max}")
        if self.n_batch < 2:
            raise ValueError(f"n_batch must be at least 2, got {self.n_batch}")
        if self.iterations < 0:
            raise ValueError(f"iterations must be non-negative, got {self.iterations}")
        if self.variable not in VARIABLES:
            raise ValueError(f"variable must be one of {VARIABLES}, got '{self.variable}'")
        self.frozen_channels = tuple(int(c) for c in self.frozen_channels)

    @property
    def gammas(self) -> np.ndarray:
        return np.linspace(0.0, self.gamma_max, self.n_batch)


@dataclass
class OptResult:
    value: np.ndarray
    trajectory: List[float]
    prediction: np.ndarray
    x_in: np.ndarray

    @property
    def final_loss(self) -> float:
        return self.trajectory[-1]


def _weights_of(model: GeMuCoModel, flat: np.ndarray) -> GeMuCoModel:
    n_enc = model.enc_weights.flat().size
    return model.with_weights(
        Weights.from_flat(model.enc_spec, flat[:n_enc]), Weights.from_flat(model.dec_spec, flat[n_enc:])
    )


def _evaluate(model: GeMuCoModel, variable: str, values: np.ndarray, ctx: OptContext) -> Tuple[np.ndarray, np.ndarray]:
    """Predictions and inputs for a batch of candidate values."""
    batch = values.shape[0]
    x_in = np.broadcast_to(ctx.x_in, (batch, ctx.x_in.size))
    if variable == "latent":
        return model.decode(values), x_in
    if variable == "input":
        return model.predict(values, ctx.mask, ctx.p), values
    if variable == "pb":
        return model.predict(x_in, ctx.mask, values), x_in
    preds = np.array([_weights_of(model, v).predict(ctx.x_in, ctx.mask, ctx.p) for v in values])
    return preds, x_in


def _batch_loss(model: GeMuCoModel, loss: LossSpec, ctx: OptContext, pred: np.ndarray, x_in: np.ndarray) -> np.ndarray:
    total = np.zeros(pred.shape[0])
    for term in loss.terms:
        if term.weight:
            total = total + term.values(model, ctx, pred, x_in)
    return total


def eval_loss(
    model: GeMuCoModel, candidate: np.ndarray, loss: LossSpec, context: Optional[OptContext] = None, variable: str = "latent"
) -> float:
    """The loss the optimizer assigns to one candidate value."""
    ctx = (context or OptContext()).resolve(model)
    values = np.asarray(candidate, dtype=float).reshape(1, -1)
    pred, x_in = _evaluate(model, variable, values, ctx)
    eval_model = _weights_of(model, values[0]) if variable == "weights" else model
    return float(_batch_loss(eval_model, loss, ctx, pred, x_in)[0])


def loss_gradient(model: GeMuCoModel, variable: str, value: np.ndarray, loss: LossSpec, ctx: OptContext) -> np.ndarray:
    """Gradient of the loss w.r.t. one variable value; ctx must already be resolved."""
    if variable == "latent":
        pred, trace = model.decode_traced(value)
        x_in = ctx.x_in
    elif variable == "input":
        pred, trace = model.forward_traced(value, ctx.mask, ctx.p)
        x_in = value
    elif variable == "pb":
        pred, trace = model.forward_traced(ctx.x_in, ctx.mask, value)
        x_in = ctx.x_in
    else:
        model = _weights_of(model, value)
        pred, trace = model.forward_traced(ctx.x_in, ctx.mask, ctx.p)
        x_in = ctx.x_in

    d_pred = np.zeros_like(pred)
    d_x = np.zeros_like(x_in)
    for term in loss.terms:
        if term.weight:
            gp, gx = term.gradient(model, ctx, pred, x_in)
            d_pred += gp
            d_x += gx

    if variable == "latent":
        _, grad = backward(model.dec_spec, model.dec_weights, trace, d_pred, need_weights=False)
        return grad
    grads = model.backward_traced(trace, d_pred, need_weights=variable == "weights")
    if variable == "input":
        return grads.x_in + d_x
    if variable == "pb":
        return grads.pb
    return np.concatenate([grads.enc.flat(), grads.dec.flat()])


def optimize(
    model: GeMuCoModel,
    init: np.ndarray,
    loss: LossSpec,
    cfg: Optional[IterConfig] = None,
    context: Optional[OptContext] = None,
) -> OptResult:
    """
    Minimize `loss` over one variable by gradient steps with a gamma-grid line search.

    Each outer iteration computes one gradient, evaluates the candidates
    value - gamma * gradient for every gamma of the grid (0 included) and keeps
    the one with the smallest loss, so the recorded loss never increases.

    Raises:
        OptimizationDivergedError: If a gradient or loss becomes non-finite.
    """
    cfg = cfg or IterConfig()
    ctx = (context or OptContext()).resolve(model)
    loss.check(model)
    value = np.array(init, dtype=float).reshape(-1)
    if not np.all(np.isfinite(value)):
        raise OptimizationDivergedError(0, "initial value is not finite")
    frozen = np.asarray(cfg.frozen_channels, dtype=int)
    if cfg.variable == "input" and frozen.size and (frozen.min() < 0 or frozen.max() >= value.size):
        raise ValueError(f"Frozen channels {frozen.tolist()} out of range for {value.size} inputs")

    def losses_of(candidates: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        if cfg.variable == "weights":
            preds, xs = _evaluate(model, "weights", candidates, ctx)
            totals = np.array([
                _batch_loss(_weights_of(model, c), loss, ctx, p[None, :], x[None, :])[0]
                for c, p, x in zip(candidates, preds, xs)
            ])
            return totals, preds, xs
        preds, xs = _evaluate(model, cfg.variable, candidates, ctx)
        return _batch_loss(model, loss, ctx, preds, xs), preds, xs

    current, preds, xs = losses_of(value[None, :])
    best_loss, best_pred, best_x = float(current[0]), preds[0], xs[0]
    trajectory = [best_loss]
    if not np.isfinite(best_loss):
        raise OptimizationDivergedError(0, "initial loss is not finite")

    noop = cfg.variable == "pb" and model.pb_dim == 0
    for iteration in range(1, cfg.iterations + 1):
        if noop:
            trajectory.append(best_loss)
            continue
        grad = loss_gradient(model, cfg.variable, value, loss, ctx)
        if not np.all(np.isfinite(grad)):
            logger.error(f"Non-finite gradient at iteration {iteration}")
            raise OptimizationDivergedError(iteration, "gradient is not finite")
        if cfg.variable == "input" and frozen.size:
            grad[frozen] = 0.0
        candidates = value[None, :] - cfg.gammas[:, None] * grad[None, :]
        totals, preds, xs = losses_of(candidates)
        if np.any(np.isnan(totals)) or not np.isfinite(totals[0]):
            raise OptimizationDivergedError(iteration, "candidate loss is NaN")
        totals = np.where(np.isfinite(totals), totals, np.inf)
        k = int(np.argmin(totals))
        value, best_loss, best_pred, best_x = candidates[k], float(totals[k]), preds[k], xs[k]
        trajectory.append(best_loss)
        logger.debug(f"Iteration {iteration}: gamma={cfg.gammas[k]:.4f} loss={best_loss:.6f}")

    return OptResult(value, trajectory, best_pred, best_x)
