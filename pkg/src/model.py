import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np

from src.modality import LayoutError, MaskSet, ModalityLayout, Normalizer, format_mask
from src.network import ForwardTrace, NetSpec, Weights, backward, forward, jacobian

logger = logging.getLogger(__name__)

MODEL_FORMAT = "bodyschema-model"
MODEL_FORMAT_VERSION = 1


class ModelError(ValueError):
    """Raised for inconsistent model shapes, parametric bias sizes or model files."""


@dataclass(frozen=True, eq=False)
class ParametricBias:
    """Trainable state vector p_k for one data-collection state."""

    values: np.ndarray
    label: str = ""

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).reshape(-1)
        if not np.all(np.isfinite(values)):
            raise ModelError(f"Parametric bias '{self.label}' has non-finite values")
        object.__setattr__(self, "values", values)

    @classmethod
    def zeros(cls, pb_dim: int, label: str = "") -> "ParametricBias":
        return cls(np.zeros(pb_dim), label)


PBLike = Union[ParametricBias, np.ndarray, Sequence[float], None]


@dataclass(frozen=True, eq=False)
class ModelTrace:
    """Traces of one encoder/decoder pass plus the masks used, for backprop."""

    enc: ForwardTrace
    dec: ForwardTrace
    scalar_masks: np.ndarray


@dataclass(frozen=True, eq=False)
class ModelGradients:
    enc: Optional[Weights]
    dec: Optional[Weights]
    x_in: np.ndarray
    pb: np.ndarray
    z: np.ndarray


@dataclass(frozen=True, eq=False)
class GeMuCoModel:
    """
    Encoder/decoder pair h = h_dec o h_enc conditioned on a mask and a parametric bias.

    The encoder sees [masked normalized x_in, mask bits, p]; the decoder maps the
    latent state back to normalized x_out. Instances are immutable; training and
    online updates return new instances.
    """

    data_layout: ModalityLayout
    in_layout: ModalityLayout
    out_layout: ModalityLayout
    enc_spec: NetSpec
    enc_weights: Weights
    dec_spec: NetSpec
    dec_weights: Weights
    pb_dim: int
    latent_dim: int
    normalizer: Normalizer
    feasible_masks: MaskSet
    pb_table: Dict[str, ParametricBias] = field(default_factory=dict)

    def __post_init__(self):
        expected_in = self.in_layout.total_dim + self.in_layout.n_groups + self.pb_dim
        if self.enc_spec.input_width != expected_in:
            raise ModelError(f"Encoder input width {self.enc_spec.input_width} != x_in + mask + pb = {expected_in}")
        if self.enc_spec.output_width != self.latent_dim or self.dec_spec.input_width != self.latent_dim:
            raise ModelError(f"Encoder output / decoder input must both equal latent_dim={self.latent_dim}")
        if self.dec_spec.output_width != self.out_layout.total_dim:
            raise ModelError(f"Decoder output width {self.dec_spec.output_width} != dim(x_out) = {self.out_layout.total_dim}")
        for name in self.in_layout.names + self.out_layout.names:
            if name not in self.data_layout:
                raise ModelError(f"Group '{name}' is not part of the data layout {self.data_layout.names}")
        for m in self.feasible_masks:
            if len(m) != self.in_layout.n_groups:
                raise ModelError(f"Feasible mask {m} does not match {self.in_layout.n_groups} input groups")
        self.enc_weights.check(self.enc_spec)
        self.dec_weights.check(self.dec_spec)

    @classmethod
    def create(
        cls,
        data_layout: ModalityLayout,
        in_groups: Sequence[str],
        out_groups: Sequence[str],
        normalizer: Normalizer,
        feasible_masks: MaskSet,
        pb_dim: int = 0,
        latent_dim: Optional[int] = None,
        hidden: Optional[Sequence[int]] = None,
        seed: int = 0,
    ) -> "GeMuCoModel":
        """Build a freshly initialized model; `hidden` applies to both encoder and decoder."""
        in_layout = data_layout.subset(in_groups)
        out_layout = data_layout.subset(out_groups)
        if latent_dim is None:
            latent_dim = 2 * max(in_layout.dims + out_layout.dims)
        rng = np.random.default_rng(seed)
        enc_in = in_layout.total_dim + in_layout.n_groups + int(pb_dim)
        enc_spec = NetSpec.with_hidden(enc_in, latent_dim, hidden)
        dec_spec = NetSpec.with_hidden(latent_dim, out_layout.total_dim, hidden)
        logger.info(
            f"Created model {in_layout.names} -> {out_layout.names} with encoder {enc_spec.layer_widths}, "
            f"decoder {dec_spec.layer_widths}, pb_dim={pb_dim}"
        )
        return cls(
            data_layout=data_layout,
            in_layout=in_layout,
            out_layout=out_layout,
            enc_spec=enc_spec,
            enc_weights=Weights.initialize(enc_spec, rng),
            dec_spec=dec_spec,
            dec_weights=Weights.initialize(dec_spec, rng),
            pb_dim=int(pb_dim),
            latent_dim=int(latent_dim),
            normalizer=normalizer,
            feasible_masks=feasible_masks,
        )

    # -- conditioning -----------------------------------------------------------------

    def pb_values(self, p: PBLike, batch: Optional[int] = None) -> np.ndarray:
        """Validate a parametric bias (or a batch of them); None means the zero vector."""
        if self.pb_dim == 0:
            return np.zeros((batch, 0)) if batch is not None else np.zeros(0)
        if p is None:
            values = np.zeros(self.pb_dim)
        elif isinstance(p, ParametricBias):
            values = p.values
        else:
            values = np.asarray(p, dtype=float)
        if values.shape[-1] != self.pb_dim:
            raise ModelError(f"Parametric bias of size {values.shape[-1]} given, model uses pb_dim={self.pb_dim}")
        if batch is not None and values.ndim == 1:
            values = np.broadcast_to(values, (batch, self.pb_dim))
        return values

    def mask_bits(self, m: Sequence[int], batch: Optional[int] = None) -> np.ndarray:
        bits = np.asarray(m, dtype=float)
        if bits.shape[-1] != self.in_layout.n_groups:
            raise ModelError(f"Mask of length {bits.shape[-1]} given, model has {self.in_layout.n_groups} input groups")
        if batch is not None and bits.ndim == 1:
            bits = np.broadcast_to(bits, (batch, self.in_layout.n_groups))
        return bits

    def encoder_input(self, x_in: np.ndarray, m: Sequence[int], p: PBLike) -> Tuple[np.ndarray, np.ndarray]:
        """Concatenate [x_in * mask, mask bits, p]; returns it with the per-scalar mask."""
        x_in = self.in_layout.check_vector(x_in)
        batch = x_in.shape[0] if x_in.ndim == 2 else None
        bits = self.mask_bits(m, batch)
        scalar_mask = self.in_layout.expand_mask(bits)
        pb = self.pb_values(p, batch)
        return np.concatenate([x_in * scalar_mask, bits, pb], axis=-1), scalar_mask

    # -- h_enc, h_dec, h ---------------------------------------------------------------

    def check_feasible(self, m: Sequence[int]) -> None:
        """
        Raise LayoutError unless every mask row of `m` is in the feasible set.

        Training passes through `forward_traced` are not checked.
        """
        for row in np.unique(np.atleast_2d(self.mask_bits(m)), axis=0):
            if tuple(row) not in self.feasible_masks:
                raise LayoutError(
                    f"Mask {format_mask(row)} is not in the feasible set {self.feasible_masks.to_list()}"
                )

    def encode(self, x_in: np.ndarray, m: Sequence[int], p: PBLike = None) -> np.ndarray:
        """
        z = h_enc(x_in, m, p) for normalized x_in.

        Raises:
            LayoutError: If `m` is outside the feasible mask set.
        """
        enc_input, _ = self.encoder_input(x_in, m, p)
        self.check_feasible(m)
        z, _ = forward(self.enc_spec, self.enc_weights, enc_input)
        return z

    def decode(self, z: np.ndarray) -> np.ndarray:
        """Normalized x_out = h_dec(z)."""
        z = np.asarray(z, dtype=float)
        if not np.all(np.isfinite(z)):
            raise ModelError("Latent state has non-finite entries")
        out, _ = forward(self.dec_spec, self.dec_weights, z)
        return out

    def predict(self, x_in: np.ndarray, m: Sequence[int], p: PBLike = None) -> np.ndarray:
        """Normalized x_out = h(x_in, m, p)."""
        return self.decode(self.encode(x_in, m, p))

    def predict_raw(self, x_in_raw: np.ndarray, m: Sequence[int], p: PBLike = None) -> np.ndarray:
        """Like predict, on raw units in and out."""
        x_in = self.normalizer.normalize(self.in_layout, x_in_raw)
        return self.normalizer.denormalize(self.out_layout, self.predict(x_in, m, p))

    # -- differentiable passes ----------------------------------------------------------

    def forward_traced(self, x_in: np.ndarray, m: Sequence[int], p: PBLike) -> Tuple[np.ndarray, ModelTrace]:
        enc_input, scalar_mask = self.encoder_input(x_in, m, p)
        z, enc_trace = forward(self.enc_spec, self.enc_weights, enc_input)
        out, dec_trace = forward(self.dec_spec, self.dec_weights, z)
        return out, ModelTrace(enc_trace, dec_trace, scalar_mask)

    def backward_traced(self, trace: ModelTrace, d_out: np.ndarray, need_weights: bool = True) -> ModelGradients:
        """Gradients of a loss (given dLoss/dx_out) w.r.t. weights, x_in, p and z."""
        grad_dec, grad_z = backward(self.dec_spec, self.dec_weights, trace.dec, d_out, need_weights)
        grad_enc, grad_enc_input = backward(self.enc_spec, self.enc_weights, trace.enc, grad_z, need_weights)
        n_x = self.in_layout.total_dim
        n_m = self.in_layout.n_groups
        grad_x = grad_enc_input[..., :n_x] * trace.scalar_masks
        grad_pb = grad_enc_input[..., n_x + n_m:]
        return ModelGradients(grad_enc, grad_dec, grad_x, grad_pb, grad_z)

    def input_jacobian(
        self, x_in: np.ndarray, m: Sequence[int], p: PBLike, out_channels: Sequence[int], in_channels: Sequence[int]
    ) -> np.ndarray:
        """d x_out[i] / d x_in[j] through encoder and decoder, on the normalized scale."""
        enc_input, scalar_mask = self.encoder_input(x_in, m, p)
        in_channels = np.asarray(list(in_channels), dtype=int)
        latent = np.arange(self.latent_dim)
        j_enc = jacobian(self.enc_spec, self.enc_weights, enc_input, latent, in_channels) * scalar_mask[in_channels]
        z, _ = forward(self.enc_spec, self.enc_weights, enc_input)
        j_dec = jacobian(self.dec_spec, self.dec_weights, z, out_channels, latent)
        return j_dec @ j_enc

    def decode_traced(self, z: np.ndarray) -> Tuple[np.ndarray, ForwardTrace]:
        return forward(self.dec_spec, self.dec_weights, np.asarray(z, dtype=float))

    # -- copies -------------------------------------------------------------------------

    def with_weights(self, enc_weights: Weights, dec_weights: Weights) -> "GeMuCoModel":
        return replace(self, enc_weights=enc_weights, dec_weights=dec_weights)

    def with_pb_table(self, pb_table: Dict[str, ParametricBias]) -> "GeMuCoModel":
        return replace(self, pb_table=dict(pb_table))

    def pb(self, label: str) -> ParametricBias:
        if label not in self.pb_table:
            raise ModelError(f"No parametric bias for state '{label}', known: {sorted(self.pb_table)}")
        return self.pb_table[label]

    # -- persistence --------------------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_FORMAT_VERSION,
            "data_layout": self.data_layout.to_list(),
            "in_layout": self.in_layout.names,
            "out_layout": self.out_layout.names,
            "pb_dim": self.pb_dim,
            "latent_dim": self.latent_dim,
            "encoder": {**self.enc_spec.to_dict(), "weights": self.enc_weights.flat().tolist()},
            "decoder": {**self.dec_spec.to_dict(), "weights": self.dec_weights.flat().tolist()},
            "normalizer": self.normalizer.to_dict(),
            "feasible_masks": self.feasible_masks.to_list(),
            "pb_table": {label: pb.values.tolist() for label, pb in self.pb_table.items()},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GeMuCoModel":
        if data.get("format") != MODEL_FORMAT:
            raise ModelError(f"Not a model file (format={data.get('format')!r})")
        if data.get("version") != MODEL_FORMAT_VERSION:
            raise ModelError(f"Unsupported model file version {data.get('version')}")
        data_layout = ModalityLayout.from_list(data["data_layout"])
        enc_spec = NetSpec.from_dict(data["encoder"])
        dec_spec = NetSpec.from_dict(data["decoder"])
        return cls(
            data_layout=data_layout,
            in_layout=data_layout.subset(data["in_layout"]),
            out_layout=data_layout.subset(data["out_layout"]),
            enc_spec=enc_spec,
            enc_weights=Weights.from_flat(enc_spec, data["encoder"]["weights"]),
            dec_spec=dec_spec,
            dec_weights=Weights.from_flat(dec_spec, data["decoder"]["weights"]),
            pb_dim=int(data["pb_dim"]),
            latent_dim=int(data["latent_dim"]),
            normalizer=Normalizer.from_dict(data["normalizer"]),
            feasible_masks=MaskSet.from_list(data["feasible_masks"]),
            pb_table={label: ParametricBias(values, label) for label, values in data["pb_table"].items()},
        )

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        logger.info(f"Saved model to {path}")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "GeMuCoModel":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            logger.error(f"Model file {path} is not valid JSON: {e}")
            raise ModelError(f"Model file {path} is not valid JSON: {e}")
        return cls.from_dict(data)
