"""
Modality-specific encoder/decoder MLPs with covariate conditioning,
and the checkpoint file format

Checkpoint layout (all integers little-endian):

    offset  size  field
    0       8     magic b"MMNORMCK"
    8       2     format version (uint16)
    10      2     reserved, zero
    12      4     metadata length M in bytes (uint32)
    16      8     payload length P in bytes (uint64)
    24      4     CRC-32 of metadata + payload (uint32)
    28      4     reserved, zero
    32      M     metadata: UTF-8 JSON, sorted keys
    32+M    P     tensors, float64 little-endian, row-major, in metadata order

The metadata lists every tensor as {name, rows, cols, offset}, offset being
relative to the payload start.
"""
import json
import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Tuple

import numpy as np

from mmnorm.core import gauss
from mmnorm.core import numkit as nk
from mmnorm.core.fusion import FusionSpec
from mmnorm.core.gauss import DiagGaussian
from mmnorm.core.numkit import Tape, Tensor
from mmnorm.models.schemas import LossHyper
from mmnorm.utils.errors import (
    CheckpointVersionError,
    ContractError,
    CorruptCheckpointError,
    DimensionError,
)
from mmnorm.utils.io import atomic_write_bytes

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MMNORMCK"
CHECKPOINT_VERSION = 1
HEADER = struct.Struct("<8sHHIQII")

ACTIVATIONS = {"relu": nk.relu, "tanh": nk.tanh}


@dataclass(frozen=True)
class NetworkLayout:
    """Shapes of every encoder and decoder"""
    latent_dim: int
    modality_widths: Tuple[Tuple[str, int], ...]
    covariate_width: int
    encoder_hidden: Tuple[int, ...] = (64, 32)
    decoder_hidden: Tuple[int, ...] = (32, 64)
    encoder_covariates: bool = True
    decoder_covariates: bool = True
    activation: str = "relu"

    def __post_init__(self):
        if self.latent_dim < 1:
            raise ContractError("latent_dim must be at least 1", latent_dim=self.latent_dim)
        if not self.modality_widths or any(w < 1 for _, w in self.modality_widths):
            raise ContractError("every modality needs a positive width", widths=self.modality_widths)
        if self.activation not in ACTIVATIONS:
            raise ContractError("unknown activation", activation=self.activation)

    @property
    def modalities(self) -> List[str]:
        return [name for name, _ in self.modality_widths]

    @property
    def total_features(self) -> int:
        return sum(w for _, w in self.modality_widths)

    def width(self, modality: str) -> int:
        return dict(self.modality_widths)[modality]

    def encoder_input_width(self, modality: str) -> int:
        return self.width(modality) + (self.covariate_width if self.encoder_covariates else 0)

    def decoder_input_width(self) -> int:
        return self.latent_dim + (self.covariate_width if self.decoder_covariates else 0)

    def param_shapes(self) -> Dict[str, Tuple[int, int]]:
        """Parameter name -> shape, encoders first, in a fixed order"""
        shapes: Dict[str, Tuple[int, int]] = {}
        for m in self.modalities:
            fan_in = self.encoder_input_width(m)
            for i, size in enumerate(self.encoder_hidden):
                shapes[f"encoder.{m}.layer{i}.weight"] = (fan_in, size)
                shapes[f"encoder.{m}.layer{i}.bias"] = (1, size)
                fan_in = size
            for head in ("mu", "logvar"):
                shapes[f"encoder.{m}.{head}.weight"] = (fan_in, self.latent_dim)
                shapes[f"encoder.{m}.{head}.bias"] = (1, self.latent_dim)
        for m in self.modalities:
            fan_in = self.decoder_input_width()
            for i, size in enumerate(self.decoder_hidden):
                shapes[f"decoder.{m}.layer{i}.weight"] = (fan_in, size)
                shapes[f"decoder.{m}.layer{i}.bias"] = (1, size)
                fan_in = size
            shapes[f"decoder.{m}.out.weight"] = (fan_in, self.width(m))
            shapes[f"decoder.{m}.out.bias"] = (1, self.width(m))
        return shapes

    def encoder_names(self) -> List[str]:
        return [n for n in self.param_shapes() if n.startswith("encoder.")]

    def decoder_names(self) -> List[str]:
        return [n for n in self.param_shapes() if n.startswith("decoder.")]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "latent_dim": self.latent_dim,
            "modalities": [{"name": n, "width": w} for n, w in self.modality_widths],
            "covariate_width": self.covariate_width,
            "encoder_hidden": list(self.encoder_hidden),
            "decoder_hidden": list(self.decoder_hidden),
            "encoder_covariates": self.encoder_covariates,
            "decoder_covariates": self.decoder_covariates,
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "NetworkLayout":
        return cls(
            latent_dim=int(data["latent_dim"]),
            modality_widths=tuple((m["name"], int(m["width"])) for m in data["modalities"]),
            covariate_width=int(data["covariate_width"]),
            encoder_hidden=tuple(int(s) for s in data["encoder_hidden"]),
            decoder_hidden=tuple(int(s) for s in data["decoder_hidden"]),
            encoder_covariates=bool(data["encoder_covariates"]),
            decoder_covariates=bool(data["decoder_covariates"]),
            activation=str(data["activation"]),
        )


def init_params(layout: NetworkLayout, seed: int) -> Dict[str, np.ndarray]:
    """Uniform fan-in (Kaiming-style) weights, zero biases"""
    rng = np.random.default_rng(seed)
    params: Dict[str, np.ndarray] = {}
    for name, shape in layout.param_shapes().items():
        if name.endswith(".weight"):
            bound = math.sqrt(6.0 / shape[0])
            value = rng.uniform(-bound, bound, size=shape)
        else:
            value = np.zeros(shape)
        value.flags.writeable = False
        params[name] = value
    return params


def bind_params(
    tape: Tape,
    params: Mapping[str, np.ndarray],
    frozen: Iterable[str] = (),
) -> Tuple[Dict[str, Tensor], Dict[str, Tensor]]:
    """
    Put parameters on a tape

    Returns:
        (leaves, usable): leaves receive gradients; usable tensors are what the
        networks consume. Names in `frozen` go through stop_gradient, so their
        leaves always get a zero gradient.
    """
    frozen = set(frozen)
    leaves = {name: tape.leaf(value) for name, value in params.items()}
    usable = {
        name: nk.stop_gradient(leaf) if name in frozen else leaf
        for name, leaf in leaves.items()
    }
    return leaves, usable


def _as_tensor(tape: Tape, x) -> Tensor:
    return x if isinstance(x, Tensor) else tape.constant(x)


def _mlp(h: Tensor, params: Mapping[str, Tensor], prefix: str, depth: int, activation: str) -> Tensor:
    act = ACTIVATIONS[activation]
    for i in range(depth):
        h = act(h @ params[f"{prefix}.layer{i}.weight"] + params[f"{prefix}.layer{i}.bias"])
    return h


def encode(
    params: Mapping[str, Tensor],
    layout: NetworkLayout,
    modality: str,
    x,
    c=None,
) -> DiagGaussian:
    """
    Unimodal posterior q(z | x_m, c)

    Args:
        params: bound parameters (see bind_params)
        x: n x width(modality) features
        c: n x covariate_width one-hot covariates; ignored when encoder
           conditioning is disabled
    """
    tape = next(iter(params.values())).tape
    x = _as_tensor(tape, x)
    if x.shape[1] != layout.width(modality):
        raise DimensionError(
            f"{modality}: feature width mismatch", expected=layout.width(modality), got=x.shape[1]
        )
    h = x
    if layout.encoder_covariates:
        h = nk.concat_cols([x, _check_covariates(tape, layout, c, x.shape[0])])
    prefix = f"encoder.{modality}"
    h = _mlp(h, params, prefix, len(layout.encoder_hidden), layout.activation)
    mu = h @ params[f"{prefix}.mu.weight"] + params[f"{prefix}.mu.bias"]
    logvar = h @ params[f"{prefix}.logvar.weight"] + params[f"{prefix}.logvar.bias"]
    return DiagGaussian(mu=mu, logvar=gauss.clamp_logvar(logvar))


def decode(
    params: Mapping[str, Tensor],
    layout: NetworkLayout,
    modality: str,
    z,
    c=None,
) -> Tensor:
    """Reconstruction of one modality from latents (and covariates when conditioned)"""
    tape = next(iter(params.values())).tape
    z = _as_tensor(tape, z)
    if z.shape[1] != layout.latent_dim:
        raise DimensionError("latent width mismatch", expected=layout.latent_dim, got=z.shape[1])
    h = z
    if layout.decoder_covariates:
        h = nk.concat_cols([z, _check_covariates(tape, layout, c, z.shape[0])])
    prefix = f"decoder.{modality}"
    h = _mlp(h, params, prefix, len(layout.decoder_hidden), layout.activation)
    return h @ params[f"{prefix}.out.weight"] + params[f"{prefix}.out.bias"]


def _check_covariates(tape: Tape, layout: NetworkLayout, c, rows: int) -> Tensor:
    if c is None:
        raise ContractError("covariates are required by this layout")
    c = _as_tensor(tape, c)
    if c.shape != (rows, layout.covariate_width):
        raise DimensionError(
            "covariate shape mismatch", expected=(rows, layout.covariate_width), got=c.shape
        )
    return c


# Checkpoints
@dataclass
class Checkpoint:
    """Everything needed to rebuild a trained model"""
    layout: NetworkLayout
    fusion: FusionSpec
    loss: LossHyper
    params: Dict[str, np.ndarray]
    standardization: Dict[str, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    train_config: Dict[str, Any] = field(default_factory=dict)

    def tensors(self) -> List[Tuple[str, np.ndarray]]:
        items = [(name, self.params[name]) for name in self.layout.param_shapes()]
        for m, (mean, sd) in self.standardization.items():
            items.append((f"standardization.{m}.mean", mean))
            items.append((f"standardization.{m}.sd", sd))
        return items


def save_checkpoint(path, checkpoint: Checkpoint) -> Path:
    """Serialize atomically in the documented binary layout"""
    entries = []
    blobs = []
    offset = 0
    for name, value in checkpoint.tensors():
        value = np.asarray(value, dtype=np.float64)
        if value.ndim == 1:
            value = value.reshape(1, -1)
        blob = value.astype("<f8").tobytes(order="C")
        entries.append({"name": name, "rows": value.shape[0], "cols": value.shape[1], "offset": offset})
        blobs.append(blob)
        offset += len(blob)

    meta = {
        "format_version": CHECKPOINT_VERSION,
        "layout": checkpoint.layout.to_dict(),
        "fusion": checkpoint.fusion.to_dict(),
        "loss": checkpoint.loss.model_dump(),
        "train_config": checkpoint.train_config,
        "standardization": list(checkpoint.standardization),
        "tensors": entries,
    }
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(blobs)
    crc = zlib.crc32(meta_bytes + payload) & 0xFFFFFFFF
    header = HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, 0, len(meta_bytes), len(payload), crc, 0)
    written = atomic_write_bytes(path, header + meta_bytes + payload)
    logger.info("Saved checkpoint %s (%d tensors)", written, len(entries))
    return written


def load_checkpoint(path) -> Checkpoint:
    """Read and fully validate a checkpoint before building anything from it"""
    data = Path(path).read_bytes()
    if len(data) < HEADER.size:
        raise CorruptCheckpointError("checkpoint shorter than its header", path=str(path), size=len(data))
    magic, version, _, meta_len, payload_len, crc, _ = HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise CorruptCheckpointError("not a checkpoint file (bad magic)", path=str(path))
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            "unsupported checkpoint version", path=str(path), found=version, expected=CHECKPOINT_VERSION
        )
    body = data[HEADER.size:]
    if len(body) != meta_len + payload_len:
        raise CorruptCheckpointError(
            "checkpoint truncated or padded", path=str(path), expected=meta_len + payload_len, found=len(body)
        )
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CorruptCheckpointError("checkpoint checksum mismatch", path=str(path))

    try:
        meta = json.loads(body[:meta_len].decode("utf-8"))
        payload = body[meta_len:]
        tensors: Dict[str, np.ndarray] = {}
        for entry in meta["tensors"]:
            count = entry["rows"] * entry["cols"]
            start = entry["offset"]
            if start < 0 or start + 8 * count > len(payload):
                raise CorruptCheckpointError("tensor outside payload", name=entry["name"])
            value = np.frombuffer(payload, dtype="<f8", count=count, offset=start)
            value = value.astype(np.float64).reshape(entry["rows"], entry["cols"])
            value.flags.writeable = False
            tensors[entry["name"]] = value
        layout = NetworkLayout.from_dict(meta["layout"])
        fusion = FusionSpec.from_dict(meta["fusion"])
        loss = LossHyper.model_validate(meta["loss"])
        params = {name: tensors[name] for name in layout.param_shapes()}
        standardization = {
            m: (tensors[f"standardization.{m}.mean"], tensors[f"standardization.{m}.sd"])
            for m in meta["standardization"]
        }
    except CorruptCheckpointError:
        raise
    except (KeyError, ValueError, TypeError) as exc:
        raise CorruptCheckpointError("checkpoint metadata is malformed", path=str(path), reason=str(exc)) from exc

    for name, shape in layout.param_shapes().items():
        if params[name].shape != shape:
            raise CorruptCheckpointError("parameter shape disagrees with layout", name=name)

    return Checkpoint(
        layout=layout,
        fusion=fusion,
        loss=loss,
        params=params,
        standardization=standardization,
        train_config=meta.get("train_config", {}),
    )
