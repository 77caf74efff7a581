"""AdaPos set model, zero-masking ResNet baseline, and checkpoint I/O."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import AntennaIdError, ConfigurationError, FormatError, ValidationError
from .layers import Dense, EmbeddingTable, EncoderLayer, SignalEncoder
from .sim import N_CHANNELS, N_TAPS, CirDataset
from .tensor import ParamSet, Tensor


@dataclass(frozen=True)
class ModelConfig:
    """Topology shared by both architectures.

    The defaults reproduce the combiner sizes (d=256, 8 heads, d_ff=1024,
    3 layers); ``stem``/``blocks`` describe the signal encoder.
    """

    a_max: int = 6
    d_model: int = 256
    heads: int = 8
    d_ff: int = 1024
    layers: int = 3
    stem: int = 16
    blocks: tuple = (16, 32, 64)
    head_hidden: int = 128
    # init gain of the 2-unit output layer: starts predictions at metre scale, not centimetres
    head_gain: float = 300.0
    n_taps: int = N_TAPS
    in_channels: int = N_CHANNELS

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(int(b) for b in self.blocks))
        if self.a_max < 1:
            raise ConfigurationError("a_max must be >= 1")
        if self.d_model % self.heads:
            raise ConfigurationError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if not self.head_gain > 0:
            raise ConfigurationError(f"head_gain must be positive, got {self.head_gain}")

    @classmethod
    def small(cls, a_max: int = 6, **overrides) -> "ModelConfig":
        """Test-scale topology used by gradient checks and quick runs."""
        base = dict(a_max=a_max, d_model=32, heads=4, d_ff=64, layers=1, stem=4,
                    blocks=(4, 8), head_hidden=16)
        base.update(overrides)
        return cls(**base)


def _check_ids(ids: Sequence[int], a_max: int) -> list[int]:
    ids = [int(i) for i in ids]
    if not ids:
        raise ValidationError("empty antenna set")
    for i in ids:
        if not 0 <= i < a_max:
            raise AntennaIdError(f"antenna id {i} outside [0, {a_max})")
    if len(set(ids)) != len(ids):
        raise ValidationError(f"duplicate antenna ids in {ids}")
    return ids


@dataclass(frozen=True)
class AntennaSubset:
    ids: tuple

    def __post_init__(self):
        ids = _check_ids(self.ids, 1 << 30)
        if ids != sorted(ids):
            raise ValidationError(f"antenna subset must be strictly increasing, got {ids}")
        object.__setattr__(self, "ids", tuple(ids))

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self):
        return iter(self.ids)


def signed_taps(taps: np.ndarray) -> np.ndarray:
    """Map stored Re/Im channels from [0, 1] back to [-1, 1]; magnitude is unchanged.

    A zero tap becomes an all-zero input, so the encoder sees no constant
    offset and a zero-filled baseline slot means "no signal".
    """
    out = np.array(taps, dtype=np.float64, copy=True)
    out[..., :2, :] = 2.0 * out[..., :2, :] - 1.0
    return out


class AdaPosModel:
    """Shared CIR encoder + antenna embeddings + transformer combiner + MLP head."""

    arch = "adapos"

    def __init__(self, config: ModelConfig, params: ParamSet | None = None, seed: int = 0):
        self.config = c = config
        self.encoder = SignalEncoder("encoder", c.in_channels, c.n_taps, c.stem, c.blocks, c.d_model)
        self.antenna_table = EmbeddingTable("antennas", c.a_max, c.d_model)
        self.combiner = [EncoderLayer(f"combiner.{i}", c.d_model, c.heads, c.d_ff) for i in range(c.layers)]
        self.head_hidden = Dense("head.hidden", c.d_model, c.head_hidden)
        self.head_out = Dense("head.out", c.head_hidden, 2, gain=c.head_gain)
        self.params = params if params is not None else self.init_params(seed)

    def init_params(self, seed: int) -> ParamSet:
        rng = np.random.default_rng([seed, 0xADA])
        values = {}
        for part in (self.encoder, self.antenna_table, *self.combiner, self.head_hidden, self.head_out):
            values.update(part.init_params(rng))
        return ParamSet(values)

    def embed(self, params: ParamSet, taps: Tensor) -> Tensor:
        """Encoder output per CIR: ``[..., N, 3, L] -> [..., N, d]`` (taps in stored [0, 1] form)."""
        data = taps.data if isinstance(taps, Tensor) else taps
        return self.encoder(params, Tensor(signed_taps(data)))

    def apply(self, params: ParamSet, taps, antenna_ids: Sequence[int]) -> Tensor:
        """Batched forward: ``taps`` is ``[B, N, 3, L]`` with one shared id list of length N."""
        taps = taps if isinstance(taps, Tensor) else Tensor(taps)
        ids = _check_ids(antenna_ids, self.config.a_max)
        if taps.ndim != 4 or taps.shape[1] != len(ids):
            raise ValidationError(f"taps {taps.shape} do not match {len(ids)} antenna ids")
        h = self.embed(params, taps) + self.antenna_table(params, ids)
        for layer in self.combiner:
            h = layer(params, h)
        pooled = T.mean(h, axis=1)
        return self.head_out(params, T.relu(self.head_hidden(params, pooled)))

    def predict(self, dataset: CirDataset, rows, subset: Sequence[int]) -> np.ndarray:
        ids = list(subset)
        return self.apply(self.params, dataset.taps[np.asarray(rows)][:, ids], ids).numpy()


def adapos_forward(model: AdaPosModel, samples, params: ParamSet | None = None) -> np.ndarray:
    """Position for one set of ``(taps [3, L], antenna_id)`` pairs."""
    samples = list(samples)
    if not samples:
        raise ValidationError("empty CIR set")
    ids = [int(i) for _, i in samples]
    taps = np.stack([np.asarray(t, dtype=np.float64) for t, _ in samples])[None]
    out = model.apply(model.params if params is None else params, taps, ids)
    return out.numpy()[0]


def stack_with_mask(taps: np.ndarray, subset: Sequence[int], a_max: int) -> np.ndarray:
    """Place present CIRs in id order into ``[B, a_max*C, L]``; absent slots stay zero.

    ``taps`` is ``[B, len(subset), C, L]`` ordered like ``subset``.
    """
    ids = _check_ids(subset, a_max)
    b, n, c, length = taps.shape
    if n != len(ids):
        raise ValidationError(f"{n} CIRs supplied for a {len(ids)}-antenna subset")
    full = np.zeros((b, a_max, c, length))
    full[:, ids] = taps
    return full.reshape(b, a_max * c, length)


class BaselineResNet:
    """Fixed-input ResNet over all antenna slots; missing antennas are zero-filled."""

    arch = "baseline"

    def __init__(self, config: ModelConfig, params: ParamSet | None = None, seed: int = 0):
        self.config = c = config
        self.encoder = SignalEncoder("encoder", c.a_max * c.in_channels, c.n_taps, c.stem, c.blocks, c.d_model)
        self.head_hidden = Dense("head.hidden", c.d_model, c.head_hidden)
        self.head_out = Dense("head.out", c.head_hidden, 2, gain=c.head_gain)
        self.params = params if params is not None else self.init_params(seed)

    def init_params(self, seed: int) -> ParamSet:
        rng = np.random.default_rng([seed, 0xBA5E])
        values = {}
        for part in (self.encoder, self.head_hidden, self.head_out):
            values.update(part.init_params(rng))
        return ParamSet(values)

    def apply(self, params: ParamSet, taps, antenna_ids: Sequence[int]) -> Tensor:
        taps = taps.data if isinstance(taps, Tensor) else np.asarray(taps, dtype=np.float64)
        return self.apply_stacked(params, stack_with_mask(signed_taps(taps), antenna_ids, self.config.a_max))

    def apply_stacked(self, params: ParamSet, stacked: np.ndarray) -> Tensor:
        """Forward on an already zero-filled ``[B, a_max*C, L]`` input."""
        h = self.encoder(params, Tensor(np.asarray(stacked, dtype=np.float64)))
        return self.head_out(params, T.relu(self.head_hidden(params, h)))

    def predict(self, dataset: CirDataset, rows, subset: Sequence[int]) -> np.ndarray:
        ids = list(subset)
        return self.apply(self.params, dataset.taps[np.asarray(rows)][:, ids], ids).numpy()


def baseline_forward(model: BaselineResNet, samples, subset: AntennaSubset,
                     params: ParamSet | None = None) -> np.ndarray:
    samples = list(samples)
    ids = [int(i) for _, i in samples]
    extra = set(ids) - set(subset.ids)
    if extra:
        raise ValidationError(f"samples for antennas {sorted(extra)} outside subset {subset.ids}")
    if sorted(ids) != list(subset.ids):
        raise ValidationError(f"samples cover {sorted(ids)}, subset is {subset.ids}")
    order = np.argsort(ids)
    taps = np.stack([np.asarray(samples[i][0], dtype=np.float64) for i in order])[None]
    out = model.apply(model.params if params is None else params, taps, list(subset.ids))
    return out.numpy()[0]


def count_configurations(a_max: int, n_min: int, n_max: int) -> int:
    """Number of antenna subsets with size in ``[n_min, n_max]``."""
    if not 1 <= n_min <= n_max <= a_max:
        raise ConfigurationError(f"need 1 <= n_min <= n_max <= a_max, got {n_min}, {n_max}, {a_max}")
    return sum(math.comb(a_max, k) for k in range(n_min, n_max + 1))


ARCHITECTURES = {"adapos": AdaPosModel, "baseline": BaselineResNet}


def build_model(arch: str, config: ModelConfig, seed: int = 0):
    try:
        cls = ARCHITECTURES[arch]
    except KeyError:
        raise ConfigurationError(f"unknown architecture {arch!r}") from None
    return cls(config, seed=seed)


# -- checkpoints ---------------------------------------------------------------

CHECKPOINT_MAGIC = b"ADPOSCKP"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, model, strategy: dict | None = None, extra: dict | None = None) -> None:
    """Versioned container: JSON header (topology, strategy, layout) + raw <f8 payload."""
    entries, offset = [], 0
    for p, t in model.params.items():
        entries.append({"path": p, "shape": list(t.shape), "offset": offset})
        offset += t.data.size
    header = {"arch": model.arch, "config": asdict(model.config), "strategy": strategy or {},
              "extra": extra or {}, "params": entries}
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for _, t in model.params.items():
            fh.write(t.data.astype("<f8").tobytes())


def load_checkpoint(path):
    """Return ``(model, header)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[20:20 + hlen])
    payload = np.frombuffer(raw[20 + hlen:], dtype="<f8")
    values = {}
    for e in header["params"]:
        n = int(np.prod(e["shape"]))
        chunk = payload[e["offset"]:e["offset"] + n]
        if len(chunk) != n:
            raise FormatError(f"{path}: truncated payload for {e['path']}")
        values[e["path"]] = chunk.reshape(e["shape"]).astype(np.float64)
    config = ModelConfig(**header["config"])
    cls = ARCHITECTURES[header["arch"]]
    model = cls(config, params=ParamSet(values))
    expected = set(cls(config, seed=0).params)
    if set(values) != expected:
        raise FormatError(f"{path}: parameter set does not match the {header['arch']} topology")
    return model, header
