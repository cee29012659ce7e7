import json
import logging
import struct
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, Optional, Tuple

import numpy as np

from maxsr.errors import CheckpointError
from maxsr.utilities.tensor import Tensor, get_default_dtype

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MAXSR1\0"
CHECKPOINT_VERSION = 1
DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


@dataclass
class ModelState:
    """
    Named parameters of a network plus everything training keeps beside them.

    Attributes:
        params: dict
            Trainable leaves keyed by dotted name ("amtb.0.mbconv.expand.weight"),
            in construction order.
        buffers: dict
            Batch-norm running statistics, updated in place during training and
            never counted as parameters.
        moments: dict
            Adam first and second moments per parameter name.
        step: int
            Number of optimizer steps taken so far.
    """

    params: Dict[str, Tensor] = field(default_factory=dict)
    buffers: Dict[str, np.ndarray] = field(default_factory=dict)
    moments: Dict[str, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    step: int = 0

    def __repr__(self):
        return f"ModelState({len(self.params)} tensors, {self.param_count()} params)"

    def __iter__(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self.params.items())

    def param_count(self) -> int:
        return sum(tensor.size for tensor in self.params.values())

    def zero_grad(self) -> None:
        for tensor in self.params.values():
            tensor.zero_grad()

    def arrays(self) -> Dict[str, np.ndarray]:
        """Every tensor that a checkpoint stores, parameters first."""
        named = {name: tensor.data for name, tensor in self.params.items()}
        named.update(self.buffers)

        return named

    def copy(self) -> "ModelState":
        return ModelState(
            params={
                name: Tensor(tensor.data, requires_grad=True, dtype=tensor.dtype)
                for name, tensor in self.params.items()
            },
            buffers={name: array.copy() for name, array in self.buffers.items()},
            moments={
                name: (m.copy(), v.copy()) for name, (m, v) in self.moments.items()
            },
            step=self.step,
        )

    def load_arrays(
        self, arrays: Dict[str, np.ndarray], strict: bool = True
    ) -> None:
        """Overwrite stored values by name.

        Args:
          arrays: dict
            Name to array, as read from a checkpoint.
          strict: bool
            When set, the name sets must match exactly. Otherwise names missing
            from either side are skipped, which is how a model is initialized
            from another scale's checkpoint.

        Raises:
          CheckpointError: on a name-set, shape or dtype mismatch. Nothing is
            written unless every check passes.
        """
        own = self.arrays()
        if strict and set(own) != set(arrays):
            missing = sorted(set(own) - set(arrays))[:3]
            extra = sorted(set(arrays) - set(own))[:3]
            raise CheckpointError(
                f"Checkpoint tensors do not match the model: missing {missing}, "
                f"unexpected {extra}"
            )
        shared = [name for name in own if name in arrays]
        for name in shared:
            if arrays[name].shape != own[name].shape:
                raise CheckpointError(
                    f"{name}: checkpoint shape {arrays[name].shape} != "
                    f"model shape {own[name].shape}"
                )
            if arrays[name].dtype != own[name].dtype:
                raise CheckpointError(
                    f"{name}: checkpoint dtype {arrays[name].dtype} != "
                    f"model dtype {own[name].dtype}"
                )
        for name in shared:
            if name in self.params:
                self.params[name] = Tensor(
                    arrays[name], requires_grad=True, dtype=arrays[name].dtype
                )
            else:
                self.buffers[name] = np.array(arrays[name])
        self.moments.clear()
        self.step = 0

        return


class StateConstructor:
    """Builds a `ModelState` one layer at a time with seeded initialization.

    Weights of convolutions and projections are drawn uniformly from
    +-1/sqrt(fan_in); biases, position tables and norm shifts start at zero and
    norm gains at one. Layers are drawn in the order they are added, so the
    same sequence of calls with the same seed gives the same state.
    """

    def __init__(self, seed: int = 0, dtype: Optional[Any] = None):
        self.rng = np.random.default_rng(seed)
        self.dtype = np.dtype(dtype or get_default_dtype())
        self.state = ModelState()

    def __repr__(self):
        return f"StateConstructor({list(self.state.params)[-3:]})"

    def _leaf(self, name: str, array: np.ndarray) -> None:
        if name in self.state.params:
            raise KeyError(f"Parameter {name} added twice")
        self.state.params[name] = Tensor(
            array.astype(self.dtype), requires_grad=True, dtype=self.dtype
        )

    def _uniform(self, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
        bound = 1.0 / np.sqrt(fan_in)
        return self.rng.uniform(-bound, bound, size=shape)

    def add_conv(
        self, name: str, c_in: int, c_out: int, kernel: int, groups: int = 1
    ):
        fan_in = (c_in // groups) * kernel * kernel
        self._leaf(
            f"{name}.weight",
            self._uniform((c_out, c_in // groups, kernel, kernel), fan_in),
        )
        self._leaf(f"{name}.bias", np.zeros(c_out))

        return

    def add_linear(self, name: str, d_in: int, d_out: int):
        self._leaf(f"{name}.weight", self._uniform((d_in, d_out), d_in))
        self._leaf(f"{name}.bias", np.zeros(d_out))

        return

    def add_layer_norm(self, name: str, channels: int):
        self._leaf(f"{name}.weight", np.ones(channels))
        self._leaf(f"{name}.bias", np.zeros(channels))

        return

    def add_batch_norm(self, name: str, channels: int):
        self.add_layer_norm(name, channels)
        self.state.buffers[f"{name}.running_mean"] = np.zeros(channels, self.dtype)
        self.state.buffers[f"{name}.running_var"] = np.ones(channels, self.dtype)

        return

    def add_position_table(self, name: str, heads: int, footage: Tuple[int, int]):
        offsets = (2 * footage[0] - 1) * (2 * footage[1] - 1)
        self._leaf(name, np.zeros((heads, offsets)))

        return

    def build(self) -> ModelState:
        return self.state


class ParamView:
    """Read access to the slice of a state below a dotted prefix."""

    def __init__(self, state: ModelState, prefix: str = "", training: bool = False):
        self.state = state
        self.prefix = prefix
        self.training = training

    def __repr__(self):
        return f"ParamView({self.prefix!r})"

    def _name(self, name: str) -> str:
        return f"{self.prefix}.{name}" if self.prefix else name

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self.state.params[self._name(name)]
        except KeyError as err:
            raise KeyError(f"Model has no parameter {self._name(name)}") from err

    def __contains__(self, name: str) -> bool:
        return self._name(name) in self.state.params

    def buffer(self, name: str) -> np.ndarray:
        return self.state.buffers[self._name(name)]

    def child(self, name: str) -> "ParamView":
        return ParamView(self.state, self._name(name), self.training)


class CheckpointConstructor:
    """Assembles the binary checkpoint layout.

    Little-endian: magic, format version (u8), config JSON with a u32 length,
    tensor count (u32), then per tensor the name (u16 length), dtype code (u8),
    rank (u8), dims (u32 each) and the raw values.
    """

    def __init__(self):
        self.config: Dict[str, Any] = {}
        self.tensors: Dict[str, np.ndarray] = {}

    def __repr__(self):
        return f"CheckpointConstructor({len(self.tensors)} tensors)"

    def add_config(self, config: Dict[str, Any]):
        self.config = self.config | config

        return

    def add_tensor(self, name: str, array: np.ndarray):
        if np.dtype(array.dtype) not in DTYPE_CODES:
            raise CheckpointError(f"{name}: unsupported dtype {array.dtype}")
        self.tensors[name] = array

        return

    def add_state(self, state: ModelState):
        for name, array in state.arrays().items():
            self.add_tensor(name, array)

        return

    def send_to_bytes(self) -> bytes:
        blob = json.dumps(self.config, sort_keys=True).encode("utf-8")
        chunks = [
            CHECKPOINT_MAGIC,
            struct.pack("<B", CHECKPOINT_VERSION),
            struct.pack("<I", len(blob)),
            blob,
            struct.pack("<I", len(self.tensors)),
        ]
        for name, array in self.tensors.items():
            encoded = name.encode("utf-8")
            chunks.append(struct.pack("<H", len(encoded)))
            chunks.append(encoded)
            chunks.append(
                struct.pack("<BB", DTYPE_CODES[np.dtype(array.dtype)], array.ndim)
            )
            chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
            little = array.astype(array.dtype.newbyteorder("<"), copy=False)
            chunks.append(np.ascontiguousarray(little).tobytes())
        logger.debug("Serialized %d tensors", len(self.tensors))

        return b"".join(chunks)
