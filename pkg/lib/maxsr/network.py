import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np

from maxsr.blocks.core import (
    LAYOUTS,
    StagePlan,
    add_amtb,
    add_hffb,
    add_rb,
    add_sfeb,
    amtb_forward,
    hffb_forward,
    rb_forward,
    sfeb_forward,
    stage_outputs,
    upsample_factors,
)
from maxsr.blocks.geometry import AttentionMode
from maxsr.errors import CheckpointError, ConfigError, ShapeError
from maxsr.utilities.constructors import (
    CheckpointConstructor,
    ModelState,
    ParamView,
    StateConstructor,
)
from maxsr.utilities.general import Files
from maxsr.utilities.parsers import Parse
from maxsr.utilities.tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


@dataclass(frozen=True)
class ModelConfig:
    """
    Every architecture hyperparameter of a MaxSR network.

    Attributes:
        blocks: int
            Number of cascaded AMTBs (B).
        stages: int
            Number of stages (S); B must be divisible by S.
        width: int
            Feature channels (W); must be divisible by `heads`.
        heads: int
            Attention heads in every block and grid attention.
        scale: int
            Upscaling factor, one of 2, 3, 4, 8.
        attention_mode: AttentionMode
            Footage rule: adaptive exact (default), adaptive approx, fixed(P)
            or global.
        rpe: bool
            Add a relative position bias to every attention pass.
        mask_padding: bool
            Keep padded tokens out of the attention softmax.
        attention_layout: str
            "block_grid" (default), "block_block" or "grid_grid".
        se_ratio: float
            Squeeze-excitation width as a fraction of the expanded channels.
        rpe_footage: int
            Footage the position tables are sized for (that of the training
            patch); other footages interpolate the tables.
    """

    blocks: int = 16
    stages: int = 4
    width: int = 128
    heads: int = 4
    scale: int = 2
    attention_mode: AttentionMode = field(default_factory=AttentionMode)
    rpe: bool = False
    mask_padding: bool = False
    attention_layout: str = "block_grid"
    se_ratio: float = 0.25
    rpe_footage: int = 8

    def __post_init__(self) -> None:
        StagePlan(self.blocks, self.stages)
        if self.width < 1 or self.heads < 1:
            raise ConfigError("Width and head count must be positive")
        if self.width % self.heads:
            raise ConfigError(
                f"Width {self.width} is not divisible by {self.heads} heads"
            )
        upsample_factors(self.scale)
        if self.attention_layout not in LAYOUTS:
            raise ConfigError(f"Unknown attention layout {self.attention_layout!r}")
        if not 0 < self.se_ratio <= 1:
            raise ConfigError(f"se_ratio must lie in (0, 1], got {self.se_ratio}")
        if self.rpe_footage < 1:
            raise ConfigError("rpe_footage must be positive")
        if isinstance(self.attention_mode, str):
            object.__setattr__(
                self, "attention_mode", AttentionMode.parse(self.attention_mode)
            )

    @property
    def stage_plan(self) -> StagePlan:
        return StagePlan(self.blocks, self.stages)

    @classmethod
    def preset(cls, name: str, **overrides: Any) -> "ModelConfig":
        """A named configuration ("maxsr", "maxsr-light", "toy") with overrides."""
        key = name.replace("_", "-").lower()
        if key not in PRESETS:
            raise ConfigError(f"Unknown model preset {name!r}")
        return dataclasses.replace(PRESETS[key], **overrides)

    def to_dict(self) -> Dict[str, Any]:
        values = dataclasses.asdict(self)
        values["attention_mode"] = str(self.attention_mode)

        return values

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "ModelConfig":
        known = {item.name for item in dataclasses.fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"Unknown model config keys: {', '.join(unknown)}")
        values = dict(values)
        if isinstance(values.get("attention_mode"), str):
            values["attention_mode"] = AttentionMode.parse(values["attention_mode"])

        return cls(**values)


PRESETS = {
    "maxsr": ModelConfig(blocks=16, stages=4, width=128, heads=4),
    "maxsr-light": ModelConfig(blocks=8, stages=4, width=48, heads=4),
    "toy": ModelConfig(blocks=2, stages=2, width=4, heads=2),
}


def build_model(
    config: ModelConfig, seed: int = 0, dtype: Optional[Any] = None
) -> ModelState:
    """Declare and initialize every parameter of `config`, determined by `seed`."""
    constructor = StateConstructor(seed, dtype)
    footage = (config.rpe_footage, config.rpe_footage)

    add_sfeb(constructor, config.width)
    for index in range(config.blocks):
        add_amtb(
            constructor,
            f"amtb.{index}",
            config.width,
            config.heads,
            rpe=config.rpe,
            rpe_footage=footage,
            se_ratio=config.se_ratio,
        )
    add_hffb(constructor, config.width, config.stages)
    add_rb(constructor, config.width, config.scale)
    state = constructor.build()
    logger.debug("Built %s with %d parameters", config, state.param_count())

    return state


def forward(
    state: ModelState, config: ModelConfig, x: Tensor, training: bool = False
) -> Tensor:
    """
    The end-to-end map from LR batch to SR batch.

    Args:
      state: ModelState
        Parameters built for `config`.
      config: ModelConfig
        Architecture and attention settings.
      x: Tensor
        [N, 3, h, w] images with values in [0, 1].
      training: bool
        Batch norms use batch statistics and update their running statistics
        when set; otherwise they use the running statistics.

    Returns:
      [N, 3, h * r, w * r]. Values are not clamped.
    """
    if x.ndim != 4:
        raise ShapeError(f"Expected an [N, 3, h, w] batch, got {x.shape}")
    view = ParamView(state, training=training)
    plan = config.stage_plan
    footage = (config.rpe_footage, config.rpe_footage)

    shallow, features = sfeb_forward(x, view.child("sfeb"))
    collected = []
    for index in range(config.blocks):
        features = amtb_forward(
            features,
            view.child(f"amtb.{index}"),
            config.attention_mode,
            config.heads,
            layout=config.attention_layout,
            mask_padding=config.mask_padding,
            rpe_footage=footage,
        )
        collected.append(features)
    fused = hffb_forward(shallow, stage_outputs(collected, plan), view.child("hffb"))

    return rb_forward(fused, view.child("rb"), config.scale)


def param_count(state: ModelState) -> int:
    """Trainable scalars, running statistics excluded."""
    return state.param_count()


def save_checkpoint(state: ModelState, config: ModelConfig, path: PathLike) -> Path:
    constructor = CheckpointConstructor()
    constructor.add_config(config.to_dict())
    constructor.add_state(state)

    return Files.atomic_write(path, constructor.send_to_bytes())


def read_checkpoint(path: PathLike) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    try:
        raw = Path(path).read_bytes()
    except OSError as err:
        raise CheckpointError(f"Cannot read checkpoint {path}: {err}") from err
    logger.debug("Read %d checkpoint bytes from %s", len(raw), path)

    return Parse.checkpoint(raw)


def _state_dtype(arrays: Dict[str, np.ndarray]) -> Any:
    dtypes = {array.dtype for array in arrays.values()}
    if len(dtypes) > 1:
        raise CheckpointError(f"Checkpoint mixes dtypes {sorted(map(str, dtypes))}")
    return dtypes.pop() if dtypes else None


def load_checkpoint(path: PathLike) -> Tuple[ModelState, ModelConfig]:
    """Rebuild the state and config stored in `path`.

    Raises:
      CheckpointError: malformed file, or tensors that do not match the
        stored config.
    """
    stored, arrays = read_checkpoint(path)
    try:
        config = ModelConfig.from_dict(stored)
    except (ConfigError, TypeError) as err:
        raise CheckpointError(f"Checkpoint config is invalid: {err}") from err
    state = build_model(config, dtype=_state_dtype(arrays))
    state.load_arrays(arrays)

    return state, config


class MaxSR:
    """
    A MaxSR network: its configuration and its state, kept together.

    Attributes:
        config: ModelConfig
            The architecture.
        state: ModelState
            Parameters, running statistics and optimizer moments.

    Construction:
        MaxSR(config, seed) builds a freshly initialized network,
        MaxSR.load(path) restores a checkpoint and MaxSR.from_pretrained
        starts a new scale from a x2 checkpoint.
    """

    def __init__(
        self,
        config: Optional[ModelConfig] = None,
        seed: int = 0,
        state: Optional[ModelState] = None,
        dtype: Optional[Any] = None,
    ):
        self.config = config or ModelConfig()
        self.state = state if state is not None else build_model(
            self.config, seed, dtype
        )

    def __repr__(self):
        return (
            f"MaxSR(B={self.config.blocks}, S={self.config.stages}, "
            f"W={self.config.width}, x{self.config.scale}, "
            f"{self.config.attention_mode}, {self.param_count()} params)"
        )

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        return self.forward(x, training)

    @property
    def scale(self) -> int:
        return self.config.scale

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        return forward(self.state, self.config, x, training)

    def upscale(self, image: np.ndarray) -> np.ndarray:
        """Inference on one [h, w, 3] float image, returning [h*r, w*r, 3] unclamped."""
        if image.ndim != 3 or image.shape[2] != 3:
            raise ShapeError(f"Expected an [h, w, 3] image, got {image.shape}")
        dtype = next(iter(self.state.params.values())).dtype
        batch = Tensor(np.transpose(image, (2, 0, 1))[None], dtype=dtype)
        with no_grad():
            out = self.forward(batch, training=False)

        return np.transpose(out.data[0], (1, 2, 0))

    def param_count(self) -> int:
        return param_count(self.state)

    def with_attention_mode(self, mode: Union[str, AttentionMode]) -> "MaxSR":
        """The same parameters run under another footage rule."""
        if isinstance(mode, str):
            mode = AttentionMode.parse(mode)
        config = dataclasses.replace(self.config, attention_mode=mode)

        return MaxSR(config, state=self.state)

    def save(self, path: PathLike) -> Path:
        return save_checkpoint(self.state, self.config, path)

    @classmethod
    def load(cls, path: PathLike) -> "MaxSR":
        state, config = load_checkpoint(path)
        return cls(config, state=state)

    @classmethod
    def from_pretrained(
        cls, path: PathLike, config: ModelConfig, seed: int = 0
    ) -> "MaxSR":
        """Initialize `config` from a checkpoint of another scale.

        Every tensor outside the reconstruction block is copied; the
        reconstruction block keeps its fresh initialization.

        Raises:
          CheckpointError: the shared tensors do not match.
        """
        _, arrays = read_checkpoint(path)
        model = cls(config, seed=seed, dtype=_state_dtype(arrays))
        body = {
            name: array for name, array in arrays.items() if not name.startswith("rb.")
        }
        own = {name for name in model.state.arrays() if not name.startswith("rb.")}
        if set(body) != own:
            raise CheckpointError("Pretrained checkpoint does not match the model body")
        model.state.load_arrays(body, strict=False)
        logger.info("Initialized %d tensors from %s", len(body), path)

        return model
