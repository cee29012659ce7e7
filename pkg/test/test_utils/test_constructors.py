import numpy as np
import pytest

from maxsr.errors import CheckpointError
from maxsr.utilities.constructors import (
    CHECKPOINT_MAGIC,
    CheckpointConstructor,
    ParamView,
    StateConstructor,
)
from maxsr.utilities.parsers import Parse
from maxsr.utilities.tensor import default_dtype


def small_state(seed=0, dtype=None):
    constructor = StateConstructor(seed, dtype)
    constructor.add_conv("stem", 3, 4, 3)
    constructor.add_conv("dw", 4, 4, 3, groups=4)
    constructor.add_linear("proj", 4, 6)
    constructor.add_batch_norm("norm", 4)
    constructor.add_position_table("table", 2, (2, 3))

    return constructor.build()


class TestStateConstructor:
    def test_shapes(self):
        state = small_state()

        assert state.params["stem.weight"].shape == (4, 3, 3, 3)
        assert state.params["dw.weight"].shape == (4, 1, 3, 3)
        assert state.params["proj.weight"].shape == (4, 6)
        assert state.params["table"].shape == (2, 15)
        assert set(state.buffers) == {"norm.running_mean", "norm.running_var"}

    def test_param_count_excludes_buffers(self):
        state = small_state()

        assert state.param_count() == (108 + 4) + (36 + 4) + (24 + 6) + 8 + 30

    def test_initialization(self):
        state = small_state()
        bound = 1.0 / np.sqrt(27)

        assert np.all(np.abs(state.params["stem.weight"].data) <= bound)
        assert np.all(state.params["stem.bias"].data == 0)
        assert np.all(state.params["norm.weight"].data == 1)
        assert np.all(state.buffers["norm.running_var"] == 1)

    def test_seed_determinism(self):
        a, b, c = small_state(1), small_state(1), small_state(2)

        weights = [s.params["proj.weight"].data for s in (a, b, c)]

        assert np.array_equal(weights[0], weights[1])
        assert not np.array_equal(weights[0], weights[2])

    def test_dtype_follows_context(self):
        with default_dtype(np.float64):
            state = small_state()

        assert state.params["stem.weight"].dtype == np.float64
        assert small_state().params["stem.weight"].dtype == np.float32

    def test_duplicate_name(self):
        constructor = StateConstructor()
        constructor.add_linear("proj", 2, 2)
        with pytest.raises(KeyError):
            constructor.add_linear("proj", 2, 2)


class TestModelState:
    def test_copy_is_independent(self):
        state = small_state()
        clone = state.copy()
        clone.params["stem.bias"].data += 1.0
        clone.buffers["norm.running_mean"] += 1.0

        assert np.all(state.params["stem.bias"].data == 0)
        assert np.all(state.buffers["norm.running_mean"] == 0)

    def test_load_arrays_round_trip(self):
        source, target = small_state(1), small_state(2)
        target.step = 5
        target.load_arrays(source.arrays())

        for name, array in source.arrays().items():
            assert np.array_equal(target.arrays()[name], array)
        assert target.step == 0

    def test_load_arrays_rejects_missing(self):
        arrays = small_state().arrays()
        del arrays["proj.bias"]
        with pytest.raises(CheckpointError):
            small_state().load_arrays(arrays)

    def test_load_arrays_rejects_shape_without_writing(self):
        target = small_state(2)
        before = target.params["stem.weight"].data.copy()
        arrays = small_state(1).arrays()
        arrays["proj.weight"] = np.zeros((6, 4), np.float32)
        with pytest.raises(CheckpointError):
            target.load_arrays(arrays)

        assert np.array_equal(target.params["stem.weight"].data, before)

    def test_load_arrays_rejects_dtype(self):
        arrays = small_state().arrays()
        arrays["proj.bias"] = arrays["proj.bias"].astype(np.float64)
        with pytest.raises(CheckpointError):
            small_state().load_arrays(arrays)


class TestParamView:
    def test_prefix_lookup(self):
        state = small_state()
        view = ParamView(state).child("stem")

        assert view["weight"] is state.params["stem.weight"]
        assert "bias" in view and "gamma" not in view
        with pytest.raises(KeyError):
            view["gamma"]

    def test_buffer(self):
        view = ParamView(small_state(), "norm")

        assert view.buffer("running_mean").shape == (4,)


class TestCheckpointConstructor:
    def test_layout_starts_with_magic(self):
        constructor = CheckpointConstructor()
        constructor.add_config({"width": 4})
        constructor.add_state(small_state())
        raw = constructor.send_to_bytes()

        assert raw.startswith(CHECKPOINT_MAGIC)
        assert raw[len(CHECKPOINT_MAGIC)] == 1

    def test_decodes_back(self):
        state = small_state()
        constructor = CheckpointConstructor()
        constructor.add_config({"width": 4, "scale": 2})
        constructor.add_state(state)
        config, tensors = Parse.checkpoint(constructor.send_to_bytes())

        assert config == {"scale": 2, "width": 4}
        assert list(tensors) == list(state.arrays())
        assert np.array_equal(tensors["table"], state.params["table"].data)

    def test_rejects_integer_tensors(self):
        with pytest.raises(CheckpointError):
            CheckpointConstructor().add_tensor("index", np.arange(3))
