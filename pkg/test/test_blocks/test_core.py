import numpy as np
import pytest

from maxsr.blocks import core
from maxsr.blocks.geometry import AttentionMode
from maxsr.errors import ConfigError, ShapeError
from maxsr.utilities.constructors import ParamView, StateConstructor
from maxsr.utilities.tensor import Tensor

rng = np.random.default_rng(11)
WIDTH = 4


def amtb_view(width=WIDTH, heads=2, **kwargs):
    constructor = StateConstructor(3, dtype=np.float64)
    core.add_amtb(constructor, "amtb.0", width, heads, **kwargs)
    return ParamView(constructor.build(), "amtb.0")


def features(*shape):
    return Tensor(rng.standard_normal(shape), dtype=np.float64)


class TestStagePlan:
    def test_fusion_indices(self):
        plan = core.StagePlan(16, 4)

        assert plan.per_stage == 4
        assert plan.fusion_indices == (4, 8, 12, 16)

    def test_single_stage_fuses_last_block(self):
        assert core.StagePlan(3, 1).fusion_indices == (3,)

    @pytest.mark.parametrize("blocks, stages", [(16, 5), (0, 1), (4, 0)])
    def test_invalid_split(self, blocks, stages):
        with pytest.raises(ConfigError):
            core.StagePlan(blocks, stages)

    def test_stage_outputs_selects_last_of_each_stage(self):
        collected = [features(1, 1, 1, 1) for _ in range(6)]
        picked = core.stage_outputs(collected, core.StagePlan(6, 3))

        assert [collected.index(t) for t in picked] == [1, 3, 5]

    def test_stage_outputs_count_mismatch(self):
        with pytest.raises(ShapeError):
            core.stage_outputs([features(1, 1, 1, 1)], core.StagePlan(2, 1))


class TestUpsampleFactors:
    def test_factors(self):
        assert core.upsample_factors(2) == (2,)
        assert core.upsample_factors(3) == (3,)
        assert core.upsample_factors(4) == (2, 2)
        assert core.upsample_factors(8) == (2, 2, 2)

    def test_unsupported_scale(self):
        with pytest.raises(ConfigError):
            core.upsample_factors(5)


class TestSfeb:
    def test_returns_both_feature_maps(self):
        constructor = StateConstructor(0, dtype=np.float64)
        core.add_sfeb(constructor, WIDTH)
        view = ParamView(constructor.build(), "sfeb")
        shallow, deep = core.sfeb_forward(features(2, 3, 6, 5), view)

        assert shallow.shape == deep.shape == (2, WIDTH, 6, 5)

    def test_rejects_non_rgb(self):
        constructor = StateConstructor(0)
        core.add_sfeb(constructor, WIDTH)
        view = ParamView(constructor.build(), "sfeb")

        with pytest.raises(ShapeError):
            core.sfeb_forward(features(1, 1, 6, 5), view)


class TestMbconv:
    def test_zero_projection_is_identity(self):
        view = amtb_view().child("mbconv")
        view["project.weight"].data[...] = 0.0
        x = features(2, WIDTH, 5, 5)
        out = core.mbconv_se_forward(x, view)

        assert np.array_equal(out.data, x.data)

    def test_squeeze_excite_gates_within_unit_interval(self):
        view = amtb_view().child("mbconv")
        x = Tensor(np.ones((1, 16, 3, 3)), dtype=np.float64)
        gated = core.squeeze_excite(x, view.child("se")).data

        assert np.all((gated > 0) & (gated < 1))
        # one gate per channel
        assert np.allclose(gated, gated[..., :1, :1])


class TestAmtb:
    @pytest.mark.parametrize("layout", sorted(core.LAYOUTS))
    def test_shape_preserved(self, layout):
        x = features(2, WIDTH, 7, 6)
        out = core.amtb_forward(x, amtb_view(), AttentionMode(), heads=2, layout=layout)

        assert out.shape == x.shape

    def test_with_position_tables(self):
        view = amtb_view(rpe=True, rpe_footage=(3, 3))
        x = features(1, WIDTH, 9, 9)
        out = core.amtb_forward(x, view, AttentionMode(), heads=2, rpe_footage=(3, 3))

        assert "attn1.rpe_table" in view
        assert out.shape == x.shape

    def test_unknown_layout(self):
        with pytest.raises(ConfigError):
            core.amtb_forward(
                features(1, WIDTH, 4, 4), amtb_view(), AttentionMode(), 2, "grid_block"
            )

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            core.amtb_forward(features(1, 6, 4, 4), amtb_view(), AttentionMode(), 2)


class TestHffb:
    def test_adds_shallow_features(self):
        constructor = StateConstructor(0, dtype=np.float64)
        core.add_hffb(constructor, WIDTH, 2)
        state = constructor.build()
        state.params["hffb.conv.weight"].data[...] = 0.0
        shallow = features(1, WIDTH, 3, 3)
        out = core.hffb_forward(
            shallow, [features(1, WIDTH, 3, 3)] * 2, ParamView(state, "hffb")
        )

        assert np.allclose(out.data, shallow.data)

    def test_stage_count_mismatch(self):
        constructor = StateConstructor(0)
        core.add_hffb(constructor, WIDTH, 2)
        view = ParamView(constructor.build(), "hffb")

        shallow = features(1, WIDTH, 3, 3)

        with pytest.raises(ShapeError):
            core.hffb_forward(shallow, [shallow], view)


class TestRb:
    @pytest.mark.parametrize("scale", [2, 3, 4, 8])
    def test_output_is_rgb_at_scale(self, scale):
        constructor = StateConstructor(0, dtype=np.float64)
        core.add_rb(constructor, WIDTH, scale)
        view = ParamView(constructor.build(), "rb")
        out = core.rb_forward(features(1, WIDTH, 3, 2), view, scale)

        assert out.shape == (1, 3, 3 * scale, 2 * scale)

    def test_one_upsampling_conv_per_factor(self):
        constructor = StateConstructor(0)
        core.add_rb(constructor, WIDTH, 8)
        names = [name for name in constructor.build().params if name.endswith("weight")]

        assert names == [f"rb.up{i}.weight" for i in range(3)] + ["rb.out.weight"]
