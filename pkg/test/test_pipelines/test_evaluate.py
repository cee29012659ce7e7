import json

import numpy as np
import pytest

from maxsr.errors import ShapeError
from maxsr.pipelines import evaluate
from maxsr.pipelines.evaluate import (
    BicubicUpscaler,
    EvalReport,
    EvalSettings,
    ImageScore,
)
from maxsr.pipelines.imaging import ImageBuffer, quantize

rng = np.random.default_rng(4)


def smooth_image(height, width, name="smooth.png"):
    rows, cols = np.meshgrid(
        np.linspace(0, 1, height), np.linspace(0, 1, width), indexing="ij"
    )
    channels = [0.5 + 0.4 * np.sin(2 * np.pi * (f * rows + cols)) for f in (1, 2, 3)]
    return ImageBuffer(quantize(np.stack(channels, axis=-1)), name)


class FlatUpscaler:
    """Ignores the input; a stand-in with a wrong output size."""

    scale = 2

    def upscale(self, image):
        return np.zeros((3, 3, 3))


class TestBicubicUpscaler:
    @pytest.mark.parametrize("scale", [2, 3, 4])
    def test_output_extent(self, scale):
        out = BicubicUpscaler(scale).upscale(rng.uniform(size=(5, 7, 3)))

        assert out.shape == (5 * scale, 7 * scale, 3)

    def test_self_ensemble_matches_plain_bicubic(self):
        # bicubic interpolation commutes with every dihedral transform
        model = BicubicUpscaler(2)
        image = rng.uniform(size=(6, 9, 3))
        plain = model.upscale(image)
        ensembled = evaluate.self_ensemble_forward(model, image)

        assert np.max(np.abs(ensembled - plain)) < 1e-6


class TestDegrade:
    def test_quantized_low_resolution(self):
        hr = smooth_image(12, 18)
        low = evaluate.degrade(hr, 3)

        assert low.shape == (4, 6, 3)
        assert np.allclose(low * 255, np.round(low * 255))


class TestScoreImage:
    def test_scores_on_cropped_image(self):
        score = evaluate.score_image(BicubicUpscaler(2), smooth_image(33, 41), 2)

        assert score.name == "smooth.png"
        assert 20.0 < score.psnr <= 100.0
        assert 0.5 < score.ssim <= 1.0

    def test_wrong_output_shape(self):
        with pytest.raises(ShapeError):
            evaluate.score_image(FlatUpscaler(), smooth_image(32, 32), 2)


class TestEvalReport:
    report = EvalReport(
        EvalSettings(scale=2, border=2, self_ensemble=True, dataset="Set5"),
        [ImageScore("a.png", 30.0, 0.9), ImageScore("b.png", 32.0, 0.95)],
    )

    def test_means(self):
        assert self.report.mean_psnr == pytest.approx(31.0)
        assert self.report.mean_ssim == pytest.approx(0.925)

    def test_empty_means_are_nan(self):
        empty = EvalReport(EvalSettings(scale=2, border=2))

        assert np.isnan(empty.mean_psnr) and np.isnan(empty.mean_ssim)

    def test_json(self):
        payload = json.loads(self.report.to_json())

        assert payload["settings"]["self_ensemble"] is True
        assert [image["name"] for image in payload["images"]] == ["a.png", "b.png"]
        assert payload["mean"]["psnr"] == pytest.approx(31.0)

    def test_frame(self):
        frame = self.report.to_frame()

        assert list(frame.columns) == ["image", "psnr", "ssim"]
        assert len(frame) == 2

    def test_table_lists_psnr_before_ssim(self):
        table = self.report.to_table()

        assert "x2+" in table
        assert table.index("Set5 PSNR") < table.index("Set5 SSIM")
        assert "31.0" in table and "0.925" in table


class TestEvaluateDataset:
    def test_scores_every_png_and_skips_broken_files(self, tmp_path):
        smooth_image(24, 20, "b.png").write(tmp_path / "b.png")
        smooth_image(17, 30, "a.png").write(tmp_path / "a.png")
        (tmp_path / "broken.png").write_bytes(b"not a png")
        (tmp_path / "notes.txt").write_text("ignored")

        report = evaluate.evaluate_dataset(BicubicUpscaler(2), tmp_path, workers=2)

        assert [score.name for score in report.scores] == ["a.png", "b.png"]
        assert len(report.skipped) == 1 and report.skipped[0].startswith("broken.png")
        assert report.settings.border == 2
        assert report.settings.dataset == tmp_path.name

    def test_explicit_border_and_ensemble(self, tmp_path):
        smooth_image(24, 24).write(tmp_path / "s.png")
        report = evaluate.evaluate_dataset(
            BicubicUpscaler(2), tmp_path, border=0, ensemble=True, workers=1
        )
        plain = evaluate.evaluate_dataset(BicubicUpscaler(2), tmp_path, border=0)

        assert report.settings.self_ensemble and report.settings.border == 0
        assert report.mean_psnr == pytest.approx(plain.mean_psnr, abs=1e-2)

    def test_images_too_small_to_score_are_skipped(self, tmp_path):
        smooth_image(48, 48, "large.png").write(tmp_path / "large.png")
        smooth_image(16, 16, "tiny.png").write(tmp_path / "tiny.png")

        report = evaluate.evaluate_dataset(BicubicUpscaler(4), tmp_path, workers=2)

        assert [score.name for score in report.scores] == ["large.png"]
        assert len(report.skipped) == 1 and report.skipped[0].startswith("tiny.png")
        assert "11 pixels" in report.skipped[0]
        assert np.isfinite(report.mean_psnr)

    def test_negative_border_is_an_error(self, tmp_path):
        smooth_image(24, 24).write(tmp_path / "s.png")

        with pytest.raises(ValueError):
            evaluate.evaluate_dataset(BicubicUpscaler(2), tmp_path, border=-1)
