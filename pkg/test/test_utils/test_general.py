import numpy as np
import pandas as pd
import pytest
from PIL import Image

from maxsr.errors import ConfigError, ImageFormatError
from maxsr.utilities.general import Files, Settings


class TestSettings:
    def test_defaults(self, monkeypatch):
        monkeypatch.delenv("MAXSR_THREADS", raising=False)
        monkeypatch.delenv("MAXSR_LOG_LEVEL", raising=False)
        settings = Settings.from_env()

        assert settings.threads == 1 and settings.log_level == "WARNING"

    def test_environment(self, monkeypatch):
        monkeypatch.setenv("MAXSR_THREADS", "4")
        monkeypatch.setenv("MAXSR_LOG_LEVEL", "debug")
        settings = Settings.from_env()

        assert settings.threads == 4 and settings.log_level == "DEBUG"

    @pytest.mark.parametrize("value", ["0", "many"])
    def test_bad_threads(self, monkeypatch, value):
        monkeypatch.setenv("MAXSR_THREADS", value)
        with pytest.raises(ConfigError):
            Settings.from_env()

    def test_bad_level(self, monkeypatch):
        monkeypatch.setenv("MAXSR_LOG_LEVEL", "LOUD")
        with pytest.raises(ConfigError):
            Settings.from_env()


class TestFiles:
    def test_atomic_write_replaces(self, tmp_path):
        target = tmp_path / "nested" / "out.bin"
        Files.atomic_write(target, b"first")
        Files.atomic_write(target, b"second")

        assert target.read_bytes() == b"second"
        assert [p.name for p in target.parent.iterdir()] == ["out.bin"]

    def test_failed_write_leaves_target(self, tmp_path, monkeypatch):
        target = tmp_path / "out.bin"
        target.write_bytes(b"kept")

        def fail(src, dst):
            raise OSError("disk full")

        monkeypatch.setattr("maxsr.utilities.general.os.replace", fail)
        with pytest.raises(OSError):
            Files.atomic_write(target, b"lost")

        assert target.read_bytes() == b"kept"
        assert [p.name for p in tmp_path.iterdir()] == ["out.bin"]

    def test_write_frame(self, tmp_path):
        path = Files.write_frame(tmp_path / "t.csv", pd.DataFrame({"a": [1, 2]}))

        assert path.read_text().splitlines() == ["a", "1", "2"]

    def test_write_png(self, tmp_path):
        pixels = np.arange(24, dtype=np.uint8).reshape(2, 4, 3)
        Files.write_png(tmp_path / "img.png", pixels)

        assert np.array_equal(np.asarray(Image.open(tmp_path / "img.png")), pixels)

    def test_write_png_rejects_float(self, tmp_path):
        with pytest.raises(ImageFormatError):
            Files.write_png(tmp_path / "img.png", np.zeros((2, 2, 3)))
