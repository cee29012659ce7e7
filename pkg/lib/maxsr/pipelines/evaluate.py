"""
Benchmark evaluation: bicubic degradation of HR images, super-resolution with
an optional self-ensemble, and Y-channel PSNR/SSIM aggregated into a report.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Protocol, Tuple, Union

import numpy as np
import pandas as pd

from maxsr.errors import ImageFormatError, ShapeError
from maxsr.pipelines.imaging import (
    DIHEDRAL_CODES,
    ImageBuffer,
    bicubic_resize,
    dihedral,
    inverse_code,
    quantize,
    rgb_to_y,
)
from maxsr.pipelines.metrics import psnr, shave, ssim
from maxsr.utilities.general import Settings
from maxsr.utilities.parsers import Parse

logger = logging.getLogger(__name__)


class Upscaler(Protocol):
    """Anything that maps an [h, w, 3] float image to [h*scale, w*scale, 3]."""

    scale: int

    def upscale(self, image: np.ndarray) -> np.ndarray:
        ...


class BicubicUpscaler:
    """Plain bicubic interpolation, the baseline and a dihedral-equivariant stand-in."""

    def __init__(self, scale: int):
        self.scale = scale

    def __repr__(self):
        return f"BicubicUpscaler(x{self.scale})"

    def upscale(self, image: np.ndarray) -> np.ndarray:
        height, width = image.shape[:2]
        return bicubic_resize(image, height * self.scale, width * self.scale)


@dataclass(frozen=True)
class ImageScore:
    name: str
    psnr: float
    ssim: float


@dataclass(frozen=True)
class EvalSettings:
    scale: int
    border: int
    self_ensemble: bool = False
    attention_mode: str = ""
    dataset: str = ""


@dataclass
class EvalReport:
    """
    Per-image and mean Y-channel scores of one dataset.

    Attributes:
        settings: EvalSettings
            Scale, border crop, self-ensemble flag and attention mode used.
        scores: list of ImageScore
            One entry per evaluated image, in file-name order.
        skipped: list of str
            Files that could not be read, with the reason.
    """

    settings: EvalSettings
    scores: List[ImageScore] = field(default_factory=list)
    skipped: List[str] = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        if not self.scores:
            return float("nan")
        return float(np.mean([s.psnr for s in self.scores]))

    @property
    def mean_ssim(self) -> float:
        if not self.scores:
            return float("nan")
        return float(np.mean([s.ssim for s in self.scores]))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "settings": asdict(self.settings),
            "images": [asdict(score) for score in self.scores],
            "mean": {"psnr": self.mean_psnr, "ssim": self.mean_ssim},
            "skipped": list(self.skipped),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_frame(
        self, as_frame: Optional[bool] = True
    ) -> Union[Dict[str, list], pd.DataFrame]:
        columns = {
            "image": [s.name for s in self.scores],
            "psnr": [s.psnr for s in self.scores],
            "ssim": [s.ssim for s in self.scores],
        }
        return Parse.table(columns, as_frame)

    def to_table(self) -> str:
        """One summary row in "PSNR SSIM" order, the layout benchmark tables use."""
        name = self.settings.dataset or "dataset"
        suffix = "+" if self.settings.self_ensemble else ""
        summary = pd.DataFrame(
            {
                "Scale": [f"x{self.settings.scale}{suffix}"],
                f"{name} PSNR": [round(self.mean_psnr, 2)],
                f"{name} SSIM": [round(self.mean_ssim, 4)],
            }
        )
        return summary.to_string(index=False)


def self_ensemble_forward(model: Upscaler, image: np.ndarray) -> np.ndarray:
    """Mean of the model over the eight dihedral transforms of `image`, each undone."""
    outputs = [
        dihedral(model.upscale(dihedral(image, code)), inverse_code(code))
        for code in DIHEDRAL_CODES
    ]
    return np.mean(outputs, axis=0)


def degrade(hr: ImageBuffer, scale: int) -> np.ndarray:
    """8-bit LR counterpart of an HR image whose extents divide by `scale`."""
    low = bicubic_resize(
        hr.to_float(), hr.height // scale, hr.width // scale, antialias=True
    )
    return quantize(low).astype(np.float64) / 255.0


def score_image(
    model: Upscaler, hr: ImageBuffer, border: int, ensemble: bool = False
) -> ImageScore:
    """Super-resolve the degraded `hr` and score it against `hr` on the Y channel."""
    hr = hr.crop_to_multiple(model.scale)
    low = degrade(hr, model.scale)
    restored = self_ensemble_forward(model, low) if ensemble else model.upscale(low)
    if restored.shape != hr.pixels.shape:
        raise ShapeError(
            f"{hr.name}: model produced {restored.shape}, expected {hr.pixels.shape}"
        )

    sr_y = rgb_to_y(quantize(restored).astype(np.float64) / 255.0)
    hr_y = rgb_to_y(hr.to_float())
    return ImageScore(
        hr.name,
        psnr(sr_y, hr_y, border=border),
        ssim(shave(sr_y, border), shave(hr_y, border)),
    )


def evaluate_dataset(
    model: Upscaler,
    hr_dir: Union[str, Path],
    border: Optional[int] = None,
    ensemble: bool = False,
    workers: Optional[int] = None,
    attention_mode: str = "",
) -> EvalReport:
    """
    Evaluate `model` on every PNG in `hr_dir`.

    Args:
      model: Upscaler
        A MaxSR network, a BicubicUpscaler or anything with `scale` and
        `upscale`.
      hr_dir: path
        Directory of 8-bit RGB PNG ground-truth images.
      border: int, optional
        Pixels shaved per side before scoring; defaults to the scale.
      ensemble: bool
        Average over the eight dihedral transforms (the "+" variant).
      workers: int, optional
        Images scored in parallel; defaults to MAXSR_THREADS.
      attention_mode: str
        Recorded in the report settings only.

    Returns:
      An EvalReport. Unreadable files, and images too small to score at
      this scale and border, are skipped with a warning and listed in
      `skipped`.
    """
    hr_dir = Path(hr_dir)
    border = model.scale if border is None else border
    settings = EvalSettings(model.scale, border, ensemble, attention_mode, hr_dir.name)
    report = EvalReport(settings)

    images = []
    for path in sorted(hr_dir.glob("*.png")):
        try:
            images.append(ImageBuffer.read(path))
        except (ImageFormatError, OSError) as err:
            logger.warning("Skipping %s: %s", path.name, err)
            report.skipped.append(f"{path.name}: {err}")

    def attempt(hr: ImageBuffer) -> Tuple[Optional[ImageScore], Optional[ShapeError]]:
        try:
            return score_image(model, hr, border, ensemble), None
        except ShapeError as err:
            return None, err

    workers = workers or Settings.from_env().threads
    with ThreadPoolExecutor(max_workers=workers) as pool:
        outcomes = list(pool.map(attempt, images))
    for hr, (score, err) in zip(images, outcomes):
        if score is None:
            logger.warning("Skipping %s: %s", hr.name, err)
            report.skipped.append(f"{hr.name}: {err}")
        else:
            report.scores.append(score)
    logger.info(
        "%s: %d images, PSNR %.2f dB, SSIM %.4f",
        hr_dir.name,
        len(report.scores),
        report.mean_psnr,
        report.mean_ssim,
    )

    return report
