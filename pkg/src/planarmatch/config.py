"""Run configuration, INI round-trip, and the seed-splitting scheme.

All randomness in a run flows from one root seed.  Stage generators use
``derive_seed(root, stage_name)``: the low 63 bits of
sha256("{root}:{stage}"), so adding a stage never perturbs the draws of the
others.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, fields

VARIANTS = ("base32_no_H", "base32_with_H", "no_segmentation", "full")
SEGMENTATION_MODES = ("consistency", "embedding", "oracle")

CONFIG_VERSION = 1


def derive_seed(root_seed: int, stage: str) -> int:
    """Deterministic child seed for a named stage."""
    digest = hashlib.sha256(f"{root_seed}:{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFFFFFFFFFFFFFF


@dataclass
class RunConfig:
    # scene
    seed: int = 0
    image_width: int = 640
    image_height: int = 480
    n_planes: int = 4
    baseline_scale: float = 0.25
    fronto_parallel: bool = False
    noise_sigma: float = 0.05
    descriptor_dim: int = 64
    gt_stride: int = 1
    # coarse stage
    theta1: float = 1.0
    groups: int = 8
    loc_temperature: float = 0.5
    hypothesis_source: str = "pipeline"  # or "ground_truth"
    # segmentation stage
    seg_mode: str = "consistency"
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    # refinement stage
    attn_temperature: float = 0.05
    window_radius: int = 3
    inlier_threshold_px: float = 2.0
    confidence_gain: float = 20.0
    confidence_midpoint: float = 0.85
    min_confidence: float = 0.85
    # evaluation
    ransac_threshold_px: float = 1.0
    point_accuracy_threshold_px: float = 1.0
    # run
    variant: str = "full"

    _SECTIONS = {
        "scene": (
            "seed",
            "image_width",
            "image_height",
            "n_planes",
            "baseline_scale",
            "fronto_parallel",
            "noise_sigma",
            "descriptor_dim",
            "gt_stride",
        ),
        "coarse": ("theta1", "groups", "loc_temperature", "hypothesis_source"),
        "segmentation": ("seg_mode", "focal_gamma", "focal_alpha"),
        "refinement": (
            "attn_temperature",
            "window_radius",
            "inlier_threshold_px",
            "confidence_gain",
            "confidence_midpoint",
            "min_confidence",
        ),
        "evaluation": ("ransac_threshold_px", "point_accuracy_threshold_px"),
        "run": ("variant",),
    }

    @property
    def image_size(self) -> tuple[int, int]:
        return self.image_width, self.image_height

    def validate(self) -> None:
        if self.image_width % 32 or self.image_height % 32:
            raise ValueError("image size must be divisible by 32")
        if not 1 <= self.n_planes <= 16:
            raise ValueError("n_planes must be in [1, 16]")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.seg_mode not in SEGMENTATION_MODES:
            raise ValueError(f"seg_mode must be one of {SEGMENTATION_MODES}")
        if self.hypothesis_source not in ("pipeline", "ground_truth"):
            raise ValueError("hypothesis_source must be 'pipeline' or 'ground_truth'")
        if self.theta1 <= 0:
            raise ValueError("theta1 must be positive")
        if self.descriptor_dim < 8 or self.descriptor_dim % self.groups:
            raise ValueError("descriptor_dim must be >= 8 and divisible by groups")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")

    def to_ini_text(self) -> str:
        cp = configparser.ConfigParser()
        cp["meta"] = {"format_version": str(CONFIG_VERSION)}
        by_name = {f.name: getattr(self, f.name) for f in fields(self)}
        for section, names in self._SECTIONS.items():
            cp[section] = {}
            for name in names:
                value = by_name[name]
                if isinstance(value, bool):
                    cp[section][name] = "true" if value else "false"
                elif isinstance(value, float):
                    cp[section][name] = repr(value)
                else:
                    cp[section][name] = str(value)
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini_text(cls, text: str) -> "RunConfig":
        cp = configparser.ConfigParser()
        cp.read_string(text)
        kwargs = {}
        types = {f.name: f.type for f in fields(cls)}
        defaults = cls()
        for section, names in cls._SECTIONS.items():
            if not cp.has_section(section):
                continue
            for name in names:
                if not cp.has_option(section, name):
                    continue
                current = getattr(defaults, name)
                if isinstance(current, bool):
                    kwargs[name] = cp.getboolean(section, name)
                elif isinstance(current, int):
                    kwargs[name] = cp.getint(section, name)
                elif isinstance(current, float):
                    kwargs[name] = cp.getfloat(section, name)
                else:
                    kwargs[name] = cp.get(section, name)
        return cls(**kwargs)

    def apply_overrides(self, overrides: dict) -> None:
        valid = {f.name for f in fields(self)}
        for key, value in overrides.items():
            if value is None:
                continue
            if key not in valid:
                raise ValueError(f"unknown config field {key!r}")
            setattr(self, key, value)
