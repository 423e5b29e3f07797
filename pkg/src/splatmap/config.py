"""Run configuration: a flat ``section.key = value`` text file.

Sections are ``run``, ``synthetic``, ``tracker``, ``mapper`` and ``ba``.
Unknown keys are errors. ``run.profile`` picks iteration counts and the
keyframe interval before explicit keys are applied.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .bundle_adjustment import BAConfig
from .datasets import SyntheticSpec
from .mapper import MapperConfig
from .tracker import TrackerConfig

PROFILES = {
    # tracking iterations, mapping iterations, keyframe interval
    "replica": {"tracker.iterations": 10, "mapper.iterations": 100, "tracker.keyframe_interval": 30},
    "tum": {"tracker.iterations": 30, "mapper.iterations": 100, "tracker.keyframe_interval": 5},
}

BACKGROUNDS = {"black": (0.0, 0.0, 0.0), "white": (1.0, 1.0, 1.0)}


@dataclass
class RunSection:
    profile: str = "replica"
    dataset: str = "synthetic"  # synthetic | tum
    tum_path: str = ""
    background: str = "black"
    seed: int = 0
    output: str = "out"
    deterministic: bool = True
    mode: str = "sequential"  # sequential | parallel
    max_frames: int = 0  # 0 = all
    previews: bool = True


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    mapper: MapperConfig = field(default_factory=MapperConfig)
    ba: BAConfig = field(default_factory=BAConfig)

    SECTIONS = ("run", "synthetic", "tracker", "mapper", "ba")

    def validate(self):
        """Check every section; cross-field checks run here so that keys may
        be given in any order."""
        for name in self.SECTIONS:
            check = getattr(getattr(self, name), "__post_init__", None)
            if check is not None:
                check()
        if self.run.dataset not in ("synthetic", "tum"):
            raise ValueError(f"run.dataset must be synthetic or tum, got {self.run.dataset!r}")
        if self.run.dataset == "tum" and not self.run.tum_path:
            raise ValueError("run.tum_path is required for the tum dataset")
        if self.run.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.run.profile!r}")
        if self.run.background not in BACKGROUNDS:
            raise ValueError("run.background must be black or white")
        if self.run.mode not in ("sequential", "parallel"):
            raise ValueError("run.mode must be sequential or parallel")
        return self

    @property
    def background(self):
        return BACKGROUNDS[self.run.background]

    def items(self):
        for name in self.SECTIONS:
            section = getattr(self, name)
            for f in dataclasses.fields(section):
                yield f"{name}.{f.name}", getattr(section, f.name)

    def set(self, key, text):
        name, _, attr = key.partition(".")
        if name not in self.SECTIONS or not attr:
            raise KeyError(f"unknown configuration key {key!r}")
        section = getattr(self, name)
        names = {f.name for f in dataclasses.fields(section)}
        if attr not in names:
            raise KeyError(f"unknown configuration key {key!r}")
        current = getattr(section, attr)
        value = _coerce(text, current) if isinstance(text, str) else text
        setattr(section, attr, value)

    def dump(self):
        lines = ["# splatmap run configuration"]
        for key, value in self.items():
            lines.append(f"{key} = {_format(value)}")
        return "\n".join(lines) + "\n"


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_format(v) for v in value)
    return str(value)


def _coerce(text, current):
    text = text.strip()
    if isinstance(current, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    if isinstance(current, (tuple, list)):
        return tuple(float(v) for v in text.split(","))
    return text


def parse_config(text, source="<string>") -> RunConfig:
    entries = []
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{no}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        entries.append((no, key, value))
    cfg = RunConfig()
    profile = next((v for _, k, v in entries if k == "run.profile"), cfg.run.profile)
    if profile not in PROFILES:
        raise ValueError(f"{source}: unknown profile {profile!r}")
    for key, value in PROFILES[profile].items():
        cfg.set(key, value)
    for no, key, value in entries:
        try:
            cfg.set(key, value)
        except (KeyError, ValueError) as exc:
            raise ValueError(f"{source}:{no}: {exc}") from None
    try:
        return cfg.validate()
    except ValueError as exc:
        raise ValueError(f"{source}: {exc}") from None


def load_config(path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(), str(path))
