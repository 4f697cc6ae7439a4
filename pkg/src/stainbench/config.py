"""Run configuration: flat key=value text with [sections], configparser syntax.

`stainbench config --defaults` prints every key with its default; missing
mandatory fields raise ConfigError naming the field as section.key.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError, MissingFileError

DEFAULTS: dict[str, dict[str, str]] = {
    "run": {
        "framework": "",          # required for train: ppx2px|asp|bcistainer|ddib|cm|bbdm
        "seed": "",               # required, integer
        "output_dir": "out",
    },
    "data": {
        "source": "toy:two-domain",  # manifest path, toy:two-domain, or toy:tiles
        "split": "train",
        "limit": "0",                # 0 = no limit
        "toy_pairs": "16",
    },
    "train": {
        "steps": "300",
        "lr": "0.002",
        "width": "8",
        "levels": "1",
    },
    "loss": {
        "lambda_adv": "0.05",
        "lambda_l1": "1.0",
        "lambda_pyr": "1.0",
        "lambda_asp": "0.5",
        "lambda_mae": "1.0",
        "lambda_ssim": "0.5",
        "lambda_cls": "0.1",
        "temperature": "0.3",
        "patches_per_image": "16",
        "pyramid_scales": "2",
        "ssim_window": "5",
    },
    "schedule": {
        "T": "50",
        "beta_min": "0.02",
        "beta_max": "0.2",
        "bridge_s": "1.0",
        "sample_steps": "10",
        "cm_sigma_min": "0.002",
        "cm_sigma_max": "5.0",
        "cm_sigma_data": "0.5",
        "cm_rho": "7.0",
        "cm_n_sigmas": "8",
    },
    "eval": {
        "manifest": "",           # required for eval
        "generated_dir": "",      # required for eval
        "split": "test",
        "report": "report.tsv",
        "extractor": "random-projection",
        "extractor_seed": "0",
        "ssim_window": "7",
        "kid_subsets": "20",
        "kid_subset_size": "0",   # 0 = min(1000, n)
        "feature_file_a": "",     # optional externally computed embeddings
        "feature_file_b": "",
    },
}


@dataclass
class RunConfig:
    sections: dict[str, dict[str, str]]
    path: str = ""

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise MissingFileError(f"no such config file: {path}")
        parser = configparser.ConfigParser()
        parser.optionxform = str  # keys are case-sensitive (schedule.T)
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"malformed config file {path}: {exc}")
        sections = {name: dict(DEFAULTS[name]) for name in DEFAULTS}
        for section in parser.sections():
            if section not in sections:
                raise ConfigError(f"unknown config section [{section}]", field=section)
            for key, value in parser.items(section):
                if key not in sections[section]:
                    raise ConfigError(f"unknown config key {section}.{key}",
                                      field=f"{section}.{key}")
                sections[section][key] = value
        return cls(sections, str(path))

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls({name: dict(DEFAULTS[name]) for name in DEFAULTS})

    def _raw(self, section: str, key: str) -> str:
        try:
            return self.sections[section][key]
        except KeyError:
            raise ConfigError(f"unknown config key {section}.{key}", field=f"{section}.{key}")

    def require(self, section: str, key: str) -> str:
        value = self._raw(section, key)
        if value == "":
            raise ConfigError(f"missing config field: {section}.{key}",
                              field=f"{section}.{key}")
        return value

    def get_str(self, section: str, key: str) -> str:
        return self._raw(section, key)

    def get_int(self, section: str, key: str, required: bool = False) -> int:
        raw = self.require(section, key) if required else self._raw(section, key)
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"config field {section}.{key} must be an integer, got {raw!r}",
                              field=f"{section}.{key}")

    def get_float(self, section: str, key: str) -> float:
        raw = self._raw(section, key)
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"config field {section}.{key} must be a number, got {raw!r}",
                              field=f"{section}.{key}")

    def render(self) -> str:
        lines = []
        for section, items in self.sections.items():
            lines.append(f"[{section}]")
            for key, value in items.items():
                lines.append(f"{key} = {value}")
            lines.append("")
        return "\n".join(lines)
