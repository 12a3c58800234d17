"""Run configuration: sectioned key = value text, embeddable as a CSV comment header.

Every output file starts with the full configuration as ``# ``-prefixed lines,
so any output can be handed back to ``--config`` (or ``rerun``) to reproduce it.
Thread count and output directory are deliberately left out of the header:
they must not change the results.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import GaussianDataSpec, make_data
from .denoiser import AnalyticDenoiser, ErrorProfile, NoisyOracle, NoisyOracleConfig, PerturbedAnalytic
from .sampler import SamplerConfig
from .scaling import ScalingSchedule
from .schedule import NoiseSchedule, VarChoice, make_linear_schedule, respace

HEADER_TAG = "# exposure-lab run config"

DEFAULTS: dict[str, dict[str, str]] = {
    "run": {"command": "bias", "seed": "0", "n_chains": "50000"},
    "schedule": {"T": "1000", "beta_start": "", "beta_end": "", "T_prime": "20",
                 "var_choice": "lower"},
    "data": {"name": "gaussian", "dim": "1", "std": ""},
    "denoiser": {"kind": "noisy", "error_profile": "constant", "error": "0.1",
                 "noise_stream": "0", "weights": ""},
    "sampler": {"kind": "ddpm", "eta": "0.0"},
    "scaling": {"form": "none", "b": "1.0", "k": "0.0"},
    "verify": {"n": "200000", "error": "0.1", "two_step_error": "0.05", "rel_tol": "0.02",
               "two_step_rel_tol": "0.05", "n_se": "3", "tolerance": "1.0"},
    "sweep": {"b_grid": "1.00:1.05:0.005", "n_generate": "50000"},
    "norms": {"t_min": "5"},
    "train": {"steps": "20000", "batch": "256", "lr": "0.002", "final_lr": "0.0001",
              "decay": "0.99", "hidden": "64,64,64", "log_every": "100"},
}


class ConfigError(ValueError):
    """Bad configuration; the message names the section, key and, when known, the line."""


def _parser() -> configparser.ConfigParser:
    p = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";",))
    p.optionxform = str
    p.read_dict(DEFAULTS)
    return p


def _strip_header(text: str) -> str:
    """Config text from either a plain config file or the comment header of an output CSV."""
    lines = text.splitlines()
    if not lines or not lines[0].startswith(HEADER_TAG):
        return text
    body = []
    for line in lines[1:]:
        if not line.startswith("#"):
            break
        body.append(line[2:] if line.startswith("# ") else line[1:])
    return "\n".join(body)


@dataclass
class RunConfig:
    parser: configparser.ConfigParser

    @classmethod
    def default(cls) -> RunConfig:
        return cls(_parser())

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> RunConfig:
        p = _parser()
        try:
            p.read_string(_strip_header(text), source=source)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from exc
        cfg = cls(p)
        cfg._check_known(source)
        return cfg

    @classmethod
    def from_file(cls, path: str | Path) -> RunConfig:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text, str(path))

    def _check_known(self, source: str) -> None:
        for section in self.parser.sections():
            if section not in DEFAULTS:
                raise ConfigError(f"{source}: unknown section [{section}]")
            for key in self.parser[section]:
                if key not in DEFAULTS[section]:
                    raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")

    def set(self, dotted: str) -> None:
        """Apply a ``section.key=value`` override."""
        name, sep, value = dotted.partition("=")
        section, dot, key = name.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {dotted!r} is not of the form section.key=value")
        if section not in DEFAULTS or key not in DEFAULTS[section]:
            raise ConfigError(f"override {dotted!r}: unknown setting {section}.{key}")
        self.parser[section][key] = value.strip()

    def get(self, section: str, key: str) -> str:
        return self.parser[section][key]

    def _typed(self, section, key, conv, what):
        raw = self.get(section, key)
        try:
            return conv(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{section}] {key} = {raw!r}: expected {what}") from exc

    def int(self, section: str, key: str) -> int:
        return self._typed(section, key, int, "an integer")

    def float(self, section: str, key: str) -> float:
        return self._typed(section, key, float, "a number")

    def floats(self, section: str, key: str) -> list[float]:
        return self._typed(section, key, lambda s: [float(v) for v in s.split(",") if v.strip()],
                           "a comma-separated list of numbers")

    def grid(self, section: str, key: str) -> list[float]:
        """``start:stop:step`` (inclusive) or a comma-separated list."""
        raw = self.get(section, key).strip()
        if ":" not in raw:
            return self.floats(section, key)
        try:
            start, stop, step = (float(v) for v in raw.split(":"))
            if step <= 0:
                raise ValueError
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key} = {raw!r}: expected start:stop:step") from exc
        count = int(np.floor((stop - start) / step + 1e-9)) + 1
        return [round(start + i * step, 12) for i in range(count)]

    def header(self) -> str:
        buf = io.StringIO()
        self.parser.write(buf)
        lines = [HEADER_TAG] + [f"# {line}".rstrip() for line in buf.getvalue().splitlines()]
        return "\n".join(lines) + "\n"

    # builders

    @property
    def seed(self) -> int:
        return self.int("run", "seed")

    def parent_schedule(self) -> NoiseSchedule:
        T = self.int("schedule", "T")
        choice = self.get("schedule", "var_choice")
        try:
            VarChoice(choice)
        except ValueError as exc:
            raise ConfigError(f"[schedule] var_choice = {choice!r}: expected lower or upper") from exc
        start, end = self.get("schedule", "beta_start"), self.get("schedule", "beta_end")
        b0 = self.float("schedule", "beta_start") if start else 1e-4 * 1000 / T
        b1 = self.float("schedule", "beta_end") if end else 0.02 * 1000 / T
        try:
            return make_linear_schedule(T, b0, b1, choice)
        except ValueError as exc:
            raise ConfigError(f"[schedule] {exc}") from exc

    def grid_schedule(self):
        parent = self.parent_schedule()
        steps = self.int("schedule", "T_prime")
        try:
            return respace(parent, steps)
        except ValueError as exc:
            raise ConfigError(f"[schedule] T_prime: {exc}") from exc

    def data(self):
        kw = {}
        if self.get("data", "std"):
            kw["std"] = self.float("data", "std")
        dim = self.int("data", "dim")
        try:
            return make_data(self.get("data", "name"), dim, **kw)
        except ValueError as exc:
            raise ConfigError(f"[data] name: {exc}") from exc

    def error_profile(self, error: float | None = None) -> ErrorProfile:
        e = self.float("denoiser", "error") if error is None else error
        try:
            return ErrorProfile(self.get("denoiser", "error_profile"), e)
        except ValueError as exc:
            raise ConfigError(f"[denoiser] {exc}") from exc

    def denoiser(self, error: float | None = None):
        from .mlp import load_weights

        parent = self.parent_schedule()
        kind = self.get("denoiser", "kind")
        oracle_cfg = NoisyOracleConfig(self.error_profile(error), self.int("denoiser", "noise_stream"))
        if kind == "noisy":
            return NoisyOracle(oracle_cfg, parent)
        if kind in ("analytic", "perturbed"):
            data = self.data()
            if not isinstance(data, GaussianDataSpec):
                raise ConfigError(f"[denoiser] kind = {kind} needs gaussian data")
            if kind == "analytic":
                return AnalyticDenoiser(data, parent)
            return PerturbedAnalytic(data, oracle_cfg, parent)
        if kind == "mlp":
            path = self.get("denoiser", "weights")
            if not path:
                raise ConfigError("[denoiser] kind = mlp needs a weights file")
            try:
                return load_weights(path, parent)
            except (OSError, ValueError, KeyError) as exc:
                raise ConfigError(f"[denoiser] weights = {path!r}: {exc}") from exc
        raise ConfigError(f"[denoiser] kind = {kind!r}: expected noisy, analytic, perturbed or mlp")

    def scaling(self, b: float | None = None) -> ScalingSchedule | None:
        form = self.get("scaling", "form") if b is None else "uniform"
        T = self.int("schedule", "T_prime")
        b = self.float("scaling", "b") if b is None else b
        k = self.float("scaling", "k")
        try:
            if form == "none":
                return None
            if form == "uniform":
                return ScalingSchedule.uniform(b, T)
            if form == "linear":
                return ScalingSchedule.linear(k, b, T)
        except ValueError as exc:
            raise ConfigError(f"[scaling] {exc}") from exc
        raise ConfigError(f"[scaling] form = {form!r}: expected none, uniform or linear")

    def sampler(self, kind: str | None = None, b: float | None = None) -> SamplerConfig:
        grid, eta, scaling = self.grid_schedule(), self.float("sampler", "eta"), self.scaling(b)
        try:
            return SamplerConfig(kind or self.get("sampler", "kind"), grid, eta, scaling, self.seed)
        except ValueError as exc:
            raise ConfigError(f"[sampler] {exc}") from exc
