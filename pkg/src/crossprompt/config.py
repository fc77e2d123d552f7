"""INI run configuration: a ``[stream]`` section and a ``[model]`` section.

Keys mirror :class:`StreamConfig` fields and :class:`ContinualPromptTuner`
constructor arguments. Values are parsed against the type of the default.
"""

from __future__ import annotations

import configparser
import inspect
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .exceptions import ConfigurationError
from .stream import StreamConfig, validate_stream_config
from .trainer import ContinualPromptTuner

SECTIONS = ("stream", "model")


def _model_defaults() -> dict:
    sig = inspect.signature(ContinualPromptTuner.__init__)
    return {k: p.default for k, p in sig.parameters.items() if k != "self"}


def _parse_value(key: str, text: str, default):
    text = text.strip()
    if default is None or text.lower() == "none":
        if text.lower() == "none":
            return None
        for kind in (int, float):
            try:
                return kind(text)
            except ValueError:
                pass
        raise ConfigurationError(f"{key}: expected a number or 'none', got {text!r}")
    if isinstance(default, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"{key}: expected a boolean, got {text!r}")
    try:
        return type(default)(text)
    except ValueError as exc:
        raise ConfigurationError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from exc


@dataclass
class RunConfig:
    stream: StreamConfig = field(default_factory=StreamConfig)
    model: dict = field(default_factory=dict)

    def estimator(self) -> ContinualPromptTuner:
        return ContinualPromptTuner(**self.model)

    def with_seed(self, seed: int) -> "RunConfig":
        return RunConfig(replace(self.stream, seed=seed), {**self.model, "seed": seed})

    def with_model(self, **overrides) -> "RunConfig":
        bad = set(overrides) - set(_model_defaults())
        if bad:
            raise ConfigurationError(f"unknown model options: {sorted(bad)}")
        cfg = RunConfig(self.stream, {**self.model, **overrides})
        cfg.estimator()._validate_params()
        return cfg

    def to_dict(self) -> dict:
        return {"stream": self.stream.to_dict(), "model": {**_model_defaults(), **self.model}}

    def to_ini(self) -> str:
        d = self.to_dict()
        out = []
        for section in SECTIONS:
            out.append(f"[{section}]")
            out += [f"{k} = {'none' if v is None else v}" for k, v in d[section].items()]
            out.append("")
        return "\n".join(out)


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"malformed config: {exc}") from exc
    unknown = set(parser.sections()) - set(SECTIONS)
    if unknown:
        raise ConfigurationError(f"unknown sections: {sorted(unknown)}")
    stream_defaults = {f.name: f.default for f in fields(StreamConfig)}
    model_defaults = _model_defaults()
    values = {}
    for section, defaults in (("stream", stream_defaults), ("model", model_defaults)):
        values[section] = {}
        if parser.has_section(section):
            for key, raw in parser.items(section):
                if key not in defaults:
                    raise ConfigurationError(f"unknown key {key!r} in [{section}]")
                values[section][key] = _parse_value(key, raw, defaults[key])
    try:
        stream = StreamConfig(**values["stream"])
        validate_stream_config(stream)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(str(exc)) from exc
    cfg = RunConfig(stream, values["model"])
    cfg.estimator()._validate_params()
    return cfg


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)
