"""Experiment config files.

An INI-style document with four sections whose keys are exactly the
:class:`~moerlab.trainer.TrainConfig` fields::

    [model]
    task = char_lm
    num_experts = 16
    top_k = 2

    [router]
    router = kern

    [train]
    steps = 2000
    seeds = 0, 1, 2
    corpus = corpus.txt

    [report]
    name = kern-16-2

Missing keys take their defaults. Unknown keys, keys in the wrong section and
unparsable values are rejected with the offending line number.

:func:`dump_config` writes every field in a fixed order with canonical value
formatting (``repr`` for floats, lower-case booleans, comma-separated seeds).
The config hash stored in run reports is the SHA-256 of that text.
"""
import configparser
import dataclasses
import re

from .trainer import TrainConfig

SECTIONS = {
    "model": ("task", "d", "d_emb", "context", "num_experts", "top_k", "expert_hidden", "activation"),
    "router": ("router", "eps", "init_method", "mc_samples", "renormalize_after_topk"),
    "train": ("steps", "batch_size", "lr", "beta1", "beta2", "adam_eps", "grad_clip", "eval_every",
              "eval_size", "dataset_size", "seeds", "corpus"),
    "report": ("name", "checkpoint"),
}
_FIELD_SECTION = {key: sec for sec, keys in SECTIONS.items() for key in keys}
_TYPES = {f.name: f.type for f in dataclasses.fields(TrainConfig)}

assert set(_FIELD_SECTION) == set(_TYPES), "config sections out of sync with TrainConfig"


class ConfigError(ValueError):
    def __init__(self, message, line=None, source="<config>"):
        self.line = line
        where = f"{source}:{line}" if line is not None else source
        super().__init__(f"{where}: {message}")


def _locate(text):
    """Map ``(section, key)`` and ``section`` to 1-based line numbers."""
    where = {}
    section = None
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        m = re.match(r"\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip()
            where.setdefault(section, no)
            continue
        m = re.match(r"([^=:#;\s][^=:]*?)\s*[=:]", line)
        if m and section is not None:
            where.setdefault((section, m.group(1).strip()), no)
    return where


def _convert(key, raw):
    typ = _TYPES[key]
    raw = raw.strip()
    if typ in ("int", int):
        return int(raw)
    if typ in ("float", float):
        return float(raw)
    if typ in ("bool", bool):
        low = raw.lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if typ in ("tuple", tuple):
        parts = [p for p in re.split(r"[,\s]+", raw) if p]
        return tuple(int(p) for p in parts)
    return raw


def parse_config(text, source="<config>"):
    """Parse and validate config text into a :class:`TrainConfig`."""
    parser = configparser.ConfigParser(
        inline_comment_prefixes=("#", ";"), interpolation=None, default_section="__defaults__"
    )
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        raise ConfigError(str(exc).splitlines()[0], line, source) from None
    where = _locate(text)
    values = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]", where.get(section), source)
        for key, raw in parser.items(section):
            line = where.get((section, key))
            if key not in _FIELD_SECTION:
                raise ConfigError(f"unknown key {key!r} in [{section}]", line, source)
            if _FIELD_SECTION[key] != section:
                raise ConfigError(
                    f"key {key!r} belongs in [{_FIELD_SECTION[key]}], not [{section}]", line, source)
            try:
                values[key] = _convert(key, raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key!r}: {exc}", line, source) from None
    try:
        return TrainConfig(**values)
    except ValueError as exc:
        bad = next((k for k in values if k in str(exc)), None)
        line = where.get((_FIELD_SECTION[bad], bad)) if bad else None
        raise ConfigError(str(exc), line, source) from None


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), source=str(path))


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return str(value)


def dump_config(cfg):
    """Canonical text for ``cfg``; ``parse_config(dump_config(cfg)) == cfg``."""
    lines = []
    for section, keys in SECTIONS.items():
        if lines:
            lines.append("")
        lines.append(f"[{section}]")
        for key in keys:
            lines.append(f"{key} = {_format(getattr(cfg, key))}")
    return "\n".join(lines) + "\n"
