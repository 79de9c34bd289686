"""Layered run configuration: command-line flag > environment > file > default.

Config files hold one ``key = value`` per line with dotted keys such as
``train.lr0`` or ``tracker.base_age``; ``#`` starts a comment.  Every key can
be overridden from the environment as ``SPEEDTRACK_<KEY>`` with dots turned
into underscores, e.g. ``SPEEDTRACK_TRAIN_LR0=1e-3``.
"""
import dataclasses
import os
from typing import Any, Dict, Mapping, Optional

from .errors import ConfigurationError

ENV_PREFIX = "SPEEDTRACK_"


def read_config_file(path) -> Dict[str, str]:
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{lineno}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            if not key:
                raise ConfigurationError(f"{path}:{lineno}: empty key")
            values[key] = val
    return values


def env_key(key):
    return ENV_PREFIX + key.replace(".", "_").replace("-", "_").upper()


def _coerce(text, like, key):
    if isinstance(like, bool):
        low = str(text).strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"{key}: expected a boolean, got {text!r}")
    try:
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
        if isinstance(like, tuple):
            parts = [p for p in str(text).replace(",", " ").split()]
            return tuple(float(p) for p in parts)
    except ValueError:
        raise ConfigurationError(f"{key}: cannot parse {text!r}") from None
    if like is None and str(text).lower() in ("none", ""):
        return None
    if like is None:
        for conv in (int, float):
            try:
                return conv(text)
            except ValueError:
                pass
        return text
    return text


def resolve(defaults: Mapping[str, Any], file_values: Optional[Mapping[str, str]] = None,
            environ: Optional[Mapping[str, str]] = None, flags: Optional[Mapping[str, Any]] = None):
    """Merge the layers for every key in ``defaults``.

    File and environment strings are converted to the default's type; flags
    are taken as given (``None`` means "not set").  Unknown file keys raise.

    Returns:
        ``(values, sources)`` where ``sources[key]`` is one of
        ``default``, ``file``, ``env``, ``flag``.
    """
    file_values = dict(file_values or {})
    environ = os.environ if environ is None else environ
    flags = flags or {}
    unknown = sorted(set(file_values) - set(defaults))
    if unknown:
        raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
    values, sources = {}, {}
    for key, default in defaults.items():
        val, src = default, "default"
        if key in file_values:
            val, src = _coerce(file_values[key], default, key), "file"
        ek = env_key(key)
        if ek in environ:
            val, src = _coerce(environ[ek], default, key), "env"
        if flags.get(key) is not None:
            val, src = flags[key], "flag"
        values[key] = val
        sources[key] = src
    return values, sources


def dataclass_defaults(cls, prefix):
    """``{prefix.field: default}`` for the scalar fields of a dataclass."""
    out = {}
    for f in dataclasses.fields(cls):
        if f.default is dataclasses.MISSING:
            continue
        if isinstance(f.default, (int, float, str, bool, tuple)) or f.default is None:
            out[f"{prefix}.{f.name}"] = f.default
    return out


def build(cls, prefix, values, **extra):
    kw = {k[len(prefix) + 1:]: v for k, v in values.items() if k.startswith(prefix + ".")}
    kw.update(extra)
    return cls(**kw)
