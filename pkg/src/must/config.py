"""INI configuration mapped onto the module dataclasses.

Sections mirror the configs: ``[data]`` (GeneratorConfig), ``[encoder]``,
``[model]``, ``[train]``, ``[ldm]``, ``[denoiser]`` and ``[eval]``
(pipeline-level options). Values are parsed by the declared field type;
tuples are comma separated. Unknown sections or keys are config errors.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
import types
import typing
from pathlib import Path

from .encoders import EncoderConfig
from .evalkit import PipelineConfig
from .ldm import LDMConfig
from .model import ModelConfig
from .synthcohort import ConfigError, GeneratorConfig
from .trainer import TrainConfig

SEED_ENV = "MUST_SEED"

_EVAL_KEYS = {"ddim_steps": int, "n_samples": int, "unimodal": bool, "missing": bool,
              "ldm_use_cls": bool, "folds": tuple}


def _parse_bool(raw: str, key: str) -> bool:
    v = raw.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(key, f"expected a boolean, got {raw!r}")


def _coerce(raw: str, typ, key: str):
    origin = typing.get_origin(typ)
    args = typing.get_args(typ)
    try:
        if typ is bool:
            return _parse_bool(raw, key)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw.strip()
        if origin is tuple or typ is tuple:
            inner = args[0] if args else int
            parts = [p for p in (s.strip() for s in raw.split(",")) if p]
            return tuple(_coerce(p, inner, key) for p in parts)
        if origin in (typing.Union, types.UnionType):
            if raw.strip().lower() in ("", "none"):
                return None
            return _coerce(raw, next(a for a in args if a is not type(None)), key)
    except ValueError as exc:
        raise ConfigError(key, f"cannot parse {raw!r}: {exc}") from exc
    raise ConfigError(key, f"unsupported field type {typ!r}")


def _apply(cls, section: dict[str, str], prefix: str, base=None):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.name in hints}
    kwargs = {}
    for key, raw in section.items():
        if key not in names:
            raise ConfigError(f"{prefix}.{key}", "unknown key")
        kwargs[key] = _coerce(raw, hints[key], f"{prefix}.{key}")
    return dataclasses.replace(base, **kwargs) if base is not None else cls(**kwargs)


@dataclasses.dataclass
class RunConfig:
    data: GeneratorConfig
    pipeline: PipelineConfig
    seed: int | None
    seed_source: str
    present: dict  # section -> set of keys given in the file


SECTIONS = ("data", "encoder", "model", "train", "ldm", "denoiser", "eval", "run")


def read_ini(path) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    path = Path(path)
    text = path.read_text()
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError("config", f"malformed config file: {exc}") from exc
    out = {}
    for sec in parser.sections():
        if sec not in SECTIONS:
            raise ConfigError(sec, "unknown config section")
        out[sec] = dict(parser.items(sec))
    return out


def resolve_seed(flag_seed: int | None, file_seed: str | None) -> tuple[int | None, str]:
    """Precedence: command-line flag, then ``MUST_SEED``, then the config file."""
    if flag_seed is not None:
        return int(flag_seed), "flag"
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            return int(env), "env"
        except ValueError as exc:
            raise ConfigError(SEED_ENV, f"not an integer: {env!r}") from exc
    if file_seed is not None:
        try:
            return int(file_seed), "file"
        except ValueError as exc:
            raise ConfigError("run.seed", f"not an integer: {file_seed!r}") from exc
    return None, "none"


def load_config(path=None, flag_seed: int | None = None) -> RunConfig:
    raw = read_ini(path) if path is not None else {}
    run = dict(raw.get("run", {}))
    file_seed = run.pop("seed", None)
    if run:
        raise ConfigError(f"run.{sorted(run)[0]}", "unknown key")
    seed, source = resolve_seed(flag_seed, file_seed)
    data = raw.get("data", {})
    gcfg = _apply(GeneratorConfig, {k: v for k, v in data.items() if k != "risk_weights"}, "data")
    if "risk_weights" in data:
        try:
            vecs = tuple(tuple(float(x) for x in part.split(",")) for part in data["risk_weights"].split(";"))
        except ValueError as exc:
            raise ConfigError("data.risk_weights", str(exc)) from exc
        gcfg = dataclasses.replace(gcfg, risk_weights=vecs)
    enc = _apply(EncoderConfig, raw.get("encoder", {}), "encoder")
    model = _apply(ModelConfig, raw.get("model", {}), "model", ModelConfig(encoder=enc))
    train = _apply(TrainConfig, raw.get("train", {}), "train")
    ldm = _apply(LDMConfig, raw.get("ldm", {}), "ldm")
    den = raw.get("denoiser", {})
    for k in den:
        if k not in ("layers", "heads", "parameterization"):
            raise ConfigError(f"denoiser.{k}", "unknown key")
    ev = {}
    for k, v in raw.get("eval", {}).items():
        if k not in _EVAL_KEYS:
            raise ConfigError(f"eval.{k}", "unknown key")
        ev[k] = _coerce(v, tuple[int, ...] if k == "folds" else _EVAL_KEYS[k], f"eval.{k}")
    if seed is not None:
        gcfg = dataclasses.replace(gcfg, seed=seed)
        model = dataclasses.replace(model, seed=seed)
        train = dataclasses.replace(train, seed=seed)
        ldm = dataclasses.replace(ldm, seed=seed)
    for k, v in den.items():
        if k == "parameterization":
            if v.strip() not in ("eps", "x0"):
                raise ConfigError("denoiser.parameterization", f"expected 'eps' or 'x0', got {v!r}")
            ev["denoiser_parameterization"] = v.strip()
        else:
            ev[f"denoiser_{k}"] = _coerce(v, int, f"denoiser.{k}")
    pipe = PipelineConfig(model=model, train=train, ldm=ldm, seed=seed if seed is not None else 0, **ev)
    return RunConfig(gcfg, pipe, seed, source,
                     {s: set(v) for s, v in raw.items()})


def require(cfg: RunConfig, *keys: str) -> None:
    """Raise ``ConfigError`` naming the first ``section.key`` missing from the file."""
    for key in keys:
        if key == "run.seed":
            if cfg.seed is None:
                raise ConfigError("run.seed", f"required (config file, ${SEED_ENV}, or --seed)")
            continue
        sec, name = key.split(".", 1)
        if name not in cfg.present.get(sec, set()):
            raise ConfigError(key, "required key missing from config")
