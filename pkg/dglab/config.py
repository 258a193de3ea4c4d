import dataclasses
import enum
import os
import typing
from dataclasses import dataclass
from typing import Any, Dict, Mapping, Optional, Type, TypeVar, Union

import yaml
from dotenv import load_dotenv

from .errors import ConfigurationError

T = TypeVar("T")


@dataclass(frozen=True)
class Settings:
    base_dir: str
    data_dir: str
    runs_dir: str
    log_level: str
    deterministic: bool
    workers: int


def _env_flag(name: str, default: bool) -> bool:
    raw = os.environ.get(name)
    if raw is None:
        return default
    return raw.strip().lower() in ("1", "true", "yes", "on")


def load_config() -> Settings:
    load_dotenv()

    base_dir = os.path.abspath(os.path.dirname(os.path.dirname(__file__)))
    data_dir = os.environ.get("DGLAB_DATA_DIR", os.path.join(base_dir, "data"))

    return Settings(
        base_dir=base_dir,
        data_dir=data_dir,
        runs_dir=os.environ.get("DGLAB_RUNS_DIR", os.path.join(data_dir, "runs")),
        log_level=os.environ.get("DGLAB_LOG_LEVEL", "INFO").upper(),
        deterministic=_env_flag("DGLAB_DETERMINISTIC", False),
        workers=int(os.environ.get("DGLAB_WORKERS", 1)),
    )


# ---------------------------------------------------------------------------
# Structured config files
# ---------------------------------------------------------------------------

def _coerce(hint: Any, value: Any, field: str) -> Any:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)

    if origin is Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, field)

    if dataclasses.is_dataclass(hint):
        if isinstance(value, hint):
            return value
        if isinstance(value, str) and hasattr(hint, "parse"):
            try:
                return hint.parse(value)
            except ConfigurationError as exc:
                raise ConfigurationError(exc.detail, field) from None
        return from_mapping(hint, value, field)

    if isinstance(hint, type) and issubclass(hint, enum.Enum):
        if isinstance(value, hint):
            return value
        for member in hint:
            if value == member.value or (isinstance(value, str) and value.upper() == member.name):
                return member
        choices = ", ".join(m.name for m in hint)
        raise ConfigurationError(f"expected one of {choices}, got {value!r}", field)

    if origin in (tuple, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"expected a list, got {value!r}", field)
        if origin is tuple and args and args[-1] is not Ellipsis:
            if len(value) != len(args):
                raise ConfigurationError(f"expected {len(args)} items, got {len(value)}", field)
            items = [_coerce(a, v, f"{field}[{i}]") for i, (a, v) in enumerate(zip(args, value))]
        else:
            item_hint = args[0] if args else Any
            items = [_coerce(item_hint, v, f"{field}[{i}]") for i, v in enumerate(value)]
        return tuple(items) if origin is tuple else items

    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(f"expected true/false, got {value!r}", field)
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"expected an integer, got {value!r}", field)
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"expected a number, got {value!r}", field)
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigurationError(f"expected a string, got {value!r}", field)
        return value
    return value


def from_mapping(cls: Type[T], data: Any, path: str = "") -> T:
    """Build dataclass ``cls`` from a plain mapping, reporting the failing field path."""
    if data is None:
        data = {}
    if not isinstance(data, Mapping):
        raise ConfigurationError(f"expected a mapping, got {type(data).__name__}", path or None)

    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        where = f"{path}.{unknown[0]}" if path else unknown[0]
        raise ConfigurationError("unknown field", where)

    kwargs = {}
    for name, value in data.items():
        where = f"{path}.{name}" if path else name
        kwargs[name] = _coerce(hints[name], value, where)

    try:
        return cls(**kwargs)
    except ConfigurationError as exc:
        raise exc.within(path) from None


def to_mapping(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: to_mapping(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, enum.Enum):
        return obj.name
    if isinstance(obj, (list, tuple)):
        return [to_mapping(v) for v in obj]
    if isinstance(obj, dict):
        return {str(k): to_mapping(v) for k, v in obj.items()}
    return obj


def read_yaml(path: str) -> Dict[str, Any]:
    if not os.path.exists(path):
        raise ConfigurationError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            data = yaml.safe_load(f)
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"malformed YAML in {path}: {exc}") from None
    return data or {}


def load_train_config(path: str, overrides: Optional[Mapping[str, Any]] = None):
    from .trainer import TrainConfig

    data = read_yaml(path)
    if overrides:
        data = {**data, **{k: v for k, v in overrides.items() if v is not None}}
    return from_mapping(TrainConfig, data)


def dump_yaml(obj: Any, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(to_mapping(obj), f, sort_keys=False)
