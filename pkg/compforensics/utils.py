# Copyright 2024 Google LLC
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     https://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""utility functions."""

import dataclasses
import enum
import hashlib
import json
import pathlib
import types
import typing
from abc import ABC
from abc import abstractmethod
from typing import Any, Dict, List, Union

import numpy as np
import yaml

from compforensics.errors import ConfigError


def parse_json_str(text: str) -> dict[str, Any] | None:
    try:
        # yaml.safe_load accepts JSON as well as hand-written YAML configs.
        result_json = yaml.safe_load(text)
    except yaml.YAMLError:
        return None

    return result_json


def load_json_file(path: str | pathlib.Path) -> dict[str, Any]:
    """Reads a JSON (or YAML) config file into a dict.

    Raises:
      ConfigError: the file is missing or is not a mapping.
    """
    path = pathlib.Path(path)
    if not path.exists():
        raise ConfigError(str(path), "file not found")
    data = parse_json_str(path.read_text())
    if not isinstance(data, dict):
        raise ConfigError(str(path), "expected a JSON object at top level")
    return data


class Deserializable(ABC):
    @classmethod
    @abstractmethod
    def from_json(cls, data: dict[Any, Any]):
        pass


# JSON serializer that works for nested classes, enums and numpy values
class JsonEncoder(json.JSONEncoder):

    def default(self, o):
        if isinstance(o, enum.Enum):
            return o.value
        if isinstance(o, set):
            return sorted(o)
        if isinstance(o, np.integer):
            return int(o)
        if isinstance(o, np.floating):
            return float(o)
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, pathlib.PurePath):
            return str(o)
        if dataclasses.is_dataclass(o):
            return {f.name: getattr(o, f.name) for f in dataclasses.fields(o)}
        return o.__dict__


def to_dict(o: Any) -> Union[Dict[str, Any], List[Any], Any]:
    return json.loads(JsonEncoder().encode(o))


def dumps(o: Any) -> str:
    """Canonical JSON text: sorted keys, no whitespace variance."""
    return json.dumps(to_dict(o), sort_keys=True, separators=(",", ":"))


def config_hash(o: Any) -> str:
    return hashlib.sha256(dumps(o).encode("utf-8")).hexdigest()


def derive_seed(*keys: int) -> int:
    """Derives a 32-bit seed from a tuple of integers.

    Used for per-sample seeds of the form (global seed, sample index, ...),
    so the value never depends on execution order.
    """
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def _coerce(value: Any, tp: Any, field: str) -> Any:
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(value, args[0], field)
    if origin in (tuple, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(field, f"expected a list, got {value!r}")
        args = typing.get_args(tp)
        inner = args[0] if args else Any
        return origin(_coerce(v, inner, f"{field}[{i}]") for i, v in enumerate(value))
    if dataclasses.is_dataclass(tp):
        if isinstance(value, tp):
            return value
        if not isinstance(value, dict):
            raise ConfigError(field, f"expected an object, got {value!r}")
        return from_dict(tp, value, prefix=field)
    if isinstance(tp, type) and issubclass(tp, enum.Enum):
        try:
            return tp(value)
        except ValueError:
            allowed = ", ".join(str(m.value) for m in tp)
            raise ConfigError(field, f"must be one of {allowed}, got {value!r}")
    try:
        if tp is bool:
            if isinstance(value, str):
                if value.lower() not in ("true", "false"):
                    raise ValueError(value)
                return value.lower() == "true"
            return bool(value)
        if tp is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if tp is float:
            return float(value)
        if tp is str:
            return str(value)
    except (TypeError, ValueError):
        raise ConfigError(field, f"expected {tp.__name__}, got {value!r}")
    return value


def from_dict(cls, data: dict[str, Any], prefix: str = ""):
    """Builds dataclass `cls` from `data`, coercing values to field types.

    Raises:
      ConfigError: on unknown fields or values of the wrong type.
    """
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    kwargs = {}
    for key, value in data.items():
        path = f"{prefix}.{key}" if prefix else key
        if key not in names:
            raise ConfigError(path, "unknown field")
        kwargs[key] = _coerce(value, hints[key], path)
    return cls(**kwargs)
