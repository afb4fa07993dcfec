import math
import re
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from core.errors import ConfigError, MissingKeyError, OutOfRangeError, UnknownKeyError
from core.targets.factory import TARGETS

TARGET_KINDS = tuple(sorted(TARGETS))


class _Section(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)


class GridConfig(_Section):
    n: int = Field(ge=8, le=1024)
    side_length: float = Field(default=2 * math.pi, gt=0)

    @field_validator('n')
    @classmethod
    def _power_of_two(cls, n: int) -> int:
        if n & (n - 1):
            raise ValueError(f"n must be a power of two, got {n}")
        return n


class TargetConfig(_Section):
    kind: str

    @field_validator('kind')
    @classmethod
    def _known(cls, kind: str) -> str:
        if kind not in TARGETS:
            raise ValueError(f"unknown target '{kind}', expected one of {', '.join(TARGET_KINDS)}")
        return kind


class InitialDataConfig(_Section):
    family: Literal['bump', 'helix', 'random'] = 'bump'
    amplitude: float = Field(default=0.03, ge=0)
    width: float = Field(default=1.0, gt=0)
    center: Tuple[float, float] = (0.0, 0.0)
    theta: float = Field(default=0.5, gt=0, lt=math.pi)
    mode: int = Field(default=1, ge=1)
    seed: int = Field(default=0, ge=0)
    spectrum: Literal['gaussian', 'scale_free'] = 'gaussian'
    smoothing: float = Field(default=0.5, gt=0)
    band: Optional[Tuple[float, float]] = None


class FlowConfig(_Section):
    mode: Literal['heat', 'sl', 'gauge', 'full'] = 'heat'


class NumericsConfig(_Section):
    dt: Optional[float] = Field(default=None, gt=0)
    T: float = Field(default=1.0, gt=0)
    s_max: Optional[float] = Field(default=None, gt=0)
    tol_Q: float = Field(default=1e-6, gt=0, lt=1)
    smallness: float = Field(default=0.05, gt=0)
    stability_fraction: float = Field(default=0.5, gt=0, le=1)
    sample_every: int = Field(default=1, ge=1)
    checkpoint_every: int = Field(default=0, ge=0)
    gauge_times: int = Field(default=7, ge=3)
    threads: int = Field(default=1, ge=1, le=256)


class DiagnosticsConfig(_Section):
    envelopes: bool = False
    sigmas: List[float] = Field(default_factory=lambda: [0.0, 0.5, 1.0])
    delta: float = Field(default=1 / 800, gt=0, le=1)
    iterates: bool = False
    decay_fits: bool = True
    decay_shells: List[int] = Field(default_factory=list)
    residual_suite: bool = True
    epsilon_sweep: List[float] = Field(default_factory=list)

    @field_validator('sigmas')
    @classmethod
    def _on_lattice(cls, sigmas: List[float]) -> List[float]:
        for sigma in sigmas:
            if not 0 <= sigma <= 2 or (8 * sigma) != int(8 * sigma):
                raise ValueError(f"sigma {sigma} is not a multiple of 1/8 in [0, 2]")
        return sigmas


class OutputConfig(_Section):
    directory: str = 'caloric_output'
    wandb_project: str = ''
    save_trajectory: bool = False


class RunConfig(_Section):
    """Validated run configuration. `target = "<kind>"` at top level is shorthand for `[target] kind = ...`."""
    grid: GridConfig
    target: TargetConfig
    initial_data: InitialDataConfig = Field(default_factory=InitialDataConfig)
    flow: FlowConfig = Field(default_factory=FlowConfig)
    numerics: NumericsConfig = Field(default_factory=NumericsConfig)
    diagnostics: DiagnosticsConfig = Field(default_factory=DiagnosticsConfig)
    output: OutputConfig = Field(default_factory=OutputConfig)

    @model_validator(mode='before')
    @classmethod
    def _target_shorthand(cls, data):
        if isinstance(data, dict) and isinstance(data.get('target'), str):
            data = {**data, 'target': {'kind': data['target']}}
        return data

    @model_validator(mode='after')
    def _helix_on_sphere(self):
        if self.initial_data.family == 'helix' and self.target.kind != 'sphere2':
            raise ValueError("the helix family needs target kind sphere2")
        return self


_SECTION = re.compile(r'^\s*\[\s*([A-Za-z0-9_]+)\s*\]')
_KEY = re.compile(r'^\s*([A-Za-z0-9_]+)\s*=')
_TOML_LINE = re.compile(r'line (\d+)')


def key_lines(text: str) -> Dict[Tuple[str, ...], int]:
    """1-based line of every `key = value` (keyed by (section, key) or (key,)) and every `[section]` header."""
    lines: Dict[Tuple[str, ...], int] = {}
    section: Optional[str] = None
    for number, line in enumerate(text.splitlines(), start=1):
        header = _SECTION.match(line)
        if header:
            section = header.group(1)
            lines.setdefault((section,), number)
            continue
        key = _KEY.match(line)
        if key:
            loc = (section, key.group(1)) if section else (key.group(1),)
            lines.setdefault(loc, number)
    return lines


def _error_line(loc: Tuple, lines: Dict[Tuple[str, ...], int]) -> int:
    loc = tuple(str(part) for part in loc if not isinstance(part, int))
    while loc:
        if loc in lines:
            return lines[loc]
        loc = loc[:-1]
    return 0


def parse_config(text: str) -> RunConfig:
    """Parses TOML text into a validated RunConfig.

    The first validation error is raised as UnknownKeyError, MissingKeyError or OutOfRangeError,
    naming the key and its line; malformed TOML raises a plain ConfigError.
    """
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as err:
        match = _TOML_LINE.search(str(err))
        raise ConfigError(f"malformed config: {err}", line=int(match.group(1)) if match else 0) from err
    try:
        return RunConfig.model_validate(data)
    except ValidationError as err:
        first = err.errors()[0]
        loc = first['loc']
        key = '.'.join(str(part) for part in loc) or '<root>'
        line = _error_line(loc, key_lines(text))
        if first['type'] == 'extra_forbidden':
            raise UnknownKeyError(f"unknown key '{key}'", line=line) from err
        if first['type'] == 'missing':
            raise MissingKeyError(f"missing required key '{key}'", line=line) from err
        message = first['msg'].removeprefix('Value error, ')
        raise OutOfRangeError(f"invalid value for '{key}': {message}", line=line) from err


def load_config(path: str) -> RunConfig:
    with open(path, 'rb') as f:
        raw = f.read()
    try:
        text = raw.decode('utf-8')
    except UnicodeDecodeError as err:
        raise ConfigError(f"{path} is not UTF-8 text") from err
    return parse_config(text)
