import logging
import os
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from pydantic import BaseModel, ValidationError

from src.models.scenario import (
    ActuatorConfig, ControlSettings, DetectorConfig, FiberScenario, ProtocolSettings,
    ScenarioBundle, SourceConfig, Thresholds
)

logger = logging.getLogger(__name__)

DEFAULT_PRESETS_DIR = os.path.join(os.path.dirname(__file__), 'presets')
PRESET_SUFFIX = '.conf'

SECTIONS: Dict[str, type] = {
    'fiber': FiberScenario,
    'source': SourceConfig,
    'detector': DetectorConfig,
    'actuator': ActuatorConfig,
    'thresholds': Thresholds,
    'control': ControlSettings,
    'protocol': ProtocolSettings,
}


def _field_keys(section: str, model: type, exclude: Sequence[str] = ()) -> Dict[str, Tuple[str, str]]:
    return {name: (section, name) for name in model.model_fields if name not in exclude}


# Flat key -> (section, field)
KEYS: Dict[str, Tuple[str, str]] = {
    **_field_keys('fiber', FiberScenario),
    'rep_rate_hz': ('source', 'rep_rate_hz'),
    **_field_keys('detector', DetectorConfig, exclude=('dark_prob_per_gate',)),
    **{f'dark_d{index}': ('detector', 'dark_prob_per_gate') for index in range(4)},
    **_field_keys('actuator', ActuatorConfig),
    **_field_keys('thresholds', Thresholds),
    **_field_keys('control', ControlSettings),
    **_field_keys('protocol', ProtocolSettings),
}


def _split_list(value: str) -> Tuple[str, ...]:
    return tuple(item.strip() for item in value.replace('+', ',').split(',') if item.strip())


CONVERTERS: Dict[str, Callable[[str], object]] = {
    'laser_offset_states': _split_list,
    'key_bases': _split_list,
}


class UnknownPreset(ValueError):
    """Raised when a scenario name is neither a packaged preset nor a readable file"""


class ScenarioParseError(ValueError):
    """Malformed line, unknown key or invalid value in a scenario source"""

    def __init__(self, message: str, source: str, line: Optional[int] = None, key: Optional[str] = None):
        location = source if line is None else f"{source}:{line}"
        detail = f" (key '{key}')" if key else ''
        super().__init__(f"{location}: {message}{detail}")
        self.source = source
        self.line = line
        self.key = key


@dataclass(frozen=True)
class Setting:
    """One key=value assignment and where it came from"""

    key: str
    value: str
    source: str
    line: Optional[int] = None


def available_presets(presets_dir: Optional[str] = None) -> List[str]:
    presets_dir = presets_dir or DEFAULT_PRESETS_DIR
    if not os.path.isdir(presets_dir):
        return []
    return sorted(name[:-len(PRESET_SUFFIX)] for name in os.listdir(presets_dir) if name.endswith(PRESET_SUFFIX))


def parse_assignment(text: str, source: str, line: Optional[int]) -> Setting:
    key, sep, value = text.partition('=')
    key = key.strip()
    if not sep or not key:
        raise ScenarioParseError(f"expected key=value, got '{text.strip()}'", source, line)
    return Setting(key, value.strip(), source, line)


def parse_settings(text: str, source: str) -> Dict[str, Setting]:
    """Flat key=value lines; '#' starts a comment, later assignments win"""
    settings: Dict[str, Setting] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        setting = parse_assignment(line, source, number)
        settings[setting.key] = setting
    return settings


def parse_overrides(overrides: Sequence[str]) -> Dict[str, Setting]:
    settings: Dict[str, Setting] = {}
    for position, text in enumerate(overrides, start=1):
        setting = parse_assignment(text, '--set', position)
        settings[setting.key] = setting
    return settings


def _resolve_path(name_or_path: str, presets_dir: str) -> Tuple[str, str]:
    preset_path = os.path.join(presets_dir, name_or_path + PRESET_SUFFIX)
    if os.path.sep not in name_or_path and os.path.isfile(preset_path):
        return name_or_path, preset_path
    if os.path.isfile(name_or_path):
        stem = os.path.splitext(os.path.basename(name_or_path))[0]
        return stem, name_or_path
    available = available_presets(presets_dir)
    raise UnknownPreset(f"Scenario '{name_or_path}' is not a preset or a file. Available presets: {available}")


def read_settings(name_or_path: str, presets_dir: Optional[str] = None,
                  _chain: Tuple[str, ...] = ()) -> Tuple[str, Dict[str, Setting]]:
    """Settings of a preset or file, with its optional 'preset=' parent merged underneath"""
    presets_dir = presets_dir or DEFAULT_PRESETS_DIR
    name, path = _resolve_path(name_or_path, presets_dir)
    if path in _chain:
        raise ScenarioParseError(f"preset cycle through {list(_chain)}", path)
    with open(path, 'r', encoding='utf-8') as handle:
        settings = parse_settings(handle.read(), path)

    parent = settings.pop('preset', None)
    if parent is None:
        return name, settings
    _, merged = read_settings(parent.value, presets_dir, _chain + (path,))
    merged.update(settings)
    return name, merged


def _invalid(e: ValidationError, origins: Dict[str, Setting], section: str) -> ScenarioParseError:
    error = e.errors()[0]
    field_name = str(error['loc'][0]) if error.get('loc') else ''
    if field_name == 'dark_prob_per_gate' and len(error['loc']) > 1:
        field_name = f"dark_d{error['loc'][1]}"
    setting = origins.get(field_name)
    if setting is None:
        return ScenarioParseError(f"invalid {section} configuration: {error['msg']}", 'scenario')
    return ScenarioParseError(f"invalid value '{setting.value}': {error['msg']}",
                              setting.source, setting.line, setting.key)


def build_bundle(name: str, settings: Dict[str, Setting]) -> ScenarioBundle:
    """Validate flat settings into a ScenarioBundle; unset keys keep their model defaults"""
    values: Dict[str, Dict[str, object]] = {section: {} for section in SECTIONS}
    origins: Dict[str, Dict[str, Setting]] = {section: {} for section in SECTIONS}
    darks: Optional[List[str]] = None

    for key, setting in settings.items():
        if key not in KEYS:
            raise ScenarioParseError("unknown key", setting.source, setting.line, key)
        section, field_name = KEYS[key]
        if key.startswith('dark_d'):
            if darks is None:
                darks = [str(value) for value in DetectorConfig().dark_prob_per_gate]
            darks[int(key[-1])] = setting.value
            origins[section][key] = setting
            continue
        values[section][field_name] = CONVERTERS.get(key, str)(setting.value)
        origins[section][field_name] = setting
    if darks is not None:
        values['detector']['dark_prob_per_gate'] = tuple(darks)

    sections: Dict[str, BaseModel] = {}
    for section, model in SECTIONS.items():
        try:
            sections[section] = model(**values[section])
        except ValidationError as e:
            raise _invalid(e, origins[section], section)
    try:
        return ScenarioBundle(name=name, **sections)
    except ValidationError as e:
        raise ScenarioParseError(f"invalid scenario: {e.errors()[0]['msg']}", name)


def load_scenario(name_or_path: str, overrides: Sequence[str] = (),
                  presets_dir: Optional[str] = None) -> ScenarioBundle:
    """Resolve a preset name or key=value file plus --set overrides into a validated bundle"""
    name, settings = read_settings(name_or_path, presets_dir)
    settings.update(parse_overrides(overrides))
    bundle = build_bundle(name, settings)
    logger.info(f"Loaded scenario '{name}': {bundle.fiber.length_km:g} km, "
                f"interval {bundle.fiber.control_interval_s:g} s, thresholds "
                f"({bundle.thresholds.t1}, {bundle.thresholds.t2}, {bundle.thresholds.t3})")
    return bundle
