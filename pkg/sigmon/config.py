"""Run configuration: one INI document layered over default_config()."""
import configparser
import dataclasses
import hashlib
import logging
import pathlib
import typing
from dataclasses import dataclass
from typing import Any, Dict, Optional, Tuple, Type

from sigmon.base import ConfigurationError
from sigmon.geophys import AmplitudeModel, GeoModel, PhaseAmplitude, PhaseVelocity, VelocityModel
from sigmon.gp import GPConfig
from sigmon.posterior import ChainConfig
from sigmon.scenario import SynthConfig
from sigmon.signalmodel import SignalConfig
from sigmon.training import TrainingConfig
from sigmon.worldmodel import Gating, PriorConfig


_LOG = logging.getLogger('sigmon.config')


@dataclass(frozen=True)
class PathsConfig:
    stations: str = 'stations.csv'
    waveforms: str = 'waveforms'
    training_bulletin: str = 'training.csv'
    truth_bulletin: str = 'truth.csv'
    model: str = 'model.sigmon'
    bulletin: str = 'bulletin.csv'
    metrics: str = 'metrics.csv'
    plots: str = 'plots'
    trace: Optional[str] = None

    def path(self, name: str) -> pathlib.Path:
        return pathlib.Path(getattr(self, name))


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    jobs: int = 1
    band_label: str = 'broadband'

    def validate(self) -> None:
        if self.seed < 0 or self.jobs < 1:
            raise ConfigurationError(f"run: seed must be >= 0 and jobs >= 1, got {self.seed}, {self.jobs}")


@dataclass(frozen=True)
class BlockConfig:
    n_chains: int = 3
    block_s: float = 7200.0

    def validate(self) -> None:
        if self.n_chains < 1 or not self.block_s > 0:
            raise ConfigurationError("inference: n_chains must be >= 1 and block_s positive")


@dataclass(frozen=True)
class EvalConfig:
    distance_deg: float = 2.0
    time_s: float = 50.0
    de_novo_radius_km: float = 50.0
    target_precision: float = 0.8
    histogram_bin_km: float = 10.0
    mb_edges: Tuple[float, ...] = (2.0, 3.0, 4.0, 5.0, 8.0)

    def validate(self) -> None:
        if not (self.distance_deg > 0 and self.time_s > 0 and self.histogram_bin_km > 0):
            raise ConfigurationError("eval: gates and bin widths must be positive")
        if not 0.0 <= self.target_precision <= 1.0:
            raise ConfigurationError(f"eval: target_precision must lie in [0, 1], got {self.target_precision}")
        if len(self.mb_edges) < 2 or list(self.mb_edges) != sorted(self.mb_edges):
            raise ConfigurationError("eval: mb_edges must be at least two increasing values")

    @property
    def gating(self) -> Gating:
        return Gating(self.distance_deg, self.time_s)


# section -> dataclass read from it, and fields that are not configurable there
SECTIONS: Dict[str, Tuple[type, Tuple[str, ...]]] = {
    'paths': (PathsConfig, ()),
    'run': (RunConfig, ()),
    'prior': (PriorConfig, ()),
    'signal': (SignalConfig, ()),
    'gp': (GPConfig, ('defaults', 'intercepts', 'weight_variances')),
    'training': (TrainingConfig, ()),
    'inference': (ChainConfig, ('seed', 'k_max')),
    'synth': (SynthConfig, ()),
    'eval': (EvalConfig, ()),
}

PHASE_SECTIONS = {'velocity': PhaseVelocity, 'amplitude': PhaseAmplitude}


def _format(value: Any) -> str:
    if value is None:
        return 'none'
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, (tuple, list)):
        return ', '.join(_format(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _unwrap_optional(hint) -> Tuple[Any, bool]:
    if typing.get_origin(hint) is typing.Union:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if len(args) == 1:
            return args[0], True
    return hint, False


def _parse(text: str, hint) -> Any:
    hint, optional = _unwrap_optional(hint)
    text = text.strip()
    if optional and text.lower() in ('', 'none'):
        return None
    if hint is bool:
        lowered = text.lower()
        if lowered in configparser.ConfigParser.BOOLEAN_STATES:
            return configparser.ConfigParser.BOOLEAN_STATES[lowered]
        raise ValueError(f"not a boolean: {text!r}")
    if hint in (int, float, str):
        return hint(text)
    if typing.get_origin(hint) is tuple:
        args = typing.get_args(hint)
        items = [t for t in (p.strip() for p in text.split(',')) if t]
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_parse(t, args[0]) for t in items)
        if len(items) != len(args):
            raise ValueError(f"expected {len(args)} comma-separated values, got {len(items)}")
        return tuple(_parse(t, a) for t, a in zip(items, args))
    raise ValueError(f"unsupported setting type {hint}")


def _configurable(cls: type, skip: Tuple[str, ...]):
    return [f for f in dataclasses.fields(cls) if f.init and f.name not in skip and not f.name.startswith('_')]


def default_config() -> configparser.ConfigParser:
    ret = configparser.ConfigParser()

    for section, (cls, skip) in SECTIONS.items():
        ret.add_section(section)
        default = cls()
        for f in _configurable(cls, skip):
            ret.set(section, f.name, _format(getattr(default, f.name)))

    ret.set('inference', 'n_chains', str(BlockConfig.n_chains))
    ret.set('inference', 'block_s', repr(BlockConfig.block_s))

    geo = GeoModel()
    ret.add_section('phases')
    ret.set('phases', 'names', ', '.join(geo.phases))
    for phase in geo.phases:
        for prefix, model in (('velocity', geo.velocity.phases[phase]), ('amplitude', geo.amplitude.phases[phase])):
            name = f"{prefix}.{phase}"
            ret.add_section(name)
            for f in dataclasses.fields(model):
                ret.set(name, f.name, _format(getattr(model, f.name)))

    return ret


def _check_known(conf: configparser.ConfigParser) -> None:
    for section in conf.sections():
        prefix = section.split('.', 1)[0]
        if section in SECTIONS:
            cls, skip = SECTIONS[section]
            known = {f.name for f in _configurable(cls, skip)}
            if section == 'inference':
                known |= {f.name for f in dataclasses.fields(BlockConfig)}
        elif section == 'phases':
            known = {'names'}
        elif prefix in PHASE_SECTIONS and '.' in section:
            known = {f.name for f in dataclasses.fields(PHASE_SECTIONS[prefix])}
        else:
            raise ConfigurationError(f"unknown section [{section}]")
        for key in conf.options(section):
            if key not in known:
                raise ConfigurationError(f"[{section}] {key}: unknown setting")


def load_config(path: Optional[pathlib.Path] = None, seed: Optional[int] = None,
                jobs: Optional[int] = None) -> configparser.ConfigParser:
    """Defaults, then the file at path, then the command-line seed/jobs overrides."""
    conf = default_config()
    if path is not None:
        path = pathlib.Path(path)
        if not path.is_file():
            raise ConfigurationError(f"Configuration file {path} not found")
        try:
            conf.read([str(path)])
        except configparser.Error as exc:
            raise ConfigurationError(f"{path}: {exc}")
        _LOG.debug(f"read configuration from {path}")
    _check_known(conf)
    if seed is not None:
        conf.set('run', 'seed', str(seed))
    if jobs is not None:
        conf.set('run', 'jobs', str(jobs))
    return conf


def config_hash(conf: configparser.ConfigParser) -> str:
    """SHA-1 over every section but [paths], sections and keys sorted."""
    lines = []
    for section in sorted(s for s in conf.sections() if s != 'paths'):
        for key in sorted(conf.options(section)):
            lines.append(f"{section}.{key}={conf.get(section, key).strip()}")
    return hashlib.sha1('\n'.join(lines).encode('utf-8')).hexdigest()


def read_section(conf: configparser.ConfigParser, section: str, cls: Type, skip: Tuple[str, ...] = (),
                 **extra) -> Any:
    hints = typing.get_type_hints(cls)
    values = dict(extra)
    for f in _configurable(cls, skip):
        if not conf.has_option(section, f.name):
            continue
        raw = conf.get(section, f.name)
        try:
            values[f.name] = _parse(raw, hints[f.name])
        except ValueError as exc:
            raise ConfigurationError(f"[{section}] {f.name}: cannot parse {raw!r} ({exc})")
    try:
        obj = cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"[{section}]: {exc}")
    validate = getattr(obj, 'validate', None)
    if callable(validate):
        validate()
    return obj


def paths_config(conf: configparser.ConfigParser) -> PathsConfig:
    return read_section(conf, 'paths', PathsConfig)


def run_config(conf: configparser.ConfigParser) -> RunConfig:
    return read_section(conf, 'run', RunConfig)


def prior_config(conf: configparser.ConfigParser) -> PriorConfig:
    return read_section(conf, 'prior', PriorConfig)


def signal_config(conf: configparser.ConfigParser) -> SignalConfig:
    cfg = read_section(conf, 'signal', SignalConfig)
    if cfg.window_len < 1 or cfg.k_max < 1 or cfg.ar_order < 0:
        raise ConfigurationError("[signal]: window_s * rate_hz, k_max must be >= 1 and ar_order >= 0")
    return cfg


def gp_config(conf: configparser.ConfigParser) -> GPConfig:
    return read_section(conf, 'gp', GPConfig, SECTIONS['gp'][1])


def training_config(conf: configparser.ConfigParser) -> TrainingConfig:
    return read_section(conf, 'training', TrainingConfig)


def chain_config(conf: configparser.ConfigParser) -> ChainConfig:
    run = run_config(conf)
    sig = signal_config(conf)
    return read_section(conf, 'inference', ChainConfig, SECTIONS['inference'][1], seed=run.seed, k_max=sig.k_max)


def block_config(conf: configparser.ConfigParser) -> BlockConfig:
    return read_section(conf, 'inference', BlockConfig)


def synth_config(conf: configparser.ConfigParser) -> SynthConfig:
    return read_section(conf, 'synth', SynthConfig)


def eval_config(conf: configparser.ConfigParser) -> EvalConfig:
    return read_section(conf, 'eval', EvalConfig)


def geo_model(conf: configparser.ConfigParser) -> GeoModel:
    names = [p.strip() for p in conf.get('phases', 'names', fallback='').split(',') if p.strip()]
    if not names:
        raise ConfigurationError("[phases] names: at least one phase is required")
    velocity, amplitude = {}, {}
    for phase in names:
        for prefix, target in (('velocity', velocity), ('amplitude', amplitude)):
            section = f"{prefix}.{phase}"
            if not conf.has_section(section):
                raise ConfigurationError(f"[{section}] missing for configured phase {phase}")
            target[phase] = read_section(conf, section, PHASE_SECTIONS[prefix])
    geo = GeoModel(VelocityModel(velocity), AmplitudeModel(amplitude))
    geo.velocity.validate()
    return geo
