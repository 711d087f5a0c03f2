"""Run configuration: presets, YAML round-trip, named results-table rows and
mode-combination validation."""

import zlib
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import yaml

from softvad.corpus import CorpusConfig, SplitConfig
from softvad.train import DA_MODES, HyperParams

POOLING_MODES = ("tap", "sap", "hard-energy", "hard-dnn", "hard-truth", "gsoft", "asoft")
HARD_POOLS = ("tap", "sap", "asoft")
PRESETS = ("tiny", "full")


class ConfigError(ValueError):
    """Invalid option or mode combination (CLI exit code 2)."""


@dataclass
class ModelConfig:
    preset: str = "tiny"
    vad_hidden: int = 512
    attention_dim: int = 128
    gsoft_normalize: bool = False


@dataclass
class TrialConfig:
    n_enroll: int = 12
    n_target: int = 12
    n_impostor: int = 12


@dataclass
class SimulationConfig:
    sv: CorpusConfig = field(default_factory=CorpusConfig)
    vad: CorpusConfig = field(default_factory=lambda: CorpusConfig(
        duration_range=[3.0, 10.0],
        splits=[SplitConfig(name="train", n_speakers=100, utts_per_speaker=40,
                            noises=["brown", "hum", "beeps", "babble"], snr_range=None,
                            snr_set=[-5.0, 0.0, 5.0, 10.0, 15.0, 20.0], silence_s=2.0,
                            speaker_prefix="vs")]))
    trials: TrialConfig = field(default_factory=TrialConfig)


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    corpus: str | None = None
    pooling: str = "asoft"
    hard_pool: str = "tap"
    da: str = "none"
    vad_checkpoint: str | None = None
    sv_checkpoint: str | None = None
    lambdas: list[float] = field(default_factory=lambda: [0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 5.0])
    hp: HyperParams = field(default_factory=HyperParams)
    model: ModelConfig = field(default_factory=ModelConfig)
    simulation: SimulationConfig = field(default_factory=SimulationConfig)

    def component_seed(self, name):
        """Per-component seed fanned out from the single top-level seed."""
        return (self.seed * 1_000_003 + zlib.crc32(name.encode())) % (2**31)

    def to_dict(self):
        return asdict(self)

    def dump(self, path):
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


def _tiny_simulation():
    sv = CorpusConfig(duration_range=[2.0, 4.0], splits=[
        SplitConfig(name="train", n_speakers=8, utts_per_speaker=12,
                    noises=["white", "pink", "am_tone"], snr_range=[0.0, 10.0],
                    silence_s=0.0, speaker_prefix="tr"),
        SplitConfig(name="test", n_speakers=6, utts_per_speaker=9,
                    noises=["white", "pink", "am_tone"], snr_range=None,
                    snr_set=[0.0, 5.0, 10.0], silence_s=1.0, speaker_prefix="te"),
    ])
    vad = CorpusConfig(duration_range=[2.0, 4.0], splits=[
        SplitConfig(name="train", n_speakers=6, utts_per_speaker=8,
                    noises=["brown", "hum", "beeps"], snr_range=[5.0, 20.0],
                    silence_s=1.0, speaker_prefix="vs"),
    ])
    return SimulationConfig(sv=sv, vad=vad, trials=TrialConfig(3, 6, 6))


def default_config(preset="tiny") -> RunConfig:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {PRESETS}")
    if preset == "full":
        return RunConfig(model=ModelConfig(preset="full"))
    hp = HyperParams(lr_vad_pretrain=1e-3, vad_batch=256, epochs_vad=10, sv_batch=8,
                     segment_len=50, epochs_sv=30, epochs_adapt=5, lr_s=0.05, lr_v=1e-3)
    return RunConfig(hp=hp, model=ModelConfig(preset="tiny", vad_hidden=128),
                     simulation=_tiny_simulation())


def _merge(obj, updates, where="config"):
    """Recursively apply a plain dict onto a dataclass instance."""
    if not isinstance(updates, dict):
        raise ConfigError(f"{where}: expected a mapping")
    names = {f.name: f for f in fields(obj)}
    for key, value in updates.items():
        if key not in names:
            raise ConfigError(f"{where}: unknown field {key!r}")
        current = getattr(obj, key)
        if is_dataclass(current) and isinstance(value, dict):
            if isinstance(current, CorpusConfig):
                merged = asdict(current)
                merged.update(value)
                try:
                    setattr(obj, key, CorpusConfig.from_dict(merged))
                except TypeError as exc:
                    raise ConfigError(f"{where}.{key}: {exc}") from None
            else:
                _merge(current, value, f"{where}.{key}")
        else:
            setattr(obj, key, value)
    if isinstance(obj, HyperParams):
        try:
            obj.__post_init__()
        except ValueError as exc:
            raise ConfigError(f"{where}: {exc}") from None
    return obj


def load_config(path=None, preset=None, overrides=None) -> RunConfig:
    """Preset defaults, then the YAML file, then flag overrides."""
    data = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        data = yaml.safe_load(p.read_text()) or {}
    preset = preset or data.get("model", {}).get("preset") or "tiny"
    cfg = _merge(default_config(preset), data)
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        *parents, leaf = dotted.split(".")
        target = cfg
        for name in parents:
            target = getattr(target, name)
        _merge(target, {leaf: value}, dotted)
    return cfg


# Named results-table configurations: name -> (da, pooling, hard_pool)
RESULT_ROWS = {
    "tap": ("none", "tap", "tap"),
    "sap": ("none", "sap", "tap"),
    "tap-hard-energy": ("none", "hard-energy", "tap"),
    "tap-hard-dnn": ("none", "hard-dnn", "tap"),
    "sap-hard-dnn": ("none", "hard-dnn", "sap"),
    "tap-gsoft": ("none", "gsoft", "tap"),
    "sap-asoft": ("none", "asoft", "tap"),
    "sap-hard-asoft": ("none", "hard-dnn", "asoft"),
    "jl-asoft": ("jl", "asoft", "tap"),
    "sp-asoft": ("sp", "asoft", "tap"),
    "self-adaptive-gsoft": ("self-adaptive", "gsoft", "tap"),
    "self-adaptive-asoft": ("self-adaptive", "asoft", "tap"),
    "sap-ground-truth": ("none", "hard-truth", "sap"),
}


def sv_pooling(cfg: RunConfig):
    """(pooling inside the speaker model, hard frame-selection source)."""
    if cfg.pooling.startswith("hard-"):
        return cfg.hard_pool, cfg.pooling.split("-", 1)[1]
    return cfg.pooling, "none"


def needs_vad(cfg: RunConfig):
    pool, selection = sv_pooling(cfg)
    return pool in ("gsoft", "asoft") or selection == "dnn"


def table_columns(cfg: RunConfig):
    """(DA, Pooling, VAD type) labels in the layout of the results table."""
    pool, selection = sv_pooling(cfg)
    pooling = "TAP" if pool in ("tap", "gsoft") else "SAP"
    soft = {"gsoft": "G-soft VAD", "asoft": "A-soft VAD"}
    if selection == "energy":
        vad_type = "Hard VAD (energy)"
    elif selection == "truth":
        vad_type = "Ground-truth VAD labels"
    elif selection == "dnn":
        vad_type = "Hard + A-soft VAD" if pool == "asoft" else "Hard VAD (DNN)"
    else:
        vad_type = soft.get(pool, "No")
    if cfg.da != "none":
        prefix = {"sp": "SP-DA", "jl": "JL-DA", "self-adaptive": "Self-adaptive"}[cfg.da]
        vad_type = f"{prefix} + {vad_type}"
    return ("Yes" if cfg.da != "none" else "No"), pooling, vad_type


def validate(cfg: RunConfig, command=None):
    """Return a list of problems; empty when the configuration is usable."""
    errs = []
    if cfg.pooling not in POOLING_MODES:
        errs.append(f"pooling={cfg.pooling!r} is not one of {POOLING_MODES}")
    if cfg.hard_pool not in HARD_POOLS:
        errs.append(f"hard_pool={cfg.hard_pool!r} is not one of {HARD_POOLS}")
    if cfg.da not in DA_MODES:
        errs.append(f"da={cfg.da!r} is not one of {DA_MODES}")
    if cfg.model.preset not in PRESETS:
        errs.append(f"model.preset={cfg.model.preset!r} is not one of {PRESETS}")
    if errs:
        return errs
    pool, selection = sv_pooling(cfg)
    soft = pool in ("gsoft", "asoft") and selection == "none"
    if cfg.da != "none" and not soft:
        errs.append(f"da={cfg.da} conflicts with pooling={cfg.pooling}"
                    + (f" (hard_pool={cfg.hard_pool})" if selection != "none" else "")
                    + ": domain adaptation needs a soft path (gsoft or asoft)")
    if command == "train-sv" and cfg.da != "none":
        errs.append(f"da={cfg.da} conflicts with command train-sv: use 'adapt' for domain adaptation")
    if command in ("adapt", "sweep"):
        if command == "adapt" and cfg.da == "none":
            errs.append("da=none conflicts with command adapt: choose sp, jl or self-adaptive")
        if command == "sweep" and not soft:
            errs.append(f"pooling={cfg.pooling} conflicts with command sweep: needs gsoft or asoft")
        if not cfg.vad_checkpoint:
            errs.append(f"vad_checkpoint is required by command {command} (da={cfg.da})")
    if command in ("train-sv",) and needs_vad(cfg) and not cfg.vad_checkpoint:
        errs.append(f"pooling={cfg.pooling} (hard_pool={cfg.hard_pool}) needs vad_checkpoint")
    if command in ("evaluate", "sweep") and not cfg.sv_checkpoint:
        errs.append(f"sv_checkpoint is required by command {command}")
    if command in ("pretrain-vad", "train-sv", "adapt", "evaluate", "sweep") and not cfg.corpus:
        errs.append(f"corpus is required by command {command}")
    if command == "sweep" and (not cfg.lambdas or any(v < 0 for v in cfg.lambdas)):
        errs.append("lambdas must be a non-empty list of values >= 0")
    return errs
