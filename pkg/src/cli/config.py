"""
Run configuration: one JSON document, strictly parsed and validated before any compute
"""
import dataclasses
import json
import logging
from dataclasses import dataclass, field

from src.data.sequences import DEFAULT_CELLS, CellRegistry
from src.denoiser.config import DiTConfig
from src.diffusion.sampler import SamplerConfig
from src.errors import ConfigError, ContractError
from src.evaluation.alignment import AlignmentParams
from src.finetune.ddpo import DdpoConfig
from src.reward.context import ContextMode

logger = logging.getLogger(__name__)


@dataclass
class DataConfig:
    """
    train_path str: TSV (sequence, cell); None generates a planted-motif corpus
    test_path str: held-out TSV; None generates a second corpus with another seed
    cells list[str]: cell registry in id order
    synthetic_per_cell int: synthetic sequences per cell
    val_fraction float: stratified validation share
    motif_file str: PWM file; None uses the bundled set
    cell_motifs dict[str, str]: motif id planted for / scored against each cell
    """
    train_path: str = None
    test_path: str = None
    cells: list = field(default_factory=lambda: list(DEFAULT_CELLS))
    synthetic_per_cell: int = 500
    val_fraction: float = 0.1
    motif_file: str = None
    cell_motifs: dict = field(default_factory=lambda: {"K562": "GATA1", "HepG2": "HNF4A",
                                                       "GM12878": "SPI1", "hESCT0": "POU5F1"})

    def validate(self):
        registry = CellRegistry(self.cells)
        if self.synthetic_per_cell < 1:
            raise ConfigError(f"data.synthetic_per_cell must be >= 1, got: {self.synthetic_per_cell}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError(f"data.val_fraction must be in (0, 1), got: {self.val_fraction}")
        for name in self.cell_motifs:
            registry.lookup(name)
        missing = [name for name in registry.names if name not in self.cell_motifs]
        if missing:
            raise ConfigError(f"data.cell_motifs has no motif for: {', '.join(missing)}")
        return self

    @property
    def registry(self) -> CellRegistry:
        return CellRegistry(self.cells)


@dataclass
class ScheduleConfig:
    timesteps: int = 100
    beta_start: float = 3e-4
    beta_end: float = 0.25

    def validate(self):
        if self.timesteps < 2:
            raise ConfigError(f"schedule.timesteps must be >= 2, got: {self.timesteps}")
        if not 0.0 < self.beta_start <= self.beta_end < 1.0:
            raise ConfigError(f"schedule needs 0 < beta_start <= beta_end < 1, got: {self.beta_start}, {self.beta_end}")
        return self


@dataclass
class TrainConfig:
    """
    epochs int: upper bound on epochs
    patience int: epochs without validation improvement before stopping
    rc_augment float: probability of reverse-complementing a training example
    dtype str: "float32" for training, "float64" for gradient checks
    """
    epochs: int = 200
    batch_size: int = 64
    lr: float = 2e-4
    patience: int = 10
    grad_clip: float = 1.0
    rc_augment: float = 0.5
    dtype: str = "float32"

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError(f"train.epochs and train.batch_size must be >= 1, got: {self.epochs}, {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"train.lr must be > 0, got: {self.lr}")
        if self.patience < 1:
            raise ConfigError(f"train.patience must be >= 1, got: {self.patience}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError(f"train.grad_clip must be > 0 or null, got: {self.grad_clip}")
        if not 0.0 <= self.rc_augment <= 1.0:
            raise ConfigError(f"train.rc_augment must be in [0, 1], got: {self.rc_augment}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"train.dtype must be float32 or float64, got: {self.dtype}")
        return self


@dataclass
class RewardConfig:
    """
    kind str: "toy" (motif log-odds) or "external" (socket oracle at `endpoint`)
    mode str: "ex_situ" (filler flanks of width `flank`) or "in_situ" (`locus_path`)
    locus_path str: plain-text locus whose window at `insert_offset` is replaced
    """
    kind: str = "toy"
    endpoint: str = None
    timeout: float = 30.0
    retries: int = 2
    mode: str = "ex_situ"
    flank: int = 0
    locus_path: str = None
    insert_offset: int = 0

    def validate(self):
        if self.kind not in ("toy", "external"):
            raise ConfigError(f"reward.kind must be toy or external, got: {self.kind}")
        if self.kind == "external" and not self.endpoint:
            raise ConfigError("reward.kind=external needs reward.endpoint (host:port)")
        try:
            mode = ContextMode(self.mode)
        except ValueError:
            raise ConfigError(f"reward.mode must be in_situ or ex_situ, got: {self.mode}")
        if mode == ContextMode.IN_SITU and not self.locus_path:
            raise ConfigError("reward.mode=in_situ needs reward.locus_path")
        if self.flank < 0 or self.insert_offset < 0 or self.retries < 0:
            raise ConfigError("reward.flank, reward.insert_offset and reward.retries must be >= 0")
        return self


@dataclass
class EvalConfig:
    """
    n_per_cell int: samples per cell for `sample`/`evaluate`
    generated str: TSV to evaluate; None samples from the checkpoint
    baseline str: TSV whose median reward is the comparison line
    null_replicates int: Monte Carlo replicates of calibrate-null
    """
    n_per_cell: int = 250
    k: int = 11
    min_len: int = 20
    min_identity: float = 0.9
    threshold_quantile: float = 0.999
    generated: str = None
    baseline: str = None
    null_replicates: int = 20

    def validate(self):
        try:
            self.alignment.validate()
        except ContractError as e:
            raise ConfigError(f"evaluate: {e}")
        if self.n_per_cell < 0:
            raise ConfigError(f"evaluate.n_per_cell must be >= 0, got: {self.n_per_cell}")
        if not 0.0 < self.threshold_quantile < 1.0:
            raise ConfigError(f"evaluate.threshold_quantile must be in (0, 1), got: {self.threshold_quantile}")
        if self.null_replicates < 1:
            raise ConfigError(f"evaluate.null_replicates must be >= 1, got: {self.null_replicates}")
        return self

    @property
    def alignment(self) -> AlignmentParams:
        return AlignmentParams(self.k, self.min_len, self.min_identity)


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: DiTConfig = field(default_factory=DiTConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ddpo: DdpoConfig = field(default_factory=DdpoConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    evaluate: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    output_dir: str = "runs"

    def validate(self) -> "RunConfig":
        """Check every section; raises ConfigError naming the first violation."""
        for section in (self.data, self.schedule, self.train, self.reward, self.evaluate):
            section.validate()
        self.model.validate()
        self.sampler.validate()
        self.ddpo.validate()
        if self.model.num_cells != len(self.data.cells):
            raise ConfigError(f"model.num_cells ({self.model.num_cells}) must equal the "
                              f"number of data.cells ({len(self.data.cells)})")
        if self.ddpo.guidance != self.sampler.guidance_scale:
            logger.info("DDPO rollouts use w=%g, sampling uses w=%g", self.ddpo.guidance, self.sampler.guidance_scale)
        return self

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["model"] = self.model.to_dict()
        return out


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be an object, got: {type(data).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError("unknown config keys: " + ", ".join(f"{path}.{k}" if path else k for k in unknown))
    kwargs = {}
    for name, value in data.items():
        nested = known[name].default_factory if known[name].default_factory is not dataclasses.MISSING else None
        if nested is not None and dataclasses.is_dataclass(nested):
            kwargs[name] = _build(nested, value, f"{path}.{name}" if path else name)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path or 'config'}: {e}")


def parse_config(data: dict) -> RunConfig:
    """RunConfig from a decoded JSON object; missing keys keep the dataclass defaults."""
    return _build(RunConfig, data, "").validate()


def load_config(path: str) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            data = json.load(handle)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}")
    config = parse_config(data)
    logger.debug("Loaded config from %s", path)
    return config
