"""Pipeline configuration: one human-readable INI file drives the whole
experiment grid. Desk-scale defaults are explicit; full-scale reference
values appear as comments next to the knobs they correspond to."""

from __future__ import annotations

import configparser
import dataclasses
import io

from .errors import ConfigurationError
from .synthgen import CONDITIONS, CorpusSpec

SOURCES = ("gmm", "oracle", "tdnn")
DURATIONS = ("full", "short")


@dataclasses.dataclass
class FrontendConfig:
    sample_rate: int = 8000
    speaker_coeffs: int = 20
    speaker_mels: int = 23
    asr_coeffs: int = 40
    asr_mels: int = 40
    frame_len: float = 0.025
    frame_shift: float = 0.01
    pre_emphasis: float = 0.97
    delta_context: int = 2
    speaker_cmn_window: float = 0.0  # seconds; 0 disables
    asr_cmn_window: float = 0.0
    vad_offset_db: float = -3.0


@dataclasses.dataclass
class TruncateConfig:
    skip_active: float = 2.5
    keep_active: float = 7.5


@dataclasses.dataclass
class UbmConfig:
    n_components: int = 64
    n_iter: int = 20
    seed: int = 7
    max_frames: int = 200000


@dataclasses.dataclass
class TdnnConfig:
    splices: str = "-2,-1,0,1,2;-1,0,1;-2,0,2;0"
    hidden_width: int = 80
    group_size: int = 8
    learning_rate: float = 0.01
    batch_frames: int = 128
    n_epochs: int = 2
    seed: int = 7


@dataclasses.dataclass
class TvConfig:
    rank: int = 20
    n_iter: int = 20
    seed: int = 7
    update_sigma: bool = True


@dataclasses.dataclass
class PldaConfig:
    n_iter: int = 20
    method: str = "em"
    seed: int = 7


@dataclasses.dataclass
class TrialsConfig:
    n_target: int = 200
    n_nontarget: int = 2000
    seed: int = 7


@dataclasses.dataclass
class RunConfig:
    sources: tuple = SOURCES
    conditions: tuple = CONDITIONS
    plda_durations: tuple = DURATIONS
    dev_fraction: float = 0.6
    workers: int = 1


@dataclasses.dataclass
class PipelineConfig:
    corpus: CorpusSpec = dataclasses.field(default_factory=CorpusSpec)
    frontend: FrontendConfig = dataclasses.field(default_factory=FrontendConfig)
    truncate: TruncateConfig = dataclasses.field(default_factory=TruncateConfig)
    ubm: UbmConfig = dataclasses.field(default_factory=UbmConfig)
    tdnn: TdnnConfig = dataclasses.field(default_factory=TdnnConfig)
    tv: TvConfig = dataclasses.field(default_factory=TvConfig)
    plda: PldaConfig = dataclasses.field(default_factory=PldaConfig)
    trials: TrialsConfig = dataclasses.field(default_factory=TrialsConfig)
    run: RunConfig = dataclasses.field(default_factory=RunConfig)

    def validate(self) -> None:
        self.corpus.validate()
        for source in self.run.sources:
            if source not in SOURCES:
                raise ConfigurationError(f"unknown alignment source {source!r}")
        for condition in self.run.conditions:
            if condition not in CONDITIONS:
                raise ConfigurationError(f"unknown condition {condition!r}")
        for duration in self.run.plda_durations:
            if duration not in DURATIONS:
                raise ConfigurationError(f"unknown training duration {duration!r}")
        if not 0.0 < self.run.dev_fraction < 1.0:
            raise ConfigurationError("dev fraction must lie strictly between 0 and 1")
        if self.run.workers < 1:
            raise ConfigurationError("worker count must be at least 1")
        # Alignment class counts differ per source; the subspace rank must fit
        # the smallest supervector the grid will build.
        dim = self.corpus.feature_dim
        class_counts = []
        if "gmm" in self.run.sources:
            class_counts.append(self.ubm.n_components)
        if "oracle" in self.run.sources or "tdnn" in self.run.sources:
            class_counts.append(self.corpus.n_classes)
        for n_classes in class_counts:
            if self.tv.rank > n_classes * dim:
                raise ConfigurationError(
                    f"subspace rank {self.tv.rank} exceeds supervector size {n_classes * dim}"
                )
        if self.truncate.skip_active + self.truncate.keep_active >= self.corpus.active_seconds:
            raise ConfigurationError(
                "truncation protocol needs more active speech than sessions contain"
            )


_SECTION_TYPES = {
    "corpus": CorpusSpec,
    "frontend": FrontendConfig,
    "truncate": TruncateConfig,
    "ubm": UbmConfig,
    "tdnn": TdnnConfig,
    "tv": TvConfig,
    "plda": PldaConfig,
    "trials": TrialsConfig,
    "run": RunConfig,
}


def _coerce(raw: str, template):
    if isinstance(template, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"expected a boolean, got {raw!r}")
    if isinstance(template, int):
        return int(raw)
    if isinstance(template, float):
        return float(raw)
    if isinstance(template, tuple):
        return tuple(part.strip() for part in raw.split(",") if part.strip())
    return raw.strip()


def load_config(path) -> PipelineConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    with open(path, "r", encoding="utf-8") as fh:
        parser.read_file(fh)
    config = PipelineConfig()
    for section in parser.sections():
        if section not in _SECTION_TYPES:
            raise ConfigurationError(f"unknown config section [{section}]")
        target = getattr(config, section)
        fields = {f.name: f for f in dataclasses.fields(target)}
        for key, raw in parser.items(section):
            if key not in fields:
                raise ConfigurationError(f"unknown option {key!r} in section [{section}]")
            setattr(target, key, _coerce(raw, getattr(target, key)))
    config.validate()
    return config


DEFAULT_CONFIG_TEXT = """\
# Desk-scale experiment configuration. Comments give the telephone-benchmark
# reference values the desk defaults stand in for.

[corpus]
n_speakers = 100
sessions_per_speaker = 4
active_seconds = 60.0          # "full" condition; short variants are cut below
n_classes = 32                 # synthetic alignment classes (reference nets: 5346)
feature_dim = 12
speaker_dim = 5
seed = 7
unvoiced_fraction = 0.5        # telephone speech runs roughly half unvoiced
mode = features                # waveform exercises the audio frontend end to end

[frontend]
sample_rate = 8000
speaker_coeffs = 20            # speaker stream: 20 cepstra + deltas = 60 dims
speaker_mels = 23
asr_coeffs = 40                # alignment stream: 40 cepstra, no deltas
asr_mels = 40
frame_len = 0.025
frame_shift = 0.01
speaker_cmn_window = 0.0       # reference setup: 3.0 s (off for synthetic corpora)
asr_cmn_window = 0.0           # reference setup: 6.0 s
vad_offset_db = -3.0

[truncate]
skip_active = 2.5              # reference protocol: skip 10 s of active speech
keep_active = 7.5              # reference protocol: keep about 15 s active

[ubm]
n_components = 64              # reference scale: 2048
n_iter = 20
seed = 7
max_frames = 200000

[tdnn]
# Reference six-layer recipes splice {-2..2}, {-2,-1,0,1}, 0, {-3..3},
# {-7..2}, 0; the desk topology below uses four layers.
splices = -2,-1,0,1,2;-1,0,1;-2,0,2;0
hidden_width = 80              # reference scale: 3500-wide p-norm inputs, group 10
group_size = 8
learning_rate = 0.01
batch_frames = 128
n_epochs = 2
seed = 7

[tv]
rank = 20                      # reference scale: 600
n_iter = 20
seed = 7
update_sigma = true

[plda]
n_iter = 20
method = em                    # or: scatter
seed = 7

[trials]
n_target = 200
n_nontarget = 2000
seed = 7

[run]
sources = gmm, oracle, tdnn
conditions = full-full, full-short, short-short
plda_durations = full, short
dev_fraction = 0.6
workers = 1
"""


def write_default_config(path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(DEFAULT_CONFIG_TEXT)


def default_config() -> PipelineConfig:
    config = PipelineConfig()
    config.validate()
    return config
