from typing import Annotated, Any, Iterable, Mapping
from pathlib import Path
import logging
import os

from ._common import T_Mode, T_LossMode, mode_flags, stable_hash
from ._struct import struct, field, replace
from ._constraints import Value, Length
from ._pointers import Pointer
from ._issues import BaseIssue, DeserializeIssue, ExtraFieldIssue, InvariantIssue, OrderIssue
from ._errors import ConfigError, ValidationError
from ._codec import convert, deserialize, serialize, unstructure
from ._corpus import CorpusSpec
from ._model import ModelConfig

__all__ = [
    "TrainConfig",
    "EvalConfig",
    "LabConfig",
    "OUTPUT_ROOT_ENV",
    "default_output_root",
    "apply_overrides",
    "load_config",
    "config_hash",
    "file_digest",
    "run_hash",
    "resolved_model_config",
]

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "NUMLESA_OUTPUT_ROOT"

_SECTIONS = ("corpus", "model", "train", "eval")


@struct
class TrainConfig:
    mode: T_Mode = "lesa_xval"
    loss_mode: T_LossMode = "fixed"
    lr: Annotated[float, Value("gt", 0.0)] = 3e-5
    weight_decay: Annotated[float, Value("ge", 0.0)] = 0.01
    betas: tuple[
        Annotated[float, Value("ge", 0.0), Value("lt", 1.0)],
        Annotated[float, Value("ge", 0.0), Value("lt", 1.0)],
    ] = (0.9, 0.999)
    adam_eps: Annotated[float, Value("gt", 0.0)] = 1e-8
    # warmup as a share of the planned steps unless warmup_epochs is given
    warmup_fraction: Annotated[float, Value("ge", 0.0), Value("lt", 1.0)] = 0.1
    warmup_epochs: Annotated[int, Value("ge", 0)] | None = None
    max_epochs: Annotated[int, Value("ge", 1)] = 30
    patience: Annotated[int, Value("ge", 1)] = 4
    batch_size: Annotated[int, Value("ge", 1)] = 16
    seeds: Annotated[tuple[Annotated[int, Value("ge", 0)], ...], Length("ge", 1)] = tuple(
        range(10)
    )
    class_weighted: bool = False
    mask_rate: Annotated[float, Value("gt", 0.0), Value("lt", 1.0)] = 0.15
    prefinetune: bool = True
    split_seed: Annotated[int, Value("ge", 0)] = 0
    vocab_cap: Annotated[int, Value("ge", 5)] = 4096
    # share of unannotated notes held out for the stage A validation loss
    holdout_fraction: Annotated[float, Value("gt", 0.0), Value("lt", 1.0)] = 0.1

    def _validate_(self, pointer: Pointer) -> list[BaseIssue]:
        issues: list[BaseIssue] = []
        if self.warmup_epochs is not None and self.warmup_epochs >= self.max_epochs:
            issues.append(
                OrderIssue(
                    value=self.warmup_epochs,
                    pointer=pointer / "warmup_epochs",
                    message=f"warmup must end before max_epochs={self.max_epochs}",
                )
            )
        if len(set(self.seeds)) != len(self.seeds):
            issues.append(
                InvariantIssue(
                    value=self.seeds, pointer=pointer / "seeds", message="seeds must be distinct"
                )
            )
        return issues

    def warmup_steps(self, total_steps: int, steps_per_epoch: int) -> int:
        if self.warmup_epochs is not None:
            return min(self.warmup_epochs * steps_per_epoch, total_steps - 1)
        return int(self.warmup_fraction * total_steps)


@struct
class EvalConfig:
    exclude_o: bool = False
    top_k: Annotated[int, Value("ge", 1)] = 5
    probe_text: str = "Patient en détresse respiratoire, gradient VG-VD ad <mask> mmgh."
    # None means the packaged term list
    terms: str | None = None
    batch_size: Annotated[int, Value("ge", 1)] = 32


@struct
class LabConfig:
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


def default_output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def _parse_override(item: str) -> tuple[tuple[str, ...], Any]:
    key, sep, raw = item.partition("=")
    try:
        parts = Pointer.parse(key.strip()).parts
    except ValueError:
        parts = ()
    if not sep or len(parts) < 2 or not all(isinstance(_, str) for _ in parts):
        raise ConfigError(
            [
                InvariantIssue(
                    value=item,
                    pointer=Pointer.root,
                    message="overrides take the form section.field=<json>",
                )
            ]
        )
    try:
        value = deserialize(raw)
    except ValidationError:
        # bare words such as mode=plain need no quotes
        value = raw
    return parts, value


def apply_overrides(data: dict[str, Any], overrides: Iterable[str]) -> dict[str, Any]:
    """Set ``section.field=<json>`` values into raw config data, returning a new dict."""
    data = {key: dict(value) if isinstance(value, dict) else value for key, value in data.items()}
    for item in overrides:
        parts, value = _parse_override(item)
        if parts[0] not in _SECTIONS:
            raise ConfigError(
                [ExtraFieldIssue(value=item, pointer=Pointer.root, extra=parts[0])]
            )
        node = data
        for part in parts[:-1]:
            child = node.get(part)
            if not isinstance(child, dict):
                child = {}
            else:
                child = dict(child)
            node[part] = child
            node = child
        node[parts[-1]] = value
    return data


def _read_object(path: str | Path) -> dict[str, Any]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise ConfigError(
            [DeserializeIssue(value=str(path), pointer=Pointer.root, message=str(exc))],
            f"Could not read config file {path}",
        ) from exc
    try:
        data = deserialize(raw)
    except ValidationError as exc:
        raise ConfigError(exc.issues, f"Could not read config file {path}") from exc
    if not isinstance(data, dict):
        raise ConfigError(
            [DeserializeIssue(value=data, pointer=Pointer.root, message="expected an object")]
        )
    return data


def load_config(
    path: str | Path | None = None,
    overrides: Iterable[str] = (),
    corpus_spec: str | Path | None = None,
) -> LabConfig:
    """Read a config file (or the defaults), apply overrides and validate the result.

    ``corpus_spec`` names a file holding only the corpus section; it replaces
    that section of the config file before the overrides apply.
    """
    data: dict[str, Any] = {} if path is None else _read_object(path)
    if corpus_spec is not None:
        data = {**data, "corpus": _read_object(corpus_spec)}
    data = apply_overrides(data, overrides)
    config = convert(data, LabConfig, error_class=ConfigError)
    logger.debug("loaded config %s", config_hash(config)[:12])
    return config


def config_hash(config: LabConfig) -> str:
    """sha256 of the canonical json form of the config."""
    return stable_hash(serialize(unstructure(config)))


def resolved_model_config(config: LabConfig, vocab_size: int | None = None) -> ModelConfig:
    """The model section with the training mode's flags and the vocabulary size applied."""
    lesa, xval = mode_flags(config.train.mode)
    model = replace(config.model, lesa_enabled=lesa, xval_enabled=xval)
    if vocab_size is not None:
        model = replace(model, vocab_size=vocab_size)
    return model


def file_digest(path: str | Path) -> str:
    return stable_hash(Path(path).read_bytes())


def run_hash(config: LabConfig | None, inputs: Mapping[str, Any]) -> str:
    """sha256 over the config plus the seeds and input file digests of a run."""
    data = None if config is None else unstructure(config)
    return stable_hash(serialize({"config": data, "inputs": dict(inputs)}))
