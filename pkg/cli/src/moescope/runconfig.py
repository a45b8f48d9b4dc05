"""
Run configuration files for `moescope train`.

A run configuration is a JSON document with the sections

    model         ModelConfig fields (hidden, ffn_hidden, num_heads, ...)
    router        RouterConfig fields (num_experts, top_k, ...)
    train         TrainConfig fields (batch_size, steps, peak_lr, ...)
    mixture       {"domains": {tag: ratio},
                   "denoisers": "ul2" | "causal_lm" | [DenoiserSpec fields],
                   "switch_points": [{"step": n, "domains": ...,
                                      "denoisers": ...}]}
    corpora       {tag: corpus file path}
    eval_corpora  {tag: corpus file path}   (optional)

Relative paths are resolved against the directory of the configuration
file. Unknown keys are rejected everywhere. The loss weights of the train
section are also the weights the model reports evaluation losses with.
"""

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .corpus import read_corpus
from .errors import ConfigError
from .model import ModelConfig
from .moe import RouterConfig
from .objectives import (
    DenoiserSpec,
    MixtureConfig,
    causal_lm_denoisers,
    ul2_denoisers,
)
from .training import TrainConfig

log = logging.getLogger(__name__)

SECTIONS = {"model", "router", "train", "mixture", "corpora", "eval_corpora"}
REQUIRED_SECTIONS = {"model", "router", "mixture", "corpora"}

NAMED_DENOISER_MIXES = {
    "ul2": ul2_denoisers,
    "causal_lm": causal_lm_denoisers,
}

# ModelConfig fields that come from other sections
_DERIVED_MODEL_FIELDS = {"router", "loss_weights"}


def _check_keys(values, allowed, where):
    if not isinstance(values, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = set(values) - set(allowed)
    if unknown:
        raise ConfigError(
            f"unknown key(s) in {where}: {', '.join(sorted(unknown))}"
        )


def _check_fields(cls, values, where, exclude=()):
    allowed = [f.name for f in fields(cls) if f.name not in exclude]
    _check_keys(values, allowed, where)
    return values


def _denoisers(value, where):
    if isinstance(value, str):
        if value not in NAMED_DENOISER_MIXES:
            raise ConfigError(
                f"{where}: unknown denoiser mix {value!r}; expected one of"
                f" {', '.join(NAMED_DENOISER_MIXES)} or a list"
            )
        return NAMED_DENOISER_MIXES[value]()
    if not isinstance(value, list):
        raise ConfigError(f"{where} must be a name or a list")
    specs = []
    for index, spec in enumerate(value):
        _check_fields(DenoiserSpec, spec, f"{where}[{index}]")
        specs.append(DenoiserSpec(**spec))
    return specs


def _mixture(values, where, allow_switch_points=True):
    allowed = ["domains", "denoisers"]
    if allow_switch_points:
        allowed.append("switch_points")
    else:
        allowed.append("step")
    _check_keys(values, allowed, where)
    if "domains" not in values:
        raise ConfigError(f"{where} needs a domains entry")
    domains = values["domains"]
    if not isinstance(domains, dict):
        raise ConfigError(f"{where}.domains must map tags to ratios")
    denoisers = _denoisers(
        values.get("denoisers", "ul2"), f"{where}.denoisers"
    )

    switch_points = []
    for index, point in enumerate(values.get("switch_points", [])):
        point_where = f"{where}.switch_points[{index}]"
        if not isinstance(point, dict) or not isinstance(
            point.get("step"), int
        ):
            raise ConfigError(f"{point_where} needs an integer step")
        switch_points.append(
            (
                point["step"],
                _mixture(point, point_where, allow_switch_points=False),
            )
        )
    return MixtureConfig(
        domains=list(domains.items()),
        denoisers=denoisers,
        switch_points=switch_points,
    )


def _mixture_to_dict(mixture):
    values = {
        "domains": dict(mixture.domains),
        "denoisers": [asdict(spec) for spec in mixture.denoisers],
    }
    if mixture.switch_points:
        values["switch_points"] = [
            dict(step=step, **_mixture_to_dict(phase))
            for step, phase in mixture.switch_points
        ]
    return values


def _paths(values, where, base_dir):
    if not isinstance(values, dict):
        raise ConfigError(f"{where} must be a JSON object")
    resolved = {}
    for tag, path in values.items():
        path = Path(path)
        if not path.is_absolute():
            path = Path(base_dir) / path
        if not path.is_file():
            raise ConfigError(f"{where}.{tag}: no such file {path}")
        resolved[tag] = str(path)
    return resolved


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    mixture: MixtureConfig
    corpora: dict  # domain tag -> corpus file path
    eval_corpora: dict = field(default_factory=dict)

    def __post_init__(self):
        missing = self.mixture.domain_tags() - set(self.corpora)
        if missing:
            raise ConfigError(
                "the mixture samples domain(s) without a corpus:"
                f" {', '.join(sorted(missing))}"
            )
        if self.train.seq_len > self.model.max_seq_len:
            raise ConfigError(
                f"train.seq_len={self.train.seq_len} exceeds"
                f" model.max_seq_len={self.model.max_seq_len}"
            )

    @classmethod
    def from_dict(cls, values, base_dir="."):
        """
        Builds a RunConfig from the parsed JSON document.

        :param base_dir: directory relative corpus paths are resolved in
        :raises ConfigError: on unknown keys, invalid values or missing files

        """
        _check_keys(values, SECTIONS, "run config")
        absent = REQUIRED_SECTIONS - set(values)
        if absent:
            raise ConfigError(
                f"run config lacks section(s): {', '.join(sorted(absent))}"
            )
        train_values = _check_fields(
            TrainConfig, values.get("train", {}), "train"
        )
        model_values = _check_fields(
            ModelConfig, values["model"], "model", _DERIVED_MODEL_FIELDS
        )
        router_values = _check_fields(
            RouterConfig, values["router"], "router"
        )
        try:
            train = TrainConfig(**train_values)
            model = ModelConfig(
                router=RouterConfig(**router_values),
                loss_weights=train.loss_weights(),
                **model_values,
            )
        except TypeError as err:
            raise ConfigError(f"invalid run config: {err}") from err
        return cls(
            model=model,
            train=train,
            mixture=_mixture(values["mixture"], "mixture"),
            corpora=_paths(values["corpora"], "corpora", base_dir),
            eval_corpora=_paths(
                values.get("eval_corpora", {}), "eval_corpora", base_dir
            ),
        )

    @classmethod
    def load(cls, path):
        try:
            with open(path, encoding="utf-8") as handle:
                values = json.load(handle)
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: not valid JSON ({err})") from err
        except OSError as err:
            raise ConfigError(f"cannot read run config {path}: {err}") from err
        log.debug("loaded run config %s", path)
        return cls.from_dict(values, base_dir=Path(path).parent)

    def to_dict(self):
        """The fully resolved configuration, every default filled in"""
        model = self.model.to_dict()
        router = model.pop("router")
        model.pop("loss_weights")
        return {
            "model": model,
            "router": router,
            "train": asdict(self.train),
            "mixture": _mixture_to_dict(self.mixture),
            "corpora": dict(self.corpora),
            "eval_corpora": dict(self.eval_corpora),
        }

    def write_effective(self, path):
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(self.to_dict(), handle, indent=2, sort_keys=True)
            handle.write("\n")
        log.info("A file was saved at %s", path)

    def load_corpora(self):
        """dict tag -> Corpus for the training corpora"""
        return {tag: read_corpus(path) for tag, path in self.corpora.items()}

    def load_eval_corpora(self):
        return {
            tag: read_corpus(path) for tag, path in self.eval_corpora.items()
        }

