"""Experiment configuration: JSON parsing with path-qualified validation."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Any

from fova.data import FederationConfig
from fova.errors import ConfigurationError
from fova.learner import HyperParams, VoteMode
from fova.mdp import MdpSpec, make_gridworld, make_random_mdp

CONFIG_VERSION = 1
ALGO_TAGS = {"fova": "FOVA", "cql-fl": "CQL_FL", "fova-no-vote": "FOVA_NO_VOTE", "fova-no-awr": "FOVA_NO_AWR"}
TAG_OF_ALGO = {v: k for k, v in ALGO_TAGS.items()}

# JSON key -> HyperParams attribute (``lambda`` is reserved in Python).
HYPER_KEYS = {f.name: f.name for f in dataclasses.fields(HyperParams)}
HYPER_KEYS["lambda"] = HYPER_KEYS.pop("lam")


class ConfigError(ConfigurationError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True)
class MdpBlock:
    kind: str = "gridworld"
    width: int = 4
    height: int = 4
    slip: float = 0.1
    goal_reward: float = 10.0
    n_states: int = 5
    n_actions: int = 3
    r_max: float = 1.0
    seed: int = 0

    def build(self, gamma: float) -> MdpSpec:
        if self.kind == "gridworld":
            return make_gridworld(self.width, self.height, self.slip, self.goal_reward, gamma)
        return make_random_mdp(self.n_states, self.n_actions, gamma, self.r_max, self.seed)


@dataclass(frozen=True)
class FederationBlock:
    qualities: tuple[float, ...] = (1.0, 1.0, 0.0, 0.0)
    n_transitions: int = 2000
    horizon: int = 20
    reward_noise: float = 0.0

    def for_seed(self, seed: int, qualities: tuple[float, ...] | None = None) -> FederationConfig:
        qs = self.qualities if qualities is None else qualities
        return FederationConfig.from_qualities(qs, self.n_transitions, seed, mdp_ref="mdp",
                                               horizon=self.horizon, reward_noise=self.reward_noise)


@dataclass(frozen=True)
class ExperimentConfig:
    mdp: MdpBlock = field(default_factory=MdpBlock)
    federation: FederationBlock = field(default_factory=FederationBlock)
    hyper: HyperParams = field(default_factory=HyperParams)
    rounds: int = 30
    algo: str = "FOVA"
    vote_mode: VoteMode = field(default_factory=VoteMode)
    seeds: tuple[int, ...] = (0,)
    output_dir: str = "out"
    quality_schedule: tuple[float, ...] | None = None
    rounds_per_phase: int = 5

    @property
    def n_clients(self) -> int:
        return len(self.federation.qualities)

    def build_mdp(self) -> MdpSpec:
        return self.mdp.build(self.hyper.gamma)

    def to_dict(self) -> dict:
        hyper = {}
        for f in dataclasses.fields(HyperParams):
            key = "lambda" if f.name == "lam" else f.name
            hyper[key] = getattr(self.hyper, f.name)
        return {
            "version": CONFIG_VERSION,
            "mdp": dataclasses.asdict(self.mdp),
            "federation": {**dataclasses.asdict(self.federation),
                           "qualities": list(self.federation.qualities)},
            "hyper": hyper,
            "rounds": self.rounds,
            "algo": TAG_OF_ALGO[self.algo],
            "vote_mode": {"kind": self.vote_mode.kind, "sample_seed": self.vote_mode.sample_seed},
            "seeds": list(self.seeds),
            "output_dir": self.output_dir,
            "quality_schedule": None if self.quality_schedule is None else list(self.quality_schedule),
            "rounds_per_phase": self.rounds_per_phase,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)


def _expect(value: Any, kinds, path: str):
    if isinstance(value, bool) and bool not in (kinds if isinstance(kinds, tuple) else (kinds,)):
        raise ConfigError(path, f"expected {kinds}, got a boolean")
    if not isinstance(value, kinds):
        raise ConfigError(path, f"expected {kinds}, got {type(value).__name__}")
    return value


def _number(value: Any, path: str) -> float:
    return float(_expect(value, (int, float), path))


def _integer(value: Any, path: str) -> int:
    return int(_expect(value, int, path))


def _check_keys(block: dict, allowed, path: str) -> None:
    _expect(block, dict, path)
    for key in block:
        if key not in allowed:
            raise ConfigError(f"{path}.{key}" if path else key, "unknown key")


def _parse_mdp(block: dict) -> MdpBlock:
    names = {f.name for f in dataclasses.fields(MdpBlock)}
    _check_keys(block, names, "mdp")
    values = {}
    for f in dataclasses.fields(MdpBlock):
        if f.name not in block:
            continue
        path = f"mdp.{f.name}"
        raw = block[f.name]
        if f.name == "kind":
            if raw not in ("gridworld", "random"):
                raise ConfigError(path, "must be 'gridworld' or 'random'")
            values[f.name] = raw
        elif f.type in ("int", int):
            values[f.name] = _integer(raw, path)
        else:
            values[f.name] = _number(raw, path)
    mdp = MdpBlock(**values)
    if not 0.0 <= mdp.slip < 1.0:
        raise ConfigError("mdp.slip", "must lie in [0, 1)")
    if mdp.kind == "gridworld" and mdp.width * mdp.height < 2:
        raise ConfigError("mdp.width", "gridworld needs at least two cells")
    for name in ("width", "height", "n_states", "n_actions"):
        if getattr(mdp, name) < 1:
            raise ConfigError(f"mdp.{name}", "must be positive")
    for name in ("goal_reward", "r_max"):
        if getattr(mdp, name) <= 0:
            raise ConfigError(f"mdp.{name}", "must be positive")
    return mdp


def _parse_federation(block: dict) -> FederationBlock:
    names = {f.name for f in dataclasses.fields(FederationBlock)}
    _check_keys(block, names, "federation")
    values: dict[str, Any] = {}
    if "qualities" in block:
        qs = _expect(block["qualities"], list, "federation.qualities")
        if not qs:
            raise ConfigError("federation.qualities", "need at least one client")
        parsed = []
        for i, q in enumerate(qs):
            qv = _number(q, f"federation.qualities[{i}]")
            if not 0.0 <= qv <= 1.0:
                raise ConfigError(f"federation.qualities[{i}]", "must lie in [0, 1]")
            parsed.append(qv)
        values["qualities"] = tuple(parsed)
    for name in ("n_transitions", "horizon"):
        if name in block:
            values[name] = _integer(block[name], f"federation.{name}")
            if values[name] < 1:
                raise ConfigError(f"federation.{name}", "must be at least 1")
    if "reward_noise" in block:
        values["reward_noise"] = _number(block["reward_noise"], "federation.reward_noise")
        if values["reward_noise"] < 0:
            raise ConfigError("federation.reward_noise", "must be nonnegative")
    return FederationBlock(**values)


def _parse_hyper(block: dict) -> HyperParams:
    _check_keys(block, HYPER_KEYS, "hyper")
    values: dict[str, Any] = {}
    defaults = HyperParams()
    for key, attr in HYPER_KEYS.items():
        if key not in block:
            continue
        path = f"hyper.{key}"
        default = getattr(defaults, attr)
        raw = block[key]
        if isinstance(default, bool):
            values[attr] = _expect(raw, bool, path)
        elif isinstance(default, int):
            values[attr] = _integer(raw, path)
        elif isinstance(default, float):
            values[attr] = _number(raw, path)
        else:
            values[attr] = _expect(raw, str, path)
    try:
        return HyperParams(**values)
    except ConfigurationError as exc:
        name = str(exc).split(" ", 1)[0]
        key = "lambda" if name == "lam" else name
        raise ConfigError(f"hyper.{key}", str(exc)) from None


def parse_config(source: str) -> ExperimentConfig:
    """Validate JSON text into an :class:`ExperimentConfig`, applying defaults."""
    try:
        doc = json.loads(source)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"line {exc.lineno} column {exc.colno}", f"malformed JSON: {exc.msg}") from None
    top = {"version", "mdp", "federation", "hyper", "rounds", "algo", "vote_mode", "seeds",
           "output_dir", "quality_schedule", "rounds_per_phase"}
    _check_keys(doc, top, "")
    version = doc.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError("version", f"unsupported config version {version!r}")
    values: dict[str, Any] = {}
    if "mdp" in doc:
        values["mdp"] = _parse_mdp(doc["mdp"])
    if "federation" in doc:
        values["federation"] = _parse_federation(doc["federation"])
    values["hyper"] = _parse_hyper(doc.get("hyper", {}))
    for name in ("rounds", "rounds_per_phase"):
        if name in doc:
            values[name] = _integer(doc[name], name)
            if values[name] < 1:
                raise ConfigError(name, "must be at least 1")
    if "algo" in doc:
        tag = _expect(doc["algo"], str, "algo")
        if tag not in ALGO_TAGS:
            raise ConfigError("algo", f"must be one of {sorted(ALGO_TAGS)}")
        values["algo"] = ALGO_TAGS[tag]
    if "vote_mode" in doc:
        vm = doc["vote_mode"]
        if isinstance(vm, str):
            vm = {"kind": vm}
        _check_keys(vm, {"kind", "sample_seed"}, "vote_mode")
        kind = _expect(vm.get("kind", "expected_q"), str, "vote_mode.kind")
        if kind not in ("expected_q", "sampled_q"):
            raise ConfigError("vote_mode.kind", "must be 'expected_q' or 'sampled_q'")
        values["vote_mode"] = VoteMode(kind, _integer(vm.get("sample_seed", 0), "vote_mode.sample_seed"))
    if "seeds" in doc:
        seeds = _expect(doc["seeds"], list, "seeds")
        if not seeds:
            raise ConfigError("seeds", "need at least one seed")
        values["seeds"] = tuple(_integer(s, f"seeds[{i}]") for i, s in enumerate(seeds))
    if "output_dir" in doc:
        values["output_dir"] = _expect(doc["output_dir"], str, "output_dir")
    if doc.get("quality_schedule") is not None:
        sched = _expect(doc["quality_schedule"], list, "quality_schedule")
        if not sched:
            raise ConfigError("quality_schedule", "need at least one phase")
        parsed = []
        for i, q in enumerate(sched):
            qv = _number(q, f"quality_schedule[{i}]")
            if not 0.0 <= qv <= 1.0:
                raise ConfigError(f"quality_schedule[{i}]", "must lie in [0, 1]")
            parsed.append(qv)
        values["quality_schedule"] = tuple(parsed)
    return ExperimentConfig(**values)


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
