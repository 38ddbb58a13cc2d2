"""Labeled synthetic CAN traffic: periodic ECUs plus injected attacks.

All randomness comes from numpy's PCG64 bit generator seeded with
``[seed, stream]`` integer lists, so a trace is a pure function of its
inputs on any platform. Timestamps are quantized to whole microseconds,
which makes them survive the canonical CSV round trip exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from .can_ingest import MAX_ID, CanMessage, Label
from .errors import EmptyProfileSet, ReplaySourceEmpty, ScenarioError, WindowOutOfRange

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64([seed, *stream]))


def _quantize(t: float) -> float:
    return round(t * 1e6) / 1e6


# -- payload models ------------------------------------------------------------------

@dataclass(frozen=True)
class Constant:
    data: tuple[int, ...]

    def start(self, rng):
        return None

    def emit(self, state, rng):
        return self.data, state


@dataclass(frozen=True)
class CounterByte:
    """Fixed payload whose byte at ``index`` counts up modulo 256."""
    index: int
    base: tuple[int, ...] = (0,) * 8

    def start(self, rng):
        return int(rng.integers(0, 256))

    def emit(self, state, rng):
        data = list(self.base)
        data[self.index] = state
        return tuple(data), (state + 1) % 256


@dataclass(frozen=True)
class RandomWalk:
    """Every byte drifts by at most ``step`` per emission, clipped to [0, 255]."""
    step: int
    dlc: int = 8

    def start(self, rng):
        return rng.integers(0, 256, size=self.dlc)

    def emit(self, state, rng):
        state = np.clip(state + rng.integers(-self.step, self.step + 1, size=self.dlc), 0, 255)
        return tuple(int(b) for b in state), state


PayloadModel = Union[Constant, CounterByte, RandomWalk]


def _payload_len(model: PayloadModel) -> int:
    if isinstance(model, Constant):
        return len(model.data)
    if isinstance(model, CounterByte):
        return len(model.base)
    return model.dlc


@dataclass(frozen=True)
class EcuProfile:
    can_id: int
    period: float
    jitter: float = 0.0
    payload_model: PayloadModel = field(default_factory=lambda: Constant((0,) * 8))
    offset: float = 0.0

    def __post_init__(self):
        if not 0 <= self.can_id <= MAX_ID:
            raise ScenarioError(f"ECU id {self.can_id:#x} outside 11-bit range")
        if self.period <= 0:
            raise ScenarioError(f"period must be > 0, got {self.period}")
        if not 0 <= self.jitter < 1:
            raise ScenarioError(f"jitter must be in [0, 1), got {self.jitter}")
        if not 0 <= _payload_len(self.payload_model) <= 8:
            raise ScenarioError("payload model must produce 0..8 bytes")


ATTACK_KINDS = ("flooding", "fuzzing", "spoofing", "replay")


@dataclass(frozen=True)
class AttackScenario:
    """One attack interval.

    ``flooding`` injects ``flood_id`` at ``rate``; ``fuzzing`` injects random
    ids and payloads at ``rate``; ``spoofing`` injects ``payload`` on
    ``target_id`` at ``rate``; ``replay`` re-sends the benign messages seen
    in ``[source_start, source_start + duration)`` starting at ``start``.
    """
    kind: str
    start: float
    duration: float
    rate: float = 100.0
    flood_id: int = 0x000
    target_id: int = 0
    payload: tuple[int, ...] = (0xFF,) * 8
    source_start: float = 0.0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ScenarioError(f"unknown attack kind {self.kind!r}")
        if self.start < 0 or self.duration <= 0:
            raise ScenarioError("attack needs start >= 0 and duration > 0")
        if self.kind != "replay" and self.rate <= 0:
            raise ScenarioError("attack rate must be > 0")
        if self.kind == "spoofing" and not 0 <= self.target_id <= MAX_ID:
            raise ScenarioError(f"spoof target {self.target_id:#x} outside 11-bit range")

    @property
    def end(self) -> float:
        return self.start + self.duration


# -- generation ----------------------------------------------------------------------

def generate_benign(profiles: list[EcuProfile], horizon: float, seed: int) -> list[CanMessage]:
    """Periodic traffic from every profile over [0, horizon), sorted by time."""
    if not profiles:
        raise EmptyProfileSet("need at least one ECU profile")
    if horizon <= 0:
        raise ScenarioError(f"horizon must be > 0, got {horizon}")
    stamped: list[tuple[float, int, int, CanMessage]] = []
    for p_idx, prof in enumerate(profiles):
        rng = _rng(seed, 1, p_idx)
        state = prof.payload_model.start(rng)
        k = 0
        while True:
            nominal = prof.offset + k * prof.period
            if nominal >= horizon:
                break
            t = nominal
            if prof.jitter:
                t += rng.uniform(-prof.jitter, prof.jitter) * prof.period
            t = _quantize(max(t, 0.0))
            data, state = prof.payload_model.emit(state, rng)
            k += 1
            if t >= horizon:
                continue
            stamped.append((t, p_idx, k, CanMessage(t, prof.can_id, len(data), data, Label.BENIGN)))
    stamped.sort(key=lambda s: s[:3])
    return [s[3] for s in stamped]


def inject_attack(trace: list[CanMessage], scenario: AttackScenario, seed: int) -> list[CanMessage]:
    """Merge attack frames into ``trace``; originals keep their order and labels."""
    if not trace:
        raise WindowOutOfRange("cannot inject into an empty trace")
    t_first, t_last = trace[0].timestamp, trace[-1].timestamp
    if scenario.start > t_last or scenario.end < t_first:
        raise WindowOutOfRange(
            f"attack window [{scenario.start}, {scenario.end}) misses trace [{t_first}, {t_last}]")
    rng = _rng(seed, 2, ATTACK_KINDS.index(scenario.kind))

    injected: list[CanMessage] = []
    if scenario.kind == "replay":
        lo, hi = scenario.source_start, scenario.source_start + scenario.duration
        source = [m for m in trace if lo <= m.timestamp < hi and m.label is not Label.ATTACK]
        if not source:
            raise ReplaySourceEmpty(f"no benign messages in [{lo}, {hi})")
        shift = scenario.start - lo
        injected = [CanMessage(_quantize(m.timestamp + shift), m.can_id, m.dlc, m.payload, Label.ATTACK)
                    for m in source]
    else:
        count = int(math.floor(scenario.duration * scenario.rate + 1e-9))
        for k in range(count):
            t = _quantize(scenario.start + k / scenario.rate)
            if scenario.kind == "flooding":
                can_id, data = scenario.flood_id, (0,) * 8
            elif scenario.kind == "fuzzing":
                can_id = int(rng.integers(0, MAX_ID + 1))
                data = tuple(int(b) for b in rng.integers(0, 256, size=8))
            else:
                can_id, data = scenario.target_id, tuple(scenario.payload)
            injected.append(CanMessage(t, can_id, len(data), data, Label.ATTACK))

    # Stable merge: originals before injected frames at equal timestamps.
    merged = [(m.timestamp, 0, i, m) for i, m in enumerate(trace)]
    merged += [(m.timestamp, 1, i, m) for i, m in enumerate(injected)]
    merged.sort(key=lambda s: s[:3])
    return [s[3] for s in merged]


# -- scenario files --------------------------------------------------------------------

@dataclass
class Scenario:
    profiles: list[EcuProfile]
    attacks: list[AttackScenario]
    horizon: float
    seed: int

    def generate(self, seed: int | None = None) -> list[CanMessage]:
        seed = self.seed if seed is None else seed
        trace = generate_benign(self.profiles, self.horizon, seed)
        for i, attack in enumerate(self.attacks):
            trace = inject_attack(trace, attack, seed + 7919 * (i + 1))
        return trace


def _payload_from_table(table: dict) -> PayloadModel:
    kind = table.get("kind", "constant")
    if kind == "constant":
        return Constant(tuple(int(b) for b in table.get("data", [0] * 8)))
    if kind == "counter":
        return CounterByte(int(table.get("index", 0)), tuple(int(b) for b in table.get("base", [0] * 8)))
    if kind == "random_walk":
        return RandomWalk(int(table.get("step", 1)), int(table.get("dlc", 8)))
    raise ScenarioError(f"unknown payload kind {kind!r}")


def scenario_from_dict(doc: dict) -> Scenario:
    try:
        profiles = [
            EcuProfile(
                can_id=int(e["id"]),
                period=float(e["period"]),
                jitter=float(e.get("jitter", 0.0)),
                payload_model=_payload_from_table(e.get("payload", {})),
                offset=float(e.get("offset", 0.0)),
            )
            for e in doc.get("ecu", [])
        ]
        attacks = []
        for a in doc.get("attack", []):
            kw = {k: a[k] for k in ("rate", "flood_id", "target_id", "source_start") if k in a}
            if "payload" in a:
                kw["payload"] = tuple(int(b) for b in a["payload"])
            attacks.append(AttackScenario(kind=a["kind"], start=float(a["start"]),
                                          duration=float(a["duration"]), **kw))
        return Scenario(profiles, attacks, float(doc["horizon"]), int(doc.get("seed", 0)))
    except KeyError as exc:
        raise ScenarioError(f"scenario missing key {exc}") from None


def load_scenario(path: Path | str) -> Scenario:
    with open(path, "rb") as fh:
        try:
            doc = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ScenarioError(f"{path}: {exc}") from None
    return scenario_from_dict(doc)


def bundled_scenario(name: str) -> Path:
    """Path of a scenario shipped with the package (``desk_train``, ``desk_test``, ...)."""
    path = Path(__file__).with_name("scenarios") / f"{name}.toml"
    if not path.exists():
        raise ScenarioError(f"no bundled scenario {name!r}")
    return path
