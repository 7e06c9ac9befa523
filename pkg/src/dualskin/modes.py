"""Optical-state machine for the switchable film.

Opaque: LEDs on, tactile stream valid. Transparent: LEDs off, proximity
stream valid. Each switch passes through a transition state of fixed
duration during which neither stream is valid.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

__all__ = [
    "Mode",
    "ModeState",
    "ModeEvent",
    "TRANSITION_DURATION",
    "TIME_EPS",
    "request_mode",
    "tick",
    "stream_validity",
    "initial_state",
]

TRANSITION_DURATION = 0.3
TIME_EPS = 1e-12


class Mode(enum.Enum):
    TACTILE_OPAQUE = "TACTILE_OPAQUE"
    TRANSITION_TO_PROXIMITY = "TRANSITION_TO_PROXIMITY"
    PROXIMITY_TRANSPARENT = "PROXIMITY_TRANSPARENT"
    TRANSITION_TO_TACTILE = "TRANSITION_TO_TACTILE"


_LED_ON = {Mode.TACTILE_OPAQUE, Mode.TRANSITION_TO_TACTILE}
_TARGET = {
    "tactile": (Mode.TACTILE_OPAQUE, Mode.TRANSITION_TO_TACTILE),
    "proximity": (Mode.PROXIMITY_TRANSPARENT, Mode.TRANSITION_TO_PROXIMITY),
}
_SETTLES_TO = {
    Mode.TRANSITION_TO_PROXIMITY: Mode.PROXIMITY_TRANSPARENT,
    Mode.TRANSITION_TO_TACTILE: Mode.TACTILE_OPAQUE,
}


@dataclass(frozen=True)
class ModeState:
    state: Mode = Mode.TACTILE_OPAQUE
    transition_elapsed: float = 0.0
    transition_duration: float = TRANSITION_DURATION

    def __post_init__(self):
        if not self.transition_duration > 0:
            raise ValueError("transition duration must be positive")
        if not 0.0 <= self.transition_elapsed <= self.transition_duration:
            raise ValueError("transition_elapsed outside [0, transition_duration]")
        if self.state not in _SETTLES_TO and self.transition_elapsed != 0.0:
            raise ValueError("stable states carry no elapsed time")

    @property
    def led_on(self) -> bool:
        return self.state in _LED_ON

    @property
    def in_transition(self) -> bool:
        return self.state in _SETTLES_TO


@dataclass(frozen=True)
class ModeEvent:
    event: str
    state: Mode
    offset: float = field(default=0.0, compare=False)   # seconds into the producing tick


def initial_state(duration: float = TRANSITION_DURATION) -> ModeState:
    return ModeState(Mode.TACTILE_OPAQUE, 0.0, duration)


def request_mode(state: ModeState, target: str) -> ModeState:
    """Start a switch toward ``target``; a no-op if already there or heading there.

    Reversing an in-flight transition restarts the timer in the new direction.
    """
    try:
        stable, heading = _TARGET[target]
    except KeyError:
        raise ValueError(f"unknown mode target {target!r}") from None
    if state.state in (stable, heading):
        return state
    return replace(state, state=heading, transition_elapsed=0.0)


def tick(state: ModeState, dt: float):
    """Advance ``dt`` seconds; returns ``(new_state, events)``.

    A transition completes once elapsed time reaches the duration, with a
    ``TIME_EPS`` slack so that sub-steps summing to the duration in floating
    point complete exactly like one step.
    """
    if dt < 0:
        raise ValueError("dt must be non-negative")
    if not state.in_transition:
        return state, ()
    remaining = state.transition_duration - state.transition_elapsed
    if dt + TIME_EPS >= remaining:
        done = _SETTLES_TO[state.state]
        ev = ModeEvent("mode_entered", done, min(remaining, dt))
        return ModeState(done, 0.0, state.transition_duration), (ev,)
    return replace(state, transition_elapsed=state.transition_elapsed + dt), ()


def stream_validity(state: ModeState) -> dict:
    return {
        "tactile_valid": state.state is Mode.TACTILE_OPAQUE,
        "proximity_valid": state.state is Mode.PROXIMITY_TRANSPARENT,
    }
