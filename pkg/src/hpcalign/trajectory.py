"""Episode records shared by the simulator, the learner and the metrics."""

from __future__ import annotations

from dataclasses import dataclass, field


@dataclass(frozen=True)
class StepRecord:
    t: int
    state_tokens: tuple[int, ...]
    action: int
    subgoal_id: int
    error_flag: int

    def __post_init__(self):
        if self.t < 0:
            raise ValueError("step index must be nonnegative")
        if self.error_flag not in (0, 1):
            raise ValueError("error_flag must be 0 or 1")
        object.__setattr__(self, "state_tokens", tuple(int(s) for s in self.state_tokens))

    def tokens(self) -> list[int]:
        """Interleaved token stream for this step: observation then action."""
        return [*self.state_tokens, self.action]


@dataclass(frozen=True)
class Trajectory:
    episode_id: str
    task_id: str
    steps: tuple[StepRecord, ...]
    prompt_tokens: tuple[int, ...] = ()
    label_mode: str = "oracle"

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        object.__setattr__(self, "prompt_tokens", tuple(int(p) for p in self.prompt_tokens))
        ts = [s.t for s in self.steps]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError(f"episode {self.episode_id}: step indices not strictly increasing")

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def error_flags(self) -> list[int]:
        return [s.error_flag for s in self.steps]

    @property
    def actions(self) -> list[int]:
        return [s.action for s in self.steps]


@dataclass
class EpisodeResult:
    """A rollout's trajectory plus outcome facts that are not part of the log."""

    trajectory: Trajectory
    success: bool
    final_state: object = None
    info: dict = field(default_factory=dict)
