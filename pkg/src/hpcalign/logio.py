"""Line-delimited JSON trajectory logs.

The first line is a schema header naming the frozen field list; each later
line is one flat step record. Episodes may interleave but each episode's
``t`` values must run 0, 1, 2, ... without gaps or repeats.
"""

from __future__ import annotations

import io
import json
from pathlib import Path
from typing import Iterable, TextIO

from .trajectory import StepRecord, Trajectory

SCHEMA = "hpcalign.trajectory-log"
SCHEMA_VERSION = 1
FIELDS = ("episode_id", "task_id", "t", "state_tokens", "action", "subgoal_id", "error_flag", "mode")


class LogFormatError(ValueError):
    """A log line is malformed; ``lineno`` is 1-based."""

    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


def header_line() -> str:
    return json.dumps({"schema": SCHEMA, "version": SCHEMA_VERSION, "fields": list(FIELDS)}, separators=(",", ":"))


def record_line(traj: Trajectory, step: StepRecord) -> str:
    rec = {
        "episode_id": traj.episode_id,
        "task_id": traj.task_id,
        "t": step.t,
        "state_tokens": list(step.state_tokens),
        "action": step.action,
        "subgoal_id": step.subgoal_id,
        "error_flag": step.error_flag,
        "mode": traj.label_mode,
    }
    return json.dumps(rec, separators=(",", ":"))


def emit_log(trajectories: Iterable[Trajectory], out: str | Path | TextIO) -> None:
    """Write a header plus one line per step. Episodes without steps leave no trace."""
    if isinstance(out, (str, Path)):
        with open(out, "w", encoding="utf-8", newline="\n") as fh:
            emit_log(trajectories, fh)
        return
    out.write(header_line() + "\n")
    for traj in trajectories:
        for step in traj.steps:
            out.write(record_line(traj, step) + "\n")


def dumps_log(trajectories: Iterable[Trajectory]) -> str:
    buf = io.StringIO()
    emit_log(trajectories, buf)
    return buf.getvalue()


def _check_header(lineno: int, line: str) -> None:
    try:
        head = json.loads(line)
    except json.JSONDecodeError as e:
        raise LogFormatError(lineno, f"header is not JSON ({e.msg})") from None
    if not isinstance(head, dict) or head.get("schema") != SCHEMA:
        raise LogFormatError(lineno, f"missing {SCHEMA} header")
    if head.get("version") != SCHEMA_VERSION:
        raise LogFormatError(lineno, f"unsupported log version {head.get('version')!r}")
    if tuple(head.get("fields", ())) != FIELDS:
        raise LogFormatError(lineno, "field list does not match this schema version")


def _int(rec, key, lineno, lo=None):
    v = rec[key]
    if isinstance(v, bool) or not isinstance(v, int):
        raise LogFormatError(lineno, f"{key} must be an integer")
    if lo is not None and v < lo:
        raise LogFormatError(lineno, f"{key} must be >= {lo}")
    return v


def _parse_record(lineno: int, line: str) -> dict:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as e:
        raise LogFormatError(lineno, f"not JSON ({e.msg})") from None
    if not isinstance(rec, dict):
        raise LogFormatError(lineno, "record must be an object")
    if set(rec) != set(FIELDS):
        missing = sorted(set(FIELDS) - set(rec))
        extra = sorted(set(rec) - set(FIELDS))
        raise LogFormatError(lineno, f"fields differ from schema (missing {missing}, unexpected {extra})")
    if any(rec[k] is None for k in FIELDS):
        raise LogFormatError(lineno, "null field")
    for k in ("episode_id", "task_id", "mode"):
        if not isinstance(rec[k], str):
            raise LogFormatError(lineno, f"{k} must be a string")
    _int(rec, "t", lineno, 0)
    _int(rec, "action", lineno)
    _int(rec, "subgoal_id", lineno, 0)
    if _int(rec, "error_flag", lineno) not in (0, 1):
        raise LogFormatError(lineno, "error_flag must be 0 or 1")
    toks = rec["state_tokens"]
    if not isinstance(toks, list) or any(isinstance(x, bool) or not isinstance(x, int) for x in toks):
        raise LogFormatError(lineno, "state_tokens must be a list of integers")
    return rec


def loads_log(text: str, prompts: dict | None = None) -> list[Trajectory]:
    """Strict parse of log text; see :func:`parse_log`."""
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        return []
    _check_header(1, lines[0])
    episodes: dict[str, list] = {}
    meta: dict[str, tuple[str, str]] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            raise LogFormatError(lineno, "blank line")
        rec = _parse_record(lineno, line)
        eid = rec["episode_id"]
        steps = episodes.setdefault(eid, [])
        key = (rec["task_id"], rec["mode"])
        if meta.setdefault(eid, key) != key:
            raise LogFormatError(lineno, f"episode {eid}: task_id or mode changes mid-episode")
        if rec["t"] < len(steps):
            raise LogFormatError(lineno, f"episode {eid}: duplicate t={rec['t']}")
        if rec["t"] > len(steps):
            raise LogFormatError(lineno, f"episode {eid}: gap in t (expected {len(steps)}, got {rec['t']})")
        steps.append(StepRecord(rec["t"], tuple(rec["state_tokens"]), rec["action"], rec["subgoal_id"],
                                rec["error_flag"]))
    prompts = prompts or {}
    return [
        Trajectory(eid, meta[eid][0], tuple(steps), prompts.get(meta[eid][0], ()), meta[eid][1])
        for eid, steps in episodes.items()
    ]


def parse_log(path: str | Path, prompts: dict | None = None) -> list[Trajectory]:
    """Read a log file into trajectories in first-appearance order.

    The log does not carry prompts; ``prompts`` (task id to token tuple)
    fills them in. An empty file is an empty log.
    """
    return loads_log(Path(path).read_text(encoding="utf-8"), prompts)
