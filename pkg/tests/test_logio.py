import io
import json
from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from hpcalign.logio import FIELDS, LogFormatError, dumps_log, emit_log, header_line, loads_log, parse_log
from hpcalign.trajectory import StepRecord, Trajectory

FIXTURE = Path(__file__).parent / "fixtures" / "three_steps.jsonl"
HEADER = header_line()


def rec(**kw):
    base = {"episode_id": "a", "task_id": "t", "t": 0, "state_tokens": [1, 2], "action": 3, "subgoal_id": 0,
            "error_flag": 0, "mode": "oracle"}
    base.update(kw)
    return json.dumps(base)


def log_text(*lines):
    return "\n".join((HEADER,) + lines) + "\n"


steps_st = st.lists(
    st.tuples(st.lists(st.integers(0, 200), max_size=5), st.integers(0, 200), st.integers(0, 12), st.integers(0, 1)),
    min_size=1, max_size=6)
traj_st = st.builds(
    lambda eid, task, mode, steps: Trajectory(eid, task, [StepRecord(t, o, a, g, f) for t, (o, a, g, f) in
                                                         enumerate(steps)], (), mode),
    st.text(min_size=1, max_size=6), st.sampled_from(["fridge_milk", "relay"]),
    st.sampled_from(["oracle", "constraint"]), steps_st)


@given(st.lists(traj_st, max_size=4, unique_by=lambda t: t.episode_id))
def test_round_trip(trajs):
    text = dumps_log(trajs)
    back = loads_log(text)
    assert back == trajs
    assert dumps_log(back) == text


def test_hand_written_fixture():
    trajs = parse_log(FIXTURE, {"fridge_milk": (87, 88, 89, 90)})
    assert len(trajs) == 1
    (t,) = trajs
    assert (t.episode_id, t.task_id, len(t), t.label_mode) == ("ep-1", "fridge_milk", 3, "oracle")
    assert t.error_flags == [0, 1, 0] and t.prompt_tokens == (87, 88, 89, 90)
    assert dumps_log(trajs) == FIXTURE.read_text()


def test_empty_file_is_empty_log(tmp_path):
    p = tmp_path / "empty.jsonl"
    p.write_text("")
    assert parse_log(p) == []
    assert loads_log(HEADER + "\n") == []


def test_interleaved_episodes_keep_first_appearance_order():
    text = log_text(rec(episode_id="b"), rec(episode_id="a"), rec(episode_id="b", t=1))
    assert [(t.episode_id, len(t)) for t in loads_log(text)] == [("b", 2), ("a", 1)]


@pytest.mark.parametrize("lines, lineno, needle", [
    ((rec(), rec(t=2)), 3, "gap"),
    ((rec(), rec(t=1), rec(t=1)), 4, "duplicate"),
    ((rec(), "{not json"), 3, "not JSON"),
    ((rec(error_flag=2),), 2, "error_flag"),
    ((rec(action=None),), 2, "null"),
    ((rec(t="0"),), 2, "t must be an integer"),
    ((rec(), ""), 3, "blank"),
    ((rec(), rec(t=1, task_id="u")), 3, "mid-episode"),
    ((json.dumps({"episode_id": "a"}),), 2, "fields differ"),
    ((rec(state_tokens=[1, True]),), 2, "state_tokens"),
])
def test_malformed_lines_report_line_numbers(lines, lineno, needle):
    with pytest.raises(LogFormatError) as e:
        loads_log(log_text(*lines))
    assert e.value.lineno == lineno
    assert f"line {lineno}" in str(e.value) and needle in str(e.value)


def test_header_is_required_and_versioned():
    with pytest.raises(LogFormatError, match="header"):
        loads_log(rec() + "\n")
    bad = json.loads(HEADER)
    bad["version"] = 2
    with pytest.raises(LogFormatError, match="version"):
        loads_log(json.dumps(bad) + "\n")
    bad = json.loads(HEADER)
    bad["fields"] = list(FIELDS[:-1])
    with pytest.raises(LogFormatError, match="field list"):
        loads_log(json.dumps(bad) + "\n")


def test_empty_episodes_leave_no_trace():
    buf = io.StringIO()
    emit_log([Trajectory("x", "t", [])], buf)
    assert buf.getvalue() == HEADER + "\n"
