"""Pipeline stages shared by the command line and the tests.

simulate (GridHome rollouts) -> train (hierarchical encoders) -> infer
(controller rollouts) -> metrics (EPR / PAC tables) -> report (curve data).
Every stage is a pure function of its inputs and the run seed.
"""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import RunConfig
from .controller import ControllerConfig, run_episode, subgoal_prototypes
from .core import Rng
from .gridhome import World, default_world, get_task, inject_noise, oracle_policy, rollout
from .hpcc import HpccState, train
from .metrics import (UndefinedMetricError, auc_epr, epr_curve, epr_slope, pac_ratio, pac_slope)
from .trajectory import EpisodeResult, Trajectory

METRICS_SCHEMA = "hpcalign.metrics"
METRICS_VERSION = 1
PLOT_FIELDS = ("lag", "value", "ci_low", "ci_high")


class NoDataError(ValueError):
    """A stage received nothing to work on."""


def episode_seeds(seed: int, n: int) -> list[int]:
    """Per-episode environment seeds; disjoint across run seeds below 100000 episodes."""
    return [seed * 100_000 + i for i in range(n)]


def prompts_for(world: World | None = None) -> dict:
    world = world or default_world()
    return {tid: tuple(world.vocab.words(t.prompt)) for tid, t in world.tasks.items()}


def _noisy(cfg: RunConfig, world: World):
    s = cfg["simulate"]
    return inject_noise(oracle_policy(world), s["noise_rate"], s["mix"], persistence=s["persistence"], world=world)


def _assign(tasks: Sequence[str], seeds: Sequence[int]):
    if not tasks:
        raise NoDataError("no tasks selected")
    return [(tasks[i % len(tasks)], sd) for i, sd in enumerate(seeds)]


def simulate(cfg: RunConfig, tasks: Sequence[str] | None = None, seeds: Sequence[int] | None = None,
             world: World | None = None) -> list[EpisodeResult]:
    """Rollouts of the (optionally noisy) oracle; task ``i % len(tasks)`` gets seed ``i``."""
    world = world or default_world()
    s = cfg["simulate"]
    tasks = list(tasks or s["tasks"])
    seeds = list(seeds if seeds is not None else episode_seeds(cfg.seed, s["episodes"]))
    policy = _noisy(cfg, world) if s["noise_rate"] > 0 else oracle_policy(world)
    return [rollout(policy, get_task(t, world), sd, mode=s["label_mode"], world=world) for t, sd in _assign(tasks, seeds)]


def train_model(cfg: RunConfig, data: Sequence[Trajectory], world: World | None = None, callback=None):
    """Fresh model trained on ``data``; returns ``(state, history)``."""
    world = world or default_world()
    if not data or not any(len(t) for t in data):
        raise NoDataError("no training steps")
    tr = cfg["train"]
    state = HpccState.init(cfg.hpcc_config(len(world.vocab)), Rng(cfg.seed).split(1))
    return train(state, data, tr["steps"], Rng(cfg.seed).split(2), lr=tr["lr"], batch_size=tr["batch_size"],
                 stage=tr["stage"], pretrain_steps=tr["pretrain_steps"], warmup=tr["warmup"],
                 weight_decay=tr["weight_decay"], callback=callback)


def reference_prototypes(cfg: RunConfig, state: HpccState, tasks: Sequence[str], world: World | None = None) -> dict:
    """Subgoal embeddings from clean oracle rollouts on a fixed reference seed block."""
    world = world or default_world()
    c = cfg["controller"]
    trajs = [rollout(oracle_policy(world), get_task(t, world), c["prototype_seed"] + j, world=world).trajectory
             for t in tasks for j in range(c["prototype_episodes"])]
    return subgoal_prototypes(state, trajs, c["window_len"])


def infer(cfg: RunConfig, state: HpccState | None, tasks: Sequence[str] | None = None,
          seeds: Sequence[int] | None = None, controller: ControllerConfig | None = None,
          world: World | None = None, prototypes: dict | None = None) -> list[EpisodeResult]:
    """Controller rollouts under the noisy policy's logits."""
    world = world or default_world()
    s = cfg["simulate"]
    tasks = list(tasks or s["tasks"])
    seeds = list(seeds if seeds is not None else episode_seeds(cfg.seed, s["episodes"]))
    ctl = controller or cfg.controller_config()
    uses_model = ctl.gating or ctl.switching or ctl.rescoring
    if uses_model and prototypes is None:
        prototypes = reference_prototypes(cfg, state, sorted(set(tasks)), world)
    logits = _noisy(cfg, world).logits
    return [run_episode(t, sd, state if uses_model else None, ctl, logits, mode=s["label_mode"],
                        subgoal_embs=prototypes if uses_model else None, world=world)
            for t, sd in _assign(tasks, seeds)]


# ---------------------------------------------------------------------------
# metrics tables
# ---------------------------------------------------------------------------


def _num(x):
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else None


def epr_report(trajs: Sequence[Trajectory], cfg: RunConfig) -> dict:
    m = cfg["metrics"]
    if not trajs:
        raise NoDataError("no episodes in log")
    curve = epr_curve(trajs, m["K"], n_boot=m["n_boot"], rng=Rng(cfg.seed).split(3), ipcw=m["ipcw"],
                      alpha=m["alpha"], n_match=m["n_match"])
    flags = list(curve.flags)
    auc = {}
    for W in m["auc_windows"]:
        try:
            auc[str(W)] = auc_epr(curve, W) if W <= m["K"] else None
        except UndefinedMetricError as e:
            auc[str(W)] = None
            flags.append(f"AUC-EPR_{W}: {e}")
    try:
        slope = epr_slope(curve)
    except UndefinedMetricError as e:
        slope = None
        flags.append(f"EPR slope: {e}")
    rows = [{"lag": int(k), "value": _num(curve.epr[i]), "ci_low": _num(curve.ci_low[i]),
             "ci_high": _num(curve.ci_high[i]), "p_case": _num(curve.p_case[i]), "p_ctrl": _num(curve.p_ctrl[i]),
             "n": int(curve.n_case[i]), "defined": bool(curve.defined[i])} for i, k in enumerate(curve.lags)]
    return {"schema": METRICS_SCHEMA, "version": METRICS_VERSION, "kind": "epr", "n_episodes": len(trajs),
            "K": m["K"], "n_boot": m["n_boot"], "n_match": m["n_match"], "seed": cfg.seed, "ipcw": m["ipcw"],
            "k_guard": curve.k_guard, "n_cases": curve.n_cases, "n_unmatched": curve.n_unmatched, "auc": auc, "slope": _num(slope),
            "rows": rows, "flags": flags}


def pac_report(trajs: Sequence[Trajectory], cfg: RunConfig) -> dict:
    m = cfg["metrics"]
    if not trajs:
        raise NoDataError("no episodes in log")
    res = pac_ratio(trajs, m["K"], eps_reg=m["eps_reg"], n_boot=m["n_boot"], rng=Rng(cfg.seed).split(4),
                    alpha=m["alpha"])
    flags = list(res.flags)
    lo, hi = m["pac_range"][0], min(m["pac_range"][1], m["K"])
    try:
        slope = pac_slope(trajs, (lo, hi), m["eps_reg"])
    except (UndefinedMetricError, ValueError) as e:
        slope = None
        flags.append(f"pac_slope: {e}")
    rows = [{"lag": int(k), "value": _num(res.ratio[i]), "ci_low": _num(res.ci_low[i]),
             "ci_high": _num(res.ci_high[i]), "q": _num(res.q[i]), "n": int(res.n[i])}
            for i, k in enumerate(res.lags)]
    return {"schema": METRICS_SCHEMA, "version": METRICS_VERSION, "kind": "pac", "n_episodes": len(trajs),
            "K": m["K"], "n_boot": m["n_boot"], "seed": cfg.seed, "eps_reg": m["eps_reg"],
            "pac_range": [lo, hi], "pac_slope": _num(slope), "unstable": res.unstable,
            "auc": {str(W): res.auc.get(W) for W in m["auc_windows"]}, "rows": rows, "flags": flags}


def dumps_metrics(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def format_table(report: dict) -> str:
    """Fixed-width text table of a metrics report."""
    kind = report["kind"]
    extra = ("p_case", "p_ctrl") if kind == "epr" else ("q",)
    head = ["lag", "EPR" if kind == "epr" else "PAC", "ci_low", "ci_high", *extra, "n"]
    lines = ["  ".join(f"{h:>9}" for h in head)]

    def f(x):
        return f"{x:9.4f}" if x is not None else f"{'undef':>9}"

    for r in report["rows"]:
        lines.append("  ".join([f"{r['lag']:>9d}", f(r["value"]), f(r["ci_low"]), f(r["ci_high"]),
                                *(f(r[e]) for e in extra), f"{r['n']:>9d}"]))
    for W, v in report["auc"].items():
        lines.append(f"AUC-{kind.upper()}_{W} = " + ("undefined" if v is None else f"{v:.4f}"))
    if kind == "epr":
        lines.append(f"EPR slope = {'undefined' if report['slope'] is None else format(report['slope'], '.4f')}")
        lines.append(f"cases = {report['n_cases']}, unmatched = {report['n_unmatched']}, guard = {report['k_guard']}")
    else:
        s = report["pac_slope"]
        lines.append(f"pac_slope[{report['pac_range'][0]}..{report['pac_range'][1]}] = "
                     + ("undefined" if s is None else f"{s:.4f}"))
    lines.extend(f"note: {fl}" for fl in report["flags"])
    return "\n".join(lines) + "\n"


def plot_rows(report: dict) -> list[dict]:
    return [{k: r[k] for k in PLOT_FIELDS} for r in report.get("rows", [])]


def dumps_plot_data(report: dict) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=PLOT_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in plot_rows(report):
        w.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def load_metrics(path: str | Path) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    if not text.strip():
        raise NoDataError(f"{path}: no data")
    try:
        rep = json.loads(text)
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: not a metrics file ({e.msg})") from None
    if not isinstance(rep, dict) or rep.get("schema") != METRICS_SCHEMA:
        raise ValueError(f"{path}: not a metrics file")
    if rep.get("version") != METRICS_VERSION:
        raise ValueError(f"{path}: unsupported metrics version {rep.get('version')!r}")
    return rep


def render_report(reports: Sequence[dict], out_dir: str | Path) -> list[Path]:
    """Curve data with CI band columns, one CSV per metrics report.

    Raises NoDataError when no report holds a single defined value.
    """
    usable = [r for r in reports if any(row["value"] is not None for row in r.get("rows", []))]
    if not usable:
        raise NoDataError("no data")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    counts: dict[str, int] = {}
    for rep in usable:
        n = counts.get(rep["kind"], 0)
        counts[rep["kind"]] = n + 1
        path = out / (f"{rep['kind']}_curve.csv" if n == 0 else f"{rep['kind']}_curve_{n}.csv")
        path.write_text(dumps_plot_data(rep), encoding="utf-8")
        written.append(path)
    return written


def success_rate(results: Sequence[EpisodeResult]) -> float:
    return float(np.mean([r.success for r in results])) if results else float("nan")
