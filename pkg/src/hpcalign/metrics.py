"""Error-propagation diagnostics: EPR with matched case-control estimation, PAC.

Cases are first errors ``t0``; controls are error-free steps with no earlier
error in their episode, matched exactly on (task, subgoal, step decile).
Conditional probabilities pool over matched pairs at each lag. Confidence
intervals resample whole episodes; replicate ``b`` always draws from
``rng.split(b)`` so results do not depend on evaluation order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import Rng
from .trajectory import Trajectory

DEFAULT_EPS_REG = 1e-4
DEFAULT_N_BOOT = 1000


class UndefinedMetricError(ValueError):
    """A requested summary needs a lag or probability that could not be estimated."""


@dataclass(frozen=True)
class ErrorSeries:
    episode_id: str
    flags: tuple[int, ...]
    task_id: str = ""
    subgoal_ids: tuple[int, ...] | None = None

    def __post_init__(self):
        flags = tuple(int(f) for f in self.flags)
        if not flags:
            raise ValueError(f"episode {self.episode_id}: empty error series")
        if any(f not in (0, 1) for f in flags):
            raise ValueError(f"episode {self.episode_id}: flags must be 0/1")
        object.__setattr__(self, "flags", flags)
        if self.subgoal_ids is not None:
            sg = tuple(int(s) for s in self.subgoal_ids)
            if len(sg) != len(flags):
                raise ValueError(f"episode {self.episode_id}: subgoal ids and flags differ in length")
            object.__setattr__(self, "subgoal_ids", sg)

    def __len__(self) -> int:
        return len(self.flags)

    @classmethod
    def from_trajectory(cls, traj: Trajectory) -> "ErrorSeries":
        return cls(traj.episode_id, tuple(traj.error_flags), traj.task_id, tuple(s.subgoal_id for s in traj.steps))


def as_series(episodes) -> list[ErrorSeries]:
    """Accept trajectories or error series; drops empty trajectories."""
    out = []
    for e in episodes:
        if isinstance(e, Trajectory):
            if len(e):
                out.append(ErrorSeries.from_trajectory(e))
        else:
            out.append(e)
    return out


@dataclass(frozen=True, order=True)
class MatchKey:
    task_id: str
    subgoal_id: int
    step_bin: int
    horizon_bin: int = 0


def match_key(s: ErrorSeries, t: int, match_horizon: bool = False) -> MatchKey:
    """Exact-match context: task, subgoal at ``t`` and the decile of ``t / T``."""
    T = len(s)
    sg = s.subgoal_ids[t] if s.subgoal_ids is not None else 0
    hb = int(np.log2(T)) if match_horizon else 0
    return MatchKey(s.task_id, sg, min(9, (10 * t) // T), hb)


def first_error_time(s) -> int | None:
    flags = s.flags if isinstance(s, ErrorSeries) else s
    for t, f in enumerate(flags):
        if f:
            return t
    return None


# ---------------------------------------------------------------------------
# Matching
# ---------------------------------------------------------------------------


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]]  # (case index, pool index)
    unmatched: list[int]  # case indices without a control
    ineligible: int  # pool entries rejected by the eligibility rule


def control_eligible(s: ErrorSeries, t: int, k_max: int) -> bool:
    """Error-free at ``t`` with no earlier error, and observable through ``t + k_max``."""
    if t + k_max > len(s) - 1:
        return False
    fe = first_error_time(s)
    return fe is None or t < fe


def match_controls(cases: Sequence[tuple], pool: Sequence[tuple], k_max: int, rng: Rng) -> MatchResult:
    """Pair each case with one same-key control, sampled without replacement.

    ``cases`` and ``pool`` hold ``(ErrorSeries, t, MatchKey)``. Within a key,
    controls are shuffled by ``rng`` and cases (in input order) take them in
    turn, so the pair count per key is ``min(#cases, #controls)``.
    """
    by_key: dict = {}
    ineligible = 0
    for j, (s, t, key) in enumerate(pool):
        if control_eligible(s, t, k_max):
            by_key.setdefault(key, []).append(j)
        else:
            ineligible += 1
    case_keys: dict = {}
    for i, (_, _, key) in enumerate(cases):
        case_keys.setdefault(key, []).append(i)
    pairs, unmatched = [], []
    for n, key in enumerate(sorted(case_keys)):
        ctrl = by_key.get(key, [])
        if ctrl:
            perm = rng.split(n).generator().permutation(len(ctrl))
            ctrl = [ctrl[p] for p in perm]
        idx = case_keys[key]
        pairs.extend(zip(idx, ctrl))
        unmatched.extend(idx[len(ctrl):])
    pairs.sort()
    return MatchResult(pairs, sorted(unmatched), ineligible)


# ---------------------------------------------------------------------------
# Shared estimation machinery
# ---------------------------------------------------------------------------


def _flag_matrix(series: Sequence[ErrorSeries]) -> np.ndarray:
    """(E, Tmax) with -1 for unobserved steps."""
    T = max(len(s) for s in series)
    F = np.full((len(series), T + 1), -1, dtype=np.int8)
    for i, s in enumerate(series):
        F[i, : len(s)] = s.flags
    return F


def _at(F: np.ndarray, ep: np.ndarray, t: np.ndarray) -> np.ndarray:
    t = np.minimum(t, F.shape[1] - 1)
    return F[ep, t]


_BOOT_CHUNK = 2_000_000  # max entries of one (replicates x episodes) count block


def _boot_blocks(n_episodes: int, n_boot: int, rng: Rng):
    """Yield episode-multiplicity blocks ``(rows, n_episodes)`` covering all replicates."""
    rows = max(1, _BOOT_CHUNK // max(n_episodes, 1))
    for start in range(0, n_boot, rows):
        stop = min(n_boot, start + rows)
        W = np.empty((stop - start, n_episodes))
        for b in range(start, stop):
            idx = rng.split(b).generator().integers(0, n_episodes, size=n_episodes)
            W[b - start] = np.bincount(idx, minlength=n_episodes)
        yield W


def _weighted_rate(vals: np.ndarray, ep: np.ndarray, W: np.ndarray, base_w: np.ndarray):
    """Per-replicate weighted mean of ``vals`` (0/1) over rows; NaN when empty."""
    # collapse rows to per-episode totals first: cost scales with episodes, not rows
    den = W @ np.bincount(ep, base_w, minlength=W.shape[1])
    num = W @ np.bincount(ep, base_w * vals, minlength=W.shape[1])
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, num / np.where(den > 0, den, 1.0), np.nan)


def _percentile_ci(samples: np.ndarray, point: float, alpha: float):
    s = samples[np.isfinite(samples)]
    if s.size == 0:
        return point, point
    lo, hi = np.quantile(s, [alpha / 2, 1 - alpha / 2])
    return float(min(lo, point)), float(max(hi, point))


def censoring_guard(series: Sequence[ErrorSeries]) -> int:
    """25th percentile of remaining horizon ``T - 1 - t0`` over first-error cases."""
    rem = [len(s) - 1 - t0 for s in series if (t0 := first_error_time(s)) is not None]
    if not rem:
        return 0
    return int(np.floor(np.percentile(rem, 25)))


def _ipcw_weights(series, case_ep, case_t, K):
    """Per-lag weights 1 / S_task(k): inverse survival of remaining horizon within each task."""
    rem = np.array([len(series[e]) - 1 - t for e, t in zip(case_ep, case_t)])
    tasks = np.array([series[e].task_id for e in case_ep])
    W = np.ones((K, len(case_ep)))
    for task in np.unique(tasks):
        m = tasks == task
        for k in range(1, K + 1):
            surv = np.mean(rem[m] >= k)
            if surv > 0:
                W[k - 1, m] = 1.0 / surv
    return W


# ---------------------------------------------------------------------------
# EPR
# ---------------------------------------------------------------------------


@dataclass
class EprCurve:
    lags: np.ndarray
    epr: np.ndarray
    p_case: np.ndarray
    p_ctrl: np.ndarray
    n_case: np.ndarray
    n_ctrl: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    defined: np.ndarray
    k_guard: int
    n_cases: int
    n_unmatched: int
    flags: list = field(default_factory=list)

    def value(self, k: int) -> float:
        i = k - 1
        if not self.defined[i]:
            raise UndefinedMetricError(f"EPR_{k} is undefined")
        return float(self.epr[i])


def epr_curve(episodes, K: int, n_boot: int = DEFAULT_N_BOOT, rng: Rng | None = None,
              ipcw: bool = False, match_horizon: bool = False, alpha: float = 0.05,
              enforce_guard: bool = True, n_match: int = 1) -> EprCurve:
    """Matched case-control EPR_k = p_case(k) - p_ctrl(k) for k = 1..K.

    Lags with no observable matched pair, and (with ``enforce_guard``) lags
    above the censoring guard, are flagged undefined and reported as NaN.
    ``n_match > 1`` pools that many independent 1:1 matchings, which only
    removes control-sampling noise; the first draw is the ``n_match=1`` one.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if n_match < 1:
        raise ValueError("n_match must be >= 1")
    rng = rng or Rng(0)
    series = as_series(episodes)
    if not series:
        raise UndefinedMetricError("no episodes")
    cases, pool = [], []
    for s in series:
        t0 = first_error_time(s)
        if t0 is not None:
            cases.append((s, t0, match_key(s, t0, match_horizon)))
        for t in range(len(s) if t0 is None else t0):
            pool.append((s, t, match_key(s, t, match_horizon)))
    ep_index = {id(s): i for i, s in enumerate(series)}
    draws = [match_controls(cases, pool, K, rng.split(1) if j == 0 else rng.split(1000 + j)) for j in range(n_match)]
    m = draws[0]
    pairs = [pr for d in draws for pr in d.pairs]
    guard = censoring_guard(series)
    flags = []
    if m.unmatched:
        flags.append(f"{len(m.unmatched)} of {len(cases)} cases had no matching control")

    F = _flag_matrix(series)
    case_ep = np.array([ep_index[id(cases[i][0])] for i, _ in pairs], dtype=int)
    case_t = np.array([cases[i][1] for i, _ in pairs], dtype=int)
    ctrl_ep = np.array([ep_index[id(pool[j][0])] for _, j in pairs], dtype=int)
    ctrl_t = np.array([pool[j][1] for _, j in pairs], dtype=int)
    ipw = _ipcw_weights(series, case_ep, case_t, K) if ipcw and len(case_ep) else None

    out = {k: np.full(K, np.nan) for k in ("epr", "p_case", "p_ctrl", "lo", "hi")}
    n_pairs = np.zeros(K, dtype=int)
    defined = np.zeros(K, dtype=bool)
    lagdata = {}
    for k in range(1, K + 1):
        cv = _at(F, case_ep, case_t + k)
        obs = cv >= 0
        n_pairs[k - 1] = round(int(obs.sum()) / n_match)  # per matching
        if not obs.any() or (enforce_guard and k > guard):
            continue
        uv = _at(F, ctrl_ep[obs], ctrl_t[obs] + k).astype(float)
        cvals = cv[obs].astype(float)
        bw = ipw[k - 1, obs] if ipw is not None else np.ones(int(obs.sum()))
        pc = float(np.sum(bw * cvals) / np.sum(bw))
        pu = float(np.mean(uv))
        defined[k - 1] = True
        out["p_case"][k - 1], out["p_ctrl"][k - 1], out["epr"][k - 1] = pc, pu, pc - pu
        out["lo"][k - 1] = out["hi"][k - 1] = pc - pu
        lagdata[k] = (cvals, case_ep[obs], bw, uv, ctrl_ep[obs])
    if n_boot > 0 and lagdata:
        boot = {k: [] for k in lagdata}
        for W in _boot_blocks(len(series), n_boot, rng.split(2)):
            for k, (cvals, cep, bw, uv, uep) in lagdata.items():
                boot[k].append(_weighted_rate(cvals, cep, W, bw) - _weighted_rate(uv, uep, W, np.ones(len(uv))))
        for k, chunks in boot.items():
            out["lo"][k - 1], out["hi"][k - 1] = _percentile_ci(np.concatenate(chunks), float(out["epr"][k - 1]), alpha)
    if enforce_guard and K > guard:
        flags.append(f"lags above the censoring guard ({guard}) are undefined")
    return EprCurve(np.arange(1, K + 1), out["epr"], out["p_case"], out["p_ctrl"], n_pairs, n_pairs.copy(),
                    out["lo"], out["hi"], defined, guard, len(cases), len(m.unmatched), flags)


def auc_epr(curve: EprCurve, W: int) -> float:
    """Sum of EPR_k over k = 1..W."""
    if W < 1 or W > len(curve.lags):
        raise ValueError(f"W must be in 1..{len(curve.lags)}")
    if not curve.defined[:W].all():
        bad = [int(k) for k, d in zip(curve.lags[:W], curve.defined[:W]) if not d]
        raise UndefinedMetricError(f"EPR undefined at lags {bad}")
    return float(np.sum(curve.epr[:W]))


def ols_slope(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) < 2:
        raise UndefinedMetricError("a slope needs at least two points")
    xc = x - x.mean()
    den = float(xc @ xc)
    if den == 0:
        raise UndefinedMetricError("a slope needs two distinct x values")
    return float(xc @ (y - y.mean()) / den)


def epr_slope(curve: EprCurve) -> float:
    return ols_slope(curve.lags[curve.defined], curve.epr[curve.defined])


# ---------------------------------------------------------------------------
# PAC
# ---------------------------------------------------------------------------


def _case_arrays(series):
    ep, t0 = [], []
    for i, s in enumerate(series):
        t = first_error_time(s)
        if t is not None:
            ep.append(i)
            t0.append(t)
    return np.array(ep, dtype=int), np.array(t0, dtype=int)


def post_error_risk(episodes, K: int) -> tuple[np.ndarray, np.ndarray]:
    """``q(d) = P(e_{t0+d} = 1 | first error at t0)`` for d = 1..K, with counts."""
    series = as_series(episodes)
    if not series:
        raise UndefinedMetricError("no episodes")
    F = _flag_matrix(series)
    ep, t0 = _case_arrays(series)
    q = np.full(K, np.nan)
    n = np.zeros(K, dtype=int)
    for d in range(1, K + 1):
        v = _at(F, ep, t0 + d) if len(ep) else np.zeros(0)
        obs = v >= 0
        n[d - 1] = int(obs.sum())
        if obs.any():
            q[d - 1] = float(v[obs].mean())
    return q, n


def pac_slope_from_q(q, deltas, eps_reg: float = DEFAULT_EPS_REG) -> float:
    """Negative OLS slope of ``ln(q + eps_reg)`` on ``deltas``."""
    q = np.asarray(q, dtype=float)
    d = np.asarray(deltas, dtype=float)
    ok = np.isfinite(q)
    if not ok.any() or np.all(q[ok] == 0):
        raise UndefinedMetricError("post-error risk is zero or unobserved over the range")
    return -ols_slope(d[ok], np.log(q[ok] + eps_reg))


def pac_slope(episodes, delta_range: tuple[int, int] = (1, 10), eps_reg: float = DEFAULT_EPS_REG) -> float:
    """Decay rate of post-error risk; larger means faster recovery."""
    lo, hi = delta_range
    if lo < 1 or hi <= lo:
        raise ValueError("delta_range must satisfy 1 <= lo < hi")
    q, _ = post_error_risk(episodes, hi)
    return pac_slope_from_q(q[lo - 1 : hi], np.arange(lo, hi + 1), eps_reg)


@dataclass
class PacResult:
    lags: np.ndarray
    q: np.ndarray
    ratio: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    n: np.ndarray
    slope: float | None
    fit_range: tuple[int, int]
    eps_reg: float
    auc: dict
    unstable: bool
    flags: list = field(default_factory=list)


def pac_ratio(episodes, K: int, eps_reg: float = DEFAULT_EPS_REG, n_boot: int = DEFAULT_N_BOOT,
              rng: Rng | None = None, alpha: float = 0.05) -> PacResult:
    """PAC_k = (q(k) + eps) / (q(1) + eps), AUC-PAC_W = mean of PAC_1..PAC_W."""
    if K < 1:
        raise ValueError("K must be >= 1")
    rng = rng or Rng(0)
    series = as_series(episodes)
    q, n = post_error_risk(series, K)
    flags = []
    if not np.isfinite(q[0]):
        raise UndefinedMetricError("q(1) is unobserved: no first error is followed by another step")
    unstable = bool(q[0] < eps_reg)
    if unstable:
        flags.append("q(1) below the eps_reg floor; ratios are unstable")
    ratio = (q + eps_reg) / (q[0] + eps_reg)
    lo = ratio.copy()
    hi = ratio.copy()
    if n_boot > 0:
        F = _flag_matrix(series)
        ep, t0 = _case_arrays(series)
        lag_obs = []
        for d in range(1, K + 1):
            v = _at(F, ep, t0 + d)
            obs = v >= 0
            lag_obs.append((v[obs].astype(float), ep[obs]))
        blocks = []
        for W in _boot_blocks(len(series), n_boot, rng.split(2)):
            bq = np.full((W.shape[0], K), np.nan)
            for d, (vals, eps_) in enumerate(lag_obs):
                if len(vals):
                    bq[:, d] = _weighted_rate(vals, eps_, W, np.ones(len(vals)))
            blocks.append(bq)
        bq = np.vstack(blocks)
        br = (bq + eps_reg) / (bq[:, :1] + eps_reg)
        for k in range(K):
            if np.isfinite(ratio[k]):
                lo[k], hi[k] = _percentile_ci(br[:, k], float(ratio[k]), alpha)
    auc = {}
    for Wn in (3, 5):
        if Wn <= K and np.all(np.isfinite(ratio[:Wn])):
            auc[Wn] = float(np.mean(ratio[:Wn]))
    try:
        slope = pac_slope_from_q(q, np.arange(1, K + 1), eps_reg) if K >= 2 else None
    except UndefinedMetricError as e:
        slope = None
        flags.append(str(e))
    return PacResult(np.arange(1, K + 1), q, ratio, lo, hi, n, slope, (1, K), eps_reg, auc, unstable, flags)


def auc_pac(result: PacResult, W: int) -> float:
    if W < 1 or W > len(result.lags):
        raise ValueError(f"W must be in 1..{len(result.lags)}")
    if not np.all(np.isfinite(result.ratio[:W])):
        raise UndefinedMetricError(f"PAC undefined within lags 1..{W}")
    return float(np.mean(result.ratio[:W]))
