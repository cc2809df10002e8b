"""Hierarchical predictive correction with contrastive, score and OT terms.

Three token encoders (action, subgoal, trajectory) and a prompt encoder share
one architecture: token table lookup, a position-weighted mean over the non-PAD
tokens (weights ramp from 0.5/n to 1.5/n, so order matters), a tanh MLP head
and L2 normalization. Predictors map level-l embeddings to level l+1. All
parameters live in one flat ``dict[str, ndarray]`` so the optimizer,
checkpoints and finite-difference checks treat them uniformly.

Detach contract: level-(l+1) targets and their negatives are computed from the
current weights but contribute no gradient, so ``L_pred`` at level l only moves
the level-l encoder and the l -> l+1 predictor.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import DegenerateInputError, DimensionError, MlpParams, Rng, mlp_backward, mlp_forward, normalize, normalize_backward
from .negatives import corrupt_many, pool_weights
from .optim import AdamW, warmup_cosine
from .ot import DiscreteMeasure, divergence_grads, sinkhorn_divergence_full
from .score import ScoreNet, score_loss_and_grads
from .trajectory import Trajectory

LEVELS = ("action", "subgoal", "trajectory")
PRED_LEVELS = ("action", "subgoal")  # levels that predict the one above
PAD = 0
CHECKPOINT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    """The loss became non-finite."""


@dataclass(frozen=True)
class HpccConfig:
    vocab_size: int
    dim: int = 32
    hidden: int = 64
    tau: float = 0.1
    eps: float = 0.05
    sigma: float = 0.5
    k_neg: int = 8
    action_window: tuple[int, int] = (4, 1)
    subgoal_window: tuple[int, int] = (12, 4)
    lambda_pred: tuple[float, float] = (0.5, 0.5)
    lambda_score: tuple[float, float] = (0.2, 0.2)
    lambda_sinkhorn: float = 0.1
    anchors: int = 4
    sinkhorn_points: int = 16
    sinkhorn_batch: int = 4
    sinkhorn_tol: float = 1e-6

    def __post_init__(self):
        for name in ("action_window", "subgoal_window", "lambda_pred", "lambda_score"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.vocab_size < 2 or self.dim < 1 or self.hidden < 1:
            raise ValueError("vocab_size >= 2, dim >= 1 and hidden >= 1 required")
        if self.tau <= 0 or self.eps <= 0 or self.sigma <= 0:
            raise ValueError("tau, eps and sigma must be positive")
        if self.k_neg < 1:
            raise ValueError("k_neg must be >= 1")
        for L, s in (self.action_window, self.subgoal_window):
            if L < 1 or s < 1:
                raise ValueError("window length and stride must be >= 1")

    def window(self, level: str) -> tuple[int, int] | None:
        if level == "action":
            return self.action_window
        if level == "subgoal":
            return self.subgoal_window
        if level == "trajectory":
            return None
        raise ValueError(f"unknown level {level!r}")


# ---------------------------------------------------------------------------
# Segmentation
# ---------------------------------------------------------------------------


def window_spans(T: int, window_len: int | None, stride: int | None) -> list[tuple[int, int]]:
    """Step spans ``[start, end)``; full windows plus one padded tail if needed.

    Yields ``ceil((T - L) / s) + 1`` windows when ``T >= L``; a single padded
    window when ``T < L``; the whole range when ``window_len`` is None.
    """
    if T < 1:
        raise DegenerateInputError("cannot segment an empty trajectory")
    if window_len is None:
        return [(0, T)]
    if T <= window_len:
        return [(0, T)]
    full = (T - window_len) // stride + 1
    spans = [(k * stride, k * stride + window_len) for k in range(full)]
    if spans[-1][1] < T and full * stride < T:
        spans.append((full * stride, T))
    return spans


@dataclass(frozen=True)
class Segments:
    """Windows of one level, as a PAD-padded token matrix."""

    level: str
    spans: tuple[tuple[int, int], ...]
    tokens: np.ndarray

    def __len__(self) -> int:
        return len(self.spans)


def _step_tuples(traj: Trajectory):
    return [(s.state_tokens, s.action, s.subgoal_id) for s in traj.steps]


def _flatten(steps) -> list[int]:
    out: list[int] = []
    for obs, act, _ in steps:
        out.extend(obs)
        out.append(act)
    return out


def pad_tokens(seqs: Sequence[Sequence[int]]) -> np.ndarray:
    if not seqs:
        raise DegenerateInputError("no token sequences")
    L = max(len(s) for s in seqs)
    out = np.full((len(seqs), max(L, 1)), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def window_segments(traj: Trajectory, level: str, config: HpccConfig | None = None,
                    window_len: int | None = None, stride: int | None = None) -> Segments:
    """Segment ``traj`` into the windows of ``level``."""
    if level not in LEVELS:
        raise ValueError(f"unknown level {level!r}")
    if window_len is None and level != "trajectory":
        window_len, stride = (config or HpccConfig(vocab_size=2)).window(level)
    spans = window_spans(len(traj), window_len, stride)
    steps = _step_tuples(traj)
    toks = pad_tokens([_flatten(steps[a:b]) for a, b in spans])
    return Segments(level, tuple(spans), toks)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

_MLP_KEYS = ("W1", "b1", "W2", "b2")


def _mlp(params: dict, prefix: str) -> MlpParams:
    return MlpParams(*(params[f"{prefix}.{k}"] for k in _MLP_KEYS))


def _put_mlp(out: dict, prefix: str, m: MlpParams):
    for k, v in zip(_MLP_KEYS, m.arrays()):
        out[f"{prefix}.{k}"] = v


def _add_mlp(grads: dict, prefix: str, g: MlpParams):
    for k, v in zip(_MLP_KEYS, g.arrays()):
        grads[f"{prefix}.{k}"] = grads[f"{prefix}.{k}"] + v


ENCODERS = LEVELS + ("prompt",)


@dataclass
class HpccState:
    config: HpccConfig
    params: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def init(cls, config: HpccConfig, rng: Rng) -> "HpccState":
        d, h = config.dim, config.hidden
        p: dict[str, np.ndarray] = {}
        for i, name in enumerate(ENCODERS):
            r = rng.split(1, i)
            p[f"enc.{name}.table"] = r.split(0).normal((config.vocab_size, d))
            _put_mlp(p, f"enc.{name}.head", MlpParams.init(d, h, d, r.split(1)))
        for i, lvl in enumerate(PRED_LEVELS):
            _put_mlp(p, f"pred.{lvl}", MlpParams.init(d, h, d, rng.split(2, i)))
            _put_mlp(p, f"score.{lvl}", MlpParams.init(2 * d, h, d, rng.split(3, i)))
        return cls(config, p)

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def score_net(self, level: str) -> ScoreNet:
        return ScoreNet(_mlp(self.params, f"score.{level}"), self.config.sigma)

    def copy(self) -> "HpccState":
        return HpccState(self.config, {k: v.copy() for k, v in self.params.items()}, self.step)


# ---------------------------------------------------------------------------
# Encoders
# ---------------------------------------------------------------------------


@dataclass
class _EncCache:
    name: str
    tokens: np.ndarray
    mask: np.ndarray
    weights: np.ndarray
    x: np.ndarray
    h: np.ndarray


def _pool_weights(tokens: np.ndarray):
    mask = tokens != PAD
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        raise DegenerateInputError("segment has no non-PAD tokens")
    weights = np.zeros(tokens.shape)
    for i, c in enumerate(counts):
        weights[i, np.flatnonzero(mask[i])] = pool_weights(int(c))
    return mask, weights


def _encode(params: dict, name: str, tokens: np.ndarray, keep: bool = False):
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    table = params[f"enc.{name}.table"]
    if tokens.size and (tokens.min() < 0 or tokens.max() >= table.shape[0]):
        raise DimensionError(f"token id out of range for vocabulary of {table.shape[0]}")
    mask, weights = _pool_weights(tokens)
    x = np.einsum("nl,nld->nd", weights, table[tokens])
    h = mlp_forward(_mlp(params, f"enc.{name}.head"), x)
    out = normalize(h)
    return out, (_EncCache(name, tokens, mask, weights, x, h) if keep else None)


def _encode_backward(params: dict, cache: _EncCache, dout: np.ndarray, grads: dict):
    dh = normalize_backward(cache.h, dout)
    g, dx = mlp_backward(_mlp(params, f"enc.{cache.name}.head"), cache.x, dh)
    _add_mlp(grads, f"enc.{cache.name}.head", g)
    dE = cache.weights[:, :, None] * dx[:, None, :]
    np.add.at(grads[f"enc.{cache.name}.table"], cache.tokens[cache.mask], dE[cache.mask])


def encode_tokens(state: HpccState, encoder: str, tokens) -> np.ndarray:
    """Unit embeddings of each row of a PAD-padded token matrix."""
    if encoder not in ENCODERS:
        raise ValueError(f"unknown encoder {encoder!r}")
    return _encode(state.params, encoder, tokens)[0]


def encode_level(state: HpccState, segments: Segments) -> np.ndarray:
    return encode_tokens(state, segments.level, segments.tokens)


def encode_prompt(state: HpccState, prompt_tokens: Sequence[int]) -> np.ndarray:
    """Single prompt embedding ``p``."""
    return encode_tokens(state, "prompt", pad_tokens([list(prompt_tokens)]))[0]


def encode_prompt_tokens(state: HpccState, prompt_tokens: Sequence[int]) -> np.ndarray:
    """One embedding per prompt token; the support of the prompt measure."""
    return encode_tokens(state, "prompt", np.asarray(list(prompt_tokens), dtype=np.int64)[:, None])


def predict_next_level(state: HpccState, level: str, z: np.ndarray) -> np.ndarray:
    """Predicted level-(l+1) embedding, unit norm."""
    if level not in PRED_LEVELS:
        raise ValueError(f"level {level!r} has no level above it")
    return normalize(mlp_forward(_mlp(state.params, f"pred.{level}"), np.asarray(z, dtype=float)))


def target_span(traj_len: int, level: str, span: tuple[int, int], config: HpccConfig) -> tuple[int, int]:
    """Span of the level-(l+1) window that a level-l window at ``span`` predicts.

    The first upper window containing the whole lower window, else the one
    containing its last step.
    """
    upper = {"action": "subgoal", "subgoal": "trajectory"}[level]
    win = config.window(upper)
    spans = window_spans(traj_len, *(win if win else (None, None)))
    a, b = span
    for s in spans:
        if s[0] <= a and b <= s[1]:
            return s
    for s in spans:
        if s[0] <= b - 1 < s[1]:
            return s
    return spans[-1]


def generate_negatives(traj: Trajectory, level: str, k: int, rng: Rng,
                       span: tuple[int, int] | None = None, config: HpccConfig | None = None):
    """``k`` corrupted copies of one ``level`` segment of ``traj``.

    Returns ``(classes, Segments)``; the Segments rows are the negatives.
    Raises CorruptionError for single-step segments.
    """
    if level not in LEVELS:
        raise ValueError(f"unknown level {level!r}")
    steps = _step_tuples(traj)
    if span is None:
        if level == "trajectory":
            span = (0, len(steps))
        else:
            L, _ = (config or HpccConfig(vocab_size=2)).window(level)
            span = (0, min(L, len(steps)))
    classes, negs = corrupt_many(steps[span[0] : span[1]], k, rng)
    return classes, Segments(level, tuple([span] * k), pad_tokens([_flatten(n) for n in negs]))


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def infonce_batch(zh: np.ndarray, C: np.ndarray, tau: float):
    """InfoNCE with the positive at column 0 of ``C`` (n, 1+k, d).

    Returns per-row losses and gradients w.r.t. ``zh`` and ``C``.
    """
    zh = np.atleast_2d(zh)
    nz = np.linalg.norm(zh, axis=-1)
    nc = np.linalg.norm(C, axis=-1)
    if np.any(nz == 0) or np.any(nc == 0):
        raise DegenerateInputError("zero vector in InfoNCE")
    u = zh / nz[:, None]
    V = C / nc[..., None]
    cos = np.einsum("nd,nkd->nk", u, V)
    s = cos / tau
    m = s.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(s - m).sum(axis=1))
    loss = lse - s[:, 0]
    w = np.exp(s - lse[:, None])
    w[:, 0] -= 1.0
    ds = w / tau
    du = np.einsum("nk,nkd->nd", ds, V)
    dV = ds[:, :, None] * u[:, None, :]
    dzh = (du - np.sum(du * u, axis=1, keepdims=True) * u) / nz[:, None]
    dC = (dV - np.sum(dV * V, axis=2, keepdims=True) * V) / nc[..., None]
    return loss, dzh, dC


def infonce_loss(z_hat, z_pos, z_negs, tau: float = 0.1) -> float:
    C = np.vstack([np.asarray(z_pos, dtype=float)[None], np.atleast_2d(np.asarray(z_negs, dtype=float))])
    return float(infonce_batch(np.asarray(z_hat, dtype=float)[None], C[None], tau)[0][0])


def infonce_grad(z_hat, z_pos, z_negs, tau: float = 0.1):
    """Gradients w.r.t. ``(z_hat, z_pos, z_negs)``; training uses only the first."""
    C = np.vstack([np.asarray(z_pos, dtype=float)[None], np.atleast_2d(np.asarray(z_negs, dtype=float))])
    _, dzh, dC = infonce_batch(np.asarray(z_hat, dtype=float)[None], C[None], tau)
    return dzh[0], dC[0, 0], dC[0, 1:]


@dataclass
class LossResult:
    loss: float
    grads: dict[str, np.ndarray]
    parts: dict[str, float] = field(default_factory=dict)


def _choose(gen, n: int, k: int) -> list[int]:
    return sorted(gen.choice(n, size=k, replace=False).tolist()) if n > k else list(range(n))


def total_loss(state: HpccState, batch: Sequence[Trajectory], rng: Rng,
               weights: dict | None = None, target_params: dict | None = None) -> LossResult:
    """Weighted objective over a batch of trajectories, with gradients.

    ``weights`` may override ``pred_action``, ``pred_subgoal``,
    ``score_action``, ``score_subgoal`` and ``sinkhorn``. Terms with weight
    zero are not evaluated. ``target_params`` (default: the live parameters)
    computes the detached targets; pinning it makes the returned gradient the
    exact derivative of the returned loss.
    """
    cfg = state.config
    P = state.params
    TP = P if target_params is None else target_params
    w = {
        "pred_action": cfg.lambda_pred[0], "pred_subgoal": cfg.lambda_pred[1],
        "score_action": cfg.lambda_score[0], "score_subgoal": cfg.lambda_score[1],
        "sinkhorn": cfg.lambda_sinkhorn,
    }
    if weights:
        unknown = set(weights) - set(w)
        if unknown:
            raise ValueError(f"unknown loss weights {sorted(unknown)}")
        w.update(weights)
    batch = [t for t in batch if len(t) > 0]
    if not batch:
        raise DegenerateInputError("batch has no non-empty trajectories")

    gen = rng.split(0).generator()
    # anchors[level]: token lists; owner[level]: trajectory index per anchor
    anchor_toks = {lvl: [] for lvl in PRED_LEVELS}
    owner = {lvl: [] for lvl in PRED_LEVELS}
    pred_rows = {lvl: [] for lvl in PRED_LEVELS}  # (anchor idx, [pos, negs] token lists)
    sk_rows = []  # (traj idx, first row in the extra action batch, count)
    extra_action: list[list[int]] = []
    need_pred = {lvl: w[f"pred_{lvl}"] != 0 for lvl in PRED_LEVELS}
    need_score = {lvl: w[f"score_{lvl}"] != 0 for lvl in PRED_LEVELS}
    sk_set = set(_choose(gen, len(batch), cfg.sinkhorn_batch)) if w["sinkhorn"] != 0 else set()

    for b, traj in enumerate(batch):
        steps = _step_tuples(traj)
        T = len(steps)
        traj_targets = None
        for li, lvl in enumerate(PRED_LEVELS):
            if not (need_pred[lvl] or need_score[lvl]):
                continue
            spans = window_spans(T, *cfg.window(lvl))
            for j in _choose(gen, len(spans), cfg.anchors):
                a, e = spans[j]
                idx = len(anchor_toks[lvl])
                anchor_toks[lvl].append(_flatten(steps[a:e]))
                owner[lvl].append(b)
                if not need_pred[lvl]:
                    continue
                ta, te = target_span(T, lvl, (a, e), cfg)
                if te - ta < 2:
                    continue
                if lvl == "subgoal" and traj_targets is not None:
                    pred_rows[lvl].append((idx, traj_targets))
                    continue
                _, negs = corrupt_many(steps[ta:te], cfg.k_neg, rng.split(1, b, li, j))
                rows = [_flatten(steps[ta:te])] + [_flatten(n) for n in negs]
                if lvl == "subgoal":
                    traj_targets = rows
                pred_rows[lvl].append((idx, rows))
        if b in sk_set:
            spans = window_spans(T, *cfg.action_window)
            pick = _choose(gen, len(spans), cfg.sinkhorn_points)
            sk_rows.append((b, len(extra_action), len(pick)))
            extra_action.extend(_flatten(steps[spans[j][0] : spans[j][1]]) for j in pick)

    grads = state.zeros_like()
    parts: dict[str, float] = {}
    total = 0.0

    # Level embeddings with caches; action anchors and Sinkhorn windows share one pass.
    Z, caches, dZ = {}, {}, {}
    for lvl in PRED_LEVELS:
        rows = anchor_toks[lvl] + (extra_action if lvl == "action" else [])
        if rows:
            Z[lvl], caches[lvl] = _encode(P, lvl, pad_tokens(rows), keep=True)
            dZ[lvl] = np.zeros_like(Z[lvl])

    uses_prompt = any(need_score.values()) or sk_rows
    if uses_prompt:
        prompts = pad_tokens([list(t.prompt_tokens) for t in batch])
        Pemb, p_cache = _encode(P, "prompt", prompts, keep=True)
        dP = np.zeros_like(Pemb)

    upper = {"action": "subgoal", "subgoal": "trajectory"}
    for lvl in PRED_LEVELS:
        if not need_pred[lvl] or not pred_rows[lvl]:
            continue
        idx = np.array([i for i, _ in pred_rows[lvl]])
        flat = [r for _, rows in pred_rows[lvl] for r in rows]
        T_emb = _encode(TP, upper[lvl], pad_tokens(flat))[0]  # detached targets
        C = T_emb.reshape(len(idx), 1 + cfg.k_neg, -1)
        z = Z[lvl][idx]
        pm = _mlp(P, f"pred.{lvl}")
        h = mlp_forward(pm, z)
        zh = normalize(h)
        losses, dzh, _ = infonce_batch(zh, C, cfg.tau)
        val = float(losses.mean())
        parts[f"pred_{lvl}"] = val
        total += w[f"pred_{lvl}"] * val
        dh = normalize_backward(h, w[f"pred_{lvl}"] * dzh / len(idx))
        g, dz = mlp_backward(pm, z, dh)
        _add_mlp(grads, f"pred.{lvl}", g)
        np.add.at(dZ[lvl], idx, dz)

    for lvl in PRED_LEVELS:
        n = len(anchor_toks[lvl])
        if not need_score[lvl] or n == 0:
            continue
        own = np.array(owner[lvl])
        net = state.score_net(lvl)
        val, g, dz, dp = score_loss_and_grads(net, Z[lvl][:n], Pemb[own], rng.split(2, PRED_LEVELS.index(lvl)))
        parts[f"score_{lvl}"] = val
        total += w[f"score_{lvl}"] * val
        _add_mlp(grads, f"score.{lvl}", g.scale(w[f"score_{lvl}"]))
        dZ[lvl][:n] += w[f"score_{lvl}"] * dz
        np.add.at(dP, own, w[f"score_{lvl}"] * dp)

    if sk_rows:
        n_anchor = len(anchor_toks["action"])
        vals = []
        for b, start, cnt in sk_rows:
            X = Z["action"][n_anchor + start : n_anchor + start + cnt]
            ptoks = np.asarray(batch[b].prompt_tokens, dtype=np.int64)[:, None]
            Y, y_cache = _encode(P, "prompt", ptoks, keep=True)
            mu, nu = DiscreteMeasure.uniform(X), DiscreteMeasure.uniform(Y)
            res = sinkhorn_divergence_full(mu, nu, cfg.eps, tol=cfg.sinkhorn_tol)
            gx, gy = divergence_grads(res, mu, nu)
            vals.append(res.value)
            scale = w["sinkhorn"] / len(sk_rows)
            dZ["action"][n_anchor + start : n_anchor + start + cnt] += scale * gx
            _encode_backward(P, y_cache, scale * gy, grads)
        val = float(np.mean(vals))
        parts["sinkhorn"] = val
        total += w["sinkhorn"] * val

    for lvl in PRED_LEVELS:
        if lvl in caches:
            _encode_backward(P, caches[lvl], dZ[lvl], grads)
    if uses_prompt:
        _encode_backward(P, p_cache, dP, grads)
    return LossResult(float(total), grads, parts)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

STAGES = ("pretrain", "joint", "both")


def _stage_plan(stage: str, steps: int, pretrain_steps: int | None):
    if stage not in STAGES:
        raise ValueError(f"stage must be one of {STAGES}")
    if stage == "pretrain":
        return [("pretrain", steps)]
    if stage == "joint":
        return [("joint", steps)]
    n1 = steps // 2 if pretrain_steps is None else pretrain_steps
    return [("pretrain", n1), ("joint", steps - n1)]


PRETRAIN_WEIGHTS = {"score_action": 0.0, "score_subgoal": 0.0, "sinkhorn": 0.0}


def train(state: HpccState, data: Sequence[Trajectory], steps: int, rng: Rng, lr: float = 1e-4,
          batch_size: int = 32, stage: str = "both", pretrain_steps: int | None = None,
          warmup: int = 1000, weight_decay: float = 0.01, callback=None):
    """Two-stage AdamW training; returns ``(state, history)``.

    Stage ``pretrain`` optimizes only the predictive terms, ``joint`` the full
    objective. Each stage gets its own optimizer and warm-up + cosine
    schedule; the warm-up is capped at a tenth of the stage length.
    """
    data = [t for t in data if len(t) > 0]
    if not data:
        raise DegenerateInputError("no non-empty trajectories to train on")
    if steps < 0:
        raise ValueError("steps must be nonnegative")
    state = state.copy()
    history = []
    for si, (name, n) in enumerate(_stage_plan(stage, steps, pretrain_steps)):
        if n <= 0:
            continue
        opt = AdamW(state.params, lr=lr, weight_decay=weight_decay, decay_mask=lambda k: not k.endswith(("b1", "b2")))
        wu = min(warmup, max(1, n // 10))
        weights = PRETRAIN_WEIGHTS if name == "pretrain" else None
        for i in range(n):
            srng = rng.split(si, i)
            gen = srng.split(0).generator()
            idx = gen.choice(len(data), size=min(batch_size, len(data)), replace=False)
            res = total_loss(state, [data[j] for j in idx], srng.split(1), weights)
            if not math.isfinite(res.loss) or any(not np.all(np.isfinite(g)) for g in res.grads.values()):
                raise TrainingDivergedError(
                    f"non-finite loss at stage {name} step {i}: total={res.loss}, parts={res.parts}"
                )
            state.params = opt.step(state.params, res.grads, warmup_cosine(i, n, wu, lr))
            state.step += 1
            rec = {"step": state.step, "stage": name, "loss": res.loss, **res.parts}
            history.append(rec)
            if callback:
                callback(rec)
    return state, history


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(state: HpccState, path) -> None:
    """npz archive: every tensor under its name plus a JSON header."""
    meta = {"version": CHECKPOINT_VERSION, "config": asdict(state.config), "step": state.step}
    arrays = {f"p/{k}": v for k, v in state.params.items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> HpccState:
    try:
        with np.load(Path(path), allow_pickle=False) as z:
            meta = json.loads(bytes(z["__meta__"]).decode())
            params = {k[2:]: z[k].copy() for k in z.files if k.startswith("p/")}
    except (OSError, ValueError, KeyError) as e:
        raise ValueError(f"unreadable checkpoint {path}: {e}") from e
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint version {meta.get('version')} != {CHECKPOINT_VERSION}")
    state = HpccState(HpccConfig(**meta["config"]), params, int(meta["step"]))
    ref = HpccState.init(state.config, Rng(0)).params
    if ref.keys() != params.keys() or any(ref[k].shape != params[k].shape for k in ref):
        raise ValueError("checkpoint tensors do not match the configuration")
    return state
