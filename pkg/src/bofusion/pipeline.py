"""The two optimization stages wired together, plus the black-box protocol.

Stage 1 (run_hpbo) maximizes the summed normalized validation metrics over a
hyperparameter box with a GP + log-EI loop. The pipeline then retrains once
at the winning hyperparameters while the trainer collects fusion members
along its trajectory, derives normalization windows from the members'
standalone scores, and stage 2 (run_mobo) maximizes Monte-Carlo noisy
hypervolume improvement over simplex fusion coefficients with one GP per
objective.

External trainers and scorers are separate processes speaking
newline-delimited JSON on stdin/stdout:

    request: {"id": int, "role": "trainer", "params": {name: number}}
             {"id": int, "role": "scorer",  "delta": [number, ...]}
    reply:   {"id": int, "ok": true, "objectives": {name: number},
              "convergence_step": int (trainer only)}
             {"id": int, "ok": false, "error": "..."}

Replies must round-trip the request id. A failed or protocol-violating
evaluation is recorded as a penalized all-zero-normalized observation and
the loop continues; only an all-failed history aborts.
"""
from __future__ import annotations

import json
import math
import os
import queue
import subprocess
import sys
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .acquisition import AcqConfig, NehviAcquisition, SimplexDomain, log_ei, optimize_acq
from .core import (
    BoundedParamSpace,
    EvalMeta,
    Observation,
    ObjectiveEntry,
    ObjectiveSpec,
    ParamDim,
    derive_norm_bounds,
    normalize_vector,
    scalarize_sum,
)
from .errors import (
    BofusionError,
    EvaluationFailedError,
    PipelineStageError,
    ProtocolError,
    UsageError,
)
from .fusion import MemberSet, SimplexCoefficients
from .gp import fit_gp
from .pareto import ParetoFront, pareto_front
from . import toybench

DEFAULT_TIMEOUT_S = 600.0
REPORT_SCHEMA = 1

HISTORY_COLUMNS = (
    "stage",
    "eval_index",
    "stage_index",
    "failed",
    "on_front",
    "x",
    "raw",
    "normalized",
)


def _child_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**31 - 1))


# ---------------------------------------------------------------------------
# Evaluator clients


@dataclass(frozen=True)
class SubprocessSpec:
    cmd: str
    args: tuple[str, ...] = ()
    env: tuple[tuple[str, str], ...] = ()
    timeout_s: float = DEFAULT_TIMEOUT_S


@dataclass(frozen=True)
class EvaluatorHandle:
    """Declarative evaluator description: how to reach it and which role it
    will be asked to play."""

    kind: str  # "in_process" | "subprocess"
    role: str  # "trainer" | "scorer"
    subprocess_spec: SubprocessSpec | None = None
    target: object | None = None

    def __post_init__(self):
        if self.kind not in ("in_process", "subprocess"):
            raise ValueError(f"unknown evaluator kind {self.kind!r}")
        if self.role not in ("trainer", "scorer"):
            raise ValueError(f"unknown evaluator role {self.role!r}")
        if self.kind == "subprocess" and self.subprocess_spec is None:
            raise ValueError("subprocess handle needs a SubprocessSpec")
        if self.kind == "in_process" and self.target is None:
            raise ValueError("in-process handle needs a target object")

    def connect(self) -> "_EvaluatorClient":
        if self.kind == "subprocess":
            return SubprocessEvaluator(self.subprocess_spec)
        return InProcessEvaluator(self.target)


@dataclass(frozen=True)
class TrainerResult:
    objectives: dict[str, float]
    convergence_step: int | None


class _EvaluatorClient:
    """Shared request/reply framing over either transport."""

    _next_id: int

    def roundtrip(self, request: dict) -> dict:  # pragma: no cover - interface
        raise NotImplementedError

    def close(self) -> None:
        pass

    def _request(self, payload: dict) -> dict:
        rid = self._next_id
        self._next_id += 1
        reply = blackbox_roundtrip(self, {"id": rid, **payload})
        if not isinstance(reply, dict):
            raise ProtocolError("reply is not a JSON object")
        if reply.get("id") != rid:
            raise ProtocolError(f"reply id {reply.get('id')!r} does not match request id {rid}")
        if not reply.get("ok", False):
            raise EvaluationFailedError(str(reply.get("error", "evaluation refused")))
        objectives = reply.get("objectives")
        if not isinstance(objectives, dict):
            raise ProtocolError("ok reply carries no objectives mapping")
        return reply

    def train(self, params: dict) -> TrainerResult:
        reply = self._request({"role": "trainer", "params": params})
        conv = reply.get("convergence_step")
        return TrainerResult(
            {str(k): float(v) for k, v in reply["objectives"].items()},
            int(conv) if conv is not None else None,
        )

    def score(self, delta) -> dict[str, float]:
        payload = {"role": "scorer", "delta": [float(v) for v in np.asarray(delta, dtype=float)]}
        reply = self._request(payload)
        return {str(k): float(v) for k, v in reply["objectives"].items()}


class InProcessEvaluator(_EvaluatorClient):
    """Wraps an object with .train(params) / .score(delta), presenting the
    same reply framing as a subprocess so both paths share one code path."""

    kind = "in_process"

    def __init__(self, target):
        self.target = target
        self._next_id = 0

    def roundtrip(self, request: dict) -> dict:
        rid = request.get("id")
        role = request.get("role")
        try:
            if role == "trainer":
                out = self.target.train(request.get("params") or {})
                return {
                    "id": rid,
                    "ok": True,
                    "objectives": out["objectives"],
                    "convergence_step": out.get("convergence_step"),
                }
            if role == "scorer":
                return {"id": rid, "ok": True, "objectives": self.target.score(request.get("delta"))}
            return {"id": rid, "ok": False, "error": f"unknown role {role!r}"}
        except EvaluationFailedError as exc:
            return {"id": rid, "ok": False, "error": str(exc)}


class SubprocessEvaluator(_EvaluatorClient):
    """One child process, one in-flight request at a time.

    A timeout or malformed reply kills the child (it will be respawned lazily
    on the next request) so a late reply can never be matched against a
    newer request.
    """

    kind = "subprocess"

    def __init__(self, spec: SubprocessSpec):
        self.spec = spec
        self._proc: subprocess.Popen | None = None
        self._lines: queue.Queue = queue.Queue()
        self._next_id = 0

    def _spawn(self) -> None:
        env = dict(os.environ)
        env.update(dict(self.spec.env))
        self._proc = subprocess.Popen(
            [self.spec.cmd, *self.spec.args],
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.DEVNULL,
            text=True,
            bufsize=1,
            env=env,
        )
        self._lines = queue.Queue()

        def _pump(proc, out):
            for line in proc.stdout:
                out.put(line)
            out.put(None)

        threading.Thread(target=_pump, args=(self._proc, self._lines), daemon=True).start()

    def _kill(self) -> None:
        if self._proc is not None and self._proc.poll() is None:
            self._proc.kill()
            self._proc.wait()
        self._proc = None

    def close(self) -> None:
        self._kill()

    def roundtrip(self, request: dict) -> dict:
        if self._proc is None or self._proc.poll() is not None:
            self._spawn()
        line = json.dumps(request, separators=(",", ":"))
        try:
            self._proc.stdin.write(line + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            self._kill()
            raise ProtocolError(f"evaluator process is gone: {exc}") from None
        try:
            raw = self._lines.get(timeout=self.spec.timeout_s)
        except queue.Empty:
            self._kill()
            raise ProtocolError(f"no reply within {self.spec.timeout_s:g}s") from None
        if raw is None:
            self._kill()
            raise ProtocolError("evaluator closed its stdout")
        try:
            reply = json.loads(raw)
        except json.JSONDecodeError as exc:
            self._kill()
            raise ProtocolError(f"malformed reply line: {exc}") from None
        if not isinstance(reply, dict):
            self._kill()
            raise ProtocolError("reply is not a JSON object")
        return reply


def blackbox_roundtrip(evaluator, request: dict) -> dict:
    """Send one protocol request through an evaluator client, returning the
    raw reply dict (unvalidated beyond JSON well-formedness)."""
    return evaluator.roundtrip(request)


# ---------------------------------------------------------------------------
# Observation plumbing


def _failed_observation(x, spec: ObjectiveSpec, seed, idx, t0) -> Observation:
    return Observation(
        x=np.asarray(x, dtype=float),
        raw=np.full(len(spec), np.nan),
        normalized=np.zeros(len(spec)),
        meta=EvalMeta(seed, idx, int((time.monotonic() - t0) * 1000), failed=True),
    )


def _observe_raws(x, raws_by_name, spec: ObjectiveSpec, seed, idx, t0) -> Observation:
    try:
        raws = np.array([float(raws_by_name[name]) for name in spec.names])
        normalized = normalize_vector(raws, spec)
    except (KeyError, TypeError, ValueError, EvaluationFailedError):
        return _failed_observation(x, spec, seed, idx, t0)
    return Observation(
        x=np.asarray(x, dtype=float),
        raw=raws,
        normalized=normalized,
        meta=EvalMeta(seed, idx, int((time.monotonic() - t0) * 1000), failed=False),
    )


def _params_dict(space: BoundedParamSpace, x) -> dict:
    out = {}
    for i, d in enumerate(space.dims):
        v = float(x[i])
        out[d.name] = int(round(v)) if d.integer else v
    return out


# ---------------------------------------------------------------------------
# Stage 1: hyperparameter BO


@dataclass
class HpboState:
    space: BoundedParamSpace
    spec: ObjectiveSpec
    history: list[Observation]
    best_index: int
    seed: int
    n_init: int
    n_iter: int

    @property
    def scalarized(self) -> np.ndarray:
        return np.array([scalarize_sum(o.normalized, self.spec) for o in self.history])

    @property
    def best_lambda(self) -> np.ndarray:
        return self.history[self.best_index].x


def run_hpbo(
    space: BoundedParamSpace,
    trainer: _EvaluatorClient,
    objectives: ObjectiveSpec,
    n_init: int = 3,
    n_iter: int = 10,
    seed: int = 0,
    *,
    acq_cfg: AcqConfig | None = None,
    gp_restarts: int = 8,
) -> tuple[np.ndarray, HpboState]:
    """GP + log-EI maximization of the summed normalized validation metrics.

    Returns (best lambda, state); the incumbent is the evaluated point with
    the highest scalarized score, ties resolving to the earliest evaluation.
    """
    if n_init < 1 or n_iter < 0:
        raise ValueError("need n_init >= 1 and n_iter >= 0")
    spec = objectives.subset(("metric",))
    base_acq = acq_cfg or AcqConfig()
    rng = np.random.default_rng(seed)
    history: list[Observation] = []

    def evaluate(x_raw):
        t0 = time.monotonic()
        idx = len(history)
        try:
            result = trainer.train(_params_dict(space, x_raw))
            obs = _observe_raws(x_raw, result.objectives, spec, seed, idx, t0)
        except (EvaluationFailedError, ProtocolError):
            obs = _failed_observation(x_raw, spec, seed, idx, t0)
        history.append(obs)

    for x in space.sample(rng, n_init):
        evaluate(x)

    for _ in range(n_iter):
        X_unit = np.stack([space.to_unit(o.x) for o in history])
        y = np.array([scalarize_sum(o.normalized, spec) for o in history])
        model = fit_gp(X_unit, y, seed=_child_seed(rng), restarts=gp_restarts)
        best = float(y.max())

        def acq(x_raw, _m=model, _b=best):
            mu, sig = _m.predict(space.to_unit(x_raw))
            return log_ei(mu, sig, _b)

        cfg = AcqConfig(
            n_restarts=base_acq.n_restarts,
            n_raw_candidates=base_acq.n_raw_candidates,
            n_mc=base_acq.n_mc,
            seed=_child_seed(rng),
            local_steps=base_acq.local_steps,
        )
        evaluate(optimize_acq(acq, space, cfg))

    if all(o.meta.failed for o in history):
        raise EvaluationFailedError("every trainer evaluation failed")
    scal = [scalarize_sum(o.normalized, spec) for o in history]
    best_index = int(np.argmax(scal))
    state = HpboState(space, spec, history, best_index, seed, n_init, n_iter)
    return state.best_lambda, state


# ---------------------------------------------------------------------------
# Stage 2: multi-objective BO over fusion coefficients


@dataclass
class MoboState:
    n_members: int
    spec: ObjectiveSpec
    history: list[Observation]
    front: ParetoFront
    seed: int
    n_iter: int
    best_member_id: int | None

    @property
    def ref(self) -> np.ndarray:
        return np.zeros(len(self.spec))


def _initial_deltas(n: int, count: int, best_member_id, rng) -> list[np.ndarray]:
    deltas = [np.full(n, 1.0 / n)]
    if best_member_id is not None:
        hot = np.zeros(n)
        hot[int(best_member_id)] = 1.0
        deltas.append(hot)
        while len(deltas) < count:
            deltas.append(rng.dirichlet(np.ones(n)))
    else:
        # Standalone qualities unknown: cover every one-hot so the best
        # member is guaranteed to enter the history anyway.
        for i in range(n):
            hot = np.zeros(n)
            hot[i] = 1.0
            deltas.append(hot)
        while len(deltas) < count:
            deltas.append(rng.dirichlet(np.ones(n)))
    return deltas[:count]


def run_mobo(
    members: MemberSet | int,
    scorer: _EvaluatorClient,
    spec: ObjectiveSpec,
    n_iter: int | None = None,
    seed: int = 0,
    *,
    best_member_id: int | None = None,
    acq_cfg: AcqConfig | None = None,
    gp_restarts: int = 8,
) -> tuple[SimplexCoefficients, MoboState]:
    """MC noisy-EHVI loop over the fusion simplex.

    The initial design holds |members| + 1 points: the uniform average, the
    one-hot of the best member (all one-hots when no best id is supplied),
    and Dirichlet(1, ..., 1) fill. Exactly n_iter acquisition iterations
    follow (default 5 * |members|).
    """
    n = len(members) if isinstance(members, MemberSet) else int(members)
    if n < 1:
        raise ValueError("need at least one member")
    if n_iter is None:
        n_iter = 5 * n
    if n_iter < 0:
        raise ValueError("n_iter must be >= 0")
    base_acq = acq_cfg or AcqConfig()
    rng = np.random.default_rng(seed)
    history: list[Observation] = []

    def evaluate(delta):
        t0 = time.monotonic()
        idx = len(history)
        try:
            raws = scorer.score(delta)
            obs = _observe_raws(delta, raws, spec, seed, idx, t0)
        except (EvaluationFailedError, ProtocolError):
            obs = _failed_observation(delta, spec, seed, idx, t0)
        history.append(obs)

    for delta in _initial_deltas(n, n + 1, best_member_id, rng):
        evaluate(delta)

    for _ in range(n_iter):
        X = np.stack([o.x for o in history])
        Y = np.stack([o.normalized for o in history])
        models = [
            fit_gp(X, Y[:, k], seed=_child_seed(rng), restarts=gp_restarts)
            for k in range(len(spec))
        ]
        cfg = AcqConfig(
            n_restarts=base_acq.n_restarts,
            n_raw_candidates=base_acq.n_raw_candidates,
            n_mc=base_acq.n_mc,
            seed=_child_seed(rng),
            local_steps=base_acq.local_steps,
        )
        acq = NehviAcquisition(models, X, cfg)
        evaluate(optimize_acq(acq, SimplexDomain(n), cfg))

    if all(o.meta.failed for o in history):
        raise EvaluationFailedError("every scorer evaluation failed")
    front = pareto_front(
        np.stack([o.normalized for o in history]),
        ids=[o.meta.eval_index for o in history],
    )
    state = MoboState(n, spec, history, front, seed, n_iter, best_member_id)
    return select_best_delta(state), state


def select_best_delta(state: MoboState) -> SimplexCoefficients:
    """The evaluated front point maximizing the summed normalized objectives
    (ties to the earliest evaluation); falls back to the whole history when
    clipping emptied the front."""
    ids = list(state.front.ids) or [o.meta.eval_index for o in state.history]
    best_id = max(
        ids,
        key=lambda i: (scalarize_sum(state.history[i].normalized, state.spec), -i),
    )
    x = state.history[best_id].x
    return SimplexCoefficients(x / x.sum())


# ---------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class PipelineConfig:
    space: BoundedParamSpace
    objectives: ObjectiveSpec
    n_members: int = 15
    n_init: int = 3
    hpbo_iters: int = 10
    mobo_iters_per_member: int = 5
    trainer: dict = field(default_factory=dict)
    scorer: dict = field(default_factory=dict)
    proxy_trainer: dict | None = None
    fixed_params: dict = field(default_factory=dict)
    acq: AcqConfig = AcqConfig()
    gp_restarts: int = 8
    learned_steps: int = 100
    learned_lr: float = 0.1

    def __post_init__(self):
        if self.n_members < 1:
            raise UsageError("n_members must be >= 1")
        losses = [e for e in self.objectives.entries if e.kind == "loss"]
        if len(losses) != 1:
            raise UsageError("pipeline objectives need exactly one loss entry")
        if not any(e.kind == "metric" for e in self.objectives.entries):
            raise UsageError("pipeline objectives need at least one metric entry")


def _parse_objective(entry: dict) -> ObjectiveEntry:
    return ObjectiveEntry(
        name=str(entry["name"]),
        direction=str(entry["direction"]),
        norm_min=float(entry.get("norm_min", 0.0)),
        norm_max=float(entry.get("norm_max", 1.0)),
        kind=str(entry["kind"]),
    )


def parse_config(data: dict) -> PipelineConfig:
    try:
        space = BoundedParamSpace(tuple(
            ParamDim(
                name=str(d["name"]),
                lower=float(d["lower"]),
                upper=float(d["upper"]),
                scale=str(d.get("scale", "linear")),
                integer=bool(d.get("integer", False)),
            )
            for d in data["space"]
        ))
        objectives = ObjectiveSpec(tuple(_parse_objective(e) for e in data["objectives"]))
        budgets = data.get("budgets", {})
        acq_data = data.get("acq", {})
        acq = AcqConfig(
            n_restarts=int(acq_data.get("n_restarts", 4)),
            n_raw_candidates=int(acq_data.get("n_raw_candidates", 128)),
            n_mc=int(acq_data.get("n_mc", 64)),
            local_steps=int(acq_data.get("local_steps", 2)),
        )
        learned = data.get("learned_swa", {})
        return PipelineConfig(
            space=space,
            objectives=objectives,
            n_members=int(data.get("n_members", 15)),
            n_init=int(budgets.get("n_init", 3)),
            hpbo_iters=int(budgets.get("hpbo_iters", 10)),
            mobo_iters_per_member=int(budgets.get("mobo_iters_per_member", 5)),
            trainer=dict(data.get("trainer", {})),
            scorer=dict(data.get("scorer", {})),
            proxy_trainer=dict(data["proxy_trainer"]) if data.get("proxy_trainer") else None,
            fixed_params=dict(data.get("fixed_params", {})),
            acq=acq,
            gp_restarts=int(data.get("gp_restarts", 8)),
            learned_steps=int(learned.get("steps", 100)),
            learned_lr=float(learned.get("lr", 0.1)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"bad config: {exc}") from None


def load_config(path: str) -> PipelineConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config is not valid JSON: {exc}") from None
    return parse_config(data)


def build_evaluator(block: dict, *, n_members: int | None = None, role: str = "scorer"):
    """Construct an evaluator client from one config block.

    Subprocess form: {"cmd": ..., "args": [...], "env": {...}, "timeout_s": ...}
    Builtin form:    {"builtin": "toy" | "landscape", "seed": ..., ...}
    """
    if not block:
        raise UsageError("empty evaluator config block")
    if "cmd" in block:
        spec = SubprocessSpec(
            cmd=str(block["cmd"]),
            args=tuple(str(a) for a in block.get("args", [])),
            env=tuple((str(k), str(v)) for k, v in block.get("env", {}).items()),
            timeout_s=float(block.get("timeout_s", DEFAULT_TIMEOUT_S)),
        )
        return EvaluatorHandle("subprocess", role, subprocess_spec=spec).connect()
    builtin = block.get("builtin")
    if builtin == "toy":
        kwargs = {
            k: block[k]
            for k in ("dim", "n_train", "n_val", "n_heldout", "p_pos", "separation",
                      "default_steps", "default_batch_size")
            if k in block
        }
        target = toybench.ToyEvaluator(
            seed=int(block.get("seed", 0)),
            n_members=int(block.get("n_members", n_members or 15)),
            **kwargs,
        )
    elif builtin == "landscape":
        kwargs = {
            k: block[k]
            for k in ("dim", "offset", "ruggedness", "member_spread")
            if k in block
        }
        target = toybench.LandscapeEvaluator.from_seed(
            int(block.get("seed", 0)),
            n_members=int(block.get("n_members", n_members or 5)),
            **kwargs,
        )
    else:
        raise UsageError(f"evaluator config needs 'cmd' or a known 'builtin', got {block!r}")
    return EvaluatorHandle("in_process", role, target=target).connect()


def _build_clients(config: PipelineConfig):
    """Trainer/scorer/proxy clients; identical blocks share one client so a
    trainer's collected members are visible to its scorer side."""
    cache: dict[str, object] = {}

    def get(block, role):
        if not block:
            raise UsageError(f"missing evaluator config for role {role!r}")
        key = json.dumps(block, sort_keys=True)
        if key not in cache:
            cache[key] = build_evaluator(block, n_members=config.n_members, role=role)
        return cache[key]

    trainer = get(config.trainer, "trainer")
    scorer = get(config.scorer, "scorer")
    proxy = get(config.proxy_trainer, "trainer") if config.proxy_trainer else None
    return trainer, scorer, proxy, list(cache.values())


# ---------------------------------------------------------------------------
# History serialization


def _fmt_vec(v) -> str:
    return ";".join(repr(float(x)) for x in np.asarray(v, dtype=float))


def history_rows(stage: str, history: Sequence[Observation], start_index: int, front_ids=frozenset()):
    rows = []
    for o in history:
        rows.append({
            "stage": stage,
            "eval_index": start_index + o.meta.eval_index,
            "stage_index": o.meta.eval_index,
            "failed": int(o.meta.failed),
            "on_front": int(o.meta.eval_index in front_ids),
            "x": _fmt_vec(o.x),
            "raw": _fmt_vec(o.raw),
            "normalized": _fmt_vec(o.normalized),
        })
    return rows


def write_history_csv(path: str, rows: Sequence[dict]) -> None:
    lines = [",".join(HISTORY_COLUMNS)]
    for row in rows:
        lines.append(",".join(str(row[c]) for c in HISTORY_COLUMNS))
    atomic_write_text(path, "\n".join(lines) + "\n")


def atomic_write_text(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_json(path: str, payload: dict) -> None:
    atomic_write_text(path, json.dumps(payload, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Full pipeline


def _stage(name: str):
    class _Ctx:
        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            if exc is not None and isinstance(exc, BofusionError) and not isinstance(exc, PipelineStageError):
                raise PipelineStageError(name, exc) from exc
            return False

    return _Ctx()


def _score_or_none(scorer, delta, spec, seed, idx):
    t0 = time.monotonic()
    try:
        raws = scorer.score(delta)
        return _observe_raws(delta, raws, spec, seed, idx, t0)
    except (EvaluationFailedError, ProtocolError):
        return _failed_observation(delta, spec, seed, idx, t0)


def _method_row(spec: ObjectiveSpec, obs: Observation, delta=None, extra=None) -> dict:
    row = {
        "raw": {name: float(v) for name, v in zip(spec.names, obs.raw)},
        "normalized": {name: float(v) for name, v in zip(spec.names, obs.normalized)},
        "objective_sum": scalarize_sum(obs.normalized, spec),
        "failed": bool(obs.meta.failed),
    }
    if delta is not None:
        row["delta"] = [float(v) for v in delta]
    if extra:
        row.update(extra)
    return row


def _learned_delta(loss_of_delta: Callable[[np.ndarray], float], n: int, steps: int, lr: float) -> np.ndarray:
    """Projected central finite-difference descent directly in delta space."""
    h = 1e-4
    delta = np.full(n, 1.0 / n)
    if not math.isfinite(float(loss_of_delta(delta))):
        raise EvaluationFailedError("loss non-finite at uniform initialization")
    for _ in range(steps):
        grad = np.empty(n)
        for i in range(n):
            up, dn = delta.copy(), delta.copy()
            up[i] += h
            dn[i] -= h
            grad[i] = (float(loss_of_delta(up)) - float(loss_of_delta(dn))) / (2.0 * h)
        if not np.all(np.isfinite(grad)):
            raise EvaluationFailedError("non-finite finite-difference gradient")
        trial = np.maximum(delta - lr * grad, 0.0)
        s = trial.sum()
        if s < 1e-12:
            continue
        delta = trial / s
    return delta / delta.sum()


def run_pipeline(config: PipelineConfig, seed: int, out_dir: str | None = None) -> dict:
    """Both stages end to end, plus fusion baselines and a written report.

    Returns the report dict; when out_dir is given, writes report.json and
    history.csv there atomically.
    """
    rng = np.random.default_rng(seed)
    trainer, scorer, proxy, clients = _build_clients(config)
    all_rows: list[dict] = []
    row_base = 0

    try:
        with _stage("hpbo"):
            hpbo_trainer = proxy if proxy is not None else trainer
            best_lambda, hpbo_state = run_hpbo(
                config.space,
                hpbo_trainer,
                config.objectives,
                n_init=config.n_init,
                n_iter=config.hpbo_iters,
                seed=_child_seed(rng),
                acq_cfg=config.acq,
                gp_restarts=config.gp_restarts,
            )
        rows = history_rows("hpbo", hpbo_state.history, row_base)
        for r in rows:
            if r["stage_index"] == hpbo_state.best_index:
                r["on_front"] = 1
        all_rows.extend(rows)
        row_base += len(rows)

        with _stage("retrain"):
            params = _params_dict(config.space, best_lambda)
            params.update(config.fixed_params)
            retrain = trainer.train(params)
            if retrain.convergence_step is None:
                raise EvaluationFailedError("trainer reported no convergence step")

        with _stage("windows"):
            n = config.n_members
            spec0 = config.objectives
            standalone: list[Observation] = []
            for i in range(n):
                hot = np.zeros(n)
                hot[i] = 1.0
                standalone.append(_score_or_none(scorer, hot, spec0, seed, i))
            ok = [o for o in standalone if not o.meta.failed]
            if not ok:
                raise EvaluationFailedError("every standalone member score failed")
            entries = []
            for k, entry in enumerate(spec0.entries):
                values = [float(o.raw[k]) for o in ok]
                lo, hi = derive_norm_bounds(values, entry.kind, entry.direction)
                entries.append(ObjectiveEntry(entry.name, entry.direction, lo, hi, entry.kind))
            mobo_spec = ObjectiveSpec(tuple(entries))
            # Re-normalize standalone scores under the derived windows.
            standalone = [
                _observe_raws(o.x, dict(zip(spec0.names, o.raw)), mobo_spec, seed, i, time.monotonic())
                if not o.meta.failed
                else _failed_observation(o.x, mobo_spec, seed, i, time.monotonic())
                for i, o in enumerate(standalone)
            ]
            metric_sums = [
                -math.inf if o.meta.failed else scalarize_sum(o.normalized, mobo_spec, ("metric",))
                for o in standalone
            ]
            best_member_id = int(np.argmax(metric_sums))
        all_rows.extend(history_rows("members", standalone, row_base))
        row_base += len(standalone)

        with _stage("mobo"):
            delta_star, mobo_state = run_mobo(
                config.n_members,
                scorer,
                mobo_spec,
                n_iter=config.mobo_iters_per_member * config.n_members,
                seed=_child_seed(rng),
                best_member_id=best_member_id,
                acq_cfg=config.acq,
                gp_restarts=config.gp_restarts,
            )
        all_rows.extend(
            history_rows("mobo", mobo_state.history, row_base, frozenset(mobo_state.front.ids))
        )
        row_base += len(mobo_state.history)

        with _stage("baselines"):
            n = config.n_members
            baseline_rows: list[Observation] = []

            def score_tracked(delta):
                obs = _score_or_none(scorer, delta, mobo_spec, seed, len(baseline_rows))
                baseline_rows.append(obs)
                return obs

            uniform = np.full(n, 1.0 / n)
            swa_obs = score_tracked(uniform)

            # Greedy soup in coefficient space: sort members by standalone
            # metric quality, grow the pool when the pool average's metric
            # quality does not decrease.
            def metric_q(obs):
                return -math.inf if obs.meta.failed else scalarize_sum(obs.normalized, mobo_spec, ("metric",))

            order = sorted(range(n), key=lambda i: (-metric_sums[i], i))
            kept = [order[0]]

            def subset_delta(ids):
                d = np.zeros(n)
                d[list(ids)] = 1.0 / len(ids)
                return d

            greedy_obs = standalone[order[0]]
            greedy_q = metric_q(greedy_obs)
            for mid in order[1:]:
                trial_obs = score_tracked(subset_delta(kept + [mid]))
                q = metric_q(trial_obs)
                if q >= greedy_q and not trial_obs.meta.failed:
                    kept, greedy_q, greedy_obs = kept + [mid], q, trial_obs

            loss_idx = [k for k, e in enumerate(mobo_spec.entries) if e.kind == "loss"][0]

            def loss_of_delta(d):
                try:
                    raws = scorer.score(d)
                    return float(raws[mobo_spec.names[loss_idx]])
                except (EvaluationFailedError, ProtocolError):
                    return math.nan

            ok_learned = True
            try:
                learned = _learned_delta(loss_of_delta, n, config.learned_steps, config.learned_lr)
            except EvaluationFailedError:
                ok_learned = False
                learned = uniform
            learned_obs = score_tracked(learned)

            star_obs = mobo_state.history[
                max(mobo_state.front.ids or [o.meta.eval_index for o in mobo_state.history],
                    key=lambda i: (scalarize_sum(mobo_state.history[i].normalized, mobo_spec), -i))
            ]

            methods = {
                "best_member": _method_row(
                    mobo_spec, standalone[best_member_id],
                    delta=np.eye(n)[best_member_id],
                    extra={"member_id": best_member_id},
                ),
                "swa": _method_row(mobo_spec, swa_obs, delta=uniform),
                "greedy_swa": _method_row(
                    mobo_spec, greedy_obs, delta=subset_delta(kept), extra={"subset": sorted(kept)}
                ),
                "learned_swa": _method_row(
                    mobo_spec, learned_obs, delta=learned,
                    extra=({} if ok_learned else {"fallback_uniform": True}),
                ),
                "mobo_fusion": _method_row(
                    mobo_spec, star_obs, delta=delta_star.values,
                    extra={"eval_index": int(star_obs.meta.eval_index)},
                ),
            }
        all_rows.extend(history_rows("baseline", baseline_rows, row_base))
        row_base += len(baseline_rows)
    finally:
        for c in clients:
            c.close()

    report = {
        "schema": REPORT_SCHEMA,
        "seed": seed,
        "best_lambda": _params_dict(config.space, best_lambda),
        "hpbo_best_objective": float(max(
            scalarize_sum(o.normalized, hpbo_state.spec) for o in hpbo_state.history
        )),
        "convergence_step": retrain.convergence_step,
        "retrain_objectives": retrain.objectives,
        "n_members": config.n_members,
        "degenerate_fusion": config.n_members == 1,
        "windows": {
            e.name: {"norm_min": e.norm_min, "norm_max": e.norm_max} for e in mobo_spec.entries
        },
        "objective_names": list(mobo_spec.names),
        "best_member_id": best_member_id,
        "delta_star": [float(v) for v in delta_star.values],
        "methods": methods,
        "front_size": len(mobo_state.front),
        "history_length": {
            "hpbo": len(hpbo_state.history),
            "mobo": len(mobo_state.history),
        },
    }
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_history_csv(os.path.join(out_dir, "history.csv"), all_rows)
        write_json(os.path.join(out_dir, "report.json"), report)
    return report


# ---------------------------------------------------------------------------
# Misalignment demo


def run_demo_misalign(
    seed: int,
    out_dir: str | None = None,
    *,
    dim: int = 5,
    offset: float = 1.0,
    ruggedness: float = 0.5,
    n_members: int = 5,
    iters_per_member: int = 5,
    acq_cfg: AcqConfig | None = None,
    gp_restarts: int = 8,
    learned_steps: int = 100,
    learned_lr: float = 0.1,
) -> dict:
    """Certified-misaligned landscape demo: run stage 2 plus every fusion
    baseline on one generated landscape and report the comparison."""
    result = toybench.make_misaligned_landscape(
        dim=dim, offset=offset, ruggedness=ruggedness, seed=seed, n_members=n_members
    )
    scorer = InProcessEvaluator(
        toybench.LandscapeEvaluator(result.landscape, result.members)
    )
    rng = np.random.default_rng(seed)
    n = n_members

    spec0 = ObjectiveSpec((
        ObjectiveEntry("loss", "minimize", 0.0, 1.0, "loss"),
        ObjectiveEntry("metric", "maximize", 0.0, 1.0, "metric"),
    ))
    standalone0 = [
        _score_or_none(scorer, np.eye(n)[i], spec0, seed, i) for i in range(n)
    ]
    if any(o.meta.failed for o in standalone0):
        raise EvaluationFailedError("landscape standalone scoring failed")
    entries = []
    for k, entry in enumerate(spec0.entries):
        values = [float(o.raw[k]) for o in standalone0]
        lo, hi = derive_norm_bounds(values, entry.kind, entry.direction)
        entries.append(ObjectiveEntry(entry.name, entry.direction, lo, hi, entry.kind))
    spec = ObjectiveSpec(tuple(entries))
    standalone = [
        _observe_raws(o.x, dict(zip(spec.names, o.raw)), spec, seed, i, time.monotonic())
        for i, o in enumerate(standalone0)
    ]
    best_member_id = int(result.certificate["best_single_id"])

    delta_star, state = run_mobo(
        result.members,
        scorer,
        spec,
        n_iter=iters_per_member * n,
        seed=_child_seed(rng),
        best_member_id=best_member_id,
        acq_cfg=acq_cfg,
        gp_restarts=gp_restarts,
    )

    uniform = np.full(n, 1.0 / n)
    swa_obs = _score_or_none(scorer, uniform, spec, seed, 0)

    def metric_q(obs):
        return -math.inf if obs.meta.failed else scalarize_sum(obs.normalized, spec, ("metric",))

    order = sorted(range(n), key=lambda i: (-metric_q(standalone[i]), i))
    kept = [order[0]]
    greedy_obs = standalone[order[0]]
    greedy_q = metric_q(greedy_obs)

    def subset_delta(ids):
        d = np.zeros(n)
        d[list(ids)] = 1.0 / len(ids)
        return d

    for mid in order[1:]:
        trial = _score_or_none(scorer, subset_delta(kept + [mid]), spec, seed, 0)
        q = metric_q(trial)
        if q >= greedy_q and not trial.meta.failed:
            kept, greedy_q, greedy_obs = kept + [mid], q, trial

    learned = _learned_delta(
        lambda d: float(scorer.score(d)["loss"]), n, learned_steps, learned_lr
    )
    learned_obs = _score_or_none(scorer, learned, spec, seed, 0)

    star_obs = state.history[
        max(state.front.ids or [o.meta.eval_index for o in state.history],
            key=lambda i: (scalarize_sum(state.history[i].normalized, spec), -i))
    ]

    methods = {
        "best_member": _method_row(
            spec, standalone[best_member_id], delta=np.eye(n)[best_member_id],
            extra={"member_id": best_member_id},
        ),
        "swa": _method_row(spec, swa_obs, delta=uniform),
        "greedy_swa": _method_row(spec, greedy_obs, delta=subset_delta(kept), extra={"subset": sorted(kept)}),
        "learned_swa": _method_row(spec, learned_obs, delta=learned),
        "mobo_fusion": _method_row(
            spec, star_obs, delta=delta_star.values,
            extra={"eval_index": int(star_obs.meta.eval_index)},
        ),
    }
    report = {
        "schema": REPORT_SCHEMA,
        "seed": seed,
        "landscape": {
            "dim": dim,
            "offset": offset,
            "ruggedness": ruggedness,
            "n_members": n_members,
            "retries": result.retries,
        },
        "certificate": result.certificate,
        "windows": {e.name: {"norm_min": e.norm_min, "norm_max": e.norm_max} for e in spec.entries},
        "delta_star": [float(v) for v in delta_star.values],
        "methods": methods,
        "front_size": len(state.front),
        "degenerate_fusion": n_members == 1,
    }
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        rows = history_rows("members", standalone, 0)
        rows += history_rows("mobo", state.history, len(rows), frozenset(state.front.ids))
        write_history_csv(os.path.join(out_dir, "history.csv"), rows)
        write_json(os.path.join(out_dir, "report.json"), report)
        from .fusion import save_member_set

        save_member_set(result.members, os.path.join(out_dir, "members"))
        write_json(os.path.join(out_dir, "scorer.json"), {
            "builtin": "landscape",
            "seed": seed,
            "dim": dim,
            "offset": offset,
            "ruggedness": ruggedness,
            "n_members": n_members,
        })
        lines = ["method,metric,loss,objective_sum"]
        for name in ("best_member", "swa", "greedy_swa", "learned_swa", "mobo_fusion"):
            row = methods[name]
            lines.append(
                f"{name},{row['raw'].get('metric')!r},{row['raw'].get('loss')!r},{row['objective_sum']!r}"
            )
        atomic_write_text(os.path.join(out_dir, "table.csv"), "\n".join(lines) + "\n")
    return report
