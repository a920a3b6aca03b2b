"""Built-in benchmark tasks with controllable loss/metric misalignment.

Two families:

* ``SyntheticLandscape`` - closed-form loss and metric over weight space,
  with the metric optimum offset from the loss optimum and a seeded
  sinusoidal ruggedness term. ``make_misaligned_landscape`` draws landscapes
  plus near-loss-optimal member sets until a *misalignment certificate*
  holds: uniform averaging must hurt the metric while some convex mixture
  beats every single member.

* ``ToyTask`` - a seeded binary linear-classification problem (imbalanced
  Gaussian clusters, logistic loss, F1 metric) trained by minibatch SGD,
  small enough that full pipelines run in seconds.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import CertificateError, EvaluationFailedError, NumericalError
from .fusion import MemberSet, collection_schedule

N_SIN_BASIS = 8
SIN_FREQ_SCALE = 3.0
DIVERGENCE_LOSS = 1e6
CONV_WINDOW = 10
CONV_TOL = 1e-4


# ---------------------------------------------------------------------------
# Synthetic landscape


@dataclass(frozen=True)
class SyntheticLandscape:
    """Closed-form loss/metric pair over R^dim.

    loss(w)   = ||w - loss_center||^2
    metric(w) = clip(exp(-||w - metric_center||^2) * (1 + ruggedness * p(w)), 0, 1)

    where p is a fixed seeded sinusoidal basis with values in [-1, 1]. With
    ruggedness = 0 and coincident centers the metric is a monotone transform
    of the negated loss (the aligned control case).
    """

    dim: int
    loss_center: np.ndarray
    metric_center: np.ndarray
    ruggedness: float
    rng_seed: int
    _freqs: np.ndarray = field(init=False, repr=False)
    _phases: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        lc = np.asarray(self.loss_center, dtype=float).copy()
        mc = np.asarray(self.metric_center, dtype=float).copy()
        if lc.shape != (self.dim,) or mc.shape != (self.dim,):
            raise ValueError("centers must match dim")
        if self.ruggedness < 0.0 or self.ruggedness > 1.0:
            raise ValueError("ruggedness must lie in [0, 1]")
        rng = np.random.default_rng(self.rng_seed)
        freqs = rng.normal(0.0, SIN_FREQ_SCALE, size=(N_SIN_BASIS, self.dim))
        phases = rng.uniform(0.0, 2.0 * math.pi, size=N_SIN_BASIS)
        for arr in (lc, mc, freqs, phases):
            arr.setflags(write=False)
        object.__setattr__(self, "loss_center", lc)
        object.__setattr__(self, "metric_center", mc)
        object.__setattr__(self, "_freqs", freqs)
        object.__setattr__(self, "_phases", phases)

    def loss(self, w) -> float:
        w = np.asarray(w, dtype=float)
        d = w - self.loss_center
        return float(d @ d)

    def metric(self, w) -> float:
        w = np.asarray(w, dtype=float)
        d = w - self.metric_center
        bump = math.exp(-float(d @ d))
        wiggle = float(np.mean(np.sin(self._freqs @ w + self._phases)))
        return float(min(1.0, max(0.0, bump * (1.0 + self.ruggedness * wiggle))))


@dataclass(frozen=True)
class MisalignmentResult:
    landscape: SyntheticLandscape
    members: MemberSet
    retries: int
    certificate: dict


def make_misaligned_landscape(
    dim: int = 5,
    offset: float = 1.0,
    ruggedness: float = 0.5,
    seed: int = 0,
    n_members: int = 5,
    member_spread: float = 0.35,
    n_dirichlet: int = 10_000,
    max_retries: int = 100,
) -> MisalignmentResult:
    """Draw a landscape plus near-loss-optimal members, retrying (fresh
    sub-seeds) until the misalignment certificate holds:

      metric(uniform average) < max_i metric(w_i) < max_delta metric(fuse(delta))

    with the right-hand maximum scanned over n_dirichlet seeded Dirichlet
    draws. offset = 0 requests the aligned control variant, where the
    certificate is impossible by construction and therefore skipped.
    """
    if dim < 2:
        raise ValueError("dim must be >= 2")
    if offset < 0.0:
        raise ValueError("offset must be >= 0")
    if n_members < 2:
        raise ValueError("need at least two members")
    certify = offset > 0.0

    for attempt in range(max_retries):
        attempt_seed = seed * 100_000 + attempt
        rng = np.random.default_rng(attempt_seed)
        loss_center = rng.normal(0.0, 0.5, size=dim)
        direction = rng.normal(size=dim)
        direction /= np.linalg.norm(direction)
        landscape = SyntheticLandscape(
            dim=dim,
            loss_center=loss_center,
            metric_center=loss_center + offset * direction,
            ruggedness=ruggedness,
            rng_seed=attempt_seed,
        )
        W = loss_center + member_spread * rng.normal(size=(n_members, dim))
        members = MemberSet.from_weights(list(W))

        singles = np.array([landscape.metric(w) for w in W])
        uniform_metric = landscape.metric(W.mean(axis=0))
        deltas = rng.dirichlet(np.ones(n_members), size=n_dirichlet)
        mix_metrics = np.array([landscape.metric(W.T @ d) for d in deltas])
        best_mixture = float(mix_metrics.max())
        certificate = {
            "certified": bool(uniform_metric < singles.max() < best_mixture),
            "uniform_metric": float(uniform_metric),
            "best_single_metric": float(singles.max()),
            "best_single_id": int(singles.argmax()),
            "best_mixture_metric": best_mixture,
            "single_metrics": [float(v) for v in singles],
            "attempt_seed": attempt_seed,
        }
        if not certify or certificate["certified"]:
            return MisalignmentResult(landscape, members, attempt, certificate)
    raise CertificateError(
        f"no certified landscape after {max_retries} attempts (seed {seed})"
    )


# ---------------------------------------------------------------------------
# Toy classification task


@dataclass(frozen=True)
class ToyTask:
    """Imbalanced two-cluster binary classification with fixed splits."""

    X_train: np.ndarray
    y_train: np.ndarray
    X_val: np.ndarray
    y_val: np.ndarray
    X_heldout: np.ndarray
    y_heldout: np.ndarray
    direction: np.ndarray
    separation: float
    p_pos: float

    @property
    def dim(self) -> int:
        return self.X_train.shape[1]


def _draw_split(rng, n, dim, direction, separation, p_pos):
    n_pos = int(round(p_pos * n))
    y = np.zeros(n, dtype=int)
    y[:n_pos] = 1
    centers = np.where(y[:, None] == 1, 0.5 * separation, -0.5 * separation) * direction
    X = centers + rng.normal(size=(n, dim))
    perm = rng.permutation(n)
    return X[perm], y[perm]


def make_toy_task(
    seed: int,
    dim: int = 4,
    n_train: int = 256,
    n_val: int = 96,
    n_heldout: int = 512,
    p_pos: float = 0.3,
    separation: float = 2.0,
) -> ToyTask:
    rng = np.random.default_rng(seed)
    direction = rng.normal(size=dim)
    direction /= np.linalg.norm(direction)
    X_tr, y_tr = _draw_split(rng, n_train, dim, direction, separation, p_pos)
    X_va, y_va = _draw_split(rng, n_val, dim, direction, separation, p_pos)
    X_he, y_he = _draw_split(rng, n_heldout, dim, direction, separation, p_pos)
    return ToyTask(X_tr, y_tr, X_va, y_va, X_he, y_he, direction, separation, p_pos)


def _augment(X: np.ndarray) -> np.ndarray:
    return np.concatenate([X, np.ones((len(X), 1))], axis=1)


def _logistic_loss_grad(w, Xa, y):
    s = np.where(y == 1, 1.0, -1.0)
    margins = s * (Xa @ w)
    # log(1 + exp(-m)) via logaddexp for overflow safety
    loss = float(np.mean(np.logaddexp(0.0, -margins)))
    p = 1.0 / (1.0 + np.exp(np.clip(margins, -500, 500)))
    grad = -(Xa * (s * p)[:, None]).mean(axis=0)
    return loss, grad


def logistic_loss(w, X, y) -> float:
    loss, _ = _logistic_loss_grad(np.asarray(w, dtype=float), _augment(np.asarray(X, dtype=float)), y)
    return loss


def predict_labels(w, X) -> np.ndarray:
    return (_augment(np.asarray(X, dtype=float)) @ np.asarray(w, dtype=float) > 0.0).astype(int)


def f1_score(preds, labels) -> float:
    """Binary F1 = 2TP / (2TP + FP + FN); defined as 0 when TP = 0."""
    preds = np.asarray(preds).astype(int).ravel()
    labels = np.asarray(labels).astype(int).ravel()
    if preds.shape != labels.shape:
        raise ValueError("preds/labels length mismatch")
    tp = int(np.sum((preds == 1) & (labels == 1)))
    fp = int(np.sum((preds == 1) & (labels == 0)))
    fn = int(np.sum((preds == 0) & (labels == 1)))
    if tp == 0:
        return 0.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def spearman_rcc(a, b) -> float:
    """Spearman rank correlation: Pearson correlation of average-tied
    fractional ranks."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape or a.size < 2:
        raise ValueError("need two equal-length vectors with >= 2 entries")
    ra, rb = rankdata(a), rankdata(b)
    if ra.std() == 0.0 or rb.std() == 0.0:
        raise NumericalError("rank vector has zero variance")
    return float(np.corrcoef(ra, rb)[0, 1])


@dataclass(frozen=True)
class ToyTrajectory:
    members: MemberSet | None
    per_step: tuple[tuple[float, float], ...]
    convergence_step: int | None
    failed: bool


def _convergence_step(val_losses: Sequence[float]) -> int:
    """First step whose 10-step running mean fails to beat the best running
    mean seen so far by more than 1e-4; the final step if that never happens."""
    T = len(val_losses)
    if T < CONV_WINDOW:
        return T
    best = math.inf
    csum = np.concatenate([[0.0], np.cumsum(val_losses)])
    for t in range(CONV_WINDOW, T + 1):
        r = (csum[t] - csum[t - CONV_WINDOW]) / CONV_WINDOW
        if best - r > CONV_TOL:
            best = r
        else:
            return t
    return T


def train_toy(
    task: ToyTask,
    lam: dict,
    seed: int = 0,
    schedule: Sequence[int] | None = None,
) -> ToyTrajectory:
    """Seeded minibatch SGD on the logistic loss.

    lam keys: lr (required), batch_size (default 32), steps (default 200).
    Per-step validation (loss, F1) is recorded after each update. Divergence
    (non-finite or loss above 1e6) flags the trajectory failed and stops.
    """
    lr = float(lam["lr"])
    batch = int(lam.get("batch_size", 32))
    steps = int(lam.get("steps", 200))
    if batch < 1 or steps < 1 or lr < 0.0:
        raise ValueError("need lr >= 0, batch_size >= 1, steps >= 1")
    rng = np.random.default_rng(seed)
    Xa_tr = _augment(task.X_train)
    Xa_va = _augment(task.X_val)
    w = np.zeros(task.dim + 1)
    wanted = set(int(s) for s in schedule) if schedule is not None else set()
    snapshots: dict[int, np.ndarray] = {}
    per_step: list[tuple[float, float]] = []
    failed = False

    for t in range(1, steps + 1):
        idx = rng.integers(0, len(Xa_tr), size=batch)
        _, grad = _logistic_loss_grad(w, Xa_tr[idx], task.y_train[idx])
        w = w - lr * grad
        if not np.all(np.isfinite(w)):
            failed = True
            break
        val_loss, _ = _logistic_loss_grad(w, Xa_va, task.y_val)
        val_f1 = f1_score((Xa_va @ w > 0.0).astype(int), task.y_val)
        per_step.append((val_loss, val_f1))
        if not math.isfinite(val_loss) or val_loss > DIVERGENCE_LOSS:
            failed = True
            break
        if t in wanted:
            snapshots[t] = w.copy()

    if failed:
        return ToyTrajectory(None, tuple(per_step), None, True)
    conv = _convergence_step([ls for ls, _ in per_step])
    members = None
    if schedule is not None and snapshots:
        steps_sorted = sorted(snapshots)
        members = MemberSet.from_weights([snapshots[s] for s in steps_sorted], steps_sorted)
    return ToyTrajectory(members, tuple(per_step), conv, False)


def score_fused(task: ToyTask, weights, split: str = "val") -> dict[str, float]:
    """Validation/heldout loss and F1 of one weight vector."""
    X, y = {
        "train": (task.X_train, task.y_train),
        "val": (task.X_val, task.y_val),
        "heldout": (task.X_heldout, task.y_heldout),
    }[split]
    w = np.asarray(weights, dtype=float)
    return {
        "loss": logistic_loss(w, X, y),
        "f1": f1_score(predict_labels(w, X), y),
    }


# ---------------------------------------------------------------------------
# In-process evaluators (also backing the subprocess reference evaluator)


class ToyEvaluator:
    """Trainer + scorer over one seeded ToyTask.

    A trainer call runs SGD at the requested hyperparameters, computes the
    convergence step, re-runs the identical trajectory to capture members on
    the derived collection schedule, and retains those members for later
    scorer calls. Scorer calls fuse the retained members and report
    validation loss and F1.
    """

    def __init__(
        self,
        seed: int = 0,
        n_members: int = 15,
        dim: int = 4,
        n_train: int = 256,
        n_val: int = 96,
        n_heldout: int = 512,
        p_pos: float = 0.3,
        separation: float = 2.0,
        default_steps: int = 200,
        default_batch_size: int = 32,
    ):
        self.seed = int(seed)
        self.n_members = int(n_members)
        self.default_steps = int(default_steps)
        self.default_batch_size = int(default_batch_size)
        self.task = make_toy_task(
            self.seed, dim=dim, n_train=n_train, n_val=n_val,
            n_heldout=n_heldout, p_pos=p_pos, separation=separation,
        )
        self.members: MemberSet | None = None
        self.last_schedule: list[int] | None = None

    def _lam(self, params: dict) -> dict:
        lam = {
            "lr": float(params["lr"]),
            "batch_size": int(params.get("batch_size", self.default_batch_size)),
            "steps": int(params.get("steps", self.default_steps)),
        }
        return lam

    def train(self, params: dict) -> dict:
        lam = self._lam(params)
        first = train_toy(self.task, lam, seed=self.seed + 1)
        if first.failed or first.convergence_step is None:
            raise EvaluationFailedError("training diverged")
        conv = first.convergence_step
        schedule, _short = collection_schedule(lam["steps"], conv, self.n_members)
        second = train_toy(self.task, lam, seed=self.seed + 1, schedule=schedule)
        if second.failed or second.members is None:
            raise EvaluationFailedError("training diverged during member collection")
        self.members = second.members
        self.last_schedule = schedule
        losses = [ls for ls, _ in first.per_step]
        f1s = [f1 for _, f1 in first.per_step]
        return {
            "objectives": {"loss": float(min(losses)), "f1": float(max(f1s))},
            "convergence_step": int(conv),
        }

    def score(self, delta) -> dict[str, float]:
        if self.members is None:
            raise EvaluationFailedError("scorer called before any trainer call")
        fused = self._blend(self.members, delta)
        return score_fused(self.task, fused, "val")

    @staticmethod
    def _blend(members, delta):
        # Linear extension of fusion: scorers must accept slightly
        # off-simplex probes (finite-difference baselines rely on it).
        delta = np.asarray(delta, dtype=float)
        if delta.shape != (len(members),):
            raise EvaluationFailedError(
                f"delta has {delta.size} entries, member set has {len(members)}"
            )
        if not np.all(np.isfinite(delta)):
            raise EvaluationFailedError("delta has non-finite entries")
        return members.weights_matrix.T @ delta


class LandscapeEvaluator:
    """Scorer over a fixed landscape + member set; trainer role unsupported."""

    def __init__(self, landscape: SyntheticLandscape, members: MemberSet):
        self.landscape = landscape
        self.members = members

    @staticmethod
    def from_seed(seed: int, **kwargs) -> "LandscapeEvaluator":
        result = make_misaligned_landscape(seed=seed, **kwargs)
        return LandscapeEvaluator(result.landscape, result.members)

    def train(self, params: dict) -> dict:
        raise EvaluationFailedError("landscape evaluator has no trainer role")

    def score(self, delta) -> dict[str, float]:
        fused = ToyEvaluator._blend(self.members, delta)
        return {
            "loss": self.landscape.loss(fused),
            "metric": self.landscape.metric(fused),
        }
