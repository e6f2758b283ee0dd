"""Leakage audit: DTW distance matrices, distance-weighted k-NN attribute
estimation normalized against random baselines, the height-threshold
gender rule, and a retrain-from-scratch supervised probe."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap if not (args and callable(args[0])) else args[0]


from .dataio import ACTIVITIES, FEMALE, MALE
from .errors import ArgumentError
from .estimator import TrainConfig, build_mtcnn, train_estimator

EXACT_DTW_MAX_LENGTH = 512  # exact dynamic programming up to this length
DEFAULT_RADIUS = 10
DEFAULT_L_MAX = 2000

CONTINUOUS_ATTRIBUTES = ("age", "weight", "height")
ATTRIBUTES = ("gender",) + CONTINUOUS_ATTRIBUTES


# ---------------------------------------------------------------------------
# Dynamic time warping
# ---------------------------------------------------------------------------


def _local_cost(a, b):
    """Pairwise Euclidean distance across channels: (Ta, Tb) matrix."""
    diff = a.T[:, None, :] - b.T[None, :, :]
    return np.sqrt((diff * diff).sum(axis=2))


@njit(cache=True)
def _dtw_dp(cost):
    ta, tb = cost.shape
    dp = np.empty((ta + 1, tb + 1))
    dp[:, :] = np.inf
    dp[0, 0] = 0.0
    for i in range(ta):
        for j in range(tb):
            best = dp[i, j]
            if dp[i, j + 1] < best:
                best = dp[i, j + 1]
            if dp[i + 1, j] < best:
                best = dp[i + 1, j]
            dp[i + 1, j + 1] = cost[i, j] + best
    return dp[ta, tb]


def exact_dtw(a, b):
    """Exact DTW path-sum cost with the symmetric step pattern."""
    a, b = _validate_pair(a, b)
    return float(_dtw_dp(_local_cost(a, b)))


def _validate_pair(a, b):
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[0] != b.shape[0]:
        raise ArgumentError(
            f"channel counts differ: {a.shape[0]} vs {b.shape[0]}"
        )
    if a.shape[1] < 1 or b.shape[1] < 1:
        raise ArgumentError("series must have at least one sample")
    return a, b


def _halve(x):
    t = x.shape[1]
    even = x[:, : t - t % 2].reshape(x.shape[0], -1, 2).mean(axis=2)
    if t % 2:
        even = np.concatenate([even, x[:, -1:]], axis=1)
    return even


def _windowed_dtw(a, b, window):
    """DTW restricted to the given set of (i, j) cells; returns (cost, path)."""
    dist = {}
    dist[(-1, -1)] = (0.0, None)
    cost_cache = {}
    ta, tb = a.shape[1], b.shape[1]
    for i, j in window:
        candidates = [(i - 1, j), (i, j - 1), (i - 1, j - 1)]
        best = None
        for c in candidates:
            if c in dist and (best is None or dist[c][0] < best[0]):
                best = (dist[c][0], c)
        if best is None:
            continue
        key = (i, j)
        if key not in cost_cache:
            diff = a[:, i] - b[:, j]
            cost_cache[key] = float(np.sqrt((diff * diff).sum()))
        dist[key] = (best[0] + cost_cache[key], best[1])
    end = (ta - 1, tb - 1)
    path = []
    node = end
    while node != (-1, -1):
        path.append(node)
        node = dist[node][1]
    path.reverse()
    return dist[end][0], path


def _full_window(ta, tb):
    return [(i, j) for i in range(ta) for j in range(tb)]


def _expand_window(path, ta, tb, radius):
    coarse = set()
    for i, j in path:
        for di in range(-radius, radius + 1):
            for dj in range(-radius, radius + 1):
                coarse.add((i + di, j + dj))
    window = set()
    for i, j in coarse:
        # project one coarse cell onto the 2x2 block of the finer grid
        for fi in (2 * i, 2 * i + 1):
            for fj in (2 * j, 2 * j + 1):
                if 0 <= fi < ta and 0 <= fj < tb:
                    window.add((fi, fj))
    return sorted(window)


def _fastdtw(a, b, radius):
    ta, tb = a.shape[1], b.shape[1]
    min_size = radius + 2
    if ta <= min_size or tb <= min_size:
        return _windowed_dtw(a, b, _full_window(ta, tb))
    _, coarse_path = _fastdtw(_halve(a), _halve(b), radius)
    window = _expand_window(coarse_path, ta, tb, radius)
    return _windowed_dtw(a, b, window)


def fast_dtw(a, b, radius=DEFAULT_RADIUS):
    """FastDTW (coarsen-project-refine) approximation of exact_dtw."""
    a, b = _validate_pair(a, b)
    cost, _path = _fastdtw(a, b, radius)
    return float(cost)


def dtw_distance(a, b, radius=DEFAULT_RADIUS):
    """Exact DTW for short series, FastDTW beyond EXACT_DTW_MAX_LENGTH."""
    a, b = _validate_pair(a, b)
    if max(a.shape[1], b.shape[1]) <= EXACT_DTW_MAX_LENGTH:
        return exact_dtw(a, b)
    return fast_dtw(a, b, radius=radius)


# ---------------------------------------------------------------------------
# Distance matrices
# ---------------------------------------------------------------------------


@dataclass
class DistanceMatrix:
    values: np.ndarray  # (n, n) symmetric, zero diagonal
    subject_ids: list
    activity_tag: str  # one activity or "averaged"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        n = len(self.subject_ids)
        if self.values.shape != (n, n):
            raise ArgumentError("distance matrix shape does not match subjects")


def decimate(series, l_max=DEFAULT_L_MAX):
    """Keep at most l_max frames by taking every ceil(T/l_max)-th sample."""
    t = series.shape[1]
    if t <= l_max:
        return series
    step = int(np.ceil(t / l_max))
    return series[:, ::step]


def build_distance_matrices(series_by_subject, radius=DEFAULT_RADIUS, l_max=DEFAULT_L_MAX):
    """-> (per-activity {activity: DistanceMatrix}, element-wise averaged D).

    series_by_subject: {subject_id: {activity: (m, T) array}}.  Pairs where
    a subject misses an activity are averaged over the activities both
    subjects do have (with a warning).
    """
    subject_ids = sorted(series_by_subject)
    n = len(subject_ids)
    if n < 2:
        raise ArgumentError("need at least two subjects")
    prepared = {
        sid: {act: decimate(np.asarray(s), l_max) for act, s in acts.items()}
        for sid, acts in series_by_subject.items()
    }
    missing = {
        sid for sid, acts in prepared.items() if set(acts) != set(ACTIVITIES)
    }
    if missing:
        warnings.warn(
            f"subjects missing activities: {sorted(missing)}; "
            "their pair distances average over shared activities only"
        )
    per_activity = {}
    for act in ACTIVITIES:
        vals = np.zeros((n, n))
        for i in range(n):
            for j in range(i + 1, n):
                si = prepared[subject_ids[i]].get(act)
                sj = prepared[subject_ids[j]].get(act)
                if si is None or sj is None:
                    vals[i, j] = vals[j, i] = np.nan
                else:
                    dij = dtw_distance(si, sj, radius=radius)
                    vals[i, j] = vals[j, i] = dij
        per_activity[act] = DistanceMatrix(
            values=vals, subject_ids=subject_ids, activity_tag=act
        )
    stacked = np.stack([per_activity[a].values for a in ACTIVITIES])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        averaged = np.nanmean(stacked, axis=0)
    averaged = np.nan_to_num(averaged, nan=0.0)
    np.fill_diagonal(averaged, 0.0)
    return per_activity, DistanceMatrix(
        values=averaged, subject_ids=subject_ids, activity_tag="averaged"
    )


# ---------------------------------------------------------------------------
# k-NN attribute estimation
# ---------------------------------------------------------------------------


@dataclass
class AttributeEstimate:
    attribute: str
    predictions: dict  # subject_id -> predicted value
    error: float  # classification error (gender) or MAE (others)
    baseline: float  # random-estimator error
    normalized_error: float

    def to_dict(self):
        return {
            "attribute": self.attribute,
            "predictions": {str(k): v for k, v in self.predictions.items()},
            "error": self.error,
            "baseline": self.baseline,
            "normalized_error": self.normalized_error,
        }


def random_baseline(profiles, attribute):
    """Gender: minority-class fraction; continuous: half the observed range."""
    if attribute == "gender":
        genders = [p.gender for p in profiles]
        n_f = genders.count(FEMALE)
        n_m = genders.count(MALE)
        return min(n_f, n_m) / (n_f + n_m)
    values = np.array([getattr(p, attribute) for p in profiles])
    return float((values.max() - values.min()) / 2.0)


def knn_estimate(matrix, profiles, attribute, k=None):
    """Leave-one-subject-out distance-weighted k-NN with weights 1/d^2.

    A zero-distance neighbor wins outright (infinite-weight convention).
    k defaults to n-1 (all other subjects).
    """
    if attribute not in ATTRIBUTES:
        raise ArgumentError(f"unknown attribute {attribute!r}")
    by_id = {p.subject_id: p for p in profiles}
    ids = matrix.subject_ids
    n = len(ids)
    if n < 2:
        raise ArgumentError("k-NN needs at least two subjects")
    if k is None:
        k = n - 1
    if not 1 <= k <= n - 1:
        raise ArgumentError(f"k must be in [1, {n - 1}]")
    d = matrix.values
    predictions = {}
    errors = []
    for i, sid in enumerate(ids):
        others = [j for j in range(n) if j != i]
        others.sort(key=lambda j: d[i, j])
        neighbors = others[:k]
        zero = [j for j in neighbors if d[i, j] == 0.0]
        truth = getattr(by_id[sid], attribute)
        if attribute == "gender":
            if zero:
                votes = [by_id[ids[j]].gender for j in zero]
                pred = MALE if votes.count(MALE) >= votes.count(FEMALE) else FEMALE
            else:
                w_male = sum(
                    1.0 / d[i, j] ** 2
                    for j in neighbors
                    if by_id[ids[j]].gender == MALE
                )
                w_female = sum(
                    1.0 / d[i, j] ** 2
                    for j in neighbors
                    if by_id[ids[j]].gender == FEMALE
                )
                pred = MALE if w_male >= w_female else FEMALE
            errors.append(0.0 if pred == truth else 1.0)
        else:
            if zero:
                pred = float(
                    np.mean([getattr(by_id[ids[j]], attribute) for j in zero])
                )
            else:
                weights = np.array([1.0 / d[i, j] ** 2 for j in neighbors])
                values = np.array(
                    [getattr(by_id[ids[j]], attribute) for j in neighbors]
                )
                pred = float((weights * values).sum() / weights.sum())
            errors.append(abs(pred - truth))
        predictions[sid] = pred
    error = float(np.mean(errors))
    baseline = random_baseline([by_id[s] for s in ids], attribute)
    return AttributeEstimate(
        attribute=attribute,
        predictions=predictions,
        error=error,
        baseline=baseline,
        normalized_error=error / baseline if baseline > 0 else np.inf,
    )


# ---------------------------------------------------------------------------
# Height-threshold rule
# ---------------------------------------------------------------------------


def threshold_gender_accuracy(profiles, threshold_cm):
    """Accuracy (%) of 'height >= threshold -> Male', plus the best threshold
    found by exhaustive scan over observed heights."""
    if not profiles:
        raise ArgumentError("need at least one profile")
    heights = np.array([p.height for p in profiles])
    genders = np.array([p.gender for p in profiles])

    def acc(thr):
        pred = (heights >= thr).astype(int)
        return 100.0 * float((pred == genders).mean())

    candidates = np.concatenate([[heights.min() - 1.0], np.unique(heights)])
    best_thr = max(candidates, key=acc)
    return acc(threshold_cm), float(best_thr), acc(best_thr)


# ---------------------------------------------------------------------------
# Supervised probe
# ---------------------------------------------------------------------------


@dataclass
class ProbeResult:
    train_activity: list  # percent, per epoch (index 0 = untrained model)
    train_gender: list
    val_activity: list
    val_gender: list

    def to_dict(self):
        return {
            "train_activity": self.train_activity,
            "train_gender": self.train_gender,
            "val_activity": self.val_activity,
            "val_gender": self.val_gender,
        }


def supervised_probe(train_windows, val_windows, config=None):
    """Train a fresh MTCNN from scratch on (transformed) windows and record
    per-epoch train/validation accuracies for both tasks.  Index 0 of every
    curve is the untrained model."""
    from .estimator import evaluate

    config = config or TrainConfig()
    m, d = train_windows[0].data.shape
    model = build_mtcnn(m, d, seed=config.seed)
    r_train0 = evaluate(model, train_windows)
    r_val0 = evaluate(model, val_windows)
    result = ProbeResult(
        train_activity=[r_train0.activity_accuracy],
        train_gender=[r_train0.gender_accuracy],
        val_activity=[r_val0.activity_accuracy],
        val_gender=[r_val0.gender_accuracy],
    )
    history = train_estimator(model, train_windows, config, eval_windows=val_windows)
    for epoch in range(config.epochs):
        result.train_activity.append(history["activity_accuracy"][epoch])
        result.train_gender.append(history["gender_accuracy"][epoch])
        result.val_activity.append(history["val_activity_accuracy"][epoch])
        result.val_gender.append(history["val_gender_accuracy"][epoch])
    return result
