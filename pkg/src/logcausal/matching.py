"""Optimal full matching within strata and post-match balance."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd
from scipy.optimize import linear_sum_assignment, linprog
from scipy.sparse import coo_matrix, vstack

from .core_data import omnibus_balance_test, standardized_difference, stratified_differences


class MatchingError(ValueError):
    pass


@dataclass
class MatchAssignment:
    """Result of a stratified full match.

    Attributes:
        match_id: Series indexed by student id giving the matched-set id.
        sets: one row per set with columns ``match_id, school, n1, n0, distance``.
        total_distance: sum of within-set treated/control distances.
        excluded: schools left out because they lack one of the classes.
        certified: True when every stratum passed the LP duality check.
    """

    match_id: pd.Series
    sets: pd.DataFrame
    total_distance: float
    excluded: list = field(default_factory=list)
    certified: bool = True

    @property
    def compositions(self) -> pd.DataFrame:
        return self.sets.set_index("match_id")[["n1", "n0"]]

    def school_of(self) -> pd.Series:
        return self.match_id.map(self.sets.set_index("match_id")["school"])

    def to_csv(self, path):
        out = pd.DataFrame({"student_id": self.match_id.index.astype(str), "match_id": self.match_id.to_numpy()})
        out.to_csv(path, index=False)

    @staticmethod
    def read_csv(path) -> pd.Series:
        df = pd.read_csv(path, dtype=str)
        return pd.Series(df["match_id"].to_numpy(), index=pd.Index(df["student_id"], name="student_id"),
                         name="match_id")


def _edge_cover(cost: np.ndarray):
    """Exact minimum-weight edge cover of a complete bipartite graph.

    Uses the classical reduction to maximum-weight matching with
    weights ``mu_i + nu_j - c_ij`` where ``mu``/``nu`` are the cheapest
    incident edges.  Unmatched vertices take their cheapest edge.
    Returns a boolean edge mask.
    """
    a, b = cost.shape
    mu = cost.min(axis=1)
    nu = cost.min(axis=0)
    gain = np.maximum(mu[:, None] + nu[None, :] - cost, 0.0)
    rows, cols = linear_sum_assignment(gain, maximize=True)
    x = np.zeros_like(cost, dtype=bool)
    covered_r = np.zeros(a, dtype=bool)
    covered_c = np.zeros(b, dtype=bool)
    for i, j in zip(rows, cols):
        if gain[i, j] > 0:
            x[i, j] = True
            covered_r[i] = covered_c[j] = True
    for i in np.flatnonzero(~covered_r):
        x[i, int(np.argmin(cost[i]))] = True
    for j in np.flatnonzero(~covered_c):
        i = int(np.argmin(cost[:, j]))
        x[i, j] = True
    return _prune(x, cost)


def _prune(x, cost):
    # drop edges whose endpoints are both covered elsewhere; keeps a star forest
    deg_r = x.sum(axis=1)
    deg_c = x.sum(axis=0)
    order = np.argsort(-cost[x], kind="stable")
    ii, jj = np.nonzero(x)
    for k in order:
        i, j = ii[k], jj[k]
        if deg_r[i] > 1 and deg_c[j] > 1:
            x[i, j] = False
            deg_r[i] -= 1
            deg_c[j] -= 1
    return x


def _incidence(a, b):
    m = a * b
    e = np.arange(m)
    rows = np.r_[e // b, a + e % b]
    return coo_matrix((np.ones(2 * m), (rows, np.r_[e, e])), shape=(a + b, m)).tocsr()


def _lp_cover(cost, max_controls=None, max_treated=None):
    """Edge cover LP with optional degree caps.  Bipartite incidence is
    totally unimodular so simplex vertices are integral."""
    a, b = cost.shape
    A = _incidence(a, b)
    ub_r = np.full(a + b, np.inf)
    if max_controls is not None:
        ub_r[:a] = max_controls
    if max_treated is not None:
        ub_r[a:] = max_treated
    A_ub = [-A]
    b_ub = [-np.ones(a + b)]
    finite = np.isfinite(ub_r)
    if finite.any():
        A_ub.append(A[finite])
        b_ub.append(ub_r[finite])
    res = linprog(cost.ravel(), A_ub=vstack(A_ub), b_ub=np.concatenate(b_ub), bounds=(0, 1), method="highs-ds")
    if res.status == 2:
        raise MatchingError("full match infeasible under the given caps")
    if res.status != 0:
        raise MatchingError(f"LP solver failed: {res.message}")
    return res


def _certify(cost, x, tol=1e-9) -> bool:
    # Lagrangian bound: for any y >= 0 and 0 <= x <= 1 the optimum is at least
    # sum(y) + sum(min(0, c - y_i - y_j)); HiGHS supplies a near-optimal y
    res = _lp_cover(cost)
    y = np.maximum(-res.ineqlin.marginals, 0.0)
    a = cost.shape[0]
    lower = math.fsum(y) + math.fsum(np.minimum(0.0, cost - y[:a, None] - y[None, a:]).ravel())
    primal = math.fsum(cost[x])
    return primal <= lower + tol * max(1.0, abs(primal))


def _stratum_cover(scores1, scores0, max_controls=None, max_treated=None, certify=True):
    cost = np.abs(scores1[:, None] - scores0[None, :])
    if max_controls is None and max_treated is None:
        x = _edge_cover(cost)
    else:
        res = _lp_cover(cost, max_controls, max_treated)
        x = res.x.reshape(cost.shape) > 0.5
        x = _prune(x, cost)
    ok = _certify(cost, x) if certify and (max_controls is None and max_treated is None) else True
    return x, cost, ok


def _sets_from_cover(x):
    """Connected components of a star-forest edge set; list of (rows, cols)."""
    a, b = x.shape
    parent = list(range(a + b))

    def find(u):
        while parent[u] != u:
            parent[u] = parent[parent[u]]
            u = parent[u]
        return u

    for i, j in zip(*np.nonzero(x)):
        ru, rv = find(i), find(a + j)
        if ru != rv:
            parent[max(ru, rv)] = min(ru, rv)
    comps = {}
    for u in range(a + b):
        comps.setdefault(find(u), []).append(u)
    out = []
    for members in comps.values():
        rows = [u for u in members if u < a]
        cols = [u - a for u in members if u >= a]
        out.append((rows, cols))
    return out


def full_match(scores, H, school_of, caps: Optional[dict] = None, certify: bool = True) -> MatchAssignment:
    """Optimal full match of H=1 to H=0 students within schools.

    Within each school the set partition minimizing the summed distance
    between each student and the opposite-class members of its set is a
    minimum-weight edge cover of the bipartite distance graph.

    Args:
        scores: Series of logit propensity scores indexed by student id.
        H: 0/1 exposure aligned with ``scores``.
        school_of: school id aligned with ``scores``.
        caps: optional ``{"max_controls": k, "max_treated": k}`` limits on
            the number of opposite-class members per set center.
        certify: check LP duality on each uncapped stratum.

    Returns:
        A MatchAssignment.
    """
    scores = pd.Series(scores, dtype=float)
    ids = scores.index.astype(str)
    frame = pd.DataFrame({"s": scores.to_numpy(), "H": np.asarray(H).astype(int),
                          "school": np.asarray(school_of).astype(str)}, index=ids)
    if len(frame) == 0:
        raise MatchingError("empty stratum")
    if not np.isfinite(frame.s).all():
        raise MatchingError("scores must be finite")
    caps = caps or {}
    frame = frame.sort_index()
    match, rows, excluded = {}, [], []
    total = []
    certified = True
    for school, grp in frame.groupby("school", sort=True):
        t = grp[grp.H == 1]
        c = grp[grp.H == 0]
        if len(t) == 0 or len(c) == 0:
            excluded.append(school)
            continue
        x, cost, ok = _stratum_cover(t.s.to_numpy(), c.s.to_numpy(), caps.get("max_controls"),
                                     caps.get("max_treated"), certify)
        certified &= ok
        comps = _sets_from_cover(x)
        comps.sort(key=lambda rc: min([t.index[i] for i in rc[0]] + [c.index[j] for j in rc[1]]))
        for k, (r, cc) in enumerate(comps):
            mid = f"{school}.{k + 1}"
            d = math.fsum(cost[np.ix_(r, cc)][x[np.ix_(r, cc)]])
            total.append(d)
            for i in r:
                match[t.index[i]] = mid
            for j in cc:
                match[c.index[j]] = mid
            rows.append((mid, school, len(r), len(cc), d))
    if not rows:
        raise MatchingError("no school contains both H classes")
    mid = pd.Series(match, name="match_id").reindex([i for i in ids if i in match])
    mid.index.name = "student_id"
    sets = pd.DataFrame(rows, columns=["match_id", "school", "n1", "n0", "distance"])
    return MatchAssignment(mid, sets, math.fsum(total), excluded, certified)


def partition_distance(scores1, scores0, sets) -> float:
    """Full-match objective of an arbitrary partition (list of (rows, cols))."""
    s1, s0 = np.asarray(scores1, float), np.asarray(scores0, float)
    return math.fsum(abs(s1[i] - s0[j]) for r, c in sets for i in r for j in c)


def match_balance(assignment: MatchAssignment, X: pd.DataFrame, H) -> pd.DataFrame:
    """Standardized differences and z-scores before and after matching.

    Post-match differences are the matched-set (harmonic) weighted mean
    differences; both columns use the pre-match pooled SD so that the two
    are on the same scale.  The omnibus tests are stored in ``attrs``.

    Args:
        assignment: a MatchAssignment.
        X: covariate frame indexed by student id.
        H: exposure aligned with ``X``.

    Returns:
        DataFrame with columns ``covariate, pre_std_diff, pre_z,
        post_std_diff, post_z``.
    """
    X = X.copy()
    X.index = X.index.astype(str)
    h = pd.Series(np.asarray(H).astype(int), index=X.index)
    keep = X.index.isin(assignment.match_id.index)
    if not keep.all():
        missing = X.index[~keep]
        raise MatchingError(f"{len(missing)} rows lack a matched set, e.g. {missing[0]}")
    strata = assignment.match_id.reindex(X.index).to_numpy()
    A = X.to_numpy(dtype=float)
    g = h.to_numpy()
    t0, V0, w0 = stratified_differences(A, g, None)
    t1, V1, w1 = stratified_differences(A, g, strata)
    rows = []
    for k, col in enumerate(X.columns):
        x = A[:, k]
        v1, v0 = np.var(x[g == 1], ddof=1), np.var(x[g == 0], ddof=1)
        sd = np.sqrt((v1 + v0) / 2)
        pre = standardized_difference(x, g) if sd > 0 else 0.0
        post = t1[k] / w1 / sd if sd > 0 else 0.0
        z0 = t0[k] / np.sqrt(V0[k, k]) if V0[k, k] > 0 else 0.0
        z1 = t1[k] / np.sqrt(V1[k, k]) if V1[k, k] > 1e-14 * max(V0[k, k], 1e-300) else 0.0
        rows.append((col, pre, z0, post, z1))
    out = pd.DataFrame(rows, columns=["covariate", "pre_std_diff", "pre_z", "post_std_diff", "post_z"])
    out.attrs["omnibus_pre"] = omnibus_balance_test(A, g).p_value
    out.attrs["omnibus_post"] = omnibus_balance_test(A, g, strata).p_value
    return out
