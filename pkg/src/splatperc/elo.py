"""Pairwise-preference backend: vote records, Bayesian Elo fitting via a
Bradley-Terry MAP estimate, and information-driven pair scheduling.

Skills live on the natural-log scale where P(i beats j) = 1 / (1 +
exp(theta_j - theta_i)); Elo is the affine rescaling R = 1000 +
(400/ln 10) * theta with the anchor method (first registered) pinned to
exactly 1000. A 400-point Elo gap therefore means 10:1 preference odds.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

ELO_PER_THETA = 400.0 / math.log(10.0)
DEFAULT_PRIOR_SCALE = 2.0
VOTE_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class VoteRecord:
    trial_id: str
    method_a: str
    method_b: str
    crop_id: str
    winner: str  # "a" | "b"
    rater_id: str
    unix_time: float

    def __post_init__(self):
        if self.winner not in ("a", "b"):
            raise ValueError(f"winner must be 'a' or 'b', got {self.winner!r}")
        if self.method_a == self.method_b:
            raise ValueError("method_a and method_b must differ")

    def winning_method(self) -> str:
        return self.method_a if self.winner == "a" else self.method_b

    def losing_method(self) -> str:
        return self.method_b if self.winner == "a" else self.method_a

    def to_json(self) -> str:
        d = asdict(self)
        d["v"] = VOTE_SCHEMA_VERSION
        return json.dumps(d)

    @classmethod
    def from_json(cls, line: str) -> "VoteRecord":
        d = json.loads(line)
        d.pop("v", None)
        return cls(**d)


@dataclass
class RatingTable:
    methods: list
    theta: np.ndarray
    elo: np.ndarray
    se_theta: np.ndarray
    interval_lo: np.ndarray  # 95% bounds in Elo units
    interval_hi: np.ndarray
    anchor: str
    vote_counts: dict = field(default_factory=dict)
    connected: bool = True

    def as_dict(self) -> dict:
        return {
            "anchor": self.anchor,
            "connected": self.connected,
            "methods": [
                {
                    "name": m,
                    "theta": float(self.theta[i]),
                    "elo": float(self.elo[i]),
                    "se_theta": float(self.se_theta[i]),
                    "interval95": [float(self.interval_lo[i]),
                                   float(self.interval_hi[i])],
                    "votes": int(self.vote_counts.get(m, 0)),
                }
                for i, m in enumerate(self.methods)
            ],
        }

    def elo_of(self, method: str) -> float:
        return float(self.elo[self.methods.index(method)])


class VoteStore:
    """Append-only newline-delimited JSON vote log, fsync'd per vote."""

    def __init__(self, path):
        self.path = str(path)
        self.votes: list[VoteRecord] = []
        if os.path.exists(self.path):
            with open(self.path) as fh:
                for line in fh:
                    line = line.strip()
                    if line:
                        self.votes.append(VoteRecord.from_json(line))

    def append(self, vote: VoteRecord) -> None:
        with open(self.path, "a") as fh:
            fh.write(vote.to_json() + "\n")
            fh.flush()
            os.fsync(fh.fileno())
        self.votes.append(vote)

    def __len__(self) -> int:
        return len(self.votes)


def _method_order(votes) -> list:
    seen = []
    for v in votes:
        for m in (v.method_a, v.method_b):
            if m not in seen:
                seen.append(m)
    return seen


def _is_connected(n: int, pairs) -> bool:
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i, j in pairs:
        parent[find(i)] = find(j)
    return len({find(i) for i in range(n)}) <= 1


def elo_fit(votes, prior_scale: float = DEFAULT_PRIOR_SCALE,
            methods: list | None = None) -> RatingTable:
    """MAP Bradley-Terry skills under independent N(0, prior_scale^2)
    priors, anchor (first method) pinned at theta = 0 / Elo = 1000.

    Solved by damped Newton iterations to gradient norm < 1e-10; standard
    errors come from the inverse observed information over the free
    parameters. A disconnected comparison graph is reported via the
    `connected` flag (the prior keeps the fit well-posed).
    """
    votes = list(votes)
    if not votes and not methods:
        raise ValueError("empty vote set")
    names = methods if methods else _method_order(votes)
    for v in votes:
        for m in (v.method_a, v.method_b):
            if m not in names:
                raise ValueError(f"vote references unknown method {m!r}")
    n = len(names)
    idx = {m: i for i, m in enumerate(names)}
    wins = np.zeros((n, n))
    counts = {m: 0 for m in names}
    for v in votes:
        wi, li = idx[v.winning_method()], idx[v.losing_method()]
        wins[wi, li] += 1.0
        counts[v.method_a] += 1
        counts[v.method_b] += 1
    games = wins + wins.T

    connected = _is_connected(n, zip(*np.nonzero(games))) if n > 1 else True
    theta = np.zeros(n)
    free = np.arange(1, n)  # index 0 is the anchor
    inv_var = 1.0 / (prior_scale * prior_scale)

    def posterior_parts(th):
        diff = th[:, None] - th[None, :]
        p = 1.0 / (1.0 + np.exp(-diff))
        grad_full = (wins - games * p).sum(axis=1) - th * inv_var
        ll = float((wins * np.log(np.maximum(p, 1e-300))).sum())
        ll -= 0.5 * inv_var * float((th * th).sum())
        return ll, grad_full, p

    if n > 1:
        for _ in range(200):
            ll, grad_full, p = posterior_parts(theta)
            g = grad_full[free]
            if np.linalg.norm(g) < 1e-10:
                break
            w = games * p * (1.0 - p)
            h_full = w.copy()
            np.fill_diagonal(h_full, 0.0)
            h = h_full[np.ix_(free, free)]
            np.fill_diagonal(h, -(w.sum(axis=1)[free]) - inv_var)
            step = np.linalg.solve(h, -g)
            t = 1.0
            for _ in range(40):
                trial = theta.copy()
                trial[free] += t * step
                if posterior_parts(trial)[0] >= ll:
                    break
                t *= 0.5
            theta = theta.copy()
            theta[free] += t * step

    # observed information over the free block at the MAP
    se = np.zeros(n)
    if n > 1:
        _, _, p = posterior_parts(theta)
        w = games * p * (1.0 - p)
        info = -w[np.ix_(free, free)]
        np.fill_diagonal(info, w.sum(axis=1)[free] + inv_var)
        cov = np.linalg.inv(info)
        se[free] = np.sqrt(np.maximum(np.diag(cov), 0.0))

    elo = 1000.0 + ELO_PER_THETA * theta
    half = 1.96 * ELO_PER_THETA * se
    return RatingTable(
        methods=names,
        theta=theta,
        elo=elo,
        se_theta=se,
        interval_lo=elo - half,
        interval_hi=elo + half,
        anchor=names[0],
        vote_counts=counts,
        connected=connected,
    )


def elo_to_preference_ratio(delta: float) -> float:
    """Preference odds implied by an Elo difference: 10^(delta/400)."""
    if not math.isfinite(delta):
        raise ValueError("delta must be finite")
    return 10.0 ** (delta / 400.0)


def pair_scores(table: RatingTable) -> dict:
    """Information-gain surrogate per unordered pair:
    p_hat * (1 - p_hat) * (SE_i^2 + SE_j^2) with p_hat from current Elo."""
    scores = {}
    n = len(table.methods)
    for i in range(n):
        for j in range(i + 1, n):
            d = (table.elo[i] - table.elo[j]) / ELO_PER_THETA
            p = 1.0 / (1.0 + math.exp(-d))
            scores[(table.methods[i], table.methods[j])] = (
                p * (1.0 - p) * (table.se_theta[i] ** 2 + table.se_theta[j] ** 2)
            )
    return scores


def select_next_pair(table: RatingTable, vote_counts: dict, seed):
    """Sample uniformly among the top-3 pairs by information score
    (exploration); vote counts break score ties toward unseen pairs."""
    n = len(table.methods)
    if n < 2:
        raise ValueError("need at least 2 methods")
    scores = pair_scores(table)
    scored = []
    for (ma, mb), score in scores.items():
        seen = vote_counts.get(ma, 0) + vote_counts.get(mb, 0)
        scored.append((score, -seen, ma, mb))
    scored.sort(key=lambda t: (-t[0], t[1], t[2], t[3]))
    top = scored[: min(3, len(scored))]
    rng = np.random.default_rng(seed)
    _, _, ma, mb = top[int(rng.integers(0, len(top)))]
    return ma, mb


def prior_only_table(methods: list, prior_scale: float = DEFAULT_PRIOR_SCALE) -> RatingTable:
    """Bootstrap table before any votes exist: all Elo 1000, prior SEs."""
    n = len(methods)
    se = np.full(n, prior_scale)
    se[0] = 0.0
    elo = np.full(n, 1000.0)
    half = 1.96 * ELO_PER_THETA * se
    return RatingTable(
        methods=list(methods),
        theta=np.zeros(n),
        elo=elo,
        se_theta=se,
        interval_lo=elo - half,
        interval_hi=elo + half,
        anchor=methods[0],
        vote_counts={m: 0 for m in methods},
        connected=False,
    )


def make_vote(trial_id: str, method_a: str, method_b: str, crop_id: str,
              winner: str, rater_id: str) -> VoteRecord:
    return VoteRecord(
        trial_id=trial_id,
        method_a=method_a,
        method_b=method_b,
        crop_id=crop_id,
        winner=winner,
        rater_id=rater_id,
        unix_time=time.time(),
    )
