"""Cross-validation of the PDE solution against Monte Carlo.

Three checks tie the two routes together: the candidate optimal rule
(first contact with the solved value) must reproduce the grid value within
Monte Carlo error; the dynamic-programming identity must hold for
intermediate rules; and the subtree spawned at a branch must be
statistically indistinguishable from a fresh population started at the
branch state.  Pass thresholds are |z| <= 3 for equality checks and
p >= 0.01 for the distributional test, stated in every report.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats as sps

from .labels import MOTHER, Label
from .model import ModelSpec, model_hash
from .pde import ValueGrid
from .reward import McEstimate, dpp_rhs, mc_value, reward_of_outcome
from .simulator import replication_seed, simulate_forest
from .stopping import (
    FORCE_STOP,
    StoppingRule,
    contact_set_rule,
    evaluate_line,
    fixed_time_rule,
    trivial_root_rule,
)

Z_THRESHOLD = 3.0
KS_P_THRESHOLD = 0.01


class VerifyError(RuntimeError):
    pass


@dataclass
class PointCheck:
    x: float
    v_pde: float
    estimate: McEstimate
    gap: float
    z: float
    passed: bool

    def to_json(self) -> dict:
        return {
            "x": self.x, "v_pde": self.v_pde, "estimate": self.estimate.to_json(),
            "gap": self.gap, "z": self.z, "passed": self.passed,
        }


@dataclass
class SweepEntry:
    rule: str
    x: float
    estimate: McEstimate
    margin: float
    passed: bool

    def to_json(self) -> dict:
        return {
            "rule": self.rule, "x": self.x, "estimate": self.estimate.to_json(),
            "margin": self.margin, "passed": self.passed,
        }


@dataclass
class BranchingTest:
    ks_stat: float
    p_value: float
    n_samples: int
    insufficient: bool

    def to_json(self) -> dict:
        return {
            "ks_stat": self.ks_stat, "p_value": self.p_value,
            "n_samples": self.n_samples, "insufficient": self.insufficient,
        }


@dataclass
class VerificationReport:
    points: List[PointCheck]
    sweep: List[SweepEntry]
    dpp: List[PointCheck]
    branching: Optional[BranchingTest]
    seed: int
    settings: dict
    z_threshold: float = Z_THRESHOLD
    ks_p_threshold: float = KS_P_THRESHOLD

    def all_passed(self) -> bool:
        ok = all(p.passed for p in self.points)
        ok = ok and all(e.passed for e in self.sweep)
        ok = ok and all(p.passed for p in self.dpp)
        if self.branching is not None and not self.branching.insufficient:
            ok = ok and self.branching.p_value >= self.ks_p_threshold
        return ok

    def to_json(self) -> dict:
        return {
            "points": [p.to_json() for p in self.points],
            "sweep": [e.to_json() for e in self.sweep],
            "dpp": [p.to_json() for p in self.dpp],
            "branching": self.branching.to_json() if self.branching else None,
            "seed": self.seed,
            "settings": self.settings,
            "z_threshold": self.z_threshold,
            "ks_p_threshold": self.ks_p_threshold,
            "all_passed": self.all_passed(),
        }

    def write_json(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=2, sort_keys=True)
            f.write("\n")


def _check_grid(spec: ModelSpec, grid: ValueGrid) -> None:
    if not grid.model_hash.startswith(model_hash(spec)):
        raise VerifyError("grid was solved for a different model")


def cross_validate(
    spec: ModelSpec,
    grid: ValueGrid,
    points: Sequence[float],
    reps: int,
    dt: float,
    seed: int,
    epsilon: float,
    t_cut: float,
    cut_policy: str = FORCE_STOP,
    sweep_times: Sequence[float] = (),
) -> VerificationReport:
    """Check the grid value against the first-contact rule and a rule sweep.

    Each point must satisfy |z| <= 3 for the contact-rule estimate, and no
    swept rule may beat the grid value by more than 3 standard errors.
    Points inside the contact region stop at birth and check exactness; the
    others exercise the free boundary.
    """
    _check_grid(spec, grid)
    for x in points:
        if not grid.contains(np.array([x]))[0]:
            raise VerifyError(f"point {x} lies outside the grid domain")
    tau = contact_set_rule(grid, epsilon, t_cut, cut_policy)
    checks: List[PointCheck] = []
    sweep: List[SweepEntry] = []
    for i, x in enumerate(points):
        start = (MOTHER, np.array([float(x)]))
        v_pde = grid.value_at_point(0, float(x))
        est = mc_value(spec, tau, start, reps, dt, seed, rng_salt=f"cv{i}")
        z = est.z_score(v_pde)
        checks.append(PointCheck(x=float(x), v_pde=v_pde, estimate=est,
                                 gap=v_pde - est.mean, z=z,
                                 passed=abs(z) <= Z_THRESHOLD))
        candidates: List[Tuple[str, StoppingRule]] = [
            ("trivial_root", trivial_root_rule(t_cut, cut_policy))
        ]
        for t in sweep_times:
            candidates.append((f"fixed_time({t})", fixed_time_rule(t, t_cut, cut_policy)))
        for name, rule in candidates:
            est_r = mc_value(spec, rule, start, reps, dt, seed, rng_salt=f"sw{i}{name}")
            margin = v_pde - est_r.mean
            sweep.append(SweepEntry(rule=name, x=float(x), estimate=est_r,
                                    margin=margin,
                                    passed=margin >= -Z_THRESHOLD * max(est_r.stderr, 1e-12)))
    return VerificationReport(
        points=checks, sweep=sweep, dpp=[], branching=None, seed=seed,
        settings={"reps": reps, "dt": dt, "epsilon": epsilon,
                  "t_cut": t_cut, "cut_policy": cut_policy},
    )


def dpp_consistency(
    spec: ModelSpec,
    grid: ValueGrid,
    theta: StoppingRule,
    point: float,
    reps: int,
    dt: float,
    seed: int,
    epsilon: float,
) -> PointCheck:
    """z-test of the dynamic-programming identity at one starting point."""
    _check_grid(spec, grid)
    tau = contact_set_rule(grid, epsilon, theta.t_cut, theta.cut_policy)
    start = (MOTHER, np.array([float(point)]))
    est = dpp_rhs(spec, theta, tau, grid, start, reps, dt, seed, rng_salt="dpp")
    v_pde = grid.value_at_point(0, float(point))
    z = est.z_score(v_pde)
    return PointCheck(x=float(point), v_pde=v_pde, estimate=est,
                      gap=v_pde - est.mean, z=z, passed=abs(z) <= Z_THRESHOLD)


def subtree_reward_samples(
    spec: ModelSpec,
    point: float,
    reps: int,
    dt: float,
    seed: int,
    branch_window: float,
    functional_horizon: float,
    shared_streams: bool = False,
    max_samples: Optional[int] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Paired reward samples for the branching-property test.

    Sample A: run a forest from the mother at `point`; when her first event
    arrives inside the branch window with at least one child, take child 0's
    subtree, shift clocks to its birth and evaluate the fixed-horizon line
    reward on it.  Sample B: a fresh forest started from a particle with
    child 0's label at the recorded branch position, same functional.  With
    shared_streams the fresh forest reuses the same per-label streams, so
    the two samples must agree outcome by outcome.
    """
    if spec.alpha_bar <= 0:
        raise VerifyError("branching test needs a nonzero branch rate")
    s = functional_horizon
    t_cut_sub = s + dt
    horizon_a = branch_window + s + 2 * dt
    rule = fixed_time_rule(s, t_cut_sub, "abandon")
    a_vals: List[float] = []
    b_vals: List[float] = []
    child0: Label = (0,)
    for r in range(reps):
        seed_a = replication_seed(seed, r, "A")
        rec = simulate_forest(spec, [(MOTHER, np.array([float(point)]))],
                              horizon=horizon_a, dt=dt, seed=seed_a)
        mother = rec.particles[MOTHER]
        if mother.end_kind != "branched" or not mother.offspring_count:
            continue
        if mother.end_time > branch_window:
            continue
        sub = _extract_subtree(rec, child0)
        a_vals.append(reward_of_outcome(spec, evaluate_line(sub, rule)))
        x_branch = mother.positions[-1].copy()
        if shared_streams:
            seed_b = seed_a
        else:
            seed_b = replication_seed(seed, r, "B")
        # start the fresh forest at the recorded branch epoch and rebase its
        # clock exactly like the subtree, so reward atoms align bit for bit
        base = mother.end_time
        rec_b = simulate_forest(spec, [(child0, x_branch)],
                                horizon=base + t_cut_sub + dt,
                                dt=dt, seed=seed_b, t0=base)
        sub_b = _extract_subtree(rec_b, child0)
        b_vals.append(reward_of_outcome(spec, evaluate_line(sub_b, rule)))
        if max_samples is not None and len(a_vals) >= max_samples:
            break
    return np.asarray(a_vals), np.asarray(b_vals)


def _extract_subtree(record, root: Label):
    """Copy the subtree below `root`, clocks restarted at its birth."""
    from .simulator import GenealogyRecord, ParticleRecord

    base = record.particles[root].birth_time
    parts = {}
    for lab, p in record.particles.items():
        if lab[: len(root)] != root:
            continue
        parts[lab] = ParticleRecord(
            label=lab,
            parent=p.parent if lab != root else None,
            birth_time=p.birth_time - base,
            end_time=p.end_time - base if math.isfinite(p.end_time) else math.inf,
            end_kind=p.end_kind,
            offspring_count=p.offspring_count,
            times=p.times - base,
            positions=p.positions,
        )
    return GenealogyRecord(
        particles=parts,
        initial=[(root, parts[root].positions[0])],
        horizon=record.horizon - base,
        dt=record.dt,
        seed=record.seed,
        spec_hash=record.spec_hash,
    )


def branching_property_test(
    spec: ModelSpec,
    point: float,
    reps: int,
    dt: float,
    seed: int,
    branch_window: float = 2.0,
    functional_horizon: float = 0.5,
    min_samples: int = 100,
    max_samples: Optional[int] = None,
) -> BranchingTest:
    """Two-sample KS test of subtree rewards against fresh-start rewards."""
    a, b = subtree_reward_samples(spec, point, reps, dt, seed, branch_window,
                                  functional_horizon, max_samples=max_samples)
    if len(a) < min_samples:
        return BranchingTest(ks_stat=math.nan, p_value=math.nan,
                             n_samples=len(a), insufficient=True)
    ks = sps.ks_2samp(a, b, method="asymp")
    return BranchingTest(ks_stat=float(ks.statistic), p_value=float(ks.pvalue),
                         n_samples=len(a), insufficient=False)
