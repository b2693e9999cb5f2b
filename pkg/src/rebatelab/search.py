"""Grid search over the flat transaction fee and the no-incentive baseline."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .contract import RebateReport, exchange_objective
from .deep_bsde import NetworkPolicy, PolicyNetwork, TrainConfig, TrainingDiverged, train
from .model import ModelParams
from .simulation import PURPOSE_EVAL, ZeroPolicy, simulate_batch

log = logging.getLogger(__name__)

SWEEP_COLUMNS = ("d", "rho", "rho_se", "spread_sq", "fee_revenue", "penalty_active", "failed")
DEFAULT_GRID = tuple(0.5 * i for i in range(13))


@dataclass
class SweepPoint:
    d: float
    report: RebateReport | None
    net: PolicyNetwork | None = None
    losses: list = field(default_factory=list)
    failed: bool = False
    penalty_active: bool = False
    checkpoint: str | None = None


@dataclass
class SweepResult:
    grid: list
    points: list
    argmin: float | None
    interior: bool
    baseline: RebateReport

    def rho(self) -> np.ndarray:
        return np.array([p.report.rho if p.report else np.nan for p in self.points])

    def best(self) -> SweepPoint:
        return next(p for p in self.points if p.d == self.argmin)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SWEEP_COLUMNS)
            for p in self.points:
                r = p.report
                vals = [np.nan] * 4 if r is None else [r.rho, r.rho_se, r.spread_sq, r.fee_revenue]
                w.writerow([repr(float(p.d))] + [repr(float(v)) for v in vals]
                           + [int(p.penalty_active), int(p.failed)])


def evaluate_policy(net: PolicyNetwork | None, params: ModelParams, d: float, m: int, seed: int,
                    contract: bool = True, record: bool = False):
    """Report on a fresh evaluation batch; net=None means Z identically zero."""
    policy = ZeroPolicy() if net is None else NetworkPolicy(net, params)
    batch = simulate_batch(policy, params, m, seed, record_trajectories=record, d=d,
                           purpose=PURPOSE_EVAL, index=0)
    return exchange_objective(batch, d, params, contract=contract), batch


def _penalty_active(report: RebateReport, params: ModelParams) -> bool:
    return report.V0_p < params.R0_p or report.V0_q < params.R0_q


def sweep_fee(grid, train_budget: int, eval_batch: int, seed: int, params: ModelParams,
              config: TrainConfig | None = None, on_point=None) -> SweepResult:
    """Train a policy from the same initial weights at every d and evaluate rho(d).

    Evaluation batches use the evaluation stream, common to every grid point
    and independent of the training streams.
    """
    grid = [float(d) for d in grid]
    if not grid:
        raise ValueError("grid must be nonempty")
    if grid != sorted(grid):
        raise ValueError("grid must be sorted")
    config = TrainConfig(seed=seed) if config is None else replace(config, seed=seed)
    config = replace(config, iterations=int(train_budget))
    if eval_batch < config.batch_size:
        log.warning("evaluation batch %d smaller than training batch %d", eval_batch,
                    config.batch_size)
    points = []
    for d in grid:
        pd = params.with_(d=d)
        try:
            res = train(pd, config, d=d)
        except TrainingDiverged as exc:
            log.warning("d=%s: %s", d, exc)
            points.append(SweepPoint(d=d, report=None, failed=True))
            continue
        report, _ = evaluate_policy(res.net, pd, d, eval_batch, seed)
        pt = SweepPoint(d=d, report=report, net=res.net, losses=res.losses,
                        penalty_active=_penalty_active(report, pd))
        points.append(pt)
        if on_point is not None:
            on_point(pt)
    ok = [p for p in points if not p.failed]
    argmin = min(ok, key=lambda p: p.report.rho).d if ok else None
    interior = argmin is not None and grid[0] < argmin < grid[-1]
    baseline, _ = evaluate_policy(None, params.with_(d=0.0), 0.0, eval_batch, seed, contract=False)
    return SweepResult(grid=grid, points=points, argmin=argmin, interior=interior,
                       baseline=baseline)


def baseline_comparison(params: ModelParams, m: int, seed: int, net: PolicyNetwork, d_hat: float):
    """(no-incentive report at d=0 with Z=0 and no rebate, incentive report at d_hat).

    Both runs use the same evaluation stream.
    """
    base, _ = evaluate_policy(None, params.with_(d=0.0), 0.0, m, seed, contract=False)
    inc, _ = evaluate_policy(net, params.with_(d=d_hat), d_hat, m, seed, contract=True)
    return base, inc
