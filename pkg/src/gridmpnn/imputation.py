"""Missing-data imputation by iterated forward inference.

Unobserved entries start at the placeholder value (per-channel training
mean; optionally a seeded random draw), then the model's feed-forward
pass repeatedly replaces them with the decoded means until the largest
standardized update falls below the tolerance. Observed entries are
never modified. Voltage prediction, state estimation and bid estimation
are all specializations of this loop.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .gridgraph import VOLTAGE, NodeSchema
from .mpnn import NodePrediction


class ImputationError(ValueError):
    pass


@dataclass
class ImputationProblem:
    """Physical-unit snapshot with an observed-mask and query channels.

    ``query_channels`` (list of (node_id, channel_name)) selects what the
    report focuses on; it must be a subset of the unobserved channels.
    Empty means "all unobserved channels".
    """

    features: dict[str, np.ndarray]
    observed: dict[str, np.ndarray]
    query_channels: list[tuple[str, str]] = field(default_factory=list)
    max_iterations: int = 20
    tolerance: float = 1e-3  # normalized (standardized units), L-infinity
    random_init_seed: Optional[int] = None
    # seed the iteration from the provided values at unobserved entries
    # instead of the placeholder; lets a converged result re-enter at its
    # fixpoint (one iteration, update below tolerance)
    warm_start: bool = False


@dataclass
class ImputationResult:
    """Filled values plus per-channel sigma, in physical units."""

    values: dict[str, np.ndarray]
    sigma: dict[str, np.ndarray]
    was_observed: dict[str, np.ndarray]
    iterations: int
    converged: bool

    def report_document(self, schemas: dict[str, NodeSchema]) -> dict:
        channels = {}
        for nid, schema in schemas.items():
            for c, ch in enumerate(schema.channels()):
                channels[f"{nid}:{ch.name}"] = {
                    "value": float(self.values[nid][c]),
                    "sigma": float(self.sigma[nid][c]),
                    "was_observed": bool(self.was_observed[nid][c]),
                }
        return {"channels": channels, "iterations": self.iterations,
                "converged": self.converged}

    def report_json(self, schemas: dict[str, NodeSchema]) -> str:
        return json.dumps(self.report_document(schemas), indent=2, sort_keys=True)


def impute_packed(model, features: dict[str, np.ndarray],
                  mask: dict[str, np.ndarray], max_iterations: int = 20,
                  tolerance: float = 1e-3):
    """Batched imputation over packed standardized arrays (n, B, q).

    Returns (values, mu, sigma, first_hit, final_delta) where ``first_hit``
    is, per sample, the first iteration whose update dropped below the
    tolerance (0 when nothing is unobserved), and ``final_delta`` the last
    update size per sample.
    """
    keys = list(features)
    b = next(iter(features.values())).shape[1]
    cur = {k: features[k].copy() for k in keys}
    holes = {k: mask[k] == 0.0 for k in keys}
    any_holes = {k: holes[k].any() for k in keys}
    n_holes = sum(h.sum() for h in holes.values())
    first_hit = np.zeros(b, dtype=int)
    final_delta = np.zeros(b)
    if n_holes == 0:
        mu, logvar = model.forward(cur, mask, tape=None)
        sig = {k: np.sqrt(np.exp(v.data)) for k, v in logvar.items()}
        return cur, {k: v.data for k, v in mu.items()}, sig, first_hit, final_delta
    mu_d = sig = None
    pending = np.ones(b, dtype=bool)
    for it in range(1, max_iterations + 1):
        mu, logvar = model.forward(cur, mask, tape=None)
        mu_d = {k: v.data for k, v in mu.items()}
        delta = np.zeros(b)
        for k in keys:
            if not any_holes[k]:
                continue
            diff = np.abs(mu_d[k] - cur[k])
            diff = np.where(holes[k], diff, 0.0)
            np.maximum(delta, diff.max(axis=(0, 2)), out=delta)
            cur[k][holes[k]] = mu_d[k][holes[k]]
        hit = pending & (delta < tolerance)
        first_hit[hit] = it
        pending &= ~hit
        final_delta = delta
        if not pending.any():
            break
    first_hit[pending] = 0  # unconverged samples carry no hit iteration
    sig = {k: np.sqrt(np.exp(v.data)) for k, v in logvar.items()}
    return cur, mu_d, sig, first_hit, final_delta


def impute(model, problem: ImputationProblem) -> ImputationResult:
    """Fill one physical-unit snapshot; observed entries pass through
    exactly. Non-convergence is flagged, not fatal."""
    node_ids = model.topology.ids()
    obs = {nid: np.asarray(problem.observed[nid], bool) for nid in node_ids}
    if not any(o.any() for o in obs.values()):
        raise ImputationError("at least one entry must be observed")
    for nid, ch in problem.query_channels:
        c = model.schemas[nid].channel_index()[ch]
        if obs[nid][c]:
            raise ImputationError(
                f"query channel {nid}:{ch} is observed, nothing to impute")

    rng = (np.random.default_rng(problem.random_init_seed)
           if problem.random_init_seed is not None else None)
    std_f = {}
    for nid in node_ids:
        x = np.asarray(problem.features[nid], float)
        z = (x - model.std_mean[nid]) / model.std_std[nid]
        if problem.warm_start:
            fill = z
        elif rng is not None:
            fill = rng.standard_normal(z.shape)
        else:
            fill = np.zeros_like(z)
        std_f[nid] = np.where(obs[nid], z, fill)
    packed_f = model.pack(std_f)
    packed_m = model.pack({nid: obs[nid].astype(float) for nid in node_ids})

    n_unobserved = sum((~o).sum() for o in obs.values())
    cur, mu_d, sig, first_hit, final_delta = impute_packed(
        model, packed_f, packed_m, problem.max_iterations, problem.tolerance)
    iterations = int(first_hit[0]) if n_unobserved else 0
    converged = n_unobserved == 0 or float(final_delta[0]) < problem.tolerance
    if n_unobserved and iterations == 0:
        iterations = problem.max_iterations

    values, sigma = {}, {}
    filled = model.unpack({k: v[:, 0, :] for k, v in cur.items()})
    sig_std = model.unpack({k: v[:, 0, :] for k, v in sig.items()})
    for nid in node_ids:
        x = np.asarray(problem.features[nid], float)
        phys = filled[nid] * model.std_std[nid] + model.std_mean[nid]
        values[nid] = np.where(obs[nid], x, phys)
        sigma[nid] = sig_std[nid] * model.std_std[nid]
    return ImputationResult(values, sigma, {nid: obs[nid] for nid in node_ids},
                            iterations, bool(converged))


def voltage_channel_indices(schema: NodeSchema) -> list[int]:
    """Indices of current-time voltage channels in a node's feature vector."""
    return [c for c, ch in enumerate(schema.channels())
            if ch.category == VOLTAGE and ch.lag == 0]


def predict_voltages(model, features: dict[str, np.ndarray],
                     observed: dict[str, np.ndarray],
                     max_iterations: int = 20,
                     tolerance: float = 1e-3) -> dict[str, NodePrediction]:
    """Voltage prediction as imputation: mask every current-time voltage
    channel, impute, and report mu/sigma per prosumer node (physical V)."""
    masked = {nid: np.asarray(observed[nid], bool).copy()
              for nid in model.topology.ids()}
    queries = []
    for nid, schema in model.schemas.items():
        for c in voltage_channel_indices(schema):
            masked[nid][c] = False
            queries.append((nid, schema.channels()[c].name))
    problem = ImputationProblem(features=features, observed=masked,
                                query_channels=queries,
                                max_iterations=max_iterations,
                                tolerance=tolerance)
    result = impute(model, problem)
    out = {}
    for nid, schema in model.schemas.items():
        idx = voltage_channel_indices(schema)
        if not idx:
            continue
        out[nid] = NodePrediction(
            nid,
            mu=result.values[nid][idx],
            var=np.square(result.sigma[nid][idx]))
    return out
