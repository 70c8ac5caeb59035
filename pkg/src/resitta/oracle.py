"""Brute-force reference computations used to check the engine.

Nothing here imports the modules it checks. Everything runs in float64 /
plain Python and is allowed to be slow.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Callable, Iterable, Sequence

import numpy as np


@dataclass
class OracleReport:
    name: str
    max_abs_err: float
    max_rel_err: float
    n_checked: int
    passed: bool
    tolerance: float = 0.0

    def to_json(self) -> str:
        d = asdict(self)
        d["pass"] = d.pop("passed")
        return json.dumps(d, sort_keys=True)


def compare(name: str, got, want, atol: float, rtol: float = 0.0) -> OracleReport:
    got = np.asarray(got, dtype=np.float64).ravel()
    want = np.asarray(want, dtype=np.float64).ravel()
    abs_err = np.abs(got - want)
    rel_err = abs_err / np.maximum(np.abs(want), 1e-300)
    ok = bool(np.all(abs_err <= atol + rtol * np.abs(want)))
    return OracleReport(
        name,
        float(abs_err.max(initial=0.0)),
        float(rel_err.max(initial=0.0)),
        int(got.size),
        ok,
        atol,
    )


def finite_diff_grad(f: Callable[[np.ndarray], float], theta, h: float = 1e-4) -> np.ndarray:
    """Central differences; raises FloatingPointError if f goes non-finite."""
    theta = np.array(theta, dtype=np.float64)
    grad = np.zeros_like(theta)
    flat = theta.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(theta)
        flat[i] = old - h
        fm = f(theta)
        flat[i] = old
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise FloatingPointError(f"non-finite objective at coordinate {i}")
        g[i] = (fp - fm) / (2 * h)
    return grad


def two_pass_stats(x) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel (axis 1) biased mean and variance, explicit two passes in float64."""
    x = np.asarray(x, dtype=np.float64)
    c = x.shape[1]
    means = np.zeros(c)
    var = np.zeros(c)
    for ch in range(c):
        vals = x[:, ch].ravel()
        m = math.fsum(vals.tolist()) / vals.size
        means[ch] = m
        var[ch] = math.fsum(((vals - m) ** 2).tolist()) / vals.size
    return means, var


def ema_closed_form(x0, targets: Iterable, rate: float):
    v = np.array(x0, dtype=np.float64)
    for t in targets:
        v = (1.0 - rate) * v + rate * np.asarray(t, dtype=np.float64)
    return v


def gaussian_w2_sq(mu_s: float, sigma_s: float, mu_t: float, sigma_t: float) -> float:
    return (mu_s - mu_t) ** 2 + sigma_s**2 + sigma_t**2 - 2 * sigma_s * sigma_t


def gaussian_kl(mu_t: float, sigma_t: float, mu_s: float, sigma_s: float) -> float:
    """KL(N(mu_t, sigma_t^2) || N(mu_s, sigma_s^2))."""
    return math.log(sigma_s / sigma_t) + (sigma_t**2 + (mu_t - mu_s) ** 2) / (2 * sigma_s**2) - 0.5


def gaussian_sym_js(mu_t: float, sigma_t: float, mu_s: float, sigma_s: float) -> float:
    """Half the symmetric KL between the two Gaussians."""
    return 0.5 * (gaussian_kl(mu_t, sigma_t, mu_s, sigma_s) + gaussian_kl(mu_s, sigma_s, mu_t, sigma_t))


def _entropy(dist: Sequence[float]) -> float:
    # order-free so that permuted distributions compare equal
    return math.fsum(sorted(-p * math.log(max(p, 1e-12)) for p in dist))


def replay_bank(
    adds: Iterable[tuple[Sequence[float], int]],
    capacity: int,
    t_forget: int,
    t_mature: int,
    num_classes: int,
    use_outdated: bool = True,
    use_overconfident: bool = True,
    use_uncertainty: bool = True,
    events: list | None = None,
) -> list[dict]:
    """Replay the sample-adding procedure from scratch at every step.

    Records are dicts with keys id, label, age, entropy, order (insertion
    counter). If ``events`` is given, one dict per add describing the decision
    is appended to it.
    """
    bank: list[dict] = []
    order = 0
    for dist, sample_id in adds:
        dist = [float(p) for p in dist]
        for r in bank:
            r["age"] += 1
        label = max(range(num_classes), key=lambda k: (dist[k], -k))
        ent = _entropy(dist)
        order += 1
        new = {"id": sample_id, "label": label, "age": 0, "entropy": ent, "order": order}
        if len(bank) < capacity:
            bank.append(new)
            if events is not None:
                events.append({"reason": "insert", "evicted": None})
            continue

        counts = [sum(1 for r in bank if r["label"] == c) for c in range(num_classes)]
        top = max(counts)
        dom = {c for c in range(num_classes) if counts[c] == top}
        in_dom = [r for r in bank if r["label"] in dom]

        outdated = [r for r in in_dom if r["age"] >= t_forget]
        class_min = {}
        for r in bank:
            class_min[r["label"]] = min(class_min.get(r["label"], math.inf), r["entropy"])
        overconf = [r for r in in_dom if r["age"] >= t_mature and r["entropy"] == class_min[r["label"]]]
        most_uncertain = None
        for r in in_dom:
            if most_uncertain is None or r["entropy"] > most_uncertain["entropy"]:
                most_uncertain = r

        victim, reason = None, "rejected"
        if use_outdated and outdated:
            victim = sorted(outdated, key=lambda r: (-r["age"], r["order"]))[0]
            reason = "outdated"
        elif use_overconfident and overconf:
            victim = sorted(overconf, key=lambda r: (r["entropy"], r["order"]))[0]
            reason = "overconfident"
        elif not use_uncertainty:
            pass
        elif ent < most_uncertain["entropy"]:
            victim = most_uncertain
            reason = "uncertainty"

        if events is not None:
            events.append(
                {
                    "reason": reason,
                    "evicted": None if victim is None else dict(victim),
                    "dominant": sorted(dom),
                    "outdated": [r["id"] for r in outdated],
                    "overconfident": [r["id"] for r in overconf],
                }
            )
        if victim is not None:
            bank.remove(victim)
            bank.append(new)
    return bank


def slot_histograms(labels_in_order: Sequence[int], slot_sizes: Sequence[int], num_classes: int) -> np.ndarray:
    """Class counts per consecutive slot of the given sizes, shape (K, C)."""
    hist = np.zeros((len(slot_sizes), num_classes), dtype=np.int64)
    pos = 0
    for k, n in enumerate(slot_sizes):
        for y in labels_in_order[pos : pos + n]:
            hist[k, int(y)] += 1
        pos += n
    return hist


def normalized_entropy(counts: Sequence[int]) -> float:
    total = sum(counts)
    if total == 0 or len(counts) < 2:
        return 0.0
    h = -sum((c / total) * math.log(c / total) for c in counts if c > 0)
    return h / math.log(len(counts))
