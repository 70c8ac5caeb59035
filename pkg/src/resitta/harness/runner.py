"""Source pretraining, stream execution for each comparison arm, and sweeps."""

from __future__ import annotations

import functools
import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .. import nn, resibn, stream
from ..adapter import AdaptConfig, Adapter
from ..nn import NormMode
from .config import RunConfig, dump_config

log = logging.getLogger(__name__)

SOURCE_BN_MOMENTUM = 0.1
CLEAN = "clean"


class TrainingDiverged(RuntimeError):
    pass


# -- data --------------------------------------------------------------------


def _domain_seed(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


@functools.lru_cache(maxsize=8)
def _synthetic_split(seed: int, n: int, num_classes: int, size: int, split: str) -> stream.Dataset:
    return stream.synthetic_images(n, num_classes=num_classes, size=size, seed=_domain_seed(seed, split))


@functools.lru_cache(maxsize=64)
def _synthetic_domain(seed: int, n: int, num_classes: int, size: int, name: str) -> stream.Dataset:
    test = _synthetic_split(seed, n, num_classes, size, "test")
    if name == CLEAN:
        return test
    return stream.corrupt_dataset(test, stream.Corruption.parse(name), seed=_domain_seed(seed, name))


def load_source_data(cfg: RunConfig) -> stream.Dataset:
    if cfg.data_dir:
        return stream.load_dataset(_data_path(cfg.data_dir, "train"))
    return _synthetic_split(cfg.seed, cfg.n_train, cfg.num_classes, cfg.image_size, "train")


def _data_path(data_dir: str, name: str) -> Path:
    d = Path(data_dir)
    for suffix in (".rtds", ".csv"):
        if (d / f"{name}{suffix}").exists():
            return d / f"{name}{suffix}"
    raise FileNotFoundError(f"no dataset file for {name!r} in {d}")


def load_domains(cfg: RunConfig) -> dict[str, stream.Dataset]:
    out = {}
    for name in cfg.domains:
        if cfg.data_dir:
            out[name] = stream.load_dataset(_data_path(cfg.data_dir, name))
        else:
            out[name] = _synthetic_domain(cfg.seed, cfg.n_per_domain, cfg.num_classes, cfg.image_size, name)
    return out


def make_datasets(cfg: RunConfig, out_dir, fmt: str = "rtds") -> list[Path]:
    """Write the clean train/test splits and every configured domain to ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    synth = cfg.replace(data_dir="")
    items = {"train": load_source_data(synth), "test": _synthetic_domain(
        synth.seed, synth.n_per_domain, synth.num_classes, synth.image_size, CLEAN)}
    items.update(load_domains(synth))
    paths = []
    for name, ds in items.items():
        path = out / f"{name}.{fmt}"
        stream.save_dataset(ds, path)
        paths.append(path)
    return paths


# -- source model ------------------------------------------------------------


def pretrain_source(
    ds: stream.Dataset,
    epochs: int = 5,
    seed: int = 1,
    lr: float = 3e-3,
    batch_size: int = 64,
) -> nn.Network:
    """Train the toy backbone on clean data, tracking source BN statistics by EMA."""
    _, c, h, w = ds.samples.shape
    if h != w:
        raise ValueError("toy backbone expects square images")
    net = nn.toy_backbone(c, h, ds.num_classes, seed=seed)
    opt = nn.AdamState.zeros(net.num_params)
    rng = np.random.default_rng(seed)
    for epoch in range(epochs):
        perm = rng.permutation(len(ds))
        for start in range(0, len(perm) - batch_size + 1, batch_size):
            idx = perm[start : start + batch_size]
            logits = net.forward(ds.samples[idx], NormMode.TRAIN_BATCH)
            loss, dlogits = nn.softmax_cross_entropy(logits, ds.labels[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch offset {start}")
            nn.adam_step(net, net.backward(dlogits), opt, lr)
            for bn in net.norm_layers:
                bs, st = bn.last_batch_stats, bn.state
                mu = (1 - SOURCE_BN_MOMENTUM) * st.mu_s + SOURCE_BN_MOMENTUM * bs.mu_b
                var = (1 - SOURCE_BN_MOMENTUM) * st.var_s + SOURCE_BN_MOMENTUM * bs.var_b
                sigma = np.maximum(np.sqrt(var), resibn.SIGMA_FLOOR)
                bn.state = replace(st, mu_s=mu, sigma_s=sigma, mu_t=mu.copy(), sigma_t=sigma.copy())
        log.debug("epoch %d done, last loss %.4f", epoch, loss)
    return net


@functools.lru_cache(maxsize=4)
def _pretrained_bytes(seed, n_train, num_classes, size, epochs, lr, batch_size) -> bytes:
    ds = _synthetic_split(seed, n_train, num_classes, size, "train")
    return nn.checkpoint_bytes(pretrain_source(ds, epochs, seed, lr, batch_size))


def source_model(cfg: RunConfig) -> nn.Network:
    if cfg.checkpoint:
        return nn.load_checkpoint(cfg.checkpoint)
    if cfg.data_dir:
        return pretrain_source(load_source_data(cfg), cfg.pretrain_epochs, cfg.seed, cfg.pretrain_lr, cfg.batch_size)
    blob = _pretrained_bytes(
        cfg.seed, cfg.n_train, cfg.num_classes, cfg.image_size, cfg.pretrain_epochs, cfg.pretrain_lr, cfg.batch_size
    )
    return nn.checkpoint_from_bytes(blob)


def evaluate(net: nn.Network, ds: stream.Dataset, mode=NormMode.EVAL_SOURCE) -> float:
    preds = net.forward(ds.samples, mode).argmax(axis=1)
    return float(np.mean(preds != ds.labels))


# -- runs --------------------------------------------------------------------


@dataclass
class RunMetrics:
    arm: str
    domains: list[str]
    records: list[dict] = field(default_factory=list)
    status: str = "ok"
    error: str | None = None
    wall_clock: float = 0.0

    def per_domain(self) -> dict[str, float]:
        wrong, total = {}, {}
        for r in self.records:
            wrong[r["domain"]] = wrong.get(r["domain"], 0) + r["wrong"]
            total[r["domain"]] = total.get(r["domain"], 0) + r["n"]
        return {d: wrong[d] / total[d] for d in self.domains if d in total}

    @property
    def overall_error(self) -> float:
        n = sum(r["n"] for r in self.records)
        return sum(r["wrong"] for r in self.records) / n if n else float("nan")

    @property
    def w2_trace(self) -> list[list[float]]:
        return [r["w2"] for r in self.records]

    @property
    def bank_trace(self) -> list[int]:
        return [r["bank_size"] for r in self.records]

    def summary(self) -> dict:
        return {
            "type": "summary",
            "arm": self.arm,
            "status": self.status,
            "error": self.error,
            "num_batches": len(self.records),
            "overall_error": self.overall_error,
            "per_domain_error": self.per_domain(),
        }

    def to_jsonl(self) -> str:
        # wall-clock is deliberately left out so identical runs give identical files
        lines = [json.dumps(r, sort_keys=True) for r in self.records]
        lines.append(json.dumps(self.summary(), sort_keys=True))
        return "\n".join(lines) + "\n"


def format_table(rows: dict[str, RunMetrics], label: str = "Method") -> str:
    domains = next(iter(rows.values())).domains
    width = max(len(label), *(len(k) for k in rows))
    cols = [d.split("-")[0] for d in domains]
    head = f"{label:<{width}} | " + " | ".join(f"{c:>8.8}" for c in cols) + " |     Avg."
    lines = [head, "-" * len(head)]
    for name, m in rows.items():
        per = m.per_domain()
        cells = " | ".join(f"{100 * per.get(d, float('nan')):8.1f}" for d in domains)
        lines.append(f"{name:<{width}} | {cells} | {100 * m.overall_error:8.1f}")
    return "\n".join(lines) + "\n"


def adapt_config(cfg: RunConfig) -> AdaptConfig:
    return AdaptConfig(
        nu_b=cfg.nu_b,
        eta_t=cfg.eta_t,
        nu_m=cfg.nu_m,
        lr=cfg.lr,
        adapt_every=0 if cfg.arm == "resibn_only" else cfg.adapt_every,
        align_every=cfg.align_every,
        trainable=cfg.trainable,
        refresh_entropy_on_adapt=cfg.refresh_entropy_on_adapt,
        capacity=cfg.capacity,
        t_forget=cfg.t_forget,
        t_mature=cfg.t_mature,
        use_outdated=cfg.use_outdated,
        use_overconfident=cfg.use_overconfident,
        use_uncertainty=cfg.use_uncertainty,
        aug_seed=cfg.seed,
    )


def build_run_stream(cfg: RunConfig, domains: dict[str, stream.Dataset]) -> stream.Stream:
    spec = stream.StreamSpec(
        list(cfg.domains), cfg.correlation, cfg.delta, cfg.slots or None, cfg.batch_size, cfg.seed
    )
    return stream.build_stream(spec, domains)


def _execute(cfg: RunConfig, metrics: RunMetrics, out: Path | None, observer=None) -> None:
    source = source_model(cfg)
    domains = load_domains(cfg)
    st = build_run_stream(cfg, domains)
    before = nn.checkpoint_bytes(source)

    adapter = Adapter(source, adapt_config(cfg)) if cfg.arm in ("resibn_only", "resitta") else None
    for batch, labels in st:
        diag = None
        if cfg.arm == "source":
            preds = source.forward(batch.x, NormMode.EVAL_SOURCE).argmax(axis=1)
        elif cfg.arm == "bn":
            preds = source.forward(batch.x, NormMode.TRAIN_BATCH).argmax(axis=1)
        else:
            preds, diag = adapter.step(batch.x)
        wrong = int(np.sum(preds != labels.labels))
        rec = {
            "type": "batch",
            "index": batch.index,
            "domain": batch.domain,
            "n": int(len(preds)),
            "wrong": wrong,
            "error": wrong / len(preds),
        }
        if diag is not None:
            rec.update(w2=diag.w2, bank_size=diag.bank_size, adapted=diag.adapted, loss=diag.loss,
                       accepted=diag.accepted, evictions=diag.evictions, step_skipped=diag.step_skipped,
                       frozen_grad_leak=diag.frozen_grad_leak)
        else:
            rec.update(w2=[], bank_size=0, adapted=False, loss=None)
        metrics.records.append(rec)
        if observer is not None:
            observer(batch, labels, preds, adapter)
        if out is not None and adapter is not None and cfg.snapshot_every and (batch.index + 1) % cfg.snapshot_every == 0:
            adapter.save_snapshot(out / f"snapshot_{batch.index + 1:06d}.bin")

    if nn.checkpoint_bytes(source) != before:
        raise RuntimeError("source model was mutated during the run")


def run_experiment(cfg: RunConfig, observer=None) -> RunMetrics:
    """Run one arm over the configured stream.

    When ``cfg.out_dir`` is set, writes ``metrics.jsonl`` (one record per batch
    plus a summary), ``config.txt`` and, for successful runs only,
    ``table.txt``. ``observer(batch, labels, preds, adapter)`` is called after
    every batch, mainly for tests.
    """
    cfg.validate()
    out = Path(cfg.out_dir) if cfg.out_dir else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "table.txt").unlink(missing_ok=True)
    metrics = RunMetrics(cfg.arm, list(cfg.domains))
    t0 = time.perf_counter()
    try:
        _execute(cfg, metrics, out, observer)
    except Exception as exc:  # recorded, run marked failed
        log.exception("run failed")
        metrics.status = "failed"
        metrics.error = f"{type(exc).__name__}: {exc}"
    metrics.wall_clock = time.perf_counter() - t0

    if out is not None:
        (out / "config.txt").write_text(dump_config(cfg))
        (out / "metrics.jsonl").write_text(metrics.to_jsonl())
        if metrics.status == "ok":
            (out / "table.txt").write_text(format_table({cfg.arm: metrics}))
    return metrics


def _sweep_one(args):
    cfg, param, value = args
    sub = cfg.replace(**{param: value})
    if cfg.out_dir:
        sub = sub.replace(out_dir=str(Path(cfg.out_dir) / f"{param}={value}"))
    return run_experiment(sub)


def sweep(cfg: RunConfig, param: str, values: list, jobs: int = 1) -> list[tuple[object, RunMetrics]]:
    if param not in cfg.to_dict() or param in ("out_dir", "arm", "domains"):
        raise KeyError(f"cannot sweep over {param!r}")
    # reject bad values before any run starts
    for v in values:
        cfg.replace(**{param: v})
    tasks = [(cfg, param, v) for v in values]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_one, tasks))
    else:
        results = [_sweep_one(t) for t in tasks]
    return list(zip(values, results))


def format_sweep_table(param: str, results: list[tuple[object, RunMetrics]]) -> str:
    rows = {f"{v:g}" if isinstance(v, float) else str(v): m for v, m in results}
    table = format_table(rows, label=param)
    failed = [k for k, m in rows.items() if m.status != "ok"]
    if failed:
        table += f"failed runs: {', '.join(failed)}\n"
    return table
