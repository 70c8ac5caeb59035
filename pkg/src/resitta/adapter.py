"""Teacher-student self-training on memory-bank samples.

Per test batch the teacher runs with target statistics, updating each
normalization layer's statistics on the way through; its predictions are the
served outputs and its probabilities feed the memory bank. Every
``adapt_every`` batches the student takes one Adam step on the bank snapshot
and the teacher follows it by EMA.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import resibn
from .entrobank import Bank, BankConfig
from .nn import AdamState, BatchNorm, GradientTape, Network, NormMode, adam_step, softmax, softmax_cross_entropy

SNAPSHOT_MAGIC = b"RESITTA-SNAPSHOT v1\n"


# -- augmentation ------------------------------------------------------------


@dataclass
class StrongAugParams:
    jitter_scale: float = 0.2  # per-channel gain drawn from [1 - s, 1 + s]
    jitter_shift: float = 0.05  # per-channel offset drawn from [-s, s]
    rotate_deg: float = 15.0
    translate: float = 0.1  # fraction of image size
    flip_p: float = 0.5
    blur_p: float = 0.5
    blur_sigma: float = 0.5
    noise_std: float = 0.02

    @classmethod
    def identity(cls) -> StrongAugParams:
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.5, 0.0)


@dataclass
class AugmentationPolicy:
    input_size: tuple[int, int]
    strong: StrongAugParams = field(default_factory=StrongAugParams)
    rng_seed: int = 1
    calls: int = 0

    def rng(self, call_index: int) -> np.random.Generator:
        return np.random.default_rng([self.rng_seed, call_index])


def _resize_center_crop(x: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    h, w = x.shape[-2:]
    th, tw = size
    if (h, w) == (th, tw):
        return x
    scale = max(th / h, tw / w)
    zoomed = ndimage.zoom(x, (1,) * (x.ndim - 2) + (scale, scale), order=1)
    zh, zw = zoomed.shape[-2:]
    top, left = (zh - th) // 2, (zw - tw) // 2
    return zoomed[..., top : top + th, left : left + tw]


def _blur3(img: np.ndarray, sigma: float) -> np.ndarray:
    r = np.arange(-1, 2)
    k = np.exp(-(r**2) / (2 * sigma**2))
    k /= k.sum()
    out = ndimage.convolve1d(img, k, axis=-1, mode="nearest")
    return ndimage.convolve1d(out, k, axis=-2, mode="nearest")


def _affine(img: np.ndarray, angle: float, ty: float, tx: float) -> np.ndarray:
    c, h, w = img.shape
    cos, sin = np.cos(angle), np.sin(angle)
    rot = np.array([[cos, -sin], [sin, cos]])
    center = np.array([(h - 1) / 2, (w - 1) / 2])
    offset = center - rot @ (center + np.array([ty, tx]))
    out = np.empty_like(img)
    for ch in range(c):
        out[ch] = ndimage.affine_transform(img[ch], rot, offset=offset, order=1, mode="nearest")
    return out


def strong_augment(x: np.ndarray, params: StrongAugParams, rng: np.random.Generator) -> np.ndarray:
    out = np.array(x, dtype=np.float64)
    n, c, h, w = out.shape
    for i in range(n):
        img = out[i]
        gain = rng.uniform(1 - params.jitter_scale, 1 + params.jitter_scale, size=(c, 1, 1))
        shift = rng.uniform(-params.jitter_shift, params.jitter_shift, size=(c, 1, 1))
        img = img * gain + shift
        angle = np.deg2rad(rng.uniform(-params.rotate_deg, params.rotate_deg))
        ty, tx = rng.uniform(-params.translate, params.translate, size=2) * (h, w)
        if angle != 0.0 or ty != 0.0 or tx != 0.0:
            img = _affine(img, angle, ty, tx)
        if rng.random() < params.flip_p:
            img = img[:, :, ::-1]
        if rng.random() < params.blur_p:
            img = _blur3(img, params.blur_sigma)
        if params.noise_std > 0:
            img = img + params.noise_std * rng.standard_normal(img.shape)
        out[i] = img
    return out.astype(np.asarray(x).dtype)


def augment(policy: AugmentationPolicy, which: str, x: np.ndarray, call_index: int | None = None) -> np.ndarray:
    """Weak or strong view of an image or batch.

    Strong views are reproducible from ``(policy.rng_seed, call_index)``; when
    ``call_index`` is omitted the policy's own counter is used and advanced.
    """
    x = np.asarray(x)
    single = x.ndim == 3
    batch = x[None] if single else x
    if which == "weak":
        out = _resize_center_crop(batch, policy.input_size)
    elif which == "strong":
        if call_index is None:
            call_index = policy.calls
            policy.calls += 1
        out = strong_augment(_resize_center_crop(batch, policy.input_size), policy.strong, policy.rng(call_index))
    else:
        raise ValueError(f"unknown augmentation view {which!r}")
    return out[0] if single else out


# -- teacher / student -------------------------------------------------------


@dataclass
class ModelPair:
    student: Network
    teacher: Network
    nu_m: float = 1e-3

    @classmethod
    def from_source(cls, net: Network, nu_m: float = 1e-3) -> ModelPair:
        return cls(net.copy(), net.copy(), nu_m)

    def __post_init__(self) -> None:
        if self.student.describe() != self.teacher.describe():
            raise ValueError("student and teacher architectures differ")
        if not 0.0 <= self.nu_m <= 1.0:
            raise ValueError(f"nu_m must lie in [0, 1], got {self.nu_m}")


def teacher_ema(pair: ModelPair) -> ModelPair:
    nu = pair.nu_m
    t = pair.teacher.params.astype(np.float64)
    s = pair.student.params.astype(np.float64)
    pair.teacher.params[:] = (1.0 - nu) * t + nu * s
    return pair


def self_training_loss(pair: ModelPair, batch, policy: AugmentationPolicy) -> tuple[float, GradientTape]:
    """Mean CE between teacher probabilities on weak views and student softmax on strong views.

    The teacher pass is treated as constant; only the student is differentiated.
    """
    if len(batch) == 0:
        return 0.0, GradientTape(np.zeros_like(pair.student.params))
    x = np.stack([np.asarray(s) for s in batch])
    p_teacher = softmax(pair.teacher.forward(augment(policy, "weak", x), NormMode.EVAL_TARGET).astype(np.float64))
    logits = pair.student.forward(augment(policy, "strong", x), NormMode.EVAL_TARGET)
    loss, dlogits = softmax_cross_entropy(logits, p_teacher)
    return loss, pair.student.backward(dlogits)


# -- the per-batch pipeline --------------------------------------------------


@dataclass
class AdaptConfig:
    nu_b: float = 0.05
    eta_t: float = 0.01
    nu_m: float = 1e-3
    lr: float = 1e-3
    adapt_every: int = 1  # 0 disables self-training
    align_every: str = "batch"  # batch | adapt
    trainable: str = "all"  # all | bn_affine_only
    refresh_entropy_on_adapt: bool = False
    capacity: int = 64
    t_forget: int = 1000
    t_mature: int = 200
    use_outdated: bool = True
    use_overconfident: bool = True
    use_uncertainty: bool = True
    aug_seed: int = 1
    strong_aug: StrongAugParams = field(default_factory=StrongAugParams)

    def __post_init__(self) -> None:
        resibn.check_rates(self.nu_b, self.eta_t)
        if self.align_every not in ("batch", "adapt"):
            raise ValueError(f"align_every must be 'batch' or 'adapt', got {self.align_every!r}")
        if self.trainable not in ("all", "bn_affine_only"):
            raise ValueError(f"trainable must be 'all' or 'bn_affine_only', got {self.trainable!r}")
        if self.adapt_every < 0:
            raise ValueError("adapt_every must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


@dataclass
class StepDiagnostics:
    batch_index: int
    adapted: bool
    loss: float | None
    w2: list[float]  # mean per-channel W^2 for each normalization layer
    bank_size: int
    accepted: int
    evictions: dict
    step_skipped: bool = False
    # largest change of teacher params or any normalization statistic across
    # the backward pass and optimizer step; anything nonzero is a leak
    frozen_grad_leak: float = 0.0


class Adapter:
    def __init__(self, source: Network, cfg: AdaptConfig | None = None):
        self.cfg = cfg = cfg or AdaptConfig()
        self.pair = ModelPair.from_source(source, cfg.nu_m)
        for net in (self.pair.student, self.pair.teacher):
            for bn in net.norm_layers:
                s = bn.state
                bn.state = replace(
                    s, mu_t=s.mu_s.copy(), sigma_t=s.sigma_s.copy(), nu_b=cfg.nu_b, eta_t=cfg.eta_t
                )
        self.bank = Bank(
            BankConfig(
                cfg.capacity,
                cfg.t_forget,
                cfg.t_mature,
                source.num_classes,
                cfg.use_outdated,
                cfg.use_overconfident,
                cfg.use_uncertainty,
            )
        )
        self.opt = AdamState.zeros(source.num_params)
        self.mask = self.pair.student.param_mask(("batchnorm",)) if cfg.trainable == "bn_affine_only" else None
        self.policy = AugmentationPolicy(tuple(source.input_shape[1:]), cfg.strong_aug, cfg.aug_seed)
        self.batches_seen = 0
        self._layer_index = {id(bn): i for i, bn in enumerate(self.pair.teacher.norm_layers)}

    @property
    def norm_states(self) -> list[resibn.NormState]:
        return [bn.state for bn in self.pair.teacher.norm_layers]

    def _set_target(self, i: int, new: resibn.NormState) -> None:
        for net in (self.pair.teacher, self.pair.student):
            bn = net.norm_layers[i]
            bn.state = replace(bn.state, mu_t=new.mu_t, sigma_t=new.sigma_t)

    def _update_stats(self, bn: BatchNorm, x: np.ndarray) -> None:
        state = resibn.ema_update(bn.state, resibn.compute_batch_stats(x))
        if self.cfg.align_every == "batch":
            state = resibn.align_step(state)
        self._set_target(self._layer_index[id(bn)], state)

    def _align_all(self) -> None:
        for i, bn in enumerate(self.pair.teacher.norm_layers):
            self._set_target(i, resibn.align_step(bn.state))

    def _frozen_view(self) -> np.ndarray:
        parts = [self.pair.teacher.params.astype(np.float64)]
        for net in (self.pair.teacher, self.pair.student):
            for bn in net.norm_layers:
                st = bn.state
                parts += [st.mu_s, st.sigma_s, st.mu_t, st.sigma_t]
        return np.concatenate([np.asarray(p, dtype=np.float64).ravel() for p in parts])

    def step(self, batch_x: np.ndarray) -> tuple[np.ndarray, StepDiagnostics]:
        cfg = self.cfg
        teacher = self.pair.teacher
        logits = teacher.forward(batch_x, NormMode.EVAL_TARGET, stats_hook=self._update_stats)
        probs = softmax(logits.astype(np.float64))
        preds = probs.argmax(axis=1)

        accepted = 0
        evictions: dict[str, int] = {}
        for x, p in zip(batch_x, probs):
            res = self.bank.add(np.array(x), p)
            accepted += res.accepted
            if res.evicted is not None or not res.accepted:
                evictions[res.reason] = evictions.get(res.reason, 0) + 1

        self.batches_seen += 1
        adapted, loss, skipped, leak = False, None, False, 0.0
        if cfg.adapt_every and self.batches_seen % cfg.adapt_every == 0 and len(self.bank):
            before = self._frozen_view()
            loss, tape = self_training_loss(self.pair, [s for s, _ in self.bank.snapshot()], self.policy)
            skipped = not adam_step(self.pair.student, tape, self.opt, cfg.lr, self.mask)
            leak = float(np.max(np.abs(self._frozen_view() - before), initial=0.0))
            teacher_ema(self.pair)
            if cfg.align_every == "adapt":
                self._align_all()
            if cfg.refresh_entropy_on_adapt:
                xs = np.stack([s for s, _ in self.bank.snapshot()])
                self.bank.refresh_entropies(softmax(teacher.forward(xs, NormMode.EVAL_TARGET).astype(np.float64)))
            adapted = True

        diag = StepDiagnostics(
            batch_index=self.batches_seen - 1,
            adapted=adapted,
            loss=loss,
            w2=[float(resibn.wasserstein_sq(s).mean()) for s in self.norm_states],
            bank_size=len(self.bank),
            accepted=accepted,
            evictions=evictions,
            step_skipped=skipped,
            frozen_grad_leak=leak,
        )
        return preds, diag

    # -- snapshots -----------------------------------------------------------

    def snapshot_bytes(self) -> bytes:
        student, teacher = self.pair.student, self.pair.teacher
        records = self.bank.snapshot()
        sample_shape = list(student.input_shape)
        cfg = asdict(self.cfg)
        header = {
            "architecture": {
                "input_shape": list(student.input_shape),
                "num_classes": student.num_classes,
                "layers": student.describe(),
            },
            "param_count": student.num_params,
            "batches_seen": self.batches_seen,
            "policy_calls": self.policy.calls,
            "norm_channels": [bn.channels for bn in teacher.norm_layers],
            "adam": {"t": self.opt.t, "beta1": self.opt.beta1, "beta2": self.opt.beta2, "eps": self.opt.eps,
                     "skipped": self.opt.skipped},
            "bank": self.bank.state_dict(),
            "sample_shape": sample_shape,
            "config": cfg,
        }
        parts = [SNAPSHOT_MAGIC, json.dumps(header, sort_keys=True).encode() + b"\n"]
        parts.append(student.params.astype("<f4").tobytes())
        parts.append(teacher.params.astype("<f4").tobytes())
        for bn in teacher.norm_layers:
            for f in ("mu_s", "sigma_s", "mu_t", "sigma_t"):
                parts.append(getattr(bn.state, f).astype("<f4").tobytes())
        parts.append(self.opt.m.astype("<f4").tobytes())
        parts.append(self.opt.v.astype("<f4").tobytes())
        for s, _ in records:
            parts.append(np.asarray(s).astype("<f4").tobytes())
        return b"".join(parts)

    def save_snapshot(self, path) -> None:
        Path(path).write_bytes(self.snapshot_bytes())

    @classmethod
    def from_snapshot(cls, blob: bytes) -> Adapter:
        from .nn import layer_from_desc

        if not blob.startswith(SNAPSHOT_MAGIC):
            raise ValueError("not a resitta snapshot")
        rest = blob[len(SNAPSHOT_MAGIC) :]
        nl = rest.index(b"\n")
        header = json.loads(rest[:nl])
        payload = memoryview(rest[nl + 1 :])
        arch = header["architecture"]
        net = Network([layer_from_desc(d) for d in arch["layers"]], tuple(arch["input_shape"]),
                      arch["num_classes"], seed=None)
        cfgd = dict(header["config"])
        cfgd["strong_aug"] = StrongAugParams(**cfgd["strong_aug"])
        adapter = cls(net, AdaptConfig(**cfgd))
        off = 0

        def take(k):
            nonlocal off
            a = np.frombuffer(payload[off : off + 4 * k], dtype="<f4")
            if a.size != k:
                raise ValueError("truncated snapshot payload")
            off += 4 * k
            return a

        n = header["param_count"]
        adapter.pair.student.params[:] = take(n)
        adapter.pair.teacher.params[:] = take(n)
        for i, c in enumerate(header["norm_channels"]):
            vals = {f: take(c).astype(np.float64) for f in ("mu_s", "sigma_s", "mu_t", "sigma_t")}
            for net_ in (adapter.pair.student, adapter.pair.teacher):
                bn = net_.norm_layers[i]
                bn.state = replace(bn.state, **{k: v.copy() for k, v in vals.items()})
        adapter.opt.m = take(n).astype(np.float64)
        adapter.opt.v = take(n).astype(np.float64)
        a = header["adam"]
        adapter.opt.t, adapter.opt.skipped = a["t"], a["skipped"]
        shape = tuple(header["sample_shape"])
        size = int(np.prod(shape))
        records = header["bank"]["records"]
        samples = [take(size).reshape(shape).astype(np.float32) for _ in records]
        adapter.bank.load_state(header["bank"], samples)
        if off != len(payload):
            raise ValueError("trailing bytes in snapshot")
        adapter.batches_seen = header["batches_seen"]
        adapter.policy.calls = header["policy_calls"]
        return adapter

    @classmethod
    def load_snapshot(cls, path) -> Adapter:
        return cls.from_snapshot(Path(path).read_bytes())
