"""Desk-scale training tasks for comparing routers.

``char_lm``
    Fixed-window byte-level language model. The previous ``context`` bytes are
    embedded, concatenated and projected to ``d``; a pre-LayerNorm residual MoE
    block follows, then a linear readout over the 256 byte values::

        h = W_in [E[t-c], ..., E[t-1]] + b_in
        z = h + MoE(LayerNorm(h))
        logits = W_out z + b_out

``synthetic_regression``
    The MoE layer alone regresses a fixed random teacher network
    ``y = A tanh(B x)`` from standard-normal inputs.

Every number in a run is a function of ``(config, seed)``: model init, batch
order and Monte Carlo scale init draw from forks of ``Rng(seed)``. Data
(regression teacher, eval positions) does not depend on the seed.
"""
import concurrent.futures
import dataclasses
import hashlib
import json
import math
import os
import time
from collections import namedtuple
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .moe import MoeLayer, moe_backward, moe_forward, save_checkpoint
from .numerics import Adam, ContractViolation, Rng, clip_by_global_norm, kaiming_init, matmul
from .routers import RouterKind, gate_statistics, monte_carlo_scale_init, param_count

VOCAB = 256
DATA_SEED = 20240917
LN_EPS = 1e-5

ParamCounts = namedtuple("ParamCounts", "total active expert_total expert_active")


class TrainingDiverged(RuntimeError):
    def __init__(self, step, loss, stats):
        self.step = step
        self.loss = loss
        self.stats = stats
        super().__init__(f"non-finite loss {loss!r} at step {step}; gate statistics: {stats}")


@dataclass
class TrainConfig:
    # [model]
    task: str = "char_lm"
    d: int = 64
    d_emb: int = 16
    context: int = 8
    num_experts: int = 16
    top_k: int = 2
    expert_hidden: int = 64
    activation: str = "gelu"
    # [router]
    router: str = "kern"
    eps: float = 1e-8
    init_method: str = "one"
    mc_samples: int = 100000
    renormalize_after_topk: bool = False
    # [train]
    steps: int = 2000
    batch_size: int = 32
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    eval_every: int = 100
    eval_size: int = 2048
    dataset_size: int = 4096
    seeds: tuple = (0,)
    corpus: str = ""
    # [report]
    name: str = ""
    checkpoint: bool = True

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        self.validate()

    def validate(self):
        if self.task not in ("char_lm", "synthetic_regression"):
            raise ValueError(f"task must be char_lm or synthetic_regression, got {self.task!r}")
        RouterKind.parse(self.router)
        if self.init_method not in ("one", "monte_carlo"):
            raise ValueError(f"init_method must be 'one' or 'monte_carlo', got {self.init_method!r}")
        if self.activation not in ("gelu", "relu"):
            raise ValueError(f"activation must be gelu or relu, got {self.activation!r}")
        for key in ("d", "d_emb", "context", "num_experts", "top_k", "expert_hidden", "steps",
                    "batch_size", "eval_every", "eval_size", "dataset_size", "mc_samples"):
            if getattr(self, key) < 1:
                raise ValueError(f"{key} must be >= 1")
        if self.top_k > self.num_experts:
            raise ValueError(f"top_k={self.top_k} exceeds num_experts={self.num_experts}")
        if not self.seeds:
            raise ValueError("seeds must list at least one seed")
        if self.renormalize_after_topk and RouterKind.parse(self.router) not in (
                RouterKind.SOFTMAX, RouterKind.SIGMOID):
            raise ValueError("renormalize_after_topk only applies to softmax or sigmoid routers")

    @property
    def kind(self):
        return RouterKind.parse(self.router)

    @property
    def label(self):
        return self.name or f"{self.kind.value}-{self.num_experts}-{self.top_k}-{self.expert_hidden}"

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


# --------------------------------------------------------------------------- models


def _layernorm(h, g, b):
    mu = h.mean(axis=1, keepdims=True)
    var = h.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (h - mu) * inv
    return xhat * g + b, (xhat, inv)


def _layernorm_backward(dy, g, cache):
    xhat, inv = cache
    dxhat = dy * g
    dh = inv * (dxhat - dxhat.mean(axis=1, keepdims=True)
                - xhat * np.mean(dxhat * xhat, axis=1, keepdims=True))
    return dh, np.sum(dy * xhat, axis=0), dy.sum(axis=0)


def _build_moe(cfg, rng, mc_rng):
    scale = 1.0
    if cfg.init_method == "monte_carlo" and cfg.kind.is_kern:
        scale = monte_carlo_scale_init(cfg.num_experts, cfg.top_k, cfg.mc_samples, mc_rng)
    return MoeLayer.init(cfg.kind, cfg.num_experts, cfg.d, cfg.expert_hidden, cfg.top_k, rng,
                         activation=cfg.activation, eps=cfg.eps, scale_initial=scale,
                         renormalize=cfg.renormalize_after_topk)


class ToyLm:
    """Fixed-window byte LM with one residual MoE block."""

    def __init__(self, cfg, rng, mc_rng):
        self.context = cfg.context
        self.E = rng.normal((VOCAB, cfg.d_emb))
        self.W_in = kaiming_init(cfg.d, cfg.context * cfg.d_emb, rng)
        self.b_in = np.zeros(cfg.d)
        self.ln_g = np.ones(cfg.d)
        self.ln_b = np.zeros(cfg.d)
        self.moe = _build_moe(cfg, rng, mc_rng)
        self.W_out = 0.02 * rng.normal((VOCAB, cfg.d))
        self.b_out = np.zeros(VOCAB)

    def params(self):
        out = {"E": self.E, "W_in": self.W_in, "b_in": self.b_in, "ln_g": self.ln_g,
               "ln_b": self.ln_b, "W_out": self.W_out, "b_out": self.b_out}
        out.update({f"moe.{k}": v for k, v in self.moe.params().items()})
        return out

    def dense_param_count(self):
        return sum(p.size for name, p in self.params().items() if not name.startswith("moe."))

    def _forward(self, ctx):
        B = ctx.shape[0]
        x0 = self.E[ctx].reshape(B, -1)
        h = matmul(x0, self.W_in.T) + self.b_in
        u, ln_cache = _layernorm(h, self.ln_g, self.ln_b)
        m, moe_cache = moe_forward(self.moe, u)
        z = h + m
        logits = matmul(z, self.W_out.T) + self.b_out
        return logits, (x0, ln_cache, moe_cache, z)

    @staticmethod
    def _cross_entropy(logits, targets):
        shifted = logits - logits.max(axis=1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=1))
        loss = float(np.mean(logz - shifted[np.arange(len(targets)), targets]))
        return loss, shifted, logz

    def loss(self, ctx, targets):
        logits, (_, _, moe_cache, _) = self._forward(ctx)
        return self._cross_entropy(logits, targets)[0], moe_cache.gates

    def loss_and_grads(self, ctx, targets):
        B = ctx.shape[0]
        logits, (x0, ln_cache, moe_cache, z) = self._forward(ctx)
        loss, shifted, logz = self._cross_entropy(logits, targets)
        dlogits = np.exp(shifted - logz[:, None])
        dlogits[np.arange(B), targets] -= 1.0
        dlogits /= B
        grads = {"W_out": matmul(dlogits.T, z), "b_out": dlogits.sum(axis=0)}
        dz = matmul(dlogits, self.W_out)
        mg = moe_backward(self.moe, moe_cache, dz)
        du = mg.x
        dh_ln, grads["ln_g"], grads["ln_b"] = _layernorm_backward(du, self.ln_g, ln_cache)
        dh = dz + dh_ln
        grads["W_in"] = matmul(dh.T, x0)
        grads["b_in"] = dh.sum(axis=0)
        dx0 = matmul(dh, self.W_in).reshape(B, self.context, -1)
        dE = np.zeros_like(self.E)
        np.add.at(dE, ctx, dx0)
        grads["E"] = dE
        grads.update({f"moe.{k}": v for k, v in mg.params.items()})
        return loss, grads, moe_cache.gates


class MoeRegressor:
    """The bare MoE layer trained with loss ``mean_b ||MoE(x_b) - y_b||^2 / 2``."""

    def __init__(self, cfg, rng, mc_rng):
        self.moe = _build_moe(cfg, rng, mc_rng)

    def params(self):
        return {f"moe.{k}": v for k, v in self.moe.params().items()}

    def dense_param_count(self):
        return 0

    def loss(self, X, Y):
        out, cache = moe_forward(self.moe, X)
        r = out - Y
        return 0.5 * float(np.mean(np.sum(r * r, axis=1))), cache.gates

    def loss_and_grads(self, X, Y):
        out, cache = moe_forward(self.moe, X)
        r = out - Y
        loss = 0.5 * float(np.mean(np.sum(r * r, axis=1)))
        mg = moe_backward(self.moe, cache, r / X.shape[0])
        return loss, {f"moe.{k}": v for k, v in mg.params.items()}, cache.gates


def active_param_count(model):
    """Total and per-token active parameter counts.

    Active parameters are the dense parts, the router and ``k`` experts; the
    total includes all ``M`` experts.
    """
    moe = model.moe
    per_expert = moe.expert_param_size()
    shared = model.dense_param_count() + param_count(moe.router)
    return ParamCounts(shared + moe.num_experts * per_expert, shared + moe.k * per_expert,
                       moe.num_experts * per_expert, moe.k * per_expert)


# --------------------------------------------------------------------------- data


class CharData:
    """Byte stream split into a training prefix (90%) and a held-out tail (10%)."""

    def __init__(self, text, context, eval_size):
        data = np.frombuffer(text.encode("utf-8") if isinstance(text, str) else bytes(text),
                             dtype=np.uint8).astype(np.int64)
        split = int(len(data) * 0.9)
        if split - context < 2 or len(data) - split - context < 2:
            raise ContractViolation(
                f"corpus of {len(data)} bytes is too short for context window {context}"
            )
        self.data = data
        self.context = context
        self.split = split
        hi = len(data) - 1
        lo = split + context
        self.eval_pos = np.unique(np.linspace(lo, hi, min(eval_size, hi - lo + 1)).astype(np.int64))
        self._offsets = np.arange(-context, 0)

    def _gather(self, pos):
        return self.data[pos[:, None] + self._offsets], self.data[pos]

    def batch(self, rng, size):
        pos = self.context + rng.integers(self.split - self.context, size)
        return self._gather(pos)

    def eval_batch(self):
        return self._gather(self.eval_pos)


class RegressionData:
    """Seed-independent teacher ``y = A tanh(B x)`` with fixed train and eval sets."""

    def __init__(self, d, size, eval_size):
        rng = Rng(DATA_SEED)
        B = kaiming_init(4 * d, d, rng)
        A = kaiming_init(d, 4 * d, rng)
        self.X = rng.normal((size, d))
        self.Y = np.tanh(self.X @ B.T) @ A.T
        self.X_eval = rng.normal((eval_size, d))
        self.Y_eval = np.tanh(self.X_eval @ B.T) @ A.T

    def batch(self, rng, size):
        idx = rng.integers(self.X.shape[0], size)
        return self.X[idx], self.Y[idx]

    def eval_batch(self):
        return self.X_eval, self.Y_eval


def load_task_data(cfg, corpus_text=None):
    if cfg.task == "synthetic_regression":
        return RegressionData(cfg.d, cfg.dataset_size, cfg.eval_size)
    if corpus_text is None:
        if not cfg.corpus:
            raise ContractViolation("char_lm task needs a corpus file")
        corpus_text = Path(cfg.corpus).read_text(encoding="utf-8")
    if not corpus_text:
        raise ContractViolation("corpus is empty")
    return CharData(corpus_text, cfg.context, cfg.eval_size)


# --------------------------------------------------------------------------- runs


def config_hash(cfg):
    """SHA-256 (hex) of the canonical config text from :func:`moerlab.config.dump_config`."""
    from .config import dump_config
    return hashlib.sha256(dump_config(cfg).encode("utf-8")).hexdigest()


@dataclass
class RunReport:
    config_hash: str
    seed: int
    label: str
    rows: list                      # (step, train_loss, eval_loss)
    final_eval_loss: float
    wall_clock: float
    params: ParamCounts
    gate_stats: dict = field(default_factory=dict)
    gamma: float = 1.0
    scale_initial: float = 1.0

    @property
    def steps(self):
        return [r[0] for r in self.rows]

    def csv_text(self):
        lines = ["step,train_loss,eval_loss"]
        lines += [f"{s},{tr:.17g},{ev:.17g}" for s, tr, ev in self.rows]
        return "\n".join(lines) + "\n"

    def summary(self, cfg):
        from .config import dump_config
        return {
            "label": self.label,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "config": dump_config(cfg),
            "final_eval_loss": self.final_eval_loss,
            "final_train_loss": self.rows[-1][1],
            "params_total": self.params.total,
            "params_active": self.params.active,
            "gate_stats": self.gate_stats,
            "gamma": self.gamma,
            "scale_initial": self.scale_initial,
            # the only field that varies between identical runs
            "wall_clock_seconds": self.wall_clock,
        }

    def write(self, cfg, out_dir, stem=None):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        stem = stem or f"{cfg.label}_seed{self.seed}"
        csv_path = out_dir / f"{stem}.csv"
        csv_path.write_text(self.csv_text(), encoding="utf-8")
        (out_dir / f"{stem}.summary.json").write_text(
            json.dumps(self.summary(cfg), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return csv_path


def _eval(model, data):
    X, Y = data.eval_batch()
    loss, gates = model.loss(X, Y)
    return loss, gates


def train(cfg, seed=None, data=None, corpus_text=None, out_dir=None, progress=None):
    """Train one model and return its :class:`RunReport`.

    Rows are recorded at step 0 and every ``eval_every`` steps (plus the final
    step). ``train_loss`` at step 0 is the loss of the first batch before any
    update; later rows average the batch losses since the previous row.
    """
    seed = cfg.seeds[0] if seed is None else int(seed)
    if data is None:
        data = load_task_data(cfg, corpus_text)
    root = Rng(seed)
    init_rng, batch_rng, mc_rng = root.fork(1), root.fork(2), root.fork(3)
    model = (ToyLm if cfg.task == "char_lm" else MoeRegressor)(cfg, init_rng, mc_rng)
    params = model.params()
    opt = Adam(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps_opt=cfg.adam_eps)
    start = time.perf_counter()
    record_at = set(range(0, cfg.steps + 1, cfg.eval_every)) | {cfg.steps}

    rows = []
    window = []
    gates = None
    for step in range(cfg.steps + 1):
        if step in record_at:
            ev, gates = _eval(model, data)
            rows.append([step, float(np.mean(window)) if window else None, ev])
            window = []
            if not math.isfinite(ev):
                raise TrainingDiverged(step, ev, gate_statistics(gates))
            if progress:
                progress(step, ev)
        if step == cfg.steps:
            break
        X, Y = data.batch(batch_rng, cfg.batch_size)
        loss, grads, batch_gates = model.loss_and_grads(X, Y)
        if not math.isfinite(loss):
            raise TrainingDiverged(step, loss, gate_statistics(batch_gates))
        if step == 0:
            rows[0][1] = loss
        window.append(loss)
        clip_by_global_norm(grads, cfg.grad_clip)
        opt.step(params, grads)

    report = RunReport(
        config_hash=config_hash(cfg), seed=seed, label=cfg.label,
        rows=[tuple(r) for r in rows], final_eval_loss=rows[-1][2],
        wall_clock=time.perf_counter() - start, params=active_param_count(model),
        gate_stats=gate_statistics(gates), gamma=float(model.moe.router.gamma),
        scale_initial=float(model.moe.router.scale_initial),
    )
    if out_dir is not None:
        report.write(cfg, out_dir)
        if cfg.checkpoint:
            save_checkpoint(model.moe, Path(out_dir) / f"{cfg.label}_seed{seed}.moe.bin")
    return report


# --------------------------------------------------------------------------- aggregation


def aggregate(reports):
    """Per-step mean and population variance of eval loss across seeds.

    Returns ``(steps, means, variances)``. Every report must share one step grid.
    """
    grids = {tuple(r.steps) for r in reports}
    if len(grids) != 1:
        raise ValueError("runs do not share a step grid")
    evals = np.array([[row[2] for row in r.rows] for r in reports])
    return list(grids.pop()), evals.mean(axis=0), evals.var(axis=0)


def aggregate_csv_text(label_reports):
    """Table with one ``mean`` and one ``variance`` row per label, one column per eval step."""
    lines = []
    for i, (label, reports) in enumerate(label_reports):
        steps, mean, var = aggregate(reports)
        if i == 0:
            lines.append("model,statistic," + ",".join(f"step_{s}" for s in steps))
        lines.append(f"{label},mean," + ",".join(f"{v:.17g}" for v in mean))
        lines.append(f"{label},variance," + ",".join(f"{v:.17g}" for v in var))
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------- sweeps


def sparsity_sweep(base, num_experts_list):
    """Vary the expert count at fixed ``top_k`` and expert width."""
    return [base.replace(num_experts=m, name=f"{base.kind.value}-{m}-{base.top_k}-{base.expert_hidden}")
            for m in num_experts_list]


def granularity_sweep(base, top_ks):
    """Vary ``top_k`` with expert width scaled so ``top_k * expert_hidden`` stays fixed."""
    budget = base.top_k * base.expert_hidden
    out = []
    for k in top_ks:
        if budget % k:
            raise ValueError(f"top_k={k} does not divide the hidden budget {budget}")
        h = budget // k
        out.append(base.replace(top_k=k, expert_hidden=h,
                                name=f"{base.kind.value}-{base.num_experts}-{k}-{h}"))
    return out


def _run_one(args):
    cfg, seed, corpus_text, out_dir = args
    return train(cfg, seed, corpus_text=corpus_text, out_dir=out_dir)


@dataclass
class SweepReport:
    configs: list
    runs: list          # list of lists of RunReport, parallel to configs

    def table(self):
        rows = []
        for cfg, reports in zip(self.configs, self.runs):
            finals = np.array([r.final_eval_loss for r in reports])
            p = reports[0].params
            rows.append({
                "label": cfg.label, "router": cfg.kind.value, "num_experts": cfg.num_experts,
                "top_k": cfg.top_k, "expert_hidden": cfg.expert_hidden,
                "active_params": p.active, "total_params": p.total,
                "final_eval_mean": float(finals.mean()), "final_eval_var": float(finals.var()),
                "zero_gate_fraction": float(np.mean([r.gate_stats["zero_gate_fraction"] for r in reports])),
                "negative_gate_fraction": float(np.mean([r.gate_stats["negative_gate_fraction"] for r in reports])),
            })
        rows.sort(key=lambda r: (r["num_experts"], r["top_k"], r["router"], r["label"]))
        return rows

    def table_csv_text(self):
        rows = self.table()
        cols = list(rows[0])
        lines = [",".join(cols)]
        for r in rows:
            lines.append(",".join(f"{r[c]:.17g}" if isinstance(r[c], float) else str(r[c]) for c in cols))
        return "\n".join(lines) + "\n"


def sweep_threads():
    try:
        return max(1, int(os.environ.get("MOERLAB_THREADS", "1")))
    except ValueError:
        return 1


def sweep(configs, seeds=None, corpus_text=None, out_dir=None, threads=None):
    """Train every config for every seed; runs are independent and may use worker processes."""
    configs = list(configs)
    if not configs:
        raise ValueError("sweep needs at least one config")
    if len({c.task for c in configs}) != 1:
        raise ValueError("all configs in a sweep must share a task")
    labels = [c.label for c in configs]
    if len(set(labels)) != len(labels):
        raise ValueError(f"sweep labels must be unique, got {labels}")
    jobs = [(cfg, s, corpus_text, out_dir) for cfg in configs for s in (seeds or cfg.seeds)]
    threads = threads or sweep_threads()
    if threads > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    runs = []
    i = 0
    for cfg in configs:
        n = len(seeds or cfg.seeds)
        runs.append(results[i:i + n])
        i += n
    report = SweepReport(configs, runs)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "sweep_table.csv").write_text(report.table_csv_text(), encoding="utf-8")
        (Path(out_dir) / "aggregate.csv").write_text(
            aggregate_csv_text([(c.label, r) for c, r in zip(configs, runs)]), encoding="utf-8")
    return report
