"""Leave-one-domain-out experiments, suites, cost accounting and feature export."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import domains as D
from .errors import CheckpointError, ConfigurationError, ExperimentError
from .fed import (GUIDING, NONE, PROX, ClientState, ParamPartition, Regularizer, ServerState,
                  run_rounds)
from .model import BN, IN_FIRST, NORM_SCHEMES, STAT_MIX, XAN, ModelSpec, build_model, load_checkpoint, save_checkpoint
from .tensor import no_grad, rng_for

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
LAMBDA_GRID = (0.0, 0.25, 0.5, 0.75, 1.0)
MU_GRID = (0.001, 0.01, 0.1)
ABLATION_ARMS = tuple(f"{scheme}+{reg}" for reg in (NONE, GUIDING) for scheme in (BN, IN_FIRST, STAT_MIX, XAN))

RESULT_FIELDS = ("schema", "method", "held_out", "seed", "test_acc", "selection_round",
                 "mean_val_acc", "data_hash")
ROUND_FIELDS = ("schema", "method", "held_out", "seed", "round", "client_id", "train_loss",
                "reg_loss", "val_acc")


@dataclass
class ExperimentConfig:
    model: dict = field(default_factory=lambda: asdict(ModelSpec()))
    preset: str = None
    held_out: object = "all"
    norm_scheme: str = XAN
    regularizer: str = GUIDING
    lam: float = 0.5
    mu: float = 0.01
    rounds: int = 40
    epochs: int = 1
    lr: float = 2e-3
    batch_size: int = 32
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    output_dir: str = "runs"
    n_per_domain: int = 800
    loss_reduction: str = "sum"
    method: str = None

    def __post_init__(self):
        # JSON form, so configs built in code and read from disk compare equal
        self.model = json.loads(json.dumps(self.model))

    def validate(self):
        if self.norm_scheme not in NORM_SCHEMES:
            raise ConfigurationError(f"unknown norm_scheme {self.norm_scheme!r}")
        if not self.seeds:
            raise ConfigurationError("seeds must be non-empty")
        if self.rounds < 1 or self.epochs < 0 or self.batch_size < 1 or not self.lr > 0:
            raise ConfigurationError("rounds >= 1, epochs >= 0, batch_size >= 1, lr > 0 required")
        if self.loss_reduction not in ("sum", "mean"):
            raise ConfigurationError(f"loss_reduction must be 'sum' or 'mean', got {self.loss_reduction!r}")
        self.regularizer_obj()
        self.model_spec().validate()
        return self

    def model_spec(self):
        return ModelSpec(**{**self.model, "norm_scheme": self.norm_scheme})

    def regularizer_obj(self):
        if self.regularizer == NONE:
            return Regularizer.none()
        if self.regularizer == GUIDING:
            return Regularizer.guiding(self.lam)
        if self.regularizer == PROX:
            return Regularizer.prox(self.mu)
        raise ConfigurationError(f"unknown regularizer {self.regularizer!r}")

    def label(self):
        if self.method:
            return self.method
        reg = self.regularizer_obj()
        base = {BN: "FedAvg", XAN: "PerXAN"}.get(self.norm_scheme, f"FedAvg-{self.norm_scheme}")
        if reg.kind == GUIDING and reg.weight > 0:
            return f"g{base}(lambda={reg.weight:g})"
        if reg.kind == PROX:
            return f"{base}+FedProx(mu={reg.weight:g})"
        return base

    @classmethod
    def from_json(cls, path):
        raw = json.loads(Path(path).read_text())
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**raw)
        if "model" in raw:
            cfg.model = {**asdict(ModelSpec()), **raw["model"]}
        return cfg.validate()

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)


@dataclass
class ResultRow:
    method: str
    held_out: int
    seed: int
    test_acc: float
    selection_round: int
    mean_val_acc: float
    data_hash: str

    def __post_init__(self):
        if not 0.0 <= self.test_acc <= 100.0:
            raise ValueError(f"accuracy {self.test_acc} outside [0, 100]")

    def values(self):
        return (SCHEMA_VERSION, self.method, self.held_out, self.seed, f"{self.test_acc:.4f}",
                self.selection_round, f"{self.mean_val_acc:.4f}", self.data_hash)


@dataclass
class RunResult:
    row: ResultRow
    history: list
    best_model: object
    final_model: object
    plan: object


@dataclass
class CostReport:
    method: str
    memory: int
    communication: int
    computation: int


# one run -----------------------------------------------------------------

_CACHE = {}


def run_key(config, held_out, seed):
    keys = ("model", "preset", "norm_scheme", "rounds", "epochs", "lr", "batch_size",
            "n_per_domain", "loss_reduction")
    payload = {k: getattr(config, k) for k in keys}
    reg = config.regularizer_obj()
    if reg.kind == GUIDING and reg.weight == 0:
        # same update rule as NONE, so the same run
        reg = Regularizer.none()
    payload.update(reg=[reg.kind, reg.weight], held_out=held_out, seed=seed,
                   preset_text=Path(config.preset).read_text() if config.preset else None)
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def held_out_domains(config, domains):
    ids = [d.domain_id for d in domains]
    if config.held_out == "all":
        return ids
    held = config.held_out if isinstance(config.held_out, list) else [config.held_out]
    for h in held:
        if h not in ids:
            raise ConfigurationError(f"held_out {h!r} not in preset domains {ids}")
    return list(held)


def build_federation(config, held_out, seed, domains=None):
    """Server, clients, test set and split plan for one (held-out domain, seed)."""
    domains = domains if domains is not None else D.load_preset(config.preset)
    spec = config.model_spec()
    data_clients, test, plan = D.leave_one_domain_out(
        domains, held_out, config.n_per_domain, seed, spec.num_classes, spec.input_size)
    init = build_model(spec, seed)
    server = ServerState(init.copy(), total_rounds=config.rounds)
    clients = [ClientState(cd.domain_id, init.copy(), cd.train.images, cd.train.labels,
                           cd.val.images, cd.val.labels, rng_for(seed, f"shuffle/{cd.domain_id}"))
               for cd in data_clients]
    return server, clients, test, plan


def data_hash(clients, test, plan):
    h = hashlib.sha256(plan.digest().encode())
    for c in clients:
        h.update(hashlib.sha256(np.ascontiguousarray(c.train_x).tobytes()).digest())
    h.update(test.digest().encode())
    return h.hexdigest()[:16]


def run_single(config, held_out, seed, use_cache=True, keep_params=False):
    """Train one federation and evaluate the validation-selected global model."""
    key = run_key(config, held_out, seed)
    if use_cache and not keep_params and key in _CACHE:
        cached = _CACHE[key]
        return replace(cached, row=replace(cached.row, method=config.label()))
    server, clients, test, plan = build_federation(config, held_out, seed)
    partition = ParamPartition.from_model(server.global_model)
    best = {"acc": -1.0, "round": 0, "params": None}

    def select(srv, rlog):
        if rlog.mean_val_acc > best["acc"]:
            best.update(acc=rlog.mean_val_acc, round=rlog.round,
                        params={k: v.copy() for k, v in srv.global_model.params.items()})

    try:
        run_rounds(server, clients, partition, config.regularizer_obj(), config.rounds, config.epochs,
                   config.lr, config.batch_size, config.loss_reduction, on_round=select,
                   keep_params=keep_params)
    except Exception as exc:
        raise ExperimentError(f"{config.label()} held_out={held_out} seed={seed}: {exc}") from exc
    best_model = server.global_model.copy()
    best_model.params = best["params"]
    acc = best_model.accuracy(test.images, test.labels)
    row = ResultRow(config.label(), held_out, seed, acc, best["round"], best["acc"],
                    data_hash(clients, test, plan))
    result = RunResult(row, server.history, best_model, server.global_model, plan)
    log.info("%s held_out=%s seed=%s test_acc=%.2f round=%d", row.method, held_out, seed, acc, row.selection_round)
    if use_cache and not keep_params:
        _CACHE[key] = result
    return result


def clear_cache():
    _CACHE.clear()


def _run_job(args):
    config, held_out, seed = args
    return run_single(config, held_out, seed)


def run_all(config):
    """RunResults for every (held-out domain, seed) pair, in deterministic order."""
    config.validate()
    jobs = [(config, h, s) for h in held_out_domains(config, D.load_preset(config.preset))
            for s in config.seeds]
    workers = max(1, int(os.environ.get("FDGLAB_THREADS", "1")))
    if workers == 1 or len(jobs) == 1:
        return [_run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(_run_job, jobs))
    for (cfg, h, s), res in zip(jobs, results):
        _CACHE.setdefault(run_key(cfg, h, s), res)
    return results


# CSV ---------------------------------------------------------------------

def _csv_text(header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _out_dir(config):
    out = Path(config.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ExperimentError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _write(path, text):
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise ExperimentError(f"cannot write {path}: {exc}") from exc


def round_rows(result):
    r = result.row
    return [(SCHEMA_VERSION, r.method, r.held_out, r.seed, c.round, c.client_id,
             f"{c.train_loss:.6f}", f"{c.reg_loss:.6f}", f"{c.val_acc:.4f}")
            for rlog in result.history for c in rlog.clients]


def run_experiment(config, write_checkpoints=True):
    """Run every (held-out, seed) pair and write results.csv, rounds.csv and checkpoints."""
    results = run_all(config)
    out = _out_dir(config)
    rows = [r.row for r in results]
    _write(out / "results.csv", _csv_text(RESULT_FIELDS, [r.values() for r in rows]))
    _write(out / "rounds.csv", _csv_text(ROUND_FIELDS, [x for r in results for x in round_rows(r)]))
    if write_checkpoints:
        ckpt = out / "checkpoints"
        ckpt.mkdir(exist_ok=True)
        for r in results:
            stem = f"{_slug(r.row.method)}_h{r.row.held_out}_s{r.row.seed}"
            save_checkpoint(r.best_model, ckpt / f"{stem}_best.bin")
            save_checkpoint(r.final_model, ckpt / f"{stem}_final.bin")
    return rows


def _slug(text):
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in text)


def summarize(rows, domain_ids):
    """Per-domain means over seeds plus their average."""
    per = []
    for did in domain_ids:
        accs = [r.test_acc for r in rows if r.held_out == did]
        per.append(float(np.mean(accs)) if accs else float("nan"))
    return per, float(np.mean(per))


def _summary_header(lead, domain_ids):
    return ("schema",) + tuple(lead) + tuple(f"acc_{d}" for d in domain_ids) + ("avg",)


def _fmt(values):
    return [f"{v:.4f}" for v in values]


# suites ------------------------------------------------------------------

@dataclass
class SuiteRow:
    arm: str
    norm_scheme: str
    regularizer: str
    weight: float
    per_domain: list
    avg: float
    data_hash: str
    rows: list


def run_arm(config, arm, norm_scheme, reg):
    cfg = replace(config, norm_scheme=norm_scheme, regularizer=reg.kind,
                  lam=reg.weight if reg.kind == GUIDING else config.lam,
                  mu=reg.weight if reg.kind == PROX else config.mu, method=arm)
    rows = [r.row for r in run_all(cfg)]
    ids = held_out_domains(cfg, D.load_preset(cfg.preset))
    per, avg = summarize(rows, ids)
    digest = hashlib.sha256("".join(f"{r.held_out}:{r.seed}:{r.data_hash};" for r in rows).encode()).hexdigest()[:16]
    return SuiteRow(arm, norm_scheme, reg.kind, reg.weight, per, avg, digest, rows)


def _write_suite(config, name, suite, lead_fields, lead_fn):
    out = _out_dir(config)
    ids = held_out_domains(config, D.load_preset(config.preset))
    body = [(SCHEMA_VERSION,) + tuple(lead_fn(s)) + tuple(_fmt(s.per_domain)) + (f"{s.avg:.4f}",)
            for s in suite]
    _write(out / f"{name}.csv", _csv_text(_summary_header(lead_fields, ids), body))
    runs = [r.values() for s in suite for r in s.rows]
    _write(out / f"{name}_runs.csv", _csv_text(RESULT_FIELDS, runs))


def lambda_sweep(base):
    """GUIDING at every lambda on the grid; one summary row per lambda (sweep.csv)."""
    if base.regularizer != GUIDING:
        raise ConfigurationError("lambda_sweep needs a GUIDING base config")
    suite = [run_arm(base, f"lambda={lam:g}", base.norm_scheme, Regularizer.guiding(lam)) for lam in LAMBDA_GRID]
    _write_suite(base, "sweep", suite, ("lambda", "data_hash"), lambda s: (f"{s.weight:g}", s.data_hash))
    return suite


def best_lambda(sweep):
    """Lambda with the highest average; earliest grid value wins ties."""
    best = max(range(len(sweep)), key=lambda i: (sweep[i].avg, -i))
    return sweep[best].weight


def ablation_suite(base, lam=None):
    """{BN, IN_FIRST, STAT_MIX, XAN} x {NONE, GUIDING(best lambda)} (ablation.csv)."""
    if lam is None:
        lam = best_lambda(lambda_sweep(replace(base, regularizer=GUIDING)))
    suite = []
    for arm in ABLATION_ARMS:
        scheme, kind = arm.split("+")
        reg = Regularizer.none() if kind == NONE else Regularizer.guiding(lam)
        suite.append(run_arm(base, arm, scheme, reg))
    _write_suite(base, "ablation", suite, ("arm", "norm_scheme", "regularizer", "weight", "data_hash"),
                 lambda s: (s.arm, s.norm_scheme, s.regularizer, f"{s.weight:g}", s.data_hash))
    return suite


def fedprox_comparison(base, mu_grid=MU_GRID, lam=None):
    """PerXAN, PerXAN + proximal term per mu, and gPerXAN(best lambda) (prox.csv)."""
    if base.norm_scheme != XAN:
        raise ConfigurationError("fedprox_comparison needs norm_scheme XAN")
    if lam is None:
        lam = best_lambda(lambda_sweep(replace(base, regularizer=GUIDING)))
    suite = [run_arm(base, "PerXAN", XAN, Regularizer.none())]
    suite += [run_arm(base, f"PerXAN+FedProx(mu={mu:g})", XAN, Regularizer.prox(mu)) for mu in mu_grid]
    suite.append(run_arm(base, f"gPerXAN(lambda={lam:g})", XAN, Regularizer.guiding(lam)))
    _write_suite(base, "prox", suite, ("arm", "regularizer", "weight", "data_hash"),
                 lambda s: (s.arm, s.regularizer, f"{s.weight:g}", s.data_hash))
    return suite


# cost accounting ---------------------------------------------------------

COST_METHODS = ("FEDAVG", "COPA", "FEDDG_GA", "GPERXAN")


def cost_model(method, R, N, C, d):
    """Parameter-count memory / communication / computation per method."""
    for name, v in (("R", R), ("N", N), ("C", C), ("d", d)):
        if int(v) != v or v < 1:
            raise ConfigurationError(f"{name} must be a positive integer, got {v}")
    R, N, C, d = int(R), int(N), int(C), int(d)
    method = method.upper()
    if method == "FEDAVG":
        return CostReport(method, R, R, R)
    if method == "COPA":
        x = R + N * (N - 1) * C * d
        return CostReport(method, x, x, x)
    if method == "FEDDG_GA":
        return CostReport(method, 2 * R, R, 2 * R)
    if method == "GPERXAN":
        return CostReport(method, R, R, R + N * C * d)
    raise ConfigurationError(f"unknown method {method!r}; expected one of {COST_METHODS}")


def format_cost(report):
    return (f"method={report.method} memory={report.memory} "
            f"communication={report.communication} computation={report.computation}\n")


# feature export ----------------------------------------------------------

def export_features(model, data, path=None, batch_size=256):
    """Eval-mode pooled features, one CSV row per sample: f0..f{d-1}, label, domain_id."""
    if isinstance(model, (str, Path)):
        model = load_checkpoint(model)
    if isinstance(data, (str, Path)):
        data = D.load_domain(data)
    s = model.spec
    if data.images.shape[1:] != (s.input_channels, s.input_size, s.input_size):
        raise CheckpointError(f"dataset images {data.images.shape[1:]} do not fit the checkpoint's input "
                                 f"({s.input_channels}, {s.input_size}, {s.input_size})")
    feats = []
    with no_grad():
        for start in range(0, len(data), batch_size):
            feats.append(model.features(data.images[start:start + batch_size], "eval").data)
    feats = np.concatenate(feats) if feats else np.zeros((0, s.feature_dim))
    header = [f"f{i}" for i in range(feats.shape[1])] + ["label", "domain_id"]
    rows = [[repr(float(v)) for v in f] + [int(y), int(data.domain_id)] for f, y in zip(feats, data.labels)]
    text = _csv_text(header, rows)
    if path is not None:
        _write(path, text)
    return text
