"""Experiment orchestration: task construction, the round loop for every
method, metrics CSV output and checkpoint/resume."""

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import baselines, data as data_mod
from .checkpoint import checkpoint_load, checkpoint_save
from .config import ExperimentConfig, config_from_dict, save_config
from .core import ClientState, ServerState, run_round, sample_clients
from .diagnostics import (CommLedger, RoundMetrics, comm_account, gradient_mapping,
                          potential, stationarity_residual)
from .model import Batch, ModelSpec, evaluate, init_params
from .objectives import ModelObjective, quadratic_federation
from .reshape import Conv, Dense, ParamSet, Passthrough, factorize, layer_ranks

log = logging.getLogger(__name__)

COLUMNS = ["round", "method", "seed", "potential", "potential_delta", "stationarity_residual",
           "grad_map_norm", "mean_rank", "p_sparsity", "downlink_bytes", "uplink_bytes",
           "gkr_acc", "mixed_acc"]


class RunError(RuntimeError):
    def __init__(self, round_idx, cause):
        super().__init__(f"round {round_idx}: {cause}")
        self.round = round_idx


@dataclass
class Task:
    kinds: tuple
    objectives: list
    w0: ParamSet
    spec: Optional[ModelSpec] = None
    tests: Optional[List[Batch]] = None

    @property
    def classification(self) -> bool:
        return self.spec is not None


def _split_per_class(labels, per_class):
    """First ``per_class`` occurrences of each class go to train, the rest to test."""
    train = np.zeros(labels.shape[0], dtype=bool)
    for c in np.unique(labels):
        train[np.flatnonzero(labels == c)[:per_class]] = True
    return np.flatnonzero(train), np.flatnonzero(~train)


def load_dataset(cfg: ExperimentConfig):
    d = cfg.data
    if d["source"] == "synthetic":
        X, y = data_mod.make_synthetic(d["classes"], d["dim"], d["per_class"] + d["test_per_class"],
                                       d["separation"], cfg.seed)
        tr, te = _split_per_class(y, d["per_class"])
        return Batch(X[tr], y[tr]), Batch(X[te], y[te])
    if d["source"] == "idx":
        return (Batch(*data_mod.load_idx(d["train_images"], d["train_labels"])),
                Batch(*data_mod.load_idx(d["test_images"], d["test_labels"])))
    if d["source"] == "csv":
        return Batch(*data_mod.load_csv(d["train"])), Batch(*data_mod.load_csv(d["test"]))
    raise ValueError(f"no dataset for source {d['source']!r}")


def quadratic_kinds(layers, biases=True):
    kinds = []
    for layer in layers:
        if len(layer) == 3:
            kind = Conv(layer[0], layer[1], layer[2])
            out = layer[0]
        else:
            kind = Dense(layer[0], layer[1])
            out = layer[0]
        kinds.append(kind)
        if biases:
            kinds.append(Passthrough(out))
    return tuple(kinds)


def build_task(cfg: ExperimentConfig) -> Task:
    M = cfg.split["clients"]
    if cfg.data["source"] == "quadratic":
        d = cfg.data
        kinds = quadratic_kinds(d["layers"], d["biases"])
        objs = quadratic_federation(kinds, M, cfg.seed, d["eig_min"], d["eig_max"], d["spread"])
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x1417]))
        w0 = ParamSet.from_flat(kinds, rng.normal(size=sum(k.size for k in kinds)))
        return Task(kinds=kinds, objectives=objs, w0=w0)

    train, test = load_dataset(cfg)
    classes = int(max(train.labels.max(), test.labels.max())) + 1
    if cfg.split["iid"]:
        parts = data_mod.iid_split(len(train), M, cfg.seed)
    else:
        parts = data_mod.dirichlet_split(train.labels, data_mod.SplitConfig(
            clients=M, alpha=cfg.split["alpha"], seed=cfg.seed,
            test_per_client=cfg.split["test_per_client"]))
    test_parts = data_mod.mirror_test_split(train.labels, parts, test.labels,
                                            cfg.split["test_per_client"], cfg.seed)
    spec = ModelSpec(layer_sizes=[train.features.shape[1]] + list(cfg.model["hidden"]),
                     num_classes=classes, activation=cfg.model["activation"])
    objs = [ModelObjective(spec, train.subset(p)) for p in parts]
    tests = [test.subset(p) for p in test_parts]
    w0 = init_params(spec, np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x1417])))
    return Task(kinds=spec.kinds, objectives=objs, w0=w0, spec=spec, tests=tests)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


class Simulation:
    """Mutable run state for one experiment; ``step()`` advances one round."""

    def __init__(self, cfg: ExperimentConfig, task: Optional[Task] = None):
        self.cfg = cfg
        self.task = task or build_task(cfg)
        M = len(self.task.objectives)
        self.hp = cfg.hyper
        w0 = self.task.w0
        self.server = ServerState.fresh(w0, M, cfg.memory_efficient)
        self.clients = [ClientState.fresh(w0) for _ in range(M)]
        self.ledger = CommLedger()
        self.prev_potential = self._potential() if cfg.method == "fedslr" else None
        self.param_count = w0.size

    @property
    def round(self) -> int:
        return self.server.round

    def _potential(self):
        return potential(self.task.objectives, self.server.w, [c.local for c in self.clients],
                         [c.gamma for c in self.clients], self.hp)

    def step(self) -> RoundMetrics:
        cfg, hp, t = self.cfg, self.hp, self.server.round
        M = len(self.clients)
        objs = self.task.objectives
        selection = sample_clients(M, hp.participation, cfg.seed, t)
        w_t = self.server.w
        m = RoundMetrics(round=t + 1)
        if cfg.method == "fedslr":
            self.server, info = run_round(self.server, self.clients, objs, hp, selection,
                                          seed=cfg.seed, exact=cfg.local_solver == "exact")
            m.ranks, downlink = info.ranks, info.downlink
            pot = self._potential()
            m.potential, m.potential_delta = pot, pot - self.prev_potential
            self.prev_potential = pot
            m.stationarity_residual = stationarity_residual(
                objs, self.server.w, [c.local for c in self.clients], hp)
            m.grad_map_norm = float(np.mean([
                gradient_mapping(objs[i], w_t, self.clients[i].p, hp, info.lr).norm()
                for i in selection]))
            zeros = sum(int(np.count_nonzero(v == 0)) for i in selection for v in self.clients[i].p.values)
            m.p_sparsity = zeros / (len(selection) * self.param_count)
        else:
            downlink = factorize(w_t)
            fn = {"fedavg": baselines.fedavg_round, "lpgd": baselines.lpgd_round,
                  "gpgd": baselines.gpgd_round}[cfg.method]
            w_next = fn(w_t, objs, hp, selection, cfg.seed, t)
            self.server = ServerState(w=w_next, round=t + 1)
            m.ranks = layer_ranks(w_next)
        comm_account(downlink, self.param_count, "down", self.ledger, t, copies=len(selection))
        comm_account(None, self.param_count, "up", self.ledger, t, copies=len(selection))
        m.downlink_bytes = self.ledger.round_bytes(t, "down")
        m.uplink_bytes = self.ledger.round_bytes(t, "up")
        if self.task.classification and ((t + 1) % cfg.eval_every == 0 or t + 1 == hp.T):
            m.gkr_acc, m.mixed_acc = self.evaluate()
        return m

    def evaluate(self):
        spec, w = self.task.spec, self.server.w
        gkr, mixed = [], []
        for c, test in zip(self.clients, self.task.tests):
            if len(test) == 0:
                continue
            gkr.append(evaluate(spec, w, None, test))
            if self.cfg.method == "fedslr":
                mixed.append(evaluate(spec, w, c.p, test))
        return (float(np.mean(gkr)) if gkr else None,
                float(np.mean(mixed)) if mixed else None)

    # --- persistence ---------------------------------------------------------
    def save(self, path):
        params = {"w": self.server.w}
        if self.server.gamma_bar is not None:
            params["server/gamma_bar"] = self.server.gamma_bar
        if self.cfg.method == "fedslr":
            if self.server.gamma_table is not None:
                for i, g in enumerate(self.server.gamma_table):
                    params[f"server/gamma/{i}"] = g
            for i, c in enumerate(self.clients):
                params[f"client/{i}/gamma"] = c.gamma
                params[f"client/{i}/p"] = c.p
                params[f"client/{i}/local"] = c.local
        meta = {"round": self.server.round, "method": self.cfg.method, "seed": self.cfg.seed,
                "memory_efficient": self.server.memory_efficient, "clients": len(self.clients),
                "prev_potential": self.prev_potential, "config": self.cfg.to_dict(),
                "ledger": {"downlink_total": self.ledger.downlink_total,
                           "uplink_total": self.ledger.uplink_total}}
        checkpoint_save(path, params, meta)

    def restore(self, path):
        params, meta = checkpoint_load(path)
        if meta["method"] != self.cfg.method or meta["seed"] != self.cfg.seed:
            raise ValueError("checkpoint was written by a different method or seed")
        if meta["memory_efficient"] != self.cfg.memory_efficient:
            raise ValueError("checkpoint aggregation mode does not match the config")
        M = meta["clients"]
        table = None
        if self.cfg.method == "fedslr" and not meta["memory_efficient"]:
            table = [params[f"server/gamma/{i}"] for i in range(M)]
        self.server = ServerState(w=params["w"], gamma_table=table,
                                  gamma_bar=params.get("server/gamma_bar"), round=meta["round"])
        if self.cfg.method == "fedslr":
            self.clients = [ClientState(gamma=params[f"client/{i}/gamma"], p=params[f"client/{i}/p"],
                                        local=params[f"client/{i}/local"]) for i in range(M)]
        self.prev_potential = meta["prev_potential"]
        self.ledger.downlink_total = meta["ledger"]["downlink_total"]
        self.ledger.uplink_total = meta["ledger"]["uplink_total"]


@dataclass
class RunResult:
    metrics_path: Path
    checkpoint_path: Path
    rows: List[RoundMetrics]
    simulation: Simulation


def run_experiment(cfg: ExperimentConfig, resume: Optional[str] = None,
                   task: Optional[Task] = None) -> RunResult:
    """Run (or resume) ``cfg.hyper.T`` rounds, writing metrics and checkpoints
    under ``cfg.output_dir``."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    sim = Simulation(cfg, task)
    metrics_path = out / "metrics.csv"
    if resume:
        sim.restore(resume)
        mode = "a" if metrics_path.exists() else "w"
    else:
        mode = "w"
        save_config(cfg, out / "config.json")
    rows = []
    with open(metrics_path, mode, newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if mode == "w":
            writer.writerow(COLUMNS)
            fh.flush()
        if sim.round == 0 and cfg.hyper.T == 0:
            sim.save(out / "checkpoint_r0.ckpt")
        while sim.round < cfg.hyper.T:
            t = sim.round
            try:
                metrics = sim.step()
            except Exception as exc:
                fh.flush()
                raise RunError(t, exc) from exc
            if (t + 1) % cfg.eval_every == 0 or t + 1 == cfg.hyper.T:
                row = metrics.as_row(cfg.method, cfg.seed)
                writer.writerow([_fmt(row[c]) for c in COLUMNS])
                fh.flush()
                rows.append(metrics)
                log.info("round %d: gkr=%s mixed=%s rank=%s", t + 1, metrics.gkr_acc,
                         metrics.mixed_acc, metrics.mean_rank)
            if cfg.checkpoint_every and (t + 1) % cfg.checkpoint_every == 0:
                sim.save(out / f"checkpoint_r{t + 1}.ckpt")
    final = out / "checkpoint_final.ckpt"
    sim.save(final)
    return RunResult(metrics_path=metrics_path, checkpoint_path=final, rows=rows, simulation=sim)


def read_metrics(path) -> List[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def config_from_checkpoint(path) -> ExperimentConfig:
    _, meta = checkpoint_load(path)
    return config_from_dict(meta["config"], path)
