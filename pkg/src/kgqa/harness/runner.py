"""Experiment orchestration: data setup, training loops, evaluation, sweeps and mining."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .. import diffcore as dc
from .. import episode as ep
from .. import inference as inf
from .. import policy as pol
from ..dataset import Query, SyntheticData, generate_synthetic, load_queries, save_queries
from ..kg_store import KnowledgeGraph, Vocab, augment, load_triples, save_triples
from .config import ExperimentConfig, build_config

log = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")
CHECKPOINT = "checkpoint.json"
REPORT = "report.json"
VERDICTS = "verdicts.tsv"
TRAIN_LOG = "train_log.jsonl"
SWEEP = "sweep.csv"


@dataclass
class Experiment:
    graph: KnowledgeGraph           # augmented
    splits: dict[str, list[Query]]
    synthetic: SyntheticData | None = None


def _register_names(path: Path, vocab: Vocab) -> None:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.rstrip("\n").rstrip("\r").split("\t")
            if len(parts) == 3:
                vocab.add_entity(parts[0])
                vocab.add_relation(parts[1])
                vocab.add_entity(parts[2])


def load_experiment(cfg: ExperimentConfig) -> Experiment:
    """Build the augmented graph and the query splits the config points at."""
    if cfg.data_dir is None:
        data = generate_synthetic(cfg.synthetic_spec())
        g = augment(data.graph, add_inverse=True, add_noop=True, add_noanswer=cfg.uses_noanswer)
        return Experiment(g, {s: data.split(s) for s in SPLITS}, data)
    root = Path(cfg.data_dir)
    vocab = Vocab.load(root / "vocab") if (root / "vocab.entities.tsv").exists() else Vocab()
    base, vocab = load_triples(root / "graph.tsv", vocab)
    if not vocab.frozen:
        for s in SPLITS:
            if (root / f"{s}.tsv").exists():
                _register_names(root / f"{s}.tsv", vocab)
    g = augment(base, add_inverse=True, add_noop=True, add_noanswer=cfg.uses_noanswer)
    splits = {s: load_queries(root / f"{s}.tsv", vocab, s) if (root / f"{s}.tsv").exists() else []
              for s in SPLITS}
    return Experiment(g, splits)


def init_model(cfg: ExperimentConfig, g: KnowledgeGraph) -> dict[str, dc.Tensor]:
    v = g.vocab
    return pol.init_params(v.n_entities_aug, v.n_relations_aug, cfg.d, cfg.hidden, cfg.seed, cfg.ffnn_layers)


def mine_split(g: KnowledgeGraph, queries: list[Query], cfg: ExperimentConfig) -> list[list[ep.DfsExample]]:
    """DFS paths per query; each query gets its own seeded shuffle."""
    return [ep.mine_dfs(g, q, cfg.T, cfg.max_paths, ep.query_rng(cfg.seed, 1, i), cfg.max_out)
            for i, q in enumerate(queries)]


def _snapshot(params) -> dict[str, np.ndarray]:
    return {k: p.value.copy() for k, p in params.items()}


def _restore(params, snap) -> None:
    for k, p in params.items():
        p.value = snap[k].copy()


@dataclass
class TrainResult:
    params: dict[str, dc.Tensor]
    best: dict                    # phase, epoch and validation report of the selected model
    history: list[dict] = field(default_factory=list)


class _Logger:
    def __init__(self, path: Path | None):
        self.fh = open(path, "w", encoding="utf-8") if path is not None else None
        self.events: list[dict] = []

    def __call__(self, **event) -> None:
        self.events.append(event)
        if self.fh:
            self.fh.write(json.dumps(event, sort_keys=True) + "\n")
            self.fh.flush()

    def close(self) -> None:
        if self.fh:
            self.fh.close()


def train_model(cfg: ExperimentConfig, exp: Experiment, log_path: Path | None = None,
                params: dict | None = None) -> TrainResult:
    """Run the configured mode and return the model with the best validation QA score."""
    g = exp.graph
    train, valid = exp.splits["train"], exp.splits["valid"]
    if not train:
        raise ValueError("training split is empty")
    params = params if params is not None else init_model(cfg, g)
    rng = np.random.default_rng(cfg.seed)
    emit = _Logger(log_path)
    best = {"qa_score": -1.0}
    snap = _snapshot(params)

    def evaluate(phase: str, epoch: int) -> None:
        nonlocal best, snap
        if not valid:
            return
        rep, _ = inf.evaluate(g, params, valid, cfg.T, cfg.beam, cfg.max_out)
        emit(event="eval", phase=phase, epoch=epoch, split="valid", **rep.to_dict())
        if rep.qa_score > best["qa_score"]:
            best = {"phase": phase, "epoch": epoch, **rep.to_dict()}
            snap = _snapshot(params)

    start = time.perf_counter()
    if cfg.mode in ("supervised", "supervised+rl", "all") and cfg.sup_epochs:
        mined = mine_split(g, train, cfg)
        usable = [i for i, m in enumerate(mined) if m]
        emit(event="mined", n_queries=len(train), n_usable=len(usable),
             n_noanswer=sum(1 for i in usable if mined[i][0].no_answer))
        if not usable:
            raise ValueError("no training query has a supervised path")
        opt = dc.Adam(cfg.lr)
        for epoch in range(cfg.sup_epochs):
            order = rng.permutation(usable)
            # one sampled path per query and epoch
            examples = [mined[i][int(rng.integers(len(mined[i])))] for i in order]
            losses = []
            for b in range(0, len(examples), cfg.batch_size):
                losses.append(ep.supervised_update(g, params, examples[b:b + cfg.batch_size], opt, cfg.max_out)["loss"])
            emit(event="epoch", phase="supervised", epoch=epoch, loss=float(np.mean(losses)))
            if (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.sup_epochs - 1:
                evaluate("supervised", epoch)
        if valid:
            # RL resumes from the best supervised checkpoint
            _restore(params, snap)
        log.info("supervised phase done in %.1fs", time.perf_counter() - start)

    if cfg.mode in ("rl", "supervised+rl", "noanswer-rl", "all") and cfg.rl_epochs:
        rcfg = ep.RewardConfig(cfg.resolved_reward_mode, cfg.r_pos, cfg.r_neg)
        opt = dc.Adam(cfg.lr)
        tracker = ep.BaselineTracker(cfg.baseline_decay)
        for epoch in range(cfg.rl_epochs):
            order = rng.permutation(len(train))
            went = cfg.entropy_weight * cfg.entropy_decay ** epoch
            rewards, losses = [], []
            for b in range(0, len(order), cfg.batch_size):
                idx = order[b:b + cfg.batch_size]
                qs = [train[i] for i in idx]
                u = np.stack([ep.query_rng(cfg.seed, 2, epoch, int(i)).random((cfg.rollouts, cfg.T)) for i in idx])
                trajs = ep.rollout_batch(g, params, qs, rcfg, cfg.rollouts, cfg.T, u, cfg.max_out)
                mean = float(np.mean([tr.reward for tr in trajs]))
                if cfg.baseline == "query-mean":
                    base = ep.query_mean_baseline(trajs)
                else:
                    base = tracker.value if tracker.value is not None else mean
                st = ep.reinforce_update(g, params, trajs, base, went, opt, cfg.max_out)
                tracker.update(mean)
                rewards.append(mean)
                losses.append(st["loss"])
            emit(event="epoch", phase="rl", epoch=epoch, mean_reward=float(np.mean(rewards)),
                 loss=float(np.mean(losses)), entropy_weight=went)
            if (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.rl_epochs - 1:
                evaluate("rl", epoch)
        log.info("training done in %.1fs", time.perf_counter() - start)

    history = emit.events
    emit.close()
    if valid:
        _restore(params, snap)
    return TrainResult(params, best if valid else {}, history)


def _meta(cfg: ExperimentConfig, extra: dict | None = None) -> dict:
    meta = {"config": cfg.to_dict(), "config_digest": cfg.digest(), "seed": cfg.seed}
    meta.update(extra or {})
    return meta


def _eval_and_write(cfg: ExperimentConfig, exp: Experiment, params, out: Path, split: str,
                    extra: dict | None = None) -> inf.EvalReport:
    report, verdicts = inf.evaluate(exp.graph, params, exp.splits[split], cfg.T, cfg.beam, cfg.max_out)
    inf.write_verdicts(verdicts, exp.graph, out / VERDICTS)
    inf.write_report(report, out / REPORT, _meta(cfg, {"split": split, **(extra or {})}))
    return report


def cmd_train(cfg: ExperimentConfig, out_dir: str | Path) -> tuple[inf.EvalReport, TrainResult]:
    """Train, keep the best-on-validation model, write checkpoint, log, report and verdicts."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    exp = load_experiment(cfg)
    result = train_model(cfg, exp, out / TRAIN_LOG)
    dc.save_checkpoint(out / CHECKPOINT, result.params, _meta(cfg, {"selected": result.best}))
    report = _eval_and_write(cfg, exp, result.params, out, cfg.report_split, {"selected": result.best})
    return report, result


def cmd_eval(checkpoint: str | Path, split: str, out_dir: str | Path,
             overrides: dict | None = None) -> inf.EvalReport:
    """Rebuild the data from the checkpoint's config and evaluate one split."""
    params, meta = dc.load_checkpoint(checkpoint)
    cfg = replace(build_config(overrides=meta.get("config", {})), **(overrides or {})).validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    exp = load_experiment(cfg)
    return _eval_and_write(cfg, exp, params, out, split, {"checkpoint": str(checkpoint)})


def cmd_sweep(cfg: ExperimentConfig, axis: str, values: list[float], out_dir: str | Path,
              on_point: Callable | None = None) -> list[dict]:
    """One training run per reward value (same seed); CSV rows sorted by value."""
    if axis not in ("r_pos", "r_neg"):
        raise ValueError("sweep axis must be r_pos or r_neg")
    if not values:
        raise ValueError("sweep needs at least one value")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for value in sorted(values):
        point = replace(cfg, **{axis: float(value)}).validate()
        report, _ = cmd_train(point, out / f"{axis}={value:g}")
        row = {"value": float(value), "precision": report.precision,
               "answer_rate": report.answer_rate, "qa_score": report.qa_score}
        rows.append(row)
        if on_point:
            on_point(row)
    with open(out / SWEEP, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["value", "precision", "answer_rate", "qa_score"])
        w.writeheader()
        w.writerows(rows)
    return rows


def cmd_mine(cfg: ExperimentConfig, out_path: str | Path) -> list[ep.DfsExample]:
    """Mine and persist DFS examples for the training split."""
    exp = load_experiment(cfg)
    mined = mine_split(exp.graph, exp.splits["train"], cfg)
    flat = [ex for m in mined for ex in m]
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    ep.save_dfs_examples(flat, exp.graph, out_path)
    return flat


def cmd_gen_synthetic(cfg: ExperimentConfig, out_dir: str | Path) -> SyntheticData:
    """Write a synthetic dataset in the on-disk layout that ``data_dir`` expects."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = generate_synthetic(cfg.synthetic_spec())
    vocab = data.graph.vocab
    vocab.save(out / "vocab")
    save_triples(data.graph, out / "graph.tsv")
    for s in SPLITS:
        save_queries(data.split(s), vocab, out / f"{s}.tsv")
    with open(out / "unreachable.tsv", "w", encoding="utf-8") as fh:
        for i in sorted(data.unreachable):
            q = data.queries[i]
            fh.write(f"{vocab.entity_names[q.e_q]}\t{vocab.relation_names[q.r_q]}\t{q.split}\n")
    return data
