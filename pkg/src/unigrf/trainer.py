"""Training loop, evaluation entry points and sweeps."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from unigrf import engine as E
from unigrf.config import RunConfig
from unigrf.data import SequenceSet, load_store, prepare_data
from unigrf.engine import OptimizerState, adam_step, load_tensors, save_tensors
from unigrf.enhancer import EnhancerConfig, RankingEnhancer, scores_from_outputs, write_audit
from unigrf.errors import DataError, NumericError, UniGRFError
from unigrf.evaluator import EvalReport, evaluate, write_ranks
from unigrf.model import ModelConfig, UniGRFModel, parameter_count
from unigrf.objectives import LossRecord, ranking_bce_loss, retrieval_loss_over_sequence
from unigrf import weighter as W

logger = logging.getLogger(__name__)

METRIC_FIELDS = (
    "epoch", "loss_retrieval", "loss_ranking", "r_a", "r_b", "w_a", "w_b",
    "val_ndcg10", "val_hr10", "val_mrr", "val_auc", "hard_set_size", "potential_set_new", "wall_seconds",
    "potential_set_total",
)
SWEEP_FIELDS = ("axis", "value", "status", "best_epoch", "val_ndcg10", "val_auc", "test_ndcg10", "test_hr10",
                "test_ndcg50", "test_hr50", "test_mrr", "test_auc", "param_count", "param_count_formula", "error")


@dataclass
class EpochLog:
    epoch: int
    loss_retrieval: float
    loss_ranking: float
    r_a: float
    r_b: float
    w_a: float
    w_b: float
    val_ndcg10: float
    val_hr10: float
    val_mrr: float
    val_auc: float | None
    hard_set_size: int
    potential_set_new: int
    wall_seconds: float
    potential_set_total: int

    def row(self) -> list[str]:
        return ["" if (v := getattr(self, f)) is None else repr(v) for f in METRIC_FIELDS]


@dataclass
class TrainResult:
    output_dir: Path
    epochs: list[EpochLog]
    best_epoch: int
    best_valid: EvalReport | None
    test: EvalReport | None
    checkpoint_writes: int
    enhancer_refreshes: int
    num_parameters: int
    stopped_early: bool = False
    trace: list[dict] = field(default_factory=list, repr=False)


def _fmt(v) -> str:
    return "" if v is None else repr(v)


def load_dataset(config: RunConfig) -> tuple[SequenceSet, dict]:
    store = Path(config.data) if config.data else config.resolve_output() / "data"
    if config.auto_prepare and config.raw:
        prepare_data(config.raw, config.format, config.n, store, seed=config.seed)
    seqs, catalog, manifest = load_store(store)
    if manifest["n"] != config.n:
        raise DataError(f"store {store} was built with n={manifest['n']} but the config asks for n={config.n}")
    return seqs, manifest


def model_config_from_state(state: dict) -> ModelConfig:
    emb = state["model/item_embeddings"]
    layers = len({k.split("/")[2] for k in state if k.startswith("model/layers/")})
    heads = len([k for k in state if k.startswith("model/layers/0/attn/q/")]) or 1
    return ModelConfig(num_items=emb.shape[0] - 1, n=state["model/positions"].shape[0] // 2, d=emb.shape[1],
                       heads=heads, layers=layers)


def save_checkpoint(path: Path, model: UniGRFModel) -> None:
    save_tensors(path, model.state_dict())


def load_checkpoint(path, dtype=np.float64) -> UniGRFModel:
    state = load_tensors(path)
    cfg = model_config_from_state(state)
    with E.default_dtype(dtype):
        model = UniGRFModel.initialize(cfg, seed=0)
    model.load_state_dict(state)
    return model


class Trainer:
    def __init__(self, config: RunConfig, seqs: SequenceSet, num_items: int):
        self.config = config.validate()
        self.seqs = seqs
        self.num_items = num_items
        self.out = config.resolve_output()
        self.dtype = np.float32 if config.dtype == "float32" else np.float64
        with E.default_dtype(self.dtype):
            self.model = UniGRFModel.initialize(
                ModelConfig(num_items=num_items, n=seqs.n, d=config.d, heads=config.heads, layers=config.layers),
                seed=config.seed,
            )
        self.opt = OptimizerState(lr=config.lr)
        self.weights = W.WeighterState(temperature=config.temperature, lambda_a=config.lambda_a,
                                       lambda_b=config.lambda_b, ema_decay=config.ema_decay)
        if config.weighting == "fixed":
            self.weights.w_a, self.weights.w_b = config.lambda_a, config.lambda_b
        self.enhancer = RankingEnhancer(EnhancerConfig(config.m, config.alpha, config.num_negatives), num_items,
                                        seed=config.seed)
        self.enhancer.initialize(seqs)
        self.checkpoint_writes = 0
        self.enhancer_refreshes = 0

    # -- one optimizer step -------------------------------------------------

    def train_step(self, rows: np.ndarray) -> LossRecord:
        cfg, model, seqs = self.config, self.model, self.seqs
        items, beh = seqs.items[rows], seqs.behaviors[rows]
        out = model.forward_transform(items, beh)
        l_ret, c_ret = retrieval_loss_over_sequence(out, items, self.enhancer.negatives_for(rows), model.item_embeddings)
        cands, cmask = self.enhancer.relabel_block(rows)
        aux = None
        if cmask.any():
            # history activations for relabeled candidates are held constant; see README
            aux = model.candidate_logits(items, beh, np.where(cmask, cands, 1), detach_history=True)
        l_rank, c_rank = ranking_bce_loss(out, items, beh, model, aux, extra_mask=cmask)
        record = LossRecord(l_ret.item() if l_ret is not None else 0.0, l_rank.item() if l_rank is not None else 0.0,
                            c_ret, c_rank)
        if not (math.isfinite(record.loss_retrieval) and math.isfinite(record.loss_ranking)):
            raise NumericError(f"non-finite loss at optimizer step {self.opt.step + 1}: {record}")

        if cfg.weighting == "adaptive" and cfg.weighter_granularity == "step" and l_ret is not None and l_rank is not None:
            W.step(record.loss_retrieval, record.loss_ranking, self.weights)
        loss = W.combine(self.weights.w_a, l_ret, self.weights.w_b, l_rank)
        for p in model.params.values():
            p.zero_grad()
        E.backward(loss)
        adam_step(model.params, {k: p.grad for k, p in model.params.items()}, self.opt)
        return record

    # -- epoch-end work --------------------------------------------------------

    def refresh_and_validate(self, epoch: int) -> tuple[EvalReport, int, int, list]:
        """Validation metrics and, when enabled, the enhancer refresh from one scoring pass."""
        audit: list | None = [] if self.config.audit else None
        seqs = self.seqs
        if not self.enhancer.config.active:
            report, details = evaluate(self.model, seqs, "valid", self.config.ks, self.config.eval_batch_size)
            self.enhancer.resample(seqs, epoch)
            self.enhancer_refreshes += 1
            return report, 0, 0, details
        negatives = self.enhancer.negatives_for(range(len(seqs)))
        report, details = evaluate(self.model, seqs, "valid", self.config.ks, self.config.eval_batch_size,
                                   extra_candidates=negatives)
        new_total = 0
        for row in range(len(seqs)):
            scores = scores_from_outputs(self.model, details["latents"][row:row + 1],
                                         details["extra_logits"][row:row + 1], negatives[row:row + 1])
            scores = {k: v[0] for k, v in scores.items()}
            _, new = self.enhancer.update_user(seqs, row, scores, epoch, audit)
            new_total += new
        self.enhancer_refreshes += 1
        if audit is not None:
            write_audit(self.out / f"enhancer_audit_epoch{epoch:03d}.csv", audit)
        hard_total, _ = self.enhancer.totals()
        return report, hard_total, new_total, details

    # -- driver --------------------------------------------------------------

    def fit(self) -> TrainResult:
        cfg = self.config
        out = self.out
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps({**cfg.to_dict(), "config_hash": cfg.hash()}, indent=2) + "\n")
        metrics_path = out / "metrics.csv"
        trace_path = out / "weighter_trace.csv"
        with open(metrics_path, "w", newline="") as fh:
            csv.writer(fh).writerow(METRIC_FIELDS)
        with open(trace_path, "w", newline="") as fh:
            csv.writer(fh).writerow(W.TRACE_FIELDS)

        logs: list[EpochLog] = []
        best_metric, best_epoch, best_report = -math.inf, 0, None
        stopped_early = False
        with E.default_dtype(self.dtype):
            for epoch in range(1, cfg.max_epochs + 1):
                t0 = time.perf_counter()
                trace_start = len(self.weights.trace)
                order = np.random.default_rng([cfg.seed, epoch]).permutation(len(self.seqs))
                sums = np.zeros(2)
                steps = 0
                for start in range(0, len(order), cfg.batch_size):
                    rec = self.train_step(order[start:start + cfg.batch_size])
                    sums += (rec.loss_retrieval, rec.loss_ranking)
                    steps += 1
                mean_ret, mean_rank = sums / max(steps, 1)
                self._epoch_weighting(epoch, mean_ret, mean_rank)

                report, hard_total, new_p, details = self.refresh_and_validate(epoch)
                save_checkpoint(out / "checkpoint.bin", self.model)
                self.checkpoint_writes += 1

                epoch_trace = self.weights.trace[trace_start:]
                mean = (lambda key: float(np.mean([r[key] for r in epoch_trace]))) if epoch_trace else None
                log = EpochLog(
                    epoch=epoch, loss_retrieval=float(mean_ret), loss_ranking=float(mean_rank),
                    r_a=mean("r_a") if mean else self.weights.r_a, r_b=mean("r_b") if mean else self.weights.r_b,
                    w_a=mean("w_a") if mean else self.weights.w_a, w_b=mean("w_b") if mean else self.weights.w_b,
                    val_ndcg10=report.ndcg[10], val_hr10=report.hr[10], val_mrr=report.mrr, val_auc=report.auc,
                    hard_set_size=hard_total, potential_set_new=new_p, wall_seconds=time.perf_counter() - t0,
                    potential_set_total=self.enhancer.totals()[1],
                )
                logs.append(log)
                with open(metrics_path, "a", newline="") as fh:
                    csv.writer(fh).writerow(log.row())
                with open(trace_path, "a", newline="") as fh:
                    w = csv.writer(fh)
                    for rec in epoch_trace:
                        w.writerow([_fmt(rec[k]) for k in W.TRACE_FIELDS])
                logger.info("epoch %d: L_ret=%.4f L_rank=%.4f val NDCG@10=%.4f AUC=%s (%.1fs)", epoch, mean_ret,
                            mean_rank, report.ndcg[10], report.auc, log.wall_seconds)

                if report.ndcg[10] > best_metric:
                    best_metric, best_epoch, best_report = report.ndcg[10], epoch, report
                    shutil.copyfile(out / "checkpoint.bin", out / "best.bin")
                    (out / "best.json").write_text(json.dumps({"epoch": epoch, "val_ndcg10": report.ndcg[10],
                                                               "config_hash": cfg.hash()}, indent=2) + "\n")
                    best_report.write(out / "best_valid_report.json")
                elif epoch - best_epoch >= cfg.patience:
                    stopped_early = True
                    break

        test = None
        if (out / "best.bin").exists():
            test = run_eval(out / "best.bin", self.seqs, "test", cfg, dtype=self.dtype, output=out / "test_report.json",
                            num_items=self.num_items)
        return TrainResult(output_dir=out, epochs=logs, best_epoch=best_epoch, best_valid=best_report, test=test,
                           checkpoint_writes=self.checkpoint_writes, enhancer_refreshes=self.enhancer_refreshes,
                           num_parameters=self.model.num_parameters(), stopped_early=stopped_early,
                           trace=list(self.weights.trace))

    def _epoch_weighting(self, epoch: int, mean_ret: float, mean_rank: float) -> None:
        cfg, state = self.config, self.weights
        if cfg.auto_scale and epoch == 1 and mean_rank > 0:
            state.lambda_b = mean_ret / mean_rank
            if cfg.weighting == "fixed":
                state.w_b = state.lambda_b
            else:
                state.w_a, state.w_b = W.compute_weights(state.r_a, state.r_b, state.temperature, state.lambda_a,
                                                         state.lambda_b)
        if cfg.weighting == "adaptive" and cfg.weighter_granularity == "epoch":
            W.step(mean_ret, mean_rank, state)


def run_training(config: RunConfig) -> TrainResult:
    config.validate()
    seqs, manifest = load_dataset(config)
    out = config.resolve_output()
    try:
        return Trainer(config, seqs, manifest["num_items"]).fit()
    except NumericError as exc:
        out.mkdir(parents=True, exist_ok=True)
        (out / "failure.json").write_text(json.dumps({"error": str(exc)}, indent=2) + "\n")
        raise


def run_eval(checkpoint, data, split: str = "test", config: RunConfig | None = None, dtype=np.float64,
             output=None, num_items: int | None = None) -> EvalReport:
    """Evaluate a checkpoint on a processed store (path) or an in-memory SequenceSet."""
    if isinstance(data, SequenceSet):
        seqs = data
    else:
        seqs, _, manifest = load_store(data)
        num_items = manifest["num_items"]
    model = load_checkpoint(checkpoint, dtype=dtype)
    if num_items is not None and model.config.num_items != num_items:
        raise DataError(f"checkpoint catalog has {model.config.num_items} items but the dataset has {num_items}")
    if model.config.n != seqs.n:
        raise DataError(f"checkpoint was trained with n={model.config.n}, dataset uses n={seqs.n}")
    ks = config.ks if config else [10, 50]
    with E.default_dtype(dtype):
        report, details = evaluate(model, seqs, split, ks, config.eval_batch_size if config else 256)
    report.metadata["checkpoint"] = str(checkpoint)
    if config is not None:
        report.metadata["config_hash"] = config.hash()
    if output is not None:
        report.write(output)
        if config is not None and config.rank_dump:
            write_ranks(Path(output).with_suffix(".ranks.csv"), seqs, details["ranks"])
    return report


def run_sweep(config: RunConfig, axis: str, values) -> list[dict]:
    """One training run per value of ``axis`` (m or layers), sharing the seed."""
    if axis not in ("m", "layers"):
        raise UniGRFError(f"sweep axis must be m or layers, not {axis!r}")
    values = list(values)
    if not values:
        raise UniGRFError("sweep needs at least one value")
    root = config.resolve_output()
    root.mkdir(parents=True, exist_ok=True)
    seqs, manifest = load_dataset(config)
    rows = []
    for v in values:
        sub = dataclasses.replace(config, **{axis: v}, output_dir=str(root / f"{axis}_{v}"))
        row = {"axis": axis, "value": v}
        try:
            result = Trainer(sub, seqs, manifest["num_items"]).fit()
            row.update(
                status="ok", best_epoch=result.best_epoch,
                val_ndcg10=result.best_valid.ndcg[10] if result.best_valid else None,
                val_auc=result.best_valid.auc if result.best_valid else None,
                test_ndcg10=result.test.ndcg.get(10), test_hr10=result.test.hr.get(10),
                test_ndcg50=result.test.ndcg.get(50), test_hr50=result.test.hr.get(50),
                test_mrr=result.test.mrr, test_auc=result.test.auc, param_count=result.num_parameters,
            )
        except Exception as exc:  # noqa: BLE001 - a failed point must not end the sweep
            logger.exception("sweep point %s=%s failed", axis, v)
            row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
        row["param_count_formula"] = parameter_count(manifest["num_items"], seqs.n, sub.d, sub.heads, sub.layers)
        rows.append(row)
        with open(root / "sweep_summary.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS)
            w.writeheader()
            for r in rows:
                w.writerow({k: _fmt(r.get(k)) if k not in ("axis", "status", "error") else r.get(k, "") for k in SWEEP_FIELDS})
    return rows


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def read_trace(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "t" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


def build_report(run_dir) -> dict:
    """Summary of a finished run: best epoch, final metrics and a weighter audit."""
    run_dir = Path(run_dir)
    metrics = read_metrics(run_dir / "metrics.csv")
    config = json.loads((run_dir / "config.json").read_text())
    trace = read_trace(run_dir / "weighter_trace.csv")
    violations = W.audit_trace(trace, config["lambda_a"], config["lambda_b"]) if config["weighting"] == "adaptive" else []
    best = json.loads((run_dir / "best.json").read_text()) if (run_dir / "best.json").exists() else None
    test = json.loads((run_dir / "test_report.json").read_text()) if (run_dir / "test_report.json").exists() else None
    missing = [c for c in METRIC_FIELDS if metrics and c not in metrics[0]]
    return {
        "run": str(run_dir), "config_hash": config.get("config_hash"), "epochs": len(metrics), "best": best,
        "test": test, "weighter_steps": len(trace), "weighter_violations": violations,
        "missing_metric_columns": missing,
    }
