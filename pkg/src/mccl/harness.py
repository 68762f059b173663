"""Ablation runner and the per-term gradient check report."""

from __future__ import annotations

import csv
import io
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as D
from .analysis import mean_s_p2p
from .config import ExperimentConfig, Toggles
from .fka import PrototypeBank, class_feature_sets, p2p_similarities, update_prototypes
from .gradcheck import analytic_grads, grad_check
from .segnet import all_tensors, encode, init_params
from .tensor import Tensor, no_grad
from .trainer import COMPONENTS, objective, train, weak_branch

logger = logging.getLogger(__name__)

ARMS = (
    ("baseline", Toggles(ip=False, if_=False, fp=False)),
    ("ip", Toggles(ip=True, if_=False, fp=False)),
    ("ip_if", Toggles(ip=True, if_=True, fp=False)),
    ("ip_fp", Toggles(ip=True, if_=False, fp=True)),
    ("full", Toggles(ip=True, if_=True, fp=True)),
)

GRADCHECK_TERMS = COMPONENTS + ("L_total",)
GRADCHECK_TOL = 1e-4


# -- ablation -------------------------------------------------------------------------

@dataclass
class AblationReport:
    rows: list[dict] = field(default_factory=list)

    def arm_values(self, arm: str, key: str = "val_mIoU") -> list[float]:
        return [r[key] for r in self.rows if r["arm"] == arm and r["status"] == "ok"]

    def summary(self) -> list[dict]:
        out = []
        for arm, tog in ARMS:
            vals = self.arm_values(arm)
            sims = self.arm_values(arm, "val_S_p2p")
            if not any(r["arm"] == arm for r in self.rows):
                continue
            out.append({
                "arm": arm, "ip": tog.ip, "if": tog.if_, "fp": tog.fp, "runs": len(vals),
                "miou_mean": float(np.mean(vals)) if vals else float("nan"),
                "miou_std": float(np.std(vals)) if vals else float("nan"),
                "s_p2p_mean": float(np.mean(sims)) if sims else float("nan"),
            })
        return out

    def rows_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["arm", "seed", "ip", "if", "fp", "status", "val_mIoU", "val_S_p2p"])
        for r in self.rows:
            w.writerow([r["arm"], r["seed"], int(r["ip"]), int(r["if"]), int(r["fp"]), r["status"],
                        f"{r['val_mIoU']:.10g}", f"{r['val_S_p2p']:.10g}"])
        return buf.getvalue()

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["arm", "ip", "if", "fp", "runs", "miou_mean", "miou_std", "s_p2p_mean"])
        for s in self.summary():
            w.writerow([s["arm"], int(s["ip"]), int(s["if"]), int(s["fp"]), s["runs"],
                        f"{s['miou_mean']:.10g}", f"{s['miou_std']:.10g}", f"{s['s_p2p_mean']:.10g}"])
        return buf.getvalue()

    def table(self) -> str:
        lines = [f"{'arm':<10}{'IP':>4}{'IF':>4}{'FP':>4}{'runs':>6}{'mIoU':>10}{'± std':>9}{'S_p2p':>9}"]
        for s in self.summary():
            mark = lambda b: "x" if b else "."  # noqa: E731
            lines.append(f"{s['arm']:<10}{mark(s['ip']):>4}{mark(s['if']):>4}{mark(s['fp']):>4}"
                         f"{s['runs']:>6}{100 * s['miou_mean']:>10.2f}{100 * s['miou_std']:>9.2f}"
                         f"{s['s_p2p_mean']:>9.4f}")
        return "\n".join(lines) + "\n"


def _run_arm(args) -> dict:
    arm, toggles, cfg, seed, dataset, out_dir = args
    row = {"arm": arm, "seed": seed, "ip": toggles.ip, "if": toggles.if_, "fp": toggles.fp,
           "status": "ok", "val_mIoU": float("nan"), "val_S_p2p": float("nan")}
    arm_cfg = cfg.replace(toggles=toggles)
    run_dir = None if out_dir is None else Path(out_dir) / arm / f"seed{seed}"
    t0 = time.perf_counter()
    try:
        result = train(arm_cfg, dataset, seed, run_dir)
        row["val_mIoU"] = result.final_miou
        val_imgs, _ = dataset.val()
        row["val_S_p2p"] = mean_s_p2p(result.state.enc, result.state.dec, val_imgs, seed=seed)
    except Exception as exc:  # a failed arm must not take the others down
        logger.error("arm %s seed %d failed: %s", arm, seed, exc)
        row["status"] = "failed"
    # wall time stays out of the CSVs so reruns produce identical reports
    row["seconds"] = time.perf_counter() - t0
    logger.info("arm %s seed %d: mIoU=%.4f (%.1fs)", arm, seed, row["val_mIoU"], row["seconds"])
    return row


def run_ablation(
    cfg: ExperimentConfig,
    seeds,
    out_dir: str | Path | None = None,
    arms=ARMS,
    workers: int = 1,
    dataset: D.SyntheticDataset | None = None,
) -> AblationReport:
    """Train every arm for every seed; arms differ only in their toggles."""
    seeds = list(seeds)
    if not seeds:
        raise ValueError("run_ablation needs at least one seed")
    if dataset is None:
        dataset = D.build_dataset(cfg.dataset_spec())
    jobs = [(arm, tog, cfg, seed, dataset, out_dir) for seed in seeds for arm, tog in arms]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_arm, jobs))
    else:
        rows = [_run_arm(j) for j in jobs]
    report = AblationReport(rows)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(cfg.to_json())
        (out / "ablation_rows.csv").write_text(report.rows_csv())
        (out / "ablation_summary.csv").write_text(report.summary_csv())
        (out / "ablation_table.txt").write_text(report.table())
    return report


# -- gradient check -----------------------------------------------------------------------

@dataclass
class GradcheckRow:
    term: str
    max_rel_error: float
    passed: bool
    value: float


def u_s_features(u_s: np.ndarray, enc) -> np.ndarray:
    with no_grad():
        return encode(Tensor(u_s), enc).data


def gradcheck_instance(cfg: ExperimentConfig, seed: int = 0, image_size: int = 8, batch: int = 4,
                       channels: int = 8):
    """Tiny double-precision problem with every term active and non-trivial.

    All stop-gradient quantities (weak branch, S_p2p driving the intervention) are
    computed once here and pinned, so finite differences see the same function the
    analytic gradient differentiates.
    """
    rng = np.random.default_rng(seed)
    Z, C = cfg.num_classes, channels
    enc, dec = init_params(seed, cfg.init_scale, C, Z, tuple(cfg.hidden_channels), dtype=np.float64)
    # positive biases keep most ReLUs active, so the features are not all zero
    for b in (enc.b1, enc.b2, enc.b3):
        b.data = rng.uniform(0.05, 0.3, b.shape)
    dec.b.data = rng.normal(0.0, 0.5, dec.b.shape)
    shape = (batch, 3, image_size, image_size)
    x_l = rng.uniform(0, 1, shape)
    y_l = rng.integers(0, Z, (batch, image_size, image_size))
    u_w = rng.uniform(0, 1, shape)
    u_s = np.clip(u_w * rng.uniform(0.6, 1.4, (batch, 3, 1, 1)) + rng.normal(0, 0.1, shape), 0, 1)
    weak = weak_branch(u_w, enc, dec)
    sets = class_feature_sets(weak.features, Tensor(weak.features), weak.probs)
    bank = update_prototypes(PrototypeBank.empty(Z, C, cfg.eta), sets)
    bank.prototypes = bank.prototypes + rng.normal(0, 0.05, bank.prototypes.shape)
    weak.s_p2p = p2p_similarities(Tensor(u_s_features(u_s, enc)), weak.features).data
    tau = float(np.median(weak.probs.max(axis=1)))
    inst_cfg = cfg.replace(toggles=Toggles(True, True, True), tau=tau, n_r=2, n_d=3, precision="float64",
                           feature_channels=C, image_size=image_size)
    return enc, dec, bank, inst_cfg, (x_l, y_l, u_w, u_s), weak


def run_gradcheck(
    cfg: ExperimentConfig,
    seed: int = 0,
    step: float = 1e-5,
    max_coords: int | None = 48,
    tol: float = GRADCHECK_TOL,
    corrupt: dict[str, float] | None = None,
) -> list[GradcheckRow]:
    """Central-difference check of every loss term w.r.t. all network parameters.

    ``corrupt`` scales the analytic gradient of the named terms (negative controls).
    """
    enc, dec, bank, icfg, (x_l, y_l, u_w, u_s), weak = gradcheck_instance(cfg, seed)
    params = all_tensors(enc, dec)
    key = (seed, 0)
    rows = []
    for term in GRADCHECK_TERMS:
        def f(term=term):
            obj = objective(enc, dec, bank, icfg, x_l, y_l, u_w, u_s, key, weak=weak)
            return obj.total if term == "L_total" else obj.terms[term]

        grads = analytic_grads(f, params)
        if corrupt and term in corrupt:
            grads = [g * corrupt[term] + (corrupt[term] - 1.0) for g in grads]
        err = grad_check(f, params, step=step, max_coords=max_coords, seed=seed, grads=grads)
        rows.append(GradcheckRow(term, err, err <= tol, float(f().data)))
    return rows


def gradcheck_table(rows: list[GradcheckRow]) -> str:
    lines = [f"{'term':<10}{'value':>14}{'max rel err':>14}  result"]
    for r in rows:
        lines.append(f"{r.term:<10}{r.value:>14.6g}{r.max_rel_error:>14.3e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines) + "\n"
