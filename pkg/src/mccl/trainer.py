"""Composite objective, SGD with momentum and the training loop."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as D
from .config import ExperimentConfig, LossWeights, Toggles
from .errors import ContractError, NonFiniteError
from .fka import (
    ClassFeatureSets,
    PrototypeBank,
    class_feature_sets,
    outlier_loss,
    p2p_loss,
    p2p_similarities,
    select_compact,
    update_prototypes,
)
from .metrics import miou
from .sai import (
    InterventionState,
    apply_mask,
    inject_noise,
    intervention_state,
    masking_loss,
    masking_matrix,
    noise_loss,
    sample_noise,
)
from .segnet import (
    PARAM_NAMES,
    DecoderParams,
    EncoderParams,
    all_tensors,
    decode,
    decode_logits,
    encode,
    init_params,
    params_from_arrays,
    params_to_arrays,
    predict,
)
from .serialization import load_checkpoint, save_checkpoint
from .tensor import Tensor, log_softmax, no_grad, pick

logger = logging.getLogger(__name__)

# purpose-split RNG streams
STREAM_SPLIT, STREAM_INIT, STREAM_SHUFFLE, STREAM_AUG, STREAM_MASK, STREAM_NOISE = range(6)

COMPONENTS = ("L_s", "L_ip", "L_p2p", "L_dt", "L_m", "L_n")
CSV_COLUMNS = ("epoch", "L_s", "L_ip", "L_p2p", "L_dt", "L_m", "L_n", "L_total", "mean_S_p2p", "val_mIoU")


def rng_for(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


# -- loss terms ------------------------------------------------------------------

def supervised_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Pixel-averaged cross-entropy of B×Z×H×W logits against B×H×W integer labels."""
    labels = np.asarray(labels)
    Z = logits.shape[1]
    if labels.shape != logits.shape[:1] + logits.shape[2:]:
        raise ContractError(f"label shape {labels.shape} does not match logits {logits.shape}")
    if labels.min() < 0 or labels.max() >= Z:
        raise ContractError(f"labels must lie in [0, {Z})")
    return -pick(log_softmax(logits, axis=1), labels, axis=1).mean()


def ip_loss(logits_s: Tensor, p_w, tau: float) -> Tensor:
    """Cross-entropy of the strong-view prediction against confident weak-view argmax labels.

    Averaged over pixels whose weak-view confidence is >= ``tau``; zero when there are none.
    """
    q = p_w.data if isinstance(p_w, Tensor) else np.asarray(p_w)
    if q.shape != logits_s.shape:
        raise ContractError(f"shape mismatch: {logits_s.shape} vs {q.shape}")
    confident = q.max(axis=1) >= tau
    n = int(confident.sum())
    if n == 0:
        return Tensor(np.zeros((), dtype=logits_s.dtype))
    picked = pick(log_softmax(logits_s, axis=1), q.argmax(axis=1), axis=1)
    return -(picked * Tensor(confident.astype(logits_s.dtype))).sum() * (1.0 / n)


def unsup_loss(l_p2p, l_dt, l_m, l_n, l_ip, w: LossWeights, toggles: Toggles):
    """alpha*L_p2p + omega*L_dt + beta*(L_m + L_n) (+ ip_weight*L_ip), gated by the toggles."""
    total = 0.0
    if toggles.if_:
        total = total + w.alpha * l_p2p + w.omega * l_dt
    if toggles.fp:
        total = total + w.beta * (l_m + l_n)
    if toggles.ip:
        total = total + w.ip_weight * l_ip
    return total


def sgd_update(params, grads, velocity, lr: float, momentum: float):
    """v' = momentum*v + g, p' = p - lr*v'. Returns (params', velocity')."""
    if lr <= 0 or not 0 <= momentum < 1:
        raise ContractError("need lr > 0 and momentum in [0, 1)")
    new_v = [momentum * v + g for v, g in zip(velocity, grads)]
    new_p = [p - lr * v for p, v in zip(params, new_v)]
    return new_p, new_v


# -- one objective evaluation -----------------------------------------------------------

@dataclass
class WeakBranch:
    """Stop-gradient inputs: weak-view features and probabilities, optionally per-image S_p2p.

    When ``s_p2p`` is set it replaces the detached similarity that drives the intervention.
    """

    features: np.ndarray
    probs: np.ndarray
    s_p2p: np.ndarray | None = None


@dataclass
class Objective:
    total: Tensor
    terms: dict[str, Tensor]
    s_p2p: np.ndarray | None = None
    sets: ClassFeatureSets | None = None
    states: list[InterventionState] = field(default_factory=list)


def weak_branch(u_w: np.ndarray, enc: EncoderParams, dec: DecoderParams) -> WeakBranch:
    with no_grad():
        F_w = encode(Tensor(u_w), enc)
        p_w = decode(F_w, dec)
    return WeakBranch(F_w.data, p_w.data)


def zero(dtype) -> Tensor:
    return Tensor(np.zeros((), dtype=dtype))


def objective(
    enc: EncoderParams,
    dec: DecoderParams,
    bank: PrototypeBank,
    cfg: ExperimentConfig,
    x_l: np.ndarray,
    y_l: np.ndarray,
    u_w: np.ndarray | None,
    u_s: np.ndarray | None,
    step_key: tuple[int, ...],
    weak: WeakBranch | None = None,
) -> Objective:
    """Total loss L_s + L_u for one labeled and one unlabeled batch (NCHW arrays).

    ``step_key`` seeds the mask and noise draws. ``weak`` lets callers pin the
    stop-gradient branch, e.g. when differentiating numerically.
    """
    dtype = enc.w1.dtype
    t = cfg.toggles
    terms = {name: zero(dtype) for name in COMPONENTS}
    terms["L_s"] = supervised_loss(decode_logits(encode(Tensor(x_l), enc), dec), y_l)
    out = Objective(terms["L_s"], terms)

    if t.any_unsupervised and u_s is not None and len(u_s):
        if weak is None:
            weak = weak_branch(u_w, enc, dec)
        F_s = encode(Tensor(u_s), enc)
        if t.if_:
            sims = p2p_similarities(F_s, weak.features)
        else:
            with no_grad():
                sims = p2p_similarities(F_s, weak.features)
        out.s_p2p = sims.data.astype(np.float64)
        drive = out.s_p2p if weak.s_p2p is None else np.asarray(weak.s_p2p, dtype=np.float64)

        if t.ip:
            terms["L_ip"] = ip_loss(decode_logits(F_s, dec), weak.probs, cfg.tau)
        if t.if_:
            terms["L_p2p"] = p2p_loss(sims)
            out.sets = class_feature_sets(weak.features, F_s, weak.probs)
            selection = select_compact(out.sets, bank, cfg.n_r, cfg.n_d)
            terms["L_dt"] = outlier_loss(selection, dtype)
        if t.fp:
            masks, noises = [], []
            for b in range(F_s.shape[0]):
                st = intervention_state(drive[b], cfg.lam)
                G, u = masking_matrix(F_s.data[b], st.b_l, st.b_r, rng_for(*step_key, STREAM_MASK, b))
                noises.append(sample_noise(st.v_u, F_s.shape[1:], rng_for(*step_key, STREAM_NOISE, b), dtype))
                masks.append(G)
                out.states.append(InterventionState(st.s_p2p, st.lam, st.v_u, st.b_l, st.b_r, u))
            p_m = decode(apply_mask(F_s, np.stack(masks)), dec)
            p_n = decode(inject_noise(F_s, np.stack(noises)), dec)
            terms["L_m"] = masking_loss(p_m, weak.probs, cfg.distance)
            terms["L_n"] = noise_loss(p_n, weak.probs, cfg.distance)

        out.total = terms["L_s"] + unsup_loss(
            terms["L_p2p"], terms["L_dt"], terms["L_m"], terms["L_n"], terms["L_ip"], cfg.weights(), t)
    return out


def weighted_total(values: dict[str, float], cfg: ExperimentConfig) -> float:
    """Recompute L_total from reported raw components."""
    return values["L_s"] + unsup_loss(values["L_p2p"], values["L_dt"], values["L_m"], values["L_n"],
                                      values["L_ip"], cfg.weights(), cfg.toggles)


# -- training state and step -------------------------------------------------------------

@dataclass
class TrainState:
    enc: EncoderParams
    dec: DecoderParams
    bank: PrototypeBank
    velocity: list[np.ndarray]
    step: int = 0

    def tensors(self) -> list[Tensor]:
        return all_tensors(self.enc, self.dec)


def init_state(cfg: ExperimentConfig, seed: int) -> TrainState:
    enc, dec = init_params(
        D.derive_seed(seed, STREAM_INIT), cfg.init_scale, cfg.feature_channels, cfg.num_classes,
        tuple(cfg.hidden_channels), dtype=cfg.dtype,
    )
    bank = PrototypeBank.empty(cfg.num_classes, cfg.feature_channels, cfg.eta, dtype=cfg.dtype)
    return TrainState(enc, dec, bank, [np.zeros_like(t.data) for t in all_tensors(enc, dec)])


def augment_batch(labeled_imgs, labeled_lbls, unlabeled_imgs, key: tuple[int, ...], dtype):
    """Weak views (+ flipped labels) for the labeled batch, view pairs for the unlabeled batch."""
    xs, ys = [], []
    for i, (img, lbl) in enumerate(zip(labeled_imgs, labeled_lbls)):
        geo = D.sample_geo(rng_for(*key, STREAM_AUG, 0, i))
        xs.append(D.weak_view(img, geo))
        ys.append(D.weak_view(lbl, geo))
    pairs = [D.make_view_pair(img, rng_for(*key, STREAM_AUG, 1, i)) for i, img in enumerate(unlabeled_imgs)]
    x_l = D.to_nchw(np.stack(xs)).astype(dtype)
    y_l = np.stack(ys)
    if pairs:
        u_w = D.to_nchw(np.stack([p.u_w for p in pairs])).astype(dtype)
        u_s = D.to_nchw(np.stack([p.u_s for p in pairs])).astype(dtype)
    else:
        u_w = u_s = None
    return x_l, y_l, u_w, u_s


def train_step(
    state: TrainState,
    labeled: tuple[np.ndarray, np.ndarray],
    unlabeled: np.ndarray | None,
    cfg: ExperimentConfig,
    seed: int,
) -> tuple[TrainState, dict]:
    """Augment, evaluate the objective, take one SGD step, then update the prototypes.

    ``labeled`` holds NHWC images and label maps; ``unlabeled`` NHWC images. Returns the
    new state and a metrics record of raw loss components.
    """
    key = (seed, state.step)
    x_l, y_l, u_w, u_s = augment_batch(labeled[0], labeled[1],
                                       unlabeled if unlabeled is not None else [], key, cfg.dtype)
    params = state.tensors()
    for p in params:
        p.requires_grad = True
        p.zero_grad()
    obj = objective(state.enc, state.dec, state.bank, cfg, x_l, y_l, u_w, u_s, key)

    record = {name: float(obj.terms[name].data) for name in COMPONENTS}
    record["L_total"] = float(obj.total.data)
    for name in COMPONENTS + ("L_total",):
        if not math.isfinite(record[name]):
            raise NonFiniteError(name, f"non-finite loss component {name} at step {state.step}")
    record["mean_S_p2p"] = float(obj.s_p2p.mean()) if obj.s_p2p is not None else float("nan")

    obj.total.backward()
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    new_p, new_v = sgd_update([p.data for p in params], grads, state.velocity, cfg.lr, cfg.momentum)
    arrays = dict(zip(PARAM_NAMES, new_p))
    enc, dec = params_from_arrays(arrays)

    bank = state.bank
    if cfg.toggles.if_ and obj.sets is not None:
        bank = update_prototypes(bank, obj.sets)
    return TrainState(enc, dec, bank, new_v, state.step + 1), record


# -- full runs ----------------------------------------------------------------------

def _batches(order: np.ndarray, size: int):
    for i in range(0, len(order), size):
        yield order[i:i + size]


class _Cycler:
    """Endless reshuffled passes over the labeled ids."""

    def __init__(self, ids, seed: int):
        self.ids = np.asarray(ids)
        self.seed = seed
        self.epoch = 0
        self.queue: list[int] = []

    def take(self, n: int) -> np.ndarray:
        while len(self.queue) < n:
            perm = rng_for(self.seed, STREAM_SHUFFLE, 1, self.epoch).permutation(self.ids)
            self.queue.extend(int(i) for i in perm)
            self.epoch += 1
        out, self.queue = self.queue[:n], self.queue[n:]
        return np.asarray(out)


def evaluate(state_or_params, images: np.ndarray, labels: np.ndarray, num_classes: int) -> float:
    enc, dec = (state_or_params.enc, state_or_params.dec) if isinstance(state_or_params, TrainState) \
        else state_or_params
    pred = predict(D.to_nchw(images), enc, dec)
    return miou(pred, labels, num_classes)


def format_value(x: float) -> str:
    return "nan" if x != x else f"{x:.12g}"


@dataclass
class TrainResult:
    state: TrainState
    rows: list[dict]
    config: ExperimentConfig
    seed: int

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow([r["epoch"]] + [format_value(r[c]) for c in CSV_COLUMNS[1:]])
        return buf.getvalue()

    @property
    def final_miou(self) -> float:
        return self.rows[-1]["val_mIoU"] if self.rows else float("nan")


def checkpoint_tensors(state: TrainState) -> dict[str, np.ndarray]:
    tensors = dict(params_to_arrays(state.enc, state.dec))
    tensors["bank.prototypes"] = state.bank.prototypes
    tensors["bank.initialized"] = state.bank.initialized.astype(np.uint8)
    for name, v in zip(PARAM_NAMES, state.velocity):
        tensors[f"opt.velocity.{name}"] = v
    return tensors


def save_state(path: str | Path, state: TrainState, cfg: ExperimentConfig, seed: int, epoch: int) -> None:
    header = {"config_hash": cfg.hash(), "epoch": epoch, "seed": seed, "step": state.step,
              "config": cfg.to_dict()}
    save_checkpoint(path, header, checkpoint_tensors(state))


def load_state(path: str | Path) -> tuple[TrainState, ExperimentConfig, dict]:
    header, tensors = load_checkpoint(path)
    cfg = ExperimentConfig.from_dict(header["config"])
    enc, dec = params_from_arrays(tensors)
    bank = PrototypeBank(tensors["bank.prototypes"].copy(), tensors["bank.initialized"].astype(bool),
                         cfg.eta)
    velocity = [tensors[f"opt.velocity.{n}"].copy() for n in PARAM_NAMES]
    return TrainState(enc, dec, bank, velocity, header["step"]), cfg, header


def train(
    cfg: ExperimentConfig,
    dataset: D.SyntheticDataset | None = None,
    seed: int | None = None,
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Train one model. Writes ``metrics.csv`` and checkpoints into ``out_dir`` when given."""
    seed = cfg.seeds[0] if seed is None else seed
    if dataset is None:
        dataset = D.build_dataset(cfg.dataset_spec())
    train_imgs, train_lbls = dataset.train()
    val_imgs, val_lbls = dataset.val()
    split = D.make_split(len(train_imgs), min(cfg.n_labeled, len(train_imgs)), D.derive_seed(seed, STREAM_SPLIT))
    labeled_ids = np.asarray(split.labeled)
    unlabeled_ids = np.asarray(split.unlabeled)
    use_unlabeled = cfg.toggles.any_unsupervised and len(unlabeled_ids) > 0
    n_steps = math.ceil((len(unlabeled_ids) if len(unlabeled_ids) else len(labeled_ids)) / cfg.batch)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(cfg.to_json())

    state = init_state(cfg, seed)
    cycler = _Cycler(labeled_ids, seed)
    rows = []
    for epoch in range(1, cfg.epochs + 1):
        perm = rng_for(seed, STREAM_SHUFFLE, 0, epoch).permutation(unlabeled_ids) if len(unlabeled_ids) \
            else np.arange(0)
        sums = dict.fromkeys(COMPONENTS + ("L_total",), 0.0)
        sims = []
        for s in range(n_steps):
            lab = cycler.take(min(cfg.batch, len(labeled_ids)))
            unl = perm[s * cfg.batch:(s + 1) * cfg.batch] if use_unlabeled else None
            state, rec = train_step(state, (train_imgs[lab], train_lbls[lab]),
                                    train_imgs[unl] if unl is not None else None, cfg, seed)
            for k in sums:
                sums[k] += rec[k]
            if rec["mean_S_p2p"] == rec["mean_S_p2p"]:
                sims.append(rec["mean_S_p2p"])
        row = {"epoch": epoch, **{k: v / n_steps for k, v in sums.items()}}
        row["mean_S_p2p"] = float(np.mean(sims)) if sims else float("nan")
        row["val_mIoU"] = evaluate(state, val_imgs, val_lbls, cfg.num_classes)
        rows.append(row)
        logger.info("epoch %d  L_total=%.4f  val_mIoU=%.4f", epoch, row["L_total"], row["val_mIoU"])
        if out is not None and cfg.ckpt_every and epoch % cfg.ckpt_every == 0:
            save_state(out / f"ckpt_epoch{epoch:04d}.bin", state, cfg, seed, epoch)

    if not rows:
        rows.append({"epoch": 0, **dict.fromkeys(COMPONENTS + ("L_total", "mean_S_p2p"), float("nan")),
                     "val_mIoU": evaluate(state, val_imgs, val_lbls, cfg.num_classes)})
    result = TrainResult(state, rows, cfg, seed)
    if out is not None:
        (out / "metrics.csv").write_text(result.csv_text())
        save_state(out / "final.ckpt", state, cfg, seed, cfg.epochs)
    return result
