"""Training loop and evaluation harness."""
from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import ScenePair
from .geometry import (
    DegenerateGeometryError,
    compose_essential,
    decompose_essential,
    pose_error,
    ransac_essential,
    virtual_correspondences,
)
from .metrics import FAILED_POSE_ERROR, MetricsReport, aggregate, prf_metrics
from .model import (
    MIN_CANDIDATES,
    OMEGA_MODES,
    CorrAdaptor,
    CorrAdaptorConfig,
    classification_loss,
    hybrid_loss,
    regression_loss,
)
from .numerics import DTYPE, NonFiniteError, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

VIRTUAL_COUNT = 169


@dataclass
class TrainConfig:
    steps: int = 2000
    batch: int = 8
    lr: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0
    val_every: int = 0  # epochs between validations; 0 = only after the last step
    ransac_iters: int = 1000
    pose_path: str = "ransac"  # ransac | direct


class TrainingError(RuntimeError):
    pass


def _stack(pairs: Sequence[ScenePair]):
    n = {p.n for p in pairs}
    if len(n) != 1:
        raise ValueError("a batch must share one correspondence count")
    C = torch.tensor(np.stack([p.correspondences for p in pairs]), dtype=DTYPE)
    y = torch.tensor(np.stack([p.labels for p in pairs]))
    return C, y


def _virtual(pairs: Sequence[ScenePair]):
    ps, qs, Es = [], [], []
    for pair in pairs:
        p, q = virtual_correspondences(count=VIRTUAL_COUNT, pose=pair.pose)
        ps.append(p)
        qs.append(q)
        Es.append(compose_essential(pair.pose))
    return (torch.tensor(np.stack(Es), dtype=DTYPE), torch.tensor(np.stack(ps), dtype=DTYPE),
            torch.tensor(np.stack(qs), dtype=DTYPE))


def reg_weight(cfg: CorrAdaptorConfig, step: int, steps: int) -> float:
    return 0.0 if step < cfg.warmup_frac * steps else cfg.lam


def compute_losses(model: CorrAdaptor, C, y, E_gt, p, q, lam: float):
    out = model(C)
    omega = OMEGA_MODES[model.cfg.omega]
    cls = classification_loss(out.prune_states, y, omega)
    valid = out.E_valid
    if lam > 0 and bool(valid.any()):
        reg = regression_loss(out.E_hat[valid], E_gt[valid], p[valid], q[valid]).mean()
    else:
        reg = torch.zeros((), dtype=DTYPE)
    return out, cls, reg, hybrid_loss(cls, reg, lam)


def train(train_pairs: Sequence[ScenePair], cfg: CorrAdaptorConfig, tcfg: TrainConfig,
          val_pairs: Sequence[ScenePair] | None = None, log_path: str | Path | None = None,
          checkpoint_path: str | Path | None = None) -> tuple[CorrAdaptor, list[dict]]:
    """Adam training with per-step JSON-lines logging.

    Deterministic for a fixed ``tcfg.seed``: parameter init and batch order
    both derive from it.
    """
    if not train_pairs:
        raise ValueError("empty training set")
    if tcfg.steps < 1:
        raise ValueError("steps must be at least 1")
    if any(p.labels is None or p.pose is None for p in train_pairs):
        raise ValueError("training pairs need labels and a ground-truth pose")
    torch.manual_seed(tcfg.seed)
    model = CorrAdaptor(cfg)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=tcfg.lr, weight_decay=tcfg.weight_decay)
    rng = np.random.Generator(np.random.PCG64(tcfg.seed))
    virtual = _virtual(train_pairs)
    batch = min(tcfg.batch, len(train_pairs))
    steps_per_epoch = max(1, len(train_pairs) // batch)
    history: list[dict] = []
    log_file = open(log_path, "w") if log_path else None
    order = np.array([], dtype=int)
    try:
        for step in range(tcfg.steps):
            if len(order) < batch:
                order = np.concatenate([order, rng.permutation(len(train_pairs))])
            sel, order = order[:batch], order[batch:]
            C, y = _stack([train_pairs[i] for i in sel])
            E_gt, p, q = (v[torch.as_tensor(sel)] for v in virtual)
            lam = reg_weight(cfg, step, tcfg.steps)
            _, cls, reg, total = compute_losses(model, C, y, E_gt, p, q, lam)
            if not torch.isfinite(total):
                raise TrainingError(f"non-finite loss at step {step}: cls={cls.item()} reg={reg.item()}")
            opt.zero_grad()
            total.backward()
            for name, prm in model.named_parameters():
                if prm.grad is not None and not torch.isfinite(prm.grad).all():
                    raise TrainingError(f"non-finite gradient in {name} at step {step}: "
                                        f"cls={cls.item()} reg={reg.item()}")
            opt.step()
            rec = {"step": step, "loss_cls": cls.item(), "loss_reg": reg.item(), "loss_total": total.item()}
            history.append(rec)
            if log_file:
                log_file.write(json.dumps(rec) + "\n")
            epoch_done = (step + 1) % steps_per_epoch == 0
            epoch = (step + 1) // steps_per_epoch
            last = step + 1 == tcfg.steps
            if val_pairs and ((tcfg.val_every and epoch_done and epoch % tcfg.val_every == 0) or last):
                report = evaluate(model, val_pairs, tcfg.ransac_iters, tcfg.pose_path, seed=tcfg.seed)
                rec = {"epoch": epoch if epoch_done else epoch + 1, **report.summary()}
                history.append(rec)
                if log_file:
                    log_file.write(json.dumps(rec) + "\n")
                model.train()
    finally:
        if log_file:
            log_file.close()
    if checkpoint_path:
        save_checkpoint(model.state_dict(), checkpoint_path)
    return model, history


def load_model(cfg: CorrAdaptorConfig, checkpoint_path: str | Path) -> CorrAdaptor:
    model = CorrAdaptor(cfg)
    state = load_checkpoint(checkpoint_path)
    model.load_state_dict(state)
    return model


# ------------------------------------------------------------------- evaluation

def estimate_pose(C: np.ndarray, predicted: np.ndarray, ransac_iters: int, seed: int,
                  E_hat: np.ndarray | None = None):
    """Relative pose from predicted inliers, by RANSAC or by decomposing ``E_hat`` directly."""
    pts = C[predicted]
    if len(pts) < MIN_CANDIDATES:
        raise DegenerateGeometryError("fewer than 8 predicted inliers")
    if E_hat is not None:
        return decompose_essential(E_hat, pts)
    E, mask = ransac_essential(pts, ransac_iters, seed=seed)
    return decompose_essential(E, pts[mask])


def _pair_row(pair: ScenePair, predicted: np.ndarray, pose_fn) -> dict:
    row = {"name": pair.name}
    if pair.labels is not None:
        row["precision"], row["recall"], row["fscore"] = prf_metrics(predicted, pair.labels)
    if pair.has_gt:
        try:
            row["pose_error"] = max(pose_error(pose_fn(), pair.pose))
        except DegenerateGeometryError:
            row["pose_error"] = FAILED_POSE_ERROR
    return row


@torch.no_grad()
def predict(model: CorrAdaptor, pairs: Sequence[ScenePair], chunk: int = 8):
    """Model outputs per pair: (inlier mask, E_hat, E_valid)."""
    model.eval()
    out = []
    for start in range(0, len(pairs), chunk):
        group = pairs[start:start + chunk]
        by_n: dict[int, list[int]] = {}
        for i, p in enumerate(group):
            by_n.setdefault(p.n, []).append(i)
        results = {}
        for idxs in by_n.values():
            C = torch.tensor(np.stack([group[i].correspondences for i in idxs]), dtype=DTYPE)
            res = model(C)
            for j, i in enumerate(idxs):
                results[i] = (res.inlier_mask[j].numpy(), res.E_hat[j].numpy(), bool(res.E_valid[j]))
        out.extend(results[i] for i in range(len(group)))
    return out


def evaluate(model: CorrAdaptor, pairs: Sequence[ScenePair], ransac_iters: int = 1000,
             pose_path: str = "ransac", seed: int = 0) -> MetricsReport:
    rows = []
    for pair, (mask, E_hat, valid) in zip(pairs, predict(model, pairs)):
        def pose_fn(pair=pair, mask=mask, E_hat=E_hat, valid=valid):
            if pose_path == "direct":
                if not valid:
                    raise DegenerateGeometryError("too few positive weights for eight-point")
                return estimate_pose(pair.correspondences, mask, ransac_iters, seed, E_hat)
            return estimate_pose(pair.correspondences, mask, ransac_iters, seed)
        rows.append(_pair_row(pair, mask, pose_fn))
    return aggregate(rows)


def evaluate_ransac(pairs: Sequence[ScenePair], ransac_iters: int = 1000, seed: int = 0) -> MetricsReport:
    """RANSAC over all correspondences, no learning involved."""
    rows = []
    for pair in pairs:
        C = pair.correspondences
        try:
            E, mask = ransac_essential(C, ransac_iters, seed=seed)
        except DegenerateGeometryError:
            E, mask = None, np.zeros(len(C), dtype=bool)

        def pose_fn(E=E, mask=mask, C=C):
            if E is None:
                raise DegenerateGeometryError("RANSAC failed")
            return decompose_essential(E, C[mask])
        rows.append(_pair_row(pair, mask, pose_fn))
    return aggregate(rows)


def oracle_report(pairs: Sequence[ScenePair]) -> MetricsReport:
    """Labels used as predictions; pose from RANSAC over the true inliers."""
    rows = []
    for pair in pairs:
        rows.append(_pair_row(pair, pair.labels, lambda pair=pair: estimate_pose(
            pair.correspondences, pair.labels, 1000, 0)))
    return aggregate(rows)


# ------------------------------------------------------------ desk experiments

# Small enough for 2000 steps per run on a single CPU core; see README.
DESK_MODEL = dict(d=16, heads=2, clusters=16, L_m=2)
DESK_TRAIN = dict(steps=2000, batch=1, lr=1e-3)
DESK_DATA = dict(train_pairs=200, val_pairs=50, n=500, outlier_ratio=0.5, noise_sigma=1e-3,
                 train_seed=11, val_seed=12)
ABLATIONS = {
    "full": {},
    "motion-off": {"motion": False},
    "implicit-only": {"branches": "implicit"},
    "explicit-only": {"branches": "explicit"},
    "plain-attention": {"attention": "dense"},  # softmax attention in place of flow
}


def ablation_config(base: CorrAdaptorConfig, name: str) -> CorrAdaptorConfig:
    if name not in ABLATIONS:
        raise ValueError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
    return replace(base, **ABLATIONS[name])


def desk_run(variant: str, seed: int, steps: int | None = None) -> dict:
    """Train one desk-scale variant and report validation metrics plus wall time."""
    from .data import synth_dataset

    torch.set_num_threads(1)
    dd = DESK_DATA
    tr = synth_dataset(dd["train_pairs"], dd["n"], dd["outlier_ratio"], dd["noise_sigma"], dd["train_seed"])
    va = synth_dataset(dd["val_pairs"], dd["n"], dd["outlier_ratio"], dd["noise_sigma"], dd["val_seed"])
    cfg = ablation_config(CorrAdaptorConfig(**DESK_MODEL), variant)
    tcfg = TrainConfig(**{**DESK_TRAIN, "seed": seed, **({"steps": steps} if steps else {})})
    start = time.perf_counter()
    model, _ = train(tr, cfg, tcfg)
    report = evaluate(model, va, tcfg.ransac_iters, tcfg.pose_path, seed=seed)
    return {"variant": variant, "seed": seed, **report.summary(), "seconds": time.perf_counter() - start}


def desk_experiment(variants=("full", "motion-off", "implicit-only"), seeds=(0, 1, 2),
                    steps: int | None = None, workers: int | None = None) -> list[dict]:
    """All ``variants x seeds`` desk runs, spread over processes when cores allow."""
    jobs = [(v, s) for v in variants for s in seeds]
    workers = workers or min(len(jobs), os.cpu_count() or 1)
    if workers <= 1:
        return [desk_run(v, s, steps) for v, s in jobs]
    import multiprocessing as mp

    with ProcessPoolExecutor(workers, mp_context=mp.get_context("spawn")) as pool:
        futures = [pool.submit(desk_run, v, s, steps) for v, s in jobs]
        return [f.result() for f in futures]
