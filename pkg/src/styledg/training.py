"""Training loop, optimizer, evaluation protocol, and the ablation runner.

One Adam instance owns two disjoint parameter groups: the backbone with
its classifier (driven by the dual-branch objective) and the style nets
(driven by their content/style objective).  Stop-gradient boundaries in
the forward pass keep the two objectives from exchanging adjoints, so a
step from one objective leaves the other group's parameters bitwise
untouched.
"""

from __future__ import annotations

import dataclasses
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .stylestats import SrmIlConfig, srm_il
from .stylenets import SrmFlConfig, StyleNets, style_net_loss, style_nets_init
from .backbone import (
    BackboneConfig, ModelState, classify, config_hash, ema_parameters, ema_update,
    forward_dual, forward_stages, model_init, save_checkpoint,
)
from .losses import FocalConfig, LossBundle, combine, content_consistency, focal_loss, pdr_loss
from .metrics import paired_t_test, roc_auc
from .synthdata import DatasetManifest, PreprocessConfig, load_image_raw, load_manifest, preprocess


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, step: int, checkpoint: Optional[Path] = None):
        super().__init__(message)
        self.step = step
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    lr: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 16
    grad_accum_steps: int = 4
    epochs: int = 10
    ema_decay: float = 0.997
    seed: int = 0
    precision: str = "float32"  # tests and gradient checks use float64
    use_srm_il: bool = True
    use_srm_fl: bool = True
    use_l_ccr: bool = True
    use_l_pdr: bool = True
    focal: FocalConfig = field(default_factory=FocalConfig)
    srm_il: SrmIlConfig = field(default_factory=SrmIlConfig)
    srm_fl: SrmFlConfig = field(default_factory=SrmFlConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)

    def __post_init__(self):
        if self.lr <= 0 or self.adam_eps <= 0:
            raise ValueError("rates must be positive")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.batch_size < 1 or self.grad_accum_steps < 1 or self.epochs < 0:
            raise ValueError("batch_size/grad_accum_steps/epochs out of range")
        if not 0 < self.ema_decay <= 1:
            raise ValueError("ema_decay must lie in (0, 1]")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    def to_dict(self) -> Dict:
        return asdict(self)

    @staticmethod
    def from_dict(data: Dict) -> "TrainConfig":
        data = dict(data)
        for key, cls in (("focal", FocalConfig), ("srm_il", SrmIlConfig),
                         ("srm_fl", SrmFlConfig), ("backbone", BackboneConfig),
                         ("preprocess", PreprocessConfig)):
            if key in data and isinstance(data[key], dict):
                data[key] = cls(**data[key])
        return TrainConfig(**data)


# -- optimizer ---------------------------------------------------------------------


class Adam:
    """Adam with bias correction over named parameter groups.

    Parameters whose gradient is ``None`` are skipped entirely: their
    moments and values stay untouched, which is what keeps the two
    objective-specific groups independent.
    """

    def __init__(self, groups: Dict[str, Dict[str, Tensor]], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.groups = groups
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self._m: Dict[str, np.ndarray] = {}
        self._v: Dict[str, np.ndarray] = {}
        self._t: Dict[str, int] = {}

    def _params(self):
        for gname, group in self.groups.items():
            for pname, p in group.items():
                yield f"{gname}/{pname}", p

    def step(self) -> None:
        for key, p in self._params():
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for {key}")
            if key not in self._m:
                self._m[key] = np.zeros_like(p.data)
                self._v[key] = np.zeros_like(p.data)
                self._t[key] = 0
            self._t[key] += 1
            t = self._t[key]
            self._m[key] = self.beta1 * self._m[key] + (1 - self.beta1) * g
            self._v[key] = self.beta2 * self._v[key] + (1 - self.beta2) * (g * g)
            m_hat = self._m[key] / (1 - self.beta1 ** t)
            v_hat = self._v[key] / (1 - self.beta2 ** t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for _, p in self._params():
            p.grad = None


# -- loss computation for one micro-batch ---------------------------------------------


def compute_losses(state: ModelState, nets: Optional[StyleNets], x_clean: Tensor,
                   x_stylized: Tensor, labels: np.ndarray, pairing: np.ndarray,
                   cfg: TrainConfig) -> Tuple[Tensor, Optional[Tensor], LossBundle]:
    """Build the dual-branch objective graph and the style-net objective graph.

    Returns (total loss tensor, style-net loss tensor or None, value bundle).
    """
    need_clean = cfg.use_l_ccr or cfg.use_l_pdr
    out = forward_dual(state, nets, x_clean, x_stylized, pairing, cfg.srm_fl,
                       use_srm_fl=cfg.use_srm_fl, need_clean_branch=need_clean,
                       training=True)
    l_cls = focal_loss(out.probs_stylized, labels, cfg.focal)

    l_ccr_t = content_consistency(out.features_stylized, out.features_clean) \
        if cfg.use_l_ccr else None
    l_pdr_t = pdr_loss(out.probs_stylized, out.probs_clean) if cfg.use_l_pdr else None
    cons_terms = [t for t in (l_ccr_t, l_pdr_t) if t is not None]
    l_total = l_cls
    if cons_terms:
        acc = cons_terms[0]
        for extra in cons_terms[1:]:
            acc = T.add(acc, extra)
        l_total = T.add(l_cls, T.mul(acc, 0.5))

    l_phi_t = None
    if cfg.use_srm_fl and out.style_triple is not None:
        z1d, z2d, zs_phi = out.style_triple
        _, _, l_phi_t = style_net_loss(z1d, z2d, zs_phi, cfg.srm_fl.eta)

    bundle = combine(
        l_cls.item(),
        l_ccr_t.item() if l_ccr_t is not None else 0.0,
        l_pdr_t.item() if l_pdr_t is not None else 0.0,
        l_phi_t.item() if l_phi_t is not None else 0.0,
    )
    return l_total, l_phi_t, bundle


# -- data plumbing ------------------------------------------------------------------


def rng_streams(seed: int) -> Dict[str, np.random.Generator]:
    """Named independent streams so toggling components never shifts the
    data order, crops, or pairing draws of the remaining ones."""
    root = np.random.SeedSequence(seed)
    names = ("init", "data", "crop", "style", "pairing")
    children = root.spawn(len(names))
    return {name: np.random.default_rng(ss) for name, ss in zip(names, children)}


def resolve_preprocess(cfg: PreprocessConfig, manifest: DatasetManifest) -> PreprocessConfig:
    """Fill normalization constants from the corpus metadata when unset."""
    if cfg.normalize_mean is not None and cfg.normalize_std is not None:
        return cfg
    meta = manifest.meta
    if "pixel_mean" not in meta or "pixel_std" not in meta:
        raise ValueError("manifest metadata lacks pixel_mean/pixel_std and the "
                         "preprocess config does not pin them")
    return dataclasses.replace(cfg, normalize_mean=float(meta["pixel_mean"]),
                               normalize_std=float(meta["pixel_std"]))


class _ImageCache:
    def __init__(self, root: Path, resize_to: int):
        self.root = root
        self.resize_to = resize_to
        self._store: Dict[str, np.ndarray] = {}

    def get(self, rel_path: str) -> np.ndarray:
        arr = self._store.get(rel_path)
        if arr is None:
            arr = load_image_raw(self.root / rel_path, self.resize_to)
            self._store[rel_path] = arr
        return arr


def _prepare_batch(manifest: DatasetManifest, indices: Sequence[int], cache: _ImageCache,
                   pp: PreprocessConfig, cfg: TrainConfig,
                   crop_rng: np.random.Generator,
                   style_rng: np.random.Generator) -> Tuple[Tensor, Tensor, np.ndarray]:
    """Crops + flips, image-level restyling, shared normalization."""
    dtype = cfg.dtype
    clean_rows, styl_rows, label_rows = [], [], []
    for idx in indices:
        rec = manifest.records[idx]
        raw, _ = preprocess(cache.get(rec.path), pp, "train", crop_rng, dtype=np.float64)
        if cfg.use_srm_il:
            stylized, _ = srm_il(raw, cfg.srm_il, style_rng)
        else:
            stylized = raw
        clean_rows.append((raw.data - pp.normalize_mean) / pp.normalize_std)
        styl_rows.append((stylized.data - pp.normalize_mean) / pp.normalize_std)
        label_rows.append(rec.labels)
    x_clean = Tensor(np.stack(clean_rows).astype(dtype))
    x_styl = Tensor(np.stack(styl_rows).astype(dtype))
    return x_clean, x_styl, np.array(label_rows, dtype=np.float64)


# -- the training loop -----------------------------------------------------------------


@dataclass
class TrainResult:
    state: ModelState
    nets: Optional[StyleNets]
    logs: List[Dict]
    config: TrainConfig


def train(manifest: DatasetManifest, cfg: TrainConfig,
          out_dir: Optional[Union[str, Path]] = None,
          state: Optional[ModelState] = None,
          nets: Optional[StyleNets] = None) -> TrainResult:
    """Full training run; deterministic for a fixed (seed, config, manifest).

    Gradients accumulate over ``grad_accum_steps`` micro-batches (scaled by
    the window size) before each optimizer step; the EMA shadow updates
    after every optimizer step.  A non-finite loss or gradient aborts with
    the last good parameters checkpointed.
    """
    if len(manifest) == 0:
        raise ValueError("empty training manifest")
    if manifest.root is None:
        raise ValueError("manifest has no root directory")
    streams = rng_streams(cfg.seed)
    dtype = cfg.dtype
    pp = resolve_preprocess(cfg.preprocess, manifest)

    if state is None:
        state = model_init(cfg.backbone, streams["init"], dtype=dtype)
    if nets is None and cfg.use_srm_fl and cfg.srm_fl.embeddings == "learnable":
        channels = cfg.backbone.stage_channels[cfg.srm_fl.insertion_index - 1]
        nets = style_nets_init(channels, cfg.srm_fl.reduction, streams["init"], dtype=dtype)

    groups: Dict[str, Dict[str, Tensor]] = {"backbone": state.params}
    if nets is not None:
        groups["stylenets"] = nets.parameters()
    optimizer = Adam(groups, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        resolved = dataclasses.replace(cfg, preprocess=pp)
        (out_dir / "config.json").write_text(json.dumps(resolved.to_dict(), indent=2))

    cache = _ImageCache(manifest.root, pp.resize_to)
    n = len(manifest)
    logs: List[Dict] = []
    last_good = state.snapshot()

    def abort(reason: str) -> TrainingAborted:
        for name, arr in last_good.items():
            state.params[name].data = arr
        ckpt = None
        if out_dir is not None:
            ckpt = out_dir / "checkpoint_lastgood.npz"
            save_checkpoint(ckpt, state, nets)
        return TrainingAborted(f"training aborted at step {state.step}: {reason}",
                               state.step, ckpt)

    for epoch in range(cfg.epochs):
        order = streams["data"].permutation(n)
        n_batches = n // cfg.batch_size
        for window_start in range(0, n_batches, cfg.grad_accum_steps):
            window = range(window_start, min(window_start + cfg.grad_accum_steps, n_batches))
            window_losses: List[LossBundle] = []
            for b in window:
                indices = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                x_clean, x_styl, labels = _prepare_batch(
                    manifest, indices, cache, pp, cfg, streams["crop"], streams["style"])
                if cfg.use_srm_fl:
                    pairing = streams["pairing"].permutation(cfg.batch_size)
                else:
                    pairing = np.arange(cfg.batch_size)
                try:
                    l_total, l_phi, bundle = compute_losses(
                        state, nets, x_clean, x_styl, labels, pairing, cfg)
                    T.mul(l_total, 1.0 / len(window)).backward()
                    if l_phi is not None:
                        T.mul(l_phi, 1.0 / len(window)).backward()
                except FloatingPointError as exc:
                    raise abort(str(exc)) from exc
                window_losses.append(bundle)

            try:
                optimizer.step()
            except FloatingPointError as exc:
                raise abort(str(exc)) from exc
            optimizer.zero_grad()
            state.step += 1
            ema_update(state, cfg.ema_decay)
            last_good = state.snapshot()
            logs.append({
                "step": state.step,
                "epoch": epoch,
                "micro_batches": len(window_losses),
                "l_cls": float(np.mean([w.l_cls for w in window_losses])),
                "l_ccr": float(np.mean([w.l_ccr for w in window_losses])),
                "l_pdr": float(np.mean([w.l_pdr for w in window_losses])),
                "l_cons": float(np.mean([w.l_cons for w in window_losses])),
                "l_total": float(np.mean([w.l_total for w in window_losses])),
                "l_phi": float(np.mean([w.l_phi for w in window_losses])),
            })

    if out_dir is not None:
        save_checkpoint(out_dir / "checkpoint.npz", state, nets)
        (out_dir / "train_log.json").write_text(json.dumps(logs, indent=2))
    return TrainResult(state=state, nets=nets, logs=logs, config=cfg)


# -- evaluation -------------------------------------------------------------------------


@dataclass
class MetricsReport:
    mean_auc: Optional[float]
    per_class_auc: Dict[str, Optional[float]]
    per_domain: Dict[str, Dict]
    config_hash: str
    seed: int
    num_samples: int
    notes: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return asdict(self)

    def write_json(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def write_csv(self, path: Union[str, Path]) -> None:
        with Path(path).open("w") as fh:
            fh.write("scope,class,auc\n")
            for cls, auc in self.per_class_auc.items():
                fh.write(f"all,{cls},{'' if auc is None else f'{auc:.6f}'}\n")
            for dom, info in self.per_domain.items():
                for cls, auc in info["per_class_auc"].items():
                    fh.write(f"domain_{dom},{cls},{'' if auc is None else f'{auc:.6f}'}\n")


def _macro(per_class: Dict[str, Optional[float]]) -> Optional[float]:
    vals = [v for v in per_class.values() if v is not None]
    return float(np.mean(vals)) if vals else None


def predict_probs(state: ModelState, manifest: DatasetManifest, pp: PreprocessConfig,
                  use_ema: bool = True, batch_size: int = 32,
                  dtype=np.float64) -> np.ndarray:
    """Inference probabilities with the style machinery disabled."""
    if manifest.root is None:
        raise ValueError("manifest has no root directory")
    params = ema_parameters(state) if use_ema else state.params
    cache = _ImageCache(manifest.root, pp.resize_to)
    rows = []
    for start in range(0, len(manifest), batch_size):
        chunk = manifest.records[start:start + batch_size]
        batch = []
        for rec in chunk:
            _, normed = preprocess(cache.get(rec.path), pp, "eval", dtype=dtype)
            batch.append(normed.data)
        x = Tensor(np.stack(batch).astype(dtype))
        feats = forward_stages(state, x, 1, 4, training=False, params=params)
        _, probs = classify(state, feats, params=params)
        rows.append(probs.data)
    return np.concatenate(rows, axis=0)


def evaluate(state: ModelState, manifest: DatasetManifest, pp: PreprocessConfig,
             use_ema: bool = True, per_domain: bool = True, seed: int = 0,
             cfg_for_hash: Optional[Dict] = None, batch_size: int = 32) -> MetricsReport:
    """Per-class and macro AUC, overall and per domain; single-class cells
    are excluded from means and noted."""
    pp = resolve_preprocess(pp, manifest)
    probs = predict_probs(state, manifest, pp, use_ema=use_ema, batch_size=batch_size)
    labels = manifest.labels_matrix()
    domains = np.array([r.domain for r in manifest.records])
    n_classes = labels.shape[1]
    notes: List[str] = []

    def per_class_for(mask: np.ndarray) -> Dict[str, Optional[float]]:
        out = {}
        for j in range(n_classes):
            out[f"class_{j}"] = roc_auc(probs[mask, j], labels[mask, j])
        return out

    all_mask = np.ones(len(manifest), dtype=bool)
    per_class = per_class_for(all_mask)
    for cls, val in per_class.items():
        if val is None:
            notes.append(f"{cls}: single-class labels overall, excluded from mean")

    per_domain_info: Dict[str, Dict] = {}
    if per_domain:
        for d in sorted(set(domains.tolist())):
            mask = domains == d
            pc = per_class_for(mask)
            for cls, val in pc.items():
                if val is None:
                    notes.append(f"domain {d}/{cls}: single-class labels, excluded")
            per_domain_info[str(d)] = {
                "per_class_auc": pc,
                "macro_auc": _macro(pc),
                "count": int(mask.sum()),
            }

    return MetricsReport(
        mean_auc=_macro(per_class),
        per_class_auc=per_class,
        per_domain=per_domain_info,
        config_hash=config_hash(cfg_for_hash) if cfg_for_hash is not None else "",
        seed=seed,
        num_samples=len(manifest),
        notes=notes,
    )


# -- ablation over component toggles -----------------------------------------------------


ABLATION_ROWS: Dict[str, Dict[str, bool]] = {
    "base": dict(use_srm_il=False, use_srm_fl=False, use_l_ccr=False, use_l_pdr=False),
    "srm_il": dict(use_srm_il=True, use_srm_fl=False, use_l_ccr=False, use_l_pdr=False),
    "srm_fl": dict(use_srm_il=False, use_srm_fl=True, use_l_ccr=False, use_l_pdr=False),
    "srm_il_fl": dict(use_srm_il=True, use_srm_fl=True, use_l_ccr=False, use_l_pdr=False),
    "srm_il_cons": dict(use_srm_il=True, use_srm_fl=False, use_l_ccr=True, use_l_pdr=True),
    "full": dict(use_srm_il=True, use_srm_fl=True, use_l_ccr=True, use_l_pdr=True),
}


def run_single_experiment(train_manifest_path: Union[str, Path],
                          eval_manifest_path: Union[str, Path],
                          cfg_dict: Dict, train_domains: Sequence[int],
                          eval_domains: Sequence[int]) -> Dict:
    """One train+eval job; module-level so process pools can pickle it."""
    cfg = TrainConfig.from_dict(cfg_dict)
    train_man = load_manifest(train_manifest_path).filter_domains(train_domains)
    eval_man = load_manifest(eval_manifest_path).filter_domains(eval_domains)
    result = train(train_man, cfg)
    pp = resolve_preprocess(cfg.preprocess, train_man)
    report = evaluate(result.state, eval_man, pp, use_ema=True, seed=cfg.seed,
                      cfg_for_hash=cfg.to_dict())
    return {
        "seed": cfg.seed,
        "mean_auc": report.mean_auc,
        "per_domain": {d: info["macro_auc"] for d, info in report.per_domain.items()},
        "final_l_cls": result.logs[-1]["l_cls"] if result.logs else None,
    }


def ablate(train_manifest_path: Union[str, Path], eval_manifest_path: Union[str, Path],
           base_cfg: TrainConfig, seeds: Sequence[int],
           rows: Optional[Dict[str, Dict[str, bool]]] = None,
           train_domains: Sequence[int] = (0, 1), eval_domains: Sequence[int] = (2,),
           workers: int = 1) -> Dict:
    """Train every toggle row over every seed and t-test each row against base.

    Rows and seeds are independent runs with isolated RNG streams, so they
    parallelize across processes.
    """
    rows = rows if rows is not None else ABLATION_ROWS
    jobs = []
    for row_name, toggles in rows.items():
        for seed in seeds:
            cfg = dataclasses.replace(base_cfg, seed=seed, **toggles)
            jobs.append((row_name, seed,
                         (str(train_manifest_path), str(eval_manifest_path),
                          cfg.to_dict(), tuple(train_domains), tuple(eval_domains))))

    results: Dict[str, Dict[int, Dict]] = {name: {} for name in rows}
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(run_single_experiment, *args): (name, seed)
                       for name, seed, args in jobs}
            for fut, (name, seed) in futures.items():
                results[name][seed] = fut.result()
    else:
        for name, seed, args in jobs:
            results[name][seed] = run_single_experiment(*args)

    seeds = list(seeds)
    table: Dict[str, Dict] = {}
    base_aucs = np.array([results["base"][s]["mean_auc"] for s in seeds]) \
        if "base" in rows else None
    for name in rows:
        aucs = np.array([results[name][s]["mean_auc"] for s in seeds])
        entry = {
            "auc_by_seed": {int(s): float(a) for s, a in zip(seeds, aucs)},
            "mean_auc": float(aucs.mean()),
            "std_auc": float(aucs.std(ddof=1)) if len(seeds) > 1 else 0.0,
        }
        if base_aucs is not None and name != "base" and len(seeds) > 1:
            res = paired_t_test(aucs, base_aucs)
            entry["t_vs_base"] = res.t
            entry["p_vs_base"] = res.p_value
            entry["degenerate_t"] = res.degenerate
        table[name] = entry
    return {"rows": table, "seeds": seeds,
            "train_domains": list(train_domains), "eval_domains": list(eval_domains)}
