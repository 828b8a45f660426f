"""Three-stage training.

1. Complete-shape auto-encoder (``ae1``) on complete -> complete, Chamfer loss.
2. Partial encoder (``ae2.encoder``) pulled onto the frozen ``ae1`` codewords.
3. Partial encoder and refiner end to end with the scheduled total loss.

Batches are drawn from ``default_rng([seed, stage, step])`` so any step can be
replayed without carrying RNG state, which makes resumed runs bit-identical
to uninterrupted ones.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from . import losses
from .data import SamplePair, unique_completes
from .errors import StateError
from .losses import LossWeights
from .model import CompletionModel, ModelConfig, decode_coarse, encode, init_params, refine, synthesize

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "feat", "cd_coarse", "cd_fine", "alpha", "beta", "gamma")
DEFAULT_STEPS = {1: 2000, 2: 2000, 3: 5000}


@dataclass
class TrainConfig:
    stage: int = 1
    max_steps: Optional[int] = None  # None: DEFAULT_STEPS for the stage
    batch_size: int = 8
    seed: int = 0
    optimizer: str = "adam"
    lr: float = 1e-4
    checkpoint_every: int = 0  # 0: final checkpoint only
    recon_metric: str = "cdp"
    alpha_start: float = 1.0
    alpha_end: float = 0.1
    alpha_decay_frac: float = 0.5
    beta: float = 1.0
    gamma_start: float = 0.5
    gamma_end: float = 1.0
    init_ae2_from_ae1: bool = False
    freeze_ae1_decoder: bool = True
    from_scratch: bool = False
    eval_every: int = 0  # stage 2: validation codeword distance cadence

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ValueError(f"stage must be 1, 2 or 3, got {self.stage}")
        if self.max_steps is None:
            self.max_steps = DEFAULT_STEPS[self.stage]
        if self.max_steps < 1 or self.batch_size < 1:
            raise ValueError("max_steps and batch_size must be >= 1")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")
        if self.recon_metric not in losses.CHAMFER:
            raise ValueError(f"recon_metric must be one of {sorted(losses.CHAMFER)}")
        self.weights()

    def weights(self) -> LossWeights:
        return LossWeights(self.max_steps, self.alpha_start, self.alpha_end, self.alpha_decay_frac,
                           self.beta, self.gamma_start, self.gamma_end)

    @classmethod
    def from_dict(cls, d: dict):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainResult:
    model: CompletionModel
    history: list = field(default_factory=list)
    checkpoint: Optional[Path] = None
    val_curve: list = field(default_factory=list)


def batch_indices(n: int, batch_size: int, seed: int, stage: int, step: int) -> np.ndarray:
    rng = np.random.default_rng([seed, stage, step])
    return rng.choice(n, size=batch_size, replace=n < batch_size)


def stack_points(clouds: Sequence[np.ndarray], dtype) -> np.ndarray:
    """Stack clouds into (B, N, 3), padding short ones by cycling their points.

    Repeating points leaves max-pooled codewords and FPS selections unchanged.
    """
    n = max(len(c) for c in clouds)
    out = np.empty((len(clouds), n, 3), dtype=dtype)
    for i, c in enumerate(clouds):
        out[i] = c[np.arange(n) % len(c)]
    return out


def _pairs(dataset, split="train") -> list[SamplePair]:
    pairs = dataset[split] if isinstance(dataset, dict) else list(dataset)
    if not pairs:
        raise StateError(f"no training data in split {split!r}")
    return pairs


def _load_model(source) -> tuple[CompletionModel, dict]:
    if isinstance(source, CompletionModel):
        return source, {"stage": getattr(source, "stage", None)}
    params, _, meta = ad.load_checkpoint(source)
    model = CompletionModel(ModelConfig.from_dict(meta["model"]), params)
    model.stage = meta.get("stage")
    return model, meta


def _write_log(path: Path, history: list):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=LOG_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: ("" if row.get(k) is None else repr(row[k])) for k in LOG_FIELDS})


def _read_log(path: Path, before: int) -> list:
    if not path.exists():
        return []
    with open(path, newline="") as f:
        rows = [{k: (None if v == "" else float(v)) for k, v in r.items()} for r in csv.DictReader(f)]
    for r in rows:
        r["step"] = int(r["step"])
    return [r for r in rows if r["step"] < before]


def _save(path, model: CompletionModel, opt, config: TrainConfig, step: int):
    ad.save_checkpoint(path, model.params, opt, {
        "stage": config.stage, "step": step, "model": model.config.to_dict(), "train": config.to_dict()})


def _run(config: TrainConfig, model: CompletionModel, loss_fn, n_items: int, out_dir, resume=None,
         on_step=None) -> TrainResult:
    params = model.params
    opt = ad.make_optimizer(config.optimizer, config.lr)
    start = 0
    history: list[dict] = []
    if resume is not None:
        r_params, r_optim, meta = ad.load_checkpoint(resume)
        if meta.get("stage") != config.stage:
            raise StateError(f"cannot resume stage {config.stage} from a stage {meta.get('stage')} checkpoint")
        params.load(r_params.snapshot())
        opt.load_state(r_optim, meta["optimizer"]["step_count"])
        start = int(meta["step"])
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        if config.checkpoint_every:
            (out_dir / "checkpoints").mkdir(exist_ok=True)
    log_path = out_dir / f"stage{config.stage}_log.csv" if out_dir is not None else None
    if resume is not None and log_path is not None:
        history = _read_log(log_path, start)
    result = TrainResult(model)
    if on_step is not None:
        on_step(start, result)
    for step in range(start, config.max_steps):
        idx = batch_indices(n_items, config.batch_size, config.seed, config.stage, step)
        loss, row = loss_fn(idx, step)
        loss.backward()
        opt.step(params)
        row["step"] = step
        history.append(row)
        done = step + 1
        if out_dir is not None and config.checkpoint_every and done % config.checkpoint_every == 0:
            _save(out_dir / "checkpoints" / f"ckpt_{done:06d}.ckpt", model, opt, config, done)
            _write_log(log_path, history)
        if on_step is not None:
            on_step(done, result)
        if step % 100 == 0:
            log.debug("stage %d step %d loss %.6g", config.stage, step, float(loss.data))
    result.history = history
    if out_dir is not None:
        result.checkpoint = out_dir / f"stage{config.stage}.ckpt"
        _save(result.checkpoint, model, opt, config, config.max_steps)
        _write_log(log_path, history)
    return result


def train_stage1(config: TrainConfig, dataset, model_config: Optional[ModelConfig] = None,
                 out_dir=None, resume=None) -> TrainResult:
    """Fit ``ae1`` to reconstruct complete shapes."""
    if config.stage != 1:
        raise ValueError("train_stage1 needs a stage-1 config")
    model_config = model_config or ModelConfig()
    completes = [p.complete for p in unique_completes(_pairs(dataset))]
    model = CompletionModel(model_config, init_params(model_config, config.seed))
    params = model.params
    params.freeze()
    params.unfreeze("ae1.")
    metric = losses.CHAMFER[config.recon_metric]
    dtype = model_config.dtype

    def loss_fn(idx, step):
        gt = stack_points([completes[i] for i in idx], dtype)
        code = encode(gt, params, model_config, "ae1")
        loss = metric(decode_coarse(code, params, model_config), gt)
        return loss, {"cd_coarse": float(loss.data)}

    result = _run(config, model, loss_fn, len(completes), out_dir, resume)
    model.stage = 1
    return result


def mean_feat_match(model: CompletionModel, pairs: Sequence[SamplePair], batch_size: int = 16) -> float:
    """Mean per-sample codeword distance between ae2(partial) and ae1(complete)."""
    total = 0.0
    cfg = model.config
    with ad.no_grad():
        for s in range(0, len(pairs), batch_size):
            chunk = pairs[s:s + batch_size]
            part = stack_points([p.partial for p in chunk], cfg.dtype)
            comp = stack_points([p.complete for p in chunk], cfg.dtype)
            c2 = encode(part, model.params, cfg, "ae2").data.astype(np.float64)
            c1 = encode(comp, model.params, cfg, "ae1").data.astype(np.float64)
            total += float(np.linalg.norm(c2 - c1, axis=1).sum())
    return total / len(pairs)


def _require_stage(meta: dict, needed: int, what: str):
    got = meta.get("stage")
    if got is None or got < needed:
        raise StateError(f"{what} requires a stage-{needed} checkpoint, got stage {got}")


def train_stage2(config: TrainConfig, dataset, ae1_ckpt, out_dir=None, resume=None) -> TrainResult:
    """Train ``ae2.encoder`` so partial codewords match frozen ``ae1`` codewords.

    ``ae1`` bytes are checksummed before and after; any change is fatal.
    """
    if config.stage != 2:
        raise ValueError("train_stage2 needs a stage-2 config")
    model, meta = _load_model(ae1_ckpt)
    _require_stage(meta, 1, "stage 2")
    pairs = _pairs(dataset)
    params, cfg = model.params, model.config
    params.freeze()
    params.unfreeze("ae2.encoder.")
    if config.init_ae2_from_ae1 and resume is None:
        for n in params.names("ae1.encoder."):
            params["ae2" + n[3:]].data = params[n].data.copy()
    ae1_sum = params.checksum("ae1.")
    val_pairs = dataset.get("val", []) if isinstance(dataset, dict) else []

    def loss_fn(idx, step):
        part = stack_points([pairs[i].partial for i in idx], cfg.dtype)
        comp = stack_points([pairs[i].complete for i in idx], cfg.dtype)
        with ad.no_grad():
            c1 = encode(comp, params, cfg, "ae1")
        c2 = encode(part, params, cfg, "ae2")
        loss = losses.feat_match(c2, c1)
        return loss, {"feat": float(loss.data)}

    def on_step(step, result):
        if val_pairs and config.eval_every and (step % config.eval_every == 0 or step == config.max_steps):
            result.val_curve.append((step, mean_feat_match(model, val_pairs)))

    result = _run(config, model, loss_fn, len(pairs), out_dir, resume, on_step)
    if params.checksum("ae1.") != ae1_sum:
        raise StateError("ae1 parameters changed during stage 2")
    model.stage = 2
    return result


def train_stage3(config: TrainConfig, dataset, ckpt=None, model_config: Optional[ModelConfig] = None,
                 out_dir=None, resume=None) -> TrainResult:
    """End-to-end training of the partial encoder and the refiner.

    Loss per step: alpha * feat + beta * CD(coarse, gt) + gamma * CD(fine, gt)
    with weights taken from the schedule. ``ae1`` stays frozen; its decoder
    can be released with ``freeze_ae1_decoder=False``.
    """
    if config.stage != 3:
        raise ValueError("train_stage3 needs a stage-3 config")
    if ckpt is None:
        if not config.from_scratch:
            raise StateError("stage 3 requires a stage-2 checkpoint or from_scratch=True")
        cfg = model_config or ModelConfig()
        model = CompletionModel(cfg, init_params(cfg, config.seed))
    else:
        model, meta = _load_model(ckpt)
        if not config.from_scratch:
            _require_stage(meta, 2, "stage 3")
    pairs = _pairs(dataset)
    params, cfg = model.params, model.config
    params.freeze()
    params.unfreeze("ae2.encoder.")
    if cfg.refine:
        params.unfreeze("refiner.")
    if not config.freeze_ae1_decoder:
        params.unfreeze("ae1.decoder.")
    frozen_names = sorted(params.frozen)
    frozen_before = {n: params[n].data.tobytes() for n in frozen_names}
    weights = config.weights()
    metric = losses.CHAMFER[config.recon_metric]

    def loss_fn(idx, step):
        part = stack_points([pairs[i].partial for i in idx], cfg.dtype)
        gt = stack_points([pairs[i].complete for i in idx], cfg.dtype)
        m = cfg.iterations_for(gt.shape[1]) if cfg.refine else 0
        with ad.no_grad():
            c1 = encode(gt, params, cfg, "ae1")
        c2 = encode(part, params, cfg, "ae2")
        coarse = decode_coarse(c2, params, cfg)
        fine = refine(synthesize(part, coarse, cfg), c2, params, cfg, m) if cfg.refine else coarse
        feat = losses.feat_match(c2, c1)
        cd_c = metric(coarse, gt)
        cd_f = metric(fine, gt)
        alpha, beta, gamma = weights.at(step)
        loss = losses.overall_loss(feat, cd_c, cd_f, weights, step)
        return loss, {"feat": float(feat.data), "cd_coarse": float(cd_c.data), "cd_fine": float(cd_f.data),
                      "alpha": alpha, "beta": beta, "gamma": gamma}

    result = _run(config, model, loss_fn, len(pairs), out_dir, resume)
    for n in frozen_names:
        if params[n].data.tobytes() != frozen_before[n]:
            raise StateError(f"frozen parameter {n} changed during stage 3")
    model.stage = 3
    return result


def train_stage(config: TrainConfig, dataset, init: Union[None, str, Path, CompletionModel] = None,
                model_config: Optional[ModelConfig] = None, out_dir=None, resume=None) -> TrainResult:
    if config.stage == 1:
        return train_stage1(config, dataset, model_config, out_dir, resume)
    if config.stage == 2:
        if init is None:
            raise StateError("stage 2 requires a stage-1 checkpoint")
        return train_stage2(config, dataset, init, out_dir, resume)
    return train_stage3(config, dataset, init, model_config, out_dir, resume)
