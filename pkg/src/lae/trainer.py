"""Two-stage training orchestration.

Stage 1 learns the representation: per batch, noise + normalization, a
discriminator update, then an encoder+decoder update on the weighted
reconstruction + latent objective, with early stopping on validation
loss. Stage 2 drops the learning rate tenfold, fits the channel probe,
selects and annotates active candidates, and fine-tunes the encoder only
on the latent + attention objective while decoder and discriminator stay
frozen.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .active import (AnnotationTimeout, CandidateSet, annotation_targets,
                     fit_channel_probe, select_candidates, top_channels)
from .datagen import NoiseAugmenter, SplitArrays, normalize
from .losses import (LossWeights, attention_loss, discriminator_loss,
                     latent_loss, reconstruction_loss, stage1_objective,
                     stage2_objective)
from .model import LAEModel, ModelConfig, class_activations, minmax_normalize, upsample_bilinear


class TrainingDiverged(RuntimeError):
    def __init__(self, breakdown: dict):
        super().__init__(f"non-finite training loss; per-term breakdown: {breakdown}")
        self.breakdown = breakdown


@dataclass
class TrainConfig:
    # objective weights
    alpha1: float = 1.0
    alpha2: float = 1.0
    beta1: float = 1.0
    beta2: float = 1.0
    beta3: float = 0.01
    lambda1: float = 0.5
    lambda2: float = 1.0
    # optimization
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 64
    max_iter1: int = 40        # stage-1 epoch cap
    max_iter2: int | None = None  # stage-2 epochs; None derives from n_active
    patience: int = 10
    # active annotation
    n_active: int = 100
    top_k: int = 10
    reselect_per_epoch: bool = False
    # architecture
    d_z: int = 128
    image_size: int = 64
    enc_channels: tuple[int, ...] = (64, 128, 256, 512)
    disc_base: int = 64
    comparator: str = "desk"
    comparator_weights: str | None = None
    # preprocessing
    noise_sigma_max: float = 5.0
    mae_pixel: bool = False
    # reproducibility
    seed: int = 0
    selection_seed: int | None = None  # random-arm RNG, independent of model seed

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 2:
            raise ValueError("batch size must be at least 2")

    def weights(self) -> LossWeights:
        return LossWeights(self.alpha1, self.alpha2, self.beta1, self.beta2,
                           self.beta3, self.lambda1, self.lambda2)

    @staticmethod
    def desk(image_size: int = 64, **overrides) -> "TrainConfig":
        """Desk-scale experiment preset.

        The pixel/perceptual terms are per-image element sums, so their
        weights are scaled by the element count to keep the reconstruction
        and latent objectives at comparable magnitudes at any resolution.
        """
        per_element = 1.0 / (3 * image_size * image_size)
        values = dict(image_size=image_size,
                      beta1=per_element, beta2=per_element,
                      enc_channels=(12, 24, 48, 96), disc_base=16,
                      batch_size=32, max_iter1=30)
        values.update(overrides)
        return TrainConfig(**values)

    def model_config(self) -> ModelConfig:
        return ModelConfig(image_size=self.image_size,
                           channels=tuple(self.enc_channels),
                           d_z=self.d_z, disc_base=self.disc_base,
                           comparator=self.comparator,
                           comparator_weights=self.comparator_weights)


@dataclass
class TrainState:
    epoch: int = 0
    lr: float = 0.0
    best_val: float = math.inf
    best_epoch: int = -1
    epochs_since_improvement: int = 0
    stage: int = 1


@dataclass
class TrainResult:
    model: LAEModel
    config: TrainConfig
    state: TrainState
    history: list[dict] = field(default_factory=list)


# ---------------------------------------------------------------------------
# config files: plain key = value lines

def _parse_value(name: str, raw: str):
    raw = raw.strip()
    if raw.lower() in ("none", "null"):
        return None
    hints = TrainConfig.__dataclass_fields__
    if name not in hints:
        raise KeyError(f"unknown config key {name!r}")
    default = hints[name].default
    if name == "enc_channels":
        return tuple(int(v) for v in raw.replace("(", "").replace(")", "").split(","))
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int) and not isinstance(default, bool):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if name in ("max_iter2", "selection_seed"):
        return int(raw)
    return raw


def load_config(path: Path | str, **overrides) -> TrainConfig:
    """Read a plain-text ``key = value`` config file into a TrainConfig."""
    values: dict = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = line.split("=", 1)
        key = key.strip()
        values[key] = _parse_value(key, raw)
    values.update(overrides)
    return TrainConfig(**values)


# ---------------------------------------------------------------------------
# batching

def prepare_batch(images_u8: np.ndarray, augmenter: NoiseAugmenter | None = None,
                  rng: np.random.Generator | None = None) -> torch.Tensor:
    """uint8 HWC batch -> float NCHW tensor: optional noise, scale, normalize."""
    x = images_u8.astype(np.float32)
    if augmenter is not None:
        x = augmenter(x, rng)
        x = np.clip(x, 0.0, 255.0)
    x = normalize(x / 255.0)
    return torch.from_numpy(np.ascontiguousarray(x.transpose(0, 3, 1, 2)))


def _epoch_batches(rng: np.random.Generator, n: int, batch_size: int):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


class _JsonlLog:
    def __init__(self, path: Path | str | None):
        self._fh = open(path, "a") if path else None

    def write(self, record: dict) -> None:
        if self._fh:
            self._fh.write(json.dumps(record, sort_keys=True) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh:
            self._fh.close()


def _scalar(t) -> float:
    return float(t.detach()) if isinstance(t, torch.Tensor) else float(t)


def _check_finite(total: torch.Tensor, breakdown: dict) -> None:
    if torch.isfinite(total):
        return
    dump = {k: (_scalar(v) if isinstance(v, torch.Tensor) else v)
            for k, v in breakdown.items()}
    raise TrainingDiverged(dump)


# ---------------------------------------------------------------------------
# stage 1

@torch.no_grad()
def _validate_stage1(model: LAEModel, split: SplitArrays, config: TrainConfig
                     ) -> dict[str, float]:
    model.eval()
    weights = config.weights()
    n = len(split.ids)
    total = latent_sum = 0.0
    for start in range(0, n, config.batch_size):
        idx = np.arange(start, min(start + config.batch_size, n))
        x = prepare_batch(split.images[idx])
        labels = torch.from_numpy(split.labels[idx])
        enc = model.encode(x)
        x_hat = model.decode(enc.z)
        rec, _ = reconstruction_loss(x, x_hat, model.comparator,
                                     model.discriminator, weights,
                                     mae=config.mae_pixel)
        a_t, a_f = class_activations(enc.z)
        lat = latent_loss(a_t, a_f, labels)
        total += float(stage1_objective(rec, lat, weights))
        latent_sum += float(lat)
    return {"val_total": total / n, "val_latent": latent_sum / n}


def _rng_snapshot(rng: np.random.Generator) -> dict:
    return {"numpy": json.loads(json.dumps(rng.bit_generator.state)),
            "torch": torch.get_rng_state()}


def _rng_restore(state: dict) -> np.random.Generator:
    torch.set_rng_state(state["torch"].to(torch.uint8))
    rng = np.random.default_rng()
    rng.bit_generator.state = state["numpy"]
    return rng


def save_result(result: TrainResult, path: Path | str,
                optimizers: dict | None = None,
                rng: np.random.Generator | None = None) -> Path:
    return ckpt.save_checkpoint(
        path,
        model_state=result.model.state_dict(),
        config=asdict(result.config),
        trainer_state=asdict(result.state),
        optimizer_state=optimizers,
        rng_state=_rng_snapshot(rng) if rng is not None else None,
    )


def load_result(path: Path | str) -> TrainResult:
    """Rebuild a model (and trainer state) from a checkpoint file."""
    payload = ckpt.load_checkpoint(path)
    cfg_dict = dict(payload["config"])
    cfg_dict["enc_channels"] = tuple(cfg_dict["enc_channels"])
    config = TrainConfig(**cfg_dict)
    model = LAEModel(config.model_config())
    model.load_state_dict(payload["model_state"])
    state = TrainState(**payload["trainer_state"]) if payload["trainer_state"] \
        else TrainState()
    result = TrainResult(model=model, config=config, state=state)
    result._optimizer_state = payload["optimizer_state"]  # type: ignore[attr-defined]
    result._rng_state = payload["rng_state"]              # type: ignore[attr-defined]
    return result


def _make_optimizers(model: LAEModel, config: TrainConfig):
    betas = (config.adam_beta1, config.adam_beta2)
    ae = torch.optim.Adam(
        list(model.encoder.parameters()) + list(model.decoder.parameters()),
        lr=config.lr, betas=betas, eps=config.adam_eps)
    disc = torch.optim.Adam(model.discriminator.parameters(), lr=config.lr,
                            betas=betas, eps=config.adam_eps)
    return ae, disc


def train_stage1(config: TrainConfig, data_train: SplitArrays,
                 data_val: SplitArrays, *, log_path: Path | str | None = None,
                 resume_from: Path | str | None = None,
                 last_ckpt_path: Path | str | None = None) -> TrainResult:
    """Representation learning with concurrent discriminator updates.

    Returns the best-validation model. If ``last_ckpt_path`` is given, the
    full trainer state (parameters, optimizer moments, RNG) is written
    after every epoch so an interrupted run can resume bit-exactly.
    """
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    model = LAEModel(config.model_config())
    ae_opt, d_opt = _make_optimizers(model, config)
    state = TrainState(lr=config.lr, stage=1)
    best_state_dict = copy.deepcopy(model.state_dict())

    if resume_from is not None:
        prev = load_result(resume_from)
        if prev.config.d_z != config.d_z:
            raise ValueError(f"checkpoint d_z={prev.config.d_z} does not match "
                             f"config d_z={config.d_z}")
        model.load_state_dict(prev.model.state_dict())
        state = prev.state
        opt_state = prev._optimizer_state  # type: ignore[attr-defined]
        if opt_state:
            ae_opt.load_state_dict(opt_state["ae"])
            d_opt.load_state_dict(opt_state["disc"])
        if prev._rng_state:  # type: ignore[attr-defined]
            rng = _rng_restore(prev._rng_state)  # type: ignore[attr-defined]
        best_state_dict = copy.deepcopy(model.state_dict())

    weights = config.weights()
    augmenter = NoiseAugmenter(config.noise_sigma_max)
    log = _JsonlLog(log_path)
    history: list[dict] = []
    n = len(data_train.ids)
    step = state.epoch * math.ceil(n / config.batch_size)

    try:
        for epoch in range(state.epoch, config.max_iter1):
            model.train()
            augmenter.train()
            for idx in _epoch_batches(rng, n, config.batch_size):
                x = prepare_batch(data_train.images[idx], augmenter, rng)
                labels = torch.from_numpy(data_train.labels[idx])

                enc = model.encode(x)
                x_hat = model.decode(enc.z)

                # the fake branch is detached inside, so this frees only the
                # discriminator's own forward graph
                d_loss = discriminator_loss(x, x_hat, model.discriminator)
                d_opt.zero_grad()
                d_loss.backward()
                d_opt.step()

                rec, parts = reconstruction_loss(x, x_hat, model.comparator,
                                                 model.discriminator, weights,
                                                 mae=config.mae_pixel)
                a_t, a_f = class_activations(enc.z)
                lat = latent_loss(a_t, a_f, labels)
                total = stage1_objective(rec, lat, weights)
                _check_finite(total, {**parts, "latent": lat, "disc": d_loss})
                ae_opt.zero_grad()
                total.backward()
                ae_opt.step()

                record = {"stage": 1, "epoch": epoch, "step": step,
                          "pixel": _scalar(parts["pixel"]),
                          "perceptual": _scalar(parts["perceptual"]),
                          "adversarial": _scalar(parts["adversarial"]),
                          "latent": _scalar(lat),
                          "latent_mean": _scalar(lat) / len(idx),
                          "disc": _scalar(d_loss), "total": _scalar(total)}
                history.append(record)
                log.write(record)
                step += 1

            val = _validate_stage1(model, data_val, config)
            state.epoch = epoch + 1
            if val["val_total"] < state.best_val:
                state.best_val = val["val_total"]
                state.best_epoch = epoch
                state.epochs_since_improvement = 0
                best_state_dict = copy.deepcopy(model.state_dict())
            else:
                state.epochs_since_improvement += 1
            record = {"stage": 1, "epoch": epoch, **val,
                      "best_val": state.best_val, "best_epoch": state.best_epoch}
            history.append(record)
            log.write(record)

            if last_ckpt_path is not None:
                live = TrainResult(model=model, config=config, state=state)
                save_result(live, last_ckpt_path,
                            optimizers={"ae": ae_opt.state_dict(),
                                        "disc": d_opt.state_dict()},
                            rng=rng)
            if state.epochs_since_improvement >= config.patience:
                break
    finally:
        log.close()

    model.load_state_dict(best_state_dict)
    return TrainResult(model=model, config=config, state=state, history=history)


# ---------------------------------------------------------------------------
# stage 2

def lr_schedule(t: int, eta0: float) -> float:
    """Fine-tuning schedule: one-tenth decay every 3 epochs."""
    if t < 0:
        raise ValueError("epoch index must be nonnegative")
    return eta0 * 10.0 ** (-(t // 3))


def stage2_epochs(n_active: int) -> int:
    """Fine-tune epochs: 4 at 100 candidates, 7 at 500, interpolated
    linearly and rounded up elsewhere."""
    return max(1, math.ceil(4.0 + 3.0 * (n_active - 100) / 400.0))


@torch.no_grad()
def collect_gap_vectors(model: LAEModel, split: SplitArrays,
                        batch_size: int = 64) -> np.ndarray:
    model.eval()
    out = []
    n = len(split.ids)
    for start in range(0, n, batch_size):
        x = prepare_batch(split.images[start:start + batch_size])
        out.append(model.encode(x).gap_vector.numpy())
    return np.concatenate(out, axis=0)


@torch.no_grad()
def _validate_latent(model: LAEModel, split: SplitArrays, batch_size: int) -> float:
    model.eval()
    n = len(split.ids)
    total = 0.0
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(start + batch_size, n))
        x = prepare_batch(split.images[idx])
        a_t, a_f = class_activations(model.encode(x).z)
        total += float(latent_loss(a_t, a_f, torch.from_numpy(split.labels[idx])))
    return total / n


def _module_checksum(module: torch.nn.Module) -> str:
    import hashlib
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


@dataclass
class Stage2Result:
    model: LAEModel
    config: TrainConfig
    state: TrainState
    history: list[dict]
    candidates: CandidateSet
    probe_accuracy: float
    annotated_ids: list[str]


def _select_for_annotation(model: LAEModel, data_train: SplitArrays,
                           config: TrainConfig) -> tuple[CandidateSet, float]:
    gaps = collect_gap_vectors(model, data_train, config.batch_size)
    probe = fit_channel_probe(gaps, data_train.labels, seed=config.seed)
    chans = top_channels(probe, min(config.top_k, gaps.shape[1]))
    fake_rows = np.flatnonzero(data_train.labels == 0)
    fake_ids = [data_train.ids[i] for i in fake_rows]
    n_active = min(config.n_active, len(fake_ids))
    cands = select_candidates(fake_ids, gaps[fake_rows], chans, n_active)
    return cands, probe.train_accuracy


def train_stage2(stage1: TrainResult, data_train: SplitArrays,
                 data_val: SplitArrays, mask_provider, *,
                 config: TrainConfig | None = None,
                 candidate_override: list[str] | None = None,
                 log_path: Path | str | None = None) -> Stage2Result:
    """Active annotation + encoder-only fine-tuning on latent + attention.

    ``candidate_override`` replaces active selection with a fixed id list
    (used by the random-selection comparison arm). Decoder, discriminator
    and comparator parameters are frozen and verified unchanged.
    """
    config = config or stage1.config
    if config.d_z != stage1.config.d_z:
        raise ValueError(f"stage-2 config d_z={config.d_z} does not match "
                         f"checkpoint d_z={stage1.config.d_z}")
    torch.manual_seed(config.seed + 1)
    rng = np.random.default_rng([config.seed, 2])
    model = copy.deepcopy(stage1.model)
    eta0 = config.lr / 10.0

    if candidate_override is not None:
        cands = CandidateSet(entries=[(cid, 0.0) for cid in candidate_override],
                             n_active=len(candidate_override))
        probe_acc = float("nan")
    else:
        cands, probe_acc = _select_for_annotation(model, data_train, config)
    masks, pending = annotation_targets(cands, mask_provider)
    if len(masks) < 0.5 * cands.n_active:
        raise AnnotationTimeout(pending)

    frozen_checks = {"decoder": _module_checksum(model.decoder),
                     "discriminator": _module_checksum(model.discriminator),
                     "comparator": _module_checksum(model.comparator)}
    for part in (model.decoder, model.discriminator):
        for p in part.parameters():
            p.requires_grad_(False)

    opt = torch.optim.Adam(model.encoder.parameters(), lr=eta0,
                           betas=(config.adam_beta1, config.adam_beta2),
                           eps=config.adam_eps)
    weights = config.weights()
    augmenter = NoiseAugmenter(config.noise_sigma_max)
    log = _JsonlLog(log_path)
    history: list[dict] = []
    state = TrainState(lr=eta0, stage=2)

    id_to_row = {cid: i for i, cid in enumerate(data_train.ids)}
    annotated_ids = [cid for cid in cands.ids() if cid in masks]
    n = len(data_train.ids)
    epochs = config.max_iter2 if config.max_iter2 is not None \
        else stage2_epochs(cands.n_active)
    step = 0

    try:
        for t in range(epochs):
            if config.reselect_per_epoch and candidate_override is None and t > 0:
                cands, probe_acc = _select_for_annotation(model, data_train, config)
                masks, _ = annotation_targets(cands, mask_provider)
                annotated_ids = [cid for cid in cands.ids() if cid in masks]
            lr = lr_schedule(t, eta0)
            state.lr = lr
            for group in opt.param_groups:
                group["lr"] = lr

            model.train()
            augmenter.train()
            ann_rows = np.array([id_to_row[cid] for cid in annotated_ids], dtype=int)
            for idx in _epoch_batches(rng, n, config.batch_size):
                # every step sees the full annotated set alongside the batch
                extra = ann_rows[~np.isin(ann_rows, idx)]
                union = np.concatenate([idx, extra])
                x = prepare_batch(data_train.images[union], augmenter, rng)
                labels = torch.from_numpy(data_train.labels[union])
                enc = model.encode(x)
                a_t, a_f = class_activations(enc.z)
                lat = latent_loss(a_t, a_f, labels)

                if len(annotated_ids) > 0:
                    pos = {row: i for i, row in enumerate(union)}
                    ann_pos = [pos[row] for row in ann_rows]
                    raw = model.attention_raw(enc)[ann_pos]
                    maps = minmax_normalize(upsample_bilinear(raw, x.shape[-1]))
                    target = torch.from_numpy(
                        np.stack([masks[cid] for cid in annotated_ids]))
                    att = attention_loss(maps, target)
                else:
                    att = lat.new_zeros(())

                total = stage2_objective(lat, att, weights)
                _check_finite(total, {"latent": lat, "attention": att})
                opt.zero_grad()
                total.backward()
                opt.step()

                record = {"stage": 2, "epoch": t, "step": step, "lr": lr,
                          "latent": _scalar(lat),
                          "latent_mean": _scalar(lat) / len(union),
                          "attention": _scalar(att), "total": _scalar(total)}
                history.append(record)
                log.write(record)
                step += 1

            val_latent = _validate_latent(model, data_val, config.batch_size)
            state.epoch = t + 1
            if val_latent < state.best_val:
                state.best_val = val_latent
                state.best_epoch = t
            record = {"stage": 2, "epoch": t, "val_latent": val_latent}
            history.append(record)
            log.write(record)
    finally:
        log.close()

    for part in (model.decoder, model.discriminator):
        for p in part.parameters():
            p.requires_grad_(True)
    after = {"decoder": _module_checksum(model.decoder),
             "discriminator": _module_checksum(model.discriminator),
             "comparator": _module_checksum(model.comparator)}
    if after != frozen_checks:
        raise RuntimeError("frozen component changed during fine-tuning")

    return Stage2Result(model=model, config=config, state=state,
                        history=history, candidates=cands,
                        probe_accuracy=probe_acc, annotated_ids=annotated_ids)
