"""Evaluation and desk-scale experiments: seen/unseen accuracy, attention
IoU, ablation table, active-vs-random selection comparison, heatmap
overlays, and hyperparameter sweeps.

Comparative experiments report the median over several seeds; single-run
deltas at this scale are noise-dominated.
"""

from __future__ import annotations

import contextlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .active import OracleMaskProvider
from .checkpoint import config_fingerprint
from .datagen import SplitArrays, denormalize
from .trainer import (TrainConfig, TrainResult, prepare_batch, train_stage1,
                      train_stage2)


@contextlib.contextmanager
def _frozen_eval(model):
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            yield
    finally:
        model.train(was_training)


def accuracy_from_predictions(preds: np.ndarray, labels: np.ndarray) -> float:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape or preds.size == 0:
        raise ValueError("predictions and labels must be same-length, nonempty")
    return float(np.mean(preds == labels))


def predictions(model, split: SplitArrays, batch_size: int = 64) -> np.ndarray:
    out = []
    with _frozen_eval(model):
        for start in range(0, len(split.ids), batch_size):
            x = prepare_batch(split.images[start:start + batch_size])
            out.append(model.predict(x).numpy())
    return np.concatenate(out)


def evaluate_accuracy(model, split: SplitArrays, batch_size: int = 64) -> float:
    """Fraction of images whose predicted label matches the ground truth."""
    return accuracy_from_predictions(predictions(model, split, batch_size),
                                     split.labels)


def per_class_accuracy(model, split: SplitArrays,
                       batch_size: int = 64) -> dict[str, float]:
    preds = predictions(model, split, batch_size)
    out = {}
    for name, value in (("fake", 0), ("true", 1)):
        rows = split.labels == value
        if rows.any():
            out[name] = float(np.mean(preds[rows] == value))
    return out


def binary_iou(a: np.ndarray, g: np.ndarray) -> float:
    """IoU of two binary masks; both empty counts as a perfect match."""
    a = a.astype(bool)
    g = g.astype(bool)
    union = np.logical_or(a, g).sum()
    if union == 0:
        return 1.0 if a.sum() == 0 and g.sum() == 0 else 0.0
    return float(np.logical_and(a, g).sum() / union)


def attention_iou(model, split: SplitArrays, threshold: float = 0.5,
                  batch_size: int = 64) -> tuple[float, dict[str, float]]:
    """Mean IoU between thresholded attention maps and ground-truth masks
    over the split's masked fakes."""
    rows = [i for i, cid in enumerate(split.ids) if cid in split.masks]
    if not rows:
        raise ValueError("split has no masked fakes")
    per_image: dict[str, float] = {}
    with _frozen_eval(model):
        for start in range(0, len(rows), batch_size):
            chunk = rows[start:start + batch_size]
            x = prepare_batch(split.images[chunk])
            maps = model.attention_map(x).values.numpy()
            for j, i in enumerate(chunk):
                cid = split.ids[i]
                per_image[cid] = binary_iou(maps[j] >= threshold, split.masks[cid])
    return float(np.mean(list(per_image.values()))), per_image


@dataclass
class EvalReport:
    split_accuracy: dict[str, float]
    per_class: dict[str, dict[str, float]]
    mean_attention_iou: float | None
    config_fingerprint: str
    seed: int

    def summary(self) -> str:
        lines = ["split      accuracy  fake-acc  true-acc"]
        for name, acc in self.split_accuracy.items():
            pc = self.per_class.get(name, {})
            lines.append(f"{name:<10} {acc:8.4f}  {pc.get('fake', float('nan')):8.4f}"
                         f"  {pc.get('true', float('nan')):8.4f}")
        if self.mean_attention_iou is not None:
            lines.append(f"mean attention IoU (masked fakes): "
                         f"{self.mean_attention_iou:.4f}")
        lines.append(f"config {self.config_fingerprint} seed {self.seed}")
        return "\n".join(lines)


def evaluate_report(model, splits: dict[str, SplitArrays], config: TrainConfig,
                    iou_split: str | None = None) -> EvalReport:
    acc = {name: evaluate_accuracy(model, split) for name, split in splits.items()}
    pc = {name: per_class_accuracy(model, split) for name, split in splits.items()}
    iou = None
    if iou_split and iou_split in splits and splits[iou_split].masks:
        iou, _ = attention_iou(model, splits[iou_split])
    return EvalReport(split_accuracy=acc, per_class=pc, mean_attention_iou=iou,
                      config_fingerprint=config_fingerprint(config),
                      seed=config.seed)


# ---------------------------------------------------------------------------
# heatmap export

def _heat_rgb(v: np.ndarray) -> np.ndarray:
    # blue -> cyan -> yellow -> red ramp
    r = np.clip(2.0 * v - 0.5, 0, 1)
    g = np.clip(1.5 - np.abs(2.0 * v - 1.0) * 1.5, 0, 1)
    b = np.clip(1.5 - 2.0 * v, 0, 1)
    return np.stack([r, g, b], axis=-1)


def export_heatmaps(model, split: SplitArrays, out_dir: Path | str,
                    limit: int | None = None) -> list[Path]:
    """Write one ``input | attention overlay | mask`` panel PNG per image."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create heatmap directory {out_dir}: {e}") from e
    rows = range(len(split.ids) if limit is None else min(limit, len(split.ids)))
    paths = []
    with _frozen_eval(model):
        for i in rows:
            x = prepare_batch(split.images[i:i + 1])
            amap = model.attention_map(x).values[0].numpy()
            img = split.images[i].astype(np.float32) / 255.0
            overlay = 0.55 * img + 0.45 * _heat_rgb(amap)
            mask = split.masks.get(split.ids[i])
            if mask is None:
                mask_rgb = np.full_like(img, 0.5)
            else:
                mask_rgb = np.repeat(mask[:, :, None], 3, axis=2)
            panel = np.concatenate([img, overlay, mask_rgb], axis=1)
            panel_u8 = np.clip(np.rint(panel * 255), 0, 255).astype(np.uint8)
            path = out_dir / f"{split.ids[i]}_heatmap.png"
            Image.fromarray(panel_u8).save(path)
            paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# experiment harnesses

@dataclass
class DataBundle:
    train: SplitArrays
    val: SplitArrays
    test: SplitArrays
    unseen: SplitArrays


def load_bundle(manifest) -> DataBundle:
    from .datagen import load_split_arrays
    return DataBundle(*(load_split_arrays(manifest, s)
                        for s in ("train", "val", "test", "unseen")))


def _random_candidate_ids(split: SplitArrays, count: int,
                          config: TrainConfig) -> list[str]:
    # independent of the model seed so the arms differ only in selection rule
    sel_seed = config.selection_seed if config.selection_seed is not None \
        else config.seed + 7919
    rng = np.random.default_rng(sel_seed)
    fake_ids = [cid for cid, lab in zip(split.ids, split.labels) if lab == 0]
    pick = rng.choice(len(fake_ids), size=count, replace=False)
    return [fake_ids[i] for i in sorted(pick)]


ABLATIONS = ("AE_rec", "AE_latent", "AE_latent_pixel", "AE_latent_rec", "LAE")


def ablation_config(name: str, base: TrainConfig) -> TrainConfig:
    if name == "AE_rec":
        return replace(base, alpha2=0.0)
    if name == "AE_latent":
        return replace(base, alpha1=0.0)
    if name == "AE_latent_pixel":
        return replace(base, beta2=0.0, beta3=0.0)
    if name in ("AE_latent_rec", "LAE"):
        return base
    raise ValueError(f"unknown ablation {name!r}")


def _train_variant(name: str, bundle: DataBundle, cfg: TrainConfig
                   ) -> tuple[TrainResult, object]:
    cfg_v = ablation_config(name, cfg)
    stage1 = train_stage1(cfg_v, bundle.train, bundle.val)
    model = stage1.model
    if name == "LAE":
        provider = OracleMaskProvider(bundle.train.masks)
        stage2 = train_stage2(stage1, bundle.train, bundle.val, provider,
                              config=cfg_v)
        model = stage2.model
    return stage1, model


def run_ablation_suite(bundle: DataBundle, seeds: list[int],
                       base_config: TrainConfig,
                       out_dir: Path | str | None = None) -> dict:
    """Median seen/unseen accuracy for each loss-weight ablation."""
    cells: dict[str, dict[str, list[float]]] = {
        name: {"seen": [], "unseen": []} for name in ABLATIONS}
    for seed in seeds:
        cfg = replace(base_config, seed=seed)
        for name in ABLATIONS:
            _, model = _train_variant(name, bundle, cfg)
            cells[name]["seen"].append(evaluate_accuracy(model, bundle.test))
            cells[name]["unseen"].append(evaluate_accuracy(model, bundle.unseen))
    table = {name: {k: float(np.median(v)) for k, v in cols.items()}
             for name, cols in cells.items()}
    result = {"seeds": list(seeds), "per_seed": cells, "median": table}
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "ablation.jsonl", "w") as f:
            for name in ABLATIONS:
                f.write(json.dumps({"config": name, **table[name]},
                                   sort_keys=True) + "\n")
        lines = ["config            seen    unseen"]
        for name in ABLATIONS:
            lines.append(f"{name:<16} {table[name]['seen']:6.4f}  "
                         f"{table[name]['unseen']:6.4f}")
        (out_dir / "ablation.txt").write_text("\n".join(lines) + "\n")
    return result


def run_selection_comparison(bundle: DataBundle, counts: list[int],
                             seeds: list[int], base_config: TrainConfig,
                             out_dir: Path | str | None = None) -> dict:
    """Unseen accuracy under active vs uniform-random candidate selection."""
    n_fakes = int((bundle.train.labels == 0).sum())
    if any(c < 0 or c > n_fakes for c in counts):
        raise ValueError(f"counts must lie in [0, {n_fakes}]")
    provider = OracleMaskProvider(bundle.train.masks)
    rows: list[dict] = []
    for seed in seeds:
        cfg = replace(base_config, seed=seed)
        stage1 = train_stage1(cfg, bundle.train, bundle.val)
        base_unseen = evaluate_accuracy(stage1.model, bundle.unseen)
        for count in counts:
            if count == 0:
                rows.append({"seed": seed, "count": 0, "active": base_unseen,
                             "random": base_unseen})
                continue
            cfg_c = replace(cfg, n_active=count)
            active = train_stage2(stage1, bundle.train, bundle.val, provider,
                                  config=cfg_c)
            rand_ids = _random_candidate_ids(bundle.train, count, cfg_c)
            random_arm = train_stage2(stage1, bundle.train, bundle.val, provider,
                                      config=cfg_c, candidate_override=rand_ids)
            rows.append({
                "seed": seed, "count": count,
                "active": evaluate_accuracy(active.model, bundle.unseen),
                "random": evaluate_accuracy(random_arm.model, bundle.unseen),
                "active_ids": active.annotated_ids,
                "random_ids": random_arm.annotated_ids,
            })
    medians = []
    for count in counts:
        sub = [r for r in rows if r["count"] == count]
        medians.append({"count": count,
                        "active": float(np.median([r["active"] for r in sub])),
                        "random": float(np.median([r["random"] for r in sub]))})
    result = {"rows": rows, "medians": medians, "seeds": list(seeds)}
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "selection.jsonl", "w") as f:
            for r in rows:
                f.write(json.dumps({k: v for k, v in r.items()
                                    if not k.endswith("_ids")},
                                   sort_keys=True) + "\n")
            for m in medians:
                f.write(json.dumps({"median": m}, sort_keys=True) + "\n")
        lines = ["count   active  random"]
        for m in medians:
            lines.append(f"{m['count']:<6} {m['active']:6.4f}  {m['random']:6.4f}")
        (out_dir / "selection.txt").write_text("\n".join(lines) + "\n")
        _plot_selection(medians, out_dir / "selection.png")
    return result


def _plot_selection(medians: list[dict], path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    counts = [m["count"] for m in medians]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(counts, [m["active"] for m in medians], "o-", label="active")
    ax.plot(counts, [m["random"] for m in medians], "s--", label="random")
    ax.set_xlabel("annotated candidates")
    ax.set_ylabel("unseen accuracy (median)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


@dataclass
class TrendRecord:
    seed: int
    ae_latent_seen: float
    ae_latent_unseen: float
    lae_seen: float
    lae_unseen: float
    stage1_iou: float
    stage2_iou: float
    random_unseen: float


@dataclass
class TrendReport:
    records: list[TrendRecord] = field(default_factory=list)

    def median(self, name: str) -> float:
        return float(np.median([getattr(r, name) for r in self.records]))

    def summary(self) -> str:
        lines = ["seed  AEl-seen AEl-unsn LAE-seen LAE-unsn IoU-s1 IoU-s2 rnd-unsn"]
        for r in self.records:
            lines.append(f"{r.seed:<5} {r.ae_latent_seen:8.4f} "
                         f"{r.ae_latent_unseen:8.4f} {r.lae_seen:8.4f} "
                         f"{r.lae_unseen:8.4f} {r.stage1_iou:6.3f} "
                         f"{r.stage2_iou:6.3f} {r.random_unseen:8.4f}")
        lines.append(
            f"med   {self.median('ae_latent_seen'):8.4f} "
            f"{self.median('ae_latent_unseen'):8.4f} {self.median('lae_seen'):8.4f} "
            f"{self.median('lae_unseen'):8.4f} {self.median('stage1_iou'):6.3f} "
            f"{self.median('stage2_iou'):6.3f} {self.median('random_unseen'):8.4f}")
        return "\n".join(lines)


def run_trend_suite(bundle: DataBundle, seeds: list[int],
                    base_config: TrainConfig,
                    out_path: Path | str | None = None) -> TrendReport:
    """Per-seed LAE vs latent-only ablation, plus the random-selection arm
    and before/after attention IoU on unseen fakes. Shares each seed's
    stage-1 training between the LAE, IoU, and random-arm measurements."""
    provider = OracleMaskProvider(bundle.train.masks)
    report = TrendReport()
    for seed in seeds:
        cfg = replace(base_config, seed=seed)
        ael = train_stage1(ablation_config("AE_latent", cfg), bundle.train,
                           bundle.val)
        stage1 = train_stage1(cfg, bundle.train, bundle.val)
        iou1, _ = attention_iou(stage1.model, bundle.unseen)
        stage2 = train_stage2(stage1, bundle.train, bundle.val, provider,
                              config=cfg)
        rand_ids = _random_candidate_ids(bundle.train, stage2.candidates.n_active,
                                         cfg)
        rand2 = train_stage2(stage1, bundle.train, bundle.val, provider,
                             config=cfg, candidate_override=rand_ids)
        iou2, _ = attention_iou(stage2.model, bundle.unseen)
        report.records.append(TrendRecord(
            seed=seed,
            ae_latent_seen=evaluate_accuracy(ael.model, bundle.test),
            ae_latent_unseen=evaluate_accuracy(ael.model, bundle.unseen),
            lae_seen=evaluate_accuracy(stage2.model, bundle.test),
            lae_unseen=evaluate_accuracy(stage2.model, bundle.unseen),
            stage1_iou=iou1,
            stage2_iou=iou2,
            random_unseen=evaluate_accuracy(rand2.model, bundle.unseen),
        ))
        if out_path is not None:
            with open(out_path, "a") as f:
                f.write(json.dumps({"seed": seed,
                                    **vars(report.records[-1])}) + "\n")
    return report


# paper-style grids for the optional sweep command
BETA_GRID = [(1.0, 1.0, 0.01), (0.5, 1.0, 0.01), (0.1, 1.0, 0.01),
             (1.0, 0.5, 0.01), (1.0, 0.1, 0.01),
             (1.0, 1.0, 0.1), (1.0, 1.0, 0.05)]
LAMBDA_GRID = [(l1, l2) for l1 in (1.0, 0.5, 0.1) for l2 in (1.0, 0.5, 0.1)]


def run_sweep(bundle: DataBundle, param: str, seeds: list[int],
              base_config: TrainConfig,
              out_dir: Path | str | None = None) -> list[dict]:
    """Grid sweep over the reconstruction or fine-tuning weights."""
    rows = []
    provider = OracleMaskProvider(bundle.train.masks)
    if param == "beta":
        grid = [replace(base_config, beta1=b1, beta2=b2, beta3=b3)
                for b1, b2, b3 in BETA_GRID]
    elif param == "lambda":
        grid = [replace(base_config, lambda1=l1, lambda2=l2)
                for l1, l2 in LAMBDA_GRID]
    else:
        raise ValueError("param must be 'beta' or 'lambda'")
    for cfg_g in grid:
        seen, unseen = [], []
        for seed in seeds:
            cfg = replace(cfg_g, seed=seed)
            stage1 = train_stage1(cfg, bundle.train, bundle.val)
            model = stage1.model
            if param == "lambda":
                model = train_stage2(stage1, bundle.train, bundle.val, provider,
                                     config=cfg).model
            seen.append(evaluate_accuracy(model, bundle.test))
            unseen.append(evaluate_accuracy(model, bundle.unseen))
        rows.append({"beta1": cfg_g.beta1, "beta2": cfg_g.beta2,
                     "beta3": cfg_g.beta3, "lambda1": cfg_g.lambda1,
                     "lambda2": cfg_g.lambda2,
                     "seen": float(np.median(seen)),
                     "unseen": float(np.median(unseen))})
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / f"sweep_{param}.jsonl", "w") as f:
            for r in rows:
                f.write(json.dumps(r, sort_keys=True) + "\n")
    return rows
