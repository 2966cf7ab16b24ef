"""Training harness: alternating adversarial loop with EMA, checkpointing,
evaluation at checkpoints, and the ablation driver.

Determinism contract: model construction is seeded globally, and every
training-time draw (batch indices, noise, penalty directions) comes from one
torch.Generator whose state is stored in checkpoints, so a fixed seed gives a
bitwise-reproducible loss log and resuming continues the exact trajectory.
"""

import copy
import csv
import glob
import math
import os
from dataclasses import dataclass
from pathlib import Path

import torch

from .config import ExperimentConfig
from .data import synth_dataset
from .diagnostics import (cross_scale_attention_fraction, gaussian_stats,
                          toy_frechet_distance, trajectory_metrics)
from .discriminator import Discriminator
from .errors import ConfigError, ContractError, NumericFault
from .generator import Generator
from .losses import (adversarial_loss_d, adversarial_loss_g, consistency_loss,
                     generator_objective, gradient_penalty_approx)
from .pyramid import ScalePyramid, build_pyramids

_LOSS_COLUMNS = ("iteration", "L_adv(G)", "L_adv(D)", "L_cons", "R1", "R2", "L_G")
_CKPT_FORMAT = 1


def ema_update(ema_params, new_params, decay: float):
    """ema <- decay*ema + (1-decay)*new, elementwise and in place."""
    if not 0.0 <= decay <= 1.0:
        raise ConfigError(f"decay must lie in [0, 1], got {decay}")
    ema_params = list(ema_params)
    new_params = list(new_params)
    if len(ema_params) != len(new_params):
        raise ContractError(f"parameter count mismatch: {len(ema_params)} vs {len(new_params)}")
    with torch.no_grad():
        for e, p in zip(ema_params, new_params):
            if e.shape != p.shape:
                raise ContractError(f"parameter shape mismatch: {tuple(e.shape)} vs "
                                    f"{tuple(p.shape)}")
            e.mul_(decay).add_(p, alpha=1.0 - decay)
    return ema_params


def build_models(cfg: ExperimentConfig, keep_attention: bool = False):
    """Seeded construction of generator, discriminator, and the EMA copy."""
    cfg.validate()
    torch.manual_seed(cfg.train.seed)
    g = Generator(cfg.generator, cfg.data.num_classes)
    d = Discriminator(cfg.discriminator, cfg.data.num_classes,
                      mode=cfg.train.discriminator_mode, keep_attention=keep_attention)
    ema = copy.deepcopy(g)
    for p in ema.parameters():
        p.requires_grad_(False)
    return g, d, ema


def save_checkpoint(path, *, iteration, generator, discriminator, ema_generator,
                    opt_g, opt_d, rng, cfg: ExperimentConfig):
    payload = {
        "format_version": _CKPT_FORMAT,
        "iteration": iteration,
        "generator": generator.state_dict(),
        "discriminator": discriminator.state_dict(),
        "ema_generator": ema_generator.state_dict(),
        "opt_g": opt_g.state_dict(),
        "opt_d": opt_d.state_dict(),
        "rng_state": rng.get_state(),
        "config_text": cfg.to_text(),
        "config_hash": cfg.config_hash(),
        "mode": discriminator.mode,
    }
    path = os.fspath(path)
    tmp = path + ".tmp"
    torch.save(payload, tmp)
    os.replace(tmp, path)  # atomic on the same filesystem


def load_checkpoint(path) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != _CKPT_FORMAT:
        raise ConfigError(f"{path}: unknown checkpoint format "
                          f"{payload.get('format_version')!r}")
    return payload


def restore_models(payload, keep_attention: bool = False):
    """Rebuild (cfg, G, D, ema_G) from a checkpoint payload."""
    cfg = ExperimentConfig.from_text(payload["config_text"])
    if cfg.config_hash() != payload["config_hash"]:
        raise ConfigError("checkpoint config hash mismatch")
    g = Generator(cfg.generator, cfg.data.num_classes)
    d = Discriminator(cfg.discriminator, cfg.data.num_classes, mode=payload["mode"],
                      keep_attention=keep_attention)
    ema = copy.deepcopy(g)
    g.load_state_dict(payload["generator"])
    d.load_state_dict(payload["discriminator"])
    ema.load_state_dict(payload["ema_generator"])
    for p in ema.parameters():
        p.requires_grad_(False)
    return cfg, g, d, ema


def latest_checkpoint(out_dir) -> str | None:
    paths = sorted(glob.glob(os.path.join(os.fspath(out_dir), "ckpt-*.pt")))
    return paths[-1] if paths else None


@dataclass
class TrainResult:
    out_dir: str
    iterations: int
    csv_path: str
    last_checkpoint: str


def _ckpt_path(out_dir, iteration) -> str:
    return os.path.join(os.fspath(out_dir), f"ckpt-{iteration:07d}.pt")


def _truncate_csv(path, max_iteration: int):
    """Drop rows past the resumed iteration so re-run rows match bitwise."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        lines = fh.readlines()
    kept = lines[:1]
    for line in lines[1:]:
        it = int(line.split(",", 1)[0])
        if it <= max_iteration:
            kept.append(line)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.writelines(kept)


def _penalty_fn(disc, labels, expected_n):
    def d_fn(xs):
        n = xs[0].shape[0]
        assert n == expected_n, f"penalty sub-batch {n} != round(fraction*batch) {expected_n}"
        return disc(ScalePyramid(x=list(xs), source="penalty"), labels[:n]).d
    return d_fn


def train(cfg: ExperimentConfig, out_dir, dataset=None, resume: bool = False) -> TrainResult:
    """Alternating D/G updates; returns after cfg.train.iterations iterations.

    Each iteration runs exactly one discriminator and one generator optimizer
    step, maintains the generator EMA, appends one loss-CSV row, and
    checkpoints periodically. A non-finite loss aborts with the most recent
    checkpoint left on disk.
    """
    cfg.validate()
    tc = cfg.train
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "loss.csv"

    if dataset is None:
        dataset = synth_dataset(cfg.data)
    images = torch.from_numpy(dataset.images)
    labels = torch.from_numpy(dataset.labels)
    num_samples = images.shape[0]

    gen, disc, ema = build_models(cfg)
    opt_g = torch.optim.AdamW(gen.parameters(), lr=tc.learning_rate, betas=tuple(tc.betas),
                              weight_decay=tc.weight_decay)
    opt_d = torch.optim.AdamW(disc.parameters(), lr=tc.learning_rate, betas=tuple(tc.betas),
                              weight_decay=tc.weight_decay)
    rng = torch.Generator().manual_seed(tc.seed + 1)
    start_iter = 0

    if resume:
        ckpt = latest_checkpoint(out_dir)
        if ckpt is None:
            raise ConfigError(f"resume requested but no checkpoint found in {out_dir}")
        payload = load_checkpoint(ckpt)
        stored = ExperimentConfig.from_text(payload["config_text"])
        # the iteration budget may grow between runs; everything else must match
        aligned = stored.with_overrides({"train_iterations": str(tc.iterations)})
        if aligned.config_hash() != cfg.config_hash():
            raise ConfigError("resume config does not match the checkpointed config")
        gen.load_state_dict(payload["generator"])
        disc.load_state_dict(payload["discriminator"])
        ema.load_state_dict(payload["ema_generator"])
        opt_g.load_state_dict(payload["opt_g"])
        opt_d.load_state_dict(payload["opt_d"])
        rng.set_state(payload["rng_state"])
        start_iter = payload["iteration"]
        if not csv_path.exists():
            raise ConfigError(f"resume requested but {csv_path} is missing")
        _truncate_csv(csv_path, start_iter)
    else:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            csv.writer(fh, lineterminator="\n").writerow(_LOSS_COLUMNS)
        save_checkpoint(_ckpt_path(out_dir, 0), iteration=0, generator=gen,
                        discriminator=disc, ema_generator=ema, opt_g=opt_g, opt_d=opt_d,
                        rng=rng, cfg=cfg)

    pen = tc.penalties
    cons_cfg = tc.consistency
    batch = tc.batch_size
    n_pen = int(round(pen.fraction * batch))
    last_ckpt = latest_checkpoint(out_dir)
    gen.train()
    disc.train()

    log_fh = open(csv_path, "a", newline="", encoding="utf-8")
    writer = csv.writer(log_fh, lineterminator="\n")
    try:
        for it in range(start_iter + 1, tc.iterations + 1):
            idx = torch.randint(0, num_samples, (batch,), generator=rng)
            real = images[idx]
            lab = labels[idx]
            z = torch.randn(batch, cfg.generator.latent_dim, generator=rng)

            # ---- discriminator step (fake synthesis without gradients) ----
            with torch.no_grad():
                fake_stages = gen(z, lab)
            fake_pyr = build_pyramids(fake_stages, cfg.generator)
            real_pyr = build_pyramids(real, cfg.generator)
            d_real = disc(real_pyr, lab)
            d_fake = disc(fake_pyr, lab)
            d_adv = adversarial_loss_d(d_real.d, d_fake.d)
            r1 = torch.zeros(())
            r2 = torch.zeros(())
            if it % pen.interval == 0 and (pen.r1_weight > 0 or pen.r2_weight > 0):
                d_fn = _penalty_fn(disc, lab, n_pen)
                r1 = gradient_penalty_approx(d_fn, real_pyr, pen, rng)
                r2 = gradient_penalty_approx(d_fn, fake_pyr, pen, rng)
            d_loss = d_adv + pen.r1_weight * r1 + pen.r2_weight * r2
            if not torch.isfinite(d_loss):
                raise NumericFault(f"non-finite discriminator loss at iteration {it}; "
                                   f"last checkpoint: {last_ckpt}")
            opt_d.zero_grad(set_to_none=True)
            d_loss.backward()
            if tc.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(disc.parameters(), tc.grad_clip)
            opt_d.step()

            # ---- generator step (discriminator frozen) ----
            z2 = torch.randn(batch, cfg.generator.latent_dim, generator=rng)
            stages = gen(z2, lab)
            pyr = build_pyramids(stages, cfg.generator)
            for p in disc.parameters():
                p.requires_grad_(False)
            g_fake = disc(pyr, lab)
            with torch.no_grad():
                g_real = disc(real_pyr, lab)
            g_adv = adversarial_loss_g(g_real.d, g_fake.d)
            if cons_cfg.lambda_cons > 0:
                cons = consistency_loss(stages, cons_cfg)
            else:
                cons = torch.zeros(())
            g_loss = generator_objective(g_adv, cons, cons_cfg)
            if not torch.isfinite(g_loss):
                raise NumericFault(f"non-finite generator loss at iteration {it}; "
                                   f"last checkpoint: {last_ckpt}")
            opt_g.zero_grad(set_to_none=True)
            g_loss.backward()
            if tc.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(gen.parameters(), tc.grad_clip)
            opt_g.step()
            for p in disc.parameters():
                p.requires_grad_(True)
            ema_update(ema.parameters(), gen.parameters(), tc.ema_decay)

            writer.writerow([it] + [repr(float(v.detach()))
                                    for v in (g_adv, d_adv, cons, r1, r2, g_loss)])
            log_fh.flush()

            if it % tc.checkpoint_every == 0 or it == tc.iterations:
                path = _ckpt_path(out_dir, it)
                save_checkpoint(path, iteration=it, generator=gen, discriminator=disc,
                                ema_generator=ema, opt_g=opt_g, opt_d=opt_d, rng=rng,
                                cfg=cfg)
                last_ckpt = path
    finally:
        log_fh.close()

    return TrainResult(out_dir=str(out_dir), iterations=tc.iterations,
                       csv_path=str(csv_path), last_checkpoint=str(last_ckpt))


def generate_samples(generator: Generator, num: int, num_classes: int, *, seed: int = 1234,
                     psi: float = 1.0, labels=None, batch: int = 64):
    """Balanced-label sampling helper; returns (pyramid over all, labels)."""
    rng = torch.Generator().manual_seed(seed)
    if labels is None:
        labels = torch.arange(num, dtype=torch.int64) % num_classes
    per_scale = None
    with torch.no_grad():
        for lo in range(0, num, batch):
            lab = labels[lo:lo + batch]
            z = torch.randn(lab.shape[0], generator.cfg.latent_dim, generator=rng)
            pyr = build_pyramids(generator(z, lab, psi=psi), generator.cfg)
            if per_scale is None:
                per_scale = [[x] for x in pyr.x]
            else:
                for acc, x in zip(per_scale, pyr.x):
                    acc.append(x)
    xs = [torch.cat(acc, dim=0) for acc in per_scale]
    return ScalePyramid(x=xs, source="generated"), labels


def evaluate_checkpoint(source, *, num_samples=None, seed: int = 1234, use_ema: bool = True,
                        compute_attention: bool = False, dataset=None) -> dict:
    """Trajectory metrics, toy distribution distance, and (optionally) the
    per-layer cross-scale attention fractions at one checkpoint."""
    payload = source if isinstance(source, dict) else load_checkpoint(source)
    cfg, gen, disc, ema = restore_models(payload, keep_attention=compute_attention)
    model = ema if use_ema else gen
    model.eval()
    if num_samples is None:
        num_samples = cfg.train.eval_samples

    pyr, labels = generate_samples(model, num_samples, cfg.data.num_classes, seed=seed)
    metrics = trajectory_metrics(pyr, cfg.generator)

    if dataset is None:
        dataset = synth_dataset(cfg.data)
    images = torch.from_numpy(dataset.images)
    rng = torch.Generator().manual_seed(seed)
    pick = torch.randperm(images.shape[0], generator=rng)[:num_samples]
    real = images[pick]
    fake_final = pyr.x[-1]
    frechet = toy_frechet_distance(gaussian_stats(real.flatten(1)),
                                   gaussian_stats(fake_final.flatten(1)))

    attention = None
    if compute_attention:
        disc.eval()
        n_attn = min(64, num_samples)
        with torch.no_grad():
            real_pyr = build_pyramids(real[:n_attn], cfg.generator)
            maps = disc.attention_maps(real_pyr, dataset_labels(dataset, pick[:n_attn]))
        attention = cross_scale_attention_fraction(maps, disc.layout)

    return {
        "iteration": payload["iteration"],
        "mode": payload["mode"],
        "trajectory": metrics,
        "frechet": frechet,
        "attention": attention,
    }


def dataset_labels(dataset, idx):
    return torch.from_numpy(dataset.labels)[idx]


# ---------------------------------------------------------------------------
# ablation driver


def parse_sweep(kv: dict) -> tuple[list[int], dict]:
    """Sweep text: ``seeds = 0,1,2``, ``variants = cons,nocons``, and per-
    variant override lines ``<variant>.<config key> = <value>``."""
    if "seeds" not in kv or "variants" not in kv:
        raise ConfigError("sweep needs 'seeds' and 'variants' keys")
    try:
        seeds = [int(s) for s in kv["seeds"].split(",") if s.strip()]
    except ValueError:
        raise ConfigError("seeds must be a comma list of integers") from None
    names = [v.strip() for v in kv["variants"].split(",") if v.strip()]
    if not seeds or not names:
        raise ConfigError("sweep needs at least one seed and one variant")
    variants = {name: {} for name in names}
    for key, value in kv.items():
        if key in ("seeds", "variants"):
            continue
        if "." not in key:
            raise ConfigError(f"unexpected sweep key {key!r}")
        name, cfg_key = key.split(".", 1)
        if name not in variants:
            raise ConfigError(f"override {key!r} references unknown variant {name!r}")
        variants[name][cfg_key] = value
    return seeds, variants


def _grand_mean(values) -> float:
    finite = [v for v in values if not math.isnan(v)]
    return sum(finite) / len(finite) if finite else float("nan")


def run_ablation(base_cfg: ExperimentConfig, sweep_kv: dict, out_dir,
                 dataset=None) -> dict:
    """Train every (variant, seed) pair, evaluate matched final checkpoints,
    and write a comparison CSV plus threshold verdicts.

    Variant names ``cons``/``nocons``/``aggregated`` get the standard paired
    verdicts; other names only appear in the comparison table.
    """
    seeds, variants = parse_sweep(sweep_kv)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for name, overrides in variants.items():
        for seed in seeds:
            run_cfg = base_cfg.with_overrides({**overrides, "train_seed": str(seed)})
            run_dir = out_dir / f"{name}-seed{seed}"
            row = {"variant": name, "seed": seed, "status": "ok",
                   "iterations": run_cfg.train.iterations}
            try:
                ds = dataset if dataset is not None and run_cfg.data == base_cfg.data \
                    else synth_dataset(run_cfg.data)
                result = train(run_cfg, run_dir, dataset=ds)
                report = evaluate_checkpoint(result.last_checkpoint, dataset=ds,
                                             compute_attention=True)
                tm = report["trajectory"]
                row.update({
                    "frechet": report["frechet"],
                    "delta": _grand_mean(tm.delta_mean),
                    "rewrite": _grand_mean(tm.rewrite_mean),
                    "align": _grand_mean(tm.align_mean),
                    "attention": report["attention"].layer_mean,
                })
                for k in range(len(tm.delta_mean)):
                    row[f"delta_k{k}"] = tm.delta_mean[k]
                    row[f"rewrite_k{k}"] = tm.rewrite_mean[k]
                    row[f"align_k{k}"] = tm.align_mean[k]
            except Exception as exc:  # noqa: BLE001 - partial reports are a contract
                row["status"] = f"failed: {type(exc).__name__}: {exc}"
            rows.append(row)

    head = ("variant", "seed", "status", "iterations", "frechet", "delta", "rewrite",
            "align", "attention")
    seen = {key for row in rows for key in row}
    columns = [c for c in head if c in seen] + sorted(seen - set(head))
    report_path = out_dir / "report.csv"
    with open(report_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, restval="", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _csv_cell(v) for k, v in row.items()})

    verdicts = ablation_verdicts(rows)
    verdict_path = out_dir / "verdicts.csv"
    with open(verdict_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=("check", "value", "threshold", "status"),
                                lineterminator="\n")
        writer.writeheader()
        for v in verdicts:
            writer.writerow(v)

    return {"rows": rows, "verdicts": verdicts, "report_path": str(report_path),
            "verdict_path": str(verdict_path)}


def _csv_cell(value):
    if isinstance(value, float):
        return format(value, ".9g")
    return value


def _variant_mean(rows, name, key):
    vals = [row[key] for row in rows
            if row["variant"] == name and row["status"] == "ok" and key in row]
    return _grand_mean(vals) if vals else float("nan")


def ablation_verdicts(rows) -> list:
    """Threshold checks over seed-averaged variant results.

    cons vs nocons: delta and rewrite down by >= 20%, align up, distribution
    distance within +10%. aggregated: layer-mean cross-scale attention
    >= 0.05 and no better distribution distance than the scale-wise run.
    """
    verdicts = []
    failed = [r for r in rows if r["status"] != "ok"]
    if failed:
        verdicts.append({"check": "all_runs_completed", "value": len(failed),
                         "threshold": 0, "status": "incomplete"})
    names = {row["variant"] for row in rows}

    def verdict(check, value, threshold, ok):
        verdicts.append({"check": check, "value": format(value, ".6g"),
                         "threshold": threshold,
                         "status": "pass" if ok else "fail"})

    if {"cons", "nocons"} <= names:
        d_c = _variant_mean(rows, "cons", "delta")
        d_n = _variant_mean(rows, "nocons", "delta")
        r_c = _variant_mean(rows, "cons", "rewrite")
        r_n = _variant_mean(rows, "nocons", "rewrite")
        a_c = _variant_mean(rows, "cons", "align")
        a_n = _variant_mean(rows, "nocons", "align")
        f_c = _variant_mean(rows, "cons", "frechet")
        f_n = _variant_mean(rows, "nocons", "frechet")
        verdict("delta_reduction", 1.0 - d_c / d_n, ">=0.20", 1.0 - d_c / d_n >= 0.20)
        verdict("rewrite_reduction", 1.0 - r_c / r_n, ">=0.20", 1.0 - r_c / r_n >= 0.20)
        verdict("align_increase", a_c - a_n, ">0", a_c > a_n)
        verdict("frechet_ratio", f_c / f_n, "<=1.10", f_c / f_n <= 1.10)
    if "aggregated" in names:
        attn = _variant_mean(rows, "aggregated", "attention")
        verdict("aggregated_attention", attn, ">=0.05", attn >= 0.05)
        if "cons" in names:
            f_a = _variant_mean(rows, "aggregated", "frechet")
            f_c = _variant_mean(rows, "cons", "frechet")
            verdict("aggregated_frechet_not_better", f_a / f_c, ">=1.0", f_a >= f_c)
    return verdicts
