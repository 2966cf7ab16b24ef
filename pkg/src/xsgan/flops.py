"""Analytic training-compute ledger.

Counting convention: one multiply-accumulate = one FLOP, matmul terms only
(no normalization/activation counts). Transformer forward cost per sample is

    depth * (4*N*C*inner + 2*N^2*inner + 3*N*C*hidden) + fixed terms,

with N tokens, width C, inner = heads*head_dim, and the gated FFN hidden
width (2/3)*mlp_ratio*C. Training-step cost comes from call-model recipes
(symbol, multiplier) over per-sample forward costs; totals scale by epochs.
"""

import os
import re
from dataclasses import dataclass

from .config import DiscConfig, ExperimentConfig, ModelConfig, parse_kv_text
from .errors import ConfigError

GIGA = 1e9


def _layer_macs(tokens: int, dim: int, inner: int, mlp_hidden: float) -> float:
    attn_proj = 4.0 * tokens * dim * inner
    attn_mix = 2.0 * tokens * tokens * inner
    ffn = 3.0 * tokens * dim * mlp_hidden
    return attn_proj + attn_mix + ffn


def forward_flops(cfg: ModelConfig) -> float:
    """Generator forward GFLOPs per sample."""
    cfg.validate()
    tokens = cfg.grid ** 2
    inner = cfg.num_heads * cfg.head_dim
    mlp_hidden = (2.0 / 3.0) * cfg.mlp_ratio * cfg.hidden_dim
    per_layer = _layer_macs(tokens, cfg.hidden_dim, inner, mlp_hidden)
    per_layer += 6.0 * cfg.style_dim * cfg.hidden_dim  # per-block modulation projection
    mapping = 2.0 * cfg.latent_dim * cfg.style_dim + float(cfg.style_dim) ** 2
    heads = (cfg.num_scales * tokens * cfg.hidden_dim
             * (cfg.patch_size ** 2 * cfg.channels_in))
    return (cfg.depth * per_layer + mapping + heads) / GIGA


def discriminator_forward_flops(cfg: DiscConfig) -> float:
    """Discriminator forward GFLOPs per sample over the multi-scale sequence."""
    cfg.validate()
    spatial = [(res // p) ** 2 for res, p in zip(cfg.scale_resolutions, cfg.patch_sizes)]
    tokens = sum(spatial) + cfg.num_scales  # plus one cls token per scale
    inner = cfg.num_heads * cfg.head_dim
    mlp_hidden = (2.0 / 3.0) * cfg.mlp_ratio * cfg.hidden_dim
    per_layer = _layer_macs(tokens, cfg.hidden_dim, inner, mlp_hidden)
    embed = sum(s * (p ** 2 * cfg.channels_in) * cfg.hidden_dim
                for s, p in zip(spatial, cfg.patch_sizes))
    conditioning = 2.0 * cfg.num_scales * cfg.hidden_dim  # logit head + class projection
    return (cfg.depth * per_layer + embed + conditioning) / GIGA


@dataclass(frozen=True)
class ComputeModel:
    """Forward-cost symbols plus the per-iteration call recipe for one method."""

    name: str
    forward_costs: tuple  # ((symbol, gflops), ...)
    recipe: tuple         # ((symbol, multiplier), ...)
    infer: tuple          # ((symbol, multiplier), ...), one generation

    def costs(self) -> dict:
        return dict(self.forward_costs)

    def validate(self):
        costs = self.costs()
        if not costs:
            raise ConfigError(f"{self.name}: no forward costs declared")
        for sym, value in costs.items():
            if value <= 0:
                raise ConfigError(f"{self.name}: forward cost {sym} must be positive")
        for label, terms in (("recipe", self.recipe), ("infer", self.infer)):
            if not terms:
                raise ConfigError(f"{self.name}: empty {label}")
            for sym, mult in terms:
                if mult <= 0:
                    raise ConfigError(f"{self.name}: {label} multiplier for {sym} "
                                      f"must be positive")
                if sym not in costs:
                    raise ConfigError(f"{self.name}: {label} symbol {sym} has no "
                                      f"declared forward cost")


def _eval_terms(terms, costs) -> float:
    return sum(mult * costs[sym] for sym, mult in terms)


def training_step_flops(model: ComputeModel) -> float:
    """GFLOPs per sample per training iteration."""
    model.validate()
    return _eval_terms(model.recipe, model.costs())


def inference_flops(model: ComputeModel) -> float:
    model.validate()
    return _eval_terms(model.infer, model.costs())


@dataclass(frozen=True)
class TrainingBudget:
    epochs: int
    per_sample_iter_gflops: float
    relative: float | None = None

    @property
    def total_kgflops(self) -> float:
        return self.per_sample_iter_gflops * self.epochs / 1000.0


def total_training_flops(step_gflops: float, epochs: int,
                         baseline_total_kgflops: float | None = None) -> TrainingBudget:
    if step_gflops <= 0 or epochs <= 0:
        raise ConfigError("step GFLOPs and epochs must be positive")
    budget = TrainingBudget(epochs=epochs, per_sample_iter_gflops=step_gflops)
    if baseline_total_kgflops is not None:
        budget = TrainingBudget(epochs=epochs, per_sample_iter_gflops=step_gflops,
                                relative=budget.total_kgflops / baseline_total_kgflops)
    return budget


_TERM_RE = re.compile(r"^\s*(?:([0-9]+(?:\.[0-9]+)?)\s*\*\s*)?([A-Za-z_][A-Za-z0-9_]*)\s*$")


def parse_recipe(text: str) -> tuple:
    """Parse '4*F_G + 10.5*F_D' style recipe strings."""
    terms = []
    for chunk in text.split("+"):
        m = _TERM_RE.match(chunk)
        if not m:
            raise ConfigError(f"cannot parse recipe term {chunk.strip()!r}")
        mult = float(m.group(1)) if m.group(1) else 1.0
        terms.append((m.group(2), mult))
    if not terms:
        raise ConfigError("empty recipe")
    return tuple(terms)


def format_recipe(terms) -> str:
    parts = []
    for sym, mult in terms:
        parts.append(sym if mult == 1 else f"{mult:g}*{sym}")
    return " + ".join(parts)


@dataclass(frozen=True)
class LedgerEntry:
    model: ComputeModel
    epochs: int
    baseline: bool = False


_RESERVED = {"name", "recipe", "infer", "epochs", "baseline"}


def load_ledger_entry(path) -> LedgerEntry:
    """One ledger config: name/recipe/infer/epochs plus forward costs.

    Costs are numeric (``F_D = 36``) or derived from an experiment config
    (``F_G_from = g:desk.cfg`` / ``d:desk.cfg``, path relative to this file).
    """
    with open(path, "r", encoding="utf-8") as fh:
        kv = parse_kv_text(fh.read())
    missing = [k for k in ("name", "recipe", "epochs") if k not in kv]
    if missing:
        raise ConfigError(f"{path}: missing keys {', '.join(missing)}")
    costs = {}
    for key, value in kv.items():
        if key in _RESERVED:
            continue
        if key.endswith("_from"):
            sym = key[:-len("_from")]
            if ":" not in value:
                raise ConfigError(f"{path}: {key} must look like 'g:<config>' or 'd:<config>'")
            side, ref = value.split(":", 1)
            ref_path = os.path.join(os.path.dirname(os.fspath(path)), ref)
            exp = ExperimentConfig.from_file(ref_path)
            if side == "g":
                costs[sym] = forward_flops(exp.generator)
            elif side == "d":
                costs[sym] = discriminator_forward_flops(exp.discriminator)
            else:
                raise ConfigError(f"{path}: unknown model side {side!r} in {key}")
        else:
            try:
                costs[key] = float(value)
            except ValueError:
                raise ConfigError(f"{path}: cannot parse forward cost {key} = {value!r}") \
                    from None
    recipe = parse_recipe(kv["recipe"])
    infer = parse_recipe(kv["infer"]) if "infer" in kv else (recipe[0][:1] + (1.0,),)
    model = ComputeModel(name=kv["name"], forward_costs=tuple(sorted(costs.items())),
                         recipe=recipe, infer=infer)
    model.validate()
    try:
        epochs = int(kv["epochs"])
    except ValueError:
        raise ConfigError(f"{path}: epochs must be an integer") from None
    baseline = kv.get("baseline", "false").lower() in ("true", "1", "yes")
    return LedgerEntry(model=model, epochs=epochs, baseline=baseline)


def load_ledger(path) -> list:
    """Load one entry (file) or a whole directory of ``*.cfg`` entries."""
    path = os.fspath(path)
    if os.path.isdir(path):
        names = sorted(n for n in os.listdir(path) if n.endswith(".cfg"))
        if not names:
            raise ConfigError(f"no ledger configs in {path}")
        return [load_ledger_entry(os.path.join(path, n)) for n in names]
    return [load_ledger_entry(path)]


def table6_rows(entries) -> list:
    """Per-method forward costs, recipe, train and inference GFLOPs."""
    rows = []
    for entry in entries:
        m = entry.model
        rows.append({
            "name": m.name,
            "forward": " ".join(f"{s}={v:g}" for s, v in m.forward_costs),
            "recipe": format_recipe(m.recipe),
            "train_gflops": training_step_flops(m),
            "infer_gflops": inference_flops(m),
        })
    return rows


def table4_rows(entries) -> list:
    """Training totals (x10^3 GFLOPs) and multipliers against the baseline."""
    if not entries:
        raise ConfigError("no ledger entries")
    baseline = next((e for e in entries if e.baseline), entries[-1])
    base_total = total_training_flops(
        training_step_flops(baseline.model), baseline.epochs).total_kgflops
    rows = []
    for entry in entries:
        step = training_step_flops(entry.model)
        budget = total_training_flops(step, entry.epochs, base_total)
        rows.append({
            "name": entry.model.name,
            "train_gflops": step,
            "infer_gflops": inference_flops(entry.model),
            "epochs": entry.epochs,
            "total_kgflops": budget.total_kgflops,
            "relative": budget.relative,
        })
    return rows


def _format_cell(value) -> str:
    if isinstance(value, float):
        return f"{value:.1f}"
    return str(value)


def render_table_text(rows, columns) -> str:
    """Aligned text table; columns is a list of (key, header) pairs."""
    cells = [[header for _, header in columns]]
    for row in rows:
        cells.append([_format_cell(row[key]) for key, _ in columns])
    widths = [max(len(r[i]) for r in cells) for i in range(len(columns))]
    lines = []
    for i, row in enumerate(cells):
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def render_table_csv(rows, columns) -> str:
    import csv
    import io

    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow([header for _, header in columns])
    for row in rows:
        writer.writerow([
            format(row[key], ".6g") if isinstance(row[key], float) else row[key]
            for key, _ in columns])
    return buf.getvalue()


TABLE4_COLUMNS = (("name", "method"), ("train_gflops", "train_gflops"),
                  ("infer_gflops", "infer_gflops"), ("epochs", "epochs"),
                  ("total_kgflops", "total_x1e3"), ("relative", "rel_total"))
TABLE6_COLUMNS = (("name", "method"), ("forward", "forward_gflops"),
                  ("recipe", "training_step"), ("train_gflops", "train_gflops"),
                  ("infer_gflops", "infer_gflops"))
