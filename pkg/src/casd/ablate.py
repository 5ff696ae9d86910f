"""Scripted ablation suite: component rows, layer rows, regularizer rows
and the gamma sweep, each trained over several seeds and evaluated on the
test split.  Emits a machine-readable table plus a rank ordering."""

from __future__ import annotations

import json
import os
from pathlib import Path

from .config import replace
from .errors import ContractError
from .train import CHECKPOINT_NAME, run_eval, run_training

GAMMA_SWEEP = (0.05, 0.075, 0.1, 0.15, 0.2)

_OFF = dict(
    enable_iw=False,
    enable_lw=False,
    enable_ia=False,
    enable_psa=False,
    enable_reg=False,
    baseline_regularizer="none",
)

# main component rows; each entry overrides the base config
MAIN_ROWS = {
    "baseline": dict(_OFF),
    "iw_no_ia_psa": dict(_OFF, enable_iw=True),
    "iw_no_ia": dict(_OFF, enable_iw=True, enable_psa=True),
    "iw": dict(_OFF, enable_iw=True, enable_psa=True, enable_ia=True),
    "lw": dict(_OFF, enable_lw=True, enable_psa=True),
    "iw_lw": dict(_OFF, enable_iw=True, enable_lw=True, enable_psa=True, enable_ia=True),
    "iw_lw_reg": dict(
        _OFF, enable_iw=True, enable_lw=True, enable_psa=True, enable_ia=True, enable_reg=True
    ),
}

# layer-wise distillation block sets, applied on top of the lw row
LAYER_ROWS = {
    "lw_b4_b3": dict(_OFF, enable_lw=True, lw_blocks=(3, 4)),
    "lw_b4_b3_b2": dict(_OFF, enable_lw=True, lw_blocks=(2, 3, 4)),
    "lw_b4_b3_b2_b1": dict(_OFF, enable_lw=True, lw_blocks=(1, 2, 3, 4)),
}

# alternative attention regularization strategies, compared against the
# plain input-wise distillation row (iw_no_ia); score aggregation kept on
# in all three so only the regularizer differs
REGULARIZER_ROWS = {
    "pred_consistency": dict(_OFF, enable_psa=True, baseline_regularizer="pred_consistency"),
    "attn_consistency": dict(_OFF, enable_psa=True, baseline_regularizer="attn_consistency"),
    "attn_distillation": dict(_OFF, enable_iw=True, enable_psa=True),
}


def gamma_rows(gammas=GAMMA_SWEEP):
    """Gamma sweep on the full distillation config (iw + lw)."""
    base = MAIN_ROWS["iw_lw"]
    return {f"gamma_{g:g}": dict(base, gamma=float(g)) for g in gammas}


def row_config(base_cfg, overrides, seed):
    return replace(base_cfg, seed=seed, **overrides)


def _train_row(cfg, data_dir, row_dir, reuse, quiet):
    ckpt = Path(row_dir) / CHECKPOINT_NAME
    if reuse and ckpt.exists():
        return ckpt
    return run_training(cfg, data_dir, row_dir, quiet=quiet)


def run_ablation_suite(base_cfg, data_dir, out_dir, seeds=(0, 1, 2), rows=None, reuse=True, quiet=True):
    """Train and evaluate every (row, seed) pair; returns the table dict.

    Also writes ``table.json`` under out_dir.  With ``reuse`` an existing
    checkpoint in a row directory is evaluated instead of retrained, so an
    interrupted suite picks up where it stopped.
    """
    seeds = tuple(int(s) for s in seeds)
    if len(seeds) < 3:
        raise ContractError(f"ablation suite needs at least 3 seeds, got {len(seeds)}")
    if rows is None:
        rows = MAIN_ROWS
    out_dir = Path(out_dir)
    table = {"rows": [], "ranking": []}
    for name, overrides in rows.items():
        per_seed = []
        for seed in seeds:
            cfg = row_config(base_cfg, overrides, seed)
            row_dir = out_dir / name / f"seed{seed}"
            os.makedirs(row_dir, exist_ok=True)
            ckpt = _train_row(cfg, data_dir, row_dir, reuse, quiet)
            report = run_eval(ckpt, data_dir, split="test")
            per_seed.append({"seed": seed, "map50": report.map50, "corloc": report.corloc})
            if not quiet:
                print(f"{name} seed={seed} map50={report.map50:.4f} corloc={report.corloc:.4f}", flush=True)
        table["rows"].append(
            {
                "name": name,
                "per_seed": per_seed,
                "mean_map50": sum(r["map50"] for r in per_seed) / len(per_seed),
                "mean_corloc": sum(r["corloc"] for r in per_seed) / len(per_seed),
            }
        )
    table["ranking"] = [
        r["name"] for r in sorted(table["rows"], key=lambda r: -r["mean_map50"])
    ]
    with open(out_dir / "table.json", "w") as f:
        json.dump(table, f, indent=1, sort_keys=True)
    return table
