import json
import shutil
import zipfile

import numpy as np
import pytest

from casd import ablate
from casd import autodiff as ad
from casd import cli
from casd.config import TrainConfig, replace, serialize_config
from casd.errors import ContractError, FormatError
from casd.gradcheck import micro_config, micro_sample
from casd.model import Detector, load_checkpoint
from casd.train import (
    compute_losses,
    dump_attention_maps,
    lr_at,
    run_eval,
    run_training,
)


def micro_model(cfg, num_classes=2, seed=3):
    return Detector(num_classes, cfg, rng=np.random.default_rng(seed))


def full_micro_cfg(**over):
    base = dict(enable_iw=True, enable_lw=True, enable_psa=True, enable_reg=True)
    base.update(over)
    return replace(micro_config(), **base)


def test_lr_schedule_steps():
    cfg = TrainConfig()
    assert lr_at(0, cfg) == 0.001
    assert lr_at(1999, cfg) == 0.001
    assert lr_at(2000, cfg) == pytest.approx(1e-4)
    assert lr_at(2999, cfg) == pytest.approx(1e-4)
    multi = replace(cfg, decay_at_iter=(2, 4))
    want = [1e-3, 1e-3, 1e-4, 1e-4, 1e-5, 1e-5]
    assert [lr_at(s, multi) for s in range(6)] == pytest.approx(want)


def test_loss_decomposition_matches_graph():
    cfg = full_micro_cfg()
    sample = micro_sample()
    with ad.use_dtype(np.float64):
        model = micro_model(cfg)
        total, breakdown = compute_losses(model, sample, cfg, np.random.default_rng(0))
        assert float(total.data) == pytest.approx(breakdown.total, abs=1e-9)
    assert breakdown.mlc > 0
    assert all(v > 0 for v in breakdown.ref)
    assert all(v > 0 for v in breakdown.iw)
    assert all(v > 0 for v in breakdown.lw)


def test_gamma_zero_zeroes_distillation_terms():
    cfg = full_micro_cfg(gamma=0.0)
    sample = micro_sample()
    with ad.use_dtype(np.float64):
        model = micro_model(cfg)
        total, breakdown = compute_losses(model, sample, cfg, np.random.default_rng(0))
        assert breakdown.iw == [0.0, 0.0]
        assert breakdown.lw == [0.0, 0.0]
        assert breakdown.breg == [0.0, 0.0]
        assert float(total.data) == pytest.approx(breakdown.total, abs=1e-9)


def test_toggling_iw_leaves_other_terms_unchanged():
    sample = micro_sample()
    cfg_on = full_micro_cfg()
    cfg_off = replace(cfg_on, enable_iw=False)
    with ad.use_dtype(np.float64):
        m1 = micro_model(cfg_on)
        m2 = micro_model(cfg_off)  # same init seed -> identical weights
        t1, b1 = compute_losses(m1, sample, cfg_on, np.random.default_rng(5))
        t2, b2 = compute_losses(m2, sample, cfg_off, np.random.default_rng(5))
    assert b1.mlc == pytest.approx(b2.mlc, abs=1e-12)
    assert b1.ref == pytest.approx(b2.ref, abs=1e-12)
    assert b1.reg == pytest.approx(b2.reg, abs=1e-12)
    assert b1.lw == pytest.approx(b2.lw, abs=1e-12)
    assert b2.iw == [0.0, 0.0]
    assert all(v > 0 for v in b1.iw)
    gap = cfg_on.gamma * sum(b1.iw)
    assert float(t1.data) - float(t2.data) == pytest.approx(gap, abs=1e-10)


def test_regularizer_rows_report_breg():
    sample = micro_sample()
    cfg = replace(micro_config(), enable_psa=True, baseline_regularizer="pred_consistency")
    with ad.use_dtype(np.float64):
        total, breakdown = compute_losses(micro_model(cfg), sample, cfg, np.random.default_rng(1))
        assert all(v > 0 for v in breakdown.breg)
        assert float(total.data) == pytest.approx(breakdown.total, abs=1e-9)
    cfg2 = replace(cfg, baseline_regularizer="attn_consistency")
    with ad.use_dtype(np.float64):
        total2, b2 = compute_losses(micro_model(cfg2), sample, cfg2, np.random.default_rng(1))
        assert all(v > 0 for v in b2.breg)
        assert float(total2.data) == pytest.approx(b2.total, abs=1e-9)


@pytest.fixture(scope="module")
def trained(tiny_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("trained")
    ckpt = run_training(micro_config(), tiny_dataset["root"], out)
    return {"out": out, "ckpt": ckpt}


def test_training_writes_metrics_and_checkpoint(trained):
    lines = (trained["out"] / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == micro_config().max_iters  # log_every = 1
    for line in lines:
        rec = json.loads(line)
        assert list(rec) == ["iter", "lr", "total", "mlc", "ref", "reg", "iw", "lw", "breg"]
        assert np.isfinite(rec["total"])
        assert rec["lr"] == pytest.approx(lr_at(rec["iter"], micro_config()))
    model, iteration, cfg = load_checkpoint(trained["ckpt"])
    assert iteration == micro_config().max_iters
    assert cfg == micro_config()


def test_rerun_is_byte_identical(tiny_dataset, trained, tmp_path):
    run_training(micro_config(), tiny_dataset["root"], tmp_path)
    assert (tmp_path / "metrics.jsonl").read_bytes() == (trained["out"] / "metrics.jsonl").read_bytes()
    assert (tmp_path / "checkpoint.zip").read_bytes() == trained["ckpt"].read_bytes()


def test_resume_matches_uninterrupted(tiny_dataset, trained, tmp_path):
    part = tmp_path / "part"
    ckpt = run_training(micro_config(), tiny_dataset["root"], part, stop_after=2)
    _, iteration, _ = load_checkpoint(ckpt)
    assert iteration == 2
    run_training(micro_config(), tiny_dataset["root"], part, resume=ckpt)
    assert (part / "metrics.jsonl").read_bytes() == (trained["out"] / "metrics.jsonl").read_bytes()
    assert (part / "checkpoint.zip").read_bytes() == trained["ckpt"].read_bytes()


def test_resume_guards(tiny_dataset, trained, tmp_path):
    with pytest.raises(ContractError, match="different config"):
        run_training(replace(micro_config(), gamma=0.2), tiny_dataset["root"], tmp_path,
                     resume=trained["ckpt"])
    with pytest.raises(ContractError, match="already at iteration"):
        run_training(micro_config(), tiny_dataset["root"], tmp_path, resume=trained["ckpt"])


def _retouch_zip(src, dst, mutate):
    with zipfile.ZipFile(src) as zin, zipfile.ZipFile(dst, "w") as zout:
        for info in zin.infolist():
            zout.writestr(info, mutate(info.filename, zin.read(info.filename)))


def test_checkpoint_tamper_detection(trained, tmp_path):
    bad = tmp_path / "bad.zip"

    _retouch_zip(trained["ckpt"], bad,
                 lambda name, blob: b"XXXX" + blob[4:] if name.startswith("params/") else blob)
    with pytest.raises(FormatError):
        load_checkpoint(bad)

    def flip_config(name, blob):
        if name == "meta.json":
            meta = json.loads(blob)
            meta["config"] = meta["config"].replace("gamma = 0.1", "gamma = 0.2")
            return json.dumps(meta)
        return blob

    _retouch_zip(trained["ckpt"], bad, flip_config)
    with pytest.raises(FormatError, match="hash mismatch"):
        load_checkpoint(bad)

    with zipfile.ZipFile(bad, "w") as zf:
        zf.writestr("params/x.tnsr", b"")
    with pytest.raises(FormatError, match="meta.json"):
        load_checkpoint(bad)

    (tmp_path / "not_a_zip.zip").write_bytes(b"hello")
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "not_a_zip.zip")


def test_eval_is_deterministic(tiny_dataset, trained):
    a = run_eval(trained["ckpt"], tiny_dataset["root"], split="test")
    b = run_eval(trained["ckpt"], tiny_dataset["root"], split="test")
    assert a.to_json() == b.to_json()
    assert len(a.per_class_ap) == 3
    assert np.isfinite(a.map50) and np.isfinite(a.corloc)


def test_dump_attention_maps(tiny_dataset, trained, tmp_path):
    written = dump_attention_maps(trained["ckpt"], tiny_dataset["root"], "train", 0, [3, 0], tmp_path)
    kinds = {"orig", "flip_aligned", "scale", "iw", "lw", "block1", "block2"}
    names = {p.name for p in tmp_path.iterdir()}
    want = {f"attn_{kind}_{r:04d}{ext}" for kind in kinds for r in (0, 3) for ext in (".tnsr", ".pgm")}
    assert names == want
    assert len(written) == len(kinds) * 2
    assert (tmp_path / "attn_iw_0000.pgm").read_bytes().startswith(b"P5\n")
    with pytest.raises(ContractError, match="out of range"):
        dump_attention_maps(trained["ckpt"], tiny_dataset["root"], "train", 0, [9999], tmp_path)


def test_main_row_definitions():
    assert list(ablate.MAIN_ROWS) == [
        "baseline", "iw_no_ia_psa", "iw_no_ia", "iw", "lw", "iw_lw", "iw_lw_reg",
    ]
    base = ablate.MAIN_ROWS["baseline"]
    assert not any(base[k] for k in ("enable_iw", "enable_lw", "enable_ia", "enable_psa", "enable_reg"))
    assert ablate.MAIN_ROWS["iw"] == dict(base, enable_iw=True, enable_psa=True, enable_ia=True)
    full = ablate.MAIN_ROWS["iw_lw_reg"]
    assert full["enable_iw"] and full["enable_lw"] and full["enable_reg"]
    assert ablate.LAYER_ROWS["lw_b4_b3"]["lw_blocks"] == (3, 4)
    assert ablate.LAYER_ROWS["lw_b4_b3_b2_b1"]["lw_blocks"] == (1, 2, 3, 4)
    for row in ablate.REGULARIZER_ROWS.values():
        assert row["enable_psa"]
    rows = ablate.gamma_rows()
    assert list(rows) == ["gamma_0.05", "gamma_0.075", "gamma_0.1", "gamma_0.15", "gamma_0.2"]
    assert rows["gamma_0.2"]["gamma"] == 0.2
    assert rows["gamma_0.1"]["enable_iw"] and rows["gamma_0.1"]["enable_lw"]


def test_row_config_applies_overrides():
    cfg = ablate.row_config(micro_config(), ablate.MAIN_ROWS["lw"], seed=4)
    assert cfg.seed == 4
    assert cfg.enable_lw and cfg.enable_psa and not cfg.enable_iw and not cfg.enable_ia
    with pytest.raises(ContractError):
        ablate.row_config(micro_config(), dict(k=0), seed=0)


def test_ablation_suite_micro(tiny_dataset, tmp_path):
    rows = {"baseline": ablate.MAIN_ROWS["baseline"], "lw": ablate.MAIN_ROWS["lw"]}
    with pytest.raises(ContractError, match="3 seeds"):
        ablate.run_ablation_suite(micro_config(), tiny_dataset["root"], tmp_path, seeds=(0, 1), rows=rows)
    table = ablate.run_ablation_suite(micro_config(), tiny_dataset["root"], tmp_path, rows=rows)
    assert [r["name"] for r in table["rows"]] == ["baseline", "lw"]
    for row in table["rows"]:
        assert [s["seed"] for s in row["per_seed"]] == [0, 1, 2]
        assert row["mean_map50"] == pytest.approx(np.mean([s["map50"] for s in row["per_seed"]]))
    means = {r["name"]: r["mean_map50"] for r in table["rows"]}
    assert table["ranking"] == sorted(means, key=lambda n: -means[n])
    on_disk = json.loads((tmp_path / "table.json").read_text())
    assert on_disk == table
    # reuse: a second call evaluates the existing checkpoints instead of retraining
    marker = tmp_path / "baseline" / "seed0" / "checkpoint.zip"
    before = marker.stat().st_mtime_ns
    ablate.run_ablation_suite(micro_config(), tiny_dataset["root"], tmp_path, rows=rows)
    assert marker.stat().st_mtime_ns == before


def test_cli_gen_train_eval_cycle(tmp_path, capsys):
    data_dir = tmp_path / "data"
    assert cli.main(["gen-data", "--out", str(data_dir), "--n-train", "4", "--n-test", "2", "--seed", "8"]) == 0
    out = capsys.readouterr().out
    assert "train: 4 images" in out and "test: 2 images" in out

    cfg_path = tmp_path / "micro.cfg"
    cfg_path.write_text(serialize_config(micro_config()))
    run_dir = tmp_path / "run"
    assert cli.main(["train", "--config", str(cfg_path), "--data", str(data_dir), "--out", str(run_dir)]) == 0
    assert (run_dir / "checkpoint.zip").exists()

    assert cli.main(["eval", "--ckpt", str(run_dir / "checkpoint.zip"), "--data", str(data_dir)]) == 0
    report = json.loads(capsys.readouterr().out.splitlines()[-1])
    assert set(report) == {"map50", "corloc", "per_class"}

    dump_dir = tmp_path / "maps"
    assert cli.main(["dump-attention", "--ckpt", str(run_dir / "checkpoint.zip"), "--data", str(data_dir),
                     "--sample", "0", "--proposals", "0", "1", "--out", str(dump_dir)]) == 0
    assert (dump_dir / "attn_orig_0000.pgm").exists()


def test_cli_error_exit_codes(tmp_path, capsys):
    # usage errors -> 1
    assert cli.main([]) == 1
    assert cli.main(["ablate", "--data", "x", "--out", "y", "--rows", "bogus"]) == 1
    # data and format errors -> 2
    assert cli.main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 2
    bad_cfg = tmp_path / "bad.cfg"
    bad_cfg.write_text("not_a_key = 1\n")
    assert cli.main(["train", "--config", str(bad_cfg), "--data", str(tmp_path), "--out", str(tmp_path / "o")]) == 2
    assert cli.main(["eval", "--ckpt", str(tmp_path / "none.zip"), "--data", str(tmp_path)]) == 2
    capsys.readouterr()


def test_cli_dump_bad_sample_index(tiny_dataset, trained, tmp_path, capsys):
    code = cli.main(["dump-attention", "--ckpt", str(trained["ckpt"]),
                     "--data", str(tiny_dataset["root"]), "--split", "train",
                     "--sample", "999", "--out", str(tmp_path)])
    assert code == 2
    assert "out of range" in capsys.readouterr().err
