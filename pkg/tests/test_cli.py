import csv
import json

import pytest

from tlens import cli, experiments as ex

BASE = """
[experiment]
name = {name}
seeds = 1, 2
output = {out}
checkpoint_steps = {ckpt}

[dataset]
name = mnist1d
n_train = 40
n_test = 20
label_noise = 0.15

[arch]
hidden = {hidden}

[optim]
kind = momentum
gamma = 0.01
beta1 = 0.9

[training]
steps = 20
batch_size = 8

[tracking]
log_every = 5
smoother = true
"""


def write(tmp_path, name="approx-error", hidden="8", ckpt="10", extra="", out=None):
    path = tmp_path / f"{name}.ini"
    path.write_text(BASE.format(name=name, out=out or tmp_path / "out", ckpt=ckpt, hidden=hidden) + extra)
    return path


def lines(path):
    return [{k: v for k, v in json.loads(l).items() if k not in ex.TIMING_FIELDS} for l in path.read_text().splitlines()]


class TestValidate:
    def test_ok(self, tmp_path, capsys):
        assert cli.main(["validate", str(write(tmp_path))]) == 0
        assert "ok" in capsys.readouterr().out

    @pytest.mark.parametrize("extra", ["\n[training]\nlr = 3\n", "\n[extras]\nx = 1\n", "\n[optim]\ngamma = fast\n"])
    def test_rejects(self, tmp_path, extra):
        path = write(tmp_path)
        text = path.read_text()
        if "[training]" in extra or "[optim]" in extra:
            section = extra.strip().splitlines()[0]
            text = text.replace(section, extra.strip())
        else:
            text += extra
        path.write_text(text)
        assert cli.main(["validate", str(path)]) == cli.EXIT_CONFIG

    def test_missing_name(self, tmp_path):
        (tmp_path / "x.ini").write_text("[experiment]\nseeds = 1\n")
        with pytest.raises(ex.ConfigError):
            ex.load_config(tmp_path / "x.ini")

    def test_missing_file(self, tmp_path):
        assert cli.main(["validate", str(tmp_path / "none.ini")]) == cli.EXIT_CONFIG

    def test_defaults(self):
        cfg = ex.parse_config("[experiment]\nname = lmc\n")
        assert cfg.seeds == (0,) and cfg["optim"]["kind"] == "sgd" and cfg["lmc"]["n_alpha"] == 30


class TestRun:
    def test_file_contract_and_determinism(self, tmp_path):
        cfg = write(tmp_path)
        assert cli.main(["run", str(cfg), "--emit-gnuplot"]) == 0
        out = tmp_path / "out"
        assert (out / "approx-error_seed1.jsonl").exists() and (out / "approx-error_seed2.jsonl").exists()
        rows = list(csv.DictReader(open(out / "approx-error_summary.csv")))
        assert [int(r["step"]) for r in rows] == [0, 5, 10, 15, 20] and rows[0]["n_seeds"] == "2"
        assert "mean_abs_tilde_stderr" in rows[0]
        assert (out / "approx-error_summary.gp").exists()
        first = lines(out / "approx-error_seed1.jsonl")
        assert cli.main(["run", str(cfg), "--output", str(tmp_path / "again")]) == 0
        assert first == lines(tmp_path / "again" / "approx-error_seed1.jsonl")

    def test_resume_matches(self, tmp_path):
        cfg = write(tmp_path)
        assert cli.main(["run", str(cfg)]) == 0
        ckpt = tmp_path / "out" / "ckpt_seed2_step10.tlck"
        assert cli.main(["resume", str(ckpt), str(cfg), "--output", str(tmp_path / "res")]) == 0
        a = lines(tmp_path / "out" / "approx-error_seed2.jsonl")
        b = lines(tmp_path / "res" / "approx-error_seed2.jsonl")
        assert len(a) == len(b)
        for ra, rb in zip(a, b):
            for k, v in ra.items():
                assert rb[k] == pytest.approx(v, abs=1e-12, rel=0) if v is not None else rb[k] is None

    def test_resume_from_step_zero(self, tmp_path):
        cfg = write(tmp_path, ckpt="0")
        assert cli.main(["run", str(cfg)]) == 0
        assert cli.main(["resume", str(tmp_path / "out" / "ckpt_seed1_step0.tlck"), str(cfg), "--output",
                         str(tmp_path / "res")]) == 0
        assert lines(tmp_path / "out" / "approx-error_seed1.jsonl") == lines(tmp_path / "res" / "approx-error_seed1.jsonl")

    def test_resume_width_mismatch(self, tmp_path):
        cfg = write(tmp_path)
        assert cli.main(["run", str(cfg)]) == 0
        other = write(tmp_path, hidden="9", out=tmp_path / "o2")
        assert cli.main(["resume", str(tmp_path / "out" / "ckpt_seed1_step10.tlck"), str(other)]) == cli.EXIT_CONFIG

    def test_invariant_breach_exits_nonzero(self, tmp_path):
        cfg = write(tmp_path, extra="")
        cfg.write_text(cfg.read_text().replace("smoother = true", "smoother = true\ninvariant_tol = 1e-300"))
        assert cli.main(["run", str(cfg)]) == cli.EXIT_INVARIANT

    def test_budget_refusal(self, tmp_path):
        cfg = write(tmp_path)
        cfg.write_text(cfg.read_text().replace("smoother = true", "smoother = true\nsmoother_budget = 10"))
        assert cli.main(["run", str(cfg)]) == cli.EXIT_BUDGET

    def test_missing_data(self, tmp_path):
        path = tmp_path / "g.ini"
        path.write_text(f"[experiment]\nname = gbt-compare\noutput = {tmp_path}\n"
                        f"[dataset]\nname = csv\npath = {tmp_path / 'nope.csv'}\ntarget = y\n")
        assert cli.main(["run", str(path)]) == cli.EXIT_DATA

    def test_double_descent_schema(self, tmp_path):
        cfg = write(tmp_path, name="double-descent", ckpt="")
        cfg.write_text(cfg.read_text() + "\n[sweep]\nwidths = 1, 3, 6\n")
        assert cli.main(["run", str(cfg)]) == 0
        rows = list(csv.DictReader(open(tmp_path / "out" / "double-descent_summary.csv")))
        assert [int(r["width"]) for r in rows] == [1, 3, 6]
        for col in ("test_err_mean", "test_err_stderr", "p_train_mean", "p_test_mean", "train_loss_mean"):
            assert col in rows[0]

    def test_double_descent_resume_mid_sweep(self, tmp_path):
        cfg = write(tmp_path, name="double-descent", ckpt="10")
        cfg.write_text(cfg.read_text() + "\n[sweep]\nwidths = 2, 4\n")
        assert cli.main(["run", str(cfg)]) == 0
        ckpt = tmp_path / "out" / "ckpt_seed1_w4_step10.tlck"
        assert cli.main(["resume", str(ckpt), str(cfg), "--output", str(tmp_path / "res")]) == 0
        a = lines(tmp_path / "out" / "double-descent_seed1.jsonl")
        b = lines(tmp_path / "res" / "double-descent_seed1.jsonl")
        assert a == b

    def test_lmc_and_gbt_small(self, tmp_path):
        lmc = tmp_path / "l.ini"
        lmc.write_text(f"[experiment]\nname = lmc\nseeds = 0\noutput = {tmp_path / 'l'}\n"
                       "[dataset]\nname = mnist1d\nn_train = 40\nn_test = 20\n"
                       "[arch]\nhidden = 8\noutput_activation = sigmoid\n"
                       "[optim]\nkind = momentum\ngamma = 0.1\n[training]\nsteps = 12\nbatch_size = 10\nloss = bce\n"
                       "[tracking]\nenabled = false\n[lmc]\nspawn_steps = 0, 4\nn_alpha = 5\n")
        assert cli.main(["run", str(lmc)]) == 0
        recs = lines(tmp_path / "l" / "lmc_seed0.jsonl")
        assert [r["spawn_step"] for r in recs] == [0, 4] and all(r["barrier"] >= -1e-12 for r in recs)
        assert (tmp_path / "l" / "lmc_barrier_seed0.csv").exists()
        gbt = tmp_path / "g.ini"
        gbt.write_text(f"[experiment]\nname = gbt-compare\nseeds = 0\noutput = {tmp_path / 'g'}\n"
                       "[dataset]\nname = heavy-tailed\nn_train = 200\n[arch]\nhidden = 8\n"
                       "[optim]\nkind = adamw\n[training]\nsteps = 20\nbatch_size = 50\n[tracking]\nenabled = false\n"
                       "[gbt]\nstages = 5\nn_samples = 1000\ntest_size = 60\nnorm_every = 10\n")
        assert cli.main(["run", str(gbt)]) == 0
        recs = lines(tmp_path / "g" / "gbt-compare_seed0.jsonl")
        assert [r["mixture"] for r in recs] == [0.0, 0.1, 0.25, 0.5] and recs[0]["relative_mse"] == 1.0

    def test_resume_unsupported(self, tmp_path):
        cfg = write(tmp_path)
        assert cli.main(["run", str(cfg)]) == 0
        lmc = write(tmp_path, name="lmc", out=tmp_path / "l2")
        assert cli.main(["resume", str(tmp_path / "out" / "ckpt_seed1_step10.tlck"), str(lmc)]) == cli.EXIT_CONFIG
