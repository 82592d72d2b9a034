import numpy as np
import pytest

from neurosdp import bell, cli, csvio, neural, oracle

FAST_TRAIN = ["--rounds", "3", "--samples-per-round", "300", "--calibration-samples", "10000",
              "--chains", "10"]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def models(tmp_path_factory):
    d = tmp_path_factory.mktemp("models")
    assert run("train", "--level", "q1", "--mode", "primal", *FAST_TRAIN, "--out", d / "p.json") == 0
    assert run("train", "--level", "q1", "--mode", "dual", *FAST_TRAIN, "--out", d / "d.json") == 0
    return d


class TestSample:
    def test_isotropic_pr_box(self, tmp_path):
        out = tmp_path / "pr.csv"
        assert run("sample", "--sampler", "isotropic", "--q", 1, "--n", 1, "--out", out) == 0
        assert out.read_text().startswith(csvio.SCHEMA + "\n")
        p = csvio.read_behaviors(out)
        assert np.array_equal(p, [bell.pr_box().probs])

    def test_hitrun(self, tmp_path):
        out = tmp_path / "hr.csv"
        assert run("sample", "--sampler", "hitrun", "--n", 100, "--chains", 10, "--out", out) == 0
        p = csvio.read_behaviors(out)
        assert p.shape == (100, 16)
        assert np.all(bell.chsh_value(p) >= 2 - 1e-10)

    def test_round_trip_precision(self, tmp_path):
        p = bell.Sampler("quantum", 3).draw(20)
        csvio.write_behaviors(tmp_path / "q.csv", p)
        assert np.array_equal(csvio.read_behaviors(tmp_path / "q.csv"), p)

    def test_same_seed_same_bytes(self, tmp_path):
        for name in ("a", "b"):
            run("sample", "--sampler", "vertex", "--n", 50, "--seed", 8, "--out", tmp_path / f"{name}.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_usage_errors(self, tmp_path):
        with pytest.raises(SystemExit) as e:
            run("sample", "--sampler", "grid", "--n", 5, "--out", tmp_path / "x.csv")
        assert e.value.code == 2
        with pytest.raises(SystemExit) as e:
            run("sample", "--sampler", "isotropic", "--n", 5, "--out", tmp_path / "x.csv")
        assert e.value.code == 2

    def test_unwritable(self, tmp_path):
        assert run("sample", "--sampler", "vertex", "--n", 5, "--out", tmp_path / "no" / "x.csv") == 3


class TestTrain:
    def test_defaults_are_paper_values(self):
        args = cli.build_parser().parse_args(["train", "--level", "q2", "--mode", "primal", "--out", "x"])
        cfg = cli.train_config(args)
        assert (cfg.rounds, cfg.samples_per_round, cfg.lr0, cfg.momentum, cfg.lr_decay,
                cfg.decay_start_round, cfg.sampler) == (800, 10_000, 0.005, 0.8, 0.99, 200, "hitrun")
        args = cli.build_parser().parse_args(["train", "--level", "q2", "--mode", "dual", "--out", "x"])
        cfg = cli.train_config(args)
        assert (cfg.lr0, cfg.delta, cfg.activity_l2, cfg.sampler) == (1e-4, 3e-7, 1e-6, "vertex")

    def test_writes_model_and_trace(self, models):
        header, rows = csvio.read_table(models / "p.loss.csv")
        assert header == ["round", "mean_loss"] and len(rows) == 3
        model = neural.ModelFile.load(models / "p.json")
        assert model.level == "Q1" and model.mode == "primal"

    def test_no_norm_constraint(self, tmp_path):
        out = tmp_path / "d.json"
        assert run("train", "--level", "q1", "--mode", "dual", "--dual-basis", "moment",
                   "--no-norm-constraint", *FAST_TRAIN, "--out", out) == 0
        model = neural.ModelFile.load(out)
        assert model.mlp.sizes[-1] == 8 and not model.norm_constraint

    def test_bad_level(self):
        with pytest.raises(SystemExit) as e:
            run("train", "--level", "q7", "--mode", "primal", "--out", "x")
        assert e.value.code == 2

    def test_divergence_exit_code(self, tmp_path):
        assert run("train", "--level", "q1", "--mode", "primal", "--lr0", 50, *FAST_TRAIN,
                   "--out", tmp_path / "x.json") == 4


class TestEval:
    def test_primal_only(self, models, tmp_path):
        inp, out = tmp_path / "in.csv", tmp_path / "out.csv"
        run("sample", "--sampler", "vertex", "--n", 30, "--out", inp)
        assert run("eval", "--primal-model", models / "p.json", "--input", inp, "--out", out) == 0
        header, rows = csvio.read_table(out)
        assert header == ["id", "lambda_min_primal", "lambda_min_dual", "verdict"]
        assert len(rows) == 30 and all(r[2] == "" for r in rows)
        assert "summary n=30" in out.read_text().splitlines()[-1]

    def test_matches_verdict(self, models, tmp_path):
        inp, out = tmp_path / "in.csv", tmp_path / "out.csv"
        run("sample", "--sampler", "vertex", "--n", 40, "--seed", 2, "--out", inp)
        run("eval", "--primal-model", models / "p.json", "--dual-model", models / "d.json",
            "--input", inp, "--out", out)
        _, rows = csvio.read_table(out)
        p = neural.ModelFile.load(models / "p.json")
        d = neural.ModelFile.load(models / "d.json")
        for row, b in zip(rows, csvio.read_behaviors(inp)):
            v = oracle.verdict(p, d, b)
            assert row[3] == v.tag
            assert float(row[1]) == pytest.approx(v.lambda_primal, abs=1e-12)

    def test_level_mismatch(self, models, tmp_path):
        inp = tmp_path / "in.csv"
        run("sample", "--sampler", "vertex", "--n", 3, "--out", inp)
        with pytest.raises(SystemExit) as e:
            run("eval", "--primal-model", models / "p.json", "--level", "q2", "--input", inp,
                "--out", tmp_path / "o.csv")
        assert e.value.code == 2

    def test_bad_input(self, models, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text(csvio.SCHEMA + "\n" + ",".join(bell.COLUMNS) + "\n" + ",".join(["0.3"] * 16) + "\n")
        assert run("eval", "--primal-model", models / "p.json", "--input", bad,
                   "--out", tmp_path / "o.csv") == 3


class TestScanAndOracle:
    def test_scan(self, models, tmp_path):
        out = tmp_path / "scan.csv"
        assert run("scan", "--level", "q1", "--steps", 11, "--primal-model", models / "p.json",
                   "--out", out) == 0
        header, rows = csvio.read_table(out)
        assert header == ["q", "nn_primal_lambda_min", "nn_dual_lambda_min", "oracle_t_star"]
        q = np.array([float(r[0]) for r in rows])
        t = np.array([float(r[3]) for r in rows])
        assert q[0] == 0.5 and q[-1] == 1.0 and len(q) == 11
        assert t[0] > 0 and np.all(np.diff(t) <= 1e-9)
        assert all(r[2] == "" for r in rows)

    def test_scan_range_error(self, tmp_path):
        with pytest.raises(SystemExit) as e:
            run("scan", "--level", "q1", "--from", 0.9, "--to", 0.5, "--out", tmp_path / "s.csv")
        assert e.value.code == 2

    def test_oracle(self, tmp_path):
        out = tmp_path / "o.csv"
        assert run("oracle", "--level", "q1ab", "--q", 0.5, 1.0, "--out", out) == 0
        header, rows = csvio.read_table(out)
        assert header == ["q_or_id", "level", "t_star", "iterations", "converged"]
        assert float(rows[0][2]) > 0 > float(rows[1][2])
        assert rows[0][1] == "Q1AB" and rows[0][4] == "true"

    def test_workers_env_cap(self, monkeypatch):
        monkeypatch.setenv("NEUROSDP_THREADS", "2")
        assert cli.workers(8) == 2
        monkeypatch.delenv("NEUROSDP_THREADS")
        assert cli.workers(3) == 3


class TestBenchAndLayout:
    def test_bench_rejects_small_n(self, models):
        with pytest.raises(SystemExit) as e:
            run("bench", "--model", models / "p.json", "--n", 50)
        assert e.value.code == 2

    def test_bench_report(self, models, tmp_path, capsys):
        out = tmp_path / "bench.csv"
        assert run("bench", "--model", models / "p.json", "--n", 100, "--chains", 10, "--out", out) == 0
        header, rows = csvio.read_table(out)
        assert header[-1] == "ratio" and float(rows[0][-1]) > 0
        assert "ratio" in capsys.readouterr().out

    def test_layout(self, capsys):
        assert run("layout", "--level", "q1") == 0
        text = capsys.readouterr().out
        assert text.splitlines()[0] == "# level Q1"
