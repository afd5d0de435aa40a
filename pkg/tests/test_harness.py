import json
import os

import pytest

from ktpt import cli
from ktpt.data import GeneratorConfig
from ktpt.harness import (
    HEADER,
    ExperimentConfig,
    ResultRow,
    clear_cache,
    emit_report,
    parse_report_csv,
    reproduce_table_1,
    reproduce_table_3,
    run_tables,
    summarize,
)
from ktpt.train import SgdConfig

TINY_DATA = GeneratorConfig(n_train=16, n_cv=6, n_test=6, min_length=5, max_length=9)


def tiny_config(**kw):
    base = dict(
        data=TINY_DATA, seeds=[0, 1], lstm_hidden=4, lstm_layers=[1, 2], teacher_sizes=[8, 8],
        weak_teacher_sizes=[6], mlp_student_sizes=[5, 5, 5],
        teacher_sgd=SgdConfig(0.5, batch_size=64, max_epochs=2),
        lstm_sgd=SgdConfig(0.1, batch_size=8, max_epochs=1),
        mlp_sgd=SgdConfig(0.3, batch_size=64, max_epochs=1),
        diagnostic_sequences=3,
    )
    base.update(kw)
    return ExperimentConfig(**base)


def row(system="raw", seed=0, err=0.2, t=None, spec="1"):
    return ResultRow(system, spec, t, 0.7, 0.6, err, seed, 1.5)


@pytest.fixture(scope="module")
def table1():
    return reproduce_table_1(tiny_config())


class TestConfig:
    def test_round_trip(self):
        cfg = tiny_config()
        assert ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg

    def test_unknown_keys(self):
        with pytest.raises(ValueError, match="unknown"):
            ExperimentConfig.from_dict({"lstm_sizes": [3]})
        with pytest.raises(ValueError, match="lstm_sgd"):
            ExperimentConfig.from_dict({"lstm_sgd": {"lr": 0.1}})

    def test_partial_nested_keeps_experiment_defaults(self):
        cfg = ExperimentConfig.from_dict({"lstm_sgd": {"batch_size": 16}})
        assert cfg.lstm_sgd.batch_size == 16
        assert cfg.lstm_sgd.learning_rate == ExperimentConfig().lstm_sgd.learning_rate

    def test_empty_seeds(self):
        with pytest.raises(ValueError):
            tiny_config(seeds=[]).validate()

    def test_missing_data_dir(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="gen-data"):
            tiny_config(data_dir=str(tmp_path)).validate()


class TestResultRow:
    def test_fraction_invariant(self):
        with pytest.raises(ValueError):
            ResultRow("raw", "1", None, 1.2, 0.5, 0.1, 0)


class TestTables:
    def test_table1_schema(self, table1):
        cfg = tiny_config()
        assert len(table1) == len(cfg.seeds) * len(cfg.lstm_layers) * 5 + len(cfg.seeds)
        assert {r.system for r in table1} == {"teacher", "raw", "prt.", "prt.+ft."}
        for layers in ("1", "2"):
            for seed in cfg.seeds:
                got = sorted((r.system, r.temperature) for r in table1 if r.spec == layers and r.seed == seed)
                assert got == sorted([("raw", None), ("prt.", 1.0), ("prt.+ft.", 1.0),
                                      ("prt.", 2.0), ("prt.+ft.", 2.0)])

    def test_rows_sorted(self, table1):
        assert table1 == sorted(table1, key=ResultRow.sort_key)

    def test_worker_independence(self, table1):
        clear_cache()
        again = run_tables(tiny_config(seeds=[1, 0]), [1])[1]
        strip = [r.__class__(**{**r.__dict__, "seconds": 0.0}) for r in table1]
        assert [r.__class__(**{**r.__dict__, "seconds": 0.0}) for r in again] == strip

    def test_prt_rows_need_no_finetune_artifacts(self, tmp_path):
        cfg = tiny_config(seeds=[0], lstm_layers=[1], out_dir=str(tmp_path), save_models=True,
                          temperatures=[2.0])
        reproduce_table_1(cfg)
        files = sorted(p.name for p in (tmp_path / "arms" / "table1" / "seed0" / "lstm1").iterdir())
        assert files == ["prt+ft-T2.ktpt", "prt-T2.ktpt", "raw.ktpt"]

    def test_table3_every_strategy_once(self):
        rows = reproduce_table_3(tiny_config(seeds=[0]))
        systems = [r.system for r in rows]
        assert sorted(systems) == sorted(["teacher-strong", "teacher-weak", "raw", "rbm", "discriminative",
                                          "kt(strong)", "kt(weak)", "rbm+kt(strong)", "rbm+kt(weak)"])


class TestReport:
    def test_empty(self):
        with pytest.raises(ValueError):
            emit_report([])

    def test_csv_round_trip(self):
        rows = [row(seed=1), row(seed=0, err=0.25), row("prt.+ft.", t=2.0)]
        text = emit_report(rows)
        parsed = parse_report_csv(text)
        assert parsed[0] == ["raw", "1", "-", "70.0", "60.0", "25.0", "0"]
        assert len(parsed) == 3

    def test_header_and_no_timing_by_default(self):
        text = emit_report([row()])
        assert text.splitlines()[0] == ",".join(HEADER)
        assert "seconds" in emit_report([row()], timing=True).splitlines()[0]

    def test_markdown_headers(self):
        md = emit_report([row()], "markdown")
        assert md.splitlines()[0] == "| System | #LSTM/Spec | T | TR FA% | CV FA% | ER% |"
        assert "±" in md

    def test_summary(self):
        (entry,) = summarize([row(err=0.2), row(seed=1, err=0.3)])
        mean, sd = entry[4]["test_error_rate"]
        assert mean == pytest.approx(0.25) and sd == pytest.approx(0.0707106781, rel=1e-8)

    def test_one_decimal(self):
        assert ",12.3," in emit_report([row(err=0.12345)])


class TestCli:
    def test_gen_data_deterministic(self, tmp_path):
        for d in ("a", "b"):
            assert cli.main(["gen-data", "--seed", "7", "--out", str(tmp_path / d),
                             "--config", str(self.config_file(tmp_path))]) == 0
        for name in ("train.csv", "cv.csv", "test.csv", "dataset.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        assert json.loads((tmp_path / "a" / "dataset.json").read_text())["seed"] == 7

    def config_file(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(tiny_config().to_dict()))
        return path

    def test_missing_artifact_names_producer(self, tmp_path, capsys):
        code = cli.main(["distill", "--teacher", str(tmp_path / "nope.ktpt"), "--out", str(tmp_path)])
        err = capsys.readouterr().err
        assert code != 0 and "nope.ktpt" in err and "train-teacher" in err

    def test_missing_data_dir(self, tmp_path, capsys):
        code = cli.main(["evaluate", "--model", "x", "--data", str(tmp_path / "d")])
        assert code != 0 and "gen-data" in capsys.readouterr().err

    def test_pipeline(self, tmp_path, capsys):
        cfg = ["--config", str(self.config_file(tmp_path))]
        data = tmp_path / "data"
        assert cli.main(["gen-data", "--out", str(data), *cfg]) == 0
        common = [*cfg, "--data", str(data)]
        assert cli.main(["train-teacher", "--out", str(tmp_path / "t"), *common]) == 0
        assert cli.main(["distill", "--teacher", str(tmp_path / "t" / "teacher.ktpt"),
                         "--temperature", "2", "--out", str(tmp_path / "s"), *common]) == 0
        assert cli.main(["pretrain", "--student", "lstm:1x4", "--targets", str(tmp_path / "s" / "targets-T2.ktst"),
                         "--out", str(tmp_path / "p"), *common]) == 0
        assert cli.main(["finetune", "--model", str(tmp_path / "p" / "pretrained.ktpt"),
                         "--out", str(tmp_path / "f"), *common]) == 0
        capsys.readouterr()
        assert cli.main(["evaluate", "--model", str(tmp_path / "f" / "finetuned.ktpt"), *common]) == 0
        metrics = json.loads(capsys.readouterr().out)
        assert 0 <= metrics["test_error_rate"] <= 1
        assert cli.main(["diagnose-gradients", "--out", str(tmp_path / "g"), *common]) == 0
        lines = (tmp_path / "g" / "gradient-diagnostic.csv").read_text().splitlines()
        assert lines[0] == "temperature,variance,mean_norm,frames" and len(lines) == 4

    def test_untrained_model_is_at_chance(self, tmp_path, capsys):
        from ktpt.models import StackedLstm, save_model
        from ktpt.numerics import Pcg32

        save_model(StackedLstm.init(8, 4, 1, 10, Pcg32(3, 3)), tmp_path / "m.ktpt")
        assert cli.main(["evaluate", "--model", str(tmp_path / "m.ktpt")]) == 0
        err = json.loads(capsys.readouterr().out)["test_error_rate"]
        assert abs(err - 0.9) <= 0.05

    def test_kt_out_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("KTPT_OUT", str(tmp_path / "env"))
        assert cli.main(["gen-data", "--config", str(self.config_file(tmp_path))]) == 0
        assert (tmp_path / "env" / "train.csv").exists()

    def test_reproduce_markdown(self, tmp_path, capsys):
        code = cli.main(["reproduce-tables", "--table", "1", "--seed", "0", "--format", "markdown",
                         "--temperature", "1", "--config", str(self.config_file(tmp_path)),
                         "--out", str(tmp_path / "r")])
        assert code == 0
        text = (tmp_path / "r" / "table1.md").read_text()
        assert "prt.+ft." in text and os.path.exists(tmp_path / "r" / "table1.md")
