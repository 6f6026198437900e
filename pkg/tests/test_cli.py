import csv
import fcntl
import io
import json

import pytest

from afforddex import cli


def run(argv, capsys, env=None):
    code = cli.main(argv, env=env or {})
    out = capsys.readouterr()
    return code, out.out, out.err


def write_cfg(tmp_path, doc):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(doc))
    return str(p)


def test_unknown_top_level_key_exits_2_and_names_it(tmp_path, capsys):
    code, _, err = run(["gen-data", "--config", write_cfg(tmp_path, {"sede": 1}), "--out", str(tmp_path)], capsys)
    assert code == 2 and "'sede'" in err


def test_unknown_nested_key_is_reported_with_its_path(tmp_path, capsys):
    code, _, err = run(["gen-data", "--config", write_cfg(tmp_path, {"optim": {"lamdas": [1]}})], capsys)
    assert code == 2 and "optim.lamdas" in err


def test_invalid_value_exits_2(tmp_path, capsys):
    code, _, err = run(["gen-data", "--config", write_cfg(tmp_path, {"optim": {"iterations": 0}})], capsys)
    assert code == 2 and "optim" in err


def test_bad_flag_value_exits_2(capsys):
    assert run(["sample", "--provider", "carrier-pigeon"], capsys)[0] == 2


def test_http_provider_without_endpoint_exits_2(tmp_path, capsys):
    code, _, err = run(["sample", "--provider", "http", "--out", str(tmp_path)], capsys)
    assert code == 2 and "endpoint" in err


@pytest.mark.parametrize("stage", ["build-affordance", "train-afm", "train-gfm", "sample", "refine", "evaluate"])
def test_missing_inputs_exit_1_with_stage_tag(stage, tmp_path, capsys):
    code, _, err = run([stage, "--out", str(tmp_path)], capsys)
    assert code == 1 and f"[{stage}]" in err


def test_flags_and_env_override_the_config(tmp_path):
    args = cli.build_parser().parse_args(["sample", "--config", write_cfg(tmp_path, {"seed": 3, "optim": {"iterations": 7}}), "--steps-afm", "4", "--steps-gfm", "6", "--iters", "9", "--report", "csv"])
    cfg = cli.resolve_config(args, env={"GUIDANCE_ENDPOINT": "http://x/v1/chat/completions", "AFFORDDEX_OUT": str(tmp_path / "o")})
    assert (cfg.sampler.afm_steps, cfg.sampler.gfm_steps, cfg.optim.iterations, cfg.report) == (4, 6, 9, "csv")
    assert cfg.endpoint == "http://x/v1/chat/completions" and cfg.out == str(tmp_path / "o")
    assert cfg.afm.seed == cfg.gfm.seed == cfg.data.seed == 3


def test_explicit_sub_seed_is_kept():
    cfg = cli.config_from_dict({"seed": 5, "afm": {"seed": 1}})
    assert cfg.afm.seed == 1 and cfg.gfm.seed == 5


def test_config_round_trip_and_defaults():
    cfg = cli.PipelineConfig()
    back = cli.config_from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back.to_dict() == cfg.to_dict()
    assert (cfg.afm.epochs, cfg.gfm.epochs, cfg.sampler.afm_steps, cfg.sampler.gfm_steps) == (50, 200, 10, 20)
    assert cfg.samples_per_group == 8 and cfg.optim.iterations == 200


def test_schema_lists_every_key(capsys):
    code, out, _ = run(["schema"], capsys)
    schema = json.loads(out)
    assert code == 0
    assert set(schema["properties"]) == set(cli.PipelineConfig().to_dict())
    assert schema["properties"]["optim"]["properties"]["iterations"]["default"] == 200


class FakeResponse(io.BytesIO):
    def __enter__(self):
        return self

    def __exit__(self, *a):
        return False


def fake_opener(content):
    calls = []

    def opener(req, timeout):
        calls.append(json.loads(req.data))
        if isinstance(content, Exception):
            raise content
        return FakeResponse(json.dumps({"choices": [{"message": {"content": content}}]}).encode())

    return opener, calls


RECORD = {"category": "mug", "intention": "use", "part": "handle", "direction": "up"}


def test_http_provider_parses_the_final_line():
    reply = "The object is a mug.\nUse means the handle.\ncategory=mug; intention=use; part=handle; direction=left"
    opener, calls = fake_opener(reply)
    p = cli.HttpProvider("http://x", "k", "m", opener=opener)
    g, src = p.guidance(RECORD, ["body", "handle"])
    assert src == "http" and g == {**RECORD, "direction": "left"}
    assert calls[0]["model"] == "m" and calls[0]["messages"][0]["role"] == "system"


@pytest.mark.parametrize("reply", ["no idea", "category=mug; intention=use; part=lid; direction=up", "category=mug; intention=use; part=handle; direction=sideways", OSError("down")])
def test_http_provider_falls_back_with_a_warning(reply, caplog):
    opener, _ = fake_opener(reply)
    p = cli.HttpProvider("http://x", None, "m", opener=opener)
    with caplog.at_level("WARNING"):
        g, src = p.guidance(RECORD, ["body", "handle"])
    assert src == "structured-fallback" and g == RECORD
    assert "structured" in caplog.text


def test_report_writer_formats(tmp_path):
    rows = [
        {"variant": v, "stage": "sampled", "split": "test_unseen", "n_grasps": 8, "CD": 0.01, "Top1": "n/a", "Top2": "n/a", "Top3": "n/a",
         "Q1": 0.1, "Pen": 0.2, "delta_t": 1.0, "delta_r": 2.0, "delta_q": 3.0, "Suc": 0.5, "FID": "n/a", "pair": "test_unseen/sampled"}
        for v in ("affordance", "language")
    ]
    cli.evaluate_report(rows, tmp_path, "both")
    doc = json.loads((tmp_path / "report.json").read_text())
    assert doc["format"] == "afforddex-report" and doc["rows"][0]["FID"] == "n/a"
    table = list(csv.DictReader((tmp_path / "report.csv").open()))
    assert [r["variant"] for r in table] == ["affordance", "language"]
    assert table[0]["pair"] == table[1]["pair"]
    for col in ("CD", "Top1", "Top2", "Top3", "Q1", "Pen", "delta_t", "delta_r", "delta_q", "Suc", "FID"):
        assert col in table[0]


def test_report_format_selection(tmp_path):
    cli.evaluate_report([], tmp_path / "j", "json")
    cli.evaluate_report([], tmp_path / "c", "csv")
    assert (tmp_path / "j" / "report.json").exists() and not (tmp_path / "j" / "report.csv").exists()
    assert (tmp_path / "c" / "report.csv").exists() and not (tmp_path / "c" / "report.json").exists()


def test_dataset_lock_blocks_a_concurrent_writer(tmp_path):
    d = tmp_path / "dataset"
    d.mkdir()
    with open(d / ".lock", "a+") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        with pytest.raises(cli.StageError, match=r"\[gen-data\].*locked"):
            with cli.dataset_lock(d, "gen-data", exclusive=True):
                pass
        fcntl.flock(fh, fcntl.LOCK_UN)
    with cli.dataset_lock(d, "gen-data", exclusive=True):
        pass


def test_log_records_are_json(tmp_path):
    with cli.command_log(tmp_path, "x"):
        cli._event("x", "hello", n=1)
    rec = json.loads((tmp_path / "logs" / "x.jsonl").read_text().splitlines()[0])
    assert rec["msg"] == "hello" and rec["stage"] == "x" and rec["n"] == 1 and "ts" in rec
