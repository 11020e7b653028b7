import json

import pytest

from functions.gen_data.app import handler as gen_data
from functions.generate.app import handler as generate
from functions.router import EXIT_CODES, cli_main
from functions.sweep.app import handler as sweep
from functions.train_branch.app import handler as train_branch
from functions.train_controlnet.app import handler as train_controlnet
from latent_bridge.config import dump_config
from latent_bridge.reports import DISCLOSURE, read_report
from scripts.clean_run import clean_run
from scripts.run_pipeline import DEFAULT_DEFINITION, run_state_machine


@pytest.fixture
def tiny_file(tmp_path, make_config):
    path = tmp_path / "tiny.yaml"
    dump_config(make_config(), str(path))
    return str(path)


def _ok(body):
    return {"statusCode": 200, "body": json.dumps(body)}


def _body(result):
    return json.loads(result["body"])


def test_exit_codes():
    assert EXIT_CODES == {200: 0, 400: 2, 404: 1, 500: 1}


@pytest.mark.parametrize("argv", [["nope"], ["sweep"], ["gen-data", "--set", "missing_equals"], ["gen-data", "--n", "x"]])
def test_bad_flags_exit_two(argv):
    assert cli_main(argv) == 2


def test_gen_data_is_reproducible(tmp_path, tiny_file):
    first = gen_data({"out": str(tmp_path / "a"), "config": tiny_file, "seed": 7, "n": 100}, None)
    second = gen_data({"out": str(tmp_path / "b"), "config": tiny_file, "seed": 7, "n": 100}, None)
    other = gen_data({"out": str(tmp_path / "c"), "config": tiny_file, "seed": 8, "n": 100}, None)
    assert first["statusCode"] == 200
    assert _body(first)["checksum"] == _body(second)["checksum"]
    assert _body(first)["checksum"] != _body(other)["checksum"]
    assert (tmp_path / "a" / "config.yaml").exists()


def test_gen_data_cli(tmp_path, tiny_file):
    assert cli_main(["gen-data", "--config", tiny_file, "--out", str(tmp_path), "--seed", "7", "--n", "8"]) == 0
    assert cli_main(["gen-data", "--config", tiny_file, "--out", str(tmp_path), "--n", "0"]) == 2


def test_missing_checkpoint_is_not_found(tmp_path, tiny_file):
    out = str(tmp_path)
    gen_data({"out": out, "config": tiny_file}, None)
    result = train_branch({"out": out, "config": tiny_file}, None)
    assert result["statusCode"] == 404
    assert "pretrain" in _body(result)["error"]
    assert cli_main(["train-branch", "--config", tiny_file, "--out", out]) == 1


def test_bad_input_is_rejected(tmp_path, tiny_file):
    assert generate({"out": str(tmp_path), "config": tiny_file, "scale": -1.0}, None)["statusCode"] == 400
    assert sweep({"out": str(tmp_path), "config": tiny_file, "kind": "everything"}, None)["statusCode"] == 400
    assert train_controlnet({"out": str(tmp_path), "config": tiny_file, "token_count": 1}, None)["statusCode"] == 400
    bad = gen_data({"out": str(tmp_path), "config": tiny_file, "overrides": {"dims.patch_size": 5}}, None)
    assert bad["statusCode"] == 400


def test_state_machine_success_path():
    definition = json.loads(DEFAULT_DEFINITION.read_text())
    seen = []

    def fake(name):
        def handler(event, context):
            seen.append(name)
            return _ok({"stage": name})
        return handler

    stages = ["gen-data", "pretrain", "train-branch", "train-cn", "generate", "eval"]
    outcome = run_state_machine(definition, {"out": "unused"}, {s: fake(s) for s in stages})
    assert outcome["status"] == "SUCCEEDED"
    assert seen == stages
    assert outcome["data"]["evalResult"] == {"stage": "eval"}
    assert all(step["ok"] for step in outcome["trace"])


def test_state_machine_routes_failures():
    definition = json.loads(DEFAULT_DEFINITION.read_text())
    handlers = {s: (lambda e, c: _ok({})) for s in ["gen-data", "train-branch", "train-cn", "generate", "eval"]}
    handlers["pretrain"] = lambda e, c: {"statusCode": 404, "body": json.dumps({"error": "no data"})}
    outcome = run_state_machine(definition, {}, handlers)
    assert outcome["status"] == "FAILED"
    assert outcome["state"] == "PipelineFailed"
    assert outcome["error"] == "PipelineError"
    assert [s["state"] for s in outcome["trace"]] == ["GenerateData", "PretrainBackbone"]
    assert "no data" in outcome["data"]["error"]["error"]


def test_state_machine_rejects_unknown_stage():
    definition = {"StartAt": "A", "States": {"A": {"Type": "Task", "Resource": "nope", "End": True}}}
    with pytest.raises(ValueError):
        run_state_machine(definition, {}, {})


def test_pipeline_end_to_end_then_sweep(tmp_path, tiny_file):
    out = tmp_path / "run"
    definition = json.loads(DEFAULT_DEFINITION.read_text())
    outcome = run_state_machine(definition, {"out": str(out), "config": tiny_file})
    assert outcome["status"] == "SUCCEEDED", outcome
    assert (out / "checkpoints" / "controlnet.pt").exists()
    assert len(list((out / "generated" / "images").glob("*.ppm"))) == 4
    assert outcome["data"]["evalResult"]["all_finite"]

    argv = ["sweep", "--config", tiny_file, "--out", str(out), "--kind", "decode-steps", "--steps", "1,4,16"]
    assert cli_main(argv) == 0
    report = out / "reports" / "sweep_decode_steps.csv"
    assert report.read_text().splitlines()[0] == DISCLOSURE
    rows = read_report(report)
    assert [r.key for r in rows] == ["1", "4", "16"]
    trends = json.loads((out / "reports" / "trends.json").read_text())
    assert trends["variants_ordering"] is None


def test_clean_run(tmp_path):
    stranger = tmp_path / "home"
    stranger.mkdir()
    (stranger / "notes.txt").write_text("keep me")
    assert not clean_run(str(stranger))
    assert (stranger / "notes.txt").exists()

    run = tmp_path / "run"
    (run / "checkpoints").mkdir(parents=True)
    assert clean_run(str(run), dry_run=True)
    assert run.exists()
    assert clean_run(str(run))
    assert not run.exists()
    assert clean_run(str(tmp_path / "absent"))
