"""CLI contract: flags, config-file precedence, exit codes, HTTP dispatch."""

import json

import pytest
from fastapi.testclient import TestClient

from fewseg.cli import main
from fewseg.service.app import create_app


def run_cli(capsys, argv):
    code = main(argv)
    out = capsys.readouterr().out
    return code, (json.loads(out) if out.strip() else None)


def test_params_prints_count_in_band(capsys):
    code, body = run_cli(capsys, ["params"])
    assert code == 0
    assert 3e5 <= body["count"] <= 9e5


def test_unknown_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as err:
        main(["params", "--bogus-flag"])
    assert err.value.code == 1


def test_missing_subcommand_is_usage_error():
    with pytest.raises(SystemExit) as err:
        main([])
    assert err.value.code == 1


def test_invalid_lr_is_usage_error(capsys, tiny_store_dir):
    code = main(["train", "--manifest", str(tiny_store_dir / "manifest.json"),
                 "--out", "unused", "--lr", "-0.5"])
    assert code == 1


def test_missing_manifest_is_data_error(capsys, tmp_path):
    code = main(["eval", "--manifest", str(tmp_path / "none.json"), "--out", str(tmp_path)])
    assert code == 2


def test_config_file_flags_win(capsys, tmp_path):
    cfg_file = tmp_path / "cfg.json"
    cfg_file.write_text(json.dumps({"d": 48, "gn_groups": 4, "use_text": True}))
    code, from_file = run_cli(capsys, ["params", "--config", str(cfg_file)])
    assert code == 0
    code, overridden = run_cli(capsys, ["params", "--config", str(cfg_file), "--d", "96"])
    assert code == 0
    assert overridden["count"] > from_file["count"]


def test_train_eval_roundtrip_matches_fresh_init(capsys, tiny_store_dir, tmp_path):
    """`train --iterations 0` then eval == eval on a fresh init, same seed."""
    manifest = str(tiny_store_dir / "manifest.json")
    base = ["--manifest", manifest, "--dataset-style", "synthetic", "--fold", "0",
            "--seed", "21", "--d", "8", "--gn-groups", "2", "--num-dscm", "1",
            "--dscm-repeats", "1", "--m", "12"]
    code, train_out = run_cli(capsys, ["train", "--out", str(tmp_path / "t0"),
                                       "--iterations", "0", *base])
    assert code == 0
    code, eval_ckpt = run_cli(capsys, ["eval", "--out", str(tmp_path / "e1"),
                                       "--checkpoint", train_out["checkpoint"],
                                       "--episodes", "2", *base])
    assert code == 0
    code, eval_fresh = run_cli(capsys, ["eval", "--out", str(tmp_path / "e2"),
                                        "--episodes", "2", *base])
    assert code == 0
    assert eval_ckpt["miou"] == eval_fresh["miou"]
    csv1 = (tmp_path / "e1" / "results.csv").read_text()
    csv2 = (tmp_path / "e2" / "results.csv").read_text()
    assert [l for l in csv1.splitlines() if l.startswith("class_iou") or l.startswith("fold_miou")] == \
           [l for l in csv2.splitlines() if l.startswith("class_iou") or l.startswith("fold_miou")]


def test_http_dispatch_via_in_process_transport(capsys, tmp_path):
    # TestClient's transport is a synchronous httpx transport over the ASGI app.
    transport = TestClient(create_app())._transport

    code = main(["params", "--server", "http://service"], transport=transport)
    out = capsys.readouterr().out
    assert code == 0
    assert 3e5 <= json.loads(out)["count"] <= 9e5

    code = main(["synth", "--server", "http://service", "--out", str(tmp_path / "s"),
                 "--n-classes", "4", "--images-per-class", "1", "--seed", "1"],
                transport=transport)
    out = capsys.readouterr().out
    assert code == 0
    assert json.loads(out)["records"] == 4

    with pytest.raises(SystemExit) as err:
        main(["params", "--server", "http://service", "--d", "7", "--gn-groups", "2"],
             transport=transport)
    assert err.value.code == 1  # 400 from the service maps to usage exit
