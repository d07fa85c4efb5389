import json

import pytest

from knse.cli import EXIT_CONFIG, EXIT_MISSING, EXIT_USAGE, main

TINY = {
    "generator": {"num_dialogues": 30, "catalog_size": 12, "seed": 5},
    "encoder": {"d": 8, "layers": 1, "heads": 1, "ff_mult": 2, "dropout": 0.0},
    "ser_encoder": {"d": 16, "layers": 1, "heads": 2, "dropout": 0.0},
    "ssr": {"prompt_prefix": 2, "prompt_suffix": 1},
    "train": {"epochs": 1, "batch_size": 32},
    "ser_train": {"epochs": 1, "batch_size": 32},
    "standardizer_augment": 1,
}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


def test_synth_is_deterministic(tmp_path, capsys):
    names = ("corpus.jsonl", "catalog.json", "knowledge.json", "manifest.json")
    files = []
    for _ in range(2):
        code, out, _ = run(capsys, "synth", "--seed", 7, "--num-dialogues", 20, "--out", tmp_path)
        assert code == 0 and json.loads(out) == {"dialogues": 20, "symptoms": 20}
        files.append({f: (tmp_path / f).read_bytes() for f in names})
    assert files[0] == files[1]
    run(capsys, "synth", "--seed", 8, "--num-dialogues", 20, "--out", tmp_path)
    assert (tmp_path / "corpus.jsonl").read_bytes() != files[0]["corpus.jsonl"]


def test_manifest_contents(tmp_path, capsys):
    run(capsys, "synth", "--seed", 3, "--num-dialogues", 5, "--out", tmp_path)
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert m["command"] == "synth"
    assert m["config"]["generator"]["seed"] == 3 and m["seeds"]["generator"] == 3
    assert set(m["outputs"]) == {"corpus.jsonl", "catalog.json", "knowledge.json"}
    assert all(len(v) == 64 for v in m["outputs"].values())
    assert {"torch", "config_hash", "summary"} <= set(m)


def test_flags_override_config(tmp_path, capsys, tiny_config):
    code, out, _ = run(capsys, "synth", "--config", tiny_config, "--num-dialogues", 4, "--out", tmp_path)
    assert code == 0 and json.loads(out)["dialogues"] == 4
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert m["config"]["generator"]["catalog_size"] == 12


def test_missing_file_exit_code(tmp_path, capsys):
    code, _, err = run(capsys, "windows", "--corpus", tmp_path / "nope.jsonl", "--out", tmp_path / "o")
    assert code == EXIT_MISSING
    assert json.loads(err)["error"] == "missing_file"
    code, _, _ = run(capsys, "synth", "--config", tmp_path / "nope.json", "--out", tmp_path / "o")
    assert code == EXIT_MISSING


def test_config_errors(tmp_path, capsys):
    code, _, err = run(capsys, "synth", "--num-dialogues", 0, "--out", tmp_path)
    assert code == EXIT_CONFIG and json.loads(err)["message"].startswith("generator")
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"encoder": {"depth": 2}}))
    code, _, err = run(capsys, "synth", "--config", bad, "--out", tmp_path)
    assert code == EXIT_CONFIG and "depth" in json.loads(err)["message"]
    bad.write_text("{not json")
    assert run(capsys, "synth", "--config", bad, "--out", tmp_path)[0] == EXIT_CONFIG
    code, _, _ = run(capsys, "windows", "--out", tmp_path)
    assert code == EXIT_CONFIG


def test_usage_errors(tmp_path, capsys):
    assert run(capsys, "synth", "--sed", 3)[0] == EXIT_USAGE
    assert run(capsys, "synth", "--se", 3)[0] == EXIT_USAGE
    assert run(capsys)[0] == EXIT_USAGE
    assert run(capsys, "frobnicate")[0] == EXIT_USAGE
    code, _, err = run(capsys, "split", "--ratios", "0.5,0.5", "--out", tmp_path)
    assert code == EXIT_USAGE and json.loads(err)["error"] == "usage"


def test_help_lists_commands(capsys):
    with pytest.raises(SystemExit) as info:
        main(["--help"])
    assert info.value.code == 0
    out = capsys.readouterr().out
    for cmd in ("synth", "windows", "split", "knowledge", "train-ser", "train-ssr", "predict", "evaluate", "ablate"):
        assert cmd in out


def test_windows_and_split(tmp_path, capsys, tiny_config):
    run(capsys, "synth", "--config", tiny_config, "--out", tmp_path / "d")
    code, out, _ = run(capsys, "windows", "--corpus", tmp_path / "d/corpus.jsonl", "--window", 3, "--out", tmp_path / "w")
    assert code == 0
    rows = [json.loads(x) for x in (tmp_path / "w/windows.jsonl").read_text().splitlines()]
    assert len(rows) == json.loads(out)["windows"] and all(len(r["utterances"]) <= 3 for r in rows)
    code, out, _ = run(capsys, "split", "--corpus", tmp_path / "d/corpus.jsonl", "--mode", "BySymptom",
                       "--out", tmp_path / "s")
    assert code == 0
    summary = json.loads((tmp_path / "s/split.json").read_text())
    assert 0 < sum(v["dialogues"] for v in summary.values()) <= 30
    assert not set(summary["train"]["symptoms"]) & set(summary["test"]["symptoms"])


def test_knowledge_static_provider(tmp_path, capsys, tiny_config):
    run(capsys, "synth", "--config", tiny_config, "--out", tmp_path / "d")
    catalog = json.loads((tmp_path / "d/catalog.json").read_text())
    name = sorted(catalog)[0]
    (tmp_path / "static.json").write_text(json.dumps({name: "A described symptom."}))
    code, out, _ = run(capsys, "knowledge", "--catalog", tmp_path / "d/catalog.json", "--static-file",
                       tmp_path / "static.json", "--out", tmp_path / "k")
    assert code == 0 and json.loads(out)["filled"] == 1
    assert json.loads((tmp_path / "k/knowledge.json").read_text()) == {name: "A described symptom."}
    code, _, _ = run(capsys, "knowledge", "--catalog", tmp_path / "d/catalog.json", "--provider", "http",
                     "--out", tmp_path / "k2")
    assert code == EXIT_CONFIG


@pytest.fixture
def trained(tmp_path_factory, tiny_config):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--config", str(tiny_config), "--out", str(root / "d")]) == 0
    assert main(["split", "--corpus", str(root / "d/corpus.jsonl"), "--out", str(root / "s")]) == 0
    data = ["--config", str(tiny_config), "--catalog", str(root / "d/catalog.json"),
            "--knowledge", str(root / "d/knowledge.json"), "--train", str(root / "s/train.jsonl"),
            "--dev", str(root / "s/dev.jsonl")]
    assert main(["train-ssr", *data, "--out", str(root / "ssr")]) == 0
    assert main(["train-ser", *data, "--out", str(root / "ser")]) == 0
    return root


def test_train_predict_evaluate(trained, capsys):
    root = trained
    assert (root / "ssr/train_log.jsonl").read_text().count("\n") == 1
    args = ["--corpus", root / "s/test.jsonl", "--ssr-checkpoint", root / "ssr/ssr"]
    code, _, _ = run(capsys, "predict", *args, "--ser-checkpoint", root / "ser/ser", "--out", root / "p")
    assert code == 0
    code, _, _ = run(capsys, "predict", *args, "--gold-symptoms", "--out", root / "pg")
    assert code == 0
    rows = [json.loads(x) for x in (root / "pg/predictions.jsonl").read_text().splitlines()]
    assert rows and all({"window", "dialogue", "pairs", "probabilities"} <= set(r) for r in rows)
    for level in ("window", "dialogue"):
        code, out, _ = run(capsys, "evaluate", "--corpus", root / "s/test.jsonl", "--predictions",
                           root / "pg/predictions.jsonl", "--level", level, "--out", root / "e")
        assert code == 0
        report = json.loads((root / f"e/metrics_{level}.json").read_text())
        assert report == json.loads(out) and report["level"] == level and 0 <= report["f1"] <= 1
    code, _, _ = run(capsys, "predict", *args, "--out", root / "px")
    assert code == EXIT_CONFIG


def test_retraining_is_bitwise_identical(trained, tiny_config, capsys):
    root = trained
    code, _, _ = run(capsys, "train-ssr", "--config", tiny_config, "--catalog", root / "d/catalog.json",
                     "--knowledge", root / "d/knowledge.json", "--train", root / "s/train.jsonl",
                     "--dev", root / "s/dev.jsonl", "--out", root / "ssr2")
    assert code == 0
    assert (root / "ssr/ssr/model.pt").read_bytes() == (root / "ssr2/ssr/model.pt").read_bytes()
    a = json.loads((root / "ssr/manifest.json").read_text())["outputs"]
    b = json.loads((root / "ssr2/manifest.json").read_text())["outputs"]
    assert a == b
