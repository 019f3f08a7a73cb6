import json
from pathlib import Path

import jsonschema
import pytest

from modpretrain import configs_path, plans_path
from modpretrain.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main

SCHEMAS = json.loads((Path(__file__).resolve().parents[1] / "docs" / "cli_schemas.json").read_text())


def check_schema(payload, command):
    jsonschema.validate(payload, {**SCHEMAS[command], "$defs": SCHEMAS["$defs"]})


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def run_json(capsys, command, *argv):
    code, out, err = run(capsys, command, "--json", *argv)
    assert code == EXIT_OK, err
    payload = json.loads(out)
    check_schema(payload, command)
    return payload


def small_config(tmp_path, name="bert", **hyper):
    raw = json.load(open(configs_path(name)))
    raw["hyper"] = {"hidden": 16, "layers": 1, "heads": 2, "dropout": 0.1, **hyper}
    path = tmp_path / f"{name}.json"
    path.write_text(json.dumps(raw))
    return path


def train_config(tmp_path, **values):
    path = tmp_path / "train.json"
    path.write_text(json.dumps({"lr": 3e-3, "total_steps": 12, "warmup_steps": 2, "batch_size": 8, **values}))
    return path


class TestValidate:
    def test_bundled_bert(self, capsys):
        payload = run_json(capsys, "validate", "--config", configs_path("bert"))
        assert payload["ok"] and payload["diagnostics"] == []

    def test_decoder_without_target_embedding(self, tmp_path, capsys):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"embedding": ["word", "pos"], "encoder": "transformer",
                                    "decoder": "transformer", "target": ["lm"]}))
        code, _, err = run(capsys, "validate", "--config", path)
        assert code == EXIT_CONFIG and "DEC_REQUIRES_TGT_EMB" in err

    def test_malformed_json_reports_line(self, tmp_path, capsys):
        path = tmp_path / "c.json"
        path.write_text('{\n "embedding": ["word"],\n "encoder": "transformer"\n "target": ["mlm"]\n}')
        code, _, err = run(capsys, "validate", "--config", path)
        assert code == EXIT_USAGE and "line 4" in err

    def test_missing_file(self, tmp_path, capsys):
        assert run(capsys, "validate", "--config", tmp_path / "nope.json")[0] == EXIT_USAGE


class TestInspect:
    def test_counting_oracle(self, capsys):
        payload = run_json(capsys, "inspect", "--config", configs_path("bert"))
        assert payload["total"] == 32006 and payload["tensors"] == 42
        assert sum(p["count"] for p in payload["params"]) == payload["total"]

    def test_checkpoint_matches_config(self, tmp_path, capsys):
        cfg = small_config(tmp_path)
        run(capsys, "pretrain", "--config", cfg, "--out", tmp_path / "m.ckpt", "--steps", 1)
        a = run_json(capsys, "inspect", "--config", cfg)
        b = run_json(capsys, "inspect", "--ckpt", tmp_path / "m.ckpt")
        assert a == b

    def test_no_flags(self, capsys):
        code, _, err = run(capsys, "inspect")
        assert code == EXIT_USAGE and "exactly one" in err

    def test_no_command(self, capsys):
        code, _, err = run(capsys)
        assert code == EXIT_USAGE and "usage" in err

    def test_unknown_flag(self, capsys):
        assert run(capsys, "inspect", "--bogus")[0] == EXIT_USAGE

    def test_unreadable_checkpoint(self, tmp_path, capsys):
        (tmp_path / "bad.ckpt").write_bytes(b"MPTC")
        assert run(capsys, "inspect", "--ckpt", tmp_path / "bad.ckpt")[0] == EXIT_USAGE


class TestPretrain:
    def test_metrics_stream(self, tmp_path, capsys):
        metrics = tmp_path / "m.ndjson"
        payload = run_json(capsys, "pretrain", "--config", small_config(tmp_path), "--train-config",
                           train_config(tmp_path), "--out", tmp_path / "m.ckpt", "--metrics", metrics, "--seed", 1)
        assert payload["steps"] == payload["last_step"] == 12
        records = [json.loads(line) for line in metrics.read_text().splitlines()]
        assert [r["step"] for r in records] == list(range(1, 13))
        for r in records:
            check_schema(r, "metrics")
        assert (tmp_path / "m.ckpt.vocab.json").exists()

    def test_seed_fixes_checkpoint_bytes(self, tmp_path, capsys):
        cfg, tc = small_config(tmp_path), train_config(tmp_path)
        for name in ("a", "b"):
            assert run(capsys, "pretrain", "--config", cfg, "--train-config", tc, "--seed", 3,
                       "--out", tmp_path / f"{name}.ckpt")[0] == EXIT_OK
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_resume_continues_series(self, tmp_path, capsys):
        cfg, tc = small_config(tmp_path), train_config(tmp_path)
        common = ["--config", cfg, "--train-config", tc, "--seed", 2]
        run(capsys, "pretrain", *common, "--out", tmp_path / "full.ckpt", "--metrics", tmp_path / "full.ndjson")
        run(capsys, "pretrain", *common, "--out", tmp_path / "half.ckpt", "--metrics", tmp_path / "half.ndjson",
            "--stop-at", 5)
        payload = run_json(capsys, "pretrain", *common, "--out", tmp_path / "rest.ckpt", "--metrics",
                           tmp_path / "half.ndjson", "--resume", tmp_path / "half.ckpt")
        assert payload["steps"] == 7 and payload["last_step"] == 12
        full = [json.loads(x) for x in (tmp_path / "full.ndjson").read_text().splitlines()]
        resumed = [json.loads(x) for x in (tmp_path / "half.ndjson").read_text().splitlines()]
        assert resumed[5]["step"] == 6
        assert resumed == full
        assert (tmp_path / "full.ckpt").read_bytes() == (tmp_path / "rest.ckpt").read_bytes()

    def test_concurrent_loaders_run(self, tmp_path, capsys):
        payload = run_json(capsys, "pretrain", "--config", small_config(tmp_path), "--train-config",
                           train_config(tmp_path, total_steps=4), "--out", tmp_path / "m.ckpt", "--loaders", 2)
        assert payload["steps"] == 4

    def test_bad_train_config(self, tmp_path, capsys):
        tc = tmp_path / "t.json"
        tc.write_text(json.dumps({"lr": -1}))
        code, _, _ = run(capsys, "pretrain", "--config", small_config(tmp_path), "--train-config", tc,
                         "--out", tmp_path / "m.ckpt")
        assert code == EXIT_CONFIG

    def test_invalid_config(self, tmp_path, capsys):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"embedding": ["word", "pos"], "encoder": "transformer", "target": ["sp"]}))
        assert run(capsys, "pretrain", "--config", path, "--out", tmp_path / "m.ckpt")[0] == EXIT_CONFIG

    def test_data_error(self, tmp_path, capsys):
        (tmp_path / "empty.txt").write_text("\n")
        manifest = tmp_path / "m.json"
        manifest.write_text(json.dumps({"format": "corpus", "train": "empty.txt"}))
        code, _, err = run(capsys, "pretrain", "--config", small_config(tmp_path), "--data", manifest,
                           "--out", tmp_path / "m.ckpt")
        assert code == EXIT_DATA and "data error" in err

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence(self, tmp_path, capsys):
        tc = train_config(tmp_path, lr=1e300, warmup_steps=0, clip_norm=0.0)
        code, _, err = run(capsys, "pretrain", "--config", small_config(tmp_path, dropout=0.0), "--train-config", tc,
                           "--out", tmp_path / "m.ckpt")
        assert code == EXIT_NUMERIC and "divergence" in err


class TestSynthData:
    @pytest.mark.parametrize("kind,config", [("corpus", "bert"), ("vision", "vit"), ("audio", "s2t")])
    def test_manifest_trains(self, tmp_path, capsys, kind, config):
        payload = run_json(capsys, "synth-data", "--kind", kind, "--out", tmp_path / "d", "--n", 16, "--seed", 1)
        assert payload["format"] == kind
        code, _, err = run(capsys, "pretrain", "--config", configs_path(config), "--data", payload["manifest"],
                           "--steps", 1, "--out", tmp_path / "m.ckpt")
        assert code == EXIT_OK, err


class TestFinetune:
    def test_from_pretrained(self, tmp_path, capsys):
        cfg = small_config(tmp_path, num_classes=2)
        run(capsys, "pretrain", "--config", cfg, "--steps", 3, "--out", tmp_path / "m.ckpt")
        payload = run_json(capsys, "finetune", "--config", cfg, "--ckpt", tmp_path / "m.ckpt", "--target", "cls",
                           "--num-classes", 2, "--steps", 3, "--freeze", "--out", tmp_path / "ft.ckpt")
        assert payload["steps"] == 3 and payload["eval_accuracy"] is not None
        assert run_json(capsys, "inspect", "--ckpt", tmp_path / "ft.ckpt")["tensors"] > 0


class TestConvert:
    def pretrained(self, tmp_path, capsys):
        run(capsys, "pretrain", "--config", small_config(tmp_path), "--steps", 1, "--out", tmp_path / "b.ckpt")
        return tmp_path / "b.ckpt"

    def test_bert_to_roberta(self, tmp_path, capsys):
        src = self.pretrained(tmp_path, capsys)
        payload = run_json(capsys, "convert", "--src-ckpt", src, "--plan", plans_path("bert_to_roberta"),
                           "--dst-config", small_config(tmp_path, "roberta"), "--out", tmp_path / "r.ckpt")
        assert (payload["transferred"], payload["skipped"], payload["initialized"]) == (27 - 3, 3, 0)
        code, out, _ = run(capsys, "convert", "--src-ckpt", src, "--plan", plans_path("bert_to_roberta"),
                           "--dst-config", small_config(tmp_path, "roberta"), "--out", tmp_path / "r.ckpt")
        assert code == EXIT_OK and "transferred  24" in out

    def test_identity(self, tmp_path, capsys):
        src = self.pretrained(tmp_path, capsys)
        plan = tmp_path / "p.json"
        plan.write_text(json.dumps({"rules": [{"src": "*", "dst": "*"}]}))
        code, out, _ = run(capsys, "convert", "--src-ckpt", src, "--plan", plan, "--dst-config",
                           small_config(tmp_path), "--out", tmp_path / "c.ckpt")
        assert code == EXIT_OK and "100.0% transferred" in out

    def test_duplicate_destination(self, tmp_path, capsys):
        src = self.pretrained(tmp_path, capsys)
        plan = tmp_path / "p.json"
        plan.write_text(json.dumps({"rules": [{"src": "embedding.combine.0.ln_gain", "dst": "embedding.combine.0.ln_bias"},
                                              {"src": "*", "dst": "*"}]}))
        code, _, err = run(capsys, "convert", "--src-ckpt", src, "--plan", plan, "--dst-config",
                           small_config(tmp_path), "--out", tmp_path / "c.ckpt")
        assert code == EXIT_CONFIG and "receives both" in err

    def test_unmatched_error_policy(self, tmp_path, capsys):
        src = self.pretrained(tmp_path, capsys)
        plan = tmp_path / "p.json"
        plan.write_text(json.dumps({"rules": [{"src": "*", "dst": "*"}], "unmatched": "error"}))
        code, _, _ = run(capsys, "convert", "--src-ckpt", src, "--plan", plan, "--dst-config",
                         small_config(tmp_path, "roberta"), "--out", tmp_path / "c.ckpt")
        assert code == EXIT_CONFIG


@pytest.fixture(scope="module")
def copy_model(tmp_path_factory):
    root = tmp_path_factory.mktemp("copy")
    lines = ["red fox runs", "blue owl sleeps", "green frog jumps", "gray cat sits"]
    (root / "pairs.txt").write_text("".join(f"{x}\t{x}\n" for x in lines))
    (root / "m.json").write_text(json.dumps({"format": "pairs", "train": "pairs.txt"}))
    raw = json.load(open(configs_path("t5")))
    raw["hyper"] = {"dropout": 0.0}
    (root / "t5.json").write_text(json.dumps(raw))
    (root / "train.json").write_text(json.dumps({"lr": 3e-3, "total_steps": 150, "warmup_steps": 15,
                                                 "batch_size": 4}))
    code = main(["pretrain", "--config", str(root / "t5.json"), "--data", str(root / "m.json"),
                 "--train-config", str(root / "train.json"), "--out", str(root / "t5.ckpt")])
    assert code == EXIT_OK
    return root, lines


class TestGenerate:
    def test_reproduces_input(self, copy_model, capsys):
        root, lines = copy_model
        (root / "in.txt").write_text("\n".join(lines) + "\n")
        payload = run_json(capsys, "generate", "--config", root / "t5.json", "--ckpt", root / "t5.ckpt",
                           "--input", root / "in.txt", "--max-len", 8)
        assert payload["outputs"] == lines

    def test_empty_input(self, copy_model, capsys):
        root, _ = copy_model
        (root / "empty.txt").write_text("")
        code, out, _ = run(capsys, "generate", "--config", root / "t5.json", "--ckpt", root / "t5.ckpt",
                           "--input", root / "empty.txt")
        assert code == EXIT_OK and out == ""

    def test_encoder_only(self, tmp_path, capsys):
        (tmp_path / "in.txt").write_text("a b\n")
        code, _, err = run(capsys, "generate", "--config", configs_path("bert"), "--ckpt", tmp_path / "x.ckpt",
                           "--input", tmp_path / "in.txt")
        assert code == EXIT_CONFIG and "decoder" in err
