import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from modpretrain import configs_path, plans_path
from modpretrain import checkpoint as ck
from modpretrain.composer import build, config_from_dict
from modpretrain.data import toy_dataset
from modpretrain.errors import (
    CheckpointError,
    CheckpointIOError,
    ChecksumMismatch,
    DuplicateDestination,
    FingerprintMismatch,
    ShapeMismatch,
    UnmatchedRequired,
)
from modpretrain.trainer import Adam, TrainConfig, pretrain


def small(name="bert", seed=0, dropout=0.0, **hyper):
    raw = json.load(open(configs_path(name)))
    raw["hyper"] = {"dropout": dropout, "hidden": 16, "layers": 1, "heads": 2, **hyper}
    return build(config_from_dict(raw), seed)


class TestFormat:
    def test_save_load_save_is_byte_identical(self, tmp_path):
        model = small()
        ck.save(model, tmp_path / "a.ckpt")
        other = small(seed=5)
        ck.load(tmp_path / "a.ckpt", other)
        ck.save(other, tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_entry_count_and_header(self, tmp_path):
        model = small()
        ck.save(model, tmp_path / "a.ckpt")
        blob = (tmp_path / "a.ckpt").read_bytes()
        assert blob[:4] == b"MPTC"
        assert int.from_bytes(blob[4:6], "little") == ck.VERSION
        assert blob[6:38] == model.config.fingerprint()
        assert int.from_bytes(blob[38:42], "little") == len(model.params)

    def test_entries_sorted(self):
        blob = ck.encode(ck.Checkpoint(b"\0" * 32, {"b": np.ones(1), "a": np.zeros((2, 1))}))
        assert blob.index(b"a") < blob.index(b"b", 42)

    def test_flipped_payload_byte(self, tmp_path):
        model = small()
        ck.save(model, tmp_path / "a.ckpt")
        blob = bytearray((tmp_path / "a.ckpt").read_bytes())
        blob[len(blob) // 2] ^= 0x01
        (tmp_path / "a.ckpt").write_bytes(bytes(blob))
        with pytest.raises(ChecksumMismatch):
            ck.load(tmp_path / "a.ckpt", small())

    def test_trailing_checksum_byte(self):
        blob = bytearray(ck.encode(ck.Checkpoint(b"\0" * 32, {"w": np.arange(3.0)})))
        blob[-1] ^= 0x80
        with pytest.raises(ChecksumMismatch):
            ck.decode(bytes(blob))

    @given(st.data())
    @settings(max_examples=60, deadline=None)
    def test_any_flipped_byte_fails(self, data):
        blob = bytearray(ck.encode(ck.Checkpoint(b"\1" * 32, {"w": np.arange(6.0).reshape(2, 3), "z": np.ones(2)})))
        i = data.draw(st.integers(0, len(blob) - 1))
        blob[i] ^= data.draw(st.integers(1, 255))
        try:
            ck.decode(bytes(blob))
        except CheckpointError:
            return
        # only the fingerprint is not covered by structure; the file CRC still is
        pytest.fail(f"flip at {i} went unnoticed")

    def test_truncated_file_leaves_model_alone(self, tmp_path):
        ck.save(small(seed=1), tmp_path / "a.ckpt")
        blob = (tmp_path / "a.ckpt").read_bytes()
        (tmp_path / "a.ckpt").write_bytes(blob[: len(blob) * 2 // 3])
        model = small()
        before = {n: p.data.copy() for n, p in model.params.items()}
        with pytest.raises(CheckpointIOError):
            ck.load(tmp_path / "a.ckpt", model)
        for n, p in model.params.items():
            np.testing.assert_array_equal(p.data, before[n])

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointIOError):
            ck.load(tmp_path / "nope.ckpt", small())

    def test_bad_magic(self):
        blob = b"XXXX" + ck.encode(ck.Checkpoint(b"\0" * 32, {}))[4:]
        with pytest.raises(CheckpointError):
            ck.decode(blob)

    @given(st.dictionaries(st.text("abc.", min_size=1, max_size=6),
                           st.lists(st.integers(0, 3), max_size=3), max_size=4), st.integers(0, 2**16))
    @settings(max_examples=40, deadline=None)
    def test_encode_decode_identity(self, shapes, seed):
        rng = np.random.default_rng(seed)
        entries = {n: rng.standard_normal(s) for n, s in shapes.items()}
        out = ck.decode(ck.encode(ck.Checkpoint(b"\7" * 32, entries)))
        assert set(out.entries) == set(entries)
        for n, a in entries.items():
            assert out.entries[n].shape == a.shape
            np.testing.assert_array_equal(out.entries[n], a)


class TestLoad:
    def test_forward_bit_identical(self, tmp_path):
        model = small(seed=3)
        batch = toy_dataset(model.config).stream(model.config, 8)(1)
        model.eval()
        before = model.forward(batch).loss.item()
        ck.save(model, tmp_path / "a.ckpt")
        other = small(seed=9)
        ck.load(tmp_path / "a.ckpt", other)
        other.eval()
        assert other.forward(batch).loss.item() == before

    def test_shape_mismatch_names_tensor(self, tmp_path):
        ck.save(small(), tmp_path / "a.ckpt")
        wide = small(hidden=32)
        before = {n: p.data.copy() for n, p in wide.params.items()}
        with pytest.raises(ShapeMismatch, match="embedding.combine.0.ln_bias"):
            ck.load(tmp_path / "a.ckpt", wide, force=True)
        for n, p in wide.params.items():
            np.testing.assert_array_equal(p.data, before[n])

    def test_fingerprint_mismatch_and_force(self, tmp_path):
        ck.save(small(), tmp_path / "a.ckpt")
        other = small(dropout=0.3)
        with pytest.raises(FingerprintMismatch):
            ck.load(tmp_path / "a.ckpt", other)
        ck.load(tmp_path / "a.ckpt", other, force=True)

    def test_name_mismatch(self, tmp_path):
        ck.save(small(), tmp_path / "a.ckpt")
        with pytest.raises(CheckpointError):
            ck.load(tmp_path / "a.ckpt", small("roberta"), force=True)

    def test_optimizer_state_required(self, tmp_path):
        model = small()
        _, opt = pretrain(model, toy_dataset(model.config).stream(model.config, 4), TrainConfig(total_steps=1))
        ck.save(model, tmp_path / "a.ckpt")
        with pytest.raises(CheckpointError):
            ck.load(tmp_path / "a.ckpt", small(), opt)

    def test_resume_matches_uninterrupted(self, tmp_path):
        cfg = TrainConfig(lr=3e-3, total_steps=14, warmup_steps=3)

        def run(model):
            return toy_dataset(model.config).stream(model.config, 8, seed=2)

        full = small(dropout=0.1)
        whole, _ = pretrain(full, run(full), cfg)
        first = small(dropout=0.1)
        head, opt = pretrain(first, run(first), cfg, stop_at=6)
        ck.save(first, tmp_path / "mid.ckpt", opt)
        resumed = small(seed=42, dropout=0.1)
        opt2 = Adam(resumed.params, cfg)
        ck.load(tmp_path / "mid.ckpt", resumed, opt2)
        tail, _ = pretrain(resumed, run(resumed), cfg, optimizer=opt2, start_step=opt2.t)
        assert head.losses + tail.losses == whole.losses
        for n, p in resumed.params.items():
            np.testing.assert_array_equal(p.data, full.params[n].data)


class TestPatterns:
    @pytest.mark.parametrize("pattern,name,expected", [
        ("a.b.c", "a.b.c", ""),
        ("a.b.c", "a.b.d", None),
        ("*", "a.b.c", "a.b.c"),
        ("encoder.*.0.x", "encoder.transformer.0.x", "transformer"),
        ("encoder.*", "encoder.transformer.0.x", "transformer.0.x"),
        ("enc*", "encoder.x", None),
        ("a.*.c", "a..c", None),
        ("a.*", "a", None),
    ])
    def test_match(self, pattern, name, expected):
        assert ck.match_pattern(pattern, name) == expected

    def test_malformed_rules(self):
        with pytest.raises(ValueError):
            ck.RemapPlan([ck.RemapRule("a.*.*", "b")])
        with pytest.raises(ValueError):
            ck.RemapPlan([ck.RemapRule("a", "b.*")])
        with pytest.raises(ValueError):
            ck.RemapPlan(unmatched="maybe")
        with pytest.raises(ValueError):
            ck.RemapPlan.from_dict({"rules": [{"src": "a", "dst": "b", "scale": 2}]})

    def test_plan_dict_round_trip(self):
        plan = ck.RemapPlan.load(plans_path("bert_to_roberta"))
        assert ck.RemapPlan.from_dict(plan.to_dict()) == plan


def bert_tensor_count(layers):
    # embeddings: word, pos, seg tables plus norm gain and bias
    # each layer: q w/b, k w, v w/b, o w/b, two norms, ffn in w/b, ffn out w/b
    # mlm head: transform w/b, norm gain/bias, output bias (tied table); sp head: w/b
    return 5 + 15 * layers + 5 + 2


class TestRemap:
    def test_bert_to_roberta_counts(self):
        src = small()
        dst = small("roberta", seed=1)
        out, report = ck.remap(ck.to_checkpoint(src), ck.RemapPlan.load(plans_path("bert_to_roberta")), dst)
        total = bert_tensor_count(1)
        assert len(src.params) == total
        assert report.counts() == {"transferred": total - 1 - 2, "skipped": 3, "initialized": 0}
        assert set(report.skipped) == {"embedding.seg.0.table", "target.sp.0.head_weight", "target.sp.0.head_bias"}
        assert set(out.entries) == set(dst.params)

    def test_roberta_mlm_matches_source(self):
        src = small(seed=4)
        dst = small("roberta", seed=8)
        out, _ = ck.remap(ck.to_checkpoint(src), ck.RemapPlan.load(plans_path("bert_to_roberta")), dst)
        ck.restore(out, dst)
        batch = toy_dataset(dst.config, seed=3).stream(dst.config, 16, seed=5)(2)
        src.eval()
        dst.eval()
        with_sp = dataclasses.replace(batch, sp_labels=np.zeros(16, dtype=np.int64))
        a = src.forward(with_sp).per_task["mlm"][0]
        assert abs(dst.forward(batch).per_task["mlm"][0] - a) <= 1e-10

    def test_identity_plan(self):
        src = small(seed=2)
        dst = small(seed=7)
        out, report = ck.remap(ck.to_checkpoint(src), ck.RemapPlan.identity(), dst)
        assert report.counts() == {"transferred": len(src.params), "skipped": 0, "initialized": 0}
        ck.restore(out, dst)
        batch = toy_dataset(src.config).stream(src.config, 8)(1)
        src.eval()
        dst.eval()
        assert dst.forward(batch).loss.item() == src.forward(batch).loss.item()

    def test_empty_plan_initializes_everything(self):
        src, dst = small(seed=2), small(seed=7)
        out, report = ck.remap(ck.to_checkpoint(src), ck.RemapPlan(), dst)
        assert report.counts() == {"transferred": 0, "skipped": len(src.params), "initialized": len(dst.params)}
        for n, p in dst.params.items():
            np.testing.assert_array_equal(out.entries[n], p.data)

    def test_duplicate_destination(self):
        plan = ck.RemapPlan([ck.RemapRule("embedding.pos.0.table", "embedding.word.0.table"),
                             ck.RemapRule("*", "*")])
        with pytest.raises(DuplicateDestination):
            ck.remap(ck.to_checkpoint(small(max_seq_len=100, vocab_size=100)), plan,
                     small(max_seq_len=100, vocab_size=100))

    def test_unmatched_error_policy(self):
        plan = ck.RemapPlan([ck.RemapRule("*", "*")], unmatched="error")
        with pytest.raises(UnmatchedRequired):
            ck.remap(ck.to_checkpoint(small()), plan, small("roberta"))

    def test_shape_disagreement_is_an_error(self):
        with pytest.raises(ShapeMismatch):
            ck.remap(ck.to_checkpoint(small()), ck.RemapPlan.identity(), small(hidden=32))

    def test_transpose(self):
        src = small()
        name = "encoder.transformer.0.attn_q_weight"
        plan = ck.RemapPlan([ck.RemapRule(name, name, transpose=True)])
        out, _ = ck.remap(ck.to_checkpoint(src), plan, small(seed=1))
        np.testing.assert_array_equal(out.entries[name], src.params[name].data.T)

    def test_add_row_checks(self):
        plan = ck.RemapPlan([ck.RemapRule("embedding.pos.0.table", "embedding.pos.0.table", add="missing")])
        with pytest.raises(CheckpointError):
            ck.remap(ck.to_checkpoint(small()), plan, small("roberta"))
