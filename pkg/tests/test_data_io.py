import json

import numpy as np
import pytest

from mixnuts.attack import AttackConfig, AttackRun, minimum_margin_attack
from mixnuts.data_io import (
    RESULT_SCHEMA,
    RUN_CONFIG_SCHEMA,
    LogitDataset,
    check_cache,
    content_hash,
    dump_json,
    load_json,
    parse_attack_run,
    parse_logit_dataset,
    parse_model,
    read_attack_run,
    read_logit_dataset,
    read_model,
    read_run_config,
    serialize_attack_run,
    serialize_logit_dataset,
    serialize_model,
    write_attack_run,
    write_logit_csv,
    write_logit_dataset,
    write_model,
)
from mixnuts.errors import (
    BadMagicError,
    CacheMismatchError,
    DuplicateIdError,
    FormatError,
    InvalidInputError,
    TruncatedFileError,
    VersionMismatchError,
)
from mixnuts.logits import TransformParams
from mixnuts.models import LinearModel, MlpModel, make_synthetic_problem
from mixnuts.optimizer import build_margin_sets

# three examples, four classes, assembled byte by byte
GOLDEN_MXNL = bytes.fromhex(
    "4d584e4c" "01000000" "0300000000000000" "04000000" "00000000"
    # id 7, label 2, (1.0, -2.5, 0.5, 0.0)
    "0700000000000000" "02000000" "0000803f" "000020c0" "0000003f" "00000000"
    # id 1000, label 0, (3.0, -1.0, 0.25, 2.0)
    "e803000000000000" "00000000" "00004040" "000080bf" "0000803e" "00000040"
    # id 2**40, label 3, (0.0, 0.5, -1.0, 1.0)
    "0000000000010000" "03000000" "00000000" "0000003f" "000080bf" "0000803f"
)
GOLDEN_IDS = [7, 1000, 2**40]
GOLDEN_LABELS = [2, 0, 3]
GOLDEN_LOGITS = [[1.0, -2.5, 0.5, 0.0], [3.0, -1.0, 0.25, 2.0], [0.0, 0.5, -1.0, 1.0]]
# XXH64 digests frozen on first run
GOLDEN_MXNL_DIGEST = "17e1b6c0289d5a8f"
SYNTHETIC_DIGEST = "2b39ac22ed00f6a5"


def random_logits(n=20, c=5, seed=0):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(n, c)).astype(np.float32).astype(np.float64)
    return LogitDataset(rng.permutation(10 * n)[:n], rng.integers(0, c, n), z)


def small_run(seed=0):
    data, _ = make_synthetic_problem(seed, 3, 2, 30, 2.0)
    m = MlpModel.random([2, 5, 3], seed=seed)
    return minimum_margin_attack(m, data, AttackConfig(epsilon=0.2, steps=4, restarts=2),
                                 head=TransformParams())


class TestLogitFile:
    def test_golden_bytes_parse(self):
        ds = parse_logit_dataset(GOLDEN_MXNL)
        assert ds.ids.tolist() == GOLDEN_IDS
        assert ds.labels.tolist() == GOLDEN_LABELS
        np.testing.assert_array_equal(ds.logits, GOLDEN_LOGITS)
        assert ds.class_count == 4

    def test_golden_bytes_reserialize(self):
        ds = LogitDataset(GOLDEN_IDS, GOLDEN_LABELS, GOLDEN_LOGITS)
        assert serialize_logit_dataset(ds) == GOLDEN_MXNL

    def test_golden_digest(self):
        assert content_hash(GOLDEN_MXNL) == GOLDEN_MXNL_DIGEST
        assert content_hash(parse_logit_dataset(GOLDEN_MXNL)) == GOLDEN_MXNL_DIGEST

    def test_round_trip_bit_identical(self, tmp_path):
        ds = random_logits()
        write_logit_dataset(ds, tmp_path / "a.mxnl")
        back = read_logit_dataset(tmp_path / "a.mxnl")
        assert back.logits.tobytes() == ds.logits.tobytes()
        assert back.ids.tobytes() == ds.ids.tobytes()
        np.testing.assert_array_equal(back.labels, ds.labels)
        assert (tmp_path / "a.mxnl").read_bytes() == serialize_logit_dataset(back)

    def test_large_file_streams_in_chunks(self, tmp_path):
        ds = random_logits(n=10_000, c=3, seed=1)
        write_logit_dataset(ds, tmp_path / "big.mxnl")
        assert read_logit_dataset(tmp_path / "big.mxnl").logits.tobytes() == ds.logits.tobytes()

    def test_empty_round_trip_and_downstream_rejection(self, tmp_path):
        ds = LogitDataset(np.zeros(0), np.zeros(0), np.zeros((0, 4)))
        write_logit_dataset(ds, tmp_path / "e.mxnl")
        back = read_logit_dataset(tmp_path / "e.mxnl")
        assert len(back) == 0 and back.class_count == 4
        with pytest.raises(InvalidInputError, match="empty"):
            build_margin_sets(back, small_run())

    def test_bad_magic(self):
        with pytest.raises(BadMagicError):
            parse_logit_dataset(b"MXNX" + GOLDEN_MXNL[4:])

    def test_version(self):
        with pytest.raises(VersionMismatchError):
            parse_logit_dataset(GOLDEN_MXNL[:4] + b"\x02\x00\x00\x00" + GOLDEN_MXNL[8:])

    @pytest.mark.parametrize("cut", [3, 20, 30, len(GOLDEN_MXNL) - 1])
    def test_truncated(self, cut):
        with pytest.raises(TruncatedFileError):
            parse_logit_dataset(GOLDEN_MXNL[:cut])

    def test_trailing_bytes(self):
        with pytest.raises(FormatError):
            parse_logit_dataset(GOLDEN_MXNL + b"\x00")

    def test_duplicate_id(self):
        dup = bytearray(GOLDEN_MXNL)
        dup[24 + 28:24 + 36] = (7).to_bytes(8, "little")
        with pytest.raises(DuplicateIdError):
            parse_logit_dataset(bytes(dup))

    def test_label_out_of_range(self):
        bad = bytearray(GOLDEN_MXNL)
        bad[24 + 8] = 4
        with pytest.raises(FormatError):
            parse_logit_dataset(bytes(bad))

    def test_error_codes_are_distinct(self):
        kinds = [BadMagicError, VersionMismatchError, TruncatedFileError, DuplicateIdError]
        assert len({k.code for k in kinds}) == 4

    def test_csv(self, tmp_path):
        write_logit_csv(parse_logit_dataset(GOLDEN_MXNL), tmp_path / "a.csv")
        lines = (tmp_path / "a.csv").read_text().splitlines()
        assert lines[0] == "id,label,l0,l1,l2,l3"
        assert lines[1] == "7,2,1.0,-2.5,0.5,0.0"
        assert lines[3].startswith("1099511627776,3,")


class TestModelFile:
    @pytest.mark.parametrize("model", [
        LinearModel(np.arange(6.0).reshape(2, 3) / 7, np.array([0.1, -0.2])),
        MlpModel.random([3, 5, 4], "gelu", seed=1),
        MlpModel.random([2, 4, 4, 3], "tanh", seed=2),
    ])
    def test_round_trip(self, model, tmp_path):
        write_model(model, tmp_path / "m.mxnm")
        back = read_model(tmp_path / "m.mxnm")
        assert type(back) is type(model)
        assert serialize_model(back) == serialize_model(model)
        x = np.random.default_rng(0).normal(size=(4, back.input_dim))
        assert back.forward(x).tobytes() == model.forward(x).tobytes()

    def test_truncated(self):
        blob = serialize_model(MlpModel.random([2, 3, 2], seed=0))
        with pytest.raises(TruncatedFileError):
            parse_model(blob[:-1])

    def test_bad_magic(self):
        with pytest.raises(BadMagicError):
            parse_model(b"MXNL" + serialize_model(MlpModel.random([2, 3, 2], seed=0))[4:])


class TestAttackFile:
    def test_round_trip(self, tmp_path):
        run = small_run()
        write_attack_run(run, tmp_path / "a.mxna")
        back = read_attack_run(tmp_path / "a.mxna")
        assert back.config == run.config and back.meta == run.meta
        for name in ("ids", "clean_margin", "best_margin", "perturbation"):
            assert getattr(back, name).tobytes() == getattr(run, name).tobytes()
        np.testing.assert_array_equal(back.best_logits,
                                      run.best_logits.astype(np.float32).astype(np.float64))
        assert serialize_attack_run(back) == serialize_attack_run(run)

    def test_negative_infinity_stored_as_float32_floor(self):
        run = AttackRun(np.arange(2), np.zeros(2), np.zeros(2),
                        np.array([[0.0, -np.inf], [-1.0, -2.0]]), AttackConfig())
        back = parse_attack_run(serialize_attack_run(run))
        assert back.best_logits[0, 1] == np.finfo(np.float32).min
        assert back.perturbation is None

    def test_nan_rejected(self):
        run = AttackRun(np.arange(1), np.zeros(1), np.zeros(1), np.array([[np.nan, 0.0]]),
                        AttackConfig())
        with pytest.raises(InvalidInputError):
            serialize_attack_run(run)

    def test_duplicate_ids(self):
        run = AttackRun(np.zeros(2), np.zeros(2), np.zeros(2), np.zeros((2, 2)), AttackConfig())
        with pytest.raises(DuplicateIdError):
            parse_attack_run(serialize_attack_run(run))

    def test_bad_metadata(self):
        blob = bytearray(serialize_attack_run(small_run()))
        blob[12] = ord("[")
        with pytest.raises(FormatError):
            parse_attack_run(bytes(blob))

    def test_truncated(self):
        blob = serialize_attack_run(small_run())
        with pytest.raises(TruncatedFileError):
            parse_attack_run(blob[:-3])


class TestHashing:
    def test_same_bytes_same_digest(self, tmp_path):
        ds = random_logits()
        write_logit_dataset(ds, tmp_path / "a.mxnl")
        assert content_hash(ds) == content_hash(tmp_path / "a.mxnl") == content_hash(
            str(tmp_path / "a.mxnl"))

    def test_flipped_bit_changes_digest(self):
        flipped = bytearray(GOLDEN_MXNL)
        flipped[-1] ^= 1
        assert content_hash(bytes(flipped)) != content_hash(GOLDEN_MXNL)

    def test_synthetic_dataset_digest(self):
        data, _ = make_synthetic_problem(0, 2, 2, 500, 2.5)
        assert content_hash(LogitDataset.from_features(data)) == SYNTHETIC_DIGEST

    def test_unhashable(self):
        with pytest.raises(InvalidInputError):
            content_hash(3.5)


class TestCacheCheck:
    def test_mismatch_refused_unless_overridden(self):
        run = small_run()
        run.meta.update(model_hash="aa", dataset_hash="bb")
        check_cache(run, "aa", "bb")
        with pytest.raises(CacheMismatchError):
            check_cache(run, "ab", "bb")
        with pytest.raises(CacheMismatchError):
            check_cache(run, dataset_hash="cc")
        check_cache(run, "ab", "cc", override=True)


class TestJson:
    def good_config(self):
        return {"dataset": "d.mxnl", "robust_model": "h.mxnm", "accurate_model": "g.mxnm",
                "transform_grid": {"preset": "toy"},
                "attack": {"norm": "Linf", "epsilon": 0.3, "steps": 50},
                "beta": 0.985, "output_dir": "out"}

    def test_run_config_accepted(self, tmp_path):
        dump_json(self.good_config(), tmp_path / "c.json")
        assert read_run_config(tmp_path / "c.json")["beta"] == 0.985

    @pytest.mark.parametrize("patch", [
        {"extra": 1}, {"beta": 0.0}, {"beta": 1.5},
        {"attack": {"norm": "L1", "epsilon": 0.3, "steps": 5}},
        {"transform_grid": {"s": [1.0], "p": [1.0]}},
        {"transform_grid": {"preset": "toy", "s": [1.0], "p": [1.0], "c": [0.0]}},
    ])
    def test_run_config_rejected(self, patch, tmp_path):
        doc = {**self.good_config(), **patch}
        dump_json(doc, tmp_path / "c.json")
        with pytest.raises(InvalidInputError):
            read_run_config(tmp_path / "c.json")

    def test_missing_section(self, tmp_path):
        doc = self.good_config()
        del doc["attack"]
        dump_json(doc, tmp_path / "c.json")
        with pytest.raises(InvalidInputError):
            read_run_config(tmp_path / "c.json")

    def test_malformed_json(self, tmp_path):
        (tmp_path / "c.json").write_text("{")
        with pytest.raises(InvalidInputError):
            load_json(tmp_path / "c.json", RUN_CONFIG_SCHEMA)

    def test_result_round_trip_is_exact(self, tmp_path):
        from conftest import fixture_grid, fixture_sets

        from mixnuts.optimizer import GridSearchResult, grid_search

        res = grid_search(fixture_sets(), fixture_grid())
        dump_json(res.to_dict(), tmp_path / "r.json")
        doc = load_json(tmp_path / "r.json", RESULT_SCHEMA)
        back = GridSearchResult.from_dict(doc)
        assert back.to_dict() == res.to_dict()
        dump_json(back.to_dict(), tmp_path / "r2.json")
        assert (tmp_path / "r.json").read_bytes() == (tmp_path / "r2.json").read_bytes()

    def test_non_finite_refused(self, tmp_path):
        with pytest.raises(ValueError):
            dump_json({"x": float("nan")}, tmp_path / "n.json")

    def test_result_schema_rejects_out_of_range(self, tmp_path):
        doc = json.loads(json.dumps({"s_star": 1, "p_star": 1, "c_star": 0, "alpha_star": 0.4,
                                     "q_star": 0.1, "objective": 0.2, "beta": 0.9,
                                     "clamp": "gelu"}))
        dump_json(doc, tmp_path / "r.json")
        with pytest.raises(InvalidInputError):
            load_json(tmp_path / "r.json", RESULT_SCHEMA)
