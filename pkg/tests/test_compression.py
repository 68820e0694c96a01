"""Tests for app.compression.pruner and app.compression.codec."""

import math
import struct
import zlib

import numpy as np
import pytest
from pydantic import ValidationError

from app.compression import codec
from app.compression.codec import (
    LayerEncoding,
    compression_summary,
    decode_model,
    encode_model,
    load,
    load_field,
    save,
)
from app.compression.pruner import (
    PruneConfig,
    PruneScope,
    apply_prune,
    check_ratio,
    global_threshold,
    prune_count,
    verify_sparsity,
)
from app.core.errors import (
    BadMagicError,
    ChecksumMismatchError,
    ConfigurationError,
    DatasetIOError,
    DecodeError,
    PopcountMismatchError,
    SparsityViolationError,
    TruncatedFileError,
    UnsupportedVersionError,
)
from app.field.model import RadianceField, build_field
from app.mlp.network import NetworkSpec, init_network, weights_from_arrays
from app.render.renderer import render_image
from app.render.volume import SamplingConfig

from tests.test_render import axis_camera


def reseal(body: bytes) -> bytes:
    """Append a valid checksum so decoding reaches the structural checks."""
    return body + struct.pack("<I", zlib.crc32(body))


def masks(model):
    return [w.mask.copy() for w in model.weight_matrices()]


def plain_network(rows=4, cols=4, seed=2):
    return init_network(NetworkSpec(layer_widths=(rows, cols), seed=seed))


# ── Pruner ────────────────────────────────────────────────────────

class TestPruneCount:
    @pytest.mark.parametrize("p, expected", [(0.0, 0), (0.3, 7334), (0.5, 12224), (0.7, 17113), (0.9, 22003)])
    def test_floor_of_ratio(self, p, expected):
        assert prune_count(p, 24448) == expected

    @pytest.mark.parametrize("p, n, expected", [(0.7, 90, 63), (0.7, 170, 119), (0.7, 330, 231), (0.3, 10, 3)])
    def test_products_just_below_an_integer(self, p, n, expected):
        assert prune_count(p, n) == expected

    def test_prunes_exact_count_on_small_layer(self):
        net = init_network(NetworkSpec(layer_widths=(9, 10)))
        report = apply_prune(net, PruneConfig(ratio=0.7))
        assert report.pruned_count == 63
        assert net.mask_popcount() == 27

    @pytest.mark.parametrize("p", [1.0, -0.1, math.nan, 1.5])
    def test_invalid_ratio(self, p):
        with pytest.raises(ConfigurationError):
            check_ratio(p)

    def test_config_rejects_one(self):
        with pytest.raises(ValidationError):
            PruneConfig(ratio=1.0)


class TestGlobalPrune:
    @pytest.mark.parametrize("p", [0.1, 0.5, 0.9])
    def test_exact_count(self, tiny_field, p):
        n = tiny_field.total_weights
        report = apply_prune(tiny_field, PruneConfig(ratio=p))
        assert report.pruned_count == prune_count(p, n)
        assert tiny_field.mask_popcount() == n - report.pruned_count
        assert report.kept_count == tiny_field.mask_popcount()

    def test_matches_brute_force(self, tiny_field):
        before = np.concatenate([np.abs(w.values).ravel() for w in tiny_field.weight_matrices()])
        apply_prune(tiny_field, PruneConfig(ratio=0.6))
        pruned = np.concatenate([~w.mask.ravel() for w in tiny_field.weight_matrices()])
        k = math.floor(0.6 * before.size)
        assert pruned.sum() == k
        assert before[pruned].max() <= before[~pruned].min()
        expected = np.zeros(before.size, dtype=bool)
        expected[np.argsort(before, kind="stable")[:k]] = True
        assert np.array_equal(pruned, expected)

    def test_threshold_is_kth_magnitude(self, tiny_field):
        before = np.sort(np.concatenate([np.abs(w.values).ravel() for w in tiny_field.weight_matrices()]))
        threshold, k = global_threshold(tiny_field, 0.4)
        assert threshold == pytest.approx(before[k - 1])

    def test_pruned_slots_are_zero(self, tiny_field):
        apply_prune(tiny_field, PruneConfig(ratio=0.7))
        fraction, violations = verify_sparsity(tiny_field)
        assert violations == 0
        assert fraction == pytest.approx(math.floor(0.7 * tiny_field.total_weights) / tiny_field.total_weights)

    def test_biases_untouched(self, tiny_field):
        for b in tiny_field.trunk.biases:
            b.values[:] = 1e-9
        apply_prune(tiny_field, PruneConfig(ratio=0.9))
        assert all(np.all(b.values == np.float32(1e-9)) for b in tiny_field.trunk.biases)

    def test_idempotent(self, tiny_field):
        apply_prune(tiny_field, PruneConfig(ratio=0.5))
        first = masks(tiny_field)
        report = apply_prune(tiny_field, PruneConfig(ratio=0.5))
        assert report.pruned_count == math.floor(0.5 * tiny_field.total_weights)
        assert all(np.array_equal(a, w.mask) for a, w in zip(first, tiny_field.weight_matrices()))

    def test_higher_ratios_nest(self, tiny_field):
        low, high = tiny_field.copy(), tiny_field.copy()
        apply_prune(low, PruneConfig(ratio=0.3))
        apply_prune(high, PruneConfig(ratio=0.7))
        for lo, hi in zip(low.weight_matrices(), high.weight_matrices()):
            assert not np.any(hi.mask & ~lo.mask)

    def test_sequential_equals_direct(self, tiny_field):
        direct = tiny_field.copy()
        apply_prune(direct, PruneConfig(ratio=0.7))
        apply_prune(tiny_field, PruneConfig(ratio=0.3))
        apply_prune(tiny_field, PruneConfig(ratio=0.7))
        assert all(np.array_equal(a.mask, b.mask) for a, b in zip(direct.weight_matrices(), tiny_field.weight_matrices()))

    def test_ties_break_on_lower_index(self):
        spec = NetworkSpec(layer_widths=(2, 2))
        net = weights_from_arrays(spec, [np.array([[1.0, -1.0], [1.0, 2.0]])], [np.zeros(2)])
        apply_prune(net, PruneConfig(ratio=0.5))
        assert net.weights[0].mask.tolist() == [[False, False], [True, True]]

    def test_zero_ratio_prunes_nothing(self, tiny_field):
        report = apply_prune(tiny_field, PruneConfig(ratio=0.0))
        assert report.pruned_count == 0
        assert report.nominal_compression == 1.0

    def test_report_json(self, tmp_path, tiny_field):
        report = apply_prune(tiny_field, PruneConfig(ratio=0.5))
        report.write_json(tmp_path / "r.json")
        text = (tmp_path / "r.json").read_text()
        assert '"nominal_compression"' in text
        assert [layer.name for layer in report.layers] == tiny_field.layer_names()


class TestPruneSymmetries:
    @pytest.mark.parametrize("c", [0.5, 4.0])
    def test_scaling_selects_same_weights(self, c):
        a, b = plain_network(16, 12, seed=4), plain_network(16, 12, seed=4)
        b.weights[0].values *= c
        report_a = apply_prune(a, PruneConfig(ratio=0.6))
        report_b = apply_prune(b, PruneConfig(ratio=0.6))
        assert np.array_equal(a.weights[0].mask, b.weights[0].mask)
        assert report_b.threshold == pytest.approx(c * report_a.threshold)

    def test_permutation_keeps_surviving_magnitudes(self, rng):
        spec = NetworkSpec(layer_widths=(10, 9))
        values = rng.normal(size=(10, 9))
        shuffled = rng.permutation(values.ravel()).reshape(values.shape)
        a = weights_from_arrays(spec, [values], [np.zeros(9)])
        b = weights_from_arrays(spec, [shuffled], [np.zeros(9)])
        apply_prune(a, PruneConfig(ratio=0.7))
        apply_prune(b, PruneConfig(ratio=0.7))
        kept_a = np.sort(np.abs(a.weights[0].values[a.weights[0].mask]))
        kept_b = np.sort(np.abs(b.weights[0].values[b.weights[0].mask]))
        assert np.array_equal(kept_a, kept_b)


class TestLayerwisePrune:
    def test_each_matrix_loses_its_own_share(self, tiny_field):
        report = apply_prune(tiny_field, PruneConfig(ratio=0.5, scope=PruneScope.LAYERWISE))
        for layer, w in zip(report.layers, tiny_field.weight_matrices()):
            assert layer.pruned == math.floor(0.5 * w.size)
        assert report.scope == "layerwise"


class TestNominalCompression:
    @pytest.mark.parametrize("p, expected", [(0.3, 1.43), (0.5, 2.00), (0.7, 3.33), (0.9, 10.00)])
    def test_default_architecture(self, p, expected):
        field = build_field(seed=1)
        report = apply_prune(field, PruneConfig(ratio=p))
        assert round(report.nominal_compression, 2) == expected


# ── Codec ─────────────────────────────────────────────────────────

class TestRoundTrip:
    @pytest.mark.parametrize("p", [0.0, 0.5, 0.95])
    def test_save_load_save_is_byte_identical(self, tmp_path, tiny_field, p):
        apply_prune(tiny_field, PruneConfig(ratio=p))
        save(tiny_field, tmp_path / "a.nrfp")
        loaded = load_field(tmp_path / "a.nrfp")
        save(loaded, tmp_path / "b.nrfp")
        assert (tmp_path / "a.nrfp").read_bytes() == (tmp_path / "b.nrfp").read_bytes()
        assert loaded.seed == tiny_field.seed
        assert loaded.encoding == tiny_field.encoding
        for a, b in zip(tiny_field.weight_matrices(), loaded.weight_matrices()):
            assert np.array_equal(a.values, b.values)
            assert np.array_equal(a.mask, b.mask)

    def test_live_zero_weight_keeps_its_mask(self, tiny_field):
        w = tiny_field.trunk.weights[1]
        w.values[0, 0] = 0.0
        data, report = encode_model(tiny_field)
        back = decode_model(data)
        assert back.trunk.weights[1].mask[0, 0]
        assert back.trunk.weights[1].values[0, 0] == 0.0
        assert report.layer_encodings[1] == "dense"

    def test_live_zero_in_pruned_layer_needs_bitmap(self, tiny_field):
        w = tiny_field.trunk.weights[1]
        w.mask[1, :] = False
        w.apply_mask()
        w.values[0, 0] = 0.0
        data, report = encode_model(tiny_field)
        assert report.layer_encodings[1] == "bitmap"
        assert decode_model(data).trunk.weights[1].mask[0, 0]

    def test_loaded_model_renders_bit_exactly(self, tmp_path, tiny_field):
        apply_prune(tiny_field, PruneConfig(ratio=0.8))
        save(tiny_field, tmp_path / "m.nrfp")
        loaded = load_field(tmp_path / "m.nrfp")
        cfg = SamplingConfig(n_samples=8).evaluation()
        cam = axis_camera(6)
        a = render_image(tiny_field, cam, cfg, 2.35, 5.65)[0]
        b = render_image(loaded, cam, cfg, 2.35, 5.65)[0]
        assert np.array_equal(a, b)

    def test_plain_network(self, tmp_path):
        net = plain_network()
        save(net, tmp_path / "n.nrfp")
        back = load(tmp_path / "n.nrfp")
        assert back.spec == net.spec
        with pytest.raises(DecodeError):
            load_field(tmp_path / "n.nrfp")

    @pytest.mark.parametrize("force", list(LayerEncoding))
    def test_forced_encodings_decode_identically(self, tiny_field, force):
        apply_prune(tiny_field, PruneConfig(ratio=0.5))
        data, report = encode_model(tiny_field, force_encoding=force)
        back = decode_model(data)
        for a, b in zip(tiny_field.weight_matrices(), back.weight_matrices()):
            assert np.array_equal(a.values, b.values)
            assert np.array_equal(a.mask, b.mask)


class TestEncodingChoice:
    def test_unpruned_model_is_dense(self, tiny_field):
        _, report = encode_model(tiny_field)
        assert set(report.layer_encodings) == {"dense"}
        assert report.measured_ratio == 1.0

    def test_pruned_layers_use_bitmap(self, tiny_field):
        apply_prune(tiny_field, PruneConfig(ratio=0.9))
        _, report = encode_model(tiny_field)
        assert "bitmap" in report.layer_encodings
        assert report.encoded_bytes < report.dense_bytes

    @pytest.mark.parametrize("p", [0.3, 0.5, 0.7, 0.9])
    def test_measured_never_exceeds_nominal(self, p):
        field = build_field(seed=1)
        prune = apply_prune(field, PruneConfig(ratio=p))
        _, size = encode_model(field)
        summary = compression_summary(prune, size)
        assert 1.0 < summary.measured_ratio <= summary.nominal_ratio
        assert summary.nominal_ratio == pytest.approx(1.0 / (1.0 - p))


class TestCorruption:
    def _data(self, tiny_field, p=0.5):
        apply_prune(tiny_field, PruneConfig(ratio=p))
        return encode_model(tiny_field)[0]

    def test_bad_magic(self, tiny_field):
        data = self._data(tiny_field)
        with pytest.raises(BadMagicError):
            decode_model(b"XXXX" + data[4:])

    def test_unsupported_version(self, tiny_field):
        data = bytearray(self._data(tiny_field))
        data[4:6] = struct.pack("<H", 2)
        with pytest.raises(UnsupportedVersionError):
            decode_model(bytes(data))

    def test_flipped_byte(self, tiny_field):
        data = bytearray(self._data(tiny_field))
        data[len(data) // 2] ^= 0x40
        with pytest.raises(ChecksumMismatchError):
            decode_model(bytes(data))

    def test_short_file(self, tiny_field):
        with pytest.raises(TruncatedFileError):
            decode_model(self._data(tiny_field)[:10])

    def test_truncated_payload(self, tiny_field):
        body = self._data(tiny_field)[:-4]
        with pytest.raises(TruncatedFileError) as info:
            decode_model(reseal(body[:-50]))
        assert info.value.layer is not None

    def test_trailing_bytes(self, tiny_field):
        body = self._data(tiny_field)[:-4]
        with pytest.raises(DecodeError):
            decode_model(reseal(body + b"\x00" * 4))

    def test_popcount_mismatch(self):
        net = plain_network()
        net.weights[0].mask[0, :] = False
        net.weights[0].apply_mask()
        data, report = encode_model(net)
        assert report.layer_encodings == ["bitmap"]
        survivors = int(net.weights[0].mask.sum())
        count_at = len(data) - 4 - 4 * 4 - 4 - 4 * survivors - 4
        body = bytearray(data[:-4])
        body[count_at:count_at + 4] = struct.pack("<I", survivors + 1)
        with pytest.raises(PopcountMismatchError):
            decode_model(reseal(bytes(body)))

    def test_unknown_tag(self):
        data = encode_model(plain_network())[0]
        tag_at = codec._HEADER.size + 2 + 4 * 2 + codec._NET_TAIL.size
        body = bytearray(data[:-4])
        assert body[tag_at] == LayerEncoding.DENSE
        body[tag_at] = 9
        with pytest.raises(DecodeError):
            decode_model(reseal(bytes(body)))

    def test_missing_file(self, tmp_path):
        with pytest.raises(DatasetIOError):
            load(tmp_path / "absent.nrfp")


class TestSparsityViolation:
    def test_nonzero_masked_weight_refused(self, tmp_path, tiny_field):
        apply_prune(tiny_field, PruneConfig(ratio=0.5))
        w = tiny_field.head.weights[0]
        w.values[~w.mask] = 0.25
        with pytest.raises(SparsityViolationError):
            save(tiny_field, tmp_path / "bad.nrfp")
        assert not (tmp_path / "bad.nrfp").exists()

    def test_dense_cannot_represent_live_zero(self, tiny_field):
        tiny_field.trunk.weights[0].mask[0, 0] = False
        tiny_field.trunk.weights[0].apply_mask()
        tiny_field.trunk.weights[0].values[0, 1] = 0.0
        with pytest.raises(codec.CodecError):
            encode_model(tiny_field, force_encoding=LayerEncoding.DENSE)

    def test_decoded_model_type(self, tiny_field):
        assert isinstance(decode_model(encode_model(tiny_field)[0]), RadianceField)
