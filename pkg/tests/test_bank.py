"""Bank persistence, synthetic generation, episode sampling, noise injection."""

import struct
import zlib

import numpy as np
import pytest

from pfnl.bank import (ClassGallery, EmbeddingBank, Episode, generate_synthetic,
                       inject_label_noise, load_bank, load_bank_csv, sample_episode,
                       save_bank)
from pfnl.errors import BankDataError, BankFormatError, SamplingError


def tiny_bank(modality="visual"):
    if modality == "textual":
        vecs = np.array([[1.0, 0.0, 0.5], [0.25, -1.0, 2.0]])
        idx = [0, 1]
    else:
        vecs = np.array([[1.0, 0.0, 0.5], [0.5, 0.5, 0.5],
                         [0.25, -1.0, 2.0], [0.0, 2.0, -1.0]])
        idx = [0, 0, 1, 1]
    return EmbeddingBank(modality, 3, ["naïve_été", "class_b"], np.array(idx), vecs)


# ---------------------------------------------------------------------------
# binary format


def test_roundtrip_preserves_everything(tmp_path):
    bank = tiny_bank()
    path = tmp_path / "b.ebnk"
    save_bank(bank, path)
    loaded = load_bank(path)
    assert loaded.modality == bank.modality
    assert loaded.dim == bank.dim
    assert loaded.classes == bank.classes
    np.testing.assert_array_equal(loaded.class_index, bank.class_index)
    # storage is float32, so compare after one quantization
    np.testing.assert_array_equal(loaded.vectors, bank.vectors.astype("<f4").astype(np.float64))


def test_save_load_save_is_byte_identical(tmp_path):
    bank = tiny_bank("textual")
    p1, p2 = tmp_path / "a.ebnk", tmp_path / "b.ebnk"
    save_bank(bank, p1)
    save_bank(load_bank(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_bad_magic_reports_offset_zero(tmp_path):
    path = tmp_path / "bad.ebnk"
    path.write_bytes(b"NOPE" + b"\x00" * 40)
    with pytest.raises(BankFormatError) as exc:
        load_bank(path)
    assert "magic" in str(exc.value)
    assert exc.value.offset == 0


def test_corrupted_checksum_detected(tmp_path):
    path = tmp_path / "b.ebnk"
    save_bank(tiny_bank(), path)
    data = bytearray(path.read_bytes())
    data[20] ^= 0xFF  # flip a payload byte, leave the stored CRC alone
    path.write_bytes(bytes(data))
    with pytest.raises(BankFormatError) as exc:
        load_bank(path)
    assert "checksum" in str(exc.value)
    assert exc.value.offset == len(data) - 4


def test_truncated_file_detected(tmp_path):
    path = tmp_path / "b.ebnk"
    save_bank(tiny_bank(), path)
    data = path.read_bytes()
    path.write_bytes(data[:10])
    with pytest.raises(BankFormatError) as exc:
        load_bank(path)
    assert "too small" in str(exc.value)
    # mid-record cut: the trailing checksum no longer matches
    path.write_bytes(data[:30])
    with pytest.raises(BankFormatError) as exc:
        load_bank(path)
    assert "checksum" in str(exc.value)


def test_trailing_garbage_rejected(tmp_path):
    path = tmp_path / "b.ebnk"
    save_bank(tiny_bank(), path)
    path.write_bytes(path.read_bytes() + b"xx")
    with pytest.raises(BankFormatError):
        load_bank(path)


def test_record_class_index_out_of_range(tmp_path):
    bank = tiny_bank()
    path = tmp_path / "b.ebnk"
    save_bank(bank, path)
    data = bytearray(path.read_bytes())[:-4]
    # first record's class index lives right after the class table
    header = 4 + struct.calcsize("<IBIII")
    table = sum(2 + len(n.encode()) for n in bank.classes)
    struct.pack_into("<I", data, header + table, 99)
    body = bytes(data)
    path.write_bytes(body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))
    with pytest.raises(BankFormatError) as exc:
        load_bank(path)
    assert "out of range" in str(exc.value)


def test_nonfinite_record_named(tmp_path):
    bank = tiny_bank()
    path = tmp_path / "b.ebnk"
    save_bank(bank, path)
    data = bytearray(path.read_bytes())[:-4]
    header = 4 + struct.calcsize("<IBIII")
    table = sum(2 + len(n.encode()) for n in bank.classes)
    rec = header + table + 4 + 12 + 4  # second record's payload
    struct.pack_into("<f", data, rec, float("nan"))
    body = bytes(data)
    path.write_bytes(body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))
    with pytest.raises(BankDataError) as exc:
        load_bank(path)
    assert "record 1" in str(exc.value)


def test_textual_bank_must_have_one_record_per_class():
    with pytest.raises(BankDataError):
        EmbeddingBank("textual", 2, ["a", "b"], np.array([0, 0, 1]),
                      np.ones((3, 2)))


def test_class_without_records_rejected():
    with pytest.raises(BankDataError):
        EmbeddingBank("visual", 2, ["a", "b"], np.array([0, 0]), np.ones((2, 2)))


# ---------------------------------------------------------------------------
# CSV fixtures


def test_csv_roundtrip(tmp_path):
    path = tmp_path / "fixture.csv"
    path.write_text("a,1.0,0.0\nb,0.0,1.0\na,0.5,0.5\n")
    bank = load_bank_csv(path, modality="visual")
    assert bank.classes == ["a", "b"]
    np.testing.assert_array_equal(bank.class_index, [0, 1, 0])
    np.testing.assert_allclose(bank.vectors, [[1, 0], [0, 1], [0.5, 0.5]])
    # dispatch through load_bank by extension
    assert load_bank(path).dim == 2


def test_csv_ragged_row_rejected(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,1.0,0.0\nb,0.0\n")
    with pytest.raises(BankFormatError) as exc:
        load_bank_csv(path)
    assert "line 2" in str(exc.value)


# ---------------------------------------------------------------------------
# synthetic generation


def test_synthetic_shapes_and_unit_norms():
    vis, txt = generate_synthetic(5, 20, 16, 4.0, seed=7)
    assert vis.n_records == 100 and txt.n_records == 5
    assert vis.classes == txt.classes
    np.testing.assert_allclose(np.linalg.norm(vis.vectors, axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(txt.vectors, axis=1), 1.0, atol=1e-12)


def test_synthetic_deterministic():
    a = generate_synthetic(4, 6, 8, 2.0, seed=3)
    b = generate_synthetic(4, 6, 8, 2.0, seed=3)
    np.testing.assert_array_equal(a[0].vectors, b[0].vectors)
    np.testing.assert_array_equal(a[1].vectors, b[1].vectors)
    c = generate_synthetic(4, 6, 8, 2.0, seed=4)
    assert not np.array_equal(a[0].vectors, c[0].vectors)


def test_synthetic_nearest_mean_accuracy():
    # brute-force nearest-class-mean oracle on the documented fixture
    vis, _ = generate_synthetic(5, 20, 16, 4.0, seed=7)
    means = np.vstack([vis.vectors[vis.records_of(c)].mean(axis=0) for c in range(5)])
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    pred = np.argmax(vis.vectors @ means.T, axis=1)
    acc = float(np.mean(pred == vis.class_index))
    assert acc > 0.95, f"nearest-mean accuracy {acc}"


def test_synthetic_separation_extremes():
    vis, txt = generate_synthetic(3, 4, 8, float("inf"), seed=0)
    for c in range(3):
        rows = vis.vectors[vis.records_of(c)]
        assert float(np.abs(rows - rows[0]).max()) == 0.0
        np.testing.assert_allclose(rows[0], txt.text_vector(c), atol=1e-15)
    vis0, _ = generate_synthetic(3, 4, 8, 0.0, seed=0)
    np.testing.assert_allclose(np.linalg.norm(vis0.vectors, axis=1), 1.0, atol=1e-12)


def test_synthetic_rejects_bad_requests():
    with pytest.raises(SamplingError):
        generate_synthetic(1, 4, 8, 2.0, seed=0)
    with pytest.raises(SamplingError):
        generate_synthetic(3, 4, 8, -1.0, seed=0)


# ---------------------------------------------------------------------------
# episode sampling


def test_episode_layout_and_determinism(small_banks):
    vis, txt = small_banks
    a = sample_episode(vis, txt, 3, 2, 4, seed=42)
    b = sample_episode(vis, txt, 3, 2, 4, seed=42)
    np.testing.assert_array_equal(a.support_x, b.support_x)
    np.testing.assert_array_equal(a.query_y, b.query_y)
    assert a.way == 3 and a.shot == 2 and a.n_query == 4
    assert len(set(a.class_ids.tolist())) == 3
    # class-major support layout, K per class, labels are bank ids
    np.testing.assert_array_equal(a.support_y, np.repeat(a.class_ids, 2))
    np.testing.assert_array_equal(a.query_y, np.repeat(a.class_ids, 4))
    assert not a.noise_mask.any()
    c = sample_episode(vis, txt, 3, 2, 4, seed=43)
    assert not np.array_equal(a.support_x, c.support_x)


def test_episode_support_query_disjoint(small_banks):
    vis, txt = small_banks
    ep = sample_episode(vis, txt, 3, 3, 3, seed=5)
    sup = {tuple(r) for r in ep.support_x}
    qry = {tuple(r) for r in ep.query_x}
    assert not sup & qry


def test_episode_uses_whole_bank_when_way_equals_classes(small_banks):
    vis, txt = small_banks
    ep = sample_episode(vis, txt, vis.n_classes, 2, 2, seed=1)
    assert sorted(ep.class_ids.tolist()) == list(range(vis.n_classes))


def test_episode_class_frequency_uniform():
    vis, txt = generate_synthetic(3, 6, 4, 2.0, seed=0)
    counts = np.zeros(3)
    n = 1000
    for s in range(n):
        ep = sample_episode(vis, txt, 2, 2, 2, seed=s)
        counts[ep.class_ids] += 1
    freq = counts / n
    np.testing.assert_allclose(freq, 2.0 / 3.0, atol=0.05)


def test_episode_request_errors(small_banks):
    vis, txt = small_banks
    with pytest.raises(SamplingError):
        sample_episode(vis, txt, 99, 2, 2, seed=0)
    with pytest.raises(SamplingError):
        sample_episode(vis, txt, 3, 6, 6, seed=0)  # 12 > 8 records per class
    with pytest.raises(SamplingError):
        sample_episode(txt, vis, 3, 2, 2, seed=0)


# ---------------------------------------------------------------------------
# label noise


def test_noise_rate_zero_is_identity(small_banks):
    vis, txt = small_banks
    ep = sample_episode(vis, txt, 4, 4, 2, seed=9)
    noisy = inject_label_noise(ep, 0.0, seed=1)
    np.testing.assert_array_equal(noisy.support_y, ep.support_y)
    assert not noisy.noise_mask.any()


def test_noise_rate_one_flips_every_label(small_banks):
    vis, txt = small_banks
    ep = sample_episode(vis, txt, 4, 2, 2, seed=9)
    noisy = inject_label_noise(ep, 1.0, seed=1)
    assert noisy.noise_mask.all()
    assert np.all(noisy.support_y != ep.support_y)
    assert set(noisy.support_y.tolist()) <= set(ep.class_ids.tolist())
    np.testing.assert_array_equal(noisy.query_y, ep.query_y)
    np.testing.assert_array_equal(noisy.support_x, ep.support_x)


def test_noise_count_rounding(small_banks):
    vis, txt = small_banks
    ep = sample_episode(vis, txt, 4, 4, 2, seed=9)  # 16 support labels
    assert inject_label_noise(ep, 0.5, seed=3).noise_mask.sum() == 8
    # 3 labels at rate 0.5 -> 1.5 rounds half up to 2
    ep3 = sample_episode(vis, txt, 3, 1, 2, seed=9)
    assert inject_label_noise(ep3, 0.5, seed=3).noise_mask.sum() == 2


def test_noise_mask_matches_changed_labels(small_banks):
    vis, txt = small_banks
    ep = sample_episode(vis, txt, 4, 4, 2, seed=11)
    noisy = inject_label_noise(ep, 0.25, seed=5)
    np.testing.assert_array_equal(noisy.noise_mask, noisy.support_y != ep.support_y)
    again = inject_label_noise(ep, 0.25, seed=5)
    np.testing.assert_array_equal(noisy.support_y, again.support_y)
    other = inject_label_noise(ep, 0.25, seed=6)
    assert not np.array_equal(noisy.support_y, other.support_y)


def test_noise_rejects_bad_rate(small_banks):
    vis, txt = small_banks
    ep = sample_episode(vis, txt, 3, 2, 2, seed=0)
    with pytest.raises(SamplingError):
        inject_label_noise(ep, 1.5, seed=0)


# ---------------------------------------------------------------------------
# gallery


def test_gallery_unit_rows(small_banks):
    _, txt = small_banks
    gal = ClassGallery.from_bank(txt)
    assert gal.n_classes == txt.n_classes
    np.testing.assert_allclose(np.linalg.norm(gal.vectors, axis=1), 1.0, atol=1e-12)


def test_gallery_requires_textual(small_banks):
    vis, _ = small_banks
    with pytest.raises(BankDataError):
        ClassGallery.from_bank(vis)
