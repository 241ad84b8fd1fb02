import hashlib
import os
import struct

import numpy as np
import pytest

from zsax.errors import CorruptHeader, OutOfBounds
from zsax.series import DataSeries, random_walk_generate
from zsax.storage import BlockFile, IoStats, RawFile, append_series, fetch_series, write_dataset


def test_golden_raw_bytes_with_timestamps(tmp_path):
    path = tmp_path / "g.ccnt"
    raw = RawFile.create(path, 2, IoStats(), timestamps=True)
    raw.append_series(DataSeries(np.array([1.0, -2.5]), timestamp=7))
    raw.close()
    expect = (b"CCNT" + struct.pack("<III", 1, 2, 1) + struct.pack("<Q", 1)
              + struct.pack("<Q", 7) + struct.pack("<2f", 1.0, -2.5))
    assert path.read_bytes() == expect


def test_golden_raw_bytes_plain(tmp_path):
    path = tmp_path / "g.ccnt"
    raw = RawFile.create(path, 3, IoStats(), timestamps=False)
    raw.append_series(np.array([0.5, 0.25, -1.0]))
    raw.append_series(np.array([0.0, 1.0, 2.0]))
    raw.close()
    data = path.read_bytes()
    assert data[:24] == b"CCNT" + struct.pack("<IIIQ", 1, 3, 0, 2)
    assert data[24:] == struct.pack("<6f", 0.5, 0.25, -1.0, 0.0, 1.0, 2.0)


def test_dataset_size_and_checksum(tmp_path):
    a, b = tmp_path / "a.ccnt", tmp_path / "b.ccnt"
    write_dataset(a, random_walk_generate(100, 256, 1), 256, IoStats(), timestamps=False)
    write_dataset(b, random_walk_generate(100, 256, 1), 256, IoStats(), timestamps=False)
    assert os.path.getsize(a) == RawFile.header_size + 100 * 256 * 4
    assert hashlib.sha256(a.read_bytes()).digest() == hashlib.sha256(b.read_bytes()).digest()
    write_dataset(b, random_walk_generate(100, 256, 1), 256, IoStats(), timestamps=True)
    assert os.path.getsize(b) == RawFile.header_size + 100 * (256 * 4 + 8)


def test_generated_file_is_normalized(tmp_path):
    path = tmp_path / "d.ccnt"
    write_dataset(path, random_walk_generate(200, 64, 2), 64, IoStats())
    vals = RawFile.open(path, IoStats()).read_records(0, 200)["series"].astype(np.float64)
    assert np.all(np.abs(vals.mean(1)) < 1e-5) and np.all(np.abs(vals.std(1) - 1) < 1e-5)


def test_fetch_roundtrip_and_single_record(tmp_path):
    stats = IoStats(block_size_records=4)
    raw = RawFile.create(tmp_path / "r.ccnt", 8, stats)
    x = np.random.default_rng(0).normal(size=8).astype(np.float32)
    off = raw.append_series(DataSeries(x.astype(np.float64), timestamp=3))
    assert off == RawFile.header_size
    raw.flush()
    s = fetch_series(raw, off)
    assert s.timestamp == 3
    np.testing.assert_array_equal(s.values, x.astype(np.float64))
    assert stats.records_fetched == 1


def test_append_offsets(tmp_path):
    raw = RawFile.create(tmp_path / "r.ccnt", 4, IoStats())
    a = append_series(raw, DataSeries(np.zeros(4), 1))
    b = append_series(raw, DataSeries(np.ones(4), 2))
    assert a == raw.header_size and b - a == raw.record_width
    with pytest.raises(ValueError):
        raw.append_series(np.zeros(5))


def test_many_appends_then_scan(tmp_path):
    raw = RawFile.create(tmp_path / "r.ccnt", 16, IoStats())
    data = np.random.default_rng(1).normal(size=(1000, 16)).astype(np.float32)
    for i, row in enumerate(data):
        raw.append_series(DataSeries(row.astype(np.float64), timestamp=i + 1))
    raw.close()
    back = RawFile.open(tmp_path / "r.ccnt", IoStats())
    assert back.count == 1000
    got = np.concatenate([r["series"] for _, r in back.iter_chunks(128)])
    np.testing.assert_array_equal(got, data)
    assert back.read_records(0, 1000)["ts"].tolist() == list(range(1, 1001))


def test_sequential_fetch_has_no_random_seeks(tmp_path):
    path = tmp_path / "r.ccnt"
    write_dataset(path, random_walk_generate(500, 32, 0), 32, IoStats())
    stats = IoStats(block_size_records=16)
    raw = RawFile.open(path, stats)
    stats.reset()
    for i in range(raw.count):
        raw.fetch(raw.offset_of(i))
    assert stats.random_seeks == 0
    assert stats.records_fetched == 500
    assert stats.blocks_read >= 500 // 16


def test_backward_fetch_counts_seeks(tmp_path):
    path = tmp_path / "r.ccnt"
    write_dataset(path, random_walk_generate(100, 32, 0), 32, IoStats())
    stats = IoStats(block_size_records=2)
    raw = RawFile.open(path, stats)
    stats.reset()
    for i in range(99, -1, -10):
        raw.fetch(raw.offset_of(i))
    assert stats.random_seeks == 10


def test_fetch_many_matches_fetch(tmp_path):
    path = tmp_path / "r.ccnt"
    write_dataset(path, random_walk_generate(50, 16, 0), 16, IoStats())
    raw = RawFile.open(path, IoStats())
    offs = [raw.offset_of(i) for i in (3, 7, 7, 40)]
    many = raw.fetch_many(offs)
    for row, off in zip(many, offs):
        np.testing.assert_array_equal(row, raw.fetch(off))
    with pytest.raises(OutOfBounds):
        raw.fetch_many([raw.offset_of(50)])


def test_out_of_bounds_and_misaligned(tmp_path):
    path = tmp_path / "r.ccnt"
    write_dataset(path, random_walk_generate(5, 8, 0), 8, IoStats())
    raw = RawFile.open(path, IoStats())
    with pytest.raises(OutOfBounds):
        raw.fetch(raw.offset_of(5))
    with pytest.raises(OutOfBounds):
        raw.fetch(raw.header_size + 3)


def test_corrupt_headers(tmp_path):
    bad = tmp_path / "bad.ccnt"
    bad.write_bytes(b"XXXX" + bytes(20))
    with pytest.raises(CorruptHeader):
        RawFile.open(bad, IoStats())
    bad.write_bytes(b"CC")
    with pytest.raises(CorruptHeader):
        RawFile.open(bad, IoStats())
    bad.write_bytes(b"CCNT" + struct.pack("<IIIQ", 1, 4, 0, 10))
    with pytest.raises(CorruptHeader):
        RawFile.open(bad, IoStats())


def test_block_cache_and_counters(tmp_path):
    stats = IoStats(block_size_records=4)
    f = BlockFile(tmp_path / "b", stats, 8, create=True)
    f.write_at(0, bytes(64))  # blocks 0 and 1
    assert stats.blocks_written == 2 and stats.random_seeks == 0  # starting at block 0 is sequential
    f.write_at(32, bytes(8))  # block 1 still cached for writing
    assert stats.blocks_written == 2
    f.read_at(0, 8)
    f.read_at(8, 8)
    assert stats.blocks_read == 1
    f.read_at(40, 8)
    assert stats.blocks_read == 2
    snap = stats.copy()
    f.read_at(0, 8)
    assert (stats - snap).blocks_read == 1 and (stats - snap).random_seeks == 1
    f.close()


def test_iostats_validation_and_reset():
    with pytest.raises(ValueError):
        IoStats(block_size_records=0)
    s = IoStats(block_size_records=3)
    s.add(blocks_read=2, blocks_written=1)
    assert s.transfers == 3
    s.reset()
    assert s.as_dict() == {"block_size_records": 3, "blocks_read": 0, "blocks_written": 0,
                           "records_fetched": 0, "random_seeks": 0}
