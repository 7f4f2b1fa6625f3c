import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from advface.vault import (
    VaultCorruption,
    VaultError,
    VaultNotFound,
    VaultRecord,
    decode_record,
    encode_record,
    vault_ids,
    vault_load,
    vault_load_all,
    vault_store,
)


def make_record(rng, record_id="id0/x.png", shape=(4, 5, 5)):
    return VaultRecord(
        record_id=record_id,
        identity="id0",
        feature=rng.normal(size=shape).astype(np.float32),
        protection={"epsilon": 0.2},
        provenance={"extractor_fingerprint": "abc123"},
    )


def test_round_trip_bit_exact(tmp_path, rng):
    record = make_record(rng, shape=(64, 19, 19))
    rid = vault_store(record, tmp_path / "vault")
    loaded = vault_load(tmp_path / "vault", rid)
    assert loaded.record_id == record.record_id
    assert loaded.identity == record.identity
    assert loaded.feature.dtype == np.float32
    assert np.array_equal(loaded.feature, record.feature)
    assert loaded.feature.tobytes() == record.feature.tobytes()
    assert loaded.protection == record.protection
    assert loaded.provenance == record.provenance


def test_tampered_payload_raises_corruption(tmp_path, rng):
    record = make_record(rng)
    vault_store(record, tmp_path / "vault")
    path = next((tmp_path / "vault").glob("*.advf"))
    blob = bytearray(path.read_bytes())
    blob[-40] ^= 0xFF   # flip one payload byte, away from the trailing CRC
    path.write_bytes(bytes(blob))
    with pytest.raises(VaultCorruption):
        vault_load(tmp_path / "vault", record.record_id)


def test_unknown_record_raises_not_found(tmp_path, rng):
    vault_store(make_record(rng), tmp_path / "vault")
    with pytest.raises(VaultNotFound):
        vault_load(tmp_path / "vault", "nope")


def test_bad_magic_rejected(rng):
    blob = encode_record(make_record(rng))
    with pytest.raises(VaultError):
        decode_record(b"XXXX" + blob[4:])


def test_non_finite_feature_rejected(rng):
    record = make_record(rng)
    record.feature[0, 0, 0] = np.nan
    with pytest.raises(VaultError):
        encode_record(record)


def test_store_many_enumerates_distinct_ids(tmp_path, rng):
    n = 200
    for k in range(n):
        vault_store(make_record(rng, record_id=f"id{k // 10}/{k % 10}.png"), tmp_path / "v")
    ids = vault_ids(tmp_path / "v")
    assert len(ids) == n
    assert len(set(ids)) == n
    assert len(vault_load_all(tmp_path / "v")) == n


def test_record_id_sanitized_but_preserved(tmp_path, rng):
    record = make_record(rng, record_id="some identity/img 01.png")
    rid = vault_store(record, tmp_path / "vault")
    assert vault_load(tmp_path / "vault", rid).record_id == "some identity/img 01.png"


@settings(max_examples=40, deadline=None)
@given(
    feature=arrays(
        np.float32,
        st.tuples(st.integers(1, 4), st.integers(1, 7), st.integers(1, 7)),
        elements=st.floats(-1e20, 1e20, width=32, allow_nan=False, allow_infinity=False),
    )
)
def test_encode_decode_is_identity_on_payload(feature):
    record = VaultRecord(record_id="r", identity="i", feature=feature)
    loaded = decode_record(encode_record(record))
    assert loaded.feature.tobytes() == np.ascontiguousarray(feature, dtype="<f4").tobytes()
    assert loaded.feature.shape == feature.shape
