import random
import struct

import numpy as np
import pytest

from helpers import ulp_distance
from surgeon.surgery import SurgeryPlan, detect_tied, mean_subtoken_init, resize_embeddings
from surgeon.tensorstore import TensorRecord, TensorStore, dtype_width, narrow, widen
from surgeon.tokenizer import BYTE_TO_UNIT, TokenizerModel

# -- fixtures -----------------------------------------------------------------


def ascii_model(v_old: int) -> TokenizerModel:
    """Base tokenizer whose ids are raw bytes, truncated to ``v_old`` entries.
    Surfaces built from chr(33)..chr(39) keep every byte below 40."""
    return TokenizerModel(vocab={BYTE_TO_UNIT[i]: i for i in range(v_old)})


def store_from(rows, dtype="f32", name="embed") -> TensorStore:
    arr = np.asarray(rows, dtype=np.float32)
    return TensorStore(tensors={name: TensorRecord(dtype=dtype, shape=arr.shape, data=narrow(arr, dtype))})


# -- plan validation ----------------------------------------------------------


def test_plan_rejects_non_growth():
    with pytest.raises(ValueError, match="exceed"):
        SurgeryPlan(embed_tensor_name="e", v_old=4, v_new=4, hidden_dim=2, unk_id=0)


def test_plan_rejects_unk_outside_old_range():
    with pytest.raises(ValueError, match="unk_id"):
        SurgeryPlan(embed_tensor_name="e", v_old=4, v_new=6, hidden_dim=2, unk_id=4)


# -- tied detection -----------------------------------------------------------


def test_detect_tied_when_no_head_named():
    plan = SurgeryPlan(embed_tensor_name="embed", v_old=2, v_new=3, hidden_dim=1, unk_id=0)
    assert detect_tied(store_from([[1.0], [2.0]]), plan)


def test_detect_tied_when_head_absent():
    plan = SurgeryPlan(
        embed_tensor_name="embed", v_old=2, v_new=3, hidden_dim=1, unk_id=0, head_tensor_name="head"
    )
    assert detect_tied(store_from([[1.0], [2.0]]), plan)


def test_detect_untied_when_head_present():
    store = store_from([[1.0], [2.0]])
    store.tensors["head"] = store.tensors["embed"]
    plan = SurgeryPlan(
        embed_tensor_name="embed", v_old=2, v_new=3, hidden_dim=1, unk_id=0, head_tensor_name="head"
    )
    assert not detect_tied(store, plan)


def test_detect_untied_shape_mismatch_warns():
    store = store_from([[1.0], [2.0]])
    store.tensors["head"] = TensorRecord(dtype="f32", shape=(1, 1), data=b"\x00" * 4)
    plan = SurgeryPlan(
        embed_tensor_name="embed", v_old=2, v_new=3, hidden_dim=1, unk_id=0, head_tensor_name="head"
    )
    with pytest.warns(UserWarning, match="shape"):
        assert not detect_tied(store, plan)


# -- resize -------------------------------------------------------------------


def test_resize_zero_fills_tail():
    plan = SurgeryPlan(embed_tensor_name="embed", v_old=2, v_new=4, hidden_dim=2, unk_id=0)
    out = resize_embeddings(store_from([[1.0, 2.0], [3.0, 4.0]]), plan)
    grown = out["embed"]
    assert grown.shape == (4, 2)
    assert grown.to_float32()[2:].tolist() == [[0.0, 0.0], [0.0, 0.0]]
    assert grown.data[:16] == store_from([[1.0, 2.0], [3.0, 4.0]])["embed"].data


def test_resize_skips_absent_head():
    plan = SurgeryPlan(
        embed_tensor_name="embed", v_old=2, v_new=3, hidden_dim=2, unk_id=0, head_tensor_name="head"
    )
    out = resize_embeddings(store_from([[1.0, 2.0], [3.0, 4.0]]), plan)
    assert "head" not in out


def test_resize_grows_present_head():
    store = store_from([[1.0, 2.0], [3.0, 4.0]])
    store.tensors["head"] = TensorRecord(dtype="f32", shape=(2, 2), data=struct.pack("<4f", 9, 8, 7, 6))
    plan = SurgeryPlan(
        embed_tensor_name="embed", v_old=2, v_new=3, hidden_dim=2, unk_id=0, head_tensor_name="head"
    )
    out = resize_embeddings(store, plan)
    assert out["head"].shape == (3, 2)
    assert out["head"].to_float32()[2].tolist() == [0.0, 0.0]


def test_resize_rejects_wrong_shape():
    plan = SurgeryPlan(embed_tensor_name="embed", v_old=3, v_new=4, hidden_dim=2, unk_id=0)
    with pytest.raises(ValueError, match="shape"):
        resize_embeddings(store_from([[1.0, 2.0], [3.0, 4.0]]), plan)


# -- mean init ----------------------------------------------------------------


def grown_ascii_setup(rows, dtype="f32", v_new=None, head=False):
    arr = np.asarray(rows, dtype=np.float32)
    v_old, d = arr.shape
    v_new = v_new or v_old + 1
    store = store_from(rows, dtype=dtype)
    if head:
        head_arr = arr[::-1].copy()
        store.tensors["head"] = TensorRecord(dtype=dtype, shape=head_arr.shape, data=narrow(head_arr, dtype))
    plan = SurgeryPlan(
        embed_tensor_name="embed",
        v_old=v_old,
        v_new=v_new,
        hidden_dim=d,
        unk_id=0,
        head_tensor_name="head" if head else None,
    )
    return resize_embeddings(store, plan), plan, ascii_model(v_old)


def test_two_row_mean_is_exact():
    rows = np.zeros((40, 2), dtype=np.float32)
    rows[33] = [1.0, 1.0]
    rows[34] = [3.0, 5.0]
    store, plan, base = grown_ascii_setup(rows)
    out = mean_subtoken_init(store, plan, base, [(40, '!"')])  # bytes 33, 34
    assert out["embed"].to_float32()[40].tolist() == [2.0, 3.0]


def test_single_subtoken_copies_row():
    rows = np.zeros((40, 3), dtype=np.float32)
    rows[35] = [7.5, -1.25, 0.0]
    store, plan, base = grown_ascii_setup(rows)
    out = mean_subtoken_init(store, plan, base, [(40, "#")])
    assert out["embed"].to_float32()[40].tolist() == [7.5, -1.25, 0.0]


def test_empty_decomposition_falls_back_to_unk_row():
    rows = np.zeros((40, 2), dtype=np.float32)
    rows[0] = [42.0, -42.0]  # unk_id is 0
    store, plan, base = grown_ascii_setup(rows)
    out = mean_subtoken_init(store, plan, base, [(40, "")])
    assert out["embed"].to_float32()[40].tolist() == [42.0, -42.0]


def test_old_rows_never_roundtripped():
    # plant a non-canonical NaN payload in an old row; any float roundtrip
    # would disturb it, a byte copy will not
    raw = struct.pack("<4I", 0x7FC00123, 0xFFC00456, 0x3F800000, 0x00000001)
    store = TensorStore(tensors={"embed": TensorRecord(dtype="f32", shape=(2, 2), data=raw)})
    plan = SurgeryPlan(embed_tensor_name="embed", v_old=2, v_new=3, hidden_dim=2, unk_id=0)
    base = TokenizerModel(vocab={BYTE_TO_UNIT[0]: 0, BYTE_TO_UNIT[1]: 1})
    out = mean_subtoken_init(resize_embeddings(store, plan), plan, base, [(2, "\x01")])
    assert out["embed"].data[:16] == raw


def test_untied_head_gets_identical_new_rows():
    rows = np.arange(80, dtype=np.float32).reshape(40, 2) / 7
    store, plan, base = grown_ascii_setup(rows, head=True)
    out = mean_subtoken_init(store, plan, base, [(40, "!#")])
    row_bytes = 2 * dtype_width("f32")
    assert out["embed"].data[40 * row_bytes :] == out["head"].data[40 * row_bytes :]
    # old head rows untouched (head fixture was the reversed embedding)
    assert out["head"].data[: 40 * row_bytes] == narrow(rows[::-1].copy(), "f32")


def test_tied_checkpoint_touches_only_embedding():
    rows = np.ones((40, 2), dtype=np.float32)
    store, plan, base = grown_ascii_setup(rows)  # no head tensor
    out = mean_subtoken_init(store, plan, base, [(40, "!")])
    assert set(out.tensors) == {"embed"}


def test_subtoken_id_at_or_above_v_old_rejected():
    rows = np.zeros((35, 2), dtype=np.float32)
    store, plan, base0 = grown_ascii_setup(rows)
    base = ascii_model(40)  # can produce ids up to 39 >= v_old of 35
    with pytest.raises(ValueError, match="v_old"):
        mean_subtoken_init(store, plan, base, [(35, "'")])  # byte 39


def test_new_ids_must_cover_range_exactly():
    rows = np.zeros((40, 2), dtype=np.float32)
    store, plan, base = grown_ascii_setup(rows, v_new=42)
    with pytest.raises(ValueError, match="cover"):
        mean_subtoken_init(store, plan, base, [(40, "!")])
    with pytest.raises(ValueError, match="cover"):
        mean_subtoken_init(store, plan, base, [(40, "!"), (42, "#")])


def test_init_requires_resize_first():
    rows = np.zeros((40, 2), dtype=np.float32)
    store = store_from(rows)
    plan = SurgeryPlan(embed_tensor_name="embed", v_old=40, v_new=41, hidden_dim=2, unk_id=0)
    with pytest.raises(ValueError, match="resize"):
        mean_subtoken_init(store, plan, ascii_model(40), [(40, "!")])


def test_head_dtype_must_match_embed():
    rows = np.zeros((40, 2), dtype=np.float32)
    store, plan, base = grown_ascii_setup(rows, head=True)
    head = store.tensors["head"]
    store.tensors["head"] = TensorRecord(
        dtype="bf16", shape=head.shape, data=narrow(head.to_float32(), "bf16")
    )
    with pytest.raises(ValueError, match="dtype"):
        mean_subtoken_init(store, plan, base, [(40, "!")])


# -- oracle comparison --------------------------------------------------------


def oracle_new_rows(store, plan, base, new_tokens) -> bytes:
    """Recompute the fresh rows with float64 accumulation."""
    old = widen(store[plan.embed_tensor_name].data, store[plan.embed_tensor_name].dtype)
    old = old.reshape(plan.v_new, plan.hidden_dim)[: plan.v_old].astype(np.float64)
    fresh = np.zeros((plan.v_new - plan.v_old, plan.hidden_dim), dtype=np.float64)
    for tid, surface in new_tokens:
        ids = base.encode(surface) or [plan.unk_id]
        fresh[tid - plan.v_old] = old[ids].mean(axis=0)
    return narrow(fresh.astype(np.float32), store[plan.embed_tensor_name].dtype)


@pytest.mark.parametrize("dtype", ["bf16", "f16", "f32"])
def test_mean_matches_float64_oracle_within_one_ulp(dtype):
    rng = random.Random(71)
    nprng = np.random.default_rng(73)
    alphabet = "!\"#$%&'"
    for _ in range(40):
        v_old, d = 40, rng.randrange(1, 9)
        n_new = rng.randrange(1, 8)
        # narrow dtypes tolerate long sums; keep f32 to pair means, where
        # the float32 pipeline is provably correctly rounded
        max_len = 2 if dtype == "f32" else 4
        surfaces = [
            "".join(rng.choice(alphabet) for _ in range(rng.randrange(1, max_len + 1)))
            for _ in range(n_new)
        ]
        rows = nprng.uniform(1.0, 2.0, size=(v_old, d)).astype(np.float32)
        store = TensorStore(
            tensors={"embed": TensorRecord(dtype=dtype, shape=(v_old, d), data=narrow(rows, dtype))}
        )
        plan = SurgeryPlan(
            embed_tensor_name="embed", v_old=v_old, v_new=v_old + n_new, hidden_dim=d, unk_id=0
        )
        base = ascii_model(v_old)
        new_tokens = [(v_old + i, s) for i, s in enumerate(surfaces)]
        out = mean_subtoken_init(resize_embeddings(store, plan), plan, base, new_tokens)
        row_bytes = d * dtype_width(dtype)
        got = out["embed"].data[v_old * row_bytes :]
        want = oracle_new_rows(out, plan, base, new_tokens)
        assert int(ulp_distance(got, want, dtype).max()) <= 1
