import dataclasses
import hashlib
import struct

import pytest
from hypothesis import given, settings, strategies as st

from cutpoint.allocator import OFFCHIP, assign_buffers, assign_with_fallback
from cutpoint.codegen import (ALIGN, FIELDS, HEADER, INSTR_BYTES, KINDS, MAGIC,
                              RESERVED_MASKS, WORDS, Instruction,
                              decode_instruction, emit_instructions,
                              encode_instruction, pack_image, split_weight_blob,
                              synthesize_input, synthesize_weights, unpack_image,
                              weight_blob)
from cutpoint.cost_model import evaluate_policy
from cutpoint.errors import CodegenError
from cutpoint.graph_ir import ACTIVATIONS, SE_ROLES, parse_network, plan_network
from cutpoint.hw import HwConfig
from cutpoint.optimizer import search_cut_points
from cutpoint.policy import FRAME, ROW, ReusePolicy
from cutpoint.zoo import shipped_models

from conftest import shipped_plan, toy_plan


def compile_plan(plan, policy=None, seed=0):
    policy = policy or ReusePolicy.all_frame(plan)
    a, policy = assign_with_fallback(plan, policy)
    prog = emit_instructions(plan, policy, a)
    image = pack_image(prog, synthesize_weights(plan.graph, seed=seed),
                       synthesize_input(plan.graph, seed=seed))
    return prog, a, image


# --------------------------------------------------------------------------
# instruction words


def u(bits):
    return st.integers(0, (1 << bits) - 1)


instructions = st.builds(
    Instruction,
    kind=st.sampled_from(KINDS), kernel=u(8), stride=u(4),
    scheme=st.sampled_from([ROW, FRAME]),
    in_w=u(16), in_h=u(16), out_w=u(16), out_h=u(16), in_c=u(16), out_c=u(16),
    alloc_in=u(2), alloc_out=u(2), alloc_aux=u(2),
    dw=st.booleans(), pool=st.booleans(), eltwise=st.booleans(),
    upsample=st.booleans(), se_role=st.sampled_from(SE_ROLES),
    load_in=st.booleans(), load_aux=st.booleans(), spill=st.booleans(),
    redirect=st.booleans(), concat_swap=st.booleans(),
    weight_addr=u(32), in_addr=u(32), out_addr=u(32), aux_addr=u(32),
    act_conv=st.sampled_from(ACTIVATIONS), act_pool=st.sampled_from(ACTIVATIONS),
    act_elt=st.sampled_from(ACTIVATIONS), act_up=st.sampled_from(ACTIVATIONS),
    conv_shift=u(5), elt_shift=u(5), batchnorm=st.booleans(),
    pool_k=u(4), pool_s=u(4), up_factor=u(4), terminal=st.booleans())


@settings(max_examples=300)
@given(instructions)
def test_encode_decode_round_trip(ins):
    words = encode_instruction(ins)
    assert len(words) == WORDS
    assert all(0 <= w < 1 << 32 for w in words)
    for w, mask in zip(words, RESERVED_MASKS):
        assert w & mask == 0
    assert decode_instruction(words) == ins
    assert len(ins.to_bytes()) == INSTR_BYTES == 44


@given(st.lists(u(32), min_size=WORDS, max_size=WORDS))
def test_decode_accepts_only_clean_words(words):
    try:
        ins = decode_instruction(words)
    except CodegenError:
        return
    assert list(encode_instruction(ins)) == words


def test_fields_do_not_overlap():
    for word in range(WORDS):
        used = 0
        for w, lo, width, _, _ in FIELDS:
            if w == word:
                m = ((1 << width) - 1) << lo
                assert used & m == 0
                used |= m
        assert used | RESERVED_MASKS[word] == 0xFFFFFFFF


@pytest.mark.parametrize("word,bit", [(0, 31), (4, 18), (9, 31), (10, 13)])
def test_reserved_bits_rejected(word, bit):
    words = list(encode_instruction(Instruction("conv")))
    words[word] |= 1 << bit
    with pytest.raises(CodegenError, match="reserved"):
        decode_instruction(words)


@pytest.mark.parametrize("opcode", [0, len(KINDS) + 1, 255])
def test_bad_opcode_rejected(opcode):
    words = list(encode_instruction(Instruction("conv")))
    words[0] = (words[0] & ~0xFF) | opcode
    with pytest.raises(CodegenError, match="opcode"):
        decode_instruction(words)


def test_bad_activation_code_rejected():
    words = list(encode_instruction(Instruction("conv")))
    words[9] |= 7
    with pytest.raises(CodegenError):
        decode_instruction(words)


def test_wrong_word_count_rejected():
    with pytest.raises(CodegenError):
        decode_instruction([0] * (WORDS - 1))


@pytest.mark.parametrize("change", [dict(in_w=1 << 16), dict(kernel=256),
                                    dict(conv_shift=32), dict(kind="lstm"),
                                    dict(alloc_in=4), dict(weight_addr=-1)])
def test_encode_rejects_out_of_range(change):
    with pytest.raises(CodegenError):
        encode_instruction(dataclasses.replace(Instruction("conv"), **change))


# --------------------------------------------------------------------------
# emission


def one_group_plan():
    return plan_network(parse_network({
        "name": "one", "input": {"w": 8, "h": 8, "c": 4},
        "layers": [{"kind": "conv", "out_c": 4, "kernel": 3, "activation": "relu",
                    "quant": 3}]}))


def test_one_group_is_one_44_byte_instruction():
    prog, _, image = compile_plan(one_group_plan())
    assert len(prog) == 1
    img = unpack_image(image)
    assert img.layout.instr_bytes == 44
    assert img.instructions == prog.instructions
    ins = prog.instructions[0]
    assert ins.kind == "conv" and ins.act_conv == "relu" and ins.conv_shift == 3
    assert ins.terminal and ins.load_in


@pytest.mark.parametrize("name", ["yolov2", "resnet50"])
def test_instruction_count_equals_group_count(name):
    plan = shipped_plan(name)
    pol = search_cut_points(plan).policy
    a, pol = assign_with_fallback(plan, pol)
    assert len(emit_instructions(plan, pol, a)) == len(plan.groups)


def test_fused_eltwise_flag_and_shortcut_address():
    plan = toy_plan("residual")
    prog, a, _ = compile_plan(plan, ReusePolicy.all_row(plan))
    fused = [(i, io) for i, io in enumerate(plan.ios) if io.eltwise is not None]
    assert fused
    for i, io in fused:
        ins = prog.instructions[i]
        assert ins.eltwise
        assert ins.encode()[4] >> 8 & 1 == 1
        assert ins.encode()[8] != 0          # DRAM address of the shortcut
        assert ins.alloc_aux == OFFCHIP


def test_frame_eltwise_reads_shortcut_from_its_buffer():
    plan = toy_plan("residual")
    prog, a, _ = compile_plan(plan)
    for i, io in enumerate(plan.ios):
        if io.eltwise is not None and io.shortcut_in != io.main_in:
            ins = prog.instructions[i]
            assert ins.eltwise and ins.alloc_aux == a[i].shortcut.buffer
            assert ins.aux_addr == a[i].shortcut.offset


def test_empty_net_is_header_only():
    plan = plan_network(parse_network({"name": "e", "input": {"w": 4, "h": 4, "c": 1},
                                       "layers": []}))
    prog, _, image = compile_plan(plan, ReusePolicy(()))
    assert len(image) == HEADER.size == ALIGN == 64
    assert image[:4] == MAGIC
    img = unpack_image(image)
    assert img.instructions == () and img.weights == b"" and img.input == b""


def test_address_overflow():
    plan = toy_plan("chain")
    pol = ReusePolicy.all_row(plan)
    a = assign_buffers(plan, pol)
    with pytest.raises(CodegenError, match="overflow"):
        emit_instructions(plan, pol, a, dram_bytes=1024)


def test_policy_assignment_mismatch():
    plan = toy_plan("chain")
    a = assign_buffers(plan, ReusePolicy.all_row(plan))
    with pytest.raises(CodegenError):
        emit_instructions(plan, ReusePolicy.all_frame(plan), a)


@pytest.mark.parametrize("name", shipped_models())
def test_buffer_ids_match_assignment(name):
    plan = shipped_plan(name)
    for cp in [(0,) * plan.segments.k, tuple(d // 2 for d in plan.segments.sub_depths)]:
        report, a = evaluate_policy(plan, ReusePolicy.from_cut_points(plan.segments, cp))
        prog = emit_instructions(plan, report.policy, a)
        for ins, g in zip(prog.instructions, a.groups):
            assert ins.scheme == g.scheme
            if ins.redirect:
                assert ins.alloc_in == ins.alloc_out == OFFCHIP
                continue
            assert ins.alloc_out == g.out.buffer
            if ins.kind != "concat" or g.inp.onchip:
                assert ins.alloc_in == g.inp.buffer
            aux = g.shortcut or g.vector or g.side
            if aux is not None:
                assert ins.alloc_aux == aux.buffer
            else:
                assert ins.alloc_aux == OFFCHIP


def test_image_round_trip_and_digest_stability():
    plan = shipped_plan("yolov2")
    pol = ReusePolicy.from_cut_points(plan.segments, (8,))
    p1, _, img1 = compile_plan(plan, pol)
    p2, _, img2 = compile_plan(plan, pol)
    assert hashlib.sha256(img1).hexdigest() == hashlib.sha256(img2).hexdigest()
    img = unpack_image(img1)
    assert img.instructions == p1.instructions
    assert img.layout.weight_bytes == plan.graph.weight_bytes()
    assert len(img.input) == 416 * 416 * 3
    assert img.buffer_bytes == p1.buffer_bytes


def test_different_seeds_change_the_image():
    plan = toy_plan("chain")
    assert compile_plan(plan, seed=1)[2] != compile_plan(plan, seed=2)[2]


def test_corrupted_images_rejected():
    _, _, image = compile_plan(toy_plan("chain"))
    bad = bytearray(image)
    bad[-1] ^= 1
    with pytest.raises(CodegenError, match="checksum"):
        unpack_image(bytes(bad))
    with pytest.raises(CodegenError, match="magic"):
        unpack_image(b"XXXX" + image[4:])
    with pytest.raises(CodegenError):
        unpack_image(image[:-1])
    with pytest.raises(CodegenError):
        unpack_image(image[:10])


def test_header_layout():
    _, _, image = compile_plan(toy_plan("chain"))
    magic, version, words, n = struct.unpack_from("<4sHHI", image)
    assert (magic, version, words) == (MAGIC, 1, WORDS)
    assert n == len(toy_plan("chain").groups)
    img = unpack_image(image)
    for off in (img.layout.instr_offset, img.layout.weight_offset,
                img.layout.input_offset, img.layout.feature_base):
        assert off % ALIGN == 0


def test_pack_checks_blob_sizes():
    plan = toy_plan("chain")
    a, pol = assign_with_fallback(plan, ReusePolicy.all_frame(plan))
    prog = emit_instructions(plan, pol, a)
    w = synthesize_weights(plan.graph)
    x = synthesize_input(plan.graph)
    with pytest.raises(CodegenError, match="input"):
        pack_image(prog, w, x[:-1])
    short = dict(w)
    short[0] = short[0][:-1]
    with pytest.raises(CodegenError):
        pack_image(prog, short, x)
    missing = dict(w)
    missing.pop(0)
    with pytest.raises(CodegenError, match="missing"):
        pack_image(prog, missing, x)


def test_weight_blob_round_trip():
    plan = toy_plan("squeeze")
    blobs = synthesize_weights(plan.graph)
    for lid, blob in blobs.items():
        layer = plan.graph.layers[lid]
        w, b = split_weight_blob(layer, blob)
        assert weight_blob(layer, w, b) == blob
        assert len(blob) == layer.weight_bytes()
