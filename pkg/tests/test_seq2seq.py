"""Model, optimizer, student-init, and checkpoint tests.

Gradients are checked against a central finite-difference oracle with the
whole graph in double precision; attention behavior is checked against direct
numeric recomputation.
"""

import json
import math
import random
import struct

import pytest
import torch
import torch.nn.functional as F

from discal.corpus import BOS_ID, EOS_ID, Vocabulary
from discal.seq2seq import (
    AttentionScale,
    CheckpointMagicError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    ModelConfig,
    Seq2SeqModel,
    adam_step,
    backward,
    default_decoder_indices,
    forward_logprobs,
    init_adam_state,
    init_student_from_teacher,
    load_checkpoint,
    sample_attention_scale,
    save_checkpoint,
    scaled_attention,
)

TINY = ModelConfig(
    vocab_size=11,
    d_model=8,
    num_heads=2,
    ff_dim=16,
    encoder_layers=1,
    decoder_layers=1,
    max_positions=16,
    dropout_rate=0.0,
)


def tiny_model(seed=0, dtype=torch.float64):
    model = Seq2SeqModel(TINY, seed=seed).to(dtype)
    model.eval()
    return model


def nll_of(model, document, target):
    src = torch.tensor([document], dtype=torch.long)
    tgt = torch.tensor([[BOS_ID] + target], dtype=torch.long)
    logits = model.forward_batch(src, None, tgt)
    logprobs = F.log_softmax(logits[0], dim=-1)
    scored = target + [EOS_ID]
    total = sum(logprobs[t, tok] for t, tok in enumerate(scored))
    return -total / len(scored)


def finite_difference_grads(model, loss_fn, h=1e-4):
    grads = {}
    with torch.no_grad():
        for name, param in model.named_parameters():
            flat = param.view(-1)
            grad = torch.zeros_like(flat)
            for i in range(flat.numel()):
                original = flat[i].item()
                flat[i] = original + h
                plus = loss_fn().item()
                flat[i] = original - h
                minus = loss_fn().item()
                flat[i] = original
                grad[i] = (plus - minus) / (2.0 * h)
            grads[name] = grad.view(param.shape)
    return grads


def test_model_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        ModelConfig(vocab_size=10, d_model=10, num_heads=4).validate()
    with pytest.raises(ValueError, match="dropout_rate"):
        ModelConfig(vocab_size=10, dropout_rate=1.0).validate()
    with pytest.raises(ValueError, match="positive"):
        ModelConfig(vocab_size=0).validate()


def test_attention_scale_bounds():
    with pytest.raises(ValueError):
        AttentionScale(0.5)
    assert AttentionScale(1.0).k == 1.0


def test_sample_attention_scale_degenerate_and_bounds():
    rng = random.Random(5)
    assert sample_attention_scale(1.0, rng).k == 1.0
    with pytest.raises(ValueError):
        sample_attention_scale(0.9, rng)


def test_sample_attention_scale_uniform_statistics():
    rng = random.Random(97)
    draws = [sample_attention_scale(2.0, rng).k for _ in range(10_000)]
    assert all(1.0 <= k <= 2.0 for k in draws)
    mean = sum(draws) / len(draws)
    assert 1.48 <= mean <= 1.52
    again = random.Random(97)
    redraws = [sample_attention_scale(2.0, again).k for _ in range(100)]
    assert redraws == draws[:100]


def test_scaled_attention_matches_manual_softmax():
    torch.manual_seed(0)
    q = torch.randn(3, 4, dtype=torch.float64)
    k = torch.randn(5, 4, dtype=torch.float64)
    v = torch.randn(5, 6, dtype=torch.float64)
    out = scaled_attention(q, k, v)
    scores = (q @ k.T) / math.sqrt(4)
    expected = torch.softmax(scores, dim=-1) @ v
    assert torch.allclose(out, expected, atol=1e-12)


def test_scaled_attention_large_k_approaches_uniform():
    torch.manual_seed(1)
    q = torch.randn(2, 4)
    k = torch.randn(7, 4)
    v = torch.randn(7, 4)
    _, weights = scaled_attention(q, k, v, AttentionScale(1e6), return_weights=True)
    assert torch.allclose(weights, torch.full_like(weights, 1 / 7), atol=1e-4)


def test_scaled_attention_entropy_nondecreasing_in_k():
    torch.manual_seed(2)
    q = torch.randn(4, 8, dtype=torch.float64)
    k = torch.randn(6, 8, dtype=torch.float64)
    v = torch.randn(6, 8, dtype=torch.float64)
    entropies = []
    for scale in (1.0, 1.5, 2.0):
        _, weights = scaled_attention(q, k, v, AttentionScale(scale), return_weights=True)
        entropies.append((-weights * weights.log()).sum(dim=-1))
    assert bool((entropies[0] <= entropies[1] + 1e-12).all())
    assert bool((entropies[1] <= entropies[2] + 1e-12).all())


def test_scaled_attention_masking_and_row_sums():
    torch.manual_seed(3)
    q = torch.randn(3, 4)
    k = torch.randn(5, 4)
    v = torch.randn(5, 4)
    mask = torch.zeros(3, 5, dtype=torch.bool)
    mask[:, 4] = True
    rng = random.Random(11)
    for _ in range(10):
        scale = AttentionScale(1.0 + 3.0 * rng.random())
        _, weights = scaled_attention(q, k, v, scale, mask, return_weights=True)
        assert torch.allclose(weights.sum(dim=-1), torch.ones(3), atol=1e-6)
        assert bool((weights[:, 4] == 0).all())


def test_scaled_attention_rejects_nonfinite():
    q = torch.full((2, 4), float("nan"))
    k = torch.randn(3, 4)
    v = torch.randn(3, 4)
    with pytest.raises(ValueError, match="queries"):
        scaled_attention(q, k, v)


def test_forward_logprobs_rows_normalize():
    model = tiny_model()
    out = forward_logprobs(model, [4, 5, 6, 7], [8, 9])
    assert out.shape == (3, TINY.vocab_size)
    row_mass = torch.logsumexp(out, dim=-1)
    assert torch.allclose(row_mass, torch.zeros(3, dtype=out.dtype), atol=1e-6)


def test_forward_logprobs_continuous_in_k():
    model = tiny_model()
    base = forward_logprobs(model, [4, 5, 6], [7], AttentionScale(1.0))
    nudged = forward_logprobs(model, [4, 5, 6], [7], AttentionScale(1.0 + 1e-12))
    assert (base - nudged).abs().max().item() < 1e-6


def test_forward_logprobs_rejects_overlong_input():
    model = tiny_model()
    with pytest.raises(ValueError, match="max_positions"):
        forward_logprobs(model, [4] * 17, [5])
    with pytest.raises(ValueError, match="max_positions"):
        forward_logprobs(model, [4, 5], [5] * 16)


def test_forward_logprobs_deterministic():
    model = tiny_model()
    a = forward_logprobs(model, [4, 5, 6], [7, 8])
    b = forward_logprobs(model, [4, 5, 6], [7, 8])
    assert torch.equal(a, b)


def test_nll_gradients_match_finite_differences():
    model = tiny_model(seed=3)
    document = [4, 5, 6, 7, 8]
    target = [9, 10, 4]

    def loss_fn():
        return nll_of(model, document, target)

    analytic = backward(model, loss_fn())
    numeric = finite_difference_grads(model, loss_fn)
    for name in analytic:
        a = analytic[name]
        f = numeric[name]
        err = (a - f).abs() / (f.abs() + 1e-3)
        assert err.max().item() < 1e-4, f"{name}: max rel err {err.max().item()}"


def test_backward_is_linear_in_loss():
    model = tiny_model(seed=4)
    loss_a = nll_of(model, [4, 5, 6], [7])
    loss_b = nll_of(model, [8, 9], [10, 4])
    grads_a = backward(model, loss_a)
    grads_b = backward(model, loss_b)
    loss_a2 = nll_of(model, [4, 5, 6], [7])
    loss_b2 = nll_of(model, [8, 9], [10, 4])
    grads_sum = backward(model, loss_a2 + loss_b2)
    for name in grads_sum:
        assert torch.allclose(grads_sum[name], grads_a[name] + grads_b[name], atol=1e-10)


def test_backward_zero_for_satisfied_hinge():
    model = tiny_model(seed=5)
    f_better = nll_of(model, [4, 5], [6])
    hinge = torch.clamp(f_better - (f_better + 5.0) + 1.0, min=0.0)
    grads = backward(model, hinge)
    assert all(torch.equal(g, torch.zeros_like(g)) for g in grads.values())


def test_adam_zero_gradient_keeps_parameters():
    model = tiny_model(seed=6, dtype=torch.float32)
    before = {n: p.clone() for n, p in model.named_parameters()}
    state = init_adam_state(model)
    grads = {n: torch.zeros_like(p) for n, p in model.named_parameters()}
    adam_step(model, grads, state, learning_rate=1e-2)
    for name, param in model.named_parameters():
        assert torch.equal(param, before[name])


def test_adam_first_step_magnitude_is_learning_rate():
    model = tiny_model(seed=7, dtype=torch.float64)
    before = {n: p.clone() for n, p in model.named_parameters()}
    state = init_adam_state(model)
    grads = {n: torch.full_like(p, 0.5) for n, p in model.named_parameters()}
    adam_step(model, grads, state, learning_rate=1e-3)
    for name, param in model.named_parameters():
        step = before[name] - param
        assert (step - 1e-3).abs().max().item() < 1e-6


def test_adam_decoupled_weight_decay():
    model = tiny_model(seed=8, dtype=torch.float64)
    before = {n: p.clone() for n, p in model.named_parameters()}
    state = init_adam_state(model)
    grads = {n: torch.zeros_like(p) for n, p in model.named_parameters()}
    adam_step(model, grads, state, learning_rate=1e-2, weight_decay=0.1)
    for name, param in model.named_parameters():
        assert torch.allclose(param, before[name] * (1 - 1e-2 * 0.1), atol=1e-12)


def test_adam_rejects_nonfinite_gradients():
    model = tiny_model(seed=9, dtype=torch.float32)
    state = init_adam_state(model)
    grads = {n: torch.zeros_like(p) for n, p in model.named_parameters()}
    first = next(iter(grads))
    grads[first].view(-1)[0] = float("inf")
    with pytest.raises(ValueError, match="non-finite"):
        adam_step(model, grads, state, learning_rate=1e-3)


def test_adam_is_deterministic_over_100_steps():
    def run():
        model = Seq2SeqModel(TINY, seed=11)
        state = init_adam_state(model)
        gen = torch.Generator().manual_seed(42)
        for _ in range(100):
            grads = {
                n: torch.randn(p.shape, generator=gen, dtype=p.dtype)
                for n, p in model.named_parameters()
            }
            adam_step(model, grads, state, learning_rate=1e-3, weight_decay=0.01)
        return {n: p.detach().clone() for n, p in model.named_parameters()}

    first = run()
    second = run()
    for name in first:
        assert torch.equal(first[name], second[name])


def test_student_init_full_copy_is_identity():
    teacher = Seq2SeqModel(ModelConfig(vocab_size=11, d_model=8, num_heads=2, ff_dim=16,
                                       encoder_layers=1, decoder_layers=3, max_positions=16), seed=12)
    student = init_student_from_teacher(teacher, [0, 1, 2])
    t_state = teacher.state_dict()
    s_state = student.state_dict()
    assert set(t_state) == set(s_state)
    for name in t_state:
        assert torch.equal(t_state[name], s_state[name])


def test_student_init_copies_selected_layers():
    teacher = Seq2SeqModel(ModelConfig(vocab_size=11, d_model=8, num_heads=2, ff_dim=16,
                                       encoder_layers=2, decoder_layers=4, max_positions=16), seed=13)
    student = init_student_from_teacher(teacher, [0, 3])
    assert student.config.decoder_layers == 2
    t_state = teacher.state_dict()
    s_state = student.state_dict()
    for name, value in t_state.items():
        if name.startswith("decoder_layers."):
            continue
        assert torch.equal(value, s_state[name])
    for student_idx, teacher_idx in enumerate([0, 3]):
        for name, value in t_state.items():
            prefix = f"decoder_layers.{teacher_idx}."
            if name.startswith(prefix):
                mapped = f"decoder_layers.{student_idx}." + name[len(prefix):]
                assert torch.equal(value, s_state[mapped])


def test_student_init_rejects_bad_indices():
    teacher = tiny_model(seed=14, dtype=torch.float32)
    with pytest.raises(ValueError, match="strictly increasing"):
        init_student_from_teacher(teacher, [0, 0])
    with pytest.raises(ValueError):
        init_student_from_teacher(teacher, [5])
    with pytest.raises(ValueError, match="nonempty"):
        init_student_from_teacher(teacher, [])


def test_default_decoder_indices_spacing():
    assert default_decoder_indices(12, 3) == [0, 5, 11]
    assert default_decoder_indices(12, 12) == list(range(12))
    assert default_decoder_indices(2, 1) == [1]
    assert default_decoder_indices(4, 2) == [0, 3]
    with pytest.raises(ValueError):
        default_decoder_indices(4, 5)


def vocab_for_model():
    return Vocabulary([f"w{i}" for i in range(TINY.vocab_size - 4)])


def test_checkpoint_roundtrip_bitwise(tmp_path):
    model = tiny_model(seed=15, dtype=torch.float32)
    vocab = vocab_for_model()
    path = tmp_path / "model.dscl"
    save_checkpoint(model, vocab, path)
    loaded, loaded_vocab = load_checkpoint(path)
    assert loaded_vocab.to_token_list() == vocab.to_token_list()
    for (name, param), (lname, lparam) in zip(model.named_parameters(), loaded.named_parameters()):
        assert name == lname
        assert torch.equal(param, lparam)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.dscl"
    path.write_bytes(b"NOPE" + bytes(64))
    with pytest.raises(CheckpointMagicError):
        load_checkpoint(path)


def test_checkpoint_truncated(tmp_path):
    model = tiny_model(seed=16, dtype=torch.float32)
    path = tmp_path / "model.dscl"
    save_checkpoint(model, vocab_for_model(), path)
    blob = path.read_bytes()
    (tmp_path / "cut.dscl").write_bytes(blob[: len(blob) - 64])
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(tmp_path / "cut.dscl")
    (tmp_path / "tiny.dscl").write_bytes(blob[:6])
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(tmp_path / "tiny.dscl")


def test_checkpoint_shape_mismatch_names_parameter(tmp_path):
    model = tiny_model(seed=17, dtype=torch.float32)
    path = tmp_path / "model.dscl"
    save_checkpoint(model, vocab_for_model(), path)
    blob = path.read_bytes()
    (header_len,) = struct.unpack("<I", blob[5:9])
    header = json.loads(blob[9 : 9 + header_len])
    header["manifest"][0]["shape"] = [1, 1]
    header["manifest"][0]["count"] = 1
    new_header = json.dumps(header, ensure_ascii=False, sort_keys=True).encode("utf-8")
    tampered = blob[:5] + struct.pack("<I", len(new_header)) + new_header + blob[9 + header_len :]
    bad = tmp_path / "tampered.dscl"
    bad.write_bytes(tampered)
    first_param = header["manifest"][0]["name"]
    with pytest.raises(CheckpointShapeError, match=first_param.replace(".", r"\.")):
        load_checkpoint(bad)
