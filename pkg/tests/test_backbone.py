import io
import json
import math

import numpy as np
import pytest

from cobra_ssm.backbone import (
    BackboneConfig,
    GenerationSession,
    MultimodalSequence,
    SamplingConfig,
    embed,
    forward_logits,
    fuse_sequence,
    generate,
    init_backbone,
    jsonl_trace,
    next_token_loss,
    prefill,
    step_embedding,
)
from cobra_ssm.errors import ConfigurationError, PreconditionError, ShapeError, StateError
from cobra_ssm.model import (
    CheckpointError,
    CobraConfig,
    build_sequence,
    checkpoint_entries,
    encode_image,
    init_cobra,
    load_checkpoint,
    loss_and_grads,
    model_from_entries,
    project_visual,
    save_checkpoint,
)
from cobra_ssm import container
from cobra_ssm.nn import flatten, unflatten
from cobra_ssm.prompting import EOT_ID, Conversation, prompt_segments, tokenize, tokenize_segments
from cobra_ssm.verify import numeric_gradient, relative_error
from cobra_ssm.vision import ImageInput, VisualFeatures

TINY = BackboneConfig(vocab_size=300, d_model=16, n_layers=2)


@pytest.fixture(scope="module")
def bb():
    return init_backbone(TINY, 0)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        BackboneConfig(vocab_size=100)


def test_fused_length(bb):
    seq = fuse_sequence(np.zeros((729, 16)), np.arange(10), bb)
    assert len(seq) == 739 and seq.n_visual == 729
    assert np.all(seq.token_ids[:729] == -1)


def test_text_only_is_plain_embedding(bb):
    ids = tokenize("hello")
    seq = fuse_sequence(None, ids, bb)
    np.testing.assert_array_equal(seq.embeddings, embed(bb, ids))


def test_fuse_errors(bb):
    with pytest.raises(PreconditionError):
        fuse_sequence(None, [], bb)
    with pytest.raises(ShapeError):
        fuse_sequence(np.zeros((4, 15)), [1], bb)
    with pytest.raises(ShapeError):
        embed(bb, [300])


def test_mask_counts_answer_tokens(bb):
    conv = Conversation.single("What color is the square?", "red")
    ids, flags = tokenize_segments(prompt_segments(conv, "chat"))
    seq = fuse_sequence(np.zeros((9, 16)), ids, bb, answer_mask=flags)
    assert seq.loss_mask.sum() == len("red") + 1


def test_tiny_end_to_end_finite(bb):
    logits = forward_logits(bb, fuse_sequence(None, tokenize("smoke test"), bb))
    assert logits.shape == (10, 300) and np.all(np.isfinite(logits))


def test_causality_bitwise(bb):
    H = np.random.default_rng(0).normal(size=(20, 16))
    base = forward_logits(bb, H)
    H2 = H.copy()
    H2[-1] += 5.0
    assert np.array_equal(forward_logits(bb, H2)[:-1], base[:-1])


@pytest.mark.parametrize("mode", ["parallel", "sequential"])
def test_streaming_matches_full(bb, mode):
    H = np.random.default_rng(1).normal(size=(64, 16))
    full = forward_logits(bb, H, mode=mode)
    states = bb.new_states()
    for t in range(64):
        lg, states = step_embedding(bb, states, H[t])
        assert np.max(np.abs(lg - full[t])) < 1e-6


def _seq_with_targets(V, targets):
    ids = np.concatenate([[0], targets])
    mask = np.ones(ids.size, bool)
    return MultimodalSequence(np.zeros((ids.size, 1)), ids, mask)


def test_uniform_logits_loss():
    seq = _seq_with_targets(256, np.arange(5))
    assert next_token_loss(np.zeros((6, 256)), seq) == pytest.approx(math.log(256))
    assert math.log(256) == pytest.approx(5.5452, abs=1e-4)


def test_confident_logits_loss_vanishes():
    targets = np.array([3, 1, 4])
    seq = _seq_with_targets(10, targets)
    logits = np.zeros((4, 10))
    logits[np.arange(3), targets] = 100.0
    assert next_token_loss(logits, seq) < 1e-30


def test_loss_gradient_wrt_logits():
    rng = np.random.default_rng(2)
    seq = _seq_with_targets(7, rng.integers(0, 7, size=4))
    logits = rng.normal(size=(5, 7))
    _, g = next_token_loss(logits, seq, return_grad=True)
    num = numeric_gradient(lambda p: next_token_loss(p["z"], seq), {"z": logits}, ["z"])["z"]
    assert relative_error(g, num) < 1e-6


def test_empty_mask_rejected():
    seq = MultimodalSequence(np.zeros((3, 1)), np.zeros(3, np.int64), np.zeros(3, bool))
    with pytest.raises(PreconditionError):
        next_token_loss(np.zeros((3, 5)), seq)


def _tiny_cobra(projector="mlp", seed=0):
    cfg = CobraConfig(image_size=16, patch_size=4, dino_dim=3, siglip_dim=3, projector=projector,
                      backbone=BackboneConfig(d_model=4, n_layers=1, d_state=4))
    return init_cobra(cfg, seed)


@pytest.mark.parametrize("projector", ["mlp", "ldp"])
def test_full_gradient_check(projector):
    model = _tiny_cobra(projector, seed=3)
    rng = np.random.default_rng(3)
    feats = VisualFeatures(rng.normal(size=(4, 6)), 2)
    ids = np.array(tokenize("ab?x"))
    mask = np.array([False, False, True, True])
    _, grads = loss_and_grads(model, feats, ids, mask)
    flat = flatten(model)

    def f(p):
        return loss_and_grads(unflatten(model, p), feats, ids, mask)[0]

    keys = [k for k in grads if k != "backbone.embedding"]
    num = numeric_gradient(f, flat, keys)
    for k in keys:
        assert relative_error(grads[k], num[k]) < 1e-4, k


def test_embedding_gradient_includes_lookup():
    # tied embeddings: the gradient has an unembedding part and a lookup part; check a few rows
    model = _tiny_cobra(seed=4)
    feats = VisualFeatures(np.random.default_rng(4).normal(size=(4, 6)), 2)
    ids = np.array(tokenize("ab?x"))
    mask = np.array([False, False, True, True])
    _, grads = loss_and_grads(model, feats, ids, mask)
    flat = flatten(model)
    emb = flat["backbone.embedding"]
    for row in (97, 98, 120, 5):
        for col in range(emb.shape[1]):
            p = dict(flat)
            hi, lo = emb.copy(), emb.copy()
            hi[row, col] += 1e-6
            lo[row, col] -= 1e-6
            p["backbone.embedding"] = hi
            fp = loss_and_grads(unflatten(model, p), feats, ids, mask)[0]
            p["backbone.embedding"] = lo
            fm = loss_and_grads(unflatten(model, p), feats, ids, mask)[0]
            assert grads["backbone.embedding"][row, col] == pytest.approx((fp - fm) / 2e-6, rel=1e-4, abs=1e-9)


def test_token_accounting_default_pipeline():
    for projector, expected in (("mlp", 729), ("ldp", 196)):
        model = init_cobra(CobraConfig(projector=projector))
        assert model.config.num_visual_tokens == expected
        vis = project_visual(model, encode_image(model, ImageInput(np.zeros((3, 378, 378)))))
        assert vis.num_tokens == expected


def test_greedy_generation_deterministic(bb):
    seq = fuse_sequence(None, tokenize("abc"), bb)
    out1 = generate(GenerationSession(SamplingConfig(max_new=12, stop_id=None)), seq, bb)
    out2 = generate(GenerationSession(SamplingConfig(max_new=12, stop_id=None)), seq, bb)
    assert out1 == out2 and len(out1) == 12


def test_sampled_generation_seeded(bb):
    seq = fuse_sequence(None, tokenize("abc"), bb)
    sc = SamplingConfig(greedy=False, temperature=1.5, max_new=10, stop_id=None, seed=7)
    assert generate(GenerationSession(sc), seq, bb) == generate(GenerationSession(sc), seq, bb)


def test_first_generated_token_matches_forward(bb):
    ids = tokenize("hello")
    seq = fuse_sequence(None, ids, bb)
    session = GenerationSession(SamplingConfig(max_new=3, stop_id=None))
    out = generate(session, seq, bb)
    full = forward_logits(bb, fuse_sequence(None, ids + out[:1], bb))
    assert out[0] == int(np.argmax(full[len(ids) - 1]))
    # the logits after stepping the first token equal the full forward at that position
    s2 = GenerationSession(SamplingConfig(max_new=1, stop_id=None))
    generate(s2, seq, bb)
    assert np.max(np.abs(s2.last_logits - full[-1])) < 1e-6


def test_generation_stops_on_stop_token(bb):
    seq = fuse_sequence(None, tokenize("x"), bb)
    first = generate(GenerationSession(SamplingConfig(max_new=1, stop_id=None)), seq, bb)[0]
    session = GenerationSession(SamplingConfig(max_new=10, stop_id=first))
    assert generate(session, seq, bb) == [] and session.stopped


def test_resumed_session_matches_single_pass(bb):
    a, b = tokenize("first part "), tokenize("second")
    one = GenerationSession(SamplingConfig(max_new=5, stop_id=None))
    out_one = generate(one, fuse_sequence(None, a + b, bb), bb)
    two = GenerationSession(SamplingConfig(max_new=5, stop_id=None))
    prefill(bb, two, fuse_sequence(None, a, bb))
    out_two = generate(two, fuse_sequence(None, b, bb), bb)
    assert out_one == out_two


def test_session_state_constant_size(bb):
    session = GenerationSession(SamplingConfig(max_new=1, stop_id=None))
    generate(session, fuse_sequence(None, tokenize("a"), bb), bb)
    n1 = len(session.state_bytes())
    session = GenerationSession(SamplingConfig(max_new=1, stop_id=None))
    generate(session, fuse_sequence(None, tokenize("a" * 500), bb), bb)
    assert len(session.state_bytes()) == n1 == session.state_nbytes


def test_session_layer_mismatch(bb):
    session = GenerationSession(SamplingConfig(max_new=2), states=bb.new_states()[:1])
    with pytest.raises(StateError):
        generate(session, fuse_sequence(None, [1], bb), bb)


def test_trace_records(bb):
    buf = io.StringIO()
    out = generate(GenerationSession(SamplingConfig(max_new=4, stop_id=None)),
                   fuse_sequence(None, [1, 2], bb), bb, trace=jsonl_trace(buf))
    recs = [json.loads(line) for line in buf.getvalue().splitlines()]
    assert [r["token"] for r in recs] == out
    assert all(r["latency_us"] > 0 for r in recs)


def test_checkpoint_round_trip(tmp_path):
    model = init_cobra(CobraConfig(image_size=28, patch_size=14, projector="ldp",
                                   backbone=BackboneConfig(d_model=8, n_layers=1)), seed=5)
    save_checkpoint(model, tmp_path / "m.cssm")
    back = load_checkpoint(tmp_path / "m.cssm")
    assert back.config == model.config
    a, b = flatten(model), flatten(back)
    assert a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)
    conv = Conversation.single("hi")
    img = ImageInput(np.random.default_rng(0).random((3, 28, 28)))
    s1 = build_sequence(model, project_visual(model, encode_image(model, img)), conv)
    s2 = build_sequence(back, project_visual(back, encode_image(back, img)), conv)
    assert np.array_equal(forward_logits(model.backbone, s1), forward_logits(back.backbone, s2))


def test_checkpoint_missing_entry(tmp_path):
    entries = checkpoint_entries(_tiny_cobra())
    del entries["backbone.norm_f"]
    with pytest.raises(CheckpointError):
        model_from_entries(entries)
    entries = checkpoint_entries(_tiny_cobra())
    del entries["config.patch_size"]
    with pytest.raises(CheckpointError, match="config.patch_size"):
        model_from_entries(entries)


def test_checkpoint_wrong_shape():
    entries = checkpoint_entries(_tiny_cobra())
    entries["projector.w1"] = np.zeros((1, 1))
    with pytest.raises(CheckpointError):
        model_from_entries(entries)


def test_untied_head_gradient():
    cfg = CobraConfig(image_size=16, patch_size=4, dino_dim=3, siglip_dim=3,
                      backbone=BackboneConfig(d_model=4, n_layers=1, d_state=2, tie_embeddings=False))
    model = init_cobra(cfg, 6)
    feats = VisualFeatures(np.random.default_rng(6).normal(size=(16, 6)), 4)
    ids = np.array(tokenize("q?" + "a"))
    mask = np.array([False, False, True])
    _, grads = loss_and_grads(model, feats, ids, mask)
    flat = flatten(model)
    num = numeric_gradient(lambda p: loss_and_grads(unflatten(model, p), feats, ids, mask)[0],
                           flat, ["backbone.lm_head", "backbone.norm_f"])
    for k in num:
        assert relative_error(grads[k], num[k]) < 1e-4


def test_container_of_checkpoint_is_plain(tmp_path):
    save_checkpoint(_tiny_cobra(), tmp_path / "m.cssm")
    entries = container.read(tmp_path / "m.cssm")
    assert entries["config.image_size"].shape == ()
    assert "encoder_a.embed" in entries
