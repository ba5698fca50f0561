"""Self-verification suites: every module invariant, runnable without pytest.

Each suite is a function returning ``(passed, detail)``; :func:`run_all`
executes them and collects :class:`SuiteResult` records. Sizes are reduced
compared with the test-suite versions so a full run takes well under a minute
(plus the timing suite).
"""

from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import container
from .backbone import (
    BackboneConfig,
    forward_logits,
    fuse_sequence,
    init_backbone,
    step_embedding,
)
from .bench import ThroughputReport, scaling_sweep
from .model import CobraConfig, init_cobra, loss_and_grads
from .nn import flatten, unflatten
from .prompting import (
    Conversation,
    apply_ocr_ordering,
    detokenize,
    render_base,
    render_chat,
    tokenize,
)
from .ssm import (
    LtiSsmParams,
    build_kernel,
    discretize_zoh,
    init_mamba_block,
    lti_forward_convolutional,
    lti_scan_recurrent,
    mamba_block_forward,
    mamba_block_step,
    selective_scan,
)
from .training import TrainConfig, lr_at, make_synthetic_dataset, train_toy
from .vision import ImageInput, VisualFeatures

FAULTS = ("kernel",)


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str
    seconds: float

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def random_stable_lti(rng: np.random.Generator, max_channels: int = 4, max_state: int = 8) -> LtiSsmParams:
    D = int(rng.integers(1, max_channels + 1))
    N = int(rng.integers(1, max_state + 1))
    return LtiSsmParams(
        delta=np.exp(rng.uniform(np.log(1e-3), np.log(1.0), size=D)),
        A=-np.exp(rng.uniform(np.log(0.1), np.log(10.0), size=(D, N))),
        B=rng.normal(size=(D, N)),
        C=rng.normal(size=(D, N)),
    )


FD_STEP = float(np.cbrt(np.finfo(float).eps))  # balances O(h^2) truncation against O(eps/h) roundoff


def numeric_gradient(f: Callable[[dict], float], params: dict[str, np.ndarray], keys, eps: float = FD_STEP):
    """Central differences of ``f`` w.r.t. every entry of ``params[k]`` for ``k`` in ``keys``."""
    out = {}
    for k in keys:
        v = params[k]
        g = np.zeros_like(v)
        for idx in np.ndindex(v.shape):
            p = dict(params)
            hi, lo = v.copy(), v.copy()
            hi[idx] += eps
            lo[idx] -= eps
            p[k] = hi
            fp = f(p)
            p[k] = lo
            g[idx] = (fp - f(p)) / (2 * eps)
        out[k] = g
    return out


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


# --------------------------------------------------------------------------
# suites
# --------------------------------------------------------------------------


def suite_lti_equivalence(trials: int = 1000, fault: str | None = None, seed: int = 0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(trials):
        d = discretize_zoh(random_stable_lti(rng))
        L = (1, 64, 257)[i % 3]
        x = rng.normal(size=(L, d.channels))
        kernel = build_kernel(d, L)
        if fault == "kernel":
            kernel = kernel.copy()
            kernel[0] += 1.0  # K[0] != C B_bar
        y_conv = lti_forward_convolutional(d, x, kernel=kernel)
        y_rec, _ = lti_scan_recurrent(d, x)
        worst = max(worst, float(np.max(np.abs(y_conv - y_rec))))
    return worst < 1e-10, f"max |conv - recurrent| = {worst:.3e} over {trials} systems"


def suite_selective_scan_equivalence(configs: int = 100, seed: int = 1):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(configs):
        blk = init_mamba_block(int(rng.integers(2, 9)), int(rng.integers(1, 9)), rng=rng)
        L = int(rng.choice([1, 2, 3, 255, 257, 1000, 4096])) if i else 4096
        x = rng.normal(size=(L, blk.d_inner))
        y_s, h_s = selective_scan(x, blk.ssm, "sequential")
        y_p, h_p = selective_scan(x, blk.ssm, "parallel")
        worst = max(worst, float(np.max(np.abs(y_s - y_p))), float(np.max(np.abs(h_s - h_p))))
    return worst < 1e-5, f"max |parallel - sequential| = {worst:.3e} over {configs} configs"


def suite_zoh(seed: int = 2):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(200):
        delta, a, b = float(rng.uniform(1e-3, 2.0)), float(-rng.uniform(1e-2, 10.0)), float(rng.normal())
        d = discretize_zoh(LtiSsmParams.scalar(delta, a, b))
        worst = max(worst, abs(d.A_bar[0, 0] - math.exp(delta * a)),
                    abs(d.B_bar[0, 0] - (math.exp(delta * a) - 1) / a * b))
    # error of the first-order (Euler) approximation must shrink ~4x per halving of delta
    ratios = []
    p = LtiSsmParams.scalar(0.1, -1.5, 0.7)
    prev = None
    for k in range(6):
        delta = 0.1 / 2 ** k
        d = discretize_zoh(dataclasses.replace(p, delta=np.array([delta])))
        err = abs(d.A_bar[0, 0] - (1 + delta * p.A[0, 0])) + abs(d.B_bar[0, 0] - delta * p.B[0, 0])
        if prev is not None:
            ratios.append(prev / err)
        prev = err
    ok = worst < 1e-12 and all(3.5 < r < 4.5 for r in ratios)
    return ok, f"closed-form max err {worst:.2e}; halving ratios {[round(float(r), 3) for r in ratios]}"


def suite_stability(seed: int = 3):
    rng = np.random.default_rng(seed)
    blk = init_mamba_block(8, 8, rng=rng)
    A = blk.ssm.A
    deltas = np.exp(rng.uniform(-12, 6, size=(1000, 1, 1)))
    a_bar = np.exp(deltas * A)
    x = rng.uniform(-1e3, 1e3, size=(128, 8))
    out = mamba_block_forward(x, blk)
    ok = bool(np.all(A < 0) and np.all(np.abs(a_bar) < 1) and np.all(np.isfinite(out)))
    return ok, f"max |A_bar| = {np.abs(a_bar).max():.6f}; block output finite for |x| <= 1e3"


def suite_streaming_equivalence(seed: int = 4):
    rng = np.random.default_rng(seed)
    blk = init_mamba_block(8, 4, rng=rng)
    x = rng.normal(size=(64, 8))
    y = mamba_block_forward(x, blk)
    state = blk.new_state()
    rows = []
    for t in range(64):
        o, state = mamba_block_step(state, x[t], blk)
        rows.append(o)
    block_err = float(np.max(np.abs(np.array(rows) - y)))

    bb = init_backbone(BackboneConfig(d_model=16, n_layers=2), seed)
    H = rng.normal(size=(64, 16))
    full = forward_logits(bb, H)
    states = bb.new_states()
    rows = []
    for t in range(64):
        lg, states = step_embedding(bb, states, H[t])
        rows.append(lg)
    lm_err = float(np.max(np.abs(np.array(rows) - full)))
    return max(block_err, lm_err) < 1e-6, f"block {block_err:.2e}, backbone logits {lm_err:.2e}"


def suite_state_boundedness(seed: int = 5):
    bb = init_backbone(BackboneConfig(d_model=16, n_layers=2), seed)
    rng = np.random.default_rng(seed)
    states = bb.new_states()
    sizes = {}
    for t in range(1, 4097):
        _, states = step_embedding(bb, states, rng.normal(size=16))
        if t in (1, 16, 256, 4096):
            sizes[t] = len(b"".join(s.to_bytes() for s in states))
    return len(set(sizes.values())) == 1, f"serialized state bytes by step: {sizes}"


def _tiny_cobra(seed: int = 0, projector: str = "mlp"):
    cfg = CobraConfig(image_size=16, patch_size=4, dino_dim=3, siglip_dim=3, projector=projector,
                      backbone=BackboneConfig(d_model=4, n_layers=1, d_state=4))
    return init_cobra(cfg, seed)


def suite_gradient_check(seed: int = 6):
    model = _tiny_cobra(seed)
    rng = np.random.default_rng(seed)
    feats = VisualFeatures(rng.normal(size=(4, 6)), 2)  # 4 visual tokens
    ids = np.array(tokenize("ab?x"))                     # 4 visual + 4 text = 8 positions
    mask = np.array([False, False, True, True])
    loss, grads = loss_and_grads(model, feats, ids, mask)
    flat = flatten(model)
    keys = [k for k in grads if not k.startswith("backbone.embedding")]

    def f(p):
        return loss_and_grads(unflatten(model, p), feats, ids, mask)[0]

    num = numeric_gradient(f, flat, keys)
    worst = max(relative_error(grads[k], num[k]) for k in keys)
    return worst < 1e-4, f"max per-tensor relative error {worst:.2e} over {len(keys)} tensors"


def suite_causality(seed: int = 7):
    bb = init_backbone(BackboneConfig(d_model=16, n_layers=2), seed)
    rng = np.random.default_rng(seed)
    H = rng.normal(size=(32, 16))
    base = forward_logits(bb, H)
    ok = True
    for t in (0, 10, 31):
        H2 = H.copy()
        H2[t] += rng.normal(size=16)
        ok &= bool(np.array_equal(forward_logits(bb, H2)[:t], base[:t]))
    return ok, "logits before a perturbed position are bitwise unchanged"


def suite_token_accounting():
    counts = {}
    for proj in ("mlp", "ldp"):
        model = init_cobra(CobraConfig(projector=proj))
        from .model import encode_image, project_visual
        img = ImageInput(np.zeros((3, 378, 378)))
        vis = project_visual(model, encode_image(model, img))
        seq = fuse_sequence(vis, tokenize("hello"), model.backbone)
        counts[proj] = (vis.num_tokens, len(seq))
    ok = counts["mlp"] == (729, 734) and counts["ldp"] == (196, 201)
    return ok, f"(visual tokens, sequence length) = {counts}"


def suite_prompt_fidelity():
    checks = {
        "chat": render_chat(Conversation.single("hi")) == "<|user|>\nhi<|endoftext|>\n<|assistant|>\n",
        "base": render_base(Conversation((("user", "X1"), ("assistant", "A1"), ("user", "X2"))))
        == "In:X1\nOut:A1<|endoftext|>\nIn:X2\nOut:",
        "ocr_first": apply_ocr_ordering("What is written?", "STOP", "ocr_first")
        == "Reference OCR token: STOP\nWhat is written?",
        "ocr_last": apply_ocr_ordering("What is written?", "STOP", "ocr_last")
        == "What is written?\nReference OCR token: STOP",
    }
    return all(checks.values()), f"checks: {checks}"


def suite_tokenizer_roundtrip(seed: int = 8):
    rng = np.random.default_rng(seed)
    fails = 0
    for _ in range(500):
        n = int(rng.integers(0, 30))
        cps = rng.integers(0x20, 0x3000, size=n)
        s = "".join(chr(int(c)) for c in cps if not 0xD800 <= c < 0xE000)
        fails += detokenize(tokenize(s)) != s
    all_bytes = all(detokenize(tokenize(chr(b))) == chr(b) for b in range(128))
    return fails == 0 and all_bytes, f"{fails} round-trip failures in 500 fuzz strings"


def suite_lr_schedule():
    cfg = TrainConfig(lr=1.0)
    total = 1000
    vals = [lr_at(s, total, cfg) for s in range(total + 1)]
    warm = math.ceil(0.03 * total)
    peak_ok = vals[warm] == 1.0 and max(vals) == 1.0
    mono = all(vals[i + 1] <= vals[i] for i in range(warm, total))
    ok = vals[0] == 0.0 and peak_ok and mono and vals[-1] < 1e-3
    return ok, f"lr(0)={vals[0]}, lr(warm-up end)={vals[warm]}, lr(end)={vals[-1]:.2e}, monotone decay={mono}"


def suite_training(seed: int = 9):
    cfg = CobraConfig(image_size=16, patch_size=8, dino_dim=8, siglip_dim=8,
                      backbone=BackboneConfig(d_model=16, n_layers=2, d_state=4))
    model = init_cobra(cfg, seed)
    data = make_synthetic_dataset(8, 16, seed)
    tc = TrainConfig(lr=1e-2, steps=2, batch_size=2, warmup_ratio=0.0)
    before = flatten(model)
    pre = flatten(train_toy(model, data, tc, trainable="projector").model)
    ft = flatten(train_toy(model, data, tc, trainable="all").model)
    frozen = all(np.array_equal(pre[k], before[k]) for k in before if k.startswith("backbone."))
    moved_proj = any(not np.array_equal(pre[k], before[k]) for k in before if k.startswith("projector."))
    ft_bb = any(not np.array_equal(ft[k], before[k]) for k in before if k.startswith("backbone."))
    ft_pr = any(not np.array_equal(ft[k], before[k]) for k in before if k.startswith("projector."))
    enc_frozen = all(np.array_equal(ft[k], before[k]) for k in before if k.startswith("encoder_"))
    ok = frozen and moved_proj and ft_bb and ft_pr and enc_frozen
    return ok, (f"pre-align: backbone frozen={frozen}, projector moved={moved_proj}; "
                f"fine-tune: backbone moved={ft_bb}, projector moved={ft_pr}; encoders frozen={enc_frozen}")


def suite_throughput_arithmetic():
    worst = 0.0
    rng = np.random.default_rng(10)
    for _ in range(1000):
        n = int(rng.integers(1, 4096))
        r = ThroughputReport("x", 729, n, float(rng.uniform(1e-3, 100)))
        worst = max(worst, abs(r.eval_avg * r.total_seconds - n) / n)
    published = ThroughputReport("cobra", 729, 256, 1.54)
    return worst <= 2 * np.finfo(float).eps, (
        f"max rel |Eval_avg * T_total - n| = {worst:.1e}; 256 / 1.54 s = {published.eval_avg:.2f} tok/s"
    )


def suite_container_roundtrip(seed: int = 11):
    rng = np.random.default_rng(seed)
    entries = {"features": rng.normal(size=(729, 32)), "scalar": np.array(3.0), "v": rng.normal(size=5)}
    back = container.loads(container.dumps(entries))
    ok = all(np.array_equal(back[k], v) and back[k].shape == v.shape for k, v in entries.items())
    try:
        container.loads(container.dumps(entries)[:-3])
        ok = False
    except container.ContainerFormatError:
        pass
    return ok, "bitwise round trip; truncated data rejected"


def suite_decode_scaling():
    bb = init_backbone(BackboneConfig(d_model=32, n_layers=2, d_state=8))
    r = scaling_sweep(bb, contexts=(256, 4096), n_steps=256, repeats=9)
    ok = (r.ssm_ratio < 1.2 and r.attention_ratio > 4 and len(set(r.ssm_state_bytes)) == 1
          and r.attention_cache_entries == list(r.contexts))
    return ok, (f"ssm ratio {r.ssm_ratio:.3f}, attention ratio {r.attention_ratio:.2f}, "
                f"ssm state bytes {r.ssm_state_bytes}, kv entries {r.attention_cache_entries}")


SUITES: dict[str, Callable] = {
    "lti_equivalence": suite_lti_equivalence,
    "selective_scan_equivalence": suite_selective_scan_equivalence,
    "zoh_discretization": suite_zoh,
    "stability": suite_stability,
    "streaming_equivalence": suite_streaming_equivalence,
    "state_boundedness": suite_state_boundedness,
    "gradient_check": suite_gradient_check,
    "causality": suite_causality,
    "token_accounting": suite_token_accounting,
    "prompt_fidelity": suite_prompt_fidelity,
    "tokenizer_roundtrip": suite_tokenizer_roundtrip,
    "lr_schedule": suite_lr_schedule,
    "training_partition": suite_training,
    "throughput_arithmetic": suite_throughput_arithmetic,
    "container_roundtrip": suite_container_roundtrip,
    "decode_scaling": suite_decode_scaling,
}
TIMING_SUITES = ("decode_scaling",)


def run_all(fault: str | None = None, skip_timing: bool = False,
            only: list[str] | None = None) -> list[SuiteResult]:
    results = []
    for name, fn in SUITES.items():
        if only and name not in only:
            continue
        if skip_timing and name in TIMING_SUITES:
            continue
        t0 = time.perf_counter()
        try:
            passed, detail = fn(fault=fault) if name == "lti_equivalence" else fn()
        except Exception as exc:  # a crashing suite is a failing suite
            passed, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(SuiteResult(name, bool(passed), detail, time.perf_counter() - t0))
    return results
